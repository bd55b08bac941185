//! Warm-up-then-convert training, evaluation and embedding export.
//!
//! Phase 1 trains the plain dual encoder for `warmup_epochs`. The configured
//! blocks are then converted (shared expert copied from the block FFN,
//! routed experts and gates freshly drawn), the optimizer is reset, and
//! phase 2 trains the full objective. The retained model is the phase-2
//! epoch with the best dev AUC.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sue_autograd::{Tensor, TensorError};

use crate::checkpoint::Checkpoint;
use crate::config::{ExperimentConfig, ThresholdMode};
use crate::data::{build_protocol, prompt_for, Family, Label, LabeledSample, ProtocolSplit};
use crate::error::{Error, Result};
use crate::metrics::{apcer, eer, MetricReport, ScoredSet};
use crate::model::{DualEncoder, PromptBank};
use crate::moe::{RouterOutput, UtilizationCounter};
use crate::params::{Adam, Session};
use crate::rng::SplitMix64;

const EVAL_BATCH: usize = 100;

/// Fresh model for `config`, converted when `converted` is set. All draws
/// come from seed-derived streams, so the same config always yields the
/// same parameters.
pub fn build_model(config: &ExperimentConfig, converted: bool) -> Result<DualEncoder> {
    config.validate()?;
    let mut rng = SplitMix64::derive(config.seed, "init", 0);
    let mut model = DualEncoder::new(config.model.clone(), &mut rng)?;
    if converted {
        convert_model(&mut model, config)?;
    }
    Ok(model)
}

fn convert_model(model: &mut DualEncoder, config: &ExperimentConfig) -> Result<()> {
    let mut rng = SplitMix64::derive(config.seed, "convert", 0);
    model.convert(&config.placement, config.sue, &mut rng)?;
    if config.zero_routed_init {
        model.zero_routed();
    }
    let layers: Vec<_> = model.sue_layers().cloned().collect();
    for l in &layers {
        if config.freeze_gates {
            l.gate.params().iter().for_each(|&id| model.store.set_trainable(id, false));
        }
        if config.freeze_routed {
            for e in &l.routed {
                e.params().iter().for_each(|&id| model.store.set_trainable(id, false));
            }
        }
    }
    Ok(())
}

/// Names of the SUE layers in router-output order (vision, then text).
pub fn sue_layer_names(model: &DualEncoder) -> Vec<String> {
    let tower = |name: &str, blocks: &[crate::encoder::Block]| {
        blocks
            .iter()
            .enumerate()
            .filter(|(_, b)| b.sue().is_some())
            .map(|(i, _)| format!("{name}.{i}"))
            .collect::<Vec<_>>()
    };
    let mut v = tower("vision", &model.vision.blocks);
    v.extend(tower("text", &model.text.blocks));
    v
}

pub fn load_bank(config: &ExperimentConfig) -> Result<PromptBank> {
    match &config.prompt_bank {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            PromptBank::parse(&text)
        }
        None => Ok(PromptBank::default()),
    }
}

pub fn build_split(config: &ExperimentConfig) -> Result<ProtocolSplit> {
    build_protocol(config.protocol, config.counts, &config.partition, config.seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerUtilization {
    pub layer: String,
    pub fractions: Vec<f64>,
    pub entropy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// `"warmup"` or `"sue"`.
    pub phase: String,
    pub l_ce: f64,
    pub l_z: f64,
    pub l_b: f64,
    pub total: f64,
    pub dev: MetricReport,
    pub utilization: Vec<LayerUtilization>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunHistory {
    pub epochs: Vec<EpochRecord>,
}

pub struct TrainOutcome {
    /// Best phase-2 model by dev AUC (the final model if phase 2 is empty).
    pub model: DualEncoder,
    pub checkpoint: Checkpoint,
    pub history: RunHistory,
    pub best_epoch: Option<usize>,
    /// Per-batch total losses in training order.
    pub batch_losses: Vec<f64>,
}

/// Generates data from the config and trains.
pub fn train(config: &ExperimentConfig) -> Result<TrainOutcome> {
    let split = build_split(config)?;
    let bank = load_bank(config)?;
    train_on(config, &split, &bank)
}

pub fn train_on(config: &ExperimentConfig, split: &ProtocolSplit, bank: &PromptBank) -> Result<TrainOutcome> {
    config.validate()?;
    bank.validate()?;
    check_dims(config, &split.train)?;
    let mut model = build_model(config, false)?;
    let mut adam = Adam::new(config.adam);
    let mut converted = false;
    if config.warmup_epochs == 0 {
        convert_model(&mut model, config)?;
        converted = true;
    }
    let prompts: Vec<String> = split.train.iter().map(|s| prompt_for(s, bank)).collect::<Result<_>>()?;
    let mut history = RunHistory::default();
    let mut batch_losses = Vec::new();
    let mut best: Option<(f64, usize, DualEncoder, Checkpoint)> = None;

    for epoch in 0..config.epochs {
        if epoch == config.warmup_epochs && !converted {
            convert_model(&mut model, config)?;
            converted = true;
            adam = Adam::new(config.adam);
        }
        let mut order_rng = SplitMix64::derive(config.seed, "epoch-order", epoch as u64);
        let order_seed = order_rng.state();
        let mut order: Vec<usize> = (0..split.train.len()).collect();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut order_rng);

        let names = sue_layer_names(&model);
        let mut counters: Vec<UtilizationCounter> = model
            .sue_layers()
            .map(|l| UtilizationCounter::new(l.n_experts()))
            .collect();
        let mut sums = [0.0f64; 4];
        let mut n_batches = 0usize;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let images: Vec<&Tensor> = chunk.iter().map(|&i| &split.train[i].image).collect();
            let batch_prompts: Vec<String> = chunk.iter().map(|&i| prompts[i].clone()).collect();
            let labels: Vec<bool> = chunk.iter().map(|&i| split.train[i].is_attack()).collect();
            let non_finite = |what: String| Error::NonFinite {
                epoch,
                batch: b,
                batch_seed: order_seed,
                detail: format!(
                    "{what} (samples {:?})",
                    chunk.iter().map(|&i| split.train[i].seed).collect::<Vec<_>>()
                ),
            };
            let mut s = Session::new(&model.store, true);
            let out = model
                .batch_loss(
                    &mut s,
                    &images,
                    &batch_prompts,
                    &labels,
                    config.objective,
                    config.weights,
                    config.symmetric,
                )
                .map_err(|e| match e {
                    // NaN or infinite activations surface as domain errors
                    Error::Tensor(TensorError::Domain(m)) => non_finite(m),
                    other => other,
                })?;
            let bundle = out.bundle;
            if !bundle.total.is_finite() {
                return Err(non_finite(format!("l_ce {} l_z {} l_b {}", bundle.l_ce, bundle.l_z, bundle.l_b)));
            }
            for (c, r) in counters.iter_mut().zip(&out.routers) {
                c.add(&r.selected);
            }
            s.graph.backward(out.loss)?;
            let grads = s.grads();
            drop(s);
            adam.step(&mut model.store, &grads)?;
            model.clamp_logit_scale();
            for (acc, v) in sums.iter_mut().zip([bundle.l_ce, bundle.l_z, bundle.l_b, bundle.total]) {
                *acc += v;
            }
            batch_losses.push(bundle.total);
            n_batches += 1;
        }
        let dev = evaluate_model(&model, config, &split.dev, bank, None)?;
        let utilization = names
            .into_iter()
            .zip(&counters)
            .map(|(layer, c)| {
                let u = c.finish()?;
                Ok(LayerUtilization {
                    layer,
                    fractions: u.fractions,
                    entropy: u.entropy,
                })
            })
            .collect::<Result<_>>()?;
        let nb = n_batches.max(1) as f64;
        history.epochs.push(EpochRecord {
            epoch,
            phase: if converted { "sue" } else { "warmup" }.into(),
            l_ce: sums[0] / nb,
            l_z: sums[1] / nb,
            l_b: sums[2] / nb,
            total: sums[3] / nb,
            dev: dev.report.clone(),
            utilization,
        });
        if converted && best.as_ref().is_none_or(|b| dev.report.auc > b.0) {
            let ck = Checkpoint::capture(config, &model, Some(&adam), epoch as u64 + 1, true, order_seed);
            best = Some((dev.report.auc, epoch, model.clone(), ck));
        }
    }
    if !converted {
        convert_model(&mut model, config)?;
        converted = true;
    }
    let (model, checkpoint, best_epoch) = match best {
        Some((_, e, m, ck)) => (m, ck, Some(e)),
        None => {
            let ck = Checkpoint::capture(config, &model, Some(&adam), config.epochs as u64, converted, 0);
            (model, ck, None)
        }
    };
    Ok(TrainOutcome {
        model,
        checkpoint,
        history,
        best_epoch,
        batch_losses,
    })
}

fn check_dims(config: &ExperimentConfig, samples: &[LabeledSample]) -> Result<()> {
    let m = &config.model;
    let want = [m.channels, m.image_size, m.image_size];
    if let Some(s) = samples.iter().find(|s| s.image.shape() != want) {
        return Err(Error::Config(format!(
            "sample image shape {:?} does not match model input {want:?}",
            s.image.shape()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub report: MetricReport,
    /// APCER restricted to each attack family, where present.
    pub apcer_physical: Option<f64>,
    pub apcer_digital: Option<f64>,
    pub scores: Vec<f64>,
    pub embeddings: Tensor,
    pub utilization: Vec<LayerUtilization>,
}

impl Evaluation {
    /// Mean routing entropy over the vision SUE layers, if any.
    pub fn mean_entropy(&self) -> Option<f64> {
        (!self.utilization.is_empty())
            .then(|| self.utilization.iter().map(|u| u.entropy).sum::<f64>() / self.utilization.len() as f64)
    }
}

/// Raw attack scores, image embeddings and per-layer router outputs.
pub fn score_samples(
    model: &DualEncoder,
    config: &ExperimentConfig,
    samples: &[LabeledSample],
    bank: &PromptBank,
) -> Result<(Vec<f64>, Tensor, Vec<UtilizationCounter>)> {
    check_dims(config, samples)?;
    if samples.is_empty() {
        return Err(Error::Contract("cannot score an empty split".into()));
    }
    let bank_emb = model.bank_embeddings(bank)?;
    let mut counters: Vec<UtilizationCounter> = model
        .vision
        .blocks
        .iter()
        .filter_map(|b| b.sue())
        .map(|l| UtilizationCounter::new(l.n_experts()))
        .collect();
    let mut scores = Vec::with_capacity(samples.len());
    let mut emb = Vec::with_capacity(samples.len() * config.model.embed_dim);
    for chunk in samples.chunks(EVAL_BATCH) {
        let images: Vec<&Tensor> = chunk.iter().map(|s| &s.image).collect();
        let mut routers: Vec<RouterOutput> = Vec::new();
        let (sc, e) = model.score_images(&images, config.objective, &bank_emb, &mut routers)?;
        for (c, r) in counters.iter_mut().zip(&routers) {
            c.add(&r.selected);
        }
        scores.extend(sc);
        emb.extend_from_slice(e.data());
    }
    let embeddings = Tensor::new(vec![samples.len(), config.model.embed_dim], emb)?;
    Ok((scores, embeddings, counters))
}

/// Scores `samples` and computes the metric suite. `threshold` overrides
/// the configured mode (used to carry a dev EER threshold to test).
pub fn evaluate_model(
    model: &DualEncoder,
    config: &ExperimentConfig,
    samples: &[LabeledSample],
    bank: &PromptBank,
    threshold: Option<f64>,
) -> Result<Evaluation> {
    let (scores, embeddings, counters) = score_samples(model, config, samples, bank)?;
    let labels: Vec<Label> = samples.iter().map(|s| s.label).collect();
    let set = ScoredSet::new(scores.clone(), labels)?;
    let threshold = match (threshold, config.threshold) {
        (Some(t), _) => t,
        (None, ThresholdMode::Fixed(t)) => t,
        (None, ThresholdMode::DevEer) => eer(&set)?.1.clamp(0.0, 1.0),
    };
    let report = MetricReport::compute(&set, threshold)?;
    let family_apcer = |f: Family| -> Result<Option<f64>> {
        let (s, l): (Vec<f64>, Vec<Label>) = samples
            .iter()
            .zip(&scores)
            .filter(|(x, _)| x.family == f)
            .map(|(x, &sc)| (sc, x.label))
            .unzip();
        if s.is_empty() {
            return Ok(None);
        }
        Ok(Some(apcer(&ScoredSet::new(s, l)?, threshold)?))
    };
    let names: Vec<String> = sue_layer_names(model).into_iter().filter(|n| n.starts_with("vision")).collect();
    let utilization = names
        .into_iter()
        .zip(&counters)
        .map(|(layer, c)| {
            let u = c.finish()?;
            Ok(LayerUtilization {
                layer,
                fractions: u.fractions,
                entropy: u.entropy,
            })
        })
        .collect::<Result<_>>()?;
    Ok(Evaluation {
        report,
        apcer_physical: family_apcer(Family::Physical)?,
        apcer_digital: family_apcer(Family::Digital)?,
        scores,
        embeddings,
        utilization,
    })
}

/// Test-split evaluation of a trained model, resolving a dev-EER threshold
/// first when configured.
pub fn evaluate(
    model: &DualEncoder,
    config: &ExperimentConfig,
    split: &ProtocolSplit,
    bank: &PromptBank,
) -> Result<Evaluation> {
    let threshold = match config.threshold {
        ThresholdMode::Fixed(t) => t,
        ThresholdMode::DevEer => {
            let dev = evaluate_model(model, config, &split.dev, bank, None)?;
            dev.report.threshold_used
        }
    };
    evaluate_model(model, config, &split.test, bank, Some(threshold))
}

/// One flat evaluation record. `context` fields come first.
pub fn eval_record(context: &[(&str, Value)], eval: &Evaluation) -> Value {
    let mut m = Map::new();
    for (k, v) in context {
        m.insert((*k).to_string(), v.clone());
    }
    m.insert("n".into(), Value::from(eval.scores.len()));
    for (k, v) in eval.report.fields() {
        m.insert(k, Value::from(v));
    }
    m.insert("apcer_physical".into(), eval.apcer_physical.map_or(Value::Null, Value::from));
    m.insert("apcer_digital".into(), eval.apcer_digital.map_or(Value::Null, Value::from));
    m.insert(
        "expert_entropy".into(),
        eval.mean_entropy().map_or(Value::Null, Value::from),
    );
    Value::Object(m)
}

/// Appends one JSON value per line.
pub fn write_jsonl(path: &Path, records: &[Value]) -> Result<()> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r).expect("in-memory write");
        buf.push(b'\n');
    }
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub index: usize,
    pub label: Label,
    pub family: Family,
    pub attack_type: u8,
    pub embedding: Vec<f32>,
}

/// One JSON line per sample, in split order; embeddings at `f32` precision.
pub fn export_embeddings(
    model: &DualEncoder,
    config: &ExperimentConfig,
    samples: &[LabeledSample],
    bank: &PromptBank,
    path: &Path,
) -> Result<usize> {
    let (_, emb, _) = score_samples(model, config, samples, bank)?;
    let mut buf = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        let rec = EmbeddingRecord {
            index: i,
            label: s.label,
            family: s.family,
            attack_type: s.attack_type,
            embedding: emb.row(i).iter().map(|&v| v as f32).collect(),
        };
        serde_json::to_writer(&mut buf, &rec).expect("in-memory write");
        buf.push(b'\n');
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))?;
    Ok(samples.len())
}
