#![allow(dead_code)]

use sue_autograd::Tensor;
use sue_core::data::{prompt_for, Label, LabeledSample};
use sue_core::metrics::ScoredSet;
use sue_core::train::{build_model, build_split};
use sue_core::{DualEncoder, ExperimentConfig, PromptBank, Session, SplitMix64};

/// Mann–Whitney statistic by explicit pair counting, as an exact ratio.
pub fn pair_auc(set: &ScoredSet) -> f64 {
    let (mut twice, mut pairs) = (0u64, 0u64);
    for (i, &si) in set.scores().iter().enumerate() {
        if set.labels()[i] != Label::Attack {
            continue;
        }
        for (j, &sj) in set.scores().iter().enumerate() {
            if set.labels()[j] != Label::Bonafide {
                continue;
            }
            pairs += 1;
            twice += if si > sj { 2 } else if si == sj { 1 } else { 0 };
        }
    }
    twice as f64 / (2.0 * pairs as f64)
}

/// ROC vertices from a threshold sweep: `+inf` then every distinct score,
/// descending, each counted from scratch.
pub fn brute_roc(set: &ScoredSet) -> Vec<(f64, f64)> {
    let mut ts: Vec<f64> = set.scores().to_vec();
    ts.sort_by(|a, b| b.total_cmp(a));
    ts.dedup();
    ts.insert(0, f64::INFINITY);
    let na = set.labels().iter().filter(|&&l| l == Label::Attack).count() as f64;
    let nb = set.len() as f64 - na;
    ts.iter()
        .map(|&t| {
            let mut tp = 0.0;
            let mut fp = 0.0;
            for (&s, &l) in set.scores().iter().zip(set.labels()) {
                if s >= t {
                    if l == Label::Attack {
                        tp += 1.0
                    } else {
                        fp += 1.0
                    }
                }
            }
            (fp / nb, tp / na)
        })
        .collect()
}

/// Point where FAR equals FRR on the piecewise-linear sweep.
pub fn brute_eer(set: &ScoredSet) -> f64 {
    let roc = brute_roc(set);
    for w in roc.windows(2) {
        let ((f0, t0), (f1, t1)) = (w[0], w[1]);
        let (g0, g1) = (f0 - (1.0 - t0), f1 - (1.0 - t1));
        if g0 <= 0.0 && g1 >= 0.0 {
            let u = if g1 == g0 { 0.0 } else { g0 / (g0 - g1) };
            return f0 + u * (f1 - f0);
        }
    }
    panic!("sweep never crosses");
}

/// Upper envelope of the interpolated sweep at `fpr = target`.
pub fn brute_tpr_at(set: &ScoredSet, target: f64) -> f64 {
    let roc = brute_roc(set);
    let mut best = 0.0f64;
    for w in roc.windows(2) {
        let ((f0, t0), (f1, t1)) = (w[0], w[1]);
        if f0 <= target && target <= f1 {
            let v = if f1 == f0 { t0.max(t1) } else { t0 + (target - f0) / (f1 - f0) * (t1 - t0) };
            best = best.max(v);
        }
    }
    best
}

/// Random scored set with both classes; odd `seed`s quantize scores to
/// produce heavy ties.
pub fn random_set(seed: u64, max_n: usize) -> ScoredSet {
    let mut rng = SplitMix64::new(seed);
    let n = 2 + rng.below(max_n - 1);
    let shift = rng.range(-0.3, 0.3);
    let quantize = seed % 2 == 1;
    let mut labels: Vec<Label> = (0..n)
        .map(|_| if rng.uniform() < 0.5 { Label::Attack } else { Label::Bonafide })
        .collect();
    labels[0] = Label::Attack;
    labels[1] = Label::Bonafide;
    let scores = labels
        .iter()
        .map(|&l| {
            let centre = if l == Label::Attack { 0.5 + shift } else { 0.5 - shift };
            let s = (centre + 0.25 * rng.normal()).clamp(0.0, 1.0);
            if quantize {
                (s * 10.0).round() / 10.0
            } else {
                s
            }
        })
        .collect();
    ScoredSet::new(scores, labels).unwrap()
}

/// Small model config: 32×32 inputs, `depth` vision blocks, one text block.
pub fn tiny_config(depth: usize) -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.model.dim = 16;
    c.model.heads = 2;
    c.model.depth = depth;
    c.model.ffn_hidden = 32;
    c.model.embed_dim = 8;
    c.model.text_dim = 16;
    c.model.text_heads = 2;
    c.model.text_depth = 1;
    c.placement.vision = vec![depth - 1];
    c.placement.text = vec![];
    c.counts.train = 8;
    c.counts.dev = 8;
    c.counts.test = 8;
    c
}

/// A probe batch from the config's train split, with prompts and labels.
pub struct Probe {
    pub images: Vec<Tensor>,
    pub prompts: Vec<String>,
    pub labels: Vec<bool>,
}

pub fn probe_batch(config: &ExperimentConfig, n: usize) -> Probe {
    let split = build_split(config).unwrap();
    let bank = PromptBank::default();
    let samples: Vec<&LabeledSample> = split.train.iter().take(n).collect();
    Probe {
        images: samples.iter().map(|s| s.image.clone()).collect(),
        prompts: samples.iter().map(|s| prompt_for(s, &bank).unwrap()).collect(),
        labels: samples.iter().map(|s| s.is_attack()).collect(),
    }
}

/// `(l_ce, total)` of `model` on the probe batch without gradients.
pub fn probe_loss(model: &DualEncoder, config: &ExperimentConfig, probe: &Probe) -> (f64, f64) {
    let images: Vec<&Tensor> = probe.images.iter().collect();
    let mut s = Session::new(&model.store, false);
    let out = model
        .batch_loss(
            &mut s,
            &images,
            &probe.prompts,
            &probe.labels,
            config.objective,
            config.weights,
            config.symmetric,
        )
        .unwrap();
    (out.bundle.l_ce, out.bundle.total)
}

pub struct GradProbe {
    pub name: String,
    pub analytic: f64,
    pub numeric: f64,
    pub rel: f64,
}

/// Compares backprop against central differences of the total loss at
/// `probes` seeded coordinates; the first ones land in the routed layer.
pub fn grad_probes(config: &ExperimentConfig, probes: usize, seed: u64) -> Vec<GradProbe> {
    let probe = probe_batch(config, 4);
    let mut model = build_model(config, true).unwrap();
    // larger weights than the 0.02 init so every path carries signal
    let mut rng = SplitMix64::new(seed);
    let ids: Vec<_> = model.store.ids().collect();
    for &id in &ids {
        if model.store.name(id) == "logit_scale" {
            continue;
        }
        for v in model.store.get_mut(id).data_mut() {
            *v += 0.3 * rng.normal();
        }
    }
    let images: Vec<&Tensor> = probe.images.iter().collect();
    let mut s = Session::new(&model.store, true);
    let out = model
        .batch_loss(&mut s, &images, &probe.prompts, &probe.labels, config.objective, config.weights, config.symmetric)
        .unwrap();
    s.graph.backward(out.loss).unwrap();
    // experts that received no token have identically zero gradients
    let grads: Vec<_> = s.grads().into_iter().filter(|(_, g)| g.data().iter().any(|&v| v != 0.0)).collect();
    drop(s);

    let routed: Vec<usize> = (0..grads.len())
        .filter(|&i| {
            let n = model.store.name(grads[i].0);
            n.contains(".gate.") || n.contains(".routed.") || n.contains(".shared.")
        })
        .collect();
    let h = 1e-5;
    (0..probes)
        .map(|p| {
            let gi = if p < 3 && !routed.is_empty() { routed[rng.below(routed.len())] } else { rng.below(grads.len()) };
            let (id, g) = &grads[gi];
            let j = rng.below(g.numel());
            let orig = model.store.get(*id).data()[j];
            model.store.get_mut(*id).data_mut()[j] = orig + h;
            let lp = probe_loss(&model, config, &probe).1;
            model.store.get_mut(*id).data_mut()[j] = orig - h;
            let lm = probe_loss(&model, config, &probe).1;
            model.store.get_mut(*id).data_mut()[j] = orig;
            let numeric = (lp - lm) / (2.0 * h);
            let analytic = g.data()[j];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
            GradProbe {
                name: format!("{}[{j}]", model.store.name(*id)),
                analytic,
                numeric,
                rel,
            }
        })
        .collect()
}
