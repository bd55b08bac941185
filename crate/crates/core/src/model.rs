//! Contrastive dual encoder with optional shared-unified-expert blocks.

use std::collections::BTreeMap;

use sue_autograd::{Tensor, TensorError, Var};

use crate::encoder::{FfnSlot, TextEncoder, VisionEncoder};
use crate::error::{Error, Result};
use crate::moe::{load_balance_loss, router_z_loss, total_loss, LossBundle, LossWeights, RouterOutput, SueLayer, SueOptions};
use crate::params::{ParamId, ParamStore, Session};
use crate::rng::SplitMix64;

/// Initial temperature `ln(1/0.07)` and its upper clamp `ln 100`.
pub const LOGIT_SCALE_INIT: f64 = 2.659_260_036_932_778_4;
pub const LOGIT_SCALE_MAX: f64 = 4.605_170_185_988_092;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub image_size: usize,
    pub channels: usize,
    pub patch: usize,
    pub dim: usize,
    pub heads: usize,
    pub depth: usize,
    pub ffn_hidden: usize,
    pub embed_dim: usize,
    pub text_dim: usize,
    pub text_heads: usize,
    pub text_depth: usize,
    pub max_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            channels: 1,
            patch: 8,
            dim: 64,
            heads: 4,
            depth: 6,
            ffn_hidden: 128,
            embed_dim: 32,
            text_dim: 64,
            text_heads: 4,
            text_depth: 2,
            max_len: 40,
        }
    }
}

/// Which blocks of each tower carry a [`SueLayer`].
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Placement {
    pub vision: Vec<usize>,
    pub text: Vec<usize>,
}

impl Placement {
    pub fn is_empty(&self) -> bool {
        self.vision.is_empty() && self.text.is_empty()
    }
}

/// Text prompts per class. Attack prompts may be tagged with the family
/// they describe.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptBank {
    pub real: Vec<String>,
    pub fake: Vec<String>,
    pub fake_physical: Vec<String>,
    pub fake_digital: Vec<String>,
}

impl Default for PromptBank {
    fn default() -> Self {
        Self {
            real: vec!["a photo of a real face".into()],
            fake: vec![
                "a photo of a fake face".into(),
                "a printed photo attack of a face".into(),
                "a digitally manipulated face".into(),
            ],
            fake_physical: vec![],
            fake_digital: vec![],
        }
    }
}

impl PromptBank {
    /// Parses `real:`, `fake:`, `fake/physical:` and `fake/digital:` lines.
    /// Blank lines and lines starting with `#` are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut bank = PromptBank {
            real: vec![],
            fake: vec![],
            fake_physical: vec![],
            fake_digital: vec![],
        };
        for (no, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (tag, prompt) = line
                .split_once(':')
                .ok_or_else(|| Error::Config(format!("prompt bank line {}: missing class prefix", no + 1)))?;
            let prompt = prompt.trim().to_string();
            match tag.trim() {
                "real" => bank.real.push(prompt),
                "fake" => bank.fake.push(prompt),
                "fake/physical" => bank.fake_physical.push(prompt),
                "fake/digital" => bank.fake_digital.push(prompt),
                other => {
                    return Err(Error::Config(format!(
                        "prompt bank line {}: unknown class `{other}`",
                        no + 1
                    )))
                }
            }
        }
        bank.validate()?;
        Ok(bank)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (tag, list) in [
            ("real", &self.real),
            ("fake", &self.fake),
            ("fake/physical", &self.fake_physical),
            ("fake/digital", &self.fake_digital),
        ] {
            for p in list {
                out.push_str(&format!("{tag}: {p}\n"));
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.real.is_empty() {
            return Err(Error::Config("prompt bank has no real-class prompt".into()));
        }
        if self.all_fake().is_empty() {
            return Err(Error::Config("prompt bank has no fake-class prompt".into()));
        }
        Ok(())
    }

    /// Every attack prompt, generic first.
    pub fn all_fake(&self) -> Vec<String> {
        self.fake
            .iter()
            .chain(&self.fake_physical)
            .chain(&self.fake_digital)
            .cloned()
            .collect()
    }
}

/// Training objective of the image tower.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    /// Image-text contrastive cross-entropy over the similarity matrix.
    Contrastive,
    /// Image tower alone with a two-way linear head (live / attack).
    Classifier,
}

#[derive(Debug, Clone)]
pub struct DualEncoder {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub vision: VisionEncoder,
    pub text: TextEncoder,
    pub logit_scale: ParamId,
    /// Linear live/attack head on the class-token features.
    pub head: (ParamId, ParamId),
}

/// Forward result of a training or scoring batch.
pub struct BatchOutput {
    pub loss: Var,
    pub bundle: LossBundle,
    pub routers: Vec<RouterOutput>,
}

impl DualEncoder {
    pub fn new(config: ModelConfig, rng: &mut SplitMix64) -> Result<Self> {
        let mut store = ParamStore::new();
        let c = &config;
        let vision = VisionEncoder::new(
            &mut store,
            c.image_size,
            c.channels,
            c.patch,
            c.dim,
            c.heads,
            c.depth,
            c.ffn_hidden,
            c.embed_dim,
            rng,
        )?;
        let text = TextEncoder::new(
            &mut store,
            c.max_len,
            c.text_dim,
            c.text_heads,
            c.text_depth,
            c.ffn_hidden,
            c.embed_dim,
            rng,
        )?;
        let logit_scale = store.add("logit_scale", Tensor::scalar(LOGIT_SCALE_INIT));
        let head = (
            store.add("head.weight", rng.truncated_normal_tensor(&[c.dim, 2], crate::moe::INIT_STD)),
            store.add("head.bias", Tensor::zeros(&[2])),
        );
        Ok(Self {
            config,
            store,
            vision,
            text,
            logit_scale,
            head,
        })
    }

    /// Converts the listed blocks to shared-unified-expert layers.
    pub fn convert(&mut self, placement: &Placement, opts: SueOptions, rng: &mut SplitMix64) -> Result<()> {
        for (tower, blocks, idx) in [
            ("vision", &mut self.vision.blocks, &placement.vision),
            ("text", &mut self.text.blocks, &placement.text),
        ] {
            for &i in idx.iter() {
                let depth = blocks.len();
                let block = blocks.get_mut(i).ok_or_else(|| {
                    Error::Config(format!("{tower} block {i} out of range (depth {depth})"))
                })?;
                block.convert(&mut self.store, &format!("{tower}.blocks.{i}"), opts, rng)?;
            }
        }
        Ok(())
    }

    pub fn sue_layers(&self) -> impl Iterator<Item = &SueLayer> {
        self.vision.blocks.iter().chain(&self.text.blocks).filter_map(|b| b.sue())
    }

    pub fn sue_layers_mut(&mut self) -> impl Iterator<Item = &mut SueLayer> {
        self.vision
            .blocks
            .iter_mut()
            .chain(self.text.blocks.iter_mut())
            .filter_map(|b| match &mut b.ffn {
                FfnSlot::Sue(l) => Some(l),
                FfnSlot::Plain(_) => None,
            })
    }

    /// Makes every routed expert the zero map.
    pub fn zero_routed(&mut self) {
        let layers: Vec<SueLayer> = self.sue_layers().cloned().collect();
        for l in layers {
            for e in &l.routed {
                e.zero_output(&mut self.store);
            }
        }
    }

    pub fn clamp_logit_scale(&mut self) {
        let v = &mut self.store.get_mut(self.logit_scale).data_mut()[0];
        *v = v.min(LOGIT_SCALE_MAX);
    }

    pub fn encode_images(&self, s: &mut Session, images: &[&Tensor], routers: &mut Vec<RouterOutput>) -> Result<crate::encoder::VisionOutput> {
        self.vision.forward(s, images, routers)
    }

    pub fn encode_texts(&self, s: &mut Session, prompts: &[String], routers: &mut Vec<RouterOutput>) -> Result<Var> {
        self.text.forward(s, prompts, routers)
    }

    /// Total objective for a batch of images paired with prompts.
    pub fn batch_loss(
        &self,
        s: &mut Session,
        images: &[&Tensor],
        prompts: &[String],
        labels: &[bool],
        objective: Objective,
        weights: LossWeights,
        symmetric: bool,
    ) -> Result<BatchOutput> {
        let mut routers = Vec::new();
        let vis = self.encode_images(s, images, &mut routers)?;
        let l_ce = match objective {
            Objective::Contrastive => {
                if prompts.len() != images.len() {
                    return Err(Error::Contract(format!(
                        "{} prompts for {} images",
                        prompts.len(),
                        images.len()
                    )));
                }
                // encode each distinct prompt once, then expand to one row per image
                let mut uniq: BTreeMap<&str, usize> = BTreeMap::new();
                let mut order: Vec<String> = Vec::new();
                let rows: Vec<usize> = prompts
                    .iter()
                    .map(|p| {
                        *uniq.entry(p.as_str()).or_insert_with(|| {
                            order.push(p.clone());
                            order.len() - 1
                        })
                    })
                    .collect();
                let txt_u = self.encode_texts(s, &order, &mut routers)?;
                let txt = s.graph.index_rows(txt_u, &rows)?;
                let scale = s.param(self.logit_scale);
                let sim = similarity_matrix(s, vis.embeddings, txt, scale)?;
                contrastive_ce_loss(s, sim, symmetric)?
            }
            Objective::Classifier => {
                if labels.len() != images.len() {
                    return Err(Error::Contract(format!("{} labels for {} images", labels.len(), images.len())));
                }
                let logits = self.head_logits(s, vis.features)?;
                let g = &mut s.graph;
                let ls = g.log_softmax(logits);
                let idx: Vec<usize> = labels.iter().enumerate().map(|(i, &a)| 2 * i + usize::from(a)).collect();
                let picked = g.gather_flat(ls, &idx)?;
                let m = g.mean(picked);
                g.scale(m, -1.0)
            }
        };
        let (l_z, l_b) = aux_losses(s, &routers)?;
        let (loss, bundle) = total_loss(s, l_ce, l_z, l_b, weights)?;
        Ok(BatchOutput { loss, bundle, routers })
    }

    fn head_logits(&self, s: &mut Session, features: Var) -> Result<Var> {
        let (w, b) = (s.param(self.head.0), s.param(self.head.1));
        let y = s.graph.matmul(features, w)?;
        Ok(s.graph.add(y, b)?)
    }

    /// Unit-norm text embeddings of every prompt in the bank, real first.
    pub fn bank_embeddings(&self, bank: &PromptBank) -> Result<(Tensor, usize)> {
        bank.validate()?;
        let mut prompts = bank.real.clone();
        prompts.extend(bank.all_fake());
        let mut s = Session::new(&self.store, false);
        let e = self.encode_texts(&mut s, &prompts, &mut Vec::new())?;
        Ok((s.value(e).clone(), bank.real.len()))
    }

    /// Attack scores in `[0, 1]` for a batch of images.
    pub fn score_images(
        &self,
        images: &[&Tensor],
        objective: Objective,
        bank_emb: &(Tensor, usize),
        routers: &mut Vec<RouterOutput>,
    ) -> Result<(Vec<f64>, Tensor)> {
        let mut s = Session::new(&self.store, false);
        let vis = self.encode_images(&mut s, images, routers)?;
        let emb = s.value(vis.embeddings).clone();
        let scores = match objective {
            Objective::Contrastive => {
                let (bank, n_real) = bank_emb;
                let scale = self.store.get(self.logit_scale).data()[0].exp();
                (0..images.len())
                    .map(|i| {
                        let sims: Vec<f64> = (0..bank.shape()[0])
                            .map(|j| scale * dot(emb.row(i), bank.row(j)))
                            .collect();
                        class_score(&sims[..*n_real], &sims[*n_real..])
                    })
                    .collect::<Result<Vec<f64>>>()?
            }
            Objective::Classifier => {
                let logits = self.head_logits(&mut s, vis.features)?;
                let lv = s.value(logits);
                (0..images.len()).map(|i| sigmoid(lv.row(i)[1] - lv.row(i)[0])).collect()
            }
        };
        Ok((scores, emb))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Two-way softmax over the best real and best attack similarity, read at
/// the attack class.
pub fn class_score(real_sims: &[f64], fake_sims: &[f64]) -> Result<f64> {
    if real_sims.is_empty() || fake_sims.is_empty() {
        return Err(Error::Config("classify needs at least one prompt per class".into()));
    }
    let best = |v: &[f64]| v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok(sigmoid(best(fake_sims) - best(real_sims)))
}

/// Layer-averaged router z-loss and load-balance loss; zero when no layer
/// routes.
pub fn aux_losses(s: &mut Session, routers: &[RouterOutput]) -> Result<(Var, Var)> {
    if routers.is_empty() {
        let z = s.constant(Tensor::scalar(0.0));
        let b = s.constant(Tensor::scalar(0.0));
        return Ok((z, b));
    }
    let mut z_terms = Vec::with_capacity(routers.len());
    let mut b_terms = Vec::with_capacity(routers.len());
    for r in routers {
        z_terms.push(router_z_loss(s, r.logits)?);
        b_terms.push(load_balance_loss(s, r.probs, &r.selected)?);
    }
    let inv = 1.0 / routers.len() as f64;
    let g = &mut s.graph;
    let zc = g.concat(&z_terms, 0)?;
    let bc = g.concat(&b_terms, 0)?;
    let zs = g.sum(zc);
    let bs = g.sum(bc);
    Ok((g.scale(zs, inv), g.scale(bs, inv)))
}

/// `S = exp(logit_scale) · img · txtᵀ` for unit-norm embeddings.
pub fn similarity_matrix(s: &mut Session, img: Var, txt: Var, logit_scale: Var) -> Result<Var> {
    let g = &mut s.graph;
    let (si, st) = (g.shape(img).to_vec(), g.shape(txt).to_vec());
    if si.len() != 2 || st.len() != 2 || si[1] != st[1] {
        return Err(Error::Tensor(TensorError::Dimension(format!(
            "embedding shapes {si:?} and {st:?} are not [N, d] and [M, d]"
        ))));
    }
    let tt = g.transpose(txt)?;
    let raw = g.matmul(img, tt)?;
    let scale = g.exp(logit_scale);
    Ok(g.mul(raw, scale)?)
}

/// `-(1/N) Σ_i log softmax(S_i)_i`, image-to-text rows. With `symmetric`
/// the text-to-image direction (columns) is averaged in.
pub fn contrastive_ce_loss(s: &mut Session, sim: Var, symmetric: bool) -> Result<Var> {
    let shape = s.graph.shape(sim).to_vec();
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(Error::Contract(format!("contrastive loss needs a square matrix, got {shape:?}")));
    }
    let n = shape[0];
    let diag: Vec<usize> = (0..n).map(|i| i * n + i).collect();
    let g = &mut s.graph;
    let row_ce = |g: &mut sue_autograd::Graph, m: Var| -> Result<Var> {
        let ls = g.log_softmax(m);
        let d = g.gather_flat(ls, &diag)?;
        let mean = g.mean(d);
        Ok(g.scale(mean, -1.0))
    };
    let forward = row_ce(g, sim)?;
    if !symmetric {
        return Ok(forward);
    }
    let t = g.transpose(sim)?;
    let backward = row_ce(g, t)?;
    let both = g.add(forward, backward)?;
    Ok(g.scale(both, 0.5))
}
