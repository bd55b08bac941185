//! Transformer towers of the dual encoder.

use sue_autograd::{Tensor, Var};

use crate::error::{Error, Result};
use crate::moe::{ExpertFfn, RouterOutput, SueLayer, SueOptions, INIT_STD};
use crate::params::{ParamId, ParamStore, Session};
use crate::rng::SplitMix64;

pub const LN_EPS: f64 = 1e-5;

/// Fixed pixel standardization applied before the patch embedding.
pub const PIXEL_MEAN: f64 = 0.5;
pub const PIXEL_STD: f64 = 0.25;

/// Splits a `[C, H, W]` image into `P×P` patches, row-major over the patch
/// grid. Each patch is flattened as `(dy, dx, c)`.
pub fn patchify(image: &Tensor, patch: usize) -> Result<Tensor> {
    let s = image.shape();
    if s.len() != 3 {
        return Err(Error::Tensor(sue_autograd::TensorError::Dimension(format!(
            "image must be [C, H, W], got {s:?}"
        ))));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::Tensor(sue_autograd::TensorError::Dimension(format!(
            "image {h}x{w} not divisible into {patch}x{patch} patches"
        ))));
    }
    let (gh, gw) = (h / patch, w / patch);
    let plen = patch * patch * c;
    let px = image.data();
    let mut out = Vec::with_capacity(gh * gw * plen);
    for py in 0..gh {
        for pxi in 0..gw {
            for dy in 0..patch {
                for dx in 0..patch {
                    for ch in 0..c {
                        out.push(px[(ch * h + py * patch + dy) * w + pxi * patch + dx]);
                    }
                }
            }
        }
    }
    Ok(Tensor::new(vec![gh * gw, plen], out)?)
}

// ---- tokenizer ------------------------------------------------------------

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
const CHARSET: &str = "abcdefghijklmnopqrstuvwxyz0123456789 .,;:!?'\"-_/()[]&+*#@%=<";
pub const VOCAB_SIZE: usize = 64;

/// Character-level tokenizer: BOS, lowercase characters, EOS. Characters
/// outside the charset map to UNK; text beyond `max_len - 2` characters is
/// dropped.
pub fn tokenize(text: &str, max_len: usize) -> Vec<usize> {
    let mut ids = vec![BOS];
    for ch in text.chars().flat_map(char::to_lowercase).take(max_len.saturating_sub(2)) {
        ids.push(CHARSET.find(ch).map_or(UNK, |i| i + 4));
    }
    ids.push(EOS);
    ids
}

// ---- blocks -----------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub enum FfnSlot {
    Plain(ExpertFfn),
    Sue(SueLayer),
}

/// Pre-norm transformer block: `x + attn(ln(x))`, then `h + ffn(ln(h))`.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub ln1: (ParamId, ParamId),
    pub wq: (ParamId, ParamId),
    pub wk: (ParamId, ParamId),
    pub wv: (ParamId, ParamId),
    pub wo: (ParamId, ParamId),
    pub ln2: (ParamId, ParamId),
    pub ffn: FfnSlot,
    pub heads: usize,
    pub dim: usize,
}

fn linear(store: &mut ParamStore, name: &str, i: usize, o: usize, rng: &mut SplitMix64) -> (ParamId, ParamId) {
    (
        store.add(format!("{name}.weight"), rng.truncated_normal_tensor(&[i, o], INIT_STD)),
        store.add(format!("{name}.bias"), Tensor::zeros(&[o])),
    )
}

fn norm(store: &mut ParamStore, name: &str, d: usize) -> (ParamId, ParamId) {
    (
        store.add(format!("{name}.gain"), Tensor::ones(&[d])),
        store.add(format!("{name}.bias"), Tensor::zeros(&[d])),
    )
}

fn apply_linear(s: &mut Session, x: Var, p: (ParamId, ParamId)) -> Result<Var> {
    let (w, b) = (s.param(p.0), s.param(p.1));
    let y = s.graph.matmul(x, w)?;
    Ok(s.graph.add(y, b)?)
}

fn apply_norm(s: &mut Session, x: Var, p: (ParamId, ParamId)) -> Result<Var> {
    let (g, b) = (s.param(p.0), s.param(p.1));
    Ok(s.graph.layer_norm(x, g, b, LN_EPS)?)
}

impl Block {
    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize, heads: usize, hidden: usize, rng: &mut SplitMix64) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!("dim {dim} not divisible by {heads} heads")));
        }
        Ok(Self {
            ln1: norm(store, &format!("{prefix}.ln1"), dim),
            wq: linear(store, &format!("{prefix}.attn.q"), dim, dim, rng),
            wk: linear(store, &format!("{prefix}.attn.k"), dim, dim, rng),
            wv: linear(store, &format!("{prefix}.attn.v"), dim, dim, rng),
            wo: linear(store, &format!("{prefix}.attn.out"), dim, dim, rng),
            ln2: norm(store, &format!("{prefix}.ln2"), dim),
            ffn: FfnSlot::Plain(ExpertFfn::new(store, &format!("{prefix}.ffn"), dim, hidden, rng)),
            heads,
            dim,
        })
    }

    fn attention(&self, s: &mut Session, x: Var, mask: Option<Var>) -> Result<Var> {
        let shape = s.graph.shape(x).to_vec();
        let (b, l, d) = (shape[0], shape[1], shape[2]);
        let (h, dh) = (self.heads, d / self.heads);
        let q = apply_linear(s, x, self.wq)?;
        let k = apply_linear(s, x, self.wk)?;
        let v = apply_linear(s, x, self.wv)?;
        let g = &mut s.graph;
        let split = |g: &mut sue_autograd::Graph, t: Var, perm: &[usize]| -> Result<Var> {
            let r = g.reshape(t, &[b, l, h, dh])?;
            Ok(g.permute(r, perm)?)
        };
        let q = split(g, q, &[0, 2, 1, 3])?; // [B,h,L,dh]
        let kt = split(g, k, &[0, 2, 3, 1])?; // [B,h,dh,L]
        let v = split(g, v, &[0, 2, 1, 3])?;
        let scores = g.matmul(q, kt)?;
        let mut scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
        if let Some(m) = mask {
            scores = g.add(scores, m)?;
        }
        let attn = g.softmax(scores);
        let ctx = g.matmul(attn, v)?; // [B,h,L,dh]
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, &[b, l, d])?;
        apply_linear(s, ctx, self.wo)
    }

    pub fn forward(&self, s: &mut Session, x: Var, mask: Option<Var>, routers: &mut Vec<RouterOutput>) -> Result<Var> {
        let n1 = apply_norm(s, x, self.ln1)?;
        let a = self.attention(s, n1, mask)?;
        let h = s.graph.add(x, a)?;
        let n2 = apply_norm(s, h, self.ln2)?;
        let f = match &self.ffn {
            FfnSlot::Plain(ffn) => ffn.forward(s, n2)?,
            FfnSlot::Sue(layer) => {
                let (y, r) = layer.forward(s, n2)?;
                routers.push(r);
                y
            }
        };
        Ok(s.graph.add(h, f)?)
    }

    /// Replaces the plain FFN with a shared-unified-expert layer built
    /// around it. The old FFN parameters are retired from the store.
    pub fn convert(&mut self, store: &mut ParamStore, prefix: &str, opts: SueOptions, rng: &mut SplitMix64) -> Result<()> {
        let FfnSlot::Plain(base) = &self.ffn else {
            return Err(Error::Config(format!("{prefix} is already converted")));
        };
        let layer = SueLayer::convert(store, &format!("{prefix}.sue"), base, opts, rng)?;
        for id in base.params() {
            store.retire(id);
        }
        self.ffn = FfnSlot::Sue(layer);
        Ok(())
    }

    pub fn sue(&self) -> Option<&SueLayer> {
        match &self.ffn {
            FfnSlot::Sue(l) => Some(l),
            FfnSlot::Plain(_) => None,
        }
    }
}

// ---- towers -----------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct VisionEncoder {
    pub patch_embed: (ParamId, ParamId),
    pub cls: ParamId,
    pub pos: ParamId,
    pub blocks: Vec<Block>,
    pub ln_final: (ParamId, ParamId),
    pub proj: ParamId,
    pub image_size: usize,
    pub channels: usize,
    pub patch: usize,
    pub dim: usize,
}

/// Output of the image tower.
pub struct VisionOutput {
    /// Normalized final class-token features, `[N, D]`.
    pub features: Var,
    /// Unit-norm projected embeddings, `[N, d_e]`.
    pub embeddings: Var,
}

impl VisionEncoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        image_size: usize,
        channels: usize,
        patch: usize,
        dim: usize,
        heads: usize,
        depth: usize,
        hidden: usize,
        embed_dim: usize,
        rng: &mut SplitMix64,
    ) -> Result<Self> {
        if patch == 0 || !image_size.is_multiple_of(patch) {
            return Err(Error::Config(format!("image size {image_size} not divisible by patch {patch}")));
        }
        let tokens = (image_size / patch).pow(2) + 1;
        let plen = patch * patch * channels;
        let patch_embed = linear(store, "vision.patch_embed", plen, dim, rng);
        let cls = store.add("vision.cls", rng.truncated_normal_tensor(&[1, dim], INIT_STD));
        let pos = store.add("vision.pos", rng.truncated_normal_tensor(&[tokens, dim], INIT_STD));
        let blocks = (0..depth)
            .map(|i| Block::new(store, &format!("vision.blocks.{i}"), dim, heads, hidden, rng))
            .collect::<Result<_>>()?;
        let ln_final = norm(store, "vision.ln_final", dim);
        let proj = store.add("vision.proj", rng.truncated_normal_tensor(&[dim, embed_dim], INIT_STD));
        Ok(Self {
            patch_embed,
            cls,
            pos,
            blocks,
            ln_final,
            proj,
            image_size,
            channels,
            patch,
            dim,
        })
    }

    pub fn forward(&self, s: &mut Session, images: &[&Tensor], routers: &mut Vec<RouterOutput>) -> Result<VisionOutput> {
        if images.is_empty() {
            return Err(Error::Contract("encode_image needs at least one image".into()));
        }
        let want = [self.channels, self.image_size, self.image_size];
        let mut patches = Vec::new();
        for img in images {
            if img.shape() != want {
                return Err(Error::Tensor(sue_autograd::TensorError::Dimension(format!(
                    "image shape {:?}, model expects {want:?}",
                    img.shape()
                ))));
            }
            let p = patchify(img, self.patch)?;
            patches.extend(p.data().iter().map(|v| (v - PIXEL_MEAN) / PIXEL_STD));
        }
        let n = images.len();
        let l = (self.image_size / self.patch).pow(2);
        let plen = self.patch * self.patch * self.channels;
        let d = self.dim;
        let x = s.constant(Tensor::new(vec![n, l, plen], patches)?);
        let tok = apply_linear(s, x, self.patch_embed)?;
        let (cls, pos) = (s.param(self.cls), s.param(self.pos));
        let g = &mut s.graph;
        let zeros = g.constant(Tensor::zeros(&[n, 1, d]));
        let cls = g.add(zeros, cls)?;
        let seq = g.concat(&[cls, tok], 1)?;
        let mut h = g.add(seq, pos)?;
        for b in &self.blocks {
            h = b.forward(s, h, None, routers)?;
        }
        let h = apply_norm(s, h, self.ln_final)?;
        let rows: Vec<usize> = (0..n).map(|i| i * (l + 1)).collect();
        let proj = s.param(self.proj);
        let g = &mut s.graph;
        let features = g.index_rows(h, &rows)?;
        let e = g.matmul(features, proj)?;
        let embeddings = g.l2_normalize(e)?;
        Ok(VisionOutput { features, embeddings })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextEncoder {
    pub token_embed: ParamId,
    pub pos: ParamId,
    pub blocks: Vec<Block>,
    pub ln_final: (ParamId, ParamId),
    pub proj: ParamId,
    pub max_len: usize,
    pub dim: usize,
}

impl TextEncoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        max_len: usize,
        dim: usize,
        heads: usize,
        depth: usize,
        hidden: usize,
        embed_dim: usize,
        rng: &mut SplitMix64,
    ) -> Result<Self> {
        if max_len < 2 {
            return Err(Error::Config("text max_len must leave room for BOS and EOS".into()));
        }
        let token_embed = store.add("text.token_embed", rng.truncated_normal_tensor(&[VOCAB_SIZE, dim], INIT_STD));
        let pos = store.add("text.pos", rng.truncated_normal_tensor(&[max_len, dim], INIT_STD));
        let blocks = (0..depth)
            .map(|i| Block::new(store, &format!("text.blocks.{i}"), dim, heads, hidden, rng))
            .collect::<Result<_>>()?;
        let ln_final = norm(store, "text.ln_final", dim);
        let proj = store.add("text.proj", rng.truncated_normal_tensor(&[dim, embed_dim], INIT_STD));
        Ok(Self {
            token_embed,
            pos,
            blocks,
            ln_final,
            proj,
            max_len,
            dim,
        })
    }

    /// Unit-norm embeddings `[M, d_e]`, pooled at each prompt's EOS position.
    /// Attention is causal, so right padding never reaches the EOS token.
    pub fn forward(&self, s: &mut Session, prompts: &[String], routers: &mut Vec<RouterOutput>) -> Result<Var> {
        if prompts.is_empty() {
            return Err(Error::Contract("encode_text needs at least one prompt".into()));
        }
        let seqs: Vec<Vec<usize>> = prompts.iter().map(|p| tokenize(p, self.max_len)).collect();
        let t = seqs.iter().map(Vec::len).max().unwrap();
        let m = seqs.len();
        let mut ids = Vec::with_capacity(m * t);
        let mut eos_rows = Vec::with_capacity(m);
        for (i, seq) in seqs.iter().enumerate() {
            eos_rows.push(i * t + seq.len() - 1);
            ids.extend_from_slice(seq);
            ids.extend(std::iter::repeat_n(PAD, t - seq.len()));
        }
        let mut mask = vec![0.0; t * t];
        for i in 0..t {
            for j in i + 1..t {
                mask[i * t + j] = -1e9;
            }
        }
        let (emb, pos) = (s.param(self.token_embed), s.param(self.pos));
        let g = &mut s.graph;
        let mask = g.constant(Tensor::new(vec![t, t], mask)?);
        let x = g.index_rows(emb, &ids)?;
        let x = g.reshape(x, &[m, t, self.dim])?;
        let positions: Vec<usize> = (0..t).collect();
        let p = g.index_rows(pos, &positions)?;
        let mut h = g.add(x, p)?;
        for b in &self.blocks {
            h = b.forward(s, h, Some(mask), routers)?;
        }
        let h = apply_norm(s, h, self.ln_final)?;
        let proj = s.param(self.proj);
        let g = &mut s.graph;
        let pooled = g.index_rows(h, &eos_rows)?;
        let e = g.matmul(pooled, proj)?;
        Ok(g.l2_normalize(e)?)
    }
}
