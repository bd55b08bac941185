//! Procedural live / physical-attack / digital-attack face images and the
//! unified (P1) and unseen-attack (P2.1, P2.2) protocol splits.
//!
//! Every image is a pure function of `(family, attack_type, subject, seed)`.
//! Physical attacks leave global texture traces (print grid, halftone);
//! digital attacks leave local ones (spliced patch, blended swap, blur
//! island, checker artifact).

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sue_autograd::Tensor;

use crate::error::{Error, Result};
use crate::model::PromptBank;
use crate::rng::SplitMix64;

pub const IMAGE_SIZE: usize = 32;
pub const PHYSICAL_TYPES: [u8; 2] = [1, 2];
pub const DIGITAL_TYPES: [u8; 4] = [3, 4, 5, 6];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Bonafide,
    Attack,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Live,
    Physical,
    Digital,
}

impl Family {
    pub fn of_type(attack_type: u8) -> Option<Family> {
        match attack_type {
            0 => Some(Family::Live),
            1 | 2 => Some(Family::Physical),
            3..=6 => Some(Family::Digital),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    /// `[1, 32, 32]`, values in `[0, 1]`.
    pub image: Tensor,
    pub label: Label,
    pub family: Family,
    pub attack_type: u8,
    pub subject_id: u32,
    pub seed: u64,
}

impl LabeledSample {
    pub fn is_attack(&self) -> bool {
        self.label == Label::Attack
    }
}

// ---- rendering --------------------------------------------------------------

struct Face {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    skin: f64,
    background: f64,
    grad_x: f64,
    grad_y: f64,
    eye_dx: f64,
    eye_y: f64,
    mouth_y: f64,
    mouth_w: f64,
}

impl Face {
    fn of_subject(subject: u32) -> Self {
        let mut r = SplitMix64::derive(u64::from(subject), "subject", 0);
        Self {
            cx: 16.0 + r.range(-1.5, 1.5),
            cy: 16.0 + r.range(-1.0, 1.5),
            rx: r.range(8.0, 10.5),
            ry: r.range(10.0, 12.5),
            skin: r.range(0.55, 0.8),
            background: r.range(0.12, 0.35),
            grad_x: r.range(-0.1, 0.1),
            grad_y: r.range(-0.1, 0.1),
            eye_dx: r.range(3.0, 4.5),
            eye_y: r.range(-4.0, -2.5),
            mouth_y: r.range(3.5, 5.5),
            mouth_w: r.range(2.5, 4.0),
        }
    }

    /// Noise-free rendering, optionally shifted.
    fn render(&self, shift_x: f64, shift_y: f64, brightness: f64) -> Vec<f64> {
        let n = IMAGE_SIZE;
        let mut img = vec![0.0; n * n];
        let (cx, cy) = (self.cx + shift_x, self.cy + shift_y);
        for y in 0..n {
            for x in 0..n {
                let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
                let bg = self.background + self.grad_x * (fx / n as f64 - 0.5) + self.grad_y * (fy / n as f64 - 0.5);
                let u = (fx - cx) / self.rx;
                let v = (fy - cy) / self.ry;
                let r2 = u * u + v * v;
                // soft elliptical boundary
                let inside = 1.0 / (1.0 + ((r2.sqrt() - 1.0) * 12.0).exp());
                let mut face = (self.skin + brightness) * (1.0 - 0.35 * r2.min(1.0));
                let blob = |ex: f64, ey: f64, sx: f64, sy: f64| {
                    let dx = (fx - ex) / sx;
                    let dy = (fy - ey) / sy;
                    (-(dx * dx + dy * dy)).exp()
                };
                face -= 0.35 * blob(cx - self.eye_dx, cy + self.eye_y, 1.2, 0.9);
                face -= 0.35 * blob(cx + self.eye_dx, cy + self.eye_y, 1.2, 0.9);
                face -= 0.25 * blob(cx, cy + self.mouth_y, self.mouth_w, 0.7);
                img[y * n + x] = inside * face + (1.0 - inside) * bg;
            }
        }
        img
    }
}

fn add_noise(img: &mut [f64], rng: &mut SplitMix64, std: f64) {
    for p in img.iter_mut() {
        *p += std * rng.normal();
    }
}

/// Camera capture: rendering, a row-interlace sensor signature and noise.
/// Digital edits destroy the signature locally.
fn live_image(subject: u32, rng: &mut SplitMix64) -> Vec<f64> {
    let face = Face::of_subject(subject);
    let (sx, sy, b) = (rng.range(-1.0, 1.0), rng.range(-1.0, 1.0), rng.range(-0.05, 0.05));
    let mut img = face.render(sx, sy, b);
    let amp = rng.range(0.04, 0.06);
    for (i, p) in img.iter_mut().enumerate() {
        *p += if (i / IMAGE_SIZE).is_multiple_of(2) { amp } else { -amp };
    }
    add_noise(&mut img, rng, 0.04);
    img
}

/// Random axis-aligned rectangle `(x0, y0, w, h)` inside the face region.
fn face_rect(rng: &mut SplitMix64, min: usize, max: usize) -> (usize, usize, usize, usize) {
    let w = min + rng.below(max - min + 1);
    let h = min + rng.below(max - min + 1);
    let x0 = 6 + rng.below(IMAGE_SIZE - 12 - w + 1);
    let y0 = 6 + rng.below(IMAGE_SIZE - 12 - h + 1);
    (x0, y0, w, h)
}

fn donor_subject(subject: u32, rng: &mut SplitMix64) -> u32 {
    let d = rng.below(1 << 20) as u32;
    if d == subject {
        d + 1
    } else {
        d
    }
}

fn apply_attack(img: &mut [f64], attack_type: u8, subject: u32, rng: &mut SplitMix64) {
    let n = IMAGE_SIZE;
    match attack_type {
        // print: grid lines of reduced intensity plus a slight contrast loss
        1 => {
            // period divides the patch size, so every patch carries the same trace
            let period = 4;
            let (px, py) = (0, 0);
            let depth = rng.range(0.18, 0.28);
            for y in 0..n {
                for x in 0..n {
                    let p = &mut img[y * n + x];
                    *p = 0.8 * *p + 0.1;
                    if x % period == px || y % period == py {
                        *p *= 1.0 - depth;
                    }
                }
            }
        }
        // halftone dots
        2 => {
            let period = 4.0;
            let (ox, oy) = (0.5, 0.5);
            let depth = rng.range(0.25, 0.35);
            let tau = std::f64::consts::TAU;
            for y in 0..n {
                for x in 0..n {
                    let c = (tau * (x as f64 + ox) / period).cos() * (tau * (y as f64 + oy) / period).cos();
                    let p = &mut img[y * n + x];
                    *p = (0.8 * *p + 0.1) * (1.0 - depth * (0.5 + 0.5 * c));
                }
            }
        }
        // hard-edged patch spliced in from another subject
        3 => {
            let donor = Face::of_subject(donor_subject(subject, rng));
            let src = donor.render(rng.range(-1.0, 1.0), rng.range(-1.0, 1.0), rng.range(-0.1, 0.1));
            let (x0, y0, w, h) = face_rect(rng, 7, 11);
            let offset = rng.range(0.1, 0.2) * if rng.below(2) == 0 { 1.0 } else { -1.0 };
            for y in y0..y0 + h {
                for x in x0..x0 + w {
                    img[y * n + x] = src[y * n + x] + offset;
                }
            }
        }
        // face region swapped with a donor through a soft elliptical mask
        4 => {
            let donor = Face::of_subject(donor_subject(subject, rng));
            let src = donor.render(rng.range(-1.0, 1.0), rng.range(-1.0, 1.0), rng.range(-0.1, 0.1));
            let (cx, cy) = (16.0 + rng.range(-1.0, 1.0), 16.0 + rng.range(-1.0, 1.0));
            let (rx, ry) = (rng.range(5.0, 7.0), rng.range(6.0, 8.0));
            for y in 0..n {
                for x in 0..n {
                    let u = (x as f64 + 0.5 - cx) / rx;
                    let v = (y as f64 + 0.5 - cy) / ry;
                    let alpha = 1.0 / (1.0 + (((u * u + v * v).sqrt() - 1.0) * 6.0).exp());
                    let p = &mut img[y * n + x];
                    *p = alpha * src[y * n + x] + (1.0 - alpha) * *p;
                }
            }
        }
        // island of box blur (erases sensor noise locally)
        5 => {
            let (x0, y0, w, h) = face_rect(rng, 9, 13);
            let snapshot = img.to_vec();
            for y in y0..y0 + h {
                for x in x0..x0 + w {
                    let mut acc = 0.0;
                    for dy in -1i64..=1 {
                        for dx in -1i64..=1 {
                            let yy = (y as i64 + dy) as usize;
                            let xx = (x as i64 + dx) as usize;
                            acc += snapshot[yy * n + xx];
                        }
                    }
                    img[y * n + x] = acc / 9.0;
                }
            }
        }
        // checkerboard high-frequency artifact over a region
        6 => {
            let (x0, y0, w, h) = face_rect(rng, 9, 13);
            let amp = rng.range(0.08, 0.14);
            for y in y0..y0 + h {
                for x in x0..x0 + w {
                    img[y * n + x] += if (x + y) % 2 == 0 { amp } else { -amp };
                }
            }
        }
        _ => unreachable!("validated by caller"),
    }
}

/// Deterministically renders one sample.
pub fn generate_sample(family: Family, attack_type: u8, subject_id: u32, seed: u64) -> Result<LabeledSample> {
    if Family::of_type(attack_type) != Some(family) {
        return Err(Error::Contract(format!(
            "attack type {attack_type} does not belong to family {family:?}"
        )));
    }
    let mut rng = SplitMix64::derive(seed, "sample", u64::from(subject_id));
    let mut img = live_image(subject_id, &mut rng);
    if attack_type != 0 {
        let mut arng = SplitMix64::derive(seed, "attack", u64::from(attack_type));
        apply_attack(&mut img, attack_type, subject_id, &mut arng);
    }
    img.iter_mut().for_each(|p| *p = p.clamp(0.0, 1.0));
    Ok(LabeledSample {
        image: Tensor::new(vec![1, IMAGE_SIZE, IMAGE_SIZE], img)?,
        label: if attack_type == 0 { Label::Bonafide } else { Label::Attack },
        family,
        attack_type,
        subject_id,
        seed,
    })
}

// ---- protocols --------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Protocol {
    P1,
    P21,
    P22,
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Protocol::P1 => "p1",
            Protocol::P21 => "p2.1",
            Protocol::P22 => "p2.2",
        })
    }
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "p1" => Ok(Protocol::P1),
            "p2.1" => Ok(Protocol::P21),
            "p2.2" => Ok(Protocol::P22),
            other => Err(Error::Config(format!("unknown protocol `{other}` (p1, p2.1, p2.2)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitCounts {
    pub train: usize,
    pub dev: usize,
    pub test: usize,
    pub bonafide_fraction: f64,
}

impl Default for SplitCounts {
    fn default() -> Self {
        Self {
            train: 1200,
            dev: 300,
            test: 600,
            bonafide_fraction: 0.5,
        }
    }
}

/// Attack types withheld from train/dev in the unseen-attack protocols.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TypePartition {
    pub held_out_physical: BTreeSet<u8>,
    pub held_out_digital: BTreeSet<u8>,
}

impl Default for TypePartition {
    fn default() -> Self {
        Self {
            held_out_physical: [2].into(),
            held_out_digital: [4].into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolSplit {
    pub protocol: Protocol,
    pub train: Vec<LabeledSample>,
    pub dev: Vec<LabeledSample>,
    pub test: Vec<LabeledSample>,
    pub held_out_types: BTreeSet<u8>,
}

impl ProtocolSplit {
    pub fn part(&self, name: &str) -> Result<&[LabeledSample]> {
        match name {
            "train" => Ok(&self.train),
            "dev" => Ok(&self.dev),
            "test" => Ok(&self.test),
            other => Err(Error::Config(format!("unknown split part `{other}` (train, dev, test)"))),
        }
    }
}

fn build_part(
    part: &str,
    count: usize,
    bonafide_fraction: f64,
    types: &[u8],
    subject_base: u32,
    master_seed: u64,
) -> Vec<LabeledSample> {
    let n_bona = ((count as f64) * bonafide_fraction).round() as usize;
    let n_subjects = (count / 4).max(1) as u32;
    let mut out: Vec<LabeledSample> = (0..count)
        .map(|i| {
            let attack_type = if i < n_bona { 0 } else { types[(i - n_bona) % types.len()] };
            let family = Family::of_type(attack_type).expect("known type");
            let subject = subject_base + (i as u32 % n_subjects);
            let seed = SplitMix64::derive(master_seed, part, i as u64).state();
            generate_sample(family, attack_type, subject, seed).expect("consistent family")
        })
        .collect();
    let mut rng = SplitMix64::derive(master_seed, &format!("shuffle/{part}"), 0);
    rand::seq::SliceRandom::shuffle(out.as_mut_slice(), &mut rng);
    out
}

/// Builds the three splits of a protocol. Subjects never cross splits.
pub fn build_protocol(
    protocol: Protocol,
    counts: SplitCounts,
    partition: &TypePartition,
    master_seed: u64,
) -> Result<ProtocolSplit> {
    if counts.train == 0 || counts.dev == 0 || counts.test == 0 {
        return Err(Error::Config("every split needs at least one sample".into()));
    }
    if !(0.0..1.0).contains(&counts.bonafide_fraction) || counts.bonafide_fraction == 0.0 {
        return Err(Error::Config(format!(
            "bonafide fraction must be in (0, 1), got {}",
            counts.bonafide_fraction
        )));
    }
    for &t in &partition.held_out_physical {
        if Family::of_type(t) != Some(Family::Physical) {
            return Err(Error::Config(format!("held-out physical type {t} is not a physical attack")));
        }
    }
    for &t in &partition.held_out_digital {
        if Family::of_type(t) != Some(Family::Digital) {
            return Err(Error::Config(format!("held-out digital type {t} is not a digital attack")));
        }
    }
    let all: Vec<u8> = PHYSICAL_TYPES.iter().chain(&DIGITAL_TYPES).copied().collect();
    let held_out: BTreeSet<u8> = match protocol {
        Protocol::P1 => BTreeSet::new(),
        Protocol::P21 => partition.held_out_physical.clone(),
        Protocol::P22 => partition.held_out_digital.clone(),
    };
    if protocol != Protocol::P1 && held_out.is_empty() {
        return Err(Error::Config(format!("{protocol} needs at least one held-out attack type")));
    }
    let seen: Vec<u8> = all.iter().copied().filter(|t| !held_out.contains(t)).collect();
    if seen.is_empty() {
        return Err(Error::Config("partition leaves no attack type for training".into()));
    }
    let test_types: Vec<u8> = if protocol == Protocol::P1 {
        all.clone()
    } else {
        held_out.iter().copied().collect()
    };
    let n_sub = |c: usize| (c / 4).max(1) as u32;
    let (train_base, dev_base) = (0, n_sub(counts.train));
    let test_base = dev_base + n_sub(counts.dev);
    let f = counts.bonafide_fraction;
    Ok(ProtocolSplit {
        protocol,
        train: build_part("train", counts.train, f, &seen, train_base, master_seed),
        dev: build_part("dev", counts.dev, f, &seen, dev_base, master_seed),
        test: build_part("test", counts.test, f, &test_types, test_base, master_seed),
        held_out_types: held_out,
    })
}

/// Prompt paired with a sample for contrastive training. Attack samples use
/// a family-specific prompt when the bank has one.
pub fn prompt_for(sample: &LabeledSample, bank: &PromptBank) -> Result<String> {
    let pool: &[String] = match sample.family {
        Family::Live => &bank.real,
        Family::Physical if !bank.fake_physical.is_empty() => &bank.fake_physical,
        Family::Digital if !bank.fake_digital.is_empty() => &bank.fake_digital,
        _ if !bank.fake.is_empty() => &bank.fake,
        _ => {
            return Err(Error::Config(format!(
                "prompt bank has no prompt for {:?} samples",
                sample.family
            )))
        }
    };
    if pool.is_empty() {
        return Err(Error::Config("prompt bank has no real-class prompt".into()));
    }
    Ok(pool[(sample.seed % pool.len() as u64) as usize].clone())
}

// ---- export -----------------------------------------------------------------

pub const IMAGE_MAGIC: &[u8; 4] = b"SUIM";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub path: String,
    pub label: Label,
    pub family: Family,
    pub attack_type: u8,
    pub subject_id: u32,
}

/// Image file: magic, `u32` channels/height/width (little endian), then
/// `f32` pixels in `[C, H, W]` order.
pub fn encode_image(image: &Tensor) -> Vec<u8> {
    let mut buf = Vec::with_capacity(16 + image.numel() * 4);
    buf.extend_from_slice(IMAGE_MAGIC);
    for &d in image.shape() {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in image.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    buf
}

pub fn decode_image(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 16 || &bytes[..4] != IMAGE_MAGIC {
        return Err(Error::Contract("not an image file".into()));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let shape = vec![dim(0), dim(1), dim(2)];
    let numel: usize = shape.iter().product();
    if bytes.len() != 16 + 4 * numel {
        return Err(Error::Contract(format!("image payload has {} bytes, expected {}", bytes.len() - 16, 4 * numel)));
    }
    let data = bytes[16..]
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
        .collect();
    Ok(Tensor::new(shape, data)?)
}

/// Writes `images/NNNNN.sim` files plus `manifest.jsonl` under `dir`.
pub fn export_split(dir: &Path, samples: &[LabeledSample]) -> Result<()> {
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let manifest_path = dir.join("manifest.jsonl");
    let mut manifest = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        let rel = format!("images/{i:05}.sim");
        let path = dir.join(&rel);
        fs::write(&path, encode_image(&s.image)).map_err(|e| Error::io(&path, e))?;
        let rec = ManifestRecord {
            path: rel,
            label: s.label,
            family: s.family,
            attack_type: s.attack_type,
            subject_id: s.subject_id,
        };
        serde_json::to_writer(&mut manifest, &rec).expect("in-memory write");
        manifest.write_all(b"\n").expect("in-memory write");
    }
    fs::write(&manifest_path, manifest).map_err(|e| Error::io(&manifest_path, e))
}
