//! Ablation runner: every variant of a study is trained on the same seeds
//! and data, evaluated on test, and summarised as mean ± std.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::str::FromStr;

use serde_json::Value;

use crate::config::{format_ranges, ExperimentConfig};
use crate::error::{Error, Result};
use crate::metrics::{aggregate, mean_std, MeanStd, MetricReport};
use crate::model::Objective;
use crate::train::{build_split, eval_record, evaluate, load_bank, train_on, Evaluation, TrainOutcome};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationKind {
    ExpertCount,
    LayerPlacement,
    ModalityPlacement,
    VitVsMoe,
    /// Renormalized top-k weights against raw softmax probabilities.
    Renormalize,
}

impl AblationKind {
    pub const ALL: [AblationKind; 5] = [
        AblationKind::ExpertCount,
        AblationKind::LayerPlacement,
        AblationKind::ModalityPlacement,
        AblationKind::VitVsMoe,
        AblationKind::Renormalize,
    ];
}

impl fmt::Display for AblationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AblationKind::ExpertCount => "expert_count",
            AblationKind::LayerPlacement => "layer_placement",
            AblationKind::ModalityPlacement => "modality_placement",
            AblationKind::VitVsMoe => "vit_vs_moe",
            AblationKind::Renormalize => "renormalize",
        })
    }
}

impl FromStr for AblationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.to_string() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Variant {
    pub name: String,
    pub config: ExperimentConfig,
}

/// The variant set of `kind` derived from `base`. Layer ranges are the
/// quarters of a 12-block encoder scaled to the configured depth.
pub fn variants(kind: AblationKind, base: &ExperimentConfig) -> Vec<Variant> {
    let with = |name: String, f: &dyn Fn(&mut ExperimentConfig)| {
        let mut config = base.clone();
        f(&mut config);
        Variant { name, config }
    };
    let vision_all: Vec<usize> = (0..base.model.depth).collect();
    let text_all: Vec<usize> = (0..base.model.text_depth).collect();
    match kind {
        AblationKind::ExpertCount => [2, 4, 6, 8]
            .into_iter()
            .map(|n| {
                with(format!("n_experts={n}"), &|c| {
                    c.sue.n_experts = n;
                    c.sue.k = 2;
                })
            })
            .collect(),
        AblationKind::LayerPlacement => {
            let d = base.model.depth;
            let third = |a: usize, b: usize| (a * d / 6..b * d / 6).collect::<Vec<usize>>();
            [third(0, 2), third(2, 4), third(4, 6), vision_all.clone()]
                .into_iter()
                .map(|r| {
                    with(format!("vision={}", format_ranges(&r)), &|c| {
                        c.placement.vision = r.clone();
                        c.placement.text = vec![];
                    })
                })
                .collect()
        }
        AblationKind::ModalityPlacement => vec![
            with("visual_moe".into(), &|c| {
                c.placement.vision = vision_all.clone();
                c.placement.text = vec![];
                c.sue.shared = false;
            }),
            with("text_sue".into(), &|c| {
                c.placement.vision = vec![];
                c.placement.text = text_all.clone();
            }),
            with("text_visual_sue".into(), &|c| {
                c.placement.vision = vision_all.clone();
                c.placement.text = text_all.clone();
            }),
            with("visual_sue".into(), &|c| {
                c.placement.vision = vision_all.clone();
                c.placement.text = vec![];
            }),
        ],
        AblationKind::VitVsMoe => vec![
            with("vit".into(), &|c| {
                c.objective = Objective::Classifier;
                c.placement.vision = vec![];
                c.placement.text = vec![];
            }),
            with("vit_moe".into(), &|c| {
                c.objective = Objective::Classifier;
                c.placement.vision = vision_all.clone();
                c.placement.text = vec![];
                c.sue.shared = false;
            }),
            with("vit_sue".into(), &|c| {
                c.objective = Objective::Classifier;
                c.placement.vision = vision_all.clone();
                c.placement.text = vec![];
            }),
        ],
        AblationKind::Renormalize => [true, false]
            .into_iter()
            .map(|r| with(format!("renormalize={r}"), &|c| c.sue.renormalize = r))
            .collect(),
    }
}

/// One trained and test-evaluated run.
pub struct SeedRun {
    pub seed: u64,
    pub outcome: TrainOutcome,
    pub eval: Evaluation,
}

/// Trains `config` and evaluates the retained model on its test split.
pub fn run_seed(config: &ExperimentConfig) -> Result<SeedRun> {
    let split = build_split(config)?;
    let bank = load_bank(config)?;
    let outcome = train_on(config, &split, &bank)?;
    let eval = evaluate(&outcome.model, config, &split, &bank)?;
    Ok(SeedRun {
        seed: config.seed,
        outcome,
        eval,
    })
}

/// Consecutive seeds starting at `base`.
pub fn seed_range(base: u64, count: usize) -> Vec<u64> {
    (0..count as u64).map(|i| base.wrapping_add(i)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: String,
    pub seeds: Vec<u64>,
    pub reports: Vec<MetricReport>,
    /// Mean vision routing entropy per seed, when the variant routes.
    pub entropies: Vec<f64>,
    pub summary: BTreeMap<String, MeanStd>,
    pub entropy: Option<MeanStd>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    pub kind: AblationKind,
    pub rows: Vec<AblationRow>,
    /// Per-seed flat records in run order.
    pub records: Vec<Value>,
}

/// Runs every variant over `seeds`. `progress` sees each finished run.
pub fn run_ablation(
    kind: AblationKind,
    base: &ExperimentConfig,
    seeds: &[u64],
    mut progress: impl FnMut(&str, u64, &Evaluation),
) -> Result<AblationTable> {
    if seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    let variants = variants(kind, base);
    for v in &variants {
        v.config.validate()?;
    }
    let mut rows = Vec::new();
    let mut records = Vec::new();
    for v in variants {
        let mut reports = Vec::new();
        let mut entropies = Vec::new();
        for &seed in seeds {
            let mut config = v.config.clone();
            config.seed = seed;
            let run = run_seed(&config)?;
            progress(&v.name, seed, &run.eval);
            records.push(eval_record(
                &[
                    ("ablation", Value::from(kind.to_string())),
                    ("variant", Value::from(v.name.clone())),
                    ("protocol", Value::from(config.protocol.to_string())),
                    ("seed", Value::from(seed)),
                ],
                &run.eval,
            ));
            entropies.extend(run.eval.mean_entropy());
            reports.push(run.eval.report);
        }
        rows.push(AblationRow {
            variant: v.name,
            seeds: seeds.to_vec(),
            summary: aggregate(&reports)?,
            entropy: if entropies.is_empty() { None } else { Some(mean_std(&entropies)?) },
            reports,
            entropies,
        });
    }
    Ok(AblationTable { kind, rows, records })
}

const TABLE_FIELDS: [&str; 5] = ["auc", "acer", "eer", "apcer", "bpcer"];

impl AblationTable {
    /// Human-readable table, one line per variant.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let seeds = self.rows.first().map_or(0, |r| r.seeds.len());
        let _ = writeln!(s, "ablation {} ({} seeds, mean±std)", self.kind, seeds);
        let _ = write!(s, "{:<20}", "variant");
        for f in TABLE_FIELDS {
            let _ = write!(s, " {f:>15}");
        }
        let _ = writeln!(s, " {:>15}", "entropy");
        for r in &self.rows {
            let _ = write!(s, "{:<20}", r.variant);
            for f in TABLE_FIELDS {
                let cell = r.summary.get(f).map_or("-".to_string(), |m| m.to_string());
                let _ = write!(s, " {cell:>15}");
            }
            let cell = r.entropy.map_or("-".to_string(), |m| m.to_string());
            let _ = writeln!(s, " {cell:>15}");
        }
        s
    }

    /// One summary record per variant (metric → {mean, std}).
    pub fn summary_records(&self) -> Vec<Value> {
        self.rows
            .iter()
            .map(|r| {
                serde_json::json!({
                    "ablation": self.kind.to_string(),
                    "variant": r.variant,
                    "seeds": r.seeds,
                    "metrics": r.summary,
                    "expert_entropy": r.entropy,
                })
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layer_ranges_scale_to_depth() {
        let v = variants(AblationKind::LayerPlacement, &ExperimentConfig::default());
        let got: Vec<_> = v.iter().map(|v| v.config.placement.vision.clone()).collect();
        assert_eq!(got, vec![vec![0, 1], vec![2, 3], vec![4, 5], (0..6).collect()]);
    }

    #[test]
    fn kinds_round_trip() {
        for k in AblationKind::ALL {
            assert_eq!(k.to_string().parse::<AblationKind>().unwrap(), k);
        }
        assert!("experts".parse::<AblationKind>().is_err());
    }
}
