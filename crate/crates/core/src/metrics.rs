//! Attack-detection metrics over fake-scores: ROC, AUC, EER, APCER/BPCER/ACER,
//! ACC, TPR@FPR and mean ± std aggregation.
//!
//! Decision rule everywhere: `score >= threshold` means "attack".

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::Label;
use crate::error::{Error, Result};

/// Fake-scores in `[0, 1]` with their ground-truth labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSet {
    scores: Vec<f64>,
    labels: Vec<Label>,
}

impl ScoredSet {
    pub fn new(scores: Vec<f64>, labels: Vec<Label>) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::Contract(format!(
                "{} scores for {} labels",
                scores.len(),
                labels.len()
            )));
        }
        if let Some(s) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
            return Err(Error::Contract(format!("score {s} outside [0, 1]")));
        }
        Ok(Self { scores, labels })
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// `(attacks, bonafide)` counts.
    pub fn class_counts(&self) -> (usize, usize) {
        let a = self.labels.iter().filter(|&&l| l == Label::Attack).count();
        (a, self.labels.len() - a)
    }

    fn require_both(&self) -> Result<(usize, usize)> {
        let (a, b) = self.class_counts();
        if a == 0 || b == 0 {
            return Err(Error::Contract(format!(
                "metric needs both classes (attack {a}, bonafide {b})"
            )));
        }
        Ok((a, b))
    }

    fn require_nonempty(&self) -> Result<()> {
        if self.is_empty() {
            return Err(Error::Contract("empty scored set".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    /// Smallest score classified as attack at this vertex; `+inf` for the
    /// origin.
    pub threshold: f64,
}

/// Tie groups in descending score order: `(score, attacks, bonafide)`.
fn groups(set: &ScoredSet) -> Vec<(f64, u64, u64)> {
    let mut order: Vec<usize> = (0..set.len()).collect();
    order.sort_by(|&i, &j| set.scores[j].total_cmp(&set.scores[i]));
    let mut out: Vec<(f64, u64, u64)> = Vec::new();
    for i in order {
        let (s, attack) = (set.scores[i], set.labels[i] == Label::Attack);
        match out.last_mut() {
            Some(g) if g.0 == s => {
                if attack {
                    g.1 += 1
                } else {
                    g.2 += 1
                }
            }
            _ => out.push((s, u64::from(attack), u64::from(!attack))),
        }
    }
    out
}

/// ROC vertices from `(0, 0)` to `(1, 1)`; samples sharing a score flip
/// together.
pub fn roc_curve(set: &ScoredSet) -> Result<Vec<RocPoint>> {
    let (na, nb) = set.require_both()?;
    let mut pts = vec![RocPoint {
        fpr: 0.0,
        tpr: 0.0,
        threshold: f64::INFINITY,
    }];
    let (mut tp, mut fp) = (0u64, 0u64);
    for (s, a, b) in groups(set) {
        tp += a;
        fp += b;
        pts.push(RocPoint {
            fpr: fp as f64 / nb as f64,
            tpr: tp as f64 / na as f64,
            threshold: s,
        });
    }
    Ok(pts)
}

/// Area under the ROC. Trapezoids are summed in integer half-units, so the
/// result is the Mann–Whitney statistic with ties counted as ½.
pub fn auc(set: &ScoredSet) -> Result<f64> {
    let (na, nb) = set.require_both()?;
    let mut tp = 0u128;
    let mut twice_area = 0u128;
    for (_, a, b) in groups(set) {
        let (a, b) = (u128::from(a), u128::from(b));
        twice_area += b * (2 * tp + a);
        tp += a;
    }
    Ok(twice_area as f64 / (2.0 * na as f64 * nb as f64))
}

/// Equal error rate on the linearly interpolated ROC, with the threshold
/// of the vertex that closes the crossing segment.
pub fn eer(set: &ScoredSet) -> Result<(f64, f64)> {
    let pts = roc_curve(set)?;
    // d = FAR − FRR = fpr − (1 − tpr), from −1 at the origin to +1 at (1, 1)
    let d = |p: &RocPoint| p.fpr + p.tpr - 1.0;
    for w in pts.windows(2) {
        let (p, q) = (&w[0], &w[1]);
        let (dp, dq) = (d(p), d(q));
        if dp <= 0.0 && dq >= 0.0 {
            let t = if dq == dp { 0.0 } else { -dp / (dq - dp) };
            return Ok((p.fpr + t * (q.fpr - p.fpr), q.threshold));
        }
    }
    unreachable!("ROC runs from (0, 0) to (1, 1)")
}

/// `(acer, apcer, bpcer)` at `threshold`.
pub fn acer(set: &ScoredSet, threshold: f64) -> Result<(f64, f64, f64)> {
    check_threshold(threshold)?;
    let (na, nb) = set.require_both()?;
    let mut missed = 0usize;
    let mut rejected = 0usize;
    for (&s, &l) in set.scores.iter().zip(&set.labels) {
        match l {
            Label::Attack if s < threshold => missed += 1,
            Label::Bonafide if s >= threshold => rejected += 1,
            _ => {}
        }
    }
    let apcer = missed as f64 / na as f64;
    let bpcer = rejected as f64 / nb as f64;
    Ok(((apcer + bpcer) / 2.0, apcer, bpcer))
}

/// Attack-presentation error rate alone; usable on attack-only subsets.
pub fn apcer(set: &ScoredSet, threshold: f64) -> Result<f64> {
    check_threshold(threshold)?;
    let (na, _) = set.class_counts();
    if na == 0 {
        return Err(Error::Contract("APCER needs at least one attack".into()));
    }
    let missed = set
        .scores
        .iter()
        .zip(&set.labels)
        .filter(|(&s, &l)| l == Label::Attack && s < threshold)
        .count();
    Ok(missed as f64 / na as f64)
}

pub fn acc(set: &ScoredSet, threshold: f64) -> Result<f64> {
    check_threshold(threshold)?;
    set.require_nonempty()?;
    let correct = set
        .scores
        .iter()
        .zip(&set.labels)
        .filter(|(&s, &l)| (s >= threshold) == (l == Label::Attack))
        .count();
    Ok(correct as f64 / set.len() as f64)
}

/// TPR at the last ROC vertex with FPR ≤ target, interpolated toward the
/// next vertex.
pub fn tpr_at_fpr(set: &ScoredSet, target: f64) -> Result<f64> {
    if !(target > 0.0 && target < 1.0) {
        return Err(Error::Contract(format!("FPR target {target} outside (0, 1)")));
    }
    let pts = roc_curve(set)?;
    let i = pts.iter().rposition(|p| p.fpr <= target).expect("origin has fpr 0");
    let p = pts[i];
    if p.fpr == target || i + 1 == pts.len() {
        return Ok(p.tpr);
    }
    let q = pts[i + 1];
    Ok(p.tpr + (target - p.fpr) / (q.fpr - p.fpr) * (q.tpr - p.tpr))
}

fn check_threshold(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Contract(format!("threshold {t} outside [0, 1]")));
    }
    Ok(())
}

/// FPR targets reported by [`MetricReport::compute`].
pub const FPR_TARGETS: [f64; 2] = [0.1, 0.01];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub acer: f64,
    pub apcer: f64,
    pub bpcer: f64,
    pub acc: f64,
    pub auc: f64,
    pub eer: f64,
    /// Keyed by the FPR target rendered with `{}` (`"0.1"`, `"0.01"`).
    pub tpr_at_fpr: BTreeMap<String, f64>,
    pub threshold_used: f64,
}

impl MetricReport {
    pub fn compute(set: &ScoredSet, threshold: f64) -> Result<Self> {
        let (acer, apcer, bpcer) = acer(set, threshold)?;
        let tpr_at_fpr = FPR_TARGETS
            .iter()
            .map(|&t| Ok((t.to_string(), tpr_at_fpr(set, t)?)))
            .collect::<Result<_>>()?;
        Ok(Self {
            acer,
            apcer,
            bpcer,
            acc: acc(set, threshold)?,
            auc: auc(set)?,
            eer: eer(set)?.0,
            tpr_at_fpr,
            threshold_used: threshold,
        })
    }

    /// Scalar fields by record name; TPR entries become `tpr_at_fpr_<target>`.
    pub fn fields(&self) -> BTreeMap<String, f64> {
        let mut m: BTreeMap<String, f64> = [
            ("acer", self.acer),
            ("apcer", self.apcer),
            ("bpcer", self.bpcer),
            ("acc", self.acc),
            ("auc", self.auc),
            ("eer", self.eer),
            ("threshold_used", self.threshold_used),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        for (t, v) in &self.tpr_at_fpr {
            m.insert(format!("tpr_at_fpr_{t}"), *v);
        }
        m
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl std::fmt::Display for MeanStd {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.4}±{:.4}", self.mean, self.std)
    }
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> Result<MeanStd> {
    if values.is_empty() {
        return Err(Error::Contract("cannot aggregate zero values".into()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Ok(MeanStd { mean, std: var.sqrt() })
}

/// Field-wise mean ± population std over reports.
pub fn aggregate(reports: &[MetricReport]) -> Result<BTreeMap<String, MeanStd>> {
    let first = reports
        .first()
        .ok_or_else(|| Error::Contract("cannot aggregate zero reports".into()))?;
    first
        .fields()
        .keys()
        .map(|k| {
            let vals: Vec<f64> = reports
                .iter()
                .map(|r| {
                    r.fields()
                        .get(k)
                        .copied()
                        .ok_or_else(|| Error::Contract(format!("report lacks field {k}")))
                })
                .collect::<Result<_>>()?;
            Ok((k.clone(), mean_std(&vals)?))
        })
        .collect()
}
