//! Relevance ranking metrics, the cumulative-mass selection rule, movement
//! classification metrics and report files.

use std::io::Write;

use chrono::NaiveDate;
use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data::Sample;
use crate::model::{self, ModelConfig, ModelError, ModelParams};
use crate::train::{TrainError, Workers};

/// Cumulative mass a selection must reach.
pub const SELECTION_MASS: f64 = 0.5;
/// Slack for float summation, so masses whose exact sum is one half still
/// qualify.
pub const SELECTION_SLACK: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no day has a ground-truth document; precision and recall are undefined")]
    NoGroundTruthDays,
    #[error("k must be at least 1")]
    ZeroK,
    #[error("nothing to evaluate")]
    Empty,
    #[error("predictions and targets differ in length ({0} vs {1})")]
    Length(usize, usize),
    #[error("day {date}: {msg}")]
    Day { date: NaiveDate, msg: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Document indices sorted by mass descending, ties by ascending index.
pub fn rank_by_mass(mass: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..mass.len()).collect();
    idx.sort_by(|&a, &b| mass[b].total_cmp(&mass[a]).then(a.cmp(&b)));
    idx
}

/// The shortest prefix of the mass ranking whose cumulative mass reaches
/// one half, in ranking order. Masses are used as given, not renormalized.
pub fn select_relevant(mass: &[f64]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut acc = 0.0;
    for j in rank_by_mass(mass) {
        out.push(j);
        acc += mass[j];
        if acc >= SELECTION_MASS - SELECTION_SLACK {
            break;
        }
    }
    out
}

/// One day's attention over its documents and its ground truth.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DayRanking {
    pub date: NaiveDate,
    pub mass: Vec<f64>,
    /// Ground-truth relevant indices, ascending.
    pub gtn: Vec<usize>,
    pub ranked: Vec<usize>,
}

impl DayRanking {
    pub fn new(date: NaiveDate, mass: Vec<f64>, mut gtn: Vec<usize>) -> Result<Self, EvalError> {
        let bad = |msg: String| Err(EvalError::Day { date, msg });
        if mass.is_empty() {
            return bad("no documents".into());
        }
        if mass.iter().any(|m| !(m.is_finite() && *m >= 0.0)) {
            return bad("mass entries must be finite and non-negative".into());
        }
        let total: f64 = mass.iter().sum();
        if (total - 1.0).abs() > 1e-6 {
            return bad(format!("mass sums to {total}"));
        }
        gtn.sort_unstable();
        gtn.dedup();
        if let Some(&g) = gtn.iter().find(|&&g| g >= mass.len()) {
            return bad(format!("ground-truth index {g} out of range"));
        }
        let ranked = rank_by_mass(&mass);
        Ok(Self { date, mass, gtn, ranked })
    }

    /// True positives among the top `k`.
    pub fn hits_at(&self, k: usize) -> usize {
        self.ranked.iter().take(k).filter(|j| self.gtn.binary_search(j).is_ok()).count()
    }
}

/// Mean precision and recall at `k` over days with at least one
/// ground-truth document. Precision divides by `min(k, n_i)` and recall by
/// `min(k, |gtn_i|)`.
pub fn precision_recall_at_k(days: &[DayRanking], k: usize) -> Result<(f64, f64), EvalError> {
    if k == 0 {
        return Err(EvalError::ZeroK);
    }
    let (mut pre, mut rec, mut n) = (0.0, 0.0, 0usize);
    for d in days.iter().filter(|d| !d.gtn.is_empty()) {
        let tp = d.hits_at(k) as f64;
        pre += tp / k.min(d.mass.len()) as f64;
        rec += tp / k.min(d.gtn.len()) as f64;
        n += 1;
    }
    if n == 0 {
        return Err(EvalError::NoGroundTruthDays);
    }
    Ok((pre / n as f64, rec / n as f64))
}

/// Precision and recall of one class; `None` where the denominator is zero.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ClassMetrics {
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    /// Targets of this class.
    pub support: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MovementMetrics {
    pub accuracy: f64,
    pub up: ClassMetrics,
    pub down: ClassMetrics,
    pub count: usize,
}

/// Confusion-matrix metrics with `true` meaning up.
pub fn movement_metrics(preds: &[bool], targets: &[bool]) -> Result<MovementMetrics, EvalError> {
    if preds.len() != targets.len() {
        return Err(EvalError::Length(preds.len(), targets.len()));
    }
    if preds.is_empty() {
        return Err(EvalError::Empty);
    }
    let count = |p: bool, t: bool| preds.iter().zip(targets).filter(|&(&a, &b)| a == p && b == t).count();
    let ratio = |num: usize, den: usize| (den > 0).then(|| num as f64 / den as f64);
    let class = |c: bool| {
        let tp = count(c, c);
        let fp = count(c, !c);
        let fn_ = count(!c, c);
        ClassMetrics {
            precision: ratio(tp, tp + fp),
            recall: ratio(tp, tp + fn_),
            support: tp + fn_,
        }
    };
    let correct = count(true, true) + count(false, false);
    Ok(MovementMetrics {
        accuracy: correct as f64 / preds.len() as f64,
        up: class(true),
        down: class(false),
        count: preds.len(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct KMetrics {
    pub k: usize,
    pub pre: f64,
    pub rec: f64,
}

/// Whether the relevance metrics could be computed, and how.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RelevanceInfo {
    pub available: bool,
    pub reason: Option<String>,
    pub precision_denominator: &'static str,
    pub recall_denominator: &'static str,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsReport {
    pub config_hash: String,
    pub variant: String,
    pub per_k: Vec<KMetrics>,
    pub relevance: RelevanceInfo,
    pub movement: MovementMetrics,
    /// Mean squared error in normalized units (next-value objective only).
    pub mse: Option<f64>,
    pub days: usize,
    pub gtd: usize,
}

/// One line of the per-day dump.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DayRecord {
    pub date: NaiveDate,
    pub mass: Option<Vec<f64>>,
    pub gtn: Vec<usize>,
    pub selected: Option<Vec<usize>>,
}

/// Hex SHA-256 of the JSON form of `cfg`.
pub fn config_hash(cfg: &ModelConfig) -> String {
    let json = serde_json::to_vec(cfg).expect("config serializes");
    Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
}

/// Relevance metrics for `k = 1..=k_max` from already built rankings.
pub fn per_k_metrics(days: &[DayRanking], k_max: usize) -> Result<Vec<KMetrics>, EvalError> {
    (1..=k_max)
        .map(|k| precision_recall_at_k(days, k).map(|(pre, rec)| KMetrics { k, pre, rec }))
        .collect()
}

/// Runs the model on every sample in date order and assembles the report
/// and the per-day records.
pub fn rank_report(
    params: &ModelParams,
    samples: &[Sample],
    k_max: usize,
    threads: usize,
) -> Result<(MetricsReport, Vec<DayRecord>), EvalError> {
    if samples.is_empty() {
        return Err(EvalError::Empty);
    }
    let cfg = params.config();
    let workers = Workers::new(threads)?;
    let preds = workers.map(samples.len(), |i| model::predict(params, &samples[i]));
    let mut rankings = Vec::new();
    let mut records = Vec::with_capacity(samples.len());
    let (mut up_pred, mut up_true) = (Vec::new(), Vec::new());
    let mut sq = 0.0;
    for (s, p) in samples.iter().zip(preds) {
        let (pred, _) = p?;
        let gtn = s.docs.ground_truth();
        up_pred.push(pred.up);
        up_true.push(s.window.movement_up());
        sq += (pred.value - s.window.target as f64).powi(2);
        let selected = pred.relevance.as_deref().map(select_relevant);
        if let Some(mass) = &pred.relevance {
            // f32 softmax output may miss unit sum by more than the ranking
            // tolerance; rescaling keeps the order
            let total: f64 = mass.iter().sum();
            let mass = mass.iter().map(|m| m / total).collect();
            rankings.push(DayRanking::new(s.window.date, mass, gtn.clone())?);
        }
        records.push(DayRecord {
            date: s.window.date,
            mass: pred.relevance,
            gtn,
            selected,
        });
    }
    let gtd = records.iter().filter(|r| !r.gtn.is_empty()).count();
    let (per_k, reason) = if !cfg.variant.has_relevance() {
        (Vec::new(), Some(format!("variant {} has no document attention", cfg.variant.name())))
    } else {
        match per_k_metrics(&rankings, k_max) {
            Ok(v) => (v, None),
            Err(EvalError::NoGroundTruthDays) => (Vec::new(), Some(EvalError::NoGroundTruthDays.to_string())),
            Err(e) => return Err(e),
        }
    };
    let report = MetricsReport {
        config_hash: config_hash(cfg),
        variant: cfg.variant.name().into(),
        relevance: RelevanceInfo {
            available: reason.is_none(),
            reason,
            precision_denominator: "min(k, n_i)",
            recall_denominator: "min(k, |gtn_i|)",
        },
        per_k,
        movement: movement_metrics(&up_pred, &up_true)?,
        mse: (cfg.objective == model::Objective::NextValue).then(|| sq / samples.len() as f64),
        days: samples.len(),
        gtd,
    };
    Ok((report, records))
}

pub fn write_report(report: &MetricsReport, mut out: impl Write) -> std::io::Result<()> {
    serde_json::to_writer_pretty(&mut out, report)?;
    out.write_all(b"\n")
}

pub fn write_days(records: &[DayRecord], mut out: impl Write) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// CSV with header `k,precision,recall`.
pub fn write_curve(per_k: &[KMetrics], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "k,precision,recall")?;
    for m in per_k {
        writeln!(out, "{},{},{}", m.k, m.pre, m.rec)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn day() -> NaiveDate {
        NaiveDate::from_ymd_opt(2013, 1, 22).unwrap()
    }

    fn ranking(mass: Vec<f64>, gtn: Vec<usize>) -> DayRanking {
        DayRanking::new(day(), mass, gtn).unwrap()
    }

    #[test]
    fn published_mass_selections() {
        let jan22 = [0.00, 0.15, 0.03, 0.21, 0.09, 0.03, 0.04, 0.02, 0.03, 0.01, 0.00, 0.01, 0.40];
        assert_eq!(select_relevant(&jan22), vec![12, 3]);
        let aug14 = [0.00, 0.00, 0.00, 0.00, 0.00, 0.03, 0.00, 0.02, 0.01, 0.76, 0.17];
        assert_eq!(select_relevant(&aug14), vec![9]);
        let jan09 = [0.00, 0.87, 0.00, 0.00];
        assert_eq!(select_relevant(&jan09), vec![1]);
    }

    #[test]
    fn uniform_quarter_masses_stop_at_exactly_one_half() {
        assert_eq!(select_relevant(&[0.25; 4]), vec![0, 1]);
        assert_eq!(select_relevant(&[0.1, 0.2, 0.2, 0.5]), vec![3]);
        // 0.2 + 0.2 + 0.1 is 0.5 in exact arithmetic but not in binary
        assert_eq!(select_relevant(&[0.2, 0.2, 0.1, 0.15, 0.35]), vec![4, 0]);
        assert_eq!(select_relevant(&[1.0]), vec![0]);
    }

    #[test]
    fn ranking_breaks_ties_by_index() {
        assert_eq!(rank_by_mass(&[0.2, 0.3, 0.2, 0.3]), vec![1, 3, 0, 2]);
    }

    #[test]
    fn direct_formula_cases() {
        let perfect = ranking(vec![0.1, 0.1, 0.1, 0.6, 0.1], vec![3]);
        assert_eq!(precision_recall_at_k(&[perfect], 1).unwrap(), (1.0, 1.0));
        // |gtn| = 2, one of them inside the top 5 of six documents
        let d = ranking(vec![0.3, 0.2, 0.15, 0.15, 0.1, 0.1], vec![1, 5]);
        assert_eq!(precision_recall_at_k(&[d], 5).unwrap(), (0.2, 0.5));
        // fewer documents than k
        let d = ranking(vec![0.5, 0.5], vec![1]);
        assert_eq!(precision_recall_at_k(&[d], 5).unwrap(), (0.5, 1.0));
    }

    #[test]
    fn days_without_ground_truth_are_excluded_or_undefined() {
        let none = ranking(vec![0.5, 0.5], vec![]);
        assert!(matches!(precision_recall_at_k(std::slice::from_ref(&none), 1), Err(EvalError::NoGroundTruthDays)));
        let hit = ranking(vec![0.9, 0.1], vec![0]);
        assert_eq!(precision_recall_at_k(&[none, hit], 1).unwrap(), (1.0, 1.0));
        assert!(matches!(precision_recall_at_k(&[], 0), Err(EvalError::ZeroK)));
    }

    #[test]
    fn invalid_days_are_rejected() {
        assert!(DayRanking::new(day(), vec![0.5, 0.4], vec![]).is_err());
        assert!(DayRanking::new(day(), vec![0.5, 0.5], vec![2]).is_err());
        assert!(DayRanking::new(day(), vec![], vec![]).is_err());
    }

    #[test]
    fn movement_degenerate_predictor() {
        let preds = [true; 4];
        let targets = [true, false, true, false];
        let m = movement_metrics(&preds, &targets).unwrap();
        assert_eq!(m.accuracy, 0.5);
        assert_eq!(m.up.precision, Some(0.5));
        assert_eq!(m.up.recall, Some(1.0));
        assert_eq!(m.down.recall, Some(0.0));
        assert_eq!(m.down.precision, None);
        let all = movement_metrics(&targets, &targets).unwrap();
        assert_eq!((all.accuracy, all.up.precision, all.down.recall), (1.0, Some(1.0), Some(1.0)));
        let no_down = movement_metrics(&[true, false], &[true, true]).unwrap();
        assert_eq!(no_down.down.recall, None);
        assert!(movement_metrics(&[], &[]).is_err());
    }

    #[test]
    fn movement_matches_brute_force_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        let preds: Vec<bool> = (0..50).map(|_| rng.random()).collect();
        let targets: Vec<bool> = (0..50).map(|_| rng.random()).collect();
        let m = movement_metrics(&preds, &targets).unwrap();
        let mut table = [[0usize; 2]; 2];
        for i in 0..50 {
            table[preds[i] as usize][targets[i] as usize] += 1;
        }
        assert_eq!(m.accuracy, (table[1][1] + table[0][0]) as f64 / 50.0);
        assert_eq!(m.up.precision.unwrap(), table[1][1] as f64 / (table[1][1] + table[1][0]) as f64);
        assert_eq!(m.down.recall.unwrap(), table[0][0] as f64 / (table[0][0] + table[1][0]) as f64);
    }

    #[test]
    fn recall_can_drop_while_k_is_below_the_ground_truth_count() {
        let d = ranking(vec![0.5, 0.3, 0.2], vec![0, 2]);
        assert_eq!(precision_recall_at_k(std::slice::from_ref(&d), 1).unwrap().1, 1.0);
        assert_eq!(precision_recall_at_k(&[d], 2).unwrap().1, 0.5);
    }

    #[test]
    fn curve_csv_format() {
        let mut b = Vec::new();
        write_curve(&[KMetrics { k: 1, pre: 0.5, rec: 1.0 }], &mut b).unwrap();
        assert_eq!(String::from_utf8(b).unwrap(), "k,precision,recall\n1,0.5,1\n");
    }

    fn random_day(rng: &mut ChaCha8Rng) -> DayRanking {
        let n = rng.random_range(1..12);
        // coarse masses make ties common
        let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0..4) as f64 + 0.5).collect();
        let total: f64 = raw.iter().sum();
        let mass = raw.iter().map(|m| m / total).collect();
        let gtn = (0..n).filter(|_| rng.random_bool(0.3)).collect();
        DayRanking::new(day(), mass, gtn).unwrap()
    }

    proptest! {
        #[test]
        fn selection_is_the_shortest_qualifying_prefix(raw in proptest::collection::vec(0.0f64..1.0, 1..20)) {
            let total: f64 = raw.iter().sum();
            prop_assume!(total > 1e-6);
            let mass: Vec<f64> = raw.iter().map(|m| m / total).collect();
            let sel = select_relevant(&mass);
            let ranked = rank_by_mass(&mass);
            prop_assert_eq!(&sel[..], &ranked[..sel.len()]);
            let sum: f64 = sel.iter().map(|&j| mass[j]).sum();
            prop_assert!(sum >= 0.5 - 1e-9);
            let without_last: f64 = sel[..sel.len() - 1].iter().map(|&j| mass[j]).sum();
            prop_assert!(without_last < 0.5 - 1e-9);
        }

        #[test]
        fn metrics_depend_only_on_the_ranking(seed in 0u64..500, k in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let days: Vec<DayRanking> = (0..5).map(|_| random_day(&mut rng)).collect();
            prop_assume!(days.iter().any(|d| !d.gtn.is_empty()));
            // square then renormalize: order preserving
            let squashed: Vec<DayRanking> = days.iter().map(|d| {
                let sq: Vec<f64> = d.mass.iter().map(|m| m * m).collect();
                let t: f64 = sq.iter().sum();
                DayRanking::new(d.date, sq.iter().map(|m| m / t).collect(), d.gtn.clone()).unwrap()
            }).collect();
            prop_assert_eq!(precision_recall_at_k(&days, k).unwrap(), precision_recall_at_k(&squashed, k).unwrap());
        }

        #[test]
        fn recall_never_decreases_once_k_covers_the_ground_truth(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let days: Vec<DayRanking> = (0..6).map(|_| random_day(&mut rng)).collect();
            prop_assume!(days.iter().any(|d| !d.gtn.is_empty()));
            let start = days.iter().map(|d| d.gtn.len()).max().unwrap().max(1);
            let mut prev = 0.0;
            for k in start..14 {
                let (_, r) = precision_recall_at_k(&days, k).unwrap();
                prop_assert!(r >= prev && r <= 1.0);
                prev = r;
            }
        }
    }
}
