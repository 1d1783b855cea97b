//! Classification metrics, k-fold cross-validation, hyperparameter sweeps,
//! and alert lead times.

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::classify::{
    build_feature_rows, fit_scheme, learn_threshold, ClassifyError, FeatureConfig, FeatureRow, ForestParams,
    Scheme,
};
use crate::fusion::{DetectionDecision, FusionConfig};
use crate::geo::{CellId, GeoPoint, GridConfig};
use crate::ingest::{GroundTruthRecord, Report};
use crate::priors::{PriorTable, DEFAULT_EPSILON_FLOOR};

const MINUTE_MS: i64 = 60_000;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("metric undefined: both classes are required")]
    SingleClass,

    #[error("need at least {k} rows for {k}-fold CV, got {n}")]
    TooFewRows { k: usize, n: usize },

    #[error("cannot build {k} folds with both classes in each ({pos} positive, {neg} negative rows)")]
    ClassStarved { k: usize, pos: usize, neg: usize },

    #[error("invalid sweep grid: {0}")]
    Grid(String),

    #[error(transparent)]
    Classify(#[from] ClassifyError),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, EvalError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn from_predictions(pred: &[bool], labels: &[bool]) -> Self {
        let mut c = Self::default();
        for (&p, &y) in pred.iter().zip(labels) {
            match (p, y) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        c
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

fn ratio(a: f64, b: f64) -> f64 {
    if b == 0.0 {
        0.0
    } else {
        a / b
    }
}

/// `(precision, recall, f1)` with 0/0 taken as 0.
pub fn precision_recall_f1(c: &ConfusionCounts) -> (f64, f64, f64) {
    let p = ratio(c.tp as f64, (c.tp + c.fp) as f64);
    let r = ratio(c.tp as f64, (c.tp + c.fn_) as f64);
    (p, r, ratio(2.0 * p * r, p + r))
}

/// Mann-Whitney AUC with half credit for ties.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let pos = labels.iter().filter(|&&y| y).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 || scores.len() != labels.len() {
        return Err(EvalError::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Doubled midranks keep the tie arithmetic in integers.
    let mut rank2_sum_pos: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid2 = (i + 1 + j + 1) as u128;
        for &k in &order[i..=j] {
            if labels[k] {
                rank2_sum_pos += mid2;
            }
        }
        i = j + 1;
    }
    let (p, n) = (pos as u128, neg as u128);
    // 2·U = Σ 2·rank − P(P+1); AUC = U / (P·N).
    let u2 = rank2_sum_pos - p * (p + 1);
    Ok(u2 as f64 / (2 * p * n) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub auc: f64,
}

impl Metrics {
    pub fn mean(all: &[Metrics]) -> Metrics {
        let n = all.len().max(1) as f64;
        let sum = |f: fn(&Metrics) -> f64| all.iter().map(f).sum::<f64>() / n;
        Metrics {
            precision: sum(|m| m.precision),
            recall: sum(|m| m.recall),
            f1: sum(|m| m.f1),
            auc: sum(|m| m.auc),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FoldPath {
    /// Plain shuffling worked after this many attempts (1 = first try).
    Shuffled { attempts: usize },
    Stratified,
}

/// Assign each of `n` rows a fold in `0..k`; sizes differ by at most one.
pub fn shuffled_folds(n: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let mut fold = vec![0; n];
    for (pos, &i) in idx.iter().enumerate() {
        fold[i] = pos % k;
    }
    fold
}

/// Shuffle within each class, then deal rows round-robin across folds.
pub fn stratified_folds(labels: &[bool], k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut fold = vec![0; labels.len()];
    let mut next = 0;
    for class in [true, false] {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        idx.shuffle(rng);
        for i in idx {
            fold[i] = next % k;
            next += 1;
        }
    }
    fold
}

fn folds_ok(fold: &[usize], labels: &[bool], k: usize) -> bool {
    let mut pos = vec![0usize; k];
    let mut all = vec![0usize; k];
    for (&f, &y) in fold.iter().zip(labels) {
        all[f] += 1;
        pos[f] += usize::from(y);
    }
    (0..k).all(|f| pos[f] > 0 && pos[f] < all[f])
}

/// Folds in which every test split holds both classes: up to ten shuffles,
/// then stratification.
pub fn make_folds(labels: &[bool], k: usize, seed: u64) -> Result<(Vec<usize>, FoldPath)> {
    let n = labels.len();
    if k < 2 || n < k {
        return Err(EvalError::TooFewRows { k, n });
    }
    let pos = labels.iter().filter(|&&y| y).count();
    if pos < k || n - pos < k {
        return Err(EvalError::ClassStarved { k, pos, neg: n - pos });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for attempt in 1..=10 {
        let fold = shuffled_folds(n, k, &mut rng);
        if folds_ok(&fold, labels, k) {
            return Ok((fold, FoldPath::Shuffled { attempts: attempt }));
        }
    }
    Ok((stratified_folds(labels, k, &mut rng), FoldPath::Stratified))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvReport {
    pub scheme: Scheme,
    pub folds: Vec<Metrics>,
    pub thresholds: Vec<f64>,
    pub mean: Metrics,
    pub path: FoldPath,
}

impl CvReport {
    /// CSV with one row per fold and a final `mean` row.
    pub fn write_csv<W: Write>(&self, mut out: W, header: bool) -> Result<()> {
        if header {
            writeln!(out, "{METRICS_HEADER}")?;
        }
        let line = |out: &mut W, fold: &str, m: &Metrics| {
            writeln!(out, "{},{fold},{},{},{},{}", self.scheme, m.precision, m.recall, m.f1, m.auc)
        };
        for (i, m) in self.folds.iter().enumerate() {
            line(&mut out, &i.to_string(), m)?;
        }
        line(&mut out, "mean", &self.mean)?;
        Ok(())
    }
}

pub const METRICS_HEADER: &str = "scheme,fold,precision,recall,f1,auc";
pub const SWEEP_HEADER: &str = "T_prime_min,t_s_min,delta_m,res,precision,recall,f1,auc";

/// Fit on k−1 folds, tune the threshold on the training predictions, and
/// score the held-out fold.
pub fn kfold_cv(rows: &[FeatureRow], scheme: Scheme, k: usize, seed: u64, forest: ForestParams) -> Result<CvReport> {
    let labels: Vec<bool> = rows.iter().map(|r| r.label).collect();
    let (fold, path) = make_folds(&labels, k, seed)?;
    let mut folds = Vec::with_capacity(k);
    let mut thresholds = Vec::with_capacity(k);
    for f in 0..k {
        let train: Vec<FeatureRow> = rows.iter().zip(&fold).filter(|(_, &g)| g != f).map(|(r, _)| r.clone()).collect();
        let test: Vec<&FeatureRow> = rows.iter().zip(&fold).filter(|(_, &g)| g == f).map(|(r, _)| r).collect();
        let model = fit_scheme(&train, scheme, ForestParams { seed: forest.seed.wrapping_add(f as u64), ..forest })?;
        let feats = scheme.features();
        let train_p: Vec<f64> = train.iter().map(|r| model.predict_proba(&r.select(feats))).collect();
        let train_y: Vec<bool> = train.iter().map(|r| r.label).collect();
        let (t, _) = learn_threshold(&train_p, &train_y)?;

        let p: Vec<f64> = test.iter().map(|r| model.predict_proba(&r.select(feats))).collect();
        let y: Vec<bool> = test.iter().map(|r| r.label).collect();
        let pred: Vec<bool> = p.iter().map(|&v| v >= t).collect();
        let (precision, recall, f1) = precision_recall_f1(&ConfusionCounts::from_predictions(&pred, &y));
        folds.push(Metrics { precision, recall, f1, auc: roc_auc(&p, &y)? });
        thresholds.push(t);
    }
    let mean = Metrics::mean(&folds);
    Ok(CvReport { scheme, folds, thresholds, mean, path })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepGrid {
    pub t_prime_min: Vec<i64>,
    pub t_s_min: Vec<i64>,
    pub delta_m: Vec<f64>,
    pub res: Vec<u8>,
}

impl SweepGrid {
    pub fn validate(&self) -> Result<()> {
        if self.t_prime_min.is_empty() || self.t_s_min.is_empty() || self.delta_m.is_empty() || self.res.is_empty() {
            return Err(EvalError::Grid("every dimension needs at least one value".into()));
        }
        if self.t_prime_min.iter().chain(&self.t_s_min).any(|&v| v <= 0) || self.delta_m.iter().any(|&v| v.is_nan() || v <= 0.0) {
            return Err(EvalError::Grid("values must be positive".into()));
        }
        Ok(())
    }

    pub fn combinations(&self) -> Vec<(i64, i64, f64, u8)> {
        let mut out = Vec::new();
        for &tp in &self.t_prime_min {
            for &ts in &self.t_s_min {
                for &d in &self.delta_m {
                    for &r in &self.res {
                        out.push((tp, ts, d, r));
                    }
                }
            }
        }
        out
    }
}

/// Inputs shared by every sweep combination.
pub struct SweepData<'a> {
    pub reports: &'a [Report],
    pub truth: &'a [GroundTruthRecord],
    /// Earlier records used only to estimate priors.
    pub history: &'a [GroundTruthRecord],
    pub origin: GeoPoint,
    pub utc_offset_hours: i32,
    pub eps: f64,
    pub min_pts: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub t_prime_min: i64,
    pub t_s_min: i64,
    pub delta_m: f64,
    pub res: u8,
    pub result: std::result::Result<Metrics, String>,
}

/// Build rows and run CV for one parameter combination.
pub fn evaluate_combination(
    data: &SweepData,
    params: (i64, i64, f64, u8),
    scheme: Scheme,
    k: usize,
    seed: u64,
    forest: ForestParams,
) -> std::result::Result<Metrics, String> {
    let (tp, ts, delta, res) = params;
    let grid = GridConfig::new(data.origin, res).map_err(|e| e.to_string())?;
    let priors = PriorTable::estimate(data.history, &grid, data.utc_offset_hours, DEFAULT_EPSILON_FLOOR)
        .map_err(|e| e.to_string())?;
    let fusion = FusionConfig {
        delta_m: delta,
        t_prime_ms: tp * MINUTE_MS,
        t_s_ms: ts * MINUTE_MS,
        resolution: res,
        ..FusionConfig::default()
    };
    let cfg = FeatureConfig { fusion, utc_offset_hours: data.utc_offset_hours, eps: data.eps, min_pts: data.min_pts };
    let rows = build_feature_rows(data.reports, data.truth, &grid, &priors, &cfg).map_err(|e| e.to_string())?;
    kfold_cv(&rows, scheme, k, seed, forest).map(|r| r.mean).map_err(|e| e.to_string())
}

/// Evaluate every grid combination; failures are recorded and skipped.
pub fn sweep(
    grid: &SweepGrid,
    data: &SweepData,
    scheme: Scheme,
    k: usize,
    seed: u64,
    forest: ForestParams,
) -> Result<Vec<SweepRow>> {
    grid.validate()?;
    Ok(grid
        .combinations()
        .into_iter()
        .map(|p| SweepRow {
            t_prime_min: p.0,
            t_s_min: p.1,
            delta_m: p.2,
            res: p.3,
            result: evaluate_combination(data, p, scheme, k, seed, forest),
        })
        .collect())
}

/// Index of the best-F1 successful row; ties keep the earlier row.
pub fn best_sweep_row(rows: &[SweepRow]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, r) in rows.iter().enumerate() {
        if let Ok(m) = &r.result {
            if best.is_none_or(|(_, f)| m.f1 > f) {
                best = Some((i, m.f1));
            }
        }
    }
    best.map(|b| b.0)
}

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], mut out: W) -> Result<()> {
    writeln!(out, "{SWEEP_HEADER}")?;
    for r in rows {
        let m = r.result.as_ref().copied().unwrap_or(Metrics {
            precision: f64::NAN,
            recall: f64::NAN,
            f1: f64::NAN,
            auc: f64::NAN,
        });
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.t_prime_min, r.t_s_min, r.delta_m, r.res, m.precision, m.recall, m.f1, m.auc
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct LeadMatch {
    pub cluster_id: u64,
    pub decided_at_ms: i64,
    pub record_ms: i64,
    pub region: CellId,
    /// Positive when the alert precedes the record.
    pub lead_min: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LeadTimeReport {
    pub matches: Vec<LeadMatch>,
    pub unmatched: usize,
    /// `None` when nothing matched.
    pub mean_lead_min: Option<f64>,
}

impl LeadTimeReport {
    pub fn write<W: Write>(&self, mut out: W) -> Result<()> {
        for m in &self.matches {
            writeln!(
                out,
                "cluster_id={} region={} decided_at_ms={} record_ms={} lead_min={}",
                m.cluster_id, m.region, m.decided_at_ms, m.record_ms, m.lead_min
            )?;
        }
        writeln!(out, "matched={} unmatched={}", self.matches.len(), self.unmatched)?;
        match self.mean_lead_min {
            Some(v) => writeln!(out, "mean_lead_min={v}")?,
            None => writeln!(out, "mean_lead_min=nan")?,
        }
        Ok(())
    }
}

/// Match each alert to the nearest-in-time record in its argmax region
/// within `±window_ms`; ties go to the earlier record.
pub fn lead_time(
    decisions: &[DetectionDecision],
    truth: &[GroundTruthRecord],
    grid: &GridConfig,
    window_ms: i64,
) -> LeadTimeReport {
    let mut by_cell: BTreeMap<CellId, Vec<i64>> = BTreeMap::new();
    for r in truth {
        if let Ok(c) = grid.cell_of(r.location) {
            by_cell.entry(c).or_default().push(r.timestamp);
        }
    }
    for v in by_cell.values_mut() {
        v.sort_unstable();
    }
    let mut matches = Vec::new();
    let mut unmatched = 0;
    for d in decisions.iter().filter(|d| d.alert) {
        let best = by_cell.get(&d.argmax_region).and_then(|ts| {
            let k = ts.partition_point(|&t| t < d.decided_at_ms - window_ms);
            ts[k..]
                .iter()
                .take_while(|&&t| t <= d.decided_at_ms + window_ms)
                .min_by_key(|&&t| ((t - d.decided_at_ms).abs(), t))
                .copied()
        });
        match best {
            Some(t) => matches.push(LeadMatch {
                cluster_id: d.cluster_id,
                decided_at_ms: d.decided_at_ms,
                record_ms: t,
                region: d.argmax_region,
                lead_min: (t - d.decided_at_ms) as f64 / MINUTE_MS as f64,
            }),
            None => unmatched += 1,
        }
    }
    let mean_lead_min =
        (!matches.is_empty()).then(|| matches.iter().map(|m| m.lead_min).sum::<f64>() / matches.len() as f64);
    LeadTimeReport { matches, unmatched, mean_lead_min }
}
