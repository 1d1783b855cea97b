//! Per-(step, region) feature rows and the classifiers trained on them.
//!
//! A row exists for every step `m` and cell that some report published in
//! step `m` is located in or whose uncertainty circle touches. Baseline
//! features summarize the reports located in the cell during the step;
//! plausibility features are the largest joint posterior any live cluster
//! assigns the cell after the step's update.

pub mod forest;
pub mod logistic;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use thiserror::Error;

use crate::fusion::FusionConfig;
use crate::geo::{CellId, GridConfig};
use crate::ingest::{GroundTruthRecord, Report};
use crate::pipeline::{prepare, Detector, DetectorConfig, GroupingStrategy, PipelineError, TrackedCluster};
use crate::priors::PriorTable;

pub use forest::{fit_forest, ForestModel, ForestParams};
pub use logistic::{fit_logistic, LinearModel};

#[derive(Debug, Error)]
pub enum ClassifyError {
    #[error("training data must contain both classes")]
    SingleClass,

    #[error("no positive labels to tune a threshold on")]
    NoPositives,

    #[error("shape error: {0}")]
    Shape(String),

    #[error("unknown scheme {0:?} (expected M1..M10)")]
    UnknownScheme(String),

    #[error("model format error at line {line}: {message}")]
    Format { line: usize, message: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}

pub type Result<T> = std::result::Result<T, ClassifyError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Feature {
    AvgReliability,
    ReportCount,
    PlausibilitySeg,
    PlausibilityClu,
}

impl Feature {
    pub const ALL: [Feature; 4] =
        [Feature::AvgReliability, Feature::ReportCount, Feature::PlausibilitySeg, Feature::PlausibilityClu];

    pub fn name(&self) -> &'static str {
        match self {
            Feature::AvgReliability => "avg_reliability",
            Feature::ReportCount => "report_count",
            Feature::PlausibilitySeg => "plausibility_seg",
            Feature::PlausibilityClu => "plausibility_clu",
        }
    }

    fn from_name(s: &str) -> Option<Self> {
        Feature::ALL.into_iter().find(|f| f.name() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClassifierKind {
    Logistic,
    Forest,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Scheme {
    M1,
    M2,
    M3,
    M4,
    M5,
    M6,
    M7,
    M8,
    M9,
    M10,
}

impl Scheme {
    pub const ALL: [Scheme; 10] = [
        Scheme::M1,
        Scheme::M2,
        Scheme::M3,
        Scheme::M4,
        Scheme::M5,
        Scheme::M6,
        Scheme::M7,
        Scheme::M8,
        Scheme::M9,
        Scheme::M10,
    ];

    pub fn number(&self) -> usize {
        *self as usize + 1
    }

    /// Odd schemes use the forest, even ones logistic regression.
    pub fn classifier(&self) -> ClassifierKind {
        if self.number() % 2 == 1 {
            ClassifierKind::Forest
        } else {
            ClassifierKind::Logistic
        }
    }

    pub fn features(&self) -> &'static [Feature] {
        use Feature::*;
        match self {
            Scheme::M1 | Scheme::M2 => &[AvgReliability, ReportCount],
            Scheme::M3 | Scheme::M4 => &[PlausibilityClu],
            Scheme::M5 | Scheme::M6 => &[PlausibilitySeg],
            Scheme::M7 | Scheme::M8 => &[AvgReliability, ReportCount, PlausibilityClu],
            Scheme::M9 | Scheme::M10 => &[AvgReliability, ReportCount, PlausibilitySeg],
        }
    }

    /// Grouping strategy the scheme's plausibility depends on, if any.
    pub fn grouping(&self) -> Option<&'static str> {
        match self.features().last() {
            Some(Feature::PlausibilitySeg) => Some("segmentation"),
            Some(Feature::PlausibilityClu) => Some("dbscan"),
            _ => None,
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "M{}", self.number())
    }
}

impl FromStr for Scheme {
    type Err = ClassifyError;

    fn from_str(s: &str) -> Result<Self> {
        let n: usize = s
            .trim()
            .strip_prefix(['M', 'm'])
            .and_then(|d| d.parse().ok())
            .ok_or_else(|| ClassifyError::UnknownScheme(s.into()))?;
        Scheme::ALL.get(n.wrapping_sub(1)).copied().ok_or_else(|| ClassifyError::UnknownScheme(s.into()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRow {
    pub step: u32,
    pub step_start_ms: i64,
    pub region: CellId,
    pub avg_reliability: f64,
    pub report_count: f64,
    pub plausibility_seg: f64,
    pub plausibility_clu: f64,
    pub label: bool,
}

impl FeatureRow {
    pub fn get(&self, f: Feature) -> f64 {
        match f {
            Feature::AvgReliability => self.avg_reliability,
            Feature::ReportCount => self.report_count,
            Feature::PlausibilitySeg => self.plausibility_seg,
            Feature::PlausibilityClu => self.plausibility_clu,
        }
    }

    pub fn select(&self, features: &[Feature]) -> Vec<f64> {
        features.iter().map(|&f| self.get(f)).collect()
    }
}

/// `(avg_reliability, report_count)`, zeros when there are no reports.
pub fn extract_baseline_features(reliabilities: &[u8]) -> (f64, f64) {
    if reliabilities.is_empty() {
        return (0.0, 0.0);
    }
    let n = reliabilities.len() as f64;
    (reliabilities.iter().map(|&r| f64::from(r)).sum::<f64>() / n, n)
}

/// Largest joint posterior any cluster covering `region` assigns it.
pub fn extract_plausibility(clusters: &[TrackedCluster], region: CellId) -> f64 {
    clusters
        .iter()
        .filter_map(|c| c.belief.region_dist.get(&region).map(|d| c.belief.p_incident * d))
        .fold(0.0, f64::max)
}

/// Label each row true iff a record falls in its region during
/// `[step_start, step_start + t_prime)`.
pub fn label_rows(rows: &mut [FeatureRow], truth: &[GroundTruthRecord], grid: &GridConfig, t_prime_ms: i64) -> Result<()> {
    let mut by_cell: BTreeMap<CellId, Vec<i64>> = BTreeMap::new();
    for r in truth {
        let cell = grid.cell_of(r.location).map_err(PipelineError::from)?;
        by_cell.entry(cell).or_default().push(r.timestamp);
    }
    for ts in by_cell.values_mut() {
        ts.sort_unstable();
    }
    for row in rows.iter_mut() {
        row.label = by_cell.get(&row.region).is_some_and(|ts| {
            let k = ts.partition_point(|&t| t < row.step_start_ms);
            k < ts.len() && ts[k] < row.step_start_ms + t_prime_ms
        });
    }
    Ok(())
}

/// Everything needed to turn a report feed into feature rows.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureConfig {
    pub fusion: FusionConfig,
    pub utc_offset_hours: i32,
    pub eps: f64,
    pub min_pts: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            fusion: FusionConfig::default(),
            utc_offset_hours: 0,
            eps: crate::grouping::DEFAULT_EPS,
            min_pts: crate::grouping::DEFAULT_MIN_PTS,
        }
    }
}

impl FeatureConfig {
    pub fn detector(&self, strategy: GroupingStrategy) -> DetectorConfig {
        DetectorConfig { fusion: self.fusion, strategy, utc_offset_hours: self.utc_offset_hours }
    }
}

/// Build labeled rows with all four features.
pub fn build_feature_rows(
    reports: &[Report],
    truth: &[GroundTruthRecord],
    grid: &GridConfig,
    priors: &PriorTable,
    cfg: &FeatureConfig,
) -> Result<Vec<FeatureRow>> {
    let prepared = prepare(reports, grid, cfg.fusion.delta_m)?;
    // Step index -> cells needing a row, with the reliabilities located there.
    let mut keys: BTreeMap<u32, BTreeMap<CellId, Vec<u8>>> = BTreeMap::new();
    let mut starts: BTreeMap<u32, i64> = BTreeMap::new();
    let seg = Detector::new(*grid, cfg.detector(GroupingStrategy::Segmentation), priors)?;
    let mut seg_plaus: BTreeMap<(u32, CellId), f64> = BTreeMap::new();
    seg.run_observed(reports, |v| {
        if v.reports.is_empty() {
            return;
        }
        let cells = keys.entry(v.index).or_default();
        starts.insert(v.index, v.start_ms);
        for i in v.reports.clone() {
            cells.entry(prepared[i].region).or_default().push(reports[i].reliability);
            for &c in prepared[i].evidence.overlaps.keys() {
                cells.entry(c).or_default();
            }
        }
        for &c in cells.keys() {
            seg_plaus.insert((v.index, c), extract_plausibility(v.clusters, c));
        }
    })?;

    let clu = Detector::new(
        *grid,
        cfg.detector(GroupingStrategy::Dbscan { eps: cfg.eps, min_pts: cfg.min_pts }),
        priors,
    )?;
    let mut clu_plaus: BTreeMap<(u32, CellId), f64> = BTreeMap::new();
    clu.run_observed(reports, |v| {
        if let Some(cells) = keys.get(&v.index) {
            for &c in cells.keys() {
                clu_plaus.insert((v.index, c), extract_plausibility(v.clusters, c));
            }
        }
    })?;

    let mut rows = Vec::new();
    for (step, cells) in &keys {
        for (&region, rels) in cells {
            let (avg, count) = extract_baseline_features(rels);
            rows.push(FeatureRow {
                step: *step,
                step_start_ms: starts[step],
                region,
                avg_reliability: avg,
                report_count: count,
                plausibility_seg: seg_plaus.get(&(*step, region)).copied().unwrap_or(0.0),
                plausibility_clu: clu_plaus.get(&(*step, region)).copied().unwrap_or(0.0),
                label: false,
            });
        }
    }
    label_rows(&mut rows, truth, grid, cfg.fusion.t_prime_ms)?;
    Ok(rows)
}

pub const FEATURE_CSV_HEADER: &str =
    "step,step_start_ms,cell_res,cell_q,cell_r,avg_reliability,report_count,plausibility_seg,plausibility_clu,label";

pub fn write_feature_rows<W: Write>(rows: &[FeatureRow], mut out: W) -> Result<()> {
    writeln!(out, "{FEATURE_CSV_HEADER}")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.step,
            r.step_start_ms,
            r.region.res,
            r.region.q,
            r.region.r,
            r.avg_reliability,
            r.report_count,
            r.plausibility_seg,
            r.plausibility_clu,
            u8::from(r.label)
        )?;
    }
    Ok(())
}

pub fn read_feature_rows<R: BufRead>(input: R) -> Result<Vec<FeatureRow>> {
    let fmt = |line: usize, message: String| ClassifyError::Format { line, message };
    let mut lines = input.lines().enumerate();
    let header = lines.next().map(|(_, h)| h).transpose()?;
    if header.as_deref().map(str::trim) != Some(FEATURE_CSV_HEADER) {
        return Err(fmt(1, format!("expected header {FEATURE_CSV_HEADER:?}")));
    }
    let mut rows = Vec::new();
    for (idx, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        let bad = || fmt(idx + 1, format!("malformed row {line:?}"));
        if f.len() != 10 {
            return Err(bad());
        }
        let num = |i: usize| f[i].parse::<f64>().ok().filter(|v| v.is_finite());
        rows.push(FeatureRow {
            step: f[0].parse().map_err(|_| bad())?,
            step_start_ms: f[1].parse().map_err(|_| bad())?,
            region: CellId::new(
                f[2].parse().map_err(|_| bad())?,
                f[3].parse().map_err(|_| bad())?,
                f[4].parse().map_err(|_| bad())?,
            ),
            avg_reliability: num(5).ok_or_else(bad)?,
            report_count: num(6).ok_or_else(bad)?,
            plausibility_seg: num(7).ok_or_else(bad)?,
            plausibility_clu: num(8).ok_or_else(bad)?,
            label: match f[9] {
                "1" | "true" => true,
                "0" | "false" => false,
                _ => return Err(bad()),
            },
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Logistic(LinearModel),
    Forest(ForestModel),
}

impl Model {
    pub fn predict_proba(&self, x: &[f64]) -> f64 {
        match self {
            Model::Logistic(m) => m.predict_proba(x),
            Model::Forest(m) => m.predict_proba(x),
        }
    }

    pub fn kind(&self) -> ClassifierKind {
        match self {
            Model::Logistic(_) => ClassifierKind::Logistic,
            Model::Forest(_) => ClassifierKind::Forest,
        }
    }
}

/// Fit the classifier a scheme calls for on rows' scheme features.
pub fn fit_scheme(rows: &[FeatureRow], scheme: Scheme, forest: ForestParams) -> Result<Model> {
    let x: Vec<Vec<f64>> = rows.iter().map(|r| r.select(scheme.features())).collect();
    let y: Vec<bool> = rows.iter().map(|r| r.label).collect();
    if x.is_empty() {
        return Err(ClassifyError::SingleClass);
    }
    Ok(match scheme.classifier() {
        ClassifierKind::Logistic => Model::Logistic(fit_logistic(&x, &y)?),
        ClassifierKind::Forest => Model::Forest(fit_forest(&x, &y, forest)?),
    })
}

/// The F1-maximizing threshold over the sorted unique probabilities, with
/// ties resolved toward the smaller threshold. Returns `(threshold, f1)`.
pub fn learn_threshold(probs: &[f64], labels: &[bool]) -> Result<(f64, f64)> {
    if probs.len() != labels.len() {
        return Err(ClassifyError::Shape(format!("{} scores but {} labels", probs.len(), labels.len())));
    }
    let total_pos = labels.iter().filter(|&&y| y).count();
    if total_pos == 0 {
        return Err(ClassifyError::NoPositives);
    }
    let mut pairs: Vec<(f64, bool)> = probs.iter().copied().zip(labels.iter().copied()).collect();
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));

    // Walk thresholds from high to low; predicting positive when p >= t.
    let mut best = (f64::NAN, -1.0);
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < pairs.len() {
        let t = pairs[i].0;
        while i < pairs.len() && pairs[i].0 == t {
            if pairs[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let f1 = 2.0 * tp as f64 / (2 * tp + fp + (total_pos - tp)) as f64;
        // Lower thresholds come later, so `>=` keeps the smaller one on ties.
        if f1 >= best.1 {
            best = (t, f1);
        }
    }
    Ok(best)
}

/// A fitted model plus what is needed to apply it.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelFile {
    pub features: Vec<Feature>,
    pub threshold: Option<f64>,
    pub model: Model,
}

impl ModelFile {
    pub fn predict_row(&self, row: &FeatureRow) -> f64 {
        self.model.predict_proba(&row.select(&self.features))
    }

    pub fn write<W: Write>(&self, mut out: W) -> Result<()> {
        let kind = match self.model {
            Model::Logistic(_) => "logistic",
            Model::Forest(_) => "forest",
        };
        writeln!(out, "model={kind} version=1")?;
        let names: Vec<&str> = self.features.iter().map(Feature::name).collect();
        writeln!(out, "features={}", names.join(","))?;
        if let Some(t) = self.threshold {
            writeln!(out, "threshold={t:?}")?;
        }
        match &self.model {
            Model::Logistic(m) => {
                let w: Vec<String> = m.weights.iter().map(|v| format!("{v:?}")).collect();
                writeln!(out, "weights={}", w.join(","))?;
                writeln!(out, "intercept={:?}", m.intercept)?;
            }
            Model::Forest(f) => {
                writeln!(out, "n_trees={} max_depth={} n_features={}", f.trees.len(), f.max_depth, f.n_features)?;
                for t in &f.trees {
                    writeln!(out, "tree nodes={}", t.nodes.len())?;
                    for n in &t.nodes {
                        match n {
                            forest::Node::Leaf { p } => writeln!(out, "leaf {p:?}")?,
                            forest::Node::Split { feature, threshold, left, right } => {
                                writeln!(out, "split {feature} {threshold:?} {left} {right}")?
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    pub fn read<R: BufRead>(input: R) -> Result<Self> {
        let all: Vec<String> = input.lines().collect::<std::io::Result<_>>()?;
        let mut lines = all.iter().enumerate().map(|(i, l)| (i + 1, l.trim())).filter(|(_, l)| !l.is_empty());
        let fmt = |line: usize, message: &str| ClassifyError::Format { line, message: message.into() };
        let mut next = |what: &str| lines.next().ok_or_else(|| fmt(all.len(), &format!("missing {what}")));

        let (ln, header) = next("header")?;
        let kind = match header {
            "model=logistic version=1" => ClassifierKind::Logistic,
            "model=forest version=1" => ClassifierKind::Forest,
            _ => return Err(fmt(ln, "expected \"model=logistic|forest version=1\"")),
        };
        let (ln, feats) = next("features")?;
        let features = feats
            .strip_prefix("features=")
            .ok_or_else(|| fmt(ln, "expected features="))?
            .split(',')
            .map(|s| Feature::from_name(s).ok_or_else(|| fmt(ln, &format!("unknown feature {s:?}"))))
            .collect::<Result<Vec<_>>>()?;

        let (mut ln, mut line) = next("model body")?;
        let mut threshold = None;
        if let Some(t) = line.strip_prefix("threshold=") {
            threshold = Some(t.parse::<f64>().map_err(|_| fmt(ln, "bad threshold"))?);
            (ln, line) = next("model body")?;
        }
        let float = |ln: usize, s: &str| s.parse::<f64>().map_err(|_| fmt(ln, &format!("bad number {s:?}")));

        let model = match kind {
            ClassifierKind::Logistic => {
                let w = line.strip_prefix("weights=").ok_or_else(|| fmt(ln, "expected weights="))?;
                let weights = w.split(',').map(|s| float(ln, s)).collect::<Result<Vec<_>>>()?;
                let (ln, b) = next("intercept")?;
                let intercept = float(ln, b.strip_prefix("intercept=").ok_or_else(|| fmt(ln, "expected intercept="))?)?;
                if weights.len() != features.len() {
                    return Err(fmt(ln, "weight count differs from feature count"));
                }
                Model::Logistic(LinearModel { weights, intercept })
            }
            ClassifierKind::Forest => {
                let kv: BTreeMap<&str, usize> = line
                    .split_whitespace()
                    .filter_map(|t| t.split_once('='))
                    .filter_map(|(k, v)| Some((k, v.parse().ok()?)))
                    .collect();
                let (Some(&n_trees), Some(&max_depth), Some(&n_features)) =
                    (kv.get("n_trees"), kv.get("max_depth"), kv.get("n_features"))
                else {
                    return Err(fmt(ln, "expected n_trees= max_depth= n_features="));
                };
                let mut trees = Vec::with_capacity(n_trees);
                for _ in 0..n_trees {
                    let (ln, t) = next("tree")?;
                    let count: usize = t
                        .strip_prefix("tree nodes=")
                        .and_then(|v| v.parse().ok())
                        .ok_or_else(|| fmt(ln, "expected tree nodes=N"))?;
                    let mut nodes = Vec::with_capacity(count);
                    for _ in 0..count {
                        let (ln, n) = next("node")?;
                        let parts: Vec<&str> = n.split_whitespace().collect();
                        let int = |s: &str| s.parse::<usize>().map_err(|_| fmt(ln, "bad index"));
                        nodes.push(match parts.as_slice() {
                            ["leaf", p] => forest::Node::Leaf { p: float(ln, p)? },
                            ["split", f, t, l, r] => forest::Node::Split {
                                feature: int(f)?,
                                threshold: float(ln, t)?,
                                left: int(l)?,
                                right: int(r)?,
                            },
                            _ => return Err(fmt(ln, "expected leaf or split")),
                        });
                    }
                    let bad_ref = nodes.iter().any(|n| match *n {
                        forest::Node::Split { feature, left, right, .. } => {
                            feature >= n_features || left >= count || right >= count
                        }
                        forest::Node::Leaf { .. } => false,
                    });
                    if nodes.is_empty() || bad_ref {
                        return Err(fmt(ln, "tree references out of range"));
                    }
                    trees.push(forest::Tree { nodes });
                }
                if n_features != features.len() {
                    return Err(fmt(ln, "n_features differs from feature count"));
                }
                Model::Forest(ForestModel { trees, max_depth, n_features })
            }
        };
        Ok(ModelFile { features, threshold, model })
    }
}

/// Cells in `rows`, handy for coverage summaries.
pub fn row_cells(rows: &[FeatureRow]) -> BTreeSet<CellId> {
    rows.iter().map(|r| r.region).collect()
}
