//! Time discretization and report grouping.
//!
//! Two grouping strategies produce incident hypotheses ("clusters"):
//!
//! - segmentation: per region, every report from the region's first report
//!   until `T'` later belongs to one cluster;
//! - density clustering: DBSCAN over standardized `(x, y, t)` features, with
//!   noise points promoted to singleton clusters.
//!
//! Later reports are attached to live clusters with [`associate`], which
//! reuses the clustering metric and `eps`.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::Serialize;
use thiserror::Error;

use crate::fusion::ClusterStatus;
use crate::geo::{CellId, GeoError, GridConfig, LocalXY};
use crate::ingest::Report;

pub const EPS_CANDIDATES: [f64; 5] = [0.5, 0.6, 0.7, 0.8, 0.9];
pub const DEFAULT_EPS: f64 = 0.8;
pub const DEFAULT_MIN_PTS: usize = 2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GroupingError {
    #[error("silhouette needs at least two clusters, found {0}")]
    TooFewClusters(usize),

    #[error("no eps candidate produced two or more clusters")]
    NoValidEps,

    #[error("invalid time-step config: t_s={t_s_ms} ms, T'={t_prime_ms} ms")]
    InvalidTimeSteps { t_s_ms: i64, t_prime_ms: i64 },

    #[error("features and labels differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),

    #[error("geometry error: {0}")]
    Geo(#[from] GeoError),
}

pub type Result<T> = std::result::Result<T, GroupingError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TimeStepConfig {
    pub t_s_ms: i64,
    pub t_prime_ms: i64,
}

impl TimeStepConfig {
    pub fn new(t_s_ms: i64, t_prime_ms: i64) -> Result<Self> {
        if t_s_ms <= 0 || t_prime_ms < t_s_ms || t_prime_ms % t_s_ms != 0 {
            return Err(GroupingError::InvalidTimeSteps { t_s_ms, t_prime_ms });
        }
        Ok(Self { t_s_ms, t_prime_ms })
    }

    pub fn max_steps(&self) -> u32 {
        (self.t_prime_ms / self.t_s_ms) as u32
    }
}

/// One time step: `[start_ms, start_ms + t_s)` and the reports inside it.
#[derive(Debug, Clone, Copy)]
pub struct TimeStep<'a> {
    pub index: u32,
    pub start_ms: i64,
    pub reports: &'a [Report],
}

/// Step-aligned floor of `t`.
pub fn align_down(t: i64, t_s_ms: i64) -> i64 {
    t.div_euclid(t_s_ms) * t_s_ms
}

/// Split time-sorted reports into consecutive steps, including empty ones.
pub fn discretize(reports: &[Report], t_s_ms: i64) -> Vec<TimeStep<'_>> {
    let Some(first) = reports.first() else {
        return Vec::new();
    };
    let t0 = align_down(first.pub_millis, t_s_ms);
    let mut steps = Vec::new();
    let mut lo = 0;
    let mut index = 0u32;
    while lo < reports.len() {
        let start = t0 + i64::from(index) * t_s_ms;
        let end = start + t_s_ms;
        let hi = lo + reports[lo..].partition_point(|r| r.pub_millis < end);
        steps.push(TimeStep { index, start_ms: start, reports: &reports[lo..hi] });
        lo = hi;
        index += 1;
    }
    steps
}

/// A group of reports hypothesized to describe one incident.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Cluster {
    pub id: u64,
    /// Indices into the report slice the cluster was built from.
    pub members: Vec<usize>,
    pub born_ms: i64,
    pub covered_regions: BTreeSet<CellId>,
    pub status: ClusterStatus,
}

/// Span between the earliest and latest member.
pub fn cluster_time_period(c: &Cluster, reports: &[Report]) -> i64 {
    let times = c.members.iter().map(|&i| reports[i].pub_millis);
    let (lo, hi) = times.fold((i64::MAX, i64::MIN), |(lo, hi), t| (lo.min(t), hi.max(t)));
    if c.members.is_empty() {
        0
    } else {
        hi - lo
    }
}

/// Region-anchored grouping of time-sorted reports: a report joins its
/// region's open segment if it arrives within `t_prime_ms` of the segment's
/// first report, otherwise it opens a new segment for that region.
pub fn segment_group(
    reports: &[Report],
    grid: &GridConfig,
    t_prime_ms: i64,
    delta_m: f64,
) -> Result<Vec<Cluster>> {
    let mut clusters: Vec<Cluster> = Vec::new();
    let mut open: BTreeMap<CellId, usize> = BTreeMap::new();
    for (i, r) in reports.iter().enumerate() {
        let xy = grid.project(r.location)?;
        let region = grid.cell_of_xy(xy);
        let covered = grid.covered_cells_xy(xy, delta_m);
        match open.get(&region) {
            Some(&k) if r.pub_millis - clusters[k].born_ms <= t_prime_ms => {
                clusters[k].members.push(i);
                clusters[k].covered_regions.extend(covered);
            }
            _ => {
                open.insert(region, clusters.len());
                clusters.push(Cluster {
                    id: clusters.len() as u64,
                    members: vec![i],
                    born_ms: r.pub_millis,
                    covered_regions: covered.into_iter().collect(),
                    status: ClusterStatus::Active,
                });
            }
        }
    }
    Ok(clusters)
}

/// A point in standardized space-time.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ClusterFeatures {
    pub x: f64,
    pub y: f64,
    pub t: f64,
}

impl ClusterFeatures {
    pub fn dist(&self, o: &ClusterFeatures) -> f64 {
        ((self.x - o.x).powi(2) + (self.y - o.y).powi(2) + (self.t - o.t).powi(2)).sqrt()
    }
}

/// Per-axis z-scoring fitted on a batch of `(x_m, y_m, t_ms)` points.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Standardizer {
    mean: [f64; 3],
    scale: [f64; 3],
}

impl Standardizer {
    /// Fit on `points`. Each axis's standard deviation is raised to at least
    /// the matching entry of `min_scale`; an axis whose scale is still zero
    /// uses 1.
    pub fn fit(points: &[(LocalXY, i64)], min_scale: [f64; 3]) -> Self {
        let n = points.len().max(1) as f64;
        let cols = |p: &(LocalXY, i64)| [p.0.x_m, p.0.y_m, p.1 as f64];
        let mut mean = [0.0; 3];
        for p in points {
            for (m, v) in mean.iter_mut().zip(cols(p)) {
                *m += v / n;
            }
        }
        let mut var = [0.0; 3];
        for p in points {
            for ((s, v), m) in var.iter_mut().zip(cols(p)).zip(mean) {
                *s += (v - m).powi(2) / n;
            }
        }
        let scale = std::array::from_fn(|k| {
            let s = var[k].sqrt().max(min_scale[k]);
            if s > 0.0 {
                s
            } else {
                1.0
            }
        });
        Self { mean, scale }
    }

    pub fn apply(&self, xy: LocalXY, t_ms: i64) -> ClusterFeatures {
        ClusterFeatures {
            x: (xy.x_m - self.mean[0]) / self.scale[0],
            y: (xy.y_m - self.mean[1]) / self.scale[1],
            t: (t_ms as f64 - self.mean[2]) / self.scale[2],
        }
    }
}

/// Z-score a batch of reports: metres east/north and publication time.
pub fn standardize_reports(reports: &[Report], grid: &GridConfig) -> Result<Vec<ClusterFeatures>> {
    let pts = reports
        .iter()
        .map(|r| Ok((grid.project(r.location)?, r.pub_millis)))
        .collect::<Result<Vec<_>>>()?;
    let z = Standardizer::fit(&pts, [0.0; 3]);
    Ok(pts.iter().map(|&(xy, t)| z.apply(xy, t)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DbscanLabel {
    Cluster(usize),
    Noise,
}

fn region_query(features: &[ClusterFeatures], i: usize, eps: f64) -> Vec<usize> {
    (0..features.len())
        .filter(|&j| features[i].dist(&features[j]) <= eps)
        .collect()
}

/// DBSCAN under Euclidean distance. Points are visited, and clusters
/// expanded, in index order, so the labelling is deterministic.
pub fn dbscan(features: &[ClusterFeatures], eps: f64, min_pts: usize) -> Vec<DbscanLabel> {
    const UNVISITED: usize = usize::MAX;
    const NOISE: usize = usize::MAX - 1;
    let n = features.len();
    let mut label = vec![UNVISITED; n];
    let mut next = 0;
    for i in 0..n {
        if label[i] != UNVISITED {
            continue;
        }
        let seeds = region_query(features, i, eps);
        if seeds.len() < min_pts {
            label[i] = NOISE;
            continue;
        }
        let c = next;
        next += 1;
        label[i] = c;
        let mut queue: VecDeque<usize> = seeds.into_iter().filter(|&j| j != i).collect();
        while let Some(j) = queue.pop_front() {
            if label[j] == NOISE {
                label[j] = c;
            }
            if label[j] != UNVISITED {
                continue;
            }
            label[j] = c;
            let nb = region_query(features, j, eps);
            if nb.len() >= min_pts {
                queue.extend(nb);
            }
        }
    }
    label
        .into_iter()
        .map(|l| if l == NOISE { DbscanLabel::Noise } else { DbscanLabel::Cluster(l) })
        .collect()
}

/// Replace noise labels with fresh singleton clusters, numbered after the
/// dense clusters in index order.
pub fn promote_noise(labels: &[DbscanLabel]) -> Vec<usize> {
    let mut next = labels
        .iter()
        .filter_map(|l| match l {
            DbscanLabel::Cluster(c) => Some(c + 1),
            DbscanLabel::Noise => None,
        })
        .max()
        .unwrap_or(0);
    labels
        .iter()
        .map(|l| match *l {
            DbscanLabel::Cluster(c) => c,
            DbscanLabel::Noise => {
                next += 1;
                next - 1
            }
        })
        .collect()
}

/// DBSCAN followed by noise promotion.
pub fn dbscan_promoted(features: &[ClusterFeatures], eps: f64, min_pts: usize) -> Vec<usize> {
    promote_noise(&dbscan(features, eps, min_pts))
}

/// Mean silhouette coefficient; points in singleton clusters score zero.
pub fn silhouette(features: &[ClusterFeatures], labels: &[usize]) -> Result<f64> {
    if features.len() != labels.len() {
        return Err(GroupingError::LengthMismatch(features.len(), labels.len()));
    }
    let ids: BTreeSet<usize> = labels.iter().copied().collect();
    if ids.len() < 2 {
        return Err(GroupingError::TooFewClusters(ids.len()));
    }
    let index: BTreeMap<usize, usize> = ids.iter().enumerate().map(|(k, &id)| (id, k)).collect();
    let k = ids.len();
    let mut sizes = vec![0usize; k];
    for l in labels {
        sizes[index[l]] += 1;
    }

    let n = features.len();
    let mut total = 0.0;
    let mut sums = vec![0.0; k];
    for i in 0..n {
        let own = index[&labels[i]];
        if sizes[own] == 1 {
            continue;
        }
        sums.iter_mut().for_each(|s| *s = 0.0);
        for j in 0..n {
            if i != j {
                sums[index[&labels[j]]] += features[i].dist(&features[j]);
            }
        }
        let a = sums[own] / (sizes[own] - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != own)
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        if m > 0.0 {
            total += (b - a) / m;
        }
    }
    Ok(total / n as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpsSweep {
    pub best_eps: f64,
    /// `(eps, silhouette)`; `-inf` where fewer than two clusters formed.
    pub scores: Vec<(f64, f64)>,
}

/// Pick the eps with the highest silhouette; ties go to the smaller eps.
pub fn sweep_eps(features: &[ClusterFeatures], eps_values: &[f64], min_pts: usize) -> Result<EpsSweep> {
    let mut ordered = eps_values.to_vec();
    ordered.sort_by(f64::total_cmp);
    let mut scores = Vec::with_capacity(ordered.len());
    let mut best: Option<(f64, f64)> = None;
    for eps in ordered {
        let labels = dbscan_promoted(features, eps, min_pts);
        let score = match silhouette(features, &labels) {
            Ok(s) => s,
            Err(GroupingError::TooFewClusters(_)) => f64::NEG_INFINITY,
            Err(e) => return Err(e),
        };
        scores.push((eps, score));
        if score > f64::NEG_INFINITY && best.is_none_or(|(_, s)| score > s) {
            best = Some((eps, score));
        }
    }
    let (best_eps, _) = best.ok_or(GroupingError::NoValidEps)?;
    Ok(EpsSweep { best_eps, scores })
}

/// What [`associate`] needs to know about a live cluster.
#[derive(Debug, Clone, Copy)]
pub struct LiveCluster<'a> {
    pub born_ms: i64,
    pub members: &'a [ClusterFeatures],
}

/// Attach each new report to the live cluster whose nearest member is
/// closest, if that distance is within `eps` and the cluster is no older
/// than `t_prime_ms` at `now_ms`. Equal distances go to the earlier-born
/// cluster, then the lower index. `None` means the report seeds a new cluster.
pub fn associate(
    new: &[ClusterFeatures],
    clusters: &[LiveCluster<'_>],
    now_ms: i64,
    eps: f64,
    t_prime_ms: i64,
) -> Vec<Option<usize>> {
    new.iter()
        .map(|f| {
            let mut best: Option<(f64, i64, usize)> = None;
            for (k, c) in clusters.iter().enumerate() {
                if now_ms - c.born_ms > t_prime_ms {
                    continue;
                }
                let d = c.members.iter().map(|m| f.dist(m)).fold(f64::INFINITY, f64::min);
                if d > eps {
                    continue;
                }
                let cand = (d, c.born_ms, k);
                let better = match best {
                    None => true,
                    Some(b) => cand.0 < b.0 || (cand.0 == b.0 && (cand.1, cand.2) < (b.1, b.2)),
                };
                if better {
                    best = Some(cand);
                }
            }
            best.map(|(_, _, k)| k)
        })
        .collect()
}
