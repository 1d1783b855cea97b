//! The online detector: discretize, group, fuse, and tick cluster lifecycles.
//!
//! Reports are consumed one time step at a time. New reports either join a
//! live cluster or found a new one; every live cluster is updated once per
//! step (with an empty batch if nothing new arrived) and then checked for
//! alert or expiry. After the last report the detector keeps ticking empty
//! steps until every cluster has expired, so each cluster yields exactly one
//! decision.
//!
//! With density clustering, reports are first segmented by region exactly as
//! in the segmentation strategy, and each segment is then split with DBSCAN.
//! Standardization is fitted per segment, with the spatial scale floored at
//! `delta_m` and the temporal scale at one step.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::fusion::{
    clamp_prob, lifecycle_tick, reliability_to_prob, sequential_update, BeliefState, ClusterStatus,
    DetectionDecision, FusionConfig, FusionError, ReportEvidence, Transition,
};
use crate::geo::{CellId, GeoError, GridConfig, LocalXY};
use crate::grouping::{
    associate, dbscan_promoted, discretize, Cluster, ClusterFeatures, LiveCluster, Standardizer,
    DEFAULT_EPS, DEFAULT_MIN_PTS,
};
use crate::ingest::Report;
use crate::priors::{local_hour, PriorTable};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("geometry error: {0}")]
    Geo(#[from] GeoError),

    #[error("fusion error: {0}")]
    Fusion(#[from] FusionError),

    #[error("reports are not sorted by publication time (index {0})")]
    Unsorted(usize),

    #[error("invalid configuration: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, PipelineError>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GroupingStrategy {
    Segmentation,
    Dbscan { eps: f64, min_pts: usize },
}

impl GroupingStrategy {
    pub fn dbscan_default() -> Self {
        GroupingStrategy::Dbscan { eps: DEFAULT_EPS, min_pts: DEFAULT_MIN_PTS }
    }

    pub fn name(&self) -> &'static str {
        match self {
            GroupingStrategy::Segmentation => "segmentation",
            GroupingStrategy::Dbscan { .. } => "dbscan",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectorConfig {
    pub fusion: FusionConfig,
    pub strategy: GroupingStrategy,
    pub utc_offset_hours: i32,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            fusion: FusionConfig::default(),
            strategy: GroupingStrategy::Segmentation,
            utc_offset_hours: 0,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        let f = &self.fusion;
        if !(f.delta_m > 0.0 && f.delta_m.is_finite()) {
            return Err(PipelineError::Config(format!("delta_m must be positive, got {}", f.delta_m)));
        }
        if f.t_s_ms <= 0 || f.t_prime_ms < f.t_s_ms || f.t_prime_ms % f.t_s_ms != 0 {
            return Err(PipelineError::Config(format!(
                "T' ({} ms) must be a positive multiple of t_s ({} ms)",
                f.t_prime_ms, f.t_s_ms
            )));
        }
        if let GroupingStrategy::Dbscan { eps, min_pts } = self.strategy {
            if eps.is_nan() || eps <= 0.0 || min_pts == 0 {
                return Err(PipelineError::Config(format!("bad dbscan params eps={eps} min_pts={min_pts}")));
            }
        }
        Ok(())
    }
}

/// Per-report quantities computed once up front.
#[derive(Debug, Clone)]
pub struct PreparedReport {
    pub xy: LocalXY,
    pub region: CellId,
    pub evidence: ReportEvidence,
}

pub fn prepare(reports: &[Report], grid: &GridConfig, delta_m: f64) -> Result<Vec<PreparedReport>> {
    reports
        .iter()
        .map(|r| {
            let xy = grid.project(r.location)?;
            let overlaps = grid
                .covered_cells_xy(xy, delta_m)
                .into_iter()
                .map(|c| (c, grid.circle_cell_overlap_xy(xy, delta_m, c)))
                .collect();
            Ok(PreparedReport {
                xy,
                region: grid.cell_of_xy(xy),
                evidence: ReportEvidence { prob: reliability_to_prob(r.reliability)?, overlaps },
            })
        })
        .collect()
}

/// A cluster together with its current belief.
#[derive(Debug, Clone)]
pub struct TrackedCluster {
    pub cluster: Cluster,
    pub belief: BeliefState,
    /// Local hour at birth; newly covered cells draw priors for this hour.
    pub birth_hour: u32,
    pub latest_ms: i64,
}

impl TrackedCluster {
    pub fn is_live(&self) -> bool {
        self.cluster.status != ClusterStatus::Expired
    }
}

/// What an observer sees after each step: every cluster that was live during
/// the step, with beliefs updated through it.
pub struct StepView<'a> {
    pub index: u32,
    pub start_ms: i64,
    pub end_ms: i64,
    /// Indices of reports published in this step.
    pub reports: std::ops::Range<usize>,
    pub clusters: &'a [TrackedCluster],
}

#[derive(Debug, Clone, Default)]
pub struct DetectionRun {
    pub decisions: Vec<DetectionDecision>,
    /// Every cluster in creation order, with its final belief.
    pub clusters: Vec<TrackedCluster>,
}

impl DetectionRun {
    pub fn alerts(&self) -> impl Iterator<Item = &DetectionDecision> {
        self.decisions.iter().filter(|d| d.alert)
    }
}

struct Segment {
    born_ms: i64,
    members: Vec<usize>,
    /// Ids of clusters carved out of this segment.
    clusters: Vec<u64>,
}

pub struct Detector<'a> {
    grid: GridConfig,
    cfg: DetectorConfig,
    priors: &'a PriorTable,
}

impl<'a> Detector<'a> {
    pub fn new(grid: GridConfig, cfg: DetectorConfig, priors: &'a PriorTable) -> Result<Self> {
        cfg.validate()?;
        if grid.resolution != cfg.fusion.resolution {
            return Err(PipelineError::Config(format!(
                "grid resolution {} differs from configured {}",
                grid.resolution, cfg.fusion.resolution
            )));
        }
        if let Some((c, _, _)) = priors.raw_entries().find(|(c, _, _)| c.res != grid.resolution) {
            return Err(PipelineError::Config(format!(
                "priors are at resolution {} but the grid is at {}",
                c.res, grid.resolution
            )));
        }
        Ok(Self { grid, cfg, priors })
    }

    pub fn run(&self, reports: &[Report]) -> Result<DetectionRun> {
        self.run_observed(reports, |_| {})
    }

    /// Run over time-sorted reports, calling `observer` once per step.
    pub fn run_observed(&self, reports: &[Report], mut observer: impl FnMut(&StepView)) -> Result<DetectionRun> {
        if let Some(i) = reports.windows(2).position(|w| w[1].pub_millis < w[0].pub_millis) {
            return Err(PipelineError::Unsorted(i + 1));
        }
        let f = self.cfg.fusion;
        let prepared = prepare(reports, &self.grid, f.delta_m)?;
        let max_steps = f.max_steps();

        let mut all: Vec<TrackedCluster> = Vec::new();
        let mut live: Vec<TrackedCluster> = Vec::new();
        let mut segments: BTreeMap<CellId, Segment> = BTreeMap::new();
        let mut decisions = Vec::new();
        let mut next_id = 0u64;

        let steps = discretize(reports, f.t_s_ms);
        let mut offset = 0;
        let mut index = 0u32;
        let t0 = steps.first().map_or(0, |s| s.start_ms);
        loop {
            let (start_ms, range) = match steps.get(index as usize) {
                Some(s) => {
                    let r = offset..offset + s.reports.len();
                    offset = r.end;
                    (s.start_ms, r)
                }
                None if !live.is_empty() => (t0 + i64::from(index) * f.t_s_ms, offset..offset),
                None => break,
            };
            let end_ms = start_ms + f.t_s_ms;

            let batches = self.group_step(reports, &prepared, range.clone(), &mut live, &mut segments, &mut next_id);

            for tc in live.iter_mut() {
                let batch: Vec<ReportEvidence> = batches
                    .get(&tc.cluster.id)
                    .map(|ix| ix.iter().map(|&i| prepared[i].evidence.clone()).collect())
                    .unwrap_or_default();
                if let Some(ix) = batches.get(&tc.cluster.id) {
                    for &i in ix {
                        tc.cluster.covered_regions.extend(prepared[i].evidence.overlaps.keys().copied());
                        tc.latest_ms = tc.latest_ms.max(reports[i].pub_millis);
                    }
                }
                let hour = tc.birth_hour;
                tc.belief = sequential_update(&tc.belief, index, &batch, |c| self.priors.served(c, hour));

                match (tc.cluster.status, lifecycle_tick(&tc.belief, max_steps, f.alert_threshold)) {
                    (ClusterStatus::Active, Transition::Alert) => {
                        tc.cluster.status = ClusterStatus::Alerted;
                        decisions.extend(DetectionDecision::from_state(&tc.belief, tc.latest_ms, true));
                    }
                    (ClusterStatus::Active, Transition::Expire) => {
                        tc.cluster.status = ClusterStatus::Expired;
                        decisions.extend(DetectionDecision::from_state(&tc.belief, end_ms, false));
                    }
                    (ClusterStatus::Alerted, _) if tc.belief.step_count >= max_steps => {
                        tc.cluster.status = ClusterStatus::Expired;
                    }
                    _ => {}
                }
            }

            observer(&StepView { index, start_ms, end_ms, reports: range, clusters: &live });

            let (done, keep): (Vec<_>, Vec<_>) = live.into_iter().partition(|c| !c.is_live());
            all.extend(done);
            live = keep;
            index += 1;
        }
        all.sort_by_key(|c| c.cluster.id);
        Ok(DetectionRun { decisions, clusters: all })
    }

    /// Route this step's reports to clusters, creating clusters as needed.
    /// Returns new report indices keyed by cluster id.
    #[allow(clippy::too_many_arguments)]
    fn group_step(
        &self,
        reports: &[Report],
        prepared: &[PreparedReport],
        range: std::ops::Range<usize>,
        live: &mut Vec<TrackedCluster>,
        segments: &mut BTreeMap<CellId, Segment>,
        next_id: &mut u64,
    ) -> BTreeMap<u64, Vec<usize>> {
        let f = self.cfg.fusion;
        let mut batches: BTreeMap<u64, Vec<usize>> = BTreeMap::new();

        // Segment membership is shared by both strategies.
        let mut by_segment: BTreeMap<CellId, Vec<usize>> = BTreeMap::new();
        for i in range {
            let region = prepared[i].region;
            let t = reports[i].pub_millis;
            let reopen = match segments.get(&region) {
                Some(s) => t - s.born_ms > f.t_prime_ms || !self.segment_live(s, live),
                None => true,
            };
            if reopen {
                if let Some(pending) = by_segment.remove(&region) {
                    self.flush_segment(region, pending, reports, prepared, live, segments, &mut batches, next_id);
                }
                segments.insert(region, Segment { born_ms: t, members: Vec::new(), clusters: Vec::new() });
            }
            by_segment.entry(region).or_default().push(i);
        }
        for (region, pending) in by_segment {
            self.flush_segment(region, pending, reports, prepared, live, segments, &mut batches, next_id);
        }
        batches
    }

    fn segment_live(&self, s: &Segment, live: &[TrackedCluster]) -> bool {
        // A segment whose clusters have all expired is closed even inside T'.
        s.clusters.is_empty() || s.clusters.iter().any(|id| live.iter().any(|c| c.cluster.id == *id))
    }

    #[allow(clippy::too_many_arguments)]
    fn flush_segment(
        &self,
        region: CellId,
        pending: Vec<usize>,
        reports: &[Report],
        prepared: &[PreparedReport],
        live: &mut Vec<TrackedCluster>,
        segments: &mut BTreeMap<CellId, Segment>,
        batches: &mut BTreeMap<u64, Vec<usize>>,
        next_id: &mut u64,
    ) {
        let f = self.cfg.fusion;
        let seg = segments.get_mut(&region).expect("segment opened before flush");
        let now = pending.iter().map(|&i| reports[i].pub_millis).max().unwrap_or(seg.born_ms);

        let assignment: Vec<Option<u64>> = match self.cfg.strategy {
            GroupingStrategy::Segmentation => {
                let id = seg.clusters.first().copied();
                vec![id; pending.len()]
            }
            GroupingStrategy::Dbscan { eps, .. } => {
                let pts: Vec<(LocalXY, i64)> = seg
                    .members
                    .iter()
                    .chain(&pending)
                    .map(|&i| (prepared[i].xy, reports[i].pub_millis))
                    .collect();
                let z = Standardizer::fit(&pts, [f.delta_m, f.delta_m, f.t_s_ms as f64]);
                let feat = |i: usize| z.apply(prepared[i].xy, reports[i].pub_millis);

                let candidates: Vec<&TrackedCluster> = seg
                    .clusters
                    .iter()
                    .filter_map(|id| live.iter().find(|c| c.cluster.id == *id))
                    .collect();
                let member_feats: Vec<Vec<ClusterFeatures>> =
                    candidates.iter().map(|c| c.cluster.members.iter().map(|&i| feat(i)).collect()).collect();
                let views: Vec<LiveCluster> = candidates
                    .iter()
                    .zip(&member_feats)
                    .map(|(c, m)| LiveCluster { born_ms: c.cluster.born_ms, members: m })
                    .collect();
                let new_feats: Vec<ClusterFeatures> = pending.iter().map(|&i| feat(i)).collect();
                associate(&new_feats, &views, now, eps, f.t_prime_ms)
                    .into_iter()
                    .map(|k| k.map(|k| candidates[k].cluster.id))
                    .collect()
            }
        };

        let unassigned: Vec<usize> = pending
            .iter()
            .zip(&assignment)
            .filter(|(_, a)| a.is_none())
            .map(|(&i, _)| i)
            .collect();
        let groups: Vec<Vec<usize>> = match self.cfg.strategy {
            _ if unassigned.is_empty() => Vec::new(),
            GroupingStrategy::Segmentation => vec![unassigned],
            GroupingStrategy::Dbscan { eps, min_pts } => {
                let pts: Vec<(LocalXY, i64)> =
                    seg.members.iter().chain(&pending).map(|&i| (prepared[i].xy, reports[i].pub_millis)).collect();
                let z = Standardizer::fit(&pts, [f.delta_m, f.delta_m, f.t_s_ms as f64]);
                let feats: Vec<ClusterFeatures> =
                    unassigned.iter().map(|&i| z.apply(prepared[i].xy, reports[i].pub_millis)).collect();
                let labels = dbscan_promoted(&feats, eps, min_pts);
                let k = labels.iter().max().map_or(0, |m| m + 1);
                let mut groups = vec![Vec::new(); k];
                for (&i, &l) in unassigned.iter().zip(&labels) {
                    groups[l].push(i);
                }
                groups
            }
        };

        for (&i, a) in pending.iter().zip(&assignment) {
            if let Some(id) = a {
                let tc = live.iter_mut().find(|c| c.cluster.id == *id).expect("assigned to a live cluster");
                tc.cluster.members.push(i);
                batches.entry(*id).or_default().push(i);
            }
        }
        for members in groups {
            let id = *next_id;
            *next_id += 1;
            let born_ms = reports[members[0]].pub_millis;
            let hour = local_hour(born_ms, self.cfg.utc_offset_hours);
            let covered: BTreeSet<CellId> = members
                .iter()
                .flat_map(|&i| prepared[i].evidence.overlaps.keys().copied())
                .collect();
            let p0: f64 = covered.iter().map(|&c| self.priors.served(c, hour)).sum();
            live.push(TrackedCluster {
                cluster: Cluster {
                    id,
                    members: members.clone(),
                    born_ms,
                    covered_regions: BTreeSet::new(),
                    status: ClusterStatus::Active,
                },
                belief: BeliefState::new(id, clamp_prob(p0)),
                birth_hour: hour,
                latest_ms: born_ms,
            });
            seg.clusters.push(id);
            batches.insert(id, members);
        }
        seg.members.extend(pending);
    }
}

/// Convenience wrapper around [`Detector::run`].
pub fn detect(
    reports: &[Report],
    grid: &GridConfig,
    priors: &PriorTable,
    cfg: &DetectorConfig,
) -> Result<DetectionRun> {
    Detector::new(*grid, *cfg, priors)?.run(reports)
}
