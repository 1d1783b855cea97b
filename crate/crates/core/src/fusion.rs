//! Bayesian fusion of report evidence.
//!
//! Two posteriors are tracked per cluster:
//!
//! - detection, `P(I=1 | reports)`: a two-class naive-Bayes update where a
//!   report with probability `p` has likelihood `p` under "incident" and
//!   `1 - p` under "no incident";
//! - localization, `P(R_j | I=1, reports)`: each region's prior weighted by
//!   the product over reports of the fraction of the report's circle that
//!   falls inside the region, then normalized.
//!
//! Their product is the joint plausibility `P(I=1, R_j | reports)`. The
//! posterior from one time step is the prior for the next.
//!
//! All products are taken in log space.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::CellId;

/// Probabilities are kept inside `[PROB_CLAMP, 1 - PROB_CLAMP]` before
/// entering the detection update, so that no single report is infallible.
pub const PROB_CLAMP: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FusionError {
    #[error("reliability {0} outside 1..=10")]
    InvalidReliability(u8),

    #[error("every region has a zero likelihood-prior product")]
    DegenerateLocalization,

    #[error("overlap row {row} has {got} entries, expected {expected}")]
    ShapeMismatch { row: usize, got: usize, expected: usize },
}

pub type Result<T> = std::result::Result<T, FusionError>;

pub fn reliability_to_prob(r: u8) -> Result<f64> {
    if (1..=10).contains(&r) {
        Ok(f64::from(r) / 10.0)
    } else {
        Err(FusionError::InvalidReliability(r))
    }
}

pub fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

/// `1 / (1 + exp(d))` without overflow.
fn inv_one_plus_exp(d: f64) -> f64 {
    if d > 0.0 {
        let e = (-d).exp();
        e / (1.0 + e)
    } else {
        1.0 / (1.0 + d.exp())
    }
}

/// Detection posterior for a batch of report probabilities given a prior.
///
/// With no reports the prior comes back unchanged.
pub fn detect_posterior(probs: &[f64], prior: f64) -> f64 {
    if probs.is_empty() {
        return prior;
    }
    let mut log_yes = prior.ln();
    let mut log_no = (1.0 - prior).ln();
    for &p in probs {
        let p = clamp_prob(p);
        log_yes += p.ln();
        log_no += (1.0 - p).ln();
    }
    if log_yes == f64::NEG_INFINITY {
        return 0.0;
    }
    if log_no == f64::NEG_INFINITY {
        return 1.0;
    }
    inv_one_plus_exp(log_no - log_yes)
}

/// Localization posterior over `priors.len()` regions.
///
/// `overlaps[i][j]` is the fraction of report `i`'s circle inside region `j`.
/// A region with zero overlap for any report, or a zero prior, gets
/// probability exactly zero.
pub fn localize_posterior(overlaps: &[Vec<f64>], priors: &[f64]) -> Result<Vec<f64>> {
    let v = priors.len();
    for (row, o) in overlaps.iter().enumerate() {
        if o.len() != v {
            return Err(FusionError::ShapeMismatch { row, got: o.len(), expected: v });
        }
    }
    let logs: Vec<f64> = (0..v)
        .map(|j| {
            let mut acc = ln_or_neg_inf(priors[j]);
            for o in overlaps {
                acc += ln_or_neg_inf(o[j]);
            }
            acc
        })
        .collect();
    normalize_logs(&logs).ok_or(FusionError::DegenerateLocalization)
}

/// Localization with the overlap-sum fallback used when every region is
/// excluded by at least one report. If even that is all-zero, the
/// normalized prior is returned.
pub fn localize_with_fallback(overlaps: &[Vec<f64>], priors: &[f64]) -> Result<Vec<f64>> {
    match localize_posterior(overlaps, priors) {
        Err(FusionError::DegenerateLocalization) => {}
        other => return other,
    }
    let summed: Vec<f64> = (0..priors.len())
        .map(|j| overlaps.iter().map(|o| o[j]).sum::<f64>() * priors[j])
        .collect();
    normalize(&summed)
        .or_else(|| normalize(priors))
        .ok_or(FusionError::DegenerateLocalization)
}

fn ln_or_neg_inf(x: f64) -> f64 {
    if x > 0.0 {
        x.ln()
    } else {
        f64::NEG_INFINITY
    }
}

fn normalize_logs(logs: &[f64]) -> Option<Vec<f64>> {
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return None;
    }
    let w: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = w.iter().sum();
    Some(w.into_iter().map(|x| x / z).collect())
}

fn normalize(xs: &[f64]) -> Option<Vec<f64>> {
    let z: f64 = xs.iter().sum();
    (z > 0.0 && z.is_finite()).then(|| xs.iter().map(|x| x / z).collect())
}

pub fn joint_posterior(p_incident: f64, region_dist: &[f64]) -> Vec<f64> {
    region_dist.iter().map(|d| p_incident * d).collect()
}

/// One report's contribution to a cluster update: its probability and the
/// overlap fraction for every cell its circle touches.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportEvidence {
    pub prob: f64,
    pub overlaps: BTreeMap<CellId, f64>,
}

/// Per-cluster belief, chained across time steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeliefState {
    pub cluster_id: u64,
    pub p_incident: f64,
    #[serde(with = "region_map")]
    pub region_dist: BTreeMap<CellId, f64>,
    pub step_count: u32,
    pub last_updated_step: u32,
}

impl BeliefState {
    /// A fresh belief carrying only the detection prior; regions are added
    /// by the first update.
    pub fn new(cluster_id: u64, prior_incident: f64) -> Self {
        Self {
            cluster_id,
            p_incident: prior_incident,
            region_dist: BTreeMap::new(),
            step_count: 0,
            last_updated_step: 0,
        }
    }

    /// Most probable region; ties resolve to the smallest cell id.
    pub fn argmax_region(&self) -> Option<(CellId, f64)> {
        let mut best: Option<(CellId, f64)> = None;
        for (&c, &p) in &self.region_dist {
            if best.is_none_or(|(_, bp)| p > bp) {
                best = Some((c, p));
            }
        }
        best
    }

    pub fn joint(&self) -> impl Iterator<Item = (CellId, f64)> + '_ {
        self.region_dist.iter().map(|(&c, &d)| (c, self.p_incident * d))
    }
}

/// Fold one step's reports into `state`.
///
/// Cells touched for the first time enter the localization prior with the
/// mass given by `entering_prior`, after which the vector is renormalized.
pub fn sequential_update(
    state: &BeliefState,
    step: u32,
    batch: &[ReportEvidence],
    entering_prior: impl Fn(CellId) -> f64,
) -> BeliefState {
    let mut next = state.clone();
    next.step_count += 1;
    next.last_updated_step = step;
    if batch.is_empty() {
        return next;
    }

    let probs: Vec<f64> = batch.iter().map(|e| e.prob).collect();
    next.p_incident = detect_posterior(&probs, state.p_incident);

    let mut prior = state.region_dist.clone();
    for e in batch {
        for &c in e.overlaps.keys() {
            prior.entry(c).or_insert_with(|| entering_prior(c));
        }
    }
    let cells: Vec<CellId> = prior.keys().copied().collect();
    let prior_vec: Vec<f64> = prior.values().copied().collect();
    let overlaps: Vec<Vec<f64>> = batch
        .iter()
        .map(|e| cells.iter().map(|c| e.overlaps.get(c).copied().unwrap_or(0.0)).collect())
        .collect();
    // The fallback only fails when every prior is zero, which the prior floor rules out.
    let dist = localize_with_fallback(&overlaps, &prior_vec)
        .unwrap_or_else(|_| vec![1.0 / cells.len() as f64; cells.len()]);
    next.region_dist = cells.into_iter().zip(dist).collect();
    next
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClusterStatus {
    Active,
    Alerted,
    Expired,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Transition {
    Remain,
    Alert,
    Expire,
}

/// Alert when the detection posterior reaches `threshold`; otherwise expire
/// once `max_steps` updates have passed.
pub fn lifecycle_tick(state: &BeliefState, max_steps: u32, threshold: f64) -> Transition {
    if state.p_incident >= threshold {
        Transition::Alert
    } else if state.step_count >= max_steps {
        Transition::Expire
    } else {
        Transition::Remain
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionDecision {
    pub cluster_id: u64,
    pub decided_at_ms: i64,
    pub alert: bool,
    pub p_incident: f64,
    pub argmax_region: CellId,
    pub joint_probability: f64,
}

impl DetectionDecision {
    pub fn from_state(state: &BeliefState, decided_at_ms: i64, alert: bool) -> Option<Self> {
        let (cell, d) = state.argmax_region()?;
        Some(Self {
            cluster_id: state.cluster_id,
            decided_at_ms,
            alert,
            p_incident: state.p_incident,
            argmax_region: cell,
            joint_probability: state.p_incident * d,
        })
    }
}

/// Fusion knobs; durations are in milliseconds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionConfig {
    pub delta_m: f64,
    pub t_prime_ms: i64,
    pub t_s_ms: i64,
    pub resolution: u8,
    pub alert_threshold: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            delta_m: 100.0,
            t_prime_ms: 25 * 60_000,
            t_s_ms: 60_000,
            resolution: 6,
            alert_threshold: 0.5,
        }
    }
}

impl FusionConfig {
    pub fn max_steps(&self) -> u32 {
        (self.t_prime_ms / self.t_s_ms).max(1) as u32
    }
}

// Serialize the region map as a list of {cell, p} pairs; JSON object keys must be strings.
mod region_map {
    use super::*;
    use serde::{Deserializer, Serializer};

    #[derive(Serialize, Deserialize)]
    struct Entry {
        cell: CellId,
        p: f64,
    }

    pub fn serialize<S: Serializer>(m: &BTreeMap<CellId, f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_seq(m.iter().map(|(&cell, &p)| Entry { cell, p }))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<BTreeMap<CellId, f64>, D::Error> {
        let v: Vec<Entry> = Vec::deserialize(d)?;
        Ok(v.into_iter().map(|e| (e.cell, e.p)).collect())
    }
}
