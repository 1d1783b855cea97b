//! Seeded synthetic scenarios: a report feed, the matching official records,
//! and a manifest linking each report to its incident.
//!
//! Incidents arrive as a Poisson process per cell-hour whose rate is the base
//! rate scaled by a per-cell hotspot weight and an hour-of-day profile. Each
//! incident produces one official record (after a recording delay) and a
//! Poisson number of reports published an exponential lead before that
//! record, scattered around the incident with Gaussian jitter. False reports
//! fall uniformly over the extent.
//!
//! The hotspot layout has its own seed so that a history scenario (used for
//! priors) and an evaluation scenario can share geography but not events.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, LogNormal, Normal, Poisson};
use thiserror::Error;

use crate::geo::{CellId, GeoPoint, GridConfig, LocalXY};
use crate::ingest::{write_ground_truth, write_reports, GroundTruthRecord, IngestError, Report, ACCIDENT};

const HOUR_MS: i64 = 3_600_000;
const MINUTE_MS: i64 = 60_000;

pub const REPORTS_FILE: &str = "reports.jsonl";
pub const TRUTH_FILE: &str = "ground_truth.csv";
pub const MANIFEST_FILE: &str = "manifest.csv";
pub const MANIFEST_HEADER: &str = "report_id,incident_id_or_false";

/// Reliability mix for reports of real incidents, mean ≈ 6.7.
///
/// Both mixes come from one maximum-entropy marginal split so that, at the
/// benchmark's share of genuine reports (1740 of 3300), a report with score
/// `r` is genuine with probability `r/10`.
pub const TRUE_RELIABILITY: [f64; 10] = [0.019, 0.040, 0.062, 0.084, 0.104, 0.121, 0.135, 0.143, 0.147, 0.145];
/// Reliability mix for spurious reports, mean ≈ 3.6.
pub const FALSE_RELIABILITY: [f64; 10] = [0.190, 0.179, 0.162, 0.141, 0.116, 0.090, 0.064, 0.040, 0.018, 0.0];

/// Relative incident intensity by local hour; mean 1.
pub const HOUR_PROFILE: [f64; 24] = [
    0.45, 0.35, 0.3, 0.3, 0.4, 0.65, 1.15, 1.75, 1.7, 1.15, 1.0, 1.0, 1.1, 1.1, 1.2, 1.4, 1.8, 1.9, 1.4, 1.1,
    0.9, 0.8, 0.6, 0.5,
];

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synthetic config: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Ingest(#[from] IngestError),
}

pub type Result<T> = std::result::Result<T, SynthError>;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub origin: GeoPoint,
    pub resolution: u8,
    pub extent: Vec<CellId>,
    pub start_ms: i64,
    pub duration_ms: i64,
    pub utc_offset_hours: i32,
    /// Mean incidents per cell-hour before hotspot and hour weighting.
    pub incident_rate: f64,
    /// Log-normal sigma of per-cell hotspot weights; 0 makes cells uniform.
    pub hotspot_sigma: f64,
    pub hour_profile: [f64; 24],
    pub reports_per_incident_mean: f64,
    pub report_location_sigma_m: f64,
    pub report_lead_mean_ms: f64,
    pub recording_delay_ms: i64,
    /// Mean spurious reports per cell-hour.
    pub false_report_rate: f64,
    pub true_reliability: [f64; 10],
    pub false_reliability: [f64; 10],
    pub seed: u64,
    pub layout_seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        default_benchmark(0)
    }
}

impl SynthConfig {
    pub fn grid(&self) -> Result<GridConfig> {
        GridConfig::new(self.origin, self.resolution).map_err(|e| SynthError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SynthError::Config(m));
        if self.extent.is_empty() {
            return bad("extent has no cells".into());
        }
        if self.extent.iter().any(|c| c.res != self.resolution) {
            return bad("extent cells must match the grid resolution".into());
        }
        if self.duration_ms < 0 {
            return bad(format!("negative duration {}", self.duration_ms));
        }
        let rates = [
            ("incident_rate", self.incident_rate),
            ("reports_per_incident_mean", self.reports_per_incident_mean),
            ("false_report_rate", self.false_report_rate),
            ("hotspot_sigma", self.hotspot_sigma),
            ("report_lead_mean_ms", self.report_lead_mean_ms),
        ];
        for (name, v) in rates {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be a finite non-negative number, got {v}"));
            }
        }
        if !(self.report_location_sigma_m > 0.0 && self.report_location_sigma_m.is_finite()) {
            return bad("report_location_sigma_m must be positive".into());
        }
        if self.recording_delay_ms < 0 {
            return bad("recording_delay_ms must be non-negative".into());
        }
        if self.hour_profile.iter().any(|&w| !(w >= 0.0 && w.is_finite())) {
            return bad("hour profile weights must be non-negative".into());
        }
        for (name, d) in [("true_reliability", &self.true_reliability), ("false_reliability", &self.false_reliability)] {
            let s: f64 = d.iter().sum();
            if d.iter().any(|&p| p.is_nan() || p < 0.0) || (s - 1.0).abs() > 1e-9 {
                return bad(format!("{name} must be a distribution summing to 1, got sum {s}"));
            }
        }
        self.grid()?;
        Ok(())
    }

    pub fn hours(&self) -> i64 {
        (self.duration_ms + HOUR_MS - 1) / HOUR_MS
    }
}

/// Cells within `rings` steps of the origin cell.
pub fn hex_extent(resolution: u8, rings: i32) -> Vec<CellId> {
    CellId::new(resolution, 0, 0).disk(rings)
}

/// Roughly a tenth of the reference study: 14 days over 217 cells with
/// about 290 incidents and 3,300 reports.
pub fn default_benchmark(seed: u64) -> SynthConfig {
    let extent = hex_extent(6, 8);
    let cell_hours = (extent.len() * 14 * 24) as f64;
    SynthConfig {
        origin: GeoPoint { lat: 36.1627, lon: -86.7816 },
        resolution: 6,
        extent,
        // 2019-10-01T00:00:00Z
        start_ms: 1_569_888_000_000,
        duration_ms: 14 * 24 * HOUR_MS,
        utc_offset_hours: 0,
        incident_rate: 290.0 / cell_hours,
        hotspot_sigma: 1.0,
        hour_profile: HOUR_PROFILE,
        reports_per_incident_mean: 6.0,
        report_location_sigma_m: 100.0,
        report_lead_mean_ms: 6.0 * MINUTE_MS as f64,
        recording_delay_ms: 10 * MINUTE_MS,
        false_report_rate: 1560.0 / cell_hours,
        true_reliability: TRUE_RELIABILITY,
        false_reliability: FALSE_RELIABILITY,
        seed,
        layout_seed: 2019,
    }
}

/// A month of history on the benchmark layout, for estimating priors. The
/// event stream is independent of `default_benchmark(seed)`.
pub fn default_history(seed: u64) -> SynthConfig {
    let mut cfg = default_benchmark(seed ^ 0x005e_ed0f_4157_0e1e);
    cfg.duration_ms = 30 * 24 * HOUR_MS;
    cfg.start_ms -= cfg.duration_ms;
    cfg
}

#[derive(Debug, Clone, PartialEq)]
pub struct Incident {
    pub id: String,
    pub cell: CellId,
    pub location: GeoPoint,
    pub occurred_ms: i64,
    pub recorded_ms: i64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Scenario {
    /// Sorted by publication time.
    pub reports: Vec<Report>,
    /// Sorted by timestamp.
    pub truth: Vec<GroundTruthRecord>,
    pub incidents: Vec<Incident>,
    /// `(report id, incident id)`; `None` for spurious reports.
    pub manifest: Vec<(String, Option<String>)>,
}

fn poisson(rng: &mut ChaCha8Rng, mean: f64) -> u64 {
    if mean <= 0.0 {
        return 0;
    }
    Poisson::new(mean).map(|d| d.sample(rng) as u64).unwrap_or(0)
}

fn uniform_in_cell(rng: &mut ChaCha8Rng, grid: &GridConfig, cell: CellId) -> LocalXY {
    let c = grid.center_xy(cell);
    let s = grid.edge_length_m();
    loop {
        let p = LocalXY::new(c.x_m + rng.random_range(-s..s), c.y_m + rng.random_range(-s..s));
        if grid.cell_of_xy(p) == cell {
            return p;
        }
    }
}

/// Per-cell hotspot weights, normalized to mean 1.
pub fn hotspot_weights(cfg: &SynthConfig) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.layout_seed);
    let raw: Vec<f64> = match LogNormal::new(0.0, cfg.hotspot_sigma) {
        Ok(d) if cfg.hotspot_sigma > 0.0 => cfg.extent.iter().map(|_| d.sample(&mut rng)).collect(),
        _ => vec![1.0; cfg.extent.len()],
    };
    let mean = raw.iter().sum::<f64>() / raw.len().max(1) as f64;
    raw.iter().map(|w| w / mean).collect()
}

pub fn generate(cfg: &SynthConfig) -> Result<Scenario> {
    cfg.validate()?;
    let grid = cfg.grid()?;
    let weights = hotspot_weights(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let true_rel = WeightedIndex::new(cfg.true_reliability).map_err(|e| SynthError::Config(e.to_string()))?;
    let false_rel = WeightedIndex::new(cfg.false_reliability).map_err(|e| SynthError::Config(e.to_string()))?;
    let jitter = Normal::new(0.0, cfg.report_location_sigma_m).map_err(|e| SynthError::Config(e.to_string()))?;
    let lead = (cfg.report_lead_mean_ms > 0.0).then(|| Exp::new(1.0 / cfg.report_lead_mean_ms).expect("positive rate"));
    let end_ms = cfg.start_ms + cfg.duration_ms;

    let mut out = Scenario::default();
    let make_report = |id: String, xy: LocalXY, t: i64, rel: u8| Report {
        id,
        kind: ACCIDENT.to_string(),
        confidence: rel / 3,
        report_rating: rel / 2,
        reliability: rel,
        location: grid.unproject(xy),
        pub_millis: t,
    };

    for h in 0..cfg.hours() {
        let hour_start = cfg.start_ms + h * HOUR_MS;
        let hour_len = HOUR_MS.min(end_ms - hour_start);
        let local = crate::priors::local_hour(hour_start, cfg.utc_offset_hours) as usize;
        let span = hour_len as f64 / HOUR_MS as f64;
        for (k, &cell) in cfg.extent.iter().enumerate() {
            let n_inc = poisson(&mut rng, cfg.incident_rate * weights[k] * cfg.hour_profile[local] * span);
            for _ in 0..n_inc {
                let xy = uniform_in_cell(&mut rng, &grid, cell);
                let occurred_ms = hour_start + rng.random_range(0..hour_len);
                let recorded_ms = occurred_ms + cfg.recording_delay_ms;
                let id = format!("inc{:06}", out.incidents.len());
                let n_rep = poisson(&mut rng, cfg.reports_per_incident_mean);
                for j in 0..n_rep {
                    let p = LocalXY::new(xy.x_m + jitter.sample(&mut rng), xy.y_m + jitter.sample(&mut rng));
                    let ahead = lead.map_or(0.0, |d| d.sample(&mut rng)).round() as i64;
                    let rel = true_rel.sample(&mut rng) as u8 + 1;
                    let rid = format!("{id}-r{j}");
                    out.reports.push(make_report(rid.clone(), p, recorded_ms - ahead, rel));
                    out.manifest.push((rid, Some(id.clone())));
                }
                out.truth.push(GroundTruthRecord {
                    location: grid.unproject(xy),
                    timestamp: recorded_ms,
                    unit_segment_id: id.clone(),
                });
                out.incidents.push(Incident { id, cell, location: grid.unproject(xy), occurred_ms, recorded_ms });
            }
            let n_false = poisson(&mut rng, cfg.false_report_rate * span);
            for _ in 0..n_false {
                let p = uniform_in_cell(&mut rng, &grid, cell);
                let t = hour_start + rng.random_range(0..hour_len);
                let rel = false_rel.sample(&mut rng) as u8 + 1;
                let rid = format!("f{:06}", out.manifest.len());
                out.reports.push(make_report(rid.clone(), p, t, rel));
                out.manifest.push((rid, None));
            }
        }
    }
    out.reports.sort_by(|a, b| a.pub_millis.cmp(&b.pub_millis).then_with(|| a.id.cmp(&b.id)));
    out.truth.sort_by(|a, b| a.timestamp.cmp(&b.timestamp).then_with(|| a.unit_segment_id.cmp(&b.unit_segment_id)));
    Ok(out)
}

pub fn write_manifest<W: Write>(manifest: &[(String, Option<String>)], mut out: W) -> Result<()> {
    writeln!(out, "{MANIFEST_HEADER}")?;
    for (r, i) in manifest {
        writeln!(out, "{r},{}", i.as_deref().unwrap_or("false"))?;
    }
    Ok(())
}

impl Scenario {
    /// Write the three scenario files into `dir`, creating it if needed.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let buffered = |name: &str| -> Result<std::io::BufWriter<std::fs::File>> {
            Ok(std::io::BufWriter::new(std::fs::File::create(dir.join(name))?))
        };
        let mut w = buffered(REPORTS_FILE)?;
        write_reports(&self.reports, &mut w)?;
        w.flush()?;
        let mut w = buffered(TRUTH_FILE)?;
        write_ground_truth(&self.truth, &mut w)?;
        w.flush()?;
        let mut w = buffered(MANIFEST_FILE)?;
        write_manifest(&self.manifest, &mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn incident_ids(&self) -> BTreeSet<&str> {
        self.incidents.iter().map(|i| i.id.as_str()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> SynthConfig {
        let mut c = default_benchmark(seed);
        c.extent = hex_extent(6, 2);
        c.duration_ms = 2 * 24 * HOUR_MS;
        c.incident_rate = 0.02;
        c.false_report_rate = 0.05;
        c
    }

    #[test]
    fn zero_rates_give_empty_output() {
        let mut c = small(1);
        c.incident_rate = 0.0;
        c.false_report_rate = 0.0;
        let s = generate(&c).unwrap();
        assert!(s.reports.is_empty() && s.truth.is_empty() && s.manifest.is_empty());
    }

    #[test]
    fn empty_extent_is_rejected() {
        let mut c = small(1);
        c.extent.clear();
        assert!(matches!(generate(&c), Err(SynthError::Config(_))));
    }

    #[test]
    fn bad_distribution_is_rejected() {
        let mut c = small(1);
        c.true_reliability[0] += 0.5;
        assert!(generate(&c).is_err());
        let mut c = small(1);
        c.report_location_sigma_m = 0.0;
        assert!(generate(&c).is_err());
    }

    #[test]
    fn same_seed_same_bytes() {
        let dir = tempdir();
        let a = generate(&small(5)).unwrap();
        let b = generate(&small(5)).unwrap();
        assert_eq!(a, b);
        a.write_to(&dir.join("a")).unwrap();
        b.write_to(&dir.join("b")).unwrap();
        for f in [REPORTS_FILE, TRUTH_FILE, MANIFEST_FILE] {
            assert_eq!(std::fs::read(dir.join("a").join(f)).unwrap(), std::fs::read(dir.join("b").join(f)).unwrap());
        }
        let c = generate(&small(6)).unwrap();
        assert_ne!(a, c);
        std::fs::remove_dir_all(dir).unwrap();
    }

    fn tempdir() -> std::path::PathBuf {
        let d = std::env::temp_dir().join(format!("synth-test-{}", std::process::id()));
        std::fs::create_dir_all(&d).unwrap();
        d
    }

    #[test]
    fn manifest_is_consistent() {
        let s = generate(&small(9)).unwrap();
        assert_eq!(s.manifest.len(), s.reports.len());
        let ids = s.incident_ids();
        for (_, inc) in &s.manifest {
            if let Some(i) = inc {
                assert!(ids.contains(i.as_str()));
            }
        }
        let truth_ids: BTreeSet<&str> = s.truth.iter().map(|r| r.unit_segment_id.as_str()).collect();
        assert_eq!(truth_ids, ids);
        assert!(s.reports.windows(2).all(|w| w[0].pub_millis <= w[1].pub_millis));
    }

    #[test]
    fn reports_precede_records() {
        let s = generate(&small(3)).unwrap();
        let rec: std::collections::BTreeMap<&str, i64> =
            s.incidents.iter().map(|i| (i.id.as_str(), i.recorded_ms)).collect();
        let by_id: std::collections::BTreeMap<&str, &Report> = s.reports.iter().map(|r| (r.id.as_str(), r)).collect();
        for (rid, inc) in &s.manifest {
            if let Some(i) = inc {
                assert!(by_id[rid.as_str()].pub_millis <= rec[i.as_str()]);
            }
        }
    }

    #[test]
    fn hotspot_weights_have_unit_mean() {
        let c = default_benchmark(0);
        let w = hotspot_weights(&c);
        assert_eq!(w.len(), 217);
        assert!((w.iter().sum::<f64>() / 217.0 - 1.0).abs() < 1e-12);
        let mean_profile = HOUR_PROFILE.iter().sum::<f64>() / 24.0;
        assert!((mean_profile - 1.0).abs() < 1e-12);
    }

    #[test]
    fn reliability_means() {
        let mean = |d: &[f64; 10]| d.iter().enumerate().map(|(i, p)| (i + 1) as f64 * p).sum::<f64>();
        assert!((mean(&TRUE_RELIABILITY) - 6.73).abs() < 0.01);
        assert!((mean(&FALSE_RELIABILITY) - 3.65).abs() < 0.01);
        assert!((TRUE_RELIABILITY.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((FALSE_RELIABILITY.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn reliability_is_calibrated() {
        let share = 1740.0 / 3300.0;
        for r in 0..10 {
            let t = share * TRUE_RELIABILITY[r];
            let f = (1.0 - share) * FALSE_RELIABILITY[r];
            assert!((t / (t + f) - (r + 1) as f64 / 10.0).abs() < 0.01, "r={}", r + 1);
        }
    }
}
