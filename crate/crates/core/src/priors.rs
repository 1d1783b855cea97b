//! Region-by-hour incident priors estimated from historical records.
//!
//! Each entry is the joint fraction `count(cell, hour) / count(*)`. Served
//! priors are floored so that a cell with no history can still be detected.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use thiserror::Error;

use crate::geo::{CellId, GridConfig};
use crate::ingest::GroundTruthRecord;

pub const DEFAULT_EPSILON_FLOOR: f64 = 1e-6;
pub const CSV_HEADER: &str = "cell_res,cell_q,cell_r,hour,prior";

const HOUR_MS: i64 = 3_600_000;

#[derive(Debug, Error)]
pub enum PriorError {
    #[error("cannot estimate priors from an empty record set")]
    Empty,

    #[error("hour {0} outside 0..=23")]
    InvalidHour(u32),

    #[error("covered-region priors sum to {0}, which leaves no mass for the no-incident case")]
    InvalidPrior(f64),

    #[error("no cells given")]
    NoCells,

    #[error("geometry error: {0}")]
    Geo(#[from] crate::geo::GeoError),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("prior table format error at line {line}: {message}")]
    Format { line: usize, message: String },
}

pub type Result<T> = std::result::Result<T, PriorError>;

/// Local hour of day for a millisecond timestamp under a fixed UTC offset.
pub fn local_hour(timestamp_ms: i64, utc_offset_hours: i32) -> u32 {
    let shifted = timestamp_ms + i64::from(utc_offset_hours) * HOUR_MS;
    shifted.div_euclid(HOUR_MS).rem_euclid(24) as u32
}

#[derive(Debug, Clone, PartialEq)]
pub struct PriorTable {
    entries: BTreeMap<(CellId, u32), f64>,
    total_count: u64,
    epsilon_floor: f64,
}

/// Joint priors for the regions a cluster covers, plus their sum.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionPriors {
    pub cells: Vec<CellId>,
    pub joint: Vec<f64>,
    pub p_incident: f64,
}

impl RegionPriors {
    pub fn p_no_incident(&self) -> f64 {
        1.0 - self.p_incident
    }
}

impl PriorTable {
    pub fn estimate(
        records: &[GroundTruthRecord],
        grid: &GridConfig,
        utc_offset_hours: i32,
        epsilon_floor: f64,
    ) -> Result<Self> {
        if records.is_empty() {
            return Err(PriorError::Empty);
        }
        let mut counts: BTreeMap<(CellId, u32), u64> = BTreeMap::new();
        for r in records {
            let cell = grid.cell_of(r.location)?;
            let hour = local_hour(r.timestamp, utc_offset_hours);
            *counts.entry((cell, hour)).or_default() += 1;
        }
        let total = records.len() as u64;
        let entries = counts
            .into_iter()
            .map(|(k, n)| (k, n as f64 / total as f64))
            .collect();
        Ok(Self { entries, total_count: total, epsilon_floor })
    }

    pub fn total_count(&self) -> u64 {
        self.total_count
    }

    pub fn epsilon_floor(&self) -> f64 {
        self.epsilon_floor
    }

    /// Raw (unfloored) entries in (cell, hour) order.
    pub fn raw_entries(&self) -> impl Iterator<Item = (CellId, u32, f64)> + '_ {
        self.entries.iter().map(|(&(c, h), &p)| (c, h, p))
    }

    pub fn raw(&self, cell: CellId, hour: u32) -> f64 {
        self.entries.get(&(cell, hour)).copied().unwrap_or(0.0)
    }

    pub fn lookup(&self, cell: CellId, hour: u32) -> Result<f64> {
        if hour > 23 {
            return Err(PriorError::InvalidHour(hour));
        }
        Ok(self.raw(cell, hour).max(self.epsilon_floor))
    }

    /// Floored prior for an hour already reduced to `0..24`.
    pub fn served(&self, cell: CellId, hour: u32) -> f64 {
        self.raw(cell, hour % 24).max(self.epsilon_floor)
    }

    /// Per-cell joint priors P(R_j, I=1) and their sum P(I=1).
    pub fn region_priors(&self, cells: &[CellId], hour: u32) -> Result<RegionPriors> {
        if cells.is_empty() {
            return Err(PriorError::NoCells);
        }
        let joint = cells
            .iter()
            .map(|&c| self.lookup(c, hour))
            .collect::<Result<Vec<_>>>()?;
        let p_incident: f64 = joint.iter().sum();
        if p_incident >= 1.0 {
            return Err(PriorError::InvalidPrior(p_incident));
        }
        Ok(RegionPriors { cells: cells.to_vec(), joint, p_incident })
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "# total_count={} epsilon={}", self.total_count, self.epsilon_floor)?;
        writeln!(out, "{CSV_HEADER}")?;
        for (c, h, p) in self.raw_entries() {
            writeln!(out, "{},{},{},{},{}", c.res, c.q, c.r, h, p)?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(input: R) -> Result<Self> {
        let fmt = |line: usize, message: String| PriorError::Format { line, message };
        let mut lines = input.lines().enumerate();

        let (_, meta) = lines.next().ok_or_else(|| fmt(1, "empty input".into()))?;
        let meta = meta?;
        let mut total_count = None;
        let mut epsilon = None;
        for tok in meta.trim_start_matches('#').split_whitespace() {
            match tok.split_once('=') {
                Some(("total_count", v)) => total_count = v.parse::<u64>().ok(),
                Some(("epsilon", v)) => epsilon = v.parse::<f64>().ok(),
                _ => {}
            }
        }
        let (Some(total_count), Some(epsilon_floor)) = (total_count, epsilon) else {
            return Err(fmt(1, format!("bad metadata line {meta:?}")));
        };

        let (_, header) = lines.next().ok_or_else(|| fmt(2, "missing header".into()))?;
        if header?.trim() != CSV_HEADER {
            return Err(fmt(2, format!("expected header {CSV_HEADER:?}")));
        }

        let mut entries = BTreeMap::new();
        for (idx, line) in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            let bad = |_| fmt(idx + 1, format!("malformed row {line:?}"));
            if f.len() != 5 {
                return Err(fmt(idx + 1, format!("expected 5 fields in {line:?}")));
            }
            let cell = CellId::new(
                f[0].parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
                f[1].parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
                f[2].parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
            );
            let hour: u32 = f[3].parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?;
            let p: f64 = f[4].parse().map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?;
            if hour > 23 || !(0.0..=1.0).contains(&p) {
                return Err(fmt(idx + 1, format!("out-of-range row {line:?}")));
            }
            entries.insert((cell, hour), p);
        }
        Ok(Self { entries, total_count, epsilon_floor })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::GeoPoint;

    fn grid() -> GridConfig {
        GridConfig::new(GeoPoint::new(36.1627, -86.7816).unwrap(), 6).unwrap()
    }

    // 2019-10-01T00:00:00Z
    const DAY0: i64 = 1_569_888_000_000;

    fn rec(cell: CellId, hour: i64, g: &GridConfig) -> GroundTruthRecord {
        GroundTruthRecord {
            location: g.center_of(cell),
            timestamp: DAY0 + hour * HOUR_MS + 60_000,
            unit_segment_id: "S".into(),
        }
    }

    #[test]
    fn local_hour_handles_offsets() {
        assert_eq!(local_hour(DAY0, 0), 0);
        assert_eq!(local_hour(DAY0, -6), 18);
        assert_eq!(local_hour(DAY0 + 5 * HOUR_MS, 3), 8);
        assert_eq!(local_hour(0, -1), 23);
    }

    #[test]
    fn joint_fraction() {
        let g = grid();
        let a = CellId::new(6, 0, 0);
        let b = CellId::new(6, 1, 0);
        let mut recs: Vec<_> = (0..5).map(|_| rec(a, 8, &g)).collect();
        recs.extend((0..95).map(|i| rec(b, i % 24, &g)));
        let t = PriorTable::estimate(&recs, &g, 0, 1e-6).unwrap();
        assert!((t.lookup(a, 8).unwrap() - 0.05).abs() < 1e-15);
        assert_eq!(t.total_count(), 100);
        let sum: f64 = t.raw_entries().map(|(_, _, p)| p).sum();
        assert!((sum - 1.0).abs() < 1e-9);
    }

    #[test]
    fn floor_for_missing_cells() {
        let g = grid();
        let t = PriorTable::estimate(&[rec(CellId::new(6, 0, 0), 3, &g)], &g, 0, 1e-6).unwrap();
        assert_eq!(t.lookup(CellId::new(6, 5, 5), 3).unwrap(), 1e-6);
        assert_eq!(t.lookup(CellId::new(6, 0, 0), 3).unwrap(), 1.0);
        assert!(matches!(t.lookup(CellId::new(6, 0, 0), 24), Err(PriorError::InvalidHour(24))));
    }

    #[test]
    fn empty_records_fail() {
        assert!(matches!(PriorTable::estimate(&[], &grid(), 0, 1e-6), Err(PriorError::Empty)));
    }

    #[test]
    fn doubling_multiplicity_is_invisible() {
        let g = grid();
        let recs: Vec<_> = (0..30)
            .map(|i| rec(CellId::new(6, i % 3, -(i % 2)), i as i64 % 24, &g))
            .collect();
        let doubled: Vec<_> = recs.iter().chain(recs.iter()).cloned().collect();
        let a = PriorTable::estimate(&recs, &g, 0, 1e-6).unwrap();
        let b = PriorTable::estimate(&doubled, &g, 0, 1e-6).unwrap();
        assert_eq!(a.entries, b.entries);
    }

    #[test]
    fn region_priors_sum() {
        let mut t = PriorTable { entries: BTreeMap::new(), total_count: 100, epsilon_floor: 1e-6 };
        let cells: Vec<CellId> = (0..4).map(|i| CellId::new(6, i, 0)).collect();
        for (i, p) in [0.01, 0.02, 0.03, 0.04].into_iter().enumerate() {
            t.entries.insert((cells[i], 0), p);
        }
        let rp = t.region_priors(&cells, 0).unwrap();
        assert!((rp.p_incident - 0.1).abs() < 1e-12);
        assert!((rp.p_no_incident() - 0.9).abs() < 1e-12);

        let one = t.region_priors(&cells[..1], 0).unwrap();
        assert_eq!(one.p_incident, 0.01);

        let absent = [CellId::new(6, 9, 9), CellId::new(6, 9, 8)];
        let rp = t.region_priors(&absent, 0).unwrap();
        assert!((rp.p_incident - 2e-6).abs() < 1e-18);
    }

    #[test]
    fn degenerate_region_priors_error() {
        let g = grid();
        let t = PriorTable::estimate(&[rec(CellId::new(6, 0, 0), 3, &g)], &g, 0, 1e-6).unwrap();
        assert!(matches!(
            t.region_priors(&[CellId::new(6, 0, 0)], 3),
            Err(PriorError::InvalidPrior(_))
        ));
    }

    #[test]
    fn csv_round_trip() {
        let g = grid();
        let recs: Vec<_> = (0..7).map(|i| rec(CellId::new(6, i % 2, 1), i as i64, &g)).collect();
        let t = PriorTable::estimate(&recs, &g, 0, 1e-6).unwrap();
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("# total_count=7 epsilon=0.000001\n"));
        let back = PriorTable::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back, t);
    }
}
