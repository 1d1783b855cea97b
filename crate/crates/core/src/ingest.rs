//! Report-feed and ground-truth parsers.
//!
//! Reports arrive as one JSON object per line in the upstream feed layout.
//! Note that the feed's `location` object stores longitude in `x` and
//! latitude in `y`.
//!
//! Ground truth is a CSV with the exact header
//! `latitude,longitude,timestamp,unit_segment_id`.
//!
//! Malformed lines never abort a parse: they are returned alongside the good
//! records as [`LineError`]s.

use std::io::{BufRead, Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::GeoPoint;

pub const ACCIDENT: &str = "ACCIDENT";
pub const GROUND_TRUTH_HEADER: [&str; 4] = ["latitude", "longitude", "timestamp", "unit_segment_id"];

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("format error: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, IngestError>;

/// A per-line diagnostic; `line` is 1-based.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LineError {
    pub line: usize,
    pub message: String,
}

impl std::fmt::Display for LineError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "line {}: {}", self.line, self.message)
    }
}

/// One crowdsourced observation.
#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub id: String,
    pub kind: String,
    pub confidence: u8,
    pub report_rating: u8,
    /// Upstream reliability score, 1..=10.
    pub reliability: u8,
    pub location: GeoPoint,
    pub pub_millis: i64,
}

/// One official incident record.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthRecord {
    pub location: GeoPoint,
    pub timestamp: i64,
    pub unit_segment_id: String,
}

#[derive(Debug)]
pub struct Parsed<T> {
    pub records: Vec<T>,
    pub errors: Vec<LineError>,
}

impl<T> Default for Parsed<T> {
    fn default() -> Self {
        Self { records: Vec::new(), errors: Vec::new() }
    }
}

#[derive(Serialize, Deserialize)]
struct WireLocation {
    x: f64,
    y: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
struct WireReport {
    id: String,
    #[serde(rename = "type")]
    kind: String,
    confidence: u8,
    report_rating: u8,
    reliability: u8,
    location: WireLocation,
    pub_millis: i64,
}

impl TryFrom<WireReport> for Report {
    type Error = String;

    fn try_from(w: WireReport) -> std::result::Result<Self, String> {
        if !(1..=10).contains(&w.reliability) {
            return Err(format!("reliability {} outside 1..=10", w.reliability));
        }
        if w.pub_millis < 0 {
            return Err(format!("pubMillis {} is negative", w.pub_millis));
        }
        let location = GeoPoint::new(w.location.y, w.location.x).map_err(|e| e.to_string())?;
        Ok(Report {
            id: w.id,
            kind: w.kind,
            confidence: w.confidence,
            report_rating: w.report_rating,
            reliability: w.reliability,
            location,
            pub_millis: w.pub_millis,
        })
    }
}

impl From<&Report> for WireReport {
    fn from(r: &Report) -> Self {
        WireReport {
            id: r.id.clone(),
            kind: r.kind.clone(),
            confidence: r.confidence,
            report_rating: r.report_rating,
            reliability: r.reliability,
            location: WireLocation { x: r.location.lon, y: r.location.lat },
            pub_millis: r.pub_millis,
        }
    }
}

/// Parse a line-delimited report feed. Blank lines are ignored; output is
/// stably sorted by `pub_millis`.
pub fn parse_reports<R: BufRead>(input: R) -> Result<Parsed<Report>> {
    let mut out = Parsed::default();
    for (idx, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed = serde_json::from_str::<WireReport>(&line)
            .map_err(|e| e.to_string())
            .and_then(Report::try_from);
        match parsed {
            Ok(r) => out.records.push(r),
            Err(message) => out.errors.push(LineError { line: idx + 1, message }),
        }
    }
    out.records.sort_by_key(|r| r.pub_millis);
    Ok(out)
}

pub fn write_reports<W: Write>(reports: &[Report], mut out: W) -> Result<()> {
    for r in reports {
        let line = serde_json::to_string(&WireReport::from(r))
            .map_err(|e| IngestError::Format(e.to_string()))?;
        writeln!(out, "{line}")?;
    }
    Ok(())
}

pub fn filter_accidents(reports: Vec<Report>) -> Vec<Report> {
    reports.into_iter().filter(|r| r.kind == ACCIDENT).collect()
}

/// Parse ground-truth CSV. A header mismatch is fatal; bad rows are reported
/// per line. Output is stably sorted by timestamp.
pub fn parse_ground_truth<R: Read>(input: R) -> Result<Parsed<GroundTruthRecord>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(input);
    let headers = rdr
        .headers()
        .map_err(|e| IngestError::Format(e.to_string()))?
        .clone();
    let got: Vec<&str> = headers.iter().map(str::trim).collect();
    if got != GROUND_TRUTH_HEADER {
        return Err(IngestError::Format(format!(
            "expected header {:?}, found {:?}",
            GROUND_TRUTH_HEADER.join(","),
            got.join(",")
        )));
    }

    let mut out = Parsed::default();
    for row in rdr.records() {
        let row = match row {
            Ok(r) => r,
            Err(e) => {
                let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
                out.errors.push(LineError { line, message: e.to_string() });
                continue;
            }
        };
        let line = row.position().map(|p| p.line() as usize).unwrap_or(0);
        match ground_truth_row(&row) {
            Ok(r) => out.records.push(r),
            Err(message) => out.errors.push(LineError { line, message }),
        }
    }
    out.records.sort_by_key(|r| r.timestamp);
    Ok(out)
}

fn ground_truth_row(row: &csv::StringRecord) -> std::result::Result<GroundTruthRecord, String> {
    if row.len() != 4 {
        return Err(format!("expected 4 fields, found {}", row.len()));
    }
    let num = |i: usize, name: &str| -> std::result::Result<f64, String> {
        row[i]
            .trim()
            .parse::<f64>()
            .map_err(|_| format!("{name} is not numeric: {:?}", &row[i]))
    };
    let lat = num(0, "latitude")?;
    let lon = num(1, "longitude")?;
    let timestamp: i64 = row[2]
        .trim()
        .parse()
        .map_err(|_| format!("timestamp is not an integer: {:?}", &row[2]))?;
    if timestamp < 0 {
        return Err(format!("timestamp {timestamp} is negative"));
    }
    let location = GeoPoint::new(lat, lon).map_err(|e| e.to_string())?;
    Ok(GroundTruthRecord { location, timestamp, unit_segment_id: row[3].to_string() })
}

pub fn write_ground_truth<W: Write>(records: &[GroundTruthRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| IngestError::Format(e.to_string());
    w.write_record(GROUND_TRUTH_HEADER).map_err(io)?;
    for r in records {
        w.write_record([
            r.location.lat.to_string(),
            r.location.lon.to_string(),
            r.timestamp.to_string(),
            r.unit_segment_id.clone(),
        ])
        .map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const LINE: &str = r#"{"id":"a1","type":"ACCIDENT","confidence":2,"reportRating":4,"reliability":7,"location":{"x":-86.78,"y":36.16},"pubMillis":1569888300000}"#;

    #[test]
    fn parses_a_valid_line() {
        let p = parse_reports(LINE.as_bytes()).unwrap();
        assert!(p.errors.is_empty());
        let r = &p.records[0];
        assert_eq!(r.reliability, 7);
        assert_eq!(r.location.lat, 36.16);
        assert_eq!(r.location.lon, -86.78);
        assert_eq!(r.pub_millis, 1_569_888_300_000);
        assert_eq!(r.kind, "ACCIDENT");
    }

    #[test]
    fn missing_field_is_named() {
        let line = LINE.replace(r#","pubMillis":1569888300000"#, "");
        let p = parse_reports(line.as_bytes()).unwrap();
        assert!(p.records.is_empty());
        assert_eq!(p.errors.len(), 1);
        assert_eq!(p.errors[0].line, 1);
        assert!(p.errors[0].message.contains("pubMillis"), "{}", p.errors[0].message);
    }

    #[test]
    fn reliability_out_of_range_is_rejected() {
        let text = format!("{LINE}\n{}\n", LINE.replace(r#""reliability":7"#, r#""reliability":11"#));
        let p = parse_reports(text.as_bytes()).unwrap();
        assert_eq!(p.records.len(), 1);
        assert_eq!(p.errors[0].line, 2);
        assert!(p.errors[0].message.contains("reliability"));
    }

    #[test]
    fn output_is_sorted_by_time() {
        let late = LINE.replace("1569888300000", "1569888900000").replace("a1", "late");
        let text = format!("{late}\n{LINE}\n");
        let p = parse_reports(text.as_bytes()).unwrap();
        assert_eq!(p.records[0].id, "a1");
        assert_eq!(p.records[1].id, "late");
    }

    #[test]
    fn filter_keeps_accidents_only() {
        let p = parse_reports(LINE.as_bytes()).unwrap();
        let acc = p.records[0].clone();
        let mut jam = acc.clone();
        jam.kind = "JAM".into();
        assert_eq!(filter_accidents(vec![acc.clone(), jam, acc.clone()]).len(), 2);
        assert!(filter_accidents(vec![]).is_empty());
        assert_eq!(filter_accidents(vec![acc.clone(), acc.clone()]), vec![acc.clone(), acc]);
    }

    #[test]
    fn ground_truth_round_trip() {
        let text = "latitude,longitude,timestamp,unit_segment_id\n36.1,-86.7,1569888300000,S1\n";
        let p = parse_ground_truth(text.as_bytes()).unwrap();
        assert!(p.errors.is_empty());
        let r = &p.records[0];
        assert_eq!((r.location.lat, r.location.lon), (36.1, -86.7));
        assert_eq!(r.timestamp, 1_569_888_300_000);
        assert_eq!(r.unit_segment_id, "S1");

        let mut buf = Vec::new();
        write_ground_truth(&p.records, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), text);
    }

    #[test]
    fn ground_truth_header_must_match() {
        let text = "longitude,latitude,timestamp,unit_segment_id\n-86.7,36.1,1,S1\n";
        assert!(matches!(parse_ground_truth(text.as_bytes()), Err(IngestError::Format(_))));
    }

    #[test]
    fn ground_truth_header_only_is_empty() {
        let p = parse_ground_truth("latitude,longitude,timestamp,unit_segment_id\n".as_bytes()).unwrap();
        assert!(p.records.is_empty() && p.errors.is_empty());
    }

    #[test]
    fn ground_truth_bad_coordinate_is_per_line() {
        let text = "latitude,longitude,timestamp,unit_segment_id\n36.1,-86.7,5,S1\nabc,-86.7,6,S2\n36.2,-86.6,4,\"S,3\"\n";
        let p = parse_ground_truth(text.as_bytes()).unwrap();
        assert_eq!(p.records.len(), 2);
        assert_eq!(p.records[0].unit_segment_id, "S,3");
        assert_eq!(p.errors.len(), 1);
        assert_eq!(p.errors[0].line, 3);
    }
}
