//! Flat `key = value` config files with `[section]` headers.
//!
//! Keys are addressed as `section.key`. Command-line flags take precedence
//! over file values, which take precedence over built-in defaults.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};

pub const KNOWN_KEYS: &[&str] = &[
    "run.seed",
    "run.out",
    "grid.origin_lat",
    "grid.origin_lon",
    "grid.res",
    "grid.utc_offset",
    "fusion.t_prime_min",
    "fusion.t_step_min",
    "fusion.delta_m",
    "fusion.threshold",
    "grouping.strategy",
    "grouping.eps",
    "grouping.min_pts",
    "priors.epsilon",
    "classify.scheme",
    "classify.trees",
    "classify.depth",
    "classify.k",
    "synth.days",
    "synth.rings",
    "synth.incidents",
    "synth.reports_per_incident",
    "synth.false_reports",
    "synth.lead_min",
    "synth.delay_min",
    "synth.sigma_m",
    "synth.history_days",
];

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConfigFile {
    values: BTreeMap<String, String>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut values = BTreeMap::new();
        let mut section = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("line {}: expected `key = value`, got {raw:?}", i + 1))?;
            let key = if section.is_empty() { k.trim().to_string() } else { format!("{section}.{}", k.trim()) };
            if !KNOWN_KEYS.contains(&key.as_str()) {
                bail!("line {}: unknown key `{key}`", i + 1);
            }
            values.insert(key, v.trim().to_string());
        }
        Ok(Self { values })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in config {}", path.display()))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        self.values
            .get(key)
            .map(|v| v.parse::<T>().map_err(|e| anyhow!("config key `{key}` = {v:?}: {e}")))
            .transpose()
    }

    /// Flag value if given, else the file value, else `default`.
    pub fn pick<T: FromStr>(&self, flag: Option<T>, key: &str, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        match flag {
            Some(v) => Ok(v),
            None => Ok(self.get(key)?.unwrap_or(default)),
        }
    }
}

/// Sweep grids use the same syntax: one comma-separated list per dimension.
pub fn parse_sweep_grid(text: &str) -> Result<incident_core::eval::SweepGrid> {
    fn list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>>
    where
        T::Err: std::fmt::Display,
    {
        v.split(',')
            .map(|s| s.trim().parse::<T>().map_err(|e| anyhow!("`{key}` value {s:?}: {e}")))
            .collect()
    }
    let mut grid = incident_core::eval::SweepGrid { t_prime_min: vec![], t_s_min: vec![], delta_m: vec![], res: vec![] };
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() || line.starts_with('[') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| anyhow!("line {}: expected `key = v1,v2,...`", i + 1))?;
        match k.trim() {
            "t_prime_min" => grid.t_prime_min = list(k, v)?,
            "t_s_min" => grid.t_s_min = list(k, v)?,
            "delta_m" => grid.delta_m = list(k, v)?,
            "res" => grid.res = list(k, v)?,
            other => bail!("line {}: unknown sweep dimension `{other}`", i + 1),
        }
    }
    grid.validate()?;
    Ok(grid)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sections_and_comments() {
        let c = ConfigFile::parse("# top\n[fusion]\nt_prime_min = 30 # half hour\n\n[grid]\nres=7\n").unwrap();
        assert_eq!(c.get::<i64>("fusion.t_prime_min").unwrap(), Some(30));
        assert_eq!(c.get::<u8>("grid.res").unwrap(), Some(7));
        assert_eq!(c.get::<f64>("fusion.delta_m").unwrap(), None);
    }

    #[test]
    fn flags_override_file() {
        let c = ConfigFile::parse("[fusion]\ndelta_m = 50\n").unwrap();
        assert_eq!(c.pick(Some(80.0), "fusion.delta_m", 100.0).unwrap(), 80.0);
        assert_eq!(c.pick(None, "fusion.delta_m", 100.0).unwrap(), 50.0);
        assert_eq!(c.pick(None, "fusion.threshold", 0.5).unwrap(), 0.5);
    }

    #[test]
    fn rejects_unknown_and_malformed() {
        assert!(ConfigFile::parse("[fusion]\ndelta = 5\n").is_err());
        assert!(ConfigFile::parse("[fusion]\ndelta_m\n").is_err());
        let c = ConfigFile::parse("[grid]\nres = six\n").unwrap();
        assert!(c.get::<u8>("grid.res").is_err());
    }

    #[test]
    fn sweep_grid_file() {
        let g = parse_sweep_grid("t_prime_min = 15, 25\nt_s_min = 1\ndelta_m = 50,100,200\nres = 6\n").unwrap();
        assert_eq!(g.combinations().len(), 6);
        assert!(parse_sweep_grid("t_prime_min = 15\n").is_err());
        assert!(parse_sweep_grid("t_prime_min = x\nt_s_min=1\ndelta_m=1\nres=6").is_err());
        assert!(parse_sweep_grid("speed = 1").is_err());
    }
}
