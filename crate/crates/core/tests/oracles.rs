use std::collections::BTreeMap;

use incident_core::classify::logistic::fit_logistic;
use incident_core::fusion::{detect_posterior, joint_posterior, localize_posterior};
use incident_core::grouping::{standardize_reports, sweep_eps, EPS_CANDIDATES, DEFAULT_MIN_PTS};
use incident_core::priors::local_hour;
use incident_core::synth::{default_benchmark, generate, HOUR_PROFILE};

const HOUR_MS: i64 = 3_600_000;

/// Weighted logistic loss for a 1-D model with slope `w` and boundary `c`.
fn loss_1d(x: &[f64], y: &[bool], w: f64, c: f64) -> f64 {
    x.iter()
        .zip(y)
        .map(|(&xi, &yi)| {
            let z = w * (xi - c);
            let m = if yi { -z } else { z };
            m.max(0.0) + (-m.abs()).exp().ln_1p()
        })
        .sum()
}

/// Ternary search over the boundary, which is convex for a fixed slope.
fn best_boundary(x: &[f64], y: &[bool], w: f64) -> f64 {
    let (mut lo, mut hi) = (-10.0, 10.0);
    for _ in 0..200 {
        let a = lo + (hi - lo) / 3.0;
        let b = hi - (hi - lo) / 3.0;
        if loss_1d(x, y, w, a) < loss_1d(x, y, w, b) {
            hi = b;
        } else {
            lo = a;
        }
    }
    (lo + hi) / 2.0
}

#[test]
fn four_point_boundary_matches_convex_oracle() {
    let x = [0.0, 1.0, 2.0, 3.0];
    let y = [false, false, true, true];
    let rows: Vec<Vec<f64>> = x.iter().map(|&v| vec![v]).collect();
    let m = fit_logistic(&rows, &y).unwrap();
    let boundary = -m.intercept / m.weights[0];
    assert!(m.weights[0] > 0.0);
    assert!(boundary > 1.0 && boundary < 2.0, "boundary {boundary}");
    for w in [0.5, 2.0, 10.0, 25.0] {
        let c = best_boundary(&x, &y, w);
        assert!((c - boundary).abs() < 1e-6, "slope {w}: oracle {c} vs fitted {boundary}");
    }
}

#[test]
fn five_hypothesis_example_differs_from_factored_posterior() {
    // The worked example normalizes over four regions plus "no incident".
    let numerators = [0.00054, 0.00024, 0.00056, 0.00087];
    let none = 0.02 * 0.9;
    let z: f64 = numerators.iter().sum::<f64>() + none;
    assert!((z - 0.02021).abs() < 1e-12);
    let joint_r1 = numerators[0] / z;
    assert!((joint_r1 - 0.0267).abs() < 1e-4);

    // The factored posterior on the example's actual inputs.
    let p = detect_posterior(&[0.8, 0.9], 0.1);
    let dist = localize_posterior(&[vec![0.3, 0.2, 0.1, 0.4], vec![0.25, 0.15, 0.45, 0.15]], &[0.01, 0.02, 0.03, 0.04])
        .unwrap();
    let factored = joint_posterior(p, &dist);
    assert!((factored[0] - 0.8 * 0.75 / 5.1).abs() < 1e-12);
    assert!((factored[0] - joint_r1).abs() > 0.05);
}

#[test]
fn eps_sweep_on_first_day_is_stable() {
    let cfg = default_benchmark(1);
    let s = generate(&cfg).unwrap();
    let grid = cfg.grid().unwrap();
    let day: Vec<_> = s.reports.iter().filter(|r| r.pub_millis < cfg.start_ms + 24 * HOUR_MS).cloned().collect();
    assert!(day.len() > 100);
    let feats = standardize_reports(&day, &grid).unwrap();
    let a = sweep_eps(&feats, &EPS_CANDIDATES, DEFAULT_MIN_PTS).unwrap();
    let b = sweep_eps(&feats, &EPS_CANDIDATES, DEFAULT_MIN_PTS).unwrap();
    assert_eq!(a, b);
    assert!(EPS_CANDIDATES.contains(&a.best_eps));
    println!("first-day eps sweep: best {} scores {:?}", a.best_eps, a.scores);
}

#[test]
fn benchmark_counts_stay_near_targets() {
    for seed in 1..=10 {
        let s = generate(&default_benchmark(seed)).unwrap();
        let (n, k) = (s.reports.len() as f64, s.incidents.len() as f64);
        assert!((n / 3300.0 - 1.0).abs() <= 0.10, "seed {seed}: {n} reports");
        assert!((k / 290.0 - 1.0).abs() <= 0.15, "seed {seed}: {k} incidents");
        let truth: std::collections::BTreeSet<&str> = s.truth.iter().map(|r| r.unit_segment_id.as_str()).collect();
        assert!(s.manifest.iter().filter_map(|(_, i)| i.as_deref()).all(|i| truth.contains(i)));
    }
}

#[test]
fn reports_lead_records_by_configured_mean() {
    let cfg = default_benchmark(5);
    let s = generate(&cfg).unwrap();
    let recorded: BTreeMap<&str, i64> = s.incidents.iter().map(|i| (i.id.as_str(), i.recorded_ms)).collect();
    let published: BTreeMap<&str, i64> = s.reports.iter().map(|r| (r.id.as_str(), r.pub_millis)).collect();
    let leads: Vec<f64> = s
        .manifest
        .iter()
        .filter_map(|(rid, inc)| Some((recorded[inc.as_deref()?] - published[rid.as_str()]) as f64))
        .collect();
    assert!(leads.len() >= 1000);
    let mean = leads.iter().sum::<f64>() / leads.len() as f64;
    let target = cfg.report_lead_mean_ms;
    assert!((mean / target - 1.0).abs() <= 0.10, "mean lead {mean} ms vs {target} ms");
}

#[test]
fn incident_rates_converge_over_long_runs() {
    let mut cfg = default_benchmark(9);
    cfg.duration_ms *= 100;
    cfg.reports_per_incident_mean = 0.0;
    cfg.false_report_rate = 0.0;
    let s = generate(&cfg).unwrap();
    let days = (cfg.duration_ms / (24 * HOUR_MS)) as f64;
    let cells = cfg.extent.len() as f64;
    let total_mean = cfg.incident_rate * cells * 24.0 * days;
    let n = s.incidents.len() as f64;
    assert!((n - total_mean).abs() <= 3.0 * total_mean.sqrt(), "{n} vs {total_mean}");

    let mut by_hour = [0f64; 24];
    for i in &s.incidents {
        by_hour[local_hour(i.occurred_ms, cfg.utc_offset_hours) as usize] += 1.0;
    }
    for (h, &count) in by_hour.iter().enumerate() {
        let mean = cfg.incident_rate * cells * days * HOUR_PROFILE[h];
        assert!((count - mean).abs() <= 3.0 * mean.sqrt(), "hour {h}: {count} vs {mean}");
    }
}
