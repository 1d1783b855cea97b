use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use incident_core::classify::ModelFile;
use tempfile::TempDir;

fn incident(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_incident")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// A three-day scenario plus priors from its history file.
struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new(seed: &str) -> Self {
        let dir = TempDir::new().unwrap();
        let cfg = dir.path().join("small.conf");
        fs::write(&cfg, "[synth]\ndays = 3\nhistory_days = 30\n").unwrap();
        let data = dir.path().join("data");
        let o = incident(&["synth", "--config", p(&cfg), "--seed", seed, "--out", p(&data)]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        let o = incident(&[
            "priors",
            "--truth",
            p(&data.join("history_ground_truth.csv")),
            "--out",
            p(&dir.path().join("p")),
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        Self { dir }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn reports(&self) -> PathBuf {
        self.path("data/reports.jsonl")
    }

    fn truth(&self) -> PathBuf {
        self.path("data/ground_truth.csv")
    }

    fn priors(&self) -> PathBuf {
        self.path("p/priors.csv")
    }

    fn detect(&self, extra: &[&str]) -> Output {
        let (r, pr) = (self.reports(), self.priors());
        let mut args = vec!["detect", "--reports", p(&r), "--priors", p(&pr)];
        args.extend_from_slice(extra);
        incident(&args)
    }

    fn data_args(&self) -> Vec<String> {
        ["--reports", p(&self.reports()), "--truth", p(&self.truth()), "--priors", p(&self.priors())]
            .iter()
            .map(|s| s.to_string())
            .collect()
    }
}

fn run_owned(args: Vec<String>) -> Output {
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    incident(&refs)
}

#[test]
fn synth_writes_files_and_repeats_bytes() {
    let dir = TempDir::new().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = incident(&["synth", "--seed", "4", "--history-days", "0", "--out", p(out)]);
        assert_eq!(code(&o), 0);
    }
    for f in ["reports.jsonl", "ground_truth.csv", "manifest.csv"] {
        let x = fs::read(a.join(f)).unwrap();
        assert!(!x.is_empty());
        assert_eq!(x, fs::read(b.join(f)).unwrap(), "{f}");
    }
    assert!(!a.join("history_ground_truth.csv").exists());
}

#[test]
fn synth_bad_config_exits_2() {
    let dir = TempDir::new().unwrap();
    let o = incident(&["synth", "--config", p(&dir.path().join("missing.conf")), "--out", p(dir.path())]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing.conf"));

    let cfg = dir.path().join("bad.conf");
    fs::write(&cfg, "[synth]\nspeed = 3\n").unwrap();
    assert_eq!(code(&incident(&["synth", "--config", p(&cfg), "--out", p(dir.path())])), 2);
}

#[test]
fn priors_sum_to_one_and_respect_floor() {
    let dir = TempDir::new().unwrap();
    let truth = dir.path().join("truth.csv");
    let mut text = String::from("latitude,longitude,timestamp,unit_segment_id\n");
    for i in 0..100 {
        let lat = 36.1627 + (i % 7) as f64 * 0.03;
        text += &format!("{lat},-86.7816,{},seg{i}\n", 1_569_888_000_000i64 + i * 1_234_567);
    }
    fs::write(&truth, text).unwrap();
    let o = incident(&["priors", "--truth", p(&truth), "--epsilon", "1e-6"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let out = String::from_utf8(o.stdout).unwrap();
    let mut lines = out.lines();
    assert_eq!(lines.next().unwrap(), "# total_count=100 epsilon=0.000001");
    assert_eq!(lines.next().unwrap(), "cell_res,cell_q,cell_r,hour,prior");
    let priors: Vec<f64> = lines.map(|l| l.rsplit(',').next().unwrap().parse().unwrap()).collect();
    assert!((priors.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    assert!(priors.iter().all(|&v| v >= 1e-6));

    assert_eq!(code(&incident(&["priors", "--truth", p(&dir.path().join("nope.csv"))])), 2);
    let empty = dir.path().join("empty.csv");
    fs::write(&empty, "latitude,longitude,timestamp,unit_segment_id\n").unwrap();
    assert_eq!(code(&incident(&["priors", "--truth", p(&empty)])), 2);
}

#[test]
fn ground_truth_header_is_what_priors_reads() {
    assert_eq!(incident_core::ingest::GROUND_TRUTH_HEADER.join(","), "latitude,longitude,timestamp,unit_segment_id");
}

#[test]
fn detect_streams_alerts_and_is_deterministic() {
    let fx = Fixture::new("2");
    let a = fx.detect(&[]);
    assert_eq!(code(&a), 0, "{}", String::from_utf8_lossy(&a.stderr));
    let text = String::from_utf8(a.stdout.clone()).unwrap();
    let alerts = text.lines().filter(|l| l.contains("\"alert\":true")).count();
    assert!(alerts >= 1);
    assert_eq!(fx.detect(&[]).stdout, a.stdout);

    let out = fx.path("det");
    let o = fx.detect(&["--out", p(&out), "--dump-clusters", "--dump-beliefs", "--truth", p(&fx.truth())]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read(out.join("decisions.jsonl")).unwrap(), a.stdout);
    let clusters = fs::read_to_string(out.join("clusters.csv")).unwrap();
    assert_eq!(clusters.lines().count(), text.lines().count() + 1);
    assert!(fs::read_to_string(out.join("beliefs.jsonl")).unwrap().lines().count() > clusters.lines().count());
    assert!(fs::read_to_string(out.join("lead_time.txt")).unwrap().contains("mean_lead_min="));
}

#[test]
fn detect_unreachable_threshold_only_expires() {
    let fx = Fixture::new("3");
    let o = fx.detect(&["--threshold", "1.01"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.lines().count() > 0);
    assert!(text.lines().all(|l| l.contains("\"alert\":false")));
}

#[test]
fn detect_empty_reports_and_bad_priors() {
    let fx = Fixture::new("5");
    let empty = fx.path("empty.jsonl");
    fs::write(&empty, "").unwrap();
    let o = incident(&["detect", "--reports", p(&empty), "--priors", p(&fx.priors())]);
    assert_eq!(code(&o), 0);
    assert!(o.stdout.is_empty());

    let bad = fx.path("bad_priors.csv");
    fs::write(&bad, "cell,hour\n1,2\n").unwrap();
    assert_eq!(code(&incident(&["detect", "--reports", p(&fx.reports()), "--priors", p(&bad)])), 2);
    // Priors estimated at another resolution do not fit the grid.
    assert_eq!(code(&fx.detect(&["--res", "7"])), 2);
    assert_eq!(code(&fx.detect(&["--grouping", "kmeans"])), 2);
}

#[test]
fn train_selects_scheme_features_and_round_trips() {
    let fx = Fixture::new("6");
    let mut args = vec!["train".to_string(), "--scheme".into(), "M6".into(), "--out".into(), p(&fx.path("m6")).into()];
    args.extend(fx.data_args());
    args.extend(["--dump-features".into()]);
    let o = run_owned(args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8(o.stdout).unwrap().starts_with("scheme=M6 "));
    let bytes = fs::read(fx.path("m6/model.txt")).unwrap();
    let text = String::from_utf8(bytes.clone()).unwrap();
    assert!(text.starts_with("model=logistic"));
    assert!(text.contains("features=plausibility_seg\n"));
    let model = ModelFile::read(&bytes[..]).unwrap();
    let mut again = Vec::new();
    model.write(&mut again).unwrap();
    assert_eq!(again, bytes);

    let features = fx.path("m6/features.csv");
    let o = incident(&["train", "--scheme", "M1", "--features", p(&features), "--out", p(&fx.path("m1"))]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(fx.path("m1/model.txt")).unwrap();
    assert!(text.starts_with("model=forest"));
    assert!(text.contains("features=avg_reliability,report_count\n"));
}

#[test]
fn train_single_class_exits_3() {
    let dir = TempDir::new().unwrap();
    let f = dir.path().join("f.csv");
    let mut text = String::from(incident_core::classify::FEATURE_CSV_HEADER);
    text.push('\n');
    for i in 0..10 {
        text += &format!("{i},{},6,0,0,5,1,0.1,0.1,0\n", i * 60_000);
    }
    fs::write(&f, text).unwrap();
    let o = incident(&["train", "--scheme", "M2", "--features", p(&f)]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
    let o = incident(&["evaluate", "--scheme", "M2", "--features", p(&f)]);
    assert_eq!(code(&o), 3);
    let o = incident(&["train", "--scheme", "M11", "--features", p(&f)]);
    assert_eq!(code(&o), 2);
}

#[test]
fn evaluate_folds_schemes_and_determinism() {
    let fx = Fixture::new("7");
    let mut args = vec!["evaluate".to_string(), "--scheme".into(), "M6".into(), "--out".into(), p(&fx.path("e")).into()];
    args.extend(fx.data_args());
    args.push("--dump-features".into());
    let o = run_owned(args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let metrics = fs::read_to_string(fx.path("e/metrics.csv")).unwrap();
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(lines[0], "scheme,fold,precision,recall,f1,auc");
    assert_eq!(lines.len(), 1 + 5 + 1);
    assert!(lines[6].starts_with("M6,mean,"));
    assert_eq!(String::from_utf8(o.stdout).unwrap().trim(), lines[6]);

    let features = fx.path("e/features.csv");
    let all = |seed: &str| incident(&["evaluate", "--scheme", "all", "--seed", seed, "--features", p(&features)]);
    let a = all("9");
    assert_eq!(code(&a), 0, "{}", String::from_utf8_lossy(&a.stderr));
    let text = String::from_utf8(a.stdout.clone()).unwrap();
    for n in 1..=10 {
        assert!(text.contains(&format!("\nM{n},mean,")), "M{n}");
    }
    assert_eq!(all("9").stdout, a.stdout);
    let o = incident(&["evaluate", "--scheme", "M2", "--k", "3", "--features", p(&features)]);
    assert_eq!(String::from_utf8(o.stdout).unwrap().lines().count(), 1 + 3 + 1);
}

#[test]
fn sweep_rows_match_grid() {
    let fx = Fixture::new("8");
    let grid = fx.path("grid.txt");
    fs::write(&grid, "t_prime_min = 15, 25\nt_s_min = 1\ndelta_m = 100\nres = 6, 7\n").unwrap();
    let (r, t, h) = (fx.reports(), fx.truth(), fx.path("data/history_ground_truth.csv"));
    let base = ["sweep", "--reports", p(&r), "--truth", p(&t), "--history", p(&h), "--scheme", "M2"];
    let mut args = base.to_vec();
    args.extend(["--grid", p(&grid)]);
    let o = incident(&args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = String::from_utf8(o.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "T_prime_min,t_s_min,delta_m,res,precision,recall,f1,auc");
    assert_eq!(lines.len(), 1 + 4);

    fs::write(&grid, "t_prime_min = 15\nt_s_min = one\n").unwrap();
    assert_eq!(code(&incident(&args)), 2);
}

#[test]
fn help_lists_flags_with_defaults() {
    for sub in ["synth", "priors", "detect", "train", "evaluate", "sweep"] {
        let o = incident(&[sub, "--help"]);
        assert_eq!(code(&o), 0);
        let h = String::from_utf8(o.stdout).unwrap();
        for flag in ["--config", "--seed", "--out", "--t-prime-min", "--t-step-min", "--delta-m", "--res", "--scheme",
            "--eps", "--min-pts", "--threshold", "--utc-offset"]
        {
            assert!(h.contains(flag), "{sub} {flag}");
        }
        for default in ["[default: 25]", "[default: 1]", "[default: 100]", "[default: 6]", "[default: M6]"] {
            assert!(h.contains(default), "{sub} {default}");
        }
    }
    assert_eq!(code(&incident(&["frobnicate"])), 2);
}
