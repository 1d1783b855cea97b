mod config;

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use incident_core::classify::{
    build_feature_rows, fit_scheme, learn_threshold, read_feature_rows, write_feature_rows, ClassifyError,
    FeatureConfig, FeatureRow, ForestParams, ModelFile, Scheme,
};
use incident_core::eval::{self, kfold_cv, lead_time, EvalError, SweepData};
use incident_core::fusion::FusionConfig;
use incident_core::geo::{GeoPoint, GridConfig};
use incident_core::ingest::{self, GroundTruthRecord, Report};
use incident_core::pipeline::{Detector, DetectorConfig, GroupingStrategy};
use incident_core::priors::{PriorTable, DEFAULT_EPSILON_FLOOR};
use incident_core::synth;

use config::ConfigFile;

const MINUTE_MS: i64 = 60_000;
const HISTORY_FILE: &str = "history_ground_truth.csv";

#[derive(Parser, Debug)]
#[command(name = "incident", version, about = "Detect traffic incidents from crowdsourced reports")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic scenario (reports, ground truth, manifest, history)
    Synth {
        #[command(flatten)]
        common: Common,
        /// Days of earlier ground truth to write for prior estimation, 0 to skip [default: 30]
        #[arg(long)]
        history_days: Option<i64>,
    },
    /// Estimate per-cell, per-hour priors from ground-truth records
    Priors {
        #[command(flatten)]
        common: Common,
        /// Ground-truth CSV
        #[arg(long)]
        truth: PathBuf,
    },
    /// Run online detection and stream decisions as JSON lines
    Detect {
        #[command(flatten)]
        common: Common,
        /// Reports, one JSON object per line
        #[arg(long)]
        reports: PathBuf,
        /// Priors CSV written by `priors`
        #[arg(long)]
        priors: PathBuf,
        /// segmentation or dbscan [default: from --scheme, else segmentation]
        #[arg(long)]
        grouping: Option<String>,
        /// Ground truth for a lead-time report
        #[arg(long)]
        truth: Option<PathBuf>,
        /// Write clusters.csv under --out
        #[arg(long)]
        dump_clusters: bool,
        /// Write per-step beliefs to beliefs.jsonl under --out
        #[arg(long)]
        dump_beliefs: bool,
    },
    /// Fit a classifier for one scheme and store it with its threshold
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
    },
    /// k-fold cross-validation of one scheme, or `--scheme all`
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        /// Number of folds [default: 5]
        #[arg(long)]
        k: Option<usize>,
    },
    /// Cross-validate a scheme over a grid of T', t_s, delta and resolution
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Grid file: `t_prime_min = 15,25` style lines for t_prime_min, t_s_min, delta_m, res
        #[arg(long)]
        grid: PathBuf,
        /// Reports, one JSON object per line
        #[arg(long)]
        reports: PathBuf,
        /// Ground-truth CSV for labels
        #[arg(long)]
        truth: PathBuf,
        /// Earlier ground truth used for priors at each resolution
        #[arg(long)]
        history: PathBuf,
        /// Number of folds [default: 5]
        #[arg(long)]
        k: Option<usize>,
    },
}

#[derive(Args, Debug, Clone, Default)]
struct Common {
    /// Config file with `[section]` headers and `key = value` lines
    #[arg(long)]
    config: Option<PathBuf>,
    /// RNG seed [default: 1]
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory [default: standard output]
    #[arg(long)]
    out: Option<PathBuf>,
    /// Incident time period T' in minutes [default: 25]
    #[arg(long)]
    t_prime_min: Option<i64>,
    /// Time step t_s in minutes [default: 1]
    #[arg(long)]
    t_step_min: Option<i64>,
    /// Report-area radius delta in meters [default: 100]
    #[arg(long)]
    delta_m: Option<f64>,
    /// Grid resolution [default: 6]
    #[arg(long)]
    res: Option<u8>,
    /// Classification scheme M1..M10 [default: M6]
    #[arg(long)]
    scheme: Option<String>,
    /// DBSCAN radius in standardized units [default: 0.8]
    #[arg(long)]
    eps: Option<f64>,
    /// DBSCAN core-point size [default: 2]
    #[arg(long)]
    min_pts: Option<usize>,
    /// Alert threshold on the detection posterior [default: 0.5]
    #[arg(long)]
    threshold: Option<f64>,
    /// Fixed offset from UTC for hour-of-day priors [default: 0]
    #[arg(long, allow_negative_numbers = true)]
    utc_offset: Option<i32>,
    /// Grid origin latitude [default: 36.1627]
    #[arg(long, allow_negative_numbers = true)]
    origin_lat: Option<f64>,
    /// Grid origin longitude [default: -86.7816]
    #[arg(long, allow_negative_numbers = true)]
    origin_lon: Option<f64>,
    /// Floor on served priors [default: 1e-6]
    #[arg(long)]
    epsilon: Option<f64>,
}

#[derive(Args, Debug, Clone, Default)]
struct DataArgs {
    /// Feature CSV; replaces --reports/--truth/--priors
    #[arg(long)]
    features: Option<PathBuf>,
    /// Reports, one JSON object per line
    #[arg(long)]
    reports: Option<PathBuf>,
    /// Ground-truth CSV for labels
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Priors CSV written by `priors`
    #[arg(long)]
    priors: Option<PathBuf>,
    /// Also write the feature rows to features.csv under --out
    #[arg(long)]
    dump_features: bool,
}

/// Resolved settings: flags, then config file, then defaults.
struct Settings {
    seed: u64,
    out: Option<PathBuf>,
    origin: GeoPoint,
    utc_offset: i32,
    fusion: FusionConfig,
    eps: f64,
    min_pts: usize,
    epsilon: f64,
    scheme: Option<String>,
    forest: ForestParams,
    k: usize,
    file: ConfigFile,
}

impl Settings {
    fn resolve(c: &Common) -> Result<Self> {
        let file = match &c.config {
            Some(p) => ConfigFile::load(p)?,
            None => ConfigFile::default(),
        };
        let base = synth::default_benchmark(1).origin;
        let origin = GeoPoint::new(
            file.pick(c.origin_lat, "grid.origin_lat", base.lat)?,
            file.pick(c.origin_lon, "grid.origin_lon", base.lon)?,
        )?;
        let fusion = FusionConfig {
            delta_m: file.pick(c.delta_m, "fusion.delta_m", 100.0)?,
            t_prime_ms: file.pick(c.t_prime_min, "fusion.t_prime_min", 25)? * MINUTE_MS,
            t_s_ms: file.pick(c.t_step_min, "fusion.t_step_min", 1)? * MINUTE_MS,
            resolution: file.pick(c.res, "grid.res", 6)?,
            alert_threshold: file.pick(c.threshold, "fusion.threshold", 0.5)?,
        };
        let seed = file.pick(c.seed, "run.seed", 1)?;
        Ok(Self {
            seed,
            out: c.out.clone().or(file.get::<PathBuf>("run.out")?),
            origin,
            utc_offset: file.pick(c.utc_offset, "grid.utc_offset", 0)?,
            fusion,
            eps: file.pick(c.eps, "grouping.eps", incident_core::grouping::DEFAULT_EPS)?,
            min_pts: file.pick(c.min_pts, "grouping.min_pts", incident_core::grouping::DEFAULT_MIN_PTS)?,
            epsilon: file.pick(c.epsilon, "priors.epsilon", DEFAULT_EPSILON_FLOOR)?,
            scheme: c.scheme.clone().or(file.get("classify.scheme")?),
            forest: ForestParams {
                n_trees: file.get("classify.trees")?.unwrap_or(ForestParams::default().n_trees),
                max_depth: file.get("classify.depth")?.unwrap_or(ForestParams::default().max_depth),
                seed,
            },
            k: file.get("classify.k")?.unwrap_or(5),
            file,
        })
    }

    fn grid(&self) -> Result<GridConfig> {
        Ok(GridConfig::new(self.origin, self.fusion.resolution)?)
    }

    fn scheme(&self) -> Result<Scheme> {
        Ok(self.scheme.as_deref().unwrap_or("M6").parse()?)
    }

    fn features(&self) -> FeatureConfig {
        FeatureConfig { fusion: self.fusion, utc_offset_hours: self.utc_offset, eps: self.eps, min_pts: self.min_pts }
    }

    /// A file under `--out`, or standard output.
    fn sink(&self, name: &str) -> Result<Box<dyn Write>> {
        match &self.out {
            Some(dir) => Ok(Box::new(create_in(dir, name)?)),
            None => Ok(Box::new(BufWriter::new(io::stdout().lock()))),
        }
    }

    fn require_out(&self, what: &str) -> Result<&Path> {
        self.out.as_deref().ok_or_else(|| anyhow!("{what} needs --out"))
    }
}

fn create_in(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(name);
    Ok(BufWriter::new(File::create(&path).with_context(|| format!("creating {}", path.display()))?))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?))
}

fn load_reports(path: &Path) -> Result<Vec<Report>> {
    let parsed = ingest::parse_reports(open(path)?).with_context(|| format!("reading {}", path.display()))?;
    for e in &parsed.errors {
        eprintln!("warning: {}: skipped {e}", path.display());
    }
    let mut reports = ingest::filter_accidents(parsed.records);
    reports.sort_by_key(|r| r.pub_millis);
    Ok(reports)
}

fn load_truth(path: &Path) -> Result<Vec<GroundTruthRecord>> {
    let parsed = ingest::parse_ground_truth(open(path)?).with_context(|| format!("reading {}", path.display()))?;
    for e in &parsed.errors {
        eprintln!("warning: {}: skipped {e}", path.display());
    }
    Ok(parsed.records)
}

fn load_priors(path: &Path) -> Result<PriorTable> {
    PriorTable::read_csv(open(path)?).with_context(|| format!("reading {}", path.display()))
}

fn cmd_synth(s: &Settings, history_days: Option<i64>) -> Result<()> {
    let dir = s.require_out("synth")?;
    let f = &s.file;
    let mut cfg = synth::default_benchmark(s.seed);
    let days: i64 = f.get("synth.days")?.unwrap_or(14);
    let rings: i32 = f.get("synth.rings")?.unwrap_or(8);
    cfg.resolution = s.fusion.resolution;
    cfg.origin = s.origin;
    cfg.utc_offset_hours = s.utc_offset;
    cfg.extent = synth::hex_extent(cfg.resolution, rings);
    cfg.duration_ms = days * 24 * 60 * MINUTE_MS;
    let cell_hours = (cfg.extent.len() as i64 * days * 24) as f64;
    if cell_hours <= 0.0 {
        bail!("synth extent and duration must be positive");
    }
    cfg.incident_rate = f.get::<f64>("synth.incidents")?.unwrap_or(290.0 * days as f64 / 14.0) / cell_hours;
    cfg.false_report_rate = f.get::<f64>("synth.false_reports")?.unwrap_or(1560.0 * days as f64 / 14.0) / cell_hours;
    if let Some(v) = f.get("synth.reports_per_incident")? {
        cfg.reports_per_incident_mean = v;
    }
    if let Some(v) = f.get::<f64>("synth.lead_min")? {
        cfg.report_lead_mean_ms = v * MINUTE_MS as f64;
    }
    if let Some(v) = f.get::<i64>("synth.delay_min")? {
        cfg.recording_delay_ms = v * MINUTE_MS;
    }
    if let Some(v) = f.get("synth.sigma_m")? {
        cfg.report_location_sigma_m = v;
    }
    let scenario = synth::generate(&cfg)?;
    scenario.write_to(dir)?;

    let history_days = match history_days {
        Some(d) => d,
        None => f.get("synth.history_days")?.unwrap_or(30),
    };
    if history_days > 0 {
        let mut h = cfg.clone();
        h.seed = synth::default_history(s.seed).seed;
        h.duration_ms = history_days * 24 * 60 * MINUTE_MS;
        h.start_ms = cfg.start_ms - h.duration_ms;
        let history = synth::generate(&h)?;
        let mut w = create_in(dir, HISTORY_FILE)?;
        ingest::write_ground_truth(&history.truth, &mut w)?;
        w.flush()?;
    }
    eprintln!(
        "wrote {} reports, {} incidents to {}",
        scenario.reports.len(),
        scenario.incidents.len(),
        dir.display()
    );
    Ok(())
}

fn cmd_priors(s: &Settings, truth: &Path) -> Result<()> {
    let records = load_truth(truth)?;
    let table = PriorTable::estimate(&records, &s.grid()?, s.utc_offset, s.epsilon)?;
    let mut w = s.sink("priors.csv")?;
    table.write_csv(&mut w)?;
    w.flush()?;
    Ok(())
}

fn strategy(s: &Settings, grouping: Option<&str>) -> Result<GroupingStrategy> {
    let name = match grouping {
        Some(g) => g.to_string(),
        None => match &s.scheme {
            Some(sc) => sc.parse::<Scheme>()?.grouping().unwrap_or("segmentation").to_string(),
            None => "segmentation".to_string(),
        },
    };
    match name.as_str() {
        "segmentation" => Ok(GroupingStrategy::Segmentation),
        "dbscan" => Ok(GroupingStrategy::Dbscan { eps: s.eps, min_pts: s.min_pts }),
        other => bail!("unknown grouping `{other}`, expected segmentation or dbscan"),
    }
}

struct DetectOpts<'a> {
    reports: &'a Path,
    priors: &'a Path,
    grouping: Option<&'a str>,
    truth: Option<&'a Path>,
    dump_clusters: bool,
    dump_beliefs: bool,
}

fn cmd_detect(s: &Settings, o: DetectOpts) -> Result<()> {
    let reports = load_reports(o.reports)?;
    let priors = load_priors(o.priors)?;
    let grid = s.grid()?;
    let cfg = DetectorConfig {
        fusion: s.fusion,
        strategy: strategy(s, o.grouping)?,
        utc_offset_hours: s.utc_offset,
    };
    let detector = Detector::new(grid, cfg, &priors)?;

    let mut beliefs = match o.dump_beliefs {
        true => Some(create_in(s.require_out("--dump-beliefs")?, "beliefs.jsonl")?),
        false => None,
    };
    let mut io_err: Option<io::Error> = None;
    let run = detector.run_observed(&reports, |view| {
        let (Some(w), None) = (beliefs.as_mut(), io_err.as_ref()) else { return };
        for c in view.clusters.iter().filter(|c| c.is_live()) {
            let line = serde_json::json!({
                "step": view.index,
                "step_start_ms": view.start_ms,
                "status": c.cluster.status,
                "belief": c.belief,
            });
            if let Err(e) = writeln!(w, "{line}") {
                io_err = Some(e);
                return;
            }
        }
    })?;
    if let Some(e) = io_err {
        return Err(e.into());
    }
    if let Some(mut w) = beliefs {
        w.flush()?;
    }

    let mut w = s.sink("decisions.jsonl")?;
    for d in &run.decisions {
        writeln!(w, "{}", serde_json::to_string(d)?)?;
    }
    w.flush()?;

    if o.dump_clusters {
        let mut w = create_in(s.require_out("--dump-clusters")?, "clusters.csv")?;
        writeln!(w, "cluster_id,born_ms,size,status,p_incident,argmax_region,covered_regions")?;
        for c in &run.clusters {
            let argmax = c.belief.argmax_region().map(|(r, _)| r.to_string()).unwrap_or_default();
            let covered: Vec<String> = c.cluster.covered_regions.iter().map(|r| r.to_string()).collect();
            let status = serde_json::to_value(c.cluster.status)?;
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                c.cluster.id,
                c.cluster.born_ms,
                c.cluster.members.len(),
                status.as_str().unwrap_or_default(),
                c.belief.p_incident,
                argmax,
                covered.join(";")
            )?;
        }
        w.flush()?;
    }

    if let Some(truth) = o.truth {
        let truth = load_truth(truth)?;
        let report = lead_time(&run.decisions, &truth, &grid, s.fusion.t_prime_ms);
        match &s.out {
            Some(dir) => {
                let mut w = create_in(dir, "lead_time.txt")?;
                report.write(&mut w)?;
                w.flush()?;
            }
            None => report.write(io::stderr().lock())?,
        }
    }
    eprintln!(
        "reports={} clusters={} decisions={} alerts={}",
        reports.len(),
        run.clusters.len(),
        run.decisions.len(),
        run.alerts().count()
    );
    Ok(())
}

fn load_rows(s: &Settings, d: &DataArgs) -> Result<Vec<FeatureRow>> {
    let rows = match (&d.features, &d.reports, &d.truth, &d.priors) {
        (Some(f), None, None, None) => read_feature_rows(open(f)?).with_context(|| format!("reading {}", f.display()))?,
        (None, Some(r), Some(t), Some(p)) => {
            let reports = load_reports(r)?;
            let truth = load_truth(t)?;
            let priors = load_priors(p)?;
            build_feature_rows(&reports, &truth, &s.grid()?, &priors, &s.features())?
        }
        _ => bail!("give either --features, or all of --reports, --truth and --priors"),
    };
    if d.dump_features {
        let mut w = create_in(s.require_out("--dump-features")?, "features.csv")?;
        write_feature_rows(&rows, &mut w)?;
        w.flush()?;
    }
    Ok(rows)
}

fn cmd_train(s: &Settings, d: &DataArgs) -> Result<()> {
    let rows = load_rows(s, d)?;
    let scheme = s.scheme()?;
    let model = fit_scheme(&rows, scheme, s.forest)?;
    let feats = scheme.features();
    let probs: Vec<f64> = rows.iter().map(|r| model.predict_proba(&r.select(feats))).collect();
    let labels: Vec<bool> = rows.iter().map(|r| r.label).collect();
    let (threshold, f1) = learn_threshold(&probs, &labels)?;
    let file = ModelFile { features: feats.to_vec(), threshold: Some(threshold), model };
    let mut w = s.sink("model.txt")?;
    file.write(&mut w)?;
    w.flush()?;
    let summary = format!("scheme={scheme} rows={} threshold={threshold} train_f1={f1}", rows.len());
    match s.out {
        Some(_) => println!("{summary}"),
        None => eprintln!("{summary}"),
    }
    Ok(())
}

fn cmd_evaluate(s: &Settings, d: &DataArgs, k: usize) -> Result<()> {
    let schemes: Vec<Scheme> = match s.scheme.as_deref() {
        Some("all") => Scheme::ALL.to_vec(),
        _ => vec![s.scheme()?],
    };
    let rows = load_rows(s, d)?;
    let mut w = s.sink("metrics.csv")?;
    for (i, &scheme) in schemes.iter().enumerate() {
        let report = kfold_cv(&rows, scheme, k, s.seed, s.forest)?;
        report.write_csv(&mut w, i == 0)?;
        if s.out.is_some() {
            let m = report.mean;
            println!("{scheme},mean,{},{},{},{}", m.precision, m.recall, m.f1, m.auc);
        }
    }
    w.flush()?;
    Ok(())
}

fn cmd_sweep(s: &Settings, grid: &Path, reports: &Path, truth: &Path, history: &Path, k: usize) -> Result<()> {
    let text = std::fs::read_to_string(grid).with_context(|| format!("reading {}", grid.display()))?;
    let sweep_grid = config::parse_sweep_grid(&text).with_context(|| format!("in sweep grid {}", grid.display()))?;
    let reports = load_reports(reports)?;
    let truth = load_truth(truth)?;
    let history = load_truth(history)?;
    let data = SweepData {
        reports: &reports,
        truth: &truth,
        history: &history,
        origin: s.origin,
        utc_offset_hours: s.utc_offset,
        eps: s.eps,
        min_pts: s.min_pts,
    };
    let rows = eval::sweep(&sweep_grid, &data, s.scheme()?, k, s.seed, s.forest)?;
    for r in &rows {
        if let Err(e) = &r.result {
            eprintln!(
                "warning: T'={} t_s={} delta={} res={} failed: {e}",
                r.t_prime_min, r.t_s_min, r.delta_m, r.res
            );
        }
    }
    let mut w = s.sink("sweep.csv")?;
    eval::write_sweep_csv(&rows, &mut w)?;
    w.flush()?;
    if let Some(b) = eval::best_sweep_row(&rows).map(|i| &rows[i]) {
        eprintln!("best: T'={} t_s={} delta={} res={}", b.t_prime_min, b.t_s_min, b.delta_m, b.res);
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { common, history_days } => cmd_synth(&Settings::resolve(&common)?, history_days),
        Command::Priors { common, truth } => cmd_priors(&Settings::resolve(&common)?, &truth),
        Command::Detect { common, reports, priors, grouping, truth, dump_clusters, dump_beliefs } => cmd_detect(
            &Settings::resolve(&common)?,
            DetectOpts {
                reports: &reports,
                priors: &priors,
                grouping: grouping.as_deref(),
                truth: truth.as_deref(),
                dump_clusters,
                dump_beliefs,
            },
        ),
        Command::Train { common, data } => cmd_train(&Settings::resolve(&common)?, &data),
        Command::Evaluate { common, data, k } => {
            let s = Settings::resolve(&common)?;
            let k = k.unwrap_or(s.k);
            cmd_evaluate(&s, &data, k)
        }
        Command::Sweep { common, grid, reports, truth, history, k } => {
            let s = Settings::resolve(&common)?;
            let k = k.unwrap_or(s.k);
            cmd_sweep(&s, &grid, &reports, &truth, &history, k)
        }
    }
}

/// Too little labeled data, as opposed to bad input.
fn is_insufficient(err: &anyhow::Error) -> bool {
    fn classify(e: &ClassifyError) -> bool {
        matches!(e, ClassifyError::SingleClass | ClassifyError::NoPositives)
    }
    err.chain().any(|cause| {
        if let Some(e) = cause.downcast_ref::<ClassifyError>() {
            return classify(e);
        }
        match cause.downcast_ref::<EvalError>() {
            Some(EvalError::Classify(e)) => classify(e),
            Some(EvalError::SingleClass | EvalError::ClassStarved { .. } | EvalError::TooFewRows { .. }) => true,
            _ => false,
        }
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if is_insufficient(&e) { 3 } else { 2 })
        }
    }
}
