//! `octsurf`: synthetic data, preprocessing, training, prediction,
//! evaluation and plots for joint B-scan alignment and surface regression.

mod config;

use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Mutex;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use octsurf_core::dataset::{load_cases, make_dataset, CaseEntry, Manifest, Split, MANIFEST_FORMAT};
use octsurf_core::eval::{compare_runs, depth_field_export, histogram_image, save_png, HistogramSpec, MetricsReport};
use octsurf_core::io::{read_json, read_surfaces, write_bytes_atomic, write_json, write_surfaces, write_volume};
use octsurf_core::model::checkpoint;
use octsurf_core::pipeline::{evaluate_predictions, predict_to_dir, PredictionIndex, PREDICTIONS_FILE};
use octsurf_core::preprocess::estimate_displacement_ncc;
use octsurf_core::synth::PhantomSpec;
use octsurf_core::trainer::{prepare_case, read_displacements, train, write_displacements, FlattenConfig, TrainConfig, TrainMode};
use octsurf_core::OctError;

const RESOLVED: &str = "config.resolved.json";
const LOG: &str = "octsurf.log";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Runtime(String),
}

impl From<OctError> for CliError {
    fn from(e: OctError) -> Self {
        match e {
            OctError::Io { .. } | OctError::NonFinite(_) => CliError::Runtime(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Parser)]
#[command(name = "octsurf", version, about = "Joint B-scan alignment and retinal layer surface regression")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// JSON configuration file; missing keys take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted-key override such as `loss.lambda=[0,0.3,0.5]` (repeatable).
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Profile {
    /// Small model on whole synthetic volumes.
    Desk,
    /// Full-scale settings.
    Full,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
    All,
}

impl SplitArg {
    fn split(self) -> Option<Split> {
        match self {
            SplitArg::Train => Some(Split::Train),
            SplitArg::Val => Some(Split::Val),
            SplitArg::Test => Some(Split::Test),
            SplitArg::All => None,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic phantom dataset.
    Synth {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory for the manifest and volumes.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Normalise and flatten a dataset and estimate NCC pre-alignment.
    Preprocess {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Dataset manifest or the directory containing `manifest.json`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Base settings the config file and overrides apply to.
        #[arg(long, value_enum, default_value = "desk")]
        profile: Profile,
        /// Dataset manifest (overrides `data`).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Run directory (overrides `out_dir`).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Predict surfaces and displacements for a dataset split.
    Predict {
        /// Checkpoint directory.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Training config; defaults to the run's resolved config.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// Displacements for `pre_align` runs (defaults to the training file).
        #[arg(long)]
        pre_align: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute metrics for a prediction directory.
    Evaluate {
        /// Prediction directory written by `predict`.
        #[arg(long)]
        pred: PathBuf,
        /// Dataset manifest or its directory.
        #[arg(long)]
        truth: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// Run name in the report (defaults to the prediction run).
        #[arg(long)]
        run: Option<String>,
        /// Local NCC window (odd).
        #[arg(long, default_value_t = 9)]
        window: usize,
        #[arg(long, default_value_t = 61)]
        bins: usize,
        #[arg(long, default_value_t = 15.0)]
        range: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render histogram and depth-field images with their CSV data.
    Plot {
        /// Metrics report written by `evaluate`.
        #[arg(long)]
        report: PathBuf,
        /// Prediction directory for depth fields.
        #[arg(long)]
        pred: Option<PathBuf>,
        /// Surface index for depth fields (defaults to the last surface).
        #[arg(long)]
        surface: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Tabulate several metrics reports side by side.
    Compare {
        /// Metrics reports, one per run, in column order.
        #[arg(long, num_args = 1.., required = true)]
        reports: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Settings of the `synth` subcommand.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct SynthConfig {
    phantom: PhantomSpec,
    n_train: usize,
    n_test: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { phantom: PhantomSpec::default(), n_train: 32, n_test: 8 }
    }
}

/// Settings of the `preprocess` subcommand.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct PreprocessConfig {
    flatten: FlattenConfig,
    /// Largest shift searched by the NCC pre-alignment.
    max_shift: usize,
    ncc_window: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self { flatten: FlattenConfig::default(), max_shift: 8, ncc_window: 9 }
    }
}

/// Writes to stderr and to the run log.
struct Tee(Mutex<File>);

impl Write for Tee {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        std::io::stderr().write_all(buf)?;
        self.0.lock().expect("log lock").write_all(buf)?;
        Ok(buf.len())
    }

    fn flush(&mut self) -> std::io::Result<()> {
        self.0.lock().expect("log lock").flush()
    }
}

fn start_run(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))?;
    let path = dir.join(LOG);
    let file = File::create(&path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .target(env_logger::Target::Pipe(Box::new(Tee(Mutex::new(file)))))
        .try_init();
    Ok(())
}

fn manifest_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join("manifest.json")
    } else {
        p.to_path_buf()
    }
}

fn snapshot<T: Serialize>(dir: &Path, value: &T) -> Result<()> {
    Ok(write_json(&dir.join(RESOLVED), value)?)
}

fn run_synth(cfg: ConfigArgs, out: PathBuf, seed: Option<u64>) -> Result<()> {
    let mut sc: SynthConfig = config::resolve(SynthConfig::default(), cfg.config.as_deref(), &cfg.overrides)?;
    if let Some(s) = seed {
        sc.phantom.seed = s;
    }
    sc.phantom.validate()?;
    start_run(&out)?;
    snapshot(&out, &sc)?;
    let m = make_dataset(&sc.phantom, sc.n_train, sc.n_test, &out)?;
    log::info!("wrote {} cases to {}", m.cases.len(), out.join("manifest.json").display());
    Ok(())
}

fn run_preprocess(cfg: ConfigArgs, data: PathBuf, out: PathBuf) -> Result<()> {
    let pc: PreprocessConfig = config::resolve(PreprocessConfig::default(), cfg.config.as_deref(), &cfg.overrides)?;
    let mpath = manifest_path(&data);
    let manifest = Manifest::read(&mpath)?;
    let cases = load_cases(&mpath, None)?;
    start_run(&out)?;
    snapshot(&out, &pc)?;
    let mut entries = Vec::with_capacity(cases.len());
    let mut pre = std::collections::BTreeMap::new();
    for (case, entry) in cases.iter().zip(&manifest.cases) {
        let p = prepare_case(case, &pc.flatten)?;
        let vol = PathBuf::from("volumes").join(format!("{}.json", case.id));
        let truth = PathBuf::from("truth").join(format!("{}.json", case.id));
        write_volume(&out.join(&vol), &p.volume)?;
        write_surfaces(&out.join(&truth), &p.truth)?;
        if let Some(rec) = &p.record {
            write_json(&out.join("records").join(format!("{}.json", case.id)), rec)?;
        }
        let d = estimate_displacement_ncc(&p.volume, pc.max_shift, pc.ncc_window)?;
        pre.insert(case.id.clone(), d.values().to_vec());
        entries.push(CaseEntry { volume: vol, truth, sha256: None, ..entry.clone() });
        log::info!("{}: preprocessed", case.id);
    }
    let m = Manifest { format: MANIFEST_FORMAT.into(), generator: manifest.generator.clone(), cases: entries };
    m.write(&out.join("manifest.json"))?;
    write_displacements(&out.join("pre_align.json"), &pre)?;
    log::info!("wrote {} cases and pre-alignment to {}", m.cases.len(), out.display());
    Ok(())
}

fn run_train(cfg: ConfigArgs, profile: Profile, data: Option<PathBuf>, out: Option<PathBuf>, seed: Option<u64>) -> Result<()> {
    let base = match profile {
        Profile::Desk => TrainConfig::desk(),
        Profile::Full => TrainConfig::full(),
    };
    let mut tc: TrainConfig = config::resolve(base, cfg.config.as_deref(), &cfg.overrides)?;
    if let Some(d) = data {
        tc.data = manifest_path(&d);
    }
    if let Some(o) = out {
        tc.out_dir = o;
    }
    if let Some(s) = seed {
        tc.seed = s;
        tc.model.seed = s;
    }
    let mode = tc.mode;
    let tc = tc.with_mode(mode);
    tc.validate()?;
    start_run(&tc.out_dir)?;
    let summary = train(&tc)?;
    write_json(&tc.out_dir.join("summary.json"), &summary)?;
    log::info!("best epoch {} (loss {:.5}); checkpoints in {}", summary.best_epoch, summary.best_loss, tc.out_dir.display());
    Ok(())
}

fn run_predict(
    ckpt: PathBuf,
    config: Option<PathBuf>,
    data: PathBuf,
    split: SplitArg,
    pre_align: Option<PathBuf>,
    out: PathBuf,
) -> Result<()> {
    let cfg_path = match config {
        Some(p) => p,
        None => ckpt.parent().map(|p| p.join(RESOLVED)).filter(|p| p.exists()).ok_or_else(|| {
            CliError::Validation(format!("no {RESOLVED} next to {}; pass --config", ckpt.display()))
        })?,
    };
    let tc: TrainConfig = read_json(&cfg_path)?;
    let model = checkpoint::load::<f32>(&ckpt, Some(&tc.model))?;
    let cases = load_cases(&manifest_path(&data), split.split())?;
    let pre = match (tc.mode, pre_align.or(tc.pre_align_file.clone())) {
        (TrainMode::PreAlign, Some(p)) => Some(read_displacements(&p)?),
        (TrainMode::PreAlign, None) => return Err(CliError::Validation("pre_align runs need --pre-align".into())),
        _ => None,
    };
    start_run(&out)?;
    let run = tc.mode.name();
    snapshot(&out, &serde_json::json!({ "checkpoint": ckpt, "train_config": tc, "data": data }))?;
    let idx = predict_to_dir(&model, &cases, run, tc.mode, &tc.flatten, pre.as_ref(), &out)?;
    log::info!("predicted {} cases into {}", idx.cases.len(), out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn run_evaluate(
    pred: PathBuf,
    truth: PathBuf,
    split: SplitArg,
    run: Option<String>,
    window: usize,
    bins: usize,
    range: f64,
    out: PathBuf,
) -> Result<()> {
    let hist = HistogramSpec { bins, lo: -range, hi: range };
    let cases = load_cases(&manifest_path(&truth), split.split())?;
    start_run(&out)?;
    snapshot(&out, &serde_json::json!({ "pred": pred, "truth": truth, "window": window, "histogram": hist, "run": run }))?;
    let report = evaluate_predictions(&pred, &cases, window, hist, run.as_deref())?;
    report.write_all(&out, "metrics")?;
    log::info!(
        "{}: overall MAD {:.3} px ({:.2} um), alignment MAD {:.3} px, NCC {:.4}",
        report.run,
        report.overall.mean_px,
        report.overall.mean_um,
        report.alignment_mad_mean_px,
        report.ncc_mean
    );
    Ok(())
}

fn run_plot(report: PathBuf, pred: Option<PathBuf>, surface: Option<usize>, out: PathBuf) -> Result<()> {
    let r: MetricsReport = read_json(&report)?;
    start_run(&out)?;
    snapshot(&out, &serde_json::json!({ "report": report, "pred": pred, "surface": surface }))?;
    write_bytes_atomic(&out.join("histogram.csv"), r.histogram.to_csv().as_bytes())?;
    save_png(histogram_image(&r.histogram, 8, 200), &out.join("histogram.png"))?;
    if let Some(dir) = pred {
        let idx = PredictionIndex::read(&dir.join(PREDICTIONS_FILE))?;
        for e in &idx.cases {
            let s = read_surfaces(&dir.join(&e.surfaces))?;
            let k = surface.unwrap_or(s.k() - 1);
            let field = depth_field_export(&s, k)?;
            let stem = format!("depth_{}_{}", e.id, field.name);
            write_bytes_atomic(&out.join(format!("{stem}.csv")), field.to_csv().as_bytes())?;
            save_png(field.to_image(8), &out.join(format!("{stem}.png")))?;
        }
    }
    log::info!("plots written to {}", out.display());
    Ok(())
}

fn run_compare(reports: Vec<PathBuf>, out: PathBuf) -> Result<()> {
    let loaded = reports.iter().map(|p| read_json::<MetricsReport>(p)).collect::<octsurf_core::Result<Vec<_>>>()?;
    start_run(&out)?;
    snapshot(&out, &serde_json::json!({ "reports": reports }))?;
    let table = compare_runs(&loaded)?;
    write_bytes_atomic(&out.join("comparison.md"), table.to_markdown().as_bytes())?;
    write_bytes_atomic(&out.join("comparison.csv"), table.to_csv().as_bytes())?;
    print!("{}", table.to_markdown());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { cfg, out, seed } => run_synth(cfg, out, seed),
        Command::Preprocess { cfg, data, out } => run_preprocess(cfg, data, out),
        Command::Train { cfg, profile, data, out, seed } => run_train(cfg, profile, data, out, seed),
        Command::Predict { checkpoint, config, data, split, pre_align, out } => {
            run_predict(checkpoint, config, data, split, pre_align, out)
        }
        Command::Evaluate { pred, truth, split, run, window, bins, range, out } => {
            run_evaluate(pred, truth, split, run, window, bins, range, out)
        }
        Command::Plot { report, pred, surface, out } => run_plot(report, pred, surface, out),
        Command::Compare { reports, out } => run_compare(reports, out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
