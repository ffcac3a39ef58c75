use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use indexmap::IndexMap;

use mmdense::arch::analysis::kernel_norm_csv;
use mmdense::arch::{count_spec_params, kernel_norm_report, receptive_field, ArchSpec, Model};
use mmdense::eval::{evaluate, evaluate_mixture_baseline, DEFAULT_TAPS};
use mmdense::gradcheck::run_suite;
use mmdense::separate::{separate_file, Method, ModelSet, SeparateOptions};
use mmdense::train::{load_checkpoint, load_dataset, synth_dataset_with, write_dataset, Recipe, TrainConfig, Trainer};

#[derive(Parser, Debug)]
#[command(name = "mmdense", version, about = "Multi-band DenseNet source separation")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Overrides the seed of the architecture, training run or generator.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Preset name or path to an architecture TOML file.
    #[arg(long, global = true, default_value = "mmdensenet-table1")]
    arch: String,
    /// Output file or directory (stdout for CSV when omitted).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one instrument model.
    Train(TrainArgs),
    /// Separate a stereo WAV file with the checkpoints in a directory.
    Separate(SeparateArgs),
    /// Separate and score every song of a dataset directory.
    Evaluate(EvaluateArgs),
    /// Parameter counts, receptive field or kernel norms as CSV.
    Analyze(AnalyzeArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck,
    /// Write a synthetic dataset to disk.
    Synth(SynthArgs),
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Training config (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    instrument: Option<String>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    segment_frames: Option<usize>,
    /// Dataset root (`<song>/{mixture,<instrument>}.wav`); synthetic scenes otherwise.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Synthetic scenes to generate when no dataset is given.
    #[arg(long, default_value_t = 20)]
    scenes: usize,
    /// Length of each synthetic scene in seconds.
    #[arg(long, default_value_t = 6.0)]
    duration: f64,
    /// Continue from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Width multiplier applied to the architecture.
    #[arg(long)]
    width: Option<f64>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum MethodArg {
    Mask,
    Mwf,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Mask => Method::Mask,
            MethodArg::Mwf => Method::Mwf,
        }
    }
}

#[derive(Args, Debug)]
struct SeparateArgs {
    input: PathBuf,
    /// Directory holding one `<instrument>.ckpt` per model.
    #[arg(long)]
    checkpoints: PathBuf,
    #[arg(long, value_enum, default_value = "mwf")]
    method: MethodArg,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    root: PathBuf,
    #[arg(long)]
    checkpoints: PathBuf,
    #[arg(long, value_enum, default_value = "mwf")]
    method: MethodArg,
    #[arg(long, default_value_t = DEFAULT_TAPS)]
    taps: usize,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Report {
    Params,
    Rf,
    Knorm,
}

#[derive(Args, Debug)]
struct AnalyzeArgs {
    #[arg(value_enum)]
    report: Report,
    /// Analyze this checkpoint instead of a fresh build of `--arch`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, default_value_t = 10)]
    scenes: usize,
    #[arg(long, default_value_t = 6.0)]
    duration: f64,
    /// Comma-separated recipes (tonal, noise-burst, bass, texture).
    #[arg(long, value_delimiter = ',', default_values_t = Recipe::ALL.map(|r| r.name().to_string()))]
    recipes: Vec<String>,
}

fn resolve_arch(common: &Common) -> Result<ArchSpec> {
    let spec = ArchSpec::resolve(&common.arch).with_context(|| format!("architecture `{}`", common.arch))?;
    Ok(match common.seed {
        Some(s) => spec.with_seed(s),
        None => spec,
    })
}

fn emit(out: &Option<PathBuf>, text: &str) -> Result<()> {
    match out {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            fs::write(p, text).with_context(|| format!("writing {}", p.display()))
        }
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

/// Every `*.ckpt` in `dir`, keyed by instrument, plus their shared fingerprint.
fn load_models(dir: &Path) -> Result<(ModelSet, String)> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "ckpt"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        bail!("no .ckpt files in {}", dir.display());
    }
    let mut models = IndexMap::new();
    let mut fingerprint = None;
    for p in paths {
        let ckpt = load_checkpoint(&p).with_context(|| format!("loading {}", p.display()))?;
        fingerprint.get_or_insert_with(|| ckpt.fingerprint.clone());
        models.insert(ckpt.instrument.clone(), ckpt.to_model()?);
    }
    Ok((models, fingerprint.expect("at least one checkpoint")))
}

fn train(common: &Common, args: &TrainArgs) -> Result<()> {
    let mut cfg = match &args.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    if let Some(i) = &args.instrument {
        cfg.instrument = i.clone();
    }
    if let Some(s) = args.steps {
        cfg.max_steps = s;
    }
    if let Some(b) = args.batch {
        cfg.batch = b;
    }
    if let Some(f) = args.segment_frames {
        cfg.segment_frames = f;
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.out_dir = Some(o.clone());
    }
    if cfg.out_dir.is_none() {
        bail!("--out (or out_dir in the config) is required for train");
    }
    let scenes = match &args.data {
        Some(root) => load_dataset(root, std::slice::from_ref(&cfg.instrument))?,
        None => synth_dataset_with(cfg.seed, args.scenes, args.duration, &Recipe::ALL),
    };
    let mut trainer = match &args.resume {
        Some(p) => Trainer::resume(cfg, &load_checkpoint(p)?, scenes, &[])?,
        None => {
            let mut spec = resolve_arch(common)?;
            if let Some(w) = args.width {
                spec = spec.scaled_widths(w);
            }
            Trainer::new(cfg, &spec, scenes, &[])?
        }
    };
    trainer.run()?;
    let last = trainer.metrics().last().map(|m| m.train_loss).unwrap_or(f64::NAN);
    log::info!("trained {} steps, last loss {last:.4e}", trainer.step_count());
    Ok(())
}

fn separate(common: &Common, args: &SeparateArgs) -> Result<()> {
    let (models, fp) = load_models(&args.checkpoints)?;
    let opts = SeparateOptions {
        method: args.method.into(),
        ..Default::default()
    };
    let out = common.out.clone().unwrap_or_else(|| PathBuf::from("."));
    for p in separate_file(&args.input, &models, &fp, &opts, &out)? {
        println!("{}", p.display());
    }
    Ok(())
}

fn evaluate_cmd(common: &Common, args: &EvaluateArgs) -> Result<()> {
    let (models, fp) = load_models(&args.checkpoints)?;
    let instruments: Vec<String> = models.keys().cloned().collect();
    let songs = load_dataset(&args.root, &instruments)?;
    let opts = SeparateOptions {
        method: args.method.into(),
        ..Default::default()
    };
    let report = evaluate(&models, &fp, &songs, &opts, args.taps)?;
    let baseline = evaluate_mixture_baseline(&songs, &instruments, args.taps)?;
    match &common.out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            fs::write(dir.join("scores.csv"), report.to_csv())?;
            fs::write(dir.join("summary.csv"), report.summary_csv())?;
            fs::write(dir.join("baseline.csv"), baseline.to_csv())?;
            fs::write(dir.join("baseline_summary.csv"), baseline.summary_csv())?;
            print!("{}", report.summary_csv());
        }
        None => {
            print!("{}", report.to_csv());
            print!("{}", report.summary_csv());
        }
    }
    Ok(())
}

fn analyze(common: &Common, args: &AnalyzeArgs) -> Result<()> {
    let model = match &args.checkpoint {
        Some(p) => load_checkpoint(p)?.to_model()?,
        None => Model::<f32>::build(&resolve_arch(common)?)?,
    };
    let text = match args.report {
        Report::Params => count_spec_params(model.spec()).to_csv(),
        Report::Rf => receptive_field(model.spec()).to_csv(),
        Report::Knorm => kernel_norm_csv(&kernel_norm_report(&model)?),
    };
    emit(&common.out, &text)
}

fn gradcheck() -> Result<bool> {
    let mut ok = true;
    for case in run_suite()? {
        let status = if case.passed() { "ok" } else { "FAILED" };
        println!(
            "{:<24} max rel err {:.3e} (tol {:.0e}, {} coords) {status}",
            case.name, case.report.max_rel_error, case.tolerance, case.report.coords_checked
        );
        ok &= case.passed();
    }
    Ok(ok)
}

fn synth(common: &Common, args: &SynthArgs) -> Result<()> {
    let Some(out) = &common.out else { bail!("--out is required for synth") };
    let recipes = args
        .recipes
        .iter()
        .map(|r| r.parse::<Recipe>())
        .collect::<mmdense::Result<Vec<_>>>()?;
    let scenes = synth_dataset_with(common.seed.unwrap_or(0), args.scenes, args.duration, &recipes);
    write_dataset(&scenes, out)?;
    println!("{} scenes written to {}", scenes.len(), out.display());
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<bool> {
    match &cli.command {
        Command::Train(a) => train(&cli.common, a).map(|_| true),
        Command::Separate(a) => separate(&cli.common, a).map(|_| true),
        Command::Evaluate(a) => evaluate_cmd(&cli.common, a).map(|_| true),
        Command::Analyze(a) => analyze(&cli.common, a).map(|_| true),
        Command::Gradcheck => gradcheck(),
        Command::Synth(a) => synth(&cli.common, a).map(|_| true),
    }
}

/// Exit code: 0 success, 1 usage error, 2 runtime failure.
fn run<I, T>(argv: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match dispatch(&cli) {
        Ok(true) => 0,
        Ok(false) => 2,
        Err(e) => {
            eprintln!("error: {e:#}");
            2
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    ExitCode::from(run(std::env::args_os()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn help_and_version_exit_zero() {
        assert_eq!(run(["mmdense", "--help"]), 0);
        assert_eq!(run(["mmdense", "--version"]), 0);
        assert_eq!(run(["mmdense", "analyze", "--help"]), 0);
    }

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(run(["mmdense", "frobnicate"]), 1);
        assert_eq!(run(["mmdense", "analyze", "params", "--bogus"]), 1);
        assert_eq!(run(["mmdense", "analyze", "volume"]), 1);
        assert_eq!(run(["mmdense"]), 1);
    }

    #[test]
    fn runtime_failures_exit_two() {
        assert_eq!(run(["mmdense", "analyze", "params", "--arch", "/no/such/arch.toml"]), 2);
        let dir = tempfile::tempdir().unwrap();
        let wav = dir.path().join("x.wav");
        assert_eq!(run([OsString::from("mmdense"), "separate".into(), wav.into(), "--checkpoints".into(), dir.path().into()]), 2);
    }

    #[test]
    fn analyze_params_writes_csv() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("params.csv");
        let code = run([
            OsString::from("mmdense"),
            "analyze".into(),
            "params".into(),
            "--arch".into(),
            "mmdensenet-table1".into(),
            "--out".into(),
            out.clone().into(),
        ]);
        assert_eq!(code, 0);
        let csv = fs::read_to_string(out).unwrap();
        assert!(csv.starts_with("component,params\n"));
        assert!(csv.ends_with("total,270100\n"));
    }

    #[test]
    fn synth_then_train_then_separate() {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        let s = |p: &Path| p.to_string_lossy().into_owned();
        let argv = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
        assert_eq!(
            run(argv(&["mmdense", "synth", "--scenes", "2", "--duration", "0.5", "--recipes", "tonal,bass", "--out", &s(&data)])),
            0
        );
        let ckpts = dir.path().join("ckpt");
        for inst in ["tonal", "bass"] {
            let code = run(argv(&[
                "mmdense", "train", "--instrument", inst, "--data", &s(&data), "--steps", "1", "--batch", "1",
                "--segment-frames", "8", "--width", "0.25", "--out", &s(&ckpts),
            ]));
            assert_eq!(code, 0);
        }
        let sep = dir.path().join("sep");
        let mix = data.join("synth-0-000").join("mixture.wav");
        let code = run(argv(&[
            "mmdense", "separate", &s(&mix), "--checkpoints", &s(&ckpts), "--method", "mask", "--out", &s(&sep),
        ]));
        assert_eq!(code, 0);
        assert!(sep.join("tonal.wav").exists() && sep.join("bass.wav").exists());
        assert_eq!(
            run(argv(&["mmdense", "analyze", "knorm", "--checkpoint", &s(&ckpts.join("tonal.ckpt"))])),
            0
        );
    }
}
