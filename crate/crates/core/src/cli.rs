//! The `lsq` command line.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 configuration or usage
//! error (including unreadable inputs), 3 failed verification.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use crate::analysis::{self, SizeRow};
use crate::config::{self, Config};
use crate::data::{DataConfig, Dataset};
use crate::error::{Error, Result};
use crate::infer::{check_equivalence, export_int, IntModel};
use crate::nn::{config_hash, build_model, Checkpoint};
use crate::quant::GradScale;
use crate::report::write_json;
use crate::train::{evaluate, train};

pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_VERIFY: i32 = 3;

#[derive(Parser, Debug)]
#[command(name = "lsq", version, about = "Learned step size quantization: train, evaluate, export, verify, analyze")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct ConfigArgs {
    /// TOML config with [model], [trainer], [data] and [run] sections.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set trainer.lr0=0.001`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<Option<Config>> {
        match &self.config {
            Some(p) => Config::load(p, &self.overrides).map(Some),
            None if self.overrides.is_empty() => Ok(None),
            None => Config::parse("", "<defaults>", &self.overrides).map(Some),
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write metrics and checkpoints to `<out>/<run.name>/`.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Initialise from a full precision checkpoint (sets run.init_from).
        #[arg(long)]
        init_from: Option<PathBuf>,
    },
    /// Report top-1 and top-5 accuracy of a checkpoint on the test set.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Also write the result as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Convert a quantized checkpoint into an integer inference model.
    Export {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Defaults to the checkpoint path with extension `lsqint`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare integer inference with the checkpoint on held-out samples.
    Verify {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 1e-5)]
        tol: f64,
        #[arg(long, default_value_t = 256)]
        samples: usize,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Write diagnostic reports as CSV and JSON.
    Analyze {
        #[arg(value_enum)]
        kind: AnalysisKind,
        /// Checkpoint(s) to analyze; size-table accepts several.
        #[arg(long = "checkpoint")]
        checkpoints: Vec<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
        /// r-ratio: scales to report (none, n, nqp). Defaults to all three.
        #[arg(long = "gscale", value_parser = parse_gscale)]
        gscales: Vec<GradScale>,
        /// r-ratio: steps before the measurement window.
        #[arg(long, default_value_t = 30)]
        warmup: usize,
        /// r-ratio: steps averaged.
        #[arg(long, default_value_t = 100)]
        window: usize,
        /// qe-sweep: test samples whose layer inputs are swept.
        #[arg(long, default_value_t = 256)]
        samples: usize,
        /// Output directory; defaults to `<output root>/analysis`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum AnalysisKind {
    RRatio,
    QeSweep,
    SizeTable,
}

fn parse_gscale(s: &str) -> std::result::Result<GradScale, String> {
    GradScale::from_label(s).map_err(|e| e.to_string())
}

/// Exit code for an error raised while running a command.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Usage(_) | Error::Argument(_) | Error::Data(_) | Error::Checkpoint(_) => EXIT_USAGE,
        Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => EXIT_USAGE,
        _ => EXIT_RUNTIME,
    }
}

/// Parse `args` (including the program name), run the command and return
/// the exit code. Results go to stdout, diagnostics to stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(cmd: Command) -> Result<i32> {
    match cmd {
        Command::Train { cfg, init_from } => cmd_train(&cfg, init_from),
        Command::Eval { checkpoint, cfg, json } => cmd_eval(&checkpoint, &cfg, json.as_deref()),
        Command::Export { checkpoint, out } => cmd_export(&checkpoint, out),
        Command::Verify {
            checkpoint,
            model,
            tol,
            samples,
            cfg,
            json,
        } => cmd_verify(&checkpoint, &model, tol, samples, &cfg, json.as_deref()),
        Command::Analyze {
            kind,
            checkpoints,
            cfg,
            gscales,
            warmup,
            window,
            samples,
            out,
        } => {
            let config = cfg.load()?;
            let out = out.unwrap_or_else(|| match &config {
                Some(c) => c.output_root().join("analysis"),
                None => config::output_root(Path::new("out")).join("analysis"),
            });
            match kind {
                AnalysisKind::RRatio => analyze_r(config, &checkpoints, &gscales, warmup, window, &out),
                AnalysisKind::QeSweep => analyze_qe(config, &checkpoints, samples, &out),
                AnalysisKind::SizeTable => analyze_size(config, &checkpoints, &out),
            }
        }
    }
}

fn cmd_train(args: &ConfigArgs, init_from: Option<PathBuf>) -> Result<i32> {
    let mut cfg = args.load()?.unwrap_or_default();
    if init_from.is_some() {
        cfg.run.init_from = init_from;
    }
    let hash = cfg.hash();
    let (train_set, test_set) = cfg.data.load()?;
    let mut model = build_model(&cfg.model, cfg.run.model_seed)?;
    if let Some(p) = &cfg.run.init_from {
        model.load_full_precision(&Checkpoint::load(p)?.model)?;
    }
    let teacher = match (&cfg.run.teacher, cfg.trainer.distill) {
        (Some(p), true) => Some(Checkpoint::load(p)?.model),
        (None, true) => return Err(Error::Config("trainer.distill needs run.teacher".into())),
        (_, false) => None,
    };
    let mut outcome = train(&mut model, &train_set, &test_set, &cfg.trainer, teacher.as_ref())?;
    outcome.metrics.config_hash = hash.clone();

    let dir = cfg.run_dir();
    let meta = json!({ "config_hash": hash, "run": cfg.run.name, "data": cfg.data });
    let epochs = outcome.resolved.epochs;
    let best_epoch = outcome.metrics.best().map_or(epochs, |r| r.epoch);
    outcome.metrics.table().write(&dir.join("metrics.csv"))?;
    write_json(&dir.join("metrics.json"), &outcome.metrics.summary())?;
    outcome.checkpoint(&model, epochs, meta.clone()).save(&dir.join("last.ckpt"))?;
    let mut best = Checkpoint::new(outcome.best.clone());
    best.epoch = best_epoch;
    best.meta = meta;
    best.save(&dir.join("best.ckpt"))?;
    crate::fsio::write_atomic(&dir.join("config.toml"), cfg.to_toml()?.as_bytes())?;

    let last = outcome.metrics.last().expect("at least one epoch");
    println!(
        "config {hash} epochs {epochs} top1 {:.4} top5 {:.4} -> {}",
        last.top1,
        last.top5,
        dir.display()
    );
    Ok(0)
}

/// Data settings: the explicit config, else those recorded in the
/// checkpoint, else the defaults.
fn data_for(config: &Option<Config>, ck: &Checkpoint) -> Result<DataConfig> {
    if let Some(c) = config {
        return Ok(c.data.clone());
    }
    match ck.meta.get("data") {
        Some(d) => serde_json::from_value(d.clone()).map_err(|e| Error::Checkpoint(format!("recorded data settings: {e}"))),
        None => Ok(DataConfig::default()),
    }
}

fn hash_of(ck: &Checkpoint) -> String {
    ck.meta
        .get("config_hash")
        .and_then(|v| v.as_str())
        .map_or_else(|| config_hash(ck.model.config()), str::to_string)
}

fn test_set(config: &Option<Config>, ck: &Checkpoint) -> Result<Dataset> {
    Ok(data_for(config, ck)?.load()?.1)
}

fn cmd_eval(path: &Path, args: &ConfigArgs, json_out: Option<&Path>) -> Result<i32> {
    let ck = Checkpoint::load(path)?;
    let data = test_set(&args.load()?, &ck)?;
    let (top1, top5) = evaluate(&ck.model, &data)?;
    println!("top1 {top1:.4}");
    println!("top5 {top5:.4}");
    if let Some(p) = json_out {
        let value = json!({
            "checkpoint": path.display().to_string(),
            "config_hash": hash_of(&ck),
            "samples": data.len(),
            "top1": top1,
            "top5": top5,
        });
        write_json(p, &value)?;
    }
    Ok(0)
}

fn cmd_export(path: &Path, out: Option<PathBuf>) -> Result<i32> {
    let ck = Checkpoint::load(path)?;
    let im = export_int(&ck.model)?;
    let out = out.unwrap_or_else(|| path.with_extension("lsqint"));
    let bytes = im.to_bytes()?;
    crate::fsio::write_atomic(&out, &bytes)?;
    println!(
        "payload_bytes {} file_bytes {} -> {}",
        im.packed_weight_bytes(),
        bytes.len(),
        out.display()
    );
    Ok(0)
}

fn cmd_verify(
    ck_path: &Path,
    model_path: &Path,
    tol: f64,
    samples: usize,
    args: &ConfigArgs,
    json_out: Option<&Path>,
) -> Result<i32> {
    if !(tol >= 0.0) {
        return Err(Error::Argument(format!("tolerance {tol}")));
    }
    let ck = Checkpoint::load(ck_path)?;
    let im = IntModel::load(model_path)?;
    if &im.config != ck.model.config() {
        return Err(Error::Config("integer model and checkpoint have different model configs".into()));
    }
    let data = test_set(&args.load()?, &ck)?;
    let n = samples.min(data.len());
    let (x, _) = data.batch(&(0..n).collect::<Vec<_>>())?;
    let report = check_equivalence(&ck.model, &im, &x, tol)?;
    println!(
        "{} samples {} max_rel_discrepancy {:e} argmax_agreement {:.4} tol {:e}",
        if report.pass { "PASS" } else { "FAIL" },
        report.samples,
        report.max_rel_discrepancy,
        report.argmax_agreement,
        report.tol
    );
    if let Some(p) = json_out {
        write_json(p, &json!({ "config_hash": hash_of(&ck), "report": report }))?;
    }
    Ok(if report.pass { 0 } else { EXIT_VERIFY })
}

fn analyze_r(
    config: Option<Config>,
    checkpoints: &[PathBuf],
    gscales: &[GradScale],
    warmup: usize,
    window: usize,
    out: &Path,
) -> Result<i32> {
    let cfg = config.unwrap_or_default();
    let init = match checkpoints {
        [] => cfg.run.init_from.clone(),
        [one] => Some(one.clone()),
        _ => return Err(Error::Usage("r-ratio takes at most one --checkpoint".into())),
    };
    let mut model = build_model(&cfg.model, cfg.run.model_seed)?;
    if let Some(p) = &init {
        model.load_full_precision(&Checkpoint::load(p)?.model)?;
    }
    if !model.config().is_quantized() {
        return Err(Error::Config("r-ratio needs a quantized model.precision".into()));
    }
    let scales = if gscales.is_empty() {
        vec![GradScale::None, GradScale::Count, GradScale::CountLevels]
    } else {
        gscales.to_vec()
    };
    let (train_set, _) = cfg.data.load()?;
    let records = analysis::measure_r(&mut model, &train_set, &cfg.trainer, warmup, window, &scales)?;
    let hash = cfg.hash();
    let table = analysis::r_table(&records)?.with_meta("config", &hash);
    let (csv, _) = analysis::emit_report(&table, &json!({ "config_hash": hash, "records": records }), out, "r-ratio")?;
    println!("{} rows -> {}", records.len(), csv.display());
    Ok(0)
}

fn single<'a>(checkpoints: &'a [PathBuf], kind: &str) -> Result<&'a Path> {
    match checkpoints {
        [one] => Ok(one),
        _ => Err(Error::Usage(format!("{kind} takes exactly one --checkpoint"))),
    }
}

fn analyze_qe(config: Option<Config>, checkpoints: &[PathBuf], samples: usize, out: &Path) -> Result<i32> {
    let ck = Checkpoint::load(single(checkpoints, "qe-sweep")?)?;
    let data = test_set(&config, &ck)?;
    let n = samples.clamp(1, data.len());
    let (x, _) = data.batch(&(0..n).collect::<Vec<_>>())?;
    let sweeps = analysis::sweep_model(&ck.model, &x)?;
    let hash = hash_of(&ck);
    let table = analysis::qe_table(&sweeps)?.with_meta("config", &hash);
    let (csv, _) = analysis::emit_report(&table, &json!({ "config_hash": hash, "sweeps": sweeps }), out, "qe-sweep")?;
    for s in &sweeps {
        println!(
            "layer {} {:?} s_hat {:.4e} pct_diff mae {:.1} mse {:.1} kl {}",
            s.layer,
            s.quantity,
            s.result.s_hat,
            s.result.mae.pct_diff,
            s.result.mse.pct_diff,
            s.result.kl.as_ref().map_or("-".to_string(), |k| format!("{:.1}", k.pct_diff))
        );
    }
    println!("-> {}", csv.display());
    Ok(0)
}

fn analyze_size(config: Option<Config>, checkpoints: &[PathBuf], out: &Path) -> Result<i32> {
    if checkpoints.is_empty() {
        return Err(Error::Usage("size-table needs at least one --checkpoint".into()));
    }
    let mut rows = Vec::new();
    let mut hashes = Vec::new();
    for p in checkpoints {
        let ck = Checkpoint::load(p)?;
        let data = test_set(&config, &ck)?;
        let (top1, top5) = evaluate(&ck.model, &data)?;
        let size = analysis::model_size(&ck.model);
        hashes.push(hash_of(&ck));
        rows.push(SizeRow {
            name: p.display().to_string(),
            precision: ck.model.config().precision,
            payload_bytes: size.payload_bytes,
            overhead_bytes: size.overhead_bytes,
            top1,
            top5,
        });
    }
    let table = analysis::size_table(&rows)?.with_meta("config", hashes.join("+"));
    let (csv, _) = analysis::emit_report(&table, &json!({ "config_hashes": hashes, "rows": rows }), out, "size-table")?;
    for r in &rows {
        println!("{} bits {} bytes {} top1 {:.4}", r.name, r.precision, r.payload_bytes, r.top1);
    }
    println!("-> {}", csv.display());
    Ok(0)
}
