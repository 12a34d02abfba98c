//! `wsod` — the command-line face of the detector: synthesize datasets,
//! train, evaluate, run paired ablations, and audit gradients.
//!
//! Exit codes are part of the contract: 0 success, 1 usage error, 2 numeric
//! failure (a non-finite loss or a failed gradient audit), 3 I/O error.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use wsod_core::checkpoint::{Checkpoint, CheckpointError};
use wsod_core::config::{ConfigError, TrainConfig};
use wsod_core::data::{load_dataset, write_dataset, DataError};
use wsod_core::fidelity::{self, NamedReport};
use wsod_core::tensor::TensorError;
use wsod_core::train::{
    evaluate_model, format_ablation_table, format_plot_data, format_report, parse_grid,
    run_ablation, AblationMode, TrainError, Trainer,
};

const EXIT_USAGE: u8 = 1;
const EXIT_NUMERIC: u8 = 2;
const EXIT_IO: u8 = 3;

#[derive(Parser)]
#[command(name = "wsod", version, about = "Weakly supervised object detection, desk scale")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with ground-truth annotations.
    Synth {
        /// Output directory (created if missing).
        #[arg(long)]
        out: PathBuf,
        /// Number of scenes.
        #[arg(long)]
        n: usize,
        /// RNG seed.
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Number of object classes (1-8).
        #[arg(long, default_value_t = 4)]
        classes: usize,
        /// Scene size as HxW, e.g. 64x64.
        #[arg(long, default_value = "64x64")]
        size: String,
    },
    /// Train a detector; writes a checkpoint and a metrics log beside it.
    Train {
        /// Config file (flat key = value lines).
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint output path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset with ground truth.
    Eval {
        /// Checkpoint to load.
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset directory.
        #[arg(long)]
        data: PathBuf,
        /// Metrics report output path.
        #[arg(long)]
        report: PathBuf,
    },
    /// Run a grid of paired training runs and tabulate the results.
    Ablate {
        /// Grid file: a config plus ablate_mode/sweep keys.
        #[arg(long)]
        grid: PathBuf,
        /// Table output path (sweeps also get a .plot.tsv next to it).
        #[arg(long)]
        out: PathBuf,
    },
    /// Audit backward passes against central finite differences.
    Gradcheck {
        /// Which module to audit.
        #[arg(long, value_enum, default_value_t = ModuleArg::All)]
        module: ModuleArg,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModuleArg {
    All,
    Cadm,
    Gcm,
    Head,
}

/// Failure routed to a contract exit code, with a message for stderr.
enum CliError {
    Usage(String),
    Numeric(String),
    Io(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Numeric(_) => EXIT_NUMERIC,
            CliError::Io(_) => EXIT_IO,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Numeric(m) | CliError::Io(m) => m,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Io(..) => CliError::Io(e.to_string()),
            _ => CliError::Usage(e.to_string()),
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Io(..) | DataError::Parse(..) => CliError::Io(e.to_string()),
            _ => CliError::Usage(e.to_string()),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<TensorError> for CliError {
    fn from(e: TensorError) -> Self {
        CliError::Numeric(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFinite { .. } => CliError::Numeric(e.to_string()),
            TrainError::Tensor(t) => t.into(),
            TrainError::Config(c) => c.into(),
            TrainError::Data(d) => d.into(),
            TrainError::Checkpoint(c) => c.into(),
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

fn parse_size(s: &str) -> Result<(usize, usize), CliError> {
    let bad = || CliError::Usage(format!("--size wants HxW (e.g. 64x64), got {s:?}"));
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    let h: usize = h.trim().parse().map_err(|_| bad())?;
    let w: usize = w.trim().parse().map_err(|_| bad())?;
    Ok((h, w))
}

fn cmd_synth(out: &Path, n: usize, seed: u64, classes: usize, size: &str) -> Result<(), CliError> {
    let (h, w) = parse_size(size)?;
    if n == 0 {
        return Err(CliError::Usage("--n must be at least 1".into()));
    }
    if !(1..=8).contains(&classes) {
        return Err(CliError::Usage(format!("--classes must be in 1-8, got {classes}")));
    }
    if h < 32 || w < 32 || h % 4 != 0 || w % 4 != 0 {
        return Err(CliError::Usage(format!(
            "--size must be at least 32x32 with both sides divisible by 4, got {h}x{w}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    write_dataset(out, n, classes, h, w, &mut rng)?;
    println!("wrote {n} scenes ({classes} classes, {h}x{w}) to {}", out.display());
    Ok(())
}

fn metrics_path(ckpt: &Path) -> PathBuf {
    PathBuf::from(format!("{}.metrics.jsonl", ckpt.display()))
}

fn cmd_train(config: &Path, out: &Path) -> Result<(), CliError> {
    let cfg = TrainConfig::from_file(config)?;
    if cfg.data_dir.is_empty() {
        return Err(CliError::Usage("config must set data_dir".into()));
    }
    let dataset = load_dataset(Path::new(&cfg.data_dir))?;
    let mut trainer = Trainer::new(cfg, &dataset)?;

    let log_path = metrics_path(out);
    let log_file =
        fs::File::create(&log_path).map_err(|e| io_err(&log_path, e))?;
    let mut log = std::io::BufWriter::new(log_file);
    let mut write_failure: Option<std::io::Error> = None;
    let total_iters = trainer.cfg.iterations;
    let started = Instant::now();
    let run = trainer.run(&dataset, |rec| {
        let line = serde_json::to_string(rec).expect("record serializes");
        if let Err(e) = writeln!(log, "{line}") {
            write_failure.get_or_insert(e);
        }
        if (rec.iter + 1) % 200 == 0 || rec.iter + 1 == total_iters {
            eprintln!("iter {}/{} total {:.6}", rec.iter + 1, total_iters, rec.total);
        }
    });
    if let Err(TrainError::NonFinite { iteration, ref diagnostic }) = run {
        eprintln!("non-finite loss at iteration {iteration}\n{diagnostic}");
    }
    run?;
    if let Some(e) = write_failure {
        return Err(io_err(&log_path, e));
    }
    log.flush().map_err(|e| io_err(&log_path, e))?;

    trainer.checkpoint().save(out)?;
    println!(
        "trained {total_iters} iterations in {:.1}s; checkpoint {}; metrics {}",
        started.elapsed().as_secs_f64(),
        out.display(),
        log_path.display()
    );
    Ok(())
}

fn cmd_eval(ckpt: &Path, data: &Path, report_path: &Path) -> Result<(), CliError> {
    let ck = Checkpoint::load(ckpt)?;
    let dataset = load_dataset(data)?;
    let trainer = Trainer::from_checkpoint(&ck, &dataset)?;
    let (report, detections) = evaluate_model(&trainer.params, &dataset, &trainer.cfg)?;
    let text = format_report(&report);
    fs::write(report_path, &text).map_err(|e| io_err(report_path, e))?;
    println!(
        "map {:.4}  mean_corloc {:.4}  ({} detections kept) -> {}",
        report.map,
        report.mean_corloc,
        detections.len(),
        report_path.display()
    );
    Ok(())
}

fn cmd_ablate(grid: &Path, out: &Path) -> Result<(), CliError> {
    let text = fs::read_to_string(grid).map_err(|e| io_err(grid, e))?;
    let (base, mode) = parse_grid(&text)?;
    if base.data_dir.is_empty() {
        return Err(CliError::Usage("grid must set data_dir".into()));
    }
    let dataset = load_dataset(Path::new(&base.data_dir))?;
    let cells = run_ablation(&base, &dataset, &mode, |label| eprintln!("running: {label}"))?;
    let table = format_ablation_table(&cells);
    fs::write(out, &table).map_err(|e| io_err(out, e))?;
    print!("{table}");
    if matches!(mode, AblationMode::Sweep { .. }) {
        let plot = PathBuf::from(format!("{}.plot.tsv", out.display()));
        fs::write(&plot, format_plot_data(&cells)).map_err(|e| io_err(&plot, e))?;
        println!("plot data -> {}", plot.display());
    }
    Ok(())
}

fn cmd_gradcheck(module: ModuleArg) -> Result<(), CliError> {
    let started = Instant::now();
    let mut reports: Vec<NamedReport> = Vec::new();
    if matches!(module, ModuleArg::All | ModuleArg::Cadm) {
        reports.extend(fidelity::check_cadm()?);
    }
    if matches!(module, ModuleArg::All | ModuleArg::Gcm) {
        reports.extend(fidelity::check_gcm()?);
    }
    if matches!(module, ModuleArg::All | ModuleArg::Head) {
        reports.extend(fidelity::check_head()?);
    }
    let mut failed = false;
    for r in &reports {
        let verdict = if r.report.passed() { "pass" } else { "FAIL" };
        failed |= !r.report.passed();
        println!(
            "{verdict}  {}  checked={} skipped={} max_rel_err={:.3e}",
            r.label, r.report.checked, r.report.skipped, r.report.max_rel_err
        );
    }
    println!(
        "{} coordinates in {:.2}s",
        fidelity::total_checked(&reports),
        started.elapsed().as_secs_f64()
    );
    if failed {
        return Err(CliError::Numeric("gradient audit failed".into()));
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.cmd {
        Command::Synth { out, n, seed, classes, size } => {
            cmd_synth(&out, n, seed, classes, &size)
        }
        Command::Train { config, out } => cmd_train(&config, &out),
        Command::Eval { ckpt, data, report } => cmd_eval(&ckpt, &data, &report),
        Command::Ablate { grid, out } => cmd_ablate(&grid, &out),
        Command::Gradcheck { module } => cmd_gradcheck(module),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // --help/--version are successful exits; everything else is usage.
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}
