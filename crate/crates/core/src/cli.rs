//! The `reinpatch` command line: train, export-patcher, eval, patch and plot.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::adaptation::{expected_k_boundaries, topk_boundaries, StreamState};
use crate::config::RunConfig;
use crate::data::{load_csv, Split};
use crate::error::{Error, Result};
use crate::eval::{emit_table, evaluate, write_results_csv, ResultRow};
use crate::persistence::{load_checkpoint, load_patcher, save_checkpoint, save_patcher};
use crate::pipeline::{build_trainer, evaluate_split, load_dataset, resume, run_patcher, split_windows};
use crate::policy::{boundary_logit, PolicyMode};
use crate::trainer::write_metrics_csv;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

pub const OUT_ENV: &str = "REINPATCH_OUT";

#[derive(Debug, Parser)]
#[command(name = "reinpatch", version, about = "Learned adaptive patching for time-series forecasting")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a policy and backbone (or a baseline) and write a checkpoint.
    Train(TrainArgs),
    /// Extract the policy of a checkpoint as a standalone patcher file.
    ExportPatcher(ExportArgs),
    /// Evaluate on the test split, one row per seed.
    Eval(EvalArgs),
    /// Write boundary indices for consecutive windows of a series.
    Patch(PatchArgs),
    /// Render a series with boundary overlays as SVG.
    Plot(PlotArgs),
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Flat `section.key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one key, e.g. `--set train.lr_policy=0.001`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Defaults to $REINPATCH_OUT, then `./reinpatch-out`.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
                RunConfig::from_toml(&text)?
            }
            None => RunConfig::default(),
        };
        for kv in &self.overrides {
            cfg.set(kv)?;
        }
        if let Some(s) = self.seed {
            cfg.train.seed = s;
        }
        Ok(cfg)
    }

    fn out_dir(&self) -> Result<PathBuf> {
        let dir = self
            .out_dir
            .clone()
            .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("reinpatch-out"));
        fs::create_dir_all(&dir)?;
        Ok(dir)
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: ConfigArgs,
    /// Continue from this checkpoint instead of initializing fresh models.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: ConfigArgs,
    /// Evaluate a trained checkpoint as-is.
    #[arg(long, conflicts_with = "patcher")]
    pub checkpoint: Option<PathBuf>,
    /// `reinpatch`, `static`, `random`, `variance`, or a patcher file. For
    /// everything but a checkpoint a fresh backbone is trained per seed.
    #[arg(long)]
    pub patcher: Option<String>,
    /// Keep a loaded patcher file frozen (zero-shot reuse).
    #[arg(long)]
    pub frozen: bool,
    /// CSV to evaluate on; overrides `data.path`.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub lookback: Option<usize>,
    #[arg(long)]
    pub horizon: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub seeds: Vec<u64>,
    #[arg(long)]
    pub patch_size: Option<usize>,
    /// Rate for the random and variance patchers.
    #[arg(long)]
    pub rate: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PatchMode {
    Contextual,
    Causal,
}

#[derive(Debug, Args)]
pub struct PatchArgs {
    #[arg(long)]
    pub patcher: PathBuf,
    #[arg(long)]
    pub series: PathBuf,
    /// Column to patch; defaults to the first value column.
    #[arg(long)]
    pub column: Option<String>,
    /// Target compression rate.
    #[arg(long, conflicts_with = "auto", required_unless_present = "auto")]
    pub rate: Option<f64>,
    /// Use the expected boundary count instead of a rate (contextual only).
    #[arg(long)]
    pub auto: bool,
    #[arg(long, value_enum, default_value = "contextual")]
    pub mode: PatchMode,
    /// Window length; defaults to the patcher's context limit.
    #[arg(long)]
    pub length: Option<usize>,
    /// Sliding logit window for causal thresholding.
    #[arg(long, default_value_t = 64)]
    pub stream_window: usize,
    /// Output file; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    #[arg(long)]
    pub series: PathBuf,
    #[arg(long)]
    pub column: Option<String>,
    #[arg(long)]
    pub boundaries: PathBuf,
    /// Window length used when the boundary file was written.
    #[arg(long, default_value_t = 96)]
    pub length: usize,
    #[arg(long)]
    pub out_dir: PathBuf,
}

/// Exit code for a library error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidArgument(_) | Error::Config(_) | Error::UnknownKey(_) | Error::Frozen(_) => EXIT_USAGE,
        Error::NonFinite(_) => EXIT_NUMERIC,
        _ => EXIT_DATA,
    }
}

/// Parse `args` (including the program name), run, and return the exit code.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => cmd_train(&a),
        Command::ExportPatcher(a) => cmd_export_patcher(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Patch(a) => cmd_patch(&a),
        Command::Plot(a) => cmd_plot(&a),
    }
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes)?;
    Ok(())
}

pub fn cmd_train(a: &TrainArgs) -> Result<()> {
    let cfg = a.common.load()?;
    let out = a.common.out_dir()?;
    let ds = load_dataset(&cfg.data)?;
    let mut trainer = match &a.resume {
        Some(p) => load_checkpoint(p)?,
        None => build_trainer(&cfg)?,
    };
    let ckpt = out.join("checkpoint.rpf");
    write_file(&out.join("config.toml"), cfg.to_flat_toml()?)?;
    let history = resume(&mut trainer, &cfg, &ds, |t| save_checkpoint(t, &ckpt))?;
    save_checkpoint(&trainer, &ckpt)?;

    let mut metrics = Vec::new();
    write_metrics_csv(&mut metrics, &history)?;
    write_file(&out.join("metrics.csv"), metrics)?;

    let report = evaluate_split(&trainer, &cfg, &ds, Split::Test)?;
    let row = ResultRow {
        method: run_patcher(&trainer, &cfg)?.name().to_string(),
        dataset: cfg.data.name.clone(),
        lookback: cfg.backbone.lookback,
        horizon: cfg.backbone.horizon,
        seed: cfg.train.seed,
        mse: report.mse,
        mae: report.mae,
    };
    let mut results = Vec::new();
    write_results_csv(&mut results, std::slice::from_ref(&row))?;
    write_file(&out.join("results.csv"), results)?;
    for (step, msg) in trainer.skipped() {
        eprintln!("skipped step {step}: {msg}");
    }
    println!(
        "trained {} steps; test mse {:.6} mae {:.6}; artifacts in {}",
        trainer.step(),
        report.mse,
        report.mae,
        out.display()
    );
    Ok(())
}

pub fn cmd_export_patcher(a: &ExportArgs) -> Result<()> {
    let trainer = load_checkpoint(&a.checkpoint)?;
    save_patcher(&trainer.policy, &a.out)?;
    println!("wrote {}", a.out.display());
    Ok(())
}

pub fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let mut cfg = a.common.load()?;
    let out = a.common.out_dir()?;
    if let Some(p) = &a.dataset {
        cfg.data.path = p.display().to_string();
        if cfg.data.name == "toy" {
            cfg.data.name = p.file_stem().map_or("data".into(), |s| s.to_string_lossy().into_owned());
        }
    }
    if let Some(l) = a.lookback {
        cfg.backbone.lookback = l;
        cfg.policy.context_limit = cfg.policy.context_limit.max(l);
    }
    if let Some(h) = a.horizon {
        cfg.backbone.horizon = h;
    }
    if let Some(ps) = a.patch_size {
        cfg.patcher.patch_size = ps;
    }
    if let Some(r) = a.rate {
        cfg.patcher.rate = r;
    }
    match a.patcher.as_deref() {
        None => {}
        Some(kind @ ("reinpatch" | "static" | "random" | "variance")) => cfg.patcher.kind = kind.to_string(),
        Some(path) => {
            cfg.patcher.kind = "reinpatch".into();
            cfg.patcher.pretrained = path.to_string();
            if !a.frozen {
                return Err(Error::Config("patcher files are only reused frozen; pass --frozen".into()));
            }
            let p = load_patcher(path, true)?;
            cfg.policy = p.config().clone();
        }
    }
    let seeds = if a.seeds.is_empty() { vec![cfg.train.seed] } else { a.seeds.clone() };
    let ds = load_dataset(&cfg.data)?;

    let mut rows = Vec::with_capacity(seeds.len());
    for &seed in &seeds {
        cfg.train.seed = seed;
        let report = match &a.checkpoint {
            Some(path) => {
                let trainer = load_checkpoint(path)?;
                cfg.backbone = trainer.backbone.config().clone();
                let windows = split_windows(&cfg, &ds, Split::Test)?;
                evaluate(&trainer.backbone, run_patcher(&trainer, &cfg)?, &trainer.compression, &windows, seed)?
            }
            None => {
                let mut trainer = build_trainer(&cfg)?;
                resume(&mut trainer, &cfg, &ds, |_| Ok(()))?;
                evaluate_split(&trainer, &cfg, &ds, Split::Test)?
            }
        };
        let method = match (&a.checkpoint, cfg.patcher.pretrained.is_empty()) {
            (Some(_), _) => "checkpoint".to_string(),
            (None, false) => "reinpatch-frozen".to_string(),
            (None, true) => cfg.patcher.kind.clone(),
        };
        rows.push(ResultRow {
            method,
            dataset: cfg.data.name.clone(),
            lookback: cfg.backbone.lookback,
            horizon: cfg.backbone.horizon,
            seed,
            mse: report.mse,
            mae: report.mae,
        });
    }
    let mut buf = Vec::new();
    write_results_csv(&mut buf, &rows)?;
    write_file(&out.join("results.csv"), buf)?;
    let (csv, text) = emit_table(&rows)?;
    write_file(&out.join("table.csv"), csv)?;
    write_file(&out.join("table.txt"), &text)?;
    print!("{text}");
    Ok(())
}

fn pick_column(table: &crate::data::SeriesTable, column: Option<&str>) -> Result<Vec<f64>> {
    match column {
        Some(name) => table
            .channel(name)
            .map(<[f64]>::to_vec)
            .ok_or_else(|| Error::InvalidArgument(format!("no column `{name}`"))),
        None => Ok(table.channels[0].clone()),
    }
}

/// Boundary indices per window, window-local, in file order.
pub fn patch_series(
    policy: &crate::policy::PatchPolicy,
    series: &[f64],
    length: usize,
    rate: Option<f64>,
    mode: PatchMode,
    stream_window: usize,
) -> Result<Vec<Vec<usize>>> {
    if length < 1 || length > policy.config().context_limit {
        return Err(Error::InvalidArgument(format!(
            "window length {length} outside 1..={}",
            policy.config().context_limit
        )));
    }
    let mut stream = match mode {
        PatchMode::Causal => {
            if policy.config().mode != PolicyMode::Causal {
                return Err(Error::InvalidArgument("causal patching needs a causal-mode patcher".into()));
            }
            let r = rate.ok_or_else(|| Error::InvalidArgument("causal patching needs --rate".into()))?;
            Some(StreamState::new(r, stream_window)?)
        }
        PatchMode::Contextual => None,
    };
    let mut lines = Vec::new();
    for window in series.chunks_exact(length) {
        let logits = boundary_logit(&policy.forward(window)?, 1)?;
        let flags = match (&mut stream, rate) {
            (Some(s), _) => logits.iter().map(|&l| s.decide(l)).collect::<Result<Vec<u8>>>()?,
            (None, Some(r)) => topk_boundaries(&logits, r)?,
            (None, None) => expected_k_boundaries(&logits)?,
        };
        lines.push(flags.iter().enumerate().filter(|(_, &f)| f == 1).map(|(i, _)| i).collect());
    }
    Ok(lines)
}

pub fn cmd_patch(a: &PatchArgs) -> Result<()> {
    let policy = load_patcher(&a.patcher, true)?;
    let table = load_csv(&a.series)?;
    let series = pick_column(&table, a.column.as_deref())?;
    let length = a.length.unwrap_or(policy.config().context_limit);
    let lines = patch_series(&policy, &series, length, a.rate, a.mode, a.stream_window)?;
    let mut text = String::new();
    for l in &lines {
        let parts: Vec<String> = l.iter().map(usize::to_string).collect();
        let _ = writeln!(text, "{}", parts.join(","));
    }
    match &a.out {
        Some(p) => write_file(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

pub fn read_boundary_file(text: &str) -> Result<Vec<Vec<usize>>> {
    text.lines()
        .enumerate()
        .map(|(i, line)| {
            let line = line.trim();
            if line.is_empty() {
                return Ok(Vec::new());
            }
            line.split(',')
                .map(|f| {
                    f.trim().parse().map_err(|_| Error::Ingest {
                        row: i + 1,
                        message: format!("bad boundary index `{f}`"),
                    })
                })
                .collect()
        })
        .collect()
}

/// One polyline for the series and one vertical line per boundary.
pub fn render_svg(series: &[f64], boundaries: &[usize]) -> String {
    const W: f64 = 800.0;
    const H: f64 = 240.0;
    const PAD: f64 = 10.0;
    let n = series.len().max(2) as f64;
    let lo = series.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = series.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let x = |i: f64| PAD + i / (n - 1.0) * (W - 2.0 * PAD);
    let y = |v: f64| H - PAD - (v - lo) / span * (H - 2.0 * PAD);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    for &b in boundaries {
        // A boundary closes its step, so the line sits half a step to the right.
        let bx = x(b as f64 + 0.5);
        let _ = writeln!(
            s,
            r#"<line x1="{bx:.2}" y1="{PAD}" x2="{bx:.2}" y2="{:.2}" stroke="crimson" stroke-width="1"/>"#,
            H - PAD
        );
    }
    let points: Vec<String> = series
        .iter()
        .enumerate()
        .map(|(i, &v)| format!("{:.2},{:.2}", x(i as f64), y(v)))
        .collect();
    let _ = writeln!(
        s,
        r#"<polyline points="{}" fill="none" stroke="steelblue" stroke-width="1.5"/>"#,
        points.join(" ")
    );
    s.push_str("</svg>\n");
    s
}

pub fn cmd_plot(a: &PlotArgs) -> Result<()> {
    let table = load_csv(&a.series)?;
    let series = pick_column(&table, a.column.as_deref())?;
    let lines = read_boundary_file(&fs::read_to_string(&a.boundaries)?)?;
    if a.length < 1 {
        return Err(Error::InvalidArgument("--length must be >= 1".into()));
    }
    fs::create_dir_all(&a.out_dir)?;
    for (w, idx) in lines.iter().enumerate() {
        let start = w * a.length;
        let window = series.get(start..start + a.length).ok_or_else(|| {
            Error::InvalidInput(format!("boundary line {} points past the end of the series", w + 1))
        })?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= a.length) {
            return Err(Error::InvalidInput(format!("boundary index {bad} outside window {}", w + 1)));
        }
        write_file(&a.out_dir.join(format!("window_{w:04}.svg")), render_svg(window, idx))?;
    }
    println!("wrote {} plots to {}", lines.len(), a.out_dir.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn svg_counts_lines() {
        let x: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let s = render_svg(&x, &[]);
        assert_eq!(s.matches("<polyline").count(), 1);
        assert_eq!(s.matches("<line").count(), 0);
        let s = render_svg(&x, &[2, 5, 9]);
        assert_eq!(s.matches("<line").count(), 3);
        assert_eq!(s, render_svg(&x, &[2, 5, 9]));
        assert!(render_svg(&[3.0; 4], &[1]).contains("<polyline"));
    }

    #[test]
    fn boundary_file_parsing() {
        assert_eq!(read_boundary_file("1,5\n\n7\n").unwrap(), vec![vec![1, 5], vec![], vec![7]]);
        assert!(matches!(read_boundary_file("1,x"), Err(Error::Ingest { row: 1, .. })));
    }

    #[test]
    fn usage_errors_exit_2() {
        assert_eq!(run_from(["reinpatch", "frobnicate"]), EXIT_USAGE);
        assert_eq!(run_from(["reinpatch", "train", "--bogus"]), EXIT_USAGE);
        assert_eq!(run_from(["reinpatch", "train", "--set", "train.nope=1"]), EXIT_USAGE);
    }
}
