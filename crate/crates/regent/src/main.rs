//! Command-line entry point.
//!
//! Subcommands cover the full workflow: generate a synthetic dataset, train
//! an agent, register a single pair, benchmark method variants, and verify
//! analytic gradients. All settings come from one TOML config (see
//! `--help`), with flags overriding file values. Exit codes: 0 success,
//! 1 usage or config error, 2 runtime failure, 3 partial benchmark failure.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};

use clap::{Parser, Subcommand, ValueEnum};

use regent::config::{resolve_range, RunConfig};
use regent::eval::{
    export_report, run_benchmark, tre, AgentRegistrar, MethodVariant, Registrar, ReportFormat,
    VariantAgent, EVAL_GRID_PER_SIDE,
};
use regent::geometry::{image_center, LatticePose};
use regent::inference::{self, InferenceMode, StopReason};
use regent::landmarks::grid_landmarks;
use regent::nn::{load_checkpoint, run_gradcheck_config, save_checkpoint, AdamHyper, NetworkConfig};
use regent::synthdata::{generate_dataset, load_dataset, save_dataset, ImagePair};
use regent::trainer::{run_a3c, run_sl, SharedParams, TrainReport};

/// Raised by SIGINT/SIGTERM; workers notice it at the next window boundary
/// and the run flushes a final checkpoint before exiting.
static STOP: AtomicBool = AtomicBool::new(false);

extern "C" fn on_interrupt(_sig: libc::c_int) {
    STOP.store(true, Ordering::SeqCst);
}

fn install_interrupt_handler() {
    unsafe {
        libc::signal(libc::SIGINT, on_interrupt as libc::sighandler_t);
        libc::signal(libc::SIGTERM, on_interrupt as libc::sighandler_t);
    }
}

fn config_help() -> String {
    format!(
        "Configuration file keys and their defaults (TOML, selected by --config; \
         flags override file values):\n\n{}",
        RunConfig::default().to_toml()
    )
}

#[derive(Parser)]
#[command(
    name = "regent",
    version,
    about = "Recurrent agent for iterative multimodal 2D image registration"
)]
struct Cli {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Master seed, copied into every section that keeps its own.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Output directory override.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic multimodal dataset (manifest + PGM images).
    #[command(after_help = config_help())]
    GenData {
        /// Number of image pairs; default from the config `pairs` key.
        #[arg(long)]
        pairs: Option<usize>,
        /// Image edge length; default from the config `image_size` key.
        #[arg(long)]
        size: Option<usize>,
    },
    /// Train an agent on the generated dataset.
    #[command(after_help = config_help())]
    Train {
        /// Training algorithm.
        #[arg(long, value_enum)]
        algo: AlgoArg,
        /// Worker thread override for `[train] workers`.
        #[arg(long)]
        workers: Option<usize>,
        /// Episode budget override for `[train] max_episodes`.
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Register one pair under a known perturbation and report the error.
    #[command(after_help = config_help())]
    Register {
        /// Checkpoint file to load the agent from.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Pair id from the dataset manifest.
        #[arg(long)]
        pair_id: String,
        /// Starting misalignment as "tx,ty,scale,angle_deg", each on the
        /// action lattice (tx/ty whole pixels, scale 1+0.05k, angle whole
        /// degrees).
        #[arg(long)]
        perturb: String,
        /// Stopping mode override for `[inference] mode`.
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
    },
    /// Run every configured method variant over the benchmark ranges.
    #[command(after_help = config_help())]
    Benchmark {
        /// Report file format.
        #[arg(long, value_enum, default_value_t = FormatArg::Csv)]
        format: FormatArg,
    },
    /// Verify analytic gradients against finite differences, per layer.
    #[command(after_help = config_help())]
    Gradcheck,
}

#[derive(Clone, Copy, ValueEnum)]
enum AlgoArg {
    A3c,
    Sl,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Greedy,
    Mc,
}

impl From<ModeArg> for InferenceMode {
    fn from(m: ModeArg) -> InferenceMode {
        match m {
            ModeArg::Greedy => InferenceMode::Greedy,
            ModeArg::Mc => InferenceMode::Mc,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Csv,
    JsonLines,
}

/// Command failure with its exit code semantics.
enum CmdError {
    /// Bad flags or config: exit 1.
    Usage(String),
    /// The work itself failed: exit 2.
    Runtime(String),
}

impl CmdError {
    fn code(&self) -> i32 {
        match self {
            CmdError::Usage(_) => 1,
            CmdError::Runtime(_) => 2,
        }
    }

    fn message(&self) -> &str {
        match self {
            CmdError::Usage(m) | CmdError::Runtime(m) => m,
        }
    }
}

fn usage<E: std::fmt::Display>(e: E) -> CmdError {
    CmdError::Usage(e.to_string())
}

fn runtime<E: std::fmt::Display>(e: E) -> CmdError {
    CmdError::Runtime(e.to_string())
}

fn main() {
    std::process::exit(run());
}

fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    install_interrupt_handler();

    let mut cfg = match &cli.config {
        Some(path) => match RunConfig::load(path) {
            Ok(cfg) => cfg,
            Err(e) => {
                eprintln!("error: {e}");
                return 1;
            }
        },
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.apply_seed(seed);
    }
    if let Some(out) = cli.out {
        cfg.out_dir = out;
    }
    if let Err(e) = cfg.validate() {
        eprintln!("error: {e}");
        return 1;
    }

    let result = match cli.cmd {
        Cmd::GenData { pairs, size } => cmd_gen_data(&cfg, pairs, size),
        Cmd::Train {
            algo,
            workers,
            episodes,
        } => cmd_train(&cfg, algo, workers, episodes),
        Cmd::Register {
            checkpoint,
            pair_id,
            perturb,
            mode,
        } => cmd_register(&cfg, &checkpoint, &pair_id, &perturb, mode),
        Cmd::Benchmark { format } => cmd_benchmark(&cfg, format),
        Cmd::Gradcheck => cmd_gradcheck(&cfg),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.code()
        }
    }
}

fn ensure_dir(dir: &Path) -> Result<(), CmdError> {
    std::fs::create_dir_all(dir)
        .map_err(|e| runtime(format!("cannot create directory {}: {e}", dir.display())))
}

fn echo_config(cfg: &RunConfig) -> Result<(), CmdError> {
    ensure_dir(&cfg.out_dir)?;
    cfg.echo_into(&cfg.out_dir).map_err(runtime)?;
    Ok(())
}

fn cmd_gen_data(
    cfg: &RunConfig,
    pairs_flag: Option<usize>,
    size_flag: Option<usize>,
) -> Result<i32, CmdError> {
    let count = pairs_flag.unwrap_or(cfg.pairs);
    let size = size_flag.unwrap_or(cfg.image_size);
    if count == 0 {
        return Err(CmdError::Usage("--pairs must be at least 1".into()));
    }
    if size < 8 {
        return Err(CmdError::Usage(format!("--size {size} is too small")));
    }
    if let Some(dir) = cfg.dataset.parent() {
        if !dir.as_os_str().is_empty() {
            ensure_dir(dir)?;
        }
    }
    let dataset = generate_dataset(cfg.seed, size, count);
    save_dataset(&dataset, cfg.seed, &cfg.dataset).map_err(runtime)?;
    echo_config(cfg)?;
    println!(
        "wrote {count} pairs at {size}x{size} to {}",
        cfg.dataset.display()
    );
    Ok(0)
}

fn load_pairs(cfg: &RunConfig) -> Result<Vec<ImagePair>, CmdError> {
    let (_, pairs) = load_dataset(&cfg.dataset).map_err(|e| {
        runtime(format!(
            "cannot load dataset {}: {e} (run gen-data first?)",
            cfg.dataset.display()
        ))
    })?;
    if pairs.is_empty() {
        return Err(CmdError::Runtime(format!(
            "dataset {} lists no pairs",
            cfg.dataset.display()
        )));
    }
    Ok(pairs)
}

fn cmd_train(
    cfg: &RunConfig,
    algo: AlgoArg,
    workers: Option<usize>,
    episodes: Option<usize>,
) -> Result<i32, CmdError> {
    let pairs = load_pairs(cfg)?;
    let mut tcfg = cfg.train.clone();
    if let Some(w) = workers {
        tcfg.workers = w;
    }
    if let Some(n) = episodes {
        tcfg.max_episodes = n;
    }
    if tcfg.log_path.is_none() {
        tcfg.log_path = Some(cfg.out_dir.join("progress.log"));
    }
    if tcfg.checkpoint_every > 0 && tcfg.checkpoint_dir.is_none() {
        tcfg.checkpoint_dir = Some(cfg.out_dir.join("checkpoints"));
    }
    if let Some(dir) = &tcfg.checkpoint_dir {
        ensure_dir(dir)?;
    }
    echo_config(cfg)?;

    let shared = SharedParams::new(&cfg.network, AdamHyper::with_lr(tcfg.lr), tcfg.seed)
        .map_err(runtime)?;
    let report = match algo {
        AlgoArg::A3c => run_a3c(&tcfg, &pairs, &shared, &STOP),
        AlgoArg::Sl => run_sl(&tcfg, &pairs, &shared, &STOP),
    }
    .map_err(runtime)?;

    let final_path = cfg.out_dir.join("final.ckpt");
    save_checkpoint(&final_path, &shared.to_checkpoint()).map_err(runtime)?;
    print_train_summary(&report, &final_path);
    if STOP.load(Ordering::SeqCst) {
        println!("interrupted; latest state flushed to {}", final_path.display());
    }
    Ok(0)
}

fn print_train_summary(report: &TrainReport, final_path: &Path) {
    println!(
        "trained {} episodes in {:.1}s: terminal rate (last 100) {:.2}, mean length {:.1}",
        report.completed(),
        report.wall_seconds,
        report.terminal_rate_last(100),
        report.mean_episode_len()
    );
    println!("final checkpoint: {}", final_path.display());
}

/// Parses "tx,ty,scale,angle_deg" onto the action lattice, naming the field
/// on failure.
fn parse_perturb(text: &str) -> Result<LatticePose, String> {
    let parts: Vec<&str> = text.split(',').collect();
    if parts.len() != 4 {
        return Err(format!(
            "--perturb wants four comma-separated values tx,ty,scale,angle_deg, got {:?}",
            text
        ));
    }
    let names = ["tx", "ty", "scale", "angle_deg"];
    let mut vals = [0.0f64; 4];
    for (i, (name, part)) in names.iter().zip(&parts).enumerate() {
        vals[i] = part
            .trim()
            .parse()
            .map_err(|_| format!("cannot parse {name} value {:?}", part.trim()))?;
    }
    let lattice_steps = |value: f64, step: f64, offset: f64, name: &str| -> Result<i64, String> {
        let k = (value - offset) / step;
        if (k - k.round()).abs() > 1e-6 {
            return Err(format!(
                "{name} value {value} is off the action lattice (needs {offset} + k*{step})"
            ));
        }
        Ok(k.round() as i64)
    };
    let tx = lattice_steps(vals[0], 1.0, 0.0, "tx")?;
    let ty = lattice_steps(vals[1], 1.0, 0.0, "ty")?;
    let scale = lattice_steps(vals[2], 0.05, 1.0, "scale")?;
    let angle = lattice_steps(vals[3], 1.0, 0.0, "angle_deg")?;
    Ok(LatticePose::from_steps(tx, ty, angle, scale))
}

fn stop_label(stop: &StopReason) -> &'static str {
    match stop {
        StopReason::ValueThreshold => "value_threshold",
        StopReason::McAggregated => "mc_aggregated",
        StopReason::MaxSteps => "max_steps",
    }
}

fn cmd_register(
    cfg: &RunConfig,
    checkpoint: &Path,
    pair_id: &str,
    perturb_text: &str,
    mode: Option<ModeArg>,
) -> Result<i32, CmdError> {
    let perturb = parse_perturb(perturb_text).map_err(CmdError::Usage)?;
    let pairs = load_pairs(cfg)?;
    let pair = pairs.iter().find(|p| p.id == pair_id).ok_or_else(|| {
        let known: Vec<&str> = pairs.iter().map(|p| p.id.as_str()).collect();
        CmdError::Usage(format!("unknown pair id {pair_id:?}; dataset has {known:?}"))
    })?;
    let ckpt = load_checkpoint(checkpoint)
        .map_err(|e| runtime(format!("cannot load checkpoint {}: {e}", checkpoint.display())))?;

    let mut icfg = cfg.inference.clone();
    if let Some(m) = mode {
        icfg.mode = m.into();
    }
    let result =
        inference::register(&ckpt.params, &ckpt.config, pair, perturb, &icfg).map_err(runtime)?;

    let (w, h) = (pair.moving_aligned.width(), pair.moving_aligned.height());
    let (cx, cy) = image_center(w, h);
    let gt = perturb.to_transform().invert().about_pivot(cx, cy);
    let pred = result.transform.about_pivot(cx, cy);
    let points = grid_landmarks(w, h, EVAL_GRID_PER_SIDE);
    let err = tre(&pred, &gt, &points).map_err(runtime)?;

    let t = &result.transform;
    println!(
        "recovered: tx={:.4} ty={:.4} scale={:.4} angle_deg={:.4}",
        t.tx, t.ty, t.scale, t.angle_deg
    );
    println!("steps={} stop={}", result.steps, stop_label(&result.stop));
    if let Some(mc) = &result.mc {
        println!(
            "mc: trajectories={} fallback={}",
            mc.trajectories, mc.unweighted_fallback
        );
    }
    println!("tre={err:.4}");
    Ok(0)
}

fn cmd_benchmark(cfg: &RunConfig, format: FormatArg) -> Result<i32, CmdError> {
    if cfg.benchmark.variants.is_empty() {
        return Err(CmdError::Usage(
            "no [[benchmark.variant]] entries in the config".into(),
        ));
    }
    let pairs = load_pairs(cfg)?;
    let ranges: Vec<(String, _)> = cfg
        .benchmark
        .ranges
        .iter()
        .map(|name| {
            let range = resolve_range(name).expect("validated range name");
            (name.clone(), range)
        })
        .collect();

    let agents: Vec<VariantAgent> = cfg
        .benchmark
        .variants
        .iter()
        .map(|spec| {
            let variant = MethodVariant::new(spec.trainer, spec.reward, spec.mode);
            let registrar: Result<Box<dyn Registrar>, String> = load_checkpoint(&spec.checkpoint)
                .map(|ckpt| {
                    let mut icfg = cfg.inference.clone();
                    icfg.mode = spec.mode;
                    if let Some(trs) = spec.trs {
                        icfg.trs = trs;
                    }
                    Box::new(AgentRegistrar::new(ckpt.params, ckpt.config, icfg))
                        as Box<dyn Registrar>
                })
                .map_err(|e| format!("checkpoint {}: {e}", spec.checkpoint.display()));
            VariantAgent { variant, registrar }
        })
        .collect();

    let table = run_benchmark(
        &agents,
        &pairs,
        &ranges,
        cfg.benchmark.n_perturb_per_pair,
        cfg.seed,
    )
    .map_err(runtime)?;

    echo_config(cfg)?;
    let (ext, report_format) = match format {
        FormatArg::Csv => ("csv", ReportFormat::Csv),
        FormatArg::JsonLines => ("jsonl", ReportFormat::JsonLines),
    };
    let report_path = cfg.out_dir.join(format!("{}.{ext}", cfg.benchmark.report_stem));
    export_report(&table, &report_path, report_format).map_err(runtime)?;

    for cell in &table.cells {
        println!(
            "{} {}: n={} mean={:.4} median={:.4} p90={:.4} initial={:.4}",
            cell.variant,
            cell.range,
            cell.stats.n,
            cell.stats.mean,
            cell.stats.median,
            cell.stats.p90,
            cell.stats.initial_mean
        );
    }
    println!("report: {}", report_path.display());
    if table.is_complete() {
        Ok(0)
    } else {
        for f in &table.failures {
            eprintln!("failed cell {} {}: {}", f.variant, f.range, f.detail);
        }
        eprintln!("partial failure: {} cells failed", table.failures.len());
        Ok(3)
    }
}

fn cmd_gradcheck(cfg: &RunConfig) -> Result<i32, CmdError> {
    let net = NetworkConfig::probe16();
    let report = run_gradcheck_config(&net, cfg.seed).map_err(runtime)?;
    for (block, err) in &report.per_block {
        println!(
            "{} {block}: max relative error {err:.3e}",
            if *err < 1e-4 { "PASS" } else { "FAIL" }
        );
    }
    println!("{}", report.summary());
    if report.pass {
        Ok(0)
    } else {
        Err(CmdError::Runtime(
            "analytic gradients disagree with finite differences".into(),
        ))
    }
}

// Keeps `Cli::command()` exercised so help generation breaks loudly at test
// time rather than at a user's terminal.
#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn perturb_strings_parse_onto_the_lattice() {
        let pose = parse_perturb("3,-2,1.1,5").unwrap();
        assert_eq!(pose, LatticePose::from_steps(3, -2, 5, 2));
        let pose = parse_perturb("0,0,1,0").unwrap();
        assert_eq!(pose, LatticePose::identity());
        assert_eq!(pose.to_transform(), regent::geometry::SimilarityTransform::identity());
    }

    #[test]
    fn perturb_errors_name_the_offending_field() {
        assert!(parse_perturb("1,2,3").unwrap_err().contains("four"));
        assert!(parse_perturb("a,0,1,0").unwrap_err().contains("tx"));
        assert!(parse_perturb("0,b,1,0").unwrap_err().contains("ty"));
        assert!(parse_perturb("0,0,1.03,0").unwrap_err().contains("scale"));
        assert!(parse_perturb("0,0,1,0.5").unwrap_err().contains("angle_deg"));
    }

    #[test]
    fn help_text_lists_config_keys_with_defaults() {
        let help = config_help();
        for key in ["window_len", "episodes_per_pair", "terminal_threshold", "n_mc", "trs"] {
            assert!(help.contains(key), "missing {key}");
        }
    }
}
