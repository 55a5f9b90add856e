//! `fipo`: train, evaluate, audit and ablate policy-gradient runs.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fipo_core::checkpoint;
use fipo_core::config::RunConfig;
use fipo_core::env::{sample_task, TaskFamily};
use fipo_core::future_kl::INFINITE_HORIZON;
use fipo_core::gradcheck::{audit_loss, AuditConfig};
use fipo_core::objective::LossKind;
use fipo_core::oracle::{run_sweep, SweepConfig};
use fipo_core::plot::line_chart_svg;
use fipo_core::trainer::{evaluate, read_metrics_jsonl, rows_to_csv, run_training, TrainState};
use fipo_core::{FipoError, SCHEMA_VERSION};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const EXIT_VALIDATION: u8 = 1;
const EXIT_RUNTIME: u8 = 2;
const EXIT_CHECK_FAILED: u8 = 3;
const CONFIG_DIR_VAR: &str = "FIPO_CONFIG_DIR";

#[derive(Parser)]
#[command(name = "fipo", version, about = "Future-KL policy optimization on synthetic reasoning tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a policy and write metrics, checkpoints and a summary.
    Train(TrainArgs),
    /// Evaluate a checkpoint with mean@k, consensus@k and pass@k.
    Eval(EvalArgs),
    /// Finite-difference audit of the configured loss gradient.
    GradCheck(GradCheckArgs),
    /// Compare the chunked Future-KL kernel with the quadratic reference.
    OracleCheck(OracleArgs),
    /// One training run per value of a hyperparameter.
    Ablate(AblateArgs),
    /// Render metric series as SVG line charts plus a combined CSV.
    Plot(PlotArgs),
    /// Print the resolved run config as JSON.
    PrintConfig(ConfigArgs),
    /// Print sampled task instances as JSON lines.
    DumpTasks(DumpTasksArgs),
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Config file. Relative names are also looked up in $FIPO_CONFIG_DIR.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides loss.kind.
    #[arg(long)]
    loss: Option<LossKind>,
    /// Overrides trainer.seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides trainer.total_steps.
    #[arg(long)]
    steps: Option<u64>,
    /// Any config key, as section.key=value. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Output directory.
    #[arg(long, default_value = "run")]
    out: PathBuf,
    /// Continue from a checkpoint; its config is used and flags still apply.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Suppress per-step progress lines.
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct EvalArgs {
    checkpoint: PathBuf,
    #[arg(long)]
    instances: Option<usize>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct GradCheckArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Number of parameter coordinates to probe.
    #[arg(long, default_value_t = 120)]
    coords: usize,
    /// Finite-difference step.
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    #[arg(long, default_value_t = 0)]
    audit_seed: u64,
}

#[derive(Args)]
struct OracleArgs {
    #[arg(long, default_value_t = 1000)]
    cases: usize,
    #[arg(long, default_value_t = 8)]
    max_batch: usize,
    #[arg(long, default_value_t = 1024)]
    max_len: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-9)]
    tolerance: f64,
    /// Test hook: corrupt one chunked output per case by this amount.
    #[arg(long, hide = true, num_args = 0..=1, default_missing_value = "1e-6")]
    inject_fault: Option<f64>,
}

#[derive(Args)]
struct AblateArgs {
    /// tau, f_clip, filtering or clip_high.
    axis: String,
    /// Comma-separated values. tau accepts `inf`; f_clip takes `lo:hi`;
    /// filtering takes on/off.
    values: String,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, default_value = "ablation")]
    out: PathBuf,
}

#[derive(Args)]
struct PlotArgs {
    metrics: PathBuf,
    /// Metric keys; `.` may stand for `/` (response_length.mean).
    #[arg(required = true)]
    keys: Vec<String>,
    #[arg(long, default_value = "plots")]
    out: PathBuf,
}

#[derive(Args)]
struct DumpTasksArgs {
    #[arg(long, default_value = "modsum")]
    family: TaskFamily,
    #[arg(long, default_value_t = 1)]
    difficulty: u32,
    #[arg(long, default_value_t = 10)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

enum Failure {
    Error(FipoError),
    Usage(String),
    CheckFailed,
}

impl From<FipoError> for Failure {
    fn from(e: FipoError) -> Self {
        Failure::Error(e)
    }
}

type CmdResult = std::result::Result<(), Failure>;

fn exit_code(e: &FipoError) -> u8 {
    match e {
        FipoError::Input(_) | FipoError::Config { .. } | FipoError::Json(_) | FipoError::Checkpoint(_) => {
            EXIT_VALIDATION
        }
        FipoError::Io { .. }
        | FipoError::DegenerateGroup { .. }
        | FipoError::TrainingStall { .. }
        | FipoError::Numeric { .. } => EXIT_RUNTIME,
    }
}

fn resolve_config_path(path: &Path) -> PathBuf {
    if path.exists() || path.is_absolute() {
        return path.to_path_buf();
    }
    match std::env::var_os(CONFIG_DIR_VAR) {
        Some(dir) if Path::new(&dir).join(path).exists() => Path::new(&dir).join(path),
        _ => path.to_path_buf(),
    }
}

fn apply_overrides(mut cfg: RunConfig, args: &ConfigArgs) -> Result<RunConfig, Failure> {
    if let Some(kind) = args.loss {
        cfg.loss.kind = kind;
    }
    if let Some(seed) = args.seed {
        cfg.trainer.seed = seed;
    }
    if let Some(steps) = args.steps {
        cfg.trainer.total_steps = steps;
    }
    let pairs = args
        .overrides
        .iter()
        .map(|kv| {
            kv.split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| Failure::Usage(format!("--set expects KEY=VALUE, got `{kv}`")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    cfg.apply_overrides(pairs)?;
    Ok(cfg)
}

fn load_config(args: &ConfigArgs) -> Result<RunConfig, Failure> {
    let base = match &args.config {
        // an unreadable config file is a validation failure, not a runtime one
        Some(p) => RunConfig::load(&resolve_config_path(p)).map_err(|e| match e {
            FipoError::Io { .. } => Failure::Usage(e.to_string()),
            other => Failure::Error(other),
        })?,
        None => RunConfig::default(),
    };
    apply_overrides(base, args)
}

fn cmd_train(args: TrainArgs) -> CmdResult {
    let state = match &args.resume {
        Some(path) => {
            let mut state = checkpoint::load(path)?;
            state.config = apply_overrides(state.config, &args.config)?;
            state
        }
        None => TrainState::new(load_config(&args.config)?)?,
    };
    let quiet = args.quiet;
    let (_, summary) = run_training(state, &args.out, |m| {
        if quiet {
            return;
        }
        let eval = m.eval_mean_at_k.map(|v| format!(" eval/mean@k={v:.3}")).unwrap_or_default();
        eprintln!(
            "step {:>4} loss={:+.4} acc={:.3} len={:.1} kl={:.2e} sampled={:.2}{eval}",
            m.step, m.loss, m.reward_accuracy, m.length_mean, m.policy_kl, m.sampled_batches
        );
    })?;
    println!("{}", serde_json::to_string_pretty(&summary).map_err(FipoError::from)?);
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> CmdResult {
    let state = checkpoint::load(&args.checkpoint)?;
    let cfg = &state.config;
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let metrics = evaluate(
        &state.params,
        &cfg.env.sampler(),
        args.instances.unwrap_or(cfg.trainer.eval_instances),
        args.samples.unwrap_or(cfg.trainer.eval_samples),
        &cfg.eval_generation(),
        &mut rng,
    )?;
    println!("{}", serde_json::to_string(&metrics).map_err(FipoError::from)?);
    Ok(())
}

fn cmd_grad_check(args: GradCheckArgs) -> CmdResult {
    let cfg = load_config(&args.config)?;
    let mut audit = AuditConfig::new(cfg.loss.kind);
    audit.clip = cfg.loss.clip();
    audit.fipo = cfg.fipo.clone();
    audit.dims = cfg.policy;
    audit.coords = args.coords;
    audit.step = args.step;
    audit.seed = args.audit_seed;
    let start = std::time::Instant::now();
    let report = audit_loss(&audit)?;
    let passed = report.max_rel_error <= args.tolerance;
    println!(
        "loss={} coords={} max_rel_error={:.3e} clip_fraction={:.3} elapsed={:.2}s {}",
        report.kind.name(),
        report.coords,
        report.max_rel_error,
        report.policy_clip_fraction,
        start.elapsed().as_secs_f64(),
        if passed { "PASS" } else { "FAIL" }
    );
    if passed {
        Ok(())
    } else {
        if let Some(w) = &report.worst {
            eprintln!(
                "worst coordinate {} ({}): analytic {:e} numeric {:e}",
                w.index, w.block, w.analytic, w.numeric
            );
        }
        Err(Failure::CheckFailed)
    }
}

fn cmd_oracle_check(args: OracleArgs) -> CmdResult {
    let cfg = SweepConfig {
        cases: args.cases,
        max_batch: args.max_batch,
        max_len: args.max_len,
        seed: args.seed,
        tolerance: args.tolerance,
        inject_fault: args.inject_fault,
    };
    let start = std::time::Instant::now();
    let report = run_sweep(&cfg)?;
    println!(
        "cases={} max_dev={:.3e} tolerance={:e} elapsed={:.2}s {}",
        report.cases,
        report.max_dev,
        cfg.tolerance,
        start.elapsed().as_secs_f64(),
        if report.passed { "PASS" } else { "FAIL" }
    );
    if report.passed {
        Ok(())
    } else {
        if let Some(w) = &report.worst {
            eprintln!(
                "worst case: batch={} len={} chunk={} tau={}",
                w.batch, w.len, w.chunk_size, w.tau
            );
        }
        Err(Failure::CheckFailed)
    }
}

/// Maps one ablation value to `(label, key, json value)` config overrides.
fn ablation_overrides(axis: &str, value: &str) -> Result<Vec<(String, String)>, Failure> {
    let v = value.trim();
    let bad = || Failure::Usage(format!("invalid {axis} value `{v}`"));
    Ok(match axis {
        "tau" => {
            let tau = if v.eq_ignore_ascii_case("inf") {
                INFINITE_HORIZON
            } else {
                v.parse::<f64>().map_err(|_| bad())?
            };
            vec![("fipo.tau".into(), tau.to_string())]
        }
        "f_clip" => {
            let (lo, hi) = v.split_once(':').ok_or_else(bad)?;
            let lo: f64 = lo.parse().map_err(|_| bad())?;
            let hi: f64 = hi.parse().map_err(|_| bad())?;
            vec![("fipo.f_clip".into(), format!("[{lo:?},{hi:?}]"))]
        }
        "filtering" => {
            let on = match v {
                "on" | "true" => true,
                "off" | "false" => false,
                _ => return Err(bad()),
            };
            vec![("fipo.filtering".into(), on.to_string())]
        }
        "clip_high" => {
            let eps: f64 = v.parse().map_err(|_| bad())?;
            vec![("loss.eps_high".into(), eps.to_string())]
        }
        other => {
            return Err(Failure::Usage(format!(
                "unknown ablation axis `{other}` (expected tau, f_clip, filtering or clip_high)"
            )))
        }
    })
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn cmd_ablate(args: AblateArgs) -> CmdResult {
    let base = load_config(&args.config)?;
    let values: Vec<&str> = args.values.split(',').filter(|v| !v.trim().is_empty()).collect();
    if values.is_empty() {
        return Err(Failure::Usage("no ablation values given".into()));
    }
    // validate every value before spending time on training
    let mut runs = Vec::new();
    for v in &values {
        let mut cfg = base.clone();
        for (k, val) in ablation_overrides(&args.axis, v)? {
            cfg.set(&k, &val)?;
        }
        runs.push((v.trim().to_string(), cfg));
    }
    std::fs::create_dir_all(&args.out).map_err(|e| FipoError::Io {
        path: args.out.clone(),
        source: e,
    })?;
    let mut csv = String::from(
        "schema_version,axis,value,loss_kind,steps_run,peak_mean_at_k,peak_step,final_mean_at_k,mean_response_length,mean_entropy\n",
    );
    for (label, cfg) in runs {
        let dir = args.out.join(format!("{}={}", args.axis, label.replace([':', '/'], "_")));
        eprintln!("ablate {}={} -> {}", args.axis, label, dir.display());
        let (_, s) = run_training(TrainState::new(cfg)?, &dir, |_| {})?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        csv.push_str(&format!(
            "{SCHEMA_VERSION},{},{},{},{},{},{},{},{},{}\n",
            csv_field(&args.axis),
            csv_field(&label),
            s.loss_kind.name(),
            s.steps_run,
            opt(s.peak_eval.map(|e| e.mean_at_k)),
            s.peak_step.map(|v| v.to_string()).unwrap_or_default(),
            opt(s.final_eval.map(|e| e.mean_at_k)),
            s.mean_response_length,
            s.mean_entropy,
        ));
    }
    let path = args.out.join("comparison.csv");
    std::fs::write(&path, &csv).map_err(|e| FipoError::Io {
        path: path.clone(),
        source: e,
    })?;
    print!("{csv}");
    Ok(())
}

fn cmd_plot(args: PlotArgs) -> CmdResult {
    let rows = read_metrics_jsonl(&args.metrics)?;
    if rows.is_empty() {
        return Err(Failure::Usage(format!("{} has no metric records", args.metrics.display())));
    }
    let mut available: Vec<&str> = rows[0].keys().map(String::as_str).collect();
    available.sort_unstable();
    let mut keys = Vec::new();
    for k in &args.keys {
        let resolved = if rows[0].contains_key(k) { k.clone() } else { k.replace('.', "/") };
        if !rows[0].contains_key(&resolved) {
            return Err(Failure::Usage(format!(
                "unknown metric key `{k}`; available keys: {}",
                available.join(", ")
            )));
        }
        keys.push(resolved);
    }
    std::fs::create_dir_all(&args.out).map_err(|e| FipoError::Io {
        path: args.out.clone(),
        source: e,
    })?;
    for key in &keys {
        let points: Vec<(f64, f64)> = rows
            .iter()
            .enumerate()
            .filter_map(|(i, r)| {
                let x = r.get("step").and_then(|v| v.as_f64()).unwrap_or(i as f64);
                r.get(key).and_then(|v| v.as_f64()).map(|y| (x, y))
            })
            .collect();
        let svg = line_chart_svg(key, "step", key, &points);
        let path = args.out.join(format!("{}.svg", key.replace('/', "_")));
        std::fs::write(&path, svg).map_err(|e| FipoError::Io { path, source: e })?;
    }
    let mut columns = vec!["step"];
    columns.extend(keys.iter().map(String::as_str).filter(|k| *k != "step"));
    let path = args.out.join("series.csv");
    std::fs::write(&path, rows_to_csv(&rows, &columns)).map_err(|e| FipoError::Io { path, source: e })?;
    Ok(())
}

fn cmd_print_config(args: ConfigArgs) -> CmdResult {
    println!("{}", load_config(&args)?.to_json_pretty());
    Ok(())
}

fn cmd_dump_tasks(args: DumpTasksArgs) -> CmdResult {
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    for _ in 0..args.count {
        let task = sample_task(args.family, args.difficulty, &mut rng)?;
        println!("{}", serde_json::to_string(&task).map_err(FipoError::from)?);
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::GradCheck(a) => cmd_grad_check(a),
        Command::OracleCheck(a) => cmd_oracle_check(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Plot(a) => cmd_plot(a),
        Command::PrintConfig(a) => cmd_print_config(a),
        Command::DumpTasks(a) => cmd_dump_tasks(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::CheckFailed) => ExitCode::from(EXIT_CHECK_FAILED),
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_VALIDATION)
        }
        Err(Failure::Error(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
