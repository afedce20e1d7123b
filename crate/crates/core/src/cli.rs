//! Command-line entry points: train, generate, eval, sweep, ablate, and the
//! finite-difference self-check. Exit codes are stable: 0 success, 1 failed
//! self-check, 2 usage/config/format errors, 3 numerical failures.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{integrate, FrameCount, GenRequest};
use crate::model::{check::backbone_check, ModelConfig};
use crate::tasks::{desk_tasks, TaskId, TaskSpec, Units};
use crate::tensor::gradcheck::{run_primitive_suite, CheckOutcome, DEFAULT_TOLERANCE};
use crate::train::{
    ablation_arms, ablation_run, cfg_sweep, evaluate, final_checkpoint_path, fmt_sig6,
    load_checkpoint, load_latent, save_latent, train_with_tasks, EvalConfig, EvalReport,
    TrainConfig, ABLATION_HEADER, EVAL_HEADER, SWEEP_HEADER, TRAIN_LOG_HEADER,
};

// ── Run configuration file ───────────────────────────────────────────────

/// Per-task sampling weights for the training stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TasksSection {
    pub ta_copy_weight: u32,
    pub ta_denoise_weight: u32,
    pub nta_events_weight: u32,
}

impl Default for TasksSection {
    fn default() -> Self {
        // The non-time-aligned task is upsampled to half the cycle.
        TasksSection { ta_copy_weight: 1, ta_denoise_weight: 1, nta_events_weight: 2 }
    }
}

impl TasksSection {
    pub fn specs(&self) -> Result<Vec<TaskSpec>> {
        let mut specs = desk_tasks();
        for spec in &mut specs {
            spec.sampling_weight = match spec.id {
                TaskId::TaCopy => self.ta_copy_weight,
                TaskId::TaDenoise => self.ta_denoise_weight,
                TaskId::NtaEvents => self.nta_events_weight,
            };
            if spec.sampling_weight == 0 {
                return Err(Error::Config(format!(
                    "sampling weight for {} must be at least 1",
                    spec.id.name()
                )));
            }
        }
        Ok(specs)
    }
}

/// TOML run configuration. Every section and field is optional; unknown
/// keys are rejected with the offending line and column.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfigFile {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub tasks: TasksSection,
    pub inference: EvalConfig,
}

pub fn load_run_config(path: &Path) -> Result<RunConfigFile> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn config_or_default(path: Option<&PathBuf>) -> Result<RunConfigFile> {
    match path {
        Some(p) => load_run_config(p),
        None => Ok(RunConfigFile::default()),
    }
}

// ── Argument grammar ─────────────────────────────────────────────────────

#[derive(Parser)]
#[command(
    name = "latentflow",
    version,
    about = "Multi-task flow-matching generation over synthetic latent sequences"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes checkpoints, a training-log CSV, and a final
    /// evaluation CSV.
    Train(TrainArgs),
    /// Sample one clip from a checkpoint and write it as a binary latent
    /// container plus a CSV dump.
    Generate(GenerateArgs),
    /// Score a checkpoint on held-out synthetic samples.
    Eval(EvalArgs),
    /// Sweep guidance scales (and optionally step counts) per task.
    Sweep(SweepArgs),
    /// Train one arm per fusion mode and sampling policy, then tabulate.
    Ablate(AblateArgs),
    /// Finite-difference check of every tape primitive and a two-block
    /// backbone; exit 0 only if every row passes.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// TOML run configuration (defaults apply when omitted).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for checkpoints and CSV reports.
    #[arg(long, default_value = "run")]
    out: PathBuf,
    /// Override the training seed from the config file.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct GenerateArgs {
    /// Checkpoint to sample from.
    #[arg(long)]
    ckpt: PathBuf,
    /// Task id: ta_copy, ta_denoise, or nta_events.
    #[arg(long)]
    task: String,
    /// Conditioning units: "sym:3,1,7", "evt:2,5", or "file:latent.ufad".
    #[arg(long)]
    input: String,
    /// Euler steps.
    #[arg(long, default_value_t = 25)]
    steps: usize,
    /// Guidance scale; defaults to 5 (1 for ta_denoise).
    #[arg(long)]
    cfg: Option<f64>,
    /// Sway strength for the timestep grid.
    #[arg(long, default_value_t = -1.0, allow_hyphen_values = true)]
    sway: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output path for the binary latent (a .csv twin is written next to it).
    #[arg(long, default_value = "gen.ufad")]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Restrict to one task (default: all three).
    #[arg(long)]
    task: Option<String>,
    #[arg(long, default_value = "eval.csv")]
    out: PathBuf,
    /// Override [inference] n_samples.
    #[arg(long)]
    samples: Option<usize>,
    /// Override [inference] steps.
    #[arg(long)]
    steps: Option<usize>,
    /// Override [inference] guidance.
    #[arg(long)]
    cfg: Option<f64>,
    /// Override [inference] sway.
    #[arg(long, allow_hyphen_values = true)]
    sway: Option<f64>,
    /// Override [inference] seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    task: Option<String>,
    /// Guidance scales, swept at the base step count.
    #[arg(long, value_delimiter = ',', default_values_t = [1.0, 2.0, 3.0, 5.0, 7.0])]
    scales: Vec<f64>,
    /// Step counts, swept at the task's base guidance.
    #[arg(long, value_delimiter = ',', num_args = 0..)]
    steps_list: Vec<usize>,
    #[arg(long, default_value = "sweep.csv")]
    out: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory: per-arm checkpoints and ablation.csv.
    #[arg(long, default_value = "ablation")]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Number of random seeds per check.
    #[arg(long, default_value_t = 5)]
    seeds: u64,
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-5)]
    step_size: f64,
    /// Corrupt one backward rule to prove the harness catches it.
    #[arg(long, hide = true)]
    inject_fault: Option<String>,
}

// ── Dispatch ─────────────────────────────────────────────────────────────

/// Parse arguments from the process environment and run one command.
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help/version print to stdout and exit 0; real usage errors
            // print to stderr and exit 2.
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Numeric(_) | Error::NonFinite { .. } => 3,
        _ => 2,
    }
}

fn dispatch(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Generate(args) => cmd_generate(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::Ablate(args) => cmd_ablate(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
    }
}

fn write_csv(path: &Path, header: &str, rows: &[String]) -> Result<()> {
    let mut text = String::with_capacity(rows.len() * 48 + header.len() + 1);
    text.push_str(header);
    text.push('\n');
    for row in rows {
        text.push_str(row);
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn parse_tasks(arg: Option<&str>) -> Result<Vec<TaskId>> {
    match arg {
        Some(s) => Ok(vec![TaskId::parse(s)?]),
        None => Ok(TaskId::ALL.to_vec()),
    }
}

fn eval_csv_rows(reports: &[EvalReport]) -> Vec<String> {
    reports.iter().flat_map(EvalReport::csv_rows).collect()
}

fn print_report(report: &EvalReport) {
    let cells: Vec<String> =
        report.metrics.iter().map(|(n, v)| format!("{n}={}", fmt_sig6(*v))).collect();
    println!("eval {}: {}", report.task.name(), cells.join(" "));
}

// ── Commands ─────────────────────────────────────────────────────────────

fn cmd_train(args: TrainArgs) -> Result<i32> {
    let mut config = config_or_default(args.config.as_ref())?;
    if let Some(seed) = args.seed {
        config.train.seed = seed;
    }
    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let tc = &config.train;
    println!(
        "train: steps={} batch={} lr={} warmup={} mask={} seed={} fusion={} balanced={}",
        tc.steps,
        tc.batch_size,
        fmt_sig6(tc.learning_rate),
        tc.warmup_steps,
        fmt_sig6(tc.mask_ratio),
        tc.seed,
        tc.fusion_mode.name(),
        tc.balanced
    );
    let result = train_with_tasks(&config.model, tc, config.tasks.specs()?, Some(&args.out))?;
    let log_rows: Vec<String> = result.log.iter().map(|r| r.csv_row()).collect();
    let log_path = args.out.join("train_log.csv");
    write_csv(&log_path, TRAIN_LOG_HEADER, &log_rows)?;
    if let Some(last) = result.log.last() {
        println!(
            "step {}: total={} fm={} clip={} seq={}",
            last.step,
            fmt_sig6(last.total_loss),
            fmt_sig6(last.fm_loss),
            fmt_sig6(last.dur_clip_loss),
            fmt_sig6(last.dur_seq_loss)
        );
    }
    let ckpt = final_checkpoint_path(&args.out);
    println!("wrote {} and {}", ckpt.display(), log_path.display());

    // Final in-run evaluation scores the checkpoint as saved (f32 rounded),
    // so a later `eval` on the same file reproduces these numbers exactly.
    let (params, _) = load_checkpoint(&ckpt, None)?;
    let mut reports = Vec::new();
    for task in TaskId::ALL {
        let report = evaluate(&params, task, &config.inference)?;
        print_report(&report);
        reports.push(report);
    }
    let eval_path = args.out.join("eval_final.csv");
    write_csv(&eval_path, EVAL_HEADER, &eval_csv_rows(&reports))?;
    println!("wrote {}", eval_path.display());
    Ok(0)
}

fn parse_index_list(rest: &str, what: &str) -> Result<Vec<usize>> {
    if rest.trim().is_empty() {
        return Err(Error::Config(format!("empty {what} list in input spec")));
    }
    rest.split(',')
        .map(|tok| {
            tok.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("bad {what} index '{tok}' in input spec")))
        })
        .collect()
}

/// Grammar: "sym:3,1,7" (symbols), "evt:2,5" (event tokens), or
/// "file:path" (a latent container whose frames become the conditioning).
pub fn parse_input_spec(spec: &str) -> Result<Units> {
    if let Some(rest) = spec.strip_prefix("sym:") {
        Ok(Units::Symbols(parse_index_list(rest, "symbol")?))
    } else if let Some(rest) = spec.strip_prefix("evt:") {
        Ok(Units::Events(parse_index_list(rest, "event")?))
    } else if let Some(path) = spec.strip_prefix("file:") {
        let (_, latent) = load_latent(Path::new(path))?;
        Ok(Units::Frames(latent))
    } else {
        Err(Error::Config(format!(
            "input spec '{spec}' must start with sym:, evt:, or file:"
        )))
    }
}

fn cmd_generate(args: GenerateArgs) -> Result<i32> {
    let task = TaskId::parse(&args.task)?;
    let (params, _) = load_checkpoint(&args.ckpt, None)?;
    let units = parse_input_spec(&args.input)?;
    let guidance = args.cfg.unwrap_or_else(|| crate::train::eval::default_guidance(task));
    println!(
        "generate: task={} input={} steps={} cfg={} sway={} seed={}",
        task.name(),
        args.input,
        args.steps,
        fmt_sig6(guidance),
        fmt_sig6(args.sway),
        args.seed
    );
    let req = GenRequest {
        task,
        units,
        instruction: 0,
        frames: FrameCount::Predicted,
        steps: args.steps,
        guidance,
        sway: args.sway,
        seed: args.seed,
    };
    let gen = integrate(&params, &req)?;
    match &gen.durations {
        Some(d) => println!("frames={} durations={d:?}", gen.frames),
        None => println!("frames={} d_c_hat={}", gen.frames, fmt_sig6(gen.d_c_hat)),
    }
    save_latent(&args.out, &params.config, args.seed, &gen.latent)?;
    let csv_path = args.out.with_extension("csv");
    let dim = params.config.latent_dim;
    let header: String = std::iter::once("frame".to_string())
        .chain((0..dim).map(|c| format!("c{c}")))
        .collect::<Vec<_>>()
        .join(",");
    let rows: Vec<String> = (0..gen.frames)
        .map(|t| {
            let cells: Vec<String> = (0..dim)
                .map(|c| fmt_sig6(gen.latent.data[t * dim + c]))
                .collect();
            format!("{t},{}", cells.join(","))
        })
        .collect();
    write_csv(&csv_path, &header, &rows)?;
    println!("wrote {} and {}", args.out.display(), csv_path.display());
    Ok(0)
}

fn apply_eval_overrides(
    base: &EvalConfig,
    samples: Option<usize>,
    steps: Option<usize>,
    cfg: Option<f64>,
    sway: Option<f64>,
    seed: Option<u64>,
) -> EvalConfig {
    EvalConfig {
        n_samples: samples.unwrap_or(base.n_samples),
        steps: steps.unwrap_or(base.steps),
        guidance: cfg.or(base.guidance),
        sway: sway.unwrap_or(base.sway),
        seed: seed.unwrap_or(base.seed),
    }
}

fn cmd_eval(args: EvalArgs) -> Result<i32> {
    let config = config_or_default(args.config.as_ref())?;
    let ec = apply_eval_overrides(
        &config.inference,
        args.samples,
        args.steps,
        args.cfg,
        args.sway,
        args.seed,
    );
    let tasks = parse_tasks(args.task.as_deref())?;
    let (params, meta) = load_checkpoint(&args.ckpt, None)?;
    println!(
        "eval: ckpt={} step={} n_samples={} steps={} sway={}",
        args.ckpt.display(),
        meta.step,
        ec.n_samples,
        ec.steps,
        fmt_sig6(ec.sway)
    );
    let mut reports = Vec::new();
    for task in tasks {
        let report = evaluate(&params, task, &ec)?;
        print_report(&report);
        reports.push(report);
    }
    write_csv(&args.out, EVAL_HEADER, &eval_csv_rows(&reports))?;
    println!("wrote {}", args.out.display());
    Ok(0)
}

fn cmd_sweep(args: SweepArgs) -> Result<i32> {
    let config = config_or_default(args.config.as_ref())?;
    let tasks = parse_tasks(args.task.as_deref())?;
    let (params, _) = load_checkpoint(&args.ckpt, None)?;
    let mut rows = Vec::new();
    for task in tasks {
        let task_rows =
            cfg_sweep(&params, task, &args.scales, &args.steps_list, &config.inference)?;
        for row in &task_rows {
            println!(
                "sweep {}: w={} steps={} {}={}",
                row.task.name(),
                fmt_sig6(row.guidance),
                row.steps,
                row.metric,
                fmt_sig6(row.value)
            );
        }
        rows.extend(task_rows.iter().map(|r| r.csv_row()));
    }
    write_csv(&args.out, SWEEP_HEADER, &rows)?;
    println!("wrote {}", args.out.display());
    Ok(0)
}

fn cmd_ablate(args: AblateArgs) -> Result<i32> {
    let mut config = config_or_default(args.config.as_ref())?;
    if let Some(seed) = args.seed {
        config.train.seed = seed;
    }
    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let arms = ablation_arms(&config.train, &crate::model::FusionMode::ALL, &[true, false]);
    println!("ablate: {} arms, {} steps each", arms.len(), config.train.steps);
    let results = ablation_run(&config.model, &arms, &config.inference, Some(&args.out))?;
    for r in &results {
        println!(
            "arm {}: copy_mse={} denoise_snr_gain_db={} events_f1={}",
            r.label,
            fmt_sig6(r.copy_mse),
            fmt_sig6(r.denoise_snr_gain_db),
            fmt_sig6(r.events_f1)
        );
    }
    let rows: Vec<String> = results.iter().map(|r| r.csv_row()).collect();
    let csv = args.out.join("ablation.csv");
    write_csv(&csv, ABLATION_HEADER, &rows)?;
    println!("wrote {}", csv.display());
    Ok(0)
}

fn print_outcome(prefix: &str, row: &CheckOutcome) {
    println!(
        "{prefix}{:<28} max_rel_err {:>12.4e}  {}",
        row.name,
        row.max_rel_err,
        if row.passed { "PASS" } else { "FAIL" }
    );
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<i32> {
    if args.seeds == 0 {
        return Err(Error::Config("need at least one seed".to_string()));
    }
    let seeds: Vec<u64> = (1..=args.seeds).collect();
    let h = args.step_size;
    let suite = run_primitive_suite(&seeds, h, DEFAULT_TOLERANCE, args.inject_fault.as_deref())?;
    let mut failures: Vec<String> = Vec::new();
    for row in &suite.rows {
        print_outcome("primitive ", row);
        if !row.passed {
            failures.push(row.name.to_string());
        }
    }
    for &seed in &seeds {
        let report = backbone_check(seed, h, DEFAULT_TOLERANCE)?;
        for row in &report.rows {
            print_outcome(&format!("backbone[seed={seed}] "), row);
            if !row.passed {
                failures.push(format!("{} (seed {seed})", row.name));
            }
        }
    }
    if failures.is_empty() {
        println!("gradcheck: all checks within {DEFAULT_TOLERANCE:e}");
        Ok(0)
    } else {
        println!("gradcheck: FAILED {}", failures.join(", "));
        Ok(1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn input_spec_grammar_round_trips() {
        match parse_input_spec("sym:3,1,7").unwrap() {
            Units::Symbols(s) => assert_eq!(s, vec![3, 1, 7]),
            other => panic!("{other:?}"),
        }
        match parse_input_spec("evt:2,5").unwrap() {
            Units::Events(e) => assert_eq!(e, vec![2, 5]),
            other => panic!("{other:?}"),
        }
        assert!(parse_input_spec("sym:").is_err());
        assert!(parse_input_spec("sym:3,x").is_err());
        assert!(parse_input_spec("latent.ufad").is_err());
        assert!(parse_input_spec("file:/does/not/exist.ufad").is_err());
    }

    #[test]
    fn run_config_rejects_unknown_keys_with_position() {
        let dir = std::env::temp_dir().join("latentflow-cli-tests");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.toml");
        std::fs::write(&path, "[train]\nsteps = 3\nbatch_sise = 2\n").unwrap();
        let err = load_run_config(&path).unwrap_err().to_string();
        assert!(err.contains("line 3"), "{err}");
        assert!(err.contains("batch_sise"), "{err}");

        std::fs::write(&path, "[train]\nsteps = 2\n[model]\ndepth = 3\n").unwrap();
        let cfg = load_run_config(&path).unwrap();
        assert_eq!(cfg.train.steps, 2);
        assert_eq!(cfg.model.depth, 3);
        assert_eq!(cfg.model.embed_size, ModelConfig::desk().embed_size);
        assert_eq!(cfg.inference, EvalConfig::default());
    }

    #[test]
    fn task_weights_flow_into_specs() {
        let section = TasksSection { nta_events_weight: 3, ..TasksSection::default() };
        let specs = section.specs().unwrap();
        let events = specs.iter().find(|s| s.id == TaskId::NtaEvents).unwrap();
        assert_eq!(events.sampling_weight, 3);
        let zero = TasksSection { ta_copy_weight: 0, ..TasksSection::default() };
        assert!(zero.specs().is_err());
    }

    #[test]
    fn exit_codes_group_error_kinds() {
        assert_eq!(exit_code(&Error::Config("x".into())), 2);
        assert_eq!(exit_code(&Error::Format("x".into())), 2);
        assert_eq!(
            exit_code(&Error::ManifestMismatch { missing: vec![], extra: vec![] }),
            2
        );
        assert_eq!(exit_code(&Error::Numeric("x".into())), 3);
    }
}
