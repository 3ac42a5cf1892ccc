//! `mtvm`: world generation, training, evaluation, ablations, gradient
//! checks and attention export.

mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use mtvm::evalkit::{gradcheck, run_ablation, AblationAxis, AblationGrid, GradcheckConfig};
use mtvm::model::{run_episode_with, CrossAttnRecord, Policy, RolloutOptions};
use mtvm::rng::{stream, Purpose};
use mtvm::trainer::{
    evaluate_split, load_checkpoint, save_checkpoint, train_with, Dataset, ExperimentConfig, TrainOptions,
};
use mtvm::world::{generate_world_with, SplitTag, WorldParams};

use manifest::RunManifest;

const SEED_ENV: &str = "MTVM_SEED";

#[derive(Parser)]
#[command(name = "mtvm", version, about = "Memory-augmented multimodal transformer navigation agent")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate navigation worlds as JSON files.
    GenWorld(GenWorldArgs),
    /// Train an agent and write checkpoints and the run log.
    Train(TrainArgs),
    /// Greedy evaluation of a checkpoint on one split.
    Eval(EvalArgs),
    /// Sweep one ablation axis over several seeds.
    Ablate(AblateArgs),
    /// Whole-model finite-difference gradient check on the tiny config.
    Gradcheck(GradcheckArgs),
    /// Dump per-step cross-attention weights for one episode.
    ExportAttn(ExportAttnArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment config JSON; defaults are used for missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted-path override, e.g. `--set trainer.lr=1e-3`. Repeatable; wins over the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct GenWorldArgs {
    /// First world seed; falls back to MTVM_SEED, then 0.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 50)]
    nodes: usize,
    #[arg(long, default_value_t = 5)]
    max_degree: usize,
    #[arg(long, default_value_t = 64)]
    feature_dim: usize,
    /// train, val_seen or val_unseen
    #[arg(long, default_value = "train")]
    split: String,
    /// Number of worlds, seeds counting up from `--seed`.
    #[arg(long, default_value_t = 1)]
    count: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Directory of world JSON files; generated from the config when absent.
    #[arg(long)]
    worlds: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Print a progress line every N iterations.
    #[arg(long, default_value_t = 0)]
    progress_every: usize,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    worlds: Option<PathBuf>,
    #[arg(long, default_value = "val_unseen")]
    split: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    worlds: Option<PathBuf>,
    /// memory_capacity, drop_rate, lambda_s, lambda_m, consistency_on_off or cross_attn
    #[arg(long)]
    axis: String,
    /// Comma-separated values; the axis defaults when absent.
    #[arg(long)]
    values: Option<String>,
    #[arg(long, default_value = "0,1,2")]
    seeds: String,
    /// Cells trained at once.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    /// Directory for the report and manifest; printed only when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExportAttnArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    worlds: Option<PathBuf>,
    #[arg(long, default_value = "val_unseen")]
    split: String,
    /// Index into the split's episodes.
    #[arg(long, default_value_t = 0)]
    episode: usize,
    #[arg(long)]
    out: PathBuf,
}

enum Failure {
    /// Bad flags, files or configuration: exit 1.
    Usage(String),
    /// Anything else: exit 2.
    Internal(String),
}

impl From<mtvm::Error> for Failure {
    fn from(e: mtvm::Error) -> Self {
        use mtvm::Error as E;
        match e {
            E::Config(_) | E::Input(_) | E::Checkpoint(_) | E::Io(_) | E::Json(_) => Failure::Usage(e.to_string()),
            _ => Failure::Internal(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Usage(e.to_string())
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.command {
        Command::GenWorld(a) => gen_world(a, &argv),
        Command::Train(a) => train(a, &argv),
        Command::Eval(a) => eval(a, &argv),
        Command::Ablate(a) => ablate(a, &argv),
        Command::Gradcheck(a) => grad_check(a, &argv),
        Command::ExportAttn(a) => export_attn(a, &argv),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Internal(m)) => {
            eprintln!("internal error: {m}");
            ExitCode::from(2)
        }
    }
}

fn env_seed() -> CliResult<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(s) => s
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Failure::Usage(format!("{SEED_ENV}={s:?} is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

/// File, then MTVM_SEED, then `--set` overrides.
fn load_config(args: &ConfigArgs) -> CliResult<ExperimentConfig> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Failure::Usage(format!("cannot read config {}: {e}", path.display())))?;
            ExperimentConfig::from_json(&text)?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = env_seed()? {
        cfg.trainer.seed = seed;
    }
    for item in &args.set {
        let (key, value) = item
            .split_once('=')
            .ok_or_else(|| Failure::Usage(format!("--set expects KEY=VALUE, got {item:?}")))?;
        cfg = cfg.with_override(key.trim(), value.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_data(cfg: &ExperimentConfig, worlds: Option<&Path>, feature_dim: usize) -> CliResult<Dataset> {
    Ok(match worlds {
        Some(dir) => Dataset::load_dir(dir, &cfg.data)?,
        None => Dataset::generate(&cfg.data, feature_dim)?,
    })
}

fn parse_split(s: &str) -> CliResult<SplitTag> {
    Ok(s.parse::<SplitTag>()?)
}

fn create_dir(dir: &Path) -> CliResult {
    std::fs::create_dir_all(dir).map_err(|e| Failure::Usage(format!("cannot create {}: {e}", dir.display())))
}

fn write(path: &Path, text: &str) -> CliResult<String> {
    std::fs::write(path, text).map_err(|e| Failure::Usage(format!("cannot write {}: {e}", path.display())))?;
    Ok(path.display().to_string())
}

fn to_json<T: Serialize>(v: &T) -> CliResult<String> {
    serde_json::to_string_pretty(v).map_err(|e| Failure::Internal(e.to_string()))
}

fn gen_world(a: &GenWorldArgs, argv: &[String]) -> CliResult {
    let split = parse_split(&a.split)?;
    let seed = match a.seed {
        Some(s) => s,
        None => env_seed()?.unwrap_or(0),
    };
    if a.count == 0 {
        return Err(Failure::Usage("--count must be positive".into()));
    }
    let params = WorldParams { n_nodes: a.nodes, max_degree: a.max_degree, feature_dim: a.feature_dim, ..WorldParams::default() };
    create_dir(&a.out)?;
    let mut m = RunManifest::new("gen-world", argv);
    m.seed("world", seed);
    m.hash("world_params", &to_json(&params)?);
    for i in 0..a.count as u64 {
        let s = seed + i;
        let world = generate_world_with(s, split, &params).map_err(|e| match e {
            mtvm::Error::Generation(m) => Failure::Usage(format!("world generation failed: {m}")),
            other => other.into(),
        })?;
        let path = a.out.join(format!("world_{}_{s}.json", split.as_str()));
        m.artifact(write(&path, &world.to_json()?)?);
    }
    m.write(&a.out)?;
    println!("wrote {} world(s) to {}", a.count, a.out.display());
    Ok(())
}

fn train(a: &TrainArgs, argv: &[String]) -> CliResult {
    let cfg = load_config(&a.config)?;
    let data = load_data(&cfg, a.worlds.as_deref(), cfg.model.d_v)?;
    create_dir(&a.out)?;
    let mut m = RunManifest::new("train", argv);
    m.config(&cfg);
    let mut model = mtvm::model::Mtvm::new(cfg.model.clone(), cfg.trainer.seed)?;
    let opts = TrainOptions { dump_dir: Some(a.out.clone()), progress_every: a.progress_every };
    let outcome = train_with(&mut model, &data, &cfg, &opts)?;
    m.artifact(write(&a.out.join("config.json"), &cfg.to_json()?)?);
    let final_path = a.out.join("checkpoint.json");
    save_checkpoint(&final_path, model.params(), &cfg, cfg.trainer.iterations)?;
    m.artifact(final_path.display().to_string());
    if let Some(best) = &outcome.best {
        let path = a.out.join("best.json");
        save_checkpoint(&path, &best.params, &cfg, best.iteration)?;
        m.artifact(path.display().to_string());
        println!("best val_unseen spl {:.4} at iteration {}", best.spl, best.iteration);
    }
    m.artifact(write(&a.out.join("runlog.jsonl"), &outcome.log.to_jsonl()?)?);
    // wall-clock lives outside the reproducible artefacts
    write(&a.out.join("timing.jsonl"), &outcome.log.timing_jsonl())?;
    m.write(&a.out)?;
    println!("trained {} iterations, outputs in {}", cfg.trainer.iterations, a.out.display());
    Ok(())
}

fn require_checkpoint(path: &Option<PathBuf>) -> CliResult<&Path> {
    path.as_deref().ok_or_else(|| Failure::Usage("--checkpoint is required".into()))
}

fn eval(a: &EvalArgs, argv: &[String]) -> CliResult {
    let ck = require_checkpoint(&a.checkpoint)?;
    let split = parse_split(&a.split)?;
    let cfg = load_config(&a.config)?;
    let (model, meta) = load_checkpoint(ck)?;
    let data = load_data(&cfg, a.worlds.as_deref(), model.config().d_v)?;
    let report = evaluate_split(&model, &data, split, cfg.trainer.max_steps)?;
    report.check_invariants().map_err(Failure::Internal)?;
    create_dir(&a.out)?;
    let mut m = RunManifest::new("eval", argv);
    m.config(&cfg);
    m.hash_value("checkpoint_config", &meta.config_hash);
    m.artifact(write(&a.out.join("report.json"), &to_json(&report)?)?);
    m.write(&a.out)?;
    println!(
        "{} episodes on {}: SR {:.4} SPL {:.4} NE {:.3} GP {:.3}",
        report.n_episodes,
        split.as_str(),
        report.sr,
        report.spl,
        report.ne_mean,
        report.goal_progress_mean
    );
    Ok(())
}

fn ablate(a: &AblateArgs, argv: &[String]) -> CliResult {
    let cfg = load_config(&a.config)?;
    let axis: AblationAxis = a.axis.parse()?;
    let seeds = a
        .seeds
        .split(',')
        .map(|s| s.trim().parse::<u64>().map_err(|_| Failure::Usage(format!("bad seed {s:?}"))))
        .collect::<CliResult<Vec<_>>>()?;
    let mut grid = AblationGrid::new(axis, seeds);
    if let Some(v) = &a.values {
        grid.values = v.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect();
    }
    for v in &grid.values {
        grid.cell_config(&cfg, v, 0)?;
    }
    let data = load_data(&cfg, a.worlds.as_deref(), cfg.model.d_v)?;
    let results = run_ablation(&cfg, &grid, &data, a.jobs)?;
    create_dir(&a.out)?;
    let mut m = RunManifest::new("ablate", argv);
    m.config(&cfg);
    for s in &grid.seeds {
        m.seed(&format!("cell_{s}"), *s);
    }
    m.artifact(write(&a.out.join("results.csv"), &results.to_csv())?);
    m.artifact(write(&a.out.join("results.json"), &results.to_json()?)?);
    m.write(&a.out)?;
    println!("{:<16} {:>6} {:>8} {:>8} {:>8} {:>8}", axis.name(), "seeds", "seen_sr", "seen_spl", "unseen_sr", "unseen_spl");
    for s in results.summary() {
        println!(
            "{:<16} {:>6} {:>8.4} {:>8.4} {:>8.4} {:>8.4}",
            s.value, s.seeds, s.val_seen.sr, s.val_seen.spl, s.val_unseen.sr, s.val_unseen.spl
        );
    }
    Ok(())
}

fn grad_check(a: &GradcheckArgs, argv: &[String]) -> CliResult {
    let cfg = GradcheckConfig { seed: a.seed, tolerance: a.tolerance, ..GradcheckConfig::default() };
    let report = gradcheck(&cfg)?;
    println!(
        "gradcheck: {} elements in {} parameters, max rel err {:.3e} (tolerance {:.1e}), {:.2}s",
        report.n_elements, report.n_params, report.max_rel_err, report.tolerance, report.seconds
    );
    if !report.zero_grad_params.is_empty() {
        println!("parameters with zero gradient: {}", report.zero_grad_params.join(", "));
    }
    let mut m = RunManifest::new("gradcheck", argv);
    m.seed("model", a.seed);
    match &a.out {
        Some(dir) => {
            create_dir(dir)?;
            m.artifact(write(&dir.join("gradcheck.json"), &to_json(&report)?)?);
            m.write(dir)?;
        }
        None => println!("{}", m.to_json()?),
    }
    if report.passed {
        Ok(())
    } else {
        let w = report.worst.as_ref().map(|w| format!("{}[{}]", w.param, w.index)).unwrap_or_default();
        Err(Failure::Internal(format!("{} elements above tolerance, worst {w}", report.failures.len())))
    }
}

#[derive(Serialize)]
struct AttnStep {
    step: usize,
    node: usize,
    action: usize,
    memory_len: usize,
    probs: Vec<f64>,
    layers: Vec<CrossAttnRecord>,
}

#[derive(Serialize)]
struct AttnExport {
    split: &'static str,
    episode: usize,
    world_seed: u64,
    instruction: String,
    tokens: Vec<u16>,
    path: Vec<usize>,
    steps: Vec<AttnStep>,
}

fn export_attn(a: &ExportAttnArgs, argv: &[String]) -> CliResult {
    let ck = require_checkpoint(&a.checkpoint)?;
    let split = parse_split(&a.split)?;
    let cfg = load_config(&a.config)?;
    let (model, meta) = load_checkpoint(ck)?;
    let data = load_data(&cfg, a.worlds.as_deref(), model.config().d_v)?;
    let episodes = data.episodes(split);
    let ep = episodes
        .get(a.episode)
        .ok_or_else(|| Failure::Usage(format!("episode {} out of {} in {}", a.episode, episodes.len(), split.as_str())))?;
    let world = &data.worlds(split)[ep.world];
    let opts = RolloutOptions { keep_graph: true, max_steps: cfg.trainer.max_steps, ..RolloutOptions::inference(Policy::Greedy) };
    let trace = run_episode_with(&model, world, &ep.spec, &opts, &mut stream(0, Purpose::Eval, 0, 0))?;
    let steps = trace
        .steps
        .iter()
        .zip(&trace.graph)
        .enumerate()
        .map(|(t, (s, g))| AttnStep {
            step: t,
            node: s.node,
            action: s.action,
            memory_len: s.memory_len,
            probs: s.probs.clone(),
            layers: g.full.attn.clone(),
        })
        .collect();
    let export = AttnExport {
        split: split.as_str(),
        episode: a.episode,
        world_seed: world.seed,
        instruction: ep.spec.instruction.text(),
        tokens: ep.spec.instruction.tokens.clone(),
        path: trace.path.clone(),
        steps,
    };
    create_dir(&a.out)?;
    let mut m = RunManifest::new("export-attn", argv);
    m.config(&cfg);
    m.hash_value("checkpoint_config", &meta.config_hash);
    m.artifact(write(&a.out.join("attention.json"), &to_json(&export)?)?);
    m.write(&a.out)?;
    println!("exported {} steps of attention to {}", export.steps.len(), a.out.display());
    Ok(())
}
