//! Subcommand implementations.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{Context as _, Result};
use clap::Args;
use skillworld::env::{ContextMode, Split, World};
use skillworld::experiment::{
    metrics_row, run_suite, suite_means, unix_now, ExperimentConfig, RunManifest, METRICS_HEADER,
};
use skillworld::plot::{render_svg, Curves};
use skillworld::policy::{PolicyParams, RolloutSnapshot};
use skillworld::rollout::SnapshotBehavior;
use skillworld::skillbank::Pool;
use skillworld::trainer::{evaluate_behavior, EvalResult, Method, Trainer, TrainerState};
use skillworld::Error;

pub const THREADS_ENV: &str = "SKILLWORLD_THREADS";

/// 3 for numerical aborts, 2 for every config or input problem.
pub fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(Error::Numerical(_)) => 3,
        _ => 2,
    }
}

pub fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v.parse().map_err(|_| {
        Error::Config(format!(
            "{THREADS_ENV} must be a positive integer, got {v:?}"
        ))
    })?;
    if n == 0 {
        return Err(Error::Config(format!("{THREADS_ENV} must be positive")).into());
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()?;
    Ok(())
}

fn parse_method(s: &str) -> std::result::Result<Method, String> {
    Method::parse(s).map_err(|e| e.to_string())
}

fn parse_split(s: &str) -> std::result::Result<Split, String> {
    Split::parse(s).map_err(|e| e.to_string())
}

fn parse_mode(s: &str) -> std::result::Result<ContextMode, String> {
    ContextMode::parse(s).map_err(|e| e.to_string())
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    let Some(path) = path else {
        return Ok(ExperimentConfig::default());
    };
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let config =
        ExperimentConfig::from_toml(&text).with_context(|| format!("in {}", path.display()))?;
    Ok(config)
}

/// Writes through a sibling temp file so readers never see a partial file.
fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, contents).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// The config's world, or a snapshot that must agree with it.
fn load_world(config: &ExperimentConfig, snapshot: Option<&Path>) -> Result<World> {
    let Some(path) = snapshot else {
        return Ok(config.build_world()?);
    };
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let world = World::from_snapshot(&text).with_context(|| format!("in {}", path.display()))?;
    if world.config() != &config.resolved_env() {
        return Err(Error::Config(format!(
            "world snapshot {} was generated from a different env config",
            path.display()
        ))
        .into());
    }
    Ok(world)
}

fn world_summary(world: &World) -> String {
    let bank = world.bank();
    let join =
        |s: &std::collections::BTreeSet<String>| s.iter().cloned().collect::<Vec<_>>().join(",");
    let mut out = String::new();
    let _ = writeln!(out, "id domains: {}", join(bank.id_domains()));
    let _ = writeln!(out, "ood domains: {}", join(bank.ood_domains()));
    let _ = writeln!(
        out,
        "skills: general={} id={} ood={}",
        bank.general().len(),
        bank.pool_len(Pool::Id),
        bank.pool_len(Pool::Ood)
    );
    let counts: Vec<String> = [Split::TrainId, Split::ValId, Split::ValOod]
        .iter()
        .map(|&s| format!("{}={}", s.as_str(), world.tasks_in(s).count()))
        .collect();
    let _ = writeln!(out, "tasks: {}", counts.join(" "));
    out
}

pub fn genworld(config: Option<&Path>, seed: Option<u64>, out: &Path) -> Result<()> {
    let mut config = load_config(config)?;
    if let Some(seed) = seed {
        config.env.seed = seed;
    }
    let world = config.build_world()?;
    write_atomic(out, world.to_snapshot().as_bytes())?;
    print!("{}", world_summary(&world));
    Ok(())
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// World snapshot; generated from the config when absent.
    #[arg(long)]
    pub world: Option<PathBuf>,
    /// Output directory for metrics, checkpoints and the manifest.
    #[arg(long, default_value = "run")]
    pub out: PathBuf,
    #[arg(long, value_parser = parse_method)]
    pub method: Option<Method>,
    /// Sets both the world and the training seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Steps between checkpoints.
    #[arg(long, default_value_t = 10)]
    pub checkpoint_every: usize,
    /// Continue from the output directory's last checkpoint.
    #[arg(long)]
    pub resume: bool,
    /// Print the resolved configuration and exit.
    #[arg(long)]
    pub print_config: bool,
}

fn resolve_train_config(args: &TrainArgs) -> Result<ExperimentConfig> {
    let mut config = load_config(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        config.env.seed = seed;
        config.train.seed = seed;
    }
    if let Some(m) = args.method {
        config.train.method = m;
    }
    if let Some(s) = args.steps {
        config.train.steps = s;
    }
    config.validate()?;
    Ok(config)
}

/// Step of a metrics row, from its first field.
fn row_step(line: &str) -> Option<usize> {
    line.split(',').next()?.parse().ok()
}

pub fn train(args: &TrainArgs) -> Result<()> {
    let config = resolve_train_config(args)?;
    if args.print_config {
        print!("{}", config.to_toml());
        return Ok(());
    }
    if args.checkpoint_every == 0 {
        return Err(Error::Config("checkpoint_every must be positive".into()).into());
    }
    let world = load_world(&config, args.world.as_deref())?;
    let out = &args.out;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let metrics_path = out.join("metrics.csv");
    let state_path = out.join("state.json");
    let ckpt_path = out.join("policy.ckpt");
    let manifest_path = out.join("manifest.json");

    let mut manifest = RunManifest::new(&config, &world);
    manifest.outputs = [&metrics_path, &ckpt_path, &state_path, &manifest_path]
        .iter()
        .map(|p| p.display().to_string())
        .collect();

    let mut trainer = if args.resume && state_path.exists() {
        let state: TrainerState = serde_json::from_str(&fs::read_to_string(&state_path)?)
            .with_context(|| format!("in {}", state_path.display()))?;
        let kept: Vec<String> = fs::read_to_string(&metrics_path)
            .unwrap_or_default()
            .lines()
            .skip(1)
            .filter(|l| row_step(l).is_some_and(|s| s <= state.step))
            .map(|l| format!("{l}\n"))
            .collect();
        write_atomic(
            &metrics_path,
            format!("{METRICS_HEADER}\n{}", kept.concat()).as_bytes(),
        )?;
        eprintln!("resuming from step {}", state.step);
        Trainer::from_state(&world, config.train.clone(), state)?
    } else {
        write_atomic(&metrics_path, format!("{METRICS_HEADER}\n").as_bytes())?;
        Trainer::new(&world, config.train.clone())?
    };
    write_atomic(&manifest_path, manifest.to_json().as_bytes())?;

    let mut metrics = fs::OpenOptions::new().append(true).open(&metrics_path)?;
    let checkpoint = |trainer: &Trainer| -> Result<()> {
        write_atomic(
            &state_path,
            serde_json::to_string(&trainer.state())?.as_bytes(),
        )?;
        write_atomic(&ckpt_path, trainer.params().to_checkpoint().as_bytes())
    };
    while trainer.step_index() < config.train.steps {
        let record = trainer.train_step()?;
        metrics.write_all(metrics_row(&record).as_bytes())?;
        metrics.flush()?;
        for e in &record.evals {
            eprintln!(
                "step {:4} {} {}: {:.3}",
                record.step,
                e.split.as_str(),
                e.mode.as_str(),
                e.average
            );
        }
        if record.step % args.checkpoint_every == 0 || record.step == config.train.steps {
            checkpoint(&trainer)?;
        }
    }
    checkpoint(&trainer)?;
    manifest.finished_at = Some(unix_now());
    write_atomic(&manifest_path, manifest.to_json().as_bytes())?;
    println!("wrote {}", out.display());
    Ok(())
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub world: Option<PathBuf>,
    #[arg(long, value_parser = parse_split, default_value = "val_ood")]
    pub split: Split,
    #[arg(long, value_parser = parse_mode, default_value = "standard")]
    pub mode: ContextMode,
    /// Episodes per domain.
    #[arg(long, default_value_t = 100)]
    pub episodes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Sampling temperature; the config's evaluation temperature by default.
    #[arg(long)]
    pub temperature: Option<f64>,
}

pub fn format_table(e: &EvalResult) -> String {
    let mut out = String::new();
    let mut header: Vec<String> = e.per_domain.iter().map(|(d, _)| d.clone()).collect();
    let mut values: Vec<String> = e
        .per_domain
        .iter()
        .map(|(_, v)| format!("{:.3}", v))
        .collect();
    if !e.per_domain.is_empty() {
        header.push("avg".into());
        values.push(format!("{:.3}", e.average));
    }
    let _ = writeln!(
        out,
        "split={} mode={} episodes_per_domain={}",
        e.split.as_str(),
        e.mode.as_str(),
        e.episodes_per_domain
    );
    let _ = writeln!(out, "{}", header.join("\t"));
    let _ = writeln!(out, "{}", values.join("\t"));
    out
}

pub fn eval(args: &EvalArgs) -> Result<()> {
    if args.mode == ContextMode::Privileged {
        return Err(Error::ProtocolViolation("privileged context is training-only".into()).into());
    }
    let config = load_config(args.config.as_deref())?;
    let world = load_world(&config, args.world.as_deref())?;
    let text = fs::read_to_string(&args.checkpoint)
        .with_context(|| format!("reading {}", args.checkpoint.display()))?;
    let params = PolicyParams::from_checkpoint(&text)?;
    let arch = params.arch();
    if arch.input != world.layout().dim() || arch.output != world.config().n_actions() {
        return Err(Error::Shape {
            expected: world.layout().dim(),
            got: arch.input,
        })
        .context("checkpoint does not fit this world");
    }
    let snapshot = RolloutSnapshot::new(&params);
    let behavior = SnapshotBehavior {
        snapshot: &snapshot,
        temperature: args.temperature.unwrap_or(config.train.eval_temperature),
    };
    let result = evaluate_behavior(
        &world,
        &behavior,
        args.split,
        args.mode,
        args.episodes,
        config.train.retrieval_k,
        args.seed,
    )?;
    let pools: Vec<&str> = result.pools.iter().map(|p| p.as_str()).collect();
    eprintln!("retrieval pools: [{}]", pools.join(","));
    print!("{}", format_table(&result));
    Ok(())
}

pub fn plot(metrics: &Path, out: &Path) -> Result<()> {
    let text =
        fs::read_to_string(metrics).with_context(|| format!("reading {}", metrics.display()))?;
    let curves = Curves::from_csv(&text).with_context(|| format!("in {}", metrics.display()))?;
    write_atomic(out, render_svg(&curves).as_bytes())
}

#[derive(Debug, Args)]
pub struct SuiteArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    pub seeds: Vec<u64>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Directory for per-run metrics and the summary table.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn suite(args: &SuiteArgs, methods: &[Method]) -> Result<()> {
    let mut config = load_config(args.config.as_deref())?;
    if let Some(s) = args.steps {
        config.train.steps = s;
    }
    config.validate()?;
    let runs = run_suite(&config, &args.seeds, methods)?;
    fs::create_dir_all(&args.out)?;
    let mut summary = String::from("method,seed,final_id,final_ood\n");
    for r in &runs {
        let name = format!("{}-seed{}.csv", r.method.as_str(), r.seed);
        write_atomic(&args.out.join(name), r.output.metrics_csv().as_bytes())?;
        let _ = writeln!(
            summary,
            "{},{},{},{}",
            r.method.as_str(),
            r.seed,
            r.final_id,
            r.final_ood
        );
    }
    write_atomic(&args.out.join("summary.csv"), summary.as_bytes())?;
    println!("method\tid\tood");
    for (m, id, ood) in suite_means(&runs) {
        println!("{}\t{id:.3}\t{ood:.3}", m.as_str());
    }
    Ok(())
}
