use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use flash::bench::{latency_report, run_sweep, write_sweep, SweepSpec};
use flash::codec::SliceDecoder;
use flash::config::RunConfig;
use flash::dataset::{build_targets, Demo};
use flash::flow::PriorMode;
use flash::io::{
    read_coeffs, read_json, write_json, write_rollout_csv, write_trajectory_csv, CheckpointDoc, DataManifest,
    DemoEntry, NdjsonWriter, NormalizerDoc, RolloutSummary, TargetsDoc, FORMAT_VERSION,
};
use flash::pipeline::{self, Prepared};
use flash::sim::{compute_metrics, TaskKind};
use flash::train::{evaluate, Trainer};
use flash::FlashError;

/// Legendre-coefficient action chunking with one-step history-anchored flow.
#[derive(Debug, Parser)]
#[command(name = "flash", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Run configuration (versioned JSON); defaults apply when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Overrides the root seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate expert demonstrations and their training targets.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        demos: Option<usize>,
        #[arg(long, value_enum)]
        task: Option<Task>,
    },
    /// Rebuild training targets from the generated demonstrations.
    PrepareTargets {
        #[command(flatten)]
        common: Common,
    },
    /// Train the velocity field on the prepared targets.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        steps: Option<usize>,
        /// Continue from this checkpoint up to the configured step budget.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Run closed-loop episodes with a trained checkpoint or the oracle.
    Rollout {
        #[command(flatten)]
        common: Common,
        /// Defaults to `<output root>/train/final.json`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Decode the expert's own corrected fits instead of a model.
        #[arg(long)]
        oracle: bool,
        #[arg(long)]
        k_eval: Option<f64>,
        #[arg(long, value_enum)]
        prior: Option<Prior>,
        #[arg(long)]
        nfe: Option<usize>,
        #[arg(long, value_enum)]
        velocity_ff: Option<Switch>,
        /// Comma-separated episode seeds.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
    /// Batch experiments.
    Bench {
        #[command(subcommand)]
        command: BenchCommand,
    },
    /// Print a coefficient file's decoded execution slice as CSV.
    Inspect {
        file: PathBuf,
        #[arg(long)]
        k_eval: Option<f64>,
        #[arg(long, default_value_t = 1000.0)]
        control_hz: f64,
    },
}

#[derive(Debug, Subcommand)]
enum BenchCommand {
    Sweep {
        #[arg(long)]
        spec: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Task {
    MinJerk,
    Sinusoid,
    ViaPoints,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Prior {
    History,
    Gaussian,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

/// Errors the user can fix by changing the invocation.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            RunConfig::from_json(&text).map_err(|e| usage(format!("{}: {e}", p.display())))?
        }
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn validated(cfg: RunConfig) -> Result<RunConfig> {
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    Ok(cfg)
}

fn ensure_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))
}

fn data_dir(cfg: &RunConfig) -> PathBuf {
    cfg.output_root().join("data")
}

fn write_targets(cfg: &RunConfig, demos: &[Demo]) -> Result<TargetsDoc> {
    let targets = build_targets(demos, &cfg.target_spec())?;
    let prepared = Prepared::from_targets(targets.clone(), demos.len(), cfg.data.holdout)?;
    let doc = TargetsDoc {
        version: FORMAT_VERSION,
        config_hash: cfg.hash(),
        degree: cfg.codec.degree,
        dims: cfg.data.dims,
        window: cfg.codec.window,
        history_len: cfg.codec.history_len,
        lambda_h: cfg.codec.lambda_h,
        kkt: cfg.codec.kkt,
        train_demos: prepared.train_demos,
        normalizer: NormalizerDoc::new(&prepared.normalizer),
        targets: TargetsDoc::rows(&targets),
    };
    let path = data_dir(cfg).join("targets.json");
    write_json(&path, &doc)?;
    println!(
        "targets: {} ({} train, {} held out) -> {}",
        targets.len(),
        prepared.train.len(),
        prepared.held_out.len(),
        path.display()
    );
    println!("row scales: {:?}", prepared.normalizer.scales());
    Ok(doc)
}

fn gen_data(common: &Common, demos: Option<usize>, task: Option<Task>) -> Result<()> {
    let mut cfg = load_config(common)?;
    if let Some(n) = demos {
        cfg.data.demos = n;
    }
    if let Some(t) = task {
        cfg.data.task = match t {
            Task::MinJerk => TaskKind::MinJerk,
            Task::Sinusoid => TaskKind::Sinusoid,
            Task::ViaPoints => TaskKind::ViaPoints,
        };
    }
    let cfg = validated(cfg)?;
    let dir = data_dir(&cfg);
    ensure_dir(&dir)?;
    let experts = pipeline::demos(&cfg)?;
    let mut entries = Vec::with_capacity(experts.len());
    for (i, e) in experts.iter().enumerate() {
        let file = format!("demo_{i:04}.csv");
        write_trajectory_csv(&dir.join(&file), &e.trajectory)?;
        entries.push(DemoEntry {
            index: i,
            file,
            task: e.kind,
            episode_steps: e.episode_steps,
            descriptor: e.descriptor(),
        });
    }
    write_json(
        &dir.join("manifest.json"),
        &DataManifest {
            version: FORMAT_VERSION,
            config_hash: cfg.hash(),
            expert_hz: cfg.codec.window.expert_hz,
            dims: cfg.data.dims,
            demos: entries,
        },
    )?;
    let steps: usize = experts.iter().map(|e| e.episode_steps).sum();
    println!(
        "demos: {} x {:?}, {} joints, {} episode steps total -> {}",
        experts.len(),
        cfg.data.task,
        cfg.data.dims,
        steps,
        dir.display()
    );
    let demos: Vec<Demo> = experts.iter().map(Demo::from).collect();
    write_targets(&cfg, &demos)?;
    Ok(())
}

fn prepare_targets(common: &Common) -> Result<()> {
    let cfg = validated(load_config(common)?)?;
    let dir = data_dir(&cfg);
    let manifest_path = dir.join("manifest.json");
    if !manifest_path.exists() {
        return Err(usage(format!("no corpus at {}; run gen-data first", dir.display())));
    }
    let manifest: DataManifest = read_json(&manifest_path)?;
    if manifest.dims != cfg.data.dims {
        return Err(usage(format!(
            "corpus has {} joints, config asks for {}",
            manifest.dims, cfg.data.dims
        )));
    }
    let demos = manifest.load_demos(&dir)?;
    write_targets(&cfg, &demos)?;
    Ok(())
}

fn load_prepared(cfg: &RunConfig) -> Result<Prepared> {
    let path = data_dir(cfg).join("targets.json");
    if !path.exists() {
        return Err(usage(format!("no targets at {}; run gen-data first", path.display())));
    }
    let doc: TargetsDoc = read_json(&path)?;
    if doc.degree != cfg.codec.degree || doc.dims != cfg.data.dims || doc.window != cfg.codec.window {
        return Err(usage("targets were prepared with a different codec configuration; rerun prepare-targets"));
    }
    let targets = doc.targets()?;
    let demos = targets.iter().map(|t| t.demo + 1).max().unwrap_or(0);
    let (train, held_out): (Vec<_>, Vec<_>) = targets.into_iter().partition(|t| t.demo < doc.train_demos);
    if train.is_empty() {
        return Err(usage("targets file holds no training targets"));
    }
    log::debug!("{demos} demos in targets file");
    Ok(Prepared {
        train,
        held_out,
        normalizer: doc.normalizer.to_normalizer()?,
        train_demos: doc.train_demos,
    })
}

/// Drops log records past `step` so a resumed run continues the curve without repeats.
fn truncate_log(path: &Path, step: usize) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let text = std::fs::read_to_string(path)?;
    let mut kept = String::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let rec: serde_json::Value = serde_json::from_str(line).with_context(|| format!("parsing {}", path.display()))?;
        if rec["step"].as_u64().is_some_and(|s| s as usize <= step) {
            kept.push_str(line);
            kept.push('\n');
        }
    }
    std::fs::write(path, kept)?;
    Ok(())
}

fn train(common: &Common, steps: Option<usize>, resume: Option<&Path>) -> Result<()> {
    let mut cfg = load_config(common)?;
    if let Some(s) = steps {
        cfg.train.steps = s;
    }
    let cfg = validated(cfg)?;
    let prepared = load_prepared(&cfg)?;
    let pairs = prepared.train_pairs()?;
    let dir = cfg.output_root().join("train");
    ensure_dir(&dir)?;
    let log_path = dir.join("log.ndjson");

    let (mut trainer, mut log) = match resume {
        Some(p) => {
            if !p.exists() {
                return Err(usage(format!("checkpoint {} does not exist", p.display())));
            }
            let doc: CheckpointDoc = read_json(p)?;
            let model = doc.model()?;
            if doc.architecture != cfg.architecture(prepared.cond_len()) {
                return Err(usage("checkpoint architecture does not match the configuration"));
            }
            let trainer = Trainer {
                model,
                adam: doc.adam,
                step: doc.step,
                seed: doc.seed,
            };
            truncate_log(&log_path, trainer.step)?;
            (trainer, NdjsonWriter::append(&log_path)?)
        }
        None => (pipeline::init_trainer(&cfg, prepared.cond_len())?, NdjsonWriter::create(&log_path)?),
    };
    let log_cell = std::cell::RefCell::new(&mut log);
    let start = trainer.step;
    let result = trainer.run(
        &pairs,
        &cfg.flow,
        &cfg.train,
        |r| {
            log_cell.borrow_mut().write(r)?;
            log::info!("step {} total {:.6} fm {:.6} cons {:.6}", r.step, r.total, r.fm_loss, r.cons_loss);
            Ok(())
        },
        |t| {
            log_cell.borrow_mut().flush()?;
            write_json(
                &dir.join(format!("checkpoint_{:06}.json", t.step)),
                &pipeline::checkpoint(&cfg, t, &prepared.normalizer),
            )
        },
    );
    drop(log_cell);
    log.flush()?;
    result?;
    let final_path = dir.join("final.json");
    write_json(&final_path, &pipeline::checkpoint(&cfg, &trainer, &prepared.normalizer))?;
    println!("trained steps {}..{} -> {}", start, trainer.step, final_path.display());
    if !prepared.held_out.is_empty() {
        let ev = evaluate(
            &trainer.model,
            &prepared.held_out_pairs()?,
            &prepared.normalizer,
            &cfg.codec.window,
            cfg.flow.prior_mode,
            cfg.flow.n_nfe,
            cfg.seed,
        )?;
        write_json(&dir.join("eval.json"), &ev)?;
        println!(
            "held-out one-step error {:.6} (prior gap {:.6}, relative {:.4}, trajectory mse {:.3e})",
            ev.prediction_error,
            ev.prior_gap,
            ev.relative_error(),
            ev.trajectory_mse
        );
    }
    Ok(())
}

struct RolloutArgs<'a> {
    checkpoint: Option<&'a Path>,
    oracle: bool,
    k_eval: Option<f64>,
    prior: Option<Prior>,
    nfe: Option<usize>,
    velocity_ff: Option<Switch>,
    seeds: Option<Vec<u64>>,
}

fn rollout(common: &Common, args: RolloutArgs) -> Result<()> {
    let mut cfg = load_config(common)?;
    if let Some(k) = args.k_eval {
        cfg.rollout.k_eval = k;
    }
    if let Some(p) = args.prior {
        cfg.flow.prior_mode = match p {
            Prior::History => PriorMode::History,
            Prior::Gaussian => PriorMode::Gaussian,
        };
    }
    if let Some(n) = args.nfe {
        cfg.flow.n_nfe = n;
    }
    if let Some(v) = args.velocity_ff {
        cfg.gains.velocity_ff = matches!(v, Switch::On);
    }
    if let Some(s) = args.seeds {
        cfg.rollout.seeds = s;
    }
    let mut cfg = validated(cfg)?;
    let dir = cfg.output_root().join("rollout");

    let loaded = if args.oracle {
        None
    } else {
        let path = args
            .checkpoint
            .map(Path::to_path_buf)
            .unwrap_or_else(|| cfg.output_root().join("train").join("final.json"));
        if !path.exists() {
            return Err(usage(format!("checkpoint {} does not exist", path.display())));
        }
        let doc: CheckpointDoc = read_json(&path)?;
        // the checkpoint's codec settings decide how its coefficients decode
        cfg.codec.window.stride = doc.window.stride;
        if doc.window != cfg.codec.window || doc.degree != cfg.codec.degree || doc.history_len != cfg.codec.history_len {
            return Err(usage("checkpoint codec settings differ from the configuration"));
        }
        Some((doc.model()?, doc.normalizer.to_normalizer()?))
    };
    let policy = match &loaded {
        Some((model, norm)) => pipeline::learned_policy(&cfg, model, norm)?,
        None => pipeline::oracle_policy(&cfg),
    };

    ensure_dir(&dir)?;
    let mut records = Vec::new();
    for &seed in &cfg.rollout.seeds {
        let rec = pipeline::run_episode(&cfg, &policy, seed)?;
        let m = compute_metrics(&rec)?;
        write_rollout_csv(&dir.join(format!("episode_{seed}.csv")), &rec)?;
        write_json(
            &dir.join(format!("episode_{seed}.json")),
            &RolloutSummary {
                version: FORMAT_VERSION,
                config_hash: cfg.hash(),
                seed,
                divergence: rec.divergence,
                metrics: m.clone(),
            },
        )?;
        println!(
            "seed {seed}: mae {:.6} rad, iae {:.6}, peak {:.6}, calls {}, junction gaps {:.2e} / {:.2e}{}",
            m.mae_total,
            m.iae,
            m.peak_error,
            m.calls,
            m.junction_position_gap,
            m.junction_velocity_gap,
            rec.divergence.map_or(String::new(), |s| format!(", diverged at step {s}"))
        );
        records.push(rec);
    }
    let report = latency_report(&records);
    write_json(&dir.join("latency.json"), &report)?;
    if let Some(c) = report.per_call_ms {
        println!(
            "latency: {} calls, per call mean {:.4} ms median {:.4} p95 {:.4}, amortized {:.6} ms/step",
            report.calls, c.mean, c.median, c.p95, report.per_step_ms
        );
    }
    Ok(())
}

fn sweep(spec_path: &Path) -> Result<()> {
    let text = std::fs::read_to_string(spec_path).with_context(|| format!("reading {}", spec_path.display()))?;
    let spec: SweepSpec = serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", spec_path.display())))?;
    spec.validate().map_err(|e| usage(e.to_string()))?;
    let result = run_sweep(&spec)?;
    let dir = spec
        .output_dir
        .clone()
        .unwrap_or_else(|| spec.base.output_root().join("bench"));
    let (csv, json) = write_sweep(&result, &dir)?;
    for c in &result.cells {
        println!(
            "{} = {}: mae {:.6} ± {:.6} ({} ok, {} failed)",
            result.parameter, c.value, c.mae_total.mean, c.mae_total.std, c.ok, c.failed
        );
    }
    println!("-> {} and {}", csv.display(), json.display());
    Ok(())
}

fn inspect(file: &Path, k_eval: Option<f64>, control_hz: f64) -> Result<()> {
    let c = read_coeffs(file)?;
    if c.is_normalized() {
        return Err(usage("coefficients are normalized; denormalize before decoding"));
    }
    let window = *c
        .window()
        .ok_or_else(|| usage("coefficient file carries no window; cannot place the execution slice"))?;
    let k = k_eval.unwrap_or(window.stride as f64);
    let decoder = SliceDecoder::new(&window, c.degree(), k, control_hz)?;
    let seg = decoder.decode(&c)?;
    let d = c.dims();
    let mut header = vec!["t".to_string()];
    header.extend((0..d).map(|j| format!("q_{j}")));
    header.extend((0..d).map(|j| format!("qdot_{j}")));
    let mut out = std::io::BufWriter::new(std::io::stdout().lock());
    let mut emit = || -> std::io::Result<()> {
        writeln!(out, "{}", header.join(","))?;
        for i in 0..seg.len() {
            let mut row = vec![format!("{:.16e}", i as f64 / control_hz)];
            row.extend((0..d).map(|j| format!("{:.16e}", seg.positions[(i, j)])));
            row.extend((0..d).map(|j| format!("{:.16e}", seg.velocities[(i, j)])));
            writeln!(out, "{}", row.join(","))?;
        }
        out.flush()
    };
    match emit() {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { common, demos, task } => gen_data(&common, demos, task),
        Command::PrepareTargets { common } => prepare_targets(&common),
        Command::Train { common, steps, resume } => train(&common, steps, resume.as_deref()),
        Command::Rollout {
            common,
            checkpoint,
            oracle,
            k_eval,
            prior,
            nfe,
            velocity_ff,
            seeds,
        } => rollout(
            &common,
            RolloutArgs {
                checkpoint: checkpoint.as_deref(),
                oracle,
                k_eval,
                prior,
                nfe,
                velocity_ff,
                seeds,
            },
        ),
        Command::Bench {
            command: BenchCommand::Sweep { spec },
        } => sweep(&spec),
        Command::Inspect { file, k_eval, control_hz } => inspect(&file, k_eval, control_hz),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
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
            eprintln!("error: {e:#}");
            let is_usage = e.downcast_ref::<Usage>().is_some()
                || matches!(e.downcast_ref::<FlashError>(), Some(FlashError::Config(_)));
            ExitCode::from(if is_usage { 1 } else { 2 })
        }
    }
}
