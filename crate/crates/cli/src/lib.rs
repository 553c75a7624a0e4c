//! The `npgrid` command line.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime error.

pub mod config;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use npgrid::eval::{emit_prediction_bands, estimate_predictive_ll, latent_manipulation_grid, probe_global_uncertainty};
use npgrid::seed::rng_for;
use npgrid::tasks::{read_tasks, sample_tasks, write_tasks, Task};
use npgrid::training::{persist_checkpoint, restore_checkpoint, train_with, Checkpoint, DataSpec};
use serde_json::json;

use config::{keys_help, parse_config, ConfigError, Resolved};

#[derive(Parser, Debug)]
#[command(name = "npgrid", version, about = "Neural processes on discretized grids")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// TOML config file
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// `key=value`, repeatable; beats the config file
    #[arg(long = "override", short = 'o', global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Shorthand for `--override run.seed=N`
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Shorthand for `--override run.threads=N`
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// More logging (-v info, -vv debug)
    #[arg(long, short = 'v', global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write held-out tasks to <out>/tasks.gbcn
    GenData,
    /// Train a model; writes checkpoint.gbcn, checkpoint.best.gbcn and metrics.jsonl
    Train,
    /// Score a checkpoint on held-out tasks; writes eval.json
    Eval,
    /// Latent mean and scale given few context points; writes probe.json
    Probe {
        /// Context sizes to probe (replaces probe.epsilons)
        #[arg(long, value_delimiter = ',')]
        epsilon: Vec<usize>,
    },
    /// Sweep two latent coordinates; writes grid.jsonl
    Manipulate {
        #[arg(long)]
        task_id: Option<usize>,
    },
    /// Predictive bands, one per latent sample; writes bands.jsonl
    Bands {
        #[arg(long)]
        task_id: Option<usize>,
    },
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Usage(e.0)
    }
}

impl From<npgrid::Error> for Failure {
    fn from(e: npgrid::Error) -> Self {
        match e {
            npgrid::Error::Config(m) => Failure::Usage(m),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure::Runtime(format!("{}: {e}", path.display()))
}

fn command() -> clap::Command {
    let help = keys_help();
    let mut cmd = Cli::command().after_long_help(help.clone());
    let names: Vec<String> = cmd.get_subcommands().map(|s| s.get_name().to_string()).collect();
    for name in names {
        let h = help.clone();
        cmd = cmd.mut_subcommand(name, |s| s.after_help(h));
    }
    cmd
}

/// Runs the CLI on `args` (including the program name) and returns the
/// process exit code.
pub fn run_cli<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let matches = match command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let cli = Cli::from_arg_matches(&matches).expect("matches come from the same definition");
    let _ = env_logger::Builder::new()
        .filter_level(match cli.global.verbose {
            0 => log::LevelFilter::Warn,
            1 => log::LevelFilter::Info,
            _ => log::LevelFilter::Debug,
        })
        .try_init();
    match run(cli) {
        Ok(()) => 0,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            eprintln!("run `npgrid --help` for the list of keys");
            1
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            2
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let g = &cli.global;
    let mut overrides = g.overrides.clone();
    if let Some(s) = g.seed {
        overrides.push(format!("run.seed={s}"));
    }
    if let Some(t) = g.threads {
        overrides.push(format!("run.threads={t}"));
    }
    match &cli.command {
        Command::Probe { epsilon } if !epsilon.is_empty() => {
            let list: Vec<String> = epsilon.iter().map(usize::to_string).collect();
            overrides.push(format!("probe.epsilons=[{}]", list.join(",")));
        }
        Command::Manipulate { task_id: Some(id) } => overrides.push(format!("manipulate.task_id={id}")),
        Command::Bands { task_id: Some(id) } => overrides.push(format!("bands.task_id={id}")),
        _ => {}
    }
    let cfg = parse_config(g.config.as_deref(), &overrides, std::env::vars())?;
    eprintln!("npgrid: preset `{}`", cfg.preset());
    for (k, v, src) in cfg.entries() {
        log::info!("{k} = {v} ({src})");
    }
    if cfg.threads() == 0 {
        return Err(Failure::Usage("run.threads must be at least 1".into()));
    }
    fs::create_dir_all(&g.out).map_err(|e| io_failure(&g.out, e))?;
    let out = g.out.as_path();
    match cli.command {
        Command::GenData => gen_data(&cfg, out),
        Command::Train => train(&cfg, out),
        Command::Eval => eval(&cfg, out),
        Command::Probe { .. } => probe(&cfg, out),
        Command::Manipulate { .. } => manipulate(&cfg, out),
        Command::Bands { .. } => bands(&cfg, out),
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    fs::write(path, bytes).map_err(|e| io_failure(path, e))
}

fn json_lines<T: serde::Serialize>(path: &Path, records: &[T]) -> Result<(), Failure> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r).expect("records serialize");
        buf.push(b'\n');
    }
    write_file(path, &buf)
}

fn json_file(path: &Path, value: &serde_json::Value) -> Result<(), Failure> {
    let mut text = serde_json::to_string_pretty(value).expect("values serialize");
    text.push('\n');
    write_file(path, text.as_bytes())
}

fn gen_data(cfg: &Resolved, out: &Path) -> Result<(), Failure> {
    let data = cfg.data()?;
    let split = cfg.string("gen.split");
    if !["train", "valid", "test"].contains(&split) {
        return Err(Failure::Usage(format!(
            "gen.split `{split}` is not train, valid or test"
        )));
    }
    let shape = cfg.task_shape();
    let tasks = sample_tasks(&data.source()?, &shape, cfg.seed(), split, cfg.int("gen.count"))?;
    let info = json!({
        "source": data.to_string(),
        "split": split,
        "seed": cfg.seed(),
        "task_shape": shape,
    });
    let path = out.join("tasks.gbcn");
    write_tasks(&path, &tasks, info)?;
    println!("{} tasks -> {}", tasks.len(), path.display());
    Ok(())
}

fn train(cfg: &Resolved, out: &Path) -> Result<(), Failure> {
    let tc = cfg.train()?;
    let wall = cfg.bool("train.log_wall_time");
    let metrics_path = out.join("metrics.jsonl");
    let ckpt_path = out.join("checkpoint.gbcn");
    let mut log = fs::File::create(&metrics_path).map_err(|e| io_failure(&metrics_path, e))?;
    let outcome = train_with(&tc, |m, ck| {
        let mut m = *m;
        if !wall {
            m.wall_seconds = 0.0;
        }
        let line = serde_json::to_string(&m).expect("metrics serialize");
        writeln!(log, "{line}").map_err(|source| npgrid::Error::Io {
            path: metrics_path.clone(),
            source,
        })?;
        persist_checkpoint(ck, &ckpt_path)
    })?;
    persist_checkpoint(&outcome.last, &ckpt_path)?;
    persist_checkpoint(&outcome.best, out.join("checkpoint.best.gbcn"))?;
    let last = outcome.metrics.last().expect("at least one epoch");
    println!(
        "{} trained for {} epochs: val_ll {:.4} -> {}",
        tc.model.kind,
        tc.epochs,
        last.val_ll,
        ckpt_path.display()
    );
    Ok(())
}

fn checkpoint(cfg: &Resolved, out: &Path) -> Result<Checkpoint, Failure> {
    let p = match cfg.string("run.checkpoint") {
        "" => out.join("checkpoint.gbcn"),
        p => PathBuf::from(p),
    };
    restore_checkpoint(&p).map_err(|e| Failure::Runtime(format!("{}: {e}", p.display())))
}

/// The first `count` held-out tasks: from `data.tasks_file` when set,
/// otherwise synthesized from the `"test"` streams of the seed.
fn held_out(cfg: &Resolved, count: usize) -> Result<(Vec<Task>, String), Failure> {
    match cfg.string("data.tasks_file") {
        "" => {
            let data = cfg.data()?;
            let tasks = sample_tasks(&data.source()?, &cfg.task_shape(), cfg.seed(), "test", count)?;
            Ok((tasks, data.to_string()))
        }
        path => {
            let (mut tasks, info) = read_tasks(path)?;
            if tasks.len() < count {
                return Err(Failure::Runtime(format!(
                    "{path} holds {} tasks, {count} requested",
                    tasks.len()
                )));
            }
            tasks.truncate(count);
            let source = info.get("source").and_then(|s| s.as_str()).unwrap_or(path).to_string();
            Ok((tasks, source))
        }
    }
}

/// A single held-out task by index.
fn held_out_task(cfg: &Resolved, id: usize) -> Result<Task, Failure> {
    if cfg.string("data.tasks_file").is_empty() {
        let data: DataSpec = cfg.data()?;
        let mut rng = rng_for(cfg.seed(), "test", id as u64);
        return Ok(data.source()?.sample_task(&cfg.task_shape(), &mut rng)?);
    }
    let (mut tasks, _) = held_out(cfg, id + 1)?;
    Ok(tasks.swap_remove(id))
}

fn eval(cfg: &Resolved, out: &Path) -> Result<(), Failure> {
    let ck = checkpoint(cfg, out)?;
    let n_tasks = cfg.int("eval.tasks");
    let (tasks, source) = held_out(cfg, n_tasks)?;
    let n_z = cfg.int("eval.n_z");
    let e = estimate_predictive_ll(&ck.params, &tasks, n_z, cfg.seed(), cfg.threads())?;
    let summary = json!({
        "model": ck.params.kind().name(),
        "data": source,
        "n_tasks": tasks.len(),
        "n_z": if ck.params.kind().is_latent() { Some(n_z) } else { None },
        "seed": cfg.seed(),
        "checkpoint_epoch": ck.epoch,
        "log_likelihood": { "mean": e.mean, "std_error": e.std_error },
    });
    json_file(&out.join("eval.json"), &summary)?;
    println!(
        "{}: {:.4} ± {:.4} per point over {} tasks",
        ck.params.kind(),
        e.mean,
        e.std_error,
        e.n
    );
    Ok(())
}

fn probe(cfg: &Resolved, out: &Path) -> Result<(), Failure> {
    let ck = checkpoint(cfg, out)?;
    let (tasks, source) = held_out(cfg, cfg.int("probe.tasks"))?;
    let mut results = Vec::new();
    for eps in cfg.ints("probe.epsilons") {
        let r = probe_global_uncertainty(&ck.params, &tasks, eps, cfg.seed(), cfg.threads())?;
        println!("epsilon {eps}: mu_z {:.3e}  sigma_z {:.4}", r.mu_z_mean, r.sigma_z_mean);
        results.push(r);
    }
    let doc = json!({
        "model": ck.params.kind().name(),
        "data": source,
        "seed": cfg.seed(),
        "probes": results,
    });
    json_file(&out.join("probe.json"), &doc)
}

fn manipulate(cfg: &Resolved, out: &Path) -> Result<(), Failure> {
    let ck = checkpoint(cfg, out)?;
    let dims = cfg.ints("manipulate.dims");
    let [i, j] = dims[..] else {
        return Err(Failure::Usage(format!(
            "manipulate.dims needs two entries, got {dims:?}"
        )));
    };
    let task = held_out_task(cfg, cfg.int("manipulate.task_id"))?;
    let cells = latent_manipulation_grid(
        &ck.params,
        &task,
        (i, j),
        cfg.int("manipulate.steps"),
        cfg.float("manipulate.pct_lo"),
        cfg.float("manipulate.pct_hi"),
        cfg.float("manipulate.relax"),
    )?;
    json_lines(&out.join("grid.jsonl"), &cells)?;
    println!("{} cells -> {}", cells.len(), out.join("grid.jsonl").display());
    Ok(())
}

fn bands(cfg: &Resolved, out: &Path) -> Result<(), Failure> {
    let ck = checkpoint(cfg, out)?;
    let id = cfg.int("bands.task_id");
    let task = held_out_task(cfg, id)?;
    let bands = emit_prediction_bands(&ck.params, &task, id, cfg.int("bands.n_z"), cfg.seed())?;
    json_lines(&out.join("bands.jsonl"), &bands)?;
    println!("{} bands -> {}", bands.len(), out.join("bands.jsonl").display());
    Ok(())
}
