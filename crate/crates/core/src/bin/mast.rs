//! Command-line front end. Exit codes: 0 success, 1 usage, 2 runtime failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use mast::config::RunConfig;
use mast::eval::{check_split, report_csv, report_table, run_eval, EvalConfig, Split};
use mast::policy::{load_policy, Variant};
use mast::ppo::{train, PpoError};
use mast::replay::{replay, write_export};
use mast::worldset::{load_manifest, load_split, load_world_file, make_worlds};

/// Name of the effective configuration echoed into every run directory.
const CONFIG_ECHO: &str = "config.txt";

#[derive(Parser)]
#[command(name = "mast", version, about = "Semantic-map navigation: worlds, training, evaluation, replay")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// key=value configuration file ('#' comments).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. --set ppo.clip=0.1 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate SEMWORLD files plus a train/val manifest.
    MakeWorlds {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 10)]
        count: usize,
        #[arg(long, default_value_t = 0.8)]
        train_fraction: f64,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train one ablation variant with PPO.
    Train {
        /// One of RGBD, RGBD+EXP, RGBD+SEM, RGBD+OCC+ATT, MaAST.
        #[arg(long)]
        variant: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        /// Print metrics rows to stderr as they are written.
        #[arg(long)]
        verbose: bool,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Evaluate a checkpoint on the validation split of a world directory.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        worlds: PathBuf,
        #[arg(long, default_value_t = 100)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// CSV report path; the aligned table goes next to it with a .txt extension.
        #[arg(long)]
        report: PathBuf,
        /// Argmax actions instead of sampling.
        #[arg(long)]
        greedy: bool,
        /// Accept val worlds whose layout equals a training world (names are always checked).
        #[arg(long)]
        allow_identical_layouts: bool,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Run one greedy episode and export PPM images.
    Replay {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        world: PathBuf,
        #[arg(long, default_value_t = 0)]
        episode_seed: u64,
        #[arg(long)]
        export: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

enum Failure {
    Usage(String),
    Runtime(String),
}

fn usage(e: impl std::fmt::Display) -> Failure {
    Failure::Usage(e.to_string())
}

fn runtime(e: impl std::fmt::Display) -> Failure {
    Failure::Runtime(e.to_string())
}

/// Defaults, then `fallback` (a run's echoed config) when no file is given,
/// then the file, then `--set` overrides.
fn load_config(args: &ConfigArgs, fallback: Option<&Path>) -> Result<RunConfig, Failure> {
    let mut cfg = RunConfig::default();
    let file = args.config.as_deref().or(fallback.filter(|p| p.exists()));
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
        cfg.apply_text(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    }
    for s in &args.sets {
        let (k, v) = s.split_once('=').ok_or_else(|| usage(format!("--set expects KEY=VALUE, got {s:?}")))?;
        cfg.set(k.trim(), v.trim()).map_err(usage)?;
    }
    Ok(cfg)
}

fn echo_path(checkpoint: &Path) -> PathBuf {
    checkpoint.parent().unwrap_or(Path::new(".")).join(CONFIG_ECHO)
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), Failure> {
    std::fs::write(path, contents).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn run(cmd: Cmd) -> Result<(), Failure> {
    match cmd {
        Cmd::MakeWorlds { out, seed, count, train_fraction, cfg } => {
            let cfg = load_config(&cfg, None)?;
            if !(0.0..=1.0).contains(&train_fraction) {
                return Err(usage("--train-fraction must lie in [0, 1]"));
            }
            let m = make_worlds(&out, &cfg.world, seed, count, train_fraction).map_err(runtime)?;
            println!(
                "wrote {count} worlds to {} ({} train, {} val)",
                out.display(),
                m.files(Split::Train).count(),
                m.files(Split::Val).count()
            );
        }
        Cmd::Train { variant, seed, steps, out, verbose, cfg: args } => {
            let mut cfg = load_config(&args, None)?;
            if let Some(v) = variant {
                cfg.variant = v.parse::<Variant>().map_err(usage)?;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(s) = steps {
                cfg.train.total_steps = s;
            }
            cfg.validate().map_err(usage)?;
            std::fs::create_dir_all(&out).map_err(|e| runtime(format!("{}: {e}", out.display())))?;
            write(&out.join(CONFIG_ECHO), cfg.to_text())?;
            let (train_worlds, eval_worlds) = cfg.resolve_worlds().map_err(runtime)?;
            let mut setup = cfg.train_setup(train_worlds, eval_worlds);
            setup.verbose = verbose;
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let outcome = train(&setup, &mut rng, &out).map_err(|e| match e {
                PpoError::Config(m) => usage(m),
                other => runtime(format!("training aborted: {other}")),
            })?;
            println!("trained {} for {} steps; final checkpoint {}", cfg.variant, outcome.steps, outcome.final_checkpoint.display());
        }
        Cmd::Eval { checkpoint, worlds, episodes, seed, report, greedy, allow_identical_layouts, cfg: args } => {
            let cfg = load_config(&args, Some(&echo_path(&checkpoint)))?;
            let (net, store) = load_policy(&checkpoint).map_err(runtime)?;
            let manifest = load_manifest(&worlds).map_err(runtime)?;
            let eval_set = load_split(&worlds, &manifest, Split::Val).map_err(runtime)?;
            if eval_set.is_empty() {
                return Err(runtime(format!("{} has no val worlds", worlds.display())));
            }
            let (train_worlds, _) = cfg.resolve_worlds().map_err(runtime)?;
            check_split(&eval_set, &manifest, &train_worlds, allow_identical_layouts).map_err(runtime)?;
            let ws: Vec<Arc<_>> = eval_set.into_iter().map(|(_, w)| w).collect();
            let ecfg = EvalConfig {
                episodes,
                seed,
                greedy,
                min_geo: cfg.min_geo,
                max_geo: cfg.max_geo,
                success: cfg.success_config(),
            };
            let (rep, _) = run_eval(&net, &store, &ws, &cfg.sensor, &ecfg).map_err(runtime)?;
            let table = report_table(std::slice::from_ref(&rep));
            write(&report, report_csv(std::slice::from_ref(&rep)))?;
            write(&report.with_extension("txt"), &table)?;
            print!("{table}");
        }
        Cmd::Replay { checkpoint, world, episode_seed, export, cfg: args } => {
            let cfg = load_config(&args, Some(&echo_path(&checkpoint)))?;
            let (net, store) = load_policy(&checkpoint).map_err(runtime)?;
            let w = Arc::new(load_world_file(&world).map_err(runtime)?);
            let ex = replay(&net, &store, w, episode_seed, &cfg.sensor, cfg.min_geo, cfg.max_geo, &cfg.success_config())
                .map_err(runtime)?;
            let files = write_export(&ex, &export).map_err(|e| runtime(format!("{}: {e}", export.display())))?;
            let r = &ex.trace.result;
            println!(
                "episode: {} steps, success {}, path {} / shortest {}; wrote {} images to {}",
                r.steps,
                r.success,
                r.path_length,
                r.shortest_path,
                files.len(),
                export.display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("usage error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}
