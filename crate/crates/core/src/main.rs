//! `ual`: dataset generation, experiment runs, evaluation, export and the
//! annotation server.

use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use ual_core::acquisition::{score_all, write_scores_csv, Method};
use ual_core::bayes::VariationalModel;
use ual_core::data::{gen_bars, gen_toy1, gen_toy2, gen_two_moons, write_csv, SampleId};
use ual_core::engine::{
    evaluate, run_experiment, write_outputs, ExperimentConfig, NoObserver, Run,
};
use ual_core::export::{self, Format};
use ual_core::numeric::Rng;
use ual_core::service::{serve, AppState};

#[derive(Parser)]
#[command(
    name = "ual",
    version,
    about = "Uncertainty-driven active learning with Bayesian classifiers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Toy1,
    Toy2,
    TwoMoons,
    Bars,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset file.
    GenData {
        #[arg(long, value_enum)]
        kind: Kind,
        /// Samples per class (toy1, toy2).
        #[arg(long, default_value_t = 500)]
        n_per_class: usize,
        /// Total samples (two-moons).
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long, default_value_t = 0.1)]
        noise: f64,
        /// Image side length (bars).
        #[arg(long, default_value_t = 8)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output path; `.csv` writes CSV with a `label` column, anything
        /// else the binary dataset format.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run an experiment with the simulated oracle.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Replaces the configured seeds; repeatable.
        #[arg(long)]
        seed: Vec<u64>,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        acquisition: Option<Method>,
        #[arg(long)]
        cycles: Option<usize>,
        #[arg(long)]
        budget: Option<usize>,
        /// Output directory (default `runs/<config stem>`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a run checkpoint on its test split.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Also write acquisition scores for every unlabeled sample.
        #[arg(long)]
        scores: Option<PathBuf>,
    },
    /// Tabulate reports found under a directory.
    Export {
        #[arg(long)]
        reports: PathBuf,
        #[arg(long, default_value = "csv")]
        format: String,
        /// Output directory (default: the reports directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Serve the annotation API.
    Serve {
        /// Start one session from this config.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        /// Session checkpoints are written here on shutdown.
        #[arg(long, default_value = "sessions")]
        checkpoint_dir: PathBuf,
        /// Resume the sessions checkpointed in `--checkpoint-dir`.
        #[arg(long)]
        restore: bool,
    },
}

/// Failure classes mapped to exit codes 2 (usage) and 1 (runtime).
enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

macro_rules! runtime_from {
    ($($t:ty),*) => {$(
        impl From<$t> for Failure {
            fn from(e: $t) -> Self {
                Failure::Runtime(e.into())
            }
        }
    )*};
}
runtime_from!(
    anyhow::Error,
    ual_core::Error,
    std::io::Error,
    serde_json::Error
);

fn usage<T>(r: ual_core::Result<T>, what: &str) -> Result<T, Failure> {
    r.map_err(|e| Failure::Usage(anyhow::Error::new(e).context(what.to_string())))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn dispatch(command: Command) -> Result<(), Failure> {
    match command {
        Command::GenData {
            kind,
            n_per_class,
            n,
            noise,
            size,
            seed,
            out,
        } => gen_data(kind, n_per_class, n, noise, size, seed, &out),
        Command::Run {
            config,
            seed,
            lambda,
            acquisition,
            cycles,
            budget,
            out,
        } => {
            let mut cfg = usage(
                ExperimentConfig::load(&config),
                &format!("loading {}", config.display()),
            )?;
            if !seed.is_empty() {
                cfg.seeds = seed;
            }
            cfg.lambda = lambda.unwrap_or(cfg.lambda);
            cfg.acquisition = acquisition.unwrap_or(cfg.acquisition);
            cfg.cycles = cycles.unwrap_or(cfg.cycles);
            cfg.budget = budget.unwrap_or(cfg.budget);
            usage(cfg.validate(), "invalid overrides")?;
            let out = out.unwrap_or_else(|| {
                let stem = config.file_stem().map(|s| s.to_string_lossy().into_owned());
                Path::new("runs").join(stem.unwrap_or_else(|| "run".into()))
            });
            run(&cfg, &base_dir(&config), &out)
        }
        Command::Eval {
            config,
            checkpoint,
            scores,
        } => eval(&config, &checkpoint, scores.as_deref()),
        Command::Export {
            reports,
            format,
            out,
        } => {
            let format: Format = usage(format.parse(), "--format")?;
            let all = usage(export::load_reports(&reports), "reading reports")?;
            let files = export::write(
                &export::tables(&all),
                out.as_deref().unwrap_or(&reports),
                format,
            )?;
            for f in files {
                println!("{}", f.display());
            }
            Ok(())
        }
        Command::Serve {
            config,
            port,
            host,
            checkpoint_dir,
            restore,
        } => serve_cmd(config.as_deref(), &host, port, checkpoint_dir, restore),
    }
}

fn base_dir(config: &Path) -> PathBuf {
    config.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn gen_data(
    kind: Kind,
    n_per_class: usize,
    n: usize,
    noise: f64,
    size: usize,
    seed: u64,
    out: &Path,
) -> Result<(), Failure> {
    let problem = match kind {
        Kind::TwoMoons if n < 2 || !(noise >= 0.0) => {
            Some("two-moons needs --n >= 2 and --noise >= 0")
        }
        Kind::Bars if size < 2 => Some("bars needs --size >= 2"),
        Kind::Toy1 | Kind::Toy2 | Kind::Bars if n_per_class == 0 => {
            Some("--n-per-class must be >= 1")
        }
        _ => None,
    };
    if let Some(p) = problem {
        return Err(Failure::Usage(anyhow::anyhow!(p)));
    }
    let ds = match kind {
        Kind::Toy1 => gen_toy1(n_per_class, seed),
        Kind::Toy2 => gen_toy2(n_per_class, seed),
        Kind::TwoMoons => gen_two_moons(n, noise, seed),
        Kind::Bars => gen_bars(n_per_class, size, seed),
    };
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    if out.extension().is_some_and(|e| e == "csv") {
        if ds.image_shape().is_some() {
            return Err(Failure::Usage(anyhow::anyhow!(
                "image datasets cannot be written as CSV"
            )));
        }
        write_csv(&ds, out, "label", b',')?;
    } else {
        ds.save(out)?;
    }
    println!(
        "{} samples, {} classes -> {}",
        ds.len(),
        ds.class_count,
        out.display()
    );
    Ok(())
}

fn run(cfg: &ExperimentConfig, base: &Path, out: &Path) -> Result<(), Failure> {
    let loaded = usage(cfg.dataset.load(base), "loading dataset")?;
    let (result, runs) = run_experiment(cfg, &loaded.dataset, &loaded.input_hash, &NoObserver)
        .map_err(|e| Failure::Runtime(anyhow::Error::new(e).context("experiment failed")))?;
    write_outputs(out, cfg, &result, &runs)
        .with_context(|| format!("writing {}", out.display()))?;
    for row in &result.aggregate {
        println!(
            "cycle {}: not confident {:.1}, accuracy {:.4}, labeled {:.4}",
            row.cycle_index,
            row.not_confident_count.median,
            row.accuracy.median,
            row.labeled_fraction.median
        );
    }
    println!("reports written to {}", out.display());
    Ok(())
}

fn eval(config: &Path, checkpoint: &Path, scores: Option<&Path>) -> Result<(), Failure> {
    let cfg = usage(
        ExperimentConfig::load(config),
        &format!("loading {}", config.display()),
    )?;
    let loaded = usage(cfg.dataset.load(&base_dir(config)), "loading dataset")?;
    let bytes =
        fs::read(checkpoint).with_context(|| format!("reading {}", checkpoint.display()))?;
    let run = Run::restore(&cfg, &loaded.dataset, &loaded.input_hash, &bytes)?;
    let mut rng = Rng::derive(run.ctx.seed, &[u64::MAX - 1]);
    let metrics = evaluate(
        &run.model,
        &run.ctx.test,
        cfg.m_predict,
        cfg.lambda,
        cfg.ece_bins,
        &mut rng,
    )?;
    println!("{}", serde_json::to_string_pretty(&metrics)?);
    if let Some(path) = scores {
        let ids: Vec<SampleId> = run.state.unlabeled.iter().copied().collect();
        if ids.is_empty() {
            return Err(anyhow::anyhow!("no unlabeled samples to score").into());
        }
        let x = run
            .ctx
            .pool
            .features
            .select_rows(&run.ctx.positions(&ids)?)?;
        let dists = run
            .model
            .predict_mc(&x, cfg.m_predict, cfg.lambda, &mut rng)?;
        let scored = score_all(cfg.acquisition, &ids, &dists, &mut rng)?;
        write_scores_csv(&scored, fs::File::create(path)?)?;
    }
    Ok(())
}

fn serve_cmd(
    config: Option<&Path>,
    host: &str,
    port: u16,
    checkpoint_dir: PathBuf,
    restore: bool,
) -> Result<(), Failure> {
    let addr: SocketAddr = format!("{host}:{port}")
        .parse()
        .map_err(|e| Failure::Usage(anyhow::anyhow!("bad address {host}:{port}: {e}")))?;
    let cfg = config
        .map(|p| {
            usage(
                ExperimentConfig::load(p),
                &format!("loading {}", p.display()),
            )
        })
        .transpose()?;
    let base = config.map(base_dir).unwrap_or_default();
    let state = Arc::new(AppState::new(base, Some(checkpoint_dir)));
    if restore {
        let ids = state.restore_sessions().context("restoring sessions")?;
        log::info!("restored sessions: {ids:?}");
    }
    if let Some(cfg) = cfg {
        let session = usage(state.create_session(cfg), "starting session")?;
        log::info!("session {} started", session.id);
    }
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .with_context(|| format!("binding {addr}"))?;
        log::info!("listening on http://{}", listener.local_addr()?);
        serve(listener, state, async {
            let _ = tokio::signal::ctrl_c().await;
            log::info!("shutting down");
        })
        .await?;
        Ok::<_, anyhow::Error>(())
    })?;
    Ok(())
}
