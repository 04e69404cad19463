//! Command-line driver: spectral analysis of checkpoint trajectories.

mod config;
mod pipeline;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use trajspec::synth::{Noise, Spike, SpikePlan};

use config::{config_error, ConfigError, RunConfig, SynthSettings};
use pipeline::Outcome;

#[derive(Parser, Debug)]
#[command(name = "trajspec", version, about = "Spectral analysis of training trajectories")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct GlobalArgs {
    /// TOML run configuration; flags override its keys.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    store: Option<PathBuf>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    run_id: Option<String>,
    /// Validation loss CSV with a `step,value` header.
    #[arg(long, global = true)]
    loss: Option<PathBuf>,
    /// Window length; repeat for a sweep.
    #[arg(long = "window", short = 'w', global = true)]
    windows: Vec<usize>,
    /// Analyze sketched deltas instead of full ones.
    #[arg(long, global = true)]
    sketch: bool,
    #[arg(long, global = true)]
    sketch_d: Option<usize>,
    #[arg(long, global = true)]
    sketch_seed: Option<u64>,
    #[arg(long, global = true)]
    granger_lags: Option<usize>,
    #[arg(long, global = true)]
    true_shift_step: Option<u64>,
    /// Worker threads; defaults to all cores.
    #[arg(long, global = true, env = "TRAJSPEC_THREADS")]
    threads: Option<usize>,
    /// Exit with status 4 when degenerate windows or fits occur.
    #[arg(long, global = true)]
    strict: bool,
    /// Replace cached sketches computed with a different configuration.
    #[arg(long, global = true)]
    overwrite: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Compute and persist the pairwise delta dot products.
    Dots,
    /// Rolling spectral observables per window and layer group.
    Analyze,
    /// Lag scans, sliding correlations and ratio ranking against the loss.
    Correlate,
    /// Bivariate, residualized and multivariate Granger tests.
    Granger,
    /// Phase segmentation and per-phase correlation.
    Segment,
    /// Shift detection on the gap-ratio series.
    DetectShift,
    /// Project the store's deltas to a seeded Gaussian sketch.
    Sketch,
    /// Generate a synthetic spiked trajectory store with ground truth.
    Synth(SynthArgs),
    /// Run the whole pipeline and gather one report.
    Report,
    /// Verify manifest, checksums and finiteness of a store.
    ValidateStore,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    p: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    stride: Option<u64>,
    /// Constant spike amplitudes in units of τ√p, comma separated.
    #[arg(long, value_delimiter = ',')]
    spikes: Vec<f64>,
}

fn resolve(g: &GlobalArgs, synth: Option<&SynthArgs>) -> Result<RunConfig> {
    let mut cfg = match &g.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(s) = &g.store {
        cfg.store_dir = Some(s.clone());
    }
    if let Some(o) = &g.out {
        cfg.out_dir = o.clone();
    }
    if let Some(r) = &g.run_id {
        cfg.run_id = r.clone();
    }
    if let Some(l) = &g.loss {
        cfg.loss_csv = Some(l.clone());
    }
    if !g.windows.is_empty() {
        cfg.windows = g.windows.clone();
    }
    if g.sketch {
        cfg.sketch.enabled = true;
    }
    if let Some(d) = g.sketch_d {
        cfg.sketch.d = Some(d);
    }
    if let Some(s) = g.sketch_seed {
        cfg.sketch.seed = s;
    }
    if let Some(l) = g.granger_lags {
        cfg.stats.granger_lags = l;
    }
    if let Some(s) = g.true_shift_step {
        cfg.stats.true_shift_step = Some(s);
    }
    if let Some(a) = synth {
        apply_synth_flags(&mut cfg, a)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn apply_synth_flags(cfg: &mut RunConfig, a: &SynthArgs) -> Result<()> {
    let flagged = a.n.is_some() || a.p.is_some() || !a.spikes.is_empty();
    if cfg.synth.is_none() {
        if !flagged {
            return Ok(());
        }
        let (Some(n), Some(p)) = (a.n, a.p) else {
            return Err(config_error("synth without a [synth] section needs --n and --p"));
        };
        cfg.synth = Some(SynthSettings {
            n,
            p,
            seed: 0,
            stride: 200,
            first_step: 0,
            plan: SpikePlan {
                spikes: Vec::new(),
                tau: 1.0,
                noise: Noise::Isotropic,
                noise_scale: None,
                window: cfg.max_window(),
            },
            loss: None,
        });
    }
    let s = cfg.synth.as_mut().expect("synth settings present");
    if let Some(n) = a.n {
        s.n = n;
    }
    if let Some(p) = a.p {
        s.p = p;
    }
    if let Some(seed) = a.seed {
        s.seed = seed;
    }
    if let Some(stride) = a.stride {
        s.stride = stride;
    }
    if !a.spikes.is_empty() {
        s.plan.spikes = a.spikes.iter().map(|&v| Spike::constant(v)).collect();
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<Outcome> {
    let g = &cli.global;
    let synth_args = match &cli.command {
        Command::Synth(a) => Some(a),
        _ => None,
    };
    let cfg = resolve(g, synth_args)?;
    if let Some(t) = g.threads {
        if t == 0 {
            return Err(config_error("thread count must be positive"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| config_error(e.to_string()))?;
    }
    let (_, outcome) = match cli.command {
        Command::Dots => pipeline::cmd_dots(&cfg, g.overwrite)?,
        Command::Analyze => pipeline::cmd_analyze(&cfg)?,
        Command::Correlate => pipeline::cmd_correlate(&cfg)?,
        Command::Granger => pipeline::cmd_granger(&cfg)?,
        Command::Segment => pipeline::cmd_segment(&cfg)?,
        Command::DetectShift => pipeline::cmd_detect_shift(&cfg)?,
        Command::Sketch => pipeline::cmd_sketch(&cfg, g.overwrite)?,
        Command::Synth(_) => pipeline::cmd_synth(&cfg)?,
        Command::Report => pipeline::cmd_report(&cfg, g.overwrite)?,
        Command::ValidateStore => pipeline::cmd_validate_store(&cfg)?,
    };
    Ok(outcome)
}

/// High-water mark of resident memory, where the kernel reports it.
fn peak_resident_kib() -> Option<u64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmHWM:"))?;
    line.split_whitespace().nth(1)?.parse().ok()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = run(&cli);
    if let Some(kib) = peak_resident_kib() {
        log::info!("peak resident memory {kib} KiB");
    }
    match result {
        Ok(outcome) => {
            if outcome.degenerate_windows > 0 {
                log::warn!("{} degenerate windows or fits", outcome.degenerate_windows);
                if cli.global.strict {
                    return ExitCode::from(4);
                }
            }
            if outcome.no_detection {
                log::warn!("no shift detected");
                return ExitCode::from(5);
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.chain().any(|c| c.is::<ConfigError>()) {
                ExitCode::from(2)
            } else {
                ExitCode::from(3)
            }
        }
    }
}
