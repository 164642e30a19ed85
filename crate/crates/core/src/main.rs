use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fluid::harness::{self, config, InferMode, InferRequest, Method, PfOptions, Reference, Run, Source};

#[derive(Parser)]
#[command(
    name = "fluid",
    version,
    about = "Amortized filtering and smoothing with conditional flows"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// Built-in preset, applied before any config file (repeatable).
    #[arg(long)]
    preset: Vec<String>,
    /// TOML config file (repeatable; later files override earlier ones).
    #[arg(long, short)]
    config: Vec<PathBuf>,
    /// Override one key, e.g. `--set train.epochs=10` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; `runs/<name>` by default.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Simulate the train/test trajectories.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        n_train: Option<usize>,
        #[arg(long)]
        n_test: Option<usize>,
        #[arg(long)]
        t_train: Option<usize>,
        #[arg(long)]
        t_eval: Option<usize>,
    },
    /// Train the encoder and both flows.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        shared_summary: Option<bool>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Filtering or smoothing samples for one observation sequence.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "filter")]
        mode: InferMode,
        /// Condition on the first `t` observations.
        #[arg(long)]
        t: Option<usize>,
        /// Observation CSV instead of a dataset test trajectory.
        #[arg(long)]
        obs: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        trajectory: usize,
        #[arg(long)]
        samples: Option<usize>,
        /// Also write every raw sample.
        #[arg(long)]
        save_samples: bool,
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Particle filter over the test trajectories.
    Pf {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        particles: Option<usize>,
        #[arg(long, value_enum)]
        resampler: Option<ResamplerArg>,
        #[arg(long, value_enum)]
        factors: Option<FactorArg>,
        #[arg(long)]
        bootstrap: bool,
        #[arg(long)]
        retrain: bool,
    },
    /// Accuracy metrics over the test trajectories.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "fluid")]
        method: Method,
        #[arg(long, value_enum, default_value = "none")]
        reference: Reference,
    },
    /// Importance-weight diagnostic of the particle-filter factors.
    Ess {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, value_enum)]
        factors: Option<FactorArg>,
        #[arg(long)]
        retrain: bool,
    },
    /// Print the effective configuration.
    Config {
        #[command(flatten)]
        common: Common,
    },
    /// List the built-in presets.
    Presets,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum ResamplerArg {
    Multinomial,
    Systematic,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum FactorArg {
    Learned,
    Exact,
}

fn opt_set<T: std::fmt::Display>(sets: &mut Vec<String>, key: &str, v: Option<T>) {
    if let Some(v) = v {
        sets.push(format!("{key}={v}"));
    }
}

fn factor_name(f: FactorArg) -> &'static str {
    match f {
        FactorArg::Learned => "\"learned\"",
        FactorArg::Exact => "\"exact\"",
    }
}

fn load(common: &Common, mut extra: Vec<String>) -> fluid::Result<harness::ExperimentConfig> {
    let mut sources: Vec<Source> = common.preset.iter().map(|p| Source::Preset(p.clone())).collect();
    sources.extend(common.config.iter().map(|p| Source::File(p.clone())));
    let mut sets = common.sets.clone();
    opt_set(&mut sets, "seed", common.seed);
    sets.append(&mut extra);
    harness::load_config(&sources, &sets)
}

fn open(common: &Common, extra: Vec<String>) -> fluid::Result<Run> {
    let cfg = load(common, extra)?;
    let out = common
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from("runs").join(&cfg.name));
    Run::new(cfg, out)
}

fn run(cli: Cli) -> fluid::Result<()> {
    match cli.cmd {
        Cmd::Generate {
            common,
            n_train,
            n_test,
            t_train,
            t_eval,
        } => {
            let mut s = Vec::new();
            opt_set(&mut s, "data.n_train", n_train);
            opt_set(&mut s, "data.n_test", n_test);
            opt_set(&mut s, "data.t_train", t_train);
            opt_set(&mut s, "data.t_eval", t_eval);
            let r = open(&common, s)?;
            let ds = harness::cmd_generate(&r)?;
            println!(
                "dataset: train {:?}, test {:?} -> {}",
                ds.train.states.dim(),
                ds.test.states.dim(),
                r.out.display()
            );
        }
        Cmd::Train {
            common,
            resume,
            shared_summary,
            epochs,
        } => {
            let mut s = Vec::new();
            opt_set(&mut s, "arch.shared_summary", shared_summary);
            opt_set(&mut s, "train.epochs", epochs);
            let r = open(&common, s)?;
            let (model, report) = harness::cmd_train(&r, resume.as_deref())?;
            if let Some(last) = report.curve.last() {
                println!(
                    "epoch {}: train {:.4}, val {:.4}",
                    last.epoch, last.train_nll, last.val_nll
                );
            }
            println!("model after {} epochs -> {}", model.trained_epochs, r.out.display());
        }
        Cmd::Infer {
            common,
            mode,
            t,
            obs,
            trajectory,
            samples,
            save_samples,
            model,
        } => {
            let mut s = Vec::new();
            opt_set(&mut s, "infer.n_sample", samples);
            if save_samples {
                s.push("infer.save_samples=true".into());
            }
            let r = open(&common, s)?;
            let req = InferRequest {
                mode,
                t,
                obs,
                trajectory,
                model,
            };
            let out = harness::cmd_infer(&r, &req)?;
            println!("{:?} samples (steps, draws, dims) -> {}", out.dim(), r.out.display());
        }
        Cmd::Pf {
            common,
            particles,
            resampler,
            factors,
            bootstrap,
            retrain,
        } => {
            let mut s = Vec::new();
            opt_set(&mut s, "pf.particles", particles);
            opt_set(
                &mut s,
                "pf.resampler",
                resampler.map(|r| match r {
                    ResamplerArg::Multinomial => "\"multinomial\"",
                    ResamplerArg::Systematic => "\"systematic\"",
                }),
            );
            opt_set(&mut s, "pf.factors", factors.map(factor_name));
            if bootstrap {
                s.push("pf.bootstrap=true".into());
            }
            let r = open(&common, s)?;
            let out = harness::cmd_pf(&r, &PfOptions { retrain })?;
            if let Some(m) = out.metrics.last() {
                println!("pf mean rmse {:.4}, mmd {:.4}, crps {:.4}", m.rmse, m.mmd, m.crps);
            }
        }
        Cmd::Evaluate {
            common,
            method,
            reference,
        } => {
            let r = open(&common, Vec::new())?;
            let ev = harness::cmd_evaluate(&r, method, reference)?;
            for row in ev.rows.iter().filter(|r| r.trajectory.is_none()) {
                println!(
                    "{:<14} rmse {:.4}  mmd {:.4}  crps {:.4}",
                    row.distribution, row.rmse, row.mmd, row.crps
                );
            }
            if let Some((kl, se)) = ev.mean_kl() {
                println!("mean filtering KL {kl:.4} (se {se:.4})");
            }
        }
        Cmd::Ess {
            common,
            samples,
            steps,
            factors,
            retrain,
        } => {
            let mut s = Vec::new();
            opt_set(&mut s, "pf.ess_samples", samples);
            opt_set(&mut s, "pf.ess_steps", steps);
            opt_set(&mut s, "pf.factors", factors.map(factor_name));
            let r = open(&common, s)?;
            for (k, rep) in harness::cmd_ess(&r, &PfOptions { retrain })? {
                println!("step {k:>4}: RESS {:.4}  chi2 {:.4}", rep.ress, rep.chi2);
            }
        }
        Cmd::Config { common } => {
            print!("{}", load(&common, Vec::new())?.to_toml()?);
        }
        Cmd::Presets => {
            for (name, _) in config::PRESETS {
                println!("{name}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
