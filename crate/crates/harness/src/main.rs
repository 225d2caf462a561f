use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use drift_core::attacks::{AttackKind, AttackSpec, EotOracle, Norm};
use drift_core::diagnostics::{self, ConsensusMode};
use drift_harness::checkpoint::Checkpoint;
use drift_harness::config::{self, ExperimentConfig};
use drift_harness::dataset::generate_synthetic_dataset;
use drift_harness::experiment::{self, MANIFEST};

#[derive(Parser)]
#[command(name = "drift", version, about = "Train and attack ensembles of learned input filters")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full pipeline from a JSON config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Attack the eval split of a checkpoint; one CSV row per sample on stdout.
    Attack {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = KindArg::Pgd)]
        attack: KindArg,
        #[arg(long, value_enum, default_value_t = NormArg::Linf)]
        norm: NormArg,
        /// Budget in pixel units; `a/b` fractions are accepted.
        #[arg(long, value_parser = parse_fraction, default_value = "4/255")]
        eps: f64,
        #[arg(long, default_value_t = 40)]
        steps: usize,
        #[arg(long, default_value_t = 5)]
        eot: usize,
        #[arg(long)]
        bpda: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Limit the number of eval samples.
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Print one diagnostic as JSON.
    Diagnose {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        what: What,
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Print a loss landscape grid as CSV.
    Landscape {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_parser = parse_fraction, default_value = "3/255")]
        tau: f64,
        #[arg(long, default_value_t = 41)]
        grid: usize,
        #[arg(long, default_value_t = 128)]
        eot: usize,
        /// Eval sample index to centre the grid on.
        #[arg(long, default_value_t = 0)]
        sample: usize,
    },
    /// Summarise every run found in a directory.
    Report {
        #[arg(long)]
        dir: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Pgd,
    Mim,
    Square,
}

#[derive(Clone, Copy, ValueEnum)]
enum NormArg {
    Linf,
    L2,
}

#[derive(Clone, Copy, ValueEnum)]
enum What {
    Consensus,
    Mismatch,
    Transfer,
    Probes,
    Gradnorm,
}

fn parse_fraction(s: &str) -> std::result::Result<f64, String> {
    let v = match s.split_once('/') {
        Some((a, b)) => {
            let a: f64 = a.trim().parse().map_err(|_| format!("bad number `{a}`"))?;
            let b: f64 = b.trim().parse().map_err(|_| format!("bad number `{b}`"))?;
            a / b
        }
        None => s.trim().parse().map_err(|_| format!("bad number `{s}`"))?,
    };
    if v.is_finite() {
        Ok(v)
    } else {
        Err(format!("`{s}` is not finite"))
    }
}

/// Checkpoint plus the resolved config of the run that produced it.
fn load_run(checkpoint: &Path) -> Result<(Checkpoint, ExperimentConfig)> {
    let ck = Checkpoint::load(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let manifest = checkpoint.parent().unwrap_or(Path::new(".")).join(MANIFEST);
    let cfg = if manifest.is_file() {
        experiment::load_manifest(&manifest).with_context(|| format!("reading {}", manifest.display()))?
    } else {
        let mut cfg = ExperimentConfig::default();
        if let Some(seed) = config::seed_override()? {
            cfg.seed = seed;
        }
        cfg.resolved()
    };
    Ok((ck, cfg))
}

fn eval_split(cfg: &ExperimentConfig, samples: Option<usize>) -> Result<drift_core::Dataset> {
    let (_, eval) = generate_synthetic_dataset(&cfg.dataset)?;
    Ok(match samples {
        Some(n) => eval.head(n.min(eval.len())),
        None => eval,
    })
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    match cli.command {
        Command::Train { config: path, out: dir } => {
            let mut cfg = ExperimentConfig::load(&path).with_context(|| format!("loading {}", path.display()))?;
            cfg.output_dir = dir;
            let run = experiment::run_experiment(&cfg)?;
            write!(out, "{}", experiment::report_table(&[(run.dir.join(experiment::METRICS), run.record)]))?;
        }
        Command::Attack { checkpoint, attack, norm, eps, steps, eot, bpda, seed, samples } => {
            let (ck, cfg) = load_run(&checkpoint)?;
            let eval = eval_split(&cfg, samples)?;
            let kind = match attack {
                KindArg::Pgd => AttackKind::Pgd,
                KindArg::Mim => AttackKind::Mim,
                KindArg::Square => AttackKind::Square,
            };
            let norm = match norm {
                NormArg::Linf => Norm::Linf,
                NormArg::L2 => Norm::L2,
            };
            let spec = AttackSpec { kind, norm, epsilon: eps, steps, step_size: eps / 10.0, eot_samples: eot, bpda_identity: bpda, seed, ..AttackSpec::default() };
            let outcomes = experiment::attack_dataset(&ck.bank, &ck.model, &eval, &spec, cfg.inference_seed)?;
            writeln!(out, "{}", experiment::SampleOutcome::CSV_HEADER)?;
            for o in &outcomes {
                writeln!(out, "{}", o.csv_row())?;
            }
            let robust = 100.0 * outcomes.iter().filter(|o| !o.success).count() as f64 / outcomes.len().max(1) as f64;
            eprintln!("{}: robust accuracy {robust:.1}% over {} samples", config::attack_label(&spec), outcomes.len());
        }
        Command::Diagnose { checkpoint, what, samples } => {
            let (ck, cfg) = load_run(&checkpoint)?;
            let d = &cfg.diagnostics;
            let eval = eval_split(&cfg, Some(samples.unwrap_or(d.samples)))?;
            let (bank, model) = (&ck.bank, &ck.model);
            let json = match what {
                What::Consensus => serde_json::to_string_pretty(&diagnostics::consensus(bank, model, &eval, ConsensusMode::Exact)?)?,
                What::Mismatch => {
                    let mut o = EotOracle::new(bank, model, d.eot_samples, true, false, d.seed)?;
                    serde_json::to_string_pretty(&diagnostics::directional_mismatch(&mut o, &eval, &d.etas, d.directions, d.seed)?)?
                }
                What::Transfer => {
                    let spec = AttackSpec { seed: d.seed, ..AttackSpec::default() };
                    serde_json::to_string_pretty(&diagnostics::transfer_matrix(bank, model, &eval, &spec)?)?
                }
                What::Probes => {
                    let xs = &eval.images[..eval.len().min(2)];
                    serde_json::to_string_pretty(&diagnostics::probe_variance_study(bank, xs, &d.probe_counts, d.probe_trials, d.probe_eps, d.seed)?)?
                }
                What::Gradnorm => {
                    let mut o = EotOracle::new(bank, model, d.eot_samples, true, false, d.seed)?;
                    serde_json::to_string_pretty(&diagnostics::gradient_norm_stats(&mut o, &eval)?)?
                }
            };
            writeln!(out, "{json}")?;
        }
        Command::Landscape { checkpoint, tau, grid, eot, sample } => {
            let (ck, cfg) = load_run(&checkpoint)?;
            let eval = eval_split(&cfg, None)?;
            if sample >= eval.len() {
                bail!("sample {sample} is outside the eval split of {} samples", eval.len());
            }
            let seed = cfg.diagnostics.seed;
            let mut o = EotOracle::new(&ck.bank, &ck.model, eot, true, false, seed)?;
            let g = diagnostics::loss_landscape(&mut o, &eval.images[sample], eval.labels[sample], tau, grid, seed, 0)?;
            write!(out, "{}", g.to_csv())?;
        }
        Command::Report { dir } => {
            let records = experiment::collect_metrics(&dir)?;
            if records.is_empty() {
                bail!("no {} found under {}", experiment::METRICS, dir.display());
            }
            std::fs::write(dir.join("summary.csv"), experiment::report_csv(&records))?;
            write!(out, "{}", experiment::report_table(&records))?;
        }
    }
    Ok(())
}
