use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use dbn_core::checkpoint::{load_checkpoint, save_checkpoint, save_pretrained};
use dbn_core::checks;
use dbn_core::experiment::{
    emit_report, prepare_splits, pretrain_cell, render_table, run_experiment_with, strategy_slug, train_cell,
    ExperimentConfig,
};
use dbn_core::hyper::{ExpectedLossEstimator, HvpMode};
use dbn_core::strategies::StrategyId;

/// Train and compare DBN-based classifiers.
#[derive(Parser)]
#[command(name = "dbnc", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Greedy layer-wise pretraining for one seed; writes the stack.
    Pretrain {
        #[command(flatten)]
        exp: ExperimentArgs,
        #[arg(long)]
        seed: Option<u64>,
        /// Defaults to <output_dir>/seed-<s>/pretrain.ckpt.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one strategy for one seed, including its prerequisites.
    Train {
        #[command(flatten)]
        exp: ExperimentArgs,
        #[arg(long)]
        strategy: StrategyId,
        #[arg(long)]
        seed: Option<u64>,
        /// Defaults to <output_dir>/seed-<s>/<strategy>.ckpt.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Error rates of a saved model on the seed's splits.
    Eval {
        #[command(flatten)]
        exp: ExperimentArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Every strategy × seed; writes report.tsv and report.json.
    Report {
        #[command(flatten)]
        exp: ExperimentArgs,
        /// Defaults to <output_dir>/report.tsv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check analytic gradients, Hessians and estimators against oracles.
    OracleCheck {
        #[arg(long, default_value_t = 2024)]
        seed: u64,
    },
}

/// The config file plus overrides for its fields.
#[derive(Args)]
struct ExperimentArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long, value_delimiter = ',')]
    strategies: Option<Vec<StrategyId>>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Input width and hidden sizes, e.g. 784,64,64.
    #[arg(long, value_delimiter = ',')]
    architecture: Option<Vec<usize>>,
    #[arg(long)]
    pretrain_epochs: Option<usize>,
    #[arg(long)]
    pretrain_lr: Option<f64>,
    #[arg(long)]
    finetune_epochs: Option<usize>,
    #[arg(long)]
    finetune_lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    cd_k: Option<usize>,
    /// Box radius; `inf` disables the box.
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    mu: Option<f64>,
    #[arg(long, value_parser = parse_hvp)]
    hvp: Option<HvpMode>,
    #[arg(long, value_parser = parse_estimator)]
    expected_loss: Option<ExpectedLossEstimator>,
    #[arg(long)]
    mc_samples: Option<usize>,
    /// Threshold features to {0,1}.
    #[arg(long)]
    binarize: Option<f64>,
}

fn parse_hvp(s: &str) -> Result<HvpMode, String> {
    match s {
        "exact" => Ok(HvpMode::Exact),
        "fd-cd" | "fd_cd" => Ok(HvpMode::FdCd),
        _ => Err(format!("expected exact or fd-cd, got {s:?}")),
    }
}

fn parse_estimator(s: &str) -> Result<ExpectedLossEstimator, String> {
    match s {
        "auto" => Ok(ExpectedLossEstimator::Auto),
        "exact" => Ok(ExpectedLossEstimator::Exact),
        "sampled" => Ok(ExpectedLossEstimator::Sampled),
        _ => Err(format!("expected auto, exact or sampled, got {s:?}")),
    }
}

impl ExperimentArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(&self.config)
            .with_context(|| format!("loading {}", self.config.display()))?;
        let h = &mut cfg.hyper;
        macro_rules! set {
            ($($field:ident => $target:expr),* $(,)?) => {
                $(if let Some(v) = self.$field.clone() { $target = v; })*
            };
        }
        set! {
            pretrain_epochs => h.pretrain_epochs,
            pretrain_lr => h.pretrain_lr,
            finetune_epochs => h.finetune_epochs,
            finetune_lr => h.finetune_lr,
            batch_size => h.batch_size,
            cd_k => h.cd_k,
            delta => h.delta,
            rho => h.rho.initial,
            mu => h.mu.initial,
            hvp => h.hvp,
            expected_loss => h.expected_loss,
            mc_samples => h.mc_samples,
        }
        set! {
            seeds => cfg.seeds,
            strategies => cfg.strategies,
            output_dir => cfg.output_dir,
            architecture => cfg.architecture,
        }
        if let Some(t) = self.binarize {
            cfg.dataset.binarize = Some(t);
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn pick_seed(cfg: &ExperimentConfig, seed: Option<u64>) -> u64 {
    seed.unwrap_or(cfg.seeds[0])
}

fn seed_dir(cfg: &ExperimentConfig, seed: u64) -> Result<PathBuf> {
    let dir = cfg.output_dir.join(format!("seed-{seed}"));
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".into(), |v| format!("{:.2}%", 100.0 * v))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pretrain { exp, seed, out } => {
            let cfg = exp.load()?;
            let seed = pick_seed(&cfg, seed);
            let p = pretrain_cell(&cfg, seed)?;
            let out = match out {
                Some(o) => o,
                None => seed_dir(&cfg, seed)?.join("pretrain.ckpt"),
            };
            save_pretrained(&p.params, &cfg.hyper, &p.reconstruction, &out)?;
            for (k, curve) in p.reconstruction.iter().enumerate() {
                if let Some(last) = curve.last() {
                    println!("layer {}: reconstruction cross-entropy {last:.4}", k + 1);
                }
            }
            println!("wrote {}", out.display());
        }
        Command::Train {
            exp,
            strategy,
            seed,
            out,
        } => {
            let cfg = exp.load()?;
            let seed = pick_seed(&cfg, seed);
            let cell = train_cell(&cfg, strategy, seed)?;
            let out = match out {
                Some(o) => o,
                None => seed_dir(&cfg, seed)?.join(format!("{}.ckpt", strategy_slug(strategy))),
            };
            save_checkpoint(&cell.model, &out)?;
            println!(
                "{strategy} seed {seed}: test error {} (epoch {})",
                pct(cell.test_error),
                cell.selected_epoch
            );
            println!("wrote {}", out.display());
        }
        Command::Eval {
            exp,
            checkpoint,
            seed,
        } => {
            let cfg = exp.load()?;
            let seed = pick_seed(&cfg, seed);
            let model = load_checkpoint(&checkpoint)?;
            let splits = prepare_splits(&cfg.dataset, seed)?;
            println!("strategy\t{}", model.strategy);
            for (name, part) in [("train", &splits.train), ("valid", &splits.valid), ("test", &splits.test)] {
                println!("{name}\t{}", pct(model.network.error_rate(part)?));
            }
        }
        Command::Report { exp, out } => {
            let cfg = exp.load()?;
            let report = run_experiment_with(&cfg, &mut |seed, s| eprintln!("seed {seed}: training {s}"))?;
            let out = match out {
                Some(o) => o,
                None => {
                    std::fs::create_dir_all(&cfg.output_dir)?;
                    cfg.output_dir.join("report.tsv")
                }
            };
            emit_report(&report, &out)?;
            print!("{}", render_table(&report));
            for r in &report.strategies {
                for run in &r.runs {
                    if let Some(e) = &run.error {
                        eprintln!("{} seed {}: {e}", r.strategy, run.seed);
                    }
                }
            }
            println!("wrote {}", out.display());
        }
        Command::OracleCheck { seed } => {
            let results = checks::all(seed);
            let mut failed = 0;
            for c in &results {
                let tag = if c.passed { "ok" } else { "FAILED" };
                failed += !c.passed as usize;
                println!("{tag:6} {} ({:.2?}): {}", c.name, c.elapsed, c.detail);
            }
            if failed > 0 {
                bail!(CheckFailure(failed));
            }
        }
    }
    Ok(())
}

#[derive(Debug)]
struct CheckFailure(usize);

impl std::fmt::Display for CheckFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} oracle checks failed", self.0)
    }
}

impl std::error::Error for CheckFailure {}

/// Exit status per error category; 1 for anything uncategorized.
fn classify(err: &anyhow::Error) -> (&'static str, u8) {
    if err.downcast_ref::<CheckFailure>().is_some() {
        return ("check", 10);
    }
    let category = err
        .chain()
        .find_map(|e| e.downcast_ref::<dbn_core::Error>())
        .map(|e| e.category());
    match category {
        Some("config") => ("config", 3),
        Some("data") => ("data", 4),
        Some("checkpoint") => ("checkpoint", 5),
        Some("io") => ("io", 6),
        Some("invalid-input") => ("invalid-input", 7),
        Some("numeric") => ("numeric", 8),
        Some("prerequisite") => ("prerequisite", 9),
        _ if err.chain().any(|e| e.downcast_ref::<std::io::Error>().is_some()) => ("io", 6),
        _ => ("other", 1),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let (category, code) = classify(&err);
            eprintln!("error[{category}]: {err:#}");
            ExitCode::from(code)
        }
    }
}
