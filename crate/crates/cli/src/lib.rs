//! Subcommands of the `steerlab` binary.
//!
//! Every command resolves one [`ExperimentConfig`]: the `--config` file (or
//! defaults), then `--seed`, then the per-run overrides `--suite`, `--gamma`,
//! `--steps` and `--head`. Outputs go under `--out`.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use steerlab::bench::{self, ReportTable};
use steerlab::config::ExperimentConfig;
use steerlab::lang::{Grammar, PerturbationSpec};
use steerlab::oracle;
use steerlab::policy::{self, Checkpoint, PolicyModel, TrainMode, Weights};
use steerlab::steering::Head;
use steerlab::worldsim;
use steerlab::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "steerlab", version, about = "Residual affordance steering experiments on a toy manipulation world")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Debug, Default, Args)]
pub struct Global {
    /// Experiment config file (TOML). Unknown keys are rejected.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed; overrides the seed in the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Checkpoint written by `train`.
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
    /// Comma-separated perturbation variants, e.g. `origin,m4,r2`.
    #[arg(long, global = true)]
    pub suite: Option<String>,
    /// Steering strength. `sweep` accepts a comma-separated grid.
    #[arg(long, global = true, value_delimiter = ',')]
    pub gamma: Vec<f64>,
    /// Denoising steps for the flow head. `sweep` accepts a comma-separated grid.
    #[arg(long, global = true, value_delimiter = ',')]
    pub steps: Vec<usize>,
    #[arg(long, global = true, value_enum)]
    pub head: Option<HeadArg>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum HeadArg {
    Discrete,
    Flow,
}

impl From<HeadArg> for Head {
    fn from(h: HeadArg) -> Head {
        match h {
            HeadArg::Discrete => Head::Discrete,
            HeadArg::Flow => Head::Flow,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Mle,
    Mcsi,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, ValueEnum)]
pub enum WeightsArg {
    #[default]
    Raw,
    Ema,
}

impl From<WeightsArg> for Weights {
    fn from(w: WeightsArg) -> Weights {
        match w {
            WeightsArg::Raw => Weights::Raw,
            WeightsArg::Ema => Weights::Ema,
        }
    }
}

#[derive(Clone, Debug, Default, Args)]
pub struct ModelArgs {
    /// Which checkpoint weights to evaluate.
    #[arg(long, value_enum, default_value_t = WeightsArg::Raw)]
    pub weights: WeightsArg,
    /// Row label in the report; defaults to the training mode.
    #[arg(long)]
    pub name: Option<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate an expert dataset as JSON lines.
    GenData,
    /// Train a policy and write checkpoint.json and curve.csv.
    Train {
        /// Dataset from `gen-data`; generated from the config when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Overrides `train.mode`.
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        /// Overrides `train.schedule.total_steps`.
        #[arg(long)]
        train_steps: Option<usize>,
    },
    /// Run the perturbation suite on a checkpoint.
    Eval {
        #[command(flatten)]
        model: ModelArgs,
        /// Overrides `suite.episodes_per_variant`.
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Run the suite over a grid of steering strengths and denoising steps.
    Sweep {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Holdout-intent transfer with few-shot adaptation.
    Ood,
    /// Exact checks of steering on hand-built linear scorers.
    Oracle {
        /// Random instances per check.
        #[arg(long, default_value_t = 1000)]
        instances: usize,
    },
    /// Mean pairwise JS divergence of decodes across paraphrases.
    Consistency {
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Re-emit charts and summary from report CSVs.
    Report {
        /// Report CSV files to merge.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
}

/// Resolves the experiment config from the file and command-line overrides.
pub fn resolve_config(g: &Global) -> Result<ExperimentConfig> {
    let mut cfg = match &g.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = g.seed {
        cfg = cfg.with_seed(seed);
    }
    if let Some(list) = &g.suite {
        let specs = PerturbationSpec::parse_list(list)?;
        cfg.suite.variants = specs.iter().map(|s| s.name()).collect();
    }
    if !g.gamma.is_empty() {
        cfg.steering.gamma = g.gamma[0];
        cfg.sweep.gammas = g.gamma.clone();
    }
    if !g.steps.is_empty() {
        cfg.steering.denoise_steps = g.steps[0];
        cfg.sweep.steps = g.steps.clone();
    }
    if let Some(head) = g.head {
        cfg.steering.head = head.into();
    }
    Ok(cfg)
}

fn single<T>(values: &[T], flag: &str) -> Result<()> {
    if values.len() > 1 {
        return Err(Error::Config(format!("--{flag} takes one value here; use `sweep` for a grid")));
    }
    Ok(())
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json<T: serde::Serialize + ?Sized>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::format("json output", e))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn load_model(g: &Global, args: &ModelArgs) -> Result<(PolicyModel, String)> {
    let path = g
        .checkpoint
        .as_ref()
        .ok_or_else(|| Error::Config("this command needs --checkpoint".into()))?;
    let ck = Checkpoint::load(path)?;
    let name = args.name.clone().unwrap_or_else(|| ck.train.mode.name().to_string());
    Ok((ck.model(args.weights.into())?, name))
}

fn print_table(table: &ReportTable) {
    for row in &table.rows {
        let cells: Vec<String> = row.results.iter().map(|r| format!("{}={:.3}", r.variant, r.sr())).collect();
        println!(
            "{} gamma={} steps={} average={:.3} {}",
            row.model,
            row.gamma,
            row.steps,
            row.average(),
            cells.join(" ")
        );
    }
}

/// Runs one parsed command line. Returns `Ok(false)` when the command ran but
/// reports a failed check (only `oracle` does).
pub fn run(cli: &Cli) -> Result<bool> {
    let g = &cli.global;
    let cfg = resolve_config(g)?;
    let grammar = Grammar::builtin();
    match &cli.command {
        Command::GenData => {
            cfg.validate()?;
            create_dir(&g.out)?;
            let path = g.out.join("dataset.jsonl");
            let stats = worldsim::generate_dataset(&cfg.dataset(), &grammar, &path)?;
            println!("wrote {} episodes to {} ({} skipped)", stats.written, path.display(), stats.skipped);
        }
        Command::Train { data, mode, train_steps } => {
            let mut cfg = cfg;
            if let Some(m) = mode {
                cfg.train.mode = match m {
                    ModeArg::Mle => TrainMode::Mle,
                    ModeArg::Mcsi => TrainMode::Mcsi,
                };
            }
            if let Some(n) = train_steps {
                cfg.train.schedule.total_steps = *n;
                cfg.train.schedule.warmup_steps = cfg.train.schedule.warmup_steps.min(*n);
            }
            cfg.validate()?;
            let records = match data {
                Some(path) => worldsim::read_dataset(path)?,
                None => worldsim::generate_episodes(&cfg.dataset(), &grammar, &worldsim::Intent::all())?.0,
            };
            let samples = policy::expand_records(&records, cfg.train.model.horizon);
            let trained = policy::train(&samples, &grammar, &cfg.train)?;
            create_dir(&g.out)?;
            trained.checkpoint().save(&g.out.join("checkpoint.json"))?;
            policy::write_curve(&trained.curve, &g.out.join("curve.csv"))?;
            let last = trained.curve.last().map_or(f64::NAN, |p| p.loss);
            println!(
                "trained {} for {} steps on {} samples; final loss {last:.4}",
                cfg.train.mode.name(),
                trained.curve.len(),
                samples.len()
            );
        }
        Command::Eval { model, episodes } => {
            single(&g.gamma, "gamma")?;
            single(&g.steps, "steps")?;
            let mut cfg = cfg;
            if let Some(n) = episodes {
                cfg.suite.episodes_per_variant = *n;
            }
            cfg.validate()?;
            let (policy, name) = load_model(g, model)?;
            let table = bench::run_suite(&policy, &name, &grammar, &cfg.suite()?)?;
            bench::emit_report(std::slice::from_ref(&table), &g.out)?;
            print_table(&table);
        }
        Command::Sweep { model, episodes } => {
            let mut cfg = cfg;
            if let Some(n) = episodes {
                cfg.suite.episodes_per_variant = *n;
            }
            cfg.validate()?;
            let (policy, name) = load_model(g, model)?;
            let tables = bench::ablation_sweep(
                &policy,
                &name,
                &grammar,
                &cfg.sweep.gammas,
                &cfg.sweep.steps,
                &cfg.suite()?,
            )?;
            bench::emit_report(&tables, &g.out)?;
            for t in &tables {
                print_table(t);
            }
        }
        Command::Ood => {
            cfg.validate()?;
            let report = bench::ood_protocol(&cfg.ood, &cfg.train, &grammar, &cfg.steering, None)?;
            create_dir(&g.out)?;
            write_json(&report, &g.out.join("ood.json"))?;
            println!("{} holdout: {}", report.mode, report.holdout.join(", "));
            for row in &report.rows {
                let cells: Vec<String> = row.per_task.iter().map(|v| format!("{v:.3}")).collect();
                println!("steps={} per_task=[{}] mean={:.3}", row.steps, cells.join(", "), row.mean);
            }
        }
        Command::Oracle { instances } => {
            let report = oracle::run_oracle(*instances, cfg.seed)?;
            create_dir(&g.out)?;
            write_json(&report, &g.out.join("oracle.json"))?;
            for check in &report.checks {
                let verdict = if check.passed { "pass" } else { "FAIL" };
                println!("{verdict} {} (instances {}, max error {:.3e})", check.name, check.instances, check.max_error);
            }
            return Ok(report.passed);
        }
        Command::Consistency { model } => {
            cfg.validate()?;
            let (policy, name) = load_model(g, model)?;
            let states = bench::sample_states(cfg.consistency.n_states, cfg.seed)?;
            let js = bench::paraphrase_consistency(
                &policy,
                &grammar,
                &states,
                cfg.consistency.k,
                &cfg.steering,
                cfg.seed,
            )?;
            create_dir(&g.out)?;
            let out = serde_json::json!({
                "model": name,
                "n_states": states.len(),
                "k": cfg.consistency.k,
                "gamma": cfg.steering.gamma,
                "seed": cfg.seed,
                "js_divergence": js,
            });
            write_json(&out, &g.out.join("consistency.json"))?;
            println!("{name}: mean pairwise JS divergence {js:.6} over {} states", states.len());
        }
        Command::Report { inputs } => {
            let mut records = Vec::new();
            for path in inputs {
                records.extend(bench::read_csv(path)?);
            }
            let table = bench::from_records(&records);
            bench::emit_report(std::slice::from_ref(&table), &g.out)?;
            print_table(&table);
        }
    }
    Ok(true)
}
