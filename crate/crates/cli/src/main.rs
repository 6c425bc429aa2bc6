use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use seqdesign::agent::{policy_registry, write_history_csv, Policy, Trainer};
use seqdesign::checkpoint;
use seqdesign::config::RunConfig;
use seqdesign::envs::{simulate_sir_bank, Environment, SirParams, Target};
use seqdesign::evaluation::{
    config_hash, evaluate_stagewise, evaluation_episodes, pce_eig, pce_model_eig, Contrast, EstimateRecord, PceConfig,
    VariationalSetup,
};
use seqdesign::oracle::{certify_theorems, CertifyConfig};
use seqdesign::posteriors::PredictorBank;
use seqdesign::rng::{streams, SeedTree};

#[derive(Parser)]
#[command(name = "seqdesign", version, about = "Sequential Bayesian experimental design by policy gradient")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a design policy from a TOML run configuration.
    Train {
        config: PathBuf,
        /// Continue from a checkpoint written by an earlier run of the same configuration.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Estimate the expected utility of a trained or built-in policy.
    Evaluate(EvaluateArgs),
    /// Check the reward equivalences and the variational bound on random finite problems.
    Certify {
        #[arg(long, default_value_t = 100)]
        instances: usize,
        #[arg(long, default_value_t = 100)]
        perturbations: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "certification.json")]
        out: PathBuf,
    },
    /// Pre-simulate epidemic trajectories for the SIR problem.
    GenSirBank {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        population: Option<f64>,
        #[arg(long)]
        initial_infected: Option<f64>,
        #[arg(long)]
        dt: Option<f64>,
    },
    /// Write posterior samples for one evaluation episode.
    ExportPosterior {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0)]
        episode: usize,
        #[arg(long, default_value_t = 1000)]
        samples: usize,
        /// Stage of the posterior; defaults to the horizon.
        #[arg(long)]
        stage: Option<usize>,
        #[arg(long, value_parser = parse_target, default_value = "theta")]
        target: Target,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct EvaluateArgs {
    /// Trained checkpoint; its actor and posteriors are evaluated.
    #[arg(long, conflicts_with = "policy")]
    checkpoint: Option<PathBuf>,
    /// Run configuration, required with `--policy`.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in policy (`uniform`) evaluated without training.
    #[arg(long, requires = "config")]
    policy: Option<String>,
    #[arg(long)]
    episodes: Option<usize>,
    /// Contrastive samples for PCE.
    #[arg(long)]
    l: Option<usize>,
    #[arg(long)]
    no_pce: bool,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; defaults to the run's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_target(s: &str) -> Result<Target, String> {
    match s {
        "model" => Ok(Target::Model),
        "theta" => Ok(Target::Theta),
        "z" => Ok(Target::Z),
        _ => Err(format!("unknown target `{s}` (model, theta, z)")),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Train { config, resume } => train(&config, resume.as_deref()),
        Command::Evaluate(args) => evaluate(args),
        Command::Certify { instances, perturbations, seed, out } => certify(instances, perturbations, seed, &out),
        Command::GenSirBank { n, out, seed, population, initial_infected, dt } => {
            let d = SirParams::default();
            let params = SirParams {
                population: population.unwrap_or(d.population),
                initial_infected: initial_infected.unwrap_or(d.initial_infected),
                dt: dt.unwrap_or(d.dt),
                ..d
            };
            let bank = simulate_sir_bank(n, &params, &SeedTree::new(seed))?;
            bank.save(&out).with_context(|| format!("writing {}", out.display()))?;
            let peaks: Vec<f64> = (0..bank.len()).map(|j| bank.trajectory(j).iter().cloned().fold(0.0, f64::max)).collect();
            let mean_peak = peaks.iter().sum::<f64>() / peaks.len() as f64;
            let max_peak = peaks.iter().cloned().fold(0.0, f64::max);
            println!(
                "{} trajectories, {} grid points, mean peak infected {mean_peak:.2}, max {max_peak:.2} -> {}",
                bank.len(),
                bank.params.grid_points,
                out.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::ExportPosterior { checkpoint, episode, samples, stage, target, out } => {
            export_posterior(&checkpoint, episode, samples, stage, target, &out)
        }
    }
}

fn run_config_of(path: &Path) -> Result<RunConfig> {
    let extra = checkpoint::read_extra(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
    serde_json::from_value(extra["run"].clone()).context("checkpoint lacks its run configuration")
}

fn load_trainer(path: &Path) -> Result<(RunConfig, Trainer)> {
    let run = run_config_of(path)?;
    let env: Arc<dyn Environment> = Arc::from(run.build_env()?);
    let (trainer, _) = checkpoint::load(path, env)?;
    Ok((run, trainer))
}

fn write_csv(path: &Path, trainer: &Trainer) -> Result<()> {
    let f = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    write_history_csv(trainer.records(), std::io::BufWriter::new(f))?;
    Ok(())
}

fn train(config: &Path, resume: Option<&Path>) -> Result<ExitCode> {
    let run = RunConfig::load(config)?.resolved();
    run.validate()?;
    let dir = &run.output_dir;
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(dir.join("config.toml"), run.to_toml()?)?;
    let env: Arc<dyn Environment> = Arc::from(run.build_env()?);
    let mut trainer = match resume {
        Some(p) => {
            let saved = run_config_of(p)?;
            if config_hash(&saved.train)? != config_hash(&run.train)? || saved.seed != run.seed {
                bail!("checkpoint {} was written with a different configuration", p.display());
            }
            checkpoint::load(p, env)?.0
        }
        None => Trainer::new(env, run.train.clone(), run.seed)?,
    };
    let extra = json!({ "run": run });
    let every = run.checkpoint_every;
    trainer.train(|t| {
        let it = t.iteration();
        if it % 100 == 0 || t.is_finished() {
            let r = t.records().last().expect("a step was taken");
            println!("iteration {it}: utility {:.4} critic loss {:.4} psi {:.3}", r.utility, r.critic_loss, r.psi);
        }
        if every > 0 && it % every == 0 && !t.is_finished() {
            checkpoint::save(t, extra.clone(), &dir.join(format!("checkpoint_{it}.ckpt")))?;
        }
        Ok(())
    })?;
    checkpoint::save(&trainer, extra, &dir.join("checkpoint.ckpt"))?;
    write_csv(&dir.join("history.csv"), &trainer)?;
    println!("{} iterations written to {}", trainer.iteration(), dir.display());
    Ok(ExitCode::SUCCESS)
}

fn evaluate(args: EvaluateArgs) -> Result<ExitCode> {
    let (run, trainer) = match (&args.checkpoint, &args.config) {
        (Some(c), _) => {
            let (run, t) = load_trainer(c)?;
            (run, Some(t))
        }
        (None, Some(cfg)) if args.policy.is_some() => (RunConfig::load(cfg)?.resolved(), None),
        _ => bail!("pass --checkpoint, or --config with --policy"),
    };
    let env: Arc<dyn Environment> = match &trainer {
        Some(t) => t.env().clone(),
        None => Arc::from(run.build_env()?),
    };
    let builtin: Option<Box<dyn Policy>> = match &args.policy {
        Some(name) => Some((policy_registry().get(name)?)(env.spec(), &toml::Table::new())?),
        None => None,
    };
    let policy: &dyn Policy = match (&trainer, &builtin) {
        (Some(t), _) => t.actor(),
        (None, Some(p)) => p.as_ref(),
        _ => unreachable!(),
    };
    let n = args.episodes.unwrap_or(run.evaluation.n_episodes);
    let l = args.l.unwrap_or(run.evaluation.l);
    let seed = args.seed.unwrap_or(run.seed);
    let seeds = SeedTree::new(seed).child(&[streams::EVAL]);
    let hash = config_hash(&run)?;
    let dir = args.out.clone().unwrap_or_else(|| run.output_dir.clone());
    fs::create_dir_all(&dir)?;

    let mut records = Vec::new();
    let mut stage_rows = Vec::new();
    let spec = env.spec().clone();
    let pce_cfg = PceConfig { n_episodes: n, contrast: Contrast::Sampled { l } };
    if !args.no_pce {
        if spec.has_nuisance() {
            eprintln!("skipping PCE: {} has nuisance parameters", env.name());
        } else {
            match pce_eig(env.as_ref(), policy, &pce_cfg, &seeds) {
                Ok(est) => {
                    let mut rec = EstimateRecord::new("pce", &est, l, hash.clone(), seed);
                    if l < 1_000_000 {
                        rec.note = Some(format!("reduced contrastive budget L = {l}"));
                    }
                    stage_rows.push(("pce".to_string(), spec.horizon, est.mean, est.se));
                    records.push(rec);
                }
                Err(seqdesign::Error::Unsupported(msg)) => eprintln!("skipping PCE: {msg}"),
                Err(e) => return Err(e.into()),
            }
        }
        if spec.n_models > 1 {
            let est = pce_model_eig(env.as_ref(), policy, &pce_cfg, &seeds)?;
            records.push(EstimateRecord::new("pce_model", &est, l, hash.clone(), seed));
        }
    }
    if let Some(t) = &trainer {
        let bank: &PredictorBank = t.bank();
        let mut stages: Vec<usize> = if run.evaluation.stages.is_empty() {
            std::iter::once(0).chain(bank.stages().iter().copied()).collect()
        } else {
            run.evaluation.stages.clone()
        };
        stages.dedup();
        let setup = VariationalSetup {
            env: env.as_ref(),
            policy,
            posterior: bank,
            weights: t.config().weights,
            priors: t.config().priors,
        };
        let curve = evaluate_stagewise(&setup, &stages, n, &seeds)?;
        for (k, est) in stages.iter().zip(&curve) {
            stage_rows.push(("variational".to_string(), *k, est.mean, est.se));
            if *k == spec.horizon {
                records.push(EstimateRecord::new("variational", est, 0, hash.clone(), seed));
            }
        }
    }
    let json_path = dir.join("evaluation.json");
    fs::write(&json_path, serde_json::to_string_pretty(&records)?)?;
    let mut csv = fs::File::create(dir.join("stages.csv"))?;
    writeln!(csv, "estimator,stage,mean,se")?;
    for (e, k, m, s) in &stage_rows {
        writeln!(csv, "{e},{k},{m},{s}")?;
    }
    for r in &records {
        println!("{}: {:.4} +- {:.4} (n = {}, L = {})", r.estimator, r.mean, r.se, r.n, r.l);
    }
    Ok(ExitCode::SUCCESS)
}

fn certify(instances: usize, perturbations: usize, seed: u64, out: &Path) -> Result<ExitCode> {
    let cfg = CertifyConfig { n_instances: instances, n_perturbations: perturbations, seed, ..Default::default() };
    let report = certify_theorems(&cfg)?;
    fs::write(out, serde_json::to_string_pretty(&report)?).with_context(|| format!("writing {}", out.display()))?;
    println!("{}/{} instances passed -> {}", report.n_passed, report.instances.len(), out.display());
    Ok(if report.passed { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn export_posterior(ckpt: &Path, episode: usize, samples: usize, stage: Option<usize>, target: Target, out: &Path) -> Result<ExitCode> {
    let (run, trainer) = load_trainer(ckpt)?;
    let env = trainer.env();
    let k = stage.unwrap_or(env.spec().horizon);
    let seeds = SeedTree::new(run.seed).child(&[streams::EVAL]);
    let eps = evaluation_episodes(env.as_ref(), trainer.actor(), episode + 1, &seeds)?;
    let ep = &eps[episode];
    let m = if target == Target::Model { 0 } else { ep.truth.model };
    let mut rng = seeds.rng(&[streams::MISC, episode as u64]);
    let draws = trainer.bank().sample(target, k, m, &ep.history.prefix(k), samples, &mut rng)?;
    let mut f = std::io::BufWriter::new(fs::File::create(out).with_context(|| format!("creating {}", out.display()))?);
    let dim = draws.first().map_or(0, |d| d.len());
    let header: Vec<String> = (0..dim).map(|j| format!("x{j}")).collect();
    writeln!(f, "{}", header.join(","))?;
    for d in &draws {
        let row: Vec<String> = d.iter().map(|v| v.to_string()).collect();
        writeln!(f, "{}", row.join(","))?;
    }
    let truth = match target {
        Target::Model => vec![ep.truth.model as f64],
        Target::Theta => ep.truth.theta.clone(),
        Target::Z => ep.truth.z.clone(),
    };
    println!("{} samples at stage {k} (truth {truth:?}) -> {}", draws.len(), out.display());
    Ok(ExitCode::SUCCESS)
}
