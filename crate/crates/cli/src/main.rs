//! Command-line front end: train, eval, theory, ablate, gen and replay.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fspo_core::harness::{self, paths};
use fspo_core::theorylab::{self, TextReport};
use fspo_core::{BanditFixture, Dataset, Error, PolicyParams, Result, StuckFixture, TrainConfig, WorldSpec};

#[derive(Parser)]
#[command(name = "fspo", version, about = "Tabular policy-gradient laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Seed for every random draw of the command.
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for all output files.
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration.
    Train {
        /// Training config JSON; built-in defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Sample from a checkpoint and score the samples.
    Eval {
        /// Checkpoint JSON written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset JSON; defaults to `dataset.json` beside the checkpoint.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Config supplying the verifier and max length.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Samples drawn per instance.
        #[arg(long, default_value_t = 64)]
        samples: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Exact and Monte-Carlo oracles.
    Theory {
        #[command(subcommand)]
        which: Theory,
    },
    /// Train all ablation arms on one dataset and compare them.
    Ablate {
        /// Base config JSON; each arm overrides the algorithm and reward mode.
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Generate a synthetic dataset.
    Gen {
        #[arg(long, default_value_t = 5)]
        entities: u32,
        #[arg(long, default_value_t = 2)]
        relations: u32,
        #[arg(long, default_value_t = 1)]
        fillers: u32,
        #[arg(long, default_value_t = 9)]
        facts: usize,
        #[arg(long, default_value_t = 8)]
        instances: usize,
        #[arg(long, default_value_t = 2)]
        hops: usize,
        #[arg(long, default_value_t = 2)]
        distractors: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Re-score a rollout dump and compare with the logged values.
    Replay {
        /// A run directory written by `train` with `dump_rollouts` enabled.
        #[arg(long)]
        run: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Subcommand)]
enum Theory {
    /// Exact estimator variance, optionally checked by Monte Carlo.
    Variance {
        /// Bandit fixture JSON; defaults to the shipped bandit.
        #[arg(long)]
        fixture: Option<PathBuf>,
        #[arg(long, default_value_t = 100_000)]
        samples: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Gradient norms of the stuck policy under both rewards.
    Stationarity {
        #[arg(long)]
        fixture: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Entropy floor against a lattice search and random draws.
    Entropy {
        #[arg(long, default_value_t = 0.05)]
        eps: f64,
        #[arg(long, default_value_t = 3)]
        k: usize,
        #[arg(long, default_value_t = 8)]
        v: usize,
        #[arg(long, default_value_t = 20)]
        grid: usize,
        #[arg(long, default_value_t = 10_000)]
        samples: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Mean first-success index for a bandit with success probability eps.
    HittingTime {
        #[arg(long, default_value_t = 0.01)]
        eps: f64,
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        #[arg(long, default_value_t = 100_000)]
        cap: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Central differences against the exact gradient on the stuck fixture.
    Gradcheck {
        #[arg(long)]
        fixture: Option<PathBuf>,
        #[arg(long, default_value_t = 1e-6)]
        h: f64,
        #[command(flatten)]
        common: Common,
    },
}

const DEFAULT_SEED: u64 = 42;

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<(TrainConfig, Option<PathBuf>)> {
    let (mut cfg, base) = match path {
        Some(p) => (TrainConfig::load(p)?, p.parent().map(Path::to_path_buf)),
        None => (TrainConfig::default(), None),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok((cfg, base))
}

/// Writes to stdout, ignoring a closed pipe.
fn say(text: &str) {
    let _ = std::io::stdout().write_all(text.as_bytes());
}

fn emit(dir: &Path, name: &str, report: &impl TextReport) -> Result<()> {
    say(&harness::write_report(dir, name, report)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, common } => {
            let (cfg, base) = load_config(config.as_deref(), common.seed)?;
            let (ds, backend) = harness::load_inputs(&cfg, base.as_deref())?;
            let art = harness::run_train(&cfg, &ds, backend.as_ref(), &common.out_dir)?;
            say(&art.summary.to_text());
        }
        Command::Eval { checkpoint, dataset, config, samples, common } => {
            let (cfg, base) = load_config(config.as_deref(), None)?;
            let policy = PolicyParams::load(&checkpoint)?;
            let ds_path = dataset.unwrap_or_else(|| checkpoint.parent().unwrap_or(Path::new(".")).join(paths::DATASET));
            let ds = Dataset::load(&ds_path)?;
            let backend = cfg.verifier.build(&ds.vocab, base.as_deref())?;
            let (report, records) =
                harness::evaluate(&policy, &ds, backend.as_ref(), samples, cfg.max_len, common.seed.unwrap_or(DEFAULT_SEED))?;
            std::fs::create_dir_all(&common.out_dir)?;
            harness::write_jsonl(common.out_dir.join("eval_rollouts.jsonl"), &records)?;
            emit(&common.out_dir, "eval", &report)?;
        }
        Command::Ablate { config, common } => {
            let (cfg, base) = load_config(config.as_deref(), common.seed)?;
            let (ds, backend) = harness::load_inputs(&cfg, base.as_deref())?;
            let rep = harness::run_ablation(&cfg, &ds, backend.as_ref(), &common.out_dir)?;
            let mut text = format!("{:<20} {:>14} {:>10} {:>10}\n", "arm", "contradiction", "accuracy", "reward");
            for (name, s) in &rep.arms {
                text += &format!(
                    "{name:<20} {:>14.4} {:>10.4} {:>10.4}\n",
                    s.tail_contradiction_rate, s.tail_answer_accuracy, s.tail_mean_reward
                );
            }
            for c in &rep.checks {
                text += &format!("{} {} vs {}\n", if c.pass { "PASS" } else { "FAIL" }, c.treatment, c.baseline);
            }
            say(&text);
        }
        Command::Gen { entities, relations, fillers, facts, instances, hops, distractors, common } => {
            let spec = WorldSpec {
                seed: common.seed.unwrap_or(DEFAULT_SEED),
                n_entities: entities,
                n_relations: relations,
                n_fillers: fillers,
                n_facts: facts,
                n_instances: instances,
                hops,
                n_distractors: distractors,
            };
            let out = common.out_dir.join(paths::DATASET);
            let ds = harness::generate_dataset(&spec, &out)?;
            say(&format!("wrote {} instances to {}\n", ds.instances.len(), out.display()));
        }
        Command::Replay { run, common } => {
            let (cfg, _) = load_config(Some(&run.join(paths::CONFIG)), None)?;
            let ds = Dataset::load(run.join(paths::DATASET))?;
            let backend = cfg.verifier.build(&ds.vocab, Some(&run))?;
            let recs = harness::read_dump(run.join(paths::ROLLOUTS))?;
            let rep = harness::rescore_dump(&recs, &ds, &cfg, backend.as_ref())?;
            emit(&common.out_dir, "replay", &rep)?;
            if !rep.exact() {
                return Err(Error::Contract(format!("{} replay mismatches, first: {}", rep.mismatches.len(), rep.mismatches[0])));
            }
        }
        Command::Theory { which } => theory(which)?,
    }
    Ok(())
}

fn stuck(path: Option<&Path>) -> Result<StuckFixture> {
    path.map_or_else(|| Ok(StuckFixture::shipped()), StuckFixture::load)
}

fn theory(which: Theory) -> Result<()> {
    match which {
        Theory::Variance { fixture, samples, common } => {
            let f = fixture.as_deref().map_or_else(|| Ok(BanditFixture::shipped()), BanditFixture::load)?;
            let mc = (samples >= 2).then_some((samples, common.seed.unwrap_or(DEFAULT_SEED)));
            let rep = theorylab::variance_report(&f.policy()?, &f.instance, f.max_len, &theorylab::bandit_reward(f.correct), mc)?;
            emit(&common.out_dir, "theory_variance", &rep)?;
        }
        Theory::Stationarity { fixture, common } => {
            let f = stuck(fixture.as_deref())?;
            let oracle = fspo_core::verify::OracleVerifier::new(f.dataset.vocab.clone());
            let rep = theorylab::stationarity_check(&f.masked_policy()?, f.instance(), f.max_len, &oracle)?;
            emit(&common.out_dir, "theory_stationarity", &rep)?;
            let esc = theorylab::escape_ratio(&f.unmasked_policy()?, f.instance(), f.max_len, &oracle)?;
            emit(&common.out_dir, "theory_escape", &esc)?;
        }
        Theory::Entropy { eps, k, v, grid, samples, common } => {
            let rep = theorylab::entropy_report(eps, k, v, grid, samples, common.seed.unwrap_or(DEFAULT_SEED))?;
            emit(&common.out_dir, "theory_entropy", &rep)?;
        }
        Theory::HittingTime { eps, trials, cap, common } => {
            let f = BanditFixture::with_success_probability(eps)?;
            let seed = common.seed.unwrap_or(DEFAULT_SEED);
            let rep =
                theorylab::hitting_time_experiment(&f.policy()?, &f.instance, 1, &theorylab::bandit_reward(f.correct), trials, seed, cap)?;
            emit(&common.out_dir, "theory_hitting_time", &rep)?;
        }
        Theory::Gradcheck { fixture, h, common } => {
            let f = stuck(fixture.as_deref())?;
            let oracle = fspo_core::verify::OracleVerifier::new(f.dataset.vocab.clone());
            let reward = theorylab::final_reward_fn(f.instance(), &oracle);
            let rep = theorylab::gradcheck(&f.unmasked_policy()?, f.instance(), f.max_len, &reward, h)?;
            emit(&common.out_dir, "theory_gradcheck", &rep)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", e.kind(), e.to_string().replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
