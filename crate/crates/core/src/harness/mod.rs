//! Experiment orchestration: training runs with metrics, checkpoints and
//! rollout dumps, evaluation, the ablation sweep, and dataset generation.

mod dump;
mod metrics;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use dump::{read_dump, rescore_dump, DumpWriter, ReplayReport, RolloutRecord};
pub use metrics::{header_hash, read_metrics, strip_columns, tail_mean, MetricsRow, MetricsWriter, METRICS_COLUMNS, VOLATILE_COLUMNS};

use crate::corpus::{Dataset, InstanceId, Token, WorldSpec};
use crate::error::{Error, Result};
use crate::optim::{initial_policy, Algorithm, RewardMode, TrainConfig, Trainer, UpdateStats};
use crate::policy::{sample_rollout, Checkpoint, PolicyParams};
use crate::reward::{answer_reward, RewardBreakdown};
use crate::verify::{label_rollout, Span, StepLabel, VerifierBackend};

/// Number of trailing iterations averaged in run summaries.
pub const TAIL: usize = 20;

pub fn write_json(path: impl AsRef<Path>, value: &impl Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, items: &[T]) -> Result<()> {
    let mut out = String::new();
    for it in items {
        out.push_str(&serde_json::to_string(it)?);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Writes `<name>.json` and `<name>.txt` into `dir` and returns the text form.
pub fn write_report<R: crate::theorylab::TextReport>(dir: &Path, name: &str, report: &R) -> Result<String> {
    fs::create_dir_all(dir)?;
    write_json(dir.join(format!("{name}.json")), report)?;
    let text = report.to_text();
    fs::write(dir.join(format!("{name}.txt")), &text)?;
    Ok(text)
}

/// State saved when a training run aborts.
#[derive(Debug, Serialize)]
struct AbortDump<'a> {
    iteration: usize,
    error_kind: &'static str,
    error: String,
    config: &'a TrainConfig,
    policy: Checkpoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub algorithm: Algorithm,
    pub reward_mode: RewardMode,
    pub seed: u64,
    pub iterations: usize,
    pub tail_contradiction_rate: f64,
    pub tail_answer_accuracy: f64,
    pub tail_mean_reward: f64,
    pub tail_entropy: f64,
}

impl crate::theorylab::TextReport for RunSummary {
    fn title(&self) -> &'static str {
        "training run"
    }
}

impl crate::theorylab::TextReport for EvalReport {
    fn title(&self) -> &'static str {
        "evaluation"
    }
}

impl crate::theorylab::TextReport for ReplayReport {
    fn title(&self) -> &'static str {
        "replay"
    }
}

/// Artifacts of a run besides its summary.
pub struct RunArtifacts {
    pub summary: RunSummary,
    pub stats: Vec<UpdateStats>,
    pub policy: PolicyParams,
}

/// File names inside a run directory.
pub mod paths {
    pub const CONFIG: &str = "config.json";
    pub const DATASET: &str = "dataset.json";
    pub const METRICS: &str = "metrics.csv";
    pub const ROLLOUTS: &str = "rollouts.jsonl";
    pub const CHECKPOINTS: &str = "checkpoints";
    pub const FINAL: &str = "final_checkpoint.json";
    pub const ABORT: &str = "abort_dump.json";
    pub const SUMMARY: &str = "summary.json";
    pub const COMPARISON: &str = "comparison.csv";
    pub const ABLATION: &str = "ablation.json";
}

/// Loads the dataset and verifier a config names, resolving relative paths
/// against `base`.
pub fn load_inputs(config: &TrainConfig, base: Option<&Path>) -> Result<(Dataset, Box<dyn VerifierBackend>)> {
    let dataset = config.dataset.load(base)?;
    let backend = config.verifier.build(&dataset.vocab, base)?;
    Ok((dataset, backend))
}

/// Runs `config.iterations` updates, writing metrics, checkpoints and
/// (optionally) rollout dumps under `out_dir`. On failure the trainer state is
/// written to `abort_dump.json` before the error is returned.
pub fn run_train(config: &TrainConfig, dataset: &Dataset, backend: &dyn VerifierBackend, out_dir: &Path) -> Result<RunArtifacts> {
    config.validate()?;
    fs::create_dir_all(out_dir)?;
    write_json(out_dir.join(paths::CONFIG), config)?;
    dataset.save(out_dir.join(paths::DATASET))?;
    let mut metrics = MetricsWriter::create(out_dir.join(paths::METRICS))?;
    let mut dump = if config.dump_rollouts { Some(DumpWriter::create(out_dir.join(paths::ROLLOUTS))?) } else { None };
    if config.checkpoint_every > 0 {
        fs::create_dir_all(out_dir.join(paths::CHECKPOINTS))?;
    }

    let mut trainer = Trainer::new(initial_policy(dataset, config)?, dataset, config.clone(), backend)?;
    let mut rows = Vec::with_capacity(config.iterations);
    let mut stats = Vec::with_capacity(config.iterations);
    for it in 0..config.iterations {
        let start = Instant::now();
        let outcome = match trainer.step() {
            Ok(o) => o,
            Err(e) => {
                let d = AbortDump {
                    iteration: it,
                    error_kind: e.kind(),
                    error: e.to_string(),
                    config,
                    policy: trainer.policy().to_checkpoint(),
                };
                write_json(out_dir.join(paths::ABORT), &d)?;
                return Err(e);
            }
        };
        let algorithm = outcome.rollouts.first().map_or(config.algorithm, |r| r.algorithm);
        let row = MetricsRow::new(&outcome.stats, start.elapsed().as_secs_f64() * 1e3, algorithm, config.seed);
        metrics.write(&row)?;
        if let Some(d) = dump.as_mut() {
            for (i, s) in outcome.rollouts.iter().enumerate() {
                d.write(&RolloutRecord::new(it, i / config.group_size, config.reward_mode, s))?;
            }
        }
        if config.checkpoint_every > 0 && (it + 1) % config.checkpoint_every == 0 {
            trainer.policy().save(out_dir.join(paths::CHECKPOINTS).join(format!("iter_{:06}.json", it + 1)))?;
        }
        rows.push(row);
        stats.push(outcome.stats);
    }
    if let Some(d) = dump.as_mut() {
        d.flush()?;
    }
    let policy = trainer.into_policy();
    policy.save(out_dir.join(paths::FINAL))?;
    let summary = RunSummary {
        out_dir: out_dir.to_path_buf(),
        algorithm: config.algorithm,
        reward_mode: config.reward_mode,
        seed: config.seed,
        iterations: config.iterations,
        tail_contradiction_rate: tail_mean(&rows, TAIL, |r| r.contradiction_rate),
        tail_answer_accuracy: tail_mean(&rows, TAIL, |r| r.answer_accuracy),
        tail_mean_reward: tail_mean(&rows, TAIL, |r| r.mean_reward),
        tail_entropy: tail_mean(&rows, TAIL, |r| r.mean_entropy),
    };
    write_json(out_dir.join(paths::SUMMARY), &summary)?;
    Ok(RunArtifacts { summary, stats, policy })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub instance_id: InstanceId,
    pub sample: usize,
    pub tokens: Vec<Token>,
    pub truncated: bool,
    pub steps: Vec<Span>,
    pub answer: Option<Span>,
    pub labels: Vec<StepLabel>,
    pub reward: RewardBreakdown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceEval {
    pub instance_id: InstanceId,
    pub accuracy: f64,
    pub contradiction_rate: f64,
    pub mean_steps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples_per_instance: usize,
    pub seed: u64,
    pub accuracy: f64,
    pub contradiction_rate: f64,
    pub entailed_rate: f64,
    pub mean_final_reward: f64,
    pub per_instance: Vec<InstanceEval>,
}

/// Samples `samples` responses per instance and scores them. Every rollout
/// is returned for dumping.
pub fn evaluate(
    policy: &PolicyParams,
    dataset: &Dataset,
    backend: &dyn VerifierBackend,
    samples: usize,
    max_len: usize,
    seed: u64,
) -> Result<(EvalReport, Vec<EvalRecord>)> {
    if samples == 0 {
        return Err(Error::Config("evaluation needs at least one sample per instance".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::new();
    let mut per_instance = Vec::new();
    let (mut n_steps, mut n_contra, mut n_ent) = (0usize, 0usize, 0usize);
    let (mut correct, mut total_reward) = (0.0, 0.0);
    for inst in &dataset.instances {
        let (mut c, mut steps, mut contra) = (0.0, 0usize, 0usize);
        for sample in 0..samples {
            let ro = sample_rollout(policy, inst, max_len, rng.next_u64())?;
            let labels = label_rollout(&ro, inst, backend)?;
            let reward = RewardBreakdown::new(answer_reward(&ro, inst), labels.clone());
            c += reward.answer;
            total_reward += reward.final_reward;
            steps += labels.len();
            contra += labels.iter().filter(|&&l| l == StepLabel::Contradicted).count();
            n_ent += labels.iter().filter(|&&l| l == StepLabel::Entailed).count();
            records.push(EvalRecord {
                instance_id: inst.id,
                sample,
                tokens: ro.tokens,
                truncated: ro.truncated,
                steps: ro.steps,
                answer: ro.answer,
                labels,
                reward,
            });
        }
        correct += c;
        n_steps += steps;
        n_contra += contra;
        per_instance.push(InstanceEval {
            instance_id: inst.id,
            accuracy: c / samples as f64,
            contradiction_rate: if steps == 0 { 0.0 } else { contra as f64 / steps as f64 },
            mean_steps: steps as f64 / samples as f64,
        });
    }
    let n = (dataset.instances.len() * samples).max(1) as f64;
    let rate = |x: usize| if n_steps == 0 { 0.0 } else { x as f64 / n_steps as f64 };
    let report = EvalReport {
        samples_per_instance: samples,
        seed,
        accuracy: correct / n,
        contradiction_rate: rate(n_contra),
        entailed_rate: rate(n_ent),
        mean_final_reward: total_reward / n,
        per_instance,
    };
    Ok((report, records))
}

/// One arm of the ablation sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Arm {
    pub name: &'static str,
    pub algorithm: Algorithm,
    pub reward_mode: RewardMode,
}

pub const ABLATION_ARMS: [Arm; 5] = [
    Arm { name: "grpo_answer_only", algorithm: Algorithm::Grpo, reward_mode: RewardMode::AnswerOnly },
    Arm { name: "grpo_factuality", algorithm: Algorithm::Grpo, reward_mode: RewardMode::AnswerPlusFactuality },
    Arm { name: "fspo", algorithm: Algorithm::Fspo, reward_mode: RewardMode::AnswerPlusFactuality },
    Arm { name: "reinforce_pp", algorithm: Algorithm::ReinforcePp, reward_mode: RewardMode::AnswerOnly },
    Arm { name: "fspo_reinforce_pp", algorithm: Algorithm::FspoReinforcePp, reward_mode: RewardMode::AnswerPlusFactuality },
];

/// Accuracy may drop by at most this much for a treatment arm to pass.
pub const ACCURACY_SLACK: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionalCheck {
    pub treatment: String,
    pub baseline: String,
    pub contradiction_lower: bool,
    pub accuracy_kept: bool,
    pub pass: bool,
}

impl DirectionalCheck {
    pub fn new(treatment: &RunSummary, t_name: &str, baseline: &RunSummary, b_name: &str) -> Self {
        let contradiction_lower = treatment.tail_contradiction_rate < baseline.tail_contradiction_rate;
        let accuracy_kept = treatment.tail_answer_accuracy >= baseline.tail_answer_accuracy - ACCURACY_SLACK;
        Self {
            treatment: t_name.into(),
            baseline: b_name.into(),
            contradiction_lower,
            accuracy_kept,
            pass: contradiction_lower && accuracy_kept,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub tail: usize,
    pub arms: Vec<(String, RunSummary)>,
    pub checks: Vec<DirectionalCheck>,
}

impl AblationReport {
    pub fn arm(&self, name: &str) -> Option<&RunSummary> {
        self.arms.iter().find(|(n, _)| n == name).map(|(_, s)| s)
    }
}

/// Trains every arm of [`ABLATION_ARMS`] on the same dataset and seed, one
/// thread per arm, and writes `comparison.csv` plus `ablation.json`.
pub fn run_ablation(config: &TrainConfig, dataset: &Dataset, backend: &dyn VerifierBackend, out_dir: &Path) -> Result<AblationReport> {
    fs::create_dir_all(out_dir)?;
    let results: Vec<Result<RunSummary>> = std::thread::scope(|scope| {
        let handles: Vec<_> = ABLATION_ARMS
            .iter()
            .map(|arm| {
                let cfg = TrainConfig { algorithm: arm.algorithm, reward_mode: arm.reward_mode, ..config.clone() };
                let dir = out_dir.join(arm.name);
                scope.spawn(move || run_train(&cfg, dataset, backend, &dir).map(|a| a.summary))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("arm thread panicked")).collect()
    });
    let mut arms = Vec::new();
    for (arm, r) in ABLATION_ARMS.iter().zip(results) {
        arms.push((arm.name.to_string(), r?));
    }
    let get = |n: &str| &arms.iter().find(|(a, _)| a == n).expect("arm present").1;
    let checks = vec![
        DirectionalCheck::new(get("fspo"), "fspo", get("grpo_answer_only"), "grpo_answer_only"),
        DirectionalCheck::new(get("fspo_reinforce_pp"), "fspo_reinforce_pp", get("reinforce_pp"), "reinforce_pp"),
    ];
    let report = AblationReport { tail: TAIL, arms, checks };

    let mut w = csv::Writer::from_path(out_dir.join(paths::COMPARISON))?;
    w.write_record([
        "arm",
        "algorithm",
        "reward_mode",
        "seed",
        "iterations",
        "tail_contradiction_rate",
        "tail_answer_accuracy",
        "tail_mean_reward",
        "tail_entropy",
    ])?;
    for (name, s) in &report.arms {
        w.write_record([
            name.clone(),
            s.algorithm.to_string(),
            serde_json::to_value(s.reward_mode)?.as_str().unwrap_or_default().to_string(),
            s.seed.to_string(),
            s.iterations.to_string(),
            s.tail_contradiction_rate.to_string(),
            s.tail_answer_accuracy.to_string(),
            s.tail_mean_reward.to_string(),
            s.tail_entropy.to_string(),
        ])?;
    }
    w.flush()?;
    write_json(out_dir.join(paths::ABLATION), &report)?;
    Ok(report)
}

/// Generates a dataset and writes it as JSON.
pub fn generate_dataset(spec: &WorldSpec, out: &Path) -> Result<Dataset> {
    let ds = Dataset::generate(spec)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    ds.save(out)?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{QaInstance, Vocab};
    use crate::verify::{NeutralVerifier, OracleVerifier};

    fn small(iterations: usize) -> (TrainConfig, Dataset) {
        let cfg = TrainConfig { iterations, dump_rollouts: true, checkpoint_every: 5, ..TrainConfig::default() };
        let ds = cfg.dataset.load(None).unwrap();
        (cfg, ds)
    }

    #[test]
    fn identical_runs_write_identical_metrics() {
        let (cfg, ds) = small(12);
        let oracle = OracleVerifier::new(ds.vocab.clone());
        let dir = tempfile::tempdir().unwrap();
        let a = run_train(&cfg, &ds, &oracle, &dir.path().join("a")).unwrap();
        run_train(&cfg, &ds, &oracle, &dir.path().join("b")).unwrap();
        let read = |d: &str| std::fs::read_to_string(dir.path().join(d).join(paths::METRICS)).unwrap();
        assert_eq!(strip_columns(&read("a"), &VOLATILE_COLUMNS).unwrap(), strip_columns(&read("b"), &VOLATILE_COLUMNS).unwrap());
        let rows = read_metrics(dir.path().join("a").join(paths::METRICS)).unwrap();
        assert_eq!(rows.len(), 12);
        assert!(rows.iter().enumerate().all(|(i, r)| r.iteration == i && r.seed == 42));
        assert_eq!(rows[11].contradiction_rate, a.stats[11].contradiction_rate);
        assert!(dir.path().join("a").join(paths::CHECKPOINTS).join("iter_000010.json").exists());
        let last = PolicyParams::load(dir.path().join("a").join(paths::FINAL)).unwrap();
        assert_eq!(last, a.policy);
    }

    #[test]
    fn header_hash_guards_the_schema() {
        let (cfg, ds) = small(2);
        let dir = tempfile::tempdir().unwrap();
        run_train(&cfg, &ds, &NeutralVerifier, dir.path()).unwrap();
        let path = dir.path().join(paths::METRICS);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with(&format!("# columns-sha256={}\n{}\n", header_hash(), METRICS_COLUMNS.join(","))));
        std::fs::write(&path, text.replacen("mean_kl", "kl", 1).replacen(&header_hash(), "00", 1)).unwrap();
        assert!(matches!(read_metrics(&path), Err(Error::Load(_))));
        let stripped = strip_columns(&text, &["wall_ms", "algorithm"]).unwrap();
        assert!(!stripped.contains("wall_ms") && !stripped.contains("fspo"));
    }

    #[test]
    fn dumps_replay_exactly() {
        for alg in [Algorithm::Fspo, Algorithm::FspoReinforcePp, Algorithm::Grpo, Algorithm::Ppo] {
            let (cfg, ds) = small(6);
            let cfg = TrainConfig { algorithm: alg, ..cfg };
            let oracle = OracleVerifier::new(ds.vocab.clone());
            let dir = tempfile::tempdir().unwrap();
            run_train(&cfg, &ds, &oracle, dir.path()).unwrap();
            let recs = read_dump(dir.path().join(paths::ROLLOUTS)).unwrap();
            assert_eq!(recs.len(), 6 * 8 * 8);
            let rep = rescore_dump(&recs, &ds, &cfg, &oracle).unwrap();
            assert!(rep.exact(), "{alg}: {:?}", &rep.mismatches[..rep.mismatches.len().min(3)]);
            assert_eq!(rep.n_iterations, 6);

            let mut tampered = recs.clone();
            tampered[3].advantage += 1e-12;
            assert!(!rescore_dump(&tampered, &ds, &cfg, &oracle).unwrap().exact());
        }
    }

    #[test]
    fn failing_run_leaves_a_diagnostic_dump() {
        // Without relations an opening entity has no legal continuation.
        let vocab = Vocab::new(2, 0, 0);
        let inst = QaInstance {
            id: 0,
            prompt: vec![vocab.entity(0)],
            gold_answer: vec![vocab.entity(1)],
            evidence: vec![],
            hops: 1,
            algorithm: None,
        };
        let ds = Dataset { seed: 0, vocab, world: None, instances: vec![inst] };
        let cfg = TrainConfig { iterations: 5, ..TrainConfig::default() };
        let dir = tempfile::tempdir().unwrap();
        let err = run_train(&cfg, &ds, &NeutralVerifier, dir.path()).err().expect("run must fail");
        assert_eq!(err.kind(), "contract");
        let dump: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join(paths::ABORT)).unwrap()).unwrap();
        assert_eq!(dump["error_kind"], "contract");
        assert!(dump["policy"]["rows"].is_array());
    }

    #[test]
    fn evaluation_reports_rates() {
        let (cfg, ds) = small(1);
        let oracle = OracleVerifier::new(ds.vocab.clone());
        let p = initial_policy(&ds, &cfg).unwrap();
        let (rep, recs) = evaluate(&p, &ds, &oracle, 16, cfg.max_len, 3).unwrap();
        assert_eq!(recs.len(), 16 * ds.instances.len());
        assert_eq!(rep.per_instance.len(), ds.instances.len());
        assert!((0.0..=1.0).contains(&rep.accuracy) && (0.0..=1.0).contains(&rep.contradiction_rate));
        assert!(rep.contradiction_rate > 0.0);
        assert_eq!(evaluate(&p, &ds, &oracle, 16, cfg.max_len, 3).unwrap().0, rep);
    }

    #[test]
    fn ablation_writes_comparison() {
        let (cfg, ds) = small(3);
        let cfg = TrainConfig { dump_rollouts: false, checkpoint_every: 0, ..cfg };
        let oracle = OracleVerifier::new(ds.vocab.clone());
        let dir = tempfile::tempdir().unwrap();
        let rep = run_ablation(&cfg, &ds, &oracle, dir.path()).unwrap();
        assert_eq!(rep.arms.len(), 5);
        assert_eq!(rep.checks.len(), 2);
        let csv = std::fs::read_to_string(dir.path().join(paths::COMPARISON)).unwrap();
        assert_eq!(csv.lines().count(), 6);
        for arm in ABLATION_ARMS {
            assert!(dir.path().join(arm.name).join(paths::METRICS).exists());
            assert_eq!(rep.arm(arm.name).unwrap().algorithm, arm.algorithm);
        }
    }

    #[test]
    fn generated_dataset_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nested").join("world.json");
        let ds = generate_dataset(&WorldSpec::two_hop_default(), &path).unwrap();
        assert_eq!(Dataset::load(&path).unwrap(), ds);
    }
}
