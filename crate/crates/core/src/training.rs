//! REINFORCE with a greedy-rollout baseline.
//!
//! The baseline is a frozen copy of the policy decoded greedily. At the end
//! of every epoch both networks are compared on a fixed evaluation set with
//! a one-sided paired t-test, and the baseline is overwritten by the policy
//! when the policy is significantly better.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use pdpha_nn::{Adam, Tape};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::decoder::{decode, greedy_routes, Sampler};
use crate::encoder::{batch_pairs, encode};
use crate::error::{PdpError, Result};
use crate::instances::{generate_many, Distribution, GeneratorConfig, Instance, PointSampler};
use crate::model::{ModelConfig, PolicyModel};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Pickup-delivery pairs per training instance.
    pub n: usize,
    pub distribution: Distribution,
    pub model: ModelConfig,
    pub epochs: usize,
    pub batches_per_epoch: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Significance level of the baseline replacement test.
    pub alpha: f64,
    pub ttest_eval_size: usize,
    /// Held-out instances whose mean greedy objective is logged per epoch.
    pub validation_size: usize,
    /// Encoder batch size for greedy evaluation.
    pub eval_batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            n: 10,
            distribution: Distribution::Uniform,
            model: ModelConfig::default(),
            epochs: 800,
            batches_per_epoch: 2500,
            batch_size: 512,
            learning_rate: 1e-4,
            alpha: 0.05,
            ttest_eval_size: 10_000,
            validation_size: 1000,
            eval_batch_size: 512,
            seed: 1234,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let positive = [
            ("n", self.n),
            ("batches_per_epoch", self.batches_per_epoch),
            ("batch_size", self.batch_size),
            ("validation_size", self.validation_size),
            ("eval_batch_size", self.eval_batch_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(PdpError::InvalidConfig(format!("{name} must be positive")));
            }
        }
        if self.ttest_eval_size < 2 {
            return Err(PdpError::InvalidConfig("ttest_eval_size must be at least 2".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(PdpError::InvalidConfig("learning_rate must be positive".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(PdpError::InvalidConfig("alpha must lie in (0, 1)".into()));
        }
        PointSampler::new(self.distribution)?;
        Ok(())
    }
}

/// Summary of one policy-gradient step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BatchStats {
    pub loss: f64,
    /// Mean of the sampled rewards (negated objectives).
    pub mean_reward: f64,
    pub mean_baseline_reward: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_sample_reward: f64,
    pub mean_greedy_obj: f64,
    pub replaced: bool,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean greedy objective of the initial policy on the validation set.
    pub initial_greedy_obj: f64,
    pub epochs: Vec<EpochRecord>,
}

impl TrainReport {
    pub const CSV_HEADER: &'static str = "epoch,mean_sample_reward,mean_greedy_obj,replaced,seconds";

    pub fn replacements(&self) -> usize {
        self.epochs.iter().filter(|e| e.replaced).count()
    }

    pub fn total_seconds(&self) -> f64 {
        self.epochs.iter().map(|e| e.seconds).sum()
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{}", Self::CSV_HEADER)?;
        for e in &self.epochs {
            writeln!(w, "{}", csv_row(e))?;
        }
        Ok(())
    }
}

fn csv_row(e: &EpochRecord) -> String {
    format!(
        "{},{},{},{},{:.3}",
        e.epoch, e.mean_sample_reward, e.mean_greedy_obj, e.replaced as u8, e.seconds
    )
}

/// One REINFORCE step on `instances`: a sampled route per instance from
/// `policy`, a greedy route from `baseline`, and an optimizer step on
/// `mean((cost - baseline cost) · log p)`.
pub fn reinforce_batch<R: rand::Rng>(
    policy: &mut PolicyModel,
    baseline: &PolicyModel,
    optimizer: &mut Adam,
    instances: &[Instance],
    rng: &mut R,
) -> Result<BatchStats> {
    batch_pairs(instances)?;
    if policy.config() != baseline.config() {
        return Err(PdpError::InvalidConfig("policy and baseline architectures differ".into()));
    }
    let base = greedy_routes(baseline, instances, instances.len())?;
    let mut tape = Tape::new();
    let enc = encode(&mut tape, policy, instances)?;
    let out = decode(&mut tape, policy, instances, &enc, 1, &mut Sampler::new(rng))?;
    let b = instances.len() as f64;
    let weights: Vec<f64> = out
        .rollouts
        .iter()
        .zip(&base)
        .map(|(r, v)| (r.objective - v.objective) / b)
        .collect();
    let log_probs = out.log_probs.expect("recording tape");
    let loss = tape.weighted_sum(log_probs, weights)?;
    let grads = tape.backward(loss)?;
    grads.accumulate_into(policy.params_mut());
    optimizer.step(policy.params_mut());
    Ok(BatchStats {
        loss: tape.value(loss).item().expect("scalar loss"),
        mean_reward: -out.rollouts.iter().map(|r| r.objective).sum::<f64>() / b,
        mean_baseline_reward: -base.iter().map(|r| r.objective).sum::<f64>() / b,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TTestOutcome {
    /// Mean of `candidate - baseline`.
    pub mean_diff: f64,
    /// Infinite when the differences have zero spread.
    pub t: f64,
    /// `P(T <= t)` under the null hypothesis of equal means.
    pub p_value: f64,
}

/// One-sided paired t-test of H1: the candidate's mean is lower.
pub fn paired_t_test(candidate: &[f64], baseline: &[f64]) -> Result<TTestOutcome> {
    if candidate.len() != baseline.len() {
        return Err(PdpError::InvalidConfig("paired samples differ in length".into()));
    }
    let k = candidate.len();
    if k < 2 {
        return Err(PdpError::InvalidConfig("the paired t-test needs at least two pairs".into()));
    }
    let diffs: Vec<f64> = candidate.iter().zip(baseline).map(|(c, b)| c - b).collect();
    let mean = diffs.iter().sum::<f64>() / k as f64;
    let var = diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (k - 1) as f64;
    if var == 0.0 {
        let (t, p_value) = if mean < 0.0 {
            (f64::NEG_INFINITY, 0.0)
        } else if mean > 0.0 {
            (f64::INFINITY, 1.0)
        } else {
            (0.0, 1.0)
        };
        return Ok(TTestOutcome { mean_diff: mean, t, p_value });
    }
    let t = mean / (var / k as f64).sqrt();
    let dist = StudentsT::new(0.0, 1.0, (k - 1) as f64).map_err(|e| PdpError::InvalidConfig(e.to_string()))?;
    Ok(TTestOutcome {
        mean_diff: mean,
        t,
        p_value: dist.cdf(t),
    })
}

/// Greedy objectives of `model` on `instances`.
pub fn greedy_objectives(model: &PolicyModel, instances: &[Instance], batch_size: usize) -> Result<Vec<f64>> {
    Ok(greedy_routes(model, instances, batch_size)?
        .into_iter()
        .map(|r| r.objective)
        .collect())
}

/// Copies `policy` into `baseline` when the policy's greedy objectives on
/// `eval` are significantly lower at level `alpha`.
pub fn paired_t_test_replace(
    policy: &PolicyModel,
    baseline: &mut PolicyModel,
    eval: &[Instance],
    alpha: f64,
    batch_size: usize,
) -> Result<bool> {
    let candidate = greedy_objectives(policy, eval, batch_size)?;
    let current = greedy_objectives(baseline, eval, batch_size)?;
    let outcome = paired_t_test(&candidate, &current)?;
    let replace = outcome.p_value < alpha;
    if replace {
        baseline.copy_weights_from(policy)?;
    }
    Ok(replace)
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Epoch loop state.
pub struct Trainer {
    config: TrainConfig,
    policy: PolicyModel,
    baseline: PolicyModel,
    optimizer: Adam,
    rng: ChaCha8Rng,
    sampler: PointSampler,
    ttest_set: Vec<Instance>,
    /// Greedy objectives of the baseline on `ttest_set`, kept until replaced.
    baseline_objs: Vec<f64>,
    validation_set: Vec<Instance>,
    report: TrainReport,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let policy = PolicyModel::new(config.model, config.seed)?;
        let baseline = policy.clone();
        let optimizer = Adam::new(policy.params(), config.learning_rate)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        let eval_set = |offset: u64, count: usize| {
            generate_many(
                &GeneratorConfig {
                    n: config.n,
                    distribution: config.distribution,
                    seed: config.seed.wrapping_add(offset),
                },
                count,
            )
        };
        let ttest_set = eval_set(0x7e57, config.ttest_eval_size)?;
        let validation_set = eval_set(0x0a11d, config.validation_size)?;
        let baseline_objs = greedy_objectives(&baseline, &ttest_set, config.eval_batch_size)?;
        let initial_greedy_obj = mean(&greedy_objectives(&policy, &validation_set, config.eval_batch_size)?);
        Ok(Self {
            sampler: PointSampler::new(config.distribution)?,
            config,
            policy,
            baseline,
            optimizer,
            rng,
            ttest_set,
            baseline_objs,
            validation_set,
            report: TrainReport {
                initial_greedy_obj,
                epochs: Vec::new(),
            },
        })
    }

    pub fn policy(&self) -> &PolicyModel {
        &self.policy
    }

    pub fn baseline(&self) -> &PolicyModel {
        &self.baseline
    }

    pub fn report(&self) -> &TrainReport {
        &self.report
    }

    pub fn validation_set(&self) -> &[Instance] {
        &self.validation_set
    }

    /// Runs one epoch and returns its record.
    pub fn run_epoch(&mut self) -> Result<EpochRecord> {
        let start = Instant::now();
        let cfg = &self.config;
        let mut reward_sum = 0.0;
        for _ in 0..cfg.batches_per_epoch {
            let batch: Vec<Instance> = (0..cfg.batch_size)
                .map(|_| self.sampler.instance(&mut self.rng, cfg.n))
                .collect();
            let stats = reinforce_batch(&mut self.policy, &self.baseline, &mut self.optimizer, &batch, &mut self.rng)?;
            reward_sum += stats.mean_reward;
        }
        let candidate = greedy_objectives(&self.policy, &self.ttest_set, cfg.eval_batch_size)?;
        let outcome = paired_t_test(&candidate, &self.baseline_objs)?;
        let replaced = outcome.p_value < cfg.alpha;
        if replaced {
            self.baseline.copy_weights_from(&self.policy)?;
            self.baseline_objs = candidate;
        }
        let mean_greedy_obj = mean(&greedy_objectives(&self.policy, &self.validation_set, cfg.eval_batch_size)?);
        let record = EpochRecord {
            epoch: self.report.epochs.len() + 1,
            mean_sample_reward: reward_sum / cfg.batches_per_epoch as f64,
            mean_greedy_obj,
            replaced,
            seconds: start.elapsed().as_secs_f64(),
        };
        self.report.epochs.push(record.clone());
        Ok(record)
    }

    pub fn finish(self) -> (PolicyModel, TrainReport) {
        (self.policy, self.report)
    }
}

/// Trains for `config.epochs` epochs, calling `on_epoch` after each one.
pub fn train_with<F>(config: TrainConfig, mut on_epoch: F) -> Result<(PolicyModel, TrainReport)>
where
    F: FnMut(&EpochRecord, &PolicyModel) -> Result<()>,
{
    let mut trainer = Trainer::new(config)?;
    for _ in 0..trainer.config.epochs {
        let record = trainer.run_epoch()?;
        on_epoch(&record, trainer.policy())?;
    }
    Ok(trainer.finish())
}

pub fn train(config: TrainConfig) -> Result<(PolicyModel, TrainReport)> {
    train_with(config, |_, _| Ok(()))
}

/// Trains while keeping `checkpoint` and the CSV `log` current after every
/// epoch. The checkpoint is also written before the first epoch. Without
/// `timing` the logged seconds are zero, making the log reproducible.
pub fn train_to_files(config: TrainConfig, checkpoint: &Path, log: &Path, timing: bool) -> Result<(PolicyModel, TrainReport)> {
    let n = config.n;
    let mut trainer = Trainer::new(config)?;
    trainer.policy().save(checkpoint, Some(n))?;
    let mut out = BufWriter::new(File::create(log)?);
    writeln!(out, "{}", TrainReport::CSV_HEADER)?;
    out.flush()?;
    for _ in 0..trainer.config.epochs {
        let mut record = trainer.run_epoch()?;
        if !timing {
            record.seconds = 0.0;
            trainer.report.epochs.last_mut().expect("epoch just recorded").seconds = 0.0;
        }
        trainer.policy().save(checkpoint, Some(n))?;
        writeln!(out, "{}", csv_row(&record))?;
        out.flush()?;
    }
    Ok(trainer.finish())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_spread_rules() {
        let same = paired_t_test(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(same.p_value, 1.0);
        let better = paired_t_test(&[0.5, 1.5, 2.5], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(better.p_value, 0.0);
        let worse = paired_t_test(&[1.5, 2.5, 3.5], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(worse.p_value, 1.0);
    }

    #[test]
    fn t_statistic_by_hand() {
        // diffs 1, -1, -3: mean -1, sample sd 2, t = -1 / (2 / sqrt 3)
        let o = paired_t_test(&[2.0, 0.0, -2.0], &[1.0, 1.0, 1.0]).unwrap();
        assert!((o.mean_diff + 1.0).abs() < 1e-15);
        assert!((o.t + 3f64.sqrt() / 2.0).abs() < 1e-12);
        assert!(o.p_value > 0.0 && o.p_value < 0.5);
    }

    #[test]
    fn t_test_rejects_short_or_mismatched_input() {
        assert!(paired_t_test(&[1.0], &[1.0]).is_err());
        assert!(paired_t_test(&[1.0, 2.0], &[1.0]).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad_alpha = TrainConfig { alpha: 1.0, ..TrainConfig::default() };
        assert!(bad_alpha.validate().is_err());
        let bad_lr = TrainConfig { learning_rate: 0.0, ..TrainConfig::default() };
        assert!(bad_lr.validate().is_err());
        let tiny_eval = TrainConfig { ttest_eval_size: 1, ..TrainConfig::default() };
        assert!(tiny_eval.validate().is_err());
    }
}
