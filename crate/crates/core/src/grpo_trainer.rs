//! Group relative policy optimization against a composite reward.
//!
//! Each step samples `k` completions per toxic input from the current
//! policy, scores them with `lambda * NonToxic(o) + Sim(s, o)`, normalizes the
//! rewards within the group, and minimizes the token-averaged clipped
//! surrogate minus a k3 penalty towards the frozen reference policy.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;

use crate::corpus::{Sentence, TokenId};
use crate::error::{Error, Result};
use crate::optim::{clip_global_norm, Adam, LrSchedule};
use crate::policy::{
    make_prompt, project_to_adapter, AdapterParams, Decoding, Network, PolicyParams,
    ReferencePolicy, SequenceRecord,
};
use crate::rng::{self, tag};
use crate::similarity::SimScorer;
use crate::toxicity::ToxicityModel;

/// Reward standard deviations below this make a group degenerate.
pub const DEGENERATE_STD: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RewardBreakdown {
    pub nontoxic: f64,
    pub sim: f64,
    pub lambda: f64,
    pub total: f64,
}

impl RewardBreakdown {
    pub fn new(nontoxic: f64, sim: f64, lambda: f64) -> Self {
        RewardBreakdown {
            nontoxic,
            sim,
            lambda,
            total: lambda * nontoxic + sim,
        }
    }
}

/// The scorer and classifier used inside the reward.
#[derive(Clone, Copy, Debug)]
pub struct RewardModels<'a> {
    pub scorer: &'a SimScorer,
    pub tox: &'a ToxicityModel,
}

pub fn compute_reward(
    scorer: &SimScorer,
    tox: &ToxicityModel,
    s: &[TokenId],
    o: &[TokenId],
    lambda: f64,
) -> RewardBreakdown {
    RewardBreakdown::new(tox.nontoxic_prob(o), scorer.sim(s, o), lambda)
}

/// `(R_j - mean) / std` with the sample standard deviation; all zeros when
/// the group is degenerate.
pub fn compute_advantages(rewards: &[f64]) -> Vec<f64> {
    let k = rewards.len();
    if k < 2 {
        return vec![0.0; k];
    }
    let mean = rewards.iter().sum::<f64>() / k as f64;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (k - 1) as f64;
    let std = var.sqrt();
    if !(std >= DEGENERATE_STD) {
        return vec![0.0; k];
    }
    rewards.iter().map(|r| (r - mean) / std).collect()
}

/// Orientation of the ratio inside the k3 penalty.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum KlRatio {
    /// `rho = pi_ref / pi_theta`, unbiased for KL(pi_theta || pi_ref) on
    /// samples from pi_theta.
    #[default]
    RefOverTheta,
    /// `rho = pi_theta / pi_ref`, the same ratio as the surrogate.
    ThetaOverRef,
}

impl KlRatio {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "ref-over-theta" | "default" => Some(KlRatio::RefOverTheta),
            "theta-over-ref" | "paper-literal" => Some(KlRatio::ThetaOverRef),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            KlRatio::RefOverTheta => "ref-over-theta",
            KlRatio::ThetaOverRef => "theta-over-ref",
        }
    }

    fn log_rho(self, lp_theta: f64, lp_ref: f64) -> f64 {
        match self {
            KlRatio::RefOverTheta => lp_ref - lp_theta,
            KlRatio::ThetaOverRef => lp_theta - lp_ref,
        }
    }

    /// Penalty value and its derivative with respect to `lp_theta`.
    fn penalty(self, lp_theta: f64, lp_ref: f64) -> (f64, f64) {
        let log_rho = self.log_rho(lp_theta, lp_ref);
        let rho = log_rho.exp();
        let d = match self {
            KlRatio::RefOverTheta => 1.0 - rho,
            KlRatio::ThetaOverRef => rho - 1.0,
        };
        (k3(log_rho), d)
    }
}

fn k3(log_rho: f64) -> f64 {
    // exp_m1 keeps the value exact near rho = 1.
    (log_rho.exp_m1() - log_rho).max(0.0)
}

/// Per-token k3 estimate `rho - 1 - ln rho`, `rho = exp(lp_ref - lp_theta)`.
pub fn kl_k3(logprob_theta: f64, logprob_ref: f64) -> f64 {
    kl_k3_with(KlRatio::RefOverTheta, logprob_theta, logprob_ref)
}

pub fn kl_k3_with(orientation: KlRatio, logprob_theta: f64, logprob_ref: f64) -> f64 {
    k3(orientation.log_rho(logprob_theta, logprob_ref))
}

pub fn clipped_objective(ratio: f64, advantage: f64, epsilon: f64) -> f64 {
    let clipped = ratio.clamp(1.0 - epsilon, 1.0 + epsilon);
    (ratio * advantage).min(clipped * advantage)
}

/// Derivative of [`clipped_objective`] with respect to the log of the ratio.
fn clipped_objective_dlog(ratio: f64, advantage: f64, epsilon: f64) -> f64 {
    let clipped_active = (advantage > 0.0 && ratio > 1.0 + epsilon)
        || (advantage < 0.0 && ratio < 1.0 - epsilon);
    if clipped_active {
        0.0
    } else {
        ratio * advantage
    }
}

/// One prompt's group of completions with everything the loss needs.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupSample {
    pub source: Sentence,
    /// Completions with per-token log-probabilities under the current policy.
    pub records: Vec<SequenceRecord>,
    /// Per-token log-probabilities of the same completions under pi_ref.
    pub ref_logprobs: Vec<Vec<f64>>,
    pub rewards: Vec<RewardBreakdown>,
    pub advantages: Vec<f64>,
}

impl GroupSample {
    pub fn new(
        source: Sentence,
        records: Vec<SequenceRecord>,
        ref_logprobs: Vec<Vec<f64>>,
        rewards: Vec<RewardBreakdown>,
    ) -> Result<Self> {
        if records.len() < 2 || records.len() != ref_logprobs.len() || records.len() != rewards.len()
        {
            return Err(Error::Invalid(format!(
                "group needs k >= 2 consistent entries ({} records, {} ref, {} rewards)",
                records.len(),
                ref_logprobs.len(),
                rewards.len()
            )));
        }
        for (r, lp) in records.iter().zip(&ref_logprobs) {
            if r.logprobs.len() != r.completion.len() || lp.len() != r.completion.len() {
                return Err(Error::Invalid("log-probability length mismatch".into()));
            }
        }
        let totals: Vec<f64> = rewards.iter().map(|r| r.total).collect();
        let advantages = compute_advantages(&totals);
        Ok(GroupSample {
            source,
            records,
            ref_logprobs,
            rewards,
            advantages,
        })
    }

    pub fn k(&self) -> usize {
        self.records.len()
    }

    /// Human-readable dump used in divergence diagnostics.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "source {:?}", self.source.ids());
        for j in 0..self.k() {
            let _ = writeln!(
                out,
                "o{j} {:?} reward={:?} adv={} lp={:?} lp_ref={:?}",
                self.records[j].completion,
                self.rewards[j],
                self.advantages[j],
                self.records[j].logprobs,
                self.ref_logprobs[j]
            );
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupLoss {
    pub loss: f64,
    /// dL/d(log pi_theta) per token, per completion.
    pub token_weights: Vec<Vec<f64>>,
    /// Token-mean penalty over the group's non-empty completions.
    pub mean_kl: f64,
    /// Indices of zero-length completions, which contribute nothing.
    pub flagged: Vec<usize>,
}

/// Token-averaged clipped surrogate with k3 penalty, and its derivative with
/// respect to every sampled token's log-probability under pi_theta.
pub fn grpo_loss(group: &GroupSample, beta: f64, epsilon: f64, orientation: KlRatio) -> GroupLoss {
    let k = group.k() as f64;
    let mut loss = 0.0;
    let mut kl_sum = 0.0;
    let mut kl_tokens = 0usize;
    let mut flagged = Vec::new();
    let mut token_weights = Vec::with_capacity(group.k());
    for (j, rec) in group.records.iter().enumerate() {
        let n = rec.completion.len();
        if n == 0 {
            flagged.push(j);
            token_weights.push(Vec::new());
            continue;
        }
        let a = group.advantages[j];
        let mut seq = 0.0;
        let mut w = Vec::with_capacity(n);
        for (&lp, &lp_ref) in rec.logprobs.iter().zip(&group.ref_logprobs[j]) {
            let ratio = (lp - lp_ref).exp();
            let (d, dd) = orientation.penalty(lp, lp_ref);
            seq += clipped_objective(ratio, a, epsilon) - beta * d;
            kl_sum += d;
            w.push(-(clipped_objective_dlog(ratio, a, epsilon) - beta * dd) / (k * n as f64));
        }
        kl_tokens += n;
        loss -= seq / (k * n as f64);
        token_weights.push(w);
    }
    GroupLoss {
        loss,
        token_weights,
        mean_kl: if kl_tokens == 0 { 0.0 } else { kl_sum / kl_tokens as f64 },
        flagged,
    }
}

/// Replaces each record's log-probabilities with those under `net`.
pub fn rescore(net: &Network, group: &mut GroupSample) -> Result<()> {
    for rec in &mut group.records {
        rec.logprobs = net.logprobs(&rec.prompt, &rec.completion)?;
    }
    Ok(())
}

/// Group loss at `(params, adapter)` and its exact gradient with respect to
/// the adapter factors. The stored policy log-probabilities are recomputed.
pub fn grpo_loss_and_grad(
    params: &PolicyParams,
    adapter: &AdapterParams,
    group: &GroupSample,
    beta: f64,
    epsilon: f64,
    orientation: KlRatio,
) -> Result<(f64, AdapterParams)> {
    let net = Network::new(params, Some(adapter))?;
    let mut g = group.clone();
    let mut traces = Vec::with_capacity(g.k());
    for rec in &mut g.records {
        let tr = net.trace(&rec.prompt, &rec.completion)?;
        rec.logprobs = tr.logprobs().to_vec();
        traces.push(tr);
    }
    let out = grpo_loss(&g, beta, epsilon, orientation);
    let mut merged = PolicyParams::zeros(params.dims);
    for (tr, w) in traces.iter().zip(&out.token_weights) {
        if !w.is_empty() {
            net.backward(tr, w, &mut merged);
        }
    }
    Ok((out.loss, project_to_adapter(adapter, &merged)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct GrpoConfig {
    pub k: usize,
    pub temperature: f64,
    pub learning_rate: f64,
    pub warmup_fraction: f64,
    pub weight_decay: f64,
    /// Prompts per micro-batch.
    pub batch_size: usize,
    pub grad_accum: usize,
    pub max_grad_norm: f64,
    pub epochs: usize,
    pub epsilon_clip: f64,
    pub beta_kl: f64,
    pub lambda: f64,
    pub kl_ratio: KlRatio,
    pub max_new_tokens: usize,
    /// Save the adapter every this many steps; 0 disables checkpoints.
    pub checkpoint_every: usize,
    pub checkpoint_dir: Option<PathBuf>,
    pub seed: u64,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        GrpoConfig {
            k: 4,
            temperature: 2.0,
            learning_rate: 1e-2,
            warmup_fraction: 0.10,
            weight_decay: 0.1,
            batch_size: 1,
            grad_accum: 8,
            max_grad_norm: 1.0,
            epochs: 5,
            epsilon_clip: 0.2,
            beta_kl: 0.04,
            lambda: 5.0,
            kl_ratio: KlRatio::RefOverTheta,
            max_new_tokens: 16,
            checkpoint_every: 0,
            checkpoint_dir: None,
            seed: 0,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.k < 2 {
            return bad(format!("grpo k must be >= 2, got {}", self.k));
        }
        if !(self.epsilon_clip > 0.0 && self.epsilon_clip < 1.0) {
            return bad(format!("grpo epsilon_clip must lie in (0, 1), got {}", self.epsilon_clip));
        }
        if !(self.beta_kl >= 0.0) {
            return bad(format!("grpo beta_kl must be >= 0, got {}", self.beta_kl));
        }
        if !(self.lambda >= 0.0) {
            return bad(format!("grpo lambda must be >= 0, got {}", self.lambda));
        }
        if !(self.temperature > 0.0) || !(self.learning_rate > 0.0) {
            return bad("grpo temperature and learning_rate must be > 0".into());
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return bad("grpo warmup_fraction must lie in [0, 1]".into());
        }
        if self.batch_size == 0 || self.grad_accum == 0 || self.max_new_tokens == 0 {
            return bad("grpo batch_size, grad_accum and max_new_tokens must be >= 1".into());
        }
        if !(self.max_grad_norm > 0.0) {
            return bad("grpo max_grad_norm must be > 0".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GrpoStepLog {
    pub step: usize,
    pub epoch: usize,
    pub mean_reward: f64,
    pub mean_nontoxic: f64,
    pub mean_sim: f64,
    pub mean_kl: f64,
    pub loss: f64,
    /// Global adapter gradient norm before clipping.
    pub grad_norm: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GrpoOutcome {
    pub log: Vec<GrpoStepLog>,
    pub epoch_rewards: Vec<f64>,
    pub epoch_losses: Vec<f64>,
    /// Zero-length completions seen during training.
    pub flagged_completions: usize,
}

impl GrpoOutcome {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record([
            "step",
            "epoch",
            "mean_reward",
            "mean_nontoxic",
            "mean_sim",
            "mean_kl",
            "loss",
            "grad_norm",
            "lr",
        ])?;
        for r in &self.log {
            w.write_record([
                r.step.to_string(),
                r.epoch.to_string(),
                format!("{:.6}", r.mean_reward),
                format!("{:.6}", r.mean_nontoxic),
                format!("{:.6}", r.mean_sim),
                format!("{:.6e}", r.mean_kl),
                format!("{:.6}", r.loss),
                format!("{:.6}", r.grad_norm),
                format!("{:.6e}", r.lr),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Samples a group from `net`, scores it and attaches reference log-probs.
pub fn sample_group(
    net: &Network,
    reference: &ReferencePolicy,
    source: &Sentence,
    models: RewardModels<'_>,
    config: &GrpoConfig,
    rng_seed: u64,
) -> Result<GroupSample> {
    let prompt = make_prompt(source);
    let records = net.sample(
        &prompt,
        config.k,
        Decoding::Sample {
            temperature: config.temperature,
        },
        config.max_new_tokens,
        rng_seed,
    )?;
    let mut ref_logprobs = Vec::with_capacity(records.len());
    let mut rewards = Vec::with_capacity(records.len());
    for rec in &records {
        ref_logprobs.push(reference.network().logprobs(&rec.prompt, &rec.completion)?);
        rewards.push(compute_reward(
            models.scorer,
            models.tox,
            source,
            rec.output(),
            config.lambda,
        ));
    }
    GroupSample::new(source.clone(), records, ref_logprobs, rewards)
}

/// Trains `adapter` on top of the reference backbone. `adapter` should start
/// equal to the reference adapter so that the first step has ratio 1.
pub fn grpo_train(
    reference: &ReferencePolicy,
    adapter: &mut AdapterParams,
    inputs: &[Sentence],
    models: RewardModels<'_>,
    config: &GrpoConfig,
) -> Result<GrpoOutcome> {
    config.validate()?;
    if inputs.is_empty() {
        return Err(Error::Invalid("grpo needs at least one input".into()));
    }
    let params = reference.params();
    let per_update = config.batch_size * config.grad_accum;
    let updates_per_epoch = inputs.len().div_ceil(per_update);
    let total = updates_per_epoch * config.epochs;
    let schedule = LrSchedule {
        peak: config.learning_rate,
        warmup_steps: (config.warmup_fraction * total as f64).round() as usize,
        total_steps: total,
    };
    // Decay toward the starting (reference) adapter, not toward the bare
    // backbone, so regularization never undoes the cold start.
    let mut adam = Adam::for_tensors(&adapter.tensors(), config.weight_decay).anchored_at(&adapter.tensors());
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    let mut shuffle_rng = rng::stream(config.seed, &[tag::GRPO_SHUFFLE]);
    let mut out = GrpoOutcome {
        log: Vec::with_capacity(total),
        epoch_rewards: Vec::with_capacity(config.epochs),
        epoch_losses: Vec::with_capacity(config.epochs),
        flagged_completions: 0,
    };
    let mut step = 0;
    for epoch in 1..=config.epochs {
        order.shuffle(&mut shuffle_rng);
        let (mut reward_sum, mut loss_sum, mut groups_seen) = (0.0, 0.0, 0usize);
        for chunk in order.chunks(per_update) {
            step += 1;
            let net = Network::new(params, Some(adapter))?;
            let mut merged = PolicyParams::zeros(params.dims);
            let scale = 1.0 / chunk.len() as f64;
            let mut stats = [0.0f64; 5];
            let mut responses = 0usize;
            for &i in chunk {
                let seed = rng::derive_seed(config.seed, &[tag::GRPO_SAMPLE, epoch as u64, i as u64]);
                let mut group = sample_group(&net, reference, &inputs[i], models, config, seed)?;
                let mut traces = Vec::with_capacity(group.k());
                for rec in &mut group.records {
                    let tr = net.trace(&rec.prompt, &rec.completion)?;
                    rec.logprobs = tr.logprobs().to_vec();
                    traces.push(tr);
                }
                let gl = grpo_loss(&group, config.beta_kl, config.epsilon_clip, config.kl_ratio);
                if !gl.loss.is_finite() {
                    return Err(Error::Divergence(format!(
                        "non-finite grpo loss at step {step} (epoch {epoch}); group:\n{}",
                        group.dump()
                    )));
                }
                out.flagged_completions += gl.flagged.len();
                for (tr, w) in traces.iter().zip(&gl.token_weights) {
                    if !w.is_empty() {
                        let w: Vec<f64> = w.iter().map(|x| x * scale).collect();
                        net.backward(tr, &w, &mut merged);
                    }
                }
                for r in &group.rewards {
                    stats[0] += r.total;
                    stats[1] += r.nontoxic;
                    stats[2] += r.sim;
                }
                responses += group.k();
                stats[3] += gl.mean_kl;
                stats[4] += gl.loss;
            }
            let mut grad = project_to_adapter(adapter, &merged);
            let grad_norm = clip_global_norm(&mut grad.tensors_mut(), config.max_grad_norm);
            let lr = schedule.lr(step);
            adam.step(&mut adapter.tensors_mut(), &grad.tensors(), lr);
            if !adapter.is_finite() {
                return Err(Error::Divergence(format!("adapter non-finite after step {step}")));
            }
            let g = chunk.len() as f64;
            let row = GrpoStepLog {
                step,
                epoch,
                mean_reward: stats[0] / responses as f64,
                mean_nontoxic: stats[1] / responses as f64,
                mean_sim: stats[2] / responses as f64,
                mean_kl: stats[3] / g,
                loss: stats[4] / g,
                grad_norm,
                lr,
            };
            reward_sum += stats[0] / config.k as f64;
            loss_sum += stats[4];
            groups_seen += chunk.len();
            out.log.push(row);
            if config.checkpoint_every > 0 && step % config.checkpoint_every == 0 {
                if let Some(dir) = &config.checkpoint_dir {
                    adapter.save(&dir.join(format!("adapter_step{step:05}.txt")))?;
                }
            }
        }
        out.epoch_rewards.push(reward_sum / groups_seen as f64);
        out.epoch_losses.push(loss_sum / groups_seen as f64);
    }
    Ok(out)
}
