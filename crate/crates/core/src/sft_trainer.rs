//! Supervised training: backbone pretraining on the copy task and the
//! similarity-filtered cold start through low-rank adapters.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::corpus::{ParallelPair, PosTag, Sentence, TokenId, Vocab, EOS};
use crate::error::{Error, Result};
use crate::optim::{clip_global_norm, Adam, LrSchedule};
use crate::policy::{make_prompt, project_to_adapter, AdapterParams, Network, PolicyParams};
use crate::rng::{self, tag};
use crate::similarity::{filter_pairs, SimScorer};

#[derive(Clone, Debug, PartialEq)]
pub struct SftConfig {
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub grad_accum: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub data_fraction: f64,
    pub alpha: f64,
}

impl Default for SftConfig {
    fn default() -> Self {
        SftConfig {
            learning_rate: 5e-3,
            warmup_steps: 20,
            grad_accum: 8,
            epochs: 3,
            batch_size: 1,
            seed: 0,
            data_fraction: 0.20,
            alpha: 0.5,
        }
    }
}

impl SftConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("sft learning_rate must be > 0".into()));
        }
        if !(self.data_fraction > 0.0 && self.data_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "sft data_fraction must lie in (0, 1], got {}",
                self.data_fraction
            )));
        }
        if self.grad_accum == 0 || self.batch_size == 0 {
            return Err(Error::Config("sft grad_accum and batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Backbone pretraining: full-parameter copy task `BOS s SEP -> s EOS`.
#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub num_sentences: usize,
    pub max_grad_norm: f64,
    /// Probability that a target sentence carries one unscored swap.
    pub perturb_prob: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            learning_rate: 1e-2,
            warmup_steps: 50,
            batch_size: 16,
            epochs: 12,
            num_sentences: 30000,
            max_grad_norm: 5.0,
            perturb_prob: 0.5,
            seed: 0,
        }
    }
}

/// Uniform sample of `floor(fraction * N)` pairs without replacement,
/// then the similarity filter.
pub fn prepare_sft_data(
    train_pairs: &[ParallelPair],
    fraction: f64,
    scorer: &SimScorer,
    alpha: f64,
    seed: u64,
) -> Result<Vec<ParallelPair>> {
    let sampled = sample_fraction(train_pairs, fraction, seed)?;
    let filtered = filter_pairs(scorer, &sampled, alpha);
    if filtered.is_empty() {
        return Err(Error::Invalid(format!(
            "no pairs left after filtering {} samples at alpha={alpha}; lower alpha",
            sampled.len()
        )));
    }
    Ok(filtered)
}

/// The sampling half of [`prepare_sft_data`], without filtering.
pub fn sample_fraction(
    train_pairs: &[ParallelPair],
    fraction: f64,
    seed: u64,
) -> Result<Vec<ParallelPair>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Invalid(format!("fraction must lie in (0, 1], got {fraction}")));
    }
    let n = (fraction * train_pairs.len() as f64).floor() as usize;
    let mut idx: Vec<usize> = (0..train_pairs.len()).collect();
    idx.shuffle(&mut rng::stream(seed, &[tag::SFT_SUBSET]));
    let mut chosen: Vec<usize> = idx[..n].to_vec();
    chosen.sort_unstable();
    Ok(chosen.into_iter().map(|i| train_pairs[i].clone()).collect())
}

pub fn sft_example(pair: &ParallelPair) -> (Vec<TokenId>, Vec<TokenId>) {
    let mut completion = pair.reference.ids().to_vec();
    completion.push(EOS);
    (make_prompt(&pair.toxic), completion)
}

/// Mean next-token cross-entropy over the reference tokens (and EOS), with
/// its gradient with respect to the adapter.
pub fn cross_entropy_loss(
    params: &PolicyParams,
    adapter: &AdapterParams,
    pair: &ParallelPair,
) -> Result<(f64, AdapterParams)> {
    let net = Network::new(params, Some(adapter))?;
    let (prompt, completion) = sft_example(pair);
    let tr = net.trace(&prompt, &completion)?;
    let len = completion.len() as f64;
    let loss = -tr.logprobs().iter().sum::<f64>() / len;
    let weights = vec![-1.0 / len; completion.len()];
    let mut merged = PolicyParams::zeros(params.dims);
    net.backward(&tr, &weights, &mut merged);
    Ok((loss, project_to_adapter(adapter, &merged)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SftStepLog {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SftOutcome {
    pub log: Vec<SftStepLog>,
    /// Mean per-sequence loss over each epoch.
    pub epoch_losses: Vec<f64>,
}

impl SftOutcome {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["step", "epoch", "lr", "loss"])?;
        for r in &self.log {
            w.write_record([
                r.step.to_string(),
                r.epoch.to_string(),
                format!("{:.6e}", r.lr),
                format!("{:.6}", r.loss),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

struct CeSettings {
    schedule_peak: f64,
    warmup_steps: usize,
    batch_size: usize,
    grad_accum: usize,
    epochs: usize,
    max_grad_norm: Option<f64>,
    seed: u64,
}

/// Which weights a cross-entropy run updates.
enum CeTarget<'a> {
    Base(&'a mut PolicyParams),
    Adapter(&'a PolicyParams, &'a mut AdapterParams),
}

/// A teacher-forced sequence; positions with `false` in `scored` are fed as
/// inputs but excluded from the loss.
struct CeExample {
    prompt: Vec<TokenId>,
    completion: Vec<TokenId>,
    scored: Vec<bool>,
}

impl CeExample {
    fn plain((prompt, completion): (Vec<TokenId>, Vec<TokenId>)) -> Self {
        let scored = vec![true; completion.len()];
        CeExample {
            prompt,
            completion,
            scored,
        }
    }
}

fn ce_train(
    mut target: CeTarget<'_>,
    examples: &[CeExample],
    s: &CeSettings,
) -> Result<SftOutcome> {
    let mut log = Vec::new();
    let mut epoch_losses = Vec::new();
    if examples.is_empty() {
        return Err(Error::Invalid("no training examples".into()));
    }
    if s.epochs == 0 {
        return Ok(SftOutcome { log, epoch_losses });
    }
    let micro = examples.len().div_ceil(s.batch_size);
    let updates_per_epoch = micro.div_ceil(s.grad_accum);
    let schedule = LrSchedule {
        peak: s.schedule_peak,
        warmup_steps: s.warmup_steps,
        total_steps: updates_per_epoch * s.epochs,
    };
    let mut adam = match &target {
        CeTarget::Base(p) => Adam::for_tensors(&p.tensors(), 0.0),
        CeTarget::Adapter(_, a) => Adam::for_tensors(&a.tensors(), 0.0),
    };
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut shuffle_rng = rng::stream(s.seed, &[tag::SFT_SHUFFLE]);
    let mut step = 0;
    for epoch in 1..=s.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_total = 0.0;
        for update in order.chunks(s.batch_size * s.grad_accum) {
            let net = match &target {
                CeTarget::Base(p) => Network::new(p, None)?,
                CeTarget::Adapter(p, a) => Network::new(p, Some(a))?,
            };
            let dims = net.dims();
            let mut merged = PolicyParams::zeros(dims);
            let mut loss_sum = 0.0;
            let scale = 1.0 / update.len() as f64;
            for &i in update {
                let ex = &examples[i];
                let tr = net.trace(&ex.prompt, &ex.completion)?;
                let len = ex.scored.iter().filter(|&&m| m).count().max(1) as f64;
                let loss = -tr
                    .logprobs()
                    .iter()
                    .zip(&ex.scored)
                    .filter(|(_, &m)| m)
                    .map(|(lp, _)| lp)
                    .sum::<f64>()
                    / len;
                if !loss.is_finite() {
                    return Err(Error::Divergence(format!(
                        "non-finite cross-entropy at step {} (epoch {epoch})",
                        step + 1
                    )));
                }
                loss_sum += loss;
                let weights: Vec<f64> = ex
                    .scored
                    .iter()
                    .map(|&m| if m { -scale / len } else { 0.0 })
                    .collect();
                net.backward(&tr, &weights, &mut merged);
            }
            step += 1;
            let lr = schedule.lr(step);
            match &mut target {
                CeTarget::Base(p) => {
                    if let Some(max) = s.max_grad_norm {
                        clip_global_norm(&mut merged.tensors_mut(), max);
                    }
                    adam.step(&mut p.tensors_mut(), &merged.tensors(), lr);
                    if !p.is_finite() {
                        return Err(Error::Divergence(format!("base weights non-finite at step {step}")));
                    }
                }
                CeTarget::Adapter(_, a) => {
                    let mut g = project_to_adapter(a, &merged);
                    if let Some(max) = s.max_grad_norm {
                        clip_global_norm(&mut g.tensors_mut(), max);
                    }
                    adam.step(&mut a.tensors_mut(), &g.tensors(), lr);
                    if !a.is_finite() {
                        return Err(Error::Divergence(format!("adapter non-finite at step {step}")));
                    }
                }
            }
            epoch_total += loss_sum;
            log.push(SftStepLog {
                step,
                epoch,
                lr,
                loss: loss_sum / update.len() as f64,
            });
        }
        epoch_losses.push(epoch_total / examples.len() as f64);
    }
    Ok(SftOutcome { log, epoch_losses })
}

/// Cold-start fine-tuning of `adapter` on `data` with Adam, gradient
/// accumulation and a warmup-cosine schedule.
pub fn sft_train(
    params: &PolicyParams,
    adapter: &mut AdapterParams,
    data: &[ParallelPair],
    config: &SftConfig,
) -> Result<SftOutcome> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::Invalid("sft data is empty".into()));
    }
    let examples: Vec<_> = data.iter().map(|p| CeExample::plain(sft_example(p))).collect();
    ce_train(
        CeTarget::Adapter(params, adapter),
        &examples,
        &CeSettings {
            schedule_peak: config.learning_rate,
            warmup_steps: config.warmup_steps,
            batch_size: config.batch_size,
            grad_accum: config.grad_accum,
            epochs: config.epochs,
            max_grad_norm: None,
            seed: config.seed,
        },
    )
}

/// Full-parameter pretraining of the backbone on the copy task. This gives
/// the policy the generic "reproduce the input" competence a pretrained
/// language model brings, without any toxic→neutral supervision.
///
/// With probability `perturb_prob` a sentence's target has one position
/// swapped for a random token of the same tag. That position is fed to the
/// model but not scored, so the model learns to keep copying after its
/// output departs from the source.
pub fn pretrain_base(
    params: &mut PolicyParams,
    vocab: &Vocab,
    sentences: &[Sentence],
    config: &PretrainConfig,
) -> Result<SftOutcome> {
    let mut rng = rng::stream(config.seed, &[tag::PRETRAIN, 1]);
    let by_tag: Vec<(PosTag, Vec<TokenId>)> = PosTag::CONTENT
        .iter()
        .chain(std::iter::once(&PosTag::Func))
        .map(|&t| (t, vocab.tokens_with_tag(t)))
        .collect();
    let examples: Vec<_> = sentences
        .iter()
        .map(|s| {
            let mut completion = s.ids().to_vec();
            let mut scored = vec![true; completion.len() + 1];
            if rng.gen::<f64>() < config.perturb_prob {
                let i = rng.gen_range(0..completion.len());
                let tag = vocab.tag(completion[i]);
                if let Some((_, pool)) = by_tag.iter().find(|(t, _)| *t == tag) {
                    if let Some(&alt) = pool.choose(&mut rng) {
                        completion[i] = alt;
                        scored[i] = false;
                    }
                }
            }
            completion.push(EOS);
            CeExample {
                prompt: make_prompt(s),
                completion,
                scored,
            }
        })
        .collect();
    ce_train(
        CeTarget::Base(params),
        &examples,
        &CeSettings {
            schedule_peak: config.learning_rate,
            warmup_steps: config.warmup_steps,
            batch_size: config.batch_size,
            grad_accum: 1,
            epochs: config.epochs,
            max_grad_norm: Some(config.max_grad_norm),
            seed: rng::derive_seed(config.seed, &[tag::PRETRAIN]),
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_grammar, build_vocab, generate_corpus, CorpusConfig, BOS, SEP};
    use crate::policy::{init_params, PolicyDims, ADAPTER_NAMES};

    fn corpus(n: usize) -> Vec<ParallelPair> {
        let cfg = CorpusConfig {
            num_pairs: n,
            ..Default::default()
        };
        let v = build_vocab(&cfg).unwrap();
        let g = build_grammar(&cfg).unwrap();
        generate_corpus(&v, &g, &cfg).unwrap()
    }

    #[test]
    fn full_fraction_without_filter_is_identity() {
        let pairs = corpus(200);
        let s = SimScorer::uniform(64, 1, 120).unwrap();
        let out = prepare_sft_data(&pairs, 1.0, &s, -1.0, 3).unwrap();
        assert_eq!(out, pairs);
    }

    #[test]
    fn sampling_precedes_filtering() {
        let pairs = corpus(5000);
        let s = SimScorer::uniform(64, 1, 120).unwrap();
        let out = prepare_sft_data(&pairs, 0.2, &s, 0.5, 3).unwrap();
        assert!(out.len() <= 1000);
        assert!(out.len() > 700);
        assert!(out.iter().all(|p| s.sim(&p.toxic, &p.reference) >= 0.5));
        assert_eq!(out, prepare_sft_data(&pairs, 0.2, &s, 0.5, 3).unwrap());
    }

    #[test]
    fn impossible_filter_is_an_error() {
        let pairs = corpus(50);
        let s = SimScorer::uniform(64, 1, 120).unwrap();
        assert!(prepare_sft_data(&pairs, 0.5, &s, 1.5, 3).is_err());
        assert!(prepare_sft_data(&pairs, 0.0, &s, 0.5, 3).is_err());
    }

    fn tiny_pair() -> ParallelPair {
        ParallelPair {
            toxic: Sentence::new(vec![4, 5, 6]),
            reference: Sentence::new(vec![4, 7, 6]),
            is_drift: false,
            template: 0,
        }
    }

    #[test]
    fn uniform_model_loss_is_log_vocab() {
        let dims = PolicyDims {
            vocab: 12,
            embed: 8,
            hidden: 12,
        };
        let p = PolicyParams::zeros(dims);
        let a = AdapterParams::new(dims, 2, 4.0, 1).unwrap();
        let (loss, _) = cross_entropy_loss(&p, &a, &tiny_pair()).unwrap();
        assert!((loss - 12f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_model_has_near_zero_loss() {
        // Bias the output towards each target in turn by making the next
        // token a deterministic function of the current input token.
        let dims = PolicyDims {
            vocab: 12,
            embed: 12,
            hidden: 12,
        };
        let mut p = PolicyParams::zeros(dims);
        // Hidden state copies the one-hot input embedding (z = 1, c = x).
        p.bz.fill(60.0);
        for i in 0..12 {
            p.embedding.data[i * 12 + i] = 1.0;
            p.wc_x.data[i * 12 + i] = 60.0;
        }
        // Transition table: SEP->4, 4->7, 7->6, 6->EOS.
        for (from, to) in [(SEP, 4), (4, 7), (7, 6), (6, EOS)] {
            p.w_out.data[to as usize * 12 + from as usize] = 60.0;
        }
        let a = AdapterParams::new(dims, 2, 4.0, 1).unwrap();
        let (loss, _) = cross_entropy_loss(&p, &a, &tiny_pair()).unwrap();
        assert!(loss < 1e-12, "{loss}");
        let _ = BOS;
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let dims = PolicyDims {
            vocab: 12,
            embed: 8,
            hidden: 12,
        };
        let p = init_params(4, dims).unwrap();
        let mut a = AdapterParams::new(dims, 3, 6.0, 2).unwrap();
        let mut r = rng::stream(5, &[0]);
        a.out_b = crate::policy::Matrix::uniform(12, 3, 0.2, &mut r);
        a.cand_b = crate::policy::Matrix::uniform(12, 3, 0.2, &mut r);
        let pair = ParallelPair {
            toxic: Sentence::new(vec![4, 5, 6, 8]),
            reference: Sentence::new(vec![4, 7, 6, 9]),
            is_drift: false,
            template: 0,
        };
        let (_, g) = cross_entropy_loss(&p, &a, &pair).unwrap();
        let h = 1e-4;
        let mut q = a.clone();
        let mut worst: f64 = 0.0;
        for ti in 0..ADAPTER_NAMES.len() {
            for k in 0..q.tensors()[ti].data.len() {
                let orig = q.tensors()[ti].data[k];
                q.tensors_mut()[ti].data[k] = orig + h;
                let fp = cross_entropy_loss(&p, &q, &pair).unwrap().0;
                q.tensors_mut()[ti].data[k] = orig - h;
                let fm = cross_entropy_loss(&p, &q, &pair).unwrap().0;
                q.tensors_mut()[ti].data[k] = orig;
                let num = (fp - fm) / (2.0 * h);
                let an = g.tensors()[ti].data[k];
                worst = worst.max((an - num).abs() / an.abs().max(num.abs()).max(1e-6));
            }
        }
        assert!(worst < 1e-4, "{worst}");
    }

    #[test]
    fn zero_epochs_leaves_adapter_unchanged() {
        let dims = PolicyDims {
            vocab: 120,
            embed: 8,
            hidden: 12,
        };
        let p = init_params(4, dims).unwrap();
        let mut a = AdapterParams::new(dims, 2, 4.0, 1).unwrap();
        let before = a.clone();
        let cfg = SftConfig {
            epochs: 0,
            ..Default::default()
        };
        let out = sft_train(&p, &mut a, &corpus(20), &cfg).unwrap();
        assert_eq!(a, before);
        assert!(out.log.is_empty());
    }

    #[test]
    fn short_sft_run_reduces_loss_and_is_reproducible() {
        let dims = PolicyDims {
            vocab: 120,
            embed: 16,
            hidden: 24,
        };
        let p = init_params(4, dims).unwrap();
        let data = corpus(64);
        let cfg = SftConfig {
            epochs: 4,
            warmup_steps: 2,
            learning_rate: 2e-2,
            ..Default::default()
        };
        let mut a1 = AdapterParams::new(dims, 4, 8.0, 1).unwrap();
        let out = sft_train(&p, &mut a1, &data, &cfg).unwrap();
        assert_eq!(out.epoch_losses.len(), 4);
        assert!(out.epoch_losses[3] < out.epoch_losses[0], "{:?}", out.epoch_losses);
        assert_eq!(out.log.len(), 4 * 8);
        let mut a2 = AdapterParams::new(dims, 4, 8.0, 1).unwrap();
        sft_train(&p, &mut a2, &data, &cfg).unwrap();
        assert_eq!(a1, a2);
    }
}
