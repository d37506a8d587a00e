//! Style accuracy, similarity, fluency and the joint score.
//!
//! STA and SIM come from the evaluation classifier and scorer, which are
//! never the ones used inside the reward. Empty outputs are refusals: they
//! count as failed detoxifications (STA 0, J 0) and are left out of the SIM
//! and FL averages.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;

use crate::corpus::{Grammar, PosTag, Sentence, SentenceSampler, ToxicLexicon, TokenId, Vocab};
use crate::error::{Error, Result};
use crate::policy::Network;
use crate::rng::{self, tag};
use crate::similarity::SimScorer;
use crate::toxicity::ToxicityModel;

/// Rule-based acceptability: the tag sequence matches a template, the length
/// is in range and no token repeats back to back.
pub fn fluency(grammar: &Grammar, vocab: &Vocab, s: &[TokenId]) -> u8 {
    if s.is_empty() || s.len() < grammar.min_len || s.len() > grammar.max_len {
        return 0;
    }
    if s.windows(2).any(|w| w[0] == w[1]) {
        return 0;
    }
    if s.iter().any(|&t| t as usize >= vocab.len()) {
        return 0;
    }
    let tags: Vec<PosTag> = s.iter().map(|&t| vocab.tag(t)).collect();
    u8::from(grammar.matches_template(&tags))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleScore {
    pub sta: u8,
    pub sim: f64,
    pub fl: u8,
    pub refused: bool,
}

impl SampleScore {
    /// The per-sample joint score, with negative similarity floored at 0.
    pub fn joint(&self) -> f64 {
        if self.refused {
            return 0.0;
        }
        f64::from(self.sta) * self.sim.max(0.0) * f64::from(self.fl)
    }
}

/// Aggregate metrics; `sta`, `sim`, `fl` and `j` are percentages.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub sta: f64,
    pub sim: f64,
    pub fl: f64,
    pub j: f64,
    pub n_total: usize,
    pub n_refusals: usize,
    pub per_sample: Vec<SampleScore>,
}

impl EvalReport {
    pub fn from_samples(per_sample: Vec<SampleScore>) -> Self {
        let n = per_sample.len();
        let answered: Vec<&SampleScore> = per_sample.iter().filter(|s| !s.refused).collect();
        let mean = |sum: f64, count: usize| if count == 0 { 0.0 } else { 100.0 * sum / count as f64 };
        let sta = mean(per_sample.iter().map(|s| f64::from(s.sta)).sum(), n);
        let sim = mean(answered.iter().map(|s| s.sim).sum(), answered.len());
        let fl = mean(answered.iter().map(|s| f64::from(s.fl)).sum(), answered.len());
        let j = mean(per_sample.iter().map(SampleScore::joint).sum(), n);
        EvalReport {
            sta,
            sim,
            fl,
            j,
            n_total: n,
            n_refusals: n - answered.len(),
            per_sample,
        }
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("metric,value\n");
        for (name, v) in [("STA", self.sta), ("SIM", self.sim), ("FL", self.fl), ("J", self.j)] {
            let _ = writeln!(out, "{name},{v:.2}");
        }
        let _ = writeln!(out, "n_total,{}", self.n_total);
        let _ = writeln!(out, "n_refusals,{}", self.n_refusals);
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv_string()).map_err(|e| Error::io(path, e))
    }

    pub fn write_per_sample_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["index", "sta", "sim", "fl", "refused"])?;
        for (i, s) in self.per_sample.iter().enumerate() {
            w.write_record([
                i.to_string(),
                s.sta.to_string(),
                format!("{:.6}", s.sim),
                s.fl.to_string(),
                u8::from(s.refused).to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Evaluation-side models.
#[derive(Clone, Copy, Debug)]
pub struct EvalModels<'a> {
    pub tox: &'a ToxicityModel,
    pub scorer: &'a SimScorer,
    pub grammar: &'a Grammar,
    pub vocab: &'a Vocab,
}

pub fn evaluate(outputs: &[(Sentence, Vec<TokenId>)], models: EvalModels<'_>) -> EvalReport {
    let per_sample = outputs
        .iter()
        .map(|(src, out)| {
            if out.is_empty() {
                return SampleScore {
                    sta: 0,
                    sim: 0.0,
                    fl: 0,
                    refused: true,
                };
            }
            SampleScore {
                sta: models.tox.sta(out),
                sim: models.scorer.sim(src, out),
                fl: fluency(models.grammar, models.vocab, out),
                refused: false,
            }
        })
        .collect();
    EvalReport::from_samples(per_sample)
}

/// Greedy rewrites of every source.
pub fn decode_all(
    net: &Network,
    sources: &[Sentence],
    max_len: usize,
) -> Result<Vec<(Sentence, Vec<TokenId>)>> {
    sources
        .iter()
        .map(|s| Ok((s.clone(), net.greedy_rewrite(s, max_len)?)))
        .collect()
}

/// A synthetic distribution shift: sources from held-out templates with
/// part of the toxic lexicon replaced by tokens never seen in training.
#[derive(Clone, Debug, PartialEq)]
pub struct ShiftConfig {
    /// Probability that a source uses a shift-only template.
    pub template_fraction: f64,
    /// Probability that a toxic slot uses a reserved token.
    pub novel_fraction: f64,
    pub num_sources: usize,
    pub seed: u64,
}

impl Default for ShiftConfig {
    fn default() -> Self {
        ShiftConfig {
            template_fraction: 1.0,
            novel_fraction: 0.5,
            num_sources: 500,
            seed: 0,
        }
    }
}

impl ShiftConfig {
    /// In-domain templates and lexicon.
    pub fn null(num_sources: usize, seed: u64) -> Self {
        ShiftConfig {
            template_fraction: 0.0,
            novel_fraction: 0.0,
            num_sources,
            seed,
        }
    }
}

pub fn shifted_sources(vocab: &Vocab, grammar: &Grammar, shift: &ShiftConfig) -> Vec<Sentence> {
    let sampler = SentenceSampler::new(vocab, grammar);
    let (in_domain, held_out) = (grammar.in_domain(), grammar.shift());
    (0..shift.num_sources)
        .map(|i| {
            let mut rng = rng::stream(shift.seed, &[tag::SHIFT, i as u64]);
            let use_shift = !held_out.is_empty() && rng.gen::<f64>() < shift.template_fraction;
            let t = if use_shift {
                rng.gen_range(held_out.clone())
            } else {
                rng.gen_range(in_domain.clone())
            };
            sampler.toxic(
                &mut rng,
                t,
                ToxicLexicon::Mixed {
                    novel_fraction: shift.novel_fraction,
                },
            )
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct OodReport {
    pub report: EvalReport,
    /// STA of the same outputs under the reward classifier, as a percentage.
    pub reward_sta: f64,
}

impl OodReport {
    /// Reward-classifier STA minus evaluation STA.
    pub fn sta_drift(&self) -> f64 {
        self.reward_sta - self.report.sta
    }
}

pub fn run_ood_eval(
    net: &Network,
    shift: &ShiftConfig,
    models: EvalModels<'_>,
    reward_tox: &ToxicityModel,
    max_len: usize,
) -> Result<OodReport> {
    let sources = shifted_sources(models.vocab, models.grammar, shift);
    let outputs = decode_all(net, &sources, max_len)?;
    let report = evaluate(&outputs, models);
    let reward_sta = if outputs.is_empty() {
        0.0
    } else {
        100.0 * outputs.iter().map(|(_, o)| f64::from(reward_tox.sta(o))).sum::<f64>()
            / outputs.len() as f64
    };
    Ok(OodReport { report, reward_sta })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_grammar, build_vocab, generate_corpus, CorpusConfig};

    fn s(sta: u8, sim: f64, fl: u8) -> SampleScore {
        SampleScore {
            sta,
            sim,
            fl,
            refused: false,
        }
    }

    #[test]
    fn two_sample_hand_case() {
        let r = EvalReport::from_samples(vec![s(1, 0.8, 1), s(0, 0.9, 1)]);
        assert!((r.j - 40.0).abs() < 1e-12);
        assert!(r.to_csv_string().contains("J,40.00\n"));
        assert_eq!(r.sta, 50.0);
        assert!((r.sim - 85.0).abs() < 1e-12);
    }

    #[test]
    fn refusals_are_failures() {
        let refusal = SampleScore {
            sta: 0,
            sim: 0.0,
            fl: 0,
            refused: true,
        };
        let r = EvalReport::from_samples(vec![s(1, 0.5, 1), refusal]);
        assert_eq!(r.n_refusals, 1);
        assert_eq!(r.sta, 50.0);
        assert_eq!(r.sim, 50.0);
        assert_eq!(r.fl, 100.0);
        assert_eq!(r.j, 25.0);
    }

    #[test]
    fn negative_similarity_is_floored_in_joint_only() {
        let r = EvalReport::from_samples(vec![s(1, -0.4, 1), s(1, 0.6, 1)]);
        assert!((r.sim - 10.0).abs() < 1e-12);
        assert!((r.j - 30.0).abs() < 1e-12);
    }

    #[test]
    fn csv_layout() {
        let r = EvalReport::from_samples(vec![s(1, 0.95984, 1)]);
        assert_eq!(
            r.to_csv_string(),
            "metric,value\nSTA,100.00\nSIM,95.98\nFL,100.00\nJ,95.98\nn_total,1\nn_refusals,0\n"
        );
    }

    #[test]
    fn fluency_rules() {
        let cfg = CorpusConfig {
            num_pairs: 200,
            ..Default::default()
        };
        let v = build_vocab(&cfg).unwrap();
        let g = build_grammar(&cfg).unwrap();
        for p in generate_corpus(&v, &g, &cfg).unwrap() {
            assert_eq!(fluency(&g, &v, &p.reference), 1);
            assert_eq!(fluency(&g, &v, &p.toxic), 1);
            let mut rep = p.reference.ids().to_vec();
            rep[1] = rep[0];
            assert_eq!(fluency(&g, &v, &rep), 0);
        }
        assert_eq!(fluency(&g, &v, &[]), 0);
    }

    #[test]
    fn token_soup_is_rarely_fluent() {
        let cfg = CorpusConfig::default();
        let v = build_vocab(&cfg).unwrap();
        let g = build_grammar(&cfg).unwrap();
        let mut accepted = 0;
        for seed in 0..100u64 {
            let mut r = rng::stream(seed, &[99]);
            let len = r.gen_range(cfg.min_len..=cfg.max_len);
            let soup: Vec<TokenId> = (0..len).map(|_| r.gen_range(3..v.len() as TokenId)).collect();
            accepted += fluency(&g, &v, &soup) as usize;
        }
        assert!(accepted < 20, "{accepted}");
    }

    #[test]
    fn shift_sources_use_held_out_templates() {
        let cfg = CorpusConfig::default();
        let v = build_vocab(&cfg).unwrap();
        let g = build_grammar(&cfg).unwrap();
        let shifted = shifted_sources(&v, &g, &ShiftConfig::default());
        let mut novel = 0;
        for src in &shifted {
            let tags: Vec<PosTag> = src.iter().map(|&t| v.tag(t)).collect();
            assert!(g.shift().any(|t| g.templates[t].tags == tags));
            novel += src.iter().filter(|&&t| v.is_reserved(t)).count();
        }
        assert!(novel > 0);
        let null = shifted_sources(&v, &g, &ShiftConfig::null(200, 0));
        for src in &null {
            assert!(src.iter().all(|&t| !v.is_reserved(t)));
        }
    }
}
