//! Config file, staged pipeline, parameter sweeps and curve export.
//!
//! A run goes: corpus → classifiers and scorers → backbone → data selection
//! → supervised cold start → GRPO → evaluation. Each run writes into its own
//! directory named by the config hash; a manifest records the hash, the seed
//! and the status of every stage.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use sha2::{Digest, Sha256};

use crate::corpus::{
    build_grammar, build_vocab, generate_corpus, generate_labeled, save_corpus, split,
    CorpusConfig, Grammar, ParallelPair, Sentence, SplitFractions, Splits, ToxicLexicon, Vocab,
};
use crate::error::{Error, Result};
use crate::eval::{decode_all, evaluate, run_ood_eval, EvalModels, EvalReport, OodReport, ShiftConfig};
use crate::grpo_trainer::{grpo_train, GrpoConfig, GrpoOutcome, KlRatio, RewardModels};
use crate::policy::{init_params, snapshot, AdapterParams, Network, PolicyDims, PolicyParams};
use crate::rng::{self, tag};
use crate::sft_trainer::{
    prepare_sft_data, pretrain_base, sample_fraction, sft_train, PretrainConfig, SftConfig,
    SftOutcome,
};
use crate::similarity::SimScorer;
use crate::toxicity::{train_classifier, Label, ToxConfig, ToxicityModel};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct StageToggles {
    pub skip_data_select: bool,
    pub skip_sft: bool,
    pub skip_grpo: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub stages: StageToggles,
    /// Language and corpus shape. `corpus.seed` fixes the vocabulary and
    /// grammar; the run seed drives pair sampling.
    pub corpus: CorpusConfig,
    pub split: SplitFractions,
    pub sim_dimension: usize,
    pub tox: ToxConfig,
    /// Size of the independent labeled pool behind the evaluation classifier.
    pub eval_pool_size: usize,
    pub embed: usize,
    pub hidden: usize,
    pub adapter_rank: usize,
    pub adapter_alpha: f64,
    pub pretrain: PretrainConfig,
    pub sft: SftConfig,
    pub grpo: GrpoConfig,
    /// Toxic training sources used by GRPO; 0 means all.
    pub grpo_inputs: usize,
    pub eval_max_len: usize,
    /// Test sources evaluated; 0 means the whole test split.
    pub eval_num_test: usize,
    pub shift: ShiftConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 1,
            out_dir: PathBuf::from("runs"),
            stages: StageToggles::default(),
            corpus: CorpusConfig::default(),
            split: SplitFractions::default(),
            sim_dimension: 64,
            tox: ToxConfig::default(),
            eval_pool_size: 4000,
            embed: 32,
            hidden: 64,
            adapter_rank: 16,
            adapter_alpha: 32.0,
            pretrain: PretrainConfig::default(),
            sft: SftConfig::default(),
            grpo: GrpoConfig::default(),
            grpo_inputs: 400,
            eval_max_len: 16,
            eval_num_test: 0,
            shift: ShiftConfig::default(),
        }
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value '{value}' for {key}")))
}

impl PipelineConfig {
    /// Every key with its canonical value, in file order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let c = &self.corpus;
        let p = &self.pretrain;
        let s = &self.sft;
        let g = &self.grpo;
        vec![
            ("run.seed", self.seed.to_string()),
            ("run.out_dir", self.out_dir.display().to_string()),
            ("stages.skip_data_select", self.stages.skip_data_select.to_string()),
            ("stages.skip_sft", self.stages.skip_sft.to_string()),
            ("stages.skip_grpo", self.stages.skip_grpo.to_string()),
            ("corpus.seed", c.seed.to_string()),
            ("corpus.vocab_size", c.vocab_size.to_string()),
            ("corpus.num_templates", c.num_templates.to_string()),
            ("corpus.num_shift_templates", c.num_shift_templates.to_string()),
            ("corpus.num_pairs", c.num_pairs.to_string()),
            ("corpus.drift_rate", c.drift_rate.to_string()),
            ("corpus.min_len", c.min_len.to_string()),
            ("corpus.max_len", c.max_len.to_string()),
            ("corpus.train_fraction", self.split.train.to_string()),
            ("corpus.val_fraction", self.split.val.to_string()),
            ("corpus.test_fraction", self.split.test.to_string()),
            ("similarity.dimension", self.sim_dimension.to_string()),
            ("toxicity.lr", self.tox.lr.to_string()),
            ("toxicity.epochs", self.tox.epochs.to_string()),
            ("toxicity.l2", self.tox.l2.to_string()),
            ("toxicity.batch_size", self.tox.batch_size.to_string()),
            ("toxicity.eval_pool_size", self.eval_pool_size.to_string()),
            ("policy.embed", self.embed.to_string()),
            ("policy.hidden", self.hidden.to_string()),
            ("policy.adapter_rank", self.adapter_rank.to_string()),
            ("policy.adapter_alpha", self.adapter_alpha.to_string()),
            ("pretrain.learning_rate", p.learning_rate.to_string()),
            ("pretrain.warmup_steps", p.warmup_steps.to_string()),
            ("pretrain.batch_size", p.batch_size.to_string()),
            ("pretrain.epochs", p.epochs.to_string()),
            ("pretrain.num_sentences", p.num_sentences.to_string()),
            ("pretrain.max_grad_norm", p.max_grad_norm.to_string()),
            ("pretrain.perturb_prob", p.perturb_prob.to_string()),
            ("pretrain.seed", p.seed.to_string()),
            ("sft.learning_rate", s.learning_rate.to_string()),
            ("sft.warmup_steps", s.warmup_steps.to_string()),
            ("sft.grad_accum", s.grad_accum.to_string()),
            ("sft.epochs", s.epochs.to_string()),
            ("sft.batch_size", s.batch_size.to_string()),
            ("sft.data_fraction", s.data_fraction.to_string()),
            ("sft.alpha", s.alpha.to_string()),
            ("grpo.k", g.k.to_string()),
            ("grpo.temperature", g.temperature.to_string()),
            ("grpo.learning_rate", g.learning_rate.to_string()),
            ("grpo.warmup_fraction", g.warmup_fraction.to_string()),
            ("grpo.weight_decay", g.weight_decay.to_string()),
            ("grpo.batch_size", g.batch_size.to_string()),
            ("grpo.grad_accum", g.grad_accum.to_string()),
            ("grpo.max_grad_norm", g.max_grad_norm.to_string()),
            ("grpo.epochs", g.epochs.to_string()),
            ("grpo.epsilon_clip", g.epsilon_clip.to_string()),
            ("grpo.beta_kl", g.beta_kl.to_string()),
            ("grpo.lambda", g.lambda.to_string()),
            ("grpo.kl_ratio", g.kl_ratio.as_str().to_string()),
            ("grpo.max_new_tokens", g.max_new_tokens.to_string()),
            ("grpo.checkpoint_every", g.checkpoint_every.to_string()),
            ("grpo.num_inputs", self.grpo_inputs.to_string()),
            ("eval.max_len", self.eval_max_len.to_string()),
            ("eval.num_test", self.eval_num_test.to_string()),
            ("eval.shift_template_fraction", self.shift.template_fraction.to_string()),
            ("eval.shift_novel_fraction", self.shift.novel_fraction.to_string()),
            ("eval.shift_num_sources", self.shift.num_sources.to_string()),
        ]
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value;
        match key {
            "run.seed" => self.seed = parse_value(key, v)?,
            "run.out_dir" => self.out_dir = PathBuf::from(v),
            "stages.skip_data_select" => self.stages.skip_data_select = parse_value(key, v)?,
            "stages.skip_sft" => self.stages.skip_sft = parse_value(key, v)?,
            "stages.skip_grpo" => self.stages.skip_grpo = parse_value(key, v)?,
            "corpus.seed" => self.corpus.seed = parse_value(key, v)?,
            "corpus.vocab_size" => self.corpus.vocab_size = parse_value(key, v)?,
            "corpus.num_templates" => self.corpus.num_templates = parse_value(key, v)?,
            "corpus.num_shift_templates" => self.corpus.num_shift_templates = parse_value(key, v)?,
            "corpus.num_pairs" => self.corpus.num_pairs = parse_value(key, v)?,
            "corpus.drift_rate" => self.corpus.drift_rate = parse_value(key, v)?,
            "corpus.min_len" => self.corpus.min_len = parse_value(key, v)?,
            "corpus.max_len" => self.corpus.max_len = parse_value(key, v)?,
            "corpus.train_fraction" => self.split.train = parse_value(key, v)?,
            "corpus.val_fraction" => self.split.val = parse_value(key, v)?,
            "corpus.test_fraction" => self.split.test = parse_value(key, v)?,
            "similarity.dimension" => self.sim_dimension = parse_value(key, v)?,
            "toxicity.lr" => self.tox.lr = parse_value(key, v)?,
            "toxicity.epochs" => self.tox.epochs = parse_value(key, v)?,
            "toxicity.l2" => self.tox.l2 = parse_value(key, v)?,
            "toxicity.batch_size" => self.tox.batch_size = parse_value(key, v)?,
            "toxicity.eval_pool_size" => self.eval_pool_size = parse_value(key, v)?,
            "policy.embed" => self.embed = parse_value(key, v)?,
            "policy.hidden" => self.hidden = parse_value(key, v)?,
            "policy.adapter_rank" => self.adapter_rank = parse_value(key, v)?,
            "policy.adapter_alpha" => self.adapter_alpha = parse_value(key, v)?,
            "pretrain.learning_rate" => self.pretrain.learning_rate = parse_value(key, v)?,
            "pretrain.warmup_steps" => self.pretrain.warmup_steps = parse_value(key, v)?,
            "pretrain.batch_size" => self.pretrain.batch_size = parse_value(key, v)?,
            "pretrain.epochs" => self.pretrain.epochs = parse_value(key, v)?,
            "pretrain.num_sentences" => self.pretrain.num_sentences = parse_value(key, v)?,
            "pretrain.max_grad_norm" => self.pretrain.max_grad_norm = parse_value(key, v)?,
            "pretrain.perturb_prob" => self.pretrain.perturb_prob = parse_value(key, v)?,
            "pretrain.seed" => self.pretrain.seed = parse_value(key, v)?,
            "sft.learning_rate" => self.sft.learning_rate = parse_value(key, v)?,
            "sft.warmup_steps" => self.sft.warmup_steps = parse_value(key, v)?,
            "sft.grad_accum" => self.sft.grad_accum = parse_value(key, v)?,
            "sft.epochs" => self.sft.epochs = parse_value(key, v)?,
            "sft.batch_size" => self.sft.batch_size = parse_value(key, v)?,
            "sft.data_fraction" => self.sft.data_fraction = parse_value(key, v)?,
            "sft.alpha" => self.sft.alpha = parse_value(key, v)?,
            "grpo.k" => self.grpo.k = parse_value(key, v)?,
            "grpo.temperature" => self.grpo.temperature = parse_value(key, v)?,
            "grpo.learning_rate" => self.grpo.learning_rate = parse_value(key, v)?,
            "grpo.warmup_fraction" => self.grpo.warmup_fraction = parse_value(key, v)?,
            "grpo.weight_decay" => self.grpo.weight_decay = parse_value(key, v)?,
            "grpo.batch_size" => self.grpo.batch_size = parse_value(key, v)?,
            "grpo.grad_accum" => self.grpo.grad_accum = parse_value(key, v)?,
            "grpo.max_grad_norm" => self.grpo.max_grad_norm = parse_value(key, v)?,
            "grpo.epochs" => self.grpo.epochs = parse_value(key, v)?,
            "grpo.epsilon_clip" => self.grpo.epsilon_clip = parse_value(key, v)?,
            "grpo.beta_kl" => self.grpo.beta_kl = parse_value(key, v)?,
            "grpo.lambda" => self.grpo.lambda = parse_value(key, v)?,
            "grpo.kl_ratio" => {
                self.grpo.kl_ratio = KlRatio::parse(v)
                    .ok_or_else(|| Error::Config(format!("unknown grpo.kl_ratio '{v}'")))?
            }
            "grpo.max_new_tokens" => self.grpo.max_new_tokens = parse_value(key, v)?,
            "grpo.checkpoint_every" => self.grpo.checkpoint_every = parse_value(key, v)?,
            "grpo.num_inputs" => self.grpo_inputs = parse_value(key, v)?,
            "eval.max_len" => self.eval_max_len = parse_value(key, v)?,
            "eval.num_test" => self.eval_num_test = parse_value(key, v)?,
            "eval.shift_template_fraction" => self.shift.template_fraction = parse_value(key, v)?,
            "eval.shift_novel_fraction" => self.shift.novel_fraction = parse_value(key, v)?,
            "eval.shift_num_sources" => self.shift.num_sources = parse_value(key, v)?,
            _ => return Err(Error::Config(format!("unknown config key '{key}'"))),
        }
        Ok(())
    }

    /// Parses `section.key = value` lines over the defaults. Blank lines and
    /// `#` comments are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = PipelineConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected 'section.key = value'", i + 1))
            })?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.sft.validate()?;
        self.grpo.validate()?;
        let s = self.split;
        if s.train <= 0.0 || s.val <= 0.0 || s.test <= 0.0 || s.train + s.val + s.test > 1.0 + 1e-12 {
            return Err(Error::Config("split fractions must be positive and sum to <= 1".into()));
        }
        if self.sim_dimension < 8 {
            return Err(Error::Config("similarity.dimension must be >= 8".into()));
        }
        if self.adapter_rank == 0 {
            return Err(Error::Config("policy.adapter_rank must be >= 1".into()));
        }
        if self.eval_pool_size < 2 || self.pretrain.num_sentences == 0 {
            return Err(Error::Config(
                "toxicity.eval_pool_size must be >= 2 and pretrain.num_sentences >= 1".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.shift.template_fraction)
            || !(0.0..=1.0).contains(&self.shift.novel_fraction)
        {
            return Err(Error::Config("shift fractions must lie in [0, 1]".into()));
        }
        self.dims().validate()
    }

    /// Hash of everything except the output directory.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.entries() {
            if k != "run.out_dir" {
                h.update(format!("{k}={v}\n").as_bytes());
            }
        }
        h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn run_dir(&self) -> PathBuf {
        self.out_dir.join(format!("run-{}", self.hash()))
    }

    pub fn dims(&self) -> PolicyDims {
        PolicyDims {
            vocab: self.corpus.vocab_size,
            embed: self.embed,
            hidden: self.hidden,
        }
    }

    fn sft_config(&self) -> SftConfig {
        SftConfig {
            seed: self.seed,
            ..self.sft.clone()
        }
    }

    fn grpo_config(&self, checkpoint_dir: Option<PathBuf>) -> GrpoConfig {
        GrpoConfig {
            seed: self.seed,
            checkpoint_dir,
            ..self.grpo.clone()
        }
    }

    /// Hash of the settings that determine the pretrained backbone.
    pub fn backbone_hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.entries() {
            let language = k.starts_with("corpus.")
                && !k.ends_with("num_pairs")
                && !k.ends_with("drift_rate")
                && !k.ends_with("_fraction");
            if language || k.starts_with("pretrain.") || k == "policy.embed" || k == "policy.hidden" {
                h.update(format!("{k}={v}\n").as_bytes());
            }
        }
        h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

/// Vocabulary and grammar.
pub struct Language {
    pub vocab: Vocab,
    pub grammar: Grammar,
}

pub fn language(cfg: &PipelineConfig) -> Result<Language> {
    Ok(Language {
        vocab: build_vocab(&cfg.corpus)?,
        grammar: build_grammar(&cfg.corpus)?,
    })
}

/// Pairs for this run, split into train/val/test.
pub fn build_corpus(cfg: &PipelineConfig, lang: &Language) -> Result<(Vec<ParallelPair>, Splits<ParallelPair>)> {
    let pair_cfg = CorpusConfig {
        seed: rng::derive_seed(cfg.seed, &[tag::PAIRS]),
        ..cfg.corpus.clone()
    };
    let pairs = generate_corpus(&lang.vocab, &lang.grammar, &pair_cfg)?;
    let splits = split(&pairs, cfg.split, cfg.seed)?;
    Ok((pairs, splits))
}

/// Reward and evaluation models.
#[derive(Clone, Debug)]
pub struct Judges {
    pub reward_tox: ToxicityModel,
    pub eval_tox: ToxicityModel,
    pub reward_scorer: SimScorer,
    pub eval_scorer: SimScorer,
}

impl Judges {
    pub fn reward(&self) -> RewardModels<'_> {
        RewardModels {
            scorer: &self.reward_scorer,
            tox: &self.reward_tox,
        }
    }

    pub fn eval<'a>(&'a self, lang: &'a Language) -> EvalModels<'a> {
        EvalModels {
            tox: &self.eval_tox,
            scorer: &self.eval_scorer,
            grammar: &lang.grammar,
            vocab: &lang.vocab,
        }
    }
}

fn eval_pool(cfg: &PipelineConfig, lang: &Language) -> Vec<(Sentence, Label)> {
    generate_labeled(
        &lang.vocab,
        &lang.grammar,
        0..lang.grammar.templates.len(),
        ToxicLexicon::Mixed { novel_fraction: 0.5 },
        cfg.eval_pool_size,
        rng::derive_seed(cfg.seed, &[tag::LABEL_POOL]),
        tag::LABEL_POOL,
    )
    .into_iter()
    .map(|(s, t)| (s, Label::from_is_toxic(t)))
    .collect()
}

/// Reward scorer (uniform weights) and evaluation scorer (inverse-frequency
/// weights, different hash seed).
pub fn build_scorers(cfg: &PipelineConfig, lang: &Language) -> Result<(SimScorer, SimScorer)> {
    let v = lang.vocab.len();
    let reward = SimScorer::uniform(cfg.sim_dimension, rng::derive_seed(cfg.seed, &[tag::SIM_TOKEN, 0]), v)?;
    let pool = eval_pool(cfg, lang);
    let eval = SimScorer::inverse_frequency(
        cfg.sim_dimension,
        rng::derive_seed(cfg.seed, &[tag::SIM_TOKEN, 1]),
        v,
        pool.iter().map(|(s, _)| s.ids()),
    )?;
    Ok((reward, eval))
}

/// The reward classifier learns from the training split (sources as toxic,
/// references as non-toxic). The evaluation classifier learns from a
/// separate labeled pool that spans every template and the full lexicon.
pub fn train_classifiers(
    cfg: &PipelineConfig,
    lang: &Language,
    train: &[ParallelPair],
) -> Result<(ToxicityModel, ToxicityModel)> {
    let v = lang.vocab.len();
    let reward_data: Vec<(Sentence, Label)> = train
        .iter()
        .flat_map(|p| [(p.toxic.clone(), Label::Toxic), (p.reference.clone(), Label::NonToxic)])
        .collect();
    let reward = train_classifier(
        &reward_data,
        v,
        &ToxConfig {
            seed: rng::derive_seed(cfg.seed, &[tag::TOX_SHUFFLE, 0]),
            ..cfg.tox.clone()
        },
        "train",
    )?
    .model;
    let eval = train_classifier(
        &eval_pool(cfg, lang),
        v,
        &ToxConfig {
            seed: rng::derive_seed(cfg.seed, &[tag::TOX_SHUFFLE, 1]),
            ..cfg.tox.clone()
        },
        "labeled-pool",
    )?
    .model;
    Ok((reward, eval))
}

pub fn build_judges(cfg: &PipelineConfig, lang: &Language, train: &[ParallelPair]) -> Result<Judges> {
    let (reward_tox, eval_tox) = train_classifiers(cfg, lang, train)?;
    let (reward_scorer, eval_scorer) = build_scorers(cfg, lang)?;
    Ok(Judges {
        reward_tox,
        eval_tox,
        reward_scorer,
        eval_scorer,
    })
}

/// Copy-task sentences over every template and the full toxic lexicon.
pub fn pretrain_sentences(cfg: &PipelineConfig, lang: &Language) -> Vec<Sentence> {
    generate_labeled(
        &lang.vocab,
        &lang.grammar,
        0..lang.grammar.templates.len(),
        ToxicLexicon::Mixed { novel_fraction: 0.5 },
        cfg.pretrain.num_sentences,
        cfg.pretrain.seed,
        tag::PRETRAIN,
    )
    .into_iter()
    .map(|(s, _)| s)
    .collect()
}

pub fn pretrain_backbone(cfg: &PipelineConfig, lang: &Language) -> Result<(PolicyParams, SftOutcome)> {
    let mut params = init_params(rng::derive_seed(cfg.pretrain.seed, &[tag::POLICY_INIT]), cfg.dims())?;
    let out = pretrain_base(&mut params, &lang.vocab, &pretrain_sentences(cfg, lang), &cfg.pretrain)?;
    Ok((params, out))
}

/// Loads the backbone from `<out_dir>/cache`, pretraining and caching it on
/// a miss. The backbone does not depend on the run seed.
pub fn cached_backbone(cfg: &PipelineConfig, lang: &Language) -> Result<PolicyParams> {
    let dir = cfg.out_dir.join("cache");
    let path = dir.join(format!("backbone-{}.txt", cfg.backbone_hash()));
    if path.exists() {
        let p = PolicyParams::load(&path)?;
        if p.dims == cfg.dims() {
            return Ok(p);
        }
    }
    let (params, log) = pretrain_backbone(cfg, lang)?;
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    // Write through a temporary name so concurrent runs never read a partial file.
    let tmp = dir.join(format!("backbone-{}.tmp{}", cfg.backbone_hash(), std::process::id()));
    params.save(&tmp)?;
    fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
    log.write_csv(&dir.join(format!("backbone-{}-metrics.csv", cfg.backbone_hash())))?;
    Ok(params)
}

pub fn fresh_adapter(cfg: &PipelineConfig) -> Result<AdapterParams> {
    AdapterParams::new(
        cfg.dims(),
        cfg.adapter_rank,
        cfg.adapter_alpha,
        rng::derive_seed(cfg.seed, &[tag::ADAPTER_INIT]),
    )
}

/// Cold-start data: the sampled subset, filtered unless data selection is
/// skipped.
pub fn select_sft_data(cfg: &PipelineConfig, train: &[ParallelPair], scorer: &SimScorer) -> Result<Vec<ParallelPair>> {
    if cfg.stages.skip_data_select {
        sample_fraction(train, cfg.sft.data_fraction, cfg.seed)
    } else {
        prepare_sft_data(train, cfg.sft.data_fraction, scorer, cfg.sft.alpha, cfg.seed)
    }
}

pub fn run_sft(cfg: &PipelineConfig, base: &PolicyParams, data: &[ParallelPair]) -> Result<(AdapterParams, SftOutcome)> {
    let mut adapter = fresh_adapter(cfg)?;
    let out = sft_train(base, &mut adapter, data, &cfg.sft_config())?;
    Ok((adapter, out))
}

/// Toxic training sources without their references.
pub fn grpo_inputs(cfg: &PipelineConfig, train: &[ParallelPair]) -> Vec<Sentence> {
    let mut idx: Vec<usize> = (0..train.len()).collect();
    idx.shuffle(&mut rng::stream(cfg.seed, &[tag::GRPO_SHUFFLE, 1]));
    let n = if cfg.grpo_inputs == 0 {
        train.len()
    } else {
        cfg.grpo_inputs.min(train.len())
    };
    idx[..n].iter().map(|&i| train[i].toxic.clone()).collect()
}

pub fn run_grpo(
    cfg: &PipelineConfig,
    base: &PolicyParams,
    start: &AdapterParams,
    inputs: &[Sentence],
    judges: &Judges,
    checkpoint_dir: Option<PathBuf>,
) -> Result<(AdapterParams, GrpoOutcome)> {
    let reference = snapshot(base, Some(start))?;
    let mut adapter = start.clone();
    let out = grpo_train(&reference, &mut adapter, inputs, judges.reward(), &cfg.grpo_config(checkpoint_dir))?;
    Ok((adapter, out))
}

/// In-domain and shifted evaluation of one policy.
#[derive(Clone, Debug, PartialEq)]
pub struct StageEval {
    pub report: EvalReport,
    pub ood: OodReport,
}

pub fn test_sources(cfg: &PipelineConfig, test: &[ParallelPair]) -> Vec<Sentence> {
    let n = if cfg.eval_num_test == 0 {
        test.len()
    } else {
        cfg.eval_num_test.min(test.len())
    };
    test[..n].iter().map(|p| p.toxic.clone()).collect()
}

pub fn evaluate_policy(
    cfg: &PipelineConfig,
    lang: &Language,
    judges: &Judges,
    base: &PolicyParams,
    adapter: Option<&AdapterParams>,
    sources: &[Sentence],
) -> Result<StageEval> {
    let net = Network::new(base, adapter)?;
    let outputs = decode_all(&net, sources, cfg.eval_max_len)?;
    let report = evaluate(&outputs, judges.eval(lang));
    let shift = ShiftConfig {
        seed: rng::derive_seed(cfg.seed, &[tag::SHIFT]),
        ..cfg.shift.clone()
    };
    let ood = run_ood_eval(&net, &shift, judges.eval(lang), &judges.reward_tox, cfg.eval_max_len)?;
    Ok(StageEval { report, ood })
}

pub fn ood_csv(ood: &OodReport) -> String {
    let mut out = ood.report.to_csv_string();
    let _ = writeln!(out, "reward_STA,{:.2}", ood.reward_sta);
    let _ = writeln!(out, "STA_drift,{:.2}", ood.sta_drift());
    out
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageStatus {
    Pending,
    Ok,
    Skipped,
    Failed,
}

impl StageStatus {
    fn as_str(self) -> &'static str {
        match self {
            StageStatus::Pending => "pending",
            StageStatus::Ok => "ok",
            StageStatus::Skipped => "skipped",
            StageStatus::Failed => "failed",
        }
    }
}

pub const STAGES: [&str; 7] = ["corpus", "judges", "backbone", "data_select", "sft", "grpo", "eval"];

struct Manifest {
    path: PathBuf,
    header: String,
    status: BTreeMap<&'static str, StageStatus>,
}

impl Manifest {
    fn new(path: PathBuf, cfg: &PipelineConfig) -> Self {
        let header = format!(
            "config_hash = {}\nbackbone_hash = {}\nseed = {}\n",
            cfg.hash(),
            cfg.backbone_hash(),
            cfg.seed
        );
        Manifest {
            path,
            header,
            status: STAGES.iter().map(|&s| (s, StageStatus::Pending)).collect(),
        }
    }

    fn set(&mut self, stage: &'static str, st: StageStatus) -> Result<()> {
        self.status.insert(stage, st);
        let mut out = self.header.clone();
        for s in STAGES {
            let _ = writeln!(out, "stage.{s} = {}", self.status[s].as_str());
        }
        write_text(&self.path, &out)
    }
}

#[derive(Clone, Debug)]
pub struct PipelineResult {
    pub run_dir: PathBuf,
    pub sft: Option<SftOutcome>,
    pub grpo: Option<GrpoOutcome>,
    /// Evaluation of the post-SFT checkpoint when GRPO also ran.
    pub sft_eval: Option<StageEval>,
    pub final_eval: StageEval,
}

/// Runs the enabled stages into `cfg.run_dir()`. On failure the manifest
/// marks the failing stage and earlier artifacts stay on disk.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<PipelineResult> {
    cfg.validate()?;
    let dir = cfg.run_dir();
    if dir.join("manifest.txt").exists() {
        return Err(Error::Config(format!(
            "run directory {} already exists; runs are never overwritten",
            dir.display()
        )));
    }
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    write_text(&dir.join("config.txt"), &cfg.to_text())?;
    let mut manifest = Manifest::new(dir.join("manifest.txt"), cfg);
    manifest.set("corpus", StageStatus::Pending)?;

    fn stage<T>(
        manifest: &mut Manifest,
        name: &'static str,
        f: impl FnOnce() -> Result<T>,
    ) -> Result<T> {
        match f() {
            Ok(v) => {
                manifest.set(name, StageStatus::Ok)?;
                Ok(v)
            }
            Err(e) => {
                manifest.set(name, StageStatus::Failed)?;
                Err(Error::Stage {
                    stage: name.to_string(),
                    source: Box::new(e),
                })
            }
        }
    }

    let (lang, splits) = stage(&mut manifest, "corpus", || {
        let lang = language(cfg)?;
        let (pairs, splits) = build_corpus(cfg, &lang)?;
        save_corpus(&pairs, &lang.vocab, &dir.join("corpus.txt"))?;
        save_corpus(&splits.train, &lang.vocab, &dir.join("train.txt"))?;
        save_corpus(&splits.val, &lang.vocab, &dir.join("val.txt"))?;
        save_corpus(&splits.test, &lang.vocab, &dir.join("test.txt"))?;
        Ok((lang, splits))
    })?;
    let judges = stage(&mut manifest, "judges", || {
        let j = build_judges(cfg, &lang, &splits.train)?;
        j.reward_tox.save(&dir.join("tox_reward.txt"))?;
        j.eval_tox.save(&dir.join("tox_eval.txt"))?;
        Ok(j)
    })?;
    let base = stage(&mut manifest, "backbone", || cached_backbone(cfg, &lang))?;

    let run_sft_stage = !cfg.stages.skip_sft;
    let data = if run_sft_stage && !cfg.stages.skip_data_select {
        Some(stage(&mut manifest, "data_select", || {
            let d = select_sft_data(cfg, &splits.train, &judges.reward_scorer)?;
            save_corpus(&d, &lang.vocab, &dir.join("sft_data.txt"))?;
            Ok(d)
        })?)
    } else {
        manifest.set("data_select", StageStatus::Skipped)?;
        if run_sft_stage {
            Some(select_sft_data(cfg, &splits.train, &judges.reward_scorer)?)
        } else {
            None
        }
    };

    let (mut adapter, sft) = match data {
        Some(data) => {
            let (a, out) = stage(&mut manifest, "sft", || {
                let (a, out) = run_sft(cfg, &base, &data)?;
                a.save(&dir.join("adapter_sft.txt"))?;
                out.write_csv(&dir.join("sft_metrics.csv"))?;
                Ok((a, out))
            })?;
            (a, Some(out))
        }
        None => {
            manifest.set("sft", StageStatus::Skipped)?;
            (fresh_adapter(cfg)?, None)
        }
    };

    let sources = test_sources(cfg, &splits.test);
    let mut sft_eval = None;
    let grpo = if cfg.stages.skip_grpo {
        manifest.set("grpo", StageStatus::Skipped)?;
        None
    } else {
        if sft.is_some() {
            let e = stage(&mut manifest, "eval", || {
                let e = evaluate_policy(cfg, &lang, &judges, &base, Some(&adapter), &sources)?;
                e.report.write_csv(&dir.join("eval_sft_report.csv"))?;
                write_text(&dir.join("ood_sft_report.csv"), &ood_csv(&e.ood))?;
                Ok(e)
            })?;
            manifest.set("eval", StageStatus::Pending)?;
            sft_eval = Some(e);
        }
        let (a, out) = stage(&mut manifest, "grpo", || {
            let ckpt = (cfg.grpo.checkpoint_every > 0).then(|| dir.join("checkpoints"));
            if let Some(c) = &ckpt {
                fs::create_dir_all(c).map_err(|e| Error::io(c, e))?;
            }
            let inputs = grpo_inputs(cfg, &splits.train);
            let (a, out) = run_grpo(cfg, &base, &adapter, &inputs, &judges, ckpt)?;
            a.save(&dir.join("adapter_grpo.txt"))?;
            out.write_csv(&dir.join("grpo_metrics.csv"))?;
            Ok((a, out))
        })?;
        adapter = a;
        Some(out)
    };

    let trained = sft.is_some() || grpo.is_some();
    let final_eval = stage(&mut manifest, "eval", || {
        let e = evaluate_policy(cfg, &lang, &judges, &base, trained.then_some(&adapter), &sources)?;
        e.report.write_csv(&dir.join("eval_report.csv"))?;
        e.report.write_per_sample_csv(&dir.join("eval_samples.csv"))?;
        write_text(&dir.join("ood_report.csv"), &ood_csv(&e.ood))?;
        Ok(e)
    })?;
    Ok(PipelineResult {
        run_dir: dir,
        sft,
        grpo,
        sft_eval,
        final_eval,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepAxis {
    Lambda,
    Alpha,
    DataFraction,
}

impl SweepAxis {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "lambda" => Some(SweepAxis::Lambda),
            "alpha" => Some(SweepAxis::Alpha),
            "data_fraction" | "data-fraction" => Some(SweepAxis::DataFraction),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SweepAxis::Lambda => "lambda",
            SweepAxis::Alpha => "alpha",
            SweepAxis::DataFraction => "data_fraction",
        }
    }

    /// The grid used in the reported sensitivity studies.
    pub fn default_values(self) -> Vec<f64> {
        match self {
            SweepAxis::Lambda => vec![1.0, 3.0, 5.0, 7.0],
            SweepAxis::Alpha => vec![0.4, 0.5, 0.6],
            SweepAxis::DataFraction => vec![0.1, 0.2, 0.3, 0.4],
        }
    }

    pub fn apply(self, cfg: &mut PipelineConfig, value: f64) {
        match self {
            SweepAxis::Lambda => cfg.grpo.lambda = value,
            SweepAxis::Alpha => cfg.sft.alpha = value,
            SweepAxis::DataFraction => cfg.sft.data_fraction = value,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SweepRow {
    pub value: f64,
    pub outcome: std::result::Result<PipelineResult, String>,
}

/// One pipeline per value with a shared seed; failures are recorded and the
/// sweep moves on. Writes `sweep_<axis>.csv` into `cfg.out_dir`.
pub fn run_sweep(cfg: &PipelineConfig, axis: SweepAxis, values: &[f64]) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    cfg.validate()?;
    let mut rows = Vec::with_capacity(values.len());
    let mut csv_text = format!("{},STA,SIM,FL,J,status\n", axis.as_str());
    for &value in values {
        let mut c = cfg.clone();
        axis.apply(&mut c, value);
        let outcome = run_pipeline(&c).map_err(|e| e.to_string());
        match &outcome {
            Ok(r) => {
                let m = &r.final_eval.report;
                let _ = writeln!(csv_text, "{value},{:.2},{:.2},{:.2},{:.2},ok", m.sta, m.sim, m.fl, m.j);
            }
            Err(e) => {
                let _ = writeln!(csv_text, "{value},,,,,\"failed: {}\"", e.replace('"', "'"));
            }
        }
        rows.push(SweepRow { value, outcome });
    }
    fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    write_text(&cfg.out_dir.join(format!("sweep_{}.csv", axis.as_str())), &csv_text)?;
    Ok(rows)
}

/// Splits a metrics CSV into one `(step, value)` file per metric column,
/// named `<stem>_<column>.csv` in `out_dir`.
pub fn emit_curves(metrics_csv: &Path, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .from_path(metrics_csv)?;
    let headers = reader.headers()?.clone();
    let step_col = headers
        .iter()
        .position(|h| h == "step")
        .ok_or_else(|| Error::Invalid(format!("{}: missing column 'step'", metrics_csv.display())))?;
    let metrics: Vec<(usize, String)> = headers
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != step_col)
        .map(|(i, h)| (i, h.to_string()))
        .collect();
    let mut bodies: Vec<String> = metrics.iter().map(|(_, h)| format!("step,{h}\n")).collect();
    for (row, rec) in reader.records().enumerate() {
        let lineno = row + 2;
        let rec = rec?;
        if rec.len() != headers.len() {
            return Err(Error::parse(
                metrics_csv,
                lineno,
                format!("expected {} fields, found {}", headers.len(), rec.len()),
            ));
        }
        let step = &rec[step_col];
        if step.parse::<u64>().is_err() {
            return Err(Error::parse(metrics_csv, lineno, format!("bad step '{step}'")));
        }
        for ((i, h), body) in metrics.iter().zip(&mut bodies) {
            let v = &rec[*i];
            if v.parse::<f64>().is_err() {
                return Err(Error::parse(metrics_csv, lineno, format!("bad {h} value '{v}'")));
            }
            let _ = writeln!(body, "{step},{v}");
        }
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let stem = metrics_csv
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "metrics".into());
    let mut written = Vec::with_capacity(metrics.len());
    for ((_, h), body) in metrics.iter().zip(&bodies) {
        let path = out_dir.join(format!("{stem}_{h}.csv"));
        write_text(&path, body)?;
        written.push(path);
    }
    Ok(written)
}

/// Mean of the per-epoch values, for quick summaries.
pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trips_through_text() {
        let mut cfg = PipelineConfig::default();
        cfg.seed = 42;
        cfg.grpo.kl_ratio = KlRatio::ThetaOverRef;
        cfg.stages.skip_sft = true;
        let back = PipelineConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn comments_and_blanks_are_ignored() {
        let cfg = PipelineConfig::parse("# header\n\nrun.seed = 9  # trailing\ngrpo.lambda=3\n").unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.grpo.lambda, 3.0);
    }

    #[test]
    fn bad_config_lines_are_config_errors() {
        for text in ["nonsense", "grpo.k = two", "grpo.k = 1", "foo.bar = 1", "grpo.kl_ratio = up"] {
            let e = PipelineConfig::parse(text).unwrap_err();
            assert!(e.is_config(), "{text}: {e}");
        }
    }

    #[test]
    fn hash_ignores_output_directory() {
        let a = PipelineConfig::default();
        let mut b = a.clone();
        b.out_dir = PathBuf::from("/elsewhere");
        assert_eq!(a.hash(), b.hash());
        b.seed += 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.backbone_hash(), b.backbone_hash());
    }

    #[test]
    fn sweep_grids() {
        assert_eq!(SweepAxis::Lambda.default_values(), vec![1.0, 3.0, 5.0, 7.0]);
        assert_eq!(SweepAxis::Alpha.default_values(), vec![0.4, 0.5, 0.6]);
        assert_eq!(SweepAxis::DataFraction.default_values(), vec![0.1, 0.2, 0.3, 0.4]);
        assert_eq!(SweepAxis::parse("data_fraction"), Some(SweepAxis::DataFraction));
    }
}
