//! Synthetic parallel detoxification corpus.
//!
//! A seeded vocabulary assigns every token a part-of-speech tag, and a 1:1
//! toxic→neutral lexicon pairs toxic content words with neutral partners of
//! the same tag. Sentences are produced by filling POS templates, so the gold
//! rewrite of any toxic sentence and its toxicity label are known exactly.
//! Drift pairs replace the gold rewrite with an unrelated clean sentence.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::ops::Deref;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::{self, tag};

pub type TokenId = u32;

pub const CORPUS_HEADER: &str = "#detox-corpus v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PosTag {
    Func,
    Noun,
    Verb,
    Adj,
    Special,
}

impl PosTag {
    pub const CONTENT: [PosTag; 3] = [PosTag::Noun, PosTag::Verb, PosTag::Adj];

    pub fn as_str(self) -> &'static str {
        match self {
            PosTag::Func => "FUNC",
            PosTag::Noun => "NOUN",
            PosTag::Verb => "VERB",
            PosTag::Adj => "ADJ",
            PosTag::Special => "SPECIAL",
        }
    }

    pub fn is_content(self) -> bool {
        matches!(self, PosTag::Noun | PosTag::Verb | PosTag::Adj)
    }
}

/// Token ids of a sentence. Never contains special tokens.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Sentence(Vec<TokenId>);

impl Sentence {
    pub fn new(ids: Vec<TokenId>) -> Self {
        Sentence(ids)
    }

    pub fn ids(&self) -> &[TokenId] {
        &self.0
    }

    pub fn into_ids(self) -> Vec<TokenId> {
        self.0
    }
}

impl Deref for Sentence {
    type Target = [TokenId];

    fn deref(&self) -> &[TokenId] {
        &self.0
    }
}

impl From<Vec<TokenId>> for Sentence {
    fn from(v: Vec<TokenId>) -> Self {
        Sentence(v)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParallelPair {
    pub toxic: Sentence,
    pub reference: Sentence,
    pub is_drift: bool,
    pub template: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusConfig {
    pub vocab_size: usize,
    pub num_templates: usize,
    /// Extra templates that never appear in the in-domain corpus.
    pub num_shift_templates: usize,
    pub num_pairs: usize,
    pub drift_rate: f64,
    pub min_len: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            vocab_size: 120,
            num_templates: 24,
            num_shift_templates: 8,
            num_pairs: 5000,
            drift_rate: 0.15,
            min_len: 5,
            max_len: 12,
            seed: 1,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.drift_rate) {
            return Err(Error::Config(format!(
                "drift_rate must lie in [0, 1], got {}",
                self.drift_rate
            )));
        }
        if self.min_len < 1 || self.min_len > self.max_len {
            return Err(Error::Config(format!(
                "need 1 <= min_len <= max_len, got {}..{}",
                self.min_len, self.max_len
            )));
        }
        if self.num_templates == 0 {
            return Err(Error::Config("num_templates must be positive".into()));
        }
        Ok(())
    }
}

/// Token inventory with tags and the toxic lexicon.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    tags: Vec<PosTag>,
    toxic_pairs: BTreeMap<TokenId, TokenId>,
    /// Toxic keys withheld from the in-domain corpus; they only show up under
    /// distribution shift.
    reserved: BTreeSet<TokenId>,
    index: HashMap<String, TokenId>,
}

pub const BOS: TokenId = 0;
pub const SEP: TokenId = 1;
pub const EOS: TokenId = 2;
const SPECIAL_NAMES: [&str; 3] = ["<bos>", "<sep>", "<eos>"];

const ONSETS: [&str; 16] = [
    "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "sh", "tr",
];
const VOWELS: [&str; 6] = ["a", "e", "i", "o", "u", "ai"];

fn pseudo_word(rng: &mut ChaCha8Rng) -> String {
    let syllables = rng.gen_range(2..=3);
    let mut w = String::new();
    for _ in 0..syllables {
        w.push_str(ONSETS[rng.gen_range(0..ONSETS.len())]);
        w.push_str(VOWELS[rng.gen_range(0..VOWELS.len())]);
    }
    w
}

/// Per-tag token quotas for `n` non-special tokens.
fn tag_quotas(n: usize) -> [(PosTag, usize); 4] {
    let func = (n / 10).max(4);
    let noun = n * 38 / 100;
    let verb = n * 26 / 100;
    let adj = n.saturating_sub(func + noun + verb);
    [
        (PosTag::Func, func),
        (PosTag::Noun, noun),
        (PosTag::Verb, verb),
        (PosTag::Adj, adj),
    ]
}

pub fn build_vocab(config: &CorpusConfig) -> Result<Vocab> {
    config.validate()?;
    let v = config.vocab_size;
    if v < 40 {
        return Err(Error::Config(format!(
            "vocab_size {v} too small for tag quotas (need >= 40)"
        )));
    }
    let mut rng = rng::stream(config.seed, &[tag::VOCAB]);

    let mut tokens: Vec<String> = SPECIAL_NAMES.iter().map(|s| s.to_string()).collect();
    let mut seen: BTreeSet<String> = tokens.iter().cloned().collect();
    while tokens.len() < v {
        let w = pseudo_word(&mut rng);
        if seen.insert(w.clone()) {
            tokens.push(w);
        }
    }

    let mut ids: Vec<TokenId> = (SPECIAL_NAMES.len() as TokenId..v as TokenId).collect();
    ids.shuffle(&mut rng);

    let mut tags = vec![PosTag::Special; v];
    let mut toxic_pairs = BTreeMap::new();
    let mut reserved = BTreeSet::new();
    let mut cursor = 0;
    for (pos, count) in tag_quotas(v - SPECIAL_NAMES.len()) {
        let group = &ids[cursor..cursor + count];
        cursor += count;
        for &id in group {
            tags[id as usize] = pos;
        }
        if pos.is_content() {
            let keys = count.div_ceil(8);
            if 2 * keys + 1 > count {
                return Err(Error::Config(format!(
                    "vocab_size {v} leaves too few {} tokens for the toxic lexicon",
                    pos.as_str()
                )));
            }
            for i in 0..keys {
                toxic_pairs.insert(group[i], group[keys + i]);
            }
            for &key in group.iter().take(keys / 4) {
                reserved.insert(key);
            }
        }
    }

    let index = tokens
        .iter()
        .enumerate()
        .map(|(i, t)| (t.clone(), i as TokenId))
        .collect();
    Ok(Vocab {
        tokens,
        tags,
        toxic_pairs,
        reserved,
        index,
    })
}

impl Vocab {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token(&self, id: TokenId) -> &str {
        &self.tokens[id as usize]
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn tag(&self, id: TokenId) -> PosTag {
        self.tags[id as usize]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn toxic_pairs(&self) -> &BTreeMap<TokenId, TokenId> {
        &self.toxic_pairs
    }

    pub fn is_toxic(&self, id: TokenId) -> bool {
        self.toxic_pairs.contains_key(&id)
    }

    pub fn is_reserved(&self, id: TokenId) -> bool {
        self.reserved.contains(&id)
    }

    pub fn reserved(&self) -> &BTreeSet<TokenId> {
        &self.reserved
    }

    pub fn is_special(&self, id: TokenId) -> bool {
        self.tags
            .get(id as usize)
            .is_some_and(|t| *t == PosTag::Special)
    }

    /// Neutral partner of a toxic token, identity for everything else.
    pub fn detox_token(&self, id: TokenId) -> TokenId {
        self.toxic_pairs.get(&id).copied().unwrap_or(id)
    }

    /// Gold rewrite: every toxic token replaced by its partner.
    pub fn gold_rewrite(&self, s: &[TokenId]) -> Sentence {
        Sentence(s.iter().map(|&t| self.detox_token(t)).collect())
    }

    pub fn count_toxic(&self, s: &[TokenId]) -> usize {
        s.iter().filter(|&&t| self.is_toxic(t)).count()
    }

    pub fn tokens_with_tag(&self, pos: PosTag) -> Vec<TokenId> {
        (0..self.len() as TokenId)
            .filter(|&i| self.tag(i) == pos)
            .collect()
    }

    /// Checks the sentence invariants: non-empty, in range, no specials.
    pub fn check_sentence(&self, s: &[TokenId]) -> Result<()> {
        if s.is_empty() {
            return Err(Error::Invalid("empty sentence".into()));
        }
        for &t in s {
            if t as usize >= self.len() {
                return Err(Error::Invalid(format!("token id {t} out of range")));
            }
            if self.is_special(t) {
                return Err(Error::Invalid(format!("special token {t} inside sentence")));
            }
        }
        Ok(())
    }

    pub fn render(&self, s: &[TokenId]) -> String {
        s.iter()
            .map(|&t| self.token(t))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn parse_sentence(&self, text: &str) -> std::result::Result<Sentence, String> {
        text.split_whitespace()
            .map(|w| self.id(w).ok_or_else(|| format!("unknown token '{w}'")))
            .collect::<std::result::Result<Vec<_>, _>>()
            .map(Sentence)
    }

    /// Short content hash identifying this vocabulary in file headers.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (i, t) in self.tokens.iter().enumerate() {
            h.update(t.as_bytes());
            h.update([0u8]);
            h.update(self.tags[i].as_str().as_bytes());
            h.update([0u8]);
        }
        for (k, v) in &self.toxic_pairs {
            h.update(k.to_le_bytes());
            h.update(v.to_le_bytes());
        }
        for r in &self.reserved {
            h.update(r.to_le_bytes());
        }
        let digest = h.finalize();
        digest[..8].iter().fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Template {
    pub tags: Vec<PosTag>,
}

/// POS templates: the in-domain set followed by shift-only templates.
#[derive(Clone, Debug, PartialEq)]
pub struct Grammar {
    pub templates: Vec<Template>,
    pub num_in_domain: usize,
    pub min_len: usize,
    pub max_len: usize,
}

pub fn build_grammar(config: &CorpusConfig) -> Result<Grammar> {
    config.validate()?;
    let mut rng = rng::stream(config.seed, &[tag::TEMPLATES]);
    let total = config.num_templates + config.num_shift_templates;
    let mut templates: Vec<Template> = Vec::with_capacity(total);
    let mut attempts = 0;
    while templates.len() < total {
        attempts += 1;
        if attempts > 100_000 {
            return Err(Error::Config(
                "cannot draw enough distinct templates for the length range".into(),
            ));
        }
        let len = rng.gen_range(config.min_len..=config.max_len);
        let tags: Vec<PosTag> = (0..len)
            .map(|_| match rng.gen_range(0..10) {
                0..=2 => PosTag::Func,
                3..=5 => PosTag::Noun,
                6..=7 => PosTag::Verb,
                _ => PosTag::Adj,
            })
            .collect();
        let content = tags.iter().filter(|t| t.is_content()).count();
        if content < 1 || (len >= 3 && content < 2) {
            continue;
        }
        if templates.iter().any(|t| t.tags == tags) {
            continue;
        }
        templates.push(Template { tags });
    }
    Ok(Grammar {
        templates,
        num_in_domain: config.num_templates,
        min_len: config.min_len,
        max_len: config.max_len,
    })
}

impl Grammar {
    pub fn in_domain(&self) -> std::ops::Range<usize> {
        0..self.num_in_domain
    }

    pub fn shift(&self) -> std::ops::Range<usize> {
        self.num_in_domain..self.templates.len()
    }

    pub fn matches_template(&self, tags: &[PosTag]) -> bool {
        self.templates.iter().any(|t| t.tags == tags)
    }
}

/// Which toxic tokens a sentence generator may use.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ToxicLexicon {
    /// Only non-reserved toxic keys.
    InDomain,
    /// Each toxic slot draws a reserved key with the given probability.
    Mixed { novel_fraction: f64 },
}

/// Fills templates with tokens. Holds per-tag token tables.
pub struct SentenceSampler<'a> {
    vocab: &'a Vocab,
    grammar: &'a Grammar,
    neutral: BTreeMap<PosTag, Vec<TokenId>>,
    toxic_known: BTreeMap<PosTag, Vec<TokenId>>,
    toxic_novel: BTreeMap<PosTag, Vec<TokenId>>,
}

fn zipf_pick(rng: &mut ChaCha8Rng, items: &[TokenId]) -> TokenId {
    let total: f64 = (1..=items.len()).map(|r| 1.0 / r as f64).sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, &it) in items.iter().enumerate() {
        u -= 1.0 / (i + 1) as f64;
        if u <= 0.0 {
            return it;
        }
    }
    items[items.len() - 1]
}

fn has_adjacent_repeat(s: &[TokenId]) -> bool {
    s.windows(2).any(|w| w[0] == w[1])
}

impl<'a> SentenceSampler<'a> {
    pub fn new(vocab: &'a Vocab, grammar: &'a Grammar) -> Self {
        let mut neutral: BTreeMap<PosTag, Vec<TokenId>> = BTreeMap::new();
        let mut toxic_known: BTreeMap<PosTag, Vec<TokenId>> = BTreeMap::new();
        let mut toxic_novel: BTreeMap<PosTag, Vec<TokenId>> = BTreeMap::new();
        for id in 0..vocab.len() as TokenId {
            let pos = vocab.tag(id);
            if pos == PosTag::Special {
                continue;
            }
            let table = if !vocab.is_toxic(id) {
                &mut neutral
            } else if vocab.is_reserved(id) {
                &mut toxic_novel
            } else {
                &mut toxic_known
            };
            table.entry(pos).or_default().push(id);
        }
        SentenceSampler {
            vocab,
            grammar,
            neutral,
            toxic_known,
            toxic_novel,
        }
    }

    fn max_toxic(len: usize) -> usize {
        (len / 3).clamp(1, 3)
    }

    /// A clean sentence for template `t`.
    pub fn clean(&self, rng: &mut ChaCha8Rng, t: usize) -> Sentence {
        let tags = &self.grammar.templates[t].tags;
        loop {
            let s: Vec<TokenId> = tags
                .iter()
                .map(|p| *self.neutral[p].choose(rng).expect("tag has neutral tokens"))
                .collect();
            if !has_adjacent_repeat(&s) {
                return Sentence(s);
            }
        }
    }

    /// A toxic sentence for template `t` containing at least one toxic token.
    pub fn toxic(&self, rng: &mut ChaCha8Rng, t: usize, lexicon: ToxicLexicon) -> Sentence {
        let tags = &self.grammar.templates[t].tags;
        let slots: Vec<usize> = (0..tags.len())
            .filter(|&i| tags[i].is_content() && self.toxic_known.contains_key(&tags[i]))
            .collect();
        loop {
            let mut s = self.clean(rng, t).0;
            let m = rng.gen_range(1..=Self::max_toxic(tags.len()).min(slots.len()));
            for &i in slots.choose_multiple(rng, m) {
                let pos = tags[i];
                let novel = match lexicon {
                    ToxicLexicon::InDomain => false,
                    ToxicLexicon::Mixed { novel_fraction } => {
                        self.toxic_novel.contains_key(&pos) && rng.gen::<f64>() < novel_fraction
                    }
                };
                let table = if novel {
                    &self.toxic_novel[&pos]
                } else {
                    &self.toxic_known[&pos]
                };
                s[i] = zipf_pick(rng, table);
            }
            let gold = self.vocab.gold_rewrite(&s);
            if !has_adjacent_repeat(&s) && !has_adjacent_repeat(&gold) {
                return Sentence(s);
            }
        }
    }
}

/// Draws exactly `round(rate * n)` flagged indices.
fn flagged_indices(n: usize, rate: f64, rng: &mut ChaCha8Rng) -> Vec<bool> {
    let count = ((rate * n as f64).round() as usize).min(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut flags = vec![false; n];
    for &i in &order[..count] {
        flags[i] = true;
    }
    flags
}

pub fn generate_corpus(
    vocab: &Vocab,
    grammar: &Grammar,
    config: &CorpusConfig,
) -> Result<Vec<ParallelPair>> {
    config.validate()?;
    let sampler = SentenceSampler::new(vocab, grammar);
    let drift = flagged_indices(
        config.num_pairs,
        config.drift_rate,
        &mut rng::stream(config.seed, &[tag::DRIFT]),
    );
    let n_templates = grammar.num_in_domain;
    Ok((0..config.num_pairs)
        .map(|i| {
            let mut rng = rng::stream(config.seed, &[tag::PAIRS, i as u64]);
            let template = rng.gen_range(0..n_templates);
            let toxic = sampler.toxic(&mut rng, template, ToxicLexicon::InDomain);
            let reference = if drift[i] {
                let other = rng.gen_range(0..n_templates);
                sampler.clean(&mut rng, other)
            } else {
                vocab.gold_rewrite(&toxic)
            };
            ParallelPair {
                toxic,
                reference,
                is_drift: drift[i],
                template,
            }
        })
        .collect())
}

/// Labeled sentences: `(sentence, is_toxic)`, half toxic, from the given
/// template range and toxic lexicon.
pub fn generate_labeled(
    vocab: &Vocab,
    grammar: &Grammar,
    templates: std::ops::Range<usize>,
    lexicon: ToxicLexicon,
    n: usize,
    seed: u64,
    stream_tag: u64,
) -> Vec<(Sentence, bool)> {
    let sampler = SentenceSampler::new(vocab, grammar);
    (0..n)
        .map(|i| {
            let mut rng = rng::stream(seed, &[stream_tag, i as u64]);
            let t = rng.gen_range(templates.clone());
            if i % 2 == 0 {
                (sampler.toxic(&mut rng, t, lexicon), true)
            } else {
                (sampler.clean(&mut rng, t), false)
            }
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions {
            train: 0.8,
            val: 0.1,
            test: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splits<T> {
    pub train: Vec<T>,
    pub val: Vec<T>,
    pub test: Vec<T>,
}

/// Seeded shuffle-and-cut. Validation and test get `floor(f * N)` items;
/// train gets `floor(f * N)` plus the remainder when the fractions sum to one.
pub fn split<T: Clone>(items: &[T], fractions: SplitFractions, seed: u64) -> Result<Splits<T>> {
    if items.is_empty() {
        return Err(Error::Invalid("cannot split an empty list".into()));
    }
    let SplitFractions { train, val, test } = fractions;
    if train <= 0.0 || val <= 0.0 || test <= 0.0 {
        return Err(Error::Invalid("split fractions must be positive".into()));
    }
    let sum = train + val + test;
    if sum > 1.0 + 1e-12 {
        return Err(Error::Invalid(format!("split fractions sum to {sum} > 1")));
    }
    let n = items.len();
    let n_val = (val * n as f64).floor() as usize;
    let n_test = (test * n as f64).floor() as usize;
    let n_train = if sum >= 1.0 - 1e-12 {
        n - n_val - n_test
    } else {
        (train * n as f64).floor() as usize
    };
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, &[tag::SPLIT]));
    let take = |r: std::ops::Range<usize>| order[r].iter().map(|&i| items[i].clone()).collect();
    Ok(Splits {
        train: take(0..n_train),
        val: take(n_train..n_train + n_val),
        test: take(n_train + n_val..n_train + n_val + n_test),
    })
}

pub fn save_corpus(pairs: &[ParallelPair], vocab: &Vocab, path: &Path) -> Result<()> {
    let mut out = String::new();
    let _ = writeln!(out, "{CORPUS_HEADER} vocab={}", vocab.hash());
    for p in pairs {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}",
            vocab.render(&p.toxic),
            vocab.render(&p.reference),
            u8::from(p.is_drift),
            p.template
        );
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_corpus(path: &Path, vocab: &Vocab) -> Result<Vec<ParallelPair>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(f).lines();
    let header = match lines.next() {
        Some(l) => l.map_err(|e| Error::io(path, e))?,
        None => return Err(Error::parse(path, 1, "missing header")),
    };
    let expected = format!("{CORPUS_HEADER} vocab={}", vocab.hash());
    if !header.starts_with(CORPUS_HEADER) {
        return Err(Error::parse(path, 1, format!("bad header '{header}'")));
    }
    if header != expected {
        return Err(Error::parse(
            path,
            1,
            format!("vocabulary mismatch: file has '{header}', expected '{expected}'"),
        ));
    }
    let mut pairs = Vec::new();
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(Error::parse(
                path,
                lineno,
                format!("expected 4 tab-separated fields, found {}", fields.len()),
            ));
        }
        let sentence = |text: &str| -> Result<Sentence> {
            let s = vocab
                .parse_sentence(text)
                .map_err(|m| Error::parse(path, lineno, m))?;
            vocab
                .check_sentence(&s)
                .map_err(|e| Error::parse(path, lineno, e.to_string()))?;
            Ok(s)
        };
        let toxic = sentence(fields[0])?;
        let reference = sentence(fields[1])?;
        let is_drift = match fields[2] {
            "0" => false,
            "1" => true,
            other => {
                return Err(Error::parse(path, lineno, format!("bad drift flag '{other}'")));
            }
        };
        let template = fields[3]
            .parse()
            .map_err(|_| Error::parse(path, lineno, format!("bad template id '{}'", fields[3])))?;
        pairs.push(ParallelPair {
            toxic,
            reference,
            is_drift,
            template,
        });
    }
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn setup(cfg: &CorpusConfig) -> (Vocab, Grammar) {
        (build_vocab(cfg).unwrap(), build_grammar(cfg).unwrap())
    }

    #[test]
    fn vocab_is_deterministic() {
        let cfg = CorpusConfig {
            seed: 1,
            ..Default::default()
        };
        let a = build_vocab(&cfg).unwrap();
        let b = build_vocab(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.hash(), b.hash());
    }

    #[test]
    fn vocab_depends_on_seed() {
        let a = build_vocab(&CorpusConfig {
            seed: 1,
            ..Default::default()
        })
        .unwrap();
        let b = build_vocab(&CorpusConfig {
            seed: 2,
            ..Default::default()
        })
        .unwrap();
        assert_ne!(a.tokens(), b.tokens());
        assert_ne!(a.toxic_pairs(), b.toxic_pairs());
    }

    #[test]
    fn vocab_invariants() {
        let (v, _) = setup(&CorpusConfig::default());
        assert_eq!(v.len(), 120);
        let keys: BTreeSet<_> = v.toxic_pairs().keys().copied().collect();
        let vals: BTreeSet<_> = v.toxic_pairs().values().copied().collect();
        assert!(keys.is_disjoint(&vals));
        for (&k, &p) in v.toxic_pairs() {
            assert_eq!(v.tag(k), v.tag(p));
            assert!(v.tag(k).is_content());
        }
        for s in [BOS, SEP, EOS] {
            assert_eq!(v.tag(s), PosTag::Special);
        }
        let non_func = (0..v.len() as TokenId)
            .filter(|&i| !matches!(v.tag(i), PosTag::Func | PosTag::Special))
            .count();
        assert!(keys.len() * 10 >= non_func, "{} of {non_func}", keys.len());
        assert!(!v.reserved().is_empty());
        let distinct: BTreeSet<_> = v.tokens().iter().collect();
        assert_eq!(distinct.len(), v.len());
    }

    #[test]
    fn tiny_vocab_is_rejected() {
        let cfg = CorpusConfig {
            vocab_size: 20,
            ..Default::default()
        };
        assert!(matches!(build_vocab(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn drift_rate_zero_gives_gold_rewrites() {
        let cfg = CorpusConfig {
            num_pairs: 300,
            drift_rate: 0.0,
            ..Default::default()
        };
        let (v, g) = setup(&cfg);
        for p in generate_corpus(&v, &g, &cfg).unwrap() {
            assert!(!p.is_drift);
            assert_eq!(p.reference, v.gold_rewrite(&p.toxic));
            assert_eq!(v.count_toxic(&p.reference), 0);
            assert!(v.count_toxic(&p.toxic) >= 1);
            assert!(p.toxic.iter().all(|t| !v.is_reserved(*t)));
        }
    }

    #[test]
    fn drift_rate_one_gives_unrelated_clean_references() {
        let cfg = CorpusConfig {
            num_pairs: 200,
            drift_rate: 1.0,
            ..Default::default()
        };
        let (v, g) = setup(&cfg);
        let pairs = generate_corpus(&v, &g, &cfg).unwrap();
        let mut gold_hits = 0;
        for p in &pairs {
            assert!(p.is_drift);
            assert_eq!(v.count_toxic(&p.reference), 0);
            gold_hits += usize::from(p.reference == v.gold_rewrite(&p.toxic));
        }
        assert_eq!(gold_hits, 0);
    }

    #[test]
    fn drift_fraction_tracks_rate() {
        let cfg = CorpusConfig {
            num_pairs: 2000,
            drift_rate: 0.15,
            seed: 7,
            ..Default::default()
        };
        let (v, g) = setup(&cfg);
        let pairs = generate_corpus(&v, &g, &cfg).unwrap();
        assert_eq!(pairs.len(), 2000);
        let frac = pairs.iter().filter(|p| p.is_drift).count() as f64 / 2000.0;
        assert!((0.13..=0.17).contains(&frac), "{frac}");
    }

    #[test]
    fn toxic_sentences_follow_their_template() {
        let cfg = CorpusConfig {
            num_pairs: 300,
            ..Default::default()
        };
        let (v, g) = setup(&cfg);
        for p in generate_corpus(&v, &g, &cfg).unwrap() {
            let tags: Vec<PosTag> = p.toxic.iter().map(|&t| v.tag(t)).collect();
            assert_eq!(tags, g.templates[p.template].tags);
            assert!(p.template < g.num_in_domain);
            if !p.is_drift {
                assert_eq!(p.reference.len(), p.toxic.len());
            }
        }
    }

    #[test]
    fn split_sizes_and_partition() {
        let items: Vec<u32> = (0..10).collect();
        let s = split(&items, SplitFractions::default(), 3).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (8, 1, 1));
        let mut all: Vec<u32> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        all.sort();
        assert_eq!(all, items);
        assert_eq!(s, split(&items, SplitFractions::default(), 3).unwrap());
    }

    #[test]
    fn split_rejects_bad_input() {
        assert!(split::<u32>(&[], SplitFractions::default(), 0).is_err());
        let bad = SplitFractions {
            train: 0.9,
            val: 0.1,
            test: 0.1,
        };
        assert!(split(&[1, 2, 3], bad, 0).is_err());
    }

    #[test]
    fn empty_corpus_round_trips() {
        let (v, _) = setup(&CorpusConfig::default());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.tsv");
        save_corpus(&[], &v, &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 1);
        assert!(text.starts_with("#detox-corpus v1 vocab="));
        assert!(load_corpus(&path, &v).unwrap().is_empty());
    }

    #[test]
    fn malformed_line_names_its_number() {
        let cfg = CorpusConfig {
            num_pairs: 3,
            ..Default::default()
        };
        let (v, g) = setup(&cfg);
        let pairs = generate_corpus(&v, &g, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.tsv");
        save_corpus(&pairs, &v, &path).unwrap();
        let mut lines: Vec<String> = fs::read_to_string(&path)
            .unwrap()
            .lines()
            .map(String::from)
            .collect();
        let broken: Vec<&str> = lines[3].split('\t').take(3).collect();
        lines[3] = broken.join("\t");
        fs::write(&path, lines.join("\n")).unwrap();
        match load_corpus(&path, &v) {
            Err(Error::Parse { line, message, .. }) => {
                assert_eq!(line, 4);
                assert!(message.contains("found 3"), "{message}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn corpus_round_trips(seed in 0u64..1000, n in 0usize..60, drift in 0.0f64..1.0) {
            let cfg = CorpusConfig { seed, num_pairs: n, drift_rate: drift, ..Default::default() };
            let (v, g) = setup(&cfg);
            let pairs = generate_corpus(&v, &g, &cfg).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("c.tsv");
            save_corpus(&pairs, &v, &path).unwrap();
            prop_assert_eq!(load_corpus(&path, &v).unwrap(), pairs);
        }

        #[test]
        fn split_is_a_partition(n in 1usize..200, seed in 0u64..100) {
            let items: Vec<usize> = (0..n).collect();
            let s = split(&items, SplitFractions::default(), seed).unwrap();
            let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
            all.sort();
            prop_assert_eq!(all, items);
        }
    }
}
