//! Logistic non-toxicity classifiers over token-count features.
//!
//! One model scores `NonToxic(o)` inside the reward; a second model, trained
//! on a disjoint labeled pool with a different seed, decides style accuracy
//! at evaluation time.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;

use crate::corpus::{Sentence, TokenId};
use crate::error::{Error, Result};
use crate::rng::{self, tag};

pub const TOX_HEADER: &str = "#toxmodel v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Label {
    Toxic,
    NonToxic,
}

impl Label {
    pub fn from_is_toxic(toxic: bool) -> Self {
        if toxic {
            Label::Toxic
        } else {
            Label::NonToxic
        }
    }

    fn target(self) -> f64 {
        match self {
            Label::Toxic => 0.0,
            Label::NonToxic => 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToxConfig {
    pub lr: f64,
    pub epochs: usize,
    pub l2: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ToxConfig {
    fn default() -> Self {
        ToxConfig {
            lr: 0.5,
            epochs: 20,
            l2: 1e-4,
            batch_size: 32,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToxicityModel {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub seed: u64,
    pub split_id: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainedClassifier {
    pub model: ToxicityModel,
    /// Mean regularized loss over the full data after each epoch.
    pub epoch_losses: Vec<f64>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl ToxicityModel {
    pub fn zeros(vocab_size: usize) -> Self {
        ToxicityModel {
            weights: vec![0.0; vocab_size],
            bias: 0.0,
            seed: 0,
            split_id: String::new(),
        }
    }

    pub fn logit(&self, s: &[TokenId]) -> f64 {
        self.bias
            + s.iter()
                .filter_map(|&t| self.weights.get(t as usize))
                .sum::<f64>()
    }

    /// Probability that `s` is non-toxic.
    pub fn nontoxic_prob(&self, s: &[TokenId]) -> f64 {
        sigmoid(self.logit(s))
    }

    /// Style accuracy of one output: 1 when judged non-toxic, 0 for empty.
    pub fn sta(&self, s: &[TokenId]) -> u8 {
        u8::from(!s.is_empty() && self.nontoxic_prob(s) >= 0.5)
    }

    fn loss(&self, data: &[(Sentence, Label)], l2: f64) -> f64 {
        let n = data.len() as f64;
        let nll: f64 = data
            .iter()
            .map(|(s, y)| {
                let p = self.nontoxic_prob(s).clamp(1e-15, 1.0 - 1e-15);
                let t = y.target();
                -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
            })
            .sum::<f64>()
            / n;
        nll + 0.5 * l2 * self.weights.iter().map(|w| w * w).sum::<f64>()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        let _ = writeln!(out, "{TOX_HEADER}");
        let _ = writeln!(
            out,
            "# dim={} seed={} split={}",
            self.weights.len(),
            self.seed,
            self.split_id
        );
        let _ = writeln!(out, "bias {:.16e}", self.bias);
        for (i, w) in self.weights.iter().enumerate() {
            if *w != 0.0 {
                let _ = writeln!(out, "w {i} {w:.16e}");
            }
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, vocab_size: usize) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, TOX_HEADER)) => {}
            _ => return Err(Error::parse(path, 1, "missing '#toxmodel v1' header")),
        }
        let mut model = ToxicityModel::zeros(vocab_size);
        let mut saw_bias = false;
        for (i, line) in lines {
            let lineno = i + 1;
            if let Some(meta) = line.strip_prefix('#') {
                for kv in meta.split_whitespace() {
                    match kv.split_once('=') {
                        Some(("seed", v)) => model.seed = v.parse().unwrap_or(0),
                        Some(("split", v)) => model.split_id = v.to_string(),
                        Some(("dim", v)) if v.parse::<usize>() != Ok(vocab_size) => {
                            return Err(Error::parse(
                                path,
                                lineno,
                                format!("model dimension {v} != vocabulary size {vocab_size}"),
                            ));
                        }
                        _ => {}
                    }
                }
                continue;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            let num = |s: &str| -> Result<f64> {
                s.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::parse(path, lineno, format!("bad number '{s}'")))
            };
            match parts.as_slice() {
                ["bias", v] => {
                    model.bias = num(v)?;
                    saw_bias = true;
                }
                ["w", id, v] => {
                    let id: usize = id
                        .parse()
                        .ok()
                        .filter(|&i| i < vocab_size)
                        .ok_or_else(|| Error::parse(path, lineno, format!("bad token id '{id}'")))?;
                    model.weights[id] = num(v)?;
                }
                [] => {}
                _ => return Err(Error::parse(path, lineno, format!("unexpected line '{line}'"))),
            }
        }
        if !saw_bias {
            return Err(Error::parse(path, 1, "missing bias line"));
        }
        Ok(model)
    }
}

/// Mini-batch gradient descent on L2-regularized logistic loss.
pub fn train_classifier(
    data: &[(Sentence, Label)],
    vocab_size: usize,
    config: &ToxConfig,
    split_id: &str,
) -> Result<TrainedClassifier> {
    let has = |l: Label| data.iter().any(|(_, y)| *y == l);
    if !has(Label::Toxic) || !has(Label::NonToxic) {
        return Err(Error::Invalid(
            "classifier training data must contain both labels".into(),
        ));
    }
    let mut model = ToxicityModel::zeros(vocab_size);
    model.seed = config.seed;
    model.split_id = split_id.to_string();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut rng = rng::stream(config.seed, &[tag::TOX_SHUFFLE]);
    let batch = config.batch_size.max(1);
    let mut grad_w = vec![0.0; vocab_size];
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch) {
            grad_w.iter_mut().for_each(|g| *g = 0.0);
            let mut grad_b = 0.0;
            for &i in chunk {
                let (s, y) = &data[i];
                let err = model.nontoxic_prob(s) - y.target();
                grad_b += err;
                for &t in s.iter() {
                    if let Some(g) = grad_w.get_mut(t as usize) {
                        *g += err;
                    }
                }
            }
            let m = chunk.len() as f64;
            for (w, g) in model.weights.iter_mut().zip(&grad_w) {
                *w -= config.lr * (g / m + config.l2 * *w);
            }
            model.bias -= config.lr * grad_b / m;
        }
        let loss = model.loss(data, config.l2);
        if !loss.is_finite() {
            return Err(Error::Divergence(format!("classifier loss became {loss}")));
        }
        epoch_losses.push(loss);
    }
    Ok(TrainedClassifier {
        model,
        epoch_losses,
    })
}
