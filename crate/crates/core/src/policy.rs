//! Toy autoregressive policy: a single-layer gated recurrent cell with a
//! separate output projection, optional low-rank adapters on the output
//! projection and the candidate input matrix, temperature sampling, exact
//! per-token log-probabilities and hand-derived gradients.
//!
//! A prompt is `BOS toxic-tokens SEP`; the completion is the rewrite followed
//! by `EOS`. Cell equations, with `x` the token embedding:
//!
//! ```text
//! z  = sigmoid(Wz_x x + Wz_h h + bz)
//! r  = sigmoid(Wr_x x + Wr_h h + br)
//! c  = tanh(Wc_x x + Wc_h (r * h) + bc)
//! h' = (1 - z) * h + z * c
//! logits = W_out h' + b_out
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{TokenId, BOS, EOS, SEP};
use crate::error::{Error, Result};
use crate::rng::{self, tag};

pub const POLICY_HEADER: &str = "#policy v1";
pub const ADAPTER_HEADER: &str = "#adapter v1";
const INIT_RANGE: f64 = 0.08;

/// Dense row-major matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn uniform(rows: usize, cols: usize, range: f64, rng: &mut ChaCha8Rng) -> Self {
        Matrix {
            rows,
            cols,
            data: (0..rows * cols).map(|_| rng.gen_range(-range..=range)).collect(),
        }
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// `out += self * x`
    #[inline]
    pub fn gemv_acc(&self, x: &[f64], out: &mut [f64]) {
        for (o, row) in out.iter_mut().zip(self.data.chunks_exact(self.cols)) {
            *o += row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        }
    }

    /// `out += self^T * y`
    #[inline]
    pub fn gemv_t_acc(&self, y: &[f64], out: &mut [f64]) {
        for (&yi, row) in y.iter().zip(self.data.chunks_exact(self.cols)) {
            if yi != 0.0 {
                for (o, a) in out.iter_mut().zip(row) {
                    *o += yi * a;
                }
            }
        }
    }

    /// `self += a * b^T`
    #[inline]
    pub fn rank1_acc(&mut self, a: &[f64], b: &[f64]) {
        let cols = self.cols;
        for (&ai, row) in a.iter().zip(self.data.chunks_exact_mut(cols)) {
            if ai != 0.0 {
                for (r, bj) in row.iter_mut().zip(b) {
                    *r += ai * bj;
                }
            }
        }
    }

    /// `self + s * (lhs * rhs)`
    pub fn add_product(&mut self, lhs: &Matrix, rhs: &Matrix, s: f64) {
        debug_assert_eq!(lhs.cols, rhs.rows);
        for i in 0..lhs.rows {
            for k in 0..lhs.cols {
                let a = s * lhs.data[i * lhs.cols + k];
                if a == 0.0 {
                    continue;
                }
                let rrow = rhs.row(k);
                for (o, b) in self.row_mut(i).iter_mut().zip(rrow) {
                    *o += a * b;
                }
            }
        }
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PolicyDims {
    pub vocab: usize,
    pub embed: usize,
    pub hidden: usize,
}

impl PolicyDims {
    pub fn new(vocab: usize) -> Self {
        PolicyDims {
            vocab,
            embed: 32,
            hidden: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab < 4 || self.embed == 0 || self.hidden == 0 {
            return Err(Error::Config(format!("invalid policy dims {self:?}")));
        }
        Ok(())
    }
}

pub const PARAM_NAMES: [&str; 12] = [
    "embedding", "wz_x", "wr_x", "wc_x", "wz_h", "wr_h", "wc_h", "bz", "br", "bc", "w_out",
    "b_out",
];

/// Base model weights.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyParams {
    pub dims: PolicyDims,
    pub embedding: Matrix,
    pub wz_x: Matrix,
    pub wr_x: Matrix,
    pub wc_x: Matrix,
    pub wz_h: Matrix,
    pub wr_h: Matrix,
    pub wc_h: Matrix,
    pub bz: Matrix,
    pub br: Matrix,
    pub bc: Matrix,
    pub w_out: Matrix,
    pub b_out: Matrix,
}

impl PolicyParams {
    pub fn zeros(dims: PolicyDims) -> Self {
        let PolicyDims {
            vocab: v,
            embed: d,
            hidden: h,
        } = dims;
        PolicyParams {
            dims,
            embedding: Matrix::zeros(v, d),
            wz_x: Matrix::zeros(h, d),
            wr_x: Matrix::zeros(h, d),
            wc_x: Matrix::zeros(h, d),
            wz_h: Matrix::zeros(h, h),
            wr_h: Matrix::zeros(h, h),
            wc_h: Matrix::zeros(h, h),
            bz: Matrix::zeros(1, h),
            br: Matrix::zeros(1, h),
            bc: Matrix::zeros(1, h),
            w_out: Matrix::zeros(v, h),
            b_out: Matrix::zeros(1, v),
        }
    }

    pub fn tensors(&self) -> [&Matrix; 12] {
        [
            &self.embedding,
            &self.wz_x,
            &self.wr_x,
            &self.wc_x,
            &self.wz_h,
            &self.wr_h,
            &self.wc_h,
            &self.bz,
            &self.br,
            &self.bc,
            &self.w_out,
            &self.b_out,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Matrix; 12] {
        [
            &mut self.embedding,
            &mut self.wz_x,
            &mut self.wr_x,
            &mut self.wc_x,
            &mut self.wz_h,
            &mut self.wr_h,
            &mut self.wc_h,
            &mut self.bz,
            &mut self.br,
            &mut self.bc,
            &mut self.w_out,
            &mut self.b_out,
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }

    pub fn zero_(&mut self) {
        for t in self.tensors_mut() {
            t.fill(0.0);
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let d = self.dims;
        let header = format!(
            "{POLICY_HEADER} d={} h={} V={}",
            d.embed, d.hidden, d.vocab
        );
        write_tensors(path, &header, &PARAM_NAMES, &self.tensors())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, tensors) = read_tensors(path, POLICY_HEADER)?;
        let dims = PolicyDims {
            embed: header_field(path, &header, "d")?,
            hidden: header_field(path, &header, "h")?,
            vocab: header_field(path, &header, "V")?,
        };
        let mut p = PolicyParams::zeros(dims);
        assign_tensors(path, &PARAM_NAMES, p.tensors_mut(), tensors)?;
        Ok(p)
    }
}

pub fn init_params(seed: u64, dims: PolicyDims) -> Result<PolicyParams> {
    dims.validate()?;
    let mut p = PolicyParams::zeros(dims);
    let mut rng = rng::stream(seed, &[tag::POLICY_INIT]);
    for t in p.tensors_mut() {
        *t = Matrix::uniform(t.rows, t.cols, INIT_RANGE, &mut rng);
    }
    Ok(p)
}

pub const ADAPTER_NAMES: [&str; 4] = ["out_a", "out_b", "cand_a", "cand_b"];

/// Low-rank adapters: `W_out += s * out_b * out_a` and
/// `Wc_x += s * cand_b * cand_a` with `s = alpha / rank`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterParams {
    pub rank: usize,
    pub alpha: f64,
    pub out_a: Matrix,
    pub out_b: Matrix,
    pub cand_a: Matrix,
    pub cand_b: Matrix,
}

impl AdapterParams {
    /// `A` small uniform, `B` zero, so the adapted model equals the base.
    pub fn new(dims: PolicyDims, rank: usize, alpha: f64, seed: u64) -> Result<Self> {
        if rank == 0 {
            return Err(Error::Config("adapter rank must be >= 1".into()));
        }
        let mut rng = rng::stream(seed, &[tag::ADAPTER_INIT]);
        Ok(AdapterParams {
            rank,
            alpha,
            out_a: Matrix::uniform(rank, dims.hidden, 1.0 / (dims.hidden as f64).sqrt(), &mut rng),
            out_b: Matrix::zeros(dims.vocab, rank),
            cand_a: Matrix::uniform(rank, dims.embed, 1.0 / (dims.embed as f64).sqrt(), &mut rng),
            cand_b: Matrix::zeros(dims.hidden, rank),
        })
    }

    pub fn zeros_like(&self) -> Self {
        AdapterParams {
            rank: self.rank,
            alpha: self.alpha,
            out_a: Matrix::zeros(self.out_a.rows, self.out_a.cols),
            out_b: Matrix::zeros(self.out_b.rows, self.out_b.cols),
            cand_a: Matrix::zeros(self.cand_a.rows, self.cand_a.cols),
            cand_b: Matrix::zeros(self.cand_b.rows, self.cand_b.cols),
        }
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn tensors(&self) -> [&Matrix; 4] {
        [&self.out_a, &self.out_b, &self.cand_a, &self.cand_b]
    }

    pub fn tensors_mut(&mut self) -> [&mut Matrix; 4] {
        [
            &mut self.out_a,
            &mut self.out_b,
            &mut self.cand_a,
            &mut self.cand_b,
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }

    fn check(&self, dims: PolicyDims) -> Result<()> {
        let ok = self.out_a.rows == self.rank
            && self.out_a.cols == dims.hidden
            && self.out_b.rows == dims.vocab
            && self.out_b.cols == self.rank
            && self.cand_a.rows == self.rank
            && self.cand_a.cols == dims.embed
            && self.cand_b.rows == dims.hidden
            && self.cand_b.cols == self.rank;
        if ok {
            Ok(())
        } else {
            Err(Error::Invalid(format!(
                "adapter shapes do not match policy dims {dims:?}"
            )))
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = format!(
            "{ADAPTER_HEADER} d={} h={} V={} r={} alpha={:.16e}",
            self.cand_a.cols, self.out_a.cols, self.out_b.rows, self.rank, self.alpha
        );
        write_tensors(path, &header, &ADAPTER_NAMES, &self.tensors())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, tensors) = read_tensors(path, ADAPTER_HEADER)?;
        let dims = PolicyDims {
            embed: header_field(path, &header, "d")?,
            hidden: header_field(path, &header, "h")?,
            vocab: header_field(path, &header, "V")?,
        };
        let rank: usize = header_field(path, &header, "r")?;
        let alpha: f64 = header_field(path, &header, "alpha")?;
        let mut a = AdapterParams::new(dims, rank, alpha, 0)?.zeros_like();
        assign_tensors(path, &ADAPTER_NAMES, a.tensors_mut(), tensors)?;
        Ok(a)
    }
}

fn write_tensors(path: &Path, header: &str, names: &[&str], tensors: &[&Matrix]) -> Result<()> {
    let mut out = String::new();
    let _ = writeln!(out, "{header}");
    for (name, t) in names.iter().zip(tensors) {
        let _ = writeln!(out, "tensor {name} {} {}", t.rows, t.cols);
        for r in 0..t.rows {
            let row: Vec<String> = t.row(r).iter().map(|v| format!("{v:.16e}")).collect();
            let _ = writeln!(out, "{}", row.join(" "));
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn header_field<T: std::str::FromStr>(path: &Path, header: &str, key: &str) -> Result<T> {
    header
        .split_whitespace()
        .find_map(|kv| kv.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::parse(path, 1, format!("header lacks a valid '{key}=' field")))
}

fn read_tensors(path: &Path, magic: &str) -> Result<(String, Vec<(String, Matrix)>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let header = match lines.next() {
        Some((_, h)) if h.starts_with(magic) => h.to_string(),
        _ => return Err(Error::parse(path, 1, format!("expected '{magic}' header"))),
    };
    let mut tensors = Vec::new();
    while let Some((lineno, line)) = lines.next() {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        let (name, rows, cols) = match parts.as_slice() {
            ["tensor", name, r, c] => {
                let r: usize = r
                    .parse()
                    .map_err(|_| Error::parse(path, lineno, "bad row count"))?;
                let c: usize = c
                    .parse()
                    .map_err(|_| Error::parse(path, lineno, "bad column count"))?;
                (name.to_string(), r, c)
            }
            _ => return Err(Error::parse(path, lineno, format!("expected tensor line, got '{line}'"))),
        };
        let mut m = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let (ln, row) = lines
                .next()
                .ok_or_else(|| Error::parse(path, lineno, format!("tensor {name} truncated")))?;
            let vals: Vec<f64> = row
                .split_whitespace()
                .map(|v| v.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::parse(path, ln, "bad float"))?;
            if vals.len() != cols {
                return Err(Error::parse(
                    path,
                    ln,
                    format!("expected {cols} values, found {}", vals.len()),
                ));
            }
            m.row_mut(r).copy_from_slice(&vals);
        }
        tensors.push((name, m));
    }
    Ok((header, tensors))
}

fn assign_tensors<const N: usize>(
    path: &Path,
    names: &[&str; N],
    targets: [&mut Matrix; N],
    tensors: Vec<(String, Matrix)>,
) -> Result<()> {
    let mut targets: Vec<Option<&mut Matrix>> = targets.into_iter().map(Some).collect();
    for (name, m) in tensors {
        let i = names
            .iter()
            .position(|n| *n == name)
            .ok_or_else(|| Error::parse(path, 1, format!("unknown tensor '{name}'")))?;
        let slot = targets[i]
            .take()
            .ok_or_else(|| Error::parse(path, 1, format!("duplicate tensor '{name}'")))?;
        if (slot.rows, slot.cols) != (m.rows, m.cols) {
            return Err(Error::parse(
                path,
                1,
                format!(
                    "tensor '{name}' is {}x{}, expected {}x{}",
                    m.rows, m.cols, slot.rows, slot.cols
                ),
            ));
        }
        *slot = m;
    }
    if let Some(i) = targets.iter().position(|t| t.is_some()) {
        return Err(Error::parse(path, 1, format!("missing tensor '{}'", names[i])));
    }
    Ok(())
}

pub fn make_prompt(source: &[TokenId]) -> Vec<TokenId> {
    let mut p = Vec::with_capacity(source.len() + 2);
    p.push(BOS);
    p.extend_from_slice(source);
    p.push(SEP);
    p
}

/// Completion tokens before the first EOS.
pub fn completion_text(completion: &[TokenId]) -> &[TokenId] {
    let end = completion
        .iter()
        .position(|&t| t == EOS)
        .unwrap_or(completion.len());
    &completion[..end]
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceRecord {
    pub prompt: Vec<TokenId>,
    pub completion: Vec<TokenId>,
    /// Untempered per-token log-probabilities of `completion`.
    pub logprobs: Vec<f64>,
}

impl SequenceRecord {
    pub fn output(&self) -> &[TokenId] {
        completion_text(&self.completion)
    }

    pub fn total_logprob(&self) -> f64 {
        self.logprobs.iter().sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Decoding {
    /// Argmax decoding, the zero-temperature limit.
    Greedy,
    Sample { temperature: f64 },
}

/// Which parameters receive gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trainable {
    Base,
    Adapter,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// In-place log-softmax; returns nothing, `v` holds log-probabilities.
pub fn log_softmax_in_place(v: &mut [f64]) {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    v.iter_mut().for_each(|x| *x -= lse);
}

/// Forward/backward trace of one teacher-forced sequence.
pub struct Trace {
    inputs: Vec<TokenId>,
    targets: Vec<TokenId>,
    prompt_len: usize,
    /// Hidden states, `(T + 1) x h`; row 0 is the initial state.
    hs: Vec<f64>,
    z: Vec<f64>,
    r: Vec<f64>,
    c: Vec<f64>,
    /// Softmax probabilities at completion positions, `L x V`.
    probs: Vec<f64>,
    logprobs: Vec<f64>,
}

impl Trace {
    pub fn logprobs(&self) -> &[f64] {
        &self.logprobs
    }
}

/// A policy with adapters merged into its weights, ready for inference and
/// gradient computation.
#[derive(Clone, Debug)]
pub struct Network {
    p: PolicyParams,
}

impl Network {
    pub fn new(params: &PolicyParams, adapter: Option<&AdapterParams>) -> Result<Self> {
        let mut p = params.clone();
        if let Some(a) = adapter {
            a.check(params.dims)?;
            let s = a.scale();
            p.w_out.add_product(&a.out_b, &a.out_a, s);
            p.wc_x.add_product(&a.cand_b, &a.cand_a, s);
        }
        Ok(Network { p })
    }

    pub fn dims(&self) -> PolicyDims {
        self.p.dims
    }

    /// Effective (merged) weights.
    pub fn merged(&self) -> &PolicyParams {
        &self.p
    }

    fn check_ids(&self, ids: &[TokenId]) -> Result<()> {
        match ids.iter().find(|&&t| t as usize >= self.p.dims.vocab) {
            Some(t) => Err(Error::Invalid(format!(
                "token id {t} out of range for vocabulary {}",
                self.p.dims.vocab
            ))),
            None => Ok(()),
        }
    }

    #[inline]
    fn cell(&self, token: TokenId, h: &[f64], z: &mut [f64], r: &mut [f64], c: &mut [f64], out: &mut [f64]) {
        let p = &self.p;
        let x = p.embedding.row(token as usize);
        z.copy_from_slice(&p.bz.data);
        p.wz_x.gemv_acc(x, z);
        p.wz_h.gemv_acc(h, z);
        r.copy_from_slice(&p.br.data);
        p.wr_x.gemv_acc(x, r);
        p.wr_h.gemv_acc(h, r);
        for v in z.iter_mut() {
            *v = sigmoid(*v);
        }
        for v in r.iter_mut() {
            *v = sigmoid(*v);
        }
        let rh: Vec<f64> = r.iter().zip(h).map(|(a, b)| a * b).collect();
        c.copy_from_slice(&p.bc.data);
        p.wc_x.gemv_acc(x, c);
        p.wc_h.gemv_acc(&rh, c);
        for v in c.iter_mut() {
            *v = v.tanh();
        }
        for i in 0..out.len() {
            out[i] = (1.0 - z[i]) * h[i] + z[i] * c[i];
        }
    }

    fn step(&self, token: TokenId, h: &[f64]) -> Vec<f64> {
        let n = self.p.dims.hidden;
        let (mut z, mut r, mut c, mut out) = (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
        self.cell(token, h, &mut z, &mut r, &mut c, &mut out);
        out
    }

    fn logits_into(&self, h: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.p.b_out.data);
        self.p.w_out.gemv_acc(h, out);
    }

    pub fn logits(&self, h: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.p.dims.vocab];
        self.logits_into(h, &mut out);
        out
    }

    /// Hidden state after consuming `tokens` from the zero state.
    pub fn encode(&self, tokens: &[TokenId]) -> Result<Vec<f64>> {
        self.check_ids(tokens)?;
        let mut h = vec![0.0; self.p.dims.hidden];
        for &t in tokens {
            h = self.step(t, &h);
        }
        Ok(h)
    }

    /// Row `t` holds the next-token logits after consuming `prefix[..=t]`.
    pub fn forward_logits(&self, prefix: &[TokenId]) -> Result<Vec<Vec<f64>>> {
        if prefix.is_empty() {
            return Err(Error::Invalid("empty prefix".into()));
        }
        self.check_ids(prefix)?;
        let mut h = vec![0.0; self.p.dims.hidden];
        let mut rows = Vec::with_capacity(prefix.len());
        for &t in prefix {
            h = self.step(t, &h);
            rows.push(self.logits(&h));
        }
        Ok(rows)
    }

    /// Teacher-forced forward pass keeping everything the backward pass needs.
    pub fn trace(&self, prompt: &[TokenId], completion: &[TokenId]) -> Result<Trace> {
        if prompt.is_empty() {
            return Err(Error::Invalid("empty prompt".into()));
        }
        self.check_ids(prompt)?;
        self.check_ids(completion)?;
        let n = self.p.dims.hidden;
        let v = self.p.dims.vocab;
        let mut inputs = prompt.to_vec();
        if completion.len() > 1 {
            inputs.extend_from_slice(&completion[..completion.len() - 1]);
        }
        let steps = inputs.len();
        let mut tr = Trace {
            targets: completion.to_vec(),
            prompt_len: prompt.len(),
            hs: vec![0.0; (steps + 1) * n],
            z: vec![0.0; steps * n],
            r: vec![0.0; steps * n],
            c: vec![0.0; steps * n],
            probs: vec![0.0; completion.len() * v],
            logprobs: Vec::with_capacity(completion.len()),
            inputs,
        };
        for t in 0..steps {
            let (prev, next) = tr.hs.split_at_mut((t + 1) * n);
            self.cell(
                tr.inputs[t],
                &prev[t * n..],
                &mut tr.z[t * n..(t + 1) * n],
                &mut tr.r[t * n..(t + 1) * n],
                &mut tr.c[t * n..(t + 1) * n],
                &mut next[..n],
            );
        }
        for (j, &target) in completion.iter().enumerate() {
            let t = tr.prompt_len - 1 + j;
            let h = &tr.hs[(t + 1) * n..(t + 2) * n];
            let row = &mut tr.probs[j * v..(j + 1) * v];
            self.logits_into(h, row);
            log_softmax_in_place(row);
            tr.logprobs.push(row[target as usize]);
            row.iter_mut().for_each(|x| *x = x.exp());
        }
        Ok(tr)
    }

    pub fn logprobs(&self, prompt: &[TokenId], completion: &[TokenId]) -> Result<Vec<f64>> {
        Ok(self.trace(prompt, completion)?.logprobs)
    }

    /// Accumulates into `grad` the gradient of `sum_t weights[t] * logprob_t`
    /// with respect to the merged weights.
    pub fn backward(&self, tr: &Trace, weights: &[f64], grad: &mut PolicyParams) {
        assert_eq!(weights.len(), tr.targets.len(), "one weight per completion token");
        let p = &self.p;
        let n = p.dims.hidden;
        let v = p.dims.vocab;
        let steps = tr.inputs.len();
        // dL/dh_t for t = 1..=steps, filled from the output layer.
        let mut dh_out = vec![0.0; (steps + 1) * n];
        let mut dlogits = vec![0.0; v];
        for (j, &target) in tr.targets.iter().enumerate() {
            let w = weights[j];
            if w == 0.0 {
                continue;
            }
            let t = tr.prompt_len - 1 + j;
            let h = &tr.hs[(t + 1) * n..(t + 2) * n];
            let probs = &tr.probs[j * v..(j + 1) * v];
            for (d, &pr) in dlogits.iter_mut().zip(probs) {
                *d = -w * pr;
            }
            dlogits[target as usize] += w;
            grad.w_out.rank1_acc(&dlogits, h);
            for (b, d) in grad.b_out.data.iter_mut().zip(&dlogits) {
                *b += d;
            }
            p.w_out.gemv_t_acc(&dlogits, &mut dh_out[(t + 1) * n..(t + 2) * n]);
        }

        let mut dh = vec![0.0; n];
        let mut dz = vec![0.0; n];
        let mut dr = vec![0.0; n];
        let mut dc = vec![0.0; n];
        let mut drh = vec![0.0; n];
        let mut rh = vec![0.0; n];
        let mut dx = vec![0.0; p.dims.embed];
        for t in (0..steps).rev() {
            for (a, b) in dh.iter_mut().zip(&dh_out[(t + 1) * n..(t + 2) * n]) {
                *a += b;
            }
            if dh.iter().all(|&x| x == 0.0) {
                continue;
            }
            let hp = &tr.hs[t * n..(t + 1) * n];
            let z = &tr.z[t * n..(t + 1) * n];
            let r = &tr.r[t * n..(t + 1) * n];
            let c = &tr.c[t * n..(t + 1) * n];
            let x = p.embedding.row(tr.inputs[t] as usize);
            let mut dh_prev = vec![0.0; n];
            for i in 0..n {
                let g = dh[i];
                dh_prev[i] = g * (1.0 - z[i]);
                dz[i] = g * (c[i] - hp[i]) * z[i] * (1.0 - z[i]);
                dc[i] = g * z[i] * (1.0 - c[i] * c[i]);
                rh[i] = r[i] * hp[i];
            }
            grad.wc_x.rank1_acc(&dc, x);
            grad.wc_h.rank1_acc(&dc, &rh);
            for (b, d) in grad.bc.data.iter_mut().zip(&dc) {
                *b += d;
            }
            drh.iter_mut().for_each(|x| *x = 0.0);
            p.wc_h.gemv_t_acc(&dc, &mut drh);
            for i in 0..n {
                dh_prev[i] += drh[i] * r[i];
                dr[i] = drh[i] * hp[i] * r[i] * (1.0 - r[i]);
            }
            grad.wr_x.rank1_acc(&dr, x);
            grad.wr_h.rank1_acc(&dr, hp);
            for (b, d) in grad.br.data.iter_mut().zip(&dr) {
                *b += d;
            }
            grad.wz_x.rank1_acc(&dz, x);
            grad.wz_h.rank1_acc(&dz, hp);
            for (b, d) in grad.bz.data.iter_mut().zip(&dz) {
                *b += d;
            }
            p.wr_h.gemv_t_acc(&dr, &mut dh_prev);
            p.wz_h.gemv_t_acc(&dz, &mut dh_prev);
            dx.iter_mut().for_each(|x| *x = 0.0);
            p.wz_x.gemv_t_acc(&dz, &mut dx);
            p.wr_x.gemv_t_acc(&dr, &mut dx);
            p.wc_x.gemv_t_acc(&dc, &mut dx);
            for (e, d) in grad
                .embedding
                .row_mut(tr.inputs[t] as usize)
                .iter_mut()
                .zip(&dx)
            {
                *e += d;
            }
            dh = dh_prev;
        }
    }

    /// Samples `k` completions; completion `j` uses the RNG stream
    /// `(rng_seed, j)`. Log-probabilities are always untempered.
    pub fn sample(
        &self,
        prompt: &[TokenId],
        k: usize,
        decoding: Decoding,
        max_len: usize,
        rng_seed: u64,
    ) -> Result<Vec<SequenceRecord>> {
        if k == 0 {
            return Err(Error::Invalid("k must be >= 1".into()));
        }
        if let Decoding::Sample { temperature } = decoding {
            if !(temperature > 0.0) {
                return Err(Error::Invalid(format!("temperature must be > 0, got {temperature}")));
            }
        }
        if prompt.is_empty() {
            return Err(Error::Invalid("empty prompt".into()));
        }
        let max_len = max_len.max(1);
        // All prompt tokens except the last are shared; the last one is fed
        // inside the loop like any generated token.
        let h0 = self.encode(&prompt[..prompt.len() - 1])?;
        let last = prompt[prompt.len() - 1];
        let v = self.p.dims.vocab;
        let mut scratch = vec![0.0; v];
        let mut records = Vec::with_capacity(k);
        for j in 0..k {
            let mut rng = rng::stream(rng_seed, &[tag::SAMPLE, j as u64]);
            let mut h = self.step(last, &h0);
            let mut completion = Vec::new();
            let mut logprobs = Vec::new();
            loop {
                self.logits_into(&h, &mut scratch);
                let token = match decoding {
                    Decoding::Greedy => argmax(&scratch),
                    Decoding::Sample { temperature } => {
                        sample_tempered(&scratch, temperature, &mut rng)
                    }
                };
                log_softmax_in_place(&mut scratch);
                logprobs.push(scratch[token]);
                let token = token as TokenId;
                completion.push(token);
                if token == EOS || completion.len() >= max_len {
                    break;
                }
                h = self.step(token, &h);
            }
            records.push(SequenceRecord {
                prompt: prompt.to_vec(),
                completion,
                logprobs,
            });
        }
        Ok(records)
    }

    /// Greedy rewrite of a source sentence (tokens before EOS).
    pub fn greedy_rewrite(&self, source: &[TokenId], max_len: usize) -> Result<Vec<TokenId>> {
        let rec = self
            .sample(&make_prompt(source), 1, Decoding::Greedy, max_len, 0)?
            .pop()
            .expect("one record");
        Ok(rec.output().to_vec())
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn sample_tempered(logits: &[f64], temperature: f64, rng: &mut ChaCha8Rng) -> usize {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logits
        .iter()
        .map(|&l| ((l - m) / temperature).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        u -= w;
        if u < 0.0 {
            return i;
        }
    }
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

/// Gradient with the shape of the trainable parameters. Under
/// [`Trainable::Adapter`] the base part is all zeros.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyGrad {
    pub base: PolicyParams,
    pub adapter: Option<AdapterParams>,
}

/// Maps a gradient with respect to merged weights onto adapter factors.
pub fn project_to_adapter(adapter: &AdapterParams, merged_grad: &PolicyParams) -> AdapterParams {
    let s = adapter.scale();
    let mut g = adapter.zeros_like();
    // dA = s * B^T G, dB = s * G A^T
    g.out_a.add_product(&adapter.out_b.transpose(), &merged_grad.w_out, s);
    g.out_b.add_product(&merged_grad.w_out, &adapter.out_a.transpose(), s);
    g.cand_a.add_product(&adapter.cand_b.transpose(), &merged_grad.wc_x, s);
    g.cand_b.add_product(&merged_grad.wc_x, &adapter.cand_a.transpose(), s);
    g
}

pub fn forward_logits(
    params: &PolicyParams,
    adapter: Option<&AdapterParams>,
    prefix: &[TokenId],
) -> Result<Vec<Vec<f64>>> {
    Network::new(params, adapter)?.forward_logits(prefix)
}

pub fn sample_completions(
    params: &PolicyParams,
    adapter: Option<&AdapterParams>,
    prompt: &[TokenId],
    k: usize,
    decoding: Decoding,
    max_len: usize,
    rng_seed: u64,
) -> Result<Vec<SequenceRecord>> {
    Network::new(params, adapter)?.sample(prompt, k, decoding, max_len, rng_seed)
}

pub fn logprob(
    params: &PolicyParams,
    adapter: Option<&AdapterParams>,
    prompt: &[TokenId],
    completion: &[TokenId],
) -> Result<Vec<f64>> {
    Network::new(params, adapter)?.logprobs(prompt, completion)
}

/// Exact gradient of `sum_t token_weights[t] * log pi(o_t | ...)`.
pub fn grad_logprob(
    params: &PolicyParams,
    adapter: Option<&AdapterParams>,
    prompt: &[TokenId],
    completion: &[TokenId],
    token_weights: &[f64],
    trainable: Trainable,
) -> Result<PolicyGrad> {
    if token_weights.len() != completion.len() {
        return Err(Error::Invalid(format!(
            "{} token weights for a completion of length {}",
            token_weights.len(),
            completion.len()
        )));
    }
    let net = Network::new(params, adapter)?;
    let tr = net.trace(prompt, completion)?;
    let mut merged = PolicyParams::zeros(params.dims);
    net.backward(&tr, token_weights, &mut merged);
    Ok(match (trainable, adapter) {
        (Trainable::Adapter, Some(a)) => PolicyGrad {
            base: PolicyParams::zeros(params.dims),
            adapter: Some(project_to_adapter(a, &merged)),
        },
        (Trainable::Adapter, None) => {
            return Err(Error::Invalid("adapter training requested without an adapter".into()))
        }
        (Trainable::Base, a) => PolicyGrad {
            adapter: a.map(AdapterParams::zeros_like),
            base: merged,
        },
    })
}

/// Frozen copy of a policy, used as the reference model.
#[derive(Clone, Debug)]
pub struct ReferencePolicy {
    params: PolicyParams,
    adapter: Option<AdapterParams>,
    net: Network,
}

impl ReferencePolicy {
    pub fn params(&self) -> &PolicyParams {
        &self.params
    }

    pub fn adapter(&self) -> Option<&AdapterParams> {
        self.adapter.as_ref()
    }

    pub fn network(&self) -> &Network {
        &self.net
    }
}

pub fn snapshot(params: &PolicyParams, adapter: Option<&AdapterParams>) -> Result<ReferencePolicy> {
    Ok(ReferencePolicy {
        params: params.clone(),
        adapter: adapter.cloned(),
        net: Network::new(params, adapter)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> PolicyDims {
        PolicyDims {
            vocab: 12,
            embed: 8,
            hidden: 12,
        }
    }

    fn perturbed_adapter(dims: PolicyDims, seed: u64) -> AdapterParams {
        let mut a = AdapterParams::new(dims, 3, 6.0, seed).unwrap();
        let mut rng = rng::stream(seed, &[1234]);
        a.out_b = Matrix::uniform(a.out_b.rows, a.out_b.cols, 0.3, &mut rng);
        a.cand_b = Matrix::uniform(a.cand_b.rows, a.cand_b.cols, 0.3, &mut rng);
        a
    }

    #[test]
    fn init_is_deterministic_and_finite() {
        let a = init_params(5, tiny()).unwrap();
        assert_eq!(a, init_params(5, tiny()).unwrap());
        assert!(a.is_finite());
        assert!(a.tensors().iter().all(|t| t.data.iter().all(|x| x.abs() <= INIT_RANGE)));
    }

    #[test]
    fn fresh_adapter_is_identity() {
        let p = init_params(5, tiny()).unwrap();
        let a = AdapterParams::new(p.dims, 4, 8.0, 3).unwrap();
        let prefix = [BOS, 4, 5, 6, SEP, 7];
        let base = forward_logits(&p, None, &prefix).unwrap();
        let adapted = forward_logits(&p, Some(&a), &prefix).unwrap();
        for (x, y) in base.iter().flatten().zip(adapted.iter().flatten()) {
            assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn nonzero_adapter_changes_logits() {
        let p = init_params(5, tiny()).unwrap();
        let a = perturbed_adapter(p.dims, 2);
        let prefix = [BOS, 4, 5, SEP];
        let base = forward_logits(&p, None, &prefix).unwrap();
        let adapted = forward_logits(&p, Some(&a), &prefix).unwrap();
        assert!(base.iter().flatten().zip(adapted.iter().flatten()).any(|(x, y)| x != y));
    }

    #[test]
    fn logits_are_causal() {
        let p = init_params(5, tiny()).unwrap();
        let short = forward_logits(&p, None, &[BOS]).unwrap();
        let long = forward_logits(&p, None, &[BOS, 7]).unwrap();
        assert_eq!(short[0], long[0]);
    }

    #[test]
    fn out_of_range_ids_are_rejected() {
        let p = init_params(5, tiny()).unwrap();
        assert!(forward_logits(&p, None, &[BOS, 99]).is_err());
        assert!(forward_logits(&p, None, &[]).is_err());
    }

    #[test]
    fn zero_model_is_uniform() {
        let p = PolicyParams::zeros(tiny());
        let rows = forward_logits(&p, None, &[BOS, 5, SEP]).unwrap();
        for row in rows {
            let mut lp = row.clone();
            log_softmax_in_place(&mut lp);
            for x in lp {
                assert!((x.exp() - 1.0 / 12.0).abs() < 1e-15);
            }
        }
        let lp = logprob(&p, None, &[BOS, 5, SEP], &[6, 7, EOS]).unwrap();
        let total: f64 = lp.iter().sum();
        assert!((total + 3.0 * (12f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let p = init_params(9, tiny()).unwrap();
        let net = Network::new(&p, None).unwrap();
        let tr = net.trace(&[BOS, 3, 4, SEP], &[5, 6, EOS]).unwrap();
        for row in tr.probs.chunks(12) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn greedy_completions_are_identical() {
        let p = init_params(9, tiny()).unwrap();
        let recs = sample_completions(&p, None, &[BOS, 3, SEP], 4, Decoding::Greedy, 6, 1).unwrap();
        assert!(recs.iter().all(|r| r.completion == recs[0].completion));
    }

    #[test]
    fn sampling_is_seeded_and_consistent() {
        let p = init_params(9, tiny()).unwrap();
        let a = perturbed_adapter(p.dims, 4);
        let dec = Decoding::Sample { temperature: 2.0 };
        let r1 = sample_completions(&p, Some(&a), &[BOS, 3, 4, SEP], 4, dec, 8, 77).unwrap();
        let r2 = sample_completions(&p, Some(&a), &[BOS, 3, 4, SEP], 4, dec, 8, 77).unwrap();
        assert_eq!(r1, r2);
        for r in &r1 {
            assert!(!r.completion.is_empty() && r.completion.len() <= 8);
            assert_eq!(r.logprobs.len(), r.completion.len());
            assert!(r.logprobs.iter().all(|&l| l <= 0.0));
            let again = logprob(&p, Some(&a), &r.prompt, &r.completion).unwrap();
            for (x, y) in again.iter().zip(&r.logprobs) {
                assert!((x - y).abs() < 1e-9);
            }
        }
        assert!(sample_completions(&p, None, &[BOS, SEP], 0, dec, 8, 1).is_err());
        let bad = Decoding::Sample { temperature: 0.0 };
        assert!(sample_completions(&p, None, &[BOS, SEP], 1, bad, 8, 1).is_err());
    }

    /// Every completion of length <= max_len either ends in EOS or is cut at
    /// max_len; enumerate them all.
    fn enumerate_completions(vocab: usize, max_len: usize) -> Vec<Vec<TokenId>> {
        let mut out = Vec::new();
        let mut frontier: Vec<Vec<TokenId>> = vec![vec![]];
        for len in 1..=max_len {
            let mut next = Vec::new();
            for prefix in &frontier {
                for t in 0..vocab as TokenId {
                    let mut s = prefix.clone();
                    s.push(t);
                    if t == EOS || len == max_len {
                        out.push(s);
                    } else {
                        next.push(s);
                    }
                }
            }
            frontier = next;
        }
        out
    }

    #[test]
    fn enumerated_probabilities_sum_to_one() {
        let dims = PolicyDims {
            vocab: 4,
            embed: 3,
            hidden: 5,
        };
        let mut p = init_params(3, dims).unwrap();
        // Sharpen the output layer so the distribution is far from uniform.
        p.w_out.data.iter_mut().for_each(|w| *w *= 20.0);
        let net = Network::new(&p, None).unwrap();
        let prompt = [BOS, 3, SEP];
        let mut total = 0.0;
        for c in enumerate_completions(4, 3) {
            let lp: f64 = net.logprobs(&prompt, &c).unwrap().iter().sum();
            let mut direct = 1.0;
            let rows = net
                .forward_logits(&[&prompt[..], &c[..c.len() - 1]].concat())
                .unwrap();
            for (j, &t) in c.iter().enumerate() {
                let mut row = rows[prompt.len() - 1 + j].clone();
                log_softmax_in_place(&mut row);
                direct *= row[t as usize].exp();
            }
            assert!((lp.exp() - direct).abs() < 1e-9);
            total += lp.exp();
        }
        assert!((total - 1.0).abs() < 1e-6, "{total}");
    }

    fn objective(
        p: &PolicyParams,
        a: Option<&AdapterParams>,
        prompt: &[TokenId],
        completion: &[TokenId],
        w: &[f64],
    ) -> f64 {
        logprob(p, a, prompt, completion)
            .unwrap()
            .iter()
            .zip(w)
            .map(|(l, w)| l * w)
            .sum()
    }

    fn rel_err(a: f64, n: f64) -> f64 {
        (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
    }

    #[test]
    fn base_gradient_matches_finite_differences() {
        let prompt = [BOS, 4, 7, 5, SEP];
        let completion = [6, 9, 3, EOS];
        let w = [0.7, -1.3, 0.4, 1.1];
        let h = 1e-4;
        let mut worst: f64 = 0.0;
        for draw in 0..3 {
            let p = init_params(100 + draw, tiny()).unwrap();
            let g = grad_logprob(&p, None, &prompt, &completion, &w, Trainable::Base).unwrap();
            let mut q = p.clone();
            for ti in 0..PARAM_NAMES.len() {
                for k in 0..q.tensors()[ti].data.len() {
                    let orig = q.tensors()[ti].data[k];
                    q.tensors_mut()[ti].data[k] = orig + h;
                    let fp = objective(&q, None, &prompt, &completion, &w);
                    q.tensors_mut()[ti].data[k] = orig - h;
                    let fm = objective(&q, None, &prompt, &completion, &w);
                    q.tensors_mut()[ti].data[k] = orig;
                    let num = (fp - fm) / (2.0 * h);
                    worst = worst.max(rel_err(g.base.tensors()[ti].data[k], num));
                }
            }
        }
        assert!(worst < 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn adapter_gradient_matches_finite_differences() {
        let prompt = [BOS, 8, 5, SEP];
        let completion = [3, 10, EOS];
        let w = [1.0, -0.5, 0.8];
        let h = 1e-4;
        let p = init_params(7, tiny()).unwrap();
        let a = perturbed_adapter(p.dims, 5);
        let g = grad_logprob(&p, Some(&a), &prompt, &completion, &w, Trainable::Adapter).unwrap();
        assert!(g.base.tensors().iter().all(|t| t.data.iter().all(|&x| x == 0.0)));
        let ga = g.adapter.unwrap();
        let mut q = a.clone();
        let mut worst: f64 = 0.0;
        for ti in 0..ADAPTER_NAMES.len() {
            for k in 0..q.tensors()[ti].data.len() {
                let orig = q.tensors()[ti].data[k];
                q.tensors_mut()[ti].data[k] = orig + h;
                let fp = objective(&p, Some(&q), &prompt, &completion, &w);
                q.tensors_mut()[ti].data[k] = orig - h;
                let fm = objective(&p, Some(&q), &prompt, &completion, &w);
                q.tensors_mut()[ti].data[k] = orig;
                worst = worst.max(rel_err(ga.tensors()[ti].data[k], (fp - fm) / (2.0 * h)));
            }
        }
        assert!(worst < 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn zero_weights_give_zero_gradient() {
        let p = init_params(7, tiny()).unwrap();
        let g = grad_logprob(&p, None, &[BOS, 4, SEP], &[5, EOS], &[0.0, 0.0], Trainable::Base)
            .unwrap();
        assert!(g.base.tensors().iter().all(|t| t.data.iter().all(|&x| x == 0.0)));
        assert!(grad_logprob(&p, None, &[BOS, SEP], &[5, EOS], &[1.0], Trainable::Base).is_err());
    }

    #[test]
    fn snapshot_is_immutable() {
        let p = init_params(7, tiny()).unwrap();
        let mut a = perturbed_adapter(p.dims, 1);
        let snap = snapshot(&p, Some(&a)).unwrap();
        let before = snap.network().forward_logits(&[BOS, 4, SEP]).unwrap();
        a.out_b.fill(5.0);
        let after = snap.network().forward_logits(&[BOS, 4, SEP]).unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn parameter_files_round_trip_bit_exactly() {
        let p = init_params(21, tiny()).unwrap();
        let a = perturbed_adapter(p.dims, 3);
        let dir = tempfile::tempdir().unwrap();
        let pp = dir.path().join("policy.txt");
        let ap = dir.path().join("adapter.txt");
        p.save(&pp).unwrap();
        a.save(&ap).unwrap();
        let text = fs::read_to_string(&pp).unwrap();
        assert!(text.starts_with("#policy v1 d=8 h=12 V=12\n"));
        assert!(fs::read_to_string(&ap).unwrap().starts_with("#adapter v1 "));
        assert_eq!(PolicyParams::load(&pp).unwrap(), p);
        assert_eq!(AdapterParams::load(&ap).unwrap(), a);
        assert!(PolicyParams::load(&ap).is_err());
    }
}
