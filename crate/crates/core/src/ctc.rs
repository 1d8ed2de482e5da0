//! Connectionist temporal classification.
//!
//! Blank is class `0`; labels are `1..=V`. The loss is computed in log space
//! with an alpha/beta recursion over the blank-augmented label sequence, and
//! its gradient w.r.t. the per-frame log-probabilities comes out of the same
//! pass. [`ctc_brute_force`] enumerates every frame path and serves as the
//! reference for small instances.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::array::Array;
use crate::error::{Error, Result};
use crate::graph::{log_add, log_sum_exp, Graph, Var};
use crate::nn::Linear;
use crate::params::{Binder, Group, ParamStore};
use crate::rng::SeededRng;

pub const BLANK: usize = 0;

/// Largest `(V+1)^T` the enumeration oracle accepts.
pub const BRUTE_FORCE_LIMIT: u64 = 1_000_000;

/// A `T × (V+1)` log-probability lattice with its label sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct CtcInstance {
    log_probs: Array,
    labels: Vec<usize>,
    input_len: usize,
}

impl CtcInstance {
    pub fn new(log_probs: Array, labels: Vec<usize>, input_len: usize) -> Result<Self> {
        let (t, classes) = log_probs.dims2();
        validate_labels(&labels, classes)?;
        if input_len > t {
            return Err(Error::Shape { op: "ctc", detail: format!("input length {input_len} exceeds {t} frames") });
        }
        Ok(Self { log_probs, labels, input_len })
    }

    /// Lattice of per-frame log-softmax over `logits` (`T × (V+1)`).
    pub fn from_logits(logits: &Array, labels: Vec<usize>) -> Result<Self> {
        let (t, c) = logits.dims2();
        let mut lp = Vec::with_capacity(t * c);
        for r in 0..t {
            let row = logits.row(r);
            let lse = log_sum_exp(row);
            lp.extend(row.iter().map(|x| x - lse));
        }
        Self::new(Array::matrix(t, c, lp)?, labels, t)
    }

    pub fn log_probs(&self) -> &Array {
        &self.log_probs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn input_len(&self) -> usize {
        self.input_len
    }

    pub fn classes(&self) -> usize {
        self.log_probs.dims2().1
    }
}

fn validate_labels(labels: &[usize], classes: usize) -> Result<()> {
    if let Some(pos) = labels.iter().position(|&l| l == BLANK) {
        return Err(Error::InvalidLabel(format!("blank index at position {pos}")));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::InvalidLabel(format!("label {bad} outside {classes} classes")));
    }
    Ok(())
}

/// Frames needed for a finite loss: one per label plus a separating blank
/// between every adjacent repeat.
pub fn min_frames(labels: &[usize]) -> usize {
    labels.len() + labels.windows(2).filter(|w| w[0] == w[1]).count()
}

/// Negative log-likelihood of the labels; `+∞` when infeasible.
pub fn ctc_loss(inst: &CtcInstance) -> f64 {
    let (t, c) = inst.log_probs.dims2();
    forward_backward(inst.log_probs.data(), t, c, &inst.labels, inst.input_len, false).0
}

/// Loss and its gradient w.r.t. every lattice entry (zero past `input_len`).
pub fn ctc_loss_and_grad(inst: &CtcInstance) -> (f64, Vec<f64>) {
    let (t, c) = inst.log_probs.dims2();
    let (loss, grad) = forward_backward(inst.log_probs.data(), t, c, &inst.labels, inst.input_len, true);
    (loss, grad.unwrap_or_default())
}

/// Records the CTC loss of `lattice` (rows = frames, log-probabilities) as a
/// differentiable graph node. Rows past `input_len` are ignored.
pub fn ctc_node(g: &mut Graph, lattice: Var, labels: &[usize], input_len: usize) -> Result<Var> {
    let (t, c) = g.shape(lattice);
    validate_labels(labels, c)?;
    if input_len > t {
        return Err(Error::Shape { op: "ctc", detail: format!("input length {input_len} exceeds {t} frames") });
    }
    let (loss, grad) = forward_backward(g.value(lattice), t, c, labels, input_len, true);
    g.scalar_with_grad(lattice, loss, grad.unwrap_or_else(|| vec![0.0; t * c]))
}

fn forward_backward(lp: &[f64], _t: usize, c: usize, labels: &[usize], t_in: usize, want_grad: bool) -> (f64, Option<Vec<f64>>) {
    let ninf = f64::NEG_INFINITY;
    let total = lp.len();
    if t_in == 0 {
        let loss = if labels.is_empty() { 0.0 } else { f64::INFINITY };
        return (loss, want_grad.then(|| vec![0.0; total]));
    }
    // blank-augmented label sequence: b l1 b l2 … b
    let s_len = 2 * labels.len() + 1;
    let ext = |s: usize| if s.is_multiple_of(2) { BLANK } else { labels[s / 2] };
    let skip_ok = |s: usize| s >= 2 && ext(s) != BLANK && ext(s) != ext(s - 2);
    let at = |t: usize, k: usize| lp[t * c + k];

    let mut alpha = vec![ninf; t_in * s_len];
    alpha[0] = at(0, ext(0));
    if s_len > 1 {
        alpha[1] = at(0, ext(1));
    }
    for t in 1..t_in {
        for s in 0..s_len {
            let prev = &alpha[(t - 1) * s_len..t * s_len];
            let mut acc = prev[s];
            if s >= 1 {
                acc = log_add(acc, prev[s - 1]);
            }
            if skip_ok(s) {
                acc = log_add(acc, prev[s - 2]);
            }
            alpha[t * s_len + s] = if acc == ninf { ninf } else { acc + at(t, ext(s)) };
        }
    }
    let last = &alpha[(t_in - 1) * s_len..t_in * s_len];
    let log_p = if s_len > 1 { log_add(last[s_len - 1], last[s_len - 2]) } else { last[0] };
    if log_p == ninf || log_p.is_nan() {
        let loss = if log_p.is_nan() { f64::NAN } else { f64::INFINITY };
        return (loss, want_grad.then(|| vec![0.0; total]));
    }
    if !want_grad {
        return (-log_p, None);
    }

    // beta_excl[t][s]: log-prob of finishing from state s at frame t,
    // excluding frame t's own emission.
    let mut beta = vec![ninf; t_in * s_len];
    beta[(t_in - 1) * s_len + s_len - 1] = 0.0;
    if s_len > 1 {
        beta[(t_in - 1) * s_len + s_len - 2] = 0.0;
    }
    for t in (0..t_in - 1).rev() {
        for s in 0..s_len {
            let next = |s2: usize| {
                let b = beta[(t + 1) * s_len + s2];
                if b == ninf { ninf } else { b + at(t + 1, ext(s2)) }
            };
            let mut acc = next(s);
            if s + 1 < s_len {
                acc = log_add(acc, next(s + 1));
            }
            if s + 2 < s_len && skip_ok(s + 2) {
                acc = log_add(acc, next(s + 2));
            }
            beta[t * s_len + s] = acc;
        }
    }

    let mut grad = vec![0.0; total];
    let mut occ = vec![ninf; c];
    for t in 0..t_in {
        occ.iter_mut().for_each(|o| *o = ninf);
        for s in 0..s_len {
            let a = alpha[t * s_len + s];
            let b = beta[t * s_len + s];
            if a == ninf || b == ninf {
                continue;
            }
            let k = ext(s);
            occ[k] = log_add(occ[k], a + b);
        }
        for k in 0..c {
            if occ[k] != ninf {
                grad[t * c + k] = -libm::exp(occ[k] - log_p);
            }
        }
    }
    (-log_p, Some(grad))
}

/// Collapses repeats then removes blanks.
pub fn collapse(path: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &k in path {
        if Some(k) != prev && k != BLANK {
            out.push(k);
        }
        prev = Some(k);
    }
    out
}

/// Exhaustive path enumeration; the reference for [`ctc_loss`].
pub fn ctc_brute_force(inst: &CtcInstance) -> Result<f64> {
    let c = inst.classes();
    let t = inst.input_len;
    let count = (c as u64).checked_pow(t as u32).filter(|&n| n <= BRUTE_FORCE_LIMIT);
    let Some(count) = count else {
        return Err(Error::TooLarge(format!("{c}^{t} paths exceed {BRUTE_FORCE_LIMIT}")));
    };
    let lp = inst.log_probs.data();
    let mut path = vec![0usize; t];
    let mut matching = Vec::new();
    for n in 0..count {
        let mut rem = n;
        for slot in path.iter_mut() {
            *slot = (rem % c as u64) as usize;
            rem /= c as u64;
        }
        if collapse(&path) == inst.labels {
            matching.push(path.iter().enumerate().map(|(ti, &k)| lp[ti * c + k]).sum::<f64>());
        }
    }
    Ok(-log_sum_exp(&matching))
}

/// Per-frame argmax (lowest index on ties), collapsed.
pub fn greedy_decode(lattice: &Array) -> Vec<usize> {
    let (t, _) = lattice.dims2();
    let path: Vec<usize> = (0..t).map(|r| argmax(lattice.row(r))).collect();
    collapse(&path)
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

/// Random normalised instance for tests and the self-test suite.
pub fn random_instance(rng: &mut SeededRng, frames: usize, vocab: usize, label_len: usize) -> CtcInstance {
    let c = vocab + 1;
    let logits = Array::matrix(frames, c, rng.normal_vec(frames * c, 1.5)).expect("sized");
    let labels = (0..label_len).map(|_| 1 + rng.below(vocab)).collect();
    CtcInstance::from_logits(&logits, labels).expect("labels are in range")
}

/// Source and target CTC projections.
///
/// The source head reads FiLM-modulated features; the target head reads the
/// unmodulated adapter output, so nothing in its input path depends on the
/// conditioning parameters.
#[derive(Debug, Clone, Copy)]
pub struct CtcBranchHeads {
    pub source: Linear,
    pub target: Linear,
}

impl CtcBranchHeads {
    pub fn new(store: &mut ParamStore, width: usize, src_vocab: usize, tgt_vocab: usize, rng: &mut SeededRng) -> Result<Self> {
        Ok(Self {
            source: Linear::new(store, "ctc.source", Group::CtcHeads, width, src_vocab + 1, rng)?,
            target: Linear::new(store, "ctc.target", Group::CtcHeads, width, tgt_vocab + 1, rng)?,
        })
    }

    /// Log-probabilities of the source head over modulated frames.
    pub fn source_log_probs(&self, g: &mut Graph, p: &mut Binder, modulated: Var) -> Result<Var> {
        let logits = self.source.forward(g, p, modulated)?;
        Ok(g.log_softmax_rows(logits))
    }

    /// Log-probabilities of the target head over unmodulated frames.
    pub fn target_log_probs(&self, g: &mut Graph, p: &mut Binder, h_down: Var) -> Result<Var> {
        let logits = self.target.forward(g, p, h_down)?;
        Ok(g.log_softmax_rows(logits))
    }
}
