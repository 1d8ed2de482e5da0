//! Central-difference gradient checking.

use alloc::format;
use alloc::vec::Vec;

use crate::array::Array;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::rng::SeededRng;

/// Default finite-difference step.
pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// `max |analytic − numeric| / max(1, |analytic|)` over checked coordinates.
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub checked: Vec<usize>,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// Compares the reverse-mode gradient of a scalar function against central
/// differences at every coordinate of `x`.
///
/// `f` receives a fresh graph and a differentiable leaf holding `x` (with
/// `x`'s shape) and must return a `1×1` node.
pub fn grad_check<F>(f: F, x: &Array, h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let all: Vec<usize> = (0..x.len()).collect();
    check_at(&f, x, h, all)
}

/// Like [`grad_check`] but only at `max_coords` seeded-random coordinates.
pub fn grad_check_sampled<F>(f: F, x: &Array, h: f64, max_coords: usize, seed: u64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut idx: Vec<usize> = (0..x.len()).collect();
    if idx.len() > max_coords {
        SeededRng::derive(seed, "gradcheck-coords").shuffle(&mut idx);
        idx.truncate(max_coords);
        idx.sort_unstable();
    }
    check_at(&f, x, h, idx)
}

fn eval<F>(f: &F, x: &Array) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let leaf = g.leaf(&x.clone().with_grad(false));
    let y = f(&mut g, leaf)?;
    Ok(g.item(y))
}

fn check_at<F>(f: &F, x: &Array, h: f64, coords: Vec<usize>) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let leaf = g.leaf(&x.clone().with_grad(true));
    let y = f(&mut g, leaf)?;
    if g.shape(y) != (1, 1) {
        return Err(Error::Shape { op: "grad_check", detail: format!("function must return a scalar, got {:?}", g.shape(y)) });
    }
    let fx = g.item(y);
    if !fx.is_finite() {
        return Err(Error::NonFinite(format!("f(x) = {fx}")));
    }
    g.backward(y)?;
    let full = g.grad(leaf).map(<[f64]>::to_vec).unwrap_or_else(|| alloc::vec![0.0; x.len()]);

    let mut analytic = Vec::with_capacity(coords.len());
    let mut numeric = Vec::with_capacity(coords.len());
    let mut worst = (0.0, 0);
    let mut probe = x.clone();
    for &i in &coords {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = eval(f, &probe)?;
        probe.data_mut()[i] = orig - h;
        let down = eval(f, &probe)?;
        probe.data_mut()[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite(format!("f at coordinate {i} ± {h}")));
        }
        let num = (up - down) / (2.0 * h);
        let ana = full[i];
        let rel = (ana - num).abs() / ana.abs().max(1.0);
        if analytic.is_empty() || rel > worst.0 {
            worst = (rel, i);
        }
        analytic.push(ana);
        numeric.push(num);
    }
    Ok(GradCheckReport { max_rel_error: worst.0, worst_index: worst.1, checked: coords, analytic, numeric })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Mask;
    use alloc::vec;

    #[test]
    fn quadratic_has_exact_gradient() {
        let x = Array::from_vec(vec![1.0, 2.0, 3.0]);
        let rep = grad_check(|g, x| { let s = g.mul(x, x)?; Ok(g.sum(s)) }, &x, DEFAULT_STEP).unwrap();
        assert_eq!(rep.analytic, vec![2.0, 4.0, 6.0]);
        assert!(rep.max_rel_error < 1e-8, "{}", rep.max_rel_error);
    }

    #[test]
    fn non_finite_value_is_an_error() {
        let x = Array::from_vec(vec![f64::NAN]);
        let err = grad_check(|g, x| Ok(g.sum(x)), &x, DEFAULT_STEP).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
    }

    #[test]
    fn non_scalar_output_is_rejected() {
        let x = Array::from_vec(vec![1.0, 2.0]);
        assert!(grad_check(|_, x| Ok(x), &x, DEFAULT_STEP).is_err());
    }

    /// Scalarises an output with fixed random weights so every entry matters.
    fn project(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
        let (r, c) = g.shape(y);
        let w = g.constant(r, c, SeededRng::new(seed).normal_vec(r * c, 1.0))?;
        let p = g.mul(y, w)?;
        Ok(g.sum(p))
    }

    fn check_op(name: &str, shape: [usize; 2], op: impl Fn(&mut Graph, Var) -> Result<Var>) {
        for point in 0..10u64 {
            let mut rng = SeededRng::derive(point, name);
            let x = Array::matrix(shape[0], shape[1], rng.normal_vec(shape[0] * shape[1], 1.0)).unwrap();
            let rep = grad_check(
                |g, x| {
                    let y = op(g, x)?;
                    project(g, y, 99 + point)
                },
                &x,
                DEFAULT_STEP,
            )
            .unwrap();
            assert!(rep.max_rel_error < 1e-4, "{name} point {point}: {}", rep.max_rel_error);
        }
    }

    #[test]
    fn every_op_passes_gradient_check() {
        let other = |g: &mut Graph, r: usize, c: usize, s: u64| g.constant(r, c, SeededRng::new(s).normal_vec(r * c, 1.0)).unwrap();
        check_op("matmul_left", [3, 4], |g, x| { let b = other(g, 4, 2, 1); g.matmul(x, b) });
        check_op("matmul_right", [4, 2], |g, x| { let a = other(g, 3, 4, 2); g.matmul(a, x) });
        check_op("matmul_nt", [3, 4], |g, x| { let b = other(g, 5, 4, 3); g.matmul_nt(x, b) });
        check_op("matmul_nt_self", [3, 4], |g, x| g.matmul_nt(x, x));
        check_op("transpose", [2, 3], |g, x| Ok(g.transpose(x)));
        check_op("add_bcast_row", [1, 4], |g, x| { let a = other(g, 3, 4, 4); g.add(a, x) });
        check_op("add_bcast_col", [3, 1], |g, x| { let a = other(g, 3, 4, 5); g.add(x, a) });
        check_op("sub", [3, 4], |g, x| { let a = other(g, 1, 4, 6); g.sub(a, x) });
        check_op("mul_outer", [3, 1], |g, x| { let a = other(g, 1, 4, 7); g.mul(x, a) });
        check_op("mul_self", [3, 4], |g, x| g.mul(x, x));
        check_op("div", [2, 3], |g, x| { let b = g.softplus(x); let b = g.add_scalar(b, 0.5); let a = other(g, 2, 3, 8); g.div(a, b) });
        check_op("div_scalar", [1, 1], |g, x| { let b = g.softplus(x); let b = g.add_scalar(b, 0.1); let a = other(g, 3, 2, 9); g.div(a, b) });
        check_op("scale", [2, 3], |g, x| Ok(g.scale(x, -1.7)));
        check_op("tanh", [2, 3], |g, x| Ok(g.tanh(x)));
        check_op("clamp", [2, 3], |g, x| Ok(g.clamp(x, -0.7, 0.7)));
        check_op("sigmoid", [2, 3], |g, x| Ok(g.sigmoid(x)));
        check_op("softplus", [2, 3], |g, x| Ok(g.softplus(x)));
        check_op("gelu", [2, 3], |g, x| Ok(g.gelu(x)));
        check_op("layer_norm", [3, 5], |g, x| {
            let gain = other(g, 1, 5, 10);
            let bias = other(g, 1, 5, 11);
            g.layer_norm(x, gain, bias)
        });
        check_op("log_softmax", [3, 4], |g, x| Ok(g.log_softmax_rows(x)));
        check_op("softmax_causal", [3, 4], |g, x| Ok(g.softmax_rows(x, Mask::Causal { offset: 1 })));
        check_op("concat_split", [2, 3], |g, x| {
            let a = other(g, 2, 2, 12);
            let c = g.concat_cols(&[a, x, x])?;
            let parts = g.split_cols(c, &[4, 4])?;
            g.mul(parts[0], parts[1])
        });
        check_op("concat_rows", [2, 3], |g, x| { let a = other(g, 1, 3, 13); g.concat_rows(&[x, a, x]) });
        check_op("select_rows", [4, 2], |g, x| g.select_rows(x, &[3, 0, 3]));
        check_op("subsample", [5, 2], |g, x| g.subsample_rows(x, 2));
        check_op("gather", [4, 3], |g, x| g.gather(x, &[1, 1, 3]));
        check_op("pick", [3, 4], |g, x| { let l = g.log_softmax_rows(x); g.pick(l, &[0, 3, 1]) });
        check_op("pad_rows", [2, 3], |g, x| { let p = g.pad_rows(x, 4)?; Ok(g.tanh(p)) });
        check_op("depthwise_input", [6, 3], |g, x| { let w = other(g, 5, 3, 14); g.depthwise_conv1d(x, w) });
        check_op("depthwise_kernel", [3, 2], |g, x| { let a = other(g, 4, 2, 15); g.depthwise_conv1d(a, x) });
        check_op("mean", [2, 3], |g, x| { let s = g.mul(x, x)?; Ok(g.mean(s)) });
        check_op("mean_rows", [3, 4], |g, x| Ok(g.mean_rows(x)));
        check_op("attention", [3, 4], |g, x| {
            let k = other(g, 5, 4, 16);
            let v = other(g, 5, 2, 17);
            g.attention(x, k, v, Mask::Causal { offset: 2 })
        });
    }
}
