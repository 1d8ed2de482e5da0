//! Small layer building blocks over [`ParamStore`] entries.

use alloc::format;

use crate::array::Array;
use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::{Binder, Group, ParamId, ParamStore};
use crate::rng::SeededRng;

/// `x·W + b`, `W: in×out`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    /// Weights `N(0, 1/fan_in)`, zero bias.
    pub fn new(store: &mut ParamStore, name: &str, group: Group, fan_in: usize, fan_out: usize, rng: &mut SeededRng) -> Result<Self> {
        let std = 1.0 / libm::sqrt(fan_in as f64);
        Self::with_std(store, name, group, fan_in, fan_out, std, rng)
    }

    pub fn with_std(
        store: &mut ParamStore,
        name: &str,
        group: Group,
        fan_in: usize,
        fan_out: usize,
        std: f64,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        let w = store.add(&format!("{name}.w"), group, Array::randn(&[fan_in, fan_out], std, rng))?;
        let b = store.add(&format!("{name}.b"), group, Array::zeros(&[1, fan_out]))?;
        Ok(Self { w, b, fan_in, fan_out })
    }

    pub fn forward(&self, g: &mut Graph, p: &mut Binder, x: Var) -> Result<Var> {
        let w = p.var(g, self.w);
        let b = p.var(g, self.b);
        g.affine(x, w, b)
    }
}

/// Layer normalisation with learnable gain (init 1) and bias (init 0).
#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, group: Group, width: usize) -> Result<Self> {
        let gain = store.add(&format!("{name}.gain"), group, Array::filled(&[1, width], 1.0))?;
        let bias = store.add(&format!("{name}.bias"), group, Array::zeros(&[1, width]))?;
        Ok(Self { gain, bias })
    }

    pub fn forward(&self, g: &mut Graph, p: &mut Binder, x: Var) -> Result<Var> {
        let gain = p.var(g, self.gain);
        let bias = p.var(g, self.bias);
        g.layer_norm(x, gain, bias)
    }
}

/// Two affine layers with GELU between them.
#[derive(Debug, Clone, Copy)]
pub struct Mlp {
    pub hidden: Linear,
    pub out: Linear,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, group: Group, dims: [usize; 3], rng: &mut SeededRng) -> Result<Self> {
        Ok(Self {
            hidden: Linear::new(store, &format!("{name}.0"), group, dims[0], dims[1], rng)?,
            out: Linear::new(store, &format!("{name}.1"), group, dims[1], dims[2], rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, p: &mut Binder, x: Var) -> Result<Var> {
        let h = self.hidden.forward(g, p, x)?;
        let h = g.gelu(h);
        self.out.forward(g, p, h)
    }
}

/// Sinusoidal position code for `rows` positions starting at `start`.
pub fn sinusoidal(start: usize, rows: usize, width: usize) -> alloc::vec::Vec<f64> {
    let mut out = alloc::vec::Vec::with_capacity(rows * width);
    for pos in start..start + rows {
        for i in 0..width {
            let rate = libm::pow(10_000.0, -((i / 2 * 2) as f64) / width as f64);
            let angle = pos as f64 * rate;
            out.push(if i % 2 == 0 { libm::sin(angle) } else { libm::cos(angle) });
        }
    }
    out
}
