//! FiLM generation, the per-frame gate, and gated modulation.

use alloc::format;

use crate::array::Array;
use crate::error::{shape_err, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Linear, Mlp};
use crate::params::{Binder, Group, ParamId, ParamStore};
use crate::rng::SeededRng;

/// Lower bound added to the learned temperature.
pub const TAU_FLOOR: f64 = 0.1;
/// Initial bias of the gate's output layer.
pub const GATE_BIAS_INIT: f64 = -2.0;
pub const FILM_HIDDEN: usize = 512;
pub const GATE_HIDDEN: usize = 256;
/// Pre-activation bound that keeps tanh strictly inside (−1, 1) in f64.
pub const TANH_SPAN: f64 = 18.0;
/// Pre-activation bound that keeps sigmoid strictly inside (0, 1) in f64.
pub const SIGMOID_SPAN: f64 = 36.0;

/// `ln(e − 1)`: makes `softplus(τ_learn) = 1` at initialisation.
pub fn tau_learn_init() -> f64 {
    libm::log(core::f64::consts::E - 1.0)
}

/// `softplus(τ_learn) + 0.1`.
pub fn temperature(tau_learn: f64) -> f64 {
    crate::graph::softplus(tau_learn) + TAU_FLOOR
}

/// Two-layer MLP from `r_lang` to `[γ; β]`.
#[derive(Debug, Clone, Copy)]
pub struct FilmGenerator {
    pub mlp: Mlp,
    pub width: usize,
}

/// Per-feature scale and shift, each `1 × d_h`.
#[derive(Debug, Clone, Copy)]
pub struct FilmParams {
    pub gamma: Var,
    pub beta: Var,
}

impl FilmGenerator {
    pub fn new(store: &mut ParamStore, repr_dim: usize, hidden: usize, width: usize, rng: &mut SeededRng) -> Result<Self> {
        let mlp = Mlp::new(store, "film", Group::Conditioning, [repr_dim, hidden, 2 * width], rng)?;
        Ok(Self { mlp, width })
    }

    /// `[γ, β] = split(tanh(f_FiLM(r)))`.
    pub fn film(&self, g: &mut Graph, p: &mut Binder, r: Var) -> Result<FilmParams> {
        let out = self.mlp.forward(g, p, r)?;
        let out = g.clamp(out, -TANH_SPAN, TANH_SPAN);
        let out = g.tanh(out);
        let parts = g.split_cols(out, &[self.width, self.width])?;
        Ok(FilmParams { gamma: parts[0], beta: parts[1] })
    }
}

/// Dynamic per-frame gate over `[h_t; r_lang]` with a learned temperature.
#[derive(Debug, Clone, Copy)]
pub struct FrameGate {
    /// First layer, `(d_h + d_r) × hidden`; rows `0..d_h` read the frame.
    pub hidden_w: ParamId,
    pub hidden_b: ParamId,
    pub out: Linear,
    pub tau_learn: ParamId,
    pub frame_width: usize,
    pub repr_dim: usize,
}

impl FrameGate {
    pub fn new(store: &mut ParamStore, frame_width: usize, repr_dim: usize, hidden: usize, rng: &mut SeededRng) -> Result<Self> {
        let fan_in = frame_width + repr_dim;
        let std = 1.0 / libm::sqrt(fan_in as f64);
        let hidden_w = store.add("gate.0.w", Group::Conditioning, Array::randn(&[fan_in, hidden], std, rng))?;
        let hidden_b = store.add("gate.0.b", Group::Conditioning, Array::zeros(&[1, hidden]))?;
        let out = Linear::new(store, "gate.1", Group::Conditioning, hidden, 1, rng)?;
        store.get_mut(out.b).data_mut().fill(GATE_BIAS_INIT);
        let tau_learn = store.add("gate.tau_learn", Group::Conditioning, Array::scalar(tau_learn_init()))?;
        Ok(Self { hidden_w, hidden_b, out, tau_learn, frame_width, repr_dim })
    }

    /// Pre-activation `f_gate([h_t; r])` per frame, `T × 1`.
    ///
    /// The first layer is evaluated as `h·W_h + (r·W_r + b)` so the language
    /// half is computed once for all frames.
    pub fn logits(&self, g: &mut Graph, p: &mut Binder, h: Var, r: Var) -> Result<Var> {
        if g.cols(h) != self.frame_width || g.shape(r) != (1, self.repr_dim) {
            return Err(shape_err(
                "gate",
                format!("frames {:?} and repr {:?} for widths {} + {}", g.shape(h), g.shape(r), self.frame_width, self.repr_dim),
            ));
        }
        let w = p.var(g, self.hidden_w);
        let w_h = g.slice_rows(w, 0, self.frame_width)?;
        let w_r = g.slice_rows(w, self.frame_width, self.repr_dim)?;
        let b = p.var(g, self.hidden_b);
        let lang = g.affine(r, w_r, b)?;
        let frames = g.matmul(h, w_h)?;
        let hid = g.add(frames, lang)?;
        let hid = g.gelu(hid);
        self.out.forward(g, p, hid)
    }

    /// `τ = softplus(τ_learn) + 0.1` as a `1 × 1` node.
    pub fn temperature(&self, g: &mut Graph, p: &mut Binder) -> Var {
        let t = p.var(g, self.tau_learn);
        let t = g.softplus(t);
        g.add_scalar(t, TAU_FLOOR)
    }

    /// `g_t = sigmoid(f_gate([h_t; r]) / τ)`, `T × 1`.
    pub fn gate(&self, g: &mut Graph, p: &mut Binder, h: Var, r: Var) -> Result<Var> {
        let a = self.logits(g, p, h, r)?;
        let tau = self.temperature(g, p);
        let z = g.div(a, tau)?;
        let z = g.clamp(z, -SIGMOID_SPAN, SIGMOID_SPAN);
        Ok(g.sigmoid(z))
    }
}

/// Ablation gate: one learned scalar through a sigmoid, shared by all frames.
#[derive(Debug, Clone, Copy)]
pub struct StaticGate {
    pub logit: ParamId,
}

impl StaticGate {
    pub fn new(store: &mut ParamStore) -> Result<Self> {
        Ok(Self { logit: store.add("gate.static", Group::Conditioning, Array::scalar(0.0))? })
    }

    pub fn gate(&self, g: &mut Graph, p: &mut Binder, frames: usize) -> Result<Var> {
        let s = p.var(g, self.logit);
        let s = g.clamp(s, -SIGMOID_SPAN, SIGMOID_SPAN);
        let s = g.sigmoid(s);
        let base = g.constant(frames, 1, alloc::vec![0.0; frames])?;
        g.add(base, s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(rename_all = "snake_case"))]
pub enum GateVariant {
    #[default]
    Dynamic,
    Static,
}

/// Whichever gate the model was built with.
#[derive(Debug, Clone, Copy)]
pub enum Gate {
    Dynamic(FrameGate),
    Static(StaticGate),
}

impl Gate {
    pub fn new(store: &mut ParamStore, variant: GateVariant, frame_width: usize, repr_dim: usize, rng: &mut SeededRng) -> Result<Self> {
        Ok(match variant {
            GateVariant::Dynamic => Gate::Dynamic(FrameGate::new(store, frame_width, repr_dim, GATE_HIDDEN, rng)?),
            GateVariant::Static => Gate::Static(StaticGate::new(store)?),
        })
    }

    pub fn gate(&self, g: &mut Graph, p: &mut Binder, h: Var, r: Var) -> Result<Var> {
        match self {
            Gate::Dynamic(fg) => fg.gate(g, p, h, r),
            Gate::Static(sg) => sg.gate(g, p, g.rows(h)),
        }
    }
}

/// `h̃_t = (1 + g_t γ) ⊙ h_t + g_t β`. The input node is left untouched.
pub fn modulate(g: &mut Graph, h: Var, film: &FilmParams, gate: Var) -> Result<Var> {
    let (t, d) = g.shape(h);
    if g.shape(film.gamma) != (1, d) || g.shape(film.beta) != (1, d) {
        return Err(shape_err("modulate", format!("FiLM widths {:?}/{:?} for frames of width {d}", g.shape(film.gamma), g.shape(film.beta))));
    }
    if g.shape(gate) != (t, 1) {
        return Err(shape_err("modulate", format!("gate {:?} for {t} frames", g.shape(gate))));
    }
    let gg = g.mul(gate, film.gamma)?;
    let scale = g.add_scalar(gg, 1.0);
    let scaled = g.mul(scale, h)?;
    let shift = g.mul(gate, film.beta)?;
    g.add(scaled, shift)
}
