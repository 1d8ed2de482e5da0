//! Named parameter storage, graph binding, and the Adam update.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::array::Array;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};

/// Parameter sets with distinct training contracts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Group {
    /// Frozen encoder stand-in.
    Encoder,
    Adapter,
    /// Hierarchical typology tables and fusion.
    Typology,
    /// Flat per-language table and its fusion (ablation baseline).
    FlatTypology,
    /// FiLM generator and frame gate.
    Conditioning,
    CtcHeads,
    Classifier,
    /// Frozen toy decoder.
    DecoderBase,
    /// Low-rank adapters on the decoder's query/value projections.
    Lora,
}

impl Group {
    pub const ALL: [Group; 9] = [
        Group::Encoder,
        Group::Adapter,
        Group::Typology,
        Group::FlatTypology,
        Group::Conditioning,
        Group::CtcHeads,
        Group::Classifier,
        Group::DecoderBase,
        Group::Lora,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Group::Encoder => "encoder",
            Group::Adapter => "adapter",
            Group::Typology => "typology",
            Group::FlatTypology => "flat_typology",
            Group::Conditioning => "conditioning",
            Group::CtcHeads => "ctc_heads",
            Group::Classifier => "classifier",
            Group::DecoderBase => "decoder_base",
            Group::Lora => "lora",
        }
    }

    pub fn from_name(s: &str) -> Option<Group> {
        Group::ALL.into_iter().find(|g| g.name() == s)
    }

    fn bit(self) -> u16 {
        1 << (self as u16)
    }
}

/// A set of [`Group`]s.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct GroupSet(u16);

impl GroupSet {
    pub const EMPTY: GroupSet = GroupSet(0);

    pub fn of(groups: &[Group]) -> Self {
        GroupSet(groups.iter().fold(0, |acc, g| acc | g.bit()))
    }

    pub fn contains(self, g: Group) -> bool {
        self.0 & g.bit() != 0
    }

    pub fn with(self, g: Group) -> Self {
        GroupSet(self.0 | g.bit())
    }

    pub fn without(self, g: Group) -> Self {
        GroupSet(self.0 & !g.bit())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: Group,
    pub value: Array,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, group: Group, value: Array) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter `{name}`")));
        }
        let id = ParamId(self.params.len());
        self.params.push(Param { name: name.to_string(), group, value });
        self.by_name.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Array {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array {
        &mut self.params[id.0].value
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn group(&self, id: ParamId) -> Group {
        self.params[id.0].group
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids_in(&self, group: Group) -> Vec<ParamId> {
        self.iter().filter(|(_, p)| p.group == group).map(|(id, _)| id).collect()
    }

    /// Total scalar count per group.
    pub fn group_sizes(&self) -> BTreeMap<&'static str, usize> {
        let mut out = BTreeMap::new();
        for p in &self.params {
            *out.entry(p.group.name()).or_insert(0) += p.value.len();
        }
        out
    }

    /// Bit patterns of every parameter in `group`, for exact before/after comparisons.
    pub fn fingerprint(&self, group: Group) -> Vec<(String, Vec<u64>)> {
        self.params
            .iter()
            .filter(|p| p.group == group)
            .map(|p| (p.name.clone(), p.value.data().iter().map(|x| x.to_bits()).collect()))
            .collect()
    }

    /// Overwrites values by name; shapes must match.
    pub fn load_values(&mut self, name: &str, shape: &[usize], data: Vec<f64>) -> Result<()> {
        let id = self.id(name).ok_or_else(|| Error::Config(format!("unknown parameter `{name}`")))?;
        let slot = &mut self.params[id.0].value;
        if slot.shape() != shape {
            return Err(Error::Shape { op: "load_values", detail: format!("`{name}`: stored {:?}, loaded {shape:?}", slot.shape()) });
        }
        slot.data_mut().copy_from_slice(&data);
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        self.params.iter_mut().for_each(|p| p.value.zero_grad());
    }
}

/// Maps parameters to graph leaves for one forward pass.
///
/// Leaves are created lazily, once per parameter, and are differentiable only
/// for parameters in the trainable set. Overrides substitute an arbitrary node
/// for a parameter, which is how gradient checks differentiate w.r.t. one
/// parameter while the rest stay fixed.
pub struct Binder<'s> {
    store: &'s ParamStore,
    trainable: GroupSet,
    vars: Vec<Option<Var>>,
}

impl<'s> Binder<'s> {
    pub fn new(store: &'s ParamStore, trainable: GroupSet) -> Self {
        Self { store, trainable, vars: vec![None; store.len()] }
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn var(&mut self, g: &mut Graph, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let p = &self.store.params[id.0];
        let (r, c) = p.value.dims2();
        let data = p.value.data().to_vec();
        let v = if self.trainable.contains(p.group) {
            g.input(r, c, data)
        } else {
            g.constant(r, c, data)
        }
        .expect("stored parameter has a consistent shape");
        self.vars[id.0] = Some(v);
        v
    }

    pub fn bind(&mut self, id: ParamId, v: Var) {
        self.vars[id.0] = Some(v);
    }

    /// Gradients of bound trainable parameters after `g.backward`.
    pub fn gradients(&self, g: &Graph) -> Vec<(ParamId, Vec<f64>)> {
        self.vars
            .iter()
            .enumerate()
            .filter_map(|(i, v)| {
                let v = (*v)?;
                if !self.trainable.contains(self.store.params[i].group) {
                    return None;
                }
                g.grad(v).map(|gr| (ParamId(i), gr.to_vec()))
            })
            .collect()
    }
}

/// Adam with a fixed learning rate.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Option<Vec<f64>>>,
    v: Vec<Option<Vec<f64>>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies accumulated gradients of parameters in `trainable`, then clears
    /// every gradient. Parameters outside `trainable` are never written.
    pub fn step(&mut self, store: &mut ParamStore, trainable: GroupSet) {
        if self.m.len() < store.len() {
            self.m.resize(store.len(), None);
            self.v.resize(store.len(), None);
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - libm::pow(self.beta1, f64::from(t));
        let c2 = 1.0 - libm::pow(self.beta2, f64::from(t));
        for (i, p) in store.params.iter_mut().enumerate() {
            let Some(grad) = p.value.grad.take() else { continue };
            if !trainable.contains(p.group) {
                continue;
            }
            let n = grad.len();
            let m = self.m[i].get_or_insert_with(|| vec![0.0; n]);
            let v = self.v[i].get_or_insert_with(|| vec![0.0; n]);
            for (((w, g), m), v) in p.value.data_mut().iter_mut().zip(&grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let mh = *m / c1;
                let vh = *v / c2;
                *w -= self.lr * mh / (libm::sqrt(vh) + self.eps);
            }
        }
    }
}

/// Adds `(id, grad)` pairs into the store's accumulated gradients.
pub fn accumulate(store: &mut ParamStore, grads: &[(ParamId, Vec<f64>)], weight: f64) -> Result<()> {
    for (id, g) in grads {
        if weight == 1.0 {
            store.get_mut(*id).accumulate_grad(g)?;
        } else {
            let scaled: Vec<f64> = g.iter().map(|x| x * weight).collect();
            store.get_mut(*id).accumulate_grad(&scaled)?;
        }
    }
    Ok(())
}

/// Global L2 norm of accumulated gradients in `groups`.
pub fn grad_norm(store: &ParamStore, groups: GroupSet) -> f64 {
    let s: f64 = store
        .params
        .iter()
        .filter(|p| groups.contains(p.group))
        .filter_map(|p| p.value.grad.as_ref())
        .flat_map(|g| g.iter())
        .map(|x| x * x)
        .sum();
    libm::sqrt(s)
}
