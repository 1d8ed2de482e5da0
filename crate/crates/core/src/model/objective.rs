//! Stage objectives: cross-entropy plus weighted source and target CTC.

use alloc::format;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{Group, GroupSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum Stage {
    /// Alignment: adapter, language encoding, conditioning, CTC heads and
    /// the language classifier train; the decoder has no adapters.
    I,
    /// Adds the decoder's low-rank adapters with lighter CTC weights.
    II,
}

impl Stage {
    pub fn number(self) -> u8 {
        match self {
            Stage::I => 1,
            Stage::II => 2,
        }
    }
}

/// CTC weights of one stage.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(deny_unknown_fields))]
pub struct CtcWeights {
    pub src: f64,
    pub tgt: f64,
}

impl CtcWeights {
    pub const STAGE_I: CtcWeights = CtcWeights { src: 0.1, tgt: 0.2 };
    pub const STAGE_II: CtcWeights = CtcWeights { src: 0.01, tgt: 0.05 };

    pub fn default_for(stage: Stage) -> Self {
        match stage {
            Stage::I => Self::STAGE_I,
            Stage::II => Self::STAGE_II,
        }
    }
}

/// Weight of the auxiliary language-identification loss in Stage I.
pub const CLASSIFIER_WEIGHT: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageObjective {
    pub stage: Stage,
    pub weights: CtcWeights,
    pub trainable: GroupSet,
}

impl StageObjective {
    pub fn new(stage: Stage, weights: CtcWeights) -> Self {
        Self { stage, weights, trainable: trainable_groups(stage) }
    }

    pub fn stage_i() -> Self {
        Self::new(Stage::I, CtcWeights::STAGE_I)
    }

    pub fn stage_ii() -> Self {
        Self::new(Stage::II, CtcWeights::STAGE_II)
    }

    pub fn classifier_weight(&self) -> f64 {
        match self.stage {
            Stage::I => CLASSIFIER_WEIGHT,
            Stage::II => 0.0,
        }
    }
}

/// Groups updated in `stage`. Encoder and decoder base are never included.
pub fn trainable_groups(stage: Stage) -> GroupSet {
    let first = GroupSet::of(&[
        Group::Adapter,
        Group::Typology,
        Group::FlatTypology,
        Group::Conditioning,
        Group::CtcHeads,
        Group::Classifier,
    ]);
    match stage {
        Stage::I => first,
        Stage::II => first.with(Group::Lora),
    }
}

/// `ce + λ_src·ctc_src + λ_tgt·ctc_tgt`.
pub fn stage_loss(ce: f64, ctc_src: f64, ctc_tgt: f64, obj: &StageObjective) -> Result<f64> {
    for (name, v) in [("ce", ce), ("ctc_src", ctc_src), ("ctc_tgt", ctc_tgt)] {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("{name} = {v}")));
        }
    }
    Ok(ce + obj.weights.src * ctc_src + obj.weights.tgt * ctc_tgt)
}

/// Graph form of [`stage_loss`].
pub fn stage_loss_node(g: &mut Graph, ce: Var, ctc_src: Var, ctc_tgt: Var, obj: &StageObjective) -> Result<Var> {
    let s = g.scale(ctc_src, obj.weights.src);
    let t = g.scale(ctc_tgt, obj.weights.tgt);
    let x = g.add(ce, s)?;
    g.add(x, t)
}

/// Whether Stage II down-weights both CTC terms relative to Stage I.
pub fn is_down_weighted(stage_i: CtcWeights, stage_ii: CtcWeights) -> bool {
    stage_ii.src < stage_i.src && stage_ii.tgt < stage_i.tgt
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    #[test]
    fn default_weights_reproduce_reference_totals() {
        assert_eq!(stage_loss(1.0, 2.0, 3.0, &StageObjective::stage_i()).unwrap(), 1.8);
        assert_eq!(stage_loss(1.0, 2.0, 3.0, &StageObjective::stage_ii()).unwrap(), 1.17);
    }

    #[test]
    fn zero_ctc_leaves_ce() {
        for obj in [StageObjective::stage_i(), StageObjective::stage_ii()] {
            assert_eq!(stage_loss(0.7, 0.0, 0.0, &obj).unwrap(), 0.7);
        }
    }

    #[test]
    fn non_finite_component_is_rejected() {
        let obj = StageObjective::stage_i();
        assert!(matches!(stage_loss(f64::NAN, 0.0, 0.0, &obj), Err(Error::NonFinite(_))));
        assert!(matches!(stage_loss(1.0, f64::INFINITY, 0.0, &obj), Err(Error::NonFinite(_))));
    }

    #[test]
    fn linear_in_each_component() {
        let mut rng = SeededRng::new(9);
        for obj in [StageObjective::stage_i(), StageObjective::stage_ii()] {
            for _ in 0..100 {
                let (c, s, t, d) = (rng.normal(), rng.normal(), rng.normal(), rng.normal());
                let base = stage_loss(c, s, t, &obj).unwrap();
                assert!((stage_loss(c + d, s, t, &obj).unwrap() - base - d).abs() < 1e-12);
                assert!((stage_loss(c, s + d, t, &obj).unwrap() - base - obj.weights.src * d).abs() < 1e-12);
                assert!((stage_loss(c, s, t + d, &obj).unwrap() - base - obj.weights.tgt * d).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn node_matches_scalar_form() {
        let obj = StageObjective::stage_ii();
        let mut g = Graph::new();
        let (c, s, t) = (g.scalar(1.0), g.scalar(2.0), g.scalar(3.0));
        let n = stage_loss_node(&mut g, c, s, t, &obj).unwrap();
        assert_eq!(g.item(n), stage_loss(1.0, 2.0, 3.0, &obj).unwrap());
    }

    #[test]
    fn stage_two_down_weights_and_adds_lora() {
        assert!(is_down_weighted(CtcWeights::STAGE_I, CtcWeights::STAGE_II));
        assert!(!trainable_groups(Stage::I).contains(Group::Lora));
        assert!(trainable_groups(Stage::II).contains(Group::Lora));
        for s in [Stage::I, Stage::II] {
            assert!(!trainable_groups(s).contains(Group::Encoder));
            assert!(!trainable_groups(s).contains(Group::DecoderBase));
        }
    }
}
