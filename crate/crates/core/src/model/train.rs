//! Two-stage training loop and held-out evaluation.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use super::objective::{CtcWeights, Stage, StageObjective};
use super::{Model, Prepared};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, EvalReport};
use crate::params::Adam;
use crate::rng::SeededRng;

/// Steps, batch size, learning rate and CTC weights of both stages.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(deny_unknown_fields, default))]
pub struct Schedule {
    pub stage_i_steps: usize,
    pub stage_ii_steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub stage_i: CtcWeights,
    pub stage_ii: CtcWeights,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            stage_i_steps: 1500,
            stage_ii_steps: 1500,
            batch_size: 16,
            lr: 3e-4,
            stage_i: CtcWeights::STAGE_I,
            stage_ii: CtcWeights::STAGE_II,
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be ≥ 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr {} must be positive", self.lr)));
        }
        for (name, w) in [("stage_i", self.stage_i), ("stage_ii", self.stage_ii)] {
            if !(w.src >= 0.0 && w.tgt >= 0.0 && w.src.is_finite() && w.tgt.is_finite()) {
                return Err(Error::Config(format!("{name} CTC weights must be finite and ≥ 0")));
            }
        }
        Ok(())
    }

    pub fn total_steps(&self) -> usize {
        self.stage_i_steps + self.stage_ii_steps
    }

    /// Objective of global step `step` (0-based).
    pub fn objective_at(&self, step: usize) -> StageObjective {
        if step < self.stage_i_steps {
            StageObjective::new(Stage::I, self.stage_i)
        } else {
            StageObjective::new(Stage::II, self.stage_ii)
        }
    }
}

/// One optimizer step's losses.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct StepRecord {
    pub step: usize,
    pub ce: f64,
    pub ctc_src: f64,
    pub ctc_tgt: f64,
    pub total: f64,
    pub stage: u8,
}

/// Deterministic batch stream: reshuffles once per pass over the data.
#[derive(Debug, Clone)]
pub struct Batcher {
    order: Vec<usize>,
    pos: usize,
    rng: SeededRng,
}

impl Batcher {
    pub fn new(n: usize, seed: u64) -> Self {
        let mut rng = SeededRng::derive(seed, "batches");
        let mut order: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut order);
        Self { order, pos: 0, rng }
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size.min(self.order.len()) {
            if self.pos == self.order.len() {
                self.rng.shuffle(&mut self.order);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Runs Stage I then Stage II on `train`, calling `on_step` after each update.
///
/// Only the trainable groups of the current stage change. A non-finite loss
/// stops the run with [`Error::Divergence`].
pub fn train_run(
    model: &mut Model,
    train: &[Prepared],
    schedule: &Schedule,
    seed: u64,
    on_step: &mut dyn FnMut(&StepRecord),
) -> Result<Vec<StepRecord>> {
    schedule.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("training set".into()));
    }
    let mut batches = Batcher::new(train.len(), seed);
    let mut dropout = SeededRng::derive(seed, "dropout");
    let mut adam = Adam::new(schedule.lr);
    let mut log = Vec::with_capacity(schedule.total_steps());
    // the decoder base is frozen, so Stage I prompt states never change
    let base_prompts = if schedule.stage_i_steps > 0 { Some(model.base_prompt_caches()?) } else { None };
    for step in 0..schedule.total_steps() {
        let obj = schedule.objective_at(step);
        let idx = batches.next_batch(schedule.batch_size);
        let batch: Vec<&Prepared> = idx.iter().map(|&i| &train[i]).collect();
        let parts = model.accumulate_gradients(&batch, &obj, &mut dropout, base_prompts.as_ref())?;
        if !parts.total.is_finite() {
            model.store.zero_grads();
            let ids: Vec<&str> = batch.iter().map(|u| u.id.as_str()).collect();
            return Err(Error::Divergence {
                step,
                detail: format!("total {} (ce {}, ctc_src {}, ctc_tgt {}) on {}", parts.total, parts.ce, parts.ctc_src, parts.ctc_tgt, ids.join(",")),
            });
        }
        adam.step(&mut model.store, obj.trainable);
        let rec = StepRecord { step, ce: parts.ce, ctc_src: parts.ctc_src, ctc_tgt: parts.ctc_tgt, total: parts.total, stage: obj.stage.number() };
        on_step(&rec);
        log.push(rec);
    }
    Ok(log)
}

/// Greedy translations of `items` scored against their references.
pub fn evaluate_model(model: &Model, items: &[Prepared]) -> Result<(Vec<Vec<String>>, EvalReport)> {
    if items.is_empty() {
        return Err(Error::Empty("evaluation set".into()));
    }
    let hyps = model.translate_all(items)?;
    let refs: Vec<Vec<String>> = items
        .iter()
        .map(|u| u.target.iter().map(|&i| String::from(model.vocab.target.token(i).unwrap_or_default())).collect())
        .collect();
    let langs: Vec<String> = items.iter().map(|u| u.lang.clone()).collect();
    let report = evaluate(&hyps, &refs, &langs)?;
    Ok((hyps, report))
}

/// Share of items whose language the classifier predicts correctly.
pub fn language_accuracy(model: &Model, items: &[Prepared]) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::Empty("evaluation set".into()));
    }
    let mut right = 0;
    for u in items {
        if model.predict_language(&u.features)? == u.lang {
            right += 1;
        }
    }
    Ok(right as f64 / items.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batcher_covers_every_item_each_pass() {
        let mut b = Batcher::new(10, 3);
        let mut seen: Vec<usize> = (0..5).flat_map(|_| b.next_batch(2)).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn batcher_is_seeded() {
        let take = |seed| {
            let mut b = Batcher::new(20, seed);
            (0..7).map(|_| b.next_batch(3)).collect::<Vec<_>>()
        };
        assert_eq!(take(1), take(1));
        assert_ne!(take(1), take(2));
    }

    #[test]
    fn objective_switches_after_stage_one() {
        let s = Schedule { stage_i_steps: 3, stage_ii_steps: 2, ..Schedule::default() };
        assert_eq!(s.objective_at(2).stage, Stage::I);
        assert_eq!(s.objective_at(3).stage, Stage::II);
        assert_eq!(s.objective_at(3).weights, CtcWeights::STAGE_II);
    }
}
