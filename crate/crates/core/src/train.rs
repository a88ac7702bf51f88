//! One training step: forward, backward, optimizer, with peak-memory and
//! FLOP metrics taken from the arena.

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::memtrack::Arena;
use crate::model::{backward, backward_with, forward, ModelConfig, ModelWeights, Upstream};
use crate::optim::{AdamW, GradAccumulator, OptimConfig};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub loss: f64,
    pub grad_norm: f64,
    /// Highest live byte count during the step, everything included.
    pub peak_bytes: u64,
    pub flops: u64,
}

#[derive(Debug)]
pub struct Trainer {
    pub cfg: ModelConfig,
    pub weights: ModelWeights,
    pub optim: AdamW,
    pub arena: Arena,
    accum: GradAccumulator,
    step: u64,
}

impl Trainer {
    pub fn new(cfg: ModelConfig, ocfg: OptimConfig, arena: Arena) -> Result<Trainer> {
        let weights = ModelWeights::init(&cfg, &arena)?;
        Trainer::with_weights(cfg, ocfg, weights)
    }

    pub fn with_weights(cfg: ModelConfig, ocfg: OptimConfig, weights: ModelWeights) -> Result<Trainer> {
        cfg.validate()?;
        let arena = weights.embedding.arena().clone();
        let optim = AdamW::new(ocfg, &weights)?;
        Ok(Trainer {
            cfg,
            weights,
            optim,
            arena,
            accum: GradAccumulator::new(),
            step: 0,
        })
    }

    /// One optimizer step over `batches` (one per accumulation micro-batch).
    pub fn step(&mut self, batches: &[Batch]) -> Result<StepMetrics> {
        if batches.len() != self.optim.cfg.accum {
            return Err(Error::Config(format!(
                "step needs {} micro-batches, got {}",
                self.optim.cfg.accum,
                batches.len()
            )));
        }
        self.arena.reset_peak();
        let flops_before = self.arena.counters().flops;
        let (loss, grad_norm) = if self.optim.cfg.in_backward {
            self.step_in_backward(&batches[0])?
        } else {
            let mut loss = 0.0;
            for b in batches {
                let (l, saved) = forward(&self.cfg, &self.weights, b)?;
                let grads = backward(&self.cfg, &self.weights, saved, Upstream::Loss(1.0))?;
                self.accum.add(grads)?;
                loss += l;
            }
            let grads = self.accum.flush()?;
            let norm = self.optim.step(&mut self.weights, grads)?;
            (loss / batches.len() as f64, norm)
        };
        self.step += 1;
        Ok(StepMetrics {
            step: self.step,
            loss,
            grad_norm,
            peak_bytes: self.arena.peak_bytes(),
            flops: self.arena.counters().flops - flops_before,
        })
    }

    fn step_in_backward(&mut self, batch: &Batch) -> Result<(f64, f64)> {
        let (loss, saved) = forward(&self.cfg, &self.weights, batch)?;
        let optim = &mut self.optim;
        optim.begin_round();
        let mut sq = 0.0;
        backward_with(
            &self.cfg,
            &mut self.weights,
            saved,
            Upstream::Loss(1.0),
            &mut |id, g, p| {
                sq += g.sum_squares();
                optim.step_param(id, p, g)
            },
        )?;
        Ok((loss, f64::sqrt(sq)))
    }
}
