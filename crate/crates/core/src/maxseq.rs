//! Largest trainable sequence length under a per-worker memory budget.
//!
//! Each probe builds fresh weights in a fresh arena and runs one complete
//! training step (all accumulation micro-batches and the optimizer update)
//! on synthetic tokens; its cost is the highest live byte count of the
//! busiest worker. The search assumes that peak grows with `S`.

use serde::Serialize;

use crate::data::{synth_tokens, Batch};
use crate::error::{Error, Result};
use crate::memtrack::Arena;
use crate::model::{ModelConfig, ModelWeights};
use crate::optim::OptimConfig;
use crate::seqpar::{Schedule, SpTrainer};
use crate::train::Trainer;

pub const DEFAULT_GRANULARITY: usize = 8;
const DATA_SEED: u64 = 0x5eed;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaxSeqQuery {
    pub budget_bytes: u64,
    pub workers: usize,
    /// Candidates are multiples of `workers · granularity`.
    pub granularity: usize,
    /// Upper end of the search; `None` searches without bound.
    pub s_cap: Option<usize>,
}

impl MaxSeqQuery {
    pub fn new(budget_bytes: u64, workers: usize) -> Self {
        MaxSeqQuery {
            budget_bytes,
            workers,
            granularity: DEFAULT_GRANULARITY,
            s_cap: None,
        }
    }

    pub fn step(&self) -> usize {
        self.workers * self.granularity
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Probe {
    pub s: usize,
    pub peak_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MaxSeqResult {
    pub s_star: usize,
    pub peak_bytes: u64,
    pub budget_bytes: u64,
    pub workers: usize,
    /// Every probe in the order it ran.
    pub probes: Vec<Probe>,
}

/// Peak bytes of one training step at sequence length `s` (the largest
/// worker peak when `workers > 1`).
pub fn probe_peak(cfg: &ModelConfig, ocfg: OptimConfig, s: usize, workers: usize) -> Result<u64> {
    let cfg = ModelConfig { s, ..cfg.clone() };
    let batches = (0..ocfg.accum)
        .map(|i| {
            let toks = synth_tokens(DATA_SEED + i as u64, cfg.v, cfg.b * s)?;
            Batch::from_tokens(toks, cfg.b, s, cfg.v)
        })
        .collect::<Result<Vec<_>>>()?;
    if workers > 1 {
        let w = ModelWeights::init(&cfg, &Arena::new())?;
        let mut t = SpTrainer::new(&cfg, ocfg, &w, workers, Schedule::Threaded)?;
        drop(w);
        let m = t.step(&batches[0])?;
        Ok(m.worker_peaks.into_iter().max().unwrap_or(0))
    } else {
        let mut t = Trainer::new(cfg, ocfg, Arena::new())?;
        Ok(t.step(&batches)?.peak_bytes)
    }
}

/// Largest multiple of `q.step()` whose training step fits in
/// `q.budget_bytes`: doubling until a probe overflows, then bisection.
pub fn max_seq(cfg: &ModelConfig, ocfg: OptimConfig, q: &MaxSeqQuery) -> Result<MaxSeqResult> {
    if q.workers == 0 || q.granularity == 0 {
        return Err(Error::Config("workers and granularity must be at least 1".into()));
    }
    let step = q.step();
    let cap = q.s_cap.map(|c| c / step);
    if cap == Some(0) {
        return Err(Error::Config(format!("sequence cap is below one step of {step}")));
    }
    let mut probes = Vec::new();
    let mut run = |k: usize| -> Result<u64> {
        let peak = probe_peak(cfg, ocfg, k * step, q.workers)?;
        log::debug!("max-seq probe S={} peak={peak}", k * step);
        probes.push(Probe {
            s: k * step,
            peak_bytes: peak,
        });
        Ok(peak)
    };
    let first = run(1)?;
    if first > q.budget_bytes {
        return Err(Error::BudgetTooSmall {
            budget: q.budget_bytes,
            needed: first,
        });
    }
    // invariant: `lo` fits, `hi` (when known) does not
    let (mut lo, mut lo_peak) = (1usize, first);
    let mut hi = None;
    while hi.is_none() {
        let mut next = lo * 2;
        if let Some(c) = cap {
            if lo >= c {
                break;
            }
            next = next.min(c);
        }
        let p = run(next)?;
        if p <= q.budget_bytes {
            (lo, lo_peak) = (next, p);
        } else {
            hi = Some(next);
        }
    }
    if let Some(mut hi) = hi {
        while hi - lo > 1 {
            let mid = lo + (hi - lo) / 2;
            let p = run(mid)?;
            if p <= q.budget_bytes {
                (lo, lo_peak) = (mid, p);
            } else {
                hi = mid;
            }
        }
    }
    Ok(MaxSeqResult {
        s_star: lo * step,
        peak_bytes: lo_peak,
        budget_bytes: q.budget_bytes,
        workers: q.workers,
        probes,
    })
}
