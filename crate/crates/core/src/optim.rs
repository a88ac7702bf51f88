//! AdamW with decoupled weight decay, global-norm clipping, micro-batch
//! gradient accumulation, and per-parameter stepping during backward.

use serde::{Deserialize, Serialize};

use crate::blocks::{labels, with_dtype};
use crate::error::{Error, Result};
use crate::model::{GradSet, ModelWeights};
use crate::tensor::{add_assign, scale_assign, Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub weight_decay: f64,
    /// Global-norm clipping threshold; `inf` disables clipping.
    pub clip_norm: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub accum: usize,
    pub in_backward: bool,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 1e-4,
            weight_decay: 0.001,
            clip_norm: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            accum: 1,
            in_backward: false,
        }
    }
}

impl OptimConfig {
    // negated comparisons also reject NaN
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        let err = |k: &str, msg: &str| Err(Error::Config(format!("optim.{k}: {msg}")));
        if !(self.lr > 0.0) {
            return err("lr", "must be positive");
        }
        if !(self.clip_norm > 0.0) {
            return err("clip_norm", "must be positive");
        }
        for (k, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return err(k, "must lie in (0, 1)");
            }
        }
        if !(self.eps > 0.0) || self.weight_decay < 0.0 {
            return err("eps", "eps must be positive and weight_decay non-negative");
        }
        if self.accum == 0 {
            return err("accum", "must be at least 1");
        }
        if self.in_backward && self.accum > 1 {
            return err(
                "in_backward",
                "stepping during backward cannot be combined with gradient accumulation",
            );
        }
        Ok(())
    }

    /// Clipping threshold in effect: stepping during backward never clips,
    /// since the global norm is unknown until backward ends.
    pub fn effective_clip(&self) -> f64 {
        if self.in_backward {
            f64::INFINITY
        } else {
            self.clip_norm
        }
    }
}

/// Scales every gradient by `max_norm / ‖g‖₂` when the global norm exceeds
/// `max_norm`. Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut GradSet, max_norm: f64) -> Result<f64> {
    let norm = grads.global_norm();
    if !norm.is_finite() {
        return Err(Error::NonFinite { op: "clip_global_norm" });
    }
    if norm > max_norm {
        let s = max_norm / norm;
        for (_, g) in grads.iter_mut() {
            scale_assign(g, s)?;
        }
    }
    Ok(norm)
}

#[derive(Debug)]
pub struct OptimState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    /// Completed updates per parameter.
    pub steps: Vec<u64>,
}

#[derive(Debug)]
pub struct AdamW {
    pub cfg: OptimConfig,
    pub state: OptimState,
    round: u64,
}

#[allow(clippy::too_many_arguments)]
fn moments_kernel<T: Element>(
    m: &mut [T],
    v: &mut [T],
    denom: &mut [T],
    g: &[T],
    b1: f64,
    b2: f64,
    bc2: f64,
    eps: f64,
) {
    let (b1, b2, bc2, eps) = (T::of(b1), T::of(b2), T::of(bc2), T::of(eps));
    for i in 0..g.len() {
        m[i] = b1 * m[i] + (T::one() - b1) * g[i];
        v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
        denom[i] = (v[i] / bc2).sqrt() + eps;
    }
}

fn apply_kernel<T: Element>(w: &mut [T], m: &[T], denom: &[T], lr: f64, wd: f64, bc1: f64) {
    let (lr, wd, bc1) = (T::of(lr), T::of(wd), T::of(bc1));
    for i in 0..w.len() {
        w[i] = w[i] - lr * wd * w[i];
        w[i] = w[i] - lr * (m[i] / bc1) / denom[i];
    }
}

impl AdamW {
    /// Allocates zeroed first and second moments for every parameter.
    pub fn new(cfg: OptimConfig, weights: &ModelWeights) -> Result<AdamW> {
        cfg.validate()?;
        let params = weights.params();
        let z = |t: &Tensor, l: &str| Tensor::zeros(t.arena(), t.shape(), t.dtype(), l);
        Ok(AdamW {
            cfg,
            state: OptimState {
                m: params.iter().map(|t| z(t, labels::OPTIM_M)).collect(),
                v: params.iter().map(|t| z(t, labels::OPTIM_V)).collect(),
                steps: vec![0; params.len()],
            },
            round: 0,
        })
    }

    /// Marks the start of an optimizer step: each parameter may be updated
    /// once until the next call.
    pub fn begin_round(&mut self) {
        self.round += 1;
    }

    pub fn round(&self) -> u64 {
        self.round
    }

    fn check(&self, id: usize, param: &Tensor, grad: &Tensor) -> Result<()> {
        if id >= self.state.m.len() {
            return Err(Error::Optimizer(format!("no optimizer state for parameter {id}")));
        }
        if param.shape() != grad.shape() || param.shape() != self.state.m[id].shape() || param.dtype() != grad.dtype() {
            return Err(Error::dim(
                "adamw",
                format!("parameter {id}: weight {:?}, grad {:?}", param.shape(), grad.shape()),
            ));
        }
        if self.state.steps[id] >= self.round {
            return Err(Error::Optimizer(format!(
                "parameter {id} already stepped in round {}",
                self.round
            )));
        }
        Ok(())
    }

    /// Moment update for one parameter; returns the denominator buffer.
    fn moments(&mut self, id: usize, grad: &Tensor) -> Tensor {
        let t = (self.state.steps[id] + 1) as i32;
        let bc2 = 1.0 - self.cfg.beta2.powi(t);
        let mut denom = Tensor::zeros(grad.arena(), grad.shape(), grad.dtype(), labels::OPTIM_TMP);
        let (m, v) = (&mut self.state.m[id], &mut self.state.v[id]);
        with_dtype!(grad.dtype(), T => moments_kernel::<T>(
            m.data_mut(),
            v.data_mut(),
            denom.data_mut(),
            grad.data(),
            self.cfg.beta1,
            self.cfg.beta2,
            bc2,
            self.cfg.eps,
        ));
        denom
    }

    fn apply(&mut self, id: usize, param: &mut Tensor, denom: &Tensor) -> Result<()> {
        self.state.steps[id] += 1;
        let t = self.state.steps[id] as i32;
        let bc1 = 1.0 - self.cfg.beta1.powi(t);
        let m = &self.state.m[id];
        with_dtype!(param.dtype(), T => apply_kernel::<T>(
            param.data_mut(),
            m.data(),
            denom.data(),
            self.cfg.lr,
            self.cfg.weight_decay,
            bc1,
        ));
        param.check_finite_in_place("adamw")
    }

    /// Updates one parameter from its gradient, consuming (and freeing) the
    /// gradient. Used while backward is still running.
    pub fn step_param(&mut self, id: usize, param: &mut Tensor, grad: Tensor) -> Result<()> {
        self.check(id, param, &grad)?;
        let denom = self.moments(id, &grad);
        drop(grad);
        self.apply(id, param, &denom)
    }

    /// Full deferred step: clip, then update every parameter. Moments and
    /// denominators of all parameters are computed before any weight moves.
    /// Returns the gradient norm before clipping.
    pub fn step(&mut self, weights: &mut ModelWeights, mut grads: GradSet) -> Result<f64> {
        if !grads.is_complete() || grads.len() != self.state.m.len() {
            return Err(Error::Optimizer("gradient set is missing parameters".into()));
        }
        let norm = clip_global_norm(&mut grads, self.cfg.effective_clip())?;
        self.begin_round();
        let params = weights.params();
        for (id, g) in grads.iter() {
            self.check(id, params[id], g)?;
        }
        let denoms: Vec<Tensor> = (0..grads.len())
            .map(|id| self.moments(id, grads.get(id).expect("complete")))
            .collect();
        drop(grads);
        for (id, denom) in denoms.iter().enumerate() {
            self.apply(id, weights.param_mut(id), denom)?;
        }
        Ok(norm)
    }
}

/// Sums micro-batch gradients; [`GradAccumulator::flush`] returns their
/// mean.
#[derive(Debug)]
pub struct GradAccumulator {
    sum: Option<GradSet>,
    count: usize,
}

impl Default for GradAccumulator {
    fn default() -> Self {
        Self::new()
    }
}

impl GradAccumulator {
    pub fn new() -> Self {
        GradAccumulator { sum: None, count: 0 }
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn add(&mut self, grads: GradSet) -> Result<()> {
        match &mut self.sum {
            None => self.sum = Some(grads),
            Some(sum) => {
                if sum.len() != grads.len() {
                    return Err(Error::Optimizer("accumulating gradients of different models".into()));
                }
                for (id, g) in grads.iter() {
                    match sum.get_mut(id) {
                        Some(s) => add_assign(s, g)?,
                        None => return Err(Error::Optimizer(format!("parameter {id} missing from accumulator"))),
                    }
                }
            }
        }
        self.count += 1;
        Ok(())
    }

    /// Mean of the accumulated gradients; the accumulator is emptied.
    pub fn flush(&mut self) -> Result<GradSet> {
        let mut sum = self
            .sum
            .take()
            .ok_or_else(|| Error::Optimizer("flush before any gradients were accumulated".into()))?;
        if self.count > 1 {
            let s = 1.0 / self.count as f64;
            for (_, g) in sum.iter_mut() {
                scale_assign(g, s)?;
            }
        }
        self.count = 0;
        Ok(sum)
    }
}
