//! Mini-sequence MLP and LM-Head: the token dimension is split into
//! contiguous chunks that run through the block one at a time, so block
//! intermediates only ever exist for one chunk. Backward recomputes each
//! chunk's intermediates from the saved input and accumulates weight
//! gradients in ascending chunk order.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::blocks::lmhead::{self, LmHeadWeights};
use crate::blocks::mlp::{self, MlpGrads, MlpWeights};
use crate::blocks::{check_rows, labels, Labels};
use crate::error::{Error, Result};
use crate::tensor::{slice_rows, write_rows, Tensor};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChunkPlan {
    pub m: usize,
    pub n: usize,
    pub ranges: Vec<Range<usize>>,
}

impl ChunkPlan {
    pub fn chunk_size(&self) -> usize {
        self.ranges.first().map(|r| r.len()).unwrap_or(0)
    }

    pub fn len(&self) -> usize {
        self.ranges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranges.is_empty()
    }
}

/// Splits `n` rows into chunks of `⌈n/m⌉` rows; the last chunk may be
/// smaller. When `m > n` every row is its own chunk.
pub fn make_chunk_plan(n: usize, m: usize) -> Result<ChunkPlan> {
    if n == 0 {
        return Err(Error::Degenerate("cannot chunk zero rows".into()));
    }
    if m == 0 {
        return Err(Error::Config("mini-sequence count must be at least 1".into()));
    }
    let size = n.div_ceil(m);
    let ranges = (0..n).step_by(size).map(|s| s..(s + size).min(n)).collect();
    Ok(ChunkPlan { m, n, ranges })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossMode {
    /// Sum of per-token losses over all chunks divided by the total valid
    /// count: identical to the unchunked mean.
    #[default]
    TokenWeighted,
    /// Mean of the per-chunk means.
    ChunkMean,
}

impl std::str::FromStr for LossMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "token-weighted" => Ok(LossMode::TokenWeighted),
            "chunk-mean" => Ok(LossMode::ChunkMean),
            other => Err(Error::Config(format!("unknown loss mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MiniSeqConfig {
    #[serde(rename = "M_mlp", default = "one")]
    pub m_mlp: usize,
    #[serde(rename = "M_head", default = "one")]
    pub m_head: usize,
    #[serde(default)]
    pub loss_mode: LossMode,
}

fn one() -> usize {
    1
}

impl Default for MiniSeqConfig {
    fn default() -> Self {
        MiniSeqConfig {
            m_mlp: 1,
            m_head: 1,
            loss_mode: LossMode::TokenWeighted,
        }
    }
}

impl MiniSeqConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m_mlp == 0 || self.m_head == 0 {
            return Err(Error::Config("M_mlp and M_head must be at least 1".into()));
        }
        Ok(())
    }
}

pub fn mask_labels_for_chunk(labels: &Labels, range: Range<usize>) -> Result<Labels> {
    labels.slice(range)
}

fn check_plan(op: &'static str, plan: &ChunkPlan, n: usize) -> Result<()> {
    if plan.n != n {
        return Err(Error::dim(op, format!("plan covers {} rows, input has {n}", plan.n)));
    }
    Ok(())
}

#[derive(Debug)]
pub struct MiniSeqMlpSaved {
    pub x: Tensor,
    pub plan: ChunkPlan,
}

pub fn miniseq_mlp_forward(x: &Tensor, w: &MlpWeights, plan: &ChunkPlan) -> Result<(Tensor, MiniSeqMlpSaved)> {
    w.validate()?;
    check_rows("miniseq_mlp_forward", x, x.rows(), w.d())?;
    check_plan("miniseq_mlp_forward", plan, x.rows())?;
    let mut out = Tensor::zeros(x.arena(), x.shape(), x.dtype(), labels::ACT);
    for r in &plan.ranges {
        let xi = slice_rows(x, r.clone(), labels::ACT_CHUNK)?;
        let (oi, gate, up) = mlp::chunk_forward(&xi, w, labels::ACT_CHUNK)?;
        drop((gate, up, xi));
        write_rows(&mut out, r.start, &oi)?;
    }
    Ok((
        out,
        MiniSeqMlpSaved {
            x: x.clone(),
            plan: plan.clone(),
        },
    ))
}

pub fn miniseq_mlp_backward(
    dout: &Tensor,
    saved: MiniSeqMlpSaved,
    w: &MlpWeights,
    plan: &ChunkPlan,
) -> Result<(Tensor, MlpGrads)> {
    w.validate()?;
    if &saved.plan != plan || dout.shape() != saved.x.shape() {
        return Err(Error::Mismatch(format!(
            "mini-sequence MLP backward: upstream {:?} vs saved {:?}, plan M={} vs saved M={}",
            dout.shape(),
            saved.x.shape(),
            plan.m,
            saved.plan.m
        )));
    }
    let x = saved.x;
    let mut grads = MlpGrads::zeros(w);
    let mut dx = Tensor::zeros(x.arena(), x.shape(), x.dtype(), labels::DACT);
    for r in &plan.ranges {
        let xi = slice_rows(&x, r.clone(), labels::ACT_CHUNK)?;
        let di = slice_rows(dout, r.clone(), labels::ACT_CHUNK)?;
        let (gate, up) = mlp::project(&xi, w)?;
        let dxi = mlp::chunk_backward(&di, &xi, gate, up, w, &mut grads)?;
        write_rows(&mut dx, r.start, &dxi)?;
    }
    Ok((dx, grads))
}

#[derive(Debug)]
pub struct MiniSeqHeadSaved {
    pub x: Tensor,
    pub labels: Labels,
    pub plan: ChunkPlan,
    pub mode: LossMode,
    pub chunk_sums: Vec<f64>,
    pub chunk_counts: Vec<usize>,
    pub loss_sum: f64,
    pub count: usize,
}

impl MiniSeqHeadSaved {
    /// Loss under the saved reduction mode. Chunks without valid labels
    /// contribute nothing to the chunk-mean numerator.
    pub fn loss(&self) -> f64 {
        match self.mode {
            LossMode::TokenWeighted => self.loss_sum / self.count as f64,
            LossMode::ChunkMean => {
                let m = self.plan.len() as f64;
                self.chunk_sums
                    .iter()
                    .zip(&self.chunk_counts)
                    .filter(|(_, &c)| c > 0)
                    .map(|(s, &c)| s / c as f64)
                    .sum::<f64>()
                    / m
            }
        }
    }

    /// Per-chunk multipliers of `softmax − onehot` for `upstream · loss`.
    fn chunk_scales(&self, upstream: f64) -> Vec<f64> {
        match self.mode {
            LossMode::TokenWeighted => vec![upstream / self.count as f64; self.plan.len()],
            LossMode::ChunkMean => {
                let m = self.plan.len() as f64;
                self.chunk_counts
                    .iter()
                    .map(|&c| if c == 0 { 0.0 } else { upstream / (m * c as f64) })
                    .collect()
            }
        }
    }
}

/// Forward that records per-chunk loss sums and counts without requiring a
/// valid label (see [`crate::blocks::lmhead::lmhead_forward_sum`]).
pub fn miniseq_lmhead_forward_sum(
    x: &Tensor,
    labels: &Labels,
    w: &LmHeadWeights,
    plan: &ChunkPlan,
    mode: LossMode,
) -> Result<MiniSeqHeadSaved> {
    lmhead::check_inputs("miniseq_lmhead_forward", x, labels, w)?;
    check_plan("miniseq_lmhead_forward", plan, x.rows())?;
    let mut total = 0.0;
    let mut chunk_sums = Vec::with_capacity(plan.len());
    let mut chunk_counts = Vec::with_capacity(plan.len());
    for (i, r) in plan.ranges.iter().enumerate() {
        let li = mask_labels_for_chunk(labels, r.clone())?;
        let xi = slice_rows(x, r.clone(), labels::ACT_CHUNK)?;
        let (logits, sum) = lmhead::chunk_forward(&xi, &li, w, &mut total)?;
        drop(logits);
        let count = li.valid_count();
        if count == 0 && mode == LossMode::ChunkMean {
            log::warn!("mini-sequence {i} has no valid labels; it adds 0 to the chunk-mean loss");
        }
        chunk_sums.push(sum);
        chunk_counts.push(count);
    }
    Ok(MiniSeqHeadSaved {
        x: x.clone(),
        labels: labels.clone(),
        plan: plan.clone(),
        mode,
        chunk_sums,
        chunk_counts,
        loss_sum: total,
        count: labels.valid_count(),
    })
}

pub fn miniseq_lmhead_forward(
    x: &Tensor,
    labels: &Labels,
    w: &LmHeadWeights,
    plan: &ChunkPlan,
    mode: LossMode,
) -> Result<(f64, MiniSeqHeadSaved)> {
    if labels.valid_count() == 0 {
        return Err(Error::Degenerate("every label is ignored".into()));
    }
    let saved = miniseq_lmhead_forward_sum(x, labels, w, plan, mode)?;
    Ok((saved.loss(), saved))
}

fn head_backward_with_scales(saved: MiniSeqHeadSaved, w: &LmHeadWeights, scales: &[f64]) -> Result<(Tensor, Tensor)> {
    let x = &saved.x;
    let mut dw = Tensor::zeros(w.w_out.arena(), w.w_out.shape(), w.w_out.dtype(), labels::GRAD);
    let mut dx = Tensor::zeros(x.arena(), x.shape(), x.dtype(), labels::DACT);
    for (r, &scale) in saved.plan.ranges.iter().zip(scales) {
        let li = mask_labels_for_chunk(&saved.labels, r.clone())?;
        let xi = slice_rows(x, r.clone(), labels::ACT_CHUNK)?;
        let logits = crate::tensor::matmul(&xi, &w.w_out, labels::HEAD_LOGITS)?;
        let dxi = lmhead::chunk_backward(&xi, logits, &li, w, scale, &mut dw)?;
        write_rows(&mut dx, r.start, &dxi)?;
    }
    Ok((dx, dw))
}

fn check_head_saved(saved: &MiniSeqHeadSaved, w: &LmHeadWeights, plan: &ChunkPlan) -> Result<()> {
    if &saved.plan != plan || saved.x.cols() != w.d() || saved.labels.len() != saved.x.rows() {
        return Err(Error::Mismatch(format!(
            "mini-sequence LM-Head backward: saved x {:?} with plan M={}, requested M={}, W_out {:?}",
            saved.x.shape(),
            saved.plan.m,
            plan.m,
            w.w_out.shape()
        )));
    }
    Ok(())
}

/// Gradients of `upstream · loss` under the saved reduction mode; returns
/// `(dX, dW_out)`.
pub fn miniseq_lmhead_backward(
    saved: MiniSeqHeadSaved,
    w: &LmHeadWeights,
    plan: &ChunkPlan,
    upstream: f64,
) -> Result<(Tensor, Tensor)> {
    check_head_saved(&saved, w, plan)?;
    if saved.count == 0 {
        return Err(Error::Degenerate("every label is ignored".into()));
    }
    let scales = saved.chunk_scales(upstream);
    head_backward_with_scales(saved, w, &scales)
}

/// Backward with one multiplier for every valid row of every chunk.
pub fn miniseq_lmhead_backward_scaled(
    saved: MiniSeqHeadSaved,
    w: &LmHeadWeights,
    plan: &ChunkPlan,
    scale: f64,
) -> Result<(Tensor, Tensor)> {
    check_head_saved(&saved, w, plan)?;
    let scales = vec![scale; plan.len()];
    head_backward_with_scales(saved, w, &scales)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plans_from_examples() {
        assert_eq!(make_chunk_plan(8, 2).unwrap().ranges, vec![0..4, 4..8]);
        assert_eq!(make_chunk_plan(8, 1).unwrap().ranges, vec![0..8]);
        assert_eq!(make_chunk_plan(7, 2).unwrap().ranges, vec![0..4, 4..7]);
        assert_eq!(make_chunk_plan(3, 5).unwrap().ranges, vec![0..1, 1..2, 2..3]);
        assert!(matches!(make_chunk_plan(0, 2), Err(Error::Degenerate(_))));
    }

    #[test]
    fn loss_mode_names() {
        assert_eq!("chunk-mean".parse::<LossMode>().unwrap(), LossMode::ChunkMean);
        assert_eq!("token-weighted".parse::<LossMode>().unwrap(), LossMode::TokenWeighted);
        assert!("mean".parse::<LossMode>().is_err());
    }
}
