//! LM-Head: logits `X·W_out` followed by mean cross-entropy over the
//! non-ignored labels.

use super::{check_matrix, labels, with_dtype, Labels, IGNORE_INDEX};
use crate::error::{Error, Result};
use crate::memtrack::{CE_BWD_FLOPS, CE_BWD_HBM, CE_FLOPS, CE_HBM};
use crate::tensor::{matmul, matmul_nt, matmul_tn_acc, Element, Tensor};

#[derive(Debug, Clone)]
pub struct LmHeadWeights {
    pub w_out: Tensor,
}

impl LmHeadWeights {
    pub fn d(&self) -> usize {
        self.w_out.shape()[0]
    }

    pub fn vocab(&self) -> usize {
        self.w_out.shape()[1]
    }
}

/// Standard-mode saved state: the full logits matrix.
#[derive(Debug)]
pub struct LmHeadSaved {
    pub x: Tensor,
    pub logits: Tensor,
    pub labels: Labels,
    pub loss_sum: f64,
    pub count: usize,
}

impl LmHeadSaved {
    pub fn loss(&self) -> f64 {
        self.loss_sum / self.count as f64
    }
}

fn logsumexp<T: Element>(row: &[T]) -> T {
    let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    let s = row.iter().fold(T::zero(), |a, &b| a + (b - m).exp());
    m + s.ln()
}

fn ce_forward_kernel<T: Element>(logits: &[T], ids: &[i64], v: usize, total: &mut f64) -> f64 {
    let mut chunk = 0.0;
    for (row, &id) in logits.chunks(v).zip(ids) {
        if id == IGNORE_INDEX {
            continue;
        }
        let l = (logsumexp(row) - row[id as usize]).to_f64().expect("finite");
        chunk += l;
        *total += l;
    }
    chunk
}

fn ce_backward_kernel<T: Element>(logits: &mut [T], ids: &[i64], v: usize, scale: T) {
    for (row, &id) in logits.chunks_mut(v).zip(ids) {
        if id == IGNORE_INDEX {
            row.iter_mut().for_each(|x| *x = T::zero());
            continue;
        }
        let lse = logsumexp(row);
        for x in row.iter_mut() {
            *x = (*x - lse).exp() * scale;
        }
        row[id as usize] = row[id as usize] - scale;
    }
}

/// Sum of per-row cross-entropy over valid rows. The sum is also added to
/// `total` row by row, so a running total across row blocks is independent
/// of how the rows are split.
pub(crate) fn ce_sum(logits: &Tensor, labels: &Labels, total: &mut f64) -> f64 {
    let v = logits.cols();
    let n = logits.numel() as u64;
    logits.arena().count(CE_FLOPS * n, CE_HBM * n);
    with_dtype!(logits.dtype(), T => ce_forward_kernel::<T>(logits.data(), labels.ids(), v, total))
}

/// Overwrites logits with `scale · (softmax − onehot)`; ignored rows become 0.
pub(crate) fn ce_backward_in_place(logits: &mut Tensor, labels: &Labels, scale: f64) -> Result<()> {
    let v = logits.cols();
    let n = logits.numel() as u64;
    logits.arena().count(CE_BWD_FLOPS * n, CE_BWD_HBM * n);
    with_dtype!(logits.dtype(), T => ce_backward_kernel::<T>(logits.data_mut(), labels.ids(), v, T::of(scale)));
    Ok(())
}

pub(crate) fn check_inputs(op: &'static str, x: &Tensor, labels: &Labels, w: &LmHeadWeights) -> Result<()> {
    check_matrix(op, &w.w_out, w.d(), w.vocab())?;
    if x.cols() != w.d() || x.rows() != labels.len() {
        return Err(Error::dim(
            op,
            format!(
                "input {:?}, {} labels, W_out {:?}",
                x.shape(),
                labels.len(),
                w.w_out.shape()
            ),
        ));
    }
    if let Some(&bad) = labels
        .ids()
        .iter()
        .find(|&&id| id != IGNORE_INDEX && id as usize >= w.vocab())
    {
        return Err(Error::Bounds {
            op,
            detail: format!("label {bad} outside vocabulary {}", w.vocab()),
        });
    }
    Ok(())
}

/// Logits and cross-entropy of one row block.
pub(crate) fn chunk_forward(x: &Tensor, labels: &Labels, w: &LmHeadWeights, total: &mut f64) -> Result<(Tensor, f64)> {
    let logits = matmul(x, &w.w_out, labels::HEAD_LOGITS)?;
    let sum = ce_sum(&logits, labels, total);
    Ok((logits, sum))
}

/// Backward of one row block given its logits; `scale` multiplies every
/// valid row's `softmax − onehot`. Accumulates into `dw`, returns dX.
pub(crate) fn chunk_backward(
    x: &Tensor,
    mut logits: Tensor,
    labels: &Labels,
    w: &LmHeadWeights,
    scale: f64,
    dw: &mut Tensor,
) -> Result<Tensor> {
    ce_backward_in_place(&mut logits, labels, scale)?;
    let dx = matmul_nt(&logits, &w.w_out, labels::DACT)?;
    matmul_tn_acc(dw, x, &logits)?;
    Ok(dx)
}

/// Loss-sum variant: returns the saved state with the summed loss and valid
/// count, without requiring any valid label. Used where the mean is taken
/// over a larger population (sequence-parallel shards).
pub fn lmhead_forward_sum(x: &Tensor, labels: &Labels, w: &LmHeadWeights) -> Result<LmHeadSaved> {
    check_inputs("lmhead_forward", x, labels, w)?;
    let mut total = 0.0;
    let (logits, _) = chunk_forward(x, labels, w, &mut total)?;
    Ok(LmHeadSaved {
        x: x.clone(),
        logits,
        labels: labels.clone(),
        loss_sum: total,
        count: labels.valid_count(),
    })
}

pub fn lmhead_forward(x: &Tensor, labels: &Labels, w: &LmHeadWeights) -> Result<(f64, LmHeadSaved)> {
    if labels.valid_count() == 0 {
        return Err(Error::Degenerate("every label is ignored".into()));
    }
    let saved = lmhead_forward_sum(x, labels, w)?;
    Ok((saved.loss(), saved))
}

/// Backward where every valid row's gradient is scaled by `scale`
/// (`upstream / count` for the mean loss).
pub fn lmhead_backward_scaled(saved: LmHeadSaved, w: &LmHeadWeights, scale: f64) -> Result<(Tensor, Tensor)> {
    if saved.logits.rows() != saved.x.rows() || saved.logits.cols() != w.vocab() || saved.x.cols() != w.d() {
        return Err(Error::Mismatch(format!(
            "lm-head backward: logits {:?}, x {:?}, W_out {:?}",
            saved.logits.shape(),
            saved.x.shape(),
            w.w_out.shape()
        )));
    }
    let mut dw = Tensor::zeros(w.w_out.arena(), w.w_out.shape(), w.w_out.dtype(), labels::GRAD);
    let LmHeadSaved { x, logits, labels, .. } = saved;
    let dx = chunk_backward(&x, logits, &labels, w, scale, &mut dw)?;
    Ok((dx.reshape(x.shape())?, dw))
}

/// Gradients of `upstream · loss`; returns `(dX, dW_out)`.
pub fn lmhead_backward(saved: LmHeadSaved, w: &LmHeadWeights, upstream: f64) -> Result<(Tensor, Tensor)> {
    if saved.count == 0 {
        return Err(Error::Degenerate("every label is ignored".into()));
    }
    let scale = upstream / saved.count as f64;
    lmhead_backward_scaled(saved, w, scale)
}
