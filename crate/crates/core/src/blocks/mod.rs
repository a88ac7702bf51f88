//! Standard (unchunked) transformer blocks with hand-written backward passes.

pub mod attention;
pub mod lmhead;
pub mod mlp;
pub mod rmsnorm;

use std::ops::Range;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use attention::{AttnConfig, AttnGrads, AttnSaved, AttnWeights};
pub use lmhead::{LmHeadSaved, LmHeadWeights};
pub use mlp::{MlpGrads, MlpSaved, MlpWeights};
pub use rmsnorm::RmsNormSaved;

/// Tensor labels used in memory timelines.
pub mod labels {
    pub const MLP_GATE: &str = "mlp.gate";
    pub const MLP_UP: &str = "mlp.up";
    pub const MLP_HIDDEN: &str = "mlp.hidden";
    pub const MLP_DHIDDEN: &str = "mlp.dhidden";
    pub const MLP_DUP: &str = "mlp.dup";
    pub const HEAD_LOGITS: &str = "head.logits";
    pub const ATTN_SCORES: &str = "attn.scores";
    pub const ATTN_DKV: &str = "attn.dkv";
    pub const ACT: &str = "act";
    pub const ACT_Q: &str = "act.q";
    pub const ACT_K: &str = "act.k";
    pub const ACT_V: &str = "act.v";
    pub const ACT_ATTN: &str = "act.attn";
    pub const ACT_CHUNK: &str = "act.chunk";
    pub const DACT: &str = "dact";
    pub const GRAD: &str = "grad";
    pub const WEIGHT: &str = "weight";
    pub const OPTIM_M: &str = "optim.m";
    pub const OPTIM_V: &str = "optim.v";
    pub const OPTIM_TMP: &str = "optim.tmp";

    /// Block intermediates: the tensors larger than a block's input that
    /// mini-sequence chunking shrinks.
    pub fn is_intermediate(label: &str) -> bool {
        label.starts_with("mlp.") || label.starts_with("head.")
    }

    pub fn is_logits(label: &str) -> bool {
        label == HEAD_LOGITS
    }

    pub fn is_grad(label: &str) -> bool {
        label == GRAD
    }

    pub fn is_optimizer(label: &str) -> bool {
        label.starts_with("optim.")
    }
}

pub const IGNORE_INDEX: i64 = -100;

/// Target ids for the LM-Head; `IGNORE_INDEX` marks positions excluded from
/// the loss.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Labels {
    ids: Vec<i64>,
}

impl Labels {
    pub fn new(ids: Vec<i64>, vocab: usize) -> Result<Labels> {
        if let Some((i, &bad)) = ids
            .iter()
            .enumerate()
            .find(|(_, &id)| id != IGNORE_INDEX && (id < 0 || id as usize >= vocab))
        {
            return Err(Error::Bounds {
                op: "labels",
                detail: format!("label {bad} at position {i} outside [0,{vocab})"),
            });
        }
        Ok(Labels { ids })
    }

    pub fn ids(&self) -> &[i64] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn valid_count(&self) -> usize {
        self.ids.iter().filter(|&&id| id != IGNORE_INDEX).count()
    }

    pub fn slice(&self, range: Range<usize>) -> Result<Labels> {
        if range.start > range.end || range.end > self.ids.len() {
            return Err(Error::Bounds {
                op: "labels.slice",
                detail: format!("{range:?} of {}", self.ids.len()),
            });
        }
        Ok(Labels {
            ids: self.ids[range].to_vec(),
        })
    }

    pub fn concat(parts: &[Labels]) -> Labels {
        Labels {
            ids: parts.iter().flat_map(|p| p.ids.iter().copied()).collect(),
        }
    }
}

pub(crate) fn check_rows(op: &'static str, t: &Tensor, rows: usize, cols: usize) -> Result<()> {
    if t.rows() != rows || t.cols() != cols {
        return Err(Error::dim(op, format!("expected {rows}x{cols}, got {:?}", t.shape())));
    }
    Ok(())
}

pub(crate) fn check_matrix(op: &'static str, t: &Tensor, rows: usize, cols: usize) -> Result<()> {
    if t.shape() != [rows, cols] {
        return Err(Error::dim(
            op,
            format!("expected [{rows}, {cols}], got {:?}", t.shape()),
        ));
    }
    Ok(())
}

/// Runs `$body` with `$t` bound to the element type of `$dtype`.
macro_rules! with_dtype {
    ($dtype:expr, $t:ident => $body:expr) => {
        match $dtype {
            $crate::tensor::Dtype::F64 => {
                type $t = f64;
                $body
            }
            $crate::tensor::Dtype::F32 => {
                type $t = f32;
                $body
            }
        }
    };
}
pub(crate) use with_dtype;
