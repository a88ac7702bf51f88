//! Gated MLP: `O = (SiLU(X·W_gate) ⊙ (X·W_up)) · W_down`.

use super::{check_matrix, check_rows, labels};
use crate::error::{Error, Result};
use crate::tensor::{matmul, matmul_nt, matmul_nt_acc, matmul_tn_acc, mul_assign, silu, silu_backward_assign, Tensor};

#[derive(Debug, Clone)]
pub struct MlpWeights {
    pub w_gate: Tensor,
    pub w_up: Tensor,
    pub w_down: Tensor,
}

impl MlpWeights {
    pub fn d(&self) -> usize {
        self.w_gate.shape()[0]
    }

    pub fn intermediate(&self) -> usize {
        self.w_gate.shape()[1]
    }

    pub(crate) fn validate(&self) -> Result<()> {
        let (d, i) = (self.d(), self.intermediate());
        check_matrix("mlp.w_gate", &self.w_gate, d, i)?;
        check_matrix("mlp.w_up", &self.w_up, d, i)?;
        check_matrix("mlp.w_down", &self.w_down, i, d)
    }
}

#[derive(Debug)]
pub struct MlpGrads {
    pub w_gate: Tensor,
    pub w_up: Tensor,
    pub w_down: Tensor,
}

impl MlpGrads {
    pub fn zeros(w: &MlpWeights) -> MlpGrads {
        let z = |t: &Tensor| Tensor::zeros(t.arena(), t.shape(), t.dtype(), labels::GRAD);
        MlpGrads {
            w_gate: z(&w.w_gate),
            w_up: z(&w.w_up),
            w_down: z(&w.w_down),
        }
    }
}

/// Saved for backward: the input and both pre-activation products.
#[derive(Debug)]
pub struct MlpSaved {
    pub x: Tensor,
    pub gate: Tensor,
    pub up: Tensor,
}

/// Gate and up projections of `x`.
pub(crate) fn project(x: &Tensor, w: &MlpWeights) -> Result<(Tensor, Tensor)> {
    let gate = matmul(x, &w.w_gate, labels::MLP_GATE)?;
    let up = matmul(x, &w.w_up, labels::MLP_UP)?;
    Ok((gate, up))
}

fn hidden(gate: &Tensor, up: &Tensor) -> Result<Tensor> {
    let mut h = silu(gate, labels::MLP_HIDDEN)?;
    mul_assign(&mut h, up)?;
    Ok(h)
}

/// Forward over one row block; returns the output and the pre-activations.
pub(crate) fn chunk_forward(x: &Tensor, w: &MlpWeights, out_label: &str) -> Result<(Tensor, Tensor, Tensor)> {
    let (gate, up) = project(x, w)?;
    let h = hidden(&gate, &up)?;
    let o = matmul(&h, &w.w_down, out_label)?;
    Ok((o, gate, up))
}

/// Backward over one row block, accumulating weight gradients into `grads`.
pub(crate) fn chunk_backward(
    dout: &Tensor,
    x: &Tensor,
    gate: Tensor,
    up: Tensor,
    w: &MlpWeights,
    grads: &mut MlpGrads,
) -> Result<Tensor> {
    let h = hidden(&gate, &up)?;
    matmul_tn_acc(&mut grads.w_down, &h, dout)?;
    drop(h);
    let mut dh = matmul_nt(dout, &w.w_down, labels::MLP_DHIDDEN)?;
    let mut dup = silu(&gate, labels::MLP_DUP)?;
    mul_assign(&mut dup, &dh)?;
    mul_assign(&mut dh, &up)?;
    drop(up);
    silu_backward_assign(&mut dh, &gate)?;
    drop(gate);
    let dgate = dh;
    let mut dx = matmul_nt(&dup, &w.w_up, labels::DACT)?;
    matmul_nt_acc(&mut dx, &dgate, &w.w_gate)?;
    matmul_tn_acc(&mut grads.w_up, x, &dup)?;
    matmul_tn_acc(&mut grads.w_gate, x, &dgate)?;
    Ok(dx)
}

pub fn mlp_forward(x: &Tensor, w: &MlpWeights) -> Result<(Tensor, MlpSaved)> {
    w.validate()?;
    check_rows("mlp_forward", x, x.rows(), w.d())?;
    let (o, gate, up) = chunk_forward(x, w, labels::ACT)?;
    Ok((o, MlpSaved { x: x.clone(), gate, up }))
}

/// Returns `(dX, weight gradients)`. Consumes the saved activations so they
/// are freed as soon as they are no longer needed.
pub fn mlp_backward(dout: &Tensor, saved: MlpSaved, w: &MlpWeights) -> Result<(Tensor, MlpGrads)> {
    w.validate()?;
    let n = saved.x.rows();
    if dout.rows() != n
        || dout.cols() != w.d()
        || saved.gate.rows() != n
        || saved.gate.cols() != w.intermediate()
        || saved.up.shape() != saved.gate.shape()
    {
        return Err(Error::Mismatch(format!(
            "mlp backward: upstream {:?}, saved x {:?}, gate {:?}",
            dout.shape(),
            saved.x.shape(),
            saved.gate.shape()
        )));
    }
    let mut grads = MlpGrads::zeros(w);
    let dx = chunk_backward(dout, &saved.x, saved.gate, saved.up, w, &mut grads)?;
    Ok((dx.reshape(saved.x.shape())?, grads))
}
