//! RMSNorm: `y = x · gain / sqrt(mean(x²) + ε)` over the last dimension.

use super::{labels, with_dtype};
use crate::error::{Error, Result};
use crate::memtrack::{NORM_BWD_FLOPS, NORM_BWD_HBM, NORM_FLOPS, NORM_HBM};
use crate::tensor::{Element, Tensor};

pub const EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct RmsNormSaved {
    pub x: Tensor,
}

fn check(op: &'static str, x: &Tensor, gain: &Tensor) -> Result<()> {
    if gain.shape() != [x.cols()] {
        return Err(Error::dim(
            op,
            format!("gain {:?} vs input {:?}", gain.shape(), x.shape()),
        ));
    }
    if gain.dtype() != x.dtype() {
        return Err(Error::Dtype {
            op,
            left: x.dtype(),
            right: gain.dtype(),
        });
    }
    Ok(())
}

fn inv_rms<T: Element>(row: &[T]) -> T {
    let n = T::of(row.len() as f64);
    let ms = row.iter().fold(T::zero(), |s, &v| s + v * v) / n;
    T::one() / (ms + T::of(EPS)).sqrt()
}

fn fwd_kernel<T: Element>(y: &mut [T], x: &[T], gain: &[T]) {
    let d = gain.len();
    for (yr, xr) in y.chunks_mut(d).zip(x.chunks(d)) {
        let r = inv_rms(xr);
        for ((o, &v), &g) in yr.iter_mut().zip(xr).zip(gain) {
            *o = v * r * g;
        }
    }
}

fn bwd_kernel<T: Element>(dx: &mut [T], dgain: &mut [T], dy: &[T], x: &[T], gain: &[T]) {
    let d = gain.len();
    let n = T::of(d as f64);
    for ((dxr, dyr), xr) in dx.chunks_mut(d).zip(dy.chunks(d)).zip(x.chunks(d)) {
        let r = inv_rms(xr);
        let mut dot = T::zero();
        for c in 0..d {
            let xhat = xr[c] * r;
            let dxhat = dyr[c] * gain[c];
            dot = dot + dxhat * xhat;
            dgain[c] = dgain[c] + dyr[c] * xhat;
        }
        let mean = dot / n;
        for c in 0..d {
            let xhat = xr[c] * r;
            dxr[c] = r * (dyr[c] * gain[c] - xhat * mean);
        }
    }
}

pub fn rmsnorm_forward(x: &Tensor, gain: &Tensor, label: &str) -> Result<(Tensor, RmsNormSaved)> {
    check("rmsnorm_forward", x, gain)?;
    let mut y = Tensor::zeros(x.arena(), x.shape(), x.dtype(), label);
    with_dtype!(x.dtype(), T => fwd_kernel::<T>(y.data_mut(), x.data(), gain.data()));
    let n = x.numel() as u64;
    x.arena().count(NORM_FLOPS * n, NORM_HBM * n);
    let y = y.check_finite("rmsnorm_forward")?;
    Ok((y, RmsNormSaved { x: x.clone() }))
}

/// Returns `(dx, dgain)`.
pub fn rmsnorm_backward(dy: &Tensor, saved: &RmsNormSaved, gain: &Tensor) -> Result<(Tensor, Tensor)> {
    let x = &saved.x;
    check("rmsnorm_backward", x, gain)?;
    if dy.shape() != x.shape() {
        return Err(Error::Mismatch(format!(
            "rmsnorm upstream {:?} vs saved input {:?}",
            dy.shape(),
            x.shape()
        )));
    }
    let mut dx = Tensor::zeros(x.arena(), x.shape(), x.dtype(), labels::DACT);
    let mut dgain = Tensor::zeros(x.arena(), gain.shape(), x.dtype(), labels::GRAD);
    with_dtype!(x.dtype(), T => bwd_kernel::<T>(
        dx.data_mut(),
        dgain.data_mut(),
        dy.data(),
        x.data(),
        gain.data(),
    ));
    let n = x.numel() as u64;
    x.arena().count(NORM_BWD_FLOPS * n, NORM_BWD_HBM * n);
    Ok((
        dx.check_finite("rmsnorm_backward")?,
        dgain.check_finite("rmsnorm_backward")?,
    ))
}
