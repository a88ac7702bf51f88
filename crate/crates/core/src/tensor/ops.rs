use std::ops::Range;

use super::{Element, Storage, Tensor};
use crate::error::{Error, Result};
use crate::memtrack::{
    BINARY_FLOPS, BINARY_HBM, SCALE_FLOPS, SCALE_HBM, SILU_BWD_FLOPS, SILU_BWD_HBM, SILU_FLOPS, SILU_HBM,
};

macro_rules! unary {
    ($t:expr, |$x:ident| $body:expr) => {
        match $t.storage() {
            Storage::F64($x) => Storage::F64($body),
            Storage::F32($x) => Storage::F32($body),
        }
    };
}

macro_rules! binary {
    ($op:expr, $a:expr, $b:expr, |$x:ident, $y:ident| $body:expr) => {
        match ($a.storage(), $b.storage()) {
            (Storage::F64($x), Storage::F64($y)) => Storage::F64($body),
            (Storage::F32($x), Storage::F32($y)) => Storage::F32($body),
            _ => {
                return Err(Error::Dtype {
                    op: $op,
                    left: $a.dtype(),
                    right: $b.dtype(),
                })
            }
        }
    };
}

macro_rules! binary_into {
    ($op:expr, $out:expr, $b:expr, |$o:ident, $y:ident| $body:expr) => {{
        let (left, right) = ($out.dtype(), $b.dtype());
        if left != right {
            return Err(Error::Dtype { op: $op, left, right });
        }
        match ($out.storage_mut(), $b.storage()) {
            (Storage::F64($o), Storage::F64($y)) => $body,
            (Storage::F32($o), Storage::F32($y)) => $body,
            _ => unreachable!("dtypes checked"),
        }
    }};
}

macro_rules! ternary_into {
    ($op:expr, $out:expr, $a:expr, $b:expr, |$o:ident, $x:ident, $y:ident| $body:expr) => {{
        let (left, right) = ($out.dtype(), $a.dtype());
        if left != right {
            return Err(Error::Dtype { op: $op, left, right });
        }
        match ($out.storage_mut(), $a.storage(), $b.storage()) {
            (Storage::F64($o), Storage::F64($x), Storage::F64($y)) => $body,
            (Storage::F32($o), Storage::F32($x), Storage::F32($y)) => $body,
            _ => unreachable!("dtypes checked"),
        }
    }};
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn out_shape(a: &Tensor, p: usize) -> Vec<usize> {
    let mut s = a.shape().to_vec();
    match s.last_mut() {
        Some(last) => *last = p,
        None => s.push(p),
    }
    s
}

fn count_matmul(a: &Tensor, b: &Tensor, n: usize, k: usize, p: usize) {
    let arena = a.arena();
    arena.count_matmul(n, k, p);
    let mut w = 0;
    if a.is_param() {
        w += a.numel() as u64;
    }
    if b.is_param() {
        w += b.numel() as u64;
    }
    if w > 0 {
        arena.count_weight_reads(w);
    }
}

// out[i][j] (+)= sum_k a[i][k] * b[k][j], accumulated in ascending k.
fn mm_nn<T: Element>(out: &mut [T], a: &[T], b: &[T], n: usize, k: usize, p: usize) {
    for i in 0..n {
        let orow = &mut out[i * p..(i + 1) * p];
        let arow = &a[i * k..(i + 1) * k];
        for (kk, &aik) in arow.iter().enumerate() {
            let brow = &b[kk * p..(kk + 1) * p];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + aik * bv;
            }
        }
    }
}

// out[i][j] (+)= sum_k a[k][i] * b[k][j]; a is k×n, b is k×p.
fn mm_tn<T: Element>(out: &mut [T], a: &[T], b: &[T], k: usize, n: usize, p: usize) {
    for kk in 0..k {
        let arow = &a[kk * n..(kk + 1) * n];
        let brow = &b[kk * p..(kk + 1) * p];
        for (i, &aki) in arow.iter().enumerate() {
            let orow = &mut out[i * p..(i + 1) * p];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + aki * bv;
            }
        }
    }
}

// out[i][j] (+)= sum_k a[i][k] * b[j][k]; a is n×k, b is p×k.
fn mm_nt<T: Element>(out: &mut [T], a: &[T], b: &[T], n: usize, k: usize, p: usize) {
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..p {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = out[i * p + j];
            for (&x, &y) in arow.iter().zip(brow) {
                s = s + x * y;
            }
            out[i * p + j] = s;
        }
    }
}

/// `a[N×K] · b[K×P]`; leading extents of `a` are kept.
pub fn matmul(a: &Tensor, b: &Tensor, label: &str) -> Result<Tensor> {
    let (n, k) = (a.rows(), a.cols());
    if b.shape().len() != 2 || b.shape()[0] != k {
        return Err(Error::dim("matmul", format!("{:?} x {:?}", a.shape(), b.shape())));
    }
    let p = b.shape()[1];
    let data = binary!("matmul", a, b, |x, y| {
        let mut out = vec![Default::default(); n * p];
        mm_nn(&mut out, x, y, n, k, p);
        out
    });
    count_matmul(a, b, n, k, p);
    Tensor::from_storage(a.arena(), &out_shape(a, p), data, label).check_finite("matmul")
}

/// `aᵀ · b` for `a[K×N]`, `b[K×P]`, giving `N×P`.
pub fn matmul_tn(a: &Tensor, b: &Tensor, label: &str) -> Result<Tensor> {
    let (k, n, p) = check_tn(a, b)?;
    let data = binary!("matmul_tn", a, b, |x, y| {
        let mut out = vec![Default::default(); n * p];
        mm_tn(&mut out, x, y, k, n, p);
        out
    });
    count_matmul(a, b, n, k, p);
    Tensor::from_storage(a.arena(), &[n, p], data, label).check_finite("matmul_tn")
}

/// `out += aᵀ · b`, continuing the accumulation in ascending row order of
/// `a`/`b`, so accumulating row chunks in order reproduces the full product.
pub fn matmul_tn_acc(out: &mut Tensor, a: &Tensor, b: &Tensor) -> Result<()> {
    let (k, n, p) = check_tn(a, b)?;
    if out.shape() != [n, p] {
        return Err(Error::dim(
            "matmul_tn_acc",
            format!("accumulator {:?} vs {n}x{p}", out.shape()),
        ));
    }
    if a.dtype() != b.dtype() {
        return Err(Error::Dtype {
            op: "matmul_tn_acc",
            left: a.dtype(),
            right: b.dtype(),
        });
    }
    ternary_into!("matmul_tn_acc", out, a, b, |o, x, y| mm_tn(o, x, y, k, n, p));
    count_matmul(a, b, n, k, p);
    finite_in_place(out, "matmul_tn_acc")
}

/// `a · bᵀ` for `a[N×K]`, `b[P×K]`; leading extents of `a` are kept.
pub fn matmul_nt(a: &Tensor, b: &Tensor, label: &str) -> Result<Tensor> {
    let (n, k, p) = check_nt(a, b)?;
    let data = binary!("matmul_nt", a, b, |x, y| {
        let mut out = vec![Default::default(); n * p];
        mm_nt(&mut out, x, y, n, k, p);
        out
    });
    count_matmul(a, b, n, k, p);
    Tensor::from_storage(a.arena(), &out_shape(a, p), data, label).check_finite("matmul_nt")
}

/// `out += a · bᵀ`.
pub fn matmul_nt_acc(out: &mut Tensor, a: &Tensor, b: &Tensor) -> Result<()> {
    let (n, k, p) = check_nt(a, b)?;
    if out.rows() != n || out.cols() != p {
        return Err(Error::dim(
            "matmul_nt_acc",
            format!("accumulator {:?} vs {n}x{p}", out.shape()),
        ));
    }
    if a.dtype() != b.dtype() {
        return Err(Error::Dtype {
            op: "matmul_nt_acc",
            left: a.dtype(),
            right: b.dtype(),
        });
    }
    ternary_into!("matmul_nt_acc", out, a, b, |o, x, y| mm_nt(o, x, y, n, k, p));
    count_matmul(a, b, n, k, p);
    finite_in_place(out, "matmul_nt_acc")
}

fn check_tn(a: &Tensor, b: &Tensor) -> Result<(usize, usize, usize)> {
    let (k, n) = (a.rows(), a.cols());
    if b.rows() != k {
        return Err(Error::dim("matmul_tn", format!("{:?}ᵀ x {:?}", a.shape(), b.shape())));
    }
    Ok((k, n, b.cols()))
}

fn check_nt(a: &Tensor, b: &Tensor) -> Result<(usize, usize, usize)> {
    let (n, k) = (a.rows(), a.cols());
    if b.shape().len() != 2 || b.shape()[1] != k {
        return Err(Error::dim("matmul_nt", format!("{:?} x {:?}ᵀ", a.shape(), b.shape())));
    }
    Ok((n, k, b.shape()[0]))
}

fn finite_in_place(t: &Tensor, op: &'static str) -> Result<()> {
    if t.storage().all_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

#[inline]
pub(crate) fn sigmoid<T: Element>(x: T) -> T {
    // split on sign so exp never overflows
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub(crate) fn silu_scalar<T: Element>(x: T) -> T {
    x * sigmoid(x)
}

#[inline]
pub(crate) fn silu_grad_scalar<T: Element>(x: T) -> T {
    let s = sigmoid(x);
    s + x * s * (T::one() - s)
}

/// Elementwise `x·σ(x)`.
pub fn silu(x: &Tensor, label: &str) -> Result<Tensor> {
    let data = unary!(x, |v| v.iter().map(|&a| silu_scalar(a)).collect());
    let e = x.numel() as u64;
    x.arena().count(SILU_FLOPS * e, SILU_HBM * e);
    Tensor::from_storage(x.arena(), x.shape(), data, label).check_finite("silu")
}

/// `upstream ⊙ (σ(x) + x·σ(x)·(1−σ(x)))`.
pub fn silu_backward(x: &Tensor, upstream: &Tensor, label: &str) -> Result<Tensor> {
    same_shape("silu_backward", x, upstream)?;
    let data = binary!("silu_backward", x, upstream, |a, g| a
        .iter()
        .zip(g)
        .map(|(&a, &g)| g * silu_grad_scalar(a))
        .collect());
    let e = x.numel() as u64;
    x.arena().count(SILU_BWD_FLOPS * e, SILU_BWD_HBM * e);
    Tensor::from_storage(x.arena(), x.shape(), data, label).check_finite("silu_backward")
}

/// In place: `upstream ← upstream ⊙ silu'(x)`.
pub fn silu_backward_assign(upstream: &mut Tensor, x: &Tensor) -> Result<()> {
    same_shape("silu_backward_assign", upstream, x)?;
    binary_into!("silu_backward_assign", upstream, x, |g, a| {
        for (g, &a) in g.iter_mut().zip(a) {
            *g *= silu_grad_scalar(a);
        }
    });
    let e = x.numel() as u64;
    x.arena().count(SILU_BWD_FLOPS * e, SILU_BWD_HBM * e);
    finite_in_place(upstream, "silu_backward_assign")
}

pub fn add(a: &Tensor, b: &Tensor, label: &str) -> Result<Tensor> {
    same_shape("add", a, b)?;
    let data = binary!("add", a, b, |x, y| x.iter().zip(y).map(|(&p, &q)| p + q).collect());
    let e = a.numel() as u64;
    a.arena().count(BINARY_FLOPS * e, BINARY_HBM * e);
    Tensor::from_storage(a.arena(), a.shape(), data, label).check_finite("add")
}

pub fn mul(a: &Tensor, b: &Tensor, label: &str) -> Result<Tensor> {
    same_shape("mul", a, b)?;
    let data = binary!("mul", a, b, |x, y| x.iter().zip(y).map(|(&p, &q)| p * q).collect());
    let e = a.numel() as u64;
    a.arena().count(BINARY_FLOPS * e, BINARY_HBM * e);
    Tensor::from_storage(a.arena(), a.shape(), data, label).check_finite("mul")
}

fn scale_kernel<T: Element>(x: &[T], s: f64) -> Vec<T> {
    let s = T::of(s);
    x.iter().map(|&p| p * s).collect()
}

pub fn scale(a: &Tensor, s: f64, label: &str) -> Result<Tensor> {
    let data = unary!(a, |x| scale_kernel(x, s));
    let e = a.numel() as u64;
    a.arena().count(SCALE_FLOPS * e, SCALE_HBM * e);
    Tensor::from_storage(a.arena(), a.shape(), data, label).check_finite("scale")
}

pub fn add_assign(a: &mut Tensor, b: &Tensor) -> Result<()> {
    same_shape("add_assign", a, b)?;
    binary_into!("add_assign", a, b, |x, y| {
        for (p, &q) in x.iter_mut().zip(y) {
            *p += q;
        }
    });
    let e = b.numel() as u64;
    b.arena().count(BINARY_FLOPS * e, BINARY_HBM * e);
    finite_in_place(a, "add_assign")
}

pub fn mul_assign(a: &mut Tensor, b: &Tensor) -> Result<()> {
    same_shape("mul_assign", a, b)?;
    binary_into!("mul_assign", a, b, |x, y| {
        for (p, &q) in x.iter_mut().zip(y) {
            *p *= q;
        }
    });
    let e = b.numel() as u64;
    b.arena().count(BINARY_FLOPS * e, BINARY_HBM * e);
    finite_in_place(a, "mul_assign")
}

pub fn scale_assign(a: &mut Tensor, s: f64) -> Result<()> {
    let e = a.numel() as u64;
    a.arena().count(SCALE_FLOPS * e, SCALE_HBM * e);
    match a.storage_mut() {
        Storage::F64(v) => v.iter_mut().for_each(|p| *p *= s),
        Storage::F32(v) => v.iter_mut().for_each(|p| *p *= s as f32),
    }
    finite_in_place(a, "scale_assign")
}

/// Copies rows `[start, end)` into a new allocation.
pub fn slice_rows(x: &Tensor, range: Range<usize>, label: &str) -> Result<Tensor> {
    let (n, d) = (x.rows(), x.cols());
    if range.start >= range.end || range.end > n {
        return Err(Error::Bounds {
            op: "slice_rows",
            detail: format!("range {range:?} of {n} rows"),
        });
    }
    let (lo, hi) = (range.start * d, range.end * d);
    let data = unary!(x, |v| v[lo..hi].to_vec());
    Ok(Tensor::from_storage(
        x.arena(),
        &[range.end - range.start, d],
        data,
        label,
    ))
}

/// Row-wise concatenation in list order.
pub fn concat_rows(parts: &[Tensor], label: &str) -> Result<Tensor> {
    let first = parts.first().ok_or_else(|| Error::dim("concat_rows", "no parts"))?;
    let d = first.cols();
    let mut rows = 0;
    for p in parts {
        if p.cols() != d {
            return Err(Error::dim(
                "concat_rows",
                format!("trailing extent {} vs {d}", p.cols()),
            ));
        }
        if p.dtype() != first.dtype() {
            return Err(Error::Dtype {
                op: "concat_rows",
                left: first.dtype(),
                right: p.dtype(),
            });
        }
        rows += p.rows();
    }
    let mut out = Tensor::zeros(first.arena(), &[rows, d], first.dtype(), label);
    let mut offset = 0;
    for p in parts {
        write_rows(&mut out, offset, p)?;
        offset += p.rows();
    }
    Ok(out)
}

/// Copies `src` into rows `[offset, offset + src.rows())` of `dst`.
pub fn write_rows(dst: &mut Tensor, offset: usize, src: &Tensor) -> Result<()> {
    let d = dst.cols();
    if src.cols() != d || offset + src.rows() > dst.rows() {
        return Err(Error::Bounds {
            op: "write_rows",
            detail: format!("{} rows at {offset} into {:?}", src.rows(), dst.shape()),
        });
    }
    let lo = offset * d;
    binary_into!("write_rows", dst, src, |o, s| {
        o[lo..lo + s.len()].copy_from_slice(s);
    });
    Ok(())
}
