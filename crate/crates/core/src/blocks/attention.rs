//! Causal multi-head attention with grouped key/value heads and optional
//! rotary position embedding.
//!
//! Scores are materialized per (batch, head) in a tracked buffer of
//! `tile × S` elements; `score_tile = 0` materializes the full `S × S`
//! matrix. Backward recomputes the softmax rows instead of saving them.

use super::{check_matrix, labels, with_dtype};
use crate::error::{Error, Result};
use crate::tensor::{matmul, matmul_nt, matmul_nt_acc, matmul_tn, Element, Tensor};

const ROPE_BASE: f64 = 10000.0;
const SOFTMAX_FLOPS: u64 = 5;
const SOFTMAX_HBM: u64 = 2;
const SOFTMAX_BWD_FLOPS: u64 = 5;
const SOFTMAX_BWD_HBM: u64 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttnConfig {
    pub heads: usize,
    /// Query heads sharing one key/value head (1 = plain multi-head).
    pub groups: usize,
    pub rope: bool,
    /// Query rows per materialized score tile; 0 = all rows.
    pub score_tile: usize,
}

impl AttnConfig {
    pub fn kv_heads(&self) -> usize {
        self.heads / self.groups
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        if self.heads == 0
            || self.groups == 0
            || !d.is_multiple_of(self.heads)
            || !self.heads.is_multiple_of(self.groups)
        {
            return Err(Error::Config(format!(
                "attention needs d % heads == 0 and heads % G == 0 (d={d}, heads={}, G={})",
                self.heads, self.groups
            )));
        }
        if self.rope && !(d / self.heads).is_multiple_of(2) {
            return Err(Error::Config("rotary embedding needs an even head dimension".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct AttnWeights {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
}

impl AttnWeights {
    pub fn d(&self) -> usize {
        self.w_q.shape()[0]
    }

    fn validate(&self, cfg: &AttnConfig) -> Result<()> {
        let d = self.d();
        cfg.validate(d)?;
        let dkv = d / cfg.groups;
        check_matrix("attn.w_q", &self.w_q, d, d)?;
        check_matrix("attn.w_k", &self.w_k, d, dkv)?;
        check_matrix("attn.w_v", &self.w_v, d, dkv)?;
        check_matrix("attn.w_o", &self.w_o, d, d)
    }
}

#[derive(Debug)]
pub struct AttnGrads {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
}

#[derive(Debug)]
pub struct AttnSaved {
    pub x: Tensor,
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
    pub a: Tensor,
    pub positions: Vec<usize>,
    pub seq: usize,
}

/// Position of each row when rows are `B` sequences of length `seq` laid out
/// back to back.
pub fn default_positions(rows: usize, seq: usize) -> Vec<usize> {
    (0..rows).map(|r| r % seq).collect()
}

fn rope_kernel<T: Element>(data: &mut [T], positions: &[usize], heads: usize, hd: usize, inverse: bool) {
    let width = heads * hd;
    let half = hd / 2;
    for (row, &pos) in data.chunks_mut(width).zip(positions) {
        for h in 0..heads {
            let base = h * hd;
            for c in 0..half {
                let freq = ROPE_BASE.powf(-2.0 * c as f64 / hd as f64);
                let (s, co) = (pos as f64 * freq).sin_cos();
                let (s, co) = (T::of(if inverse { -s } else { s }), T::of(co));
                let (x0, x1) = (row[base + 2 * c], row[base + 2 * c + 1]);
                row[base + 2 * c] = x0 * co - x1 * s;
                row[base + 2 * c + 1] = x0 * s + x1 * co;
            }
        }
    }
}

/// Rotates each head's consecutive column pairs by position-dependent
/// angles; `inverse` applies the transposed rotation (the backward map).
pub fn apply_rope(t: &mut Tensor, positions: &[usize], heads: usize, inverse: bool) -> Result<()> {
    if positions.len() != t.rows() || !t.cols().is_multiple_of(heads) || !(t.cols() / heads).is_multiple_of(2) {
        return Err(Error::dim(
            "rope",
            format!("{:?} with {} positions and {heads} heads", t.shape(), positions.len()),
        ));
    }
    let hd = t.cols() / heads;
    with_dtype!(t.dtype(), T => rope_kernel::<T>(t.data_mut(), positions, heads, hd, inverse));
    Ok(())
}

struct Dims {
    batch: usize,
    seq: usize,
    heads: usize,
    group: usize,
    hd: usize,
    tile: usize,
}

impl Dims {
    fn qw(&self) -> usize {
        self.heads * self.hd
    }
    fn kw(&self) -> usize {
        self.heads / self.group * self.hd
    }
}

#[inline]
fn dot<T: Element>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |s, (&x, &y)| s + x * y)
}

/// Fills `row[..=i]` with the causal softmax of query row `i` of head `j`.
#[inline]
fn softmax_row<T: Element>(row: &mut [T], q: &[T], k: &[T], dm: &Dims, b: usize, j: usize, i: usize) {
    let (qw, kw, hd) = (dm.qw(), dm.kw(), dm.hd);
    let kvh = j / dm.group;
    let scale = T::one() / T::of(hd as f64).sqrt();
    let qi = &q[(b * dm.seq + i) * qw + j * hd..][..hd];
    let mut m = T::neg_infinity();
    for (kk, s) in row[..=i].iter_mut().enumerate() {
        let kr = &k[(b * dm.seq + kk) * kw + kvh * hd..][..hd];
        *s = dot(qi, kr) * scale;
        m = m.max(*s);
    }
    let mut sum = T::zero();
    for s in row[..=i].iter_mut() {
        *s = (*s - m).exp();
        sum = sum + *s;
    }
    for s in row[..=i].iter_mut() {
        *s = *s / sum;
    }
}

fn core_fwd<T: Element>(a: &mut [T], scores: &mut [T], q: &[T], k: &[T], v: &[T], dm: &Dims) {
    let (qw, kw, hd, seq) = (dm.qw(), dm.kw(), dm.hd, dm.seq);
    for b in 0..dm.batch {
        for j in 0..dm.heads {
            let kvh = j / dm.group;
            for t0 in (0..seq).step_by(dm.tile) {
                for i in t0..(t0 + dm.tile).min(seq) {
                    let row = &mut scores[(i - t0) * seq..(i - t0 + 1) * seq];
                    softmax_row(row, q, k, dm, b, j, i);
                    let ai = &mut a[(b * seq + i) * qw + j * hd..][..hd];
                    for (kk, &p) in row[..=i].iter().enumerate() {
                        let vr = &v[(b * seq + kk) * kw + kvh * hd..][..hd];
                        for (o, &x) in ai.iter_mut().zip(vr) {
                            *o = *o + p * x;
                        }
                    }
                }
            }
        }
    }
}

struct BwdOut<'a, T> {
    dq: &'a mut [T],
    dk: &'a mut [T],
    dv: &'a mut [T],
    scores: &'a mut [T],
    tk: &'a mut [T],
    tv: &'a mut [T],
}

#[allow(clippy::too_many_arguments)]
fn core_bwd<T: Element>(out: BwdOut<'_, T>, da: &[T], q: &[T], k: &[T], v: &[T], a: &[T], dm: &Dims) {
    let (qw, kw, hd, seq) = (dm.qw(), dm.kw(), dm.hd, dm.seq);
    let scale = T::one() / T::of(hd as f64).sqrt();
    let BwdOut {
        dq,
        dk,
        dv,
        scores,
        tk,
        tv,
    } = out;
    for b in 0..dm.batch {
        for j in 0..dm.heads {
            let kvh = j / dm.group;
            tk.iter_mut().for_each(|x| *x = T::zero());
            tv.iter_mut().for_each(|x| *x = T::zero());
            for t0 in (0..seq).step_by(dm.tile) {
                for i in t0..(t0 + dm.tile).min(seq) {
                    let row = &mut scores[(i - t0) * seq..(i - t0 + 1) * seq];
                    softmax_row(row, q, k, dm, b, j, i);
                    let off = (b * seq + i) * qw + j * hd;
                    let dai = &da[off..off + hd];
                    let di = dot(dai, &a[off..off + hd]);
                    let qi = &q[off..off + hd];
                    for (kk, s) in row[..=i].iter_mut().enumerate() {
                        let p = *s;
                        let vr = &v[(b * seq + kk) * kw + kvh * hd..][..hd];
                        for (t, &g) in tv[kk * hd..(kk + 1) * hd].iter_mut().zip(dai) {
                            *t = *t + p * g;
                        }
                        *s = p * (dot(dai, vr) - di);
                    }
                    let dqi = &mut dq[off..off + hd];
                    for (kk, &ds) in row[..=i].iter().enumerate() {
                        let kr = &k[(b * seq + kk) * kw + kvh * hd..][..hd];
                        let g = ds * scale;
                        for (o, &x) in dqi.iter_mut().zip(kr) {
                            *o = *o + g * x;
                        }
                        for (t, &x) in tk[kk * hd..(kk + 1) * hd].iter_mut().zip(qi) {
                            *t = *t + g * x;
                        }
                    }
                }
            }
            for s in 0..seq {
                let dst = (b * seq + s) * kw + kvh * hd;
                for c in 0..hd {
                    dk[dst + c] = dk[dst + c] + tk[s * hd + c];
                    dv[dst + c] = dv[dst + c] + tv[s * hd + c];
                }
            }
        }
    }
}

fn dims(q: &Tensor, k: &Tensor, v: &Tensor, seq: usize, heads: usize, group: usize, tile: usize) -> Result<Dims> {
    let n = q.rows();
    let bad = seq == 0
        || heads == 0
        || group == 0
        || !heads.is_multiple_of(group)
        || !n.is_multiple_of(seq)
        || !q.cols().is_multiple_of(heads)
        || k.rows() != n
        || v.shape() != k.shape()
        || k.cols() != q.cols() / group;
    if bad {
        return Err(Error::dim(
            "attention",
            format!(
                "q {:?}, k {:?}, v {:?}, seq {seq}, heads {heads}, G {group}",
                q.shape(),
                k.shape(),
                v.shape()
            ),
        ));
    }
    Ok(Dims {
        batch: n / seq,
        seq,
        heads,
        group,
        hd: q.cols() / heads,
        tile: if tile == 0 { seq } else { tile.min(seq) },
    })
}

fn count_core(arena: &crate::memtrack::Arena, dm: &Dims, backward: bool) {
    let pairs = (dm.batch * dm.heads) as u64;
    let ss = (dm.seq * dm.seq) as u64;
    let matmuls = if backward { 5 } else { 2 };
    for _ in 0..pairs * matmuls {
        arena.count_matmul(dm.seq, dm.hd, dm.seq);
    }
    if backward {
        arena.count(
            pairs * (SOFTMAX_FLOPS + SOFTMAX_BWD_FLOPS) * ss,
            pairs * (SOFTMAX_HBM + SOFTMAX_BWD_HBM) * ss,
        );
    } else {
        arena.count(pairs * SOFTMAX_FLOPS * ss, pairs * SOFTMAX_HBM * ss);
    }
}

/// Causal softmax attention over already projected `q [N×heads·hd]` and
/// `k, v [N×(heads/group)·hd]`, where `N` is a whole number of sequences of
/// length `seq`. Query head `j` reads key/value head `j / group`.
pub fn attention_core_forward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    seq: usize,
    heads: usize,
    group: usize,
    tile: usize,
) -> Result<Tensor> {
    let dm = dims(q, k, v, seq, heads, group, tile)?;
    let arena = q.arena();
    let mut a = Tensor::zeros(arena, &[q.rows(), q.cols()], q.dtype(), labels::ACT_ATTN);
    let mut scores = Tensor::zeros(arena, &[dm.tile, seq], q.dtype(), labels::ATTN_SCORES);
    with_dtype!(q.dtype(), T => core_fwd::<T>(a.data_mut(), scores.data_mut(), q.data(), k.data(), v.data(), &dm));
    drop(scores);
    count_core(arena, &dm, false);
    a.check_finite("attention")
}

/// Returns `(dq, dk, dv)` for [`attention_core_forward`]. Contributions of
/// the query heads sharing one key/value head are added in ascending head
/// order.
#[allow(clippy::too_many_arguments)]
pub fn attention_core_backward(
    da: &Tensor,
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    a: &Tensor,
    seq: usize,
    heads: usize,
    group: usize,
    tile: usize,
) -> Result<(Tensor, Tensor, Tensor)> {
    let dm = dims(q, k, v, seq, heads, group, tile)?;
    if da.shape() != a.shape() || a.rows() != q.rows() || a.cols() != q.cols() {
        return Err(Error::Mismatch(format!(
            "attention backward: upstream {:?}, saved output {:?}, q {:?}",
            da.shape(),
            a.shape(),
            q.shape()
        )));
    }
    let arena = q.arena();
    let dt = q.dtype();
    let mut dq = Tensor::zeros(arena, &[q.rows(), q.cols()], dt, labels::DACT);
    let mut dk = Tensor::zeros(arena, &[k.rows(), k.cols()], dt, labels::DACT);
    let mut dv = Tensor::zeros(arena, &[v.rows(), v.cols()], dt, labels::DACT);
    let mut scores = Tensor::zeros(arena, &[dm.tile, seq], dt, labels::ATTN_SCORES);
    let mut tk = Tensor::zeros(arena, &[seq, dm.hd], dt, labels::ATTN_DKV);
    let mut tv = Tensor::zeros(arena, &[seq, dm.hd], dt, labels::ATTN_DKV);
    with_dtype!(dt, T => core_bwd::<T>(
        BwdOut {
            dq: dq.data_mut(),
            dk: dk.data_mut(),
            dv: dv.data_mut(),
            scores: scores.data_mut(),
            tk: tk.data_mut(),
            tv: tv.data_mut(),
        },
        da.data(),
        q.data(),
        k.data(),
        v.data(),
        a.data(),
        &dm,
    ));
    drop((scores, tk, tv));
    count_core(arena, &dm, true);
    Ok((
        dq.check_finite("attention_backward")?,
        dk.check_finite("attention_backward")?,
        dv.check_finite("attention_backward")?,
    ))
}

/// `x` holds `N = B·seq` rows of width `d`. `positions` (one per row) are
/// only read when rotary embedding is on; `None` uses each row's offset
/// within its sequence.
pub fn attn_forward(
    x: &Tensor,
    w: &AttnWeights,
    cfg: &AttnConfig,
    seq: usize,
    positions: Option<&[usize]>,
) -> Result<(Tensor, AttnSaved)> {
    w.validate(cfg)?;
    if x.cols() != w.d() || seq == 0 || !x.rows().is_multiple_of(seq) {
        return Err(Error::dim(
            "attn_forward",
            format!("input {:?} with d={} and seq={seq}", x.shape(), w.d()),
        ));
    }
    let positions = match positions {
        Some(p) => p.to_vec(),
        None => default_positions(x.rows(), seq),
    };
    let mut q = matmul(x, &w.w_q, labels::ACT_Q)?;
    let mut k = matmul(x, &w.w_k, labels::ACT_K)?;
    let v = matmul(x, &w.w_v, labels::ACT_V)?;
    if cfg.rope {
        apply_rope(&mut q, &positions, cfg.heads, false)?;
        apply_rope(&mut k, &positions, cfg.kv_heads(), false)?;
    }
    let a = attention_core_forward(&q, &k, &v, seq, cfg.heads, cfg.groups, cfg.score_tile)?;
    let o = matmul(&a, &w.w_o, labels::ACT)?;
    Ok((
        o,
        AttnSaved {
            x: x.clone(),
            q,
            k,
            v,
            a,
            positions,
            seq,
        },
    ))
}

/// Gradients of the input projections given the gradients of the (rotated)
/// projections. Returns `(dX, dW_q, dW_k, dW_v)`.
pub(crate) fn projection_backward(
    x: &Tensor,
    w: &AttnWeights,
    dq: &Tensor,
    dk: &Tensor,
    dv: &Tensor,
) -> Result<(Tensor, Tensor, Tensor, Tensor)> {
    let dwq = matmul_tn(x, dq, labels::GRAD)?;
    let dwk = matmul_tn(x, dk, labels::GRAD)?;
    let dwv = matmul_tn(x, dv, labels::GRAD)?;
    let mut dx = matmul_nt(dq, &w.w_q, labels::DACT)?;
    matmul_nt_acc(&mut dx, dk, &w.w_k)?;
    matmul_nt_acc(&mut dx, dv, &w.w_v)?;
    Ok((dx, dwq, dwk, dwv))
}

pub fn attn_backward(
    dout: &Tensor,
    saved: AttnSaved,
    w: &AttnWeights,
    cfg: &AttnConfig,
) -> Result<(Tensor, AttnGrads)> {
    w.validate(cfg)?;
    if dout.rows() != saved.x.rows() || dout.cols() != w.d() || saved.q.rows() != saved.x.rows() {
        return Err(Error::Mismatch(format!(
            "attention backward: upstream {:?}, saved input {:?}",
            dout.shape(),
            saved.x.shape()
        )));
    }
    let AttnSaved {
        x,
        q,
        k,
        v,
        a,
        positions,
        seq,
    } = saved;
    let dwo = matmul_tn(&a, dout, labels::GRAD)?;
    let da = matmul_nt(dout, &w.w_o, labels::DACT)?;
    let (mut dq, mut dk, dv) =
        attention_core_backward(&da, &q, &k, &v, &a, seq, cfg.heads, cfg.groups, cfg.score_tile)?;
    drop((da, a, q, k, v));
    if cfg.rope {
        apply_rope(&mut dq, &positions, cfg.heads, true)?;
        apply_rope(&mut dk, &positions, cfg.kv_heads(), true)?;
    }
    let (dx, dwq, dwk, dwv) = projection_backward(&x, w, &dq, &dk, &dv)?;
    Ok((
        dx.reshape(x.shape())?,
        AttnGrads {
            w_q: dwq,
            w_k: dwk,
            w_v: dwv,
            w_o: dwo,
        },
    ))
}
