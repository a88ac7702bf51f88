//! Single-process simulation of sequence parallelism with head-sharded
//! attention.
//!
//! `P` logical workers each own one contiguous slice of every sequence and a
//! private arena holding a full replica of the weights. Around attention,
//! all-to-all collectives swap the sequence sharding for a head sharding and
//! back. The loss is reduced from per-worker `(sum, count)` pairs and the
//! gradients with one mean all-reduce at the end of backward.
//!
//! Work between two collectives runs per worker, either in rank order or on
//! one thread per worker; collectives are executed by the driver in a fixed
//! (source, destination) order, so both schedules give identical results.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::blocks::attention::{apply_rope, attention_core_backward, attention_core_forward, projection_backward};
use crate::blocks::mlp::{mlp_backward, mlp_forward};
use crate::blocks::rmsnorm::{rmsnorm_backward, rmsnorm_forward};
use crate::blocks::{labels, with_dtype, Labels, RmsNormSaved};
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::memtrack::{Arena, MemReport};
use crate::miniseq::{make_chunk_plan, miniseq_mlp_backward, miniseq_mlp_forward, LossMode};
use crate::model::{
    embed, embed_backward, head_backward, head_forward, layer_param_id, GradSet, HeadSaved, LayerWeights, MlpSavedAny,
    ModelConfig, ModelWeights, Upstream, PARAMS_PER_LAYER,
};
use crate::optim::{AdamW, OptimConfig};
use crate::tensor::{add, add_assign, matmul, matmul_nt, matmul_tn, scale_assign, Element, Tensor};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Schedule {
    /// Workers run one after another within each phase.
    #[default]
    Sequential,
    /// One scoped thread per worker within each phase.
    Threaded,
}

impl FromStr for Schedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sequential" => Ok(Schedule::Sequential),
            "threaded" => Ok(Schedule::Threaded),
            _ => Err(Error::Config(format!("unknown schedule `{s}` (sequential | threaded)"))),
        }
    }
}

/// Direction of an all-to-all exchange.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Swap {
    /// `[B·S/P, W]` sequence shards to `[B·S, W/P]` column (head) shards.
    SeqToHead,
    /// The inverse.
    HeadToSeq,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum CollectiveKind {
    AllToAll,
    AllReduce,
}

/// One executed collective. Every worker takes part exactly once.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Collective {
    pub kind: CollectiveKind,
    pub round: u64,
    pub elements_in: u64,
    pub elements_out: u64,
}

fn a2a_kernel<T: Element>(src: &[&[T]], dst: &mut [&mut [T]], swap: Swap, batch: usize, seq: usize, width: usize) {
    let p = src.len();
    let local = seq / p;
    let cw = width / p;
    // worker `r` owns sequence rows `[r·local, (r+1)·local)` and column block `r`
    for (d, out) in dst.iter_mut().enumerate() {
        for (s, inp) in src.iter().enumerate() {
            for b in 0..batch {
                for i in 0..local {
                    match swap {
                        Swap::SeqToHead => {
                            let from = &inp[(b * local + i) * width + d * cw..][..cw];
                            out[(b * seq + s * local + i) * cw..][..cw].copy_from_slice(from);
                        }
                        Swap::HeadToSeq => {
                            let from = &inp[(b * seq + d * local + i) * cw..][..cw];
                            out[(b * local + i) * width + s * cw..][..cw].copy_from_slice(from);
                        }
                    }
                }
            }
        }
    }
}

/// Exchanges `inputs` (one per worker, in rank order) between sequence and
/// head sharding. Outputs are allocated in `arenas[r]`, keep the input
/// labels, and are returned in rank order. `width` is the full column count.
pub fn all_to_all(inputs: &[Tensor], swap: Swap, batch: usize, seq: usize, arenas: &[Arena]) -> Result<Vec<Tensor>> {
    let p = inputs.len();
    if p == 0 || arenas.len() != p {
        return Err(Error::Config(
            "all-to-all needs one input and one arena per worker".into(),
        ));
    }
    if !seq.is_multiple_of(p) {
        return Err(Error::Divisibility(format!(
            "sequence length {seq} is not divisible by {p} workers"
        )));
    }
    let (rows_in, rows_out) = match swap {
        Swap::SeqToHead => (batch * seq / p, batch * seq),
        Swap::HeadToSeq => (batch * seq, batch * seq / p),
    };
    let cols_in = inputs[0].cols();
    let width = match swap {
        Swap::SeqToHead => cols_in,
        Swap::HeadToSeq => cols_in * p,
    };
    if width % p != 0 {
        return Err(Error::Divisibility(format!(
            "{width} columns cannot be split over {p} workers"
        )));
    }
    let dtype = inputs[0].dtype();
    for t in inputs {
        if t.rows() != rows_in || t.cols() != cols_in || t.dtype() != dtype {
            return Err(Error::dim(
                "all_to_all",
                format!(
                    "expected [{rows_in}, {cols_in}] {dtype} shards, got {:?} {}",
                    t.shape(),
                    t.dtype()
                ),
            ));
        }
    }
    let cols_out = match swap {
        Swap::SeqToHead => width / p,
        Swap::HeadToSeq => width,
    };
    let mut outs: Vec<Tensor> = inputs
        .iter()
        .zip(arenas)
        .map(|(t, a)| Tensor::zeros(a, &[rows_out, cols_out], dtype, t.label()))
        .collect();
    with_dtype!(dtype, T => {
        let src: Vec<&[T]> = inputs.iter().map(|t| t.data::<T>()).collect();
        let mut dst: Vec<&mut [T]> = outs.iter_mut().map(|t| t.data_mut::<T>()).collect();
        a2a_kernel::<T>(&src, &mut dst, swap, batch, seq, width);
    });
    Ok(outs)
}

/// Repeats each key/value head `group` times so key/value columns line up
/// with query heads.
fn expand_heads(t: &Tensor, kv_heads: usize, group: usize, label: &str) -> Tensor {
    let hd = t.cols() / kv_heads;
    let mut out = Tensor::zeros(t.arena(), &[t.rows(), t.cols() * group], t.dtype(), label);
    with_dtype!(t.dtype(), T => {
        let src = t.data::<T>();
        let w_out = kv_heads * group * hd;
        let dst = out.data_mut::<T>();
        for r in 0..t.rows() {
            for j in 0..kv_heads * group {
                let kvh = j / group;
                dst[r * w_out + j * hd..][..hd].copy_from_slice(&src[r * t.cols() + kvh * hd..][..hd]);
            }
        }
    });
    out
}

/// Adjoint of [`expand_heads`]: sums each group of query-head columns into
/// its key/value head, in ascending head order.
fn reduce_heads(t: &Tensor, kv_heads: usize, group: usize) -> Tensor {
    let hd = t.cols() / (kv_heads * group);
    let w_in = t.cols();
    let mut out = Tensor::zeros(t.arena(), &[t.rows(), kv_heads * hd], t.dtype(), labels::DACT);
    with_dtype!(t.dtype(), T => {
        let src = t.data::<T>();
        let dst = out.data_mut::<T>();
        for r in 0..t.rows() {
            for j in 0..kv_heads * group {
                let kvh = j / group;
                for c in 0..hd {
                    let o = r * kv_heads * hd + kvh * hd + c;
                    dst[o] += src[r * w_in + j * hd + c];
                }
            }
        }
    });
    out
}

#[derive(Debug)]
pub struct WorkerState {
    pub rank: usize,
    pub arena: Arena,
    pub weights: ModelWeights,
    pub optim: Option<AdamW>,
}

#[derive(Debug)]
struct LayerSaved {
    attn_norm: RmsNormSaved,
    h1: Tensor,
    q: Tensor,
    k: Tensor,
    v: Tensor,
    a_heads: Tensor,
    a: Tensor,
    mlp_norm: RmsNormSaved,
    mlp: MlpSavedAny,
}

#[allow(clippy::large_enum_variant)]
enum Saved {
    Full(LayerSaved),
    Checkpoint(Tensor),
}

/// Per-worker shard of a global batch.
#[derive(Debug, Clone)]
struct Shard {
    batch: Batch,
    positions: Vec<usize>,
}

/// Output of one simulated forward/backward.
#[derive(Debug)]
pub struct SpStepOutput {
    pub loss: f64,
    /// Mean all-reduced gradients, one identical copy per worker.
    pub grads: Vec<GradSet>,
    pub reports: Vec<MemReport>,
}

#[derive(Debug)]
pub struct SpSim {
    pub cfg: ModelConfig,
    pub schedule: Schedule,
    pub workers: Vec<WorkerState>,
    pub log: Vec<Collective>,
}

impl SpSim {
    /// Replicates `weights` into one fresh arena per worker.
    pub fn new(cfg: &ModelConfig, weights: &ModelWeights, p: usize, schedule: Schedule) -> Result<SpSim> {
        cfg.validate()?;
        if p == 0 {
            return Err(Error::Config("need at least one worker".into()));
        }
        if !cfg.s.is_multiple_of(p) {
            return Err(Error::Divisibility(format!("S={} is not divisible by P={p}", cfg.s)));
        }
        if !cfg.heads.is_multiple_of(p) {
            return Err(Error::Divisibility(format!(
                "heads={} is not divisible by P={p}",
                cfg.heads
            )));
        }
        if p > 1 && cfg.miniseq.loss_mode != LossMode::TokenWeighted {
            return Err(Error::Config(
                "sharded LM-Head loss is only defined for the token-weighted reduction".into(),
            ));
        }
        let workers = (0..p)
            .map(|rank| {
                let arena = Arena::new();
                WorkerState {
                    rank,
                    weights: weights.copy_to(cfg, &arena),
                    arena,
                    optim: None,
                }
            })
            .collect();
        Ok(SpSim {
            cfg: cfg.clone(),
            schedule,
            workers,
            log: Vec::new(),
        })
    }

    pub fn p(&self) -> usize {
        self.workers.len()
    }

    pub fn arenas(&self) -> Vec<Arena> {
        self.workers.iter().map(|w| w.arena.clone()).collect()
    }

    /// Errors unless every replica is bitwise identical to rank 0's.
    pub fn check_replicas(&self) -> Result<()> {
        let first = &self.workers[0].weights;
        for w in &self.workers[1..] {
            if !w.weights.bitwise_eq(first) {
                return Err(Error::Mismatch(format!(
                    "weights on rank {} differ from rank 0",
                    w.rank
                )));
            }
        }
        Ok(())
    }

    /// Runs `f` once per worker with that worker's item.
    fn run<I, O, F>(&mut self, items: Vec<I>, f: F) -> Result<Vec<O>>
    where
        I: Send,
        O: Send,
        F: Fn(&mut WorkerState, I) -> Result<O> + Sync,
    {
        debug_assert_eq!(items.len(), self.workers.len());
        match self.schedule {
            Schedule::Sequential => self.workers.iter_mut().zip(items).map(|(w, i)| f(w, i)).collect(),
            Schedule::Threaded => {
                let f = &f;
                std::thread::scope(|s| {
                    let handles: Vec<_> = self
                        .workers
                        .iter_mut()
                        .zip(items)
                        .map(|(w, i)| s.spawn(move || f(w, i)))
                        .collect();
                    handles
                        .into_iter()
                        .map(|h| h.join().unwrap_or_else(|e| std::panic::resume_unwind(e)))
                        .collect()
                })
            }
        }
    }

    fn exchange(&mut self, inputs: Vec<Tensor>, swap: Swap) -> Result<Vec<Tensor>> {
        let out = all_to_all(&inputs, swap, self.cfg.b, self.cfg.s, &self.arenas())?;
        let count = |v: &[Tensor]| v.iter().map(|t| t.numel() as u64).sum();
        self.log.push(Collective {
            kind: CollectiveKind::AllToAll,
            round: self.log.len() as u64,
            elements_in: count(&inputs),
            elements_out: count(&out),
        });
        Ok(out)
    }

    fn note_all_reduce(&mut self, elements_in: u64, elements_out: u64) {
        self.log.push(Collective {
            kind: CollectiveKind::AllReduce,
            round: self.log.len() as u64,
            elements_in,
            elements_out,
        });
    }

    fn shards(&self, batch: &Batch) -> Result<Vec<Shard>> {
        let (b, s, p) = (self.cfg.b, self.cfg.s, self.p());
        if batch.batch != b || batch.seq != s {
            return Err(Error::Data(format!(
                "batch of {}×{} does not match configured B={b}, S={s}",
                batch.batch, batch.seq
            )));
        }
        let local = s / p;
        (0..p)
            .map(|r| {
                let mut tokens = Vec::with_capacity(b * local);
                let mut parts = Vec::with_capacity(b);
                for seq in 0..b {
                    let range = seq * s + r * local..seq * s + (r + 1) * local;
                    tokens.extend_from_slice(&batch.tokens[range.clone()]);
                    parts.push(batch.labels.slice(range)?);
                }
                let positions = (0..b * local).map(|i| r * local + i % local).collect();
                Ok(Shard {
                    batch: Batch {
                        tokens,
                        labels: Labels::concat(&parts),
                        batch: b,
                        seq: local,
                    },
                    positions,
                })
            })
            .collect()
    }

    fn layer_forward(
        &mut self,
        l: usize,
        xs: Vec<Tensor>,
        shards: &[Shard],
        keep: bool,
    ) -> Result<(Vec<Tensor>, Vec<Saved>)> {
        let cfg = self.cfg.clone();
        let attn = cfg.attn();
        let kvh = attn.kv_heads();
        let p = self.p();
        let items: Vec<_> = xs.into_iter().zip(shards.iter().map(|s| s.positions.clone())).collect();
        let pre = self.run(items, |w, (x, pos)| {
            let lw = &w.weights.layers[l];
            let (h1, norm) = rmsnorm_forward(&x, &lw.attn_norm, labels::ACT)?;
            let mut q = matmul(&h1, &lw.attn.w_q, labels::ACT_Q)?;
            let mut k = matmul(&h1, &lw.attn.w_k, labels::ACT_K)?;
            let v = matmul(&h1, &lw.attn.w_v, labels::ACT_V)?;
            if attn.rope {
                apply_rope(&mut q, &pos, attn.heads, false)?;
                apply_rope(&mut k, &pos, kvh, false)?;
            }
            let kf = expand_heads(&k, kvh, attn.groups, labels::ACT_K);
            let vf = expand_heads(&v, kvh, attn.groups, labels::ACT_V);
            Ok((x, h1, norm, q, kf, vf))
        })?;
        let mut rest = Vec::with_capacity(p);
        let (mut qs, mut ks, mut vs) = (Vec::new(), Vec::new(), Vec::new());
        for (x, h1, norm, q, k, v) in pre {
            rest.push((x, h1, norm));
            qs.push(q);
            ks.push(k);
            vs.push(v);
        }
        let qh = self.exchange(std::mem::take(&mut qs), Swap::SeqToHead)?;
        let kh = self.exchange(std::mem::take(&mut ks), Swap::SeqToHead)?;
        let vh = self.exchange(std::mem::take(&mut vs), Swap::SeqToHead)?;
        let local_heads = attn.heads / p;
        let items: Vec<_> = qh.into_iter().zip(kh).zip(vh).collect();
        let core = self.run(items, |_, ((q, k), v)| {
            let a = attention_core_forward(&q, &k, &v, cfg.s, local_heads, 1, attn.score_tile)?;
            Ok((q, k, v, a))
        })?;
        let a_heads: Vec<Tensor> = core.iter().map(|c| c.3.clone()).collect();
        let a_seq = self.exchange(a_heads, Swap::HeadToSeq)?;
        let m_mlp = cfg.miniseq.m_mlp;
        let items: Vec<_> = rest.into_iter().zip(core).zip(a_seq).collect();
        let out = self.run(items, |w, (((x, h1, attn_norm), (q, k, v, a_heads)), a)| {
            let lw: &LayerWeights = &w.weights.layers[l];
            let o = matmul(&a, &lw.attn.w_o, labels::ACT)?;
            let x1 = add(&x, &o, labels::ACT)?;
            drop(o);
            let (h2, mlp_norm) = rmsnorm_forward(&x1, &lw.mlp_norm, labels::ACT)?;
            let (m, mlp) = if m_mlp > 1 {
                let plan = make_chunk_plan(h2.rows(), m_mlp)?;
                let (m, s) = miniseq_mlp_forward(&h2, &lw.mlp, &plan)?;
                (m, MlpSavedAny::MiniSeq(s, plan))
            } else {
                let (m, s) = mlp_forward(&h2, &lw.mlp)?;
                (m, MlpSavedAny::Standard(s))
            };
            drop(h2);
            let mut out = m;
            add_assign(&mut out, &x1)?;
            let saved = if keep {
                Saved::Full(LayerSaved {
                    attn_norm,
                    h1,
                    q,
                    k,
                    v,
                    a_heads,
                    a,
                    mlp_norm,
                    mlp,
                })
            } else {
                Saved::Checkpoint(x)
            };
            Ok((out, saved))
        })?;
        Ok(out.into_iter().unzip())
    }

    /// Backward through layer `l`; returns the input gradients and each
    /// worker's partial gradients for the layer's nine parameters.
    fn layer_backward(
        &mut self,
        l: usize,
        douts: Vec<Tensor>,
        saved: Vec<LayerSaved>,
        shards: &[Shard],
    ) -> Result<(Vec<Tensor>, Vec<Vec<Tensor>>)> {
        let cfg = self.cfg.clone();
        let attn = cfg.attn();
        let kvh = attn.kv_heads();
        let p = self.p();
        let items: Vec<_> = douts.into_iter().zip(saved).collect();
        let first = self.run(items, |w, (dout, s)| {
            let lw = &w.weights.layers[l];
            let (dh2, mlp_grads) = match s.mlp {
                MlpSavedAny::Standard(ms) => mlp_backward(&dout, ms, &lw.mlp)?,
                MlpSavedAny::MiniSeq(ms, plan) => miniseq_mlp_backward(&dout, ms, &lw.mlp, &plan)?,
            };
            let (mut dx1, dg2) = rmsnorm_backward(&dh2, &s.mlp_norm, &lw.mlp_norm)?;
            drop((dh2, s.mlp_norm));
            add_assign(&mut dx1, &dout)?;
            drop(dout);
            let dwo = matmul_tn(&s.a, &dx1, labels::GRAD)?;
            let da = matmul_nt(&dx1, &lw.attn.w_o, labels::DACT)?;
            drop(s.a);
            let rest = (s.attn_norm, s.h1, s.q, s.k, s.v, s.a_heads);
            Ok((
                dx1,
                da,
                rest,
                [dg2, mlp_grads.w_gate, mlp_grads.w_up, mlp_grads.w_down, dwo],
            ))
        })?;
        let mut das = Vec::with_capacity(p);
        let mut carry = Vec::with_capacity(p);
        for (dx1, da, rest, g) in first {
            das.push(da);
            carry.push((dx1, rest, g));
        }
        let da_h = self.exchange(das, Swap::SeqToHead)?;
        let local_heads = attn.heads / p;
        let items: Vec<_> = da_h.into_iter().zip(carry).collect();
        let core = self.run(items, |_, (da, (dx1, (attn_norm, h1, q, k, v, a), g))| {
            let (dq, dk, dv) = attention_core_backward(&da, &q, &k, &v, &a, cfg.s, local_heads, 1, attn.score_tile)?;
            Ok(((dq, dk, dv), (dx1, attn_norm, h1, g)))
        })?;
        let (mut dqs, mut dks, mut dvs, mut carry) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for ((dq, dk, dv), c) in core {
            dqs.push(dq);
            dks.push(dk);
            dvs.push(dv);
            carry.push(c);
        }
        let dq = self.exchange(dqs, Swap::HeadToSeq)?;
        let dk = self.exchange(dks, Swap::HeadToSeq)?;
        let dv = self.exchange(dvs, Swap::HeadToSeq)?;
        let items: Vec<_> = dq
            .into_iter()
            .zip(dk)
            .zip(dv)
            .zip(carry)
            .zip(shards.iter().map(|s| s.positions.clone()))
            .collect();
        let out = self.run(items, |w, ((((mut dq, dkf), dvf), (dx1, attn_norm, h1, g)), pos)| {
            let lw = &w.weights.layers[l];
            let mut dk = reduce_heads(&dkf, kvh, attn.groups);
            let dv = reduce_heads(&dvf, kvh, attn.groups);
            drop((dkf, dvf));
            if attn.rope {
                apply_rope(&mut dq, &pos, attn.heads, true)?;
                apply_rope(&mut dk, &pos, kvh, true)?;
            }
            let (dxa, dwq, dwk, dwv) = projection_backward(&h1, &lw.attn, &dq, &dk, &dv)?;
            drop((dq, dk, dv, h1));
            let (mut dx, dg1) = rmsnorm_backward(&dxa, &attn_norm, &lw.attn_norm)?;
            drop((dxa, attn_norm));
            add_assign(&mut dx, &dx1)?;
            let [dg2, dgate, dup, ddown, dwo] = g;
            Ok((dx, vec![dg1, dwq, dwk, dwv, dwo, dg2, dgate, dup, ddown]))
        })?;
        Ok(out.into_iter().unzip())
    }

    /// Forward and backward over `batch`, ending with the gradient
    /// all-reduce. The gradient seed makes the all-reduced mean equal the
    /// gradient of the global token-weighted loss.
    pub fn forward_backward(&mut self, batch: &Batch) -> Result<SpStepOutput> {
        self.check_replicas()?;
        let shards = self.shards(batch)?;
        let cfg = self.cfg.clone();
        let p = self.p();
        for w in &self.workers {
            w.arena.region_begin("sp.step");
        }
        let items: Vec<_> = shards.iter().map(|s| s.batch.tokens.clone()).collect();
        let mut xs = self.run(items, |w, t| embed(&w.weights, &t))?;
        let mut saved: Vec<Vec<Saved>> = (0..p).map(|_| Vec::new()).collect();
        for l in 0..cfg.layers {
            let (outs, sv) = self.layer_forward(l, xs, &shards, !cfg.recompute)?;
            for (r, s) in sv.into_iter().enumerate() {
                saved[r].push(s);
            }
            xs = outs;
        }
        let items: Vec<_> = xs.into_iter().zip(shards.iter().map(|s| s.batch.clone())).collect();
        let heads = self.run(items, |w, (x, b)| {
            let (h, norm) = rmsnorm_forward(&x, &w.weights.final_norm, labels::ACT)?;
            drop(x);
            let head = head_forward(&cfg, &w.weights, &h, &b)?;
            Ok((norm, head))
        })?;
        let loss_sum: f64 = heads.iter().map(|(_, h)| h.loss_sum()).sum();
        let count: usize = heads.iter().map(|(_, h)| h.count()).sum();
        self.note_all_reduce(2 * p as u64, 2 * p as u64);
        if count == 0 {
            return Err(Error::Degenerate("every label is ignored".into()));
        }
        let seed = Upstream::RowScale(p as f64 / count as f64);
        let nl = cfg.layers;
        let items: Vec<_> = heads.into_iter().collect();
        let tail = self.run(items, |w, (norm, head): (RmsNormSaved, HeadSaved)| {
            let mut grads = GradSet::for_config(&cfg);
            let (dh, dw_out) = head_backward(head, &w.weights.head, seed)?;
            grads.set(2 + nl * PARAMS_PER_LAYER, dw_out);
            let (dx, dgain) = rmsnorm_backward(&dh, &norm, &w.weights.final_norm)?;
            drop((dh, norm));
            grads.set(1 + nl * PARAMS_PER_LAYER, dgain);
            Ok((dx, grads))
        })?;
        let (mut dxs, mut grads): (Vec<Tensor>, Vec<GradSet>) = tail.into_iter().unzip();
        for l in (0..nl).rev() {
            let layer_saved: Vec<Saved> = saved
                .iter_mut()
                .map(|s| s.pop().expect("one entry per layer"))
                .collect();
            let full = if cfg.recompute {
                let xs: Vec<Tensor> = layer_saved
                    .into_iter()
                    .map(|s| match s {
                        Saved::Checkpoint(x) => x,
                        Saved::Full(_) => unreachable!("recompute keeps checkpoints only"),
                    })
                    .collect();
                let (outs, sv) = self.layer_forward(l, xs, &shards, true)?;
                drop(outs);
                sv
            } else {
                layer_saved
            };
            let full: Vec<LayerSaved> = full
                .into_iter()
                .map(|s| match s {
                    Saved::Full(f) => f,
                    Saved::Checkpoint(_) => unreachable!("layer state was recomputed"),
                })
                .collect();
            let (dprev, lg) = self.layer_backward(l, dxs, full, &shards)?;
            dxs = dprev;
            for (gs, layer_grads) in grads.iter_mut().zip(lg) {
                for (k, g) in layer_grads.into_iter().enumerate() {
                    gs.set(layer_param_id(l, k), g);
                }
            }
        }
        let items: Vec<_> = dxs
            .into_iter()
            .zip(shards.iter().map(|s| s.batch.tokens.clone()))
            .collect();
        let emb = self.run(items, |w, (dx, t)| embed_backward(&w.weights, &t, &dx))?;
        for (gs, e) in grads.iter_mut().zip(emb) {
            gs.set(0, e);
        }
        let grads = self.all_reduce_mean(grads)?;
        let mut reports = Vec::with_capacity(p);
        for w in &self.workers {
            reports.push(w.arena.region_end("sp.step")?.0);
        }
        Ok(SpStepOutput {
            loss: loss_sum / count as f64,
            grads,
            reports,
        })
    }

    /// Mean over workers, summed in rank order; every worker receives its own
    /// copy.
    fn all_reduce_mean(&mut self, mut parts: Vec<GradSet>) -> Result<Vec<GradSet>> {
        let p = parts.len();
        let n = parts[0].len();
        let elems: u64 = (0..n).filter_map(|i| parts[0].get(i)).map(|t| t.numel() as u64).sum();
        self.note_all_reduce(elems * p as u64, elems * p as u64);
        if p == 1 {
            return Ok(parts);
        }
        let names = self.cfg.param_names();
        let mut out: Vec<GradSet> = (0..p).map(|_| GradSet::new(names.clone())).collect();
        for id in 0..n {
            let mut acc = match parts[0].take(id) {
                Some(t) => t,
                None => return Err(Error::Mismatch(format!("rank 0 has no gradient for parameter {id}"))),
            };
            for (r, part) in parts.iter_mut().enumerate().skip(1) {
                let g = part
                    .take(id)
                    .ok_or_else(|| Error::Mismatch(format!("rank {r} has no gradient for parameter {id}")))?;
                add_assign(&mut acc, &g)?;
            }
            scale_assign(&mut acc, 1.0 / p as f64)?;
            for (r, o) in out.iter_mut().enumerate() {
                o.set(id, acc.copy_to(&self.workers[r].arena));
            }
        }
        Ok(out)
    }
}

/// Loss, rank 0's all-reduced gradients, and every worker's memory report
/// for one simulated step on fresh replicas of `weights`.
pub fn sp_train_step(
    cfg: &ModelConfig,
    weights: &ModelWeights,
    p: usize,
    batch: &Batch,
    schedule: Schedule,
) -> Result<(f64, GradSet, Vec<MemReport>)> {
    let mut sim = SpSim::new(cfg, weights, p, schedule)?;
    let out = sim.forward_backward(batch)?;
    let grads = out.grads.into_iter().next().expect("at least one worker");
    Ok((out.loss, grads, out.reports))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpStepMetrics {
    pub step: u64,
    pub loss: f64,
    pub grad_norm: f64,
    /// Peak live bytes of each worker's arena during the step.
    pub worker_peaks: Vec<u64>,
    pub flops: u64,
}

/// Simulated data-and-sequence-parallel trainer: every worker applies the
/// same AdamW update to its replica after the gradient all-reduce.
#[derive(Debug)]
pub struct SpTrainer {
    pub sim: SpSim,
    step: u64,
}

impl SpTrainer {
    pub fn new(
        cfg: &ModelConfig,
        ocfg: OptimConfig,
        weights: &ModelWeights,
        p: usize,
        schedule: Schedule,
    ) -> Result<SpTrainer> {
        if ocfg.in_backward || ocfg.accum != 1 {
            return Err(Error::Config(
                "the sequence-parallel simulation steps once per batch after the all-reduce \
                 (no in-backward stepping, no accumulation)"
                    .into(),
            ));
        }
        let mut sim = SpSim::new(cfg, weights, p, schedule)?;
        for w in &mut sim.workers {
            w.optim = Some(AdamW::new(ocfg, &w.weights)?);
        }
        Ok(SpTrainer { sim, step: 0 })
    }

    pub fn step(&mut self, batch: &Batch) -> Result<SpStepMetrics> {
        let before: Vec<u64> = self.sim.workers.iter().map(|w| w.arena.counters().flops).collect();
        for w in &self.sim.workers {
            w.arena.reset_peak();
        }
        let out = self.sim.forward_backward(batch)?;
        let norms = self.sim.run(out.grads, |w, g| {
            let opt = w.optim.as_mut().expect("optimizer attached");
            opt.step(&mut w.weights, g)
        })?;
        self.step += 1;
        Ok(SpStepMetrics {
            step: self.step,
            loss: out.loss,
            grad_norm: norms[0],
            worker_peaks: self.sim.workers.iter().map(|w| w.arena.peak_bytes()).collect(),
            flops: self
                .sim
                .workers
                .iter()
                .zip(before)
                .map(|(w, b)| w.arena.counters().flops - b)
                .sum(),
        })
    }
}
