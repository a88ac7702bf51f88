//! Llama-style decoder: embedding, `L` × [RMSNorm, causal attention,
//! residual, RMSNorm, MLP, residual], final RMSNorm, LM-Head. MLP and
//! LM-Head switch to their mini-sequence forms when the configured chunk
//! count exceeds one.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::blocks::attention::{attn_backward, attn_forward};
use crate::blocks::lmhead::{lmhead_backward, lmhead_backward_scaled, lmhead_forward_sum};
use crate::blocks::mlp::{mlp_backward, mlp_forward};
use crate::blocks::rmsnorm::{rmsnorm_backward, rmsnorm_forward};
use crate::blocks::{
    labels, AttnConfig, AttnGrads, AttnSaved, AttnWeights, LmHeadSaved, LmHeadWeights, MlpGrads, MlpSaved, MlpWeights,
    RmsNormSaved,
};
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::memtrack::Arena;
use crate::miniseq::{
    make_chunk_plan, miniseq_lmhead_backward, miniseq_lmhead_backward_scaled, miniseq_lmhead_forward_sum,
    miniseq_mlp_backward, miniseq_mlp_forward, ChunkPlan, MiniSeqConfig, MiniSeqHeadSaved, MiniSeqMlpSaved,
};
use crate::recompute::{policy_backward, policy_forward, CheckpointPolicy, Layer, LayerSaved};
use crate::tensor::{add, add_assign, Dtype, Tensor};

pub const INIT_STD: f64 = 0.02;
pub const PARAMS_PER_LAYER: usize = 9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d: usize,
    #[serde(rename = "I")]
    pub i: usize,
    #[serde(rename = "V")]
    pub v: usize,
    /// Query heads per key/value head.
    #[serde(rename = "G")]
    pub g: usize,
    pub heads: usize,
    pub layers: usize,
    #[serde(rename = "S")]
    pub s: usize,
    #[serde(rename = "B")]
    pub b: usize,
    pub dtype: Dtype,
    pub miniseq: MiniSeqConfig,
    pub recompute: bool,
    pub seed: u64,
    pub rope: bool,
    /// Query rows per materialized attention score tile; 0 = full `S × S`.
    pub attn_score_tile: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 64,
            i: 224,
            v: 2048,
            g: 2,
            heads: 4,
            layers: 2,
            s: 256,
            b: 1,
            dtype: Dtype::F64,
            miniseq: MiniSeqConfig::default(),
            recompute: false,
            seed: 0,
            rope: false,
            attn_score_tile: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let key = |k: &str, msg: String| Err(Error::Config(format!("`{k}`: {msg}")));
        for (k, v) in [
            ("d", self.d),
            ("I", self.i),
            ("V", self.v),
            ("G", self.g),
            ("heads", self.heads),
            ("S", self.s),
            ("B", self.b),
        ] {
            if v == 0 {
                return key(k, "must be at least 1".into());
            }
        }
        if !self.d.is_multiple_of(self.heads) {
            return key(
                "heads",
                format!("d={} is not divisible by heads={}", self.d, self.heads),
            );
        }
        if !self.heads.is_multiple_of(self.g) {
            return key("G", format!("heads={} is not divisible by G={}", self.heads, self.g));
        }
        if self.rope && !(self.d / self.heads).is_multiple_of(2) {
            return key("rope", "needs an even head dimension".into());
        }
        self.miniseq.validate()
    }

    pub fn attn(&self) -> AttnConfig {
        AttnConfig {
            heads: self.heads,
            groups: self.g,
            rope: self.rope,
            score_tile: self.attn_score_tile,
        }
    }

    pub fn policy(&self) -> CheckpointPolicy {
        CheckpointPolicy::new(self.recompute)
    }

    pub fn num_params(&self) -> usize {
        3 + PARAMS_PER_LAYER * self.layers
    }

    /// Parameter names in the canonical order used by gradient sets,
    /// optimizer state and checkpoint files.
    pub fn param_names(&self) -> Vec<String> {
        let mut names = vec!["embedding".to_string()];
        for l in 0..self.layers {
            for p in [
                "attn_norm",
                "w_q",
                "w_k",
                "w_v",
                "w_o",
                "mlp_norm",
                "w_gate",
                "w_up",
                "w_down",
            ] {
                names.push(format!("layers.{l}.{p}"));
            }
        }
        names.push("final_norm".into());
        names.push("w_out".into());
        names
    }

    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        let (d, i, v, dkv) = (self.d, self.i, self.v, self.d / self.g);
        let mut shapes = vec![vec![v, d]];
        for _ in 0..self.layers {
            shapes.extend([
                vec![d],
                vec![d, d],
                vec![d, dkv],
                vec![d, dkv],
                vec![d, d],
                vec![d],
                vec![d, i],
                vec![d, i],
                vec![i, d],
            ]);
        }
        shapes.push(vec![d]);
        shapes.push(vec![d, v]);
        shapes
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes().iter().map(|s| s.iter().product::<usize>()).sum()
    }
}

pub fn is_norm_param(name: &str) -> bool {
    name.ends_with("norm")
}

#[derive(Debug, Clone)]
pub struct LayerWeights {
    pub attn_norm: Tensor,
    pub attn: AttnWeights,
    pub mlp_norm: Tensor,
    pub mlp: MlpWeights,
}

#[derive(Debug, Clone)]
pub struct ModelWeights {
    pub embedding: Tensor,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Tensor,
    pub head: LmHeadWeights,
}

fn stream_id(name: &str) -> u64 {
    let h = Sha256::digest(name.as_bytes());
    u64::from_le_bytes(h[..8].try_into().expect("8 bytes"))
}

/// Independent generator for one named parameter.
fn param_rng(seed: u64, name: &str) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream_id(name));
    rng
}

impl ModelWeights {
    /// Normal(0, 0.02) matrices and unit norm gains, each parameter drawn
    /// from its own name-keyed stream.
    pub fn init(cfg: &ModelConfig, arena: &Arena) -> Result<ModelWeights> {
        cfg.validate()?;
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let tensors = cfg
            .param_names()
            .iter()
            .zip(cfg.param_shapes())
            .map(|(name, shape)| {
                let n: usize = shape.iter().product();
                let data: Vec<f64> = if is_norm_param(name) {
                    vec![1.0; n]
                } else {
                    let mut rng = param_rng(cfg.seed, name);
                    (0..n).map(|_| normal.sample(&mut rng)).collect()
                };
                Tensor::new_param(arena, &shape, cfg.dtype, &data, labels::WEIGHT)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ModelWeights::from_params(cfg, tensors))
    }

    /// Assembles weights from tensors in canonical order.
    pub fn from_params(cfg: &ModelConfig, params: Vec<Tensor>) -> ModelWeights {
        assert_eq!(params.len(), cfg.num_params());
        let mut it = params.into_iter();
        let mut next = || it.next().expect("length checked");
        let embedding = next();
        let layers = (0..cfg.layers)
            .map(|_| LayerWeights {
                attn_norm: next(),
                attn: AttnWeights {
                    w_q: next(),
                    w_k: next(),
                    w_v: next(),
                    w_o: next(),
                },
                mlp_norm: next(),
                mlp: MlpWeights {
                    w_gate: next(),
                    w_up: next(),
                    w_down: next(),
                },
            })
            .collect();
        let final_norm = next();
        let head = LmHeadWeights { w_out: next() };
        ModelWeights {
            embedding,
            layers,
            final_norm,
            head,
        }
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.embedding];
        for l in &self.layers {
            out.extend([
                &l.attn_norm,
                &l.attn.w_q,
                &l.attn.w_k,
                &l.attn.w_v,
                &l.attn.w_o,
                &l.mlp_norm,
                &l.mlp.w_gate,
                &l.mlp.w_up,
                &l.mlp.w_down,
            ]);
        }
        out.push(&self.final_norm);
        out.push(&self.head.w_out);
        out
    }

    pub fn param_mut(&mut self, id: usize) -> &mut Tensor {
        let nl = self.layers.len();
        if id == 0 {
            return &mut self.embedding;
        }
        if id == 1 + nl * PARAMS_PER_LAYER {
            return &mut self.final_norm;
        }
        if id == 2 + nl * PARAMS_PER_LAYER {
            return &mut self.head.w_out;
        }
        let l = &mut self.layers[(id - 1) / PARAMS_PER_LAYER];
        match (id - 1) % PARAMS_PER_LAYER {
            0 => &mut l.attn_norm,
            1 => &mut l.attn.w_q,
            2 => &mut l.attn.w_k,
            3 => &mut l.attn.w_v,
            4 => &mut l.attn.w_o,
            5 => &mut l.mlp_norm,
            6 => &mut l.mlp.w_gate,
            7 => &mut l.mlp.w_up,
            _ => &mut l.mlp.w_down,
        }
    }

    pub fn num_params(&self) -> usize {
        3 + PARAMS_PER_LAYER * self.layers.len()
    }

    pub fn bitwise_eq(&self, other: &ModelWeights) -> bool {
        let (a, b) = (self.params(), other.params());
        a.len() == b.len() && a.iter().zip(&b).all(|(x, y)| x.bitwise_eq(y))
    }

    pub fn max_abs_diff(&self, other: &ModelWeights) -> f64 {
        self.params()
            .iter()
            .zip(other.params())
            .map(|(a, b)| a.max_abs_diff(b))
            .fold(0.0, f64::max)
    }

    /// Deep copy into `arena`.
    pub fn copy_to(&self, cfg: &ModelConfig, arena: &Arena) -> ModelWeights {
        ModelWeights::from_params(cfg, self.params().iter().map(|t| t.copy_to(arena)).collect())
    }
}

pub(crate) fn layer_param_id(layer: usize, k: usize) -> usize {
    1 + layer * PARAMS_PER_LAYER + k
}

/// Per-parameter gradients in canonical order.
#[derive(Debug)]
pub struct GradSet {
    pub names: Vec<String>,
    grads: Vec<Option<Tensor>>,
}

impl GradSet {
    pub fn new(names: Vec<String>) -> GradSet {
        let grads = names.iter().map(|_| None).collect();
        GradSet { names, grads }
    }

    pub fn for_config(cfg: &ModelConfig) -> GradSet {
        GradSet::new(cfg.param_names())
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn set(&mut self, id: usize, grad: Tensor) {
        self.grads[id] = Some(grad);
    }

    pub fn get(&self, id: usize) -> Option<&Tensor> {
        self.grads[id].as_ref()
    }

    pub fn get_mut(&mut self, id: usize) -> Option<&mut Tensor> {
        self.grads[id].as_mut()
    }

    pub fn take(&mut self, id: usize) -> Option<Tensor> {
        self.grads[id].take()
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        let id = self.names.iter().position(|n| n == name)?;
        self.get(id)
    }

    pub fn is_complete(&self) -> bool {
        self.grads.iter().all(Option::is_some)
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &Tensor)> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (i, g)))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (usize, &mut Tensor)> {
        self.grads
            .iter_mut()
            .enumerate()
            .filter_map(|(i, g)| g.as_mut().map(|g| (i, g)))
    }

    /// `sqrt(Σ g²)` over all present gradients, summed in parameter order.
    pub fn global_norm(&self) -> f64 {
        self.iter().map(|(_, g)| g.sum_squares()).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &GradSet) -> f64 {
        assert_eq!(self.len(), other.len(), "gradient sets of different models");
        let mut worst: f64 = 0.0;
        for (a, b) in self.grads.iter().zip(&other.grads) {
            match (a, b) {
                (Some(a), Some(b)) => worst = worst.max(a.max_abs_diff(b)),
                (None, None) => {}
                _ => return f64::INFINITY,
            }
        }
        worst
    }

    pub fn bytes(&self) -> u64 {
        self.iter().map(|(_, g)| g.bytes()).sum()
    }
}

#[derive(Debug)]
pub enum MlpSavedAny {
    Standard(MlpSaved),
    MiniSeq(MiniSeqMlpSaved, ChunkPlan),
}

#[derive(Debug)]
pub struct DecoderSaved {
    pub attn_norm: RmsNormSaved,
    pub attn: AttnSaved,
    pub mlp_norm: RmsNormSaved,
    pub mlp: MlpSavedAny,
}

#[derive(Debug)]
pub struct DecoderGrads {
    pub attn_norm: Tensor,
    pub attn: AttnGrads,
    pub mlp_norm: Tensor,
    pub mlp: MlpGrads,
}

impl DecoderGrads {
    /// Gradients in canonical per-layer order.
    pub fn into_vec(self) -> Vec<Tensor> {
        vec![
            self.attn_norm,
            self.attn.w_q,
            self.attn.w_k,
            self.attn.w_v,
            self.attn.w_o,
            self.mlp_norm,
            self.mlp.w_gate,
            self.mlp.w_up,
            self.mlp.w_down,
        ]
    }
}

/// One decoder layer bound to its weights and sequence layout.
pub struct DecoderLayer<'a> {
    pub w: &'a LayerWeights,
    pub attn: AttnConfig,
    pub m_mlp: usize,
    pub seq: usize,
}

impl Layer for DecoderLayer<'_> {
    type Saved = DecoderSaved;
    type Grads = DecoderGrads;

    fn forward(&self, x: &Tensor) -> Result<(Tensor, DecoderSaved)> {
        let (h1, attn_norm) = rmsnorm_forward(x, &self.w.attn_norm, labels::ACT)?;
        let (a, attn) = attn_forward(&h1, &self.w.attn, &self.attn, self.seq, None)?;
        drop(h1);
        let x1 = add(x, &a, labels::ACT)?;
        drop(a);
        let (h2, mlp_norm) = rmsnorm_forward(&x1, &self.w.mlp_norm, labels::ACT)?;
        let (m, mlp) = if self.m_mlp > 1 {
            let plan = make_chunk_plan(h2.rows(), self.m_mlp)?;
            let (m, s) = miniseq_mlp_forward(&h2, &self.w.mlp, &plan)?;
            (m, MlpSavedAny::MiniSeq(s, plan))
        } else {
            let (m, s) = mlp_forward(&h2, &self.w.mlp)?;
            (m, MlpSavedAny::Standard(s))
        };
        drop(h2);
        let mut out = m;
        add_assign(&mut out, &x1)?;
        Ok((
            out,
            DecoderSaved {
                attn_norm,
                attn,
                mlp_norm,
                mlp,
            },
        ))
    }

    fn backward(&self, dout: &Tensor, saved: DecoderSaved) -> Result<(Tensor, DecoderGrads)> {
        let DecoderSaved {
            attn_norm,
            attn,
            mlp_norm,
            mlp,
        } = saved;
        let (dh2, mlp_grads) = match mlp {
            MlpSavedAny::Standard(s) => mlp_backward(dout, s, &self.w.mlp)?,
            MlpSavedAny::MiniSeq(s, plan) => miniseq_mlp_backward(dout, s, &self.w.mlp, &plan)?,
        };
        let (dx1_norm, dg2) = rmsnorm_backward(&dh2, &mlp_norm, &self.w.mlp_norm)?;
        drop((dh2, mlp_norm));
        let mut dx1 = dx1_norm;
        add_assign(&mut dx1, dout)?;
        let (dh1, attn_grads) = attn_backward(&dx1, attn, &self.w.attn, &self.attn)?;
        let (dx_norm, dg1) = rmsnorm_backward(&dh1, &attn_norm, &self.w.attn_norm)?;
        drop((dh1, attn_norm));
        let mut dx = dx_norm;
        add_assign(&mut dx, &dx1)?;
        Ok((
            dx,
            DecoderGrads {
                attn_norm: dg1,
                attn: attn_grads,
                mlp_norm: dg2,
                mlp: mlp_grads,
            },
        ))
    }
}

#[derive(Debug)]
pub enum HeadSaved {
    Standard(LmHeadSaved),
    MiniSeq(MiniSeqHeadSaved, ChunkPlan),
}

impl HeadSaved {
    pub fn loss_sum(&self) -> f64 {
        match self {
            HeadSaved::Standard(s) => s.loss_sum,
            HeadSaved::MiniSeq(s, _) => s.loss_sum,
        }
    }

    pub fn count(&self) -> usize {
        match self {
            HeadSaved::Standard(s) => s.count,
            HeadSaved::MiniSeq(s, _) => s.count,
        }
    }

    pub fn loss(&self) -> f64 {
        match self {
            HeadSaved::Standard(s) => s.loss(),
            HeadSaved::MiniSeq(s, _) => s.loss(),
        }
    }
}

/// Everything the model backward needs, under the active recompute policy.
#[derive(Debug)]
pub struct ModelSaved {
    pub tokens: Vec<u32>,
    pub layers: Vec<LayerSaved<DecoderSaved>>,
    pub final_norm: RmsNormSaved,
    pub head: HeadSaved,
    pub seq: usize,
}

impl ModelSaved {
    pub fn loss(&self) -> f64 {
        self.head.loss()
    }
}

/// How the LM-Head gradient is seeded.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Upstream {
    /// Gradient of `upstream · loss` for the configured reduction.
    Loss(f64),
    /// Every valid row's `softmax − onehot` multiplied by this factor
    /// (for reductions spanning several forward calls).
    RowScale(f64),
}

pub fn embed(weights: &ModelWeights, tokens: &[u32]) -> Result<Tensor> {
    let e = &weights.embedding;
    let (v, d) = (e.shape()[0], e.shape()[1]);
    if let Some((i, &t)) = tokens.iter().enumerate().find(|(_, &t)| t as usize >= v) {
        return Err(Error::Bounds {
            op: "embedding",
            detail: format!("token {t} at position {i} outside vocabulary {v}"),
        });
    }
    let mut x = Tensor::zeros(e.arena(), &[tokens.len(), d], e.dtype(), labels::ACT);
    crate::blocks::with_dtype!(e.dtype(), T => {
        let src = e.data::<T>();
        let dst = x.data_mut::<T>();
        for (row, &t) in tokens.iter().enumerate() {
            dst[row * d..(row + 1) * d].copy_from_slice(&src[t as usize * d..(t as usize + 1) * d]);
        }
    });
    Ok(x)
}

pub fn embed_backward(weights: &ModelWeights, tokens: &[u32], dx: &Tensor) -> Result<Tensor> {
    let e = &weights.embedding;
    let d = e.shape()[1];
    let mut g = Tensor::zeros(e.arena(), e.shape(), e.dtype(), labels::GRAD);
    crate::blocks::with_dtype!(e.dtype(), T => {
        let src = dx.data::<T>();
        let dst = g.data_mut::<T>();
        for (row, &t) in tokens.iter().enumerate() {
            for c in 0..d {
                let o = t as usize * d + c;
                dst[o] += src[row * d + c];
            }
        }
    });
    Ok(g)
}

pub(crate) fn head_forward(cfg: &ModelConfig, weights: &ModelWeights, h: &Tensor, batch: &Batch) -> Result<HeadSaved> {
    Ok(if cfg.miniseq.m_head > 1 {
        let plan = make_chunk_plan(h.rows(), cfg.miniseq.m_head)?;
        let s = miniseq_lmhead_forward_sum(h, &batch.labels, &weights.head, &plan, cfg.miniseq.loss_mode)?;
        HeadSaved::MiniSeq(s, plan)
    } else {
        HeadSaved::Standard(lmhead_forward_sum(h, &batch.labels, &weights.head)?)
    })
}

pub(crate) fn head_backward(saved: HeadSaved, w: &LmHeadWeights, up: Upstream) -> Result<(Tensor, Tensor)> {
    match (saved, up) {
        (HeadSaved::Standard(s), Upstream::Loss(g)) => lmhead_backward(s, w, g),
        (HeadSaved::Standard(s), Upstream::RowScale(k)) => lmhead_backward_scaled(s, w, k),
        (HeadSaved::MiniSeq(s, p), Upstream::Loss(g)) => miniseq_lmhead_backward(s, w, &p, g),
        (HeadSaved::MiniSeq(s, p), Upstream::RowScale(k)) => miniseq_lmhead_backward_scaled(s, w, &p, k),
    }
}

fn decoder<'a>(cfg: &ModelConfig, w: &'a LayerWeights, seq: usize) -> DecoderLayer<'a> {
    DecoderLayer {
        w,
        attn: cfg.attn(),
        m_mlp: cfg.miniseq.m_mlp,
        seq,
    }
}

/// Runs the model on `batch` without requiring a valid label; the returned
/// state carries the loss sum and valid count.
pub fn forward_sum(cfg: &ModelConfig, weights: &ModelWeights, batch: &Batch) -> Result<ModelSaved> {
    if weights.layers.len() != cfg.layers {
        return Err(Error::Mismatch(format!(
            "config has {} layers, weights have {}",
            cfg.layers,
            weights.layers.len()
        )));
    }
    let mut x = embed(weights, &batch.tokens)?;
    let mut layers = Vec::with_capacity(cfg.layers);
    for lw in &weights.layers {
        let (out, saved) = policy_forward(&decoder(cfg, lw, batch.seq), &x, cfg.policy())?;
        layers.push(saved);
        x = out;
    }
    let (h, final_norm) = rmsnorm_forward(&x, &weights.final_norm, labels::ACT)?;
    drop(x);
    let head = head_forward(cfg, weights, &h, batch)?;
    Ok(ModelSaved {
        tokens: batch.tokens.clone(),
        layers,
        final_norm,
        head,
        seq: batch.seq,
    })
}

/// Mean cross-entropy of `batch` and the state for [`backward`].
pub fn forward(cfg: &ModelConfig, weights: &ModelWeights, batch: &Batch) -> Result<(f64, ModelSaved)> {
    if batch.labels.valid_count() == 0 {
        return Err(Error::Degenerate("every label is ignored".into()));
    }
    let saved = forward_sum(cfg, weights, batch)?;
    Ok((saved.loss(), saved))
}

/// Backward through the whole stack. Each parameter's gradient is handed to
/// `sink` (with mutable access to that parameter) as soon as it is final:
/// LM-Head first, then the final norm, layers from last to first, and the
/// embedding last.
pub fn backward_with(
    cfg: &ModelConfig,
    weights: &mut ModelWeights,
    saved: ModelSaved,
    upstream: Upstream,
    sink: &mut dyn FnMut(usize, Tensor, &mut Tensor) -> Result<()>,
) -> Result<()> {
    if saved.layers.len() != weights.layers.len() || saved.tokens.len() != saved.final_norm.x.rows() {
        return Err(Error::Mismatch(format!(
            "saved stack has {} layers, weights have {}",
            saved.layers.len(),
            weights.layers.len()
        )));
    }
    let nl = weights.layers.len();
    let ModelSaved {
        tokens,
        mut layers,
        final_norm,
        head,
        seq,
    } = saved;
    let (dh, dw_out) = head_backward(head, &weights.head, upstream)?;
    sink(2 + nl * PARAMS_PER_LAYER, dw_out, &mut weights.head.w_out)?;
    let (mut dx, dgain) = rmsnorm_backward(&dh, &final_norm, &weights.final_norm)?;
    drop((dh, final_norm));
    sink(1 + nl * PARAMS_PER_LAYER, dgain, &mut weights.final_norm)?;
    for l in (0..nl).rev() {
        let ls = layers.pop().expect("one saved entry per layer");
        let (dprev, grads) = policy_backward(&decoder(cfg, &weights.layers[l], seq), ls, &dx)?;
        dx = dprev;
        for (k, g) in grads.into_vec().into_iter().enumerate() {
            let id = layer_param_id(l, k);
            sink(id, g, weights.param_mut(id))?;
        }
    }
    let de = embed_backward(weights, &tokens, &dx)?;
    drop(dx);
    sink(0, de, &mut weights.embedding)
}

/// Gradients of `upstream · loss` collected into a [`GradSet`].
pub fn backward(cfg: &ModelConfig, weights: &ModelWeights, saved: ModelSaved, upstream: Upstream) -> Result<GradSet> {
    let mut grads = GradSet::for_config(cfg);
    // the sink never touches the parameter, so a shallow copy of the handles suffices
    let mut w = weights.clone();
    backward_with(cfg, &mut w, saved, upstream, &mut |id, g, _| {
        grads.set(id, g);
        Ok(())
    })?;
    Ok(grads)
}

const MAGIC: &[u8; 4] = b"MSTW";
const VERSION: u32 = 1;

/// Header `MSTW`, version (u32 LE), config length (u32 LE) and JSON config,
/// then every parameter's little-endian values in canonical order.
pub fn save_checkpoint(path: impl AsRef<Path>, cfg: &ModelConfig, weights: &ModelWeights) -> Result<()> {
    let path = path.as_ref();
    let blob = serde_json::to_vec(cfg).map_err(|e| Error::Config(e.to_string()))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(blob.len() as u32).to_le_bytes());
    out.extend_from_slice(&blob);
    for p in weights.params() {
        match p.dtype() {
            Dtype::F64 => p
                .data::<f64>()
                .iter()
                .for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            Dtype::F32 => p
                .data::<f32>()
                .iter()
                .for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>, arena: &Arena) -> Result<(ModelConfig, ModelWeights)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::Data(format!("{}: {msg}", path.display()));
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(bad("not a weight checkpoint"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let blob = bytes.get(12..12 + len).ok_or_else(|| bad("truncated header"))?;
    let cfg: ModelConfig = serde_json::from_slice(blob).map_err(|e| bad(&e.to_string()))?;
    cfg.validate()?;
    let width = cfg.dtype.bytes();
    let mut offset = 12 + len;
    let mut params = Vec::with_capacity(cfg.num_params());
    for shape in cfg.param_shapes() {
        let n: usize = shape.iter().product();
        let raw = bytes
            .get(offset..offset + n * width)
            .ok_or_else(|| bad("truncated parameter data"))?;
        offset += n * width;
        let data: Vec<f64> = match cfg.dtype {
            Dtype::F64 => raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
            Dtype::F32 => raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect(),
        };
        params.push(Tensor::new_param(arena, &shape, cfg.dtype, &data, labels::WEIGHT)?);
    }
    if offset != bytes.len() {
        return Err(bad("trailing bytes after parameters"));
    }
    Ok((cfg.clone(), ModelWeights::from_params(&cfg, params)))
}
