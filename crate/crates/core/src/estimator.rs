//! Analytic memory, FLOP and HBM-traffic predictions.
//!
//! FLOP and traffic formulas follow the counting conventions in
//! [`crate::memtrack`]. The peak model replays one training step at the
//! granularity of whole tensors, using only their sizes, so it can be
//! evaluated for configurations far too large to run.

use std::fmt::Write as _;

use serde::Serialize;

use crate::error::Result;
use crate::miniseq::make_chunk_plan;
use crate::model::ModelConfig;
use crate::optim::OptimConfig;
use crate::tensor::Dtype;

pub const GIB: f64 = (1u64 << 30) as f64;

/// Ratio of a block's largest intermediate to its input width.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IntermediateRatios {
    pub attn: f64,
    pub mlp: f64,
    pub head: f64,
}

/// `attn = 1 + 2/G` (queries plus grouped keys and values), `mlp = 2I/d`
/// (gate and up), `head = V/d` (logits).
pub fn intermediate_ratios(cfg: &ModelConfig) -> IntermediateRatios {
    IntermediateRatios {
        attn: 1.0 + 2.0 / cfg.g as f64,
        mlp: 2.0 * cfg.i as f64 / cfg.d as f64,
        head: cfg.v as f64 / cfg.d as f64,
    }
}

/// Forward FLOPs of one MLP block and one LM-Head over `s` rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct FlopPrediction {
    /// `6·s·d·I` matmul plus `5·s·I` for SiLU and the gating product.
    pub mlp: u64,
    /// Matmul part of `mlp` alone.
    pub mlp_matmul: u64,
    /// `2·s·d·V` matmul plus `c·s·V` for cross-entropy.
    pub head: u64,
}

pub const CE_FLOPS_PER_LOGIT: u64 = crate::memtrack::CE_FLOPS;

/// The mini-sequence count does not appear: chunking redistributes work
/// without adding any.
pub fn predict_flops(cfg: &ModelConfig, s: usize, _m: usize) -> FlopPrediction {
    let (s, d, i, v) = (s as u64, cfg.d as u64, cfg.i as u64, cfg.v as u64);
    let mlp_matmul = 6 * s * d * i;
    let pointwise = (crate::memtrack::SILU_FLOPS + crate::memtrack::BINARY_FLOPS) * s * i;
    FlopPrediction {
        mlp: mlp_matmul + pointwise,
        mlp_matmul,
        head: 2 * s * d * v + CE_FLOPS_PER_LOGIT * s * v,
    }
}

/// Forward HBM element accesses of one MLP block and one LM-Head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct HbmPrediction {
    /// `3·s·d + 8·s·I + 3·d·I·M`.
    pub mlp: u64,
    /// `s·d + 2·s·V + d·V·M`.
    pub head: u64,
    pub mlp_weight_reads: u64,
    pub head_weight_reads: u64,
}

/// `m` is the requested mini-sequence count; the number of chunks actually
/// formed (fewer than `m` when ceil-sized chunks cover `s` early)
/// determines the weight re-reads.
pub fn predict_hbm(cfg: &ModelConfig, s: usize, m: usize) -> Result<HbmPrediction> {
    let chunks = make_chunk_plan(s, m)?.len() as u64;
    let (s, d, i, v) = (s as u64, cfg.d as u64, cfg.i as u64, cfg.v as u64);
    let mlp_weight_reads = 3 * d * i * chunks;
    let head_weight_reads = d * v * chunks;
    Ok(HbmPrediction {
        mlp: 3 * s * d + 8 * s * i + mlp_weight_reads,
        head: s * d + 2 * s * v + head_weight_reads,
        mlp_weight_reads,
        head_weight_reads,
    })
}

/// Llama3-8B shape at S=4096, B=1.
pub fn llama3_8b() -> ModelConfig {
    ModelConfig {
        d: 4096,
        i: 14336,
        v: 128256,
        g: 4,
        heads: 32,
        layers: 32,
        s: 4096,
        b: 1,
        ..ModelConfig::default()
    }
}

/// Bytes per element for each kind of buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ByteSizes {
    pub weight: u64,
    pub grad: u64,
    pub moment: u64,
    /// Per-step optimizer temporaries.
    pub optim_tmp: u64,
    pub activation: u64,
    pub logits: u64,
}

impl ByteSizes {
    /// Everything stored in one dtype, as the executable model does.
    pub fn uniform(dtype: Dtype) -> ByteSizes {
        let b = dtype.bytes() as u64;
        ByteSizes {
            weight: b,
            grad: b,
            moment: b,
            optim_tmp: b,
            activation: b,
            logits: b,
        }
    }

    /// Mixed precision: bf16 weights, gradients and optimizer state, with
    /// activations and logits held in f32.
    pub fn bf16_training() -> ByteSizes {
        ByteSizes {
            weight: 2,
            grad: 2,
            moment: 2,
            optim_tmp: 2,
            activation: 4,
            logits: 4,
        }
    }
}

/// Live bytes per class at the moment of peak memory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MemBreakdown {
    pub weights_bytes: u64,
    pub gradients_bytes: u64,
    /// Moments plus any optimizer temporaries.
    pub optimizer_bytes: u64,
    /// Saved activations, activation gradients and attention buffers.
    pub activation_bytes: u64,
    /// MLP and LM-Head intermediates (`mlp.*`, `head.*` labels).
    pub peak_intermediate_bytes: u64,
    /// Highest intermediate footprint at any point of the step. Not part of
    /// the total, which is taken at the overall peak.
    pub intermediate_high_water_bytes: u64,
    pub formulas: Vec<(String, String)>,
}

impl MemBreakdown {
    pub fn total_bytes(&self) -> u64 {
        self.weights_bytes
            + self.gradients_bytes
            + self.optimizer_bytes
            + self.activation_bytes
            + self.peak_intermediate_bytes
    }

    /// Report rows in fixed order.
    pub fn rows(&self) -> [(&'static str, u64); 6] {
        [
            ("weights", self.weights_bytes),
            ("gradients", self.gradients_bytes),
            ("optimizer", self.optimizer_bytes),
            ("activation", self.activation_bytes),
            ("peak-intermediate", self.peak_intermediate_bytes),
            ("total", self.total_bytes()),
        ]
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("component,bytes,gib\n");
        for (k, b) in self.rows() {
            let _ = writeln!(s, "{k},{b},{:.3}", b as f64 / GIB);
        }
        s
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, b) in self.rows() {
            let _ = writeln!(s, "{k:<18} {b:>16} B  {:>9.3} GiB", b as f64 / GIB);
        }
        for (k, f) in &self.formulas {
            let _ = writeln!(s, "  {k}: {f}");
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Class {
    Weights,
    Gradients,
    Optimizer,
    Activation,
    Intermediate,
}

#[derive(Debug, Default)]
struct Replay {
    live: [u64; 5],
    peak: u64,
    at_peak: [u64; 5],
    inter_high: u64,
}

impl Replay {
    fn alloc(&mut self, c: Class, bytes: u64) {
        self.live[c as usize] += bytes;
        let total: u64 = self.live.iter().sum();
        if total > self.peak {
            self.peak = total;
            self.at_peak = self.live;
        }
        self.inter_high = self.inter_high.max(self.live[Class::Intermediate as usize]);
    }

    fn free(&mut self, c: Class, bytes: u64) {
        let slot = &mut self.live[c as usize];
        debug_assert!(*slot >= bytes, "replay frees more {c:?} than is live");
        *slot -= bytes;
    }
}

struct Shape {
    n: u64,
    d: u64,
    i: u64,
    v: u64,
    dkv: u64,
    hd: u64,
    seq: u64,
    tile: u64,
    layers: usize,
    mlp_chunks: Vec<u64>,
    head_chunks: Vec<u64>,
    layer_params: Vec<u64>,
    embedding: u64,
}

struct StepModel<'a> {
    sh: Shape,
    b: &'a ByteSizes,
    r: Replay,
    recompute: bool,
    in_backward: bool,
}

impl StepModel<'_> {
    fn act(&mut self, elems: u64) {
        self.r.alloc(Class::Activation, elems * self.b.activation);
    }
    fn unact(&mut self, elems: u64) {
        self.r.free(Class::Activation, elems * self.b.activation);
    }
    fn inter(&mut self, elems: u64) {
        self.r.alloc(Class::Intermediate, elems * self.b.activation);
    }
    fn uninter(&mut self, elems: u64) {
        self.r.free(Class::Intermediate, elems * self.b.activation);
    }
    fn logits(&mut self, elems: u64) {
        self.r.alloc(Class::Intermediate, elems * self.b.logits);
    }
    fn unlogits(&mut self, elems: u64) {
        self.r.free(Class::Intermediate, elems * self.b.logits);
    }
    fn grad(&mut self, elems: u64) {
        self.r.alloc(Class::Gradients, elems * self.b.grad);
    }

    fn chunked_mlp(&self) -> bool {
        self.sh.mlp_chunks.len() > 1
    }

    /// Hands finished gradients to the optimizer when stepping during
    /// backward; otherwise they stay live for the deferred step.
    fn sink(&mut self, sizes: &[u64]) {
        if !self.in_backward {
            return;
        }
        for &e in sizes {
            self.r.alloc(Class::Optimizer, e * self.b.optim_tmp);
            self.r.free(Class::Gradients, e * self.b.grad);
            self.r.free(Class::Optimizer, e * self.b.optim_tmp);
        }
    }

    /// One decoder layer forward with its input live. Leaves the output live,
    /// plus the saved state when `keep`.
    fn layer_forward(&mut self, keep: bool) {
        let Shape {
            n,
            d,
            i,
            dkv,
            seq,
            tile,
            ..
        } = self.sh;
        self.act(n * d); // attention norm output
        self.act(n * d + 2 * n * dkv); // q, k, v
        self.act(n * d); // attention output before W_o
        self.act(tile * seq);
        self.unact(tile * seq);
        self.act(n * d); // projected
        self.act(n * d); // residual
        self.unact(n * d);
        self.act(n * d); // MLP norm output
        if self.chunked_mlp() {
            self.act(n * d);
            for c in self.sh.mlp_chunks.clone() {
                self.act(c * d);
                self.inter(3 * c * i);
                self.act(c * d);
                self.uninter(3 * c * i);
                self.unact(2 * c * d);
            }
        } else {
            self.inter(3 * n * i);
            self.act(n * d);
            self.uninter(n * i);
        }
        if !keep {
            self.unact(5 * n * d + 2 * n * dkv);
            if !self.chunked_mlp() {
                self.uninter(2 * n * i);
            }
        }
    }

    /// One decoder layer backward with the upstream gradient live. Frees the
    /// saved state and the layer input; leaves the input gradient and the
    /// layer's weight gradients live.
    fn layer_backward(&mut self) {
        let Shape {
            n,
            d,
            i,
            dkv,
            hd,
            seq,
            tile,
            ..
        } = self.sh;
        if self.recompute {
            self.layer_forward(true);
            self.unact(n * d);
        }
        self.grad(3 * d * i);
        if self.chunked_mlp() {
            self.act(n * d);
            for c in self.sh.mlp_chunks.clone() {
                self.act(2 * c * d);
                self.inter(3 * c * i);
                self.uninter(c * i);
                self.inter(2 * c * i);
                self.uninter(2 * c * i);
                self.act(c * d);
                self.uninter(2 * c * i);
                self.unact(3 * c * d);
            }
        } else {
            self.inter(n * i);
            self.uninter(n * i);
            self.inter(2 * n * i);
            self.uninter(2 * n * i);
            self.act(n * d);
            self.uninter(2 * n * i);
        }
        self.unact(n * d); // MLP input
        self.act(n * d);
        self.grad(d);
        self.unact(2 * n * d); // MLP input gradient, residual
        self.grad(d * d);
        self.act(n * d); // gradient before W_o
        self.act(n * d + 2 * n * dkv);
        self.act(tile * seq + 2 * seq * hd);
        self.unact(tile * seq + 2 * seq * hd);
        self.unact(3 * n * d + 2 * n * dkv);
        self.grad(d * d + 2 * d * dkv);
        self.act(n * d);
        self.unact(n * d + 2 * n * dkv);
        self.unact(n * d); // attention norm output
        self.act(n * d);
        self.grad(d);
        self.unact(3 * n * d); // attention input gradient, layer input, MLP-side gradient
    }

    fn forward(&mut self) {
        let Shape { n, d, v, layers, .. } = self.sh;
        self.act(n * d);
        for _ in 0..layers {
            self.layer_forward(!self.recompute);
        }
        self.act(n * d);
        if self.sh.head_chunks.len() > 1 {
            for c in self.sh.head_chunks.clone() {
                self.act(c * d);
                self.logits(c * v);
                self.unlogits(c * v);
                self.unact(c * d);
            }
        } else {
            self.logits(n * v);
        }
    }

    fn backward(&mut self) {
        let Shape { n, d, v, layers, .. } = self.sh;
        self.grad(d * v);
        self.act(n * d);
        if self.sh.head_chunks.len() > 1 {
            for c in self.sh.head_chunks.clone() {
                self.act(c * d);
                self.logits(c * v);
                self.act(c * d);
                self.unlogits(c * v);
                self.unact(2 * c * d);
            }
        } else {
            self.unlogits(n * v);
        }
        self.unact(n * d); // head input
        self.sink(&[d * v]);
        self.act(n * d);
        self.grad(d);
        self.unact(2 * n * d); // head input gradient, last layer output
        self.sink(&[d]);
        for _ in 0..layers {
            self.layer_backward();
            self.unact(n * d); // upstream gradient
            let sizes = self.sh.layer_params.clone();
            self.sink(&sizes);
        }
        self.grad(self.sh.embedding);
        self.unact(n * d);
        self.sink(&[self.sh.embedding]);
    }
}

/// Peak memory of one optimizer step of `cfg` under `ocfg`, predicted from
/// tensor sizes alone. Weights and moments are resident throughout.
pub fn predict_peak(cfg: &ModelConfig, ocfg: &OptimConfig, bytes: &ByteSizes) -> Result<MemBreakdown> {
    cfg.validate()?;
    ocfg.validate()?;
    let n = cfg.b * cfg.s;
    let chunks =
        |m: usize| -> Result<Vec<u64>> { Ok(make_chunk_plan(n, m)?.ranges.iter().map(|r| r.len() as u64).collect()) };
    let (d, i, v) = (cfg.d as u64, cfg.i as u64, cfg.v as u64);
    let dkv = d / cfg.g as u64;
    let tile = match cfg.attn_score_tile {
        0 => cfg.s,
        t => t.min(cfg.s),
    } as u64;
    let params = cfg.param_count() as u64;
    let mut m = StepModel {
        sh: Shape {
            n: n as u64,
            d,
            i,
            v,
            dkv,
            hd: d / cfg.heads as u64,
            seq: cfg.s as u64,
            tile,
            layers: cfg.layers,
            mlp_chunks: chunks(cfg.miniseq.m_mlp)?,
            head_chunks: chunks(cfg.miniseq.m_head)?,
            layer_params: vec![d, d * d, d * dkv, d * dkv, d * d, d, d * i, d * i, i * d],
            embedding: v * d,
        },
        b: bytes,
        r: Replay::default(),
        recompute: cfg.recompute,
        in_backward: ocfg.in_backward,
    };
    m.r.alloc(Class::Weights, params * bytes.weight);
    m.r.alloc(Class::Optimizer, 2 * params * bytes.moment);
    let micro = if ocfg.in_backward { 1 } else { ocfg.accum };
    for k in 0..micro {
        m.forward();
        m.backward();
        if k > 0 {
            m.r.free(Class::Gradients, params * bytes.grad);
        }
    }
    if !ocfg.in_backward {
        m.r.alloc(Class::Optimizer, params * bytes.optim_tmp);
        m.r.free(Class::Gradients, params * bytes.grad);
        m.r.free(Class::Optimizer, params * bytes.optim_tmp);
    }
    debug_assert_eq!(m.r.live[Class::Activation as usize], 0);
    debug_assert_eq!(m.r.live[Class::Intermediate as usize], 0);
    let [w, g, o, a, it] = m.r.at_peak;
    Ok(MemBreakdown {
        weights_bytes: w,
        gradients_bytes: g,
        optimizer_bytes: o,
        activation_bytes: a,
        peak_intermediate_bytes: it,
        intermediate_high_water_bytes: m.r.inter_high,
        formulas: formulas(cfg, ocfg, bytes),
    })
}

fn formulas(cfg: &ModelConfig, ocfg: &OptimConfig, b: &ByteSizes) -> Vec<(String, String)> {
    let mut f = vec![
        ("weights".to_string(), format!("P·{}", b.weight)),
        (
            "gradients".to_string(),
            if ocfg.in_backward {
                "one layer's gradients at a time (stepped during backward)".to_string()
            } else {
                format!("P·{} held until the optimizer step", b.grad)
            },
        ),
        (
            "optimizer".to_string(),
            format!("2·P·{} moments + update temporaries ·{}", b.moment, b.optim_tmp),
        ),
    ];
    let mlp = if cfg.miniseq.m_mlp > 1 {
        format!("3·(S/{})·I", cfg.miniseq.m_mlp)
    } else {
        "4·S·I".to_string()
    };
    let head = if cfg.miniseq.m_head > 1 {
        format!("(S/{})·V", cfg.miniseq.m_head)
    } else {
        "S·V".to_string()
    };
    f.push((
        "activation".to_string(),
        if cfg.recompute {
            "L·S·d checkpoints + one recomputed layer".to_string()
        } else {
            "L·(6·S·d + 2·S·d/G + 2·S·I) saved per layer".to_string()
        },
    ));
    f.push((
        "peak-intermediate".to_string(),
        format!("max(MLP {mlp}, LM-Head {head})·B"),
    ));
    f
}
