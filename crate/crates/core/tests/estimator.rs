mod common;

use common::*;
use miniseq_core::blocks::{labels, LmHeadWeights, MlpWeights};
use miniseq_core::data::{synth_tokens, Batch};
use miniseq_core::estimator::*;
use miniseq_core::memtrack::Arena;
use miniseq_core::miniseq::*;
use miniseq_core::model::ModelConfig;
use miniseq_core::optim::OptimConfig;
use miniseq_core::tensor::Dtype;
use miniseq_core::train::Trainer;

fn llama3() -> ModelConfig {
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

fn desk(s: usize) -> ModelConfig {
    ModelConfig {
        d: 32,
        i: 96,
        v: 512,
        g: 2,
        heads: 4,
        layers: 2,
        s,
        ..ModelConfig::default()
    }
}

fn with_m(c: &ModelConfig, recompute: bool, m_mlp: usize, m_head: usize) -> ModelConfig {
    ModelConfig {
        recompute,
        miniseq: MiniSeqConfig {
            m_mlp,
            m_head,
            ..MiniSeqConfig::default()
        },
        ..c.clone()
    }
}

#[test]
fn ratios() {
    let r = intermediate_ratios(&llama3());
    assert_eq!(r.head, 128256.0 / 4096.0);
    assert!((r.head - 31.31).abs() < 0.01);
    assert_eq!(r.mlp, 7.0);
    assert_eq!(r.attn, 1.5);
    let mha = ModelConfig {
        g: 4,
        heads: 4,
        ..desk(8)
    };
    assert_eq!(intermediate_ratios(&mha).attn, 1.0 + 2.0 / 4.0);
}

fn mlp_weights(arena: &Arena, d: usize, i: usize) -> MlpWeights {
    let mut r = rng(1);
    MlpWeights {
        w_gate: rand_param(arena, &[d, i], &mut r, 0.5, labels::WEIGHT),
        w_up: rand_param(arena, &[d, i], &mut r, 0.5, labels::WEIGHT),
        w_down: rand_param(arena, &[i, d], &mut r, 0.5, labels::WEIGHT),
    }
}

#[test]
fn flops_match_counters_and_ignore_m() {
    let c = ModelConfig {
        d: 4,
        i: 16,
        v: 24,
        ..desk(8)
    };
    assert_eq!(predict_flops(&c, 8, 1).mlp_matmul, 3072);
    assert_eq!(predict_flops(&c, 8, 1), predict_flops(&c, 8, 8));
    let f1 = predict_flops(&c, 100, 1).head;
    assert_eq!(predict_flops(&c, 200, 1).head, 2 * f1);

    let arena = Arena::new();
    let w = mlp_weights(&arena, c.d, c.i);
    let hw = LmHeadWeights {
        w_out: rand_param(&arena, &[c.d, c.v], &mut rng(2), 0.5, labels::WEIGHT),
    };
    let mut r = rng(3);
    let x = rand_tensor(&arena, &[8, c.d], &mut r, 1.0, labels::ACT);
    let l = rand_labels(&mut r, 8, c.v, 0.0);
    for m in [1, 2, 4, 8] {
        let plan = make_chunk_plan(8, m).unwrap();
        let (_, _, cm) = arena.measure("mlp", || miniseq_mlp_forward(&x, &w, &plan).unwrap());
        let (_, _, ch) = arena.measure("head", || {
            miniseq_lmhead_forward(&x, &l, &hw, &plan, LossMode::TokenWeighted).unwrap()
        });
        let p = predict_flops(&c, 8, m);
        assert_eq!(cm.flops, p.mlp);
        assert_eq!(ch.flops, p.head);
        let h = predict_hbm(&c, 8, m).unwrap();
        assert_eq!(cm.hbm_elements, h.mlp);
        assert_eq!(ch.hbm_elements, h.head);
        assert_eq!(cm.weight_read_elements, h.mlp_weight_reads);
        assert_eq!(ch.weight_read_elements, h.head_weight_reads);
    }
}

#[test]
fn hbm_formula_properties() {
    let c = desk(64);
    let (d, i, v) = (c.d as u64, c.i as u64, c.v as u64);
    for m in [1, 2, 4, 8, 16] {
        let a = predict_hbm(&c, 64, m).unwrap();
        let b = predict_hbm(&c, 64, 2 * m).unwrap();
        assert_eq!(b.mlp - a.mlp, 3 * d * i * m as u64);
        assert_eq!(b.head - a.head, d * v * m as u64);
    }
    // long sequences: traffic is dominated by S·I and S·V
    let big = llama3();
    let ratio = |s: usize| {
        let a = predict_hbm(&big, s, 16).unwrap();
        let b = predict_hbm(&big, s, 1).unwrap();
        (a.mlp as f64 / b.mlp as f64, a.head as f64 / b.head as f64)
    };
    let (m1, h1) = ratio(1 << 14);
    let (m2, h2) = ratio(1 << 22);
    assert!(m2 < m1 && h2 < h1);
    assert!(m2 - 1.0 < 0.01 && h2 - 1.0 < 0.01);
}

fn tracked_peak(c: &ModelConfig, o: OptimConfig) -> (u64, u64) {
    let mut t = Trainer::new(c.clone(), o, Arena::new()).unwrap();
    let batches: Vec<Batch> = (0..o.accum)
        .map(|k| Batch::from_tokens(synth_tokens(k as u64, c.v, c.b * c.s).unwrap(), c.b, c.s, c.v).unwrap())
        .collect();
    let a = t.arena.clone();
    let (m, rep, _) = a.measure("step", || t.step(&batches).unwrap());
    (m.peak_bytes, rep.peak_matching(labels::is_intermediate))
}

#[test]
fn peak_matches_tracked_runs() {
    let base = desk(96);
    let cases = [
        (with_m(&base, false, 1, 1), OptimConfig::default()),
        (with_m(&base, true, 1, 1), OptimConfig::default()),
        (with_m(&base, true, 4, 8), OptimConfig::default()),
        (
            with_m(&base, true, 3, 7),
            OptimConfig {
                in_backward: true,
                ..OptimConfig::default()
            },
        ),
        (
            with_m(&base, false, 2, 2),
            OptimConfig {
                accum: 3,
                ..OptimConfig::default()
            },
        ),
        (
            ModelConfig {
                b: 2,
                attn_score_tile: 16,
                dtype: Dtype::F32,
                ..with_m(&base, true, 2, 4)
            },
            OptimConfig::default(),
        ),
        (
            ModelConfig {
                layers: 0,
                ..base.clone()
            },
            OptimConfig::default(),
        ),
    ];
    for (c, o) in cases {
        let (peak, inter) = tracked_peak(&c, o);
        let p = predict_peak(&c, &o, &ByteSizes::uniform(c.dtype)).unwrap();
        let rel = (p.total_bytes() as f64 - peak as f64).abs() / peak as f64;
        assert!(rel <= 0.10, "{c:?}: predicted {} tracked {peak}", p.total_bytes());
        let rel = (p.intermediate_high_water_bytes as f64 - inter as f64).abs() / inter as f64;
        assert!(
            rel <= 0.10,
            "intermediates: predicted {} tracked {inter}",
            p.intermediate_high_water_bytes
        );
    }
}

#[test]
fn breakdown_sums_and_scales_with_dtype() {
    let c = with_m(&desk(128), true, 2, 4);
    let o = OptimConfig::default();
    let p64 = predict_peak(&c, &o, &ByteSizes::uniform(Dtype::F64)).unwrap();
    let p32 = predict_peak(&c, &o, &ByteSizes::uniform(Dtype::F32)).unwrap();
    let rows64 = p64.rows();
    let rows32 = p32.rows();
    for ((k, a), (_, b)) in rows64.iter().zip(rows32.iter()) {
        assert_eq!(*a, 2 * *b, "{k}");
    }
    assert_eq!(rows64[5].1, rows64[..5].iter().map(|r| r.1).sum::<u64>());
    assert!(p64.to_csv().starts_with("component,bytes,gib\nweights,"));
}

#[test]
fn intermediates_do_not_grow_with_m() {
    let base = desk(256);
    let o = OptimConfig::default();
    let b = ByteSizes::uniform(Dtype::F64);
    for recompute in [false, true] {
        let mut prev = u64::MAX;
        let mut prev_total = u64::MAX;
        for m in [1, 2, 4, 8, 16] {
            let p = predict_peak(&with_m(&base, recompute, m, m), &o, &b).unwrap();
            assert!(p.intermediate_high_water_bytes <= prev);
            assert!(p.total_bytes() <= prev_total);
            prev = p.intermediate_high_water_bytes;
            prev_total = p.total_bytes();
        }
    }
}

#[test]
fn llama3_component_structure() {
    let gib = |b: u64| b as f64 / GIB;
    // with every buffer in bf16 the optimizer step is the peak: weights,
    // gradients, moments and update temporaries
    let narrow = ByteSizes {
        weight: 2,
        grad: 2,
        moment: 2,
        optim_tmp: 2,
        activation: 2,
        logits: 2,
    };
    let vanilla = predict_peak(&llama3(), &OptimConfig::default(), &narrow).unwrap();
    assert!((gib(vanilla.weights_bytes) - 15.0).abs() < 0.1);
    assert_eq!(vanilla.gradients_bytes, vanilla.weights_bytes);
    assert_eq!(vanilla.optimizer_bytes, 3 * vanilla.weights_bytes);
    assert_eq!(vanilla.activation_bytes, 0);

    let bytes = ByteSizes::bf16_training();
    let fused = OptimConfig {
        in_backward: true,
        ..OptimConfig::default()
    };
    let plain = predict_peak(&llama3(), &fused, &bytes).unwrap();
    let act = gib(plain.activation_bytes + plain.peak_intermediate_bytes);
    assert!((act - 29.0).abs() / 29.0 < 0.05, "{act}");
    assert!((gib(plain.optimizer_bytes) - 30.0).abs() < 0.5);
    let mst = predict_peak(&with_m(&llama3(), true, 4, 16), &fused, &bytes).unwrap();
    assert!(gib(mst.gradients_bytes) < 1.0);
    assert!((gib(mst.optimizer_bytes) - 30.0).abs() < 1.0);
}
