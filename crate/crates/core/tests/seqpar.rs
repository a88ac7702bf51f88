mod common;

use common::*;
use miniseq_core::blocks::labels;
use miniseq_core::data::{synth_tokens, Batch};
use miniseq_core::memtrack::Arena;
use miniseq_core::miniseq::{LossMode, MiniSeqConfig};
use miniseq_core::model::*;
use miniseq_core::optim::OptimConfig;
use miniseq_core::seqpar::*;
use miniseq_core::tensor::{Dtype, Tensor};
use miniseq_core::train::Trainer;
use miniseq_core::Error;
use proptest::prelude::*;

fn cfg(s: usize, b: usize) -> ModelConfig {
    ModelConfig {
        d: 32,
        i: 48,
        v: 40,
        g: 2,
        heads: 8,
        layers: 2,
        s,
        b,
        seed: 3,
        rope: true,
        ..ModelConfig::default()
    }
}

fn batch(cfg: &ModelConfig, seed: u64) -> Batch {
    let toks = synth_tokens(seed, cfg.v, cfg.b * cfg.s).unwrap();
    Batch::from_tokens(toks, cfg.b, cfg.s, cfg.v).unwrap()
}

fn reference(cfg: &ModelConfig, w: &ModelWeights, b: &Batch) -> (f64, GradSet) {
    let (loss, saved) = forward(cfg, w, b).unwrap();
    (loss, backward(cfg, w, saved, Upstream::Loss(1.0)).unwrap())
}

fn max_grad_diff(a: &GradSet, b: &GradSet) -> f64 {
    a.max_abs_diff(b)
}

fn grads_bitwise(a: &GradSet, b: &GradSet) -> bool {
    a.len() == b.len() && (0..a.len()).all(|i| a.get(i).unwrap().bitwise_eq(b.get(i).unwrap()))
}

#[test]
fn one_worker_is_bitwise_the_plain_model() {
    for (recompute, m) in [(false, 1), (true, 1), (false, 4)] {
        let c = ModelConfig {
            recompute,
            miniseq: MiniSeqConfig {
                m_mlp: m,
                m_head: m,
                ..MiniSeqConfig::default()
            },
            ..cfg(16, 2)
        };
        let w = ModelWeights::init(&c, &Arena::new()).unwrap();
        let b = batch(&c, 1);
        let (loss, grads) = reference(&c, &w, &b);
        let (sp_loss, sp_grads, _) = sp_train_step(&c, &w, 1, &b, Schedule::Sequential).unwrap();
        assert_eq!(loss.to_bits(), sp_loss.to_bits(), "recompute={recompute} m={m}");
        assert!(grads_bitwise(&grads, &sp_grads), "recompute={recompute} m={m}");
    }
}

#[test]
fn sharded_workers_match_the_plain_model() {
    let c = cfg(16, 2);
    let w = ModelWeights::init(&c, &Arena::new()).unwrap();
    let b = batch(&c, 2);
    let (loss, grads) = reference(&c, &w, &b);
    for p in [2, 4] {
        for recompute in [false, true] {
            let c = ModelConfig { recompute, ..c.clone() };
            let (sp_loss, sp_grads, reports) = sp_train_step(&c, &w, p, &b, Schedule::Sequential).unwrap();
            assert_eq!(reports.len(), p);
            assert!((loss - sp_loss).abs() <= 1e-12, "P={p}: {loss} vs {sp_loss}");
            let d = max_grad_diff(&grads, &sp_grads);
            assert!(d <= 1e-10, "P={p} recompute={recompute}: grad diff {d}");
        }
    }
}

#[test]
fn ignored_labels_are_weighted_globally() {
    // worker-local label counts differ, so a per-worker mean would be wrong
    let c = cfg(8, 1);
    let w = ModelWeights::init(&c, &Arena::new()).unwrap();
    let mut b = batch(&c, 4);
    let mut ids = b.labels.ids().to_vec();
    for id in ids.iter_mut().take(3) {
        *id = miniseq_core::blocks::IGNORE_INDEX;
    }
    b.labels = miniseq_core::blocks::Labels::new(ids, c.v).unwrap();
    let (loss, grads) = reference(&c, &w, &b);
    let (sp_loss, sp_grads, _) = sp_train_step(&c, &w, 2, &b, Schedule::Sequential).unwrap();
    assert!((loss - sp_loss).abs() <= 1e-12);
    assert!(max_grad_diff(&grads, &sp_grads) <= 1e-10);
}

#[test]
fn threaded_schedule_is_identical() {
    let c = cfg(16, 1);
    let w = ModelWeights::init(&c, &Arena::new()).unwrap();
    let b = batch(&c, 5);
    let (l1, g1, r1) = sp_train_step(&c, &w, 4, &b, Schedule::Sequential).unwrap();
    let (l2, g2, r2) = sp_train_step(&c, &w, 4, &b, Schedule::Threaded).unwrap();
    assert_eq!(l1.to_bits(), l2.to_bits());
    assert!(grads_bitwise(&g1, &g2));
    for (a, b) in r1.iter().zip(&r2) {
        assert_eq!(a.peak_bytes, b.peak_bytes);
    }
}

#[test]
fn collective_log_counts_rounds() {
    let c = cfg(8, 1);
    let w = ModelWeights::init(&c, &Arena::new()).unwrap();
    let mut sim = SpSim::new(&c, &w, 2, Schedule::Sequential).unwrap();
    sim.forward_backward(&batch(&c, 0)).unwrap();
    let a2a = sim.log.iter().filter(|e| e.kind == CollectiveKind::AllToAll).count();
    let ar = sim.log.iter().filter(|e| e.kind == CollectiveKind::AllReduce).count();
    // q, k, v in and the output back per layer; the reverse in backward
    assert_eq!(a2a, 8 * c.layers);
    assert_eq!(ar, 2);
    assert!(sim.log.iter().all(|e| e.elements_in == e.elements_out));
    assert!(sim.log.windows(2).all(|w| w[1].round == w[0].round + 1));
}

#[test]
fn divisibility_and_mode_errors() {
    let c = cfg(12, 1);
    let w = ModelWeights::init(&c, &Arena::new()).unwrap();
    assert!(matches!(
        SpSim::new(&c, &w, 8, Schedule::Sequential),
        Err(Error::Divisibility(_))
    ));
    let c16 = cfg(16, 1);
    let w16 = ModelWeights::init(&c16, &Arena::new()).unwrap();
    assert!(matches!(
        SpSim::new(&c16, &w16, 16, Schedule::Sequential),
        Err(Error::Divisibility(_))
    ));
    let chunk_mean = ModelConfig {
        miniseq: MiniSeqConfig {
            m_head: 2,
            loss_mode: LossMode::ChunkMean,
            ..MiniSeqConfig::default()
        },
        ..c16.clone()
    };
    assert!(matches!(
        SpSim::new(&chunk_mean, &w16, 2, Schedule::Sequential),
        Err(Error::Config(_))
    ));
    let ocfg = OptimConfig {
        in_backward: true,
        ..OptimConfig::default()
    };
    assert!(matches!(
        SpTrainer::new(&c16, ocfg, &w16, 2, Schedule::Sequential),
        Err(Error::Config(_))
    ));
    assert!("threaded".parse::<Schedule>().is_ok());
    assert!("async".parse::<Schedule>().is_err());
}

#[test]
fn replica_drift_is_detected() {
    let c = cfg(8, 1);
    let w = ModelWeights::init(&c, &Arena::new()).unwrap();
    let mut sim = SpSim::new(&c, &w, 2, Schedule::Sequential).unwrap();
    let t = &mut sim.workers[1].weights.final_norm;
    t.set(0, t.get(0) + 1e-9);
    assert!(matches!(sim.forward_backward(&batch(&c, 0)), Err(Error::Mismatch(_))));
}

#[test]
fn trainer_tracks_single_worker_training() {
    let c = cfg(16, 1);
    let w = ModelWeights::init(&c, &Arena::new()).unwrap();
    let ocfg = OptimConfig {
        lr: 1e-2,
        ..OptimConfig::default()
    };
    let mut single = Trainer::with_weights(c.clone(), ocfg, w.copy_to(&c, &Arena::new())).unwrap();
    let mut sp = SpTrainer::new(&c, ocfg, &w, 4, Schedule::Threaded).unwrap();
    for step in 0..3 {
        let b = batch(&c, 10 + step);
        let m1 = single.step(std::slice::from_ref(&b)).unwrap();
        let m2 = sp.step(&b).unwrap();
        assert!((m1.loss - m2.loss).abs() < 1e-10);
        assert!((m1.grad_norm - m2.grad_norm).abs() < 1e-10);
        assert_eq!(m2.worker_peaks.len(), 4);
    }
    sp.sim.check_replicas().unwrap();
    assert!(single.weights.max_abs_diff(&sp.sim.workers[0].weights) < 1e-10);
}

#[test]
fn worker_activation_peak_scales_inversely() {
    // activation and intermediate bytes only: weights and gradients are replicated
    let act = |label: &str| !labels::is_grad(label) && label != labels::WEIGHT && !labels::is_optimizer(label);
    for s in [512, 1024] {
        let c = ModelConfig {
            d: 32,
            i: 64,
            v: 64,
            g: 2,
            heads: 8,
            layers: 2,
            s,
            b: 1,
            attn_score_tile: 16,
            ..ModelConfig::default()
        };
        let w = ModelWeights::init(&c, &Arena::new()).unwrap();
        let b = batch(&c, 1);
        let (_, _, base) = sp_train_step(&c, &w, 1, &b, Schedule::Sequential).unwrap();
        let single = base[0].peak_matching(act) as f64;
        for p in [2, 4, 8] {
            let (_, _, reports) = sp_train_step(&c, &w, p, &b, Schedule::Threaded).unwrap();
            let worst = reports.iter().map(|r| r.peak_matching(act)).max().unwrap() as f64;
            let ratio = worst * p as f64 / single;
            assert!((ratio - 1.0).abs() <= 0.15, "S={s} P={p}: ratio {ratio:.3}");
        }
    }
}

fn full_matrix(rows: usize, cols: usize, seed: u64) -> Vec<f64> {
    let mut r = rng(seed);
    uniform(&mut r, rows * cols, 1.0)
}

/// Sequence shards of a `[B·S, W]` matrix, built directly from indices.
fn seq_shards(m: &[f64], b: usize, s: usize, w: usize, p: usize, arenas: &[Arena]) -> Vec<Tensor> {
    let local = s / p;
    (0..p)
        .map(|r| {
            let mut v = Vec::new();
            for seq in 0..b {
                for i in 0..local {
                    let row = seq * s + r * local + i;
                    v.extend_from_slice(&m[row * w..(row + 1) * w]);
                }
            }
            Tensor::from_f64(&arenas[r], &[b * local, w], Dtype::F64, &v, labels::ACT).unwrap()
        })
        .collect()
}

/// Column blocks of the same matrix, all rows.
fn head_shards(m: &[f64], rows: usize, w: usize, p: usize) -> Vec<Vec<f64>> {
    let cw = w / p;
    (0..p)
        .map(|r| {
            (0..rows)
                .flat_map(|row| m[row * w + r * cw..row * w + (r + 1) * cw].to_vec())
                .collect()
        })
        .collect()
}

#[test]
fn all_to_all_worked_example() {
    // P=2, S=4, two heads of width 1: worker 0 holds rows 0-1, worker 1 rows 2-3
    let arenas = vec![Arena::new(), Arena::new()];
    let w0 = Tensor::from_f64(&arenas[0], &[2, 2], Dtype::F64, &[0.0, 10.0, 1.0, 11.0], "act").unwrap();
    let w1 = Tensor::from_f64(&arenas[1], &[2, 2], Dtype::F64, &[2.0, 12.0, 3.0, 13.0], "act").unwrap();
    let out = all_to_all(&[w0.clone(), w1.clone()], Swap::SeqToHead, 1, 4, &arenas).unwrap();
    assert_eq!(out[0].to_vec(), vec![0.0, 1.0, 2.0, 3.0]);
    assert_eq!(out[1].to_vec(), vec![10.0, 11.0, 12.0, 13.0]);
    assert_eq!(out[0].shape(), &[4, 1]);
    let back = all_to_all(&out, Swap::HeadToSeq, 1, 4, &arenas).unwrap();
    assert!(back[0].bitwise_eq(&w0) && back[1].bitwise_eq(&w1));
}

#[test]
fn all_to_all_errors() {
    let arenas = vec![Arena::new(), Arena::new(), Arena::new()];
    let t: Vec<Tensor> = arenas
        .iter()
        .map(|a| Tensor::zeros(a, &[2, 3], Dtype::F64, "act"))
        .collect();
    assert!(matches!(
        all_to_all(&t, Swap::SeqToHead, 1, 7, &arenas),
        Err(Error::Divisibility(_))
    ));
    let t: Vec<Tensor> = arenas
        .iter()
        .map(|a| Tensor::zeros(a, &[2, 4], Dtype::F64, "act"))
        .collect();
    assert!(matches!(
        all_to_all(&t, Swap::SeqToHead, 1, 6, &arenas),
        Err(Error::Divisibility(_))
    ));
    let mut t: Vec<Tensor> = arenas
        .iter()
        .map(|a| Tensor::zeros(a, &[2, 3], Dtype::F64, "act"))
        .collect();
    t[2] = Tensor::zeros(&arenas[2], &[3, 3], Dtype::F64, "act");
    assert!(matches!(
        all_to_all(&t, Swap::SeqToHead, 1, 6, &arenas),
        Err(Error::Dimension { .. })
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn all_to_all_against_index_oracle(p in prop::sample::select(vec![1usize, 2, 4]), b in 1usize..3, k in 1usize..4, cw in 1usize..4, seed in any::<u64>()) {
        let s = p * k;
        let w = p * cw;
        let m = full_matrix(b * s, w, seed);
        let arenas: Vec<Arena> = (0..p).map(|_| Arena::new()).collect();
        let shards = seq_shards(&m, b, s, w, p, &arenas);
        let heads = all_to_all(&shards, Swap::SeqToHead, b, s, &arenas).unwrap();
        let expect = head_shards(&m, b * s, w, p);
        for r in 0..p {
            prop_assert_eq!(heads[r].to_vec(), expect[r].clone());
            prop_assert_eq!(heads[r].label(), labels::ACT);
            prop_assert_eq!(heads[r].arena().live_bytes(), arenas[r].live_bytes());
        }
        let total_in: usize = shards.iter().map(|t| t.numel()).sum();
        let total_out: usize = heads.iter().map(|t| t.numel()).sum();
        prop_assert_eq!(total_in, total_out);
        let back = all_to_all(&heads, Swap::HeadToSeq, b, s, &arenas).unwrap();
        for r in 0..p {
            prop_assert!(back[r].bitwise_eq(&shards[r]));
        }
        if p == 1 {
            prop_assert!(heads[0].bitwise_eq(&shards[0]));
        }
    }
}
