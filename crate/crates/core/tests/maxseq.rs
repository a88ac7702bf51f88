use miniseq_core::maxseq::*;
use miniseq_core::miniseq::MiniSeqConfig;
use miniseq_core::model::ModelConfig;
use miniseq_core::optim::OptimConfig;
use miniseq_core::Error;

/// Narrow model so activations dominate the replicated weight state early.
fn vanilla() -> ModelConfig {
    ModelConfig {
        d: 8,
        i: 256,
        v: 64,
        g: 2,
        heads: 8,
        layers: 2,
        b: 1,
        attn_score_tile: 1,
        ..ModelConfig::default()
    }
}

fn recompute() -> ModelConfig {
    ModelConfig {
        recompute: true,
        ..vanilla()
    }
}

fn mst() -> ModelConfig {
    ModelConfig {
        miniseq: MiniSeqConfig {
            m_mlp: 4,
            m_head: 16,
            ..MiniSeqConfig::default()
        },
        ..recompute()
    }
}

fn s_star(cfg: &ModelConfig, ocfg: OptimConfig, budget: u64, p: usize) -> usize {
    max_seq(cfg, ocfg, &MaxSeqQuery::new(budget, p)).unwrap().s_star
}

#[test]
fn result_brackets_the_budget() {
    let o = OptimConfig::default();
    let q = MaxSeqQuery::new(1_000_000, 1);
    let r = max_seq(&mst(), o, &q).unwrap();
    assert_eq!(r.s_star % q.step(), 0);
    assert!(r.peak_bytes <= q.budget_bytes);
    assert_eq!(probe_peak(&mst(), o, r.s_star, 1).unwrap(), r.peak_bytes);
    assert!(probe_peak(&mst(), o, r.s_star + q.step(), 1).unwrap() > q.budget_bytes);
    assert!(r.probes.iter().any(|p| p.s == r.s_star));
}

#[test]
fn tiny_budget_is_an_error() {
    let err = max_seq(&mst(), OptimConfig::default(), &MaxSeqQuery::new(1000, 1)).unwrap_err();
    assert!(matches!(err, Error::BudgetTooSmall { budget: 1000, needed } if needed > 1000));
}

#[test]
fn cap_bounds_the_search() {
    let q = MaxSeqQuery {
        s_cap: Some(64),
        ..MaxSeqQuery::new(u64::MAX, 1)
    };
    assert_eq!(max_seq(&mst(), OptimConfig::default(), &q).unwrap().s_star, 64);
}

#[test]
fn method_ordering_and_accumulation() {
    let budget = 1_000_000;
    let o = OptimConfig::default();
    let acc = OptimConfig { accum: 2, ..o };
    let mut plain = Vec::new();
    for cfg in [vanilla(), recompute(), mst()] {
        let s = s_star(&cfg, o, budget, 1);
        let s_acc = s_star(&cfg, acc, budget, 1);
        assert!(s_acc < s, "accumulation did not shrink S*: {s_acc} vs {s}");
        plain.push(s);
    }
    assert!(plain[2] >= plain[1] && plain[1] >= plain[0], "{plain:?}");
    assert!(plain[2] > plain[0]);
}

#[test]
fn doubling_budget_roughly_doubles_s_star() {
    let o = OptimConfig::default();
    let a = s_star(&mst(), o, 4_000_000, 1) as f64;
    let b = s_star(&mst(), o, 8_000_000, 1) as f64;
    let ratio = b / a;
    assert!((ratio - 2.0).abs() <= 0.5, "ratio {ratio}");
}

#[test]
fn sequence_parallel_s_star_is_linear_in_workers() {
    let o = OptimConfig::default();
    let budget = 1_000_000;
    let base = s_star(&mst(), o, budget, 2) as f64;
    for p in [4, 8] {
        let s = s_star(&mst(), o, budget, p) as f64;
        let expect = base * p as f64 / 2.0;
        assert!((s / expect - 1.0).abs() <= 0.15, "P={p}: {s} vs {expect}");
    }
}
