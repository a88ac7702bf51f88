mod common;

use common::*;
use miniseq_core::blocks::attention::{attn_backward, attn_forward};
use miniseq_core::blocks::lmhead::{lmhead_backward, lmhead_forward};
use miniseq_core::blocks::mlp::{mlp_backward, mlp_forward};
use miniseq_core::blocks::rmsnorm::{rmsnorm_backward, rmsnorm_forward};
use miniseq_core::blocks::{labels, AttnConfig, AttnWeights, Labels, LmHeadWeights, MlpWeights, IGNORE_INDEX};
use miniseq_core::memtrack::Arena;
use miniseq_core::tensor::{matmul, Dtype, Tensor};
use miniseq_core::Error;

const H: f64 = 1e-5;
const TOL: f64 = 1e-6;

fn mlp_weights(arena: &Arena, d: usize, i: usize, seed: u64) -> MlpWeights {
    let mut r = rng(seed);
    MlpWeights {
        w_gate: rand_param(arena, &[d, i], &mut r, 0.5, "weight.gate"),
        w_up: rand_param(arena, &[d, i], &mut r, 0.5, "weight.up"),
        w_down: rand_param(arena, &[i, d], &mut r, 0.5, "weight.down"),
    }
}

#[test]
fn rmsnorm_constant_row_and_scale_invariance() {
    let arena = Arena::new();
    let x = Tensor::from_f64(
        &arena,
        &[2, 4],
        Dtype::F64,
        &[3.0; 4].iter().chain(&[-2.0; 4]).copied().collect::<Vec<_>>(),
        "x",
    )
    .unwrap();
    let gain = Tensor::full(&arena, &[4], Dtype::F64, 1.5, "g");
    let (y, _) = rmsnorm_forward(&x, &gain, "y").unwrap();
    for c in 0..4 {
        assert!((y.at(0, c) - 1.5 * 3.0 / (9.0f64 + 1e-5).sqrt()).abs() < 1e-15);
        assert!((y.at(1, c) + 1.5).abs() < 1e-5);
    }
    let mut r = rng(3);
    // rows large enough that ε is negligible against mean(x²)
    let x = rand_tensor(&arena, &[6, 8], &mut r, 1000.0, "x");
    let x2 = miniseq_core::tensor::scale(&x, 2.0, "x2").unwrap();
    let gain = rand_tensor(&arena, &[8], &mut r, 1.0, "g");
    let (a, _) = rmsnorm_forward(&x, &gain, "a").unwrap();
    let (b, _) = rmsnorm_forward(&x2, &gain, "b").unwrap();
    assert!(a.max_abs_diff(&b) < 1e-9);
}

#[test]
fn rmsnorm_finite_difference() {
    for seed in 0..5 {
        let arena = Arena::new();
        let mut r = rng(seed);
        let x = rand_tensor(&arena, &[5, 7], &mut r, 1.0, "x");
        let gain = rand_tensor(&arena, &[7], &mut r, 1.0, "g");
        let up = rand_tensor(&arena, &[5, 7], &mut r, 1.0, "r");
        let (_, saved) = rmsnorm_forward(&x, &gain, "y").unwrap();
        let (dx, dg) = rmsnorm_backward(&up, &saved, &gain).unwrap();
        let nx = numeric_grad(&x, H, |xp| {
            weighted_sum(&rmsnorm_forward(xp, &gain, "y").unwrap().0, &up)
        });
        let ng = numeric_grad(&gain, H, |gp| {
            weighted_sum(&rmsnorm_forward(&x, gp, "y").unwrap().0, &up)
        });
        assert!(rel_err(&dx.to_vec(), &nx) < TOL, "dx seed {seed}");
        assert!(rel_err(&dg.to_vec(), &ng) < TOL, "dgain seed {seed}");
    }
}

#[test]
fn mlp_zero_input_gives_zero_output() {
    let arena = Arena::new();
    let w = mlp_weights(&arena, 4, 8, 1);
    let x = Tensor::zeros(&arena, &[3, 4], Dtype::F64, "x");
    let (o, _) = mlp_forward(&x, &w).unwrap();
    assert!(o.to_vec().iter().all(|&v| v == 0.0));
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

#[test]
fn mlp_hand_computed_single_row() {
    let arena = Arena::new();
    let p = |d: &[f64]| Tensor::new_param(&arena, &[2, 2], Dtype::F64, d, "w").unwrap();
    let w = MlpWeights {
        w_gate: p(&[1.0, 0.5, -1.0, 2.0]),
        w_up: p(&[0.5, 1.0, 1.5, -0.5]),
        w_down: p(&[1.0, -1.0, 2.0, 0.5]),
    };
    let x = Tensor::from_f64(&arena, &[1, 2], Dtype::F64, &[0.3, -0.7], "x").unwrap();
    let (o, _) = mlp_forward(&x, &w).unwrap();
    let g = [0.3 * 1.0 + -0.7 * -1.0, 0.3 * 0.5 + -0.7 * 2.0];
    let u = [0.3 * 0.5 + -0.7 * 1.5, 0.3 * 1.0 + -0.7 * -0.5];
    let h = [silu(g[0]) * u[0], silu(g[1]) * u[1]];
    let expect = [h[0] * 1.0 + h[1] * 2.0, -h[0] + h[1] * 0.5];
    assert!(max_abs(&o.to_vec(), &expect) < 1e-15);
}

#[test]
fn mlp_identity_like_input_gradient() {
    // W_gate = W_up = W_down = I (d = I = 2): o_c = silu(x_c)·x_c, so
    // do_c/dx_c = silu'(x_c)·x_c + silu(x_c).
    let arena = Arena::new();
    let id = || Tensor::new_param(&arena, &[2, 2], Dtype::F64, &[1.0, 0.0, 0.0, 1.0], "w").unwrap();
    let w = MlpWeights {
        w_gate: id(),
        w_up: id(),
        w_down: id(),
    };
    let xs = [0.4, -1.3];
    let x = Tensor::from_f64(&arena, &[1, 2], Dtype::F64, &xs, "x").unwrap();
    let (_, saved) = mlp_forward(&x, &w).unwrap();
    let ones = Tensor::full(&arena, &[1, 2], Dtype::F64, 1.0, "d");
    let (dx, _) = mlp_backward(&ones, saved, &w).unwrap();
    for (c, &xc) in xs.iter().enumerate() {
        let s = 1.0 / (1.0 + (-xc).exp());
        let dsilu = s + xc * s * (1.0 - s);
        assert!((dx.get(c) - (dsilu * xc + silu(xc))).abs() < 1e-15);
    }
}

#[test]
fn mlp_output_bounded_by_operand_norms() {
    let arena = Arena::new();
    let mut r = rng(9);
    let w = mlp_weights(&arena, 6, 12, 2);
    let x = rand_tensor(&arena, &[10, 6], &mut r, 1.0, "x");
    let (o, _) = mlp_forward(&x, &w).unwrap();
    let fro = |t: &Tensor| t.sum_squares().sqrt();
    // |silu(a)| ≤ |a| elementwise, so ‖O‖ ≤ ‖X‖‖Wg‖ · ‖X‖‖Wu‖ · ‖Wd‖ (Frobenius).
    let bound = fro(&x) * fro(&w.w_gate) * fro(&x) * fro(&w.w_up) * fro(&w.w_down);
    assert!(o.to_vec().iter().all(|v| v.is_finite()));
    assert!(fro(&o) <= bound);
}

#[test]
fn mlp_zero_upstream_gives_zero_gradients() {
    let arena = Arena::new();
    let mut r = rng(4);
    let w = mlp_weights(&arena, 4, 8, 5);
    let x = rand_tensor(&arena, &[5, 4], &mut r, 1.0, "x");
    let (_, saved) = mlp_forward(&x, &w).unwrap();
    let z = Tensor::zeros(&arena, &[5, 4], Dtype::F64, "d");
    let (dx, g) = mlp_backward(&z, saved, &w).unwrap();
    for t in [&dx, &g.w_gate, &g.w_up, &g.w_down] {
        assert!(t.to_vec().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn mlp_finite_difference() {
    for seed in 0..5u64 {
        let arena = Arena::new();
        let mut r = rng(100 + seed);
        let (n, d, i) = (3 + seed as usize, 5, 9);
        let w = mlp_weights(&arena, d, i, seed);
        let x = rand_tensor(&arena, &[n, d], &mut r, 1.0, "x");
        let up = rand_tensor(&arena, &[n, d], &mut r, 1.0, "r");
        let (_, saved) = mlp_forward(&x, &w).unwrap();
        let (dx, g) = mlp_backward(&up, saved, &w).unwrap();
        let loss = |x: &Tensor, w: &MlpWeights| weighted_sum(&mlp_forward(x, w).unwrap().0, &up);
        let nx = numeric_grad(&x, H, |xp| loss(xp, &w));
        let ngate = numeric_grad(&w.w_gate, H, |p| {
            loss(
                &x,
                &MlpWeights {
                    w_gate: p.clone(),
                    ..w.clone()
                },
            )
        });
        let nup = numeric_grad(&w.w_up, H, |p| {
            loss(
                &x,
                &MlpWeights {
                    w_up: p.clone(),
                    ..w.clone()
                },
            )
        });
        let ndown = numeric_grad(&w.w_down, H, |p| {
            loss(
                &x,
                &MlpWeights {
                    w_down: p.clone(),
                    ..w.clone()
                },
            )
        });
        assert!(rel_err(&dx.to_vec(), &nx) < TOL);
        assert!(rel_err(&g.w_gate.to_vec(), &ngate) < TOL);
        assert!(rel_err(&g.w_up.to_vec(), &nup) < TOL);
        assert!(rel_err(&g.w_down.to_vec(), &ndown) < TOL);
    }
}

#[test]
fn mlp_peak_intermediate_is_three_n_by_i() {
    let arena = Arena::new();
    let mut r = rng(7);
    let (n, d, i) = (16, 8, 32);
    let w = mlp_weights(&arena, d, i, 1);
    let x = rand_tensor(&arena, &[n, d], &mut r, 1.0, "x");
    let (_, rep, _) = arena.measure("fwd", || mlp_forward(&x, &w).unwrap());
    assert_eq!(
        rep.peak_matching_above_baseline(labels::is_intermediate),
        (3 * n * i * 8) as u64
    );
}

fn head_weights(arena: &Arena, d: usize, v: usize, seed: u64) -> LmHeadWeights {
    LmHeadWeights {
        w_out: rand_param(arena, &[d, v], &mut rng(seed), 0.5, "weight.out"),
    }
}

#[test]
fn lmhead_uniform_logits_give_ln_v() {
    let arena = Arena::new();
    let mut r = rng(1);
    for v in [8usize, 32] {
        let w = LmHeadWeights {
            w_out: Tensor::zeros(&arena, &[4, v], Dtype::F64, "w"),
        };
        let x = rand_tensor(&arena, &[6, 4], &mut r, 1.0, "x");
        let l = rand_labels(&mut r, 6, v, 0.2);
        let (loss, _) = lmhead_forward(&x, &l, &w).unwrap();
        assert!((loss - (v as f64).ln()).abs() < 1e-14);
    }
    let w = LmHeadWeights {
        w_out: Tensor::zeros(&arena, &[4, 8], Dtype::F64, "w"),
    };
    let x = rand_tensor(&arena, &[3, 4], &mut r, 1.0, "x");
    let (loss, _) = lmhead_forward(&x, &Labels::new(vec![1, 2, 3], 8).unwrap(), &w).unwrap();
    assert!((loss - 2.0794415416798357).abs() < 1e-15);
}

#[test]
fn lmhead_huge_margin_gives_zero_loss() {
    let arena = Arena::new();
    let mut wd = vec![0.0; 2 * 4];
    wd[2] = 500.0; // column 2 from x[0]
    let w = LmHeadWeights {
        w_out: Tensor::new_param(&arena, &[2, 4], Dtype::F64, &wd, "w").unwrap(),
    };
    let x = Tensor::from_f64(&arena, &[1, 2], Dtype::F64, &[1.0, 0.0], "x").unwrap();
    let (loss, _) = lmhead_forward(&x, &Labels::new(vec![2], 4).unwrap(), &w).unwrap();
    assert!(loss.abs() < 1e-12);
}

#[test]
fn lmhead_all_ignored_is_degenerate() {
    let arena = Arena::new();
    let w = head_weights(&arena, 4, 8, 1);
    let x = Tensor::zeros(&arena, &[2, 4], Dtype::F64, "x");
    let l = Labels::new(vec![IGNORE_INDEX; 2], 8).unwrap();
    assert!(matches!(lmhead_forward(&x, &l, &w), Err(Error::Degenerate(_))));
    assert!(Labels::new(vec![8], 8).is_err());
}

#[test]
fn lmhead_single_valid_label_touches_one_row() {
    let arena = Arena::new();
    let mut r = rng(2);
    let w = head_weights(&arena, 4, 8, 3);
    let x = rand_tensor(&arena, &[5, 4], &mut r, 1.0, "x");
    let l = Labels::new(vec![IGNORE_INDEX, IGNORE_INDEX, 6, IGNORE_INDEX, IGNORE_INDEX], 8).unwrap();
    let (_, saved) = lmhead_forward(&x, &l, &w).unwrap();
    let (dx, dw) = lmhead_backward(saved, &w, 1.0).unwrap();
    for row in 0..5 {
        let nz = (0..4).any(|c| dx.at(row, c) != 0.0);
        assert_eq!(nz, row == 2);
    }
    // softmax − onehot sums to zero per row, so every row of dW sums to zero
    for rrow in 0..4 {
        let s: f64 = (0..8).map(|c| dw.at(rrow, c)).sum();
        assert!(s.abs() < 1e-15);
    }
}

#[test]
fn lmhead_finite_difference() {
    for seed in 0..5u64 {
        let arena = Arena::new();
        let mut r = rng(200 + seed);
        let (n, d, v) = (6 + seed as usize, 5, 11);
        let w = head_weights(&arena, d, v, seed);
        let x = rand_tensor(&arena, &[n, d], &mut r, 1.0, "x");
        let l = rand_labels(&mut r, n, v, 0.3);
        let (_, saved) = lmhead_forward(&x, &l, &w).unwrap();
        let (dx, dw) = lmhead_backward(saved, &w, 1.0).unwrap();
        let nx = numeric_grad(&x, H, |xp| lmhead_forward(xp, &l, &w).unwrap().0);
        let nw = numeric_grad(&w.w_out, H, |wp| {
            lmhead_forward(&x, &l, &LmHeadWeights { w_out: wp.clone() }).unwrap().0
        });
        assert!(rel_err(&dx.to_vec(), &nx) < TOL);
        assert!(rel_err(&dw.to_vec(), &nw) < TOL);
    }
}

#[test]
fn lmhead_loss_is_permutation_equivariant() {
    let arena = Arena::new();
    let mut r = rng(5);
    let (n, d, v) = (9, 4, 13);
    let w = head_weights(&arena, d, v, 2);
    let x = rand_tensor(&arena, &[n, d], &mut r, 1.0, "x");
    let l = rand_labels(&mut r, n, v, 0.2);
    let perm: Vec<usize> = (0..n).map(|i| (i * 4 + 3) % n).collect();
    let xv = x.to_vec();
    let px: Vec<f64> = perm.iter().flat_map(|&p| xv[p * d..(p + 1) * d].to_vec()).collect();
    let pl = Labels::new(perm.iter().map(|&p| l.ids()[p]).collect(), v).unwrap();
    let xp = Tensor::from_f64(&arena, &[n, d], Dtype::F64, &px, "xp").unwrap();
    let (a, _) = lmhead_forward(&x, &l, &w).unwrap();
    let (b, _) = lmhead_forward(&xp, &pl, &w).unwrap();
    assert!((a - b).abs() <= 1e-12);
}

fn attn_weights(arena: &Arena, d: usize, groups: usize, seed: u64) -> AttnWeights {
    let mut r = rng(seed);
    AttnWeights {
        w_q: rand_param(arena, &[d, d], &mut r, 0.5, "weight.q"),
        w_k: rand_param(arena, &[d, d / groups], &mut r, 0.5, "weight.k"),
        w_v: rand_param(arena, &[d, d / groups], &mut r, 0.5, "weight.v"),
        w_o: rand_param(arena, &[d, d], &mut r, 0.5, "weight.o"),
    }
}

#[test]
fn attention_single_position_is_value_path() {
    let arena = Arena::new();
    let mut r = rng(8);
    let (d, heads, groups) = (8, 4, 2);
    let cfg = AttnConfig {
        heads,
        groups,
        rope: false,
        score_tile: 0,
    };
    let w = attn_weights(&arena, d, groups, 1);
    let x = rand_tensor(&arena, &[3, d], &mut r, 1.0, "x"); // B=3, S=1
    let (o, _) = attn_forward(&x, &w, &cfg, 1, None).unwrap();
    let v = matmul(&x, &w.w_v, "v").unwrap();
    let hd = d / heads;
    let expanded: Vec<f64> = (0..3)
        .flat_map(|row| {
            let v = &v;
            (0..heads).flat_map(move |j| (0..hd).map(move |c| v.at(row, (j / groups) * hd + c)))
        })
        .collect();
    let a = Tensor::from_f64(&arena, &[3, d], Dtype::F64, &expanded, "a").unwrap();
    let expect = matmul(&a, &w.w_o, "e").unwrap();
    assert!(o.max_abs_diff(&expect) < 1e-14);
}

#[test]
fn grouped_attention_equals_multi_head_with_duplicated_kv() {
    let arena = Arena::new();
    let mut r = rng(11);
    let (d, heads, groups, s) = (8, 4, 2, 5);
    let w = attn_weights(&arena, d, groups, 3);
    let hd = d / heads;
    let dup = |t: &Tensor| {
        let mut out = vec![0.0; d * d];
        for row in 0..d {
            for j in 0..heads {
                for c in 0..hd {
                    out[row * d + j * hd + c] = t.at(row, (j / groups) * hd + c);
                }
            }
        }
        Tensor::new_param(&arena, &[d, d], Dtype::F64, &out, "w").unwrap()
    };
    let mha = AttnWeights {
        w_k: dup(&w.w_k),
        w_v: dup(&w.w_v),
        ..w.clone()
    };
    let x = rand_tensor(&arena, &[2 * s, d], &mut r, 1.0, "x");
    for rope in [false, true] {
        let gqa_cfg = AttnConfig {
            heads,
            groups,
            rope,
            score_tile: 0,
        };
        let mha_cfg = AttnConfig { groups: 1, ..gqa_cfg };
        let (a, _) = attn_forward(&x, &w, &gqa_cfg, s, None).unwrap();
        let (b, _) = attn_forward(&x, &mha, &mha_cfg, s, None).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-14);
    }
}

#[test]
fn attention_finite_difference() {
    let (d, s) = (8, 4);
    for (seed, heads, groups, rope) in [
        (0u64, 2, 1, false),
        (1, 4, 2, false),
        (2, 4, 2, true),
        (3, 2, 2, true),
        (4, 4, 4, false),
    ] {
        let arena = Arena::new();
        let mut r = rng(300 + seed);
        let cfg = AttnConfig {
            heads,
            groups,
            rope,
            score_tile: 0,
        };
        let w = attn_weights(&arena, d, groups, seed);
        let x = rand_tensor(&arena, &[s, d], &mut r, 1.0, "x");
        let up = rand_tensor(&arena, &[s, d], &mut r, 1.0, "r");
        let (_, saved) = attn_forward(&x, &w, &cfg, s, None).unwrap();
        let (dx, g) = attn_backward(&up, saved, &w, &cfg).unwrap();
        let loss = |x: &Tensor, w: &AttnWeights| weighted_sum(&attn_forward(x, w, &cfg, s, None).unwrap().0, &up);
        let checks = [
            (dx.to_vec(), numeric_grad(&x, H, |p| loss(p, &w))),
            (
                g.w_q.to_vec(),
                numeric_grad(&w.w_q, H, |p| {
                    loss(
                        &x,
                        &AttnWeights {
                            w_q: p.clone(),
                            ..w.clone()
                        },
                    )
                }),
            ),
            (
                g.w_k.to_vec(),
                numeric_grad(&w.w_k, H, |p| {
                    loss(
                        &x,
                        &AttnWeights {
                            w_k: p.clone(),
                            ..w.clone()
                        },
                    )
                }),
            ),
            (
                g.w_v.to_vec(),
                numeric_grad(&w.w_v, H, |p| {
                    loss(
                        &x,
                        &AttnWeights {
                            w_v: p.clone(),
                            ..w.clone()
                        },
                    )
                }),
            ),
            (
                g.w_o.to_vec(),
                numeric_grad(&w.w_o, H, |p| {
                    loss(
                        &x,
                        &AttnWeights {
                            w_o: p.clone(),
                            ..w.clone()
                        },
                    )
                }),
            ),
        ];
        for (k, (a, n)) in checks.iter().enumerate() {
            assert!(rel_err(a, n) < TOL, "case {seed} grad {k}: {}", rel_err(a, n));
        }
    }
}

#[test]
fn attention_score_tiles_are_bitwise_invisible() {
    let arena = Arena::new();
    let mut r = rng(12);
    let (d, s) = (8, 9);
    let w = attn_weights(&arena, d, 2, 4);
    let x = rand_tensor(&arena, &[2 * s, d], &mut r, 1.0, "x");
    let up = rand_tensor(&arena, &[2 * s, d], &mut r, 1.0, "r");
    let run = |tile| {
        let cfg = AttnConfig {
            heads: 4,
            groups: 2,
            rope: true,
            score_tile: tile,
        };
        let (o, saved) = attn_forward(&x, &w, &cfg, s, None).unwrap();
        let (dx, g) = attn_backward(&up, saved, &w, &cfg).unwrap();
        (o, dx, g.w_k)
    };
    let full = run(0);
    for tile in [1, 4, 9, 100] {
        let t = run(tile);
        assert!(t.0.bitwise_eq(&full.0) && t.1.bitwise_eq(&full.1) && t.2.bitwise_eq(&full.2));
    }
    let peak = |tile| {
        let cfg = AttnConfig {
            heads: 4,
            groups: 2,
            rope: false,
            score_tile: tile,
        };
        let (_, rep, _) = arena.measure("a", || attn_forward(&x, &w, &cfg, s, None).unwrap());
        rep.peak_matching_above_baseline(|l| l == labels::ATTN_SCORES)
    };
    assert_eq!(peak(0), (s * s * 8) as u64);
    assert_eq!(peak(3), (3 * s * 8) as u64);
}
