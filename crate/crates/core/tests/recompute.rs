mod common;

use common::*;
use miniseq_core::blocks::mlp::{mlp_backward, mlp_forward};
use miniseq_core::blocks::{MlpGrads, MlpSaved, MlpWeights};
use miniseq_core::memtrack::Arena;
use miniseq_core::recompute::*;
use miniseq_core::tensor::{Dtype, Tensor};
use miniseq_core::Result;

struct MlpLayer<'a>(&'a MlpWeights);

impl Layer for MlpLayer<'_> {
    type Saved = MlpSaved;
    type Grads = MlpGrads;
    fn forward(&self, x: &Tensor) -> Result<(Tensor, MlpSaved)> {
        mlp_forward(x, self.0)
    }
    fn backward(&self, d: &Tensor, s: MlpSaved) -> Result<(Tensor, MlpGrads)> {
        mlp_backward(d, s, self.0)
    }
}

struct Identity;

impl Layer for Identity {
    type Saved = ();
    type Grads = ();
    fn forward(&self, x: &Tensor) -> Result<(Tensor, ())> {
        Ok((x.clone(), ()))
    }
    fn backward(&self, d: &Tensor, _: ()) -> Result<(Tensor, ())> {
        Ok((d.clone(), ()))
    }
}

fn setup(arena: &Arena) -> (MlpWeights, Tensor, Tensor) {
    let mut r = rng(1);
    let w = MlpWeights {
        w_gate: rand_param(arena, &[6, 20], &mut r, 0.5, "weight"),
        w_up: rand_param(arena, &[6, 20], &mut r, 0.5, "weight"),
        w_down: rand_param(arena, &[20, 6], &mut r, 0.5, "weight"),
    };
    let x = rand_tensor(arena, &[12, 6], &mut r, 1.0, "x");
    let up = rand_tensor(arena, &[12, 6], &mut r, 1.0, "r");
    (w, x, up)
}

#[test]
fn checkpointed_forward_matches_and_keeps_less() {
    let arena = Arena::new();
    let (w, x, _) = setup(&arena);
    let layer = MlpLayer(&w);
    let base = arena.live_bytes();
    let (o_plain, s_plain) = layer.forward(&x).unwrap();
    let plain_live = arena.live_bytes() - base;
    drop((o_plain.clone(), s_plain));
    let base = arena.live_bytes();
    let (o_ck, ck) = checkpointed_forward(&layer, &x).unwrap();
    let ck_live = arena.live_bytes() - base;
    assert!(o_ck.bitwise_eq(&o_plain));
    assert!(ck.x.shares_buffer(&x));
    assert!(ck_live < plain_live);
}

#[test]
fn identity_layer_saves_input() {
    let arena = Arena::new();
    let (_, x, _) = setup(&arena);
    let (o, ck) = checkpointed_forward(&Identity, &x).unwrap();
    assert!(o.bitwise_eq(&x) && ck.x.bitwise_eq(&x));
}

#[test]
fn checkpointed_backward_matches_and_costs_one_forward() {
    let arena = Arena::new();
    let (w, x, up) = setup(&arena);
    let layer = MlpLayer(&w);
    let ((_, s), _, fwd) = arena.measure("f", || layer.forward(&x).unwrap());
    let ((dx, g), _, plain_bwd) = arena.measure("b", || layer.backward(&up, s).unwrap());
    let (_, ck) = checkpointed_forward(&layer, &x).unwrap();
    let ((dx2, g2), _, ck_bwd) = arena.measure("c", || checkpointed_backward(&layer, ck, &up).unwrap());
    assert!(dx.max_abs_diff(&dx2) <= 1e-12);
    assert!(g.w_gate.max_abs_diff(&g2.w_gate) <= 1e-12);
    assert!(g.w_down.max_abs_diff(&g2.w_down) <= 1e-12);
    assert_eq!(ck_bwd.flops, fwd.flops + plain_bwd.flops);

    let z = Tensor::zeros(&arena, &[12, 6], Dtype::F64, "z");
    let (_, ck) = checkpointed_forward(&layer, &x).unwrap();
    let (dx, g) = checkpointed_backward(&layer, ck, &z).unwrap();
    assert!(dx.to_vec().iter().chain(&g.w_up.to_vec()).all(|&v| v == 0.0));
}

#[test]
fn policy_dispatch() {
    let arena = Arena::new();
    let (w, x, up) = setup(&arena);
    let layer = MlpLayer(&w);
    let (_, s) = policy_forward(&layer, &x, CheckpointPolicy::new(false)).unwrap();
    assert!(matches!(s, LayerSaved::Full(_)));
    let (dx_a, _) = policy_backward(&layer, s, &up).unwrap();
    let (_, s) = policy_forward(&layer, &x, CheckpointPolicy::new(true)).unwrap();
    assert!(matches!(s, LayerSaved::Checkpointed(_)));
    let (dx_b, _) = policy_backward(&layer, s, &up).unwrap();
    assert!(dx_a.bitwise_eq(&dx_b));
}
