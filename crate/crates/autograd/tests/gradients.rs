//! Finite-difference oracles for every differentiable primitive.
//!
//! Each op is wrapped in a scalar loss built from random bounded inputs;
//! analytic gradients from the tape must match central differences on the
//! same forward evaluation. Ten fixed seeds per op.

use std::sync::Arc;

use autograd::gradcheck::{assert_grads_close, finite_diff};
use autograd::{Tape, Tensor, TensorId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: std::ops::Range<u64> = 0..10;
const TOL: f32 = 1e-3;
const H: f32 = 1e-2;

fn random_data(rng: &mut ChaCha8Rng, n: usize, lo: f32, hi: f32) -> Vec<f32> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Builds the graph once for analytic grads, then replays the forward pass
/// with per-leaf perturbations for the numeric side.
fn check_op(
    name: &str,
    seed: u64,
    shapes: &[Vec<usize>],
    build: impl Fn(&mut Tape, &[TensorId]) -> TensorId,
) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs: Vec<Tensor> = shapes
        .iter()
        .map(|s| {
            let n = s.iter().product();
            Tensor::new(s.clone(), random_data(&mut rng, n, -2.0, 2.0)).unwrap().with_grad()
        })
        .collect();

    let mut tape = Tape::new();
    let ids: Vec<TensorId> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let loss = build(&mut tape, &ids);
    assert_eq!(tape.len(loss), 1, "{name}: loss must be scalar");
    tape.backward(loss).unwrap();

    for (i, input) in inputs.iter().enumerate() {
        let analytic = tape.grad(ids[i]).expect("missing analytic gradient").to_vec();
        let numeric = finite_diff(
            |probe: &[f32]| {
                let mut t = Tape::new();
                let ids: Vec<TensorId> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, inp)| {
                        if j == i {
                            let probed = Tensor::new(inp.shape.clone(), probe.to_vec()).unwrap();
                            t.leaf(&probed)
                        } else {
                            t.leaf(inp)
                        }
                    })
                    .collect();
                let loss = build(&mut t, &ids);
                t.data(loss)[0]
            },
            &input.data,
            H,
        );
        assert_grads_close(&analytic, &numeric, TOL, &format!("{name} input {i} seed {seed}"));
    }
}

/// Random positive weights so reductions probe every output element.
fn weighted_sum(tape: &mut Tape, x: TensorId, seed: u64) -> TensorId {
    let n = tape.len(x);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
    let w = Arc::new(random_data(&mut rng, n, 0.1, 1.0));
    let wx = tape.mul_const(x, w).unwrap();
    tape.sum_all(wx)
}

#[test]
fn grad_matmul() {
    for seed in SEEDS {
        check_op("matmul", seed, &[vec![3, 4], vec![4, 2]], |t, ids| {
            let c = t.matmul(ids[0], ids[1]).unwrap();
            t.sum_all(c)
        });
    }
}

#[test]
fn grad_matmul_transposed() {
    for seed in SEEDS {
        check_op("matmul_t", seed, &[vec![3, 4], vec![2, 4]], |t, ids| {
            let c = t.matmul_t(ids[0], ids[1], true).unwrap();
            weighted_sum(t, c, seed)
        });
    }
}

#[test]
fn grad_linear_bias() {
    for seed in SEEDS {
        check_op("linear", seed, &[vec![5, 3], vec![4, 3], vec![4]], |t, ids| {
            let y = t.linear(ids[0], ids[1], Some(ids[2])).unwrap();
            weighted_sum(t, y, seed)
        });
    }
}

#[test]
fn grad_bmm_both_layouts() {
    for seed in SEEDS {
        check_op("bmm", seed, &[vec![2, 3, 4], vec![2, 4, 2]], |t, ids| {
            let c = t.bmm(ids[0], ids[1], false).unwrap();
            weighted_sum(t, c, seed)
        });
        check_op("bmm_t", seed, &[vec![2, 3, 4], vec![2, 5, 4]], |t, ids| {
            let c = t.bmm(ids[0], ids[1], true).unwrap();
            weighted_sum(t, c, seed)
        });
    }
}

#[test]
fn grad_layer_norm() {
    for seed in SEEDS {
        check_op("layer_norm", seed, &[vec![2, 8], vec![8], vec![8]], |t, ids| {
            let y = t.layer_norm(ids[0], ids[1], ids[2], 1e-5).unwrap();
            weighted_sum(t, y, seed)
        });
    }
}

#[test]
fn grad_softmax_jacobian() {
    for seed in SEEDS {
        check_op("softmax", seed, &[vec![1, 5]], |t, ids| {
            let y = t.softmax_last(ids[0]).unwrap();
            weighted_sum(t, y, seed)
        });
        check_op("log_softmax", seed, &[vec![3, 5]], |t, ids| {
            let y = t.log_softmax_last(ids[0]).unwrap();
            weighted_sum(t, y, seed)
        });
    }
}

#[test]
fn grad_gelu_both_variants() {
    for seed in SEEDS {
        for exact in [false, true] {
            check_op("gelu", seed, &[vec![12]], |t, ids| {
                let y = t.gelu(ids[0], exact);
                weighted_sum(t, y, seed)
            });
        }
    }
}

#[test]
fn grad_elementwise_binary() {
    for seed in SEEDS {
        check_op("mul", seed, &[vec![6], vec![6]], |t, ids| {
            let y = t.mul(ids[0], ids[1]).unwrap();
            t.sum_all(y)
        });
        check_op("sub", seed, &[vec![6], vec![6]], |t, ids| {
            let y = t.sub(ids[0], ids[1]).unwrap();
            weighted_sum(t, y, seed)
        });
        // keep denominators away from zero
        check_op("div", seed, &[vec![6], vec![6]], |t, ids| {
            let shifted = t.affine(ids[1], 0.25, 3.0);
            let y = t.div(ids[0], shifted).unwrap();
            t.sum_all(y)
        });
    }
}

#[test]
fn grad_scale_rows() {
    for seed in SEEDS {
        check_op("scale_rows", seed, &[vec![4, 3], vec![4]], |t, ids| {
            let y = t.scale_rows(ids[0], ids[1]).unwrap();
            weighted_sum(t, y, seed)
        });
    }
}

#[test]
fn grad_rearrangements() {
    for seed in SEEDS {
        check_op("gather", seed, &[vec![3, 4]], |t, ids| {
            let idx: Arc<Vec<u32>> = Arc::new((0..24).map(|i| (i * 7 % 12) as u32).collect());
            let y = t.gather(ids[0], idx, vec![24]).unwrap();
            weighted_sum(t, y, seed)
        });
        check_op("concat_last", seed, &[vec![3, 2], vec![3, 4]], |t, ids| {
            let y = t.concat_last(ids[0], ids[1]).unwrap();
            weighted_sum(t, y, seed)
        });
        check_op("reshape", seed, &[vec![3, 4]], |t, ids| {
            let y = t.reshape(ids[0], vec![2, 6]).unwrap();
            weighted_sum(t, y, seed)
        });
    }
}

#[test]
fn grad_reductions() {
    for seed in SEEDS {
        check_op("mean_all", seed, &[vec![7]], |t, ids| t.mean_all(ids[0]));
        check_op("sum_axis0", seed, &[vec![5, 3]], |t, ids| {
            let y = t.sum_axis0(ids[0], 5, 3).unwrap();
            weighted_sum(t, y, seed)
        });
        check_op("mean_axis1", seed, &[vec![2, 4, 3]], |t, ids| {
            let y = t.mean_axis1(ids[0], 2, 4, 3).unwrap();
            weighted_sum(t, y, seed)
        });
    }
}

#[test]
fn grad_scalar_maps() {
    for seed in SEEDS {
        check_op("affine", seed, &[vec![8]], |t, ids| {
            let y = t.affine(ids[0], -1.5, 0.25);
            weighted_sum(t, y, seed)
        });
        check_op("add_cycled_const", seed, &[vec![2, 4]], |t, ids| {
            let k = Arc::new(vec![0.5, -1.0, 2.0, 0.0]);
            let y = t.add_cycled_const(ids[0], k).unwrap();
            weighted_sum(t, y, seed)
        });
        // log needs positive inputs
        check_op("log", seed, &[vec![6]], |t, ids| {
            let pos = t.affine(ids[0], 0.2, 3.0);
            let y = t.log(pos);
            t.sum_all(y)
        });
    }
}

#[test]
fn no_nan_escapes_bounded_forward() {
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tape = Tape::new();
        let x = tape.constant(random_data(&mut rng, 32, -10.0, 10.0), vec![4, 8]).unwrap();
        let g = tape.constant(vec![1.0; 8], vec![8]).unwrap();
        let b = tape.constant(vec![0.0; 8], vec![8]).unwrap();
        let ln = tape.layer_norm(x, g, b, 1e-5).unwrap();
        let sm = tape.softmax_last(ln).unwrap();
        let ge = tape.gelu(sm, false);
        let w = tape.constant(random_data(&mut rng, 64, -10.0, 10.0), vec![8, 8]).unwrap();
        let mm = tape.matmul(ge, w).unwrap();
        assert!(tape.data(mm).iter().all(|v| v.is_finite()));
    }
}
