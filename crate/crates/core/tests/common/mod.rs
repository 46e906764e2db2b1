//! Shared finite-difference sweeps over every differentiable op.

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use vlt_core::tensor::gradcheck::{check, rand_tensor, GradCheck, GradReport};
use vlt_core::tensor::{Graph, Tensor, Var};

type BuildFn = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> vlt_core::Result<Var>>;

fn away_from_zero(t: &mut Tensor<f64>, margin: f64) {
    for v in t.data_mut() {
        if v.abs() < margin {
            *v += if *v >= 0.0 { margin } else { -margin };
        }
    }
}

fn squared_mean(g: &mut Graph<f64>, x: Var) -> vlt_core::Result<Var> {
    let sq = g.mul(x, x)?;
    Ok(g.mean_all(sq))
}

/// One named gradient check: inputs, which require grad, and the forward.
pub struct OpCase {
    pub name: &'static str,
    pub inputs: Vec<Tensor<f64>>,
    pub requires: Vec<bool>,
    pub build: BuildFn,
}

/// The full differentiable-op roster at small sizes. `trial` varies shapes
/// and data through the rng seed.
pub fn op_cases(trial: u64) -> Vec<OpCase> {
    let mut rng = StdRng::seed_from_u64(0xC0FFEE ^ trial);
    let mut cases: Vec<OpCase> = Vec::new();

    let a = rand_tensor(&[2, 3, 4, 4], &mut rng);
    let b = rand_tensor(&[2, 3, 4, 4], &mut rng);
    cases.push(OpCase {
        name: "add",
        inputs: vec![a.clone(), b.clone()],
        requires: vec![true, true],
        build: Box::new(|g, v| {
            let y = g.add(v[0], v[1])?;
            squared_mean(g, y)
        }),
    });
    cases.push(OpCase {
        name: "sub",
        inputs: vec![a.clone(), b.clone()],
        requires: vec![true, true],
        build: Box::new(|g, v| {
            let y = g.sub(v[0], v[1])?;
            squared_mean(g, y)
        }),
    });
    cases.push(OpCase {
        name: "mul",
        inputs: vec![a.clone(), b],
        requires: vec![true, true],
        build: Box::new(|g, v| {
            let y = g.mul(v[0], v[1])?;
            Ok(g.mean_all(y))
        }),
    });
    cases.push(OpCase {
        name: "scale",
        inputs: vec![a.clone()],
        requires: vec![true],
        build: Box::new(|g, v| {
            let y = g.scale(v[0], -1.7);
            squared_mean(g, y)
        }),
    });

    let mut r = rand_tensor(&[2, 2, 3, 3], &mut rng);
    away_from_zero(&mut r, 0.05);
    cases.push(OpCase {
        name: "relu",
        inputs: vec![r],
        requires: vec![true],
        build: Box::new(|g, v| {
            let y = g.relu(v[0]);
            squared_mean(g, y)
        }),
    });
    cases.push(OpCase {
        name: "sigmoid",
        inputs: vec![rand_tensor(&[3, 5], &mut rng)],
        requires: vec![true],
        build: Box::new(|g, v| {
            let y = g.sigmoid(v[0]);
            squared_mean(g, y)
        }),
    });
    cases.push(OpCase {
        name: "exp",
        inputs: vec![rand_tensor(&[3, 5], &mut rng)],
        requires: vec![true],
        build: Box::new(|g, v| {
            let y = g.exp(v[0]);
            squared_mean(g, y)
        }),
    });
    cases.push(OpCase {
        name: "softmax",
        inputs: vec![rand_tensor(&[4, 6], &mut rng)],
        requires: vec![true],
        build: Box::new(|g, v| {
            let y = g.softmax(v[0]);
            squared_mean(g, y)
        }),
    });

    cases.push(OpCase {
        name: "linear",
        inputs: vec![
            rand_tensor(&[3, 4], &mut rng),
            rand_tensor(&[5, 4], &mut rng),
            rand_tensor(&[5], &mut rng),
        ],
        requires: vec![true, true, true],
        build: Box::new(|g, v| {
            let y = g.linear(v[0], v[1], Some(v[2]))?;
            squared_mean(g, y)
        }),
    });

    cases.push(OpCase {
        name: "conv2d_3x3",
        inputs: vec![
            rand_tensor(&[2, 3, 5, 5], &mut rng),
            rand_tensor(&[4, 3, 3, 3], &mut rng),
            rand_tensor(&[4], &mut rng),
        ],
        requires: vec![true, true, true],
        build: Box::new(|g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), 1, 1, 1)?;
            squared_mean(g, y)
        }),
    });
    cases.push(OpCase {
        name: "conv2d_stride2",
        inputs: vec![
            rand_tensor(&[1, 2, 6, 6], &mut rng),
            rand_tensor(&[4, 2, 3, 3], &mut rng),
        ],
        requires: vec![true, true],
        build: Box::new(|g, v| {
            let y = g.conv2d(v[0], v[1], None, 2, 1, 1)?;
            squared_mean(g, y)
        }),
    });
    cases.push(OpCase {
        name: "conv2d_grouped",
        inputs: vec![
            rand_tensor(&[2, 4, 4, 4], &mut rng),
            rand_tensor(&[6, 2, 3, 3], &mut rng),
        ],
        requires: vec![true, true],
        build: Box::new(|g, v| {
            let y = g.conv2d(v[0], v[1], None, 1, 1, 2)?;
            squared_mean(g, y)
        }),
    });
    cases.push(OpCase {
        name: "conv2d_depthwise",
        inputs: vec![
            rand_tensor(&[2, 3, 5, 5], &mut rng),
            rand_tensor(&[3, 1, 3, 3], &mut rng),
        ],
        requires: vec![true, true],
        build: Box::new(|g, v| {
            let y = g.conv2d(v[0], v[1], None, 1, 1, 3)?;
            squared_mean(g, y)
        }),
    });
    cases.push(OpCase {
        name: "conv2d_pointwise",
        inputs: vec![
            rand_tensor(&[2, 6, 4, 4], &mut rng),
            rand_tensor(&[3, 6, 1, 1], &mut rng),
        ],
        requires: vec![true, true],
        build: Box::new(|g, v| {
            let y = g.conv2d(v[0], v[1], None, 1, 0, 1)?;
            squared_mean(g, y)
        }),
    });

    cases.push(OpCase {
        name: "dw_xcorr",
        inputs: vec![
            rand_tensor(&[2, 3, 6, 6], &mut rng),
            rand_tensor(&[2, 3, 3, 3], &mut rng),
        ],
        requires: vec![true, true],
        build: Box::new(|g, v| {
            let y = g.dw_xcorr(v[0], v[1])?;
            squared_mean(g, y)
        }),
    });

    cases.push(OpCase {
        name: "batch_norm_train",
        inputs: vec![
            rand_tensor(&[3, 4, 3, 3], &mut rng),
            rand_tensor(&[4], &mut rng),
            rand_tensor(&[4], &mut rng),
        ],
        requires: vec![true, true, true],
        build: Box::new(|g, v| {
            let (y, _, _) = g.batch_norm_train(v[0], v[1], v[2], 1e-5)?;
            squared_mean(g, y)
        }),
    });
    cases.push(OpCase {
        name: "batch_norm_eval",
        inputs: vec![
            rand_tensor(&[2, 3, 3, 3], &mut rng),
            rand_tensor(&[3], &mut rng),
            rand_tensor(&[3], &mut rng),
        ],
        requires: vec![true, true, true],
        build: Box::new(|g, v| {
            let mean = Tensor::new(vec![3], vec![0.1, -0.2, 0.05]).unwrap();
            let var = Tensor::new(vec![3], vec![0.8, 1.2, 0.5]).unwrap();
            let y = g.batch_norm_eval(v[0], v[1], v[2], &mean, &var, 1e-5)?;
            squared_mean(g, y)
        }),
    });

    cases.push(OpCase {
        name: "channel_shuffle",
        inputs: vec![rand_tensor(&[2, 6, 3, 3], &mut rng)],
        requires: vec![true],
        build: Box::new(|g, v| {
            let y = g.channel_shuffle(v[0], 2)?;
            squared_mean(g, y)
        }),
    });
    cases.push(OpCase {
        name: "concat_slice",
        inputs: vec![
            rand_tensor(&[2, 2, 3, 3], &mut rng),
            rand_tensor(&[2, 4, 3, 3], &mut rng),
        ],
        requires: vec![true, true],
        build: Box::new(|g, v| {
            let y = g.concat_c(&[v[0], v[1]])?;
            let (lo, hi) = g.split_c_half(y)?;
            let p = g.mul(lo, hi)?;
            Ok(g.mean_all(p))
        }),
    });
    cases.push(OpCase {
        name: "slice_batch_stack",
        inputs: vec![rand_tensor(&[3, 4], &mut rng)],
        requires: vec![true],
        build: Box::new(|g, v| {
            let r0 = g.slice_batch(v[0], 0, 1)?;
            let r2 = g.slice_batch(v[0], 2, 1)?;
            let s = g.stack_rows(&[r2, r0])?;
            squared_mean(g, s)
        }),
    });
    cases.push(OpCase {
        name: "global_avg_pool",
        inputs: vec![rand_tensor(&[2, 3, 4, 4], &mut rng)],
        requires: vec![true],
        build: Box::new(|g, v| {
            let y = g.global_avg_pool(v[0])?;
            squared_mean(g, y)
        }),
    });
    cases.push(OpCase {
        name: "region_mean",
        inputs: vec![rand_tensor(&[2, 3, 5, 5], &mut rng)],
        requires: vec![true],
        build: Box::new(|g, v| {
            let y = g.region_mean(v[0], 1, 4, 0, 3)?;
            squared_mean(g, y)
        }),
    });
    cases.push(OpCase {
        name: "scale_channels",
        inputs: vec![
            rand_tensor(&[2, 3, 4, 4], &mut rng),
            rand_tensor(&[2, 3], &mut rng),
        ],
        requires: vec![true, true],
        build: Box::new(|g, v| {
            let y = g.scale_channels(v[0], v[1])?;
            squared_mean(g, y)
        }),
    });
    cases.push(OpCase {
        name: "embed_mean",
        inputs: vec![rand_tensor(&[7, 4], &mut rng)],
        requires: vec![true],
        build: Box::new(|g, v| {
            let y = g.embed_mean(v[0], &[1, 3, 3, 6])?;
            squared_mean(g, y)
        }),
    });

    let logits = rand_tensor(&[2, 1, 4, 4], &mut rng);
    let targets = Tensor::from_fn(&[2, 1, 4, 4], |_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 });
    let weights = Tensor::from_fn(&[2, 1, 4, 4], |_| rng.gen_range(0.0..1.0));
    cases.push(OpCase {
        name: "bce_with_logits",
        inputs: vec![logits],
        requires: vec![true],
        build: Box::new(move |g, v| g.bce_with_logits(v[0], &targets, &weights)),
    });

    // reg distances must stay positive; route through exp as the head does
    let pre_reg = rand_tensor(&[2, 4, 3, 3], &mut rng);
    let reg_targets = Tensor::from_fn(&[2, 4, 3, 3], |_| rng.gen_range(0.5..3.0));
    let iou_weights = Tensor::from_fn(&[2, 3, 3], |_| {
        if rng.gen_bool(0.6) {
            rng.gen_range(0.1..1.0)
        } else {
            0.0
        }
    });
    cases.push(OpCase {
        name: "iou_loss",
        inputs: vec![pre_reg],
        requires: vec![true],
        build: Box::new(move |g, v| {
            let pos = g.exp(v[0]);
            g.iou_loss(pos, &reg_targets, &iou_weights)
        }),
    });

    cases.push(OpCase {
        name: "sum_all",
        inputs: vec![rand_tensor(&[5], &mut rng)],
        requires: vec![true],
        build: Box::new(|g, v| {
            let s = g.sum_all(v[0]);
            Ok(g.mul(s, s)?)
        }),
    });

    cases
}

/// Run every op case for `trials` rounds; returns (name, worst rel err).
pub fn run_op_sweep(trials: u64) -> Vec<(String, f64)> {
    let mut worst: std::collections::BTreeMap<String, f64> = Default::default();
    for trial in 0..trials {
        for case in op_cases(trial) {
            let report: GradReport = check(
                &case.inputs,
                &case.requires,
                &case.build,
                &GradCheck { seed: trial, ..Default::default() },
            )
            .unwrap_or_else(|e| panic!("gradcheck {} failed to run: {e}", case.name));
            let w = worst.entry(case.name.to_string()).or_insert(0.0);
            if report.max_rel_err > *w {
                *w = report.max_rel_err;
            }
        }
    }
    worst.into_iter().collect()
}
