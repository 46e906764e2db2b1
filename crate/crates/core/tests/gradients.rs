//! Finite-difference checks for every differentiable op (fast dev sweep;
//! the acceptance suite runs the same roster at 20 trials).

mod common;

#[test]
fn analytic_gradients_match_central_differences() {
    for (name, err) in common::run_op_sweep(2) {
        assert!(err < 1e-4, "op `{name}` worst rel err {err}");
    }
}

#[test]
fn bn_train_mode_mean_square_loss_matches_fd() {
    // 64-bit, h = 1e-5, rel err < 1e-4 on a mean-square loss through BN
    use rand::SeedableRng;
    use vlt_core::tensor::gradcheck::{check, rand_tensor, GradCheck};

    let mut rng = rand::rngs::StdRng::seed_from_u64(42);
    let x = rand_tensor(&[4, 3, 4, 4], &mut rng);
    let gamma = rand_tensor(&[3], &mut rng);
    let beta = rand_tensor(&[3], &mut rng);
    let report = check(
        &[x, gamma, beta],
        &[true, true, true],
        |g, v| {
            let (y, _, _) = g.batch_norm_train(v[0], v[1], v[2], 1e-5)?;
            let sq = g.mul(y, y)?;
            Ok(g.mean_all(sq))
        },
        &GradCheck { h: 1e-5, ..Default::default() },
    )
    .unwrap();
    assert!(report.max_rel_err < 1e-4, "{:?}", report);
}
