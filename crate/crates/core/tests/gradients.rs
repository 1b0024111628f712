mod common;

use common::{finite_difference, objective_gradient_error, random_tensor, rel_err, scalar_of};
use ibp::autodiff::Graph;
use ibp::loss::{LossConfig, PenaltyReduction};
use ibp::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Checks d(f)/d(x) for a graph function of one input against differences.
fn check_unary(x: Tensor<f64>, f: impl Fn(&Graph<f64>, ibp::autodiff::Var) -> ibp::autodiff::Var) {
    let g = Graph::new();
    let xv = g.param(x.clone());
    let y = f(&g, xv);
    let analytic = g.backward(y).unwrap().take(xv).unwrap();
    let numeric = finite_difference(&x, 1e-6, |p| {
        scalar_of(|g| {
            let v = g.param(p.clone());
            f(g, v)
        })
    });
    let err = rel_err(analytic.data(), &numeric, 1e-10);
    assert!(err < 1e-6, "relative error {err}");
}

#[test]
fn primitive_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    // Values away from the relu/abs kinks.
    let x = Tensor::from_vec(vec![0.7, -1.3, 0.4, 2.2, -0.6, 1.1]);
    check_unary(x.clone(), |g, v| g.sum(g.relu(v)));
    check_unary(x.clone(), |g, v| g.sum(g.abs(v)));
    check_unary(x.clone(), |g, v| g.mean(g.square(g.sigmoid(v))));
    let w = random_tensor::<f64>(&mut rng, &[4, 6], -1.0, 1.0);
    check_unary(x.reshape(&[1, 6]).unwrap(), |g, v| {
        let w = g.constant(w.clone());
        g.sum(g.square(g.linear(v, w, None).unwrap()))
    });
    let labels = [2usize, 0];
    check_unary(x.reshape(&[2, 3]).unwrap(), move |g, v| g.cross_entropy(v, &labels).unwrap());
}

#[test]
fn conv_gradients_for_input_kernel_and_bias() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random_tensor::<f64>(&mut rng, &[2, 2, 5, 4], -1.0, 1.0);
    let k = random_tensor::<f64>(&mut rng, &[3, 2, 3, 3], -1.0, 1.0);
    let b = random_tensor::<f64>(&mut rng, &[3], -1.0, 1.0);
    let (kc, bc) = (k.clone(), b.clone());
    check_unary(x.clone(), move |g, v| {
        let out = g.conv2d(v, g.constant(kc.clone()), Some(g.constant(bc.clone())), 2, 1).unwrap();
        g.sum(g.square(out))
    });
    let (xc, bc) = (x.clone(), b.clone());
    check_unary(k.clone(), move |g, v| {
        let out = g.conv2d(g.constant(xc.clone()), v, Some(g.constant(bc.clone())), 1, 0).unwrap();
        g.sum(g.square(out))
    });
    check_unary(b, move |g, v| {
        let out = g.conv2d(g.constant(x.clone()), g.constant(k.clone()), Some(v), 1, 1).unwrap();
        g.sum(g.square(out))
    });
}

#[test]
fn worst_case_logit_gradient_splits_between_bounds() {
    let lower = Tensor::new(&[1, 3], vec![0.1, -0.4, 0.3]).unwrap();
    let upper = Tensor::new(&[1, 3], vec![0.9, 0.2, 1.4]).unwrap();
    let g = Graph::<f64>::new();
    let (l, u) = (g.param(lower), g.param(upper));
    let w = g.worst_case_logits(l, u, &[1]).unwrap();
    let loss = g.sum(w);
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(l).unwrap().data(), &[0.0, 1.0, 0.0]);
    assert_eq!(grads.get(u).unwrap().data(), &[1.0, 0.0, 1.0]);
}

#[test]
fn interval_objective_gradients_on_random_networks() {
    for seed in 0..6 {
        let e = objective_gradient_error(seed, &LossConfig::ibp());
        assert!(e < 1e-4, "seed {seed}: {e}");
    }
}

#[test]
fn penalized_objective_gradients_on_random_networks() {
    for (seed, reduction, include_logits) in [
        (10, PenaltyReduction::Mean, true),
        (11, PenaltyReduction::Sum, true),
        (12, PenaltyReduction::Mean, false),
        (13, PenaltyReduction::Sum, false),
    ] {
        let cfg = LossConfig {
            reduction,
            include_logits,
            ..LossConfig::default()
        };
        let e = objective_gradient_error(seed, &cfg);
        assert!(e < 1e-4, "seed {seed}: {e}");
    }
}
