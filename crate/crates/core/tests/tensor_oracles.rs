mod common;

use common::{naive_conv, naive_matmul, random_tensor};
use ibp::tensor::conv_output_size;
use ibp::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn max_abs_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn matmul_matches_triple_loop_on_random_shapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..50 {
        let (m, k, n) = (rng.gen_range(1..40), rng.gen_range(1..40), rng.gen_range(1..40));
        let a = random_tensor(&mut rng, &[m, k], -2.0, 2.0);
        let b = random_tensor(&mut rng, &[k, n], -2.0, 2.0);
        let got = a.matmul(&b).unwrap();
        assert!(max_abs_diff(&got, &naive_matmul(&a, &b)) < 1e-12, "{m}x{k}x{n}");
    }
}

#[test]
fn conv_matches_direct_loops_on_random_shapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut checked = 0;
    while checked < 50 {
        let (c, o) = (rng.gen_range(1..4), rng.gen_range(1..5));
        let (h, w) = (rng.gen_range(1..12), rng.gen_range(1..12));
        let (k, s, p) = (rng.gen_range(1..5), rng.gen_range(1..4), rng.gen_range(0..3));
        if conv_output_size(h, k, s, p).is_none() || conv_output_size(w, k, s, p).is_none() {
            continue;
        }
        let x = random_tensor(&mut rng, &[c, h, w], -1.0, 1.0);
        let kern = random_tensor(&mut rng, &[o, c, k, k], -1.0, 1.0);
        let b = random_tensor(&mut rng, &[o], -1.0, 1.0);
        let got = x.conv2d(&kern, Some(&b), s, p).unwrap();
        let want = naive_conv(&x, &kern, Some(&b), s, p);
        assert!(max_abs_diff(&got, &want) < 1e-12, "c{c} o{o} {h}x{w} k{k} s{s} p{p}");
        checked += 1;
    }
}

#[test]
fn batched_conv_equals_per_image_conv() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x = random_tensor::<f64>(&mut rng, &[3, 2, 7, 6], -1.0, 1.0);
    let kern = random_tensor(&mut rng, &[4, 2, 3, 3], -1.0, 1.0);
    let batched = x.conv2d(&kern, None, 2, 1).unwrap();
    let per = batched.len() / 3;
    for i in 0..3 {
        let xi = Tensor::new(&[2, 7, 6], x.data()[i * 84..(i + 1) * 84].to_vec()).unwrap();
        let one = xi.conv2d(&kern, None, 2, 1).unwrap();
        assert_eq!(one.data(), &batched.data()[i * per..(i + 1) * per]);
    }
}

#[test]
fn conv_size_rule() {
    assert_eq!(conv_output_size(28, 4, 2, 0), Some(13));
    assert_eq!(conv_output_size(13, 4, 1, 0), Some(10));
    assert_eq!(conv_output_size(2, 3, 1, 0), None);
}

proptest! {
    #[test]
    fn elementwise_ops_agree_with_scalar_maps(v in prop::collection::vec(-5.0f64..5.0, 1..40)) {
        let t = Tensor::from_vec(v.clone());
        prop_assert_eq!(t.relu().data().to_vec(), v.iter().map(|x| x.max(0.0)).collect::<Vec<_>>());
        prop_assert_eq!(t.abs().data().to_vec(), v.iter().map(|x| x.abs()).collect::<Vec<_>>());
        let s = t.sigmoid();
        for (a, x) in s.data().iter().zip(&v) {
            prop_assert!((a - 1.0 / (1.0 + (-x).exp())).abs() < 1e-12);
        }
        let sum: f64 = v.iter().sum();
        prop_assert!((t.sum() - sum).abs() < 1e-9);
    }

    #[test]
    fn matmul_is_associative_with_vectors(
        m in 1usize..8, k in 1usize..8, seed in any::<u64>()
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_tensor::<f64>(&mut rng, &[m, k], -1.0, 1.0);
        let v = random_tensor::<f64>(&mut rng, &[k], -1.0, 1.0);
        let via_mat = a.matmul(&v.reshape(&[k, 1]).unwrap()).unwrap();
        let via_vec = a.matvec(&v).unwrap();
        for (x, y) in via_mat.data().iter().zip(via_vec.data()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }
}
