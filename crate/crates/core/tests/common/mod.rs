//! Helpers shared by the integration tests: random architectures and naive
//! reference implementations.

#![allow(dead_code)]

use ibp::autodiff::{Graph, Var};
use ibp::network::{LayerSpec, Network, NetworkSpec};
use ibp::{Scalar, Tensor};
use rand::Rng;

/// A random valid architecture with 2 to 6 affine layers: optional
/// convolutions (each followed by a relu), a flatten, dense layers with
/// relu between them, and a final dense layer onto `num_classes`.
pub fn random_spec(rng: &mut impl Rng, input_shape: [usize; 3], num_classes: usize) -> NetworkSpec {
    loop {
        let depth = rng.gen_range(2..=6);
        let convs = rng.gen_range(0..=(depth - 1).min(2));
        let mut layers = Vec::new();
        let mut c = input_shape[0];
        for _ in 0..convs {
            let out = rng.gen_range(1..=3);
            let k = rng.gen_range(1..=3);
            let stride = rng.gen_range(1..=2);
            let padding = rng.gen_range(0..=1);
            layers.push(LayerSpec::Conv2d {
                in_filters: c,
                out_filters: out,
                kernel_size: k,
                stride,
                padding,
            });
            layers.push(LayerSpec::relu());
            c = out;
        }
        layers.push(LayerSpec::Flatten);
        for _ in convs..depth - 1 {
            layers.push(LayerSpec::dense(rng.gen_range(2..=6)));
            layers.push(if rng.gen_bool(0.8) {
                LayerSpec::relu()
            } else {
                LayerSpec::Activation(ibp::interval::Activation::Sigmoid)
            });
        }
        layers.push(LayerSpec::dense(num_classes));
        let spec = NetworkSpec::new(input_shape, layers, num_classes);
        if spec.validate().is_ok() {
            return spec;
        }
    }
}

/// Network with Gaussian-ish weights and non-zero biases, so no
/// pre-activation sits exactly on a kink.
pub fn random_network<T: Scalar>(rng: &mut impl Rng, spec: NetworkSpec) -> Network<T> {
    let params = spec
        .param_shapes()
        .unwrap()
        .into_iter()
        .map(|s| {
            let scale = if s.len() == 1 { 0.3 } else { 1.0 / (s[1..].iter().product::<usize>() as f64).sqrt() };
            Tensor::from_fn(&s, |_| T::from_f64_lossy(rng.gen_range(-1.5..1.5) * scale)).unwrap()
        })
        .collect();
    Network::from_parameters(spec, params).unwrap()
}

pub fn random_tensor<T: Scalar>(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::from_f64_lossy(rng.gen_range(lo..hi))).unwrap()
}

/// Triple loop matrix product.
pub fn naive_matmul(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for t in 0..k {
                out[i * n + j] += a.data()[i * k + t] * b.data()[t * n + j];
            }
        }
    }
    Tensor::new(&[m, n], out).unwrap()
}

/// Direct convolution of `[C, H, W]` by `[O, C, k, k]`, zero padding.
pub fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&Tensor<f64>>, stride: usize, pad: usize) -> Tensor<f64> {
    let (c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (o, k) = (w.shape()[0], w.shape()[2]);
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; o * oh * ow];
    for f in 0..o {
        for y in 0..oh {
            for xx in 0..ow {
                let mut s = b.map_or(0.0, |b| b.data()[f]);
                for ch in 0..c {
                    for dy in 0..k {
                        for dx in 0..k {
                            let iy = (y * stride + dy) as isize - pad as isize;
                            let ix = (xx * stride + dx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                continue;
                            }
                            s += x.data()[(ch * h + iy as usize) * wd + ix as usize]
                                * w.data()[((f * c + ch) * k + dy) * k + dx];
                        }
                    }
                }
                out[(f * oh + y) * ow + xx] = s;
            }
        }
    }
    Tensor::new(&[o, oh, ow], out).unwrap()
}

/// Central differences of a scalar function of one tensor, at every entry.
pub fn finite_difference(x: &Tensor<f64>, h: f64, mut f: impl FnMut(&Tensor<f64>) -> f64) -> Vec<f64> {
    let mut probe = x.clone();
    (0..x.len())
        .map(|i| {
            let orig = x.data()[i];
            probe = with_entry(&probe, i, orig + h);
            let up = f(&probe);
            probe = with_entry(&probe, i, orig - h);
            let down = f(&probe);
            probe = with_entry(&probe, i, orig);
            (up - down) / (2.0 * h)
        })
        .collect()
}

pub fn with_entry(t: &Tensor<f64>, i: usize, v: f64) -> Tensor<f64> {
    let mut d = t.data().to_vec();
    d[i] = v;
    Tensor::new(t.shape(), d).unwrap()
}

/// `||a - b|| / max(||a||, ||b||, floor)`.
pub fn rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(floor)
}

/// Evaluates `build` on a fresh graph and reads the scalar it returns.
pub fn scalar_of(build: impl FnOnce(&Graph<f64>) -> Var) -> f64 {
    let g = Graph::new();
    let v = build(&g);
    g.value(v).item()
}

/// Objective value of `net` on a batch, built the same way training does.
pub fn objective_value(
    net: &Network<f64>,
    x: &Tensor<f64>,
    labels: &[usize],
    epsilon: f64,
    kappa: f64,
    cfg: &ibp::loss::LossConfig,
) -> (f64, Vec<Option<Tensor<f64>>>) {
    use ibp::interval::{input_interval, IntervalVars};
    let g = Graph::new();
    let params = net.bind(&g, true);
    let logits = net.forward_graph(&g, &params, g.constant(x.clone())).unwrap();
    let z0 = input_interval(x, epsilon, None).unwrap();
    let trace = net
        .forward_interval_graph(&g, &params, IntervalVars::constant(&g, &z0))
        .unwrap();
    let obj = ibp::loss::objective_graph(&g, logits, trace.logits, &trace.layers, labels, kappa, cfg).unwrap();
    let value = g.value(obj.total).item();
    let mut grads = g.backward(obj.total).unwrap();
    (value, params.iter().map(|&p| grads.take(p)).collect())
}

/// Largest per-tensor relative error between analytic and central-difference
/// gradients of the objective, for one random network and batch.
pub fn objective_gradient_error(seed: u64, cfg: &ibp::loss::LossConfig) -> f64 {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let shape = [rng.gen_range(1..=2), rng.gen_range(3..=6), rng.gen_range(3..=6)];
    let classes = rng.gen_range(2..=4);
    let spec = random_spec(&mut rng, shape, classes);
    let net: Network<f64> = random_network(&mut rng, spec.clone());
    let batch = 3;
    let mut xs = vec![batch];
    xs.extend_from_slice(&shape);
    let x = random_tensor::<f64>(&mut rng, &xs, 0.0, 1.0);
    let labels: Vec<usize> = (0..batch).map(|_| rng.gen_range(0..classes)).collect();
    let epsilon = rng.gen_range(0.05..0.3);
    let kappa = 0.5;
    let (_, grads) = objective_value(&net, &x, &labels, epsilon, kappa, cfg);
    let mut worst: f64 = 0.0;
    for (i, p) in net.parameters().iter().enumerate() {
        let numeric = finite_difference(p, 1e-5, |probe| {
            let mut params = net.parameters().to_vec();
            params[i] = probe.clone();
            let n = Network::from_parameters(spec.clone(), params).unwrap();
            objective_value(&n, &x, &labels, epsilon, kappa, cfg).0
        });
        let analytic = grads[i].as_ref().map_or(vec![0.0; p.len()], |g| g.data().to_vec());
        worst = worst.max(rel_err(&analytic, &numeric, 1e-8));
    }
    worst
}

/// Every `±1` pattern of length `d`, as rows.
pub fn sign_patterns(d: usize) -> Vec<Vec<f64>> {
    (0..1usize << d)
        .map(|m| (0..d).map(|i| if m >> i & 1 == 1 { 1.0 } else { -1.0 }).collect())
        .collect()
}

/// Checks sampled points of the `epsilon` box around `x: [C, H, W]`:
/// every activation of every point must lie inside the propagated bounds.
/// Returns the largest violation (0 when sound).
pub fn soundness_violation(net: &Network<f64>, x: &Tensor<f64>, epsilon: f64, samples: usize, rng: &mut impl Rng) -> f64 {
    use ibp::interval::input_interval;
    let d = x.len();
    let z0 = input_interval(x, epsilon, None).unwrap();
    let bounds = net.forward_interval(&z0).unwrap();
    let mut points: Vec<Vec<f64>> = Vec::new();
    if d <= 12 {
        for s in sign_patterns(d) {
            points.push(x.data().iter().zip(&s).map(|(v, s)| v + s * epsilon).collect());
        }
    }
    let target = samples.max(points.len());
    while points.len() < target {
        points.push(x.data().iter().map(|v| v + rng.gen_range(-1.0..=1.0) * epsilon).collect());
    }
    let mut shape = vec![points.len()];
    shape.extend_from_slice(x.shape());
    let batch = Tensor::new(&shape, points.concat()).unwrap();
    let acts = net.forward_trace(&batch).unwrap();
    let mut worst: f64 = 0.0;
    for (layer, act) in bounds.layers.iter().zip(&acts) {
        let per = layer.bounds.lower().len();
        for row in act.data().chunks(per) {
            for ((v, lo), hi) in row.iter().zip(layer.bounds.lower().data()).zip(layer.bounds.upper().data()) {
                worst = worst.max(lo - v).max(v - hi);
            }
        }
    }
    worst
}

/// Exact image of a box under `W z + b` by enumerating its corners:
/// per-output minimum and maximum.
pub fn corner_hull(lower: &[f64], upper: &[f64], w: &Tensor<f64>, b: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (m, n) = (w.shape()[0], w.shape()[1]);
    let mut lo = vec![f64::INFINITY; m];
    let mut hi = vec![f64::NEG_INFINITY; m];
    for s in sign_patterns(n) {
        let z: Vec<f64> = (0..n).map(|i| if s[i] > 0.0 { upper[i] } else { lower[i] }).collect();
        for r in 0..m {
            let v: f64 = b[r] + (0..n).map(|i| w.data()[r * n + i] * z[i]).sum::<f64>();
            lo[r] = lo[r].min(v);
            hi[r] = hi[r].max(v);
        }
    }
    (lo, hi)
}

/// Which loader a canned corrupted file targets.
#[derive(Clone, Copy, Debug)]
pub enum Loader {
    MnistDir,
    Cifar,
}

pub struct Corrupted {
    pub name: &'static str,
    pub loader: Loader,
    pub expect_offset: u64,
    pub expect_message: &'static str,
}

fn idx_images(count: u32, rows: u32, cols: u32, payload: usize) -> Vec<u8> {
    let mut b = Vec::new();
    for v in [0x0803u32, count, rows, cols] {
        b.extend_from_slice(&v.to_be_bytes());
    }
    b.extend((0..payload).map(|i| (i % 251) as u8));
    b
}

fn idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut b = Vec::new();
    b.extend_from_slice(&0x0801u32.to_be_bytes());
    b.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    b.extend_from_slice(labels);
    b
}

/// Writes a well-formed MNIST directory holding `n` 4x4 images per split.
pub fn write_mnist_dir(dir: &std::path::Path, n: u32) {
    let labels: Vec<u8> = (0..n).map(|i| (i % 10) as u8).collect();
    for prefix in ["train", "t10k"] {
        std::fs::write(dir.join(format!("{prefix}-images-idx3-ubyte")), idx_images(n, 4, 4, (n * 16) as usize)).unwrap();
        std::fs::write(dir.join(format!("{prefix}-labels-idx1-ubyte")), idx_labels(&labels)).unwrap();
    }
}

/// Writes the five canned corrupted inputs under `root`, one directory
/// each, and returns what the loader must report for them.
pub fn write_corrupted(root: &std::path::Path) -> Vec<(std::path::PathBuf, Corrupted)> {
    let mut out = Vec::new();
    let mut case = |name: &'static str, loader, expect_offset, expect_message, edit: &dyn Fn(&std::path::Path)| {
        let dir = root.join(name);
        std::fs::create_dir_all(&dir).unwrap();
        edit(&dir);
        out.push((dir, Corrupted { name, loader, expect_offset, expect_message }));
    };
    case("idx-bad-magic", Loader::MnistDir, 0, "bad magic 0x00000802", &|d| {
        write_mnist_dir(d, 5);
        let mut b = idx_images(5, 4, 4, 80);
        b[3] = 0x02;
        std::fs::write(d.join("train-images-idx3-ubyte"), b).unwrap();
    });
    case("idx-truncated", Loader::MnistDir, 16, "truncated image payload", &|d| {
        write_mnist_dir(d, 5);
        std::fs::write(d.join("train-images-idx3-ubyte"), idx_images(5, 4, 4, 70)).unwrap();
    });
    case("idx-count-mismatch", Loader::MnistDir, 4, "does not match image count", &|d| {
        write_mnist_dir(d, 5);
        std::fs::write(d.join("train-labels-idx1-ubyte"), idx_labels(&[1, 2, 3, 4])).unwrap();
    });
    case("cifar-bad-size", Loader::Cifar, 3073, "not a positive multiple", &|d| {
        std::fs::write(d.join("data_batch_1.bin"), vec![0u8; 3073 + 100]).unwrap();
    });
    case("cifar-bad-label", Loader::Cifar, 3073, "has label 12", &|d| {
        let mut b = vec![0u8; 2 * 3073];
        b[3073] = 12;
        std::fs::write(d.join("data_batch_1.bin"), b).unwrap();
    });
    out
}

/// Runs the loader a corrupted case targets and returns its error.
pub fn load_corrupted(dir: &std::path::Path, c: &Corrupted) -> ibp::Error {
    match c.loader {
        Loader::MnistDir => ibp::data::load_mnist(dir).err(),
        Loader::Cifar => ibp::data::load_cifar10(dir).err(),
    }
    .unwrap_or_else(|| panic!("{} was accepted", c.name))
}

/// Whether `err` is a format error at the expected offset and message.
pub fn diagnostic_matches(err: &ibp::Error, c: &Corrupted) -> bool {
    matches!(err, ibp::Error::Format { offset, message, .. }
        if *offset == c.expect_offset && message.contains(c.expect_message))
}
