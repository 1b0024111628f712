mod common;

use std::collections::HashMap;
use std::path::Path;

use common::{diagnostic_matches, load_corrupted, write_corrupted, write_mnist_dir};
use ibp::data::{augment, load_cifar10, load_mnist, normalization_stats, synthetic, transform_batch, Dataset, Split};
use ibp::Tensor;
use proptest::prelude::*;

const DESK: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../../data/mnist-desk");

fn gunzip_len(path: &Path) -> usize {
    use std::io::Read;
    let mut v = Vec::new();
    flate2::read::GzDecoder::new(std::fs::File::open(path).unwrap()).read_to_end(&mut v).unwrap();
    v.len()
}

#[test]
fn desk_mnist_sizes_match_file_sizes() {
    let dir = Path::new(DESK);
    let (train, test) = load_mnist(dir).unwrap();
    // header is 16 bytes for images and 8 for labels
    let n_train = gunzip_len(&dir.join("train-labels-idx1-ubyte.gz")) - 8;
    let n_test = gunzip_len(&dir.join("t10k-labels-idx1-ubyte.gz")) - 8;
    assert_eq!(train.len(), n_train);
    assert_eq!(test.len(), n_test);
    assert_eq!(gunzip_len(&dir.join("train-images-idx3-ubyte.gz")) - 16, n_train * 784);
    assert_eq!(train.image_shape(), [1, 28, 28]);
    assert!(train.normalization.is_none());
    assert!(train.images.data().iter().all(|v| (0.0..=1.0).contains(v)));
    let mut seen = [false; 10];
    train.labels.iter().for_each(|&y| seen[y] = true);
    assert!(seen.iter().all(|&s| s));
}

#[test]
fn corrupted_files_are_rejected_with_offsets() {
    let tmp = tempfile::tempdir().unwrap();
    let cases = write_corrupted(tmp.path());
    assert_eq!(cases.len(), 5);
    for (dir, c) in &cases {
        let err = load_corrupted(dir, c);
        assert!(diagnostic_matches(&err, c), "{}: {err}", c.name);
        assert!(err.to_string().contains("byte offset"), "{err}");
    }
}

#[test]
fn small_mnist_directory_round_trips_pixels() {
    let tmp = tempfile::tempdir().unwrap();
    write_mnist_dir(tmp.path(), 5);
    let (train, _) = load_mnist(tmp.path()).unwrap();
    assert_eq!(train.labels, vec![0, 1, 2, 3, 4]);
    assert_eq!(train.images.data()[17], 17.0 / 255.0);
}

#[test]
fn cifar_directory_loads_with_train_statistics() {
    let tmp = tempfile::tempdir().unwrap();
    let record = |label: u8, v: u8| {
        let mut r = vec![v; 3073];
        r[0] = label;
        r
    };
    for i in 1..=5u8 {
        std::fs::write(tmp.path().join(format!("data_batch_{i}.bin")), [record(i, 0), record(9, 255)].concat()).unwrap();
    }
    std::fs::write(tmp.path().join("test_batch.bin"), record(3, 51)).unwrap();
    let (train, test) = load_cifar10(tmp.path()).unwrap();
    assert_eq!(train.len(), 10);
    assert_eq!(test.labels, vec![3]);
    let norm = train.normalization.clone().unwrap();
    for c in 0..3 {
        assert!((norm.mean[c] - 0.5).abs() < 1e-12 && (norm.std[c] - 0.5).abs() < 1e-12);
    }
    assert_eq!(test.normalization, train.normalization);
}

#[test]
fn normalization_matches_two_pass_statistics() {
    let ds = synthetic(30, 4, Split::Train);
    let vals: Vec<f64> = ds.images.data().iter().map(|&v| v as f64).collect();
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
    let norm = normalization_stats(&ds).unwrap();
    assert!((norm.mean[0] - mean).abs() < 1e-9);
    assert!((norm.std[0] - var.sqrt()).abs() < 1e-9);
}

#[test]
fn degenerate_statistics() {
    let constant = Dataset::new("c", Split::Train, Tensor::full(&[2, 1, 2, 2], 0.5f32).unwrap(), vec![0, 1], 2).unwrap();
    let n = normalization_stats(&constant).unwrap();
    assert_eq!((n.mean[0], n.std[0]), (0.5, 1e-6));
    let two = Dataset::new("t", Split::Train, Tensor::new(&[2, 1, 1, 1], vec![0.0f32, 1.0]).unwrap(), vec![0, 1], 2).unwrap();
    let n = normalization_stats(&two).unwrap();
    assert_eq!((n.mean[0], n.std[0]), (0.5, 0.5));
}

#[test]
fn cache_round_trip_is_exact() {
    let tmp = tempfile::tempdir().unwrap();
    let mut ds = synthetic(12, 3, Split::Test);
    ds.normalization = Some(normalization_stats(&ds).unwrap());
    let path = tmp.path().join("synthetic.ibpd");
    ds.save_cache(&path).unwrap();
    let back = Dataset::load_cache(&path).unwrap();
    assert_eq!(back, ds);
    assert_eq!(back.content_hash(), ds.content_hash());
    let mut bytes = std::fs::read(&path).unwrap();
    bytes.push(0);
    assert!(Dataset::from_cache_bytes(&bytes, &path).is_err());
}

#[test]
fn synthetic_is_seeded() {
    assert_eq!(synthetic(20, 1, Split::Train), synthetic(20, 1, Split::Train));
    assert_ne!(synthetic(20, 1, Split::Train).images, synthetic(20, 2, Split::Train).images);
    assert_ne!(synthetic(20, 1, Split::Train).images, synthetic(20, 1, Split::Test).images);
}

fn multiset(v: &[f32]) -> HashMap<u32, usize> {
    let mut m = HashMap::new();
    v.iter().for_each(|x| *m.entry(x.to_bits()).or_default() += 1);
    m
}

proptest! {
    #[test]
    fn flip_without_shift_permutes_pixels(seed in any::<u64>()) {
        let ds = synthetic(3, seed, Split::Train);
        let out = transform_batch(&ds.images, &[(true, 0, 0); 3]);
        prop_assert_eq!(multiset(out.data()), multiset(ds.images.data()));
        prop_assert_eq!(transform_batch(&out, &[(true, 0, 0); 3]), ds.images.clone());
    }

    #[test]
    fn augmented_pixels_come_from_source_or_fill(seed in any::<u64>()) {
        let ds = synthetic(4, seed, Split::Train);
        let out = augment(&ds.images, seed);
        prop_assert_eq!(out.shape(), ds.images.shape());
        let src = multiset(ds.images.data());
        let got = multiset(out.data());
        for (bits, n) in got {
            if f32::from_bits(bits) != 0.0 {
                prop_assert!(src.get(&bits).copied().unwrap_or(0) >= n);
            }
        }
        prop_assert_eq!(augment(&ds.images, seed), out);
    }
}
