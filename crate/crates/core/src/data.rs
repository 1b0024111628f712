//! Image datasets: MNIST (IDX), CIFAR-10 (binary batches), a procedurally
//! generated 8x8 two-class set, and a little-endian cache format.
//!
//! Pixels are stored as `f32` in `[0, 1]`, shape `[N, C, H, W]`. Nothing is
//! downloaded; loaders read from a directory supplied by the caller.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::io::ByteReader;
use crate::network::ChannelNorm;
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const CIFAR_RECORD_BYTES: usize = 3073;
const CACHE_MAGIC: &[u8; 4] = b"IBPD";
const CACHE_VERSION: u32 = 1;
const STD_FLOOR: f64 = 1e-6;
const MAX_SHIFT: i64 = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn code(self) -> u8 {
        match self {
            Split::Train => 0,
            Split::Test => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub split: Split,
    /// `[N, C, H, W]`, values in `[0, 1]`.
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    /// Per-channel statistics of the training split, when the dataset is
    /// meant to be normalized.
    pub normalization: Option<ChannelNorm>,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        split: Split,
        images: Tensor<f32>,
        labels: Vec<usize>,
        num_classes: usize,
    ) -> Result<Self> {
        let ds = Self {
            name: name.into(),
            split,
            images,
            labels,
            num_classes,
            normalization: None,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.images.ndim() != 4 || self.images.shape()[0] != self.labels.len() {
            return Err(Error::invalid(format!(
                "dataset images {:?} do not match {} labels",
                self.images.shape(),
                self.labels.len()
            )));
        }
        if let Some(&y) = self.labels.iter().find(|&&y| y >= self.num_classes) {
            return Err(Error::invalid(format!("label {y} out of range for {} classes", self.num_classes)));
        }
        if let Some(v) = self.images.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    fn image_len(&self) -> usize {
        self.image_shape().iter().product()
    }

    pub fn image(&self, i: usize) -> Tensor<f32> {
        let n = self.image_len();
        Tensor::from_parts(self.image_shape().to_vec(), self.images.data()[i * n..(i + 1) * n].to_vec())
    }

    /// Stacks the selected examples into `[B, C, H, W]`.
    pub fn batch(&self, indices: &[usize]) -> (Tensor<f32>, Vec<usize>) {
        let n = self.image_len();
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * n..(i + 1) * n]);
        }
        let [c, h, w] = self.image_shape();
        (
            Tensor::from_parts(vec![indices.len(), c, h, w], data),
            indices.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    /// The first `limit` examples.
    pub fn take(&self, limit: usize) -> Self {
        let n = limit.min(self.len()).max(1);
        let idx: Vec<usize> = (0..n).collect();
        let (images, labels) = self.batch(&idx);
        Self {
            images,
            labels,
            ..self.clone()
        }
    }

    /// SHA-256 over shape, labels and pixel bytes.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for d in self.images.shape() {
            h.update((*d as u64).to_le_bytes());
        }
        for &y in &self.labels {
            h.update((y as u32).to_le_bytes());
        }
        for v in self.images.data() {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    /// Serializes into the versioned cache format.
    pub fn to_cache_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + self.images.len() * 4 + self.labels.len() * 4);
        out.extend_from_slice(CACHE_MAGIC);
        out.extend_from_slice(&CACHE_VERSION.to_le_bytes());
        out.push(self.split.code());
        let name = self.name.as_bytes();
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name);
        out.extend_from_slice(&(self.num_classes as u32).to_le_bytes());
        for d in self.images.shape() {
            out.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        match &self.normalization {
            Some(n) => {
                out.push(1);
                for v in n.mean.iter().chain(&n.std) {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
            None => out.push(0),
        }
        for &y in &self.labels {
            out.extend_from_slice(&(y as u32).to_le_bytes());
        }
        for v in self.images.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_cache_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = ByteReader::new(bytes, path);
        let magic = r.take(4)?;
        if magic != CACHE_MAGIC {
            return Err(r.error_at(0, format!("bad magic {magic:02x?}, expected \"IBPD\"")));
        }
        let version = r.u32_le()?;
        if version != CACHE_VERSION {
            return Err(r.error_at(4, format!("unsupported cache version {version}")));
        }
        let split = match r.u8()? {
            0 => Split::Train,
            1 => Split::Test,
            other => return Err(r.error_here(format!("bad split code {other}"))),
        };
        let name_len = r.u32_le()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| r.error_here("dataset name is not UTF-8"))?;
        let num_classes = r.u32_le()? as usize;
        let shape: Vec<usize> = (0..4).map(|_| r.u32_le().map(|v| v as usize)).collect::<Result<_>>()?;
        let normalization = match r.u8()? {
            0 => None,
            1 => {
                let c = shape[1];
                let vals: Vec<f64> = (0..2 * c).map(|_| r.f64_le()).collect::<Result<_>>()?;
                Some(ChannelNorm {
                    mean: vals[..c].to_vec(),
                    std: vals[c..].to_vec(),
                })
            }
            other => return Err(r.error_here(format!("bad normalization flag {other}"))),
        };
        let count = shape[0];
        let labels: Vec<usize> = (0..count).map(|_| r.u32_le().map(|v| v as usize)).collect::<Result<_>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n * 4)?;
        let pixels = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if r.remaining() != 0 {
            return Err(r.error_here(format!("{} trailing bytes", r.remaining())));
        }
        let mut ds = Dataset::new(name, split, Tensor::new(&shape, pixels)?, labels, num_classes)?;
        ds.normalization = normalization;
        Ok(ds)
    }

    pub fn save_cache(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_cache_bytes()).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load_cache(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_cache_bytes(&bytes, path)
    }
}

/// Reads `path`, or `path.gz` (decompressed) when only that exists.
fn read_maybe_gz(path: &Path) -> Result<(Vec<u8>, PathBuf)> {
    if path.exists() {
        let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        return Ok((bytes, path.to_path_buf()));
    }
    let mut gz = path.as_os_str().to_owned();
    gz.push(".gz");
    let gz = PathBuf::from(gz);
    let file = fs::File::open(&gz).map_err(|e| {
        Error::io(format!("opening {} (or {})", path.display(), gz.display()), e)
    })?;
    let mut bytes = Vec::new();
    GzDecoder::new(file)
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(format!("decompressing {}", gz.display()), e))?;
    Ok((bytes, gz))
}

/// Parses an IDX3 image file into `(count, rows, cols, pixels in [0,1])`.
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<(usize, usize, usize, Vec<f32>)> {
    let mut r = ByteReader::new(bytes, path);
    let magic = r.u32_be()?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(r.error_at(0, format!("bad magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}")));
    }
    let count = r.u32_be()? as usize;
    let rows = r.u32_be()? as usize;
    let cols = r.u32_be()? as usize;
    let need = count * rows * cols;
    if r.remaining() != need {
        return Err(r.error_here(format!(
            "{} image payload: header promises {count} x {rows} x {cols} = {need} bytes, found {}",
            if r.remaining() < need { "truncated" } else { "oversized" },
            r.remaining()
        )));
    }
    let pixels = r.take(need)?.iter().map(|&b| b as f32 / 255.0).collect();
    Ok((count, rows, cols, pixels))
}

pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<usize>> {
    let mut r = ByteReader::new(bytes, path);
    let magic = r.u32_be()?;
    if magic != IDX_LABELS_MAGIC {
        return Err(r.error_at(0, format!("bad magic 0x{magic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}")));
    }
    let count = r.u32_be()? as usize;
    if r.remaining() != count {
        return Err(r.error_here(format!(
            "{} label payload: header promises {count} bytes, found {}",
            if r.remaining() < count { "truncated" } else { "oversized" },
            r.remaining()
        )));
    }
    let start = r.pos;
    let labels: Vec<usize> = r.take(count)?.iter().map(|&b| b as usize).collect();
    if let Some(i) = labels.iter().position(|&y| y >= 10) {
        return Err(r.error_at(start + i, format!("label {} out of range 0..10", labels[i])));
    }
    Ok(labels)
}

fn load_mnist_split(dir: &Path, images: &str, labels: &str, split: Split) -> Result<Dataset> {
    let (ib, ipath) = read_maybe_gz(&dir.join(images))?;
    let (lb, lpath) = read_maybe_gz(&dir.join(labels))?;
    let (count, rows, cols, pixels) = parse_idx_images(&ib, &ipath)?;
    let labels = parse_idx_labels(&lb, &lpath)?;
    if labels.len() != count {
        return Err(Error::format(
            lpath,
            4,
            format!("label count {} does not match image count {count} in {}", labels.len(), ipath.display()),
        ));
    }
    let images = Tensor::new(&[count.max(1), 1, rows, cols], pixels)
        .map_err(|_| Error::format(&ipath, 4, "image file holds no images"))?;
    Dataset::new("mnist", split, images, labels, 10)
}

/// Loads `train-images-idx3-ubyte` / `train-labels-idx1-ubyte` and the
/// `t10k-*` pair from `dir` (each optionally gzipped).
pub fn load_mnist(dir: &Path) -> Result<(Dataset, Dataset)> {
    Ok((
        load_mnist_split(dir, "train-images-idx3-ubyte", "train-labels-idx1-ubyte", Split::Train)?,
        load_mnist_split(dir, "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte", Split::Test)?,
    ))
}

/// Parses CIFAR-10 records: one label byte followed by 3072 channel-major
/// pixel bytes.
pub fn parse_cifar_batch(bytes: &[u8], path: &Path) -> Result<(Vec<f32>, Vec<usize>)> {
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD_BYTES != 0 {
        return Err(Error::format(
            path,
            (bytes.len() - bytes.len() % CIFAR_RECORD_BYTES) as u64,
            format!("size {} is not a positive multiple of the {CIFAR_RECORD_BYTES}-byte record", bytes.len()),
        ));
    }
    let n = bytes.len() / CIFAR_RECORD_BYTES;
    let mut pixels = Vec::with_capacity(n * 3072);
    let mut labels = Vec::with_capacity(n);
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD_BYTES).enumerate() {
        if rec[0] >= 10 {
            return Err(Error::format(
                path,
                (i * CIFAR_RECORD_BYTES) as u64,
                format!("record {i} has label {} (expected 0..10)", rec[0]),
            ));
        }
        labels.push(rec[0] as usize);
        pixels.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
    }
    Ok((pixels, labels))
}

fn load_cifar_files(dir: &Path, files: &[String], split: Split) -> Result<Dataset> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for f in files {
        let path = dir.join(f);
        let bytes = fs::read(&path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let (p, l) = parse_cifar_batch(&bytes, &path)?;
        pixels.extend(p);
        labels.extend(l);
    }
    let images = Tensor::new(&[labels.len(), 3, 32, 32], pixels)?;
    Dataset::new("cifar10", split, images, labels, 10)
}

/// Loads `data_batch_1.bin` .. `data_batch_5.bin` and `test_batch.bin`.
/// Both splits carry the training set's channel statistics.
pub fn load_cifar10(dir: &Path) -> Result<(Dataset, Dataset)> {
    let train_files: Vec<String> = (1..=5).map(|i| format!("data_batch_{i}.bin")).collect();
    let mut train = load_cifar_files(dir, &train_files, Split::Train)?;
    let mut test = load_cifar_files(dir, &["test_batch.bin".to_string()], Split::Test)?;
    let norm = normalization_stats(&train)?;
    train.normalization = Some(norm.clone());
    test.normalization = Some(norm);
    Ok((train, test))
}

/// Per-channel mean and population standard deviation (floored at 1e-6).
pub fn normalization_stats(train: &Dataset) -> Result<ChannelNorm> {
    if train.is_empty() {
        return Err(Error::invalid("normalization statistics need a non-empty dataset"));
    }
    let [c, h, w] = train.image_shape();
    let plane = h * w;
    let mut sum = vec![0.0f64; c];
    let mut sq = vec![0.0f64; c];
    for (i, &v) in train.images.data().iter().enumerate() {
        let ch = (i / plane) % c;
        sum[ch] += v as f64;
        sq[ch] += (v as f64) * (v as f64);
    }
    let n = (train.len() * plane) as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let std = sq
        .iter()
        .zip(&mean)
        .map(|(s, m)| (s / n - m * m).max(0.0).sqrt().max(STD_FLOOR))
        .collect();
    Ok(ChannelNorm { mean, std })
}

/// Random horizontal flip (p = 0.5) and an integer translation in
/// `[-4, 4]^2` with zero fill, drawn independently per image.
pub fn augment(images: &Tensor<f32>, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plans: Vec<(bool, i64, i64)> = (0..images.shape()[0])
        .map(|_| {
            (
                rng.gen_bool(0.5),
                rng.gen_range(-MAX_SHIFT..=MAX_SHIFT),
                rng.gen_range(-MAX_SHIFT..=MAX_SHIFT),
            )
        })
        .collect();
    transform_batch(images, &plans)
}

/// Applies an explicit `(flip, dy, dx)` per image. Output pixel `(y, x)`
/// reads input `(y - dy, x' - dx)` where `x'` is the flipped column.
pub fn transform_batch(images: &Tensor<f32>, plans: &[(bool, i64, i64)]) -> Tensor<f32> {
    let s = images.shape();
    let (c, h, w) = (s[1], s[2], s[3]);
    let mut out = vec![0.0f32; images.len()];
    for (b, &(flip, dy, dx)) in plans.iter().enumerate() {
        for ch in 0..c {
            let base = (b * c + ch) * h * w;
            let src = &images.data()[base..base + h * w];
            let dst = &mut out[base..base + h * w];
            for y in 0..h as i64 {
                let sy = y - dy;
                if sy < 0 || sy >= h as i64 {
                    continue;
                }
                for x in 0..w as i64 {
                    let sx = x - dx;
                    if sx < 0 || sx >= w as i64 {
                        continue;
                    }
                    let sx = if flip { w as i64 - 1 - sx } else { sx };
                    dst[(y * w as i64 + x) as usize] = src[(sy * w as i64 + sx) as usize];
                }
            }
        }
    }
    Tensor::from_parts(s.to_vec(), out)
}

/// Procedural two-class 8x8 set: class 0 images carry a bright horizontal
/// bar, class 1 a vertical bar, over dim uniform noise.
pub fn synthetic(count: usize, seed: u64, split: Split) -> Dataset {
    const SIDE: usize = 8;
    let count = count.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((split.code() as u64) << 32));
    let mut pixels = Vec::with_capacity(count * SIDE * SIDE);
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let label = i % 2;
        let mut img = [0.0f32; SIDE * SIDE];
        for p in img.iter_mut() {
            *p = rng.gen_range(0.0..0.2);
        }
        let line = rng.gen_range(1..SIDE - 1);
        let start = rng.gen_range(0..=2);
        for t in start..start + 6 {
            let idx = if label == 0 { line * SIDE + t } else { t * SIDE + line };
            img[idx] = rng.gen_range(0.75..1.0);
        }
        pixels.extend_from_slice(&img);
        labels.push(label);
    }
    let images = Tensor::from_parts(vec![count, 1, SIDE, SIDE], pixels);
    Dataset::new("synthetic", split, images, labels, 2).expect("synthetic data is valid")
}
