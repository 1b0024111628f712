//! Versioned binary checkpoints.
//!
//! Layout (integers little-endian `u32` unless noted):
//!
//! ```text
//! "IBPC"  version
//! manifest_len  manifest (UTF-8, one key=value per line)
//! param_count   { ndim dims.. f32 data.. } per parameter, layer order
//! slot_count    { ndim dims.. f32 data.. } per optimizer state tensor
//! ```
//!
//! The manifest holds the network description (`input_shape`,
//! `num_classes`, `normalization`, one `layer=` line per layer), training
//! metadata (`epoch`, `epsilon`, `kappa`, `seed`, `optimizer`,
//! `optimizer_step`) and free-form `extra.*` keys. Floats are written in
//! shortest round-trip form, so every value survives a save/load exactly.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::io::ByteReader;
use crate::network::{ChannelNorm, LayerSpec, Network, NetworkSpec};
use crate::optim::{OptimizerKind, OptimizerState};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"IBPC";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CheckpointMeta {
    /// Completed epochs.
    pub epoch: usize,
    pub epsilon: f64,
    pub kappa: f64,
    pub seed: u64,
    pub extra: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub spec: NetworkSpec,
    pub params: Vec<Tensor<f32>>,
    pub meta: CheckpointMeta,
    pub optimizer: Option<OptimizerState>,
}

fn format_norm(n: &Option<ChannelNorm>) -> String {
    match n {
        None => "none".into(),
        Some(n) => {
            let join = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
            format!("mean:{};std:{}", join(&n.mean), join(&n.std))
        }
    }
}

fn parse_norm(s: &str) -> std::result::Result<Option<ChannelNorm>, String> {
    if s == "none" {
        return Ok(None);
    }
    let list = |part: Option<&str>, key: &str| -> std::result::Result<Vec<f64>, String> {
        let body = part
            .and_then(|p| p.strip_prefix(key))
            .ok_or_else(|| format!("normalization must be `none` or `mean:..;std:..`, got `{s}`"))?;
        body.split(',')
            .map(|x| x.parse::<f64>().map_err(|_| format!("bad number `{x}` in normalization")))
            .collect()
    };
    let mut parts = s.split(';');
    let mean = list(parts.next(), "mean:")?;
    let std = list(parts.next(), "std:")?;
    Ok(Some(ChannelNorm { mean, std }))
}

fn write_tensor(out: &mut Vec<u8>, t: &Tensor<f32>) {
    out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn read_tensor(r: &mut ByteReader<'_>, what: &str) -> Result<Tensor<f32>> {
    let at = r.pos;
    let ndim = r.u32_le()? as usize;
    if ndim == 0 || ndim > 8 {
        return Err(r.error_at(at, format!("{what}: implausible rank {ndim}")));
    }
    let shape: Vec<usize> = (0..ndim).map(|_| r.u32_le().map(|d| d as usize)).collect::<Result<_>>()?;
    let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
    let n = match n {
        Some(n) if n > 0 && n <= r.remaining() / 4 => n,
        _ => {
            return Err(r.error_at(
                at,
                format!("{what}: shape {shape:?} needs more data than the {} bytes left", r.remaining()),
            ))
        }
    };
    let data = r
        .take(n * 4)?
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(Tensor::from_parts(shape, data))
}

impl Checkpoint {
    pub fn from_network(net: &Network<f32>, meta: CheckpointMeta, optimizer: Option<OptimizerState>) -> Self {
        Self {
            spec: net.spec().clone(),
            params: net.parameters().to_vec(),
            meta,
            optimizer,
        }
    }

    pub fn network(&self) -> Result<Network<f32>> {
        Network::from_parameters(self.spec.clone(), self.params.clone())
    }

    fn manifest(&self) -> String {
        let s = &self.spec;
        let mut lines = vec![
            format!("input_shape={} {} {}", s.input_shape[0], s.input_shape[1], s.input_shape[2]),
            format!("num_classes={}", s.num_classes),
            format!("normalization={}", format_norm(&s.normalization)),
        ];
        lines.extend(s.layers.iter().map(|l| format!("layer={l}")));
        let m = &self.meta;
        lines.push(format!("epoch={}", m.epoch));
        lines.push(format!("epsilon={}", m.epsilon));
        lines.push(format!("kappa={}", m.kappa));
        lines.push(format!("seed={}", m.seed));
        if let Some(o) = &self.optimizer {
            lines.push(format!("optimizer={}", o.kind));
            lines.push(format!("optimizer_step={}", o.step));
        }
        for (k, v) in &m.extra {
            lines.push(format!("extra.{k}={v}"));
        }
        let mut text = lines.join("\n");
        text.push('\n');
        text
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let manifest = self.manifest();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
        out.extend_from_slice(manifest.as_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for p in &self.params {
            write_tensor(&mut out, p);
        }
        let slots = self.optimizer.as_ref().map_or(&[][..], |o| &o.slots[..]);
        out.extend_from_slice(&(slots.len() as u32).to_le_bytes());
        for t in slots {
            write_tensor(&mut out, t);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = ByteReader::new(bytes, path);
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(r.error_at(0, format!("bad magic {magic:02x?}, expected \"IBPC\"")));
        }
        let version = r.u32_le()?;
        if version != VERSION {
            return Err(r.error_at(4, format!("unsupported checkpoint version {version}, expected {VERSION}")));
        }
        let len = r.u32_le()? as usize;
        let base = r.pos;
        let text = std::str::from_utf8(r.take(len)?).map_err(|e| r.error_at(base + e.valid_up_to(), "manifest is not UTF-8"))?;

        let mut input_shape = None;
        let mut num_classes = None;
        let mut normalization = None;
        let mut layers = Vec::new();
        let mut meta = CheckpointMeta::default();
        let mut opt_kind = None;
        let mut opt_step = 0u64;
        let mut offset = base;
        for line in text.lines() {
            let at = offset;
            offset += line.len() + 1;
            let bad = |msg: String| Error::format(path, at as u64, format!("manifest: {msg}"));
            let (k, v) = line.split_once('=').ok_or_else(|| bad(format!("expected key=value, got `{line}`")))?;
            let num = |what: &str| bad(format!("bad value `{v}` for {what}"));
            match k {
                "input_shape" => {
                    let d: Vec<usize> = v.split(' ').map(|x| x.parse()).collect::<std::result::Result<_, _>>().map_err(|_| num(k))?;
                    input_shape = Some(<[usize; 3]>::try_from(d).map_err(|_| num(k))?);
                }
                "num_classes" => num_classes = Some(v.parse().map_err(|_| num(k))?),
                "normalization" => normalization = Some(parse_norm(v).map_err(bad)?),
                "layer" => layers.push(v.parse::<LayerSpec>().map_err(|e| bad(e.to_string()))?),
                "epoch" => meta.epoch = v.parse().map_err(|_| num(k))?,
                "epsilon" => meta.epsilon = v.parse().map_err(|_| num(k))?,
                "kappa" => meta.kappa = v.parse().map_err(|_| num(k))?,
                "seed" => meta.seed = v.parse().map_err(|_| num(k))?,
                "optimizer" => opt_kind = Some(v.parse::<OptimizerKind>().map_err(|e| bad(e.to_string()))?),
                "optimizer_step" => opt_step = v.parse().map_err(|_| num(k))?,
                _ => match k.strip_prefix("extra.") {
                    Some(key) => {
                        meta.extra.insert(key.to_string(), v.to_string());
                    }
                    None => return Err(bad(format!("unknown key `{k}`"))),
                },
            }
        }
        let missing = |what: &str| Error::format(path, base as u64, format!("manifest: missing `{what}`"));
        let spec = NetworkSpec::new(input_shape.ok_or_else(|| missing("input_shape"))?, layers, num_classes.ok_or_else(|| missing("num_classes"))?)
            .with_normalization(normalization.ok_or_else(|| missing("normalization"))?);
        let shapes = spec
            .param_shapes()
            .map_err(|e| Error::format(path, base as u64, format!("manifest describes an invalid network: {e}")))?;

        let at = r.pos;
        let count = r.u32_le()? as usize;
        if count != shapes.len() {
            return Err(r.error_at(at, format!("{count} parameter tensors, network needs {}", shapes.len())));
        }
        let mut params = Vec::with_capacity(count);
        for (i, want) in shapes.iter().enumerate() {
            let at = r.pos;
            let t = read_tensor(&mut r, &format!("parameter {i}"))?;
            if t.shape() != want.as_slice() {
                return Err(r.error_at(at, format!("parameter {i} has shape {:?}, network needs {want:?}", t.shape())));
            }
            params.push(t);
        }
        let at = r.pos;
        let nslots = r.u32_le()? as usize;
        let mut slots = Vec::with_capacity(nslots);
        for i in 0..nslots {
            slots.push(read_tensor(&mut r, &format!("optimizer tensor {i}"))?);
        }
        let optimizer = match opt_kind {
            Some(kind) => {
                if nslots != kind.slots_per_param() * count {
                    return Err(r.error_at(at, format!("{nslots} optimizer tensors, {kind} needs {}", kind.slots_per_param() * count)));
                }
                Some(OptimizerState { kind, step: opt_step, slots })
            }
            None if nslots == 0 => None,
            None => return Err(r.error_at(at, "optimizer tensors present without an `optimizer` entry")),
        };
        if r.remaining() != 0 {
            return Err(r.error_here(format!("{} trailing bytes", r.remaining())));
        }
        Ok(Self {
            spec,
            params,
            meta,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_bytes(&bytes, path)
    }
}
