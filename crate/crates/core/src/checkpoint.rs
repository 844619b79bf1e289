//! Versioned named-tensor checkpoints for backbones and adapters.
//!
//! Layout: magic `CTCN`, `u32` version, `u32` manifest length, JSON manifest,
//! `u32` record count, then records of
//! `[u32 name length][name][u8 dtype][u8 rank][u64 dims…][f32 LE payload]`.
//! All integers are little-endian.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::{GateMode, TaskAdapter};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::{Backbone, ModelConfig, TaskParams};

pub const MAGIC: [u8; 4] = *b"CTCN";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointKind {
    Base,
    Adapter,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub kind: CheckpointKind,
    pub task_id: usize,
    pub model: ModelConfig,
    pub kernel_size: Option<usize>,
    pub gate_mode: Option<GateMode>,
    /// Global class ids in head order.
    pub classes: Vec<usize>,
    pub frozen: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Checkpoint {
    Base(Backbone<f32>),
    Adapter(TaskAdapter<f32>),
}

/// Serialize a manifest and named tensors.
pub fn encode(manifest: &Manifest, tensors: &[(String, &Tensor<f32>)]) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(manifest).map_err(|e| Error::Config(format!("manifest: {e}")))?;
    let mut out = Vec::new();
    out.extend(MAGIC);
    out.extend(VERSION.to_le_bytes());
    out.extend((json.len() as u32).to_le_bytes());
    out.extend(json);
    out.extend((tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend((name.len() as u32).to_le_bytes());
        out.extend(name.as_bytes());
        out.push(DTYPE_F32);
        let rank = u8::try_from(t.rank()).map_err(|_| Error::Config(format!("{name}: rank {} too large", t.rank())))?;
        out.push(rank);
        for &d in t.shape() {
            out.extend((d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend(v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Truncated(format!(
                "{what} needs {n} bytes at offset {}, {} left",
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

/// Parse bytes produced by [`encode`].
pub fn decode(bytes: &[u8]) -> Result<(Manifest, Vec<(String, Tensor<f32>)>)> {
    let mut c = Cursor { bytes, pos: 0 };
    let magic: [u8; 4] = c.take(4, "magic")?.try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(Error::BadMagic {
            expected: MAGIC,
            found: magic,
        });
    }
    let version = c.u32("version")?;
    if version != VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            supported: VERSION,
        });
    }
    let len = c.u32("manifest length")? as usize;
    let offset = c.pos as u64;
    let manifest: Manifest = serde_json::from_slice(c.take(len, "manifest")?).map_err(|e| Error::Format {
        offset,
        msg: format!("manifest: {e}"),
    })?;
    let count = c.u32("record count")? as usize;
    let mut tensors = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let start = c.pos as u64;
        let name_len = c.u32("name length")? as usize;
        let name = std::str::from_utf8(c.take(name_len, "name")?)
            .map_err(|e| Error::Format {
                offset: start,
                msg: format!("tensor name: {e}"),
            })?
            .to_string();
        let dtype = c.take(1, "dtype")?[0];
        if dtype != DTYPE_F32 {
            return Err(Error::Format {
                offset: start,
                msg: format!("{name}: unsupported dtype code {dtype}"),
            });
        }
        let rank = c.take(1, "rank")?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(usize::try_from(c.u64("dims")?).map_err(|_| Error::Format {
                offset: start,
                msg: format!("{name}: dimension overflows"),
            })?);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Format {
                offset: start,
                msg: format!("{name}: payload size overflows"),
            })?
            / 4;
        let payload = c.take(numel * 4, &format!("payload of {name}"))?;
        let data = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::Format {
            offset: start,
            msg: format!("{name}: {e}"),
        })?;
        tensors.push((name, t));
    }
    if c.pos != bytes.len() {
        return Err(Error::Format {
            offset: c.pos as u64,
            msg: format!("{} trailing bytes", bytes.len() - c.pos),
        });
    }
    Ok((manifest, tensors))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp: PathBuf = path.to_path_buf();
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".tmp");
    tmp.set_file_name(name);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn base_manifest(b: &Backbone<f32>) -> Manifest {
    Manifest {
        kind: CheckpointKind::Base,
        task_id: 1,
        model: b.config.clone(),
        kernel_size: None,
        gate_mode: None,
        classes: b.classes.clone(),
        frozen: b.is_frozen(),
    }
}

fn adapter_manifest(a: &TaskAdapter<f32>) -> Manifest {
    Manifest {
        kind: CheckpointKind::Adapter,
        task_id: a.task_id,
        model: a.config.clone(),
        kernel_size: Some(a.kernel_size),
        gate_mode: Some(a.gate_mode),
        classes: a.classes.clone(),
        frozen: true,
    }
}

pub fn encode_backbone(b: &Backbone<f32>) -> Result<Vec<u8>> {
    encode(&base_manifest(b), &b.named_tensors())
}

pub fn encode_adapter(a: &TaskAdapter<f32>) -> Result<Vec<u8>> {
    encode(&adapter_manifest(a), &a.named_tensors())
}

pub fn save_backbone(b: &Backbone<f32>, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &encode_backbone(b)?)
}

pub fn save_adapter(a: &TaskAdapter<f32>, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &encode_adapter(a)?)
}

/// Move each named tensor from `records` into the slot of the same name.
fn fill(names: Vec<String>, slots: Vec<&mut Tensor<f32>>, records: &mut BTreeMap<String, Tensor<f32>>) -> Result<()> {
    for (name, slot) in names.into_iter().zip(slots) {
        let t = records
            .remove(&name)
            .ok_or_else(|| Error::Truncated(format!("missing tensor {name}")))?;
        if t.shape() != slot.shape() {
            return Err(Error::ConfigMismatch(format!(
                "{name}: stored shape {:?}, config implies {:?}",
                t.shape(),
                slot.shape()
            )));
        }
        *slot = t;
    }
    Ok(())
}

fn no_leftovers(records: &BTreeMap<String, Tensor<f32>>) -> Result<()> {
    match records.keys().next() {
        Some(extra) => Err(Error::ConfigMismatch(format!("unexpected tensor {extra}"))),
        None => Ok(()),
    }
}

fn records_map(tensors: Vec<(String, Tensor<f32>)>) -> Result<BTreeMap<String, Tensor<f32>>> {
    let mut map = BTreeMap::new();
    for (name, t) in tensors {
        if map.insert(name.clone(), t).is_some() {
            return Err(Error::Format {
                offset: 0,
                msg: format!("duplicate tensor {name}"),
            });
        }
    }
    Ok(map)
}

fn backbone_from(manifest: Manifest, tensors: Vec<(String, Tensor<f32>)>) -> Result<Backbone<f32>> {
    let mut records = records_map(tensors)?;
    let mut b = Backbone::new(manifest.model, manifest.classes, 0)?;
    let names: Vec<String> = b.named_tensors().into_iter().map(|(n, _)| n).collect();
    let (stat_names, param_names) = {
        let mut n = names;
        let stats = n.split_off(n.len() - 2);
        (stats, n)
    };
    fill(param_names, b.trainable_mut()?, &mut records)?;
    fill(stat_names, vec![&mut b.stats.mean, &mut b.stats.std], &mut records)?;
    no_leftovers(&records)?;
    if manifest.frozen {
        b.freeze();
    }
    Ok(b)
}

fn adapter_from(manifest: Manifest, tensors: Vec<(String, Tensor<f32>)>) -> Result<TaskAdapter<f32>> {
    let mut records = records_map(tensors)?;
    let cfg = manifest.model;
    cfg.validate()?;
    let k = manifest
        .kernel_size
        .ok_or_else(|| Error::Format {
            offset: 0,
            msg: "adapter manifest lacks kernel_size".into(),
        })?;
    if k % 2 == 0 || manifest.classes.is_empty() {
        return Err(Error::ConfigMismatch(format!("invalid adapter: k={k}, {} classes", manifest.classes.len())));
    }
    let grid = |t: Tensor<f32>| -> Vec<Vec<[Tensor<f32>; 3]>> {
        (0..cfg.layers)
            .map(|_| (0..cfg.heads).map(|_| [t.clone(), t.clone(), t.clone()]).collect())
            .collect()
    };
    let task = TaskParams::new(&cfg, manifest.classes.len(), &mut ChaCha8Rng::seed_from_u64(0));
    let mut a = TaskAdapter {
        task_id: manifest.task_id,
        kernel_size: k,
        gate_mode: manifest.gate_mode.unwrap_or_default(),
        kernels: grid(Tensor::zeros([k, k])),
        gates: grid(Tensor::zeros([1])),
        config: cfg,
        task,
        classes: manifest.classes,
    };
    let names: Vec<String> = a.named_tensors().into_iter().map(|(n, _)| n).collect();
    fill(names, a.trainable_mut(), &mut records)?;
    no_leftovers(&records)?;
    Ok(a)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let (manifest, tensors) = decode(bytes)?;
    match manifest.kind {
        CheckpointKind::Base => backbone_from(manifest, tensors).map(Checkpoint::Base),
        CheckpointKind::Adapter => adapter_from(manifest, tensors).map(Checkpoint::Adapter),
    }
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    decode_checkpoint(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn load_backbone(path: impl AsRef<Path>) -> Result<Backbone<f32>> {
    match load_checkpoint(path.as_ref())? {
        Checkpoint::Base(b) => Ok(b),
        Checkpoint::Adapter(_) => Err(Error::ConfigMismatch(format!(
            "{} holds an adapter, not a base model",
            path.as_ref().display()
        ))),
    }
}

/// Load an adapter and check it fits `backbone`.
pub fn load_adapter(path: impl AsRef<Path>, backbone: &Backbone<f32>) -> Result<TaskAdapter<f32>> {
    match load_checkpoint(path.as_ref())? {
        Checkpoint::Adapter(a) => {
            a.check_compatible(backbone)?;
            Ok(a)
        }
        Checkpoint::Base(_) => Err(Error::ConfigMismatch(format!(
            "{} holds a base model, not an adapter",
            path.as_ref().display()
        ))),
    }
}

/// Every `*.ckpt` adapter in `dir`, ordered by task id.
pub fn scan_adapters(dir: impl AsRef<Path>, backbone: &Backbone<f32>) -> Result<Vec<TaskAdapter<f32>>> {
    let dir = dir.as_ref();
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x == "ckpt"))
        .collect();
    paths.sort();
    let mut out: Vec<TaskAdapter<f32>> = paths.iter().map(|p| load_adapter(p, backbone)).collect::<Result<_>>()?;
    out.sort_by_key(|a| a.task_id);
    if let Some(w) = out.windows(2).find(|w| w[0].task_id == w[1].task_id) {
        return Err(Error::Config(format!("two adapters for task {}", w[0].task_id)));
    }
    Ok(out)
}
