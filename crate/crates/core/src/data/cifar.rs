use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::data::Dataset;
use crate::error::{Error, Result};

const PIXELS: usize = 3 * 32 * 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CifarVariant {
    Cifar10,
    Cifar100,
}

impl CifarVariant {
    pub fn label_bytes(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 1,
            CifarVariant::Cifar100 => 2,
        }
    }

    pub fn record_size(self) -> usize {
        self.label_bytes() + PIXELS
    }

    pub fn classes(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 10,
            CifarVariant::Cifar100 => 100,
        }
    }
}

impl FromStr for CifarVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cifar10" => Ok(CifarVariant::Cifar10),
            "cifar100" => Ok(CifarVariant::Cifar100),
            other => Err(Error::Config(format!("unknown CIFAR variant `{other}`"))),
        }
    }
}

fn parse(bytes: &[u8], variant: CifarVariant, images: &mut Vec<Tensor<f32>>, labels: &mut Vec<usize>) -> Result<()> {
    let rec = variant.record_size();
    if !bytes.len().is_multiple_of(rec) {
        return Err(Error::Format {
            offset: (bytes.len() - bytes.len() % rec) as u64,
            msg: format!("size {} is not a multiple of the {rec}-byte record", bytes.len()),
        });
    }
    for (i, r) in bytes.chunks_exact(rec).enumerate() {
        // cifar100 stores coarse then fine; the fine label is last
        let label = r[variant.label_bytes() - 1] as usize;
        if label >= variant.classes() {
            return Err(Error::Format {
                offset: (i * rec) as u64,
                msg: format!("label {label} out of range"),
            });
        }
        labels.push(label);
        let px = &r[variant.label_bytes()..];
        images.push(Tensor::new([3, 32, 32], px.iter().map(|&b| b as f32 / 255.0).collect())?);
    }
    Ok(())
}

/// Load one CIFAR binary batch file.
pub fn load_cifar_binary(path: impl AsRef<Path>, variant: CifarVariant) -> Result<Dataset> {
    load_cifar_files(&[path], variant)
}

/// Concatenate several CIFAR binary batch files in order.
pub fn load_cifar_files<P: AsRef<Path>>(paths: &[P], variant: CifarVariant) -> Result<Dataset> {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for p in paths {
        let p = p.as_ref();
        let bytes = fs::read(p).map_err(|e| Error::io(p, e))?;
        parse(&bytes, variant, &mut images, &mut labels)?;
    }
    Dataset::new(images, labels, variant.classes())
}
