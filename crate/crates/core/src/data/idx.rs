use std::fs;
use std::path::Path;

use crate::autodiff::Tensor;
use crate::data::Dataset;
use crate::error::{Error, Result};

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos as u64,
                msg: format!("truncated: wanted {n} bytes, {} left", self.bytes.len() - self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn magic(&mut self, expected: u32) -> Result<()> {
        let m = self.u32()?;
        if m != expected {
            return Err(Error::Format {
                offset: 0,
                msg: format!("bad magic {m:#010x}, expected {expected:#010x}"),
            });
        }
        Ok(())
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Parse an IDX image file (`u8`, `[n, rows, cols]`) and its label file.
pub fn load_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<Dataset> {
    let img_bytes = read(images.as_ref())?;
    let lbl_bytes = read(labels.as_ref())?;

    let mut r = Reader {
        bytes: &img_bytes,
        pos: 0,
    };
    r.magic(IMAGE_MAGIC)?;
    let n = r.u32()? as usize;
    let rows = r.u32()? as usize;
    let cols = r.u32()? as usize;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let px = r.take(rows * cols)?;
        out.push(Tensor::new([1, rows, cols], px.iter().map(|&b| b as f32 / 255.0).collect())?);
    }

    let mut l = Reader {
        bytes: &lbl_bytes,
        pos: 0,
    };
    l.magic(LABEL_MAGIC)?;
    let nl = l.u32()? as usize;
    if nl != n {
        return Err(Error::Format {
            offset: 4,
            msg: format!("label count {nl} does not match image count {n}"),
        });
    }
    let labels: Vec<usize> = l.take(n)?.iter().map(|&b| b as usize).collect();
    let num_classes = labels.iter().max().map_or(0, |m| m + 1);
    Dataset::new(out, labels, num_classes)
}

/// Write single-channel images (quantized to `u8`) and labels as IDX files.
pub fn write_idx(dataset: &Dataset, images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<()> {
    let s = dataset.shape;
    if s.channels != 1 {
        return Err(Error::Data("IDX holds single-channel images".into()));
    }
    let mut buf = Vec::with_capacity(16 + dataset.len() * s.height * s.width);
    buf.extend(IMAGE_MAGIC.to_be_bytes());
    for v in [dataset.len(), s.height, s.width] {
        buf.extend((v as u32).to_be_bytes());
    }
    for im in &dataset.images {
        buf.extend(im.data().iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
    }
    fs::write(images.as_ref(), &buf).map_err(|e| Error::io(images.as_ref(), e))?;

    let mut lb = Vec::with_capacity(8 + dataset.len());
    lb.extend(LABEL_MAGIC.to_be_bytes());
    lb.extend((dataset.len() as u32).to_be_bytes());
    for &l in &dataset.labels {
        lb.push(u8::try_from(l).map_err(|_| Error::Data(format!("label {l} does not fit in a byte")))?);
    }
    fs::write(labels.as_ref(), &lb).map_err(|e| Error::io(labels.as_ref(), e))
}
