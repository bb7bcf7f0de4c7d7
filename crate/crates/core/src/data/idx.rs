//! IDX container format: a big-endian magic word `0x0000 08 NN` (unsigned
//! bytes, `NN` dimensions), `NN` big-endian u32 dimension sizes, then the
//! payload. Images use three dimensions (N, H, W), labels one (N).

use std::fs;
use std::path::{Path, PathBuf};

use super::{Dataset, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

fn read_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Idx(format!("expected {} bytes, found {}", at + 4, bytes.len())))
}

fn parse(bytes: &[u8], magic: u32) -> Result<(Vec<usize>, &[u8])> {
    let found = read_u32(bytes, 0)?;
    if found != magic {
        return Err(Error::Idx(format!("bad magic 0x{found:08x}, expected 0x{magic:08x}")));
    }
    let ndim = (magic & 0xff) as usize;
    let dims = (0..ndim)
        .map(|i| read_u32(bytes, 4 + 4 * i).map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let header = 4 + 4 * ndim;
    let expected = header + dims.iter().product::<usize>();
    if bytes.len() < expected {
        return Err(Error::Idx(format!("expected {expected} bytes, found {}", bytes.len())));
    }
    Ok((dims, &bytes[header..expected]))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Parse an image/label pair already in memory.
pub fn parse_idx_pair(images: &[u8], labels: &[u8], name: &str, split: Split) -> Result<Dataset> {
    let (idims, pixels) = parse(images, IMAGE_MAGIC)?;
    let (ldims, raw_labels) = parse(labels, LABEL_MAGIC)?;
    if idims[0] != ldims[0] {
        return Err(Error::Idx(format!("{} images but {} labels", idims[0], ldims[0])));
    }
    let (n, h, w) = (idims[0], idims[1], idims[2]);
    if n == 0 || h == 0 || w == 0 {
        return Err(Error::Idx(format!("empty image tensor {idims:?}")));
    }
    let data = pixels.iter().map(|&b| b as f32 / 255.0).collect();
    let labels: Vec<usize> = raw_labels.iter().map(|&b| b as usize).collect();
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    Dataset::new(name, split, Tensor::from_vec(&[n, 1, h, w], data)?, labels, classes)
}

/// Label file paired with an image file by name: `images` → `labels`,
/// `idx3` → `idx1`.
pub fn label_path_for(images: &Path) -> Result<PathBuf> {
    let file = images
        .file_name()
        .and_then(|f| f.to_str())
        .ok_or_else(|| Error::Idx(format!("{} has no file name", images.display())))?;
    if !file.contains("images") {
        return Err(Error::Idx(format!("cannot derive label file from {file}: name lacks \"images\"")));
    }
    Ok(images.with_file_name(file.replace("images", "labels").replace("idx3", "idx1")))
}

/// Load an IDX image file and its paired label file.
pub fn load_idx(images: &Path, split: Split) -> Result<Dataset> {
    let labels = label_path_for(images)?;
    load_idx_pair(images, &labels, split)
}

pub fn load_idx_pair(images: &Path, labels: &Path, split: Split) -> Result<Dataset> {
    let name = images
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("idx")
        .to_string();
    parse_idx_pair(&read(images)?, &read(labels)?, &name, split)
}

/// Export a single-channel dataset; pixels are rounded to the nearest byte.
pub fn write_idx(dataset: &Dataset, images: &Path, labels: &Path) -> Result<()> {
    let [c, h, w] = dataset.sample_shape();
    if c != 1 {
        return Err(Error::Idx(format!("idx export needs one channel, dataset has {c}")));
    }
    if dataset.num_classes > 256 {
        return Err(Error::Idx("labels do not fit in a byte".into()));
    }
    let n = dataset.len();
    let mut img = Vec::with_capacity(16 + dataset.images.len());
    img.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
    for d in [n, h, w] {
        img.extend_from_slice(&(d as u32).to_be_bytes());
    }
    img.extend(dataset.images.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    let mut lab = Vec::with_capacity(8 + n);
    lab.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(n as u32).to_be_bytes());
    lab.extend(dataset.labels.iter().map(|&l| l as u8));
    fs::write(images, img).map_err(|e| Error::io(images, e))?;
    fs::write(labels, lab).map_err(|e| Error::io(labels, e))
}
