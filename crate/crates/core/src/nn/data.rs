use std::path::Path;

use super::tensor::Tensor;
use super::NnError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Images `[n, c, h, w]` scaled to `[0, 1]`, with class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, classes: usize, split: Split) -> Result<Self, NnError> {
        if images.shape().len() != 4 || images.shape()[0] != labels.len() {
            return Err(NnError::ShapeMismatch {
                context: "dataset".into(),
                expected: format!("[{}, c, h, w] images", labels.len()),
                found: format!("{:?}", images.shape()),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(NnError::Format(format!("label {bad} outside [0, {classes})")));
        }
        Ok(Self {
            images,
            labels,
            classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[c, h, w]` of one image.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let size: usize = self.image_shape().iter().product();
        &self.images.data()[i * size..(i + 1) * size]
    }

    /// Copies the listed samples, in order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        let size: usize = self.image_shape().iter().product();
        let mut data = Vec::with_capacity(indices.len() * size);
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        let [c, h, w] = self.image_shape();
        Self {
            images: Tensor::new(vec![indices.len(), c, h, w], data).expect("consistent shape"),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
            split: self.split,
        }
    }

    /// Share of the most frequent class.
    pub fn max_class_prior(&self) -> f64 {
        let mut counts = vec![0usize; self.classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        *counts.iter().max().unwrap_or(&0) as f64 / self.len().max(1) as f64
    }
}

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32, NnError> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(NnError::Truncated)
}

/// Parses an IDX image file (magic `0x00000803`) into `[n, 1, rows, cols]`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Tensor, NnError> {
    let magic = be_u32(bytes, 0)?;
    if magic != 0x0803 {
        return Err(NnError::BadMagic { expected: 0x0803, found: magic });
    }
    let n = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let body = &bytes[16..];
    if body.len() < n * rows * cols {
        return Err(NnError::Truncated);
    }
    let data = body[..n * rows * cols].iter().map(|&b| b as f32 / 255.0).collect();
    Tensor::new(vec![n, 1, rows, cols], data)
}

/// Parses an IDX label file (magic `0x00000801`).
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>, NnError> {
    let magic = be_u32(bytes, 0)?;
    if magic != 0x0801 {
        return Err(NnError::BadMagic { expected: 0x0801, found: magic });
    }
    let n = be_u32(bytes, 4)? as usize;
    let body = &bytes[8..];
    if body.len() < n {
        return Err(NnError::Truncated);
    }
    Ok(body[..n].iter().map(|&b| b as usize).collect())
}

pub fn load_idx(images: &Path, labels: &Path, split: Split) -> Result<Dataset, NnError> {
    let images = parse_idx_images(&std::fs::read(images)?)?;
    let labels = parse_idx_labels(&std::fs::read(labels)?)?;
    Dataset::new(images, labels, 10, split)
}

pub const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

/// Parses concatenated CIFAR-10 binary records (label byte + 3072 channel-major pixels).
pub fn parse_cifar10(bytes: &[u8]) -> Result<(Tensor, Vec<usize>), NnError> {
    if bytes.is_empty() || !bytes.len().is_multiple_of(CIFAR_RECORD) {
        return Err(NnError::Truncated);
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut data = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    let mut labels = Vec::with_capacity(n);
    for rec in bytes.chunks_exact(CIFAR_RECORD) {
        if rec[0] >= 10 {
            return Err(NnError::Format(format!("CIFAR-10 label {}", rec[0])));
        }
        labels.push(rec[0] as usize);
        data.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
    }
    Ok((Tensor::new(vec![n, 3, 32, 32], data)?, labels))
}

pub fn load_cifar10<P: AsRef<Path>>(paths: &[P], split: Split) -> Result<Dataset, NnError> {
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for p in paths {
        let (t, l) = parse_cifar10(&std::fs::read(p)?)?;
        data.extend(t.into_data());
        labels.extend(l);
    }
    let images = Tensor::new(vec![labels.len(), 3, 32, 32], data)?;
    Dataset::new(images, labels, 10, split)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_images(n: u32) -> Vec<u8> {
        let mut b = vec![0, 0, 8, 3];
        for d in [n, 28, 28] {
            b.extend(d.to_be_bytes());
        }
        b.extend((0..n * 784).map(|i| (i % 256) as u8));
        b
    }

    #[test]
    fn idx_conformance() {
        let t = parse_idx_images(&idx_images(10)).unwrap();
        assert_eq!(t.shape(), &[10, 1, 28, 28]);
        assert_eq!(t.data()[255], 1.0);
        let mut bad = idx_images(1);
        bad[3] = 1;
        assert!(matches!(parse_idx_images(&bad), Err(NnError::BadMagic { found: 0x0801, .. })));
        let full = idx_images(2);
        assert!(matches!(parse_idx_images(&full[..full.len() - 1]), Err(NnError::Truncated)));
        let labels = [0u8, 0, 8, 1, 0, 0, 0, 2, 7, 3];
        assert_eq!(parse_idx_labels(&labels).unwrap(), vec![7, 3]);
    }

    #[test]
    fn cifar_record_conformance() {
        let mut rec = vec![4u8];
        rec.extend((0..3072).map(|i| (i / 1024) as u8));
        let (t, l) = parse_cifar10(&rec).unwrap();
        assert_eq!(l, vec![4]);
        assert_eq!(t.shape(), &[1, 3, 32, 32]);
        assert_eq!(t.data()[2048] * 255.0, 2.0);
        assert!(parse_cifar10(&rec[..3072]).is_err());
    }
}
