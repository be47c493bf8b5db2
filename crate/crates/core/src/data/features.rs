//! Binary object-feature files.
//!
//! Layout (all little-endian): magic `MITF`, `u32` image count, then per image
//! `u64` image id, `u32` object count K, `u32` feature width V and K·V `f32`s.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const FEATURE_MAGIC: &[u8; 4] = b"MITF";

/// Object-level features of one image: a `objects × dim` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageFeatures {
    pub image_id: u64,
    objects: usize,
    dim: usize,
    data: Vec<f32>,
}

impl ImageFeatures {
    pub fn new(image_id: u64, objects: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if objects == 0 || dim == 0 {
            return Err(Error::data(
                "features",
                format!("image {image_id} has an empty feature matrix"),
            ));
        }
        if data.len() != objects * dim {
            return Err(Error::data(
                "features",
                format!(
                    "image {image_id}: expected {} values, got {}",
                    objects * dim,
                    data.len()
                ),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::data(
                "features",
                format!("image {image_id} has non-finite values"),
            ));
        }
        Ok(Self {
            image_id,
            objects,
            dim,
            data,
        })
    }

    pub fn objects(&self) -> usize {
        self.objects
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, k: usize) -> &[f32] {
        &self.data[k * self.dim..(k + 1) * self.dim]
    }

    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::from_fn(&[self.objects, self.dim], |i| T::of_f64(self.data[i] as f64))
    }
}

/// All feature matrices of a split, keyed by image id.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FeatureSet {
    images: Vec<ImageFeatures>,
    by_id: BTreeMap<u64, usize>,
}

impl FeatureSet {
    pub fn new(images: Vec<ImageFeatures>) -> Result<Self> {
        let mut by_id = BTreeMap::new();
        for (i, img) in images.iter().enumerate() {
            if by_id.insert(img.image_id, i).is_some() {
                return Err(Error::format(format!("duplicate image id {}", img.image_id)));
            }
        }
        Ok(Self { images, by_id })
    }

    pub fn get(&self, image_id: u64) -> Option<&ImageFeatures> {
        self.by_id.get(&image_id).map(|&i| &self.images[i])
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &ImageFeatures> {
        self.images.iter()
    }

    /// Common feature width, if every image agrees.
    pub fn dim(&self) -> Option<usize> {
        let d = self.images.first()?.dim;
        self.images.iter().all(|i| i.dim == d).then_some(d)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let floats: usize = self.images.iter().map(|i| i.data.len()).sum();
        let mut out = Vec::with_capacity(8 + self.images.len() * 16 + floats * 4);
        out.extend_from_slice(FEATURE_MAGIC);
        out.extend_from_slice(&(self.images.len() as u32).to_le_bytes());
        for img in &self.images {
            out.extend_from_slice(&img.image_id.to_le_bytes());
            out.extend_from_slice(&(img.objects as u32).to_le_bytes());
            out.extend_from_slice(&(img.dim as u32).to_le_bytes());
            for v in &img.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != FEATURE_MAGIC {
            return Err(Error::format("feature file magic mismatch"));
        }
        let count = r.u32()? as usize;
        let mut images = Vec::with_capacity(count.min(bytes.len() / 16));
        for _ in 0..count {
            let id = r.u64()?;
            let objects = r.u32()? as usize;
            let dim = r.u32()? as usize;
            let n = objects
                .checked_mul(dim)
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| Error::format(format!("image {id}: feature size overflows")))?;
            let raw = r.take(n)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let img = ImageFeatures::new(id, objects, dim, data).map_err(|e| Error::format(e.to_string()))?;
            images.push(img);
        }
        if r.pos != bytes.len() {
            return Err(Error::format(format!(
                "{} trailing bytes after {count} images",
                bytes.len() - r.pos
            )));
        }
        Self::new(images)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::format(format!("truncated feature file at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(u64::from_le_bytes(a))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> FeatureSet {
        FeatureSet::new(vec![
            ImageFeatures::new(7, 2, 3, vec![0.5, -1.0, 2.0, 1e-30, 3.25, 0.0]).unwrap(),
            ImageFeatures::new(1 << 40, 1, 3, vec![1.0, 2.0, 3.0]).unwrap(),
        ])
        .unwrap()
    }

    #[test]
    fn byte_layout_is_exact() {
        let bytes = sample().to_bytes();
        assert_eq!(&bytes[..4], b"MITF");
        assert_eq!(&bytes[4..8], &2u32.to_le_bytes());
        assert_eq!(&bytes[8..16], &7u64.to_le_bytes());
        assert_eq!(&bytes[16..20], &2u32.to_le_bytes());
        assert_eq!(&bytes[20..24], &3u32.to_le_bytes());
        assert_eq!(&bytes[24..28], &0.5f32.to_le_bytes());
        assert_eq!(bytes.len(), 8 + 16 + 24 + 16 + 12);
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let s = sample();
        let back = FeatureSet::from_bytes(&s.to_bytes()).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.to_bytes(), s.to_bytes());
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let mut bytes = sample().to_bytes();
        bytes[0] = b'X';
        assert!(matches!(FeatureSet::from_bytes(&bytes), Err(Error::Format(_))));
        let bytes = sample().to_bytes();
        for cut in [0, 3, 7, 20, bytes.len() - 1] {
            assert!(FeatureSet::from_bytes(&bytes[..cut]).is_err());
        }
    }

    #[test]
    fn huge_header_does_not_allocate() {
        let mut bytes = b"MITF".to_vec();
        bytes.extend_from_slice(&u32::MAX.to_le_bytes());
        bytes.extend_from_slice(&1u64.to_le_bytes());
        bytes.extend_from_slice(&u32::MAX.to_le_bytes());
        bytes.extend_from_slice(&u32::MAX.to_le_bytes());
        assert!(FeatureSet::from_bytes(&bytes).is_err());
    }
}
