//! Dataset ingestion, normalization, class-balanced subsetting, and the
//! synthetic toy dataset used by offline tests.
//!
//! Pixels are stored as raw `u8` and exposed as `f64` in `[0, 1]` with no
//! mean/std normalization: the pixel-bound loss and SSIM both assume a unit
//! dynamic range. Loaded collections are immutable and index-stable.

mod archives;
mod synthetic;

pub use archives::fetch_if_missing;

use crate::util::{atomic_write, sha256_hex, splitmix64};
use crate::{Error, Result};
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::Path;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetName {
    Mnist,
    FashionMnist,
    Svhn,
    Cifar10,
    SyntheticShapes,
}

impl DatasetName {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mnist" => Ok(Self::Mnist),
            "fashionmnist" | "fashion-mnist" | "fashion_mnist" => Ok(Self::FashionMnist),
            "svhn" => Ok(Self::Svhn),
            "cifar10" | "cifar-10" => Ok(Self::Cifar10),
            "synthetic" | "syntheticshapes" | "synthetic-shapes" => Ok(Self::SyntheticShapes),
            other => Err(Error::Config(format!(
                "unknown dataset name '{other}' (expected mnist, fashionmnist, svhn, cifar10 or synthetic)"
            ))),
        }
    }

    pub fn image_shape(self) -> (usize, usize, usize) {
        match self {
            Self::Mnist | Self::FashionMnist | Self::SyntheticShapes => (1, 28, 28),
            Self::Svhn | Self::Cifar10 => (3, 32, 32),
        }
    }

    pub fn num_classes(self) -> usize {
        match self {
            Self::SyntheticShapes => 4,
            _ => 10,
        }
    }
}

impl fmt::Display for DatasetName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Self::Mnist => "mnist",
            Self::FashionMnist => "fashionmnist",
            Self::Svhn => "svhn",
            Self::Cifar10 => "cifar10",
            Self::SyntheticShapes => "synthetic",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

/// Identity of one dataset split plus an optional per-class cap.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub name: DatasetName,
    pub image_shape: (usize, usize, usize),
    pub num_classes: usize,
    pub subset_size: Option<usize>,
    pub split: Split,
    /// Generation seed for the synthetic dataset; ignored for archives.
    pub synthetic_seed: u64,
}

impl DatasetSpec {
    pub fn new(name: DatasetName, split: Split) -> Self {
        Self {
            name,
            image_shape: name.image_shape(),
            num_classes: name.num_classes(),
            subset_size: None,
            split,
            synthetic_seed: 0,
        }
    }

    pub fn with_subset(mut self, per_class: Option<usize>) -> Self {
        self.subset_size = per_class;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_shape != self.name.image_shape() {
            return Err(Error::Config(format!(
                "image_shape {:?} does not match {} ({:?})",
                self.image_shape,
                self.name,
                self.name.image_shape()
            )));
        }
        if self.num_classes != self.name.num_classes() {
            return Err(Error::Config(format!(
                "num_classes {} does not match {} ({})",
                self.num_classes,
                self.name,
                self.name.num_classes()
            )));
        }
        if self.subset_size == Some(0) {
            return Err(Error::Config("subset_size must be at least 1".into()));
        }
        Ok(())
    }
}

/// A batch of images in `[B, C, H, W]` layout with pixels nominally in `[0,1]`.
#[derive(Clone, Debug)]
pub struct ImageBatch {
    pub pixels: ArrayD<f64>,
    pub labels: Option<Vec<usize>>,
}

impl ImageBatch {
    pub fn batch_size(&self) -> usize {
        self.pixels.shape()[0]
    }

    pub fn image_shape(&self) -> (usize, usize, usize) {
        let s = self.pixels.shape();
        (s[1], s[2], s[3])
    }

    pub fn pixels_in_unit_range(&self) -> bool {
        self.pixels.iter().all(|&p| (0.0..=1.0).contains(&p))
    }
}

/// Immutable, index-stable image collection.
pub struct Dataset {
    pub spec: DatasetSpec,
    pixels: Vec<u8>,
    labels: Vec<u8>,
    by_class: Vec<Vec<usize>>,
}

impl Dataset {
    fn from_raw(spec: DatasetSpec, pixels: Vec<u8>, labels: Vec<u8>) -> Result<Self> {
        let (c, h, w) = spec.image_shape;
        let px = c * h * w;
        if labels.len() * px != pixels.len() {
            return Err(Error::Data {
                dataset: spec.name.to_string(),
                message: format!(
                    "pixel buffer ({}) inconsistent with {} labels of {}x{}x{} images",
                    pixels.len(),
                    labels.len(),
                    c,
                    h,
                    w
                ),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= spec.num_classes) {
            return Err(Error::Data {
                dataset: spec.name.to_string(),
                message: format!("label {bad} out of range 0..{}", spec.num_classes),
            });
        }
        let mut by_class = vec![Vec::new(); spec.num_classes];
        for (i, &l) in labels.iter().enumerate() {
            by_class[l as usize].push(i);
        }
        Ok(Self {
            spec,
            pixels,
            labels,
            by_class,
        })
    }

    /// Keep the first `per_class` indices of every class, preserving order.
    fn subset(self, per_class: usize) -> Self {
        let (c, h, w) = self.spec.image_shape;
        let px = c * h * w;
        let mut keep: Vec<usize> = self
            .by_class
            .iter()
            .flat_map(|idxs| idxs.iter().take(per_class).copied())
            .collect();
        keep.sort_unstable();
        let mut pixels = Vec::with_capacity(keep.len() * px);
        let mut labels = Vec::with_capacity(keep.len());
        for &i in &keep {
            pixels.extend_from_slice(&self.pixels[i * px..(i + 1) * px]);
            labels.push(self.labels[i]);
        }
        let mut by_class = vec![Vec::new(); self.spec.num_classes];
        for (i, &l) in labels.iter().enumerate() {
            by_class[l as usize].push(i);
        }
        Self {
            spec: self.spec,
            pixels,
            labels,
            by_class,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn label(&self, index: usize) -> usize {
        self.labels[index] as usize
    }

    pub fn class_indices(&self, class: usize) -> &[usize] {
        &self.by_class[class]
    }

    pub fn class_counts(&self) -> Vec<usize> {
        self.by_class.iter().map(|v| v.len()).collect()
    }

    /// One image as `[C, H, W]` in `[0, 1]`.
    pub fn image(&self, index: usize) -> ArrayD<f64> {
        let (c, h, w) = self.spec.image_shape;
        let px = c * h * w;
        let slice = &self.pixels[index * px..(index + 1) * px];
        ArrayD::from_shape_vec(
            IxDyn(&[c, h, w]),
            slice.iter().map(|&b| f64::from(b) / 255.0).collect(),
        )
        .unwrap()
    }

    /// Assemble a batch from explicit indices.
    pub fn batch(&self, indices: &[usize]) -> ImageBatch {
        let (c, h, w) = self.spec.image_shape;
        let px = c * h * w;
        let mut data = Vec::with_capacity(indices.len() * px);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            let slice = &self.pixels[i * px..(i + 1) * px];
            data.extend(slice.iter().map(|&b| f64::from(b) / 255.0));
            labels.push(self.labels[i] as usize);
        }
        ImageBatch {
            pixels: ArrayD::from_shape_vec(IxDyn(&[indices.len(), c, h, w]), data).unwrap(),
            labels: Some(labels),
        }
    }

    fn raw_parts(&self) -> (&[u8], &[u8]) {
        (&self.pixels, &self.labels)
    }
}

/// Sidecar describing the normalized blob next to it.
#[derive(Serialize, Deserialize)]
struct CacheSidecar {
    dataset: String,
    split: String,
    count: usize,
    shape: (usize, usize, usize),
    blob_sha256: String,
    scaling: String,
}

const BLOB_MAGIC: &[u8; 4] = b"RADS";

fn encode_blob(spec: &DatasetSpec, pixels: &[u8], labels: &[u8]) -> Vec<u8> {
    let (c, h, w) = spec.image_shape;
    let mut out = Vec::with_capacity(16 + labels.len() + pixels.len());
    out.extend_from_slice(BLOB_MAGIC);
    out.extend_from_slice(&(labels.len() as u64).to_le_bytes());
    for d in [c, h, w] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend_from_slice(labels);
    out.extend_from_slice(pixels);
    out
}

fn decode_blob(spec: &DatasetSpec, bytes: &[u8]) -> Result<(Vec<u8>, Vec<u8>)> {
    let fail = |m: &str| Error::Data {
        dataset: spec.name.to_string(),
        message: m.to_string(),
    };
    if bytes.len() < 24 || &bytes[..4] != BLOB_MAGIC {
        return Err(fail("normalized blob has wrong magic"));
    }
    let count = u64::from_le_bytes(bytes[4..12].try_into().unwrap()) as usize;
    let c = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let h = u32::from_le_bytes(bytes[16..20].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(bytes[20..24].try_into().unwrap()) as usize;
    if (c, h, w) != spec.image_shape {
        return Err(fail("cached blob shape does not match dataset"));
    }
    let need = 24 + count + count * c * h * w;
    if bytes.len() != need {
        return Err(fail("cached blob truncated"));
    }
    let labels = bytes[24..24 + count].to_vec();
    let pixels = bytes[24 + count..].to_vec();
    Ok((pixels, labels))
}

/// Load a dataset split, using the on-disk cache when present.
///
/// Layout under `cache_dir/<name>/`: raw archives as downloaded, one
/// normalized blob per split, and a JSON sidecar recording shape, count,
/// blob checksum, and the scaling applied. The returned collection is
/// deterministic and index-stable for a fixed spec.
pub fn load_dataset(spec: &DatasetSpec, cache_dir: &Path) -> Result<Dataset> {
    spec.validate()?;

    if spec.name == DatasetName::SyntheticShapes {
        let (pixels, labels) = synthetic::generate(spec);
        let ds = Dataset::from_raw(spec.clone(), pixels, labels)?;
        return Ok(apply_subset(ds));
    }

    let dir = cache_dir.join(spec.name.to_string());
    let blob_path = dir.join(format!("normalized_{}.bin", spec.split));
    let sidecar_path = dir.join(format!("normalized_{}.json", spec.split));

    if blob_path.exists() && sidecar_path.exists() {
        let blob = std::fs::read(&blob_path)?;
        let sidecar: CacheSidecar = serde_json::from_slice(&std::fs::read(&sidecar_path)?)?;
        if sha256_hex(&blob) != sidecar.blob_sha256 {
            return Err(Error::Integrity(format!(
                "cached blob {} does not match its recorded checksum; delete it to re-ingest",
                blob_path.display()
            )));
        }
        let (pixels, labels) = decode_blob(spec, &blob)?;
        let ds = Dataset::from_raw(spec.clone(), pixels, labels)?;
        return Ok(apply_subset(ds));
    }

    let (pixels, labels) = archives::ingest(spec, &dir)?;
    let ds = Dataset::from_raw(spec.clone(), pixels, labels)?;
    let (px, lb) = ds.raw_parts();
    let blob = encode_blob(spec, px, lb);
    let sidecar = CacheSidecar {
        dataset: spec.name.to_string(),
        split: spec.split.to_string(),
        count: ds.len(),
        shape: spec.image_shape,
        blob_sha256: sha256_hex(&blob),
        scaling: "u8/255 -> [0,1]".into(),
    };
    atomic_write(&blob_path, &blob)?;
    atomic_write(&sidecar_path, serde_json::to_string_pretty(&sidecar)?.as_bytes())?;
    Ok(apply_subset(ds))
}

fn apply_subset(ds: Dataset) -> Dataset {
    match ds.spec.subset_size {
        Some(k) => ds.subset(k),
        None => ds,
    }
}

/// Seeded epoch iterator: one permutation per epoch, fixed batch size, the
/// final short batch included.
pub struct BatchIter<'d> {
    dataset: &'d Dataset,
    order: Vec<usize>,
    batch_size: usize,
    cursor: usize,
}

impl<'d> Iterator for BatchIter<'d> {
    type Item = ImageBatch;

    fn next(&mut self) -> Option<ImageBatch> {
        if self.cursor >= self.order.len() {
            return None;
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let batch = self.dataset.batch(&self.order[self.cursor..end]);
        self.cursor = end;
        Some(batch)
    }
}

/// Deterministic shuffled batches: the same `(dataset, batch_size, seed)`
/// always yields the same sequence.
pub fn batch_iterator(dataset: &Dataset, batch_size: usize, seed: u64) -> BatchIter<'_> {
    assert!(batch_size >= 1, "batch_size must be at least 1");
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    // Fisher-Yates driven by splitmix64 so the permutation depends only on
    // the seed, not on any RNG library internals.
    let mut state = seed;
    for i in (1..order.len()).rev() {
        state = splitmix64(state);
        let j = (state % (i as u64 + 1)) as usize;
        order.swap(i, j);
    }
    BatchIter {
        dataset,
        order,
        batch_size,
        cursor: 0,
    }
}

pub use synthetic::SYNTHETIC_CLASS_NAMES;

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_spec() -> DatasetSpec {
        DatasetSpec::new(DatasetName::SyntheticShapes, Split::Train)
    }

    #[test]
    fn synthetic_is_balanced_and_in_range() {
        let ds = load_dataset(&toy_spec(), Path::new("/nonexistent")).unwrap();
        assert_eq!(ds.len(), 400);
        assert_eq!(ds.class_counts(), vec![100, 100, 100, 100]);
        let batch = ds.batch(&(0..32).collect::<Vec<_>>());
        assert!(batch.pixels_in_unit_range());
        assert_eq!(batch.image_shape(), (1, 28, 28));
    }

    #[test]
    fn synthetic_reload_bit_identical() {
        let a = load_dataset(&toy_spec(), Path::new("/nonexistent")).unwrap();
        let b = load_dataset(&toy_spec(), Path::new("/nonexistent")).unwrap();
        assert_eq!(a.raw_parts().0, b.raw_parts().0);
        assert_eq!(a.raw_parts().1, b.raw_parts().1);
        let mut other = toy_spec();
        other.synthetic_seed = 1;
        let c = load_dataset(&other, Path::new("/nonexistent")).unwrap();
        assert_ne!(a.raw_parts().0, c.raw_parts().0);
    }

    #[test]
    fn subset_caps_every_class() {
        let spec = toy_spec().with_subset(Some(25));
        let ds = load_dataset(&spec, Path::new("/nonexistent")).unwrap();
        assert_eq!(ds.class_counts(), vec![25, 25, 25, 25]);
        // larger than available: capped at what exists
        let spec = toy_spec().with_subset(Some(1000));
        let ds = load_dataset(&spec, Path::new("/nonexistent")).unwrap();
        assert_eq!(ds.class_counts(), vec![100, 100, 100, 100]);
    }

    #[test]
    fn batch_iterator_is_seeded_and_covers_everything() {
        let ds = load_dataset(&toy_spec(), Path::new("/nonexistent")).unwrap();
        let sizes: Vec<usize> = batch_iterator(&ds, 300, 7).map(|b| b.batch_size()).collect();
        assert_eq!(sizes, vec![300, 100]);

        let labels = |seed: u64| -> Vec<usize> {
            batch_iterator(&ds, 64, seed)
                .flat_map(|b| b.labels.unwrap())
                .collect()
        };
        assert_eq!(labels(7), labels(7));
        assert_ne!(labels(7), labels(8));

        let mut seen = labels(7);
        seen.sort_unstable();
        assert_eq!(seen.len(), 400);
    }

    #[test]
    fn unknown_dataset_name_is_config_error() {
        let err = DatasetName::parse("imagenet").unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn blob_roundtrip() {
        let spec = toy_spec();
        let (pixels, labels) = synthetic::generate(&spec);
        let blob = encode_blob(&spec, &pixels, &labels);
        let (p2, l2) = decode_blob(&spec, &blob).unwrap();
        assert_eq!(pixels, p2);
        assert_eq!(labels, l2);
    }
}
