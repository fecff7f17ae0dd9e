//! Dataset ingestion, client partitioning and the linear transformation family
//! used to craft edge examples.
//!
//! Features are stored row-major (an image of side `s` occupies `s * s`
//! consecutive entries, row by row) and are normalized to `[0, 1]`.

use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

/// Magic number of an IDX file holding unsigned-byte rank-3 tensors (images).
pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
/// Magic number of an IDX file holding unsigned-byte rank-1 tensors (labels).
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic in {path}: expected {expected:#010x}, found {found:#010x}")]
    BadMagic {
        path: String,
        expected: u32,
        found: u32,
    },
    #[error("truncated file {path}: expected {expected} bytes of payload, found {found}")]
    Truncated {
        path: String,
        expected: usize,
        found: usize,
    },
    #[error("count mismatch: {images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("feature dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("feature value {value} outside [0, 1]")]
    FeatureOutOfRange { value: f64 },
    #[error("label {label} outside 0..{num_classes}")]
    LabelOutOfRange { label: usize, num_classes: usize },
    #[error("cannot build {n} examples for {classes} classes (need n >= classes)")]
    TooFewExamples { n: usize, classes: usize },
    #[error("cannot partition {len} examples among {clients} clients")]
    TooManyClients { len: usize, clients: usize },
    #[error("transform {kind:?} takes {expected} input(s), got {found}")]
    WrongArity {
        kind: TransformKind,
        expected: usize,
        found: usize,
    },
    #[error("alpha {0} outside [0, 1]")]
    AlphaOutOfRange(f64),
    #[error("feature length {len} is not a {side}x{side} image")]
    NotSquare { len: usize, side: usize },
    #[error("invalid argument: {0}")]
    Invalid(String),
}

/// A feature vector in `[0,1]^d` with its class label.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledExample {
    pub features: Vec<f64>,
    pub label: usize,
    /// Index of the example in the file or generator it came from.
    pub source_id: Option<usize>,
}

/// An ordered, homogeneous collection of labeled examples.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    examples: Vec<LabeledExample>,
    dim: usize,
    num_classes: usize,
}

impl Dataset {
    /// Validates dimensions, feature range and labels.
    pub fn new(
        examples: Vec<LabeledExample>,
        dim: usize,
        num_classes: usize,
    ) -> Result<Self, DataError> {
        for ex in &examples {
            if ex.features.len() != dim {
                return Err(DataError::DimensionMismatch {
                    expected: dim,
                    found: ex.features.len(),
                });
            }
            if ex.label >= num_classes {
                return Err(DataError::LabelOutOfRange {
                    label: ex.label,
                    num_classes,
                });
            }
            if let Some(&value) = ex.features.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(DataError::FeatureOutOfRange { value });
            }
        }
        Ok(Self {
            examples,
            dim,
            num_classes,
        })
    }

    pub fn empty(dim: usize, num_classes: usize) -> Self {
        Self {
            examples: Vec::new(),
            dim,
            num_classes,
        }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn examples(&self) -> &[LabeledExample] {
        &self.examples
    }

    pub fn get(&self, index: usize) -> Option<&LabeledExample> {
        self.examples.get(index)
    }

    pub fn iter(&self) -> std::slice::Iter<'_, LabeledExample> {
        self.examples.iter()
    }

    /// New dataset with the examples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            examples: indices.iter().map(|&i| self.examples[i].clone()).collect(),
            dim: self.dim,
            num_classes: self.num_classes,
        }
    }

    /// Concatenates `other` onto `self`. Both must share `d` and `ℓ`.
    pub fn extend(&mut self, other: Dataset) -> Result<(), DataError> {
        if other.dim != self.dim {
            return Err(DataError::DimensionMismatch {
                expected: self.dim,
                found: other.dim,
            });
        }
        self.examples.extend(other.examples);
        Ok(())
    }

    /// Side of the square image this dataset holds, if `d` is a perfect square.
    pub fn image_side(&self) -> Option<usize> {
        square_side(self.dim)
    }
}

impl<'a> IntoIterator for &'a Dataset {
    type Item = &'a LabeledExample;
    type IntoIter = std::slice::Iter<'a, LabeledExample>;

    fn into_iter(self) -> Self::IntoIter {
        self.examples.iter()
    }
}

fn square_side(len: usize) -> Option<usize> {
    let side = (len as f64).sqrt().round() as usize;
    (side * side == len).then_some(side)
}

fn read_file(path: &Path) -> Result<Vec<u8>, DataError> {
    let io_err = |source| DataError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = File::open(path).map_err(io_err)?;
    let mut bytes = Vec::new();
    if path.extension().is_some_and(|e| e == "gz") {
        GzDecoder::new(BufReader::new(file))
            .read_to_end(&mut bytes)
            .map_err(io_err)?;
    } else {
        BufReader::new(file).read_to_end(&mut bytes).map_err(io_err)?;
    }
    Ok(bytes)
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32, DataError> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| DataError::Truncated {
            path: path.display().to_string(),
            expected: offset + 4,
            found: bytes.len(),
        })
}

/// Raw images of an IDX3 file: (count, rows, cols, pixel bytes).
fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<(usize, usize, usize, Vec<u8>), DataError> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(DataError::BadMagic {
            path: path.display().to_string(),
            expected: IDX_IMAGES_MAGIC,
            found: magic,
        });
    }
    let count = be_u32(bytes, 4, path)? as usize;
    let rows = be_u32(bytes, 8, path)? as usize;
    let cols = be_u32(bytes, 12, path)? as usize;
    let payload = &bytes[16..];
    let expected = count * rows * cols;
    if payload.len() < expected {
        return Err(DataError::Truncated {
            path: path.display().to_string(),
            expected,
            found: payload.len(),
        });
    }
    Ok((count, rows, cols, payload[..expected].to_vec()))
}

fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>, DataError> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(DataError::BadMagic {
            path: path.display().to_string(),
            expected: IDX_LABELS_MAGIC,
            found: magic,
        });
    }
    let count = be_u32(bytes, 4, path)? as usize;
    let payload = &bytes[8..];
    if payload.len() < count {
        return Err(DataError::Truncated {
            path: path.display().to_string(),
            expected: count,
            found: payload.len(),
        });
    }
    Ok(payload[..count].to_vec())
}

/// Loads an IDX image/label file pair (optionally gzip-compressed when the
/// name ends in `.gz`). Pixels are scaled to `[0,1]` by `/255`; the class
/// count is ten or the largest label plus one, whichever is larger.
pub fn load_idx(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
) -> Result<Dataset, DataError> {
    let images_path = images_path.as_ref();
    let labels_path = labels_path.as_ref();
    let (count, rows, cols, pixels) = parse_idx_images(&read_file(images_path)?, images_path)?;
    let labels = parse_idx_labels(&read_file(labels_path)?, labels_path)?;
    if labels.len() != count {
        return Err(DataError::CountMismatch {
            images: count,
            labels: labels.len(),
        });
    }
    let dim = rows * cols;
    let num_classes = labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0).max(10);
    let examples = pixels
        .chunks_exact(dim.max(1))
        .zip(&labels)
        .enumerate()
        .map(|(i, (px, &label))| LabeledExample {
            features: px.iter().map(|&b| f64::from(b) / 255.0).collect(),
            label: label as usize,
            source_id: Some(i),
        })
        .collect();
    Dataset::new(examples, dim, num_classes)
}

/// Serializes a dataset back to IDX bytes (images, labels). Features are
/// quantized with `round(v * 255)`.
pub fn to_idx_bytes(dataset: &Dataset, rows: usize, cols: usize) -> Result<(Vec<u8>, Vec<u8>), DataError> {
    if rows * cols != dataset.dim() {
        return Err(DataError::DimensionMismatch {
            expected: dataset.dim(),
            found: rows * cols,
        });
    }
    let n = dataset.len() as u32;
    let mut images = Vec::with_capacity(16 + dataset.len() * dataset.dim());
    images.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    images.extend_from_slice(&n.to_be_bytes());
    images.extend_from_slice(&(rows as u32).to_be_bytes());
    images.extend_from_slice(&(cols as u32).to_be_bytes());
    let mut labels = Vec::with_capacity(8 + dataset.len());
    labels.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    labels.extend_from_slice(&n.to_be_bytes());
    for ex in dataset {
        images.extend(ex.features.iter().map(|v| (v * 255.0).round() as u8));
        labels.push(ex.label as u8);
    }
    Ok((images, labels))
}

/// `classes` Gaussian blobs around distinct random anchors in `[0,1]^d`,
/// clipped to the unit cube. Labels cycle so every class is represented.
pub fn make_synthetic(d: usize, classes: usize, n: usize, seed: u64) -> Result<Dataset, DataError> {
    if n < classes || classes == 0 {
        return Err(DataError::TooFewExamples { n, classes });
    }
    if d == 0 {
        return Err(DataError::Invalid("dimension must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Anchors are kept at least this far apart (Euclidean), relaxed if the cube is crowded.
    let mut min_sep = 0.35 * (d as f64).sqrt();
    let mut anchors: Vec<Vec<f64>> = Vec::with_capacity(classes);
    let mut attempts = 0usize;
    while anchors.len() < classes {
        let cand: Vec<f64> = (0..d).map(|_| rng.random_range(0.15..0.85)).collect();
        let far = anchors.iter().all(|a| {
            a.iter().zip(&cand).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt() >= min_sep
        });
        if far {
            anchors.push(cand);
        }
        attempts += 1;
        if attempts % 1000 == 0 {
            min_sep *= 0.8;
        }
    }
    let noise = Normal::new(0.0, 0.06).expect("valid std");
    let examples = (0..n)
        .map(|i| {
            let label = i % classes;
            let features = anchors[label]
                .iter()
                .map(|&a| (a + noise.sample(&mut rng)).clamp(0.0, 1.0))
                .collect();
            LabeledExample {
                features,
                label,
                source_id: Some(i),
            }
        })
        .collect();
    Dataset::new(examples, d, classes)
}

/// Deterministic seeded shuffle of `0..len`.
pub fn shuffled_indices(len: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..len).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx
}

/// Splits `dataset` uniformly at random into `n_c` disjoint shards whose sizes
/// differ by at most one.
pub fn partition(dataset: &Dataset, n_c: usize, seed: u64) -> Result<Vec<Dataset>, DataError> {
    if n_c == 0 || n_c > dataset.len() {
        return Err(DataError::TooManyClients {
            len: dataset.len(),
            clients: n_c,
        });
    }
    let order = shuffled_indices(dataset.len(), seed);
    let mut shards: Vec<Vec<usize>> = vec![Vec::with_capacity(dataset.len() / n_c + 1); n_c];
    for (pos, idx) in order.into_iter().enumerate() {
        shards[pos % n_c].push(idx);
    }
    Ok(shards.iter().map(|s| dataset.subset(s)).collect())
}

/// The linear transformations used to move an example across a decision
/// boundary as `alpha` grows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TransformKind {
    /// Zeroes the leading `⌊α·d⌋` entries of a single example.
    Erase,
    /// Upper `⌊α·side⌋` rows from the first input, remaining rows from the second.
    VMix,
    /// Leftmost `⌊α·side⌋` columns from the first input, the rest from the second.
    HMix,
}

impl TransformKind {
    pub fn arity(self) -> usize {
        match self {
            TransformKind::Erase => 1,
            TransformKind::VMix | TransformKind::HMix => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TransformKind::Erase => "erase",
            TransformKind::VMix => "vmix",
            TransformKind::HMix => "hmix",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "erase" | "psi_e" | "e" => Some(TransformKind::Erase),
            "vmix" | "psi_v" | "v" => Some(TransformKind::VMix),
            "hmix" | "psi_h" | "h" => Some(TransformKind::HMix),
            _ => None,
        }
    }
}

/// Applies `kind` with parameter `alpha` to `inputs`.
///
/// For the mixes all inputs must be square images of the same length; the
/// side is inferred from the feature length.
pub fn transform(kind: TransformKind, inputs: &[&[f64]], alpha: f64) -> Result<Vec<f64>, DataError> {
    if inputs.len() != kind.arity() {
        return Err(DataError::WrongArity {
            kind,
            expected: kind.arity(),
            found: inputs.len(),
        });
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(DataError::AlphaOutOfRange(alpha));
    }
    let len = inputs[0].len();
    if let Some(other) = inputs.iter().find(|x| x.len() != len) {
        return Err(DataError::DimensionMismatch {
            expected: len,
            found: other.len(),
        });
    }
    match kind {
        TransformKind::Erase => {
            let cut = ((alpha * len as f64).floor() as usize).min(len);
            let mut out = inputs[0].to_vec();
            out[..cut].iter_mut().for_each(|v| *v = 0.0);
            Ok(out)
        }
        TransformKind::VMix | TransformKind::HMix => {
            let side = square_side(len).ok_or(DataError::NotSquare {
                len,
                side: (len as f64).sqrt() as usize,
            })?;
            let cut = ((alpha * side as f64).floor() as usize).min(side);
            let (first, second) = (inputs[0], inputs[1]);
            let out = (0..len)
                .map(|i| {
                    let (row, col) = (i / side, i % side);
                    let from_first = match kind {
                        TransformKind::VMix => row < cut,
                        _ => col < cut,
                    };
                    if from_first {
                        first[i]
                    } else {
                        second[i]
                    }
                })
                .collect();
            Ok(out)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(len: usize) -> Vec<f64> {
        (0..len).map(|i| (i as f64 + 1.0) / (len as f64 + 1.0)).collect()
    }

    #[test]
    fn erase_zeroes_235_of_784_at_03() {
        let x = ramp(784);
        let y = transform(TransformKind::Erase, &[&x], 0.3).unwrap();
        assert_eq!(y.iter().take_while(|v| **v == 0.0).count(), 235);
        assert_eq!(&y[235..], &x[235..]);
    }

    #[test]
    fn alpha_zero_is_identity_or_second_input() {
        let a = ramp(16);
        let b: Vec<f64> = a.iter().map(|v| 1.0 - v).collect();
        assert_eq!(transform(TransformKind::Erase, &[&a], 0.0).unwrap(), a);
        assert_eq!(transform(TransformKind::VMix, &[&a, &b], 0.0).unwrap(), b);
        assert_eq!(transform(TransformKind::HMix, &[&a, &b], 0.0).unwrap(), b);
    }

    #[test]
    fn self_mix_is_identity() {
        let a = ramp(49);
        for alpha in [0.0, 0.13, 0.5, 0.99, 1.0] {
            assert_eq!(transform(TransformKind::VMix, &[&a, &a], alpha).unwrap(), a);
            assert_eq!(transform(TransformKind::HMix, &[&a, &a], alpha).unwrap(), a);
        }
    }

    #[test]
    fn vmix_takes_rows_hmix_takes_columns() {
        let ones = vec![1.0; 16];
        let zeros = vec![0.0; 16];
        let v = transform(TransformKind::VMix, &[&ones, &zeros], 0.5).unwrap();
        assert_eq!(&v[..8], &[1.0; 8]);
        assert_eq!(&v[8..], &[0.0; 8]);
        let h = transform(TransformKind::HMix, &[&ones, &zeros], 0.5).unwrap();
        for row in h.chunks(4) {
            assert_eq!(row, &[1.0, 1.0, 0.0, 0.0]);
        }
    }

    #[test]
    fn transform_errors() {
        let a = ramp(16);
        assert!(matches!(
            transform(TransformKind::VMix, &[&a], 0.1),
            Err(DataError::WrongArity { .. })
        ));
        assert!(matches!(
            transform(TransformKind::Erase, &[&a], 1.5),
            Err(DataError::AlphaOutOfRange(_))
        ));
        let odd = ramp(10);
        assert!(matches!(
            transform(TransformKind::HMix, &[&odd, &odd], 0.1),
            Err(DataError::NotSquare { .. })
        ));
    }

    #[test]
    fn synthetic_is_deterministic_and_clipped() {
        let a = make_synthetic(4, 2, 100, 1).unwrap();
        let b = make_synthetic(4, 2, 100, 1).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().flat_map(|e| &e.features).all(|v| (0.0..=1.0).contains(v)));
        assert!(matches!(make_synthetic(4, 5, 3, 1), Err(DataError::TooFewExamples { .. })));
    }

    #[test]
    fn partition_single_client_keeps_everything() {
        let ds = make_synthetic(3, 2, 11, 4).unwrap();
        let shards = partition(&ds, 1, 9).unwrap();
        assert_eq!(shards.len(), 1);
        let mut ids: Vec<_> = shards[0].iter().map(|e| e.source_id).collect();
        ids.sort();
        assert_eq!(ids, ds.iter().map(|e| e.source_id).collect::<Vec<_>>());
        assert!(partition(&ds, 12, 0).is_err());
    }

    #[test]
    fn partition_70000_into_ten_shards_of_7000() {
        let examples = (0..70_000)
            .map(|i| LabeledExample {
                features: vec![0.0],
                label: i % 10,
                source_id: Some(i),
            })
            .collect();
        let ds = Dataset::new(examples, 1, 10).unwrap();
        let shards = partition(&ds, 10, 3).unwrap();
        assert!(shards.iter().all(|s| s.len() == 7000));
    }

    #[test]
    fn dataset_rejects_bad_examples() {
        let bad = LabeledExample {
            features: vec![1.2],
            label: 0,
            source_id: None,
        };
        assert!(matches!(
            Dataset::new(vec![bad], 1, 2),
            Err(DataError::FeatureOutOfRange { .. })
        ));
        let bad_label = LabeledExample {
            features: vec![0.2],
            label: 3,
            source_id: None,
        };
        assert!(matches!(
            Dataset::new(vec![bad_label], 1, 2),
            Err(DataError::LabelOutOfRange { .. })
        ));
    }
}
