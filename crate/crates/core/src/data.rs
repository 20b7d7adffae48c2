//! Dataset ingestion and batching: IDX images/labels (big-endian, magics
//! 2051/2049), the CIFAR-10 binary format (3073-byte records, channel-major
//! RGB planes), seeded train/validation splitting, and per-epoch shuffled
//! batch iteration.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng::{stream_rng, STREAM_SHUFFLE, STREAM_SPLIT};
use crate::scalar::{fl, Scalar};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 2051;
pub const IDX_LABELS_MAGIC: u32 = 2049;
pub const CIFAR_RECORD_BYTES: usize = 3073;
pub const NUM_CLASSES: usize = 10;

/// An in-memory dataset: images `[N, C, H, W]` scaled to `[0, 1]` and class
/// indices in `[0, 10)`. Immutable after load.
#[derive(Debug, Clone)]
pub struct Dataset<T> {
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
    pub name: String,
    pub split: String,
}

impl<T: Scalar> Dataset<T> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_dims(&self) -> (usize, usize, usize) {
        (self.images.dim(1), self.images.dim(2), self.images.dim(3))
    }

    /// Copies the rows at `indices` into a new dataset (used by splits,
    /// subsets, and batch assembly).
    pub fn gather(&self, indices: &[usize], split: &str) -> Dataset<T> {
        let (c, h, w) = self.image_dims();
        let row = c * h * w;
        let mut data = Vec::with_capacity(indices.len() * row);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * row..(i + 1) * row]);
            labels.push(self.labels[i]);
        }
        Dataset {
            images: Tensor::from_vec(vec![indices.len(), c, h, w], data)
                .expect("gather preserves row shape"),
            labels,
            name: self.name.clone(),
            split: split.to_string(),
        }
    }

    /// First `limit` rows (dataset order), or the whole set if it is smaller.
    pub fn take(&self, limit: usize) -> Dataset<T> {
        let count = limit.min(self.len());
        let indices: Vec<usize> = (0..count).collect();
        self.gather(&indices, &self.split)
    }
}

fn read_u32_be(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    let end = offset + 4;
    if bytes.len() < end {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            needed: end,
            available: bytes.len(),
        });
    }
    Ok(u32::from_be_bytes([
        bytes[offset],
        bytes[offset + 1],
        bytes[offset + 2],
        bytes[offset + 3],
    ]))
}

/// Parses a pair of IDX files (images magic 2051, labels magic 2049) into a
/// dataset with pixels divided by 255. Wrong magic, truncation, and an
/// image/label count mismatch are distinct errors.
pub fn load_mnist_idx<T: Scalar>(images_path: &Path, labels_path: &Path) -> Result<Dataset<T>> {
    let image_bytes = fs::read(images_path)?;
    let magic = read_u32_be(&image_bytes, 0, images_path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::IdxWrongMagic {
            path: images_path.to_path_buf(),
            expected: IDX_IMAGES_MAGIC,
            found: magic,
        });
    }
    let count = read_u32_be(&image_bytes, 4, images_path)? as usize;
    let rows = read_u32_be(&image_bytes, 8, images_path)? as usize;
    let cols = read_u32_be(&image_bytes, 12, images_path)? as usize;
    let needed = 16 + count * rows * cols;
    if image_bytes.len() < needed {
        return Err(Error::Truncated {
            path: images_path.to_path_buf(),
            needed,
            available: image_bytes.len(),
        });
    }

    let label_bytes = fs::read(labels_path)?;
    let magic = read_u32_be(&label_bytes, 0, labels_path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::IdxWrongMagic {
            path: labels_path.to_path_buf(),
            expected: IDX_LABELS_MAGIC,
            found: magic,
        });
    }
    let label_count = read_u32_be(&label_bytes, 4, labels_path)? as usize;
    if label_bytes.len() < 8 + label_count {
        return Err(Error::Truncated {
            path: labels_path.to_path_buf(),
            needed: 8 + label_count,
            available: label_bytes.len(),
        });
    }
    if label_count != count {
        return Err(Error::CountMismatch {
            images: count,
            labels: label_count,
        });
    }

    let data: Vec<T> = image_bytes[16..needed]
        .iter()
        .map(|&b| fl::<T>(b as f64 / 255.0))
        .collect();
    let mut labels = Vec::with_capacity(count);
    for (row, &b) in label_bytes[8..8 + label_count].iter().enumerate() {
        let label = b as usize;
        if label >= NUM_CLASSES {
            return Err(Error::LabelOutOfRange {
                row,
                label,
                classes: NUM_CLASSES,
            });
        }
        labels.push(label);
    }
    Ok(Dataset {
        images: Tensor::from_vec(vec![count, 1, rows, cols], data)?,
        labels,
        name: "mnist".into(),
        split: String::new(),
    })
}

/// Parses CIFAR-10 binary batch files in the given order. Each record is one
/// label byte followed by 3072 pixel bytes (channel-major R, G, B planes of
/// 1024 bytes each); pixels are divided by 255. An empty file contributes
/// zero records with a warning rather than an error.
pub fn load_cifar10_binary<T: Scalar>(paths: &[PathBuf]) -> Result<Dataset<T>> {
    let mut data: Vec<T> = Vec::new();
    let mut labels: Vec<usize> = Vec::new();
    for path in paths {
        let bytes = fs::read(path)?;
        if bytes.is_empty() {
            eprintln!("warning: {} is empty, contributing 0 records", path.display());
            continue;
        }
        if bytes.len() % CIFAR_RECORD_BYTES != 0 {
            return Err(Error::BadRecordSize {
                path: path.clone(),
                size: bytes.len(),
                record: CIFAR_RECORD_BYTES,
            });
        }
        for chunk in bytes.chunks_exact(CIFAR_RECORD_BYTES) {
            let label = chunk[0] as usize;
            if label >= NUM_CLASSES {
                return Err(Error::LabelOutOfRange {
                    row: labels.len(),
                    label,
                    classes: NUM_CLASSES,
                });
            }
            labels.push(label);
            data.extend(chunk[1..].iter().map(|&b| fl::<T>(b as f64 / 255.0)));
        }
    }
    let count = labels.len();
    Ok(Dataset {
        images: Tensor::from_vec(vec![count, 3, 32, 32], data)?,
        labels,
        name: "cifar10".into(),
        split: String::new(),
    })
}

/// Seeded permutation followed by a partition: the first `N - round(N*f)`
/// permuted rows become the training split, the remainder validation.
/// Disjoint and exhaustive by construction.
pub fn split_train_val<T: Scalar>(
    dataset: &Dataset<T>,
    val_fraction: f64,
    seed: u64,
) -> Result<(Dataset<T>, Dataset<T>)> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::InvalidArg {
            op: "split_train_val",
            msg: format!("val_fraction must lie in (0, 1), got {val_fraction}"),
        });
    }
    let n = dataset.len();
    let val_count = ((n as f64) * val_fraction).round() as usize;
    let mut indices: Vec<usize> = (0..n).collect();
    indices.shuffle(&mut stream_rng(seed, STREAM_SPLIT));
    let train_idx = &indices[..n - val_count];
    let val_idx = &indices[n - val_count..];
    Ok((
        dataset.gather(train_idx, "train"),
        dataset.gather(val_idx, "val"),
    ))
}

/// Seeded batch iteration: batch size plus the seed that drives each epoch's
/// fresh shuffle.
#[derive(Debug, Clone)]
pub struct BatchPlan {
    pub seed: u64,
    pub batch_size: usize,
}

impl BatchPlan {
    /// The row permutation used for one epoch. Derived from
    /// `stream_rng(seed + epoch, STREAM_SHUFFLE)` so every epoch reshuffles
    /// independently and reproducibly.
    pub fn epoch_permutation(&self, n: usize, epoch: usize) -> Vec<usize> {
        let mut indices: Vec<usize> = (0..n).collect();
        indices.shuffle(&mut stream_rng(
            self.seed.wrapping_add(epoch as u64),
            STREAM_SHUFFLE,
        ));
        indices
    }
}

/// All batches of one epoch, in delivery order. The final partial batch is
/// included.
pub fn batches<T: Scalar>(
    dataset: &Dataset<T>,
    plan: &BatchPlan,
    epoch: usize,
) -> Result<Vec<(Tensor<T>, Vec<usize>)>> {
    if plan.batch_size == 0 {
        return Err(Error::InvalidArg {
            op: "batches",
            msg: "batch size must be at least 1".into(),
        });
    }
    let order = plan.epoch_permutation(dataset.len(), epoch);
    let mut out = Vec::with_capacity(order.len().div_ceil(plan.batch_size));
    for chunk in order.chunks(plan.batch_size) {
        let piece = dataset.gather(chunk, &dataset.split);
        out.push((piece.images, piece.labels));
    }
    Ok(out)
}

/// Writes images in IDX format (magic 2051). Used by the self-check
/// round-trip oracle and by tests.
pub fn write_idx_images(path: &Path, images: &[u8], count: usize, rows: usize, cols: usize) -> Result<()> {
    let mut bytes = Vec::with_capacity(16 + images.len());
    bytes.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    bytes.extend_from_slice(&(count as u32).to_be_bytes());
    bytes.extend_from_slice(&(rows as u32).to_be_bytes());
    bytes.extend_from_slice(&(cols as u32).to_be_bytes());
    bytes.extend_from_slice(images);
    fs::write(path, bytes)?;
    Ok(())
}

/// Writes labels in IDX format (magic 2049).
pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<()> {
    let mut bytes = Vec::with_capacity(8 + labels.len());
    bytes.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    bytes.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    bytes.extend_from_slice(labels);
    fs::write(path, bytes)?;
    Ok(())
}

/// Writes CIFAR-10 binary records: per record, one label byte then 3072
/// channel-major pixel bytes.
pub fn write_cifar_batch(path: &Path, records: &[(u8, Vec<u8>)]) -> Result<()> {
    let mut bytes = Vec::with_capacity(records.len() * CIFAR_RECORD_BYTES);
    for (label, pixels) in records {
        assert_eq!(pixels.len(), CIFAR_RECORD_BYTES - 1);
        bytes.push(*label);
        bytes.extend_from_slice(pixels);
    }
    fs::write(path, bytes)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn synthetic_dataset(n: usize) -> Dataset<f64> {
        let data: Vec<f64> = (0..n * 4).map(|i| i as f64 / (n * 4) as f64).collect();
        Dataset {
            images: Tensor::from_vec(vec![n, 1, 2, 2], data).unwrap(),
            labels: (0..n).map(|i| i % 10).collect(),
            name: "synthetic".into(),
            split: "train".into(),
        }
    }

    #[test]
    fn idx_round_trip_recovers_exact_pixel_bytes() {
        let dir = tempdir().unwrap();
        let images_path = dir.path().join("images");
        let labels_path = dir.path().join("labels");
        // Two 3x2 images with a ramp of pixel values.
        let pixels: Vec<u8> = (0u8..12).map(|v| v * 20).collect();
        write_idx_images(&images_path, &pixels, 2, 3, 2).unwrap();
        write_idx_labels(&labels_path, &[4, 9]).unwrap();

        let ds = load_mnist_idx::<f64>(&images_path, &labels_path).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.images.shape(), &[2, 1, 3, 2]);
        assert_eq!(ds.labels, vec![4, 9]);
        for (i, &p) in pixels.iter().enumerate() {
            assert_eq!(ds.images.data()[i], p as f64 / 255.0);
        }
    }

    #[test]
    fn idx_wrong_magic_truncation_and_count_mismatch_are_distinct() {
        let dir = tempdir().unwrap();
        let images_path = dir.path().join("images");
        let labels_path = dir.path().join("labels");
        write_idx_images(&images_path, &[0u8; 4], 1, 2, 2).unwrap();
        write_idx_labels(&labels_path, &[1]).unwrap();

        // Wrong magic: labels file offered as images.
        assert!(matches!(
            load_mnist_idx::<f64>(&labels_path, &labels_path),
            Err(Error::IdxWrongMagic { .. })
        ));

        // Truncated image payload.
        let truncated = dir.path().join("truncated");
        let mut bytes = std::fs::read(&images_path).unwrap();
        bytes.truncate(bytes.len() - 2);
        std::fs::write(&truncated, bytes).unwrap();
        assert!(matches!(
            load_mnist_idx::<f64>(&truncated, &labels_path),
            Err(Error::Truncated { .. })
        ));

        // Count mismatch.
        let two_labels = dir.path().join("two_labels");
        write_idx_labels(&two_labels, &[1, 2]).unwrap();
        assert!(matches!(
            load_mnist_idx::<f64>(&images_path, &two_labels),
            Err(Error::CountMismatch { images: 1, labels: 2 })
        ));
    }

    #[test]
    fn cifar_round_trip_single_record() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("batch.bin");
        let pixels: Vec<u8> = (0..3072).map(|i| (i % 251) as u8).collect();
        write_cifar_batch(&path, &[(7, pixels.clone())]).unwrap();

        let ds = load_cifar10_binary::<f64>(&[path]).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.labels, vec![7]);
        assert_eq!(ds.images.shape(), &[1, 3, 32, 32]);
        for (i, &p) in pixels.iter().enumerate() {
            assert_eq!(ds.images.data()[i], p as f64 / 255.0);
        }
    }

    #[test]
    fn cifar_rejects_bad_record_size_and_label() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.bin");
        std::fs::write(&path, vec![0u8; 100]).unwrap();
        assert!(matches!(
            load_cifar10_binary::<f64>(std::slice::from_ref(&path)),
            Err(Error::BadRecordSize { size: 100, .. })
        ));

        let bad_label = dir.path().join("bad_label.bin");
        write_cifar_batch(&bad_label, &[(11, vec![0u8; 3072])]).unwrap();
        assert!(matches!(
            load_cifar10_binary::<f64>(&[bad_label]),
            Err(Error::LabelOutOfRange { label: 11, .. })
        ));
    }

    #[test]
    fn cifar_empty_file_is_a_warning_not_an_error() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("empty.bin");
        std::fs::write(&path, Vec::<u8>::new()).unwrap();
        let ds = load_cifar10_binary::<f64>(&[path]).unwrap();
        assert_eq!(ds.len(), 0);
    }

    #[test]
    fn split_fractions_and_disjointness() {
        let big = synthetic_dataset(50_000);
        let (btrain, bval) = split_train_val(&big, 0.1, 7).unwrap();
        assert_eq!(btrain.len(), 45_000);
        assert_eq!(bval.len(), 5_000);

        let ds = synthetic_dataset(50);
        let (train, val) = split_train_val(&ds, 0.1, 7).unwrap();
        assert_eq!(train.len(), 45);
        assert_eq!(val.len(), 5);

        // Same seed reproduces the split; a different seed changes it.
        let (train2, _) = split_train_val(&ds, 0.1, 7).unwrap();
        assert_eq!(train.images.data(), train2.images.data());
        let (train3, _) = split_train_val(&ds, 0.1, 8).unwrap();
        assert_ne!(train.images.data(), train3.images.data());

        // Union is the original multiset of rows; the split is exhaustive.
        let mut rows: Vec<Vec<u64>> = Vec::new();
        for piece in [&train, &val] {
            let (c, h, w) = piece.image_dims();
            let row = c * h * w;
            for i in 0..piece.len() {
                rows.push(
                    piece.images.data()[i * row..(i + 1) * row]
                        .iter()
                        .map(|v| v.to_bits())
                        .collect(),
                );
            }
        }
        rows.sort();
        rows.dedup();
        assert_eq!(rows.len(), 50);
    }

    #[test]
    fn batch_sizes_cover_the_dataset() {
        let ds = synthetic_dataset(10);
        let plan = BatchPlan {
            seed: 3,
            batch_size: 4,
        };
        let got = batches(&ds, &plan, 0).unwrap();
        let sizes: Vec<usize> = got.iter().map(|(_, l)| l.len()).collect();
        assert_eq!(sizes, vec![4, 4, 2]);

        // Concatenated batches are a permutation of the dataset's rows.
        let mut seen: Vec<u64> = got
            .iter()
            .flat_map(|(imgs, _)| imgs.data().iter().map(|v| v.to_bits()))
            .collect();
        seen.sort();
        let mut want: Vec<u64> = ds.images.data().iter().map(|v| v.to_bits()).collect();
        want.sort();
        assert_eq!(seen, want);
    }

    #[test]
    fn batches_are_deterministic_per_epoch_and_differ_across_epochs() {
        let ds = synthetic_dataset(32);
        let plan = BatchPlan {
            seed: 5,
            batch_size: 8,
        };
        let a = batches(&ds, &plan, 2).unwrap();
        let b = batches(&ds, &plan, 2).unwrap();
        for ((xa, la), (xb, lb)) in a.iter().zip(&b) {
            assert_eq!(xa.data(), xb.data());
            assert_eq!(la, lb);
        }
        let c = batches(&ds, &plan, 3).unwrap();
        assert_ne!(
            a[0].0.data(),
            c[0].0.data(),
            "different epochs should reshuffle"
        );
    }
}
