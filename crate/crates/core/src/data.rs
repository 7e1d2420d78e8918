//! Dataset ingestion, synthetic task generation, label corruption, and
//! subsetting.
//!
//! A [`Dataset`] is immutable after construction and stores examples in flat
//! arrays: `f32` inputs (row-major, `n * d`), class labels, the labels as
//! originally loaded, stable ids, and corruption flags. Ids survive
//! subsetting, which is what lets score tables computed on the full dataset
//! address examples inside any pruned subset.
//!
//! Supported sources: IDX image/label pairs (big-endian headers), CIFAR
//! binary batches (3073-byte records), seeded synthetic Gaussian-mixture
//! tasks, and the native `.ddset` snapshot container.
//!
//! # `.ddset` container layout
//!
//! All multi-byte values are little-endian; the JSON header is UTF-8.
//!
//! ```text
//! offset 0: magic "DDSET\x00\x31\x0a" (8 bytes)
//! u32: header byte length H
//! H bytes: JSON header {name, n, input_dim, classes, image?, norm_mean, norm_std}
//! n * input_dim * 4 bytes: inputs, f32, row-major
//! n * 8 bytes: ids, u64
//! n * 4 bytes: labels, u32
//! n * 4 bytes: original labels, u32
//! n bytes: corrupted flags, 0 or 1
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::ImageShape;
use crate::seeds::{self, tag};

/// Errors from loading, generating, or transforming datasets.
#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("format error in {path} at byte {offset}: {message}")]
    Format {
        path: PathBuf,
        offset: u64,
        message: String,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("unknown example id {0}")]
    UnknownId(u64),
}

impl DataError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        DataError::Io {
            path: path.to_owned(),
            source,
        }
    }
}

/// Read-only view of one example.
#[derive(Clone, Copy, Debug)]
pub struct ExampleRef<'a> {
    pub id: u64,
    pub input: &'a [f32],
    pub label: usize,
    pub original_label: usize,
    pub corrupted: bool,
}

/// Immutable labeled dataset in flat storage.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    name: String,
    input_dim: usize,
    classes: usize,
    image: Option<ImageShape>,
    /// Per-feature normalization already applied to `inputs` (mean, std).
    norm_mean: Vec<f32>,
    norm_std: Vec<f32>,
    inputs: Vec<f32>,
    ids: Vec<u64>,
    labels: Vec<u32>,
    original_labels: Vec<u32>,
    corrupted: Vec<bool>,
}

impl Dataset {
    /// Build a dataset from parallel arrays, validating the shape contract.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        name: String,
        input_dim: usize,
        classes: usize,
        image: Option<ImageShape>,
        norm_mean: Vec<f32>,
        norm_std: Vec<f32>,
        inputs: Vec<f32>,
        ids: Vec<u64>,
        labels: Vec<u32>,
        original_labels: Vec<u32>,
        corrupted: Vec<bool>,
    ) -> Result<Self, DataError> {
        if input_dim == 0 {
            return Err(DataError::Config("input_dim must be positive".into()));
        }
        if classes < 2 {
            return Err(DataError::Config("need at least two classes".into()));
        }
        let n = ids.len();
        if inputs.len() != n * input_dim {
            return Err(DataError::Config(format!(
                "inputs hold {} values, expected {} ({} examples x {} features)",
                inputs.len(),
                n * input_dim,
                n,
                input_dim
            )));
        }
        if labels.len() != n || original_labels.len() != n || corrupted.len() != n {
            return Err(DataError::Config(
                "ids, labels, original labels, and flags must have equal length".into(),
            ));
        }
        if norm_mean.len() != input_dim || norm_std.len() != input_dim {
            return Err(DataError::Config(
                "normalization stats must have one entry per feature".into(),
            ));
        }
        if let Some(img) = &image {
            if img.len() != input_dim {
                return Err(DataError::Config(format!(
                    "image shape {}x{}x{} does not match input_dim {}",
                    img.height, img.width, img.channels, input_dim
                )));
            }
        }
        if labels.iter().chain(&original_labels).any(|&l| l as usize >= classes) {
            return Err(DataError::Config("label out of class range".into()));
        }
        let mut seen = ids.clone();
        seen.sort_unstable();
        if seen.windows(2).any(|w| w[0] == w[1]) {
            return Err(DataError::Config("example ids must be unique".into()));
        }
        for (i, (&l, &o)) in labels.iter().zip(&original_labels).enumerate() {
            if corrupted[i] != (l != o) {
                return Err(DataError::Config(format!(
                    "corrupted flag of example {} disagrees with its labels",
                    ids[i]
                )));
            }
        }
        Ok(Dataset {
            name,
            input_dim,
            classes,
            image,
            norm_mean,
            norm_std,
            inputs,
            ids,
            labels,
            original_labels,
            corrupted,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn image(&self) -> Option<ImageShape> {
        self.image
    }

    pub fn input(&self, index: usize) -> &[f32] {
        &self.inputs[index * self.input_dim..(index + 1) * self.input_dim]
    }

    pub fn label(&self, index: usize) -> usize {
        self.labels[index] as usize
    }

    pub fn original_label(&self, index: usize) -> usize {
        self.original_labels[index] as usize
    }

    pub fn id(&self, index: usize) -> u64 {
        self.ids[index]
    }

    pub fn is_corrupted(&self, index: usize) -> bool {
        self.corrupted[index]
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn example(&self, index: usize) -> ExampleRef<'_> {
        ExampleRef {
            id: self.ids[index],
            input: self.input(index),
            label: self.label(index),
            original_label: self.original_label(index),
            corrupted: self.corrupted[index],
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = ExampleRef<'_>> + '_ {
        (0..self.len()).map(move |i| self.example(i))
    }

    /// Count of examples whose label differs from its original.
    pub fn corrupted_count(&self) -> usize {
        self.corrupted.iter().filter(|&&c| c).count()
    }

    /// Stable content digest over everything that affects training.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update((self.len() as u64).to_le_bytes());
        h.update((self.input_dim as u64).to_le_bytes());
        h.update((self.classes as u64).to_le_bytes());
        for v in &self.inputs {
            h.update(v.to_le_bytes());
        }
        for v in &self.ids {
            h.update(v.to_le_bytes());
        }
        for v in &self.labels {
            h.update(v.to_le_bytes());
        }
        let out = h.finalize();
        let mut s = String::with_capacity(16);
        for b in &out[..8] {
            s.push_str(&format!("{b:02x}"));
        }
        s
    }
}

/// Seeded Gaussian-mixture classification task.
///
/// Each class owns `clusters_per_class` centers drawn from
/// `N(0, separation^2 I_d)`; samples add `N(0, cluster_std^2 I_d)` noise
/// around a uniformly chosen center of their class. With probability
/// `label_noise` a sample's label is resampled uniformly over all classes —
/// that is distribution-level noise baked into the task (the `corrupted`
/// flag stays false), unlike [`corrupt_labels`] which flags its edits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticTaskSpec {
    pub classes: usize,
    pub input_dim: usize,
    pub clusters_per_class: usize,
    pub separation: f64,
    pub cluster_std: f64,
    pub label_noise: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<ImageShape>,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        SyntheticTaskSpec {
            classes: 10,
            input_dim: 36,
            clusters_per_class: 6,
            separation: 1.0,
            cluster_std: 1.0,
            label_noise: 0.0,
            n_train: 10_000,
            n_test: 2_000,
            seed: 0,
            image: None,
        }
    }
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.classes < 2 {
            return Err(DataError::Config("need at least two classes".into()));
        }
        if self.input_dim == 0 || self.clusters_per_class == 0 {
            return Err(DataError::Config(
                "input_dim and clusters_per_class must be positive".into(),
            ));
        }
        if self.n_train == 0 {
            return Err(DataError::Config("n_train must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.label_noise) {
            return Err(DataError::Config(format!(
                "label_noise {} outside [0, 1]",
                self.label_noise
            )));
        }
        if self.separation < 0.0 || self.cluster_std < 0.0 {
            return Err(DataError::Config(
                "separation and cluster_std must be non-negative".into(),
            ));
        }
        if let Some(img) = &self.image {
            if img.len() != self.input_dim {
                return Err(DataError::Config(format!(
                    "image shape {}x{}x{} does not match input_dim {}",
                    img.height, img.width, img.channels, self.input_dim
                )));
            }
        }
        Ok(())
    }
}

/// Generate matched train/test splits of a synthetic task.
///
/// Deterministic per spec (including its seed). Train ids are
/// `0..n_train`; test ids continue after them so the two splits never
/// collide.
pub fn generate_synthetic(spec: &SyntheticTaskSpec) -> Result<(Dataset, Dataset), DataError> {
    spec.validate()?;
    let mut rng = seeds::rng(seeds::derive(spec.seed, tag::SYNTHETIC, 0));
    let d = spec.input_dim;

    // Cluster centers, drawn once and shared by both splits.
    let n_centers = spec.classes * spec.clusters_per_class;
    let mut centers = vec![0.0f64; n_centers * d];
    for v in centers.iter_mut() {
        *v = rng.sample::<f64, _>(rand_distr::StandardNormal) * spec.separation;
    }

    let sample_split = |n: usize, id_base: u64, rng: &mut rand_chacha::ChaCha8Rng| {
        let mut inputs = Vec::with_capacity(n * d);
        let mut labels = Vec::with_capacity(n);
        let mut originals = Vec::with_capacity(n);
        let ids: Vec<u64> = (0..n as u64).map(|i| id_base + i).collect();
        for _ in 0..n {
            let class = rng.random_range(0..spec.classes);
            let cluster = rng.random_range(0..spec.clusters_per_class);
            let center = &centers[(class * spec.clusters_per_class + cluster) * d..][..d];
            for &c in center {
                let noise: f64 = rng.sample(rand_distr::StandardNormal);
                inputs.push((c + noise * spec.cluster_std) as f32);
            }
            let label = if spec.label_noise > 0.0 && rng.random::<f64>() < spec.label_noise {
                rng.random_range(0..spec.classes)
            } else {
                class
            };
            labels.push(label as u32);
            // Bayes noise is part of the task definition, not corruption.
            originals.push(label as u32);
        }
        (inputs, ids, labels, originals)
    };

    let (tr_in, tr_ids, tr_lab, tr_orig) = sample_split(spec.n_train, 0, &mut rng);
    let (te_in, te_ids, te_lab, te_orig) = sample_split(spec.n_test, spec.n_train as u64, &mut rng);

    let identity_mean = vec![0.0f32; d];
    let identity_std = vec![1.0f32; d];
    let train = Dataset::from_parts(
        "synthetic-train".into(),
        d,
        spec.classes,
        spec.image,
        identity_mean.clone(),
        identity_std.clone(),
        tr_in,
        tr_ids,
        tr_lab.clone(),
        tr_orig,
        vec![false; spec.n_train],
    )?;
    let test = Dataset::from_parts(
        "synthetic-test".into(),
        d,
        spec.classes,
        spec.image,
        identity_mean,
        identity_std,
        te_in,
        te_ids,
        te_lab,
        te_orig,
        vec![false; spec.n_test],
    )?;
    Ok((train, test))
}

/// Corrupt labels by permutation: exactly `round(fraction * N)` examples are
/// chosen uniformly, and their labels are rearranged among themselves by a
/// uniform random permutation, leaving the overall label histogram intact.
///
/// The `corrupted` flag is set only where the label actually changed
/// (permutation fixed points stay clean).
pub fn corrupt_labels(dataset: &Dataset, fraction: f64, seed: u64) -> Result<Dataset, DataError> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(DataError::Config(format!(
            "corruption fraction {fraction} outside [0, 1]"
        )));
    }
    let n = dataset.len();
    let n_pick = (fraction * n as f64).round() as usize;
    if fraction > 0.0 && n_pick < 2 {
        return Err(DataError::Config(format!(
            "corruption fraction {fraction} selects {n_pick} of {n} examples; need at least 2"
        )));
    }
    let mut out = dataset.clone();
    if n_pick == 0 {
        return Ok(out);
    }
    let mut rng = seeds::rng(seeds::derive(seed, tag::CORRUPTION, 0));
    let picked = rand::seq::index::sample(&mut rng, n, n_pick).into_vec();
    let mut moved: Vec<u32> = picked.iter().map(|&i| dataset.labels[i]).collect();
    moved.shuffle(&mut rng);
    for (&idx, &new_label) in picked.iter().zip(&moved) {
        out.labels[idx] = new_label;
        out.corrupted[idx] = new_label != out.original_labels[idx];
    }
    Ok(out)
}

/// Restrict a dataset to the given ids, preserving the dataset's own order.
///
/// Ids, labels, flags, and normalization metadata carry over unchanged; every
/// requested id must exist.
pub fn take_subset(dataset: &Dataset, keep: &[u64]) -> Result<Dataset, DataError> {
    use std::collections::HashSet;
    let want: HashSet<u64> = keep.iter().copied().collect();
    let have: HashSet<u64> = dataset.ids.iter().copied().collect();
    if let Some(&missing) = want.iter().find(|id| !have.contains(id)) {
        return Err(DataError::UnknownId(missing));
    }
    let d = dataset.input_dim;
    let mut inputs = Vec::new();
    let mut ids = Vec::new();
    let mut labels = Vec::new();
    let mut originals = Vec::new();
    let mut corrupted = Vec::new();
    for i in 0..dataset.len() {
        if want.contains(&dataset.ids[i]) {
            inputs.extend_from_slice(dataset.input(i));
            ids.push(dataset.ids[i]);
            labels.push(dataset.labels[i]);
            originals.push(dataset.original_labels[i]);
            corrupted.push(dataset.corrupted[i]);
        }
    }
    Ok(Dataset {
        name: dataset.name.clone(),
        input_dim: d,
        classes: dataset.classes,
        image: dataset.image,
        norm_mean: dataset.norm_mean.clone(),
        norm_std: dataset.norm_std.clone(),
        inputs,
        ids,
        labels,
        original_labels: originals,
        corrupted,
    })
}

// ---------------------------------------------------------------------------
// IDX format (big-endian headers, magic 0x00000803 images / 0x00000801 labels)
// ---------------------------------------------------------------------------

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_exact_at(
    r: &mut impl Read,
    buf: &mut [u8],
    path: &Path,
    offset: u64,
    what: &str,
) -> Result<(), DataError> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            DataError::Format {
                path: path.to_owned(),
                offset,
                message: format!("truncated while reading {what}"),
            }
        } else {
            DataError::io(path, e)
        }
    })
}

fn read_u32_be(r: &mut impl Read, path: &Path, offset: u64, what: &str) -> Result<u32, DataError> {
    let mut b = [0u8; 4];
    read_exact_at(r, &mut b, path, offset, what)?;
    Ok(u32::from_be_bytes(b))
}

/// Load an IDX image/label pair (MNIST container format).
///
/// Pixels are scaled to `[0, 1]` and then standardized by the global
/// (single-channel) mean and std of the loaded set. Ids follow file order.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset, DataError> {
    // Images file: magic, count, rows, cols, then count*rows*cols bytes.
    let mut ir = BufReader::new(File::open(images_path).map_err(|e| DataError::io(images_path, e))?);
    let magic = read_u32_be(&mut ir, images_path, 0, "magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(DataError::Format {
            path: images_path.to_owned(),
            offset: 0,
            message: format!("magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"),
        });
    }
    let count = read_u32_be(&mut ir, images_path, 4, "image count")? as usize;
    let rows = read_u32_be(&mut ir, images_path, 8, "row count")? as usize;
    let cols = read_u32_be(&mut ir, images_path, 12, "column count")? as usize;
    if rows == 0 || cols == 0 {
        return Err(DataError::Format {
            path: images_path.to_owned(),
            offset: 8,
            message: "zero image dimensions".into(),
        });
    }
    let mut pixels = vec![0u8; count * rows * cols];
    read_exact_at(&mut ir, &mut pixels, images_path, 16, "pixel data")?;

    // Labels file: magic, count, then count bytes.
    let mut lr = BufReader::new(File::open(labels_path).map_err(|e| DataError::io(labels_path, e))?);
    let magic = read_u32_be(&mut lr, labels_path, 0, "magic")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(DataError::Format {
            path: labels_path.to_owned(),
            offset: 0,
            message: format!("magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"),
        });
    }
    let label_count = read_u32_be(&mut lr, labels_path, 4, "label count")? as usize;
    if label_count != count {
        return Err(DataError::Format {
            path: labels_path.to_owned(),
            offset: 4,
            message: format!("{label_count} labels for {count} images"),
        });
    }
    let mut raw_labels = vec![0u8; count];
    read_exact_at(&mut lr, &mut raw_labels, labels_path, 8, "label data")?;

    let d = rows * cols;
    let mut inputs: Vec<f32> = pixels.iter().map(|&b| b as f32 / 255.0).collect();
    let classes = raw_labels.iter().copied().max().unwrap_or(0) as usize + 1;
    let classes = classes.max(2);

    // Single-channel standardization over the loaded set.
    let n_px = inputs.len().max(1);
    let mean = (inputs.iter().map(|&v| v as f64).sum::<f64>() / n_px as f64) as f32;
    let var = inputs
        .iter()
        .map(|&v| ((v - mean) as f64).powi(2))
        .sum::<f64>()
        / n_px as f64;
    let std = (var.sqrt() as f32).max(1e-8);
    for v in inputs.iter_mut() {
        *v = (*v - mean) / std;
    }

    let labels: Vec<u32> = raw_labels.iter().map(|&b| b as u32).collect();
    Dataset::from_parts(
        images_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "idx".into()),
        d,
        classes,
        Some(ImageShape {
            height: rows,
            width: cols,
            channels: 1,
        }),
        vec![mean; d],
        vec![std; d],
        inputs,
        (0..count as u64).collect(),
        labels.clone(),
        labels,
        vec![false; count],
    )
}

// ---------------------------------------------------------------------------
// CIFAR-10 binary batches (1 label byte + 3072 channel-major pixel bytes)
// ---------------------------------------------------------------------------

const CIFAR_RECORD: usize = 3073;
const CIFAR_PIXELS: usize = 3072;
const CIFAR_CHANNEL: usize = 1024;

/// Load one or more CIFAR-10 binary batch files.
///
/// Pixels are scaled to `[0, 1]` and standardized per channel with statistics
/// computed over everything loaded. Ids follow (file, record) order.
pub fn load_cifar_binary(paths: &[PathBuf]) -> Result<Dataset, DataError> {
    if paths.is_empty() {
        return Err(DataError::Config("no CIFAR batch files given".into()));
    }
    let mut inputs: Vec<f32> = Vec::new();
    let mut labels: Vec<u32> = Vec::new();
    for path in paths {
        let mut bytes = Vec::new();
        File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| DataError::io(path, e))?;
        if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
            return Err(DataError::Format {
                path: path.clone(),
                offset: (bytes.len() / CIFAR_RECORD * CIFAR_RECORD) as u64,
                message: format!(
                    "file length {} is not a positive multiple of {CIFAR_RECORD}",
                    bytes.len()
                ),
            });
        }
        for rec in bytes.chunks_exact(CIFAR_RECORD) {
            labels.push(rec[0] as u32);
            inputs.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
        }
    }
    let n = labels.len();

    // Per-channel standardization over the loaded set.
    let mut ch_mean = [0f64; 3];
    let mut ch_var = [0f64; 3];
    for rec in inputs.chunks_exact(CIFAR_PIXELS) {
        for c in 0..3 {
            for &v in &rec[c * CIFAR_CHANNEL..(c + 1) * CIFAR_CHANNEL] {
                ch_mean[c] += v as f64;
            }
        }
    }
    let per_channel = (n * CIFAR_CHANNEL) as f64;
    for m in ch_mean.iter_mut() {
        *m /= per_channel;
    }
    for rec in inputs.chunks_exact(CIFAR_PIXELS) {
        for c in 0..3 {
            for &v in &rec[c * CIFAR_CHANNEL..(c + 1) * CIFAR_CHANNEL] {
                ch_var[c] += (v as f64 - ch_mean[c]).powi(2);
            }
        }
    }
    let mut norm_mean = vec![0f32; CIFAR_PIXELS];
    let mut norm_std = vec![1f32; CIFAR_PIXELS];
    for c in 0..3 {
        let std = ((ch_var[c] / per_channel).sqrt() as f32).max(1e-8);
        for i in c * CIFAR_CHANNEL..(c + 1) * CIFAR_CHANNEL {
            norm_mean[i] = ch_mean[c] as f32;
            norm_std[i] = std;
        }
    }
    for rec in inputs.chunks_exact_mut(CIFAR_PIXELS) {
        for (i, v) in rec.iter_mut().enumerate() {
            *v = (*v - norm_mean[i]) / norm_std[i];
        }
    }

    Dataset::from_parts(
        "cifar".into(),
        CIFAR_PIXELS,
        10,
        Some(ImageShape {
            height: 32,
            width: 32,
            channels: 3,
        }),
        norm_mean,
        norm_std,
        inputs,
        (0..n as u64).collect(),
        labels.clone(),
        labels,
        vec![false; n],
    )
}

// ---------------------------------------------------------------------------
// Native `.ddset` snapshot container
// ---------------------------------------------------------------------------

const DDSET_MAGIC: &[u8; 8] = b"DDSET\x001\n";

#[derive(Serialize, Deserialize)]
struct SnapshotHeader {
    name: String,
    n: usize,
    input_dim: usize,
    classes: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    image: Option<ImageShape>,
    norm_mean: Vec<f32>,
    norm_std: Vec<f32>,
}

/// Write a dataset to the native snapshot container (see module docs).
pub fn save_snapshot(dataset: &Dataset, path: &Path) -> Result<(), DataError> {
    let header = SnapshotHeader {
        name: dataset.name.clone(),
        n: dataset.len(),
        input_dim: dataset.input_dim,
        classes: dataset.classes,
        image: dataset.image,
        norm_mean: dataset.norm_mean.clone(),
        norm_std: dataset.norm_std.clone(),
    };
    let header_bytes = serde_json::to_vec(&header)
        .map_err(|e| DataError::Config(format!("header serialization failed: {e}")))?;
    let file = File::create(path).map_err(|e| DataError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut write = |bytes: &[u8]| w.write_all(bytes).map_err(|e| DataError::io(path, e));
    write(DDSET_MAGIC)?;
    write(&(header_bytes.len() as u32).to_le_bytes())?;
    write(&header_bytes)?;
    for v in &dataset.inputs {
        write(&v.to_le_bytes())?;
    }
    for v in &dataset.ids {
        write(&v.to_le_bytes())?;
    }
    for v in &dataset.labels {
        write(&v.to_le_bytes())?;
    }
    for v in &dataset.original_labels {
        write(&v.to_le_bytes())?;
    }
    for &v in &dataset.corrupted {
        write(&[v as u8])?;
    }
    w.flush().map_err(|e| DataError::io(path, e))
}

/// Load a dataset from the native snapshot container.
pub fn load_snapshot(path: &Path) -> Result<Dataset, DataError> {
    let file = File::open(path).map_err(|e| DataError::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 8];
    read_exact_at(&mut r, &mut magic, path, 0, "magic")?;
    if &magic != DDSET_MAGIC {
        return Err(DataError::Format {
            path: path.to_owned(),
            offset: 0,
            message: "not a dataset snapshot (bad magic)".into(),
        });
    }
    let mut len_bytes = [0u8; 4];
    read_exact_at(&mut r, &mut len_bytes, path, 8, "header length")?;
    let header_len = u32::from_le_bytes(len_bytes) as usize;
    let mut header_bytes = vec![0u8; header_len];
    read_exact_at(&mut r, &mut header_bytes, path, 12, "header")?;
    let header: SnapshotHeader = serde_json::from_slice(&header_bytes).map_err(|e| {
        DataError::Format {
            path: path.to_owned(),
            offset: 12,
            message: format!("header JSON: {e}"),
        }
    })?;
    let mut offset = 12 + header_len as u64;

    let mut inputs = vec![0f32; header.n * header.input_dim];
    let mut raw = vec![0u8; inputs.len() * 4];
    read_exact_at(&mut r, &mut raw, path, offset, "input block")?;
    for (v, b) in inputs.iter_mut().zip(raw.chunks_exact(4)) {
        *v = f32::from_le_bytes([b[0], b[1], b[2], b[3]]);
    }
    offset += raw.len() as u64;

    let mut ids = vec![0u64; header.n];
    let mut raw = vec![0u8; header.n * 8];
    read_exact_at(&mut r, &mut raw, path, offset, "id block")?;
    for (v, b) in ids.iter_mut().zip(raw.chunks_exact(8)) {
        *v = u64::from_le_bytes([b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7]]);
    }
    offset += raw.len() as u64;

    let read_u32_block = |r: &mut BufReader<File>, offset: &mut u64, what: &str| {
        let mut raw = vec![0u8; header.n * 4];
        read_exact_at(r, &mut raw, path, *offset, what)?;
        *offset += raw.len() as u64;
        Ok::<Vec<u32>, DataError>(
            raw.chunks_exact(4)
                .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect(),
        )
    };
    let labels = read_u32_block(&mut r, &mut offset, "label block")?;
    let original_labels = read_u32_block(&mut r, &mut offset, "original-label block")?;

    let mut flags = vec![0u8; header.n];
    read_exact_at(&mut r, &mut flags, path, offset, "flag block")?;
    let corrupted: Vec<bool> = flags.iter().map(|&b| b != 0).collect();

    Dataset::from_parts(
        header.name,
        header.input_dim,
        header.classes,
        header.image,
        header.norm_mean,
        header.norm_std,
        inputs,
        ids,
        labels,
        original_labels,
        corrupted,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_synthetic(n_train: usize, seed: u64) -> (Dataset, Dataset) {
        let spec = SyntheticTaskSpec {
            classes: 4,
            input_dim: 6,
            clusters_per_class: 2,
            separation: 3.0,
            cluster_std: 0.5,
            label_noise: 0.0,
            n_train,
            n_test: n_train / 2,
            seed,
            image: None,
        };
        generate_synthetic(&spec).unwrap()
    }

    #[test]
    fn synthetic_generation_is_deterministic() {
        let (a_train, a_test) = small_synthetic(60, 11);
        let (b_train, b_test) = small_synthetic(60, 11);
        assert_eq!(a_train, b_train);
        assert_eq!(a_test, b_test);
        let (c_train, _) = small_synthetic(60, 12);
        assert_ne!(a_train, c_train);
    }

    #[test]
    fn synthetic_splits_have_disjoint_ids_and_right_sizes() {
        let (train, test) = small_synthetic(60, 3);
        assert_eq!(train.len(), 60);
        assert_eq!(test.len(), 30);
        assert!(train.ids().iter().all(|id| !test.ids().contains(id)));
        assert!(train.iter().all(|e| e.input.len() == 6 && e.label < 4));
    }

    #[test]
    fn synthetic_rejects_bad_specs() {
        let mut spec = SyntheticTaskSpec::default();
        spec.classes = 1;
        assert!(generate_synthetic(&spec).is_err());
        let mut spec = SyntheticTaskSpec::default();
        spec.label_noise = 1.5;
        assert!(generate_synthetic(&spec).is_err());
    }

    #[test]
    fn corruption_preserves_label_multiset_and_counts() {
        let (train, _) = small_synthetic(200, 5);
        let corrupted = corrupt_labels(&train, 0.1, 99).unwrap();
        assert_eq!(corrupted.len(), 200);
        // Exactly round(0.1 * 200) = 20 selected; flags only where changed.
        let changed = corrupted.corrupted_count();
        assert!(changed <= 20, "at most the 20 selected can change");
        assert!(changed > 0, "a permutation of 20 labels should move some");
        let mut before: Vec<u32> = (0..train.len()).map(|i| train.labels[i]).collect();
        let mut after: Vec<u32> = (0..corrupted.len()).map(|i| corrupted.labels[i]).collect();
        before.sort_unstable();
        after.sort_unstable();
        assert_eq!(before, after, "label histogram must be preserved");
        // Original labels never move.
        for i in 0..train.len() {
            assert_eq!(corrupted.original_label(i), train.label(i));
            assert_eq!(corrupted.is_corrupted(i), corrupted.label(i) != train.label(i));
        }
    }

    #[test]
    fn corruption_edge_cases() {
        let (train, _) = small_synthetic(50, 6);
        let same = corrupt_labels(&train, 0.0, 1).unwrap();
        assert_eq!(same, train);
        assert!(corrupt_labels(&train, -0.1, 1).is_err());
        assert!(corrupt_labels(&train, 1.1, 1).is_err());
        // fraction > 0 but rounding to < 2 selected is rejected.
        assert!(corrupt_labels(&train, 0.01, 1).is_err());
        // Determinism.
        let a = corrupt_labels(&train, 0.2, 7).unwrap();
        let b = corrupt_labels(&train, 0.2, 7).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn subset_preserves_dataset_order_and_metadata() {
        let (train, _) = small_synthetic(10, 8);
        let sub = take_subset(&train, &[5, 2]).unwrap();
        assert_eq!(sub.ids(), &[2, 5], "dataset order, not request order");
        assert_eq!(sub.input(0), train.input(2));
        assert_eq!(sub.input(1), train.input(5));
        assert_eq!(sub.label(0), train.label(2));
        assert_eq!(sub.classes(), train.classes());

        let all = take_subset(&train, train.ids()).unwrap();
        assert_eq!(all, train);
        let empty = take_subset(&train, &[]).unwrap();
        assert!(empty.is_empty());
        assert!(matches!(
            take_subset(&train, &[999]),
            Err(DataError::UnknownId(999))
        ));
    }

    #[test]
    fn snapshot_round_trip_is_bit_identical() {
        let (train, _) = small_synthetic(30, 13);
        let train = corrupt_labels(&train, 0.2, 3).unwrap();
        let dir = std::env::temp_dir().join(format!("ddset-test-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("roundtrip.ddset");
        save_snapshot(&train, &path).unwrap();
        let back = load_snapshot(&path).unwrap();
        assert_eq!(back, train);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn snapshot_rejects_garbage() {
        let dir = std::env::temp_dir().join(format!("ddset-bad-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.ddset");
        std::fs::write(&path, b"not a snapshot at all").unwrap();
        assert!(matches!(
            load_snapshot(&path),
            Err(DataError::Format { .. })
        ));
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn dataset_digest_tracks_content() {
        let (a, _) = small_synthetic(40, 1);
        let (b, _) = small_synthetic(40, 1);
        assert_eq!(a.digest(), b.digest());
        let c = corrupt_labels(&a, 0.1, 2).unwrap();
        assert_ne!(a.digest(), c.digest());
    }
}
