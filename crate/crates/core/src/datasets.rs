//! Dataset ingestion (IDX, CSV), synthetic Gaussian blobs, and deterministic
//! shuffled batching.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    features: Tensor,
    labels: Vec<usize>,
    num_classes: usize,
    split: Split,
}

impl Dataset {
    pub fn new(features: Tensor, labels: Vec<usize>, num_classes: usize, split: Split) -> Result<Self> {
        if features.ndim() < 2 || features.shape()[0] != labels.len() {
            return Err(Error::CountMismatch(format!(
                "{} feature rows vs {} labels",
                features.shape().first().copied().unwrap_or(0),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::InvalidArg(format!("label {bad} outside [0, {num_classes})")));
        }
        Ok(Self { features, labels, num_classes, split })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn split(&self) -> Split {
        self.split
    }

    /// Per-sample feature dimensions.
    pub fn sample_shape(&self) -> &[usize] {
        &self.features.shape()[1..]
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    /// Widens the class count (e.g. a test file missing some classes).
    pub fn with_num_classes(mut self, num_classes: usize) -> Result<Self> {
        if num_classes < self.num_classes {
            return Err(Error::InvalidArg(format!(
                "cannot shrink class count from {} to {num_classes}",
                self.num_classes
            )));
        }
        self.num_classes = num_classes;
        Ok(self)
    }

    /// Keeps the first `n` samples.
    pub fn truncate(self, n: usize) -> Result<Self> {
        if n == 0 || n >= self.len() {
            return Ok(self);
        }
        let idx: Vec<usize> = (0..n).collect();
        let batch = self.gather(&idx);
        Dataset::new(batch.features, batch.labels, self.num_classes, self.split)
    }

    pub fn gather(&self, indices: &[usize]) -> Batch {
        Batch {
            features: self.features.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub features: Tensor,
    pub labels: Vec<usize>,
}

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

fn read_u32_be(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::TruncatedFile(format!("{what}: header ends at byte {at}")))
}

/// Decodes an IDX image file into `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, &[u8])> {
    let magic = read_u32_be(bytes, 0, "images")?;
    if magic != IDX_IMAGES {
        return Err(Error::BadMagic(format!("images: {magic:#010x}")));
    }
    let n = read_u32_be(bytes, 4, "images")? as usize;
    let rows = read_u32_be(bytes, 8, "images")? as usize;
    let cols = read_u32_be(bytes, 12, "images")? as usize;
    let need = n * rows * cols;
    let body = &bytes[16..];
    if body.len() < need {
        return Err(Error::TruncatedFile(format!(
            "images: {need} pixel bytes declared, {} present",
            body.len()
        )));
    }
    Ok((n, rows, cols, &body[..need]))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<&[u8]> {
    let magic = read_u32_be(bytes, 0, "labels")?;
    if magic != IDX_LABELS {
        return Err(Error::BadMagic(format!("labels: {magic:#010x}")));
    }
    let n = read_u32_be(bytes, 4, "labels")? as usize;
    let body = &bytes[8..];
    if body.len() < n {
        return Err(Error::TruncatedFile(format!("labels: {n} declared, {} present", body.len())));
    }
    Ok(&body[..n])
}

pub fn encode_idx_images(rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    let n = pixels.len() / (rows * cols);
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IDX_IMAGES, n as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Builds a dataset from IDX bytes; pixels scaled to `[0, 1]`, shape `n×1×rows×cols`.
pub fn dataset_from_idx(images: &[u8], labels: &[u8]) -> Result<Dataset> {
    let (n, rows, cols, pixels) = parse_idx_images(images)?;
    let labels = parse_idx_labels(labels)?;
    if labels.len() != n {
        return Err(Error::CountMismatch(format!("{n} images but {} labels", labels.len())));
    }
    let features: Vec<f32> = pixels.iter().map(|&p| p as f32 / 255.0).collect();
    let labels: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
    let classes = labels.iter().max().map_or(1, |&m| m + 1);
    Dataset::new(Tensor::new(vec![n, 1, rows, cols], features)?, labels, classes, Split::Train)
}

pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let read = |p: &Path| fs::read(p).map_err(|e| Error::io(p, e));
    let images = read(images_path.as_ref())?;
    let labels = read(labels_path.as_ref())?;
    dataset_from_idx(&images, &labels)
}

/// Comma-separated rows, optional header, final column an integer label.
pub fn load_csv(path: impl AsRef<Path>, split: Split) -> Result<Dataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_csv(&text, split)
}

pub fn parse_csv(text: &str, split: Split) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut width = None;
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Parse(format!("csv line {}: {e}", line + 1)))?;
        if record.len() < 2 {
            return Err(Error::Parse(format!("csv line {}: need features and a label", line + 1)));
        }
        let parsed: std::result::Result<Vec<f32>, _> =
            record.iter().take(record.len() - 1).map(str::parse::<f32>).collect();
        let label = record[record.len() - 1].parse::<usize>();
        let (row, label) = match (parsed, label) {
            (Ok(r), Ok(l)) => (r, l),
            _ if line == 0 => continue,
            _ => return Err(Error::Parse(format!("csv line {}: non-numeric field", line + 1))),
        };
        match width {
            None => width = Some(row.len()),
            Some(w) if w != row.len() => {
                return Err(Error::Parse(format!("csv line {}: {} features, expected {w}", line + 1, row.len())))
            }
            _ => {}
        }
        features.extend(row);
        labels.push(label);
    }
    let width = width.ok_or_else(|| Error::Parse("csv has no data rows".into()))?;
    let classes = labels.iter().max().map_or(1, |&m| m + 1);
    Dataset::new(Tensor::new(vec![labels.len(), width], features)?, labels, classes, split)
}

/// Gaussian blobs around seeded uniform centers in `[-1, 1]^dim`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlobsConfig {
    pub classes: usize,
    pub dim: usize,
    pub spread: f32,
    /// Number of Gaussian clusters per class (1 gives linearly separable-ish data).
    #[serde(default = "one")]
    pub clusters_per_class: usize,
    pub seed: u64,
}

fn one() -> usize {
    1
}

impl BlobsConfig {
    pub fn new(classes: usize, dim: usize, spread: f32, seed: u64) -> Self {
        Self { classes, dim, spread, clusters_per_class: 1, seed }
    }

    fn validate(&self, n: usize) -> Result<()> {
        if self.classes == 0 || self.dim == 0 || self.clusters_per_class == 0 {
            return Err(Error::InvalidArg("classes, dim and clusters_per_class must be positive".into()));
        }
        if n < self.classes {
            return Err(Error::InvalidArg(format!("n = {n} is smaller than classes = {}", self.classes)));
        }
        if !(self.spread > 0.0) || !self.spread.is_finite() {
            return Err(Error::InvalidArg(format!("spread must be positive, got {}", self.spread)));
        }
        Ok(())
    }

    /// Cluster centers, indexed `[class * clusters_per_class + cluster]`.
    pub fn centers(&self) -> Vec<Vec<f32>> {
        let mut rng = RngStream::new(self.seed, "blobs/centers");
        (0..self.classes * self.clusters_per_class)
            .map(|_| (0..self.dim).map(|_| rng.uniform(-1.0, 1.0)).collect())
            .collect()
    }

    /// Draws `n` class-balanced samples; `split` selects an independent sample stream.
    pub fn generate(&self, n: usize, split: Split) -> Result<Dataset> {
        self.validate(n)?;
        let centers = self.centers();
        let label = match split {
            Split::Train => "blobs/samples/train",
            Split::Test => "blobs/samples/test",
        };
        let mut rng = RngStream::new(self.seed, label);
        let mut labels: Vec<usize> = (0..n).map(|i| i % self.classes).collect();
        rng.shuffle(&mut labels);
        let mut features = Vec::with_capacity(n * self.dim);
        for &y in &labels {
            let cluster = (rng.next_u64() % self.clusters_per_class as u64) as usize;
            let center = &centers[y * self.clusters_per_class + cluster];
            features.extend(center.iter().map(|&c| c + self.spread * rng.normal()));
        }
        Dataset::new(Tensor::new(vec![n, self.dim], features)?, labels, self.classes, split)
    }
}

pub fn synth_blobs(n: usize, classes: usize, dim: usize, spread: f32, seed: u64) -> Result<Dataset> {
    BlobsConfig::new(classes, dim, spread, seed).generate(n, Split::Train)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchPlan {
    pub batch_size: usize,
    #[serde(default)]
    pub shuffle_seed: u64,
    #[serde(default)]
    pub drop_last: bool,
}

impl BatchPlan {
    pub fn new(batch_size: usize, shuffle_seed: u64) -> Self {
        Self { batch_size, shuffle_seed, drop_last: false }
    }
}

/// Sample indices of every batch of `epoch`, shuffled by `(shuffle_seed, epoch)`.
pub fn batch_indices(n: usize, plan: &BatchPlan, epoch: usize) -> Result<Vec<Vec<usize>>> {
    if plan.batch_size == 0 {
        return Err(Error::InvalidArg("batch_size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    RngStream::new(plan.shuffle_seed, format!("shuffle/epoch-{epoch}")).shuffle(&mut order);
    Ok(order
        .chunks(plan.batch_size)
        .filter(|c| !plan.drop_last || c.len() == plan.batch_size)
        .map(<[usize]>::to_vec)
        .collect())
}

pub fn batches(ds: &Dataset, plan: &BatchPlan, epoch: usize) -> Result<Vec<Batch>> {
    Ok(batch_indices(ds.len(), plan, epoch)?
        .iter()
        .map(|idx| ds.gather(idx))
        .collect())
}
