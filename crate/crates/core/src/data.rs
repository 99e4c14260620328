//! Datasets, loaders (IDX, CSV), synthetic blobs, splits and the query pool.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::mathcore::RealMatrix;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub features: RealMatrix,
    pub labels: Option<Vec<usize>>,
    pub k: usize,
    pub name: String,
}

impl Dataset {
    pub fn new(
        features: RealMatrix,
        labels: Option<Vec<usize>>,
        k: usize,
        name: impl Into<String>,
    ) -> Result<Self> {
        if features.rows() == 0 {
            return Err(Error::invalid("dataset must hold at least one example"));
        }
        if k < 2 {
            return Err(Error::invalid("dataset class count must be at least 2"));
        }
        if let Some(l) = &labels {
            if l.len() != features.rows() {
                return Err(Error::invalid(format!(
                    "{} labels for {} examples",
                    l.len(),
                    features.rows()
                )));
            }
            if let Some(&bad) = l.iter().find(|&&v| v >= k) {
                return Err(Error::OutOfRange(format!("label {bad} not in 0..{k}")));
            }
        }
        Ok(Self {
            features,
            labels,
            k,
            name: name.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn labels(&self) -> Result<&[usize]> {
        self.labels
            .as_deref()
            .ok_or_else(|| Error::invalid(format!("dataset '{}' is unlabeled", self.name)))
    }

    pub fn subset(&self, indices: &[usize], name: impl Into<String>) -> Dataset {
        Dataset {
            features: self.features.select_rows(indices),
            labels: self
                .labels
                .as_ref()
                .map(|l| indices.iter().map(|&i| l[i]).collect()),
            k: self.k,
            name: name.into(),
        }
    }

    pub fn without_labels(&self) -> Dataset {
        Dataset {
            labels: None,
            ..self.clone()
        }
    }
}

fn read_be_u32(bytes: &[u8], offset: usize, field: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::format(field, "file truncated"))
}

/// Parses an IDX image file (`0x00000803`) into rows of `byte / 255`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<RealMatrix> {
    let magic = read_be_u32(bytes, 0, "images.magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::format(
            "images.magic",
            format!("expected 0x{IDX_IMAGES_MAGIC:08x}, found 0x{magic:08x}"),
        ));
    }
    let n = read_be_u32(bytes, 4, "images.count")? as usize;
    let rows = read_be_u32(bytes, 8, "images.rows")? as usize;
    let cols = read_be_u32(bytes, 12, "images.cols")? as usize;
    let d = rows * cols;
    let body = &bytes[16..];
    if body.len() != n * d {
        return Err(Error::format(
            "images.pixels",
            format!("expected {} pixel bytes, found {}", n * d, body.len()),
        ));
    }
    let data = body.iter().map(|&b| b as f64 / 255.0).collect();
    RealMatrix::new(n, d, data)
}

/// Parses an IDX label file (`0x00000801`).
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let magic = read_be_u32(bytes, 0, "labels.magic")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::format(
            "labels.magic",
            format!("expected 0x{IDX_LABELS_MAGIC:08x}, found 0x{magic:08x}"),
        ));
    }
    let n = read_be_u32(bytes, 4, "labels.count")? as usize;
    let body = &bytes[8..];
    if body.len() != n {
        return Err(Error::format(
            "labels.values",
            format!("expected {n} label bytes, found {}", body.len()),
        ));
    }
    Ok(body.iter().map(|&b| b as usize).collect())
}

/// Loads an IDX image/label pair; `k` is inferred as `max label + 1`.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let features = parse_idx_images(&fs::read(images_path)?)?;
    let labels = parse_idx_labels(&fs::read(labels_path)?)?;
    if labels.len() != features.rows() {
        return Err(Error::format(
            "labels.count",
            format!("{} labels but {} images", labels.len(), features.rows()),
        ));
    }
    let k = labels.iter().max().map(|m| m + 1).unwrap_or(0).max(2);
    let name = images_path
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "idx".into());
    Dataset::new(features, Some(labels), k, name)
}

/// Serializes features as an IDX image file with the given row/col shape.
/// Values are mapped back to bytes with `round(v * 255)`.
pub fn encode_idx_images(features: &RealMatrix, rows: usize, cols: usize) -> Result<Vec<u8>> {
    if rows * cols != features.cols() {
        return Err(Error::invalid("image shape does not match feature width"));
    }
    let mut out = Vec::with_capacity(16 + features.as_slice().len());
    for v in [
        IDX_IMAGES_MAGIC,
        features.rows() as u32,
        rows as u32,
        cols as u32,
    ] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend(
        features
            .as_slice()
            .iter()
            .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8),
    );
    Ok(out)
}

pub fn encode_idx_labels(labels: &[usize]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    for &l in labels {
        out.push(u8::try_from(l).map_err(|_| Error::OutOfRange(format!("label {l} > 255")))?);
    }
    Ok(out)
}

/// Loads a headered numeric CSV. Every column except `label_column` is a
/// feature, in header order.
pub fn load_csv(path: &Path, label_column: Option<&str>, k: usize) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_path(path)
        .map_err(|e| Error::format("csv", e.to_string()))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::format("csv.header", e.to_string()))?
        .clone();
    let label_idx = match label_column {
        Some(name) => Some(headers.iter().position(|h| h == name).ok_or_else(|| {
            Error::format("csv.header", format!("label column '{name}' not found"))
        })?),
        None => None,
    };
    let width = headers.len() - label_idx.map_or(0, |_| 1);
    let mut data = Vec::new();
    let mut labels = label_idx.map(|_| Vec::new());
    let mut n = 0;
    for (row_no, rec) in reader.records().enumerate() {
        // header is line 1
        let line = row_no + 2;
        let rec = rec.map_err(|e| Error::format(format!("csv row {line}"), e.to_string()))?;
        for (c, cell) in rec.iter().enumerate() {
            if Some(c) == label_idx {
                let v: usize = cell.trim().parse().map_err(|_| {
                    Error::format(
                        format!("csv row {line}"),
                        format!("label '{cell}' is not a non-negative integer"),
                    )
                })?;
                if v >= k {
                    return Err(Error::OutOfRange(format!(
                        "csv row {line}: label {v} not in 0..{k}"
                    )));
                }
                labels.as_mut().unwrap().push(v);
            } else {
                let v: f64 = cell.trim().parse().map_err(|_| {
                    Error::format(
                        format!("csv row {line}"),
                        format!("cell '{cell}' in column {} is not numeric", c + 1),
                    )
                })?;
                if !v.is_finite() {
                    return Err(Error::format(
                        format!("csv row {line}"),
                        "non-finite feature value",
                    ));
                }
                data.push(v);
            }
        }
        n += 1;
    }
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "csv".into());
    Dataset::new(RealMatrix::new(n, width, data)?, labels, k, name)
}

/// Writes a headered CSV (`x0..x{d-1}` and, if labeled, `label`). Floats use
/// Rust's shortest round-trip formatting.
pub fn save_csv(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format("csv", e.to_string()))?;
    let mut header: Vec<String> = (0..dataset.dim()).map(|i| format!("x{i}")).collect();
    if dataset.labels.is_some() {
        header.push("label".into());
    }
    w.write_record(&header)
        .map_err(|e| Error::format("csv", e.to_string()))?;
    for (i, row) in dataset.features.row_iter().enumerate() {
        let mut rec: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        if let Some(l) = &dataset.labels {
            rec.push(l[i].to_string());
        }
        w.write_record(&rec)
            .map_err(|e| Error::format("csv", e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// `k` isotropic Gaussian clusters; centers uniform in `[-spread, spread]^d`.
/// Examples are emitted class by class.
pub fn synth_blobs(
    k: usize,
    d: usize,
    n_per_class: usize,
    center_spread: f64,
    noise_sd: f64,
    seed: u64,
) -> Result<Dataset> {
    if k < 2 || d == 0 || n_per_class == 0 {
        return Err(Error::invalid(
            "synth_blobs needs k >= 2, d >= 1, n_per_class >= 1",
        ));
    }
    if !(center_spread >= 0.0) || !(noise_sd >= 0.0) {
        return Err(Error::invalid("spread and noise must be non-negative"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers = draw_centers(&mut rng, k, d, center_spread);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut data = Vec::with_capacity(k * n_per_class * d);
    let mut labels = Vec::with_capacity(k * n_per_class);
    for (c, center) in centers.iter().enumerate() {
        for _ in 0..n_per_class {
            for &m in center {
                let z: f64 = normal.sample(&mut rng);
                data.push(m + noise_sd * z);
            }
            labels.push(c);
        }
    }
    Dataset::new(
        RealMatrix::new(k * n_per_class, d, data)?,
        Some(labels),
        k,
        format!("blobs-k{k}-d{d}-s{seed}"),
    )
}

/// Class centers used by [`synth_blobs`] for the same arguments.
pub fn blob_centers(k: usize, d: usize, center_spread: f64, seed: u64) -> Vec<Vec<f64>> {
    draw_centers(&mut ChaCha8Rng::seed_from_u64(seed), k, d, center_spread)
}

fn draw_centers(rng: &mut ChaCha8Rng, k: usize, d: usize, center_spread: f64) -> Vec<Vec<f64>> {
    (0..k)
        .map(|_| {
            (0..d)
                .map(|_| {
                    if center_spread > 0.0 {
                        rng.random_range(-center_spread..=center_spread)
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect()
}

/// Shuffle-then-cut split. Part sizes are `floor(f·n)` with the remainder
/// handed out to the earliest parts.
pub fn split(dataset: &Dataset, fractions: &[f64], seed: u64) -> Result<Vec<Dataset>> {
    Ok(split_indices(dataset.len(), fractions, seed)?
        .into_iter()
        .enumerate()
        .map(|(i, idx)| dataset.subset(&idx, format!("{}/part{i}", dataset.name)))
        .collect())
}

pub fn split_indices(n: usize, fractions: &[f64], seed: u64) -> Result<Vec<Vec<usize>>> {
    if fractions.is_empty() || fractions.iter().any(|&f| !(f > 0.0)) {
        return Err(Error::invalid("split fractions must be positive"));
    }
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!(
            "split fractions sum to {total}, expected 1"
        )));
    }
    let mut sizes: Vec<usize> = fractions
        .iter()
        .map(|f| (f * n as f64 + 1e-9).floor() as usize)
        .collect();
    let mut assigned: usize = sizes.iter().sum();
    let parts_count = sizes.len();
    let mut i = 0;
    while assigned < n {
        sizes[i % parts_count] += 1;
        assigned += 1;
        i += 1;
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut parts = Vec::with_capacity(sizes.len());
    let mut start = 0;
    for s in sizes {
        parts.push(order[start..start + s].to_vec());
        start += s;
    }
    Ok(parts)
}

/// Unlabeled query pool with the set of indices already sent to the target.
#[derive(Clone, Debug)]
pub struct QueryPool {
    base: Dataset,
    spent: BTreeSet<usize>,
}

impl QueryPool {
    /// Labels are dropped: the attacker never sees them.
    pub fn new(dataset: &Dataset) -> Self {
        Self {
            base: dataset.without_labels(),
            spent: BTreeSet::new(),
        }
    }

    pub fn features(&self) -> &RealMatrix {
        &self.base.features
    }

    pub fn dataset(&self) -> &Dataset {
        &self.base
    }

    pub fn len(&self) -> usize {
        self.base.len()
    }

    pub fn is_empty(&self) -> bool {
        self.base.is_empty()
    }

    pub fn spent(&self) -> &BTreeSet<usize> {
        &self.spent
    }

    pub fn num_spent(&self) -> usize {
        self.spent.len()
    }

    pub fn num_unspent(&self) -> usize {
        self.len() - self.spent.len()
    }

    /// Unspent indices in increasing order.
    pub fn unspent(&self) -> Vec<usize> {
        (0..self.len())
            .filter(|i| !self.spent.contains(i))
            .collect()
    }

    /// Marks indices as spent; all of them must be currently unspent and
    /// distinct. On error the pool is unchanged.
    pub fn mark_spent(&mut self, indices: &[usize]) -> Result<()> {
        let mut seen = BTreeSet::new();
        for &i in indices {
            if i >= self.len() {
                return Err(Error::OutOfRange(format!(
                    "pool index {i} not in 0..{}",
                    self.len()
                )));
            }
            if self.spent.contains(&i) || !seen.insert(i) {
                return Err(Error::invalid(format!("pool index {i} is already spent")));
            }
        }
        self.spent.extend(indices);
        Ok(())
    }

    pub fn view(&self) -> PoolView<'_> {
        PoolView::new(self.features(), self.unspent())
    }
}

/// A set of candidate pool indices over the pool's feature matrix.
#[derive(Clone, Debug)]
pub struct PoolView<'a> {
    features: &'a RealMatrix,
    indices: Vec<usize>,
}

impl<'a> PoolView<'a> {
    pub fn new(features: &'a RealMatrix, indices: Vec<usize>) -> Self {
        Self { features, indices }
    }

    pub fn features(&self) -> &'a RealMatrix {
        self.features
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn row(&self, pool_index: usize) -> &'a [f64] {
        self.features.row(pool_index)
    }

    /// The same pool restricted to `indices`.
    pub fn restrict(&self, indices: &[usize]) -> PoolView<'a> {
        PoolView {
            features: self.features,
            indices: indices.to_vec(),
        }
    }
}
