//! Labelled datasets: synthetic generators, IDX loading, normalisation,
//! corruption and mini-batching.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Prng;
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// Per-feature affine standardisation fitted on a training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    /// Fits on `train`; features with (near) zero spread keep unit scale.
    pub fn fit(train: &Dataset) -> Result<Self> {
        if train.split != Split::Train {
            return Err(Error::input("normalization must be fitted on a train split"));
        }
        let (m, n) = (train.len(), train.dim());
        let mut mean = vec![0.0; n];
        for i in 0..m {
            for (acc, v) in mean.iter_mut().zip(train.features.row(i)) {
                *acc += v;
            }
        }
        mean.iter_mut().for_each(|v| *v /= m as f64);
        let mut var = vec![0.0; n];
        for i in 0..m {
            for ((acc, v), mu) in var.iter_mut().zip(train.features.row(i)).zip(&mean) {
                *acc += (v - mu).powi(2);
            }
        }
        let std = var
            .into_iter()
            .map(|v| {
                let s = (v / m as f64).sqrt();
                if s < 1e-12 {
                    1.0
                } else {
                    s
                }
            })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn apply(&self, ds: &Dataset) -> Result<Dataset> {
        if self.mean.len() != ds.dim() {
            return Err(Error::dim("normalization width differs from dataset"));
        }
        let mut out = ds.clone();
        let n = ds.dim();
        for (j, v) in out.features.data_mut().iter_mut().enumerate() {
            let f = j % n;
            *v = (*v - self.mean[f]) / self.std[f];
        }
        out.normalization = Some(self.clone());
        out.feature_range = None;
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    GaussianNoise,
    ImpulseNoise,
    BoxBlur,
    Contrast,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 4] = [
        CorruptionKind::GaussianNoise,
        CorruptionKind::ImpulseNoise,
        CorruptionKind::BoxBlur,
        CorruptionKind::Contrast,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "gaussian_noise",
            CorruptionKind::ImpulseNoise => "impulse_noise",
            CorruptionKind::BoxBlur => "box_blur",
            CorruptionKind::Contrast => "contrast",
        }
    }
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CorruptionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CorruptionKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::input(format!("unknown corruption kind `{s}`")))
    }
}

/// Severity parameter tables, indexed by `severity - 1`. Each is monotone in
/// the damage it does.
pub const GAUSSIAN_NOISE_STD: [f64; 5] = [0.04, 0.08, 0.12, 0.16, 0.20];
/// Fraction of features replaced by salt-or-pepper values.
pub const IMPULSE_FRACTION: [f64; 5] = [0.01, 0.02, 0.04, 0.07, 0.10];
/// Side length of the square box kernel.
pub const BOX_KERNEL: [usize; 5] = [1, 3, 5, 7, 9];
/// Contrast factor `gamma` in `mean + gamma (x - mean)`.
pub const CONTRAST_GAMMA: [f64; 5] = [0.6, 0.45, 0.3, 0.2, 0.1];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub severity: u8,
}

impl CorruptionSpec {
    pub fn new(kind: CorruptionKind, severity: u8) -> Result<Self> {
        if !(1..=5).contains(&severity) {
            return Err(Error::input(format!("severity {severity} outside 1..=5")));
        }
        Ok(Self { kind, severity })
    }

    /// All 4 x 5 corruption cells.
    pub fn grid() -> Vec<CorruptionSpec> {
        CorruptionKind::ALL
            .into_iter()
            .flat_map(|kind| (1..=5).map(move |severity| CorruptionSpec { kind, severity }))
            .collect()
    }

    pub fn label(&self) -> String {
        format!("{}-{}", self.kind, self.severity)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Synthetic {
        generator: String,
        params: String,
    },
    File {
        images: PathBuf,
        labels: PathBuf,
    },
    Derived {
        from: Box<Provenance>,
        op: String,
    },
    Corrupted {
        from: Box<Provenance>,
        spec: CorruptionSpec,
        seed: u64,
    },
}

/// Labelled examples `(x_i, y_i)` stored as a `[m x n]` feature tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    features: Tensor,
    labels: Vec<usize>,
    num_classes: usize,
    pub split: Split,
    pub normalization: Option<Normalization>,
    pub provenance: Provenance,
    /// Row index of each example in the dataset it was split from.
    pub source_indices: Vec<usize>,
    /// `(height, width)` when each row is an image.
    pub image_shape: Option<(usize, usize)>,
    /// Valid feature interval; corruptions and attacks clip to it.
    pub feature_range: Option<(f64, f64)>,
}

impl Dataset {
    pub fn new(features: Tensor, labels: Vec<usize>, num_classes: usize, provenance: Provenance) -> Result<Self> {
        features.ensure_matrix("features")?;
        if features.rows() != labels.len() {
            return Err(Error::dim(format!(
                "{} rows but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if num_classes < 2 {
            return Err(Error::input("need at least two classes"));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::input(format!("label {y} outside [0, {num_classes})")));
        }
        let m = labels.len();
        Ok(Self {
            features,
            labels,
            num_classes,
            split: Split::Train,
            normalization: None,
            provenance,
            source_indices: (0..m).collect(),
            image_shape: None,
            feature_range: None,
        })
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

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.num_classes];
        for &y in &self.labels {
            c[y] += 1;
        }
        c
    }

    /// Features and labels for the given row indices.
    pub fn batch(&self, idx: &[usize]) -> (Tensor, Vec<usize>) {
        (
            self.features.select_rows(idx),
            idx.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    /// Rows `idx` as a new dataset with the same metadata.
    pub fn subset(&self, idx: &[usize], op: &str) -> Dataset {
        let (features, labels) = self.batch(idx);
        Dataset {
            features,
            labels,
            num_classes: self.num_classes,
            split: self.split,
            normalization: self.normalization.clone(),
            provenance: Provenance::Derived {
                from: Box::new(self.provenance.clone()),
                op: op.to_string(),
            },
            source_indices: idx.iter().map(|&i| self.source_indices[i]).collect(),
            image_shape: self.image_shape,
            feature_range: self.feature_range,
        }
    }

    /// First `per_class` examples of every class, in dataset order.
    pub fn balanced_subset(&self, per_class: usize) -> Result<Dataset> {
        let mut taken = vec![0; self.num_classes];
        let mut idx = Vec::new();
        for (i, &y) in self.labels.iter().enumerate() {
            if taken[y] < per_class {
                taken[y] += 1;
                idx.push(i);
            }
        }
        if taken.iter().any(|&t| t < per_class) {
            return Err(Error::input(format!(
                "fewer than {per_class} examples in some class: {taken:?}"
            )));
        }
        Ok(self.subset(&idx, &format!("balanced_subset({per_class})")))
    }

    /// Random disjoint train/test split; `test` gets `round(m * test_fraction)` rows.
    pub fn split(&self, test_fraction: f64, prng: &mut Prng) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&test_fraction) {
            return Err(Error::input("test fraction must be in [0, 1)"));
        }
        let perm = prng.permutation(self.len());
        let n_test = (self.len() as f64 * test_fraction).round() as usize;
        let (test_idx, train_idx) = perm.split_at(n_test);
        let mut train = self.subset(train_idx, "split:train");
        let mut test = self.subset(test_idx, "split:test");
        train.split = Split::Train;
        test.split = Split::Test;
        Ok((train, test))
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    /// Writes `f0,..,f{n-1},label` rows.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header: Vec<String> = (0..self.dim()).map(|j| format!("f{j}")).collect();
        header.push("label".into());
        w.write_record(&header)?;
        for i in 0..self.len() {
            let mut rec: Vec<String> = self.features.row(i).iter().map(|v| v.to_string()).collect();
            rec.push(self.labels[i].to_string());
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn read_csv(path: &Path, num_classes: usize) -> Result<Dataset> {
        let mut r = csv::Reader::from_path(path)?;
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let parse = |s: &str| -> Result<f64> {
                s.parse::<f64>().map_err(|e| Error::Format {
                    path: path.to_path_buf(),
                    reason: e.to_string(),
                })
            };
            let n = rec.len() - 1;
            rows.push(rec.iter().take(n).map(parse).collect::<Result<Vec<_>>>()?);
            labels.push(rec[n].parse::<usize>().map_err(|e| Error::Format {
                path: path.to_path_buf(),
                reason: e.to_string(),
            })?);
        }
        Dataset::new(
            Tensor::from_rows(&rows)?,
            labels,
            num_classes,
            Provenance::File {
                images: path.to_path_buf(),
                labels: path.to_path_buf(),
            },
        )
    }
}

/// Two interleaved half circles with Gaussian jitter; labels balanced.
pub fn make_two_moons(m: usize, noise_std: f64, prng: &mut Prng) -> Result<Dataset> {
    if m < 2 {
        return Err(Error::input("two moons needs m >= 2"));
    }
    if !(noise_std >= 0.0) {
        return Err(Error::input("noise_std must be >= 0"));
    }
    let n_outer = m.div_ceil(2);
    let n_inner = m / 2;
    let arc = |count: usize, i: usize| {
        if count == 1 {
            0.0
        } else {
            std::f64::consts::PI * i as f64 / (count - 1) as f64
        }
    };
    let mut rows = Vec::with_capacity(m);
    for i in 0..n_outer {
        let t = arc(n_outer, i);
        rows.push((t.cos(), t.sin(), 0));
    }
    for i in 0..n_inner {
        let t = arc(n_inner, i);
        rows.push((1.0 - t.cos(), 1.0 - t.sin() - 0.5, 1));
    }
    prng.shuffle(&mut rows);
    let mut data = Vec::with_capacity(2 * m);
    let mut labels = Vec::with_capacity(m);
    for (x, y, label) in rows {
        data.push(x + noise_std * prng.normal());
        data.push(y + noise_std * prng.normal());
        labels.push(label);
    }
    Dataset::new(
        Tensor::from_raw(vec![m, 2], data),
        labels,
        2,
        Provenance::Synthetic {
            generator: "two_moons".into(),
            params: format!("m={m},noise_std={noise_std},seed={}", prng.seed()),
        },
    )
}

/// Isotropic Gaussian clusters; each example is labelled with the index of the
/// centre it was drawn around. Class sizes differ by at most one.
pub fn make_blobs(m: usize, centers: &[Vec<f64>], std: f64, prng: &mut Prng) -> Result<Dataset> {
    let k = centers.len();
    if k < 2 {
        return Err(Error::input("blobs need at least two centers"));
    }
    let n = centers[0].len();
    if n == 0 || centers.iter().any(|c| c.len() != n) {
        return Err(Error::dim("centers must share a nonzero dimension"));
    }
    for i in 0..k {
        for j in i + 1..k {
            if centers[i] == centers[j] {
                return Err(Error::input(format!("duplicate centers {i} and {j}")));
            }
        }
    }
    if !(std >= 0.0) {
        return Err(Error::input("std must be >= 0"));
    }
    let mut labels: Vec<usize> = (0..m).map(|i| i % k).collect();
    prng.shuffle(&mut labels);
    let mut data = Vec::with_capacity(m * n);
    for &y in &labels {
        for &c in &centers[y] {
            data.push(c + std * prng.normal());
        }
    }
    Dataset::new(
        Tensor::from_raw(vec![m, n], data),
        labels,
        k,
        Provenance::Synthetic {
            generator: "blobs".into(),
            params: format!("m={m},k={k},std={std},seed={}", prng.seed()),
        },
    )
}

fn read_u32(bytes: &[u8], at: usize) -> Option<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
}

/// Raw IDX image payload (`count x rows x cols` unsigned bytes).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

impl IdxImages {
    pub fn parse(bytes: &[u8], path: &Path) -> Result<Self> {
        let fail = |reason: String| Error::Format {
            path: path.to_path_buf(),
            reason,
        };
        let magic = read_u32(bytes, 0).ok_or_else(|| fail("truncated header".into()))?;
        if magic != IDX_IMAGES_MAGIC {
            return Err(fail(format!("bad image magic {magic:#010x}")));
        }
        let dims: Vec<usize> = (0..3)
            .map(|i| read_u32(bytes, 4 + 4 * i).map(|v| v as usize))
            .collect::<Option<_>>()
            .ok_or_else(|| fail("truncated header".into()))?;
        let need = dims[0] * dims[1] * dims[2];
        let body = &bytes[16..];
        if body.len() != need {
            return Err(fail(format!("expected {need} pixel bytes, found {}", body.len())));
        }
        Ok(Self {
            count: dims[0],
            rows: dims[1],
            cols: dims[2],
            pixels: body.to_vec(),
        })
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.pixels.len());
        for v in [IDX_IMAGES_MAGIC, self.count as u32, self.rows as u32, self.cols as u32] {
            out.extend_from_slice(&v.to_be_bytes());
        }
        out.extend_from_slice(&self.pixels);
        out
    }
}

pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>> {
    let fail = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    let magic = read_u32(bytes, 0).ok_or_else(|| fail("truncated header".into()))?;
    if magic != IDX_LABELS_MAGIC {
        return Err(fail(format!("bad label magic {magic:#010x}")));
    }
    let count = read_u32(bytes, 4).ok_or_else(|| fail("truncated header".into()))? as usize;
    let body = &bytes[8..];
    if body.len() != count {
        return Err(fail(format!("expected {count} labels, found {}", body.len())));
    }
    Ok(body.to_vec())
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Loads an IDX image/label pair, scaling pixels to `[0, 1]`.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let img_bytes = fs::read(images_path).map_err(|e| Error::io(images_path, e))?;
    let lab_bytes = fs::read(labels_path).map_err(|e| Error::io(labels_path, e))?;
    let images = IdxImages::parse(&img_bytes, images_path)?;
    let labels = parse_idx_labels(&lab_bytes, labels_path)?;
    if labels.len() != images.count {
        return Err(Error::Format {
            path: labels_path.to_path_buf(),
            reason: format!("{} labels for {} images", labels.len(), images.count),
        });
    }
    let dim = images.rows * images.cols;
    let data = images.pixels.iter().map(|&p| p as f64 / 255.0).collect();
    let labels: Vec<usize> = labels.into_iter().map(usize::from).collect();
    let classes = labels.iter().copied().max().map_or(2, |m| (m + 1).max(2));
    let mut ds = Dataset::new(
        Tensor::from_raw(vec![images.count, dim], data),
        labels,
        classes,
        Provenance::File {
            images: images_path.to_path_buf(),
            labels: labels_path.to_path_buf(),
        },
    )?;
    ds.image_shape = Some((images.rows, images.cols));
    ds.feature_range = Some((0.0, 1.0));
    Ok(ds)
}

/// Writes a `[0, 1]` image dataset as an IDX pair (pixels rounded to bytes).
pub fn write_idx(ds: &Dataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    let (rows, cols) = ds
        .image_shape
        .ok_or_else(|| Error::input("dataset has no image shape"))?;
    if ds.labels.iter().any(|&y| y > 255) {
        return Err(Error::input("IDX labels must fit in a byte"));
    }
    let pixels = ds
        .features
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let images = IdxImages {
        count: ds.len(),
        rows,
        cols,
        pixels,
    };
    let labels: Vec<u8> = ds.labels.iter().map(|&y| y as u8).collect();
    fs::write(images_path, images.encode()).map_err(|e| Error::io(images_path, e))?;
    fs::write(labels_path, encode_idx_labels(&labels)).map_err(|e| Error::io(labels_path, e))
}

fn box_blur(row: &[f64], h: usize, w: usize, kernel: usize) -> Vec<f64> {
    let r = (kernel / 2) as isize;
    let mut out = vec![0.0; row.len()];
    for i in 0..h as isize {
        for j in 0..w as isize {
            let mut sum = 0.0;
            let mut count = 0usize;
            for di in -r..=r {
                for dj in -r..=r {
                    let (a, b) = (i + di, j + dj);
                    if a >= 0 && a < h as isize && b >= 0 && b < w as isize {
                        sum += row[a as usize * w + b as usize];
                        count += 1;
                    }
                }
            }
            out[i as usize * w + j as usize] = sum / count as f64;
        }
    }
    out
}

/// Applies one corruption cell. Rows without an image shape are treated as
/// `1 x n` images; outputs are clipped to `feature_range` when it is set.
pub fn corrupt(ds: &Dataset, spec: CorruptionSpec, prng: &mut Prng) -> Result<Dataset> {
    let spec = CorruptionSpec::new(spec.kind, spec.severity)?;
    let s = spec.severity as usize - 1;
    let n = ds.dim();
    let (h, w) = ds.image_shape.unwrap_or((1, n));
    let (lo, hi) = ds.feature_range.unwrap_or((f64::NEG_INFINITY, f64::INFINITY));
    let (salt, pepper) = ds.feature_range.unwrap_or_else(|| {
        let d = ds.features.data();
        let min = d.iter().copied().fold(f64::INFINITY, f64::min);
        let max = d.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (min, max)
    });
    let mut out = ds.clone();
    for i in 0..ds.len() {
        let row = ds.features.row(i);
        let new: Vec<f64> = match spec.kind {
            CorruptionKind::GaussianNoise => {
                let sigma = GAUSSIAN_NOISE_STD[s];
                row.iter().map(|&v| v + sigma * prng.normal()).collect()
            }
            CorruptionKind::ImpulseNoise => {
                let p = IMPULSE_FRACTION[s];
                row.iter()
                    .map(|&v| {
                        if prng.uniform() < p {
                            if prng.uniform() < 0.5 {
                                salt
                            } else {
                                pepper
                            }
                        } else {
                            v
                        }
                    })
                    .collect()
            }
            CorruptionKind::BoxBlur => box_blur(row, h, w, BOX_KERNEL[s]),
            CorruptionKind::Contrast => {
                let gamma = CONTRAST_GAMMA[s];
                let mean = row.iter().sum::<f64>() / row.len() as f64;
                row.iter().map(|&v| mean + gamma * (v - mean)).collect()
            }
        };
        for (dst, v) in out.features.row_mut(i).iter_mut().zip(new) {
            *dst = v.clamp(lo, hi);
        }
    }
    out.provenance = Provenance::Corrupted {
        from: Box::new(ds.provenance.clone()),
        spec,
        seed: prng.seed(),
    };
    Ok(out)
}

/// Shuffled index batches covering `0..m` exactly once; the last batch may be
/// short.
pub fn epoch_batches(m: usize, batch_size: usize, prng: &mut Prng) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::input("batch size must be >= 1"));
    }
    let perm = prng.permutation(m);
    Ok(perm.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn moons_without_noise_lie_on_arcs() {
        let ds = make_two_moons(200, 0.0, &mut Prng::new(1)).unwrap();
        for i in 0..ds.len() {
            let r = ds.features().row(i);
            let dist = if ds.labels()[i] == 0 {
                (r[0].powi(2) + r[1].powi(2)).sqrt()
            } else {
                ((r[0] - 1.0).powi(2) + (r[1] - 0.5).powi(2)).sqrt()
            };
            assert!((dist - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn moons_are_balanced() {
        let ds = make_two_moons(1000, 0.1, &mut Prng::new(2)).unwrap();
        assert_eq!(ds.class_counts(), vec![500, 500]);
        let d = ds.features().data();
        assert!(d.iter().all(|v| (-1.5..=2.5).contains(v)));
    }

    #[test]
    fn blobs_zero_std_sit_on_centers() {
        let centers = vec![vec![0.0, 0.0], vec![5.0, 5.0], vec![-3.0, 2.0]];
        let ds = make_blobs(300, &centers, 0.0, &mut Prng::new(3)).unwrap();
        assert_eq!(ds.class_counts(), vec![100, 100, 100]);
        for i in 0..ds.len() {
            assert_eq!(ds.features().row(i), centers[ds.labels()[i]].as_slice());
        }
    }

    #[test]
    fn blobs_duplicate_centers_rejected() {
        let c = vec![vec![1.0], vec![1.0]];
        assert!(matches!(
            make_blobs(10, &c, 1.0, &mut Prng::new(0)),
            Err(Error::Input(_))
        ));
    }

    fn tiny_idx(dir: &Path) -> (PathBuf, PathBuf) {
        let images = IdxImages {
            count: 2,
            rows: 2,
            cols: 2,
            pixels: vec![0, 255, 128, 7, 1, 2, 3, 4],
        };
        let ip = dir.join("img");
        let lp = dir.join("lab");
        fs::write(&ip, images.encode()).unwrap();
        fs::write(&lp, encode_idx_labels(&[3, 1])).unwrap();
        (ip, lp)
    }

    #[test]
    fn idx_fixture_shapes() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = tiny_idx(dir.path());
        let ds = load_idx(&ip, &lp).unwrap();
        assert_eq!(ds.features().shape(), &[2, 4]);
        assert_eq!(ds.labels(), &[3, 1]);
        assert_eq!(ds.features().get(0, 1), 1.0);
        assert_eq!(ds.image_shape, Some((2, 2)));
    }

    #[test]
    fn idx_bad_magic_truncation_and_count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = tiny_idx(dir.path());
        let mut bad = fs::read(&lp).unwrap();
        bad[3] = 0x03;
        let bad_path = dir.path().join("bad");
        fs::write(&bad_path, &bad).unwrap();
        assert!(matches!(load_idx(&ip, &bad_path), Err(Error::Format { .. })));

        let mut short = fs::read(&ip).unwrap();
        short.pop();
        fs::write(&bad_path, &short).unwrap();
        assert!(matches!(load_idx(&bad_path, &lp), Err(Error::Format { .. })));

        fs::write(&bad_path, encode_idx_labels(&[1, 2, 3])).unwrap();
        assert!(matches!(load_idx(&ip, &bad_path), Err(Error::Format { .. })));
    }

    #[test]
    fn idx_roundtrip_preserves_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = tiny_idx(dir.path());
        let ds = load_idx(&ip, &lp).unwrap();
        let (ip2, lp2) = (dir.path().join("img2"), dir.path().join("lab2"));
        write_idx(&ds, &ip2, &lp2).unwrap();
        assert_eq!(fs::read(&ip).unwrap(), fs::read(&ip2).unwrap());
        assert_eq!(fs::read(&lp).unwrap(), fs::read(&lp2).unwrap());
    }

    fn image_ds() -> Dataset {
        let mut prng = Prng::new(5);
        let data: Vec<f64> = (0..10 * 16).map(|_| prng.uniform()).collect();
        let mut ds = Dataset::new(
            Tensor::new(vec![10, 16], data).unwrap(),
            (0..10).map(|i| i % 2).collect(),
            2,
            Provenance::Synthetic {
                generator: "uniform".into(),
                params: String::new(),
            },
        )
        .unwrap();
        ds.image_shape = Some((4, 4));
        ds.feature_range = Some((0.0, 1.0));
        ds
    }

    #[test]
    fn blur_severity_one_is_identity() {
        let ds = image_ds();
        let spec = CorruptionSpec::new(CorruptionKind::BoxBlur, 1).unwrap();
        let out = corrupt(&ds, spec, &mut Prng::new(0)).unwrap();
        assert_eq!(out.features(), ds.features());
        assert!(matches!(out.provenance, Provenance::Corrupted { .. }));
    }

    #[test]
    fn contrast_gamma_one_is_identity_and_table_monotone() {
        assert!(CONTRAST_GAMMA.windows(2).all(|w| w[0] > w[1]));
        let ds = image_ds();
        let row = ds.features().row(0);
        let mean = row.iter().sum::<f64>() / row.len() as f64;
        let back: Vec<f64> = row.iter().map(|&v| mean + 1.0 * (v - mean)).collect();
        for (a, b) in back.iter().zip(row) {
            assert!((a - b).abs() < 1e-15);
        }
        let spec = CorruptionSpec::new(CorruptionKind::Contrast, 5).unwrap();
        let out = corrupt(&ds, spec, &mut Prng::new(0)).unwrap();
        let spread = |r: &[f64]| {
            r.iter().copied().fold(f64::NEG_INFINITY, f64::max) - r.iter().copied().fold(f64::INFINITY, f64::min)
        };
        assert!(spread(out.features().row(0)) < spread(ds.features().row(0)));
    }

    #[test]
    fn gaussian_noise_monotone_in_severity() {
        let ds = image_ds();
        // Keep interior values so clipping does not mask the trend.
        let mut mid = ds.clone();
        mid.features = Tensor::full(&[10, 16], 0.5);
        let mut last = 0.0;
        for sev in 1..=5 {
            let spec = CorruptionSpec::new(CorruptionKind::GaussianNoise, sev).unwrap();
            let out = corrupt(&mid, spec, &mut Prng::new(99)).unwrap();
            let mse = out.features().data().iter().map(|v| (v - 0.5).powi(2)).sum::<f64>() / 160.0;
            assert!(mse > last, "severity {sev}: {mse} <= {last}");
            last = mse;
        }
        let out = corrupt(
            &ds,
            CorruptionSpec::new(CorruptionKind::GaussianNoise, 5).unwrap(),
            &mut Prng::new(1),
        )
        .unwrap();
        assert!(out.features().data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn corruption_spec_validation() {
        assert!(CorruptionSpec::new(CorruptionKind::Contrast, 0).is_err());
        assert!(CorruptionSpec::new(CorruptionKind::Contrast, 6).is_err());
        assert!(matches!("fog".parse::<CorruptionKind>(), Err(Error::Input(_))));
        assert_eq!("box_blur".parse::<CorruptionKind>().unwrap(), CorruptionKind::BoxBlur);
        assert_eq!(CorruptionSpec::grid().len(), 20);
    }

    #[test]
    fn batches_cover_every_example_once() {
        let b = epoch_batches(10, 3, &mut Prng::new(4)).unwrap();
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![3, 3, 3, 1]);
        let mut all: Vec<usize> = b.concat();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        let mut p1 = Prng::new(8);
        let mut p2 = Prng::new(8);
        for _ in 0..2 {
            assert_eq!(
                epoch_batches(10, 3, &mut p1).unwrap(),
                epoch_batches(10, 3, &mut p2).unwrap()
            );
        }
        assert!(epoch_batches(3, 0, &mut p1).is_err());
    }

    #[test]
    fn normalization_uses_train_statistics() {
        let ds = make_two_moons(100, 0.1, &mut Prng::new(6)).unwrap();
        let (train, test) = ds.split(0.3, &mut Prng::new(7)).unwrap();
        let norm = Normalization::fit(&train).unwrap();
        let test_n = norm.apply(&test).unwrap();
        let expected = (test.features().get(0, 0) - norm.mean[0]) / norm.std[0];
        assert_eq!(test_n.features().get(0, 0), expected);
        assert!(Normalization::fit(&test).is_err());
    }

    #[test]
    fn split_is_disjoint() {
        let ds = make_two_moons(50, 0.1, &mut Prng::new(6)).unwrap();
        let (train, test) = ds.split(0.2, &mut Prng::new(1)).unwrap();
        assert_eq!(train.len() + test.len(), 50);
        assert!(train.source_indices.iter().all(|i| !test.source_indices.contains(i)));
    }

    #[test]
    fn csv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        let ds = make_two_moons(20, 0.1, &mut Prng::new(6)).unwrap();
        ds.write_csv(&p).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("f0,f1,label\n"));
        let back = Dataset::read_csv(&p, 2).unwrap();
        assert_eq!(back.features(), ds.features());
        assert_eq!(back.labels(), ds.labels());
    }
}
