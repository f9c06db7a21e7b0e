//! Datasets, vertical feature partitioning and task reassignment.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Labeled samples. Sample `i` has global index `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub n_classes: usize,
}

impl Dataset {
    pub fn new(features: Matrix, labels: Vec<usize>, n_classes: usize) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::shape(format!(
                "{} feature rows but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(Error::data(format!("label {bad} outside {n_classes} classes")));
        }
        let counts = class_counts(&labels, n_classes);
        if let Some(missing) = counts.iter().position(|&c| c == 0) {
            return Err(Error::data(format!("class {missing} has no samples")));
        }
        Ok(Self {
            features,
            labels,
            n_classes,
        })
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

    /// Replaces the labels with their image under `task`.
    pub fn reassigned(&self, task: &TaskSpec) -> Result<Dataset> {
        if task.c_orig != self.n_classes {
            return Err(Error::config(format!(
                "task `{}` expects {} original classes, dataset has {}",
                task.name, task.c_orig, self.n_classes
            )));
        }
        Dataset::new(
            self.features.clone(),
            reassign_task(&self.labels, task)?,
            task.c_new,
        )
    }

    pub fn subset(&self, idx: &[usize]) -> Result<Dataset> {
        Dataset::new(
            self.features.select_rows(idx),
            idx.iter().map(|&i| self.labels[i]).collect(),
            self.n_classes,
        )
    }
}

pub fn class_counts(labels: &[usize], n_classes: usize) -> Vec<usize> {
    let mut counts = vec![0; n_classes];
    for &l in labels {
        if l < n_classes {
            counts[l] += 1;
        }
    }
    counts
}

/// Gaussian class blobs (unit variance) around centers at distance
/// `separation` from the origin in seeded random directions. Sample `i` belongs
/// to class `i % n_classes`, so class sizes differ by at most one.
pub fn gen_synthetic(
    n: usize,
    d: usize,
    n_classes: usize,
    separation: f64,
    seed: u64,
) -> Result<Dataset> {
    gen_synthetic_modes(n, d, n_classes, separation, 1, seed)
}

/// Like [`gen_synthetic`], but every class is an equal mixture of `modes`
/// blobs with independent centers, so classes are not convex in feature
/// space. `modes = 1` reproduces [`gen_synthetic`] exactly.
pub fn gen_synthetic_modes(
    n: usize,
    d: usize,
    n_classes: usize,
    separation: f64,
    modes: usize,
    seed: u64,
) -> Result<Dataset> {
    if modes == 0 {
        return Err(Error::config("each class needs at least one mode"));
    }
    if n_classes < 2 {
        return Err(Error::config("synthetic data needs at least 2 classes"));
    }
    if n < n_classes {
        return Err(Error::config(format!(
            "cannot draw {n} samples covering {n_classes} classes"
        )));
    }
    if d < n_classes {
        return Err(Error::config(format!(
            "feature dimension {d} is smaller than the class count {n_classes}"
        )));
    }
    if !separation.is_finite() || separation < 0.0 {
        return Err(Error::config("separation must be finite and nonnegative"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = Vec::with_capacity(n_classes * modes);
    for _ in 0..n_classes * modes {
        let mut dir: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        dir.iter_mut().for_each(|v| *v *= separation / norm);
        centers.push(dir);
    }
    let mut data = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % n_classes;
        let mode = (i / n_classes) % modes;
        labels.push(c);
        for center in &centers[c * modes + mode] {
            let z: f64 = StandardNormal.sample(&mut rng);
            data.push(center + z);
        }
    }
    Dataset::new(Matrix::from_vec(n, d, data)?, labels, n_classes)
}

struct IdxReader<'a> {
    path: &'a Path,
    bytes: Vec<u8>,
    pos: usize,
}

impl<'a> IdxReader<'a> {
    fn open(path: &'a Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(Self {
            path,
            bytes,
            pos: 0,
        })
    }

    fn err(&self, offset: usize, message: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            offset: offset as u64,
            message: message.into(),
        }
    }

    fn read_u32(&mut self) -> Result<u32> {
        let end = self.pos + 4;
        let Some(b) = self.bytes.get(self.pos..end) else {
            return Err(self.err(self.pos, "truncated header"));
        };
        let v = u32::from_be_bytes([b[0], b[1], b[2], b[3]]);
        self.pos = end;
        Ok(v)
    }

    fn expect_magic(&mut self, magic: u32) -> Result<()> {
        let found = self.read_u32()?;
        if found != magic {
            return Err(self.err(0, format!("bad magic 0x{found:08x}, expected 0x{magic:08x}")));
        }
        Ok(())
    }

    fn body(&self, len: usize) -> Result<&[u8]> {
        let available = self.bytes.len() - self.pos;
        if available < len {
            return Err(self.err(
                self.bytes.len(),
                format!("truncated body: need {len} bytes, found {available}"),
            ));
        }
        Ok(&self.bytes[self.pos..self.pos + len])
    }
}

/// Reads an IDX image/label pair. Pixels are scaled to `[0, 1]` and each
/// image is flattened row-major. The class count is `max(label) + 1`.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let images_path = images_path.as_ref();
    let labels_path = labels_path.as_ref();

    let mut img = IdxReader::open(images_path)?;
    img.expect_magic(IDX_IMAGES_MAGIC)?;
    let n_images = img.read_u32()? as usize;
    let rows = img.read_u32()? as usize;
    let cols = img.read_u32()? as usize;
    let d = rows * cols;
    let pixels = img.body(n_images * d)?;
    let data: Vec<f64> = pixels.iter().map(|&p| f64::from(p) / 255.0).collect();

    let mut lab = IdxReader::open(labels_path)?;
    lab.expect_magic(IDX_LABELS_MAGIC)?;
    let count_offset = lab.pos;
    let n_labels = lab.read_u32()? as usize;
    if n_labels != n_images {
        return Err(lab.err(
            count_offset,
            format!("label count {n_labels} does not match image count {n_images}"),
        ));
    }
    let labels: Vec<usize> = lab.body(n_labels)?.iter().map(|&l| l as usize).collect();
    let n_classes = labels.iter().max().map_or(0, |m| m + 1);
    Dataset::new(Matrix::from_vec(n_images, d, data)?, labels, n_classes)
}

/// Serializes images and labels in IDX format.
pub fn write_idx(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
    rows: usize,
    cols: usize,
    pixels: &[u8],
    labels: &[u8],
) -> Result<()> {
    let n = labels.len();
    if pixels.len() != n * rows * cols {
        return Err(Error::shape("pixel buffer does not match image count and size"));
    }
    let mut img = Vec::with_capacity(16 + pixels.len());
    for v in [IDX_IMAGES_MAGIC, n as u32, rows as u32, cols as u32] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    img.extend_from_slice(pixels);
    let mut lab = Vec::with_capacity(8 + n);
    for v in [IDX_LABELS_MAGIC, n as u32] {
        lab.extend_from_slice(&v.to_be_bytes());
    }
    lab.extend_from_slice(labels);
    for (path, bytes) in [(images_path.as_ref(), img), (labels_path.as_ref(), lab)] {
        fs::write(path, bytes).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
    }
    Ok(())
}

/// Seeded shuffle of the `d` columns, cut into `k` contiguous chunks. Chunk
/// sizes differ by at most one and the larger chunks go to lower party ids.
pub fn partition_features(d: usize, k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k == 0 {
        return Err(Error::config("need at least one party"));
    }
    if d < k {
        return Err(Error::config(format!("cannot split {d} columns across {k} parties")));
    }
    let mut cols: Vec<usize> = (0..d).collect();
    cols.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let base = d / k;
    let extra = d % k;
    let mut out = Vec::with_capacity(k);
    let mut start = 0;
    for p in 0..k {
        let size = base + usize::from(p < extra);
        out.push(cols[start..start + size].to_vec());
        start += size;
    }
    Ok(out)
}

/// A dataset whose columns are split among passive parties.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionedDataset {
    pub base: Dataset,
    pub party_columns: Vec<Vec<usize>>,
}

impl PartitionedDataset {
    pub fn new(base: Dataset, party_columns: Vec<Vec<usize>>) -> Result<Self> {
        let d = base.dim();
        let mut seen = vec![false; d];
        for (p, cols) in party_columns.iter().enumerate() {
            if cols.is_empty() {
                return Err(Error::config(format!("party {p} holds no columns")));
            }
            for &c in cols {
                if c >= d || std::mem::replace(&mut seen[c], true) {
                    return Err(Error::config(format!(
                        "column {c} is out of range or assigned twice"
                    )));
                }
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::config("party columns do not cover every feature"));
        }
        Ok(Self {
            base,
            party_columns,
        })
    }

    /// Random column split across `k` parties.
    pub fn split(base: Dataset, k: usize, seed: u64) -> Result<Self> {
        let cols = partition_features(base.dim(), k, seed)?;
        Self::new(base, cols)
    }

    pub fn n_parties(&self) -> usize {
        self.party_columns.len()
    }

    pub fn party_widths(&self) -> Vec<usize> {
        self.party_columns.iter().map(Vec::len).collect()
    }

    pub fn party_features(&self, party: usize) -> Matrix {
        self.base.features.select_cols(&self.party_columns[party])
    }

    pub fn labels(&self) -> &[usize] {
        &self.base.labels
    }

    pub fn n_classes(&self) -> usize {
        self.base.n_classes
    }

    pub fn len(&self) -> usize {
        self.base.len()
    }

    pub fn is_empty(&self) -> bool {
        self.base.is_empty()
    }

    pub fn reassigned(&self, task: &TaskSpec) -> Result<Self> {
        Ok(Self {
            base: self.base.reassigned(task)?,
            party_columns: self.party_columns.clone(),
        })
    }
}

/// Surjective relabeling from `c_orig` classes onto `c_new` classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub mapping: Vec<usize>,
    pub c_orig: usize,
    pub c_new: usize,
}

impl TaskSpec {
    pub fn new(name: impl Into<String>, mapping: Vec<usize>, c_new: usize) -> Result<Self> {
        let spec = Self {
            name: name.into(),
            c_orig: mapping.len(),
            mapping,
            c_new,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn identity(n_classes: usize) -> Self {
        Self {
            name: "original".into(),
            mapping: (0..n_classes).collect(),
            c_orig: n_classes,
            c_new: n_classes,
        }
    }

    /// Groups `c_orig` classes into `c_new` contiguous, near-equal blocks.
    pub fn grouped(name: impl Into<String>, c_orig: usize, c_new: usize) -> Result<Self> {
        if c_new == 0 || c_new > c_orig {
            return Err(Error::config(format!("cannot group {c_orig} classes into {c_new}")));
        }
        Self::new(name, (0..c_orig).map(|c| c * c_new / c_orig).collect(), c_new)
    }

    pub fn validate(&self) -> Result<()> {
        if self.mapping.len() != self.c_orig {
            return Err(Error::config(format!(
                "task `{}` maps {} classes but declares {}",
                self.name,
                self.mapping.len(),
                self.c_orig
            )));
        }
        if self.c_new > self.c_orig || self.c_new == 0 {
            return Err(Error::config(format!(
                "task `{}` must map onto 1..={} classes",
                self.name, self.c_orig
            )));
        }
        let mut hit = vec![false; self.c_new];
        for &m in &self.mapping {
            if m >= self.c_new {
                return Err(Error::config(format!(
                    "task `{}` maps to class {m} outside {}",
                    self.name, self.c_new
                )));
            }
            hit[m] = true;
        }
        if hit.iter().any(|h| !h) {
            return Err(Error::config(format!("task `{}` is not surjective", self.name)));
        }
        Ok(())
    }
}

pub fn reassign_task(labels: &[usize], spec: &TaskSpec) -> Result<Vec<usize>> {
    labels
        .iter()
        .map(|&l| {
            spec.mapping.get(l).copied().ok_or_else(|| {
                Error::data(format!(
                    "label {l} outside the {} classes of task `{}`",
                    spec.c_orig, spec.name
                ))
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TaskFamily {
    /// Ten original classes: pairs, four near-balanced groups, parity.
    MnistLike10,
    /// Repeated halving of `C` classes down to two.
    Generic(usize),
}

impl TaskFamily {
    pub fn for_classes(n_classes: usize) -> Self {
        if n_classes == 10 {
            TaskFamily::MnistLike10
        } else {
            TaskFamily::Generic(n_classes)
        }
    }
}

/// The built-in chain of reassigned tasks, starting with the identity task.
pub fn builtin_task_specs(family: TaskFamily) -> Vec<TaskSpec> {
    match family {
        TaskFamily::MnistLike10 => vec![
            TaskSpec::identity(10),
            TaskSpec::new("task1", (0..10).map(|c| c / 2).collect(), 5)
                .expect("pairing is surjective"),
            TaskSpec::grouped("task2", 10, 4).expect("grouping is surjective"),
            TaskSpec::new("task3", (0..10).map(|c| c % 2).collect(), 2)
                .expect("parity is surjective"),
        ],
        TaskFamily::Generic(c) => {
            let mut specs = vec![TaskSpec::identity(c)];
            let mut next = c.div_ceil(2);
            let mut i = 1;
            while c > 2 && next >= 2 {
                specs.push(
                    TaskSpec::grouped(format!("task{i}"), c, next).expect("grouping is surjective"),
                );
                if next == 2 {
                    break;
                }
                next = next.div_ceil(2);
                i += 1;
            }
            specs
        }
    }
}

/// Looks up a built-in task by name for a dataset with `n_classes` classes.
pub fn find_task(name: &str, n_classes: usize) -> Result<TaskSpec> {
    builtin_task_specs(TaskFamily::for_classes(n_classes))
        .into_iter()
        .find(|t| t.name == name)
        .ok_or_else(|| {
            Error::config(format!("no built-in task `{name}` for {n_classes} classes"))
        })
}
