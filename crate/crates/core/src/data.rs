//! Labeled datasets, class-incremental task schedules and dataset adapters.
//!
//! Three adapters are provided: synthetic Gaussian blobs, the IDX byte layout
//! used by the classic digit benchmarks (optionally gzip-compressed), and a
//! plain directory format holding one binary array file per split plus a
//! `meta.txt` sidecar.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// An ordered set of `(input, label)` samples sharing one input shape.
///
/// Inputs are stored contiguously, sample-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub split: Split,
    pub num_classes: usize,
    shape: Vec<usize>,
    inputs: Vec<f64>,
    labels: Vec<usize>,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        split: Split,
        shape: Vec<usize>,
        num_classes: usize,
        inputs: Vec<f64>,
        labels: Vec<usize>,
    ) -> Result<Self> {
        let sample_len: usize = shape.iter().product();
        if sample_len == 0 {
            return Err(Error::ShapeMismatch(format!("empty sample shape {shape:?}")));
        }
        if inputs.len() != sample_len * labels.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} values for {} samples of shape {shape:?}",
                inputs.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                width: num_classes,
            });
        }
        Ok(Self {
            name: name.into(),
            split,
            num_classes,
            shape,
            inputs,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn sample_len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn inputs(&self) -> &[f64] {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn input(&self, i: usize) -> &[f64] {
        let n = self.sample_len();
        &self.inputs[i * n..(i + 1) * n]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    /// Class ids present in the dataset.
    pub fn classes(&self) -> BTreeSet<usize> {
        self.labels.iter().copied().collect()
    }

    /// Samples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut inputs = Vec::with_capacity(indices.len() * self.sample_len());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            inputs.extend_from_slice(self.input(i));
            labels.push(self.labels[i]);
        }
        Dataset {
            name: self.name.clone(),
            split: self.split,
            num_classes: self.num_classes,
            shape: self.shape.clone(),
            inputs,
            labels,
        }
    }

    /// Deterministic reordering of the samples.
    pub fn shuffled(&self, seed: u64) -> Dataset {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        self.subset(&idx)
    }

    /// Number of channels used for normalization: the leading axis of an
    /// image-shaped input, or every feature of a flat vector.
    fn channels(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[0]
        } else {
            self.sample_len()
        }
    }

    /// Per-channel mean and standard deviation over all samples.
    pub fn channel_stats(&self) -> ChannelStats {
        let channels = self.channels();
        let per_channel = self.sample_len() / channels;
        let mut sum = vec![0.0; channels];
        let mut sq = vec![0.0; channels];
        for x in self.inputs.chunks(self.sample_len()) {
            for (c, block) in x.chunks(per_channel).enumerate() {
                for &v in block {
                    sum[c] += v;
                    sq[c] += v * v;
                }
            }
        }
        let count = (self.len() * per_channel).max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| (s / count - m * m).max(0.0).sqrt())
            .collect();
        ChannelStats { mean, std }
    }

    /// Standardize every channel with the given statistics.
    pub fn normalize(&mut self, stats: &ChannelStats) -> Result<()> {
        let channels = self.channels();
        if stats.mean.len() != channels || stats.std.len() != channels {
            return Err(Error::ShapeMismatch(format!(
                "statistics for {} channels, data has {channels}",
                stats.mean.len()
            )));
        }
        let n = self.sample_len();
        let per_channel = n / channels;
        for x in self.inputs.chunks_mut(n) {
            for (c, block) in x.chunks_mut(per_channel).enumerate() {
                let s = if stats.std[c] > 1e-12 { stats.std[c] } else { 1.0 };
                for v in block {
                    *v = (*v - stats.mean[c]) / s;
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Ordered partition of classes into tasks. Tasks are numbered from 1.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSchedule {
    pub num_tasks: usize,
    pub classes_per_task: usize,
    pub class_order: Vec<usize>,
    task_of_class: BTreeMap<usize, usize>,
}

impl StageSchedule {
    pub fn build(total_classes: usize, num_tasks: usize, seed: u64, shuffle: bool) -> Result<Self> {
        if num_tasks == 0 || total_classes == 0 || !total_classes.is_multiple_of(num_tasks) {
            return Err(Error::IndivisibleClasses {
                total: total_classes,
                tasks: num_tasks,
            });
        }
        let mut class_order: Vec<usize> = (0..total_classes).collect();
        if shuffle {
            class_order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        }
        Self::from_order(class_order, num_tasks)
    }

    /// Schedule over an explicit class order, chunked into `num_tasks` tasks.
    pub fn from_order(class_order: Vec<usize>, num_tasks: usize) -> Result<Self> {
        let total = class_order.len();
        if num_tasks == 0 || total == 0 || !total.is_multiple_of(num_tasks) {
            return Err(Error::IndivisibleClasses {
                total,
                tasks: num_tasks,
            });
        }
        let classes_per_task = total / num_tasks;
        let mut task_of_class = BTreeMap::new();
        for (pos, &c) in class_order.iter().enumerate() {
            if task_of_class.insert(c, pos / classes_per_task + 1).is_some() {
                return Err(Error::ConfigInvalid(format!("class {c} repeated in class order")));
            }
        }
        Ok(Self {
            num_tasks,
            classes_per_task,
            class_order,
            task_of_class,
        })
    }

    pub fn check_task(&self, task: usize) -> Result<()> {
        if task == 0 || task > self.num_tasks {
            Err(Error::OutOfRangeTask {
                task,
                num_tasks: self.num_tasks,
            })
        } else {
            Ok(())
        }
    }

    /// Classes of `task`, in schedule order.
    pub fn classes_of(&self, task: usize) -> Result<&[usize]> {
        self.check_task(task)?;
        let k = self.classes_per_task;
        Ok(&self.class_order[(task - 1) * k..task * k])
    }

    pub fn tasks(&self) -> Vec<&[usize]> {
        self.class_order.chunks(self.classes_per_task).collect()
    }

    pub fn task_of(&self, class: usize) -> Option<usize> {
        self.task_of_class.get(&class).copied()
    }

    /// Head column assigned to `class`: its position in the class order.
    pub fn column_of(&self, class: usize) -> Option<usize> {
        let t = self.task_of(class)?;
        let base = (t - 1) * self.classes_per_task;
        self.class_order[base..base + self.classes_per_task]
            .iter()
            .position(|&c| c == class)
            .map(|p| base + p)
    }

    pub fn class_of_column(&self, column: usize) -> usize {
        self.class_order[column]
    }

    /// Head columns `[start, end)` owned by `task`.
    pub fn block(&self, task: usize) -> std::ops::Range<usize> {
        (task - 1) * self.classes_per_task..task * self.classes_per_task
    }

    /// Number of classes seen after completing `task`.
    pub fn seen_classes(&self, task: usize) -> usize {
        task * self.classes_per_task
    }
}

/// Samples of `dataset` whose class belongs to task `t`, in dataset order.
pub fn stage_data(dataset: &Dataset, schedule: &StageSchedule, t: usize) -> Result<Dataset> {
    schedule.check_task(t)?;
    let idx: Vec<usize> = (0..dataset.len())
        .filter(|&i| schedule.task_of(dataset.label(i)) == Some(t))
        .collect();
    Ok(dataset.subset(&idx))
}

/// Training split of [`make_synthetic_blobs_split`].
pub fn make_synthetic_blobs(
    num_classes: usize,
    per_class: usize,
    dim: usize,
    separation: f64,
    seed: u64,
) -> Result<Dataset> {
    Ok(make_synthetic_blobs_split(num_classes, per_class, 0, dim, separation, seed)?.0)
}

/// Gaussian clusters with unit isotropic noise, one mean per class.
///
/// Means sit on a grid with spacing `separation` (grid cells are assigned to
/// classes by a seeded shuffle), so they are pairwise at least `separation`
/// apart. Train and test splits share the means and draw independent noise.
pub fn make_synthetic_blobs_split(
    num_classes: usize,
    train_per_class: usize,
    test_per_class: usize,
    dim: usize,
    separation: f64,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    if num_classes == 0 || dim == 0 || train_per_class + test_per_class == 0 {
        return Err(Error::ConfigInvalid("blob counts must be positive".into()));
    }
    let side = (1usize..)
        .find(|s| s.checked_pow(dim as u32).is_none_or(|v| v >= num_classes))
        .unwrap();
    // The first `num_classes` cells of a `side^dim` grid.
    let mut cells: Vec<usize> = (0..num_classes).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    cells.shuffle(&mut rng);
    let means: Vec<Vec<f64>> = cells
        .iter()
        .map(|&cell| {
            let mut rest = cell;
            (0..dim)
                .map(|_| {
                    let coord = rest % side;
                    rest /= side;
                    coord as f64 * separation
                })
                .collect()
        })
        .collect();

    let draw = |per_class: usize, stream: u64, split: Split| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        let mut inputs = Vec::with_capacity(num_classes * per_class * dim);
        let mut labels = Vec::with_capacity(num_classes * per_class);
        for (class, mean) in means.iter().enumerate() {
            for _ in 0..per_class {
                for &m in mean {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    inputs.push(m + z);
                }
                labels.push(class);
            }
        }
        Dataset::new("blobs", split, vec![dim], num_classes, inputs, labels)
    };
    Ok((
        draw(train_per_class, 1, Split::Train)?,
        draw(test_per_class, 2, Split::Test)?,
    ))
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..]).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

/// Parse an unsigned-byte IDX buffer into `(dims, values)`.
pub fn parse_idx(bytes: &[u8]) -> Result<(Vec<usize>, Vec<u8>)> {
    if bytes.len() < 4 || bytes[0] != 0 || bytes[1] != 0 {
        return Err(Error::Format("bad IDX magic".into()));
    }
    if bytes[2] != 0x08 {
        return Err(Error::Format(format!("unsupported IDX element type {:#04x}", bytes[2])));
    }
    let ndims = bytes[3] as usize;
    let header = 4 + 4 * ndims;
    if bytes.len() < header {
        return Err(Error::Format("truncated IDX header".into()));
    }
    let dims: Vec<usize> = (0..ndims)
        .map(|d| {
            let o = 4 + 4 * d;
            u32::from_be_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]) as usize
        })
        .collect();
    let count: usize = dims.iter().product();
    let body = &bytes[header..];
    if body.len() != count {
        return Err(Error::Format(format!(
            "IDX body has {} bytes, header declares {count}",
            body.len()
        )));
    }
    Ok((dims, body.to_vec()))
}

pub fn write_idx(path: &Path, dims: &[usize], values: &[u8]) -> Result<()> {
    let mut out = vec![0u8, 0, 0x08, dims.len() as u8];
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(values);
    fs::write(path, out)?;
    Ok(())
}

fn find_file(dir: &Path, stem: &str) -> Result<std::path::PathBuf> {
    for candidate in [format!("{stem}.gz"), stem.to_string()] {
        let p = dir.join(candidate);
        if p.exists() {
            return Ok(p);
        }
    }
    Err(Error::Format(format!("{stem}[.gz] not found in {}", dir.display())))
}

fn load_idx_split(dir: &Path, prefix: &str, split: Split, name: &str) -> Result<Dataset> {
    let (idims, pixels) = parse_idx(&read_maybe_gz(&find_file(
        dir,
        &format!("{prefix}-images-idx3-ubyte"),
    )?)?)?;
    let (ldims, labels) = parse_idx(&read_maybe_gz(&find_file(
        dir,
        &format!("{prefix}-labels-idx1-ubyte"),
    )?)?)?;
    if idims.len() != 3 || ldims.len() != 1 || idims[0] != ldims[0] {
        return Err(Error::Format(format!("IDX dims {idims:?} / {ldims:?} disagree")));
    }
    let labels: Vec<usize> = labels.into_iter().map(usize::from).collect();
    let num_classes = labels.iter().max().map_or(0, |m| m + 1);
    let inputs = pixels.into_iter().map(|p| f64::from(p) / 255.0).collect();
    Dataset::new(name, split, vec![1, idims[1], idims[2]], num_classes, inputs, labels)
}

/// Load `train-*` and `t10k-*` IDX files from `dir`, standardized with the
/// training split's channel statistics.
pub fn load_idx_digits(dir: &Path) -> Result<(Dataset, Dataset)> {
    let name = dir
        .file_name()
        .map_or_else(|| "idx".to_string(), |n| n.to_string_lossy().into_owned());
    let mut train = load_idx_split(dir, "train", Split::Train, &name)?;
    let mut test = load_idx_split(dir, "t10k", Split::Test, &name)?;
    let classes = train.num_classes.max(test.num_classes);
    train.num_classes = classes;
    test.num_classes = classes;
    let stats = train.channel_stats();
    train.normalize(&stats)?;
    test.normalize(&stats)?;
    Ok((train, test))
}

/// Element type of a directory-format array file.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    U8,
    F32,
    F64,
}

impl DType {
    fn parse(s: &str) -> Result<Self> {
        match s {
            "u8" => Ok(DType::U8),
            "f32" => Ok(DType::F32),
            "f64" => Ok(DType::F64),
            other => Err(Error::Format(format!("unknown dtype {other}"))),
        }
    }

    fn size(self) -> usize {
        match self {
            DType::U8 => 1,
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    fn as_str(self) -> &'static str {
        match self {
            DType::U8 => "u8",
            DType::F32 => "f32",
            DType::F64 => "f64",
        }
    }
}

/// Parse `key = value` lines; `#` starts a comment.
pub fn parse_key_values(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for line in text.lines() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("expected key = value, got {line:?}")))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

/// Write `dataset` pair in the directory format: `meta.txt`, `train.bin`,
/// `test.bin`. Each record is a little-endian `u32` label followed by the
/// sample values in `dtype`.
pub fn write_array_dir(dir: &Path, train: &Dataset, test: &Dataset, dtype: DType) -> Result<()> {
    fs::create_dir_all(dir)?;
    let shape = train
        .shape()
        .iter()
        .map(|d| d.to_string())
        .collect::<Vec<_>>()
        .join("x");
    let meta = format!(
        "name = {}\nnum_classes = {}\nshape = {shape}\ndtype = {}\n",
        train.name,
        train.num_classes.max(test.num_classes),
        dtype.as_str()
    );
    fs::write(dir.join("meta.txt"), meta)?;
    for ds in [train, test] {
        let mut f = std::io::BufWriter::new(fs::File::create(dir.join(format!("{}.bin", ds.split.as_str())))?);
        for i in 0..ds.len() {
            f.write_all(&(ds.label(i) as u32).to_le_bytes())?;
            for &v in ds.input(i) {
                match dtype {
                    DType::U8 => f.write_all(&[v.round().clamp(0.0, 255.0) as u8])?,
                    DType::F32 => f.write_all(&(v as f32).to_le_bytes())?,
                    DType::F64 => f.write_all(&v.to_le_bytes())?,
                }
            }
        }
        f.flush()?;
    }
    Ok(())
}

/// Read a directory-format dataset pair without normalization.
pub fn read_array_dir_raw(dir: &Path) -> Result<(Dataset, Dataset)> {
    let meta = parse_key_values(&fs::read_to_string(dir.join("meta.txt"))?)?;
    let get = |k: &str| meta.get(k).ok_or_else(|| Error::Format(format!("meta.txt lacks {k}")));
    let num_classes: usize = get("num_classes")?
        .parse()
        .map_err(|_| Error::Format("num_classes is not an integer".into()))?;
    let shape: Vec<usize> = get("shape")?
        .split('x')
        .map(|s| s.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Format("bad shape".into()))?;
    let dtype = DType::parse(get("dtype")?)?;
    let name = meta.get("name").cloned().unwrap_or_else(|| "arrays".into());
    let sample_len: usize = shape.iter().product();
    let record = 4 + sample_len * dtype.size();
    let read = |split: Split| -> Result<Dataset> {
        let bytes = fs::read(dir.join(format!("{}.bin", split.as_str())))?;
        if bytes.len() % record != 0 {
            return Err(Error::Format(format!(
                "{}.bin length {} is not a multiple of the record size {record}",
                split.as_str(),
                bytes.len()
            )));
        }
        let mut inputs = Vec::with_capacity(bytes.len() / record * sample_len);
        let mut labels = Vec::with_capacity(bytes.len() / record);
        for rec in bytes.chunks(record) {
            labels.push(u32::from_le_bytes([rec[0], rec[1], rec[2], rec[3]]) as usize);
            let body = &rec[4..];
            match dtype {
                DType::U8 => inputs.extend(body.iter().map(|&b| f64::from(b))),
                DType::F32 => inputs.extend(
                    body.chunks(4)
                        .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]]))),
                ),
                DType::F64 => inputs.extend(
                    body.chunks(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))),
                ),
            }
        }
        Dataset::new(name.clone(), split, shape.clone(), num_classes, inputs, labels)
    };
    Ok((read(Split::Train)?, read(Split::Test)?))
}

/// Read a directory-format dataset pair, standardized with training statistics.
pub fn load_array_dir(dir: &Path) -> Result<(Dataset, Dataset)> {
    let (mut train, mut test) = read_array_dir_raw(dir)?;
    let stats = train.channel_stats();
    train.normalize(&stats)?;
    test.normalize(&stats)?;
    Ok((train, test))
}
