//! Fixed-budget exemplar memory and mixed batch composition.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::archive::Archive;
use crate::data::{Dataset, StageSchedule};
use crate::error::{Error, Result};

/// Exemplars of previously learned classes, stored per class.
#[derive(Clone, Debug, PartialEq)]
pub struct ExemplarMemory {
    pub budget: usize,
    sample_shape: Vec<usize>,
    /// Class id → flat, sample-major inputs.
    store: BTreeMap<usize, Vec<f64>>,
}

impl ExemplarMemory {
    pub fn new(budget: usize, sample_shape: Vec<usize>) -> Self {
        Self {
            budget,
            sample_shape,
            store: BTreeMap::new(),
        }
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.sample_shape
    }

    pub fn sample_len(&self) -> usize {
        self.sample_shape.iter().product()
    }

    pub fn classes(&self) -> impl Iterator<Item = usize> + '_ {
        self.store.keys().copied()
    }

    pub fn count(&self, class: usize) -> usize {
        self.store.get(&class).map_or(0, |v| v.len() / self.sample_len())
    }

    pub fn len(&self) -> usize {
        self.store.values().map(Vec::len).sum::<usize>() / self.sample_len()
    }

    pub fn is_empty(&self) -> bool {
        self.store.is_empty()
    }

    /// Per-class quota after adding `new_classes` classes.
    pub fn quota(&self, new_classes: usize) -> usize {
        match self.store.len() + new_classes {
            0 => 0,
            n => self.budget / n,
        }
    }

    /// Rebalances to quota `floor(budget / #classes)`: stored classes keep a
    /// uniform random subset of their exemplars, new classes contribute a
    /// uniform random sample (fewer if they lack data).
    pub fn update(&self, new_task_data: &Dataset, seed: u64) -> Result<ExemplarMemory> {
        if new_task_data.shape() != self.sample_shape.as_slice() {
            return Err(Error::ShapeMismatch(format!(
                "memory holds {:?} samples, got {:?}",
                self.sample_shape,
                new_task_data.shape()
            )));
        }
        let new_classes = new_task_data.classes();
        if let Some(&c) = new_classes.iter().find(|c| self.store.contains_key(c)) {
            return Err(Error::ClassCollision(c));
        }
        let q = self.quota(new_classes.len());
        let n = self.sample_len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = BTreeMap::new();
        for (&class, inputs) in &self.store {
            let count = inputs.len() / n;
            let kept = if count > q {
                let mut keep = index::sample(&mut rng, count, q).into_vec();
                keep.sort_unstable();
                keep.iter()
                    .flat_map(|&i| inputs[i * n..(i + 1) * n].iter().copied())
                    .collect()
            } else {
                inputs.clone()
            };
            store.insert(class, kept);
        }
        for class in new_classes {
            let members: Vec<usize> = (0..new_task_data.len())
                .filter(|&i| new_task_data.label(i) == class)
                .collect();
            let mut pick = index::sample(&mut rng, members.len(), q.min(members.len())).into_vec();
            pick.sort_unstable();
            let kept = pick
                .iter()
                .flat_map(|&p| new_task_data.input(members[p]).iter().copied())
                .collect();
            store.insert(class, kept);
        }
        Ok(ExemplarMemory {
            budget: self.budget,
            sample_shape: self.sample_shape.clone(),
            store,
        })
    }

    /// All stored exemplars as a dataset, classes ascending.
    pub fn as_dataset(&self, num_classes: usize) -> Result<Dataset> {
        let n = self.sample_len();
        let mut inputs = Vec::new();
        let mut labels = Vec::new();
        for (&class, v) in &self.store {
            inputs.extend_from_slice(v);
            labels.extend(std::iter::repeat_n(class, v.len() / n));
        }
        Dataset::new(
            "memory",
            crate::data::Split::Train,
            self.sample_shape.clone(),
            num_classes,
            inputs,
            labels,
        )
    }

    /// Exemplars of the classes of `task`.
    pub fn task_exemplars(&self, schedule: &StageSchedule, task: usize) -> Result<(Vec<f64>, Vec<usize>)> {
        let classes = schedule
            .classes_of(task)
            .map_err(|_| Error::MissingTaskExemplars(task))?;
        let n = self.sample_len();
        let mut inputs = Vec::new();
        let mut labels = Vec::new();
        for &c in classes {
            if let Some(v) = self.store.get(&c) {
                inputs.extend_from_slice(v);
                labels.extend(std::iter::repeat_n(c, v.len() / n));
            }
        }
        if labels.is_empty() {
            return Err(Error::MissingTaskExemplars(task));
        }
        Ok((inputs, labels))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut a = Archive::default();
        for (&c, v) in &self.store {
            let mut shape = vec![v.len() / self.sample_len()];
            shape.extend_from_slice(&self.sample_shape);
            a.push_f64(format!("class.{c}"), shape, v.clone());
        }
        a.manifest.insert("budget".into(), self.budget.to_string());
        a.manifest
            .insert("sample_shape".into(), serde_json::to_string(&self.sample_shape)?);
        a.write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let a = Archive::read(path)?;
        let budget = a
            .meta("budget")?
            .parse()
            .map_err(|_| Error::Format("bad memory budget".into()))?;
        let sample_shape: Vec<usize> = serde_json::from_str(a.meta("sample_shape")?)?;
        let mut store = BTreeMap::new();
        for arr in &a.arrays {
            let class = arr
                .name
                .strip_prefix("class.")
                .and_then(|c| c.parse().ok())
                .ok_or_else(|| Error::Format(format!("unexpected memory array {}", arr.name)))?;
            let (_, v) = a.f64(&arr.name)?;
            store.insert(class, v.to_vec());
        }
        Ok(Self {
            budget,
            sample_shape,
            store,
        })
    }
}

/// Samples of one task within a mini-batch.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskGroup {
    pub task: usize,
    pub inputs: Vec<f64>,
    /// Class ids.
    pub labels: Vec<usize>,
}

impl TaskGroup {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// A mini-batch partitioned by task, groups in ascending task order.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupedBatch {
    pub groups: Vec<TaskGroup>,
}

impl GroupedBatch {
    pub fn len(&self) -> usize {
        self.groups.iter().map(TaskGroup::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }
}

/// Number of mini-batches that cover the pooled memory and current data once.
pub fn steps_per_epoch(memory: &ExemplarMemory, current: &Dataset, batch_size: usize) -> usize {
    (memory.len() + current.len()).div_ceil(batch_size.max(1))
}

/// Mini-batch `step` drawn from the pool `memory ∪ current`.
///
/// Each epoch is a fresh uniform permutation of the pool (seeded by `seed`
/// and the epoch index) cut into consecutive batches, so the draw is
/// uniform without replacement and a function of `(seed, step)` alone.
pub fn sample_batch(
    memory: &ExemplarMemory,
    current: &Dataset,
    schedule: &StageSchedule,
    batch_size: usize,
    seed: u64,
    step: usize,
) -> Result<GroupedBatch> {
    if batch_size == 0 {
        return Err(Error::EmptyBatch);
    }
    let mem_len = memory.len();
    let pool = mem_len + current.len();
    if pool == 0 {
        return Err(Error::EmptySource);
    }
    if !memory.is_empty() && memory.sample_shape() != current.shape() && !current.is_empty() {
        return Err(Error::ShapeMismatch("memory and current data shapes differ".into()));
    }
    let per_epoch = pool.div_ceil(batch_size);
    let (epoch, pos) = (step / per_epoch, step % per_epoch);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..pool).collect();
    order.shuffle(&mut rng);
    let drawn = &order[pos * batch_size..((pos + 1) * batch_size).min(pool)];

    let n = if mem_len > 0 {
        memory.sample_len()
    } else {
        current.sample_len()
    };
    // Memory samples are addressed in class-ascending order.
    let offsets: Vec<(usize, usize, &Vec<f64>)> = memory
        .store
        .iter()
        .scan(0, |start, (&c, v)| {
            let s = *start;
            *start += v.len() / n;
            Some((s, c, v))
        })
        .collect();
    let mut groups: BTreeMap<usize, TaskGroup> = BTreeMap::new();
    for &i in drawn {
        let (label, x) = if i < mem_len {
            let k = offsets.partition_point(|(s, _, _)| *s <= i) - 1;
            let (s, c, v) = offsets[k];
            (c, &v[(i - s) * n..(i - s + 1) * n])
        } else {
            let j = i - mem_len;
            (current.label(j), current.input(j))
        };
        let task = schedule
            .task_of(label)
            .ok_or_else(|| Error::ConfigInvalid(format!("class {label} is not scheduled")))?;
        let g = groups.entry(task).or_insert_with(|| TaskGroup {
            task,
            inputs: Vec::new(),
            labels: Vec::new(),
        });
        g.inputs.extend_from_slice(x);
        g.labels.push(label);
    }
    Ok(GroupedBatch {
        groups: groups.into_values().collect(),
    })
}
