//! Task prediction, task-specific finetuning and stage evaluation.

use std::collections::BTreeMap;
use std::ops::Range;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{stage_data, Dataset, StageSchedule};
use crate::error::{Error, Result};
use crate::losses::block_class_loss_gradient;
use crate::memory::ExemplarMemory;
use crate::model::ModelState;
use crate::optim::OptimizerKind;
use crate::scalar::sigmoid;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskPrediction {
    /// 1-based task index.
    pub predicted_task: usize,
    /// Score of each learned task, task 1 first.
    pub scores: Vec<f64>,
    pub batch_ids: Vec<usize>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinetuneScope {
    HeadOnly,
    #[default]
    FullModel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub lr: f64,
    pub scope: FinetuneScope,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            lr: 0.001,
            scope: FinetuneScope::FullModel,
            batch_size: 32,
            optimizer: OptimizerKind::Radam,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::ConfigInvalid(
                "finetune batch_size must be positive and lr > 0".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Test samples per task-prediction batch.
    pub batch_size: usize,
    pub finetune: FinetuneConfig,
    /// Seed of the finetuning batch order.
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            finetune: FinetuneConfig::default(),
            seed: 0,
        }
    }
}

/// Task scores of each sample: the maximum sigmoid probability within each
/// task block. Row-major `batch x tasks`.
fn block_maxima(logits: &[f64], width: usize, blocks: &[Range<usize>]) -> Vec<f64> {
    logits
        .chunks(width)
        .flat_map(|row| {
            blocks
                .iter()
                .map(move |b| row[b.clone()].iter().fold(f64::NEG_INFINITY, |m, &z| m.max(z)))
                .map(sigmoid)
        })
        .collect()
}

/// Index of the largest value, lowest index on ties.
fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn learned_blocks(schedule: &StageSchedule, head_width: usize) -> Vec<Range<usize>> {
    let tasks = head_width / schedule.classes_per_task;
    (1..=tasks).map(|t| schedule.block(t)).collect()
}

fn prediction_from_logits(
    logits: &[f64],
    width: usize,
    blocks: &[Range<usize>],
    batch_ids: Vec<usize>,
) -> TaskPrediction {
    let per_sample = block_maxima(logits, width, blocks);
    let n = (logits.len() / width) as f64;
    let mut scores = vec![0.0; blocks.len()];
    for row in per_sample.chunks(blocks.len()) {
        for (s, v) in scores.iter_mut().zip(row) {
            *s += v;
        }
    }
    scores.iter_mut().for_each(|s| *s /= n);
    TaskPrediction {
        predicted_task: argmax(&scores) + 1,
        scores,
        batch_ids,
    }
}

/// Predicts the single task a batch was drawn from: the task whose block has
/// the highest mean (over the batch) of per-sample maximum probability.
pub fn predict_task(
    base: &ModelState,
    inputs: &[f64],
    batch: usize,
    schedule: &StageSchedule,
) -> Result<TaskPrediction> {
    if batch == 0 {
        return Err(Error::EmptyBatch);
    }
    let logits = base.logits(inputs, batch)?;
    let blocks = learned_blocks(schedule, base.head_width);
    if blocks.is_empty() {
        return Err(Error::ConfigInvalid("model head covers no complete task".into()));
    }
    Ok(prediction_from_logits(
        &logits,
        base.head_width,
        &blocks,
        (0..batch).collect(),
    ))
}

/// Copy of `base` trained on the memory exemplars of `task`, with the class
/// loss restricted to that task's head block.
pub fn finetune_task_model(
    base: &ModelState,
    memory: &ExemplarMemory,
    schedule: &StageSchedule,
    task: usize,
    config: &FinetuneConfig,
    seed: u64,
) -> Result<ModelState> {
    config.validate()?;
    let block = schedule.block(task);
    if block.end > base.head_width {
        return Err(Error::MissingTaskExemplars(task));
    }
    let (inputs, labels) = memory.task_exemplars(schedule, task)?;
    let offsets: Vec<usize> = labels
        .iter()
        .map(|&l| schedule.column_of(l).expect("stored classes are scheduled") - block.start)
        .collect();
    let n = memory.sample_len();
    let mut model = base.clone();
    let mut opt = config.optimizer.build();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(task as u64);
    let mut order: Vec<usize> = (0..labels.len()).collect();
    let num_phi = model.phi.len();
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let x: Vec<f64> = chunk
                .iter()
                .flat_map(|&i| inputs[i * n..(i + 1) * n].iter().copied())
                .collect();
            let y: Vec<usize> = chunk.iter().map(|&i| offsets[i]).collect();
            let (_, mut grads) = block_class_loss_gradient(&model, &x, &y, block.clone())?;
            if config.scope == FinetuneScope::HeadOnly {
                for g in &mut grads[..num_phi] {
                    g.iter_mut().for_each(|v| *v = 0.0);
                }
            }
            opt.step(&mut model, &grads, config.lr);
        }
    }
    Ok(model)
}

/// Per-task slice of a [`StageReport`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskBreakdown {
    pub task: usize,
    pub samples: usize,
    pub task_accuracy: f64,
    pub class_accuracy: f64,
    pub oracle_class_accuracy: f64,
    pub base_class_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: usize,
    pub seen_classes: usize,
    /// Fraction of test samples whose batch was assigned the right task.
    pub task_accuracy: f64,
    /// Predicted task, then the finetuned model of that task.
    pub class_accuracy: f64,
    /// True task, then the finetuned model of that task.
    pub oracle_class_accuracy: f64,
    /// Argmax over the whole head of the base model.
    pub base_class_accuracy: f64,
    /// Task accuracy when every sample is its own batch.
    pub single_sample_task_accuracy: f64,
    /// Mean class accuracy over stages 1..=stage.
    pub avg_incremental_accuracy: f64,
    pub per_task_breakdown: Vec<TaskBreakdown>,
}

/// Lazily finetuned task models, one per task within one evaluation.
struct FinetuneCache<'a> {
    base: &'a ModelState,
    memory: &'a ExemplarMemory,
    schedule: &'a StageSchedule,
    config: &'a FinetuneConfig,
    seed: u64,
    models: BTreeMap<usize, ModelState>,
}

impl FinetuneCache<'_> {
    fn get(&mut self, task: usize) -> Result<&ModelState> {
        if !self.models.contains_key(&task) {
            let m = finetune_task_model(self.base, self.memory, self.schedule, task, self.config, self.seed)?;
            self.models.insert(task, m);
        }
        Ok(&self.models[&task])
    }
}

fn classify_in_block(model: &ModelState, inputs: &[f64], batch: usize, block: Range<usize>) -> Result<Vec<usize>> {
    let logits = model.logits(inputs, batch)?;
    Ok(logits
        .chunks(model.head_width)
        .map(|row| block.start + argmax(&row[block.clone()]))
        .collect())
}

/// Evaluates the stage-`stage` expert on the test samples of every task
/// learned so far.
pub fn evaluate(
    base: &ModelState,
    memory: &ExemplarMemory,
    test: &Dataset,
    schedule: &StageSchedule,
    stage: usize,
    config: &EvalConfig,
) -> Result<StageReport> {
    schedule.check_task(stage)?;
    if config.batch_size == 0 {
        return Err(Error::ConfigInvalid("evaluation batch_size must be positive".into()));
    }
    if base.head_width < schedule.seen_classes(stage) {
        return Err(Error::ShapeMismatch(format!(
            "head width {} below {} seen classes",
            base.head_width,
            schedule.seen_classes(stage)
        )));
    }
    let blocks: Vec<Range<usize>> = (1..=stage).map(|t| schedule.block(t)).collect();
    let width = base.head_width;
    let mut cache = FinetuneCache {
        base,
        memory,
        schedule,
        config: &config.finetune,
        seed: config.seed,
        models: BTreeMap::new(),
    };
    let mut per_task = Vec::with_capacity(stage);
    let (mut total, mut task_ok, mut class_ok, mut oracle_ok, mut base_ok, mut single_ok) = (0, 0, 0, 0, 0, 0);
    for task in 1..=stage {
        let data = stage_data(test, schedule, task)?;
        let n = data.sample_len();
        let truth: Vec<usize> = data
            .labels()
            .iter()
            .map(|&l| schedule.column_of(l).expect("test classes are scheduled"))
            .collect();
        let (mut t_ok, mut c_ok, mut o_ok, mut b_ok) = (0, 0, 0, 0);
        for (chunk_idx, chunk) in truth.chunks(config.batch_size).enumerate() {
            let start = chunk_idx * config.batch_size;
            let x = &data.inputs()[start * n..(start + chunk.len()) * n];
            let logits = base.logits(x, chunk.len())?;
            let pred = prediction_from_logits(&logits, width, &blocks, (start..start + chunk.len()).collect());
            if pred.predicted_task == task {
                t_ok += chunk.len();
            }
            for row in block_maxima(&logits, width, &blocks).chunks(stage) {
                if argmax(row) + 1 == task {
                    single_ok += 1;
                }
            }
            let seen = 0..schedule.seen_classes(stage);
            for (row, &y) in logits.chunks(width).zip(chunk) {
                if argmax(&row[seen.clone()]) == y {
                    b_ok += 1;
                }
            }
            let p = pred.predicted_task;
            let predicted = classify_in_block(cache.get(p)?, x, chunk.len(), schedule.block(p))?;
            c_ok += predicted.iter().zip(chunk).filter(|(a, b)| a == b).count();
            let oracle = classify_in_block(cache.get(task)?, x, chunk.len(), schedule.block(task))?;
            o_ok += oracle.iter().zip(chunk).filter(|(a, b)| a == b).count();
        }
        let samples = truth.len();
        let frac = |k: usize| if samples == 0 { 0.0 } else { k as f64 / samples as f64 };
        per_task.push(TaskBreakdown {
            task,
            samples,
            task_accuracy: frac(t_ok),
            class_accuracy: frac(c_ok),
            oracle_class_accuracy: frac(o_ok),
            base_class_accuracy: frac(b_ok),
        });
        total += samples;
        task_ok += t_ok;
        class_ok += c_ok;
        oracle_ok += o_ok;
        base_ok += b_ok;
    }
    if total == 0 {
        return Err(Error::EmptyBatch);
    }
    let frac = |k: usize| k as f64 / total as f64;
    Ok(StageReport {
        stage,
        seen_classes: schedule.seen_classes(stage),
        task_accuracy: frac(task_ok),
        class_accuracy: frac(class_ok),
        oracle_class_accuracy: frac(oracle_ok),
        base_class_accuracy: frac(base_ok),
        single_sample_task_accuracy: frac(single_ok),
        avg_incremental_accuracy: frac(class_ok),
        per_task_breakdown: per_task,
    })
}
