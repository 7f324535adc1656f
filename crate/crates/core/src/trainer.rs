//! Stage loop and the per-mini-batch task-model averaging update.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{stage_data, Dataset, StageSchedule};
use crate::error::{Error, Result};
use crate::inference::{evaluate, EvalConfig, StageReport};
use crate::losses::{combined_loss, LossTerms, LossWeights};
use crate::memory::{sample_batch, steps_per_epoch, ExemplarMemory, GroupedBatch};
use crate::model::{average_weights, Arch, ModelState};
use crate::optim::{Optimizer, OptimizerKind};

/// Switches for the component ablation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Components {
    pub disable_kd: bool,
    pub disable_gtk: bool,
    /// Train one model on the whole batch instead of per-task clones.
    pub disable_averaging: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_initial: f64,
    /// Decay period in epochs; 0 disables decay.
    pub lr_decay_every: usize,
    pub lr_decay_factor: f64,
    pub inner_steps_per_group: usize,
    pub loss_weights: LossWeights,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    pub components: Components,
    /// Average over every task seen so far, letting tasks absent from a
    /// batch contribute their unmodified clone.
    pub average_includes_untrained_clones: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 70,
            batch_size: 128,
            lr_initial: 0.01,
            lr_decay_every: 20,
            lr_decay_factor: 0.1,
            inner_steps_per_group: 1,
            loss_weights: LossWeights::default(),
            seed: 0,
            optimizer: OptimizerKind::Radam,
            components: Components::default(),
            average_includes_untrained_clones: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::ConfigInvalid(m.into()));
        if self.batch_size == 0 || self.inner_steps_per_group == 0 {
            return bad("batch_size and inner_steps_per_group must be positive");
        }
        if !(self.lr_initial.is_finite() && self.lr_initial >= 0.0) {
            return bad("lr_initial must be finite and non-negative");
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return bad("lr_decay_factor must lie in (0, 1]");
        }
        self.loss_weights.validate()
    }

    /// Loss weights after applying the ablation switches.
    pub fn effective_weights(&self) -> LossWeights {
        let mut w = self.loss_weights;
        if self.components.disable_kd {
            w.beta = 0.0;
        }
        if self.components.disable_gtk {
            w.gamma = 0.0;
        }
        w
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.lr_decay_every {
            0 => self.lr_initial,
            every => self.lr_initial * self.lr_decay_factor.powi((epoch / every) as i32),
        }
    }
}

/// Deterministic sub-seed for `(stage, purpose)` derived from `seed`.
pub fn derive_seed(seed: u64, stage: usize, purpose: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((stage as u64) << 8) | purpose);
    rng.next_u64()
}

/// Seed of the mini-batch order of `stage` (see [`sample_batch`]).
pub fn batch_seed(seed: u64, stage: usize) -> u64 {
    derive_seed(seed, stage, SEED_BATCH)
}

const SEED_HEAD: u64 = 1;
const SEED_BATCH: u64 = 2;
const SEED_MEMORY: u64 = 3;
const SEED_EVAL: u64 = 4;

pub struct StageState {
    pub stage: usize,
    pub current_model: ModelState,
    /// Frozen expert of the previous stage; `None` at stage 1.
    pub teacher_model: Option<ModelState>,
    pub memory: ExemplarMemory,
    pub schedule: StageSchedule,
}

/// Loss terms of one task group at one step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupRecord {
    pub task: usize,
    pub samples: usize,
    #[serde(flatten)]
    pub terms: LossTerms,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub stage: usize,
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub groups: Vec<GroupRecord>,
}

fn head_targets(schedule: &StageSchedule, labels: &[usize]) -> Result<Vec<usize>> {
    labels
        .iter()
        .map(|&l| {
            schedule
                .column_of(l)
                .ok_or_else(|| Error::ConfigInvalid(format!("class {l} is not scheduled")))
        })
        .collect()
}

/// One mini-batch update.
///
/// Each task group trains its own clone of the current model (memory groups
/// on the combined objective against the teacher, the current task on the
/// class loss), and the result is the elementwise mean of those clones.
/// Every clone gets a fresh optimizer. With `disable_averaging`, a single
/// model instead takes steps on the sample-weighted sum of the group
/// gradients using `single_optimizer`, which persists across batches.
pub fn train_minibatch(
    state: &StageState,
    batch: &GroupedBatch,
    config: &TrainConfig,
    lr: f64,
    single_optimizer: &mut dyn Optimizer,
) -> Result<(ModelState, Vec<GroupRecord>)> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let weights = config.effective_weights();
    let teacher = state.teacher_model.as_ref();
    let targets: Vec<Vec<usize>> = batch
        .groups
        .iter()
        .map(|g| head_targets(&state.schedule, &g.labels))
        .collect::<Result<_>>()?;
    let mut records: Vec<GroupRecord> = Vec::with_capacity(batch.groups.len());
    let record = |records: &mut Vec<GroupRecord>, task, samples, terms: &LossTerms| {
        if records.len() < batch.groups.len() {
            records.push(GroupRecord {
                task,
                samples,
                terms: terms.clone(),
            });
        }
    };

    if config.components.disable_averaging {
        let mut model = state.current_model.clone();
        let total = batch.len() as f64;
        for _ in 0..config.inner_steps_per_group {
            let mut sum: Option<Vec<Vec<f64>>> = None;
            for (g, t) in batch.groups.iter().zip(&targets) {
                let lg = combined_loss(&model, teacher, &g.inputs, t, &weights, g.task == state.stage)?;
                record(&mut records, g.task, g.len(), &lg.terms);
                let share = g.len() as f64 / total;
                match sum.as_mut() {
                    None => {
                        sum = Some(
                            lg.grads
                                .into_iter()
                                .map(|a| a.into_iter().map(|v| share * v).collect())
                                .collect(),
                        )
                    }
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(&lg.grads) {
                            for (x, y) in a.iter_mut().zip(b) {
                                *x += share * y;
                            }
                        }
                    }
                }
            }
            single_optimizer.step(&mut model, &sum.expect("non-empty batch"), lr);
        }
        return Ok((model, records));
    }

    let mut clones = Vec::with_capacity(state.stage);
    for (g, t) in batch.groups.iter().zip(&targets) {
        let mut clone = state.current_model.clone();
        let mut opt = config.optimizer.build();
        for _ in 0..config.inner_steps_per_group {
            let lg = combined_loss(&clone, teacher, &g.inputs, t, &weights, g.task == state.stage)?;
            record(&mut records, g.task, g.len(), &lg.terms);
            opt.step(&mut clone, &lg.grads, lr);
        }
        clones.push(clone);
    }
    if config.average_includes_untrained_clones {
        let present = batch.groups.len();
        for _ in present..state.stage {
            clones.push(state.current_model.clone());
        }
    }
    Ok((average_weights(&clones)?, records))
}

/// Trains `state.current_model` on stage data plus memory for
/// `config.epochs` epochs. `on_step` sees the model after every step.
pub fn train_stage_with(
    state: &StageState,
    data: &Dataset,
    config: &TrainConfig,
    on_step: &mut dyn FnMut(usize, &ModelState),
) -> Result<(ModelState, Vec<StepRecord>)> {
    config.validate()?;
    let per_epoch = steps_per_epoch(&state.memory, data, config.batch_size);
    let seed = batch_seed(config.seed, state.stage);
    let mut working = StageState {
        stage: state.stage,
        current_model: state.current_model.clone(),
        teacher_model: state.teacher_model.clone(),
        memory: state.memory.clone(),
        schedule: state.schedule.clone(),
    };
    let mut single = config.optimizer.build();
    let mut trace = Vec::with_capacity(config.epochs * per_epoch);
    for epoch in 0..config.epochs {
        let lr = config.lr_at(epoch);
        for s in 0..per_epoch {
            let step = epoch * per_epoch + s;
            let batch = sample_batch(&working.memory, data, &working.schedule, config.batch_size, seed, step)?;
            let (next, groups) = train_minibatch(&working, &batch, config, lr, single.as_mut())?;
            working.current_model = next;
            on_step(step, &working.current_model);
            trace.push(StepRecord {
                stage: state.stage,
                epoch,
                step,
                lr,
                groups,
            });
        }
    }
    Ok((working.current_model, trace))
}

pub fn train_stage(state: &StageState, data: &Dataset, config: &TrainConfig) -> Result<(ModelState, Vec<StepRecord>)> {
    train_stage_with(state, data, config, &mut |_, _| {})
}

/// Everything needed to run the stage loop.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentSetup {
    pub arch: Arch,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub memory_budget: usize,
}

/// Artifacts of a finished stage, handed to the stage callback.
pub struct StageOutcome<'a> {
    pub model: &'a ModelState,
    pub memory: &'a ExemplarMemory,
    pub trace: &'a [StepRecord],
    pub report: &'a StageReport,
}

/// Runs every stage of `schedule`: grow the head, train, update memory,
/// evaluate on all seen classes. The stage-t expert is the teacher of
/// stage t + 1.
pub fn run_experiment(
    train: &Dataset,
    test: &Dataset,
    schedule: &StageSchedule,
    setup: &ExperimentSetup,
    on_stage: &mut dyn FnMut(&StageOutcome<'_>) -> Result<()>,
) -> Result<Vec<StageReport>> {
    setup.train.validate()?;
    if train.shape().iter().product::<usize>() != setup.arch.input_len() {
        return Err(Error::ShapeMismatch(format!(
            "dataset samples of shape {:?} do not fit {}",
            train.shape(),
            setup.arch
        )));
    }
    let k = schedule.classes_per_task;
    let seed = setup.train.seed;
    let mut memory = ExemplarMemory::new(setup.memory_budget, train.shape().to_vec());
    let mut teacher: Option<ModelState> = None;
    let mut reports: Vec<StageReport> = Vec::with_capacity(schedule.num_tasks);
    for t in 1..=schedule.num_tasks {
        let head_seed = derive_seed(seed, t, SEED_HEAD);
        let model = match &teacher {
            None => ModelState::init(setup.arch.clone(), k, head_seed)?,
            Some(prev) => prev.grow_head(k, head_seed)?,
        };
        let data = stage_data(train, schedule, t)?;
        let state = StageState {
            stage: t,
            current_model: model,
            teacher_model: teacher.take(),
            memory,
            schedule: schedule.clone(),
        };
        let (expert, trace) = train_stage(&state, &data, &setup.train)?;
        memory = state.memory.update(&data, derive_seed(seed, t, SEED_MEMORY))?;
        let mut eval = setup.eval.clone();
        eval.seed = derive_seed(seed, t, SEED_EVAL);
        let mut report = evaluate(&expert, &memory, test, schedule, t, &eval)?;
        let sum: f64 = reports.iter().map(|r| r.class_accuracy).sum::<f64>() + report.class_accuracy;
        report.avg_incremental_accuracy = sum / t as f64;
        log::info!(
            "stage {t}: task acc {:.4}, class acc {:.4}, avg inc {:.4}",
            report.task_accuracy,
            report.class_accuracy,
            report.avg_incremental_accuracy
        );
        on_stage(&StageOutcome {
            model: &expert,
            memory: &memory,
            trace: &trace,
            report: &report,
        })?;
        reports.push(report);
        teacher = Some(expert);
    }
    Ok(reports)
}
