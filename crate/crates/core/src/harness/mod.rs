//! Experiment configuration, persisted runs, sweeps and ablations.

mod report;

use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{load_array_dir, load_idx_digits, make_synthetic_blobs_split, Dataset, StageSchedule};
use crate::error::{Error, Result};
use crate::inference::{EvalConfig, StageReport};
use crate::model::Arch;
use crate::trainer::{run_experiment, ExperimentSetup, TrainConfig};

pub use report::{render_table, report, write_plot, Report, StageSummary, Summary};

pub const BUNDLE_FILE: &str = "bundle.json";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CONFIG_FILE: &str = "config.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    /// Grayscale digits in IDX files (`train-*` / `t10k-*`, optionally gzipped).
    IdxDigits { path: PathBuf },
    /// `meta.txt` plus `train.bin` / `test.bin`.
    ArrayDir { path: PathBuf },
    /// Synthetic Gaussian blobs, normalized with the training statistics.
    Blobs {
        num_classes: usize,
        train_per_class: usize,
        test_per_class: usize,
        dim: usize,
        separation: f64,
        seed: u64,
    },
}

impl DatasetConfig {
    pub fn load(&self) -> Result<(Dataset, Dataset)> {
        match self {
            DatasetConfig::IdxDigits { path } => load_idx_digits(path),
            DatasetConfig::ArrayDir { path } => load_array_dir(path),
            DatasetConfig::Blobs {
                num_classes,
                train_per_class,
                test_per_class,
                dim,
                separation,
                seed,
            } => {
                let (mut train, mut test) = make_synthetic_blobs_split(
                    *num_classes,
                    *train_per_class,
                    *test_per_class,
                    *dim,
                    *separation,
                    *seed,
                )?;
                let stats = train.channel_stats();
                train.normalize(&stats)?;
                test.normalize(&stats)?;
                Ok((train, test))
            }
        }
    }

    fn resolve(&mut self, base: &Path) {
        if let DatasetConfig::IdxDigits { path } | DatasetConfig::ArrayDir { path } = self {
            if path.is_relative() {
                *path = base.join(&*path);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub num_tasks: usize,
    pub shuffle: bool,
    pub seed: u64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            num_tasks: 5,
            shuffle: false,
            seed: 0,
        }
    }
}

fn default_budget() -> usize {
    2000
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

/// A complete experiment description. `train.seed` is replaced by each entry
/// of `seeds`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub output_dir: PathBuf,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_budget")]
    pub memory_budget: usize,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    pub model: Arch,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::ConfigInvalid(e.to_string()))
    }

    /// Reads a TOML config; relative data and output paths are taken
    /// relative to the file's directory.
    pub fn from_file(path: &Path) -> Result<Self> {
        let mut cfg = Self::from_toml(&fs::read_to_string(path)?)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.dataset.resolve(base);
        if cfg.output_dir.is_relative() && !cfg.output_dir.as_os_str().is_empty() {
            cfg.output_dir = base.join(&cfg.output_dir);
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::ConfigInvalid(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::ConfigInvalid("seeds must not be empty".into()));
        }
        self.model.validate()?;
        self.train.validate()?;
        self.eval.finetune.validate()?;
        if self.eval.batch_size == 0 {
            return Err(Error::ConfigInvalid("eval.batch_size must be positive".into()));
        }
        Ok(())
    }

    /// SHA-256 over the canonical (sorted-key) JSON form of every field
    /// except `name` and `output_dir`.
    pub fn fingerprint(&self) -> Result<String> {
        let mut value = serde_json::to_value(self)?;
        if let Some(map) = value.as_object_mut() {
            map.remove("name");
            map.remove("output_dir");
        }
        let canonical = serde_json::to_string(&value)?;
        Ok(format!("{:x}", Sha256::digest(canonical.as_bytes())))
    }

    pub fn setup(&self, seed: u64) -> ExperimentSetup {
        let mut train = self.train.clone();
        train.seed = seed;
        ExperimentSetup {
            arch: self.model.clone(),
            train,
            eval: self.eval.clone(),
            memory_budget: self.memory_budget,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub reports: Vec<StageReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultsBundle {
    pub name: String,
    pub fingerprint: String,
    pub code_version: String,
    pub config: ExperimentConfig,
    pub runs: Vec<SeedRun>,
}

impl ResultsBundle {
    pub fn read(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join(BUNDLE_FILE))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn num_stages(&self) -> usize {
        self.runs.iter().map(|r| r.reports.len()).max().unwrap_or(0)
    }
}

#[derive(Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum MetricRecord<'a> {
    Step {
        seed: u64,
        #[serde(flatten)]
        record: &'a crate::trainer::StepRecord,
    },
    Stage {
        seed: u64,
        #[serde(flatten)]
        report: &'a StageReport,
    },
}

/// Runs every seed of `config` and persists the run directory: a config
/// snapshot, per-stage checkpoints, the latest memory snapshot per seed, a
/// line-delimited metric stream and the final bundle. An empty
/// `output_dir` runs without persistence.
pub fn run(config: &ExperimentConfig, force: bool) -> Result<ResultsBundle> {
    config.validate()?;
    let fingerprint = config.fingerprint()?;
    let (train, test) = config.dataset.load()?;
    let schedule = StageSchedule::build(
        train.num_classes,
        config.schedule.num_tasks,
        config.schedule.seed,
        config.schedule.shuffle,
    )?;
    let out = (!config.output_dir.as_os_str().is_empty()).then_some(config.output_dir.as_path());
    let mut metrics = match out {
        Some(dir) => {
            let bundle = dir.join(BUNDLE_FILE);
            if bundle.exists() && !force {
                return Err(Error::OutputExists(bundle));
            }
            fs::create_dir_all(dir)?;
            fs::write(dir.join(CONFIG_FILE), config.to_toml()?)?;
            Some(BufWriter::new(File::create(dir.join(METRICS_FILE))?))
        }
        None => None,
    };
    let mut runs = Vec::with_capacity(config.seeds.len());
    for &seed in &config.seeds {
        log::info!("{}: seed {seed}", display_name(config));
        let setup = config.setup(seed);
        let seed_dir = out.map(|d| d.join(format!("seed-{seed}")));
        let reports = run_experiment(&train, &test, &schedule, &setup, &mut |o| {
            if let Some(w) = metrics.as_mut() {
                for record in o.trace {
                    serde_json::to_writer(&mut *w, &MetricRecord::Step { seed, record })?;
                    w.write_all(b"\n")?;
                }
                serde_json::to_writer(&mut *w, &MetricRecord::Stage { seed, report: o.report })?;
                w.write_all(b"\n")?;
                w.flush()?;
            }
            if let Some(dir) = &seed_dir {
                let stage = o.report.stage;
                o.model
                    .save_checkpoint(&dir.join(format!("stage-{stage}.safetensors")), stage)?;
                o.memory.save(&dir.join("memory.safetensors"))?;
            }
            Ok(())
        })?;
        runs.push(SeedRun { seed, reports });
    }
    let bundle = ResultsBundle {
        name: display_name(config),
        fingerprint,
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        config: config.clone(),
        runs,
    };
    if let Some(dir) = out {
        fs::write(dir.join(BUNDLE_FILE), serde_json::to_string_pretty(&bundle)?)?;
    }
    Ok(bundle)
}

fn display_name(config: &ExperimentConfig) -> String {
    if config.name.is_empty() {
        "experiment".into()
    } else {
        config.name.clone()
    }
}

fn sub_config(config: &ExperimentConfig, suffix: &str) -> ExperimentConfig {
    let mut c = config.clone();
    c.name = format!("{}-{suffix}", display_name(config));
    if !c.output_dir.as_os_str().is_empty() {
        c.output_dir = c.output_dir.join(suffix);
    }
    c
}

/// Rows of per-stage mean task accuracy, one per variant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyGrid {
    pub row_label: String,
    pub rows: Vec<(String, Vec<f64>)>,
}

impl AccuracyGrid {
    fn from_bundles(row_label: &str, labels: Vec<String>, bundles: &[ResultsBundle]) -> Self {
        let rows = labels
            .into_iter()
            .zip(bundles)
            .map(|(l, b)| (l, Summary::of(b).stages.iter().map(|s| s.task_accuracy.0).collect()))
            .collect();
        Self {
            row_label: row_label.into(),
            rows,
        }
    }

    /// Tab-delimited grid: one row per variant, one column per stage.
    pub fn to_tsv(&self) -> String {
        let stages = self.rows.iter().map(|r| r.1.len()).max().unwrap_or(0);
        let mut s = self.row_label.clone();
        for t in 1..=stages {
            s.push_str(&format!("\tS{t}"));
        }
        s.push('\n');
        for (label, values) in &self.rows {
            s.push_str(label);
            for v in values {
                s.push_str(&format!("\t{v:.4}"));
            }
            s.push('\n');
        }
        s
    }

    fn write(&self, config: &ExperimentConfig, file: &str) -> Result<()> {
        if !config.output_dir.as_os_str().is_empty() {
            fs::create_dir_all(&config.output_dir)?;
            fs::write(config.output_dir.join(file), self.to_tsv())?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SweepResult {
    pub gammas: Vec<f64>,
    pub bundles: Vec<ResultsBundle>,
    pub grid: AccuracyGrid,
}

/// One full run per γ with seeds held fixed; writes `gamma_sweep.tsv`.
pub fn gamma_sweep(config: &ExperimentConfig, gammas: &[f64], force: bool) -> Result<SweepResult> {
    if gammas.is_empty() {
        return Err(Error::ConfigInvalid("gamma list is empty".into()));
    }
    let mut bundles = Vec::with_capacity(gammas.len());
    for &g in gammas {
        let mut c = sub_config(config, &format!("gamma-{g}"));
        c.train.loss_weights.gamma = g;
        bundles.push(run(&c, force)?);
    }
    let labels = gammas.iter().map(|g| g.to_string()).collect();
    let grid = AccuracyGrid::from_bundles("gamma", labels, &bundles);
    grid.write(config, "gamma_sweep.tsv")?;
    Ok(SweepResult {
        gammas: gammas.to_vec(),
        bundles,
        grid,
    })
}

/// Component ablation variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Ablation {
    /// Distillation only: no GTK term, single model without averaging.
    Kd,
    /// Distillation with per-task averaging, no GTK term.
    KdAvg,
    Full,
}

impl Ablation {
    pub fn apply(self, config: &ExperimentConfig) -> ExperimentConfig {
        let mut c = sub_config(config, &self.to_string());
        let comps = &mut c.train.components;
        match self {
            Ablation::Kd => {
                comps.disable_gtk = true;
                comps.disable_averaging = true;
            }
            Ablation::KdAvg => comps.disable_gtk = true,
            Ablation::Full => {}
        }
        c
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Ablation::Kd => "kd",
            Ablation::KdAvg => "kd+avg",
            Ablation::Full => "full",
        })
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "kd" => Ok(Ablation::Kd),
            "kd+avg" => Ok(Ablation::KdAvg),
            "full" => Ok(Ablation::Full),
            other => Err(Error::ConfigInvalid(format!("unknown ablation component {other:?}"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct AblationResult {
    pub components: Vec<Ablation>,
    pub bundles: Vec<ResultsBundle>,
    pub grid: AccuracyGrid,
}

/// One full run per component variant; writes `ablation.tsv`.
pub fn ablate(config: &ExperimentConfig, components: &[Ablation], force: bool) -> Result<AblationResult> {
    if components.is_empty() {
        return Err(Error::ConfigInvalid("component list is empty".into()));
    }
    let bundles = components
        .iter()
        .map(|a| run(&a.apply(config), force))
        .collect::<Result<Vec<_>>>()?;
    let labels = components.iter().map(Ablation::to_string).collect();
    let grid = AccuracyGrid::from_bundles("component", labels, &bundles);
    grid.write(config, "ablation.tsv")?;
    Ok(AblationResult {
        components: components.to_vec(),
        bundles,
        grid,
    })
}
