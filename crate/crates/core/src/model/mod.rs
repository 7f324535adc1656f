//! Expert models `F(φ, θ, x) = f(θ, g(φ, x))`.
//!
//! A [`ModelState`] owns the feature-extractor arrays φ and the classifier
//! head arrays θ. The head grows by whole rows as new classes arrive.

mod net;

use std::fmt;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::archive::Archive;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub(crate) use net::{backward, forward, Plan, Trace};

/// Standard deviation of freshly added head rows.
pub const HEAD_INIT_STD: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply<S: Scalar>(self, v: S) -> S {
        match self {
            Activation::Relu => {
                if v.value() > 0.0 {
                    v
                } else {
                    S::zero()
                }
            }
            Activation::Tanh => v.tanh(),
            Activation::Identity => v,
        }
    }

    /// Derivative through the activation, given its output `y`.
    #[inline]
    pub fn backward<S: Scalar>(self, d: S, y: S) -> S {
        match self {
            Activation::Relu => {
                if y.value() > 0.0 {
                    d
                } else {
                    S::zero()
                }
            }
            Activation::Tanh => d * (S::from_f64(1.0) - y * y),
            Activation::Identity => d,
        }
    }

    fn as_str(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
            Activation::Identity => "identity",
        }
    }
}

/// Backbone architecture.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Arch {
    /// Fully connected feature layers of widths `hidden`.
    Mlp {
        input: usize,
        hidden: Vec<usize>,
        activation: Activation,
    },
    /// 3x3 ReLU convolutions with padding 1; the flattened last feature map
    /// feeds the head.
    SmallCnn {
        channels: usize,
        height: usize,
        width: usize,
        filters: Vec<usize>,
        strides: Vec<usize>,
    },
}

impl Arch {
    /// The four-convolution digit backbone.
    pub fn small_cnn(channels: usize, height: usize, width: usize) -> Arch {
        Arch::SmallCnn {
            channels,
            height,
            width,
            filters: vec![8, 16, 32, 32],
            strides: vec![2, 2, 2, 2],
        }
    }

    pub fn mlp(input: usize, hidden: Vec<usize>, activation: Activation) -> Arch {
        Arch::Mlp {
            input,
            hidden,
            activation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Arch::Mlp { input, hidden, .. } => {
                if *input == 0 || hidden.is_empty() || hidden.contains(&0) {
                    return Err(Error::ConfigInvalid(format!("bad mlp {self}")));
                }
            }
            Arch::SmallCnn {
                channels,
                height,
                width,
                filters,
                strides,
            } => {
                if *channels == 0
                    || *height == 0
                    || *width == 0
                    || filters.is_empty()
                    || filters.len() != strides.len()
                    || filters.contains(&0)
                    || strides.contains(&0)
                {
                    return Err(Error::ConfigInvalid(format!("bad cnn {self}")));
                }
            }
        }
        Ok(())
    }

    pub fn input_len(&self) -> usize {
        match self {
            Arch::Mlp { input, .. } => *input,
            Arch::SmallCnn {
                channels,
                height,
                width,
                ..
            } => channels * height * width,
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let join = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(".");
        match self {
            Arch::Mlp {
                input,
                hidden,
                activation,
            } => write!(f, "mlp-{input}-{}-{}", join(hidden), activation.as_str()),
            Arch::SmallCnn {
                channels,
                height,
                width,
                filters,
                strides,
            } => write!(
                f,
                "cnn-{channels}x{height}x{width}-{}-s{}",
                join(filters),
                join(strides)
            ),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WeightArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Which weights to flatten.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Part {
    Phi,
    Theta,
    All,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

/// Weights laid out in one contiguous vector.
#[derive(Clone, Debug, PartialEq)]
pub struct FlatWeights {
    pub values: Vec<f64>,
    pub layout: Vec<LayoutEntry>,
}

/// Output of [`ModelState::forward`]: features `h` (batch x feature_len) and
/// logits (batch x head_width), both row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput {
    pub batch: usize,
    pub features: Vec<f64>,
    pub logits: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub arch: Arch,
    pub head_width: usize,
    pub phi: Vec<WeightArray>,
    pub theta: Vec<WeightArray>,
}

impl ModelState {
    /// Fresh model: Gaussian fan-in scaled backbone weights (He for ReLU,
    /// LeCun otherwise), zero biases, head rows at [`HEAD_INIT_STD`].
    pub fn init(arch: Arch, head_width: usize, seed: u64) -> Result<ModelState> {
        arch.validate()?;
        if head_width == 0 {
            return Err(Error::ConfigInvalid("head width must be positive".into()));
        }
        let plan = Plan::new(&arch, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gain = match &arch {
            Arch::Mlp { activation, .. } if *activation != Activation::Relu => 1.0,
            _ => 2.0,
        };
        let phi = plan.arrays[..plan.num_phi]
            .iter()
            .map(|(name, shape)| {
                let len: usize = shape.iter().product();
                let data = if name.ends_with("weight") {
                    let fan_in: usize = shape[1..].iter().product();
                    let normal = Normal::new(0.0, (gain / fan_in as f64).sqrt()).expect("finite std");
                    (0..len).map(|_| normal.sample(&mut rng)).collect()
                } else {
                    vec![0.0; len]
                };
                WeightArray {
                    name: name.clone(),
                    shape: shape.clone(),
                    data,
                }
            })
            .collect();
        let empty = ModelState {
            theta: vec![
                WeightArray {
                    name: "theta.head.weight".into(),
                    shape: vec![0, plan.feature_len],
                    data: Vec::new(),
                },
                WeightArray {
                    name: "theta.head.bias".into(),
                    shape: vec![0],
                    data: Vec::new(),
                },
            ],
            arch,
            head_width: 0,
            phi,
        };
        empty.grow_head(head_width, seed ^ 0x5E_ED0F_4EAD)
    }

    pub fn arch_id(&self) -> String {
        self.arch.to_string()
    }

    pub(crate) fn plan(&self) -> Plan {
        Plan::new(&self.arch, self.head_width)
    }

    pub fn arrays(&self) -> impl Iterator<Item = &WeightArray> {
        self.phi.iter().chain(&self.theta)
    }

    pub fn arrays_mut(&mut self) -> impl Iterator<Item = &mut WeightArray> {
        self.phi.iter_mut().chain(self.theta.iter_mut())
    }

    pub fn num_params(&self) -> usize {
        self.arrays().map(|a| a.data.len()).sum()
    }

    pub fn feature_len(&self) -> usize {
        self.theta[0].shape[1]
    }

    /// Index (over φ then θ) of the designated last feature layer weights:
    /// the weight array of the layer producing `h`.
    pub fn feature_array_index(&self) -> usize {
        self.plan().feature_array()
    }

    pub fn feature_layer(&self) -> &WeightArray {
        &self.phi[self.feature_array_index()]
    }

    pub(crate) fn param_slices(&self) -> Vec<&[f64]> {
        self.arrays().map(|a| a.data.as_slice()).collect()
    }

    pub(crate) fn check_inputs(&self, inputs: &[f64], batch: usize) -> Result<()> {
        let n = self.arch.input_len();
        if inputs.len() != n * batch {
            return Err(Error::ShapeMismatch(format!(
                "{} values for {batch} inputs of length {n} ({})",
                inputs.len(),
                self.arch
            )));
        }
        Ok(())
    }

    pub(crate) fn trace(&self, inputs: &[f64], batch: usize) -> Result<(Plan, Trace<f64>)> {
        self.check_inputs(inputs, batch)?;
        let plan = self.plan();
        let trace = forward(&plan, &self.param_slices(), inputs.to_vec(), batch);
        Ok((plan, trace))
    }

    pub fn forward(&self, inputs: &[f64], batch: usize) -> Result<ForwardOutput> {
        let (plan, trace) = self.trace(inputs, batch)?;
        Ok(ForwardOutput {
            batch,
            features: trace.features(&plan).to_vec(),
            logits: trace.logits().to_vec(),
        })
    }

    pub fn logits(&self, inputs: &[f64], batch: usize) -> Result<Vec<f64>> {
        let (_, trace) = self.trace(inputs, batch)?;
        Ok(trace.acts.last().cloned().unwrap_or_default())
    }

    /// Append `new_classes` head rows drawn from `N(0, HEAD_INIT_STD²)` with
    /// zero biases. Row `r` uses its own random stream, so growing in several
    /// steps with one seed matches growing once.
    pub fn grow_head(&self, new_classes: usize, seed: u64) -> Result<ModelState> {
        self.grow_head_with(new_classes, HEAD_INIT_STD, seed)
    }

    pub fn grow_head_with(&self, new_classes: usize, std: f64, seed: u64) -> Result<ModelState> {
        if new_classes == 0 {
            return Err(Error::ConfigInvalid("head growth must add classes".into()));
        }
        let mut out = self.clone();
        let feat = self.feature_len();
        let normal = Normal::new(0.0, std).map_err(|e| Error::ConfigInvalid(e.to_string()))?;
        for row in self.head_width..self.head_width + new_classes {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(row as u64);
            out.theta[0].data.extend((0..feat).map(|_| normal.sample(&mut rng)));
            out.theta[1].data.push(0.0);
        }
        out.head_width += new_classes;
        out.theta[0].shape = vec![out.head_width, feat];
        out.theta[1].shape = vec![out.head_width];
        Ok(out)
    }

    pub fn same_layout(&self, other: &ModelState) -> bool {
        self.arch == other.arch
            && self.head_width == other.head_width
            && self.arrays().zip(other.arrays()).all(|(a, b)| a.shape == b.shape)
    }

    pub fn flatten(&self, part: Part) -> FlatWeights {
        let arrays: Vec<&WeightArray> = match part {
            Part::Phi => self.phi.iter().collect(),
            Part::Theta => self.theta.iter().collect(),
            Part::All => self.arrays().collect(),
        };
        let mut values = Vec::with_capacity(arrays.iter().map(|a| a.data.len()).sum());
        let mut layout = Vec::with_capacity(arrays.len());
        for a in arrays {
            layout.push(LayoutEntry {
                name: a.name.clone(),
                shape: a.shape.clone(),
                offset: values.len(),
            });
            values.extend_from_slice(&a.data);
        }
        FlatWeights { values, layout }
    }

    /// Rebuild a model of `arch` with `head_width` outputs from a flattening
    /// of all its weights.
    pub fn unflatten(flat: &FlatWeights, arch: &Arch, head_width: usize) -> Result<ModelState> {
        arch.validate()?;
        let plan = Plan::new(arch, head_width);
        if flat.layout.len() != plan.arrays.len() {
            return Err(Error::LayoutMismatch(format!(
                "{} arrays, {} expects {}",
                flat.layout.len(),
                arch,
                plan.arrays.len()
            )));
        }
        let mut offset = 0;
        let mut arrays = Vec::with_capacity(plan.arrays.len());
        for (entry, (name, shape)) in flat.layout.iter().zip(&plan.arrays) {
            let len: usize = shape.iter().product();
            if entry.name != *name || entry.shape != *shape || entry.offset != offset {
                return Err(Error::LayoutMismatch(format!(
                    "entry {} {:?}@{} does not match {name} {shape:?}@{offset}",
                    entry.name, entry.shape, entry.offset
                )));
            }
            let data = flat
                .values
                .get(offset..offset + len)
                .ok_or_else(|| Error::LayoutMismatch(format!("values end before {name}")))?;
            arrays.push(WeightArray {
                name: name.clone(),
                shape: shape.clone(),
                data: data.to_vec(),
            });
            offset += len;
        }
        if offset != flat.values.len() {
            return Err(Error::LayoutMismatch(format!(
                "{} trailing values",
                flat.values.len() - offset
            )));
        }
        let theta = arrays.split_off(plan.num_phi);
        Ok(ModelState {
            arch: arch.clone(),
            head_width,
            phi: arrays,
            theta,
        })
    }

    /// Subtract `step` (one entry per array) from the weights.
    pub fn apply_update(&mut self, step: &[Vec<f64>]) {
        for (a, s) in self.arrays_mut().zip(step) {
            for (w, d) in a.data.iter_mut().zip(s) {
                *w -= d;
            }
        }
    }

    pub fn save_checkpoint(&self, path: &Path, stage: usize) -> Result<()> {
        let mut archive = Archive::default();
        for a in self.arrays() {
            archive.push_f64(a.name.clone(), a.shape.clone(), a.data.clone());
        }
        archive
            .manifest
            .insert("arch".into(), serde_json::to_string(&self.arch)?);
        archive.manifest.insert("arch_id".into(), self.arch_id());
        archive
            .manifest
            .insert("head_width".into(), self.head_width.to_string());
        archive.manifest.insert("stage".into(), stage.to_string());
        archive.write(path)
    }

    /// Returns the model and its stage index.
    pub fn load_checkpoint(path: &Path) -> Result<(ModelState, usize)> {
        let archive = Archive::read(path)?;
        let arch: Arch = serde_json::from_str(archive.meta("arch")?)?;
        let parse = |k: &str| -> Result<usize> {
            archive
                .meta(k)?
                .parse()
                .map_err(|_| Error::Format(format!("{k} is not an integer")))
        };
        let head_width = parse("head_width")?;
        let stage = parse("stage")?;
        let plan = Plan::new(&arch, head_width);
        let mut values = Vec::new();
        let mut layout = Vec::new();
        for (name, _) in &plan.arrays {
            let (shape, data) = archive.f64(name)?;
            layout.push(LayoutEntry {
                name: name.clone(),
                shape: shape.to_vec(),
                offset: values.len(),
            });
            values.extend_from_slice(data);
        }
        let model = ModelState::unflatten(&FlatWeights { values, layout }, &arch, head_width)?;
        Ok((model, stage))
    }
}

/// Elementwise arithmetic mean of the weights.
///
/// Each coordinate is averaged over its values in sorted order with a
/// running mean, so the result does not depend on argument order and
/// identical inputs come back bit for bit.
pub fn average_weights(models: &[ModelState]) -> Result<ModelState> {
    let first = models.first().ok_or(Error::HeterogeneousModels)?;
    if models.iter().any(|m| !first.same_layout(m)) {
        return Err(Error::HeterogeneousModels);
    }
    let mut out = first.clone();
    if models.len() == 1 {
        return Ok(out);
    }
    let others: Vec<Vec<&WeightArray>> = models.iter().map(|m| m.arrays().collect()).collect();
    let mut column = vec![0.0; models.len()];
    for (ai, array) in out.arrays_mut().enumerate() {
        for (j, w) in array.data.iter_mut().enumerate() {
            for (slot, m) in column.iter_mut().zip(&others) {
                *slot = m[ai].data[j];
            }
            column.sort_by(f64::total_cmp);
            let mut mean = column[0];
            for (k, &v) in column.iter().enumerate().skip(1) {
                mean += (v - mean) / (k + 1) as f64;
            }
            *w = mean;
        }
    }
    Ok(out)
}
