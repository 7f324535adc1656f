//! The three training objectives and their gradients.
//!
//! * class loss: mean binary cross-entropy of `sigmoid(logits)` against
//!   one-hot targets;
//! * distillation: mean binary cross-entropy of the student's sigmoid outputs
//!   against the frozen teacher's, on the teacher's slice of the head;
//! * gradient tangent kernel (GTK) loss: `-ln((1 + cos) / 2)` where `cos` is
//!   the cosine between the class-loss gradients of the designated last
//!   feature layer under the current model and under the teacher.
//!
//! The GTK term depends on the model weights through a gradient, so its own
//! gradient needs second derivatives. [`combined_loss`] gets them by running
//! the class-loss backward pass over dual numbers whose tangent is seeded on
//! the feature layer with `dL_gtk / dG_t`; the tangent of the resulting
//! gradient is the required Hessian-vector product.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{backward, forward, ModelState, Plan, Trace};
use crate::scalar::{sigmoid, Dual, Scalar};

/// Probability clamp inside the GTK logarithm.
pub const GTK_CLAMP: f64 = 1e-7;
/// Gradient norms below this make the GTK term undefined.
pub const ZERO_GRADIENT_NORM: f64 = 1e-12;

/// Weights of the memory-sample objective `α·class + β·kd + γ·gtk`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            gamma: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::ConfigInvalid(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Batch-aggregated gradient of the class loss with respect to the designated
/// last feature layer, flattened.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientVector {
    pub values: Vec<f64>,
    pub source_stage: usize,
    pub task_group: usize,
}

impl GradientVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self {
            values,
            source_stage: 0,
            task_group: 0,
        }
    }

    pub fn norm(&self) -> f64 {
        norm(&self.values)
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// A loss on a row-major `batch x width` logit matrix.
pub trait LogitObjective {
    /// Loss value and its gradient with respect to the logits.
    fn value_and_grad(&self, logits: &[f64], width: usize) -> Result<(f64, Vec<f64>)>;
}

/// Mean sigmoid cross-entropy against one-hot `targets` (head columns).
#[derive(Clone, Copy, Debug)]
pub struct Bce<'a> {
    pub targets: &'a [usize],
}

impl LogitObjective for Bce<'_> {
    fn value_and_grad(&self, logits: &[f64], width: usize) -> Result<(f64, Vec<f64>)> {
        bce_and_grad(logits, width, self.targets)
    }
}

/// `mean_over_batch(sum_over_outputs((z - y)^2))`.
#[derive(Clone, Copy, Debug)]
pub struct SquaredError<'a> {
    pub targets: &'a [f64],
}

impl LogitObjective for SquaredError<'_> {
    fn value_and_grad(&self, logits: &[f64], width: usize) -> Result<(f64, Vec<f64>)> {
        if logits.len() != self.targets.len() || width == 0 || logits.is_empty() {
            return Err(Error::ShapeMismatch("targets must match logits".into()));
        }
        let batch = (logits.len() / width) as f64;
        let mut loss = 0.0;
        let grad = logits
            .iter()
            .zip(self.targets)
            .map(|(z, y)| {
                loss += (z - y) * (z - y);
                2.0 * (z - y) / batch
            })
            .collect();
        Ok((loss / batch, grad))
    }
}

/// `max(z, 0) - z*y + ln(1 + exp(-|z|))`, the stable sigmoid cross-entropy.
#[inline]
fn bce_logit<S: Scalar>(z: S, y: S) -> S {
    let one = S::from_f64(1.0);
    if z.value() >= 0.0 {
        z - z * y + (one + (-z).exp()).ln()
    } else {
        -(z * y) + (one + z.exp()).ln()
    }
}

fn check_targets(logits_len: usize, width: usize, targets: &[usize]) -> Result<()> {
    if targets.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if width == 0 || logits_len != width * targets.len() {
        return Err(Error::ShapeMismatch(format!(
            "{logits_len} logits for {} targets of width {width}",
            targets.len()
        )));
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= width) {
        return Err(Error::LabelOutOfRange { label: t, width });
    }
    Ok(())
}

/// Class loss and its logit gradient, generic so the dual pass can reuse it.
fn bce_generic<S: Scalar>(logits: &[S], width: usize, targets: &[usize]) -> (S, Vec<S>) {
    let scale = 1.0 / logits.len() as f64;
    let mut loss = S::zero();
    let mut grad = Vec::with_capacity(logits.len());
    for (row, &t) in logits.chunks(width).zip(targets) {
        for (j, &z) in row.iter().enumerate() {
            let y = if j == t { 1.0 } else { 0.0 };
            loss += bce_logit(z, S::from_f64(y));
            grad.push((sigmoid(z) - S::from_f64(y)).scale(scale));
        }
    }
    (loss.scale(scale), grad)
}

fn bce_and_grad(logits: &[f64], width: usize, targets: &[usize]) -> Result<(f64, Vec<f64>)> {
    check_targets(logits.len(), width, targets)?;
    Ok(bce_generic(logits, width, targets))
}

/// Mean binary cross-entropy between `sigmoid(logits)` and one-hot targets,
/// averaged over batch and classes.
pub fn class_loss(logits: &[f64], width: usize, targets: &[usize]) -> Result<f64> {
    Ok(bce_and_grad(logits, width, targets)?.0)
}

/// Distillation loss on the teacher's `teacher_width` leading columns and
/// its gradient with respect to the student logits (zero outside the slice).
pub fn kd_loss_and_grad(
    student: &[f64],
    student_width: usize,
    teacher: &[f64],
    teacher_width: usize,
) -> Result<(f64, Vec<f64>)> {
    if student_width == 0 || teacher_width == 0 || student_width < teacher_width {
        return Err(Error::ShapeMismatch(format!(
            "student width {student_width} cannot cover teacher width {teacher_width}"
        )));
    }
    let batch = student.len() / student_width;
    if batch == 0 || student.len() != batch * student_width || teacher.len() != batch * teacher_width {
        return Err(Error::ShapeMismatch(format!(
            "{} student / {} teacher logits do not describe one batch",
            student.len(),
            teacher.len()
        )));
    }
    let scale = 1.0 / (batch * teacher_width) as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; student.len()];
    for b in 0..batch {
        for j in 0..teacher_width {
            let z = student[b * student_width + j];
            let q = sigmoid(teacher[b * teacher_width + j]);
            loss += bce_logit(z, q);
            grad[b * student_width + j] = (sigmoid(z) - q) * scale;
        }
    }
    Ok((loss * scale, grad))
}

/// Mean BCE between `sigmoid(student)` and the soft targets `sigmoid(teacher)`.
pub fn kd_loss(student: &[f64], student_width: usize, teacher: &[f64], teacher_width: usize) -> Result<f64> {
    Ok(kd_loss_and_grad(student, student_width, teacher, teacher_width)?.0)
}

/// GTK loss and its gradient with respect to `current`.
pub fn gtk_loss_and_grad(current: &[f64], previous: &[f64]) -> Result<(f64, Vec<f64>)> {
    if current.len() != previous.len() {
        return Err(Error::ShapeMismatch(format!(
            "gradient lengths {} and {}",
            current.len(),
            previous.len()
        )));
    }
    let (na, nb) = (norm(current), norm(previous));
    if !(na >= ZERO_GRADIENT_NORM && nb >= ZERO_GRADIENT_NORM) {
        return Err(Error::ZeroGradient);
    }
    let cos = dot(current, previous) / (na * nb);
    let p_raw = 0.5 * (1.0 + cos);
    let p = p_raw.clamp(GTK_CLAMP, 1.0 - GTK_CLAMP);
    let loss = -p.ln();
    if p != p_raw {
        return Ok((loss, vec![0.0; current.len()]));
    }
    let dcos = -0.5 / p;
    let grad = current
        .iter()
        .zip(previous)
        .map(|(a, b)| dcos * (b / (na * nb) - cos * a / (na * na)))
        .collect();
    Ok((loss, grad))
}

/// `-ln(clamp((1 + cos) / 2))` of the cosine between two gradient vectors.
pub fn gtk_loss(current: &GradientVector, previous: &GradientVector) -> Result<f64> {
    Ok(gtk_loss_and_grad(&current.values, &previous.values)?.0)
}

fn check_batch(model: &ModelState, inputs: &[f64], targets: &[usize]) -> Result<()> {
    if targets.is_empty() {
        return Err(Error::EmptyBatch);
    }
    model.check_inputs(inputs, targets.len())
}

/// Gradient of `objective` with respect to the designated last feature layer,
/// aggregated over the batch.
pub fn feature_gradient_with(
    model: &ModelState,
    inputs: &[f64],
    batch: usize,
    objective: &dyn LogitObjective,
) -> Result<GradientVector> {
    if batch == 0 {
        return Err(Error::EmptyBatch);
    }
    let (plan, trace) = model.trace(inputs, batch)?;
    let (_, dlogits) = objective.value_and_grad(trace.logits(), plan.head_width)?;
    Ok(GradientVector::new(feature_grad(model, &plan, &trace, dlogits)))
}

fn feature_grad(model: &ModelState, plan: &Plan, trace: &Trace<f64>, dlogits: Vec<f64>) -> Vec<f64> {
    let mut grads = backward(plan, &model.param_slices(), trace, dlogits, plan.feature_op);
    std::mem::take(&mut grads[plan.feature_array()])
}

/// Class-loss gradient with respect to the designated last feature layer.
pub fn extract_feature_gradient(model: &ModelState, inputs: &[f64], targets: &[usize]) -> Result<GradientVector> {
    check_batch(model, inputs, targets)?;
    feature_gradient_with(model, inputs, targets.len(), &Bce { targets })
}

/// Loss value and gradient of the class loss with respect to every array.
pub fn class_loss_gradient(model: &ModelState, inputs: &[f64], targets: &[usize]) -> Result<(f64, Vec<Vec<f64>>)> {
    check_batch(model, inputs, targets)?;
    let (plan, trace) = model.trace(inputs, targets.len())?;
    let (loss, dlogits) = bce_and_grad(trace.logits(), plan.head_width, targets)?;
    Ok((loss, backward(&plan, &model.param_slices(), &trace, dlogits, 0)))
}

/// Class loss restricted to the head columns `block`: targets are block
/// offsets and the other columns are ignored. Returns the value and a
/// full-model gradient.
pub fn block_class_loss_gradient(
    model: &ModelState,
    inputs: &[f64],
    targets: &[usize],
    block: std::ops::Range<usize>,
) -> Result<(f64, Vec<Vec<f64>>)> {
    check_batch(model, inputs, targets)?;
    if block.end > model.head_width || block.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "block {block:?} outside head width {}",
            model.head_width
        )));
    }
    let (plan, trace) = model.trace(inputs, targets.len())?;
    let width = block.len();
    let sliced: Vec<f64> = trace
        .logits()
        .chunks(plan.head_width)
        .flat_map(|row| row[block.clone()].iter().copied())
        .collect();
    let (loss, dsliced) = bce_and_grad(&sliced, width, targets)?;
    let mut dlogits = vec![0.0; trace.logits().len()];
    for (row, drow) in dlogits.chunks_mut(plan.head_width).zip(dsliced.chunks(width)) {
        row[block.clone()].copy_from_slice(drow);
    }
    Ok((loss, backward(&plan, &model.param_slices(), &trace, dlogits, 0)))
}

/// Loss terms of one task group. Terms that were not evaluated are `None`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub class: f64,
    pub kd: Option<f64>,
    pub gtk: Option<f64>,
    /// The GTK term was requested but a gradient norm vanished.
    pub gtk_skipped: bool,
    pub total: f64,
}

#[derive(Clone, Debug)]
pub struct LossGradient {
    pub terms: LossTerms,
    /// One gradient per weight array, φ then θ.
    pub grads: Vec<Vec<f64>>,
}

/// Objective for one task group and its gradient.
///
/// For the current task this is the plain class loss. For a memory group it
/// is `α·class + β·kd + γ·gtk` against the frozen `teacher`; terms with a
/// zero weight are not evaluated. The teacher's feature gradient is a
/// constant, while the current model's is differentiated through.
pub fn combined_loss(
    model: &ModelState,
    teacher: Option<&ModelState>,
    inputs: &[f64],
    targets: &[usize],
    weights: &LossWeights,
    is_current_task: bool,
) -> Result<LossGradient> {
    check_batch(model, inputs, targets)?;
    let batch = targets.len();
    let params = model.param_slices();
    let (plan, trace) = model.trace(inputs, batch)?;
    let width = plan.head_width;
    let (class, dclass) = bce_and_grad(trace.logits(), width, targets)?;

    if is_current_task {
        let grads = backward(&plan, &params, &trace, dclass, 0);
        return Ok(LossGradient {
            terms: LossTerms {
                class,
                total: class,
                ..Default::default()
            },
            grads,
        });
    }

    let mut terms = LossTerms {
        class,
        ..Default::default()
    };
    let mut dlogits: Vec<f64> = dclass.iter().map(|d| weights.alpha * d).collect();
    let teacher_pass = if weights.beta > 0.0 || weights.gamma > 0.0 {
        let teacher = teacher.ok_or_else(|| Error::ConfigInvalid("memory group without a teacher".into()))?;
        Some((teacher, teacher.trace(inputs, batch)?))
    } else {
        None
    };

    if weights.beta > 0.0 {
        let (_, (tplan, ttrace)) = teacher_pass.as_ref().expect("teacher evaluated");
        let (kd, dkd) = kd_loss_and_grad(trace.logits(), width, ttrace.logits(), tplan.head_width)?;
        for (d, k) in dlogits.iter_mut().zip(&dkd) {
            *d += weights.beta * k;
        }
        terms.kd = Some(kd);
    }

    let mut grads = backward(&plan, &params, &trace, dlogits, 0);

    if weights.gamma > 0.0 {
        let (teacher, (tplan, ttrace)) = teacher_pass.as_ref().expect("teacher evaluated");
        let (_, dteacher) = bce_and_grad(ttrace.logits(), tplan.head_width, targets)?;
        let previous = feature_grad(teacher, tplan, ttrace, dteacher);
        let current = feature_grad(model, &plan, &trace, dclass);
        match gtk_loss_and_grad(&current, &previous) {
            Ok((gtk, dgtk)) => {
                terms.gtk = Some(gtk);
                if dgtk.iter().any(|&v| v != 0.0) {
                    let hvp = class_hessian_vector(model, &plan, inputs, targets, &dgtk);
                    for (g, h) in grads.iter_mut().zip(hvp) {
                        for (gi, hi) in g.iter_mut().zip(h) {
                            *gi += weights.gamma * hi;
                        }
                    }
                }
            }
            Err(Error::ZeroGradient) => terms.gtk_skipped = true,
            Err(e) => return Err(e),
        }
    }

    terms.total =
        weights.alpha * terms.class + weights.beta * terms.kd.unwrap_or(0.0) + weights.gamma * terms.gtk.unwrap_or(0.0);
    Ok(LossGradient { terms, grads })
}

/// `H v` where `H` is the Hessian of the class loss over all weights and `v`
/// is `direction` placed on the feature layer (zero elsewhere). By symmetry
/// of `H` this equals the gradient of `<direction, dL/dW_feature>`.
fn class_hessian_vector(
    model: &ModelState,
    plan: &Plan,
    inputs: &[f64],
    targets: &[usize],
    direction: &[f64],
) -> Vec<Vec<f64>> {
    let feature = plan.feature_array();
    let params: Vec<Vec<Dual>> = model
        .arrays()
        .enumerate()
        .map(|(i, a)| {
            if i == feature {
                a.data.iter().zip(direction).map(|(&w, &v)| Dual::new(w, v)).collect()
            } else {
                a.data.iter().map(|&w| Dual::new(w, 0.0)).collect()
            }
        })
        .collect();
    let x: Vec<Dual> = inputs.iter().map(|&v| Dual::from_f64(v)).collect();
    let trace = forward(plan, &params, x, targets.len());
    let (_, dlogits) = bce_generic(trace.logits(), plan.head_width, targets);
    backward(plan, &params, &trace, dlogits, 0)
        .into_iter()
        .map(|g| g.into_iter().map(|d| d.eps).collect())
        .collect()
}

/// Scalar value of [`combined_loss`] without its gradient.
pub fn combined_loss_value(
    model: &ModelState,
    teacher: Option<&ModelState>,
    inputs: &[f64],
    targets: &[usize],
    weights: &LossWeights,
    is_current_task: bool,
) -> Result<f64> {
    check_batch(model, inputs, targets)?;
    let (plan, trace) = model.trace(inputs, targets.len())?;
    let (class, dclass) = bce_and_grad(trace.logits(), plan.head_width, targets)?;
    if is_current_task {
        return Ok(class);
    }
    let mut total = weights.alpha * class;
    if weights.beta > 0.0 || weights.gamma > 0.0 {
        let teacher = teacher.ok_or_else(|| Error::ConfigInvalid("memory group without a teacher".into()))?;
        let (tplan, ttrace) = teacher.trace(inputs, targets.len())?;
        if weights.beta > 0.0 {
            total += weights.beta * kd_loss(trace.logits(), plan.head_width, ttrace.logits(), tplan.head_width)?;
        }
        if weights.gamma > 0.0 {
            let (_, dteacher) = bce_and_grad(ttrace.logits(), tplan.head_width, targets)?;
            let previous = feature_grad(teacher, &tplan, &ttrace, dteacher);
            let current = feature_grad(model, &plan, &trace, dclass);
            match gtk_loss_and_grad(&current, &previous) {
                Ok((gtk, _)) => total += weights.gamma * gtk,
                Err(Error::ZeroGradient) => {}
                Err(e) => return Err(e),
            }
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Activation, Arch};
    use proptest::prelude::*;

    const LN2: f64 = std::f64::consts::LN_2;

    #[test]
    fn class_loss_limits() {
        let logits = [60.0, -60.0, -60.0, 60.0];
        assert!(class_loss(&logits, 2, &[0, 1]).unwrap() < 1e-20);
        assert!((class_loss(&[0.0; 4], 2, &[0, 1]).unwrap() - LN2).abs() < 1e-15);
        assert!(matches!(
            class_loss(&[0.0; 2], 2, &[2]),
            Err(Error::LabelOutOfRange { label: 2, width: 2 })
        ));
        assert!(matches!(class_loss(&[], 2, &[]), Err(Error::EmptyBatch)));
    }

    #[test]
    fn kd_loss_limits_and_slicing() {
        let t = [60.0, -60.0];
        assert!(kd_loss(&t, 2, &t, 2).unwrap() < 1e-20);
        assert!((kd_loss(&[0.0, 0.0], 2, &[0.0, 0.0], 2).unwrap() - LN2).abs() < 1e-15);
        let wide = [0.3, -0.2, 9.0, -9.0];
        let narrow = [0.3, -0.2];
        assert_eq!(
            kd_loss(&wide, 4, &[1.0, 2.0], 2).unwrap(),
            kd_loss(&narrow, 2, &[1.0, 2.0], 2).unwrap()
        );
        let (_, g) = kd_loss_and_grad(&wide, 4, &[1.0, 2.0], 2).unwrap();
        assert_eq!(&g[2..], &[0.0, 0.0]);
        assert!(matches!(kd_loss(&narrow, 2, &wide, 4), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn kd_self_loss_is_teacher_entropy() {
        let t = [0.4, -1.3, 2.2, 0.0, -0.7, 1.1];
        let entropy: f64 = t
            .iter()
            .map(|&z| {
                let q = 1.0 / (1.0 + (-z).exp());
                -(q * q.ln() + (1.0 - q) * (1.0 - q).ln())
            })
            .sum::<f64>()
            / 6.0;
        assert!((kd_loss(&t, 3, &t, 3).unwrap() - entropy).abs() < 1e-14);
    }

    #[test]
    fn gtk_reference_values() {
        let g = GradientVector::new(vec![0.3, -1.2, 2.0]);
        assert!(gtk_loss(&g, &g).unwrap() < 1e-6);
        let a = GradientVector::new(vec![1.0, 0.0, 2.0]);
        let b = GradientVector::new(vec![0.0, 5.0, 0.0]);
        assert!((gtk_loss(&a, &b).unwrap() - LN2).abs() < 1e-9);
        let neg = GradientVector::new(g.values.iter().map(|v| -v).collect());
        let anti = gtk_loss(&g, &neg).unwrap();
        assert!((anti + GTK_CLAMP.ln()).abs() < 1e-9);
        assert!(anti.is_finite());
        let zero = GradientVector::new(vec![0.0; 3]);
        assert!(matches!(gtk_loss(&g, &zero), Err(Error::ZeroGradient)));
        assert!(matches!(
            gtk_loss(&g, &GradientVector::new(vec![1.0])),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn gtk_gradient_matches_finite_differences() {
        let a = [0.4, -0.3, 1.1, 0.2];
        let b = [0.1, 0.9, -0.5, 0.7];
        let (_, g) = gtk_loss_and_grad(&a, &b).unwrap();
        for i in 0..4 {
            let h = 1e-6;
            let mut p = a;
            p[i] += h;
            let mut m = a;
            m[i] -= h;
            let fd = (gtk_loss_and_grad(&p, &b).unwrap().0 - gtk_loss_and_grad(&m, &b).unwrap().0) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-8, "{i}: {fd} vs {}", g[i]);
        }
    }

    proptest! {
        #[test]
        fn gtk_symmetric_and_scale_invariant(
            a in proptest::collection::vec(-3.0f64..3.0, 6),
            b in proptest::collection::vec(-3.0f64..3.0, 6),
            sa in 0.01f64..100.0,
            sb in 0.01f64..100.0,
        ) {
            prop_assume!(norm(&a) > 1e-3 && norm(&b) > 1e-3);
            let (ga, gb) = (GradientVector::new(a.clone()), GradientVector::new(b.clone()));
            let base = gtk_loss(&ga, &gb).unwrap();
            prop_assert!((base - gtk_loss(&gb, &ga).unwrap()).abs() <= 1e-12 * base.max(1.0));
            let scaled = gtk_loss(
                &GradientVector::new(a.iter().map(|v| v * sa).collect()),
                &GradientVector::new(b.iter().map(|v| v * sb).collect()),
            ).unwrap();
            prop_assert!((base - scaled).abs() <= 1e-9 * base.max(1.0));
        }

        #[test]
        fn gtk_decreases_in_cosine(c1 in -0.999f64..0.999, c2 in -0.999f64..0.999) {
            prop_assume!((c1 - c2).abs() > 1e-9);
            let at = |c: f64| {
                let s = (1.0 - c * c).sqrt();
                gtk_loss(&GradientVector::new(vec![1.0, 0.0]), &GradientVector::new(vec![c, s])).unwrap()
            };
            let (lo, hi) = if c1 < c2 { (c1, c2) } else { (c2, c1) };
            prop_assert!(at(lo) > at(hi));
        }
    }

    #[test]
    fn linear_squared_error_feature_gradient() {
        // g(x) = Wx with an identity head, loss ||Wx - y||^2 on one sample.
        let mut m = ModelState::init(Arch::mlp(2, vec![2], Activation::Identity), 2, 0).unwrap();
        m.phi[0].data = vec![0.5, -1.0, 2.0, 0.25];
        m.phi[1].data = vec![0.0, 0.0];
        m.theta[0].data = vec![1.0, 0.0, 0.0, 1.0];
        m.theta[1].data = vec![0.0, 0.0];
        let x = [1.5, -2.0];
        let y = [0.3, 0.7];
        let g = feature_gradient_with(&m, &x, 1, &SquaredError { targets: &y }).unwrap();
        let wx = [0.5 * 1.5 + 1.0 * 2.0, 2.0 * 1.5 - 0.25 * 2.0];
        let expected: Vec<f64> = (0..2)
            .flat_map(|i| (0..2).map(move |j| 2.0 * (wx[i] - y[i]) * x[j]))
            .collect();
        for (a, b) in g.values.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    fn fd_feature_gradient(model: &ModelState, inputs: &[f64], targets: &[usize]) -> Vec<f64> {
        let idx = model.feature_array_index();
        let h = 1e-5;
        (0..model.phi[idx].data.len())
            .map(|j| {
                let mut p = model.clone();
                p.phi[idx].data[j] += h;
                let mut m = model.clone();
                m.phi[idx].data[j] -= h;
                let lp = class_loss(&p.logits(inputs, targets.len()).unwrap(), p.head_width, targets).unwrap();
                let lm = class_loss(&m.logits(inputs, targets.len()).unwrap(), m.head_width, targets).unwrap();
                (lp - lm) / (2.0 * h)
            })
            .collect()
    }

    fn assert_close(analytic: &[f64], numeric: &[f64], tol: f64) {
        let scale = analytic.iter().chain(numeric).fold(0.0f64, |m, v| m.max(v.abs()));
        for (a, n) in analytic.iter().zip(numeric) {
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-3 * scale);
            assert!(rel < tol, "analytic {a} numeric {n} rel {rel}");
        }
    }

    #[test]
    fn feature_gradient_matches_finite_differences() {
        let m = ModelState::init(Arch::mlp(3, vec![5, 4], Activation::Tanh), 3, 11).unwrap();
        let x: Vec<f64> = (0..4 * 3).map(|i| ((i * 7) as f64 * 0.31).sin()).collect();
        let t = [0, 2, 1, 2];
        let g = extract_feature_gradient(&m, &x, &t).unwrap();
        assert_eq!(g.values.len(), 4 * 5);
        assert_close(&g.values, &fd_feature_gradient(&m, &x, &t), 1e-4);

        let c = ModelState::init(Arch::small_cnn(2, 5, 5), 3, 4).unwrap();
        let x: Vec<f64> = (0..2 * 50).map(|i| ((i * 3) as f64 * 0.17).cos()).collect();
        let g = extract_feature_gradient(&c, &x, &[1, 0]).unwrap();
        assert_close(&g.values, &fd_feature_gradient(&c, &x, &[1, 0]), 1e-4);
    }

    #[test]
    fn duplicated_batch_same_gradient() {
        let m = ModelState::init(Arch::mlp(2, vec![3], Activation::Tanh), 2, 1).unwrap();
        let x = [0.2, -0.4, 1.0, 0.5];
        let g1 = extract_feature_gradient(&m, &x, &[0, 1]).unwrap();
        let x2 = [0.2, -0.4, 0.2, -0.4, 1.0, 0.5, 1.0, 0.5];
        let g2 = extract_feature_gradient(&m, &x2, &[0, 0, 1, 1]).unwrap();
        for (a, b) in g1.values.iter().zip(&g2.values) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(matches!(extract_feature_gradient(&m, &[], &[]), Err(Error::EmptyBatch)));
    }

    fn fd_full(model: &ModelState, f: impl Fn(&ModelState) -> f64) -> Vec<Vec<f64>> {
        let h = 1e-5;
        let mut out = Vec::new();
        let arrays: Vec<usize> = model.arrays().map(|a| a.data.len()).collect();
        for (ai, &len) in arrays.iter().enumerate() {
            let mut g = Vec::with_capacity(len);
            for j in 0..len {
                let mut p = model.clone();
                p.arrays_mut().nth(ai).unwrap().data[j] += h;
                let mut m = model.clone();
                m.arrays_mut().nth(ai).unwrap().data[j] -= h;
                g.push((f(&p) - f(&m)) / (2.0 * h));
            }
            out.push(g);
        }
        out
    }

    #[test]
    fn combined_gradient_matches_finite_differences_on_cnn() {
        let teacher = ModelState::init(Arch::small_cnn(1, 5, 5), 2, 3).unwrap();
        let mut student = teacher.grow_head(2, 8).unwrap();
        for a in student.arrays_mut() {
            for (j, v) in a.data.iter_mut().enumerate() {
                *v += 0.05 * ((j as f64) * 0.7).sin();
            }
        }
        let x: Vec<f64> = (0..3 * 25).map(|i| ((i * 5) as f64 * 0.23).sin()).collect();
        let t = [0, 1, 1];
        let w = LossWeights {
            alpha: 0.7,
            beta: 1.3,
            gamma: 2.0,
        };
        let lg = combined_loss(&student, Some(&teacher), &x, &t, &w, false).unwrap();
        assert!(lg.terms.gtk.is_some());
        let fd = fd_full(&student, |m| {
            combined_loss_value(m, Some(&teacher), &x, &t, &w, false).unwrap()
        });
        for (a, n) in lg.grads.iter().zip(&fd) {
            assert_close(a, n, 1e-4);
        }
    }

    #[test]
    fn zero_weights_give_zero_loss_and_gradient() {
        let teacher = ModelState::init(Arch::mlp(2, vec![3], Activation::Tanh), 2, 1).unwrap();
        let w = LossWeights {
            alpha: 0.0,
            beta: 0.0,
            gamma: 0.0,
        };
        let lg = combined_loss(&teacher, Some(&teacher), &[0.1, 0.2], &[1], &w, false).unwrap();
        assert_eq!(lg.terms.total, 0.0);
        assert!(lg.grads.iter().flatten().all(|&g| g == 0.0));
    }

    #[test]
    fn student_equal_to_teacher() {
        let teacher = ModelState::init(Arch::mlp(2, vec![4, 3], Activation::Tanh), 3, 5).unwrap();
        let x = [0.1, 0.2, -1.0, 0.7];
        let t = [2, 0];
        let lg = combined_loss(&teacher, Some(&teacher), &x, &t, &LossWeights::default(), false).unwrap();
        assert!(lg.terms.gtk.unwrap() < 1e-6);
        let logits = teacher.logits(&x, 2).unwrap();
        let entropy: f64 = logits
            .iter()
            .map(|&z| {
                let q = 1.0 / (1.0 + (-z).exp());
                -(q * q.ln() + (1.0 - q) * (1.0 - q).ln())
            })
            .sum::<f64>()
            / logits.len() as f64;
        assert!((lg.terms.kd.unwrap() - entropy).abs() < 1e-14);
    }

    #[test]
    fn gamma_zero_is_kd_baseline() {
        let teacher = ModelState::init(Arch::mlp(2, vec![4], Activation::Tanh), 2, 5).unwrap();
        let student = teacher.grow_head(2, 1).unwrap();
        let x = [0.1, 0.2, -1.0, 0.7];
        let t = [1, 0];
        let w = LossWeights {
            gamma: 0.0,
            ..Default::default()
        };
        let a = combined_loss(&student, Some(&teacher), &x, &t, &w, false).unwrap();
        assert!(a.terms.gtk.is_none());
        let logits = student.logits(&x, 2).unwrap();
        let tl = teacher.logits(&x, 2).unwrap();
        let expected = class_loss(&logits, 4, &t).unwrap() + kd_loss(&logits, 4, &tl, 2).unwrap();
        assert!((a.terms.total - expected).abs() < 1e-15);
    }

    #[test]
    fn current_task_is_class_loss_only() {
        let m = ModelState::init(Arch::mlp(2, vec![4], Activation::Tanh), 2, 5).unwrap();
        let x = [0.1, 0.2];
        let a = combined_loss(&m, None, &x, &[1], &LossWeights::default(), true).unwrap();
        let (l, g) = class_loss_gradient(&m, &x, &[1]).unwrap();
        assert_eq!(a.terms.total, l);
        assert_eq!(a.grads, g);
        assert!(combined_loss(&m, None, &x, &[1], &LossWeights::default(), false).is_err());
    }
}
