//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any fails. The digit benchmark criteria share one set of
//! runs, which take several minutes on a single core.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tkil::data::{make_synthetic_blobs, stage_data, Dataset, StageSchedule};
use tkil::harness::{self, Ablation, ExperimentConfig, ResultsBundle};
use tkil::losses::{class_loss, combined_loss, gtk_loss, kd_loss, GradientVector, LossWeights};
use tkil::memory::{ExemplarMemory, GroupedBatch, TaskGroup};
use tkil::model::{average_weights, Activation, Arch, ModelState};
use tkil::optim::{Optimizer, OptimizerKind, Sgd};
use tkil::trainer::{batch_seed, train_minibatch, train_stage_with, StageState, TrainConfig};

/// Denominator floor of the relative error in the gradient check.
const REL_FLOOR: f64 = 1e-6;

type Outcome = Result<String, String>;

/// One-hidden-layer tanh network with hand-written forward and backward.
#[derive(Clone, Debug)]
struct Mlp {
    d: usize,
    h: usize,
    k: usize,
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: Vec<f64>,
}

struct Pass {
    hidden: Vec<f64>,
    logits: Vec<f64>,
}

impl Mlp {
    fn of(m: &ModelState) -> Mlp {
        let (h, d) = (m.phi[0].shape[0], m.phi[0].shape[1]);
        Mlp {
            d,
            h,
            k: m.head_width,
            w1: m.phi[0].data.clone(),
            b1: m.phi[1].data.clone(),
            w2: m.theta[0].data.clone(),
            b2: m.theta[1].data.clone(),
        }
    }

    fn params_mut(&mut self) -> [&mut Vec<f64>; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    fn forward(&self, x: &[f64]) -> Pass {
        let n = x.len() / self.d;
        let mut hidden = vec![0.0; n * self.h];
        let mut logits = vec![0.0; n * self.k];
        for b in 0..n {
            for i in 0..self.h {
                let mut a = self.b1[i];
                for j in 0..self.d {
                    a += self.w1[i * self.d + j] * x[b * self.d + j];
                }
                hidden[b * self.h + i] = a.tanh();
            }
            for c in 0..self.k {
                let mut z = self.b2[c];
                for i in 0..self.h {
                    z += self.w2[c * self.h + i] * hidden[b * self.h + i];
                }
                logits[b * self.k + c] = z;
            }
        }
        Pass { hidden, logits }
    }

    /// Gradients of every array given the logit gradient.
    fn backward(&self, x: &[f64], pass: &Pass, dz: &[f64]) -> [Vec<f64>; 4] {
        let n = x.len() / self.d;
        let mut gw1 = vec![0.0; self.w1.len()];
        let mut gb1 = vec![0.0; self.h];
        let mut gw2 = vec![0.0; self.w2.len()];
        let mut gb2 = vec![0.0; self.k];
        for b in 0..n {
            for c in 0..self.k {
                let g = dz[b * self.k + c];
                gb2[c] += g;
                for i in 0..self.h {
                    gw2[c * self.h + i] += g * pass.hidden[b * self.h + i];
                }
            }
            for i in 0..self.h {
                let mut dh = 0.0;
                for c in 0..self.k {
                    dh += self.w2[c * self.h + i] * dz[b * self.k + c];
                }
                let hv = pass.hidden[b * self.h + i];
                let da = dh * (1.0 - hv * hv);
                gb1[i] += da;
                for j in 0..self.d {
                    gw1[i * self.d + j] += da * x[b * self.d + j];
                }
            }
        }
        [gw1, gb1, gw2, gb2]
    }

    fn sgd(&mut self, grads: &[Vec<f64>; 4], lr: f64) {
        for (p, g) in self.params_mut().into_iter().zip(grads) {
            for (w, gi) in p.iter_mut().zip(g) {
                *w -= lr * gi;
            }
        }
    }

    fn max_diff(&self, m: &ModelState) -> f64 {
        let ours = [&self.w1, &self.b1, &self.w2, &self.b2];
        ours.iter()
            .zip(m.arrays())
            .flat_map(|(a, b)| a.iter().zip(&b.data).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max)
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Binary cross-entropy of logit `z` against probability `q`.
fn bce(z: f64, q: f64) -> f64 {
    let p = sigmoid(z);
    -(q * p.ln() + (1.0 - q) * (1.0 - p).ln())
}

/// Mean BCE over all logits and its logit gradient.
fn class_oracle(logits: &[f64], k: usize, targets: &[usize]) -> (f64, Vec<f64>) {
    let scale = 1.0 / logits.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; logits.len()];
    for (b, &t) in targets.iter().enumerate() {
        for c in 0..k {
            let y = if c == t { 1.0 } else { 0.0 };
            let z = logits[b * k + c];
            loss += bce(z, y) * scale;
            grad[b * k + c] = (sigmoid(z) - y) * scale;
        }
    }
    (loss, grad)
}

/// Distillation against the teacher's columns and its student logit gradient.
fn kd_oracle(student: &[f64], k: usize, teacher: &[f64], tk: usize) -> (f64, Vec<f64>) {
    let n = teacher.len() / tk;
    let scale = 1.0 / (n * tk) as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; student.len()];
    for b in 0..n {
        for c in 0..tk {
            let q = sigmoid(teacher[b * tk + c]);
            let z = student[b * k + c];
            loss += bce(z, q) * scale;
            grad[b * k + c] = (sigmoid(z) - q) * scale;
        }
    }
    (loss, grad)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Class-loss gradient with respect to the hidden layer weights.
fn feature_gradient(m: &Mlp, x: &[f64], targets: &[usize]) -> Vec<f64> {
    let pass = m.forward(x);
    let (_, dz) = class_oracle(&pass.logits, m.k, targets);
    let [gw1, ..] = m.backward(x, &pass, &dz);
    gw1
}

/// Memory-group objective `α·class + β·kd + γ·gtk` computed from scratch.
fn combined_oracle(m: &Mlp, teacher: &Mlp, x: &[f64], targets: &[usize], w: &LossWeights) -> (f64, f64) {
    let pass = m.forward(x);
    let tpass = teacher.forward(x);
    let (class, _) = class_oracle(&pass.logits, m.k, targets);
    let (kd, _) = kd_oracle(&pass.logits, m.k, &tpass.logits, teacher.k);
    let cos = cosine(&feature_gradient(m, x, targets), &feature_gradient(teacher, x, targets));
    let p = 0.5 * (1.0 + cos);
    let gtk = -p.ln();
    (w.alpha * class + w.beta * kd + w.gamma * gtk, p)
}

fn inputs(n: usize, d: usize, phase: f64) -> Vec<f64> {
    (0..n * d).map(|i| (i as f64 * 0.73 + phase).sin() * 1.3).collect()
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let arch = Arch::mlp(4, vec![10], Activation::Tanh);
    let mut teacher = ModelState::init(arch.clone(), 2, 3).unwrap();
    let model = ModelState::init(arch.clone(), 2, 3).unwrap();
    // Nudge the teacher so the two feature gradients disagree.
    for a in teacher.arrays_mut() {
        for (i, v) in a.data.iter_mut().enumerate() {
            *v += 0.3 * ((i as f64) * 1.7).cos();
        }
    }
    let model = model.grow_head(2, 9).unwrap();
    if model.num_params() > 500 {
        return Err(format!("{} parameters", model.num_params()));
    }
    let x = inputs(6, 4, 0.2);
    let targets = [0, 1, 1, 0, 1, 0];
    let t_ref = Mlp::of(&teacher);
    let mut worst: f64 = 0.0;
    for w in [
        LossWeights::default(),
        LossWeights {
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
        },
        LossWeights {
            alpha: 0.5,
            beta: 2.0,
            gamma: 5.0,
        },
    ] {
        let lg = combined_loss(&model, Some(&teacher), &x, &targets, &w, false).map_err(|e| e.to_string())?;
        let (value, p) = combined_oracle(&Mlp::of(&model), &t_ref, &x, &targets, &w);
        if !(1e-3..1.0 - 1e-3).contains(&p) || lg.terms.gtk.is_none() {
            return Err(format!("gtk term inactive (p = {p})"));
        }
        if (value - lg.terms.total).abs() > 1e-12 {
            return Err(format!("loss {} vs oracle {value}", lg.terms.total));
        }
        let step = 1e-5;
        for (ai, g) in lg.grads.iter().enumerate() {
            for (j, &analytic) in g.iter().enumerate() {
                let at = |delta: f64| {
                    let mut m = Mlp::of(&model);
                    m.params_mut()[ai][j] += delta;
                    combined_oracle(&m, &t_ref, &x, &targets, &w).0
                };
                let numeric = (at(step) - at(-step)) / (2.0 * step);
                let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR);
                worst = worst.max(rel);
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let detail = format!("max rel error {worst:.2e}, {} params, {secs:.1}s", model.num_params());
    if worst < 1e-4 && secs < 60.0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion_2() -> Outcome {
    let mut failures = Vec::new();
    let mut check = |ok: bool, what: String| {
        if !ok {
            failures.push(what);
        }
    };
    let g: Vec<f64> = (0..12).map(|i| (i as f64 * 0.9).sin() + 0.1).collect();
    let h: Vec<f64> = (0..12).map(|i| (i as f64 * 1.3 + 0.4).cos()).collect();
    let gv = |v: &[f64]| GradientVector::new(v.to_vec());

    let same = gtk_loss(&gv(&g), &gv(&g)).unwrap();
    check(same < 1e-6, format!("gtk(G, G) = {same}"));

    let (u, v) = (vec![1.0, 2.0, 0.0, -1.0], vec![2.0, -1.0, 5.0, 0.0]);
    let ortho = gtk_loss(&gv(&u), &gv(&v)).unwrap();
    check(
        (ortho - std::f64::consts::LN_2).abs() <= 1e-9,
        format!("orthogonal gtk = {ortho}"),
    );

    let base = gtk_loss(&gv(&g), &gv(&h)).unwrap();
    let oracle = -(0.5 * (1.0 + cosine(&g, &h))).ln();
    check((base - oracle).abs() < 1e-12, format!("gtk {base} vs oracle {oracle}"));
    let mut scale_gap: f64 = 0.0;
    for a in [0.5, 3.0] {
        for b in [0.5, 3.0] {
            let ga: Vec<f64> = g.iter().map(|x| a * x).collect();
            let hb: Vec<f64> = h.iter().map(|x| b * x).collect();
            let scaled = gtk_loss(&gv(&ga), &gv(&hb)).unwrap();
            if a == 0.5 && b == 0.5 {
                check(scaled == base, format!("gtk not exactly invariant under ({a}, {b})"));
            }
            scale_gap = scale_gap.max((scaled - base).abs());
        }
    }
    check(scale_gap <= 1e-12, format!("scale invariance gap {scale_gap:e}"));

    let ln2 = std::f64::consts::LN_2;
    let half = class_loss(&[0.0; 6], 3, &[0, 2]).unwrap();
    check((half - ln2).abs() < 1e-12, format!("class loss at p = 0.5 is {half}"));
    let kd_half = kd_loss(&[0.0; 6], 3, &[0.0; 4], 2).unwrap();
    check(
        (kd_half - ln2).abs() < 1e-12,
        format!("kd loss at p = 0.5 is {kd_half}"),
    );
    let sat = class_loss(&[40.0, -40.0, -40.0, 40.0], 2, &[0, 1]).unwrap();
    check(sat < 1e-12, format!("saturated class loss {sat}"));
    let kd_sat = kd_loss(&[40.0, -40.0, -40.0, 40.0], 2, &[40.0, -40.0, -40.0, 40.0], 2).unwrap();
    check(kd_sat < 1e-12, format!("saturated kd loss {kd_sat}"));

    if failures.is_empty() {
        Ok(format!("scale invariance gap {scale_gap:.1e}"))
    } else {
        Err(failures.join("; "))
    }
}

fn two_task_blobs() -> (Dataset, StageSchedule) {
    (
        make_synthetic_blobs(4, 24, 4, 3.0, 5).unwrap(),
        StageSchedule::build(4, 2, 0, false).unwrap(),
    )
}

fn sgd_config(lr: f64) -> TrainConfig {
    TrainConfig {
        epochs: 5,
        batch_size: 16,
        lr_initial: lr,
        lr_decay_every: 0,
        optimizer: OptimizerKind::Sgd,
        ..Default::default()
    }
}

fn criterion_3() -> Outcome {
    let mut identity = true;
    for m in [
        ModelState::init(Arch::mlp(4, vec![10], Activation::Tanh), 4, 1).unwrap(),
        ModelState::init(Arch::small_cnn(1, 12, 12), 4, 2).unwrap(),
    ] {
        for n in 1..=5 {
            identity &= average_weights(&vec![m.clone(); n]).unwrap() == m;
        }
    }
    if !identity {
        return Err("average of identical models changed the weights".into());
    }

    let (data, schedule) = two_task_blobs();
    let lr = 0.2;
    let mut worst: f64 = 0.0;

    // Stage 1: one current-task group, plain class loss.
    let task1 = stage_data(&data, &schedule, 1).unwrap();
    let mut state = StageState {
        stage: 1,
        current_model: ModelState::init(Arch::mlp(4, vec![10], Activation::Tanh), 2, 4).unwrap(),
        teacher_model: None,
        memory: ExemplarMemory::new(0, vec![4]),
        schedule: schedule.clone(),
    };
    let mut reference = Mlp::of(&state.current_model);
    for step in 0..30 {
        let idx: Vec<usize> = (0..8).map(|i| (step * 8 + i) % task1.len()).collect();
        let part = task1.subset(&idx);
        let batch = GroupedBatch {
            groups: vec![TaskGroup {
                task: 1,
                inputs: part.inputs().to_vec(),
                labels: part.labels().to_vec(),
            }],
        };
        let (next, _) = train_minibatch(&state, &batch, &sgd_config(lr), lr, &mut Sgd).map_err(|e| e.to_string())?;
        state.current_model = next;
        let targets: Vec<usize> = part.labels().iter().map(|&l| schedule.column_of(l).unwrap()).collect();
        let pass = reference.forward(part.inputs());
        let (_, dz) = class_oracle(&pass.logits, reference.k, &targets);
        let grads = reference.backward(part.inputs(), &pass, &dz);
        reference.sgd(&grads, lr);
        worst = worst.max(reference.max_diff(&state.current_model));
    }

    // Stage 2: one memory group under class loss plus distillation.
    let teacher = state.current_model.clone();
    let t_ref = Mlp::of(&teacher);
    let mut config = sgd_config(lr);
    config.loss_weights = LossWeights {
        alpha: 1.0,
        beta: 1.0,
        gamma: 0.0,
    };
    let mut state = StageState {
        stage: 2,
        current_model: teacher.grow_head(2, 8).unwrap(),
        teacher_model: Some(teacher),
        memory: ExemplarMemory::new(0, vec![4]),
        schedule: schedule.clone(),
    };
    let mut reference = Mlp::of(&state.current_model);
    for step in 0..30 {
        let idx: Vec<usize> = (0..8).map(|i| (step * 5 + i) % task1.len()).collect();
        let part = task1.subset(&idx);
        let batch = GroupedBatch {
            groups: vec![TaskGroup {
                task: 1,
                inputs: part.inputs().to_vec(),
                labels: part.labels().to_vec(),
            }],
        };
        let (next, _) = train_minibatch(&state, &batch, &config, lr, &mut Sgd).map_err(|e| e.to_string())?;
        state.current_model = next;
        let targets: Vec<usize> = part.labels().iter().map(|&l| schedule.column_of(l).unwrap()).collect();
        let pass = reference.forward(part.inputs());
        let tpass = t_ref.forward(part.inputs());
        let (_, dclass) = class_oracle(&pass.logits, reference.k, &targets);
        let (_, dkd) = kd_oracle(&pass.logits, reference.k, &tpass.logits, t_ref.k);
        let dz: Vec<f64> = dclass.iter().zip(&dkd).map(|(a, b)| a + b).collect();
        let grads = reference.backward(part.inputs(), &pass, &dz);
        reference.sgd(&grads, lr);
        worst = worst.max(reference.max_diff(&state.current_model));
    }

    let detail = format!("max weight difference {worst:.1e} over 60 steps");
    if worst < 1e-10 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion_4() -> Outcome {
    let (data, schedule) = two_task_blobs();
    let task1 = stage_data(&data, &schedule, 1).unwrap();
    let init = ModelState::init(Arch::mlp(4, vec![10], Activation::Tanh), 2, 6).unwrap();
    let state = StageState {
        stage: 1,
        current_model: init.clone(),
        teacher_model: None,
        memory: ExemplarMemory::new(0, vec![4]),
        schedule: schedule.clone(),
    };
    let mut config = sgd_config(0.3);
    config.seed = 17;
    let mut trajectory = Vec::new();
    train_stage_with(&state, &task1, &config, &mut |_, m| trajectory.push(m.clone())).map_err(|e| e.to_string())?;

    // Plain classifier: shuffled epochs, BCE, SGD.
    let n = task1.len();
    let seed = batch_seed(config.seed, 1);
    let mut plain = init.clone();
    let mut manual = Mlp::of(&init);
    let mut steps = 0;
    let mut bitwise = true;
    let mut worst: f64 = 0.0;
    for epoch in 0..config.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(epoch as u64);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let part = task1.subset(chunk);
            let targets: Vec<usize> = part.labels().iter().map(|&l| schedule.column_of(l).unwrap()).collect();
            let (_, grads) = tkil::losses::class_loss_gradient(&plain, part.inputs(), &targets).unwrap();
            Sgd.step(&mut plain, &grads, config.lr_initial);
            let pass = manual.forward(part.inputs());
            let (_, dz) = class_oracle(&pass.logits, manual.k, &targets);
            let g = manual.backward(part.inputs(), &pass, &dz);
            manual.sgd(&g, config.lr_initial);
            let Some(pipeline) = trajectory.get(steps) else {
                return Err(format!("pipeline stopped after {steps} steps"));
            };
            bitwise &= *pipeline == plain;
            worst = worst.max(manual.max_diff(pipeline));
            steps += 1;
        }
    }
    if steps != trajectory.len() {
        return Err(format!("{} pipeline steps vs {steps}", trajectory.len()));
    }
    let detail = format!("{steps} steps, bitwise {bitwise}, hand-written trainer within {worst:.1e}");
    if bitwise && worst < 1e-10 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

struct Benchmark {
    full: ResultsBundle,
    kd_avg: ResultsBundle,
    kd: ResultsBundle,
    gamma_zero: ResultsBundle,
    gamma_ten: ResultsBundle,
    secs: f64,
}

fn benchmark() -> tkil::error::Result<Benchmark> {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/digits.toml");
    let mut config = ExperimentConfig::from_file(&path)?;
    config.output_dir = PathBuf::new();
    assert_eq!(config.seeds, vec![0, 1, 2]);
    assert_eq!(config.train.loss_weights.gamma, 0.1);
    let start = Instant::now();
    let ablation = harness::ablate(&config, &[Ablation::Full, Ablation::KdAvg, Ablation::Kd], false)?;
    let sweep = harness::gamma_sweep(&config, &[0.0, 10.0], false)?;
    let mut a = ablation.bundles.into_iter();
    let mut s = sweep.bundles.into_iter();
    Ok(Benchmark {
        full: a.next().unwrap(),
        kd_avg: a.next().unwrap(),
        kd: a.next().unwrap(),
        gamma_zero: s.next().unwrap(),
        gamma_ten: s.next().unwrap(),
        secs: start.elapsed().as_secs_f64(),
    })
}

fn finals(bundle: &ResultsBundle, pick: impl Fn(&tkil::inference::StageReport) -> f64) -> Vec<f64> {
    bundle.runs.iter().map(|r| pick(r.reports.last().unwrap())).collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn criterion_5(b: &Benchmark) -> Outcome {
    let avg = finals(&b.full, |r| r.avg_incremental_accuracy);
    let task = finals(&b.full, |r| r.task_accuracy);
    let stages = b.full.runs.iter().all(|r| r.reports.len() == 5);
    let detail = format!(
        "avg incremental {avg:.3?} (mean {:.3}), final task {task:.3?} (mean {:.3}), all runs {:.0}s",
        mean(&avg),
        mean(&task),
        b.secs
    );
    if stages && avg.iter().all(|&a| a >= 0.90) && task.iter().all(|&t| t >= 0.95) && b.secs <= 7200.0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion_6(b: &Benchmark) -> Outcome {
    let full = mean(&finals(&b.full, |r| r.task_accuracy));
    let kd_avg = mean(&finals(&b.kd_avg, |r| r.task_accuracy));
    let kd = mean(&finals(&b.kd, |r| r.task_accuracy));
    let single = |x: &ResultsBundle| mean(&finals(x, |r| r.single_sample_task_accuracy));
    let detail = format!(
        "final task accuracy full {full:.4}, kd+avg {kd_avg:.4}, kd {kd:.4}; single-sample {:.4} / {:.4} / {:.4}",
        single(&b.full),
        single(&b.kd_avg),
        single(&b.kd)
    );
    if full >= kd_avg && kd_avg >= kd && full - kd >= 0.10 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion_7(b: &Benchmark) -> Outcome {
    let low = mean(&finals(&b.full, |r| r.task_accuracy));
    let high = mean(&finals(&b.gamma_ten, |r| r.task_accuracy));
    let identical = b.gamma_zero.runs == b.kd_avg.runs;
    let detail =
        format!("final task accuracy at 0.1 {low:.4}, at 10 {high:.4}; zero row matches disabled term: {identical}");
    if low >= high && identical {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion_8(b: &Benchmark) -> Outcome {
    let mut checked = 0;
    let mut margin = f64::INFINITY;
    for bundle in [&b.full, &b.kd_avg, &b.kd, &b.gamma_zero, &b.gamma_ten] {
        for run in &bundle.runs {
            for r in &run.reports {
                checked += 1;
                margin = margin.min(r.oracle_class_accuracy - r.class_accuracy);
            }
        }
    }
    let detail = format!("{checked} stage reports, smallest oracle margin {margin:.4}");
    if margin >= 0.0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn main() -> ExitCode {
    let mut failed = 0;
    let mut report = |n: usize, name: &str, outcome: Outcome| {
        let (tag, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("criterion {n} {name:<24} {tag}  {detail}");
    };
    report(1, "gradient check", criterion_1());
    report(2, "loss oracles", criterion_2());
    report(3, "averaging oracles", criterion_3());
    report(4, "stage-1 equivalence", criterion_4());
    match benchmark() {
        Ok(b) => {
            report(5, "digit benchmark", criterion_5(&b));
            report(6, "ablation ordering", criterion_6(&b));
            report(7, "gamma sweep ordering", criterion_7(&b));
            report(8, "oracle-task bound", criterion_8(&b));
        }
        Err(e) => {
            for (n, name) in [
                (5, "digit benchmark"),
                (6, "ablation ordering"),
                (7, "gamma sweep ordering"),
                (8, "oracle-task bound"),
            ] {
                report(n, name, Err(format!("benchmark failed: {e}")));
            }
        }
    }
    println!("{failed} of 8 criteria failed");
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
