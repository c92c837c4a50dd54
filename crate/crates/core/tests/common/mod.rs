#![allow(dead_code)]

use artsy::tape::Tape;
use artsy::tape::Var;
use artsy::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Step for the five-point central stencil.
pub const FD_STEP: f64 = 1e-4;
/// Relative errors are taken against `max(|analytic|, |numeric|, REL_FLOOR)` so
/// that exact zeros (dead ReLU units) do not divide by zero.
pub const REL_FLOOR: f64 = 1e-6;

type Build = Box<dyn Fn(&mut Tape, &[Var]) -> artsy::Result<Var>>;

pub struct Case {
    pub name: &'static str,
    pub inputs: Vec<Tensor>,
    pub build: Build,
}

#[derive(Debug, Default)]
pub struct GradReport {
    pub trials: usize,
    pub checked_entries: usize,
    pub max_rel_err: f64,
    pub worst_case: String,
    pub ops: std::collections::BTreeSet<&'static str>,
}

fn loss_of(case: &Case, inputs: &[Tensor]) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), false)).collect();
    let loss = (case.build)(&mut tape, &vars).expect("forward");
    tape.value(loss).data()[0]
}

/// Largest relative error between tape gradients and five-point central differences.
pub fn check_case(case: &Case) -> (f64, usize) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = case.inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = (case.build)(&mut tape, &vars).expect("forward");
    tape.backward(loss).expect("backward");
    let mut worst: f64 = 0.0;
    let mut count = 0;
    for (i, v) in vars.iter().enumerate() {
        let analytic = tape.grad(*v).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; case.inputs[i].len()]);
        for (k, &a) in analytic.iter().enumerate() {
            let at = |offset: f64| {
                let mut x = case.inputs.clone();
                x[i].data_mut()[k] += offset;
                loss_of(case, &x)
            };
            let h = FD_STEP;
            let numeric = (8.0 * (at(h) - at(-h)) - (at(2.0 * h) - at(-2.0 * h))) / (12.0 * h);
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            worst = worst.max(err);
            count += 1;
        }
    }
    (worst, count)
}

fn dim(rng: &mut ChaCha8Rng) -> usize {
    rng.random_range(1..=8)
}

fn randn(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    Tensor::randn(r, c, rng)
}

/// Gaussian entries pushed at least `gap` away from zero, so ReLU kinks stay
/// outside the finite-difference stencil.
fn away_from_zero(rng: &mut ChaCha8Rng, r: usize, c: usize, gap: f64) -> Tensor {
    let mut t = randn(rng, r, c);
    for v in t.data_mut() {
        if v.abs() < gap {
            *v = if *v < 0.0 { -gap } else { gap } + *v;
        }
    }
    t
}

/// Reduces a non-scalar output to a scalar with fixed random weights.
fn project(tape: &mut Tape, out: Var, weights: &Tensor) -> artsy::Result<Var> {
    let w = tape.constant(weights.clone());
    let m = tape.mul(out, w)?;
    tape.sum(m)
}

pub const OPS: [&str; 14] = [
    "matmul", "add_row", "add", "sub", "mul", "scale", "relu", "sigmoid", "sum", "softmax_ce", "bce", "mlp_ce",
    "adapter", "gate_bce",
];

/// A random case for op `OPS[which]`.
pub fn random_case(which: usize, rng: &mut ChaCha8Rng) -> Case {
    let (m, n) = (dim(rng), dim(rng));
    let proj = randn(rng, m, n);
    let name = OPS[which];
    let (inputs, build): (Vec<Tensor>, Build) = match name {
        "matmul" => {
            let k = dim(rng);
            (
                vec![randn(rng, m, k), randn(rng, k, n)],
                Box::new(move |t, v| {
                    let o = t.matmul(v[0], v[1])?;
                    project(t, o, &proj)
                }),
            )
        }
        "add_row" => (
            vec![randn(rng, m, n), randn(rng, 1, n)],
            Box::new(move |t, v| {
                let o = t.add_row(v[0], v[1])?;
                project(t, o, &proj)
            }),
        ),
        "add" | "sub" | "mul" => (
            vec![randn(rng, m, n), randn(rng, m, n)],
            Box::new(move |t, v| {
                let o = match name {
                    "add" => t.add(v[0], v[1])?,
                    "sub" => t.sub(v[0], v[1])?,
                    _ => t.mul(v[0], v[1])?,
                };
                project(t, o, &proj)
            }),
        ),
        "scale" => {
            let s = rng.random_range(-3.0..3.0);
            (
                vec![randn(rng, m, n)],
                Box::new(move |t, v| {
                    let o = t.scale(v[0], s)?;
                    project(t, o, &proj)
                }),
            )
        }
        "relu" => (
            vec![away_from_zero(rng, m, n, 1e-3)],
            Box::new(move |t, v| {
                let o = t.relu(v[0])?;
                project(t, o, &proj)
            }),
        ),
        "sigmoid" => (
            vec![randn(rng, m, n).scale(3.0)],
            Box::new(move |t, v| {
                let o = t.sigmoid(v[0])?;
                project(t, o, &proj)
            }),
        ),
        "sum" => (
            vec![randn(rng, m, n)],
            Box::new(move |t, v| {
                let sq = t.mul(v[0], v[0])?;
                t.sum(sq)
            }),
        ),
        "softmax_ce" => {
            let n = n.max(2);
            let labels: Vec<usize> = (0..m).map(|_| rng.random_range(0..n)).collect();
            (
                vec![randn(rng, m, n).scale(2.0)],
                Box::new(move |t, v| t.softmax_cross_entropy(v[0], &labels)),
            )
        }
        "bce" => {
            let labels: Vec<f64> = (0..m).map(|_| f64::from(rng.random_range(0..2u8))).collect();
            let scores: Vec<f64> = (0..m).map(|_| rng.random_range(0.05..0.95)).collect();
            (
                vec![Tensor::new(m, 1, scores).unwrap()],
                Box::new(move |t, v| t.binary_cross_entropy(v[0], &labels)),
            )
        }
        "mlp_ce" => {
            let (h, c) = (dim(rng), dim(rng).max(2));
            let labels: Vec<usize> = (0..m).map(|_| rng.random_range(0..c)).collect();
            (
                vec![randn(rng, m, n), randn(rng, n, h), randn(rng, 1, h), randn(rng, h, c), randn(rng, 1, c)],
                Box::new(move |t, v| {
                    let a = t.matmul(v[0], v[1])?;
                    let a = t.add_row(a, v[2])?;
                    let a = t.relu(a)?;
                    let o = t.matmul(a, v[3])?;
                    let o = t.add_row(o, v[4])?;
                    t.softmax_cross_entropy(o, &labels)
                }),
            )
        }
        "adapter" => {
            let r = dim(rng);
            let alpha = rng.random_range(0.1..2.0);
            let proj = randn(rng, m, n);
            (
                vec![randn(rng, m, n), randn(rng, n, r), randn(rng, 1, r), randn(rng, r, n), randn(rng, 1, n)],
                Box::new(move |t, v| {
                    let d = t.matmul(v[0], v[1])?;
                    let d = t.add_row(d, v[2])?;
                    let d = t.relu(d)?;
                    let u = t.matmul(d, v[3])?;
                    let u = t.add_row(u, v[4])?;
                    let ht = t.scale(u, alpha)?;
                    let sum = t.add(v[0], ht)?;
                    project(t, sum, &proj)
                }),
            )
        }
        "gate_bce" => {
            let h = dim(rng);
            let labels: Vec<f64> = (0..m).map(|_| f64::from(rng.random_range(0..2u8))).collect();
            (
                vec![randn(rng, m, n), randn(rng, n, h), randn(rng, 1, h), randn(rng, h, 1).scale(0.5), randn(rng, 1, 1)],
                Box::new(move |t, v| {
                    let a = t.matmul(v[0], v[1])?;
                    let a = t.add_row(a, v[2])?;
                    let a = t.relu(a)?;
                    let s = t.matmul(a, v[3])?;
                    let s = t.add_row(s, v[4])?;
                    let s = t.sigmoid(s)?;
                    t.binary_cross_entropy(s, &labels)
                }),
            )
        }
        other => unreachable!("unknown op {other}"),
    };
    Case { name, inputs, build }
}

/// Runs `trials` random cases cycling through every op.
pub fn gradient_suite(trials: usize, seed: u64) -> GradReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradReport::default();
    for i in 0..trials {
        let case = random_case(i % OPS.len(), &mut rng);
        let (err, n) = check_case(&case);
        report.trials += 1;
        report.checked_entries += n;
        report.ops.insert(case.name);
        if err > report.max_rel_err {
            report.max_rel_err = err;
            report.worst_case = format!("trial {i} ({})", case.name);
        }
    }
    report
}

use artsy::config::{ExperimentConfig, StreamSource};
use artsy::data::{GaussianStreamSpec, TaskStream};
use artsy::engine::{self, ModelState};

/// Default config on a stream with `tasks` incremental tasks.
pub fn config_with_tasks(tasks: usize) -> ExperimentConfig {
    ExperimentConfig {
        stream: StreamSource::Synthetic(GaussianStreamSpec {
            num_tasks: tasks,
            ..GaussianStreamSpec::default()
        }),
        ..ExperimentConfig::default()
    }
}

/// Stream plus a model trained through every task, step by step.
pub fn trained(cfg: &ExperimentConfig) -> (TaskStream, ModelState) {
    let stream = engine::load_stream(cfg).unwrap();
    let (backbone, _) = engine::build_backbone(&stream, cfg).unwrap();
    let mut state = ModelState::new(backbone, Some(&stream.base), cfg).unwrap();
    for task in &stream.incremental {
        state.train_step(task, cfg).unwrap();
    }
    (stream, state)
}
