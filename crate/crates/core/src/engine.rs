//! Incremental training and gated inference over a [`TaskStream`].
//!
//! Per task `t`, [`ModelState::train_step`] runs, in order: create adapter and
//! gate, train the adapter with everything else frozen, freeze it, build the
//! task's prototypes (earlier prototypes stay as they are), train the gate
//! against buffered negatives, freeze it, and store the task's backbone
//! embeddings in the replay buffer. Checksums of every frozen component are
//! verified before and after.
//!
//! [`ModelState::infer`] evaluates all gates on the running feature sums, then
//! classifies `h_0 + sum(m_i * h_i)` against the prototype table.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::adapter::Adapter;
use crate::backbone::{Backbone, PretrainStats};
use crate::config::{ExperimentConfig, GateMode, Method, Scoring, StreamSource};
use crate::data::{gen_gaussian_stream, Task, TaskStream};
use crate::error::{Error, Result};
use crate::format::load_feature_stream;
use crate::gate::{balanced_accuracy, summed_feature, GateTrainStats, ReplayBuffer, SynapseGate};
use crate::metrics::{self, AccuracyMatrix};
use crate::nn::{argmax_rows, Linear};
use crate::prototype::{FeatureHead, PrototypeTable};
use crate::report::{RunReport, StepDiagnostics};
use crate::seed::{self, tags};
use crate::tensor::Tensor;

/// Per-sample gate bits `m_1..m_t`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GateVector(Vec<bool>);

impl GateVector {
    pub fn new(bits: Vec<bool>) -> Self {
        Self(bits)
    }

    pub fn bits(&self) -> &[bool] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|b| **b).count()
    }

    /// 1-based ids of the gates that fired.
    pub fn fired_tasks(&self) -> Vec<usize> {
        self.0
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i + 1))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    pub gates: Vec<GateVector>,
    pub predictions: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct StepStats {
    pub adapter_train_accuracy: f64,
    pub gate: GateTrainStats,
    pub seconds: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub backbone: Backbone,
    pub adapters: Vec<Adapter>,
    pub gates: Vec<SynapseGate>,
    pub prototypes: PrototypeTable,
    pub buffer: ReplayBuffer,
    pub feature_head: FeatureHead,
    pub scoring: Scoring,
    /// Checksum of each component at the moment it was frozen.
    frozen: BTreeMap<String, String>,
}

impl ModelState {
    /// Fresh state around a frozen backbone. The base task, when present, seeds
    /// the replay buffer so gate 1 has negatives.
    pub fn new(backbone: Backbone, base: Option<&Task>, cfg: &ExperimentConfig) -> Result<Self> {
        if !backbone.is_frozen() {
            return Err(Error::Config("backbone must be frozen".into()));
        }
        let dim = backbone.embed_dim();
        let mut buffer = ReplayBuffer::new(cfg.gate.buffer_per_class, cfg.gate.sampler_per_class);
        if let Some(b) = base.filter(|b| !b.train.is_empty()) {
            let h0 = backbone.embed(&b.train.features)?;
            buffer.add_task(0, &h0, &b.train.labels, cfg.seed)?;
        }
        let mut frozen = BTreeMap::new();
        frozen.insert("backbone".to_string(), backbone.checksum());
        Ok(Self {
            feature_head: FeatureHead::build(cfg.classifier.feature_head, dim, cfg.seed),
            scoring: cfg.classifier.scoring,
            backbone,
            adapters: Vec::new(),
            gates: Vec::new(),
            prototypes: PrototypeTable::new(dim),
            buffer,
            frozen,
        })
    }

    pub(crate) fn from_parts(
        backbone: Backbone,
        adapters: Vec<Adapter>,
        gates: Vec<SynapseGate>,
        prototypes: PrototypeTable,
        buffer: ReplayBuffer,
        feature_head: FeatureHead,
        scoring: Scoring,
    ) -> Result<Self> {
        if adapters.len() != gates.len() {
            return Err(Error::Checkpoint {
                section: "gates".into(),
                reason: format!("{} adapters but {} gates", adapters.len(), gates.len()),
            });
        }
        let mut s = Self {
            backbone,
            adapters,
            gates,
            prototypes,
            buffer,
            feature_head,
            scoring,
            frozen: BTreeMap::new(),
        };
        s.frozen = s.component_checksums();
        Ok(s)
    }

    /// Number of tasks learned so far.
    pub fn step(&self) -> usize {
        self.adapters.len()
    }

    pub fn embed_dim(&self) -> usize {
        self.backbone.embed_dim()
    }

    /// Current checksum of every component, keyed by name.
    pub fn component_checksums(&self) -> BTreeMap<String, String> {
        let mut out = BTreeMap::new();
        out.insert("backbone".to_string(), self.backbone.checksum());
        for a in &self.adapters {
            out.insert(format!("adapter.{}", a.task_id), a.checksum());
        }
        for g in &self.gates {
            out.insert(format!("gate.{}", g.task_id), g.checksum());
        }
        for (task, _) in self.prototypes.per_task_counts() {
            out.insert(format!("prototypes.{task}"), self.prototype_group_checksum(task));
        }
        out
    }

    fn prototype_group_checksum(&self, task: usize) -> String {
        let rows: Vec<usize> = (0..self.prototypes.len())
            .filter(|&i| self.prototypes.task_of()[i] == task)
            .collect();
        crate::tensor::checksum([&self.prototypes.prototypes().select_rows(&rows)])
    }

    /// Fails if any frozen component differs from its checksum at freeze time.
    pub fn audit(&self) -> Result<()> {
        let now = self.component_checksums();
        for (name, sum) in &self.frozen {
            match now.get(name) {
                Some(s) if s == sum => {}
                _ => return Err(Error::FrozenViolation(name.clone())),
            }
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.backbone.num_params()
            + self.adapters.iter().map(Adapter::num_params).sum::<usize>()
            + self.gates.iter().map(SynapseGate::num_params).sum::<usize>()
    }

    fn freeze_mark(&mut self, name: String, sum: String) {
        self.frozen.insert(name, sum);
    }

    /// Learns incremental task `task.task_id`, which must equal `step() + 1`.
    pub fn train_step(&mut self, task: &Task, cfg: &ExperimentConfig) -> Result<StepStats> {
        let t = self.step() + 1;
        if task.task_id != t {
            return Err(Error::Sequencing {
                expected: t,
                got: task.task_id,
            });
        }
        self.audit()?;
        let mut seconds = BTreeMap::new();
        let dim = self.embed_dim();
        let seed = cfg.seed;

        let mut adapter = Adapter::new(t, dim, cfg.adapter.bottleneck, cfg.adapter.scale, seed);
        let mut gate = SynapseGate::new(t, dim, cfg.gate.hidden, seed);

        let clock = Instant::now();
        let others: &[Adapter] = if cfg.adapter.train_with_old_adapters {
            &self.adapters
        } else {
            &[]
        };
        let adapter_stats = adapter.train(task, &self.backbone, others, &cfg.adapter.train, seed)?;
        self.freeze_mark(format!("adapter.{t}"), adapter.checksum());
        self.adapters.push(adapter);
        seconds.insert("adapter".to_string(), clock.elapsed().as_secs_f64());

        let clock = Instant::now();
        let adapter = self.adapters.last().expect("just pushed");
        self.prototypes
            .build_for_task(task, &self.backbone, adapter, &self.feature_head)?;
        self.freeze_mark(format!("prototypes.{t}"), self.prototype_group_checksum(t));
        seconds.insert("prototypes".to_string(), clock.elapsed().as_secs_f64());

        let clock = Instant::now();
        let gate_stats = gate.train(task, &self.buffer, &self.backbone, &self.adapters, &cfg.gate, seed)?;
        self.freeze_mark(format!("gate.{t}"), gate.checksum());
        self.gates.push(gate);
        seconds.insert("gate".to_string(), clock.elapsed().as_secs_f64());

        let h0 = self.backbone.embed(&task.train.features)?;
        self.buffer.add_task(t, &h0, &task.train.labels, seed)?;
        self.audit()?;
        Ok(StepStats {
            adapter_train_accuracy: adapter_stats.train_accuracy,
            gate: gate_stats,
            seconds,
        })
    }

    /// Gate vectors and predicted classes for a batch. Oracle gates need `true_tasks`.
    pub fn infer(&self, x: &Tensor, true_tasks: Option<&[usize]>) -> Result<Inference> {
        if self.step() == 0 {
            return Err(Error::Inference("no task has been learned yet".into()));
        }
        let h0 = self.backbone.embed(x)?;
        let n = h0.rows();
        let mut running = h0.detached();
        let mut bits = vec![Vec::with_capacity(self.step()); n];
        let mut feature = h0.detached();
        for (adapter, gate) in self.adapters.iter().zip(&self.gates) {
            let h = adapter.embed(&h0)?;
            running = running.add(&h)?;
            let fired = gate.activations(&running, true_tasks)?;
            let mut gated = h.into_data();
            for (r, &m) in fired.iter().enumerate() {
                if !m {
                    gated[r * self.embed_dim()..(r + 1) * self.embed_dim()].fill(0.0);
                }
                bits[r].push(m);
            }
            feature = feature.add(&Tensor::from_parts(n, self.embed_dim(), gated))?;
        }
        let predictions = self
            .prototypes
            .predict(&feature, &self.feature_head, self.scoring)?;
        Ok(Inference {
            gates: bits.into_iter().map(GateVector::new).collect(),
            predictions,
        })
    }

    /// [`infer`](Self::infer) split across `threads` row chunks; the result does not depend on `threads`.
    pub fn infer_parallel(&self, x: &Tensor, true_tasks: Option<&[usize]>, threads: usize) -> Result<Inference> {
        let n = x.rows();
        if threads <= 1 || n < 2 {
            return self.infer(x, true_tasks);
        }
        let chunk = n.div_ceil(threads);
        let ranges: Vec<(usize, usize)> = (0..n).step_by(chunk).map(|s| (s, (s + chunk).min(n))).collect();
        let parts: Vec<Result<Inference>> = std::thread::scope(|scope| {
            let handles: Vec<_> = ranges
                .iter()
                .map(|&(s, e)| {
                    scope.spawn(move || {
                        let idx: Vec<usize> = (s..e).collect();
                        self.infer(&x.select_rows(&idx), true_tasks.map(|t| &t[s..e]))
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("inference thread")).collect()
        });
        let mut out = Inference {
            gates: Vec::with_capacity(n),
            predictions: Vec::with_capacity(n),
        };
        for p in parts {
            let p = p?;
            out.gates.extend(p.gates);
            out.predictions.extend(p.predictions);
        }
        Ok(out)
    }
}

/// Outcome of evaluating the current model on the test sets of tasks `1..=t`.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub correct: Vec<usize>,
    pub gates: Vec<GateVector>,
    pub true_tasks: Vec<usize>,
    pub predictions: Vec<Vec<usize>>,
}

pub fn evaluate(state: &ModelState, stream: &TaskStream, threads: usize) -> Result<Evaluation> {
    let t = state.step();
    let mut eval = Evaluation {
        correct: Vec::with_capacity(t),
        gates: Vec::new(),
        true_tasks: Vec::new(),
        predictions: Vec::with_capacity(t),
    };
    for task in &stream.incremental[..t] {
        let ids = vec![task.task_id; task.test.len()];
        let inf = state.infer_parallel(&task.test.features, Some(&ids), threads)?;
        let hits = inf
            .predictions
            .iter()
            .zip(&task.test.labels)
            .filter(|(p, y)| p == y)
            .count();
        eval.correct.push(hits);
        eval.gates.extend(inf.gates);
        eval.true_tasks.extend(ids);
        eval.predictions.push(inf.predictions);
    }
    Ok(eval)
}

/// Balanced accuracy of each gate on held-out data: its own task's test set as
/// positives, every other task's test set (base included) as negatives.
pub fn gate_balanced_accuracies(state: &ModelState, stream: &TaskStream) -> Result<Vec<f64>> {
    let tasks: Vec<&Task> = stream
        .all_tasks()
        .filter(|t| t.task_id <= state.step() && !t.test.is_empty())
        .collect();
    let mut fired: Vec<(usize, Vec<Vec<bool>>)> = Vec::new();
    for task in &tasks {
        let h0 = state.backbone.embed(&task.test.features)?;
        let ids = vec![task.task_id; task.test.len()];
        let mut per_gate = Vec::new();
        for (i, gate) in state.gates.iter().enumerate() {
            let s = summed_feature(&h0, &state.adapters[..=i])?;
            per_gate.push(gate.activations(&s, Some(&ids))?);
        }
        fired.push((task.task_id, per_gate));
    }
    Ok((0..state.gates.len())
        .map(|g| {
            let gate_task = g + 1;
            let mut pos = Vec::new();
            let mut neg = Vec::new();
            for (tid, per_gate) in &fired {
                if *tid == gate_task {
                    pos.extend_from_slice(&per_gate[g]);
                } else {
                    neg.extend_from_slice(&per_gate[g]);
                }
            }
            balanced_accuracy(&pos, &neg)
        })
        .collect())
}

pub fn load_stream(cfg: &ExperimentConfig) -> Result<TaskStream> {
    match &cfg.stream {
        StreamSource::Synthetic(spec) => gen_gaussian_stream(cfg.seed, spec),
        StreamSource::Manifest(path) => load_feature_stream(path),
    }
}

pub fn build_backbone(stream: &TaskStream, cfg: &ExperimentConfig) -> Result<(Backbone, Option<PretrainStats>)> {
    if stream.pre_embedded {
        return Ok((Backbone::identity(stream.feature_dim), None));
    }
    let (bb, stats) = Backbone::pretrain(&stream.base, &cfg.backbone.hidden, &cfg.backbone.train, cfg.seed)?;
    Ok((bb, Some(stats)))
}

pub struct RunOutcome {
    pub state: Option<ModelState>,
    pub report: RunReport,
}

/// Runs the configured method end to end on `stream`.
pub fn run(stream: &TaskStream, cfg: &ExperimentConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    match cfg.method {
        Method::Artsy => run_artsy(stream, cfg),
        Method::Sequential => run_sequential_baseline(stream, cfg),
    }
}

pub fn run_artsy(stream: &TaskStream, cfg: &ExperimentConfig) -> Result<RunOutcome> {
    let mut timing = BTreeMap::new();
    let clock = Instant::now();
    let (backbone, pre) = build_backbone(stream, cfg)?;
    timing.insert("backbone".to_string(), clock.elapsed().as_secs_f64());
    let mut state = ModelState::new(backbone, Some(&stream.base), cfg)?;

    let test_counts = stream.incremental.iter().map(|t| t.test.len()).collect();
    let mut matrix = AccuracyMatrix::new(test_counts);
    let mut steps = Vec::new();
    let mut adapter_acc = Vec::new();
    for task in &stream.incremental {
        let stats = state.train_step(task, cfg)?;
        for (k, v) in &stats.seconds {
            *timing.entry(k.clone()).or_insert(0.0) += v;
        }
        adapter_acc.push(stats.adapter_train_accuracy);
        let clock = Instant::now();
        let eval = evaluate(&state, stream, cfg.eval_threads)?;
        *timing.entry("evaluation".to_string()).or_insert(0.0) += clock.elapsed().as_secs_f64();
        matrix.push_row(eval.correct.clone())?;
        steps.push(StepDiagnostics {
            step: state.step(),
            routing_accuracy: metrics::routing_accuracy(&eval.gates, &eval.true_tasks)?,
            multi_fire_rate: metrics::multi_fire_rate(&eval.gates),
            firing_rates: metrics::firing_rates(&eval.gates),
            gate_threshold: stats.gate.threshold,
            gate_train_steps: stats.gate.steps,
            num_params: state.num_params(),
        });
        log::info!(
            "task {}: last {:.4} routing {:.4}",
            task.task_id,
            matrix.seen[matrix.steps() - 1],
            steps.last().expect("pushed").routing_accuracy
        );
    }
    let gate_bacc = gate_balanced_accuracies(&state, stream)?;
    let report = RunReport::build(
        cfg,
        matrix,
        steps,
        gate_bacc,
        pre.map(|p| p.train_accuracy),
        adapter_acc,
        state.component_checksums(),
        timing,
    );
    Ok(RunOutcome {
        state: Some(state),
        report,
    })
}

/// One adapter plus a growing linear head, fine-tuned on each task in turn
/// with no gating and no expansion. Forgets earlier tasks.
pub fn run_sequential_baseline(stream: &TaskStream, cfg: &ExperimentConfig) -> Result<RunOutcome> {
    let mut timing = BTreeMap::new();
    let clock = Instant::now();
    let (backbone, pre) = build_backbone(stream, cfg)?;
    timing.insert("backbone".to_string(), clock.elapsed().as_secs_f64());
    let dim = backbone.embed_dim();
    let mut adapter = Adapter::new(1, dim, cfg.adapter.bottleneck, cfg.adapter.scale, cfg.seed);
    let mut head = Linear::zeros(dim, 0);
    let mut classes: Vec<usize> = Vec::new();
    let mut rng = seed::rng_for(cfg.seed, tags::BASELINE);

    let test_counts = stream.incremental.iter().map(|t| t.test.len()).collect();
    let mut matrix = AccuracyMatrix::new(test_counts);
    let mut adapter_acc = Vec::new();
    for task in &stream.incremental {
        let clock = Instant::now();
        // widen the head with freshly initialised columns for the new classes
        let fresh = Linear::he(dim, task.classes.len(), &mut rng);
        head = widen(&head, &fresh)?;
        head.set_trainable(true);
        classes.extend_from_slice(&task.classes);
        let col = |y: usize| classes.iter().position(|c| *c == y).expect("seen class");

        let h0 = backbone.embed(&task.train.features)?;
        let labels: Vec<usize> = task.train.labels.iter().map(|y| col(*y)).collect();
        adapter.fit_with_head(
            &h0,
            &h0,
            &labels,
            &mut head,
            &cfg.adapter.train,
            seed::derive(cfg.seed, task.task_id as u64),
            "sequential baseline",
        )?;
        let feat = h0.add(&adapter.embed(&h0)?)?;
        adapter_acc.push(crate::train::accuracy(&argmax_rows(&head.forward(&feat)?), &labels));
        *timing.entry("adapter".to_string()).or_insert(0.0) += clock.elapsed().as_secs_f64();

        let clock = Instant::now();
        let mut correct = Vec::new();
        for seen in &stream.incremental[..task.task_id] {
            let h0 = backbone.embed(&seen.test.features)?;
            let feat = h0.add(&adapter.embed(&h0)?)?;
            let pred = argmax_rows(&head.forward(&feat)?);
            correct.push(
                pred.iter()
                    .zip(&seen.test.labels)
                    .filter(|(p, y)| classes[**p] == **y)
                    .count(),
            );
        }
        matrix.push_row(correct)?;
        *timing.entry("evaluation".to_string()).or_insert(0.0) += clock.elapsed().as_secs_f64();
    }
    let mut checksums = BTreeMap::new();
    checksums.insert("backbone".to_string(), backbone.checksum());
    checksums.insert("adapter.1".to_string(), adapter.checksum());
    let report = RunReport::build(
        cfg,
        matrix,
        Vec::new(),
        Vec::new(),
        pre.map(|p| p.train_accuracy),
        adapter_acc,
        checksums,
        timing,
    );
    Ok(RunOutcome { state: None, report })
}

fn widen(head: &Linear, fresh: &Linear) -> Result<Linear> {
    let (d, old) = (fresh.in_dim(), head.out_dim());
    let new = fresh.out_dim();
    let mut w = Vec::with_capacity(d * (old + new));
    for r in 0..d {
        w.extend_from_slice(head.weight.row(r));
        w.extend_from_slice(fresh.weight.row(r));
    }
    let mut b = head.bias.data().to_vec();
    b.extend_from_slice(fresh.bias.data());
    Ok(Linear {
        weight: Tensor::new(d, old + new, w)?,
        bias: Tensor::new(1, old + new, b)?,
    })
}

/// Gate mode actually in effect for a run.
pub fn effective_gate_mode(cfg: &ExperimentConfig) -> GateMode {
    cfg.gate.mode
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gate_vector_fired_tasks() {
        let g = GateVector::new(vec![false, true, true]);
        assert_eq!(g.fired_tasks(), vec![2, 3]);
        assert_eq!(g.count(), 2);
    }

    #[test]
    fn widen_keeps_old_columns() {
        let mut old = Linear::zeros(2, 1);
        old.weight = Tensor::new(2, 1, vec![1.0, 2.0]).unwrap();
        let mut fresh = Linear::zeros(2, 2);
        fresh.weight = Tensor::new(2, 2, vec![3.0, 4.0, 5.0, 6.0]).unwrap();
        let w = widen(&old, &fresh).unwrap();
        assert_eq!(w.weight.data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        assert_eq!(w.bias.cols(), 3);
    }
}
