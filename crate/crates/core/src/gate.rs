//! Synapse gates `S_t` and the replay buffer that feeds them negatives.
//!
//! Gate `t` scores the summed feature `h_0 + h_1 + ... + h_t` with a two-layer
//! MLP ending in a sigmoid, so `c_t` lies in `(0, 1)`. It fires (`m_t = 1`)
//! when `c_t >= thr_t`; a threshold of zero makes the gate functional, i.e.
//! always on. Training treats stored embeddings of earlier tasks as negatives
//! and the current task as positives.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::adapter::Adapter;
use crate::backbone::Backbone;
use crate::config::{GateConfig, GateMode, ThresholdPolicy};
use crate::data::{sample_order, Task};
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::optim::Sgd;
use crate::seed::{self, tags};
use crate::tape::{sigmoid, Tape};
use crate::tensor::{checksum, Tensor};
use crate::train::{check_loss, steps_per_epoch};

/// `m_t`: fires iff `score >= threshold`.
pub fn gate_fire(score: f64, threshold: f64) -> bool {
    score >= threshold
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationKind {
    Noise,
    RandomProjection,
}

/// Corruption applied to gate inputs before scoring.
#[derive(Clone, Debug, PartialEq)]
pub enum InputCorruption {
    /// Each row is replaced by standard normal noise seeded from `seed` and the row's bits.
    Noise { seed: u64 },
    /// Rows are multiplied by a fixed square matrix.
    Projection(Tensor),
}

const NOISE_CALIBRATION_ROWS: usize = 1001;
const NOISE_CALIBRATION_TAG: u64 = 0xC0;

#[derive(Clone, Debug, PartialEq)]
pub struct SynapseGate {
    pub task_id: usize,
    hidden: Linear,
    out: Linear,
    /// Input standardisation fixed when training ends.
    norm_mean: Tensor,
    norm_inv_std: Tensor,
    threshold: f64,
    mode: GateMode,
    corruption: Option<InputCorruption>,
    frozen: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GateTrainStats {
    pub positives: usize,
    pub negatives: usize,
    pub steps: usize,
    pub final_loss: f64,
    pub threshold: f64,
    /// Largest positive:negative (or negative:positive) ratio seen in any batch.
    pub max_batch_ratio: f64,
}

impl SynapseGate {
    pub fn new(task_id: usize, embed_dim: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = seed::rng_for(seed, tags::GATE_INIT + task_id as u64);
        let mut g = Self {
            task_id,
            hidden: Linear::he(embed_dim, hidden, &mut rng),
            out: Linear::he(hidden, 1, &mut rng),
            norm_mean: Tensor::zeros(1, embed_dim),
            norm_inv_std: Tensor::from_parts(1, embed_dim, vec![1.0; embed_dim]),
            threshold: 0.5,
            mode: GateMode::Learned,
            corruption: None,
            frozen: false,
        };
        g.set_trainable(true);
        g
    }

    #[allow(clippy::too_many_arguments)]
    pub(crate) fn from_parts(
        task_id: usize,
        hidden: Linear,
        out: Linear,
        norm_mean: Tensor,
        norm_inv_std: Tensor,
        threshold: f64,
        mode: GateMode,
        corruption: Option<InputCorruption>,
    ) -> Self {
        Self {
            task_id,
            hidden,
            out,
            norm_mean,
            norm_inv_std,
            threshold,
            mode,
            corruption,
            frozen: true,
        }
    }

    fn set_trainable(&mut self, on: bool) {
        self.hidden.set_trainable(on);
        self.out.set_trainable(on);
    }

    pub fn embed_dim(&self) -> usize {
        self.hidden.in_dim()
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn mode(&self) -> GateMode {
        self.mode
    }

    pub fn corruption(&self) -> Option<&InputCorruption> {
        self.corruption.as_ref()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub(crate) fn parts(&self) -> (&Linear, &Linear, &Tensor, &Tensor) {
        (&self.hidden, &self.out, &self.norm_mean, &self.norm_inv_std)
    }

    pub fn num_params(&self) -> usize {
        self.hidden.num_params() + self.out.num_params()
    }

    /// Switches the routing regime. Functional mode pins the threshold to 0.
    pub fn set_mode(&mut self, mode: GateMode) {
        self.mode = mode;
        if mode == GateMode::Functional {
            self.threshold = 0.0;
        }
    }

    pub fn set_threshold(&mut self, thr: f64) {
        self.threshold = thr;
    }

    pub fn checksum(&self) -> String {
        let meta = Tensor::from_parts(1, 2, vec![self.threshold, mode_code(self.mode) as f64]);
        let mut tensors: Vec<&Tensor> = vec![&meta, &self.norm_mean, &self.norm_inv_std];
        tensors.extend(self.hidden.tensors());
        tensors.extend(self.out.tensors());
        let noise_seed;
        match &self.corruption {
            Some(InputCorruption::Projection(m)) => tensors.push(m),
            Some(InputCorruption::Noise { seed }) => {
                noise_seed = Tensor::from_parts(1, 1, vec![f64::from_bits(*seed)]);
                tensors.push(&noise_seed);
            }
            None => {}
        }
        checksum(tensors)
    }

    fn corrupt(&self, h: &Tensor) -> Result<Tensor> {
        match &self.corruption {
            None => Ok(h.detached()),
            Some(InputCorruption::Projection(m)) => h.matmul(m),
            Some(InputCorruption::Noise { seed: s }) => {
                let mut data = Vec::with_capacity(h.len());
                for row in h.row_iter() {
                    let mut hasher = Sha256::new();
                    for v in row {
                        hasher.update(v.to_bits().to_le_bytes());
                    }
                    let digest = hasher.finalize();
                    let row_seed = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
                    let mut rng = seed::rng(seed::derive(*s, row_seed));
                    data.extend((0..row.len()).map(|_| rng.sample::<f64, _>(StandardNormal)));
                }
                Ok(Tensor::from_parts(h.rows(), h.cols(), data))
            }
        }
    }

    fn standardise(&self, h: &Tensor) -> Result<Tensor> {
        let centred = h.add_row(&self.norm_mean.scale(-1.0))?;
        let mut out = centred.into_data();
        let cols = self.embed_dim();
        for chunk in out.chunks_exact_mut(cols.max(1)) {
            chunk
                .iter_mut()
                .zip(self.norm_inv_std.data())
                .for_each(|(v, s)| *v *= s);
        }
        Ok(Tensor::from_parts(h.rows(), cols, out))
    }

    /// `c_t = S_t(h_sum)` per row, in `(0, 1)` up to floating-point saturation.
    pub fn score(&self, h_sum: &Tensor) -> Result<Vec<f64>> {
        if h_sum.cols() != self.embed_dim() {
            return Err(Error::Dimension {
                op: "gate.score",
                left: h_sum.shape(),
                right: (self.embed_dim(), 1),
            });
        }
        // Noise stands in for the standardised input; a projection acts on the raw feature.
        let x = match &self.corruption {
            Some(InputCorruption::Noise { .. }) => self.corrupt(h_sum)?,
            _ => self.standardise(&self.corrupt(h_sum)?)?,
        };
        let z = self.hidden.forward(&x)?.map(|v| v.max(0.0));
        let logits = self.out.forward(&z)?;
        Ok(logits.data().iter().map(|v| sigmoid(*v)).collect())
    }

    /// Per-row `m_t`. Oracle mode needs the true task id of every row.
    pub fn activations(&self, h_sum: &Tensor, true_tasks: Option<&[usize]>) -> Result<Vec<bool>> {
        match self.mode {
            GateMode::Oracle => {
                let ids = true_tasks.ok_or_else(|| {
                    Error::Inference("oracle gates need the true task id of every sample".into())
                })?;
                if ids.len() != h_sum.rows() {
                    return Err(Error::Dimension {
                        op: "gate.oracle",
                        left: h_sum.shape(),
                        right: (ids.len(), 1),
                    });
                }
                Ok(ids.iter().map(|&t| t == self.task_id).collect())
            }
            GateMode::Functional => {
                if h_sum.cols() != self.embed_dim() {
                    return Err(Error::Dimension {
                        op: "gate.score",
                        left: h_sum.shape(),
                        right: (self.embed_dim(), 1),
                    });
                }
                Ok(vec![true; h_sum.rows()])
            }
            GateMode::Learned | GateMode::Noise => Ok(self
                .score(h_sum)?
                .into_iter()
                .map(|c| gate_fire(c, self.threshold))
                .collect()),
        }
    }

    /// Copy whose inputs are corrupted before scoring.
    pub fn make_ablation_gate(&self, kind: AblationKind, seed: u64) -> SynapseGate {
        let mut g = self.clone();
        match kind {
            AblationKind::Noise => {
                let s = seed::derive(seed, tags::ABLATION + self.task_id as u64);
                g.corruption = Some(InputCorruption::Noise { seed: s });
                g.mode = GateMode::Noise;
                g.threshold = g.median_noise_score(s);
            }
            AblationKind::RandomProjection => {
                let d = self.embed_dim();
                let mut rng = seed::rng_for(seed, tags::ABLATION + self.task_id as u64);
                let m = Tensor::randn(d, d, &mut rng).scale(1.0 / (d as f64).sqrt());
                g.corruption = Some(InputCorruption::Projection(m));
            }
        }
        g
    }

    /// Median score over a seeded batch of pure-noise inputs. Used as the
    /// threshold of a noise-ablated gate so that it fires on about half of all
    /// samples, independently of what the sample is.
    fn median_noise_score(&self, seed: u64) -> f64 {
        let mut rng = seed::rng(seed::derive(seed, NOISE_CALIBRATION_TAG));
        let probe = Tensor::randn(NOISE_CALIBRATION_ROWS, self.embed_dim(), &mut rng);
        let mut scores = self.score(&probe).expect("probe has the gate's width");
        scores.sort_by(f64::total_cmp);
        scores[NOISE_CALIBRATION_ROWS / 2]
    }

    /// Copy that projects its inputs through `matrix` before scoring.
    pub fn with_projection(&self, matrix: Tensor) -> Result<SynapseGate> {
        let d = self.embed_dim();
        if matrix.shape() != (d, d) {
            return Err(Error::Dimension {
                op: "gate.projection",
                left: matrix.shape(),
                right: (d, d),
            });
        }
        let mut g = self.clone();
        g.corruption = Some(InputCorruption::Projection(matrix));
        Ok(g)
    }

    /// Trains the scorer with binary cross-entropy on balanced batches of
    /// `positives` (label 1) and `negatives` (label 0), sets the threshold per
    /// `cfg.threshold`, applies `cfg.mode` and freezes.
    pub fn fit(&mut self, positives: &Tensor, negatives: &Tensor, cfg: &GateConfig, seed: u64) -> Result<GateTrainStats> {
        if self.frozen {
            return Err(Error::training(format!("gate {}", self.task_id), "gate is frozen"));
        }
        let d = self.embed_dim();
        for t in [positives, negatives] {
            if t.cols() != d {
                return Err(Error::Dimension {
                    op: "gate.fit",
                    left: t.shape(),
                    right: (d, 1),
                });
            }
        }
        if positives.rows() == 0 || negatives.rows() == 0 {
            return Err(Error::training(
                format!("gate {}", self.task_id),
                "need at least one positive and one negative sample",
            ));
        }
        let phase = &cfg.train;
        let phase_name = format!("gate {}", self.task_id);
        let base_seed = seed::derive(seed, tags::GATE_SHUFFLE + self.task_id as u64);

        let calibrate = matches!(cfg.threshold, ThresholdPolicy::Calibrated);
        let (pos_train, pos_hold) = holdout(positives, calibrate, seed::derive(base_seed, 1));
        let (neg_train, neg_hold) = holdout(negatives, calibrate, seed::derive(base_seed, 2));
        let mut neg_train = neg_train;
        if cfg.outlier_ratio > 0.0 {
            let n = (cfg.outlier_ratio * pos_train.rows() as f64).ceil() as usize;
            let outliers = shell_outliers(&pos_train, n, cfg.outlier_scale, seed::derive(base_seed, 3));
            neg_train = Tensor::vstack(&[&neg_train, &outliers])?;
        }

        let all = Tensor::vstack(&[&pos_train, &neg_train])?;
        let (mean, inv_std) = column_stats(&all);
        self.norm_mean = mean;
        self.norm_inv_std = inv_std;
        let pos_x = self.standardise(&pos_train)?;
        let neg_x = self.standardise(&neg_train)?;

        let per_batch_pos = phase.batch_size.div_ceil(2);
        let per_batch_neg = phase.batch_size - per_batch_pos;
        let larger = pos_x.rows().max(neg_x.rows());
        let per_epoch = steps_per_epoch(larger, per_batch_pos.min(per_batch_neg).max(1));
        let mut opt = Sgd::new(phase.sgd(per_epoch))?;
        let mut pos_stream = CyclicSampler::new(pos_x.rows(), seed::derive(base_seed, 10));
        let mut neg_stream = CyclicSampler::new(neg_x.rows(), seed::derive(base_seed, 11));
        let mut final_loss = f64::NAN;
        let total = opt.config().total_steps;
        for step in 0..total {
            let pi = pos_stream.take(per_batch_pos);
            let ni = neg_stream.take(per_batch_neg);
            let x = Tensor::vstack(&[&pos_x.select_rows(&pi), &neg_x.select_rows(&ni)])?;
            let mut y = vec![1.0; pi.len()];
            y.extend(std::iter::repeat_n(0.0, ni.len()));

            let mut tape = Tape::new();
            let hb = self.hidden.bind(&mut tape);
            let ob = self.out.bind(&mut tape);
            let xv = tape.constant(x);
            let z = hb.apply(&mut tape, xv)?;
            let a = tape.relu(z)?;
            let logit = ob.apply(&mut tape, a)?;
            let s = tape.sigmoid(logit)?;
            let loss = tape.binary_cross_entropy(s, &y)?;
            final_loss = tape.value(loss).data()[0];
            check_loss(final_loss, &phase_name, step)?;
            tape.backward(loss)?;
            self.hidden.pull_grads(&tape, &hb)?;
            self.out.pull_grads(&tape, &ob)?;
            let prefix = format!("gate{}", self.task_id);
            let mut params = self.hidden.named_params(&format!("{prefix}.hidden"));
            params.extend(self.out.named_params(&format!("{prefix}.out")));
            opt.step(&mut params, step)?;
        }

        self.threshold = match cfg.threshold {
            ThresholdPolicy::Fixed { value } => value,
            ThresholdPolicy::Calibrated => {
                let ps = self.score(&pos_hold)?;
                let ns = self.score(&neg_hold)?;
                calibrate_threshold(&ps, &ns)
            }
        };
        self.set_trainable(false);
        self.frozen = true;
        self.set_mode(cfg.mode);
        if cfg.mode == GateMode::Noise {
            *self = self.make_ablation_gate(AblationKind::Noise, seed);
        }
        let ratio = if per_batch_neg == 0 {
            f64::INFINITY
        } else {
            per_batch_pos.max(per_batch_neg) as f64 / per_batch_pos.min(per_batch_neg) as f64
        };
        Ok(GateTrainStats {
            positives: pos_train.rows(),
            negatives: neg_train.rows(),
            steps: total,
            final_loss,
            threshold: self.threshold,
            max_batch_ratio: ratio,
        })
    }

    /// Builds gate inputs for `current` and the buffered negatives, then calls [`fit`](Self::fit).
    /// `adapters` must hold the frozen adapters `1..=t`.
    pub fn train(
        &mut self,
        current: &Task,
        buffer: &ReplayBuffer,
        backbone: &Backbone,
        adapters: &[Adapter],
        cfg: &GateConfig,
        seed: u64,
    ) -> Result<GateTrainStats> {
        if let Some(a) = adapters.iter().find(|a| !a.is_frozen()) {
            return Err(Error::training(
                format!("gate {}", self.task_id),
                format!("adapter {} must be frozen", a.task_id),
            ));
        }
        let h0 = backbone.embed(&current.train.features)?;
        let positives = summed_feature(&h0, adapters)?;
        let neg_h0 = buffer.negatives(self.task_id, seed)?;
        if neg_h0.rows() == 0 {
            return Err(Error::training(
                format!("gate {}", self.task_id),
                "no negatives: the buffer holds no earlier task, not even the base task",
            ));
        }
        let negatives = summed_feature(&neg_h0, adapters)?;
        self.fit(&positives, &negatives, cfg, seed)
    }
}

fn mode_code(m: GateMode) -> u8 {
    match m {
        GateMode::Learned => 0,
        GateMode::Functional => 1,
        GateMode::Oracle => 2,
        GateMode::Noise => 3,
    }
}

/// `h_0 + sum_i h_i` over the given adapters.
pub fn summed_feature(h0: &Tensor, adapters: &[Adapter]) -> Result<Tensor> {
    let mut acc = h0.detached();
    for a in adapters {
        acc = acc.add(&a.embed(h0)?)?;
    }
    Ok(acc)
}

fn holdout(x: &Tensor, enabled: bool, seed: u64) -> (Tensor, Tensor) {
    if !enabled || x.rows() < 10 {
        return (x.detached(), x.detached());
    }
    let order = sample_order(x.rows(), Some(seed));
    let n_hold = x.rows() / 10;
    (x.select_rows(&order[n_hold..]), x.select_rows(&order[..n_hold]))
}

fn column_stats(x: &Tensor) -> (Tensor, Tensor) {
    let (n, d) = x.shape();
    let mut mean = vec![0.0; d];
    for row in x.row_iter() {
        mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; d];
    for row in x.row_iter() {
        var.iter_mut()
            .zip(row.iter().zip(&mean))
            .for_each(|(s, (v, m))| *s += (v - m) * (v - m));
    }
    let inv_std = var
        .iter()
        .map(|s| {
            let sd = (s / n as f64).sqrt();
            if sd > 1e-8 {
                1.0 / sd
            } else {
                1.0
            }
        })
        .collect();
    (Tensor::from_parts(1, d, mean), Tensor::from_parts(1, d, inv_std))
}

/// Negatives near the positive region: random positives plus Gaussian noise scaled by `scale` times their per-column spread.
fn shell_outliers(positives: &Tensor, n: usize, scale: f64, seed: u64) -> Tensor {
    let (_, inv_std) = column_stats(positives);
    let mut rng = seed::rng(seed);
    let d = positives.cols();
    let mut data = Vec::with_capacity(n * d);
    for _ in 0..n {
        let row = positives.row(rng.random_range(0..positives.rows()));
        for (v, inv) in row.iter().zip(inv_std.data()) {
            let z: f64 = rng.sample(StandardNormal);
            data.push(v + scale * z / inv);
        }
    }
    Tensor::from_parts(n, d, data)
}

/// Endless reshuffled pass over `0..n`.
struct CyclicSampler {
    n: usize,
    seed: u64,
    epoch: u64,
    order: Vec<usize>,
    pos: usize,
}

impl CyclicSampler {
    fn new(n: usize, seed: u64) -> Self {
        Self {
            n,
            seed,
            epoch: 0,
            order: sample_order(n, Some(seed)),
            pos: 0,
        }
    }

    fn take(&mut self, k: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(k);
        while out.len() < k && self.n > 0 {
            if self.pos == self.order.len() {
                self.epoch += 1;
                self.order = sample_order(self.n, Some(seed::derive(self.seed, self.epoch)));
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Balanced accuracy `(TPR + TNR) / 2`. A class with no samples contributes its
/// rate as 1, matching the convention that nothing was misclassified.
pub fn balanced_accuracy(fired_pos: &[bool], fired_neg: &[bool]) -> f64 {
    let rate = |xs: &[bool], want: bool| {
        if xs.is_empty() {
            1.0
        } else {
            xs.iter().filter(|&&f| f == want).count() as f64 / xs.len() as f64
        }
    };
    0.5 * (rate(fired_pos, true) + rate(fired_neg, false))
}

/// Threshold maximising balanced accuracy on held-out scores; ties go to the candidate nearest 0.5.
pub fn calibrate_threshold(pos_scores: &[f64], neg_scores: &[f64]) -> f64 {
    let mut all: Vec<f64> = pos_scores.iter().chain(neg_scores).copied().collect();
    all.sort_by(f64::total_cmp);
    all.dedup();
    let mut candidates: Vec<f64> = vec![0.5];
    candidates.extend(all.windows(2).map(|w| 0.5 * (w[0] + w[1])));
    let eval = |thr: f64| {
        let p: Vec<bool> = pos_scores.iter().map(|s| gate_fire(*s, thr)).collect();
        let n: Vec<bool> = neg_scores.iter().map(|s| gate_fire(*s, thr)).collect();
        balanced_accuracy(&p, &n)
    };
    let mut best: (f64, f64) = (0.5, eval(0.5));
    for c in candidates {
        let b = eval(c);
        if b > best.1 || (b == best.1 && (c - 0.5).abs() < (best.0 - 0.5).abs()) {
            best = (c, b);
        }
    }
    best.0
}

/// Stored backbone embeddings of finished tasks, the source of gate negatives.
///
/// With `per_class > 0` up to that many embeddings per class are kept. With
/// `per_class == 0` only a per-class mean and diagonal variance are kept and
/// negatives are sampled from those Gaussians.
#[derive(Clone, Debug, PartialEq)]
pub struct ReplayBuffer {
    per_class: usize,
    sampler_per_class: usize,
    entries: Vec<BufferEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum BufferEntry {
    Stored {
        task_id: usize,
        embeddings: Tensor,
        labels: Vec<usize>,
    },
    Gaussian {
        task_id: usize,
        class: usize,
        mean: Vec<f64>,
        var: Vec<f64>,
    },
}

impl BufferEntry {
    pub fn task_id(&self) -> usize {
        match self {
            BufferEntry::Stored { task_id, .. } | BufferEntry::Gaussian { task_id, .. } => *task_id,
        }
    }
}

impl ReplayBuffer {
    pub fn new(per_class: usize, sampler_per_class: usize) -> Self {
        Self {
            per_class,
            sampler_per_class,
            entries: Vec::new(),
        }
    }

    pub(crate) fn from_entries(per_class: usize, sampler_per_class: usize, entries: Vec<BufferEntry>) -> Self {
        Self {
            per_class,
            sampler_per_class,
            entries,
        }
    }

    pub fn per_class(&self) -> usize {
        self.per_class
    }

    pub fn sampler_per_class(&self) -> usize {
        self.sampler_per_class
    }

    pub fn entries(&self) -> &[BufferEntry] {
        &self.entries
    }

    pub fn task_ids(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = self.entries.iter().map(BufferEntry::task_id).collect();
        ids.dedup();
        ids
    }

    pub fn contains_task(&self, task_id: usize) -> bool {
        self.entries.iter().any(|e| e.task_id() == task_id)
    }

    /// Records `h0` embeddings of a finished task. A task can be added once.
    pub fn add_task(&mut self, task_id: usize, h0: &Tensor, labels: &[usize], seed: u64) -> Result<()> {
        if self.contains_task(task_id) {
            return Err(Error::training("replay buffer", format!("task {task_id} already stored")));
        }
        if h0.rows() != labels.len() {
            return Err(Error::Dimension {
                op: "buffer.add_task",
                left: h0.shape(),
                right: (labels.len(), 1),
            });
        }
        let mut classes: Vec<usize> = labels.to_vec();
        classes.sort_unstable();
        classes.dedup();
        if self.per_class == 0 {
            for c in classes {
                let rows: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
                let x = h0.select_rows(&rows);
                let n = rows.len() as f64;
                let d = h0.cols();
                let mut mean = vec![0.0; d];
                for r in x.row_iter() {
                    mean.iter_mut().zip(r).for_each(|(m, v)| *m += v / n);
                }
                let mut var = vec![0.0; d];
                for r in x.row_iter() {
                    var.iter_mut()
                        .zip(r.iter().zip(&mean))
                        .for_each(|(s, (v, m))| *s += (v - m) * (v - m) / n);
                }
                self.entries.push(BufferEntry::Gaussian {
                    task_id,
                    class: c,
                    mean,
                    var,
                });
            }
            return Ok(());
        }
        let mut rng = seed::rng_for(seed, tags::SAMPLER + task_id as u64);
        let mut keep = Vec::new();
        for c in classes {
            let mut rows: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
            rows.shuffle(&mut rng);
            rows.truncate(self.per_class);
            rows.sort_unstable();
            keep.extend(rows);
        }
        self.entries.push(BufferEntry::Stored {
            task_id,
            embeddings: h0.select_rows(&keep),
            labels: keep.iter().map(|&i| labels[i]).collect(),
        });
        Ok(())
    }

    /// `h0` embeddings of every stored task with id `< before_task`.
    pub fn negatives(&self, before_task: usize, seed: u64) -> Result<Tensor> {
        let mut parts = Vec::new();
        for e in self.entries.iter().filter(|e| e.task_id() < before_task) {
            match e {
                BufferEntry::Stored { embeddings, .. } => parts.push(embeddings.clone()),
                BufferEntry::Gaussian {
                    task_id,
                    class,
                    mean,
                    var,
                } => {
                    let mut rng = seed::rng_for(
                        seed::derive(seed, (*task_id as u64) << 32 | *class as u64),
                        tags::SAMPLER,
                    );
                    let d = mean.len();
                    let mut data = Vec::with_capacity(self.sampler_per_class * d);
                    for _ in 0..self.sampler_per_class {
                        for j in 0..d {
                            let z: f64 = rng.sample(StandardNormal);
                            data.push(mean[j] + z * var[j].sqrt());
                        }
                    }
                    parts.push(Tensor::from_parts(self.sampler_per_class, d, data));
                }
            }
        }
        if parts.is_empty() {
            let d = self.entries.first().map_or(0, |e| match e {
                BufferEntry::Stored { embeddings, .. } => embeddings.cols(),
                BufferEntry::Gaussian { mean, .. } => mean.len(),
            });
            return Ok(Tensor::zeros(0, d));
        }
        let refs: Vec<&Tensor> = parts.iter().collect();
        Tensor::vstack(&refs)
    }
}
