//! Per-task bottleneck adapters `E_t`.
//!
//! `h_t = scale * up(relu(down(h_0)))`. The up-projection starts at zero, so a
//! freshly inserted adapter contributes nothing until it is trained.

use crate::backbone::Backbone;
use crate::config::PhaseConfig;
use crate::data::{index_batches, Task};
use crate::error::{Error, Result};
use crate::nn::{argmax_rows, BoundLinear, Linear};
use crate::optim::Sgd;
use crate::seed::{self, tags};
use crate::tape::{Tape, Var};
use crate::tensor::{checksum, Tensor};
use crate::train::{accuracy, check_loss, steps_per_epoch};

pub const DEFAULT_SCALE: f64 = 1.0;

#[derive(Clone, Debug, PartialEq)]
pub struct Adapter {
    pub task_id: usize,
    pub down: Linear,
    pub up: Linear,
    pub scale: f64,
    frozen: bool,
}

#[derive(Clone, Copy, Debug)]
pub struct BoundAdapter {
    down: BoundLinear,
    up: BoundLinear,
    scale: f64,
}

impl BoundAdapter {
    pub fn apply(&self, tape: &mut Tape, h0: Var) -> Result<Var> {
        let z = self.down.apply(tape, h0)?;
        let a = tape.relu(z)?;
        let u = self.up.apply(tape, a)?;
        tape.scale(u, self.scale)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdapterTrainStats {
    pub train_accuracy: f64,
    pub final_loss: f64,
}

impl Adapter {
    pub fn new(task_id: usize, embed_dim: usize, bottleneck: usize, scale: f64, seed: u64) -> Self {
        if bottleneck > embed_dim {
            log::warn!(
                "adapter {task_id}: bottleneck {bottleneck} exceeds embedding width {embed_dim}"
            );
        }
        let mut rng = seed::rng_for(seed, tags::ADAPTER_INIT + task_id as u64);
        let mut a = Self {
            task_id,
            down: Linear::he(embed_dim, bottleneck.max(1), &mut rng),
            up: Linear::zeros(bottleneck.max(1), embed_dim),
            scale,
            frozen: false,
        };
        a.down.set_trainable(true);
        a.up.set_trainable(true);
        a
    }

    pub(crate) fn from_parts(task_id: usize, down: Linear, up: Linear, scale: f64) -> Self {
        Self {
            task_id,
            down,
            up,
            scale,
            frozen: true,
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.down.in_dim()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.down.set_trainable(false);
        self.up.set_trainable(false);
        self.frozen = true;
    }

    pub fn num_params(&self) -> usize {
        self.down.num_params() + self.up.num_params()
    }

    pub fn checksum(&self) -> String {
        let scale = Tensor::from_parts(1, 1, vec![self.scale]);
        checksum(
            self.down
                .tensors()
                .into_iter()
                .chain(self.up.tensors())
                .chain([&scale]),
        )
    }

    /// `h_t` for a batch of backbone embeddings.
    pub fn embed(&self, h0: &Tensor) -> Result<Tensor> {
        if h0.cols() != self.embed_dim() {
            return Err(Error::Dimension {
                op: "adapter.embed",
                left: h0.shape(),
                right: (self.embed_dim(), self.embed_dim()),
            });
        }
        let z = self.down.forward(h0)?.map(|v| v.max(0.0));
        Ok(self.up.forward(&z)?.scale(self.scale))
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundAdapter {
        BoundAdapter {
            down: self.down.bind(tape),
            up: self.up.bind(tape),
            scale: self.scale,
        }
    }

    fn pull_grads(&mut self, tape: &Tape, b: &BoundAdapter) -> Result<()> {
        self.down.pull_grads(tape, &b.down)?;
        self.up.pull_grads(tape, &b.up)
    }

    /// Minimises cross-entropy of `head(base + h_t)` against `labels`, where
    /// `h_t` is this adapter applied to `h0`. Returns the last batch loss.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn fit_with_head(
        &mut self,
        h0_all: &Tensor,
        base_all: &Tensor,
        labels: &[usize],
        head: &mut Linear,
        phase: &PhaseConfig,
        seed: u64,
        phase_name: &str,
    ) -> Result<f64> {
        let n = labels.len();
        let per_epoch = steps_per_epoch(n, phase.batch_size);
        let mut opt = Sgd::new(phase.sgd(per_epoch))?;
        let order_seed = seed::derive(seed, tags::ADAPTER_SHUFFLE + self.task_id as u64);
        let prefix = format!("adapter{}", self.task_id);
        let mut step = 0;
        let mut final_loss = f64::NAN;
        for epoch in 0..phase.epochs {
            let shuffle = Some(seed::derive(order_seed, epoch as u64));
            for idx in index_batches(n, phase.batch_size, shuffle) {
                let mut tape = Tape::new();
                let bound = self.bind(&mut tape);
                let head_b = head.bind(&mut tape);
                let h0 = tape.constant(h0_all.select_rows(&idx));
                let base = tape.constant(base_all.select_rows(&idx));
                let ht = bound.apply(&mut tape, h0)?;
                let feat = tape.add(base, ht)?;
                let logits = head_b.apply(&mut tape, feat)?;
                let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
                let loss = tape.softmax_cross_entropy(logits, &y)?;
                final_loss = tape.value(loss).data()[0];
                check_loss(final_loss, phase_name, step)?;
                tape.backward(loss)?;
                self.pull_grads(&tape, &bound)?;
                head.pull_grads(&tape, &head_b)?;
                let mut params = self.down.named_params(&format!("{prefix}.down"));
                params.extend(self.up.named_params(&format!("{prefix}.up")));
                if head.weight.requires_grad() {
                    params.extend(head.named_params(&format!("{prefix}.head")));
                }
                opt.step(&mut params, step)?;
                step += 1;
            }
        }
        Ok(final_loss)
    }

    /// Fine-tunes this adapter on `task` through a temporary linear head over the
    /// task's classes, then freezes it. The training feature is `h_0 + h_t`, plus
    /// the frozen `others` when any are passed.
    pub fn train(
        &mut self,
        task: &Task,
        backbone: &Backbone,
        others: &[Adapter],
        phase: &PhaseConfig,
        seed: u64,
    ) -> Result<AdapterTrainStats> {
        if self.frozen {
            return Err(Error::training(format!("adapter {}", self.task_id), "adapter is frozen"));
        }
        if let Some(o) = others.iter().find(|o| !o.frozen) {
            return Err(Error::training(
                format!("adapter {}", self.task_id),
                format!("adapter {} must be frozen", o.task_id),
            ));
        }
        let phase_name = format!("adapter {}", self.task_id);
        let mut head_rng = seed::rng_for(seed, tags::HEAD_INIT + self.task_id as u64);
        let mut head = Linear::he(self.embed_dim(), task.classes.len(), &mut head_rng);
        head.set_trainable(true);

        let h0_all = backbone.embed(&task.train.features)?;
        let mut base_all = h0_all.clone();
        for o in others {
            base_all = base_all.add(&o.embed(&h0_all)?)?;
        }
        let labels: Vec<usize> = task
            .train
            .labels
            .iter()
            .map(|y| task.local_index(*y).expect("validated label"))
            .collect();

        let final_loss = self.fit_with_head(&h0_all, &base_all, &labels, &mut head, phase, seed, &phase_name)?;
        let feat = base_all.add(&self.embed(&h0_all)?)?;
        let train_accuracy = accuracy(&argmax_rows(&head.forward(&feat)?), &labels);
        self.freeze();
        Ok(AdapterTrainStats {
            train_accuracy,
            final_loss,
        })
    }
}
