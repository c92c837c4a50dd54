//! The pre-trained feature extractor `E_0`.
//!
//! An MLP is trained with a classification head on the base task, the head is
//! dropped, and every remaining parameter is frozen for the rest of the run.
//! The embedding is the output of the last retained layer.

use crate::config::PhaseConfig;
use crate::data::Task;
use crate::error::{Error, Result};
use crate::nn::{argmax_rows, Linear};
use crate::optim::Sgd;
use crate::seed::{self, tags};
use crate::tape::Tape;
use crate::tensor::{checksum, Tensor};
use crate::train::{accuracy, check_loss, steps_per_epoch};

#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    input_dim: usize,
    /// ReLU between consecutive layers, none after the last. Empty for the identity map.
    layers: Vec<Linear>,
    frozen: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainStats {
    pub train_accuracy: f64,
    pub final_loss: f64,
}

impl Backbone {
    /// Identity feature map, for streams whose features are already embeddings.
    pub fn identity(dim: usize) -> Self {
        Self {
            input_dim: dim,
            layers: Vec::new(),
            frozen: true,
        }
    }

    /// Untrained MLP with sizes `[input, hidden..]`.
    pub fn init(sizes: &[usize], seed: u64) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::Config(format!("backbone sizes {sizes:?} need >= 2 positive entries")));
        }
        let mut rng = seed::rng_for(seed, tags::BACKBONE_INIT);
        let layers = sizes.windows(2).map(|w| Linear::he(w[0], w[1], &mut rng)).collect();
        Ok(Self {
            input_dim: sizes[0],
            layers,
            frozen: false,
        })
    }

    pub(crate) fn from_layers(input_dim: usize, layers: Vec<Linear>) -> Self {
        Self {
            input_dim,
            layers,
            frozen: true,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn embed_dim(&self) -> usize {
        self.layers.last().map_or(self.input_dim, Linear::out_dim)
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(Linear::num_params).sum()
    }

    pub fn checksum(&self) -> String {
        checksum(self.layers.iter().flat_map(Linear::tensors))
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if x.cols() != self.input_dim {
            return Err(Error::Dimension {
                op: "backbone.embed",
                left: x.shape(),
                right: (self.input_dim, self.embed_dim()),
            });
        }
        let mut h = x.detached();
        for (i, layer) in self.layers.iter().enumerate() {
            if i > 0 {
                h = h.map(|v| v.max(0.0));
            }
            h = layer.forward(&h)?;
        }
        Ok(h)
    }

    /// `h_0 = E_0(x)`. Only valid once frozen; nothing is recorded for gradients.
    pub fn embed(&self, x: &Tensor) -> Result<Tensor> {
        if !self.frozen {
            return Err(Error::Inference("backbone must be frozen before embedding".into()));
        }
        self.forward(x)
    }

    /// Trains the MLP plus a temporary head on `base`, drops the head and freezes.
    pub fn pretrain(base: &Task, hidden: &[usize], phase: &PhaseConfig, seed: u64) -> Result<(Self, PretrainStats)> {
        if base.train.is_empty() || base.classes.len() < 2 {
            return Err(Error::Config("backbone pre-training needs a non-empty base task with >= 2 classes".into()));
        }
        let dim = base.train.features.cols();
        let sizes: Vec<usize> = std::iter::once(dim).chain(hidden.iter().copied()).collect();
        let mut bb = Self::init(&sizes, seed)?;
        let mut rng = seed::rng_for(seed, tags::BACKBONE_INIT ^ 0xFF);
        let mut head = Linear::he(bb.embed_dim(), base.classes.len(), &mut rng);
        for l in &mut bb.layers {
            l.set_trainable(true);
        }
        head.set_trainable(true);

        let local = |ys: &[usize]| -> Vec<usize> {
            ys.iter().map(|y| base.local_index(*y).expect("validated label")).collect()
        };
        let per_epoch = steps_per_epoch(base.train.len(), phase.batch_size);
        let mut opt = Sgd::new(phase.sgd(per_epoch))?;
        let mut step = 0;
        let mut last_loss = f64::NAN;
        for epoch in 0..phase.epochs {
            let shuffle = seed::derive(seed::derive(seed, tags::BACKBONE_SHUFFLE), epoch as u64);
            for (x, y) in base.train.batches(phase.batch_size, Some(shuffle))? {
                let mut tape = Tape::new();
                let bound: Vec<_> = bb.layers.iter().map(|l| l.bind(&mut tape)).collect();
                let head_b = head.bind(&mut tape);
                let mut h = tape.constant(x);
                for (i, b) in bound.iter().enumerate() {
                    if i > 0 {
                        h = tape.relu(h)?;
                    }
                    h = b.apply(&mut tape, h)?;
                }
                let a = tape.relu(h)?;
                let logits = head_b.apply(&mut tape, a)?;
                let loss = tape.softmax_cross_entropy(logits, &local(&y))?;
                last_loss = tape.value(loss).data()[0];
                check_loss(last_loss, "backbone", step)?;
                tape.backward(loss)?;
                for (l, b) in bb.layers.iter_mut().zip(&bound) {
                    l.pull_grads(&tape, b)?;
                }
                head.pull_grads(&tape, &head_b)?;
                let mut params = Vec::new();
                for (i, l) in bb.layers.iter_mut().enumerate() {
                    params.extend(l.named_params(&format!("backbone.{i}")));
                }
                params.extend(head.named_params("backbone.head"));
                opt.step(&mut params, step)?;
                step += 1;
            }
        }

        let emb = bb.forward(&base.train.features)?.map(|v| v.max(0.0));
        let pred = argmax_rows(&head.forward(&emb)?);
        let train_accuracy = accuracy(&pred, &local(&base.train.labels));
        for l in &mut bb.layers {
            l.set_trainable(false);
        }
        bb.frozen = true;
        Ok((
            bb,
            PretrainStats {
                train_accuracy,
                final_loss: last_loss,
            },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_map_passes_features_through() {
        let bb = Backbone::identity(3);
        let x = Tensor::new(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(bb.embed(&x).unwrap(), x);
        assert_eq!(bb.embed_dim(), 3);
    }

    #[test]
    fn zero_input_gives_finite_output() {
        let mut bb = Backbone::init(&[4, 8, 8], 1).unwrap();
        bb.frozen = true;
        let out = bb.embed(&Tensor::zeros(1, 4)).unwrap();
        assert!(out.all_finite());
        assert_eq!(out.shape(), (1, 8));
    }

    #[test]
    fn embed_requires_frozen_and_matching_width() {
        let bb = Backbone::init(&[4, 8], 1).unwrap();
        assert!(bb.embed(&Tensor::zeros(1, 4)).is_err());
        let bb = Backbone::from_layers(4, bb.layers.clone());
        assert!(matches!(bb.embed(&Tensor::zeros(1, 5)), Err(Error::Dimension { .. })));
    }

    #[test]
    fn batch_embed_equals_stacked_single_embeds() {
        use rand::SeedableRng;
        let bb = Backbone::from_layers(4, Backbone::init(&[4, 8, 6], 5).unwrap().layers);
        let x = Tensor::randn(5, 4, &mut rand_chacha::ChaCha8Rng::seed_from_u64(2));
        let batch = bb.embed(&x).unwrap();
        for r in 0..5 {
            let single = bb.embed(&x.select_rows(&[r])).unwrap();
            assert_eq!(single.data(), batch.row(r));
        }
        assert_eq!(bb.embed(&x).unwrap(), batch);
    }
}
