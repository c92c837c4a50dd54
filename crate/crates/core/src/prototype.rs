//! Prototype classifier: one mean feature per class, prediction by cosine
//! (or raw dot-product) similarity between `l(feature)` and each prototype.

use crate::adapter::Adapter;
use crate::backbone::Backbone;
use crate::config::{FeatureHeadKind, Scoring};
use crate::data::Task;
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::seed::{self, tags};
use crate::tensor::{checksum, Tensor};

/// The fixed map `l(.)` applied before scoring.
#[derive(Clone, Debug, PartialEq)]
pub enum FeatureHead {
    Identity,
    /// Frozen random `relu(x W + b)` of the same width.
    RandomMlp(Linear),
}

impl FeatureHead {
    pub fn build(kind: FeatureHeadKind, dim: usize, seed: u64) -> Self {
        match kind {
            FeatureHeadKind::Identity => FeatureHead::Identity,
            FeatureHeadKind::RandomMlp => {
                FeatureHead::RandomMlp(Linear::he(dim, dim, &mut seed::rng_for(seed, tags::FEATURE_HEAD)))
            }
        }
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            FeatureHead::Identity => Ok(x.detached()),
            FeatureHead::RandomMlp(l) => Ok(l.forward(x)?.map(|v| v.max(0.0))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeTable {
    dim: usize,
    classes: Vec<usize>,
    task_of: Vec<usize>,
    /// One row per entry of `classes`.
    prototypes: Tensor,
}

impl PrototypeTable {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            classes: Vec::new(),
            task_of: Vec::new(),
            prototypes: Tensor::zeros(0, dim),
        }
    }

    pub(crate) fn from_parts(classes: Vec<usize>, task_of: Vec<usize>, prototypes: Tensor) -> Result<Self> {
        if classes.len() != prototypes.rows() || task_of.len() != classes.len() {
            return Err(Error::Prototype("class list and prototype rows disagree".into()));
        }
        Ok(Self {
            dim: prototypes.cols(),
            classes,
            task_of,
            prototypes,
        })
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn classes(&self) -> &[usize] {
        &self.classes
    }

    pub fn task_of(&self) -> &[usize] {
        &self.task_of
    }

    pub fn prototypes(&self) -> &Tensor {
        &self.prototypes
    }

    pub fn prototype(&self, class: usize) -> Option<&[f64]> {
        self.classes
            .iter()
            .position(|c| *c == class)
            .map(|i| self.prototypes.row(i))
    }

    /// Prototype counts per task id, ascending.
    pub fn per_task_counts(&self) -> Vec<(usize, usize)> {
        let mut out: Vec<(usize, usize)> = Vec::new();
        for &t in &self.task_of {
            match out.iter_mut().find(|(id, _)| *id == t) {
                Some((_, n)) => *n += 1,
                None => out.push((t, 1)),
            }
        }
        out.sort_unstable();
        out
    }

    pub fn checksum(&self) -> String {
        checksum([&self.prototypes])
    }

    /// Appends prototypes for `classes` as the mean of `features` rows per class.
    /// Existing rows are never modified.
    pub fn add_class_means(&mut self, task_id: usize, classes: &[usize], features: &Tensor, labels: &[usize]) -> Result<()> {
        if features.cols() != self.dim {
            return Err(Error::Dimension {
                op: "prototypes",
                left: features.shape(),
                right: (self.dim, self.dim),
            });
        }
        let mut rows = Vec::with_capacity(classes.len() * self.dim);
        for &c in classes {
            if self.classes.contains(&c) {
                return Err(Error::Prototype(format!("class {c} already has a prototype")));
            }
            let idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
            if idx.is_empty() {
                return Err(Error::Prototype(format!("class {c} has no training samples")));
            }
            let mut mean = vec![0.0; self.dim];
            for &i in &idx {
                mean.iter_mut().zip(features.row(i)).for_each(|(m, v)| *m += v);
            }
            let n = idx.len() as f64;
            rows.extend(mean.into_iter().map(|m| m / n));
        }
        let new = Tensor::new(classes.len(), self.dim, rows)?;
        self.prototypes = Tensor::vstack(&[&self.prototypes, &new])?;
        self.classes.extend_from_slice(classes);
        self.task_of.extend(std::iter::repeat_n(task_id, classes.len()));
        Ok(())
    }

    /// Builds prototypes for `task` from `l(h_0 + h_t)` of its training samples,
    /// with only the task's own adapter active.
    pub fn build_for_task(&mut self, task: &Task, backbone: &Backbone, adapter: &Adapter, head: &FeatureHead) -> Result<()> {
        if !adapter.is_frozen() {
            return Err(Error::Prototype(format!("adapter {} is not frozen", adapter.task_id)));
        }
        let h0 = backbone.embed(&task.train.features)?;
        let feat = head.apply(&h0.add(&adapter.embed(&h0)?)?)?;
        self.add_class_means(task.task_id, &task.classes, &feat, &task.train.labels)
    }

    /// Predicted global class per row of already-gated features (before `l`).
    pub fn predict(&self, features: &Tensor, head: &FeatureHead, scoring: Scoring) -> Result<Vec<usize>> {
        if self.is_empty() {
            return Err(Error::Inference("prototype table is empty".into()));
        }
        let f = head.apply(features)?;
        if f.cols() != self.dim {
            return Err(Error::Dimension {
                op: "predict",
                left: f.shape(),
                right: (self.dim, self.dim),
            });
        }
        let protos = match scoring {
            Scoring::Cosine => normalise_rows(&self.prototypes),
            Scoring::Dot => self.prototypes.detached(),
        };
        let f = match scoring {
            Scoring::Cosine => normalise_rows(&f),
            Scoring::Dot => f,
        };
        let scores = f.matmul(&protos.transpose())?;
        Ok(crate::nn::argmax_rows(&scores)
            .into_iter()
            .map(|i| self.classes[i])
            .collect())
    }
}

/// Unit-norm rows; all-zero rows stay zero.
pub fn normalise_rows(x: &Tensor) -> Tensor {
    let mut data = x.data().to_vec();
    for row in data.chunks_exact_mut(x.cols().max(1)) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            row.iter_mut().for_each(|v| *v /= norm);
        }
    }
    Tensor::from_parts(x.rows(), x.cols(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: usize, cols: usize, d: &[f64]) -> Tensor {
        Tensor::new(rows, cols, d.to_vec()).unwrap()
    }

    #[test]
    fn prototype_is_class_mean() {
        let mut table = PrototypeTable::new(2);
        let f = t(3, 2, &[1.0, 2.0, 3.0, 4.0, 10.0, 10.0]);
        table.add_class_means(1, &[7, 8], &f, &[7, 7, 8]).unwrap();
        assert_eq!(table.prototype(7).unwrap(), &[2.0, 3.0]);
        assert_eq!(table.prototype(8).unwrap(), &[10.0, 10.0]);
    }

    #[test]
    fn duplicate_samples_give_that_sample() {
        let mut table = PrototypeTable::new(3);
        let f = t(2, 3, &[0.1, -0.2, 0.3, 0.1, -0.2, 0.3]);
        table.add_class_means(1, &[0], &f, &[0, 0]).unwrap();
        assert_eq!(table.prototype(0).unwrap(), &[0.1, -0.2, 0.3]);
    }

    #[test]
    fn empty_class_and_empty_table_errors() {
        let mut table = PrototypeTable::new(2);
        assert!(matches!(
            table.predict(&Tensor::zeros(1, 2), &FeatureHead::Identity, Scoring::Cosine),
            Err(Error::Inference(_))
        ));
        let f = t(1, 2, &[1.0, 1.0]);
        assert!(matches!(
            table.add_class_means(1, &[0, 1], &f, &[0]),
            Err(Error::Prototype(_))
        ));
        assert!(table.is_empty());
    }

    #[test]
    fn single_class_always_predicted() {
        let mut table = PrototypeTable::new(2);
        table.add_class_means(1, &[42], &t(1, 2, &[1.0, 0.0]), &[42]).unwrap();
        let x = t(3, 2, &[-1.0, 0.0, 0.0, 5.0, 3.0, -3.0]);
        assert_eq!(table.predict(&x, &FeatureHead::Identity, Scoring::Cosine).unwrap(), vec![42; 3]);
    }

    #[test]
    fn feature_equal_to_prototype_wins() {
        let mut table = PrototypeTable::new(3);
        let protos = t(3, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        table.add_class_means(1, &[3, 4, 5], &protos, &[3, 4, 5]).unwrap();
        let pred = table.predict(&protos, &FeatureHead::Identity, Scoring::Cosine).unwrap();
        assert_eq!(pred, vec![3, 4, 5]);
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let mut table = PrototypeTable::new(2);
        table
            .add_class_means(1, &[1, 2], &t(2, 2, &[1.0, 0.0, 0.0, 1.0]), &[1, 2])
            .unwrap();
        let pred = table.predict(&t(1, 2, &[1.0, 1.0]), &FeatureHead::Identity, Scoring::Cosine).unwrap();
        assert_eq!(pred, vec![1]);
    }

    #[test]
    fn random_head_is_deterministic() {
        let a = FeatureHead::build(FeatureHeadKind::RandomMlp, 4, 3);
        let b = FeatureHead::build(FeatureHeadKind::RandomMlp, 4, 3);
        assert_eq!(a, b);
    }
}
