//! Class-incremental task streams.
//!
//! A [`TaskStream`] holds a base task (id 0, used only to pre-train the
//! backbone) and the incremental tasks `1..=T`. Class sets of all tasks,
//! base included, are pairwise disjoint; construction enforces it.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, ValidationError};
use crate::seed;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSample<'a> {
    pub features: &'a [f64],
    pub label: usize,
}

/// One split of a task: samples as rows of `features`, with parallel labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub features: Tensor,
    pub labels: Vec<usize>,
}

impl Split {
    pub fn new(features: Tensor, labels: Vec<usize>) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::Dimension {
                op: "split",
                left: features.shape(),
                right: (labels.len(), 1),
            });
        }
        Ok(Self { features, labels })
    }

    pub fn empty(dim: usize) -> Self {
        Self {
            features: Tensor::zeros(0, dim),
            labels: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn samples(&self) -> impl Iterator<Item = LabeledSample<'_>> {
        self.features
            .row_iter()
            .zip(&self.labels)
            .map(|(features, &label)| LabeledSample { features, label })
    }

    /// Row indices of samples with the given label, in stored order.
    pub fn indices_of(&self, label: usize) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter_map(|(i, &l)| (l == label).then_some(i))
            .collect()
    }

    /// Iterates `batch_size` chunks. `Some(seed)` shuffles with that seed; `None` keeps stored order.
    pub fn batches(&self, batch_size: usize, shuffle: Option<u64>) -> Result<Batches<'_>> {
        if batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        Ok(Batches {
            split: self,
            order: sample_order(self.len(), shuffle),
            batch_size,
            pos: 0,
        })
    }
}

/// `0..n`, shuffled when a seed is given.
pub fn sample_order(n: usize, shuffle: Option<u64>) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    if let Some(s) = shuffle {
        order.shuffle(&mut seed::rng(s));
    }
    order
}

/// Index chunks of at most `batch_size` over `0..n`, final partial chunk included.
pub fn index_batches(n: usize, batch_size: usize, shuffle: Option<u64>) -> Vec<Vec<usize>> {
    sample_order(n, shuffle)
        .chunks(batch_size.max(1))
        .map(<[usize]>::to_vec)
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitKind {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    pub task_id: usize,
    /// Sorted global class indices.
    pub classes: Vec<usize>,
    pub train: Split,
    pub test: Split,
}

impl Task {
    pub fn split(&self, kind: SplitKind) -> &Split {
        match kind {
            SplitKind::Train => &self.train,
            SplitKind::Test => &self.test,
        }
    }

    /// Train batches are shuffled with `seed`; test batches keep stored order.
    pub fn batches(&self, kind: SplitKind, batch_size: usize, seed: u64) -> Result<Batches<'_>> {
        match kind {
            SplitKind::Train => self.train.batches(batch_size, Some(seed)),
            SplitKind::Test => self.test.batches(batch_size, None),
        }
    }

    /// Position of a global class within this task's sorted class list.
    pub fn local_index(&self, label: usize) -> Option<usize> {
        self.classes.binary_search(&label).ok()
    }

    fn validate(&self, dim: usize) -> Result<()> {
        if self.classes.windows(2).any(|w| w[0] >= w[1]) {
            return Err(ValidationError::Manifest(format!(
                "task {}: classes must be sorted and distinct",
                self.task_id
            ))
            .into());
        }
        for split in [&self.train, &self.test] {
            if split.features.cols() != dim && !split.is_empty() {
                return Err(ValidationError::DimensionMismatch {
                    task_id: self.task_id,
                    expected: dim,
                    actual: split.features.cols(),
                }
                .into());
            }
            if let Some(&label) = split.labels.iter().find(|l| self.local_index(**l).is_none()) {
                return Err(ValidationError::ForeignLabel {
                    task_id: self.task_id,
                    label,
                }
                .into());
            }
        }
        Ok(())
    }
}

pub struct Batches<'a> {
    split: &'a Split,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl Iterator for Batches<'_> {
    type Item = (Tensor, Vec<usize>);

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let idx = &self.order[self.pos..end];
        self.pos = end;
        let x = self.split.features.select_rows(idx);
        let y = idx.iter().map(|&i| self.split.labels[i]).collect();
        Some((x, y))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskStream {
    pub base: Task,
    pub incremental: Vec<Task>,
    pub feature_dim: usize,
    /// Features are already backbone embeddings; the backbone becomes the identity map.
    pub pre_embedded: bool,
}

impl TaskStream {
    pub fn new(base: Task, incremental: Vec<Task>, feature_dim: usize, pre_embedded: bool) -> Result<Self> {
        if base.task_id != 0 {
            return Err(ValidationError::Manifest(format!(
                "base task must have id 0, got {}",
                base.task_id
            ))
            .into());
        }
        for (i, t) in incremental.iter().enumerate() {
            if t.task_id != i + 1 {
                return Err(ValidationError::Manifest(format!(
                    "incremental tasks must be numbered 1..=T in order; position {} has id {}",
                    i + 1,
                    t.task_id
                ))
                .into());
            }
        }
        let all: Vec<&Task> = std::iter::once(&base).chain(&incremental).collect();
        for t in &all {
            t.validate(feature_dim)?;
        }
        for (i, a) in all.iter().enumerate() {
            let sa: BTreeSet<usize> = a.classes.iter().copied().collect();
            for b in &all[i + 1..] {
                let shared: Vec<usize> = b.classes.iter().copied().filter(|c| sa.contains(c)).collect();
                if !shared.is_empty() {
                    return Err(ValidationError::Overlap {
                        first: a.task_id,
                        second: b.task_id,
                        shared,
                    }
                    .into());
                }
            }
        }
        Ok(Self {
            base,
            incremental,
            feature_dim,
            pre_embedded,
        })
    }

    pub fn num_tasks(&self) -> usize {
        self.incremental.len()
    }

    /// Incremental task by 1-based id.
    pub fn task(&self, task_id: usize) -> Option<&Task> {
        task_id.checked_sub(1).and_then(|i| self.incremental.get(i))
    }

    pub fn all_tasks(&self) -> impl Iterator<Item = &Task> {
        std::iter::once(&self.base).chain(&self.incremental)
    }
}

/// Parameters of the synthetic Gaussian benchmark.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GaussianStreamSpec {
    pub num_tasks: usize,
    pub classes_per_task: usize,
    pub dim: usize,
    pub samples_per_class: usize,
    pub separation: f64,
    pub within_std: f64,
    /// Classes in the base (pre-training) task. `None` uses `num_tasks * classes_per_task`.
    #[serde(default)]
    pub base_classes: Option<usize>,
}

impl Default for GaussianStreamSpec {
    fn default() -> Self {
        Self {
            num_tasks: 5,
            classes_per_task: 2,
            dim: 16,
            samples_per_class: 100,
            separation: 6.0,
            within_std: 1.0,
            base_classes: None,
        }
    }
}

impl GaussianStreamSpec {
    pub fn base_class_count(&self) -> usize {
        self.base_classes
            .unwrap_or(self.num_tasks * self.classes_per_task)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Generation(m));
        if self.num_tasks < 1 {
            return fail("num_tasks must be >= 1".into());
        }
        if self.classes_per_task < 2 {
            return fail(format!("classes_per_task must be >= 2, got {}", self.classes_per_task));
        }
        if self.dim < 2 {
            return fail(format!("dim must be >= 2, got {}", self.dim));
        }
        if self.samples_per_class < 5 {
            return fail(format!(
                "samples_per_class must be >= 5, got {}",
                self.samples_per_class
            ));
        }
        if !(self.separation > 0.0 && self.separation.is_finite()) {
            return fail(format!("separation must be > 0, got {}", self.separation));
        }
        if !(self.within_std > 0.0 && self.within_std.is_finite()) {
            return fail(format!("within_std must be > 0, got {}", self.within_std));
        }
        if self.base_class_count() < 2 {
            return fail("base task needs at least 2 classes".into());
        }
        Ok(())
    }
}

/// Draws a synthetic stream: class means uniform on the sphere of radius
/// `separation * within_std * sqrt(dim)`, isotropic Gaussian samples around
/// them, 80/20 train/test per class. Features are rounded to `f32` so the
/// stream survives the on-disk format unchanged.
pub fn gen_gaussian_stream(seed: u64, spec: &GaussianStreamSpec) -> Result<TaskStream> {
    use rand::Rng;
    use rand_distr::StandardNormal;

    spec.validate()?;
    let mut rng = seed::rng_for(seed, seed::tags::DATA);
    let d = spec.dim;
    let radius = spec.separation * spec.within_std * (d as f64).sqrt();
    let n = spec.samples_per_class;
    let n_train = n * 4 / 5;

    let mut make_task = |task_id: usize, classes: Vec<usize>| -> Result<Task> {
        let (mut tr_x, mut tr_y, mut te_x, mut te_y) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for &c in &classes {
            let dir: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
            let mean: Vec<f64> = dir.iter().map(|v| v / norm * radius).collect();
            for i in 0..n {
                let (xs, ys) = if i < n_train {
                    (&mut tr_x, &mut tr_y)
                } else {
                    (&mut te_x, &mut te_y)
                };
                for m in &mean {
                    let noise: f64 = rng.sample(StandardNormal);
                    xs.push((m + spec.within_std * noise) as f32 as f64);
                }
                ys.push(c);
            }
        }
        Ok(Task {
            task_id,
            classes,
            train: Split::new(Tensor::new(tr_y.len(), d, tr_x)?, tr_y)?,
            test: Split::new(Tensor::new(te_y.len(), d, te_x)?, te_y)?,
        })
    };

    let nb = spec.base_class_count();
    let base = make_task(0, (0..nb).collect())?;
    let k = spec.classes_per_task;
    let incremental = (1..=spec.num_tasks)
        .map(|t| {
            let first = nb + (t - 1) * k;
            make_task(t, (first..first + k).collect())
        })
        .collect::<Result<Vec<_>>>()?;
    TaskStream::new(base, incremental, d, false)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GaussianStreamSpec {
        GaussianStreamSpec::default()
    }

    #[test]
    fn construction_contract() {
        let s = gen_gaussian_stream(1, &small()).unwrap();
        assert_eq!(s.num_tasks(), 5);
        assert_eq!(s.incremental.iter().map(|t| t.classes.len()).sum::<usize>(), 10);
        assert_eq!(s.base.classes.len(), 10);
        let mut seen = BTreeSet::new();
        for t in s.all_tasks() {
            for c in &t.classes {
                assert!(seen.insert(*c), "class {c} repeated");
            }
            assert_eq!(t.train.len(), 80 * t.classes.len());
            assert_eq!(t.test.len(), 20 * t.classes.len());
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let a = gen_gaussian_stream(9, &small()).unwrap();
        let b = gen_gaussian_stream(9, &small()).unwrap();
        assert_eq!(a, b);
        let c = gen_gaussian_stream(10, &small()).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn degenerate_parameters_rejected() {
        for spec in [
            GaussianStreamSpec { samples_per_class: 4, ..small() },
            GaussianStreamSpec { num_tasks: 0, ..small() },
            GaussianStreamSpec { classes_per_task: 1, ..small() },
            GaussianStreamSpec { dim: 1, ..small() },
            GaussianStreamSpec { separation: 0.0, ..small() },
            GaussianStreamSpec { within_std: -1.0, ..small() },
        ] {
            assert!(matches!(gen_gaussian_stream(0, &spec), Err(Error::Generation(_))), "{spec:?}");
        }
    }

    #[test]
    fn batch_sizes_include_partial_tail() {
        let split = Split::new(Tensor::zeros(100, 2), vec![0; 100]).unwrap();
        let sizes: Vec<usize> = split.batches(48, Some(3)).unwrap().map(|(x, _)| x.rows()).collect();
        assert_eq!(sizes, vec![48, 48, 4]);
        assert!(split.batches(0, None).is_err());
        assert_eq!(Split::empty(2).batches(4, None).unwrap().count(), 0);
    }

    #[test]
    fn shuffle_is_seeded_and_test_order_is_stored_order() {
        let s = gen_gaussian_stream(2, &small()).unwrap();
        let t = &s.incremental[0];
        let a: Vec<Vec<usize>> = t.batches(SplitKind::Train, 48, 5).unwrap().map(|b| b.1).collect();
        let b: Vec<Vec<usize>> = t.batches(SplitKind::Train, 48, 5).unwrap().map(|b| b.1).collect();
        assert_eq!(a, b);
        let stored: Vec<usize> = t
            .batches(SplitKind::Test, 7, 123)
            .unwrap()
            .flat_map(|(_, y)| y)
            .collect();
        assert_eq!(stored, t.test.labels);
        let xs: Vec<f64> = t
            .batches(SplitKind::Test, 7, 99)
            .unwrap()
            .flat_map(|(x, _)| x.into_data())
            .collect();
        assert_eq!(xs, t.test.features.data());
    }

    #[test]
    fn overlapping_tasks_rejected() {
        let s = gen_gaussian_stream(3, &small()).unwrap();
        let mut inc = s.incremental.clone();
        let mut dup = inc[1].clone();
        dup.classes = vec![inc[0].classes[0], inc[1].classes[0], inc[1].classes[1]];
        inc[1] = dup;
        match TaskStream::new(s.base.clone(), inc, 16, false) {
            Err(Error::Validation(ValidationError::Overlap { shared, .. })) => {
                assert_eq!(shared, vec![s.incremental[0].classes[0]])
            }
            other => panic!("{other:?}"),
        }
    }
}
