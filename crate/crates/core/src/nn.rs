//! Fully connected layer shared by the backbone, adapters, gates and heads.

use rand::Rng;

use crate::error::Result;
use crate::optim::NamedParam;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// `y = x W + b` with `W: in x out` and `b: 1 x out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// A [`Linear`] whose parameters have been recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct BoundLinear {
    weight: Var,
    bias: Var,
}

impl Linear {
    /// He-uniform weights, zero bias.
    pub fn he<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        Self {
            weight: Tensor::he_uniform(fan_in, fan_out, rng),
            bias: Tensor::zeros(1, fan_out),
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Tensor::zeros(fan_in, fan_out),
            bias: Tensor::zeros(1, fan_out),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn num_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.matmul(&self.weight)?.add_row(&self.bias)
    }

    pub fn set_trainable(&mut self, on: bool) {
        self.weight.set_requires_grad(on);
        self.bias.set_requires_grad(on);
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundLinear {
        BoundLinear {
            weight: tape.param(&self.weight),
            bias: tape.param(&self.bias),
        }
    }

    /// Copies gradients computed on `tape` back into the parameters.
    pub fn pull_grads(&mut self, tape: &Tape, bound: &BoundLinear) -> Result<()> {
        if let Some(g) = tape.grad(bound.weight) {
            self.weight.accumulate_grad(g)?;
        }
        if let Some(g) = tape.grad(bound.bias) {
            self.bias.accumulate_grad(g)?;
        }
        Ok(())
    }

    pub fn named_params<'a>(&'a mut self, prefix: &str) -> Vec<NamedParam<'a>> {
        vec![
            (format!("{prefix}.weight"), &mut self.weight),
            (format!("{prefix}.bias"), &mut self.bias),
        ]
    }

    pub fn tensors(&self) -> [&Tensor; 2] {
        [&self.weight, &self.bias]
    }
}

impl BoundLinear {
    pub fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let xw = tape.matmul(x, self.weight)?;
        tape.add_row(xw, self.bias)
    }
}

/// Row-wise argmax, ties resolved towards the lowest column.
pub fn argmax_rows(t: &Tensor) -> Vec<usize> {
    t.row_iter()
        .map(|row| {
            let mut best = 0;
            for (i, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_prefers_lowest_index_on_ties() {
        let t = Tensor::new(2, 3, vec![1.0, 1.0, 0.0, 0.0, 2.0, 2.0]).unwrap();
        assert_eq!(argmax_rows(&t), vec![0, 1]);
    }

    #[test]
    fn bound_forward_matches_plain_forward() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mut lin = Linear::he(3, 2, &mut rng);
        lin.bias = Tensor::new(1, 2, vec![0.5, -0.25]).unwrap();
        let x = Tensor::randn(4, 3, &mut rng);
        let mut tape = Tape::new();
        let b = lin.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let y = b.apply(&mut tape, xv).unwrap();
        assert_eq!(tape.value(y), &lin.forward(&x).unwrap());
    }
}
