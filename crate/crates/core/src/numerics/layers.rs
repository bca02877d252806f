use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{axpy, dot, NumericsError, Parameters, Tensor};

/// `y = W x + b`
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    /// `[out, in]`
    pub weight: Tensor,
    /// `[out]`
    pub bias: Tensor,
}

impl Affine {
    pub fn init<R: Rng>(input_dim: usize, output_dim: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (input_dim as f64).sqrt();
        Self {
            weight: Tensor::uniform(&[output_dim, input_dim], bound, rng),
            bias: Tensor::zeros(&[output_dim]),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>, NumericsError> {
        if x.len() != self.input_dim() {
            return Err(NumericsError::ShapeMismatch {
                layer: "affine".into(),
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        Ok((0..self.output_dim())
            .map(|r| self.bias.data()[r] + dot(self.weight.row(r), x))
            .collect())
    }

    /// Accumulates parameter gradients and returns `dL/dx`.
    pub fn backward(&self, x: &[f64], dy: &[f64], grads: &mut Affine) -> Vec<f64> {
        let mut dx = vec![0.0; x.len()];
        for (r, &d) in dy.iter().enumerate() {
            grads.bias.data_mut()[r] += d;
            axpy(d, x, grads.weight.row_mut(r));
            axpy(d, self.weight.row(r), &mut dx);
        }
        dx
    }
}

impl Parameters for Affine {
    fn blocks(&self) -> Vec<(String, &Tensor)> {
        vec![("weight".into(), &self.weight), ("bias".into(), &self.bias)]
    }

    fn blocks_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![("weight".into(), &mut self.weight), ("bias".into(), &mut self.bias)]
    }
}

/// Lookup table `[vocab, dim]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub table: Tensor,
}

impl Embedding {
    pub fn init<R: Rng>(vocab: usize, dim: usize, rng: &mut R) -> Self {
        Self {
            table: Tensor::uniform(&[vocab, dim], 1.0 / (dim as f64).sqrt(), rng),
        }
    }

    pub fn vocab(&self) -> usize {
        self.table.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.table.shape()[1]
    }

    /// Concatenated rows for `ids`.
    pub fn lookup(&self, ids: &[usize]) -> Result<Vec<f64>, NumericsError> {
        let mut out = Vec::with_capacity(ids.len() * self.dim());
        for &id in ids {
            if id >= self.vocab() {
                return Err(NumericsError::ShapeMismatch {
                    layer: "embedding".into(),
                    expected: self.vocab(),
                    got: id,
                });
            }
            out.extend_from_slice(self.table.row(id));
        }
        Ok(out)
    }

    pub fn backward(&self, ids: &[usize], d_rows: &[f64], grads: &mut Embedding) {
        let dim = self.dim();
        for (k, &id) in ids.iter().enumerate() {
            axpy(1.0, &d_rows[k * dim..(k + 1) * dim], grads.table.row_mut(id));
        }
    }
}

impl Parameters for Embedding {
    fn blocks(&self) -> Vec<(String, &Tensor)> {
        vec![("table".into(), &self.table)]
    }

    fn blocks_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![("table".into(), &mut self.table)]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check;
    use crate::util::rng_from;

    #[test]
    fn affine_gradient() {
        let mut rng = rng_from(3);
        let layer = Affine::init(3, 2, &mut rng);
        let x = [0.3, -1.2, 0.8];
        let w = [1.5, -0.7];
        let eval = |flat: &[f64]| {
            let mut a = layer.clone();
            a.assign_flat(flat);
            let y = a.forward(&x).unwrap();
            let mut g = a.zeros_like();
            a.backward(&x, &w, &mut g);
            (dot(&y, &w), g.flatten())
        };
        assert!(grad_check(eval, &layer.flatten(), 1e-5) < 1e-8);
    }

    #[test]
    fn embedding_accumulates_repeated_rows() {
        let emb = Embedding {
            table: Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
        };
        assert_eq!(emb.lookup(&[1, 0]).unwrap(), vec![3.0, 4.0, 1.0, 2.0]);
        let mut g = emb.zeros_like();
        emb.backward(&[1, 1], &[1.0, 1.0, 0.5, 0.5], &mut g);
        assert_eq!(g.table.data(), &[0.0, 0.0, 1.5, 1.5]);
        assert!(emb.lookup(&[2]).is_err());
    }
}
