use rand::Rng;
use serde::{Deserialize, Serialize};

/// Dense row-major f64 tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Option<Self> {
        (shape.iter().product::<usize>() == data.len()).then(|| Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let mut t = Self::zeros(shape);
        t.data.fill(value);
        t
    }

    pub fn uniform<R: Rng>(shape: &[usize], bound: f64, rng: &mut R) -> Self {
        let mut t = Self::zeros(shape);
        for v in &mut t.data {
            *v = rng.gen_range(-bound..=bound);
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Row `r` of a 2-D tensor.
    pub fn row(&self, r: usize) -> &[f64] {
        let cols = self.shape[1];
        &self.data[r * cols..(r + 1) * cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let cols = self.shape[1];
        &mut self.data[r * cols..(r + 1) * cols]
    }

    pub fn fill_zero(&mut self) {
        self.data.fill(0.0);
    }
}

/// A model whose trainable state is an ordered list of named tensors.
/// Gradients use the same type, so optimizers walk both lists in lockstep.
pub trait Parameters: Clone {
    fn blocks(&self) -> Vec<(String, &Tensor)>;
    fn blocks_mut(&mut self) -> Vec<(String, &mut Tensor)>;

    fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, t) in z.blocks_mut() {
            t.fill_zero();
        }
        z
    }

    fn param_count(&self) -> usize {
        self.blocks().iter().map(|(_, t)| t.len()).sum()
    }

    fn flatten(&self) -> Vec<f64> {
        self.blocks().iter().flat_map(|(_, t)| t.data().iter().copied()).collect()
    }

    fn assign_flat(&mut self, flat: &[f64]) {
        let mut off = 0;
        for (_, t) in self.blocks_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        assert_eq!(off, flat.len(), "flat parameter length mismatch");
    }

    fn add_scaled(&mut self, other: &Self, alpha: f64) {
        for ((_, a), (_, b)) in self.blocks_mut().into_iter().zip(other.blocks()) {
            super::axpy(alpha, b.data(), a.data_mut());
        }
    }

    fn scale(&mut self, alpha: f64) {
        for (_, t) in self.blocks_mut() {
            for v in t.data_mut() {
                *v *= alpha;
            }
        }
    }

    fn global_norm(&self) -> f64 {
        self.blocks()
            .iter()
            .flat_map(|(_, t)| t.data().iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

pub(crate) fn prefixed<'a>(prefix: &str, blocks: Vec<(String, &'a Tensor)>) -> Vec<(String, &'a Tensor)> {
    blocks.into_iter().map(|(n, t)| (format!("{prefix}.{n}"), t)).collect()
}

pub(crate) fn prefixed_mut<'a>(
    prefix: &str,
    blocks: Vec<(String, &'a mut Tensor)>,
) -> Vec<(String, &'a mut Tensor)> {
    blocks.into_iter().map(|(n, t)| (format!("{prefix}.{n}"), t)).collect()
}
