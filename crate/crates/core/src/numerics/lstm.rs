use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::{prefixed, prefixed_mut};
use super::{axpy, dot, sigmoid, NumericsError, Parameters, Tensor};

/// One LSTM layer without peephole connections. Gate rows are laid out as
/// input, forget, cell candidate, output (each `hidden` rows).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmLayer {
    pub input_dim: usize,
    pub hidden_dim: usize,
    /// `[4h, input_dim]`
    pub w_ih: Tensor,
    /// `[4h, h]`
    pub w_hh: Tensor,
    /// `[4h]`
    pub bias: Tensor,
}

impl LstmLayer {
    /// Weights uniform in ±1/sqrt(input_dim + hidden_dim), forget-gate bias 1.
    pub fn init<R: Rng>(input_dim: usize, hidden_dim: usize, rng: &mut R) -> Self {
        let bound = 1.0 / ((input_dim + hidden_dim) as f64).sqrt();
        let mut bias = Tensor::zeros(&[4 * hidden_dim]);
        bias.data_mut()[hidden_dim..2 * hidden_dim].fill(1.0);
        Self {
            input_dim,
            hidden_dim,
            w_ih: Tensor::uniform(&[4 * hidden_dim, input_dim], bound, rng),
            w_hh: Tensor::uniform(&[4 * hidden_dim, hidden_dim], bound, rng),
            bias,
        }
    }

    pub fn zeros(input_dim: usize, hidden_dim: usize) -> Self {
        Self {
            input_dim,
            hidden_dim,
            w_ih: Tensor::zeros(&[4 * hidden_dim, input_dim]),
            w_hh: Tensor::zeros(&[4 * hidden_dim, hidden_dim]),
            bias: Tensor::zeros(&[4 * hidden_dim]),
        }
    }

    fn check(&self, name: &str) -> Result<(), NumericsError> {
        let h = self.hidden_dim;
        let ok = self.w_ih.shape() == [4 * h, self.input_dim]
            && self.w_hh.shape() == [4 * h, h]
            && self.bias.shape() == [4 * h];
        if ok {
            Ok(())
        } else {
            Err(NumericsError::ShapeMismatch {
                layer: name.to_string(),
                expected: 4 * h,
                got: self.bias.len(),
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmStack {
    pub layers: Vec<LstmLayer>,
}

#[derive(Debug)]
struct LayerTape {
    hidden: usize,
    /// `(T + 1) * h`; row 0 is the zero initial state.
    h: Vec<f64>,
    c: Vec<f64>,
    /// `T * 4h` post-activation gate values.
    acts: Vec<f64>,
    /// `T * h`, tanh of the cell state.
    tc: Vec<f64>,
}

/// Forward activations kept for the reverse pass.
#[derive(Debug)]
pub struct LstmTape {
    steps: usize,
    input_dim: usize,
    inputs: Vec<f64>,
    layers: Vec<LayerTape>,
}

impl LstmTape {
    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Hidden state of `layer` after step `t` (0-based).
    pub fn hidden(&self, layer: usize, t: usize) -> &[f64] {
        let lt = &self.layers[layer];
        &lt.h[(t + 1) * lt.hidden..(t + 2) * lt.hidden]
    }

    pub fn top_hidden(&self, t: usize) -> &[f64] {
        self.hidden(self.layers.len() - 1, t)
    }

    pub fn last_top_hidden(&self) -> &[f64] {
        self.top_hidden(self.steps - 1)
    }
}

impl LstmStack {
    /// Layer `l` takes the hidden state of layer `l - 1` as input.
    pub fn init<R: Rng>(input_dim: usize, hidden_dim: usize, n_layers: usize, rng: &mut R) -> Self {
        let layers = (0..n_layers)
            .map(|l| LstmLayer::init(if l == 0 { input_dim } else { hidden_dim }, hidden_dim, rng))
            .collect();
        Self { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.hidden_dim)
    }

    /// Runs the stack over `steps` inputs laid out contiguously in `inputs`.
    pub fn forward(&self, inputs: &[f64], steps: usize) -> Result<LstmTape, NumericsError> {
        if steps == 0 {
            return Err(NumericsError::EmptySequence);
        }
        let in0 = self.input_dim();
        if inputs.len() != steps * in0 {
            return Err(NumericsError::ShapeMismatch {
                layer: "lstm.0".into(),
                expected: in0,
                got: inputs.len() / steps,
            });
        }
        let mut tapes: Vec<LayerTape> = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            layer.check(&format!("lstm.{l}"))?;
            let expected_in = if l == 0 { in0 } else { self.layers[l - 1].hidden_dim };
            if layer.input_dim != expected_in {
                return Err(NumericsError::ShapeMismatch {
                    layer: format!("lstm.{l}"),
                    expected: layer.input_dim,
                    got: expected_in,
                });
            }
            let hd = layer.hidden_dim;
            let mut tape = LayerTape {
                hidden: hd,
                h: vec![0.0; (steps + 1) * hd],
                c: vec![0.0; (steps + 1) * hd],
                acts: vec![0.0; steps * 4 * hd],
                tc: vec![0.0; steps * hd],
            };
            for t in 0..steps {
                let x: &[f64] = if l == 0 {
                    &inputs[t * in0..(t + 1) * in0]
                } else {
                    let below = &tapes[l - 1];
                    &below.h[(t + 1) * below.hidden..(t + 2) * below.hidden]
                };
                let (h_hist, h_next) = tape.h.split_at_mut((t + 1) * hd);
                let h_prev = &h_hist[t * hd..];
                let acts = &mut tape.acts[t * 4 * hd..(t + 1) * 4 * hd];
                let b = layer.bias.data();
                for r in 0..4 * hd {
                    acts[r] = b[r] + dot(layer.w_ih.row(r), x) + dot(layer.w_hh.row(r), h_prev);
                }
                for j in 0..hd {
                    acts[j] = sigmoid(acts[j]);
                    acts[hd + j] = sigmoid(acts[hd + j]);
                    acts[2 * hd + j] = acts[2 * hd + j].tanh();
                    acts[3 * hd + j] = sigmoid(acts[3 * hd + j]);
                }
                let (c_hist, c_next) = tape.c.split_at_mut((t + 1) * hd);
                let c_prev = &c_hist[t * hd..];
                for j in 0..hd {
                    let c = acts[hd + j] * c_prev[j] + acts[j] * acts[2 * hd + j];
                    c_next[j] = c;
                    let tc = c.tanh();
                    tape.tc[t * hd + j] = tc;
                    h_next[j] = acts[3 * hd + j] * tc;
                }
            }
            tapes.push(tape);
        }
        Ok(LstmTape {
            steps,
            input_dim: in0,
            inputs: inputs.to_vec(),
            layers: tapes,
        })
    }

    /// Reverse pass. `d_top` holds the loss gradient w.r.t. the top layer's
    /// hidden state at every step (`steps * h_top`). Parameter gradients are
    /// accumulated into `grads`; the gradient w.r.t. the inputs is returned.
    pub fn backward(&self, tape: &LstmTape, d_top: &[f64], grads: &mut LstmStack) -> Vec<f64> {
        let steps = tape.steps;
        let mut d_out = d_top.to_vec();
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let g = &mut grads.layers[l];
            let lt = &tape.layers[l];
            let hd = layer.hidden_dim;
            let in_dim = layer.input_dim;
            let mut d_in = vec![0.0; steps * in_dim];
            let mut dh_next = vec![0.0; hd];
            let mut dc_next = vec![0.0; hd];
            let mut dpre = vec![0.0; 4 * hd];
            for t in (0..steps).rev() {
                let acts = &lt.acts[t * 4 * hd..(t + 1) * 4 * hd];
                let c_prev = &lt.c[t * hd..(t + 1) * hd];
                let tc = &lt.tc[t * hd..(t + 1) * hd];
                for j in 0..hd {
                    let dh = d_out[t * hd + j] + dh_next[j];
                    let (i, f, gc, o) = (acts[j], acts[hd + j], acts[2 * hd + j], acts[3 * hd + j]);
                    let dc = dc_next[j] + dh * o * (1.0 - tc[j] * tc[j]);
                    dpre[j] = dc * gc * i * (1.0 - i);
                    dpre[hd + j] = dc * c_prev[j] * f * (1.0 - f);
                    dpre[2 * hd + j] = dc * i * (1.0 - gc * gc);
                    dpre[3 * hd + j] = dh * tc[j] * o * (1.0 - o);
                    dc_next[j] = dc * f;
                }
                let x: &[f64] = if l == 0 {
                    &tape.inputs[t * tape.input_dim..(t + 1) * tape.input_dim]
                } else {
                    let below = &tape.layers[l - 1];
                    &below.h[(t + 1) * below.hidden..(t + 2) * below.hidden]
                };
                let h_prev = &lt.h[t * hd..(t + 1) * hd];
                dh_next.fill(0.0);
                let dx = &mut d_in[t * in_dim..(t + 1) * in_dim];
                let gb = g.bias.data_mut();
                for r in 0..4 * hd {
                    let d = dpre[r];
                    if d == 0.0 {
                        continue;
                    }
                    gb[r] += d;
                    axpy(d, x, g.w_ih.row_mut(r));
                    axpy(d, h_prev, g.w_hh.row_mut(r));
                    axpy(d, layer.w_ih.row(r), dx);
                    axpy(d, layer.w_hh.row(r), &mut dh_next);
                }
            }
            d_out = d_in;
        }
        d_out
    }
}

impl Parameters for LstmStack {
    fn blocks(&self) -> Vec<(String, &Tensor)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(l, layer)| {
                prefixed(
                    &l.to_string(),
                    vec![
                        ("w_ih".to_string(), &layer.w_ih),
                        ("w_hh".to_string(), &layer.w_hh),
                        ("bias".to_string(), &layer.bias),
                    ],
                )
            })
            .collect()
    }

    fn blocks_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        self.layers
            .iter_mut()
            .enumerate()
            .flat_map(|(l, layer)| {
                prefixed_mut(
                    &l.to_string(),
                    vec![
                        ("w_ih".to_string(), &mut layer.w_ih),
                        ("w_hh".to_string(), &mut layer.w_hh),
                        ("bias".to_string(), &mut layer.bias),
                    ],
                )
            })
            .collect()
    }
}
