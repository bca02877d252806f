use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{EncoderError, SsqeParams};
use crate::numerics::{prefixed, prefixed_mut, Affine, LstmStack, LstmTape, NumericsError, Parameters, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SmqeConfig {
    pub session_hidden: usize,
    pub session_layers: usize,
}

impl SmqeConfig {
    pub fn desk() -> Self {
        Self {
            session_hidden: 64,
            session_layers: 1,
        }
    }

    pub fn full() -> Self {
        Self {
            session_hidden: 1024,
            session_layers: 2,
        }
    }
}

/// Session-level LSTM plus its output projection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionHead {
    pub lstm: LstmStack,
    pub proj: Affine,
}

pub struct SessionTape {
    pub lstm: LstmTape,
    /// Representation after each step.
    pub outputs: Vec<Vec<f64>>,
}

impl SessionHead {
    pub fn forward(&self, inputs: &[f64], steps: usize) -> Result<SessionTape, NumericsError> {
        let lstm = self.lstm.forward(inputs, steps)?;
        let outputs = (0..steps)
            .map(|t| self.proj.forward(lstm.top_hidden(t)))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(SessionTape { lstm, outputs })
    }

    /// `d_outputs[t]` is `dL/dz_t` (or `None` for steps without a loss term).
    /// Returns the gradient w.r.t. the per-step inputs.
    pub fn backward(&self, tape: &SessionTape, d_outputs: &[Option<Vec<f64>>], grads: &mut SessionHead) -> Vec<f64> {
        let h = self.lstm.output_dim();
        let steps = tape.lstm.steps();
        let mut d_top = vec![0.0; steps * h];
        for (t, dz) in d_outputs.iter().enumerate() {
            if let Some(dz) = dz {
                let dh = self.proj.backward(tape.lstm.top_hidden(t), dz, &mut grads.proj);
                d_top[t * h..(t + 1) * h].copy_from_slice(&dh);
            }
        }
        self.lstm.backward(&tape.lstm, &d_top, &mut grads.lstm)
    }
}

impl Parameters for SessionHead {
    fn blocks(&self) -> Vec<(String, &Tensor)> {
        let mut out = prefixed("session", self.lstm.blocks());
        out.extend(prefixed("session_proj", self.proj.blocks()));
        out
    }

    fn blocks_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = prefixed_mut("session", self.lstm.blocks_mut());
        out.extend(prefixed_mut("session_proj", self.proj.blocks_mut()));
        out
    }
}

/// Hierarchical encoder: an SSQE first stage feeding a session LSTM.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmqeParams {
    pub config: SmqeConfig,
    pub ssqe: SsqeParams,
    pub head: SessionHead,
}

impl SmqeParams {
    pub fn init<R: Rng>(ssqe: SsqeParams, config: SmqeConfig, rng: &mut R) -> Result<Self, EncoderError> {
        if config.session_hidden == 0 || config.session_layers == 0 {
            return Err(EncoderError::Config(format!("degenerate SMQE config {config:?}")));
        }
        ssqe.check_shapes()?;
        let head = SessionHead {
            lstm: LstmStack::init(ssqe.config.hidden_dim, config.session_hidden, config.session_layers, rng),
            proj: Affine::init(config.session_hidden, ssqe.config.output_dim, rng),
        };
        Ok(Self { config, ssqe, head })
    }

    pub fn check_shapes(&self) -> Result<(), EncoderError> {
        self.ssqe.check_shapes()?;
        if self.head.lstm.input_dim() != self.ssqe.config.hidden_dim {
            return Err(EncoderError::ModelMismatch(format!(
                "session LSTM input {} != SSQE hidden {}",
                self.head.lstm.input_dim(),
                self.ssqe.config.hidden_dim
            )));
        }
        if self.head.proj.output_dim() != self.ssqe.config.output_dim {
            return Err(EncoderError::ModelMismatch("SMQE and SSQE output dimensions differ".into()));
        }
        Ok(())
    }

    pub fn zeros(ssqe_config: super::SsqeConfig, config: SmqeConfig) -> Self {
        let mut rng = crate::util::rng_from(0);
        let mut p = Self::init(SsqeParams::zeros(ssqe_config), config, &mut rng).expect("valid config");
        for (_, t) in p.blocks_mut() {
            t.fill_zero();
        }
        p
    }
}

impl Parameters for SmqeParams {
    fn blocks(&self) -> Vec<(String, &Tensor)> {
        let mut out = prefixed("ssqe", self.ssqe.blocks());
        out.extend(self.head.blocks());
        out
    }

    fn blocks_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = prefixed_mut("ssqe", self.ssqe.blocks_mut());
        out.extend(self.head.blocks_mut());
        out
    }
}
