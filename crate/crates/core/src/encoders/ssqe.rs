use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{EncoderError, Representation};
use crate::corpus::CharVocab;
use crate::numerics::{prefixed, prefixed_mut, Affine, Embedding, LstmStack, LstmTape, NumericsError, Parameters, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SsqeConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub layers: usize,
    pub output_dim: usize,
}

impl SsqeConfig {
    /// Desk-scale sizes.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            embed_dim: 16,
            hidden_dim: 64,
            layers: 2,
            output_dim: 32,
        }
    }

    /// Full-size model: 256-dim embeddings, three 1024-unit layers, 128-dim output.
    pub fn full(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            embed_dim: 256,
            hidden_dim: 1024,
            layers: 3,
            output_dim: 128,
        }
    }

    pub fn validate(&self) -> Result<(), EncoderError> {
        if self.vocab_size < 2 || self.embed_dim == 0 || self.hidden_dim == 0 || self.layers == 0 {
            return Err(EncoderError::Config(format!("degenerate SSQE config {self:?}")));
        }
        if self.output_dim < 2 {
            return Err(EncoderError::Config("representation dimension must be at least 2".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SsqeParams {
    pub config: SsqeConfig,
    pub embedding: Embedding,
    pub lstm: LstmStack,
    pub proj: Affine,
}

/// Activations of one SSQE forward pass.
#[derive(Debug)]
pub struct SsqeTape {
    pub ids: Vec<usize>,
    pub lstm: LstmTape,
    pub z: Vec<f64>,
}

impl SsqeTape {
    pub fn top_last(&self) -> &[f64] {
        self.lstm.last_top_hidden()
    }
}

impl SsqeParams {
    pub fn init<R: Rng>(config: SsqeConfig, rng: &mut R) -> Result<Self, EncoderError> {
        config.validate()?;
        Ok(Self {
            config,
            embedding: Embedding::init(config.vocab_size, config.embed_dim, rng),
            lstm: LstmStack::init(config.embed_dim, config.hidden_dim, config.layers, rng),
            proj: Affine::init(config.hidden_dim, config.output_dim, rng),
        })
    }

    pub fn forward(&self, vocab: &CharVocab, query: &str) -> Result<SsqeTape, EncoderError> {
        if query.is_empty() {
            return Err(EncoderError::EmptyQuery);
        }
        if vocab.len() != self.config.vocab_size {
            return Err(EncoderError::ModelMismatch(format!(
                "vocabulary has {} entries, model expects {}",
                vocab.len(),
                self.config.vocab_size
            )));
        }
        let ids = vocab.encode(query);
        let inputs = self.embedding.lookup(&ids)?;
        let lstm = self.lstm.forward(&inputs, ids.len())?;
        let z = self.proj.forward(lstm.last_top_hidden())?;
        Ok(SsqeTape { ids, lstm, z })
    }

    pub fn encode(&self, vocab: &CharVocab, query: &str) -> Result<Representation, EncoderError> {
        Ok(Representation(self.forward(vocab, query)?.z))
    }

    /// Accumulates gradients given `dL/dz` and/or `dL/dh` on the top layer's
    /// last hidden state.
    pub fn backward(&self, tape: &SsqeTape, dz: Option<&[f64]>, dh_last: Option<&[f64]>, grads: &mut SsqeParams) {
        let h = self.config.hidden_dim;
        let steps = tape.lstm.steps();
        let mut d_top = vec![0.0; steps * h];
        let last = &mut d_top[(steps - 1) * h..];
        if let Some(dz) = dz {
            let dh = self.proj.backward(tape.top_last(), dz, &mut grads.proj);
            for (a, b) in last.iter_mut().zip(&dh) {
                *a += b;
            }
        }
        if let Some(dh) = dh_last {
            for (a, b) in last.iter_mut().zip(dh) {
                *a += b;
            }
        }
        let d_inputs = self.lstm.backward(&tape.lstm, &d_top, &mut grads.lstm);
        self.embedding.backward(&tape.ids, &d_inputs, &mut grads.embedding);
    }

    pub(crate) fn check_shapes(&self) -> Result<(), EncoderError> {
        let c = &self.config;
        let ok = self.embedding.table.shape() == [c.vocab_size, c.embed_dim]
            && self.lstm.layers.len() == c.layers
            && self.lstm.input_dim() == c.embed_dim
            && self.lstm.output_dim() == c.hidden_dim
            && self.proj.input_dim() == c.hidden_dim
            && self.proj.output_dim() == c.output_dim;
        if ok {
            Ok(())
        } else {
            Err(EncoderError::Numerics(NumericsError::ShapeMismatch {
                layer: "ssqe".into(),
                expected: c.hidden_dim,
                got: self.lstm.output_dim(),
            }))
        }
    }

    /// Parameters with every tensor shaped per `config` and zero-filled.
    pub fn zeros(config: SsqeConfig) -> Self {
        let mut rng = crate::util::rng_from(0);
        let mut p = Self::init(config, &mut rng).expect("valid config");
        for (_, t) in p.blocks_mut() {
            t.fill_zero();
        }
        p
    }
}

impl Parameters for SsqeParams {
    fn blocks(&self) -> Vec<(String, &Tensor)> {
        let mut out = prefixed("embedding", self.embedding.blocks());
        out.extend(prefixed("lstm", self.lstm.blocks()));
        out.extend(prefixed("proj", self.proj.blocks()));
        out
    }

    fn blocks_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = prefixed_mut("embedding", self.embedding.blocks_mut());
        out.extend(prefixed_mut("lstm", self.lstm.blocks_mut()));
        out.extend(prefixed_mut("proj", self.proj.blocks_mut()));
        out
    }
}
