//! The full recognizer: encoder, decoder and their parameters.

use thiserror::Error;

use crate::data::GrayMap;
use crate::decoder::{argmax, Decoder, DecoderConfig, PreparedFeatures, SCALES};
use crate::encoder::{Encoder, EncoderConfig};
use crate::exec::Exec;
use crate::graph::{Graph, Var};
use crate::params::{Bound, Init, ParamStore};
use crate::tensor::{Tensor, TensorError};
use crate::vocab::Vocabulary;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("image shape {shape:?} is not [1, 1, H, W] with H and W positive multiples of {factor} (minimum {factor}x{factor}); pad it first")]
    ImageSize { shape: Vec<usize>, factor: usize },
    #[error("token id {id} out of range for vocabulary of {vocab}")]
    InvalidToken { id: usize, vocab: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("target sequence is empty")]
    EmptyTarget,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
}

/// Result of greedy decoding.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    /// Emitted tokens, sentinels excluded.
    pub tokens: Vec<usize>,
    /// Number of decoder steps run (including the one emitting `<eol>`).
    pub steps: usize,
    /// Decoding stopped at `max_decode_len` without emitting `<eol>`.
    pub truncated: bool,
    /// Per step, the attention map of each scale (finest first).
    pub attention: Vec<[GrayMap; SCALES]>,
}

/// A forward unroll over one target sequence.
#[derive(Debug, Clone)]
pub struct Unrolled {
    /// Mean per-step cross-entropy.
    pub loss: Var,
    /// Token fed to the decoder at each step.
    pub inputs: Vec<usize>,
    pub step_losses: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct Model {
    cfg: ModelConfig,
    vocab: Vocabulary,
    params: ParamStore,
    encoder: Encoder,
    decoder: Decoder,
    exec: Exec,
}

impl Model {
    pub fn new(cfg: &ModelConfig, vocab: &Vocabulary, seed: u64) -> Result<Self, ModelError> {
        let mut params = ParamStore::new();
        let mut init = Init::new(seed);
        let encoder = Encoder::new(&cfg.encoder, &mut params, &mut init)?;
        let decoder = Decoder::new(
            &cfg.decoder,
            vocab.len(),
            cfg.encoder.reduced_channels,
            &mut params,
            &mut init,
        )?;
        Ok(Self {
            cfg: cfg.clone(),
            vocab: vocab.clone(),
            params,
            encoder,
            decoder,
            exec: Exec::default(),
        })
    }

    pub fn with_exec(mut self, exec: Exec) -> Self {
        self.exec = exec;
        self
    }

    pub fn exec(&self) -> Exec {
        self.exec
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn decoder(&self) -> &Decoder {
        &self.decoder
    }

    pub fn set_coverage(&mut self, on: bool) {
        self.cfg.decoder.coverage = on;
        self.decoder.set_coverage(on);
    }

    pub fn graph(&self) -> Graph {
        Graph::with_exec(self.exec)
    }

    /// Encodes `image` (`[1,1,H,W]`) and prepares the decoder annotations.
    pub fn prepare(&self, g: &mut Graph, p: &Bound, image: &Tensor) -> Result<PreparedFeatures, ModelError> {
        let x = g.constant(image.clone());
        let feats = self.encoder.encode(g, p, x)?;
        self.decoder.prepare(g, p, &feats)
    }

    /// Unrolls the decoder over `target` (which must end with `<eol>`),
    /// choosing each step's input with `choose(step, truth_prev, argmax_prev)`.
    /// Step 0 always consumes `<sos>`.
    pub fn unroll(
        &self,
        g: &mut Graph,
        p: &Bound,
        prep: &PreparedFeatures,
        target: &[usize],
        mut choose: impl FnMut(usize, usize, usize) -> usize,
    ) -> Result<Unrolled, ModelError> {
        if target.is_empty() {
            return Err(ModelError::EmptyTarget);
        }
        let sos = self.vocab.sos_id();
        let mut state = self.decoder.init_state(g, p, prep, sos)?;
        let mut inputs = Vec::with_capacity(target.len());
        let mut step_losses = Vec::with_capacity(target.len());
        let mut prev_pred = sos;
        for (t, &truth) in target.iter().enumerate() {
            let input = if t == 0 {
                sos
            } else {
                choose(t, target[t - 1], prev_pred)
            };
            let (out, next) = self.decoder.step(g, p, prep, &state, input)?;
            prev_pred = argmax(g.data(out.logits));
            step_losses.push(g.cross_entropy(out.logits, truth)?);
            inputs.push(input);
            state = next;
        }
        let stacked = g.concat(&step_losses, 0)?;
        let total = g.sum(stacked);
        let loss = g.scale(total, 1.0 / target.len() as f64);
        Ok(Unrolled {
            loss,
            inputs,
            step_losses,
        })
    }

    /// Greedy decoding until `<eol>` or `max_decode_len` steps.
    pub fn greedy_decode(&self, image: &Tensor) -> Result<Decoded, ModelError> {
        let mut g = self.graph();
        let p = self.params.bind(&mut g);
        let prep = self.prepare(&mut g, &p, image)?;
        let mut state = self.decoder.init_state(&mut g, &p, &prep, self.vocab.sos_id())?;
        let mut token = self.vocab.sos_id();
        let mut out = Decoded {
            tokens: Vec::new(),
            steps: 0,
            truncated: true,
            attention: Vec::new(),
        };
        for _ in 0..self.cfg.decoder.max_decode_len {
            let (step, next) = self.decoder.step(&mut g, &p, &prep, &state, token)?;
            state = next;
            out.steps += 1;
            out.attention.push(std::array::from_fn(|s| {
                let ann = &prep.scales[s];
                let alpha = *state.coverage[s].alphas.last().expect("attend pushed alpha");
                GrayMap::new(ann.height, ann.width, g.data(alpha).to_vec())
            }));
            token = argmax(g.data(step.logits));
            if token == self.vocab.eol_id() {
                out.truncated = false;
                break;
            }
            if !self.vocab.is_sentinel(token) {
                out.tokens.push(token);
            }
        }
        Ok(out)
    }

    pub fn stem_maps(&self, image: &Tensor) -> Result<Vec<GrayMap>, ModelError> {
        self.encoder.stem_maps(&self.params, image)
    }
}
