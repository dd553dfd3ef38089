//! GRU decoder with one coverage-attention head per encoder scale.
//!
//! Per step `t`, for every scale `s` with annotations `a_i` (`i` over the
//! `L = H×W` positions):
//!
//! ```text
//! F      = Q_s ⊛ β_t                         (k×k conv over the 2-D β map)
//! e_i    = v_s · tanh(W_s h_{t-1} + U_s a_i + V_s f_i)
//! α      = softmax(e)
//! c_s    = Σ α_i a_i,   β_{t+1} = β_t + α
//! ```
//!
//! The three contexts are concatenated into `c_t`, the GRU consumes
//! `[E y_{t-1}; c_t]`, and the logits are `W_o (E y_{t-1} + W_h h_t + W_c c_t)`.

use crate::encoder::EncodedFeatures;
use crate::graph::{Graph, Var};
use crate::model::ModelError;
use crate::params::{Bound, Init, ParamId, ParamStore};
use crate::tensor::{Tensor, TensorError};

pub const SCALES: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecoderConfig {
    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub attn_dim: usize,
    pub coverage_channels: usize,
    pub coverage_kernel: usize,
    pub max_decode_len: usize,
    pub coverage: bool,
    /// Use one set of attention weights for all three scales.
    pub share_attention: bool,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 64,
            embed_dim: 64,
            attn_dim: 32,
            coverage_channels: 32,
            coverage_kernel: 5,
            max_decode_len: 200,
            coverage: true,
            share_attention: false,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        for (name, v) in [
            ("hidden_dim", self.hidden_dim),
            ("embed_dim", self.embed_dim),
            ("attn_dim", self.attn_dim),
            ("coverage_channels", self.coverage_channels),
            ("coverage_kernel", self.coverage_kernel),
            ("max_decode_len", self.max_decode_len),
        ] {
            if v == 0 {
                return Err(ModelError::Config(format!("decoder {name} must be at least 1")));
            }
        }
        if self.coverage_kernel.is_multiple_of(2) {
            return Err(ModelError::Config(format!(
                "decoder coverage_kernel must be odd, got {}",
                self.coverage_kernel
            )));
        }
        Ok(())
    }
}

/// Attention weights of one scale.
#[derive(Debug, Clone, Copy)]
pub struct ScaleAttentionParams {
    pub w_a: ParamId,
    pub u_a: ParamId,
    pub u_f: ParamId,
    pub v_a: ParamId,
    pub q: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct GruParams {
    w_z: ParamId,
    w_r: ParamId,
    w_h: ParamId,
    u_z: ParamId,
    u_r: ParamId,
    u_h: ParamId,
    b_z: ParamId,
    b_r: ParamId,
    b_h: ParamId,
}

/// One scale's annotations laid out `[C×L]`, plus the step-invariant
/// projection `U_a a` (`[n'×L]`).
#[derive(Debug, Clone, Copy)]
pub struct ScaleAnnotations {
    pub a: Var,
    pub ua: Var,
    pub height: usize,
    pub width: usize,
}

impl ScaleAnnotations {
    pub fn positions(&self) -> usize {
        self.height * self.width
    }
}

#[derive(Debug, Clone, Copy)]
pub struct PreparedFeatures {
    pub scales: [ScaleAnnotations; SCALES],
}

/// Coverage accumulator β and the attention history of one scale.
#[derive(Debug, Clone)]
pub struct CoverageState {
    pub beta: Var,
    pub alphas: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct DecoderState {
    pub h: Var,
    pub coverage: [CoverageState; SCALES],
    pub prev_token: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct AttendOutput {
    pub energies: Var,
    pub alpha: Var,
    pub context: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct StepOutput {
    pub logits: Var,
    pub contexts: [Var; SCALES],
}

#[derive(Debug, Clone)]
pub struct Decoder {
    cfg: DecoderConfig,
    vocab_size: usize,
    channels: usize,
    w_ini: ParamId,
    embedding: ParamId,
    gru: GruParams,
    scales: [ScaleAttentionParams; SCALES],
    w_hout: ParamId,
    w_cout: ParamId,
    w_out: ParamId,
}

fn matrix(store: &mut ParamStore, init: &mut Init, name: String, rows: usize, cols: usize) -> ParamId {
    store.add(name, init.uniform(&[rows, cols], cols))
}

impl Decoder {
    /// `channels` is the feature width `C` shared by all encoder scales.
    pub fn new(
        cfg: &DecoderConfig,
        vocab_size: usize,
        channels: usize,
        store: &mut ParamStore,
        init: &mut Init,
    ) -> Result<Self, ModelError> {
        cfg.validate()?;
        let (n, m, na, q, k) = (
            cfg.hidden_dim,
            cfg.embed_dim,
            cfg.attn_dim,
            cfg.coverage_channels,
            cfg.coverage_kernel,
        );
        let w_ini = matrix(store, init, "decoder.w_ini".into(), n, channels);
        // One-hot input: fan-in of a lookup row is 1.
        let embedding = store.add("decoder.embedding", init.uniform(&[vocab_size, m], 1));
        let input = m + SCALES * channels;
        let gru = GruParams {
            w_z: matrix(store, init, "decoder.gru.w_z".into(), n, input),
            w_r: matrix(store, init, "decoder.gru.w_r".into(), n, input),
            w_h: matrix(store, init, "decoder.gru.w_h".into(), n, input),
            u_z: matrix(store, init, "decoder.gru.u_z".into(), n, n),
            u_r: matrix(store, init, "decoder.gru.u_r".into(), n, n),
            u_h: matrix(store, init, "decoder.gru.u_h".into(), n, n),
            b_z: store.add("decoder.gru.b_z", init.zeros(&[n])),
            b_r: store.add("decoder.gru.b_r", init.zeros(&[n])),
            b_h: store.add("decoder.gru.b_h", init.zeros(&[n])),
        };
        let mut make_scale = |prefix: String| ScaleAttentionParams {
            w_a: matrix(store, init, format!("{prefix}.w_a"), na, n),
            u_a: matrix(store, init, format!("{prefix}.u_a"), na, channels),
            u_f: matrix(store, init, format!("{prefix}.u_f"), na, q),
            v_a: matrix(store, init, format!("{prefix}.v_a"), 1, na),
            q: store.add(format!("{prefix}.q"), init.uniform(&[q, 1, k, k], k * k)),
        };
        let scales = if cfg.share_attention {
            let shared = make_scale("decoder.attn".into());
            [shared; SCALES]
        } else {
            std::array::from_fn(|s| make_scale(format!("decoder.attn{}", s + 1)))
        };
        let w_hout = matrix(store, init, "decoder.out.w_h".into(), m, n);
        let w_cout = matrix(store, init, "decoder.out.w_c".into(), m, SCALES * channels);
        let w_out = matrix(store, init, "decoder.out.w_o".into(), vocab_size, m);
        Ok(Self {
            cfg: cfg.clone(),
            vocab_size,
            channels,
            w_ini,
            embedding,
            gru,
            scales,
            w_hout,
            w_cout,
            w_out,
        })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.cfg
    }

    pub fn set_coverage(&mut self, on: bool) {
        self.cfg.coverage = on;
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn scale_params(&self, s: usize) -> &ScaleAttentionParams {
        &self.scales[s]
    }

    /// Output projections `W_h`, `W_c`, `W_o`.
    pub fn output_params(&self) -> [ParamId; 3] {
        [self.w_hout, self.w_cout, self.w_out]
    }

    /// Lays out each scale as `[C×L]` and precomputes `U_a a`.
    pub fn prepare(&self, g: &mut Graph, p: &Bound, feats: &EncodedFeatures) -> Result<PreparedFeatures, ModelError> {
        let mut out = Vec::with_capacity(SCALES);
        for (s, map) in feats.scales().into_iter().enumerate() {
            let shape = g.shape(map).to_vec();
            if shape.len() != 4 || shape[0] != 1 || shape[1] != self.channels {
                return Err(TensorError::Shape {
                    op: "decoder.prepare",
                    detail: format!("scale {} has shape {shape:?}, expected [1, {}, H, W]", s + 1, self.channels),
                }
                .into());
            }
            let (height, width) = (shape[2], shape[3]);
            let a = g.reshape(map, &[self.channels, height * width])?;
            let ua = g.matmul(p[self.scales[s].u_a], a)?;
            out.push(ScaleAnnotations { a, ua, height, width });
        }
        Ok(PreparedFeatures {
            scales: [out[0], out[1], out[2]],
        })
    }

    /// `h_0 = tanh(W_ini ā)` with `ā` the mean annotation of the coarsest
    /// scale; β starts at zero everywhere.
    pub fn init_state(&self, g: &mut Graph, p: &Bound, prep: &PreparedFeatures, sos: usize) -> Result<DecoderState, ModelError> {
        let coarse = prep.scales[SCALES - 1];
        let summed = g.sum_axis(coarse.a, 1)?;
        let mean = g.scale(summed, 1.0 / coarse.positions() as f64);
        let pre = g.matmul(p[self.w_ini], mean)?;
        let h = g.tanh(pre);
        let coverage = std::array::from_fn(|s| CoverageState {
            beta: g.constant(Tensor::zeros(&[prep.scales[s].positions()])),
            alphas: Vec::new(),
        });
        Ok(DecoderState {
            h,
            coverage,
            prev_token: sos,
        })
    }

    /// Coverage attention for scale `s`. Updates `cov` in place.
    pub fn attend(
        &self,
        g: &mut Graph,
        p: &Bound,
        s: usize,
        ann: &ScaleAnnotations,
        cov: &mut CoverageState,
        h_prev: Var,
    ) -> Result<AttendOutput, ModelError> {
        let positions = ann.positions();
        if g.shape(cov.beta) != [positions] {
            return Err(TensorError::Shape {
                op: "attend",
                detail: format!("coverage has shape {:?} but annotations have {positions} positions", g.shape(cov.beta)),
            }
            .into());
        }
        let sp = &self.scales[s];
        let wh = g.matmul(p[sp.w_a], h_prev)?;
        let mut pre = g.add_column(ann.ua, wh)?;
        if self.cfg.coverage {
            let k = self.cfg.coverage_kernel;
            let beta_map = g.reshape(cov.beta, &[1, 1, ann.height, ann.width])?;
            let f = g.conv2d(beta_map, p[sp.q], None, (1, 1), (k / 2, k / 2))?;
            let f = g.reshape(f, &[self.cfg.coverage_channels, positions])?;
            let uf = g.matmul(p[sp.u_f], f)?;
            pre = g.add(pre, uf)?;
        }
        let act = g.tanh(pre);
        let e = g.matmul(p[sp.v_a], act)?;
        let energies = g.reshape(e, &[positions])?;
        let alpha = g.softmax(energies, 0)?;
        let context = g.matmul(ann.a, alpha)?;
        cov.beta = g.add(cov.beta, alpha)?;
        cov.alphas.push(alpha);
        Ok(AttendOutput {
            energies,
            alpha,
            context,
        })
    }

    /// One decoding step consuming `token` (the previous output).
    pub fn step(
        &self,
        g: &mut Graph,
        p: &Bound,
        prep: &PreparedFeatures,
        state: &DecoderState,
        token: usize,
    ) -> Result<(StepOutput, DecoderState), ModelError> {
        if token >= self.vocab_size {
            return Err(ModelError::InvalidToken {
                id: token,
                vocab: self.vocab_size,
            });
        }
        let mut next = state.clone();
        let mut contexts = Vec::with_capacity(SCALES);
        for s in 0..SCALES {
            let out = self.attend(g, p, s, &prep.scales[s], &mut next.coverage[s], state.h)?;
            contexts.push(out.context);
        }
        let c = g.concat(&contexts, 0)?;
        let emb = g.embedding(p[self.embedding], token)?;
        let u = g.concat(&[emb, c], 0)?;
        let h = self.gru_cell(g, p, u, state.h)?;

        let proj_h = g.matmul(p[self.w_hout], h)?;
        let proj_c = g.matmul(p[self.w_cout], c)?;
        let sum = g.add(emb, proj_h)?;
        let sum = g.add(sum, proj_c)?;
        let logits = g.matmul(p[self.w_out], sum)?;

        next.h = h;
        next.prev_token = token;
        Ok((
            StepOutput {
                logits,
                contexts: [contexts[0], contexts[1], contexts[2]],
            },
            next,
        ))
    }

    fn gru_cell(&self, g: &mut Graph, p: &Bound, u: Var, h: Var) -> Result<Var, TensorError> {
        let gp = &self.gru;
        let gate = |g: &mut Graph, w: ParamId, uu: ParamId, b: ParamId, hh: Var| -> Result<Var, TensorError> {
            let x = g.matmul(p[w], u)?;
            let r = g.matmul(p[uu], hh)?;
            let s = g.add(x, r)?;
            g.add(s, p[b])
        };
        let z_pre = gate(g, gp.w_z, gp.u_z, gp.b_z, h)?;
        let z = g.sigmoid(z_pre);
        let r_pre = gate(g, gp.w_r, gp.u_r, gp.b_r, h)?;
        let r = g.sigmoid(r_pre);
        let rh = g.mul(r, h)?;
        let cand_pre = gate(g, gp.w_h, gp.u_h, gp.b_h, rh)?;
        let cand = g.tanh(cand_pre);
        // (1 - z) ⊙ h + z ⊙ h̃
        let delta = g.sub(cand, h)?;
        let step = g.mul(z, delta)?;
        g.add(h, step)
    }
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_prefers_lowest_on_ties() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax(&[0.0, 0.0]), 0);
    }

    #[test]
    fn config_validation() {
        let mut cfg = DecoderConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.coverage_kernel = 4;
        assert!(cfg.validate().is_err());
        cfg.coverage_kernel = 3;
        cfg.hidden_dim = 0;
        assert!(cfg.validate().is_err());
    }
}
