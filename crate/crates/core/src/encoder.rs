//! Multi-scale dense convolutional encoder.
//!
//! Topology (input `H×W`, all sizes multiples of [`DOWNSAMPLE`]):
//!
//! ```text
//! image ─ 7×7/2 stem ─ maxpool ─ block1 ─┬─ 1×1 reduce ───────────────► + ─ c1  (H/4)
//!                                        └ 1×1 ─ maxpool ─ block2 ─┬─ 1×1 reduce ──► + ─ c2  (H/8)
//!                                                                  └ 1×1 ─ avgpool ─ block3 ─ 1×1 reduce ─ c3 (H/16)
//! ```
//!
//! Fusion runs top-down: `c3` is upsampled 2× and added into the middle
//! reduction, and that sum is upsampled 2× and added into the finest one.

use crate::data::GrayMap;
use crate::graph::{Graph, Var};
use crate::model::ModelError;
use crate::params::{Bound, Init, ParamId, ParamStore};
use crate::tensor::{Tensor, TensorError};

/// Total spatial reduction from the input to the coarsest map.
pub const DOWNSAMPLE: usize = 16;
pub const STEM_KERNEL: usize = 7;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderConfig {
    pub stem_channels: usize,
    pub growth_rate: usize,
    pub layers_per_block: [usize; 3],
    pub reduced_channels: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            stem_channels: 48,
            growth_rate: 4,
            layers_per_block: [2, 2, 2],
            reduced_channels: 16,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let counts = [
            ("stem_channels", self.stem_channels),
            ("growth_rate", self.growth_rate),
            ("layers_per_block[0]", self.layers_per_block[0]),
            ("layers_per_block[1]", self.layers_per_block[1]),
            ("layers_per_block[2]", self.layers_per_block[2]),
            ("reduced_channels", self.reduced_channels),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(ModelError::Config(format!("encoder {name} must be at least 1")));
            }
        }
        Ok(())
    }

    /// Channel count leaving each dense block.
    pub fn block_out_channels(&self) -> [usize; 3] {
        let mut c = self.stem_channels;
        let mut out = [0; 3];
        for (b, o) in out.iter_mut().enumerate() {
            c += self.layers_per_block[b] * self.growth_rate;
            *o = c;
        }
        out
    }
}

/// The three fused maps, finest first. Each is `[N, reduced, H_s, W_s]`.
#[derive(Debug, Clone, Copy)]
pub struct EncodedFeatures {
    pub c1: Var,
    pub c2: Var,
    pub c3: Var,
}

impl EncodedFeatures {
    pub fn scales(&self) -> [Var; 3] {
        [self.c1, self.c2, self.c3]
    }
}

/// Intermediate maps exposed for inspection.
#[derive(Debug, Clone, Copy)]
pub struct EncoderTrace {
    pub stem: Var,
    /// 1×1-reduced block outputs before fusion, finest first.
    pub reduced: [Var; 3],
    pub features: EncodedFeatures,
}

#[derive(Debug, Clone, Copy)]
struct ConvParams {
    weight: ParamId,
    bias: ParamId,
}

impl ConvParams {
    fn new(store: &mut ParamStore, init: &mut Init, name: &str, cout: usize, cin: usize, k: usize) -> Self {
        let weight = store.add(format!("{name}.weight"), init.uniform(&[cout, cin, k, k], cin * k * k));
        let bias = store.add(format!("{name}.bias"), init.zeros(&[cout]));
        Self { weight, bias }
    }

    fn apply(&self, g: &mut Graph, p: &Bound, x: Var, stride: usize, pad: usize) -> Result<Var, TensorError> {
        g.conv2d(x, p[self.weight], Some(p[self.bias]), (stride, stride), (pad, pad))
    }
}

#[derive(Debug, Clone)]
pub struct Encoder {
    cfg: EncoderConfig,
    stem: ConvParams,
    blocks: [Vec<ConvParams>; 3],
    transitions: [ConvParams; 2],
    reductions: [ConvParams; 3],
}

/// One dense block: every layer applies `tanh` then a 3×3 same-padded
/// convolution to the channel-concatenation of the block input and all
/// earlier layer outputs, and appends its `growth` channels.
pub fn dense_block(
    g: &mut Graph,
    input: Var,
    layers: &[(Var, Option<Var>)],
) -> Result<Var, TensorError> {
    let mut cur = input;
    for &(w, b) in layers {
        let act = g.tanh(cur);
        let grown = g.conv2d(act, w, b, (1, 1), (1, 1))?;
        cur = g.concat(&[cur, grown], 1)?;
    }
    Ok(cur)
}

impl Encoder {
    pub fn new(cfg: &EncoderConfig, store: &mut ParamStore, init: &mut Init) -> Result<Self, ModelError> {
        cfg.validate()?;
        let stem = ConvParams::new(store, init, "encoder.stem", cfg.stem_channels, 1, STEM_KERNEL);
        let outs = cfg.block_out_channels();
        let ins = [cfg.stem_channels, outs[0], outs[1]];
        let blocks: [Vec<ConvParams>; 3] = std::array::from_fn(|b| {
            (0..cfg.layers_per_block[b])
                .map(|l| {
                    ConvParams::new(
                        store,
                        init,
                        &format!("encoder.block{}.layer{}", b + 1, l + 1),
                        cfg.growth_rate,
                        ins[b] + l * cfg.growth_rate,
                        3,
                    )
                })
                .collect()
        });
        let transitions = std::array::from_fn(|t| {
            ConvParams::new(store, init, &format!("encoder.transition{}", t + 1), outs[t], outs[t], 1)
        });
        let reductions = std::array::from_fn(|s| {
            ConvParams::new(store, init, &format!("encoder.reduce{}", s + 1), cfg.reduced_channels, outs[s], 1)
        });
        Ok(Self {
            cfg: cfg.clone(),
            stem,
            blocks,
            transitions,
            reductions,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn check_input(shape: &[usize]) -> Result<(), ModelError> {
        let ok = shape.len() == 4
            && shape[1] == 1
            && shape[2] >= DOWNSAMPLE
            && shape[3] >= DOWNSAMPLE
            && shape[2].is_multiple_of(DOWNSAMPLE)
            && shape[3].is_multiple_of(DOWNSAMPLE);
        if ok {
            Ok(())
        } else {
            Err(ModelError::ImageSize {
                shape: shape.to_vec(),
                factor: DOWNSAMPLE,
            })
        }
    }

    fn stem(&self, g: &mut Graph, p: &Bound, image: Var) -> Result<Var, ModelError> {
        Self::check_input(g.shape(image))?;
        Ok(self.stem.apply(g, p, image, 2, STEM_KERNEL / 2)?)
    }

    fn block(&self, g: &mut Graph, p: &Bound, b: usize, x: Var) -> Result<Var, TensorError> {
        let layers: Vec<_> = self.blocks[b]
            .iter()
            .map(|l| (p[l.weight], Some(p[l.bias])))
            .collect();
        dense_block(g, x, &layers)
    }

    pub fn encode_traced(&self, g: &mut Graph, p: &Bound, image: Var) -> Result<EncoderTrace, ModelError> {
        let stem = self.stem(g, p, image)?;
        let x = g.max_pool2d(stem, (2, 2), (2, 2))?;
        let b1 = self.block(g, p, 0, x)?;
        let t1 = self.transitions[0].apply(g, p, b1, 1, 0)?;
        let x = g.max_pool2d(t1, (2, 2), (2, 2))?;
        let b2 = self.block(g, p, 1, x)?;
        let t2 = self.transitions[1].apply(g, p, b2, 1, 0)?;
        let x = g.avg_pool2d(t2, (2, 2), (2, 2))?;
        let b3 = self.block(g, p, 2, x)?;

        let r1 = self.reductions[0].apply(g, p, b1, 1, 0)?;
        let r2 = self.reductions[1].apply(g, p, b2, 1, 0)?;
        let r3 = self.reductions[2].apply(g, p, b3, 1, 0)?;

        let c3 = r3;
        let up3 = g.upsample2x(c3)?;
        let c2 = g.add(r2, up3)?;
        let up2 = g.upsample2x(c2)?;
        let c1 = g.add(r1, up2)?;
        Ok(EncoderTrace {
            stem,
            reduced: [r1, r2, r3],
            features: EncodedFeatures { c1, c2, c3 },
        })
    }

    pub fn encode(&self, g: &mut Graph, p: &Bound, image: Var) -> Result<EncodedFeatures, ModelError> {
        Ok(self.encode_traced(g, p, image)?.features)
    }

    /// First-layer feature maps of a `[1,1,H,W]` image, one per stem
    /// channel, each min-max normalized to `[0,1]` (constant maps become 0).
    pub fn stem_maps(&self, store: &ParamStore, image: &Tensor) -> Result<Vec<GrayMap>, ModelError> {
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let x = g.constant(image.clone());
        let stem = self.stem(&mut g, &p, x)?;
        let shape = g.shape(stem).to_vec();
        let (h, w) = (shape[2], shape[3]);
        Ok(g.data(stem)
            .chunks(h * w)
            .take(shape[1])
            .map(|plane| GrayMap::normalized(h, w, plane))
            .collect())
    }
}
