//! Hybrid encoder: a small residual CNN stem over the image + trimap plane
//! (features at 1/2 and 1/4 resolution), then four guided transformer stages
//! that each halve resolution and double channels, yielding a six-level
//! feature pyramid.

use ndarray::{Array3, ArrayD};
use rand_chacha::ChaCha8Rng;

use crate::attention::{StageCfg, TgtbStage};
use crate::autodiff::{Scalar, Var};
use crate::error::{Error, Result};
use crate::model::NetworkConfig;
use crate::nn::{ChannelNormLayer, Conv2dLayer, ForwardCtx, ParamStore, ResidualBlock};
use crate::tri_token::{self, TriTokenSet};
use crate::types::{ImageRgb, Trimap, TrimapLabel};

/// Input spatial dims must be divisible by this (stem and stage strides).
pub const MIN_INPUT_DIVISOR: usize = 32;

/// First two stages of the residual UNet encoder.
pub struct CnnLocalExtractor {
    stem_conv: Conv2dLayer,
    stem_norm: ChannelNormLayer,
    block1: ResidualBlock,
    down: ResidualBlock,
    block2: ResidualBlock,
}

impl CnnLocalExtractor {
    pub fn new<F: Scalar>(
        params: &mut ParamStore<F>,
        name: &str,
        c1: usize,
        c2: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        CnnLocalExtractor {
            stem_conv: Conv2dLayer::new(params, &format!("{name}.stem_conv"), 4, c1, 3, 2, rng),
            stem_norm: ChannelNormLayer::new(params, &format!("{name}.stem_norm"), c1),
            block1: ResidualBlock::new(params, &format!("{name}.block1"), c1, c1, 1, rng),
            down: ResidualBlock::new(params, &format!("{name}.down"), c1, c2, 2, rng),
            block2: ResidualBlock::new(params, &format!("{name}.block2"), c2, c2, 1, rng),
        }
    }

    /// `(4, H, W) -> [(c1, H/2, W/2), (c2, H/4, W/4)]`.
    pub fn forward<F: Scalar>(&self, ctx: &mut ForwardCtx<'_, F>, input: Var) -> (Var, Var) {
        let h = self.stem_conv.forward(ctx, input);
        let h = self.stem_norm.forward(ctx, h);
        let h = ctx.g.relu(h);
        let s1 = self.block1.forward(ctx, h);
        let h = self.down.forward(ctx, s1);
        let s2 = self.block2.forward(ctx, h);
        (s1, s2)
    }
}

/// One pyramid level bound into the current graph.
#[derive(Debug, Clone, Copy)]
pub struct PyramidLevel {
    pub var: Var,
    pub channels: usize,
    pub h: usize,
    pub w: usize,
}

/// Shallow-to-deep feature pyramid: stem levels then the four stage outputs.
pub struct FeaturePyramid {
    pub levels: Vec<PyramidLevel>,
}

pub struct Encoder {
    pub cnn: CnnLocalExtractor,
    pub stages: Vec<TgtbStage>,
}

impl Encoder {
    pub fn new<F: Scalar>(
        params: &mut ParamStore<F>,
        cfg: &NetworkConfig,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let [c1, c2] = cfg.stem_channels();
        let cnn = CnnLocalExtractor::new(params, "encoder.cnn", c1, c2, rng);
        let stages = (0..4)
            .map(|i| {
                let stage_cfg = StageCfg {
                    dim: cfg.embed_dims[i],
                    num_heads: cfg.num_heads[i],
                    window: cfg.window_size,
                    mlp_ratio: cfg.mlp_ratio,
                    num_blocks: cfg.blocks_per_stage[i],
                    tri_token_period: cfg.tri_token_period,
                    tri_token_enabled: cfg.use_tgtb && cfg.tri_token_stages[i],
                    shifted_windows: cfg.use_shifted_windows,
                    rel_bias: cfg.use_rel_pos_bias,
                };
                TgtbStage::new(params, &format!("encoder.stage{}", i + 1), &stage_cfg, rng)
            })
            .collect();
        Encoder { cnn, stages }
    }
}

/// Stacks normalized RGB with the 0/128/255 trimap plane scaled to `[0, 1]`.
pub fn input_tensor<F: Scalar>(image: &ImageRgb, trimap: &Trimap) -> ArrayD<F> {
    let (h, w) = image.shape2();
    let mut input = Array3::<F>::zeros((4, h, w));
    for r in 0..h {
        for c in 0..w {
            for ch in 0..3 {
                input[(ch, r, c)] = F::of(image.data[(r, c, ch)] as f64);
            }
            let code = match trimap.label(r, c) {
                TrimapLabel::Bg => 0.0,
                TrimapLabel::Unk => 128.0,
                TrimapLabel::Fg => 255.0,
            };
            input[(3, r, c)] = F::of(code / 255.0);
        }
    }
    input.into_dyn()
}

/// Runs the full encoder. Tri-token maps are regenerated per stage grid by
/// nearest-neighbor label resampling and expansion with that stage's tokens.
pub fn encode<F: Scalar>(
    ctx: &mut ForwardCtx<'_, F>,
    encoder: &Encoder,
    token_sets: &[Option<TriTokenSet>; 4],
    image: &ImageRgb,
    trimap: &Trimap,
) -> Result<FeaturePyramid> {
    let (h, w) = image.shape2();
    if h % MIN_INPUT_DIVISOR != 0 || w % MIN_INPUT_DIVISOR != 0 {
        return Err(Error::ShapeMismatch {
            context: format!("encoder input (must be divisible by {MIN_INPUT_DIVISOR})"),
            expected: vec![MIN_INPUT_DIVISOR],
            actual: vec![h, w],
        });
    }
    if trimap.shape2() != (h, w) {
        return Err(Error::ShapeMismatch {
            context: "encoder trimap".into(),
            expected: vec![h, w],
            actual: vec![trimap.height(), trimap.width()],
        });
    }

    let input = ctx.g.constant(input_tensor::<F>(image, trimap));
    let (s1, s2) = encoder.cnn.forward(ctx, input);
    let mut levels = vec![
        PyramidLevel {
            var: s1,
            channels: ctx.g.value(s1).shape()[0],
            h: h / 2,
            w: w / 2,
        },
        PyramidLevel {
            var: s2,
            channels: ctx.g.value(s2).shape()[0],
            h: h / 4,
            w: w / 4,
        },
    ];

    let (mut x, mut gh, mut gw) = (s2, h / 4, w / 4);
    for (i, stage) in encoder.stages.iter().enumerate() {
        let tri_map = match (&token_sets[i], stage.tri_token_block_count() > 0) {
            (Some(set), true) => {
                let tokens = tri_token::expand(ctx, set, trimap, gh, gw);
                Some(ctx.g.tokens_to_chw(tokens, gh, gw))
            }
            _ => None,
        };
        let (out, oh, ow) = stage.forward(ctx, x, gh, gw, tri_map);
        x = out;
        gh = oh;
        gw = ow;
        levels.push(PyramidLevel {
            var: x,
            channels: ctx.g.value(x).shape()[0],
            h: gh,
            w: gw,
        });
    }
    Ok(FeaturePyramid { levels })
}
