//! Window partitioning, scaled dot-product attention with and without
//! tri-token guidance, and the guided transformer block/stage stack.
//!
//! Blocks follow the pre-norm residual layout `x + MHSA(norm(x))`,
//! `x + MLP(norm(x))`. Odd blocks attend over cyclically shifted windows
//! (shift `M/2`); the effective window clamps to the grid so tiny stages run
//! a single window. Neither attention formula carries a positional term; an
//! optional learnable relative-position bias table can be enabled for
//! comparison.

use ndarray::{Array2, Array3};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{AttentionSpec, Graph, Scalar, Var};
use crate::nn::{normal_init, ForwardCtx, LayerNormLayer, Linear, Mlp, ParamId, ParamStore};

/// Additive logit that suppresses padded keys.
const MASK_NEG: f64 = -1e30;

/// Windows of an `(C, H, W)` feature map plus the bookkeeping to invert the
/// partitioning exactly (original extents and zero padding).
#[derive(Debug, Clone)]
pub struct WindowBatch<F: Scalar> {
    /// `(num_windows, m*m, C)`, windows and positions row-major.
    pub windows: Array3<F>,
    pub m: usize,
    pub orig_h: usize,
    pub orig_w: usize,
    pub padded_h: usize,
    pub padded_w: usize,
}

/// Splits a feature map into non-overlapping `m x m` tiles, zero-padding the
/// bottom/right when the extents do not divide.
pub fn window_partition<F: Scalar>(features: &Array3<F>, m: usize) -> WindowBatch<F> {
    let (c, h, w) = (features.shape()[0], features.shape()[1], features.shape()[2]);
    let padded_h = h.div_ceil(m) * m;
    let padded_w = w.div_ceil(m) * m;
    let (wy, wx) = (padded_h / m, padded_w / m);
    let mut windows = Array3::zeros((wy * wx, m * m, c));
    for win_y in 0..wy {
        for win_x in 0..wx {
            let wi = win_y * wx + win_x;
            for iy in 0..m {
                for ix in 0..m {
                    let (sy, sx) = (win_y * m + iy, win_x * m + ix);
                    if sy < h && sx < w {
                        for ci in 0..c {
                            windows[(wi, iy * m + ix, ci)] = features[(ci, sy, sx)];
                        }
                    }
                }
            }
        }
    }
    WindowBatch {
        windows,
        m,
        orig_h: h,
        orig_w: w,
        padded_h,
        padded_w,
    }
}

/// Exact inverse of [`window_partition`], cropping padded borders back off.
pub fn window_reverse<F: Scalar>(batch: &WindowBatch<F>) -> Array3<F> {
    let c = batch.windows.shape()[2];
    let m = batch.m;
    let wx = batch.padded_w / m;
    let mut out = Array3::zeros((c, batch.orig_h, batch.orig_w));
    for wi in 0..batch.windows.shape()[0] {
        let (win_y, win_x) = (wi / wx, wi % wx);
        for iy in 0..m {
            for ix in 0..m {
                let (sy, sx) = (win_y * m + iy, win_x * m + ix);
                if sy < batch.orig_h && sx < batch.orig_w {
                    for ci in 0..c {
                        out[(ci, sy, sx)] = batch.windows[(wi, iy * m + ix, ci)];
                    }
                }
            }
        }
    }
    out
}

fn single_window_attention<F: Scalar>(
    q: &Array2<F>,
    k: &Array2<F>,
    v: &Array2<F>,
) -> Array2<F> {
    let (t, d) = (q.shape()[0], q.shape()[1]);
    let mut graph = Graph::<F>::new();
    let qv = graph.constant(q.clone().into_shape(ndarray::IxDyn(&[1, t, d])).unwrap());
    let kv = graph.constant(k.clone().into_shape(ndarray::IxDyn(&[1, t, d])).unwrap());
    let vv = graph.constant(v.clone().into_shape(ndarray::IxDyn(&[1, t, d])).unwrap());
    let spec = AttentionSpec {
        num_heads: 1,
        scale: F::of(1.0 / (d as f64).sqrt()),
        key_bias: None,
        rel_bias: None,
    };
    let out = graph.window_attention(qv, kv, vv, spec);
    graph
        .value(out)
        .clone()
        .into_shape(ndarray::IxDyn(&[t, d]))
        .unwrap()
        .into_dimensionality()
        .unwrap()
}

/// Vanilla single-window attention: `softmax(QK^T / sqrt(d)) V` with the
/// softmax over keys. `Q`, `K`, `V` are `(tokens, d)` for one head.
pub fn attention<F: Scalar>(q: &Array2<F>, k: &Array2<F>, v: &Array2<F>) -> Array2<F> {
    single_window_attention(q, k, v)
}

/// Tri-token attention: `softmax((Q + T) K^T / sqrt(d)) V` where `T` holds
/// the per-position tri-token vectors of the window.
pub fn tri_token_attention<F: Scalar>(
    q: &Array2<F>,
    k: &Array2<F>,
    v: &Array2<F>,
    tri: &Array2<F>,
) -> Array2<F> {
    assert_eq!(q.shape(), tri.shape(), "tri-token map must align with Q");
    single_window_attention(&(q + tri), k, v)
}

/// Attention weight rows for one window (diagnostics and invariant tests).
pub fn attention_weights<F: Scalar>(q: &Array2<F>, k: &Array2<F>) -> Array2<F> {
    let (t, d) = (q.shape()[0], q.shape()[1]);
    let scale = F::of(1.0 / (d as f64).sqrt());
    let mut logits = q.dot(&k.t());
    logits.mapv_inplace(|x| x * scale);
    for i in 0..t {
        let mut row = logits.row_mut(i);
        let max = row.fold(F::neg_infinity(), |acc, &x| acc.max(x));
        let mut sum = F::zero();
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            sum += *x;
        }
        for x in row.iter_mut() {
            *x = *x / sum;
        }
    }
    logits
}

/// Static configuration of one transformer block.
#[derive(Debug, Clone)]
pub struct BlockCfg {
    pub dim: usize,
    pub num_heads: usize,
    pub window: usize,
    pub mlp_hidden: usize,
    pub shifted: bool,
    pub use_tri_token: bool,
    pub rel_bias: bool,
}

/// Tri-token guided transformer block.
pub struct TgtbBlock {
    cfg: BlockCfg,
    norm1: LayerNormLayer,
    qkv: Linear,
    proj: Linear,
    norm2: LayerNormLayer,
    mlp: Mlp,
    rel_table: Option<ParamId>,
}

impl TgtbBlock {
    pub fn new<F: Scalar>(
        params: &mut ParamStore<F>,
        name: &str,
        cfg: BlockCfg,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert_eq!(cfg.dim % cfg.num_heads, 0, "dim divisible by heads");
        let norm1 = LayerNormLayer::new(params, &format!("{name}.norm1"), cfg.dim);
        let qkv = Linear::new(params, &format!("{name}.qkv"), cfg.dim, 3 * cfg.dim, rng);
        let proj = Linear::new(params, &format!("{name}.proj"), cfg.dim, cfg.dim, rng);
        let norm2 = LayerNormLayer::new(params, &format!("{name}.norm2"), cfg.dim);
        let mlp = Mlp::new(params, &format!("{name}.mlp"), cfg.dim, cfg.mlp_hidden, rng);
        let rel_table = cfg.rel_bias.then(|| {
            let side = 2 * cfg.window - 1;
            params.add(
                format!("{name}.rel_bias"),
                normal_init(&[cfg.num_heads, side * side], 0.02, rng),
                true,
            )
        });
        TgtbBlock {
            cfg,
            norm1,
            qkv,
            proj,
            norm2,
            mlp,
            rel_table,
        }
    }

    pub fn uses_tri_token(&self) -> bool {
        self.cfg.use_tri_token
    }

    /// Relative-offset index map for an effective window of `m_eff`, indexing
    /// into the `(2*window - 1)^2` table.
    fn rel_index_map(&self, m_eff: usize) -> Vec<usize> {
        let side = 2 * self.cfg.window - 1;
        let t = m_eff * m_eff;
        let mut idx = Vec::with_capacity(t * t);
        for i in 0..t {
            let (iy, ix) = (i / m_eff, i % m_eff);
            for j in 0..t {
                let (jy, jx) = (j / m_eff, j % m_eff);
                let dy = iy as isize - jy as isize + self.cfg.window as isize - 1;
                let dx = ix as isize - jx as isize + self.cfg.window as isize - 1;
                idx.push(dy as usize * side + dx as usize);
            }
        }
        idx
    }

    /// Additive key mask for padded positions, rolled the same way as the
    /// features. `None` when nothing is padded.
    fn key_bias<F: Scalar>(
        h: usize,
        w: usize,
        hp: usize,
        wp: usize,
        shift: usize,
        m_eff: usize,
    ) -> Option<Array2<F>> {
        if hp == h && wp == w {
            return None;
        }
        let neg = F::of(MASK_NEG);
        let rolled = Array2::from_shape_fn((hp, wp), |(r, c)| {
            let sy = (r + shift) % hp;
            let sx = (c + shift) % wp;
            if sy < h && sx < w {
                F::zero()
            } else {
                neg
            }
        });
        let (wy, wx) = (hp / m_eff, wp / m_eff);
        let mut bias = Array2::zeros((wy * wx, m_eff * m_eff));
        for win_y in 0..wy {
            for win_x in 0..wx {
                let wi = win_y * wx + win_x;
                for iy in 0..m_eff {
                    for ix in 0..m_eff {
                        bias[(wi, iy * m_eff + ix)] =
                            rolled[(win_y * m_eff + iy, win_x * m_eff + ix)];
                    }
                }
            }
        }
        Some(bias)
    }

    /// `x` is `(h*w, C)` tokens; `tri_map` is the stage's tri-token map as a
    /// `(C, h, w)` tensor, consumed only by tri-token blocks.
    pub fn forward<F: Scalar>(
        &self,
        ctx: &mut ForwardCtx<'_, F>,
        x: Var,
        h: usize,
        w: usize,
        tri_map: Option<Var>,
    ) -> Var {
        let c = self.cfg.dim;
        let m_eff = self.cfg.window.min(h).min(w);
        let single_window = m_eff >= h && m_eff >= w;
        let shift = if self.cfg.shifted && !single_window {
            m_eff / 2
        } else {
            0
        };
        let hp = h.div_ceil(m_eff) * m_eff;
        let wp = w.div_ceil(m_eff) * m_eff;
        let (nw, t) = ((hp / m_eff) * (wp / m_eff), m_eff * m_eff);

        // Pad, roll, tile: shared by the features and the tri-token map.
        let to_windows = |ctx: &mut ForwardCtx<'_, F>, chw: Var| -> Var {
            let mut cur = chw;
            if hp > h || wp > w {
                cur = ctx.g.pad_bottom_right(cur, hp - h, wp - w);
            }
            if shift > 0 {
                cur = ctx.g.cyclic_shift(cur, shift as isize, shift as isize);
            }
            ctx.g.window_partition(cur, m_eff)
        };

        let residual = x;
        let xn = self.norm1.forward(ctx, x);
        let chw = ctx.g.tokens_to_chw(xn, h, w);
        let windows = to_windows(ctx, chw);
        let flat = ctx.g.reshape(windows, &[nw * t, c]);
        let qkv = self.qkv.forward(ctx, flat);
        let q = ctx.g.slice_cols(qkv, 0, c);
        let k = ctx.g.slice_cols(qkv, c, c);
        let v = ctx.g.slice_cols(qkv, 2 * c, c);
        let mut q3 = ctx.g.reshape(q, &[nw, t, c]);
        let k3 = ctx.g.reshape(k, &[nw, t, c]);
        let v3 = ctx.g.reshape(v, &[nw, t, c]);

        if self.cfg.use_tri_token {
            let tri = tri_map.expect("tri-token block needs a tri-token map");
            let tri_windows = to_windows(ctx, tri);
            q3 = ctx.g.add(q3, tri_windows);
        }

        let head_dim = c / self.cfg.num_heads;
        let spec = AttentionSpec {
            num_heads: self.cfg.num_heads,
            scale: F::of(1.0 / (head_dim as f64).sqrt()),
            key_bias: Self::key_bias(h, w, hp, wp, shift, m_eff),
            rel_bias: self.rel_table.map(|table| crate::autodiff::attn_rel_bias(
                ctx.p(table),
                self.rel_index_map(m_eff),
            )),
        };
        let attended = ctx.g.window_attention(q3, k3, v3, spec);
        let att_flat = ctx.g.reshape(attended, &[nw * t, c]);
        let projected = self.proj.forward(ctx, att_flat);
        let proj3 = ctx.g.reshape(projected, &[nw, t, c]);
        let mut rev = ctx.g.window_reverse(proj3, m_eff, hp, wp);
        if shift > 0 {
            rev = ctx.g.cyclic_shift(rev, -(shift as isize), -(shift as isize));
        }
        if hp > h || wp > w {
            rev = ctx.g.crop2d(rev, h, w);
        }
        let att_tokens = ctx.g.chw_to_tokens(rev);
        let x = ctx.g.add(residual, att_tokens);

        let xn2 = self.norm2.forward(ctx, x);
        let mlp_out = self.mlp.forward(ctx, xn2);
        ctx.g.add(x, mlp_out)
    }
}

/// One encoder stage: a run of blocks followed by 2x patch merging
/// (space-to-depth then a linear projection halving the stacked channels).
pub struct TgtbStage {
    pub blocks: Vec<TgtbBlock>,
    merge_norm: LayerNormLayer,
    merge_proj: Linear,
    dim: usize,
}

/// Per-stage settings derived from the network configuration.
#[derive(Debug, Clone)]
pub struct StageCfg {
    pub dim: usize,
    pub num_heads: usize,
    pub window: usize,
    pub mlp_ratio: f64,
    pub num_blocks: usize,
    /// Tri-token attention runs on block indices `b % period == 0` when the
    /// stage is enabled.
    pub tri_token_period: usize,
    pub tri_token_enabled: bool,
    pub shifted_windows: bool,
    pub rel_bias: bool,
}

impl TgtbStage {
    pub fn new<F: Scalar>(
        params: &mut ParamStore<F>,
        name: &str,
        cfg: &StageCfg,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert!(cfg.tri_token_period >= 1, "tri_token_period must be >= 1");
        let blocks = (0..cfg.num_blocks)
            .map(|b| {
                let block_cfg = BlockCfg {
                    dim: cfg.dim,
                    num_heads: cfg.num_heads,
                    window: cfg.window,
                    mlp_hidden: (cfg.dim as f64 * cfg.mlp_ratio).round() as usize,
                    shifted: cfg.shifted_windows && b % 2 == 1,
                    use_tri_token: cfg.tri_token_enabled && b % cfg.tri_token_period == 0,
                    rel_bias: cfg.rel_bias,
                };
                TgtbBlock::new(params, &format!("{name}.block{b}"), block_cfg, rng)
            })
            .collect();
        let merge_norm = LayerNormLayer::new(params, &format!("{name}.merge_norm"), 4 * cfg.dim);
        let merge_proj = Linear::new(
            params,
            &format!("{name}.merge_proj"),
            4 * cfg.dim,
            2 * cfg.dim,
            rng,
        );
        TgtbStage {
            blocks,
            merge_norm,
            merge_proj,
            dim: cfg.dim,
        }
    }

    pub fn tri_token_block_count(&self) -> usize {
        self.blocks.iter().filter(|b| b.uses_tri_token()).count()
    }

    /// `(C, h, w) -> (2C, ceil(h/2), ceil(w/2))`.
    pub fn forward<F: Scalar>(
        &self,
        ctx: &mut ForwardCtx<'_, F>,
        x_chw: Var,
        h: usize,
        w: usize,
        tri_map: Option<Var>,
    ) -> (Var, usize, usize) {
        let mut tokens = ctx.g.chw_to_tokens(x_chw);
        for block in &self.blocks {
            tokens = block.forward(ctx, tokens, h, w, tri_map);
        }
        let chw = ctx.g.tokens_to_chw(tokens, h, w);
        let s2d = ctx.g.space_to_depth2(chw);
        let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
        let merged_tokens = ctx.g.chw_to_tokens(s2d);
        let normed = self.merge_norm.forward(ctx, merged_tokens);
        let projected = self.merge_proj.forward(ctx, normed);
        let out = ctx.g.tokens_to_chw(projected, oh, ow);
        debug_assert_eq!(ctx.g.value(out).shape(), &[2 * self.dim, oh, ow]);
        (out, oh, ow)
    }
}
