//! Multi-scale global-guided fusion and the residual UNet decoder.
//!
//! For a pyramid triple `(T_prev, T_n, T_next)` the fusion runs, in order:
//! the non-background mask (at `T_prev`'s grid) gates `T_prev`, which is then
//! average-pool down-sampled 2x; the result is concatenated with `T_n` and a
//! 1x1 convolution aligns channels into `T_f`; `T_next` is globally average
//! pooled and squeezed by a shared FC trunk feeding two heads `gamma`/`beta`;
//! `T_f` is scaled per channel by `sigmoid(gamma)` and shifted by `beta`; a
//! 3x3 fusing convolution plus a skip connection from `T_n` closes the
//! module. Masking before pooling makes background suppression exact per
//! `T_prev` pixel.

use ndarray::{Array2, ArrayD};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Scalar, Var};
use crate::encoder::FeaturePyramid;
use crate::nn::{ChannelNormLayer, Conv2dLayer, ForwardCtx, Linear, ParamStore};
use crate::types::{Trimap, TrimapLabel};

/// Nearest-neighbor non-background mask (1 on FG and UNK) at a feature grid.
pub fn nonbg_mask_at<F: Scalar>(trimap: &Trimap, target_h: usize, target_w: usize) -> Array2<F> {
    let (h, w) = trimap.shape2();
    Array2::from_shape_fn((target_h, target_w), |(r, c)| {
        let sr = (((r as f64 + 0.5) * h as f64 / target_h as f64) as usize).min(h - 1);
        let sc = (((c as f64 + 0.5) * w as f64 / target_w as f64) as usize).min(w - 1);
        if trimap.indices()[(sr, sc)] == TrimapLabel::Bg as u8 {
            F::zero()
        } else {
            F::one()
        }
    })
}

pub struct MgfModule {
    align: Conv2dLayer,
    squeeze: Linear,
    fc_gamma: Linear,
    fc_beta: Linear,
    fuse: Conv2dLayer,
    c_prev: usize,
}

impl MgfModule {
    pub fn new<F: Scalar>(
        params: &mut ParamStore<F>,
        name: &str,
        c_prev: usize,
        c_n: usize,
        c_next: usize,
        squeeze_ratio: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let hidden = (c_next / squeeze_ratio).max(1);
        MgfModule {
            align: Conv2dLayer::new(params, &format!("{name}.align"), c_prev + c_n, c_n, 1, 1, rng),
            squeeze: Linear::new(params, &format!("{name}.squeeze"), c_next, hidden, rng),
            fc_gamma: Linear::new(params, &format!("{name}.fc_gamma"), hidden, c_n, rng),
            fc_beta: Linear::new(params, &format!("{name}.fc_beta"), hidden, c_n, rng),
            fuse: Conv2dLayer::new(params, &format!("{name}.fuse"), c_n, c_n, 3, 1, rng),
            c_prev,
        }
    }

    /// `t_prev` at 2x the grid of `t_n`, `t_next` at half; `nonbg` on
    /// `t_prev`'s grid. Output has `t_n`'s shape.
    pub fn forward<F: Scalar>(
        &self,
        ctx: &mut ForwardCtx<'_, F>,
        t_prev: Var,
        t_n: Var,
        t_next: Var,
        nonbg: &Array2<F>,
    ) -> Var {
        let prev_shape = ctx.g.value(t_prev).shape().to_vec();
        assert_eq!(prev_shape[0], self.c_prev, "t_prev channels");
        assert_eq!(
            (prev_shape[1], prev_shape[2]),
            (nonbg.shape()[0], nonbg.shape()[1]),
            "non-background mask grid"
        );
        let mask = ArrayD::from_shape_fn(
            ndarray::IxDyn(&[self.c_prev, prev_shape[1], prev_shape[2]]),
            |idx| nonbg[(idx[1], idx[2])],
        );
        let masked = ctx.g.mul_const(t_prev, &mask);
        let local = ctx.g.avg_pool2(masked);

        let cat = ctx.g.concat_channels(local, t_n);
        let t_f = self.align.forward(ctx, cat);

        let c_next = ctx.g.value(t_next).shape()[0];
        let stats = ctx.g.global_avg_pool(t_next);
        let stats_row = ctx.g.reshape(stats, &[1, c_next]);
        let hidden = self.squeeze.forward(ctx, stats_row);
        let hidden = ctx.g.relu(hidden);
        let gamma_row = self.fc_gamma.forward(ctx, hidden);
        let beta_row = self.fc_beta.forward(ctx, hidden);
        let c_n = ctx.g.value(t_n).shape()[0];
        let gamma = ctx.g.reshape(gamma_row, &[c_n]);
        let beta = ctx.g.reshape(beta_row, &[c_n]);

        let gate = ctx.g.sigmoid(gamma);
        let scaled = ctx.g.mul_channels(t_f, gate);
        let shifted = ctx.g.add_channels(scaled, beta);

        let fused = self.fuse.forward(ctx, shifted);
        ctx.g.add(fused, t_n)
    }
}

/// One decoder level: a 1x1 reduction of the concatenated input followed by
/// a residual pair of 3x3 convolutions.
struct DecoderBlock {
    proj: Conv2dLayer,
    conv1: Conv2dLayer,
    norm1: ChannelNormLayer,
    conv2: Conv2dLayer,
    norm2: ChannelNormLayer,
}

impl DecoderBlock {
    fn new<F: Scalar>(
        params: &mut ParamStore<F>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        DecoderBlock {
            proj: Conv2dLayer::new(params, &format!("{name}.proj"), in_ch, out_ch, 1, 1, rng),
            conv1: Conv2dLayer::new(params, &format!("{name}.conv1"), out_ch, out_ch, 3, 1, rng),
            norm1: ChannelNormLayer::new(params, &format!("{name}.norm1"), out_ch),
            conv2: Conv2dLayer::new(params, &format!("{name}.conv2"), out_ch, out_ch, 3, 1, rng),
            norm2: ChannelNormLayer::new(params, &format!("{name}.norm2"), out_ch),
        }
    }

    fn forward<F: Scalar>(&self, ctx: &mut ForwardCtx<'_, F>, x: Var) -> Var {
        let p = self.proj.forward(ctx, x);
        let h = self.conv1.forward(ctx, p);
        let h = self.norm1.forward(ctx, h);
        let h = ctx.g.relu(h);
        let h = self.conv2.forward(ctx, h);
        let h = self.norm2.forward(ctx, h);
        let sum = ctx.g.add(h, p);
        ctx.g.relu(sum)
    }
}

pub struct Decoder {
    blocks: Vec<DecoderBlock>,
    mgf: Vec<Option<MgfModule>>,
    head_conv1: Conv2dLayer,
    head_norm: ChannelNormLayer,
    head_conv2: Conv2dLayer,
}

impl Decoder {
    /// `level_channels` runs shallow to deep (six levels).
    pub fn new<F: Scalar>(
        params: &mut ParamStore<F>,
        level_channels: &[usize],
        use_mgf: bool,
        squeeze_ratio: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert_eq!(level_channels.len(), 6, "six pyramid levels expected");
        let mut blocks = Vec::new();
        let mut mgf = Vec::new();
        for k in 0..=4 {
            let in_ch = level_channels[k + 1] + level_channels[k];
            blocks.push(DecoderBlock::new(
                params,
                &format!("decoder.level{k}"),
                in_ch,
                level_channels[k],
                rng,
            ));
            // A fusion triple needs both neighbors: levels 1..=4.
            let module = (use_mgf && k >= 1).then(|| {
                MgfModule::new(
                    params,
                    &format!("decoder.mgf{k}"),
                    level_channels[k - 1],
                    level_channels[k],
                    level_channels[k + 1],
                    squeeze_ratio,
                    rng,
                )
            });
            mgf.push(module);
        }
        let c0 = level_channels[0];
        Decoder {
            blocks,
            mgf,
            head_conv1: Conv2dLayer::new(params, "decoder.head_conv1", c0, c0, 3, 1, rng),
            head_norm: ChannelNormLayer::new(params, "decoder.head_norm", c0),
            head_conv2: Conv2dLayer::new(params, "decoder.head_conv2", c0, 1, 3, 1, rng),
        }
    }

    /// Decodes the pyramid to a `(1, H, W)` alpha plane in `[0, 1]`.
    pub fn forward<F: Scalar>(
        &self,
        ctx: &mut ForwardCtx<'_, F>,
        pyramid: &FeaturePyramid,
        trimap: &Trimap,
    ) -> Var {
        let levels = &pyramid.levels;
        let mut d = levels[5].var;
        for k in (0..=4).rev() {
            let lvl = &levels[k];
            let mut up = ctx.g.upsample_bilinear2(d);
            let up_shape = ctx.g.value(up).shape().to_vec();
            if up_shape[1] != lvl.h || up_shape[2] != lvl.w {
                up = ctx.g.crop2d(up, lvl.h, lvl.w);
            }
            let skip = match &self.mgf[k] {
                Some(module) => {
                    let prev = &levels[k - 1];
                    let nonbg = nonbg_mask_at::<F>(trimap, prev.h, prev.w);
                    module.forward(ctx, prev.var, lvl.var, levels[k + 1].var, &nonbg)
                }
                None => lvl.var,
            };
            let cat = ctx.g.concat_channels(up, skip);
            d = self.blocks[k].forward(ctx, cat);
        }
        let up = ctx.g.upsample_bilinear2(d);
        let h = self.head_conv1.forward(ctx, up);
        let h = self.head_norm.forward(ctx, h);
        let h = ctx.g.relu(h);
        let logits = self.head_conv2.forward(ctx, h);
        ctx.g.sigmoid(logits)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Graph;
    use crate::nn::normal_init;
    use rand::{Rng, SeedableRng};

    fn mgf_fixture(seed: u64) -> (ParamStore<f64>, MgfModule) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::<f64>::new();
        let module = MgfModule::new(&mut store, "mgf", 3, 4, 6, 2, &mut rng);
        (store, module)
    }

    fn mgf_inputs(seed: u64) -> (ArrayD<f64>, ArrayD<f64>, ArrayD<f64>, Array2<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t_prev = normal_init::<f64>(&[3, 8, 8], 1.0, &mut rng);
        let t_n = normal_init::<f64>(&[4, 4, 4], 1.0, &mut rng);
        let t_next = normal_init::<f64>(&[6, 2, 2], 1.0, &mut rng);
        let nonbg = Array2::from_shape_fn((8, 8), |_| if rng.gen_bool(0.7) { 1.0 } else { 0.0 });
        (t_prev, t_n, t_next, nonbg)
    }

    #[test]
    fn mgf_output_has_t_n_shape() {
        let (store, module) = mgf_fixture(1);
        let (t_prev, t_n, t_next, nonbg) = mgf_inputs(2);
        let mut graph = Graph::<f64>::new();
        let mut ctx = ForwardCtx::new(&mut graph, &store, true);
        let a = ctx.g.constant(t_prev);
        let b = ctx.g.constant(t_n);
        let c = ctx.g.constant(t_next);
        let out = module.forward(&mut ctx, a, b, c, &nonbg);
        assert_eq!(graph.value(out).shape(), &[4, 4, 4]);
    }

    #[test]
    fn zeroed_fusing_conv_reduces_to_skip() {
        let (mut store, module) = mgf_fixture(3);
        store.value_mut(module.fuse.w).fill(0.0);
        store.value_mut(module.fuse.b).fill(0.0);
        let (t_prev, t_n, t_next, nonbg) = mgf_inputs(4);
        let mut graph = Graph::<f64>::new();
        let mut ctx = ForwardCtx::new(&mut graph, &store, true);
        let a = ctx.g.constant(t_prev);
        let b = ctx.g.constant(t_n.clone());
        let c = ctx.g.constant(t_next);
        let out = module.forward(&mut ctx, a, b, c, &nonbg);
        assert_eq!(graph.value(out), &t_n);
    }

    #[test]
    fn masked_background_positions_cannot_influence_output() {
        let (store, module) = mgf_fixture(5);
        let (t_prev, t_n, t_next, nonbg) = mgf_inputs(6);

        let run = |prev: ArrayD<f64>| -> ArrayD<f64> {
            let mut graph = Graph::<f64>::new();
            let mut ctx = ForwardCtx::new(&mut graph, &store, true);
            let a = ctx.g.constant(prev);
            let b = ctx.g.constant(t_n.clone());
            let c = ctx.g.constant(t_next.clone());
            let out = module.forward(&mut ctx, a, b, c, &nonbg);
            graph.value(out).clone()
        };

        let base = run(t_prev.clone());
        let mut tampered = t_prev.clone();
        let mut changed = 0;
        for r in 0..8 {
            for c in 0..8 {
                if nonbg[(r, c)] == 0.0 {
                    for ch in 0..3 {
                        tampered[[ch, r, c]] += 17.5;
                    }
                    changed += 1;
                }
            }
        }
        assert!(changed > 0, "fixture must contain background positions");
        let after = run(tampered);
        assert_eq!(base, after, "background suppression must be exact");
    }

    #[test]
    fn zero_mask_removes_t_prev_entirely() {
        let (store, module) = mgf_fixture(7);
        let (t_prev, t_n, t_next, _) = mgf_inputs(8);
        let zero_mask = Array2::<f64>::zeros((8, 8));

        let run = |prev: ArrayD<f64>| -> ArrayD<f64> {
            let mut graph = Graph::<f64>::new();
            let mut ctx = ForwardCtx::new(&mut graph, &store, true);
            let a = ctx.g.constant(prev);
            let b = ctx.g.constant(t_n.clone());
            let c = ctx.g.constant(t_next.clone());
            let out = module.forward(&mut ctx, a, b, c, &zero_mask);
            graph.value(out).clone()
        };
        let with_random = run(t_prev);
        let with_other = run(normal_init::<f64>(&[3, 8, 8], 5.0, &mut ChaCha8Rng::seed_from_u64(99)));
        assert_eq!(with_random, with_other);
    }

    #[test]
    fn channel_gate_lies_in_unit_interval() {
        // sigmoid(gamma) is bounded in (0, 1) by construction; verify through
        // the graph by reading the gate that scales T_f.
        let (store, module) = mgf_fixture(9);
        let (t_prev, t_n, t_next, nonbg) = mgf_inputs(10);
        let mut graph = Graph::<f64>::new();
        let mut ctx = ForwardCtx::new(&mut graph, &store, true);
        let a = ctx.g.constant(t_prev);
        let b = ctx.g.constant(t_n);
        let c = ctx.g.constant(t_next);
        let _ = module.forward(&mut ctx, a, b, c, &nonbg);
        // The sigmoid node is the only one producing a (4,)-shaped bounded
        // vector; recompute it directly instead of digging into the graph.
        let c_next_stats = graph.value(c).clone();
        let _ = c_next_stats;
        // Recompute gamma path by hand using stored weights.
        let stats: Vec<f64> = (0..6)
            .map(|ch| {
                let mut acc = 0.0;
                for y in 0..2 {
                    for x in 0..2 {
                        acc += graph.value(c)[[ch, y, x]];
                    }
                }
                acc / 4.0
            })
            .collect();
        let wsq = store.value(module.squeeze.w);
        let bsq = store.value(module.squeeze.b);
        let hidden: Vec<f64> = (0..3)
            .map(|j| {
                let mut acc = bsq[[j]];
                for (i, s) in stats.iter().enumerate() {
                    acc += s * wsq[[i, j]];
                }
                acc.max(0.0)
            })
            .collect();
        let wg = store.value(module.fc_gamma.w);
        let bg = store.value(module.fc_gamma.b);
        for j in 0..4 {
            let mut acc = bg[[j]];
            for (i, h) in hidden.iter().enumerate() {
                acc += h * wg[[i, j]];
            }
            let gate = 1.0 / (1.0 + (-acc).exp());
            assert!(gate > 0.0 && gate < 1.0);
        }
    }

    #[test]
    fn mgf_gradients_pass_finite_differences() {
        let (store, module) = mgf_fixture(11);
        let (t_prev, t_n, t_next, nonbg) = mgf_inputs(12);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let r = normal_init::<f64>(&[4, 4, 4], 1.0, &mut rng);

        let trainable: Vec<(crate::nn::ParamId, String)> = store
            .iter()
            .filter(|(_, e)| e.trainable)
            .map(|(id, e)| (id, e.name.clone()))
            .collect();
        let mut tensors = vec![
            ("t_prev".to_string(), t_prev),
            ("t_n".to_string(), t_n),
            ("t_next".to_string(), t_next),
        ];
        for (id, name) in &trainable {
            tensors.push((name.clone(), store.value(*id).clone()));
        }
        let build = |g: &mut Graph<f64>, vars: &[crate::autodiff::Var]| {
            let mut ctx = ForwardCtx::new(g, &store, true);
            for (i, (id, _)) in trainable.iter().enumerate() {
                ctx.force_bind(*id, vars[i + 3]);
            }
            let out = module.forward(&mut ctx, vars[0], vars[1], vars[2], &nonbg);
            let p = ctx.g.mul_const(out, &r);
            ctx.g.sum_all(p)
        };
        let report = crate::gradcheck::check_gradients(
            "mgf_fuse",
            &tensors,
            &build,
            crate::gradcheck::DEFAULT_EPS,
            1e-4,
            24,
            0,
        );
        assert!(report.passed(), "{report}");
    }
}
