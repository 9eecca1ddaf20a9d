use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::gradcheck::{check_gradients, DEFAULT_EPS};

fn rand_tensor(shape: &[usize], seed: u64) -> ArrayD<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-1.0..1.0))
}

/// Random tensor bounded away from zero, for kinked ops (abs, relu).
fn rand_tensor_offzero(shape: &[usize], seed: u64) -> ArrayD<f64> {
    rand_tensor(shape, seed).mapv(|v: f64| v.signum() * (v.abs() + 0.15))
}

fn projection(shape: &[usize], seed: u64) -> ArrayD<f64> {
    rand_tensor(shape, seed ^ 0xABCD)
}

fn assert_pass(report: crate::gradcheck::CheckReport) {
    assert!(report.passed(), "{report}");
}

#[test]
fn elementwise_arithmetic_gradients() {
    let tensors = vec![
        ("a".to_string(), rand_tensor(&[3, 4], 1)),
        ("b".to_string(), rand_tensor(&[3, 4], 2)),
    ];
    let r = projection(&[3, 4], 3);
    let c = rand_tensor(&[3, 4], 4);
    let build = move |g: &mut Graph<f64>, vars: &[Var]| {
        let sum = g.add(vars[0], vars[1]);
        let diff = g.sub(vars[0], vars[1]);
        let prod = g.mul(sum, diff);
        let scaled = g.scale(prod, 0.7);
        let shifted = g.add_const(scaled, &c);
        let masked = g.mul_const(shifted, &r);
        g.sum_all(masked)
    };
    assert_pass(check_gradients("elementwise", &tensors, &build, DEFAULT_EPS, 1e-6, 64, 0));
}

#[test]
fn nonlinearity_gradients() {
    let tensors = vec![("x".to_string(), rand_tensor_offzero(&[4, 3], 10))];
    let r1 = projection(&[4, 3], 11);
    let r2 = projection(&[4, 3], 12);
    let r3 = projection(&[4, 3], 13);
    let r4 = projection(&[4, 3], 14);
    let build = move |g: &mut Graph<f64>, vars: &[Var]| {
        let a = g.relu(vars[0]);
        let b = g.gelu(vars[0]);
        let c = g.sigmoid(vars[0]);
        let d = g.abs(vars[0]);
        let pa = g.mul_const(a, &r1);
        let pb = g.mul_const(b, &r2);
        let pc = g.mul_const(c, &r3);
        let pd = g.mul_const(d, &r4);
        let s1 = g.add(pa, pb);
        let s2 = g.add(pc, pd);
        let s = g.add(s1, s2);
        g.sum_all(s)
    };
    assert_pass(check_gradients("nonlinearity", &tensors, &build, DEFAULT_EPS, 1e-6, 64, 0));
}

#[test]
fn matmul_and_bias_gradients() {
    let tensors = vec![
        ("a".to_string(), rand_tensor(&[4, 3], 20)),
        ("w".to_string(), rand_tensor(&[3, 5], 21)),
        ("b".to_string(), rand_tensor(&[5], 22)),
    ];
    let r = projection(&[4, 5], 23);
    let build = move |g: &mut Graph<f64>, vars: &[Var]| {
        let y = g.matmul(vars[0], vars[1]);
        let y = g.add_row(y, vars[2]);
        let p = g.mul_const(y, &r);
        g.sum_all(p)
    };
    assert_pass(check_gradients("matmul", &tensors, &build, DEFAULT_EPS, 1e-6, 64, 0));
}

#[test]
fn layer_norm_gradients() {
    let tensors = vec![
        ("x".to_string(), rand_tensor(&[5, 6], 30)),
        ("gamma".to_string(), rand_tensor(&[6], 31)),
        ("beta".to_string(), rand_tensor(&[6], 32)),
    ];
    let r = projection(&[5, 6], 33);
    let build = move |g: &mut Graph<f64>, vars: &[Var]| {
        let y = g.layer_norm(vars[0], vars[1], vars[2], 1e-5);
        let p = g.mul_const(y, &r);
        g.sum_all(p)
    };
    assert_pass(check_gradients("layer_norm", &tensors, &build, DEFAULT_EPS, 1e-5, 64, 0));
}

#[test]
fn channel_norm_gradients_train_and_frozen() {
    let tensors = vec![
        ("x".to_string(), rand_tensor(&[3, 4, 5], 40)),
        ("gamma".to_string(), rand_tensor(&[3], 41)),
        ("beta".to_string(), rand_tensor(&[3], 42)),
    ];
    let r = projection(&[3, 4, 5], 43);
    let r2 = r.clone();
    let train = move |g: &mut Graph<f64>, vars: &[Var]| {
        let (y, _, _) = g.channel_norm(vars[0], vars[1], vars[2], 1e-5, None);
        let p = g.mul_const(y, &r);
        g.sum_all(p)
    };
    assert_pass(check_gradients("channel_norm_train", &tensors, &train, DEFAULT_EPS, 1e-5, 64, 0));

    let means = vec![0.1, -0.2, 0.05];
    let vars_ = vec![0.9, 1.2, 0.7];
    let frozen = move |g: &mut Graph<f64>, vars: &[Var]| {
        let (y, _, _) = g.channel_norm(vars[0], vars[1], vars[2], 1e-5, Some((&means, &vars_)));
        let p = g.mul_const(y, &r2);
        g.sum_all(p)
    };
    assert_pass(check_gradients("channel_norm_eval", &tensors, &frozen, DEFAULT_EPS, 1e-5, 64, 0));
}

#[test]
fn conv2d_gradients_zero_and_replicate() {
    for (pad_mode, seed) in [(PadMode::Zero, 50u64), (PadMode::Replicate, 51)] {
        for stride in [1usize, 2] {
            let tensors = vec![
                ("x".to_string(), rand_tensor(&[2, 5, 6], seed)),
                ("w".to_string(), rand_tensor(&[3, 2, 3, 3], seed + 1)),
                ("b".to_string(), rand_tensor(&[3], seed + 2)),
            ];
            let oh = crate::autodiff::conv::conv_out_len(5, 3, stride, 1);
            let ow = crate::autodiff::conv::conv_out_len(6, 3, stride, 1);
            let r = projection(&[3, oh, ow], seed + 3);
            let build = move |g: &mut Graph<f64>, vars: &[Var]| {
                let y = g.conv2d(vars[0], vars[1], vars[2], stride, 1, pad_mode);
                let p = g.mul_const(y, &r);
                g.sum_all(p)
            };
            assert_pass(check_gradients(
                "conv2d",
                &tensors,
                &build,
                DEFAULT_EPS,
                1e-5,
                96,
                0,
            ));
        }
    }
}

#[test]
fn pooling_and_resampling_gradients() {
    // Odd spatial extents exercise the ceil/partial-window paths.
    let tensors = vec![("x".to_string(), rand_tensor(&[2, 5, 7], 60))];
    let r_pool = projection(&[2, 3, 4], 61);
    let r_up = projection(&[2, 10, 14], 62);
    let r_dec = projection(&[2, 3, 4], 63);
    let build = move |g: &mut Graph<f64>, vars: &[Var]| {
        let pooled = g.avg_pool2(vars[0]);
        let up = g.upsample_bilinear2(vars[0]);
        let dec = g.decimate2(vars[0]);
        let p1 = g.mul_const(pooled, &r_pool);
        let p2 = g.mul_const(up, &r_up);
        let p3 = g.mul_const(dec, &r_dec);
        let s1 = g.sum_all(p1);
        let s2 = g.sum_all(p2);
        let s3 = g.sum_all(p3);
        let s = g.add(s1, s2);
        g.add(s, s3)
    };
    assert_pass(check_gradients("pool_resample", &tensors, &build, DEFAULT_EPS, 1e-6, 70, 0));
}

#[test]
fn layout_op_gradients() {
    let tensors = vec![
        ("x".to_string(), rand_tensor(&[3, 5, 6], 70)),
        ("y".to_string(), rand_tensor(&[2, 5, 6], 71)),
    ];
    let r = projection(&[5, 8, 8], 72);
    let build = move |g: &mut Graph<f64>, vars: &[Var]| {
        let cat = g.concat_channels(vars[0], vars[1]);
        let padded = g.pad_bottom_right(cat, 3, 2);
        let shifted = g.cyclic_shift(padded, 2, -1);
        let windows = g.window_partition(shifted, 4);
        let back = g.window_reverse(windows, 4, 8, 8);
        let unshifted = g.cyclic_shift(back, -2, 1);
        let p = g.mul_const(unshifted, &r);
        g.sum_all(p)
    };
    assert_pass(check_gradients("layout", &tensors, &build, DEFAULT_EPS, 1e-6, 80, 0));
}

#[test]
fn token_and_depth_op_gradients() {
    let tensors = vec![
        ("x".to_string(), rand_tensor(&[3, 5, 5], 80)),
        ("table".to_string(), rand_tensor(&[3, 4], 81)),
    ];
    let r_tok = projection(&[25, 3], 82);
    let r_s2d = projection(&[12, 3, 3], 83);
    let r_gather = projection(&[6, 4], 84);
    let idx = vec![0usize, 2, 1, 1, 0, 2];
    let build = move |g: &mut Graph<f64>, vars: &[Var]| {
        let tokens = g.chw_to_tokens(vars[0]);
        let chw = g.tokens_to_chw(tokens, 5, 5);
        let s2d = g.space_to_depth2(chw);
        let tokens2 = g.chw_to_tokens(vars[0]);
        let gathered = g.gather_rows(vars[1], idx.clone());
        let p1 = g.mul_const(tokens2, &r_tok);
        let p2 = g.mul_const(s2d, &r_s2d);
        let p3 = g.mul_const(gathered, &r_gather);
        let s1 = g.sum_all(p1);
        let s2 = g.sum_all(p2);
        let s3 = g.sum_all(p3);
        let s = g.add(s1, s2);
        g.add(s, s3)
    };
    assert_pass(check_gradients("token_depth", &tensors, &build, DEFAULT_EPS, 1e-6, 90, 0));
}

#[test]
fn channel_broadcast_and_pool_gradients() {
    let tensors = vec![
        ("x".to_string(), rand_tensor(&[4, 3, 3], 90)),
        ("s".to_string(), rand_tensor(&[4], 91)),
        ("b".to_string(), rand_tensor(&[4], 92)),
    ];
    let r = projection(&[4, 3, 3], 93);
    let r_gap = projection(&[4], 94);
    let build = move |g: &mut Graph<f64>, vars: &[Var]| {
        let scaled = g.mul_channels(vars[0], vars[1]);
        let shifted = g.add_channels(scaled, vars[2]);
        let gap = g.global_avg_pool(shifted);
        let p1 = g.mul_const(shifted, &r);
        let p2 = g.mul_const(gap, &r_gap);
        let s1 = g.sum_all(p1);
        let s2 = g.sum_all(p2);
        g.add(s1, s2)
    };
    assert_pass(check_gradients("channel_ops", &tensors, &build, DEFAULT_EPS, 1e-6, 64, 0));
}

#[test]
fn slice_and_reshape_gradients() {
    let tensors = vec![("x".to_string(), rand_tensor(&[4, 9], 100))];
    let r = projection(&[4, 3], 101);
    let build = move |g: &mut Graph<f64>, vars: &[Var]| {
        let mid = g.slice_cols(vars[0], 3, 3);
        let reshaped = g.reshape(mid, &[2, 6]);
        let back = g.reshape(reshaped, &[4, 3]);
        let p = g.mul_const(back, &r);
        g.sum_all(p)
    };
    assert_pass(check_gradients("slice", &tensors, &build, DEFAULT_EPS, 1e-6, 40, 0));
}

#[test]
fn window_attention_gradients() {
    let (nw, t, c, heads) = (2usize, 4usize, 6usize, 2usize);
    let scale = 1.0 / ((c / heads) as f64).sqrt();
    let tensors = vec![
        ("q".to_string(), rand_tensor(&[nw, t, c], 110)),
        ("k".to_string(), rand_tensor(&[nw, t, c], 111)),
        ("v".to_string(), rand_tensor(&[nw, t, c], 112)),
    ];
    let r = projection(&[nw, t, c], 113);
    let build = move |g: &mut Graph<f64>, vars: &[Var]| {
        let spec = AttentionSpec {
            num_heads: heads,
            scale,
            key_bias: None,
            rel_bias: None,
        };
        let out = g.window_attention(vars[0], vars[1], vars[2], spec);
        let p = g.mul_const(out, &r);
        g.sum_all(p)
    };
    assert_pass(check_gradients("attention", &tensors, &build, DEFAULT_EPS, 1e-5, 96, 0));
}

#[test]
fn window_attention_with_mask_and_rel_bias_gradients() {
    let (nw, t, c, heads) = (1usize, 4usize, 4usize, 2usize);
    let scale = 1.0 / ((c / heads) as f64).sqrt();
    // Mask the last key of the window.
    let mut key_bias = ndarray::Array2::<f64>::zeros((nw, t));
    key_bias[(0, 3)] = -1e30;
    let idx: Vec<usize> = (0..t * t).map(|p| p % 3).collect();
    let tensors = vec![
        ("q".to_string(), rand_tensor(&[nw, t, c], 120)),
        ("k".to_string(), rand_tensor(&[nw, t, c], 121)),
        ("v".to_string(), rand_tensor(&[nw, t, c], 122)),
        ("rel_table".to_string(), rand_tensor(&[heads, 3], 123)),
    ];
    let r = projection(&[nw, t, c], 124);
    let build = move |g: &mut Graph<f64>, vars: &[Var]| {
        let spec = AttentionSpec {
            num_heads: heads,
            scale,
            key_bias: Some(key_bias.clone()),
            rel_bias: Some(attn::RelBias {
                table: vars[3].0,
                idx: idx.clone(),
            }),
        };
        let out = g.window_attention(vars[0], vars[1], vars[2], spec);
        let p = g.mul_const(out, &r);
        g.sum_all(p)
    };
    let report = check_gradients("attention_masked", &tensors, &build, DEFAULT_EPS, 1e-5, 96, 0);
    assert_pass(report);

    // Masked keys receive zero value-gradient.
    let mut graph = Graph::<f64>::new();
    let q = graph.param(rand_tensor(&[nw, t, c], 120));
    let k = graph.param(rand_tensor(&[nw, t, c], 121));
    let v = graph.param(rand_tensor(&[nw, t, c], 122));
    let spec = AttentionSpec {
        num_heads: heads,
        scale,
        key_bias: Some(key_bias2(nw, t)),
        rel_bias: None,
    };
    let out = graph.window_attention(q, k, v, spec);
    let loss = graph.sum_all(out);
    let grads = graph.backward(loss);
    let dv = grads.get(v).unwrap();
    for ci in 0..c {
        assert_eq!(dv[[0, 3, ci]], 0.0, "masked key leaks value gradient");
    }
}

fn key_bias2(nw: usize, t: usize) -> ndarray::Array2<f64> {
    let mut key_bias = ndarray::Array2::<f64>::zeros((nw, t));
    key_bias[(0, t - 1)] = -1e30;
    key_bias
}

#[test]
fn window_partition_reverse_roundtrip_is_exact() {
    let mut graph = Graph::<f64>::new();
    let x = graph.constant(rand_tensor(&[3, 8, 12], 130));
    let windows = graph.window_partition(x, 4);
    assert_eq!(graph.value(windows).shape(), &[6, 16, 3]);
    let back = graph.window_reverse(windows, 4, 8, 12);
    assert_eq!(graph.value(back), graph.value(x));
}

#[test]
fn pad_then_crop_restores_input() {
    let mut graph = Graph::<f64>::new();
    let x = graph.constant(rand_tensor(&[2, 5, 5], 131));
    let padded = graph.pad_bottom_right(x, 3, 3);
    let cropped = graph.crop2d(padded, 5, 5);
    assert_eq!(graph.value(cropped), graph.value(x));
}

#[test]
fn zero_query_attention_averages_values() {
    let (nw, t, c) = (1usize, 5usize, 4usize);
    let mut graph = Graph::<f64>::new();
    let q = graph.constant(ArrayD::zeros(IxDyn(&[nw, t, c])));
    let k = graph.constant(rand_tensor(&[nw, t, c], 140));
    let v = graph.constant(rand_tensor(&[nw, t, c], 141));
    let spec = AttentionSpec {
        num_heads: 2,
        scale: 1.0 / 2.0f64.sqrt(),
        key_bias: None,
        rel_bias: None,
    };
    let out = graph.window_attention(q, k, v, spec);
    let vv = graph.value(v);
    for ci in 0..c {
        let mean: f64 = (0..t).map(|i| vv[[0, i, ci]]).sum::<f64>() / t as f64;
        for i in 0..t {
            assert!((graph.value(out)[[0, i, ci]] - mean).abs() < 1e-12);
        }
    }
}

#[test]
fn single_key_attention_returns_value() {
    let mut graph = Graph::<f64>::new();
    let q = graph.constant(rand_tensor(&[1, 1, 4], 150));
    let k = graph.constant(rand_tensor(&[1, 1, 4], 151));
    let v = graph.constant(rand_tensor(&[1, 1, 4], 152));
    let spec = AttentionSpec {
        num_heads: 2,
        scale: 1.0 / 2.0f64.sqrt(),
        key_bias: None,
        rel_bias: None,
    };
    let out = graph.window_attention(q, k, v, spec);
    for ci in 0..4 {
        assert!((graph.value(out)[[0, 0, ci]] - graph.value(v)[[0, 0, ci]]).abs() < 1e-15);
    }
}

#[test]
fn upsample_preserves_constant_planes() {
    let mut graph = Graph::<f64>::new();
    let x = graph.constant(ArrayD::from_elem(IxDyn(&[1, 3, 5]), 0.4));
    let up = graph.upsample_bilinear2(x);
    assert!(graph.value(up).iter().all(|&v| (v - 0.4).abs() < 1e-15));
}
