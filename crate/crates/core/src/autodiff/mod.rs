//! Minimal reverse-mode automatic differentiation on dynamic-dimension
//! ndarray tensors.
//!
//! A [`Graph`] is a tape of nodes; every operation appends a node holding its
//! value and enough cached state to run the backward pass. Graphs are built
//! per forward pass and are generic over [`Scalar`] so the same network code
//! runs in f32 for training and f64 for gradient verification.

mod attn;
mod conv;

pub use attn::{AttentionSpec, RelBias};

/// Builds a relative-position bias handle from a bound table variable and a
/// per-pair offset index map.
pub fn attn_rel_bias(table: Var, idx: Vec<usize>) -> RelBias {
    RelBias { table: table.0, idx }
}

use ndarray::{ArrayD, Axis, Ix1, Ix2, Ix3, IxDyn};

/// Element type for graph tensors.
pub trait Scalar:
    num_traits::Float
    + num_traits::NumAssignOps
    + ndarray::LinalgScalar
    + num_traits::FromPrimitive
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    fn of(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn of(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Zero-based padding semantics for convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PadMode {
    Zero,
    Replicate,
}

pub(crate) enum Op<F: Scalar> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, F),
    AddConst(usize),
    MulConst(usize, ArrayD<F>),
    MatMul(usize, usize),
    AddRow(usize, usize),
    Relu(usize),
    Gelu(usize),
    Sigmoid(usize),
    Abs(usize),
    SumAll(usize),
    Reshape(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: ArrayD<F>,
        rstd: Vec<F>,
    },
    ChannelNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: ArrayD<F>,
        rstd: Vec<F>,
        /// None in training mode (statistics from this tensor); Some(rstd per
        /// channel) when frozen running statistics were used.
        frozen: bool,
    },
    Conv2d {
        x: usize,
        w: usize,
        b: usize,
        stride: usize,
        pad: usize,
        pad_mode: PadMode,
        cols: ndarray::Array2<F>,
    },
    AvgPool2(usize),
    UpsampleBilinear2(usize),
    Decimate2(usize),
    PadBottomRight {
        x: usize,
        pad_h: usize,
        pad_w: usize,
    },
    Crop2d {
        x: usize,
        h: usize,
        w: usize,
    },
    CyclicShift {
        x: usize,
        dy: isize,
        dx: isize,
    },
    WindowPartition {
        x: usize,
        m: usize,
    },
    WindowReverse {
        x: usize,
        m: usize,
        h: usize,
        w: usize,
    },
    SpaceToDepth2(usize),
    ChwToTokens(usize),
    TokensToChw {
        x: usize,
        h: usize,
        w: usize,
    },
    ConcatChannels(usize, usize),
    SliceCols {
        x: usize,
        start: usize,
        len: usize,
    },
    GatherRows {
        table: usize,
        idx: Vec<usize>,
    },
    GlobalAvgPool(usize),
    MulChannels {
        x: usize,
        s: usize,
    },
    AddChannels {
        x: usize,
        b: usize,
    },
    WindowAttention {
        q: usize,
        k: usize,
        v: usize,
        spec: AttentionSpec<F>,
        probs: ArrayD<F>,
    },
}

impl<F: Scalar> Op<F> {
    fn parents(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => vec![*a, *b],
            Op::AddRow(a, b) | Op::ConcatChannels(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::AddConst(a)
            | Op::MulConst(a, _)
            | Op::Relu(a)
            | Op::Gelu(a)
            | Op::Sigmoid(a)
            | Op::Abs(a)
            | Op::SumAll(a)
            | Op::Reshape(a)
            | Op::AvgPool2(a)
            | Op::UpsampleBilinear2(a)
            | Op::Decimate2(a)
            | Op::SpaceToDepth2(a)
            | Op::ChwToTokens(a)
            | Op::GlobalAvgPool(a) => vec![*a],
            Op::LayerNorm { x, gamma, beta, .. } | Op::ChannelNorm { x, gamma, beta, .. } => {
                vec![*x, *gamma, *beta]
            }
            Op::Conv2d { x, w, b, .. } => vec![*x, *w, *b],
            Op::PadBottomRight { x, .. }
            | Op::Crop2d { x, .. }
            | Op::CyclicShift { x, .. }
            | Op::WindowPartition { x, .. }
            | Op::WindowReverse { x, .. }
            | Op::TokensToChw { x, .. }
            | Op::SliceCols { x, .. } => vec![*x],
            Op::GatherRows { table, .. } => vec![*table],
            Op::MulChannels { x, s } => vec![*x, *s],
            Op::AddChannels { x, b } => vec![*x, *b],
            Op::WindowAttention { q, k, v, spec, .. } => {
                let mut p = vec![*q, *k, *v];
                if let Some(rel) = &spec.rel_bias {
                    p.push(rel.table);
                }
                p
            }
        }
    }
}

struct Node<F: Scalar> {
    value: ArrayD<F>,
    op: Op<F>,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients<F: Scalar> {
    grads: Vec<Option<ArrayD<F>>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn get(&self, var: Var) -> Option<&ArrayD<F>> {
        self.grads[var.0].as_ref()
    }

    /// Gradient of a variable, or zeros of its shape if it never received one.
    pub fn get_or_zeros(&self, var: Var, shape: &[usize]) -> ArrayD<F> {
        self.grads[var.0]
            .clone()
            .unwrap_or_else(|| ArrayD::zeros(IxDyn(shape)))
    }
}

#[derive(Default)]
pub struct Graph<F: Scalar> {
    nodes: Vec<Node<F>>,
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &ArrayD<F> {
        &self.nodes[var.0].value
    }

    pub fn scalar_value(&self, var: Var) -> F {
        let v = self.value(var);
        assert_eq!(v.len(), 1, "scalar_value on non-scalar node");
        *v.iter().next().unwrap()
    }

    fn push(&mut self, value: ArrayD<F>, op: Op<F>) -> Var {
        let needs_grad = match &op {
            Op::Leaf => false,
            other => other.parents().iter().any(|&p| self.nodes[p].needs_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Inserts a trainable leaf; gradients flow into it.
    pub fn param(&mut self, value: ArrayD<F>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Inserts a constant leaf; no gradient is accumulated for it.
    pub fn constant(&mut self, value: ArrayD<F>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(value, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = &self.nodes[a.0].value - &self.nodes[b.0].value;
        self.push(value, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = &self.nodes[a.0].value * &self.nodes[b.0].value;
        self.push(value, Op::Mul(a.0, b.0))
    }

    pub fn scale(&mut self, a: Var, c: F) -> Var {
        let value = self.nodes[a.0].value.mapv(|v| v * c);
        self.push(value, Op::Scale(a.0, c))
    }

    pub fn add_const(&mut self, a: Var, c: &ArrayD<F>) -> Var {
        let value = &self.nodes[a.0].value + c;
        self.push(value, Op::AddConst(a.0))
    }

    pub fn mul_const(&mut self, a: Var, c: &ArrayD<F>) -> Var {
        let value = &self.nodes[a.0].value * c;
        self.push(value, Op::MulConst(a.0, c.clone()))
    }

    /// 2-D matrix product.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let av = self.view2(a);
        let bv = self.view2(b);
        let value = av.dot(&bv).into_dyn();
        self.push(value, Op::MatMul(a.0, b.0))
    }

    /// `(n, d) + (d,)` row-broadcast addition (linear-layer bias).
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let av = self.view2(a);
        let bv = self.nodes[bias.0]
            .value
            .view()
            .into_dimensionality::<Ix1>()
            .expect("bias must be 1-d");
        let value = (&av + &bv).into_dyn();
        self.push(value, Op::AddRow(a.0, bias.0))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(|v| v.max(F::zero()));
        self.push(value, Op::Relu(a.0))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(gelu_value);
        self.push(value, Op::Gelu(a.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(sigmoid_value);
        self.push(value, Op::Sigmoid(a.0))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(|v| v.abs());
        self.push(value, Op::Abs(a.0))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let total = self.nodes[a.0].value.iter().fold(F::zero(), |acc, &v| acc + v);
        let value = ArrayD::from_elem(IxDyn(&[]), total);
        self.push(value, Op::SumAll(a.0))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let value = self.nodes[a.0]
            .value
            .clone()
            .into_shape(IxDyn(shape))
            .expect("reshape with matching element count on standard layout");
        self.push(value, Op::Reshape(a.0))
    }

    /// Layer normalization over the last axis of a 2-D tensor.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: F) -> Var {
        let xv = self.view2(x);
        let (n, d) = (xv.shape()[0], xv.shape()[1]);
        let g = self.view1(gamma);
        let b = self.view1(beta);
        let mut xhat = ndarray::Array2::<F>::zeros((n, d));
        let mut out = ndarray::Array2::<F>::zeros((n, d));
        let mut rstd = Vec::with_capacity(n);
        let dn = F::from_usize(d).unwrap();
        for i in 0..n {
            let row = xv.row(i);
            let mean = row.sum() / dn;
            let var = row.fold(F::zero(), |acc, &v| acc + (v - mean) * (v - mean)) / dn;
            let r = (var + eps).sqrt().recip();
            rstd.push(r);
            for j in 0..d {
                let h = (row[j] - mean) * r;
                xhat[(i, j)] = h;
                out[(i, j)] = h * g[j] + b[j];
            }
        }
        self.push(
            out.into_dyn(),
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat: xhat.into_dyn(),
                rstd,
            },
        )
    }

    /// Per-channel normalization of a `(C, H, W)` tensor over its spatial
    /// extent, with optional frozen statistics (mean, var) for eval mode.
    /// Returns the output together with the batch statistics it computed.
    pub fn channel_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: F,
        frozen_stats: Option<(&[F], &[F])>,
    ) -> (Var, Vec<F>, Vec<F>) {
        let xv = self.view3(x);
        let (c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let g = self.view1(gamma);
        let b = self.view1(beta);
        let n = F::from_usize(h * w).unwrap();
        let mut xhat = ndarray::Array3::<F>::zeros((c, h, w));
        let mut out = ndarray::Array3::<F>::zeros((c, h, w));
        let mut rstd = Vec::with_capacity(c);
        let mut means = Vec::with_capacity(c);
        let mut vars = Vec::with_capacity(c);
        for ci in 0..c {
            let plane = xv.index_axis(Axis(0), ci);
            let batch_mean = plane.sum() / n;
            let batch_var =
                plane.fold(F::zero(), |acc, &v| acc + (v - batch_mean) * (v - batch_mean)) / n;
            means.push(batch_mean);
            vars.push(batch_var);
            let (mean, var) = match frozen_stats {
                Some((ms, vs)) => (ms[ci], vs[ci]),
                None => (batch_mean, batch_var),
            };
            let r = (var + eps).sqrt().recip();
            rstd.push(r);
            for y in 0..h {
                for xi in 0..w {
                    let hat = (plane[(y, xi)] - mean) * r;
                    xhat[(ci, y, xi)] = hat;
                    out[(ci, y, xi)] = hat * g[ci] + b[ci];
                }
            }
        }
        let var = self.push(
            out.into_dyn(),
            Op::ChannelNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat: xhat.into_dyn(),
                rstd,
                frozen: frozen_stats.is_some(),
            },
        );
        (var, means, vars)
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
        pad_mode: PadMode,
    ) -> Var {
        let (value, cols) = conv::conv2d_forward(
            &self.view3(x).to_owned(),
            &self.nodes[w.0].value,
            &self.view1(b).to_owned(),
            stride,
            pad,
            pad_mode,
        );
        self.push(
            value.into_dyn(),
            Op::Conv2d {
                x: x.0,
                w: w.0,
                b: b.0,
                stride,
                pad,
                pad_mode,
                cols,
            },
        )
    }

    /// 2x average pooling with ceil semantics; partial windows average their
    /// valid cells only.
    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let value = conv::avg_pool2_forward(&self.view3(x).to_owned());
        self.push(value.into_dyn(), Op::AvgPool2(x.0))
    }

    pub fn upsample_bilinear2(&mut self, x: Var) -> Var {
        let value = conv::upsample2_forward(&self.view3(x).to_owned());
        self.push(value.into_dyn(), Op::UpsampleBilinear2(x.0))
    }

    /// Keeps even-index rows and columns of a `(C, H, W)` tensor.
    pub fn decimate2(&mut self, x: Var) -> Var {
        let xv = self.view3(x);
        let (c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let (oh, ow) = ((h + 1) / 2, (w + 1) / 2);
        let value =
            ndarray::Array3::from_shape_fn((c, oh, ow), |(ci, y, xi)| xv[(ci, 2 * y, 2 * xi)]);
        self.push(value.into_dyn(), Op::Decimate2(x.0))
    }

    /// Zero-pads the bottom/right of a `(C, H, W)` tensor.
    pub fn pad_bottom_right(&mut self, x: Var, pad_h: usize, pad_w: usize) -> Var {
        let xv = self.view3(x);
        let (c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let mut value = ndarray::Array3::zeros((c, h + pad_h, w + pad_w));
        value.slice_mut(ndarray::s![.., ..h, ..w]).assign(&xv);
        self.push(
            value.into_dyn(),
            Op::PadBottomRight {
                x: x.0,
                pad_h,
                pad_w,
            },
        )
    }

    /// Crops a `(C, H, W)` tensor to its top-left `(C, h, w)` corner.
    pub fn crop2d(&mut self, x: Var, h: usize, w: usize) -> Var {
        let value = self
            .view3(x)
            .slice(ndarray::s![.., ..h, ..w])
            .to_owned();
        self.push(value.into_dyn(), Op::Crop2d { x: x.0, h, w })
    }

    /// Cyclic roll: `out[r, c] = in[(r + dy) mod H, (c + dx) mod W]`.
    pub fn cyclic_shift(&mut self, x: Var, dy: isize, dx: isize) -> Var {
        let xv = self.view3(x);
        let (c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let value = ndarray::Array3::from_shape_fn((c, h, w), |(ci, y, xi)| {
            let sy = (y as isize + dy).rem_euclid(h as isize) as usize;
            let sx = (xi as isize + dx).rem_euclid(w as isize) as usize;
            xv[(ci, sy, sx)]
        });
        self.push(value.into_dyn(), Op::CyclicShift { x: x.0, dy, dx })
    }

    /// Tiles a `(C, H, W)` tensor (H, W divisible by `m`) into
    /// `(num_windows, m*m, C)` with row-major windows and positions.
    pub fn window_partition(&mut self, x: Var, m: usize) -> Var {
        let xv = self.view3(x);
        let (c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        assert!(h % m == 0 && w % m == 0, "window_partition needs divisible dims");
        let (wy, wx) = (h / m, w / m);
        let mut value = ndarray::Array3::zeros((wy * wx, m * m, c));
        for win_y in 0..wy {
            for win_x in 0..wx {
                let wi = win_y * wx + win_x;
                for iy in 0..m {
                    for ix in 0..m {
                        for ci in 0..c {
                            value[(wi, iy * m + ix, ci)] =
                                xv[(ci, win_y * m + iy, win_x * m + ix)];
                        }
                    }
                }
            }
        }
        self.push(value.into_dyn(), Op::WindowPartition { x: x.0, m })
    }

    /// Exact inverse of [`Graph::window_partition`].
    pub fn window_reverse(&mut self, x: Var, m: usize, h: usize, w: usize) -> Var {
        let xv = self.view3(x);
        let c = xv.shape()[2];
        let wx = w / m;
        let mut value = ndarray::Array3::zeros((c, h, w));
        for wi in 0..xv.shape()[0] {
            let (win_y, win_x) = (wi / wx, wi % wx);
            for iy in 0..m {
                for ix in 0..m {
                    for ci in 0..c {
                        value[(ci, win_y * m + iy, win_x * m + ix)] =
                            xv[(wi, iy * m + ix, ci)];
                    }
                }
            }
        }
        self.push(value.into_dyn(), Op::WindowReverse { x: x.0, m, h, w })
    }

    /// 2x2 space-to-depth with zero padding for odd extents:
    /// `(C, H, W) -> (4C, ceil(H/2), ceil(W/2))`, quadrant-major channels.
    pub fn space_to_depth2(&mut self, x: Var) -> Var {
        let xv = self.view3(x);
        let (c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let (oh, ow) = ((h + 1) / 2, (w + 1) / 2);
        let mut value = ndarray::Array3::zeros((4 * c, oh, ow));
        for q in 0..4 {
            let (dy, dx) = (q / 2, q % 2);
            for ci in 0..c {
                for y in 0..oh {
                    for xi in 0..ow {
                        let (sy, sx) = (2 * y + dy, 2 * xi + dx);
                        if sy < h && sx < w {
                            value[(q * c + ci, y, xi)] = xv[(ci, sy, sx)];
                        }
                    }
                }
            }
        }
        self.push(value.into_dyn(), Op::SpaceToDepth2(x.0))
    }

    /// `(C, H, W) -> (H*W, C)` row-major token layout.
    pub fn chw_to_tokens(&mut self, x: Var) -> Var {
        let xv = self.view3(x);
        let (c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let value =
            ndarray::Array2::from_shape_fn((h * w, c), |(p, ci)| xv[(ci, p / w, p % w)]);
        self.push(value.into_dyn(), Op::ChwToTokens(x.0))
    }

    /// `(H*W, C) -> (C, H, W)`, inverse of [`Graph::chw_to_tokens`].
    pub fn tokens_to_chw(&mut self, x: Var, h: usize, w: usize) -> Var {
        let xv = self.view2(x);
        let c = xv.shape()[1];
        let value =
            ndarray::Array3::from_shape_fn((c, h, w), |(ci, y, xi)| xv[(y * w + xi, ci)]);
        self.push(value.into_dyn(), Op::TokensToChw { x: x.0, h, w })
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Var {
        let av = self.view3(a);
        let bv = self.view3(b);
        let value = ndarray::concatenate(Axis(0), &[av.view(), bv.view()])
            .expect("concat_channels with matching spatial dims");
        self.push(value.into_dyn(), Op::ConcatChannels(a.0, b.0))
    }

    /// Column slice of a 2-D tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let value = self
            .view2(x)
            .slice(ndarray::s![.., start..start + len])
            .to_owned();
        self.push(value.into_dyn(), Op::SliceCols { x: x.0, start, len })
    }

    /// `out[i, :] = table[idx[i], :]`; gradients scatter-add back by index.
    pub fn gather_rows(&mut self, table: Var, idx: Vec<usize>) -> Var {
        let tv = self.view2(table);
        let c = tv.shape()[1];
        let value = ndarray::Array2::from_shape_fn((idx.len(), c), |(i, j)| tv[(idx[i], j)]);
        self.push(value.into_dyn(), Op::GatherRows { table: table.0, idx })
    }

    /// `(C, H, W) -> (C,)` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let xv = self.view3(x);
        let n = F::from_usize(xv.shape()[1] * xv.shape()[2]).unwrap();
        let value = ndarray::Array1::from_shape_fn(xv.shape()[0], |c| {
            xv.index_axis(Axis(0), c).sum() / n
        });
        self.push(value.into_dyn(), Op::GlobalAvgPool(x.0))
    }

    /// Per-channel broadcast multiply: `(C, H, W) * (C,)`.
    pub fn mul_channels(&mut self, x: Var, s: Var) -> Var {
        let xv = self.view3(x);
        let sv = self.view1(s);
        let value =
            ndarray::Array3::from_shape_fn(xv.raw_dim(), |(c, y, xi)| xv[(c, y, xi)] * sv[c]);
        self.push(value.into_dyn(), Op::MulChannels { x: x.0, s: s.0 })
    }

    /// Per-channel broadcast add: `(C, H, W) + (C,)`.
    pub fn add_channels(&mut self, x: Var, b: Var) -> Var {
        let xv = self.view3(x);
        let bv = self.view1(b);
        let value =
            ndarray::Array3::from_shape_fn(xv.raw_dim(), |(c, y, xi)| xv[(c, y, xi)] + bv[c]);
        self.push(value.into_dyn(), Op::AddChannels { x: x.0, b: b.0 })
    }

    /// Multi-head scaled dot-product attention over batched windows.
    /// `q`, `k`, `v` are `(num_windows, tokens, channels)`.
    pub fn window_attention(&mut self, q: Var, k: Var, v: Var, spec: AttentionSpec<F>) -> Var {
        let (value, probs) = attn::attention_forward(
            &self.view3(q).to_owned(),
            &self.view3(k).to_owned(),
            &self.view3(v).to_owned(),
            &spec,
            spec.rel_bias.as_ref().map(|r| self.view2(Var(r.table)).to_owned()),
        );
        self.push(
            value.into_dyn(),
            Op::WindowAttention {
                q: q.0,
                k: k.0,
                v: v.0,
                spec,
                probs: probs.into_dyn(),
            },
        )
    }

    fn view1(&self, v: Var) -> ndarray::ArrayView1<'_, F> {
        self.nodes[v.0]
            .value
            .view()
            .into_dimensionality::<Ix1>()
            .expect("expected 1-d tensor")
    }

    fn view2(&self, v: Var) -> ndarray::ArrayView2<'_, F> {
        self.nodes[v.0]
            .value
            .view()
            .into_dimensionality::<Ix2>()
            .expect("expected 2-d tensor")
    }

    fn view3(&self, v: Var) -> ndarray::ArrayView3<'_, F> {
        self.nodes[v.0]
            .value
            .view()
            .into_dimensionality::<Ix3>()
            .expect("expected 3-d tensor")
    }

    /// Reverse pass from a scalar root. Returns per-node gradients for every
    /// node that needs one.
    pub fn backward(&self, root: Var) -> Gradients<F> {
        assert_eq!(
            self.nodes[root.0].value.len(),
            1,
            "backward root must be scalar"
        );
        let mut grads: Vec<Option<ArrayD<F>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(ArrayD::from_elem(
            self.nodes[root.0].value.raw_dim(),
            F::one(),
        ));

        for id in (0..=root.0).rev() {
            if !self.nodes[id].needs_grad && !matches!(self.nodes[id].op, Op::Leaf) {
                continue;
            }
            let grad = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[id];
            {
                let mut sink = |parent: usize, contribution: ArrayD<F>| {
                    if !self.nodes[parent].needs_grad {
                        return;
                    }
                    match &mut grads[parent] {
                        Some(acc) => *acc += &contribution,
                        slot @ None => *slot = Some(contribution),
                    }
                };
                self.backward_op(&node.op, &node.value, &grad, &mut sink);
            }
            grads[id] = Some(grad);
        }
        Gradients { grads }
    }

    fn backward_op(
        &self,
        op: &Op<F>,
        value: &ArrayD<F>,
        grad: &ArrayD<F>,
        sink: &mut dyn FnMut(usize, ArrayD<F>),
    ) {
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                sink(*a, grad.clone());
                sink(*b, grad.clone());
            }
            Op::Sub(a, b) => {
                sink(*a, grad.clone());
                sink(*b, grad.mapv(|v| -v));
            }
            Op::Mul(a, b) => {
                sink(*a, grad * &self.nodes[*b].value);
                sink(*b, grad * &self.nodes[*a].value);
            }
            Op::Scale(a, c) => sink(*a, grad.mapv(|v| v * *c)),
            Op::AddConst(a) => sink(*a, grad.clone()),
            Op::MulConst(a, c) => sink(*a, grad * c),
            Op::MatMul(a, b) => {
                let g = grad.view().into_dimensionality::<Ix2>().unwrap();
                let av = self.view2(Var(*a));
                let bv = self.view2(Var(*b));
                sink(*a, g.dot(&bv.t()).into_dyn());
                sink(*b, av.t().dot(&g).into_dyn());
            }
            Op::AddRow(a, bias) => {
                let g = grad.view().into_dimensionality::<Ix2>().unwrap();
                sink(*a, grad.clone());
                sink(*bias, g.sum_axis(Axis(0)).into_dyn());
            }
            Op::Relu(a) => {
                let x = &self.nodes[*a].value;
                let mut dx = grad.clone();
                ndarray::Zip::from(&mut dx).and(x).for_each(|d, &v| {
                    if v <= F::zero() {
                        *d = F::zero();
                    }
                });
                sink(*a, dx);
            }
            Op::Gelu(a) => {
                let x = &self.nodes[*a].value;
                let mut dx = grad.clone();
                ndarray::Zip::from(&mut dx).and(x).for_each(|d, &v| {
                    *d = *d * gelu_derivative(v);
                });
                sink(*a, dx);
            }
            Op::Sigmoid(a) => {
                let mut dx = grad.clone();
                ndarray::Zip::from(&mut dx).and(value).for_each(|d, &s| {
                    *d = *d * s * (F::one() - s);
                });
                sink(*a, dx);
            }
            Op::Abs(a) => {
                let x = &self.nodes[*a].value;
                let mut dx = grad.clone();
                ndarray::Zip::from(&mut dx).and(x).for_each(|d, &v| {
                    if v < F::zero() {
                        *d = -*d;
                    } else if v == F::zero() {
                        *d = F::zero();
                    }
                });
                sink(*a, dx);
            }
            Op::SumAll(a) => {
                let g = *grad.iter().next().unwrap();
                sink(
                    *a,
                    ArrayD::from_elem(self.nodes[*a].value.raw_dim(), g),
                );
            }
            Op::Reshape(a) => {
                let dx = grad
                    .clone()
                    .into_shape(self.nodes[*a].value.raw_dim())
                    .expect("gradient reshapes back");
                sink(*a, dx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let g = grad.view().into_dimensionality::<Ix2>().unwrap();
                let xh = xhat.view().into_dimensionality::<Ix2>().unwrap();
                let gm = self.view1(Var(*gamma));
                let (n, d) = (g.shape()[0], g.shape()[1]);
                let dn = F::from_usize(d).unwrap();
                let mut dx = ndarray::Array2::<F>::zeros((n, d));
                let mut dgamma = ndarray::Array1::<F>::zeros(d);
                let mut dbeta = ndarray::Array1::<F>::zeros(d);
                for i in 0..n {
                    let mut sum_dyg = F::zero();
                    let mut sum_dyg_xhat = F::zero();
                    for j in 0..d {
                        let dyg = g[(i, j)] * gm[j];
                        sum_dyg += dyg;
                        sum_dyg_xhat += dyg * xh[(i, j)];
                        dgamma[j] += g[(i, j)] * xh[(i, j)];
                        dbeta[j] += g[(i, j)];
                    }
                    let mean_dyg = sum_dyg / dn;
                    let mean_dyg_xhat = sum_dyg_xhat / dn;
                    for j in 0..d {
                        let dyg = g[(i, j)] * gm[j];
                        dx[(i, j)] = rstd[i] * (dyg - mean_dyg - xh[(i, j)] * mean_dyg_xhat);
                    }
                }
                sink(*x, dx.into_dyn());
                sink(*gamma, dgamma.into_dyn());
                sink(*beta, dbeta.into_dyn());
            }
            Op::ChannelNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
                frozen,
            } => {
                let g = grad.view().into_dimensionality::<Ix3>().unwrap();
                let xh = xhat.view().into_dimensionality::<Ix3>().unwrap();
                let gm = self.view1(Var(*gamma));
                let (c, h, w) = (g.shape()[0], g.shape()[1], g.shape()[2]);
                let n = F::from_usize(h * w).unwrap();
                let mut dx = ndarray::Array3::<F>::zeros((c, h, w));
                let mut dgamma = ndarray::Array1::<F>::zeros(c);
                let mut dbeta = ndarray::Array1::<F>::zeros(c);
                for ci in 0..c {
                    let mut sum_dy = F::zero();
                    let mut sum_dy_xhat = F::zero();
                    for y in 0..h {
                        for xi in 0..w {
                            let dy = g[(ci, y, xi)];
                            sum_dy += dy;
                            sum_dy_xhat += dy * xh[(ci, y, xi)];
                        }
                    }
                    dgamma[ci] = sum_dy_xhat;
                    dbeta[ci] = sum_dy;
                    let k = gm[ci] * rstd[ci];
                    if *frozen {
                        for y in 0..h {
                            for xi in 0..w {
                                dx[(ci, y, xi)] = g[(ci, y, xi)] * k;
                            }
                        }
                    } else {
                        let mean_dy = sum_dy / n;
                        let mean_dy_xhat = sum_dy_xhat / n;
                        for y in 0..h {
                            for xi in 0..w {
                                dx[(ci, y, xi)] = k
                                    * (g[(ci, y, xi)]
                                        - mean_dy
                                        - xh[(ci, y, xi)] * mean_dy_xhat);
                            }
                        }
                    }
                }
                sink(*x, dx.into_dyn());
                sink(*gamma, dgamma.into_dyn());
                sink(*beta, dbeta.into_dyn());
            }
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
                pad_mode,
                cols,
            } => {
                let (dx, dw, db) = conv::conv2d_backward(
                    &self.nodes[*x].value,
                    &self.nodes[*w].value,
                    grad,
                    *stride,
                    *pad,
                    *pad_mode,
                    cols,
                );
                sink(*x, dx);
                sink(*w, dw);
                sink(*b, db);
            }
            Op::AvgPool2(a) => {
                sink(*a, conv::avg_pool2_backward(&self.nodes[*a].value, grad));
            }
            Op::UpsampleBilinear2(a) => {
                sink(*a, conv::upsample2_backward(&self.nodes[*a].value, grad));
            }
            Op::Decimate2(a) => {
                let xv = self.nodes[*a].value.view().into_dimensionality::<Ix3>().unwrap();
                let g = grad.view().into_dimensionality::<Ix3>().unwrap();
                let mut dx = ndarray::Array3::<F>::zeros(xv.raw_dim());
                for ((c, y, xi), &gv) in g.indexed_iter() {
                    dx[(c, 2 * y, 2 * xi)] = gv;
                }
                sink(*a, dx.into_dyn());
            }
            Op::PadBottomRight { x, .. } => {
                let xv = self.nodes[*x].value.view().into_dimensionality::<Ix3>().unwrap();
                let g = grad.view().into_dimensionality::<Ix3>().unwrap();
                let (c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                let dx = g.slice(ndarray::s![..c, ..h, ..w]).to_owned();
                sink(*x, dx.into_dyn());
            }
            Op::Crop2d { x, .. } => {
                let xv = self.nodes[*x].value.view().into_dimensionality::<Ix3>().unwrap();
                let g = grad.view().into_dimensionality::<Ix3>().unwrap();
                let mut dx = ndarray::Array3::<F>::zeros(xv.raw_dim());
                dx.slice_mut(ndarray::s![.., ..g.shape()[1], ..g.shape()[2]])
                    .assign(&g);
                sink(*x, dx.into_dyn());
            }
            Op::CyclicShift { x, dy, dx } => {
                let g = grad.view().into_dimensionality::<Ix3>().unwrap();
                let (c, h, w) = (g.shape()[0], g.shape()[1], g.shape()[2]);
                let mut dgrad = ndarray::Array3::<F>::zeros((c, h, w));
                for ((ci, y, xi), &gv) in g.indexed_iter() {
                    let sy = (y as isize + dy).rem_euclid(h as isize) as usize;
                    let sx = (xi as isize + dx).rem_euclid(w as isize) as usize;
                    dgrad[(ci, sy, sx)] += gv;
                }
                sink(*x, dgrad.into_dyn());
            }
            Op::WindowPartition { x, m } => {
                let xv = self.nodes[*x].value.view().into_dimensionality::<Ix3>().unwrap();
                let g = grad.view().into_dimensionality::<Ix3>().unwrap();
                let (c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                let wx = w / m;
                let mut dx = ndarray::Array3::<F>::zeros((c, h, w));
                for ((wi, t, ci), &gv) in g.indexed_iter() {
                    let (win_y, win_x) = (wi / wx, wi % wx);
                    dx[(ci, win_y * m + t / m, win_x * m + t % m)] = gv;
                }
                sink(*x, dx.into_dyn());
            }
            Op::WindowReverse { x, m, w, .. } => {
                let xv = self.nodes[*x].value.view().into_dimensionality::<Ix3>().unwrap();
                let g = grad.view().into_dimensionality::<Ix3>().unwrap();
                let wx = w / m;
                let mut dx = ndarray::Array3::<F>::zeros(xv.raw_dim());
                for ((ci, y, xi), &gv) in g.indexed_iter() {
                    let wi = (y / m) * wx + xi / m;
                    dx[(wi, (y % m) * m + xi % m, ci)] = gv;
                }
                sink(*x, dx.into_dyn());
            }
            Op::SpaceToDepth2(a) => {
                let xv = self.nodes[*a].value.view().into_dimensionality::<Ix3>().unwrap();
                let g = grad.view().into_dimensionality::<Ix3>().unwrap();
                let (c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                let mut dx = ndarray::Array3::<F>::zeros((c, h, w));
                for ((oc, y, xi), &gv) in g.indexed_iter() {
                    let (q, ci) = (oc / c, oc % c);
                    let (sy, sx) = (2 * y + q / 2, 2 * xi + q % 2);
                    if sy < h && sx < w {
                        dx[(ci, sy, sx)] = gv;
                    }
                }
                sink(*a, dx.into_dyn());
            }
            Op::ChwToTokens(a) => {
                let xv = self.nodes[*a].value.view().into_dimensionality::<Ix3>().unwrap();
                let g = grad.view().into_dimensionality::<Ix2>().unwrap();
                let (c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                let dx =
                    ndarray::Array3::from_shape_fn((c, h, w), |(ci, y, xi)| g[(y * w + xi, ci)]);
                sink(*a, dx.into_dyn());
            }
            Op::TokensToChw { x, h, w } => {
                let g = grad.view().into_dimensionality::<Ix3>().unwrap();
                let c = g.shape()[0];
                let dx =
                    ndarray::Array2::from_shape_fn((h * w, c), |(p, ci)| g[(ci, p / w, p % w)]);
                sink(*x, dx.into_dyn());
            }
            Op::ConcatChannels(a, b) => {
                let ca = self.nodes[*a].value.shape()[0];
                let g = grad.view().into_dimensionality::<Ix3>().unwrap();
                sink(*a, g.slice(ndarray::s![..ca, .., ..]).to_owned().into_dyn());
                sink(*b, g.slice(ndarray::s![ca.., .., ..]).to_owned().into_dyn());
            }
            Op::SliceCols { x, start, len } => {
                let xv = self.nodes[*x].value.view().into_dimensionality::<Ix2>().unwrap();
                let g = grad.view().into_dimensionality::<Ix2>().unwrap();
                let mut dx = ndarray::Array2::<F>::zeros(xv.raw_dim());
                dx.slice_mut(ndarray::s![.., *start..start + len]).assign(&g);
                sink(*x, dx.into_dyn());
            }
            Op::GatherRows { table, idx } => {
                let tv = self.nodes[*table].value.view().into_dimensionality::<Ix2>().unwrap();
                let g = grad.view().into_dimensionality::<Ix2>().unwrap();
                let mut dt = ndarray::Array2::<F>::zeros(tv.raw_dim());
                for (i, &row) in idx.iter().enumerate() {
                    let mut target = dt.row_mut(row);
                    target += &g.row(i);
                }
                sink(*table, dt.into_dyn());
            }
            Op::GlobalAvgPool(a) => {
                let xv = self.nodes[*a].value.view().into_dimensionality::<Ix3>().unwrap();
                let g = grad.view().into_dimensionality::<Ix1>().unwrap();
                let (c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                let n = F::from_usize(h * w).unwrap();
                let dx = ndarray::Array3::from_shape_fn((c, h, w), |(ci, _, _)| g[ci] / n);
                sink(*a, dx.into_dyn());
            }
            Op::MulChannels { x, s } => {
                let xv = self.nodes[*x].value.view().into_dimensionality::<Ix3>().unwrap();
                let sv = self.view1(Var(*s));
                let g = grad.view().into_dimensionality::<Ix3>().unwrap();
                let dx = ndarray::Array3::from_shape_fn(xv.raw_dim(), |(ci, y, xi)| {
                    g[(ci, y, xi)] * sv[ci]
                });
                let mut ds = ndarray::Array1::<F>::zeros(sv.len());
                for ((ci, y, xi), &gv) in g.indexed_iter() {
                    ds[ci] += gv * xv[(ci, y, xi)];
                }
                sink(*x, dx.into_dyn());
                sink(*s, ds.into_dyn());
            }
            Op::AddChannels { x, b } => {
                let g = grad.view().into_dimensionality::<Ix3>().unwrap();
                let mut db = ndarray::Array1::<F>::zeros(g.shape()[0]);
                for ((ci, _, _), &gv) in g.indexed_iter() {
                    db[ci] += gv;
                }
                sink(*x, grad.clone());
                sink(*b, db.into_dyn());
            }
            Op::WindowAttention { q, k, v, spec, probs } => {
                let (dq, dk, dv, dtable) = attn::attention_backward(
                    &self.nodes[*q].value,
                    &self.nodes[*k].value,
                    &self.nodes[*v].value,
                    probs,
                    grad,
                    spec,
                );
                sink(*q, dq);
                sink(*k, dk);
                sink(*v, dv);
                if let (Some(rel), Some(dt)) = (&spec.rel_bias, dtable) {
                    sink(rel.table, dt);
                }
            }
        }
    }
}

fn sigmoid_value<F: Scalar>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

const GELU_COEFF: f64 = 0.044715;

fn gelu_value<F: Scalar>(x: F) -> F {
    let c = F::of((2.0 / std::f64::consts::PI).sqrt());
    let k = F::of(GELU_COEFF);
    let half = F::of(0.5);
    let inner = c * (x + k * x * x * x);
    half * x * (F::one() + inner.tanh())
}

fn gelu_derivative<F: Scalar>(x: F) -> F {
    let c = F::of((2.0 / std::f64::consts::PI).sqrt());
    let k = F::of(GELU_COEFF);
    let half = F::of(0.5);
    let three = F::of(3.0);
    let inner = c * (x + k * x * x * x);
    let t = inner.tanh();
    let sech2 = F::one() - t * t;
    half * (F::one() + t) + half * x * sech2 * c * (F::one() + three * k * x * x)
}

#[cfg(test)]
mod tests;
