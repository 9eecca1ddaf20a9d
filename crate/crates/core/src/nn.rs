//! Parameter storage and the layer building blocks shared by the encoder and
//! decoder. Layers hold parameter handles; each forward pass binds them into
//! a graph through a [`ForwardCtx`].

use std::collections::HashMap;

use ndarray::{ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Graph, PadMode, Scalar, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
pub struct ParamEntry<F: Scalar> {
    pub name: String,
    pub value: ArrayD<F>,
    pub trainable: bool,
}

/// Ordered, named parameter set. Order is fixed by construction and defines
/// the checkpoint layout.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<F: Scalar> {
    entries: Vec<ParamEntry<F>>,
    index: HashMap<String, usize>,
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: ArrayD<F>, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(ParamEntry {
            name,
            value,
            trainable,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<F> {
        &self.entries[id.0]
    }

    pub fn value(&self, id: ParamId) -> &ArrayD<F> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut ArrayD<F> {
        &mut self.entries[id.0].value
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry<F>)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, e)| (ParamId(i), e))
    }

    /// Number of trainable scalar parameters.
    pub fn trainable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.len())
            .sum()
    }

    pub fn cast<G: Scalar>(&self) -> ParamStore<G> {
        let mut out = ParamStore::new();
        for entry in &self.entries {
            out.add(
                entry.name.clone(),
                entry.value.mapv(|v| G::of(v.as_f64())),
                entry.trainable,
            );
        }
        out
    }
}

/// Observed per-channel statistics from one normalization layer, used to
/// update running statistics after the optimizer step.
pub struct StatObservation<F: Scalar> {
    pub mean_param: ParamId,
    pub var_param: ParamId,
    pub mean: Vec<F>,
    pub var: Vec<F>,
}

/// Per-forward binding of parameters into a graph.
pub struct ForwardCtx<'a, F: Scalar> {
    pub g: &'a mut Graph<F>,
    params: &'a ParamStore<F>,
    bound: Vec<Option<Var>>,
    pub train_mode: bool,
    pub stat_obs: Vec<StatObservation<F>>,
}

impl<'a, F: Scalar> ForwardCtx<'a, F> {
    pub fn new(g: &'a mut Graph<F>, params: &'a ParamStore<F>, train_mode: bool) -> Self {
        let bound = vec![None; params.len()];
        ForwardCtx {
            g,
            params,
            bound,
            train_mode,
            stat_obs: Vec::new(),
        }
    }

    /// Binds a parameter into the graph (once per forward).
    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(var) = self.bound[id.0] {
            return var;
        }
        let entry = self.params.entry(id);
        let var = if entry.trainable {
            self.g.param(entry.value.clone())
        } else {
            self.g.constant(entry.value.clone())
        };
        self.bound[id.0] = Some(var);
        var
    }

    /// Pre-binds a parameter to an existing graph variable (gradient checks
    /// probe parameters this way).
    pub fn force_bind(&mut self, id: ParamId, var: Var) {
        self.bound[id.0] = Some(var);
    }

    /// Raw (un-bound) parameter value, e.g. frozen running statistics.
    pub fn raw(&self, id: ParamId) -> &ArrayD<F> {
        self.params.value(id)
    }

    /// The graph variable a parameter was bound to, if it participated.
    pub fn bound_var(&self, id: ParamId) -> Option<Var> {
        self.bound[id.0]
    }

    /// Consumes the context, releasing the binding table and observed
    /// normalization statistics.
    pub fn into_parts(self) -> (Vec<Option<Var>>, Vec<StatObservation<F>>) {
        (self.bound, self.stat_obs)
    }
}

/// Gaussian init with the given standard deviation.
pub fn normal_init<F: Scalar>(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> ArrayD<F> {
    let dist = Normal::new(0.0, std).expect("valid std");
    ArrayD::from_shape_fn(IxDyn(shape), |_| F::of(dist.sample(rng)))
}

/// Kaiming-style init for convolutions: std = sqrt(2 / fan_in).
pub fn kaiming_init<F: Scalar>(shape: &[usize], rng: &mut ChaCha8Rng) -> ArrayD<F> {
    let fan_in: usize = shape[1..].iter().product();
    normal_init(shape, (2.0 / fan_in as f64).sqrt(), rng)
}

pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<F: Scalar>(
        params: &mut ParamStore<F>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w = params.add(
            format!("{name}.weight"),
            normal_init(&[in_dim, out_dim], 0.02, rng),
            true,
        );
        let b = params.add(
            format!("{name}.bias"),
            ArrayD::zeros(IxDyn(&[out_dim])),
            true,
        );
        Linear { w, b }
    }

    /// `(n, in) -> (n, out)`.
    pub fn forward<F: Scalar>(&self, ctx: &mut ForwardCtx<'_, F>, x: Var) -> Var {
        let w = ctx.p(self.w);
        let b = ctx.p(self.b);
        let y = ctx.g.matmul(x, w);
        ctx.g.add_row(y, b)
    }
}

pub struct Conv2dLayer {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2dLayer {
    pub fn new<F: Scalar>(
        params: &mut ParamStore<F>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w = params.add(
            format!("{name}.weight"),
            kaiming_init(&[out_ch, in_ch, kernel, kernel], rng),
            true,
        );
        let b = params.add(
            format!("{name}.bias"),
            ArrayD::zeros(IxDyn(&[out_ch])),
            true,
        );
        Conv2dLayer {
            w,
            b,
            stride,
            pad: kernel / 2,
        }
    }

    pub fn forward<F: Scalar>(&self, ctx: &mut ForwardCtx<'_, F>, x: Var) -> Var {
        let w = ctx.p(self.w);
        let b = ctx.p(self.b);
        ctx.g.conv2d(x, w, b, self.stride, self.pad, PadMode::Zero)
    }
}

pub struct LayerNormLayer {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNormLayer {
    pub fn new<F: Scalar>(params: &mut ParamStore<F>, name: &str, dim: usize) -> Self {
        let gamma = params.add(
            format!("{name}.gamma"),
            ArrayD::from_elem(IxDyn(&[dim]), F::one()),
            true,
        );
        let beta = params.add(format!("{name}.beta"), ArrayD::zeros(IxDyn(&[dim])), true);
        LayerNormLayer {
            gamma,
            beta,
            eps: 1e-5,
        }
    }

    pub fn forward<F: Scalar>(&self, ctx: &mut ForwardCtx<'_, F>, x: Var) -> Var {
        let gamma = ctx.p(self.gamma);
        let beta = ctx.p(self.beta);
        ctx.g.layer_norm(x, gamma, beta, F::of(self.eps))
    }
}

/// Per-sample, per-channel spatial normalization with running statistics for
/// eval mode. Training normalizes with the sample's own statistics, which
/// keeps samples in a batch independent and the pass deterministic.
pub struct ChannelNormLayer {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub eps: f64,
}

impl ChannelNormLayer {
    pub fn new<F: Scalar>(params: &mut ParamStore<F>, name: &str, dim: usize) -> Self {
        let gamma = params.add(
            format!("{name}.gamma"),
            ArrayD::from_elem(IxDyn(&[dim]), F::one()),
            true,
        );
        let beta = params.add(format!("{name}.beta"), ArrayD::zeros(IxDyn(&[dim])), true);
        let running_mean = params.add(
            format!("{name}.running_mean"),
            ArrayD::zeros(IxDyn(&[dim])),
            false,
        );
        let running_var = params.add(
            format!("{name}.running_var"),
            ArrayD::from_elem(IxDyn(&[dim]), F::one()),
            false,
        );
        ChannelNormLayer {
            gamma,
            beta,
            running_mean,
            running_var,
            eps: 1e-5,
        }
    }

    pub fn forward<F: Scalar>(&self, ctx: &mut ForwardCtx<'_, F>, x: Var) -> Var {
        let gamma = ctx.p(self.gamma);
        let beta = ctx.p(self.beta);
        if ctx.train_mode {
            let (y, mean, var) = ctx.g.channel_norm(x, gamma, beta, F::of(self.eps), None);
            ctx.stat_obs.push(StatObservation {
                mean_param: self.running_mean,
                var_param: self.running_var,
                mean,
                var,
            });
            y
        } else {
            let mean: Vec<F> = ctx.raw(self.running_mean).iter().copied().collect();
            let var: Vec<F> = ctx.raw(self.running_var).iter().copied().collect();
            let (y, _, _) = ctx
                .g
                .channel_norm(x, gamma, beta, F::of(self.eps), Some((&mean, &var)));
            y
        }
    }
}

pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<F: Scalar>(
        params: &mut ParamStore<F>,
        name: &str,
        dim: usize,
        hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Mlp {
            fc1: Linear::new(params, &format!("{name}.fc1"), dim, hidden, rng),
            fc2: Linear::new(params, &format!("{name}.fc2"), hidden, dim, rng),
        }
    }

    pub fn forward<F: Scalar>(&self, ctx: &mut ForwardCtx<'_, F>, x: Var) -> Var {
        let h = self.fc1.forward(ctx, x);
        let h = ctx.g.gelu(h);
        self.fc2.forward(ctx, h)
    }
}

/// ResNet basic block with optional strided projection shortcut.
pub struct ResidualBlock {
    conv1: Conv2dLayer,
    norm1: ChannelNormLayer,
    conv2: Conv2dLayer,
    norm2: ChannelNormLayer,
    shortcut: Option<(Conv2dLayer, ChannelNormLayer)>,
}

impl ResidualBlock {
    pub fn new<F: Scalar>(
        params: &mut ParamStore<F>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        stride: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let conv1 =
            Conv2dLayer::new(params, &format!("{name}.conv1"), in_ch, out_ch, 3, stride, rng);
        let norm1 = ChannelNormLayer::new(params, &format!("{name}.norm1"), out_ch);
        let conv2 = Conv2dLayer::new(params, &format!("{name}.conv2"), out_ch, out_ch, 3, 1, rng);
        let norm2 = ChannelNormLayer::new(params, &format!("{name}.norm2"), out_ch);
        let shortcut = if stride != 1 || in_ch != out_ch {
            Some((
                Conv2dLayer::new(params, &format!("{name}.short"), in_ch, out_ch, 1, stride, rng),
                ChannelNormLayer::new(params, &format!("{name}.short_norm"), out_ch),
            ))
        } else {
            None
        };
        ResidualBlock {
            conv1,
            norm1,
            conv2,
            norm2,
            shortcut,
        }
    }

    pub fn forward<F: Scalar>(&self, ctx: &mut ForwardCtx<'_, F>, x: Var) -> Var {
        let h = self.conv1.forward(ctx, x);
        let h = self.norm1.forward(ctx, h);
        let h = ctx.g.relu(h);
        let h = self.conv2.forward(ctx, h);
        let h = self.norm2.forward(ctx, h);
        let identity = match &self.shortcut {
            Some((conv, norm)) => {
                let s = conv.forward(ctx, x);
                norm.forward(ctx, s)
            }
            None => x,
        };
        let sum = ctx.g.add(h, identity);
        ctx.g.relu(sum)
    }
}

/// Gradient-checks a layer forward over its parameters plus an input tensor.
/// Used by layer and model tests; `forward` builds the scalar loss.
#[cfg(test)]
pub(crate) fn check_layer_gradients<Fwd>(
    component: &str,
    store: &ParamStore<f64>,
    input: ArrayD<f64>,
    forward: Fwd,
    tol: f64,
    max_probes: usize,
) -> crate::gradcheck::CheckReport
where
    Fwd: Fn(&mut ForwardCtx<'_, f64>, Var) -> Var,
{
    let trainable: Vec<(ParamId, String)> = store
        .iter()
        .filter(|(_, e)| e.trainable)
        .map(|(id, e)| (id, e.name.clone()))
        .collect();
    let mut tensors = vec![("input".to_string(), input)];
    for (id, name) in &trainable {
        tensors.push((name.clone(), store.value(*id).clone()));
    }
    let build = |g: &mut Graph<f64>, vars: &[Var]| {
        let mut ctx = ForwardCtx::new(g, store, true);
        for (i, (id, _)) in trainable.iter().enumerate() {
            ctx.force_bind(*id, vars[i + 1]);
        }
        forward(&mut ctx, vars[0])
    };
    crate::gradcheck::check_gradients(
        component,
        &tensors,
        &build,
        crate::gradcheck::DEFAULT_EPS,
        tol,
        max_probes,
        0,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn residual_block_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        let block = ResidualBlock::new(&mut store, "blk", 2, 3, 2, &mut rng);
        let x = normal_init::<f64>(&[2, 6, 6], 1.0, &mut rng);
        let r = normal_init::<f64>(&[3, 3, 3], 1.0, &mut rng);
        let report = check_layer_gradients(
            "residual_block",
            &store,
            x,
            |ctx, input| {
                let y = block.forward(ctx, input);
                let p = ctx.g.mul_const(y, &r);
                ctx.g.sum_all(p)
            },
            1e-5,
            40,
        );
        assert!(report.passed(), "{report}");
    }

    #[test]
    fn mlp_and_layernorm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::<f64>::new();
        let norm = LayerNormLayer::new(&mut store, "ln", 6);
        let mlp = Mlp::new(&mut store, "mlp", 6, 12, &mut rng);
        let x = normal_init::<f64>(&[5, 6], 1.0, &mut rng);
        let r = normal_init::<f64>(&[5, 6], 1.0, &mut rng);
        let report = check_layer_gradients(
            "mlp",
            &store,
            x,
            |ctx, input| {
                let h = norm.forward(ctx, input);
                let h = mlp.forward(ctx, h);
                let p = ctx.g.mul_const(h, &r);
                ctx.g.sum_all(p)
            },
            1e-5,
            48,
        );
        assert!(report.passed(), "{report}");
    }

    #[test]
    fn channel_norm_uses_frozen_stats_in_eval() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f64>::new();
        let norm = ChannelNormLayer::new(&mut store, "cn", 2);
        *store.value_mut(norm.running_mean) =
            ArrayD::from_shape_vec(IxDyn(&[2]), vec![0.5, -0.5]).unwrap();
        *store.value_mut(norm.running_var) =
            ArrayD::from_shape_vec(IxDyn(&[2]), vec![4.0, 0.25]).unwrap();
        let x = normal_init::<f64>(&[2, 3, 3], 1.0, &mut rng);

        let mut graph = Graph::new();
        let mut ctx = ForwardCtx::new(&mut graph, &store, false);
        let input = ctx.g.constant(x.clone());
        let y = norm.forward(&mut ctx, input);
        let out = ctx.g.value(y).clone();
        let expected0 = (x[[0, 0, 0]] - 0.5) / (4.0f64 + 1e-5).sqrt();
        assert!((out[[0, 0, 0]] - expected0).abs() < 1e-12);
        assert!(ctx.stat_obs.is_empty());
    }

    #[test]
    fn param_store_cast_roundtrip() {
        let mut store = ParamStore::<f32>::new();
        store.add("a", ArrayD::from_elem(IxDyn(&[2, 2]), 0.25f32), true);
        store.add("b", ArrayD::from_elem(IxDyn(&[3]), 1.5f32), false);
        let as64 = store.cast::<f64>();
        let back = as64.cast::<f32>();
        for ((_, x), (_, y)) in store.iter().zip(back.iter()) {
            assert_eq!(x.value, y.value);
            assert_eq!(x.trainable, y.trainable);
        }
        assert_eq!(store.trainable_count(), 4);
    }
}
