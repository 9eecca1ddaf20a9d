//! Batched multi-head scaled dot-product attention over window tensors
//! `(num_windows, tokens, channels)`, with optional additive key masking and
//! an optional learnable relative-position bias table.

use ndarray::{Array2, Array3, Array4, ArrayD, Ix3};

use super::Scalar;

/// Learnable relative-position bias: a `(heads, num_offsets)` table variable
/// plus the per-pair offset index map of length `tokens * tokens`.
pub struct RelBias {
    pub table: usize,
    pub idx: Vec<usize>,
}

/// Static description of one attention call.
pub struct AttentionSpec<F: Scalar> {
    pub num_heads: usize,
    /// Logit scale, `1 / sqrt(head_dim)`.
    pub scale: F,
    /// Additive per-key logit bias `(num_windows, tokens)`; `-inf`-like values
    /// mask padded keys.
    pub key_bias: Option<Array2<F>>,
    pub rel_bias: Option<RelBias>,
}

pub(crate) fn attention_forward<F: Scalar>(
    q: &Array3<F>,
    k: &Array3<F>,
    v: &Array3<F>,
    spec: &AttentionSpec<F>,
    rel_table: Option<Array2<F>>,
) -> (Array3<F>, Array4<F>) {
    let (nw, t, c) = (q.shape()[0], q.shape()[1], q.shape()[2]);
    assert_eq!(k.shape(), q.shape(), "attention key shape");
    assert_eq!(v.shape(), q.shape(), "attention value shape");
    assert_eq!(c % spec.num_heads, 0, "channels divisible by heads");
    let d = c / spec.num_heads;

    let mut out = Array3::<F>::zeros((nw, t, c));
    let mut probs = Array4::<F>::zeros((nw, spec.num_heads, t, t));
    for wi in 0..nw {
        for hi in 0..spec.num_heads {
            let cols = hi * d..(hi + 1) * d;
            let qh = q.slice(ndarray::s![wi, .., cols.clone()]);
            let kh = k.slice(ndarray::s![wi, .., cols.clone()]);
            let vh = v.slice(ndarray::s![wi, .., cols.clone()]);

            let mut logits = qh.dot(&kh.t());
            logits.mapv_inplace(|x| x * spec.scale);
            if let Some(bias) = &spec.key_bias {
                for i in 0..t {
                    for j in 0..t {
                        logits[(i, j)] += bias[(wi, j)];
                    }
                }
            }
            if let (Some(rel), Some(table)) = (&spec.rel_bias, &rel_table) {
                for i in 0..t {
                    for j in 0..t {
                        logits[(i, j)] += table[(hi, rel.idx[i * t + j])];
                    }
                }
            }

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

            let oh = logits.dot(&vh);
            out.slice_mut(ndarray::s![wi, .., cols]).assign(&oh);
            probs.slice_mut(ndarray::s![wi, hi, .., ..]).assign(&logits);
        }
    }
    (out, probs)
}

pub(crate) fn attention_backward<F: Scalar>(
    q: &ArrayD<F>,
    k: &ArrayD<F>,
    v: &ArrayD<F>,
    probs: &ArrayD<F>,
    grad: &ArrayD<F>,
    spec: &AttentionSpec<F>,
) -> (ArrayD<F>, ArrayD<F>, ArrayD<F>, Option<ArrayD<F>>) {
    let qv = q.view().into_dimensionality::<Ix3>().unwrap();
    let kv = k.view().into_dimensionality::<Ix3>().unwrap();
    let vv = v.view().into_dimensionality::<Ix3>().unwrap();
    let g = grad.view().into_dimensionality::<Ix3>().unwrap();
    let pv = probs
        .view()
        .into_dimensionality::<ndarray::Ix4>()
        .unwrap();
    let (nw, t, c) = (qv.shape()[0], qv.shape()[1], qv.shape()[2]);
    let d = c / spec.num_heads;

    let mut dq = Array3::<F>::zeros((nw, t, c));
    let mut dk = Array3::<F>::zeros((nw, t, c));
    let mut dv = Array3::<F>::zeros((nw, t, c));
    let mut dtable = spec.rel_bias.as_ref().map(|rel| {
        let n_off = rel.idx.iter().copied().max().map(|m| m + 1).unwrap_or(0);
        Array2::<F>::zeros((spec.num_heads, n_off))
    });

    for wi in 0..nw {
        for hi in 0..spec.num_heads {
            let cols = hi * d..(hi + 1) * d;
            let qh = qv.slice(ndarray::s![wi, .., cols.clone()]);
            let kh = kv.slice(ndarray::s![wi, .., cols.clone()]);
            let vh = vv.slice(ndarray::s![wi, .., cols.clone()]);
            let gh = g.slice(ndarray::s![wi, .., cols.clone()]);
            let p = pv.slice(ndarray::s![wi, hi, .., ..]);

            let dvh = p.t().dot(&gh);
            let dp = gh.dot(&vh.t());

            let mut ds = Array2::<F>::zeros((t, t));
            for i in 0..t {
                let mut rowdot = F::zero();
                for j in 0..t {
                    rowdot += dp[(i, j)] * p[(i, j)];
                }
                for j in 0..t {
                    ds[(i, j)] = p[(i, j)] * (dp[(i, j)] - rowdot);
                }
            }

            let mut dqh = ds.dot(&kh);
            dqh.mapv_inplace(|x| x * spec.scale);
            let mut dkh = ds.t().dot(&qh);
            dkh.mapv_inplace(|x| x * spec.scale);

            dq.slice_mut(ndarray::s![wi, .., cols.clone()]).assign(&dqh);
            dk.slice_mut(ndarray::s![wi, .., cols.clone()]).assign(&dkh);
            dv.slice_mut(ndarray::s![wi, .., cols]).assign(&dvh);

            if let (Some(rel), Some(dt)) = (&spec.rel_bias, dtable.as_mut()) {
                for i in 0..t {
                    for j in 0..t {
                        dt[(hi, rel.idx[i * t + j])] += ds[(i, j)];
                    }
                }
            }
        }
    }
    (
        dq.into_dyn(),
        dk.into_dyn(),
        dv.into_dyn(),
        dtable.map(|d| d.into_dyn()),
    )
}
