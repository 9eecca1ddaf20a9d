//! Learnable tri-tokens: three class vectors (FG, BG, UNK) that replace the
//! raw trimap. Expanding a trimap to a feature grid substitutes each
//! position's label with the corresponding token, so every output vector is
//! bit-equal to one of the three tokens and gradients accumulate back onto
//! exactly the positions carrying each label.

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Scalar, Var};
use crate::nn::{normal_init, ForwardCtx, ParamId, ParamStore};
use crate::types::Trimap;

/// Handle to one stage's three learnable tokens, stored as a `(3, C)` table
/// with row order FG=0, BG=1, UNK=2.
#[derive(Debug, Clone, Copy)]
pub struct TriTokenSet {
    pub table: ParamId,
    pub dim: usize,
}

/// Standard deviation of the token initialization.
pub const TOKEN_INIT_STD: f64 = 0.02;

/// Draws three mutually distinct token vectors of the given dimension.
pub fn init_tokens<F: Scalar>(
    params: &mut ParamStore<F>,
    name: &str,
    dim: usize,
    rng: &mut ChaCha8Rng,
) -> TriTokenSet {
    assert!(dim >= 1, "token dimension must be at least 1");
    let mut table = normal_init::<F>(&[3, dim], TOKEN_INIT_STD, rng);
    // Continuous draws collide with probability zero; regenerate defensively
    // so the distinctness invariant is unconditional.
    while {
        let t = table.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        (0..3).any(|i| (i + 1..3).any(|j| t.row(i) == t.row(j)))
    } {
        table = normal_init::<F>(&[3, dim], TOKEN_INIT_STD, rng);
    }
    let table = params.add(format!("{name}.tokens"), table, true);
    TriTokenSet { table, dim }
}

/// Nearest-neighbor downsampling of trimap labels to a feature grid,
/// returned as row-major token indices. Labels are resampled, never token
/// vectors, so the three-symbol alphabet survives any grid.
pub fn downsample_labels(trimap: &Trimap, target_h: usize, target_w: usize) -> Vec<usize> {
    let (h, w) = trimap.shape2();
    assert!(
        target_h <= h && target_w <= w && target_h >= 1 && target_w >= 1,
        "target grid ({target_h}, {target_w}) must be within the trimap grid ({h}, {w})"
    );
    let mut idx = Vec::with_capacity(target_h * target_w);
    for r in 0..target_h {
        let sr = (((r as f64 + 0.5) * h as f64 / target_h as f64) as usize).min(h - 1);
        for c in 0..target_w {
            let sc = (((c as f64 + 0.5) * w as f64 / target_w as f64) as usize).min(w - 1);
            idx.push(trimap.indices()[(sr, sc)] as usize);
        }
    }
    idx
}

/// In-graph expansion: `(target_h * target_w, C)` token rows.
pub fn expand<F: Scalar>(
    ctx: &mut ForwardCtx<'_, F>,
    set: &TriTokenSet,
    trimap: &Trimap,
    target_h: usize,
    target_w: usize,
) -> Var {
    let idx = downsample_labels(trimap, target_h, target_w);
    let table = ctx.p(set.table);
    ctx.g.gather_rows(table, idx)
}

/// Materialized tri-token map for one grid.
#[derive(Debug, Clone)]
pub struct TriTokenMap<F: Scalar> {
    pub height: usize,
    pub width: usize,
    /// `(height * width, C)`, each row one of the three tokens.
    pub data: Array2<F>,
}

/// Pure expansion used outside the training graph.
pub fn expand_map<F: Scalar>(
    tokens: &Array2<F>,
    trimap: &Trimap,
    target_h: usize,
    target_w: usize,
) -> TriTokenMap<F> {
    assert_eq!(tokens.shape()[0], 3, "token table must have three rows");
    let idx = downsample_labels(trimap, target_h, target_w);
    let data = Array2::from_shape_fn((idx.len(), tokens.shape()[1]), |(i, j)| {
        tokens[(idx[i], j)]
    });
    TriTokenMap {
        height: target_h,
        width: target_w,
        data,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Graph;
    use crate::types::TrimapLabel;
    use ndarray::array;
    use rand::SeedableRng;

    fn make_set(dim: usize, seed: u64) -> (ParamStore<f64>, TriTokenSet) {
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let set = init_tokens(&mut params, "stage1", dim, &mut rng);
        (params, set)
    }

    #[test]
    fn tokens_are_distinct_and_deterministic() {
        for dim in [1usize, 8] {
            let (params, set) = make_set(dim, 42);
            let table = params.value(set.table);
            for i in 0..3 {
                for j in (i + 1)..3 {
                    let d2: f64 = (0..dim)
                        .map(|c| (table[[i, c]] - table[[j, c]]).powi(2))
                        .sum();
                    assert!(d2 > 0.0, "tokens {i} and {j} collide at dim {dim}");
                }
            }
            let (params2, set2) = make_set(dim, 42);
            assert_eq!(params.value(set.table), params2.value(set2.table));
        }
    }

    #[test]
    fn expansion_is_exact_token_lookup() {
        let (params, set) = make_set(4, 7);
        let labels = array![[0u8, 1], [2, 0]];
        let trimap = Trimap::from_indices(labels).unwrap();
        let map = expand_map(
            &params
                .value(set.table)
                .view()
                .into_dimensionality::<ndarray::Ix2>()
                .unwrap()
                .to_owned(),
            &trimap,
            2,
            2,
        );
        let table = params.value(set.table);
        // Direct dictionary-lookup oracle.
        for &(pos, label) in [(0usize, 0usize), (1, 1), (2, 2), (3, 0)].iter() {
            for c in 0..4 {
                assert_eq!(map.data[(pos, c)], table[[label, c]]);
            }
        }
    }

    #[test]
    fn all_unknown_trimap_expands_to_constant_unk_token() {
        let (params, set) = make_set(3, 9);
        let trimap = Trimap::filled(4, 4, TrimapLabel::Unk);
        let table = params.value(set.table).clone();
        let map = expand_map(
            &table.view().into_dimensionality::<ndarray::Ix2>().unwrap().to_owned(),
            &trimap,
            4,
            4,
        );
        for i in 0..16 {
            for c in 0..3 {
                assert_eq!(map.data[(i, c)], table[[TrimapLabel::Unk as usize, c]]);
            }
        }
    }

    #[test]
    fn nearest_token_matching_recovers_downsampled_trimap() {
        let (params, set) = make_set(6, 11);
        let mut trimap = Trimap::filled(8, 8, TrimapLabel::Bg);
        for r in 0..8 {
            for c in 0..8 {
                if r < 3 {
                    trimap.set(r, c, TrimapLabel::Fg);
                } else if r < 5 {
                    trimap.set(r, c, TrimapLabel::Unk);
                }
            }
        }
        let table = params
            .value(set.table)
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap()
            .to_owned();
        let map = expand_map(&table, &trimap, 4, 4);
        let expected = downsample_labels(&trimap, 4, 4);
        for (pos, &want) in expected.iter().enumerate() {
            let mut best = (f64::INFINITY, usize::MAX);
            for t in 0..3 {
                let d2: f64 = (0..6)
                    .map(|c| (map.data[(pos, c)] - table[(t, c)]).powi(2))
                    .sum();
                if d2 < best.0 {
                    best = (d2, t);
                }
            }
            assert_eq!(best.1, want, "position {pos}");
            assert_eq!(best.0, 0.0, "lookup must be bit-exact");
        }
    }

    #[test]
    fn gradient_routes_to_labeled_positions_only() {
        let (params, set) = make_set(2, 13);
        let labels = array![[0u8, 1, 2], [2, 1, 0]];
        let trimap = Trimap::from_indices(labels).unwrap();

        let mut graph = Graph::<f64>::new();
        let mut ctx = ForwardCtx::new(&mut graph, &params, true);
        let map = expand(&mut ctx, &set, &trimap, 2, 3);
        // Weighted sum with distinct weights per position.
        let weights = ndarray::ArrayD::from_shape_fn(ndarray::IxDyn(&[6, 2]), |idx| {
            (idx[0] * 2 + idx[1]) as f64 + 1.0
        });
        let p = ctx.g.mul_const(map, &weights);
        let loss = ctx.g.sum_all(p);
        let table_var = ctx.bound_var(set.table).unwrap();
        let grads = graph.backward(loss);
        let dt = grads.get(table_var).unwrap();

        // Perturbing token i by delta changes exactly the positions labeled i
        // by delta, so d(loss)/d(token_i) is the sum of weights over those
        // positions.
        let idx = downsample_labels(&trimap, 2, 3);
        for token in 0..3 {
            for c in 0..2 {
                let expected: f64 = idx
                    .iter()
                    .enumerate()
                    .filter(|(_, &l)| l == token)
                    .map(|(i, _)| (i * 2 + c) as f64 + 1.0)
                    .sum();
                assert_eq!(dt[[token, c]], expected);
            }
        }
    }
}
