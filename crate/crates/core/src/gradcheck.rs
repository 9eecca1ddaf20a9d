//! Central finite-difference verification of analytic gradients.
//!
//! The checker rebuilds the forward pass with single coordinates perturbed by
//! `±eps` and compares the resulting slope against the backward pass. It is
//! both a test utility and a CLI-facing diagnostic (`gradcheck` subcommand).

use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};

pub const DEFAULT_EPS: f64 = 1e-5;
pub const COMPONENT_TOL: f64 = 1e-4;
pub const FULL_MODEL_TOL: f64 = 1e-3;

/// When a probe disagrees with the analytic gradient, the step is shrunk by
/// this factor and retried. A kink (ReLU flip) inside the original window
/// stops straddling it as the window shrinks, so the slope converges to the
/// analytic value; a genuinely wrong backward never converges.
const EPS_REFINE: f64 = 8.0;
const EPS_REFINEMENTS: usize = 3;

/// Floor used in the relative-error denominator so near-zero gradient pairs
/// do not blow up the ratio.
const REL_FLOOR: f64 = 1e-6;

/// Analytic/numeric pairs that are both below this magnitude are treated as
/// zero; central differences cannot resolve slopes this small.
const NEGLIGIBLE: f64 = 1e-7;

#[derive(Debug, Clone)]
pub struct TensorCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub probes: usize,
}

#[derive(Debug, Clone)]
pub struct CheckReport {
    pub component: String,
    pub tol: f64,
    pub per_tensor: Vec<TensorCheck>,
}

impl CheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.per_tensor
            .iter()
            .map(|t| t.max_rel_err)
            .fold(0.0, f64::max)
    }

    pub fn worst_tensor(&self) -> &str {
        self.per_tensor
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
            .map(|t| t.name.as_str())
            .unwrap_or("")
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err() <= self.tol
    }

    pub fn into_result(self) -> Result<CheckReport> {
        if self.passed() {
            Ok(self)
        } else {
            Err(Error::GradCheckFailed {
                tensor: self.worst_tensor().to_string(),
                rel_err: self.max_rel_err(),
            })
        }
    }
}

impl std::fmt::Display for CheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(
            f,
            "gradcheck {}: {} (max rel err {:.3e}, tol {:.1e})",
            self.component,
            if self.passed() { "PASS" } else { "FAIL" },
            self.max_rel_err(),
            self.tol
        )?;
        for t in &self.per_tensor {
            writeln!(
                f,
                "  {:<40} rel err {:.3e}  (analytic {:+.6e}, numeric {:+.6e}, {} probes)",
                t.name, t.max_rel_err, t.worst_analytic, t.worst_numeric, t.probes
            )?;
        }
        Ok(())
    }
}

fn flat_to_coords(mut flat: usize, shape: &[usize]) -> Vec<usize> {
    let mut coords = vec![0; shape.len()];
    for (axis, &extent) in shape.iter().enumerate().rev() {
        coords[axis] = flat % extent;
        flat /= extent;
    }
    coords
}

/// Verifies the gradient that `build` induces on every named tensor.
///
/// `build` receives the tensors as trainable graph leaves (same order) and
/// must return a scalar loss. Tensors larger than `max_probes` coordinates
/// are spot-checked at seeded random coordinates.
pub fn check_gradients(
    component: &str,
    tensors: &[(String, ArrayD<f64>)],
    build: &dyn Fn(&mut Graph<f64>, &[Var]) -> Var,
    eps: f64,
    tol: f64,
    max_probes: usize,
    seed: u64,
) -> CheckReport {
    let evaluate = |values: &[ArrayD<f64>]| -> f64 {
        let mut graph = Graph::<f64>::new();
        let vars: Vec<Var> = values.iter().map(|v| graph.param(v.clone())).collect();
        let loss = build(&mut graph, &vars);
        graph.scalar_value(loss)
    };

    // Analytic gradients from one backward pass.
    let mut graph = Graph::<f64>::new();
    let vars: Vec<Var> = tensors
        .iter()
        .map(|(_, v)| graph.param(v.clone()))
        .collect();
    let loss = build(&mut graph, &vars);
    let grads = graph.backward(loss);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base: Vec<ArrayD<f64>> = tensors.iter().map(|(_, v)| v.clone()).collect();
    let mut per_tensor = Vec::new();

    for (ti, (name, value)) in tensors.iter().enumerate() {
        let analytic = grads.get_or_zeros(vars[ti], value.shape());
        let numel = value.len();
        let probe_flats: Vec<usize> = if numel <= max_probes {
            (0..numel).collect()
        } else {
            let mut seen = std::collections::BTreeSet::new();
            while seen.len() < max_probes {
                seen.insert(rng.gen_range(0..numel));
            }
            seen.into_iter().collect()
        };

        let mut check = TensorCheck {
            name: name.clone(),
            max_rel_err: 0.0,
            worst_analytic: 0.0,
            worst_numeric: 0.0,
            probes: probe_flats.len(),
        };
        for flat in probe_flats {
            let coords = flat_to_coords(flat, value.shape());
            let idx = IxDyn(&coords);
            let a = analytic[&idx];

            let central_diff = |step: f64| -> f64 {
                let mut plus = base.clone();
                plus[ti][&idx] += step;
                let mut minus = base.clone();
                minus[ti][&idx] -= step;
                (evaluate(&plus) - evaluate(&minus)) / (2.0 * step)
            };
            let rel_of = |numeric: f64| -> f64 {
                if a.abs().max(numeric.abs()) < NEGLIGIBLE {
                    0.0
                } else {
                    (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR)
                }
            };

            let mut step = eps;
            let mut numeric = central_diff(step);
            let mut rel = rel_of(numeric);
            for _ in 0..EPS_REFINEMENTS {
                if rel <= tol {
                    break;
                }
                step /= EPS_REFINE;
                let refined = central_diff(step);
                let refined_rel = rel_of(refined);
                if refined_rel < rel {
                    numeric = refined;
                    rel = refined_rel;
                }
            }

            if rel > check.max_rel_err {
                check.max_rel_err = rel;
                check.worst_analytic = a;
                check.worst_numeric = numeric;
            }
        }
        per_tensor.push(check);
    }

    CheckReport {
        component: component.to_string(),
        tol,
        per_tensor,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_a_corrupted_gradient_and_names_the_tensor() {
        // y = sum(a * a) has gradient 2a; a deliberately wrong forward that
        // mixes in a constant multiple breaks the slope only for `broken`.
        let a = ArrayD::from_shape_vec(IxDyn(&[3]), vec![0.3, -0.7, 1.1]).unwrap();
        let b = ArrayD::from_shape_vec(IxDyn(&[3]), vec![0.2, 0.4, -0.9]).unwrap();
        let tensors = vec![("fine".to_string(), a), ("broken".to_string(), b)];
        let build = |g: &mut Graph<f64>, vars: &[Var]| {
            let aa = g.mul(vars[0], vars[0]);
            // The "analytic" path sees b scaled by 1, but the loss actually
            // uses 3b: the backward for `broken` is wrong by construction.
            let b_detached = g.constant(g.value(vars[1]).clone());
            let two_b = g.scale(b_detached, 2.0);
            let b_eff = g.add(vars[1], two_b);
            let bb = g.mul(b_eff, b_eff);
            let s1 = g.sum_all(aa);
            let s2 = g.sum_all(bb);
            g.add(s1, s2)
        };
        let report = check_gradients("selftest", &tensors, &build, DEFAULT_EPS, 1e-4, 16, 0);
        assert!(!report.passed());
        assert_eq!(report.worst_tensor(), "broken");
        let fine = report.per_tensor.iter().find(|t| t.name == "fine").unwrap();
        assert!(fine.max_rel_err <= 1e-6, "clean tensor must pass");
        assert!(report.into_result().is_err());
    }
}
