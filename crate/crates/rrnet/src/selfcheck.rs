//! Gradient checks and algebraic invariants runnable from the command line.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rrnet_core::check::{network_case, op_cases, random_tensor, tiny_network_config};
use rrnet_core::graph::{adjacency_eval, permute_channels, permute_pixels, reason_eval, GraphFeatures, GraphMode, ReasoningConfig, ReasoningParams};
use rrnet_core::metrics::{evaluate, MetricConfig};
use rrnet_core::ops::{balance_weights, normalized_laplacian};
use rrnet_core::Tensor;

pub const GRAD_STEP: f64 = 1e-6;
pub const GRAD_TOL: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct Outcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn outcome(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        name: name.into(),
        passed,
        detail: detail.into(),
    }
}

/// Eigenvalues of a symmetric matrix.
pub fn symmetric_eigenvalues(m: &Tensor<f64>) -> Vec<f64> {
    let n = m.shape()[0];
    DMatrix::from_row_slice(n, n, m.data())
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .copied()
        .collect()
}

/// Random symmetric adjacency with non-negative entries; some rows are
/// zeroed to exercise isolated vertices.
pub fn random_adjacency(rng: &mut ChaCha8Rng, n: usize) -> Tensor<f64> {
    let isolated = rng.gen_range(0..n);
    let mut a = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in i..n {
            let v = if i == isolated || j == isolated || rng.gen_bool(0.2) {
                0.0
            } else {
                rng.gen_range(0.0..2.0)
            };
            a.data_mut()[i * n + j] = v;
            a.data_mut()[j * n + i] = v;
        }
    }
    a
}

pub fn run(include_network: bool) -> Vec<Outcome> {
    let mut out = Vec::new();
    for case in op_cases(0) {
        out.push(match case.run(GRAD_STEP) {
            Ok(r) => {
                let e = r.max_rel_error();
                outcome(format!("grad {}", case.name), e < GRAD_TOL, format!("rel {e:.2e}"))
            }
            Err(e) => outcome(format!("grad {}", case.name), false, e.to_string()),
        });
    }
    if include_network {
        let r = network_case(tiny_network_config(), 0).and_then(|c| c.run(GRAD_STEP));
        out.push(match r {
            Ok(r) => {
                let e = r.joint_rel_error();
                outcome("grad network", e < GRAD_TOL, format!("rel {e:.2e}"))
            }
            Err(e) => outcome("grad network", false, e.to_string()),
        });
    }
    out.extend(invariants());
    out
}

fn invariants() -> Vec<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut out = Vec::new();

    let x = random_tensor(&mut rng, &[4, 4, 6]);
    let sp = ReasoningParams::<f64>::xavier(6, true, 1);
    let cp = ReasoningParams::<f64>::xavier(16, true, 2);
    let cfg = ReasoningConfig::default();

    let sym = GraphFeatures::build(&x, GraphMode::Spatial)
        .and_then(|g| adjacency_eval(&g, &sp))
        .map(|a| a.transpose2().map(|t| t == a).unwrap_or(false));
    out.push(outcome("adjacency symmetry", matches!(sym, Ok(true)), ""));

    let mut worst: (f64, f64) = (f64::INFINITY, f64::NEG_INFINITY);
    for _ in 0..20 {
        let n = rng.gen_range(2..10);
        if let Ok(l) = normalized_laplacian(&random_adjacency(&mut rng, n), 1e-6) {
            for e in symmetric_eigenvalues(&l) {
                worst = (worst.0.min(e), worst.1.max(e));
            }
        } else {
            worst = (f64::NAN, f64::NAN);
        }
    }
    out.push(outcome(
        "laplacian spectrum",
        worst.0 >= -1e-8 && worst.1 <= 2.0 + 1e-8,
        format!("eigenvalues in [{:.3e}, {:.6}]", worst.0, worst.1),
    ));

    let mut perm: Vec<usize> = (0..16).collect();
    perm.reverse();
    perm.swap(3, 9);
    let eq = (|| -> rrnet_core::Result<bool> {
        let y = reason_eval(&x, GraphMode::Spatial, &sp, &cfg)?;
        let yp = reason_eval(&permute_pixels(&x, &perm)?, GraphMode::Spatial, &sp, &cfg)?;
        Ok(yp == permute_pixels(&y, &perm)?)
    })();
    out.push(outcome("spatial reasoning equivariance", matches!(eq, Ok(true)), ""));

    let cperm = [4, 0, 5, 2, 1, 3];
    let eq = (|| -> rrnet_core::Result<bool> {
        let y = reason_eval(&x, GraphMode::Channel, &cp, &cfg)?;
        let yp = reason_eval(&permute_channels(&x, &cperm)?, GraphMode::Channel, &cp, &cfg)?;
        Ok(yp == permute_channels(&y, &cperm)?)
    })();
    out.push(outcome("channel reasoning equivariance", matches!(eq, Ok(true)), ""));

    let label = Tensor::from_fn(&[8, 8], |i| if i % 3 == 0 { 1.0 } else { 0.0 });
    let w = balance_weights(&label);
    out.push(outcome(
        "loss weights sum to one",
        matches!(w, Ok(w) if w.p + w.q == 1.0),
        "",
    ));

    let gt = Tensor::from_fn(&[16, 16], |i| if (i / 16) % 5 < 2 && i % 16 > 4 { 1.0 } else { 0.0 });
    let m = evaluate(&gt, &gt, &MetricConfig::default());
    let ok = matches!(&m, Ok(m) if m.mae == 0.0
        && (m.f_beta.unwrap_or(0.0) - 1.0).abs() < 1e-6
        && (m.s_m - 1.0).abs() < 1e-6
        && (m.e_m - 1.0).abs() < 1e-6);
    out.push(outcome("metric identity", ok, ""));
    out
}
