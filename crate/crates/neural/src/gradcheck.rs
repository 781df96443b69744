//! Finite-difference verification of the reverse pass.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{NnError, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

const STEP: f64 = 1e-5;
const DROPOUT_SEED: u64 = 99;

/// Outcome of one gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub op: String,
    pub tolerance: f64,
    pub max_rel_err: f64,
    /// Input index and flat entry of the largest error.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub entries: usize,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let verdict = if self.passed() { "ok" } else { "FAIL" };
        write!(
            f,
            "{verdict:4} {:<16} max rel err {:.2e} (tol {:.0e}) over {} entries",
            self.op, self.max_rel_err, self.tolerance, self.entries
        )?;
        if !self.passed() {
            write!(
                f,
                "; worst at input {} entry {}: analytic {:.6e}, numeric {:.6e}",
                self.worst.0, self.worst.1, self.analytic, self.numeric
            )?;
        }
        Ok(())
    }
}

fn scalar_loss<F>(build: &F, inputs: &[Tensor<f64>], probe: &Tensor<f64>, train: bool) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new(train, ChaCha8Rng::seed_from_u64(DROPOUT_SEED));
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    let r = g.input(probe.clone());
    let loss = g.dot(out, r)?;
    Ok(g.value(loss).data[0])
}

/// Compares reverse-mode gradients of `Σ r·build(inputs)` (with a fixed
/// random probe `r`) against central differences for every input entry.
///
/// The error of an entry is `|a − n| / max(|a|, |n|, 1e−3·s)` where `s` is
/// the largest numeric gradient magnitude of that input, so entries whose
/// true gradient is negligible do not dominate.
pub fn check<F>(op: &str, inputs: Vec<Tensor<f64>>, tolerance: f64, train: bool, seed: u64, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_9b0e);
    let analytic = {
        let mut g = Graph::new(train, ChaCha8Rng::seed_from_u64(DROPOUT_SEED));
        let vars: Vec<Var> = inputs.iter().map(|t| g.input_with_grad(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        let probe = Tensor::randn(g.shape(out), 1.0, &mut rng);
        let r = g.input(probe.clone());
        let loss = g.dot(out, r)?;
        let grads = g.backward(loss)?;
        let per_input: Vec<Tensor<f64>> = vars
            .iter()
            .zip(&inputs)
            .map(|(v, t)| grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(&t.shape)))
            .collect();
        (per_input, probe)
    };
    let (analytic, probe) = analytic;

    let mut report = GradCheckReport {
        op: op.to_string(),
        tolerance,
        max_rel_err: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        entries: 0,
    };
    let mut work = inputs.clone();
    for (k, input) in inputs.iter().enumerate() {
        let mut numeric = vec![0.0; input.len()];
        for (i, n) in numeric.iter_mut().enumerate() {
            let x0 = input.data[i];
            work[k].data[i] = x0 + STEP;
            let up = scalar_loss(&build, &work, &probe, train)?;
            work[k].data[i] = x0 - STEP;
            let down = scalar_loss(&build, &work, &probe, train)?;
            work[k].data[i] = x0;
            *n = (up - down) / (2.0 * STEP);
        }
        let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for (i, (&a, &n)) in analytic[k].data.iter().zip(&numeric).enumerate() {
            let denom = a.abs().max(n.abs()).max(1e-3 * scale).max(f64::MIN_POSITIVE);
            let err = (a - n).abs() / denom;
            if err > report.max_rel_err || (report.entries == 0 && i == 0) {
                report.max_rel_err = report.max_rel_err.max(err);
                report.worst = (k, i);
                report.analytic = a;
                report.numeric = n;
            }
            report.entries += 1;
        }
    }
    Ok(report)
}

/// Names accepted by [`check_op`].
pub const OPS: &[&str] = &[
    "conv2d",
    "conv2d_strided",
    "subband_conv2d",
    "conv_transpose2d",
    "channel_norm",
    "swish",
    "dropout",
    "embedding",
    "mul",
    "add",
    "concat",
    "crop",
    "pad",
    "apply_mixing",
    "complex_l1",
];

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, rng)
}

/// Runs the registered check for `op` on its toy shape.
pub fn check_op(op: &str, seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    match op {
        "conv2d" => check(op, vec![randn(&[2, 6, 6], r), randn(&[3, 2, 3, 3], r), randn(&[3], r)], 1e-3, false, seed, |g, v| {
            g.conv2d(v[0], v[1], Some(v[2]), [1, 1], [1, 1])
        }),
        "conv2d_strided" => check(op, vec![randn(&[2, 8, 6], r), randn(&[3, 2, 3, 3], r), randn(&[3], r)], 1e-3, false, seed, |g, v| {
            g.conv2d(v[0], v[1], Some(v[2]), [2, 2], [1, 1])
        }),
        "subband_conv2d" => check(op, vec![randn(&[2, 8, 6], r), randn(&[8, 3, 2, 3, 3], r), randn(&[8, 3], r)], 1e-3, false, seed, |g, v| {
            g.subband_conv2d(v[0], v[1], Some(v[2]), 1)
        }),
        "conv_transpose2d" => check(op, vec![randn(&[3, 4, 3], r), randn(&[3, 2, 3, 3], r), randn(&[2], r)], 1e-3, false, seed, |g, v| {
            g.conv_transpose2d(v[0], v[1], Some(v[2]), [2, 2], [1, 1], [1, 1])
        }),
        "channel_norm" => check(op, vec![randn(&[4, 8, 8], r), randn(&[4], r), randn(&[4], r)], 1e-3, false, seed, |g, v| {
            g.channel_norm(v[0], v[1], v[2])
        }),
        "swish" => check(op, vec![randn(&[2, 5, 4], r).map(|x| 3.0 * x)], 1e-6, false, seed, |g, v| g.swish(v[0])),
        "dropout" => check(op, vec![randn(&[2, 6, 5], r)], 1e-6, true, seed, |g, v| g.dropout(v[0], 0.5)),
        "embedding" => check(op, vec![randn(&[25, 6], r)], 1e-6, false, seed, |g, v| {
            g.embedding(v[0], &[0, 24, 7, 7, 13], 4)
        }),
        "mul" => check(op, vec![randn(&[2, 4, 3], r), randn(&[2, 4, 3], r)], 1e-6, false, seed, |g, v| g.mul(v[0], v[1])),
        "add" => check(op, vec![randn(&[2, 4, 3], r), randn(&[2, 4, 3], r)], 1e-6, false, seed, |g, v| g.add(v[0], v[1])),
        "concat" => check(op, vec![randn(&[2, 4, 3], r), randn(&[1, 4, 3], r)], 1e-6, false, seed, |g, v| g.concat(&[v[0], v[1]])),
        "crop" => check(op, vec![randn(&[2, 6, 5], r)], 1e-6, false, seed, |g, v| g.crop(v[0], 4, 3)),
        "pad" => check(op, vec![randn(&[2, 4, 3], r)], 1e-6, false, seed, |g, v| g.pad(v[0], 6, 5)),
        "apply_mixing" => check(op, vec![randn(&[2 * 4 * 5, 3, 4], r), randn(&[10, 3, 4], r)], 1e-6, false, seed, |g, v| {
            g.apply_mixing(v[0], v[1], 4)
        }),
        "complex_l1" => check(op, vec![randn(&[4, 3, 4], r), randn(&[4, 3, 4], r)], 1e-6, false, seed, |g, v| {
            g.complex_l1(v[0], v[1], false)
        }),
        other => Err(NnError::Input(format!("no gradient check registered for {other}"))),
    }
}

/// Runs every registered check.
pub fn suite(seed: u64) -> Result<Vec<GradCheckReport>> {
    OPS.iter().map(|op| check_op(op, seed)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_registered_op_passes() {
        for report in suite(5).unwrap() {
            eprintln!("{report}");
            assert!(report.passed(), "{report}");
        }
    }

    #[test]
    fn a_wrong_gradient_is_reported() {
        // d(x·x) computed through a node that stops the gradient of one factor
        let x = Tensor::from_vec(&[1, 1, 3], vec![0.5, -1.0, 2.0]).unwrap();
        let report = check("half_square", vec![x], 1e-6, false, 1, |g, v| {
            let frozen = g.input(g.value(v[0]).clone());
            g.mul(v[0], frozen)
        })
        .unwrap();
        assert!(!report.passed());
        assert!((report.numeric / report.analytic - 2.0).abs() < 1e-6, "{report}");
        assert!(report.to_string().contains("worst at input 0"));
    }

    #[test]
    fn unknown_op_is_an_error() {
        assert!(check_op("softmax", 0).is_err());
    }
}
