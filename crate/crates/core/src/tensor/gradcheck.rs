//! Finite-difference verification of reverse-mode gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradcheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Maximum accepted `|analytic - fd| / (|fd| + 1e-8)`.
    pub tolerance: f64,
    /// Check at most this many coordinates per tensor (sampled without
    /// replacement); `None` checks all.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            step: 1e-3,
            tolerance: 1e-4,
            max_coords: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Mismatch {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradcheckReport {
    pub checked: usize,
    /// Coordinates whose perturbation crossed a non-differentiable point.
    pub skipped: usize,
    pub max_rel_err: f64,
    pub failures: Vec<Mismatch>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty() && self.checked > 0
    }

    pub fn skipped_fraction(&self) -> f64 {
        let total = self.checked + self.skipped;
        if total == 0 {
            0.0
        } else {
            self.skipped as f64 / total as f64
        }
    }

    pub fn merge(&mut self, other: GradcheckReport) {
        self.checked += other.checked;
        self.skipped += other.skipped;
        self.max_rel_err = self.max_rel_err.max(other.max_rel_err);
        self.failures.extend(other.failures);
    }
}

/// A named, perturbable tensor fed to the function under test.
pub struct Operand {
    pub name: String,
    pub value: Tensor<f64>,
    /// Operands that are not checked still enter the graph unchanged.
    pub check: bool,
}

impl Operand {
    pub fn new(name: impl Into<String>, value: Tensor<f64>) -> Self {
        Operand {
            name: name.into(),
            value,
            check: true,
        }
    }

    pub fn fixed(name: impl Into<String>, value: Tensor<f64>) -> Self {
        Operand {
            check: false,
            ..Operand::new(name, value)
        }
    }
}

/// Compares analytic and central-difference gradients of
/// `sum(f(operands) * R)` for a fixed random projection `R`.
///
/// `build` records the function on a fresh graph and returns its output
/// together with the leaf holding each operand, in order.
pub fn check<F>(operands: &mut [Operand], mut build: F, cfg: &GradcheckConfig) -> Result<GradcheckReport>
where
    F: FnMut(&mut Graph<f64>, &[Operand]) -> Result<(Var, Vec<Var>)>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut projection: Option<Tensor<f64>> = None;

    let mut eval = |ops: &[Operand], proj: &mut Option<Tensor<f64>>, rng: &mut ChaCha8Rng, grads: bool| {
        let mut g = Graph::new();
        let (out, leaves) = build(&mut g, ops)?;
        if leaves.len() != ops.len() {
            return Err(Error::invalid("gradcheck", "one leaf per operand required"));
        }
        let shape = g.shape(out).to_vec();
        let r = proj.get_or_insert_with(|| Tensor::from_fn(shape.clone(), |_| rng.random_range(-1.0..1.0)));
        if r.shape() != shape.as_slice() {
            return Err(Error::shape("gradcheck", "output shape changed under perturbation"));
        }
        let rv = g.input(r.clone());
        let prod = g.mul(out, rv)?;
        let loss = g.sum(prod);
        let value = g.value(loss).item();
        let sig = g.kink_signature();
        let analytic = if grads {
            g.backward(loss)?;
            leaves
                .iter()
                .zip(ops)
                .map(|(&v, op)| {
                    g.grad(v)
                        .map(<[f64]>::to_vec)
                        .unwrap_or_else(|| vec![0.0; op.value.numel()])
                })
                .collect()
        } else {
            Vec::new()
        };
        Ok::<_, Error>((value, sig, analytic))
    };

    let (_, base_sig, analytic) = eval(operands, &mut projection, &mut rng, true)?;
    let mut report = GradcheckReport::default();
    for t in 0..operands.len() {
        if !operands[t].check {
            continue;
        }
        let n = operands[t].value.numel();
        let coords: Vec<usize> = match cfg.max_coords {
            Some(k) if k < n => rand::seq::index::sample(&mut rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        for idx in coords {
            let orig = operands[t].value.data()[idx];
            operands[t].value.data_mut()[idx] = orig + cfg.step;
            let plus = eval(operands, &mut projection, &mut rng, false);
            operands[t].value.data_mut()[idx] = orig - cfg.step;
            let minus = eval(operands, &mut projection, &mut rng, false);
            operands[t].value.data_mut()[idx] = orig;
            let ((lp, sp, _), (lm, sm, _)) = (plus?, minus?);
            if sp != base_sig || sm != base_sig {
                report.skipped += 1;
                continue;
            }
            let numeric = (lp - lm) / (2.0 * cfg.step);
            let a = analytic[t][idx];
            let rel_err = (a - numeric).abs() / (numeric.abs() + 1e-8);
            report.checked += 1;
            report.max_rel_err = report.max_rel_err.max(rel_err);
            if rel_err >= cfg.tolerance || !rel_err.is_finite() {
                report.failures.push(Mismatch {
                    tensor: operands[t].name.clone(),
                    index: idx,
                    analytic: a,
                    numeric,
                    rel_err,
                });
            }
        }
    }
    Ok(report)
}

/// Convenience wrapper: every operand becomes a differentiable leaf and
/// `f` maps those leaves to the output.
pub fn check_fn<F>(operands: &mut [Operand], mut f: F, cfg: &GradcheckConfig) -> Result<GradcheckReport>
where
    F: FnMut(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    check(
        operands,
        |g, ops| {
            let leaves: Vec<Var> = ops.iter().map(|o| g.param(o.value.clone())).collect();
            let out = f(g, &leaves)?;
            Ok((out, leaves))
        },
        cfg,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn tanh_exp_pass() {
        let mut ops = [Operand::new("x", randn(&[2, 3], 1))];
        let r = check_fn(
            &mut ops,
            |g, v| {
                let t = g.tanh(v[0]);
                Ok(g.exp(t))
            },
            &GradcheckConfig::default(),
        )
        .unwrap();
        assert!(r.passed(), "{r:?}");
        assert_eq!(r.checked, 6);
    }

    #[test]
    fn detects_wrong_gradient() {
        // detach hides the dependence, so the analytic gradient is zero
        let mut ops = [Operand::new("x", randn(&[4], 2))];
        let r = check_fn(
            &mut ops,
            |g, v| {
                let d = g.detach(v[0]);
                g.mul(v[0], d)
            },
            &GradcheckConfig::default(),
        )
        .unwrap();
        assert!(!r.passed());
    }
}
