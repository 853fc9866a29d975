//! Central finite-difference checking of analytic gradients.

use std::fmt;

use rand::seq::index::sample;
use rand::Rng;

use super::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    pub epsilon: f64,
    pub tolerance: f64,
    /// Check only this many randomly chosen entries across all inputs.
    pub sample_entries: Option<usize>,
    /// Judge all checked entries as one vector instead of input by input.
    /// Suits whole networks, where single parameters can have near-zero
    /// gradients that make a per-input ratio meaningless.
    pub pooled: bool,
    /// How many times to shrink the step tenfold when the one-sided slopes
    /// at an entry disagree, which means a kink lies within one step of the
    /// point. Zero keeps the plain central difference.
    pub refinements: u32,
}

impl GradcheckOptions {
    /// Defaults for ops that are linear in the checked inputs.
    pub fn linear() -> Self {
        Self {
            epsilon: 1e-5,
            tolerance: 1e-6,
            sample_entries: None,
            pooled: false,
            refinements: 0,
        }
    }

    /// Defaults for nonlinear ops and whole-model losses.
    pub fn composite() -> Self {
        Self {
            epsilon: 1e-6,
            tolerance: 1e-4,
            sample_entries: None,
            pooled: false,
            refinements: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct InputReport {
    pub input: usize,
    pub checked: usize,
    pub rel_error: f64,
    /// Entries that needed a smaller step.
    pub refined: usize,
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub inputs: Vec<InputReport>,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} max_rel_error={:.3e} tolerance={:.1e}",
            if self.passed { "PASS" } else { "FAIL" },
            self.max_rel_error,
            self.tolerance
        )?;
        for r in &self.inputs {
            write!(f, " [input {}: {} entries, {:.3e}", r.input, r.checked, r.rel_error)?;
            if r.refined > 0 {
                write!(f, ", {} refined", r.refined)?;
            }
            write!(f, "]")?;
        }
        Ok(())
    }
}

/// Norm-wise relative error `‖a − n‖ / max(‖a‖, ‖n‖, 1e-6)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, b)| a - b).collect();
    norm(&diff) / norm(analytic).max(norm(numeric)).max(1e-6)
}

/// Compares analytic gradients of `op` with central differences.
///
/// `op` receives fresh leaves for `inputs` and returns its output. A
/// non-scalar output is reduced with a fixed random projection so that every
/// output element contributes.
pub fn gradcheck<F, R>(
    op: F,
    inputs: &[Tensor],
    opts: &GradcheckOptions,
    rng: &mut R,
) -> Result<GradcheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
    R: Rng + ?Sized,
{
    if inputs.iter().any(|t| !t.is_finite()) {
        return Err(Error::InvalidArgument("gradcheck inputs must be finite".into()));
    }

    let mut probe = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| probe.param(t.clone())).collect();
    let out = op(&mut probe, &vars)?;
    let projection = if probe.value(out).numel() == 1 {
        None
    } else {
        Some(Tensor::uniform(probe.shape(out), -1.0, 1.0, rng))
    };

    let eval = |values: &[Tensor], analytic: bool| -> Result<(f64, Vec<Tensor>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.param(t.clone())).collect();
        let out = op(&mut g, &vars)?;
        let root = match &projection {
            None => out,
            Some(p) => {
                let pv = g.constant(p.clone());
                let prod = g.mul(out, pv)?;
                g.sum(prod)
            }
        };
        let f = g.value(root).item()?;
        let mut grads = Vec::new();
        if analytic {
            g.backward(root)?;
            for (v, t) in vars.iter().zip(values) {
                grads.push(g.grad(*v).unwrap_or_else(|| Tensor::zeros(t.shape())));
            }
        }
        Ok((f, grads))
    };

    let (f0, analytic) = eval(inputs, true)?;

    let total: usize = inputs.iter().map(Tensor::numel).sum();
    let mut chosen: Vec<usize> = match opts.sample_entries {
        Some(k) if k < total => sample(rng, total, k).into_vec(),
        _ => (0..total).collect(),
    };
    chosen.sort_unstable();

    let mut per_input: Vec<(Vec<f64>, Vec<f64>, usize)> = vec![(Vec::new(), Vec::new(), 0); inputs.len()];
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut offset = 0;
    let mut cursor = 0;
    for (i, t) in inputs.iter().enumerate() {
        let end = offset + t.numel();
        while cursor < chosen.len() && chosen[cursor] < end {
            let j = chosen[cursor] - offset;
            let orig = t.data()[j];
            let mut eps = opts.epsilon;
            let mut round = 0;
            let numeric = loop {
                let (xp, xm) = (orig + eps, orig - eps);
                work[i].data_mut()[j] = xp;
                let (fp, _) = eval(&work, false)?;
                work[i].data_mut()[j] = xm;
                let (fm, _) = eval(&work, false)?;
                work[i].data_mut()[j] = orig;
                // the realized step, not 2ε, so representation error cancels
                let central = (fp - fm) / (xp - xm);
                let right = (fp - f0) / (xp - orig);
                let left = (f0 - fm) / (orig - xm);
                let gap = (right - left).abs() / right.abs().max(left.abs()).max(1e-6);
                if gap <= opts.tolerance || round == opts.refinements {
                    break central;
                }
                eps /= 10.0;
                round += 1;
            };
            per_input[i].0.push(analytic[i].data()[j]);
            per_input[i].1.push(numeric);
            per_input[i].2 += usize::from(round > 0);
            cursor += 1;
        }
        offset = end;
    }

    let reports: Vec<InputReport> = per_input
        .iter()
        .enumerate()
        .filter(|(_, (a, _, _))| !a.is_empty())
        .map(|(i, (a, n, refined))| InputReport {
            input: i,
            checked: a.len(),
            rel_error: relative_error(a, n),
            refined: *refined,
        })
        .collect();
    let max_rel_error = if opts.pooled {
        let (a, n): (Vec<f64>, Vec<f64>) = per_input.into_iter().fold((Vec::new(), Vec::new()), |mut acc, (a, n, _)| {
            acc.0.extend(a);
            acc.1.extend(n);
            acc
        });
        relative_error(&a, &n)
    } else {
        reports.iter().map(|r| r.rel_error).fold(0.0, f64::max)
    };
    Ok(GradcheckReport {
        passed: max_rel_error < opts.tolerance,
        inputs: reports,
        max_rel_error,
        tolerance: opts.tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_op_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for eps in [1e-1, 1e-2, 1e-3, 1e-4] {
            let x = Tensor::randn(&[5], 1.0, &mut rng);
            let opts = GradcheckOptions {
                epsilon: eps,
                ..GradcheckOptions::linear()
            };
            let r = gradcheck(|g, v| Ok(g.scale(v[0], 3.0)), &[x], &opts, &mut rng).unwrap();
            assert!(r.max_rel_error < 1e-10, "{r}");
        }
    }

    #[test]
    fn corrupted_rule_fails() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn(&[2, 1, 4, 4], 1.0, &mut rng);
        let w = Tensor::randn(&[1, 1, 3, 3], 1.0, &mut rng);
        let r = gradcheck(
            |g, v| {
                g.corrupt_backward_rules();
                g.conv2d(v[0], v[1], None, 1, 1)
            },
            &[x, w],
            &GradcheckOptions::linear(),
            &mut rng,
        )
        .unwrap();
        assert!(!r.passed);
    }

    #[test]
    fn sampling_limits_entries() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = Tensor::randn(&[10], 1.0, &mut rng);
        let b = Tensor::randn(&[10], 1.0, &mut rng);
        let opts = GradcheckOptions {
            sample_entries: Some(5),
            ..GradcheckOptions::composite()
        };
        let r = gradcheck(|g, v| g.mul(v[0], v[1]), &[a, b], &opts, &mut rng).unwrap();
        assert_eq!(r.inputs.iter().map(|i| i.checked).sum::<usize>(), 5);
        assert!(r.passed, "{r}");
    }

    #[test]
    fn refinement_steps_inside_a_nearby_kink() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        // relu at 3e-7: a 1e-6 step straddles the kink, 1e-7 does not
        let x = Tensor::new(&[1], vec![3e-7]).unwrap();
        let plain = GradcheckOptions::composite();
        let r = gradcheck(|g, v| Ok(g.relu(v[0])), &[x.clone()], &plain, &mut rng).unwrap();
        assert!(!r.passed, "{r}");
        let refined = GradcheckOptions { refinements: 2, ..plain };
        let r = gradcheck(|g, v| Ok(g.relu(v[0])), &[x], &refined, &mut rng).unwrap();
        assert!(r.passed, "{r}");
        assert_eq!(r.inputs[0].refined, 1);
    }
}
