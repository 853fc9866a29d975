//! Reductions used by the localization objective.

use std::sync::Arc;

use super::{Graph, Op, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// First index holding the maximum of `x` over `idx` (ties → lowest index).
fn argmax_of(x: &[f64], idx: &[usize]) -> usize {
    let mut best = idx[0];
    for &i in &idx[1..] {
        if x[i] > x[best] || (x[i] == x[best] && i < best) {
            best = i;
        }
    }
    best
}

impl Graph {
    /// Flattens `[N, C, h_s, w_s]` maps into one `[N, M]` table.
    ///
    /// Column order is scale-major, then location (row-major), then class:
    /// `offset_s + (y * w_s + x) * C + c`.
    pub fn joint_flatten(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::InvalidArgument("joint_flatten of zero maps".into()))?;
        let [n, c, _, _] = self.value(first).dims4("joint_flatten")?;
        let mut m = 0;
        for &v in inputs {
            let [vn, vc, h, w] = self.value(v).dims4("joint_flatten")?;
            if vn != n || vc != c {
                return Err(Error::shape(
                    "joint_flatten",
                    format!("maps disagree on batch/classes: {:?}", self.shape(v)),
                ));
            }
            m += c * h * w;
        }
        let mut out = vec![0.0; n * m];
        let mut offset = 0;
        for &v in inputs {
            let [_, _, h, w] = self.value(v).dims4("joint_flatten")?;
            let hw = h * w;
            let src = self.value(v).data();
            for b in 0..n {
                for ch in 0..c {
                    for l in 0..hw {
                        out[b * m + offset + l * c + ch] = src[(b * c + ch) * hw + l];
                    }
                }
            }
            offset += c * hw;
        }
        let out = Tensor::new(&[n, m], out)?;
        Ok(self.push(
            out,
            Op::JointFlatten {
                inputs: inputs.to_vec(),
            },
        ))
    }

    /// Mean over rows of `LSE(x_n) − LSE(x_n restricted to group targets[n])`,
    /// i.e. the cross-entropy of the group marginal of `softmax(x_n)`.
    pub fn grouped_nll(
        &mut self,
        x: Var,
        group_of: Arc<Vec<usize>>,
        targets: &[usize],
    ) -> Result<Var> {
        let (n, m) = match self.shape(x) {
            &[n, m] => (n, m),
            s => return Err(Error::shape("grouped_nll", format!("expected [N, M], got {s:?}"))),
        };
        if group_of.len() != m || targets.len() != n {
            return Err(Error::shape(
                "grouped_nll",
                format!("{m} columns, {} group ids, {n} rows, {} targets", group_of.len(), targets.len()),
            ));
        }
        let ngroups = group_of.iter().max().map_or(0, |g| g + 1);
        if let Some(&t) = targets.iter().find(|&&t| t >= ngroups) {
            return Err(Error::InvalidArgument(format!(
                "label {t} out of range for {ngroups} classes"
            )));
        }
        let xs = self.value(x).data();
        let mut total = 0.0;
        for (b, &t) in targets.iter().enumerate() {
            let row = &xs[b * m..(b + 1) * m];
            let all = log_sum_exp(row.iter().copied());
            let own = log_sum_exp(
                row.iter()
                    .zip(group_of.iter())
                    .filter(|(_, &g)| g == t)
                    .map(|(v, _)| *v),
            );
            total += all - own;
        }
        let out = Tensor::scalar(total / n as f64);
        Ok(self.push(
            out,
            Op::GroupedNll {
                x,
                group_of,
                targets: targets.to_vec(),
            },
        ))
    }

    /// Mean over rows of `max(0, max_{i∈A_n} x[n,i] − max_{j∈B_n} x[n,j])`.
    ///
    /// The subgradient routes through the first maximizing entry of each set.
    pub fn hinge_max_gap(&mut self, x: Var, sets: &[(Vec<usize>, Vec<usize>)]) -> Result<Var> {
        let (n, m) = match self.shape(x) {
            &[n, m] => (n, m),
            s => return Err(Error::shape("hinge_max_gap", format!("expected [N, M], got {s:?}"))),
        };
        if sets.len() != n {
            return Err(Error::shape("hinge_max_gap", format!("{} index sets for {n} rows", sets.len())));
        }
        let xs = self.value(x).data();
        let mut total = 0.0;
        let mut picks = Vec::with_capacity(n);
        for (b, (a, bset)) in sets.iter().enumerate() {
            if a.is_empty() || bset.is_empty() || a.iter().chain(bset).any(|&i| i >= m) {
                return Err(Error::InvalidArgument("hinge_max_gap index set empty or out of range".into()));
            }
            let row = &xs[b * m..(b + 1) * m];
            let (ia, ib) = (argmax_of(row, a), argmax_of(row, bset));
            let gap = row[ia] - row[ib];
            if gap > 0.0 {
                total += gap;
                picks.push(Some((ia, ib)));
            } else {
                picks.push(None);
            }
        }
        let out = Tensor::scalar(total / n as f64);
        Ok(self.push(out, Op::HingeMaxGap { x, picks }))
    }

    /// `Σ (x[n,k,...] − reference[k])² / N` for `x` of shape `[N, K, ...]`.
    pub fn sq_dev_ref(&mut self, x: Var, reference: &[f64]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 || shape[1] != reference.len() {
            return Err(Error::shape(
                "sq_dev_ref",
                format!("shape {shape:?} vs reference of length {}", reference.len()),
            ));
        }
        let n = shape[0];
        let inner: usize = shape[2..].iter().product();
        let k = reference.len();
        let xs = self.value(x).data();
        let mut total = 0.0;
        for (i, v) in xs.iter().enumerate() {
            let d = v - reference[(i / inner) % k];
            total += d * d;
        }
        let out = Tensor::scalar(if n == 0 { 0.0 } else { total / n as f64 });
        Ok(self.push(
            out,
            Op::SqDevRef {
                x,
                reference: reference.to_vec(),
            },
        ))
    }
}

pub(super) fn joint_flatten_backward(
    graph: &Graph,
    inputs: &[Var],
    gout: &[f64],
) -> Vec<(Var, Vec<f64>)> {
    let [n, c, _, _] = graph.value(inputs[0]).dims4("joint_flatten").expect("4-d");
    let m = gout.len() / n.max(1);
    let mut offset = 0;
    let mut out = Vec::new();
    for &v in inputs {
        let [_, _, h, w] = graph.value(v).dims4("joint_flatten").expect("4-d");
        let hw = h * w;
        let mut d = vec![0.0; n * c * hw];
        for b in 0..n {
            for ch in 0..c {
                for l in 0..hw {
                    d[(b * c + ch) * hw + l] = gout[b * m + offset + l * c + ch];
                }
            }
        }
        offset += c * hw;
        out.push((v, d));
    }
    out
}

pub(super) fn grouped_nll_backward(x: &Tensor, group_of: &[usize], targets: &[usize], g: f64) -> Vec<f64> {
    let n = targets.len();
    let m = group_of.len();
    let xs = x.data();
    let mut dx = vec![0.0; xs.len()];
    for (b, &t) in targets.iter().enumerate() {
        let row = &xs[b * m..(b + 1) * m];
        let all = log_sum_exp(row.iter().copied());
        let own = log_sum_exp(
            row.iter()
                .zip(group_of)
                .filter(|(_, &gid)| gid == t)
                .map(|(v, _)| *v),
        );
        for j in 0..m {
            let mut d = (row[j] - all).exp();
            if group_of[j] == t {
                d -= (row[j] - own).exp();
            }
            dx[b * m + j] = g * d / n as f64;
        }
    }
    dx
}

pub(super) fn hinge_max_gap_backward(x: &Tensor, picks: &[Option<(usize, usize)>], g: f64) -> Vec<f64> {
    let n = picks.len();
    let m = x.numel() / n.max(1);
    let mut dx = vec![0.0; x.numel()];
    for (b, pick) in picks.iter().enumerate() {
        if let Some((ia, ib)) = pick {
            dx[b * m + ia] += g / n as f64;
            dx[b * m + ib] -= g / n as f64;
        }
    }
    dx
}

pub(super) fn sq_dev_ref_backward(x: &Tensor, reference: &[f64], g: f64) -> Vec<f64> {
    let n = x.shape()[0];
    let inner: usize = x.shape()[2..].iter().product();
    let k = reference.len();
    x.data()
        .iter()
        .enumerate()
        .map(|(i, v)| 2.0 * (v - reference[(i / inner) % k]) * g / n as f64)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::{gradcheck, GradcheckOptions};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn flatten_order_is_scale_location_class() {
        let mut g = Graph::new();
        // C=2, scale 0 is 1x2, scale 1 is 1x1
        let a = g.constant(Tensor::new(&[1, 2, 1, 2], vec![0.0, 1.0, 10.0, 11.0]).unwrap());
        let b = g.constant(Tensor::new(&[1, 2, 1, 1], vec![20.0, 30.0]).unwrap());
        let j = g.joint_flatten(&[a, b]).unwrap();
        assert_eq!(g.value(j).data(), &[0.0, 10.0, 1.0, 11.0, 20.0, 30.0]);
    }

    #[test]
    fn grouped_nll_of_uniform_is_log_groups() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 20]));
        let groups = Arc::new((0..20).map(|j| j % 10).collect::<Vec<_>>());
        let l = g.grouped_nll(x, groups, &[3, 7]).unwrap();
        assert!((g.value(l).item().unwrap() - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn grouped_nll_rejects_bad_label() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 4]));
        let groups = Arc::new(vec![0, 1, 0, 1]);
        assert!(g.grouped_nll(x, groups, &[2]).is_err());
    }

    #[test]
    fn hinge_cases() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[3, 2], vec![0.5, 0.5, 0.4, 0.6, 0.6, 0.4]).unwrap());
        let sets = vec![(vec![0], vec![1]); 3];
        let h = g.hinge_max_gap(x, &sets).unwrap();
        assert!((g.value(h).item().unwrap() - 0.2 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let groups = Arc::new((0..12).map(|j| j % 3).collect::<Vec<_>>());
        let x = Tensor::randn(&[2, 12], 1.0, &mut rng);
        let r = gradcheck(
            |g, v| g.grouped_nll(v[0], groups.clone(), &[1, 2]),
            &[x.clone()],
            &GradcheckOptions::composite(),
            &mut rng,
        )
        .unwrap();
        assert!(r.passed, "{r}");

        let sets = vec![(vec![0, 3, 6], vec![9, 10, 11]), (vec![1, 2], vec![4, 5])];
        let r = gradcheck(|g, v| g.hinge_max_gap(v[0], &sets), &[x.clone()], &GradcheckOptions::composite(), &mut rng).unwrap();
        assert!(r.passed, "{r}");

        let t = Tensor::randn(&[2, 3, 2, 2], 1.0, &mut rng);
        let r = gradcheck(|g, v| g.sq_dev_ref(v[0], &[1.0, 0.0, 0.5]), &[t], &GradcheckOptions::composite(), &mut rng).unwrap();
        assert!(r.passed, "{r}");

        let a = Tensor::randn(&[2, 3, 2, 2], 1.0, &mut rng);
        let b = Tensor::randn(&[2, 3, 1, 1], 1.0, &mut rng);
        let r = gradcheck(|g, v| g.joint_flatten(&[v[0], v[1]]), &[a, b], &GradcheckOptions::linear(), &mut rng).unwrap();
        assert!(r.passed, "{r}");
    }
}
