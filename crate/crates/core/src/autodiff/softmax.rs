use std::sync::Arc;

use super::{Graph, Op, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Partitions flat indices of `shape` by their coordinates on the axes *not*
/// in `axes`; each group lists the flat indices that share one softmax.
fn softmax_groups(shape: &[usize], axes: &[usize]) -> Vec<Vec<usize>> {
    let ndim = shape.len();
    let keep: Vec<usize> = (0..ndim).filter(|a| !axes.contains(a)).collect();
    let ngroups: usize = keep.iter().map(|&a| shape[a]).product();
    let mut groups = vec![Vec::new(); ngroups];
    let total: usize = shape.iter().product();
    let mut coord = vec![0usize; ndim];
    for flat in 0..total {
        let mut gid = 0;
        for &a in &keep {
            gid = gid * shape[a] + coord[a];
        }
        groups[gid].push(flat);
        for a in (0..ndim).rev() {
            coord[a] += 1;
            if coord[a] < shape[a] {
                break;
            }
            coord[a] = 0;
        }
    }
    groups
}

impl Graph {
    /// Softmax over the flattened `axes`, independently for every index of
    /// the remaining axes. Uses max subtraction.
    pub fn softmax_flat(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        if axes.is_empty() {
            return Err(Error::InvalidArgument("softmax_flat needs at least one axis".into()));
        }
        let shape = self.shape(x).to_vec();
        if let Some(&bad) = axes.iter().find(|&&a| a >= shape.len()) {
            return Err(Error::InvalidArgument(format!(
                "softmax axis {bad} out of range for shape {shape:?}"
            )));
        }
        let mut sorted = axes.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        let groups = softmax_groups(&shape, &sorted);
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for group in &groups {
            let max = group.iter().map(|&i| src[i]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for &i in group {
                let e = (src[i] - max).exp();
                out[i] = e;
                z += e;
            }
            for &i in group {
                out[i] /= z;
            }
        }
        let out = Tensor::new(&shape, out)?;
        Ok(self.push(
            out,
            Op::SoftmaxFlat {
                x,
                groups: Arc::new(groups),
            },
        ))
    }
}

pub(super) fn softmax_backward(y: &Tensor, groups: &[Vec<usize>], gout: &[f64]) -> Vec<f64> {
    let y = y.data();
    let mut dx = vec![0.0; y.len()];
    for group in groups {
        let dot: f64 = group.iter().map(|&i| gout[i] * y[i]).sum();
        for &i in group {
            dx[i] = y[i] * (gout[i] - dot);
        }
    }
    dx
}
