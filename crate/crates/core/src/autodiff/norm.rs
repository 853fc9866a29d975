use super::{Graph, Op, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BatchNormMode {
    /// Normalize with batch statistics and update the running estimates.
    Train,
    /// Normalize with the running estimates.
    Eval,
}

/// Per-channel running mean/variance of a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            momentum: 0.1,
            eps: 1e-5,
        }
    }
}

#[derive(Debug)]
pub(crate) struct BnSaved {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    train: bool,
}

impl Graph {
    /// Batch normalization over `(N, H, W)` of a `[N,C,H,W]` input.
    pub fn batchnorm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &mut RunningStats,
        mode: BatchNormMode,
    ) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4("batchnorm2d")?;
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(v) != [c] {
                return Err(Error::shape(
                    "batchnorm2d",
                    format!("{name} shape {:?}, expected [{c}]", self.shape(v)),
                ));
            }
        }
        if stats.mean.len() != c || stats.var.len() != c {
            return Err(Error::shape("batchnorm2d", "running stats channel count"));
        }
        let m = n * h * w;
        if m == 0 {
            return Err(Error::InvalidArgument("batchnorm2d on an empty batch".into()));
        }
        if mode == BatchNormMode::Train && m < 2 {
            return Err(Error::InvalidArgument(
                "batchnorm2d in train mode needs at least two values per channel".into(),
            ));
        }
        let hw = h * w;
        let xs = self.value(x).data();
        let (gs, bs) = (self.value(gamma).data(), self.value(beta).data());

        let (mean, var): (Vec<f64>, Vec<f64>) = match mode {
            BatchNormMode::Train => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut s = 0.0;
                    for b in 0..n {
                        s += xs[(b * c + ch) * hw..(b * c + ch + 1) * hw].iter().sum::<f64>();
                    }
                    let mu = s / m as f64;
                    let mut q = 0.0;
                    for b in 0..n {
                        q += xs[(b * c + ch) * hw..(b * c + ch + 1) * hw]
                            .iter()
                            .map(|v| (v - mu) * (v - mu))
                            .sum::<f64>();
                    }
                    mean[ch] = mu;
                    var[ch] = q / m as f64;
                }
                (mean, var)
            }
            BatchNormMode::Eval => (stats.mean.clone(), stats.var.clone()),
        };

        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + stats.eps).sqrt()).collect();
        let mut xhat = vec![0.0; xs.len()];
        let mut out = vec![0.0; xs.len()];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * hw;
                for i in base..base + hw {
                    xhat[i] = (xs[i] - mean[ch]) * inv_std[ch];
                    out[i] = gs[ch] * xhat[i] + bs[ch];
                }
            }
        }

        if mode == BatchNormMode::Train {
            let mo = stats.momentum;
            let unbias = m as f64 / (m as f64 - 1.0);
            for ch in 0..c {
                stats.mean[ch] = (1.0 - mo) * stats.mean[ch] + mo * mean[ch];
                stats.var[ch] = (1.0 - mo) * stats.var[ch] + mo * var[ch] * unbias;
            }
        }

        let out = Tensor::new(&[n, c, h, w], out)?;
        Ok(self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                saved: BnSaved {
                    xhat,
                    inv_std,
                    train: mode == BatchNormMode::Train,
                },
            },
        ))
    }
}

pub(super) fn batchnorm_backward(
    graph: &Graph,
    x: Var,
    gamma: Var,
    beta: Var,
    saved: &BnSaved,
    gout: &[f64],
) -> Vec<(Var, Vec<f64>)> {
    let [n, c, h, w] = graph.value(x).dims4("batchnorm2d").expect("4-d");
    let hw = h * w;
    let m = (n * hw) as f64;
    let gs = graph.value(gamma).data();

    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * hw;
            for i in base..base + hw {
                dbeta[ch] += gout[i];
                dgamma[ch] += gout[i] * saved.xhat[i];
            }
        }
    }

    let mut dx = vec![0.0; gout.len()];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * hw;
            let k = gs[ch] * saved.inv_std[ch];
            for i in base..base + hw {
                dx[i] = if saved.train {
                    k * (gout[i] - dbeta[ch] / m - saved.xhat[i] * dgamma[ch] / m)
                } else {
                    k * gout[i]
                };
            }
        }
    }
    vec![(x, dx), (gamma, dgamma), (beta, dbeta)]
}
