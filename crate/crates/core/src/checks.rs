//! Named finite-difference checks for every differentiable op and for the
//! whole model loss. Shapes and values are drawn from the seed, so each seed
//! is a different random case.

use std::sync::Arc;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::gradcheck::{gradcheck, GradcheckOptions, GradcheckReport};
use crate::autodiff::{BatchNormMode, Graph, RunningStats, Var};
use crate::error::{Error, Result};
use crate::nn::Bound;
use crate::pyramid::{Model, ModelConfig};
use crate::stn::cstn_conv;
use crate::tensor::Tensor;
use crate::wsol::{total_loss, LossWeights};

type CheckFn = fn(&mut ChaCha8Rng, bool) -> Result<GradcheckReport>;

/// One registered check.
#[derive(Clone, Copy)]
pub struct Check {
    pub name: &'static str,
    /// Linear in its checked inputs, so held to the tight tolerance.
    pub linear: bool,
    run: CheckFn,
}

impl Check {
    /// Runs the check for one seed. `corrupt` scales every backward rule by
    /// a wrong factor, which must make the check fail.
    pub fn run(&self, seed: u64, corrupt: bool) -> Result<GradcheckReport> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (self.run)(&mut rng, corrupt)
    }

    pub fn tolerance(&self) -> f64 {
        options(self.linear).tolerance
    }
}

impl std::fmt::Debug for Check {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Check").field("name", &self.name).field("linear", &self.linear).finish()
    }
}

const CHECKS: &[Check] = &[
    Check { name: "conv2d", linear: true, run: conv2d },
    Check { name: "batchnorm2d", linear: false, run: batchnorm2d },
    Check { name: "relu", linear: true, run: relu },
    Check { name: "softmax_flat", linear: false, run: softmax_flat },
    Check { name: "upsample_nearest2x", linear: true, run: upsample },
    Check { name: "global_avg_pool", linear: true, run: global_avg_pool },
    Check { name: "affine_grid", linear: true, run: affine_grid },
    Check { name: "bilinear_sample", linear: false, run: bilinear_sample },
    Check { name: "tap_contract", linear: true, run: tap_contract },
    Check { name: "cstn_conv", linear: false, run: cstn },
    Check { name: "loc_net", linear: false, run: loc_net },
    Check { name: "grouped_nll", linear: false, run: grouped_nll },
    Check { name: "hinge_max_gap", linear: false, run: hinge_max_gap },
    Check { name: "sq_dev_ref", linear: false, run: sq_dev_ref },
    Check { name: "fpn", linear: true, run: fpn },
    Check { name: "head", linear: false, run: head },
    Check { name: "backbone", linear: false, run: backbone },
    Check { name: "model", linear: false, run: model },
];

pub fn registry() -> &'static [Check] {
    CHECKS
}

pub fn names() -> Vec<&'static str> {
    CHECKS.iter().map(|c| c.name).collect()
}

/// Looks up a check by name; the error lists the valid names.
pub fn find(name: &str) -> Result<&'static Check> {
    CHECKS.iter().find(|c| c.name == name).ok_or_else(|| {
        Error::InvalidArgument(format!("unknown check {name:?}; valid names: {}", names().join(", ")))
    })
}

fn options(linear: bool) -> GradcheckOptions {
    if linear {
        GradcheckOptions::linear()
    } else {
        GradcheckOptions::composite()
    }
}

fn check<F>(rng: &mut ChaCha8Rng, linear: bool, corrupt: bool, inputs: &[Tensor], op: F) -> Result<GradcheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    gradcheck(
        |g, v| {
            if corrupt {
                g.corrupt_backward_rules();
            }
            op(g, v)
        },
        inputs,
        &options(linear),
        rng,
    )
}

/// Values bounded away from zero so piecewise-linear kinks are not crossed.
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.1..1.5);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Affine parameters near, but not at, the identity, so sampling points
/// fall strictly between cells.
fn theta_near_identity(n: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let id = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0];
    let mut t = Tensor::zeros(&[n, 6, h, w]);
    let hw = h * w;
    for b in 0..n {
        for (c, base) in id.iter().enumerate() {
            for l in 0..hw {
                t.data_mut()[(b * 6 + c) * hw + l] = base + rng.random_range(-0.3..0.3);
            }
        }
    }
    t
}

fn conv2d(rng: &mut ChaCha8Rng, corrupt: bool) -> Result<GradcheckReport> {
    let (n, cin, cout) = (rng.random_range(1..=2), rng.random_range(1..=3), rng.random_range(1..=3));
    let k = [1, 3][rng.random_range(0..2)];
    let stride = rng.random_range(1..=2);
    let pad = rng.random_range(0..=k / 2);
    let (h, w) = (rng.random_range(k..=7), rng.random_range(k..=7));
    let inputs = [
        Tensor::randn(&[n, cin, h, w], 1.0, rng),
        Tensor::randn(&[cout, cin, k, k], 1.0, rng),
        Tensor::randn(&[cout], 1.0, rng),
    ];
    check(rng, true, corrupt, &inputs, |g, v| g.conv2d(v[0], v[1], Some(v[2]), stride, pad))
}

fn batchnorm2d(rng: &mut ChaCha8Rng, corrupt: bool) -> Result<GradcheckReport> {
    let (n, c) = (rng.random_range(2..=3), rng.random_range(1..=3));
    let (h, w) = (rng.random_range(2..=4), rng.random_range(2..=4));
    let inputs = [
        Tensor::randn(&[n, c, h, w], 1.0, rng),
        Tensor::uniform(&[c], 0.5, 1.5, rng),
        Tensor::randn(&[c], 1.0, rng),
    ];
    // normalized outputs sum to a constant, so weight them before reducing
    check(rng, false, corrupt, &inputs, |g, v| {
        let mut stats = RunningStats::new(g.shape(v[0])[1]);
        let y = g.batchnorm2d(v[0], v[1], v[2], &mut stats, BatchNormMode::Train)?;
        g.mul(y, y)
    })
}

fn relu(rng: &mut ChaCha8Rng, corrupt: bool) -> Result<GradcheckReport> {
    let len = rng.random_range(1..=24);
    let inputs = [away_from_zero(&[len], rng)];
    check(rng, true, corrupt, &inputs, |g, v| Ok(g.relu(v[0])))
}

fn softmax_flat(rng: &mut ChaCha8Rng, corrupt: bool) -> Result<GradcheckReport> {
    let shape = [rng.random_range(1..=3), rng.random_range(1..=4), rng.random_range(1..=4)];
    let axes: &[usize] = [&[1usize, 2][..], &[2][..], &[1][..]][rng.random_range(0..3)];
    let inputs = [Tensor::randn(&shape, 2.0, rng)];
    check(rng, false, corrupt, &inputs, |g, v| g.softmax_flat(v[0], axes))
}

fn upsample(rng: &mut ChaCha8Rng, corrupt: bool) -> Result<GradcheckReport> {
    let shape = [rng.random_range(1..=2), rng.random_range(1..=3), rng.random_range(1..=4), rng.random_range(1..=4)];
    let inputs = [Tensor::randn(&shape, 1.0, rng)];
    check(rng, true, corrupt, &inputs, |g, v| g.upsample_nearest2x(v[0]))
}

fn global_avg_pool(rng: &mut ChaCha8Rng, corrupt: bool) -> Result<GradcheckReport> {
    let shape = [rng.random_range(1..=2), rng.random_range(1..=3), rng.random_range(1..=4), rng.random_range(1..=4)];
    let inputs = [Tensor::randn(&shape, 1.0, rng)];
    check(rng, true, corrupt, &inputs, |g, v| g.global_avg_pool(v[0]))
}

fn affine_grid(rng: &mut ChaCha8Rng, corrupt: bool) -> Result<GradcheckReport> {
    let (n, h, w) = (rng.random_range(1..=2), rng.random_range(1..=3), rng.random_range(1..=3));
    let k = [1, 3, 5][rng.random_range(0..3)];
    let inputs = [Tensor::randn(&[n, 6, h, w], 1.0, rng)];
    check(rng, true, corrupt, &inputs, |g, v| g.affine_grid(v[0], k))
}

fn bilinear_sample(rng: &mut ChaCha8Rng, corrupt: bool) -> Result<GradcheckReport> {
    let (n, p) = (rng.random_range(1..=2), rng.random_range(1..=3));
    let (hin, win) = (rng.random_range(2..=5), rng.random_range(2..=5));
    let (h, w, k) = (rng.random_range(1..=3), rng.random_range(1..=3), [1, 3][rng.random_range(0..2)]);
    let fmap = Tensor::randn(&[n, p, hin, win], 1.0, rng);
    // coordinates cover the border band where neighbours read zero, and keep
    // clear of integer positions where bilinear interpolation has kinks
    let grid = Tensor::from_fn(&[n, h, w, k, k, 2], |i| {
        let limit = if i % 2 == 0 { win } else { hin } as f64;
        let base = rng.random_range(-1..limit as i64) as f64;
        base + rng.random_range(0.05..0.95)
    });
    check(rng, false, corrupt, &[fmap, grid], |g, v| g.bilinear_sample(v[0], v[1]))
}

fn tap_contract(rng: &mut ChaCha8Rng, corrupt: bool) -> Result<GradcheckReport> {
    let (n, p, co) = (rng.random_range(1..=2), rng.random_range(1..=3), rng.random_range(1..=3));
    let (h, w, k) = (rng.random_range(1..=3), rng.random_range(1..=3), [1, 3][rng.random_range(0..2)]);
    let inputs = [
        Tensor::randn(&[n, p, h, w, k, k], 1.0, rng),
        Tensor::randn(&[co, p, k, k], 1.0, rng),
        Tensor::randn(&[co], 1.0, rng),
    ];
    check(rng, true, corrupt, &inputs, |g, v| g.tap_contract(v[0], v[1], Some(v[2])))
}

fn cstn(rng: &mut ChaCha8Rng, corrupt: bool) -> Result<GradcheckReport> {
    let (n, p, co) = (rng.random_range(1..=2), rng.random_range(1..=3), rng.random_range(1..=3));
    let (h, w) = (rng.random_range(2..=4), rng.random_range(2..=4));
    let inputs = [
        Tensor::randn(&[n, p, h, w], 1.0, rng),
        theta_near_identity(n, h, w, rng),
        Tensor::randn(&[co, p, 3, 3], 1.0, rng),
        Tensor::randn(&[co], 1.0, rng),
    ];
    check(rng, false, corrupt, &inputs, |g, v| cstn_conv(g, v[0], v[1], v[2], Some(v[3])))
}

fn loc_net(rng: &mut ChaCha8Rng, corrupt: bool) -> Result<GradcheckReport> {
    let (n, p, hidden) = (rng.random_range(1..=2), rng.random_range(1..=3), rng.random_range(1..=4));
    let (h, w) = (rng.random_range(1..=3), rng.random_range(1..=3));
    let mut bias = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0];
    for b in &mut bias {
        *b += rng.random_range(-0.3..0.3);
    }
    let inputs = [
        Tensor::randn(&[n, p, h, w], 1.0, rng),
        Tensor::randn(&[hidden, p, 3, 3], 0.5, rng),
        Tensor::randn(&[hidden], 0.5, rng),
        Tensor::randn(&[6, hidden, 1, 1], 0.5, rng),
        Tensor::new(&[6], bias)?,
    ];
    // the regularizer drives θ, so check it through the loc net
    check(rng, false, corrupt, &inputs, |g, v| {
        let h = g.conv2d(v[0], v[1], Some(v[2]), 1, 1)?;
        let h = g.relu(h);
        let theta = g.conv2d(h, v[3], Some(v[4]), 1, 0)?;
        g.sq_dev_ref(theta, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0])
    })
}

fn grouped_nll(rng: &mut ChaCha8Rng, corrupt: bool) -> Result<GradcheckReport> {
    let (n, c, l) = (rng.random_range(1..=3), rng.random_range(2..=4), rng.random_range(1..=4));
    let group: Arc<Vec<usize>> = Arc::new((0..c * l).map(|i| i % c).collect());
    let targets: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
    let inputs = [Tensor::randn(&[n, c * l], 2.0, rng)];
    check(rng, false, corrupt, &inputs, |g, v| g.grouped_nll(v[0], group.clone(), &targets))
}

fn hinge_max_gap(rng: &mut ChaCha8Rng, corrupt: bool) -> Result<GradcheckReport> {
    let (n, m) = (rng.random_range(1..=3), rng.random_range(4..=8));
    let sets: Vec<(Vec<usize>, Vec<usize>)> = (0..n)
        .map(|_| {
            let idx = sample(rng, m, 4).into_vec();
            (idx[..2].to_vec(), idx[2..].to_vec())
        })
        .collect();
    // distinct values so each max has a unique argmax, and a positive gap so
    // the hinge is active
    let mut x = Tensor::zeros(&[n, m]);
    for (row, (a, b)) in sets.iter().enumerate() {
        let vals: Vec<f64> = sample(rng, 1000, m).into_iter().map(|v| v as f64 / 1000.0).collect();
        x.data_mut()[row * m..(row + 1) * m].copy_from_slice(&vals);
        x.data_mut()[row * m + a[0]] = 2.0 + rng.random_range(0.0..0.5);
        x.data_mut()[row * m + b[0]] = 1.5;
    }
    check(rng, false, corrupt, &[x], |g, v| g.hinge_max_gap(v[0], &sets))
}

fn sq_dev_ref(rng: &mut ChaCha8Rng, corrupt: bool) -> Result<GradcheckReport> {
    let (n, h, w) = (rng.random_range(1..=3), rng.random_range(1..=3), rng.random_range(1..=3));
    let inputs = [Tensor::randn(&[n, 6, h, w], 1.0, rng)];
    check(rng, false, corrupt, &inputs, |g, v| g.sq_dev_ref(v[0], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]))
}

fn tiny_model(rng: &mut ChaCha8Rng) -> Result<Model> {
    let cfg = ModelConfig {
        num_classes: 3,
        widths: [2, 3, 3, 4],
        fpn_channels: 3,
        loc_hidden: 2,
        ..ModelConfig::default()
    };
    let mut m = Model::new(cfg, rng)?;
    // zero-initialized biases put ReLU inputs exactly on the kink wherever a
    // window is all zeros; check at a generic point instead
    let ids: Vec<_> = m.params.ids().collect();
    for id in ids {
        if m.params.name(id).ends_with(".bias") {
            let shape = m.params.get(id).shape().to_vec();
            *m.params.get_mut(id) = Tensor::randn(&shape, 0.1, rng);
        }
    }
    // move the loc net off the identity so samples land between cells
    if let Some(loc) = &m.head.loc {
        let hidden = m.config.loc_hidden;
        *m.params.get_mut(loc.out.weight) = Tensor::randn(&[6, hidden, 1, 1], 0.05, rng);
        let mut bias = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0];
        for b in &mut bias {
            *b += rng.random_range(-0.3..0.3);
        }
        *m.params.get_mut(loc.out.bias.expect("loc bias")) = Tensor::new(&[6], bias)?;
    }
    Ok(m)
}

/// Binds `params`, taking the listed ids from `vars` and the rest as constants.
fn mixed_bound(g: &mut Graph, m: &Model, checked: &[usize], vars: &[Var]) -> Bound {
    let all = m
        .params
        .iter()
        .enumerate()
        .map(|(i, (_, t))| match checked.iter().position(|&c| c == i) {
            Some(j) => vars[j],
            None => g.constant(t.clone()),
        })
        .collect();
    Bound::from_vars(all)
}

fn fpn(rng: &mut ChaCha8Rng, corrupt: bool) -> Result<GradcheckReport> {
    let m = tiny_model(rng)?;
    let (n, h5) = (rng.random_range(1..=2), rng.random_range(1..=2));
    let c4 = Tensor::randn(&[n, m.config.widths[2], 2 * h5, 2 * h5], 1.0, rng);
    let c5 = Tensor::randn(&[n, m.config.widths[3], h5, h5], 1.0, rng);
    let checked: Vec<usize> = m
        .params
        .iter()
        .enumerate()
        .filter(|(_, (name, _))| name.starts_with("fpn."))
        .map(|(i, _)| i)
        .collect();
    let mut inputs = vec![c4, c5];
    inputs.extend(checked.iter().map(|&i| m.params.iter().nth(i).expect("index").1.clone()));
    check(rng, true, corrupt, &inputs, |g, v| {
        let p = mixed_bound(g, &m, &checked, &v[2..]);
        let (p4, p5) = m.fpn.forward(g, &p, v[0], v[1])?;
        let a = g.sum(p4);
        let b = g.mul(p5, p5)?;
        let b = g.sum(b);
        g.add(a, b)
    })
}

fn head(rng: &mut ChaCha8Rng, corrupt: bool) -> Result<GradcheckReport> {
    let m = tiny_model(rng)?;
    let n = rng.random_range(1..=2);
    let (h, w) = (rng.random_range(2..=3), rng.random_range(2..=3));
    let f = Tensor::randn(&[n, m.config.fpn_channels, h, w], 1.0, rng);
    let checked: Vec<usize> = m
        .params
        .iter()
        .enumerate()
        .filter(|(_, (name, _))| name.starts_with("head."))
        .map(|(i, _)| i)
        .collect();
    let mut inputs = vec![f];
    inputs.extend(checked.iter().map(|&i| m.params.iter().nth(i).expect("index").1.clone()));
    check(rng, false, corrupt, &inputs, |g, v| {
        let p = mixed_bound(g, &m, &checked, &v[1..]);
        let (logits, theta) = m.head.forward(g, &p, v[0])?;
        let sq = g.mul(logits, logits)?;
        let a = g.sum(sq);
        let b = g.sum(theta);
        g.add(a, b)
    })
}

fn backbone(rng: &mut ChaCha8Rng, corrupt: bool) -> Result<GradcheckReport> {
    let m = tiny_model(rng)?;
    // 32×32 keeps four positions per channel at the last batch norm
    let image = Tensor::uniform(&[2, 3, 32, 32], 0.0, 1.0, rng);
    let checked: Vec<usize> = m
        .params
        .iter()
        .enumerate()
        .filter(|(_, (name, _))| name.starts_with("backbone."))
        .map(|(i, _)| i)
        .collect();
    let inputs: Vec<Tensor> = checked.iter().map(|&i| m.params.iter().nth(i).expect("index").1.clone()).collect();
    let opts = GradcheckOptions {
        sample_entries: Some(40),
        pooled: true,
        refinements: 2,
        ..options(false)
    };
    gradcheck(
        |g, v| {
            if corrupt {
                g.corrupt_backward_rules();
            }
            let p = mixed_bound(g, &m, &checked, v);
            let x = g.constant(image.clone());
            let mut buffers = m.buffers.clone();
            let (_, c5) = m.backbone.forward(g, &p, &mut buffers, x, BatchNormMode::Train)?;
            // C4 feeds C5, so every backbone parameter reaches this output;
            // batch norm output sums to a constant, hence the square
            g.mul(c5, c5)
        },
        &inputs,
        &opts,
        rng,
    )
}

/// Total loss of a tiny model on a 16×16 batch, checked on five randomly
/// chosen parameter tensors.
fn model(rng: &mut ChaCha8Rng, corrupt: bool) -> Result<GradcheckReport> {
    let m = tiny_model(rng)?;
    let image = Tensor::uniform(&[4, 3, 16, 16], 0.0, 1.0, rng);
    let labels: Vec<usize> = (0..4).map(|_| rng.random_range(0..m.config.num_classes)).collect();
    let mut checked = sample(rng, m.params.len(), 5.min(m.params.len())).into_vec();
    checked.sort_unstable();
    let inputs: Vec<Tensor> = checked.iter().map(|&i| m.params.iter().nth(i).expect("index").1.clone()).collect();
    let weights = LossWeights { lambda: 0.05, alpha: 0.5 };
    // bilinear sampling is piecewise linear, so a step can cross a cell edge
    let opts = GradcheckOptions {
        pooled: true,
        refinements: 2,
        ..options(false)
    };
    gradcheck(
        |g, v| {
            if corrupt {
                g.corrupt_backward_rules();
            }
            let p = mixed_bound(g, &m, &checked, v);
            let x = g.constant(image.clone());
            let mut copy = m.clone();
            let out = copy.forward_bound(g, &p, x, BatchNormMode::Train)?;
            Ok(total_loss(g, &out, &labels, weights)?.total)
        },
        &inputs,
        &opts,
        rng,
    )
}
