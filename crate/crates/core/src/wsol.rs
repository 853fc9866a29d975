//! Joint class/location/scale distribution, MAP decoding and the training
//! objective `L_cls + λ·L_θ + α·L_scale`.

use std::sync::Arc;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::geometry::ScoredBox;
use crate::geometry::BoxXYXY;
use crate::pyramid::{PyramidOutput, ScaleInfo};
use crate::stn::{theta_to_box, Affine, AffineTheta};
use crate::tensor::Tensor;

/// Flattening of `(s, l, c)` into one column index: scale-major, then
/// location, then class.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct JointLayout {
    num_classes: usize,
    locations: Vec<usize>,
    offsets: Vec<usize>,
    len: usize,
}

impl JointLayout {
    pub fn new(num_classes: usize, locations: &[usize]) -> Result<Self> {
        if locations.is_empty() {
            return Err(Error::InvalidArgument("joint distribution over zero scales".into()));
        }
        let mut offsets = Vec::with_capacity(locations.len());
        let mut len = 0;
        for &l in locations {
            offsets.push(len);
            len += l * num_classes;
        }
        Ok(Self {
            num_classes,
            locations: locations.to_vec(),
            offsets,
            len,
        })
    }

    pub fn from_scales(num_classes: usize, scales: &[ScaleInfo]) -> Result<Self> {
        let locs: Vec<usize> = scales.iter().map(ScaleInfo::locations).collect();
        Self::new(num_classes, &locs)
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn num_scales(&self) -> usize {
        self.locations.len()
    }

    pub fn locations(&self, s: usize) -> usize {
        self.locations[s]
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn index(&self, s: usize, l: usize, c: usize) -> usize {
        self.offsets[s] + l * self.num_classes + c
    }

    /// Inverse of [`JointLayout::index`].
    pub fn decode(&self, i: usize) -> (usize, usize, usize) {
        let s = self.offsets.iter().rposition(|&o| o <= i).expect("offset 0");
        let r = i - self.offsets[s];
        (s, r / self.num_classes, r % self.num_classes)
    }

    /// Class of every column.
    pub fn class_of(&self) -> Arc<Vec<usize>> {
        Arc::new((0..self.len).map(|i| i % self.num_classes).collect())
    }

    /// Columns of class `c` at scale `s`.
    pub fn columns(&self, s: usize, c: usize) -> Vec<usize> {
        (0..self.locations[s]).map(|l| self.index(s, l, c)).collect()
    }
}

/// Per-sample normalized table `p(c, l, s)`.
#[derive(Clone, Debug, PartialEq)]
pub struct JointDistribution {
    layout: JointLayout,
    /// `[N, M]`.
    probs: Tensor,
}

/// Stable softmax of one row.
fn softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

impl JointDistribution {
    pub fn new(layout: JointLayout, probs: Tensor) -> Result<Self> {
        match probs.shape() {
            &[_, m] if m == layout.len() => Ok(Self { layout, probs }),
            s => Err(Error::shape(
                "joint distribution",
                format!("table {s:?} does not match layout of {} columns", layout.len()),
            )),
        }
    }

    /// One softmax over all `C·Σ L_s` entries of each sample.
    pub fn from_logits(logits: &[&Tensor]) -> Result<Self> {
        let first = logits
            .first()
            .ok_or_else(|| Error::InvalidArgument("joint softmax over zero scales".into()))?;
        let [n, c, _, _] = first.dims4("joint_softmax")?;
        let mut locs = Vec::new();
        for t in logits {
            let [tn, tc, h, w] = t.dims4("joint_softmax")?;
            if (tn, tc) != (n, c) {
                return Err(Error::shape(
                    "joint_softmax",
                    format!("scale maps disagree: {:?} vs {:?}", t.shape(), first.shape()),
                ));
            }
            locs.push(h * w);
        }
        let layout = JointLayout::new(c, &locs)?;
        let m = layout.len();
        let mut flat = vec![0.0; n * m];
        for (s, t) in logits.iter().enumerate() {
            let hw = locs[s];
            for b in 0..n {
                for ch in 0..c {
                    for l in 0..hw {
                        flat[b * m + layout.index(s, l, ch)] = t.data()[(b * c + ch) * hw + l];
                    }
                }
            }
        }
        let mut probs = Vec::with_capacity(n * m);
        for row in flat.chunks(m) {
            probs.extend(softmax_row(row));
        }
        Self::new(layout, Tensor::new(&[n, m], probs)?)
    }

    pub fn layout(&self) -> &JointLayout {
        &self.layout
    }

    pub fn batch(&self) -> usize {
        self.probs.shape()[0]
    }

    pub fn probs(&self) -> &Tensor {
        &self.probs
    }

    pub fn row(&self, n: usize) -> &[f64] {
        let m = self.layout.len();
        &self.probs.data()[n * m..(n + 1) * m]
    }

    pub fn get(&self, n: usize, s: usize, l: usize, c: usize) -> f64 {
        self.row(n)[self.layout.index(s, l, c)]
    }

    /// `p(c) = Σ_{l,s} p(c, l, s)` as `[N, C]`.
    pub fn marginalize_classes(&self) -> Tensor {
        let c = self.layout.num_classes();
        let n = self.batch();
        let mut out = vec![0.0; n * c];
        for b in 0..n {
            for (i, p) in self.row(b).iter().enumerate() {
                out[b * c + i % c] += p;
            }
        }
        Tensor::new(&[n, c], out).expect("sized")
    }

    /// Flattened index of the largest entry (lowest index on ties).
    pub fn argmax(&self, n: usize) -> usize {
        let row = self.row(n);
        let mut best = 0;
        for (i, &p) in row.iter().enumerate() {
            if p > row[best] {
                best = i;
            }
        }
        best
    }

    /// Entries of class `c` sorted by descending probability, ties by
    /// ascending index, truncated to `k`.
    pub fn topk_for_class(&self, n: usize, c: usize, k: usize) -> Vec<usize> {
        let row = self.row(n);
        let mut idx: Vec<usize> = (0..self.layout.num_scales())
            .flat_map(|s| self.layout.columns(s, c))
            .collect();
        idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
        idx.truncate(k);
        idx
    }
}

/// MAP decoding of one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub class: usize,
    pub location: usize,
    /// Index into the scale list the distribution was built from.
    pub scale: usize,
    pub theta: Affine,
    pub bbox: BoxXYXY,
    pub degenerate: bool,
    pub score: f64,
}

/// Boxes are decoded from `thetas` or, with `use_transform = false`, from
/// the untransformed default boxes.
#[derive(Clone, Copy, Debug)]
pub struct Decoder<'a> {
    pub thetas: &'a [AffineTheta],
    pub scales: &'a [ScaleInfo],
    pub image_w: f64,
    pub image_h: f64,
    pub use_transform: bool,
}

impl Decoder<'_> {
    fn decode(&self, jd: &JointDistribution, n: usize, index: usize) -> Prediction {
        let (s, l, c) = jd.layout().decode(index);
        let info = &self.scales[s];
        let (y, x) = (l / info.width, l % info.width);
        let theta = if self.use_transform {
            self.thetas[s].at(n, y, x)
        } else {
            Affine::IDENTITY
        };
        let d = theta_to_box(&theta, y, x, info, self.image_w, self.image_h);
        Prediction {
            class: c,
            location: l,
            scale: s,
            theta,
            bbox: d.bbox,
            degenerate: d.degenerate,
            score: jd.row(n)[index],
        }
    }
}

/// `(c*, l*, s*) = argmax p(c, l, s)`, decoded to a box.
pub fn map_inference(jd: &JointDistribution, n: usize, decoder: &Decoder) -> Prediction {
    decoder.decode(jd, n, jd.argmax(n))
}

/// The `k` most probable `(l, s)` entries of class `c`, decoded to boxes.
pub fn topk_boxes(jd: &JointDistribution, n: usize, c: usize, k: usize, decoder: &Decoder) -> Vec<ScoredBox> {
    jd.topk_for_class(n, c, k)
        .into_iter()
        .map(|i| {
            let p = decoder.decode(jd, n, i);
            ScoredBox {
                bbox: p.bbox,
                score: p.score,
            }
        })
        .collect()
}

/// Graph nodes of the joint table for a batch.
#[derive(Clone, Debug)]
pub struct JointNodes {
    pub layout: JointLayout,
    /// `[N, M]` flattened logits.
    pub logits: Var,
    /// `[N, M]` probabilities.
    pub probs: Var,
}

pub fn joint_softmax(g: &mut Graph, logits: &[Var]) -> Result<JointNodes> {
    let flat = g.joint_flatten(logits)?;
    let [_, c, _, _] = g.value(logits[0]).dims4("joint_softmax")?;
    let mut locs = Vec::new();
    for &v in logits {
        let s = g.shape(v);
        locs.push(s[2] * s[3]);
    }
    let layout = JointLayout::new(c, &locs)?;
    let probs = g.softmax_flat(flat, &[1])?;
    Ok(JointNodes {
        layout,
        logits: flat,
        probs,
    })
}

/// `−log p(y)` averaged over the batch, computed from the joint logits with
/// log-sum-exp.
pub fn loss_cls(g: &mut Graph, joint: &JointNodes, labels: &[usize]) -> Result<Var> {
    if let Some(&bad) = labels.iter().find(|&&y| y >= joint.layout.num_classes()) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} out of range for {} classes",
            joint.layout.num_classes()
        )));
    }
    g.grouped_nll(joint.logits, joint.layout.class_of(), labels)
}

/// `Σ_s Σ_l ‖θ_ref − θ_l‖²`, averaged over the batch.
pub fn loss_theta(g: &mut Graph, thetas: &[Var]) -> Result<Var> {
    let mut terms = Vec::with_capacity(thetas.len());
    for &t in thetas {
        terms.push((1.0, g.sq_dev_ref(t, &Affine::IDENTITY.0)?));
    }
    g.weighted_sum(&terms)
}

/// `max(0, max_l p(s₁, l, y) − max_l p(s₂, l, y))` averaged over the batch,
/// with `s₁` the finer and `s₂` the coarser scale.
pub fn loss_scale(g: &mut Graph, joint: &JointNodes, labels: &[usize]) -> Result<Var> {
    if joint.layout.num_scales() != 2 {
        return Err(Error::InvalidArgument(format!(
            "scale loss needs exactly 2 scales, got {}",
            joint.layout.num_scales()
        )));
    }
    let c = joint.layout.num_classes();
    let sets: Vec<(Vec<usize>, Vec<usize>)> = labels
        .iter()
        .map(|&y| {
            if y >= c {
                Err(Error::InvalidArgument(format!("label {y} out of range for {c} classes")))
            } else {
                Ok((joint.layout.columns(0, y), joint.layout.columns(1, y)))
            }
        })
        .collect::<Result<_>>()?;
    g.hinge_max_gap(joint.probs, &sets)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda: f64,
    pub alpha: f64,
}

/// The objective and its parts. `scale` is absent with fewer than two levels.
#[derive(Clone, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub cls: Var,
    pub theta: Var,
    pub scale: Option<Var>,
    pub joint: JointNodes,
}

/// Scalar values of [`LossTerms`].
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossValues {
    pub total: f64,
    pub cls: f64,
    pub theta: f64,
    pub scale: f64,
}

impl LossTerms {
    pub fn values(&self, g: &Graph) -> LossValues {
        let v = |x: Var| g.value(x).data()[0];
        LossValues {
            total: v(self.total),
            cls: v(self.cls),
            theta: v(self.theta),
            scale: self.scale.map_or(0.0, v),
        }
    }
}

pub fn total_loss(g: &mut Graph, out: &PyramidOutput, labels: &[usize], w: LossWeights) -> Result<LossTerms> {
    if !(w.lambda >= 0.0 && w.alpha >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "loss weights must be non-negative, got λ={} α={}",
            w.lambda, w.alpha
        )));
    }
    let joint = joint_softmax(g, &out.logits)?;
    let cls = loss_cls(g, &joint, labels)?;
    let theta = loss_theta(g, &out.thetas)?;
    let scale = if joint.layout.num_scales() == 2 {
        Some(loss_scale(g, &joint, labels)?)
    } else {
        None
    };
    let mut terms = vec![(1.0, cls), (w.lambda, theta)];
    if let Some(s) = scale {
        terms.push((w.alpha, s));
    }
    let total = g.weighted_sum(&terms)?;
    Ok(LossTerms {
        total,
        cls,
        theta,
        scale,
        joint,
    })
}
