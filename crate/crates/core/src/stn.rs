//! Convolutional spatial transformer layer.
//!
//! A small localization network predicts one affine transform per feature
//! location. The classification convolution then reads its `K×K` window from
//! the transformed sampling grid instead of the fixed one, and the same
//! transform maps the location's default box to the predicted box.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::geometry::BoxXYXY;
use crate::nn::{Bound, Conv, ParamStore};
use crate::pyramid::ScaleInfo;
use crate::tensor::Tensor;

/// One location's affine parameters `[a11, a12, t1, a21, a22, t2]`, acting on
/// normalized local coordinates: `(u, v) ↦ (a11·u + a12·v + t1, a21·u + a22·v + t2)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Affine(pub [f64; 6]);

impl Affine {
    pub const IDENTITY: Affine = Affine([1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);

    pub fn scaling(sx: f64, sy: f64) -> Self {
        Affine([sx, 0.0, 0.0, 0.0, sy, 0.0])
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Affine([1.0, 0.0, tx, 0.0, 1.0, ty])
    }

    pub fn rotation(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Affine([c, -s, 0.0, s, c, 0.0])
    }

    pub fn apply(&self, u: f64, v: f64) -> (f64, f64) {
        let a = &self.0;
        (a[0] * u + a[1] * v + a[2], a[3] * u + a[4] * v + a[5])
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

/// Per-location transforms stored as `[N, 6, H, W]`, aligned with the
/// feature map they were predicted from.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineTheta(Tensor);

impl AffineTheta {
    pub fn new(t: Tensor) -> Result<Self> {
        let [_, c, _, _] = t.dims4("affine theta")?;
        if c != 6 {
            return Err(Error::shape("affine theta", format!("need 6 channels, got {c}")));
        }
        Ok(Self(t))
    }

    pub fn uniform(n: usize, h: usize, w: usize, a: Affine) -> Self {
        let hw = h * w;
        Self(Tensor::from_fn(&[n, 6, h, w], |i| a.0[(i / hw) % 6]))
    }

    pub fn identity(n: usize, h: usize, w: usize) -> Self {
        Self::uniform(n, h, w, Affine::IDENTITY)
    }

    pub fn at(&self, n: usize, y: usize, x: usize) -> Affine {
        let [_, _, h, w] = self.0.dims4("affine theta").expect("validated");
        let mut a = [0.0; 6];
        for (c, slot) in a.iter_mut().enumerate() {
            *slot = self.0.data()[((n * 6 + c) * h + y) * w + x];
        }
        Affine(a)
    }

    /// `(N, H, W)`.
    pub fn dims(&self) -> (usize, usize, usize) {
        let s = self.0.shape();
        (s[0], s[2], s[3])
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }
}

/// `θ = loc(f)`: 3×3 conv to `hidden` channels, ReLU, 1×1 conv to 6.
///
/// The last layer starts with zero weights and the identity as bias, so every
/// location predicts the identity transform until training moves it.
#[derive(Clone, Copy, Debug)]
pub struct LocNet {
    pub hidden: Conv,
    pub out: Conv,
}

impl LocNet {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let hidden_conv = Conv::new(store, &format!("{name}.hidden"), in_channels, hidden, 3, 1, true, rng);
        let out = Conv::new(store, &format!("{name}.out"), hidden, 6, 1, 1, true, rng);
        *store.get_mut(out.weight) = Tensor::zeros(&[6, hidden, 1, 1]);
        *store.get_mut(out.bias.expect("bias")) = Tensor::new(&[6], Affine::IDENTITY.0.to_vec()).expect("6");
        Self {
            hidden: hidden_conv,
            out,
        }
    }

    /// Predicts `[N, 6, H, W]` transforms from features `[N, P, H, W]`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, f: Var) -> Result<Var> {
        let h = self.hidden.forward(g, p, f)?;
        let h = g.relu(h);
        self.out.forward(g, p, h)
    }
}

/// `f' = conv(f, θ)`: convolution whose window at each location is read from
/// the θ-warped sampling grid.
///
/// With identity θ everywhere this equals a stride-1 "same" convolution.
pub fn cstn_conv(g: &mut Graph, f: Var, theta: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
    let [n, _, h, w] = g.value(f).dims4("cstn_conv")?;
    let [tn, tc, th, tw] = g.value(theta).dims4("cstn_conv")?;
    if (tn, tc, th, tw) != (n, 6, h, w) {
        return Err(Error::shape(
            "cstn_conv",
            format!("theta {:?} does not match features {:?}", g.shape(theta), g.shape(f)),
        ));
    }
    let [_, _, k, _] = g.value(weight).dims4("cstn_conv")?;
    let grid = g.affine_grid(theta, k)?;
    let taps = g.bilinear_sample(f, grid)?;
    g.tap_contract(taps, weight, bias)
}

/// A box decoded from a transform, flagged when clipping left no area.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecodedBox {
    pub bbox: BoxXYXY,
    pub degenerate: bool,
}

/// Maps the default box of location `(y, x)` through `theta`.
///
/// The default box corners sit at `(±1, ±1)` in normalized local units (one
/// unit is half the box side). The result is the axis-aligned hull of the
/// transformed corners, clipped to the image.
pub fn theta_to_box(
    theta: &Affine,
    y: usize,
    x: usize,
    scale: &ScaleInfo,
    image_w: f64,
    image_h: f64,
) -> DecodedBox {
    let (cx, cy, side) = scale.default_box(y, x);
    let half = side / 2.0;
    let mut hull = BoxXYXY::new(f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for (u, v) in [(-1.0, -1.0), (1.0, -1.0), (-1.0, 1.0), (1.0, 1.0)] {
        let (tu, tv) = theta.apply(u, v);
        let (px, py) = (cx + half * tu, cy + half * tv);
        hull.x1 = hull.x1.min(px);
        hull.y1 = hull.y1.min(py);
        hull.x2 = hull.x2.max(px);
        hull.y2 = hull.y2.max(py);
    }
    let bbox = hull.clip(image_w, image_h);
    DecodedBox {
        degenerate: bbox.area() <= 0.0,
        bbox,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scale() -> ScaleInfo {
        ScaleInfo {
            level: 0,
            stride: 8,
            height: 8,
            width: 8,
            base_size: 2.0,
        }
    }

    #[test]
    fn fresh_loc_net_predicts_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let loc = LocNet::new(&mut store, "loc", 4, 8, &mut rng);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let f = g.constant(Tensor::randn(&[2, 4, 3, 5], 1.0, &mut rng));
        let th = loc.forward(&mut g, &p, f).unwrap();
        let th = AffineTheta::new(g.value(th).clone()).unwrap();
        for n in 0..2 {
            for y in 0..3 {
                for x in 0..5 {
                    assert_eq!(th.at(n, y, x), Affine::IDENTITY);
                }
            }
        }
    }

    #[test]
    fn zero_input_yields_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let loc = LocNet::new(&mut store, "loc", 3, 8, &mut rng);
        let bias = [0.7, 0.1, -0.2, 0.05, 1.3, 0.4];
        *store.get_mut(loc.out.bias.unwrap()) = Tensor::new(&[6], bias.to_vec()).unwrap();
        *store.get_mut(loc.out.weight) = Tensor::randn(&[6, 8, 1, 1], 1.0, &mut rng);
        // zero hidden bias so a zero input gives zero hidden activations
        *store.get_mut(loc.hidden.bias.unwrap()) = Tensor::zeros(&[8]);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let f = g.constant(Tensor::zeros(&[1, 3, 2, 2]));
        let th = loc.forward(&mut g, &p, f).unwrap();
        let th = AffineTheta::new(g.value(th).clone()).unwrap();
        assert_eq!(th.at(0, 1, 0), Affine(bias));
    }

    #[test]
    fn identity_box_is_default_box() {
        let s = scale();
        let d = theta_to_box(&Affine::IDENTITY, 3, 4, &s, 64.0, 64.0);
        assert_eq!(d.bbox, BoxXYXY::new(28.0, 20.0, 44.0, 36.0));
        assert!(!d.degenerate);
    }

    #[test]
    fn half_scale_halves_side() {
        let s = scale();
        let d = theta_to_box(&Affine::scaling(0.5, 0.5), 3, 3, &s, 64.0, 64.0);
        assert_eq!(d.bbox, BoxXYXY::new(24.0, 24.0, 32.0, 32.0));
    }

    #[test]
    fn rotation_hull_grows_by_sqrt2() {
        // oracle: rotate the four corners by hand and take their extent
        let s = scale();
        let (cx, cy, side) = s.default_box(3, 3);
        let d = theta_to_box(&Affine::rotation(std::f64::consts::FRAC_PI_4), 3, 3, &s, 1e3, 1e3);
        let c = std::f64::consts::FRAC_PI_4.cos();
        let corner_x: Vec<f64> = [(-1.0, -1.0), (1.0, -1.0), (-1.0, 1.0), (1.0, 1.0)]
            .iter()
            .map(|(u, v)| cx + side / 2.0 * (c * u - c * v))
            .collect();
        let extent = corner_x.iter().cloned().fold(f64::MIN, f64::max)
            - corner_x.iter().cloned().fold(f64::MAX, f64::min);
        assert!((d.bbox.width() - extent).abs() < 1e-12);
        assert!((d.bbox.width() - side * 2f64.sqrt()).abs() < 1e-12);
        assert!((d.bbox.height() - side * 2f64.sqrt()).abs() < 1e-12);
        assert!((d.bbox.center().0 - cx).abs() < 1e-12 && (d.bbox.center().1 - cy).abs() < 1e-12);
    }

    #[test]
    fn boxes_are_clipped_and_flagged() {
        let s = scale();
        let d = theta_to_box(&Affine::translation(-100.0, 0.0), 0, 0, &s, 64.0, 64.0);
        assert!(d.degenerate);
        assert_eq!(d.bbox.area(), 0.0);
        let d = theta_to_box(&Affine::scaling(10.0, 10.0), 0, 0, &s, 64.0, 64.0);
        assert_eq!(d.bbox, BoxXYXY::new(0.0, 0.0, 64.0, 64.0));
    }

    #[test]
    fn cstn_conv_rejects_misaligned_theta() {
        let mut g = Graph::new();
        let f = g.constant(Tensor::zeros(&[1, 2, 4, 4]));
        let th = g.constant(AffineTheta::identity(1, 3, 4).into_tensor());
        let w = g.constant(Tensor::zeros(&[1, 2, 3, 3]));
        assert!(matches!(cstn_conv(&mut g, f, th, w, None), Err(Error::Shape { .. })));
    }
}
