//! Small convolutional backbone, two-level feature pyramid and the shared
//! CSTN head applied at each level.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchNormMode, Graph, Var};
use crate::error::{Error, Result};
use crate::geometry::BoxXYXY;
use crate::nn::{BatchNorm, Bound, BufferStore, Conv, ParamStore};
use crate::stn::{cstn_conv, AffineTheta, LocNet};

/// Input sides must be multiples of this (the coarsest stride).
pub const INPUT_MULTIPLE: usize = 16;

/// Location grid of one pyramid level.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleInfo {
    /// 0 for the finer level (P4), 1 for the coarser one (P5).
    pub level: usize,
    /// Pixels per cell.
    pub stride: usize,
    pub height: usize,
    pub width: usize,
    pub base_size: f64,
}

impl ScaleInfo {
    pub fn locations(&self) -> usize {
        self.height * self.width
    }

    /// `(cx, cy, side)` in pixels of the default box at cell `(y, x)`.
    pub fn default_box(&self, y: usize, x: usize) -> (f64, f64, f64) {
        let s = self.stride as f64;
        ((x as f64 + 0.5) * s, (y as f64 + 0.5) * s, self.base_size * s)
    }

    pub fn default_box_xyxy(&self, y: usize, x: usize) -> BoxXYXY {
        let (cx, cy, side) = self.default_box(y, x);
        BoxXYXY::square(cx, cy, side)
    }
}

/// Which pyramid levels feed the joint distribution.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LevelSelect {
    #[default]
    Both,
    FinerOnly,
    CoarserOnly,
}

impl LevelSelect {
    pub fn levels(self) -> &'static [usize] {
        match self {
            LevelSelect::Both => &[0, 1],
            LevelSelect::FinerOnly => &[0],
            LevelSelect::CoarserOnly => &[1],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub num_classes: usize,
    pub in_channels: usize,
    /// Output channels of the four backbone blocks.
    pub widths: [usize; 4],
    /// Pyramid channel count.
    pub fpn_channels: usize,
    pub loc_hidden: usize,
    pub kernel: usize,
    /// Default box side in units of the level stride.
    pub base_size: f64,
    pub use_cstn: bool,
    pub levels: LevelSelect,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_classes: 6,
            in_channels: 3,
            widths: [16, 32, 64, 64],
            fpn_channels: 64,
            loc_hidden: 32,
            kernel: 3,
            base_size: 3.0,
            use_cstn: true,
            levels: LevelSelect::Both,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.num_classes == 0 || self.in_channels == 0 || self.fpn_channels == 0 || self.loc_hidden == 0 {
            return bad("channel and class counts must be positive");
        }
        if self.widths.contains(&0) {
            return bad("backbone widths must be positive");
        }
        if self.kernel % 2 == 0 {
            return bad("head kernel must be odd");
        }
        if !(self.base_size.is_finite() && self.base_size > 0.0) {
            return bad("base_size must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct Block {
    conv: Conv,
    bn: BatchNorm,
    down: Conv,
}

/// Four `[conv3×3, BN, ReLU, stride-2 conv3×3, ReLU]` blocks plus an extra
/// conv3×3 + BN on the last one.
#[derive(Clone, Debug)]
pub struct Backbone {
    blocks: Vec<Block>,
    extra: Conv,
    extra_bn: BatchNorm,
}

impl Backbone {
    fn new<R: Rng + ?Sized>(
        cfg: &ModelConfig,
        store: &mut ParamStore,
        buffers: &mut BufferStore,
        rng: &mut R,
    ) -> Self {
        let mut cin = cfg.in_channels;
        let mut blocks = Vec::new();
        for (i, &w) in cfg.widths.iter().enumerate() {
            blocks.push(Block {
                conv: Conv::new(store, &format!("backbone.{i}.conv"), cin, w, 3, 1, false, rng),
                bn: BatchNorm::new(store, buffers, &format!("backbone.{i}.bn"), w),
                down: Conv::new(store, &format!("backbone.{i}.down"), w, w, 3, 2, true, rng),
            });
            cin = w;
        }
        Self {
            blocks,
            extra: Conv::new(store, "backbone.extra.conv", cin, cin, 3, 1, false, rng),
            extra_bn: BatchNorm::new(store, buffers, "backbone.extra.bn", cin),
        }
    }

    /// Returns `(C4, C5)` at strides 8 and 16.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        buffers: &mut BufferStore,
        image: Var,
        mode: BatchNormMode,
    ) -> Result<(Var, Var)> {
        let [_, _, h, w] = g.value(image).dims4("backbone")?;
        if h % INPUT_MULTIPLE != 0 || w % INPUT_MULTIPLE != 0 || h == 0 || w == 0 {
            return Err(Error::shape(
                "backbone",
                format!("input {h}×{w} is not a positive multiple of {INPUT_MULTIPLE}"),
            ));
        }
        let mut x = image;
        let mut c4 = None;
        for (i, b) in self.blocks.iter().enumerate() {
            x = b.conv.forward(g, p, x)?;
            x = b.bn.forward(g, p, buffers, x, mode)?;
            x = g.relu(x);
            x = b.down.forward(g, p, x)?;
            x = g.relu(x);
            if i == 2 {
                c4 = Some(x);
            }
        }
        let c5 = self.extra.forward(g, p, x)?;
        let c5 = self.extra_bn.forward(g, p, buffers, c5, mode)?;
        Ok((c4.expect("four blocks"), c5))
    }
}

/// Top-down merge of the last two backbone levels.
#[derive(Clone, Copy, Debug)]
pub struct Fpn {
    lateral4: Conv,
    lateral5: Conv,
    smooth: Conv,
}

impl Fpn {
    fn new<R: Rng + ?Sized>(cfg: &ModelConfig, store: &mut ParamStore, rng: &mut R) -> Self {
        let d = cfg.fpn_channels;
        Self {
            lateral4: Conv::new(store, "fpn.lateral4", cfg.widths[2], d, 1, 1, true, rng),
            lateral5: Conv::new(store, "fpn.lateral5", cfg.widths[3], d, 1, 1, true, rng),
            smooth: Conv::new(store, "fpn.smooth", d, d, 3, 1, true, rng),
        }
    }

    /// `P5 = lat5(C5)`, `P4 = smooth(lat4(C4) + up2(P5))`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, c4: Var, c5: Var) -> Result<(Var, Var)> {
        let [_, _, h4, w4] = g.value(c4).dims4("fpn_merge")?;
        let [_, _, h5, w5] = g.value(c5).dims4("fpn_merge")?;
        if (h4, w4) != (2 * h5, 2 * w5) {
            return Err(Error::shape(
                "fpn_merge",
                format!("C4 {h4}×{w4} is not twice C5 {h5}×{w5}"),
            ));
        }
        let p5 = self.lateral5.forward(g, p, c5)?;
        let l4 = self.lateral4.forward(g, p, c4)?;
        let up = g.upsample_nearest2x(p5)?;
        let sum = g.add(l4, up)?;
        let p4 = self.smooth.forward(g, p, sum)?;
        Ok((p4, p5))
    }
}

/// Class logits for one level, read through per-location transforms when a
/// loc net is present and through a plain convolution otherwise.
#[derive(Clone, Copy, Debug)]
pub struct Head {
    pub loc: Option<LocNet>,
    pub cls: Conv,
}

impl Head {
    fn new<R: Rng + ?Sized>(cfg: &ModelConfig, store: &mut ParamStore, rng: &mut R) -> Self {
        let loc = cfg
            .use_cstn
            .then(|| LocNet::new(store, "head.loc", cfg.fpn_channels, cfg.loc_hidden, rng));
        Self {
            loc,
            cls: Conv::new(store, "head.cls", cfg.fpn_channels, cfg.num_classes, cfg.kernel, 1, true, rng),
        }
    }

    /// Returns `(logits [N, C, h, w], theta [N, 6, h, w])`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, f: Var) -> Result<(Var, Var)> {
        match &self.loc {
            Some(loc) => {
                let theta = loc.forward(g, p, f)?;
                let logits = cstn_conv(g, f, theta, p.var(self.cls.weight), self.cls.bias.map(|b| p.var(b)))?;
                Ok((logits, theta))
            }
            None => {
                let [n, _, h, w] = g.value(f).dims4("head")?;
                let logits = self.cls.forward(g, p, f)?;
                let theta = g.constant(AffineTheta::identity(n, h, w).into_tensor());
                Ok((logits, theta))
            }
        }
    }
}

/// Per-level outputs, ordered finer first.
#[derive(Clone, Debug)]
pub struct PyramidOutput {
    pub logits: Vec<Var>,
    pub thetas: Vec<Var>,
    pub scales: Vec<ScaleInfo>,
}

/// The full localization network with its parameters and batch-norm buffers.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub buffers: BufferStore,
    pub backbone: Backbone,
    pub fpn: Fpn,
    pub head: Head,
}

impl Model {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut buffers = BufferStore::default();
        let backbone = Backbone::new(&config, &mut params, &mut buffers, rng);
        let fpn = Fpn::new(&config, &mut params, rng);
        let head = Head::new(&config, &mut params, rng);
        Ok(Self {
            config,
            params,
            buffers,
            backbone,
            fpn,
            head,
        })
    }

    /// Level geometry for an `h×w` input.
    pub fn scales(&self, h: usize, w: usize) -> Vec<ScaleInfo> {
        self.config
            .levels
            .levels()
            .iter()
            .map(|&level| {
                let stride = 8 << level;
                ScaleInfo {
                    level,
                    stride,
                    height: h / stride,
                    width: w / stride,
                    base_size: self.config.base_size,
                }
            })
            .collect()
    }

    /// Binds the parameters to `g` and runs the network on `image [N, C, H, W]`.
    pub fn forward(&mut self, g: &mut Graph, image: Var, mode: BatchNormMode) -> Result<(Bound, PyramidOutput)> {
        let p = self.params.bind(g);
        let out = self.forward_bound(g, &p, image, mode)?;
        Ok((p, out))
    }

    pub fn forward_bound(
        &mut self,
        g: &mut Graph,
        p: &Bound,
        image: Var,
        mode: BatchNormMode,
    ) -> Result<PyramidOutput> {
        let (c4, c5) = self.backbone.forward(g, p, &mut self.buffers, image, mode)?;
        let (p4, p5) = self.fpn.forward(g, p, c4, c5)?;
        let [_, _, h, w] = g.value(image).dims4("model")?;
        let scales = self.scales(h, w);
        let mut logits = Vec::new();
        let mut thetas = Vec::new();
        for s in &scales {
            let f = if s.level == 0 { p4 } else { p5 };
            let (l, t) = self.head.forward(g, p, f)?;
            logits.push(l);
            thetas.push(t);
        }
        Ok(PyramidOutput { logits, thetas, scales })
    }
}

/// Backbone followed by a 1×1 classifier and global average pooling; the
/// reference for how well labels can be learned without localization.
#[derive(Clone, Debug)]
pub struct PlainClassifier {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub buffers: BufferStore,
    pub backbone: Backbone,
    pub fc: Conv,
}

impl PlainClassifier {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut buffers = BufferStore::default();
        let backbone = Backbone::new(&config, &mut params, &mut buffers, rng);
        let fc = Conv::new(&mut params, "fc", config.widths[3], config.num_classes, 1, 1, true, rng);
        Ok(Self {
            config,
            params,
            buffers,
            backbone,
            fc,
        })
    }

    /// Class logits `[N, C]`.
    pub fn forward(&mut self, g: &mut Graph, image: Var, mode: BatchNormMode) -> Result<(Bound, Var)> {
        let p = self.params.bind(g);
        let (_, c5) = self.backbone.forward(g, &p, &mut self.buffers, image, mode)?;
        let x = g.relu(c5);
        let x = self.fc.forward(g, &p, x)?;
        let pooled = g.global_avg_pool(x)?;
        Ok((p, pooled))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::{gradcheck, GradcheckOptions};
    use crate::stn::Affine;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> ModelConfig {
        ModelConfig {
            num_classes: 3,
            widths: [2, 3, 4, 4],
            fpn_channels: 4,
            loc_hidden: 3,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn level_shapes_on_64() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut m = Model::new(tiny(), &mut rng).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::randn(&[2, 3, 64, 64], 1.0, &mut rng));
        let p = m.params.bind(&mut g);
        let (c4, c5) = m.backbone.forward(&mut g, &p, &mut m.buffers, x, BatchNormMode::Train).unwrap();
        assert_eq!(g.shape(c4), &[2, 4, 8, 8]);
        assert_eq!(g.shape(c5), &[2, 4, 4, 4]);
        let (_, out) = m.forward(&mut g, x, BatchNormMode::Train).unwrap();
        assert_eq!(g.shape(out.logits[0]), &[2, 3, 8, 8]);
        assert_eq!(g.shape(out.logits[1]), &[2, 3, 4, 4]);
        assert_eq!(g.shape(out.thetas[1]), &[2, 6, 4, 4]);
        assert_eq!(out.scales[0].stride, 8);
        assert_eq!(out.scales[1].stride, 16);
    }

    #[test]
    fn indivisible_input_is_rejected_before_work() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut m = Model::new(tiny(), &mut rng).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 3, 40, 64]));
        let before = g.len();
        let p = m.params.bind(&mut g);
        let bound = g.len();
        assert!(matches!(
            m.backbone.forward(&mut g, &p, &mut m.buffers, x, BatchNormMode::Train),
            Err(Error::Shape { .. })
        ));
        assert_eq!(g.len(), bound);
        assert!(bound > before);
    }

    #[test]
    fn default_boxes_tile_the_image() {
        let s = ScaleInfo {
            level: 1,
            stride: 16,
            height: 4,
            width: 4,
            base_size: 3.0,
        };
        for y in 0..4 {
            for x in 0..4 {
                let (cx, cy, side) = s.default_box(y, x);
                assert_eq!((cx, cy), (8.0 + 16.0 * x as f64, 8.0 + 16.0 * y as f64));
                assert_eq!(side, 48.0);
            }
        }
    }

    fn fpn_only(rng: &mut ChaCha8Rng) -> (ParamStore, Fpn) {
        let mut store = ParamStore::new();
        let fpn = Fpn::new(&tiny(), &mut store, rng);
        (store, fpn)
    }

    #[test]
    fn fpn_zero_c4_passes_only_top_down() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (mut store, fpn) = fpn_only(&mut rng);
        // zero lateral4 bias so a zero C4 contributes nothing
        *store.get_mut(fpn.lateral4.bias.unwrap()) = Tensor::zeros(&[4]);
        let c5v = Tensor::randn(&[1, 4, 2, 2], 1.0, &mut rng);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let c4 = g.constant(Tensor::zeros(&[1, 4, 4, 4]));
        let c5 = g.constant(c5v);
        let (p4, p5) = fpn.forward(&mut g, &p, c4, c5).unwrap();
        let up = g.upsample_nearest2x(p5).unwrap();
        let expect = fpn.smooth.forward(&mut g, &p, up).unwrap();
        assert!(g.value(p4).max_abs_diff(g.value(expect)) < 1e-12);
    }

    #[test]
    fn fpn_zero_c5_leaves_lateral_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (mut store, fpn) = fpn_only(&mut rng);
        *store.get_mut(fpn.lateral5.bias.unwrap()) = Tensor::zeros(&[4]);
        let c4v = Tensor::randn(&[1, 4, 4, 4], 1.0, &mut rng);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let c4 = g.constant(c4v);
        let c5 = g.constant(Tensor::zeros(&[1, 4, 2, 2]));
        let (p4, _) = fpn.forward(&mut g, &p, c4, c5).unwrap();
        let l4 = fpn.lateral4.forward(&mut g, &p, c4).unwrap();
        let expect = fpn.smooth.forward(&mut g, &p, l4).unwrap();
        assert!(g.value(p4).max_abs_diff(g.value(expect)) < 1e-12);
    }

    #[test]
    fn fpn_rejects_mismatched_levels() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (store, fpn) = fpn_only(&mut rng);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let c4 = g.constant(Tensor::zeros(&[1, 4, 4, 4]));
        let c5 = g.constant(Tensor::zeros(&[1, 4, 3, 2]));
        assert!(matches!(fpn.forward(&mut g, &p, c4, c5), Err(Error::Shape { .. })));
    }

    #[test]
    fn fpn_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (store, fpn) = fpn_only(&mut rng);
        let c4 = Tensor::randn(&[1, 4, 4, 4], 1.0, &mut rng);
        let c5 = Tensor::randn(&[1, 4, 2, 2], 1.0, &mut rng);
        let mut inputs = vec![c4, c5];
        inputs.extend(store.iter().map(|(_, t)| t.clone()));
        let r = gradcheck(
            |g, v| {
                let p = crate::nn::Bound::from_vars(v[2..].to_vec());
                let (p4, p5) = fpn.forward(g, &p, v[0], v[1])?;
                let a = g.sum(p4);
                let b = g.sum(p5);
                let b = g.scale(b, 0.5);
                g.add(a, b)
            },
            &inputs,
            &GradcheckOptions::linear(),
            &mut rng,
        )
        .unwrap();
        assert!(r.passed, "{r}");
    }

    #[test]
    fn untrained_loc_net_reduces_to_plain_head() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let with = Model::new(tiny(), &mut rng).unwrap();
        let mut plain = Model::new(ModelConfig { use_cstn: false, ..tiny() }, &mut rng).unwrap();
        for id in plain.params.ids().collect::<Vec<_>>() {
            let src = with.params.find(plain.params.name(id)).unwrap();
            *plain.params.get_mut(id) = with.params.get(src).clone();
        }
        let mut with = with;
        let x = Tensor::randn(&[2, 3, 32, 32], 1.0, &mut rng);
        let mut g1 = Graph::new();
        let x1 = g1.constant(x.clone());
        let (_, o1) = with.forward(&mut g1, x1, BatchNormMode::Train).unwrap();
        let mut g2 = Graph::new();
        let x2 = g2.constant(x);
        let (_, o2) = plain.forward(&mut g2, x2, BatchNormMode::Train).unwrap();
        for s in 0..2 {
            assert!(g1.value(o1.logits[s]).max_abs_diff(g2.value(o2.logits[s])) < 1e-9);
            assert_eq!(g1.value(o1.thetas[s]), g2.value(o2.thetas[s]));
        }
    }

    #[test]
    fn plain_model_has_no_loc_params() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let plain = Model::new(ModelConfig { use_cstn: false, ..tiny() }, &mut rng).unwrap();
        assert!(plain.params.iter().all(|(n, _)| !n.contains("loc")));
        let with = Model::new(tiny(), &mut rng).unwrap();
        assert!(with.params.iter().any(|(n, _)| n.starts_with("head.loc")));
    }

    #[test]
    fn plain_classifier_emits_class_scores() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut m = PlainClassifier::new(tiny(), &mut rng).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::randn(&[2, 3, 32, 32], 1.0, &mut rng));
        let (_, logits) = m.forward(&mut g, x, BatchNormMode::Train).unwrap();
        assert_eq!(g.shape(logits), &[2, 3]);
    }

    #[test]
    fn parameter_count_does_not_depend_on_levels() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let counts: Vec<usize> = [LevelSelect::Both, LevelSelect::FinerOnly, LevelSelect::CoarserOnly]
            .into_iter()
            .map(|levels| {
                Model::new(ModelConfig { levels, ..tiny() }, &mut rng)
                    .unwrap()
                    .params
                    .num_scalars()
            })
            .collect();
        assert!(counts.windows(2).all(|w| w[0] == w[1]), "{counts:?}");
    }

    #[test]
    fn upsampled_content_gives_matching_logits_across_levels() {
        // Coarse cell (y, x) covers fine cells 2y..2y+1. A fine location at
        // (2y, 2x) with θ = 2·I shifted by half a cell reads the same three
        // coarse cells as the identity window at (y, x).
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut g = Graph::new();
        let coarse = g.constant(Tensor::randn(&[1, 4, 4, 4], 1.0, &mut rng));
        let fine = g.upsample_nearest2x(coarse).unwrap();
        let w = g.constant(Tensor::randn(&[3, 4, 3, 3], 1.0, &mut rng));
        let b = g.constant(Tensor::randn(&[3], 1.0, &mut rng));
        let tc = g.constant(AffineTheta::identity(1, 4, 4).into_tensor());
        let tf = g.constant(AffineTheta::uniform(1, 8, 8, Affine([2.0, 0.0, 0.5, 0.0, 2.0, 0.5])).into_tensor());
        let lc = cstn_conv(&mut g, coarse, tc, w, Some(b)).unwrap();
        let lf = cstn_conv(&mut g, fine, tf, w, Some(b)).unwrap();
        let (lc, lf) = (g.value(lc), g.value(lf));
        for c in 0..3 {
            for y in 0..4 {
                for x in 0..4 {
                    let a = lc.data()[(c * 4 + y) * 4 + x];
                    let f = lf.data()[(c * 8 + 2 * y) * 8 + 2 * x];
                    assert!((a - f).abs() < 1e-9, "c={c} y={y} x={x}: {a} vs {f}");
                }
            }
        }
    }

    #[test]
    fn head_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let cfg = tiny();
        let head = Head::new(&cfg, &mut store, &mut rng);
        // move θ off the identity so sampling is exercised between cells
        let loc = head.loc.unwrap();
        *store.get_mut(loc.out.weight) = Tensor::randn(&[6, 3, 1, 1], 0.1, &mut rng);
        let bias = Tensor::new(&[6], vec![1.13, 0.07, 0.21, -0.05, 0.91, -0.17]).unwrap();
        *store.get_mut(loc.out.bias.unwrap()) = bias;
        let f = Tensor::randn(&[2, 4, 3, 3], 1.0, &mut rng);
        let mut inputs = vec![f];
        inputs.extend(store.iter().map(|(_, t)| t.clone()));
        let r = gradcheck(
            |g, v| {
                let p = crate::nn::Bound::from_vars(v[1..].to_vec());
                let (l, t) = head.forward(g, &p, v[0])?;
                let s = g.sum(t);
                let s = g.scale(s, 0.1);
                let m = g.mul(l, l)?;
                let m = g.sum(m);
                g.add(m, s)
            },
            &inputs,
            &GradcheckOptions::composite(),
            &mut rng,
        )
        .unwrap();
        assert!(r.passed, "{r}");
    }
}
