//! Synthetic weakly labeled shapes.
//!
//! Every image holds one foreground shape on a cluttered background. The
//! class label is the shape; the tight box of the rendered shape is kept for
//! evaluation only.

use std::f64::consts::{PI, TAU};
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BoxXYXY;
use crate::tensor::Tensor;

pub const SHAPE_NAMES: [&str; 6] = ["disk", "square", "triangle", "cross", "ring", "bar"];

/// Number of equal-width area bins used for size histograms.
pub const AREA_BINS: usize = 10;

const MAX_ATTEMPTS: usize = 64;
const IMAGE_MAGIC: [u8; 4] = *b"CSTI";
const MANIFEST_FORMAT: &str = "cstn-dataset";
const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

impl Split {
    fn stream_tag(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Val => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub seed: u64,
    pub num_classes: usize,
    pub train_count: usize,
    pub val_count: usize,
    pub image_size: usize,
    /// Longest side of the object's tight box as a fraction of the image side.
    pub scale_range: [f64; 2],
    /// Width/height stretch applied before rotation.
    pub aspect_range: [f64; 2],
    /// 0 gives a flat black background.
    pub clutter: f64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            num_classes: 6,
            train_count: 2000,
            val_count: 500,
            image_size: 64,
            scale_range: [0.15, 0.8],
            aspect_range: [0.8, 1.25],
            clutter: 0.5,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.num_classes == 0 || self.num_classes > SHAPE_NAMES.len() {
            return bad(format!("num_classes must be in 1..={}, got {}", SHAPE_NAMES.len(), self.num_classes));
        }
        if self.image_size < 8 {
            return bad(format!("image_size {} is too small", self.image_size));
        }
        let [lo, hi] = self.scale_range;
        if !(lo > 0.0 && lo < hi && hi <= 1.0) {
            return bad(format!("scale_range must satisfy 0 < lo < hi <= 1, got {:?}", self.scale_range));
        }
        let [alo, ahi] = self.aspect_range;
        if !(alo > 0.0 && alo <= ahi && ahi.is_finite()) {
            return bad(format!("aspect_range must satisfy 0 < lo <= hi, got {:?}", self.aspect_range));
        }
        if !(0.0..=1.0).contains(&self.clutter) {
            return bad(format!("clutter must be in [0, 1], got {}", self.clutter));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WeakSample {
    pub id: usize,
    /// `[3, S, S]` with values in `[0, 1]`.
    pub image: Tensor,
    pub label: usize,
    /// Evaluation only.
    pub gt_box: BoxXYXY,
    pub area_bin: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub train: Vec<WeakSample>,
    pub val: Vec<WeakSample>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[WeakSample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
        }
    }
}

/// Where a pose puts a shape: canonical coordinates `q` map to pixels as
/// `center + r·R(φ)·diag(sx, sy)·q`.
#[derive(Clone, Copy, Debug)]
struct Pose {
    cx: f64,
    cy: f64,
    r: f64,
    sx: f64,
    sy: f64,
    cos: f64,
    sin: f64,
}

impl Pose {
    fn forward(&self, u: f64, v: f64) -> (f64, f64) {
        let (a, b) = (u * self.sx * self.r, v * self.sy * self.r);
        (self.cx + self.cos * a - self.sin * b, self.cy + self.sin * a + self.cos * b)
    }

    fn inverse(&self, x: f64, y: f64) -> (f64, f64) {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let a = self.cos * dx + self.sin * dy;
        let b = -self.sin * dx + self.cos * dy;
        (a / (self.sx * self.r), b / (self.sy * self.r))
    }
}

/// Membership test in canonical coordinates where every shape fits `[-1, 1]²`.
fn inside(class: usize, u: f64, v: f64) -> bool {
    match class {
        0 => u * u + v * v <= 1.0,
        1 => u.abs() <= 1.0 && v.abs() <= 1.0,
        2 => {
            // equilateral, apex up, vertices on the unit circle
            let h = 3f64.sqrt() / 2.0;
            v <= 0.5 && v >= -1.0 && u.abs() <= h * (v + 1.0) / 1.5
        }
        3 => (u.abs() <= 1.0 && v.abs() <= 0.34) || (u.abs() <= 0.34 && v.abs() <= 1.0),
        4 => {
            let d = u * u + v * v;
            (0.3..=1.0).contains(&d)
        }
        5 => u.abs() <= 1.0 && v.abs() <= 0.28,
        _ => false,
    }
}

/// Points whose transformed hull equals the transformed shape's hull.
fn outline(class: usize) -> Vec<(f64, f64)> {
    match class {
        0 | 4 => (0..720).map(|i| i as f64 * TAU / 720.0).map(|t| (t.cos(), t.sin())).collect(),
        1 => vec![(-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0)],
        2 => {
            let h = 3f64.sqrt() / 2.0;
            vec![(0.0, -1.0), (-h, 0.5), (h, 0.5)]
        }
        3 => {
            let t = 0.34;
            vec![(-1.0, -t), (-1.0, t), (1.0, -t), (1.0, t), (-t, -1.0), (t, -1.0), (-t, 1.0), (t, 1.0)]
        }
        5 => vec![(-1.0, -0.28), (1.0, -0.28), (1.0, 0.28), (-1.0, 0.28)],
        _ => Vec::new(),
    }
}

/// Extent `(width, height)` of `class` under a unit-radius pose.
fn unit_extent(class: usize, pose: &Pose) -> (f64, f64) {
    let p = Pose { cx: 0.0, cy: 0.0, r: 1.0, ..*pose };
    let pts: Vec<(f64, f64)> = outline(class).into_iter().map(|(u, v)| p.forward(u, v)).collect();
    let span = |f: fn(&(f64, f64)) -> f64| {
        let lo = pts.iter().map(f).fold(f64::INFINITY, f64::min);
        let hi = pts.iter().map(f).fold(f64::NEG_INFINITY, f64::max);
        hi - lo
    };
    (span(|p| p.0), span(|p| p.1))
}

/// Hard-edged mask of a posed shape sampled at pixel centers.
fn rasterize(class: usize, pose: &Pose, size: usize) -> Vec<bool> {
    let mut mask = vec![false; size * size];
    for y in 0..size {
        for x in 0..size {
            let (u, v) = pose.inverse(x as f64 + 0.5, y as f64 + 0.5);
            mask[y * size + x] = inside(class, u, v);
        }
    }
    mask
}

/// Tight pixel box of a mask, `None` if empty.
fn mask_box(mask: &[bool], size: usize) -> Option<BoxXYXY> {
    let (mut x1, mut y1, mut x2, mut y2) = (usize::MAX, usize::MAX, 0, 0);
    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        let (x, y) = (i % size, i / size);
        x1 = x1.min(x);
        y1 = y1.min(y);
        x2 = x2.max(x + 1);
        y2 = y2.max(y + 1);
    }
    (x1 != usize::MAX).then(|| BoxXYXY::new(x1 as f64, y1 as f64, x2 as f64, y2 as f64))
}

/// Smooth random field in `[0, 1]`: bilinear upsampling of a 4×4 grid.
fn low_freq_noise<R: Rng>(rng: &mut R, size: usize) -> Vec<f64> {
    const G: usize = 4;
    let grid: Vec<f64> = (0..G * G).map(|_| rng.random::<f64>()).collect();
    let mut out = vec![0.0; size * size];
    let step = (G - 1) as f64 / (size - 1) as f64;
    for y in 0..size {
        for x in 0..size {
            let (gy, gx) = (y as f64 * step, x as f64 * step);
            let (y0, x0) = ((gy as usize).min(G - 2), (gx as usize).min(G - 2));
            let (fy, fx) = (gy - y0 as f64, gx - x0 as f64);
            let at = |yy: usize, xx: usize| grid[yy * G + xx];
            out[y * size + x] = (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x0 + 1))
                + fy * ((1.0 - fx) * at(y0 + 1, x0) + fx * at(y0 + 1, x0 + 1));
        }
    }
    out
}

fn paint(image: &mut [f64], size: usize, mask: &[bool], color: [f64; 3]) {
    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        for (ch, c) in color.iter().enumerate() {
            image[ch * size * size + i] = *c;
        }
    }
}

fn bright_color<R: Rng>(rng: &mut R) -> [f64; 3] {
    [rng.random_range(0.55..1.0), rng.random_range(0.55..1.0), rng.random_range(0.55..1.0)]
}

/// Per-sample generator seeded from `(seed, split, index)` alone.
fn sample_rng(seed: u64, split: Split, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((split.stream_tag() << 48) | index as u64);
    rng
}

/// Renders one sample; `area_bin` is filled in once the split is complete.
fn render(spec: &DatasetSpec, split: Split, index: usize) -> Result<WeakSample> {
    let size = spec.image_size;
    let sz = size as f64;
    let mut rng = sample_rng(spec.seed, split, index);
    let label = rng.random_range(0..spec.num_classes);

    let mut image = vec![0.0; 3 * size * size];
    if spec.clutter > 0.0 {
        for ch in 0..3 {
            let base = rng.random_range(0.0..0.1);
            let noise = low_freq_noise(&mut rng, size);
            for (i, n) in noise.iter().enumerate() {
                image[ch * size * size + i] = base + 0.35 * spec.clutter * n;
            }
        }
        let blobs = (spec.clutter * 6.0).round() as usize;
        for _ in 0..blobs {
            // small ellipses well below the smallest object scale
            let r = rng.random_range(1.0..(0.05 * sz).max(1.5));
            let pose = Pose {
                cx: rng.random_range(0.0..sz),
                cy: rng.random_range(0.0..sz),
                r,
                sx: rng.random_range(0.6..1.0),
                sy: 1.0,
                cos: 1.0,
                sin: 0.0,
            };
            let mask = rasterize(0, &pose, size);
            let color = bright_color(&mut rng);
            paint(&mut image, size, &mask, color);
        }
    }

    let [slo, shi] = spec.scale_range;
    let [alo, ahi] = spec.aspect_range;
    for _ in 0..MAX_ATTEMPTS {
        // uniform in area between the requested scale limits
        let scale = rng.random_range(slo * slo..=shi * shi).sqrt();
        let aspect = if alo < ahi { rng.random_range(alo..=ahi) } else { alo };
        let angle = if matches!(label, 0 | 4) { 0.0 } else { rng.random_range(0.0..PI * 2.0) };
        let mut pose = Pose {
            cx: 0.0,
            cy: 0.0,
            r: 1.0,
            sx: aspect.sqrt(),
            sy: 1.0 / aspect.sqrt(),
            cos: angle.cos(),
            sin: angle.sin(),
        };
        let (w, h) = unit_extent(label, &pose);
        pose.r = scale * sz / w.max(h);
        let (bw, bh) = (w * pose.r, h * pose.r);
        // keep a one pixel margin so the box stays strictly inside
        let (mx, my) = (sz - bw - 2.0, sz - bh - 2.0);
        if mx < 0.0 || my < 0.0 {
            continue;
        }
        let x0 = 1.0 + rng.random_range(0.0..=mx);
        let y0 = 1.0 + rng.random_range(0.0..=my);
        // hull center of the outline, not the shape origin (triangles are off-center)
        let p0 = Pose { cx: 0.0, cy: 0.0, ..pose };
        let pts: Vec<(f64, f64)> = outline(label).into_iter().map(|(u, v)| p0.forward(u, v)).collect();
        let minx = pts.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
        let miny = pts.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
        pose.cx = x0 - minx;
        pose.cy = y0 - miny;

        let mask = rasterize(label, &pose, size);
        let Some(gt_box) = mask_box(&mask, size) else { continue };
        if gt_box.x1 <= 0.0 || gt_box.y1 <= 0.0 || gt_box.x2 >= sz || gt_box.y2 >= sz {
            continue;
        }
        let color = bright_color(&mut rng);
        paint(&mut image, size, &mask, color);
        return Ok(WeakSample {
            id: index,
            image: Tensor::new(&[3, size, size], image)?,
            label,
            gt_box,
            area_bin: 0,
        });
    }
    Err(Error::Generation(format!(
        "{} sample {index}: no placement fits after {MAX_ATTEMPTS} attempts",
        split.as_str()
    )))
}

/// Bin of `area` among [`AREA_BINS`] equal-width bins over `[0, max_area]`.
pub fn area_bin(area: f64, max_area: f64) -> usize {
    if max_area <= 0.0 {
        return 0;
    }
    ((area / max_area * AREA_BINS as f64) as usize).min(AREA_BINS - 1)
}

fn assign_bins(samples: &mut [WeakSample]) {
    let max = samples.iter().map(|s| s.gt_box.area()).fold(0.0, f64::max);
    for s in samples {
        s.area_bin = area_bin(s.gt_box.area(), max);
    }
}

pub fn generate_split(spec: &DatasetSpec, split: Split) -> Result<Vec<WeakSample>> {
    spec.validate()?;
    let count = match split {
        Split::Train => spec.train_count,
        Split::Val => spec.val_count,
    };
    let mut samples = (0..count).map(|i| render(spec, split, i)).collect::<Result<Vec<_>>>()?;
    assign_bins(&mut samples);
    Ok(samples)
}

pub fn generate(spec: &DatasetSpec) -> Result<Dataset> {
    Ok(Dataset {
        spec: spec.clone(),
        train: generate_split(spec, Split::Train)?,
        val: generate_split(spec, Split::Val)?,
    })
}

/// Stacks samples into an `[N, 3, S, S]` batch.
pub fn batch_images(samples: &[&WeakSample]) -> Result<Tensor> {
    let images: Vec<&Tensor> = samples.iter().map(|s| &s.image).collect();
    Tensor::stack(&images)
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    spec: DatasetSpec,
    samples: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestEntry {
    split: Split,
    id: usize,
    file: String,
    label: usize,
    gt_box: BoxXYXY,
    area_bin: usize,
}

fn image_file(split: Split, id: usize) -> String {
    format!("{}_{id:06}.bin", split.as_str())
}

/// `CSTI` magic, then channels, height and width as `u32`, then the values as
/// little-endian `f64`.
pub fn encode_image(t: &Tensor) -> Result<Vec<u8>> {
    let dims = match t.shape() {
        &[c, h, w] => [c, h, w],
        s => return Err(Error::shape("encode_image", format!("expected [C, H, W], got {s:?}"))),
    };
    let mut out = Vec::with_capacity(16 + 8 * t.numel());
    out.extend_from_slice(&IMAGE_MAGIC);
    for d in dims {
        let d = u32::try_from(d).map_err(|_| Error::InvalidArgument(format!("dimension {d} too large")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_image(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let parse = |offset: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        offset,
        msg,
    };
    if bytes.len() < 16 {
        return Err(parse(bytes.len(), "file shorter than the 16-byte header".into()));
    }
    if bytes[..4] != IMAGE_MAGIC {
        return Err(parse(0, "bad magic".into()));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize;
    let shape = [dim(0), dim(1), dim(2)];
    let n: usize = shape.iter().product();
    let expected = 16 + 8 * n;
    if bytes.len() != expected {
        return Err(parse(
            bytes.len().min(expected),
            format!("expected {expected} bytes for shape {shape:?}, found {}", bytes.len()),
        ));
    }
    let data = bytes[16..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Tensor::new(&shape, data)
}

/// Writes `manifest.json` and one raw tensor file per image into `dir`.
pub fn save(dataset: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::new();
    for split in [Split::Train, Split::Val] {
        for s in dataset.split(split) {
            let file = image_file(split, s.id);
            fs::write(dir.join(&file), encode_image(&s.image)?)?;
            entries.push(ManifestEntry {
                split,
                id: s.id,
                file,
                label: s.label,
                gt_box: s.gt_box,
                area_bin: s.area_bin,
            });
        }
    }
    // one sample per line keeps the manifest diffable and countable
    let mut text = String::new();
    text.push_str(&format!(
        "{{\"format\":{},\"version\":{},\"spec\":{},\"samples\":[\n",
        serde_json::to_string(MANIFEST_FORMAT).expect("str"),
        MANIFEST_VERSION,
        serde_json::to_string(&dataset.spec).map_err(|e| Error::InvalidArgument(e.to_string()))?
    ));
    for (i, e) in entries.iter().enumerate() {
        text.push_str(&serde_json::to_string(e).map_err(|e| Error::InvalidArgument(e.to_string()))?);
        text.push_str(if i + 1 < entries.len() { ",\n" } else { "\n" });
    }
    text.push_str("]}\n");
    let mut f = fs::File::create(dir.join("manifest.json"))?;
    f.write_all(text.as_bytes())?;
    Ok(())
}

/// Byte offset of a 1-based `(line, column)` position in `text`.
fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    let start: usize = text.split_inclusive('\n').take(line.saturating_sub(1)).map(str::len).sum();
    (start + column.saturating_sub(1)).min(text.len())
}

pub fn load(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join("manifest.json");
    let text = fs::read_to_string(&manifest_path)?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: manifest_path.clone(),
        offset: byte_offset(&text, e.line(), e.column()),
        msg: e.to_string(),
    })?;
    let format_err = |msg: String| Error::Format {
        path: manifest_path.clone(),
        msg,
    };
    if manifest.format != MANIFEST_FORMAT {
        return Err(format_err(format!("unknown format {:?}", manifest.format)));
    }
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::Version {
            found: manifest.version,
            expected: MANIFEST_VERSION,
        });
    }
    let spec = manifest.spec;
    spec.validate()?;
    let size = spec.image_size as f64;
    let mut train = Vec::new();
    let mut val = Vec::new();
    for e in manifest.samples {
        if e.label >= spec.num_classes || e.area_bin >= AREA_BINS {
            return Err(format_err(format!("sample {} has label {} / bin {}", e.id, e.label, e.area_bin)));
        }
        if !e.gt_box.is_well_formed() || e.gt_box.x2 > size || e.gt_box.y2 > size || e.gt_box.x1 < 0.0 || e.gt_box.y1 < 0.0 {
            return Err(format_err(format!("sample {} has an invalid box {:?}", e.id, e.gt_box)));
        }
        if e.file.contains('/') || e.file.contains('\\') || e.file.contains("..") {
            return Err(format_err(format!("sample {} file name {:?} leaves the dataset directory", e.id, e.file)));
        }
        let path: PathBuf = dir.join(&e.file);
        let image = decode_image(&fs::read(&path)?, &path)?;
        if image.shape() != [3, spec.image_size, spec.image_size] {
            return Err(Error::Format {
                path,
                msg: format!("image shape {:?} does not match the spec", image.shape()),
            });
        }
        let s = WeakSample {
            id: e.id,
            image,
            label: e.label,
            gt_box: e.gt_box,
            area_bin: e.area_bin,
        };
        match e.split {
            Split::Train => train.push(s),
            Split::Val => val.push(s),
        }
    }
    if train.len() != spec.train_count || val.len() != spec.val_count {
        return Err(format_err(format!(
            "manifest lists {} train / {} val samples, spec says {} / {}",
            train.len(),
            val.len(),
            spec.train_count,
            spec.val_count
        )));
    }
    Ok(Dataset { spec, train, val })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DatasetSpec {
        DatasetSpec {
            train_count: 20,
            val_count: 8,
            ..DatasetSpec::default()
        }
    }

    #[test]
    fn same_seed_same_data() {
        let a = generate(&small()).unwrap();
        let b = generate(&small()).unwrap();
        assert_eq!(a, b);
        let c = generate(&DatasetSpec { seed: 1, ..small() }).unwrap();
        assert_ne!(a.train[0].image, c.train[0].image);
    }

    #[test]
    fn splits_use_distinct_streams() {
        let d = generate(&small()).unwrap();
        assert_ne!(d.train[0].image, d.val[0].image);
    }

    #[test]
    fn samples_do_not_depend_on_split_size() {
        let a = generate(&small()).unwrap();
        let b = generate(&DatasetSpec { train_count: 5, ..small() }).unwrap();
        for i in 0..5 {
            assert_eq!(a.train[i].image, b.train[i].image);
        }
    }

    #[test]
    fn centered_disk_box() {
        let pose = Pose {
            cx: 32.0,
            cy: 32.0,
            r: 16.0,
            sx: 1.0,
            sy: 1.0,
            cos: 1.0,
            sin: 0.0,
        };
        let (w, h) = unit_extent(0, &pose);
        assert!((w - 2.0).abs() < 1e-9 && (h - 2.0).abs() < 1e-9);
        let mask = rasterize(0, &pose, 64);
        let b = mask_box(&mask, 64).unwrap();
        assert!((b.width() - 32.0).abs() <= 1.0 && (b.height() - 32.0).abs() <= 1.0, "{b:?}");
        let (cx, cy) = b.center();
        assert!((cx - 32.0).abs() <= 0.5 && (cy - 32.0).abs() <= 0.5);
    }

    #[test]
    fn boxes_are_tight_and_inside() {
        let spec = DatasetSpec { clutter: 0.0, ..small() };
        let d = generate(&spec).unwrap();
        for s in d.train.iter().chain(&d.val) {
            let b = s.gt_box;
            assert!(b.x1 > 0.0 && b.y1 > 0.0 && b.x2 < 64.0 && b.y2 < 64.0);
            // with no clutter every lit pixel is the object; its extent is the box
            let lit: Vec<bool> = (0..64 * 64).map(|i| s.image.data()[i] > 0.0).collect();
            assert_eq!(mask_box(&lit, 64).unwrap(), b);
        }
    }

    #[test]
    fn realized_side_follows_requested_scale() {
        let spec = DatasetSpec {
            train_count: 200,
            val_count: 0,
            clutter: 0.0,
            ..DatasetSpec::default()
        };
        let d = generate(&spec).unwrap();
        let (lo, hi) = (spec.scale_range[0] * 64.0, spec.scale_range[1] * 64.0);
        for s in &d.train {
            let side = s.gt_box.width().max(s.gt_box.height());
            assert!(side >= lo - 2.0 && side <= hi + 2.0, "{side}");
        }
    }

    #[test]
    fn area_census_fills_every_bin() {
        let spec = DatasetSpec {
            train_count: 10_000,
            val_count: 0,
            ..DatasetSpec::default()
        };
        let d = generate(&spec).unwrap();
        // recount from raw areas rather than trusting the stored bins
        let max = d.train.iter().map(|s| s.gt_box.area()).fold(0.0, f64::max);
        let mut counts = [0usize; AREA_BINS];
        for s in &d.train {
            let b = ((s.gt_box.area() / max * 10.0).floor() as usize).min(9);
            assert_eq!(b, s.area_bin);
            counts[b] += 1;
        }
        for (b, &c) in counts.iter().enumerate() {
            assert!(c as f64 >= 0.02 * 10_000.0, "bin {b} holds {c}: {counts:?}");
        }
    }

    #[test]
    fn impossible_spec_fails_generation() {
        let spec = DatasetSpec {
            scale_range: [0.99, 1.0],
            ..small()
        };
        assert!(matches!(generate(&spec), Err(Error::Generation(_))));
    }

    #[test]
    fn invalid_specs_are_rejected() {
        for spec in [
            DatasetSpec { num_classes: 7, ..small() },
            DatasetSpec { scale_range: [0.5, 0.2], ..small() },
            DatasetSpec { clutter: 2.0, ..small() },
        ] {
            assert!(generate(&spec).is_err());
        }
    }

    #[test]
    fn bins_cover_the_range() {
        assert_eq!(area_bin(0.0, 100.0), 0);
        assert_eq!(area_bin(9.99, 100.0), 0);
        assert_eq!(area_bin(10.0, 100.0), 1);
        assert_eq!(area_bin(100.0, 100.0), 9);
    }

    #[test]
    fn save_load_round_trip() {
        let d = generate(&small()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save(&d, dir.path()).unwrap();
        let back = load(dir.path()).unwrap();
        assert_eq!(back, d);
        let text = fs::read_to_string(dir.path().join("manifest.json")).unwrap();
        let sample_lines = text.lines().filter(|l| l.starts_with("{\"split\"")).count();
        assert_eq!(sample_lines, d.train.len() + d.val.len());
    }

    #[test]
    fn truncated_image_is_a_parse_error() {
        let d = generate(&small()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save(&d, dir.path()).unwrap();
        let f = dir.path().join(image_file(Split::Val, 3));
        let bytes = fs::read(&f).unwrap();
        fs::write(&f, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(load(dir.path()), Err(Error::Parse { .. })));
    }

    #[test]
    fn corrupt_manifest_reports_offset() {
        let d = generate(&small()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save(&d, dir.path()).unwrap();
        let p = dir.path().join("manifest.json");
        let text = fs::read_to_string(&p).unwrap();
        let cut = text.find("\"label\"").unwrap();
        let broken = format!("{}@@{}", &text[..cut], &text[cut..]);
        fs::write(&p, broken).unwrap();
        match load(dir.path()) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, cut),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn image_codec_rejects_bad_headers() {
        let t = Tensor::zeros(&[3, 2, 2]);
        let mut bytes = encode_image(&t).unwrap();
        assert_eq!(bytes.len(), 16 + 8 * 12);
        assert_eq!(decode_image(&bytes, Path::new("x")).unwrap(), t);
        bytes[0] = b'X';
        assert!(matches!(decode_image(&bytes, Path::new("x")), Err(Error::Parse { offset: 0, .. })));
        assert!(decode_image(&bytes[..10], Path::new("x")).is_err());
    }
}
