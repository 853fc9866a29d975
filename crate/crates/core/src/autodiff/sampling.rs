//! Per-location affine sampling grids, bilinear sampling and the tap
//! contraction that turns sampled windows into convolution outputs.
//!
//! Grid coordinates are absolute input-plane positions in cell units: cell
//! `(y, x)` has its center at `(x, y)`. The regular `K×K` lattice of one
//! location spans `[-1, 1]²` in normalized local units, with one normalized
//! unit equal to `max((K-1)/2, 1)` cells, so neighbouring lattice points are
//! exactly one cell apart.

use super::conv::gemm;
use super::{Graph, Op, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Cells per normalized unit for a `K×K` lattice.
pub fn grid_unit(k: usize) -> f64 {
    (((k as f64) - 1.0) / 2.0).max(1.0)
}

/// Normalized lattice coordinates `u_0 < … < u_{K-1}` in `[-1, 1]`.
pub fn lattice(k: usize) -> Vec<f64> {
    let r = ((k as f64) - 1.0) / 2.0;
    let unit = grid_unit(k);
    (0..k).map(|i| (i as f64 - r) / unit).collect()
}

impl Graph {
    /// Warps the regular `K×K` lattice of every location by its affine
    /// parameters `[a11, a12, t1, a21, a22, t2]`, re-anchored at the location's
    /// center. `theta` is `[N, 6, H, W]`; the grid is `[N, H, W, K, K, 2]` with
    /// `(x, y)` in the last axis.
    pub fn affine_grid(&mut self, theta: Var, k: usize) -> Result<Var> {
        let [n, six, h, w] = self.value(theta).dims4("affine_grid")?;
        if six != 6 {
            return Err(Error::shape("affine_grid", format!("theta needs 6 channels, got {six}")));
        }
        if k == 0 || k % 2 == 0 {
            return Err(Error::InvalidArgument(format!("affine_grid kernel size must be odd, got {k}")));
        }
        let th = self.value(theta).data();
        let lat = lattice(k);
        let unit = grid_unit(k);
        let hw = h * w;
        let mut out = vec![0.0; n * hw * k * k * 2];
        for b in 0..n {
            for l in 0..hw {
                let p = |c: usize| th[(b * 6 + c) * hw + l];
                let (a11, a12, t1, a21, a22, t2) = (p(0), p(1), p(2), p(3), p(4), p(5));
                let (cy, cx) = ((l / w) as f64, (l % w) as f64);
                for (ky, v) in lat.iter().enumerate() {
                    for (kx, u) in lat.iter().enumerate() {
                        let o = (((b * hw + l) * k + ky) * k + kx) * 2;
                        out[o] = cx + unit * (a11 * u + a12 * v + t1);
                        out[o + 1] = cy + unit * (a21 * u + a22 * v + t2);
                    }
                }
            }
        }
        let out = Tensor::new(&[n, h, w, k, k, 2], out)?;
        Ok(self.push(out, Op::AffineGrid { theta, k }))
    }

    /// Bilinear interpolation of `fmap` `[N,P,Hin,Win]` at every grid point,
    /// giving `[N,P,H,W,K,K]`. Neighbours outside the map read as zero.
    pub fn bilinear_sample(&mut self, fmap: Var, grid: Var) -> Result<Var> {
        let [n, p, hin, win] = self.value(fmap).dims4("bilinear_sample")?;
        let gshape = self.shape(grid).to_vec();
        if gshape.len() != 6 || gshape[0] != n || gshape[5] != 2 {
            return Err(Error::shape(
                "bilinear_sample",
                format!("grid shape {gshape:?} incompatible with map {:?}", self.shape(fmap)),
            ));
        }
        let npts: usize = gshape[1..5].iter().product();
        let fm = self.value(fmap).data();
        let gd = self.value(grid).data();
        let plane = hin * win;
        let mut out = vec![0.0; n * p * npts];
        let mut taps = Vec::with_capacity(npts);
        for b in 0..n {
            taps.clear();
            taps.extend((0..npts).map(|i| {
                let o = (b * npts + i) * 2;
                Corners::new(gd[o], gd[o + 1], hin, win)
            }));
            for c in 0..p {
                let src = &fm[(b * p + c) * plane..(b * p + c + 1) * plane];
                let dst = &mut out[(b * p + c) * npts..(b * p + c + 1) * npts];
                for (d, t) in dst.iter_mut().zip(&taps) {
                    *d = t.interpolate(src);
                }
            }
        }
        let mut shape = vec![n, p];
        shape.extend_from_slice(&gshape[1..5]);
        let out = Tensor::new(&shape, out)?;
        Ok(self.push(out, Op::BilinearSample { fmap, grid }))
    }

    /// Convolution over pre-sampled windows: `taps` `[N,P,H,W,K,K]`, weight
    /// `[Co,P,K,K]`, optional bias `[Co]`, giving `[N,Co,H,W]`.
    pub fn tap_contract(&mut self, taps: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, p, h, wd, k) = tap_dims(self.shape(taps))?;
        let [co, wp, wk, wk2] = self.value(w).dims4("tap_contract")?;
        if wp != p || wk != k || wk2 != k {
            return Err(Error::shape(
                "tap_contract",
                format!("weight {:?} incompatible with taps {:?}", self.shape(w), self.shape(taps)),
            ));
        }
        if let Some(b) = b {
            if self.shape(b) != [co] {
                return Err(Error::shape("tap_contract", format!("bias shape {:?}", self.shape(b))));
            }
        }
        let (hw, kk) = (h * wd, k * k);
        let rows = p * kk;
        let src = self.value(taps).data();
        let wt = self.value(w).data();
        let mut cols = vec![0.0; rows * hw];
        let mut out = vec![0.0; n * co * hw];
        for s in 0..n {
            gather_cols(&src[s * p * hw * kk..(s + 1) * p * hw * kk], p, hw, kk, &mut cols);
            let os = &mut out[s * co * hw..(s + 1) * co * hw];
            if let Some(b) = b {
                let bias = self.value(b).data();
                for (o, chunk) in os.chunks_mut(hw).enumerate() {
                    chunk.fill(bias[o]);
                }
            }
            gemm(co, rows, hw, wt, (rows, 1), &cols, (hw, 1), 1.0, os);
        }
        let out = Tensor::new(&[n, co, h, wd], out)?;
        Ok(self.push(out, Op::TapContract { taps, w, b }))
    }
}

fn tap_dims(shape: &[usize]) -> Result<(usize, usize, usize, usize, usize)> {
    match *shape {
        [n, p, h, w, k, k2] if k == k2 => Ok((n, p, h, w, k)),
        _ => Err(Error::shape("tap_contract", format!("taps must be [N,P,H,W,K,K], got {shape:?}"))),
    }
}

/// `[P, HW, KK]` (one sample of the taps layout) into `[P·KK, HW]`.
fn gather_cols(src: &[f64], p: usize, hw: usize, kk: usize, cols: &mut [f64]) {
    for c in 0..p {
        for l in 0..hw {
            for t in 0..kk {
                cols[(c * kk + t) * hw + l] = src[(c * hw + l) * kk + t];
            }
        }
    }
}

/// The four bilinear neighbours of a point with validity and weights.
#[derive(Clone, Copy)]
struct Corners {
    idx: [usize; 4],
    valid: [bool; 4],
    fx: f64,
    fy: f64,
}

impl Corners {
    fn new(x: f64, y: f64, h: usize, w: usize) -> Self {
        let (x0, y0) = (x.floor(), y.floor());
        let (fx, fy) = (x - x0, y - y0);
        let (x0, y0) = (x0 as i64, y0 as i64);
        let mut idx = [0; 4];
        let mut valid = [false; 4];
        for (i, (dy, dx)) in [(0, 0), (0, 1), (1, 0), (1, 1)].into_iter().enumerate() {
            let (yy, xx) = (y0 + dy, x0 + dx);
            if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                valid[i] = true;
                idx[i] = yy as usize * w + xx as usize;
            }
        }
        Self { idx, valid, fx, fy }
    }

    fn weights(&self) -> [f64; 4] {
        let (fx, fy) = (self.fx, self.fy);
        [(1.0 - fy) * (1.0 - fx), (1.0 - fy) * fx, fy * (1.0 - fx), fy * fx]
    }

    fn values(&self, plane: &[f64]) -> [f64; 4] {
        let mut v = [0.0; 4];
        for i in 0..4 {
            if self.valid[i] {
                v[i] = plane[self.idx[i]];
            }
        }
        v
    }

    fn interpolate(&self, plane: &[f64]) -> f64 {
        let v = self.values(plane);
        let w = self.weights();
        w[0] * v[0] + w[1] * v[1] + w[2] * v[2] + w[3] * v[3]
    }
}

pub(super) fn affine_grid_backward(theta: &Tensor, k: usize, gout: &[f64]) -> Vec<f64> {
    let [n, _, h, w] = theta.dims4("affine_grid").expect("4-d");
    let hw = h * w;
    let lat = lattice(k);
    let unit = grid_unit(k);
    let mut d = vec![0.0; theta.numel()];
    for b in 0..n {
        for l in 0..hw {
            let mut acc = [0.0; 6];
            for (ky, v) in lat.iter().enumerate() {
                for (kx, u) in lat.iter().enumerate() {
                    let o = (((b * hw + l) * k + ky) * k + kx) * 2;
                    let (gx, gy) = (gout[o] * unit, gout[o + 1] * unit);
                    acc[0] += gx * u;
                    acc[1] += gx * v;
                    acc[2] += gx;
                    acc[3] += gy * u;
                    acc[4] += gy * v;
                    acc[5] += gy;
                }
            }
            for (c, a) in acc.iter().enumerate() {
                d[(b * 6 + c) * hw + l] = *a;
            }
        }
    }
    d
}

pub(super) fn bilinear_backward(
    graph: &Graph,
    fmap: Var,
    grid: Var,
    gout: &[f64],
    wants: &dyn Fn(Var) -> bool,
) -> Vec<(Var, Vec<f64>)> {
    let [n, p, hin, win] = graph.value(fmap).dims4("bilinear_sample").expect("4-d");
    let fm = graph.value(fmap).data();
    let gd = graph.value(grid).data();
    let npts = gd.len() / (2 * n.max(1));
    let plane = hin * win;
    let (want_f, want_g) = (wants(fmap), wants(grid));
    let mut dfm = vec![0.0; if want_f { fm.len() } else { 0 }];
    let mut dgrid = vec![0.0; if want_g { gd.len() } else { 0 }];
    for b in 0..n {
        let taps: Vec<Corners> = (0..npts)
            .map(|i| {
                let o = (b * npts + i) * 2;
                Corners::new(gd[o], gd[o + 1], hin, win)
            })
            .collect();
        for c in 0..p {
            let base = (b * p + c) * plane;
            let go = &gout[(b * p + c) * npts..(b * p + c + 1) * npts];
            for (i, (t, g)) in taps.iter().zip(go).enumerate() {
                if *g == 0.0 {
                    continue;
                }
                if want_f {
                    let wts = t.weights();
                    for j in 0..4 {
                        if t.valid[j] {
                            dfm[base + t.idx[j]] += g * wts[j];
                        }
                    }
                }
                if want_g {
                    let v = t.values(&fm[base..base + plane]);
                    let (fx, fy) = (t.fx, t.fy);
                    let o = (b * npts + i) * 2;
                    dgrid[o] += g * ((1.0 - fy) * (v[1] - v[0]) + fy * (v[3] - v[2]));
                    dgrid[o + 1] += g * ((1.0 - fx) * (v[2] - v[0]) + fx * (v[3] - v[1]));
                }
            }
        }
    }
    let mut out = Vec::new();
    if want_f {
        out.push((fmap, dfm));
    }
    if want_g {
        out.push((grid, dgrid));
    }
    out
}

pub(super) fn tap_contract_backward(
    graph: &Graph,
    taps: Var,
    w: Var,
    b: Option<Var>,
    gout: &[f64],
    wants: &dyn Fn(Var) -> bool,
) -> Vec<(Var, Vec<f64>)> {
    let (n, p, h, wd, k) = tap_dims(graph.shape(taps)).expect("validated in forward");
    let (hw, kk) = (h * wd, k * k);
    let rows = p * kk;
    let co = graph.shape(w)[0];
    let src = graph.value(taps).data();
    let wt = graph.value(w).data();
    let (want_t, want_w) = (wants(taps), wants(w));

    let mut cols = vec![0.0; rows * hw];
    let mut dcols = vec![0.0; rows * hw];
    let mut dw = vec![0.0; wt.len()];
    let mut dtaps = vec![0.0; if want_t { src.len() } else { 0 }];
    for s in 0..n {
        let go = &gout[s * co * hw..(s + 1) * co * hw];
        if want_w {
            gather_cols(&src[s * rows * hw..(s + 1) * rows * hw], p, hw, kk, &mut cols);
            gemm(co, hw, rows, go, (hw, 1), &cols, (1, hw), 1.0, &mut dw);
        }
        if want_t {
            gemm(rows, co, hw, wt, (1, rows), go, (hw, 1), 0.0, &mut dcols);
            let dst = &mut dtaps[s * rows * hw..(s + 1) * rows * hw];
            for c in 0..p {
                for l in 0..hw {
                    for t in 0..kk {
                        dst[(c * hw + l) * kk + t] = dcols[(c * kk + t) * hw + l];
                    }
                }
            }
        }
    }
    let mut out = Vec::new();
    if want_t {
        out.push((taps, dtaps));
    }
    if want_w {
        out.push((w, dw));
    }
    if let Some(b) = b {
        let mut db = vec![0.0; co];
        for s in 0..n {
            for (o, chunk) in gout[s * co * hw..(s + 1) * co * hw].chunks(hw).enumerate() {
                db[o] += chunk.iter().sum::<f64>();
            }
        }
        out.push((b, db));
    }
    out
}
