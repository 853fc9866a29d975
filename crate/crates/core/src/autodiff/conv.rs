//! Convolution, nearest upsampling and global pooling.

use super::{Graph, Op, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `c = alpha * a · b + beta * c` on row-major buffers with explicit strides.
///
/// `a` is `m×k` with strides `(rsa, csa)`, `b` is `k×n` with `(rsb, csb)`,
/// `c` is contiguous `m×n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n);
    if k > 0 {
        assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
        assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
    }
    // SAFETY: bounds of every operand were checked against the largest index
    // touched by the kernel above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn conv_out_size(size: usize, k: usize, stride: usize, padding: usize) -> usize {
    (size + 2 * padding - k) / stride + 1
}

#[derive(Clone, Copy)]
struct Geometry {
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    padding: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.padding == 0
    }

    fn rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }
}

/// Output columns `[lo, hi)` whose input column `ox·s − p + kx` is in bounds.
fn valid_cols(g: &Geometry, kx: usize) -> (usize, usize) {
    let (s, off) = (g.stride as isize, kx as isize - g.padding as isize);
    let lo = if off >= 0 { 0 } else { ((-off + s - 1) / s) as usize };
    let last = g.w as isize - 1 - off;
    let hi = if last < 0 { 0 } else { ((last / s) as usize + 1).min(g.wo) };
    (lo.min(hi), hi)
}

fn im2col(x: &[f64], g: &Geometry, cols: &mut [f64]) {
    let (k, s, p) = (g.k, g.stride as isize, g.padding as isize);
    let ncols = g.cols();
    for ci in 0..g.cin {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                let (lo, hi) = valid_cols(g, kx);
                for oy in 0..g.ho {
                    let iy = oy as isize * s - p + ky as isize;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    line[..lo].fill(0.0);
                    line[hi..].fill(0.0);
                    let first = (lo as isize * s - p + kx as isize) as usize;
                    if g.stride == 1 {
                        line[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                    } else {
                        for (j, v) in line[lo..hi].iter_mut().enumerate() {
                            *v = src[first + j * g.stride];
                        }
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], g: &Geometry, dx: &mut [f64]) {
    let (k, s, p) = (g.k, g.stride as isize, g.padding as isize);
    let ncols = g.cols();
    for ci in 0..g.cin {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * ncols..(row + 1) * ncols];
                let (lo, hi) = valid_cols(g, kx);
                for oy in 0..g.ho {
                    let iy = oy as isize * s - p + ky as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let line = &src[oy * g.wo..(oy + 1) * g.wo];
                    let first = (lo as isize * s - p + kx as isize) as usize;
                    for (j, v) in line[lo..hi].iter().enumerate() {
                        dst[first + j * g.stride] += v;
                    }
                }
            }
        }
    }
}

fn geometry(x: &Tensor, w: &Tensor, stride: usize, padding: usize) -> Result<(usize, usize, Geometry)> {
    let [n, cin, h, wd] = x.dims4("conv2d")?;
    let [cout, wcin, k, k2] = w.dims4("conv2d")?;
    if wcin != cin {
        return Err(Error::shape(
            "conv2d",
            format!("input has {cin} channels but weight expects {wcin}"),
        ));
    }
    if k != k2 || k % 2 == 0 {
        return Err(Error::shape(
            "conv2d",
            format!("kernel must be square with odd size, got {k}x{k2}"),
        ));
    }
    if stride == 0 {
        return Err(Error::InvalidArgument("conv2d stride must be positive".into()));
    }
    if h + 2 * padding < k || wd + 2 * padding < k {
        return Err(Error::shape(
            "conv2d",
            format!("padded input {h}x{wd} (pad {padding}) smaller than kernel {k}"),
        ));
    }
    let g = Geometry {
        cin,
        h,
        w: wd,
        k,
        stride,
        padding,
        ho: conv_out_size(h, k, stride, padding),
        wo: conv_out_size(wd, k, stride, padding),
    };
    Ok((n, cout, g))
}

impl Graph {
    /// 2-d cross-correlation with square odd kernels, zero padding.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (xt, wt) = (self.value(x), self.value(w));
        let (n, cout, g) = geometry(xt, wt, stride, padding)?;
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias shape {:?}, expected [{cout}]", self.shape(b)),
                ));
            }
        }
        let (rows, ncols) = (g.rows(), g.cols());
        let in_per = g.cin * g.h * g.w;
        let mut out = vec![0.0; n * cout * ncols];
        let mut cols = if g.is_pointwise() {
            Vec::new()
        } else {
            vec![0.0; rows * ncols]
        };
        for s in 0..n {
            let xs = &xt.data()[s * in_per..(s + 1) * in_per];
            let os = &mut out[s * cout * ncols..(s + 1) * cout * ncols];
            if let Some(b) = b {
                let bias = self.value(b).data();
                for (o, chunk) in os.chunks_mut(ncols).enumerate() {
                    chunk.fill(bias[o]);
                }
            }
            let src: &[f64] = if g.is_pointwise() {
                xs
            } else {
                im2col(xs, &g, &mut cols);
                &cols
            };
            gemm(cout, rows, ncols, wt.data(), (rows, 1), src, (ncols, 1), 1.0, os);
        }
        let out = Tensor::new(&[n, cout, g.ho, g.wo], out)?;
        Ok(self.push(
            out,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                padding,
            },
        ))
    }

    /// Nearest-neighbour 2x upsampling of `[N,C,H,W]`.
    pub fn upsample_nearest2x(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4("upsample_nearest2x")?;
        let src = self.value(x).data();
        let (h2, w2) = (2 * h, 2 * w);
        let mut out = vec![0.0; n * c * h2 * w2];
        for plane in 0..n * c {
            let s = &src[plane * h * w..(plane + 1) * h * w];
            let d = &mut out[plane * h2 * w2..(plane + 1) * h2 * w2];
            for y in 0..h2 {
                for xx in 0..w2 {
                    d[y * w2 + xx] = s[(y / 2) * w + xx / 2];
                }
            }
        }
        let out = Tensor::new(&[n, c, h2, w2], out)?;
        Ok(self.push(out, Op::Upsample2x(x)))
    }

    /// Spatial mean of `[N,C,H,W]`, giving `[N,C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4("global_avg_pool")?;
        let hw = h * w;
        let out: Vec<f64> = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|p| p.iter().sum::<f64>() / hw as f64)
            .collect();
        let out = Tensor::new(&[n, c], out)?;
        Ok(self.push(out, Op::GlobalAvgPool(x)))
    }
}

#[allow(clippy::too_many_arguments)]
pub(super) fn conv2d_backward(
    graph: &Graph,
    x: Var,
    w: Var,
    b: Option<Var>,
    stride: usize,
    padding: usize,
    gout: &[f64],
    wants: &dyn Fn(Var) -> bool,
) -> Vec<(Var, Vec<f64>)> {
    let (xt, wt) = (graph.value(x), graph.value(w));
    let (n, cout, g) = geometry(xt, wt, stride, padding).expect("validated in forward");
    let (rows, ncols) = (g.rows(), g.cols());
    let in_per = g.cin * g.h * g.w;
    let (want_x, want_w) = (wants(x), wants(w));

    let mut dw = vec![0.0; wt.numel()];
    let mut dx = vec![0.0; if want_x { xt.numel() } else { 0 }];
    let mut cols = vec![0.0; if g.is_pointwise() { 0 } else { rows * ncols }];
    let mut dcols = vec![0.0; rows * ncols];

    for s in 0..n {
        let go = &gout[s * cout * ncols..(s + 1) * cout * ncols];
        if want_w {
            let xs = &xt.data()[s * in_per..(s + 1) * in_per];
            let src: &[f64] = if g.is_pointwise() {
                xs
            } else {
                im2col(xs, &g, &mut cols);
                &cols
            };
            // dW[cout, rows] += dOut[cout, ncols] · colsᵀ
            gemm(cout, ncols, rows, go, (ncols, 1), src, (1, ncols), 1.0, &mut dw);
        }
        if want_x {
            let dxs = &mut dx[s * in_per..(s + 1) * in_per];
            if g.is_pointwise() {
                gemm(rows, cout, ncols, wt.data(), (1, rows), go, (ncols, 1), 1.0, dxs);
            } else {
                gemm(rows, cout, ncols, wt.data(), (1, rows), go, (ncols, 1), 0.0, &mut dcols);
                col2im(&dcols, &g, dxs);
            }
        }
    }

    let mut out = Vec::with_capacity(3);
    if want_x {
        out.push((x, dx));
    }
    if want_w {
        out.push((w, dw));
    }
    if let Some(b) = b {
        let mut db = vec![0.0; cout];
        for s in 0..n {
            for (o, chunk) in gout[s * cout * ncols..(s + 1) * cout * ncols]
                .chunks(ncols)
                .enumerate()
            {
                db[o] += chunk.iter().sum::<f64>();
            }
        }
        out.push((b, db));
    }
    out
}

pub(super) fn upsample2x_backward(x: &Tensor, gout: &[f64]) -> Vec<f64> {
    let [n, c, h, w] = x.dims4("upsample_nearest2x").expect("4-d");
    let w2 = 2 * w;
    let mut dx = vec![0.0; x.numel()];
    for plane in 0..n * c {
        let go = &gout[plane * 4 * h * w..(plane + 1) * 4 * h * w];
        let d = &mut dx[plane * h * w..(plane + 1) * h * w];
        for (i, g) in go.iter().enumerate() {
            let (y, xx) = (i / w2, i % w2);
            d[(y / 2) * w + xx / 2] += g;
        }
    }
    dx
}

pub(super) fn gap_backward(x: &Tensor, gout: &[f64]) -> Vec<f64> {
    let [_, _, h, w] = x.dims4("global_avg_pool").expect("4-d");
    let hw = h * w;
    let mut dx = vec![0.0; x.numel()];
    for (plane, g) in gout.iter().enumerate() {
        dx[plane * hw..(plane + 1) * hw].fill(g / hw as f64);
    }
    dx
}
