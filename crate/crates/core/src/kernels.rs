//! Raw compute kernels on contiguous NCHW buffers: im2col convolution,
//! bilinear deformable sampling and group normalization, each with the
//! matching backward pass.

use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.kw) / self.stride + 1
    }

    fn col_rows(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfold one `[C, H, W]` image into `[C*kh*kw, Ho*Wo]` columns.
pub fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let (ho, wo) = (g.out_h(), g.out_w());
    let mut row = 0;
    for c in 0..g.c_in {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.fill(T::ZERO);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *o = if ix < 0 || ix >= g.w as isize { T::ZERO } else { src[ix as usize] };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulate columns back into an image gradient.
pub fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let (ho, wo) = (g.out_h(), g.out_w());
    let mut row = 0;
    for c in 0..g.c_in {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Batched convolution. `x` is `[N, C_in, H, W]`, `w` is `[C_out, C_in, kh, kw]`.
pub fn conv2d_forward<T: Scalar>(
    x: &[T],
    n: usize,
    g: &ConvGeom,
    w: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let (ho, wo) = (g.out_h(), g.out_w());
    let hw = ho * wo;
    let rows = g.col_rows();
    let mut out = vec![T::ZERO; n * g.c_out * hw];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::ZERO; rows * hw] };
    for i in 0..n {
        let xi = &x[i * g.c_in * g.h * g.w..(i + 1) * g.c_in * g.h * g.w];
        let colsi: &[T] = if g.is_pointwise() {
            xi
        } else {
            im2col(xi, g, &mut cols);
            &cols
        };
        let oi = &mut out[i * g.c_out * hw..(i + 1) * g.c_out * hw];
        matmul_cols(w, colsi, g.c_out, rows, hw, bias, oi);
    }
    out
}

/// `out[C_out, HW] = w[C_out, rows] * cols[rows, HW] (+ bias)`.
fn matmul_cols<T: Scalar>(
    w: &[T],
    cols: &[T],
    c_out: usize,
    rows: usize,
    hw: usize,
    bias: Option<&[T]>,
    out: &mut [T],
) {
    let beta = if let Some(b) = bias {
        for (co, &bv) in b.iter().enumerate() {
            out[co * hw..(co + 1) * hw].fill(bv);
        }
        T::ONE
    } else {
        T::ZERO
    };
    T::gemm(
        c_out, rows, hw, T::ONE, w, rows as isize, 1, cols, hw as isize, 1, beta, out, hw as isize,
        1,
    );
}

/// Gradients of [`conv2d_forward`]; accumulates into `dw`/`db`, returns `dx`.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Scalar>(
    x: &[T],
    n: usize,
    g: &ConvGeom,
    w: &[T],
    dy: &[T],
    dw: &mut [T],
    db: Option<&mut [T]>,
    need_dx: bool,
) -> Option<Vec<T>> {
    let (ho, wo) = (g.out_h(), g.out_w());
    let hw = ho * wo;
    let rows = g.col_rows();
    let in_sz = g.c_in * g.h * g.w;
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::ZERO; rows * hw] };
    let mut dcols = vec![T::ZERO; rows * hw];
    let mut dx = if need_dx { Some(vec![T::ZERO; n * in_sz]) } else { None };
    if let Some(db) = db {
        for i in 0..n {
            let dyi = &dy[i * g.c_out * hw..(i + 1) * g.c_out * hw];
            for co in 0..g.c_out {
                let mut s = T::ZERO;
                for &v in &dyi[co * hw..(co + 1) * hw] {
                    s += v;
                }
                db[co] += s;
            }
        }
    }
    for i in 0..n {
        let xi = &x[i * in_sz..(i + 1) * in_sz];
        let dyi = &dy[i * g.c_out * hw..(i + 1) * g.c_out * hw];
        let colsi: &[T] = if g.is_pointwise() {
            xi
        } else {
            im2col(xi, g, &mut cols);
            &cols
        };
        // dw[C_out, rows] += dy[C_out, HW] * cols^T
        T::gemm(
            g.c_out, hw, rows, T::ONE, dyi, hw as isize, 1, colsi, 1, hw as isize, T::ONE, dw,
            rows as isize, 1,
        );
        if let Some(dx) = dx.as_mut() {
            let dxi = &mut dx[i * in_sz..(i + 1) * in_sz];
            if g.is_pointwise() {
                T::gemm(
                    rows, g.c_out, hw, T::ONE, w, 1, rows as isize, dyi, hw as isize, 1, T::ZERO,
                    dxi, hw as isize, 1,
                );
            } else {
                T::gemm(
                    rows, g.c_out, hw, T::ONE, w, 1, rows as isize, dyi, hw as isize, 1, T::ZERO,
                    &mut dcols, hw as isize, 1,
                );
                col2im(&dcols, g, dxi);
            }
        }
    }
    dx
}

/// Bilinear read coefficients for one sampling location: four flat indices
/// into a `H*W` plane (or `usize::MAX` when outside) and their weights.
#[derive(Clone, Copy, Debug)]
struct Tap<T> {
    idx: [usize; 4],
    wt: [T; 4],
    ly: T,
    lx: T,
}

fn bilinear_tap<T: Scalar>(py: T, px: T, h: usize, w: usize) -> Tap<T> {
    let y0f = py.floor();
    let x0f = px.floor();
    let ly = py - y0f;
    let lx = px - x0f;
    let y0 = y0f.to_f64() as isize;
    let x0 = x0f.to_f64() as isize;
    let inside = |y: isize, x: isize| -> usize {
        if y >= 0 && y < h as isize && x >= 0 && x < w as isize {
            y as usize * w + x as usize
        } else {
            usize::MAX
        }
    };
    let one = T::ONE;
    Tap {
        idx: [inside(y0, x0), inside(y0, x0 + 1), inside(y0 + 1, x0), inside(y0 + 1, x0 + 1)],
        wt: [(one - ly) * (one - lx), (one - ly) * lx, ly * (one - lx), ly * lx],
        ly,
        lx,
    }
}

#[inline]
fn read<T: Scalar>(plane: &[T], idx: usize) -> T {
    if idx == usize::MAX {
        T::ZERO
    } else {
        plane[idx]
    }
}

/// Geometry of a deformable convolution: stride 1, "same" padding, one
/// offset group shared by all input channels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DeformGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
}

impl DeformGeom {
    pub fn taps(&self) -> usize {
        self.k * self.k
    }

    fn pad(&self) -> isize {
        (self.k / 2) as isize
    }

    fn build_taps<T: Scalar>(&self, off: &[T]) -> Vec<Tap<T>> {
        let kk = self.taps();
        let mut taps = Vec::with_capacity(kk * self.h * self.w);
        for t in 0..kk {
            let ky = (t / self.k) as isize - self.pad();
            let kx = (t % self.k) as isize - self.pad();
            for y in 0..self.h {
                for x in 0..self.w {
                    let o = &off[((y * self.w + x) * kk + t) * 2..][..2];
                    let py = T::from_f64((y as isize + ky) as f64) + o[0];
                    let px = T::from_f64((x as isize + kx) as f64) + o[1];
                    taps.push(bilinear_tap(py, px, self.h, self.w));
                }
            }
        }
        taps
    }

    fn columns<T: Scalar>(&self, x: &[T], taps: &[Tap<T>], cols: &mut [T]) {
        let hw = self.h * self.w;
        let kk = self.taps();
        for c in 0..self.c_in {
            let plane = &x[c * hw..(c + 1) * hw];
            for t in 0..kk {
                let dst = &mut cols[(c * kk + t) * hw..(c * kk + t + 1) * hw];
                for (p, d) in dst.iter_mut().enumerate() {
                    let tap = &taps[t * hw + p];
                    *d = tap.wt[0] * read(plane, tap.idx[0])
                        + tap.wt[1] * read(plane, tap.idx[1])
                        + tap.wt[2] * read(plane, tap.idx[2])
                        + tap.wt[3] * read(plane, tap.idx[3]);
                }
            }
        }
    }
}

/// Deformable convolution forward. `offsets` is `[N, H*W, k*k, 2]` holding
/// `(dy, dx)` per output position and kernel tap.
pub fn deform_conv_forward<T: Scalar>(
    x: &[T],
    n: usize,
    g: &DeformGeom,
    offsets: &[T],
    w: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let hw = g.h * g.w;
    let rows = g.c_in * g.taps();
    let mut cols = vec![T::ZERO; rows * hw];
    let mut out = vec![T::ZERO; n * g.c_out * hw];
    let off_sz = hw * g.taps() * 2;
    for i in 0..n {
        let taps = g.build_taps(&offsets[i * off_sz..(i + 1) * off_sz]);
        g.columns(&x[i * g.c_in * hw..(i + 1) * g.c_in * hw], &taps, &mut cols);
        matmul_cols(w, &cols, g.c_out, rows, hw, bias, &mut out[i * g.c_out * hw..(i + 1) * g.c_out * hw]);
    }
    out
}

pub struct DeformGrads<T> {
    pub dx: Vec<T>,
    pub doffsets: Vec<T>,
}

/// Backward of [`deform_conv_forward`]; accumulates `dw`/`db`.
#[allow(clippy::too_many_arguments)]
pub fn deform_conv_backward<T: Scalar>(
    x: &[T],
    n: usize,
    g: &DeformGeom,
    offsets: &[T],
    w: &[T],
    dy: &[T],
    dw: &mut [T],
    mut db: Option<&mut [T]>,
) -> DeformGrads<T> {
    let hw = g.h * g.w;
    let kk = g.taps();
    let rows = g.c_in * kk;
    let off_sz = hw * kk * 2;
    let mut cols = vec![T::ZERO; rows * hw];
    let mut dcols = vec![T::ZERO; rows * hw];
    let mut dx = vec![T::ZERO; n * g.c_in * hw];
    let mut doff = vec![T::ZERO; n * off_sz];
    for i in 0..n {
        let xi = &x[i * g.c_in * hw..(i + 1) * g.c_in * hw];
        let dyi = &dy[i * g.c_out * hw..(i + 1) * g.c_out * hw];
        let taps = g.build_taps(&offsets[i * off_sz..(i + 1) * off_sz]);
        g.columns(xi, &taps, &mut cols);
        T::gemm(
            g.c_out, hw, rows, T::ONE, dyi, hw as isize, 1, &cols, 1, hw as isize, T::ONE, dw,
            rows as isize, 1,
        );
        if let Some(db) = db.as_deref_mut() {
            for co in 0..g.c_out {
                let mut s = T::ZERO;
                for &v in &dyi[co * hw..(co + 1) * hw] {
                    s += v;
                }
                db[co] += s;
            }
        }
        T::gemm(
            rows, g.c_out, hw, T::ONE, w, 1, rows as isize, dyi, hw as isize, 1, T::ZERO,
            &mut dcols, hw as isize, 1,
        );
        let dxi = &mut dx[i * g.c_in * hw..(i + 1) * g.c_in * hw];
        let doffi = &mut doff[i * off_sz..(i + 1) * off_sz];
        let one = T::ONE;
        for c in 0..g.c_in {
            let plane = &xi[c * hw..(c + 1) * hw];
            for t in 0..kk {
                let grow = &dcols[(c * kk + t) * hw..(c * kk + t + 1) * hw];
                for (p, &gv) in grow.iter().enumerate() {
                    let tap = &taps[t * hw + p];
                    for j in 0..4 {
                        if tap.idx[j] != usize::MAX {
                            dxi[c * hw + tap.idx[j]] += gv * tap.wt[j];
                        }
                    }
                    let v00 = read(plane, tap.idx[0]);
                    let v01 = read(plane, tap.idx[1]);
                    let v10 = read(plane, tap.idx[2]);
                    let v11 = read(plane, tap.idx[3]);
                    let d_py = (one - tap.lx) * (v10 - v00) + tap.lx * (v11 - v01);
                    let d_px = (one - tap.ly) * (v01 - v00) + tap.ly * (v11 - v10);
                    let o = (p * kk + t) * 2;
                    doffi[o] += gv * d_py;
                    doffi[o + 1] += gv * d_px;
                }
            }
        }
    }
    DeformGrads { dx, doffsets: doff }
}

pub const GROUP_NORM_EPS: f64 = 1e-5;

/// Group normalization forward; returns output plus per-(n, group) mean and
/// reciprocal standard deviation for the backward pass.
pub fn group_norm_forward<T: Scalar>(
    x: &[T],
    n: usize,
    c: usize,
    hw: usize,
    groups: usize,
    gamma: &[T],
    beta: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let cg = c / groups;
    let m = cg * hw;
    let mut out = vec![T::ZERO; x.len()];
    let mut means = Vec::with_capacity(n * groups);
    let mut rstds = Vec::with_capacity(n * groups);
    let eps = T::from_f64(GROUP_NORM_EPS);
    let inv_m = T::from_f64(1.0 / m as f64);
    for i in 0..n {
        for gi in 0..groups {
            let base = (i * c + gi * cg) * hw;
            let seg = &x[base..base + m];
            let mut s = T::ZERO;
            for &v in seg {
                s += v;
            }
            let mean = s * inv_m;
            let mut var = T::ZERO;
            for &v in seg {
                let d = v - mean;
                var += d * d;
            }
            let rstd = T::ONE / (var * inv_m + eps).sqrt();
            for cc in 0..cg {
                let ch = gi * cg + cc;
                let (ga, be) = (gamma[ch], beta[ch]);
                for p in 0..hw {
                    let j = base + cc * hw + p;
                    out[j] = (x[j] - mean) * rstd * ga + be;
                }
            }
            means.push(mean);
            rstds.push(rstd);
        }
    }
    (out, means, rstds)
}

#[allow(clippy::too_many_arguments)]
pub fn group_norm_backward<T: Scalar>(
    x: &[T],
    n: usize,
    c: usize,
    hw: usize,
    groups: usize,
    gamma: &[T],
    means: &[T],
    rstds: &[T],
    dy: &[T],
    dgamma: &mut [T],
    dbeta: &mut [T],
) -> Vec<T> {
    let cg = c / groups;
    let m = cg * hw;
    let mut dx = vec![T::ZERO; x.len()];
    let inv_m = T::from_f64(1.0 / m as f64);
    for i in 0..n {
        for gi in 0..groups {
            let base = (i * c + gi * cg) * hw;
            let mean = means[i * groups + gi];
            let rstd = rstds[i * groups + gi];
            let mut sum_dxh = T::ZERO;
            let mut sum_dxh_xh = T::ZERO;
            for cc in 0..cg {
                let ch = gi * cg + cc;
                let mut dg = T::ZERO;
                let mut dbt = T::ZERO;
                for p in 0..hw {
                    let j = base + cc * hw + p;
                    let xh = (x[j] - mean) * rstd;
                    dg += dy[j] * xh;
                    dbt += dy[j];
                    let dxh = dy[j] * gamma[ch];
                    sum_dxh += dxh;
                    sum_dxh_xh += dxh * xh;
                }
                dgamma[ch] += dg;
                dbeta[ch] += dbt;
            }
            for cc in 0..cg {
                let ch = gi * cg + cc;
                for p in 0..hw {
                    let j = base + cc * hw + p;
                    let xh = (x[j] - mean) * rstd;
                    let dxh = dy[j] * gamma[ch];
                    dx[j] = rstd * (dxh - inv_m * sum_dxh - xh * inv_m * sum_dxh_xh);
                }
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &[f64], g: &ConvGeom, w: &[f64]) -> Vec<f64> {
        let (ho, wo) = (g.out_h(), g.out_w());
        let mut out = vec![0.0; g.c_out * ho * wo];
        for co in 0..g.c_out {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut s = 0.0;
                    for ci in 0..g.c_in {
                        for ky in 0..g.kh {
                            for kx in 0..g.kw {
                                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                if iy >= 0 && ix >= 0 && iy < g.h as isize && ix < g.w as isize {
                                    s += x[(ci * g.h + iy as usize) * g.w + ix as usize]
                                        * w[((co * g.c_in + ci) * g.kh + ky) * g.kw + kx];
                                }
                            }
                        }
                    }
                    out[(co * ho + oy) * wo + ox] = s;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_summation() {
        for &(stride, pad, k) in &[(1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 0, 2)] {
            let g = ConvGeom { c_in: 2, h: 7, w: 6, c_out: 3, kh: k, kw: k, stride, pad };
            let x: Vec<f64> = (0..2 * 7 * 6).map(|v| ((v * 37) % 11) as f64 - 5.0).collect();
            let w: Vec<f64> = (0..3 * 2 * k * k).map(|v| ((v * 13) % 7) as f64 * 0.25 - 0.5).collect();
            let got = conv2d_forward(&x, 1, &g, &w, None);
            let want = naive_conv(&x, &g, &w);
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12, "stride {stride} pad {pad} k {k}");
            }
        }
    }

    #[test]
    fn zero_offsets_reproduce_standard_conv_bit_for_bit() {
        let g = ConvGeom { c_in: 2, h: 5, w: 6, c_out: 3, kh: 3, kw: 3, stride: 1, pad: 1 };
        let dg = DeformGeom { c_in: 2, h: 5, w: 6, c_out: 3, k: 3 };
        let x: Vec<f32> = (0..60).map(|v| (v as f32 * 0.37).sin()).collect();
        let w: Vec<f32> = (0..54).map(|v| (v as f32 * 0.11).cos()).collect();
        let off = vec![0.0f32; 30 * 9 * 2];
        let a = conv2d_forward(&x, 1, &g, &w, None);
        let b = deform_conv_forward(&x, 1, &dg, &off, &w, None);
        assert_eq!(a, b);
    }
}
