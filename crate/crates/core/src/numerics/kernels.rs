//! Slice-level kernels shared by the eager functions and the graph ops.

use super::tensor::Real;

pub fn transpose<T: Real>(a: &[T], m: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

/// `out[m×n] += a[m×k] · b[k×n]`. Each output row depends only on the
/// matching row of `a`, so row subsets reproduce bitwise.
pub fn matmul_acc<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

pub fn matmul<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    matmul_acc(a, b, &mut out, m, k, n);
    out
}

/// `out[m×n] += a[m×k] · b[n×k]ᵀ`.
pub fn matmul_bt_acc<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                s += x * y;
            }
            out[i * n + j] += s;
        }
    }
}

/// `out[k×n] += a[m×k]ᵀ · g[m×n]`.
pub fn matmul_at_acc<T: Real>(a: &[T], g: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

/// Numerically stable softmax over `x` restricted to `valid` entries.
/// Masked entries get exactly zero. Returns `None` if nothing is valid.
pub fn softmax_masked<T: Real>(x: &[T], valid: Option<&[bool]>) -> Option<Vec<T>> {
    let ok = |i: usize| valid.map_or(true, |v| v[i]);
    let mut max = T::neg_infinity();
    let mut any = false;
    for (i, &v) in x.iter().enumerate() {
        if ok(i) {
            any = true;
            if v > max {
                max = v;
            }
        }
    }
    if !any {
        return None;
    }
    let mut out = vec![T::zero(); x.len()];
    let mut sum = T::zero();
    for (i, &v) in x.iter().enumerate() {
        if ok(i) {
            let e = (v - max).exp();
            out[i] = e;
            sum += e;
        }
    }
    for o in &mut out {
        *o /= sum;
    }
    Some(out)
}

/// Gradient of softmax given its output `y` and upstream `g`.
pub fn softmax_backward<T: Real>(y: &[T], g: &[T], out: &mut [T]) {
    let dot: T = y.iter().zip(g).map(|(&a, &b)| a * b).sum();
    for ((o, &yi), &gi) in out.iter_mut().zip(y).zip(g) {
        *o += yi * (gi - dot);
    }
}

pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Exact GELU, `x·Φ(x)`.
pub fn gelu<T: Real>(x: T) -> T {
    T::of(0.5) * x * (T::one() + (x * T::of(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

pub fn gelu_grad<T: Real>(x: T) -> T {
    let cdf = T::of(0.5) * (T::one() + (x * T::of(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * T::of(0.5)).exp() * T::of(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    cdf + x * pdf
}

/// Per-row statistics saved by layer norm for the backward pass.
pub struct LayerNormSaved<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
}

pub fn layer_norm<T: Real>(
    x: &[T],
    rows: usize,
    d: usize,
    gamma: &[T],
    beta: &[T],
    eps: T,
) -> (Vec<T>, LayerNormSaved<T>) {
    let mut out = vec![T::zero(); rows * d];
    let mut xhat = vec![T::zero(); rows * d];
    let mut inv_std = vec![T::zero(); rows];
    let dn = T::of(d as f64);
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().copied().sum::<T>() / dn;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
        let denom = var + eps;
        // Zero variance with eps 0 only happens for constant rows, whose
        // centered numerator is already zero.
        let s = if denom > T::zero() {
            T::one() / denom.sqrt()
        } else {
            T::zero()
        };
        inv_std[r] = s;
        for j in 0..d {
            let xh = (row[j] - mean) * s;
            xhat[r * d + j] = xh;
            out[r * d + j] = xh * gamma[j] + beta[j];
        }
    }
    (out, LayerNormSaved { xhat, inv_std })
}

/// Accumulates gradients for input, gamma and beta.
#[allow(clippy::too_many_arguments)]
pub fn layer_norm_backward<T: Real>(
    g: &[T],
    saved: &LayerNormSaved<T>,
    gamma: &[T],
    rows: usize,
    d: usize,
    dx: Option<&mut [T]>,
    dgamma: Option<&mut [T]>,
    dbeta: Option<&mut [T]>,
) {
    if let Some(dgamma) = dgamma {
        for r in 0..rows {
            for j in 0..d {
                dgamma[j] += g[r * d + j] * saved.xhat[r * d + j];
            }
        }
    }
    if let Some(dbeta) = dbeta {
        for r in 0..rows {
            for j in 0..d {
                dbeta[j] += g[r * d + j];
            }
        }
    }
    if let Some(dx) = dx {
        let dn = T::of(d as f64);
        for r in 0..rows {
            let mut sum_dxh = T::zero();
            let mut sum_dxh_xh = T::zero();
            for j in 0..d {
                let dxh = g[r * d + j] * gamma[j];
                sum_dxh += dxh;
                sum_dxh_xh += dxh * saved.xhat[r * d + j];
            }
            let s = saved.inv_std[r];
            for j in 0..d {
                let dxh = g[r * d + j] * gamma[j];
                let xh = saved.xhat[r * d + j];
                dx[r * d + j] += s / dn * (dn * dxh - sum_dxh - xh * sum_dxh_xh);
            }
        }
    }
}

/// Geometry of a 2-D convolution over a C×H×W map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad - self.kernel) / self.stride + 1
    }
    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad - self.kernel) / self.stride + 1
    }
    fn col_rows(&self) -> usize {
        self.in_c * self.kernel * self.kernel
    }
}

pub fn im2col<T: Real>(x: &[T], geo: &ConvGeom) -> Vec<T> {
    let (oh, ow) = (geo.out_h(), geo.out_w());
    let k = geo.kernel;
    let mut cols = vec![T::zero(); geo.col_rows() * oh * ow];
    for c in 0..geo.in_c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                for oy in 0..oh {
                    let iy = (oy * geo.stride + ky) as isize - geo.pad as isize;
                    if iy < 0 || iy >= geo.in_h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * geo.stride + kx) as isize - geo.pad as isize;
                        if ix < 0 || ix >= geo.in_w as isize {
                            continue;
                        }
                        cols[row * oh * ow + oy * ow + ox] =
                            x[(c * geo.in_h + iy as usize) * geo.in_w + ix as usize];
                    }
                }
            }
        }
    }
    cols
}

pub fn col2im_acc<T: Real>(cols: &[T], geo: &ConvGeom, dx: &mut [T]) {
    let (oh, ow) = (geo.out_h(), geo.out_w());
    let k = geo.kernel;
    for c in 0..geo.in_c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                for oy in 0..oh {
                    let iy = (oy * geo.stride + ky) as isize - geo.pad as isize;
                    if iy < 0 || iy >= geo.in_h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * geo.stride + kx) as isize - geo.pad as isize;
                        if ix < 0 || ix >= geo.in_w as isize {
                            continue;
                        }
                        dx[(c * geo.in_h + iy as usize) * geo.in_w + ix as usize] +=
                            cols[row * oh * ow + oy * ow + ox];
                    }
                }
            }
        }
    }
}

/// Forward convolution. Returns the output and the im2col buffer.
pub fn conv2d<T: Real>(x: &[T], w: &[T], bias: &[T], geo: &ConvGeom) -> (Vec<T>, Vec<T>) {
    let cols = im2col(x, geo);
    let hw = geo.out_h() * geo.out_w();
    let mut out = vec![T::zero(); geo.out_c * hw];
    for o in 0..geo.out_c {
        out[o * hw..(o + 1) * hw].fill(bias[o]);
    }
    matmul_acc(w, &cols, &mut out, geo.out_c, geo.col_rows(), hw);
    (out, cols)
}

/// Nearest-neighbour 2× upsampling of a C×H×W map, cropped to `oh×ow`.
pub fn upsample2x<T: Real>(x: &[T], c: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<T> {
    let mut out = vec![T::zero(); c * oh * ow];
    for ch in 0..c {
        for y in 0..oh {
            let sy = (y / 2).min(h - 1);
            for xx in 0..ow {
                let sx = (xx / 2).min(w - 1);
                out[(ch * oh + y) * ow + xx] = x[(ch * h + sy) * w + sx];
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub fn upsample2x_backward<T: Real>(
    g: &[T],
    c: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    dx: &mut [T],
) {
    for ch in 0..c {
        for y in 0..oh {
            let sy = (y / 2).min(h - 1);
            for xx in 0..ow {
                let sx = (xx / 2).min(w - 1);
                dx[(ch * h + sy) * w + sx] += g[(ch * oh + y) * ow + xx];
            }
        }
    }
}

/// One bilinear sample: up to four (flat offset, weight) pairs within an
/// H×W plane. Points more than one cell outside the plane contribute nothing.
pub fn bilinear_taps<T: Real>(y: T, x: T, h: usize, w: usize) -> Option<[(usize, T); 4]> {
    let hf = T::of(h as f64);
    let wf = T::of(w as f64);
    if y < -T::one() || y > hf || x < -T::one() || x > wf {
        return None;
    }
    let mut y = y.max(T::zero());
    let mut x = x.max(T::zero());
    let mut y_lo = y.floor().to_usize().unwrap_or(0);
    let mut x_lo = x.floor().to_usize().unwrap_or(0);
    let y_hi;
    let x_hi;
    if y_lo >= h - 1 {
        y_lo = h - 1;
        y_hi = h - 1;
        y = T::of(y_lo as f64);
    } else {
        y_hi = y_lo + 1;
    }
    if x_lo >= w - 1 {
        x_lo = w - 1;
        x_hi = w - 1;
        x = T::of(x_lo as f64);
    } else {
        x_hi = x_lo + 1;
    }
    let ly = y - T::of(y_lo as f64);
    let lx = x - T::of(x_lo as f64);
    let hy = T::one() - ly;
    let hx = T::one() - lx;
    Some([
        (y_lo * w + x_lo, hy * hx),
        (y_lo * w + x_hi, hy * lx),
        (y_hi * w + x_lo, ly * hx),
        (y_hi * w + x_hi, ly * lx),
    ])
}

/// Region in feature-map coordinates, where integer coordinates are cell
/// centres.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MapRoi<T> {
    pub x1: T,
    pub y1: T,
    pub x2: T,
    pub y2: T,
}

/// Sample-point coordinates (y, x) for bin `(by, bx)`.
pub fn roi_bin_samples<T: Real>(
    roi: &MapRoi<T>,
    out_h: usize,
    out_w: usize,
    sampling: usize,
    by: usize,
    bx: usize,
) -> impl Iterator<Item = (T, T)> {
    let bin_h = (roi.y2 - roi.y1) / T::of(out_h as f64);
    let bin_w = (roi.x2 - roi.x1) / T::of(out_w as f64);
    let s = T::of(sampling as f64);
    let y0 = roi.y1 + T::of(by as f64) * bin_h;
    let x0 = roi.x1 + T::of(bx as f64) * bin_w;
    (0..sampling).flat_map(move |iy| {
        (0..sampling).map(move |ix| {
            let y = y0 + (T::of(iy as f64) + T::of(0.5)) * bin_h / s;
            let x = x0 + (T::of(ix as f64) + T::of(0.5)) * bin_w / s;
            (y, x)
        })
    })
}

/// RoIAlign of one region over a C×H×W map into C×out_h×out_w.
pub fn roi_align_forward<T: Real>(
    feat: &[T],
    c: usize,
    h: usize,
    w: usize,
    roi: &MapRoi<T>,
    out_h: usize,
    out_w: usize,
    sampling: usize,
    out: &mut [T],
) {
    let count = T::of((sampling * sampling) as f64);
    for by in 0..out_h {
        for bx in 0..out_w {
            let mut taps_acc: Vec<(usize, T)> = Vec::with_capacity(4 * sampling * sampling);
            for (y, x) in roi_bin_samples(roi, out_h, out_w, sampling, by, bx) {
                if let Some(taps) = bilinear_taps(y, x, h, w) {
                    taps_acc.extend_from_slice(&taps);
                }
            }
            for ch in 0..c {
                let plane = &feat[ch * h * w..(ch + 1) * h * w];
                let mut acc = T::zero();
                for &(off, wt) in &taps_acc {
                    acc += wt * plane[off];
                }
                out[(ch * out_h + by) * out_w + bx] = acc / count;
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn roi_align_backward<T: Real>(
    g: &[T],
    c: usize,
    h: usize,
    w: usize,
    roi: &MapRoi<T>,
    out_h: usize,
    out_w: usize,
    sampling: usize,
    dfeat: &mut [T],
) {
    let count = T::of((sampling * sampling) as f64);
    for by in 0..out_h {
        for bx in 0..out_w {
            for (y, x) in roi_bin_samples(roi, out_h, out_w, sampling, by, bx) {
                let Some(taps) = bilinear_taps(y, x, h, w) else {
                    continue;
                };
                for ch in 0..c {
                    let gv = g[(ch * out_h + by) * out_w + bx] / count;
                    let plane = &mut dfeat[ch * h * w..(ch + 1) * h * w];
                    for &(off, wt) in &taps {
                        plane[off] += wt * gv;
                    }
                }
            }
        }
    }
}
