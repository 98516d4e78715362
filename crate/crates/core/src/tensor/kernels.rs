//! Slice-level forward and backward kernels shared by the pure ops and the
//! tape. Every reduction runs in a fixed order, so results are bitwise
//! reproducible for identical inputs.

use super::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Dims {
    pub fn hw(&self) -> usize {
        self.h * self.w
    }

    pub fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl Window {
    /// Output extent for an input extent, or `None` if the dilated kernel
    /// does not fit inside the padded input.
    pub fn out_len(&self, input: usize) -> Option<usize> {
        let span = self.dilation * (self.k - 1) + 1;
        let padded = input + 2 * self.padding;
        (padded >= span).then(|| (padded - span) / self.stride + 1)
    }

    /// Output positions `o` in `0..out` whose tap `t` lands inside `0..input`.
    fn valid(&self, t: usize, input: usize, out: usize) -> (usize, usize) {
        let shift = (t * self.dilation) as isize - self.padding as isize;
        let s = self.stride as isize;
        // o*s + shift >= 0  and  o*s + shift <= input-1
        let lo = if shift >= 0 { 0 } else { ((-shift) + s - 1) / s };
        let hi_num = input as isize - 1 - shift;
        let hi = if hi_num < 0 { -1 } else { hi_num / s };
        let lo = lo as usize;
        let hi = (hi + 1).clamp(0, out as isize) as usize;
        (lo.min(hi), hi)
    }

    fn source(&self, o: usize, t: usize) -> usize {
        o * self.stride + t * self.dilation - self.padding
    }
}

fn im2col<T: Scalar>(plane_set: &[T], d: Dims, win: Window, ho: usize, wo: usize, cols: &mut [T]) {
    let k = win.k;
    let ohw = ho * wo;
    cols.fill(T::zero());
    for ci in 0..d.c {
        let src = &plane_set[ci * d.hw()..(ci + 1) * d.hw()];
        for ky in 0..k {
            let (oy0, oy1) = win.valid(ky, d.h, ho);
            for kx in 0..k {
                let (ox0, ox1) = win.valid(kx, d.w, wo);
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * ohw..(row + 1) * ohw];
                for oy in oy0..oy1 {
                    let iy = win.source(oy, ky);
                    let srow = &src[iy * d.w..(iy + 1) * d.w];
                    let drow = &mut dst[oy * wo..(oy + 1) * wo];
                    for ox in ox0..ox1 {
                        drow[ox] = srow[win.source(ox, kx)];
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], d: Dims, win: Window, ho: usize, wo: usize, planes: &mut [T]) {
    let k = win.k;
    let ohw = ho * wo;
    for ci in 0..d.c {
        let dst = &mut planes[ci * d.hw()..(ci + 1) * d.hw()];
        for ky in 0..k {
            let (oy0, oy1) = win.valid(ky, d.h, ho);
            for kx in 0..k {
                let (ox0, ox1) = win.valid(kx, d.w, wo);
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * ohw..(row + 1) * ohw];
                for oy in oy0..oy1 {
                    let iy = win.source(oy, ky);
                    for ox in ox0..ox1 {
                        dst[iy * d.w + win.source(ox, kx)] += src[oy * wo + ox];
                    }
                }
            }
        }
    }
}

fn is_plain_pointwise(win: Window) -> bool {
    win.k == 1 && win.stride == 1 && win.padding == 0
}

/// Dense cross-correlation. `weights` is `cout × cin × k × k`.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_forward<T: Scalar>(
    x: &[T],
    d: Dims,
    weights: &[T],
    cout: usize,
    bias: Option<&[T]>,
    win: Window,
    ho: usize,
    wo: usize,
) -> Vec<T> {
    let ohw = ho * wo;
    let kk = d.c * win.k * win.k;
    let mut out = vec![T::zero(); d.n * cout * ohw];
    let mut cols = if is_plain_pointwise(win) {
        Vec::new()
    } else {
        vec![T::zero(); kk * ohw]
    };
    for n in 0..d.n {
        let xin = &x[n * d.c * d.hw()..(n + 1) * d.c * d.hw()];
        let rhs: &[T] = if is_plain_pointwise(win) {
            xin
        } else {
            im2col(xin, d, win, ho, wo, &mut cols);
            &cols
        };
        let o = &mut out[n * cout * ohw..(n + 1) * cout * ohw];
        if let Some(b) = bias {
            for (co, chunk) in o.chunks_exact_mut(ohw).enumerate() {
                chunk.fill(b[co]);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        T::gemm(
            cout,
            kk,
            ohw,
            T::one(),
            weights,
            (kk, 1),
            rhs,
            (ohw, 1),
            beta,
            o,
            (ohw, 1),
        );
    }
    out
}

pub struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Scalar>(
    x: &[T],
    d: Dims,
    weights: &[T],
    cout: usize,
    win: Window,
    ho: usize,
    wo: usize,
    dout: &[T],
    need_input: bool,
) -> ConvGrads<T> {
    let ohw = ho * wo;
    let kk = d.c * win.k * win.k;
    let plain = is_plain_pointwise(win);
    let mut dw = vec![T::zero(); cout * kk];
    let mut db = vec![T::zero(); cout];
    let mut dx = need_input.then(|| vec![T::zero(); d.len()]);
    let mut cols = if plain { Vec::new() } else { vec![T::zero(); kk * ohw] };
    let mut dcols = if plain || !need_input {
        Vec::new()
    } else {
        vec![T::zero(); kk * ohw]
    };
    for n in 0..d.n {
        let xin = &x[n * d.c * d.hw()..(n + 1) * d.c * d.hw()];
        let g = &dout[n * cout * ohw..(n + 1) * cout * ohw];
        for (co, chunk) in g.chunks_exact(ohw).enumerate() {
            db[co] += chunk.iter().copied().sum::<T>();
        }
        let rhs: &[T] = if plain {
            xin
        } else {
            im2col(xin, d, win, ho, wo, &mut cols);
            &cols
        };
        // dW += dOut · colsᵀ
        T::gemm(
            cout,
            ohw,
            kk,
            T::one(),
            g,
            (ohw, 1),
            rhs,
            (1, ohw),
            T::one(),
            &mut dw,
            (kk, 1),
        );
        if let Some(dx) = dx.as_mut() {
            let dxn = &mut dx[n * d.c * d.hw()..(n + 1) * d.c * d.hw()];
            if plain {
                T::gemm(
                    d.c,
                    cout,
                    ohw,
                    T::one(),
                    weights,
                    (1, kk),
                    g,
                    (ohw, 1),
                    T::zero(),
                    dxn,
                    (ohw, 1),
                );
            } else {
                T::gemm(
                    kk,
                    cout,
                    ohw,
                    T::one(),
                    weights,
                    (1, kk),
                    g,
                    (ohw, 1),
                    T::zero(),
                    &mut dcols,
                    (ohw, 1),
                );
                col2im(&dcols, d, win, ho, wo, dxn);
            }
        }
    }
    ConvGrads {
        input: dx,
        weights: dw,
        bias: db,
    }
}

/// Per-channel cross-correlation. `weights` is `c × 1 × k × k`.
pub fn depthwise_forward<T: Scalar>(
    x: &[T],
    d: Dims,
    weights: &[T],
    bias: Option<&[T]>,
    win: Window,
    ho: usize,
    wo: usize,
) -> Vec<T> {
    let k = win.k;
    let ohw = ho * wo;
    let mut out = vec![T::zero(); d.n * d.c * ohw];
    for n in 0..d.n {
        for c in 0..d.c {
            let src = &x[(n * d.c + c) * d.hw()..(n * d.c + c + 1) * d.hw()];
            let dst = &mut out[(n * d.c + c) * ohw..(n * d.c + c + 1) * ohw];
            if let Some(b) = bias {
                dst.fill(b[c]);
            }
            let wc = &weights[c * k * k..(c + 1) * k * k];
            for ky in 0..k {
                let (oy0, oy1) = win.valid(ky, d.h, ho);
                for kx in 0..k {
                    let (ox0, ox1) = win.valid(kx, d.w, wo);
                    if ox0 == ox1 {
                        continue;
                    }
                    let wv = wc[ky * k + kx];
                    for oy in oy0..oy1 {
                        let iy = win.source(oy, ky);
                        let srow = &src[iy * d.w..(iy + 1) * d.w];
                        let drow = &mut dst[oy * wo..(oy + 1) * wo];
                        if win.stride == 1 {
                            let ix0 = win.source(ox0, kx);
                            let s = &srow[ix0..ix0 + (ox1 - ox0)];
                            for (o, &v) in drow[ox0..ox1].iter_mut().zip(s) {
                                *o += wv * v;
                            }
                        } else {
                            for ox in ox0..ox1 {
                                drow[ox] += wv * srow[win.source(ox, kx)];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub fn depthwise_backward<T: Scalar>(
    x: &[T],
    d: Dims,
    weights: &[T],
    win: Window,
    ho: usize,
    wo: usize,
    dout: &[T],
    need_input: bool,
) -> ConvGrads<T> {
    let k = win.k;
    let ohw = ho * wo;
    let mut dw = vec![T::zero(); d.c * k * k];
    let mut db = vec![T::zero(); d.c];
    let mut dx = need_input.then(|| vec![T::zero(); d.len()]);
    for n in 0..d.n {
        for c in 0..d.c {
            let plane = (n * d.c + c) * d.hw()..(n * d.c + c + 1) * d.hw();
            let src = &x[plane.clone()];
            let g = &dout[(n * d.c + c) * ohw..(n * d.c + c + 1) * ohw];
            db[c] += g.iter().copied().sum::<T>();
            let wc = &weights[c * k * k..(c + 1) * k * k];
            for ky in 0..k {
                let (oy0, oy1) = win.valid(ky, d.h, ho);
                for kx in 0..k {
                    let (ox0, ox1) = win.valid(kx, d.w, wo);
                    let mut acc = T::zero();
                    for oy in oy0..oy1 {
                        let iy = win.source(oy, ky);
                        for ox in ox0..ox1 {
                            acc += g[oy * wo + ox] * src[iy * d.w + win.source(ox, kx)];
                        }
                    }
                    dw[c * k * k + ky * k + kx] += acc;
                }
            }
            if let Some(dx) = dx.as_mut() {
                let dst = &mut dx[plane];
                for ky in 0..k {
                    let (oy0, oy1) = win.valid(ky, d.h, ho);
                    for kx in 0..k {
                        let (ox0, ox1) = win.valid(kx, d.w, wo);
                        let wv = wc[ky * k + kx];
                        for oy in oy0..oy1 {
                            let iy = win.source(oy, ky);
                            for ox in ox0..ox1 {
                                dst[iy * d.w + win.source(ox, kx)] += wv * g[oy * wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    ConvGrads {
        input: dx,
        weights: dw,
        bias: db,
    }
}

/// Per-channel batch statistics: `(mean, biased variance)`.
pub fn channel_stats<T: Scalar>(x: &[T], d: Dims) -> (Vec<T>, Vec<T>) {
    let count = T::from_usize(d.n * d.hw());
    let mut mean = vec![T::zero(); d.c];
    let mut var = vec![T::zero(); d.c];
    for c in 0..d.c {
        let mut s = T::zero();
        for n in 0..d.n {
            s += x[(n * d.c + c) * d.hw()..(n * d.c + c + 1) * d.hw()]
                .iter()
                .copied()
                .sum::<T>();
        }
        let m = s / count;
        let mut v = T::zero();
        for n in 0..d.n {
            for &e in &x[(n * d.c + c) * d.hw()..(n * d.c + c + 1) * d.hw()] {
                v += (e - m) * (e - m);
            }
        }
        mean[c] = m;
        var[c] = v / count;
    }
    (mean, var)
}

/// Folds batch statistics into running statistics. The running variance
/// tracks the unbiased batch variance.
pub fn fold_running<T: Scalar>(
    running_mean: &mut [T],
    running_var: &mut [T],
    mean: &[T],
    var: &[T],
    momentum: T,
    count: usize,
) {
    let keep = T::one() - momentum;
    let unbias = T::from_usize(count) / T::from_usize(count - 1);
    for (r, &b) in running_mean.iter_mut().zip(mean) {
        *r = keep * *r + momentum * b;
    }
    for (r, &b) in running_var.iter_mut().zip(var) {
        *r = keep * *r + momentum * b * unbias;
    }
}

/// `y = gamma * (x - mean) * inv_std + beta`; also returns the normalized input.
pub fn normalize_affine<T: Scalar>(
    x: &[T],
    d: Dims,
    mean: &[T],
    inv_std: &[T],
    gamma: &[T],
    beta: &[T],
) -> (Vec<T>, Vec<T>) {
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    for n in 0..d.n {
        for c in 0..d.c {
            let r = (n * d.c + c) * d.hw()..(n * d.c + c + 1) * d.hw();
            for ((o, h), &v) in y[r.clone()].iter_mut().zip(&mut xhat[r.clone()]).zip(&x[r]) {
                *h = (v - mean[c]) * inv_std[c];
                *o = gamma[c] * *h + beta[c];
            }
        }
    }
    (y, xhat)
}

pub struct NormGrads<T> {
    pub input: Vec<T>,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

/// Backward of batch norm. With `batch_stats` the mean and variance are
/// functions of the input (training mode); otherwise they are constants.
pub fn batchnorm_backward<T: Scalar>(
    xhat: &[T],
    d: Dims,
    inv_std: &[T],
    gamma: &[T],
    dout: &[T],
    batch_stats: bool,
) -> NormGrads<T> {
    let count = T::from_usize(d.n * d.hw());
    let mut dgamma = vec![T::zero(); d.c];
    let mut dbeta = vec![T::zero(); d.c];
    for c in 0..d.c {
        for n in 0..d.n {
            let r = (n * d.c + c) * d.hw()..(n * d.c + c + 1) * d.hw();
            for (&g, &h) in dout[r.clone()].iter().zip(&xhat[r]) {
                dbeta[c] += g;
                dgamma[c] += g * h;
            }
        }
    }
    let mut dx = vec![T::zero(); dout.len()];
    for c in 0..d.c {
        let scale = gamma[c] * inv_std[c];
        let mean_g = dbeta[c] / count;
        let mean_gh = dgamma[c] / count;
        for n in 0..d.n {
            let r = (n * d.c + c) * d.hw()..(n * d.c + c + 1) * d.hw();
            for ((o, &g), &h) in dx[r.clone()].iter_mut().zip(&dout[r.clone()]).zip(&xhat[r]) {
                *o = if batch_stats {
                    scale * (g - mean_g - h * mean_gh)
                } else {
                    scale * g
                };
            }
        }
    }
    NormGrads {
        input: dx,
        gamma: dgamma,
        beta: dbeta,
    }
}

/// Interpolation taps along one axis for half-pixel-centre bilinear
/// upsampling: `(lo, hi, weight_hi)` per output index.
pub fn bilinear_taps<T: Scalar>(input: usize, factor: usize) -> Vec<(usize, usize, T)> {
    let f = factor as f64;
    (0..input * factor)
        .map(|o| {
            let src = ((o as f64 + 0.5) / f - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            let frac = src - lo as f64;
            (lo, hi, T::from_f64(frac))
        })
        .collect()
}

pub fn upsample_forward<T: Scalar>(x: &[T], d: Dims, factor: usize) -> Vec<T> {
    let (ho, wo) = (d.h * factor, d.w * factor);
    let ty = bilinear_taps::<T>(d.h, factor);
    let tx = bilinear_taps::<T>(d.w, factor);
    let mut out = vec![T::zero(); d.n * d.c * ho * wo];
    let mut rows = vec![T::zero(); wo * 2];
    for p in 0..d.n * d.c {
        let src = &x[p * d.hw()..(p + 1) * d.hw()];
        let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let (r0, r1) = rows.split_at_mut(wo);
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let a = &src[y0 * d.w..(y0 + 1) * d.w];
                let b = &src[y1 * d.w..(y1 + 1) * d.w];
                r0[ox] = a[x0] + (a[x1] - a[x0]) * fx;
                r1[ox] = b[x0] + (b[x1] - b[x0]) * fx;
            }
            for ox in 0..wo {
                dst[oy * wo + ox] = r0[ox] + (r1[ox] - r0[ox]) * fy;
            }
        }
    }
    out
}

pub fn upsample_backward<T: Scalar>(dout: &[T], d: Dims, factor: usize) -> Vec<T> {
    let (ho, wo) = (d.h * factor, d.w * factor);
    let ty = bilinear_taps::<T>(d.h, factor);
    let tx = bilinear_taps::<T>(d.w, factor);
    let mut dx = vec![T::zero(); d.len()];
    for p in 0..d.n * d.c {
        let g = &dout[p * ho * wo..(p + 1) * ho * wo];
        let dst = &mut dx[p * d.hw()..(p + 1) * d.hw()];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let v = g[oy * wo + ox];
                let top = v * (T::one() - fy);
                let bot = v * fy;
                dst[y0 * d.w + x0] += top * (T::one() - fx);
                dst[y0 * d.w + x1] += top * fx;
                dst[y1 * d.w + x0] += bot * (T::one() - fx);
                dst[y1 * d.w + x1] += bot * fx;
            }
        }
    }
    dx
}

/// Non-overlapping mean pooling with a `wh × ww` window.
pub fn avgpool_forward<T: Scalar>(x: &[T], d: Dims, wh: usize, ww: usize) -> Vec<T> {
    let (ho, wo) = (d.h / wh, d.w / ww);
    let scale = T::one() / T::from_usize(wh * ww);
    let mut out = vec![T::zero(); d.n * d.c * ho * wo];
    for p in 0..d.n * d.c {
        let src = &x[p * d.hw()..(p + 1) * d.hw()];
        for oy in 0..ho {
            for ox in 0..wo {
                let mut s = T::zero();
                for iy in oy * wh..(oy + 1) * wh {
                    s += src[iy * d.w + ox * ww..iy * d.w + (ox + 1) * ww]
                        .iter()
                        .copied()
                        .sum::<T>();
                }
                out[(p * ho + oy) * wo + ox] = s * scale;
            }
        }
    }
    out
}

pub fn avgpool_backward<T: Scalar>(dout: &[T], d: Dims, wh: usize, ww: usize) -> Vec<T> {
    let (ho, wo) = (d.h / wh, d.w / ww);
    let scale = T::one() / T::from_usize(wh * ww);
    let mut dx = vec![T::zero(); d.len()];
    for p in 0..d.n * d.c {
        let dst = &mut dx[p * d.hw()..(p + 1) * d.hw()];
        for oy in 0..ho {
            for ox in 0..wo {
                let g = dout[(p * ho + oy) * wo + ox] * scale;
                for iy in oy * wh..(oy + 1) * wh {
                    for v in &mut dst[iy * d.w + ox * ww..iy * d.w + (ox + 1) * ww] {
                        *v += g;
                    }
                }
            }
        }
    }
    dx
}
