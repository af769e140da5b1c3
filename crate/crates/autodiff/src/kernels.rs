//! Raw numeric kernels behind the tape operations.
//!
//! Everything here works on flat row-major slices; shape validation happens in
//! the tape before a kernel is called.

use crate::tensor::Real;

/// Geometry of a cubic-kernel 3D convolution over `[N, C, D, H, W]` input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub in_dims: [usize; 3],
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_dims: [usize; 3],
}

impl ConvGeometry {
    pub fn out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
        let padded = input + 2 * pad;
        if stride == 0 || padded < kernel {
            return None;
        }
        Some((padded - kernel) / stride + 1)
    }

    fn in_volume(&self) -> usize {
        self.in_dims.iter().product()
    }

    fn out_volume(&self) -> usize {
        self.out_dims.iter().product()
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel * self.kernel
    }
}

/// Unfolds one sample into a `[C·K³, L]` column matrix.
fn im2col<T: Real>(x: &[T], g: &ConvGeometry, cols: &mut [T]) {
    let [id, ih, iw] = g.in_dims;
    let [od, oh, ow] = g.out_dims;
    let l = g.out_volume();
    let k = g.kernel;
    let mut row = 0;
    for c in 0..g.in_channels {
        let xc = &x[c * g.in_volume()..(c + 1) * g.in_volume()];
        for kd in 0..k {
            for kh in 0..k {
                for kw in 0..k {
                    let dst = &mut cols[row * l..(row + 1) * l];
                    let mut p = 0;
                    for zd in 0..od {
                        let zi = (zd * g.stride + kd) as isize - g.pad as isize;
                        for yd in 0..oh {
                            let yi = (yd * g.stride + kh) as isize - g.pad as isize;
                            let plane_ok = zi >= 0 && (zi as usize) < id && yi >= 0 && (yi as usize) < ih;
                            for xd in 0..ow {
                                let xi = (xd * g.stride + kw) as isize - g.pad as isize;
                                dst[p] = if plane_ok && xi >= 0 && (xi as usize) < iw {
                                    xc[((zi as usize) * ih + yi as usize) * iw + xi as usize]
                                } else {
                                    T::zero()
                                };
                                p += 1;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back into one sample, accumulating.
fn col2im<T: Real>(cols: &[T], g: &ConvGeometry, dx: &mut [T]) {
    let [id, ih, iw] = g.in_dims;
    let [od, oh, ow] = g.out_dims;
    let l = g.out_volume();
    let k = g.kernel;
    let mut row = 0;
    for c in 0..g.in_channels {
        let vol = g.in_volume();
        let dxc = &mut dx[c * vol..(c + 1) * vol];
        for kd in 0..k {
            for kh in 0..k {
                for kw in 0..k {
                    let src = &cols[row * l..(row + 1) * l];
                    let mut p = 0;
                    for zd in 0..od {
                        let zi = (zd * g.stride + kd) as isize - g.pad as isize;
                        for yd in 0..oh {
                            let yi = (yd * g.stride + kh) as isize - g.pad as isize;
                            let plane_ok = zi >= 0 && (zi as usize) < id && yi >= 0 && (yi as usize) < ih;
                            for xd in 0..ow {
                                let xi = (xd * g.stride + kw) as isize - g.pad as isize;
                                if plane_ok && xi >= 0 && (xi as usize) < iw {
                                    let at = ((zi as usize) * ih + yi as usize) * iw + xi as usize;
                                    dxc[at] = dxc[at] + src[p];
                                }
                                p += 1;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

pub fn conv3d_forward<T: Real>(x: &[T], w: &[T], bias: Option<&[T]>, g: &ConvGeometry) -> Vec<T> {
    let l = g.out_volume();
    let p = g.patch_len();
    let mut out = vec![T::zero(); g.batch * g.out_channels * l];
    let mut cols = vec![T::zero(); p * l];
    for n in 0..g.batch {
        let xs = &x[n * g.in_channels * g.in_volume()..(n + 1) * g.in_channels * g.in_volume()];
        im2col(xs, g, &mut cols);
        let os = &mut out[n * g.out_channels * l..(n + 1) * g.out_channels * l];
        if let Some(b) = bias {
            for (o, chunk) in os.chunks_mut(l).enumerate() {
                chunk.fill(b[o]);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        // SAFETY: w is [O, P], cols is [P, L], os is [O, L], all row-major and in bounds.
        unsafe {
            T::gemm(
                g.out_channels,
                p,
                l,
                T::one(),
                w.as_ptr(),
                p as isize,
                1,
                cols.as_ptr(),
                l as isize,
                1,
                beta,
                os.as_mut_ptr(),
                l as isize,
                1,
            );
        }
    }
    out
}

pub struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Vec<T>,
    pub db: Vec<T>,
}

pub fn conv3d_backward<T: Real>(
    x: &[T],
    w: &[T],
    gout: &[T],
    g: &ConvGeometry,
    need_dx: bool,
) -> ConvGrads<T> {
    let l = g.out_volume();
    let p = g.patch_len();
    let in_len = g.in_channels * g.in_volume();
    let mut dw = vec![T::zero(); g.out_channels * p];
    let mut db = vec![T::zero(); g.out_channels];
    let mut dx = need_dx.then(|| vec![T::zero(); g.batch * in_len]);
    let mut cols = vec![T::zero(); p * l];
    let mut dcols = vec![T::zero(); p * l];
    for n in 0..g.batch {
        let gs = &gout[n * g.out_channels * l..(n + 1) * g.out_channels * l];
        for (o, chunk) in gs.chunks(l).enumerate() {
            let s: f64 = chunk.iter().map(|v| v.as_f64()).sum();
            db[o] = db[o] + T::from_f64_lossy(s);
        }
        im2col(&x[n * in_len..(n + 1) * in_len], g, &mut cols);
        // SAFETY: gs is [O, L]; cols viewed transposed is [L, P]; dw is [O, P].
        unsafe {
            T::gemm(
                g.out_channels,
                l,
                p,
                T::one(),
                gs.as_ptr(),
                l as isize,
                1,
                cols.as_ptr(),
                1,
                l as isize,
                T::one(),
                dw.as_mut_ptr(),
                p as isize,
                1,
            );
        }
        if let Some(dx) = dx.as_mut() {
            // SAFETY: w viewed transposed is [P, O]; gs is [O, L]; dcols is [P, L].
            unsafe {
                T::gemm(
                    p,
                    g.out_channels,
                    l,
                    T::one(),
                    w.as_ptr(),
                    1,
                    p as isize,
                    gs.as_ptr(),
                    l as isize,
                    1,
                    T::zero(),
                    dcols.as_mut_ptr(),
                    l as isize,
                    1,
                );
            }
            col2im(&dcols, g, &mut dx[n * in_len..(n + 1) * in_len]);
        }
    }
    ConvGrads { dx, dw, db }
}

/// `[N, K] · [K, M] (+ bias[M])`.
pub fn dense_forward<T: Real>(x: &[T], w: &[T], bias: Option<&[T]>, n: usize, k: usize, m: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n * m];
    if let Some(b) = bias {
        for row in out.chunks_mut(m) {
            row.copy_from_slice(b);
        }
    }
    let beta = if bias.is_some() { T::one() } else { T::zero() };
    // SAFETY: row-major [N,K]·[K,M] into [N,M].
    unsafe {
        T::gemm(
            n,
            k,
            m,
            T::one(),
            x.as_ptr(),
            k as isize,
            1,
            w.as_ptr(),
            m as isize,
            1,
            beta,
            out.as_mut_ptr(),
            m as isize,
            1,
        );
    }
    out
}

/// Returns `(dx, dw, db)` for [`dense_forward`].
pub fn dense_backward<T: Real>(
    x: &[T],
    w: &[T],
    gout: &[T],
    n: usize,
    k: usize,
    m: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut dx = vec![T::zero(); n * k];
    let mut dw = vec![T::zero(); k * m];
    // SAFETY: gout [N,M] · wᵀ [M,K] -> dx [N,K]; xᵀ [K,N] · gout [N,M] -> dw [K,M].
    unsafe {
        T::gemm(
            n,
            m,
            k,
            T::one(),
            gout.as_ptr(),
            m as isize,
            1,
            w.as_ptr(),
            1,
            m as isize,
            T::zero(),
            dx.as_mut_ptr(),
            k as isize,
            1,
        );
        T::gemm(
            k,
            n,
            m,
            T::one(),
            x.as_ptr(),
            1,
            k as isize,
            gout.as_ptr(),
            m as isize,
            1,
            T::zero(),
            dw.as_mut_ptr(),
            m as isize,
            1,
        );
    }
    let mut db = vec![T::zero(); m];
    for j in 0..m {
        let s: f64 = (0..n).map(|i| gout[i * m + j].as_f64()).sum();
        db[j] = T::from_f64_lossy(s);
    }
    (dx, dw, db)
}

/// Linear interpolation taps along one axis, align-corners-false convention.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Tap {
    pub lo: usize,
    pub hi: usize,
    pub w_hi: f64,
}

pub(crate) fn axis_taps(input: usize, output: usize) -> Vec<Tap> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            let w_hi = if hi == lo { 0.0 } else { src - lo as f64 };
            Tap { lo, hi, w_hi }
        })
        .collect()
}

/// Trilinear resampling of `planes` contiguous `[D, H, W]` volumes.
pub fn trilinear_forward<T: Real>(x: &[T], planes: usize, inp: [usize; 3], out: [usize; 3]) -> Vec<T> {
    let tz = axis_taps(inp[0], out[0]);
    let ty = axis_taps(inp[1], out[1]);
    let tx = axis_taps(inp[2], out[2]);
    let in_vol: usize = inp.iter().product();
    let out_vol: usize = out.iter().product();
    let mut res = vec![T::zero(); planes * out_vol];
    for p in 0..planes {
        let src = &x[p * in_vol..(p + 1) * in_vol];
        let dst = &mut res[p * out_vol..(p + 1) * out_vol];
        let at = |z: usize, y: usize, xx: usize| src[(z * inp[1] + y) * inp[2] + xx].as_f64();
        let mut i = 0;
        for a in &tz {
            for b in &ty {
                for c in &tx {
                    let v = (1.0 - a.w_hi)
                        * ((1.0 - b.w_hi) * ((1.0 - c.w_hi) * at(a.lo, b.lo, c.lo) + c.w_hi * at(a.lo, b.lo, c.hi))
                            + b.w_hi * ((1.0 - c.w_hi) * at(a.lo, b.hi, c.lo) + c.w_hi * at(a.lo, b.hi, c.hi)))
                        + a.w_hi
                            * ((1.0 - b.w_hi) * ((1.0 - c.w_hi) * at(a.hi, b.lo, c.lo) + c.w_hi * at(a.hi, b.lo, c.hi))
                                + b.w_hi * ((1.0 - c.w_hi) * at(a.hi, b.hi, c.lo) + c.w_hi * at(a.hi, b.hi, c.hi)));
                    dst[i] = T::from_f64_lossy(v);
                    i += 1;
                }
            }
        }
    }
    res
}

pub fn trilinear_backward<T: Real>(gout: &[T], planes: usize, inp: [usize; 3], out: [usize; 3]) -> Vec<T> {
    let tz = axis_taps(inp[0], out[0]);
    let ty = axis_taps(inp[1], out[1]);
    let tx = axis_taps(inp[2], out[2]);
    let in_vol: usize = inp.iter().product();
    let out_vol: usize = out.iter().product();
    let mut acc = vec![0.0f64; planes * in_vol];
    for p in 0..planes {
        let g = &gout[p * out_vol..(p + 1) * out_vol];
        let dst = &mut acc[p * in_vol..(p + 1) * in_vol];
        let mut i = 0;
        for a in &tz {
            for b in &ty {
                for c in &tx {
                    let gv = g[i].as_f64();
                    i += 1;
                    for (z, wz) in [(a.lo, 1.0 - a.w_hi), (a.hi, a.w_hi)] {
                        for (y, wy) in [(b.lo, 1.0 - b.w_hi), (b.hi, b.w_hi)] {
                            for (xx, wx) in [(c.lo, 1.0 - c.w_hi), (c.hi, c.w_hi)] {
                                dst[(z * inp[1] + y) * inp[2] + xx] += gv * wz * wy * wx;
                            }
                        }
                    }
                }
            }
        }
    }
    acc.into_iter().map(T::from_f64_lossy).collect()
}
