//! Raw numeric kernels behind the graph operations. Everything here works on
//! flat row-major slices; shape validation happens in the graph layer.

/// Row-major `c (+)= op(a) · op(b)` where `op(a)` is `m×k` and `op(b)` is `k×n`.
///
/// `a_t` means `a` is stored as `k×m`; `b_t` means `b` is stored as `n×k`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the strides describe exactly the `m×k`, `k×n` and `m×n`
    // row-major (or transposed) buffers whose lengths are asserted above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a 2-D convolution over a single image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn patch_len(&self) -> usize {
        self.c_in * self.k * self.k
    }

    pub fn out_pixels(&self) -> usize {
        self.out_h() * self.out_w()
    }

    /// 1×1, stride 1, no padding: the column matrix is the input itself.
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Output columns `ox` whose input column `ox·stride + kx − pad` lies in
/// `[0, w)`.
fn valid_range(out: usize, size: usize, stride: usize, k_off: usize, pad: usize) -> std::ops::Range<usize> {
    let lo = if pad > k_off { (pad - k_off).div_ceil(stride) } else { 0 };
    let hi = if size + pad > k_off { (size + pad - k_off).div_ceil(stride) } else { 0 };
    lo.min(out)..hi.min(out)
}

/// Unfolds `x` (`[c_in, h, w]`) into `[c_in·k·k, out_h·out_w]`.
pub fn im2col(x: &[f64], g: &ConvGeom, cols: &mut Vec<f64>) {
    let (oh, ow) = (g.out_h(), g.out_w());
    cols.clear();
    cols.resize(g.patch_len() * oh * ow, 0.0);
    for c in 0..g.c_in {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            let ys = valid_range(oh, g.h, g.stride, ky, g.pad);
            for kx in 0..g.k {
                let xs = valid_range(ow, g.w, g.stride, kx, g.pad);
                if xs.is_empty() {
                    continue;
                }
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in ys.clone() {
                    let iy = oy * g.stride + ky - g.pad;
                    let src_row = &plane[iy * g.w..(iy + 1) * g.w];
                    let d = &mut dst[oy * ow..(oy + 1) * ow];
                    if g.stride == 1 {
                        let ix0 = xs.start + kx - g.pad;
                        d[xs.clone()].copy_from_slice(&src_row[ix0..ix0 + xs.len()]);
                    } else {
                        for ox in xs.clone() {
                            d[ox] = src_row[ox * g.stride + kx - g.pad];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-and-adds columns back into `dx`.
pub fn col2im_add(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    for c in 0..g.c_in {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            let ys = valid_range(oh, g.h, g.stride, ky, g.pad);
            for kx in 0..g.k {
                let xs = valid_range(ow, g.w, g.stride, kx, g.pad);
                if xs.is_empty() {
                    continue;
                }
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in ys.clone() {
                    let iy = oy * g.stride + ky - g.pad;
                    let dst_row = &mut plane[iy * g.w..(iy + 1) * g.w];
                    let s = &src[oy * ow..(oy + 1) * ow];
                    if g.stride == 1 {
                        let ix0 = xs.start + kx - g.pad;
                        dst_row[ix0..ix0 + xs.len()]
                            .iter_mut()
                            .zip(&s[xs.clone()])
                            .for_each(|(d, v)| *d += v);
                    } else {
                        for ox in xs.clone() {
                            dst_row[ox * g.stride + kx - g.pad] += s[ox];
                        }
                    }
                }
            }
        }
    }
}

/// `y = W · im2col(x)` for one image; `weight` is `[c_out, c_in·k·k]`.
pub fn conv_forward(x: &[f64], weight: &[f64], c_out: usize, g: &ConvGeom, y: &mut [f64], scratch: &mut Vec<f64>) {
    let p = g.out_pixels();
    if g.is_pointwise() {
        gemm(c_out, g.patch_len(), p, weight, false, x, false, y, false);
    } else {
        im2col(x, g, scratch);
        gemm(c_out, g.patch_len(), p, weight, false, scratch, false, y, false);
    }
}

/// Accumulates `dW += dy · colsᵀ` and, if requested, `dx += col2im(Wᵀ · dy)`.
#[allow(clippy::too_many_arguments)]
pub fn conv_backward(
    x: &[f64],
    weight: &[f64],
    c_out: usize,
    g: &ConvGeom,
    dy: &[f64],
    dw: Option<&mut [f64]>,
    dx: Option<&mut [f64]>,
    scratch: &mut Vec<f64>,
) {
    let p = g.out_pixels();
    let kk = g.patch_len();
    if let Some(dw) = dw {
        if g.is_pointwise() {
            gemm(c_out, p, kk, dy, false, x, true, dw, true);
        } else {
            im2col(x, g, scratch);
            gemm(c_out, p, kk, dy, false, scratch, true, dw, true);
        }
    }
    if let Some(dx) = dx {
        if g.is_pointwise() {
            gemm(kk, c_out, p, weight, true, dy, false, dx, true);
        } else {
            scratch.clear();
            scratch.resize(kk * p, 0.0);
            gemm(kk, c_out, p, weight, true, dy, false, scratch, false);
            col2im_add(scratch, g, dx);
        }
    }
}

/// Builds the per-sample modulated (and optionally demodulated) kernel.
///
/// Returns the scaled weights `[c_out, c_in·k·k]` and the per-filter
/// demodulation factors (all ones when `demod` is false).
pub fn modulate(
    weight: &[f64],
    style: &[f64],
    c_out: usize,
    c_in: usize,
    kk: usize,
    demod: bool,
    eps: f64,
) -> (Vec<f64>, Vec<f64>) {
    let mut wm = vec![0.0; weight.len()];
    let mut sigma = vec![1.0; c_out];
    for o in 0..c_out {
        let row = o * c_in * kk;
        let mut sq = 0.0;
        for i in 0..c_in {
            let s = style[i];
            for t in 0..kk {
                let v = weight[row + i * kk + t] * s;
                wm[row + i * kk + t] = v;
                sq += v * v;
            }
        }
        if demod {
            let d = 1.0 / (sq + eps).sqrt();
            sigma[o] = d;
            for v in &mut wm[row..row + c_in * kk] {
                *v *= d;
            }
        }
    }
    (wm, sigma)
}

/// Chain rule from the gradient w.r.t. the effective kernel back to the base
/// weight and the style vector of one sample.
///
/// `d_eff` is `∂L/∂(modulated, demodulated kernel)`.
#[allow(clippy::too_many_arguments)]
pub fn modulate_backward(
    weight: &[f64],
    style: &[f64],
    sigma: &[f64],
    d_eff: &[f64],
    c_out: usize,
    c_in: usize,
    kk: usize,
    demod: bool,
    dw: Option<&mut [f64]>,
    ds: Option<&mut [f64]>,
) {
    // Gradient w.r.t. the modulated but not yet demodulated kernel.
    let mut d_mod = d_eff.to_vec();
    if demod {
        for o in 0..c_out {
            let row = o * c_in * kk;
            let sg = sigma[o];
            let mut dot = 0.0;
            for i in 0..c_in {
                let s = style[i];
                for t in 0..kk {
                    dot += d_eff[row + i * kk + t] * weight[row + i * kk + t] * s;
                }
            }
            let sg3 = sg * sg * sg;
            for i in 0..c_in {
                let s = style[i];
                for t in 0..kk {
                    let idx = row + i * kk + t;
                    d_mod[idx] = sg * d_eff[idx] - sg3 * weight[idx] * s * dot;
                }
            }
        }
    }
    if let Some(dw) = dw {
        for o in 0..c_out {
            let row = o * c_in * kk;
            for i in 0..c_in {
                let s = style[i];
                for t in 0..kk {
                    dw[row + i * kk + t] += d_mod[row + i * kk + t] * s;
                }
            }
        }
    }
    if let Some(ds) = ds {
        for o in 0..c_out {
            let row = o * c_in * kk;
            for i in 0..c_in {
                let mut acc = 0.0;
                for t in 0..kk {
                    acc += d_mod[row + i * kk + t] * weight[row + i * kk + t];
                }
                ds[i] += acc;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, &a, false, &b, false, &mut c, false);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        gemm(2, 2, 2, &a, true, &b, false, &mut c, false);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(2, 2, 2, &a, false, &b, true, &mut c, false);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
        gemm(2, 2, 2, &a, false, &b, true, &mut c, true);
        assert_eq!(c, [34.0, 46.0, 78.0, 106.0]);
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeom { c_in: 2, h: 5, w: 4, k: 3, stride: 2, pad: 1 };
        let x: Vec<f64> = (0..40).map(|i| (i as f64 * 0.37).sin()).collect();
        let mut cols = Vec::new();
        im2col(&x, &g, &mut cols);
        let r: Vec<f64> = (0..cols.len()).map(|i| (i as f64 * 0.11).cos()).collect();
        let lhs: f64 = cols.iter().zip(&r).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; x.len()];
        col2im_add(&r, &g, &mut back);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn im2col_matches_direct_indexing() {
        for (h, w, k, stride, pad) in [(5, 4, 3, 1, 1), (6, 6, 3, 2, 1), (4, 7, 1, 1, 0), (3, 3, 3, 1, 2), (8, 8, 3, 2, 0)] {
            let g = ConvGeom { c_in: 2, h, w, k, stride, pad };
            let x: Vec<f64> = (0..2 * h * w).map(|i| i as f64 + 1.0).collect();
            let mut cols = Vec::new();
            im2col(&x, &g, &mut cols);
            let (oh, ow) = (g.out_h(), g.out_w());
            for c in 0..2 {
                for ky in 0..k {
                    for kx in 0..k {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                let inside = (0..h as isize).contains(&iy) && (0..w as isize).contains(&ix);
                                let expect = if inside { x[(c * h + iy as usize) * w + ix as usize] } else { 0.0 };
                                let row = (c * k + ky) * k + kx;
                                assert_eq!(cols[row * oh * ow + oy * ow + ox], expect);
                            }
                        }
                    }
                }
            }
        }
    }
}
