//! Raw `f32` compute kernels. Shapes are validated by the graph layer before
//! any of these are called.

use matrixmultiply::sgemm;

/// `C = A·B + beta·C` with `A: m×k`, `B: k×n`, `C: m×n`, all row-major.
/// `a_t`/`b_t` mean the stored buffer holds the transpose.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_t: bool,
    b: &[f32],
    b_t: bool,
    beta: f32,
    c: &mut [f32],
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices cover every element addressed by the strides above.
    unsafe {
        sgemm(
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

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub h_in: usize,
    pub w_in: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    pub fn patch(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    pub fn pixels(&self) -> usize {
        self.h_out * self.w_out
    }
}

pub(crate) fn im2col(x: &[f32], g: &ConvGeom, cols: &mut [f32]) {
    let p = g.pixels();
    for c in 0..g.c_in {
        let plane = &x[c * g.h_in * g.w_in..(c + 1) * g.h_in * g.w_in];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oh in 0..g.h_out {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    let out_row = &mut dst[oh * g.w_out..(oh + 1) * g.w_out];
                    if ih < 0 || ih >= g.h_in as isize {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src = &plane[ih as usize * g.w_in..(ih as usize + 1) * g.w_in];
                    if g.stride == 1 {
                        // valid columns form one contiguous run
                        let lo = g.pad.saturating_sub(kj).min(g.w_out);
                        let hi = (g.w_in + g.pad).saturating_sub(kj).clamp(lo, g.w_out);
                        out_row[..lo].fill(0.0);
                        if hi > lo {
                            out_row[lo..hi].copy_from_slice(&src[lo + kj - g.pad..hi + kj - g.pad]);
                        }
                        out_row[hi..].fill(0.0);
                        continue;
                    }
                    for (ow, o) in out_row.iter_mut().enumerate() {
                        let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                        *o = if iw < 0 || iw >= g.w_in as isize {
                            0.0
                        } else {
                            src[iw as usize]
                        };
                    }
                }
            }
        }
    }
}

pub(crate) fn col2im_add(cols: &[f32], g: &ConvGeom, dx: &mut [f32]) {
    let p = g.pixels();
    for c in 0..g.c_in {
        let plane = &mut dx[c * g.h_in * g.w_in..(c + 1) * g.h_in * g.w_in];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oh in 0..g.h_out {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    if ih < 0 || ih >= g.h_in as isize {
                        continue;
                    }
                    let dst = &mut plane[ih as usize * g.w_in..(ih as usize + 1) * g.w_in];
                    let srow = &src[oh * g.w_out..(oh + 1) * g.w_out];
                    if g.stride == 1 {
                        let lo = g.pad.saturating_sub(kj).min(g.w_out);
                        let hi = (g.w_in + g.pad).saturating_sub(kj).clamp(lo, g.w_out);
                        if hi > lo {
                            for (d, v) in dst[lo + kj - g.pad..].iter_mut().zip(&srow[lo..hi]) {
                                *d += v;
                            }
                        }
                        continue;
                    }
                    for ow in 0..g.w_out {
                        let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                        if iw >= 0 && iw < g.w_in as isize {
                            dst[iw as usize] += src[oh * g.w_out + ow];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(x: &[f32], n: usize, kernel: &[f32], g: &ConvGeom) -> Vec<f32> {
    let in_sz = g.c_in * g.h_in * g.w_in;
    let out_sz = g.c_out * g.pixels();
    let mut out = vec![0.0f32; n * out_sz];
    let mut cols = vec![0.0f32; g.patch() * g.pixels()];
    for b in 0..n {
        im2col(&x[b * in_sz..(b + 1) * in_sz], g, &mut cols);
        gemm(
            g.c_out,
            g.patch(),
            g.pixels(),
            kernel,
            false,
            &cols,
            false,
            0.0,
            &mut out[b * out_sz..(b + 1) * out_sz],
        );
    }
    out
}

/// Returns `(grad_input, grad_kernel)`; either may be skipped.
pub(crate) fn conv2d_backward(
    x: &[f32],
    n: usize,
    kernel: &[f32],
    g: &ConvGeom,
    gout: &[f32],
    want_input: bool,
    want_kernel: bool,
) -> (Option<Vec<f32>>, Option<Vec<f32>>) {
    let in_sz = g.c_in * g.h_in * g.w_in;
    let out_sz = g.c_out * g.pixels();
    let mut gx = want_input.then(|| vec![0.0f32; n * in_sz]);
    let mut gk = want_kernel.then(|| vec![0.0f32; g.c_out * g.patch()]);
    let mut cols = vec![0.0f32; g.patch() * g.pixels()];
    let mut gcols = vec![0.0f32; g.patch() * g.pixels()];
    for b in 0..n {
        let go = &gout[b * out_sz..(b + 1) * out_sz];
        if let Some(gk) = gk.as_mut() {
            im2col(&x[b * in_sz..(b + 1) * in_sz], g, &mut cols);
            // gK (c_out × patch) += gout (c_out × P) · colsᵀ (P × patch)
            gemm(g.c_out, g.pixels(), g.patch(), go, false, &cols, true, 1.0, gk);
        }
        if let Some(gx) = gx.as_mut() {
            // gcols (patch × P) = Kᵀ (patch × c_out) · gout (c_out × P)
            gemm(
                g.patch(),
                g.c_out,
                g.pixels(),
                kernel,
                true,
                go,
                false,
                0.0,
                &mut gcols,
            );
            col2im_add(&gcols, g, &mut gx[b * in_sz..(b + 1) * in_sz]);
        }
    }
    (gx, gk)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct PoolGeom {
    pub channels: usize,
    pub h_in: usize,
    pub w_in: usize,
    pub kernel: usize,
    pub stride: usize,
    pub h_out: usize,
    pub w_out: usize,
}

/// Max pooling. Ties go to the first maximum in row-major window order.
/// Returns the output and, per output element, the flat input index it came from.
pub(crate) fn maxpool_forward(x: &[f32], n: usize, g: &PoolGeom) -> (Vec<f32>, Vec<u32>) {
    let planes = n * g.channels;
    let mut out = Vec::with_capacity(planes * g.h_out * g.w_out);
    let mut arg = Vec::with_capacity(out.capacity());
    for p in 0..planes {
        let base = p * g.h_in * g.w_in;
        for oh in 0..g.h_out {
            for ow in 0..g.w_out {
                let mut best = f32::NEG_INFINITY;
                let mut best_idx = usize::MAX;
                for ki in 0..g.kernel {
                    let row = base + (oh * g.stride + ki) * g.w_in + ow * g.stride;
                    for kj in 0..g.kernel {
                        let v = x[row + kj];
                        if v > best || best_idx == usize::MAX {
                            best = v;
                            best_idx = row + kj;
                        }
                    }
                }
                out.push(best);
                arg.push(best_idx as u32);
            }
        }
    }
    (out, arg)
}

pub(crate) fn avgpool_forward(x: &[f32], n: usize, g: &PoolGeom) -> Vec<f32> {
    let planes = n * g.channels;
    let inv = 1.0 / (g.kernel * g.kernel) as f32;
    let mut out = Vec::with_capacity(planes * g.h_out * g.w_out);
    for p in 0..planes {
        let base = p * g.h_in * g.w_in;
        for oh in 0..g.h_out {
            for ow in 0..g.w_out {
                let mut s = 0.0f32;
                for ki in 0..g.kernel {
                    let row = base + (oh * g.stride + ki) * g.w_in + ow * g.stride;
                    s += x[row..row + g.kernel].iter().sum::<f32>();
                }
                out.push(s * inv);
            }
        }
    }
    out
}

pub(crate) fn avgpool_backward(gout: &[f32], n: usize, g: &PoolGeom) -> Vec<f32> {
    let planes = n * g.channels;
    let inv = 1.0 / (g.kernel * g.kernel) as f32;
    let mut gx = vec![0.0f32; planes * g.h_in * g.w_in];
    for p in 0..planes {
        let base = p * g.h_in * g.w_in;
        let obase = p * g.h_out * g.w_out;
        for oh in 0..g.h_out {
            for ow in 0..g.w_out {
                let v = gout[obase + oh * g.w_out + ow] * inv;
                for ki in 0..g.kernel {
                    let row = base + (oh * g.stride + ki) * g.w_in + ow * g.stride;
                    for d in &mut gx[row..row + g.kernel] {
                        *d += v;
                    }
                }
            }
        }
    }
    gx
}

/// Applies a `t×t` channel-mixing matrix to every consecutive group of `t`
/// channels. `channels` must be a multiple of `t`.
pub(crate) fn grouped_1x1_forward(
    x: &[f32],
    n: usize,
    channels: usize,
    pixels: usize,
    w: &[f32],
    t: usize,
) -> Vec<f32> {
    let mut out = vec![0.0f32; x.len()];
    let group = t * pixels;
    for b in 0..n {
        for grp in 0..channels / t {
            let off = b * channels * pixels + grp * group;
            gemm(
                t,
                t,
                pixels,
                w,
                false,
                &x[off..off + group],
                false,
                0.0,
                &mut out[off..off + group],
            );
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn grouped_1x1_backward(
    x: &[f32],
    n: usize,
    channels: usize,
    pixels: usize,
    w: &[f32],
    t: usize,
    gout: &[f32],
    want_input: bool,
    want_weight: bool,
) -> (Option<Vec<f32>>, Option<Vec<f32>>) {
    let group = t * pixels;
    let mut gx = want_input.then(|| vec![0.0f32; x.len()]);
    let mut gw = want_weight.then(|| vec![0.0f32; t * t]);
    for b in 0..n {
        for grp in 0..channels / t {
            let off = b * channels * pixels + grp * group;
            let go = &gout[off..off + group];
            if let Some(gx) = gx.as_mut() {
                gemm(t, t, pixels, w, true, go, false, 0.0, &mut gx[off..off + group]);
            }
            if let Some(gw) = gw.as_mut() {
                gemm(t, pixels, t, go, false, &x[off..off + group], true, 1.0, gw);
            }
        }
    }
    (gx, gw)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_transposes() {
        // A = [[1,2],[3,4]], B = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, &a, false, &b, false, 0.0, &mut c);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        gemm(2, 2, 2, &a, true, &b, false, 0.0, &mut c);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(2, 2, 2, &a, false, &b, true, 0.0, &mut c);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }

    #[test]
    fn maxpool_tie_goes_to_first() {
        let x = [1.0, 1.0, 1.0, 1.0];
        let g = PoolGeom {
            channels: 1,
            h_in: 2,
            w_in: 2,
            kernel: 2,
            stride: 2,
            h_out: 1,
            w_out: 1,
        };
        let (out, arg) = maxpool_forward(&x, 1, &g);
        assert_eq!(out, vec![1.0]);
        assert_eq!(arg, vec![0]);
    }
}
