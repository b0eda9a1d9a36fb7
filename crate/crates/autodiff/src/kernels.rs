//! Dense compute kernels shared by the forward and backward passes.

/// Geometry of a square-kernel 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.dilation * (self.kernel - 1) - 1) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.dilation * (self.kernel - 1) - 1) / self.stride + 1
    }

    pub fn col_rows(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn col_cols(&self) -> usize {
        self.out_height() * self.out_width()
    }

    /// Half-open range of output coordinates whose tap `t` lands inside
    /// `[0, extent)`, for an axis with `out` output positions.
    #[inline]
    fn valid(&self, t: usize, extent: usize, out: usize) -> (usize, usize) {
        let offset = (t * self.dilation) as isize - self.padding as isize;
        let s = self.stride as isize;
        // smallest o with o*s + offset >= 0
        let lo = if offset >= 0 { 0 } else { ((-offset) + s - 1) / s };
        // largest o with o*s + offset <= extent - 1
        let last = extent as isize - 1 - offset;
        let hi = if last < 0 { 0 } else { last / s + 1 };
        let lo = (lo as usize).min(out);
        let hi = (hi as usize).min(out).max(lo);
        (lo, hi)
    }

    #[inline]
    fn source(&self, o: usize, t: usize) -> usize {
        o * self.stride + t * self.dilation - self.padding
    }
}

/// Unfolds one `[C, H, W]` image into a `[C*k*k, Ho*Wo]` column block whose
/// rows start `ld` elements apart (`ld >= Ho*Wo`).
pub fn im2col(x: &[f64], g: &ConvGeometry, cols: &mut [f64], ld: usize) {
    let (ho, wo) = (g.out_height(), g.out_width());
    let hw = g.height * g.width;
    let k = g.kernel;
    for c in 0..g.in_channels {
        let plane = &x[c * hw..(c + 1) * hw];
        for ki in 0..k {
            let (oh_lo, oh_hi) = g.valid(ki, g.height, ho);
            for kj in 0..k {
                let (ow_lo, ow_hi) = g.valid(kj, g.width, wo);
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * ld..row * ld + ho * wo];
                dst[..oh_lo * wo].fill(0.0);
                dst[oh_hi * wo..].fill(0.0);
                if ow_lo == ow_hi {
                    dst[oh_lo * wo..oh_hi * wo].fill(0.0);
                    continue;
                }
                let iw0 = g.source(ow_lo, kj);
                let len = ow_hi - ow_lo;
                for oh in oh_lo..oh_hi {
                    let ih = g.source(oh, ki);
                    let src = &plane[ih * g.width..(ih + 1) * g.width];
                    let line = &mut dst[oh * wo..(oh + 1) * wo];
                    line[..ow_lo].fill(0.0);
                    line[ow_hi..].fill(0.0);
                    if g.stride == 1 {
                        line[ow_lo..ow_hi].copy_from_slice(&src[iw0..iw0 + len]);
                    } else {
                        for (j, v) in line[ow_lo..ow_hi].iter_mut().enumerate() {
                            *v = src[iw0 + j * g.stride];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back into `dx` (accumulating).
pub fn col2im(cols: &[f64], g: &ConvGeometry, dx: &mut [f64], ld: usize) {
    let (ho, wo) = (g.out_height(), g.out_width());
    let hw = g.height * g.width;
    let k = g.kernel;
    for c in 0..g.in_channels {
        let plane = &mut dx[c * hw..(c + 1) * hw];
        for ki in 0..k {
            let (oh_lo, oh_hi) = g.valid(ki, g.height, ho);
            for kj in 0..k {
                let (ow_lo, ow_hi) = g.valid(kj, g.width, wo);
                if ow_lo == ow_hi {
                    continue;
                }
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * ld..row * ld + ho * wo];
                let iw0 = g.source(ow_lo, kj);
                let len = ow_hi - ow_lo;
                for oh in oh_lo..oh_hi {
                    let ih = g.source(oh, ki);
                    let dst = &mut plane[ih * g.width..(ih + 1) * g.width];
                    let line = &src[oh * wo + ow_lo..oh * wo + ow_hi];
                    if g.stride == 1 {
                        dst[iw0..iw0 + len].iter_mut().zip(line).for_each(|(d, v)| *d += v);
                    } else {
                        for (j, v) in line.iter().enumerate() {
                            dst[iw0 + j * g.stride] += v;
                        }
                    }
                }
            }
        }
    }
}

/// `c = alpha * op(a) * op(b) + beta * c` for row-major operands, where `op`
/// optionally transposes. `a` is logically `m x k`, `b` is `k x n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the length assertion above covers every index reachable through
    // the given strides, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
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

/// Source taps for one output coordinate of a 2x bilinear upsample
/// (align-corners = false, edge-clamped).
#[derive(Clone, Copy, Debug)]
pub struct Tap {
    pub lo: usize,
    pub hi: usize,
    pub w_lo: f64,
    pub w_hi: f64,
}

pub fn upsample_taps(extent: usize) -> Vec<Tap> {
    (0..2 * extent)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(extent - 1);
            let hi = (lo + 1).min(extent - 1);
            let frac = src - lo as f64;
            Tap {
                lo,
                hi,
                w_lo: 1.0 - frac,
                w_hi: frac,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn out_extent_formula() {
        let g = ConvGeometry {
            in_channels: 1,
            height: 64,
            width: 64,
            kernel: 3,
            stride: 2,
            dilation: 1,
            padding: 1,
        };
        assert_eq!((g.out_height(), g.out_width()), (32, 32));
        let g = ConvGeometry {
            stride: 1,
            dilation: 2,
            padding: 2,
            height: 8,
            width: 8,
            ..g
        };
        assert_eq!((g.out_height(), g.out_width()), (8, 8));
    }

    #[test]
    fn gemm_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, 1.0, &a, false, &b, false, 0.0, &mut c);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        gemm(2, 2, 2, 1.0, &a, true, &b, false, 0.0, &mut c);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(2, 2, 2, 1.0, &a, false, &b, true, 0.0, &mut c);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeometry {
            in_channels: 2,
            height: 5,
            width: 4,
            kernel: 3,
            stride: 2,
            dilation: 1,
            padding: 1,
        };
        let x: Vec<f64> = (0..40).map(|i| (i as f64 * 0.37).sin()).collect();
        let y: Vec<f64> = (0..g.col_rows() * g.col_cols())
            .map(|i| (i as f64 * 0.11).cos())
            .collect();
        let mut cols = vec![0.0; y.len()];
        im2col(&x, &g, &mut cols, g.col_cols());
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut dx = vec![0.0; x.len()];
        col2im(&y, &g, &mut dx, g.col_cols());
        let rhs: f64 = dx.iter().zip(&x).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
