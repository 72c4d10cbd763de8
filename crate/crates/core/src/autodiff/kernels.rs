//! Raw numeric kernels shared by the forward and backward passes.

/// `c = op(a) · op(b) + beta · c` for row-major operands, where `op(a)` is
/// `m×k` and `op(b)` is `k×n`. A transposed operand is stored in its
/// untransposed row-major layout.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every index the strides can reach.
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

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn patch_len(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn out_len(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Input row read by output row `o` at kernel tap `k`, or `None` when
    /// it falls in the padding.
    #[inline]
    fn tap(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        (o * self.stride + k)
            .checked_sub(self.padding)
            .filter(|&y| y < extent)
    }

    /// Output columns `lo..hi` whose tap `j` lands inside the input.
    #[inline]
    fn valid_cols(&self, j: usize) -> (usize, usize) {
        let s = self.stride;
        let lo = self.padding.saturating_sub(j).div_ceil(s);
        let last = self.width + self.padding;
        let hi = if last > j {
            ((last - j - 1) / s + 1).min(self.out_w)
        } else {
            0
        };
        (lo, hi.max(lo))
    }
}

/// Unfolds `input` into a `(C·kh·kw) × (H'·W')` matrix.
pub(crate) fn im2col(input: &[f64], g: &ConvGeom) -> Vec<f64> {
    let cols = g.out_len();
    let mut out = vec![0.0; g.patch_len() * cols];
    for c in 0..g.channels {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let dst = &mut out[row * cols..(row + 1) * cols];
                for oy in 0..g.out_h {
                    let Some(iy) = g.tap(oy, i, g.height) else { continue };
                    let (lo, hi) = g.valid_cols(j);
                    let src = &input[(c * g.height + iy) * g.width..][..g.width];
                    let d = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    for ox in lo..hi {
                        d[ox] = src[ox * g.stride + j - g.padding];
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col`]: scatters-adds columns back onto the input grid.
pub(crate) fn col2im(cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let n = g.out_len();
    let mut out = vec![0.0; g.channels * g.height * g.width];
    for c in 0..g.channels {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let src = &cols[row * n..(row + 1) * n];
                for oy in 0..g.out_h {
                    let Some(iy) = g.tap(oy, i, g.height) else { continue };
                    let (lo, hi) = g.valid_cols(j);
                    let dst = &mut out[(c * g.height + iy) * g.width..][..g.width];
                    let s = &src[oy * g.out_w..(oy + 1) * g.out_w];
                    for ox in lo..hi {
                        dst[ox * g.stride + j - g.padding] += s[ox];
                    }
                }
            }
        }
    }
    out
}

/// Standard normal CDF.
pub(crate) fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

pub(crate) fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + eˣ)` without overflow.
pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}
