//! Array kernels shared by the tape ops and by tape-free inference paths.

use super::DiffError;

/// Zero padding `(left, right)` that keeps a stride-one convolution
/// length-preserving. Even widths pad one extra sample on the left.
pub fn same_padding(width: usize) -> (usize, usize) {
    let left = width / 2;
    (left, width - 1 - left)
}

/// Stride-one, length-preserving 1-D convolution (cross-correlation).
///
/// `x` is `c_in x len`, `w` is `c_out x c_in x width`, `b` is `c_out`,
/// result is `c_out x len`.
pub fn conv1d_forward(
    x: &[f64],
    c_in: usize,
    len: usize,
    w: &[f64],
    c_out: usize,
    width: usize,
    b: &[f64],
) -> Vec<f64> {
    let (pad_left, _) = same_padding(width);
    let mut out = vec![0.0; c_out * len];
    for o in 0..c_out {
        let out_row = &mut out[o * len..(o + 1) * len];
        out_row.iter_mut().for_each(|v| *v = b[o]);
        for c in 0..c_in {
            let x_row = &x[c * len..(c + 1) * len];
            let w_row = &w[(o * c_in + c) * width..(o * c_in + c + 1) * width];
            for (k, &wk) in w_row.iter().enumerate() {
                // out[t] += wk * x[t + k - pad_left]
                let shift = k as isize - pad_left as isize;
                let t_lo = (-shift).max(0) as usize;
                let t_hi = ((len as isize) - shift).min(len as isize).max(0) as usize;
                if t_lo >= t_hi {
                    continue;
                }
                let src = &x_row[(t_lo as isize + shift) as usize..(t_hi as isize + shift) as usize];
                for (dst, &xv) in out_row[t_lo..t_hi].iter_mut().zip(src) {
                    *dst += wk * xv;
                }
            }
        }
    }
    out
}

/// Accumulates the input, kernel and bias gradients of [`conv1d_forward`].
#[allow(clippy::too_many_arguments)]
pub fn conv1d_backward(
    x: &[f64],
    c_in: usize,
    len: usize,
    w: &[f64],
    c_out: usize,
    width: usize,
    g_out: &[f64],
    mut g_x: Option<&mut [f64]>,
    mut g_w: Option<&mut [f64]>,
    g_b: Option<&mut [f64]>,
) {
    let (pad_left, _) = same_padding(width);
    if let Some(g_b) = g_b {
        for o in 0..c_out {
            g_b[o] += g_out[o * len..(o + 1) * len].iter().sum::<f64>();
        }
    }
    for o in 0..c_out {
        let g_row = &g_out[o * len..(o + 1) * len];
        for c in 0..c_in {
            let x_row = &x[c * len..(c + 1) * len];
            let base = (o * c_in + c) * width;
            for k in 0..width {
                let shift = k as isize - pad_left as isize;
                let t_lo = (-shift).max(0) as usize;
                let t_hi = ((len as isize) - shift).min(len as isize).max(0) as usize;
                if t_lo >= t_hi {
                    continue;
                }
                let s_lo = (t_lo as isize + shift) as usize;
                let s_hi = (t_hi as isize + shift) as usize;
                if let Some(g_w) = g_w.as_deref_mut() {
                    g_w[base + k] += super::tensor::dot(&g_row[t_lo..t_hi], &x_row[s_lo..s_hi]);
                }
                if let Some(g_x) = g_x.as_deref_mut() {
                    let wk = w[base + k];
                    let dst = &mut g_x[c * len + s_lo..c * len + s_hi];
                    for (d, &g) in dst.iter_mut().zip(&g_row[t_lo..t_hi]) {
                        *d += wk * g;
                    }
                }
            }
        }
    }
}

/// Precomputed weights for piecewise-linear resampling of `n_knots` evenly
/// spaced knots onto `n_fine` evenly spaced points spanning the same interval.
///
/// Fine point `i` sits at fractional knot position `i (n_knots-1)/(n_fine-1)`,
/// so the first and last fine points coincide with the first and last knots.
#[derive(Clone, Debug)]
pub struct InterpPlan {
    n_knots: usize,
    n_fine: usize,
    left: Vec<usize>,
    frac: Vec<f64>,
}

impl InterpPlan {
    pub fn new(n_knots: usize, n_fine: usize) -> Result<Self, DiffError> {
        if n_knots < 2 || n_fine < n_knots {
            return Err(DiffError::Shape(format!(
                "interpolation needs 2 <= n_knots <= n_fine, got {n_knots} knots onto {n_fine}"
            )));
        }
        let mut left = Vec::with_capacity(n_fine);
        let mut frac = Vec::with_capacity(n_fine);
        let span = (n_fine - 1) as f64;
        for i in 0..n_fine {
            let num = i * (n_knots - 1);
            let j = (num / (n_fine - 1)).min(n_knots - 2);
            let rem = num as f64 - (j * (n_fine - 1)) as f64;
            left.push(j);
            frac.push(rem / span);
        }
        Ok(Self {
            n_knots,
            n_fine,
            left,
            frac,
        })
    }

    pub fn n_knots(&self) -> usize {
        self.n_knots
    }

    pub fn n_fine(&self) -> usize {
        self.n_fine
    }

    /// `(left knot, weight on the right knot)` for fine point `i`.
    pub fn weights(&self, i: usize) -> (usize, f64) {
        (self.left[i], self.frac[i])
    }

    pub fn apply(&self, knots: &[f64], out: &mut [f64]) {
        debug_assert_eq!(knots.len(), self.n_knots);
        for ((o, &j), &f) in out.iter_mut().zip(&self.left).zip(&self.frac) {
            *o = (1.0 - f) * knots[j] + f * knots[j + 1];
        }
    }

    pub fn apply_transpose(&self, g_fine: &[f64], g_knots: &mut [f64]) {
        for ((&g, &j), &f) in g_fine.iter().zip(&self.left).zip(&self.frac) {
            g_knots[j] += (1.0 - f) * g;
            g_knots[j + 1] += f * g;
        }
    }

    /// Range of fine indices whose value depends on knot `j`.
    pub fn support(&self, j: usize) -> std::ops::Range<usize> {
        let lo = self.left.partition_point(|&l| l + 1 < j);
        let hi = self.left.partition_point(|&l| l <= j);
        lo..hi
    }
}

/// Resamples a single knot sequence onto `n_fine` points.
pub fn linear_interpolate(knots: &[f64], n_fine: usize) -> Result<Vec<f64>, DiffError> {
    let plan = InterpPlan::new(knots.len(), n_fine)?;
    let mut out = vec![0.0; n_fine];
    plan.apply(knots, &mut out);
    Ok(out)
}
