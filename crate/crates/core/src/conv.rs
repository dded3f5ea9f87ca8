//! Same-padded 2D convolution on channel-major `f64` feature maps, via
//! im2col and a single GEMM per call.

use matrixmultiply::dgemm;

/// Geometry of one convolution layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvShape {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub rows: usize,
    pub cols: usize,
}

impl ConvShape {
    pub fn weight_len(&self) -> usize {
        self.c_out * self.c_in * self.kernel * self.kernel
    }

    fn patch_len(&self) -> usize {
        self.c_in * self.kernel * self.kernel
    }

    fn pixels(&self) -> usize {
        self.rows * self.cols
    }

    /// Column matrix `[c_in·k·k] × [rows·cols]` with zero padding.
    fn im2col(&self, input: &[f64]) -> Vec<f64> {
        let (k, h, w) = (self.kernel, self.rows, self.cols);
        let pad = (k / 2) as isize;
        let hw = self.pixels();
        let mut cols = vec![0.0; self.patch_len() * hw];
        for ci in 0..self.c_in {
            let plane = &input[ci * hw..(ci + 1) * hw];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (ci * k + ki) * k + kj;
                    let dst = &mut cols[row * hw..(row + 1) * hw];
                    let di = ki as isize - pad;
                    let dj = kj as isize - pad;
                    for r in 0..h {
                        let sr = r as isize + di;
                        if sr < 0 || sr >= h as isize {
                            continue;
                        }
                        let src = &plane[sr as usize * w..(sr as usize + 1) * w];
                        let out = &mut dst[r * w..(r + 1) * w];
                        let c_lo = (-dj).max(0) as usize;
                        let c_hi = (w as isize - dj).min(w as isize) as usize;
                        for c in c_lo..c_hi {
                            out[c] = src[(c as isize + dj) as usize];
                        }
                    }
                }
            }
        }
        cols
    }

    /// Scatter-add of a column-matrix gradient back to the input layout.
    fn col2im(&self, cols: &[f64]) -> Vec<f64> {
        let (k, h, w) = (self.kernel, self.rows, self.cols);
        let pad = (k / 2) as isize;
        let hw = self.pixels();
        let mut out = vec![0.0; self.c_in * hw];
        for ci in 0..self.c_in {
            let plane = &mut out[ci * hw..(ci + 1) * hw];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (ci * k + ki) * k + kj;
                    let src = &cols[row * hw..(row + 1) * hw];
                    let di = ki as isize - pad;
                    let dj = kj as isize - pad;
                    for r in 0..h {
                        let sr = r as isize + di;
                        if sr < 0 || sr >= h as isize {
                            continue;
                        }
                        let dst = &mut plane[sr as usize * w..(sr as usize + 1) * w];
                        let g = &src[r * w..(r + 1) * w];
                        let c_lo = (-dj).max(0) as usize;
                        let c_hi = (w as isize - dj).min(w as isize) as usize;
                        for c in c_lo..c_hi {
                            dst[(c as isize + dj) as usize] += g[c];
                        }
                    }
                }
            }
        }
        out
    }

    /// `out[co] = Σ_ci w[co, ci] ⋆ input[ci] (+ bias[co])`.
    pub fn forward(&self, input: &[f64], weight: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
        debug_assert_eq!(input.len(), self.c_in * self.pixels());
        debug_assert_eq!(weight.len(), self.weight_len());
        let hw = self.pixels();
        let kk = self.patch_len();
        let cols = self.im2col(input);
        let mut out = vec![0.0; self.c_out * hw];
        if let Some(b) = bias {
            for (co, plane) in out.chunks_exact_mut(hw).enumerate() {
                plane.fill(b[co]);
            }
        }
        let beta = if bias.is_some() { 1.0 } else { 0.0 };
        // SAFETY: slices are sized for the stated dimensions and strides.
        unsafe {
            dgemm(
                self.c_out,
                kk,
                hw,
                1.0,
                weight.as_ptr(),
                kk as isize,
                1,
                cols.as_ptr(),
                hw as isize,
                1,
                beta,
                out.as_mut_ptr(),
                hw as isize,
                1,
            );
        }
        out
    }

    /// Adds weight (and bias) gradients and returns the input gradient.
    pub fn backward(
        &self,
        input: &[f64],
        weight: &[f64],
        grad_out: &[f64],
        grad_weight: &mut [f64],
        grad_bias: Option<&mut [f64]>,
    ) -> Vec<f64> {
        debug_assert_eq!(grad_out.len(), self.c_out * self.pixels());
        debug_assert_eq!(grad_weight.len(), self.weight_len());
        let hw = self.pixels();
        let kk = self.patch_len();
        let cols = self.im2col(input);
        let mut grad_cols = vec![0.0; kk * hw];
        // SAFETY: slices are sized for the stated dimensions and strides.
        unsafe {
            // dW += dY · colsᵀ
            dgemm(
                self.c_out,
                hw,
                kk,
                1.0,
                grad_out.as_ptr(),
                hw as isize,
                1,
                cols.as_ptr(),
                1,
                hw as isize,
                1.0,
                grad_weight.as_mut_ptr(),
                kk as isize,
                1,
            );
            // dcols = Wᵀ · dY
            dgemm(
                kk,
                self.c_out,
                hw,
                1.0,
                weight.as_ptr(),
                1,
                kk as isize,
                grad_out.as_ptr(),
                hw as isize,
                1,
                0.0,
                grad_cols.as_mut_ptr(),
                hw as isize,
                1,
            );
        }
        if let Some(gb) = grad_bias {
            for (co, plane) in grad_out.chunks_exact(hw).enumerate() {
                gb[co] += plane.iter().sum::<f64>();
            }
        }
        self.col2im(&grad_cols)
    }
}
