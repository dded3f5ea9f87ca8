//! Unitary 2D DFT on row-major complex buffers, with k-space centered: the
//! zero frequency sits at index `(rows/2, cols/2)`.

use std::sync::Arc;

use rustfft::{Fft, FftPlanner};

use crate::image::C64;

/// Planned forward/inverse 2D transforms for one grid size, both scaled by
/// `1/√(rows·cols)`. Centering is a modulation of the image by
/// `exp(2πi (r·⌊rows/2⌋/rows + c·⌊cols/2⌋/cols))`, which shifts the spectrum.
#[derive(Clone)]
pub struct Fft2 {
    rows: usize,
    cols: usize,
    row_fwd: Arc<dyn Fft<f64>>,
    row_inv: Arc<dyn Fft<f64>>,
    col_fwd: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
    /// Centering modulation times the unitary scale, applied before the forward pass.
    pre: Vec<C64>,
    /// Its conjugate, applied after the inverse pass.
    post: Vec<C64>,
}

impl std::fmt::Debug for Fft2 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Fft2({}x{})", self.rows, self.cols)
    }
}

impl Fft2 {
    pub fn new(rows: usize, cols: usize) -> Self {
        let mut planner = FftPlanner::new();
        let scale = 1.0 / ((rows * cols) as f64).sqrt();
        let phase = |k: usize, n: usize| std::f64::consts::TAU * ((k * (n / 2)) % n) as f64 / n as f64;
        let pre: Vec<C64> = (0..rows * cols)
            .map(|i| C64::from_polar(scale, phase(i / cols, rows) + phase(i % cols, cols)))
            .collect();
        let post = pre.iter().map(|v| v.conj()).collect();
        Self {
            rows,
            cols,
            row_fwd: planner.plan_fft_forward(cols),
            row_inv: planner.plan_fft_inverse(cols),
            col_fwd: planner.plan_fft_forward(rows),
            col_inv: planner.plan_fft_inverse(rows),
            pre,
            post,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn forward(&self, buf: &mut [C64]) {
        self.apply(buf, true);
    }

    pub fn inverse(&self, buf: &mut [C64]) {
        self.apply(buf, false);
    }

    fn apply(&self, buf: &mut [C64], fwd: bool) {
        let (rows, cols) = (self.rows, self.cols);
        assert_eq!(buf.len(), rows * cols, "fft buffer has the wrong length");
        let (row_plan, col_plan) = if fwd {
            (&self.row_fwd, &self.col_fwd)
        } else {
            (&self.row_inv, &self.col_inv)
        };
        if fwd {
            self.modulate(buf, &self.pre);
        }
        SCRATCH.with(|cell| {
            let mut bufs = cell.borrow_mut();
            let (t, scratch) = &mut *bufs;
            let need = row_plan
                .get_inplace_scratch_len()
                .max(col_plan.get_inplace_scratch_len());
            if scratch.len() < need {
                scratch.resize(need, C64::new(0.0, 0.0));
            }
            t.resize(rows * cols, C64::new(0.0, 0.0));
            row_plan.process_with_scratch(buf, &mut scratch[..need]);
            transpose(buf, t, rows, cols);
            col_plan.process_with_scratch(t, &mut scratch[..need]);
            transpose(t, buf, cols, rows);
        });
        if !fwd {
            self.modulate(buf, &self.post);
        }
    }
}

impl Fft2 {
    fn modulate(&self, buf: &mut [C64], m: &[C64]) {
        for (v, w) in buf.iter_mut().zip(m) {
            *v *= w;
        }
    }

    /// Forward transform that computes only the output rows flagged in
    /// `active` and zeroes the rest. Runs the column pass first so skipped
    /// rows cost nothing in the row pass.
    pub fn forward_rows(&self, buf: &mut [C64], active: &[bool]) {
        self.apply_rows(buf, active, true);
    }

    /// Inverse transform of a buffer whose rows outside `active` are zero.
    pub fn inverse_rows(&self, buf: &mut [C64], active: &[bool]) {
        self.apply_rows(buf, active, false);
    }

    fn apply_rows(&self, buf: &mut [C64], active: &[bool], fwd: bool) {
        let (rows, cols) = (self.rows, self.cols);
        assert_eq!(buf.len(), rows * cols, "fft buffer has the wrong length");
        assert_eq!(active.len(), rows, "row flags have the wrong length");
        let (row_plan, col_plan) = if fwd {
            (&self.row_fwd, &self.col_fwd)
        } else {
            (&self.row_inv, &self.col_inv)
        };
        if fwd {
            self.modulate(buf, &self.pre);
        }
        SCRATCH.with(|cell| {
            let mut bufs = cell.borrow_mut();
            let (t, scratch) = &mut *bufs;
            let need = row_plan
                .get_inplace_scratch_len()
                .max(col_plan.get_inplace_scratch_len());
            if scratch.len() < need {
                scratch.resize(need, C64::new(0.0, 0.0));
            }
            t.resize(rows * cols, C64::new(0.0, 0.0));
            let row_pass = |buf: &mut [C64], scratch: &mut [C64]| {
                for (row, &on) in buf.chunks_exact_mut(cols).zip(active) {
                    if on {
                        row_plan.process_with_scratch(row, scratch);
                    } else {
                        row.fill(C64::new(0.0, 0.0));
                    }
                }
            };
            if !fwd {
                row_pass(buf, &mut scratch[..need]);
            }
            transpose(buf, t, rows, cols);
            col_plan.process_with_scratch(t, &mut scratch[..need]);
            transpose(t, buf, cols, rows);
            if fwd {
                row_pass(buf, &mut scratch[..need]);
            }
        });
        if !fwd {
            self.modulate(buf, &self.post);
        }
    }
}

thread_local! {
    /// Transpose buffer and FFT scratch reused across calls on one thread.
    static SCRATCH: std::cell::RefCell<(Vec<C64>, Vec<C64>)> = const { std::cell::RefCell::new((Vec::new(), Vec::new())) };
}

/// `dst[c, r] = src[r, c]` for a `rows × cols` source, in cache-sized tiles.
fn transpose(src: &[C64], dst: &mut [C64], rows: usize, cols: usize) {
    const TILE: usize = 16;
    for r0 in (0..rows).step_by(TILE) {
        for c0 in (0..cols).step_by(TILE) {
            for r in r0..(r0 + TILE).min(rows) {
                for c in c0..(c0 + TILE).min(cols) {
                    dst[c * rows + r] = src[r * cols + c];
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn signal(n: usize) -> Vec<C64> {
        (0..n).map(|i| C64::new((i as f64 * 0.37).sin(), (i as f64 * 0.11).cos())).collect()
    }

    #[test]
    fn row_restricted_transforms_match_full() {
        let f = Fft2::new(8, 16);
        let active: Vec<bool> = (0..8).map(|r| r % 3 == 0).collect();
        let x = signal(128);
        let mut full = x.clone();
        f.forward(&mut full);
        let mut part = x.clone();
        f.forward_rows(&mut part, &active);
        for (i, (a, b)) in full.iter().zip(&part).enumerate() {
            let want = if active[i / 16] { *a } else { C64::new(0.0, 0.0) };
            assert!((want - b).norm() < 1e-13);
        }
        let mut back_full = part.clone();
        f.inverse(&mut back_full);
        let mut back_part = part;
        f.inverse_rows(&mut back_part, &active);
        for (a, b) in back_full.iter().zip(&back_part) {
            assert!((a - b).norm() < 1e-13);
        }
    }

    #[test]
    fn constant_image_maps_to_center() {
        for (rows, cols) in [(8, 4), (5, 7)] {
            let f = Fft2::new(rows, cols);
            let mut x = vec![C64::new(1.0, 0.0); rows * cols];
            f.forward(&mut x);
            let dc = (rows / 2) * cols + cols / 2;
            for (i, v) in x.iter().enumerate() {
                let want = if i == dc { ((rows * cols) as f64).sqrt() } else { 0.0 };
                assert!((v - C64::new(want, 0.0)).norm() < 1e-12, "{rows}x{cols} index {i}");
            }
        }
    }

    #[test]
    fn matches_direct_centered_dft() {
        let (rows, cols) = (6, 5);
        let x = signal(rows * cols);
        let mut y = x.clone();
        Fft2::new(rows, cols).forward(&mut y);
        for kr in 0..rows {
            for kc in 0..cols {
                let (fr, fc) = (kr as f64 - (rows / 2) as f64, kc as f64 - (cols / 2) as f64);
                let mut acc = C64::new(0.0, 0.0);
                for r in 0..rows {
                    for c in 0..cols {
                        let ph = -std::f64::consts::TAU * (fr * r as f64 / rows as f64 + fc * c as f64 / cols as f64);
                        acc += x[r * cols + c] * C64::from_polar(1.0, ph);
                    }
                }
                acc /= ((rows * cols) as f64).sqrt();
                assert!((acc - y[kr * cols + kc]).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn unitary_round_trip() {
        let f = Fft2::new(8, 4);
        let x = signal(32);
        let mut y = x.clone();
        f.forward(&mut y);
        let e: f64 = x.iter().map(|v| v.norm_sqr()).sum();
        let ey: f64 = y.iter().map(|v| v.norm_sqr()).sum();
        assert!((e - ey).abs() < 1e-12);
        f.inverse(&mut y);
        for (a, b) in x.iter().zip(&y) {
            assert!((a - b).norm() < 1e-14);
        }
    }
}
