//! 2-D transforms on row-major complex buffers, backed by `rustfft`.
//!
//! Forward transforms are unnormalized; `inverse` divides by H·W, while
//! `inverse_unnormalized` does not (used by the adjoint passes).

use std::cell::RefCell;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn plan(len: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        if inverse {
            p.plan_fft_inverse(len)
        } else {
            p.plan_fft_forward(len)
        }
    })
}

fn transform(buf: &mut [Complex64], height: usize, width: usize, inverse: bool) {
    debug_assert_eq!(buf.len(), height * width);
    let row_fft = plan(width, inverse);
    let mut scratch = vec![Complex64::default(); row_fft.get_inplace_scratch_len()];
    row_fft.process_with_scratch(buf, &mut scratch);

    let col_fft = plan(height, inverse);
    let mut col = vec![Complex64::default(); height];
    let mut scratch = vec![Complex64::default(); col_fft.get_inplace_scratch_len()];
    for c in 0..width {
        for r in 0..height {
            col[r] = buf[r * width + c];
        }
        col_fft.process_with_scratch(&mut col, &mut scratch);
        for r in 0..height {
            buf[r * width + c] = col[r];
        }
    }
}

pub fn forward(buf: &mut [Complex64], height: usize, width: usize) {
    transform(buf, height, width, false);
}

pub fn inverse(buf: &mut [Complex64], height: usize, width: usize) {
    transform(buf, height, width, true);
    let scale = 1.0 / (height * width) as f64;
    for v in buf.iter_mut() {
        *v *= scale;
    }
}

pub fn inverse_unnormalized(buf: &mut [Complex64], height: usize, width: usize) {
    transform(buf, height, width, true);
}

pub fn forward_real(data: &[f64], height: usize, width: usize) -> Vec<Complex64> {
    let mut buf: Vec<Complex64> = data.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    forward(&mut buf, height, width);
    buf
}

/// Index permutation that moves the zero-frequency bin to `(H/2, W/2)`.
#[inline]
pub fn shifted_index(r: usize, c: usize, height: usize, width: usize) -> usize {
    ((r + height / 2) % height) * width + (c + width / 2) % width
}

pub fn fftshift<T: Copy + Default>(data: &[T], height: usize, width: usize) -> Vec<T> {
    let mut out = vec![T::default(); data.len()];
    for r in 0..height {
        for c in 0..width {
            out[shifted_index(r, c, height, width)] = data[r * width + c];
        }
    }
    out
}

/// Inverse of [`fftshift`] (the two coincide for even sizes).
pub fn ifftshift<T: Copy + Default>(data: &[T], height: usize, width: usize) -> Vec<T> {
    let mut out = vec![T::default(); data.len()];
    for r in 0..height {
        for c in 0..width {
            out[r * width + c] = data[shifted_index(r, c, height, width)];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn forward_inverse_round_trip() {
        let (h, w) = (8, 16);
        let data: Vec<f64> = (0..h * w).map(|i| ((i * 37) % 11) as f64 - 3.0).collect();
        let mut buf = forward_real(&data, h, w);
        inverse(&mut buf, h, w);
        for (a, b) in data.iter().zip(&buf) {
            assert!((a - b.re).abs() < 1e-12 && b.im.abs() < 1e-12);
        }
    }

    #[test]
    fn matches_naive_dft() {
        let (h, w) = (4, 8);
        let data: Vec<f64> = (0..h * w).map(|i| (i as f64 * 0.7).sin()).collect();
        let fast = forward_real(&data, h, w);
        for ky in 0..h {
            for kx in 0..w {
                let mut acc = Complex64::default();
                for y in 0..h {
                    for x in 0..w {
                        let ang = -2.0
                            * std::f64::consts::PI
                            * ((ky * y) as f64 / h as f64 + (kx * x) as f64 / w as f64);
                        acc += data[y * w + x] * Complex64::from_polar(1.0, ang);
                    }
                }
                assert!((acc - fast[ky * w + kx]).norm() < 1e-9);
            }
        }
    }

    #[test]
    fn shift_and_unshift_are_inverse() {
        let (h, w) = (6, 5);
        let data: Vec<f64> = (0..h * w).map(|i| i as f64).collect();
        let s = fftshift(&data, h, w);
        assert_eq!(s[(h / 2) * w + w / 2], 0.0);
        assert_eq!(ifftshift(&s, h, w), data);
    }
}
