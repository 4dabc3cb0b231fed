//! 2D DFT helpers for the log-amplitude spectrum layer.

use rustfft::num_complex::Complex;
use rustfft::num_traits::Float;
use rustfft::{FftDirection, FftNum, FftPlanner};

/// Index in the centered layout of frequency index `k` of an `n`-point axis.
/// Zero frequency lands at `n / 2`.
#[inline]
pub fn centered_index(k: usize, n: usize) -> usize {
    (k + n / 2) % n
}

/// In-place 2D DFT of a row-major `h × w` plane.
pub fn dft2<T: FftNum>(plane: &mut [Complex<T>], h: usize, w: usize, direction: FftDirection) {
    let mut planner = FftPlanner::<T>::new();
    let row_fft = planner.plan_fft(w, direction);
    for row in plane.chunks_exact_mut(w) {
        row_fft.process(row);
    }
    let col_fft = planner.plan_fft(h, direction);
    let mut column = vec![Complex::new(T::zero(), T::zero()); h];
    for c in 0..w {
        for r in 0..h {
            column[r] = plane[r * w + c];
        }
        col_fft.process(&mut column);
        for r in 0..h {
            plane[r * w + c] = column[r];
        }
    }
}

/// `log(1 + |DFT(plane)|)` with the zero frequency moved to `(h/2, w/2)`.
pub fn log_magnitude_plane<T: FftNum + Float>(plane: &[T], h: usize, w: usize) -> Vec<T> {
    let mut spec: Vec<Complex<T>> = plane.iter().map(|&v| Complex::new(v, T::zero())).collect();
    dft2(&mut spec, h, w, FftDirection::Forward);
    let mut out = vec![T::zero(); h * w];
    for r in 0..h {
        for c in 0..w {
            let v = spec[r * w + c];
            out[centered_index(r, h) * w + centered_index(c, w)] = (T::one() + v.norm()).ln();
        }
    }
    out
}

/// Gradient of `Σ g ⊙ log_magnitude_plane(x)` with respect to `x`.
pub(crate) fn log_magnitude_plane_backward(plane: &[f64], grad: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut spec: Vec<Complex<f64>> = plane.iter().map(|&v| Complex::new(v, 0.0)).collect();
    dft2(&mut spec, h, w, FftDirection::Forward);
    for r in 0..h {
        for c in 0..w {
            let x = spec[r * w + c];
            let m = x.norm();
            let g = grad[centered_index(r, h) * w + centered_index(c, w)];
            spec[r * w + c] = if m > 1e-300 {
                x * (g / ((1.0 + m) * m))
            } else {
                Complex::new(0.0, 0.0)
            };
        }
    }
    dft2(&mut spec, h, w, FftDirection::Inverse);
    spec.iter().map(|z| z.re).collect()
}
