//! Two-dimensional discrete Fourier transform of image planes.

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

/// Forward 2-D DFT of an `h×w` row-major plane, unnormalized.
pub fn fft2d(plane: &[f64], h: usize, w: usize) -> Vec<Complex64> {
    assert_eq!(plane.len(), h * w, "plane is not {h}×{w}");
    let mut planner = FftPlanner::new();
    let (rows, cols) = (planner.plan_fft_forward(w), planner.plan_fft_forward(h));
    let mut buf: Vec<Complex64> = plane.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    rows.process(&mut buf);
    let mut col = vec![Complex64::new(0.0, 0.0); h];
    for x in 0..w {
        for y in 0..h {
            col[y] = buf[y * w + x];
        }
        cols.process(&mut col);
        for y in 0..h {
            buf[y * w + x] = col[y];
        }
    }
    buf
}
