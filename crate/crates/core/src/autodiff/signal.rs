use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::Tensor;
use crate::Result;

/// Sinusoidal embedding of a scalar position: `[cos(p * f_i) .., sin(p * f_i) ..]`
/// with `f_i = 10000^(-i / (dim / 2))`.
pub fn sinusoidal_embedding(position: f64, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        let (s, c) = (position * freq).sin_cos();
        out[i] = c;
        out[half + i] = s;
    }
    Tensor::vector(out)
}

/// `[len, dim]` table of [`sinusoidal_embedding`] rows for positions `0..len`.
pub fn sinusoidal_positions(len: usize, dim: usize) -> Tensor {
    let mut data = Vec::with_capacity(len * dim);
    for p in 0..len {
        data.extend(sinusoidal_embedding(p as f64, dim).into_data());
    }
    Tensor::new(&[len, dim], data).expect("shape by construction")
}

/// Magnitude spectrum along the time axis of `x[channels, frames]`.
///
/// Returns `[channels, frames / 2 + 1]` (non-negative frequencies). Evaluation
/// only; there is no adjoint.
pub fn fft_magnitude_time(x: &Tensor) -> Result<Tensor> {
    let (channels, frames) = x.dims2("fft_magnitude")?;
    let bins = frames / 2 + 1;
    let fft = FftPlanner::<f64>::new().plan_fft_forward(frames);
    let mut out = Vec::with_capacity(channels * bins);
    let mut buf = vec![Complex::new(0.0, 0.0); frames];
    for c in 0..channels {
        for (b, &v) in buf.iter_mut().zip(x.row(c)) {
            *b = Complex::new(v, 0.0);
        }
        fft.process(&mut buf);
        out.extend(buf[..bins].iter().map(|z| z.norm()));
    }
    Tensor::new(&[channels, bins], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fft_peak_at_cycle_count() {
        let frames = 64;
        let x = Tensor::from_fn(&[2, frames], |i| {
            let f = i % frames;
            (std::f64::consts::TAU * 3.0 * f as f64 / frames as f64 + (i / frames) as f64).sin()
        });
        let mag = fft_magnitude_time(&x).unwrap();
        assert_eq!(mag.shape(), &[2, 33]);
        for c in 0..2 {
            let row = mag.row(c);
            let arg = (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
            assert_eq!(arg, 3);
            assert!((row[3] - 32.0).abs() < 1e-9);
        }
    }

    #[test]
    fn sinusoidal_zero_position() {
        let e = sinusoidal_embedding(0.0, 8);
        assert_eq!(e.data(), &[1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
    }
}
