//! Fourier transforms, STFT, Hilbert envelopes and Schroeder integration.
//!
//! Everything here works on the fixed synthesis frame: 2400 samples at
//! 24 kHz, giving a one-sided grid of 1201 bins spaced 10 Hz apart.

use std::cell::RefCell;
use std::f64::consts::PI;
use std::sync::Arc;

use realfft::{ComplexToReal, RealFftPlanner, RealToComplex};
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

pub use rustfft::num_complex::Complex64 as Complex;

/// Sample rate of every signal the engine handles.
pub const SAMPLE_RATE: f64 = 24_000.0;
/// Length of a synthesized impulse response (0.1 s).
pub const FRAME_LEN: usize = 2400;
/// One-sided bin count of the synthesis frame.
pub const N_BINS: usize = FRAME_LEN / 2 + 1;

/// EDC values below this floor are clamped.
pub const EDC_FLOOR_DB: f64 = -120.0;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SpectralError {
    #[error("signal of length {len} exceeds the frame length {max}")]
    TooLong { len: usize, max: usize },
    #[error("spectrum has {got} bins, expected {expected}")]
    BinCount { got: usize, expected: usize },
    #[error("frame length must be even and nonzero, got {0}")]
    BadFrame(usize),
    #[error("signal has zero energy")]
    ZeroEnergy,
    #[error("signal is empty")]
    Empty,
}

/// The discrete one-sided frequency grid shared by rendering, losses and metrics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectralGrid {
    sample_rate: f64,
    frame_len: usize,
}

impl Default for SpectralGrid {
    fn default() -> Self {
        Self {
            sample_rate: SAMPLE_RATE,
            frame_len: FRAME_LEN,
        }
    }
}

impl SpectralGrid {
    pub fn new(sample_rate: f64, frame_len: usize) -> Result<Self, SpectralError> {
        if frame_len == 0 || frame_len % 2 != 0 {
            return Err(SpectralError::BadFrame(frame_len));
        }
        Ok(Self { sample_rate, frame_len })
    }

    pub fn sample_rate(&self) -> f64 {
        self.sample_rate
    }

    pub fn frame_len(&self) -> usize {
        self.frame_len
    }

    pub fn n_bins(&self) -> usize {
        self.frame_len / 2 + 1
    }

    pub fn bin_freq(&self, k: usize) -> f64 {
        k as f64 * self.sample_rate / self.frame_len as f64
    }

    pub fn bin_freqs(&self) -> Vec<f64> {
        (0..self.n_bins()).map(|k| self.bin_freq(k)).collect()
    }
}

/// One-sided spectrum of a real signal on a [`SpectralGrid`].
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSpectrum {
    pub bins: Vec<Complex64>,
    pub grid: SpectralGrid,
}

impl ComplexSpectrum {
    pub fn new(bins: Vec<Complex64>, grid: SpectralGrid) -> Result<Self, SpectralError> {
        if bins.len() != grid.n_bins() {
            return Err(SpectralError::BinCount {
                got: bins.len(),
                expected: grid.n_bins(),
            });
        }
        Ok(Self { bins, grid })
    }

    pub fn magnitudes(&self) -> Vec<f64> {
        self.bins.iter().map(|z| z.norm()).collect()
    }
}

thread_local! {
    static REAL_PLANNER: RefCell<RealFftPlanner<f64>> = RefCell::new(RealFftPlanner::new());
    static COMPLEX_PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn r2c_plan(len: usize) -> Arc<dyn RealToComplex<f64>> {
    REAL_PLANNER.with(|p| p.borrow_mut().plan_fft_forward(len))
}

fn c2r_plan(len: usize) -> Arc<dyn ComplexToReal<f64>> {
    REAL_PLANNER.with(|p| p.borrow_mut().plan_fft_inverse(len))
}

/// Unnormalized one-sided DFT of `signal` zero-padded to `n`; writes `n/2 + 1` bins.
pub fn rdft_into(signal: &[f64], n: usize, out: &mut [Complex64]) {
    debug_assert!(signal.len() <= n && out.len() == n / 2 + 1);
    let plan = r2c_plan(n);
    let mut input = plan.make_input_vec();
    input[..signal.len()].copy_from_slice(signal);
    plan.process(&mut input, out)
        .expect("buffer sizes are fixed by the plan");
}

/// Inverse of [`rdft_into`] including the 1/n factor. Imaginary parts of the
/// DC and Nyquist bins are ignored.
pub fn irdft_into(bins: &[Complex64], n: usize, out: &mut [f64]) {
    debug_assert!(bins.len() == n / 2 + 1 && out.len() == n);
    let plan = c2r_plan(n);
    let mut spec = bins.to_vec();
    spec[0].im = 0.0;
    spec[n / 2].im = 0.0;
    plan.process(&mut spec, out)
        .expect("buffer sizes are fixed by the plan");
    let scale = 1.0 / n as f64;
    out.iter_mut().for_each(|v| *v *= scale);
}

/// Adjoint of the one-sided DFT: given dL/dRe X_k and dL/dIm X_k packed as
/// `grad_k = gr_k + j gi_k`, returns dL/dx_t for t in 0..n.
pub fn rdft_adjoint_into(grad: &[Complex64], n: usize, out: &mut [f64]) {
    // dL/dx_t = Re sum_k (gr_k + j gi_k) e^{+j 2 pi k t / n}; a c2r transform
    // computes Z_0 + Z_{n/2}(-1)^t + 2 Re sum_interior Z_k e^{+j..}.
    let half = n / 2;
    let plan = c2r_plan(n);
    let mut spec: Vec<Complex64> = grad.iter().map(|g| g * 0.5).collect();
    spec[0] = Complex64::new(grad[0].re, 0.0);
    spec[half] = Complex64::new(grad[half].re, 0.0);
    plan.process(&mut spec, out)
        .expect("buffer sizes are fixed by the plan");
}

/// One-sided DFT of a real signal zero-padded to the grid's frame length.
pub fn forward_dft(signal: &[f64], grid: &SpectralGrid) -> Result<ComplexSpectrum, SpectralError> {
    let n = grid.frame_len();
    if signal.len() > n {
        return Err(SpectralError::TooLong {
            len: signal.len(),
            max: n,
        });
    }
    let mut bins = vec![Complex64::new(0.0, 0.0); grid.n_bins()];
    rdft_into(signal, n, &mut bins);
    Ok(ComplexSpectrum { bins, grid: *grid })
}

/// Real signal of length `frame_len` whose one-sided spectrum is `spectrum`.
pub fn inverse_dft(spectrum: &ComplexSpectrum) -> Vec<f64> {
    let n = spectrum.grid.frame_len();
    let mut out = vec![0.0; n];
    irdft_into(&spectrum.bins, n, &mut out);
    out
}

/// Periodic Hann window.
pub fn hann(len: usize) -> Vec<f64> {
    (0..len)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / len as f64).cos())
        .collect()
}

/// Number of STFT frames for a signal of `len` samples.
pub fn stft_frame_count(len: usize, fft_size: usize, hop: usize) -> usize {
    if len <= fft_size {
        1
    } else {
        (len - fft_size) / hop + 1
    }
}

/// Short-time transform, row-major `frames x (fft_size/2 + 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Stft {
    pub frames: usize,
    pub bins: usize,
    pub data: Vec<Complex64>,
}

impl Stft {
    pub fn frame(&self, i: usize) -> &[Complex64] {
        &self.data[i * self.bins..(i + 1) * self.bins]
    }
}

/// Hann-windowed STFT with hop `fft_size / 4` and no centering.
pub fn stft(signal: &[f64], fft_size: usize) -> Stft {
    let hop = fft_size / 4;
    let bins = fft_size / 2 + 1;
    let frames = stft_frame_count(signal.len(), fft_size, hop);
    let window = hann(fft_size);
    let mut data = vec![Complex64::new(0.0, 0.0); frames * bins];
    let mut buf = vec![0.0; fft_size];
    for f in 0..frames {
        let start = f * hop;
        buf.iter_mut().for_each(|v| *v = 0.0);
        for (i, b) in buf.iter_mut().enumerate() {
            if let Some(&x) = signal.get(start + i) {
                *b = x * window[i];
            }
        }
        rdft_into(&buf, fft_size, &mut data[f * bins..(f + 1) * bins]);
    }
    Stft { frames, bins, data }
}

/// Modulus of the analytic signal, using an FFT of the signal's own length.
pub fn hilbert_envelope(signal: &[f64]) -> Vec<f64> {
    let n = signal.len();
    if n == 0 {
        return Vec::new();
    }
    let fft = COMPLEX_PLANNER.with(|p| p.borrow_mut().plan_fft_forward(n));
    let ifft = COMPLEX_PLANNER.with(|p| p.borrow_mut().plan_fft_inverse(n));
    let mut buf: Vec<Complex64> = signal.iter().map(|&x| Complex64::new(x, 0.0)).collect();
    fft.process(&mut buf);
    let half = n / 2;
    for (k, z) in buf.iter_mut().enumerate() {
        let weight = if k == 0 || (n % 2 == 0 && k == half) {
            1.0
        } else if k <= (n - 1) / 2 {
            2.0
        } else {
            0.0
        };
        *z *= weight;
    }
    ifft.process(&mut buf);
    buf.iter().map(|z| z.norm() / n as f64).collect()
}

/// Unnormalized backward energy integral: `E[t] = sum_{tau >= t} h[tau]^2`.
pub fn backward_energy(rir: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; rir.len()];
    let mut acc = 0.0;
    for (o, &h) in out.iter_mut().zip(rir).rev() {
        acc += h * h;
        *o = acc;
    }
    out
}

/// Schroeder energy decay curve in dB, 0 dB at t = 0, clamped at -120 dB.
pub fn schroeder_edc(rir: &[f64]) -> Result<Vec<f64>, SpectralError> {
    if rir.is_empty() {
        return Err(SpectralError::Empty);
    }
    let energy = backward_energy(rir);
    let total = energy[0];
    if total <= 0.0 || !total.is_finite() {
        return Err(SpectralError::ZeroEnergy);
    }
    Ok(energy
        .iter()
        .map(|&e| {
            if e <= 0.0 {
                EDC_FLOOR_DB
            } else {
                (10.0 * (e / total).log10()).max(EDC_FLOOR_DB)
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive_dft(x: &[f64], n: usize) -> Vec<Complex64> {
        (0..=n / 2)
            .map(|k| {
                x.iter()
                    .enumerate()
                    .map(|(t, &v)| {
                        let a = -2.0 * PI * (k * t) as f64 / n as f64;
                        Complex64::new(v * a.cos(), v * a.sin())
                    })
                    .sum()
            })
            .collect()
    }

    #[test]
    fn grid_edges() {
        let g = SpectralGrid::default();
        assert_eq!(g.n_bins(), 1201);
        assert_eq!(g.bin_freq(0), 0.0);
        assert_eq!(g.bin_freq(1200), 12_000.0);
        assert!(SpectralGrid::new(24_000.0, 2401).is_err());
    }

    #[test]
    fn impulse_has_flat_spectrum() {
        let g = SpectralGrid::default();
        let spec = forward_dft(&[1.0], &g).unwrap();
        for z in &spec.bins {
            assert!((z - Complex64::new(1.0, 0.0)).norm() < 1e-12);
        }
    }

    #[test]
    fn cosine_lands_in_one_bin() {
        let g = SpectralGrid::default();
        let x: Vec<f64> = (0..FRAME_LEN)
            .map(|t| (2.0 * PI * 100.0 * t as f64 / FRAME_LEN as f64).cos())
            .collect();
        let spec = forward_dft(&x, &g).unwrap();
        assert!((spec.bins[100] - Complex64::new(1200.0, 0.0)).norm() < 1e-9);
        for (k, z) in spec.bins.iter().enumerate().take(1200).skip(1) {
            if k != 100 {
                assert!(z.norm() < 1e-9, "bin {k} = {z}");
            }
        }
    }

    #[test]
    fn matches_naive_dft() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x: Vec<f64> = (0..72).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let fast = forward_dft(&x, &SpectralGrid::default()).unwrap();
        let slow = naive_dft(&x, FRAME_LEN);
        let scale = slow.iter().map(|z| z.norm()).fold(0.0, f64::max);
        for (a, b) in fast.bins.iter().zip(&slow) {
            assert!((a - b).norm() / scale < 1e-10);
        }
    }

    #[test]
    fn rejects_long_input() {
        let g = SpectralGrid::default();
        assert_eq!(
            forward_dft(&vec![0.0; 2401], &g),
            Err(SpectralError::TooLong { len: 2401, max: 2400 })
        );
    }

    #[test]
    fn all_ones_spectrum_is_impulse() {
        let g = SpectralGrid::default();
        let spec = ComplexSpectrum::new(vec![Complex64::new(1.0, 0.0); N_BINS], g).unwrap();
        let x = inverse_dft(&spec);
        assert!((x[0] - 1.0).abs() < 1e-12);
        assert!(x[1..].iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn roundtrip_and_parseval() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let g = SpectralGrid::default();
        let x: Vec<f64> = (0..FRAME_LEN).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let spec = forward_dft(&x, &g).unwrap();
        let back = inverse_dft(&spec);
        let err = x.iter().zip(&back).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-10);

        let time_energy: f64 = x.iter().map(|v| v * v).sum();
        let b = &spec.bins;
        let interior: f64 = b[1..N_BINS - 1].iter().map(|z| z.norm_sqr()).sum();
        let freq_energy = (b[0].norm_sqr() + 2.0 * interior + b[N_BINS - 1].norm_sqr()) / FRAME_LEN as f64;
        assert!((time_energy - freq_energy).abs() / time_energy < 1e-8);
    }

    #[test]
    fn dc_and_nyquist_are_real() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Vec<f64> = (0..500).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let spec = forward_dft(&x, &SpectralGrid::default()).unwrap();
        assert_eq!(spec.bins[0].im, 0.0);
        assert!(spec.bins[N_BINS - 1].im.abs() < 1e-12);
    }

    #[test]
    fn adjoint_matches_naive_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 64;
        let g: Vec<Complex64> = (0..=n / 2)
            .map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect();
        let mut fast = vec![0.0; n];
        rdft_adjoint_into(&g, n, &mut fast);
        for (t, &v) in fast.iter().enumerate() {
            let slow: f64 = g
                .iter()
                .enumerate()
                .map(|(k, gk)| {
                    let a = 2.0 * PI * (k * t) as f64 / n as f64;
                    gk.re * a.cos() - gk.im * a.sin()
                })
                .sum();
            assert!((v - slow).abs() < 1e-10);
        }
    }

    #[test]
    fn stft_shapes_and_values() {
        assert_eq!(stft(&vec![0.0; FRAME_LEN], 512).frames, 15);
        assert_eq!(stft(&vec![0.0; FRAME_LEN], 2048).frames, 1);
        assert_eq!(stft(&vec![0.0; 100], 512).frames, 1);
        assert!(stft(&vec![0.0; FRAME_LEN], 1024).data.iter().all(|z| z.norm() == 0.0));

        // Impulse at the center of frame 3: every bin has magnitude w[256].
        let mut x = vec![0.0; FRAME_LEN];
        let pos = 3 * 128 + 256;
        x[pos] = 1.0;
        let s = stft(&x, 512);
        let w = hann(512);
        for z in s.frame(3) {
            assert!((z.norm() - w[256]).abs() < 1e-12);
        }
        // Frame 4 sees the same impulse at offset 128.
        for z in s.frame(4) {
            assert!((z.norm() - w[128]).abs() < 1e-12);
        }
    }

    #[test]
    fn envelope_of_tone_is_flat() {
        let x: Vec<f64> = (0..FRAME_LEN)
            .map(|t| 0.7 * (2.0 * PI * 37.0 * t as f64 / FRAME_LEN as f64).cos())
            .collect();
        let env = hilbert_envelope(&x);
        for v in &env[10..FRAME_LEN - 10] {
            assert!((v - 0.7).abs() < 1e-6);
        }
        assert!(hilbert_envelope(&vec![0.0; 64]).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn envelope_tracks_slow_modulation() {
        let n = FRAME_LEN;
        let a = |t: usize| 1.0 + 0.5 * (2.0 * PI * 2.0 * t as f64 / n as f64).sin();
        let x: Vec<f64> = (0..n)
            .map(|t| a(t) * (2.0 * PI * 300.0 * t as f64 / n as f64).cos())
            .collect();
        let env = hilbert_envelope(&x);
        for t in n / 10..9 * n / 10 {
            assert!((env[t] - a(t)).abs() / a(t) < 0.01);
        }
    }

    #[test]
    fn envelope_sign_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x: Vec<f64> = (0..300).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        let a = hilbert_envelope(&x);
        let b = hilbert_envelope(&neg);
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn edc_of_impulse() {
        let mut h = vec![0.0; 10];
        h[0] = 1.0;
        let edc = schroeder_edc(&h).unwrap();
        assert_eq!(edc[0], 0.0);
        assert!(edc[1..].iter().all(|&v| v == EDC_FLOOR_DB));
        assert_eq!(schroeder_edc(&[0.0; 8]), Err(SpectralError::ZeroEnergy));
    }

    fn decay_slope(edc: &[f64], fs: f64) -> f64 {
        let pts: Vec<(f64, f64)> = edc
            .iter()
            .enumerate()
            .filter(|(_, &v)| (-25.0..=-5.0).contains(&v))
            .map(|(i, &v)| (i as f64 / fs, v))
            .collect();
        let n = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
        let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
        sxy / sxx
    }

    #[test]
    fn edc_slope_of_exponential_decay() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let fs = SAMPLE_RATE;
        let t60 = 0.5;
        let len = (0.6 * fs) as usize;
        let h: Vec<f64> = (0..len)
            .map(|t| {
                let env = (-(t as f64) * (1e6f64).ln() / (2.0 * t60 * fs)).exp();
                env * rng.gen_range(-1.0..1.0)
            })
            .collect();
        let slope = decay_slope(&schroeder_edc(&h).unwrap(), fs);
        assert!((slope - (-120.0)).abs() / 120.0 < 0.05, "slope {slope}");

        let mut shifted = vec![0.0; 500];
        shifted.extend_from_slice(&h);
        let slope2 = decay_slope(&schroeder_edc(&shifted).unwrap(), fs);
        assert!((slope - slope2).abs() < 1e-6 * slope.abs());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn dft_is_linear(
                x in proptest::collection::vec(-1.0f64..1.0, 1..200),
                a in -3.0f64..3.0,
                b in -3.0f64..3.0,
            ) {
                let g = SpectralGrid::default();
                let y: Vec<f64> = x.iter().rev().cloned().collect();
                let mix: Vec<f64> = x.iter().zip(&y).map(|(u, v)| a * u + b * v).collect();
                let fx = forward_dft(&x, &g).unwrap();
                let fy = forward_dft(&y, &g).unwrap();
                let fm = forward_dft(&mix, &g).unwrap();
                for k in 0..N_BINS {
                    let expect = fx.bins[k] * a + fy.bins[k] * b;
                    prop_assert!((fm.bins[k] - expect).norm() < 1e-10);
                }
            }

            #[test]
            fn roundtrip_any_length(x in proptest::collection::vec(-10.0f64..10.0, 1..FRAME_LEN)) {
                let g = SpectralGrid::default();
                let back = inverse_dft(&forward_dft(&x, &g).unwrap());
                for (t, v) in back.iter().enumerate() {
                    let expect = x.get(t).copied().unwrap_or(0.0);
                    prop_assert!((v - expect).abs() < 1e-10);
                }
            }

            #[test]
            fn edc_scale_invariant(
                x in proptest::collection::vec(-1.0f64..1.0, 2..300),
                s in 0.01f64..100.0,
            ) {
                prop_assume!(x.iter().any(|v| v.abs() > 1e-3));
                let scaled: Vec<f64> = x.iter().map(|v| v * s).collect();
                let a = schroeder_edc(&x).unwrap();
                let b = schroeder_edc(&scaled).unwrap();
                for (u, v) in a.iter().zip(&b) {
                    prop_assert!((u - v).abs() < 1e-9 || (*u <= -119.0 && *v <= -119.0));
                }
            }
        }
    }
}
