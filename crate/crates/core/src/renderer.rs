//! Frequency-domain superposition of delayed, attenuated, directional poles.

use rustfft::num_complex::Complex64;

use crate::autodiff::{accumulate_pole_term, AutodiffError, PoleSumConfig, Tape, Tensor, Var};
use crate::model::{DirectivityCoeffs, EmittedSignal, NamsModel, SIGNAL_LEN};
use crate::spectral::{irdft_into, rdft_into, SpectralGrid};
use crate::spherical::{norm, real_sh_cartesian, real_sph_harm, sub, AngularPosition, ShIndex, Vec3, R_MIN};

pub const SPEED_OF_SOUND: f64 = 343.0;
/// Poles farther than this from a receiver would wrap around the frame.
pub const MAX_RANGE: f64 = SPEED_OF_SOUND * 0.1;
/// Added to the directivity norm so silent poles stay finite.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RenderError {
    #[error("no alive poles to render")]
    NoAlivePoles,
    #[error("{signals} signals and {coeffs} coefficient sets for {poles} poles")]
    CountMismatch {
        poles: usize,
        signals: usize,
        coeffs: usize,
    },
    #[error("band {band} Hz is outside (0, {nyquist}] Hz")]
    BandOutOfRange { band: f64, nyquist: f64 },
    #[error("band {0} Hz contains no frequency bins")]
    EmptyBand(f64),
    #[error("map resolution must be at least 2, got {0}")]
    BadResolution(usize),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// A rendered room impulse response.
#[derive(Debug, Clone, PartialEq)]
pub struct RirSignal {
    pub samples: Vec<f64>,
    pub receiver: Vec3,
    pub source: Vec3,
}

/// Rows of `positions` within [`MAX_RANGE`] of `receiver`.
pub fn in_range(positions: &[Vec3], receiver: &Vec3) -> Vec<usize> {
    (0..positions.len())
        .filter(|&i| norm(&sub(&positions[i], receiver)) <= MAX_RANGE)
        .collect()
}

/// Unit-norm directivity spectrum of one pole seen from `dir`.
pub fn directivity_response(coeffs: &DirectivityCoeffs, dir: &AngularPosition, grid: &SpectralGrid) -> Vec<Complex64> {
    let mut d = vec![0.0; SIGNAL_LEN];
    for c in 0..coeffs.channels {
        let y = real_sph_harm(ShIndex::from_flat(c), dir);
        for (o, b) in d.iter_mut().zip(coeffs.channel(c)) {
            *o += y * b;
        }
    }
    let mut spec = vec![Complex64::new(0.0, 0.0); grid.n_bins()];
    rdft_into(&d, grid.frame_len(), &mut spec);
    normalize(&mut spec);
    spec
}

fn normalize(spec: &mut [Complex64]) {
    let n = spec.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
    let inv = 1.0 / (n + NORM_EPS);
    spec.iter_mut().for_each(|z| *z *= inv);
}

fn unit(v: &Vec3) -> Vec3 {
    let n = norm(v).max(1e-300);
    [v[0] / n, v[1] / n, v[2] / n]
}

fn pole_sum_config(grid: &SpectralGrid) -> PoleSumConfig {
    PoleSumConfig {
        df: grid.sample_rate() / grid.frame_len() as f64,
        speed: SPEED_OF_SOUND,
        r_min: R_MIN,
        eps: NORM_EPS,
    }
}

fn interleave(z: &[Complex64]) -> Vec<f64> {
    z.iter().flat_map(|c| [c.re, c.im]).collect()
}

fn deinterleave(v: &[f64]) -> Vec<Complex64> {
    v.chunks_exact(2).map(|c| Complex64::new(c[0], c[1])).collect()
}

/// Adds one pole's contribution `S * D * exp(-j 2 pi f r / c) / max(r, r_min)`
/// to the interleaved spectrum `h`.
fn accumulate_pole(
    h: &mut [f64],
    spectrum: &[f64],
    d_time: &[f64],
    r: f64,
    grid: &SpectralGrid,
    scratch: &mut Vec<Complex64>,
) {
    scratch.resize(grid.n_bins(), Complex64::new(0.0, 0.0));
    rdft_into(d_time, grid.frame_len(), scratch);
    let mut phasor = vec![0.0; h.len()];
    accumulate_pole_term(h, spectrum, scratch, r, &pole_sum_config(grid), &mut phasor);
}

fn mix_channels(order_channels: usize, dir: &Vec3, coeffs: &[f64]) -> Vec<f64> {
    let mut y = [0.0; 16];
    let order = (order_channels as f64).sqrt() as usize - 1;
    real_sh_cartesian(order, dir, &mut y, None);
    let mut d = vec![0.0; SIGNAL_LEN];
    for (c, &yc) in y.iter().enumerate().take(order_channels) {
        for (o, b) in d.iter_mut().zip(&coeffs[c * SIGNAL_LEN..(c + 1) * SIGNAL_LEN]) {
            *o += yc * b;
        }
    }
    d
}

/// Renders explicit per-pole signals and coefficients at `receiver`.
pub fn synthesize_rir(
    positions: &[Vec3],
    signals: &[EmittedSignal],
    coeffs: &[DirectivityCoeffs],
    receiver: &Vec3,
    source: &Vec3,
    grid: &SpectralGrid,
) -> Result<RirSignal, RenderError> {
    if positions.is_empty() {
        return Err(RenderError::NoAlivePoles);
    }
    if signals.len() != positions.len() || coeffs.len() != positions.len() {
        return Err(RenderError::CountMismatch {
            poles: positions.len(),
            signals: signals.len(),
            coeffs: coeffs.len(),
        });
    }
    let mut h = vec![0.0; 2 * grid.n_bins()];
    let mut spec = vec![Complex64::new(0.0, 0.0); grid.n_bins()];
    let mut scratch = Vec::new();
    for p in in_range(positions, receiver) {
        let diff = sub(&positions[p], receiver);
        rdft_into(&signals[p].0, grid.frame_len(), &mut spec);
        let d = mix_channels(coeffs[p].channels, &unit(&diff), &coeffs[p].data);
        accumulate_pole(&mut h, &interleave(&spec), &d, norm(&diff), grid, &mut scratch);
    }
    Ok(rir_from_spectrum(&deinterleave(&h), receiver, source, grid))
}

fn rir_from_spectrum(h: &[Complex64], receiver: &Vec3, source: &Vec3, grid: &SpectralGrid) -> RirSignal {
    let mut samples = vec![0.0; grid.frame_len()];
    irdft_into(h, grid.frame_len(), &mut samples);
    RirSignal {
        samples,
        receiver: *receiver,
        source: *source,
    }
}

/// Inference renderer. Emitted signals do not depend on the receiver, so
/// their spectra are computed once.
#[derive(Debug, Clone)]
pub struct Renderer<'a> {
    model: &'a NamsModel,
    positions: Vec<Vec3>,
    /// Interleaved one-sided spectra of the emitted signals.
    spectra: Vec<Vec<f64>>,
    grid: SpectralGrid,
}

impl<'a> Renderer<'a> {
    pub fn new(model: &'a NamsModel) -> Self {
        let grid = SpectralGrid::default();
        let spectra = model
            .emitted_signals()
            .iter()
            .map(|s| {
                let mut spec = vec![Complex64::new(0.0, 0.0); grid.n_bins()];
                rdft_into(&s.0, grid.frame_len(), &mut spec);
                interleave(&spec)
            })
            .collect();
        Self {
            model,
            positions: model.pole_positions(),
            spectra,
            grid,
        }
    }

    pub fn grid(&self) -> &SpectralGrid {
        &self.grid
    }

    /// One-sided transfer function `H(f_k)` at `receiver`.
    pub fn transfer_function(&self, receiver: &Vec3) -> Vec<Complex64> {
        let mut h = vec![0.0; 2 * self.grid.n_bins()];
        let rows = in_range(&self.positions, receiver);
        if rows.is_empty() {
            return deinterleave(&h);
        }
        let pos: Vec<Vec<f64>> = rows.iter().map(|&i| self.positions[i].to_vec()).collect();
        let mut tape = Tape::new();
        let pv = tape.constant(Tensor::from_rows(&pos));
        let b = self
            .model
            .directivity_head_at(&mut tape, pv, receiver)
            .expect("model shapes are consistent by construction");
        let coeffs = tape.value(b);
        let channels = self.model.config.channels();
        let mut scratch = Vec::new();
        for (row, &p) in rows.iter().enumerate() {
            let diff = sub(&self.positions[p], receiver);
            let d = mix_channels(channels, &unit(&diff), coeffs.row_slice(row));
            accumulate_pole(&mut h, &self.spectra[p], &d, norm(&diff), &self.grid, &mut scratch);
        }
        deinterleave(&h)
    }

    pub fn render(&self, receiver: &Vec3) -> RirSignal {
        let h = self.transfer_function(receiver);
        rir_from_spectrum(&h, receiver, &self.model.source(), &self.grid)
    }
}

/// Tape nodes of one differentiable render.
#[derive(Debug, Clone, Copy)]
pub struct RenderVars {
    /// `1 x 2*bins` interleaved transfer function.
    pub spectrum: Var,
    /// `1 x frame_len` impulse response.
    pub rir: Var,
}

/// Differentiable render. `spectra` holds the interleaved signal spectra
/// (`P x 2*bins`) and `positions` the matching `P x 3` pole positions.
pub fn render_on_tape(
    tape: &mut Tape,
    model: &NamsModel,
    spectra: Var,
    positions: Var,
    receiver: &Vec3,
    grid: &SpectralGrid,
) -> Result<RenderVars, RenderError> {
    let n = grid.frame_len();
    let bins = grid.n_bins();
    let pos_value = tape.value(positions);
    let pts: Vec<Vec3> = (0..pos_value.rows())
        .map(|i| {
            let r = pos_value.row_slice(i);
            [r[0], r[1], r[2]]
        })
        .collect();
    if pts.is_empty() {
        return Err(RenderError::NoAlivePoles);
    }
    let rows = in_range(&pts, receiver);
    if rows.is_empty() {
        let spectrum = tape.constant(Tensor::zeros(1, 2 * bins));
        let rir = tape.irdft(spectrum, n)?;
        return Ok(RenderVars { spectrum, rir });
    }
    let pos = tape.gather_rows(positions, &rows)?;
    let neg_r = tape.constant(Tensor::row(receiver.iter().map(|v| -v).collect()));
    let diff = tape.add_row(pos, neg_r)?;
    let r = tape.row_norm(diff);
    let r_safe = tape.clamp_min(r, 1e-300);
    let inv_r = tape.recip(r_safe);
    let dir = tape.scale_rows(diff, inv_r)?;
    let y = tape.real_sh(dir, model.config.sh_order)?;
    let b = model.directivity_head_at(tape, pos, receiver)?;
    let d_time = tape.channel_mix(y, b)?;
    let spectrum = tape.pole_sum(spectra, &rows, d_time, r, pole_sum_config(grid))?;
    let rir = tape.irdft(spectrum, n)?;
    Ok(RenderVars { spectrum, rir })
}

/// An axis-aligned rectangle at a fixed coordinate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Plane {
    /// Index (0, 1, 2) of the held-fixed axis.
    pub axis: usize,
    pub offset: f64,
    /// Corners in the two free axes, in increasing axis order.
    pub min: [f64; 2],
    pub max: [f64; 2],
}

impl Plane {
    fn point(&self, u: f64, v: f64) -> Vec3 {
        let mut p = [0.0; 3];
        let free: Vec<usize> = (0..3).filter(|&a| a != self.axis).collect();
        p[self.axis] = self.offset;
        p[free[0]] = u;
        p[free[1]] = v;
        p
    }
}

/// Band-averaged magnitudes on a `resolution x resolution` grid; row `j`
/// holds the points at the `j`-th value of the second free axis.
#[derive(Debug, Clone, PartialEq)]
pub struct MagnitudeMap {
    pub resolution: usize,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub values: Vec<f64>,
}

impl MagnitudeMap {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[j * self.resolution + i]
    }
}

/// Bin indices of the 1/3-octave band centered at `band` Hz.
pub fn third_octave_bins(band: f64, grid: &SpectralGrid) -> Result<std::ops::RangeInclusive<usize>, RenderError> {
    let nyquist = grid.sample_rate() / 2.0;
    if !(band > 0.0 && band <= nyquist) {
        return Err(RenderError::BandOutOfRange { band, nyquist });
    }
    let edge = 2f64.powf(1.0 / 6.0);
    let df = grid.sample_rate() / grid.frame_len() as f64;
    let lo = (band / edge / df).ceil() as usize;
    let hi = ((band * edge / df).floor() as usize).min(grid.n_bins() - 1);
    if lo > hi {
        return Err(RenderError::EmptyBand(band));
    }
    Ok(lo..=hi)
}

fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect()
}

/// Mean `|H(f_k)|` over a 1/3-octave band at every grid point of `plane`.
pub fn spatial_magnitude_map(
    model: &NamsModel,
    plane: &Plane,
    resolution: usize,
    band: f64,
) -> Result<MagnitudeMap, RenderError> {
    let renderer = Renderer::new(model);
    let bins = third_octave_bins(band, renderer.grid())?;
    if resolution < 2 {
        return Err(RenderError::BadResolution(resolution));
    }
    let u = linspace(plane.min[0], plane.max[0], resolution);
    let v = linspace(plane.min[1], plane.max[1], resolution);
    let count = (bins.end() - bins.start() + 1) as f64;
    let mut values = Vec::with_capacity(resolution * resolution);
    for &vj in &v {
        for &ui in &u {
            let h = renderer.transfer_function(&plane.point(ui, vj));
            values.push(h[bins.clone()].iter().map(|z| z.norm()).sum::<f64>() / count);
        }
    }
    Ok(MagnitudeMap {
        resolution,
        u,
        v,
        values,
    })
}
