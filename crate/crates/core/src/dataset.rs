//! RIR corpora: an image-source shoebox generator, WAV + manifest I/O,
//! resampling and the train/test split.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::renderer::{RirSignal, SPEED_OF_SOUND};
use crate::spectral::{irdft_into, SpectralGrid, FRAME_LEN, SAMPLE_RATE};
use crate::spherical::{norm, sub, Vec3};

/// Minimum number of entries that can be split 9:1.
pub const MIN_SPLIT_ENTRIES: usize = 10;
/// Taps of the resampling kernel at the lower of the two rates.
pub const RESAMPLE_TAPS: usize = 64;
const KAISER_BETA: f64 = 8.0;

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: unreadable WAV: {detail}")]
    Wav { path: PathBuf, detail: String },
    #[error("{path}: bad manifest: {detail}")]
    Manifest { path: PathBuf, detail: String },
    #[error("entry {index} ({path}): source {found:?} differs from corpus source {expected:?}")]
    InconsistentSource {
        index: usize,
        path: PathBuf,
        found: Vec3,
        expected: Vec3,
    },
    #[error("{} problems loading corpus:\n{}", .0.len(), .0.iter().map(|e| e.to_string()).collect::<Vec<_>>().join("\n"))]
    Many(Vec<DatasetError>),
    #[error("source and receiver coincide")]
    SourceAtReceiver,
    #[error("invalid shoebox: {0}")]
    InvalidSpec(String),
    #[error("need at least {MIN_SPLIT_ENTRIES} entries to split, got {0}")]
    TooFewEntries(usize),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Rectangular room with frequency-independent wall reflection coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Room {
    pub dims: Vec3,
    /// Faces in order x=0, x=Lx, y=0, y=Ly, z=0, z=Lz.
    pub beta: [f64; 6],
}

impl Room {
    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|i| p[i] > 0.0 && p[i] < self.dims[i])
    }

    pub fn volume(&self) -> f64 {
        self.dims.iter().product()
    }

    pub fn surface(&self) -> f64 {
        let [x, y, z] = self.dims;
        2.0 * (x * y + x * z + y * z)
    }
}

/// Uniform reflection coefficient giving reverberation time `t60` by
/// Eyring's formula, with energy absorption `1 - beta^2`.
pub fn eyring_beta(dims: &Vec3, t60: f64) -> f64 {
    let room = Room {
        dims: *dims,
        beta: [0.0; 6],
    };
    let neg_ln = 24.0 * 10f64.ln() * room.volume() / (SPEED_OF_SOUND * room.surface() * t60);
    (-neg_ln / 2.0).exp()
}

/// Eyring reverberation time of a room with uniform `beta`.
pub fn eyring_t60(dims: &Vec3, beta: f64) -> f64 {
    let room = Room {
        dims: *dims,
        beta: [beta; 6],
    };
    24.0 * 10f64.ln() * room.volume() / (SPEED_OF_SOUND * room.surface() * -(beta * beta).ln())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShoeboxSpec {
    pub room: Room,
    /// Maximum total reflection order of an image.
    pub max_order: usize,
    pub source: Vec3,
    pub receiver: Vec3,
    /// Cutoff of the DC-removing high-pass, if any.
    pub highpass_hz: Option<f64>,
}

/// Cutoff used for generated scenes.
pub const HIGHPASS_HZ: f64 = 100.0;

/// Frequency response at bin `k` of an `n`-point frame of the second-order
/// DC-blocking high-pass of Allen and Berkley.
pub fn highpass_response(k: usize, n: usize, sample_rate: f64, cutoff: f64) -> Complex64 {
    let w = 2.0 * PI * cutoff / sample_rate;
    let r1 = (-w).exp();
    let (b1, b2, a1) = (2.0 * r1 * w.cos(), -r1 * r1, -(1.0 + r1));
    let zi = Complex64::from_polar(1.0, -2.0 * PI * k as f64 / n as f64);
    (1.0 + a1 * zi + r1 * zi * zi) / (1.0 - b1 * zi - b2 * zi * zi)
}

impl ShoeboxSpec {
    fn validate(&self) -> Result<(), DatasetError> {
        if self.room.dims.iter().any(|&d| !(d > 0.0)) {
            return Err(DatasetError::InvalidSpec(format!("dimensions {:?}", self.room.dims)));
        }
        if self.room.beta.iter().any(|&b| !(0.0..1.0).contains(&b)) {
            return Err(DatasetError::InvalidSpec(format!(
                "reflection coefficients {:?}",
                self.room.beta
            )));
        }
        if !self.room.contains(&self.source) || !self.room.contains(&self.receiver) {
            return Err(DatasetError::InvalidSpec(
                "source and receiver must lie inside the room".into(),
            ));
        }
        if norm(&sub(&self.source, &self.receiver)) == 0.0 {
            return Err(DatasetError::SourceAtReceiver);
        }
        Ok(())
    }
}

/// One mirror image: distance to the receiver and amplitude.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Image {
    pub distance: f64,
    pub amplitude: f64,
    pub order: usize,
}

/// Images with reflection order at most `max_order` within `max_distance`.
pub fn images(spec: &ShoeboxSpec, max_distance: f64) -> Vec<Image> {
    let mut out = Vec::new();
    let l = spec.room.dims;
    let bound = |i: usize| -> i64 {
        let geometric = (max_distance / (2.0 * l[i])).ceil() as i64 + 1;
        geometric.min(spec.max_order as i64)
    };
    let (bx, by, bz) = (bound(0), bound(1), bound(2));
    for parity in 0..8u32 {
        let p = [
            (parity & 1) as i64,
            ((parity >> 1) & 1) as i64,
            ((parity >> 2) & 1) as i64,
        ];
        for nx in -bx..=bx {
            for ny in -by..=by {
                for nz in -bz..=bz {
                    let n = [nx, ny, nz];
                    let mut order = 0usize;
                    let mut amp = 1.0;
                    let mut d2 = 0.0;
                    for i in 0..3 {
                        let low = (n[i] - p[i]).unsigned_abs() as usize;
                        let high = n[i].unsigned_abs() as usize;
                        order += low + high;
                        amp *= spec.room.beta[2 * i].powi(low as i32) * spec.room.beta[2 * i + 1].powi(high as i32);
                        let x = (1 - 2 * p[i]) as f64 * spec.source[i] + 2.0 * n[i] as f64 * l[i];
                        d2 += (x - spec.receiver[i]).powi(2);
                    }
                    let r = d2.sqrt();
                    if order <= spec.max_order && r <= max_distance {
                        out.push(Image {
                            distance: r,
                            amplitude: amp / r,
                            order,
                        });
                    }
                }
            }
        }
    }
    out
}

/// Image-source impulse response, synthesized on `grid` as a sum of
/// delayed 1/r impulses. Images that would wrap past the frame are dropped.
/// All images are positive, so without the high-pass the response carries
/// a slowly decaying low-frequency drift.
pub fn image_source_rir(spec: &ShoeboxSpec, grid: &SpectralGrid) -> Result<RirSignal, DatasetError> {
    spec.validate()?;
    let n = grid.frame_len();
    let max_distance = SPEED_OF_SOUND * n as f64 / grid.sample_rate();
    let df = grid.sample_rate() / n as f64;
    let mut h = vec![Complex64::new(0.0, 0.0); grid.n_bins()];
    let mut phasor = vec![0.0; 2 * grid.n_bins()];
    for img in images(spec, max_distance) {
        crate::autodiff::fill_phasor(&mut phasor, 2.0 * PI * df * img.distance / SPEED_OF_SOUND);
        for (hk, p) in h.iter_mut().zip(phasor.chunks_exact(2)) {
            *hk += Complex64::new(p[0], p[1]) * img.amplitude;
        }
    }
    if let Some(fc) = spec.highpass_hz {
        for (k, hk) in h.iter_mut().enumerate() {
            *hk *= highpass_response(k, n, grid.sample_rate(), fc);
        }
    }
    let mut samples = vec![0.0; n];
    irdft_into(&h, n, &mut samples);
    Ok(RirSignal {
        samples,
        receiver: spec.receiver,
        source: spec.source,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusEntry {
    pub receiver: Vec3,
    pub waveform: Vec<f64>,
}

/// Measured or simulated RIRs sharing one source, all at the same rate and length.
#[derive(Debug, Clone, PartialEq)]
pub struct RirCorpus {
    pub entries: Vec<CorpusEntry>,
    pub source: Vec3,
    pub sample_rate: f64,
    pub room: Option<Room>,
}

impl RirCorpus {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn receivers(&self) -> Vec<Vec3> {
        self.entries.iter().map(|e| e.receiver).collect()
    }

    fn subset(&self, idx: &[usize]) -> RirCorpus {
        RirCorpus {
            entries: idx.iter().map(|&i| self.entries[i].clone()).collect(),
            source: self.source,
            sample_rate: self.sample_rate,
            room: self.room,
        }
    }
}

/// Settings for the synthetic shoebox scene.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub dims: Vec3,
    pub t60: f64,
    pub source: Vec3,
    pub receivers: usize,
    pub wall_clearance: f64,
    pub max_order: usize,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            dims: [6.0, 4.0, 3.0],
            t60: 0.3,
            source: [1.5, 1.0, 1.4],
            receivers: 200,
            wall_clearance: 0.3,
            max_order: 32,
            seed: 0,
        }
    }
}

/// Simulates a corpus of receivers drawn uniformly inside the room,
/// keeping `wall_clearance` from every wall.
pub fn generate_scene(cfg: &SceneConfig) -> Result<RirCorpus, DatasetError> {
    if cfg.dims.iter().any(|&d| d <= 2.0 * cfg.wall_clearance) {
        return Err(DatasetError::InvalidSpec(
            "room too small for the wall clearance".into(),
        ));
    }
    if !(cfg.t60 > 0.0) {
        return Err(DatasetError::InvalidSpec(format!("t60 {}", cfg.t60)));
    }
    let room = Room {
        dims: cfg.dims,
        beta: [eyring_beta(&cfg.dims, cfg.t60); 6],
    };
    let grid = SpectralGrid::default();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut entries = Vec::with_capacity(cfg.receivers);
    for _ in 0..cfg.receivers {
        let receiver = [0, 1, 2].map(|i| rng.gen_range(cfg.wall_clearance..cfg.dims[i] - cfg.wall_clearance));
        let spec = ShoeboxSpec {
            room,
            max_order: cfg.max_order,
            source: cfg.source,
            receiver,
            highpass_hz: Some(HIGHPASS_HZ),
        };
        let rir = image_source_rir(&spec, &grid)?;
        entries.push(CorpusEntry {
            receiver,
            waveform: rir.samples,
        });
    }
    Ok(RirCorpus {
        entries,
        source: cfg.source,
        sample_rate: SAMPLE_RATE,
        room: Some(room),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestEntry {
    receiver: Vec3,
    path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    source: Option<Vec3>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    sample_rate: f64,
    source: Vec3,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    room: Option<Room>,
    entries: Vec<ManifestEntry>,
}

pub fn write_wav(path: &Path, samples: &[f64], sample_rate: u32) -> Result<(), DatasetError> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let wav_err = |e: hound::Error| DatasetError::Wav {
        path: path.to_path_buf(),
        detail: e.to_string(),
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(wav_err)?;
    for &s in samples {
        w.write_sample(s as f32).map_err(wav_err)?;
    }
    w.finalize().map_err(wav_err)
}

/// Mono samples and their rate. Integer formats are scaled to [-1, 1).
pub fn read_wav(path: &Path) -> Result<(Vec<f64>, u32), DatasetError> {
    let wav_err = |detail: String| DatasetError::Wav {
        path: path.to_path_buf(),
        detail,
    };
    let reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(source) => DatasetError::Io {
            path: path.to_path_buf(),
            source,
        },
        other => wav_err(other.to_string()),
    })?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(wav_err(format!("{} channels, expected mono", spec.channels)));
    }
    let samples: Result<Vec<f64>, hound::Error> = match spec.sample_format {
        hound::SampleFormat::Float => reader.into_samples::<f32>().map(|s| s.map(f64::from)).collect(),
        hound::SampleFormat::Int => {
            let scale = 2f64.powi(spec.bits_per_sample as i32 - 1);
            reader
                .into_samples::<i32>()
                .map(|s| s.map(|v| v as f64 / scale))
                .collect()
        }
    };
    Ok((samples.map_err(|e| wav_err(e.to_string()))?, spec.sample_rate))
}

/// Writes `manifest.toml` and one WAV per entry under `dir`.
pub fn write_corpus(corpus: &RirCorpus, dir: &Path) -> Result<PathBuf, DatasetError> {
    let wav_dir = dir.join("wav");
    fs::create_dir_all(&wav_dir).map_err(io_err(&wav_dir))?;
    let mut entries = Vec::with_capacity(corpus.len());
    for (i, e) in corpus.entries.iter().enumerate() {
        let rel = PathBuf::from("wav").join(format!("rir_{i:04}.wav"));
        write_wav(&dir.join(&rel), &e.waveform, corpus.sample_rate as u32)?;
        entries.push(ManifestEntry {
            receiver: e.receiver,
            path: rel,
            source: None,
        });
    }
    let manifest = Manifest {
        sample_rate: corpus.sample_rate,
        source: corpus.source,
        room: corpus.room,
        entries,
    };
    let path = dir.join("manifest.toml");
    let text = toml::to_string_pretty(&manifest).map_err(|e| DatasetError::Manifest {
        path: path.clone(),
        detail: e.to_string(),
    })?;
    fs::write(&path, text).map_err(io_err(&path))?;
    Ok(path)
}

/// Reads a manifest and its WAVs, resampling to 24 kHz and trimming or
/// zero-padding to the analysis frame. Problems are collected per entry.
pub fn load_corpus(manifest_path: &Path) -> Result<RirCorpus, DatasetError> {
    let text = fs::read_to_string(manifest_path).map_err(io_err(manifest_path))?;
    let manifest: Manifest = toml::from_str(&text).map_err(|e| DatasetError::Manifest {
        path: manifest_path.to_path_buf(),
        detail: e.to_string(),
    })?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let mut problems = Vec::new();
    let mut entries = Vec::with_capacity(manifest.entries.len());
    for (index, e) in manifest.entries.iter().enumerate() {
        let path = base.join(&e.path);
        if let Some(found) = e.source {
            if found != manifest.source {
                problems.push(DatasetError::InconsistentSource {
                    index,
                    path,
                    found,
                    expected: manifest.source,
                });
                continue;
            }
        }
        match read_wav(&path) {
            Ok((samples, rate)) => {
                let mut waveform = resample(&samples, rate as f64, SAMPLE_RATE);
                waveform.resize(FRAME_LEN, 0.0);
                entries.push(CorpusEntry {
                    receiver: e.receiver,
                    waveform,
                });
            }
            Err(err) => problems.push(err),
        }
    }
    match problems.len() {
        0 => Ok(RirCorpus {
            entries,
            source: manifest.source,
            sample_rate: SAMPLE_RATE,
            room: manifest.room,
        }),
        1 => Err(problems.pop().expect("one problem")),
        _ => Err(DatasetError::Many(problems)),
    }
}

fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    for k in 1..64 {
        term *= (x / (2.0 * k as f64)).powi(2);
        sum += term;
        if term < 1e-17 * sum {
            break;
        }
    }
    sum
}

/// Kaiser-windowed sinc resampling. The kernel spans [`RESAMPLE_TAPS`]
/// samples at the lower rate and cuts off at its Nyquist frequency.
pub fn resample(signal: &[f64], from: f64, to: f64) -> Vec<f64> {
    if from == to {
        return signal.to_vec();
    }
    let cutoff = (to / from).min(1.0);
    let half_width = RESAMPLE_TAPS as f64 / 2.0 / cutoff;
    let out_len = (signal.len() as f64 * to / from).round() as usize;
    let norm_i0 = bessel_i0(KAISER_BETA);
    (0..out_len)
        .map(|m| {
            let t = m as f64 * from / to;
            let lo = (t - half_width).ceil().max(0.0) as usize;
            let hi = ((t + half_width).floor() as usize).min(signal.len().saturating_sub(1));
            (lo..=hi)
                .map(|n| {
                    let x = t - n as f64;
                    let arg = PI * cutoff * x;
                    let sinc = if x == 0.0 { 1.0 } else { arg.sin() / arg };
                    let ratio = x / half_width;
                    let w = bessel_i0(KAISER_BETA * (1.0 - ratio * ratio).max(0.0).sqrt()) / norm_i0;
                    signal[n] * cutoff * sinc * w
                })
                .sum()
        })
        .collect()
}

/// Seeded 9:1 split into (train, test).
pub fn split(corpus: &RirCorpus, seed: u64) -> Result<(RirCorpus, RirCorpus), DatasetError> {
    let n = corpus.len();
    if n < MIN_SPLIT_ENTRIES {
        return Err(DatasetError::TooFewEntries(n));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = n * 9 / 10;
    Ok((corpus.subset(&idx[..n_train]), corpus.subset(&idx[n_train..])))
}
