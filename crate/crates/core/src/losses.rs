//! The six-term training objective.
//!
//! Truth-side quantities are precomputed once per receiver in a [`Target`];
//! the predicted side is built on a tape so every term is differentiable.

use std::f64::consts::LN_10;

use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, ParamStore, Tape, Tensor, Var};
use crate::spectral::{backward_energy, rdft_into, stft, Complex};

/// STFT sizes of the multi-resolution term.
pub const STFT_SIZES: [usize; 3] = [512, 1024, 2048];
pub const STFT_EPS: f64 = 1e-7;
pub const EDC_EPS: f64 = 1e-8;
/// Predicted magnitudes below this are treated as this in the phase term.
const PHASE_FLOOR: f64 = 1e-300;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LossError {
    #[error("ground-truth RIR is all zeros")]
    SilentTruth,
    #[error("prediction has {pred} samples, truth has {truth}")]
    LengthMismatch { pred: usize, truth: usize },
    #[error("loss weights must be finite and nonnegative")]
    BadWeights,
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub spectral: f64,
    pub amplitude: f64,
    pub phase: f64,
    pub time: f64,
    pub mrstft: f64,
    pub edc: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            spectral: 1.0,
            amplitude: 0.5,
            phase: 0.5,
            time: 100.0,
            mrstft: 1.0,
            edc: 5.0,
        }
    }
}

impl LossWeights {
    pub fn as_array(&self) -> [f64; 6] {
        [
            self.spectral,
            self.amplitude,
            self.phase,
            self.time,
            self.mrstft,
            self.edc,
        ]
    }

    pub fn validate(&self) -> Result<(), LossError> {
        if self.as_array().iter().all(|w| w.is_finite() && *w >= 0.0) {
            Ok(())
        } else {
            Err(LossError::BadWeights)
        }
    }
}

/// Per-term values and their weighted sum.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub spectral: f64,
    pub amplitude: f64,
    pub phase: f64,
    pub time: f64,
    pub mrstft: f64,
    pub edc: f64,
    pub total: f64,
}

impl LossReport {
    pub fn terms(&self) -> [f64; 6] {
        [
            self.spectral,
            self.amplitude,
            self.phase,
            self.time,
            self.mrstft,
            self.edc,
        ]
    }

    pub fn accumulate(&mut self, other: &LossReport) {
        self.spectral += other.spectral;
        self.amplitude += other.amplitude;
        self.phase += other.phase;
        self.time += other.time;
        self.mrstft += other.mrstft;
        self.edc += other.edc;
        self.total += other.total;
    }

    pub fn scaled(&self, c: f64) -> LossReport {
        LossReport {
            spectral: self.spectral * c,
            amplitude: self.amplitude * c,
            phase: self.phase * c,
            time: self.time * c,
            mrstft: self.mrstft * c,
            edc: self.edc * c,
            total: self.total * c,
        }
    }
}

struct StftTarget {
    size: usize,
    magnitude: Tensor,
    log_magnitude: Tensor,
    frobenius: f64,
}

/// Truth-side constants for one ground-truth RIR.
pub struct Target {
    rir: Tensor,
    spectrum: Tensor,
    magnitude: Tensor,
    unit_conj: Tensor,
    phase_weight: Tensor,
    stfts: Vec<StftTarget>,
    log_energy: Tensor,
}

impl Target {
    pub fn new(truth: &[f64]) -> Result<Self, LossError> {
        if truth.iter().all(|&v| v == 0.0) {
            return Err(LossError::SilentTruth);
        }
        let n = truth.len();
        let bins = n / 2 + 1;
        let mut spec = vec![Complex::new(0.0, 0.0); bins];
        rdft_into(truth, n, &mut spec);
        let mags: Vec<f64> = spec.iter().map(|z| z.norm()).collect();
        let mag_sum: f64 = mags.iter().sum();
        let interleave = |f: &dyn Fn(&Complex) -> Complex| -> Tensor {
            Tensor::row(
                spec.iter()
                    .flat_map(|z| {
                        let w = f(z);
                        [w.re, w.im]
                    })
                    .collect(),
            )
        };
        let unit_conj = interleave(&|z| {
            let m = z.norm();
            if m > 0.0 {
                z.conj() / m
            } else {
                Complex::new(0.0, 0.0)
            }
        });
        let stfts = STFT_SIZES
            .iter()
            .map(|&size| {
                let s = stft(truth, size);
                let m: Vec<f64> = s.data.iter().map(|z| z.norm()).collect();
                StftTarget {
                    size,
                    frobenius: m.iter().map(|v| v * v).sum::<f64>().sqrt(),
                    log_magnitude: Tensor::from_vec(s.frames, s.bins, m.iter().map(|v| (v + STFT_EPS).ln()).collect()),
                    magnitude: Tensor::from_vec(s.frames, s.bins, m),
                }
            })
            .collect();
        Ok(Self {
            rir: Tensor::row(truth.to_vec()),
            spectrum: interleave(&|z| *z),
            phase_weight: Tensor::row(mags.iter().map(|m| m / mag_sum).collect()),
            magnitude: Tensor::row(mags),
            unit_conj,
            stfts,
            log_energy: Tensor::row(backward_energy(truth).iter().map(|e| (e + EDC_EPS).log10()).collect()),
        })
    }

    pub fn len(&self) -> usize {
        self.rir.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.rir.cols() == 0
    }
}

/// Tape nodes of each term (unweighted) and of the weighted total.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub terms: [Var; 6],
    pub total: Var,
}

impl LossVars {
    pub fn report(&self, tape: &Tape) -> LossReport {
        let t = self.terms.map(|v| tape.value(v).item());
        LossReport {
            spectral: t[0],
            amplitude: t[1],
            phase: t[2],
            time: t[3],
            mrstft: t[4],
            edc: t[5],
            total: tape.value(self.total).item(),
        }
    }
}

fn mean_abs_diff(tape: &mut Tape, a: Var, b: Var, count: f64) -> Result<Var, AutodiffError> {
    let d = tape.sub(a, b)?;
    let d = tape.abs(d);
    let s = tape.sum(d);
    Ok(tape.scale(s, 1.0 / count))
}

/// Builds all six terms for a `1 x n` predicted RIR.
pub fn loss_on_tape(tape: &mut Tape, pred: Var, target: &Target, w: &LossWeights) -> Result<LossVars, LossError> {
    let n = target.len();
    let (rows, cols) = tape.value(pred).shape();
    if rows != 1 || cols != n {
        return Err(LossError::LengthMismatch {
            pred: rows * cols,
            truth: n,
        });
    }
    let bins = (n / 2 + 1) as f64;

    let truth = tape.constant(target.rir.clone());
    let time = mean_abs_diff(tape, pred, truth, n as f64)?;

    let spec = tape.rdft(pred, n)?;
    let truth_spec = tape.constant(target.spectrum.clone());
    let spectral = mean_abs_diff(tape, spec, truth_spec, bins)?;

    let mag = tape.complex_abs(spec)?;
    let truth_mag = tape.constant(target.magnitude.clone());
    let amplitude = mean_abs_diff(tape, mag, truth_mag, bins)?;

    // sum_k w_k (1 - cos(angle difference)); weights sum to one.
    let u = tape.constant(target.unit_conj.clone());
    let rotated = tape.complex_mul(spec, u)?;
    let re = tape.complex_part(rotated, false)?;
    let safe_mag = tape.clamp_min(mag, PHASE_FLOOR);
    let inv_mag = tape.recip(safe_mag);
    let cos = tape.mul(re, inv_mag)?;
    let one_minus = tape.scale(cos, -1.0);
    let one_minus = tape.offset(one_minus, 1.0);
    let weights = tape.constant(target.phase_weight.clone());
    let weighted = tape.mul(one_minus, weights)?;
    let phase = tape.sum(weighted);

    let mut mrstft: Option<Var> = None;
    for st in &target.stfts {
        let s = tape.stft(pred, st.size)?;
        let m = tape.complex_abs(s)?;
        let tm = tape.constant(st.magnitude.clone());
        let diff = tape.sub(m, tm)?;
        let sq = tape.square(diff);
        let sq = tape.sum(sq);
        let fro = tape.sqrt(sq);
        let convergence = tape.scale(fro, 1.0 / st.frobenius);
        let lm = tape.offset(m, STFT_EPS);
        let lm = tape.log(lm);
        let tlm = tape.constant(st.log_magnitude.clone());
        let count = st.magnitude.len() as f64;
        let log_term = mean_abs_diff(tape, lm, tlm, count)?;
        let term = tape.add(convergence, log_term)?;
        mrstft = Some(match mrstft {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    let mrstft = mrstft.expect("at least one STFT size");

    let energy = tape.square(pred);
    let energy = tape.suffix_sum(energy);
    let energy = tape.offset(energy, EDC_EPS);
    let log_e = tape.log(energy);
    let log_e = tape.scale(log_e, 1.0 / LN_10);
    let truth_log_e = tape.constant(target.log_energy.clone());
    let edc = mean_abs_diff(tape, log_e, truth_log_e, n as f64)?;

    let terms = [spectral, amplitude, phase, time, mrstft, edc];
    let mut total: Option<Var> = None;
    for (&t, &wi) in terms.iter().zip(&w.as_array()) {
        let s = tape.scale(t, wi);
        total = Some(match total {
            Some(acc) => tape.add(acc, s)?,
            None => s,
        });
    }
    Ok(LossVars {
        terms,
        total: total.expect("six terms"),
    })
}

/// Evaluates the objective for plain signals.
pub fn total_loss(pred: &[f64], truth: &[f64], w: &LossWeights) -> Result<LossReport, LossError> {
    w.validate()?;
    if pred.len() != truth.len() {
        return Err(LossError::LengthMismatch {
            pred: pred.len(),
            truth: truth.len(),
        });
    }
    let target = Target::new(truth)?;
    let mut tape = Tape::new();
    let p = tape.constant(Tensor::row(pred.to_vec()));
    Ok(loss_on_tape(&mut tape, p, &target, w)?.report(&tape))
}

/// Gradient of the weighted total with respect to the predicted samples.
pub fn loss_gradient(pred: &[f64], truth: &[f64], w: &LossWeights) -> Result<(LossReport, Vec<f64>), LossError> {
    let target = Target::new(truth)?;
    let mut tape = Tape::new();
    let p = tape.input(Tensor::row(pred.to_vec()));
    let vars = loss_on_tape(&mut tape, p, &target, w)?;
    let grads = tape.backward(vars.total, &mut ParamStore::new())?;
    let g = grads
        .get(p)
        .map(|t| t.data().to_vec())
        .unwrap_or_else(|| vec![0.0; pred.len()]);
    Ok((vars.report(&tape), g))
}
