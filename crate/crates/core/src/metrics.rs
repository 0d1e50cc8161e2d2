//! Evaluation metrics between a predicted and a ground-truth RIR.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::spectral::{hilbert_envelope, rdft_into, schroeder_edc, Complex, SpectralError};

/// Ratio bounds applied before taking the C50 logarithm.
pub const C50_CLAMP: (f64, f64) = (1e-12, 1e12);
/// T60 is fit on the Schroeder curve between these levels (dB).
pub const T60_FIT_DB: (f64, f64) = (-5.0, -25.0);
/// EDT is fit between the onset and this level (dB).
pub const EDT_FIT_DB: f64 = -10.0;
/// The onset is the first sample reaching this fraction of peak energy.
pub const ONSET_FRACTION: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricError {
    #[error("ground truth is all zeros")]
    ZeroTruth,
    #[error("prediction has {pred} samples, truth has {truth}")]
    LengthMismatch { pred: usize, truth: usize },
    #[error("decay never reaches {0} dB")]
    NoDecay(f64),
    #[error(transparent)]
    Spectral(#[from] SpectralError),
}

fn check_pair(pred: &[f64], truth: &[f64]) -> Result<(), MetricError> {
    if pred.len() != truth.len() {
        return Err(MetricError::LengthMismatch {
            pred: pred.len(),
            truth: truth.len(),
        });
    }
    if truth.iter().all(|&v| v == 0.0) {
        return Err(MetricError::ZeroTruth);
    }
    Ok(())
}

fn spectrum(x: &[f64]) -> Vec<Complex> {
    let n = x.len() + x.len() % 2;
    let mut out = vec![Complex::new(0.0, 0.0); n / 2 + 1];
    rdft_into(x, n, &mut out);
    out
}

/// Mean absolute wrapped phase difference over all one-sided bins.
pub fn phase_error(pred: &[f64], truth: &[f64]) -> Result<f64, MetricError> {
    check_pair(pred, truth)?;
    let (p, t) = (spectrum(pred), spectrum(truth));
    Ok(p.iter().zip(&t).map(|(a, b)| (a * b.conj()).arg().abs()).sum::<f64>() / p.len() as f64)
}

/// Relative L1 error of spectral magnitudes.
pub fn amplitude_error(pred: &[f64], truth: &[f64]) -> Result<f64, MetricError> {
    check_pair(pred, truth)?;
    let (p, t) = (spectrum(pred), spectrum(truth));
    let num: f64 = p.iter().zip(&t).map(|(a, b)| (a.norm() - b.norm()).abs()).sum();
    let den: f64 = t.iter().map(|b| b.norm()).sum();
    Ok(num / den)
}

/// Relative L1 error of Hilbert envelopes, in percent.
pub fn envelope_error(pred: &[f64], truth: &[f64]) -> Result<f64, MetricError> {
    check_pair(pred, truth)?;
    let (p, t) = (hilbert_envelope(pred), hilbert_envelope(truth));
    let num: f64 = p.iter().zip(&t).map(|(a, b)| (a - b).abs()).sum();
    let den: f64 = t.iter().sum();
    Ok(100.0 * num / den)
}

/// Least-squares slope (dB per second) of `edc[start..=end]`.
fn fit_slope(edc: &[f64], start: usize, end: usize, sample_rate: f64) -> f64 {
    let n = (end - start + 1) as f64;
    let ts = (start..=end).map(|i| i as f64 / sample_rate);
    let mean_t = ts.clone().sum::<f64>() / n;
    let mean_l = edc[start..=end].iter().sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (t, &l) in ts.zip(&edc[start..=end]) {
        sxy += (t - mean_t) * (l - mean_l);
        sxx += (t - mean_t) * (t - mean_t);
    }
    sxy / sxx
}

fn first_below(edc: &[f64], from: usize, level: f64) -> Option<usize> {
    (from..edc.len()).find(|&i| edc[i] <= level)
}

/// Reverberation time from a line fit over the [-5, -25] dB span of the
/// Schroeder curve, extrapolated to 60 dB.
pub fn t60(rir: &[f64], sample_rate: f64) -> Result<f64, MetricError> {
    let edc = schroeder_edc(rir)?;
    let start = first_below(&edc, 0, T60_FIT_DB.0).ok_or(MetricError::NoDecay(T60_FIT_DB.0))?;
    let end = first_below(&edc, start, T60_FIT_DB.1).ok_or(MetricError::NoDecay(T60_FIT_DB.1))?;
    if end <= start {
        return Err(MetricError::NoDecay(T60_FIT_DB.1));
    }
    Ok(-60.0 / fit_slope(&edc, start, end, sample_rate))
}

/// Early decay time: a line fit from the onset down to -10 dB, extrapolated to 60 dB.
pub fn edt(rir: &[f64], sample_rate: f64) -> Result<f64, MetricError> {
    let edc = schroeder_edc(rir)?;
    let peak = rir.iter().map(|v| v * v).fold(0.0, f64::max);
    let onset = rir
        .iter()
        .position(|v| v * v >= ONSET_FRACTION * peak)
        .expect("a nonzero signal reaches its own peak");
    let end = first_below(&edc, onset, EDT_FIT_DB).ok_or(MetricError::NoDecay(EDT_FIT_DB))?;
    if end <= onset {
        return Err(MetricError::NoDecay(EDT_FIT_DB));
    }
    Ok(-60.0 / fit_slope(&edc, onset, end, sample_rate))
}

/// Early-to-late energy ratio at 50 ms, in dB.
pub fn c50(rir: &[f64], sample_rate: f64) -> f64 {
    let split = ((0.05 * sample_rate).round() as usize).min(rir.len());
    let early: f64 = rir[..split].iter().map(|v| v * v).sum();
    let late: f64 = rir[split..].iter().map(|v| v * v).sum();
    let ratio = if late == 0.0 {
        if early == 0.0 {
            1.0
        } else {
            C50_CLAMP.1
        }
    } else {
        (early / late).clamp(C50_CLAMP.0, C50_CLAMP.1)
    };
    10.0 * ratio.log10()
}

/// Relative T60 error in percent.
pub fn t60_error(pred: &[f64], truth: &[f64], sample_rate: f64) -> Result<f64, MetricError> {
    check_pair(pred, truth)?;
    let (p, t) = (t60(pred, sample_rate)?, t60(truth, sample_rate)?);
    Ok(100.0 * (p - t).abs() / t)
}

/// Absolute C50 error in dB.
pub fn c50_error(pred: &[f64], truth: &[f64], sample_rate: f64) -> Result<f64, MetricError> {
    check_pair(pred, truth)?;
    Ok((c50(pred, sample_rate) - c50(truth, sample_rate)).abs())
}

/// Absolute EDT error in milliseconds.
pub fn edt_error(pred: &[f64], truth: &[f64], sample_rate: f64) -> Result<f64, MetricError> {
    check_pair(pred, truth)?;
    Ok((edt(pred, sample_rate)? - edt(truth, sample_rate)?).abs() * 1000.0)
}

/// All six errors for one receiver. Decay metrics are `None` when either
/// signal fails to decay far enough.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub phase: f64,
    pub amplitude: f64,
    pub envelope: f64,
    pub t60: Option<f64>,
    pub c50: f64,
    pub edt: Option<f64>,
}

fn optional(r: Result<f64, MetricError>) -> Result<Option<f64>, MetricError> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(MetricError::NoDecay(_)) | Err(MetricError::Spectral(SpectralError::ZeroEnergy)) => Ok(None),
        Err(e) => Err(e),
    }
}

pub fn evaluate_pair(pred: &[f64], truth: &[f64], sample_rate: f64) -> Result<MetricReport, MetricError> {
    Ok(MetricReport {
        phase: phase_error(pred, truth)?,
        amplitude: amplitude_error(pred, truth)?,
        envelope: envelope_error(pred, truth)?,
        t60: optional(t60_error(pred, truth, sample_rate))?,
        c50: c50_error(pred, truth, sample_rate)?,
        edt: optional(edt_error(pred, truth, sample_rate))?,
    })
}

/// Means over receivers. T60 and EDT average only the available pairs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub pairs: usize,
    pub phase: f64,
    pub amplitude: f64,
    pub envelope: f64,
    pub t60: Option<f64>,
    pub c50: f64,
    pub edt: Option<f64>,
    pub t60_unavailable: usize,
    pub edt_unavailable: usize,
}

fn mean(values: impl Iterator<Item = f64>) -> (f64, usize) {
    let (sum, n) = values.fold((0.0, 0), |(s, n), v| (s + v, n + 1));
    (if n == 0 { f64::NAN } else { sum / n as f64 }, n)
}

pub fn summarize(reports: &[MetricReport]) -> MetricSummary {
    let n = reports.len();
    let (t60, t60_n) = mean(reports.iter().filter_map(|r| r.t60));
    let (edt, edt_n) = mean(reports.iter().filter_map(|r| r.edt));
    MetricSummary {
        pairs: n,
        phase: mean(reports.iter().map(|r| r.phase)).0,
        amplitude: mean(reports.iter().map(|r| r.amplitude)).0,
        envelope: mean(reports.iter().map(|r| r.envelope)).0,
        t60: (t60_n > 0).then_some(t60),
        c50: mean(reports.iter().map(|r| r.c50)).0,
        edt: (edt_n > 0).then_some(edt),
        t60_unavailable: n - t60_n,
        edt_unavailable: n - edt_n,
    }
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x:.6}"))
}

/// Per-receiver rows followed by a `mean` row, tab-separated.
pub fn report_tsv(reports: &[MetricReport], summary: &MetricSummary) -> String {
    let mut out = String::from("receiver\tphase\tamplitude\tenvelope_pct\tt60_pct\tc50_db\tedt_ms\n");
    let row = |out: &mut String, name: &str, p: f64, a: f64, e: f64, t: Option<f64>, c: f64, d: Option<f64>| {
        let _ = writeln!(out, "{name}\t{p:.6}\t{a:.6}\t{e:.6}\t{}\t{c:.6}\t{}", cell(t), cell(d));
    };
    for (i, r) in reports.iter().enumerate() {
        row(
            &mut out,
            &i.to_string(),
            r.phase,
            r.amplitude,
            r.envelope,
            r.t60,
            r.c50,
            r.edt,
        );
    }
    let s = summary;
    row(&mut out, "mean", s.phase, s.amplitude, s.envelope, s.t60, s.c50, s.edt);
    out
}
