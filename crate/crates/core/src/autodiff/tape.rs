//! Reverse-mode tape over [`Tensor`] values.
//!
//! Each recorded op computes its value eagerly and remembers its inputs.
//! [`Tape::backward`] walks the nodes in reverse recording order, which is a
//! valid reverse topological order because inputs always precede outputs.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex64;

use super::params::{ParamId, ParamStore};
use super::tensor::{gemm, Tensor};
use crate::spectral::{hann, irdft_into, rdft_adjoint_into, rdft_into, stft_frame_count};
use crate::spherical::{channel_count, real_sh_cartesian, MAX_ORDER};

/// Number of frequencies in the positional encoding.
pub const POSENC_FREQS: usize = 10;
/// Width of the positional encoding of a 3-vector.
pub const POSENC_DIM: usize = 3 * 2 * POSENC_FREQS;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("loss must be 1x1, got {0}x{1}")]
    NonScalarLoss(usize, usize),
    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),
}

fn shape_err(op: &'static str, detail: String) -> AutodiffError {
    AutodiffError::Shape { op, detail }
}

/// Node handle on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    AddRow(Var, Var),
    ScaleRows(Var, Var),
    MatMul(Var, Var),
    Affine(Var, Var, Var),
    Relu(Var),
    Sin(Var),
    Cos(Var),
    Recip(Var),
    Sqrt(Var),
    Log(Var),
    Abs(Var),
    ClampMin(Var, f64),
    Sum(Var),
    SumRows(Var),
    SumCols(Var),
    RowNorm(Var),
    ComplexFromParts(Var, Var),
    ComplexMul(Var, Var),
    ComplexAbs(Var),
    ComplexPart(Var, usize),
    Rdft(Var, usize),
    Irdft(Var, usize),
    Stft(Var, usize),
    Concat(Var, Var),
    SliceCols(Var, usize),
    GatherRows(Var, Arc<[usize]>),
    SuffixSum(Var),
    PosEnc(Var, f64),
    RealSh(Var, usize),
    ChannelMix(Var, Var),
    DelayPhasor {
        input: Var,
        df: f64,
        speed: f64,
    },
    PoleSum {
        spectra: Var,
        rows: Arc<[usize]>,
        d: Var,
        r: Var,
        cfg: PoleSumConfig,
    },
}

/// Constants of [`Tape::pole_sum`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoleSumConfig {
    /// Bin spacing in Hz.
    pub df: f64,
    pub speed: f64,
    /// Distance floor of the attenuation.
    pub r_min: f64,
    /// Added to each directivity norm.
    pub eps: f64,
}

impl PoleSumConfig {
    fn theta(&self, r: f64) -> f64 {
        2.0 * PI * self.df * r / self.speed
    }
}

/// Adds `s * d / (|d| + eps) * exp(-j theta(r) k) / max(r, r_min)` into the
/// interleaved rows `h` and `s`; `d` is a one-sided spectrum and `phasor`
/// is scratch of the same length as `h`.
pub(crate) fn accumulate_pole_term(
    h: &mut [f64],
    s: &[f64],
    d: &[Complex64],
    r: f64,
    cfg: &PoleSumConfig,
    phasor: &mut [f64],
) {
    let inv = 1.0 / (d.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt() + cfg.eps);
    fill_phasor(phasor, cfg.theta(r));
    let a = 1.0 / r.max(cfg.r_min);
    for (((hk, sk), dk), ek) in h
        .chunks_exact_mut(2)
        .zip(s.chunks_exact(2))
        .zip(d)
        .zip(phasor.chunks_exact(2))
    {
        let (ur, ui) = (dk.re * inv, dk.im * inv);
        let (yr, yi) = (sk[0] * ur - sk[1] * ui, sk[0] * ui + sk[1] * ur);
        let (zr, zi) = (yr * ek[0] - yi * ek[1], yr * ek[1] + yi * ek[0]);
        hk[0] += zr * a;
        hk[1] += zi * a;
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients of leaf inputs after a backward pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

pub(crate) fn to_complex(row: &[f64]) -> Vec<Complex64> {
    row.chunks_exact(2).map(|c| Complex64::new(c[0], c[1])).collect()
}

pub(crate) fn write_complex(dst: &mut [f64], src: &[Complex64]) {
    for (d, s) in dst.chunks_exact_mut(2).zip(src) {
        d[0] = s.re;
        d[1] = s.im;
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), AutodiffError> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(value, op, rg)
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf whose gradient is reported in [`Gradients`].
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A parameter; its gradient accumulates into the store on backward.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id), true)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.same_shape("add", a, b)?;
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.same_shape("sub", a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p - q).collect();
        let value = Tensor::from_vec(x.rows(), x.cols(), data);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.same_shape("mul", a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let value = Tensor::from_vec(x.rows(), x.cols(), data);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Scale(a, c), |v| v * c)
    }

    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Offset(a), |v| v + c)
    }

    /// Adds a `1 x C` row to every row of an `R x C` tensor.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, AutodiffError> {
        let (r, c) = self.shape(a);
        if self.shape(row) != (1, c) {
            return Err(shape_err("add_row", format!("{:?} onto {r}x{c}", self.shape(row))));
        }
        let mut value = self.value(a).clone();
        let b = self.value(row).data().to_vec();
        for i in 0..r {
            for (x, y) in value.row_slice_mut(i).iter_mut().zip(&b) {
                *x += y;
            }
        }
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(value, Op::AddRow(a, row), rg))
    }

    /// Multiplies row `i` of an `R x C` tensor by `s[i]` from an `R x 1` tensor.
    pub fn scale_rows(&mut self, a: Var, s: Var) -> Result<Var, AutodiffError> {
        let (r, _) = self.shape(a);
        if self.shape(s) != (r, 1) {
            return Err(shape_err("scale_rows", format!("{:?} for {r} rows", self.shape(s))));
        }
        let mut value = self.value(a).clone();
        let sv = self.value(s).data().to_vec();
        for (i, f) in sv.iter().enumerate() {
            value.row_slice_mut(i).iter_mut().for_each(|x| *x *= f);
        }
        let rg = self.rg(a) || self.rg(s);
        Ok(self.push(value, Op::ScaleRows(a, s), rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let ((m, k), (k2, n)) = (self.shape(a), self.shape(b));
        if k != k2 {
            return Err(shape_err("matmul", format!("{m}x{k} * {k2}x{n}")));
        }
        let mut value = Tensor::zeros(m, n);
        gemm(
            self.value(a).data(),
            (m, k),
            false,
            self.value(b).data(),
            (k, n),
            false,
            value.data_mut(),
            0.0,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    /// `x W + b` for `x: R x I`, `W: I x O`, `b: 1 x O`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var, AutodiffError> {
        let ((r, i), (i2, o)) = (self.shape(x), self.shape(w));
        if i != i2 || self.shape(b) != (1, o) {
            return Err(shape_err(
                "affine",
                format!("x {r}x{i}, W {i2}x{o}, b {:?}", self.shape(b)),
            ));
        }
        let mut value = Tensor::zeros(r, o);
        let bias = self.value(b).data();
        for row in 0..r {
            value.row_slice_mut(row).copy_from_slice(bias);
        }
        gemm(
            self.value(x).data(),
            (r, i),
            false,
            self.value(w).data(),
            (i, o),
            false,
            value.data_mut(),
            1.0,
        );
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(value, Op::Affine(x, w, b), rg))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |v| v.max(0.0))
    }

    pub fn sin(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sin(a), f64::sin)
    }

    pub fn cos(&mut self, a: Var) -> Var {
        self.unary(a, Op::Cos(a), f64::cos)
    }

    pub fn recip(&mut self, a: Var) -> Var {
        self.unary(a, Op::Recip(a), |v| 1.0 / v)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sqrt(a), f64::sqrt)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log(a), f64::ln)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Op::Abs(a), f64::abs)
    }

    pub fn clamp_min(&mut self, a: Var, lo: f64) -> Var {
        self.unary(a, Op::ClampMin(a, lo), |v| v.max(lo))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.mul(a, a).expect("operand shapes match themselves")
    }

    /// Sum of all elements, as a 1x1 tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Column sums of `R x C`, giving `1 x C`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (r, c) = x.shape();
        let mut out = vec![0.0; c];
        for i in 0..r {
            for (o, v) in out.iter_mut().zip(x.row_slice(i)) {
                *o += v;
            }
        }
        let rg = self.rg(a);
        self.push(Tensor::row(out), Op::SumRows(a), rg)
    }

    /// Row sums of `R x C`, giving `R x 1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let out = (0..x.rows()).map(|i| x.row_slice(i).iter().sum()).collect();
        let rg = self.rg(a);
        self.push(Tensor::column(out), Op::SumCols(a), rg)
    }

    /// Euclidean norm of each row, giving `R x 1`.
    pub fn row_norm(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let out = (0..x.rows())
            .map(|i| x.row_slice(i).iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let rg = self.rg(a);
        self.push(Tensor::column(out), Op::RowNorm(a), rg)
    }

    /// Interleaves real and imaginary parts of equal shape.
    pub fn complex_from_parts(&mut self, re: Var, im: Var) -> Result<Var, AutodiffError> {
        self.same_shape("complex_from_parts", re, im)?;
        let (r, k) = self.shape(re);
        let (a, b) = (self.value(re).data(), self.value(im).data());
        let mut data = vec![0.0; 2 * r * k];
        for (i, d) in data.chunks_exact_mut(2).enumerate() {
            d[0] = a[i];
            d[1] = b[i];
        }
        let rg = self.rg(re) || self.rg(im);
        Ok(self.push(Tensor::from_vec(r, 2 * k, data), Op::ComplexFromParts(re, im), rg))
    }

    pub fn complex_mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.same_shape("complex_mul", a, b)?;
        let (r, c) = self.shape(a);
        if c % 2 != 0 {
            return Err(shape_err("complex_mul", format!("odd column count {c}")));
        }
        let (x, y) = (self.value(a).data(), self.value(b).data());
        let mut data = vec![0.0; r * c];
        for ((d, p), q) in data.chunks_exact_mut(2).zip(x.chunks_exact(2)).zip(y.chunks_exact(2)) {
            d[0] = p[0] * q[0] - p[1] * q[1];
            d[1] = p[0] * q[1] + p[1] * q[0];
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_vec(r, c, data), Op::ComplexMul(a, b), rg))
    }

    pub fn complex_abs(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let (r, c) = self.shape(a);
        if c % 2 != 0 {
            return Err(shape_err("complex_abs", format!("odd column count {c}")));
        }
        let data = self.value(a).data().chunks_exact(2).map(|z| z[0].hypot(z[1])).collect();
        let rg = self.rg(a);
        Ok(self.push(Tensor::from_vec(r, c / 2, data), Op::ComplexAbs(a), rg))
    }

    /// Real (`imag = false`) or imaginary parts of an interleaved complex node.
    pub fn complex_part(&mut self, a: Var, imag: bool) -> Result<Var, AutodiffError> {
        let (r, c) = self.shape(a);
        if c % 2 != 0 {
            return Err(shape_err("complex_part", format!("odd column count {c}")));
        }
        let off = imag as usize;
        let data = self.value(a).data().chunks_exact(2).map(|z| z[off]).collect();
        let rg = self.rg(a);
        Ok(self.push(Tensor::from_vec(r, c / 2, data), Op::ComplexPart(a, off), rg))
    }

    /// Row-wise one-sided DFT with zero-padding to `n`: `R x T` to `R x 2(n/2+1)`.
    pub fn rdft(&mut self, a: Var, n: usize) -> Result<Var, AutodiffError> {
        let (r, t) = self.shape(a);
        if t > n || n % 2 != 0 {
            return Err(shape_err("rdft", format!("{t} samples into frame {n}")));
        }
        let bins = n / 2 + 1;
        let mut value = Tensor::zeros(r, 2 * bins);
        let mut buf = vec![Complex64::new(0.0, 0.0); bins];
        for i in 0..r {
            rdft_into(self.value(a).row_slice(i), n, &mut buf);
            write_complex(value.row_slice_mut(i), &buf);
        }
        let rg = self.rg(a);
        Ok(self.push(value, Op::Rdft(a, n), rg))
    }

    /// Row-wise inverse of [`Tape::rdft`]: `R x 2(n/2+1)` to `R x n`.
    pub fn irdft(&mut self, a: Var, n: usize) -> Result<Var, AutodiffError> {
        let (r, c) = self.shape(a);
        if n % 2 != 0 || c != 2 * (n / 2 + 1) {
            return Err(shape_err("irdft", format!("{c} columns for frame {n}")));
        }
        let mut value = Tensor::zeros(r, n);
        for i in 0..r {
            let z = to_complex(self.value(a).row_slice(i));
            irdft_into(&z, n, value.row_slice_mut(i));
        }
        let rg = self.rg(a);
        Ok(self.push(value, Op::Irdft(a, n), rg))
    }

    /// Hann-windowed STFT of a `1 x L` signal (hop `fft_size/4`), giving
    /// `frames x 2(fft_size/2+1)`.
    pub fn stft(&mut self, a: Var, fft_size: usize) -> Result<Var, AutodiffError> {
        let (r, _) = self.shape(a);
        if r != 1 || fft_size % 4 != 0 {
            return Err(shape_err("stft", format!("{r} rows, fft size {fft_size}")));
        }
        let s = crate::spectral::stft(self.value(a).row_slice(0), fft_size);
        let mut value = Tensor::zeros(s.frames, 2 * s.bins);
        for f in 0..s.frames {
            write_complex(value.row_slice_mut(f), s.frame(f));
        }
        let rg = self.rg(a);
        Ok(self.push(value, Op::Stft(a, fft_size), rg))
    }

    /// Column concatenation.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let ((ra, ca), (rb, cb)) = (self.shape(a), self.shape(b));
        if ra != rb {
            return Err(shape_err("concat", format!("{ra} vs {rb} rows")));
        }
        let mut value = Tensor::zeros(ra, ca + cb);
        for i in 0..ra {
            let row = value.row_slice_mut(i);
            row[..ca].copy_from_slice(self.nodes[a.0].value.row_slice(i));
            row[ca..].copy_from_slice(self.nodes[b.0].value.row_slice(i));
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Concat(a, b), rg))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var, AutodiffError> {
        let (r, c) = self.shape(a);
        if start > end || end > c {
            return Err(shape_err("slice_cols", format!("{start}..{end} of {c}")));
        }
        let mut value = Tensor::zeros(r, end - start);
        for i in 0..r {
            value
                .row_slice_mut(i)
                .copy_from_slice(&self.value(a).row_slice(i)[start..end]);
        }
        let rg = self.rg(a);
        Ok(self.push(value, Op::SliceCols(a, start), rg))
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var, AutodiffError> {
        let (r, _) = self.shape(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(shape_err("gather_rows", format!("row {bad} of {r}")));
        }
        let value = self.value(a).select_rows(idx);
        let rg = self.rg(a);
        Ok(self.push(value, Op::GatherRows(a, idx.into()), rg))
    }

    /// Row-wise reverse cumulative sum: `out[t] = sum_{tau >= t} a[tau]`.
    pub fn suffix_sum(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for i in 0..value.rows() {
            let row = value.row_slice_mut(i);
            let mut acc = 0.0;
            for v in row.iter_mut().rev() {
                acc += *v;
                *v = acc;
            }
        }
        let rg = self.rg(a);
        self.push(value, Op::SuffixSum(a), rg)
    }

    /// Sinusoidal encoding of each `R x 3` row, giving `R x 60`.
    pub fn posenc(&mut self, a: Var, scale: f64) -> Result<Var, AutodiffError> {
        let (r, c) = self.shape(a);
        if c != 3 || scale <= 0.0 {
            return Err(shape_err("posenc", format!("{r}x{c} at scale {scale}")));
        }
        let mut value = Tensor::zeros(r, POSENC_DIM);
        for i in 0..r {
            let x = self.value(a).row_slice(i);
            let v = [x[0], x[1], x[2]];
            value
                .row_slice_mut(i)
                .copy_from_slice(&crate::model::positional_encode(&v, scale));
        }
        let rg = self.rg(a);
        Ok(self.push(value, Op::PosEnc(a, scale), rg))
    }

    /// Real harmonics up to `order` of each `R x 3` unit-vector row.
    pub fn real_sh(&mut self, a: Var, order: usize) -> Result<Var, AutodiffError> {
        let (r, c) = self.shape(a);
        if c != 3 || order > MAX_ORDER {
            return Err(shape_err("real_sh", format!("{r}x{c}, order {order}")));
        }
        let nc = channel_count(order);
        let mut value = Tensor::zeros(r, nc);
        let mut buf = [0.0; 16];
        for i in 0..r {
            let x = self.value(a).row_slice(i);
            real_sh_cartesian(order, &[x[0], x[1], x[2]], &mut buf, None);
            value.row_slice_mut(i).copy_from_slice(&buf[..nc]);
        }
        let rg = self.rg(a);
        Ok(self.push(value, Op::RealSh(a, order), rg))
    }

    /// `out[p, t] = sum_c y[p, c] * b[p, c*T + t]` for `y: R x C`, `b: R x CT`.
    pub fn channel_mix(&mut self, y: Var, b: Var) -> Result<Var, AutodiffError> {
        let ((r, c), (rb, cb)) = (self.shape(y), self.shape(b));
        if r != rb || c == 0 || cb % c != 0 {
            return Err(shape_err("channel_mix", format!("y {r}x{c}, b {rb}x{cb}")));
        }
        let t = cb / c;
        let mut value = Tensor::zeros(r, t);
        for p in 0..r {
            let yr = self.value(y).row_slice(p);
            let br = self.value(b).row_slice(p);
            let out = value.row_slice_mut(p);
            for (ch, &w) in yr.iter().enumerate() {
                for (o, v) in out.iter_mut().zip(&br[ch * t..(ch + 1) * t]) {
                    *o += w * v;
                }
            }
        }
        let rg = self.rg(y) || self.rg(b);
        Ok(self.push(value, Op::ChannelMix(y, b), rg))
    }

    /// Propagation phasors `exp(-j 2 pi (k df) r / speed)` for `k in 0..bins`,
    /// one row per distance in the `R x 1` input.
    pub fn delay_phasor(&mut self, r: Var, bins: usize, df: f64, speed: f64) -> Result<Var, AutodiffError> {
        let (rows, c) = self.shape(r);
        if c != 1 {
            return Err(shape_err("delay_phasor", format!("{rows}x{c} distances")));
        }
        let mut value = Tensor::zeros(rows, 2 * bins);
        for i in 0..rows {
            let theta = 2.0 * PI * df * self.value(r).get(i, 0) / speed;
            fill_phasor(value.row_slice_mut(i), theta);
        }
        let rg = self.rg(r);
        Ok(self.push(value, Op::DelayPhasor { input: r, df, speed }, rg))
    }

    /// Delayed, attenuated sum of pole spectra, `1 x 2*bins`. Row `i` of
    /// `d_time` (directivity filters, at most `n = 2*bins - 2` taps) and of
    /// `r` (`R x 1` distances) pairs with row `rows[i]` of `spectra`.
    /// Equivalent to [`Tape::rdft`] of `d_time`, normalizing each row,
    /// multiplying by the gathered spectra and [`Tape::delay_phasor`],
    /// scaling by `1 / max(r, r_min)` and summing rows, without the
    /// intermediate `R x 2*bins` nodes.
    pub fn pole_sum(
        &mut self,
        spectra: Var,
        rows: &[usize],
        d_time: Var,
        r: Var,
        cfg: PoleSumConfig,
    ) -> Result<Var, AutodiffError> {
        let (ps, cs) = self.shape(spectra);
        let (rd, taps) = self.shape(d_time);
        if cs < 4 || cs % 2 != 0 || taps + 2 > cs || rd != rows.len() || self.shape(r) != (rd, 1) {
            return Err(shape_err(
                "pole_sum",
                format!(
                    "spectra {ps}x{cs}, d_time {rd}x{taps}, r {:?}, {} rows",
                    self.shape(r),
                    rows.len()
                ),
            ));
        }
        if let Some(&bad) = rows.iter().find(|&&i| i >= ps) {
            return Err(shape_err("pole_sum", format!("row {bad} of {ps}")));
        }
        let n = cs - 2;
        let mut h = vec![0.0; cs];
        let mut phasor = vec![0.0; cs];
        let mut dspec = vec![Complex64::new(0.0, 0.0); cs / 2];
        for (i, &p) in rows.iter().enumerate() {
            let (sv, dv, rv) = (self.value(spectra), self.value(d_time), self.value(r));
            rdft_into(dv.row_slice(i), n, &mut dspec);
            accumulate_pole_term(&mut h, sv.row_slice(p), &dspec, rv.get(i, 0), &cfg, &mut phasor);
        }
        let rg = self.rg(spectra) || self.rg(d_time) || self.rg(r);
        let op = Op::PoleSum {
            spectra,
            rows: rows.into(),
            d: d_time,
            r,
            cfg,
        };
        Ok(self.push(Tensor::row(h), op, rg))
    }

    /// Backpropagates from a 1x1 loss. Parameter gradients are added into
    /// `store`; leaf-input gradients are returned.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<Gradients, AutodiffError> {
        let (r, c) = self.shape(loss);
        if (r, c) != (1, 1) {
            return Err(AutodiffError::NonScalarLoss(r, c));
        }
        self.backward_from(vec![(loss, Tensor::scalar(1.0))], store)
    }

    /// Backpropagates arbitrary upstream gradients seeded at the given nodes.
    pub fn backward_from(&self, seeds: Vec<(Var, Tensor)>, store: &mut ParamStore) -> Result<Gradients, AutodiffError> {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        let mut start = 0;
        for (v, g) in seeds {
            if g.shape() != self.shape(v) {
                return Err(shape_err(
                    "backward seed",
                    format!("{:?} vs {:?}", g.shape(), self.shape(v)),
                ));
            }
            start = start.max(v.0 + 1);
            accumulate(&mut grads, v, g);
        }
        for i in (0..start).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            match &node.op {
                Op::Leaf => continue,
                Op::Param(id) => {
                    if let Some(g) = grads[i].take() {
                        store.grad_mut(*id).add_assign(&g);
                    }
                    continue;
                }
                _ => {}
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(&node.op, &node.value, g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn send(&self, grads: &mut [Option<Tensor>], v: Var, g: impl FnOnce() -> Tensor) {
        if self.rg(v) {
            accumulate(grads, v, g());
        }
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: Tensor, grads: &mut [Option<Tensor>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let zip_map = |a: &Tensor, f: &dyn Fn(f64, f64) -> f64| {
            let data = a.data().iter().zip(g.data()).map(|(&x, &gg)| f(x, gg)).collect();
            Tensor::from_vec(a.rows(), a.cols(), data)
        };
        match *op {
            Op::Leaf | Op::Param(_) => unreachable!(),
            Op::Add(a, b) => {
                self.send(grads, a, || g.clone());
                self.send(grads, b, || g.clone());
            }
            Op::Sub(a, b) => {
                self.send(grads, a, || g.clone());
                self.send(grads, b, || g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                self.send(grads, a, || zip_map(val(b), &|y, gg| y * gg));
                self.send(grads, b, || zip_map(val(a), &|x, gg| x * gg));
            }
            Op::Scale(a, c) => self.send(grads, a, || g.map(|v| v * c)),
            Op::Offset(a) => self.send(grads, a, || g.clone()),
            Op::AddRow(a, row) => {
                self.send(grads, a, || g.clone());
                self.send(grads, row, || column_sums(&g));
            }
            Op::ScaleRows(a, s) => {
                self.send(grads, a, || {
                    let mut ga = g.clone();
                    for (i, f) in val(s).data().iter().enumerate() {
                        ga.row_slice_mut(i).iter_mut().for_each(|x| *x *= f);
                    }
                    ga
                });
                self.send(grads, s, || {
                    let x = val(a);
                    Tensor::column(
                        (0..x.rows())
                            .map(|i| x.row_slice(i).iter().zip(g.row_slice(i)).map(|(p, q)| p * q).sum())
                            .collect(),
                    )
                });
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (val(a).shape(), val(b).shape());
                self.send(grads, a, || {
                    let mut ga = Tensor::zeros(sa.0, sa.1);
                    gemm(g.data(), g.shape(), false, val(b).data(), sb, true, ga.data_mut(), 0.0);
                    ga
                });
                self.send(grads, b, || {
                    let mut gb = Tensor::zeros(sb.0, sb.1);
                    gemm(val(a).data(), sa, true, g.data(), g.shape(), false, gb.data_mut(), 0.0);
                    gb
                });
            }
            Op::Affine(x, w, b) => {
                let (sx, sw) = (val(x).shape(), val(w).shape());
                self.send(grads, x, || {
                    let mut gx = Tensor::zeros(sx.0, sx.1);
                    gemm(g.data(), g.shape(), false, val(w).data(), sw, true, gx.data_mut(), 0.0);
                    gx
                });
                self.send(grads, w, || {
                    let mut gw = Tensor::zeros(sw.0, sw.1);
                    gemm(val(x).data(), sx, true, g.data(), g.shape(), false, gw.data_mut(), 0.0);
                    gw
                });
                self.send(grads, b, || column_sums(&g));
            }
            Op::Relu(a) => self.send(grads, a, || zip_map(val(a), &|x, gg| if x > 0.0 { gg } else { 0.0 })),
            Op::Sin(a) => self.send(grads, a, || zip_map(val(a), &|x, gg| gg * x.cos())),
            Op::Cos(a) => self.send(grads, a, || zip_map(val(a), &|x, gg| -gg * x.sin())),
            Op::Recip(a) => self.send(grads, a, || zip_map(out, &|y, gg| -gg * y * y)),
            Op::Sqrt(a) => self.send(grads, a, || {
                zip_map(out, &|y, gg| if y > 0.0 { 0.5 * gg / y } else { 0.0 })
            }),
            Op::Log(a) => self.send(grads, a, || zip_map(val(a), &|x, gg| gg / x)),
            Op::Abs(a) => self.send(grads, a, || {
                zip_map(val(a), &|x, gg| {
                    if x > 0.0 {
                        gg
                    } else if x < 0.0 {
                        -gg
                    } else {
                        0.0
                    }
                })
            }),
            Op::ClampMin(a, lo) => self.send(grads, a, || zip_map(val(a), &|x, gg| if x > lo { gg } else { 0.0 })),
            Op::Sum(a) => self.send(grads, a, || {
                let (r, c) = val(a).shape();
                Tensor::from_vec(r, c, vec![g.item(); r * c])
            }),
            Op::SumRows(a) => self.send(grads, a, || {
                let (r, c) = val(a).shape();
                let mut ga = Tensor::zeros(r, c);
                for i in 0..r {
                    ga.row_slice_mut(i).copy_from_slice(g.data());
                }
                ga
            }),
            Op::SumCols(a) => self.send(grads, a, || {
                let (r, c) = val(a).shape();
                let mut ga = Tensor::zeros(r, c);
                for i in 0..r {
                    ga.row_slice_mut(i).fill(g.get(i, 0));
                }
                ga
            }),
            Op::RowNorm(a) => self.send(grads, a, || {
                let x = val(a);
                let mut ga = x.clone();
                for i in 0..x.rows() {
                    let n = out.get(i, 0);
                    let f = if n > 0.0 { g.get(i, 0) / n } else { 0.0 };
                    ga.row_slice_mut(i).iter_mut().for_each(|v| *v *= f);
                }
                ga
            }),
            Op::ComplexFromParts(re, im) => {
                let (r, k) = val(re).shape();
                let part = |off: usize| Tensor::from_vec(r, k, g.data().chunks_exact(2).map(|z| z[off]).collect());
                self.send(grads, re, || part(0));
                self.send(grads, im, || part(1));
            }
            Op::ComplexMul(a, b) => {
                // dL/da = G conj(b) with G = dL/dRe + j dL/dIm.
                let conj_mul = |other: &Tensor| {
                    let mut res = Tensor::zeros(other.rows(), other.cols());
                    for ((d, q), gg) in res
                        .data_mut()
                        .chunks_exact_mut(2)
                        .zip(other.data().chunks_exact(2))
                        .zip(g.data().chunks_exact(2))
                    {
                        d[0] = gg[0] * q[0] + gg[1] * q[1];
                        d[1] = gg[1] * q[0] - gg[0] * q[1];
                    }
                    res
                };
                self.send(grads, a, || conj_mul(val(b)));
                self.send(grads, b, || conj_mul(val(a)));
            }
            Op::ComplexPart(a, off) => self.send(grads, a, || {
                let (r, c) = val(a).shape();
                let mut ga = Tensor::zeros(r, c);
                for (d, gg) in ga.data_mut().chunks_exact_mut(2).zip(g.data()) {
                    d[off] = *gg;
                }
                ga
            }),
            Op::ComplexAbs(a) => self.send(grads, a, || {
                let x = val(a);
                let mut ga = Tensor::zeros(x.rows(), x.cols());
                for ((d, z), (m, gg)) in ga
                    .data_mut()
                    .chunks_exact_mut(2)
                    .zip(x.data().chunks_exact(2))
                    .zip(out.data().iter().zip(g.data()))
                {
                    if *m > 0.0 {
                        d[0] = gg * z[0] / m;
                        d[1] = gg * z[1] / m;
                    }
                }
                ga
            }),
            Op::Rdft(a, n) => self.send(grads, a, || {
                let (r, t) = val(a).shape();
                let mut ga = Tensor::zeros(r, t);
                let mut full = vec![0.0; n];
                for i in 0..r {
                    rdft_adjoint_into(&to_complex(g.row_slice(i)), n, &mut full);
                    ga.row_slice_mut(i).copy_from_slice(&full[..t]);
                }
                ga
            }),
            Op::Irdft(a, n) => self.send(grads, a, || {
                let (r, c) = val(a).shape();
                let bins = n / 2 + 1;
                let mut ga = Tensor::zeros(r, c);
                let mut buf = vec![Complex64::new(0.0, 0.0); bins];
                for i in 0..r {
                    rdft_into(g.row_slice(i), n, &mut buf);
                    let row = ga.row_slice_mut(i);
                    for (k, z) in buf.iter().enumerate() {
                        let interior = k != 0 && k != bins - 1;
                        let w = if interior { 2.0 } else { 1.0 } / n as f64;
                        row[2 * k] = w * z.re;
                        row[2 * k + 1] = if interior { w * z.im } else { 0.0 };
                    }
                }
                ga
            }),
            Op::Stft(a, fft_size) => self.send(grads, a, || {
                let len = val(a).cols();
                let hop = fft_size / 4;
                let frames = stft_frame_count(len, fft_size, hop);
                let window = hann(fft_size);
                let mut ga = Tensor::zeros(1, len);
                let mut buf = vec![0.0; fft_size];
                for f in 0..frames {
                    rdft_adjoint_into(&to_complex(g.row_slice(f)), fft_size, &mut buf);
                    let row = ga.row_slice_mut(0);
                    for (j, (b, w)) in buf.iter().zip(&window).enumerate() {
                        if let Some(slot) = row.get_mut(f * hop + j) {
                            *slot += b * w;
                        }
                    }
                }
                ga
            }),
            Op::Concat(a, b) => {
                let ca = val(a).cols();
                let cols = g.cols();
                self.send(grads, a, || slice_cols(&g, 0, ca));
                self.send(grads, b, || slice_cols(&g, ca, cols));
            }
            Op::SliceCols(a, start) => self.send(grads, a, || {
                let (r, c) = val(a).shape();
                let w = g.cols();
                let mut ga = Tensor::zeros(r, c);
                for i in 0..r {
                    ga.row_slice_mut(i)[start..start + w].copy_from_slice(g.row_slice(i));
                }
                ga
            }),
            Op::PoleSum {
                spectra,
                ref rows,
                d,
                r,
                cfg,
            } => {
                let (sv, dv, rv) = (val(spectra), val(d), val(r));
                let g = g.row_slice(0);
                let bins = g.len() / 2;
                let n = g.len() - 2;
                // Added in place: many renders may share one spectra node.
                let mut gs = self.rg(spectra).then(|| {
                    grads[spectra.0]
                        .take()
                        .unwrap_or_else(|| Tensor::zeros(sv.rows(), sv.cols()))
                });
                let mut gd = self.rg(d).then(|| Tensor::zeros(dv.rows(), dv.cols()));
                let mut gr = self.rg(r).then(|| Tensor::zeros(rv.rows(), 1));
                let mut phasor = vec![0.0; g.len()];
                let mut dspec = vec![Complex64::new(0.0, 0.0); bins];
                let mut du = vec![Complex64::new(0.0, 0.0); bins];
                let mut full = vec![0.0; n];
                for (i, &p) in rows.iter().enumerate() {
                    let (srow, dist) = (sv.row_slice(p), rv.get(i, 0));
                    rdft_into(dv.row_slice(i), n, &mut dspec);
                    let norm = dspec.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
                    let inv = 1.0 / (norm + cfg.eps);
                    fill_phasor(&mut phasor, cfg.theta(dist));
                    let a = 1.0 / dist.max(cfg.r_min);
                    let (mut dtheta, mut da) = (0.0, 0.0);
                    let mut du_dot_d = 0.0;
                    for (k, (((gk, sk), dk), ek)) in g
                        .chunks_exact(2)
                        .zip(srow.chunks_exact(2))
                        .zip(&dspec)
                        .zip(phasor.chunks_exact(2))
                        .enumerate()
                    {
                        let (ur, ui) = (dk.re * inv, dk.im * inv);
                        // u e a multiplies s; s e a multiplies u.
                        let (uer, uei) = (ur * ek[0] - ui * ek[1], ur * ek[1] + ui * ek[0]);
                        let (ser, sei) = (sk[0] * ek[0] - sk[1] * ek[1], sk[0] * ek[1] + sk[1] * ek[0]);
                        if let Some(gs) = gs.as_mut() {
                            let o = &mut gs.row_slice_mut(p)[2 * k..2 * k + 2];
                            o[0] += a * (gk[0] * uer + gk[1] * uei);
                            o[1] += a * (gk[1] * uer - gk[0] * uei);
                        }
                        let dz = Complex64::new(a * (gk[0] * ser + gk[1] * sei), a * (gk[1] * ser - gk[0] * sei));
                        du[k] = dz;
                        du_dot_d += dz.re * dk.re + dz.im * dk.im;
                        // y = s u e; dL/dtheta_k = Im(conj(G) y) a k, dL/da = Re(conj(G) y).
                        let (yr, yi) = (sk[0] * uer - sk[1] * uei, sk[0] * uei + sk[1] * uer);
                        da += gk[0] * yr + gk[1] * yi;
                        dtheta += (gk[0] * yi - gk[1] * yr) * a * k as f64;
                    }
                    if let Some(gd) = gd.as_mut() {
                        let coef = if norm > 0.0 { du_dot_d * inv * inv / norm } else { 0.0 };
                        for (z, x) in du.iter_mut().zip(&dspec) {
                            *z = *z * inv - x * coef;
                        }
                        rdft_adjoint_into(&du, n, &mut full);
                        let row = gd.row_slice_mut(i);
                        let taps = row.len();
                        row.copy_from_slice(&full[..taps]);
                    }
                    if let Some(gr) = gr.as_mut() {
                        let mut dr = dtheta * cfg.theta(1.0);
                        if dist > cfg.r_min {
                            dr -= da / (dist * dist);
                        }
                        gr.set(i, 0, dr);
                    }
                }
                if let Some(t) = gs {
                    grads[spectra.0] = Some(t);
                }
                if let Some(t) = gd {
                    accumulate(grads, d, t);
                }
                if let Some(t) = gr {
                    accumulate(grads, r, t);
                }
            }
            Op::GatherRows(a, ref idx) => self.send(grads, a, || {
                let (r, c) = val(a).shape();
                let mut ga = Tensor::zeros(r, c);
                for (k, &src) in idx.iter().enumerate() {
                    for (d, v) in ga.row_slice_mut(src).iter_mut().zip(g.row_slice(k)) {
                        *d += v;
                    }
                }
                ga
            }),
            Op::SuffixSum(a) => self.send(grads, a, || {
                let mut ga = g.clone();
                for i in 0..ga.rows() {
                    let mut acc = 0.0;
                    for v in ga.row_slice_mut(i).iter_mut() {
                        acc += *v;
                        *v = acc;
                    }
                }
                ga
            }),
            Op::PosEnc(a, scale) => self.send(grads, a, || {
                let x = val(a);
                let mut ga = Tensor::zeros(x.rows(), 3);
                for i in 0..x.rows() {
                    let enc = out.row_slice(i);
                    let gr = g.row_slice(i);
                    for c in 0..3 {
                        let mut acc = 0.0;
                        for k in 0..POSENC_FREQS {
                            let w = (1u64 << k) as f64 * PI / scale;
                            let j = c * 2 * POSENC_FREQS + 2 * k;
                            // d sin = w cos, d cos = -w sin
                            acc += w * (gr[j] * enc[j + 1] - gr[j + 1] * enc[j]);
                        }
                        ga.set(i, c, acc);
                    }
                }
                ga
            }),
            Op::RealSh(a, order) => self.send(grads, a, || {
                let x = val(a);
                let nc = channel_count(order);
                let mut ga = Tensor::zeros(x.rows(), 3);
                let mut vals = [0.0; 16];
                let mut jac = [[0.0; 3]; 16];
                for i in 0..x.rows() {
                    let u = x.row_slice(i);
                    real_sh_cartesian(order, &[u[0], u[1], u[2]], &mut vals, Some(&mut jac));
                    let gr = g.row_slice(i);
                    let dst = ga.row_slice_mut(i);
                    for ch in 0..nc {
                        for c in 0..3 {
                            dst[c] += gr[ch] * jac[ch][c];
                        }
                    }
                }
                ga
            }),
            Op::ChannelMix(y, b) => {
                let (r, c) = val(y).shape();
                let t = g.cols();
                self.send(grads, y, || {
                    let mut gy = Tensor::zeros(r, c);
                    for p in 0..r {
                        let br = val(b).row_slice(p);
                        let gr = g.row_slice(p);
                        for ch in 0..c {
                            let s: f64 = br[ch * t..(ch + 1) * t].iter().zip(gr).map(|(u, v)| u * v).sum();
                            gy.set(p, ch, s);
                        }
                    }
                    gy
                });
                self.send(grads, b, || {
                    let mut gb = Tensor::zeros(r, c * t);
                    for p in 0..r {
                        let yr = val(y).row_slice(p).to_vec();
                        let gr = g.row_slice(p).to_vec();
                        let dst = gb.row_slice_mut(p);
                        for (ch, w) in yr.iter().enumerate() {
                            for (d, v) in dst[ch * t..(ch + 1) * t].iter_mut().zip(&gr) {
                                *d = w * v;
                            }
                        }
                    }
                    gb
                });
            }
            Op::DelayPhasor { input, df, speed } => self.send(grads, input, || {
                // z = exp(-j a r): dRe/dr = a Im z, dIm/dr = -a Re z, a = 2 pi f / c.
                let rows = out.rows();
                let base = 2.0 * PI * df / speed;
                Tensor::column(
                    (0..rows)
                        .map(|i| {
                            out.row_slice(i)
                                .chunks_exact(2)
                                .zip(g.row_slice(i).chunks_exact(2))
                                .enumerate()
                                .map(|(k, (z, gg))| base * k as f64 * (gg[0] * z[1] - gg[1] * z[0]))
                                .sum()
                        })
                        .collect(),
                )
            }),
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn column_sums(g: &Tensor) -> Tensor {
    let mut out = vec![0.0; g.cols()];
    for i in 0..g.rows() {
        for (o, v) in out.iter_mut().zip(g.row_slice(i)) {
            *o += v;
        }
    }
    Tensor::row(out)
}

fn slice_cols(g: &Tensor, start: usize, end: usize) -> Tensor {
    let mut out = Tensor::zeros(g.rows(), end - start);
    for i in 0..g.rows() {
        out.row_slice_mut(i).copy_from_slice(&g.row_slice(i)[start..end]);
    }
    out
}

/// Writes `exp(-j k theta)` for consecutive `k` into an interleaved row,
/// stepping by complex rotation and re-anchoring every 64 bins.
pub(crate) fn fill_phasor(row: &mut [f64], theta: f64) {
    // Rotation recurrence, re-anchored every block to bound rounding drift.
    const BLOCK: usize = 64;
    let (s1, c1) = theta.sin_cos();
    let (sr, si) = (c1, -s1);
    for (b, block) in row.chunks_mut(2 * BLOCK).enumerate() {
        let (s, c) = ((b * BLOCK) as f64 * theta).sin_cos();
        let (mut zr, mut zi) = (c, -s);
        for d in block.chunks_exact_mut(2) {
            d[0] = zr;
            d[1] = zi;
            let t = zr * sr - zi * si;
            zi = zr * si + zi * sr;
            zr = t;
        }
    }
}
