//! The two-branch multipole network.
//!
//! The signal branch maps each pole position to a 3 ms emitted signal and
//! never sees a receiver. The directivity branch maps the pole position and
//! its offset from the receiver to time-domain spherical-harmonic
//! coefficients.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, ParamId, ParamStore, Tape, Tensor, Var, POSENC_DIM, POSENC_FREQS};
use crate::spherical::{channel_count, fibonacci_sphere, norm, random_rotation, rotate, sub, Vec3, MAX_ORDER};

/// Samples per emitted signal and per coefficient channel (3 ms at 24 kHz).
pub const SIGNAL_LEN: usize = 72;
/// Hidden width of both heads.
pub const HIDDEN_WIDTH: usize = 512;
/// Number of concentric initialization spheres, radii 1..=34 m.
pub const SPHERE_COUNT: usize = 34;
/// Points per sphere for the dense initialization.
pub const DENSE_PER_SPHERE: usize = 32;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("harmonic order {0} is not supported (max {MAX_ORDER})")]
    BadOrder(usize),
    #[error("points per sphere must be positive")]
    EmptySphere,
    #[error("no alive poles")]
    NoAlivePoles,
    #[error("normalization scale must be positive, got {0}")]
    BadScale(f64),
}

/// Sinusoidal encoding: for each coordinate `c = x_i / scale` and each
/// `k in 0..10`, the pair `sin(2^k pi c), cos(2^k pi c)`.
pub fn positional_encode(x: &Vec3, scale: f64) -> [f64; POSENC_DIM] {
    let mut out = [0.0; POSENC_DIM];
    for (i, &coord) in x.iter().enumerate() {
        let c = coord / scale;
        for k in 0..POSENC_FREQS {
            let (s, co) = ((1u64 << k) as f64 * PI * c).sin_cos();
            out[i * 2 * POSENC_FREQS + 2 * k] = s;
            out[i * 2 * POSENC_FREQS + 2 * k + 1] = co;
        }
    }
    out
}

/// Maps world coordinates into the encoder's unaliased range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub center: Vec3,
    pub scale: f64,
}

impl Normalizer {
    /// Centered on the source, with a scale covering every initial pole and
    /// every pole-to-receiver offset. `receivers` bounds the listening region.
    pub fn for_scene(source: &Vec3, receivers: &[Vec3]) -> Self {
        let reach = receivers.iter().map(|r| norm(&sub(r, source))).fold(0.0, f64::max);
        Self {
            center: *source,
            scale: 1.05 * (SPHERE_COUNT as f64 + reach),
        }
    }
}

/// Pole positions with an alive mask over the initial indexing.
#[derive(Debug, Clone, PartialEq)]
pub struct MultipoleSet {
    pub positions: Vec<Vec3>,
    pub alive: Vec<bool>,
    pub source: Vec3,
}

impl MultipoleSet {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn alive_count(&self) -> usize {
        self.alive.iter().filter(|&&a| a).count()
    }

    pub fn alive_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.alive[i]).collect()
    }
}

/// Dense initialization: a pole at the source plus 32 Fibonacci points on
/// each of 34 spheres (radii 1..=34 m), each sphere under its own random rotation.
pub fn init_dense<R: Rng + ?Sized>(source: &Vec3, rng: &mut R) -> MultipoleSet {
    init_sparse(source, DENSE_PER_SPHERE, rng).expect("dense lattice is non-empty")
}

/// Same layout as [`init_dense`] with `per_sphere` points per sphere.
pub fn init_sparse<R: Rng + ?Sized>(source: &Vec3, per_sphere: usize, rng: &mut R) -> Result<MultipoleSet, ModelError> {
    let lattice = fibonacci_sphere(per_sphere).map_err(|_| ModelError::EmptySphere)?;
    let mut positions = Vec::with_capacity(1 + SPHERE_COUNT * per_sphere);
    positions.push(*source);
    for radius in 1..=SPHERE_COUNT {
        let rot = random_rotation(rng);
        for p in &lattice {
            let q = rotate(&rot, p);
            positions.push([
                source[0] + radius as f64 * q[0],
                source[1] + radius as f64 * q[1],
                source[2] + radius as f64 * q[2],
            ]);
        }
    }
    let n = positions.len();
    Ok(MultipoleSet {
        positions,
        alive: vec![true; n],
        source: *source,
    })
}

/// A 3-layer perceptron: two ReLU hidden layers and a linear output.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MlpHead {
    pub layers: [(ParamId, ParamId); 3],
    pub input_dim: usize,
    pub output_dim: usize,
}

impl MlpHead {
    /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and biases; the final
    /// layer is scaled by 0.1 so the model starts near-silent.
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, dims: [usize; 4], rng: &mut R) -> Self {
        let mut layers = Vec::with_capacity(3);
        for l in 0..3 {
            let (fan_in, fan_out) = (dims[l], dims[l + 1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let gain = if l == 2 { 0.1 } else { 1.0 };
            let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| gain * rng.gen_range(-bound..bound)).collect() };
            let w = store.add(
                format!("{prefix}.{l}.weight"),
                Tensor::from_vec(fan_in, fan_out, draw(fan_in * fan_out)),
            );
            let b = store.add(format!("{prefix}.{l}.bias"), Tensor::row(draw(fan_out)));
            layers.push((w, b));
        }
        Self {
            layers: [layers[0], layers[1], layers[2]],
            input_dim: dims[0],
            output_dim: dims[3],
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var, AutodiffError> {
        let mut h = x;
        for (l, &(w, b)) in self.layers.iter().enumerate() {
            let wv = tape.param(store, w);
            let bv = tape.param(store, b);
            h = tape.affine(h, wv, bv)?;
            if l < 2 {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }
}

/// Architecture settings recorded in checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub sh_order: usize,
    pub hidden_width: usize,
    pub normalizer: Normalizer,
}

impl ModelConfig {
    pub fn channels(&self) -> usize {
        channel_count(self.sh_order)
    }
}

/// One pole's emitted signal.
#[derive(Debug, Clone, PartialEq)]
pub struct EmittedSignal(pub Vec<f64>);

impl EmittedSignal {
    pub fn energy(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum()
    }
}

/// One pole's time-domain harmonic coefficients, `channels x 72` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectivityCoeffs {
    pub channels: usize,
    pub data: Vec<f64>,
}

impl DirectivityCoeffs {
    pub fn channel(&self, c: usize) -> &[f64] {
        &self.data[c * SIGNAL_LEN..(c + 1) * SIGNAL_LEN]
    }
}

/// Trainable state: pole positions (alive rows only) and both heads.
#[derive(Debug, Clone)]
pub struct NamsModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub positions: ParamId,
    pub signal_head: MlpHead,
    pub directivity_head: MlpHead,
    /// Initial index of each alive row of `positions`.
    pole_ids: Vec<usize>,
    initial_count: usize,
    source: Vec3,
}

impl NamsModel {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, set: &MultipoleSet, rng: &mut R) -> Result<Self, ModelError> {
        if config.sh_order > MAX_ORDER {
            return Err(ModelError::BadOrder(config.sh_order));
        }
        if !(config.normalizer.scale > 0.0) {
            return Err(ModelError::BadScale(config.normalizer.scale));
        }
        let pole_ids = set.alive_indices();
        if pole_ids.is_empty() {
            return Err(ModelError::NoAlivePoles);
        }
        let mut store = ParamStore::new();
        let pos_rows: Vec<Vec<f64>> = pole_ids.iter().map(|&i| set.positions[i].to_vec()).collect();
        let positions = store.add("poles.position", Tensor::from_rows(&pos_rows));
        let w = config.hidden_width;
        let signal_head = MlpHead::new(&mut store, "signal", [POSENC_DIM, w, w, SIGNAL_LEN], rng);
        let directivity_head = MlpHead::new(
            &mut store,
            "directivity",
            [2 * POSENC_DIM, w, w, config.channels() * SIGNAL_LEN],
            rng,
        );
        Ok(Self {
            config,
            store,
            positions,
            signal_head,
            directivity_head,
            pole_ids,
            initial_count: set.len(),
            source: set.source,
        })
    }

    /// Reassembles a model from stored parts; used by checkpoint loading.
    pub(crate) fn from_parts(
        config: ModelConfig,
        store: ParamStore,
        pole_ids: Vec<usize>,
        initial_count: usize,
        source: Vec3,
    ) -> Result<Self, ModelError> {
        let find = |name: &str| store.find(name).ok_or(ModelError::NoAlivePoles);
        let head = |prefix: &str, input_dim: usize, output_dim: usize| -> Result<MlpHead, ModelError> {
            let mut layers = Vec::new();
            for l in 0..3 {
                layers.push((
                    find(&format!("{prefix}.{l}.weight"))?,
                    find(&format!("{prefix}.{l}.bias"))?,
                ));
            }
            Ok(MlpHead {
                layers: [layers[0], layers[1], layers[2]],
                input_dim,
                output_dim,
            })
        };
        let signal_head = head("signal", POSENC_DIM, SIGNAL_LEN)?;
        let directivity_head = head("directivity", 2 * POSENC_DIM, config.channels() * SIGNAL_LEN)?;
        let positions = find("poles.position")?;
        Ok(Self {
            config,
            store,
            positions,
            signal_head,
            directivity_head,
            pole_ids,
            initial_count,
            source,
        })
    }

    pub fn alive_count(&self) -> usize {
        self.pole_ids.len()
    }

    pub fn initial_count(&self) -> usize {
        self.initial_count
    }

    pub fn pole_ids(&self) -> &[usize] {
        &self.pole_ids
    }

    pub fn source(&self) -> Vec3 {
        self.source
    }

    pub fn pole_positions(&self) -> Vec<Vec3> {
        let t = self.store.value(self.positions);
        (0..t.rows())
            .map(|i| {
                let r = t.row_slice(i);
                [r[0], r[1], r[2]]
            })
            .collect()
    }

    /// The current poles as a set over initial indices.
    pub fn multipoles(&self) -> MultipoleSet {
        let mut positions = vec![[f64::NAN; 3]; self.initial_count];
        let mut alive = vec![false; self.initial_count];
        for (row, p) in self.pole_ids.iter().zip(self.pole_positions()) {
            positions[*row] = p;
            alive[*row] = true;
        }
        MultipoleSet {
            positions,
            alive,
            source: self.source,
        }
    }

    /// Emitted signals `alive x 72` on a tape.
    pub fn signal_head_var(&self, tape: &mut Tape) -> Result<Var, AutodiffError> {
        let pos = tape.param(&self.store, self.positions);
        self.signal_head_at(tape, pos)
    }

    /// Emitted signals for the given `R x 3` positions node.
    pub fn signal_head_at(&self, tape: &mut Tape, pos: Var) -> Result<Var, AutodiffError> {
        let norm = &self.config.normalizer;
        let shift = tape.constant(Tensor::row(norm.center.iter().map(|v| -v).collect()));
        let centered = tape.add_row(pos, shift)?;
        let enc = tape.posenc(centered, norm.scale)?;
        self.signal_head.forward(tape, &self.store, enc)
    }

    /// Harmonic coefficients `R x (C*72)` for the given `R x 3` positions
    /// node as seen from `receiver`.
    pub fn directivity_head_at(&self, tape: &mut Tape, pos: Var, receiver: &Vec3) -> Result<Var, AutodiffError> {
        let norm = &self.config.normalizer;
        let neg_r = tape.constant(Tensor::row(receiver.iter().map(|v| -v).collect()));
        let rel = tape.add_row(pos, neg_r)?;
        let rel_enc = tape.posenc(rel, norm.scale)?;
        let shift = tape.constant(Tensor::row(norm.center.iter().map(|v| -v).collect()));
        let centered = tape.add_row(pos, shift)?;
        let abs_enc = tape.posenc(centered, norm.scale)?;
        let input = tape.concat(rel_enc, abs_enc)?;
        self.directivity_head.forward(tape, &self.store, input)
    }

    /// Emitted signal of every alive pole. Takes no receiver.
    pub fn emitted_signals(&self) -> Vec<EmittedSignal> {
        let mut tape = Tape::new();
        let s = self
            .signal_head_var(&mut tape)
            .expect("model shapes are consistent by construction");
        let t = tape.value(s);
        (0..t.rows()).map(|i| EmittedSignal(t.row_slice(i).to_vec())).collect()
    }

    /// Directivity coefficients of every alive pole toward `receiver`.
    pub fn directivity(&self, receiver: &Vec3) -> Vec<DirectivityCoeffs> {
        let mut tape = Tape::new();
        let pos = tape.param(&self.store, self.positions);
        let b = self
            .directivity_head_at(&mut tape, pos, receiver)
            .expect("model shapes are consistent by construction");
        let t = tape.value(b);
        (0..t.rows())
            .map(|i| DirectivityCoeffs {
                channels: self.config.channels(),
                data: t.row_slice(i).to_vec(),
            })
            .collect()
    }

    /// Drops the alive rows listed in `rows` (row indices, not initial ids),
    /// discarding their optimizer moments.
    pub fn remove_rows(&mut self, rows: &[usize]) {
        let keep: Vec<usize> = (0..self.pole_ids.len()).filter(|r| !rows.contains(r)).collect();
        self.store.retain_rows(self.positions, &keep);
        self.pole_ids = keep.iter().map(|&r| self.pole_ids[r]).collect();
    }
}
