//! Minibatch training over receivers with progressive pole pruning and
//! best-checkpoint tracking.

use std::fmt::Write as _;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{adam_step, cosine_lr, AdamConfig, AutodiffError, Tape, Tensor};
use crate::dataset::RirCorpus;
use crate::losses::{loss_on_tape, LossError, LossReport, LossWeights, Target};
use crate::model::{
    init_dense, init_sparse, ModelConfig, ModelError, MultipoleSet, NamsModel, Normalizer, HIDDEN_WIDTH,
};
use crate::persistence::Checkpoint;
use crate::renderer::{render_on_tape, RenderError, Renderer};
use crate::spectral::{SpectralGrid, FRAME_LEN};
use crate::spherical::{Vec3, MAX_ORDER};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("dataset: {0}")]
    Data(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("non-finite loss at epoch {epoch}")]
    NonFinite { epoch: usize, last_good: Box<Checkpoint> },
}

/// How the initial poles are laid out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum PoleInit {
    /// 32 points per sphere, 1089 poles with the source pole.
    Dense,
    Sparse {
        per_sphere: usize,
    },
}

impl FromStr for PoleInit {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "dense" => Ok(PoleInit::Dense),
            _ => {
                let n = s
                    .strip_prefix("sparse:")
                    .ok_or_else(|| format!("expected `dense` or `sparse:N`, got `{s}`"))?;
                let per_sphere = n.parse().map_err(|_| format!("bad per-sphere count `{n}`"))?;
                Ok(PoleInit::Sparse { per_sphere })
            }
        }
    }
}

impl std::fmt::Display for PoleInit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PoleInit::Dense => write!(f, "dense"),
            PoleInit::Sparse { per_sphere } => write!(f, "sparse:{per_sphere}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    /// Receivers per optimizer step.
    pub batch_size: usize,
    pub prune_start: usize,
    pub prune_interval: usize,
    /// Fraction of the median energy below which a pole is removed.
    pub prune_threshold: f64,
    pub pruning: bool,
    pub sh_order: usize,
    pub init: PoleInit,
    pub hidden_width: usize,
    pub seed: u64,
    pub loss: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            lr_max: 1e-3,
            lr_min: 1e-4,
            batch_size: 16,
            prune_start: 100,
            prune_interval: 20,
            prune_threshold: 0.5,
            pruning: true,
            sh_order: 3,
            init: PoleInit::Dense,
            hidden_width: HIDDEN_WIDTH,
            seed: 0,
            loss: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if !(self.prune_threshold > 0.0 && self.prune_threshold < 1.0) {
            return bad(format!("prune threshold {} outside (0, 1)", self.prune_threshold));
        }
        if self.prune_interval == 0 {
            return bad("prune interval must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive".into());
        }
        if self.sh_order > MAX_ORDER {
            return bad(format!("sh order {} above {MAX_ORDER}", self.sh_order));
        }
        if self.hidden_width == 0 {
            return bad("hidden width must be positive".into());
        }
        if let PoleInit::Sparse { per_sphere: 0 } = self.init {
            return bad("sparse init needs at least one point per sphere".into());
        }
        if !(self.lr_max > 0.0 && self.lr_min > 0.0 && self.lr_min.is_finite() && self.lr_max.is_finite()) {
            return bad(format!("learning rates {} / {}", self.lr_max, self.lr_min));
        }
        self.loss.validate().map_err(|e| TrainError::Config(e.to_string()))
    }

    pub fn is_prune_epoch(&self, epoch: usize) -> bool {
        self.pruning && epoch >= self.prune_start && (epoch - self.prune_start) % self.prune_interval == 0
    }

    pub fn prune_epochs(&self) -> Vec<usize> {
        (0..self.epochs).filter(|&e| self.is_prune_epoch(e)).collect()
    }
}

/// One pruning decision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneEvent {
    pub epoch: usize,
    /// Energy of each pole alive before the step, in alive order.
    pub energies: Vec<f64>,
    /// Initial indices of the removed poles.
    pub removed: Vec<usize>,
    pub count_after: usize,
    /// The rule would have removed every pole; the strongest was kept.
    pub kept_strongest: bool,
}

/// Signal energy of every alive pole. No receiver is involved.
pub fn pole_energies(model: &NamsModel) -> Vec<f64> {
    model.emitted_signals().iter().map(|s| s.energy()).collect()
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn finite_or_min(e: f64) -> f64 {
    if e.is_nan() {
        f64::NEG_INFINITY
    } else {
        e
    }
}

/// Positions in `energies` to remove: those below `threshold` times the
/// median. The second value is set when the strongest had to be kept.
pub fn prune_selection(energies: &[f64], threshold: f64) -> (Vec<usize>, bool) {
    if energies.len() < 2 {
        return (Vec::new(), false);
    }
    let cut = threshold * median(energies);
    let mut removed: Vec<usize> = (0..energies.len()).filter(|&i| !(energies[i] >= cut)).collect();
    if removed.len() == energies.len() {
        let best = (0..energies.len())
            .max_by(|&a, &b| finite_or_min(energies[a]).total_cmp(&finite_or_min(energies[b])))
            .expect("nonempty");
        removed.retain(|&i| i != best);
        return (removed, true);
    }
    (removed, false)
}

/// Applies the median rule to a pole set; `energies` follows the order of
/// the alive indices.
pub fn prune_step(set: &mut MultipoleSet, energies: &[f64], threshold: f64, epoch: usize) -> PruneEvent {
    let alive = set.alive_indices();
    assert_eq!(alive.len(), energies.len(), "one energy per alive pole");
    let (rows, kept_strongest) = prune_selection(energies, threshold);
    let removed: Vec<usize> = rows.iter().map(|&r| alive[r]).collect();
    for &i in &removed {
        set.alive[i] = false;
    }
    PruneEvent {
        epoch,
        energies: energies.to_vec(),
        removed,
        count_after: set.alive_count(),
        kept_strongest,
    }
}

/// Prunes a model in place by the median rule.
pub fn prune_model(model: &mut NamsModel, threshold: f64, epoch: usize) -> PruneEvent {
    let energies = pole_energies(model);
    let (rows, kept_strongest) = prune_selection(&energies, threshold);
    let removed = rows.iter().map(|&r| model.pole_ids()[r]).collect();
    model.remove_rows(&rows);
    PruneEvent {
        epoch,
        energies,
        removed,
        count_after: model.alive_count(),
        kept_strongest,
    }
}

/// Per-epoch record; also one line of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Mean over training receivers.
    pub train: LossReport,
    /// Mean total loss over test receivers, after any pruning this epoch.
    pub test_total: f64,
    pub poles: usize,
}

pub const EPOCH_LOG_HEADER: &str =
    "epoch\tlr\tspectral\tamplitude\tphase\ttime\tmrstft\tedc\ttrain_total\ttest_total\tpoles";

impl EpochRecord {
    /// Tab-separated line with round-trip float formatting.
    pub fn tsv_line(&self) -> String {
        let mut s = format!("{}\t{:e}", self.epoch, self.lr);
        for v in self.train.terms().iter().chain([&self.train.total, &self.test_total]) {
            let _ = write!(s, "\t{v:e}");
        }
        let _ = write!(s, "\t{}", self.poles);
        s
    }
}

pub fn epoch_log(records: &[EpochRecord]) -> String {
    let mut s = String::from(EPOCH_LOG_HEADER);
    s.push('\n');
    for r in records {
        s.push_str(&r.tsv_line());
        s.push('\n');
    }
    s
}

pub const PRUNE_LOG_HEADER: &str = "epoch\tremoved\tcount_after\tkept_strongest\tremoved_ids";

pub fn prune_log(events: &[PruneEvent]) -> String {
    let mut s = String::from(PRUNE_LOG_HEADER);
    s.push('\n');
    for e in events {
        let ids: Vec<String> = e.removed.iter().map(|i| i.to_string()).collect();
        let _ = writeln!(
            s,
            "{}\t{}\t{}\t{}\t{}",
            e.epoch,
            e.removed.len(),
            e.count_after,
            e.kept_strongest,
            ids.join(",")
        );
    }
    s
}

/// Result of a completed run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Model at the epoch with the lowest test loss.
    pub best: Checkpoint,
    /// Model after the last epoch.
    pub last: NamsModel,
    pub history: Vec<EpochRecord>,
    pub prune_events: Vec<PruneEvent>,
}

/// A receiver with its precomputed loss target.
pub struct Sample {
    pub receiver: Vec3,
    pub target: Target,
}

impl Sample {
    pub fn new(receiver: Vec3, waveform: &[f64]) -> Result<Self, TrainError> {
        Ok(Self {
            receiver,
            target: Target::new(waveform)?,
        })
    }
}

pub fn samples(corpus: &RirCorpus) -> Result<Vec<Sample>, TrainError> {
    corpus
        .entries
        .iter()
        .map(|e| {
            if e.waveform.len() != FRAME_LEN {
                return Err(TrainError::Data(format!(
                    "waveform of {} samples, expected {FRAME_LEN}",
                    e.waveform.len()
                )));
            }
            Sample::new(e.receiver, &e.waveform)
        })
        .collect()
}

/// Builds the initial model for a config and scene.
pub fn initial_model(
    cfg: &TrainConfig,
    source: &Vec3,
    receivers: &[Vec3],
    rng: &mut ChaCha8Rng,
) -> Result<NamsModel, TrainError> {
    let set = match cfg.init {
        PoleInit::Dense => init_dense(source, rng),
        PoleInit::Sparse { per_sphere } => init_sparse(source, per_sphere, rng)?,
    };
    let model_cfg = ModelConfig {
        sh_order: cfg.sh_order,
        hidden_width: cfg.hidden_width,
        normalizer: Normalizer::for_scene(source, receivers),
    };
    Ok(NamsModel::new(model_cfg, &set, rng)?)
}

/// Adds the gradient of the batch-mean total loss into the model's store
/// and returns the summed loss reports, or `None` on a non-finite loss.
///
/// Emitted signals do not depend on the receiver, so their spectra are
/// computed once per batch and shared by every render on the tape.
pub fn accumulate_batch_gradient(
    model: &mut NamsModel,
    batch: &[&Sample],
    weights: &LossWeights,
    grid: &SpectralGrid,
) -> Result<Option<LossReport>, TrainError> {
    let mut tape = Tape::new();
    let pos = tape.param(&model.store, model.positions);
    let signals = model.signal_head_at(&mut tape, pos)?;
    let spectra = tape.rdft(signals, grid.frame_len())?;
    let mut sum = LossReport::default();
    let mut total = None;
    for sample in batch {
        let vars = render_on_tape(&mut tape, model, spectra, pos, &sample.receiver, grid)?;
        let loss = loss_on_tape(&mut tape, vars.rir, &sample.target, weights)?;
        let report = loss.report(&tape);
        if !report.total.is_finite() {
            return Ok(None);
        }
        sum.accumulate(&report);
        total = Some(match total {
            Some(acc) => tape.add(acc, loss.total)?,
            None => loss.total,
        });
    }
    let Some(total) = total else { return Ok(Some(sum)) };
    let mean = tape.scale(total, 1.0 / batch.len() as f64);
    tape.backward(mean, &mut model.store)?;
    Ok(Some(sum))
}

/// Mean total loss of a model over a set of receivers, rendered without a tape.
pub fn mean_loss(model: &NamsModel, set: &[Sample], weights: &LossWeights) -> Result<f64, TrainError> {
    if set.is_empty() {
        return Ok(f64::NAN);
    }
    let renderer = Renderer::new(model);
    let mut sum = 0.0;
    for s in set {
        let rir = renderer.render(&s.receiver);
        let mut tape = Tape::new();
        let pred = tape.constant(Tensor::row(rir.samples));
        let loss = loss_on_tape(&mut tape, pred, &s.target, weights)?;
        sum += tape.value(loss.total).item();
    }
    Ok(sum / set.len() as f64)
}

/// Full training run from the configured initialization. `on_epoch` sees
/// each record as soon as it is complete.
pub fn train(
    cfg: &TrainConfig,
    train_set: &RirCorpus,
    test_set: &RirCorpus,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let model = initial_model(cfg, &train_set.source, &train_set.receivers(), &mut rng)?;
    train_model(cfg, model, &mut rng, train_set, test_set, on_epoch)
}

/// Trains an existing model. Architecture fields of `cfg` are ignored in
/// favour of the model's own; `rng` drives the minibatch shuffles.
pub fn train_model(
    cfg: &TrainConfig,
    mut model: NamsModel,
    rng: &mut ChaCha8Rng,
    train_set: &RirCorpus,
    test_set: &RirCorpus,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::Data("empty training set".into()));
    }
    if test_set.is_empty() {
        return Err(TrainError::Data("empty test set".into()));
    }
    if train_set.source != test_set.source {
        return Err(TrainError::Data(
            "training and test sets disagree on the source position".into(),
        ));
    }
    if model.source() != train_set.source {
        return Err(TrainError::Data(
            "model and dataset disagree on the source position".into(),
        ));
    }
    let train_samples = samples(train_set)?;
    let test_samples = samples(test_set)?;
    let grid = SpectralGrid::default();

    let mut history = Vec::with_capacity(cfg.epochs);
    let mut prune_events = Vec::new();
    let mut best: Option<Checkpoint> = None;
    let mut order: Vec<usize> = (0..train_samples.len()).collect();

    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(epoch, cfg.epochs, cfg.lr_max, cfg.lr_min);
        order.shuffle(rng);
        let mut train_sum = LossReport::default();
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &train_samples[i]).collect();
            let before = model.clone();
            let step = match accumulate_batch_gradient(&mut model, &batch, &cfg.loss, &grid)? {
                Some(report) => adam_step(&mut model.store, lr, AdamConfig::default()).map(|_| Some(report)),
                None => Ok(None),
            };
            match step {
                Ok(Some(report)) => train_sum.accumulate(&report),
                Ok(None) | Err(AutodiffError::NonFiniteGradient(_)) => {
                    let last_good = best
                        .clone()
                        .unwrap_or_else(|| Checkpoint::new(cfg, before, &prune_events, None, f64::NAN));
                    return Err(TrainError::NonFinite {
                        epoch,
                        last_good: Box::new(last_good),
                    });
                }
                Err(e) => return Err(e.into()),
            }
        }
        let train_mean = train_sum.scaled(1.0 / train_samples.len() as f64);

        if cfg.is_prune_epoch(epoch) && model.alive_count() >= 2 {
            prune_events.push(prune_model(&mut model, cfg.prune_threshold, epoch));
        }

        let test_total = mean_loss(&model, &test_samples, &cfg.loss)?;
        if !test_total.is_finite() {
            let last_good = best
                .clone()
                .unwrap_or_else(|| Checkpoint::new(cfg, model.clone(), &prune_events, None, f64::NAN));
            return Err(TrainError::NonFinite {
                epoch,
                last_good: Box::new(last_good),
            });
        }
        let record = EpochRecord {
            epoch,
            lr,
            train: train_mean,
            test_total,
            poles: model.alive_count(),
        };
        on_epoch(&record);
        history.push(record);
        if best.as_ref().map_or(true, |b| test_total < b.best_test_loss) {
            best = Some(Checkpoint::new(
                cfg,
                model.clone(),
                &prune_events,
                Some(epoch),
                test_total,
            ));
        }
    }

    let mut best = best.expect("at least one epoch");
    best.prune_events = prune_events.clone();
    Ok(TrainOutcome {
        best,
        last: model,
        history,
        prune_events,
    })
}
