mod config;

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use nams_core::dataset::{self, generate_scene, load_corpus, write_corpus, write_wav, DatasetError};
use nams_core::metrics::{evaluate_pair, report_tsv, summarize};
use nams_core::model::NamsModel;
use nams_core::persistence::{self, Checkpoint};
use nams_core::renderer::{spatial_magnitude_map, Plane, RenderError, Renderer};
use nams_core::spectral::SAMPLE_RATE;
use nams_core::spherical::Vec3;
use nams_core::trainer::{self, pole_energies, PoleInit, PruneEvent, TrainError, EPOCH_LOG_HEADER};

use crate::config::RunConfig;

pub const CHECKPOINT_FILE: &str = "checkpoint.nams";
pub const EPOCH_LOG_FILE: &str = "epoch_log.tsv";
pub const PRUNE_LOG_FILE: &str = "prune_log.tsv";
pub const METRICS_FILE: &str = "metrics.tsv";
pub const SUMMARY_FILE: &str = "summary.json";

#[derive(Parser)]
#[command(name = "nams", version, about = "Multipole neural acoustic fields")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a shoebox corpus and write WAVs plus a manifest.
    Generate(GenerateArgs),
    /// Fit a model to a corpus.
    Train(TrainArgs),
    /// Score a checkpoint on the held-out receivers.
    Eval(EvalArgs),
    /// Render one RIR to a WAV file.
    Render(RenderArgs),
    /// Tabulate pole positions and signal energies.
    Inspect(InspectArgs),
    /// Band magnitude over a plane.
    Map(MapArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Room size as Lx,Ly,Lz in meters.
    #[arg(long, value_parser = parse_vec3)]
    room: Option<Vec3>,
    #[arg(long, value_parser = parse_vec3)]
    source: Option<Vec3>,
    #[arg(long)]
    t60: Option<f64>,
    #[arg(long)]
    receivers: Option<usize>,
    #[arg(long)]
    max_order: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Corpus manifest.
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    split_seed: Option<u64>,
    /// `dense` or `sparse:N`.
    #[arg(long)]
    init: Option<PoleInit>,
    #[arg(long, value_parser = clap::value_parser!(u8).range(0..=3))]
    sh_order: Option<u8>,
    #[arg(long)]
    no_prune: bool,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr_max: Option<f64>,
    #[arg(long)]
    lr_min: Option<f64>,
    #[arg(long)]
    prune_start: Option<usize>,
    #[arg(long)]
    prune_interval: Option<usize>,
    #[arg(long)]
    prune_threshold: Option<f64>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    split_seed: Option<u64>,
    /// Score every receiver instead of the test split.
    #[arg(long)]
    all: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Receiver position as x,y,z in meters.
    #[arg(long, value_parser = parse_vec3, allow_hyphen_values = true)]
    receiver: Vec3,
    /// Output WAV path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output TSV path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MapArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Fixed coordinate, e.g. `z=1.2`.
    #[arg(long, value_parser = parse_plane)]
    plane: (usize, f64),
    /// Third-octave band center in Hz.
    #[arg(long, default_value_t = 4000.0)]
    band: f64,
    #[arg(long, default_value_t = 64)]
    res: usize,
    /// Extent of the free axes as min1,max1,min2,max2.
    #[arg(long, value_parser = parse_extent, allow_hyphen_values = true)]
    extent: Option<[f64; 4]>,
    /// Manifest whose room bounds the map when no extent is given.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Also write a grayscale PGM of the map in dB.
    #[arg(long)]
    pgm: Option<PathBuf>,
    /// Output TSV path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug)]
enum Failure {
    Config(anyhow::Error),
    Data(anyhow::Error),
    Numeric(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Data(_) => 3,
            Failure::Numeric(_) => 4,
        }
    }

    fn error(&self) -> &anyhow::Error {
        match self {
            Failure::Config(e) | Failure::Data(e) | Failure::Numeric(e) => e,
        }
    }
}

impl From<DatasetError> for Failure {
    fn from(e: DatasetError) -> Self {
        match e {
            DatasetError::InvalidSpec(_) | DatasetError::SourceAtReceiver => Failure::Config(e.into()),
            _ => Failure::Data(e.into()),
        }
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) | TrainError::Model(_) => Failure::Config(e.into()),
            TrainError::Data(_) | TrainError::Loss(_) => Failure::Data(e.into()),
            _ => Failure::Numeric(e.into()),
        }
    }
}

impl From<RenderError> for Failure {
    fn from(e: RenderError) -> Self {
        Failure::Config(e.into())
    }
}

type CmdResult = Result<(), Failure>;

fn data<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure::Data(e.into())
}

fn config<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure::Config(e.into())
}

fn parse_floats<const N: usize>(s: &str) -> Result<[f64; N], String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != N {
        return Err(format!("expected {N} comma-separated numbers, got `{s}`"));
    }
    let mut out = [0.0f64; N];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = p.trim().parse().map_err(|_| format!("bad number `{p}`"))?;
        if !o.is_finite() {
            return Err(format!("non-finite value `{p}`"));
        }
    }
    Ok(out)
}

fn parse_vec3(s: &str) -> Result<Vec3, String> {
    parse_floats::<3>(s)
}

fn parse_extent(s: &str) -> Result<[f64; 4], String> {
    let e = parse_floats::<4>(s)?;
    if e[0] >= e[1] || e[2] >= e[3] {
        return Err(format!("extent `{s}` must have min < max on both axes"));
    }
    Ok(e)
}

fn parse_plane(s: &str) -> Result<(usize, f64), String> {
    let (axis, value) = s
        .split_once('=')
        .ok_or_else(|| format!("expected AXIS=VALUE, got `{s}`"))?;
    let axis = match axis.trim() {
        "x" => 0,
        "y" => 1,
        "z" => 2,
        a => return Err(format!("unknown axis `{a}`")),
    };
    let value: f64 = value.trim().parse().map_err(|_| format!("bad offset `{value}`"))?;
    if !value.is_finite() {
        return Err(format!("non-finite offset `{value}`"));
    }
    Ok((axis, value))
}

fn create_dir(dir: &Path) -> CmdResult {
    fs::create_dir_all(dir)
        .with_context(|| format!("creating {}", dir.display()))
        .map_err(data)
}

fn write_file(path: &Path, contents: &str) -> CmdResult {
    fs::write(path, contents)
        .with_context(|| format!("writing {}", path.display()))
        .map_err(data)
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, Failure> {
    persistence::load(path)
        .with_context(|| format!("loading checkpoint {}", path.display()))
        .map_err(data)
}

fn generate(args: GenerateArgs) -> CmdResult {
    let mut run = RunConfig::load(args.config.as_deref()).map_err(config)?;
    let scene = &mut run.scene;
    scene.dims = args.room.unwrap_or(scene.dims);
    scene.source = args.source.unwrap_or(scene.source);
    scene.t60 = args.t60.unwrap_or(scene.t60);
    scene.receivers = args.receivers.unwrap_or(scene.receivers);
    scene.max_order = args.max_order.unwrap_or(scene.max_order);
    scene.seed = args.seed.unwrap_or(scene.seed);
    run.out = args.out.or(run.out);
    let out = run.out_dir().map_err(config)?.to_path_buf();

    let corpus = generate_scene(&run.scene)?;
    create_dir(&out)?;
    let manifest = write_corpus(&corpus, &out)?;
    run.corpus = Some(manifest.clone());
    run.echo(&out).map_err(data)?;
    eprintln!("wrote {} receivers to {}", corpus.len(), manifest.display());
    Ok(())
}

fn train(args: TrainArgs) -> CmdResult {
    let mut run = RunConfig::load(args.config.as_deref()).map_err(config)?;
    run.corpus = args.corpus.or(run.corpus);
    run.split_seed = args.split_seed.unwrap_or(run.split_seed);
    run.out = args.out.or(run.out);
    let t = &mut run.train;
    t.init = args.init.unwrap_or(t.init);
    t.sh_order = args.sh_order.map_or(t.sh_order, usize::from);
    t.pruning &= !args.no_prune;
    t.epochs = args.epochs.unwrap_or(t.epochs);
    t.batch_size = args.batch_size.unwrap_or(t.batch_size);
    t.lr_max = args.lr_max.unwrap_or(t.lr_max);
    t.lr_min = args.lr_min.unwrap_or(t.lr_min);
    t.prune_start = args.prune_start.unwrap_or(t.prune_start);
    t.prune_interval = args.prune_interval.unwrap_or(t.prune_interval);
    t.prune_threshold = args.prune_threshold.unwrap_or(t.prune_threshold);
    t.hidden_width = args.width.unwrap_or(t.hidden_width);
    t.seed = args.seed.unwrap_or(t.seed);
    run.train.validate()?;
    let out = run.out_dir().map_err(config)?.to_path_buf();
    let corpus_path = run.corpus_path().map_err(config)?;

    let corpus = load_corpus(corpus_path)?;
    let (train_set, test_set) = dataset::split(&corpus, run.split_seed)?;
    create_dir(&out)?;
    run.echo(&out).map_err(data)?;

    let log_path = out.join(EPOCH_LOG_FILE);
    let mut log = BufWriter::new(
        File::create(&log_path)
            .with_context(|| format!("creating {}", log_path.display()))
            .map_err(data)?,
    );
    let mut log_err = writeln!(log, "{EPOCH_LOG_HEADER}").err();
    let started = Instant::now();
    let result = trainer::train(&run.train, &train_set, &test_set, |rec| {
        if log_err.is_none() {
            log_err = writeln!(log, "{}", rec.tsv_line()).and_then(|_| log.flush()).err();
        }
        eprintln!(
            "epoch {:>4}  train {:.4e}  test {:.4e}  poles {:>4}  {:.1}s",
            rec.epoch,
            rec.train.total,
            rec.test_total,
            rec.poles,
            started.elapsed().as_secs_f64()
        );
    });
    drop(log);
    if let Some(e) = log_err {
        return Err(data(anyhow!(e).context(format!("writing {}", log_path.display()))));
    }

    let ckpt_path = out.join(CHECKPOINT_FILE);
    let save = |ckpt: &Checkpoint, events: &[PruneEvent]| -> CmdResult {
        persistence::save(ckpt, &ckpt_path)
            .with_context(|| format!("saving {}", ckpt_path.display()))
            .map_err(data)?;
        write_file(&out.join(PRUNE_LOG_FILE), &trainer::prune_log(events))
    };
    match result {
        Ok(outcome) => {
            save(&outcome.best, &outcome.prune_events)?;
            eprintln!(
                "best epoch {:?}  test {:.6e}  poles {}",
                outcome.best.best_epoch,
                outcome.best.best_test_loss,
                outcome.best.model.alive_count()
            );
            Ok(())
        }
        Err(TrainError::NonFinite { epoch, last_good }) => {
            save(&last_good, &last_good.prune_events)?;
            Err(Failure::Numeric(anyhow!(
                "non-finite loss at epoch {epoch}; last good model saved to {}",
                ckpt_path.display()
            )))
        }
        Err(e) => Err(e.into()),
    }
}

fn eval(args: EvalArgs) -> CmdResult {
    let mut run = RunConfig::load(args.config.as_deref()).map_err(config)?;
    run.corpus = args.corpus.or(run.corpus);
    run.split_seed = args.split_seed.unwrap_or(run.split_seed);
    run.out = args.out.or(run.out);
    let out = run.out_dir().map_err(config)?.to_path_buf();
    let corpus = load_corpus(run.corpus_path().map_err(config)?)?;
    let ckpt = load_checkpoint(&args.checkpoint)?;
    if ckpt.model.source() != corpus.source {
        return Err(data(anyhow!(
            "checkpoint source {:?} differs from corpus source {:?}",
            ckpt.model.source(),
            corpus.source
        )));
    }
    let set = if args.all {
        corpus
    } else {
        dataset::split(&corpus, run.split_seed)?.1
    };

    let renderer = Renderer::new(&ckpt.model);
    let mut reports = Vec::with_capacity(set.len());
    let mut render_secs = 0.0;
    let mut rows = String::from("receiver\tx\ty\tz\trender_ms\n");
    for (i, e) in set.entries.iter().enumerate() {
        let t0 = Instant::now();
        let rir = renderer.render(&e.receiver);
        let dt = t0.elapsed().as_secs_f64();
        render_secs += dt;
        let r = e.receiver;
        let _ = writeln!(rows, "{i}\t{}\t{}\t{}\t{:.6}", r[0], r[1], r[2], 1e3 * dt);
        let report = evaluate_pair(&rir.samples, &e.waveform, SAMPLE_RATE)
            .with_context(|| format!("scoring receiver {i} at {r:?}"))
            .map_err(Failure::Numeric)?;
        reports.push(report);
    }
    let summary = summarize(&reports);
    let per_rir_ms = 1e3 * render_secs / set.len() as f64;

    create_dir(&out)?;
    run.echo(&out).map_err(data)?;
    write_file(&out.join(METRICS_FILE), &report_tsv(&reports, &summary))?;
    write_file(&out.join("receivers.tsv"), &rows)?;
    let json = serde_json::json!({
        "checkpoint": args.checkpoint,
        "receivers": set.len(),
        "alive_poles": ckpt.model.alive_count(),
        "inference_ms_per_rir": per_rir_ms,
        "summary": summary,
    });
    let text = serde_json::to_string_pretty(&json).expect("summary serializes");
    write_file(&out.join(SUMMARY_FILE), &text)?;
    eprintln!(
        "{} receivers  amp {:.4}  C50 {:.3} dB  {:.2} ms/RIR",
        set.len(),
        summary.amplitude,
        summary.c50,
        per_rir_ms
    );
    Ok(())
}

fn render(args: RenderArgs) -> CmdResult {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let rir = Renderer::new(&ckpt.model).render(&args.receiver);
    write_wav(&args.out, &rir.samples, SAMPLE_RATE as u32)?;
    Ok(())
}

/// Per-pole table: initial id, position, signal energy.
pub fn pole_table(model: &NamsModel) -> String {
    let mut s = String::from("id\tx\ty\tz\tenergy\n");
    let energies = pole_energies(model);
    for ((id, p), e) in model.pole_ids().iter().zip(model.pole_positions()).zip(energies) {
        let _ = writeln!(s, "{id}\t{:e}\t{:e}\t{:e}\t{e:e}", p[0], p[1], p[2]);
    }
    s
}

fn inspect(args: InspectArgs) -> CmdResult {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    write_file(&args.out, &pole_table(&ckpt.model))
}

fn map(args: MapArgs) -> CmdResult {
    let (axis, offset) = args.plane;
    let free: Vec<usize> = (0..3).filter(|&a| a != axis).collect();
    let extent = match (args.extent, &args.corpus) {
        (Some(e), _) => e,
        (None, Some(path)) => {
            let corpus = load_corpus(path)?;
            let room = corpus
                .room
                .ok_or_else(|| config(anyhow!("{} records no room; pass --extent", path.display())))?;
            [0.0, room.dims[free[0]], 0.0, room.dims[free[1]]]
        }
        (None, None) => return Err(config(anyhow!("pass --extent or --corpus to bound the map"))),
    };
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let plane = Plane {
        axis,
        offset,
        min: [extent[0], extent[2]],
        max: [extent[1], extent[3]],
    };
    let m = spatial_magnitude_map(&ckpt.model, &plane, args.res, args.band)?;
    let names = ["x", "y", "z"];
    let mut s = format!("i\tj\t{}\t{}\tmagnitude\n", names[free[0]], names[free[1]]);
    for j in 0..m.resolution {
        for i in 0..m.resolution {
            let _ = writeln!(s, "{i}\t{j}\t{:e}\t{:e}\t{:e}", m.u[i], m.v[j], m.get(i, j));
        }
    }
    write_file(&args.out, &s)?;
    if let Some(path) = args.pgm {
        fs::write(&path, pgm(&m.values, m.resolution))
            .with_context(|| format!("writing {}", path.display()))
            .map_err(data)?;
    }
    Ok(())
}

/// 8-bit grayscale over a 60 dB range below the peak, first row at the top.
fn pgm(values: &[f64], res: usize) -> Vec<u8> {
    let peak = values.iter().cloned().fold(f64::MIN_POSITIVE, f64::max);
    let mut out = format!("P5\n{res} {res}\n255\n").into_bytes();
    for row in values.chunks(res).rev() {
        for &v in row {
            let db = 20.0 * (v.max(1e-300) / peak).log10();
            out.push((255.0 * (1.0 + db / 60.0)).clamp(0.0, 255.0).round() as u8);
        }
    }
    out
}

fn run(cli: Cli) -> CmdResult {
    match cli.command {
        Command::Generate(a) => generate(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Render(a) => render(a),
        Command::Inspect(a) => inspect(a),
        Command::Map(a) => map(a),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error());
            ExitCode::from(f.code())
        }
    }
}
