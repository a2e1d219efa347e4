//! Command-line front end. Exit codes: 0 success, 1 runtime failure,
//! 2 usage or configuration error. Reports go to stdout, diagnostics to
//! stderr.

use std::ffi::OsString;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::association::{ground_truth_tracks, read_tracks, track_sequence, write_tracks, TrackConfig, TrackSet, DEFAULT_BIRTH_THRESHOLD};
use crate::crop::DEFAULT_POINTS_PER_OBJECT;
use crate::error::{Error, Result};
use crate::ingest::{IngestConfig, SequenceSource};
use crate::losscheck::{self, LossCheckConfig};
use crate::metrics::{evaluate, DEFAULT_MATCH_RADIUS};
use crate::model::ModelWeights;
use crate::synth::{self, parse_leave, ConfModel, SynthConfig, SynthEvent};
use crate::train::{self, TrainConfig};

pub const THREADS_ENV: &str = "PCDAN_THREADS";

#[derive(Debug, Parser)]
#[command(name = "pcdan", version, about = "3D multi-object tracking with a point-cloud affinity network")]
pub struct Cli {
    /// Worker threads (default: $PCDAN_THREADS, else all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic sequence with ground-truth identities.
    Synth(SynthArgs),
    /// Fit the affinity network on a labeled sequence.
    Train(TrainArgs),
    /// Link the detections of a sequence into tracks.
    Track(TrackArgs),
    /// CLEAR-MOT evaluation of predicted tracks.
    Eval(EvalArgs),
    /// Check loss gradients and identities on random instances.
    Losscheck(LosscheckArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// key=value scene file; explicit flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub objects: Option<usize>,
    #[arg(long)]
    pub frames: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub points_per_object: Option<usize>,
    /// `frame:object`, repeatable.
    #[arg(long = "leave")]
    pub leave: Vec<String>,
    /// Frame at which a new object appears, repeatable.
    #[arg(long = "enter")]
    pub enter: Vec<u64>,
    /// Box-center jitter, meters.
    #[arg(long)]
    pub noise_sigma: Option<f64>,
    #[arg(long)]
    pub fp_rate: Option<f64>,
    #[arg(long)]
    pub fn_rate: Option<f64>,
    /// Injected false positives get confidences uniform on [0, this].
    #[arg(long)]
    pub fp_conf_max: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub seq: PathBuf,
    /// Output weights file.
    #[arg(long)]
    pub out: PathBuf,
    /// Start from these weights instead of a seeded initialization.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Per-step loss CSV; stdout when omitted.
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    pub steps: usize,
    #[arg(long, default_value_t = 1e-2)]
    pub lr: f64,
    #[arg(long, default_value_t = 4)]
    pub batch_pairs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub gap_min: u64,
    #[arg(long, default_value_t = 3)]
    pub gap_max: u64,
    #[arg(long, default_value_t = DEFAULT_POINTS_PER_OBJECT)]
    pub points_per_object: usize,
    /// Compression widths after the pair layer, comma separated, ending in 1.
    #[arg(long, value_delimiter = ',')]
    pub hidden: Option<Vec<usize>>,
    #[arg(long, default_value_t = 100)]
    pub max_objects: usize,
}

#[derive(Debug, Args)]
pub struct TrackArgs {
    #[arg(long)]
    pub seq: PathBuf,
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long, default_value = "tracks.csv")]
    pub out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_BIRTH_THRESHOLD)]
    pub birth_threshold: f64,
    #[arg(long, default_value_t = 0.4)]
    pub conf_threshold: f64,
    #[arg(long, default_value_t = 100)]
    pub max_objects: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = DEFAULT_POINTS_PER_OBJECT)]
    pub points_per_object: usize,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Sequence directory or track CSV.
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long, default_value_t = DEFAULT_MATCH_RADIUS)]
    pub radius: f64,
    /// Also write the JSON report here.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct LosscheckArgs {
    #[arg(long, default_value_t = 25)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 8)]
    pub max_objects: usize,
    #[arg(long, hide = true)]
    pub corrupt_gradient: Option<f64>,
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I, out: &mut (dyn Write + Send), err: &mut (dyn Write + Send)) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() {
                let _ = write!(err, "{}", e.render());
                2
            } else {
                let _ = write!(out, "{}", e.render());
                0
            };
            return code;
        }
    };
    match execute(cli, out, err) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidArgument(_) | Error::Config(_) => 2,
        _ => 1,
    }
}

fn thread_count(flag: Option<usize>) -> Result<Option<usize>> {
    if let Some(n) = flag {
        return Ok(Some(n));
    }
    match std::env::var(THREADS_ENV) {
        Ok(v) if !v.trim().is_empty() => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::InvalidArgument(format!("{THREADS_ENV} must be a positive integer, got {v:?}"))),
        _ => Ok(None),
    }
}

fn execute(cli: Cli, out: &mut (dyn Write + Send), err: &mut (dyn Write + Send)) -> Result<i32> {
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = thread_count(cli.threads)? {
        if n == 0 {
            return Err(Error::InvalidArgument("--threads must be at least 1".into()));
        }
        pool = pool.num_threads(n);
    }
    let pool = pool.build().map_err(|e| Error::Config(e.to_string()))?;
    pool.install(|| match cli.command {
        Command::Synth(a) => cmd_synth(a, out, err),
        Command::Train(a) => cmd_train(a, out, err),
        Command::Track(a) => cmd_track(a, out, err),
        Command::Eval(a) => cmd_eval(a, out, err),
        Command::Losscheck(a) => cmd_losscheck(a, out, err),
    })
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |e| Error::io(path, e)
}

fn stdout_err(e: std::io::Error) -> Error {
    Error::io("<stdout>", e)
}

pub fn cmd_synth(a: SynthArgs, out: &mut (dyn Write + Send), _err: &mut (dyn Write + Send)) -> Result<i32> {
    let (mut cfg, noise) = match &a.config {
        Some(p) => SynthConfig::from_kv(&fs::read_to_string(p).map_err(io_err(p))?)?,
        None => (SynthConfig::default(), None),
    };
    if let Some(v) = a.objects {
        cfg.n_objects = v;
    }
    if let Some(v) = a.frames {
        cfg.n_frames = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.points_per_object {
        cfg.points_per_object = v;
    }
    for l in &a.leave {
        cfg.events.push(parse_leave(l)?);
    }
    cfg.events.extend(a.enter.iter().map(|&frame| SynthEvent::Enter { frame }));

    let flag_noise = a.noise_sigma.is_some() || a.fp_rate.is_some() || a.fn_rate.is_some() || a.fp_conf_max.is_some();
    let noise = if flag_noise || noise.is_some() {
        let mut p = noise.unwrap_or_default();
        p.det_noise_sigma = a.noise_sigma.unwrap_or(p.det_noise_sigma);
        p.fp_rate = a.fp_rate.unwrap_or(p.fp_rate);
        p.fn_rate = a.fn_rate.unwrap_or(p.fn_rate);
        if let Some(max) = a.fp_conf_max {
            p.conf_model = ConfModel::Capped { max };
        }
        p.seed = cfg.seed;
        p.arena = cfg.arena;
        Some(p)
    } else {
        None
    };

    fs::create_dir_all(&a.out).map_err(io_err(&a.out))?;
    let name = cfg.name.clone().or_else(|| Some(format!("synth-{}", cfg.seed)));
    let mut frames = synth::generate_frames(&cfg)?;
    if let Some(p) = &noise {
        frames = synth::perturb_frames(&frames, p)?;
    }
    let src = synth::write_sequence(&a.out, &frames, name)?;
    let detections: usize = frames.iter().map(|f| f.detections.len()).sum();
    writeln!(out, "frames={} detections={detections} out={}", src.frame_count, a.out.display()).map_err(stdout_err)?;
    Ok(0)
}

pub fn cmd_train(a: TrainArgs, out: &mut (dyn Write + Send), err: &mut (dyn Write + Send)) -> Result<i32> {
    let ingest = IngestConfig {
        max_objects: a.max_objects,
        ..Default::default()
    };
    ingest.validate()?;
    let cfg = TrainConfig {
        learning_rate: a.lr,
        steps: a.steps,
        batch_pairs: a.batch_pairs,
        seed: a.seed,
        gap_min: a.gap_min,
        gap_max: a.gap_max,
        points_per_object: a.points_per_object,
    };
    cfg.validate()?;
    let src = SequenceSource::open(&a.seq, ingest)?;
    let init = match (&a.init, &a.hidden) {
        (Some(p), _) => ModelWeights::load(p)?,
        (None, Some(hidden)) => ModelWeights::random_with_widths(&crate::featurize::DEFAULT_POINTNET_WIDTHS, hidden, a.seed)?,
        (None, None) => ModelWeights::random(a.seed)?,
    };
    let model = match &a.log {
        Some(p) => {
            let mut log = BufWriter::new(fs::File::create(p).map_err(io_err(p))?);
            let m = train::train(&src, &cfg, init, &mut log)?;
            log.flush().map_err(io_err(p))?;
            m
        }
        None => train::train(&src, &cfg, init, out)?,
    };
    model.save(&a.out)?;
    writeln!(err, "wrote {}", a.out.display()).map_err(stdout_err)?;
    Ok(0)
}

pub fn cmd_track(a: TrackArgs, out: &mut (dyn Write + Send), _err: &mut (dyn Write + Send)) -> Result<i32> {
    let ingest = IngestConfig {
        confidence_threshold: a.conf_threshold,
        max_objects: a.max_objects,
    };
    ingest.validate()?;
    let cfg = TrackConfig {
        points_per_object: a.points_per_object,
        birth_threshold: a.birth_threshold,
        seed: a.seed,
    };
    let model = ModelWeights::load(&a.weights)?;
    let src = SequenceSource::open(&a.seq, ingest)?;
    let result = track_sequence(&src, &model, &cfg)?;
    write_tracks(&result.tracks, &a.out)?;
    writeln!(
        out,
        "frames={} tracks={} rows={} seconds_per_frame={:.6}",
        result.frames,
        result.tracks.len(),
        result.tracks.entry_count(),
        result.seconds_per_frame
    )
    .map_err(stdout_err)?;
    Ok(0)
}

/// Ground truth plus the frame range it covers.
fn load_ground_truth(path: &Path) -> Result<(TrackSet, Option<(u64, u64)>)> {
    if path.is_dir() {
        let src = SequenceSource::open(path, IngestConfig::default())?;
        let range = (src.frame_count > 0).then(|| (0, src.frame_count - 1));
        Ok((ground_truth_tracks(&src)?, range))
    } else {
        let ts = read_tracks(path)?;
        let frames = ts.frames();
        let range = frames.first().zip(frames.last()).map(|(a, b)| (*a, *b));
        Ok((ts, range))
    }
}

pub fn cmd_eval(a: EvalArgs, out: &mut (dyn Write + Send), _err: &mut (dyn Write + Send)) -> Result<i32> {
    if !(a.radius.is_finite() && a.radius > 0.0) {
        return Err(Error::InvalidArgument(format!("--radius must be positive, got {}", a.radius)));
    }
    let (gt, range) = load_ground_truth(&a.gt)?;
    let pred = read_tracks(&a.pred)?;
    if let Some(&f) = pred
        .frames()
        .iter()
        .find(|&&f| range.is_none_or(|(lo, hi)| f < lo || f > hi))
    {
        return Err(Error::Data(format!(
            "prediction frame {f} lies outside the ground-truth frame range {}",
            match range {
                Some((lo, hi)) => format!("[{lo}, {hi}]"),
                None => "(empty)".into(),
            }
        )));
    }
    let report = evaluate(&gt, &pred, a.radius)?;
    writeln!(out, "{report}").map_err(stdout_err)?;
    writeln!(out, "{}", report.to_json()).map_err(stdout_err)?;
    if let Some(p) = &a.json {
        fs::write(p, report.to_json() + "\n").map_err(io_err(p))?;
    }
    Ok(0)
}

pub fn cmd_losscheck(a: LosscheckArgs, out: &mut (dyn Write + Send), _err: &mut (dyn Write + Send)) -> Result<i32> {
    let cfg = LossCheckConfig {
        trials: a.trials,
        seed: a.seed,
        max_objects: a.max_objects,
        corrupt_gradient: a.corrupt_gradient,
        ..Default::default()
    };
    let report = losscheck::run(&cfg)?;
    for c in &report.checks {
        writeln!(out, "{c}").map_err(stdout_err)?;
    }
    Ok(if report.all_passed() { 0 } else { 1 })
}
