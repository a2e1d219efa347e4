//! Deterministic synthetic scenes with ground-truth identities.
//!
//! Objects are boxes, ellipsoids or elliptic cylinders whose surfaces are
//! sampled as points (a crude LIDAR return). They move at constant speed,
//! bounce off the arena walls and never come closer than the sum of their
//! box diagonals. Detections are the exact boxes with confidence 1.

use std::f64::consts::TAU;
use std::path::Path;
use std::str::FromStr;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{Detection, Frame, OrientedBox3, Point3, PointCloud};
use crate::ingest::{write_frame, write_meta, IngestConfig, SequenceMeta, SequenceSource};

// sampled surfaces are pulled inward so f32 storage cannot push a point
// across a box face
const SURFACE_SHRINK: f64 = 0.98;
const MAX_LAYOUT_ATTEMPTS: usize = 2000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ShapeKind {
    BoxShell,
    SphereShell,
    CylinderShell,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::BoxShell, ShapeKind::SphereShell, ShapeKind::CylinderShell];

    pub fn name(&self) -> &'static str {
        match self {
            ShapeKind::BoxShell => "box_shell",
            ShapeKind::SphereShell => "sphere_shell",
            ShapeKind::CylinderShell => "cylinder_shell",
        }
    }

    /// A point on the surface, in box-local coordinates for extents `(l, w, h)`.
    fn sample<R: Rng>(&self, rng: &mut R, l: f64, w: f64, h: f64) -> Point3 {
        let (a, b, c) = (l / 2.0, w / 2.0, h / 2.0);
        match self {
            ShapeKind::BoxShell => {
                let areas = [w * h, w * h, l * h, l * h, l * w, l * w];
                let total: f64 = areas.iter().sum();
                let mut pick = rng.random_range(0.0..total);
                let mut face = 0;
                while pick >= areas[face] && face < 5 {
                    pick -= areas[face];
                    face += 1;
                }
                let (u, v) = (rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0));
                match face {
                    0 => Point3::new(a, u * b, v * c),
                    1 => Point3::new(-a, u * b, v * c),
                    2 => Point3::new(u * a, b, v * c),
                    3 => Point3::new(u * a, -b, v * c),
                    4 => Point3::new(u * a, v * b, c),
                    _ => Point3::new(u * a, v * b, -c),
                }
            }
            ShapeKind::SphereShell => {
                let z: f64 = rng.random_range(-1.0..=1.0);
                let phi = rng.random_range(0.0..TAU);
                let r = (1.0 - z * z).max(0.0).sqrt();
                Point3::new(a * r * phi.cos(), b * r * phi.sin(), c * z)
            }
            ShapeKind::CylinderShell => {
                let phi = rng.random_range(0.0..TAU);
                let side = std::f64::consts::PI * (a + b) * h;
                let cap = std::f64::consts::PI * a * b;
                let pick = rng.random_range(0.0..side + 2.0 * cap);
                if pick < side {
                    Point3::new(a * phi.cos(), b * phi.sin(), rng.random_range(-c..=c))
                } else {
                    let r = rng.random_range(0.0f64..=1.0).sqrt();
                    let z = if pick < side + cap { c } else { -c };
                    Point3::new(a * r * phi.cos(), b * r * phi.sin(), z)
                }
            }
        }
    }
}

impl FromStr for ShapeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ShapeKind::ALL
            .into_iter()
            .find(|k| k.name() == s.trim())
            .ok_or_else(|| Error::InvalidArgument(format!("unknown shape kind {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthEvent {
    /// Object `object` (its ground-truth id) is absent from `frame` onward.
    Leave { frame: u64, object: u64 },
    /// A new object appears at `frame`.
    Enter { frame: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_objects: usize,
    pub n_frames: u64,
    pub seed: u64,
    pub points_per_object: usize,
    pub shape_kinds: Vec<ShapeKind>,
    /// Meters per frame.
    pub speed_range: (f64, f64),
    /// `(x_min, y_min, x_max, y_max)`; objects rest on `z = 0`.
    pub arena: (f64, f64, f64, f64),
    pub events: Vec<SynthEvent>,
    pub name: Option<String>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_objects: 3,
            n_frames: 20,
            seed: 0,
            points_per_object: 200,
            shape_kinds: ShapeKind::ALL.to_vec(),
            speed_range: (0.05, 0.4),
            arena: (-30.0, -30.0, 30.0, 30.0),
            events: Vec::new(),
            name: None,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.points_per_object == 0 {
            return bad("points_per_object must be positive".into());
        }
        if self.shape_kinds.is_empty() {
            return bad("at least one shape kind is required".into());
        }
        let (lo, hi) = self.speed_range;
        if !(lo >= 0.0 && hi >= lo && hi.is_finite()) {
            return bad(format!("invalid speed range [{lo}, {hi}]"));
        }
        let (x0, y0, x1, y1) = self.arena;
        if !(x1 - x0 > 10.0 && y1 - y0 > 10.0) {
            return bad("arena must be at least 10 m on each side".into());
        }
        let total = self.total_objects() as u64;
        for e in &self.events {
            match *e {
                SynthEvent::Leave { frame, object } if object >= total || frame >= self.n_frames.max(1) => {
                    return bad(format!("leave event {e:?} is out of range"));
                }
                SynthEvent::Enter { frame } if frame >= self.n_frames.max(1) => {
                    return bad(format!("enter event {e:?} is out of range"));
                }
                _ => {}
            }
        }
        Ok(())
    }

    fn total_objects(&self) -> usize {
        self.n_objects + self.events.iter().filter(|e| matches!(e, SynthEvent::Enter { .. })).count()
    }

    /// Parses `key=value` lines. Unknown keys are rejected.
    ///
    /// Keys: `objects`, `frames`, `seed`, `points_per_object`, `shapes`
    /// (comma list), `speed_min`, `speed_max`, `arena` (`xmin,ymin,xmax,ymax`),
    /// `leave` (`frame:object` list), `enter` (frame list), `name`.
    pub fn from_kv(text: &str) -> Result<(Self, Option<PerturbConfig>)> {
        let mut cfg = SynthConfig::default();
        let mut noise = PerturbConfig::default();
        let mut noisy = false;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |m: String| Error::InvalidArgument(format!("line {}: {m}", lineno + 1));
            let (k, v) = line.split_once('=').ok_or_else(|| err(format!("expected key=value, got {line:?}")))?;
            let v = v.trim();
            fn num<T: FromStr>(v: &str, k: &str) -> Result<T> {
                v.parse().map_err(|_| Error::InvalidArgument(format!("bad value for {k}: {v:?}")))
            }
            match k.trim() {
                "objects" => cfg.n_objects = num(v, k)?,
                "frames" => cfg.n_frames = num(v, k)?,
                "seed" => cfg.seed = num(v, k)?,
                "points_per_object" => cfg.points_per_object = num(v, k)?,
                "shapes" => cfg.shape_kinds = v.split(',').map(str::parse).collect::<Result<_>>()?,
                "speed_min" => cfg.speed_range.0 = num(v, k)?,
                "speed_max" => cfg.speed_range.1 = num(v, k)?,
                "arena" => {
                    let p: Vec<f64> = v.split(',').map(|x| num(x.trim(), k)).collect::<Result<_>>()?;
                    if p.len() != 4 {
                        return Err(err("arena needs four numbers".into()));
                    }
                    cfg.arena = (p[0], p[1], p[2], p[3]);
                }
                "leave" => {
                    for item in v.split(',').filter(|s| !s.trim().is_empty()) {
                        cfg.events.push(parse_leave(item)?);
                    }
                }
                "enter" => {
                    for item in v.split(',').filter(|s| !s.trim().is_empty()) {
                        cfg.events.push(SynthEvent::Enter { frame: num(item.trim(), k)? });
                    }
                }
                "name" => cfg.name = Some(v.to_string()),
                "noise_sigma" => {
                    noise.det_noise_sigma = num(v, k)?;
                    noisy = true;
                }
                "fp_rate" => {
                    noise.fp_rate = num(v, k)?;
                    noisy = true;
                }
                "fn_rate" => {
                    noise.fn_rate = num(v, k)?;
                    noisy = true;
                }
                "fp_conf_max" => {
                    noise.conf_model = ConfModel::Capped { max: num(v, k)? };
                    noisy = true;
                }
                other => return Err(err(format!("unknown key {other:?}"))),
            }
        }
        noise.seed = cfg.seed;
        Ok((cfg, noisy.then_some(noise)))
    }
}

/// Parses `frame:object`.
pub fn parse_leave(s: &str) -> Result<SynthEvent> {
    let (f, o) = s
        .trim()
        .split_once(':')
        .ok_or_else(|| Error::InvalidArgument(format!("leave event must be frame:object, got {s:?}")))?;
    let parse = |x: &str| {
        x.trim()
            .parse::<u64>()
            .map_err(|_| Error::InvalidArgument(format!("bad leave event {s:?}")))
    };
    Ok(SynthEvent::Leave {
        frame: parse(f)?,
        object: parse(o)?,
    })
}

#[derive(Debug, Clone)]
struct SceneObject {
    id: u64,
    shape: ShapeKind,
    dims: (f64, f64, f64),
    // per-frame xy center and heading, indexed from `first`
    first: u64,
    last_exclusive: u64,
    track: Vec<(f64, f64, f64)>,
}

impl SceneObject {
    fn diagonal(&self) -> f64 {
        let (l, w, h) = self.dims;
        (l * l + w * w + h * h).sqrt()
    }

    fn alive(&self, frame: u64) -> bool {
        frame >= self.first && frame < self.last_exclusive
    }

    fn bbox(&self, frame: u64) -> OrientedBox3 {
        let (x, y, yaw) = self.track[(frame - self.first) as usize];
        let (l, w, h) = self.dims;
        OrientedBox3::new(Point3::new(x, y, h / 2.0), l, w, h, yaw).expect("generated boxes are valid")
    }
}

fn sample_dims<R: Rng>(rng: &mut R, shape: ShapeKind, taken: &[(ShapeKind, (f64, f64, f64))]) -> (f64, f64, f64) {
    // same-kind objects differ by at least 0.4 m in some extent
    for _ in 0..200 {
        let d = (rng.random_range(0.6..4.0), rng.random_range(0.6..2.5), rng.random_range(0.8..2.2));
        let distinct = taken.iter().filter(|(k, _)| *k == shape).all(|(_, o)| {
            (d.0 - o.0).abs().max((d.1 - o.1).abs()).max((d.2 - o.2).abs()) >= 0.4
        });
        if distinct {
            return d;
        }
    }
    (rng.random_range(0.6..4.0), rng.random_range(0.6..2.5), rng.random_range(0.8..2.2))
}

fn simulate<R: Rng>(rng: &mut R, cfg: &SynthConfig, dims: (f64, f64, f64), first: u64, last: u64) -> Vec<(f64, f64, f64)> {
    let (x0, y0, x1, y1) = cfg.arena;
    let (l, w, h) = dims;
    let margin = (l * l + w * w + h * h).sqrt();
    let (lo_x, hi_x, lo_y, hi_y) = (x0 + margin, x1 - margin, y0 + margin, y1 - margin);
    let mut x = rng.random_range(lo_x..hi_x);
    let mut y = rng.random_range(lo_y..hi_y);
    let speed = if cfg.speed_range.1 > cfg.speed_range.0 {
        rng.random_range(cfg.speed_range.0..cfg.speed_range.1)
    } else {
        cfg.speed_range.0
    };
    let heading: f64 = rng.random_range(0.0..TAU);
    let (mut vx, mut vy) = (speed * heading.cos(), speed * heading.sin());
    let mut track = Vec::with_capacity((last - first) as usize);
    for _ in first..last {
        track.push((x, y, vy.atan2(vx)));
        if !(lo_x..=hi_x).contains(&(x + vx)) {
            vx = -vx;
        }
        if !(lo_y..=hi_y).contains(&(y + vy)) {
            vy = -vy;
        }
        x += vx;
        y += vy;
    }
    track
}

fn layout(cfg: &SynthConfig) -> Result<Vec<SceneObject>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n_frames = cfg.n_frames;
    for _ in 0..MAX_LAYOUT_ATTEMPTS {
        let mut objects: Vec<SceneObject> = Vec::new();
        let mut taken = Vec::new();
        let mut spawn = |first: u64, rng: &mut ChaCha8Rng, objects: &mut Vec<SceneObject>| {
            let shape = *cfg.shape_kinds.choose(rng).expect("shape kinds validated non-empty");
            let dims = sample_dims(rng, shape, &taken);
            taken.push((shape, dims));
            let id = objects.len() as u64;
            let last = cfg
                .events
                .iter()
                .filter_map(|e| match *e {
                    SynthEvent::Leave { frame, object } if object == id => Some(frame),
                    _ => None,
                })
                .min()
                .unwrap_or(n_frames)
                .max(first);
            let track = simulate(rng, cfg, dims, first, last);
            objects.push(SceneObject {
                id,
                shape,
                dims,
                first,
                last_exclusive: last,
                track,
            });
        };
        for _ in 0..cfg.n_objects {
            spawn(0, &mut rng, &mut objects);
        }
        let mut enters: Vec<u64> = cfg
            .events
            .iter()
            .filter_map(|e| match e {
                SynthEvent::Enter { frame } => Some(*frame),
                _ => None,
            })
            .collect();
        enters.sort_unstable();
        for f in enters {
            spawn(f, &mut rng, &mut objects);
        }
        if separated(&objects, n_frames) {
            return Ok(objects);
        }
    }
    Err(Error::Config(format!(
        "could not place {} objects without overlap in {MAX_LAYOUT_ATTEMPTS} attempts; enlarge the arena",
        cfg.total_objects()
    )))
}

fn separated(objects: &[SceneObject], n_frames: u64) -> bool {
    for f in 0..n_frames {
        let alive: Vec<_> = objects.iter().filter(|o| o.alive(f)).collect();
        for (k, a) in alive.iter().enumerate() {
            for b in &alive[k + 1..] {
                let (ax, ay, _) = a.track[(f - a.first) as usize];
                let (bx, by, _) = b.track[(f - b.first) as usize];
                if (ax - bx).hypot(ay - by) < a.diagonal() + b.diagonal() {
                    return false;
                }
            }
        }
    }
    true
}

fn frame_rng(seed: u64, frame: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.set_word_pos(frame as u128 * (1 << 40));
    rng
}

/// Builds all frames in memory.
pub fn generate_frames(cfg: &SynthConfig) -> Result<Vec<Frame>> {
    cfg.validate()?;
    let objects = layout(cfg)?;
    let frames = (0..cfg.n_frames)
        .into_par_iter()
        .map(|f| {
            let mut rng = frame_rng(cfg.seed, f, 1);
            let mut points = Vec::new();
            let mut detections = Vec::new();
            for o in objects.iter().filter(|o| o.alive(f)) {
                let b = o.bbox(f);
                let (l, w, h) = o.dims;
                for _ in 0..cfg.points_per_object {
                    let local = o.shape.sample(&mut rng, l, w, h);
                    let local = Point3::new(local.x * SURFACE_SHRINK, local.y * SURFACE_SHRINK, local.z * SURFACE_SHRINK);
                    points.push(b.to_world(&local));
                }
                detections.push(Detection::new(b, 1.0, Some(o.id)).expect("confidence 1 is valid"));
            }
            detections.shuffle(&mut rng);
            Frame {
                index: f,
                cloud: PointCloud::new(f, points),
                detections,
            }
        })
        .collect();
    Ok(frames)
}

/// Writes `frames` as a sequence directory.
pub fn write_sequence(out_dir: &Path, frames: &[Frame], name: Option<String>) -> Result<SequenceSource> {
    write_meta(
        out_dir,
        &SequenceMeta {
            frame_count: frames.len() as u64,
            name,
        },
    )?;
    frames.par_iter().try_for_each(|f| write_frame(out_dir, f))?;
    SequenceSource::open(out_dir, IngestConfig::default())
}

pub fn generate(cfg: &SynthConfig, out_dir: impl AsRef<Path>) -> Result<SequenceSource> {
    let frames = generate_frames(cfg)?;
    let name = cfg.name.clone().or_else(|| Some(format!("synth-{}", cfg.seed)));
    write_sequence(out_dir.as_ref(), &frames, name)
}

/// Confidence distribution of injected false positives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ConfModel {
    /// Uniform on `[0, max]`.
    Capped { max: f64 },
    /// Below `threshold` with probability `bias`, otherwise above it.
    Biased { threshold: f64, bias: f64 },
}

impl ConfModel {
    fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        match *self {
            ConfModel::Capped { max } => rng.random_range(0.0..=max),
            ConfModel::Biased { threshold, bias } => {
                if rng.random_bool(bias) {
                    rng.random_range(0.0..=threshold)
                } else {
                    // strictly above the threshold
                    let lo = threshold + (1.0 - threshold) * 1e-9;
                    rng.random_range(lo..=1.0)
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerturbConfig {
    /// Standard deviation of the isotropic Gaussian jitter on box centers, meters.
    pub det_noise_sigma: f64,
    /// Chance that each true detection brings along one spurious box.
    pub fp_rate: f64,
    /// Chance that each true detection is dropped.
    pub fn_rate: f64,
    pub conf_model: ConfModel,
    pub seed: u64,
    pub arena: (f64, f64, f64, f64),
}

impl Default for PerturbConfig {
    fn default() -> Self {
        Self {
            det_noise_sigma: 0.0,
            fp_rate: 0.0,
            fn_rate: 0.0,
            conf_model: ConfModel::Capped { max: 0.4 },
            seed: 0,
            arena: SynthConfig::default().arena,
        }
    }
}

impl PerturbConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.det_noise_sigma.is_finite() && self.det_noise_sigma >= 0.0) {
            return Err(Error::Config(format!("noise sigma must be non-negative, got {}", self.det_noise_sigma)));
        }
        for (name, r) in [("fp_rate", self.fp_rate), ("fn_rate", self.fn_rate)] {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {r}")));
            }
        }
        match self.conf_model {
            ConfModel::Capped { max } if !(0.0..=1.0).contains(&max) => {
                Err(Error::Config(format!("fp confidence cap must lie in [0, 1], got {max}")))
            }
            ConfModel::Biased { threshold, bias } if !(0.0..=1.0).contains(&threshold) || !(0.0..=1.0).contains(&bias) => {
                Err(Error::Config("biased confidence model needs threshold and bias in [0, 1]".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Applies detection noise to in-memory frames. Point clouds are untouched.
pub fn perturb_frames(frames: &[Frame], cfg: &PerturbConfig) -> Result<Vec<Frame>> {
    cfg.validate()?;
    let jitter = Normal::new(0.0, cfg.det_noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
    let (x0, y0, x1, y1) = cfg.arena;
    frames
        .par_iter()
        .map(|frame| {
            let mut rng = frame_rng(cfg.seed, frame.index, 2);
            let mut out = Vec::with_capacity(frame.detections.len());
            for d in &frame.detections {
                let spurious = rng.random_bool(cfg.fp_rate);
                if !rng.random_bool(cfg.fn_rate) {
                    let mut kept = *d;
                    if cfg.det_noise_sigma > 0.0 {
                        let c = &mut kept.bbox.center;
                        c.x += jitter.sample(&mut rng);
                        c.y += jitter.sample(&mut rng);
                        c.z += jitter.sample(&mut rng);
                    }
                    out.push(kept);
                }
                if spurious {
                    let h = rng.random_range(0.5..2.0);
                    let b = OrientedBox3::new(
                        Point3::new(rng.random_range(x0..x1), rng.random_range(y0..y1), h / 2.0),
                        rng.random_range(0.5..3.0),
                        rng.random_range(0.5..2.0),
                        h,
                        rng.random_range(-3.0..3.0),
                    )?;
                    let fp = Detection::new(b, cfg.conf_model.sample(&mut rng), None)?;
                    let at = rng.random_range(0..=out.len());
                    out.insert(at, fp);
                }
            }
            Ok(Frame {
                index: frame.index,
                cloud: frame.cloud.clone(),
                detections: out,
            })
        })
        .collect()
}

/// Reads `src`, perturbs its detections and writes the result to `out_dir`.
pub fn perturb(src: &SequenceSource, out_dir: impl AsRef<Path>, cfg: &PerturbConfig) -> Result<SequenceSource> {
    let frames = (0..src.frame_count).map(|i| src.load_frame(i)).collect::<Result<Vec<_>>>()?;
    let noisy = perturb_frames(&frames, cfg)?;
    write_sequence(out_dir.as_ref(), &noisy, src.name.clone())
}
