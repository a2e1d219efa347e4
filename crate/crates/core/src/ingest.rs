//! On-disk sequence layout and the confidence admission filter.
//!
//! ```text
//! <root>/sequence.meta          frame_count=<n>, optional name=<str>
//! <root>/frames/<i>.xyz         little-endian f32 (x, y, z) triples
//! <root>/detections/<i>.csv     frame,conf,cx,cy,cz,l,w,h,yaw[,gt_id]
//! ```

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::geometry::{Detection, Frame, OrientedBox3, Point3, PointCloud};

pub const DETECTION_HEADER: &str = "frame,conf,cx,cy,cz,l,w,h,yaw";
pub const DETECTION_HEADER_GT: &str = "frame,conf,cx,cy,cz,l,w,h,yaw,gt_id";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IngestConfig {
    /// Detections must score strictly above this to be admitted.
    pub confidence_threshold: f64,
    /// Per-frame object capacity.
    pub max_objects: usize,
}

impl Default for IngestConfig {
    fn default() -> Self {
        Self {
            confidence_threshold: 0.4,
            max_objects: 100,
        }
    }
}

impl IngestConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.confidence_threshold) {
            return Err(Error::Config(format!(
                "confidence threshold must lie in [0, 1], got {}",
                self.confidence_threshold
            )));
        }
        if self.max_objects == 0 {
            return Err(Error::Config("max_objects must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SequenceMeta {
    pub frame_count: u64,
    pub name: Option<String>,
}

impl SequenceMeta {
    pub fn parse(path: &Path, text: &str) -> Result<Self> {
        let mut frame_count = None;
        let mut name = None;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let parse_err = |msg: String| Error::Parse {
                path: path.to_path_buf(),
                line: lineno as u64 + 1,
                msg,
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| parse_err(format!("expected key=value, got {line:?}")))?;
            match key.trim() {
                "frame_count" => {
                    let n = value
                        .trim()
                        .parse::<u64>()
                        .map_err(|e| parse_err(format!("bad frame_count: {e}")))?;
                    frame_count = Some(n);
                }
                "name" => name = Some(value.trim().to_string()),
                other => return Err(parse_err(format!("unknown key {other:?}"))),
            }
        }
        let frame_count = frame_count.ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            msg: "missing frame_count".into(),
        })?;
        Ok(Self { frame_count, name })
    }

    pub fn render(&self) -> String {
        let mut s = format!("frame_count={}\n", self.frame_count);
        if let Some(name) = &self.name {
            s.push_str(&format!("name={name}\n"));
        }
        s
    }
}

/// A sequence directory opened for reading.
#[derive(Debug, Clone)]
pub struct SequenceSource {
    pub root_path: PathBuf,
    pub frame_count: u64,
    pub name: Option<String>,
    pub config: IngestConfig,
}

impl SequenceSource {
    pub fn open(root: impl AsRef<Path>, config: IngestConfig) -> Result<Self> {
        config.validate()?;
        let root = root.as_ref().to_path_buf();
        let meta_path = root.join("sequence.meta");
        let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta = SequenceMeta::parse(&meta_path, &text)?;
        let src = Self {
            root_path: root,
            frame_count: meta.frame_count,
            name: meta.name,
            config,
        };
        for i in 0..src.frame_count {
            for p in [src.points_path(i), src.detections_path(i)] {
                if !p.is_file() {
                    return Err(Error::NotFound(p));
                }
            }
        }
        Ok(src)
    }

    pub fn points_path(&self, index: u64) -> PathBuf {
        points_path(&self.root_path, index)
    }

    pub fn detections_path(&self, index: u64) -> PathBuf {
        detections_path(&self.root_path, index)
    }

    /// Loads a frame exactly as stored, before admission.
    pub fn load_frame(&self, index: u64) -> Result<Frame> {
        if index >= self.frame_count {
            return Err(Error::InvalidArgument(format!(
                "frame {index} out of range (sequence has {} frames)",
                self.frame_count
            )));
        }
        let cloud = read_points(&self.points_path(index), index)?;
        let detections = read_detections(&self.detections_path(index))?;
        Ok(Frame {
            index,
            cloud,
            detections,
        })
    }

    /// Loads a frame and applies [`admit_detections`] with this source's config.
    pub fn load_admitted(&self, index: u64) -> Result<Frame> {
        Ok(admit_detections(self.load_frame(index)?, &self.config))
    }

    pub fn meta(&self) -> SequenceMeta {
        SequenceMeta {
            frame_count: self.frame_count,
            name: self.name.clone(),
        }
    }
}

pub fn points_path(root: &Path, index: u64) -> PathBuf {
    root.join("frames").join(format!("{index}.xyz"))
}

pub fn detections_path(root: &Path, index: u64) -> PathBuf {
    root.join("detections").join(format!("{index}.csv"))
}

pub fn read_points(path: &Path, frame_index: u64) -> Result<PointCloud> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_points(path, &bytes, frame_index)
}

pub fn decode_points(path: &Path, bytes: &[u8], frame_index: u64) -> Result<PointCloud> {
    if bytes.len() % 12 != 0 {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: (bytes.len() / 12 * 12) as u64,
            msg: format!("point file length {} is not a multiple of 12 bytes", bytes.len()),
        });
    }
    let mut points = Vec::with_capacity(bytes.len() / 12);
    for (k, chunk) in bytes.chunks_exact(12).enumerate() {
        let f = |o: usize| f32::from_le_bytes(chunk[o..o + 4].try_into().unwrap()) as f64;
        let p = Point3::new(f(0), f(4), f(8));
        if !p.is_finite() {
            return Err(Error::Data(format!(
                "{}: non-finite coordinate at byte offset {}",
                path.display(),
                k * 12
            )));
        }
        points.push(p);
    }
    Ok(PointCloud::new(frame_index, points))
}

pub fn encode_points(cloud: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(cloud.len() * 12);
    for p in &cloud.points {
        for v in [p.x, p.y, p.z] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn read_detections(path: &Path) -> Result<Vec<Detection>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(file);
    let parse_err = |line: u64, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let headers = reader
        .headers()
        .map_err(|e| parse_err(1, e.to_string()))?
        .iter()
        .map(str::trim)
        .collect::<Vec<_>>()
        .join(",");
    let has_gt = match headers.as_str() {
        DETECTION_HEADER => false,
        DETECTION_HEADER_GT => true,
        // a 0-byte file has no header; treat it as an empty list
        "" => return Ok(Vec::new()),
        other => return Err(parse_err(1, format!("unexpected header {other:?}"))),
    };
    let mut out = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            parse_err(line, e.to_string())
        })?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let num = |k: usize| -> Result<f64> {
            let field = record.get(k).unwrap_or("").trim();
            let v: f64 = field
                .parse()
                .map_err(|_| parse_err(line, format!("column {k}: not a number: {field:?}")))?;
            if !v.is_finite() {
                return Err(Error::Data(format!(
                    "{}:{line}: non-finite value in column {k}",
                    path.display()
                )));
            }
            Ok(v)
        };
        let conf = num(1)?;
        let center = Point3::new(num(2)?, num(3)?, num(4)?);
        let bbox = OrientedBox3::new(center, num(5)?, num(6)?, num(7)?, num(8)?)
            .map_err(|e| parse_err(line, e.to_string()))?;
        let gt_id = if has_gt {
            let field = record.get(9).unwrap_or("").trim();
            if field.is_empty() {
                None
            } else {
                Some(
                    field
                        .parse::<u64>()
                        .map_err(|_| parse_err(line, format!("bad gt_id {field:?}")))?,
                )
            }
        } else {
            None
        };
        let det = Detection::new(bbox, conf, gt_id).map_err(|e| parse_err(line, e.to_string()))?;
        out.push(det);
    }
    Ok(out)
}

/// Renders a detection file. The `gt_id` column is written when any
/// detection carries an identity; unlabeled rows leave it empty.
pub fn encode_detections(frame_index: u64, detections: &[Detection]) -> String {
    let has_gt = detections.iter().any(|d| d.gt_id.is_some());
    let mut s = String::new();
    s.push_str(if has_gt { DETECTION_HEADER_GT } else { DETECTION_HEADER });
    s.push('\n');
    for d in detections {
        let b = &d.bbox;
        s.push_str(&format!(
            "{frame_index},{},{},{},{},{},{},{},{}",
            d.confidence, b.center.x, b.center.y, b.center.z, b.length, b.width, b.height, b.yaw
        ));
        if has_gt {
            s.push(',');
            if let Some(id) = d.gt_id {
                s.push_str(&id.to_string());
            }
        }
        s.push('\n');
    }
    s
}

/// Writes one frame's point and detection files under `root`.
pub fn write_frame(root: &Path, frame: &Frame) -> Result<()> {
    let pp = points_path(root, frame.index);
    let dp = detections_path(root, frame.index);
    for p in [&pp, &dp] {
        if let Some(dir) = p.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    fs::write(&pp, encode_points(&frame.cloud)).map_err(|e| Error::io(&pp, e))?;
    fs::write(&dp, encode_detections(frame.index, &frame.detections)).map_err(|e| Error::io(&dp, e))?;
    Ok(())
}

pub fn write_meta(root: &Path, meta: &SequenceMeta) -> Result<()> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let path = root.join("sequence.meta");
    let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    f.write_all(meta.render().as_bytes()).map_err(|e| Error::io(&path, e))
}

/// Keeps detections scoring strictly above the threshold, highest confidence
/// first (stable on ties), truncated to the frame capacity.
pub fn admit_detections(mut frame: Frame, cfg: &IngestConfig) -> Frame {
    frame.detections.retain(|d| d.confidence > cfg.confidence_threshold);
    frame
        .detections
        .sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
    frame.detections.truncate(cfg.max_objects);
    frame
}
