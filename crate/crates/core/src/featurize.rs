//! PointNet-lite object features: a shared per-point MLP followed by a max
//! over the valid (non-padding) points.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::crop::ObjectPoints;
use crate::error::{Error, Result};
use crate::nn::{self, DenseLayer};

pub const POINTNET_MAGIC: &[u8; 4] = b"PNW1";
pub const DEFAULT_POINTNET_WIDTHS: [usize; 4] = [3, 64, 128, 512];

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVec(pub Vec<f64>);

impl FeatureVec {
    pub fn zeros(width: usize) -> Self {
        Self(vec![0.0; width])
    }

    pub fn width(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Features for the admitted objects of one frame. Slots at or beyond
/// `count()` read as zero vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    features: Vec<FeatureVec>,
    capacity: usize,
    width: usize,
    pub frame_index: u64,
}

impl FeatureSet {
    pub fn new(frame_index: u64, width: usize, capacity: usize, features: Vec<FeatureVec>) -> Result<Self> {
        if features.len() > capacity {
            return Err(Error::Config(format!(
                "{} objects exceed the frame capacity {capacity}",
                features.len()
            )));
        }
        if let Some(f) = features.iter().find(|f| f.width() != width) {
            return Err(Error::Config(format!("feature width {} does not match {width}", f.width())));
        }
        Ok(Self {
            features,
            capacity,
            width,
            frame_index,
        })
    }

    pub fn empty(frame_index: u64, width: usize, capacity: usize) -> Self {
        Self {
            features: Vec::new(),
            capacity,
            width,
            frame_index,
        }
    }

    pub fn count(&self) -> usize {
        self.features.len()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// The populated slots only.
    pub fn features(&self) -> &[FeatureVec] {
        &self.features
    }

    /// Slot `i`, or `None` for a zero (unpopulated) slot.
    pub fn get(&self, i: usize) -> Option<&FeatureVec> {
        self.features.get(i)
    }

    /// Slot `i` as a dense vector, zeros past `count()`.
    pub fn slot(&self, i: usize) -> FeatureVec {
        self.get(i).cloned().unwrap_or_else(|| FeatureVec::zeros(self.width))
    }

    /// Reorders populated slots: new slot `k` holds old slot `order[k]`.
    pub fn permuted(&self, order: &[usize]) -> Self {
        assert_eq!(order.len(), self.count());
        Self {
            features: order.iter().map(|&k| self.features[k].clone()).collect(),
            ..self.clone()
        }
    }
}

/// Anything that turns a cropped object into a fixed-width feature.
pub trait Featurizer: Sync {
    fn feature_width(&self) -> usize;
    fn featurize(&self, obj: &ObjectPoints) -> Result<FeatureVec>;
}

/// Per-point layers `3 -> ... -> D`. ReLU follows every layer but the last.
#[derive(Debug, Clone, PartialEq)]
pub struct PointNetWeights {
    layers: Vec<DenseLayer>,
}

impl PointNetWeights {
    pub fn new(layers: Vec<DenseLayer>) -> Result<Self> {
        validate_pointnet(&layers).map_err(Error::Config)?;
        Ok(Self { layers })
    }

    /// He-initialized weights for the given widths (first width must be 3).
    pub fn random(widths: &[usize], seed: u64) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::Config("need at least one layer".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = widths
            .windows(2)
            .map(|w| DenseLayer::he_uniform(w[1], w[0], &mut rng))
            .collect();
        Self::new(layers)
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().map(|l| l.out_dim).unwrap_or(0)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        nn::write_section(w, POINTNET_MAGIC, &self.layers)
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let layers = nn::read_section(r, POINTNET_MAGIC)?;
        validate_pointnet(&layers).map_err(Error::Format)?;
        Ok(Self { layers })
    }

    /// Embedding of a single point (before pooling).
    pub fn embed_point(&self, p: [f64; 3]) -> Vec<f64> {
        let mut x = p.to_vec();
        let last = self.layers.len() - 1;
        for (k, layer) in self.layers.iter().enumerate() {
            x = layer.forward(&x);
            if k < last {
                nn::relu_in_place(&mut x);
            }
        }
        x
    }
}

fn validate_pointnet(layers: &[DenseLayer]) -> std::result::Result<(), String> {
    let first = layers.first().ok_or("PointNet needs at least one layer")?;
    if first.in_dim != 3 {
        return Err(format!("PointNet input width must be 3, got {}", first.in_dim));
    }
    nn::check_chain(layers)
}

/// Shared MLP on each valid point, element-wise max over valid points.
/// An object with no valid points maps to the zero vector.
pub fn pointnet_forward(obj: &ObjectPoints, w: &PointNetWeights) -> Result<FeatureVec> {
    if obj.valid_count > obj.points.len() {
        return Err(Error::Config("valid_count exceeds point capacity".into()));
    }
    let width = w.output_width();
    if obj.valid_count == 0 {
        return Ok(FeatureVec::zeros(width));
    }
    let mut pooled = vec![f64::NEG_INFINITY; width];
    for p in obj.valid() {
        let e = w.embed_point([p.x, p.y, p.z]);
        for (m, v) in pooled.iter_mut().zip(e) {
            if v > *m {
                *m = v;
            }
        }
    }
    Ok(FeatureVec(pooled))
}

impl Featurizer for PointNetWeights {
    fn feature_width(&self) -> usize {
        self.output_width()
    }

    fn featurize(&self, obj: &ObjectPoints) -> Result<FeatureVec> {
        pointnet_forward(obj, self)
    }
}

/// Featurizes every object of a frame; objects are processed in parallel.
pub fn featurize_frame<F: Featurizer + ?Sized>(
    frame_index: u64,
    objs: &[ObjectPoints],
    featurizer: &F,
    capacity: usize,
) -> Result<FeatureSet> {
    if objs.len() > capacity {
        return Err(Error::Config(format!(
            "{} objects exceed the frame capacity {capacity}",
            objs.len()
        )));
    }
    let features = objs
        .par_iter()
        .map(|o| featurizer.featurize(o))
        .collect::<Result<Vec<_>>>()?;
    FeatureSet::new(frame_index, featurizer.feature_width(), capacity, features)
}

pub fn save_weights(w: &PointNetWeights, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    w.write_to(&mut out).map_err(|e| Error::io(path, e))?;
    out.flush().map_err(|e| Error::io(path, e))
}

/// Reads the PointNet section at the start of a weights file. Any later
/// sections are ignored.
pub fn load_weights(path: impl AsRef<Path>) -> Result<PointNetWeights> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    PointNetWeights::read_from(&mut BufReader::new(file))
}
