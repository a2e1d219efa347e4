//! Gradient-descent fitting of the compression network and dummy score on
//! labeled frame pairs. PointNet weights stay frozen.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::affinity::{augment_and_softmax, CompressionNet};
use crate::crop::{crop_frame, DEFAULT_POINTS_PER_OBJECT};
use crate::error::{Error, Result};
use crate::featurize::{featurize_frame, FeatureSet, PointNetWeights};
use crate::ingest::SequenceSource;
use crate::loss::{compute_losses, loss_gradients, GroundTruthAssignment, LossBreakdown};
use crate::model::ModelWeights;
use crate::nn::{self, DenseLayer};

pub const LOSS_LOG_HEADER: &str = "step,l_f,l_b,l_c,l_a,total";

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_pairs: usize,
    pub seed: u64,
    /// Inclusive range of frame gaps `n` for sampled `(t-n, t)` pairs.
    pub gap_min: u64,
    pub gap_max: u64,
    pub points_per_object: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-2,
            steps: 1000,
            batch_pairs: 4,
            seed: 0,
            gap_min: 1,
            gap_max: 3,
            points_per_object: DEFAULT_POINTS_PER_OBJECT,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::Config(format!("learning rate must be non-negative, got {}", self.learning_rate)));
        }
        if self.batch_pairs == 0 {
            return Err(Error::Config("batch_pairs must be at least 1".into()));
        }
        if self.gap_min < 1 || self.gap_max < self.gap_min {
            return Err(Error::Config(format!(
                "frame gap range [{}, {}] is invalid",
                self.gap_min, self.gap_max
            )));
        }
        if self.points_per_object == 0 {
            return Err(Error::Config("points_per_object must be at least 1".into()));
        }
        Ok(())
    }
}

/// Features of two labeled frames plus their association targets.
#[derive(Debug, Clone)]
pub struct LabeledPair {
    pub prev: FeatureSet,
    pub cur: FeatureSet,
    pub gt: GroundTruthAssignment,
}

/// Same shapes as the network parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressionGrad {
    pub weight: Vec<Vec<f64>>,
    pub bias: Vec<Vec<f64>>,
    pub dummy: f64,
}

impl CompressionGrad {
    pub fn zeros_like(net: &CompressionNet) -> Self {
        Self {
            weight: net.layers().iter().map(|l| vec![0.0; l.weight.len()]).collect(),
            bias: net.layers().iter().map(|l| vec![0.0; l.bias.len()]).collect(),
            dummy: 0.0,
        }
    }

    fn add_scaled(&mut self, other: &CompressionGrad, k: f64) {
        for (a, b) in self.weight.iter_mut().zip(&other.weight).chain(self.bias.iter_mut().zip(&other.bias)) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += k * y;
            }
        }
        self.dummy += k * other.dummy;
    }

    pub fn is_finite(&self) -> bool {
        self.dummy.is_finite() && self.weight.iter().chain(&self.bias).flatten().all(|v| v.is_finite())
    }

    pub fn flat_len(&self) -> usize {
        self.weight.iter().chain(&self.bias).map(Vec::len).sum::<usize>() + 1
    }
}

struct CellTrace {
    // pre-activations of layers 1..4; the last layer's output is M[i, j]
    pre: Vec<Vec<f64>>,
}

/// Loss and parameter gradient for one frame pair.
pub fn pair_gradient(net: &CompressionNet, pair: &LabeledPair) -> Result<(LossBreakdown, CompressionGrad)> {
    let layers = net.layers();
    let (np, nc) = (pair.prev.count(), pair.cur.count());
    let t = crate::affinity::build_pair_tensor(&pair.prev, &pair.cur)?;
    if net.input_width() != t.channels() {
        return Err(Error::Config(format!(
            "compression input width {} does not match pair channels {}",
            net.input_width(),
            t.channels()
        )));
    }
    let p = net.project_first(&pair.prev, 0);
    let q = net.project_first(&pair.cur, 1);

    // forward over populated cells, keeping pre-activations
    let n = t.capacity();
    let padded = net.forward_cell(&vec![0.0; t.channels()]);
    let mut m = ndarray::Array2::from_elem((n, n), padded);
    let mut traces = Vec::with_capacity(np * nc);
    for i in 0..np {
        for j in 0..nc {
            let mut pre = Vec::with_capacity(layers.len() - 1);
            let z1: Vec<f64> = p[i]
                .iter()
                .zip(&q[j])
                .zip(&layers[0].bias)
                .map(|((a, b), c)| a + b + *c as f64)
                .collect();
            pre.push(z1);
            for layer in &layers[1..] {
                let mut h = pre.last().unwrap().clone();
                nn::relu_in_place(&mut h);
                pre.push(layer.forward(&h));
            }
            m[[i, j]] = pre.pop().unwrap()[0];
            traces.push(CellTrace { pre });
        }
    }

    let aff = augment_and_softmax(&m, np, nc, net.dummy_score as f64);
    let g = loss_gradients(&aff, &pair.gt);
    let d_m = g.d_m();

    let mut grad = CompressionGrad::zeros_like(net);
    grad.dummy = g.d_dummy;
    let d = pair.prev.width();
    let h1 = layers[0].out_dim;
    let mut row_delta = vec![vec![0.0; h1]; np];
    let mut col_delta = vec![vec![0.0; h1]; nc];
    for i in 0..np {
        for j in 0..nc {
            let trace = &traces[i * nc + j];
            let mut delta = vec![d_m[[i, j]]];
            for k in (1..layers.len()).rev() {
                let mut act = trace.pre[k - 1].clone();
                nn::relu_in_place(&mut act);
                accumulate_outer(&mut grad.weight[k], &delta, &act);
                for (b, dv) in grad.bias[k].iter_mut().zip(&delta) {
                    *b += dv;
                }
                let mut back = transpose_mul(&layers[k], &delta);
                for (v, z) in back.iter_mut().zip(&trace.pre[k - 1]) {
                    if *z <= 0.0 {
                        *v = 0.0;
                    }
                }
                delta = back;
            }
            for (b, dv) in grad.bias[0].iter_mut().zip(&delta) {
                *b += dv;
            }
            for (r, dv) in row_delta[i].iter_mut().zip(&delta) {
                *r += dv;
            }
            for (c, dv) in col_delta[j].iter_mut().zip(&delta) {
                *c += dv;
            }
        }
    }
    // first layer acts on [f; g]; its weight gradient splits by halves
    let in_dim = layers[0].in_dim;
    let w0 = &mut grad.weight[0];
    for (deltas, feats, offset) in [(&row_delta, &pair.prev, 0), (&col_delta, &pair.cur, d)] {
        for (delta, f) in deltas.iter().zip(feats.features()) {
            for (o, dv) in delta.iter().enumerate() {
                if *dv == 0.0 {
                    continue;
                }
                let row = &mut w0[o * in_dim + offset..o * in_dim + offset + d];
                for (w, x) in row.iter_mut().zip(f.as_slice()) {
                    *w += dv * x;
                }
            }
        }
    }
    Ok((g.loss, grad))
}

fn accumulate_outer(grad: &mut [f64], delta: &[f64], input: &[f64]) {
    let cols = input.len();
    for (o, dv) in delta.iter().enumerate() {
        if *dv == 0.0 {
            continue;
        }
        for (g, x) in grad[o * cols..(o + 1) * cols].iter_mut().zip(input) {
            *g += dv * x;
        }
    }
}

fn transpose_mul(layer: &DenseLayer, delta: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; layer.in_dim];
    for (o, dv) in delta.iter().enumerate() {
        if *dv == 0.0 {
            continue;
        }
        for (acc, w) in out.iter_mut().zip(layer.row(o)) {
            *acc += dv * *w as f64;
        }
    }
    out
}

/// Mean loss of the network over a batch, without gradients.
pub fn batch_loss(net: &CompressionNet, batch: &[LabeledPair]) -> Result<LossBreakdown> {
    let parts = batch
        .par_iter()
        .map(|pair| {
            let aff = crate::affinity::estimate_affinity(&pair.prev, &pair.cur, net)?;
            Ok(compute_losses(&aff, &pair.gt))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LossBreakdown::mean(&parts))
}

/// Mean loss and mean gradient over a batch. Per-pair work runs in parallel;
/// the reduction order is fixed.
pub fn batch_gradient(net: &CompressionNet, batch: &[LabeledPair]) -> Result<(LossBreakdown, CompressionGrad)> {
    let per_pair = batch
        .par_iter()
        .map(|pair| pair_gradient(net, pair))
        .collect::<Result<Vec<_>>>()?;
    let mut grad = CompressionGrad::zeros_like(net);
    let k = 1.0 / batch.len().max(1) as f64;
    let mut losses = Vec::with_capacity(per_pair.len());
    for (loss, g) in &per_pair {
        grad.add_scaled(g, k);
        losses.push(*loss);
    }
    Ok((LossBreakdown::mean(&losses), grad))
}

/// `net - lr * grad`, rounded back to f32 storage.
pub fn apply_gradient(net: &CompressionNet, grad: &CompressionGrad, lr: f64) -> CompressionNet {
    let mut next = net.clone();
    for (k, layer) in next.layers_mut().iter_mut().enumerate() {
        for (w, g) in layer.weight.iter_mut().zip(&grad.weight[k]) {
            *w = (*w as f64 - lr * g) as f32;
        }
        for (b, g) in layer.bias.iter_mut().zip(&grad.bias[k]) {
            *b = (*b as f64 - lr * g) as f32;
        }
    }
    next.dummy_score = (net.dummy_score as f64 - lr * grad.dummy) as f32;
    next
}

/// One plain gradient-descent step. Returns the updated network and the
/// batch loss measured before the update.
pub fn train_step(net: &CompressionNet, batch: &[LabeledPair], lr: f64, step: usize) -> Result<(CompressionNet, LossBreakdown)> {
    let (loss, grad) = batch_gradient(net, batch)?;
    if !loss.is_finite() {
        return Err(Error::Divergence {
            step,
            detail: format!("non-finite loss {loss:?}"),
        });
    }
    if !grad.is_finite() {
        return Err(Error::Divergence {
            step,
            detail: "non-finite gradient".into(),
        });
    }
    if lr == 0.0 {
        return Ok((net.clone(), loss));
    }
    Ok((apply_gradient(net, &grad, lr), loss))
}

/// Featurized, labeled frames of a sequence, ready for pair sampling.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    pub frames: Vec<(FeatureSet, Vec<u64>)>,
    capacity: usize,
}

impl TrainingSet {
    /// Loads, admits, crops and featurizes every frame of `src`.
    pub fn from_sequence(src: &SequenceSource, pointnet: &PointNetWeights, points_per_object: usize, seed: u64) -> Result<Self> {
        let capacity = src.config.max_objects;
        let frames = (0..src.frame_count)
            .map(|idx| {
                let frame = src.load_admitted(idx)?;
                let ids = frame
                    .detections
                    .iter()
                    .enumerate()
                    .map(|(slot, d)| {
                        d.gt_id
                            .ok_or_else(|| Error::Labeling(format!("frame {idx} detection {slot} has no ground-truth id")))
                    })
                    .collect::<Result<Vec<_>>>()?;
                let crops = crop_frame(&frame, points_per_object, seed);
                let feats = featurize_frame(idx, &crops, pointnet, capacity)?;
                Ok((feats, ids))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { frames, capacity })
    }

    pub fn pair(&self, prev: usize, cur: usize) -> Result<LabeledPair> {
        let (pf, pids) = &self.frames[prev];
        let (cf, cids) = &self.frames[cur];
        Ok(LabeledPair {
            prev: pf.clone(),
            cur: cf.clone(),
            gt: GroundTruthAssignment::from_ids(pids, cids, self.capacity)?,
        })
    }

    /// Draws `count` pairs `(t - n, t)` with `n` uniform in the gap range
    /// (clipped to the sequence length).
    pub fn sample_batch<R: Rng>(&self, rng: &mut R, count: usize, gap_min: u64, gap_max: u64) -> Result<Vec<LabeledPair>> {
        let len = self.frames.len() as u64;
        if len < 1 + gap_min {
            return Err(Error::Data(format!(
                "training needs more than {gap_min} frames, sequence has {len}"
            )));
        }
        let gap_hi = gap_max.min(len - 1);
        (0..count)
            .map(|_| {
                let gap = rng.random_range(gap_min..=gap_hi);
                let cur = rng.random_range(gap..len);
                self.pair((cur - gap) as usize, cur as usize)
            })
            .collect()
    }
}

/// Fits the compression network of `init` on `src`, writing one CSV loss
/// row per step to `log`.
pub fn train<W: Write + ?Sized>(src: &SequenceSource, cfg: &TrainConfig, init: ModelWeights, log: &mut W) -> Result<ModelWeights> {
    cfg.validate()?;
    let io_err = |e: std::io::Error| Error::io("<loss log>", e);
    writeln!(log, "{LOSS_LOG_HEADER}").map_err(io_err)?;
    if cfg.steps == 0 {
        return Ok(init);
    }
    let data = TrainingSet::from_sequence(src, &init.pointnet, cfg.points_per_object, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut net = init.compression.clone();
    for step in 0..cfg.steps {
        let batch = data.sample_batch(&mut rng, cfg.batch_pairs, cfg.gap_min, cfg.gap_max)?;
        let (next, loss) = train_step(&net, &batch, cfg.learning_rate, step)?;
        writeln!(
            log,
            "{step},{},{},{},{},{}",
            loss.l_f, loss.l_b, loss.l_c, loss.l_a, loss.total
        )
        .map_err(io_err)?;
        net = next;
    }
    ModelWeights::new(init.pointnet, net)
}
