//! Pairwise affinity estimation between two frames.
//!
//! Every (previous, current) object pair is encoded as the concatenation of
//! the two feature vectors. A five-layer pointwise network maps each encoding
//! to a scalar, giving the affinity logits `M`. `M` is then augmented with a
//! dummy column (objects leaving) and a dummy row (objects entering), and
//! normalized by a row softmax (`A1`) and a column softmax (`A2`).

use std::io::{Read, Write};

use ndarray::{s, Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::featurize::FeatureSet;
use crate::nn::{self, DenseLayer};

pub const COMPRESSION_MAGIC: &[u8; 4] = b"CMP1";
pub const COMPRESSION_LAYERS: usize = 5;
pub const DEFAULT_COMPRESSION_WIDTHS: [usize; 6] = [1024, 512, 256, 128, 64, 1];
/// Logit assigned to padded slots before the softmax.
pub const MASK_LOGIT: f64 = -1e9;

/// The `N x N x 2D` pair encoding. Cells are materialized on demand from the
/// two feature sets; cell `(i, j)` is `prev[i] ‖ cur[j]` for populated slots
/// and zero otherwise.
#[derive(Debug, Clone, Copy)]
pub struct PairTensor<'a> {
    prev: &'a FeatureSet,
    cur: &'a FeatureSet,
}

pub fn build_pair_tensor<'a>(prev: &'a FeatureSet, cur: &'a FeatureSet) -> Result<PairTensor<'a>> {
    if prev.width() != cur.width() {
        return Err(Error::Config(format!(
            "feature widths differ: {} vs {}",
            prev.width(),
            cur.width()
        )));
    }
    if prev.capacity() != cur.capacity() {
        return Err(Error::Config(format!(
            "frame capacities differ: {} vs {}",
            prev.capacity(),
            cur.capacity()
        )));
    }
    Ok(PairTensor { prev, cur })
}

impl<'a> PairTensor<'a> {
    pub fn capacity(&self) -> usize {
        self.prev.capacity()
    }

    pub fn channels(&self) -> usize {
        2 * self.prev.width()
    }

    pub fn counts(&self) -> (usize, usize) {
        (self.prev.count(), self.cur.count())
    }

    pub fn prev(&self) -> &'a FeatureSet {
        self.prev
    }

    pub fn cur(&self) -> &'a FeatureSet {
        self.cur
    }

    pub fn is_valid_cell(&self, i: usize, j: usize) -> bool {
        i < self.prev.count() && j < self.cur.count()
    }

    pub fn cell(&self, i: usize, j: usize) -> Vec<f64> {
        let d = self.prev.width();
        let mut v = vec![0.0; 2 * d];
        if self.is_valid_cell(i, j) {
            v[..d].copy_from_slice(self.prev.slot(i).as_slice());
            v[d..].copy_from_slice(self.cur.slot(j).as_slice());
        }
        v
    }

    /// Dense `N x N x C` copy. Large for real capacities; meant for inspection.
    pub fn to_dense(&self) -> Array3<f64> {
        let n = self.capacity();
        let c = self.channels();
        let mut out = Array3::zeros((n, n, c));
        for i in 0..self.prev.count() {
            for j in 0..self.cur.count() {
                let cell = self.cell(i, j);
                out.slice_mut(s![i, j, ..]).assign(&ndarray::ArrayView1::from(&cell[..]));
            }
        }
        out
    }
}

/// Five pointwise layers with ReLU between them, plus the learned dummy
/// (enter/leave) logit.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressionNet {
    layers: Vec<DenseLayer>,
    pub dummy_score: f32,
}

impl CompressionNet {
    pub fn new(layers: Vec<DenseLayer>, dummy_score: f32) -> Result<Self> {
        validate_compression(&layers).map_err(Error::Config)?;
        if !dummy_score.is_finite() {
            return Err(Error::Config("dummy score must be finite".into()));
        }
        Ok(Self { layers, dummy_score })
    }

    /// He-uniform initialization with a zero dummy score.
    pub fn random(widths: &[usize], seed: u64) -> Result<Self> {
        if widths.len() != COMPRESSION_LAYERS + 1 {
            return Err(Error::Config(format!(
                "compression network needs {} widths, got {}",
                COMPRESSION_LAYERS + 1,
                widths.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = widths
            .windows(2)
            .map(|w| DenseLayer::he_uniform(w[1], w[0], &mut rng))
            .collect();
        Self::new(layers, 0.0)
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [DenseLayer] {
        &mut self.layers
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].in_dim
    }

    /// Runs the network on one pair encoding.
    pub fn forward_cell(&self, x: &[f64]) -> f64 {
        let mut h = x.to_vec();
        for (k, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h);
            if k + 1 < self.layers.len() {
                nn::relu_in_place(&mut h);
            }
        }
        h[0]
    }

    /// First-layer pre-activation contributions of each populated slot.
    ///
    /// The first layer acts on `[f; g]`, so `W [f; g] = W_prev f + W_cur g`.
    /// `side` 0 uses the columns that see the previous frame, 1 the current.
    pub fn project_first(&self, features: &FeatureSet, side: usize) -> Vec<Vec<f64>> {
        let l0 = &self.layers[0];
        let d = features.width();
        let offset = side * d;
        features
            .features()
            .iter()
            .map(|f| {
                (0..l0.out_dim)
                    .map(|o| nn::dot(&l0.row(o)[offset..offset + d], f.as_slice()))
                    .collect()
            })
            .collect()
    }

    /// Output of layers 2..5 given the first-layer pre-activation.
    pub fn forward_tail(&self, mut h: Vec<f64>) -> f64 {
        for (k, layer) in self.layers.iter().enumerate().skip(1) {
            nn::relu_in_place(&mut h);
            h = layer.forward(&h);
            debug_assert!(k < self.layers.len());
        }
        h[0]
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        nn::write_section(w, COMPRESSION_MAGIC, &self.layers)?;
        w.write_all(&self.dummy_score.to_le_bytes())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let layers = nn::read_section(r, COMPRESSION_MAGIC)?;
        validate_compression(&layers).map_err(Error::Format)?;
        let dummy_score = nn::read_f32(r)?;
        if !dummy_score.is_finite() {
            return Err(Error::Format("non-finite dummy score".into()));
        }
        Ok(Self { layers, dummy_score })
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(DenseLayer::param_count).sum::<usize>() + 1
    }
}

fn validate_compression(layers: &[DenseLayer]) -> std::result::Result<(), String> {
    if layers.len() != COMPRESSION_LAYERS {
        return Err(format!(
            "compression network must have exactly {COMPRESSION_LAYERS} layers, got {}",
            layers.len()
        ));
    }
    nn::check_chain(layers)?;
    if layers[COMPRESSION_LAYERS - 1].out_dim != 1 {
        return Err("compression network must end in a single output".into());
    }
    Ok(())
}

/// Affinity logits `M` (`N x N`). Padded cells hold the network's response to
/// the zero encoding; they are masked later.
pub fn compression_forward(t: &PairTensor<'_>, net: &CompressionNet) -> Result<Array2<f64>> {
    if net.input_width() != t.channels() {
        return Err(Error::Config(format!(
            "compression input width {} does not match pair channels {}",
            net.input_width(),
            t.channels()
        )));
    }
    let n = t.capacity();
    let (np, nc) = t.counts();
    let padded = net.forward_cell(&vec![0.0; t.channels()]);
    let mut m = Array2::from_elem((n, n), padded);
    if np == 0 || nc == 0 {
        return Ok(m);
    }
    let p = net.project_first(t.prev(), 0);
    let q = net.project_first(t.cur(), 1);
    let bias = &net.layers()[0].bias;
    let rows: Vec<Vec<f64>> = p
        .par_iter()
        .map(|pi| {
            q.iter()
                .map(|qj| {
                    let h = pi
                        .iter()
                        .zip(qj)
                        .zip(bias)
                        .map(|((a, b), c)| a + b + *c as f64)
                        .collect();
                    net.forward_tail(h)
                })
                .collect()
        })
        .collect();
    for (i, row) in rows.into_iter().enumerate() {
        for (j, v) in row.into_iter().enumerate() {
            m[[i, j]] = v;
        }
    }
    Ok(m)
}

/// The augmented logits and both softmax normalizations for one frame pair.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityMatrices {
    pub m: Array2<f64>,
    /// `N x (N+1)`: `M` plus the leave column.
    pub m1: Array2<f64>,
    /// `(N+1) x N`: `M` plus the enter row.
    pub m2: Array2<f64>,
    /// Row softmax of `m1` over populated rows; other rows are zero.
    pub a1: Array2<f64>,
    /// Column softmax of `m2` over populated columns; other columns are zero.
    pub a2: Array2<f64>,
    pub a1_trim: Array2<f64>,
    pub a2_trim: Array2<f64>,
    pub count_prev: usize,
    pub count_cur: usize,
}

impl AffinityMatrices {
    pub fn capacity(&self) -> usize {
        self.m.nrows()
    }

    /// Normalizes already-augmented logits. `m1`/`m2` are used as given (no
    /// further masking), which is what gradient checks perturb.
    pub fn from_logits(m1: Array2<f64>, m2: Array2<f64>, count_prev: usize, count_cur: usize) -> Self {
        let n = m1.nrows();
        assert_eq!(m1.dim(), (n, n + 1));
        assert_eq!(m2.dim(), (n + 1, n));
        let mut a1 = Array2::zeros((n, n + 1));
        for i in 0..count_prev {
            softmax_into(m1.row(i).iter().copied(), a1.row_mut(i).iter_mut());
        }
        let mut a2 = Array2::zeros((n + 1, n));
        for j in 0..count_cur {
            softmax_into(m2.column(j).iter().copied(), a2.column_mut(j).iter_mut());
        }
        let a1_trim = a1.slice(s![.., ..n]).to_owned();
        let a2_trim = a2.slice(s![..n, ..]).to_owned();
        let m = m1.slice(s![.., ..n]).to_owned();
        Self {
            m,
            m1,
            m2,
            a1,
            a2,
            a1_trim,
            a2_trim,
            count_prev,
            count_cur,
        }
    }
}

fn softmax_into<'a>(logits: impl Iterator<Item = f64> + Clone, out: impl Iterator<Item = &'a mut f64>) {
    let max = logits.clone().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    for (o, e) in out.zip(exps) {
        *o = e / sum;
    }
}

/// Appends the dummy column/row and masks padded slots.
///
/// Entries in a padded row or column get [`MASK_LOGIT`]. Dummy entries are
/// left alone for populated rows (in `m1`) and populated columns (in `m2`).
pub fn augment(m: &Array2<f64>, count_prev: usize, count_cur: usize, dummy_score: f64) -> (Array2<f64>, Array2<f64>) {
    let n = m.nrows();
    assert_eq!(m.ncols(), n, "affinity logits must be square");
    let mut m1 = Array2::from_elem((n, n + 1), MASK_LOGIT);
    let mut m2 = Array2::from_elem((n + 1, n), MASK_LOGIT);
    for i in 0..count_prev {
        for j in 0..count_cur {
            m1[[i, j]] = m[[i, j]];
            m2[[i, j]] = m[[i, j]];
        }
        m1[[i, n]] = dummy_score;
    }
    for j in 0..count_cur {
        m2[[n, j]] = dummy_score;
    }
    (m1, m2)
}

pub fn augment_and_softmax(m: &Array2<f64>, count_prev: usize, count_cur: usize, dummy_score: f64) -> AffinityMatrices {
    let (m1, m2) = augment(m, count_prev, count_cur, dummy_score);
    let mut out = AffinityMatrices::from_logits(m1, m2, count_prev, count_cur);
    out.m = m.clone();
    out
}

/// Full forward pass from two feature sets to affinity matrices.
pub fn estimate_affinity(prev: &FeatureSet, cur: &FeatureSet, net: &CompressionNet) -> Result<AffinityMatrices> {
    let t = build_pair_tensor(prev, cur)?;
    let m = compression_forward(&t, net)?;
    Ok(augment_and_softmax(&m, prev.count(), cur.count(), net.dummy_score as f64))
}
