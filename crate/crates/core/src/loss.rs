//! The four association losses, their mean, and analytic gradients with
//! respect to the augmented logits `M1`, `M2` and the dummy score.
//!
//! With `S_k` the sum of a ground-truth matrix:
//!
//! ```text
//! L_f = sum(G1 * -ln A1) / S_1
//! L_b = sum(G2 * -ln A2) / S_2
//! L_c = sum |Â1 - Â2|                      (entry-wise L1)
//! L_a = sum(G3 * -ln max(Â1, Â2)) / S_3
//! L   = (L_f + L_b + L_c + L_a) / 4
//! ```
//!
//! A ground-truth sum of zero makes the corresponding term zero.

use std::collections::HashSet;

use ndarray::{s, Array2, ArrayView2, Zip};
use serde::Serialize;

use crate::affinity::AffinityMatrices;
use crate::error::{Error, Result};
use crate::geometry::Frame;

/// Zero/one association targets for a frame pair with capacity `N`.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthAssignment {
    /// `N x (N+1)`; last column marks previous objects that leave.
    pub g1: Array2<f64>,
    /// `(N+1) x N`; last row marks current objects that enter.
    pub g2: Array2<f64>,
    /// `N x N` identity correspondences.
    pub g3: Array2<f64>,
    pub count_prev: usize,
    pub count_cur: usize,
}

impl GroundTruthAssignment {
    pub fn from_ids(prev_ids: &[u64], cur_ids: &[u64], capacity: usize) -> Result<Self> {
        if prev_ids.len() > capacity || cur_ids.len() > capacity {
            return Err(Error::Config(format!(
                "{} / {} objects exceed the frame capacity {capacity}",
                prev_ids.len(),
                cur_ids.len()
            )));
        }
        for ids in [prev_ids, cur_ids] {
            let mut seen = HashSet::new();
            if let Some(dup) = ids.iter().find(|id| !seen.insert(**id)) {
                return Err(Error::Data(format!("duplicate ground-truth id {dup} within one frame")));
            }
        }
        let n = capacity;
        let mut g1 = Array2::zeros((n, n + 1));
        let mut g2 = Array2::zeros((n + 1, n));
        let mut g3 = Array2::zeros((n, n));
        for (i, a) in prev_ids.iter().enumerate() {
            for (j, b) in cur_ids.iter().enumerate() {
                if a == b {
                    g1[[i, j]] = 1.0;
                    g2[[i, j]] = 1.0;
                    g3[[i, j]] = 1.0;
                }
            }
        }
        for i in 0..prev_ids.len() {
            if g3.row(i).sum() == 0.0 {
                g1[[i, n]] = 1.0;
            }
        }
        for j in 0..cur_ids.len() {
            if g3.column(j).sum() == 0.0 {
                g2[[n, j]] = 1.0;
            }
        }
        Ok(Self {
            g1,
            g2,
            g3,
            count_prev: prev_ids.len(),
            count_cur: cur_ids.len(),
        })
    }

    pub fn capacity(&self) -> usize {
        self.g3.nrows()
    }
}

/// Ground truth from two admitted, labeled frames.
pub fn build_gt(prev: &Frame, cur: &Frame, capacity: usize) -> Result<GroundTruthAssignment> {
    let ids = |f: &Frame| -> Result<Vec<u64>> {
        f.detections
            .iter()
            .enumerate()
            .map(|(slot, d)| {
                d.gt_id.ok_or_else(|| {
                    Error::Labeling(format!("frame {} detection {slot} has no ground-truth id", f.index))
                })
            })
            .collect()
    };
    GroundTruthAssignment::from_ids(&ids(prev)?, &ids(cur)?, capacity)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct LossBreakdown {
    pub l_f: f64,
    pub l_b: f64,
    pub l_c: f64,
    pub l_a: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.l_f, self.l_b, self.l_c, self.l_a, self.total]
            .iter()
            .all(|v| v.is_finite())
    }

    /// Element-wise mean of several breakdowns.
    pub fn mean(parts: &[LossBreakdown]) -> LossBreakdown {
        if parts.is_empty() {
            return LossBreakdown::default();
        }
        let k = parts.len() as f64;
        let sum = |f: fn(&LossBreakdown) -> f64| parts.iter().map(f).sum::<f64>() / k;
        loss_total(sum(|p| p.l_f), sum(|p| p.l_b), sum(|p| p.l_c), sum(|p| p.l_a))
    }
}

fn weighted_nll(g: ArrayView2<'_, f64>, a: ArrayView2<'_, f64>) -> f64 {
    let denom = g.sum();
    if denom == 0.0 {
        return 0.0;
    }
    let mut num = 0.0;
    Zip::from(g).and(a).for_each(|&gv, &av| {
        if gv != 0.0 {
            num += gv * -av.ln();
        }
    });
    num / denom
}

pub fn loss_forward(g1: ArrayView2<'_, f64>, a1: ArrayView2<'_, f64>) -> f64 {
    assert_eq!(g1.dim(), a1.dim());
    weighted_nll(g1, a1)
}

pub fn loss_backward(g2: ArrayView2<'_, f64>, a2: ArrayView2<'_, f64>) -> f64 {
    assert_eq!(g2.dim(), a2.dim());
    weighted_nll(g2, a2)
}

pub fn loss_consistency(a1_trim: ArrayView2<'_, f64>, a2_trim: ArrayView2<'_, f64>) -> f64 {
    assert_eq!(a1_trim.dim(), a2_trim.dim());
    let mut sum = 0.0;
    Zip::from(a1_trim).and(a2_trim).for_each(|x, y| sum += (x - y).abs());
    sum
}

pub fn loss_assemble(g3: ArrayView2<'_, f64>, a1_trim: ArrayView2<'_, f64>, a2_trim: ArrayView2<'_, f64>) -> f64 {
    assert_eq!(g3.dim(), a1_trim.dim());
    assert_eq!(g3.dim(), a2_trim.dim());
    let denom = g3.sum();
    if denom == 0.0 {
        return 0.0;
    }
    let mut num = 0.0;
    Zip::from(g3).and(a1_trim).and(a2_trim).for_each(|&g, &x, &y| {
        if g != 0.0 {
            num += g * -x.max(y).ln();
        }
    });
    num / denom
}

pub fn loss_total(l_f: f64, l_b: f64, l_c: f64, l_a: f64) -> LossBreakdown {
    LossBreakdown {
        l_f,
        l_b,
        l_c,
        l_a,
        total: (l_f + l_b + l_c + l_a) / 4.0,
    }
}

/// All four terms for one frame pair.
pub fn compute_losses(aff: &AffinityMatrices, gt: &GroundTruthAssignment) -> LossBreakdown {
    loss_total(
        loss_forward(gt.g1.view(), aff.a1.view()),
        loss_backward(gt.g2.view(), aff.a2.view()),
        loss_consistency(aff.a1_trim.view(), aff.a2_trim.view()),
        loss_assemble(gt.g3.view(), aff.a1_trim.view(), aff.a2_trim.view()),
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossGradients {
    pub loss: LossBreakdown,
    /// `dL/dM1`, same shape as `M1`.
    pub d_m1: Array2<f64>,
    /// `dL/dM2`, same shape as `M2`.
    pub d_m2: Array2<f64>,
    /// `dL/d(dummy score)`: the sum over every unmasked dummy entry.
    pub d_dummy: f64,
}

impl LossGradients {
    /// `dL/dM` for the shared logits, summing both augmented views.
    pub fn d_m(&self) -> Array2<f64> {
        let n = self.d_m1.nrows();
        &self.d_m1.slice(s![.., ..n]) + &self.d_m2.slice(s![..n, ..])
    }
}

/// Analytic gradient of the total loss.
///
/// `|x|` in the consistency term uses the subgradient `sign(0) = 0`. At a tie
/// `Â1 = Â2` the assemble term splits its gradient evenly between the two,
/// which is the symmetric subgradient of `max`. One-object frame pairs hit
/// this exactly, since `A1` and `A2` then normalize the same two logits.
pub fn loss_gradients(aff: &AffinityMatrices, gt: &GroundTruthAssignment) -> LossGradients {
    let n = aff.capacity();
    assert_eq!(gt.capacity(), n, "ground truth and affinity capacities differ");
    let (cp, cc) = (aff.count_prev, aff.count_cur);
    let s1 = gt.g1.sum();
    let s2 = gt.g2.sum();
    let s3 = gt.g3.sum();

    // upstream dL/dA, before the softmax Jacobian
    let mut up1 = Array2::<f64>::zeros((n, n + 1));
    let mut up2 = Array2::<f64>::zeros((n + 1, n));
    for i in 0..n {
        for j in 0..=n {
            let g = gt.g1[[i, j]];
            if g != 0.0 {
                up1[[i, j]] -= g / (s1 * aff.a1[[i, j]]);
            }
            let g = gt.g2[[j, i]];
            if g != 0.0 {
                up2[[j, i]] -= g / (s2 * aff.a2[[j, i]]);
            }
        }
        for j in 0..n {
            let diff = aff.a1_trim[[i, j]] - aff.a2_trim[[i, j]];
            let sign = if diff > 0.0 {
                1.0
            } else if diff < 0.0 {
                -1.0
            } else {
                0.0
            };
            up1[[i, j]] += sign;
            up2[[i, j]] -= sign;
            let g = gt.g3[[i, j]];
            if g != 0.0 {
                let (x, y) = (aff.a1_trim[[i, j]], aff.a2_trim[[i, j]]);
                if x > y {
                    up1[[i, j]] -= g / (s3 * x);
                } else if y > x {
                    up2[[i, j]] -= g / (s3 * y);
                } else {
                    up1[[i, j]] -= 0.5 * g / (s3 * x);
                    up2[[i, j]] -= 0.5 * g / (s3 * y);
                }
            }
        }
    }
    up1 /= 4.0;
    up2 /= 4.0;

    // softmax Jacobian: dM = A * (up - <A, up>) along each normalized line
    let mut d_m1 = Array2::zeros((n, n + 1));
    for i in 0..cp {
        let a = aff.a1.row(i);
        let u = up1.row(i);
        let inner = a.dot(&u);
        Zip::from(d_m1.row_mut(i)).and(a).and(u).for_each(|d, &av, &uv| *d = av * (uv - inner));
    }
    let mut d_m2 = Array2::zeros((n + 1, n));
    for j in 0..cc {
        let a = aff.a2.column(j);
        let u = up2.column(j);
        let inner = a.dot(&u);
        Zip::from(d_m2.column_mut(j)).and(a).and(u).for_each(|d, &av, &uv| *d = av * (uv - inner));
    }
    let d_dummy = d_m1.slice(s![..cp, n]).sum() + d_m2.slice(s![n, ..cc]).sum();

    LossGradients {
        loss: compute_losses(aff, gt),
        d_m1,
        d_m2,
        d_dummy,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::affinity::{augment, augment_and_softmax};
    use crate::geometry::{Detection, OrientedBox3, Point3};
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn labeled(index: u64, ids: &[u64]) -> Frame {
        let b = OrientedBox3::new(Point3::ZERO, 1.0, 1.0, 1.0, 0.0).unwrap();
        Frame {
            index,
            detections: ids.iter().map(|&id| Detection::new(b, 1.0, Some(id)).unwrap()).collect(),
            ..Default::default()
        }
    }

    #[test]
    fn same_frame_is_identity() {
        let f = labeled(0, &[5, 9]);
        let gt = build_gt(&f, &f, 2).unwrap();
        assert_eq!(gt.g3, Array2::<f64>::eye(2));
        assert_eq!(gt.g1.column(2).sum(), 0.0);
        assert_eq!(gt.g2.row(2).sum(), 0.0);
    }

    #[test]
    fn full_turnover() {
        let gt = build_gt(&labeled(0, &[1]), &labeled(1, &[2]), 1).unwrap();
        assert_eq!(gt.g3[[0, 0]], 0.0);
        assert_eq!(gt.g1[[0, 1]], 1.0);
        assert_eq!(gt.g2[[1, 0]], 1.0);
    }

    #[test]
    fn permutation_of_six() {
        let prev = [10, 11, 12, 13, 14, 15];
        let cur = [13, 10, 15, 11, 14, 12];
        let gt = build_gt(&labeled(0, &prev), &labeled(1, &cur), 8).unwrap();
        for i in 0..8 {
            for j in 0..8 {
                let oracle = i < 6 && j < 6 && prev[i] == cur[j];
                assert_eq!(gt.g3[[i, j]], if oracle { 1.0 } else { 0.0 });
            }
        }
        for i in 0..6 {
            assert_eq!(gt.g1.row(i).sum(), 1.0);
            assert_eq!(gt.g2.column(i).sum(), 1.0);
        }
        assert_eq!(gt.g1.slice(s![.., ..8]), gt.g3);
        assert_eq!(gt.g2.slice(s![..8, ..]), gt.g3);
    }

    #[test]
    fn labeling_errors() {
        let mut f = labeled(0, &[1, 2]);
        f.detections[1].gt_id = None;
        assert!(matches!(build_gt(&f, &f, 4), Err(Error::Labeling(_))));
        let dup = labeled(0, &[3, 3]);
        assert!(matches!(build_gt(&dup, &labeled(1, &[3]), 4), Err(Error::Data(_))));
    }

    #[test]
    fn perfect_prediction_is_zero() {
        let g = array![[1.0, 0.0], [0.0, 1.0]];
        let a = array![[1.0, 1e-300], [1e-300, 1.0]];
        assert_eq!(loss_forward(g.view(), a.view()), 0.0);
        assert_eq!(loss_backward(g.view(), a.view()), 0.0);
        assert_eq!(loss_assemble(g.view(), a.view(), a.view()), 0.0);
        assert_eq!(loss_consistency(a.view(), a.view()), 0.0);
    }

    #[test]
    fn uniform_row_over_101() {
        let n = 100;
        let m = Array2::zeros((n, n));
        let aff = augment_and_softmax(&m, 1, n, 0.0);
        let mut g1 = Array2::zeros((n, n + 1));
        g1[[0, 17]] = 1.0;
        let lf = loss_forward(g1.view(), aff.a1.view());
        assert!((lf - 101f64.ln()).abs() < 1e-12);
        assert!((lf - 4.61512).abs() < 1e-5);
        // column mirror
        let aff = augment_and_softmax(&m, n, 1, 0.0);
        let mut g2 = Array2::zeros((n + 1, n));
        g2[[42, 0]] = 1.0;
        assert!((loss_backward(g2.view(), aff.a2.view()) - 101f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn empty_gt_is_zero() {
        let z = Array2::<f64>::zeros((3, 4));
        let a = Array2::from_elem((3, 4), 0.25);
        assert_eq!(loss_forward(z.view(), a.view()), 0.0);
        let z = Array2::<f64>::zeros((3, 3));
        let a = Array2::from_elem((3, 3), 0.25);
        assert_eq!(loss_assemble(z.view(), a.view(), a.view()), 0.0);
    }

    #[test]
    fn consistency_examples() {
        let a = array![[0.2, 0.5], [0.1, 0.7]];
        let mut b = a.clone();
        b[[1, 0]] += 0.3;
        assert!((loss_consistency(a.view(), b.view()) - 0.3).abs() < 1e-15);
    }

    #[test]
    fn assemble_picks_larger() {
        let g = array![[1.0]];
        let x = array![[(-2.0f64).exp()]];
        let y = array![[(-1.0f64).exp()]];
        assert!((loss_assemble(g.view(), x.view(), y.view()) - 1.0).abs() < 1e-15);
        assert!((loss_assemble(g.view(), y.view(), x.view()) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn total_is_mean() {
        assert_eq!(loss_total(0.0, 0.0, 0.0, 0.0).total, 0.0);
        assert_eq!(loss_total(4.0, 2.0, 1.0, 1.0).total, 2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let p: [f64; 4] = std::array::from_fn(|_| rng.random_range(0.0..10.0));
            let t = loss_total(p[0], p[1], p[2], p[3]);
            assert!((t.total - (p[0] + p[1] + p[2] + p[3]) / 4.0).abs() < 1e-15);
        }
    }

    fn random_instance(rng: &mut ChaCha8Rng) -> (AffinityMatrices, GroundTruthAssignment, Array2<f64>, f64) {
        let n = rng.random_range(2..=8);
        let cp = rng.random_range(1..=n);
        let cc = rng.random_range(1..=n);
        let m = Array2::from_shape_fn((n, n), |_| rng.random_range(-3.0..3.0));
        let dummy = rng.random_range(-2.0..2.0);
        use rand::seq::SliceRandom;
        let prev: Vec<u64> = (0..cp as u64).collect();
        // some previous objects continue, the rest of the current slots are new
        let mut cur: Vec<u64> = prev.iter().copied().filter(|_| rng.random_bool(0.6)).take(cc).collect();
        let mut fresh = 100;
        while cur.len() < cc {
            cur.push(fresh);
            fresh += 1;
        }
        cur.shuffle(rng);
        let gt = GroundTruthAssignment::from_ids(&prev, &cur, n).unwrap();
        (augment_and_softmax(&m, cp, cc, dummy), gt, m, dummy)
    }

    #[test]
    fn naive_oracles_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..30 {
            let (aff, gt, _, _) = random_instance(&mut rng);
            let n = aff.capacity();
            let (mut lf, mut lb, mut lc, mut la) = (0.0, 0.0, 0.0, 0.0);
            let (mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0);
            for i in 0..n {
                for j in 0..=n {
                    if gt.g1[[i, j]] > 0.0 {
                        lf -= aff.a1[[i, j]].ln();
                        s1 += 1.0;
                    }
                    if gt.g2[[j, i]] > 0.0 {
                        lb -= aff.a2[[j, i]].ln();
                        s2 += 1.0;
                    }
                }
                for j in 0..n {
                    lc += (aff.a1[[i, j]] - aff.a2[[i, j]]).abs();
                    if gt.g3[[i, j]] > 0.0 {
                        la -= aff.a1[[i, j]].max(aff.a2[[i, j]]).ln();
                        s3 += 1.0;
                    }
                }
            }
            let got = compute_losses(&aff, &gt);
            assert!((got.l_f - lf / s1).abs() < 1e-12);
            assert!((got.l_b - lb / s2).abs() < 1e-12);
            assert!((got.l_c - lc).abs() < 1e-12);
            let la = if s3 > 0.0 { la / s3 } else { 0.0 };
            assert!((got.l_a - la).abs() < 1e-12);
            // transpose symmetry
            let lbt = loss_forward(gt.g2.t(), aff.a2.t());
            assert!((got.l_b - lbt).abs() < 1e-12);
        }
    }

    #[test]
    fn shift_leaves_forward_loss_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let (aff, gt, m, dummy) = random_instance(&mut rng);
            let shifted = augment_and_softmax(&(&m + 3.5), aff.count_prev, aff.count_cur, dummy + 3.5);
            let a = loss_forward(gt.g1.view(), aff.a1.view());
            let b = loss_forward(gt.g1.view(), shifted.a1.view());
            assert!((a - b).abs() < 1e-12);
        }
    }

    fn total_from_logits(m1: &Array2<f64>, m2: &Array2<f64>, aff: &AffinityMatrices, gt: &GroundTruthAssignment) -> f64 {
        let a = AffinityMatrices::from_logits(m1.clone(), m2.clone(), aff.count_prev, aff.count_cur);
        compute_losses(&a, gt).total
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }

    #[test]
    fn gradients_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for _ in 0..25 {
            let (aff, gt, m, dummy) = random_instance(&mut rng);
            let grads = loss_gradients(&aff, &gt);
            for (which, shape) in [(1, aff.m1.dim()), (2, aff.m2.dim())] {
                for r in 0..shape.0 {
                    for c in 0..shape.1 {
                        let (mut m1p, mut m2p) = (aff.m1.clone(), aff.m2.clone());
                        let (mut m1m, mut m2m) = (aff.m1.clone(), aff.m2.clone());
                        if which == 1 {
                            m1p[[r, c]] += h;
                            m1m[[r, c]] -= h;
                        } else {
                            m2p[[r, c]] += h;
                            m2m[[r, c]] -= h;
                        }
                        let num = (total_from_logits(&m1p, &m2p, &aff, &gt) - total_from_logits(&m1m, &m2m, &aff, &gt)) / (2.0 * h);
                        let ana = if which == 1 { grads.d_m1[[r, c]] } else { grads.d_m2[[r, c]] };
                        worst = worst.max(rel_err(ana, num));
                    }
                }
            }
            let at = |d: f64| {
                let (m1, m2) = augment(&m, aff.count_prev, aff.count_cur, d);
                total_from_logits(&m1, &m2, &aff, &gt)
            };
            let num = (at(dummy + h) - at(dummy - h)) / (2.0 * h);
            worst = worst.max(rel_err(grads.d_dummy, num));
        }
        assert!(worst < 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn forward_gradient_vanishes_near_perfect() {
        let mut last = f64::INFINITY;
        for scale in [1.0, 4.0, 16.0] {
            let m = array![[scale, -scale], [-scale, scale]];
            let aff = augment_and_softmax(&m, 2, 2, -scale);
            let gt = GroundTruthAssignment::from_ids(&[1, 2], &[1, 2], 2).unwrap();
            let g = loss_gradients(&aff, &gt);
            let size = g.d_m1.iter().map(|v| v.abs()).sum::<f64>();
            assert!(size < last);
            last = size;
        }
        assert!(last < 1e-6);
    }

    #[test]
    fn consistency_subgradient_at_ties() {
        // one object, identical forward/backward probabilities everywhere
        let m = array![[0.0]];
        let aff = augment_and_softmax(&m, 1, 1, 0.0);
        assert_eq!(aff.a1_trim, aff.a2_trim);
        let gt = GroundTruthAssignment::from_ids(&[1], &[2], 1).unwrap();
        let g = loss_gradients(&aff, &gt);
        // with G3 = 0 only L_f, L_b and L_c contribute; L_c contributes nothing at the tie
        // d(-ln a_leave)/dM1 for a two-way softmax is (a_0, a_leave - 1)
        let lf_only = [aff.a1[[0, 0]], aff.a1[[0, 1]] - 1.0];
        assert!((g.d_m1[[0, 0]] - lf_only[0] / 4.0).abs() < 1e-15);
        assert!((g.d_m1[[0, 1]] - lf_only[1] / 4.0).abs() < 1e-15);
    }
}
