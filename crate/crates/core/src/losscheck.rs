//! Self-verification of the loss: central finite differences against the
//! analytic gradients, plus closed-form loss identities, on seeded random
//! instances.

use std::fmt;
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::affinity::{augment, augment_and_softmax, AffinityMatrices};
use crate::error::{Error, Result};
use crate::loss::{
    compute_losses, loss_assemble, loss_backward, loss_consistency, loss_forward, loss_gradients, GroundTruthAssignment,
};

#[derive(Debug, Clone, PartialEq)]
pub struct LossCheckConfig {
    pub trials: usize,
    pub seed: u64,
    /// Largest capacity `N` of a random instance.
    pub max_objects: usize,
    pub step: f64,
    pub tolerance: f64,
    /// Adds this amount to one analytic gradient entry before comparing.
    /// Only useful to confirm the harness can fail.
    pub corrupt_gradient: Option<f64>,
}

impl Default for LossCheckConfig {
    fn default() -> Self {
        Self {
            trials: 25,
            seed: 0,
            max_objects: 8,
            step: 1e-5,
            tolerance: 1e-4,
            corrupt_gradient: None,
        }
    }
}

impl LossCheckConfig {
    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::Config("trials must be at least 1".into()));
        }
        if self.max_objects < 1 {
            return Err(Error::Config("max_objects must be at least 1".into()));
        }
        if !(self.step > 0.0 && self.tolerance > 0.0) {
            return Err(Error::Config("step and tolerance must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{tag} {:<22} {}", self.name, self.detail)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossCheckReport {
    pub checks: Vec<CheckOutcome>,
}

impl LossCheckReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

/// Logits, dummy score and labels for one random frame pair.
#[derive(Debug, Clone)]
pub struct LossInstance {
    pub m: Array2<f64>,
    pub dummy: f64,
    pub gt: GroundTruthAssignment,
}

impl LossInstance {
    pub fn random<R: Rng>(rng: &mut R, max_objects: usize) -> Self {
        let n = rng.random_range(1..=max_objects.max(1));
        let cp = rng.random_range(1..=n);
        let cc = rng.random_range(1..=n);
        let m = Array2::from_shape_fn((n, n), |_| rng.random_range(-3.0..3.0));
        let dummy = rng.random_range(-2.0..2.0);
        let prev: Vec<u64> = (0..cp as u64).collect();
        let mut cur: Vec<u64> = prev.iter().copied().filter(|_| rng.random_bool(0.6)).take(cc).collect();
        let mut fresh = 1000;
        while cur.len() < cc {
            cur.push(fresh);
            fresh += 1;
        }
        cur.shuffle(rng);
        let gt = GroundTruthAssignment::from_ids(&prev, &cur, n).expect("ids are unique and within capacity");
        Self { m, dummy, gt }
    }

    pub fn affinity(&self) -> AffinityMatrices {
        augment_and_softmax(&self.m, self.gt.count_prev, self.gt.count_cur, self.dummy)
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

fn total_from_logits(m1: &Array2<f64>, m2: &Array2<f64>, gt: &GroundTruthAssignment) -> f64 {
    let a = AffinityMatrices::from_logits(m1.clone(), m2.clone(), gt.count_prev, gt.count_cur);
    compute_losses(&a, gt).total
}

/// Largest relative error between analytic and central-difference gradients
/// over every `M1`, `M2` entry and the dummy score of one instance.
pub fn gradient_error(inst: &LossInstance, h: f64, corrupt: Option<f64>) -> f64 {
    let aff = inst.affinity();
    let mut grads = loss_gradients(&aff, &inst.gt);
    if let Some(delta) = corrupt {
        grads.d_m1[[0, 0]] += delta;
    }
    let mut worst: f64 = 0.0;
    let (mut m1, mut m2) = (aff.m1.clone(), aff.m2.clone());
    for idx in 0..m1.len() {
        let (r, c) = (idx / m1.ncols(), idx % m1.ncols());
        let orig = m1[[r, c]];
        m1[[r, c]] = orig + h;
        let up = total_from_logits(&m1, &m2, &inst.gt);
        m1[[r, c]] = orig - h;
        let down = total_from_logits(&m1, &m2, &inst.gt);
        m1[[r, c]] = orig;
        worst = worst.max(rel_err(grads.d_m1[[r, c]], (up - down) / (2.0 * h)));
    }
    for idx in 0..m2.len() {
        let (r, c) = (idx / m2.ncols(), idx % m2.ncols());
        let orig = m2[[r, c]];
        m2[[r, c]] = orig + h;
        let up = total_from_logits(&m1, &m2, &inst.gt);
        m2[[r, c]] = orig - h;
        let down = total_from_logits(&m1, &m2, &inst.gt);
        m2[[r, c]] = orig;
        worst = worst.max(rel_err(grads.d_m2[[r, c]], (up - down) / (2.0 * h)));
    }
    let at = |d: f64| {
        let (a, b) = augment(&inst.m, inst.gt.count_prev, inst.gt.count_cur, d);
        total_from_logits(&a, &b, &inst.gt)
    };
    let num = (at(inst.dummy + h) - at(inst.dummy - h)) / (2.0 * h);
    worst.max(rel_err(grads.d_dummy, num))
}

pub fn gradient_suite(cfg: &LossCheckConfig) -> CheckOutcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut worst: f64 = 0.0;
    for t in 0..cfg.trials {
        let inst = LossInstance::random(&mut rng, cfg.max_objects);
        let corrupt = if t == 0 { cfg.corrupt_gradient } else { None };
        worst = worst.max(gradient_error(&inst, cfg.step, corrupt));
    }
    CheckOutcome {
        name: "gradient",
        passed: worst < cfg.tolerance,
        detail: format!(
            "trials={} max_rel_err={worst:.3e} tol={:.0e} time={:.3}s",
            cfg.trials,
            cfg.tolerance,
            start.elapsed().as_secs_f64()
        ),
    }
}

/// Loss terms evaluated with the targets themselves as predictions.
pub fn perfect_prediction_loss(gt: &GroundTruthAssignment) -> [f64; 4] {
    let (g1, g2) = (gt.g1.view(), gt.g2.view());
    let n = gt.capacity();
    let a1_trim = gt.g1.slice(ndarray::s![.., ..n]);
    let a2_trim = gt.g2.slice(ndarray::s![..n, ..]);
    [
        loss_forward(g1, g1),
        loss_backward(g2, g2),
        loss_consistency(a1_trim, a2_trim),
        loss_assemble(gt.g3.view(), a1_trim, a2_trim),
    ]
}

/// `L_f` for all-zero logits over a full frame of `capacity` objects, which
/// spreads every row uniformly over `capacity + 1` entries.
pub fn uniform_forward_loss(capacity: usize) -> Result<f64> {
    let ids: Vec<u64> = (0..capacity as u64).collect();
    let gt = GroundTruthAssignment::from_ids(&ids, &ids, capacity)?;
    let aff = augment_and_softmax(&Array2::zeros((capacity, capacity)), capacity, capacity, 0.0);
    Ok(loss_forward(gt.g1.view(), aff.a1.view()))
}

pub fn identity_suite(cfg: &LossCheckConfig) -> Vec<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x005E_ED1D);
    let mut perfect_worst: f64 = 0.0;
    let mut mean_worst: f64 = 0.0;
    let mut sums_worst: f64 = 0.0;
    for _ in 0..cfg.trials {
        let inst = LossInstance::random(&mut rng, cfg.max_objects);
        for v in perfect_prediction_loss(&inst.gt) {
            perfect_worst = perfect_worst.max(v.abs());
        }
        let aff = inst.affinity();
        let l = compute_losses(&aff, &inst.gt);
        mean_worst = mean_worst.max((l.total - (l.l_f + l.l_b + l.l_c + l.l_a) / 4.0).abs());
        for i in 0..aff.count_prev {
            sums_worst = sums_worst.max((aff.a1.row(i).sum() - 1.0).abs());
        }
        for j in 0..aff.count_cur {
            sums_worst = sums_worst.max((aff.a2.column(j).sum() - 1.0).abs());
        }
    }
    let expected = 101f64.ln();
    let uniform = uniform_forward_loss(100);
    let (uniform_ok, uniform_detail) = match uniform {
        Ok(v) => ((v - expected).abs() < 1e-9, format!("L_f={v:.9} expected ln(101)={expected:.9}")),
        Err(e) => (false, e.to_string()),
    };
    vec![
        CheckOutcome {
            name: "perfect_prediction",
            passed: perfect_worst <= 1e-12,
            detail: format!("max |L|={perfect_worst:.3e}"),
        },
        CheckOutcome {
            name: "uniform_prediction",
            passed: uniform_ok,
            detail: uniform_detail,
        },
        CheckOutcome {
            name: "total_is_mean",
            passed: mean_worst <= 1e-12,
            detail: format!("max deviation={mean_worst:.3e}"),
        },
        CheckOutcome {
            name: "softmax_normalized",
            passed: sums_worst <= 1e-9,
            detail: format!("max |sum-1|={sums_worst:.3e}"),
        },
    ]
}

pub fn run(cfg: &LossCheckConfig) -> Result<LossCheckReport> {
    cfg.validate()?;
    let mut checks = vec![gradient_suite(cfg)];
    checks.extend(identity_suite(cfg));
    Ok(LossCheckReport { checks })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_run_passes() {
        let report = run(&LossCheckConfig::default()).unwrap();
        for c in &report.checks {
            assert!(c.passed, "{c}");
        }
    }

    #[test]
    fn corruption_is_detected() {
        let cfg = LossCheckConfig {
            corrupt_gradient: Some(1e-2),
            ..Default::default()
        };
        let report = run(&cfg).unwrap();
        assert!(!report.checks[0].passed);
        assert!(!report.all_passed());
    }

    #[test]
    fn zero_trials_rejected() {
        assert!(run(&LossCheckConfig { trials: 0, ..Default::default() }).is_err());
    }

    #[test]
    fn uniform_value() {
        assert!((uniform_forward_loss(100).unwrap() - 4.61512).abs() < 1e-5);
    }
}
