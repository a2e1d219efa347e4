//! CLEAR-MOT evaluation with center-distance matching.

use std::collections::{BTreeSet, HashMap};
use std::fmt;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::association::{max_weight_assignment, TrackSet};
use crate::error::{Error, Result};

pub const DEFAULT_MATCH_RADIUS: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MotReport {
    pub mota: f64,
    /// Mean center distance of matched pairs, meters.
    pub motp: f64,
    pub id_switches: u64,
    pub false_pos: u64,
    pub false_neg: u64,
    pub gt_count: u64,
    pub matches: u64,
    pub seconds_per_frame: f64,
}

impl MotReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// `1 - (FN + FP + IDS) / GT` from the integer fields.
    pub fn recomputed_mota(&self) -> f64 {
        1.0 - (self.false_neg + self.false_pos + self.id_switches) as f64 / self.gt_count as f64
    }
}

impl fmt::Display for MotReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let rows = [
            ("MOTA", format!("{:.6}", self.mota)),
            ("MOTP (m)", format!("{:.6}", self.motp)),
            ("IDs", self.id_switches.to_string()),
            ("False +ve", self.false_pos.to_string()),
            ("False -ve", self.false_neg.to_string()),
            ("GT", self.gt_count.to_string()),
            ("Matches", self.matches.to_string()),
            ("Time (s)", format!("{:.6}", self.seconds_per_frame)),
        ];
        let width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        for (k, v) in rows {
            writeln!(f, "{k:<width$}  {v:>12}")?;
        }
        Ok(())
    }
}

/// CLEAR-MOT over every frame that appears in either track set.
///
/// Per frame, a ground-truth object keeps its previous hypothesis when that
/// hypothesis is still present and within `match_radius`; the remaining
/// objects and hypotheses are matched optimally by center distance under the
/// same gate. A ground-truth object matched to a different hypothesis than
/// at its last match counts as an identity switch.
pub fn evaluate(gt: &TrackSet, pred: &TrackSet, match_radius: f64) -> Result<MotReport> {
    if !(match_radius.is_finite() && match_radius > 0.0) {
        return Err(Error::InvalidArgument(format!("match radius must be positive, got {match_radius}")));
    }
    let frames: BTreeSet<u64> = gt.frames().into_iter().chain(pred.frames()).collect();
    let mut last_match: HashMap<u64, u64> = HashMap::new();
    let (mut fp, mut fn_, mut ids, mut gt_count, mut matches) = (0u64, 0u64, 0u64, 0u64, 0u64);
    let mut dist_sum = 0.0;

    for frame in frames {
        let objs = gt.frame_entries(frame);
        let hyps = pred.frame_entries(frame);
        gt_count += objs.len() as u64;
        let dist = |o: usize, h: usize| objs[o].1.detection.bbox.center.distance(&hyps[h].1.detection.bbox.center);
        let hyp_index: HashMap<u64, usize> = hyps.iter().enumerate().map(|(k, (id, _))| (*id, k)).collect();

        let mut obj_taken = vec![false; objs.len()];
        let mut hyp_taken = vec![false; hyps.len()];
        let mut frame_matches = Vec::new();
        for (o, (oid, _)) in objs.iter().enumerate() {
            if let Some(&h) = last_match.get(oid).and_then(|hid| hyp_index.get(hid)) {
                if !hyp_taken[h] && dist(o, h) <= match_radius {
                    obj_taken[o] = true;
                    hyp_taken[h] = true;
                    frame_matches.push((o, h));
                }
            }
        }
        let free_objs: Vec<usize> = (0..objs.len()).filter(|&o| !obj_taken[o]).collect();
        let free_hyps: Vec<usize> = (0..hyps.len()).filter(|&h| !hyp_taken[h]).collect();
        // gated pairs outweigh any combination of shorter distances,
        // so the optimum first maximizes the match count
        let big = 2.0 * match_radius * (free_objs.len().max(free_hyps.len()) as f64 + 1.0);
        let w = Array2::from_shape_fn((free_objs.len(), free_hyps.len()), |(a, b)| {
            let d = dist(free_objs[a], free_hyps[b]);
            if d <= match_radius {
                big - d
            } else {
                0.0
            }
        });
        for (a, b) in max_weight_assignment(&w) {
            let (o, h) = (free_objs[a], free_hyps[b]);
            if dist(o, h) <= match_radius {
                frame_matches.push((o, h));
                obj_taken[o] = true;
                hyp_taken[h] = true;
            }
        }
        for (o, h) in frame_matches {
            let (oid, hid) = (objs[o].0, hyps[h].0);
            if let Some(prev) = last_match.insert(oid, hid) {
                if prev != hid {
                    ids += 1;
                }
            }
            matches += 1;
            dist_sum += dist(o, h);
        }
        fn_ += obj_taken.iter().filter(|t| !**t).count() as u64;
        fp += hyp_taken.iter().filter(|t| !**t).count() as u64;
    }

    if gt_count == 0 {
        return Err(Error::UndefinedMota);
    }
    let mut report = MotReport {
        mota: 0.0,
        motp: if matches > 0 { dist_sum / matches as f64 } else { 0.0 },
        id_switches: ids,
        false_pos: fp,
        false_neg: fn_,
        gt_count,
        matches,
        seconds_per_frame: 0.0,
    };
    report.mota = report.recomputed_mota();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::association::TrackEntry;
    use crate::geometry::{Detection, OrientedBox3, Point3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn entry(frame: u64, x: f64, y: f64) -> TrackEntry {
        let b = OrientedBox3::new(Point3::new(x, y, 0.0), 1.0, 1.0, 1.0, 0.0).unwrap();
        TrackEntry {
            frame,
            slot: 0,
            detection: Detection::new(b, 1.0, None).unwrap(),
        }
    }

    fn random_tracks(rng: &mut ChaCha8Rng, n_tracks: u64, frames: u64) -> TrackSet {
        let mut ts = TrackSet::new();
        for id in 0..n_tracks {
            let (x0, y0) = (rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0));
            for f in 0..frames {
                if rng.random_bool(0.85) {
                    ts.push_entry(id, entry(f, x0 + f as f64 * 0.3, y0 + rng.random_range(-0.2..0.2)));
                }
            }
        }
        ts
    }

    #[test]
    fn perfect_prediction() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let gt = random_tracks(&mut rng, 5, 10);
        let r = evaluate(&gt, &gt, 1.0).unwrap();
        assert_eq!(r.mota, 1.0);
        assert_eq!(r.motp, 0.0);
        assert_eq!((r.id_switches, r.false_pos, r.false_neg), (0, 0, 0));
    }

    #[test]
    fn empty_prediction() {
        let mut gt = TrackSet::new();
        for id in 0..10 {
            gt.push_entry(id, entry(0, id as f64 * 5.0, 0.0));
        }
        let r = evaluate(&gt, &TrackSet::new(), 1.0).unwrap();
        assert_eq!(r.false_neg, 10);
        assert_eq!(r.mota, 0.0);
    }

    #[test]
    fn swap_counts_two_switches() {
        let mut gt = TrackSet::new();
        let mut pred = TrackSet::new();
        for f in 0..3 {
            gt.push_entry(0, entry(f, 0.0, 0.0));
            gt.push_entry(1, entry(f, 10.0, 0.0));
            let (a, b) = if f < 2 { (0.0, 10.0) } else { (10.0, 0.0) };
            pred.push_entry(7, entry(f, a, 0.0));
            pred.push_entry(8, entry(f, b, 0.0));
        }
        let r = evaluate(&gt, &pred, 1.0).unwrap();
        assert_eq!((r.id_switches, r.false_pos, r.false_neg), (2, 0, 0));
        assert_eq!(r.mota, 1.0 - 2.0 / 6.0);
    }

    #[test]
    fn empty_ground_truth_is_an_error() {
        let mut pred = TrackSet::new();
        pred.push_entry(0, entry(0, 0.0, 0.0));
        assert!(matches!(evaluate(&TrackSet::new(), &pred, 1.0), Err(Error::UndefinedMota)));
    }

    #[test]
    fn gate_and_motp() {
        let mut gt = TrackSet::new();
        let mut pred = TrackSet::new();
        gt.push_entry(0, entry(0, 0.0, 0.0));
        gt.push_entry(1, entry(0, 20.0, 0.0));
        pred.push_entry(0, entry(0, 0.5, 0.0));
        pred.push_entry(1, entry(0, 21.5, 0.0));
        let r = evaluate(&gt, &pred, 1.0).unwrap();
        assert_eq!((r.matches, r.false_pos, r.false_neg), (1, 1, 1));
        assert!((r.motp - 0.5).abs() < 1e-15);
    }

    #[test]
    fn continuation_is_preferred() {
        // hypothesis 5 follows object 0; at frame 1 hypothesis 6 is slightly closer
        let mut gt = TrackSet::new();
        let mut pred = TrackSet::new();
        gt.push_entry(0, entry(0, 0.0, 0.0));
        gt.push_entry(0, entry(1, 0.0, 0.0));
        pred.push_entry(5, entry(0, 0.1, 0.0));
        pred.push_entry(5, entry(1, 0.4, 0.0));
        pred.push_entry(6, entry(1, 0.05, 0.0));
        let r = evaluate(&gt, &pred, 1.0).unwrap();
        assert_eq!((r.id_switches, r.false_pos), (0, 1));
    }

    #[test]
    fn report_formats() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let gt = random_tracks(&mut rng, 3, 5);
        let r = evaluate(&gt, &gt, 1.0).unwrap();
        let back: MotReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back, r);
        let table = r.to_string();
        assert!(table.lines().next().unwrap().starts_with("MOTA"));
        for key in ["mota", "motp", "id_switches", "false_pos", "false_neg", "gt_count", "matches", "seconds_per_frame"] {
            assert!(r.to_json().contains(&format!("\"{key}\"")));
        }
    }

    proptest::proptest! {
        #[test]
        fn mota_identity_and_relabeling(seed in 0u64..5000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let gt = random_tracks(&mut rng, 6, 8);
            // noisy prediction: jitter, drops, and a few spurious tracks
            let mut pred = TrackSet::new();
            for (id, entries) in &gt.tracks {
                for e in entries {
                    if rng.random_bool(0.9) {
                        let c = e.detection.bbox.center;
                        let pid = if rng.random_bool(0.1) { id + 100 } else { *id };
                        pred.push_entry(pid, entry(e.frame, c.x + rng.random_range(-0.6..0.6), c.y));
                    }
                }
            }
            for k in 0..3 {
                pred.push_entry(500 + k, entry(rng.random_range(0..8), rng.random_range(-50.0..50.0), 80.0));
            }
            let r = evaluate(&gt, &pred, 1.0).unwrap();
            proptest::prop_assert!((r.recomputed_mota() - r.mota).abs() < 1e-12);
            proptest::prop_assert!(r.false_neg <= r.gt_count);

            let mut relabeled = TrackSet::new();
            for (id, entries) in &pred.tracks {
                for e in entries {
                    relabeled.push_entry(10_000 - id, *e);
                }
            }
            proptest::prop_assert_eq!(evaluate(&gt, &relabeled, 1.0).unwrap(), r);

            // removing a spurious (never matched) prediction cannot lower MOTA
            let mut fewer = pred.clone();
            fewer.tracks.remove(&500);
            let r2 = evaluate(&gt, &fewer, 1.0).unwrap();
            proptest::prop_assert!(r2.mota >= r.mota);
        }
    }
}
