//! Turning pairwise affinities into tracks.
//!
//! Forward and backward affinities are fused into one score matrix, an
//! optimal assignment is solved on it, and the result extends, opens or
//! closes tracks frame by frame.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use ndarray::Array2;

use crate::affinity::{estimate_affinity, AffinityMatrices};
use crate::crop::{crop_frame, DEFAULT_POINTS_PER_OBJECT};
use crate::error::{Error, Result};
use crate::featurize::featurize_frame;
use crate::geometry::{Detection, OrientedBox3, Point3};
use crate::ingest::SequenceSource;
use crate::model::ModelWeights;

pub const TRACKS_HEADER: &str = "frame,track_id,cx,cy,cz,l,w,h,yaw,conf";
pub const DEFAULT_BIRTH_THRESHOLD: f64 = 0.3;

/// `count_prev x (count_cur + 1)`: mean of `Â1` and `Â2` on real columns,
/// the leave probability `A1[i, N]` in the last column.
pub fn score_matrix(aff: &AffinityMatrices) -> Array2<f64> {
    let (np, nc) = (aff.count_prev, aff.count_cur);
    let n = aff.capacity();
    let mut s = Array2::zeros((np, nc + 1));
    for i in 0..np {
        for j in 0..nc {
            s[[i, j]] = (aff.a1_trim[[i, j]] + aff.a2_trim[[i, j]]) / 2.0;
        }
        s[[i, nc]] = aff.a1[[i, n]];
    }
    s
}

/// Maximum-weight perfect assignment on the smaller side of `w`
/// (Hungarian method with potentials, `O(n^2 m)`). Returns `(row, col)`
/// pairs sorted by row.
pub fn max_weight_assignment(w: &Array2<f64>) -> Vec<(usize, usize)> {
    let (rows, cols) = w.dim();
    if rows == 0 || cols == 0 {
        return Vec::new();
    }
    if rows > cols {
        let mut pairs: Vec<_> = max_weight_assignment(&w.t().to_owned())
            .into_iter()
            .map(|(c, r)| (r, c))
            .collect();
        pairs.sort_unstable();
        return pairs;
    }
    let (n, m) = (rows, cols);
    let cost = |i: usize, j: usize| -w[[i - 1, j - 1]];
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost(i0, j) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut pairs: Vec<_> = (1..=m).filter(|&j| p[j] != 0).map(|j| (p[j] - 1, j - 1)).collect();
    pairs.sort_unstable();
    pairs
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct AssignmentResult {
    /// `(prev_slot, cur_slot)`, sorted.
    pub matches: Vec<(usize, usize)>,
    pub births: Vec<usize>,
    pub deaths: Vec<usize>,
}

/// Whether `(i, j)` may be matched: it must beat both the leave score and
/// the birth threshold.
pub fn keep_match(s: &Array2<f64>, i: usize, j: usize, birth_threshold: f64) -> bool {
    let leave = s[[i, s.ncols() - 1]];
    s[[i, j]] > leave && s[[i, j]] > birth_threshold
}

/// Optimal assignment over the real block of `s` restricted to kept pairs.
/// Unmatched previous slots die, unmatched current slots are born.
pub fn solve_assignment(s: &Array2<f64>, birth_threshold: f64) -> AssignmentResult {
    let np = s.nrows();
    let nc = s.ncols().saturating_sub(1);
    // dropped pairs weigh zero, so the optimum over all assignments equals
    // the optimum over partial matchings of kept pairs
    let w = Array2::from_shape_fn((np, nc), |(i, j)| {
        if keep_match(s, i, j, birth_threshold) {
            s[[i, j]]
        } else {
            0.0
        }
    });
    let matches: Vec<(usize, usize)> = max_weight_assignment(&w)
        .into_iter()
        .filter(|&(i, j)| keep_match(s, i, j, birth_threshold))
        .collect();
    let mut prev_used = vec![false; np];
    let mut cur_used = vec![false; nc];
    for &(i, j) in &matches {
        prev_used[i] = true;
        cur_used[j] = true;
    }
    AssignmentResult {
        births: (0..nc).filter(|&j| !cur_used[j]).collect(),
        deaths: (0..np).filter(|&i| !prev_used[i]).collect(),
        matches,
    }
}

impl AssignmentResult {
    /// Every current slot born; used for the first frame.
    pub fn all_births(count: usize) -> Self {
        Self {
            births: (0..count).collect(),
            ..Default::default()
        }
    }

    pub fn matched_score(&self, s: &Array2<f64>) -> f64 {
        self.matches.iter().map(|&(i, j)| s[[i, j]]).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackEntry {
    pub frame: u64,
    pub slot: usize,
    pub detection: Detection,
}

/// Identity-labeled trajectories.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrackSet {
    pub tracks: BTreeMap<u64, Vec<TrackEntry>>,
    pub next_id: u64,
    // slot -> track id for the most recently updated frame
    active: HashMap<usize, u64>,
    last_frame: Option<u64>,
}

impl TrackSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.tracks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tracks.is_empty()
    }

    pub fn entry_count(&self) -> usize {
        self.tracks.values().map(Vec::len).sum()
    }

    /// Inserts an entry under an explicit id (ground truth, parsed files).
    pub fn push_entry(&mut self, track_id: u64, entry: TrackEntry) {
        self.tracks.entry(track_id).or_default().push(entry);
        self.next_id = self.next_id.max(track_id + 1);
    }

    /// `(track_id, entry)` for every entry in `frame`, ordered by id.
    pub fn frame_entries(&self, frame: u64) -> Vec<(u64, &TrackEntry)> {
        self.tracks
            .iter()
            .filter_map(|(id, entries)| entries.iter().find(|e| e.frame == frame).map(|e| (*id, e)))
            .collect()
    }

    pub fn frames(&self) -> Vec<u64> {
        let mut f: Vec<u64> = self.tracks.values().flatten().map(|e| e.frame).collect();
        f.sort_unstable();
        f.dedup();
        f
    }

    /// Rows `(frame, track_id, entry)` sorted by frame, then id.
    pub fn rows(&self) -> Vec<(u64, u64, &TrackEntry)> {
        let mut rows: Vec<_> = self
            .tracks
            .iter()
            .flat_map(|(id, entries)| entries.iter().map(move |e| (e.frame, *id, e)))
            .collect();
        rows.sort_by_key(|(f, id, _)| (*f, *id));
        rows
    }
}

/// Applies one frame's assignment. `detections` are the admitted detections
/// of `frame_index`, indexed by current slot.
pub fn update_tracks(mut ts: TrackSet, result: &AssignmentResult, frame_index: u64, detections: &[Detection]) -> Result<TrackSet> {
    if let Some(last) = ts.last_frame {
        if frame_index <= last {
            return Err(Error::Consistency(format!(
                "frame {frame_index} does not follow frame {last}"
            )));
        }
    }
    let mut claimed = vec![false; detections.len()];
    let mut claim = |slot: usize| -> Result<()> {
        match claimed.get_mut(slot) {
            None => Err(Error::Consistency(format!(
                "slot {slot} out of range for frame {frame_index} with {} detections",
                detections.len()
            ))),
            Some(true) => Err(Error::Consistency(format!(
                "slot {slot} claimed twice in frame {frame_index}"
            ))),
            Some(c) => {
                *c = true;
                Ok(())
            }
        }
    };
    let mut next_active = HashMap::new();
    for &(prev, cur) in &result.matches {
        claim(cur)?;
        let id = *ts.active.get(&prev).ok_or_else(|| {
            Error::Consistency(format!("previous slot {prev} is not on an active track"))
        })?;
        ts.tracks.get_mut(&id).expect("active track exists").push(TrackEntry {
            frame: frame_index,
            slot: cur,
            detection: detections[cur],
        });
        next_active.insert(cur, id);
    }
    for &cur in &result.births {
        claim(cur)?;
        let id = ts.next_id;
        ts.next_id += 1;
        ts.tracks.insert(
            id,
            vec![TrackEntry {
                frame: frame_index,
                slot: cur,
                detection: detections[cur],
            }],
        );
        next_active.insert(cur, id);
    }
    if let Some(slot) = claimed.iter().position(|c| !c) {
        return Err(Error::Consistency(format!(
            "slot {slot} of frame {frame_index} is neither matched nor born"
        )));
    }
    ts.active = next_active;
    ts.last_frame = Some(frame_index);
    Ok(ts)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackConfig {
    pub points_per_object: usize,
    pub birth_threshold: f64,
    pub seed: u64,
}

impl Default for TrackConfig {
    fn default() -> Self {
        Self {
            points_per_object: DEFAULT_POINTS_PER_OBJECT,
            birth_threshold: DEFAULT_BIRTH_THRESHOLD,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrackingOutput {
    pub tracks: TrackSet,
    pub frames: u64,
    pub seconds_per_frame: f64,
}

/// Runs the whole pipeline over consecutive frames of `src`.
pub fn track_sequence(src: &SequenceSource, model: &ModelWeights, cfg: &TrackConfig) -> Result<TrackingOutput> {
    if !(0.0..=1.0).contains(&cfg.birth_threshold) {
        return Err(Error::Config(format!(
            "birth threshold must lie in [0, 1], got {}",
            cfg.birth_threshold
        )));
    }
    if cfg.points_per_object == 0 {
        return Err(Error::Config("points_per_object must be at least 1".into()));
    }
    let capacity = src.config.max_objects;
    let started = Instant::now();
    let mut ts = TrackSet::new();
    let mut prev = None;
    for idx in 0..src.frame_count {
        let frame = src.load_admitted(idx)?;
        let crops = crop_frame(&frame, cfg.points_per_object, cfg.seed);
        let feats = featurize_frame(idx, &crops, &model.pointnet, capacity)?;
        let result = match &prev {
            None => AssignmentResult::all_births(feats.count()),
            Some(prev_feats) => {
                let aff = estimate_affinity(prev_feats, &feats, &model.compression)?;
                solve_assignment(&score_matrix(&aff), cfg.birth_threshold)
            }
        };
        ts = update_tracks(ts, &result, idx, &frame.detections)?;
        prev = Some(feats);
    }
    let elapsed = started.elapsed().as_secs_f64();
    Ok(TrackingOutput {
        tracks: ts,
        frames: src.frame_count,
        seconds_per_frame: if src.frame_count > 0 { elapsed / src.frame_count as f64 } else { 0.0 },
    })
}

/// Ground-truth trajectories: every detection carrying an identity, keyed
/// by that identity. Confidence is ignored.
pub fn ground_truth_tracks(src: &SequenceSource) -> Result<TrackSet> {
    let mut ts = TrackSet::new();
    for idx in 0..src.frame_count {
        let frame = src.load_frame(idx)?;
        for (slot, d) in frame.detections.iter().enumerate() {
            if let Some(id) = d.gt_id {
                ts.push_entry(
                    id,
                    TrackEntry {
                        frame: idx,
                        slot,
                        detection: *d,
                    },
                );
            }
        }
    }
    Ok(ts)
}

pub fn encode_tracks(ts: &TrackSet) -> String {
    let mut s = String::from(TRACKS_HEADER);
    s.push('\n');
    for (frame, id, e) in ts.rows() {
        let d = &e.detection;
        let b = &d.bbox;
        s.push_str(&format!(
            "{frame},{id},{},{},{},{},{},{},{},{}\n",
            b.center.x, b.center.y, b.center.z, b.length, b.width, b.height, b.yaw, d.confidence
        ));
    }
    s
}

pub fn write_tracks(ts: &TrackSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(encode_tracks(ts).as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_tracks(path: impl AsRef<Path>) -> Result<TrackSet> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::Reader::from_reader(file);
    let parse_err = |line: u64, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let header = reader
        .headers()
        .map_err(|e| parse_err(1, e.to_string()))?
        .iter()
        .collect::<Vec<_>>()
        .join(",");
    if header != TRACKS_HEADER {
        return Err(parse_err(1, format!("unexpected header {header:?}")));
    }
    let mut ts = TrackSet::new();
    let mut slots: HashMap<u64, usize> = HashMap::new();
    for record in reader.records() {
        let record = record.map_err(|e| parse_err(e.position().map(|p| p.line()).unwrap_or(0), e.to_string()))?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let field = |k: usize| record.get(k).unwrap_or("").trim();
        let int = |k: usize| field(k).parse::<u64>().map_err(|_| parse_err(line, format!("column {k}: bad integer {:?}", field(k))));
        let num = |k: usize| {
            field(k)
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| parse_err(line, format!("column {k}: bad number {:?}", field(k))))
        };
        let frame = int(0)?;
        let id = int(1)?;
        let bbox = OrientedBox3::new(Point3::new(num(2)?, num(3)?, num(4)?), num(5)?, num(6)?, num(7)?, num(8)?)
            .map_err(|e| parse_err(line, e.to_string()))?;
        let detection = Detection::new(bbox, num(9)?, None).map_err(|e| parse_err(line, e.to_string()))?;
        let slot = slots.entry(frame).or_default();
        ts.push_entry(id, TrackEntry { frame, slot: *slot, detection });
        *slot += 1;
    }
    for entries in ts.tracks.values_mut() {
        entries.sort_by_key(|e| e.frame);
        if entries.windows(2).any(|w| w[0].frame == w[1].frame) {
            return Err(Error::Data(format!("{}: a track appears twice in one frame", path.display())));
        }
    }
    Ok(ts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::affinity::augment_and_softmax;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn det(x: f64) -> Detection {
        Detection::new(OrientedBox3::new(Point3::new(x, 0.0, 0.0), 1.0, 1.0, 1.0, 0.0).unwrap(), 0.9, None).unwrap()
    }

    #[test]
    fn score_fusion() {
        let m = ndarray::array![[0.3, -0.2], [1.0, 0.5]];
        let aff = augment_and_softmax(&m, 2, 2, 0.1);
        let s = score_matrix(&aff);
        assert_eq!(s.dim(), (2, 3));
        for i in 0..2 {
            for j in 0..2 {
                assert_eq!(s[[i, j]], (aff.a1[[i, j]] + aff.a2[[i, j]]) / 2.0);
            }
            assert_eq!(s[[i, 2]], aff.a1[[i, 2]]);
        }
        // a one-by-one pair normalizes the same logits both ways
        let aff = augment_and_softmax(&ndarray::array![[0.7]], 1, 1, 0.0);
        assert_eq!(score_matrix(&aff)[[0, 0]], aff.a1[[0, 0]]);
    }

    #[test]
    fn fused_mean_example() {
        let (x, y) = (0.8, 0.6);
        assert!(((x + y) / 2.0 - 0.7f64).abs() < 1e-15);
    }

    #[test]
    fn identity_scores() {
        let mut s = Array2::zeros((4, 5));
        for i in 0..4 {
            s[[i, i]] = 1.0;
        }
        let r = solve_assignment(&s, 0.5);
        assert_eq!(r.matches, vec![(0, 0), (1, 1), (2, 2), (3, 3)]);
        assert!(r.births.is_empty() && r.deaths.is_empty());
    }

    #[test]
    fn no_previous_objects() {
        let s = Array2::zeros((0, 4));
        let r = solve_assignment(&s, 0.3);
        assert_eq!(r.births, vec![0, 1, 2]);
        assert!(r.matches.is_empty());
    }

    #[test]
    fn keep_rule_applies() {
        // (0,0) is below the leave score; (1,1) is below the threshold
        let s = ndarray::array![[0.5, 0.1, 0.6], [0.1, 0.25, 0.0]];
        let r = solve_assignment(&s, 0.3);
        assert!(r.matches.is_empty());
        assert_eq!(r.deaths, vec![0, 1]);
        assert_eq!(r.births, vec![0, 1]);
    }

    fn brute_force_best(s: &Array2<f64>, thr: f64) -> f64 {
        fn go(s: &Array2<f64>, thr: f64, row: usize, used: &mut Vec<bool>) -> f64 {
            if row == s.nrows() {
                return 0.0;
            }
            let mut best = go(s, thr, row + 1, used);
            for j in 0..s.ncols() - 1 {
                if !used[j] && keep_match(s, row, j, thr) {
                    used[j] = true;
                    best = best.max(s[[row, j]] + go(s, thr, row + 1, used));
                    used[j] = false;
                }
            }
            best
        }
        go(s, thr, 0, &mut vec![false; s.ncols() - 1])
    }

    #[test]
    fn optimal_against_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let np = rng.random_range(0..=6);
            let nc = rng.random_range(0..=6);
            let s = Array2::from_shape_fn((np, nc + 1), |_| rng.random_range(0.0..1.0));
            let thr = rng.random_range(0.0..0.5);
            let r = solve_assignment(&s, thr);
            assert!((r.matched_score(&s) - brute_force_best(&s, thr)).abs() < 1e-12);
        }
    }

    #[test]
    fn rectangular_hungarian() {
        let w = ndarray::array![[1.0, 5.0], [4.0, 2.0], [3.0, 9.0]];
        assert_eq!(max_weight_assignment(&w), vec![(1, 0), (2, 1)]);
    }

    proptest::proptest! {
        #[test]
        fn partition_and_cur_permutation(seed in 0u64..10_000, np in 0usize..6, nc in 0usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = Array2::from_shape_fn((np, nc + 1), |_| rng.random_range(0.0..1.0));
            let r = solve_assignment(&s, 0.2);
            let mut cur_seen = vec![0; nc];
            let mut prev_seen = vec![0; np];
            for &(i, j) in &r.matches { prev_seen[i] += 1; cur_seen[j] += 1; }
            for &j in &r.births { cur_seen[j] += 1; }
            for &i in &r.deaths { prev_seen[i] += 1; }
            proptest::prop_assert!(cur_seen.iter().all(|c| *c == 1));
            proptest::prop_assert!(prev_seen.iter().all(|c| *c == 1));

            // permuting current slots permutes the matches
            let mut order: Vec<usize> = (0..nc).collect();
            rand::seq::SliceRandom::shuffle(&mut order[..], &mut rng);
            let mut ps = s.clone();
            for (k, &src) in order.iter().enumerate() {
                for i in 0..np { ps[[i, k]] = s[[i, src]]; }
            }
            let pr = solve_assignment(&ps, 0.2);
            let mut mapped: Vec<_> = pr.matches.iter().map(|&(i, k)| (i, order[k])).collect();
            mapped.sort_unstable();
            proptest::prop_assert_eq!(mapped, r.matches.clone());
            proptest::prop_assert!((pr.matched_score(&ps) - r.matched_score(&s)).abs() < 1e-12);
        }
    }

    #[test]
    fn births_get_fresh_ids() {
        let dets = vec![det(0.0), det(1.0), det(2.0)];
        let ts = update_tracks(TrackSet::new(), &AssignmentResult::all_births(3), 0, &dets).unwrap();
        assert_eq!(ts.tracks.keys().copied().collect::<Vec<_>>(), vec![0, 1, 2]);
        assert!(ts.tracks.values().all(|t| t.len() == 1));
    }

    #[test]
    fn identity_chain() {
        let dets = vec![det(0.0), det(1.0)];
        let mut ts = update_tracks(TrackSet::new(), &AssignmentResult::all_births(2), 0, &dets).unwrap();
        let same = AssignmentResult {
            matches: vec![(0, 0), (1, 1)],
            ..Default::default()
        };
        for f in 1..5 {
            ts = update_tracks(ts, &same, f, &dets).unwrap();
        }
        assert_eq!(ts.len(), 2);
        assert!(ts.tracks.values().all(|t| t.len() == 5));
    }

    #[test]
    fn leave_then_enter_gets_new_id() {
        // one lineage: present frames 0..4, gone 4..6, a new object from frame 6
        let d = vec![det(0.0)];
        let mut ts = TrackSet::new();
        for f in 0..10u64 {
            let present = !(4..6).contains(&f);
            let was_present = f > 0 && !(4..6).contains(&(f - 1));
            let r = match (was_present, present) {
                (_, false) if was_present => AssignmentResult { deaths: vec![0], ..Default::default() },
                (_, false) => AssignmentResult::default(),
                (true, true) => AssignmentResult { matches: vec![(0, 0)], ..Default::default() },
                (false, true) => AssignmentResult::all_births(1),
            };
            let dets = if present { &d[..] } else { &[] };
            ts = update_tracks(ts, &r, f, dets).unwrap();
        }
        assert_eq!(ts.len(), 2);
        assert_eq!(ts.tracks[&0].len(), 4);
        assert_eq!(ts.tracks[&1].len(), 4);
        assert_eq!(ts.next_id, 2);
    }

    #[test]
    fn double_claim_is_an_error() {
        let dets = vec![det(0.0), det(1.0)];
        let ts = update_tracks(TrackSet::new(), &AssignmentResult::all_births(2), 0, &dets).unwrap();
        let bad = AssignmentResult {
            matches: vec![(0, 0)],
            births: vec![0, 1],
            deaths: vec![1],
        };
        assert!(matches!(update_tracks(ts, &bad, 1, &dets), Err(Error::Consistency(_))));
    }

    #[test]
    fn tracks_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        let dets = vec![det(0.5), det(-1.25)];
        let mut ts = update_tracks(TrackSet::new(), &AssignmentResult::all_births(2), 0, &dets).unwrap();
        let r = AssignmentResult { matches: vec![(1, 0)], births: vec![1], deaths: vec![0] };
        ts = update_tracks(ts, &r, 1, &dets).unwrap();
        write_tracks(&ts, &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with(TRACKS_HEADER));
        assert_eq!(text.lines().count(), 1 + ts.entry_count());
        let back = read_tracks(&path).unwrap();
        assert_eq!(encode_tracks(&back), text);
    }
}
