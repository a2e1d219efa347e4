// Scores all previous/current pairs of two frames and prints the trimmed
// forward and backward association matrices.

use pcdan::affinity::{estimate_affinity, CompressionNet};
use pcdan::featurize::{FeatureSet, FeatureVec};

pub fn run_example() -> pcdan::Result<()> {
    let width = 8;
    let feature = |id: u64| FeatureVec((0..width).map(|k| ((id * 31 + k as u64) % 7) as f64 - 3.0).collect());
    let prev = FeatureSet::new(0, width, 5, vec![feature(1), feature(2), feature(3)])?;
    let cur = FeatureSet::new(1, width, 5, vec![feature(3), feature(1)])?;
    let net = CompressionNet::random(&[2 * width, 16, 12, 8, 4, 1], 11)?;
    let aff = estimate_affinity(&prev, &cur, &net)?;
    let (cp, cc) = (aff.count_prev, aff.count_cur);
    println!("A1 (rows: previous objects, last column: leaves)");
    for i in 0..cp {
        let row: Vec<String> = (0..cc).chain([aff.capacity()]).map(|j| format!("{:.3}", aff.a1[[i, j]])).collect();
        println!("  {}", row.join(" "));
    }
    println!("A2 (columns: current objects, last row: enters)");
    for i in (0..cp).chain([aff.capacity()]) {
        let row: Vec<String> = (0..cc).map(|j| format!("{:.3}", aff.a2[[i, j]])).collect();
        println!("  {}", row.join(" "));
    }
    Ok(())
}

#[allow(dead_code)]
fn main() {
    run_example().expect("affinity example failed");
}
