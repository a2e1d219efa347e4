// CLEAR-MOT scores for two ground-truth tracks whose predicted ids swap.

use pcdan::association::{TrackEntry, TrackSet};
use pcdan::geometry::{Detection, OrientedBox3, Point3};
use pcdan::metrics::evaluate;

fn entry(frame: u64, x: f64) -> pcdan::Result<TrackEntry> {
    let bbox = OrientedBox3::new(Point3::new(x, 0.0, 1.0), 2.0, 1.0, 2.0, 0.0)?;
    Ok(TrackEntry {
        frame,
        slot: 0,
        detection: Detection::new(bbox, 1.0, None)?,
    })
}

pub fn run_example() -> pcdan::Result<()> {
    let mut gt = TrackSet::new();
    let mut pred = TrackSet::new();
    for f in 0..3 {
        gt.push_entry(0, entry(f, 0.0)?);
        gt.push_entry(1, entry(f, 10.0)?);
        let (a, b) = if f < 2 { (0.1, 10.1) } else { (10.1, 0.1) };
        pred.push_entry(7, entry(f, a)?);
        pred.push_entry(8, entry(f, b)?);
    }
    let report = evaluate(&gt, &pred, 1.0)?;
    println!("{report}");
    println!("{}", report.to_json());
    Ok(())
}

#[allow(dead_code)]
fn main() {
    run_example().expect("evaluation example failed");
}
