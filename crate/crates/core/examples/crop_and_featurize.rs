// Crops every detection of one frame into its box frame and embeds it
// with a randomly initialized PointNet-lite.

use pcdan::crop::crop_frame;
use pcdan::featurize::{featurize_frame, PointNetWeights, DEFAULT_POINTNET_WIDTHS};
use pcdan::synth::{generate_frames, SynthConfig};

pub fn run_example() -> pcdan::Result<()> {
    let frames = generate_frames(&SynthConfig {
        n_objects: 4,
        n_frames: 1,
        seed: 3,
        ..Default::default()
    })?;
    let frame = &frames[0];
    let crops = crop_frame(frame, 128, 0);
    let net = PointNetWeights::random(&DEFAULT_POINTNET_WIDTHS, 0)?;
    let feats = featurize_frame(frame.index, &crops, &net, 100)?;
    for (slot, (det, crop)) in frame.detections.iter().zip(&crops).enumerate() {
        let f = &feats.get(slot).expect("slot is valid").0;
        let norm = f.iter().map(|v| v * v).sum::<f64>().sqrt();
        println!(
            "slot {slot}: gt {:?}, {} of {} points kept, feature |f| = {norm:.3}",
            det.gt_id,
            crop.valid_count,
            crop.points.len()
        );
    }
    println!("feature width {}, capacity {}", feats.width(), feats.capacity());
    Ok(())
}

#[allow(dead_code)]
fn main() {
    run_example().expect("featurize example failed");
}
