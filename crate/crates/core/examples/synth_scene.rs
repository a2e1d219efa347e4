// Generates a small synthetic sequence, adds detector noise, and reads it
// back through the ingestion filter.

use pcdan::ingest::{IngestConfig, SequenceSource};
use pcdan::synth::{generate, perturb, ConfModel, PerturbConfig, SynthConfig, SynthEvent};

pub fn run_example() -> pcdan::Result<()> {
    let dir = tempfile::tempdir().map_err(|e| pcdan::Error::Data(e.to_string()))?;
    let cfg = SynthConfig {
        n_objects: 3,
        n_frames: 10,
        seed: 7,
        events: vec![SynthEvent::Leave { frame: 4, object: 0 }, SynthEvent::Enter { frame: 6 }],
        ..Default::default()
    };
    let clean = generate(&cfg, dir.path().join("clean"))?;
    let noisy = perturb(
        &clean,
        dir.path().join("noisy"),
        &PerturbConfig {
            det_noise_sigma: 0.05,
            fp_rate: 0.5,
            conf_model: ConfModel::Capped { max: 0.4 },
            seed: 7,
            ..Default::default()
        },
    )?;
    let noisy = SequenceSource::open(&noisy.root_path, IngestConfig::default())?;
    for idx in 0..clean.frame_count {
        let raw = noisy.load_frame(idx)?;
        let admitted = noisy.load_admitted(idx)?;
        let ids: Vec<_> = admitted.detections.iter().filter_map(|d| d.gt_id).collect();
        println!(
            "frame {idx:2}: {:4} points, {} raw boxes, {} admitted, ids {ids:?}",
            raw.cloud.len(),
            raw.detections.len(),
            admitted.detections.len()
        );
    }
    Ok(())
}

#[allow(dead_code)]
fn main() {
    run_example().expect("synth example failed");
}
