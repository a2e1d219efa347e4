// Fits a narrow affinity network on one synthetic sequence, tracks a
// different one and scores the result.

use pcdan::association::{ground_truth_tracks, track_sequence, TrackConfig};
use pcdan::metrics::evaluate;
use pcdan::model::ModelWeights;
use pcdan::synth::{generate, SynthConfig, SynthEvent};
use pcdan::train::{train, TrainConfig};

pub fn run_example() -> pcdan::Result<()> {
    let dir = tempfile::tempdir().map_err(|e| pcdan::Error::Data(e.to_string()))?;
    let mut events = Vec::new();
    for k in 0..5 {
        events.push(SynthEvent::Leave { frame: 8 * (k + 1), object: k });
        events.push(SynthEvent::Enter { frame: 8 * (k + 1) });
    }
    let train_seq = generate(
        &SynthConfig {
            n_objects: 3,
            n_frames: 48,
            seed: 1,
            events,
            ..Default::default()
        },
        dir.path().join("train"),
    )?;
    let test_seq = generate(
        &SynthConfig {
            n_objects: 3,
            n_frames: 15,
            seed: 2,
            events: vec![SynthEvent::Leave { frame: 6, object: 0 }, SynthEvent::Enter { frame: 9 }],
            ..Default::default()
        },
        dir.path().join("test"),
    )?;

    let init = ModelWeights::random_with_widths(&[3, 32, 64, 128], &[64, 32, 16, 8, 1], 0)?;
    let cfg = TrainConfig {
        steps: 150,
        learning_rate: 2e-2,
        ..Default::default()
    };
    let mut log = Vec::new();
    let model = train(&train_seq, &cfg, init, &mut log)?;
    let log = String::from_utf8_lossy(&log);
    let mut rows = log.lines().skip(1);
    println!("first step: {}", rows.next().unwrap_or(""));
    println!("last step:  {}", rows.last().unwrap_or(""));

    let out = track_sequence(&test_seq, &model, &TrackConfig::default())?;
    let report = evaluate(&ground_truth_tracks(&test_seq)?, &out.tracks, 1.0)?;
    println!("{} tracks over {} frames", out.tracks.len(), out.frames);
    println!("{report}");
    Ok(())
}

#[allow(dead_code)]
fn main() {
    run_example().expect("train and track example failed");
}
