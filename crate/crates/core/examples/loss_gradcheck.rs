// Runs the gradient and loss-identity checks the `losscheck` command uses.

use pcdan::losscheck::{run, LossCheckConfig};

pub fn run_example() -> pcdan::Result<()> {
    let report = run(&LossCheckConfig {
        trials: 10,
        seed: 5,
        ..Default::default()
    })?;
    for check in &report.checks {
        println!("{check}");
    }
    if !report.all_passed() {
        return Err(pcdan::Error::Consistency("loss checks failed".into()));
    }
    Ok(())
}

#[allow(dead_code)]
fn main() {
    run_example().expect("loss check example failed");
}
