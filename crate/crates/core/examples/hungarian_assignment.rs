// Turns a score matrix into matches, births and deaths.

use ndarray::array;
use pcdan::association::solve_assignment;

pub fn run_example() -> pcdan::Result<()> {
    // rows: previous objects; columns: current objects, then the leave score
    let scores = array![
        [0.90, 0.05, 0.02, 0.03],
        [0.10, 0.20, 0.15, 0.55],
        [0.05, 0.70, 0.10, 0.15],
    ];
    let result = solve_assignment(&scores, 0.3);
    for &(i, j) in &result.matches {
        println!("previous {i} -> current {j} (score {:.2})", scores[[i, j]]);
    }
    println!("new tracks for current {:?}", result.births);
    println!("tracks ending at previous {:?}", result.deaths);
    Ok(())
}

#[allow(dead_code)]
fn main() {
    run_example().expect("assignment example failed");
}
