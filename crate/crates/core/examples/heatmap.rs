//! Per-cell ciphertext change counts of obfuscated swaps at random offsets.

use cipherlab::attacks::heatmap_experiment;
use cipherlab::interp::RunConfig;
use cipherlab::transform::Strategy;

fn main() -> cipherlab::Result<()> {
    let rc = RunConfig::default();
    let rep = heatmap_experiment(10, 512, 64, Strategy::Obfuscate, 9, &rc)?;
    for r in &rep.runs {
        let row: String = r
            .truth_in_buffer
            .iter()
            .take(32)
            .map(|&b| if b { '#' } else { '.' })
            .collect();
        println!(
            "offset {:#7x} {row} stale {}",
            r.offset, r.stale_buffer_writes
        );
    }
    println!("location classifier {:.3}", rep.location_accuracy);
    println!("buffer uniformity (max/min) {:.3}", rep.uniformity);
    Ok(())
}
