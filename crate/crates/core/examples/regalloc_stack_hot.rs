//! Promote hundreds of sensitive stack slots into vector lanes.

use cipherlab::fixtures::{Fixture, FixtureKind};
use cipherlab::interp::{run, RunConfig};
use cipherlab::taint::run_tainted;
use cipherlab::transform::{allocate_rewrite, MaskVariant};

fn main() -> cipherlab::Result<()> {
    let fx = Fixture::build(FixtureKind::StackHot);
    let rc = RunConfig::default();
    let (inputs, _) = fx.instance(0);
    let sites = run_tainted(&fx.program, &inputs, &rc)?;
    let (p, _map, report) = allocate_rewrite(&fx.program, &sites, MaskVariant::Rdrand)?;

    for f in &report.functions {
        let lanes: std::collections::BTreeSet<_> = f.promoted.values().collect();
        println!(
            "{}: {} sensitive slots, {} promoted into {} lanes, {} residual",
            f.func,
            f.promoted.len() + f.residual.len(),
            f.promoted.len(),
            lanes.len(),
            f.residual.len()
        );
        for (slot, why) in f.residual.iter().take(5) {
            println!("  slot {slot}: {why}");
        }
    }
    let a = run(&fx.program, &inputs, &rc, None)?;
    let b = run(&p, &inputs, &rc, None)?;
    println!(
        "outputs equal: {}",
        a.trace.output_bytes() == b.trace.output_bytes()
    );
    println!("cost {} -> {}", a.cost, b.cost);
    Ok(())
}
