//! Find the secret-dependent sites of the ladder with dynamic taint.

use cipherlab::fixtures::{Fixture, FixtureKind};
use cipherlab::interp::RunConfig;
use cipherlab::taint::{merge_sites, run_tainted};

fn main() -> cipherlab::Result<()> {
    let fx = Fixture::build(FixtureKind::LadderBitscan);
    let rc = RunConfig::default();
    let mut sites = None;
    for seed in 0..3 {
        let (inputs, _) = fx.instance(seed);
        let s = run_tainted(&fx.program, &inputs, &rc)?;
        sites = Some(match sites {
            None => s,
            Some(acc) => merge_sites(&acc, &s)?,
        });
    }
    let sites = sites.unwrap();
    println!("sensitive stores {:?}", sites.stores);
    println!("sensitive loads  {:?}", sites.loads);
    println!("stack slots      {:?}", sites.stack_slots);
    println!("heap cells       {:?}", sites.heap);
    let pbit = fx.landmarks.pbit_bit_store.unwrap();
    println!(
        "pbit = kbit store {pbit} flagged: {}",
        sites.stores.contains(&pbit)
    );
    Ok(())
}
