//! Audit a full-pipeline rewrite, check trace equivalence, and show that
//! broken rewrites are caught.

use cipherlab::fixtures::{Fixture, FixtureKind};
use cipherlab::interp::RunConfig;
use cipherlab::taint::run_tainted;
use cipherlab::transform::full_pipeline;
use cipherlab::verify::{audit, check_mutation, trace_equiv, Mutation};

fn main() -> cipherlab::Result<()> {
    let fx = Fixture::build(FixtureKind::CtSwap);
    let rc = RunConfig::default();
    let (inputs, _) = fx.instance(5);
    let sites = run_tainted(&fx.program, &inputs, &rc)?;
    let m = full_pipeline(&fx.program, &sites, &Default::default())?;

    let report = audit(&fx.program, &sites, &m.program, &m.map, Some(&inputs), &rc);
    for o in &report.obligations {
        println!("{:3} {:?} {}", o.id, o.status, o.description);
    }
    let eq = trace_equiv(&fx.program, &m.program, &m.map, &inputs, &rc, true)?;
    println!("trace equivalent: {}", eq.equivalent);

    for mu in Mutation::ALL.iter().filter(|m| m.targets_diversion()) {
        let r = check_mutation(*mu, &fx.program, &sites, &m.program, &m.map, &inputs, &rc);
        println!(
            "{mu:?}: detected {} by {:?}",
            r.detected, r.failed_obligations
        );
    }
    Ok(())
}
