//! Collision attack on the swap's decision bits, with both attacker levels.

use cipherlab::attacks::attack_fixture;
use cipherlab::fixtures::{Fixture, FixtureKind};
use cipherlab::interp::RunConfig;
use cipherlab::taint::run_tainted;
use cipherlab::transform::{mitigate, MaskVariant, Strategy, TransformConfig};

fn main() -> cipherlab::Result<()> {
    let fx = Fixture::build(FixtureKind::CtSwap);
    let rc = RunConfig::default();
    let (inputs, truth) = fx.instance(12);
    let sites = run_tainted(&fx.program, &inputs, &rc)?;

    let plain = attack_fixture(&fx, &fx.program, &inputs, &truth, false, &rc, 3)?;
    println!(
        "unprotected  blind {:.3}  aware {:.3}",
        plain["collision_blind"].accuracy, plain["collision_aware"].accuracy
    );
    for s in [Strategy::Obfuscate, Strategy::Full] {
        let m = mitigate(
            &fx.program,
            &sites,
            s,
            MaskVariant::Rdrand,
            &TransformConfig::default(),
        )?;
        let adapted = m.map.adapt_inputs(&inputs, &rc.layout);
        let r = attack_fixture(&fx, &m.program, &adapted, &truth, true, &rc, 3)?;
        println!(
            "{:10}   blind {:.3}  aware {:.3}",
            s.name(),
            r["collision_blind"].accuracy,
            r["collision_aware"].accuracy
        );
    }
    // An attacker who knows the parity rule watches odd cells only, where
    // the truth is still written in place.
    Ok(())
}
