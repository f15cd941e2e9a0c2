//! Recover the ladder's key from ciphertext equality, then fail to once the
//! stack is masked.

use cipherlab::attacks::attack_fixture;
use cipherlab::fixtures::{Fixture, FixtureKind};
use cipherlab::interp::RunConfig;
use cipherlab::taint::run_tainted;
use cipherlab::transform::{mitigate, MaskVariant, Strategy, TransformConfig};

fn main() -> cipherlab::Result<()> {
    let fx = Fixture::build(FixtureKind::LadderBitscan);
    let rc = RunConfig::default();
    let (inputs, truth) = fx.instance(11);
    let plain = attack_fixture(&fx, &fx.program, &inputs, &truth, false, &rc, 1)?;
    println!("unprotected: {:.3}", plain["dictionary"].accuracy);

    let sites = run_tainted(&fx.program, &inputs, &rc)?;
    for v in MaskVariant::ALL {
        let m = mitigate(
            &fx.program,
            &sites,
            Strategy::Mask,
            v,
            &TransformConfig::default(),
        )?;
        let r = attack_fixture(&fx, &m.program, &inputs, &truth, false, &rc, 1)?;
        println!("mask {:6}: {:.3}", v.name(), r["dictionary"].accuracy);
    }
    Ok(())
}
