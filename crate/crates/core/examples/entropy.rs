//! Shannon entropy of the values stored to the ladder's pbit slot.

use cipherlab::attacks::{pbit_sequence, shannon_entropy};
use cipherlab::fixtures::{Fixture, FixtureKind};
use cipherlab::interp::RunConfig;
use cipherlab::taint::run_tainted;
use cipherlab::transform::{mitigate, MaskVariant, Strategy, TransformConfig};

fn main() -> cipherlab::Result<()> {
    let fx = Fixture::build(FixtureKind::LadderBitscan);
    let rc = RunConfig::default();
    let (inputs, _) = fx.instance(2);
    let plain = pbit_sequence(&fx, &fx.program, &inputs, &rc)?;
    println!(
        "unprotected: {:.4} bits over {} samples",
        shannon_entropy(&plain)?,
        plain.len()
    );

    let sites = run_tainted(&fx.program, &inputs, &rc)?;
    for v in MaskVariant::ALL {
        let m = mitigate(
            &fx.program,
            &sites,
            Strategy::Mask,
            v,
            &TransformConfig::default(),
        )?;
        let seq = pbit_sequence(&fx, &m.program, &inputs, &rc)?;
        println!(
            "mask {:6}: {:.4} bits, first {:x?}",
            v.name(),
            shannon_entropy(&seq)?,
            &seq[..3]
        );
    }
    Ok(())
}
