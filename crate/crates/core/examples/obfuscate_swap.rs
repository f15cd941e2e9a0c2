//! Divert the constant-time swap's big numbers into the secure buffer.

use cipherlab::fixtures::{Fixture, FixtureKind};
use cipherlab::interp::{run, RunConfig};
use cipherlab::noncebuf::{diverts, heap_nonce_index, SecureBuffer};
use cipherlab::taint::run_tainted;
use cipherlab::transform::{mitigate, MaskVariant, Strategy, TransformConfig};

fn main() -> cipherlab::Result<()> {
    let fx = Fixture::build(FixtureKind::CtSwap);
    let rc = RunConfig::default();
    let (inputs, _) = fx.instance(4);
    let sites = run_tainted(&fx.program, &inputs, &rc)?;
    let m = mitigate(
        &fx.program,
        &sites,
        Strategy::Obfuscate,
        MaskVariant::Rdrand,
        &TransformConfig::default(),
    )?;

    let sb = SecureBuffer::new(&rc.layout);
    let (a, _) = fx.landmarks.operands[0];
    for cell in (a..a + 64).step_by(8) {
        println!(
            "cell {cell:#x} index {:6} truth in {}  buffer entry {:#x}",
            heap_nonce_index(cell),
            if diverts(cell) {
                "buffer  "
            } else {
                "original"
            },
            sb.entry(cell)
        );
    }
    let adapted = m.map.adapt_inputs(&inputs, &rc.layout);
    let x = run(&fx.program, &inputs, &rc, None)?;
    let y = run(&m.program, &adapted, &rc, None)?;
    println!(
        "outputs equal: {}",
        x.trace.output_bytes() == y.trace.output_bytes()
    );
    println!("cost factor {:.2}", y.cost as f64 / x.cost as f64);
    Ok(())
}
