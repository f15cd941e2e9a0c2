//! The masking macro around one sensitive store, in each nonce variant.

use cipherlab::fixtures::{Fixture, FixtureKind};
use cipherlab::interp::{run, RunConfig};
use cipherlab::mir::print_program;
use cipherlab::taint::run_tainted;
use cipherlab::transform::{mitigate, MaskVariant, Strategy, TransformConfig};

fn main() -> cipherlab::Result<()> {
    let fx = Fixture::build(FixtureKind::MaskMicro);
    let rc = RunConfig::default();
    let (inputs, _) = fx.instance(1);
    let sites = run_tainted(&fx.program, &inputs, &rc)?;
    let base = run(&fx.program, &inputs, &rc, None)?.cost;

    for v in MaskVariant::ALL {
        let m = mitigate(
            &fx.program,
            &sites,
            Strategy::Mask,
            v,
            &TransformConfig::default(),
        )?;
        let cost = run(&m.program, &inputs, &rc, None)?.cost;
        println!(
            "== {} (cost factor {:.2})",
            v.name(),
            cost as f64 / base as f64
        );
        let text = print_program(&m.program);
        let main = text.split("func main").nth(1).unwrap_or(&text);
        println!("func main{main}");
        for mac in &m.map.macros {
            println!(
                "macro at site {}: {:?}, {} instructions",
                mac.site,
                mac.kind,
                mac.instrs.len()
            );
        }
    }
    Ok(())
}
