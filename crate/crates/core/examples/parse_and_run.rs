//! Parse a small program, run it, and watch the encrypted memory.

use cipherlab::interp::{run, Inputs, RunConfig};
use cipherlab::memenc::{EncryptionModel, Monitor};
use cipherlab::mir::parse_program;

const SRC: &str = "\
.entry main
.secret 0x10000000, 8
.output 0x40010000, 8
.heap 0x10000000, 8

func main {
    .slot 0, 0, 8
entry:
    mov g1, 0x10000000
    load g2, [g1]
    store [sp], g2
    load g3, [sp]
    add g3, g3, 1
    mov g4, 0x40010000
    store [g4], g3
    halt
}
";

fn main() -> cipherlab::Result<()> {
    let p = parse_program(SRC)?;
    let inputs = Inputs::default().with_memory(0x1000_0000, 41u64.to_le_bytes().to_vec());
    let rc = RunConfig::default();

    let mut mon = Monitor::new(EncryptionModel::new(0x5eed));
    let out = run(&p, &inputs, &rc, Some(&mut mon))?;
    println!("steps {} cost {}", out.state.step, out.cost);
    for (addr, byte) in out.trace.output_bytes().iter().take(1) {
        println!("output[{addr:#x}] = {byte}");
    }
    // The attacker sees only ciphertexts of written blocks.
    for r in mon.trace.records.iter().filter(|r| r.step > 0) {
        println!(
            "step {:3} block {:#x} ct {}",
            r.step,
            r.addr,
            hex::encode(r.ct)
        );
    }
    Ok(())
}
