//! Heap nonce indexing, collision expansion and the +3 nonce step.

use cipherlab::interp::Memory;
use cipherlab::layout::Layout;
use cipherlab::noncebuf::{heap_nonce_index, next_nonce, HeapNonceStore, NonceMode};

fn main() -> cipherlab::Result<()> {
    for addr in [0x0u64, 0x8, 0x10, 0x1000_0000, 0x1000_0008] {
        println!("heap_nonce_index({addr:#x}) = {}", heap_nonce_index(addr));
    }
    let n = 0b0111u64;
    println!(
        "next_nonce({n:#b}) = {:#b}, {} bits flipped",
        next_nonce(n),
        (n ^ next_nonce(n)).count_ones()
    );

    let layout = Layout::default();
    let store = HeapNonceStore::new(&layout, NonceMode::Expanded);
    let mut mem = Memory::new(&layout);
    let a = 0x1000_0000;
    let b = a + (1 << 20); // same low 20 bits, same index
    println!("index a {} b {}", heap_nonce_index(a), heap_nonce_index(b));
    let na = store.resolve(&mut mem, a)?;
    let nb = store.resolve(&mut mem, b)?;
    println!("nonce cells a {na:#x} b {nb:#x} (distinct groups)");
    Ok(())
}
