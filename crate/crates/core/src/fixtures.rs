//! Built-in MIR fixtures and their ground truth.

use std::fmt::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::interp::Inputs;
use crate::layout::Layout;
use crate::mir::{parse_program, Program, SiteId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FixtureKind {
    LadderBitscan,
    CtSwap,
    StackHot,
    MaskMicro,
}

impl FixtureKind {
    pub const ALL: [FixtureKind; 4] = [
        FixtureKind::LadderBitscan,
        FixtureKind::CtSwap,
        FixtureKind::StackHot,
        FixtureKind::MaskMicro,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FixtureKind::LadderBitscan => "ladder-bitscan",
            FixtureKind::CtSwap => "ct-swap",
            FixtureKind::StackHot => "stack-hot",
            FixtureKind::MaskMicro => "mask-micro",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        let s = s.trim_end_matches(".mir");
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

/// Scorer-only data for one fixture instance.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub fixture: String,
    pub seed: u64,
    /// Secret bytes, hex.
    pub secret: String,
    /// Ladder: key bits in processing order.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub bits: Vec<u8>,
    /// Swap: decision bit of every iteration.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub decisions: Vec<u8>,
}

/// Sites and addresses the attack harness needs to know about.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Landmarks {
    /// Stores to the ladder's `pbit` slot, in program order.
    pub pbit_stores: Vec<SiteId>,
    /// The `pbit = kbit` store whose value is the recovered bit.
    pub pbit_bit_store: Option<SiteId>,
    /// Slot offset of `pbit` and `kbit` in the entry frame.
    pub pbit_offset: u64,
    pub kbit_offset: u64,
    /// Swap: the per-iteration decision load.
    pub decision_load: Option<SiteId>,
    /// Swap: base addresses and byte length of the two big numbers.
    pub operands: Vec<(u64, u64)>,
}

#[derive(Debug, Clone)]
pub struct Fixture {
    pub kind: FixtureKind,
    pub program: Program,
    pub landmarks: Landmarks,
    /// Address and length of the secret input.
    pub secret: (u64, u64),
    params: Params,
}

#[derive(Debug, Clone, Copy)]
enum Params {
    Ladder { bits: u64 },
    Swap { limbs: u64, a: u64, b: u64 },
    StackHot,
    Micro,
}

fn output_base(layout: &Layout) -> u64 {
    layout.user_base()
}

fn site_of(p: &Program, pred: impl Fn(&str) -> bool) -> Vec<SiteId> {
    // Sites in textual order whose printed form satisfies `pred`.
    p.functions
        .iter()
        .flat_map(|f| f.instructions())
        .filter(|i| pred(&crate::mir::op_text(&i.op)))
        .map(|i| i.site)
        .collect()
}

impl Fixture {
    pub fn build(kind: FixtureKind) -> Self {
        match kind {
            FixtureKind::LadderBitscan => ladder(512),
            FixtureKind::CtSwap => ct_swap(512, 64, 0),
            FixtureKind::StackHot => stack_hot(583),
            FixtureKind::MaskMicro => mask_micro(),
        }
    }

    pub fn all() -> Vec<Fixture> {
        FixtureKind::ALL.into_iter().map(Fixture::build).collect()
    }

    pub fn name(&self) -> &'static str {
        self.kind.name()
    }

    /// Random secret input plus its ground truth.
    pub fn instance(&self, seed: u64) -> (Inputs, GroundTruth) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (addr, len) = self.secret;
        let mut secret = vec![0u8; len as usize];
        match self.params {
            Params::Swap { .. } => {
                for b in secret.iter_mut() {
                    *b = rng.gen_range(0..2);
                }
            }
            _ => rng.fill(&mut secret[..]),
        }
        let mut truth = GroundTruth {
            fixture: self.name().into(),
            seed,
            secret: hex::encode(&secret),
            ..Default::default()
        };
        let mut inputs = Inputs::default().with_memory(addr, secret.clone());
        match self.params {
            Params::Ladder { bits } => {
                truth.bits = (0..bits)
                    .rev()
                    .map(|i| (secret[(i / 8) as usize] >> (i % 8)) & 1)
                    .collect();
            }
            Params::Swap { limbs, a, b, .. } => {
                truth.decisions = secret.clone();
                // Public operand values; distinct limbs so every swap is visible.
                let mut words = |base: u64| {
                    let bytes: Vec<u8> = (0..limbs)
                        .flat_map(|_| (rng.gen::<u64>() | 1).to_le_bytes())
                        .collect();
                    (base, bytes)
                };
                let (av, bv) = (words(a), words(b));
                inputs.memory.push(av);
                inputs.memory.push(bv);
            }
            _ => {}
        }
        (inputs, truth)
    }
}

/// Bit-scanning ladder: one loop iteration per key bit, `pbit` carrying the
/// previous bit and a mask-based conditional swap of two accumulators.
pub fn ladder(bits: u64) -> Fixture {
    let layout = Layout::default();
    let key = layout.heap_base;
    let out = output_base(&layout);
    let key_len = bits.div_ceil(8);
    let mut s = String::new();
    writeln!(s, ".entry main").unwrap();
    writeln!(s, ".secret {key:#x}, {key_len}").unwrap();
    writeln!(s, ".heap {key:#x}, {key_len}").unwrap();
    writeln!(s, ".output {out:#x}, {bits}").unwrap();
    write!(
        s,
        "
func main {{
    .slot 0, 0, 8      ; pbit
    .slot 1, 16, 8     ; kbit
    .slot 2, 32, 8     ; i
    .slot 3, 48, 8     ; r0
    .slot 4, 56, 8     ; r1
entry:
    store [sp], 0
    store [sp+48], 3
    store [sp+56], 5
    store [sp+32], {last}
loop:
    load g1, [sp+32]
    shr g2, g1, 3
    mov g3, {key:#x}
    add g3, g3, g2
    load g4, [g3]:1
    and g5, g1, 7
    shr g4, g4, g5
    and g4, g4, 1
    store [sp+16], g4
    load g6, [sp]
    xor g6, g6, g4
    store [sp], g6
    load g7, [sp+48]
    load g8, [sp+56]
    sub g9, 0, g6
    xor g10, g7, g8
    and g10, g10, g9
    xor g7, g7, g10
    xor g8, g8, g10
    add g7, g7, g8
    add g8, g8, g8
    store [sp+48], g7
    store [sp+56], g8
    load g11, [sp+16]
    store [sp], g11
    mov g12, {out:#x}
    sub g13, {last}, g1
    add g12, g12, g13
    store [g12]:1, g11
    sub g1, g1, 1
    store [sp+32], g1
    cmp g1, 0
    br_cond ge, loop, done
done:
    load g0, [sp+48]
    ret
}}
",
        last = bits - 1
    )
    .unwrap();
    let program = parse_program(&s).expect("ladder fixture parses");
    let pbit_stores = site_of(&program, |t| t.starts_with("store [sp],"));
    Fixture {
        kind: FixtureKind::LadderBitscan,
        landmarks: Landmarks {
            pbit_bit_store: pbit_stores.last().copied(),
            pbit_stores,
            pbit_offset: 0,
            kbit_offset: 16,
            ..Default::default()
        },
        program,
        secret: (key, key_len),
        params: Params::Ladder { bits },
    }
}

/// Constant-time conditional swap of two heap big numbers, once per secret
/// decision byte. `offset` shifts the operands inside the heap.
pub fn ct_swap(iterations: u64, limbs: u64, offset: u64) -> Fixture {
    let layout = Layout::default();
    let bytes = limbs * 8;
    let c = layout.heap_base + offset;
    let a = c + ((iterations + 15) & !15);
    let b = a + bytes;
    let out = output_base(&layout);
    let mut s = String::new();
    writeln!(s, ".entry main").unwrap();
    writeln!(s, ".secret {c:#x}, {iterations}").unwrap();
    writeln!(s, ".heap {c:#x}, {iterations}").unwrap();
    writeln!(s, ".heap {a:#x}, {bytes}").unwrap();
    writeln!(s, ".heap {b:#x}, {bytes}").unwrap();
    writeln!(s, ".output {out:#x}, {}", 2 * bytes).unwrap();
    write!(
        s,
        "
func main {{
    .slot 0, 0, 8      ; j
    .slot 1, 16, 8     ; mask
entry:
    store [sp], 0
outer:
    load g1, [sp]
    mov g2, {c:#x}
    add g2, g2, g1
    load g3, [g2]:1
    sub g4, 0, g3
    store [sp+16], g4
    mov g5, 0
inner:
    load g4, [sp+16]
    mov g6, {a:#x}
    add g6, g6, g5
    mov g7, {b:#x}
    add g7, g7, g5
    load g8, [g6]
    load g9, [g7]
    xor g10, g8, g9
    and g10, g10, g4
    xor g8, g8, g10
    xor g9, g9, g10
    store [g6], g8
    store [g7], g9
    add g5, g5, 8
    cmp g5, {bytes}
    br_cond b, inner, next
next:
    add g1, g1, 1
    store [sp], g1
    cmp g1, {iterations}
    br_cond b, outer, copy
copy:
    mov g5, 0
copy_loop:
    mov g6, {a:#x}
    add g6, g6, g5
    load g8, [g6]
    mov g7, {out:#x}
    add g7, g7, g5
    store [g7], g8
    mov g6, {b:#x}
    add g6, g6, g5
    load g9, [g6]
    add g7, g7, {bytes}
    store [g7], g9
    add g5, g5, 8
    cmp g5, {bytes}
    br_cond b, copy_loop, done
done:
    halt
}}
"
    )
    .unwrap();
    let program = parse_program(&s).expect("swap fixture parses");
    let decision_load = site_of(&program, |t| t.starts_with("load g3, [g2]:1"))
        .first()
        .copied();
    Fixture {
        kind: FixtureKind::CtSwap,
        landmarks: Landmarks {
            decision_load,
            operands: vec![(a, bytes), (b, bytes)],
            ..Default::default()
        },
        program,
        secret: (c, iterations),
        params: Params::Swap { limbs, a, b },
    }
}

/// Many sensitive stack slots in phases: the first phase keeps 20 slots live
/// at once, later phases 8 each, every phase iterating three times.
pub fn stack_hot(n: u32) -> Fixture {
    let layout = Layout::default();
    let key = layout.heap_base;
    let out = output_base(&layout);
    let mut phases: Vec<(u32, u32)> = Vec::new();
    let mut next = 0;
    while next < n {
        let size = if next == 0 {
            20.min(n)
        } else {
            8.min(n - next)
        };
        phases.push((next, size));
        next += size;
    }
    let mut s = String::new();
    writeln!(s, ".entry main").unwrap();
    writeln!(s, ".secret {key:#x}, 8").unwrap();
    writeln!(s, ".heap {key:#x}, 8").unwrap();
    writeln!(s, ".output {out:#x}, {}", 8 * phases.len()).unwrap();
    writeln!(s, "\nfunc main {{").unwrap();
    // Slot n is the loop counter; sensitive slots live at 8-byte offsets.
    for k in 0..n {
        writeln!(s, "    .slot {k}, {}, 8", 8 * k as u64).unwrap();
    }
    let ctr = 8 * n as u64;
    writeln!(s, "    .slot {n}, {ctr}, 8").unwrap();
    writeln!(s, "entry:\n    mov g1, {key:#x}\n    load g1, [g1]").unwrap();
    for (p, &(first, size)) in phases.iter().enumerate() {
        writeln!(s, "    ; phase {p}").unwrap();
        for k in first..first + size {
            writeln!(s, "    add g2, g1, {k}\n    store [sp+{}], g2", 8 * k).unwrap();
        }
        writeln!(s, "    store [sp+{ctr}], 3\nphase{p}:").unwrap();
        for k in first..first + size {
            let off = 8 * k;
            writeln!(s, "    load g2, [sp+{off}]\n    mul g2, g2, 3\n    add g2, g2, {k}\n    store [sp+{off}], g2").unwrap();
        }
        writeln!(
            s,
            "    load g3, [sp+{ctr}]\n    sub g3, g3, 1\n    store [sp+{ctr}], g3\n    br_cond ne, phase{p}, sum{p}\nsum{p}:\n    mov g4, 0"
        )
        .unwrap();
        for k in first..first + size {
            writeln!(s, "    load g2, [sp+{}]\n    xor g4, g4, g2", 8 * k).unwrap();
        }
        writeln!(
            s,
            "    mov g5, {:#x}\n    store [g5], g4",
            out + 8 * p as u64
        )
        .unwrap();
    }
    writeln!(s, "    halt\n}}").unwrap();
    let program = parse_program(&s).expect("stack-hot fixture parses");
    Fixture {
        kind: FixtureKind::StackHot,
        program,
        landmarks: Landmarks::default(),
        secret: (key, 8),
        params: Params::StackHot,
    }
}

/// A single sensitive stack store followed by a load.
pub fn mask_micro() -> Fixture {
    let layout = Layout::default();
    let key = layout.heap_base;
    let out = output_base(&layout);
    let src = format!(
        ".entry main
.secret {key:#x}, 8
.heap {key:#x}, 8
.output {out:#x}, 8

func main {{
    .slot 0, 0, 8
entry:
    mov g1, {key:#x}
    load g2, [g1]
    store [sp], g2
    load g3, [sp]
    mov g4, {out:#x}
    store [g4], g3
    halt
}}
"
    );
    let program = parse_program(&src).expect("micro fixture parses");
    Fixture {
        kind: FixtureKind::MaskMicro,
        program,
        landmarks: Landmarks {
            pbit_stores: vec![2],
            ..Default::default()
        },
        secret: (key, 8),
        params: Params::Micro,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::interp::{run, RunConfig};
    use crate::mir::{print_program, validate};

    #[test]
    fn fixtures_are_valid_and_round_trip() {
        for f in Fixture::all() {
            assert!(
                validate(&f.program).is_empty(),
                "{}: {:?}",
                f.name(),
                validate(&f.program)
            );
            let text = print_program(&f.program);
            assert_eq!(parse_program(&text).unwrap(), f.program, "{}", f.name());
        }
    }

    #[test]
    fn ladder_outputs_the_key_bits() {
        let f = ladder(512);
        let (inputs, truth) = f.instance(3);
        let o = run(&f.program, &inputs, &RunConfig::default(), None).unwrap();
        let out: Vec<u8> = o.trace.output_bytes().values().copied().collect();
        // Oracle: direct bit extraction from the key.
        let key = hex::decode(&truth.secret).unwrap();
        let direct: Vec<u8> = (0..512)
            .rev()
            .map(|i| (key[i / 8] >> (i % 8)) & 1)
            .collect();
        assert_eq!(out, direct);
        assert_eq!(truth.bits, direct);
        assert_eq!(f.landmarks.pbit_stores.len(), 3);
    }

    #[test]
    fn swap_outputs_follow_the_decisions() {
        let f = ct_swap(16, 4, 0);
        let (inputs, truth) = f.instance(5);
        let o = run(&f.program, &inputs, &RunConfig::default(), None).unwrap();
        let ones = truth.decisions.iter().filter(|&&d| d == 1).count();
        let a0 = inputs.memory[1].1.clone();
        let b0 = inputs.memory[2].1.clone();
        let bytes: Vec<u8> = o.trace.output_bytes().values().copied().collect();
        let (exp_a, exp_b) = if ones % 2 == 0 { (a0, b0) } else { (b0, a0) };
        assert_eq!(bytes[..32], exp_a[..]);
        assert_eq!(bytes[32..], exp_b[..]);
    }

    #[test]
    fn stack_hot_has_requested_slots() {
        let f = stack_hot(583);
        assert_eq!(f.program.functions[0].slots.len(), 584);
        let (inputs, _) = f.instance(1);
        run(&f.program, &inputs, &RunConfig::default(), None).unwrap();
    }
}
