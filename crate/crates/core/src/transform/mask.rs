//! Store/load masking: every protected cell holds `value ^ nonce`, and its
//! nonce is refreshed on each store so equal plaintexts stop producing equal
//! ciphertexts.

use std::collections::{BTreeMap, BTreeSet};

use super::{
    alu, cells_of, evict_lanes, imm, init_at_entry, install_init, live_after, pick_scratch,
    regions_of, stack_cell, wrap_spills, CellRef, Emit, Ids, MacroKind, MacroRecord, MaskVariant,
    MitigationMap, Role, SpillSlots, TransformConfig, INIT_FUNCTION,
};
use crate::error::TransformError;
use crate::layout::Layout;
use crate::mir::{AluOp::*, Base, Block, Cond, Instruction, MemOperand, Op, Operand, Program, Reg};
use crate::noncebuf::{NonceMode, EXPANDED_ENTRY, EXPANDED_GROUPS, HEAP_HASH_MULTIPLIER};
use crate::taint::SensitiveSiteSet;

/// Which accesses the pass rewrites.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaskScope {
    pub stack: bool,
    pub heap: bool,
}

impl MaskScope {
    pub const ALL: MaskScope = MaskScope {
        stack: true,
        heap: true,
    };
}

/// Byte mask of a `width`-byte access.
fn low_mask(width: u8) -> u64 {
    crate::interp::memory::mask(width)
}

#[derive(Clone, Copy)]
enum Loc {
    Stack { cell: u64, within: u64, nonce: u64 },
    Heap { base: Reg, offset: i64 },
}

pub fn mask_rewrite(
    p: &Program,
    sites: &SensitiveSiteSet,
    variant: MaskVariant,
    scope: MaskScope,
    cfg: &TransformConfig,
) -> Result<(Program, MitigationMap), TransformError> {
    let mut out = p.clone();
    evict_lanes(&mut out, &variant.reserved_lanes())?;
    let mut ids = Ids::for_program(&out);
    let mut map = MitigationMap {
        variant: Some(variant),
        nonce_mode: cfg.nonce_mode,
        original_max_site: p.max_site(),
        ..Default::default()
    };
    let mut ctx = Ctx {
        variant,
        layout: &cfg.layout,
        mode: cfg.nonce_mode,
    };
    let mut heap_used = false;
    for fi in 0..out.functions.len() {
        if out.functions[fi].name == INIT_FUNCTION {
            continue;
        }
        let name = out.functions[fi].name.clone();
        let cells: BTreeSet<u64> = if scope.stack {
            let f = &out.functions[fi];
            sites
                .slots_of(&name)
                .iter()
                .filter_map(|id| f.slots.iter().find(|s| s.id == *id))
                .flat_map(|s| ((s.offset & !7)..s.end()).step_by(8))
                .collect()
        } else {
            BTreeSet::new()
        };
        let heap_sites = if scope.heap {
            sites.heap_sites.clone()
        } else {
            BTreeSet::new()
        };
        if cells.is_empty() && heap_sites.is_empty() {
            continue;
        }
        heap_used |= rewrite_function(
            &mut out.functions[fi],
            &cells,
            &heap_sites,
            &mut ctx,
            &mut ids,
            &mut map,
        )?;
    }
    if !map.macros.is_empty() {
        install_init(&mut out, &cfg.layout, Some(variant), &mut ids);
        map.init_function = Some(INIT_FUNCTION.into());
        map.clobbered.extend(variant.reserved_lanes());
    }
    if heap_used {
        map.masked_heap = regions_of(&cells_of(&sites.heap));
    }
    Ok((out, map))
}

struct Ctx<'a> {
    variant: MaskVariant,
    layout: &'a Layout,
    mode: NonceMode,
}

fn rewrite_function(
    f: &mut crate::mir::Function,
    cells: &BTreeSet<u64>,
    heap_sites: &BTreeSet<u32>,
    ctx: &mut Ctx<'_>,
    ids: &mut Ids,
    map: &mut MitigationMap,
) -> Result<bool, TransformError> {
    let lv = live_after(f);
    let blocks = std::mem::take(&mut f.blocks);
    let mut spills = SpillSlots::default();
    let mut nonces: BTreeMap<u64, u64> = BTreeMap::new();
    let mut heap_used = false;
    let mut new_blocks = Vec::with_capacity(blocks.len());
    for (b, block) in blocks.iter().enumerate() {
        let mut instrs = Vec::with_capacity(block.instrs.len());
        for (k, ins) in block.instrs.iter().enumerate() {
            let Some(mem) = (match &ins.op {
                Op::Load { mem, .. } | Op::Store { mem, .. } => Some(*mem),
                _ => None,
            }) else {
                instrs.push(ins.clone());
                continue;
            };
            let loc = match (stack_cell(&mem), mem.base) {
                (Some((cell, within)), _) if cells.contains(&cell) => {
                    if within + mem.width as u64 > 8 {
                        return Err(TransformError::Straddle(ins.site));
                    }
                    let nonce = *nonces.entry(cell).or_insert_with(|| f.add_slot(8).offset);
                    Loc::Stack {
                        cell,
                        within,
                        nonce,
                    }
                }
                (_, Base::Reg(base)) if heap_sites.contains(&ins.site) => {
                    heap_used = true;
                    Loc::Heap {
                        base,
                        offset: mem.offset,
                    }
                }
                _ => {
                    instrs.push(ins.clone());
                    continue;
                }
            };
            let (rec, clobbered) = emit_macro(
                f,
                ins,
                mem.width,
                loc,
                lv[b][k],
                ctx,
                ids,
                &mut spills,
                &mut instrs,
            );
            map.clobbered.extend(clobbered);
            map.macros.push(rec);
        }
        new_blocks.push(Block {
            label: block.label.clone(),
            instrs,
        });
    }
    f.blocks = new_blocks;
    let nonce_ids: BTreeSet<u32> = nonces
        .values()
        .filter_map(|o| f.slot_at(*o).map(|s| s.id))
        .collect();
    let prologue: Vec<Op> = nonces
        .values()
        .map(|&n| Op::Store {
            mem: MemOperand::sp(n as i64),
            src: imm(0),
        })
        .collect();
    init_at_entry(f, ids, prologue);
    let art = map.artifact_slots.entry(f.name.clone()).or_default();
    art.extend(nonce_ids);
    art.extend(spills.new_slots.iter().copied());
    if !nonces.is_empty() {
        map.nonce_slots
            .entry(f.name.clone())
            .or_default()
            .extend(nonces);
    }
    Ok(heap_used)
}

#[allow(clippy::too_many_arguments)]
fn emit_macro(
    f: &mut crate::mir::Function,
    ins: &Instruction,
    width: u8,
    loc: Loc,
    live: crate::mir::RegSet,
    ctx: &Ctx<'_>,
    ids: &mut Ids,
    spills: &mut SpillSlots,
    out: &mut Vec<Instruction>,
) -> (MacroRecord, Vec<Reg>) {
    let is_store = matches!(ins.op, Op::Store { .. });
    let heap = matches!(loc, Loc::Heap { .. });
    let narrow = width < 8;
    let expanded = heap && ctx.mode == NonceMode::Expanded;
    // F V M [T] | A N [SH K] [R]
    let mut n = 3 + is_store as usize;
    if heap {
        n += 2 + narrow as usize * (1 + is_store as usize) + expanded as usize;
        if expanded && !is_store {
            n += 1;
        }
    }
    let plan = pick_scratch(live, &ins.op, n, f, spills);
    let mut regs = plan.regs.iter().copied();
    let fr = regs.next().unwrap();
    let v = regs.next().unwrap();
    let m = regs.next().unwrap();
    let t = if is_store || expanded {
        regs.next()
    } else {
        None
    };
    let (a, nreg) = if heap {
        (regs.next(), regs.next())
    } else {
        (None, None)
    };
    let sh = if heap && narrow { regs.next() } else { None };
    let k = if heap && narrow && is_store {
        regs.next()
    } else {
        None
    };
    let r = if expanded { regs.next() } else { None };

    let mut inner_ids = Ids::clone(ids);
    let mut e = Emit::new(&mut inner_ids);
    let (cell_mem, nonce_mem) = match loc {
        Loc::Stack { cell, nonce, .. } => {
            (MemOperand::sp(cell as i64), MemOperand::sp(nonce as i64))
        }
        Loc::Heap { base, offset } => {
            let (a, nreg) = (a.unwrap(), nreg.unwrap());
            e.push(Role::SaveFlags, Op::SaveFlags { dst: fr });
            e.push(Role::Address, alu(Add, a, base, imm(offset as u64)));
            if let Some(sh) = sh {
                e.push(Role::Address, alu(And, sh, a, imm(7)));
                e.push(Role::Address, alu(Shl, sh, sh, imm(3)));
            }
            e.push(Role::Address, alu(And, a, a, imm(!7)));
            let nb = ctx.layout.heap_nonce_base();
            match r {
                None => {
                    e.push(Role::Hash, alu(And, nreg, a, imm(0xF_FFFF)));
                    e.push(Role::Hash, alu(Mul, nreg, nreg, imm(HEAP_HASH_MULTIPLIER)));
                    e.push(Role::Hash, alu(Shr, nreg, nreg, imm(22)));
                    e.push(Role::Hash, alu(Shl, nreg, nreg, imm(3)));
                    e.push(Role::Hash, alu(Add, nreg, nreg, imm(nb)));
                }
                Some(row) => {
                    // Branch-free scan of the index row: N = matching
                    // entry, E = first empty one.
                    let (p, em, tg) = (v, m, t.unwrap());
                    e.push(Role::Hash, alu(And, row, a, imm(0xF_FFFF)));
                    e.push(Role::Hash, alu(Mul, row, row, imm(HEAP_HASH_MULTIPLIER)));
                    e.push(Role::Hash, alu(Shr, row, row, imm(22)));
                    e.push(
                        Role::Hash,
                        alu(Mul, row, row, imm(EXPANDED_GROUPS * EXPANDED_ENTRY)),
                    );
                    e.push(Role::Hash, alu(Add, row, row, imm(nb)));
                    e.push(
                        Role::Hash,
                        Op::Mov {
                            dst: nreg,
                            src: imm(0),
                        },
                    );
                    e.push(
                        Role::Hash,
                        Op::Mov {
                            dst: em,
                            src: imm(0),
                        },
                    );
                    for g in 0..EXPANDED_GROUPS {
                        let off = g * EXPANDED_ENTRY;
                        e.push(
                            Role::Hash,
                            Op::Load {
                                dst: tg,
                                mem: MemOperand::reg(row, off as i64),
                            },
                        );
                        e.push(Role::Hash, alu(Add, p, row, imm(off + 8)));
                        e.push(
                            Role::Hash,
                            Op::Cmp {
                                a: tg.into(),
                                b: a.into(),
                            },
                        );
                        e.push(
                            Role::Hash,
                            Op::Select {
                                dst: nreg,
                                cond: Cond::Eq,
                                a: p.into(),
                                b: nreg.into(),
                            },
                        );
                        e.push(
                            Role::Hash,
                            Op::Cmp {
                                a: tg.into(),
                                b: imm(0),
                            },
                        );
                        e.push(
                            Role::Hash,
                            Op::Select {
                                dst: p,
                                cond: Cond::Eq,
                                a: p.into(),
                                b: imm(0),
                            },
                        );
                        e.push(
                            Role::Hash,
                            Op::Test {
                                a: em.into(),
                                b: em.into(),
                            },
                        );
                        e.push(
                            Role::Hash,
                            Op::Select {
                                dst: em,
                                cond: Cond::Eq,
                                a: p.into(),
                                b: em.into(),
                            },
                        );
                    }
                    e.push(
                        Role::Hash,
                        Op::Test {
                            a: nreg.into(),
                            b: nreg.into(),
                        },
                    );
                    e.push(
                        Role::Hash,
                        Op::Select {
                            dst: nreg,
                            cond: Cond::Eq,
                            a: em.into(),
                            b: nreg.into(),
                        },
                    );
                    if is_store {
                        e.push(
                            Role::Hash,
                            Op::Store {
                                mem: MemOperand::reg(nreg, -8),
                                src: a.into(),
                            },
                        );
                    }
                }
            }
            e.push(Role::RestoreFlags, Op::RestoreFlags { src: fr });
            (MemOperand::reg(a, 0), MemOperand::reg(nreg, 0))
        }
    };
    let shift = match (loc, sh) {
        (Loc::Stack { within, .. }, _) => Operand::Imm(8 * within),
        (_, Some(sh)) => sh.into(),
        _ => Operand::Imm(0),
    };
    let lm = low_mask(width);

    let load_cell = Op::Load {
        dst: v,
        mem: cell_mem,
    };
    if is_store {
        e.push(Role::LoadCell, load_cell);
    } else {
        e.push_with(Role::LoadCell, ins.site, load_cell);
    }
    e.push(
        Role::LoadNonce,
        Op::Load {
            dst: m,
            mem: nonce_mem,
        },
    );
    e.push(Role::SaveFlags, Op::SaveFlags { dst: fr });
    e.push(Role::Decode, alu(Xor, v, v, m));
    match &ins.op {
        Op::Load { dst, .. } => {
            if narrow {
                if shift != Operand::Imm(0) {
                    e.push(Role::Extract, alu(Shr, v, v, shift));
                }
                e.push(Role::Extract, alu(And, v, v, imm(lm)));
            }
            e.push(Role::RestoreFlags, Op::RestoreFlags { src: fr });
            e.push(
                Role::Original,
                Op::Mov {
                    dst: *dst,
                    src: v.into(),
                },
            );
        }
        Op::Store { src, .. } => {
            let t = t.unwrap();
            e.push(Role::RestoreFlags, Op::RestoreFlags { src: fr });
            if !narrow {
                e.push(Role::Original, Op::Mov { dst: v, src: *src });
            }
            e.push(Role::SaveFlags, Op::SaveFlags { dst: fr });
            if narrow {
                match (shift, k) {
                    (Operand::Imm(s), _) => {
                        e.push(Role::Original, alu(And, v, v, imm(!(lm << s))));
                    }
                    (sh, Some(k)) => {
                        e.push(
                            Role::Original,
                            Op::Mov {
                                dst: k,
                                src: imm(lm),
                            },
                        );
                        e.push(Role::Original, alu(Shl, k, k, sh));
                        e.push(Role::Original, alu(Xor, k, k, imm(u64::MAX)));
                        e.push(Role::Original, alu(And, v, v, k));
                    }
                    _ => unreachable!(),
                }
                e.push(Role::Original, Op::Mov { dst: t, src: *src });
                e.push(Role::Original, alu(And, t, t, imm(lm)));
                if shift != Operand::Imm(0) {
                    e.push(Role::Original, alu(Shl, t, t, shift));
                }
                e.push(Role::Original, alu(Or, v, v, t));
            }
            emit_update(&mut e, ctx, m, t, loc, a);
            e.push(Role::Encode, alu(Xor, v, v, m));
            e.push(Role::RestoreFlags, Op::RestoreFlags { src: fr });
            e.push(
                Role::StoreNonce,
                Op::Store {
                    mem: nonce_mem,
                    src: m.into(),
                },
            );
            e.push_with(
                Role::StoreCell,
                ins.site,
                Op::Store {
                    mem: cell_mem,
                    src: v.into(),
                },
            );
        }
        _ => unreachable!(),
    }
    let (inner, roles) = (std::mem::take(&mut e.out), std::mem::take(&mut e.roles));
    drop(e);
    *ids = inner_ids;
    let mut wrapped = Emit::new(ids);
    wrap_spills(&plan, &mut wrapped, inner, roles);
    out.extend(wrapped.out);
    let (cell, nonce) = match loc {
        Loc::Stack { cell, nonce, .. } => (
            CellRef::Stack { offset: cell },
            CellRef::Stack { offset: nonce },
        ),
        Loc::Heap { .. } => (CellRef::Heap, CellRef::Heap),
    };
    let clobbered = plan
        .regs
        .iter()
        .copied()
        .filter(|r| plan.spilled.iter().all(|(s, _)| s != r))
        .collect();
    let rec = MacroRecord {
        site: ins.site,
        func: f.name.clone(),
        kind: if is_store {
            MacroKind::MaskStore
        } else {
            MacroKind::MaskLoad
        },
        variant: Some(ctx.variant),
        cell,
        nonce,
        width,
        scratch: plan.regs.clone(),
        instrs: wrapped.roles,
    };
    (rec, clobbered)
}

/// Nonce refresh, emitted inside a flags window.
fn emit_update(e: &mut Emit<'_>, ctx: &Ctx<'_>, m: Reg, t: Reg, loc: Loc, a: Option<Reg>) {
    match ctx.variant {
        MaskVariant::Rdrand => {
            // First store to a cell draws from the random table, later ones
            // step the nonce.
            match loc {
                Loc::Stack { cell, .. } => {
                    e.push(Role::Update, alu(Add, t, Operand::Sp, imm(cell)));
                    e.push(Role::Update, alu(And, t, t, imm(0x3FF)));
                }
                Loc::Heap { .. } => {
                    e.push(Role::Update, alu(And, t, a.unwrap(), imm(0x3FF)));
                }
            }
            e.push(Role::Update, alu(Shl, t, t, imm(3)));
            e.push(
                Role::Update,
                alu(Add, t, t, imm(ctx.layout.random_nonce_base())),
            );
            e.push(
                Role::Update,
                Op::Load {
                    dst: t,
                    mem: MemOperand::reg(t, 0),
                },
            );
            e.push(
                Role::Update,
                Op::Test {
                    a: m.into(),
                    b: m.into(),
                },
            );
            e.push(
                Role::Update,
                Op::Select {
                    dst: m,
                    cond: Cond::Eq,
                    a: t.into(),
                    b: m.into(),
                },
            );
            e.push(Role::Update, alu(Add, m, m, imm(3)));
        }
        MaskVariant::Aes => {
            let (st, key) = (Reg::lane(14, false), Reg::lane(15, false));
            e.push(Role::Update, Op::PrfEnc { dst: st, key });
            e.push(
                Role::Update,
                Op::Mov {
                    dst: m,
                    src: st.into(),
                },
            );
        }
        MaskVariant::Xs => {
            let (s0, s1) = (Reg::lane(13, false), Reg::lane(13, true));
            let (x, y, z) = (
                Reg::lane(14, false),
                Reg::lane(14, true),
                Reg::lane(15, false),
            );
            for op in [
                Op::Mov {
                    dst: x,
                    src: s0.into(),
                },
                Op::Mov {
                    dst: y,
                    src: s1.into(),
                },
                Op::Mov {
                    dst: s0,
                    src: y.into(),
                },
                alu(Shl, z, x, imm(23)),
                alu(Xor, x, x, z),
                alu(Shr, z, x, imm(17)),
                alu(Xor, x, x, z),
                alu(Xor, x, x, y),
                alu(Shr, z, y, imm(26)),
                alu(Xor, s1, x, z),
                alu(Add, m, s1, y),
            ] {
                e.push(Role::Update, op);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::{Fixture, FixtureKind};
    use crate::interp::{run, Inputs, RunConfig};
    use crate::mir::{check_fresh_ids, parse_program, validate};
    use crate::taint::run_tainted;

    fn masked(
        p: &Program,
        inputs: &Inputs,
        v: MaskVariant,
        mode: NonceMode,
    ) -> (Program, MitigationMap) {
        let sites = run_tainted(p, inputs, &RunConfig::default()).unwrap();
        let cfg = TransformConfig {
            nonce_mode: mode,
            ..Default::default()
        };
        let (q, map) = mask_rewrite(p, &sites, v, MaskScope::ALL, &cfg).unwrap();
        assert!(validate(&q).is_empty(), "{:?}", validate(&q));
        assert!(check_fresh_ids(p, &q).is_empty());
        (q, map)
    }

    fn same_outputs(p: &Program, q: &Program, inputs: &Inputs) {
        let a = run(p, inputs, &RunConfig::default(), None).unwrap();
        let b = run(q, inputs, &RunConfig::default(), None).unwrap();
        assert_eq!(a.trace, b.trace);
    }

    #[test]
    fn micro_store_macro_has_the_reference_shape() {
        let fx = Fixture::build(FixtureKind::MaskMicro);
        let (inputs, _) = fx.instance(1);
        for v in MaskVariant::ALL {
            let (q, map) = masked(&fx.program, &inputs, v, NonceMode::Normal);
            let rec = map.macro_for(2).expect("site 2 is masked");
            assert_eq!(rec.kind, MacroKind::MaskStore);
            let count = |r| rec.ids(r).len();
            assert_eq!(count(Role::LoadNonce), 1);
            assert_eq!(count(Role::SaveFlags), 2);
            assert_eq!(count(Role::RestoreFlags), 2);
            assert_eq!(count(Role::Decode) + count(Role::Encode), 2);
            assert_eq!(count(Role::StoreNonce), 1);
            assert_eq!(rec.ids(Role::StoreCell), vec![2]);
            let expect_update = match v {
                MaskVariant::Rdrand => 8,
                MaskVariant::Aes => 2,
                MaskVariant::Xs => 11,
            };
            assert_eq!(count(Role::Update), expect_update);
            same_outputs(&fx.program, &q, &inputs);
        }
    }

    const NARROW: &str = "
.entry main
.secret 0x10000000, 8
.output 0x40010000, 64
.heap 0x10000000, 16, 0x11, 0x22, 0x33, 0x44, 0x55, 0x66, 0x77, 0x88
func main {
.slot 0, 0, 8
.slot 1, 8, 8
e:
  mov g1, 0x10000000
  load g2, [g1+3]:1
  store [sp+0], g2
  store [sp+5]:2, g2
  store [g1+9]:1, g2
  store [g1+6]:2, 0xbeef
  load g3, [sp+4]:4
  load g4, [g1+8]
  load g5, [g1+4]:4
  mov g6, 0x40010000
  store [g6], g3
  store [g6+8], g4
  store [g6+16], g5
  load g7, [sp]
  cmp g7, 0x44
  br_cond eq, yes, no
yes:
  store [g6+24], 1
  halt
no:
  store [g6+24], 2
  halt
}
";

    #[test]
    fn narrow_heap_and_stack_accesses_round_trip() {
        let p = parse_program(NARROW).unwrap();
        for mode in [NonceMode::Normal, NonceMode::Expanded] {
            for v in MaskVariant::ALL {
                let (q, map) = masked(&p, &Inputs::default(), v, mode);
                assert!(map.macros.iter().any(|m| m.cell == CellRef::Heap));
                assert!(map
                    .macros
                    .iter()
                    .any(|m| matches!(m.cell, CellRef::Stack { .. })));
                same_outputs(&p, &q, &Inputs::default());
            }
        }
    }

    #[test]
    fn masked_cells_never_hold_plaintext() {
        let fx = Fixture::build(FixtureKind::MaskMicro);
        let (inputs, _) = fx.instance(3);
        let (q, _) = masked(&fx.program, &inputs, MaskVariant::Rdrand, NonceMode::Normal);
        let a = run(&fx.program, &inputs, &RunConfig::default(), None).unwrap();
        let b = run(&q, &inputs, &RunConfig::default(), None).unwrap();
        let sp = fx.program.entry_frame_base(&Layout::default()).unwrap();
        let sq = q.entry_frame_base(&Layout::default()).unwrap();
        let plain = a.state.memory.read(sp, 8);
        assert_ne!(b.state.memory.read(sq, 8), plain);
    }

    #[test]
    fn loop_entry_gets_a_fresh_prologue_block() {
        let src = "
.secret 0x10000000, 8
.heap 0x10000000, 8, 7
func main {
.slot 0, 0, 8
top:
  mov g1, 0x10000000
  load g2, [g1]
  store [sp], g2
  halt
}";
        let p = parse_program(src).unwrap();
        let (q, _) = masked(&p, &Inputs::default(), MaskVariant::Aes, NonceMode::Normal);
        let f = q.function("main").unwrap();
        assert!(matches!(f.blocks[0].instrs[0].op, Op::Call { .. }));
    }

    #[test]
    fn spills_when_registers_run_out() {
        let mut src = String::from(".secret 0x10000000, 8\n.heap 0x10000000, 8, 9\n.output 0x40010000, 256\nfunc main {\n.slot 0, 0, 8\ne:\n  mov g0, 0x10000000\n  load g15, [g0]\n");
        for r in 1..15 {
            src.push_str(&format!("  mov g{r}, {r}\n"));
        }
        src.push_str("  store [sp], g15\n  mov g0, 0x40010000\n");
        for r in 1..16 {
            src.push_str(&format!("  store [g0+{}], g{r}\n", 8 * r));
        }
        src.push_str("  load g1, [sp]\n  store [g0], g1\n  halt\n}\n");
        let p = parse_program(&src).unwrap();
        let (q, map) = masked(
            &p,
            &Inputs::default(),
            MaskVariant::Rdrand,
            NonceMode::Normal,
        );
        assert!(map.macros.iter().any(|m| !m.ids(Role::Spill).is_empty()));
        same_outputs(&p, &q, &Inputs::default());
    }
}
