//! Heap diversion: each protected cell's value lives either in place or in
//! the secure buffer depending on the parity of its hash index, and every
//! store also writes a fresh decoy to the other location.

use std::collections::BTreeSet;

use super::{
    alu, cells_of, divert_images, imm, install_init, live_after, pick_scratch, regions_of,
    wrap_spills, CellRef, Emit, Ids, MacroKind, MacroRecord, MitigationMap, Role, SpillSlots,
    TransformConfig, INIT_FUNCTION,
};
use crate::error::TransformError;
use crate::layout::Layout;
use crate::mir::{
    AluOp::*, Base, Block, Cond, Function, Instruction, MemOperand, Op, Program, Reg,
};
use crate::noncebuf::HEAP_HASH_MULTIPLIER;
use crate::taint::SensitiveSiteSet;

pub fn obfuscate_rewrite(
    p: &Program,
    sites: &SensitiveSiteSet,
    cfg: &TransformConfig,
) -> Result<(Program, MitigationMap), TransformError> {
    let mut out = p.clone();
    let mut ids = Ids::for_program(&out);
    let mut map = MitigationMap {
        original_max_site: p.max_site(),
        ..Default::default()
    };
    for f in &mut out.functions {
        if f.name == INIT_FUNCTION {
            continue;
        }
        rewrite_function(f, &sites.heap_sites, &cfg.layout, &mut ids, &mut map);
    }
    if !map.macros.is_empty() {
        let cells: BTreeSet<u64> = cells_of(&sites.heap);
        divert_images(&mut out, &cells, &cfg.layout);
        install_init(&mut out, &cfg.layout, None, &mut ids);
        map.init_function = Some(INIT_FUNCTION.into());
        map.obfuscated_heap = regions_of(&cells);
    }
    Ok((out, map))
}

fn rewrite_function(
    f: &mut Function,
    heap_sites: &BTreeSet<u32>,
    layout: &Layout,
    ids: &mut Ids,
    map: &mut MitigationMap,
) {
    let touched = f.instructions().any(|i| heap_sites.contains(&i.site));
    if !touched {
        return;
    }
    let lv = live_after(f);
    let blocks = std::mem::take(&mut f.blocks);
    let mut spills = SpillSlots::default();
    let mut new_blocks = Vec::with_capacity(blocks.len());
    for (b, block) in blocks.iter().enumerate() {
        let mut instrs = Vec::with_capacity(block.instrs.len());
        for (k, ins) in block.instrs.iter().enumerate() {
            let target = match &ins.op {
                Op::Load { mem, .. } | Op::Store { mem, .. } if heap_sites.contains(&ins.site) => {
                    match mem.base {
                        Base::Reg(r) => Some((r, *mem)),
                        Base::Sp => None,
                    }
                }
                _ => None,
            };
            let Some((base, mem)) = target else {
                instrs.push(ins.clone());
                continue;
            };
            let (rec, clobbered) = emit_macro(
                f,
                ins,
                base,
                mem,
                lv[b][k],
                layout,
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
    if !spills.new_slots.is_empty() {
        map.artifact_slots
            .entry(f.name.clone())
            .or_default()
            .extend(spills.new_slots.iter().copied());
    }
}

#[allow(clippy::too_many_arguments)]
fn emit_macro(
    f: &mut Function,
    ins: &Instruction,
    base: Reg,
    mem: MemOperand,
    live: crate::mir::RegSet,
    layout: &Layout,
    ids: &mut Ids,
    spills: &mut SpillSlots,
    out: &mut Vec<Instruction>,
) -> (MacroRecord, Vec<Reg>) {
    let is_store = matches!(ins.op, Op::Store { .. });
    let narrow = mem.width < 8;
    // F A I S T [D X] [SH]
    let n = 5 + 2 * is_store as usize + narrow as usize;
    let plan = pick_scratch(live, &ins.op, n, f, spills);
    let mut regs = plan.regs.iter().copied();
    let mut next = || regs.next().unwrap();
    let (fr, a, i, s, t) = (next(), next(), next(), next(), next());
    let (d, x) = if is_store {
        (Some(next()), Some(next()))
    } else {
        (None, None)
    };
    let sh = narrow.then(&mut next);

    let mut inner_ids = ids.clone();
    let mut e = Emit::new(&mut inner_ids);
    e.push(Role::SaveFlags, Op::SaveFlags { dst: fr });
    e.push(Role::Address, alu(Add, a, base, imm(mem.offset as u64)));
    if let Some(sh) = sh {
        e.push(Role::Address, alu(And, sh, a, imm(7)));
    }
    e.push(Role::Address, alu(And, a, a, imm(!7)));
    e.push(Role::Hash, alu(And, i, a, imm(0xF_FFFF)));
    e.push(Role::Hash, alu(Mul, i, i, imm(HEAP_HASH_MULTIPLIER)));
    e.push(Role::Hash, alu(Shr, i, i, imm(22)));
    e.push(Role::Hash, alu(Shl, s, i, imm(4)));
    e.push(Role::Hash, alu(Add, s, s, imm(layout.secure_buffer_base())));
    // Even index: truth in the buffer, decoy in place. Odd: the reverse.
    e.push(
        Role::Divert,
        Op::Test {
            a: i.into(),
            b: imm(1),
        },
    );
    e.push(
        Role::Divert,
        Op::Select {
            dst: t,
            cond: Cond::Eq,
            a: s.into(),
            b: a.into(),
        },
    );
    if let Some(d) = d {
        e.push(
            Role::Divert,
            Op::Select {
                dst: d,
                cond: Cond::Eq,
                a: a.into(),
                b: s.into(),
            },
        );
    }
    if let Some(sh) = sh {
        e.push(Role::Divert, alu(Add, t, t, sh));
    }
    if let Some(x) = x {
        let rb = layout.random_nonce_base();
        e.push(
            Role::Dummy,
            Op::Load {
                dst: x,
                mem: MemOperand::reg(s, 8),
            },
        );
        e.push(Role::Dummy, alu(And, i, a, imm(0x3FF)));
        e.push(Role::Dummy, alu(Shl, i, i, imm(3)));
        e.push(Role::Dummy, alu(Add, i, i, imm(rb)));
        e.push(
            Role::Dummy,
            Op::Load {
                dst: i,
                mem: MemOperand::reg(i, 0),
            },
        );
        e.push(
            Role::Dummy,
            Op::Test {
                a: x.into(),
                b: x.into(),
            },
        );
        e.push(
            Role::Dummy,
            Op::Select {
                dst: x,
                cond: Cond::Eq,
                a: i.into(),
                b: x.into(),
            },
        );
        e.push(Role::Dummy, alu(Add, x, x, imm(3)));
    }
    e.push(Role::RestoreFlags, Op::RestoreFlags { src: fr });
    let truth = MemOperand::reg(t, 0).with_width(mem.width);
    match &ins.op {
        Op::Store { src, .. } => {
            let (d, x) = (d.unwrap(), x.unwrap());
            e.push_with(
                Role::StoreCell,
                ins.site,
                Op::Store {
                    mem: truth,
                    src: *src,
                },
            );
            e.push(
                Role::Dummy,
                Op::Store {
                    mem: MemOperand::reg(d, 0),
                    src: x.into(),
                },
            );
            e.push(
                Role::Dummy,
                Op::Store {
                    mem: MemOperand::reg(s, 8),
                    src: x.into(),
                },
            );
        }
        Op::Load { dst, .. } => {
            e.push_with(
                Role::LoadCell,
                ins.site,
                Op::Load {
                    dst: *dst,
                    mem: truth,
                },
            );
        }
        _ => unreachable!(),
    }
    let (inner, roles) = (std::mem::take(&mut e.out), std::mem::take(&mut e.roles));
    *ids = inner_ids;
    let mut wrapped = Emit::new(ids);
    wrap_spills(&plan, &mut wrapped, inner, roles);
    out.extend(wrapped.out);
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
            MacroKind::ObfStore
        } else {
            MacroKind::ObfLoad
        },
        variant: None,
        cell: CellRef::Heap,
        nonce: CellRef::Heap,
        width: mem.width,
        scratch: plan.regs.clone(),
        instrs: wrapped.roles,
    };
    (rec, clobbered)
}
