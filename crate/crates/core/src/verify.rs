//! Checks that a mitigated program computes the same thing as its original
//! and that every protection obligation holds.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::ExecError;
use crate::interp::{run, Event, Inputs, MachineState, RunConfig};
use crate::layout::{Layout, Region};
use crate::mir::{Base, Block, Cond, MemOperand, Op, Operand, Program, Reg, SiteId};
use crate::noncebuf::{
    diverts, HeapNonceStore, SecureBuffer, HEAP_HASH_MULTIPLIER, HEAP_INDEX_MAX,
};
use crate::taint::{run_tainted, SensitiveSiteSet};
use crate::transform::{
    CellRef, MacroKind, MacroRecord, MitigationMap, Role, Strategy, INIT_FUNCTION,
};

/// Machine state with protection artifacts removed and protected cells
/// decoded.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AbstractState {
    pub regs: BTreeMap<Reg, u64>,
    /// Entry-frame words keyed by (slot id, byte offset in slot).
    pub stack: BTreeMap<(u32, u64), u64>,
    /// Nonzero heap and data words by address.
    pub memory: BTreeMap<u64, u64>,
}

/// Abstracts a final state of `run_program`, which is either `original` or
/// its mitigation described by `map` (empty for the original).
pub fn abstract_state(
    state: &MachineState,
    run_program: &Program,
    original: &Program,
    map: &MitigationMap,
    layout: &Layout,
) -> AbstractState {
    let regs = Reg::all().map(|r| (r, state.reg(r))).collect();
    let mut stack = BTreeMap::new();
    if let (Some(f), Some(sp)) = (
        original.function(&original.entry),
        run_program.entry_frame_base(layout),
    ) {
        let nonces = map.nonce_slots.get(&f.name);
        for s in &f.slots {
            for off in (0..s.size).step_by(8) {
                let cell = s.offset + off;
                let mut v = state.memory.read(sp + cell, 8);
                if let Some(n) = nonces.and_then(|m| m.get(&cell)) {
                    v ^= state.memory.read(sp + n, 8);
                }
                stack.insert((s.id, off), v);
            }
        }
    }
    let mut memory: BTreeMap<u64, u64> = BTreeMap::new();
    for (addr, v) in state.memory.nonzero_words() {
        match layout.region_of(addr) {
            Some(Region::Heap) => {
                memory.insert(addr, v);
            }
            Some(Region::Data) if !layout.is_artifact(addr) => {
                memory.insert(addr, v);
            }
            _ => {}
        }
    }
    let store = HeapNonceStore::new(layout, map.nonce_mode);
    for c in map.masked_cells() {
        let raw = state.memory.read(c, 8);
        let n = store
            .lookup(&state.memory, c)
            .map_or(0, |a| state.memory.read(a, 8));
        memory.insert(c, raw ^ n);
    }
    let sb = SecureBuffer::new(layout);
    for c in map.obfuscated_cells() {
        if diverts(c) {
            memory.insert(c, state.memory.read(sb.entry(c), 8));
        }
    }
    memory.retain(|_, v| *v != 0);
    AbstractState {
        regs,
        stack,
        memory,
    }
}

/// Differences between the abstractions of an original and a mitigated
/// final state, ignoring registers and slots the mitigation owns.
pub fn diff_states(
    orig: &AbstractState,
    mitigated: &AbstractState,
    entry: &str,
    map: &MitigationMap,
) -> Vec<String> {
    let mut out = Vec::new();
    for (r, v) in &orig.regs {
        if map.clobbered.contains(r) {
            continue;
        }
        let w = mitigated.regs.get(r).copied().unwrap_or(0);
        if *v != w {
            out.push(format!("register {r}: {v:#x} vs {w:#x}"));
        }
    }
    let promoted = map.promoted_slots(entry);
    for (k, v) in &orig.stack {
        if promoted.contains(&k.0) {
            continue;
        }
        let w = mitigated.stack.get(k).copied().unwrap_or(0);
        if *v != w {
            out.push(format!("slot {} +{}: {v:#x} vs {w:#x}", k.0, k.1));
        }
    }
    let addrs: BTreeSet<u64> = orig
        .memory
        .keys()
        .chain(mitigated.memory.keys())
        .copied()
        .collect();
    for a in addrs {
        let v = orig.memory.get(&a).copied().unwrap_or(0);
        let w = mitigated.memory.get(&a).copied().unwrap_or(0);
        if v != w {
            out.push(format!("memory {a:#x}: {v:#x} vs {w:#x}"));
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EquivReport {
    pub equivalent: bool,
    /// Index of the first differing output event.
    pub first_divergence: Option<usize>,
    pub original_events: usize,
    pub mitigated_events: usize,
    /// Final-state differences (strict comparison).
    pub state_diffs: Vec<String>,
    pub error: Option<String>,
}

/// Runs both programs and compares their functional traces and, when
/// `strict`, their abstracted final states.
pub fn trace_equiv(
    original: &Program,
    mitigated: &Program,
    map: &MitigationMap,
    inputs: &Inputs,
    cfg: &RunConfig,
    strict: bool,
) -> Result<EquivReport, ExecError> {
    let a = run(original, inputs, cfg, None)?;
    let adapted = map.adapt_inputs(inputs, &cfg.layout);
    let b = match run(mitigated, &adapted, cfg, None) {
        Ok(b) => b,
        Err(e) => {
            return Ok(EquivReport {
                equivalent: false,
                first_divergence: Some(0),
                original_events: a.trace.events.len(),
                mitigated_events: 0,
                state_diffs: vec![],
                error: Some(e.to_string()),
            })
        }
    };
    let ea: &[Event] = &a.trace.events;
    let eb: &[Event] = &b.trace.events;
    let first_divergence = (0..ea.len().max(eb.len())).find(|&i| ea.get(i) != eb.get(i));
    let state_diffs = if strict {
        let empty = MitigationMap::default();
        let sa = abstract_state(&a.state, original, original, &empty, &cfg.layout);
        let sb = abstract_state(&b.state, mitigated, original, map, &cfg.layout);
        diff_states(&sa, &sb, &original.entry, map)
    } else {
        vec![]
    };
    Ok(EquivReport {
        equivalent: first_divergence.is_none() && state_diffs.is_empty(),
        first_divergence,
        original_events: ea.len(),
        mitigated_events: eb.len(),
        state_diffs,
        error: None,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Pass,
    Fail,
    NotApplicable,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Obligation {
    pub id: String,
    pub description: String,
    pub status: Status,
    pub details: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditReport {
    pub obligations: Vec<Obligation>,
}

impl AuditReport {
    pub fn passed(&self) -> bool {
        self.obligations.iter().all(|o| o.status != Status::Fail)
    }

    pub fn get(&self, id: &str) -> Option<&Obligation> {
        self.obligations.iter().find(|o| o.id == id)
    }

    pub fn failures(&self) -> Vec<&str> {
        self.obligations
            .iter()
            .filter(|o| o.status == Status::Fail)
            .map(|o| o.id.as_str())
            .collect()
    }
}

/// Where each site sits in a program.
struct Index<'p> {
    at: HashMap<SiteId, (usize, usize, usize)>,
    p: &'p Program,
}

impl<'p> Index<'p> {
    fn new(p: &'p Program) -> Self {
        let mut at = HashMap::new();
        for (fi, f) in p.functions.iter().enumerate() {
            for (bi, b) in f.blocks.iter().enumerate() {
                for (k, i) in b.instrs.iter().enumerate() {
                    at.insert(i.site, (fi, bi, k));
                }
            }
        }
        Index { at, p }
    }

    fn op(&self, s: SiteId) -> Option<&'p Op> {
        let &(f, b, k) = self.at.get(&s)?;
        Some(&self.p.functions[f].blocks[b].instrs[k].op)
    }
}

fn obligation(id: &str, description: &str, applicable: bool, details: Vec<String>) -> Obligation {
    let status = if !applicable {
        Status::NotApplicable
    } else if details.is_empty() {
        Status::Pass
    } else {
        Status::Fail
    };
    Obligation {
        id: id.into(),
        description: description.into(),
        status,
        details,
    }
}

fn one(ix: &Index<'_>, m: &MacroRecord, role: Role, errs: &mut Vec<String>) -> Option<SiteId> {
    let ids = m.ids(role);
    if ids.len() != 1 {
        errs.push(format!(
            "site {}: expected one {role:?}, found {}",
            m.site,
            ids.len()
        ));
        return None;
    }
    if ix.op(ids[0]).is_none() {
        errs.push(format!(
            "site {}: {role:?} instruction {} missing",
            m.site, ids[0]
        ));
        return None;
    }
    Some(ids[0])
}

/// Emitted ids that still exist, in program order.
fn present(ix: &Index<'_>, m: &MacroRecord) -> Vec<(Role, SiteId)> {
    let mut v: Vec<(Role, SiteId, (usize, usize, usize))> = m
        .instrs
        .iter()
        .filter_map(|&(r, s)| ix.at.get(&s).map(|&pos| (r, s, pos)))
        .collect();
    v.sort_by_key(|x| x.2);
    v.into_iter().map(|(r, s, _)| (r, s)).collect()
}

fn pos(ix: &Index<'_>, s: SiteId) -> (usize, usize, usize) {
    ix.at[&s]
}

/// Save/restore windows pair up on the same register.
fn flag_windows(ix: &Index<'_>, m: &MacroRecord, errs: &mut Vec<String>) {
    let mut open: Option<Reg> = None;
    for (role, s) in present(ix, m) {
        match (role, ix.op(s)) {
            (Role::SaveFlags, Some(Op::SaveFlags { dst })) => {
                if open.is_some() {
                    errs.push(format!("site {}: nested flags save", m.site));
                }
                open = Some(*dst);
            }
            (Role::RestoreFlags, Some(Op::RestoreFlags { src })) => {
                if open != Some(*src) {
                    errs.push(format!(
                        "site {}: flags restored from unsaved {src}",
                        m.site
                    ));
                }
                open = None;
            }
            (_, Some(op))
                if op.sets_flags()
                    && open.is_none()
                    && role != Role::Spill
                    && role != Role::Reload =>
            {
                errs.push(format!(
                    "site {}: {} clobbers flags outside a window",
                    m.site,
                    op.mnemonic()
                ));
            }
            _ => {}
        }
    }
    if open.is_some() {
        errs.push(format!("site {}: flags window never closed", m.site));
    }
}

fn check_wrap(ix: &Index<'_>, m: &MacroRecord, errs: &mut Vec<String>) {
    flag_windows(ix, m, errs);
    let (Some(ln), Some(dec)) = (
        one(ix, m, Role::LoadNonce, errs),
        one(ix, m, Role::Decode, errs),
    ) else {
        return;
    };
    let Some(Op::Load { dst: nreg, .. }) = ix.op(ln) else {
        errs.push(format!("site {}: nonce load is not a load", m.site));
        return;
    };
    match ix.op(dec) {
        Some(Op::Alu {
            op: crate::mir::AluOp::Xor,
            dst,
            a,
            b,
        }) if *a == Operand::Reg(*dst) && *b == Operand::Reg(*nreg) => {}
        _ => errs.push(format!("site {}: decode is not value ^ nonce", m.site)),
    }
    if pos(ix, ln) > pos(ix, dec) {
        errs.push(format!("site {}: decode before nonce load", m.site));
    }
    if m.kind == MacroKind::MaskLoad {
        let orig = m.ids(Role::Original);
        if orig.iter().any(|s| pos(ix, *s) < pos(ix, dec)) || orig.is_empty() {
            errs.push(format!("site {}: value used before decode", m.site));
        }
    } else if let Some(sc) = one(ix, m, Role::StoreCell, errs) {
        let enc = m.ids(Role::Encode);
        let encoded = enc.first().and_then(|e| match ix.op(*e) {
            Some(Op::Alu { dst, .. }) => Some(*dst),
            _ => None,
        });
        match ix.op(sc) {
            Some(Op::Store {
                src: Operand::Reg(r),
                ..
            }) if Some(*r) == encoded => {}
            _ => errs.push(format!(
                "site {}: cell store does not write the encoded value",
                m.site
            )),
        }
    }
}

fn check_nonce_cell(ix: &Index<'_>, m: &MacroRecord, map: &MitigationMap, errs: &mut Vec<String>) {
    let ids: Vec<SiteId> = m
        .ids(Role::LoadNonce)
        .into_iter()
        .chain(m.ids(Role::StoreNonce))
        .collect();
    match (m.cell, m.nonce) {
        (CellRef::Stack { offset: cell }, CellRef::Stack { offset: nonce }) => {
            let expect = map.nonce_slots.get(&m.func).and_then(|s| s.get(&cell));
            if expect != Some(&nonce) {
                errs.push(format!(
                    "site {}: nonce slot not registered for cell {cell}",
                    m.site
                ));
            }
            for s in ids {
                match ix.op(s).and_then(Op::mem) {
                    Some(mem) if mem.base == Base::Sp && mem.offset == nonce as i64 => {}
                    _ => errs.push(format!(
                        "site {}: nonce access {s} misses slot +{nonce}",
                        m.site
                    )),
                }
            }
            for s in m
                .ids(Role::StoreCell)
                .into_iter()
                .chain(if m.kind == MacroKind::MaskLoad {
                    m.ids(Role::LoadCell)
                } else {
                    vec![]
                })
            {
                match ix.op(s).and_then(Op::mem) {
                    Some(mem) if mem.base == Base::Sp && mem.offset == cell as i64 => {}
                    _ => errs.push(format!("site {}: cell access {s} misses +{cell}", m.site)),
                }
            }
        }
        _ => {
            let hashed = m.ids(Role::Hash).iter().any(|s| {
                matches!(
                    ix.op(*s),
                    Some(Op::Alu {
                        op: crate::mir::AluOp::Mul,
                        b: Operand::Imm(HEAP_HASH_MULTIPLIER),
                        ..
                    })
                )
            });
            if !hashed {
                errs.push(format!(
                    "site {}: heap nonce index not computed by the hash",
                    m.site
                ));
            }
        }
    }
}

fn check_contiguous(ix: &Index<'_>, m: &MacroRecord, errs: &mut Vec<String>) {
    let v = present(ix, m);
    let Some(&(_, first)) = v.first() else { return };
    let (f, b, k0) = pos(ix, first);
    let block = &ix.p.functions[f].blocks[b];
    for (n, (_, s)) in v.iter().enumerate() {
        let (f2, b2, k) = pos(ix, *s);
        if (f2, b2) != (f, b) || k != k0 + n {
            errs.push(format!("site {}: macro split or interleaved", m.site));
            return;
        }
    }
    let end = k0 + v.len();
    if block.instrs[k0..end].iter().any(|i| {
        i.op.is_branch() || matches!(i.op, Op::Call { .. } | Op::Jmp { .. } | Op::Ret | Op::Halt)
    }) {
        errs.push(format!("site {}: control flow inside macro", m.site));
    }
}

fn check_update(ix: &Index<'_>, m: &MacroRecord, errs: &mut Vec<String>) {
    let upd = m.ids(Role::Update);
    let live: Vec<SiteId> = upd
        .iter()
        .copied()
        .filter(|s| ix.op(*s).is_some())
        .collect();
    if live.is_empty() || live.len() != upd.len() {
        errs.push(format!("site {}: nonce update missing", m.site));
        return;
    }
    let (Some(enc), Some(sn)) = (
        one(ix, m, Role::Encode, errs),
        one(ix, m, Role::StoreNonce, errs),
    ) else {
        return;
    };
    let last = *live.iter().max_by_key(|s| pos(ix, **s)).unwrap();
    if pos(ix, last) > pos(ix, enc) || pos(ix, enc) > pos(ix, sn) {
        errs.push(format!(
            "site {}: update/encode/nonce store out of order",
            m.site
        ));
    }
    let updated = match ix.op(last) {
        Some(op) => op.def(),
        None => None,
    };
    let enc_key = match ix.op(enc) {
        Some(Op::Alu {
            op: crate::mir::AluOp::Xor,
            b: Operand::Reg(r),
            ..
        }) => Some(*r),
        _ => None,
    };
    let stored = match ix.op(sn) {
        Some(Op::Store {
            src: Operand::Reg(r),
            ..
        }) => Some(*r),
        _ => None,
    };
    if updated.is_none() || updated != enc_key || enc_key != stored {
        errs.push(format!(
            "site {}: encode or nonce store does not use the updated nonce",
            m.site
        ));
    }
}

fn check_divert(ix: &Index<'_>, m: &MacroRecord, errs: &mut Vec<String>) {
    flag_windows(ix, m, errs);
    let sels: Vec<(Reg, Operand, Operand)> = m
        .ids(Role::Divert)
        .iter()
        .filter_map(|s| match ix.op(*s) {
            Some(Op::Select {
                dst,
                cond: Cond::Eq,
                a,
                b,
            }) => Some((*dst, *a, *b)),
            _ => None,
        })
        .collect();
    let truth_target = m
        .ids(if m.kind == MacroKind::ObfStore {
            Role::StoreCell
        } else {
            Role::LoadCell
        })
        .first()
        .and_then(|s| ix.op(*s))
        .and_then(|op| op.mem().copied());
    let Some((truth_sel, ta, tb)) = sels.first().copied() else {
        errs.push(format!("site {}: no truth select", m.site));
        return;
    };
    let narrow_add = m
        .ids(Role::Divert)
        .iter()
        .any(|s| matches!(ix.op(*s), Some(Op::Alu { dst, .. }) if *dst == truth_sel));
    if !matches!(truth_target, Some(MemOperand { base: Base::Reg(r), .. }) if r == truth_sel)
        && !narrow_add
    {
        errs.push(format!(
            "site {}: truth access not through the select",
            m.site
        ));
    }
    if m.kind == MacroKind::ObfStore {
        if sels.len() != 2 || sels[1].1 != tb || sels[1].2 != ta {
            errs.push(format!(
                "site {}: decoy select is not the mirror of the truth select",
                m.site
            ));
        }
        let stores = present(ix, m)
            .iter()
            .filter(|(r, s)| *r != Role::Spill && matches!(ix.op(*s), Some(Op::Store { .. })))
            .count();
        if stores != 3 {
            errs.push(format!(
                "site {}: expected truth, decoy and churn stores, found {stores}",
                m.site
            ));
        }
    }
    // The buffer address must be the first select operand: even indices
    // (ZF set by `test I, 1`) divert to the buffer.
    let buffer_reg = m
        .ids(Role::Hash)
        .iter()
        .rev()
        .find_map(|s| match ix.op(*s) {
            Some(Op::Alu {
                op: crate::mir::AluOp::Add,
                dst,
                ..
            }) => Some(*dst),
            _ => None,
        });
    if buffer_reg.map(Operand::Reg) != Some(ta) {
        errs.push(format!(
            "site {}: truth select does not prefer the buffer on even index",
            m.site
        ));
    }
}

/// Sensitive stack accesses of the original, by function.
fn sensitive_stack_sites(
    original: &Program,
    sites: &SensitiveSiteSet,
) -> Vec<(String, SiteId, u32)> {
    let mut out = Vec::new();
    for f in &original.functions {
        let slots = sites.slots_of(&f.name);
        for i in f.instructions() {
            if let Some(m) = i.op.mem().filter(|m| m.base == Base::Sp && m.offset >= 0) {
                if let Some(s) = f.slot_at(m.offset as u64).filter(|s| slots.contains(&s.id)) {
                    out.push((f.name.clone(), i.site, s.id));
                }
            }
        }
    }
    out
}

/// Static and (with `inputs`) dynamic audits of a mitigated program.
pub fn audit(
    original: &Program,
    sites: &SensitiveSiteSet,
    mitigated: &Program,
    map: &MitigationMap,
    inputs: Option<&Inputs>,
    cfg: &RunConfig,
) -> AuditReport {
    let strategy = map.strategy.unwrap_or(Strategy::None);
    let ix = Index::new(mitigated);
    let masking = strategy.masks();
    let heap_masked = matches!(strategy, Strategy::Mask | Strategy::Regalloc);
    let obfuscating = matches!(strategy, Strategy::Obfuscate | Strategy::Full);
    let masks: Vec<&MacroRecord> = map
        .macros
        .iter()
        .filter(|m| matches!(m.kind, MacroKind::MaskStore | MacroKind::MaskLoad))
        .collect();
    let obfs: Vec<&MacroRecord> = map
        .macros
        .iter()
        .filter(|m| matches!(m.kind, MacroKind::ObfStore | MacroKind::ObfLoad))
        .collect();
    let promoted: BTreeSet<SiteId> = map
        .promotions
        .iter()
        .flat_map(|p| p.sites.iter().copied())
        .collect();
    let covered: BTreeSet<SiteId> = masks.iter().map(|m| m.site).collect();

    let mut o1 = Vec::new();
    if masking {
        for (f, s, slot) in sensitive_stack_sites(original, sites) {
            if !covered.contains(&s) && !promoted.contains(&s) {
                o1.push(format!("{f}: access {s} to slot {slot} is unprotected"));
            }
        }
        if heap_masked {
            for s in &sites.heap_sites {
                if !covered.contains(s)
                    && original
                        .find_site(*s)
                        .is_some_and(|(_, i)| i.op.is_memory())
                {
                    o1.push(format!("heap site {s} is unprotected"));
                }
            }
        }
        for m in &masks {
            check_wrap(&ix, m, &mut o1);
        }
    }

    let mut o2 = Vec::new();
    for (f, cells) in &map.nonce_slots {
        let nonces: BTreeSet<u64> = cells.values().copied().collect();
        if nonces.len() != cells.len() {
            o2.push(format!("{f}: two cells share a nonce slot"));
        }
        if nonces.iter().any(|n| cells.contains_key(n)) {
            o2.push(format!("{f}: nonce slot overlaps a protected cell"));
        }
        if let Some(of) = original.function(f) {
            for n in &nonces {
                if of.slot_at(*n).is_some() {
                    o2.push(format!("{f}: nonce slot +{n} overlaps an original slot"));
                }
            }
        }
    }
    if masks.iter().any(|m| m.cell == CellRef::Heap)
        && map.nonce_mode == crate::noncebuf::NonceMode::Normal
        && cfg.layout.heap_size > 1 << 20
    {
        o2.push("heap larger than 1 MiB: hashed nonce index may collide".into());
    }
    for m in &masks {
        check_nonce_cell(&ix, m, map, &mut o2);
    }

    let mut o3 = Vec::new();
    for m in &masks {
        check_contiguous(&ix, m, &mut o3);
    }

    let mut o4 = Vec::new();
    for m in masks.iter().filter(|m| m.kind == MacroKind::MaskStore) {
        check_update(&ix, m, &mut o4);
    }

    let macro_ids = map.macro_ids();
    let (r1_applicable, mut r1) = (masking && inputs.is_some(), Vec::new());
    if let (true, Some(inputs)) = (r1_applicable, inputs) {
        let adapted = map.adapt_inputs(inputs, &cfg.layout);
        match run_tainted(mitigated, &adapted, cfg) {
            Ok(t) => {
                for s in t.stores.difference(&macro_ids) {
                    let in_init = mitigated
                        .function(INIT_FUNCTION)
                        .is_some_and(|f| f.instructions().any(|i| i.site == *s));
                    if !in_init {
                        r1.push(format!("store {s} writes a secret-tainted value"));
                    }
                }
            }
            Err(e) => r1.push(format!("taint run failed: {e}")),
        }
    }

    let mut r2 = Vec::new();
    if masking {
        for f in &original.functions {
            let Some(mf) = mitigated.function(&f.name) else {
                continue;
            };
            let promoted_slots = map.promoted_slots(&f.name);
            for id in sites.slots_of(&f.name) {
                let Some(slot) = f.slots.iter().find(|s| s.id == id) else {
                    continue;
                };
                for i in mf.instructions() {
                    let Some(m) = i.op.mem().filter(|m| m.base == Base::Sp && m.offset >= 0) else {
                        continue;
                    };
                    if !slot.contains(m.offset as u64) || macro_ids.contains(&i.site) {
                        continue;
                    }
                    let why = if promoted_slots.contains(&id) {
                        "promoted"
                    } else {
                        "masked"
                    };
                    r2.push(format!(
                        "{}: {why} slot {id} accessed raw at site {}",
                        f.name, i.site
                    ));
                }
            }
        }
    }

    let mut d1 = Vec::new();
    let obf_covered: BTreeSet<SiteId> = obfs.iter().map(|m| m.site).collect();
    if obfuscating {
        for s in &sites.heap_sites {
            if !obf_covered.contains(s)
                && original
                    .find_site(*s)
                    .is_some_and(|(_, i)| i.op.is_memory())
            {
                d1.push(format!("heap site {s} not diverted"));
            }
        }
        for m in &obfs {
            check_divert(&ix, m, &mut d1);
        }
    }
    let mut d2 = Vec::new();
    for m in &obfs {
        check_contiguous(&ix, m, &mut d2);
    }
    let mut d3 = Vec::new();
    if obfuscating {
        let l = &cfg.layout;
        let sb = l.secure_buffer_base();
        let size = SecureBuffer::size();
        if l.contains_range(sb, size) != Some(Region::Data) {
            d3.push("secure buffer outside encrypted data region".into());
        }
        let user = (l.user_base(), l.user_end());
        if sb < user.1 && user.0 < sb + size {
            d3.push("secure buffer overlaps the program data window".into());
        }
        if HEAP_INDEX_MAX + 1 < (l.heap_size / 8).min(HEAP_INDEX_MAX + 1) {
            d3.push("secure buffer smaller than the heap index range".into());
        }
    }

    AuditReport {
        obligations: vec![
            obligation(
                "O1",
                "every sensitive access goes through encode/decode",
                masking,
                o1,
            ),
            obligation("O2", "distinct cells use distinct nonce cells", masking, o2),
            obligation("O3", "nonce code is branch-free and atomic", masking, o3),
            obligation(
                "O4",
                "each masked store has one update and one encode",
                masking,
                o4,
            ),
            obligation(
                "R1",
                "no raw secret reaches memory outside macros",
                r1_applicable,
                r1,
            ),
            obligation(
                "R2",
                "unpromoted sensitive slots fall back to masking",
                masking,
                r2,
            ),
            obligation(
                "D1",
                "every sensitive heap access is diverted with a decoy",
                obfuscating,
                d1,
            ),
            obligation("D2", "diversion code is branch-free", obfuscating, d2),
            obligation(
                "D3",
                "secure buffer lies in encrypted memory",
                obfuscating,
                d3,
            ),
        ],
    }
}

/// Reports every store of a secret-tainted value that is not part of a
/// mitigation macro.
pub fn audit_no_secret_stores(
    p: &Program,
    map: &MitigationMap,
    inputs: &Inputs,
    cfg: &RunConfig,
) -> Result<Vec<SiteId>, ExecError> {
    let adapted = map.adapt_inputs(inputs, &cfg.layout);
    let t = run_tainted(p, &adapted, cfg)?;
    let ids = map.macro_ids();
    let init: BTreeSet<SiteId> = p
        .function(INIT_FUNCTION)
        .map(|f| f.instructions().map(|i| i.site).collect())
        .unwrap_or_default();
    Ok(t.stores
        .into_iter()
        .filter(|s| !ids.contains(s) && !init.contains(s))
        .collect())
}

/// Deliberate faults used to check that the verifier notices broken macros.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mutation {
    DropUpdate,
    DropNonceStore,
    DropEncode,
    DropDecode,
    DropSaveFlags,
    CorruptNonceOffset,
    StoreRawSource,
    InsertBranch,
    DropDecoyStore,
    SwapDivertSelect,
}

impl Mutation {
    pub const ALL: [Mutation; 10] = [
        Mutation::DropUpdate,
        Mutation::DropNonceStore,
        Mutation::DropEncode,
        Mutation::DropDecode,
        Mutation::DropSaveFlags,
        Mutation::CorruptNonceOffset,
        Mutation::StoreRawSource,
        Mutation::InsertBranch,
        Mutation::DropDecoyStore,
        Mutation::SwapDivertSelect,
    ];

    /// Whether the mutation targets diversion rather than masking macros.
    pub fn targets_diversion(self) -> bool {
        matches!(self, Mutation::DropDecoyStore | Mutation::SwapDivertSelect)
    }

    /// Applies the mutation to the first suitable macro.
    pub fn apply(self, p: &Program, map: &MitigationMap) -> Option<Program> {
        let mut q = p.clone();
        let find = |kind: MacroKind, stack_only: bool| {
            map.macros.iter().find(|m| {
                m.kind == kind && (!stack_only || matches!(m.cell, CellRef::Stack { .. }))
            })
        };
        match self {
            Mutation::DropUpdate => {
                let m = find(MacroKind::MaskStore, false)?;
                remove(&mut q, &m.ids(Role::Update));
            }
            Mutation::DropNonceStore => remove(
                &mut q,
                &find(MacroKind::MaskStore, false)?.ids(Role::StoreNonce),
            ),
            Mutation::DropEncode => remove(
                &mut q,
                &find(MacroKind::MaskStore, false)?.ids(Role::Encode),
            ),
            Mutation::DropDecode => {
                remove(&mut q, &find(MacroKind::MaskLoad, false)?.ids(Role::Decode))
            }
            Mutation::DropSaveFlags => {
                let m = find(MacroKind::MaskStore, false)?;
                remove(&mut q, &m.ids(Role::SaveFlags)[..1]);
            }
            Mutation::CorruptNonceOffset => {
                let m = find(MacroKind::MaskStore, true)?;
                let s = m.ids(Role::StoreNonce)[0];
                edit(&mut q, s, |op| {
                    if let Some(mem) = op.mem_mut() {
                        mem.offset += 8;
                    }
                });
            }
            Mutation::StoreRawSource => {
                let m = find(MacroKind::MaskStore, false)?;
                let src =
                    m.ids(Role::Original)
                        .iter()
                        .find_map(|s| match p.find_site(*s)?.1.op {
                            Op::Mov { src, .. } => Some(src),
                            _ => None,
                        })?;
                edit(&mut q, m.ids(Role::StoreCell)[0], |op| {
                    if let Op::Store { src: s, .. } = op {
                        *s = src;
                    }
                });
            }
            Mutation::InsertBranch => {
                let m = find(MacroKind::MaskStore, false)?;
                split_before(&mut q, m.ids(Role::Encode)[0]);
            }
            Mutation::DropDecoyStore => {
                let m = find(MacroKind::ObfStore, false)?;
                let decoy = m
                    .ids(Role::Dummy)
                    .into_iter()
                    .find(|s| matches!(p.find_site(*s).map(|x| &x.1.op), Some(Op::Store { .. })))?;
                remove(&mut q, &[decoy]);
            }
            Mutation::SwapDivertSelect => {
                let m = find(MacroKind::ObfStore, false)?;
                edit(&mut q, m.ids(Role::Divert)[1], |op| {
                    if let Op::Select { a, b, .. } = op {
                        std::mem::swap(a, b);
                    }
                });
            }
        }
        Some(q)
    }
}

fn remove(p: &mut Program, ids: &[SiteId]) {
    for f in &mut p.functions {
        for b in &mut f.blocks {
            b.instrs.retain(|i| !ids.contains(&i.site));
        }
    }
}

fn edit(p: &mut Program, site: SiteId, g: impl FnOnce(&mut Op)) {
    for f in &mut p.functions {
        for b in &mut f.blocks {
            if let Some(i) = b.instrs.iter_mut().find(|i| i.site == site) {
                g(&mut i.op);
                return;
            }
        }
    }
}

/// Splits the block holding `site` so that a conditional branch precedes it.
fn split_before(p: &mut Program, site: SiteId) {
    let fresh = p.max_site().map_or(0, |m| m + 1);
    for f in &mut p.functions {
        for bi in 0..f.blocks.len() {
            let Some(k) = f.blocks[bi].instrs.iter().position(|i| i.site == site) else {
                continue;
            };
            let tail = f.blocks[bi].instrs.split_off(k);
            let label = format!("{}__split", f.blocks[bi].label);
            f.blocks[bi].instrs.push(crate::mir::Instruction::new(
                fresh,
                Op::BrCond {
                    cond: Cond::Eq,
                    taken: label.clone(),
                    not_taken: label.clone(),
                },
            ));
            f.blocks.insert(
                bi + 1,
                Block {
                    label,
                    instrs: tail,
                },
            );
            return;
        }
    }
}

/// Outcome of one mutation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MutationResult {
    pub mutation: Mutation,
    pub applied: bool,
    pub detected: bool,
    pub failed_obligations: Vec<String>,
    pub diverged: bool,
}

/// Applies one mutation and reports whether audits or trace comparison
/// catch it.
pub fn check_mutation(
    mutation: Mutation,
    original: &Program,
    sites: &SensitiveSiteSet,
    mitigated: &Program,
    map: &MitigationMap,
    inputs: &Inputs,
    cfg: &RunConfig,
) -> MutationResult {
    let Some(q) = mutation.apply(mitigated, map) else {
        return MutationResult {
            mutation,
            applied: false,
            detected: false,
            failed_obligations: vec![],
            diverged: false,
        };
    };
    let report = audit(original, sites, &q, map, Some(inputs), cfg);
    let diverged =
        trace_equiv(original, &q, map, inputs, cfg, true).map_or(true, |r| !r.equivalent);
    let failed: Vec<String> = report.failures().into_iter().map(String::from).collect();
    MutationResult {
        mutation,
        applied: true,
        detected: diverged || !failed.is_empty(),
        failed_obligations: failed,
        diverged,
    }
}
