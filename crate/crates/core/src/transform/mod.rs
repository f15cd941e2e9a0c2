//! Mitigation passes and the metadata they leave behind.

mod mask;
mod obfuscate;
mod pipeline;
mod regalloc;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

pub use mask::{mask_rewrite, MaskScope};
pub use obfuscate::obfuscate_rewrite;
pub use pipeline::{full_pipeline, mitigate, Mitigated};
pub use regalloc::{
    allocate_rewrite, build_stack_usage, clobbered_lanes, select_stack_opt, AllocationReport,
    FunctionAllocation, StackOpt, StackUsage, LANE_CAPACITY,
};

use crate::error::TransformError;
use crate::interp::Inputs;
use crate::layout::{Layout, Region};
use crate::mir::{
    Block, Function, Instruction, Liveness, MemOperand, Op, Operand, Program, Reg, RegSet, SiteId,
    Span,
};
use crate::noncebuf::{diverts, NonceMode, SecureBuffer};
use crate::taint::HeapRegion;

pub const INIT_FUNCTION: &str = "__mitigation_init";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    None,
    Mask,
    Regalloc,
    Obfuscate,
    Full,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::Mask,
        Strategy::Regalloc,
        Strategy::Obfuscate,
        Strategy::Full,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::None => "none",
            Strategy::Mask => "mask",
            Strategy::Regalloc => "regalloc",
            Strategy::Obfuscate => "obfuscate",
            Strategy::Full => "full",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Strategy::None]
            .into_iter()
            .chain(Self::ALL)
            .find(|k| k.name() == s)
    }

    /// Whether the strategy emits masking macros.
    pub fn masks(self) -> bool {
        matches!(self, Strategy::Mask | Strategy::Regalloc | Strategy::Full)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MaskVariant {
    #[serde(rename = "rdrand", alias = "rdrand_buffer")]
    Rdrand,
    #[serde(rename = "aes", alias = "aes_prf")]
    Aes,
    #[serde(rename = "xs", alias = "xorshift128plus")]
    Xs,
}

impl MaskVariant {
    pub const ALL: [MaskVariant; 3] = [MaskVariant::Rdrand, MaskVariant::Aes, MaskVariant::Xs];

    pub fn name(self) -> &'static str {
        match self {
            MaskVariant::Rdrand => "rdrand",
            MaskVariant::Aes => "aes",
            MaskVariant::Xs => "xs",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "rdrand" | "rdrand_buffer" => Some(MaskVariant::Rdrand),
            "aes" | "aes_prf" => Some(MaskVariant::Aes),
            "xs" | "xorshift128plus" => Some(MaskVariant::Xs),
            _ => None,
        }
    }

    /// Lanes the variant keeps for its own state.
    pub fn reserved_lanes(self) -> Vec<Reg> {
        let from = match self {
            MaskVariant::Rdrand => return vec![],
            MaskVariant::Aes => 14,
            MaskVariant::Xs => 13,
        };
        (from..16)
            .flat_map(|v| [Reg::lane(v, false), Reg::lane(v, true)])
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransformConfig {
    pub layout: Layout,
    pub nonce_mode: NonceMode,
}

impl Default for TransformConfig {
    fn default() -> Self {
        TransformConfig {
            layout: Layout::default(),
            nonce_mode: NonceMode::Normal,
        }
    }
}

/// Part an inserted instruction plays inside a macro.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Address,
    Hash,
    LoadCell,
    LoadNonce,
    SaveFlags,
    RestoreFlags,
    Decode,
    Extract,
    Original,
    Update,
    Encode,
    StoreNonce,
    StoreCell,
    Divert,
    Dummy,
    Spill,
    Reload,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MacroKind {
    MaskStore,
    MaskLoad,
    ObfStore,
    ObfLoad,
}

impl MacroKind {
    pub fn is_store(self) -> bool {
        matches!(self, MacroKind::MaskStore | MacroKind::ObfStore)
    }
}

/// Where the protected cell or its nonce lives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CellRef {
    /// Frame offset of an 8-byte cell.
    Stack { offset: u64 },
    /// Computed from the original address operand at run time.
    Heap,
}

/// One macro emitted for one original site.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MacroRecord {
    pub site: SiteId,
    pub func: String,
    pub kind: MacroKind,
    pub variant: Option<MaskVariant>,
    pub cell: CellRef,
    pub nonce: CellRef,
    pub width: u8,
    pub scratch: Vec<Reg>,
    /// Emitted instructions in order.
    pub instrs: Vec<(Role, SiteId)>,
}

impl MacroRecord {
    pub fn ids(&self, role: Role) -> Vec<SiteId> {
        self.instrs
            .iter()
            .filter(|(r, _)| *r == role)
            .map(|(_, s)| *s)
            .collect()
    }

    pub fn all_ids(&self) -> impl Iterator<Item = SiteId> + '_ {
        self.instrs.iter().map(|(_, s)| *s)
    }
}

/// A stack slot held in a lane.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Promotion {
    pub func: String,
    pub slot: u32,
    pub lane: Reg,
    /// Blocks (labels) where the slot is live, in reverse postorder.
    pub live_blocks: Vec<String>,
    /// Rewritten sites.
    pub sites: Vec<SiteId>,
}

/// Everything needed to audit a mitigated program and to map its states
/// back to the original.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MitigationMap {
    pub strategy: Option<Strategy>,
    pub variant: Option<MaskVariant>,
    pub nonce_mode: NonceMode,
    pub original_max_site: Option<SiteId>,
    pub macros: Vec<MacroRecord>,
    /// Per function: cell offset -> nonce slot offset.
    pub nonce_slots: BTreeMap<String, BTreeMap<u64, u64>>,
    /// Per function: slot ids added by the passes (nonces, spills).
    pub artifact_slots: BTreeMap<String, BTreeSet<u32>>,
    pub promotions: Vec<Promotion>,
    /// Heap cells rewritten by masking.
    pub masked_heap: Vec<HeapRegion>,
    /// Heap cells rewritten by obfuscation.
    pub obfuscated_heap: Vec<HeapRegion>,
    /// Registers whose final value is not preserved.
    pub clobbered: BTreeSet<Reg>,
    pub init_function: Option<String>,
}

pub(crate) fn cells_of(regions: &[HeapRegion]) -> BTreeSet<u64> {
    regions
        .iter()
        .flat_map(|r| (r.base..r.base + r.len).step_by(8))
        .collect()
}

pub(crate) fn regions_of(cells: &BTreeSet<u64>) -> Vec<HeapRegion> {
    let mut out: Vec<HeapRegion> = Vec::new();
    for &c in cells {
        match out.last_mut() {
            Some(r) if r.base + r.len == c => r.len += 8,
            _ => out.push(HeapRegion { base: c, len: 8 }),
        }
    }
    out
}

impl MitigationMap {
    pub fn new(strategy: Strategy, p: &Program) -> Self {
        MitigationMap {
            strategy: Some(strategy),
            original_max_site: p.max_site(),
            ..Default::default()
        }
    }

    pub fn is_empty(&self) -> bool {
        self.macros.is_empty() && self.promotions.is_empty()
    }

    pub fn macro_for(&self, site: SiteId) -> Option<&MacroRecord> {
        self.macros.iter().find(|m| m.site == site)
    }

    /// Ids of every instruction emitted inside some macro.
    pub fn macro_ids(&self) -> BTreeSet<SiteId> {
        self.macros.iter().flat_map(|m| m.all_ids()).collect()
    }

    pub fn promoted_slots(&self, func: &str) -> BTreeSet<u32> {
        self.promotions
            .iter()
            .filter(|p| p.func == func)
            .map(|p| p.slot)
            .collect()
    }

    pub fn obfuscated_cells(&self) -> BTreeSet<u64> {
        cells_of(&self.obfuscated_heap)
    }

    pub fn masked_cells(&self) -> BTreeSet<u64> {
        cells_of(&self.masked_heap)
    }

    /// Moves initial heap contents of diverted cells into the secure buffer,
    /// as the loader of a mitigated binary would.
    pub fn adapt_inputs(&self, inputs: &Inputs, layout: &Layout) -> Inputs {
        let cells = self.obfuscated_cells();
        if cells.is_empty() {
            return inputs.clone();
        }
        let mut out = inputs.clone();
        let mut extra = Vec::new();
        for (addr, bytes) in &mut out.memory {
            extra.extend(divert_bytes(*addr, bytes, &cells, layout));
        }
        out.memory.extend(extra);
        out
    }

    pub(crate) fn merge(&mut self, other: MitigationMap) {
        self.variant = self.variant.or(other.variant);
        self.macros.extend(other.macros);
        for (f, m) in other.nonce_slots {
            self.nonce_slots.entry(f).or_default().extend(m);
        }
        for (f, s) in other.artifact_slots {
            self.artifact_slots.entry(f).or_default().extend(s);
        }
        self.promotions.extend(other.promotions);
        let mut mc = self.masked_cells();
        mc.extend(cells_of(&other.masked_heap));
        self.masked_heap = regions_of(&mc);
        let mut oc = self.obfuscated_cells();
        oc.extend(cells_of(&other.obfuscated_heap));
        self.obfuscated_heap = regions_of(&oc);
        self.clobbered.extend(other.clobbered);
        self.init_function = self.init_function.clone().or(other.init_function);
        if other.nonce_mode == NonceMode::Expanded {
            self.nonce_mode = NonceMode::Expanded;
        }
    }
}

/// Splits the bytes of diverted cells off `bytes` (zeroing them in place)
/// and returns their secure-buffer copies.
pub(crate) fn divert_bytes(
    addr: u64,
    bytes: &mut [u8],
    cells: &BTreeSet<u64>,
    layout: &Layout,
) -> Vec<(u64, Vec<u8>)> {
    let sb = SecureBuffer::new(layout);
    let mut out = Vec::new();
    let end = addr + bytes.len() as u64;
    for &c in cells.range((addr & !7)..end) {
        if !diverts(c) {
            continue;
        }
        let lo = c.max(addr);
        let hi = (c + 8).min(end);
        let mut word = vec![0u8; 8];
        for a in lo..hi {
            let i = (a - addr) as usize;
            word[(a - c) as usize] = bytes[i];
            bytes[i] = 0;
        }
        out.push((sb.entry(c), word));
    }
    out
}

/// Issues fresh site ids above everything seen so far.
#[derive(Debug, Clone)]
pub(crate) struct Ids {
    next: SiteId,
}

impl Ids {
    pub fn for_program(p: &Program) -> Self {
        Ids {
            next: p.max_site().map_or(0, |m| m + 1),
        }
    }

    pub fn fresh(&mut self) -> SiteId {
        let s = self.next;
        self.next += 1;
        s
    }
}

/// Collects the instructions of one macro together with their roles.
pub(crate) struct Emit<'a> {
    pub ids: &'a mut Ids,
    pub out: Vec<Instruction>,
    pub roles: Vec<(Role, SiteId)>,
}

impl<'a> Emit<'a> {
    pub fn new(ids: &'a mut Ids) -> Self {
        Emit {
            ids,
            out: Vec::new(),
            roles: Vec::new(),
        }
    }

    pub fn push(&mut self, role: Role, op: Op) -> SiteId {
        let s = self.ids.fresh();
        self.push_with(role, s, op);
        s
    }

    pub fn push_with(&mut self, role: Role, site: SiteId, op: Op) {
        self.out.push(Instruction::new(site, op));
        self.roles.push((role, site));
    }
}

pub(crate) fn alu(
    op: crate::mir::AluOp,
    dst: Reg,
    a: impl Into<Operand>,
    b: impl Into<Operand>,
) -> Op {
    Op::Alu {
        op,
        dst,
        a: a.into(),
        b: b.into(),
    }
}

pub(crate) fn imm(v: u64) -> Operand {
    Operand::Imm(v)
}

/// Scratch registers for one macro: dead GPRs first, then live ones that
/// get spilled to dedicated frame slots around the macro.
pub(crate) struct ScratchPlan {
    pub regs: Vec<Reg>,
    pub spilled: Vec<(Reg, u64)>,
}

/// Per-function spill slots, one per general register.
#[derive(Default)]
pub(crate) struct SpillSlots {
    slots: BTreeMap<Reg, u64>,
    pub new_slots: BTreeSet<u32>,
}

impl SpillSlots {
    fn offset(&mut self, f: &mut Function, r: Reg) -> u64 {
        if let Some(o) = self.slots.get(&r) {
            return *o;
        }
        let s = f.add_slot(8);
        self.new_slots.insert(s.id);
        self.slots.insert(r, s.offset);
        s.offset
    }
}

pub(crate) fn pick_scratch(
    live_after: RegSet,
    op: &Op,
    n: usize,
    func: &mut Function,
    spills: &mut SpillSlots,
) -> ScratchPlan {
    let mut busy = RegSet::of(op.uses());
    if let Some(d) = op.def() {
        busy.insert(d);
    }
    let gprs = (0..16).map(Reg::gpr);
    let mut regs: Vec<Reg> = gprs
        .clone()
        .filter(|r| !busy.contains(*r) && !live_after.contains(*r))
        .take(n)
        .collect();
    let mut spilled = Vec::new();
    if regs.len() < n {
        for r in gprs
            .rev()
            .filter(|r| !busy.contains(*r) && live_after.contains(*r))
        {
            if regs.len() == n {
                break;
            }
            regs.push(r);
            spilled.push((r, spills.offset(func, r)));
        }
    }
    assert_eq!(regs.len(), n, "not enough scratch registers");
    ScratchPlan { regs, spilled }
}

/// Wraps macro instructions with spill stores and reloads when needed.
pub(crate) fn wrap_spills(
    plan: &ScratchPlan,
    body: &mut Emit<'_>,
    inner: Vec<Instruction>,
    roles: Vec<(Role, SiteId)>,
) {
    for &(r, off) in &plan.spilled {
        body.push(
            Role::Spill,
            Op::Store {
                mem: MemOperand::sp(off as i64),
                src: Operand::Reg(r),
            },
        );
    }
    body.out.extend(inner);
    body.roles.extend(roles);
    for &(r, off) in &plan.spilled {
        body.push(
            Role::Reload,
            Op::Load {
                dst: r,
                mem: MemOperand::sp(off as i64),
            },
        );
    }
}

/// Classification of an access by the region its base points to.
pub(crate) fn stack_cell(m: &MemOperand) -> Option<(u64, u64)> {
    if m.base != crate::mir::Base::Sp || m.offset < 0 {
        return None;
    }
    let off = m.offset as u64;
    Some((off & !7, off & 7))
}

/// Per-instruction liveness of `f` keyed by (block, index).
pub(crate) fn live_after(f: &Function) -> Vec<Vec<RegSet>> {
    let lv = Liveness::new(f);
    (0..f.blocks.len())
        .map(|b| {
            (0..f.blocks[b].instrs.len())
                .map(|k| lv.after(b, k))
                .collect()
        })
        .collect()
}

/// Inserts zero-initialisation of nonce slots at function entry, adding a
/// fresh entry block when the current one is a loop target.
pub(crate) fn init_at_entry(f: &mut Function, ids: &mut Ids, prologue: Vec<Op>) -> Vec<SiteId> {
    if prologue.is_empty() {
        return vec![];
    }
    let entry_is_target = (0..f.blocks.len()).any(|b| f.successors(b).contains(&0));
    let instrs: Vec<Instruction> = prologue
        .into_iter()
        .map(|op| Instruction::new(ids.fresh(), op))
        .collect();
    let sites = instrs.iter().map(|i| i.site).collect();
    if entry_is_target {
        let mut label = "__mit_entry".to_string();
        while f.block_index(&label).is_some() {
            label.push('_');
        }
        f.blocks.insert(0, Block { label, instrs });
    } else {
        let b = &mut f.blocks[0].instrs;
        let tail = std::mem::take(b);
        *b = instrs;
        b.extend(tail);
    }
    sites
}

/// Builds the start-up routine: fills the random nonce table and seeds
/// the variant's lanes, preserving every register and the flags.
pub(crate) fn init_function(
    layout: &Layout,
    variant: Option<MaskVariant>,
    ids: &mut Ids,
) -> Function {
    use crate::mir::AluOp::*;
    use crate::mir::Cond;
    let g = Reg::gpr;
    let rb = layout.random_nonce_base();
    let mut f = Function {
        name: INIT_FUNCTION.into(),
        slots: (0..4)
            .map(|i| crate::mir::StackSlot {
                id: i,
                offset: 8 * i as u64,
                size: 8,
            })
            .collect(),
        blocks: Vec::new(),
    };
    let mut e = |op: Op| Instruction::new(ids.fresh(), op);
    let st = |off: i64, r: Reg| Op::Store {
        mem: MemOperand::sp(off),
        src: Operand::Reg(r),
    };
    let ld = |r: Reg, off: i64| Op::Load {
        dst: r,
        mem: MemOperand::sp(off),
    };
    let entry = vec![
        e(st(0, g(0))),
        e(st(8, g(1))),
        e(st(16, g(2))),
        e(Op::SaveFlags { dst: g(0) }),
        e(st(24, g(0))),
        e(Op::Mov {
            dst: g(0),
            src: imm(rb),
        }),
        e(Op::Mov {
            dst: g(1),
            src: imm(0),
        }),
    ];
    let fill = vec![
        e(Op::Rdrand { dst: g(2) }),
        e(Op::Store {
            mem: MemOperand::reg(g(0), 0),
            src: Operand::Reg(g(2)),
        }),
        e(alu(Add, g(0), g(0), imm(8))),
        e(alu(Add, g(1), g(1), imm(1))),
        e(Op::Cmp {
            a: Operand::Reg(g(1)),
            b: imm(crate::noncebuf::RANDOM_NONCE_ENTRIES),
        }),
        e(Op::BrCond {
            cond: Cond::B,
            taken: "fill".into(),
            not_taken: "seed".into(),
        }),
    ];
    let mut seed = Vec::new();
    let lanes: Vec<Reg> = match variant {
        Some(MaskVariant::Aes) => vec![Reg::lane(14, false), Reg::lane(15, false)],
        Some(MaskVariant::Xs) => vec![Reg::lane(13, false), Reg::lane(13, true)],
        _ => vec![],
    };
    for l in lanes {
        seed.push(e(Op::Rdrand { dst: l }));
    }
    seed.extend([
        e(ld(g(0), 24)),
        e(Op::RestoreFlags { src: g(0) }),
        e(ld(g(0), 0)),
        e(ld(g(1), 8)),
        e(ld(g(2), 16)),
        e(Op::Ret),
    ]);
    f.blocks = vec![
        Block {
            label: "entry".into(),
            instrs: entry,
        },
        Block {
            label: "fill".into(),
            instrs: fill,
        },
        Block {
            label: "seed".into(),
            instrs: seed,
        },
    ];
    f
}

/// Adds the init routine and calls it first thing in the entry function.
pub(crate) fn install_init(
    p: &mut Program,
    layout: &Layout,
    variant: Option<MaskVariant>,
    ids: &mut Ids,
) {
    if p.function(INIT_FUNCTION).is_some() {
        return;
    }
    let f = init_function(layout, variant, ids);
    p.functions.push(f);
    let entry = p.entry.clone();
    let site = ids.fresh();
    let ef = p.function_mut(&entry).expect("entry exists");
    let call = Op::Call {
        func: INIT_FUNCTION.into(),
    };
    let entry_is_target = (0..ef.blocks.len()).any(|b| ef.successors(b).contains(&0));
    if entry_is_target {
        let mut label = "__mit_start".to_string();
        while ef.block_index(&label).is_some() {
            label.push('_');
        }
        ef.blocks.insert(
            0,
            Block {
                label,
                instrs: vec![Instruction::new(site, call)],
            },
        );
    } else {
        ef.blocks[0].instrs.insert(0, Instruction::new(site, call));
    }
}

/// Checks that the program does not already use `lanes`; uses are renamed
/// to free low lanes when possible.
pub(crate) fn evict_lanes(p: &mut Program, lanes: &[Reg]) -> Result<(), TransformError> {
    let used: BTreeSet<Reg> = p
        .instructions()
        .flat_map(|i| i.op.uses().into_iter().chain(i.op.def()))
        .filter(|r| r.is_lane())
        .collect();
    let conflicts: Vec<Reg> = lanes.iter().copied().filter(|l| used.contains(l)).collect();
    if conflicts.is_empty() {
        return Ok(());
    }
    let mut free = (0..8)
        .flat_map(|v| [Reg::lane(v, false), Reg::lane(v, true)])
        .filter(|l| !used.contains(l));
    let mut rename = BTreeMap::new();
    for c in conflicts {
        let Some(to) = free.next() else {
            let site = p
                .instructions()
                .find(|i| i.op.uses().contains(&c) || i.op.def() == Some(c))
                .map_or(0, |i| i.site);
            return Err(TransformError::LaneConflict {
                lane: c.to_string(),
                site,
            });
        };
        rename.insert(c, to);
    }
    for f in &mut p.functions {
        for b in &mut f.blocks {
            for i in &mut b.instrs {
                rename_regs(&mut i.op, &rename);
            }
        }
    }
    Ok(())
}

fn rename_regs(op: &mut Op, map: &BTreeMap<Reg, Reg>) {
    let r = |x: &mut Reg| {
        if let Some(n) = map.get(x) {
            *x = *n;
        }
    };
    let o = |x: &mut Operand| {
        if let Operand::Reg(reg) = x {
            if let Some(n) = map.get(reg) {
                *reg = *n;
            }
        }
    };
    let m = |x: &mut MemOperand| {
        if let crate::mir::Base::Reg(reg) = &mut x.base {
            if let Some(n) = map.get(reg) {
                *reg = *n;
            }
        }
    };
    match op {
        Op::Load { dst, mem } => {
            r(dst);
            m(mem)
        }
        Op::Store { mem, src } => {
            m(mem);
            o(src)
        }
        Op::Mov { dst, src } | Op::HeapAlloc { dst, size: src } => {
            r(dst);
            o(src)
        }
        Op::Alu { dst, a, b, .. } | Op::Select { dst, a, b, .. } => {
            r(dst);
            o(a);
            o(b)
        }
        Op::Cmp { a, b } | Op::Test { a, b } => {
            o(a);
            o(b)
        }
        Op::SaveFlags { dst } | Op::Rdrand { dst } => r(dst),
        Op::RestoreFlags { src } => r(src),
        Op::PrfEnc { dst, key } => {
            r(dst);
            r(key)
        }
        Op::TaintLabel { mem, .. } => m(mem),
        _ => {}
    }
}

/// Static diversion of `.heap` images and secrets for obfuscated cells.
pub(crate) fn divert_images(p: &mut Program, cells: &BTreeSet<u64>, layout: &Layout) {
    use crate::mir::{Image, ImageKind};
    let mut extra = Vec::new();
    for img in &mut p.images {
        if img.kind != ImageKind::Heap {
            continue;
        }
        for (addr, word) in divert_bytes(img.addr, &mut img.bytes, cells, layout) {
            extra.push(Image {
                kind: ImageKind::Data,
                addr,
                bytes: word,
            });
        }
    }
    let sb = SecureBuffer::new(layout);
    let mut secret_cells = BTreeSet::new();
    for s in &p.secrets {
        if layout.region_of(s.addr) != Some(Region::Heap) {
            continue;
        }
        for &c in cells.range((s.addr & !7)..s.end()) {
            if diverts(c) {
                secret_cells.insert(sb.entry(c));
            }
        }
    }
    p.images.extend(
        extra
            .into_iter()
            .filter(|i| i.bytes.iter().any(|&b| b != 0)),
    );
    for e in secret_cells {
        p.secrets.push(Span { addr: e, len: 8 });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::interp::{run, RunConfig};
    use crate::mir::parse_program;

    #[test]
    fn init_routine_fills_table_and_preserves_state() {
        let layout = Layout::default();
        let mut p =
            parse_program("func main {\ne: cmp 1, 2\nmov g0, 5\nmov g2, 9\nhalt\n}").unwrap();
        let mut ids = Ids::for_program(&p);
        install_init(&mut p, &layout, Some(MaskVariant::Xs), &mut ids);
        assert!(crate::mir::validate(&p).is_empty());
        let o = run(&p, &Inputs::default(), &RunConfig::default(), None).unwrap();
        assert_eq!(o.state.reg(Reg::gpr(0)), 5);
        assert_eq!(o.state.reg(Reg::gpr(2)), 9);
        assert_ne!(o.state.reg(Reg::lane(13, false)), 0);
        let rb = layout.random_nonce_base();
        let entries: BTreeSet<u64> = (0..1024)
            .map(|i| o.state.memory.read(rb + 8 * i, 8))
            .collect();
        assert!(entries.len() > 1000);
    }

    #[test]
    fn reserved_lane_uses_are_renamed() {
        let mut p = parse_program("func main {\ne: mov v14L, 3\nmov g0, v14L\nhalt\n}").unwrap();
        evict_lanes(&mut p, &MaskVariant::Aes.reserved_lanes()).unwrap();
        let text = crate::mir::print_program(&p);
        assert!(!text.contains("v14L"), "{text}");
        let o = run(&p, &Inputs::default(), &RunConfig::default(), None).unwrap();
        assert_eq!(o.state.reg(Reg::gpr(0)), 3);
    }

    #[test]
    fn diverted_inputs_move_to_secure_buffer() {
        let layout = Layout::default();
        let h = layout.heap_base;
        let even = (0..64).map(|k| h + 8 * k).find(|&c| diverts(c)).unwrap();
        let map = MitigationMap {
            obfuscated_heap: vec![HeapRegion { base: even, len: 8 }],
            ..Default::default()
        };
        let inputs = Inputs::default().with_memory(even, vec![1, 2, 3, 4, 5, 6, 7, 8]);
        let a = map.adapt_inputs(&inputs, &layout);
        assert_eq!(a.memory[0].1, vec![0; 8]);
        assert_eq!(
            a.memory[1],
            (
                SecureBuffer::new(&layout).entry(even),
                vec![1, 2, 3, 4, 5, 6, 7, 8]
            )
        );
    }
}
