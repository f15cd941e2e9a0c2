//! Dynamic taint tracking over the interpreter.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{ExecError, TransformError};
use crate::interp::{run, Inputs, MachineState, Observer, RunConfig, Step};
use crate::layout::{Layout, Region};
use crate::mir::{AluOp, Base, Cfg, Op, Operand, Program, Reg, SiteId, NUM_REGS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct HeapRegion {
    pub base: u64,
    pub len: u64,
}

/// Result of taint analysis: what the mitigation passes must protect.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SensitiveSiteSet {
    /// Fingerprint of the analysed program.
    #[serde(default)]
    pub program: u64,
    pub stores: BTreeSet<SiteId>,
    pub loads: BTreeSet<SiteId>,
    pub stack_slots: BTreeMap<String, BTreeSet<u32>>,
    pub heap: Vec<HeapRegion>,
    /// Sites that accessed a sensitive heap cell, whatever the value.
    #[serde(default)]
    pub heap_sites: BTreeSet<SiteId>,
}

fn cells_to_regions(cells: &BTreeSet<u64>) -> Vec<HeapRegion> {
    let mut out: Vec<HeapRegion> = Vec::new();
    for &c in cells {
        match out.last_mut() {
            Some(r) if r.base + r.len == c => r.len += 8,
            _ => out.push(HeapRegion { base: c, len: 8 }),
        }
    }
    out
}

impl SensitiveSiteSet {
    pub fn empty_for(p: &Program) -> Self {
        SensitiveSiteSet {
            program: p.fingerprint(),
            ..Default::default()
        }
    }

    /// Sensitive 8-byte heap cells.
    pub fn heap_cells(&self) -> BTreeSet<u64> {
        self.heap
            .iter()
            .flat_map(|r| (r.base..r.base + r.len).step_by(8))
            .collect()
    }

    pub fn is_heap_sensitive(&self, addr: u64) -> bool {
        self.heap
            .iter()
            .any(|r| addr >= r.base && addr < r.base + r.len)
    }

    pub fn slots_of(&self, func: &str) -> BTreeSet<u32> {
        self.stack_slots.get(func).cloned().unwrap_or_default()
    }

    pub fn is_empty(&self) -> bool {
        self.stores.is_empty()
            && self.loads.is_empty()
            && self.stack_slots.values().all(BTreeSet::is_empty)
            && self.heap.is_empty()
            && self.heap_sites.is_empty()
    }

    /// Every member site exists in `p`.
    pub fn check_against(&self, p: &Program) -> Result<(), TransformError> {
        let ids: HashSet<SiteId> = p.instructions().map(|i| i.site).collect();
        let missing: Vec<String> = self
            .stores
            .iter()
            .chain(&self.loads)
            .chain(&self.heap_sites)
            .filter(|s| !ids.contains(s))
            .map(|s| s.to_string())
            .collect();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(TransformError::SiteMismatch(missing.join(",")))
        }
    }
}

/// Componentwise union of two analyses of the same program.
pub fn merge_sites(
    a: &SensitiveSiteSet,
    b: &SensitiveSiteSet,
) -> Result<SensitiveSiteSet, TransformError> {
    if a.program != b.program && a.program != 0 && b.program != 0 {
        return Err(TransformError::SiteMismatch(format!(
            "program {:#x} vs {:#x}",
            a.program, b.program
        )));
    }
    let mut out = a.clone();
    out.program = if a.program != 0 { a.program } else { b.program };
    out.stores.extend(&b.stores);
    out.loads.extend(&b.loads);
    out.heap_sites.extend(&b.heap_sites);
    for (f, s) in &b.stack_slots {
        out.stack_slots.entry(f.clone()).or_default().extend(s);
    }
    let mut cells = a.heap_cells();
    cells.extend(b.heap_cells());
    out.heap = cells_to_regions(&cells);
    Ok(out)
}

#[derive(Debug, Clone, Copy)]
struct Scope {
    depth: usize,
    /// Block ending the scope; `None` means the frame's return.
    end: Option<usize>,
}

const ALL: u8 = 0xFF;

fn any(m: u8) -> u8 {
    if m == 0 {
        0
    } else {
        ALL
    }
}

fn low_bytes(w: u64) -> u8 {
    (((1u16 << w) - 1) & 0xFF) as u8
}

/// Every byte at or above the lowest labelled one (carries move upward).
fn smear_up(m: u8) -> u8 {
    if m == 0 {
        0
    } else {
        ALL << m.trailing_zeros()
    }
}

/// Byte labels of an ALU result. Bitwise ops act per byte, constant shifts
/// move labels by whole bytes (straddling two when unaligned), and
/// arithmetic carries spread labels toward the high end.
fn alu_labels(op: AluOp, ma: u8, mb: u8, b: &Operand) -> u8 {
    let k = match b {
        Operand::Imm(k) => Some(*k),
        _ => None,
    };
    match (op, k) {
        (AluOp::And, Some(k)) => {
            let keep = (0..8)
                .filter(|i| (k >> (8 * i)) & 0xFF != 0)
                .fold(0u8, |m, i| m | 1 << i);
            ma & keep
        }
        (AluOp::Xor | AluOp::Or | AluOp::And, _) => ma | mb,
        (AluOp::Shl, Some(k)) if k < 64 => {
            let (q, r) = (k / 8, k % 8);
            let m = (ma as u16) << q;
            (if r == 0 { m } else { m | m << 1 }) as u8
        }
        (AluOp::Shr, Some(k)) if k < 64 => {
            let (q, r) = (k / 8, k % 8);
            let m = ma >> q;
            if r == 0 {
                m
            } else {
                m | m >> 1
            }
        }
        (AluOp::Shl | AluOp::Shr, _) => any(ma | mb),
        (AluOp::Add | AluOp::Sub | AluOp::Mul, _) => smear_up(ma | mb),
    }
}

/// Shadow state plus bookkeeping of classified sites.
pub struct TaintTracker<'p> {
    prog: &'p Program,
    layout: Layout,
    ipdoms: Vec<Vec<Option<usize>>>,
    frames: Vec<u64>,
    /// Per-register byte labels: bit i marks byte i as secret-dependent.
    pub regs: [u8; NUM_REGS],
    pub mem: HashSet<u64>,
    control: Vec<Scope>,
    stores: BTreeSet<SiteId>,
    loads: BTreeSet<SiteId>,
    slots: BTreeMap<String, BTreeSet<u32>>,
    heap_cells: BTreeSet<u64>,
    site_cells: HashMap<SiteId, BTreeSet<u64>>,
}

impl<'p> TaintTracker<'p> {
    pub fn new(prog: &'p Program, layout: &Layout) -> Self {
        let mut mem = HashSet::new();
        for s in &prog.secrets {
            mem.extend(s.addr..s.addr + s.len);
        }
        TaintTracker {
            prog,
            layout: layout.clone(),
            ipdoms: prog.functions.iter().map(|f| Cfg::new(f).ipdom()).collect(),
            frames: prog.functions.iter().map(|f| f.frame_size()).collect(),
            regs: [0; NUM_REGS],
            mem,
            control: Vec::new(),
            stores: BTreeSet::new(),
            loads: BTreeSet::new(),
            slots: BTreeMap::new(),
            heap_cells: BTreeSet::new(),
            site_cells: HashMap::new(),
        }
    }

    fn reg(&self, r: Reg) -> u8 {
        self.regs[r.index()]
    }

    fn operand(&self, o: &Operand) -> u8 {
        match o {
            Operand::Reg(r) => self.reg(*r),
            _ => 0,
        }
    }

    fn bytes(&self, addr: u64, len: u64) -> u8 {
        (0..len)
            .filter(|i| self.mem.contains(&(addr + i)))
            .fold(0, |m, i| m | 1 << i)
    }

    fn set_bytes(&mut self, addr: u64, len: u64, mask: u8) {
        for i in 0..len {
            if mask >> i & 1 == 1 {
                self.mem.insert(addr + i);
            } else {
                self.mem.remove(&(addr + i));
            }
        }
    }

    fn in_output(&self, addr: u64, len: u64) -> bool {
        self.prog
            .output
            .is_some_and(|o| addr < o.end() && addr + len > o.addr)
    }

    /// Records the slot or heap cells hit by a sensitive access.
    fn classify(&mut self, info: &Step<'_>, addr: u64, width: u64) {
        match self.layout.region_of(addr) {
            Some(Region::Stack) => {
                let f = &self.prog.functions[info.func];
                let frame = self.frames[info.func];
                if addr >= info.sp && addr < info.sp + frame {
                    for off in [addr - info.sp, addr + width - 1 - info.sp] {
                        if let Some(s) = f.slot_at(off) {
                            self.slots.entry(f.name.clone()).or_default().insert(s.id);
                        }
                    }
                }
            }
            Some(Region::Heap) => {
                let first = addr & !7;
                let last = (addr + width - 1) & !7;
                self.heap_cells.insert(first);
                self.heap_cells.insert(last);
            }
            _ => {}
        }
    }

    fn note_heap_access(&mut self, site: SiteId, addr: u64, width: u64) {
        if self.layout.region_of(addr) == Some(Region::Heap) {
            let e = self.site_cells.entry(site).or_default();
            e.insert(addr & !7);
            e.insert((addr + width - 1) & !7);
        }
    }

    fn update_scopes(&mut self, info: &Step<'_>) {
        let Some((_, block, index)) = info.next else {
            self.control.clear();
            return;
        };
        let d = info.next_depth;
        let cut = self
            .control
            .iter()
            .position(|s| s.depth > d || (s.depth == d && index == 0 && s.end == Some(block)));
        if let Some(k) = cut {
            self.control.truncate(k);
        }
    }

    pub fn finish(self) -> SensitiveSiteSet {
        // Close under "shares a cell": a rewritten site must only touch
        // rewritten cells, and a rewritten cell must only be touched by
        // rewritten sites, or the two layouts would disagree.
        let mut cells = self.heap_cells.clone();
        let mut heap_sites = BTreeSet::new();
        loop {
            let before = (cells.len(), heap_sites.len());
            for (s, cs) in &self.site_cells {
                if cs.iter().any(|c| cells.contains(c)) {
                    heap_sites.insert(*s);
                    cells.extend(cs.iter().copied());
                }
            }
            if before == (cells.len(), heap_sites.len()) {
                break;
            }
        }
        SensitiveSiteSet {
            program: self.prog.fingerprint(),
            stores: self.stores,
            loads: self.loads,
            stack_slots: self.slots,
            heap: cells_to_regions(&cells),
            heap_sites,
        }
    }
}

impl Observer for TaintTracker<'_> {
    fn step(&mut self, info: &Step<'_>, _state: &MachineState) {
        let ctl = if self.control.is_empty() { 0 } else { ALL };
        let flags = Reg::FLAGS.index();
        let op = &info.instr.op;
        match op {
            Op::Load { dst, mem } => {
                let addr = info.addr.unwrap();
                let w = mem.width as u64;
                let base_t = match mem.base {
                    Base::Reg(r) => any(self.reg(r)),
                    Base::Sp => 0,
                };
                let data_t = self.bytes(addr, w);
                self.note_heap_access(info.instr.site, addr, w);
                if data_t != 0 {
                    self.loads.insert(info.instr.site);
                    self.classify(info, addr, w);
                }
                self.regs[dst.index()] = data_t | base_t | ctl;
            }
            Op::Store { mem, src } => {
                let addr = info.addr.unwrap();
                let w = mem.width as u64;
                let t = (self.operand(src) | ctl) & low_bytes(w);
                self.note_heap_access(info.instr.site, addr, w);
                if t != 0 && !self.in_output(addr, w) {
                    self.stores.insert(info.instr.site);
                    self.classify(info, addr, w);
                }
                self.set_bytes(addr, w, t);
            }
            Op::Mov { dst, src } => self.regs[dst.index()] = self.operand(src) | ctl,
            Op::Alu { op, dst, a, b } => {
                let (ma, mb) = (self.operand(a), self.operand(b));
                self.regs[dst.index()] = alu_labels(*op, ma, mb, b) | ctl;
                self.regs[flags] = any(ma | mb) | ctl;
            }
            Op::Cmp { a, b } | Op::Test { a, b } => {
                self.regs[flags] = any(self.operand(a) | self.operand(b)) | ctl;
            }
            Op::Select { dst, a, b, .. } => {
                self.regs[dst.index()] = self.operand(a) | self.operand(b) | self.regs[flags] | ctl;
            }
            Op::BrCond { .. } if self.regs[flags] != 0 => {
                let end = self.ipdoms[info.func][info.block];
                let depth = info.depth;
                if !self
                    .control
                    .iter()
                    .any(|s| s.depth == depth && s.end == end)
                {
                    self.control.push(Scope { depth, end });
                }
            }
            Op::SaveFlags { dst } => self.regs[dst.index()] = self.regs[flags] | ctl,
            Op::RestoreFlags { src } => self.regs[flags] = any(self.reg(*src)) | ctl,
            Op::Rdrand { dst } => self.regs[dst.index()] = ctl,
            Op::PrfEnc { dst, key } => {
                self.regs[dst.index()] = any(self.reg(*dst) | self.reg(*key)) | ctl
            }
            Op::HeapAlloc { dst, size } => self.regs[dst.index()] = any(self.operand(size)) | ctl,
            Op::TaintLabel { len, .. } => {
                let addr = info.addr.unwrap();
                for a in addr..addr + len {
                    self.mem.insert(a);
                }
            }
            _ => {}
        }
        self.update_scopes(info);
    }
}

/// One tainted execution.
pub fn run_tainted(
    p: &Program,
    inputs: &Inputs,
    cfg: &RunConfig,
) -> Result<SensitiveSiteSet, ExecError> {
    let mut t = TaintTracker::new(p, &cfg.layout);
    run(p, inputs, cfg, Some(&mut t))?;
    Ok(t.finish())
}

/// Union of tainted executions over several input sets.
pub fn run_tainted_many(
    p: &Program,
    inputs: &[Inputs],
    cfg: &RunConfig,
) -> Result<SensitiveSiteSet, ExecError> {
    let mut acc = SensitiveSiteSet::empty_for(p);
    for i in inputs {
        let s = run_tainted(p, i, cfg)?;
        acc = merge_sites(&acc, &s).expect("same program");
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mir::parse_program;

    const H: u64 = 0x1000_0000;

    fn sites(src: &str) -> SensitiveSiteSet {
        let p = parse_program(src).unwrap();
        run_tainted(&p, &Inputs::default(), &RunConfig::default()).unwrap()
    }

    #[test]
    fn raw_secret_store_is_sensitive() {
        let s = sites(
            ".secret 0x10000000, 8
            func f {
                .slot 0, 0, 8
                .slot 1, 8, 8
            e:  mov g1, 0x10000000
                load g2, [g1]
                store [sp], g2
                store [sp+8], 1
                halt
            }",
        );
        assert_eq!(s.loads, BTreeSet::from([1]));
        assert_eq!(s.stores, BTreeSet::from([2]));
        assert_eq!(s.stack_slots["f"], BTreeSet::from([0]));
        assert_eq!(s.heap, vec![HeapRegion { base: H, len: 8 }]);
        assert_eq!(s.heap_sites, BTreeSet::from([1]));
    }

    #[test]
    fn overwrite_with_public_data_clears_taint() {
        let s = sites(
            ".secret 0x10000000, 8
            func f {
                .slot 0, 0, 8
            e:  mov g1, 0x10000000
                load g2, [g1]
                mov g2, 0
                store [sp], g2
                load g3, [sp]
                halt
            }",
        );
        assert!(s.stores.is_empty());
        assert_eq!(s.loads, BTreeSet::from([1]));
    }

    #[test]
    fn control_dependence_taints_until_postdominator() {
        let s = sites(
            ".secret 0x10000000, 8
            func f {
                .slot 0, 0, 8
                .slot 1, 8, 8
            e:  mov g1, 0x10000000
                load g2, [g1]
                cmp g2, 0
                br_cond eq, a, b
            a:  mov g3, 1
                store [sp], g3
                jmp j
            b:  mov g3, 2
                store [sp], g3
            j:  store [sp+8], 5
                halt
            }",
        );
        // Secret is 0: branch a is taken; its store is control-tainted.
        assert!(s.stores.contains(&5));
        assert!(
            !s.stores.contains(&9),
            "join-block store is outside the scope"
        );
    }

    #[test]
    fn tainted_base_taints_loaded_value() {
        let s = sites(
            ".secret 0x10000000, 1
            .heap 0x10000000, 16, 0
            func f {
                .slot 0, 0, 8
            e:  mov g1, 0x10000000
                load g2, [g1]:1
                add g3, g1, g2
                load g4, [g3+8]
                store [sp], g4
                halt
            }",
        );
        assert!(s.stores.contains(&4));
    }

    #[test]
    fn taint_label_and_output_declassification() {
        let s = sites(
            ".output 0x40010000, 8
            func f {
                .slot 0, 0, 8
            e:  mov g1, 0x10000000
                store [g1], 7
                taint_label [g1], 8
                load g2, [g1]
                mov g5, 0x40010000
                store [g5], g2
                halt
            }",
        );
        assert_eq!(s.loads, BTreeSet::from([3]));
        assert!(s.stores.is_empty());
    }

    #[test]
    fn merge_is_union_and_checks_program() {
        let a = sites(".secret 0x10000000, 8\nfunc f {\n.slot 0, 0, 8\ne: mov g1, 0x10000000\nload g2, [g1]\nstore [sp], g2\nhalt\n}");
        let e = SensitiveSiteSet::empty_for(
            &parse_program(
                "func f {\ne: mov g1, 0x10000000\nload g2, [g1]\nstore [sp], g2\nhalt\n}",
            )
            .unwrap(),
        );
        assert_eq!(merge_sites(&a, &a).unwrap(), a);
        let z = SensitiveSiteSet {
            program: a.program,
            ..Default::default()
        };
        assert_eq!(merge_sites(&a, &z).unwrap(), a);
        assert!(merge_sites(&a, &e).is_err());
    }

    #[test]
    fn json_shape() {
        let a = sites(".secret 0x10000000, 8\nfunc f {\n.slot 0, 0, 8\ne: mov g1, 0x10000000\nload g2, [g1]\nstore [sp], g2\nhalt\n}");
        let v: serde_json::Value = serde_json::to_value(&a).unwrap();
        for k in ["stores", "loads", "stack_slots", "heap"] {
            assert!(v.get(k).is_some(), "{k}");
        }
        assert_eq!(v["heap"][0]["base"], H);
        let back: SensitiveSiteSet = serde_json::from_value(v).unwrap();
        assert_eq!(back, a);
    }

    #[test]
    fn byte_labels_follow_shifts_and_masks() {
        let imm = |k: u64| Operand::Imm(k);
        assert_eq!(alu_labels(AluOp::Shr, 0x0F, 0, &imm(32)), 0x00);
        assert_eq!(alu_labels(AluOp::Shr, 0xF0, 0, &imm(32)), 0x0F);
        assert_eq!(alu_labels(AluOp::Shl, 0x01, 0, &imm(4)), 0x03);
        assert_eq!(alu_labels(AluOp::And, 0xFF, 0, &imm(0xFFFF_FFFF)), 0x0F);
        assert_eq!(alu_labels(AluOp::Add, 0x04, 0, &imm(1)), 0xFC);
        assert_eq!(
            alu_labels(AluOp::Shr, 0x01, 0x01, &Operand::Reg(Reg::gpr(1))),
            0xFF
        );
    }

    #[test]
    fn narrow_load_of_clean_half_is_clean() {
        let p = parse_program(&format!(
            ".secret {H:#x}, 8\n.heap {H:#x}, 8\nfunc main {{\n.slot 0, 0, 8\n.slot 1, 8, 8\ne:\n mov g1, {H:#x}\n load g2, [g1]\n store [sp]:4, g2\n load g3, [sp+4]:4\n store [sp+8], g3\n halt\n}}"
        ))
        .unwrap();
        let s = run_tainted(&p, &Inputs::default(), &RunConfig::default()).unwrap();
        assert_eq!(s.stores.len(), 1);
        assert_eq!(s.stack_slots["main"], BTreeSet::from([0]));
    }
}
