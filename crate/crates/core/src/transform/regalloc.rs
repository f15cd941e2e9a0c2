//! Promotion of sensitive 8-byte stack slots into vector lanes, so their
//! values never reach encrypted memory.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{evict_lanes, MaskVariant, MitigationMap, Promotion, INIT_FUNCTION};
use crate::error::TransformError;
use crate::mir::{Base, Cfg, Function, Op, Operand, Program, Reg, SiteId};
use crate::taint::SensitiveSiteSet;

/// Lanes available for promotion: `v8L..v15H`.
pub const LANE_CAPACITY: usize = 16;

/// Blocks (in reverse postorder) where each sensitive slot is accessed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StackUsage {
    pub func: String,
    pub slots: BTreeMap<u32, Vec<String>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StackOpt {
    pub slot: u32,
    pub count: usize,
}

fn slot_of_access(f: &Function, op: &Op) -> Option<u32> {
    let m = op.mem()?;
    if m.base != Base::Sp || m.offset < 0 {
        return None;
    }
    f.slot_at(m.offset as u64).map(|s| s.id)
}

pub fn build_stack_usage(f: &Function, sensitive: &BTreeSet<u32>) -> StackUsage {
    let cfg = Cfg::new(f);
    let mut slots: BTreeMap<u32, Vec<String>> = BTreeMap::new();
    for b in cfg.rpo() {
        let block = &f.blocks[b];
        for i in &block.instrs {
            if let Some(s) = slot_of_access(f, &i.op).filter(|s| sensitive.contains(s)) {
                let v = slots.entry(s).or_default();
                if v.last() != Some(&block.label) {
                    v.push(block.label.clone());
                }
            }
        }
    }
    StackUsage {
        func: f.name.clone(),
        slots,
    }
}

/// Slots ordered by descending block count, ties by ascending id, at most
/// `cap` of them.
pub fn select_stack_opt(usage: &StackUsage, cap: usize) -> Vec<StackOpt> {
    let mut v: Vec<StackOpt> = usage
        .slots
        .iter()
        .map(|(&slot, blocks)| StackOpt {
            slot,
            count: blocks.len(),
        })
        .collect();
    v.sort_by(|a, b| b.count.cmp(&a.count).then(a.slot.cmp(&b.slot)));
    v.truncate(cap);
    v
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FunctionAllocation {
    pub func: String,
    pub candidates: Vec<StackOpt>,
    pub promoted: BTreeMap<u32, Reg>,
    /// Sensitive slots left in memory, with the reason.
    pub residual: BTreeMap<u32, String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AllocationReport {
    pub functions: Vec<FunctionAllocation>,
}

fn call_graph(p: &Program) -> BTreeMap<&str, BTreeSet<&str>> {
    p.functions
        .iter()
        .map(|f| {
            let callees = f
                .instructions()
                .filter_map(|i| match &i.op {
                    Op::Call { func } => Some(func.as_str()),
                    _ => None,
                })
                .collect();
            (f.name.as_str(), callees)
        })
        .collect()
}

fn reaches<'a>(g: &BTreeMap<&'a str, BTreeSet<&'a str>>, from: &'a str, to: &str) -> bool {
    let mut seen = BTreeSet::new();
    let mut work: Vec<&str> = g.get(from).into_iter().flatten().copied().collect();
    while let Some(f) = work.pop() {
        if f == to {
            return true;
        }
        if seen.insert(f) {
            work.extend(g.get(f).into_iter().flatten().copied());
        }
    }
    false
}

/// Callees before callers.
fn bottom_up(p: &Program) -> Vec<String> {
    let g = call_graph(p);
    let mut order = Vec::new();
    let mut seen = BTreeSet::new();
    fn visit<'a>(
        f: &'a str,
        g: &BTreeMap<&'a str, BTreeSet<&'a str>>,
        seen: &mut BTreeSet<&'a str>,
        order: &mut Vec<String>,
    ) {
        if !seen.insert(f) {
            return;
        }
        for c in g.get(f).into_iter().flatten() {
            visit(c, g, seen, order);
        }
        order.push(f.to_string());
    }
    for f in &p.functions {
        visit(&f.name, &g, &mut seen, &mut order);
    }
    order
}

/// Lanes each function may overwrite, including through its callees.
pub fn clobbered_lanes(p: &Program) -> BTreeMap<String, BTreeSet<Reg>> {
    let mut out: BTreeMap<String, BTreeSet<Reg>> = BTreeMap::new();
    let g = call_graph(p);
    for name in bottom_up(p) {
        let f = p.function(&name).unwrap();
        let mut set: BTreeSet<Reg> = f
            .instructions()
            .filter_map(|i| i.op.def())
            .filter(|r| r.is_lane())
            .collect();
        for c in g.get(name.as_str()).into_iter().flatten() {
            if let Some(s) = out.get(*c) {
                set.extend(s.iter().copied());
            }
        }
        out.insert(name, set);
    }
    out
}

/// Fixed-size bitset over candidate slots.
#[derive(Debug, Clone, PartialEq, Eq)]
struct Bits(Vec<u64>);

impl Bits {
    fn new(n: usize) -> Self {
        Bits(vec![0; n.div_ceil(64)])
    }

    fn get(&self, i: usize) -> bool {
        self.0[i / 64] >> (i % 64) & 1 == 1
    }

    fn set(&mut self, i: usize, on: bool) {
        if on {
            self.0[i / 64] |= 1 << (i % 64);
        } else {
            self.0[i / 64] &= !(1 << (i % 64));
        }
    }

    fn union_with(&mut self, o: &Bits) {
        for (a, b) in self.0.iter_mut().zip(&o.0) {
            *a |= b;
        }
    }

    fn ones(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().enumerate().flat_map(|(w, &x)| {
            (0..64)
                .filter(move |b| x >> b & 1 == 1)
                .map(move |b| w * 64 + b)
        })
    }
}

/// Backward liveness of the candidate slots; returns the live set after
/// every instruction and the live set at function entry.
fn slot_liveness(f: &Function, cands: &[u32]) -> (Vec<Vec<Bits>>, Bits) {
    let index: BTreeMap<u32, usize> = cands.iter().enumerate().map(|(i, c)| (*c, i)).collect();
    let access = |op: &Op| -> Option<(usize, bool)> {
        let i = *index.get(&slot_of_access(f, op)?)?;
        Some((i, matches!(op, Op::Store { .. })))
    };
    let n = f.blocks.len();
    let empty = Bits::new(cands.len());
    let mut live_in = vec![empty.clone(); n];
    let mut after: Vec<Vec<Bits>> = f
        .blocks
        .iter()
        .map(|b| vec![empty.clone(); b.instrs.len()])
        .collect();
    loop {
        let mut changed = false;
        for b in (0..n).rev() {
            let mut cur = empty.clone();
            for s in f.successors(b) {
                cur.union_with(&live_in[s]);
            }
            for (k, ins) in f.blocks[b].instrs.iter().enumerate().rev() {
                after[b][k] = cur.clone();
                if let Some((i, is_def)) = access(&ins.op) {
                    cur.set(i, !is_def);
                }
            }
            if cur != live_in[b] {
                live_in[b] = cur;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    let entry = live_in.first().cloned().unwrap_or(empty);
    (after, entry)
}

fn uses_sp_value(f: &Function) -> bool {
    f.instructions().any(|i| match &i.op {
        Op::Mov { src, .. } | Op::Store { src, .. } | Op::HeapAlloc { size: src, .. } => {
            *src == Operand::Sp
        }
        Op::Alu { a, b, .. } | Op::Cmp { a, b } | Op::Test { a, b } | Op::Select { a, b, .. } => {
            *a == Operand::Sp || *b == Operand::Sp
        }
        _ => false,
    })
}

/// Promotes what fits into lanes and returns the rewritten program. Slots
/// that stay in memory are listed in the report for the masking pass.
pub fn allocate_rewrite(
    p: &Program,
    sites: &SensitiveSiteSet,
    variant: MaskVariant,
) -> Result<(Program, MitigationMap, AllocationReport), TransformError> {
    let mut out = p.clone();
    let reserved = variant.reserved_lanes();
    evict_lanes(&mut out, &reserved)?;
    let used: BTreeSet<Reg> = out
        .instructions()
        .flat_map(|i| i.op.uses().into_iter().chain(i.op.def()))
        .filter(|r| r.is_lane())
        .collect();
    let pool: Vec<Reg> = Reg::secret_lanes()
        .filter(|l| !reserved.contains(l) && !used.contains(l))
        .collect();
    let graph = call_graph(&out);
    let recursive: BTreeSet<String> = out
        .functions
        .iter()
        .filter(|f| reaches(&graph, &f.name, &f.name))
        .map(|f| f.name.clone())
        .collect();
    drop(graph);
    let mut map = MitigationMap {
        variant: Some(variant),
        original_max_site: p.max_site(),
        ..Default::default()
    };
    let mut report = AllocationReport::default();
    let mut lane_writes: BTreeMap<String, BTreeSet<Reg>> = BTreeMap::new();

    for name in bottom_up(&out) {
        let sensitive = sites.slots_of(&name);
        let fi = out.function_index(&name).unwrap();
        let f = &out.functions[fi];
        let usage = build_stack_usage(f, &sensitive);
        let order = select_stack_opt(&usage, usize::MAX);
        let mut alloc = FunctionAllocation {
            func: name.clone(),
            candidates: order.iter().copied().take(LANE_CAPACITY).collect(),
            ..Default::default()
        };
        let mut callee_lanes: BTreeSet<Reg> = BTreeSet::new();
        for i in f.instructions() {
            if let Op::Call { func } = &i.op {
                callee_lanes.extend(lane_writes.get(func).into_iter().flatten().copied());
            }
        }

        let whole_function = if name == INIT_FUNCTION {
            Some("runtime")
        } else if recursive.contains(&name) {
            Some("recursive")
        } else if uses_sp_value(f) {
            Some("address_taken")
        } else {
            None
        };
        let mut cands = Vec::new();
        for o in &order {
            let slot = f.slots.iter().find(|s| s.id == o.slot).unwrap();
            let reason = whole_function.or_else(|| {
                let full = slot.size == 8
                    && f.instructions().all(|i| match slot_of_access(f, &i.op) {
                        Some(s) if s == slot.id => {
                            let m = i.op.mem().unwrap();
                            matches!(i.op, Op::Load { .. } | Op::Store { .. })
                                && m.width == 8
                                && m.offset as u64 == slot.offset
                        }
                        _ => true,
                    });
                (!full).then_some("partial_width")
            });
            match reason {
                Some(r) => {
                    alloc.residual.insert(o.slot, r.into());
                }
                None => cands.push(o.slot),
            }
        }
        let (after, entry_live) = slot_liveness(f, &cands);
        let nc = cands.len();
        let mut interfere = vec![Bits::new(nc); nc];
        let mut across_call = Bits::new(nc);
        let mut live_blocks = vec![Vec::new(); nc];
        let index: BTreeMap<u32, usize> = cands.iter().enumerate().map(|(i, c)| (*c, i)).collect();
        for (b, block) in f.blocks.iter().enumerate() {
            for (k, ins) in block.instrs.iter().enumerate() {
                let live = &after[b][k];
                let def = match (&ins.op, slot_of_access(f, &ins.op)) {
                    (Op::Store { .. }, Some(s)) => index.get(&s).copied(),
                    _ => None,
                };
                if let Some(i) = def {
                    for j in live.ones().filter(|&j| j != i) {
                        interfere[i].set(j, true);
                        interfere[j].set(i, true);
                    }
                }
                if matches!(ins.op, Op::Call { .. }) {
                    across_call.union_with(live);
                }
                for i in live.ones().chain(def) {
                    let lb: &mut Vec<usize> = &mut live_blocks[i];
                    if lb.last() != Some(&b) {
                        lb.push(b);
                    }
                }
            }
        }
        let rpo = Cfg::new(f).rpo();
        let mut lane_of: Vec<Option<Reg>> = vec![None; nc];
        for i in 0..nc {
            if entry_live.get(i) {
                alloc.residual.insert(cands[i], "live_in".into());
                continue;
            }
            let taken: BTreeSet<Reg> = interfere[i].ones().filter_map(|j| lane_of[j]).collect();
            let lane = pool
                .iter()
                .copied()
                .find(|l| !taken.contains(l) && !(across_call.get(i) && callee_lanes.contains(l)));
            match lane {
                Some(l) => lane_of[i] = Some(l),
                None => {
                    alloc.residual.insert(cands[i], "no_lane".into());
                }
            }
        }

        let f = &mut out.functions[fi];
        let slot_offsets: BTreeMap<u32, u64> = f.slots.iter().map(|s| (s.id, s.offset)).collect();
        let mut rewritten: BTreeMap<u32, Vec<SiteId>> = BTreeMap::new();
        for block in &mut f.blocks {
            for ins in &mut block.instrs {
                let Some(m) = ins.op.mem().copied() else {
                    continue;
                };
                if m.base != Base::Sp {
                    continue;
                }
                let Some((i, lane)) = cands.iter().enumerate().find_map(|(i, c)| {
                    (slot_offsets[c] as i64 == m.offset)
                        .then_some(i)
                        .and_then(|i| lane_of[i].map(|l| (i, l)))
                }) else {
                    continue;
                };
                ins.op = match &ins.op {
                    Op::Store { src, .. } => Op::Mov {
                        dst: lane,
                        src: *src,
                    },
                    Op::Load { dst, .. } => Op::Mov {
                        dst: *dst,
                        src: lane.into(),
                    },
                    _ => continue,
                };
                rewritten.entry(cands[i]).or_default().push(ins.site);
            }
        }
        let mut writes: BTreeSet<Reg> = callee_lanes;
        for (i, lane) in lane_of.iter().enumerate() {
            let Some(lane) = *lane else { continue };
            writes.insert(lane);
            alloc.promoted.insert(cands[i], lane);
            let order_of = |b: &usize| rpo.iter().position(|x| x == b).unwrap_or(usize::MAX);
            let mut blocks = live_blocks[i].clone();
            blocks.sort_by_key(order_of);
            map.promotions.push(Promotion {
                func: name.clone(),
                slot: cands[i],
                lane,
                live_blocks: blocks.iter().map(|b| f.blocks[*b].label.clone()).collect(),
                sites: rewritten.remove(&cands[i]).unwrap_or_default(),
            });
            map.clobbered.insert(lane);
        }
        lane_writes.insert(name.clone(), writes);
        report.functions.push(alloc);
    }
    Ok((out, map, report))
}
