//! Control-flow graph queries: orderings, postdominators, register liveness.

use super::*;

/// Successor / predecessor lists of one function.
#[derive(Debug, Clone)]
pub struct Cfg {
    pub succs: Vec<Vec<usize>>,
    pub preds: Vec<Vec<usize>>,
}

impl Cfg {
    pub fn new(f: &Function) -> Self {
        let n = f.blocks.len();
        let succs: Vec<Vec<usize>> = (0..n).map(|b| f.successors(b)).collect();
        let mut preds = vec![Vec::new(); n];
        for (b, ss) in succs.iter().enumerate() {
            for &s in ss {
                preds[s].push(b);
            }
        }
        Cfg { succs, preds }
    }

    pub fn len(&self) -> usize {
        self.succs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.succs.is_empty()
    }

    /// Reverse postorder of the blocks reachable from the entry block.
    pub fn rpo(&self) -> Vec<usize> {
        if self.is_empty() {
            return vec![];
        }
        let mut post = Vec::new();
        let mut seen = vec![false; self.len()];
        let mut stack = vec![(0usize, 0usize)];
        seen[0] = true;
        while let Some((b, k)) = stack.pop() {
            if k < self.succs[b].len() {
                stack.push((b, k + 1));
                let s = self.succs[b][k];
                if !seen[s] {
                    seen[s] = true;
                    stack.push((s, 0));
                }
            } else {
                post.push(b);
            }
        }
        post.reverse();
        post
    }

    /// Immediate postdominator of every block. `None` means the virtual exit
    /// (or that the block cannot reach an exit).
    pub fn ipdom(&self) -> Vec<Option<usize>> {
        let n = self.len();
        let exit = n;
        // Reverse graph: node -> its "predecessors" in reverse = successors.
        let rsucc = |v: usize| -> Vec<usize> {
            if v == exit {
                (0..n).filter(|&b| self.succs[b].is_empty()).collect()
            } else {
                self.preds[v].clone()
            }
        };
        let rpred = |v: usize| -> Vec<usize> {
            if self.succs[v].is_empty() {
                vec![exit]
            } else {
                self.succs[v].clone()
            }
        };
        // Postorder of the reverse graph from the exit.
        let mut order = Vec::new();
        let mut seen = vec![false; n + 1];
        let mut stack = vec![(exit, rsucc(exit), 0usize)];
        seen[exit] = true;
        while let Some((v, ss, k)) = stack.pop() {
            if k < ss.len() {
                let s = ss[k];
                stack.push((v, ss, k + 1));
                if !seen[s] {
                    seen[s] = true;
                    stack.push((s, rsucc(s), 0));
                }
            } else {
                order.push(v);
            }
        }
        let mut num = vec![usize::MAX; n + 1];
        for (i, &v) in order.iter().enumerate() {
            num[v] = i;
        }
        let mut idom: Vec<Option<usize>> = vec![None; n + 1];
        idom[exit] = Some(exit);
        let intersect = |idom: &Vec<Option<usize>>, mut a: usize, mut b: usize| {
            while a != b {
                while num[a] < num[b] {
                    a = idom[a].unwrap();
                }
                while num[b] < num[a] {
                    b = idom[b].unwrap();
                }
            }
            a
        };
        let mut changed = true;
        while changed {
            changed = false;
            for &v in order.iter().rev() {
                if v == exit {
                    continue;
                }
                let mut new: Option<usize> = None;
                for p in rpred(v) {
                    if idom[p].is_some() {
                        new = Some(match new {
                            None => p,
                            Some(q) => intersect(&idom, p, q),
                        });
                    }
                }
                if new.is_some() && idom[v] != new {
                    idom[v] = new;
                    changed = true;
                }
            }
        }
        (0..n).map(|b| idom[b].filter(|&d| d != exit)).collect()
    }
}

/// A set of registers as a bitmask over [`Reg::index`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct RegSet(pub u64);

impl RegSet {
    pub const EMPTY: RegSet = RegSet(0);

    pub fn all() -> RegSet {
        RegSet((1u64 << NUM_REGS) - 1)
    }

    pub fn of(regs: impl IntoIterator<Item = Reg>) -> RegSet {
        let mut s = RegSet::EMPTY;
        for r in regs {
            s.insert(r);
        }
        s
    }

    pub fn insert(&mut self, r: Reg) {
        self.0 |= 1 << r.index();
    }

    pub fn remove(&mut self, r: Reg) {
        self.0 &= !(1 << r.index());
    }

    pub fn contains(&self, r: Reg) -> bool {
        self.0 & (1 << r.index()) != 0
    }

    pub fn union(self, o: RegSet) -> RegSet {
        RegSet(self.0 | o.0)
    }

    pub fn iter(self) -> impl Iterator<Item = Reg> {
        Reg::all().filter(move |r| self.contains(*r))
    }
}

/// Registers an instruction reads, including the flags register and the
/// conservative call/return conventions (callees and callers may read
/// anything).
pub fn reads(op: &Op) -> RegSet {
    let mut s = RegSet::of(op.uses());
    match op {
        Op::BrCond { .. } | Op::Select { .. } | Op::SaveFlags { .. } => s.insert(Reg::FLAGS),
        Op::Call { .. } | Op::Ret => s = RegSet::all(),
        _ => {}
    }
    s
}

/// Registers an instruction overwrites for certain.
pub fn writes(op: &Op) -> RegSet {
    let mut s = RegSet::of(op.def());
    if op.sets_flags() {
        s.insert(Reg::FLAGS);
    }
    s
}

/// Per-instruction register liveness for one function.
#[derive(Debug, Clone)]
pub struct Liveness {
    pub live_in: Vec<RegSet>,
    pub live_out: Vec<RegSet>,
    /// `before[b][k]`: registers live immediately before instruction `k`.
    pub before: Vec<Vec<RegSet>>,
}

impl Liveness {
    pub fn new(f: &Function) -> Self {
        let cfg = Cfg::new(f);
        let n = f.blocks.len();
        let mut live_in = vec![RegSet::EMPTY; n];
        let mut live_out = vec![RegSet::EMPTY; n];
        let mut changed = true;
        while changed {
            changed = false;
            for b in (0..n).rev() {
                let out = cfg.succs[b]
                    .iter()
                    .fold(RegSet::EMPTY, |a, &s| a.union(live_in[s]));
                let mut cur = out;
                for i in f.blocks[b].instrs.iter().rev() {
                    cur = RegSet((cur.0 & !writes(&i.op).0) | reads(&i.op).0);
                }
                if out != live_out[b] || cur != live_in[b] {
                    live_out[b] = out;
                    live_in[b] = cur;
                    changed = true;
                }
            }
        }
        let before = (0..n)
            .map(|b| {
                let mut cur = live_out[b];
                let mut v: Vec<RegSet> = f.blocks[b]
                    .instrs
                    .iter()
                    .rev()
                    .map(|i| {
                        cur = RegSet((cur.0 & !writes(&i.op).0) | reads(&i.op).0);
                        cur
                    })
                    .collect();
                v.reverse();
                v
            })
            .collect();
        Liveness {
            live_in,
            live_out,
            before,
        }
    }

    /// Registers live immediately after instruction `k` of block `b`.
    pub fn after(&self, b: usize, k: usize) -> RegSet {
        self.before[b]
            .get(k + 1)
            .copied()
            .unwrap_or(self.live_out[b])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn diamond() -> Function {
        parse_program(
            "func f {
            a: cmp g0, 1
               br_cond eq, b, c
            b: mov g1, 1
               jmp d
            c: mov g1, 2
            d: store [g2], g1
               halt
            }",
        )
        .unwrap()
        .functions
        .remove(0)
    }

    #[test]
    fn rpo_and_postdominators_of_diamond() {
        let f = diamond();
        let cfg = Cfg::new(&f);
        let rpo = cfg.rpo();
        assert_eq!(rpo[0], 0);
        assert_eq!(*rpo.last().unwrap(), 3);
        assert_eq!(cfg.ipdom(), vec![Some(3), Some(3), Some(3), None]);
    }

    #[test]
    fn loop_postdominator_is_exit_block() {
        let f = parse_program(
            "func f {
            a: mov g0, 4
            l: sub g0, g0, 1
               br_cond ne, l, x
            x: halt
            }",
        )
        .unwrap()
        .functions
        .remove(0);
        assert_eq!(Cfg::new(&f).ipdom(), vec![Some(1), Some(2), None]);
    }

    #[test]
    fn liveness_tracks_uses_and_defs() {
        let f = diamond();
        let lv = Liveness::new(&f);
        let g = Reg::gpr;
        assert!(lv.live_in[0].contains(g(0)));
        assert!(lv.live_in[0].contains(g(2)));
        assert!(!lv.live_in[0].contains(g(1)));
        assert!(lv.live_in[3].contains(g(1)));
        // After the cmp, flags are live until the branch.
        assert!(lv.after(0, 0).contains(Reg::FLAGS));
        assert!(!lv.after(0, 1).contains(Reg::FLAGS));
    }
}
