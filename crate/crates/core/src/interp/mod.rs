//! Reference interpreter for MIR programs.

pub(crate) mod memory;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub(crate) use memory::mask;
pub use memory::Memory;

use crate::error::ExecError;
use crate::layout::Layout;
use crate::mir::{flag, AluOp, Base, Function, Instruction, Op, Operand, Program, Reg, NUM_REGS};

/// Per-class instruction weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostModel {
    pub mem: u64,
    pub rdrand: u64,
    pub prf: u64,
    pub other: u64,
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel {
            mem: 3,
            rdrand: 150,
            prf: 4,
            other: 1,
        }
    }
}

impl CostModel {
    pub fn weight(&self, op: &Op) -> u64 {
        match op {
            Op::Load { .. } | Op::Store { .. } => self.mem,
            Op::Rdrand { .. } => self.rdrand,
            Op::PrfEnc { .. } => self.prf,
            _ => self.other,
        }
    }

    pub fn check(&self) -> Result<(), String> {
        if [self.mem, self.rdrand, self.prf, self.other].contains(&0) {
            return Err("cost weights must be at least 1".into());
        }
        Ok(())
    }
}

pub const DEFAULT_STEP_LIMIT: u64 = 50_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub layout: Layout,
    pub cost: CostModel,
    pub step_limit: u64,
    /// Seed of the `rdrand` generator.
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            layout: Layout::default(),
            cost: CostModel::default(),
            step_limit: DEFAULT_STEP_LIMIT,
            seed: 0,
        }
    }
}

/// Initial bindings applied on top of the program's images.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Inputs {
    pub memory: Vec<(u64, Vec<u8>)>,
    pub registers: Vec<(Reg, u64)>,
}

impl Inputs {
    pub fn with_memory(mut self, addr: u64, bytes: Vec<u8>) -> Self {
        self.memory.push((addr, bytes));
        self
    }
}

/// Architectural state.
#[derive(Debug, Clone)]
pub struct MachineState {
    pub regs: [u64; NUM_REGS],
    pub memory: Memory,
    pub step: u64,
    pub cost: u64,
    pub heap_next: u64,
    rng: ChaCha8Rng,
}

impl MachineState {
    pub fn reg(&self, r: Reg) -> u64 {
        self.regs[r.index()]
    }

    pub fn flags(&self) -> u64 {
        self.regs[Reg::FLAGS.index()]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Event {
    Output { addr: u64, width: u8, value: u64 },
    Return { value: u64 },
}

/// The functional observables of one run.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FunctionalTrace {
    pub events: Vec<Event>,
}

impl FunctionalTrace {
    /// Final contents of every output byte, in address order.
    pub fn output_bytes(&self) -> std::collections::BTreeMap<u64, u8> {
        let mut m = std::collections::BTreeMap::new();
        for e in &self.events {
            if let Event::Output { addr, width, value } = e {
                for i in 0..*width as u64 {
                    m.insert(addr + i, (value >> (8 * i)) as u8);
                }
            }
        }
        m
    }
}

/// What the observer learns about an executed instruction.
#[derive(Debug, Clone, Copy)]
pub struct Step<'a> {
    /// Step counter after this instruction (the first instruction is step 1).
    pub step: u64,
    pub func: usize,
    pub block: usize,
    pub index: usize,
    pub instr: &'a Instruction,
    /// Frame base of the executing function.
    pub sp: u64,
    /// Call depth, 0 for the entry function.
    pub depth: usize,
    /// Effective address of a load/store/taint_label.
    pub addr: Option<u64>,
    /// Location of the next instruction, `None` when the run ended.
    pub next: Option<(usize, usize, usize)>,
    /// Depth of the next instruction.
    pub next_depth: usize,
}

/// Per-step callback, fired after every instruction.
pub trait Observer {
    fn start(&mut self, _state: &MachineState) {}
    fn step(&mut self, info: &Step<'_>, state: &MachineState);
}

impl<A: Observer, B: Observer> Observer for (A, B) {
    fn start(&mut self, s: &MachineState) {
        self.0.start(s);
        self.1.start(s);
    }
    fn step(&mut self, i: &Step<'_>, s: &MachineState) {
        self.0.step(i, s);
        self.1.step(i, s);
    }
}

impl<T: Observer + ?Sized> Observer for &mut T {
    fn start(&mut self, s: &MachineState) {
        (**self).start(s);
    }
    fn step(&mut self, i: &Step<'_>, s: &MachineState) {
        (**self).step(i, s);
    }
}

#[derive(Debug, Clone)]
pub struct Outcome {
    pub state: MachineState,
    pub trace: FunctionalTrace,
    pub cost: u64,
}

/// Branch targets and callees resolved to indices.
#[derive(Debug, Clone, Copy, Default)]
struct Resolved {
    a: usize,
    b: usize,
}

struct Compiled<'p> {
    prog: &'p Program,
    resolved: Vec<Vec<Vec<Resolved>>>,
    fallthrough: Vec<Vec<Option<usize>>>,
    frames: Vec<u64>,
}

impl<'p> Compiled<'p> {
    fn new(prog: &'p Program) -> Result<Self, ExecError> {
        let mut resolved = Vec::new();
        let mut fallthrough = Vec::new();
        for f in &prog.functions {
            let block = |l: &str| {
                f.block_index(l).ok_or_else(|| {
                    ExecError::Invalid(format!("unknown label `{l}` in `{}`", f.name))
                })
            };
            let mut fr = Vec::new();
            for b in &f.blocks {
                let mut br = Vec::new();
                for i in &b.instrs {
                    br.push(match &i.op {
                        Op::Jmp { target } => Resolved {
                            a: block(target)?,
                            b: 0,
                        },
                        Op::BrCond {
                            taken, not_taken, ..
                        } => Resolved {
                            a: block(taken)?,
                            b: block(not_taken)?,
                        },
                        Op::Call { func } => Resolved {
                            a: prog
                                .function_index(func)
                                .ok_or_else(|| ExecError::UnknownFunction(func.clone()))?,
                            b: 0,
                        },
                        _ => Resolved::default(),
                    });
                }
                fr.push(br);
            }
            resolved.push(fr);
            fallthrough.push(fall(f));
        }
        Ok(Compiled {
            prog,
            resolved,
            fallthrough,
            frames: prog.functions.iter().map(Function::frame_size).collect(),
        })
    }
}

fn fall(f: &Function) -> Vec<Option<usize>> {
    (0..f.blocks.len())
        .map(|b| (b + 1 < f.blocks.len()).then_some(b + 1))
        .collect()
}

#[derive(Debug, Clone, Copy)]
struct Frame {
    func: usize,
    block: usize,
    index: usize,
    sp: u64,
}

fn flags_of(op: AluOp, a: u64, b: u64, r: u64) -> u64 {
    let mut f = 0;
    if r == 0 {
        f |= flag::ZERO;
    }
    let (slt, ult) = match op {
        AluOp::Sub => (((a as i64) < (b as i64)), a < b),
        AluOp::Add => ((r as i64) < 0, r < a),
        _ => ((r as i64) < 0, false),
    };
    if slt {
        f |= flag::SIGNED_LESS;
    }
    if ult {
        f |= flag::UNSIGNED_LESS;
    }
    f
}

fn cmp_flags(a: u64, b: u64) -> u64 {
    let mut f = 0;
    if a == b {
        f |= flag::ZERO;
    }
    if (a as i64) < (b as i64) {
        f |= flag::SIGNED_LESS;
    }
    if a < b {
        f |= flag::UNSIGNED_LESS;
    }
    f
}

/// Keyed 64-bit mixing round used by `prf_enc`.
pub fn mix64(mut x: u64) -> u64 {
    x ^= x >> 30;
    x = x.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x ^= x >> 27;
    x = x.wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Builds the initial machine state: images, then inputs.
pub fn initial_state(
    p: &Program,
    inputs: &Inputs,
    cfg: &RunConfig,
) -> Result<MachineState, ExecError> {
    let layout = &cfg.layout;
    let mut memory = Memory::new(layout);
    let mut heap_next = layout.heap_base;
    let mut place = |addr: u64, bytes: &[u8], what: &str| -> Result<(), ExecError> {
        if !bytes.is_empty() && layout.contains_range(addr, bytes.len() as u64).is_none() {
            return Err(ExecError::Invalid(format!(
                "{what} at {addr:#x} outside declared memory"
            )));
        }
        memory.write_bytes(addr, bytes);
        if layout.region_of(addr) == Some(crate::layout::Region::Heap) {
            heap_next = heap_next.max((addr + bytes.len() as u64 + 7) & !7);
        }
        Ok(())
    };
    for img in &p.images {
        place(img.addr, &img.bytes, "image")?;
    }
    for (addr, bytes) in &inputs.memory {
        place(*addr, bytes, "input")?;
    }
    let mut regs = [0u64; NUM_REGS];
    for (r, v) in &inputs.registers {
        regs[r.index()] = if r.is_flags() { v & flag::MASK } else { *v };
    }
    Ok(MachineState {
        regs,
        memory,
        step: 0,
        cost: 0,
        heap_next,
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
    })
}

/// Runs `p` from its entry function until `halt` or the entry's `ret`.
pub fn run(
    p: &Program,
    inputs: &Inputs,
    cfg: &RunConfig,
    observer: Option<&mut dyn Observer>,
) -> Result<Outcome, ExecError> {
    let state = initial_state(p, inputs, cfg)?;
    run_from(p, state, cfg, observer)
}

pub fn run_from(
    p: &Program,
    mut st: MachineState,
    cfg: &RunConfig,
    mut observer: Option<&mut dyn Observer>,
) -> Result<Outcome, ExecError> {
    let code = Compiled::new(p)?;
    let layout = &cfg.layout;
    let entry = p
        .function_index(&p.entry)
        .ok_or_else(|| ExecError::UnknownFunction(p.entry.clone()))?;
    let entry_sp = layout.stack_top - code.frames[entry];
    if entry_sp < layout.stack_limit() {
        return Err(ExecError::StackOverflow(p.entry.clone()));
    }
    let mut cur = Frame {
        func: entry,
        block: 0,
        index: 0,
        sp: entry_sp,
    };
    let mut stack: Vec<Frame> = Vec::new();
    let mut trace = FunctionalTrace::default();
    if let Some(o) = observer.as_deref_mut() {
        o.start(&st);
    }
    let output = p.output;
    loop {
        let func = &code.prog.functions[cur.func];
        let block = &func.blocks[cur.block];
        if cur.index >= block.instrs.len() {
            // Empty tail: fall through.
            match code.fallthrough[cur.func][cur.block] {
                Some(n) => {
                    cur.block = n;
                    cur.index = 0;
                    continue;
                }
                None => {
                    return Err(ExecError::Invalid(format!(
                        "fell off the end of `{}`",
                        func.name
                    )))
                }
            }
        }
        if st.step >= cfg.step_limit {
            return Err(ExecError::StepLimit(cfg.step_limit));
        }
        let instr = &block.instrs[cur.index];
        let res = code.resolved[cur.func][cur.block][cur.index];
        let here = cur;
        let depth = stack.len();
        st.step += 1;
        st.cost += cfg.cost.weight(&instr.op);
        let val = |st: &MachineState, o: &Operand| match o {
            Operand::Reg(r) => st.regs[r.index()],
            Operand::Imm(v) => *v,
            Operand::Sp => here.sp,
        };
        let ea = |st: &MachineState, m: &crate::mir::MemOperand| {
            let base = match m.base {
                Base::Reg(r) => st.regs[r.index()],
                Base::Sp => here.sp,
            };
            base.wrapping_add(m.offset as u64)
        };
        let check = |st: &MachineState, addr: u64, len: u64| {
            if layout.contains_range(addr, len).is_none() {
                Err(ExecError::OutOfRegion {
                    step: st.step,
                    addr,
                    len,
                })
            } else {
                Ok(())
            }
        };
        let mut addr = None;
        let mut next = Some((cur.func, cur.block, cur.index + 1));
        let mut finished = false;
        match &instr.op {
            Op::Load { dst, mem } => {
                let a = ea(&st, mem);
                check(&st, a, mem.width as u64)?;
                addr = Some(a);
                st.regs[dst.index()] = st.memory.read(a, mem.width);
            }
            Op::Store { mem, src } => {
                let a = ea(&st, mem);
                check(&st, a, mem.width as u64)?;
                addr = Some(a);
                let v = val(&st, src) & mask(mem.width);
                st.memory.write(a, mem.width, v);
                if let Some(o) = output {
                    if a < o.end() && a + mem.width as u64 > o.addr {
                        trace.events.push(Event::Output {
                            addr: a,
                            width: mem.width,
                            value: v,
                        });
                    }
                }
            }
            Op::Mov { dst, src } => st.regs[dst.index()] = val(&st, src),
            Op::Alu { op, dst, a, b } => {
                let (x, y) = (val(&st, a), val(&st, b));
                let r = op.apply(x, y);
                st.regs[dst.index()] = r;
                st.regs[Reg::FLAGS.index()] = flags_of(*op, x, y, r);
            }
            Op::Cmp { a, b } => {
                st.regs[Reg::FLAGS.index()] = cmp_flags(val(&st, a), val(&st, b));
            }
            Op::Test { a, b } => {
                let r = val(&st, a) & val(&st, b);
                st.regs[Reg::FLAGS.index()] = flags_of(AluOp::And, 0, 0, r);
            }
            Op::Select { dst, cond, a, b } => {
                let v = if cond.holds(st.flags()) {
                    val(&st, a)
                } else {
                    val(&st, b)
                };
                st.regs[dst.index()] = v;
            }
            Op::Jmp { .. } => next = Some((cur.func, res.a, 0)),
            Op::BrCond { cond, .. } => {
                let t = if cond.holds(st.flags()) { res.a } else { res.b };
                next = Some((cur.func, t, 0));
            }
            Op::Call { func } => {
                let sp = cur.sp.checked_sub(code.frames[res.a]);
                match sp {
                    Some(sp) if sp >= layout.stack_limit() => {
                        let mut ret = cur;
                        ret.index += 1;
                        stack.push(ret);
                        next = Some((res.a, 0, 0));
                    }
                    _ => return Err(ExecError::StackOverflow(func.clone())),
                }
            }
            Op::Ret => match stack.last() {
                Some(f) => next = Some((f.func, f.block, f.index)),
                None => {
                    trace.events.push(Event::Return { value: st.regs[0] });
                    next = None;
                    finished = true;
                }
            },
            Op::Halt => {
                next = None;
                finished = true;
            }
            Op::SaveFlags { dst } => st.regs[dst.index()] = st.flags(),
            Op::RestoreFlags { src } => {
                st.regs[Reg::FLAGS.index()] = st.regs[src.index()] & flag::MASK
            }
            Op::Rdrand { dst } => st.regs[dst.index()] = st.rng.next_u64(),
            Op::PrfEnc { dst, key } => {
                st.regs[dst.index()] = mix64(st.regs[dst.index()] ^ st.regs[key.index()])
            }
            Op::HeapAlloc { dst, size } => {
                let n = val(&st, size);
                if n == 0 {
                    return Err(ExecError::ZeroAlloc);
                }
                let base = st.heap_next;
                let end = base
                    .checked_add(n)
                    .filter(|&e| e <= layout.heap_end())
                    .ok_or(ExecError::HeapExhausted(n))?;
                st.heap_next = (end + 7) & !7;
                st.regs[dst.index()] = base;
            }
            Op::TaintLabel { mem, .. } => addr = Some(ea(&st, mem)),
        }
        // Resolve the next frame position.
        let mut next_depth = depth;
        match &instr.op {
            Op::Call { .. } => {
                next_depth = depth + 1;
                cur = Frame {
                    func: res.a,
                    block: 0,
                    index: 0,
                    sp: cur.sp - code.frames[res.a],
                };
            }
            Op::Ret if !finished => {
                cur = stack.pop().unwrap();
                next_depth = depth - 1;
            }
            _ => {
                if let Some((_, b, i)) = next {
                    cur.block = b;
                    cur.index = i;
                }
            }
        }
        // Normalise fallthrough so observers see the real next location.
        if !finished {
            let f = &code.prog.functions[cur.func];
            while cur.index >= f.blocks[cur.block].instrs.len() {
                match code.fallthrough[cur.func][cur.block] {
                    Some(n) => {
                        cur.block = n;
                        cur.index = 0;
                    }
                    None => break,
                }
            }
            next = Some((cur.func, cur.block, cur.index));
        }
        if let Some(o) = observer.as_deref_mut() {
            o.step(
                &Step {
                    step: st.step,
                    func: here.func,
                    block: here.block,
                    index: here.index,
                    instr,
                    sp: here.sp,
                    depth,
                    addr,
                    next,
                    next_depth,
                },
                &st,
            );
        }
        if finished {
            let cost = st.cost;
            return Ok(Outcome {
                state: st,
                trace,
                cost,
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mir::parse_program;

    fn exec(src: &str) -> Outcome {
        run(
            &parse_program(src).unwrap(),
            &Inputs::default(),
            &RunConfig::default(),
            None,
        )
        .unwrap()
    }

    #[test]
    fn halt_only_program() {
        let o = exec("func f { entry: halt }");
        assert!(o.trace.events.is_empty());
        assert_eq!(o.cost, CostModel::default().other);
        assert_eq!(o.state.step, 1);
    }

    #[test]
    fn heap_alloc_is_eight_aligned() {
        let o = exec("func f {\ne: heap_alloc g0, 16\nheap_alloc g1, 5\nheap_alloc g2, 8\nhalt\n}");
        let h = Layout::default().heap_base;
        assert_eq!(o.state.reg(Reg::gpr(0)), h);
        assert_eq!(o.state.reg(Reg::gpr(2)), o.state.reg(Reg::gpr(1)) + 8);
        let p = parse_program("func f {\ne: heap_alloc g0, 0x100000\nheap_alloc g0, 1\nhalt\n}")
            .unwrap();
        let e = run(&p, &Inputs::default(), &RunConfig::default(), None).unwrap_err();
        assert_eq!(e, ExecError::HeapExhausted(1));
    }

    #[test]
    fn loop_call_and_output() {
        let src = "
            .output 0x40010000, 8
            func main {
                .slot 0, 0, 8
            e:  mov g1, 0
                mov g2, 5
            l:  call inc
                sub g2, g2, 1
                br_cond ne, l, x
            x:  store [sp], g1
                load g3, [sp]
                mov g4, 0x40010000
                store [g4], g3
                mov g0, 7
                ret
            }
            func inc {
                .slot 0, 0, 16
            e:  add g1, g1, 2
                store [sp+8], g1
                ret
            }";
        let o = exec(src);
        assert_eq!(
            o.trace.events,
            vec![
                Event::Output {
                    addr: 0x4001_0000,
                    width: 8,
                    value: 10
                },
                Event::Return { value: 7 }
            ]
        );
    }

    #[test]
    fn out_of_region_access_fails() {
        let p = parse_program("func f {\ne: load g0, [g1]\nhalt\n}").unwrap();
        let e = run(&p, &Inputs::default(), &RunConfig::default(), None).unwrap_err();
        assert!(matches!(e, ExecError::OutOfRegion { addr: 0, .. }));
    }

    #[test]
    fn step_limit_enforced() {
        let p = parse_program("func f {\nl: jmp l\n}").unwrap();
        let cfg = RunConfig {
            step_limit: 100,
            ..RunConfig::default()
        };
        assert_eq!(
            run(&p, &Inputs::default(), &cfg, None).unwrap_err(),
            ExecError::StepLimit(100)
        );
    }

    #[test]
    fn flags_survive_save_restore_and_selects_follow_them() {
        let o = exec(
            "func f {\ne: cmp 1, 2\nsaveflags g5\nxor g6, g6, g6\nrestoreflags g5\nselect g0, lt, 10, 20\nselect g1, b, 10, 20\nselect g2, eq, 10, 20\nhalt\n}",
        );
        assert_eq!(o.state.reg(Reg::gpr(0)), 10);
        assert_eq!(o.state.reg(Reg::gpr(1)), 10);
        assert_eq!(o.state.reg(Reg::gpr(2)), 20);
    }

    #[test]
    fn rdrand_is_seeded() {
        let p = parse_program("func f {\ne: rdrand g0\nrdrand g1\nhalt\n}").unwrap();
        let a = run(&p, &Inputs::default(), &RunConfig::default(), None).unwrap();
        let b = run(&p, &Inputs::default(), &RunConfig::default(), None).unwrap();
        let c = run(
            &p,
            &Inputs::default(),
            &RunConfig {
                seed: 9,
                ..RunConfig::default()
            },
            None,
        )
        .unwrap();
        assert_eq!(a.state.regs, b.state.regs);
        assert_ne!(a.state.regs, c.state.regs);
        assert_eq!(a.cost, 2 * 150 + 1);
    }
}
