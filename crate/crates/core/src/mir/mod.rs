//! Machine IR: a small x86-64-flavoured register machine.
//!
//! A [`Program`] is a set of [`Function`]s made of labelled [`Block`]s. Every
//! [`Instruction`] carries a program-wide unique [`SiteId`] that survives
//! rewriting passes; inserted instructions receive fresh ids above the
//! original maximum.

mod cfg;
mod parse;
mod print;
mod validate;

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

pub use cfg::{reads, writes, Cfg, Liveness, RegSet};
pub use parse::parse_program;
pub use print::{op_text, print_program};
pub use validate::{check_fresh_ids, validate, validate_with, Diagnostic};

pub type SiteId = u32;

pub const NUM_GPRS: u8 = 16;
pub const NUM_VECTORS: u8 = 16;
/// 16 general + 1 flags + 32 vector lanes.
pub const NUM_REGS: usize = 49;

/// A register: `g0..g15`, `flags`, or one 64-bit half of a vector register
/// (`v0L`, `v0H`, ..., `v15H`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Reg(u8);

impl Reg {
    pub const FLAGS: Reg = Reg(16);

    pub const fn gpr(n: u8) -> Reg {
        assert!(n < NUM_GPRS);
        Reg(n)
    }

    pub const fn lane(vector: u8, high: bool) -> Reg {
        assert!(vector < NUM_VECTORS);
        Reg(17 + 2 * vector + high as u8)
    }

    pub fn from_index(i: usize) -> Option<Reg> {
        (i < NUM_REGS).then_some(Reg(i as u8))
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn is_gpr(self) -> bool {
        self.0 < 16
    }

    pub fn is_flags(self) -> bool {
        self.0 == 16
    }

    pub fn is_lane(self) -> bool {
        self.0 > 16
    }

    /// `(vector, high)` for a lane register.
    pub fn lane_parts(self) -> Option<(u8, bool)> {
        self.is_lane()
            .then(|| ((self.0 - 17) / 2, (self.0 - 17) % 2 == 1))
    }

    /// Lanes `v8L..v15H`, the set that may hold secrets.
    pub fn secret_lanes() -> impl Iterator<Item = Reg> {
        (8..16).flat_map(|v| [Reg::lane(v, false), Reg::lane(v, true)])
    }

    pub fn all() -> impl Iterator<Item = Reg> {
        (0..NUM_REGS as u8).map(Reg)
    }

    pub fn parse(s: &str) -> Option<Reg> {
        if s == "flags" {
            return Some(Reg::FLAGS);
        }
        if let Some(n) = s.strip_prefix('g') {
            let n: u8 = n.parse().ok()?;
            return (n < NUM_GPRS && !n.to_string().is_empty() && n.to_string() == s[1..])
                .then(|| Reg::gpr(n));
        }
        let rest = s.strip_prefix('v')?;
        let (num, half) = rest.split_at(rest.len().checked_sub(1)?);
        let high = match half {
            "L" => false,
            "H" => true,
            _ => return None,
        };
        let n: u8 = num.parse().ok()?;
        (n < NUM_VECTORS && n.to_string() == num).then(|| Reg::lane(n, high))
    }
}

impl fmt::Display for Reg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_gpr() {
            write!(f, "g{}", self.0)
        } else if self.is_flags() {
            f.write_str("flags")
        } else {
            let (v, h) = self.lane_parts().unwrap();
            write!(f, "v{}{}", v, if h { 'H' } else { 'L' })
        }
    }
}

impl Serialize for Reg {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Reg {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Reg::parse(&s).ok_or_else(|| serde::de::Error::custom(format!("bad register `{s}`")))
    }
}

/// Base of a memory operand.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Base {
    Reg(Reg),
    Sp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct MemOperand {
    pub base: Base,
    pub offset: i64,
    /// Access width in bytes: 1, 2, 4 or 8.
    pub width: u8,
}

impl MemOperand {
    pub fn sp(offset: i64) -> Self {
        MemOperand {
            base: Base::Sp,
            offset,
            width: 8,
        }
    }

    pub fn reg(base: Reg, offset: i64) -> Self {
        MemOperand {
            base: Base::Reg(base),
            offset,
            width: 8,
        }
    }

    pub fn with_width(mut self, width: u8) -> Self {
        self.width = width;
        self
    }
}

/// A value source: register, immediate or the stack pointer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Operand {
    Reg(Reg),
    Imm(u64),
    Sp,
}

impl From<Reg> for Operand {
    fn from(r: Reg) -> Self {
        Operand::Reg(r)
    }
}

impl Operand {
    pub fn imm(v: i64) -> Self {
        Operand::Imm(v as u64)
    }

    pub fn reg(self) -> Option<Reg> {
        match self {
            Operand::Reg(r) => Some(r),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AluOp {
    Xor,
    And,
    Or,
    Add,
    Sub,
    Shl,
    Shr,
    Mul,
}

impl AluOp {
    pub const ALL: [AluOp; 8] = [
        AluOp::Xor,
        AluOp::And,
        AluOp::Or,
        AluOp::Add,
        AluOp::Sub,
        AluOp::Shl,
        AluOp::Shr,
        AluOp::Mul,
    ];

    pub fn mnemonic(self) -> &'static str {
        match self {
            AluOp::Xor => "xor",
            AluOp::And => "and",
            AluOp::Or => "or",
            AluOp::Add => "add",
            AluOp::Sub => "sub",
            AluOp::Shl => "shl",
            AluOp::Shr => "shr",
            AluOp::Mul => "mul",
        }
    }

    pub fn apply(self, a: u64, b: u64) -> u64 {
        match self {
            AluOp::Xor => a ^ b,
            AluOp::And => a & b,
            AluOp::Or => a | b,
            AluOp::Add => a.wrapping_add(b),
            AluOp::Sub => a.wrapping_sub(b),
            AluOp::Shl => a.checked_shl((b & 63) as u32).unwrap_or(0),
            AluOp::Shr => a.checked_shr((b & 63) as u32).unwrap_or(0),
            AluOp::Mul => a.wrapping_mul(b),
        }
    }
}

/// Flag bits of the flags word.
pub mod flag {
    pub const ZERO: u64 = 1;
    pub const SIGNED_LESS: u64 = 2;
    pub const UNSIGNED_LESS: u64 = 4;
    pub const MASK: u64 = 7;
}

/// Branch / select condition over the flags word.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Cond {
    Eq,
    Ne,
    Lt,
    Ge,
    Le,
    Gt,
    /// Unsigned below.
    B,
    /// Unsigned above-or-equal.
    Ae,
}

impl Cond {
    pub const ALL: [Cond; 8] = [
        Cond::Eq,
        Cond::Ne,
        Cond::Lt,
        Cond::Ge,
        Cond::Le,
        Cond::Gt,
        Cond::B,
        Cond::Ae,
    ];

    pub fn mnemonic(self) -> &'static str {
        match self {
            Cond::Eq => "eq",
            Cond::Ne => "ne",
            Cond::Lt => "lt",
            Cond::Ge => "ge",
            Cond::Le => "le",
            Cond::Gt => "gt",
            Cond::B => "b",
            Cond::Ae => "ae",
        }
    }

    pub fn holds(self, flags: u64) -> bool {
        let z = flags & flag::ZERO != 0;
        let lt = flags & flag::SIGNED_LESS != 0;
        let b = flags & flag::UNSIGNED_LESS != 0;
        match self {
            Cond::Eq => z,
            Cond::Ne => !z,
            Cond::Lt => lt,
            Cond::Ge => !lt,
            Cond::Le => lt || z,
            Cond::Gt => !lt && !z,
            Cond::B => b,
            Cond::Ae => !b,
        }
    }

    pub fn negate(self) -> Cond {
        match self {
            Cond::Eq => Cond::Ne,
            Cond::Ne => Cond::Eq,
            Cond::Lt => Cond::Ge,
            Cond::Ge => Cond::Lt,
            Cond::Le => Cond::Gt,
            Cond::Gt => Cond::Le,
            Cond::B => Cond::Ae,
            Cond::Ae => Cond::B,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Op {
    Load {
        dst: Reg,
        mem: MemOperand,
    },
    Store {
        mem: MemOperand,
        src: Operand,
    },
    Mov {
        dst: Reg,
        src: Operand,
    },
    Alu {
        op: AluOp,
        dst: Reg,
        a: Operand,
        b: Operand,
    },
    Cmp {
        a: Operand,
        b: Operand,
    },
    Test {
        a: Operand,
        b: Operand,
    },
    /// `dst = cond ? a : b` without branching.
    Select {
        dst: Reg,
        cond: Cond,
        a: Operand,
        b: Operand,
    },
    Jmp {
        target: String,
    },
    BrCond {
        cond: Cond,
        taken: String,
        not_taken: String,
    },
    Call {
        func: String,
    },
    Ret,
    SaveFlags {
        dst: Reg,
    },
    RestoreFlags {
        src: Reg,
    },
    Rdrand {
        dst: Reg,
    },
    /// One keyed mixing round over a lane, modelling `vaesenc`.
    PrfEnc {
        dst: Reg,
        key: Reg,
    },
    HeapAlloc {
        dst: Reg,
        size: Operand,
    },
    TaintLabel {
        mem: MemOperand,
        len: u64,
    },
    Halt,
}

impl Op {
    pub fn mnemonic(&self) -> &'static str {
        match self {
            Op::Load { .. } => "load",
            Op::Store { .. } => "store",
            Op::Mov { .. } => "mov",
            Op::Alu { op, .. } => op.mnemonic(),
            Op::Cmp { .. } => "cmp",
            Op::Test { .. } => "test",
            Op::Select { .. } => "select",
            Op::Jmp { .. } => "jmp",
            Op::BrCond { .. } => "br_cond",
            Op::Call { .. } => "call",
            Op::Ret => "ret",
            Op::SaveFlags { .. } => "saveflags",
            Op::RestoreFlags { .. } => "restoreflags",
            Op::Rdrand { .. } => "rdrand",
            Op::PrfEnc { .. } => "prf_enc",
            Op::HeapAlloc { .. } => "heap_alloc",
            Op::TaintLabel { .. } => "taint_label",
            Op::Halt => "halt",
        }
    }

    pub fn is_terminator(&self) -> bool {
        matches!(
            self,
            Op::Jmp { .. } | Op::BrCond { .. } | Op::Ret | Op::Halt
        )
    }

    pub fn is_branch(&self) -> bool {
        matches!(
            self,
            Op::Jmp { .. } | Op::BrCond { .. } | Op::Call { .. } | Op::Ret
        )
    }

    pub fn is_memory(&self) -> bool {
        matches!(self, Op::Load { .. } | Op::Store { .. })
    }

    pub fn mem(&self) -> Option<&MemOperand> {
        match self {
            Op::Load { mem, .. } | Op::Store { mem, .. } | Op::TaintLabel { mem, .. } => Some(mem),
            _ => None,
        }
    }

    pub fn mem_mut(&mut self) -> Option<&mut MemOperand> {
        match self {
            Op::Load { mem, .. } | Op::Store { mem, .. } | Op::TaintLabel { mem, .. } => Some(mem),
            _ => None,
        }
    }

    /// Whether executing the op overwrites the flags word.
    pub fn sets_flags(&self) -> bool {
        matches!(
            self,
            Op::Alu { .. } | Op::Cmp { .. } | Op::Test { .. } | Op::RestoreFlags { .. }
        )
    }

    /// Register written by the op, if any.
    pub fn def(&self) -> Option<Reg> {
        match self {
            Op::Load { dst, .. }
            | Op::Mov { dst, .. }
            | Op::Alu { dst, .. }
            | Op::Select { dst, .. }
            | Op::SaveFlags { dst }
            | Op::Rdrand { dst }
            | Op::PrfEnc { dst, .. }
            | Op::HeapAlloc { dst, .. } => Some(*dst),
            _ => None,
        }
    }

    /// Registers read by the op (the flags register is not included).
    pub fn uses(&self) -> Vec<Reg> {
        fn op_reg(o: &Operand, out: &mut Vec<Reg>) {
            if let Operand::Reg(r) = o {
                out.push(*r);
            }
        }
        fn mem_reg(m: &MemOperand, out: &mut Vec<Reg>) {
            if let Base::Reg(r) = m.base {
                out.push(r);
            }
        }
        let mut v = Vec::new();
        match self {
            Op::Load { mem, .. } | Op::TaintLabel { mem, .. } => mem_reg(mem, &mut v),
            Op::Store { mem, src } => {
                mem_reg(mem, &mut v);
                op_reg(src, &mut v);
            }
            Op::Mov { src, .. } | Op::HeapAlloc { size: src, .. } => op_reg(src, &mut v),
            Op::Alu { a, b, .. }
            | Op::Cmp { a, b }
            | Op::Test { a, b }
            | Op::Select { a, b, .. } => {
                op_reg(a, &mut v);
                op_reg(b, &mut v);
            }
            Op::RestoreFlags { src } => v.push(*src),
            Op::PrfEnc { dst, key } => {
                v.push(*dst);
                v.push(*key);
            }
            _ => {}
        }
        v
    }

    pub fn labels(&self) -> Vec<&str> {
        match self {
            Op::Jmp { target } => vec![target.as_str()],
            Op::BrCond {
                taken, not_taken, ..
            } => vec![taken.as_str(), not_taken.as_str()],
            _ => vec![],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Instruction {
    pub site: SiteId,
    pub op: Op,
}

impl Instruction {
    pub fn new(site: SiteId, op: Op) -> Self {
        Instruction { site, op }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Block {
    pub label: String,
    pub instrs: Vec<Instruction>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StackSlot {
    pub id: u32,
    /// Byte offset from the frame base (`sp`).
    pub offset: u64,
    pub size: u64,
}

impl StackSlot {
    pub fn end(&self) -> u64 {
        self.offset + self.size
    }

    pub fn contains(&self, off: u64) -> bool {
        off >= self.offset && off < self.end()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Function {
    pub name: String,
    pub slots: Vec<StackSlot>,
    pub blocks: Vec<Block>,
}

impl Function {
    /// Frame size: the slot extent rounded up to 16 bytes.
    pub fn frame_size(&self) -> u64 {
        let end = self.slots.iter().map(StackSlot::end).max().unwrap_or(0);
        (end + 15) & !15
    }

    pub fn block_index(&self, label: &str) -> Option<usize> {
        self.blocks.iter().position(|b| b.label == label)
    }

    pub fn slot_at(&self, off: u64) -> Option<&StackSlot> {
        self.slots.iter().find(|s| s.contains(off))
    }

    pub fn next_slot_id(&self) -> u32 {
        self.slots.iter().map(|s| s.id + 1).max().unwrap_or(0)
    }

    /// Appends a fresh slot at the end of the frame, 8-aligned.
    pub fn add_slot(&mut self, size: u64) -> StackSlot {
        let end = self.slots.iter().map(StackSlot::end).max().unwrap_or(0);
        let slot = StackSlot {
            id: self.next_slot_id(),
            offset: (end + 7) & !7,
            size,
        };
        self.slots.push(slot);
        slot
    }

    /// Successor block indices of block `b`: branch targets, or the next
    /// block when the last instruction is not a terminator.
    pub fn successors(&self, b: usize) -> Vec<usize> {
        let block = &self.blocks[b];
        match block.instrs.last().map(|i| &i.op) {
            Some(op) if op.is_terminator() => op
                .labels()
                .into_iter()
                .filter_map(|l| self.block_index(l))
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect(),
            _ if b + 1 < self.blocks.len() => vec![b + 1],
            _ => vec![],
        }
    }

    pub fn instructions(&self) -> impl Iterator<Item = &Instruction> {
        self.blocks.iter().flat_map(|b| b.instrs.iter())
    }
}

/// A contiguous address range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Span {
    pub addr: u64,
    pub len: u64,
}

impl Span {
    pub fn contains(&self, addr: u64) -> bool {
        addr >= self.addr && addr - self.addr < self.len
    }

    pub fn end(&self) -> u64 {
        self.addr + self.len
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ImageKind {
    Heap,
    Data,
}

/// Initial memory contents declared by `.heap` or `.data`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub kind: ImageKind,
    pub addr: u64,
    pub bytes: Vec<u8>,
}

impl Image {
    pub fn span(&self) -> Span {
        Span {
            addr: self.addr,
            len: self.bytes.len() as u64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Program {
    pub entry: String,
    pub functions: Vec<Function>,
    pub secrets: Vec<Span>,
    pub images: Vec<Image>,
    /// Designated output region; stores into it are the functional observables.
    pub output: Option<Span>,
}

impl Program {
    pub fn function(&self, name: &str) -> Option<&Function> {
        self.functions.iter().find(|f| f.name == name)
    }

    pub fn function_mut(&mut self, name: &str) -> Option<&mut Function> {
        self.functions.iter_mut().find(|f| f.name == name)
    }

    pub fn function_index(&self, name: &str) -> Option<usize> {
        self.functions.iter().position(|f| f.name == name)
    }

    pub fn instructions(&self) -> impl Iterator<Item = &Instruction> {
        self.functions.iter().flat_map(|f| f.instructions())
    }

    pub fn max_site(&self) -> Option<SiteId> {
        self.instructions().map(|i| i.site).max()
    }

    pub fn instruction_count(&self) -> usize {
        self.instructions().count()
    }

    /// Finds an instruction by site, with its function name.
    pub fn find_site(&self, site: SiteId) -> Option<(&Function, &Instruction)> {
        self.functions
            .iter()
            .find_map(|f| f.instructions().find(|i| i.site == site).map(|i| (f, i)))
    }

    /// A cheap structural fingerprint used to tie analysis results to the
    /// program they were computed on.
    pub fn fingerprint(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        self.secrets.hash(&mut h);
        for f in &self.functions {
            f.name.hash(&mut h);
            f.slots.hash(&mut h);
            for i in f.instructions() {
                i.hash(&mut h);
            }
        }
        h.finish()
    }

    /// Absolute frame base of the entry function when called first.
    pub fn entry_frame_base(&self, layout: &crate::layout::Layout) -> Option<u64> {
        self.function(&self.entry)
            .map(|f| layout.stack_top - f.frame_size())
    }
}
