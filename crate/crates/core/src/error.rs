use thiserror::Error;

use crate::mir::SiteId;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ParseError {
    #[error("{line}:{col}: syntax error: {msg}")]
    Syntax {
        line: usize,
        col: usize,
        msg: String,
    },
    #[error("{line}:{col}: unknown opcode `{op}`")]
    UnknownOpcode { line: usize, col: usize, op: String },
    #[error("{line}:{col}: `{op}` expects {expected} operands, found {found}")]
    Arity {
        line: usize,
        col: usize,
        op: String,
        expected: String,
        found: usize,
    },
    #[error("{line}:{col}: duplicate label `{label}`")]
    DuplicateLabel {
        line: usize,
        col: usize,
        label: String,
    },
    #[error("unknown label `{label}` in function `{func}`")]
    UnknownLabel { func: String, label: String },
    #[error("invalid program: {0}")]
    Invalid(String),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ExecError {
    #[error("step {step}: out-of-region access at {addr:#x} ({len} bytes)")]
    OutOfRegion { step: u64, addr: u64, len: u64 },
    #[error("step limit of {0} exceeded")]
    StepLimit(u64),
    #[error("heap exhausted allocating {0} bytes")]
    HeapExhausted(u64),
    #[error("heap_alloc of zero bytes")]
    ZeroAlloc,
    #[error("stack overflow entering `{0}`")]
    StackOverflow(String),
    #[error("unknown function `{0}`")]
    UnknownFunction(String),
    #[error("all nonce groups at index {index} taken; cannot place {addr:#x}")]
    NonceOverflow { addr: u64, index: u64 },
    #[error("invalid program: {0}")]
    Invalid(String),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MemencError {
    #[error("block address {0:#x} is not 16-byte aligned")]
    Misaligned(u64),
    #[error("bad trace line {line}: {msg}")]
    BadTrace { line: usize, msg: String },
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TransformError {
    #[error("site {0} references a region neither stack nor heap")]
    UnsupportedRegion(SiteId),
    #[error("site {0}: sensitive access straddles an 8-byte cell")]
    Straddle(SiteId),
    #[error("reserved lane {lane} used by site {site} cannot be evicted")]
    LaneConflict { lane: String, site: SiteId },
    #[error("sites do not belong to this program: {0}")]
    SiteMismatch(String),
    #[error(transparent)]
    Exec(#[from] ExecError),
    #[error("{0}")]
    Other(String),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AttackError {
    #[error("monitored address {0:#x} never observed in trace")]
    AddressAbsent(u64),
    #[error("no probe records for site {0}")]
    NoProbes(SiteId),
    #[error("empty sequence")]
    Empty,
    #[error("no populated cells")]
    NoCells,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error(transparent)]
    Exec(#[from] ExecError),
    #[error(transparent)]
    Memenc(#[from] MemencError),
    #[error(transparent)]
    Transform(#[from] TransformError),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error("config error: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
