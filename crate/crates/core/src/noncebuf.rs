//! Nonce storage: the random nonce table, the hashed heap nonce store and the
//! secure diversion buffer.

use serde::{Deserialize, Serialize};

use crate::error::ExecError;
use crate::interp::Memory;
use crate::layout::Layout;

pub const RANDOM_NONCE_ENTRIES: u64 = 1024;
pub const HEAP_HASH_MULTIPLIER: u64 = 648_056;
pub const HEAP_INDEX_MAX: u64 = 162_012;
/// Entries in a normal-mode heap nonce store: 256Ki × 8 bytes.
pub const HEAP_STORE_ENTRIES: u64 = 256 * 1024;
pub const EXPANDED_GROUPS: u64 = 10;
pub const EXPANDED_ENTRY: u64 = 16;

pub fn initial_nonce_index(addr: u64) -> u64 {
    addr & 0x3FF
}

pub fn heap_nonce_index(addr: u64) -> u64 {
    ((addr & 0xF_FFFF) * HEAP_HASH_MULTIPLIER) >> 22
}

pub fn next_nonce(n: u64) -> u64 {
    n.wrapping_add(3)
}

/// Address of the random-table entry selected for `addr`.
pub fn random_nonce_entry(layout: &Layout, addr: u64) -> u64 {
    layout.random_nonce_base() + 8 * initial_nonce_index(addr)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NonceMode {
    #[default]
    Normal,
    Expanded,
}

/// The hashed heap nonce store.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeapNonceStore {
    pub base: u64,
    pub mode: NonceMode,
}

impl HeapNonceStore {
    pub fn new(layout: &Layout, mode: NonceMode) -> Self {
        HeapNonceStore {
            base: layout.heap_nonce_base(),
            mode,
        }
    }

    pub fn size(mode: NonceMode) -> u64 {
        match mode {
            NonceMode::Normal => HEAP_STORE_ENTRIES * 8,
            NonceMode::Expanded => (HEAP_INDEX_MAX + 1) * EXPANDED_GROUPS * EXPANDED_ENTRY,
        }
    }

    /// Start of the group row for `addr` in expanded mode.
    pub fn group_row(&self, addr: u64) -> u64 {
        self.base + heap_nonce_index(addr) * EXPANDED_GROUPS * EXPANDED_ENTRY
    }

    /// Nonce cell for `addr`, claiming a group entry in expanded mode.
    pub fn resolve(&self, mem: &mut Memory, addr: u64) -> Result<u64, ExecError> {
        match self.mode {
            NonceMode::Normal => Ok(self.base + 8 * heap_nonce_index(addr)),
            NonceMode::Expanded => {
                let row = self.group_row(addr);
                for g in 0..EXPANDED_GROUPS {
                    let e = row + g * EXPANDED_ENTRY;
                    match mem.read(e, 8) {
                        t if t == addr => return Ok(e + 8),
                        0 => {
                            mem.write(e, 8, addr);
                            return Ok(e + 8);
                        }
                        _ => {}
                    }
                }
                Err(ExecError::NonceOverflow {
                    addr,
                    index: heap_nonce_index(addr),
                })
            }
        }
    }

    /// Read-only lookup: the nonce cell if one exists for `addr`.
    pub fn lookup(&self, mem: &Memory, addr: u64) -> Option<u64> {
        match self.mode {
            NonceMode::Normal => Some(self.base + 8 * heap_nonce_index(addr)),
            NonceMode::Expanded => {
                let row = self.group_row(addr);
                (0..EXPANDED_GROUPS)
                    .map(|g| row + g * EXPANDED_ENTRY)
                    .find(|&e| mem.read(e, 8) == addr)
                    .map(|e| e + 8)
            }
        }
    }
}

/// Secure diversion buffer, indexed like the heap nonce store. Each entry is
/// 16 bytes: the diverted truth or a decoy, then a churn word.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SecureBuffer {
    pub base: u64,
}

pub const SECURE_ENTRY: u64 = 16;

impl SecureBuffer {
    pub fn new(layout: &Layout) -> Self {
        SecureBuffer {
            base: layout.secure_buffer_base(),
        }
    }

    pub fn size() -> u64 {
        (HEAP_INDEX_MAX + 1) * SECURE_ENTRY
    }

    pub fn entry(&self, addr: u64) -> u64 {
        let i = heap_nonce_index(addr);
        assert!(i <= HEAP_INDEX_MAX);
        self.base + SECURE_ENTRY * i
    }

    pub fn contains(&self, addr: u64) -> bool {
        addr >= self.base && addr < self.base + Self::size()
    }
}

/// Obfuscation 1 (truth diverted) when the hash index is even.
pub fn diverts(addr: u64) -> bool {
    heap_nonce_index(addr).is_multiple_of(2)
}
