//! Simulated address-space layout.
//!
//! Three disjoint regions: a downward-growing stack, a bump-allocated heap and
//! a data segment that plays the role of `.bss`. The data segment hosts every
//! mitigation buffer at fixed offsets; programs may only declare their output
//! region inside the user window of the data segment.

use serde::{Deserialize, Serialize};

/// Which region an address falls into.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Region {
    Stack,
    Heap,
    Data,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Layout {
    /// Highest stack address (exclusive); frames are carved downwards.
    pub stack_top: u64,
    pub stack_size: u64,
    pub heap_base: u64,
    /// Kept at 1 MiB so that the low 20 address bits are unique per heap cell.
    pub heap_size: u64,
    pub data_base: u64,
    pub data_size: u64,
    /// Offset of the 1024-entry random nonce table.
    pub random_nonce_offset: u64,
    /// Offset of the register save area used by the initialisation routine.
    pub save_area_offset: u64,
    /// Start and end offsets of the window programs may use for output.
    pub user_offset: u64,
    pub user_end_offset: u64,
    pub heap_nonce_offset: u64,
    pub heap_nonce_reserved: u64,
    pub secure_buffer_offset: u64,
    pub secure_buffer_reserved: u64,
}

impl Default for Layout {
    fn default() -> Self {
        Layout {
            stack_top: 0x0800_0000,
            stack_size: 0x0010_0000,
            heap_base: 0x1000_0000,
            heap_size: 0x0010_0000,
            data_base: 0x4000_0000,
            data_size: 0x0400_0000,
            random_nonce_offset: 0,
            save_area_offset: 0x2000,
            user_offset: 0x1_0000,
            user_end_offset: 0x10_0000,
            heap_nonce_offset: 0x10_0000,
            heap_nonce_reserved: 0x200_0000,
            secure_buffer_offset: 0x300_0000,
            secure_buffer_reserved: 0x40_0000,
        }
    }
}

impl Layout {
    pub fn stack_limit(&self) -> u64 {
        self.stack_top - self.stack_size
    }

    pub fn heap_end(&self) -> u64 {
        self.heap_base + self.heap_size
    }

    pub fn data_end(&self) -> u64 {
        self.data_base + self.data_size
    }

    pub fn random_nonce_base(&self) -> u64 {
        self.data_base + self.random_nonce_offset
    }

    pub fn save_area_base(&self) -> u64 {
        self.data_base + self.save_area_offset
    }

    pub fn user_base(&self) -> u64 {
        self.data_base + self.user_offset
    }

    pub fn user_end(&self) -> u64 {
        self.data_base + self.user_end_offset
    }

    pub fn heap_nonce_base(&self) -> u64 {
        self.data_base + self.heap_nonce_offset
    }

    pub fn secure_buffer_base(&self) -> u64 {
        self.data_base + self.secure_buffer_offset
    }

    pub fn region_of(&self, addr: u64) -> Option<Region> {
        if addr >= self.stack_limit() && addr < self.stack_top {
            Some(Region::Stack)
        } else if addr >= self.heap_base && addr < self.heap_end() {
            Some(Region::Heap)
        } else if addr >= self.data_base && addr < self.data_end() {
            Some(Region::Data)
        } else {
            None
        }
    }

    /// True when `[addr, addr+len)` lies entirely inside one region.
    pub fn contains_range(&self, addr: u64, len: u64) -> Option<Region> {
        if len == 0 {
            return self.region_of(addr);
        }
        let last = addr.checked_add(len - 1)?;
        let r = self.region_of(addr)?;
        (self.region_of(last) == Some(r)).then_some(r)
    }

    /// Address ranges owned by mitigation machinery, as `(start, end)`.
    pub fn artifact_ranges(&self) -> [(u64, u64); 4] {
        [
            (
                self.random_nonce_base(),
                self.random_nonce_base() + 8 * 1024,
            ),
            (self.save_area_base(), self.save_area_base() + 0x100),
            (
                self.heap_nonce_base(),
                self.heap_nonce_base() + self.heap_nonce_reserved,
            ),
            (
                self.secure_buffer_base(),
                self.secure_buffer_base() + self.secure_buffer_reserved,
            ),
        ]
    }

    pub fn is_artifact(&self, addr: u64) -> bool {
        self.artifact_ranges()
            .iter()
            .any(|&(s, e)| addr >= s && addr < e)
    }

    /// Checks the structural invariants: disjoint regions, buffers inside the
    /// data segment and non-overlapping.
    pub fn check(&self) -> Result<(), String> {
        let mut spans = [
            ("stack", self.stack_limit(), self.stack_top),
            ("heap", self.heap_base, self.heap_end()),
            ("data", self.data_base, self.data_end()),
        ];
        spans.sort_by_key(|s| s.1);
        for w in spans.windows(2) {
            if w[0].2 > w[1].1 {
                return Err(format!("regions {} and {} overlap", w[0].0, w[1].0));
            }
        }
        if self.heap_size > 1 << 20 || !self.heap_base.is_multiple_of(1 << 20) {
            return Err("heap must be a 1 MiB-aligned region of at most 1 MiB".into());
        }
        let mut bufs = self.artifact_ranges().to_vec();
        bufs.push((self.user_base(), self.user_end()));
        bufs.sort();
        for w in bufs.windows(2) {
            if w[0].1 > w[1].0 {
                return Err("data-segment buffers overlap".into());
            }
        }
        if bufs.last().map(|b| b.1 > self.data_end()).unwrap_or(false) {
            return Err("data-segment buffers exceed the data segment".into());
        }
        Ok(())
    }
}
