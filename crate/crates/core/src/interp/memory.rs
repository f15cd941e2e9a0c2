use crate::layout::Layout;

const PAGE_BITS: u32 = 12;
const PAGE: usize = 1 << PAGE_BITS;

type Page = Box<[u8; PAGE]>;

#[derive(Debug, Clone, PartialEq, Eq)]
struct Area {
    base: u64,
    end: u64,
    pages: Vec<Option<Page>>,
}

/// Sparse byte-addressed memory over the three layout regions. Bytes never
/// written read as zero.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Memory {
    areas: Vec<Area>,
}

impl Memory {
    pub fn new(layout: &Layout) -> Self {
        let spans = [
            (layout.stack_limit(), layout.stack_top),
            (layout.heap_base, layout.heap_end()),
            (layout.data_base, layout.data_end()),
        ];
        let areas = spans
            .iter()
            .map(|&(base, end)| Area {
                base,
                end,
                pages: vec![None; ((end - base) as usize).div_ceil(PAGE)],
            })
            .collect();
        Memory { areas }
    }

    fn locate(&self, addr: u64) -> Option<(usize, usize, usize)> {
        self.areas.iter().enumerate().find_map(|(i, a)| {
            (addr >= a.base && addr < a.end).then(|| {
                let off = (addr - a.base) as usize;
                (i, off >> PAGE_BITS, off & (PAGE - 1))
            })
        })
    }

    pub fn read_u8(&self, addr: u64) -> u8 {
        match self.locate(addr) {
            Some((a, p, o)) => self.areas[a].pages[p].as_ref().map_or(0, |pg| pg[o]),
            None => 0,
        }
    }

    pub fn write_u8(&mut self, addr: u64, v: u8) {
        if let Some((a, p, o)) = self.locate(addr) {
            let slot = &mut self.areas[a].pages[p];
            if slot.is_none() {
                if v == 0 {
                    return;
                }
                *slot = Some(Box::new([0; PAGE]));
            }
            slot.as_mut().unwrap()[o] = v;
        }
    }

    /// Little-endian read of `width` bytes, zero-extended.
    pub fn read(&self, addr: u64, width: u8) -> u64 {
        if let Some((a, p, o)) = self.locate(addr) {
            if o + width as usize <= PAGE {
                let Some(pg) = &self.areas[a].pages[p] else {
                    return 0;
                };
                let mut buf = [0u8; 8];
                buf[..width as usize].copy_from_slice(&pg[o..o + width as usize]);
                return u64::from_le_bytes(buf);
            }
        }
        (0..width as u64).fold(0, |acc, i| acc | (self.read_u8(addr + i) as u64) << (8 * i))
    }

    pub fn write(&mut self, addr: u64, width: u8, v: u64) {
        if let Some((a, p, o)) = self.locate(addr) {
            if o + width as usize <= PAGE {
                let slot = &mut self.areas[a].pages[p];
                if slot.is_none() {
                    if v & mask(width) == 0 {
                        return;
                    }
                    *slot = Some(Box::new([0; PAGE]));
                }
                let bytes = v.to_le_bytes();
                slot.as_mut().unwrap()[o..o + width as usize]
                    .copy_from_slice(&bytes[..width as usize]);
                return;
            }
        }
        for i in 0..width as u64 {
            self.write_u8(addr + i, (v >> (8 * i)) as u8);
        }
    }

    pub fn read_bytes(&self, addr: u64, len: usize) -> Vec<u8> {
        (0..len as u64).map(|i| self.read_u8(addr + i)).collect()
    }

    pub fn write_bytes(&mut self, addr: u64, bytes: &[u8]) {
        for (i, b) in bytes.iter().enumerate() {
            self.write_u8(addr + i as u64, *b);
        }
    }

    /// Addresses of 8-byte words that hold a nonzero value, ascending.
    pub fn nonzero_words(&self) -> Vec<(u64, u64)> {
        let mut out = Vec::new();
        for a in &self.areas {
            for (pi, pg) in a.pages.iter().enumerate() {
                let Some(pg) = pg else { continue };
                let page_base = a.base + (pi * PAGE) as u64;
                for w in 0..PAGE / 8 {
                    let v = u64::from_le_bytes(pg[w * 8..w * 8 + 8].try_into().unwrap());
                    if v != 0 {
                        out.push((page_base + (w * 8) as u64, v));
                    }
                }
            }
        }
        out
    }
}

pub(crate) fn mask(width: u8) -> u64 {
    if width >= 8 {
        u64::MAX
    } else {
        (1u64 << (8 * width)) - 1
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unwritten_reads_zero_and_writes_round_trip() {
        let l = Layout::default();
        let mut m = Memory::new(&l);
        assert_eq!(m.read(l.heap_base, 8), 0);
        m.write(l.heap_base + 4094, 8, 0x1122_3344_5566_7788);
        assert_eq!(m.read(l.heap_base + 4094, 8), 0x1122_3344_5566_7788);
        assert_eq!(m.read(l.heap_base + 4094, 2), 0x7788);
        m.write(l.data_base, 1, 0x1ff);
        assert_eq!(m.read(l.data_base, 8), 0xff);
        assert_eq!(m.nonzero_words().len(), 3);
    }
}
