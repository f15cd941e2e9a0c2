//! Deterministic XEX memory-encryption model and the attacker's view of it.

use std::collections::{HashMap, HashSet};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::MemencError;
use crate::interp::{mix64, MachineState, Observer, Step};
use crate::mir::{Op, SiteId};

pub const BLOCK: u64 = 16;

pub fn block_of(addr: u64) -> u64 {
    addr & !(BLOCK - 1)
}

/// XEX over a keyed 128-bit permutation: `c = E(m ^ T(a)) ^ T(a)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncryptionModel {
    round_keys: [u64; 4],
    tweak_keys: [u64; 2],
}

impl EncryptionModel {
    pub fn new(key: u128) -> Self {
        let (hi, lo) = ((key >> 64) as u64, key as u64);
        let mut s = mix64(hi ^ mix64(lo));
        let mut next = || {
            s = mix64(s.wrapping_add(0x9e37_79b9_7f4a_7c15));
            s
        };
        EncryptionModel {
            round_keys: [next(), next(), next(), next()],
            tweak_keys: [next(), next()],
        }
    }

    pub fn tweak(&self, block_addr: u64) -> (u64, u64) {
        (
            mix64(block_addr ^ self.tweak_keys[0]),
            mix64(block_addr.rotate_left(29) ^ self.tweak_keys[1]),
        )
    }

    /// Four-round balanced Feistel network; a permutation for every key.
    fn permute(&self, mut l: u64, mut r: u64) -> (u64, u64) {
        for k in self.round_keys {
            let f = mix64(r ^ k);
            (l, r) = (r, l ^ f);
        }
        (l, r)
    }

    pub fn encrypt_block(&self, block_addr: u64, pt: [u8; 16]) -> Result<[u8; 16], MemencError> {
        if !block_addr.is_multiple_of(BLOCK) {
            return Err(MemencError::Misaligned(block_addr));
        }
        Ok(self.encrypt_aligned(block_addr, pt))
    }

    fn encrypt_aligned(&self, block_addr: u64, pt: [u8; 16]) -> [u8; 16] {
        let (t0, t1) = self.tweak(block_addr);
        let m0 = u64::from_le_bytes(pt[..8].try_into().unwrap()) ^ t0;
        let m1 = u64::from_le_bytes(pt[8..].try_into().unwrap()) ^ t1;
        let (c0, c1) = self.permute(m0, m1);
        let mut ct = [0u8; 16];
        ct[..8].copy_from_slice(&(c0 ^ t0).to_le_bytes());
        ct[8..].copy_from_slice(&(c1 ^ t1).to_le_bytes());
        ct
    }
}

mod hex16 {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[u8; 16], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<[u8; 16], D::Error> {
        let s = String::deserialize(d)?;
        let v = hex::decode(&s).map_err(serde::de::Error::custom)?;
        v.try_into()
            .map_err(|_| serde::de::Error::custom("ciphertext must be 16 bytes"))
    }
}

/// One observed ciphertext of a 16-byte block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObsRecord {
    pub step: u64,
    pub addr: u64,
    #[serde(with = "hex16")]
    pub ct: [u8; 16],
}

/// Execution of an instrumented site, as seen through a controlled channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Probe {
    pub step: u64,
    pub site: SiteId,
}

/// What the single-stepping attacker collects. Records are emitted for every
/// block written in a step (and for nonzero blocks at step 0); a block whose
/// ciphertext did not change repeats its previous value.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObservationTrace {
    pub records: Vec<ObsRecord>,
    pub probes: Vec<Probe>,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum Line {
    Record(ObsRecord),
    Probe(Probe),
}

impl ObservationTrace {
    pub fn records_at(&self, block: u64) -> impl Iterator<Item = &ObsRecord> {
        self.records.iter().filter(move |r| r.addr == block)
    }

    /// Only records whose ciphertext differs from the previous one at the
    /// same address.
    pub fn changes(&self) -> Vec<ObsRecord> {
        let mut last: HashMap<u64, [u8; 16]> = HashMap::new();
        self.records
            .iter()
            .filter(|r| last.insert(r.addr, r.ct) != Some(r.ct))
            .copied()
            .collect()
    }

    pub fn probe_steps(&self, site: SiteId) -> Vec<u64> {
        self.probes
            .iter()
            .filter(|p| p.site == site)
            .map(|p| p.step)
            .collect()
    }

    /// Ciphertext of `block` as of the end of `step`, if ever observed.
    pub fn ct_at(&self, block: u64, step: u64) -> Option<[u8; 16]> {
        let recs: Vec<&ObsRecord> = self.records_at(block).collect();
        let k = recs.partition_point(|r| r.step <= step);
        k.checked_sub(1).map(|i| recs[i].ct)
    }

    /// JSON lines: records `{step, addr, ct}` then probes `{step, site}`.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut w, &Line::Record(*r))?;
            w.write_all(b"\n")?;
        }
        for p in &self.probes {
            serde_json::to_writer(&mut w, &Line::Probe(*p))?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self, MemencError> {
        let mut t = ObservationTrace::default();
        for (i, line) in r.lines().enumerate() {
            let bad = |msg: String| MemencError::BadTrace { line: i + 1, msg };
            let line = line.map_err(|e| bad(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str::<Line>(&line).map_err(|e| bad(e.to_string()))? {
                Line::Record(r) => t.records.push(r),
                Line::Probe(p) => t.probes.push(p),
            }
        }
        t.records.sort_by_key(|r| r.step);
        t.probes.sort_by_key(|p| p.step);
        Ok(t)
    }
}

/// A store as it happened, kept for scoring and never shown to attackers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StoreEvent {
    pub step: u64,
    pub site: SiteId,
    pub addr: u64,
    pub width: u8,
}

/// Interpreter observer that maintains the ciphertext image of memory.
#[derive(Debug, Clone)]
pub struct Monitor {
    pub model: EncryptionModel,
    pub trace: ObservationTrace,
    pub stores: Vec<StoreEvent>,
    probe_sites: HashSet<SiteId>,
    view: HashMap<u64, [u8; 16]>,
}

fn plaintext(state: &MachineState, block: u64) -> [u8; 16] {
    let lo = state.memory.read(block, 8);
    let hi = state.memory.read(block + 8, 8);
    let mut pt = [0u8; 16];
    pt[..8].copy_from_slice(&lo.to_le_bytes());
    pt[8..].copy_from_slice(&hi.to_le_bytes());
    pt
}

impl Monitor {
    pub fn new(model: EncryptionModel) -> Self {
        Monitor {
            model,
            trace: ObservationTrace::default(),
            stores: Vec::new(),
            probe_sites: HashSet::new(),
            view: HashMap::new(),
        }
    }

    pub fn with_probes(mut self, sites: impl IntoIterator<Item = SiteId>) -> Self {
        self.probe_sites.extend(sites);
        self
    }

    /// Current ciphertext of a block (of zeros when never written).
    pub fn ciphertext(&self, block: u64) -> [u8; 16] {
        self.view
            .get(&block)
            .copied()
            .unwrap_or_else(|| self.model.encrypt_aligned(block, [0; 16]))
    }

    fn observe(&mut self, step: u64, block: u64, state: &MachineState) {
        let ct = self.model.encrypt_aligned(block, plaintext(state, block));
        self.view.insert(block, ct);
        self.trace.records.push(ObsRecord {
            step,
            addr: block,
            ct,
        });
    }

    pub fn into_trace(self) -> ObservationTrace {
        self.trace
    }
}

impl Observer for Monitor {
    fn start(&mut self, state: &MachineState) {
        let mut blocks: Vec<u64> = state
            .memory
            .nonzero_words()
            .into_iter()
            .map(|(a, _)| block_of(a))
            .collect();
        blocks.dedup();
        for b in blocks {
            self.observe(0, b, state);
        }
    }

    fn step(&mut self, info: &Step<'_>, state: &MachineState) {
        if self.probe_sites.contains(&info.instr.site) {
            self.trace.probes.push(Probe {
                step: info.step,
                site: info.instr.site,
            });
        }
        if let (Op::Store { mem, .. }, Some(addr)) = (&info.instr.op, info.addr) {
            self.stores.push(StoreEvent {
                step: info.step,
                site: info.instr.site,
                addr,
                width: mem.width,
            });
            let first = block_of(addr);
            let last = block_of(addr + mem.width as u64 - 1);
            self.observe(info.step, first, state);
            if last != first {
                self.observe(info.step, last, state);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::interp::{run, Inputs, RunConfig};
    use crate::mir::parse_program;

    #[test]
    fn encryption_is_deterministic_and_address_bound() {
        let m = EncryptionModel::new(42);
        let pt = *b"sixteen byte pt!";
        let a = m.encrypt_block(0x1000, pt).unwrap();
        assert_eq!(a, m.encrypt_block(0x1000, pt).unwrap());
        assert_ne!(a, m.encrypt_block(0x1010, pt).unwrap());
        assert_eq!(
            m.encrypt_block(0x1008, pt),
            Err(MemencError::Misaligned(0x1008))
        );
    }

    #[test]
    fn distinct_plaintexts_give_distinct_ciphertexts() {
        let m = EncryptionModel::new(7);
        for addr in [0u64, 0x1000_0000] {
            let mut seen = HashSet::new();
            for v in 0u32..1 << 16 {
                let mut pt = [0u8; 16];
                pt[..2].copy_from_slice(&(v as u16).to_le_bytes());
                assert!(seen.insert(m.encrypt_block(addr, pt).unwrap()));
            }
        }
    }

    fn observe(src: &str) -> ObservationTrace {
        let p = parse_program(src).unwrap();
        let mut mon = Monitor::new(EncryptionModel::new(1));
        run(
            &p,
            &Inputs::default(),
            &RunConfig::default(),
            Some(&mut mon),
        )
        .unwrap();
        mon.into_trace()
    }

    #[test]
    fn records_follow_stores() {
        let t = observe("func f {\ne: mov g1, 0x10000000\nmov g2, 5\nhalt\n}");
        assert!(t.records.is_empty());
        let t = observe("func f {\ne: mov g1, 0x10000000\nstore [g1+8], 5\nhalt\n}");
        assert_eq!(t.records.len(), 1);
        assert_eq!(t.records[0].addr, 0x1000_0000);
        let t = observe("func f {\ne: mov g1, 0x10000000\nstore [g1+12], 5\nhalt\n}");
        assert_eq!(t.records.len(), 2);
        assert_eq!(t.records[1].addr, 0x1000_0010);
    }

    #[test]
    fn repeated_plaintext_repeats_ciphertext() {
        let t = observe(
            "func f {\ne: mov g1, 0x10000000\nstore [g1], 1\nstore [g1], 2\nstore [g1], 1\nstore [g1], 2\nhalt\n}",
        );
        let cts: Vec<_> = t.records.iter().map(|r| r.ct).collect();
        assert_eq!(cts[0], cts[2]);
        assert_eq!(cts[1], cts[3]);
        assert_ne!(cts[0], cts[1]);
    }

    #[test]
    fn jsonl_round_trip() {
        let mut t = observe(
            ".heap 0x10000000, 8, 9\nfunc f {\ne: mov g1, 0x10000000\nstore [g1], 1\nhalt\n}",
        );
        t.probes.push(Probe { step: 2, site: 1 });
        assert_eq!(t.records[0].step, 0);
        let mut buf = Vec::new();
        t.write_jsonl(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.lines().next().unwrap().contains("\"ct\":\""));
        assert_eq!(ObservationTrace::read_jsonl(&buf[..]).unwrap(), t);
    }
}
