//! Ciphertext side-channel attackers and the experiments built on them.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{AttackError, Error};
use crate::fixtures::{ct_swap, Fixture, GroundTruth};
use crate::interp::{run, Inputs, MachineState, Observer, Outcome, RunConfig, Step};
use crate::layout::Layout;
use crate::memenc::{block_of, EncryptionModel, Monitor, ObservationTrace};
use crate::mir::{Program, SiteId};
use crate::noncebuf::{diverts, SecureBuffer};
use crate::taint::run_tainted;
use crate::transform::{mitigate, MaskVariant, Strategy, TransformConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackResult {
    pub attack: String,
    pub accuracy: f64,
    /// One guess per secret bit; `None` when nothing was observed for it.
    pub recovered: Vec<Option<u8>>,
    pub unknown: usize,
}

fn score(attack: &str, recovered: Vec<Option<u8>>, truth: &[u8]) -> AttackResult {
    let n = truth.len();
    let hits = truth
        .iter()
        .enumerate()
        .filter(|(i, t)| recovered.get(*i).copied().flatten() == Some(**t))
        .count();
    let mut recovered = recovered;
    recovered.resize(n, None);
    let unknown = recovered.iter().filter(|r| r.is_none()).count();
    AttackResult {
        attack: attack.into(),
        accuracy: if n == 0 { 0.0 } else { hits as f64 / n as f64 },
        recovered,
        unknown,
    }
}

/// Runs `p` under the memory-encryption monitor.
pub fn observe(
    p: &Program,
    inputs: &Inputs,
    cfg: &RunConfig,
    key: u128,
    probes: impl IntoIterator<Item = SiteId>,
) -> Result<(Outcome, Monitor), Error> {
    let mut mon = Monitor::new(EncryptionModel::new(key)).with_probes(probes);
    let out = run(p, inputs, cfg, Some(&mut mon))?;
    Ok((out, mon))
}

/// Where the dictionary attacker looks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DictionaryTarget {
    /// Block holding `pbit`.
    pub block: u64,
    /// Initialising store whose plaintext (0) the attacker knows.
    pub anchor: SiteId,
    /// The store whose value is the next key bit.
    pub bit_store: SiteId,
    /// All stores to `pbit`, anchor included.
    pub stores: Vec<SiteId>,
}

impl DictionaryTarget {
    pub fn for_ladder(fx: &Fixture, run_program: &Program, layout: &Layout) -> Option<Self> {
        let base = run_program.entry_frame_base(layout)?;
        let lm = &fx.landmarks;
        Some(DictionaryTarget {
            block: block_of(base + lm.pbit_offset),
            anchor: *lm.pbit_stores.first()?,
            bit_store: lm.pbit_bit_store?,
            stores: lm.pbit_stores.clone(),
        })
    }
}

/// Learns ciphertext -> plaintext for a two-valued variable: the anchor
/// ciphertext means 0, any new ciphertext means the opposite of the last
/// known value.
pub fn dictionary_attack(
    trace: &ObservationTrace,
    target: &DictionaryTarget,
    truth: &[u8],
) -> Result<AttackResult, AttackError> {
    let mut probes: Vec<(u64, SiteId)> = trace
        .probes
        .iter()
        .filter(|p| target.stores.contains(&p.site))
        .map(|p| (p.step, p.site))
        .collect();
    if probes.is_empty() {
        if trace.records.is_empty() && trace.probes.is_empty() {
            return Ok(score("dictionary", vec![], truth));
        }
        return Err(AttackError::NoProbes(target.bit_store));
    }
    probes.sort();
    let mut dict: HashMap<Option<[u8; 16]>, u8> = HashMap::new();
    let mut prev = 0u8;
    let mut recovered = Vec::new();
    for (step, site) in probes {
        let ct = trace.ct_at(target.block, step);
        let bit = if site == target.anchor {
            dict.insert(ct, 0);
            0
        } else {
            *dict.entry(ct).or_insert(1 - prev)
        };
        prev = bit;
        if site == target.bit_store {
            recovered.push(Some(bit));
        }
    }
    Ok(score("dictionary", recovered, truth))
}

/// How much the collision attacker knows about the diversion layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackerLevel {
    /// Watches the operands and the whole secure buffer.
    ParityBlind,
    /// Knows the parity rule and watches only blocks holding nothing but
    /// truth values.
    ParityAware,
}

/// Blocks the collision attacker monitors.
pub fn collision_blocks(
    level: AttackerLevel,
    operands: &[(u64, u64)],
    diverted: bool,
    layout: &Layout,
) -> BTreeSet<u64> {
    let cells: BTreeSet<u64> = operands
        .iter()
        .flat_map(|&(a, n)| (a..a + n).step_by(8))
        .collect();
    let sb = SecureBuffer::new(layout);
    match level {
        AttackerLevel::ParityBlind => {
            let mut v: BTreeSet<u64> = cells.iter().map(|c| block_of(*c)).collect();
            if diverted {
                v.extend(cells.iter().map(|c| sb.entry(*c)));
            }
            v
        }
        AttackerLevel::ParityAware => {
            if !diverted {
                return cells.iter().map(|c| block_of(*c)).collect();
            }
            // A block qualifies only if every protected word in it is a
            // truth word: buffer entries also carry the churn word, and
            // in-place even cells carry decoys.
            cells
                .iter()
                .filter(|c| !diverts(**c))
                .map(|c| block_of(*c))
                .filter(|b| {
                    (*b..*b + 16)
                        .step_by(8)
                        .all(|w| !cells.contains(&w) || !diverts(w))
                })
                .collect()
        }
    }
}

/// Predicts each iteration's swap decision from whether any monitored
/// block's ciphertext changed during it.
pub fn collision_attack(
    trace: &ObservationTrace,
    decision_site: SiteId,
    blocks: &BTreeSet<u64>,
    truth: &[u8],
) -> Result<AttackResult, AttackError> {
    let steps = trace.probe_steps(decision_site);
    if steps.is_empty() {
        if trace.records.is_empty() {
            return Ok(score("collision", vec![], truth));
        }
        return Err(AttackError::NoProbes(decision_site));
    }
    if !blocks.is_empty() && !trace.records.iter().any(|r| blocks.contains(&r.addr)) {
        return Err(AttackError::AddressAbsent(*blocks.iter().next().unwrap()));
    }
    let end = trace
        .records
        .last()
        .map_or(0, |r| r.step)
        .max(*steps.last().unwrap());
    // Ciphertext changes per step, restricted to monitored blocks.
    let mut last: HashMap<u64, [u8; 16]> = HashMap::new();
    let mut change_steps = Vec::new();
    for r in &trace.records {
        if !blocks.contains(&r.addr) {
            continue;
        }
        if let Some(prev) = last.insert(r.addr, r.ct) {
            if prev != r.ct {
                change_steps.push(r.step);
            }
        }
    }
    let recovered = steps
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            let e = steps.get(i + 1).copied().unwrap_or(end + 1);
            let lo = change_steps.partition_point(|&c| c <= s);
            let hi = change_steps.partition_point(|&c| c < e);
            Some((hi > lo) as u8)
        })
        .collect();
    Ok(score("collision", recovered, truth))
}

/// Shannon entropy in bits of the empirical distribution of `values`.
pub fn shannon_entropy(values: &[u64]) -> Result<f64, AttackError> {
    if values.is_empty() {
        return Err(AttackError::Empty);
    }
    let mut counts: HashMap<u64, usize> = HashMap::new();
    for v in values {
        *counts.entry(*v).or_default() += 1;
    }
    let n = values.len() as f64;
    Ok(counts
        .values()
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.log2()
        })
        .sum())
}

/// Records the plaintext word at `addr` after each execution of `site`.
#[derive(Debug, Clone)]
pub struct ValueProbe {
    pub site: SiteId,
    pub addr: u64,
    pub values: Vec<u64>,
}

impl Observer for ValueProbe {
    fn step(&mut self, info: &Step<'_>, state: &MachineState) {
        if info.instr.site == self.site {
            self.values.push(state.memory.read(self.addr, 8));
        }
    }
}

/// Memory contents of the ladder's `pbit` cell after every bit store.
pub fn pbit_sequence(
    fx: &Fixture,
    run_program: &Program,
    inputs: &Inputs,
    cfg: &RunConfig,
) -> Result<Vec<u64>, Error> {
    let base = run_program
        .entry_frame_base(&cfg.layout)
        .ok_or_else(|| Error::Config("program has no entry frame".into()))?;
    let site = fx
        .landmarks
        .pbit_bit_store
        .ok_or_else(|| Error::Config("fixture has no pbit store".into()))?;
    let mut probe = ValueProbe {
        site,
        addr: base + fx.landmarks.pbit_offset,
        values: Vec::new(),
    };
    run(run_program, inputs, cfg, Some(&mut probe))?;
    Ok(probe.values)
}

/// Largest step gap between buffer writes of one obfuscated store.
const BURST_GAP: u64 = 2;

/// Ciphertext before a burst, its last step, and the latest ciphertext.
type Burst = (Option<[u8; 16]>, u64, [u8; 16]);

/// Per-cell ciphertext change counts of one ct-swap run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapRun {
    pub offset: u64,
    /// Changes of the block holding each cell in place.
    pub original: Vec<u64>,
    /// Changes of each cell's secure-buffer entry.
    pub secure: Vec<u64>,
    /// Whether each cell's truth lives in the secure buffer.
    pub truth_in_buffer: Vec<bool>,
    /// Obfuscated stores that left their buffer entry's ciphertext unchanged.
    pub stale_buffer_writes: u64,
    pub buffer_writes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapReport {
    pub runs: Vec<HeatmapRun>,
    /// Leave-one-run-out accuracy of predicting truth location from the
    /// cell's position.
    pub location_accuracy: f64,
    /// Max/min ratio of secure-buffer change counts over populated cells.
    pub uniformity: f64,
}

/// Change counts for every cell in `cells`, plus freshness of buffer writes.
pub fn heatmap_run(
    trace: &ObservationTrace,
    stores: &[crate::memenc::StoreEvent],
    cells: &[u64],
    layout: &Layout,
    offset: u64,
) -> HeatmapRun {
    let sb = SecureBuffer::new(layout);
    let mut changes: HashMap<u64, u64> = HashMap::new();
    for r in trace.changes() {
        *changes.entry(r.addr).or_default() += 1;
    }
    // Freshness: each obfuscated store writes its buffer entry through a
    // short burst of adjacent stores (truth or decoy, then churn). The
    // entry's ciphertext must differ before and after the burst.
    let store_steps: HashMap<u64, u64> = stores
        .iter()
        .filter(|s| sb.contains(s.addr))
        .map(|s| (s.step, block_of(s.addr)))
        .collect();
    let mut last: HashMap<u64, [u8; 16]> = HashMap::new();
    let mut open: HashMap<u64, Burst> = HashMap::new();
    let (mut stale, mut writes) = (0, 0);
    let mut close = |before: Option<[u8; 16]>, after: [u8; 16]| {
        writes += 1;
        if before == Some(after) {
            stale += 1;
        }
    };
    for r in &trace.records {
        if store_steps.get(&r.step) == Some(&r.addr) {
            match open.get_mut(&r.addr) {
                Some(g) if r.step - g.1 <= BURST_GAP => {
                    g.1 = r.step;
                    g.2 = r.ct;
                }
                _ => {
                    let before = last.get(&r.addr).copied();
                    if let Some((b, _, a)) = open.insert(r.addr, (before, r.step, r.ct)) {
                        close(b, a);
                    }
                }
            }
        }
        last.insert(r.addr, r.ct);
    }
    for (b, _, a) in open.into_values() {
        close(b, a);
    }
    HeatmapRun {
        offset,
        original: cells
            .iter()
            .map(|c| changes.get(&block_of(*c)).copied().unwrap_or(0))
            .collect(),
        secure: cells
            .iter()
            .map(|c| changes.get(&sb.entry(*c)).copied().unwrap_or(0))
            .collect(),
        truth_in_buffer: cells.iter().map(|c| diverts(*c)).collect(),
        stale_buffer_writes: stale,
        buffer_writes: writes,
    }
}

/// Leave-one-run-out majority vote per cell position. Without diversion
/// every label is "in place" and the vote is trivially right.
pub fn location_classifier(runs: &[HeatmapRun], diverted: bool) -> Result<f64, AttackError> {
    let n = runs.first().map_or(0, |r| r.truth_in_buffer.len());
    if n == 0 {
        return Err(AttackError::NoCells);
    }
    let label = |r: &HeatmapRun, k: usize| diverted && r.truth_in_buffer[k];
    let (mut hits, mut total) = (0usize, 0usize);
    for (i, r) in runs.iter().enumerate() {
        for k in 0..n {
            let votes: Vec<bool> = runs
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i || runs.len() == 1)
                .map(|(_, o)| label(o, k))
                .collect();
            let buffer = votes.iter().filter(|v| **v).count();
            let guess = 2 * buffer > votes.len();
            hits += (guess == label(r, k)) as usize;
            total += 1;
        }
    }
    Ok(hits as f64 / total as f64)
}

/// Ten obfuscated ct-swap runs at random heap offsets.
pub fn heatmap_experiment(
    runs: usize,
    iterations: u64,
    limbs: u64,
    strategy: Strategy,
    seed: u64,
    rc: &RunConfig,
) -> Result<HeatmapReport, Error> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let tc = TransformConfig {
        layout: rc.layout.clone(),
        ..Default::default()
    };
    let mut out = Vec::new();
    for r in 0..runs {
        let offset = 8 * rng.gen_range(0..4096u64);
        let fx = ct_swap(iterations, limbs, offset);
        let (inputs, _) = fx.instance(seed.wrapping_add(r as u64));
        let (prog, inputs) = if strategy == Strategy::None {
            (fx.program.clone(), inputs)
        } else {
            let sites = run_tainted(&fx.program, &inputs, rc)?;
            let m = mitigate(&fx.program, &sites, strategy, MaskVariant::Rdrand, &tc)?;
            let adapted = m.map.adapt_inputs(&inputs, &rc.layout);
            (m.program, adapted)
        };
        let (_, mon) = observe(&prog, &inputs, rc, seed as u128 ^ r as u128, [])?;
        let cells: Vec<u64> = fx
            .landmarks
            .operands
            .iter()
            .flat_map(|&(a, n)| (a..a + n).step_by(8))
            .collect();
        out.push(heatmap_run(
            &mon.trace,
            &mon.stores,
            &cells,
            &rc.layout,
            offset,
        ));
    }
    let diverted = matches!(strategy, Strategy::Obfuscate | Strategy::Full);
    let location_accuracy = location_classifier(&out, diverted)?;
    let populated: Vec<u64> = out
        .iter()
        .flat_map(|r| r.secure.iter().copied())
        .filter(|c| *c > 0)
        .collect();
    let uniformity = match (populated.iter().max(), populated.iter().min()) {
        (Some(&hi), Some(&lo)) => hi as f64 / lo as f64,
        _ => f64::INFINITY,
    };
    Ok(HeatmapReport {
        runs: out,
        location_accuracy,
        uniformity,
    })
}

/// Summary of one attack against one program variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackSummary {
    pub fixture: String,
    pub strategy: String,
    pub variant: Option<String>,
    pub results: BTreeMap<String, AttackResult>,
}

/// Runs the attacks that apply to `fx` against `prog` (the original or a
/// mitigation of it).
pub fn attack_fixture(
    fx: &Fixture,
    prog: &Program,
    inputs: &Inputs,
    truth: &GroundTruth,
    diverted: bool,
    rc: &RunConfig,
    key: u128,
) -> Result<BTreeMap<String, AttackResult>, Error> {
    let lm = &fx.landmarks;
    let mut probes: Vec<SiteId> = lm.pbit_stores.clone();
    probes.extend(lm.decision_load);
    let (_, mon) = observe(prog, inputs, rc, key, probes)?;
    let mut out = BTreeMap::new();
    if let Some(t) = DictionaryTarget::for_ladder(fx, prog, &rc.layout) {
        out.insert(
            "dictionary".into(),
            dictionary_attack(&mon.trace, &t, &truth.bits)?,
        );
    }
    if let Some(d) = lm.decision_load {
        for (name, level) in [
            ("collision_blind", AttackerLevel::ParityBlind),
            ("collision_aware", AttackerLevel::ParityAware),
        ] {
            let blocks = collision_blocks(level, &lm.operands, diverted, &rc.layout);
            let mut r = collision_attack(&mon.trace, d, &blocks, &truth.decisions)?;
            r.attack = name.into();
            out.insert(name.into(), r);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::FixtureKind;
    use crate::memenc::{ObsRecord, Probe};

    #[test]
    fn entropy_oracle_values() {
        assert_eq!(shannon_entropy(&[7; 10]).unwrap(), 0.0);
        assert!((shannon_entropy(&[0, 1, 0, 1]).unwrap() - 1.0).abs() < 1e-12);
        let v: Vec<u64> = (0..512).collect();
        assert!((shannon_entropy(&v).unwrap() - 9.0).abs() < 1e-12);
        assert_eq!(shannon_entropy(&[]), Err(AttackError::Empty));
    }

    #[test]
    fn empty_trace_gives_zero_accuracy() {
        let t = DictionaryTarget {
            block: 0,
            anchor: 0,
            bit_store: 1,
            stores: vec![0, 1],
        };
        let r = dictionary_attack(&ObservationTrace::default(), &t, &[1, 0, 1]).unwrap();
        assert_eq!(r.accuracy, 0.0);
        assert_eq!(r.unknown, 3);
    }

    #[test]
    fn dictionary_on_synthetic_trace() {
        // Two ciphertexts only: anchor = 0, then bits 1, 1, 0.
        let ct = |b: u8| [b; 16];
        let mut t = ObservationTrace::default();
        for (step, site, v) in [(1, 0, 0u8), (2, 1, 1), (3, 1, 1), (4, 1, 0)] {
            t.records.push(ObsRecord {
                step,
                addr: 0x40,
                ct: ct(v),
            });
            t.probes.push(Probe { step, site });
        }
        let target = DictionaryTarget {
            block: 0x40,
            anchor: 0,
            bit_store: 1,
            stores: vec![0, 1],
        };
        let r = dictionary_attack(&t, &target, &[1, 1, 0]).unwrap();
        assert_eq!(r.accuracy, 1.0);
    }

    #[test]
    fn unprotected_ladder_falls_to_the_dictionary() {
        let fx = Fixture::build(FixtureKind::LadderBitscan);
        let (inputs, truth) = fx.instance(9);
        let rc = RunConfig::default();
        let r = attack_fixture(&fx, &fx.program, &inputs, &truth, false, &rc, 1).unwrap();
        assert_eq!(r["dictionary"].accuracy, 1.0);
    }

    #[test]
    fn unprotected_swap_falls_to_collisions() {
        let fx = ct_swap(64, 8, 0);
        let (inputs, truth) = fx.instance(9);
        let rc = RunConfig::default();
        let r = attack_fixture(&fx, &fx.program, &inputs, &truth, false, &rc, 1).unwrap();
        assert_eq!(r["collision_blind"].accuracy, 1.0);
        assert_eq!(r["collision_aware"].accuracy, 1.0);
    }

    #[test]
    fn classifier_is_trivial_without_diversion() {
        let rc = RunConfig::default();
        let rep = heatmap_experiment(2, 16, 4, Strategy::None, 3, &rc).unwrap();
        assert_eq!(rep.location_accuracy, 1.0);
    }
}
