//! Strategy selection and pass ordering.

use super::regalloc::AllocationReport;
use super::{
    allocate_rewrite, mask_rewrite, obfuscate_rewrite, MaskScope, MaskVariant, MitigationMap,
    Strategy, TransformConfig,
};
use crate::error::TransformError;
use crate::mir::Program;
use crate::taint::SensitiveSiteSet;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mitigated {
    pub program: Program,
    pub map: MitigationMap,
    pub allocation: Option<AllocationReport>,
}

/// Applies `strategy` to `p`. Register promotion runs first, masking covers
/// whatever stack state it could not place, and heap cells are either
/// masked or diverted.
pub fn mitigate(
    p: &Program,
    sites: &SensitiveSiteSet,
    strategy: Strategy,
    variant: MaskVariant,
    cfg: &TransformConfig,
) -> Result<Mitigated, TransformError> {
    sites.check_against(p)?;
    let mut map = MitigationMap::new(strategy, p);
    map.nonce_mode = cfg.nonce_mode;
    let mut allocation = None;
    let mut cur = p.clone();
    if matches!(strategy, Strategy::Regalloc | Strategy::Full) {
        let (q, m, r) = allocate_rewrite(&cur, sites, variant)?;
        cur = q;
        map.merge(m);
        allocation = Some(r);
    }
    if strategy.masks() {
        let scope = MaskScope {
            stack: true,
            heap: strategy != Strategy::Full,
        };
        let (q, m) = mask_rewrite(&cur, sites, variant, scope, cfg)?;
        cur = q;
        map.merge(m);
    }
    if matches!(strategy, Strategy::Obfuscate | Strategy::Full) {
        let (q, m) = obfuscate_rewrite(&cur, sites, cfg)?;
        cur = q;
        map.merge(m);
    }
    if strategy == Strategy::Obfuscate {
        map.variant = None;
    }
    Ok(Mitigated {
        program: cur,
        map,
        allocation,
    })
}

pub fn full_pipeline(
    p: &Program,
    sites: &SensitiveSiteSet,
    cfg: &TransformConfig,
) -> Result<Mitigated, TransformError> {
    mitigate(p, sites, Strategy::Full, MaskVariant::Rdrand, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::Fixture;
    use crate::interp::{run, RunConfig};
    use crate::mir::{check_fresh_ids, validate};
    use crate::taint::run_tainted;

    #[test]
    fn every_strategy_preserves_fixture_outputs() {
        let rc = RunConfig::default();
        let cfg = TransformConfig::default();
        for fx in Fixture::all() {
            let (inputs, _) = fx.instance(11);
            let sites = run_tainted(&fx.program, &inputs, &rc).unwrap();
            let a = run(&fx.program, &inputs, &rc, None).unwrap();
            for s in Strategy::ALL {
                let m = mitigate(&fx.program, &sites, s, MaskVariant::Rdrand, &cfg).unwrap();
                assert!(
                    validate(&m.program).is_empty(),
                    "{} {}",
                    fx.name(),
                    s.name()
                );
                assert!(check_fresh_ids(&fx.program, &m.program).is_empty());
                let b = run(
                    &m.program,
                    &m.map.adapt_inputs(&inputs, &cfg.layout),
                    &rc,
                    None,
                )
                .unwrap();
                assert_eq!(a.trace, b.trace, "{} {}", fx.name(), s.name());
                assert!(b.cost > a.cost);
            }
        }
    }
}
