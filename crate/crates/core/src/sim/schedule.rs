//! Static round-robin dispatch of PTC invocations to the cores of one engine.

/// Invocation count per core after dealing `invocations` round-robin over
/// `cores` cores. The busiest core's count is the engine's cycle count.
pub fn round_robin(invocations: u64, cores: usize) -> Vec<u64> {
    let cores = cores.max(1) as u64;
    let (base, extra) = (invocations / cores, invocations % cores);
    (0..cores).map(|c| base + u64::from(c < extra)).collect()
}

/// Cycles for `invocations` on `cores` cores: `ceil(invocations / cores)`.
pub fn engine_cycles(invocations: u64, cores: usize) -> u64 {
    let per_core = round_robin(invocations, cores);
    debug_assert_eq!(per_core.iter().sum::<u64>(), invocations);
    per_core.into_iter().max().unwrap_or(0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn conserves_and_balances(inv in 0u64..10_000, cores in 1usize..64) {
            let per = round_robin(inv, cores);
            prop_assert_eq!(per.len(), cores);
            prop_assert_eq!(per.iter().sum::<u64>(), inv);
            let (lo, hi) = (per.iter().min().unwrap(), per.iter().max().unwrap());
            prop_assert!(hi - lo <= 1);
            prop_assert_eq!(engine_cycles(inv, cores), inv.div_ceil(cores as u64));
        }
    }
}
