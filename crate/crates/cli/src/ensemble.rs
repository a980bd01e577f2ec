//! Disjoint subsets of a trained model pool, used as the repeats of the
//! ensembling method.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::Serialize;
use uqbench::rng::rng_from_seed;

use crate::error::CliError;

pub const PARTITION_STRATEGY: &str = "disjoint-partition";

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct SubsetDraw {
    pub strategy: &'static str,
    pub pool_size: usize,
    pub m: usize,
    pub seed: u64,
    /// Pool indices of each subset.
    pub sets: Vec<Vec<usize>>,
}

/// Shuffle the pool indices with `seed` and cut them into `draws` (default
/// `floor(pool / m)`) disjoint sets of size `m`.
pub fn partition_pool(pool: usize, m: usize, draws: Option<usize>, seed: u64) -> Result<SubsetDraw, CliError> {
    if m == 0 {
        return Err(CliError::Validation("ensemble size M must be at least 1".into()));
    }
    if pool < m {
        return Err(CliError::Validation(format!(
            "model pool of {pool} is too small for M = {m}; need pool_size >= M"
        )));
    }
    let available = pool / m;
    let draws = draws.unwrap_or(available);
    if draws == 0 || draws > available {
        return Err(CliError::Validation(format!(
            "{draws} disjoint sets of {m} requested from a pool of {pool}; at most {available} are available"
        )));
    }
    let mut order: Vec<usize> = (0..pool).collect();
    order.shuffle(&mut rng_from_seed(seed));
    let sets = order.chunks_exact(m).take(draws).map(<[usize]>::to_vec).collect();
    Ok(SubsetDraw {
        strategy: PARTITION_STRATEGY,
        pool_size: pool,
        m,
        seed,
        sets,
    })
}

/// Evaluate every set of [`partition_pool`]; `eval` gets the set index and
/// the set. Values are in set order.
pub fn ensemble_subset_aggregation<F>(
    pool: usize,
    m: usize,
    draws: Option<usize>,
    seed: u64,
    eval: F,
) -> Result<(SubsetDraw, Vec<f64>), CliError>
where
    F: Fn(usize, &[usize]) -> Result<f64, CliError> + Sync,
{
    let draw = partition_pool(pool, m, draws, seed)?;
    let values = draw
        .sets
        .par_iter()
        .enumerate()
        .map(|(i, set)| eval(i, set))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((draw, values))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    #[test]
    fn four_by_two_covers_pool() {
        let d = partition_pool(4, 2, None, 1).unwrap();
        assert_eq!(d.sets.len(), 2);
        let all: BTreeSet<usize> = d.sets.iter().flatten().copied().collect();
        assert_eq!(all, (0..4).collect());
    }

    #[test]
    fn four_by_four_is_one_set() {
        let d = partition_pool(4, 4, None, 1).unwrap();
        assert_eq!(d.sets.len(), 1);
        assert_eq!(d.sets[0].len(), 4);
    }

    #[test]
    fn fixed_seed_is_deterministic() {
        assert_eq!(partition_pool(8, 2, None, 9).unwrap(), partition_pool(8, 2, None, 9).unwrap());
        assert_ne!(partition_pool(8, 2, None, 9).unwrap().sets, partition_pool(8, 2, None, 10).unwrap().sets);
    }

    #[test]
    fn too_small_pool_is_rejected() {
        assert!(matches!(partition_pool(3, 4, None, 0), Err(CliError::Validation(_))));
        assert!(partition_pool(8, 2, Some(5), 0).is_err());
        assert!(partition_pool(8, 0, None, 0).is_err());
    }

    #[test]
    fn aggregation_records_draws() {
        let (d, v) = ensemble_subset_aggregation(6, 3, Some(2), 4, |_, s| Ok(s.iter().sum::<usize>() as f64)).unwrap();
        assert_eq!(d.strategy, PARTITION_STRATEGY);
        assert_eq!(v.len(), 2);
        assert_eq!(v.iter().sum::<f64>(), 15.0);
    }

    proptest! {
        #[test]
        fn sets_are_disjoint_and_sized(pool in 1usize..60, m in 1usize..20, seed in any::<u64>()) {
            prop_assume!(m <= pool);
            let d = partition_pool(pool, m, None, seed).unwrap();
            prop_assert_eq!(d.sets.len(), pool / m);
            let mut seen = BTreeSet::new();
            for s in &d.sets {
                prop_assert_eq!(s.len(), m);
                for &i in s {
                    prop_assert!(i < pool);
                    prop_assert!(seen.insert(i));
                }
            }
        }
    }
}
