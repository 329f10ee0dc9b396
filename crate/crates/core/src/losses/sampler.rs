use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::Class;
use crate::error::{Error, Result};
use crate::features::Modality;

/// Sample ids grouped by (class, modality).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StratifiedPool {
    pub strata: BTreeMap<(Class, Modality), Vec<usize>>,
}

impl StratifiedPool {
    pub fn from_labels(labels: impl IntoIterator<Item = (Class, Modality)>) -> Self {
        let mut strata: BTreeMap<_, Vec<usize>> = BTreeMap::new();
        for (id, key) in labels.into_iter().enumerate() {
            strata.entry(key).or_default().push(id);
        }
        Self { strata }
    }

    /// Declares a stratum that must be filled before sampling.
    pub fn require(&mut self, class: Class, modality: Modality) {
        self.strata.entry((class, modality)).or_default();
    }
}

/// Draws the same number of ids from every stratum: without replacement,
/// or with replacement when a stratum is smaller than its quota. Strata are
/// visited in key order.
pub fn balanced_batch_sampler(
    pool: &StratifiedPool,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    if let Some(((c, m), _)) = pool.strata.iter().find(|(_, ids)| ids.is_empty()) {
        return Err(Error::EmptyStratum(format!("{c:?}/{m}")));
    }
    let n_strata = pool.strata.len();
    if n_strata == 0 {
        return Err(Error::EmptyStratum("no strata".into()));
    }
    if batch_size == 0 || !batch_size.is_multiple_of(n_strata) {
        return Err(Error::IndivisibleBatch {
            batch: batch_size,
            strata: n_strata,
        });
    }
    let quota = batch_size / n_strata;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(batch_size);
    for ids in pool.strata.values() {
        if ids.len() >= quota {
            out.extend(
                sample(&mut rng, ids.len(), quota)
                    .into_iter()
                    .map(|k| ids[k]),
            );
        } else {
            out.extend((0..quota).map(|_| ids[rng.random_range(0..ids.len())]));
        }
    }
    Ok(out)
}
