//! Seeded epoch samplers: instance-level random and class-level random
//! (class-balanced), plus the deferred switch between them.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::distribution::{Dataset, Partition};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerMode {
    InstanceRandom,
    ClassBalanced,
}

/// One epoch of instance-level random sampling: a uniform shuffle of the
/// given ids, chunked into batches (last one may be short).
pub fn instance_batches_from_ids(
    ids: &[u64],
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<u64>>> {
    if ids.is_empty() {
        return Err(Error::Validation("no instances to sample".into()));
    }
    if batch_size == 0 {
        return Err(Error::InvalidSpec("batch_size must be >= 1".into()));
    }
    let mut shuffled = ids.to_vec();
    // Fisher-Yates
    for i in (1..shuffled.len()).rev() {
        shuffled.swap(i, rng.gen_range(0..=i));
    }
    Ok(shuffled.chunks(batch_size).map(<[u64]>::to_vec).collect())
}

pub fn instance_batches(dataset: &Dataset, batch_size: usize, seed: u64) -> Result<Vec<Vec<u64>>> {
    let ids: Vec<u64> = dataset.partition(Partition::Train).map(|i| i.id).collect();
    instance_batches_from_ids(&ids, batch_size, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// One epoch of class-level random sampling: each draw picks a class
/// uniformly, then an instance uniformly within it, with replacement.
pub fn class_balanced_batches_from_ids(
    ids_by_class: &BTreeMap<u32, Vec<u64>>,
    batch_size: usize,
    epoch_len: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<u64>>> {
    if batch_size == 0 {
        return Err(Error::InvalidSpec("batch_size must be >= 1".into()));
    }
    for (&class, members) in ids_by_class {
        if members.is_empty() {
            return Err(Error::Validation(format!(
                "class {class} has no train instances"
            )));
        }
    }
    let classes: Vec<&Vec<u64>> = ids_by_class.values().collect();
    if classes.is_empty() {
        return Err(Error::Validation("no classes to sample".into()));
    }
    let mut batches = Vec::with_capacity(epoch_len);
    for _ in 0..epoch_len {
        let batch = (0..batch_size)
            .map(|_| {
                let members = classes[rng.gen_range(0..classes.len())];
                members[rng.gen_range(0..members.len())]
            })
            .collect();
        batches.push(batch);
    }
    Ok(batches)
}

pub fn class_balanced_batches(
    dataset: &Dataset,
    batch_size: usize,
    epoch_len: Option<usize>,
    seed: u64,
) -> Result<Vec<Vec<u64>>> {
    let groups = train_ids_by_class(dataset);
    let n: usize = groups.values().map(Vec::len).sum();
    if n == 0 {
        return Err(Error::Validation("no train instances".into()));
    }
    let epoch_len = epoch_len.unwrap_or(n.div_ceil(batch_size.max(1)));
    class_balanced_batches_from_ids(
        &groups,
        batch_size,
        epoch_len,
        &mut ChaCha8Rng::seed_from_u64(seed),
    )
}

pub fn train_ids_by_class(dataset: &Dataset) -> BTreeMap<u32, Vec<u64>> {
    let mut groups: BTreeMap<u32, Vec<u64>> = BTreeMap::new();
    for inst in dataset.partition(Partition::Train) {
        groups.entry(inst.label).or_default().push(inst.id);
    }
    groups
}

/// Deferred class-balanced sampling: instance-level before `switch_epoch`,
/// class-balanced at and after. Epochs are 1-based.
pub fn deferred_schedule(switch_epoch: usize, epoch: usize) -> SamplerMode {
    if epoch >= switch_epoch {
        SamplerMode::ClassBalanced
    } else {
        SamplerMode::InstanceRandom
    }
}
