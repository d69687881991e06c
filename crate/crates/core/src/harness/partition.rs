//! Splitting a pooled sample across machines.

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::expfam::SampleSet;
use crate::harness::config::PartitionScheme;
use crate::rng::tagged_rng;

/// Partition a sample into d groups.
///
/// `IidRandom` shuffles with the seed and splits into equal-size groups
/// (requires d | n). `LabelWise` makes one group per distinct label value in
/// ascending label order (requires exactly d distinct labels; sizes may
/// differ, and the seed is unused).
pub fn partition_data(
    sample: &SampleSet,
    d: usize,
    scheme: PartitionScheme,
    seed: u64,
) -> Result<Vec<SampleSet>> {
    if d == 0 {
        return Err(Error::InvalidConfig("d must be >= 1".into()));
    }
    let n = sample.len();
    if d > n {
        return Err(Error::InvalidConfig(format!(
            "cannot split {n} points into {d} groups"
        )));
    }
    let groups_idx: Vec<Vec<usize>> = match scheme {
        PartitionScheme::IidRandom => {
            if n % d != 0 {
                return Err(Error::InvalidConfig(format!(
                    "iid_random needs d | n, got n = {n}, d = {d}"
                )));
            }
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut tagged_rng(seed, &[]));
            idx.chunks_exact(n / d).map(|c| c.to_vec()).collect()
        }
        PartitionScheme::LabelWise => {
            let labels = sample.labels().ok_or_else(|| {
                Error::InvalidConfig("label_wise partitioning needs labels".into())
            })?;
            let mut distinct: Vec<i64> = labels.to_vec();
            distinct.sort_unstable();
            distinct.dedup();
            if distinct.len() != d {
                return Err(Error::InvalidConfig(format!(
                    "label_wise needs exactly {d} distinct labels, found {}",
                    distinct.len()
                )));
            }
            distinct
                .iter()
                .map(|lv| (0..n).filter(|&i| labels[i] == *lv).collect::<Vec<usize>>())
                .collect()
        }
    };

    groups_idx
        .into_iter()
        .map(|idx| {
            let mut data = Vec::with_capacity(idx.len() * sample.dim());
            for &i in &idx {
                data.extend_from_slice(sample.point(i));
            }
            let set = SampleSet::new(sample.dim(), data)?;
            match sample.labels() {
                Some(labels) => set.with_labels(idx.iter().map(|&i| labels[i]).collect()),
                None => Ok(set),
            }
        })
        .collect()
}
