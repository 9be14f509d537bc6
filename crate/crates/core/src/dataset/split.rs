use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::AnnotationSet;
use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stratify {
    #[default]
    None,
    /// The split unit is already the image, so this is the same as `None`.
    Image,
    DomainTag,
}

/// Image-level split ratios. Each ratio lies in `(0, 1]` and they sum to 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub ratios: Vec<f64>,
    pub seed: u64,
    #[serde(default)]
    pub stratify_by: Stratify,
}

impl SplitSpec {
    pub fn new(ratios: Vec<f64>, seed: u64) -> Result<Self> {
        let spec = SplitSpec { ratios, seed, stratify_by: Stratify::None };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.ratios.is_empty() {
            return invalid("split needs at least one ratio");
        }
        if self.ratios.iter().any(|r| !(*r > 0.0 && *r <= 1.0)) {
            return invalid(format!("split ratios must lie in (0, 1], got {:?}", self.ratios));
        }
        let sum: f64 = self.ratios.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return invalid(format!("split ratios must sum to 1, got {sum}"));
        }
        Ok(())
    }
}

/// Number of items per split: largest-remainder rounding, then at least one
/// item per split. Each count is within one of `ratio * n`.
pub fn split_counts(n: usize, ratios: &[f64]) -> Result<Vec<usize>> {
    if ratios.len() > n {
        return invalid(format!("{} splits requested but only {n} images", ratios.len()));
    }
    let exact: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut rest = n - counts.iter().sum::<usize>().min(n);
    let mut by_remainder: Vec<usize> = (0..ratios.len()).collect();
    by_remainder.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.partial_cmp(&ra).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    for &i in by_remainder.iter().cycle() {
        if rest == 0 {
            break;
        }
        counts[i] += 1;
        rest -= 1;
    }
    // an empty split only happens for ratio * n < 1; take from the largest
    while let Some(empty) = counts.iter().position(|&c| c == 0) {
        let largest = (0..counts.len()).max_by_key(|&i| (counts[i], usize::MAX - i)).unwrap_or(0);
        counts[largest] -= 1;
        counts[empty] += 1;
    }
    Ok(counts)
}

fn shuffled<T: Clone>(items: &[T], rng: &mut ChaCha8Rng) -> Vec<T> {
    let mut v = items.to_vec();
    v.shuffle(rng);
    v
}

/// Partition images into splits sized by `spec.ratios`.
///
/// Deterministic for a fixed seed. With `Stratify::DomainTag` every split
/// receives a proportional share of each domain.
pub fn split_dataset(set: &AnnotationSet, spec: &SplitSpec) -> Result<Vec<AnnotationSet>> {
    spec.validate()?;
    if set.is_empty() {
        return invalid("cannot split an empty annotation set");
    }
    let n = set.images.len();
    let counts = split_counts(n, &spec.ratios)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let ids: Vec<&str> = set.images.iter().map(|i| i.image_id.as_str()).collect();

    let ordered: Vec<&str> = match spec.stratify_by {
        Stratify::None | Stratify::Image => shuffled(&ids, &mut rng),
        Stratify::DomainTag => {
            let mut groups: BTreeMap<Option<&str>, Vec<&str>> = BTreeMap::new();
            for img in &set.images {
                groups.entry(img.domain_tag.as_deref()).or_default().push(img.image_id.as_str());
            }
            groups.values().flat_map(|g| shuffled(g, &mut rng)).collect()
        }
    };

    // spread each split evenly along the ordering, so contiguous domain
    // groups are apportioned proportionally
    let mut assigned = vec![0usize; counts.len()];
    let mut members: Vec<HashSet<&str>> = vec![HashSet::new(); counts.len()];
    for (i, id) in ordered.iter().enumerate() {
        let progress = (i + 1) as f64 / n as f64;
        let s = (0..counts.len())
            .filter(|&s| assigned[s] < counts[s])
            .max_by(|&a, &b| {
                let da = counts[a] as f64 * progress - assigned[a] as f64;
                let db = counts[b] as f64 * progress - assigned[b] as f64;
                da.partial_cmp(&db).unwrap_or(std::cmp::Ordering::Equal).then(b.cmp(&a))
            })
            .expect("split quotas sum to the image count");
        assigned[s] += 1;
        members[s].insert(id);
    }
    Ok(members.iter().map(|m| set.subset(m)).collect())
}

/// Fold index of each of `n` items: a seeded shuffle dealt round-robin.
pub fn kfold_assignments(n: usize, k: usize, seed: u64) -> Result<Vec<usize>> {
    if k < 2 {
        return invalid(format!("k-fold needs k >= 2, got {k}"));
    }
    if k > n {
        return invalid(format!("k = {k} exceeds the number of items ({n})"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut fold = vec![0; n];
    for (pos, &item) in order.iter().enumerate() {
        fold[item] = pos % k;
    }
    Ok(fold)
}

/// `k` (train, validation) pairs; every image is validated exactly once.
pub fn kfold_split(set: &AnnotationSet, k: usize, seed: u64) -> Result<Vec<(AnnotationSet, AnnotationSet)>> {
    let fold = kfold_assignments(set.images.len(), k, seed)?;
    Ok((0..k)
        .map(|f| {
            let (mut train, mut val) = (HashSet::new(), HashSet::new());
            for (img, &of) in set.images.iter().zip(&fold) {
                if of == f {
                    val.insert(img.image_id.as_str());
                } else {
                    train.insert(img.image_id.as_str());
                }
            }
            (set.subset(&train), set.subset(&val))
        })
        .collect())
}
