use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::rng::SeededRng;

use super::{DatasetSplit, LabeledImageSet, LabeledVectorSet};

/// Sets that can be partitioned by class label.
pub trait Stratify: Sized {
    fn len(&self) -> usize;
    fn labels(&self) -> &[u8];
    /// Instances at `indices`, in that order.
    fn select(&self, indices: &[usize]) -> Self;
}

impl Stratify for LabeledVectorSet {
    fn len(&self) -> usize {
        LabeledVectorSet::len(self)
    }

    fn labels(&self) -> &[u8] {
        LabeledVectorSet::labels(self)
    }

    fn select(&self, indices: &[usize]) -> Self {
        let n = self.n_features();
        let mut features = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            features.extend_from_slice(self.row(i));
        }
        let labels = indices.iter().map(|&i| self.labels()[i]).collect();
        LabeledVectorSet::from_parts_unchecked(n, features, labels)
    }
}

impl Stratify for LabeledImageSet {
    fn len(&self) -> usize {
        LabeledImageSet::len(self)
    }

    fn labels(&self) -> &[u8] {
        LabeledImageSet::labels(self)
    }

    fn select(&self, indices: &[usize]) -> Self {
        LabeledImageSet::select(self, indices)
    }
}

fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor() as usize
}

/// Per-class sample sizes for a stratified draw of `fraction` of `class_counts`.
///
/// The total is `round_half_up(fraction * m)`. Each class gets
/// `floor(fraction * n_c)` and the remaining slots go to the classes with the
/// largest fractional remainders (ties: larger class first, then lower label),
/// so every class stays within one instance of its exact share.
pub fn stratified_counts(class_counts: &BTreeMap<u8, usize>, fraction: f64) -> Vec<(u8, usize)> {
    let total: usize = class_counts.values().sum();
    let target = round_half_up(fraction * total as f64).min(total);
    let mut alloc: Vec<(u8, usize, f64, usize)> = class_counts
        .iter()
        .map(|(&label, &n)| {
            let exact = fraction * n as f64;
            let base = (exact.floor() as usize).min(n);
            (label, base, exact - base as f64, n)
        })
        .collect();
    let assigned: usize = alloc.iter().map(|a| a.1).sum();
    let mut order: Vec<usize> = (0..alloc.len()).collect();
    order.sort_by(|&a, &b| {
        let (la, _, ra, na) = alloc[a];
        let (lb, _, rb, nb) = alloc[b];
        rb.total_cmp(&ra).then(nb.cmp(&na)).then(la.cmp(&lb))
    });
    let mut remaining = target.saturating_sub(assigned);
    for idx in order {
        if remaining == 0 {
            break;
        }
        if alloc[idx].1 < alloc[idx].3 {
            alloc[idx].1 += 1;
            remaining -= 1;
        }
    }
    alloc.into_iter().map(|(l, k, _, _)| (l, k)).collect()
}

fn class_indices(labels: &[u8]) -> BTreeMap<u8, Vec<usize>> {
    let mut by_class: BTreeMap<u8, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    by_class
}

/// Chosen indices (sorted) for a stratified draw.
fn stratified_selection(labels: &[u8], fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Argument(format!(
            "fraction {fraction} outside (0, 1]"
        )));
    }
    let by_class = class_indices(labels);
    let counts: BTreeMap<u8, usize> = by_class.iter().map(|(&l, v)| (l, v.len())).collect();
    let mut rng = SeededRng::new(seed);
    let mut chosen = Vec::new();
    for (label, k) in stratified_counts(&counts, fraction) {
        let members = &by_class[&label];
        // Draw a permutation for every class, even when k == n, so the PRNG
        // stream does not depend on the fraction.
        let order = rng.permutation(members.len());
        chosen.extend(order[..k].iter().map(|&j| members[j]));
    }
    chosen.sort_unstable();
    Ok(chosen)
}

/// Draws `fraction` of every class with a seeded PRNG; the kept instances
/// retain their original relative order.
pub fn subsample_stratified<S: Stratify>(set: &S, fraction: f64, seed: u64) -> Result<S> {
    let chosen = stratified_selection(set.labels(), fraction, seed)?;
    if chosen.is_empty() {
        return Err(Error::Argument(format!(
            "fraction {fraction} selects no instances"
        )));
    }
    Ok(set.select(&chosen))
}

/// Partitions a set into stratified train/test parts, `test_fraction` of
/// each class going to test.
pub fn split_stratified<S: Stratify>(
    set: &S,
    test_fraction: f64,
    seed: u64,
) -> Result<DatasetSplit<S>> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::Argument(format!(
            "test fraction {test_fraction} outside (0, 1)"
        )));
    }
    let test_idx = stratified_selection(set.labels(), test_fraction, seed)?;
    let mut is_test = vec![false; set.len()];
    for &i in &test_idx {
        is_test[i] = true;
    }
    let train_idx: Vec<usize> = (0..set.len()).filter(|&i| !is_test[i]).collect();
    DatasetSplit::new(set.select(&train_idx), set.select(&test_idx))
}
