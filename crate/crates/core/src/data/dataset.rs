use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{streams, Rng, Tensor};

pub const MNIST_CLASSES: [&str; 10] = ["0", "1", "2", "3", "4", "5", "6", "7", "8", "9"];

pub const FMNIST_CLASSES: [&str; 10] = [
    "t-shirt",
    "trouser",
    "pullover",
    "dress",
    "coat",
    "sandal",
    "shirt",
    "sneaker",
    "bag",
    "ankle-boot",
];

/// FMNIST classes 0–5 keep their labels; MNIST digits 4–9 become 6–11.
pub const COMBINED_CLASSES: [&str; 12] = [
    "t-shirt", "trouser", "pullover", "dress", "coat", "sandal", "4", "5", "6", "7", "8", "9",
];

/// Labelled images, `N×1×H×W` with pixels in `[0, 1]`.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, class_names: Vec<String>) -> Result<Self> {
        if images.shape().len() != 4 {
            return Err(Error::shape("dataset", images.shape(), &[0, 1, 0, 0]));
        }
        let n = images.shape()[0];
        if n == 0 {
            return Err(Error::contract("dataset must not be empty"));
        }
        if labels.len() != n {
            return Err(Error::CountMismatch {
                images: n,
                labels: labels.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_names.len()) {
            return Err(Error::contract(format!(
                "label {bad} out of range for {} classes",
                class_names.len()
            )));
        }
        if images.data().iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::contract("pixel values must lie in [0, 1]"));
        }
        Ok(Dataset {
            images,
            labels,
            class_names,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Flattened pixels per sample.
    pub fn sample_dim(&self) -> usize {
        self.images.shape()[1..].iter().product()
    }

    pub fn with_class_names(mut self, names: &[&str]) -> Result<Self> {
        let names: Vec<String> = names.iter().map(|s| s.to_string()).collect();
        if self.labels.iter().any(|&l| l >= names.len()) {
            return Err(Error::contract("class name list shorter than label range"));
        }
        self.class_names = names;
        Ok(self)
    }

    /// Samples at the given indices, in that order.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            images: self.images.gather_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            class_names: self.class_names.clone(),
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut by = vec![Vec::new(); self.num_classes()];
        for (i, &l) in self.labels.iter().enumerate() {
            by[l].push(i);
        }
        by
    }
}

/// Disjoint, non-empty groups of class labels, one per expert.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<usize>>", into = "Vec<Vec<usize>>")]
pub struct ClassSplit {
    groups: Vec<Vec<usize>>,
}

impl ClassSplit {
    pub fn new(groups: Vec<Vec<usize>>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for g in &groups {
            if g.is_empty() {
                return Err(Error::contract("class split contains an empty group"));
            }
            for &c in g {
                if !seen.insert(c) {
                    return Err(Error::contract(format!("class {c} appears in two groups")));
                }
            }
        }
        Ok(ClassSplit { groups })
    }

    /// `{[0,7], [1,9], [2,4], [3,8], [5,6]}`
    pub fn mnist_pairs() -> Self {
        Self::new(vec![vec![0, 7], vec![1, 9], vec![2, 4], vec![3, 8], vec![5, 6]]).expect("valid split")
    }

    /// `{[t-shirt,trouser], [pullover,dress], [coat,sandal], [4,5], [6,7], [8,9]}`
    pub fn combined_pairs() -> Self {
        Self::new((0..6).map(|i| vec![2 * i, 2 * i + 1]).collect()).expect("valid split")
    }

    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    /// Group index containing `class`, if any.
    pub fn group_of(&self, class: usize) -> Option<usize> {
        self.groups.iter().position(|g| g.contains(&class))
    }
}

impl TryFrom<Vec<Vec<usize>>> for ClassSplit {
    type Error = Error;
    fn try_from(groups: Vec<Vec<usize>>) -> Result<Self> {
        Self::new(groups)
    }
}

impl From<ClassSplit> for Vec<Vec<usize>> {
    fn from(s: ClassSplit) -> Self {
        s.groups
    }
}

/// Samples whose label is in `group`; labels are kept as they are.
pub fn filter_by_group(ds: &Dataset, group: &[usize]) -> Result<Dataset> {
    let idx: Vec<usize> = (0..ds.len()).filter(|&i| group.contains(&ds.labels[i])).collect();
    if idx.is_empty() {
        return Err(Error::EmptyDataset(group.to_vec()));
    }
    Ok(ds.subset(&idx))
}

/// Per-class quotas for `n` samples over `k` classes: every class gets
/// `n / k`, and a seeded choice of `n % k` classes gets one more.
fn quotas(n: usize, k: usize, rng: &mut Rng) -> Vec<usize> {
    let mut q = vec![n / k; k];
    let order = rng.permutation(k);
    for &c in order.iter().take(n % k) {
        q[c] += 1;
    }
    q
}

/// Draw `n` samples with per-class counts differing by at most one.
/// Returned indices are in ascending order.
fn balanced_indices(pools: &mut [Vec<usize>], n: usize, rng: &mut Rng) -> Result<Vec<usize>> {
    let q = quotas(n, pools.len(), rng);
    let mut picked = Vec::with_capacity(n);
    for (class, (pool, want)) in pools.iter_mut().zip(q).enumerate() {
        if want > pool.len() {
            return Err(Error::Capacity {
                class,
                requested: want,
                available: pool.len(),
            });
        }
        picked.extend(pool.drain(..want));
    }
    picked.sort_unstable();
    Ok(picked)
}

fn shuffled_pools(ds: &Dataset, rng: &mut Rng) -> Vec<Vec<usize>> {
    let mut pools = ds.indices_by_class();
    for p in &mut pools {
        rng.shuffle(p);
    }
    pools
}

/// Class-balanced seeded subsample of `n` samples.
pub fn balanced_subsample(ds: &Dataset, n: usize, seed: u64) -> Result<Dataset> {
    let mut rng = Rng::stream(seed, streams::SUBSAMPLE);
    let mut pools = shuffled_pools(ds, &mut rng);
    let idx = balanced_indices(&mut pools, n, &mut rng)?;
    Ok(ds.subset(&idx))
}

/// Relabel and concatenate the 12-class FMNIST+MNIST task without
/// subsampling.
pub fn merge_fmnist_mnist(fmnist: &Dataset, mnist: &Dataset) -> Result<Dataset> {
    let fm: Vec<usize> = (0..fmnist.len()).filter(|&i| fmnist.labels[i] < 6).collect();
    let mn: Vec<usize> = (0..mnist.len()).filter(|&i| mnist.labels[i] >= 4).collect();
    let (a, b) = (fmnist.subset(&fm), mnist.subset(&mn));
    if a.images.shape()[1..] != b.images.shape()[1..] {
        return Err(Error::shape("merge_fmnist_mnist", a.images.shape(), b.images.shape()));
    }
    let mut shape = a.images.shape().to_vec();
    shape[0] = a.len() + b.len();
    let mut data = a.images.into_data();
    data.extend_from_slice(b.images.data());
    let mut labels = a.labels;
    labels.extend(b.labels.iter().map(|&l| l + 2));
    let names = COMBINED_CLASSES.iter().map(|s| s.to_string()).collect();
    Dataset::new(Tensor::new(shape, data)?, labels, names)
}

/// Build disjoint class-balanced train and test sets for the 12-class
/// FMNIST+MNIST task from the given pools.
pub fn combine_fmnist_mnist(
    fmnist: &Dataset,
    mnist: &Dataset,
    train_n: usize,
    test_n: usize,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    let merged = merge_fmnist_mnist(fmnist, mnist)?;
    let mut rng = Rng::stream(seed, streams::SUBSAMPLE);
    let mut pools = shuffled_pools(&merged, &mut rng);
    let train = balanced_indices(&mut pools, train_n, &mut rng)?;
    let test = balanced_indices(&mut pools, test_n, &mut rng)?;
    Ok((merged.subset(&train), merged.subset(&test)))
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    // splitmix64 finalizer over (seed, epoch)
    let mut z = seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One epoch of mini-batches in a seeded order.
pub struct Batches<'a> {
    ds: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl Batches<'_> {
    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn num_batches(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }
}

impl Iterator for Batches<'_> {
    type Item = (Tensor, Vec<usize>);

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let idx = &self.order[self.pos..end];
        self.pos = end;
        let images = self.ds.images.gather_rows(idx);
        let labels = idx.iter().map(|&i| self.ds.labels[i]).collect();
        Some((images, labels))
    }
}

/// Mini-batches for one epoch. The permutation depends only on
/// `(seed, epoch)`; the last batch may be short.
pub fn batches(ds: &Dataset, batch_size: usize, seed: u64, epoch: usize) -> Result<Batches<'_>> {
    if batch_size < 1 {
        return Err(Error::contract("batch_size must be at least 1"));
    }
    let mut rng = Rng::stream(epoch_seed(seed, epoch), streams::SHUFFLE);
    Ok(Batches {
        ds,
        order: rng.permutation(ds.len()),
        batch_size,
        pos: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Synthetic dataset with `per_class` samples of each class; pixel 0
    /// encodes the sample index so subsets can be traced.
    pub(crate) fn synthetic(classes: usize, per_class: usize, names: &[&str]) -> Dataset {
        let n = classes * per_class;
        let mut data = vec![0.0; n * 4];
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            data[i * 4] = i as f64 / n as f64;
            labels.push(i % classes);
        }
        let images = Tensor::new(vec![n, 1, 2, 2], data).unwrap();
        Dataset::new(images, labels, names.iter().map(|s| s.to_string()).collect()).unwrap()
    }

    fn digits(per_class: usize) -> Dataset {
        synthetic(10, per_class, &MNIST_CLASSES)
    }

    #[test]
    fn filter_keeps_only_the_group() {
        let ds = digits(7);
        let f = filter_by_group(&ds, &[0, 7]).unwrap();
        assert_eq!(f.len(), 14);
        assert!(f.labels.iter().all(|&l| l == 0 || l == 7));

        let all: Vec<usize> = (0..10).collect();
        let same = filter_by_group(&ds, &all).unwrap();
        assert_eq!(same.labels, ds.labels);
        assert_eq!(same.images, ds.images);

        assert!(matches!(filter_by_group(&ds, &[99]), Err(Error::EmptyDataset(_))));
    }

    #[test]
    fn filter_size_is_sum_of_class_counts() {
        let ds = balanced_subsample(&digits(9), 53, 3).unwrap();
        let counts = ds.class_counts();
        for group in [vec![1usize, 9], vec![2, 4, 6], vec![3]] {
            let f = filter_by_group(&ds, &group).unwrap();
            assert_eq!(f.len(), group.iter().map(|&c| counts[c]).sum::<usize>());
        }
    }

    #[test]
    fn batches_cover_epoch_once() {
        let ds = digits(1);
        let sizes: Vec<usize> = batches(&ds, 4, 1, 0).unwrap().map(|(_, l)| l.len()).collect();
        assert_eq!(sizes, vec![4, 4, 2]);

        let order = batches(&ds, 4, 1, 0).unwrap().order().to_vec();
        let mut sorted = order.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..10).collect::<Vec<_>>());
        assert!(batches(&ds, 0, 1, 0).is_err());
    }

    #[test]
    fn batch_order_is_a_function_of_seed_and_epoch() {
        let ds = digits(3);
        let a = batches(&ds, 5, 11, 2).unwrap().order().to_vec();
        let b = batches(&ds, 5, 11, 2).unwrap().order().to_vec();
        assert_eq!(a, b);
        for (seed, e1, e2) in [(11, 2, 3), (0, 0, 1), (7, 5, 6)] {
            let x = batches(&ds, 5, seed, e1).unwrap().order().to_vec();
            let y = batches(&ds, 5, seed, e2).unwrap().order().to_vec();
            assert_ne!(x, y);
        }
    }

    #[test]
    fn balanced_subsample_is_balanced() {
        let ds = digits(50);
        for n in [10, 37, 99, 500] {
            let s = balanced_subsample(&ds, n, 5).unwrap();
            assert_eq!(s.len(), n);
            let c = s.class_counts();
            assert!(c.iter().max().unwrap() - c.iter().min().unwrap() <= 1);
        }
        assert!(matches!(balanced_subsample(&ds, 501, 5), Err(Error::Capacity { .. })));
    }

    #[test]
    fn combined_dataset_label_mapping() {
        let fm = synthetic(10, 4, &FMNIST_CLASSES);
        let mn = digits(4);
        let merged = merge_fmnist_mnist(&fm, &mn).unwrap();
        assert_eq!(merged.num_classes(), 12);
        assert_eq!(merged.len(), 48);
        // FMNIST "trouser" (1) stays 1; MNIST 4 becomes 6.
        let fm_trouser = fm.labels.iter().position(|&l| l == 1).unwrap();
        let pixel = fm.images.data()[fm_trouser * 4];
        let at = (0..merged.len())
            .find(|&i| merged.images.data()[i * 4] == pixel && i < 24)
            .unwrap();
        assert_eq!(merged.labels[at], 1);
        let mn_four = mn.labels.iter().position(|&l| l == 4).unwrap();
        let pixel = mn.images.data()[mn_four * 4];
        let at = (24..merged.len())
            .find(|&i| merged.images.data()[i * 4] == pixel)
            .unwrap();
        assert_eq!(merged.labels[at], 6);
        assert_eq!(merged.class_names[6], "4");
        assert_eq!(merged.class_names[1], "trouser");
    }

    #[test]
    fn combine_draws_disjoint_balanced_sets() {
        let fm = synthetic(10, 30, &FMNIST_CLASSES);
        let mn = digits(30);
        let (train, test) = combine_fmnist_mnist(&fm, &mn, 120, 60, 9).unwrap();
        assert_eq!((train.len(), test.len()), (120, 60));
        for ds in [&train, &test] {
            let c = ds.class_counts();
            assert!(c.iter().max().unwrap() - c.iter().min().unwrap() <= 1);
        }
        let key = |d: &Dataset, i: usize| (d.labels[i], d.images.data()[i * 4].to_bits());
        let train_keys: BTreeSet<_> = (0..train.len()).map(|i| key(&train, i)).collect();
        assert!((0..test.len()).all(|i| !train_keys.contains(&key(&test, i))));
        assert!(matches!(
            combine_fmnist_mnist(&fm, &mn, 10_000_000, 10, 9),
            Err(Error::Capacity { .. })
        ));
    }

    #[test]
    fn class_split_validation() {
        assert_eq!(ClassSplit::mnist_pairs().len(), 5);
        assert_eq!(ClassSplit::mnist_pairs().group_of(9), Some(1));
        assert!(ClassSplit::new(vec![vec![0, 1], vec![1, 2]]).is_err());
        assert!(ClassSplit::new(vec![vec![0], vec![]]).is_err());
        let json = serde_json::to_string(&ClassSplit::mnist_pairs()).unwrap();
        assert_eq!(json, "[[0,7],[1,9],[2,4],[3,8],[5,6]]");
        assert!(serde_json::from_str::<ClassSplit>("[[0,1],[1]]").is_err());
    }

    #[test]
    fn dataset_invariants_are_enforced() {
        let img = Tensor::zeros(&[2, 1, 2, 2]);
        assert!(Dataset::new(img.clone(), vec![0, 3], vec!["a".into(), "b".into()]).is_err());
        assert!(Dataset::new(img.clone(), vec![0], vec!["a".into()]).is_err());
        let bad = Tensor::full(&[1, 1, 1, 1], 1.5);
        assert!(Dataset::new(bad, vec![0], vec!["a".into()]).is_err());
    }
}
