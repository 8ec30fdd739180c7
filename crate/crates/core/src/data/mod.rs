//! Image datasets: IDX ingestion, the combined FMNIST+MNIST task, class
//! splits and seeded mini-batching.

mod dataset;
mod idx;

pub use dataset::{
    balanced_subsample, batches, combine_fmnist_mnist, filter_by_group, merge_fmnist_mnist, Batches, ClassSplit,
    Dataset, COMBINED_CLASSES, FMNIST_CLASSES, MNIST_CLASSES,
};
pub use idx::{encode_images, encode_labels, load_idx, load_split, parse_idx, write_idx, Split};
