//! Datasets (CIFAR-10 binary batches and synthetic sets), pixel
//! normalization, checkpoint persistence and the prefetching batch queue.

mod checkpoint;
mod cifar;
mod loader;
mod normalize;
mod synthetic;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, RunState, CHECKPOINT_VERSION};
pub use cifar::{load_cifar10, read_batch_file, Dataset, Split, CIFAR_CLASSES, CIFAR_SIDE};
pub use loader::prefetch;
pub use normalize::{denormalize, normalize, normalize_into, CIFAR_MEAN, CIFAR_STD};
pub use synthetic::{synthetic_dataset, Synthetic};
