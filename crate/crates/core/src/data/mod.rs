//! Datasets, the synthetic localized-glyph benchmark, PPM interchange and
//! checkpoint persistence.

mod checkpoint;
mod dataset;
mod ppm;
mod synthetic;

pub use checkpoint::{load_records, save_records, Record, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use dataset::{export_dataset, load_dataset, ClassImages, Dataset, ImageRef, Split, SplitKind};
pub use ppm::{read_ppm, write_ppm};
pub use synthetic::{generate_synthetic_dataset, SyntheticSpec};
