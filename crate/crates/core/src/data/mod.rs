//! Volume ingestion, preprocessing, dataset splits and the synthetic phantom.

pub mod manifest;
pub mod nifti;
pub mod phantom;
pub mod preprocess;
pub mod splits;
mod volume;

pub use manifest::{Manifest, ManifestVolume, OrganSpec};
pub use phantom::{generate_phantom, PhantomCase, PhantomConfig};
pub use preprocess::{enhance_contrast, extract_slices, resize_labels_nearest, PreprocessOptions, SliceSample, Window};
pub use splits::{make_splits, DatasetKind, SplitSpec};
pub use volume::{load_volume, save_volume, CtVolume};
