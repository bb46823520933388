//! Datasets: synthetic generators, tabular and byte-image ingestion, PCA and
//! pool/test splitting.

pub mod dataset;
pub mod image;
pub mod pca;
pub mod split;
pub mod tabular;
pub mod toy;

pub use dataset::{Dataset, SampleId};
pub use image::{bytes_to_image, DEFAULT_IMAGE_WIDTH};
pub use pca::{pca_fit, pca_transform, PcaModel};
pub use split::{split, SplitSpec};
pub use tabular::{load_csv, write_csv};
pub use toy::{gen_bars, gen_toy1, gen_toy2, gen_two_moons};
