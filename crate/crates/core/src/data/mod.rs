//! Rasters, tissue detection, patching, augmentation, preprocessing and
//! synthetic dataset generation.

pub mod augment;
pub mod image;
pub mod preprocess;
pub mod segment;
pub mod synth;

pub use augment::{augment, AugOp, AugmentSpec, Augmented, Flip};
pub use image::{load_raster, save_raster, RasterFormat, RgbImage};
pub use preprocess::{channel_means, preprocess, preprocess_batch, resize_bilinear};
pub use segment::{extract_patches, tissue_segment, Mask, PatchCoord, SegmentConfig};
pub use synth::{
    generate_slide, synth_patches, synth_slides, Dataset, DatasetKind, Manifest, PatchSynthConfig, SlideRecord, SlideSynthConfig,
    SyntheticSlide,
};
