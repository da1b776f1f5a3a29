//! File formats, synthetic scenes, dataset construction and batching.

pub mod cloud;
pub mod dataset;
pub mod range_file;
pub mod synth;

pub use cloud::{
    read_labeled_point_cloud, read_point_cloud, write_labeled_point_cloud, write_point_cloud,
};
pub use dataset::{
    batch_iterator, batch_plan, build_dataset, epoch_order, Batch, BuildOptions, Dataset,
    Manifest, ManifestSample, SourceCloud, Split,
};
pub use range_file::RangeSample;
pub use synth::{generate_scene, write_scenes, Scene, SceneSpec};
