//! Visual relocalization against a database of posed RGB-D keyframes,
//! augmented with virtual viewpoints whose features are rendered by
//! projecting nearby keyframes.
//!
//! The crate is organised bottom-up:
//!
//! - [`geometry`]: poses, pinhole projection, pose errors
//! - [`image`]: raster containers and their file formats
//! - [`scene_db`]: the keyframe store and its on-disk layout
//! - [`features`]: Harris keypoints, gradient-histogram descriptors, GeM, whitening
//! - [`virtual_view`]: z-buffered projection of keyframes into novel views
//! - [`distill`]: small student networks trained to mimic real-image features
//! - [`retrieval`]: global-descriptor index over real and virtual entries
//! - [`matching`]: mutual-nearest-neighbour matching and 2D–3D lifting
//! - [`pose_solver`]: P3P, RANSAC and Gauss–Newton pose refinement
//! - [`pipeline`]: view augmentation, coarse localization and refinement
//! - [`synth`]: procedural indoor scenes with exact ground truth
//! - [`eval`]: accuracy triples and ablation reports

pub mod distill;
pub mod eval;
pub mod features;
pub mod geometry;
pub mod image;
pub mod matching;
pub mod pipeline;
pub mod pose_solver;
pub mod retrieval;
pub mod rng;
pub mod scene_db;
pub mod synth;
pub mod virtual_view;
