//! Local keypoints with gradient-histogram descriptors, GeM global descriptors
//! and PCA whitening.

mod descriptor;
mod gem;
mod harris;
pub mod io;
mod whitening;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::RgbImage;

pub use descriptor::{dense_descriptor_grid, describe_keypoints, Gradients, DESCRIPTOR_DIM};
pub use gem::{gem_pool, gem_pool_raw, global_descriptor};
pub use harris::{detect_keypoints, harris_response};
pub use whitening::{fit_whitening, WhiteningTransform, WHITENING_EPS};

/// Stride of the dense descriptor grid, in pixels.
pub const GRID_STRIDE: usize = 8;
/// Smallest image (per side) the extractor accepts.
pub const MIN_IMAGE_SIDE: u32 = 32;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("image {width}x{height} is smaller than {min}x{min}", min = MIN_IMAGE_SIDE)]
    ImageTooSmall { width: u32, height: u32 },
    #[error("cannot pool an empty descriptor set")]
    EmptySet,
    #[error("need at least 2 samples to fit whitening, got {0}")]
    TooFewSamples(usize),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed feature file: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureParams {
    pub max_keypoints: usize,
    pub harris_k: f32,
    pub harris_sigma: f32,
    pub harris_threshold: f32,
    pub nms_radius: usize,
    pub gem_p: f64,
}

impl Default for FeatureParams {
    fn default() -> Self {
        Self {
            max_keypoints: 1024,
            harris_k: 0.04,
            harris_sigma: 1.0,
            harris_threshold: 1e-6,
            nms_radius: 4,
            gem_p: 3.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Keypoint {
    pub x: f32,
    pub y: f32,
    pub score: f32,
}

/// Keypoints with one L2-normalized descriptor each, stored contiguously.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalFeatureSet {
    dim: usize,
    keypoints: Vec<Keypoint>,
    descriptors: Vec<f32>,
}

impl LocalFeatureSet {
    pub fn empty(dim: usize) -> Self {
        Self {
            dim,
            keypoints: Vec::new(),
            descriptors: Vec::new(),
        }
    }

    pub fn new(dim: usize, keypoints: Vec<Keypoint>, descriptors: Vec<f32>) -> Result<Self, FeatureError> {
        if descriptors.len() != keypoints.len() * dim {
            return Err(FeatureError::DimensionMismatch {
                expected: keypoints.len() * dim,
                got: descriptors.len(),
            });
        }
        Ok(Self {
            dim,
            keypoints,
            descriptors,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.keypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keypoints.is_empty()
    }

    pub fn keypoints(&self) -> &[Keypoint] {
        &self.keypoints
    }

    pub fn descriptor(&self, i: usize) -> &[f32] {
        &self.descriptors[i * self.dim..(i + 1) * self.dim]
    }

    pub fn descriptors(&self) -> impl Iterator<Item = &[f32]> {
        self.descriptors.chunks_exact(self.dim.max(1))
    }

    pub fn raw_descriptors(&self) -> &[f32] {
        &self.descriptors
    }

    pub fn push(&mut self, kp: Keypoint, descriptor: &[f32]) {
        assert_eq!(descriptor.len(), self.dim);
        self.keypoints.push(kp);
        self.descriptors.extend_from_slice(descriptor);
    }
}

/// Row-major `rows × cols × dim` grid of descriptors.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    pub rows: usize,
    pub cols: usize,
    pub dim: usize,
    pub data: Vec<f32>,
}

impl FeatureGrid {
    pub fn zeros(rows: usize, cols: usize, dim: usize) -> Self {
        Self {
            rows,
            cols,
            dim,
            data: vec![0.0; rows * cols * dim],
        }
    }

    pub fn num_cells(&self) -> usize {
        self.rows * self.cols
    }

    pub fn cell(&self, r: usize, c: usize) -> &[f32] {
        let i = (r * self.cols + c) * self.dim;
        &self.data[i..i + self.dim]
    }

    pub fn cell_mut(&mut self, r: usize, c: usize) -> &mut [f32] {
        let i = (r * self.cols + c) * self.dim;
        &mut self.data[i..i + self.dim]
    }

    pub fn cells(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.dim.max(1))
    }

    /// Pixel position of a cell's patch center.
    pub fn cell_center(r: usize, c: usize) -> (f64, f64) {
        let s = GRID_STRIDE as f64;
        (c as f64 * s + (s - 1.0) / 2.0, r as f64 * s + (s - 1.0) / 2.0)
    }

    /// Cell containing a continuous pixel position, if any.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let s = GRID_STRIDE as f64;
        let c = ((x + 0.5) / s).floor();
        let r = ((y + 0.5) / s).floor();
        if c < 0.0 || r < 0.0 || c >= self.cols as f64 || r >= self.rows as f64 {
            return None;
        }
        Some((r as usize, c as usize))
    }
}

/// Unit-norm global image descriptor.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalDescriptor {
    pub values: Vec<f32>,
}

impl GlobalDescriptor {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.values.iter().map(|&v| v as f64).collect()
    }
}

/// Everything extracted from one real image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageFeatures {
    pub local: LocalFeatureSet,
    pub global: GlobalDescriptor,
    pub grid: FeatureGrid,
}

fn check_size(image: &RgbImage) -> Result<(), FeatureError> {
    if image.width() < MIN_IMAGE_SIDE || image.height() < MIN_IMAGE_SIDE {
        return Err(FeatureError::ImageTooSmall {
            width: image.width(),
            height: image.height(),
        });
    }
    Ok(())
}

/// Detects up to `params.max_keypoints` Harris corners and describes them.
pub fn extract_local(image: &RgbImage, params: &FeatureParams) -> Result<LocalFeatureSet, FeatureError> {
    check_size(image)?;
    let gray = image.to_gray();
    let keypoints = detect_keypoints(&gray, params);
    let grads = Gradients::new(&gray);
    Ok(describe_keypoints(&grads, keypoints))
}

/// Local features, the dense stride-8 descriptor grid and the GeM global
/// descriptor (unwhitened) of a real image.
pub fn extract_all(image: &RgbImage, params: &FeatureParams) -> Result<ImageFeatures, FeatureError> {
    check_size(image)?;
    let gray = image.to_gray();
    let grads = Gradients::new(&gray);
    let keypoints = detect_keypoints(&gray, params);
    let local = describe_keypoints(&grads, keypoints);
    let grid = dense_descriptor_grid(&grads);
    let global = global_descriptor(grid.cells(), grid.dim, params.gem_p, None)?;
    Ok(ImageFeatures { local, global, grid })
}

pub(crate) fn l2_normalize(v: &mut [f32]) -> f32 {
    let n = v.iter().map(|x| (*x as f64) * (*x as f64)).sum::<f64>().sqrt();
    if n > 0.0 {
        for x in v.iter_mut() {
            *x = (*x as f64 / n) as f32;
        }
    }
    n as f32
}
