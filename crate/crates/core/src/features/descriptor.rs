use std::f32::consts::PI;

use crate::image::GrayImage;

use super::{l2_normalize, FeatureGrid, Keypoint, LocalFeatureSet, GRID_STRIDE};

const CELLS: usize = 4;
const CELL_SIZE: usize = 4;
const BINS: usize = 8;
const PATCH: usize = CELLS * CELL_SIZE;
const CLAMP: f32 = 0.2;

pub const DESCRIPTOR_DIM: usize = CELLS * CELLS * BINS;

/// Per-pixel gradient magnitude and orientation.
pub struct Gradients {
    width: usize,
    height: usize,
    magnitude: Vec<f32>,
    angle: Vec<f32>,
}

impl Gradients {
    pub fn new(gray: &GrayImage) -> Self {
        let (w, h) = (gray.width, gray.height);
        let mut magnitude = vec![0.0; w * h];
        let mut angle = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                let (xi, yi) = (x as isize, y as isize);
                let gx = 0.5 * (gray.at_clamped(xi + 1, yi) - gray.at_clamped(xi - 1, yi));
                let gy = 0.5 * (gray.at_clamped(xi, yi + 1) - gray.at_clamped(xi, yi - 1));
                magnitude[y * w + x] = (gx * gx + gy * gy).sqrt();
                let mut a = gy.atan2(gx);
                if a < 0.0 {
                    a += 2.0 * PI;
                }
                angle[y * w + x] = a;
            }
        }
        Self {
            width: w,
            height: h,
            magnitude,
            angle,
        }
    }

    /// 4×4 cells × 8 orientation bins over the 16×16 patch whose top-left
    /// pixel is `(x0, y0)`. Pixels outside the image contribute nothing.
    fn describe_patch(&self, x0: isize, y0: isize, out: &mut [f32]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        let sigma = PATCH as f32 / 2.0;
        let half = PATCH as f32 / 2.0;
        for py in 0..PATCH {
            let y = y0 + py as isize;
            if y < 0 || y >= self.height as isize {
                continue;
            }
            for px in 0..PATCH {
                let x = x0 + px as isize;
                if x < 0 || x >= self.width as isize {
                    continue;
                }
                let i = y as usize * self.width + x as usize;
                let mag = self.magnitude[i];
                if mag == 0.0 {
                    continue;
                }
                let (rx, ry) = (px as f32 + 0.5 - half, py as f32 + 0.5 - half);
                let weight = mag * (-(rx * rx + ry * ry) / (2.0 * sigma * sigma)).exp();

                // trilinear: two cells per axis, two orientation bins
                let cxf = (px as f32 + 0.5) / CELL_SIZE as f32 - 0.5;
                let cyf = (py as f32 + 0.5) / CELL_SIZE as f32 - 0.5;
                let (cx0, cy0) = (cxf.floor(), cyf.floor());
                let (fx, fy) = (cxf - cx0, cyf - cy0);
                let bf = self.angle[i] * BINS as f32 / (2.0 * PI);
                let b0 = bf.floor();
                let fb = bf - b0;
                let b0 = (b0 as usize) % BINS;
                let b1 = (b0 + 1) % BINS;
                for (cy, wy) in [(cy0 as isize, 1.0 - fy), (cy0 as isize + 1, fy)] {
                    if cy < 0 || cy >= CELLS as isize || wy == 0.0 {
                        continue;
                    }
                    for (cx, wx) in [(cx0 as isize, 1.0 - fx), (cx0 as isize + 1, fx)] {
                        if cx < 0 || cx >= CELLS as isize || wx == 0.0 {
                            continue;
                        }
                        let base = (cy as usize * CELLS + cx as usize) * BINS;
                        let w = weight * wy * wx;
                        out[base + b0] += w * (1.0 - fb);
                        out[base + b1] += w * fb;
                    }
                }
            }
        }
        if l2_normalize(out) > 0.0 {
            out.iter_mut().for_each(|v| *v = v.min(CLAMP));
            l2_normalize(out);
        }
    }
}

/// Describes keypoints with the patch centered on their rounded position.
/// Keypoints whose patch is featureless are dropped.
pub fn describe_keypoints(grads: &Gradients, keypoints: Vec<Keypoint>) -> LocalFeatureSet {
    let mut set = LocalFeatureSet::empty(DESCRIPTOR_DIM);
    let mut buf = vec![0.0f32; DESCRIPTOR_DIM];
    let half = (PATCH / 2) as isize;
    for kp in keypoints {
        let (cx, cy) = (kp.x.round() as isize, kp.y.round() as isize);
        grads.describe_patch(cx - half, cy - half, &mut buf);
        if buf.iter().any(|&v| v > 0.0) {
            set.push(kp, &buf);
        }
    }
    set
}

/// Descriptors on a stride-8 grid of patch centers; featureless cells stay zero.
pub fn dense_descriptor_grid(grads: &Gradients) -> FeatureGrid {
    let rows = grads.height / GRID_STRIDE;
    let cols = grads.width / GRID_STRIDE;
    let mut grid = FeatureGrid::zeros(rows, cols, DESCRIPTOR_DIM);
    let offset = (PATCH - GRID_STRIDE) as isize / 2;
    for r in 0..rows {
        for c in 0..cols {
            let x0 = (c * GRID_STRIDE) as isize - offset;
            let y0 = (r * GRID_STRIDE) as isize - offset;
            grads.describe_patch(x0, y0, grid.cell_mut(r, c));
        }
    }
    grid
}
