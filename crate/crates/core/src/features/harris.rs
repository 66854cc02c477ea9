use crate::image::GrayImage;

use super::{FeatureParams, Keypoint};

/// Keypoints closer than this to the border are discarded so that the
/// 16×16 descriptor patch always fits.
pub(crate) const BORDER: usize = 10;

fn gaussian_kernel(sigma: f32) -> Vec<f32> {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let mut k: Vec<f32> = (-radius..=radius)
        .map(|i| (-(i * i) as f32 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f32 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

fn blur(src: &[f32], w: usize, h: usize, kernel: &[f32]) -> Vec<f32> {
    let r = (kernel.len() / 2) as isize;
    let mut tmp = vec![0.0f32; w * h];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for x in 0..w {
            let mut acc = 0.0;
            for (i, kv) in kernel.iter().enumerate() {
                let xx = (x as isize + i as isize - r).clamp(0, w as isize - 1) as usize;
                acc += kv * row[xx];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0f32; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, kv) in kernel.iter().enumerate() {
                let yy = (y as isize + i as isize - r).clamp(0, h as isize - 1) as usize;
                acc += kv * tmp[yy * w + x];
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Harris corner measure `det(M) − k·trace(M)²` with a Gaussian-weighted
/// structure tensor.
pub fn harris_response(gray: &GrayImage, k: f32, sigma: f32) -> Vec<f32> {
    let (w, h) = (gray.width, gray.height);
    let mut ixx = vec![0.0f32; w * h];
    let mut iyy = vec![0.0f32; w * h];
    let mut ixy = vec![0.0f32; w * h];
    for y in 0..h {
        for x in 0..w {
            let (xi, yi) = (x as isize, y as isize);
            let gx = 0.5 * (gray.at_clamped(xi + 1, yi) - gray.at_clamped(xi - 1, yi));
            let gy = 0.5 * (gray.at_clamped(xi, yi + 1) - gray.at_clamped(xi, yi - 1));
            let i = y * w + x;
            ixx[i] = gx * gx;
            iyy[i] = gy * gy;
            ixy[i] = gx * gy;
        }
    }
    let kernel = gaussian_kernel(sigma);
    let sxx = blur(&ixx, w, h, &kernel);
    let syy = blur(&iyy, w, h, &kernel);
    let sxy = blur(&ixy, w, h, &kernel);
    (0..w * h)
        .map(|i| {
            let det = sxx[i] * syy[i] - sxy[i] * sxy[i];
            let tr = sxx[i] + syy[i];
            det - k * tr * tr
        })
        .collect()
}

fn parabola_offset(left: f32, center: f32, right: f32) -> f32 {
    let denom = left - 2.0 * center + right;
    if denom >= 0.0 {
        return 0.0;
    }
    (0.5 * (left - right) / denom).clamp(-0.5, 0.5)
}

/// Thresholded, non-maximum-suppressed Harris corners with sub-pixel
/// refinement, sorted by descending score (raster order on ties).
pub fn detect_keypoints(gray: &GrayImage, params: &FeatureParams) -> Vec<Keypoint> {
    let (w, h) = (gray.width, gray.height);
    if w <= 2 * BORDER || h <= 2 * BORDER {
        return Vec::new();
    }
    let resp = harris_response(gray, params.harris_k, params.harris_sigma);
    let rad = params.nms_radius as isize;
    let mut out = Vec::new();
    for y in BORDER..h - BORDER {
        'candidates: for x in BORDER..w - BORDER {
            let r = resp[y * w + x];
            if !(r > params.harris_threshold) {
                continue;
            }
            for dy in -rad..=rad {
                let yy = y as isize + dy;
                if yy < 0 || yy >= h as isize {
                    continue;
                }
                for dx in -rad..=rad {
                    let xx = x as isize + dx;
                    if (dx == 0 && dy == 0) || xx < 0 || xx >= w as isize {
                        continue;
                    }
                    let other = resp[yy as usize * w + xx as usize];
                    let earlier = dy < 0 || (dy == 0 && dx < 0);
                    if other > r || (other == r && earlier) {
                        continue 'candidates;
                    }
                }
            }
            let ox = parabola_offset(resp[y * w + x - 1], r, resp[y * w + x + 1]);
            let oy = parabola_offset(resp[(y - 1) * w + x], r, resp[(y + 1) * w + x]);
            out.push(Keypoint {
                x: x as f32 + ox,
                y: y as f32 + oy,
                score: r,
            });
        }
    }
    // stable: raster order survives among equal scores
    out.sort_by(|a, b| b.score.total_cmp(&a.score));
    out.truncate(params.max_keypoints);
    out
}
