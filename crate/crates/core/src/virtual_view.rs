//! Projection of keyframes into novel viewpoints.
//!
//! Every valid-depth source pixel is lifted to 3D and splatted into the target
//! camera; a z-buffer resolves visibility. Source keypoints and dense
//! descriptor cells follow the same path and survive only if their depth
//! agrees with the z-buffer. Empty pixels and cells are zero.

use std::io::Write;
use std::path::Path;

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::distill::{Student, StudentInput};
use crate::features::{self, FeatureError, FeatureGrid, GlobalDescriptor, Keypoint, LocalFeatureSet, GRID_STRIDE};
use crate::geometry::{backproject, Intrinsics, Pose};
use crate::image::{write_f32_grid, RgbImage};
use crate::scene_db::{DbError, Keyframe, KeyframeId, SceneDatabase};

const MIN_Z: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum ViewError {
    #[error("no source keyframes given")]
    NoSources,
    #[error("source keyframe {0} has no extracted features")]
    MissingFeatures(KeyframeId),
    #[error("the view has no projected feature cells")]
    EmptyMask,
    #[error("distilled mode needs a student model")]
    MissingStudent,
    #[error(transparent)]
    Db(#[from] DbError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProjectionParams {
    /// Meters a projected point may lie behind the z-buffer and still count as visible.
    pub occlusion_tolerance: f64,
    /// Relative depth spread below which keypoint depth is interpolated.
    pub depth_spread: f64,
    /// Projected keypoints closer than this (pixels) to an already kept one are dropped.
    pub dedup_radius: f64,
}

impl Default for ProjectionParams {
    fn default() -> Self {
        Self {
            occlusion_tolerance: 0.05,
            depth_spread: 0.05,
            dedup_radius: 4.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ValidityParams {
    pub min_coverage: f64,
    pub min_keypoints: usize,
}

impl Default for ValidityParams {
    fn default() -> Self {
        Self {
            min_coverage: 0.2,
            min_keypoints: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedKeypoint {
    pub source: KeyframeId,
    pub source_index: usize,
    /// Continuous position in the target image.
    pub pixel: Vector2<f64>,
    pub world: Vector3<f64>,
    pub depth: f64,
    pub score: f32,
    pub descriptor: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedView {
    pub pose: Pose,
    pub intrinsics: Intrinsics,
    pub color: RgbImage,
    /// Row-major, `+∞` where nothing projected.
    pub zbuffer: Vec<f64>,
    pub feature_grid: FeatureGrid,
    /// Row-major over grid cells.
    pub mask: Vec<bool>,
    pub keypoints: Vec<ProjectedKeypoint>,
    pub source_ids: Vec<KeyframeId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureMode {
    Deterministic,
    Distilled,
}

/// Global and local features of a virtual view; every keypoint carries its
/// world point.
#[derive(Debug, Clone, PartialEq)]
pub struct VirtualFeatures {
    pub pose: Pose,
    pub intrinsics: Intrinsics,
    pub global: GlobalDescriptor,
    pub local: LocalFeatureSet,
    pub world_points: Vec<Vector3<f64>>,
    pub mode: FeatureMode,
}

/// One source pixel that landed in the target and passed the occlusion test.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Survivor {
    pub source: KeyframeId,
    pub x: u32,
    pub y: u32,
}

#[derive(Clone, Copy, PartialEq, PartialOrd)]
struct Splat {
    z: f64,
    source: KeyframeId,
    raster: u32,
}

struct Splats {
    /// per source, per source pixel: target pixel index and depth
    landed: Vec<Vec<Option<(usize, f64)>>>,
    winner: Vec<Option<Splat>>,
}

fn splat_sources(sources: &[&Keyframe], pose: &Pose, k: &Intrinsics) -> Splats {
    let n = k.num_pixels();
    let mut winner: Vec<Option<Splat>> = vec![None; n];
    let mut landed = Vec::with_capacity(sources.len());
    for kf in sources {
        let (w, h) = (kf.depth.width(), kf.depth.height());
        let mut hits = vec![None; (w * h) as usize];
        // world-to-target composed with source camera-to-world
        let rel = pose.compose(&kf.pose.inverse());
        for y in 0..h {
            for x in 0..w {
                let d = kf.depth.get(x, y);
                if d <= 0.0 {
                    continue;
                }
                let ray = kf.intrinsics.ray(&Vector2::new(x as f64, y as f64));
                let pc = rel.transform_point(&(ray * d as f64));
                if pc.z <= MIN_Z {
                    continue;
                }
                let u = k.fx * pc.x / pc.z + k.cx;
                let v = k.fy * pc.y / pc.z + k.cy;
                let Some(idx) = pixel_index(k, u, v) else {
                    continue;
                };
                let raster = y * w + x;
                hits[raster as usize] = Some((idx, pc.z));
                let cand = Splat {
                    z: pc.z,
                    source: kf.id,
                    raster,
                };
                match &winner[idx] {
                    Some(cur) if !(cand < *cur) => {}
                    _ => winner[idx] = Some(cand),
                }
            }
        }
        landed.push(hits);
    }
    Splats { landed, winner }
}

/// Index of the pixel nearest to `(u, v)`, if inside the image.
fn pixel_index(k: &Intrinsics, u: f64, v: f64) -> Option<usize> {
    let (xr, yr) = (u.round(), v.round());
    if !(xr >= 0.0 && yr >= 0.0 && xr < k.width as f64 && yr < k.height as f64) {
        return None;
    }
    Some(yr as usize * k.width as usize + xr as usize)
}

fn resolve_sources<'a>(db: &'a SceneDatabase, sources: &[KeyframeId]) -> Result<Vec<&'a Keyframe>, ViewError> {
    if sources.is_empty() {
        return Err(ViewError::NoSources);
    }
    let mut seen = Vec::new();
    let mut out = Vec::new();
    for &id in sources {
        if seen.contains(&id) {
            continue;
        }
        seen.push(id);
        out.push(db.try_get(id)?);
    }
    Ok(out)
}

/// Renders the projection bundle of `sources` at `pose`. Sources earlier in
/// the list take precedence when deduplicating keypoints.
pub fn render_projection(
    db: &SceneDatabase,
    pose: &Pose,
    intrinsics: &Intrinsics,
    sources: &[KeyframeId],
    params: &ProjectionParams,
) -> Result<ProjectedView, ViewError> {
    let srcs = resolve_sources(db, sources)?;
    for kf in &srcs {
        if kf.features.is_none() {
            return Err(ViewError::MissingFeatures(kf.id));
        }
    }
    let k = intrinsics;
    let (w, h) = (k.width as usize, k.height as usize);
    let splats = splat_sources(&srcs, pose, k);

    let mut color = RgbImage::new(k.width, k.height);
    let mut zbuffer = vec![f64::INFINITY; w * h];
    for (i, win) in splats.winner.iter().enumerate() {
        if let Some(s) = win {
            let kf = srcs.iter().find(|kf| kf.id == s.source).unwrap();
            let sw = kf.image.width();
            color.put((i % w) as u32, (i / w) as u32, kf.image.get(s.raster % sw, s.raster / sw));
            zbuffer[i] = s.z;
        }
    }

    let dim = srcs[0].features.as_ref().unwrap().grid.dim;
    let rows = h / GRID_STRIDE;
    let cols = w / GRID_STRIDE;
    let mut feature_grid = FeatureGrid::zeros(rows, cols, dim);
    let mut mask = vec![false; rows * cols];
    // per cell: the z-buffer winner of smallest depth among the cell's pixels
    let mut cell_best: Vec<Option<(Splat, usize)>> = vec![None; rows * cols];
    for (i, win) in splats.winner.iter().enumerate() {
        let Some(s) = win else { continue };
        let (x, y) = (i % w, i / w);
        let (r, c) = (y / GRID_STRIDE, x / GRID_STRIDE);
        if r >= rows || c >= cols {
            continue;
        }
        let cell = &mut cell_best[r * cols + c];
        match cell {
            Some((cur, _)) if !(*s < *cur) => {}
            _ => *cell = Some((*s, i)),
        }
    }
    for (ci, best) in cell_best.iter().enumerate() {
        let Some((s, _)) = best else { continue };
        let kf = srcs.iter().find(|kf| kf.id == s.source).unwrap();
        let grid = &kf.features.as_ref().unwrap().grid;
        let sw = kf.image.width();
        let (sx, sy) = ((s.raster % sw) as f64, (s.raster / sw) as f64);
        if let Some((sr, sc)) = grid.cell_of(sx, sy) {
            if grid.dim == dim {
                feature_grid.cell_mut(ci / cols, ci % cols).copy_from_slice(grid.cell(sr, sc));
                mask[ci] = true;
            }
        }
    }

    let keypoints = project_keypoints(&srcs, pose, k, &zbuffer, params);
    Ok(ProjectedView {
        pose: *pose,
        intrinsics: *k,
        color,
        zbuffer,
        feature_grid,
        mask,
        keypoints,
        source_ids: srcs.iter().map(|kf| kf.id).collect(),
    })
}

fn project_keypoints(
    srcs: &[&Keyframe],
    pose: &Pose,
    k: &Intrinsics,
    zbuffer: &[f64],
    params: &ProjectionParams,
) -> Vec<ProjectedKeypoint> {
    let bucket = params.dedup_radius.max(1.0);
    let mut buckets: std::collections::HashMap<(i64, i64), Vec<usize>> = std::collections::HashMap::new();
    let mut out: Vec<ProjectedKeypoint> = Vec::new();
    let r2 = params.dedup_radius * params.dedup_radius;
    for kf in srcs {
        let local = &kf.features.as_ref().unwrap().local;
        for (i, kp) in local.keypoints().iter().enumerate() {
            let Some(d) = kf.depth.sample(kp.x as f64, kp.y as f64, params.depth_spread) else {
                continue;
            };
            let Ok(world) = backproject(&kf.intrinsics, &kf.pose, &Vector2::new(kp.x as f64, kp.y as f64), d) else {
                continue;
            };
            let pc = pose.transform_point(&world);
            if pc.z <= MIN_Z {
                continue;
            }
            let u = k.fx * pc.x / pc.z + k.cx;
            let v = k.fy * pc.y / pc.z + k.cy;
            let Some(idx) = pixel_index(k, u, v) else {
                continue;
            };
            if pc.z > zbuffer[idx] + params.occlusion_tolerance {
                continue;
            }
            let key = ((u / bucket).floor() as i64, (v / bucket).floor() as i64);
            let clash = (-1..=1).any(|dy| {
                (-1..=1).any(|dx| {
                    buckets.get(&(key.0 + dx, key.1 + dy)).is_some_and(|list| {
                        list.iter().any(|&j| {
                            let p = &out[j].pixel;
                            (p.x - u).powi(2) + (p.y - v).powi(2) < r2
                        })
                    })
                })
            });
            if clash {
                continue;
            }
            buckets.entry(key).or_default().push(out.len());
            out.push(ProjectedKeypoint {
                source: kf.id,
                source_index: i,
                pixel: Vector2::new(u, v),
                world,
                depth: pc.z,
                score: kp.score,
                descriptor: local.descriptor(i).to_vec(),
            });
        }
    }
    out
}

/// Every source pixel whose splat passes the occlusion test at `pose`, in
/// (source, x, y) order.
pub fn occlusion_survivors(
    db: &SceneDatabase,
    pose: &Pose,
    intrinsics: &Intrinsics,
    sources: &[KeyframeId],
    params: &ProjectionParams,
) -> Result<Vec<Survivor>, ViewError> {
    let srcs = resolve_sources(db, sources)?;
    let splats = splat_sources(&srcs, pose, intrinsics);
    let zb: Vec<f64> = splats
        .winner
        .iter()
        .map(|w| w.map_or(f64::INFINITY, |s| s.z))
        .collect();
    let mut out = Vec::new();
    for (kf, hits) in srcs.iter().zip(&splats.landed) {
        let sw = kf.depth.width();
        for (raster, hit) in hits.iter().enumerate() {
            if let Some((idx, z)) = hit {
                if *z <= zb[*idx] + params.occlusion_tolerance {
                    out.push(Survivor {
                        source: kf.id,
                        x: raster as u32 % sw,
                        y: raster as u32 / sw,
                    });
                }
            }
        }
    }
    out.sort();
    Ok(out)
}

impl ProjectedView {
    pub fn coverage(&self) -> f64 {
        if self.zbuffer.is_empty() {
            return 0.0;
        }
        self.zbuffer.iter().filter(|z| z.is_finite()).count() as f64 / self.zbuffer.len() as f64
    }

    pub fn num_masked_cells(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Mean and standard deviation of R, G, B (scaled to `[0, 1]`) over the
    /// filled pixels of each grid cell; zero for empty cells.
    pub fn cell_color_stats(&self) -> Vec<[f64; 6]> {
        let g = &self.feature_grid;
        let w = self.intrinsics.width as usize;
        let mut out = vec![[0.0; 6]; g.rows * g.cols];
        for r in 0..g.rows {
            for c in 0..g.cols {
                let mut sum = [0.0f64; 3];
                let mut sq = [0.0f64; 3];
                let mut n = 0usize;
                for y in r * GRID_STRIDE..(r + 1) * GRID_STRIDE {
                    for x in c * GRID_STRIDE..(c + 1) * GRID_STRIDE {
                        if !self.zbuffer[y * w + x].is_finite() {
                            continue;
                        }
                        let px = self.color.get(x as u32, y as u32);
                        for ch in 0..3 {
                            let v = px[ch] as f64 / 255.0;
                            sum[ch] += v;
                            sq[ch] += v * v;
                        }
                        n += 1;
                    }
                }
                if n > 0 {
                    let s = &mut out[r * g.cols + c];
                    for ch in 0..3 {
                        let mean = sum[ch] / n as f64;
                        s[ch] = mean;
                        s[3 + ch] = (sq[ch] / n as f64 - mean * mean).max(0.0).sqrt();
                    }
                }
            }
        }
        out
    }

    /// Color PPM, z-buffer `.f32` grid and keypoint CSV under `dir/<stem>.*`.
    pub fn write_debug(&self, dir: &Path, stem: &str) -> Result<(), ViewError> {
        std::fs::create_dir_all(dir)?;
        let f = std::fs::File::create(dir.join(format!("{stem}.ppm")))?;
        self.color
            .write_ppm(std::io::BufWriter::new(f))
            .map_err(|e| std::io::Error::other(e.to_string()))?;
        let z: Vec<f32> = self.zbuffer.iter().map(|&z| z as f32).collect();
        let f = std::fs::File::create(dir.join(format!("{stem}.f32")))?;
        write_f32_grid(std::io::BufWriter::new(f), self.intrinsics.width, self.intrinsics.height, &z)
            .map_err(|e| std::io::Error::other(e.to_string()))?;
        let mut csv = std::io::BufWriter::new(std::fs::File::create(dir.join(format!("{stem}.csv")))?);
        writeln!(csv, "source_id,kp_index,x,y,X,Y,Z")?;
        for kp in &self.keypoints {
            writeln!(
                csv,
                "{},{},{},{},{},{},{}",
                kp.source, kp.source_index, kp.pixel.x, kp.pixel.y, kp.world.x, kp.world.y, kp.world.z
            )?;
        }
        csv.flush()?;
        Ok(())
    }
}

/// `(valid, coverage)`: valid iff coverage and keypoint count both reach their minimum.
pub fn validity(view: &ProjectedView, params: &ValidityParams) -> (bool, f64) {
    let coverage = view.coverage();
    let valid = coverage >= params.min_coverage && view.keypoints.len() >= params.min_keypoints;
    (valid, coverage)
}

/// Global and local features of a projected view.
pub fn render_features(
    view: &ProjectedView,
    mode: FeatureMode,
    student: Option<&Student>,
    gem_p: f64,
) -> Result<VirtualFeatures, ViewError> {
    if view.num_masked_cells() == 0 {
        return Err(ViewError::EmptyMask);
    }
    let dim = view.feature_grid.dim;
    let mut local = LocalFeatureSet::empty(dim);
    let mut world_points = Vec::with_capacity(view.keypoints.len());
    let global = match mode {
        FeatureMode::Deterministic => {
            let cells = view
                .feature_grid
                .cells()
                .zip(&view.mask)
                .filter(|(_, &m)| m)
                .map(|(c, _)| c);
            let global = features::global_descriptor(cells, dim, gem_p, None)?;
            let mut buf = vec![0.0f32; dim];
            for kp in &view.keypoints {
                buf.copy_from_slice(&kp.descriptor);
                if features::l2_normalize(&mut buf) > 0.0 {
                    local.push(keypoint_of(kp), &buf);
                    world_points.push(kp.world);
                }
            }
            global
        }
        FeatureMode::Distilled => {
            let student = student.ok_or(ViewError::MissingStudent)?;
            let input = StudentInput::from_view(view, gem_p)?;
            let mut g: Vec<f32> = student.forward_global(&input).iter().map(|&v| v as f32).collect();
            features::l2_normalize(&mut g);
            let out_grid = student.forward_local_grid(&input, view.feature_grid.rows, view.feature_grid.cols);
            let mut buf = vec![0.0f32; out_grid.dim];
            local = LocalFeatureSet::empty(out_grid.dim);
            for kp in &view.keypoints {
                if interpolate_cells(&out_grid, &view.mask, kp.pixel.x, kp.pixel.y, &mut buf)
                    && features::l2_normalize(&mut buf) > 0.0
                {
                    local.push(keypoint_of(kp), &buf);
                    world_points.push(kp.world);
                }
            }
            GlobalDescriptor { values: g }
        }
    };
    Ok(VirtualFeatures {
        pose: view.pose,
        intrinsics: view.intrinsics,
        global,
        local,
        world_points,
        mode,
    })
}

fn keypoint_of(kp: &ProjectedKeypoint) -> Keypoint {
    Keypoint {
        x: kp.pixel.x as f32,
        y: kp.pixel.y as f32,
        score: kp.score,
    }
}

/// Bilinear interpolation between the centers of masked cells. Returns false
/// if none of the four surrounding cells is masked.
pub fn interpolate_cells(grid: &FeatureGrid, mask: &[bool], x: f64, y: f64, out: &mut [f32]) -> bool {
    let s = GRID_STRIDE as f64;
    let half = (s - 1.0) / 2.0;
    let gx = ((x - half) / s).clamp(0.0, (grid.cols - 1) as f64);
    let gy = ((y - half) / s).clamp(0.0, (grid.rows - 1) as f64);
    let (c0, r0) = (gx.floor() as usize, gy.floor() as usize);
    let (c1, r1) = ((c0 + 1).min(grid.cols - 1), (r0 + 1).min(grid.rows - 1));
    let (fx, fy) = (gx - c0 as f64, gy - r0 as f64);
    let corners = [
        (r0, c0, (1.0 - fx) * (1.0 - fy)),
        (r0, c1, fx * (1.0 - fy)),
        (r1, c0, (1.0 - fx) * fy),
        (r1, c1, fx * fy),
    ];
    let total: f64 = corners
        .iter()
        .filter(|(r, c, _)| mask[r * grid.cols + c])
        .map(|(_, _, w)| w)
        .sum();
    out.iter_mut().for_each(|v| *v = 0.0);
    if total <= 0.0 {
        // a keypoint exactly on a masked cell center can carry zero weight elsewhere
        let (rn, cn) = (gy.round() as usize, gx.round() as usize);
        if mask[rn * grid.cols + cn] {
            out.copy_from_slice(grid.cell(rn, cn));
            return true;
        }
        return false;
    }
    for (r, c, w) in corners {
        if w > 0.0 && mask[r * grid.cols + c] {
            let cell = grid.cell(r, c);
            for (o, v) in out.iter_mut().zip(cell) {
                *o += (w / total) as f32 * v;
            }
        }
    }
    true
}
