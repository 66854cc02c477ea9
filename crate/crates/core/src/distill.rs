//! Student networks that map projected views to real-image features.
//!
//! Two bias-free perceptrons `y = W₂·tanh(W₁·x)`: a global net fed with
//! pooled color statistics and the pooled projected descriptors, and a local
//! net applied to every masked grid cell. Training minimizes
//! `‖y_g − t_g‖² + λ·Σ_M ‖y_l − t_l‖² / max(1, |M|)` by mini-batch SGD.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{self, FeatureError, FeatureGrid, ImageFeatures, GRID_STRIDE};
use crate::geometry::{Intrinsics, Pose};
use crate::image::RgbImage;
use crate::scene_db::{KeyframeId, ProximityParams, SceneDatabase};
use crate::virtual_view::{render_projection, ProjectedView, ProjectionParams, ViewError};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"VLST";
pub const CHECKPOINT_VERSION: u32 = 1;
/// Per-cell color statistics: mean and standard deviation of R, G, B.
pub const COLOR_STATS: usize = 6;

#[derive(Debug, Error)]
pub enum DistillError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("projection has no overlap with the sources")]
    NoOverlap,
    #[error("no training pairs")]
    NoPairs,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    View(#[from] ViewError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
}

/// Network inputs derived from a projected view.
#[derive(Debug, Clone, PartialEq)]
pub struct StudentInput {
    /// Pooled color statistics followed by the pooled projected descriptor.
    pub global: DVector<f64>,
    pub rows: usize,
    pub cols: usize,
    /// Row-major cell indices with `mask = true`.
    pub cell_index: Vec<usize>,
    /// One column per masked cell: projected descriptor then color statistics.
    pub cells: DMatrix<f64>,
}

impl StudentInput {
    pub fn from_view(view: &ProjectedView, gem_p: f64) -> Result<Self, FeatureError> {
        let grid = &view.feature_grid;
        let stats = view.cell_color_stats();
        let dim = grid.dim;
        let masked: Vec<usize> = (0..grid.num_cells()).filter(|&i| view.mask[i]).collect();

        let mut global = DVector::zeros(COLOR_STATS + dim);
        let filled: Vec<[f32; COLOR_STATS]> = stats
            .iter()
            .filter(|s| s.iter().any(|&v| v != 0.0))
            .map(|s| s.map(|v| v as f32))
            .collect();
        if !filled.is_empty() {
            let pooled = features::gem_pool_raw(filled.iter().map(|s| &s[..]), COLOR_STATS, gem_p)?;
            global.rows_mut(0, COLOR_STATS).copy_from_slice(&pooled);
        }
        if !masked.is_empty() {
            let pooled = features::gem_pool(masked.iter().map(|&i| grid.cell(i / grid.cols, i % grid.cols)), dim, gem_p)?;
            global.rows_mut(COLOR_STATS, dim).copy_from_slice(&pooled);
        }

        let mut cells = DMatrix::zeros(dim + COLOR_STATS, masked.len());
        for (j, &i) in masked.iter().enumerate() {
            let cell = grid.cell(i / grid.cols, i % grid.cols);
            for (r, &v) in cell.iter().enumerate() {
                cells[(r, j)] = v as f64;
            }
            for (r, &v) in stats[i].iter().enumerate() {
                cells[(dim + r, j)] = v;
            }
        }
        Ok(Self {
            global,
            rows: grid.rows,
            cols: grid.cols,
            cell_index: masked,
            cells,
        })
    }

    pub fn num_masked(&self) -> usize {
        self.cell_index.len()
    }
}

/// One distillation example: student input at a pose plus teacher outputs
/// computed on the real image at that pose.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub pose: Pose,
    pub sources: Vec<KeyframeId>,
    pub input: StudentInput,
    pub target_global: DVector<f64>,
    /// Teacher descriptors of the masked cells, one column each.
    pub target_local: DMatrix<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PairParams {
    pub num_sources: usize,
    pub gem_p: f64,
    pub projection: ProjectionParams,
    pub proximity: ProximityParams,
}

impl Default for PairParams {
    fn default() -> Self {
        Self {
            num_sources: 4,
            gem_p: 3.0,
            projection: ProjectionParams::default(),
            proximity: ProximityParams::default(),
        }
    }
}

/// Builds a pair at `pose` from the nearest keyframes other than `exclude`,
/// with teacher targets taken from `teacher` (features of the real image there).
pub fn make_training_pair(
    db: &SceneDatabase,
    pose: &Pose,
    intrinsics: &Intrinsics,
    teacher: &ImageFeatures,
    exclude: Option<KeyframeId>,
    params: &PairParams,
) -> Result<TrainingPair, DistillError> {
    let sources = db
        .nearest_keyframes_where(pose, params.num_sources, &params.proximity, |kf| Some(kf.id) != exclude)
        .map_err(ViewError::from)?;
    if sources.is_empty() {
        return Err(DistillError::NoOverlap);
    }
    let view = render_projection(db, pose, intrinsics, &sources, &params.projection)?;
    pair_from_view(&view, teacher, params.gem_p)
}

/// Convenience for a real image: extracts the teacher features first.
pub fn make_training_pair_from_image(
    db: &SceneDatabase,
    pose: &Pose,
    intrinsics: &Intrinsics,
    image: &RgbImage,
    exclude: Option<KeyframeId>,
    feature_params: &features::FeatureParams,
    params: &PairParams,
) -> Result<TrainingPair, DistillError> {
    let teacher = features::extract_all(image, feature_params)?;
    make_training_pair(db, pose, intrinsics, &teacher, exclude, params)
}

pub fn pair_from_view(view: &ProjectedView, teacher: &ImageFeatures, gem_p: f64) -> Result<TrainingPair, DistillError> {
    if view.num_masked_cells() == 0 {
        return Err(DistillError::NoOverlap);
    }
    let grid = &teacher.grid;
    if grid.rows != view.feature_grid.rows || grid.cols != view.feature_grid.cols {
        return Err(DistillError::ShapeMismatch(format!(
            "teacher grid {}x{} vs view grid {}x{}",
            grid.rows, grid.cols, view.feature_grid.rows, view.feature_grid.cols
        )));
    }
    let input = StudentInput::from_view(view, gem_p)?;
    let mut target_local = DMatrix::zeros(grid.dim, input.num_masked());
    for (j, &i) in input.cell_index.iter().enumerate() {
        for (r, &v) in grid.cell(i / grid.cols, i % grid.cols).iter().enumerate() {
            target_local[(r, j)] = v as f64;
        }
    }
    Ok(TrainingPair {
        pose: view.pose,
        sources: view.source_ids.clone(),
        input,
        target_global: DVector::from_iterator(teacher.global.dim(), teacher.global.values.iter().map(|&v| v as f64)),
        target_local,
    })
}

/// Weights of both student networks.
#[derive(Debug, Clone, PartialEq)]
pub struct Student {
    /// Local descriptor dimension.
    pub n: usize,
    /// Global descriptor dimension.
    pub m: usize,
    pub hidden: usize,
    pub global_w1: DMatrix<f64>,
    pub global_w2: DMatrix<f64>,
    pub local_w1: DMatrix<f64>,
    pub local_w2: DMatrix<f64>,
}

/// Gradients with the same layout as [`Student`].
#[derive(Debug, Clone, PartialEq)]
pub struct StudentGrads {
    pub global_w1: DMatrix<f64>,
    pub global_w2: DMatrix<f64>,
    pub local_w1: DMatrix<f64>,
    pub local_w2: DMatrix<f64>,
}

impl StudentGrads {
    fn zeros_like(s: &Student) -> Self {
        Self {
            global_w1: DMatrix::zeros(s.global_w1.nrows(), s.global_w1.ncols()),
            global_w2: DMatrix::zeros(s.global_w2.nrows(), s.global_w2.ncols()),
            local_w1: DMatrix::zeros(s.local_w1.nrows(), s.local_w1.ncols()),
            local_w2: DMatrix::zeros(s.local_w2.nrows(), s.local_w2.ncols()),
        }
    }

    fn add_scaled(&mut self, other: &StudentGrads, s: f64) {
        self.global_w1 += &other.global_w1 * s;
        self.global_w2 += &other.global_w2 * s;
        self.local_w1 += &other.local_w1 * s;
        self.local_w2 += &other.local_w2 * s;
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Losses {
    pub global: f64,
    pub local: f64,
}

impl Losses {
    pub fn total(&self, lambda: f64) -> f64 {
        self.global + lambda * self.local
    }
}

struct Layer {
    x: DMatrix<f64>,
    h: DMatrix<f64>,
    y: DMatrix<f64>,
}

fn forward(w1: &DMatrix<f64>, w2: &DMatrix<f64>, x: &DMatrix<f64>) -> Layer {
    let h = (w1 * x).map(f64::tanh);
    let y = w2 * &h;
    Layer { x: x.clone(), h, y }
}

/// Gradients of `scale·‖Y − T‖²_F` with respect to both layers.
fn backward(w2: &DMatrix<f64>, layer: &Layer, target: &DMatrix<f64>, scale: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let dy = (&layer.y - target) * (2.0 * scale);
    let dw2 = &dy * layer.h.transpose();
    let dh = w2.transpose() * &dy;
    let da = dh.component_mul(&layer.h.map(|h| 1.0 - h * h));
    let dw1 = da * layer.x.transpose();
    (dw1, dw2)
}

impl Student {
    /// Gaussian initialization: first layers with unit variance (inputs are
    /// roughly unit norm), output layers scaled down by `0.1/√hidden`.
    pub fn random(n: usize, m: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let unit = Normal::new(0.0, 1.0).unwrap();
        let out = Normal::new(0.0, 0.1 / (hidden.max(1) as f64).sqrt()).unwrap();
        let mut draw = |r: usize, c: usize, d: &Normal<f64>| DMatrix::from_fn(r, c, |_, _| d.sample(&mut rng));
        Self {
            n,
            m,
            hidden,
            global_w1: draw(hidden, COLOR_STATS + n, &unit),
            global_w2: draw(m, hidden, &out),
            local_w1: draw(hidden, n + COLOR_STATS, &unit),
            local_w2: draw(n, hidden, &out),
        }
    }

    pub fn zeros(n: usize, m: usize, hidden: usize) -> Self {
        Self {
            n,
            m,
            hidden,
            global_w1: DMatrix::zeros(hidden, COLOR_STATS + n),
            global_w2: DMatrix::zeros(m, hidden),
            local_w1: DMatrix::zeros(hidden, n + COLOR_STATS),
            local_w2: DMatrix::zeros(n, hidden),
        }
    }

    pub fn num_weights(&self) -> usize {
        self.global_w1.len() + self.global_w2.len() + self.local_w1.len() + self.local_w2.len()
    }

    fn check_input(&self, input: &StudentInput) -> Result<(), DistillError> {
        if input.global.len() != COLOR_STATS + self.n || input.cells.nrows() != self.n + COLOR_STATS {
            return Err(DistillError::ShapeMismatch(format!(
                "input has descriptor dimension {} but the student expects {}",
                input.global.len().saturating_sub(COLOR_STATS),
                self.n
            )));
        }
        Ok(())
    }

    fn check_pair(&self, pair: &TrainingPair) -> Result<(), DistillError> {
        self.check_input(&pair.input)?;
        if pair.target_global.len() != self.m
            || pair.target_local.nrows() != self.n
            || pair.target_local.ncols() != pair.input.num_masked()
        {
            return Err(DistillError::ShapeMismatch("targets do not match the student".into()));
        }
        Ok(())
    }

    pub fn forward_global(&self, input: &StudentInput) -> DVector<f64> {
        let h = (&self.global_w1 * &input.global).map(f64::tanh);
        &self.global_w2 * h
    }

    /// Output per masked cell, one column each.
    pub fn forward_local(&self, input: &StudentInput) -> DMatrix<f64> {
        let h = (&self.local_w1 * &input.cells).map(f64::tanh);
        &self.local_w2 * h
    }

    /// Local outputs scattered back into a `rows × cols` grid; unmasked cells are zero.
    pub fn forward_local_grid(&self, input: &StudentInput, rows: usize, cols: usize) -> FeatureGrid {
        let y = self.forward_local(input);
        let mut grid = FeatureGrid::zeros(rows, cols, self.n);
        for (j, &i) in input.cell_index.iter().enumerate() {
            let cell = grid.cell_mut(i / cols, i % cols);
            for (r, v) in cell.iter_mut().enumerate() {
                *v = y[(r, j)] as f32;
            }
        }
        grid
    }

    pub fn loss(&self, pair: &TrainingPair) -> Result<Losses, DistillError> {
        self.check_pair(pair)?;
        let yg = self.forward_global(&pair.input);
        let global = (yg - &pair.target_global).norm_squared();
        let local = if pair.input.num_masked() == 0 {
            0.0
        } else {
            let yl = self.forward_local(&pair.input);
            (yl - &pair.target_local).norm_squared() / pair.input.num_masked() as f64
        };
        Ok(Losses { global, local })
    }

    /// Losses and analytic gradients of `loss_g + λ·loss_l`.
    pub fn loss_and_grad(&self, pair: &TrainingPair, lambda: f64) -> Result<(Losses, StudentGrads), DistillError> {
        self.check_pair(pair)?;
        let xg = DMatrix::from_column_slice(pair.input.global.len(), 1, pair.input.global.as_slice());
        let tg = DMatrix::from_column_slice(self.m, 1, pair.target_global.as_slice());
        let g = forward(&self.global_w1, &self.global_w2, &xg);
        let global = (&g.y - &tg).norm_squared();
        let (gw1, gw2) = backward(&self.global_w2, &g, &tg, 1.0);

        let k = pair.input.num_masked();
        let (local, lw1, lw2) = if k == 0 {
            (
                0.0,
                DMatrix::zeros(self.local_w1.nrows(), self.local_w1.ncols()),
                DMatrix::zeros(self.local_w2.nrows(), self.local_w2.ncols()),
            )
        } else {
            let l = forward(&self.local_w1, &self.local_w2, &pair.input.cells);
            let loss = (&l.y - &pair.target_local).norm_squared() / k as f64;
            let (w1, w2) = backward(&self.local_w2, &l, &pair.target_local, lambda / k as f64);
            (loss, w1, w2)
        };
        Ok((
            Losses { global, local },
            StudentGrads {
                global_w1: gw1,
                global_w2: gw2,
                local_w1: lw1,
                local_w2: lw2,
            },
        ))
    }

    /// Ridge least-squares fit of both output layers to the teacher targets
    /// of `pairs`, holding the first layers fixed.
    pub fn init_heads_least_squares(&mut self, pairs: &[TrainingPair], ridge: f64) -> Result<(), DistillError> {
        if pairs.is_empty() {
            return Err(DistillError::NoPairs);
        }
        for p in pairs {
            self.check_pair(p)?;
        }
        let hg = DMatrix::from_columns(
            &pairs
                .iter()
                .map(|p| (&self.global_w1 * &p.input.global).map(f64::tanh))
                .collect::<Vec<_>>(),
        );
        let tg = DMatrix::from_columns(&pairs.iter().map(|p| p.target_global.clone()).collect::<Vec<_>>());
        self.global_w2 = ridge_solve(&hg, &tg, ridge)?;

        let total: usize = pairs.iter().map(|p| p.input.num_masked()).sum();
        if total > 0 {
            let mut hl = DMatrix::zeros(self.hidden, total);
            let mut tl = DMatrix::zeros(self.n, total);
            let mut col = 0;
            for p in pairs {
                let k = p.input.num_masked();
                if k == 0 {
                    continue;
                }
                hl.columns_mut(col, k).copy_from(&(&self.local_w1 * &p.input.cells).map(f64::tanh));
                tl.columns_mut(col, k).copy_from(&p.target_local);
                col += k;
            }
            self.local_w2 = ridge_solve(&hl, &tl, ridge)?;
        }
        Ok(())
    }

    fn apply(&mut self, g: &StudentGrads, lr: f64, freeze_head: bool) {
        self.global_w1 -= &g.global_w1 * lr;
        self.local_w1 -= &g.local_w1 * lr;
        if !freeze_head {
            self.global_w2 -= &g.global_w2 * lr;
            self.local_w2 -= &g.local_w2 * lr;
        }
    }

    fn matrices(&self) -> [&DMatrix<f64>; 4] {
        [&self.global_w1, &self.global_w2, &self.local_w1, &self.local_w2]
    }

    fn matrices_mut(&mut self) -> [&mut DMatrix<f64>; 4] {
        [
            &mut self.global_w1,
            &mut self.global_w2,
            &mut self.local_w1,
            &mut self.local_w2,
        ]
    }

    /// Header (magic, n, m, hidden, version) then the four weight matrices
    /// row-major as little-endian f32.
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<(), DistillError> {
        w.write_all(CHECKPOINT_MAGIC)?;
        for v in [self.n as u32, self.m as u32, self.hidden as u32, CHECKPOINT_VERSION] {
            w.write_all(&v.to_le_bytes())?;
        }
        for mat in self.matrices() {
            for r in 0..mat.nrows() {
                for c in 0..mat.ncols() {
                    w.write_all(&(mat[(r, c)] as f32).to_le_bytes())?;
                }
            }
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self, DistillError> {
        let mut head = [0u8; 20];
        r.read_exact(&mut head)
            .map_err(|_| DistillError::Malformed("truncated header".into()))?;
        if &head[..4] != CHECKPOINT_MAGIC {
            return Err(DistillError::Malformed("bad magic".into()));
        }
        let field = |i: usize| u32::from_le_bytes(head[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
        let (n, m, hidden, version) = (field(0), field(1), field(2), field(3));
        if version != CHECKPOINT_VERSION as usize {
            return Err(DistillError::Malformed(format!("unsupported version {version}")));
        }
        if n > 1 << 14 || m > 1 << 14 || hidden > 1 << 14 {
            return Err(DistillError::Malformed("implausible dimensions".into()));
        }
        let mut s = Student::zeros(n, m, hidden);
        let mut b = [0u8; 4];
        for mat in s.matrices_mut() {
            for row in 0..mat.nrows() {
                for c in 0..mat.ncols() {
                    r.read_exact(&mut b)
                        .map_err(|_| DistillError::Malformed("truncated weights".into()))?;
                    mat[(row, c)] = f32::from_le_bytes(b) as f64;
                }
            }
        }
        Ok(s)
    }
}

fn ridge_solve(h: &DMatrix<f64>, t: &DMatrix<f64>, ridge: f64) -> Result<DMatrix<f64>, DistillError> {
    // W = T Hᵀ (H Hᵀ + ridge·I)⁻¹
    let gram = h * h.transpose() + DMatrix::identity(h.nrows(), h.nrows()) * ridge.max(1e-12);
    let chol = gram
        .cholesky()
        .ok_or_else(|| DistillError::InvalidParameter("least-squares system is not positive definite".into()))?;
    let rhs = h * t.transpose();
    Ok(chol.solve(&rhs).transpose())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lambda: f64,
    /// Epoch (0-based) from which the learning rate is multiplied by `decay_factor`.
    pub decay_epoch: Option<usize>,
    pub decay_factor: f64,
    pub freeze_head: bool,
    /// Pairs drawn per epoch (with replacement beyond one pass); all pairs if unset.
    pub pairs_per_epoch: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 24,
            lr: 1e-3,
            lambda: 1.0,
            decay_epoch: Some(8),
            decay_factor: 0.1,
            freeze_head: true,
            pairs_per_epoch: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss_g: f64,
    pub loss_l: f64,
}

/// Mini-batch SGD. Each history entry holds the batch-mean losses before
/// that step's update.
pub fn train(student: &Student, pairs: &[TrainingPair], cfg: &TrainConfig) -> Result<(Student, Vec<StepRecord>), DistillError> {
    if pairs.is_empty() {
        return Err(DistillError::NoPairs);
    }
    if cfg.batch_size == 0 {
        return Err(DistillError::InvalidParameter("batch_size must be at least 1".into()));
    }
    for p in pairs {
        student.check_pair(p)?;
    }
    let mut s = student.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut history = Vec::new();
    let per_epoch = cfg.pairs_per_epoch.unwrap_or(pairs.len());
    for epoch in 0..cfg.epochs {
        let lr = match cfg.decay_epoch {
            Some(e) if epoch >= e => cfg.lr * cfg.decay_factor,
            _ => cfg.lr,
        };
        let order = epoch_order(pairs.len(), per_epoch, &mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let results: Vec<(Losses, StudentGrads)> = batch
                .par_iter()
                .map(|&i| s.loss_and_grad(&pairs[i], cfg.lambda))
                .collect::<Result<_, _>>()?;
            let inv = 1.0 / batch.len() as f64;
            let mut grads = StudentGrads::zeros_like(&s);
            let (mut lg, mut ll) = (0.0, 0.0);
            // fixed-order reduction
            for (loss, g) in &results {
                grads.add_scaled(g, inv);
                lg += loss.global * inv;
                ll += loss.local * inv;
            }
            history.push(StepRecord {
                step: history.len(),
                loss_g: lg,
                loss_l: ll,
            });
            if lr != 0.0 {
                s.apply(&grads, lr, cfg.freeze_head);
            }
        }
    }
    Ok((s, history))
}

fn epoch_order(n: usize, count: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut out = Vec::with_capacity(count);
    let mut pass: Vec<usize> = (0..n).collect();
    while out.len() < count {
        pass.shuffle(rng);
        let take = (count - out.len()).min(n);
        out.extend_from_slice(&pass[..take]);
    }
    out
}

pub fn expected_steps(num_pairs: usize, cfg: &TrainConfig) -> usize {
    let per_epoch = cfg.pairs_per_epoch.unwrap_or(num_pairs);
    cfg.epochs * per_epoch.div_ceil(cfg.batch_size.max(1))
}

pub fn write_history_csv<W: Write>(mut w: W, history: &[StepRecord]) -> std::io::Result<()> {
    writeln!(w, "step,loss_g,loss_l")?;
    for r in history {
        writeln!(w, "{},{},{}", r.step, r.loss_g, r.loss_l)?;
    }
    Ok(())
}

/// Central finite differences against the analytic gradient of
/// `loss_g + λ·loss_l` on `samples` (at least 50) weights drawn with `seed`.
/// Returns the largest relative error.
pub fn gradient_check(
    student: &Student,
    pair: &TrainingPair,
    epsilon: f64,
    lambda: f64,
    samples: usize,
    seed: u64,
) -> Result<f64, DistillError> {
    if !(1e-7..=1e-3).contains(&epsilon) {
        return Err(DistillError::InvalidParameter(format!("epsilon {epsilon} outside [1e-7, 1e-3]")));
    }
    let (_, grads) = student.loss_and_grad(pair, lambda)?;
    let analytic = [&grads.global_w1, &grads.global_w2, &grads.local_w1, &grads.local_w2];
    let sizes: Vec<usize> = student.matrices().iter().map(|m| m.len()).collect();
    let total: usize = sizes.iter().sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe = student.clone();
    let mut worst = 0.0f64;
    for _ in 0..samples.max(50) {
        let mut flat = rng.random_range(0..total);
        let mut which = 0;
        while flat >= sizes[which] {
            flat -= sizes[which];
            which += 1;
        }
        let original = probe.matrices()[which][flat];
        probe.matrices_mut()[which][flat] = original + epsilon;
        let plus = probe.loss(pair)?.total(lambda);
        probe.matrices_mut()[which][flat] = original - epsilon;
        let minus = probe.loss(pair)?.total(lambda);
        probe.matrices_mut()[which][flat] = original;
        let fd = (plus - minus) / (2.0 * epsilon);
        let ga = analytic[which][flat];
        let rel = (ga - fd).abs() / (ga.abs() + fd.abs()).max(1e-12);
        worst = worst.max(rel);
    }
    Ok(worst)
}

/// A tiny self-contained pair with `cells` masked cells of dimension `n`,
/// for gradient checks and smoke tests without a scene.
pub fn synthetic_pair(n: usize, cells: usize, seed: u64) -> TrainingPair {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut unit = |len: usize| {
        let mut v = DVector::from_fn(len, |_, _| rng.random_range(0.0..1.0));
        v /= v.norm();
        v
    };
    let mut global = DVector::zeros(COLOR_STATS + n);
    global.rows_mut(COLOR_STATS, n).copy_from(&unit(n));
    global.rows_mut(0, COLOR_STATS).copy_from(&(unit(COLOR_STATS) * 0.5));
    let mut input_cells = DMatrix::zeros(n + COLOR_STATS, cells);
    let mut target_local = DMatrix::zeros(n, cells);
    for j in 0..cells {
        input_cells.view_mut((0, j), (n, 1)).copy_from(&unit(n));
        input_cells.view_mut((n, j), (COLOR_STATS, 1)).copy_from(&(unit(COLOR_STATS) * 0.5));
        target_local.set_column(j, &unit(n));
    }
    let side = (cells.max(1) as f64).sqrt().ceil() as usize;
    TrainingPair {
        pose: Pose::identity(),
        sources: Vec::new(),
        input: StudentInput {
            global,
            rows: side,
            cols: side,
            cell_index: (0..cells).collect(),
            cells: input_cells,
        },
        target_global: unit(n),
        target_local,
    }
}

/// Grid dimensions implied by an image size.
pub fn grid_shape(k: &Intrinsics) -> (usize, usize) {
    (k.height as usize / GRID_STRIDE, k.width as usize / GRID_STRIDE)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_loss_at_targets() {
        let pair = synthetic_pair(4, 3, 1);
        let mut s = Student::random(4, 4, 16, 2);
        s.init_heads_least_squares(std::slice::from_ref(&pair), 1e-12).unwrap();
        let l = s.loss(&pair).unwrap();
        assert!(l.global < 1e-12 && l.local < 1e-12, "{l:?}");
    }

    #[test]
    fn empty_mask_has_zero_local_loss() {
        let mut pair = synthetic_pair(4, 0, 3);
        pair.target_local = DMatrix::zeros(4, 0);
        let s = Student::random(4, 4, 8, 4);
        let (l, g) = s.loss_and_grad(&pair, 1.0).unwrap();
        assert_eq!(l.local, 0.0);
        assert!(g.local_w1.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_cell_hand_computation() {
        // n = 1, hidden = 1: y = w2·tanh(w1·x)
        let mut s = Student::zeros(1, 1, 1);
        s.global_w1 = DMatrix::from_row_slice(1, 7, &[0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        s.global_w2 = DMatrix::from_element(1, 1, 2.0);
        s.local_w1 = DMatrix::from_row_slice(1, 7, &[0.5, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        s.local_w2 = DMatrix::from_element(1, 1, 3.0);
        let mut pair = synthetic_pair(1, 2, 0);
        pair.input.global = DVector::from_column_slice(&[0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.5]);
        pair.target_global = DVector::from_element(1, 1.0);
        pair.input.cells = DMatrix::from_column_slice(7, 2, &[1.0, 0., 0., 0., 0., 0., 0., 2.0, 0., 0., 0., 0., 0., 0.]);
        pair.target_local = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        let l = s.loss(&pair).unwrap();
        let yg = 2.0 * 0.5f64.tanh();
        let (y0, y1) = (3.0 * 0.5f64.tanh(), 3.0 * 1.0f64.tanh());
        assert!((l.global - (yg - 1.0).powi(2)).abs() < 1e-15);
        assert!((l.local - ((y0 - 1.0).powi(2) + y1 * y1) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..3 {
            let pair = synthetic_pair(8, 5, seed);
            let s = Student::random(8, 8, 12, 100 + seed);
            let err = gradient_check(&s, &pair, 1e-5, 1.0, 64, seed).unwrap();
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }

    #[test]
    fn gradient_check_zero_case_and_repeatability() {
        let mut pair = synthetic_pair(4, 2, 5);
        pair.input.global.fill(0.0);
        pair.input.cells.fill(0.0);
        let s = Student::zeros(4, 4, 8);
        assert_eq!(gradient_check(&s, &pair, 1e-5, 1.0, 50, 1).unwrap(), 0.0);
        let s = Student::random(4, 4, 8, 1);
        let pair = synthetic_pair(4, 2, 5);
        let a = gradient_check(&s, &pair, 1e-5, 1.0, 50, 9).unwrap();
        let b = gradient_check(&s, &pair, 1e-5, 1.0, 50, 9).unwrap();
        assert_eq!(a, b);
        assert!(gradient_check(&s, &pair, 1e-2, 1.0, 50, 9).is_err());
    }

    #[test]
    fn zero_lr_keeps_params() {
        let pairs: Vec<_> = (0..5).map(|i| synthetic_pair(4, 3, i)).collect();
        let s = Student::random(4, 4, 8, 1);
        let cfg = TrainConfig {
            lr: 0.0,
            epochs: 2,
            batch_size: 1,
            ..Default::default()
        };
        let (out, hist) = train(&s, &pairs, &cfg).unwrap();
        assert_eq!(out, s);
        let mut e0: Vec<f64> = hist[..5].iter().map(|r| r.loss_g + r.loss_l).collect();
        let mut e1: Vec<f64> = hist[5..].iter().map(|r| r.loss_g + r.loss_l).collect();
        e0.sort_by(f64::total_cmp);
        e1.sort_by(f64::total_cmp);
        assert_eq!(e0, e1);
        let cfg = TrainConfig { batch_size: 2, ..cfg };
        let (_, hist) = train(&s, &pairs, &cfg).unwrap();
        assert_eq!(hist.len(), expected_steps(5, &cfg));
        assert_eq!(hist.len(), 2 * 3);
    }

    #[test]
    fn tiny_step_does_not_increase_loss() {
        let pair = synthetic_pair(6, 4, 8);
        let s = Student::random(6, 6, 10, 3);
        let before = s.loss(&pair).unwrap().total(1.0);
        let cfg = TrainConfig {
            lr: 1e-6,
            epochs: 1,
            batch_size: 1,
            freeze_head: false,
            ..Default::default()
        };
        let (out, _) = train(&s, std::slice::from_ref(&pair), &cfg).unwrap();
        assert!(out.loss(&pair).unwrap().total(1.0) <= before);
    }

    #[test]
    fn pairs_per_epoch_is_honored() {
        let pairs: Vec<_> = (0..7).map(|i| synthetic_pair(2, 1, i)).collect();
        let s = Student::random(2, 2, 2, 1);
        let cfg = TrainConfig {
            lr: 0.0,
            epochs: 1,
            batch_size: 24,
            pairs_per_epoch: Some(80_000),
            ..Default::default()
        };
        let (_, hist) = train(&s, &pairs, &cfg).unwrap();
        assert_eq!(hist.len(), 80_000usize.div_ceil(24));
    }

    #[test]
    fn checkpoint_roundtrip() {
        let s = Student::random(5, 4, 7, 11);
        let mut buf = Vec::new();
        s.write_checkpoint(&mut buf).unwrap();
        assert_eq!(buf.len(), 20 + 4 * s.num_weights());
        let back = Student::read_checkpoint(&buf[..]).unwrap();
        let mut buf2 = Vec::new();
        back.write_checkpoint(&mut buf2).unwrap();
        assert_eq!(buf, buf2);
        for (a, b) in s.matrices().iter().zip(back.matrices()) {
            assert!((*a - b).amax() < 1e-6);
        }
        assert!(Student::read_checkpoint(&buf[..30]).is_err());
    }

    #[test]
    fn shape_mismatch() {
        let pair = synthetic_pair(4, 2, 1);
        let s = Student::random(5, 5, 4, 1);
        assert!(matches!(s.loss(&pair), Err(DistillError::ShapeMismatch(_))));
    }
}
