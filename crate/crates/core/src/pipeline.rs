//! View augmentation, coarse localization and virtual-view pose refinement.

use std::io::Write;
use std::time::Instant;

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::distill::Student;
use crate::features::{self, FeatureError, FeatureParams, ImageFeatures, LocalFeatureSet};
use crate::geometry::{rotation_angle, Intrinsics, Pose};
use crate::image::RgbImage;
use crate::matching::{self, Correspondence, MatchParams};
use crate::pose_solver::{self, inliers_under, PoseEstimate, RansacParams, Stage, Status};
use crate::retrieval::{CorpusItem, RetrievalError, RetrievalIndex, ViewRef};
use crate::scene_db::{DbError, KeyframeId, ProximityParams, SceneDatabase};
use crate::virtual_view::{self, FeatureMode, ProjectionParams, ValidityParams, ViewError, VirtualFeatures};

/// Meters within which pooled world points count as the same point.
pub const POOL_RESOLUTION: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("database keyframes have no extracted features")]
    MissingFeatures,
    #[error("the index references virtual views but none were supplied")]
    MissingVirtualStore,
    #[error(transparent)]
    Db(#[from] DbError),
    #[error(transparent)]
    View(#[from] ViewError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Offset {
    Front,
    Back,
    Left,
    Right,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentationParams {
    pub offsets: Vec<Offset>,
    /// Meters.
    pub offset_distance: f64,
    pub yaw_steps: usize,
    /// Degrees.
    pub yaw_increment: f64,
    pub num_sources: usize,
    pub proximity: ProximityParams,
    pub projection: ProjectionParams,
    pub validity: ValidityParams,
    pub mode: FeatureMode,
    /// Whitened dimensions kept in the index (all when unset).
    pub whiten_keep: Option<usize>,
}

impl Default for AugmentationParams {
    fn default() -> Self {
        Self {
            offsets: vec![Offset::Front, Offset::Back, Offset::Left, Offset::Right],
            offset_distance: 2.5,
            yaw_steps: 12,
            yaw_increment: 30.0,
            num_sources: 4,
            proximity: ProximityParams::default(),
            projection: ProjectionParams::default(),
            validity: ValidityParams::default(),
            mode: FeatureMode::Deterministic,
            whiten_keep: None,
        }
    }
}

impl AugmentationParams {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if !(self.offset_distance >= 0.0) {
            return Err(PipelineError::InvalidParams("offset_distance must be non-negative".into()));
        }
        if self.yaw_steps == 0 || !(self.yaw_increment >= 0.0) {
            return Err(PipelineError::InvalidParams("need at least one yaw step".into()));
        }
        if self.yaw_steps as f64 * self.yaw_increment > 360.0 + 1e-9 {
            return Err(PipelineError::InvalidParams("yaw_steps · yaw_increment exceeds 360°".into()));
        }
        if self.num_sources == 0 {
            return Err(PipelineError::InvalidParams("num_sources must be positive".into()));
        }
        Ok(())
    }
}

/// Horizontal unit heading of a camera; falls back to its x axis when it
/// looks straight up or down.
fn horizontal_heading(pose: &Pose) -> Vector3<f64> {
    let f = pose.forward();
    let h = Vector3::new(f.x, f.y, 0.0);
    if h.norm() > 1e-9 {
        return h.normalize();
    }
    let right = pose.rotation.row(0).transpose();
    let r = Vector3::new(right.x, right.y, 0.0).normalize();
    Vector3::new(-r.y, r.x, 0.0)
}

fn is_duplicate(kept: &[Pose], p: &Pose) -> bool {
    kept.iter().any(|q| {
        (q.center() - p.center()).norm() < 0.01 && rotation_angle(&q.rotation, &p.rotation).to_degrees() < 1.0
    })
}

/// Virtual poses around every database keyframe. Offsets are horizontal and
/// taken in the seed camera's heading frame; orientations turn the seed
/// about the world vertical. Near-duplicates (1 cm, 1°) keep the first.
pub fn generate_augmentation_grid(db: &SceneDatabase, params: &AugmentationParams) -> Result<Vec<Pose>, PipelineError> {
    params.validate()?;
    if db.is_empty() {
        return Err(DbError::EmptyDatabase.into());
    }
    let mut out: Vec<Pose> = Vec::new();
    for kf in db.keyframes() {
        let c = kf.pose.center();
        let fwd = horizontal_heading(&kf.pose);
        // matches the camera x axis of a level camera
        let right = Vector3::new(fwd.y, -fwd.x, 0.0);
        for off in &params.offsets {
            let dir = match off {
                Offset::Front => fwd,
                Offset::Back => -fwd,
                Offset::Left => -right,
                Offset::Right => right,
            };
            let center = c + dir * params.offset_distance;
            let moved = Pose::from_center(kf.pose.rotation, center);
            for j in 0..params.yaw_steps {
                let p = moved.yawed((j as f64 * params.yaw_increment).to_radians());
                if !is_duplicate(&out, &p) {
                    out.push(p);
                }
            }
        }
    }
    Ok(out)
}

/// Virtual views kept in the index, in virtual-id order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct VirtualStore {
    pub views: Vec<VirtualFeatures>,
    pub sources: Vec<Vec<KeyframeId>>,
}

impl VirtualStore {
    pub fn len(&self) -> usize {
        self.views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.views.is_empty()
    }
}

#[derive(Debug)]
pub struct Augmentation {
    pub index: RetrievalIndex,
    pub store: VirtualStore,
    pub grid_size: usize,
}

fn real_items(db: &SceneDatabase) -> Result<Vec<CorpusItem<'_>>, PipelineError> {
    db.keyframes()
        .iter()
        .map(|kf| {
            let f = kf.features.as_ref().ok_or(PipelineError::MissingFeatures)?;
            Ok(CorpusItem {
                view: ViewRef::Real(kf.id),
                pose: kf.pose,
                descriptor: &f.global,
            })
        })
        .collect()
}

/// Index over the real keyframes alone.
pub fn build_real_index(db: &SceneDatabase, whiten_keep: Option<usize>) -> Result<RetrievalIndex, PipelineError> {
    Ok(RetrievalIndex::build(&real_items(db)?, whiten_keep)?)
}

/// Renders one virtual view. `None` when it fails the validity check.
fn render_virtual(
    db: &SceneDatabase,
    pose: &Pose,
    k: &Intrinsics,
    params: &AugmentationParams,
    student: Option<&Student>,
    gem_p: f64,
    check_validity: bool,
) -> Result<Option<(VirtualFeatures, Vec<KeyframeId>)>, PipelineError> {
    let sources = db.nearest_keyframes(pose, params.num_sources, &params.proximity)?;
    let view = virtual_view::render_projection(db, pose, k, &sources, &params.projection)?;
    if check_validity && !virtual_view::validity(&view, &params.validity).0 {
        return Ok(None);
    }
    match virtual_view::render_features(&view, params.mode, student, gem_p) {
        Ok(f) => Ok(Some((f, sources))),
        Err(ViewError::EmptyMask) => Ok(None),
        Err(e) => Err(e.into()),
    }
}

/// Renders every grid pose, keeps the valid ones and indexes them together
/// with the real keyframes under one whitening.
pub fn augment_database(
    db: &SceneDatabase,
    grid: &[Pose],
    k: &Intrinsics,
    params: &AugmentationParams,
    gem_p: f64,
    student: Option<&Student>,
) -> Result<Augmentation, PipelineError> {
    params.validate()?;
    if grid.is_empty() {
        return Err(PipelineError::InvalidParams("empty augmentation grid".into()));
    }
    if !db.has_features() {
        return Err(PipelineError::MissingFeatures);
    }
    let rendered: Vec<Option<(VirtualFeatures, Vec<KeyframeId>)>> = grid
        .par_iter()
        .map(|p| render_virtual(db, p, k, params, student, gem_p, true))
        .collect::<Result<_, _>>()?;
    let mut store = VirtualStore::default();
    for (f, s) in rendered.into_iter().flatten() {
        store.views.push(f);
        store.sources.push(s);
    }
    let mut items = real_items(db)?;
    for (i, v) in store.views.iter().enumerate() {
        items.push(CorpusItem {
            view: ViewRef::Virtual(i as u32),
            pose: v.pose,
            descriptor: &v.global,
        });
    }
    let index = RetrievalIndex::build(&items, params.whiten_keep)?;
    Ok(Augmentation {
        index,
        store,
        grid_size: grid.len(),
    })
}

/// Re-renders the virtual views an index refers to from their stored poses.
pub fn restore_virtual_store(
    db: &SceneDatabase,
    index: &RetrievalIndex,
    k: &Intrinsics,
    params: &AugmentationParams,
    gem_p: f64,
    student: Option<&Student>,
) -> Result<VirtualStore, PipelineError> {
    let poses: Vec<(u32, Pose)> = index
        .entries()
        .iter()
        .filter_map(|e| match e.view {
            ViewRef::Virtual(i) => Some((i, e.pose)),
            ViewRef::Real(_) => None,
        })
        .collect();
    for (pos, (i, _)) in poses.iter().enumerate() {
        if *i as usize != pos {
            return Err(PipelineError::InvalidParams("virtual ids are not consecutive".into()));
        }
    }
    let rendered: Vec<(VirtualFeatures, Vec<KeyframeId>)> = poses
        .par_iter()
        .map(|(_, p)| {
            render_virtual(db, p, k, params, student, gem_p, false)?
                .ok_or(PipelineError::View(ViewError::EmptyMask))
        })
        .collect::<Result<_, _>>()?;
    let (views, sources) = rendered.into_iter().unzip();
    Ok(VirtualStore { views, sources })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RefineParams {
    pub enabled: bool,
    pub iterations: usize,
    pub num_sources: usize,
    pub proximity: ProximityParams,
    pub projection: ProjectionParams,
    pub mode: FeatureMode,
}

impl Default for RefineParams {
    fn default() -> Self {
        Self {
            enabled: true,
            iterations: 1,
            num_sources: 4,
            proximity: ProximityParams::default(),
            projection: ProjectionParams::default(),
            mode: FeatureMode::Deterministic,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LocalizeParams {
    pub features: FeatureParams,
    /// Retrieved views per query.
    pub k: usize,
    pub matching: MatchParams,
    pub ransac: RansacParams,
    /// When false, retrieved virtual views are matched through the real
    /// keyframes they were rendered from.
    pub virtual_local: bool,
    pub refine: RefineParams,
}

impl Default for LocalizeParams {
    fn default() -> Self {
        Self {
            features: FeatureParams::default(),
            k: 40,
            matching: MatchParams::default(),
            ransac: RansacParams::default(),
            virtual_local: true,
            refine: RefineParams::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Retrieved {
    pub entry: u32,
    pub view: ViewRef,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoarseOutput {
    pub estimate: PoseEstimate,
    pub retrieved: Vec<Retrieved>,
    pub correspondences: Vec<Correspondence>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub features_ms: f64,
    pub coarse_ms: f64,
    pub refine_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalizationResult {
    pub query_id: u32,
    pub coarse: PoseEstimate,
    pub refined: Option<PoseEstimate>,
    pub retrieved: Vec<Retrieved>,
    /// The pooled coarse correspondences.
    pub correspondences: Vec<Correspondence>,
    pub num_correspondences: usize,
    pub timings: Timings,
}

impl LocalizationResult {
    /// Refined if present and ok, else coarse.
    pub fn final_estimate(&self) -> &PoseEstimate {
        match &self.refined {
            Some(r) if r.is_ok() => r,
            _ => &self.coarse,
        }
    }
}

/// Everything the online stage reads.
#[derive(Clone, Copy)]
pub struct Localizer<'a> {
    pub db: &'a SceneDatabase,
    pub index: &'a RetrievalIndex,
    pub store: Option<&'a VirtualStore>,
    pub student: Option<&'a Student>,
    pub params: &'a LocalizeParams,
}

fn failed(reason: &str, n: usize) -> PoseEstimate {
    PoseEstimate::failed(reason, n)
}

impl<'a> Localizer<'a> {
    fn virtual_view(&self, i: u32) -> Result<(&'a VirtualFeatures, &'a [KeyframeId]), PipelineError> {
        let store = self.store.ok_or(PipelineError::MissingVirtualStore)?;
        let v = store.views.get(i as usize).ok_or(PipelineError::MissingVirtualStore)?;
        Ok((v, &store.sources[i as usize]))
    }

    fn match_real(&self, query: &LocalFeatureSet, id: KeyframeId) -> Result<Vec<Correspondence>, PipelineError> {
        let kf = self.db.try_get(id)?;
        let Some(f) = &kf.features else {
            return Err(PipelineError::MissingFeatures);
        };
        Ok(match matching::match_descriptors(query, &f.local, &self.params.matching) {
            Ok(m) => matching::lift_keyframe(&m, query, kf, &self.params.matching),
            Err(_) => Vec::new(),
        })
    }

    /// Retrieval, matching against every retrieved view, one pooled RANSAC.
    pub fn localize_coarse(&self, query: &ImageFeatures, k: &Intrinsics) -> Result<CoarseOutput, PipelineError> {
        let p = self.params;
        let top = self.index.query_topk(&query.global, p.k)?;
        let retrieved: Vec<Retrieved> = top
            .iter()
            .map(|&(entry, distance)| Retrieved {
                entry,
                view: self.index.entry(entry).expect("retrieved id in index").view,
                distance,
            })
            .collect();
        // what to match against, in retrieval order
        enum Target<'v> {
            Real(KeyframeId),
            Virtual(u32, &'v VirtualFeatures),
        }
        let mut targets: Vec<Target<'a>> = Vec::new();
        let mut reals: Vec<KeyframeId> = Vec::new();
        let mut push_real = |id: KeyframeId, targets: &mut Vec<Target<'a>>| {
            if !reals.contains(&id) {
                reals.push(id);
                targets.push(Target::Real(id));
            }
        };
        for r in &retrieved {
            match r.view {
                ViewRef::Real(id) => push_real(id, &mut targets),
                ViewRef::Virtual(i) => {
                    let (v, sources) = self.virtual_view(i)?;
                    if p.virtual_local {
                        targets.push(Target::Virtual(i, v));
                    } else {
                        for &s in sources {
                            push_real(s, &mut targets);
                        }
                    }
                }
            }
        }
        let lifted: Vec<Vec<Correspondence>> = targets
            .par_iter()
            .map(|t| match t {
                Target::Real(id) => self.match_real(&query.local, *id),
                Target::Virtual(i, v) => Ok(match matching::match_descriptors(&query.local, &v.local, &p.matching) {
                    Ok(m) => matching::lift_virtual(&m, &query.local, v, Some(ViewRef::Virtual(*i))),
                    Err(_) => Vec::new(),
                }),
            })
            .collect::<Result<_, _>>()?;
        // virtual views built from the same keyframes repeat correspondences
        let correspondences = matching::dedup_correspondences(lifted.into_iter().flatten().collect(), POOL_RESOLUTION);
        let n = correspondences.len();
        let estimate = if n < 4 {
            failed("NoMatches", n)
        } else {
            pose_solver::ransac_pnp(&correspondences, k, &p.ransac).unwrap_or_else(|e| failed(&e.to_string(), n))
        };
        Ok(CoarseOutput {
            estimate,
            retrieved,
            correspondences,
        })
    }

    /// One re-render at the current estimate followed by matching and PnP.
    /// The estimate is replaced only by an ok result with at least as many
    /// inliers.
    pub fn refine_with_virtual_view(&self, query: &LocalFeatureSet, k: &Intrinsics, coarse: &PoseEstimate) -> PoseEstimate {
        let rp = &self.params.refine;
        let mut current = coarse.clone();
        if !current.is_ok() {
            return current;
        }
        for _ in 0..rp.iterations.max(1) {
            match self.refine_once(query, k, &current) {
                Some(r) if r.is_ok() && r.num_inliers() >= current.num_inliers() => current = r,
                _ => break,
            }
        }
        current
    }

    fn refine_once(&self, query: &LocalFeatureSet, k: &Intrinsics, current: &PoseEstimate) -> Option<PoseEstimate> {
        let rp = &self.params.refine;
        let sources = self.db.nearest_keyframes(&current.pose, rp.num_sources, &rp.proximity).ok()?;
        let view = virtual_view::render_projection(self.db, &current.pose, k, &sources, &rp.projection).ok()?;
        if view.keypoints.is_empty() {
            return None;
        }
        let vf = virtual_view::render_features(&view, rp.mode, self.student, self.params.features.gem_p).ok()?;
        let m = matching::match_descriptors(query, &vf.local, &self.params.matching).ok()?;
        let corr = matching::lift_virtual(&m, query, &vf, None);
        if corr.len() < 4 {
            return None;
        }
        let mut est = pose_solver::ransac_pnp(&corr, k, &self.params.ransac).ok()?;
        est.stage = Stage::Refined;
        Some(est)
    }

    /// Full two-stage localization of one query image.
    pub fn localize(&self, query_id: u32, image: &RgbImage, k: &Intrinsics) -> LocalizationResult {
        let t0 = Instant::now();
        let feats = match features::extract_all(image, &self.params.features) {
            Ok(f) => f,
            Err(e) => return self.failed_result(query_id, &e.to_string(), t0),
        };
        let features_ms = ms(t0);
        let t1 = Instant::now();
        let coarse = match self.localize_coarse(&feats, k) {
            Ok(c) => c,
            Err(e) => return self.failed_result(query_id, &e.to_string(), t0),
        };
        let coarse_ms = ms(t1);
        let t2 = Instant::now();
        let refined = (self.params.refine.enabled && coarse.estimate.is_ok())
            .then(|| self.refine_with_virtual_view(&feats.local, k, &coarse.estimate));
        LocalizationResult {
            query_id,
            num_correspondences: coarse.correspondences.len(),
            coarse: coarse.estimate,
            refined,
            retrieved: coarse.retrieved,
            correspondences: coarse.correspondences,
            timings: Timings {
                features_ms,
                coarse_ms,
                refine_ms: ms(t2),
            },
        }
    }

    fn failed_result(&self, query_id: u32, reason: &str, t0: Instant) -> LocalizationResult {
        LocalizationResult {
            query_id,
            coarse: failed(reason, 0),
            refined: None,
            retrieved: Vec::new(),
            correspondences: Vec::new(),
            num_correspondences: 0,
            timings: Timings {
                features_ms: ms(t0),
                ..Default::default()
            },
        }
    }

    /// Localizes every query in parallel; results keep the input order.
    pub fn localize_batch(&self, queries: &[(u32, &RgbImage)], k: &Intrinsics) -> Vec<LocalizationResult> {
        queries.par_iter().map(|(id, img)| self.localize(*id, img, k)).collect()
    }
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// Coarse estimate at an arbitrary pose, with inliers taken from `corr`.
pub fn estimate_at(pose: Pose, corr: &[Correspondence], k: &Intrinsics, threshold: f64) -> PoseEstimate {
    let (inliers, mean) = inliers_under(k, &pose, corr, threshold);
    PoseEstimate {
        pose,
        inliers,
        num_correspondences: corr.len(),
        mean_reprojection_error: mean,
        stage: Stage::Coarse,
        status: Status::Ok,
        iterations: 0,
    }
}

/// One line of the results file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResultRecord {
    pub query_id: u32,
    pub status: String,
    pub stage: Stage,
    pub pose: Option<String>,
    pub num_inliers: usize,
    pub num_correspondences: usize,
    pub retrieved: Vec<ViewRef>,
    pub features_ms: f64,
    pub coarse_ms: f64,
    pub refine_ms: f64,
}

impl ResultRecord {
    pub fn from_result(r: &LocalizationResult) -> Self {
        let e = r.final_estimate();
        let (status, pose) = match &e.status {
            Status::Ok => ("ok".to_string(), Some(e.pose.to_text())),
            Status::Failed(why) => (format!("failed: {why}"), None),
        };
        Self {
            query_id: r.query_id,
            status,
            stage: e.stage,
            pose,
            num_inliers: e.num_inliers(),
            num_correspondences: r.num_correspondences,
            retrieved: r.retrieved.iter().map(|x| x.view).collect(),
            features_ms: r.timings.features_ms,
            coarse_ms: r.timings.coarse_ms,
            refine_ms: r.timings.refine_ms,
        }
    }

    /// The reported pose, `None` for failures.
    pub fn parsed_pose(&self) -> Option<Pose> {
        self.pose.as_deref().and_then(|s| Pose::parse_text(s).ok())
    }
}

pub fn write_results_jsonl<W: Write>(mut w: W, results: &[LocalizationResult]) -> Result<(), PipelineError> {
    for r in results {
        let line = serde_json::to_string(&ResultRecord::from_result(r)).map_err(std::io::Error::other)?;
        writeln!(w, "{line}")?;
    }
    Ok(())
}

pub fn read_results_jsonl(text: &str) -> Result<Vec<ResultRecord>, PipelineError> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| PipelineError::InvalidParams(format!("results line {}: {e}", i + 1)))
        })
        .collect()
}
