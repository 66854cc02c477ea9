//! Accuracy at nested pose thresholds, ablation runs and their reports.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::distill::Student;
use crate::features::FeatureParams;
use crate::geometry::{pose_error, Intrinsics, Pose, PoseError};
use crate::matching::{Correspondence, MatchParams};
use crate::pose_solver::reprojection_error;
use crate::pipeline::{self, AugmentationParams, LocalizationResult, LocalizeParams, Localizer, PipelineError};
use crate::synth::{self, SceneParams, SynthError, SyntheticScene};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("result and ground-truth query ids differ: {0}")]
    IdMismatch(String),
    #[error("malformed {what} line {line}: {reason}")]
    Parse { what: &'static str, line: usize, reason: String },
    #[error("no runs to report")]
    NoRuns,
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Db(#[from] crate::scene_db::DbError),
}

/// (meters, degrees) pairs, tightest first.
pub type Thresholds = [(f64, f64); 3];

pub const DEFAULT_THRESHOLDS: Thresholds = [(0.25, 2.0), (0.5, 5.0), (5.0, 10.0)];

/// Percentages of queries within each threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccuracyTriple {
    pub acc_tight: f64,
    pub acc_mid: f64,
    pub acc_loose: f64,
}

impl fmt::Display for AccuracyTriple {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.1} / {:.1} / {:.1}", self.acc_tight, self.acc_mid, self.acc_loose)
    }
}

impl AccuracyTriple {
    pub fn is_monotone(&self) -> bool {
        self.acc_tight <= self.acc_mid && self.acc_mid <= self.acc_loose
    }
}

/// `None` entries are failures and count against every threshold.
pub fn accuracy_from_errors(errors: &[Option<PoseError>], thresholds: &Thresholds) -> AccuracyTriple {
    let n = errors.len();
    let pct = |(m, d): (f64, f64)| {
        if n == 0 {
            return 0.0;
        }
        let hits = errors.iter().filter(|e| e.is_some_and(|e| e.within(m, d))).count();
        100.0 * hits as f64 / n as f64
    };
    AccuracyTriple {
        acc_tight: pct(thresholds[0]),
        acc_mid: pct(thresholds[1]),
        acc_loose: pct(thresholds[2]),
    }
}

/// Pairs estimates with ground truth by query id. Both sides must hold
/// exactly the same ids.
pub fn evaluate_accuracy(
    results: &[(u32, Option<Pose>)],
    gts: &[(u32, Pose)],
    thresholds: &Thresholds,
) -> Result<AccuracyTriple, EvalError> {
    let mut gt: BTreeMap<u32, Pose> = BTreeMap::new();
    for (id, p) in gts {
        if gt.insert(*id, *p).is_some() {
            return Err(EvalError::IdMismatch(format!("ground truth repeats query {id}")));
        }
    }
    let mut seen = BTreeMap::new();
    let mut errors = Vec::with_capacity(results.len());
    for (id, est) in results {
        let Some(g) = gt.get(id) else {
            return Err(EvalError::IdMismatch(format!("query {id} has no ground truth")));
        };
        if seen.insert(*id, ()).is_some() {
            return Err(EvalError::IdMismatch(format!("results repeat query {id}")));
        }
        errors.push(est.map(|e| pose_error(&e, g)));
    }
    if let Some(missing) = gt.keys().find(|id| !seen.contains_key(id)) {
        return Err(EvalError::IdMismatch(format!("query {missing} has no result")));
    }
    Ok(accuracy_from_errors(&errors, thresholds))
}

pub fn write_ground_truth_csv(poses: &[(u32, Pose)]) -> String {
    let mut s = String::from("query_id,pose\n");
    for (id, p) in poses {
        s.push_str(&format!("{id},{}\n", p.to_text()));
    }
    s
}

pub fn read_ground_truth_csv(text: &str) -> Result<Vec<(u32, Pose)>, EvalError> {
    let err = |line: usize, reason: String| EvalError::Parse {
        what: "ground truth",
        line,
        reason,
    };
    let mut out = Vec::new();
    for (i, l) in text.lines().enumerate() {
        if i == 0 && l.starts_with("query_id") || l.trim().is_empty() {
            continue;
        }
        let (id, pose) = l.split_once(',').ok_or_else(|| err(i + 1, "expected two fields".into()))?;
        let id = id.trim().parse::<u32>().map_err(|e| err(i + 1, e.to_string()))?;
        let pose = Pose::parse_text(pose).map_err(|e| err(i + 1, e.to_string()))?;
        out.push((id, pose));
    }
    Ok(out)
}

/// Plain-text table and CSV of named triples, rows in the given order.
#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub text: String,
    pub csv: String,
}

pub fn make_report(runs: &[(String, AccuracyTriple)], thresholds: &Thresholds) -> Result<Report, EvalError> {
    if runs.is_empty() {
        return Err(EvalError::NoRuns);
    }
    let head = thresholds
        .iter()
        .map(|(m, d)| format!("{m}m, {d}°"))
        .collect::<Vec<_>>()
        .join(" / ");
    let name_w = runs.iter().map(|(n, _)| n.chars().count()).max().unwrap().max("config".len());
    let mut text = format!("{:<name_w$}  {head}\n", "config");
    text.push_str(&format!("{}\n", "-".repeat(name_w + 2 + head.chars().count())));
    let mut csv = String::from("config,acc_tight,acc_mid,acc_loose\n");
    for (name, t) in runs {
        text.push_str(&format!("{name:<name_w$}  {t}\n"));
        csv.push_str(&format!("{name},{:.2},{:.2},{:.2}\n", t.acc_tight, t.acc_mid, t.acc_loose));
    }
    Ok(Report { text, csv })
}

pub fn parse_report_csv(text: &str) -> Result<Vec<(String, AccuracyTriple)>, EvalError> {
    let err = |line: usize, reason: String| EvalError::Parse {
        what: "report",
        line,
        reason,
    };
    let mut out = Vec::new();
    for (i, l) in text.lines().enumerate().skip(1) {
        if l.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = l.rsplitn(4, ',').collect();
        if f.len() != 4 {
            return Err(err(i + 1, "expected four fields".into()));
        }
        let num = |s: &str| s.trim().parse::<f64>().map_err(|e| err(i + 1, e.to_string()));
        out.push((
            f[3].to_string(),
            AccuracyTriple {
                acc_tight: num(f[2])?,
                acc_mid: num(f[1])?,
                acc_loose: num(f[0])?,
            },
        ));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchmarkConfig {
    pub scene: SceneParams,
    pub features: FeatureParams,
    pub augmentation: AugmentationParams,
    pub localize: LocalizeParams,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            scene: SceneParams::default(),
            features: FeatureParams::default(),
            // the synthetic room is a few meters across
            augmentation: AugmentationParams {
                offset_distance: 1.0,
                ..Default::default()
            },
            // 40 retrievals would cover most of a 50-view database
            localize: LocalizeParams {
                k: 10,
                matching: MatchParams {
                    max_distance: Some(0.45),
                    ..Default::default()
                },
                ..Default::default()
            },
        }
    }
}

impl BenchmarkConfig {
    /// Derives every seed from one value.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.scene.seed = seed;
        self.localize.ransac.seed = seed;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub name: String,
    pub accuracy: AccuracyTriple,
    /// Queries whose pooled correspondences reached four.
    pub num_matched: usize,
    /// Queries with at least four pooled correspondences that reproject
    /// within the inlier threshold under the ground-truth pose.
    pub num_matched_verified: usize,
    pub errors: Vec<Option<PoseError>>,
    pub results: Vec<LocalizationResult>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationOutcome {
    pub runs: Vec<RunSummary>,
    pub grid_size: usize,
    pub num_virtual: usize,
}

impl AblationOutcome {
    pub fn report(&self) -> Report {
        let runs: Vec<(String, AccuracyTriple)> = self.runs.iter().map(|r| (r.name.clone(), r.accuracy)).collect();
        make_report(&runs, &DEFAULT_THRESHOLDS).expect("four runs")
    }

    pub fn run(&self, name: &str) -> Option<&RunSummary> {
        self.runs.iter().find(|r| r.name == name)
    }
}

pub const RUN_NAMES: [&str; 4] = ["baseline", "+VA", "+VA+PR", "VA w/o local"];

/// Correspondences consistent with `gt` within `threshold` pixels.
pub fn count_verified(corr: &[Correspondence], gt: &Pose, k: &Intrinsics, threshold: f64) -> usize {
    corr.iter()
        .filter(|c| reprojection_error(k, gt, c).is_some_and(|e| e <= threshold))
        .count()
}

fn summarize(name: &str, scene: &SyntheticScene, threshold: f64, results: Vec<LocalizationResult>) -> RunSummary {
    let errors: Vec<Option<PoseError>> = results
        .iter()
        .zip(&scene.queries)
        .map(|(r, q)| {
            let e = r.final_estimate();
            e.is_ok().then(|| pose_error(&e.pose, &q.pose))
        })
        .collect();
    RunSummary {
        name: name.to_string(),
        accuracy: accuracy_from_errors(&errors, &DEFAULT_THRESHOLDS),
        num_matched: results.iter().filter(|r| r.num_correspondences >= 4).count(),
        num_matched_verified: results
            .iter()
            .zip(&scene.queries)
            .filter(|(r, q)| count_verified(&r.correspondences, &q.pose, &scene.intrinsics, threshold) >= 4)
            .count(),
        errors,
        results,
    }
}

/// Runs baseline, +VA, +VA+PR and VA w/o local on an already generated scene.
pub fn run_ablation_on(
    scene: &SyntheticScene,
    cfg: &BenchmarkConfig,
    student: Option<&Student>,
) -> Result<AblationOutcome, EvalError> {
    let mut db = scene.to_database()?;
    db.compute_features(&cfg.features)?;
    let k = scene.intrinsics;
    let real_index = pipeline::build_real_index(&db, cfg.augmentation.whiten_keep)?;
    let grid = pipeline::generate_augmentation_grid(&db, &cfg.augmentation)?;
    let aug = pipeline::augment_database(&db, &grid, &k, &cfg.augmentation, cfg.features.gem_p, student)?;
    let queries: Vec<(u32, &crate::image::RgbImage)> =
        scene.queries.iter().enumerate().map(|(i, q)| (i as u32, &q.image)).collect();

    let base = LocalizeParams {
        features: cfg.features,
        ..cfg.localize.clone()
    };
    let no_refine = |mut p: LocalizeParams| {
        p.refine.enabled = false;
        p
    };
    let settings = [
        (RUN_NAMES[0], false, no_refine(base.clone())),
        (RUN_NAMES[1], true, no_refine(base.clone())),
        (RUN_NAMES[2], true, {
            let mut p = base.clone();
            p.refine.enabled = true;
            p
        }),
        (RUN_NAMES[3], true, {
            let mut p = no_refine(base.clone());
            p.virtual_local = false;
            p
        }),
    ];
    let mut runs = Vec::with_capacity(settings.len());
    for (name, augmented, params) in &settings {
        let loc = Localizer {
            db: &db,
            index: if *augmented { &aug.index } else { &real_index },
            store: augmented.then_some(&aug.store),
            student,
            params,
        };
        runs.push(summarize(name, scene, params.ransac.inlier_threshold, loc.localize_batch(&queries, &k)));
    }
    Ok(AblationOutcome {
        runs,
        grid_size: aug.grid_size,
        num_virtual: aug.store.len(),
    })
}

pub fn run_ablation(cfg: &BenchmarkConfig, student: Option<&Student>) -> Result<AblationOutcome, EvalError> {
    let scene = synth::generate_scene(&cfg.scene)?;
    run_ablation_on(&scene, cfg, student)
}
