//! Mutual-nearest-neighbour descriptor matching with a ratio test, and
//! lifting matches to 2D–3D correspondences.

use std::io::Write;

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::LocalFeatureSet;
use crate::geometry::backproject;
use crate::retrieval::ViewRef;
use crate::scene_db::Keyframe;
use crate::virtual_view::VirtualFeatures;

#[derive(Debug, Error, PartialEq)]
pub enum MatchError {
    #[error("cannot match an empty feature set")]
    EmptyFeatureSet,
    #[error("descriptor dimensions differ: {0} vs {1}")]
    DimensionMismatch(usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MatchParams {
    pub ratio: f64,
    /// Matches farther apart than this are dropped.
    pub max_distance: Option<f64>,
    /// Relative depth spread for sub-pixel depth interpolation when lifting.
    pub depth_spread: f64,
}

impl Default for MatchParams {
    fn default() -> Self {
        Self {
            ratio: 0.8,
            max_distance: None,
            depth_spread: 0.05,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Match {
    pub query: usize,
    pub reference: usize,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchSet {
    pub reference: Option<ViewRef>,
    /// Sorted by query index.
    pub pairs: Vec<Match>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub pixel: Vector2<f64>,
    pub world: Vector3<f64>,
    pub source: Option<ViewRef>,
}

/// Row-major `|a| × |b|` Euclidean distances.
pub fn distance_matrix(a: &LocalFeatureSet, b: &LocalFeatureSet) -> Vec<f64> {
    let mut d = Vec::with_capacity(a.len() * b.len());
    for da in a.descriptors() {
        for db in b.descriptors() {
            d.push(crate::retrieval::euclidean(da, db));
        }
    }
    d
}

struct Best {
    index: usize,
    first: f64,
    second: f64,
}

fn best_two(values: impl Iterator<Item = f64>) -> Best {
    let mut b = Best {
        index: usize::MAX,
        first: f64::INFINITY,
        second: f64::INFINITY,
    };
    for (i, v) in values.enumerate() {
        if v < b.first {
            b.second = b.first;
            b.first = v;
            b.index = i;
        } else if v < b.second {
            b.second = v;
        }
    }
    b
}

fn passes_ratio(b: &Best, ratio: f64) -> bool {
    // an exact tie for nearest is ambiguous even at distance zero
    b.first < b.second && b.first <= ratio * b.second
}

/// Pairs `(i, j)` where each is the other's nearest neighbour and the ratio
/// test holds from both sides.
pub fn match_descriptors(a: &LocalFeatureSet, b: &LocalFeatureSet, params: &MatchParams) -> Result<MatchSet, MatchError> {
    if a.is_empty() || b.is_empty() {
        return Err(MatchError::EmptyFeatureSet);
    }
    if a.dim() != b.dim() {
        return Err(MatchError::DimensionMismatch(a.dim(), b.dim()));
    }
    let (na, nb) = (a.len(), b.len());
    let d = distance_matrix(a, b);
    let rows: Vec<Best> = (0..na).map(|i| best_two(d[i * nb..(i + 1) * nb].iter().copied())).collect();
    let cols: Vec<Best> = (0..nb).map(|j| best_two((0..na).map(|i| d[i * nb + j]))).collect();
    let mut pairs = Vec::new();
    for (i, r) in rows.iter().enumerate() {
        let j = r.index;
        let c = &cols[j];
        if c.index != i || !passes_ratio(r, params.ratio) || !passes_ratio(c, params.ratio) {
            continue;
        }
        if params.max_distance.is_some_and(|m| r.first > m) {
            continue;
        }
        pairs.push(Match {
            query: i,
            reference: j,
            distance: r.first,
        });
    }
    Ok(MatchSet { reference: None, pairs })
}

/// Lifts matches against a keyframe through its depth map. Matches whose
/// reference keypoint has no valid depth are dropped.
pub fn lift_keyframe(
    matches: &MatchSet,
    query: &LocalFeatureSet,
    keyframe: &Keyframe,
    params: &MatchParams,
) -> Vec<Correspondence> {
    let Some(f) = &keyframe.features else {
        return Vec::new();
    };
    let kps = f.local.keypoints();
    matches
        .pairs
        .iter()
        .filter_map(|m| {
            let kp = kps.get(m.reference)?;
            let px = Vector2::new(kp.x as f64, kp.y as f64);
            let d = keyframe.depth.sample(px.x, px.y, params.depth_spread)?;
            let world = backproject(&keyframe.intrinsics, &keyframe.pose, &px, d).ok()?;
            let q = query.keypoints()[m.query];
            Some(Correspondence {
                pixel: Vector2::new(q.x as f64, q.y as f64),
                world,
                source: Some(ViewRef::Real(keyframe.id)),
            })
        })
        .collect()
}

/// Lifts matches against a virtual view using its stored world points.
pub fn lift_virtual(
    matches: &MatchSet,
    query: &LocalFeatureSet,
    view: &VirtualFeatures,
    reference: Option<ViewRef>,
) -> Vec<Correspondence> {
    matches
        .pairs
        .iter()
        .filter_map(|m| {
            let world = *view.world_points.get(m.reference)?;
            if !(world.x.is_finite() && world.y.is_finite() && world.z.is_finite()) {
                return None;
            }
            let q = query.keypoints()[m.query];
            Some(Correspondence {
                pixel: Vector2::new(q.x as f64, q.y as f64),
                world,
                source: reference,
            })
        })
        .collect()
}

/// Drops repeats of the same query pixel and world point (to `resolution`
/// meters), keeping the first.
pub fn dedup_correspondences(corr: Vec<Correspondence>, resolution: f64) -> Vec<Correspondence> {
    let mut seen = std::collections::HashSet::new();
    let q = |v: f64| (v / resolution).round() as i64;
    corr.into_iter()
        .filter(|c| {
            seen.insert((
                c.pixel.x.to_bits(),
                c.pixel.y.to_bits(),
                q(c.world.x),
                q(c.world.y),
                q(c.world.z),
            ))
        })
        .collect()
}

pub fn write_matches_csv<W: Write>(mut w: W, corr: &[Correspondence], distances: &[f64]) -> std::io::Result<()> {
    writeln!(w, "query_x,query_y,X,Y,Z,ref_id,distance")?;
    for (c, d) in corr.iter().zip(distances) {
        let r = c.source.map(|s| s.to_string()).unwrap_or_default();
        writeln!(w, "{},{},{},{},{},{},{}", c.pixel.x, c.pixel.y, c.world.x, c.world.y, c.world.z, r, d)?;
    }
    Ok(())
}
