//! Posed RGB-D keyframes and their persisted layout.
//!
//! A scene directory contains `manifest.json`, `images/<id>.ppm`,
//! `depth/<id>.f32` and, once features are extracted, `features/<id>.feat`
//! plus `features/<id>.grid`. Every file's CRC32 is recorded in the manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{self, io as feat_io, FeatureError, FeatureParams, ImageFeatures};
use crate::geometry::{rotation_angle, Intrinsics, Pose};
use crate::image::{DepthMap, ImageError, RgbImage};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum DbError {
    #[error("image is {image_w}x{image_h} but depth is {depth_w}x{depth_h} and intrinsics {k_w}x{k_h}")]
    DimensionMismatch {
        image_w: u32,
        image_h: u32,
        depth_w: u32,
        depth_h: u32,
        k_w: u32,
        k_h: u32,
    },
    #[error("depth map contains negative or non-finite values")]
    InvalidDepth,
    #[error("the database has no keyframes")]
    EmptyDatabase,
    #[error("unknown keyframe {0:?}")]
    UnknownKeyframe(KeyframeId),
    #[error("k must be at least 1")]
    InvalidK,
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("format version {found} is not supported (this build reads up to {supported})")]
    FormatVersionMismatch { found: u32, supported: u32 },
    #[error("checksum mismatch in {0}")]
    ChecksumMismatch(PathBuf),
    #[error("malformed scene data: {0}")]
    Malformed(String),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct KeyframeId(pub u32);

impl std::fmt::Display for KeyframeId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Keyframe {
    pub id: KeyframeId,
    pub image: RgbImage,
    pub depth: DepthMap,
    pub pose: Pose,
    pub intrinsics: Intrinsics,
    /// Filled by [`SceneDatabase::compute_features`] or on load.
    pub features: Option<ImageFeatures>,
}

/// Options for source-view selection by proximity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProximityParams {
    /// Meters of penalty per radian of viewing-direction difference.
    pub rotation_weight: f64,
}

impl Default for ProximityParams {
    fn default() -> Self {
        Self { rotation_weight: 0.0 }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SceneDatabase {
    pub name: String,
    /// Free-form creation parameters, persisted verbatim.
    pub params: BTreeMap<String, String>,
    keyframes: Vec<Keyframe>,
    next_id: u32,
}

impl SceneDatabase {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            ..Default::default()
        }
    }

    pub fn len(&self) -> usize {
        self.keyframes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keyframes.is_empty()
    }

    pub fn keyframes(&self) -> &[Keyframe] {
        &self.keyframes
    }

    pub fn ingest_keyframe(
        &mut self,
        image: RgbImage,
        depth: DepthMap,
        pose: Pose,
        intrinsics: Intrinsics,
    ) -> Result<KeyframeId, DbError> {
        if image.width() != depth.width()
            || image.height() != depth.height()
            || image.width() != intrinsics.width
            || image.height() != intrinsics.height
        {
            return Err(DbError::DimensionMismatch {
                image_w: image.width(),
                image_h: image.height(),
                depth_w: depth.width(),
                depth_h: depth.height(),
                k_w: intrinsics.width,
                k_h: intrinsics.height,
            });
        }
        if depth.as_raw().iter().any(|d| !(d.is_finite() && *d >= 0.0)) {
            return Err(DbError::InvalidDepth);
        }
        intrinsics
            .validate()
            .map_err(|e| DbError::Malformed(e.to_string()))?;
        let id = KeyframeId(self.next_id);
        self.next_id += 1;
        self.keyframes.push(Keyframe {
            id,
            image,
            depth,
            pose,
            intrinsics,
            features: None,
        });
        Ok(id)
    }

    pub fn get(&self, id: KeyframeId) -> Option<&Keyframe> {
        // ids are assigned in increasing order, so the table is sorted
        self.keyframes
            .binary_search_by_key(&id, |k| k.id)
            .ok()
            .map(|i| &self.keyframes[i])
    }

    pub fn try_get(&self, id: KeyframeId) -> Result<&Keyframe, DbError> {
        self.get(id).ok_or(DbError::UnknownKeyframe(id))
    }

    /// Extracts features for every keyframe that does not have them yet.
    pub fn compute_features(&mut self, params: &FeatureParams) -> Result<(), DbError> {
        let results: Vec<Result<Option<ImageFeatures>, FeatureError>> = self
            .keyframes
            .par_iter()
            .map(|kf| match kf.features {
                Some(_) => Ok(None),
                None => features::extract_all(&kf.image, params).map(Some),
            })
            .collect();
        for (kf, res) in self.keyframes.iter_mut().zip(results) {
            if let Some(f) = res? {
                kf.features = Some(f);
            }
        }
        Ok(())
    }

    pub fn has_features(&self) -> bool {
        self.keyframes.iter().all(|k| k.features.is_some())
    }

    /// The `k` keyframes closest to `target` by camera-center distance (plus
    /// the optional orientation term), ties broken by ascending id.
    pub fn nearest_keyframes(&self, target: &Pose, k: usize, params: &ProximityParams) -> Result<Vec<KeyframeId>, DbError> {
        self.nearest_keyframes_where(target, k, params, |_| true)
    }

    pub fn nearest_keyframes_where<F>(
        &self,
        target: &Pose,
        k: usize,
        params: &ProximityParams,
        keep: F,
    ) -> Result<Vec<KeyframeId>, DbError>
    where
        F: Fn(&Keyframe) -> bool,
    {
        if k == 0 {
            return Err(DbError::InvalidK);
        }
        if self.keyframes.is_empty() {
            return Err(DbError::EmptyDatabase);
        }
        let center = target.center();
        let mut scored: Vec<(f64, KeyframeId)> = self
            .keyframes
            .iter()
            .filter(|kf| keep(kf))
            .map(|kf| {
                let mut d = (kf.pose.center() - center).norm();
                if params.rotation_weight != 0.0 {
                    d += params.rotation_weight * rotation_angle(&kf.pose.rotation, &target.rotation);
                }
                (d, kf.id)
            })
            .collect();
        scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        Ok(scored.into_iter().take(k).map(|(_, id)| id).collect())
    }

    pub fn save(&self, dir: &Path) -> Result<(), DbError> {
        for sub in ["images", "depth", "features"] {
            let p = dir.join(sub);
            fs::create_dir_all(&p).map_err(|e| io_err(&p, e))?;
        }
        let mut entries = Vec::with_capacity(self.keyframes.len());
        for kf in &self.keyframes {
            let image = format!("images/{}.ppm", kf.id);
            let mut buf = Vec::new();
            kf.image.write_ppm(&mut buf)?;
            let image_crc32 = write_file(dir, &image, &buf)?;

            let depth = format!("depth/{}.f32", kf.id);
            buf.clear();
            kf.depth.write_f32(&mut buf)?;
            let depth_crc32 = write_file(dir, &depth, &buf)?;

            let mut feature_files = None;
            if let Some(f) = &kf.features {
                let feat = format!("features/{}.feat", kf.id);
                buf.clear();
                feat_io::write_feat(&mut buf, &f.local, &f.global)?;
                let feat_crc32 = write_file(dir, &feat, &buf)?;
                let grid = format!("features/{}.grid", kf.id);
                buf.clear();
                feat_io::write_grid(&mut buf, &f.grid)?;
                let grid_crc32 = write_file(dir, &grid, &buf)?;
                feature_files = Some(FeatureFiles {
                    feat,
                    feat_crc32,
                    grid,
                    grid_crc32,
                });
            }
            entries.push(ManifestKeyframe {
                id: kf.id,
                pose: kf.pose,
                intrinsics: kf.intrinsics,
                image,
                image_crc32,
                depth,
                depth_crc32,
                features: feature_files,
            });
        }
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            name: self.name.clone(),
            params: self.params.clone(),
            intrinsics: self.keyframes.first().map(|k| k.intrinsics),
            next_id: self.next_id,
            keyframes: entries,
        };
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| DbError::Malformed(e.to_string()))?;
        let path = dir.join(MANIFEST_FILE);
        fs::write(&path, text).map_err(|e| io_err(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self, DbError> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
        let version: VersionProbe = serde_json::from_str(&text).map_err(|e| DbError::Malformed(e.to_string()))?;
        if version.format_version == 0 || version.format_version > FORMAT_VERSION {
            return Err(DbError::FormatVersionMismatch {
                found: version.format_version,
                supported: FORMAT_VERSION,
            });
        }
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| DbError::Malformed(e.to_string()))?;
        let mut db = SceneDatabase {
            name: manifest.name,
            params: manifest.params,
            keyframes: Vec::with_capacity(manifest.keyframes.len()),
            next_id: manifest.next_id,
        };
        let mut last: Option<KeyframeId> = None;
        for e in manifest.keyframes {
            if last.is_some_and(|l| e.id <= l) || e.id.0 >= db.next_id {
                return Err(DbError::Malformed("keyframe ids must be unique and increasing".into()));
            }
            last = Some(e.id);
            let image = RgbImage::read_ppm(&read_checked(dir, &e.image, e.image_crc32)?[..])?;
            let depth = DepthMap::read_f32(&read_checked(dir, &e.depth, e.depth_crc32)?[..])?;
            let features = match &e.features {
                Some(ff) => {
                    let (local, global) = feat_io::read_feat(&read_checked(dir, &ff.feat, ff.feat_crc32)?[..])?;
                    let grid = feat_io::read_grid(&read_checked(dir, &ff.grid, ff.grid_crc32)?[..])?;
                    Some(ImageFeatures { local, global, grid })
                }
                None => None,
            };
            if image.width() != depth.width() || image.height() != depth.height() {
                return Err(DbError::Malformed(format!("keyframe {} image/depth size mismatch", e.id)));
            }
            db.keyframes.push(Keyframe {
                id: e.id,
                image,
                depth,
                pose: e.pose,
                intrinsics: e.intrinsics,
                features,
            });
        }
        Ok(db)
    }
}

#[derive(Serialize, Deserialize)]
struct FeatureFiles {
    feat: String,
    feat_crc32: u32,
    grid: String,
    grid_crc32: u32,
}

#[derive(Serialize, Deserialize)]
struct ManifestKeyframe {
    id: KeyframeId,
    pose: Pose,
    intrinsics: Intrinsics,
    image: String,
    image_crc32: u32,
    depth: String,
    depth_crc32: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    features: Option<FeatureFiles>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    name: String,
    #[serde(default)]
    params: BTreeMap<String, String>,
    intrinsics: Option<Intrinsics>,
    next_id: u32,
    keyframes: Vec<ManifestKeyframe>,
}

#[derive(Deserialize)]
struct VersionProbe {
    format_version: u32,
}

fn io_err(path: &Path, source: std::io::Error) -> DbError {
    DbError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub(crate) fn write_file(dir: &Path, rel: &str, bytes: &[u8]) -> Result<u32, DbError> {
    let path = dir.join(rel);
    fs::write(&path, bytes).map_err(|e| io_err(&path, e))?;
    Ok(crc32fast::hash(bytes))
}

pub(crate) fn read_checked(dir: &Path, rel: &str, crc: u32) -> Result<Vec<u8>, DbError> {
    let path = dir.join(rel);
    let bytes = fs::read(&path).map_err(|e| io_err(&path, e))?;
    if crc32fast::hash(&bytes) != crc {
        return Err(DbError::ChecksumMismatch(path));
    }
    Ok(bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;

    fn tiny_keyframe(seed: u8, center: Vector3<f64>) -> (RgbImage, DepthMap, Pose, Intrinsics) {
        let k = Intrinsics::centered(40.0, 48, 40).unwrap();
        let mut img = RgbImage::new(48, 40);
        let mut depth = DepthMap::new(48, 40);
        for y in 0..40 {
            for x in 0..48 {
                img.put(x, y, [seed.wrapping_add(x as u8), y as u8, seed]);
                depth.put(x, y, if (x + y) % 7 == 0 { 0.0 } else { 1.0 + 0.01 * x as f32 });
            }
        }
        (img, depth, Pose::level(center, 0.1 * seed as f64, 0.0), k)
    }

    #[test]
    fn ingest_and_fetch() {
        let mut db = SceneDatabase::new("t");
        let (img, depth, pose, k) = tiny_keyframe(3, Vector3::zeros());
        let id = db.ingest_keyframe(img.clone(), depth.clone(), pose, k).unwrap();
        let (img2, depth2, pose2, k2) = tiny_keyframe(4, Vector3::x());
        let id2 = db.ingest_keyframe(img2, depth2, pose2, k2).unwrap();
        assert_ne!(id, id2);
        let kf = db.get(id).unwrap();
        assert_eq!(kf.image, img);
        assert_eq!(kf.depth, depth);
        assert!(kf.features.is_none());
    }

    #[test]
    fn ingest_rejects_mismatched_dimensions() {
        let mut db = SceneDatabase::new("t");
        let (img, _, pose, k) = tiny_keyframe(0, Vector3::zeros());
        let err = db.ingest_keyframe(img, DepthMap::new(10, 10), pose, k).unwrap_err();
        assert!(matches!(err, DbError::DimensionMismatch { .. }));
    }

    #[test]
    fn many_ingests() {
        let mut db = SceneDatabase::new("t");
        for i in 0..100 {
            let (img, d, p, k) = tiny_keyframe(i as u8, Vector3::new(i as f64, 0.0, 0.0));
            db.ingest_keyframe(img, d, p, k).unwrap();
        }
        assert_eq!(db.len(), 100);
    }

    #[test]
    fn nearest_examples() {
        let mut db = SceneDatabase::new("t");
        assert!(matches!(
            db.nearest_keyframes(&Pose::identity(), 1, &ProximityParams::default()),
            Err(DbError::EmptyDatabase)
        ));
        let mut ids = Vec::new();
        for i in 0..6 {
            let (img, d, p, k) = tiny_keyframe(i, Vector3::new(i as f64, 0.0, 0.0));
            ids.push(db.ingest_keyframe(img, d, p, k).unwrap());
        }
        let target = db.get(ids[3]).unwrap().pose;
        let got = db.nearest_keyframes(&target, 1, &ProximityParams::default()).unwrap();
        assert_eq!(got, vec![ids[3]]);
        // ties at distance 1 resolve by id
        let got = db.nearest_keyframes(&target, 3, &ProximityParams::default()).unwrap();
        assert_eq!(got, vec![ids[3], ids[2], ids[4]]);
        let got = db.nearest_keyframes(&target, 50, &ProximityParams::default()).unwrap();
        assert_eq!(got.len(), 6);
        assert!(matches!(
            db.nearest_keyframes(&target, 0, &ProximityParams::default()),
            Err(DbError::InvalidK)
        ));
    }
}
