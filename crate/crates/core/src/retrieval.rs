//! Global-descriptor index over real keyframes and virtual views.
//!
//! Whitening is fitted once on the union of all entries; queries are whitened
//! with the same transform and ranked by Euclidean distance, ties by id.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{FeatureError, GlobalDescriptor, WhiteningTransform};
use crate::geometry::Pose;
use crate::scene_db::KeyframeId;

pub const INDEX_MAGIC: &[u8; 4] = b"VLIX";
pub const INDEX_FILE: &str = "index.vlix";

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("the retrieval corpus is empty")]
    EmptyCorpus,
    #[error("k must be at least 1")]
    InvalidK,
    #[error("descriptor dimension {got} differs from the index dimension {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("malformed index: {0}")]
    Malformed(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Feature(#[from] FeatureError),
}

/// What an index entry stands for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", content = "id", rename_all = "lowercase")]
pub enum ViewRef {
    Real(KeyframeId),
    /// Position in the virtual view list the index was built from.
    Virtual(u32),
}

impl ViewRef {
    pub fn is_virtual(&self) -> bool {
        matches!(self, ViewRef::Virtual(_))
    }
}

impl std::fmt::Display for ViewRef {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ViewRef::Real(id) => write!(f, "real:{id}"),
            ViewRef::Virtual(i) => write!(f, "virtual:{i}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndexEntry {
    pub id: u32,
    pub view: ViewRef,
    pub pose: Pose,
    /// Whitened, unit norm.
    pub descriptor: Vec<f32>,
}

/// Search strategy over whitened descriptors.
pub trait SearchBackend: Send + Sync {
    /// The `k` entries nearest to `q` as `(position, distance)`, ascending,
    /// ties by position.
    fn search(&self, entries: &[IndexEntry], q: &[f32], k: usize) -> Vec<(usize, f64)>;
}

pub struct ExhaustiveScan;

pub fn euclidean(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

impl SearchBackend for ExhaustiveScan {
    fn search(&self, entries: &[IndexEntry], q: &[f32], k: usize) -> Vec<(usize, f64)> {
        let mut all: Vec<(usize, f64)> = entries
            .iter()
            .enumerate()
            .map(|(i, e)| (i, euclidean(&e.descriptor, q)))
            .collect();
        all.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        all.truncate(k);
        all
    }
}

pub struct RetrievalIndex {
    dim: usize,
    whitening: Option<WhiteningTransform>,
    entries: Vec<IndexEntry>,
    backend: Box<dyn SearchBackend>,
}

impl std::fmt::Debug for RetrievalIndex {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RetrievalIndex")
            .field("dim", &self.dim)
            .field("entries", &self.entries.len())
            .finish()
    }
}

impl PartialEq for RetrievalIndex {
    fn eq(&self, other: &Self) -> bool {
        self.dim == other.dim && self.whitening == other.whitening && self.entries == other.entries
    }
}

/// One corpus item before indexing.
#[derive(Debug, Clone, Copy)]
pub struct CorpusItem<'a> {
    pub view: ViewRef,
    pub pose: Pose,
    pub descriptor: &'a GlobalDescriptor,
}

fn whiten(w: Option<&WhiteningTransform>, v: &[f32]) -> Result<Vec<f32>, FeatureError> {
    let x: Vec<f64> = v.iter().map(|&x| x as f64).collect();
    let mut y = match w {
        Some(w) => w.apply(&x)?,
        None => x,
    };
    let n = y.iter().map(|a| a * a).sum::<f64>().sqrt();
    if n > 0.0 {
        y.iter_mut().for_each(|a| *a /= n);
    }
    Ok(y.into_iter().map(|a| a as f32).collect())
}

impl RetrievalIndex {
    /// Fits whitening on every item (reals and virtuals alike) and indexes the
    /// whitened descriptors. Ids follow the item order. `keep` truncates the
    /// whitened dimension.
    pub fn build(items: &[CorpusItem<'_>], keep: Option<usize>) -> Result<Self, RetrievalError> {
        if items.is_empty() {
            return Err(RetrievalError::EmptyCorpus);
        }
        let dim = items[0].descriptor.dim();
        for it in items {
            if it.descriptor.dim() != dim {
                return Err(RetrievalError::DimensionMismatch {
                    expected: dim,
                    got: it.descriptor.dim(),
                });
            }
        }
        let whitening = if items.len() >= 2 {
            let samples: Vec<Vec<f64>> = items.iter().map(|it| it.descriptor.to_f64()).collect();
            Some(crate::features::fit_whitening(&samples, keep)?)
        } else {
            None
        };
        let entries = items
            .iter()
            .enumerate()
            .map(|(i, it)| {
                Ok(IndexEntry {
                    id: i as u32,
                    view: it.view,
                    pose: it.pose,
                    descriptor: whiten(whitening.as_ref(), &it.descriptor.values)?,
                })
            })
            .collect::<Result<Vec<_>, FeatureError>>()?;
        Ok(Self {
            dim,
            whitening,
            entries,
            backend: Box::new(ExhaustiveScan),
        })
    }

    pub fn with_backend(mut self, backend: Box<dyn SearchBackend>) -> Self {
        self.backend = backend;
        self
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entries(&self) -> &[IndexEntry] {
        &self.entries
    }

    pub fn entry(&self, id: u32) -> Option<&IndexEntry> {
        self.entries.get(id as usize)
    }

    pub fn whitening(&self) -> Option<&WhiteningTransform> {
        self.whitening.as_ref()
    }

    pub fn num_virtual(&self) -> usize {
        self.entries.iter().filter(|e| e.view.is_virtual()).count()
    }

    /// Whitens and normalizes a raw global descriptor the way entries were.
    pub fn transform(&self, q: &GlobalDescriptor) -> Result<Vec<f32>, RetrievalError> {
        if q.dim() != self.dim {
            return Err(RetrievalError::DimensionMismatch {
                expected: self.dim,
                got: q.dim(),
            });
        }
        Ok(whiten(self.whitening.as_ref(), &q.values)?)
    }

    /// The `k` nearest entries as `(entry id, distance)`.
    pub fn query_topk(&self, q: &GlobalDescriptor, k: usize) -> Result<Vec<(u32, f64)>, RetrievalError> {
        if k == 0 {
            return Err(RetrievalError::InvalidK);
        }
        if self.entries.is_empty() {
            return Err(RetrievalError::EmptyCorpus);
        }
        let q = self.transform(q)?;
        Ok(self
            .backend
            .search(&self.entries, &q, k)
            .into_iter()
            .map(|(i, d)| (self.entries[i].id, d))
            .collect())
    }

    /// Magic, u32 m, u32 count, u8 whitening flag plus blob, then per entry:
    /// u32 id, u8 kind, u32 reference, 12 × f64 pose, dim × f32 descriptor.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), RetrievalError> {
        w.write_all(INDEX_MAGIC)?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        match &self.whitening {
            Some(t) => {
                w.write_all(&[1])?;
                t.write_to(&mut w)?;
            }
            None => w.write_all(&[0])?,
        }
        for e in &self.entries {
            w.write_all(&e.id.to_le_bytes())?;
            let (kind, reference) = match e.view {
                ViewRef::Real(id) => (0u8, id.0),
                ViewRef::Virtual(i) => (1u8, i),
            };
            w.write_all(&[kind])?;
            w.write_all(&reference.to_le_bytes())?;
            let r = &e.pose.rotation;
            let t = &e.pose.translation;
            for v in [
                r[(0, 0)],
                r[(0, 1)],
                r[(0, 2)],
                r[(1, 0)],
                r[(1, 1)],
                r[(1, 2)],
                r[(2, 0)],
                r[(2, 1)],
                r[(2, 2)],
                t.x,
                t.y,
                t.z,
            ] {
                w.write_all(&v.to_le_bytes())?;
            }
            w.write_all(&(e.descriptor.len() as u32).to_le_bytes())?;
            for v in &e.descriptor {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, RetrievalError> {
        let bad = |m: &str| RetrievalError::Malformed(m.to_string());
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| bad("truncated"))?;
        if &magic != INDEX_MAGIC {
            return Err(bad("bad magic"));
        }
        let u32_ = |r: &mut R| -> Result<u32, RetrievalError> {
            let mut b = [0u8; 4];
            r.read_exact(&mut b).map_err(|_| bad("truncated"))?;
            Ok(u32::from_le_bytes(b))
        };
        let dim = u32_(&mut r)? as usize;
        let count = u32_(&mut r)? as usize;
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag).map_err(|_| bad("truncated"))?;
        let whitening = match flag[0] {
            0 => None,
            1 => Some(WhiteningTransform::read_from(&mut r)?),
            _ => return Err(bad("bad whitening flag")),
        };
        let mut entries = Vec::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            let id = u32_(&mut r)?;
            r.read_exact(&mut flag).map_err(|_| bad("truncated"))?;
            let reference = u32_(&mut r)?;
            let view = match flag[0] {
                0 => ViewRef::Real(KeyframeId(reference)),
                1 => ViewRef::Virtual(reference),
                _ => return Err(bad("bad entry kind")),
            };
            let mut vals = [0f64; 12];
            let mut b8 = [0u8; 8];
            for v in vals.iter_mut() {
                r.read_exact(&mut b8).map_err(|_| bad("truncated"))?;
                *v = f64::from_le_bytes(b8);
            }
            let pose = Pose {
                rotation: nalgebra::Matrix3::from_row_slice(&vals[..9]),
                translation: nalgebra::Vector3::new(vals[9], vals[10], vals[11]),
            };
            let len = u32_(&mut r)? as usize;
            if len > 1 << 16 {
                return Err(bad("implausible descriptor length"));
            }
            let mut descriptor = vec![0f32; len];
            let mut b4 = [0u8; 4];
            for v in descriptor.iter_mut() {
                r.read_exact(&mut b4).map_err(|_| bad("truncated"))?;
                *v = f32::from_le_bytes(b4);
            }
            entries.push(IndexEntry {
                id,
                view,
                pose,
                descriptor,
            });
        }
        Ok(Self {
            dim,
            whitening,
            entries,
            backend: Box::new(ExhaustiveScan),
        })
    }
}
