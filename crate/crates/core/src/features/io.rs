//! Binary feature containers.
//!
//! `.feat`: magic `VLFT`, u32 n, u32 m, u32 num_kp, then per keypoint
//! `f32 x, f32 y, f32 score, n × f32 descriptor`, then `m × f32` global.
//! `.grid`: magic `VLFG`, u32 rows, u32 cols, u32 dim, then row-major f32.
//! All little-endian. Externally computed features in the same container can
//! be imported as-is.

use std::io::{Read, Write};

use super::{FeatureError, FeatureGrid, GlobalDescriptor, Keypoint, LocalFeatureSet};

pub const FEAT_MAGIC: &[u8; 4] = b"VLFT";
pub const GRID_MAGIC: &[u8; 4] = b"VLFG";

const MAX_DIM: u32 = 1 << 16;

fn put_u32<W: Write>(w: &mut W, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn put_f32s<W: Write>(w: &mut W, vs: &[f32]) -> std::io::Result<()> {
    for v in vs {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn get_u32<R: Read>(r: &mut R) -> Result<u32, FeatureError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| FeatureError::Malformed("truncated".into()))?;
    Ok(u32::from_le_bytes(b))
}

fn get_f32s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f32>, FeatureError> {
    let mut raw = vec![0u8; n * 4];
    r.read_exact(&mut raw)
        .map_err(|_| FeatureError::Malformed("truncated".into()))?;
    Ok(raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

fn check_magic<R: Read>(r: &mut R, magic: &[u8; 4]) -> Result<(), FeatureError> {
    let mut m = [0u8; 4];
    r.read_exact(&mut m)
        .map_err(|_| FeatureError::Malformed("truncated".into()))?;
    if &m != magic {
        return Err(FeatureError::Malformed(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&m),
            String::from_utf8_lossy(magic)
        )));
    }
    Ok(())
}

pub fn write_feat<W: Write>(mut w: W, local: &LocalFeatureSet, global: &GlobalDescriptor) -> Result<(), FeatureError> {
    w.write_all(FEAT_MAGIC)?;
    put_u32(&mut w, local.dim() as u32)?;
    put_u32(&mut w, global.dim() as u32)?;
    put_u32(&mut w, local.len() as u32)?;
    for (i, kp) in local.keypoints().iter().enumerate() {
        put_f32s(&mut w, &[kp.x, kp.y, kp.score])?;
        put_f32s(&mut w, local.descriptor(i))?;
    }
    put_f32s(&mut w, &global.values)?;
    Ok(())
}

pub fn read_feat<R: Read>(mut r: R) -> Result<(LocalFeatureSet, GlobalDescriptor), FeatureError> {
    check_magic(&mut r, FEAT_MAGIC)?;
    let n = get_u32(&mut r)?;
    let m = get_u32(&mut r)?;
    let count = get_u32(&mut r)?;
    if n > MAX_DIM || m > MAX_DIM {
        return Err(FeatureError::Malformed(format!("implausible dimensions n={n} m={m}")));
    }
    let (n, count) = (n as usize, count as usize);
    let mut keypoints = Vec::with_capacity(count.min(1 << 20));
    let mut descriptors = Vec::with_capacity((count * n).min(1 << 24));
    for _ in 0..count {
        let head = get_f32s(&mut r, 3)?;
        keypoints.push(Keypoint {
            x: head[0],
            y: head[1],
            score: head[2],
        });
        descriptors.extend(get_f32s(&mut r, n)?);
    }
    let global = GlobalDescriptor {
        values: get_f32s(&mut r, m as usize)?,
    };
    Ok((LocalFeatureSet::new(n, keypoints, descriptors)?, global))
}

pub fn write_grid<W: Write>(mut w: W, grid: &FeatureGrid) -> Result<(), FeatureError> {
    w.write_all(GRID_MAGIC)?;
    put_u32(&mut w, grid.rows as u32)?;
    put_u32(&mut w, grid.cols as u32)?;
    put_u32(&mut w, grid.dim as u32)?;
    put_f32s(&mut w, &grid.data)?;
    Ok(())
}

pub fn read_grid<R: Read>(mut r: R) -> Result<FeatureGrid, FeatureError> {
    check_magic(&mut r, GRID_MAGIC)?;
    let rows = get_u32(&mut r)? as usize;
    let cols = get_u32(&mut r)? as usize;
    let dim = get_u32(&mut r)?;
    if dim > MAX_DIM || rows * cols > 1 << 24 {
        return Err(FeatureError::Malformed("implausible grid size".into()));
    }
    let dim = dim as usize;
    let data = get_f32s(&mut r, rows * cols * dim)?;
    Ok(FeatureGrid { rows, cols, dim, data })
}
