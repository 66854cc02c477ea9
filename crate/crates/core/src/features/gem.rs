use super::{FeatureError, GlobalDescriptor, WhiteningTransform};

/// Component-wise generalized mean `((1/N)·Σ max(v, 0)ᵖ)^(1/p)` before
/// normalization.
pub fn gem_pool_raw<'a, I>(descriptors: I, dim: usize, p: f64) -> Result<Vec<f64>, FeatureError>
where
    I: IntoIterator<Item = &'a [f32]>,
{
    if !(p >= 1.0) || !p.is_finite() {
        return Err(FeatureError::InvalidParameter(format!("GeM exponent must be >= 1, got {p}")));
    }
    let mut acc = vec![0.0f64; dim];
    let mut count = 0usize;
    for d in descriptors {
        if d.len() != dim {
            return Err(FeatureError::DimensionMismatch {
                expected: dim,
                got: d.len(),
            });
        }
        for (a, &v) in acc.iter_mut().zip(d) {
            let v = (v as f64).max(0.0);
            *a += if p == 1.0 { v } else { v.powf(p) };
        }
        count += 1;
    }
    if count == 0 {
        return Err(FeatureError::EmptySet);
    }
    let inv_n = 1.0 / count as f64;
    Ok(acc
        .into_iter()
        .map(|a| if p == 1.0 { a * inv_n } else { (a * inv_n).powf(1.0 / p) })
        .collect())
}

/// GeM pooling followed by L2 normalization. An all-zero pool stays zero.
pub fn gem_pool<'a, I>(descriptors: I, dim: usize, p: f64) -> Result<Vec<f64>, FeatureError>
where
    I: IntoIterator<Item = &'a [f32]>,
{
    let mut v = gem_pool_raw(descriptors, dim, p)?;
    normalize_f64(&mut v);
    Ok(v)
}

pub(crate) fn normalize_f64(v: &mut [f64]) -> f64 {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

/// GeM, then optional whitening, then L2 normalization.
pub fn global_descriptor<'a, I>(
    descriptors: I,
    dim: usize,
    p: f64,
    whitening: Option<&WhiteningTransform>,
) -> Result<GlobalDescriptor, FeatureError>
where
    I: IntoIterator<Item = &'a [f32]>,
{
    let pooled = gem_pool(descriptors, dim, p)?;
    let mut v = match whitening {
        Some(w) => w.apply(&pooled)?,
        None => pooled,
    };
    normalize_f64(&mut v);
    Ok(GlobalDescriptor {
        values: v.into_iter().map(|x| x as f32).collect(),
    })
}
