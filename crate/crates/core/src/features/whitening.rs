use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use super::FeatureError;

/// Eigenvalues at or below this are treated as zero variance.
pub const WHITENING_EPS: f64 = 1e-8;

/// PCA whitening `y = P·(x − μ)`. Rows of `P` are principal directions
/// (descending variance) scaled by `1/√λ`; zero-variance directions map to 0.
#[derive(Debug, Clone, PartialEq)]
pub struct WhiteningTransform {
    pub mean: DVector<f64>,
    pub projection: DMatrix<f64>,
}

/// Fits whitening on `samples` using the population covariance. `keep`
/// truncates to the leading principal directions.
pub fn fit_whitening<S: AsRef<[f64]>>(samples: &[S], keep: Option<usize>) -> Result<WhiteningTransform, FeatureError> {
    if samples.len() < 2 {
        return Err(FeatureError::TooFewSamples(samples.len()));
    }
    let dim = samples[0].as_ref().len();
    let n = samples.len() as f64;
    let mut mean = DVector::<f64>::zeros(dim);
    for s in samples {
        let s = s.as_ref();
        if s.len() != dim {
            return Err(FeatureError::DimensionMismatch {
                expected: dim,
                got: s.len(),
            });
        }
        mean += DVector::from_column_slice(s);
    }
    mean /= n;

    let mut centered = DMatrix::<f64>::zeros(dim, samples.len());
    for (j, s) in samples.iter().enumerate() {
        let col = DVector::from_column_slice(s.as_ref()) - &mean;
        centered.set_column(j, &col);
    }
    let cov = (&centered * centered.transpose()) / n;
    let eig = SymmetricEigen::new(cov);

    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let keep = keep.unwrap_or(dim).min(dim);

    let mut projection = DMatrix::<f64>::zeros(keep, dim);
    for (row, &k) in order.iter().take(keep).enumerate() {
        let lambda = eig.eigenvalues[k];
        if lambda > WHITENING_EPS {
            let scale = 1.0 / lambda.sqrt();
            for c in 0..dim {
                projection[(row, c)] = eig.eigenvectors[(c, k)] * scale;
            }
        }
    }
    Ok(WhiteningTransform { mean, projection })
}

impl WhiteningTransform {
    pub fn input_dim(&self) -> usize {
        self.mean.len()
    }

    pub fn output_dim(&self) -> usize {
        self.projection.nrows()
    }

    pub fn apply(&self, v: &[f64]) -> Result<Vec<f64>, FeatureError> {
        if v.len() != self.input_dim() {
            return Err(FeatureError::DimensionMismatch {
                expected: self.input_dim(),
                got: v.len(),
            });
        }
        let x = DVector::from_column_slice(v) - &self.mean;
        Ok((&self.projection * x).as_slice().to_vec())
    }

    /// u32 input dim, u32 output dim, mean (f64), projection row-major (f64).
    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(&(self.input_dim() as u32).to_le_bytes())?;
        w.write_all(&(self.output_dim() as u32).to_le_bytes())?;
        for v in self.mean.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
        for r in 0..self.output_dim() {
            for c in 0..self.input_dim() {
                w.write_all(&self.projection[(r, c)].to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, FeatureError> {
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let input = u32::from_le_bytes(b4) as usize;
        r.read_exact(&mut b4)?;
        let output = u32::from_le_bytes(b4) as usize;
        if input > 1 << 16 || output > input {
            return Err(FeatureError::Malformed("implausible whitening dimensions".into()));
        }
        let mut b8 = [0u8; 8];
        let mut read_f64 = |r: &mut R| -> Result<f64, FeatureError> {
            r.read_exact(&mut b8)?;
            Ok(f64::from_le_bytes(b8))
        };
        let mut mean = DVector::zeros(input);
        for i in 0..input {
            mean[i] = read_f64(&mut r)?;
        }
        let mut projection = DMatrix::zeros(output, input);
        for row in 0..output {
            for c in 0..input {
                projection[(row, c)] = read_f64(&mut r)?;
            }
        }
        Ok(Self { mean, projection })
    }
}
