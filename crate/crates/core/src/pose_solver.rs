//! Absolute pose from 2D–3D correspondences: P3P, RANSAC and damped
//! Gauss–Newton refinement.

use nalgebra::{Matrix3, Matrix4, Matrix6, Vector2, Vector3, Vector6, SVD};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Intrinsics, Pose};
use crate::matching::Correspondence;
use crate::rng::SplitMix64;

const MIN_Z: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("the three world points are (nearly) collinear")]
    DegenerateConfiguration,
    #[error("need at least 4 correspondences, got {0}")]
    TooFewCorrespondences(usize),
    #[error("no hypothesis reached 4 inliers")]
    NoModelFound,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RansacParams {
    pub max_iterations: usize,
    /// Pixels.
    pub inlier_threshold: f64,
    pub confidence: f64,
    pub seed: u64,
    pub refine_iterations: usize,
}

impl Default for RansacParams {
    fn default() -> Self {
        Self {
            max_iterations: 10_000,
            inlier_threshold: 3.0,
            confidence: 0.999,
            seed: 0,
            refine_iterations: 50,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Coarse,
    Refined,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Ok,
    Failed(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseEstimate {
    pub pose: Pose,
    pub inliers: Vec<usize>,
    pub num_correspondences: usize,
    /// Pixels, over inliers.
    pub mean_reprojection_error: f64,
    pub stage: Stage,
    pub status: Status,
    pub iterations: usize,
}

impl PoseEstimate {
    pub fn failed(reason: impl Into<String>, num_correspondences: usize) -> Self {
        Self {
            pose: Pose::identity(),
            inliers: Vec::new(),
            num_correspondences,
            mean_reprojection_error: f64::INFINITY,
            stage: Stage::Coarse,
            status: Status::Failed(reason.into()),
            iterations: 0,
        }
    }

    pub fn is_ok(&self) -> bool {
        self.status == Status::Ok
    }

    pub fn num_inliers(&self) -> usize {
        self.inliers.len()
    }
}

/// Pixel residual of one correspondence, `None` if the point is not in front
/// of the camera.
pub fn reprojection_error(k: &Intrinsics, pose: &Pose, c: &Correspondence) -> Option<f64> {
    let xc = pose.transform_point(&c.world);
    if xc.z <= MIN_Z {
        return None;
    }
    let u = Vector2::new(k.fx * xc.x / xc.z + k.cx, k.fy * xc.y / xc.z + k.cy);
    Some((u - c.pixel).norm())
}

/// Indices within `threshold` and their mean residual.
pub fn inliers_under(k: &Intrinsics, pose: &Pose, corr: &[Correspondence], threshold: f64) -> (Vec<usize>, f64) {
    let mut idx = Vec::new();
    let mut sum = 0.0;
    for (i, c) in corr.iter().enumerate() {
        if let Some(e) = reprojection_error(k, pose, c) {
            if e <= threshold {
                idx.push(i);
                sum += e;
            }
        }
    }
    let mean = if idx.is_empty() { f64::INFINITY } else { sum / idx.len() as f64 };
    (idx, mean)
}

fn polish_root(c: &[f64; 5], mut x: f64) -> f64 {
    for _ in 0..8 {
        let f = (((c[0] * x + c[1]) * x + c[2]) * x + c[3]) * x + c[4];
        let df = ((4.0 * c[0] * x + 3.0 * c[1]) * x + 2.0 * c[2]) * x + c[3];
        if df == 0.0 {
            break;
        }
        let step = f / df;
        x -= step;
        if step.abs() <= 1e-15 * x.abs().max(1.0) {
            break;
        }
    }
    x
}

/// Real roots of `c0 x⁴ + c1 x³ + c2 x² + c3 x + c4`, via the companion matrix.
fn quartic_real_roots(c: &[f64; 5]) -> Vec<f64> {
    let scale = c.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 || c[0].abs() <= 1e-14 * scale {
        return Vec::new();
    }
    let mut m = Matrix4::zeros();
    for i in 0..4 {
        m[(0, i)] = -c[i + 1] / c[0];
    }
    m[(1, 0)] = 1.0;
    m[(2, 1)] = 1.0;
    m[(3, 2)] = 1.0;
    let mut roots = Vec::new();
    for z in m.complex_eigenvalues().iter() {
        if z.im.abs() <= 1e-6 * (1.0 + z.re.abs()) {
            roots.push(polish_root(c, z.re));
        }
    }
    roots
}

/// Rigid `(R, t)` minimizing `Σ‖R·p_i + t − q_i‖²`.
fn kabsch(p: &[Vector3<f64>; 3], q: &[Vector3<f64>; 3]) -> Pose {
    let pc = (p[0] + p[1] + p[2]) / 3.0;
    let qc = (q[0] + q[1] + q[2]) / 3.0;
    let mut h = Matrix3::zeros();
    for i in 0..3 {
        h += (q[i] - qc) * (p[i] - pc).transpose();
    }
    let svd = SVD::new(h, true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut d = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let r = u * d * v_t;
    Pose {
        rotation: r,
        translation: qc - r * pc,
    }
}

/// Up to four poses consistent with three correspondences (Grunert's quartic).
pub fn p3p(corr: &[Correspondence; 3], k: &Intrinsics) -> Result<Vec<Pose>, SolverError> {
    let p = [corr[0].world, corr[1].world, corr[2].world];
    let area = 0.5 * (p[1] - p[0]).cross(&(p[2] - p[0])).norm();
    if !(area > 1e-9) {
        return Err(SolverError::DegenerateConfiguration);
    }
    let f: Vec<Vector3<f64>> = corr.iter().map(|c| k.ray(&c.pixel).normalize()).collect();
    let a2 = (p[1] - p[2]).norm_squared();
    let b2 = (p[0] - p[2]).norm_squared();
    let c2 = (p[0] - p[1]).norm_squared();
    let cos_a = f[1].dot(&f[2]);
    let cos_b = f[0].dot(&f[2]);
    let cos_g = f[0].dot(&f[1]);

    let amc = (a2 - c2) / b2;
    let apc = (a2 + c2) / b2;
    let coeffs = [
        (amc - 1.0).powi(2) - 4.0 * c2 / b2 * cos_a * cos_a,
        4.0 * (amc * (1.0 - amc) * cos_b - (1.0 - apc) * cos_a * cos_g + 2.0 * c2 / b2 * cos_a * cos_a * cos_b),
        2.0 * (amc * amc - 1.0 + 2.0 * amc * amc * cos_b * cos_b + 2.0 * (b2 - c2) / b2 * cos_a * cos_a
            - 4.0 * apc * cos_a * cos_b * cos_g
            + 2.0 * (b2 - a2) / b2 * cos_g * cos_g),
        4.0 * (-amc * (1.0 + amc) * cos_b + 2.0 * a2 / b2 * cos_g * cos_g * cos_b - (1.0 - apc) * cos_a * cos_g),
        (1.0 + amc).powi(2) - 4.0 * a2 / b2 * cos_g * cos_g,
    ];
    let mut out: Vec<Pose> = Vec::new();
    for v in quartic_real_roots(&coeffs) {
        let denom = 2.0 * (cos_g - v * cos_a);
        if denom.abs() < 1e-12 {
            continue;
        }
        let u = ((-1.0 + amc) * v * v - 2.0 * amc * cos_b * v + 1.0 + amc) / denom;
        let s1sq = b2 / (1.0 + v * v - 2.0 * v * cos_b);
        if !(s1sq > 0.0) || u <= 0.0 || v <= 0.0 {
            continue;
        }
        let s1 = s1sq.sqrt();
        let cam = [f[0] * s1, f[1] * (u * s1), f[2] * (v * s1)];
        let pose = kabsch(&p, &cam);
        if !pose.rotation.iter().all(|x| x.is_finite()) || !pose.translation.iter().all(|x| x.is_finite()) {
            continue;
        }
        let dup = out.iter().any(|q| {
            (q.rotation - pose.rotation).amax() < 1e-9 && (q.translation - pose.translation).amax() < 1e-9
        });
        if !dup {
            out.push(pose);
        }
    }
    Ok(out)
}

/// Robust pose by RANSAC over P3P hypotheses, then Gauss–Newton on the inliers.
pub fn ransac_pnp(corr: &[Correspondence], k: &Intrinsics, params: &RansacParams) -> Result<PoseEstimate, SolverError> {
    if corr.len() < 4 {
        return Err(SolverError::TooFewCorrespondences(corr.len()));
    }
    if !(params.inlier_threshold > 0.0) || !(params.confidence > 0.0 && params.confidence < 1.0) {
        return Err(SolverError::InvalidParameter("threshold must be positive and confidence in (0, 1)".into()));
    }
    let n = corr.len();
    let mut rng = SplitMix64::new(params.seed);
    let mut best: Option<(usize, f64, Pose)> = None;
    let mut bound = params.max_iterations;
    let mut it = 0;
    while it < bound {
        it += 1;
        let s = rng.distinct(n, 3);
        let sample = [corr[s[0]], corr[s[1]], corr[s[2]]];
        let Ok(cands) = p3p(&sample, k) else { continue };
        for pose in cands {
            // cheirality on the minimal sample
            if sample.iter().any(|c| pose.transform_point(&c.world).z <= MIN_Z) {
                continue;
            }
            let (inl, mean) = inliers_under(k, &pose, corr, params.inlier_threshold);
            let better = match &best {
                None => true,
                Some((cnt, m, _)) => inl.len() > *cnt || (inl.len() == *cnt && mean < *m),
            };
            if better {
                best = Some((inl.len(), mean, pose));
                let w = inl.len() as f64 / n as f64;
                bound = bound.min(adaptive_bound(w, params.confidence, params.max_iterations));
            }
        }
    }
    let Some((count, _, pose)) = best else {
        return Err(SolverError::NoModelFound);
    };
    if count < 4 {
        return Err(SolverError::NoModelFound);
    }
    let (inl, mean) = inliers_under(k, &pose, corr, params.inlier_threshold);
    let mut est = (pose, inl, mean);
    // polish, then re-select inliers; keep the polished pose unless it loses support
    for _ in 0..2 {
        let subset: Vec<Correspondence> = est.1.iter().map(|&i| corr[i]).collect();
        let refined = refine_gn(&est.0, &subset, k, params.refine_iterations);
        let (inl, mean) = inliers_under(k, &refined, corr, params.inlier_threshold);
        if inl.len() >= est.1.len() {
            let grew = inl.len() > est.1.len();
            est = (refined, inl, mean);
            if !grew {
                break;
            }
        } else {
            break;
        }
    }
    Ok(PoseEstimate {
        pose: est.0,
        inliers: est.1,
        num_correspondences: n,
        mean_reprojection_error: est.2,
        stage: Stage::Coarse,
        status: Status::Ok,
        iterations: it,
    })
}

/// `⌈log(1 − confidence) / log(1 − w³)⌉`, capped.
pub fn adaptive_bound(w: f64, confidence: f64, cap: usize) -> usize {
    let p = w.powi(3);
    if p >= 1.0 {
        return 1;
    }
    if p <= 0.0 {
        return cap;
    }
    let n = ((1.0 - confidence).ln() / (1.0 - p).ln()).ceil();
    if n.is_finite() && n < cap as f64 {
        (n as usize).max(1)
    } else {
        cap
    }
}

/// Sum of squared reprojection errors; infinite if any point is behind the camera.
pub fn reprojection_cost(pose: &Pose, corr: &[Correspondence], k: &Intrinsics) -> f64 {
    let mut cost = 0.0;
    for c in corr {
        match reprojection_error(k, pose, c) {
            Some(e) => cost += e * e,
            None => return f64::INFINITY,
        }
    }
    cost
}

/// Residual (2) and its Jacobian (2×6) with respect to a left perturbation
/// `(ω, v)` applied as [`Pose::perturbed`].
pub fn residual_jacobian(pose: &Pose, c: &Correspondence, k: &Intrinsics) -> Option<(Vector2<f64>, nalgebra::Matrix2x6<f64>)> {
    let xc = pose.transform_point(&c.world);
    if xc.z <= MIN_Z {
        return None;
    }
    let (x, y, z) = (xc.x, xc.y, xc.z);
    let r = Vector2::new(k.fx * x / z + k.cx - c.pixel.x, k.fy * y / z + k.cy - c.pixel.y);
    let dpi = nalgebra::Matrix2x3::new(k.fx / z, 0.0, -k.fx * x / (z * z), 0.0, k.fy / z, -k.fy * y / (z * z));
    // d(Xc)/dω = −[Xc]×, d(Xc)/dv = I
    let skew = Matrix3::new(0.0, -z, y, z, 0.0, -x, -y, x, 0.0);
    let mut j = nalgebra::Matrix2x6::zeros();
    j.fixed_view_mut::<2, 3>(0, 0).copy_from(&(dpi * (-skew)));
    j.fixed_view_mut::<2, 3>(0, 3).copy_from(&dpi);
    Some((r, j))
}

/// Levenberg-damped Gauss–Newton over SE(3). Returns the pose and the cost
/// of every accepted iterate (starting with the initial cost).
pub fn refine_gn_trace(initial: &Pose, corr: &[Correspondence], k: &Intrinsics, max_iters: usize) -> (Pose, Vec<f64>) {
    let mut pose = *initial;
    let mut cost = reprojection_cost(&pose, corr, k);
    let mut trace = vec![cost];
    if corr.len() < 3 || !cost.is_finite() {
        return (pose, trace);
    }
    let mut lambda: Option<f64> = None;
    let mut iters = 0;
    while iters < max_iters {
        iters += 1;
        let mut jtj = Matrix6::zeros();
        let mut jtr = Vector6::zeros();
        for c in corr {
            if let Some((r, j)) = residual_jacobian(&pose, c, k) {
                jtj += j.transpose() * j;
                jtr += j.transpose() * r;
            }
        }
        let lam = *lambda.get_or_insert(1e-6 * (0..6).map(|i| jtj[(i, i)]).fold(0.0, f64::max).max(1e-12));
        let mut accepted = false;
        let mut current = lam;
        for _ in 0..20 {
            let mut a = jtj;
            for i in 0..6 {
                a[(i, i)] += current * jtj[(i, i)].max(1e-12);
            }
            let Some(delta) = a.cholesky().map(|ch| ch.solve(&(-jtr))) else {
                current *= 10.0;
                continue;
            };
            if delta.norm() < 1e-10 {
                return (pose, trace);
            }
            let omega = Vector3::new(delta[0], delta[1], delta[2]);
            let v = Vector3::new(delta[3], delta[4], delta[5]);
            let cand = pose.perturbed(&omega, &v);
            let c = reprojection_cost(&cand, corr, k);
            if c <= cost {
                pose = cand;
                cost = c;
                trace.push(c);
                lambda = Some((current / 10.0).max(1e-12));
                accepted = true;
                break;
            }
            current *= 10.0;
        }
        if !accepted {
            break;
        }
    }
    (pose, trace)
}

pub fn refine_gn(initial: &Pose, corr: &[Correspondence], k: &Intrinsics, max_iters: usize) -> Pose {
    refine_gn_trace(initial, corr, k, max_iters).0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{pose_error, project};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn camera() -> Intrinsics {
        Intrinsics::centered(500.0, 640, 480).unwrap()
    }

    fn scene(rng: &mut ChaCha8Rng, n: usize) -> (Pose, Vec<Correspondence>) {
        let k = camera();
        let pose = Pose::level(
            Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(1.0..2.0)),
            rng.random_range(0.0..std::f64::consts::TAU),
            rng.random_range(-0.3..0.3),
        );
        let mut out = Vec::new();
        while out.len() < n {
            let px = Vector2::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0));
            let d = rng.random_range(1.0..8.0);
            let world = crate::geometry::backproject(&k, &pose, &px, d).unwrap();
            out.push(Correspondence {
                pixel: px,
                world,
                source: None,
            });
        }
        (pose, out)
    }

    #[test]
    fn p3p_recovers_the_generating_pose() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let k = camera();
        for _ in 0..200 {
            let (gt, c) = scene(&mut rng, 3);
            let sample = [c[0], c[1], c[2]];
            let cands = p3p(&sample, &k).unwrap();
            assert!(!cands.is_empty());
            let best = cands
                .iter()
                .map(|p| (p.rotation - gt.rotation).amax().max((p.translation - gt.translation).amax()))
                .fold(f64::INFINITY, f64::min);
            assert!(best < 1e-7, "{best}");
            for p in &cands {
                for s in &sample {
                    let (u, _) = project(&k, p, &s.world).unwrap();
                    assert!((u - s.pixel).norm() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn p3p_rejects_collinear_points() {
        let k = camera();
        let c = |x: f64| Correspondence {
            pixel: Vector2::new(320.0 + x, 240.0),
            world: Vector3::new(x, 0.0, 5.0),
            source: None,
        };
        assert_eq!(p3p(&[c(0.0), c(1.0), c(2.0)], &k), Err(SolverError::DegenerateConfiguration));
    }

    #[test]
    fn ransac_noiseless() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let k = camera();
        let (gt, c) = scene(&mut rng, 50);
        let est = ransac_pnp(&c, &k, &RansacParams::default()).unwrap();
        let e = pose_error(&est.pose, &gt);
        assert!(e.translation_error < 1e-6 && e.rotation_error < 1e-5, "{e:?}");
        assert_eq!(est.inliers.len(), 50);
        assert!(matches!(
            ransac_pnp(&c[..3], &k, &RansacParams::default()),
            Err(SolverError::TooFewCorrespondences(3))
        ));
    }

    #[test]
    fn ransac_with_outliers() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let k = camera();
        let (gt, mut c) = scene(&mut rng, 30);
        for _ in 0..70 {
            c.push(Correspondence {
                pixel: Vector2::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0)),
                world: Vector3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(0.0..3.0)),
                source: None,
            });
        }
        let est = ransac_pnp(&c, &k, &RansacParams::default()).unwrap();
        let e = pose_error(&est.pose, &gt);
        assert!(e.translation_error < 1e-6 && e.rotation_error < 1e-5, "{e:?}");
        assert!((0..30).all(|i| est.inliers.contains(&i)));
        let again = ransac_pnp(&c, &k, &RansacParams::default()).unwrap();
        assert_eq!(est, again);
        for &i in &est.inliers {
            assert!(reprojection_error(&k, &est.pose, &c[i]).unwrap() <= 3.0);
        }
    }

    #[test]
    fn refinement_from_ground_truth_is_a_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let k = camera();
        let (gt, c) = scene(&mut rng, 50);
        let out = refine_gn(&gt, &c, &k, 50);
        assert!((out.rotation - gt.rotation).amax() < 1e-12);
        assert!((out.translation - gt.translation).amax() < 1e-12);
    }

    #[test]
    fn refinement_converges_monotonically() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let k = camera();
        for _ in 0..10 {
            let (gt, c) = scene(&mut rng, 50);
            let axis = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)).normalize();
            let dir = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)).normalize();
            let start = Pose::from_center(
                nalgebra::Rotation3::new(axis * 3f64.to_radians()).into_inner() * gt.rotation,
                gt.center() + dir * 0.2,
            );
            let (out, trace) = refine_gn_trace(&start, &c, &k, 50);
            assert!(trace.windows(2).all(|w| w[1] <= w[0]));
            let e = pose_error(&out, &gt);
            assert!(e.translation_error < 1e-6, "{e:?}");
        }
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let k = camera();
        let (gt, c) = scene(&mut rng, 20);
        let pose = gt.perturbed(&Vector3::new(0.01, -0.02, 0.005), &Vector3::new(0.05, 0.0, -0.03));
        let h = 1e-6;
        for corr in &c {
            let (_, j) = residual_jacobian(&pose, corr, &k).unwrap();
            for d in 0..6 {
                let mut e = Vector6::zeros();
                e[d] = h;
                let f = |s: f64| {
                    let p = pose.perturbed(&(Vector3::new(e[0], e[1], e[2]) * s), &(Vector3::new(e[3], e[4], e[5]) * s));
                    residual_jacobian(&p, corr, &k).unwrap().0
                };
                let fd = (f(1.0) - f(-1.0)) / (2.0 * h);
                for r in 0..2 {
                    let (a, b) = (j[(r, d)], fd[r]);
                    assert!((a - b).abs() <= 1e-4 * (a.abs() + b.abs()).max(1e-3), "{a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn adaptive_bound_values() {
        assert_eq!(adaptive_bound(1.0, 0.999, 10_000), 1);
        assert_eq!(adaptive_bound(0.0, 0.999, 10_000), 10_000);
        // log(0.001) / log(1 − 0.125) = 51.7
        assert_eq!(adaptive_bound(0.5, 0.999, 10_000), 52);
    }
}
