//! End-to-end acceptance checks. Each check prints one PASS/FAIL line; the
//! process exits nonzero if any fails.

use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use nalgebra::{Matrix3, Rotation3, Unit, UnitQuaternion, Vector2, Vector3};
use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use vl_core::distill::{self, Student, TrainConfig};
use vl_core::eval::{self, AccuracyTriple, BenchmarkConfig, DEFAULT_THRESHOLDS};
use vl_core::features::{self, GlobalDescriptor, Keypoint, LocalFeatureSet};
use vl_core::geometry::{backproject, pose_error, project, Intrinsics, Pose, PoseError};
use vl_core::image::DepthMap;
use vl_core::matching::{self, Correspondence, MatchParams};
use vl_core::pipeline::{self, LocalizeParams, Localizer, ResultRecord};
use vl_core::pose_solver::{ransac_pnp, RansacParams, Stage};
use vl_core::retrieval::{CorpusItem, RetrievalIndex, ViewRef};
use vl_core::scene_db::{KeyframeId, SceneDatabase};
use vl_core::synth::{generate_scene, Aabb, OverlapRegime, Panel, SceneGeometry, SceneParams};
use vl_core::virtual_view::{occlusion_survivors, ProjectionParams, Survivor};

type Check = Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within(elapsed: Duration, limit: Duration) -> Result<(), String> {
    ensure(elapsed < limit, format!("took {elapsed:.1?}, limit {limit:?}"))
}

fn random_rotation(rng: &mut ChaCha8Rng) -> Matrix3<f64> {
    let q = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
    ));
    q.to_rotation_matrix().into_inner()
}

fn random_unit(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let n = v.norm();
        if n > 0.1 && n <= 1.0 {
            return v / n;
        }
    }
}

// ---------------------------------------------------------------- geometry

fn geometric_exactness() -> Check {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let k = Intrinsics::new(500.0, 480.0, 319.5, 241.0, 640, 480).unwrap();
    let mut worst_px = 0.0f64;
    let mut worst_world = 0.0f64;
    for _ in 0..1000 {
        let pose = Pose::from_center(random_rotation(&mut rng), Vector3::from_fn(|_, _| rng.random_range(-10.0..10.0)));
        let px = Vector2::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0));
        let d = rng.random_range(0.2..20.0);
        let x = backproject(&k, &pose, &px, d).map_err(|e| e.to_string())?;
        let (back, depth) = project(&k, &pose, &x).map_err(|e| e.to_string())?;
        worst_px = worst_px.max((back - px).norm()).max((depth - d).abs());
        let again = backproject(&k, &pose, &back, depth).map_err(|e| e.to_string())?;
        worst_world = worst_world.max((again - x).norm());
    }
    ensure(worst_px < 1e-9, format!("pixel/depth residual {worst_px:e}"))?;
    ensure(worst_world < 1e-9, format!("world residual {worst_world:e}"))?;

    // angle of the relative unit quaternion
    let mut worst_angle = 0.0f64;
    let mut worst_center = 0.0f64;
    for i in 0..1000 {
        let a = Pose::from_center(random_rotation(&mut rng), Vector3::from_fn(|_, _| rng.random_range(-5.0..5.0)));
        let b = if i % 4 == 0 {
            // tiny rotations, where acos-based formulas lose precision
            let axis = Unit::new_normalize(random_unit(&mut rng));
            let r = a.rotation * Rotation3::from_axis_angle(&axis, rng.random_range(0.0..1e-6)).into_inner();
            Pose::from_center(r, a.center())
        } else {
            Pose::from_center(random_rotation(&mut rng), Vector3::from_fn(|_, _| rng.random_range(-5.0..5.0)))
        };
        let qa = UnitQuaternion::from_matrix(&a.rotation);
        let qb = UnitQuaternion::from_matrix(&b.rotation);
        let rel = qa.inverse() * qb;
        let oracle = (2.0 * rel.imag().norm().atan2(rel.w.abs())).to_degrees();
        let ca = -(a.rotation.transpose() * a.translation);
        let cb = -(b.rotation.transpose() * b.translation);
        let e = pose_error(&a, &b);
        worst_angle = worst_angle.max((e.rotation_error - oracle).abs());
        worst_center = worst_center.max((e.translation_error - (ca - cb).norm()).abs());
    }
    ensure(worst_angle < 1e-9, format!("rotation error off oracle by {worst_angle:e} deg"))?;
    ensure(worst_center < 1e-12, format!("translation error off oracle by {worst_center:e} m"))?;
    within(t.elapsed(), Duration::from_secs(1))?;
    Ok(format!(
        "roundtrip residual {worst_px:.1e} px, world {worst_world:.1e} m, angle vs quaternion {worst_angle:.1e} deg, {:.2?}",
        t.elapsed()
    ))
}

// ---------------------------------------------------------------- solver

fn camera() -> Intrinsics {
    Intrinsics::centered(500.0, 640, 480).unwrap()
}

/// Camera somewhere in a `size` × `size` × 3 m room looking roughly level.
fn room_pose(rng: &mut ChaCha8Rng, size: f64) -> Pose {
    let c = Vector3::new(rng.random_range(1.0..size - 1.0), rng.random_range(1.0..size - 1.0), rng.random_range(1.0..2.0));
    Pose::level(c, rng.random_range(0.0..std::f64::consts::TAU), rng.random_range(-0.3..0.3))
}

/// First hit of a ray from inside the box with its walls.
fn room_hit(min: &Vector3<f64>, max: &Vector3<f64>, o: &Vector3<f64>, d: &Vector3<f64>) -> Vector3<f64> {
    let mut t = f64::INFINITY;
    for i in 0..3 {
        if d[i] > 0.0 {
            t = t.min((max[i] - o[i]) / d[i]);
        } else if d[i] < 0.0 {
            t = t.min((min[i] - o[i]) / d[i]);
        }
    }
    o + d * t
}

fn room_correspondences(rng: &mut ChaCha8Rng, pose: &Pose, k: &Intrinsics, size: f64, n: usize) -> Vec<Correspondence> {
    let (min, max) = (Vector3::new(0.0, 0.0, 0.0), Vector3::new(size, size, 3.0));
    let c = pose.center();
    (0..n)
        .map(|_| {
            let px = Vector2::new(rng.random_range(0.0..k.width as f64 - 1.0), rng.random_range(0.0..k.height as f64 - 1.0));
            let dir = pose.rotation.transpose() * k.ray(&px);
            Correspondence {
                pixel: px,
                world: room_hit(&min, &max, &c, &dir),
                source: None,
            }
        })
        .collect()
}

fn solver_exactness() -> Check {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let k = camera();
    let (mut worst_m, mut worst_deg) = (0.0f64, 0.0f64);
    for i in 0..100 {
        let gt = room_pose(&mut rng, 10.0);
        let n = 50 + i % 30;
        let mut corr = room_correspondences(&mut rng, &gt, &k, 10.0, n);
        // pixels from exact projection
        for c in &mut corr {
            c.pixel = project(&k, &gt, &c.world).unwrap().0;
        }
        let est = ransac_pnp(&corr, &k, &RansacParams { seed: i as u64, ..Default::default() }).map_err(|e| format!("query {i}: {e}"))?;
        let e = pose_error(&est.pose, &gt);
        worst_m = worst_m.max(e.translation_error);
        worst_deg = worst_deg.max(e.rotation_error);
    }
    ensure(worst_m < 1e-6 && worst_deg < 1e-5, format!("worst error {worst_m:e} m, {worst_deg:e} deg"))?;
    within(t.elapsed(), Duration::from_secs(10))?;
    Ok(format!("worst error {worst_m:.1e} m, {worst_deg:.1e} deg over 100 queries, {:.2?}", t.elapsed()))
}

fn robustness() -> Check {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let k = camera();
    let noise = Normal::new(0.0, 1.0).unwrap();
    let fractions = [0.1, 0.2, 0.3, 0.4, 0.5];
    let per = 40;
    let mut ok = 0;
    let mut per_fraction = Vec::new();
    for &f in &fractions {
        let mut ok_f = 0;
        for trial in 0..per {
            let gt = room_pose(&mut rng, 10.0);
            let mut corr = room_correspondences(&mut rng, &gt, &k, 10.0, 200);
            let outliers = (200.0 * f) as usize;
            for (j, c) in corr.iter_mut().enumerate() {
                if j < outliers {
                    c.pixel = Vector2::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0));
                } else {
                    c.pixel += Vector2::new(noise.sample(&mut rng), noise.sample(&mut rng));
                }
            }
            let params = RansacParams {
                seed: trial as u64,
                ..Default::default()
            };
            if let Ok(est) = ransac_pnp(&corr, &k, &params) {
                if pose_error(&est.pose, &gt).within(0.05, 0.5) {
                    ok_f += 1;
                }
            }
        }
        per_fraction.push(format!("{f}: {ok_f}/{per}"));
        ok += ok_f;
    }
    let total = per * fractions.len();
    let rate = ok as f64 / total as f64;
    ensure(rate >= 0.95, format!("{ok}/{total} recovered ({})", per_fraction.join(", ")))?;
    within(t.elapsed(), Duration::from_secs(60))?;
    Ok(format!("{ok}/{total} within (0.05 m, 0.5 deg) [{}], {:.2?}", per_fraction.join(", "), t.elapsed()))
}

// ---------------------------------------------------------------- oracles

fn retrieval_oracle() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let dim = 32;
    let unit = |rng: &mut ChaCha8Rng| {
        let v: Vec<f32> = (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        GlobalDescriptor {
            values: v.iter().map(|x| x / n).collect(),
        }
    };
    let descs: Vec<GlobalDescriptor> = (0..500).map(|_| unit(&mut rng)).collect();
    let items: Vec<CorpusItem> = descs
        .iter()
        .enumerate()
        .map(|(i, d)| CorpusItem {
            view: if i % 5 == 0 { ViewRef::Virtual(i as u32) } else { ViewRef::Real(KeyframeId(i as u32)) },
            pose: Pose::identity(),
            descriptor: d,
        })
        .collect();
    let index = RetrievalIndex::build(&items, None).map_err(|e| e.to_string())?;
    for qi in 0..100 {
        // every tenth query duplicates a corpus entry to exercise ties at zero
        let q = if qi % 10 == 0 { descs[qi * 3].clone() } else { unit(&mut rng) };
        let wq = index.transform(&q).map_err(|e| e.to_string())?;
        let mut all: Vec<(u32, f64)> = index
            .entries()
            .iter()
            .map(|e| {
                let d2: f64 = e.descriptor.iter().zip(&wq).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum();
                (e.id, d2.sqrt())
            })
            .collect();
        all.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        for k in [1, 10, 40, 500, 600] {
            let got = index.query_topk(&q, k).map_err(|e| e.to_string())?;
            let want = &all[..k.min(all.len())];
            ensure(got == want, format!("query {qi} k {k}: top-k differs from exhaustive scan"))?;
        }
    }
    Ok("retrieval 100/100".into())
}

fn naive_match(a: &[Vec<f32>], b: &[Vec<f32>], ratio: f64) -> Vec<(usize, usize)> {
    let dist = |x: &[f32], y: &[f32]| x.iter().zip(y).map(|(&p, &q)| (p as f64 - q as f64).powi(2)).sum::<f64>().sqrt();
    // nearest (first index among equals) and the second smallest value
    let two = |ds: Vec<f64>| {
        let mut idx = 0;
        for (i, d) in ds.iter().enumerate() {
            if *d < ds[idx] {
                idx = i;
            }
        }
        let mut sorted = ds.clone();
        sorted.sort_by(f64::total_cmp);
        let second = sorted.get(1).copied().unwrap_or(f64::INFINITY);
        (idx, sorted[0], second)
    };
    let ok = |first: f64, second: f64| first < second && first <= ratio * second;
    let mut out = Vec::new();
    for (i, x) in a.iter().enumerate() {
        let (j, f1, s1) = two(b.iter().map(|y| dist(x, y)).collect());
        let (back, f2, s2) = two(a.iter().map(|z| dist(z, &b[j])).collect());
        if back == i && ok(f1, s1) && ok(f2, s2) {
            out.push((i, j));
        }
    }
    out
}

fn matching_oracle() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let dim = 8;
    let mut total = 0;
    for trial in 0..100 {
        let (na, nb) = (rng.random_range(1..60), rng.random_range(1..60));
        // coarse quantization makes exact ties common
        let levels = if trial % 2 == 0 { 3.0 } else { 1000.0 };
        let draw = |rng: &mut ChaCha8Rng| -> Vec<f32> { (0..dim).map(|_| (rng.random_range(0.0f32..1.0) * levels).floor() / levels).collect() };
        let a: Vec<Vec<f32>> = (0..na).map(|_| draw(&mut rng)).collect();
        let mut b: Vec<Vec<f32>> = (0..nb).map(|_| draw(&mut rng)).collect();
        // plant noisy copies so real matches exist
        for (i, x) in a.iter().enumerate().take(nb / 2) {
            b[i] = x.iter().map(|v| v + rng.random_range(-0.01f32..0.01)).collect();
        }
        let set = |v: &[Vec<f32>]| {
            let mut s = LocalFeatureSet::empty(dim);
            for (i, d) in v.iter().enumerate() {
                s.push(Keypoint { x: i as f32, y: 0.0, score: 1.0 }, d);
            }
            s
        };
        let ratio = [0.6, 0.8, 1.0][trial % 3];
        let got = matching::match_descriptors(&set(&a), &set(&b), &MatchParams { ratio, ..Default::default() }).map_err(|e| e.to_string())?;
        let got: Vec<(usize, usize)> = got.pairs.iter().map(|m| (m.query, m.reference)).collect();
        let want = naive_match(&a, &b, ratio);
        ensure(got == want, format!("trial {trial}: {got:?} vs {want:?}"))?;
        total += want.len();
    }
    Ok(format!("matching 100/100 ({total} pairs)"))
}

/// Target camera at the origin facing +y; a plate at y = 3 whose outline
/// falls on pixel boundaries of the 64×64 target, in front of a wall at y = 6.
fn occlusion_oracle() -> Result<String, String> {
    let room = Aabb {
        min: [-20.0, -4.0, -20.0],
        max: [20.0, 6.0, 20.0],
    };
    // pixel boundary m + 0.5 at depth 3 with f = 32 and c = 31.5
    let edge = |m: f64| (m + 0.5 - 31.5) * 3.0 / 32.0;
    let plate = Panel {
        axis: 1,
        coord: 3.0,
        lo: [edge(22.0), -edge(40.0)],
        hi: [edge(40.0), -edge(22.0)],
    };
    let geo = SceneGeometry::new(room, Vec::new(), vec![plate], 9);
    let yaw = std::f64::consts::FRAC_PI_2;
    let target = Pose::level(Vector3::zeros(), yaw, 0.0);
    let tk = Intrinsics::centered(32.0, 64, 64).unwrap();
    let views = [
        (Pose::level(Vector3::zeros(), yaw, 0.0), Intrinsics::centered(64.0, 128, 128).unwrap()),
        (Pose::level(Vector3::new(1.2, 0.3, 0.4), yaw + 0.15, -0.05), Intrinsics::centered(32.0, 64, 64).unwrap()),
        (Pose::level(Vector3::new(-0.9, -0.5, -0.3), yaw - 0.2, 0.08), Intrinsics::centered(40.0, 64, 64).unwrap()),
    ];
    let mut db = SceneDatabase::new("occlusion");
    for (pose, k) in &views {
        let (image, depth) = geo.render(pose, k);
        let depth = DepthMap::from_raw(k.width, k.height, depth.iter().map(|&d| d as f32).collect()).unwrap();
        db.ingest_keyframe(image, depth, *pose, *k).map_err(|e| e.to_string())?;
    }
    let ids: Vec<KeyframeId> = db.keyframes().iter().map(|kf| kf.id).collect();
    let got = occlusion_survivors(&db, &target, &tk, &ids, &ProjectionParams::default()).map_err(|e| e.to_string())?;

    let center = target.center();
    let mut want = Vec::new();
    for kf in db.keyframes() {
        for y in 0..kf.depth.height() {
            for x in 0..kf.depth.width() {
                let d = kf.depth.get(x, y) as f64;
                if d <= 0.0 {
                    continue;
                }
                let world = backproject(&kf.intrinsics, &kf.pose, &Vector2::new(x as f64, y as f64), d).unwrap();
                let Ok((px, z)) = project(&tk, &target, &world) else {
                    continue;
                };
                let (u, v) = (px.x.round(), px.y.round());
                let inside = z > 0.0 && u >= 0.0 && v >= 0.0 && u < 64.0 && v < 64.0;
                if inside && geo.visible_from(&center, &world) {
                    want.push(Survivor { source: kf.id, x, y });
                }
            }
        }
    }
    want.sort();
    let hidden = db.keyframes().iter().map(|kf| kf.depth.as_raw().len()).sum::<usize>() - want.len();
    ensure(got.len() == want.len(), format!("occlusion: {} survivors vs oracle {}", got.len(), want.len()))?;
    ensure(got == want, "occlusion: survivor sets differ")?;
    Ok(format!("occlusion {} survivors, {hidden} culled or out of view", want.len()))
}

fn oracle_equivalences() -> Check {
    let t = Instant::now();
    let parts = [retrieval_oracle()?, matching_oracle()?, occlusion_oracle()?];
    Ok(format!("{}, {:.2?}", parts.join("; "), t.elapsed()))
}

// ---------------------------------------------------------------- trends

fn augmentation_trend(triples: &mut Vec<AccuracyTriple>) -> Check {
    let t = Instant::now();
    let cfg = BenchmarkConfig::default().with_seed(7);
    let out = eval::run_ablation(&cfg, None).map_err(|e| e.to_string())?;
    triples.extend(out.runs.iter().map(|r| r.accuracy));
    let base = out.run("baseline").ok_or("no baseline run")?;
    let va = out.run("+VA").ok_or("no +VA run")?;
    let detail = format!(
        "tight {:.1} -> {:.1}, matched {} -> {}, verified {} -> {}",
        base.accuracy.acc_tight,
        va.accuracy.acc_tight,
        base.num_matched,
        va.num_matched,
        base.num_matched_verified,
        va.num_matched_verified
    );
    ensure(va.accuracy.acc_tight >= base.accuracy.acc_tight, format!("accuracy dropped: {detail}"))?;
    ensure(va.num_matched > base.num_matched, format!("matched count did not increase: {detail}"))?;
    within(t.elapsed(), Duration::from_secs(300))?;
    Ok(format!("{detail}, {:.1?}", t.elapsed()))
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn refinement_trend() -> Check {
    let t = Instant::now();
    let scene = generate_scene(&SceneParams {
        seed: 3,
        num_queries: 25,
        regime: OverlapRegime::High,
        ..Default::default()
    })
    .map_err(|e| e.to_string())?;
    let mut db = scene.to_database().map_err(|e| e.to_string())?;
    let params = LocalizeParams {
        k: 10,
        ..Default::default()
    };
    db.compute_features(&params.features).map_err(|e| e.to_string())?;
    let index = pipeline::build_real_index(&db, None).map_err(|e| e.to_string())?;
    let k = scene.intrinsics;
    let loc = Localizer {
        db: &db,
        index: &index,
        store: None,
        student: None,
        params: &params,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let (mut better, mut fewer_inliers, mut trials) = (0, 0, 0);
    let (mut before, mut after) = (Vec::new(), Vec::new());
    for q in &scene.queries {
        let f = features::extract_all(&q.image, &params.features).map_err(|e| e.to_string())?;
        let coarse_out = loc.localize_coarse(&f, &k).map_err(|e| e.to_string())?;
        for _ in 0..4 {
            let axis = Unit::new_normalize(random_unit(&mut rng));
            let r = q.pose.rotation * Rotation3::from_axis_angle(&axis, 5f64.to_radians()).into_inner();
            let start = Pose::from_center(r, q.pose.center() + random_unit(&mut rng) * 0.3);
            let coarse = pipeline::estimate_at(start, &coarse_out.correspondences, &k, params.ransac.inlier_threshold);
            let refined = loc.refine_with_virtual_view(&f.local, &k, &coarse);
            let (ce, re): (PoseError, PoseError) = (pose_error(&coarse.pose, &q.pose), pose_error(&refined.pose, &q.pose));
            trials += 1;
            if re.translation_error < ce.translation_error && re.rotation_error < ce.rotation_error {
                better += 1;
            }
            if refined.num_inliers() < coarse.num_inliers() {
                fewer_inliers += 1;
            }
            before.push(ce.translation_error);
            after.push(re.translation_error);
            if refined.stage == Stage::Refined {
                ensure(refined.is_ok(), "refined estimate without ok status")?;
            }
        }
    }
    let detail = format!(
        "{better}/{trials} improved, {fewer_inliers} with fewer inliers, median {:.3} m -> {:.3} m",
        median(before),
        median(after)
    );
    ensure(trials == 100, format!("ran {trials} trials"))?;
    ensure(better >= 90 && fewer_inliers == 0, detail.clone())?;
    within(t.elapsed(), Duration::from_secs(120))?;
    Ok(format!("{detail}, {:.1?}", t.elapsed()))
}

// ---------------------------------------------------------------- distillation

fn distillation() -> Check {
    let t = Instant::now();
    let mut worst = 0.0f64;
    for seed in 0..10 {
        let pair = distill::synthetic_pair(8, 5, seed);
        let s = Student::random(8, 8, 12, 1000 + seed);
        let e = distill::gradient_check(&s, &pair, 1e-5, 1.0, 64, seed).map_err(|e| e.to_string())?;
        worst = worst.max(e);
    }
    ensure(worst < 1e-4, format!("gradient check relative error {worst:e}"))?;

    let pairs: Vec<_> = (0..24).map(|i| distill::synthetic_pair(8, 6, 50 + i)).collect();
    let student = Student::random(8, 8, 16, 7);
    let cfg = TrainConfig {
        epochs: 200,
        batch_size: 24,
        lr: 0.05,
        lambda: 1.0,
        decay_epoch: None,
        freeze_head: false,
        ..Default::default()
    };
    let combined = |s: &Student| -> Result<f64, String> {
        let mut sum = 0.0;
        for p in &pairs {
            sum += s.loss(p).map_err(|e| e.to_string())?.total(cfg.lambda);
        }
        Ok(sum / pairs.len() as f64)
    };
    let (trained, history) = distill::train(&student, &pairs, &cfg).map_err(|e| e.to_string())?;
    ensure(history.len() == 200, format!("{} steps", history.len()))?;
    let (l0, l1) = (combined(&student)?, combined(&trained)?);
    ensure(l1 <= 0.5 * l0, format!("loss {l0:.4} -> {l1:.4}"))?;

    let mut empty = distill::synthetic_pair(8, 0, 3);
    empty.target_local = nalgebra::DMatrix::zeros(8, 0);
    let (losses, grads) = trained.loss_and_grad(&empty, 1.0).map_err(|e| e.to_string())?;
    ensure(losses.local == 0.0, format!("loss_l {} under an empty mask", losses.local))?;
    ensure(
        grads.local_w1.iter().chain(grads.local_w2.iter()).all(|&g| g == 0.0),
        "local gradients nonzero under an empty mask",
    )?;
    within(t.elapsed(), Duration::from_secs(120))?;
    Ok(format!(
        "gradient check {worst:.1e}, 200 steps {l0:.4} -> {l1:.4} ({:.0}% lower), empty-mask loss_l 0, {:.2?}",
        100.0 * (1.0 - l1 / l0),
        t.elapsed()
    ))
}

// ---------------------------------------------------------------- metrics

fn err(m: f64, d: f64) -> Option<PoseError> {
    Some(PoseError {
        translation_error: m,
        rotation_error: d,
    })
}

fn metric_invariants(triples: &[AccuracyTriple]) -> Check {
    let t = Instant::now();
    let mut runner = TestRunner::new(PropConfig {
        cases: 2000,
        failure_persistence: None,
        ..PropConfig::default()
    });
    let entry = prop_oneof![
        1 => Just(None),
        6 => (0.0f64..8.0, 0.0f64..15.0).prop_map(|(m, d)| err(m, d)),
        // values sitting on the thresholds themselves
        2 => prop::sample::select(vec![0.25, 0.5, 5.0]).prop_flat_map(|m| prop::sample::select(vec![2.0, 5.0, 10.0]).prop_map(move |d| err(m, d))),
    ];
    runner
        .run(&prop::collection::vec(entry, 0..60), |errors| {
            let a = eval::accuracy_from_errors(&errors, &DEFAULT_THRESHOLDS);
            prop_assert!(a.is_monotone(), "{a:?}");
            prop_assert!(a.acc_tight >= 0.0 && a.acc_loose <= 100.0);
            Ok(())
        })
        .map_err(|e| e.to_string())?;
    for a in triples {
        ensure(a.is_monotone(), format!("ablation triple {a} not monotone"))?;
    }

    // hand counts: tight hits 0.1/1, 0.25/2 (inclusive); mid adds 0.4/3 and 0.5/5;
    // loose adds 4/9; 0.2/3 misses tight on rotation only; 6/1 and a failure miss all
    let errors = [
        err(0.1, 1.0),
        err(0.25, 2.0),
        err(0.4, 3.0),
        err(0.5, 5.0),
        err(4.0, 9.0),
        err(0.2, 3.0),
        err(6.0, 1.0),
        None,
    ];
    let a = eval::accuracy_from_errors(&errors, &DEFAULT_THRESHOLDS);
    // tight 2/8, mid 5/8, loose 6/8
    let want = AccuracyTriple {
        acc_tight: 25.0,
        acc_mid: 62.5,
        acc_loose: 75.0,
    };
    ensure(a == want, format!("hand count {a:?}, expected {want:?}"))?;
    let empty = eval::accuracy_from_errors(&[], &DEFAULT_THRESHOLDS);
    ensure(empty == AccuracyTriple { acc_tight: 0.0, acc_mid: 0.0, acc_loose: 0.0 }, "empty list")?;
    // 1 of 3 within everything, 1 within mid and loose, 1 failure
    let gt = [(1, Pose::identity()), (2, Pose::identity()), (3, Pose::identity())];
    let shifted = Pose::from_center(Matrix3::identity(), Vector3::new(0.3, 0.0, 0.0));
    let res = [(3, None), (1, Some(Pose::identity())), (2, Some(shifted))];
    let a = eval::evaluate_accuracy(&res, &gt, &DEFAULT_THRESHOLDS).map_err(|e| e.to_string())?;
    let third = 100.0 / 3.0;
    ensure(
        a == AccuracyTriple { acc_tight: third, acc_mid: 2.0 * third, acc_loose: 2.0 * third },
        format!("evaluate_accuracy {a:?}"),
    )?;
    Ok(format!(
        "2000 random lists and {} ablation triples monotone, hand counts exact, {:.2?}",
        triples.len(),
        t.elapsed()
    ))
}

// ---------------------------------------------------------------- determinism

fn run_ablate(dir: &std::path::Path) -> Result<(Vec<u8>, Vec<u8>), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_vl"))
        .args(["--seed", "7", "ablate", "--out"])
        .arg(dir)
        .output()
        .map_err(|e| e.to_string())?;
    ensure(
        out.status.success(),
        format!("vl ablate failed: {}", String::from_utf8_lossy(&out.stderr)),
    )?;
    let csv = std::fs::read(dir.join("report.csv")).map_err(|e| e.to_string())?;
    Ok((out.stdout, csv))
}

/// Relative paths of every file under `root`, sorted.
fn tree_files(root: &std::path::Path) -> Result<Vec<std::path::PathBuf>, String> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(&dir).map_err(|e| e.to_string())? {
            let p = e.map_err(|e| e.to_string())?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    Ok(out)
}

fn determinism() -> Check {
    let t = Instant::now();
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let first = run_ablate(&a)?;
    let second = run_ablate(&b)?;
    ensure(first.0 == second.0, "ablate stdout differs between runs")?;
    ensure(first.1 == second.1, "report.csv differs between runs")?;

    // scene database with features
    let scene = generate_scene(&SceneParams {
        seed: 5,
        num_db: 8,
        num_queries: 2,
        overlap_samples: 200,
        ..Default::default()
    })
    .map_err(|e| e.to_string())?;
    let mut db = scene.to_database().map_err(|e| e.to_string())?;
    db.compute_features(&Default::default()).map_err(|e| e.to_string())?;
    let d1 = tmp.path().join("db1");
    let d2 = tmp.path().join("db2");
    db.save(&d1).map_err(|e| e.to_string())?;
    let loaded = SceneDatabase::load(&d1).map_err(|e| e.to_string())?;
    ensure(loaded == db, "database changed across save/load")?;
    loaded.save(&d2).map_err(|e| e.to_string())?;
    let files = tree_files(&d1)?;
    ensure(files == tree_files(&d2)?, "database file lists differ after reload")?;
    for rel in &files {
        let (x, y) = (std::fs::read(d1.join(rel)), std::fs::read(d2.join(rel)));
        ensure(x.is_ok() && x.ok() == y.ok(), format!("database file {} differs after reload", rel.display()))?;
    }

    // retrieval index
    let index = pipeline::build_real_index(&db, None).map_err(|e| e.to_string())?;
    let mut bytes = Vec::new();
    index.write_to(&mut bytes).map_err(|e| e.to_string())?;
    let back = RetrievalIndex::read_from(bytes.as_slice()).map_err(|e| e.to_string())?;
    ensure(back == index, "index changed across write/read")?;
    let mut again = Vec::new();
    back.write_to(&mut again).map_err(|e| e.to_string())?;
    ensure(again == bytes, "index bytes differ after reload")?;

    // student checkpoint: f32 storage, so compare write, read, write
    let s = Student::random(16, 12, 10, 3);
    let mut c1 = Vec::new();
    s.write_checkpoint(&mut c1).map_err(|e| e.to_string())?;
    let r1 = Student::read_checkpoint(c1.as_slice()).map_err(|e| e.to_string())?;
    let mut c2 = Vec::new();
    r1.write_checkpoint(&mut c2).map_err(|e| e.to_string())?;
    ensure(c1 == c2, "checkpoint bytes differ after reload")?;
    ensure(Student::read_checkpoint(c2.as_slice()).map_err(|e| e.to_string())? == r1, "checkpoint reload differs")?;

    // results file
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let records: Vec<ResultRecord> = (0..20)
        .map(|i| {
            let pose = Pose::from_center(random_rotation(&mut rng), Vector3::from_fn(|_, _| rng.random_range(-9.0..9.0)));
            ResultRecord {
                query_id: i,
                status: if i % 7 == 3 { "failed: no correspondences".into() } else { "ok".into() },
                stage: if i % 2 == 0 { Stage::Coarse } else { Stage::Refined },
                pose: (i % 7 != 3).then(|| pose.to_text()),
                num_inliers: rng.random_range(0..500),
                num_correspondences: rng.random_range(0..900),
                retrieved: vec![ViewRef::Real(KeyframeId(i)), ViewRef::Virtual(i * 3)],
                features_ms: rng.random_range(0.0..100.0),
                coarse_ms: rng.random::<f64>() * 1e-3,
                refine_ms: rng.random_range(0.0..1e4),
            }
        })
        .collect();
    let text: String = records.iter().map(|r| serde_json::to_string(r).unwrap() + "\n").collect();
    let parsed = pipeline::read_results_jsonl(&text).map_err(|e| e.to_string())?;
    ensure(parsed == records, "results changed across write/read")?;
    let text2: String = parsed.iter().map(|r| serde_json::to_string(r).unwrap() + "\n").collect();
    ensure(text2 == text, "results bytes differ after reload")?;
    for (r, p) in records.iter().zip(&parsed) {
        if let (Some(a), Some(b)) = (&r.pose, p.parsed_pose()) {
            ensure(Pose::parse_text(a).ok() == Some(b) && b.to_text() == *a, "pose text not exact")?;
        }
    }
    Ok(format!(
        "ablate stdout {} bytes and report.csv identical across runs; database, index, checkpoint, results bit-exact, {:.1?}",
        first.0.len(),
        t.elapsed()
    ))
}

fn main() -> ExitCode {
    let mut triples = Vec::new();
    let mut results: Vec<(&str, Check)> = Vec::new();
    let mut run = |name: &'static str, f: &mut dyn FnMut() -> Check| {
        let r = f();
        match &r {
            Ok(msg) => println!("PASS {name}: {msg}"),
            Err(msg) => println!("FAIL {name}: {msg}"),
        }
        results.push((name, r));
    };
    run("1 geometric exactness", &mut geometric_exactness);
    run("2 solver exactness", &mut solver_exactness);
    run("3 robustness", &mut robustness);
    run("4 oracle equivalences", &mut oracle_equivalences);
    run("5 view augmentation trend", &mut || augmentation_trend(&mut triples));
    run("6 pose refinement trend", &mut refinement_trend);
    run("7 distillation", &mut distillation);
    run("8 metric invariants", &mut || metric_invariants(&triples));
    run("9 determinism", &mut determinism);
    let failed = results.iter().filter(|(_, r)| r.is_err()).count();
    println!("{} passed, {failed} failed", results.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
