//! `vl`: synthetic scenes, database building, augmentation, localization,
//! evaluation, ablation and student distillation from the command line.

mod config;

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use vl_core::distill::{self, Student};
use vl_core::eval;
use vl_core::geometry::Intrinsics;
use vl_core::image::RgbImage;
use vl_core::pipeline::{self, Localizer};
use vl_core::retrieval::{RetrievalIndex, INDEX_FILE};
use vl_core::scene_db::SceneDatabase;
use vl_core::synth::{self, OverlapRegime};
use vl_core::virtual_view::FeatureMode;

use config::RunConfig;

const DB_DIR: &str = "db";
const QUERY_DIR: &str = "queries";
const GT_FILE: &str = "gt.csv";

#[derive(Parser, Debug)]
#[command(name = "vl", version, about = "Visual relocalization with projected virtual views")]
struct Cli {
    /// Seed for every random choice.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (all cores when unset).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Mode {
    Deterministic,
    Distilled,
}

impl From<Mode> for FeatureMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Deterministic => FeatureMode::Deterministic,
            Mode::Distilled => FeatureMode::Distilled,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Regime {
    Low,
    High,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic scene: database, queries and ground truth.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        num_db: Option<usize>,
        #[arg(long)]
        num_queries: Option<usize>,
        #[arg(long, value_enum)]
        regime: Option<Regime>,
    },
    /// Extract features for every database keyframe.
    BuildDb {
        #[arg(long)]
        scene: Option<PathBuf>,
    },
    /// Render virtual views and write the retrieval index.
    Augment {
        #[arg(long)]
        scene: Option<PathBuf>,
        #[arg(long)]
        offset_distance: Option<f64>,
        #[arg(long, value_enum)]
        mode: Option<Mode>,
        #[arg(long)]
        student: Option<PathBuf>,
    },
    /// Localize every query image of a scene.
    Localize {
        #[arg(long)]
        scene: Option<PathBuf>,
        /// Results file (JSON lines).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Retrieved views per query.
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        ratio: Option<f64>,
        /// Ignore the augmented index and retrieve real keyframes only.
        #[arg(long)]
        no_augment: bool,
        #[arg(long)]
        no_refine: bool,
        #[arg(long)]
        refine_iters: Option<usize>,
        #[arg(long, value_enum)]
        mode: Option<Mode>,
        #[arg(long)]
        student: Option<PathBuf>,
    },
    /// Accuracy of a results file against ground truth.
    Evaluate {
        #[arg(long)]
        results: PathBuf,
        #[arg(long)]
        gt: PathBuf,
    },
    /// Baseline, +VA, +VA+PR and VA w/o local on one synthetic benchmark.
    Ablate {
        /// Directory for report.csv.
        #[arg(long, default_value = ".")]
        out: PathBuf,
        #[arg(long)]
        student: Option<PathBuf>,
    },
    /// Train a student on pairs rendered at the database poses.
    Distill {
        #[arg(long)]
        scene: Option<PathBuf>,
        /// Checkpoint path (defaults to SCENE/student.vlst).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        hidden: Option<usize>,
    },
    /// Finite-difference check of the student gradients.
    Gradcheck {
        #[arg(long, default_value_t = 10)]
        trials: usize,
        #[arg(long, default_value_t = 1e-5)]
        epsilon: f64,
    },
}

enum Failure {
    Usage(String),
    Data(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Data(e)
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Data(e)) => {
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p).map_err(Failure::Usage)?,
        None => RunConfig::default(),
    };
    cfg.apply_seed(cli.seed.unwrap_or(cfg.seed));
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Failure::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Usage(e.to_string()))?;
    }
    match cli.command {
        Command::Synth {
            out,
            num_db,
            num_queries,
            regime,
        } => {
            if let Some(n) = num_db {
                cfg.synth.num_db = n;
            }
            if let Some(n) = num_queries {
                cfg.synth.num_queries = n;
            }
            if let Some(r) = regime {
                cfg.synth.regime = match r {
                    Regime::Low => OverlapRegime::Low,
                    Regime::High => OverlapRegime::High,
                };
            }
            synth_cmd(&cfg, &out)?;
        }
        Command::BuildDb { scene } => {
            let dir = scene_dir(scene, &cfg)?;
            let db_dir = dir.join(DB_DIR);
            let mut db = SceneDatabase::load(&db_dir).context("loading database")?;
            db.compute_features(&cfg.features).context("extracting features")?;
            db.save(&db_dir).context("saving database")?;
            println!("features for {} keyframes", db.len());
        }
        Command::Augment {
            scene,
            offset_distance,
            mode,
            student,
        } => {
            let dir = scene_dir(scene, &cfg)?;
            if let Some(d) = offset_distance {
                cfg.augmentation.offset_distance = d;
            }
            if let Some(m) = mode {
                cfg.augmentation.mode = m.into();
            }
            let student = load_student(student.or(cfg.student.clone()), cfg.augmentation.mode)?;
            let db = load_db_with_features(&dir)?;
            let k = db_intrinsics(&db)?;
            let grid = pipeline::generate_augmentation_grid(&db, &cfg.augmentation).map_err(invalid)?;
            let aug = pipeline::augment_database(&db, &grid, &k, &cfg.augmentation, cfg.features.gem_p, student.as_ref())
                .context("augmenting")?;
            let path = dir.join(INDEX_FILE);
            let f = fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?;
            aug.index.write_to(BufWriter::new(f)).context("writing index")?;
            println!(
                "{} grid poses, {} valid virtual views, {} index entries",
                aug.grid_size,
                aug.store.len(),
                aug.index.len()
            );
        }
        Command::Localize {
            scene,
            out,
            k,
            ratio,
            no_augment,
            no_refine,
            refine_iters,
            mode,
            student,
        } => {
            let dir = scene_dir(scene, &cfg)?;
            if let Some(k) = k {
                cfg.localize.k = k;
            }
            if let Some(r) = ratio {
                cfg.localize.matching.ratio = r;
            }
            if no_refine {
                cfg.localize.refine.enabled = false;
            }
            if let Some(n) = refine_iters {
                cfg.localize.refine.iterations = n;
            }
            if let Some(m) = mode {
                cfg.augmentation.mode = m.into();
                cfg.localize.refine.mode = m.into();
            }
            cfg.localize.features = cfg.features;
            let out = out.unwrap_or_else(|| dir.join("results.jsonl"));
            localize_cmd(&cfg, &dir, &out, no_augment, student)?;
        }
        Command::Evaluate { results, gt } => {
            let text = read_text(&results)?;
            let records = pipeline::read_results_jsonl(&text).context("parsing results")?;
            let gts = eval::read_ground_truth_csv(&read_text(&gt)?).context("parsing ground truth")?;
            let est: Vec<_> = records.iter().map(|r| (r.query_id, r.parsed_pose())).collect();
            let acc = eval::evaluate_accuracy(&est, &gts, &eval::DEFAULT_THRESHOLDS).map_err(anyhow::Error::from)?;
            println!("{acc}");
        }
        Command::Ablate { out, student } => {
            let student = load_student(student.or(cfg.student.clone()), cfg.benchmark.augmentation.mode)?;
            let outcome = eval::run_ablation(&cfg.benchmark, student.as_ref()).map_err(anyhow::Error::from)?;
            let report = outcome.report();
            print!("{}", report.text);
            println!();
            println!(
                "{} grid poses, {} virtual views, {} queries",
                outcome.grid_size,
                outcome.num_virtual,
                cfg.benchmark.scene.num_queries
            );
            for r in &outcome.runs {
                println!(
                    "{:<14}matched {:>3}  verified {:>3}",
                    r.name, r.num_matched, r.num_matched_verified
                );
            }
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            let path = out.join("report.csv");
            fs::write(&path, &report.csv).with_context(|| format!("writing {}", path.display()))?;
        }
        Command::Distill {
            scene,
            out,
            epochs,
            hidden,
        } => {
            let dir = scene_dir(scene, &cfg)?;
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            if let Some(h) = hidden {
                cfg.hidden = h;
            }
            let out = out.unwrap_or_else(|| dir.join("student.vlst"));
            distill_cmd(&cfg, &dir, &out)?;
        }
        Command::Gradcheck { trials, epsilon } => {
            let mut worst = 0.0f64;
            for t in 0..trials as u64 {
                let seed = cfg.seed.wrapping_add(t);
                let student = Student::random(8, 8, 12, seed);
                let pair = distill::synthetic_pair(8, 5, seed ^ 0x5eed);
                let e = distill::gradient_check(&student, &pair, epsilon, cfg.train.lambda, 100, seed)
                    .map_err(|e| Failure::Usage(e.to_string()))?;
                worst = worst.max(e);
            }
            println!("max relative error over {trials} initializations: {worst:.3e}");
        }
    }
    Ok(())
}

fn invalid(e: impl std::fmt::Display) -> Failure {
    Failure::Usage(e.to_string())
}

fn scene_dir(flag: Option<PathBuf>, cfg: &RunConfig) -> Result<PathBuf, Failure> {
    flag.or_else(|| cfg.scene.clone())
        .ok_or_else(|| Failure::Usage("no scene directory (--scene or `scene` in the config)".into()))
}

fn read_text(path: &Path) -> anyhow::Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn load_student(path: Option<PathBuf>, mode: FeatureMode) -> Result<Option<Student>, Failure> {
    match (path, mode) {
        (Some(p), _) => {
            let f = fs::File::open(&p).with_context(|| format!("opening {}", p.display()))?;
            let s = Student::read_checkpoint(std::io::BufReader::new(f)).context("reading student checkpoint")?;
            Ok(Some(s))
        }
        (None, FeatureMode::Distilled) => Err(Failure::Usage("distilled mode needs a student checkpoint".into())),
        (None, FeatureMode::Deterministic) => Ok(None),
    }
}

fn load_db_with_features(dir: &Path) -> Result<SceneDatabase, Failure> {
    let db = SceneDatabase::load(&dir.join(DB_DIR)).context("loading database")?;
    if !db.has_features() {
        return Err(Failure::Data(anyhow::anyhow!("database has no features; run `vl build-db` first")));
    }
    Ok(db)
}

fn db_intrinsics(db: &SceneDatabase) -> anyhow::Result<Intrinsics> {
    match db.keyframes().first() {
        Some(kf) => Ok(kf.intrinsics),
        None => bail!("database is empty"),
    }
}

fn synth_cmd(cfg: &RunConfig, out: &Path) -> Result<(), Failure> {
    let scene = synth::generate_scene(&cfg.synth).map_err(|e| match e {
        synth::SynthError::InvalidParams(m) => Failure::Usage(m),
        e => Failure::Data(e.into()),
    })?;
    let db = scene.to_database().context("building database")?;
    db.save(&out.join(DB_DIR)).context("saving database")?;
    let qdir = out.join(QUERY_DIR);
    fs::create_dir_all(&qdir).with_context(|| format!("creating {}", qdir.display()))?;
    let mut gts = Vec::with_capacity(scene.queries.len());
    for (i, q) in scene.queries.iter().enumerate() {
        let path = qdir.join(format!("{i:04}.ppm"));
        let f = fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?;
        q.image.write_ppm(BufWriter::new(f)).context("writing query image")?;
        gts.push((i as u32, q.pose));
    }
    fs::write(out.join(GT_FILE), eval::write_ground_truth_csv(&gts)).context("writing ground truth")?;
    let params = toml::to_string(&cfg.synth).context("serializing scene parameters")?;
    fs::write(out.join("scene.toml"), params).context("writing scene parameters")?;
    println!(
        "{} keyframes, {} queries in {}",
        scene.database.len(),
        scene.queries.len(),
        out.display()
    );
    Ok(())
}

/// Query images of a scene directory, by numeric id.
fn read_queries(dir: &Path) -> anyhow::Result<Vec<(u32, RgbImage)>> {
    let qdir = dir.join(QUERY_DIR);
    let mut out = Vec::new();
    for entry in fs::read_dir(&qdir).with_context(|| format!("listing {}", qdir.display()))? {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("ppm") {
            continue;
        }
        let Some(id) = path.file_stem().and_then(|s| s.to_str()).and_then(|s| s.parse::<u32>().ok()) else {
            continue;
        };
        let f = fs::File::open(&path).with_context(|| format!("opening {}", path.display()))?;
        let img = RgbImage::read_ppm(std::io::BufReader::new(f)).with_context(|| format!("reading {}", path.display()))?;
        out.push((id, img));
    }
    out.sort_by_key(|(id, _)| *id);
    Ok(out)
}

fn localize_cmd(cfg: &RunConfig, dir: &Path, out: &Path, no_augment: bool, student: Option<PathBuf>) -> Result<(), Failure> {
    let needs_student = cfg.augmentation.mode == FeatureMode::Distilled || cfg.localize.refine.mode == FeatureMode::Distilled;
    let mode = if needs_student { FeatureMode::Distilled } else { FeatureMode::Deterministic };
    let student = load_student(student.or(cfg.student.clone()), mode)?;
    let db = load_db_with_features(dir)?;
    let k = db_intrinsics(&db)?;
    let index_path = dir.join(INDEX_FILE);
    let index = if no_augment || !index_path.exists() {
        pipeline::build_real_index(&db, cfg.augmentation.whiten_keep).context("building index")?
    } else {
        let f = fs::File::open(&index_path).with_context(|| format!("opening {}", index_path.display()))?;
        RetrievalIndex::read_from(std::io::BufReader::new(f)).context("reading index")?
    };
    let store = if index.num_virtual() > 0 {
        Some(
            pipeline::restore_virtual_store(&db, &index, &k, &cfg.augmentation, cfg.features.gem_p, student.as_ref())
                .context("re-rendering virtual views")?,
        )
    } else {
        None
    };
    let queries = read_queries(dir)?;
    if queries.is_empty() {
        return Err(Failure::Data(anyhow::anyhow!("no query images in {}", dir.join(QUERY_DIR).display())));
    }
    let loc = Localizer {
        db: &db,
        index: &index,
        store: store.as_ref(),
        student: student.as_ref(),
        params: &cfg.localize,
    };
    let refs: Vec<(u32, &RgbImage)> = queries.iter().map(|(id, img)| (*id, img)).collect();
    let results = loc.localize_batch(&refs, &k);
    let f = fs::File::create(out).with_context(|| format!("creating {}", out.display()))?;
    pipeline::write_results_jsonl(BufWriter::new(f), &results).context("writing results")?;
    let ok = results.iter().filter(|r| r.final_estimate().is_ok()).count();
    println!("{ok} of {} queries localized, results in {}", results.len(), out.display());
    Ok(())
}

fn distill_cmd(cfg: &RunConfig, dir: &Path, out: &Path) -> Result<(), Failure> {
    let db = load_db_with_features(dir)?;
    let k = db_intrinsics(&db)?;
    let mut pairs = Vec::new();
    for kf in db.keyframes() {
        let teacher = kf.features.as_ref().expect("checked above");
        // the target keyframe never sources its own input
        match distill::make_training_pair(&db, &kf.pose, &k, teacher, Some(kf.id), &cfg.pairs) {
            Ok(p) if p.input.num_masked() > 0 => pairs.push(p),
            Ok(_) | Err(distill::DistillError::NoOverlap) | Err(distill::DistillError::View(_)) => {}
            Err(e) => return Err(Failure::Data(e.into())),
        }
    }
    if pairs.is_empty() {
        return Err(Failure::Data(anyhow::anyhow!("no training pairs could be rendered")));
    }
    let n = pairs[0].target_local.nrows();
    let m = pairs[0].target_global.len();
    let mut student = Student::random(n, m, cfg.hidden, cfg.seed);
    student.init_heads_least_squares(&pairs, 1e-3).context("fitting output layers")?;
    let (trained, history) = distill::train(&student, &pairs, &cfg.train).context("training")?;
    let f = fs::File::create(out).with_context(|| format!("creating {}", out.display()))?;
    trained.write_checkpoint(BufWriter::new(f)).context("writing checkpoint")?;
    let hist = out.with_extension("csv");
    let f = fs::File::create(&hist).with_context(|| format!("creating {}", hist.display()))?;
    distill::write_history_csv(BufWriter::new(f), &history).context("writing history")?;
    let (first, last) = (history.first().unwrap(), history.last().unwrap());
    println!(
        "{} pairs, {} steps, loss {:.4} -> {:.4}, checkpoint {}",
        pairs.len(),
        history.len(),
        first.loss_g + cfg.train.lambda * first.loss_l,
        last.loss_g + cfg.train.lambda * last.loss_l,
        out.display()
    );
    Ok(())
}
