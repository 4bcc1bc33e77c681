//! End-to-end runs: demonstration refinement, both collection stages,
//! training and the benchmark suites.

use std::path::{Path, PathBuf};
use std::time::Instant;

use sha2::{Digest, Sha256};

use crate::bench::{bench_ablation_ft, bench_ablation_modality, bench_main, bench_tactile, BenchReport, DemoError};
use crate::collect::{
    alignment_ranges, collect_alignment, collect_insertion, insertion_ranges, AlignmentParams, AlignmentRecord,
    DatasetKind, DatasetWriter, InsertionParams, InsertionRecord, InsertionSummary, Record,
};
use crate::contact::close_gripper;
use crate::error::Result;
use crate::exec::{ExecParams, LearnedTactile, LearnedVision, OracleTactile, OracleVision};
use crate::geometry::Pose;
use crate::learn::{tactile_train_set, train, Model, RegressorSpec, TrainConfig, TrainReport, TrainSet, TACTILE_SHIFTS};
use crate::refine::{find_zmin, refine_target, RefineGrid, ZminOutcome, ZminParams};
use crate::scene::{SceneConfig, SimState};

/// Median filter length for tactile captures.
pub const MEDIAN_N: usize = 5;

#[derive(Clone, Debug)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Directory for datasets, models and reports; nothing is written when
    /// unset.
    pub out: Option<PathBuf>,
    pub alignment: AlignmentParams,
    pub insertion: InsertionParams,
    pub tactile_epochs: usize,
    pub vision_epochs: usize,
    pub exec: ExecParams,
    pub ft_trials: usize,
    pub modality_noise: f64,
    pub vision_all_data_arm: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: None,
            alignment: AlignmentParams::default(),
            insertion: InsertionParams::default(),
            tactile_epochs: 30,
            vision_epochs: 30,
            exec: ExecParams::default(),
            ft_trials: 3,
            modality_noise: 1e-3,
            vision_all_data_arm: false,
        }
    }
}

/// Demonstration with the exact seated pose, its refinement and the
/// unplug height.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Demo {
    pub t_refined: Pose,
    pub z_min: ZminOutcome,
    pub peak_force: f64,
}

pub fn run_demo(scene: &SceneConfig) -> Result<Demo> {
    let t = scene.seated_part_pose();
    let mut state = SimState::grasped(t, Pose::identity());
    close_gripper(scene, &mut state);
    let r = refine_target(scene, &mut state, &t, &RefineGrid::default())?;
    let z = find_zmin(scene, &mut state, &r.pose, &ZminParams::default())?;
    Ok(Demo { t_refined: r.pose, z_min: z, peak_force: r.peak_force.max(z.peak_force) })
}

/// State with the part seated and the gripper open at `t`.
pub fn seated_state(scene: &SceneConfig, t: &Pose) -> SimState {
    let mut s = SimState::grasped(*t, Pose::identity());
    s.gripper_closed = false;
    s.resting_part = scene.seated_part_pose();
    s
}

fn sub(out: &Option<PathBuf>, name: &str) -> Option<PathBuf> {
    out.as_ref().map(|d| d.join(name))
}

pub fn run_alignment_collection(
    scene: &SceneConfig,
    t: &Pose,
    seed: u64,
    p: &AlignmentParams,
    dir: Option<&Path>,
) -> Result<(Vec<AlignmentRecord>, String)> {
    let mut state = seated_state(scene, t);
    let recs = collect_alignment(scene, &mut state, t, seed, p)?;
    let mut w = DatasetWriter::new(dir, DatasetKind::Alignment, &scene.hash(), seed, alignment_ranges(p), 0)?;
    for r in &recs {
        w.push(&Record::from(r.clone()))?;
    }
    Ok((recs, w.finish()?.1))
}

pub struct VisionSets {
    pub full: TrainSet,
    pub no_rotation: TrainSet,
}

pub fn vision_spec(scene: &SceneConfig, pose_features: usize) -> RegressorSpec {
    RegressorSpec::vision(scene.camera_resolution.0, scene.camera_resolution.1, pose_features)
}

/// Adds one insertion record to the vision training sets. The
/// no-rotation set keeps only unrotated samples and only the tilt feature.
pub fn push_vision(sets: &mut VisionSets, spec: &RegressorSpec, rec: &Record) -> Result<()> {
    let x = spec.prepare(&rec.image)?;
    if rec.variant == 0 {
        sets.no_rotation.push(&x, vec![rec.pose_feats[0]], rec.label);
    }
    sets.full.push(&x, rec.pose_feats.clone(), rec.label);
    Ok(())
}

pub fn run_insertion_collection(
    scene: &SceneConfig,
    t: &Pose,
    z_min: f64,
    seed: u64,
    p: &InsertionParams,
    dir: Option<&Path>,
) -> Result<(VisionSets, InsertionSummary, String)> {
    let spec = vision_spec(scene, 3);
    let mut sets = VisionSets { full: TrainSet::new(spec.input_dim()), no_rotation: TrainSet::new(spec.input_dim()) };
    let mut w = DatasetWriter::new(dir, DatasetKind::Insertion, &scene.hash(), seed, insertion_ranges(p), 3)?;
    let mut state = seated_state(scene, t);
    let summary = collect_insertion(scene, &mut state, t, z_min, seed, p, &mut |r: InsertionRecord| {
        let rec = Record::from(r);
        push_vision(&mut sets, &spec, &rec)?;
        w.push(&rec)
    })?;
    Ok((sets, summary, w.finish()?.1))
}

pub fn train_tactile(scene: &SceneConfig, records: &[(crate::sensors::Image, [f64; 3])], seed: u64, epochs: usize) -> Result<(Model, TrainReport)> {
    let spec = RegressorSpec::tactile(scene.tactile_resolution.0, scene.tactile_resolution.1);
    let set = tactile_train_set(scene, &spec, records, TACTILE_SHIFTS)?;
    train(&set, &spec, &TrainConfig { epochs, seed, ..Default::default() })
}

pub fn train_vision(scene: &SceneConfig, set: &TrainSet, pose_features: usize, seed: u64, epochs: usize) -> Result<(Model, TrainReport)> {
    train(set, &vision_spec(scene, pose_features), &TrainConfig { epochs, seed, ..Default::default() })
}

pub fn model_digest(m: &Model) -> String {
    let mut h = Sha256::new();
    h.update(m.manifest_text().as_bytes());
    h.update(m.weight_bytes());
    hex::encode(h.finalize())
}

pub fn report_digest(r: &BenchReport) -> String {
    let text = serde_json::to_string(r).expect("report serialises");
    hex::encode(Sha256::digest(text.as_bytes()))
}

pub struct Models {
    pub tactile: Model,
    pub vision: Model,
    pub vision_no_rotation: Model,
}

impl Models {
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.tactile.save(&dir.join("tactile"))?;
        self.vision.save(&dir.join("vision"))?;
        self.vision_no_rotation.save(&dir.join("vision_no_rotation"))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        Ok(Self {
            tactile: Model::load(&dir.join("tactile"))?,
            vision: Model::load(&dir.join("vision"))?,
            vision_no_rotation: Model::load(&dir.join("vision_no_rotation"))?,
        })
    }
}

/// Extra demonstration whose jaw-axis error exceeds the clearance.
pub fn wide_demo(scene: &SceneConfig) -> DemoError {
    DemoError { dx: 0.0, dy: 2.0 * scene.receptacle_clearance, tilt: 0.0 }
}

/// Main suite (learned and oracle arms) plus tactile accuracy with and
/// without sensor noise.
pub fn run_main_suites(scene: &SceneConfig, models: &Models, demo: &Demo, seed: u64, p: &ExecParams) -> Result<BenchReport> {
    let z = demo.z_min.z_min;
    let t = demo.t_refined;
    let lt = LearnedTactile { model: &models.tactile, median_n: MEDIAN_N };
    let lv = LearnedVision { model: &models.vision };
    let mut rows = bench_main(scene, &lt, &lv, &t, z, p, "combined", seed)?;
    rows.extend(bench_main(scene, &OracleTactile, &OracleVision, &t, z, p, "oracle", seed)?);
    let mut quiet = scene.clone();
    quiet.noise_sigma_tactile = 0.0;
    Ok(BenchReport {
        seed,
        scene_hash: scene.hash(),
        rows,
        tactile: Some(bench_tactile(scene, &models.tactile, seed, MEDIAN_N)?),
        tactile_noiseless: Some(bench_tactile(&quiet, &models.tactile, seed, MEDIAN_N)?),
        ft: None,
    })
}

pub fn run_modality_suite(scene: &SceneConfig, models: &Models, demo: &Demo, cfg: &PipelineConfig) -> Result<Vec<crate::bench::EpisodeRow>> {
    let lt = LearnedTactile { model: &models.tactile, median_n: MEDIAN_N };
    let norot = LearnedVision { model: &models.vision_no_rotation };
    let full = LearnedVision { model: &models.vision };
    let extra: Option<&dyn crate::exec::InsertionPolicy> = if cfg.vision_all_data_arm { Some(&full) } else { None };
    bench_ablation_modality(scene, &lt, &norot, extra, &demo.t_refined, demo.z_min.z_min, &cfg.exec, cfg.modality_noise, cfg.seed)
}

pub struct PipelineOutput {
    pub demo: Demo,
    pub alignment_digest: String,
    pub alignment_count: usize,
    pub insertion_digest: String,
    pub insertion: InsertionSummary,
    pub models: Models,
    pub train_reports: [TrainReport; 3],
    pub report: BenchReport,
    pub timings: Vec<(String, f64)>,
}

impl PipelineOutput {
    pub fn model_digests(&self) -> [String; 3] {
        [model_digest(&self.models.tactile), model_digest(&self.models.vision), model_digest(&self.models.vision_no_rotation)]
    }
}

/// Full run from one seed: demo, collection, training and all suites.
pub fn run_pipeline(scene: &SceneConfig, cfg: &PipelineConfig) -> Result<PipelineOutput> {
    let mut timings = Vec::new();
    let mut clock = Instant::now();
    let mut lap = |name: &str, timings: &mut Vec<(String, f64)>| {
        timings.push((name.to_string(), clock.elapsed().as_secs_f64()));
        clock = Instant::now();
    };
    let demo = run_demo(scene)?;
    lap("demo", &mut timings);
    let (recs, alignment_digest) =
        run_alignment_collection(scene, &demo.t_refined, cfg.seed, &cfg.alignment, sub(&cfg.out, "alignment").as_deref())?;
    let alignment_count = recs.len();
    let pairs: Vec<_> = recs.into_iter().map(|r| (r.tactile, r.label)).collect();
    lap("collect-align", &mut timings);
    let (sets, insertion, insertion_digest) = run_insertion_collection(
        scene,
        &demo.t_refined,
        demo.z_min.z_min,
        cfg.seed,
        &cfg.insertion,
        sub(&cfg.out, "insertion").as_deref(),
    )?;
    lap("collect-insert", &mut timings);
    let (tactile, r_tac) = train_tactile(scene, &pairs, cfg.seed, cfg.tactile_epochs)?;
    drop(pairs);
    lap("train-tac", &mut timings);
    let (vision, r_vis) = train_vision(scene, &sets.full, 3, cfg.seed, cfg.vision_epochs)?;
    let (vision_no_rotation, r_nr) = train_vision(scene, &sets.no_rotation, 1, cfg.seed, cfg.vision_epochs)?;
    drop(sets);
    lap("train-vis", &mut timings);
    let models = Models { tactile, vision, vision_no_rotation };
    if let Some(d) = sub(&cfg.out, "models") {
        models.save(&d)?;
    }
    let mut report = run_main_suites(scene, &models, &demo, cfg.seed, &cfg.exec)?;
    lap("bench", &mut timings);
    report.ft = Some(bench_ablation_ft(scene, cfg.seed, cfg.ft_trials, &[wide_demo(scene)], demo.z_min.z_min, &RefineGrid::default())?);
    lap("ablate-ft", &mut timings);
    report.rows.extend(run_modality_suite(scene, &models, &demo, cfg)?);
    lap("ablate-modality", &mut timings);
    if let Some(d) = sub(&cfg.out, "report") {
        crate::bench::emit_report(&report, &d)?;
    }
    Ok(PipelineOutput {
        demo,
        alignment_digest,
        alignment_count,
        insertion_digest,
        insertion,
        models,
        train_reports: [r_tac, r_vis, r_nr],
        report,
        timings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::collect::dataset_digest;
    use crate::scene::default_scene;
    use crate::sensors::Image;

    #[test]
    fn demo_refines_near_the_seat_and_finds_zmin() {
        let scene = default_scene();
        let d = run_demo(&scene).unwrap();
        let seat = scene.seated_part_pose();
        assert!((d.t_refined.x() - seat.x()).abs() <= 0.5e-3 && (d.t_refined.y() - seat.y()).abs() <= 0.5e-3);
        let z = d.z_min.z_min;
        let dz = ZminParams::default().delta_z;
        assert!(z >= scene.insertion_depth - 1e-12 && z <= scene.insertion_depth + 2.0 * dz + 1e-12, "{z}");
    }

    #[test]
    fn alignment_digest_does_not_depend_on_saving() {
        let scene = default_scene();
        let t = scene.seated_part_pose();
        let p = AlignmentParams { counts: (2, 1, 2), median_n: 1, ..Default::default() };
        let dir = tempfile::tempdir().unwrap();
        let (a, da) = run_alignment_collection(&scene, &t, 2, &p, None).unwrap();
        let (b, db) = run_alignment_collection(&scene, &t, 2, &p, Some(dir.path())).unwrap();
        assert_eq!(a, b);
        assert_eq!(da, db);
        assert_eq!(dataset_digest(dir.path()).unwrap(), da);
        let (_, other) = run_alignment_collection(&scene, &t, 3, &p, None).unwrap();
        assert_ne!(other, da);
    }

    #[test]
    fn rotated_samples_only_train_the_full_model() {
        let scene = default_scene();
        let spec = vision_spec(&scene, 3);
        let mut sets = VisionSets { full: TrainSet::new(spec.input_dim()), no_rotation: TrainSet::new(spec.input_dim()) };
        let (w, h) = scene.camera_resolution;
        for variant in 0..3 {
            let rec = Record { grasp: 0, variant, label: [1e-3, 0.0, 0.0], pose_feats: vec![0.1, 0.2, 0.3], image: Image::filled(w, h, 0.5) };
            push_vision(&mut sets, &spec, &rec).unwrap();
        }
        assert_eq!((sets.full.len(), sets.no_rotation.len()), (3, 1));
        assert_eq!(sets.no_rotation.feats[0], vec![0.1]);
        assert_eq!(sets.full.feats[2].len(), 3);
    }

    #[test]
    fn models_survive_save_and_load() {
        let scene = default_scene();
        let (w, h) = scene.tactile_resolution;
        let recs: Vec<(Image, [f64; 3])> = (0..6).map(|i| (Image::filled(w, h, i as f32 / 10.0), [i as f64 * 1e-4, -4e-3, 0.0])).collect();
        let (tac, _) = train_tactile(&scene, &recs, 1, 1).unwrap();
        let spec = vision_spec(&scene, 1);
        let mut set = TrainSet::new(spec.input_dim());
        let (cw, ch) = scene.camera_resolution;
        for i in 0..4 {
            set.push(&spec.prepare(&Image::filled(cw, ch, i as f32 / 4.0)).unwrap(), vec![0.0], [0.0, 1e-3, 0.0]);
        }
        let (vis, _) = train_vision(&scene, &set, 1, 1, 1).unwrap();
        let models = Models { tactile: tac, vision: vis.clone(), vision_no_rotation: vis };
        let dir = tempfile::tempdir().unwrap();
        models.save(dir.path()).unwrap();
        let back = Models::load(dir.path()).unwrap();
        assert_eq!(model_digest(&back.tactile), model_digest(&models.tactile));
        assert_eq!(model_digest(&back.vision), model_digest(&models.vision));
        assert_ne!(model_digest(&back.tactile), model_digest(&back.vision));
    }
}
