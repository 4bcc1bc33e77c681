//! Self-supervised data collection and dataset storage.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::contact::{close_gripper, guarded_move, is_inserted, open_gripper, DEFAULT_STEP, FORCE_LIMIT};
use crate::error::{Error, Result};
use crate::geometry::Pose;
use crate::refine::{linspace, refine_target, RefineGrid};
use crate::scene::{SceneConfig, SimState};
use crate::sensors::{capture_filtered, render_camera, Image};

const MM: f64 = 1e-3;

/// Grasp-offset sampling ranges shared by both collection stages.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GraspRanges {
    pub x: (f64, f64),
    pub z: (f64, f64),
    pub beta: (f64, f64),
}

impl Default for GraspRanges {
    fn default() -> Self {
        Self { x: (-3.0 * MM, 3.0 * MM), z: (-8.0 * MM, -2.0 * MM), beta: (-PI / 15.0, PI / 15.0) }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentParams {
    pub ranges: GraspRanges,
    /// Uniform draws per axis (x, z, beta); offsets are their product.
    pub counts: (usize, usize, usize),
    pub captures_per_offset: usize,
    pub median_n: usize,
}

impl Default for AlignmentParams {
    fn default() -> Self {
        Self { ranges: GraspRanges::default(), counts: (5, 10, 20), captures_per_offset: 2, median_n: 5 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InsertionParams {
    pub ranges: GraspRanges,
    /// Grid points per axis (x, z, beta) for the grasps.
    pub grasp_counts: (usize, usize, usize),
    /// Grid points per axis (x, y, up) for gripper offsets above the unplug pose.
    pub offset_counts: (usize, usize, usize),
    pub lateral_half_range: f64,
    pub up_range: f64,
    pub beta_max: f64,
    /// Per-grasp refinement grid; `None` reuses the given target unchanged.
    pub per_grasp_refine: Option<RefineGrid>,
}

impl Default for InsertionParams {
    fn default() -> Self {
        Self {
            ranges: GraspRanges::default(),
            grasp_counts: (5, 5, 5),
            offset_counts: (5, 5, 5),
            lateral_half_range: 5.0 * MM,
            up_range: 5.0 * MM,
            beta_max: PI / 15.0,
            per_grasp_refine: Some(RefineGrid::default()),
        }
    }
}

impl InsertionParams {
    pub fn grasps(&self) -> Vec<Pose> {
        let r = &self.ranges;
        let (nx, nz, nb) = self.grasp_counts;
        let mut out = Vec::new();
        for x in linspace(r.x.0, r.x.1, nx) {
            for z in linspace(r.z.0, r.z.1, nz) {
                for b in linspace(r.beta.0, r.beta.1, nb) {
                    out.push(Pose::new(x, 0.0, z, b, 0.0));
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentRecord {
    pub tactile: Image,
    /// Commanded grasp offset `(x, z, beta)`.
    pub label: [f64; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct InsertionRecord {
    pub camera: Image,
    /// Gripper `(beta, x, y)` relative to the part frame at the grasp's
    /// refined target.
    pub pose_feats: [f64; 3],
    /// `(dx, dy, dbeta)` from the gripper pose to the unplug pose.
    pub label: [f64; 3],
    pub grasp: usize,
    /// 0: no extra rotation, 1: negative draw, 2: positive draw.
    pub variant: usize,
    pub gripper_pose: Pose,
    pub unplug_pose: Pose,
}

/// Safety counters over a collection run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SafetyLog {
    /// Largest force component seen in any collection or refinement motion.
    pub peak_force: f64,
    /// Collection motions (regrasp, unplug, visits, re-insertion) stopped by
    /// the guard. Refinement probes that are blocked on approach are a
    /// normal part of the grid search and are not counted here.
    pub guard_trips: usize,
    pub failures: Vec<(usize, String)>,
}

/// Stratified uniform draws: one uniform sample in each of `n` equal-width
/// strata, so a handful of draws still spans the range.
pub fn stratified_draws(rng: &mut ChaCha8Rng, range: (f64, f64), n: usize) -> Vec<f64> {
    let w = (range.1 - range.0) / n as f64;
    (0..n).map(|k| range.0 + w * (k as f64 + rng.random::<f64>())).collect()
}

fn regrasp(scene: &SceneConfig, state: &mut SimState, gripper_pose: Pose) {
    open_gripper(state);
    // an open gripper carries nothing, so the move is unobstructed
    state.gripper_pose = gripper_pose;
    close_gripper(scene, state);
}

/// Alignment collection. The part stays seated; for each sampled offset the
/// gripper opens, moves to `t ∘ offset⁻¹`, closes with the configured grip
/// force, and records median-filtered tactile captures labelled with the
/// commanded offset.
pub fn collect_alignment(
    scene: &SceneConfig,
    state: &mut SimState,
    t: &Pose,
    seed: u64,
    p: &AlignmentParams,
) -> Result<Vec<AlignmentRecord>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xs = stratified_draws(&mut rng, p.ranges.x, p.counts.0);
    let zs = stratified_draws(&mut rng, p.ranges.z, p.counts.1);
    let bs = stratified_draws(&mut rng, p.ranges.beta, p.counts.2);
    let mut noise = ChaCha8Rng::seed_from_u64(seed);
    noise.set_stream(1);
    let mut out = Vec::with_capacity(xs.len() * zs.len() * bs.len() * p.captures_per_offset);
    for &x in &xs {
        for &z in &zs {
            for &b in &bs {
                let o = Pose::new(x, 0.0, z, b, 0.0);
                regrasp(scene, state, t.compose(&o.inverse()));
                for _ in 0..p.captures_per_offset {
                    let img = capture_filtered(scene, &state.grasp_offset, &mut noise, p.median_n)?;
                    out.push(AlignmentRecord { tactile: img, label: [x, z, b] });
                }
            }
        }
    }
    open_gripper(state);
    Ok(out)
}

/// Pose features of a gripper pose relative to a reference frame.
pub fn pose_features(reference: &Pose, gripper: &Pose) -> [f64; 3] {
    let rel = reference.inverse().compose(gripper);
    [rel.beta(), rel.x(), rel.y()]
}

/// The `(up / up_range) · U[lo, hi]` rotation law.
pub fn scaled_rotation(rng: &mut ChaCha8Rng, up: f64, up_range: f64, lo: f64, hi: f64) -> f64 {
    let u: f64 = rng.random_range(lo..=hi);
    (up / up_range) * u
}

/// Result of one grasp cycle.
#[derive(Clone, Debug, PartialEq)]
pub struct CycleOutcome {
    pub refined: Pose,
    pub unplug: Pose,
    pub reinserted: bool,
}

/// One grasp cycle: grasp the seated part at `t ∘ g⁻¹`, refine (optional),
/// unplug by `z_min`, optionally visit the offset grid recording camera
/// samples, return to the unplug pose, re-insert with a guarded descent and
/// release. A failed re-insertion is logged and the part is reseated by
/// hand so the run can continue.
#[allow(clippy::too_many_arguments)]
pub fn grasp_cycle(
    scene: &SceneConfig,
    state: &mut SimState,
    t: &Pose,
    grasp_index: usize,
    g: &Pose,
    z_min: f64,
    p: &InsertionParams,
    seed: u64,
    visit: bool,
    log: &mut SafetyLog,
    sink: &mut dyn FnMut(InsertionRecord) -> Result<()>,
) -> Result<CycleOutcome> {
    let nominal = t.compose(&g.inverse());
    regrasp(scene, state, nominal);
    let refined = match &p.per_grasp_refine {
        Some(grid) => {
            let out = refine_target(scene, state, &nominal, grid)?;
            log.peak_force = log.peak_force.max(out.peak_force);
            out.pose
        }
        None => nominal,
    };
    let unplug = refined.shifted(0.0, 0.0, z_min);
    // F_h for this grasp: the part frame at the refined target
    let part_target = refined.compose(g);
    let go = |state: &mut SimState, target: Pose, what: &str, log: &mut SafetyLog| -> bool {
        let r = guarded_move(scene, state, target, FORCE_LIMIT, DEFAULT_STEP);
        log.peak_force = log.peak_force.max(r.peak_force);
        if r.halted_by_force {
            log.guard_trips += 1;
            log.failures.push((grasp_index, what.to_string()));
        }
        !r.halted_by_force
    };
    if !go(state, unplug, "unplug", log) {
        reseat(scene, state);
        return Ok(CycleOutcome { refined, unplug, reinserted: false });
    }
    if visit {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(100 + grasp_index as u64);
        let (nx, ny, nz) = p.offset_counts;
        let h = p.lateral_half_range;
        for dx in linspace(-h, h, nx) {
            for dy in linspace(-h, h, ny) {
                for up in linspace(0.0, p.up_range, nz) {
                    let lifted = unplug.shifted(dx, dy, up);
                    let betas = [
                        0.0,
                        scaled_rotation(&mut rng, up, p.up_range, -p.beta_max, 0.0),
                        scaled_rotation(&mut rng, up, p.up_range, 0.0, p.beta_max),
                    ];
                    for (variant, &b) in betas.iter().enumerate() {
                        let pose = lifted.compose(&Pose::rotate_y(b));
                        if !go(state, pose, "visit", log) {
                            continue;
                        }
                        let part = state.part_world();
                        let img = render_camera(scene, &pose, Some(&part), &mut rng);
                        sink(InsertionRecord {
                            camera: img,
                            pose_feats: pose_features(&part_target, &pose),
                            label: [unplug.x() - pose.x(), unplug.y() - pose.y(), -b],
                            grasp: grasp_index,
                            variant,
                            gripper_pose: pose,
                            unplug_pose: unplug,
                        })?;
                    }
                }
            }
        }
        if !go(state, unplug, "return to unplug pose", log) {
            reseat(scene, state);
            return Ok(CycleOutcome { refined, unplug, reinserted: false });
        }
    } else {
        // the same clearance from the slot as the highest visit, without images
        let cleared = go(state, unplug.shifted(0.0, 0.0, p.up_range), "lift", log) && go(state, unplug, "return to unplug pose", log);
        if !cleared {
            reseat(scene, state);
            return Ok(CycleOutcome { refined, unplug, reinserted: false });
        }
    }
    let mut ok = go(state, refined, "re-insertion", log);
    if ok && !is_inserted(scene, state) {
        log.failures.push((grasp_index, "not inserted after descent".to_string()));
        ok = false;
    }
    if ok {
        open_gripper(state);
    } else {
        reseat(scene, state);
    }
    Ok(CycleOutcome { refined, unplug, reinserted: ok })
}

/// Manual reset after a failure: the part is put back on its seat.
fn reseat(scene: &SceneConfig, state: &mut SimState) {
    open_gripper(state);
    state.resting_part = scene.seated_part_pose();
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct InsertionSummary {
    pub grasps: usize,
    pub records: usize,
    pub refined_targets: Vec<Pose>,
    pub safety: SafetyLog,
}

/// Insertion collection over the grasp grid. Records are streamed to `sink`
/// in grasp order.
pub fn collect_insertion(
    scene: &SceneConfig,
    state: &mut SimState,
    t: &Pose,
    z_min: f64,
    seed: u64,
    p: &InsertionParams,
    sink: &mut dyn FnMut(InsertionRecord) -> Result<()>,
) -> Result<InsertionSummary> {
    let mut summary = InsertionSummary::default();
    let mut count = 0usize;
    for (k, g) in p.grasps().iter().enumerate() {
        let mut counting = |r: InsertionRecord| {
            count += 1;
            sink(r)
        };
        let out = grasp_cycle(scene, state, t, k, g, z_min, p, seed, true, &mut summary.safety, &mut counting)?;
        summary.refined_targets.push(out.refined);
        summary.grasps += 1;
    }
    summary.records = count;
    Ok(summary)
}

// ---------------------------------------------------------------------------
// storage

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Alignment,
    Insertion,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub kind: DatasetKind,
    pub count: usize,
    pub scene_hash: String,
    pub seed: u64,
    pub ranges: BTreeMap<String, [f64; 2]>,
    pub feature_count: usize,
    pub files: Vec<String>,
}

/// Generic stored record.
#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub grasp: usize,
    pub variant: usize,
    pub label: [f64; 3],
    pub pose_feats: Vec<f64>,
    pub image: Image,
}

impl From<AlignmentRecord> for Record {
    fn from(r: AlignmentRecord) -> Self {
        Record { grasp: 0, variant: 0, label: r.label, pose_feats: Vec::new(), image: r.tactile }
    }
}

impl From<InsertionRecord> for Record {
    fn from(r: InsertionRecord) -> Self {
        Record { grasp: r.grasp, variant: r.variant, label: r.label, pose_feats: r.pose_feats.to_vec(), image: r.camera }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub records: Vec<Record>,
}

pub fn alignment_ranges(p: &AlignmentParams) -> BTreeMap<String, [f64; 2]> {
    let r = &p.ranges;
    BTreeMap::from([
        ("x".to_string(), [r.x.0, r.x.1]),
        ("z".to_string(), [r.z.0, r.z.1]),
        ("beta".to_string(), [r.beta.0, r.beta.1]),
    ])
}

pub fn insertion_ranges(p: &InsertionParams) -> BTreeMap<String, [f64; 2]> {
    let r = &p.ranges;
    BTreeMap::from([
        ("grasp_x".to_string(), [r.x.0, r.x.1]),
        ("grasp_z".to_string(), [r.z.0, r.z.1]),
        ("grasp_beta".to_string(), [r.beta.0, r.beta.1]),
        ("offset_x".to_string(), [-p.lateral_half_range, p.lateral_half_range]),
        ("offset_y".to_string(), [-p.lateral_half_range, p.lateral_half_range]),
        ("offset_up".to_string(), [0.0, p.up_range]),
        ("extra_beta".to_string(), [-p.beta_max, p.beta_max]),
    ])
}

fn image_name(i: usize) -> String {
    format!("images/{i:06}.img")
}

fn csv_header(feature_count: usize) -> Vec<String> {
    let mut h: Vec<String> = ["index", "grasp", "variant", "label_0", "label_1", "label_2"].iter().map(|s| s.to_string()).collect();
    h.extend((0..feature_count).map(|k| format!("feat_{k}")));
    h.push("image".to_string());
    h
}

/// Streams records to disk (when given a directory) while hashing exactly
/// the bytes that are written, so the digest of an unsaved dataset equals
/// the digest of the saved one.
pub struct DatasetWriter {
    dir: Option<PathBuf>,
    manifest: DatasetManifest,
    csv: csv::Writer<Vec<u8>>,
    image_hasher: Sha256,
}

impl DatasetWriter {
    pub fn new(
        dir: Option<&Path>,
        kind: DatasetKind,
        scene_hash: &str,
        seed: u64,
        ranges: BTreeMap<String, [f64; 2]>,
        feature_count: usize,
    ) -> Result<Self> {
        if let Some(d) = dir {
            let images = d.join("images");
            std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
        }
        let mut csv = csv::Writer::from_writer(Vec::new());
        csv.write_record(csv_header(feature_count)).map_err(|e| Error::Dataset(e.to_string()))?;
        Ok(Self {
            dir: dir.map(Path::to_path_buf),
            manifest: DatasetManifest {
                kind,
                count: 0,
                scene_hash: scene_hash.to_string(),
                seed,
                ranges,
                feature_count,
                files: Vec::new(),
            },
            csv,
            image_hasher: Sha256::new(),
        })
    }

    pub fn push(&mut self, r: &Record) -> Result<()> {
        if r.pose_feats.len() != self.manifest.feature_count {
            return Err(Error::Dataset("record feature count differs from the dataset".into()));
        }
        let i = self.manifest.count;
        let name = image_name(i);
        let bytes = r.image.to_bytes();
        self.image_hasher.update(&bytes);
        if let Some(d) = &self.dir {
            let path = d.join(&name);
            std::fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
        }
        let mut row = vec![i.to_string(), r.grasp.to_string(), r.variant.to_string()];
        row.extend(r.label.iter().map(|v| v.to_string()));
        row.extend(r.pose_feats.iter().map(|v| v.to_string()));
        row.push(name.clone());
        self.csv.write_record(&row).map_err(|e| Error::Dataset(e.to_string()))?;
        self.manifest.files.push(name);
        self.manifest.count += 1;
        Ok(())
    }

    /// Writes manifest and CSV (when saving) and returns the digest.
    pub fn finish(self) -> Result<(DatasetManifest, String)> {
        let csv_bytes = self.csv.into_inner().map_err(|e| Error::Dataset(e.to_string()))?;
        let manifest_text = serde_json::to_string_pretty(&self.manifest).map_err(|e| Error::Dataset(e.to_string()))?;
        if let Some(d) = &self.dir {
            let m = d.join("manifest.json");
            std::fs::write(&m, &manifest_text).map_err(|e| Error::io(&m, e))?;
            let c = d.join("records.csv");
            std::fs::write(&c, &csv_bytes).map_err(|e| Error::io(&c, e))?;
        }
        let digest = combine_digest(manifest_text.as_bytes(), &csv_bytes, self.image_hasher.finalize().as_slice());
        Ok((self.manifest, digest))
    }
}

fn combine_digest(manifest: &[u8], csv: &[u8], images_digest: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(Sha256::digest(manifest));
    h.update(Sha256::digest(csv));
    h.update(images_digest);
    hex::encode(h.finalize())
}

pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<String> {
    let m = &ds.manifest;
    let mut w = DatasetWriter::new(Some(dir), m.kind, &m.scene_hash, m.seed, m.ranges.clone(), m.feature_count)?;
    for r in &ds.records {
        w.push(r)?;
    }
    Ok(w.finish()?.1)
}

/// Digest of a saved dataset directory, computed the same way as
/// [`DatasetWriter::finish`].
pub fn dataset_digest(dir: &Path) -> Result<String> {
    let read = |p: PathBuf| std::fs::read(&p).map_err(|e| Error::io(&p, e));
    let manifest = read(dir.join("manifest.json"))?;
    let csv = read(dir.join("records.csv"))?;
    let m: DatasetManifest = serde_json::from_slice(&manifest).map_err(|e| Error::Dataset(format!("corrupt manifest: {e}")))?;
    let mut h = Sha256::new();
    for f in &m.files {
        h.update(read(dir.join(f))?);
    }
    Ok(combine_digest(&manifest, &csv, h.finalize().as_slice()))
}

pub fn load_dataset(dir: &Path, expected_scene_hash: Option<&str>) -> Result<Dataset> {
    let mut records = Vec::new();
    let manifest = visit_dataset(dir, expected_scene_hash, &mut |r| {
        records.push(r);
        Ok(())
    })?;
    Ok(Dataset { manifest, records })
}

/// Reads a dataset record by record without holding all images in memory.
pub fn visit_dataset(
    dir: &Path,
    expected_scene_hash: Option<&str>,
    f: &mut dyn FnMut(Record) -> Result<()>,
) -> Result<DatasetManifest> {
    let mpath = dir.join("manifest.json");
    let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| Error::Dataset(format!("corrupt manifest {}: {e}", mpath.display())))?;
    if manifest.count != manifest.files.len() {
        return Err(Error::Dataset(format!("manifest count {} but {} files listed", manifest.count, manifest.files.len())));
    }
    if let Some(h) = expected_scene_hash {
        if h != manifest.scene_hash {
            return Err(Error::Dataset(format!("scene hash {} does not match {}", manifest.scene_hash, h)));
        }
    }
    let cpath = dir.join("records.csv");
    let mut rdr = csv::Reader::from_path(&cpath).map_err(|e| Error::Dataset(format!("{}: {e}", cpath.display())))?;
    let fc = manifest.feature_count;
    let mut n = 0usize;
    for (i, row) in rdr.records().enumerate() {
        let row = row.map_err(|e| Error::Dataset(format!("{}: {e}", cpath.display())))?;
        if row.len() != 7 + fc {
            return Err(Error::Dataset(format!("row {i}: expected {} fields", 7 + fc)));
        }
        let num = |k: usize| -> Result<f64> {
            row[k].parse().map_err(|e| Error::Dataset(format!("row {i} field {k}: {e}")))
        };
        let int = |k: usize| -> Result<usize> {
            row[k].parse().map_err(|e| Error::Dataset(format!("row {i} field {k}: {e}")))
        };
        let name = &row[6 + fc];
        if manifest.files.get(i).map(String::as_str) != Some(name) {
            return Err(Error::Dataset(format!("row {i}: image {name} not in manifest order")));
        }
        f(Record {
            grasp: int(1)?,
            variant: int(2)?,
            label: [num(3)?, num(4)?, num(5)?],
            pose_feats: (0..fc).map(|k| num(6 + k)).collect::<Result<_>>()?,
            image: Image::load(&dir.join(name))?,
        })?;
        n += 1;
    }
    if n != manifest.count {
        return Err(Error::Dataset(format!("manifest count {} but {n} rows", manifest.count)));
    }
    Ok(manifest)
}
