//! Evaluation harness: the 45-grasp test suite, tactile accuracy, the
//! force-torque and modality ablations, and report files.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::collect::{grasp_cycle, InsertionParams, SafetyLog};
use crate::error::{Error, Result};
use crate::exec::{run_insertion, EpisodeResult, ExecParams, InsertionPolicy, Mode, TactilePolicy};
use crate::geometry::Pose;
use crate::learn::{predict_tac, Model};
use crate::refine::{linspace, refine_target, z_axis_align, RefineGrid};
use crate::scene::{SceneConfig, SimState};
use crate::sensors::capture_filtered;

const MM: f64 = 1e-3;

/// Height of the episode start pose above the align-phase goal (m).
pub const START_CLEARANCE: f64 = 5e-3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestGrasp {
    pub x: f64,
    pub z: f64,
    pub beta: f64,
}

impl TestGrasp {
    pub fn pose(&self) -> Pose {
        Pose::new(self.x, 0.0, self.z, self.beta, 0.0)
    }
}

/// 5 tilts in ±π/20, 3 x in ±3 mm, 3 z in [−6, −2] mm, tilt-major.
pub fn make_test_set() -> Vec<TestGrasp> {
    let mut out = Vec::with_capacity(45);
    for beta in linspace(-PI / 20.0, PI / 20.0, 5) {
        for x in linspace(-3.0 * MM, 3.0 * MM, 3) {
            for z in linspace(-6.0 * MM, -2.0 * MM, 3) {
                out.push(TestGrasp { x, z, beta });
            }
        }
    }
    out
}

/// State at the start of an episode: part held with offset `g`, gripper
/// above the receptacle.
pub fn episode_start(t: &Pose, z_min: f64, g: &Pose) -> SimState {
    SimState::grasped(t.shifted(0.0, 0.0, 2.0 * z_min + START_CLEARANCE), *g)
}

fn episode_rng(seed: u64, suite: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((suite << 32) | index as u64);
    rng
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRow {
    pub suite: String,
    pub arm: String,
    pub index: usize,
    pub grasp: TestGrasp,
    pub success: bool,
    pub attempts: usize,
    pub termination: String,
    pub final_distance: f64,
    pub peak_force: f64,
}

impl EpisodeRow {
    fn new(suite: &str, arm: &str, index: usize, grasp: TestGrasp, r: &EpisodeResult) -> Self {
        Self {
            suite: suite.into(),
            arm: arm.into(),
            index,
            grasp,
            success: r.success,
            attempts: r.attempts,
            termination: r.termination.as_str().into(),
            final_distance: r.final_distance,
            peak_force: r.peak_force,
        }
    }
}

/// Runs one arm over a set of grasps. `target_for` gives the target handed
/// to the policy for grasp `i` (the true target unless noise is injected).
#[allow(clippy::too_many_arguments)]
fn run_arm(
    scene: &SceneConfig,
    suite: &str,
    arm: &str,
    grasps: &[TestGrasp],
    tac: &dyn TactilePolicy,
    vis: &dyn InsertionPolicy,
    t: &Pose,
    target_for: &dyn Fn(usize) -> Pose,
    z_min: f64,
    p: &ExecParams,
    mode: Mode,
    seed: u64,
    suite_id: u64,
) -> Result<Vec<EpisodeRow>> {
    grasps
        .iter()
        .enumerate()
        .map(|(i, g)| {
            let mut state = episode_start(t, z_min, &g.pose());
            let mut rng = episode_rng(seed, suite_id, i);
            let target = target_for(i);
            let r = run_insertion(scene, &mut state, tac, vis, &target, z_min, p, mode, &mut rng)?;
            Ok(EpisodeRow::new(suite, arm, i, *g, &r))
        })
        .collect()
}

pub fn successes(rows: &[EpisodeRow]) -> usize {
    rows.iter().filter(|r| r.success).count()
}

/// Main suite: combined policy over the test grasps with the refined
/// target given.
#[allow(clippy::too_many_arguments)]
pub fn bench_main(
    scene: &SceneConfig,
    tac: &dyn TactilePolicy,
    vis: &dyn InsertionPolicy,
    t_refined: &Pose,
    z_min: f64,
    p: &ExecParams,
    arm: &str,
    seed: u64,
) -> Result<Vec<EpisodeRow>> {
    let grasps = make_test_set();
    run_arm(scene, "main", arm, &grasps, tac, vis, t_refined, &|_| *t_refined, z_min, p, Mode::Combined, seed, 1)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TactileStats {
    /// Mean absolute error for (x, z, beta).
    pub mae: [f64; 3],
    /// Standard deviation of the absolute error.
    pub std: [f64; 3],
    pub errors: Vec<[f64; 3]>,
}

/// Tactile accuracy over the test grasps: one median-filtered capture per
/// grasp.
pub fn bench_tactile(scene: &SceneConfig, model: &Model, seed: u64, median_n: usize) -> Result<TactileStats> {
    let grasps = make_test_set();
    let mut errors = Vec::with_capacity(grasps.len());
    for (i, g) in grasps.iter().enumerate() {
        let mut rng = episode_rng(seed, 2, i);
        let img = capture_filtered(scene, &g.pose(), &mut rng, median_n)?;
        let p = predict_tac(model, &img)?;
        errors.push([(p[0] - g.x).abs(), (p[1] - g.z).abs(), (p[2] - g.beta).abs()]);
    }
    let n = errors.len() as f64;
    let mut mae = [0.0; 3];
    let mut std = [0.0; 3];
    for k in 0..3 {
        mae[k] = errors.iter().map(|e| e[k]).sum::<f64>() / n;
        std[k] = (errors.iter().map(|e| (e[k] - mae[k]).powi(2)).sum::<f64>() / n).sqrt();
    }
    Ok(TactileStats { mae, std, errors })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FtMode {
    /// z-axis alignment of the demonstration only.
    Za,
    /// plus one force-torque refinement with the demonstration grasp.
    Zawf,
    /// plus a refinement for every grasp.
    Zawfg,
}

impl FtMode {
    pub const ALL: [FtMode; 3] = [FtMode::Za, FtMode::Zawf, FtMode::Zawfg];

    pub fn as_str(&self) -> &'static str {
        match self {
            FtMode::Za => "ZA",
            FtMode::Zawf => "ZAWF",
            FtMode::Zawfg => "ZAWFG",
        }
    }
}

/// Error of a simulated human demonstration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DemoError {
    pub dx: f64,
    pub dy: f64,
    pub tilt: f64,
}

impl DemoError {
    /// Uniform draw within ±1 mm lateral and ±1° tilt.
    pub fn draw(seed: u64, trial: usize) -> Self {
        let mut rng = episode_rng(seed, 4, trial);
        let t = PI / 180.0;
        Self {
            dx: rng.random_range(-MM..=MM),
            dy: rng.random_range(-MM..=MM),
            tilt: rng.random_range(-t..=t),
        }
    }

    /// Demonstrated gripper pose for the identity grasp.
    pub fn demo_pose(&self, scene: &SceneConfig) -> Pose {
        scene.seated_part_pose().compose(&Pose::rotate_y(self.tilt)).shifted(self.dx, self.dy, 0.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FtTrial {
    pub mode: FtMode,
    pub demo: DemoError,
    /// Consecutive successful re-insertions before the first failure.
    pub successes: usize,
    pub total: usize,
    pub peak_force: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FtTable {
    pub trials: Vec<FtTrial>,
}

impl FtTable {
    /// Mean success fraction and its standard error for one mode.
    pub fn mean_se(&self, mode: FtMode) -> (f64, f64) {
        let v: Vec<f64> =
            self.trials.iter().filter(|t| t.mode == mode).map(|t| t.successes as f64 / t.total.max(1) as f64).collect();
        if v.is_empty() {
            return (0.0, 0.0);
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let se = if v.len() > 1 { (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() / n.sqrt() } else { 0.0 };
        (mean, se)
    }
}

/// Re-insertion loop for one mode and one demonstration: grasp the seated
/// part at each grid grasp, lift by `z_min`, re-insert, release; stop at the
/// first failure.
pub fn ft_trial(scene: &SceneConfig, mode: FtMode, demo: &DemoError, z_min: f64, grid: &RefineGrid) -> Result<FtTrial> {
    let mut state = SimState::grasped(demo.demo_pose(scene), Pose::identity());
    state.gripper_closed = false;
    state.resting_part = scene.seated_part_pose();
    let t_za = z_axis_align(&demo.demo_pose(scene));
    let mut log = SafetyLog::default();
    let base = if mode == FtMode::Za {
        t_za
    } else {
        state.gripper_pose = t_za;
        crate::contact::close_gripper(scene, &mut state);
        let out = refine_target(scene, &mut state, &t_za, grid)?;
        log.peak_force = log.peak_force.max(out.peak_force);
        crate::contact::open_gripper(&mut state);
        out.pose
    };
    let p = InsertionParams {
        per_grasp_refine: if mode == FtMode::Zawfg { Some(grid.clone()) } else { None },
        ..InsertionParams::default()
    };
    let grasps = p.grasps();
    let mut successes = 0;
    for (k, g) in grasps.iter().enumerate() {
        let out = grasp_cycle(scene, &mut state, &base, k, g, z_min, &p, 0, false, &mut log, &mut |_| Ok(()))?;
        if !out.reinserted {
            break;
        }
        successes += 1;
    }
    Ok(FtTrial { mode, demo: *demo, successes, total: grasps.len(), peak_force: log.peak_force })
}

/// Three seeded demonstrations per mode, plus any extra demonstrations.
pub fn bench_ablation_ft(
    scene: &SceneConfig,
    seed: u64,
    trials: usize,
    extra_demos: &[DemoError],
    z_min: f64,
    grid: &RefineGrid,
) -> Result<FtTable> {
    let mut demos: Vec<DemoError> = (0..trials).map(|k| DemoError::draw(seed, k)).collect();
    demos.extend_from_slice(extra_demos);
    let mut table = FtTable::default();
    for mode in FtMode::ALL {
        for d in &demos {
            table.trials.push(ft_trial(scene, mode, d, z_min, grid)?);
        }
    }
    Ok(table)
}

/// Target handed to the policies in the modality ablation: the true target
/// with uniform ±`noise` on x and y.
pub fn noisy_target(t: &Pose, seed: u64, index: usize, noise: f64) -> Pose {
    let mut rng = episode_rng(seed, 5, index);
    let dx = rng.random_range(-noise..=noise);
    let dy = rng.random_range(-noise..=noise);
    t.shifted(dx, dy, 0.0)
}

/// Modality ablation under target noise. Arms: tactile only, vision only
/// with the no-rotation model, combined (tactile align, no-rotation vision
/// insert), and optionally vision only with the full model.
#[allow(clippy::too_many_arguments)]
pub fn bench_ablation_modality(
    scene: &SceneConfig,
    tac: &dyn TactilePolicy,
    vis_norot: &dyn InsertionPolicy,
    vis_full: Option<&dyn InsertionPolicy>,
    t: &Pose,
    z_min: f64,
    p: &ExecParams,
    noise: f64,
    seed: u64,
) -> Result<Vec<EpisodeRow>> {
    let grasps = make_test_set();
    let target = |i: usize| noisy_target(t, seed, i, noise);
    let mut rows = Vec::new();
    let arms: [(&str, &dyn InsertionPolicy, Mode); 3] = [
        ("tactile-only", vis_norot, Mode::TactileOnly),
        ("vision-only-no-rot", vis_norot, Mode::VisionOnly),
        ("combined", vis_norot, Mode::Combined),
    ];
    for (k, (arm, vis, mode)) in arms.into_iter().enumerate() {
        rows.extend(run_arm(scene, "modality", arm, &grasps, tac, vis, t, &target, z_min, p, mode, seed, 10 + k as u64)?);
    }
    if let Some(v) = vis_full {
        rows.extend(run_arm(scene, "modality", "vision-only-all-data", &grasps, tac, v, t, &target, z_min, p, Mode::VisionOnly, seed, 13)?);
    }
    Ok(rows)
}

/// Success rate of an arm on zero-tilt grasps and on tilted grasps.
pub fn rate_by_tilt(rows: &[EpisodeRow], arm: &str) -> (f64, f64) {
    let rate = |zero: bool| {
        let sel: Vec<&EpisodeRow> = rows.iter().filter(|r| r.arm == arm && (r.grasp.beta.abs() < 1e-12) == zero).collect();
        if sel.is_empty() {
            0.0
        } else {
            sel.iter().filter(|r| r.success).count() as f64 / sel.len() as f64
        }
    };
    (rate(true), rate(false))
}

// ---------------------------------------------------------------------------
// reports

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmCount {
    pub suite: String,
    pub arm: String,
    pub successes: usize,
    pub total: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LiteratureRow {
    pub method: String,
    pub successes: usize,
    pub total: usize,
    pub note: String,
}

pub fn literature_reference() -> Vec<LiteratureRow> {
    let note = "literature reference value, not reproduced in simulation".to_string();
    vec![
        LiteratureRow { method: "IL (behaviour cloning, 50 demos)".into(), successes: 1, total: 45, note: note.clone() },
        LiteratureRow { method: "TD3 (online RL)".into(), successes: 0, total: 45, note },
    ]
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub seed: u64,
    pub scene_hash: String,
    pub rows: Vec<EpisodeRow>,
    pub tactile: Option<TactileStats>,
    pub tactile_noiseless: Option<TactileStats>,
    pub ft: Option<FtTable>,
}

impl BenchReport {
    /// Success counts per (suite, arm) in first-seen order.
    pub fn aggregates(&self) -> Vec<ArmCount> {
        let mut out: Vec<ArmCount> = Vec::new();
        for r in &self.rows {
            let pos = out.iter().position(|a| a.suite == r.suite && a.arm == r.arm);
            let a = match pos {
                Some(i) => &mut out[i],
                None => {
                    out.push(ArmCount { suite: r.suite.clone(), arm: r.arm.clone(), successes: 0, total: 0 });
                    out.last_mut().unwrap()
                }
            };
            a.total += 1;
            a.successes += r.success as usize;
        }
        out
    }

    pub fn count(&self, suite: &str, arm: &str) -> Option<ArmCount> {
        self.aggregates().into_iter().find(|a| a.suite == suite && a.arm == arm)
    }

    pub fn peak_force(&self) -> f64 {
        let rows = self.rows.iter().map(|r| r.peak_force);
        let ft = self.ft.iter().flat_map(|t| t.trials.iter().map(|x| x.peak_force));
        rows.chain(ft).fold(0.0, f64::max)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub seed: u64,
    pub scene_hash: String,
    pub aggregates: Vec<ArmCount>,
    pub peak_force: f64,
    pub tactile: Option<TactileStats>,
    pub tactile_noiseless: Option<TactileStats>,
    pub ft: Option<FtTable>,
    pub literature_reference: Vec<LiteratureRow>,
}

const EPISODE_HEADER: [&str; 11] =
    ["suite", "arm", "index", "grasp_x", "grasp_z", "grasp_beta", "success", "attempts", "termination", "final_distance", "peak_force"];

/// Writes `episodes.csv` and `summary.json` into `dir`.
pub fn emit_report(report: &BenchReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join("episodes.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
    let csv_err = |e: csv::Error| Error::Dataset(format!("{}: {e}", path.display()));
    w.write_record(EPISODE_HEADER).map_err(csv_err)?;
    for r in &report.rows {
        w.write_record([
            r.suite.clone(),
            r.arm.clone(),
            r.index.to_string(),
            r.grasp.x.to_string(),
            r.grasp.z.to_string(),
            r.grasp.beta.to_string(),
            r.success.to_string(),
            r.attempts.to_string(),
            r.termination.clone(),
            r.final_distance.to_string(),
            r.peak_force.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    let summary = ReportSummary {
        seed: report.seed,
        scene_hash: report.scene_hash.clone(),
        aggregates: report.aggregates(),
        peak_force: report.peak_force(),
        tactile: report.tactile.clone(),
        tactile_noiseless: report.tactile_noiseless.clone(),
        ft: report.ft.clone(),
        literature_reference: literature_reference(),
    };
    let spath = dir.join("summary.json");
    let text = serde_json::to_string_pretty(&summary).map_err(|e| Error::Dataset(e.to_string()))?;
    std::fs::write(&spath, text).map_err(|e| Error::io(&spath, e))
}

/// Reads back a report written by [`emit_report`].
pub fn parse_report(dir: &Path) -> Result<(ReportSummary, Vec<EpisodeRow>)> {
    let spath = dir.join("summary.json");
    let text = std::fs::read_to_string(&spath).map_err(|e| Error::io(&spath, e))?;
    let summary: ReportSummary =
        serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", spath.display())))?;
    let path = dir.join("episodes.csv");
    let mut rdr = csv::Reader::from_path(&path).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        let f = |k: usize| -> Result<f64> { rec[k].parse().map_err(|e| Error::Parse(format!("{}: {e}", path.display()))) };
        let u = |k: usize| -> Result<usize> { rec[k].parse().map_err(|e| Error::Parse(format!("{}: {e}", path.display()))) };
        rows.push(EpisodeRow {
            suite: rec[0].to_string(),
            arm: rec[1].to_string(),
            index: u(2)?,
            grasp: TestGrasp { x: f(3)?, z: f(4)?, beta: f(5)? },
            success: rec[6].parse().map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?,
            attempts: u(7)?,
            termination: rec[8].to_string(),
            final_distance: f(9)?,
            peak_force: f(10)?,
        });
    }
    Ok((summary, rows))
}

// ---------------------------------------------------------------------------
// thresholds

/// One pass/fail line of a suite.
#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &str, pass: bool, detail: String) -> Self {
        Self { name: name.to_string(), pass, detail }
    }
}

impl std::fmt::Display for Check {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} {}: {}", if self.pass { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

pub const TACTILE_MAE_LIMIT: [f64; 3] = [0.3e-3, 0.3e-3, 0.015];
pub const MAIN_MIN_SUCCESSES: usize = 43;

pub fn check_tactile(stats: &TactileStats) -> Check {
    let pass = stats.mae.iter().zip(TACTILE_MAE_LIMIT).all(|(m, l)| *m <= l);
    let detail = format!(
        "MAE x {:.4} mm, z {:.4} mm, beta {:.5} rad (limits 0.3 mm, 0.3 mm, 0.015 rad)",
        stats.mae[0] / MM,
        stats.mae[1] / MM,
        stats.mae[2]
    );
    Check::new("tactile accuracy", pass, detail)
}

pub fn check_main(rows: &[EpisodeRow]) -> Vec<Check> {
    let count = |arm: &str| {
        let sel: Vec<&EpisodeRow> = rows.iter().filter(|r| r.suite == "main" && r.arm == arm).collect();
        (sel.iter().filter(|r| r.success).count(), sel.len())
    };
    let (s, n) = count("combined");
    let (os, on) = count("oracle");
    vec![
        Check::new("combined policy", n == 45 && s >= MAIN_MIN_SUCCESSES, format!("{s}/{n} (need >= {MAIN_MIN_SUCCESSES}/45)")),
        Check::new("oracle control", on == 45 && os == 45, format!("{os}/{on} (need 45/45)")),
    ]
}

/// Ablation ordering. The ZA clause covers every trial whose demonstration
/// misses the slot by more than the clearance along the jaw axis; an error
/// along the pads is absorbed by the grasp and cannot fail a re-insertion.
pub fn check_ft(table: &FtTable, clearance: f64) -> Vec<Check> {
    let (za, _) = table.mean_se(FtMode::Za);
    let (zawf, _) = table.mean_se(FtMode::Zawf);
    let (zawfg, _) = table.mean_se(FtMode::Zawfg);
    let wide: Vec<&FtTrial> =
        table.trials.iter().filter(|t| t.mode == FtMode::Za && t.demo.dy.abs() > clearance).collect();
    let wide_ok = !wide.is_empty() && wide.iter().all(|t| t.successes == 0);
    vec![
        Check::new("ZAWFG complete", (zawfg - 1.0).abs() < 1e-12, format!("ZAWFG mean {:.3}", zawfg)),
        Check::new(
            "ZA fails beyond clearance",
            wide_ok,
            format!("{} wide demo(s), successes {:?}", wide.len(), wide.iter().map(|t| t.successes).collect::<Vec<_>>()),
        ),
        Check::new("ordering", zawfg >= zawf && zawf >= za, format!("ZAWFG {zawfg:.3} >= ZAWF {zawf:.3} >= ZA {za:.3}")),
    ]
}

pub fn check_modality(rows: &[EpisodeRow]) -> Vec<Check> {
    let n = |arm: &str| rows.iter().filter(|r| r.suite == "modality" && r.arm == arm && r.success).count();
    let (c, t, v) = (n("combined"), n("tactile-only"), n("vision-only-no-rot"));
    let modality: Vec<EpisodeRow> = rows.iter().filter(|r| r.suite == "modality").cloned().collect();
    let (zero, tilted) = rate_by_tilt(&modality, "vision-only-no-rot");
    vec![
        Check::new("combined beats single modalities", c > t && c > v, format!("combined {c}, tactile-only {t}, vision-only {v}")),
        Check::new("vision-only tilt sensitivity", zero > tilted, format!("zero-tilt rate {zero:.3}, tilted rate {tilted:.3}")),
    ]
}

/// Collection safety: no guard trips, and no force component above the
/// limit plus one step of contact stiffness.
pub fn check_collection(scene: &SceneConfig, log: &SafetyLog) -> Check {
    let bound = crate::contact::FORCE_LIMIT + scene.contact_stiffness * crate::contact::DEFAULT_STEP;
    Check::new(
        "collection safety",
        log.guard_trips == 0 && log.peak_force <= bound,
        format!("{} guard trips, peak force {:.4} N (bound {:.2} N)", log.guard_trips, log.peak_force, bound),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::contact::{DEFAULT_STEP, FORCE_LIMIT};
    use crate::scene::default_scene;

    fn row(suite: &str, arm: &str, index: usize, beta: f64, success: bool) -> EpisodeRow {
        EpisodeRow {
            suite: suite.into(),
            arm: arm.into(),
            index,
            grasp: TestGrasp { x: 0.0, z: -4e-3, beta },
            success,
            attempts: 3,
            termination: "force".into(),
            final_distance: 1e-4,
            peak_force: 12.5,
        }
    }

    #[test]
    fn test_set_layout() {
        let s = make_test_set();
        assert_eq!(s.len(), 45);
        assert_eq!(s.iter().filter(|g| g.beta.abs() < 1e-12).count(), 9);
        assert!((s[0].beta + PI / 20.0).abs() < 1e-15 && (s[44].beta - PI / 20.0).abs() < 1e-15);
        assert!(s.iter().all(|g| g.x.abs() <= 3e-3 + 1e-15 && g.z >= -6e-3 - 1e-15 && g.z <= -2e-3 + 1e-15));
        // tilt-major: the first nine share a tilt
        assert!(s[..9].iter().all(|g| g.beta == s[0].beta));
    }

    #[test]
    fn draws_stay_in_range() {
        for k in 0..50 {
            let d = DemoError::draw(11, k);
            assert!(d.dx.abs() <= MM && d.dy.abs() <= MM && d.tilt.abs() <= PI / 180.0);
            let t = Pose::identity();
            let n = noisy_target(&t, 11, k, 2e-3);
            assert!(n.x().abs() <= 2e-3 && n.y().abs() <= 2e-3 && n.z() == 0.0);
        }
        assert_eq!(DemoError::draw(3, 1), DemoError::draw(3, 1));
        assert_ne!(DemoError::draw(3, 1), DemoError::draw(3, 2));
    }

    #[test]
    fn mean_and_standard_error() {
        let demo = DemoError { dx: 0.0, dy: 0.0, tilt: 0.0 };
        let t = |mode, successes| FtTrial { mode, demo, successes, total: 4, peak_force: 1.0 };
        let table = FtTable { trials: vec![t(FtMode::Za, 0), t(FtMode::Za, 2), t(FtMode::Za, 4), t(FtMode::Zawf, 4)] };
        let (m, se) = table.mean_se(FtMode::Za);
        assert!((m - 0.5).abs() < 1e-15);
        // sample std of {0, .5, 1} is .5
        assert!((se - 0.5 / 3f64.sqrt()).abs() < 1e-15);
        assert_eq!(table.mean_se(FtMode::Zawf), (1.0, 0.0));
        assert_eq!(table.mean_se(FtMode::Zawfg), (0.0, 0.0));
    }

    #[test]
    fn ft_checks() {
        let d = |dy| DemoError { dx: 0.0, dy, tilt: 0.0 };
        let t = |mode, dy, successes| FtTrial { mode, demo: d(dy), successes, total: 125, peak_force: 1.0 };
        let good = FtTable {
            trials: vec![
                t(FtMode::Za, 2e-4, 125),
                t(FtMode::Za, 8e-4, 0),
                t(FtMode::Zawf, 2e-4, 125),
                t(FtMode::Zawf, 8e-4, 125),
                t(FtMode::Zawfg, 2e-4, 125),
                t(FtMode::Zawfg, 8e-4, 125),
            ],
        };
        assert!(check_ft(&good, 4e-4).iter().all(|c| c.pass));
        let mut bad = good.clone();
        bad.trials[1].successes = 3;
        bad.trials[5].successes = 124;
        let c = check_ft(&bad, 4e-4);
        assert!(!c[0].pass && !c[1].pass);
    }

    #[test]
    fn main_and_modality_checks() {
        let mut rows: Vec<EpisodeRow> = (0..45).map(|i| row("main", "combined", i, 0.0, i >= 2)).collect();
        rows.extend((0..45).map(|i| row("main", "oracle", i, 0.0, true)));
        assert!(check_main(&rows).iter().all(|c| c.pass));
        rows[2].success = false;
        assert!(!check_main(&rows)[0].pass);

        let mut m = Vec::new();
        for i in 0..10 {
            let beta = if i < 4 { 0.0 } else { 0.1 };
            m.push(row("modality", "tactile-only", i, beta, i == 0));
            m.push(row("modality", "vision-only-no-rot", i, beta, i < 2));
            m.push(row("modality", "combined", i, beta, i < 6));
        }
        assert_eq!(rate_by_tilt(&m, "vision-only-no-rot"), (0.5, 0.0));
        assert!(check_modality(&m).iter().all(|c| c.pass));
        assert!(format!("{}", check_modality(&m)[0]).starts_with("PASS "));
    }

    #[test]
    fn collection_bound_includes_one_step() {
        let scene = default_scene();
        let mut log = SafetyLog { peak_force: 15.4, ..Default::default() };
        assert!(check_collection(&scene, &log).pass);
        log.peak_force = 15.6;
        assert!(!check_collection(&scene, &log).pass);
        log.peak_force = 1.0;
        log.guard_trips = 1;
        assert!(!check_collection(&scene, &log).pass);
    }

    #[test]
    fn report_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let rows = vec![row("main", "combined", 0, 0.1, true), row("main", "combined", 1, -0.1, false), row("main", "oracle", 0, 0.0, true)];
        let report = BenchReport { seed: 5, scene_hash: "h".into(), rows: rows.clone(), ..Default::default() };
        emit_report(&report, dir.path()).unwrap();
        let (summary, back) = parse_report(dir.path()).unwrap();
        assert_eq!(back, rows);
        assert_eq!(summary.aggregates, report.aggregates());
        assert_eq!(report.count("main", "combined").map(|a| (a.successes, a.total)), Some((1, 2)));
        assert_eq!(summary.peak_force, 12.5);
    }

    #[test]
    fn za_with_demo_outside_clearance_fails_at_once() {
        let scene = default_scene();
        let demo = DemoError { dx: 0.0, dy: 2.0 * scene.receptacle_clearance, tilt: 0.0 };
        let t = ft_trial(&scene, FtMode::Za, &demo, 8e-3, &RefineGrid::default()).unwrap();
        assert_eq!(t.successes, 0);
        assert!(t.peak_force <= FORCE_LIMIT + scene.contact_stiffness * DEFAULT_STEP);
    }
}
