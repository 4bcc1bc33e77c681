//! Target-pose refinement by wrench minimisation and unplug-height search.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::contact::{close_gripper, guarded_move, wrench, Wrench, DEFAULT_STEP, FORCE_LIMIT};
use crate::error::{Error, Result};
use crate::geometry::Pose;
use crate::scene::{SceneConfig, SimState};

/// Clearance kept between the part tip and the board while travelling
/// between refinement candidates (m).
const HOVER_MARGIN: f64 = 2e-3;
/// Step used for the z_min lateral probe (m).
pub const PROBE_STEP: f64 = 1e-5;

pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![0.5 * (lo + hi)],
        _ => (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect(),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RefineGrid {
    pub x_values: Vec<f64>,
    pub y_values: Vec<f64>,
    pub gamma_values: Vec<f64>,
}

impl Default for RefineGrid {
    fn default() -> Self {
        let deg = std::f64::consts::PI / 180.0;
        Self {
            x_values: linspace(-1e-3, 1e-3, 5),
            y_values: linspace(-1e-3, 1e-3, 5),
            gamma_values: linspace(-deg, deg, 4),
        }
    }
}

impl RefineGrid {
    /// Grid with only the identity perturbation.
    pub fn identity() -> Self {
        Self { x_values: vec![0.0], y_values: vec![0.0], gamma_values: vec![0.0] }
    }

    /// Same span with `n` values per axis.
    pub fn with_counts(nx: usize, ny: usize, ng: usize) -> Self {
        let deg = std::f64::consts::PI / 180.0;
        Self {
            x_values: linspace(-1e-3, 1e-3, nx),
            y_values: linspace(-1e-3, 1e-3, ny),
            gamma_values: linspace(-deg, deg, ng),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("x", &self.x_values), ("y", &self.y_values), ("gamma", &self.gamma_values)] {
            if v.is_empty() {
                return Err(Error::InvalidArgument(format!("refine grid {name} values are empty")));
            }
            let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if lo > 0.0 || hi < 0.0 || (lo + hi).abs() > 1e-12 {
                return Err(Error::InvalidArgument(format!("refine grid {name} values must be symmetric about zero")));
            }
        }
        Ok(())
    }

    /// Perturbations in evaluation order. The identity comes first so the
    /// input pose is always a candidate, whether or not every axis grid
    /// contains zero.
    pub fn perturbations(&self) -> Vec<Pose> {
        let mut out = vec![Pose::identity()];
        for &x in &self.x_values {
            for &y in &self.y_values {
                for &g in &self.gamma_values {
                    if x == 0.0 && y == 0.0 && g == 0.0 {
                        continue;
                    }
                    out.push(Pose::new(x, y, 0.0, 0.0, g));
                }
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ZminParams {
    pub delta_z: f64,
    pub delta_x: f64,
    pub eta: f64,
}

impl Default for ZminParams {
    fn default() -> Self {
        Self { delta_z: 1e-3, delta_x: 1e-3, eta: 3.5 }
    }
}

/// Zeroes the tilt of the insertion axis, keeping translation and yaw.
pub fn z_axis_align(t: &Pose) -> Pose {
    Pose::new(t.x(), t.y(), t.z(), 0.0, t.gamma())
}

/// `‖f‖ + λ‖τ‖`.
pub fn objective(w: &Wrench, torque_weight: f64) -> f64 {
    w.force_norm() + torque_weight * w.torque_norm()
}

/// Size of a perturbation for tie-breaking: translation norm plus
/// rotation angle.
pub fn perturbation_size(d: &Pose) -> f64 {
    d.distance_to(&Pose::identity()) + d.angle_to(&Pose::identity())
}

#[derive(Clone, Debug)]
pub struct RefineOutcome {
    pub pose: Pose,
    pub delta: Pose,
    pub objective: f64,
    /// One entry per candidate: `None` when the approach tripped the guard.
    pub evaluated: Vec<(Pose, Option<f64>)>,
    /// Largest force component seen during all refinement motions.
    pub peak_force: f64,
}

/// Guarded approach to `pose` from above: lift to hover height, travel
/// laterally, descend. Returns the wrench at `pose` on success.
pub fn approach_from_above(scene: &SceneConfig, state: &mut SimState, pose: &Pose, peak: &mut f64) -> Option<Wrench> {
    let hover_z = pose.z() + scene.insertion_depth + scene.seat_preload + HOVER_MARGIN;
    let cur = state.gripper_pose;
    if cur.z() < hover_z {
        let r = guarded_move(scene, state, cur.shifted(0.0, 0.0, hover_z - cur.z()), FORCE_LIMIT, DEFAULT_STEP);
        *peak = peak.max(r.peak_force);
        if r.halted_by_force {
            return None;
        }
    }
    let above = pose.shifted(0.0, 0.0, state.gripper_pose.z() - pose.z());
    let r = guarded_move(scene, state, above, FORCE_LIMIT, DEFAULT_STEP);
    *peak = peak.max(r.peak_force);
    if r.halted_by_force {
        return None;
    }
    let r = guarded_move(scene, state, *pose, FORCE_LIMIT, DEFAULT_STEP);
    *peak = peak.max(r.peak_force);
    if r.halted_by_force {
        return None;
    }
    Some(wrench(scene, state))
}

/// Grid search over `T_Δ · t` for the pose minimising the wrench objective.
/// Each candidate is reached by a guarded approach from above; candidates
/// whose approach trips the guard are skipped. Ties (objectives within a
/// relative 1e-9) go to the smaller perturbation, then to the earlier one.
/// The gripper is left at the selected pose.
pub fn refine_target(scene: &SceneConfig, state: &mut SimState, t: &Pose, grid: &RefineGrid) -> Result<RefineOutcome> {
    grid.validate()?;
    let mut peak: f64 = 0.0;
    let mut evaluated = Vec::new();
    let mut best: Option<(Pose, f64)> = None;
    for delta in grid.perturbations() {
        let cand = delta.compose(t);
        let obj = approach_from_above(scene, state, &cand, &mut peak).map(|w| objective(&w, scene.torque_weight));
        evaluated.push((delta, obj));
        let Some(obj) = obj else { continue };
        let better = match &best {
            None => true,
            Some((bd, bo)) => {
                let tol = 1e-9 * (1.0 + bo.abs());
                if obj < bo - tol {
                    true
                } else if obj <= bo + tol {
                    perturbation_size(&delta) < perturbation_size(bd)
                } else {
                    false
                }
            }
        };
        if better {
            best = Some((delta, obj));
        }
    }
    let (delta, obj) = best.ok_or(Error::AllCandidatesBlocked)?;
    let pose = delta.compose(t);
    if approach_from_above(scene, state, &pose, &mut peak).is_none() {
        return Err(Error::GuardTrip("return to refined pose".into()));
    }
    Ok(RefineOutcome { pose, delta, objective: obj, evaluated, peak_force: peak })
}

/// Lateral probe: guarded `+Δx` move in the gripper frame, read `f_x` at the
/// furthest safe pose, then move back. Returns `|f_x|`.
pub fn probe_fx(scene: &SceneConfig, state: &mut SimState, delta_x: f64, peak: &mut f64) -> f64 {
    let home = state.gripper_pose;
    let r = guarded_move(scene, state, home.compose(&Pose::translation(delta_x, 0.0, 0.0)), FORCE_LIMIT, PROBE_STEP);
    *peak = peak.max(r.peak_force);
    let fx = wrench(scene, state).f[0].abs();
    let r = guarded_move(scene, state, home, FORCE_LIMIT, PROBE_STEP);
    *peak = peak.max(r.peak_force);
    fx
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ZminOutcome {
    pub z_min: f64,
    pub iterations: usize,
    pub peak_force: f64,
}

/// Raises the gripper from the inserted pose in `delta_z` steps against the
/// insertion axis, probing `+delta_x` after each, until the probe force
/// drops to `eta` or below. The gripper is left at the found height.
pub fn find_zmin(scene: &SceneConfig, state: &mut SimState, t_refined: &Pose, p: &ZminParams) -> Result<ZminOutcome> {
    if !(p.delta_z > 0.0 && p.delta_x > 0.0 && p.eta > 0.0) {
        return Err(Error::InvalidArgument("z_min parameters must be positive".into()));
    }
    let max_iter = (scene.insertion_depth / p.delta_z).ceil() as usize + 5;
    let mut peak: f64 = 0.0;
    for i in 0..=max_iter {
        let h = i as f64 * p.delta_z;
        let r = guarded_move(scene, state, t_refined.shifted(0.0, 0.0, h), FORCE_LIMIT, DEFAULT_STEP);
        peak = peak.max(r.peak_force);
        if r.halted_by_force {
            return Err(Error::GuardTrip("z_min lift".into()));
        }
        if probe_fx(scene, state, p.delta_x, &mut peak) <= p.eta {
            return Ok(ZminOutcome { z_min: h, iterations: i, peak_force: peak });
        }
    }
    Err(Error::ZminNotFound(max_iter))
}

/// Seeded demonstration error within ±1 mm in x, y and ±1° of yaw, in the
/// same form as the refinement perturbations.
pub fn demo_perturbation(seed: u64, index: usize) -> Pose {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(6_000 + index as u64);
    let deg = std::f64::consts::PI / 180.0;
    let x = rng.random_range(-1e-3..=1e-3);
    let y = rng.random_range(-1e-3..=1e-3);
    let g = rng.random_range(-deg..=deg);
    Pose::new(x, y, 0.0, 0.0, g)
}

#[derive(Clone, Debug)]
pub struct RefineTrial {
    pub perturbation: Pose,
    /// Objective at the unrefined demonstration; `None` if it cannot be
    /// reached without tripping the guard.
    pub before: Option<f64>,
    pub outcome: RefineOutcome,
}

/// Refines `n` perturbed demonstrations of the seated pose, each from a
/// fresh grasp with the identity offset.
pub fn refine_trials(scene: &SceneConfig, seed: u64, n: usize, grid: &RefineGrid) -> Result<Vec<RefineTrial>> {
    let t = scene.seated_part_pose();
    (0..n)
        .map(|k| {
            let perturbation = demo_perturbation(seed, k);
            let demo = perturbation.compose(&t);
            let mut state = SimState::grasped(t.shifted(0.0, 0.0, scene.insertion_depth + HOVER_MARGIN + 1e-3), Pose::identity());
            close_gripper(scene, &mut state);
            let mut peak = 0.0;
            let before = approach_from_above(scene, &mut state, &demo, &mut peak).map(|w| objective(&w, scene.torque_weight));
            let outcome = refine_target(scene, &mut state, &demo, grid)?;
            Ok(RefineTrial { perturbation, before, outcome })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::default_scene;

    fn seated(scene: &SceneConfig) -> SimState {
        SimState::grasped(scene.seated_part_pose(), Pose::identity())
    }

    #[test]
    fn align_zeroes_tilt() {
        let t = Pose::new(0.001, 0.002, -0.008, 0.05, 0.01);
        let a = z_axis_align(&t);
        assert_eq!(a.beta(), 0.0);
        assert!((a.gamma() - 0.01).abs() < 1e-15);
        assert_eq!(a.trans(), t.trans());
        assert_eq!(z_axis_align(&a), a);
        let flat = Pose::translation(0.0, 0.0, -0.008);
        assert_eq!(z_axis_align(&flat), flat);
    }

    #[test]
    fn grid_shape() {
        let g = RefineGrid::default();
        g.validate().unwrap();
        assert_eq!(g.perturbations().len(), 1 + 100);
        assert!(RefineGrid { x_values: vec![], ..RefineGrid::default() }.validate().is_err());
        assert!(RefineGrid { x_values: vec![0.0, 1e-3], ..RefineGrid::default() }.validate().is_err());
    }

    #[test]
    fn optimal_target_is_kept() {
        let s = default_scene();
        let mut st = seated(&s);
        let t = s.seated_part_pose();
        let out = refine_target(&s, &mut st, &t, &RefineGrid::default()).unwrap();
        assert_eq!(out.delta, Pose::identity());
        assert_eq!(out.pose, t);
        let single = refine_target(&s, &mut st, &t, &RefineGrid::identity()).unwrap();
        assert_eq!(single.pose, t);
    }

    #[test]
    fn lateral_error_is_corrected_to_nearest_cell() {
        let s = default_scene();
        let mut st = seated(&s);
        let t = s.seated_part_pose().shifted(0.0005, 0.0, 0.0);
        let out = refine_target(&s, &mut st, &t, &RefineGrid::default()).unwrap();
        assert!((out.delta.x() + 0.0005).abs() < 1e-12, "{:?}", out.delta);
        assert!(out.delta.y().abs() < 1e-12);
        assert!(out.peak_force <= FORCE_LIMIT + s.contact_stiffness * DEFAULT_STEP);
    }

    #[test]
    fn zmin_in_expected_band() {
        let s = default_scene();
        let mut st = seated(&s);
        let t = s.seated_part_pose();
        let out = find_zmin(&s, &mut st, &t, &ZminParams::default()).unwrap();
        assert!(out.z_min >= s.insertion_depth - 1e-12 && out.z_min <= s.insertion_depth + 2e-3 + 1e-12);
        let mut peak = 0.0;
        assert!(probe_fx(&s, &mut st, 1e-3, &mut peak) <= 3.5);
    }

    #[test]
    fn zmin_degenerate_cases() {
        let s = default_scene();
        let mut st = SimState::grasped(Pose::translation(0.0, 0.0, 0.01), Pose::identity());
        let t = st.gripper_pose;
        assert_eq!(find_zmin(&s, &mut st, &t, &ZminParams::default()).unwrap().z_min, 0.0);
        let mut st = seated(&s);
        let t = s.seated_part_pose();
        let p = ZminParams { eta: f64::INFINITY, ..ZminParams::default() };
        assert_eq!(find_zmin(&s, &mut st, &t, &p).unwrap().z_min, 0.0);
    }
}
