//! Two-phase guarded insertion: tactile alignment then visual servoing with
//! stepwise descent.

use rand_chacha::ChaCha8Rng;

use crate::collect::pose_features;
use crate::contact::{guarded_move, is_inserted, wrench, DEFAULT_STEP, FORCE_LIMIT};
use crate::error::{Error, Result};
use crate::geometry::Pose;
use crate::learn::{predict_tac, predict_vis, Model};
use crate::scene::{SceneConfig, SimState};
use crate::sensors::{capture_filtered, render_camera};

/// Success radius around the target pose (m).
pub const SUCCESS_RADIUS: f64 = 5e-3;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExecParams {
    /// Lateral action norm below which the policy counts as converged (m).
    pub epsilon: f64,
    pub d_z: f64,
    pub horizon: usize,
    pub force_limit: f64,
    pub median_n: usize,
    pub step: f64,
}

impl Default for ExecParams {
    fn default() -> Self {
        Self { epsilon: 0.0005, d_z: 1.5e-3, horizon: 200, force_limit: FORCE_LIMIT, median_n: 5, step: DEFAULT_STEP }
    }
}

impl ExecParams {
    pub fn validate(&self) -> Result<()> {
        let ok = [self.epsilon, self.d_z, self.force_limit, self.step].iter().all(|v| v.is_finite() && *v > 0.0);
        if !ok || self.median_n == 0 {
            return Err(Error::InvalidArgument("execution parameters must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Termination {
    Force,
    Horizon,
    ConvergedAndInserted,
}

impl Termination {
    pub fn as_str(&self) -> &'static str {
        match self {
            Termination::Force => "force",
            Termination::Horizon => "horizon",
            Termination::ConvergedAndInserted => "converged-and-inserted",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceStep {
    pub attempt: usize,
    pub pose: Pose,
    pub action: [f64; 3],
    pub fz: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeResult {
    pub success: bool,
    pub attempts: usize,
    pub termination: Termination,
    pub final_distance: f64,
    pub peak_force: f64,
    /// Grasp offset estimated in the align phase, if it ran.
    pub estimated_offset: Option<[f64; 3]>,
    pub trace: Vec<TraceStep>,
}

/// Source of the grasp-offset estimate `(x, z, beta)`.
pub trait TactilePolicy {
    fn estimate(&self, scene: &SceneConfig, state: &SimState, rng: &mut ChaCha8Rng) -> Result<[f64; 3]>;
}

/// Source of the insertion action `(dx, dy, dbeta)`. `frame` is the part
/// target pose the pose features are measured from.
pub trait InsertionPolicy {
    fn action(&self, scene: &SceneConfig, state: &SimState, frame: &Pose, rng: &mut ChaCha8Rng) -> Result<[f64; 3]>;
}

pub struct LearnedTactile<'a> {
    pub model: &'a Model,
    pub median_n: usize,
}

impl TactilePolicy for LearnedTactile<'_> {
    fn estimate(&self, scene: &SceneConfig, state: &SimState, rng: &mut ChaCha8Rng) -> Result<[f64; 3]> {
        if !state.gripper_closed {
            return Err(Error::GripperOpen);
        }
        let img = capture_filtered(scene, &state.effective_offset(), rng, self.median_n)?;
        predict_tac(self.model, &img)
    }
}

pub struct LearnedVision<'a> {
    pub model: &'a Model,
}

impl InsertionPolicy for LearnedVision<'_> {
    fn action(&self, scene: &SceneConfig, state: &SimState, frame: &Pose, rng: &mut ChaCha8Rng) -> Result<[f64; 3]> {
        let part = state.part_world();
        let img = render_camera(scene, &state.gripper_pose, Some(&part), rng);
        let f = pose_features(frame, &state.gripper_pose);
        let feats = &f[..self.model.spec.pose_features];
        predict_vis(self.model, &img, feats)
    }
}

/// Ground-truth grasp offset.
pub struct OracleTactile;

impl TactilePolicy for OracleTactile {
    fn estimate(&self, _scene: &SceneConfig, state: &SimState, _rng: &mut ChaCha8Rng) -> Result<[f64; 3]> {
        let o = state.effective_offset();
        Ok([o.x(), o.z(), o.beta()])
    }
}

/// Ground-truth lateral displacement that puts the part tip over the slot.
pub struct OracleVision;

impl InsertionPolicy for OracleVision {
    fn action(&self, scene: &SceneConfig, state: &SimState, _frame: &Pose, _rng: &mut ChaCha8Rng) -> Result<[f64; 3]> {
        let part = state.part_world();
        let seat = scene.seated_part_pose();
        Ok([seat.x() - part.x(), seat.y() - part.y(), seat.beta() - part.beta()])
    }
}

/// Always answers with the same action.
pub struct ConstantVision(pub [f64; 3]);

impl InsertionPolicy for ConstantVision {
    fn action(&self, _: &SceneConfig, _: &SimState, _: &Pose, _: &mut ChaCha8Rng) -> Result<[f64; 3]> {
        Ok(self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Combined,
    TactileOnly,
    VisionOnly,
}

/// Gripper pose that seats a part held with offset `(x, z, beta)` when the
/// identity-grasp target is `t`.
pub fn corrected_target(t: &Pose, offset: [f64; 3]) -> Pose {
    t.compose(&Pose::new(offset[0], 0.0, offset[1], offset[2], 0.0).inverse())
}

/// Geometric success: inserted, and the part within [`SUCCESS_RADIUS`] of
/// the target (the identity grasp makes part and gripper targets coincide).
pub fn check_success(scene: &SceneConfig, state: &SimState, t_refined: &Pose) -> bool {
    state.gripper_closed && is_inserted(scene, state) && state.part_world().distance_to(t_refined) <= SUCCESS_RADIUS
}

/// Runs one episode. The part must already be grasped, held clear of the
/// board.
#[allow(clippy::too_many_arguments)]
pub fn run_insertion(
    scene: &SceneConfig,
    state: &mut SimState,
    tac: &dyn TactilePolicy,
    vis: &dyn InsertionPolicy,
    t_refined: &Pose,
    z_min: f64,
    p: &ExecParams,
    mode: Mode,
    rng: &mut ChaCha8Rng,
) -> Result<EpisodeResult> {
    p.validate()?;
    let mut res = EpisodeResult {
        success: false,
        attempts: 0,
        termination: Termination::Horizon,
        final_distance: 0.0,
        peak_force: 0.0,
        estimated_offset: None,
        trace: Vec::new(),
    };
    let finish = |state: &SimState, mut res: EpisodeResult| {
        res.final_distance = state.part_world().distance_to(t_refined);
        res.success = res.termination != Termination::Horizon && check_success(scene, state, t_refined);
        if res.termination == Termination::Force && res.success {
            res.termination = Termination::ConvergedAndInserted;
        }
        res
    };
    if p.horizon == 0 {
        return Ok(finish(state, res));
    }

    // align phase
    // pose features are taken relative to the part target, which the
    // identity-grasp gripper target coincides with
    let frame = *t_refined;
    let goal = if mode == Mode::VisionOnly {
        *t_refined
    } else {
        let o = tac.estimate(scene, state, rng)?;
        res.estimated_offset = Some(o);
        corrected_target(t_refined, o)
    };
    let start = goal.shifted(0.0, 0.0, 2.0 * z_min);
    let m = guarded_move(scene, state, start, p.force_limit, p.step);
    res.peak_force = res.peak_force.max(m.peak_force);
    if m.halted_by_force {
        res.termination = Termination::Force;
        return Ok(finish(state, res));
    }

    // insert phase
    loop {
        if res.attempts >= p.horizon {
            res.termination = Termination::Horizon;
            return Ok(finish(state, res));
        }
        res.attempts += 1;
        let a = if mode == Mode::TactileOnly { [0.0; 3] } else { vis.action(scene, state, &frame, rng)? };
        let lateral = a[0].hypot(a[1]);
        if lateral > p.epsilon {
            let before = state.gripper_pose;
            let target = before.shifted(a[0], a[1], 0.0);
            let m = guarded_move(scene, state, target, p.force_limit, p.step);
            res.peak_force = res.peak_force.max(m.peak_force);
            res.trace.push(TraceStep { attempt: res.attempts, pose: state.gripper_pose, action: a, fz: wrench(scene, state).f[2] });
            if !m.halted_by_force {
                continue;
            }
            // a blocked lateral move backs off to where it started and falls
            // through to the descent
            let back = guarded_move(scene, state, before, p.force_limit, p.step);
            res.peak_force = res.peak_force.max(back.peak_force);
        }
        let target = state.gripper_pose.shifted(0.0, 0.0, -p.d_z);
        let m = guarded_move(scene, state, target, p.force_limit, p.step);
        res.peak_force = res.peak_force.max(m.peak_force);
        let fz = wrench(scene, state).f[2];
        res.trace.push(TraceStep { attempt: res.attempts, pose: state.gripper_pose, action: a, fz });
        if m.halted_by_force || fz.abs() > p.force_limit {
            res.termination = Termination::Force;
            return Ok(finish(state, res));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::episode_start;
    use crate::scene::default_scene;
    use rand::SeedableRng;

    struct Biased([f64; 3]);

    impl TactilePolicy for Biased {
        fn estimate(&self, _: &SceneConfig, state: &SimState, _: &mut ChaCha8Rng) -> Result<[f64; 3]> {
            let o = state.effective_offset();
            Ok([o.x() + self.0[0], o.z() + self.0[1], o.beta() + self.0[2]])
        }
    }

    fn episode(tac: &dyn TactilePolicy, vis: &dyn InsertionPolicy, mode: Mode, p: &ExecParams) -> EpisodeResult {
        let scene = default_scene();
        let t = scene.seated_part_pose();
        let g = Pose::new(2e-3, 0.0, -4e-3, 0.1, 0.0);
        let mut st = episode_start(&t, 8e-3, &g);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        run_insertion(&scene, &mut st, tac, vis, &t, 8e-3, p, mode, &mut rng).unwrap()
    }

    #[test]
    fn corrected_target_undoes_the_offset() {
        let t = Pose::new(1e-3, -2e-3, -9e-3, 0.0, 0.05);
        let o = [2e-3, -5e-3, 0.12];
        let part = corrected_target(&t, o).compose(&Pose::new(o[0], 0.0, o[1], o[2], 0.0));
        assert!(part.distance_to(&t) < 1e-15);
        assert!((part.beta() - t.beta()).abs() < 1e-12);
    }

    #[test]
    fn oracle_offset_inserts_without_vision() {
        let r = episode(&OracleTactile, &ConstantVision([0.0; 3]), Mode::Combined, &ExecParams::default());
        assert!(r.success, "{r:?}");
        assert_eq!(r.termination, Termination::ConvergedAndInserted);
        assert!(r.peak_force <= FORCE_LIMIT + default_scene().contact_stiffness * DEFAULT_STEP);
    }

    #[test]
    fn lateral_tactile_error_is_not_recovered_without_vision() {
        let r = episode(&Biased([1e-3, 0.0, 0.0]), &OracleVision, Mode::TactileOnly, &ExecParams::default());
        assert!(!r.success);
        assert_eq!(r.termination, Termination::Force);
    }

    #[test]
    fn oracle_vision_recovers_lateral_error() {
        let r = episode(&Biased([1e-3, 0.0, 0.0]), &OracleVision, Mode::Combined, &ExecParams::default());
        assert!(r.success, "{r:?}");
    }

    #[test]
    fn endless_lateral_actions_hit_the_horizon() {
        let p = ExecParams { horizon: 6, ..Default::default() };
        let r = episode(&OracleTactile, &ConstantVision([2e-3, 0.0, 0.0]), Mode::Combined, &p);
        assert_eq!(r.termination, Termination::Horizon);
        assert_eq!(r.attempts, 6);
        assert!(!r.success);
    }

    #[test]
    fn zero_horizon_and_bad_params() {
        let r = episode(&OracleTactile, &OracleVision, Mode::Combined, &ExecParams { horizon: 0, ..Default::default() });
        assert_eq!((r.attempts, r.success), (0, false));
        let scene = default_scene();
        let t = scene.seated_part_pose();
        let mut st = episode_start(&t, 8e-3, &Pose::identity());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = ExecParams { d_z: 0.0, ..Default::default() };
        assert!(run_insertion(&scene, &mut st, &OracleTactile, &OracleVision, &t, 8e-3, &p, Mode::Combined, &mut rng).is_err());
    }
}
