//! Quasi-static penalty contact and guarded motion.
//!
//! The environment is the solid half-space z < 0 minus the receptacle slot.
//! Each boundary sample of the part that lies inside the solid is pushed
//! toward the nearest free point with `k_n · depth`. A Coulomb-capped
//! tangential spring, anchored at the same material point of the fully
//! seated part, makes the wrench informative about lateral and yaw error
//! even when the part rests on the slot floor without touching a wall.

use crate::geometry::{add, cross, dot, mat_t_vec, norm, scale, sub, Pose, Vec3};
use crate::scene::{SceneConfig, SimState, SAMPLE_SPACING};

/// Default interpolation step for guarded moves (m).
pub const DEFAULT_STEP: f64 = 1e-4;
/// Default per-component force guard (N).
pub const FORCE_LIMIT: f64 = 15.0;
/// Lever arm used to convert rotation into path length when splitting a
/// move into increments (m).
pub const ROT_RADIUS: f64 = 0.02;
/// Width of the band around the slot rim over which the contact normal
/// turns from vertical to horizontal (m).
pub const RIM_BLEND: f64 = 2e-5;
/// Bisection iterations used to locate the guard crossing.
const CROSSING_ITERS: usize = 30;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Wrench {
    pub f: Vec3,
    pub tau: Vec3,
}

impl Wrench {
    pub fn max_force_component(&self) -> f64 {
        self.f.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn force_norm(&self) -> f64 {
        norm(self.f)
    }

    pub fn torque_norm(&self) -> f64 {
        norm(self.tau)
    }

    pub fn is_zero(&self) -> bool {
        self.f == [0.0; 3] && self.tau == [0.0; 3]
    }
}

/// Boundary sample points of the part in the part frame: the 8 corners,
/// then the interior points of the 12 edges at no more than
/// [`SAMPLE_SPACING`].
pub fn boundary_samples(scene: &SceneConfig) -> Vec<Vec3> {
    let hw = scene.part_width / 2.0;
    let ht = scene.part_thickness / 2.0;
    let l = scene.part_length;
    let xs = [-hw, hw];
    let ys = [-ht, ht];
    let zs = [0.0, l];
    let mut out = Vec::with_capacity(512);
    for &z in &zs {
        for &y in &ys {
            for &x in &xs {
                out.push([x, y, z]);
            }
        }
    }
    let mut edge = |a: Vec3, b: Vec3| {
        let len = norm(sub(b, a));
        let n = (len / SAMPLE_SPACING - 1e-9).ceil().max(1.0) as usize;
        for k in 1..n {
            out.push(add(a, scale(sub(b, a), k as f64 / n as f64)));
        }
    };
    for &z in &zs {
        for &y in &ys {
            edge([-hw, y, z], [hw, y, z]);
        }
    }
    for &z in &zs {
        for &x in &xs {
            edge([x, -ht, z], [x, ht, z]);
        }
    }
    for &y in &ys {
        for &x in &xs {
            edge([x, y, 0.0], [x, y, l]);
        }
    }
    out
}

/// Penetration depth and outward normal of a world point, or `None` when
/// the point is in free space.
pub fn penetration(scene: &SceneConfig, p: Vec3) -> Option<(f64, Vec3)> {
    if p[2] >= 0.0 {
        return None;
    }
    let (a, b) = scene.slot_half_extents();
    let d = scene.insertion_depth;
    if p[0].abs() <= a && p[1].abs() <= b && p[2] >= -d {
        return None;
    }
    let top = -p[2];
    let q = [p[0].clamp(-a, a), p[1].clamp(-b, b), p[2].clamp(-d, 0.0)];
    let dv = sub(q, p);
    let side = norm(dv);
    // Near the slot rim both exits are almost equally close; the normal is
    // blended across a thin band so the force direction stays continuous.
    let w_up = (0.5 + 0.5 * (side - top) / RIM_BLEND).clamp(0.0, 1.0);
    let n = if w_up == 1.0 {
        [0.0, 0.0, 1.0]
    } else {
        let side_dir = scale(dv, 1.0 / side);
        let m = add(scale(side_dir, 1.0 - w_up), [0.0, 0.0, w_up]);
        scale(m, 1.0 / norm(m))
    };
    Some((top.min(side), n))
}

/// Contact wrench on the gripper, expressed in the gripper frame.
pub fn wrench(scene: &SceneConfig, state: &SimState) -> Wrench {
    let samples = boundary_samples(scene);
    wrench_with_samples(scene, state, &samples)
}

pub fn wrench_with_samples(scene: &SceneConfig, state: &SimState, samples: &[Vec3]) -> Wrench {
    if !state.gripper_closed {
        return Wrench::default();
    }
    let g = state.gripper_pose;
    let part = g.compose(&state.effective_offset());
    let mut force = [0.0; 3];
    let mut torque = [0.0; 3];
    let corners_clear = samples[..8].iter().all(|s| part.apply(*s)[2] >= 0.0);
    if !corners_clear {
        let seat = scene.seated_part_pose();
        let origin = g.trans();
        for s in samples {
            let p = part.apply(*s);
            let Some((depth, n)) = penetration(scene, p) else {
                continue;
            };
            let fn_mag = scene.contact_stiffness * depth;
            let mut f = scale(n, fn_mag);
            let d = sub(p, seat.apply(*s));
            let dt = sub(d, scale(n, dot(d, n)));
            let dt_len = norm(dt);
            if dt_len > 0.0 {
                let ft = (scene.tangential_stiffness * dt_len).min(scene.friction_mu * fn_mag);
                f = sub(f, scale(dt, ft / dt_len));
            }
            force = add(force, f);
            torque = add(torque, cross(sub(p, origin), f));
        }
    }
    let rot = g.rot();
    let mut f = mat_t_vec(rot, force);
    let tau = mat_t_vec(rot, torque);
    f[1] += scene.gel_stiffness * state.gel_deflection;
    Wrench { f, tau }
}

/// Largest lateral (world y) wall violation of the part at gel deflection
/// zero, restricted to samples within the slot's x extent. Returns the
/// signed world-y shift that would clear it.
fn required_y_shift(scene: &SceneConfig, part: &Pose, samples: &[Vec3]) -> f64 {
    let (a, b) = scene.slot_half_extents();
    let mut over_pos: f64 = 0.0;
    let mut over_neg: f64 = 0.0;
    for s in samples {
        let p = part.apply(*s);
        if p[2] >= 0.0 || p[0].abs() > a {
            continue;
        }
        over_pos = over_pos.max(p[1] - b);
        over_neg = over_neg.max(-b - p[1]);
    }
    if over_pos > 0.0 {
        -over_pos
    } else if over_neg > 0.0 {
        over_neg
    } else {
        0.0
    }
}

/// Gel deflection needed for the held part to clear the slot walls along
/// the jaw axis, ignoring any current deflection.
fn needed_deflection(scene: &SceneConfig, state: &SimState, samples: &[Vec3]) -> f64 {
    let part = state.gripper_pose.compose(&state.grasp_offset);
    let shift = required_y_shift(scene, &part, samples);
    if shift == 0.0 {
        return 0.0;
    }
    // gripper y axis expressed in world; its y component scales the shift
    let ay = state.gripper_pose.rot()[1][1];
    shift / ay
}

/// Lets the gel pads relax toward zero shear as far as the walls allow.
/// The deflection never grows or changes sign here.
pub fn relax_gel(scene: &SceneConfig, state: &mut SimState, samples: &[Vec3]) {
    if state.gel_deflection == 0.0 || !state.gripper_closed {
        return;
    }
    let need = needed_deflection(scene, state, samples);
    let old = state.gel_deflection;
    state.gel_deflection = if need == 0.0 || need.signum() != old.signum() {
        0.0
    } else if need.abs() < old.abs() {
        need
    } else {
        old
    };
}

/// Closes the jaws on the resting part. The jaws centre the part along
/// their closing axis (gripper y) and square it about the gripper z-axis;
/// if the part cannot move because it is held by the slot walls, the gel
/// pads take up the difference as shear.
pub fn close_gripper(scene: &SceneConfig, state: &mut SimState) {
    if state.gripper_closed {
        return;
    }
    let raw = state.gripper_pose.inverse().compose(&state.resting_part);
    state.grasp_offset = Pose::new(raw.x(), 0.0, raw.z(), raw.beta(), 0.0);
    state.gripper_closed = true;
    state.gel_deflection = raw.y();
    let samples = boundary_samples(scene);
    relax_gel(scene, state, &samples);
}

/// Opens the jaws; the part stays where it is.
pub fn open_gripper(state: &mut SimState) {
    if !state.gripper_closed {
        return;
    }
    state.resting_part = state.part_world();
    state.gripper_closed = false;
    state.gel_deflection = 0.0;
}

/// In-hand slip rule. Tangential force is the component in the pad plane
/// (gripper x–z); any excess over `slip_mu · grip_force` moves the part in
/// the gripper by `excess / k_n` along that force.
pub fn slip_update(scene: &SceneConfig, state: &SimState, w: &Wrench) -> Pose {
    if !scene.slip_enabled {
        return state.grasp_offset;
    }
    let ft = [w.f[0], 0.0, w.f[2]];
    let mag = norm(ft);
    let threshold = scene.slip_mu * scene.grip_force;
    if mag <= threshold {
        return state.grasp_offset;
    }
    let shift = scale(ft, (mag - threshold) / scene.contact_stiffness / mag);
    Pose::translation(shift[0], shift[1], shift[2]).compose(&state.grasp_offset)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MoveResult {
    pub final_pose: Pose,
    pub halted_by_force: bool,
    /// Largest force component measured during the move (N). When the
    /// guard trips this is the force just before the crossing, located by
    /// bisection, so it never exceeds the limit.
    pub peak_force: f64,
    pub steps_taken: usize,
}

fn increments(start: &Pose, target: &Pose, step: f64) -> usize {
    let trans = start.distance_to(target);
    let rot = start.angle_to(target) * ROT_RADIUS;
    (trans.max(rot) / step).ceil() as usize
}

/// Moves the gripper toward `target` in increments of at most `step`,
/// checking the wrench after each. When any force component exceeds
/// `force_limit` the crossing is located by bisection within the last
/// increment (the sensor sees the force rise continuously), the gripper
/// retreats to the previous increment, and the move reports a halt.
pub fn guarded_move(
    scene: &SceneConfig,
    state: &mut SimState,
    target: Pose,
    force_limit: f64,
    step: f64,
) -> MoveResult {
    assert!(step > 0.0, "guarded_move step must be positive");
    let samples = boundary_samples(scene);
    let start = state.gripper_pose;
    let n = increments(&start, &target, step);
    let mut peak: f64 = 0.0;
    for k in 1..=n {
        let prev = *state;
        let s_prev = (k - 1) as f64 / n as f64;
        let s = k as f64 / n as f64;
        state.gripper_pose = start.interpolate(&target, s);
        relax_gel(scene, state, &samples);
        let w = wrench_with_samples(scene, state, &samples);
        let fmax = w.max_force_component();
        if fmax > force_limit {
            let crossing = locate_crossing(scene, &prev, &start, &target, s_prev, s, force_limit, &samples);
            peak = peak.max(crossing);
            *state = prev;
            return MoveResult {
                final_pose: state.gripper_pose,
                halted_by_force: true,
                peak_force: peak,
                steps_taken: k - 1,
            };
        }
        peak = peak.max(fmax);
        if scene.slip_enabled {
            state.grasp_offset = slip_update(scene, state, &w);
        }
    }
    MoveResult { final_pose: state.gripper_pose, halted_by_force: false, peak_force: peak, steps_taken: n }
}

#[allow(clippy::too_many_arguments)]
fn locate_crossing(
    scene: &SceneConfig,
    base: &SimState,
    start: &Pose,
    target: &Pose,
    mut lo: f64,
    mut hi: f64,
    limit: f64,
    samples: &[Vec3],
) -> f64 {
    let eval = |s: f64| {
        let mut st = *base;
        st.gripper_pose = start.interpolate(target, s);
        relax_gel(scene, &mut st, samples);
        wrench_with_samples(scene, &st, samples).max_force_component()
    };
    let mut f_lo = eval(lo);
    for _ in 0..CROSSING_ITERS {
        let mid = 0.5 * (lo + hi);
        let f = eval(mid);
        if f > limit {
            hi = mid;
        } else {
            lo = mid;
            f_lo = f;
        }
    }
    f_lo
}

/// Geometric insertion check: the part tip is at least
/// `insertion_depth − 0.5 mm` below the board and every sample below the
/// board surface lies inside the slot footprint.
pub fn is_inserted(scene: &SceneConfig, state: &SimState) -> bool {
    const DEPTH_SLACK: f64 = 0.5e-3;
    const WALL_TOL: f64 = 1e-6;
    let part = state.part_world();
    let samples = boundary_samples(scene);
    let (a, b) = scene.slot_half_extents();
    let need = -(scene.insertion_depth - DEPTH_SLACK);
    // corners 0..4 are the tip face
    if samples[..4].iter().any(|s| part.apply(*s)[2] > need) {
        return false;
    }
    samples.iter().all(|s| {
        let p = part.apply(*s);
        p[2] >= 0.0 || (p[0].abs() <= a + WALL_TOL && p[1].abs() <= b + WALL_TOL)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::default_scene;

    fn seated_state(scene: &SceneConfig) -> SimState {
        SimState::grasped(scene.seated_part_pose(), Pose::identity())
    }

    #[test]
    fn sample_count_and_spacing() {
        let s = default_scene();
        let pts = boundary_samples(&s);
        // 8 corners + 4 * (47 + 17 + 55) edge interiors
        assert_eq!(pts.len(), 8 + 4 * (47 + 17 + 55));
    }

    #[test]
    fn hovering_part_has_zero_wrench() {
        let s = default_scene();
        let st = SimState::grasped(Pose::translation(0.0, 0.0, 0.01), Pose::identity());
        assert!(wrench(&s, &st).is_zero());
    }

    #[test]
    fn centred_part_within_clearance_has_no_wall_force() {
        let s = default_scene();
        // mid-depth, 0.2mm off-centre: no penetration anywhere
        let st = SimState::grasped(Pose::translation(0.0002, -0.0001, -0.004), Pose::identity());
        assert!(wrench(&s, &st).is_zero());
    }

    #[test]
    fn seated_part_feels_only_preload() {
        let s = default_scene();
        let w = wrench(&s, &seated_state(&s));
        assert!(w.f[2] > 0.0);
        assert!(w.f[0].abs() < 1e-12 && w.f[1].abs() < 1e-12);
    }

    #[test]
    fn wall_contact_pushes_back() {
        let s = default_scene();
        let st = SimState::grasped(Pose::translation(0.001, 0.0, -0.004), Pose::identity());
        let w = wrench(&s, &st);
        assert!(w.f[0] < 0.0);
    }

    #[test]
    fn guarded_descent_onto_board_halts_near_limit() {
        let s = default_scene();
        let mut st = SimState::grasped(Pose::translation(0.003, 0.0, 0.002), Pose::identity());
        let r = guarded_move(&s, &mut st, Pose::translation(0.003, 0.0, -0.005), FORCE_LIMIT, DEFAULT_STEP);
        assert!(r.halted_by_force);
        assert!(r.peak_force <= FORCE_LIMIT);
        assert!(r.peak_force > FORCE_LIMIT - 1e-3);
        assert!(wrench(&s, &st).max_force_component() <= FORCE_LIMIT);
    }

    #[test]
    fn free_and_zero_length_moves() {
        let s = default_scene();
        let mut st = SimState::grasped(Pose::translation(0.0, 0.0, 0.02), Pose::identity());
        let target = Pose::new(0.004, -0.003, 0.03, 0.1, 0.0);
        let r = guarded_move(&s, &mut st, target, FORCE_LIMIT, DEFAULT_STEP);
        assert!(!r.halted_by_force);
        assert_eq!(r.final_pose, target);
        let r = guarded_move(&s, &mut st, target, FORCE_LIMIT, DEFAULT_STEP);
        assert_eq!(r.steps_taken, 0);
        assert_eq!(r.final_pose, target);
    }

    #[test]
    fn aligned_descent_reaches_the_seat() {
        let s = default_scene();
        let mut st = SimState::grasped(Pose::translation(0.0, 0.0, 0.01), Pose::identity());
        let r = guarded_move(&s, &mut st, s.seated_part_pose(), FORCE_LIMIT, DEFAULT_STEP);
        assert!(!r.halted_by_force);
        assert!(is_inserted(&s, &st));
    }

    #[test]
    fn slip_rule() {
        let mut s = default_scene();
        let st = seated_state(&s);
        let w = Wrench { f: [14.0 + 5.0, 0.0, 0.0], tau: [0.0; 3] };
        assert_eq!(slip_update(&s, &st, &w), st.grasp_offset);
        s.slip_enabled = true;
        assert_eq!(slip_update(&s, &st, &Wrench::default()), st.grasp_offset);
        let o = slip_update(&s, &st, &w);
        assert!((o.x() - 0.001).abs() < 1e-12);
        assert_eq!(o.z(), 0.0);
    }

    #[test]
    fn insertion_checks() {
        let s = default_scene();
        assert!(is_inserted(&s, &seated_state(&s)));
        let hover = SimState::grasped(Pose::translation(0.0, 0.0, 0.01), Pose::identity());
        assert!(!is_inserted(&s, &hover));
        let tilted = SimState::grasped(
            s.seated_part_pose().compose(&Pose::rotate_y(std::f64::consts::PI / 15.0)),
            Pose::identity(),
        );
        assert!(!is_inserted(&s, &tilted));
    }

    #[test]
    fn closing_on_offset_part_deflects_gel() {
        let s = default_scene();
        let mut st = seated_state(&s);
        open_gripper(&mut st);
        st.gripper_pose = s.seated_part_pose().shifted(0.0, 0.0008, 0.0);
        close_gripper(&s, &mut st);
        // the jaws drag the part until it meets the wall; the gel takes the rest
        let c = s.receptacle_clearance;
        assert!((st.gel_deflection + (0.0008 - c)).abs() < 1e-12);
        assert!((st.part_world().y() - c).abs() < 1e-12);
        let w = wrench(&s, &st);
        assert!(w.f[1] < -s.gel_stiffness * (0.0008 - c) + 1e-6);
        // lifting frees the part and the pads relax
        let up = st.gripper_pose.shifted(0.0, 0.0, 0.012);
        guarded_move(&s, &mut st, up, FORCE_LIMIT, DEFAULT_STEP);
        assert_eq!(st.gel_deflection, 0.0);
    }
}
