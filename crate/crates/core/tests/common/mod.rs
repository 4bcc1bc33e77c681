//! Independent reimplementations shared by the integration tests.
#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use vtinsert::contact::RIM_BLEND;
use vtinsert::scene::{SceneConfig, SimState};
use vtinsert::Pose;

pub type V = [f64; 3];

fn dot3(a: V, b: V) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn len3(a: V) -> f64 {
    dot3(a, a).sqrt()
}

fn to_world(p: &Pose, s: V) -> V {
    let r = p.rot();
    let t = p.trans();
    [
        r[0][0] * s[0] + r[0][1] * s[1] + r[0][2] * s[2] + t[0],
        r[1][0] * s[0] + r[1][1] * s[1] + r[1][2] * s[2] + t[1],
        r[2][0] * s[0] + r[2][1] * s[1] + r[2][2] * s[2] + t[2],
    ]
}

/// Depth and normal of a point inside the board solid.
pub fn oracle_penetration(scene: &SceneConfig, p: V) -> Option<(f64, V)> {
    let a = scene.part_width / 2.0 + scene.receptacle_clearance;
    let b = scene.part_thickness / 2.0 + scene.receptacle_clearance;
    let d = scene.insertion_depth;
    let in_slot = p[0].abs() <= a && p[1].abs() <= b && p[2] >= -d;
    if p[2] >= 0.0 || in_slot {
        return None;
    }
    let nearest = [p[0].max(-a).min(a), p[1].max(-b).min(b), p[2].max(-d).min(0.0)];
    let v = [nearest[0] - p[0], nearest[1] - p[1], nearest[2] - p[2]];
    let side = len3(v);
    let up = -p[2];
    let w = (0.5 + 0.5 * (side - up) / RIM_BLEND).clamp(0.0, 1.0);
    let normal = if w == 1.0 {
        [0.0, 0.0, 1.0]
    } else {
        let u = [v[0] * (1.0 / side), v[1] * (1.0 / side), v[2] * (1.0 / side)];
        let m = [u[0] * (1.0 - w) + 0.0, u[1] * (1.0 - w) + 0.0, u[2] * (1.0 - w) + w];
        let k = 1.0 / len3(m);
        [m[0] * k, m[1] * k, m[2] * k]
    };
    Some((up.min(side), normal))
}

pub fn oracle_wrench(scene: &SceneConfig, state: &SimState, samples: &[V]) -> (V, V) {
    if !state.gripper_closed {
        return ([0.0; 3], [0.0; 3]);
    }
    let g = state.gripper_pose;
    let part = g.compose(&state.effective_offset());
    let seat = scene.seated_part_pose();
    let o = g.trans();
    let mut fs = [0.0; 3];
    let mut ts = [0.0; 3];
    if samples[..8].iter().any(|s| to_world(&part, *s)[2] < 0.0) {
        for s in samples {
            let p = to_world(&part, *s);
            let Some((depth, n)) = oracle_penetration(scene, p) else { continue };
            let fmag = scene.contact_stiffness * depth;
            let mut f = [n[0] * fmag, n[1] * fmag, n[2] * fmag];
            let q = to_world(&seat, *s);
            let disp = [p[0] - q[0], p[1] - q[1], p[2] - q[2]];
            let along = dot3(disp, n);
            let tang = [disp[0] - n[0] * along, disp[1] - n[1] * along, disp[2] - n[2] * along];
            let tl = len3(tang);
            if tl > 0.0 {
                let cap = (scene.tangential_stiffness * tl).min(scene.friction_mu * fmag);
                let k = cap / tl;
                f = [f[0] - tang[0] * k, f[1] - tang[1] * k, f[2] - tang[2] * k];
            }
            let r = [p[0] - o[0], p[1] - o[1], p[2] - o[2]];
            let tq = [r[1] * f[2] - r[2] * f[1], r[2] * f[0] - r[0] * f[2], r[0] * f[1] - r[1] * f[0]];
            fs = [fs[0] + f[0], fs[1] + f[1], fs[2] + f[2]];
            ts = [ts[0] + tq[0], ts[1] + tq[1], ts[2] + tq[2]];
        }
    }
    let m = g.rot();
    let back = |v: V| -> V {
        [
            m[0][0] * v[0] + m[1][0] * v[1] + m[2][0] * v[2],
            m[0][1] * v[0] + m[1][1] * v[1] + m[2][1] * v[2],
            m[0][2] * v[0] + m[1][2] * v[1] + m[2][2] * v[2],
        ]
    };
    let mut f = back(fs);
    f[1] += scene.gel_stiffness * state.gel_deflection;
    (f, back(ts))
}

pub fn random_state(scene: &SceneConfig, rng: &mut ChaCha8Rng) -> SimState {
    let seat = scene.seated_part_pose();
    let grasp = Pose::new(rng.random_range(-3e-3..=3e-3), 0.0, rng.random_range(-8e-3..=-2e-3), rng.random_range(-0.2..=0.2), 0.0);
    // part near the slot: laterally within ±1.5 mm, from seated to 3 mm up
    let part = Pose::new(
        rng.random_range(-1.5e-3..=1.5e-3),
        rng.random_range(-1.0e-3..=1.0e-3),
        seat.z() + rng.random_range(0.0..=scene.insertion_depth + 3e-3),
        rng.random_range(-0.03..=0.03),
        rng.random_range(-0.03..=0.03),
    );
    let mut s = SimState::grasped(part.compose(&grasp.inverse()), grasp);
    s.gel_deflection = if rng.random_bool(0.3) { rng.random_range(-4e-4..=4e-4) } else { 0.0 };
    s
}

/// `‖f‖ + λ‖τ‖` on the oracle wrench.
pub fn oracle_objective(scene: &SceneConfig, state: &SimState, samples: &[V]) -> f64 {
    let (f, t) = oracle_wrench(scene, state, samples);
    len3(f) + scene.torque_weight * len3(t)
}
