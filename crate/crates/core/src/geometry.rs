//! Rigid-pose algebra for the insertion cell.
//!
//! Poses are parameterised by a translation `(x, y, z)` in metres and two
//! angles: `beta` about the local y-axis and `gamma` about the local z-axis,
//! with the rotation fixed as `R = R_y(beta) · R_z(gamma)`.
//!
//! The product of two such rotations is not in general of the same form
//! (e.g. `R_z(g) · R_y(b)`), so a [`Pose`] stores the full rotation matrix
//! internally. The `beta()`/`gamma()` accessors read the angles back through
//! the convention and are exact whenever the pose is representable, which
//! [`Pose::is_restricted`] checks.

use std::fmt;
use std::str::FromStr;

use crate::error::Error;

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

pub fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
        }
    }
    out
}

fn mat_vec(m: &Mat3, v: Vec3) -> Vec3 {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

fn transpose(m: &Mat3) -> Mat3 {
    [
        [m[0][0], m[1][0], m[2][0]],
        [m[0][1], m[1][1], m[2][1]],
        [m[0][2], m[1][2], m[2][2]],
    ]
}

/// Transposed rotation applied to a vector (world -> local).
pub fn mat_t_vec(m: &Mat3, v: Vec3) -> Vec3 {
    [
        m[0][0] * v[0] + m[1][0] * v[1] + m[2][0] * v[2],
        m[0][1] * v[0] + m[1][1] * v[1] + m[2][1] * v[2],
        m[0][2] * v[0] + m[1][2] * v[1] + m[2][2] * v[2],
    ]
}

const IDENTITY: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

fn rot_y(b: f64) -> Mat3 {
    let (s, c) = b.sin_cos();
    [[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]]
}

fn rot_z(g: f64) -> Mat3 {
    let (s, c) = g.sin_cos();
    [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
}

/// Rotation vector (axis * angle) of a rotation matrix.
fn so3_log(r: &Mat3) -> Vec3 {
    let tr = r[0][0] + r[1][1] + r[2][2];
    let cos = ((tr - 1.0) * 0.5).clamp(-1.0, 1.0);
    let angle = cos.acos();
    let w = [r[2][1] - r[1][2], r[0][2] - r[2][0], r[1][0] - r[0][1]];
    if angle < 1e-9 {
        return scale(w, 0.5);
    }
    let s = angle.sin();
    if s.abs() < 1e-9 {
        // angle ~ pi: axis from the diagonal
        let x = ((r[0][0] + 1.0) * 0.5).max(0.0).sqrt();
        let y = ((r[1][1] + 1.0) * 0.5).max(0.0).sqrt().copysign(r[0][1] + r[1][0]);
        let z = ((r[2][2] + 1.0) * 0.5).max(0.0).sqrt().copysign(r[0][2] + r[2][0]);
        return scale([x, y, z], angle);
    }
    scale(w, angle / (2.0 * s))
}

fn so3_exp(w: Vec3) -> Mat3 {
    let angle = norm(w);
    if angle < 1e-12 {
        return [
            [1.0, -w[2], w[1]],
            [w[2], 1.0, -w[0]],
            [-w[1], w[0], 1.0],
        ];
    }
    let k = scale(w, 1.0 / angle);
    let (s, c) = angle.sin_cos();
    let v = 1.0 - c;
    [
        [c + k[0] * k[0] * v, k[0] * k[1] * v - k[2] * s, k[0] * k[2] * v + k[1] * s],
        [k[1] * k[0] * v + k[2] * s, c + k[1] * k[1] * v, k[1] * k[2] * v - k[0] * s],
        [k[2] * k[0] * v - k[1] * s, k[2] * k[1] * v + k[0] * s, c + k[2] * k[2] * v],
    ]
}

/// Rigid transform with rotation convention `R_y(beta) · R_z(gamma)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    rot: Mat3,
    trans: Vec3,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self { rot: IDENTITY, trans: [0.0; 3] }
    }

    pub fn new(x: f64, y: f64, z: f64, beta: f64, gamma: f64) -> Self {
        Self { rot: mat_mul(&rot_y(beta), &rot_z(gamma)), trans: [x, y, z] }
    }

    pub fn translation(x: f64, y: f64, z: f64) -> Self {
        Self { rot: IDENTITY, trans: [x, y, z] }
    }

    pub fn rotate_y(beta: f64) -> Self {
        Self { rot: rot_y(beta), trans: [0.0; 3] }
    }

    pub fn rotate_z(gamma: f64) -> Self {
        Self { rot: rot_z(gamma), trans: [0.0; 3] }
    }

    pub fn from_parts(rot: Mat3, trans: Vec3) -> Self {
        Self { rot, trans }
    }

    pub fn x(&self) -> f64 {
        self.trans[0]
    }

    pub fn y(&self) -> f64 {
        self.trans[1]
    }

    pub fn z(&self) -> f64 {
        self.trans[2]
    }

    pub fn beta(&self) -> f64 {
        self.rot[0][2].atan2(self.rot[2][2])
    }

    pub fn gamma(&self) -> f64 {
        self.rot[1][0].atan2(self.rot[1][1])
    }

    pub fn trans(&self) -> Vec3 {
        self.trans
    }

    pub fn rot(&self) -> &Mat3 {
        &self.rot
    }

    /// `[x, y, z, beta, gamma]`.
    pub fn fields(&self) -> [f64; 5] {
        [self.trans[0], self.trans[1], self.trans[2], self.beta(), self.gamma()]
    }

    /// True when the rotation is of the form `R_y(beta) · R_z(gamma)`
    /// (no rotation about the local x-axis left over).
    pub fn is_restricted(&self, tol: f64) -> bool {
        self.rot[1][2].abs() <= tol
    }

    /// `self ∘ other`: applies `other` first, then `self`.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rot: mat_mul(&self.rot, &other.rot),
            trans: add(mat_vec(&self.rot, other.trans), self.trans),
        }
    }

    pub fn inverse(&self) -> Pose {
        let rt = transpose(&self.rot);
        let t = mat_vec(&rt, self.trans);
        Pose { rot: rt, trans: [-t[0], -t[1], -t[2]] }
    }

    /// Rotate then translate.
    pub fn apply(&self, p: Vec3) -> Vec3 {
        add(mat_vec(&self.rot, p), self.trans)
    }

    pub fn rotate_vec(&self, v: Vec3) -> Vec3 {
        mat_vec(&self.rot, v)
    }

    /// Pre-multiplies a world-frame translation.
    pub fn shifted(&self, dx: f64, dy: f64, dz: f64) -> Pose {
        Pose { rot: self.rot, trans: [self.trans[0] + dx, self.trans[1] + dy, self.trans[2] + dz] }
    }

    /// Angle of the relative rotation between two poses.
    pub fn angle_to(&self, other: &Pose) -> f64 {
        norm(so3_log(&mat_mul(&transpose(&self.rot), &other.rot)))
    }

    pub fn distance_to(&self, other: &Pose) -> f64 {
        norm(sub(other.trans, self.trans))
    }

    /// Linear interpolation in translation, geodesic in rotation.
    /// `s = 0` gives `self`, `s = 1` gives `other` exactly.
    pub fn interpolate(&self, other: &Pose, s: f64) -> Pose {
        if s <= 0.0 {
            return *self;
        }
        if s >= 1.0 {
            return *other;
        }
        let rel = so3_log(&mat_mul(&transpose(&self.rot), &other.rot));
        let rot = mat_mul(&self.rot, &so3_exp(scale(rel, s)));
        let trans = add(self.trans, scale(sub(other.trans, self.trans), s));
        Pose { rot, trans }
    }

    /// Largest per-field deviation between two poses, angles compared on
    /// the rotation matrices.
    pub fn max_field_error(&self, other: &Pose) -> f64 {
        let mut err: f64 = 0.0;
        for i in 0..3 {
            err = err.max((self.trans[i] - other.trans[i]).abs());
            for j in 0..3 {
                err = err.max((self.rot[i][j] - other.rot[i][j]).abs());
            }
        }
        err
    }
}

impl fmt::Display for Pose {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [x, y, z, b, g] = self.fields();
        write!(f, "{x},{y},{z},{b},{g}")
    }
}

impl FromStr for Pose {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let vals: Vec<f64> = s
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| Error::Parse(format!("pose '{s}': {e}")))?;
        if vals.len() != 5 {
            return Err(Error::Parse(format!("pose '{s}': expected 5 fields, got {}", vals.len())));
        }
        Ok(Pose::new(vals[0], vals[1], vals[2], vals[3], vals[4]))
    }
}

/// Frames that appear in the insertion cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FrameTag {
    Robot,
    Human,
    Gripper,
    Part,
}

/// A pose of `child` expressed in `parent`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FramedPose {
    pub parent: FrameTag,
    pub child: FrameTag,
    pub pose: Pose,
}

impl FramedPose {
    pub fn new(parent: FrameTag, child: FrameTag, pose: Pose) -> Self {
        Self { parent, child, pose }
    }

    /// `T_{a,b} · T_{b,c} = T_{a,c}`; the inner frames must agree.
    pub fn compose(&self, other: &FramedPose) -> Result<FramedPose, Error> {
        if self.child != other.parent {
            return Err(Error::FrameMismatch { left: self.child, right: other.parent });
        }
        Ok(FramedPose { parent: self.parent, child: other.child, pose: self.pose.compose(&other.pose) })
    }

    pub fn inverse(&self) -> FramedPose {
        FramedPose { parent: self.child, child: self.parent, pose: self.pose.inverse() }
    }
}
