//! World description and simulator state.
//!
//! World frame: z up, taskboard surface is the plane z = 0. The receptacle
//! is a rectangular slot centred on the origin, open at the top, with
//! half-widths `part_width/2 + clearance` (x) and `part_thickness/2 + clearance`
//! (y), and a floor at z = -insertion_depth. Insertion is along world -z.
//!
//! Part frame: origin at the centre of the part tip (the face that goes in
//! first), part body occupying x in [-w/2, w/2], y in [-t/2, t/2], z in [0, L].
//!
//! All numeric geometry below is an artifact choice; the physical connector
//! dimensions are not published.

use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::Pose;

/// Spacing of the boundary sample points used by the contact model.
pub const SAMPLE_SPACING: f64 = 0.25e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct SceneConfig {
    pub part_width: f64,
    pub part_thickness: f64,
    pub part_length: f64,
    pub receptacle_clearance: f64,
    pub insertion_depth: f64,
    /// Penalty stiffness per boundary sample (N/m).
    pub contact_stiffness: f64,
    pub friction_mu: f64,
    /// Stiffness of the tangential restoring spring per sample (N/m).
    pub tangential_stiffness: f64,
    /// How far the seated part presses into the slot floor (m).
    pub seat_preload: f64,
    /// Lateral stiffness of the gel pads along the jaw axis (N/m).
    pub gel_stiffness: f64,
    pub grip_force: f64,
    pub torque_weight: f64,
    pub tactile_extent: (f64, f64),
    pub tactile_resolution: (usize, usize),
    pub camera_offset: Pose,
    /// Focal length of the wrist camera in pixels.
    pub camera_focal: f64,
    pub camera_resolution: (usize, usize),
    /// Distance in pixels over which a drawn line fades to background.
    pub camera_line_width: f64,
    pub noise_sigma_tactile: f64,
    pub noise_sigma_camera: f64,
    pub slip_enabled: bool,
    pub slip_mu: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        default_scene()
    }
}

pub fn default_scene() -> SceneConfig {
    SceneConfig {
        part_width: 0.012,
        part_thickness: 0.0045,
        part_length: 0.014,
        receptacle_clearance: 0.0004,
        insertion_depth: 0.008,
        contact_stiffness: 5000.0,
        friction_mu: 0.3,
        tangential_stiffness: 50.0,
        seat_preload: 1e-5,
        gel_stiffness: 2000.0,
        grip_force: 70.0,
        torque_weight: 1.0,
        tactile_extent: (0.019, 0.016),
        tactile_resolution: (64, 64),
        camera_offset: Pose::new(0.0, -0.004, 0.04, 0.0, 0.0),
        camera_focal: 128.0,
        camera_resolution: (64, 64),
        camera_line_width: 5.0,
        noise_sigma_tactile: 0.02,
        noise_sigma_camera: 0.02,
        slip_enabled: false,
        slip_mu: 0.2,
    }
}

fn parse_f64(key: &str, v: &str) -> Result<f64> {
    v.trim().parse().map_err(|e| Error::Parse(format!("{key}: '{v}': {e}")))
}

fn parse_pair<T: std::str::FromStr>(key: &str, v: &str) -> Result<(T, T)>
where
    T::Err: std::fmt::Display,
{
    let parts: Vec<&str> = v.split(',').map(str::trim).collect();
    if parts.len() != 2 {
        return Err(Error::Parse(format!("{key}: expected two comma-separated values, got '{v}'")));
    }
    let p = |s: &str| s.parse::<T>().map_err(|e| Error::Parse(format!("{key}: '{s}': {e}")));
    Ok((p(parts[0])?, p(parts[1])?))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.trim() {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        other => Err(Error::Parse(format!("{key}: expected true/false, got '{other}'"))),
    }
}

impl SceneConfig {
    /// Parses flat `key = value` text. Blank lines and `#` comments are
    /// ignored; missing keys keep their defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut s = default_scene();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, val) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("line {}: expected key = value", lineno + 1)))?;
            let key = key.trim();
            let val = val.trim();
            match key {
                "part_width" => s.part_width = parse_f64(key, val)?,
                "part_thickness" => s.part_thickness = parse_f64(key, val)?,
                "part_length" => s.part_length = parse_f64(key, val)?,
                "receptacle_clearance" => s.receptacle_clearance = parse_f64(key, val)?,
                "insertion_depth" => s.insertion_depth = parse_f64(key, val)?,
                "contact_stiffness" => s.contact_stiffness = parse_f64(key, val)?,
                "friction_mu" => s.friction_mu = parse_f64(key, val)?,
                "tangential_stiffness" => s.tangential_stiffness = parse_f64(key, val)?,
                "seat_preload" => s.seat_preload = parse_f64(key, val)?,
                "gel_stiffness" => s.gel_stiffness = parse_f64(key, val)?,
                "grip_force" => s.grip_force = parse_f64(key, val)?,
                "torque_weight" => s.torque_weight = parse_f64(key, val)?,
                "tactile_extent" => s.tactile_extent = parse_pair(key, val)?,
                "tactile_resolution" => s.tactile_resolution = parse_pair(key, val)?,
                "camera_offset" => s.camera_offset = val.parse()?,
                "camera_focal" => s.camera_focal = parse_f64(key, val)?,
                "camera_resolution" => s.camera_resolution = parse_pair(key, val)?,
                "camera_line_width" => s.camera_line_width = parse_f64(key, val)?,
                "noise_sigma_tactile" => s.noise_sigma_tactile = parse_f64(key, val)?,
                "noise_sigma_camera" => s.noise_sigma_camera = parse_f64(key, val)?,
                "slip_enabled" => s.slip_enabled = parse_bool(key, val)?,
                "slip_mu" => s.slip_mu = parse_f64(key, val)?,
                other => return Err(Error::Parse(format!("line {}: unknown key '{other}'", lineno + 1))),
            }
        }
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Canonical text form; `parse(to_text())` reproduces the config.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("part_width", self.part_width.to_string());
        kv("part_thickness", self.part_thickness.to_string());
        kv("part_length", self.part_length.to_string());
        kv("receptacle_clearance", self.receptacle_clearance.to_string());
        kv("insertion_depth", self.insertion_depth.to_string());
        kv("contact_stiffness", self.contact_stiffness.to_string());
        kv("friction_mu", self.friction_mu.to_string());
        kv("tangential_stiffness", self.tangential_stiffness.to_string());
        kv("seat_preload", self.seat_preload.to_string());
        kv("gel_stiffness", self.gel_stiffness.to_string());
        kv("grip_force", self.grip_force.to_string());
        kv("torque_weight", self.torque_weight.to_string());
        kv("tactile_extent", format!("{},{}", self.tactile_extent.0, self.tactile_extent.1));
        kv("tactile_resolution", format!("{},{}", self.tactile_resolution.0, self.tactile_resolution.1));
        kv("camera_offset", self.camera_offset.to_string());
        kv("camera_focal", self.camera_focal.to_string());
        kv("camera_resolution", format!("{},{}", self.camera_resolution.0, self.camera_resolution.1));
        kv("camera_line_width", self.camera_line_width.to_string());
        kv("noise_sigma_tactile", self.noise_sigma_tactile.to_string());
        kv("noise_sigma_camera", self.noise_sigma_camera.to_string());
        kv("slip_enabled", self.slip_enabled.to_string());
        kv("slip_mu", self.slip_mu.to_string());
        out
    }

    /// SHA-256 of the canonical text, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("part_width", self.part_width),
            ("part_thickness", self.part_thickness),
            ("part_length", self.part_length),
            ("receptacle_clearance", self.receptacle_clearance),
            ("insertion_depth", self.insertion_depth),
            ("contact_stiffness", self.contact_stiffness),
            ("grip_force", self.grip_force),
            ("tactile_extent.w", self.tactile_extent.0),
            ("tactile_extent.h", self.tactile_extent.1),
            ("camera_focal", self.camera_focal),
            ("camera_line_width", self.camera_line_width),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidScene(format!("{name} must be positive and finite, got {v}")));
            }
        }
        let non_negative = [
            ("friction_mu", self.friction_mu),
            ("tangential_stiffness", self.tangential_stiffness),
            ("seat_preload", self.seat_preload),
            ("gel_stiffness", self.gel_stiffness),
            ("torque_weight", self.torque_weight),
            ("noise_sigma_tactile", self.noise_sigma_tactile),
            ("noise_sigma_camera", self.noise_sigma_camera),
            ("slip_mu", self.slip_mu),
        ];
        for (name, v) in non_negative {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidScene(format!("{name} must be non-negative and finite, got {v}")));
            }
        }
        if self.receptacle_clearance >= self.part_width / 2.0 {
            return Err(Error::InvalidScene(format!(
                "receptacle_clearance {} must be below part_width/2 = {}",
                self.receptacle_clearance,
                self.part_width / 2.0
            )));
        }
        if self.insertion_depth >= self.part_length {
            return Err(Error::InvalidScene(format!(
                "insertion_depth {} must be below part_length {}",
                self.insertion_depth, self.part_length
            )));
        }
        let (tw, th) = self.tactile_resolution;
        let (cw, ch) = self.camera_resolution;
        if tw == 0 || th == 0 || cw == 0 || ch == 0 {
            return Err(Error::InvalidScene("image resolutions must be non-zero".into()));
        }
        Ok(())
    }

    /// Slot half-widths along x and y.
    pub fn slot_half_extents(&self) -> (f64, f64) {
        (
            self.part_width / 2.0 + self.receptacle_clearance,
            self.part_thickness / 2.0 + self.receptacle_clearance,
        )
    }

    /// Pose of the fully seated part (tip resting on the slot floor).
    pub fn seated_part_pose(&self) -> Pose {
        Pose::translation(0.0, 0.0, -(self.insertion_depth + self.seat_preload))
    }
}

/// Mutable simulator state for one episode.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SimState {
    pub gripper_pose: Pose,
    /// Part pose in the gripper frame.
    pub grasp_offset: Pose,
    pub gripper_closed: bool,
    /// Gel shear along the gripper y (jaw) axis, applied on top of the
    /// grasp offset.
    pub gel_deflection: f64,
    /// Where the part sits when the gripper is open.
    pub resting_part: Pose,
}

impl SimState {
    /// Gripper closed on the part with the given offset.
    pub fn grasped(gripper_pose: Pose, grasp_offset: Pose) -> Self {
        Self {
            gripper_pose,
            grasp_offset,
            gripper_closed: true,
            gel_deflection: 0.0,
            resting_part: gripper_pose.compose(&grasp_offset),
        }
    }

    /// Grasp offset including the current gel shear.
    pub fn effective_offset(&self) -> Pose {
        if self.gel_deflection == 0.0 {
            self.grasp_offset
        } else {
            Pose::translation(0.0, self.gel_deflection, 0.0).compose(&self.grasp_offset)
        }
    }

    /// Part pose in the world, whether held or resting.
    pub fn part_world(&self) -> Pose {
        if self.gripper_closed {
            self.gripper_pose.compose(&self.effective_offset())
        } else {
            self.resting_part
        }
    }
}

pub fn part_pose_in_world(_scene: &SceneConfig, state: &SimState) -> Result<Pose> {
    if !state.gripper_closed {
        return Err(Error::GripperOpen);
    }
    Ok(state.gripper_pose.compose(&state.effective_offset()))
}
