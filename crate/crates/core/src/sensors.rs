//! Synthetic tactile and wrist-camera images.
//!
//! The tactile pad lies in the gripper x–z plane, centred on the gripper
//! x-axis at height `part_length / 2`, so that a part held with the identity
//! offset appears as a centred upright rectangle. Column index grows with
//! gripper x, row index grows with decreasing gripper z.
//!
//! The wrist camera sits at `gripper ∘ camera_offset` and looks along its
//! local −z axis. It draws the slot opening and the part tip outline as
//! anti-aliased lines on a dark background.

use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::geometry::{Pose, Vec3};
use crate::scene::SceneConfig;

const SUPERSAMPLE: usize = 4;
const CAMERA_BACKGROUND: f64 = 0.1;

/// Grayscale raster, row-major, values in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0.0; width * height] }
    }

    pub fn filled(width: usize, height: usize, v: f32) -> Self {
        Self { width, height, data: vec![v; width * height] }
    }

    pub fn get(&self, col: usize, row: usize) -> f32 {
        self.data[row * self.width + col]
    }

    /// 8-byte header (u32 LE width, height) then f32 LE pixels.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 4 * self.data.len());
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::Parse("image shorter than its header".into()));
        }
        let w = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
        let h = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let expected = w.checked_mul(h).and_then(|n| n.checked_mul(4)).and_then(|n| n.checked_add(8));
        if expected != Some(bytes.len()) {
            return Err(Error::Parse(format!("image {w}x{h} does not match {} bytes", bytes.len())));
        }
        let data = bytes[8..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        Ok(Self { width: w, height: h, data })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Non-overlapping `k × k` average pooling; trailing rows/columns that do
    /// not fill a block are dropped.
    pub fn pooled(&self, k: usize) -> Image {
        if k <= 1 {
            return self.clone();
        }
        let (w, h) = (self.width / k, self.height / k);
        let mut out = Image::new(w, h);
        let norm = 1.0 / (k * k) as f32;
        for r in 0..h {
            for c in 0..w {
                let mut acc = 0.0f32;
                for dr in 0..k {
                    let row = (r * k + dr) * self.width + c * k;
                    for v in &self.data[row..row + k] {
                        acc += v;
                    }
                }
                out.data[r * w + c] = acc * norm;
            }
        }
        out
    }

    /// Intensity-weighted centroid `(col, row)` and major-axis angle, the
    /// angle measured from the column axis toward the row axis.
    pub fn moments(&self) -> (f64, f64, f64) {
        self.moments_scaled(1.0, 1.0)
    }

    /// As [`Image::moments`] with pixel pitches `sx` (columns) and `sy`
    /// (rows); centroid and angle are in those units.
    pub fn moments_scaled(&self, sx: f64, sy: f64) -> (f64, f64, f64) {
        let mut m0 = 0.0;
        let (mut mx, mut my) = (0.0, 0.0);
        for r in 0..self.height {
            for c in 0..self.width {
                let v = self.get(c, r) as f64;
                m0 += v;
                mx += v * (c as f64 + 0.5) * sx;
                my += v * (r as f64 + 0.5) * sy;
            }
        }
        let (cx, cy) = (mx / m0, my / m0);
        let (mut m20, mut m02, mut m11) = (0.0, 0.0, 0.0);
        for r in 0..self.height {
            for c in 0..self.width {
                let v = self.get(c, r) as f64;
                let dx = (c as f64 + 0.5) * sx - cx;
                let dy = (r as f64 + 0.5) * sy - cy;
                m20 += v * dx * dx;
                m02 += v * dy * dy;
                m11 += v * dx * dy;
            }
        }
        (cx, cy, 0.5 * (2.0 * m11).atan2(m20 - m02))
    }
}

fn add_noise<R: Rng + ?Sized>(img: &mut Image, sigma: f64, rng: &mut R) {
    for v in img.data.iter_mut() {
        let n: f64 = if sigma > 0.0 { rng.sample::<f64, _>(StandardNormal) * sigma } else { 0.0 };
        *v = ((*v as f64) + n).clamp(0.0, 1.0) as f32;
    }
}

/// Noiseless tactile imprint for a grasp offset (part pose in gripper frame).
pub fn tactile_clean(scene: &SceneConfig, grasp_offset: &Pose) -> Result<Image> {
    let (w, h) = scene.tactile_resolution;
    let (ew, eh) = scene.tactile_extent;
    let zc = scene.part_length / 2.0;
    let base = 0.8 * scene.grip_force / 70.0;
    let inv = grasp_offset.inverse();
    let hw = scene.part_width / 2.0;
    let len = scene.part_length;
    let y0 = grasp_offset.y();
    let mut img = Image::new(w, h);
    let mut total = 0usize;
    let ss = SUPERSAMPLE as f64;
    for r in 0..h {
        for c in 0..w {
            let mut hits = 0usize;
            for sr in 0..SUPERSAMPLE {
                let gz = zc + eh / 2.0 - (r as f64 + (sr as f64 + 0.5) / ss) * eh / h as f64;
                for sc in 0..SUPERSAMPLE {
                    let gx = -ew / 2.0 + (c as f64 + (sc as f64 + 0.5) / ss) * ew / w as f64;
                    let p = inv.apply([gx, y0, gz]);
                    if p[0].abs() <= hw && p[2] >= 0.0 && p[2] <= len {
                        hits += 1;
                    }
                }
            }
            total += hits;
            img.data[r * w + c] = (base * hits as f64 / (ss * ss)).clamp(0.0, 1.0) as f32;
        }
    }
    if total == 0 {
        return Err(Error::OffSensor);
    }
    Ok(img)
}

pub fn render_tactile<R: Rng + ?Sized>(scene: &SceneConfig, grasp_offset: &Pose, rng: &mut R) -> Result<Image> {
    let mut img = tactile_clean(scene, grasp_offset)?;
    add_noise(&mut img, scene.noise_sigma_tactile, rng);
    Ok(img)
}

/// Per-pixel median of `n` independent renders (`n` odd).
pub fn capture_filtered<R: Rng + ?Sized>(scene: &SceneConfig, grasp_offset: &Pose, rng: &mut R, n: usize) -> Result<Image> {
    if n == 0 || n % 2 == 0 {
        return Err(Error::InvalidArgument(format!("median filter needs an odd capture count, got {n}")));
    }
    let clean = tactile_clean(scene, grasp_offset)?;
    if n == 1 {
        let mut img = clean;
        add_noise(&mut img, scene.noise_sigma_tactile, rng);
        return Ok(img);
    }
    let frames: Vec<Image> = (0..n)
        .map(|_| {
            let mut f = clean.clone();
            add_noise(&mut f, scene.noise_sigma_tactile, rng);
            f
        })
        .collect();
    let mut out = clean;
    let mut buf = vec![0.0f32; n];
    for i in 0..out.data.len() {
        for (k, f) in frames.iter().enumerate() {
            buf[k] = f.data[i];
        }
        buf.sort_by(|a, b| a.total_cmp(b));
        out.data[i] = buf[n / 2];
    }
    Ok(out)
}

/// World-frame line segments seen by the wrist camera.
pub fn camera_segments(scene: &SceneConfig, part_pose: Option<&Pose>) -> Vec<(Vec3, Vec3)> {
    let (a, b) = scene.slot_half_extents();
    let mut segs = rectangle([[-a, -b, 0.0], [a, -b, 0.0], [a, b, 0.0], [-a, b, 0.0]]);
    if let Some(p) = part_pose {
        let hw = scene.part_width / 2.0;
        let ht = scene.part_thickness / 2.0;
        let c = [[-hw, -ht, 0.0], [hw, -ht, 0.0], [hw, ht, 0.0], [-hw, ht, 0.0]].map(|v| p.apply(v));
        segs.extend(rectangle(c));
    }
    segs
}

fn rectangle(c: [Vec3; 4]) -> Vec<(Vec3, Vec3)> {
    (0..4).map(|i| (c[i], c[(i + 1) % 4])).collect()
}

fn project(scene: &SceneConfig, cam_inv: &Pose, p: Vec3) -> Option<(f64, f64)> {
    let (w, h) = scene.camera_resolution;
    let q = cam_inv.apply(p);
    let d = -q[2];
    if d <= 1e-6 {
        return None;
    }
    let f = scene.camera_focal;
    Some((w as f64 / 2.0 + f * q[0] / d, h as f64 / 2.0 - f * q[1] / d))
}

fn point_segment_distance(px: f64, py: f64, a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 { (((px - a.0) * dx + (py - a.1) * dy) / len2).clamp(0.0, 1.0) } else { 0.0 };
    let (cx, cy) = (a.0 + t * dx - px, a.1 + t * dy - py);
    (cx * cx + cy * cy).sqrt()
}

/// Noiseless wrist-camera image.
pub fn camera_clean(scene: &SceneConfig, gripper_pose: &Pose, part_pose: Option<&Pose>) -> Image {
    let (w, h) = scene.camera_resolution;
    let cam_inv = gripper_pose.compose(&scene.camera_offset).inverse();
    let segs: Vec<((f64, f64), (f64, f64))> = camera_segments(scene, part_pose)
        .into_iter()
        .filter_map(|(a, b)| Some((project(scene, &cam_inv, a)?, project(scene, &cam_inv, b)?)))
        .collect();
    let lw = scene.camera_line_width;
    let mut img = Image::filled(w, h, CAMERA_BACKGROUND as f32);
    for r in 0..h {
        let py = r as f64 + 0.5;
        for c in 0..w {
            let px = c as f64 + 0.5;
            let mut cov: f64 = 0.0;
            for (a, b) in &segs {
                // cheap reject on the bounding box grown by the falloff
                if px < a.0.min(b.0) - lw || px > a.0.max(b.0) + lw || py < a.1.min(b.1) - lw || py > a.1.max(b.1) + lw {
                    continue;
                }
                cov = cov.max((1.0 - point_segment_distance(px, py, *a, *b) / lw).clamp(0.0, 1.0));
            }
            img.data[r * w + c] = (CAMERA_BACKGROUND + (1.0 - CAMERA_BACKGROUND) * cov) as f32;
        }
    }
    img
}

pub fn render_camera<R: Rng + ?Sized>(scene: &SceneConfig, gripper_pose: &Pose, part_pose: Option<&Pose>, rng: &mut R) -> Image {
    let mut img = camera_clean(scene, gripper_pose, part_pose);
    add_noise(&mut img, scene.noise_sigma_camera, rng);
    img
}

/// `clamp(c · (x − 0.5) + 0.5 + (b − 1) · 0.5)` per pixel.
pub fn jitter_with(img: &Image, contrast: f64, brightness: f64) -> Image {
    let mut out = img.clone();
    for v in out.data.iter_mut() {
        *v = (contrast * (*v as f64 - 0.5) + 0.5 + (brightness - 1.0) * 0.5).clamp(0.0, 1.0) as f32;
    }
    out
}

/// Brightness/contrast jitter with both factors drawn from U[0.7, 1.3].
pub fn jitter<R: Rng + ?Sized>(img: &Image, rng: &mut R) -> Image {
    let c = rng.random_range(0.7..=1.3);
    let b = rng.random_range(0.7..=1.3);
    jitter_with(img, c, b)
}

/// Shifts an image by `k` columns (positive moves content right),
/// replicating the edge column into the vacated strip.
pub fn shift_columns(img: &Image, k: i64) -> Image {
    let mut out = img.clone();
    let w = img.width as i64;
    for r in 0..img.height {
        for c in 0..w {
            let src = (c - k).clamp(0, w - 1) as usize;
            out.data[r * img.width + c as usize] = img.data[r * img.width + src];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::default_scene;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn quiet() -> SceneConfig {
        SceneConfig { noise_sigma_tactile: 0.0, noise_sigma_camera: 0.0, ..default_scene() }
    }

    #[test]
    fn identity_offset_is_centred() {
        let s = quiet();
        let img = tactile_clean(&s, &Pose::identity()).unwrap();
        let (cx, cy, _) = img.moments();
        assert!((cx - 32.0).abs() < 1e-6 && (cy - 32.0).abs() < 1e-6);
        for r in 0..64 {
            for c in 0..32 {
                assert_eq!(img.get(c, r), img.get(63 - c, r));
            }
        }
    }

    #[test]
    fn x_shift_moves_centroid() {
        let s = quiet();
        let (c0, _, _) = tactile_clean(&s, &Pose::identity()).unwrap().moments();
        let (c1, _, _) = tactile_clean(&s, &Pose::translation(0.003, 0.0, 0.0)).unwrap().moments();
        let expected = 0.003 * 64.0 / s.tactile_extent.0;
        assert!((c1 - c0 - expected).abs() < 0.05, "{} vs {}", c1 - c0, expected);
    }

    #[test]
    fn rotation_tilts_principal_axis() {
        let s = quiet();
        let (sx, sy) = (s.tactile_extent.0 / 64.0, s.tactile_extent.1 / 64.0);
        let beta = std::f64::consts::PI / 20.0;
        let (_, _, a0) = tactile_clean(&s, &Pose::identity()).unwrap().moments_scaled(sx, sy);
        let (_, _, a1) = tactile_clean(&s, &Pose::rotate_y(beta)).unwrap().moments_scaled(sx, sy);
        let d = a1 - a0;
        assert!((d.abs() - beta).abs() < 0.01, "{d}");
    }

    #[test]
    fn off_sensor_is_an_error() {
        let s = quiet();
        assert!(matches!(tactile_clean(&s, &Pose::translation(0.05, 0.0, 0.0)), Err(Error::OffSensor)));
    }

    #[test]
    fn median_filter_cases() {
        let s = default_scene();
        let o = Pose::new(0.001, 0.0, -0.004, 0.05, 0.0);
        let a = capture_filtered(&s, &o, &mut ChaCha8Rng::seed_from_u64(3), 1).unwrap();
        let b = render_tactile(&s, &o, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
        let q = quiet();
        let m = capture_filtered(&q, &o, &mut ChaCha8Rng::seed_from_u64(3), 5).unwrap();
        assert_eq!(m, tactile_clean(&q, &o).unwrap());
        assert!(capture_filtered(&s, &o, &mut ChaCha8Rng::seed_from_u64(3), 4).is_err());
    }

    #[test]
    fn camera_is_symmetric_when_centred() {
        let s = SceneConfig { camera_offset: Pose::translation(0.0, 0.0, 0.045), ..quiet() };
        let g = Pose::translation(0.0, 0.0, 0.009);
        let img = camera_clean(&s, &g, None);
        for r in 0..64 {
            for c in 0..32 {
                assert!((img.get(c, r) - img.get(63 - c, r)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn camera_shift_follows_projection() {
        // thin lines so edge clipping does not move the centroid
        let s = SceneConfig { camera_line_width: 1.0, ..quiet() };
        let g0 = Pose::translation(0.0, 0.0, 0.009);
        let g1 = g0.shifted(0.005, 0.0, 0.0);
        let (c0, _, _) = camera_clean(&s, &g0, None).moments();
        let (c1, _, _) = camera_clean(&s, &g1, None).moments();
        let depth = 0.009 + s.camera_offset.z();
        let expected = -s.camera_focal * 0.005 / depth;
        // background dilutes the centroid; compare after removing it
        let strip = |g: &Pose| {
            let mut img = camera_clean(&s, g, None);
            for v in img.data.iter_mut() {
                *v -= CAMERA_BACKGROUND as f32;
            }
            img.moments().0
        };
        let shift = strip(&g1) - strip(&g0);
        assert!((shift - expected).abs() < 0.1, "{shift} vs {expected}");
        assert!(c1 < c0);
    }

    #[test]
    fn renders_are_deterministic() {
        let s = default_scene();
        let g = Pose::new(0.001, -0.002, 0.01, 0.1, 0.0);
        let a = render_camera(&s, &g, Some(&g), &mut ChaCha8Rng::seed_from_u64(9));
        let b = render_camera(&s, &g, Some(&g), &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
        assert!(a.data.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn jitter_formula() {
        let img = Image::filled(4, 4, 0.3);
        assert_eq!(jitter_with(&img, 1.0, 1.0), img);
        let mid = Image::filled(4, 4, 0.5);
        assert_eq!(jitter_with(&mid, 1.27, 1.0), mid);
        let up = jitter_with(&mid, 1.0, 1.3);
        assert!((up.data[0] - 0.65).abs() < 1e-6);
        let sat = jitter_with(&Image::filled(2, 2, 0.95), 1.3, 1.3);
        assert_eq!(sat.data[0], 1.0);
    }

    #[test]
    fn image_bytes_round_trip() {
        let mut img = Image::new(3, 2);
        img.data = vec![0.0, 0.25, 0.5, 0.75, 1.0, 0.125];
        let back = Image::from_bytes(&img.to_bytes()).unwrap();
        assert_eq!(back, img);
        assert!(Image::from_bytes(&img.to_bytes()[..10]).is_err());
        assert_eq!(img.pooled(2).data, vec![(0.0 + 0.25 + 0.75 + 1.0) / 4.0]);
    }
}
