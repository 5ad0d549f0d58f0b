//! Procedural synthetic-video pipeline: ray-cast capsule-body renderer with
//! exact pose/camera annotations, hand-authored motion schedules, procedural
//! camera paths, dataset I/O, and the two training-time augmentations
//! (structured translation and frame-rate modulation).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::body::{forward_kinematics, write_pose_lines, parse_pose_lines, BodyPose, Skeleton};
use crate::error::{Error, Result};
use crate::geometry::{
    add3, dot3, mat3_mul_vec, mat3_transpose, normalize3, parse_camera_lines, scale3, sub3,
    write_camera_lines, CameraPose, Vec3,
};
use crate::parallel;
use crate::rng::substream;
use crate::tensor::Tensor;

/// Depth range shared by every generated camera, so annotations round-trip
/// through the 16-number camera text format without extra state.
pub const DEFAULT_NEAR: f64 = 0.1;
pub const DEFAULT_FAR: f64 = 100.0;

// -- backgrounds -------------------------------------------------------------

/// Screen-space procedural background.
#[derive(Debug, Clone, PartialEq)]
pub enum Background {
    /// Single flat color.
    Flat([f32; 3]),
    /// Vertical gradient from the top color to the bottom color.
    Gradient([f32; 3], [f32; 3]),
    /// Two-color checkerboard with square cells of the given pixel size.
    Checker([f32; 3], [f32; 3], usize),
}

fn fmt_rgb(c: [f32; 3]) -> String {
    format!("{},{},{}", c[0], c[1], c[2])
}

fn parse_rgb(s: &str) -> Result<[f32; 3]> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return Err(Error::Parse(format!("expected r,g,b triple, got {s:?}")));
    }
    let mut c = [0.0f32; 3];
    for (i, p) in parts.iter().enumerate() {
        c[i] = p
            .trim()
            .parse::<f32>()
            .map_err(|e| Error::Parse(format!("bad color component {p:?}: {e}")))?;
    }
    Ok(c)
}

impl Background {
    /// Color of the background at pixel `(u, v)` of a `w`×`h` image.
    pub fn pixel(&self, u: usize, v: usize, _w: usize, h: usize) -> [f32; 3] {
        match self {
            Background::Flat(c) => *c,
            Background::Gradient(top, bottom) => {
                let t = if h > 1 { v as f32 / (h - 1) as f32 } else { 0.0 };
                [
                    top[0] + t * (bottom[0] - top[0]),
                    top[1] + t * (bottom[1] - top[1]),
                    top[2] + t * (bottom[2] - top[2]),
                ]
            }
            Background::Checker(a, b, cell) => {
                let cell = (*cell).max(1);
                if (u / cell + v / cell) % 2 == 0 {
                    *a
                } else {
                    *b
                }
            }
        }
    }

    /// Compact one-line identifier, parseable by [`Background::parse`].
    pub fn format(&self) -> String {
        match self {
            Background::Flat(c) => format!("flat:{}", fmt_rgb(*c)),
            Background::Gradient(a, b) => format!("gradient:{};{}", fmt_rgb(*a), fmt_rgb(*b)),
            Background::Checker(a, b, cell) => {
                format!("checker:{};{};{}", fmt_rgb(*a), fmt_rgb(*b), cell)
            }
        }
    }

    pub fn parse(s: &str) -> Result<Background> {
        let (kind, rest) = s
            .split_once(':')
            .ok_or_else(|| Error::Parse(format!("background missing kind prefix: {s:?}")))?;
        let parts: Vec<&str> = rest.split(';').collect();
        match (kind, parts.as_slice()) {
            ("flat", [c]) => Ok(Background::Flat(parse_rgb(c)?)),
            ("gradient", [a, b]) => Ok(Background::Gradient(parse_rgb(a)?, parse_rgb(b)?)),
            ("checker", [a, b, cell]) => {
                let cell = cell
                    .trim()
                    .parse::<usize>()
                    .map_err(|e| Error::Parse(format!("bad checker cell {cell:?}: {e}")))?;
                Ok(Background::Checker(parse_rgb(a)?, parse_rgb(b)?, cell))
            }
            _ => Err(Error::Parse(format!("unrecognized background {s:?}"))),
        }
    }
}

// -- appearance and rendering ------------------------------------------------

/// Per-character shading: base color and diffuse strength.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Appearance {
    pub color: [f32; 3],
    pub shade: f32,
}

impl Appearance {
    pub fn format(&self) -> String {
        format!("{},{}", fmt_rgb(self.color), self.shade)
    }

    pub fn parse(s: &str) -> Result<Appearance> {
        let parts: Vec<&str> = s.split(',').collect();
        if parts.len() != 4 {
            return Err(Error::Parse(format!("expected r,g,b,shade, got {s:?}")));
        }
        let color = parse_rgb(&parts[..3].join(","))?;
        let shade = parts[3]
            .trim()
            .parse::<f32>()
            .map_err(|e| Error::Parse(format!("bad shade {:?}: {e}", parts[3])))?;
        Ok(Appearance { color, shade })
    }
}

/// One posed character to render.
#[derive(Debug, Clone, Copy)]
pub struct SceneBody<'a> {
    pub skeleton: &'a Skeleton,
    pub pose: &'a BodyPose,
    pub appearance: Appearance,
}

/// Fixed world-space directional light (unit vector toward the light).
fn light_dir() -> Vec3 {
    normalize3([0.4, 0.8, 0.35])
}

const AMBIENT: f32 = 0.35;

struct WorldCapsule {
    a: Vec3,
    b: Vec3,
    radius: f64,
    appearance: Appearance,
}

fn collect_capsules(bodies: &[SceneBody]) -> Result<Vec<WorldCapsule>> {
    let mut caps = Vec::new();
    for body in bodies {
        let transforms = forward_kinematics(body.skeleton, body.pose)?;
        for (j, joint) in body.skeleton.joints().iter().enumerate() {
            let a = transforms[j].apply([0.0; 3]);
            let b = transforms[j].apply(body.skeleton.tip_local(j));
            caps.push(WorldCapsule {
                a,
                b,
                radius: joint.radius,
                appearance: body.appearance,
            });
        }
    }
    Ok(caps)
}

/// Nearest intersection of the ray `o + t d` (unit `d`, `t > 0`) with a
/// capsule, as `(t, outward unit normal)`.
fn ray_capsule(o: Vec3, d: Vec3, cap: &WorldCapsule) -> Option<(f64, Vec3)> {
    const T_MIN: f64 = 1e-6;
    let r = cap.radius;
    let mut best: Option<(f64, Vec3)> = None;
    let mut consider = |t: f64, normal: Vec3| {
        if t > T_MIN && best.map_or(true, |(bt, _)| t < bt) {
            best = Some((t, normal));
        }
    };

    let ab = sub3(cap.b, cap.a);
    let len = dot3(ab, ab).sqrt();
    if len > 1e-9 {
        // Infinite-cylinder quadratic around the axis, accepted only when the
        // hit's axial coordinate falls inside the segment.
        let u = scale3(ab, 1.0 / len);
        let m = sub3(o, cap.a);
        let md = dot3(m, u);
        let nd = dot3(d, u);
        let aq = 1.0 - nd * nd;
        let bq = 2.0 * (dot3(m, d) - md * nd);
        let cq = dot3(m, m) - md * md - r * r;
        if aq > 1e-12 {
            let disc = bq * bq - 4.0 * aq * cq;
            if disc >= 0.0 {
                let t = (-bq - disc.sqrt()) / (2.0 * aq);
                let s = md + t * nd;
                if (0.0..=len).contains(&s) {
                    let p = add3(o, scale3(d, t));
                    let axis_point = add3(cap.a, scale3(u, s));
                    consider(t, scale3(sub3(p, axis_point), 1.0 / r));
                }
            }
        }
    }
    // Hemispherical caps (full spheres; the union is the same shape).
    for center in [cap.a, cap.b] {
        let m = sub3(o, center);
        let b_half = dot3(m, d);
        let c = dot3(m, m) - r * r;
        let disc = b_half * b_half - c;
        if disc >= 0.0 {
            let t = -b_half - disc.sqrt();
            if t > T_MIN {
                let p = add3(o, scale3(d, t));
                consider(t, scale3(sub3(p, center), 1.0 / r));
            }
        }
    }
    best
}

fn clamp01(x: f32) -> f32 {
    x.clamp(0.0, 1.0)
}

/// Depth-buffered ray-cast rendering of capsule bodies with Lambertian
/// shading from a fixed directional light, over a procedural background.
/// Deterministic given its inputs. Returns an `[h, w, 3]` tensor in [0, 1].
pub fn render_frame(
    bodies: &[SceneBody],
    camera: &CameraPose,
    background: &Background,
    width: usize,
    height: usize,
) -> Result<Tensor> {
    if width == 0 || height == 0 {
        return Err(Error::InvalidArg("render_frame: zero image extent".into()));
    }
    let caps = collect_capsules(bodies)?;
    let origin = camera.center_world();
    let rt = mat3_transpose(&camera.rotation);
    let light = light_dir();

    let mut data = vec![0.0f32; height * width * 3];
    parallel::for_each_chunk_mut(&mut data, width * 3, |v, row| {
        for u in 0..width {
            let d_cam = normalize3([
                (u as f64 + 0.5 - camera.cx) / camera.fx,
                (v as f64 + 0.5 - camera.cy) / camera.fy,
                1.0,
            ]);
            let dir = mat3_mul_vec(&rt, d_cam);
            let mut nearest: Option<(f64, Vec3, Appearance)> = None;
            for cap in &caps {
                if let Some((t, n)) = ray_capsule(origin, dir, cap) {
                    if nearest.as_ref().map_or(true, |(bt, _, _)| t < *bt) {
                        nearest = Some((t, n, cap.appearance));
                    }
                }
            }
            let rgb = match nearest {
                Some((_, n, app)) => {
                    let diffuse = dot3(n, light).max(0.0) as f32;
                    let lum = AMBIENT + app.shade * diffuse;
                    [
                        clamp01(app.color[0] * lum),
                        clamp01(app.color[1] * lum),
                        clamp01(app.color[2] * lum),
                    ]
                }
                None => background.pixel(u, v, width, height),
            };
            row[u * 3..u * 3 + 3].copy_from_slice(&rgb);
        }
    });
    Ok(Tensor::from_vec(&[height, width, 3], data)?)
}

/// Depth-buffered ray-cast rendering of capsule bodies into a normal map:
/// each hit pixel stores the camera-space outward surface normal mapped to
/// RGB as `(n + 1) / 2`; background pixels are black. Used as the rendered
/// 2D pose condition of the flat-conditioning ablation baseline.
pub fn render_normal_map(
    bodies: &[SceneBody],
    camera: &CameraPose,
    width: usize,
    height: usize,
) -> Result<Tensor> {
    if width == 0 || height == 0 {
        return Err(Error::InvalidArg("render_normal_map: zero image extent".into()));
    }
    let caps = collect_capsules(bodies)?;
    let origin = camera.center_world();
    let rt = mat3_transpose(&camera.rotation);

    let mut data = vec![0.0f32; height * width * 3];
    parallel::for_each_chunk_mut(&mut data, width * 3, |v, row| {
        for u in 0..width {
            let d_cam = normalize3([
                (u as f64 + 0.5 - camera.cx) / camera.fx,
                (v as f64 + 0.5 - camera.cy) / camera.fy,
                1.0,
            ]);
            let dir = mat3_mul_vec(&rt, d_cam);
            let mut nearest: Option<(f64, Vec3)> = None;
            for cap in &caps {
                if let Some((t, n)) = ray_capsule(origin, dir, cap) {
                    if nearest.map_or(true, |(bt, _)| t < bt) {
                        nearest = Some((t, n));
                    }
                }
            }
            if let Some((_, n)) = nearest {
                let nc = mat3_mul_vec(&camera.rotation, n);
                for ch in 0..3 {
                    row[u * 3 + ch] = clamp01((nc[ch] as f32 + 1.0) / 2.0);
                }
            }
        }
    });
    Ok(Tensor::from_vec(&[height, width, 3], data)?)
}

/// Capsule-area-weighted centroid of a posed body in world space. Each
/// capsule contributes its segment midpoint weighted by the silhouette area
/// `2 r L + pi r^2`.
pub fn body_centroid(skel: &Skeleton, pose: &BodyPose) -> Result<Vec3> {
    let transforms = forward_kinematics(skel, pose)?;
    let mut acc = [0.0f64; 3];
    let mut total = 0.0f64;
    for (j, joint) in skel.joints().iter().enumerate() {
        let a = transforms[j].apply([0.0; 3]);
        let b = transforms[j].apply(skel.tip_local(j));
        let len = crate::geometry::norm3(sub3(b, a));
        let w = 2.0 * joint.radius * len + std::f64::consts::PI * joint.radius * joint.radius;
        acc = add3(acc, scale3(add3(a, b), 0.5 * w));
        total += w;
    }
    Ok(scale3(acc, 1.0 / total))
}

/// Pixel-space projection of [`body_centroid`]; `None` when the centroid is
/// behind the camera.
pub fn projected_body_centroid(
    skel: &Skeleton,
    pose: &BodyPose,
    camera: &CameraPose,
) -> Result<Option<(f64, f64)>> {
    let c = body_centroid(skel, pose)?;
    let (u, v, depth) = camera.project_pixel(c);
    Ok((depth > 1e-9).then_some((u, v)))
}

// -- clips and annotations ---------------------------------------------------

/// A video clip: frames stacked as an `[F, H, W, 3]` tensor with values
/// clamped to [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct VideoClip {
    frames: Tensor,
}

impl VideoClip {
    /// Wrap a frame stack, clamping values into [0, 1].
    pub fn new(mut frames: Tensor) -> Result<Self> {
        if frames.rank() != 4 || frames.shape()[3] != 3 {
            return Err(Error::Shape(format!(
                "video clip must be [F, H, W, 3], got {:?}",
                frames.shape()
            )));
        }
        if frames.shape()[0] == 0 {
            return Err(Error::Shape("video clip must have at least one frame".into()));
        }
        for v in frames.data_mut() {
            *v = clamp01(*v);
        }
        Ok(VideoClip { frames })
    }

    pub fn frames(&self) -> &Tensor {
        &self.frames
    }

    pub fn frame_count(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.frames.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.frames.shape()[2]
    }

    /// Copy of frame `k` as an `[H, W, 3]` tensor.
    pub fn frame(&self, k: usize) -> Tensor {
        let (h, w) = (self.height(), self.width());
        let stride = h * w * 3;
        let data = self.frames.data()[k * stride..(k + 1) * stride].to_vec();
        Tensor::from_vec(&[h, w, 3], data).expect("frame slice has matching extent")
    }
}

/// Ground-truth annotation accompanying a clip: one [`BodyPose`] per
/// character per frame, one camera per frame, plus the scene description
/// needed to reproduce or re-render it.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipAnnotation {
    /// Frame-major: `poses[k][c]` is character `c` in frame `k`.
    pub poses: Vec<Vec<BodyPose>>,
    pub cameras: Vec<CameraPose>,
    pub background: Background,
    pub appearances: Vec<Appearance>,
    pub seed: u64,
    pub fps_rate: SpeedRate,
}

// -- motion schedules --------------------------------------------------------

/// Hand-authored joint-angle sinusoid families.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MotionFamily {
    WalkCycle,
    ArmWave,
    Squat,
    OrbitDance,
    /// Sample one of the four concrete families per clip.
    Mixed,
}

/// Per-clip draw of a motion schedule: concrete family plus phase, angular
/// frequency (radians per frame), amplitude scale, and ground position.
#[derive(Debug, Clone, Copy)]
pub struct MotionParams {
    pub family: MotionFamily,
    pub phase: f64,
    pub omega: f64,
    pub amp: f64,
    pub ground: Vec3,
}

/// Humanoid joint indices, matching [`Skeleton::humanoid`] order.
mod joint {
    pub const PELVIS: usize = 0;
    pub const SPINE: usize = 1;
    pub const CHEST: usize = 2;
    pub const HEAD: usize = 4;
    pub const L_UPPER_ARM: usize = 5;
    pub const L_FOREARM: usize = 6;
    pub const R_UPPER_ARM: usize = 7;
    pub const R_FOREARM: usize = 8;
    pub const L_THIGH: usize = 9;
    pub const L_SHIN: usize = 10;
    pub const L_FOOT: usize = 11;
    pub const R_THIGH: usize = 12;
    pub const R_SHIN: usize = 13;
    pub const R_FOOT: usize = 14;
}

/// Root height that puts the humanoid's feet on the ground plane.
const ROOT_HEIGHT: f64 = 0.9;
/// Arm-down bias about z (the rest pose is a T-pose).
const ARM_DOWN: f64 = 1.4;

/// Draw per-clip motion parameters; `Mixed` resolves to a concrete family.
pub fn sample_motion_params(
    family: MotionFamily,
    rng: &mut ChaCha8Rng,
    ground: Vec3,
) -> MotionParams {
    let family = match family {
        MotionFamily::Mixed => match rng.gen_range(0..4u32) {
            0 => MotionFamily::WalkCycle,
            1 => MotionFamily::ArmWave,
            2 => MotionFamily::Squat,
            _ => MotionFamily::OrbitDance,
        },
        f => f,
    };
    let base_omega = match family {
        MotionFamily::WalkCycle => std::f64::consts::TAU / 12.0,
        MotionFamily::ArmWave => std::f64::consts::TAU / 10.0,
        MotionFamily::Squat => std::f64::consts::TAU / 16.0,
        MotionFamily::OrbitDance => std::f64::consts::TAU / 20.0,
        MotionFamily::Mixed => unreachable!(),
    };
    MotionParams {
        family,
        phase: rng.gen_range(0.0..std::f64::consts::TAU),
        omega: base_omega * rng.gen_range(0.8..1.2),
        amp: rng.gen_range(0.85..1.15),
        ground,
    }
}

/// Evaluate a motion schedule at frame `k` for the 15-joint humanoid.
pub fn motion_pose(params: &MotionParams, k: usize) -> BodyPose {
    use joint::*;
    let mut pose = BodyPose::rest(15);
    let th = params.phase + params.omega * k as f64;
    let a = params.amp;
    let mut root = add3(params.ground, [0.0, ROOT_HEIGHT, 0.0]);
    let rot = &mut pose.rotations;
    rot[L_UPPER_ARM][2] = ARM_DOWN;
    rot[R_UPPER_ARM][2] = -ARM_DOWN;
    match params.family {
        MotionFamily::WalkCycle => {
            rot[L_THIGH][0] = 0.55 * a * th.sin();
            rot[R_THIGH][0] = -0.55 * a * th.sin();
            rot[L_SHIN][0] = -0.30 * a * (1.0 - (th - 0.5).cos());
            rot[R_SHIN][0] = -0.30 * a * (1.0 - (th + std::f64::consts::PI - 0.5).cos());
            rot[L_UPPER_ARM][0] = -0.40 * a * th.sin();
            rot[R_UPPER_ARM][0] = 0.40 * a * th.sin();
            rot[SPINE][1] = 0.08 * a * th.sin();
            rot[CHEST][1] = -0.08 * a * th.sin();
            root[1] += 0.02 * a * (2.0 * th).sin();
        }
        MotionFamily::ArmWave => {
            // Arms raised overhead, forearms waving in antiphase.
            rot[L_UPPER_ARM][2] = -1.2;
            rot[R_UPPER_ARM][2] = 1.2;
            rot[L_FOREARM][2] = -0.5 * a * th.sin();
            rot[R_FOREARM][2] = 0.5 * a * (th + 1.0).sin();
            rot[HEAD][0] = 0.10 * a * (0.5 * th).sin();
            rot[PELVIS][2] = 0.05 * a * th.sin();
            root[0] += 0.03 * a * th.sin();
        }
        MotionFamily::Squat => {
            let s = a * 0.5 * (1.0 - th.cos());
            let thigh = 1.1 * s;
            let shin_abs = 0.8 * s;
            rot[L_THIGH][0] = -thigh;
            rot[R_THIGH][0] = -thigh;
            rot[L_SHIN][0] = thigh + shin_abs;
            rot[R_SHIN][0] = thigh + shin_abs;
            rot[L_FOOT][0] = -shin_abs;
            rot[R_FOOT][0] = -shin_abs;
            rot[SPINE][0] = 0.30 * s;
            rot[L_UPPER_ARM][0] = -0.9 * s;
            rot[R_UPPER_ARM][0] = -0.9 * s;
            // Keep the feet near the ground as the knees fold.
            root[1] -= 0.40 * (1.0 - thigh.cos()) + 0.42 * (1.0 - shin_abs.cos());
        }
        MotionFamily::OrbitDance => {
            rot[PELVIS][1] = th;
            rot[L_UPPER_ARM][2] = ARM_DOWN - 1.1 - 0.35 * a * (3.0 * th).sin();
            rot[R_UPPER_ARM][2] = -ARM_DOWN + 1.1 + 0.35 * a * (3.0 * th).sin();
            rot[L_FOREARM][2] = -0.3 * a * (3.0 * th).cos();
            rot[R_FOREARM][2] = 0.3 * a * (3.0 * th).cos();
            rot[HEAD][2] = 0.15 * a * th.sin();
            root[0] += 0.08 * th.cos();
            root[2] += 0.08 * th.sin();
            root[1] += 0.03 * a * (2.0 * th).sin();
        }
        MotionFamily::Mixed => unreachable!("Mixed resolves at sampling time"),
    }
    pose.root_translation = root;
    pose
}

// -- camera paths ------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CameraFamily {
    Static,
    Orbit,
    Dolly,
    /// Sample one of the three concrete families per clip.
    Mixed,
}

/// Per-clip camera trajectory: azimuth/radius interpolate linearly over the
/// clip while the eye height, target, and intrinsics stay fixed.
#[derive(Debug, Clone)]
pub struct CameraPath {
    pub azimuth0: f64,
    pub d_azimuth: f64,
    pub radius0: f64,
    pub d_radius: f64,
    pub eye_height: f64,
    pub target: Vec3,
    pub intrinsics: (f64, f64, f64, f64),
    pub near: f64,
    pub far: f64,
}

/// Draw a camera path for a `w`×`h` image looking at `target`.
pub fn sample_camera_path(
    family: CameraFamily,
    rng: &mut ChaCha8Rng,
    target: Vec3,
    w: usize,
    h: usize,
    near: f64,
    far: f64,
) -> CameraPath {
    let family = match family {
        CameraFamily::Mixed => match rng.gen_range(0..3u32) {
            0 => CameraFamily::Static,
            1 => CameraFamily::Orbit,
            _ => CameraFamily::Dolly,
        },
        f => f,
    };
    let azimuth0 = rng.gen_range(0.0..std::f64::consts::TAU);
    let radius0 = rng.gen_range(2.6..3.4);
    let eye_height = rng.gen_range(1.0..1.8);
    let (d_azimuth, d_radius) = match family {
        CameraFamily::Static => (0.0, 0.0),
        CameraFamily::Orbit => {
            let sweep = rng.gen_range(1.0..2.1);
            let sign = if rng.gen_range(0..2u32) == 0 { 1.0 } else { -1.0 };
            (sign * sweep, 0.0)
        }
        CameraFamily::Dolly => {
            let travel = rng.gen_range(0.6..1.2);
            let sign = if rng.gen_range(0..2u32) == 0 { 1.0 } else { -1.0 };
            (0.0, sign * travel)
        }
        CameraFamily::Mixed => unreachable!(),
    };
    let f = 1.1 * w as f64;
    CameraPath {
        azimuth0,
        d_azimuth,
        radius0,
        d_radius,
        eye_height,
        target,
        intrinsics: (f, f, w as f64 / 2.0, h as f64 / 2.0),
        near,
        far,
    }
}

/// Camera for frame `k` of `frames`.
pub fn camera_at(path: &CameraPath, k: usize, frames: usize) -> Result<CameraPose> {
    let s = if frames > 1 {
        k as f64 / (frames - 1) as f64
    } else {
        0.0
    };
    let az = path.azimuth0 + path.d_azimuth * s;
    let radius = path.radius0 + path.d_radius * s;
    let eye = [
        path.target[0] + radius * az.sin(),
        path.eye_height,
        path.target[2] + radius * az.cos(),
    ];
    CameraPose::look_at(eye, path.target, [0.0, 1.0, 0.0], path.intrinsics, path.near, path.far)
}

// -- dataset generation ------------------------------------------------------

/// Scene recipe for [`generate_dataset`].
#[derive(Debug, Clone)]
pub struct DatasetConfig {
    pub width: usize,
    pub height: usize,
    /// Frames per clip (the training window length or longer).
    pub frames: usize,
    pub motion: MotionFamily,
    pub camera: CameraFamily,
    pub characters: usize,
    pub near: f64,
    pub far: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            width: 64,
            height: 64,
            frames: 17,
            motion: MotionFamily::Mixed,
            camera: CameraFamily::Mixed,
            characters: 1,
            near: DEFAULT_NEAR,
            far: DEFAULT_FAR,
        }
    }
}

fn generate_clip(config: &DatasetConfig, seed: u64, index: u64) -> Result<(VideoClip, ClipAnnotation)> {
    let mut rng = substream(seed, "synth-clip", index);
    let skel = Skeleton::humanoid();
    let chars = config.characters;

    let background = match rng.gen_range(0..3u32) {
        0 => Background::Flat([
            rng.gen_range(0.0..0.75),
            rng.gen_range(0.0..0.75),
            rng.gen_range(0.0..0.75),
        ]),
        1 => Background::Gradient(
            [
                rng.gen_range(0.0..0.75),
                rng.gen_range(0.0..0.75),
                rng.gen_range(0.0..0.75),
            ],
            [
                rng.gen_range(0.0..0.75),
                rng.gen_range(0.0..0.75),
                rng.gen_range(0.0..0.75),
            ],
        ),
        _ => {
            let cell = [4usize, 8, 16][rng.gen_range(0..3usize)];
            Background::Checker(
                [
                    rng.gen_range(0.0..0.75),
                    rng.gen_range(0.0..0.75),
                    rng.gen_range(0.0..0.75),
                ],
                [
                    rng.gen_range(0.0..0.75),
                    rng.gen_range(0.0..0.75),
                    rng.gen_range(0.0..0.75),
                ],
                cell,
            )
        }
    };

    let mut appearances = Vec::with_capacity(chars);
    let mut motions = Vec::with_capacity(chars);
    for c in 0..chars {
        appearances.push(Appearance {
            color: [
                rng.gen_range(0.2..1.0),
                rng.gen_range(0.2..1.0),
                rng.gen_range(0.2..1.0),
            ],
            shade: rng.gen_range(0.5..0.85),
        });
        let ground = [
            (c as f64 - (chars as f64 - 1.0) / 2.0) * 0.8,
            0.0,
            rng.gen_range(-0.2..0.2),
        ];
        motions.push(sample_motion_params(config.motion, &mut rng, ground));
    }

    let target = [0.0, ROOT_HEIGHT - 0.05, 0.0];
    let path = sample_camera_path(
        config.camera,
        &mut rng,
        target,
        config.width,
        config.height,
        config.near,
        config.far,
    );

    let mut poses = Vec::with_capacity(config.frames);
    let mut cameras = Vec::with_capacity(config.frames);
    let mut frame_data = Vec::with_capacity(config.frames * config.height * config.width * 3);
    for k in 0..config.frames {
        let frame_poses: Vec<BodyPose> = motions.iter().map(|m| motion_pose(m, k)).collect();
        let camera = camera_at(&path, k, config.frames)?;
        let bodies: Vec<SceneBody> = frame_poses
            .iter()
            .zip(&appearances)
            .map(|(pose, &appearance)| SceneBody {
                skeleton: &skel,
                pose,
                appearance,
            })
            .collect();
        let frame = render_frame(&bodies, &camera, &background, config.width, config.height)?;
        frame_data.extend_from_slice(frame.data());
        poses.push(frame_poses);
        cameras.push(camera);
    }
    let frames = Tensor::from_vec(
        &[config.frames, config.height, config.width, 3],
        frame_data,
    )?;
    Ok((
        VideoClip::new(frames)?,
        ClipAnnotation {
            poses,
            cameras,
            background,
            appearances,
            seed,
            fps_rate: SpeedRate::One,
        },
    ))
}

/// Generate `n_clips` annotated clips, reproducibly from `(config, seed)`.
/// Clips are independent and generated in parallel.
pub fn generate_dataset(
    config: &DatasetConfig,
    n_clips: usize,
    seed: u64,
) -> Result<Vec<(VideoClip, ClipAnnotation)>> {
    if config.frames == 0 {
        return Err(Error::InvalidArg("dataset needs at least one frame per clip".into()));
    }
    if config.characters == 0 {
        return Err(Error::InvalidArg("dataset needs at least one character".into()));
    }
    let mut slots: Vec<Option<Result<(VideoClip, ClipAnnotation)>>> = Vec::new();
    slots.resize_with(n_clips, || None);
    parallel::for_each_chunk_mut(&mut slots, 1, |i, slot| {
        slot[0] = Some(generate_clip(config, seed, i as u64));
    });
    slots
        .into_iter()
        .map(|s| s.expect("every clip slot is filled"))
        .collect()
}

// -- augmentations -----------------------------------------------------------

/// Shift every frame of a `[F, H, W, C]` tensor by an integer pixel offset
/// with border-clamp (edge replication). `offsets[k]` is the `(du, dv)`
/// applied to frame `k`.
pub fn translate_frames(frames: &Tensor, offsets: &[(i64, i64)]) -> Result<Tensor> {
    if frames.rank() != 4 {
        return Err(Error::Shape(format!(
            "translate_frames expects [F, H, W, C], got {:?}",
            frames.shape()
        )));
    }
    let (f, h, w, c) = (
        frames.shape()[0],
        frames.shape()[1],
        frames.shape()[2],
        frames.shape()[3],
    );
    if offsets.len() != f {
        return Err(Error::InvalidArg(format!(
            "translate_frames: {} offsets for {f} frames",
            offsets.len()
        )));
    }
    let src = frames.data();
    let mut out = vec![0.0f32; src.len()];
    let frame_stride = h * w * c;
    for (k, &(du, dv)) in offsets.iter().enumerate() {
        let fsrc = &src[k * frame_stride..(k + 1) * frame_stride];
        let fout = &mut out[k * frame_stride..(k + 1) * frame_stride];
        for v in 0..h {
            let sv = (v as i64 - dv).clamp(0, h as i64 - 1) as usize;
            for u in 0..w {
                let su = (u as i64 - du).clamp(0, w as i64 - 1) as usize;
                fout[(v * w + u) * c..(v * w + u) * c + c]
                    .copy_from_slice(&fsrc[(sv * w + su) * c..(sv * w + su) * c + c]);
            }
        }
    }
    Tensor::from_vec(frames.shape(), out)
}

/// Shift every frame by an integer pixel offset with border-clamp (edge
/// replication), and shift each camera's principal point to match so the
/// annotation stays valid. `offsets[k]` is the `(du, dv)` applied to frame `k`.
pub fn translate_clip(
    clip: &VideoClip,
    ann: &ClipAnnotation,
    offsets: &[(i64, i64)],
) -> Result<(VideoClip, ClipAnnotation)> {
    let f = clip.frame_count();
    if ann.cameras.len() != f {
        return Err(Error::InvalidArg("annotation length != frame count".into()));
    }
    let out = translate_frames(clip.frames(), offsets)?;
    let mut cameras = Vec::with_capacity(f);
    for (k, cam) in ann.cameras.iter().enumerate() {
        let (du, dv) = offsets[k];
        cameras.push(CameraPose::new(
            cam.rotation,
            cam.translation,
            (cam.fx, cam.fy, cam.cx + du as f64, cam.cy + dv as f64),
            cam.near,
            cam.far,
        )?);
    }
    let clip = VideoClip::new(out)?;
    let ann = ClipAnnotation {
        cameras,
        ..ann.clone()
    };
    Ok((clip, ann))
}

/// Draw per-frame shifts for the structured-translation augmentation: a
/// random direction with a per-frame velocity ramp, applied as cumulative
/// integer-pixel offsets clamped to `max_offset` pixels per axis.
pub fn draw_ramp_offsets(
    rng: &mut ChaCha8Rng,
    frames: usize,
    max_offset: usize,
) -> Vec<(i64, i64)> {
    let theta = rng.gen_range(0.0..std::f64::consts::TAU);
    let peak = rng.gen_range(0.0..2.5);
    let m = max_offset as i64;
    let mut offsets = Vec::with_capacity(frames);
    let (mut ox, mut oy) = (0.0f64, 0.0f64);
    if frames > 0 {
        offsets.push((0, 0));
    }
    for k in 1..frames {
        let ramp = k as f64 / (frames - 1) as f64;
        let speed = peak * ramp;
        ox += speed * theta.cos();
        oy += speed * theta.sin();
        offsets.push((
            (ox.round() as i64).clamp(-m, m),
            (oy.round() as i64).clamp(-m, m),
        ));
    }
    offsets
}

/// Structured-translation augmentation with the camera annotation kept in
/// sync; the shift pattern comes from [`draw_ramp_offsets`].
pub fn augment_structured_motion(
    clip: &VideoClip,
    ann: &ClipAnnotation,
    seed: u64,
    max_offset: usize,
) -> Result<(VideoClip, ClipAnnotation)> {
    let mut rng = substream(seed, "aug-translate", 0);
    let offsets = draw_ramp_offsets(&mut rng, clip.frame_count(), max_offset);
    translate_clip(clip, ann, &offsets)
}

/// Frame-rate modulation factors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpeedRate {
    /// Half speed: every frame duplicated once.
    Half,
    One,
    Two,
    Three,
}

impl SpeedRate {
    pub fn format(&self) -> &'static str {
        match self {
            SpeedRate::Half => "1/2",
            SpeedRate::One => "1",
            SpeedRate::Two => "2",
            SpeedRate::Three => "3",
        }
    }

    pub fn parse(s: &str) -> Result<SpeedRate> {
        match s.trim() {
            "1/2" => Ok(SpeedRate::Half),
            "1" => Ok(SpeedRate::One),
            "2" => Ok(SpeedRate::Two),
            "3" => Ok(SpeedRate::Three),
            other => Err(Error::Parse(format!("unrecognized speed rate {other:?}"))),
        }
    }
}

/// Frame-rate augmentation: rates above one subsample frames, below one
/// duplicate them; the result is cropped to `window_len` frames, padding by
/// repeating the last frame when `allow_pad` is set. Annotations are
/// resampled by the same frame indices.
pub fn augment_speed(
    clip: &VideoClip,
    ann: &ClipAnnotation,
    rate: SpeedRate,
    window_len: usize,
    allow_pad: bool,
) -> Result<(VideoClip, ClipAnnotation)> {
    let f = clip.frame_count();
    if ann.cameras.len() != f || ann.poses.len() != f {
        return Err(Error::InvalidArg("annotation length != frame count".into()));
    }
    if window_len == 0 {
        return Err(Error::InvalidArg("window length must be positive".into()));
    }
    let mut indices: Vec<usize> = match rate {
        SpeedRate::One => (0..f).collect(),
        SpeedRate::Two => (0..f).step_by(2).collect(),
        SpeedRate::Three => (0..f).step_by(3).collect(),
        SpeedRate::Half => (0..f).flat_map(|k| [k, k]).collect(),
    };
    if indices.len() < window_len {
        if !allow_pad {
            return Err(Error::InvalidArg(format!(
                "speed-augmented clip has {} frames for a window of {window_len} and padding is disabled",
                indices.len()
            )));
        }
        let last = *indices.last().expect("clip has at least one frame");
        indices.resize(window_len, last);
    }
    indices.truncate(window_len);

    let (h, w) = (clip.height(), clip.width());
    let frame_stride = h * w * 3;
    let src = clip.frames().data();
    let mut out = Vec::with_capacity(window_len * frame_stride);
    for &i in &indices {
        out.extend_from_slice(&src[i * frame_stride..(i + 1) * frame_stride]);
    }
    let new_clip = VideoClip::new(Tensor::from_vec(&[window_len, h, w, 3], out)?)?;
    let new_ann = ClipAnnotation {
        poses: indices.iter().map(|&i| ann.poses[i].clone()).collect(),
        cameras: indices.iter().map(|&i| ann.cameras[i].clone()).collect(),
        background: ann.background.clone(),
        appearances: ann.appearances.clone(),
        seed: ann.seed,
        fps_rate: rate,
    };
    Ok((new_clip, new_ann))
}

/// Minimal toy clips for fast training sanity checks: a colored square
/// gliding over a flat background, bouncing off the borders. Deterministic
/// in `(n, frames, h, w, seed)`.
pub fn moving_square_clips(
    n: usize,
    frames: usize,
    h: usize,
    w: usize,
    seed: u64,
) -> Result<Vec<VideoClip>> {
    if frames == 0 || h == 0 || w == 0 {
        return Err(Error::InvalidArg("moving squares need nonzero extents".into()));
    }
    let mut clips = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = substream(seed, "moving-square", i as u64);
        let bg: [f32; 3] = [
            rng.gen_range(0.0..0.4),
            rng.gen_range(0.0..0.4),
            rng.gen_range(0.0..0.4),
        ];
        let fg: [f32; 3] = [
            rng.gen_range(0.6..1.0),
            rng.gen_range(0.6..1.0),
            rng.gen_range(0.6..1.0),
        ];
        let side = rng.gen_range((h / 4).max(1)..(h / 2).max(2)) as i64;
        let mut x = rng.gen_range(0..(w as i64 - side).max(1)) as f64;
        let mut y = rng.gen_range(0..(h as i64 - side).max(1)) as f64;
        let mut vx = rng.gen_range(0.5..2.0) * if rng.gen_range(0..2u32) == 0 { 1.0 } else { -1.0 };
        let mut vy = rng.gen_range(0.5..2.0) * if rng.gen_range(0..2u32) == 0 { 1.0 } else { -1.0 };
        let mut data = Vec::with_capacity(frames * h * w * 3);
        for _ in 0..frames {
            let (x0, y0) = (x.round() as i64, y.round() as i64);
            for v in 0..h as i64 {
                for u in 0..w as i64 {
                    let inside = u >= x0 && u < x0 + side && v >= y0 && v < y0 + side;
                    data.extend_from_slice(if inside { &fg } else { &bg });
                }
            }
            x += vx;
            y += vy;
            if x < 0.0 || x + side as f64 > w as f64 {
                vx = -vx;
                x += 2.0 * vx;
            }
            if y < 0.0 || y + side as f64 > h as f64 {
                vy = -vy;
                y += 2.0 * vy;
            }
        }
        clips.push(VideoClip::new(Tensor::from_vec(&[frames, h, w, 3], data)?)?);
    }
    Ok(clips)
}

// -- PPM I/O -----------------------------------------------------------------

/// Write an `[H, W, 3]` frame as a binary PPM (P6, maxval 255).
pub fn write_ppm(path: &Path, frame: &Tensor) -> Result<()> {
    if frame.rank() != 3 || frame.shape()[2] != 3 {
        return Err(Error::Shape(format!(
            "PPM frame must be [H, W, 3], got {:?}",
            frame.shape()
        )));
    }
    let (h, w) = (frame.shape()[0], frame.shape()[1]);
    let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
    bytes.extend(
        frame
            .data()
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    fs::write(path, bytes)?;
    Ok(())
}

/// Read a binary PPM written by [`write_ppm`] into an `[H, W, 3]` tensor.
pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path)?;
    let bad = |msg: &str| Error::Parse(format!("{}: {msg}", path.display()));
    let mut pos = 0usize;
    let mut token = |bytes: &[u8]| -> Result<String> {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token(&bytes)? != "P6" {
        return Err(bad("not a P6 PPM"));
    }
    let w: usize = token(&bytes)?.parse().map_err(|_| bad("bad width"))?;
    let h: usize = token(&bytes)?.parse().map_err(|_| bad("bad height"))?;
    let maxval: usize = token(&bytes)?.parse().map_err(|_| bad("bad maxval"))?;
    if maxval != 255 {
        return Err(bad("maxval must be 255"));
    }
    pos += 1; // single whitespace byte after the header
    let need = w * h * 3;
    if bytes.len() != pos + need {
        return Err(bad("pixel payload has the wrong length"));
    }
    let data: Vec<f32> = bytes[pos..].iter().map(|&b| b as f32 / 255.0).collect();
    Ok(Tensor::from_vec(&[h, w, 3], data)?)
}

// -- dataset directory I/O ---------------------------------------------------

/// Write clips under `dir` as `clip_%05d/{frame_%04d.ppm, poses.txt,
/// camera.txt, meta.txt}`.
pub fn dataset_write(dir: &Path, data: &[(VideoClip, ClipAnnotation)]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (i, (clip, ann)) in data.iter().enumerate() {
        let clip_dir = dir.join(format!("clip_{i:05}"));
        fs::create_dir_all(&clip_dir)?;
        for k in 0..clip.frame_count() {
            write_ppm(&clip_dir.join(format!("frame_{k:04}.ppm")), &clip.frame(k))?;
        }
        let flat: Vec<BodyPose> = ann.poses.iter().flatten().cloned().collect();
        fs::write(clip_dir.join("poses.txt"), write_pose_lines(&flat))?;
        fs::write(clip_dir.join("camera.txt"), write_camera_lines(&ann.cameras))?;
        let mut meta = String::new();
        meta.push_str(&format!("characters={}\n", ann.appearances.len()));
        meta.push_str(&format!("background={}\n", ann.background.format()));
        meta.push_str(&format!("seed={}\n", ann.seed));
        meta.push_str(&format!("fps_rate={}\n", ann.fps_rate.format()));
        meta.push_str(&format!("near={}\n", ann.cameras.first().map_or(DEFAULT_NEAR, |c| c.near)));
        meta.push_str(&format!("far={}\n", ann.cameras.first().map_or(DEFAULT_FAR, |c| c.far)));
        for (c, app) in ann.appearances.iter().enumerate() {
            meta.push_str(&format!("appearance_{c}={}\n", app.format()));
        }
        fs::write(clip_dir.join("meta.txt"), meta)?;
    }
    Ok(())
}

fn read_meta(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = fs::read_to_string(path)?;
    let mut map = BTreeMap::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Parse(format!("{}: line {line:?} is not key=value", path.display())))?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

fn meta_get<'a>(map: &'a BTreeMap<String, String>, key: &str, path: &Path) -> Result<&'a str> {
    map.get(key)
        .map(|s| s.as_str())
        .ok_or_else(|| Error::Parse(format!("{}: missing key {key}", path.display())))
}

fn read_clip_dir(clip_dir: &Path) -> Result<(VideoClip, ClipAnnotation)> {
    let meta_path = clip_dir.join("meta.txt");
    let meta = read_meta(&meta_path)?;
    let characters: usize = meta_get(&meta, "characters", &meta_path)?
        .parse()
        .map_err(|_| Error::Parse(format!("{}: bad characters count", meta_path.display())))?;
    let background = Background::parse(meta_get(&meta, "background", &meta_path)?)?;
    let seed: u64 = meta_get(&meta, "seed", &meta_path)?
        .parse()
        .map_err(|_| Error::Parse(format!("{}: bad seed", meta_path.display())))?;
    let fps_rate = SpeedRate::parse(meta_get(&meta, "fps_rate", &meta_path)?)?;
    let near: f64 = meta_get(&meta, "near", &meta_path)?
        .parse()
        .map_err(|_| Error::Parse(format!("{}: bad near", meta_path.display())))?;
    let far: f64 = meta_get(&meta, "far", &meta_path)?
        .parse()
        .map_err(|_| Error::Parse(format!("{}: bad far", meta_path.display())))?;
    let mut appearances = Vec::with_capacity(characters);
    for c in 0..characters {
        appearances.push(Appearance::parse(meta_get(
            &meta,
            &format!("appearance_{c}"),
            &meta_path,
        )?)?);
    }

    let mut frame_paths: Vec<_> = fs::read_dir(clip_dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("frame_") && n.ends_with(".ppm"))
        })
        .collect();
    frame_paths.sort();
    if frame_paths.is_empty() {
        return Err(Error::Parse(format!("{}: no frames", clip_dir.display())));
    }
    let mut frame_data = Vec::new();
    let mut dims = None;
    for p in &frame_paths {
        let frame = read_ppm(p)?;
        match dims {
            None => dims = Some((frame.shape()[0], frame.shape()[1])),
            Some(d) => {
                if d != (frame.shape()[0], frame.shape()[1]) {
                    return Err(Error::Parse(format!("{}: frame extents differ", p.display())));
                }
            }
        }
        frame_data.extend_from_slice(frame.data());
    }
    let (h, w) = dims.expect("at least one frame");
    let frames = frame_paths.len();
    let clip = VideoClip::new(Tensor::from_vec(&[frames, h, w, 3], frame_data)?)?;

    let joint_count = Skeleton::humanoid().joint_count();
    let poses_path = clip_dir.join("poses.txt");
    let flat = parse_pose_lines(&fs::read_to_string(&poses_path)?, joint_count)
        .map_err(|e| Error::Parse(format!("{}: {e}", poses_path.display())))?;
    if flat.len() != frames * characters {
        return Err(Error::Parse(format!(
            "{}: {} poses for {frames} frames x {characters} characters",
            poses_path.display(),
            flat.len()
        )));
    }
    let poses: Vec<Vec<BodyPose>> = flat
        .chunks(characters)
        .map(|c| c.to_vec())
        .collect();

    let camera_path = clip_dir.join("camera.txt");
    let cameras = parse_camera_lines(&fs::read_to_string(&camera_path)?, near, far)
        .map_err(|e| Error::Parse(format!("{}: {e}", camera_path.display())))?;
    if cameras.len() != frames {
        return Err(Error::Parse(format!(
            "{}: {} cameras for {frames} frames",
            camera_path.display(),
            cameras.len()
        )));
    }

    Ok((
        clip,
        ClipAnnotation {
            poses,
            cameras,
            background,
            appearances,
            seed,
            fps_rate,
        },
    ))
}

/// Read a dataset directory written by [`dataset_write`]. An existing but
/// empty directory yields an empty dataset.
pub fn dataset_read(dir: &Path) -> Result<Vec<(VideoClip, ClipAnnotation)>> {
    let mut clip_dirs: Vec<_> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_dir()
                && p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with("clip_"))
        })
        .collect();
    clip_dirs.sort();
    clip_dirs.iter().map(|d| read_clip_dir(d)).collect()
}
