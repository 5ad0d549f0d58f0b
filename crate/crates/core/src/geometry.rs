//! Cameras, NDC projection, Plücker ray images, and sinusoidal positional
//! encodings.
//!
//! Conventions (used consistently by the rasterizer, the interspatial
//! positional encoding, and camera conditioning):
//! - world-to-camera transform `x_cam = R x + t` with `+z` forward, `+x`
//!   right, `+y` down (so pixel `v` grows downward);
//! - NDC `x, y` span [-1, 1] left-to-right / top-to-bottom across the image,
//!   `z` spans [-1, 1] over `[near, far]`;
//! - pixel centers sit at half-integer offsets `(u + 0.5, v + 0.5)`;
//! - internal math in `f64`, tensor outputs in `f32`.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];
pub type Mat4 = [[f64; 4]; 4];

// -- small vector/matrix helpers -------------------------------------------

pub fn dot3(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn cross3(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn norm3(a: Vec3) -> f64 {
    dot3(a, a).sqrt()
}

pub fn normalize3(a: Vec3) -> Vec3 {
    let n = norm3(a);
    [a[0] / n, a[1] / n, a[2] / n]
}

pub fn add3(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn sub3(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn scale3(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub fn mat3_mul_vec(m: &Mat3, v: Vec3) -> Vec3 {
    [
        dot3(m[0], v),
        dot3(m[1], v),
        dot3(m[2], v),
    ]
}

pub fn mat3_transpose(m: &Mat3) -> Mat3 {
    let mut t = [[0.0; 3]; 3];
    for (i, row) in m.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            t[j][i] = v;
        }
    }
    t
}

pub fn mat3_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

pub fn mat3_det(m: &Mat3) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

pub fn mat4_mul(a: &Mat4, b: &Mat4) -> Mat4 {
    let mut out = [[0.0; 4]; 4];
    for i in 0..4 {
        for j in 0..4 {
            out[i][j] = (0..4).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

fn mat4_det(m: &Mat4) -> f64 {
    // Laplace expansion along the first row.
    let minor = |r0: usize, r1: usize, r2: usize, c0: usize, c1: usize, c2: usize| {
        m[r0][c0] * (m[r1][c1] * m[r2][c2] - m[r1][c2] * m[r2][c1])
            - m[r0][c1] * (m[r1][c0] * m[r2][c2] - m[r1][c2] * m[r2][c0])
            + m[r0][c2] * (m[r1][c0] * m[r2][c1] - m[r1][c1] * m[r2][c0])
    };
    m[0][0] * minor(1, 2, 3, 1, 2, 3) - m[0][1] * minor(1, 2, 3, 0, 2, 3)
        + m[0][2] * minor(1, 2, 3, 0, 1, 3)
        - m[0][3] * minor(1, 2, 3, 0, 1, 2)
}

// -- camera -----------------------------------------------------------------

/// Pinhole camera: world-to-camera rigid transform plus pixel intrinsics and
/// a depth range for NDC z.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraPose {
    /// World-to-camera rotation (rows are the camera axes in world frame).
    pub rotation: Mat3,
    /// Translation in the camera frame: `x_cam = R x_world + t`.
    pub translation: Vec3,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub near: f64,
    pub far: f64,
}

impl CameraPose {
    /// Validated constructor: rotation must be orthonormal with determinant
    /// +1 within 1e-5, intrinsics positive, `0 < near < far`.
    pub fn new(
        rotation: Mat3,
        translation: Vec3,
        intrinsics: (f64, f64, f64, f64),
        near: f64,
        far: f64,
    ) -> Result<Self> {
        let rt = mat3_transpose(&rotation);
        let prod = mat3_mul(&rotation, &rt);
        for (i, row) in prod.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                let want = if i == j { 1.0 } else { 0.0 };
                if (v - want).abs() > 1e-5 {
                    return Err(Error::InvalidArg(format!(
                        "camera rotation not orthonormal: (R R^T)[{i}][{j}] = {v}"
                    )));
                }
            }
        }
        if (mat3_det(&rotation) - 1.0).abs() > 1e-5 {
            return Err(Error::InvalidArg(format!(
                "camera rotation determinant {} != +1",
                mat3_det(&rotation)
            )));
        }
        let (fx, fy, cx, cy) = intrinsics;
        if fx <= 0.0 || fy <= 0.0 {
            return Err(Error::InvalidArg(format!(
                "degenerate intrinsics fx={fx} fy={fy}"
            )));
        }
        if !(0.0 < near && near < far) {
            return Err(Error::InvalidArg(format!(
                "invalid depth range near={near} far={far}"
            )));
        }
        Ok(CameraPose {
            rotation,
            translation,
            fx,
            fy,
            cx,
            cy,
            near,
            far,
        })
    }

    /// Camera center in world coordinates (`o = -R^T t`).
    pub fn center_world(&self) -> Vec3 {
        let rt = mat3_transpose(&self.rotation);
        scale3(mat3_mul_vec(&rt, self.translation), -1.0)
    }

    /// World point -> camera frame.
    pub fn to_camera(&self, p: Vec3) -> Vec3 {
        add3(mat3_mul_vec(&self.rotation, p), self.translation)
    }

    /// Camera with `+z` forward looking from `eye` toward `target`;
    /// `up_world` fixes the roll (image `v` grows opposite to `up_world`).
    pub fn look_at(
        eye: Vec3,
        target: Vec3,
        up_world: Vec3,
        intrinsics: (f64, f64, f64, f64),
        near: f64,
        far: f64,
    ) -> Result<Self> {
        let forward = normalize3(sub3(target, eye));
        let right = normalize3(cross3(forward, up_world));
        let down = cross3(forward, right);
        let rotation = [right, down, forward];
        let translation = scale3(mat3_mul_vec(&rotation, eye), -1.0);
        CameraPose::new(rotation, translation, intrinsics, near, far)
    }

    /// Pinhole projection of a world point to pixel units plus camera-frame
    /// depth. The point is behind the camera when depth <= 0.
    pub fn project_pixel(&self, p: Vec3) -> (f64, f64, f64) {
        let c = self.to_camera(p);
        (
            self.fx * c[0] / c[2] + self.cx,
            self.fy * c[1] / c[2] + self.cy,
            c[2],
        )
    }
}

// -- projection matrix ------------------------------------------------------

/// 4×4 modelview-projection matrix: homogeneous world point -> clip space.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionMatrix {
    pub m: Mat4,
}

/// Compose the world-to-camera transform of `camera` with a perspective
/// projection for a `width`×`height` image. NDC x, y span [-1, 1] across the
/// image and z spans [-1, 1] over `[near, far]`.
pub fn build_projection(camera: &CameraPose, width: usize, height: usize) -> Result<ProjectionMatrix> {
    if width == 0 || height == 0 {
        return Err(Error::InvalidArg("projection: zero image extent".into()));
    }
    if camera.fx <= 0.0 || camera.fy <= 0.0 {
        return Err(Error::InvalidArg("projection: degenerate intrinsics".into()));
    }
    let (w, h) = (width as f64, height as f64);
    let (n, f) = (camera.near, camera.far);
    let a = (f + n) / (f - n);
    let b = -2.0 * f * n / (f - n);
    // x_ndc = (2 fx / W) x/z + (2 cx / W - 1), same for y; z_ndc = (a z + b)/z.
    let persp: Mat4 = [
        [2.0 * camera.fx / w, 0.0, 2.0 * camera.cx / w - 1.0, 0.0],
        [0.0, 2.0 * camera.fy / h, 2.0 * camera.cy / h - 1.0, 0.0],
        [0.0, 0.0, a, b],
        [0.0, 0.0, 1.0, 0.0],
    ];
    let r = &camera.rotation;
    let t = camera.translation;
    let view: Mat4 = [
        [r[0][0], r[0][1], r[0][2], t[0]],
        [r[1][0], r[1][1], r[1][2], t[1]],
        [r[2][0], r[2][1], r[2][2], t[2]],
        [0.0, 0.0, 0.0, 1.0],
    ];
    let m = mat4_mul(&persp, &view);
    if mat4_det(&m).abs() <= 1e-10 {
        return Err(Error::InvalidArg("projection matrix is singular".into()));
    }
    Ok(ProjectionMatrix { m })
}

/// Map a world point through the projection matrix and divide by clip w.
/// Fails when the point lies on the camera plane (`|w_clip| < 1e-8`).
pub fn ndc_project(g: Vec3, proj: &ProjectionMatrix) -> Result<Vec3> {
    let hom = [g[0], g[1], g[2], 1.0];
    let mut clip = [0.0; 4];
    for (i, row) in proj.m.iter().enumerate() {
        clip[i] = row[0] * hom[0] + row[1] * hom[1] + row[2] * hom[2] + row[3] * hom[3];
    }
    if clip[3].abs() < 1e-8 {
        return Err(Error::InvalidArg(
            "ndc_project: point on the camera plane (w_clip ~ 0)".into(),
        ));
    }
    Ok([clip[0] / clip[3], clip[1] / clip[3], clip[2] / clip[3]])
}

/// Screen-token NDC placement: pixel position -> 3D plane at zero depth,
/// `(2 s_x / w - 1, 2 s_y / h - 1, 0)`.
pub fn pixel_to_ndc(sx: f64, sy: f64, w: usize, h: usize) -> Vec3 {
    [
        2.0 * sx / w as f64 - 1.0,
        2.0 * sy / h as f64 - 1.0,
        0.0,
    ]
}

// -- Plücker rays -----------------------------------------------------------

/// World-space ray through a pixel as Plücker coordinates: unit direction `d`
/// and moment `m = o × d` where `o` is the camera center.
pub fn plucker_ray(camera: &CameraPose, u: f64, v: f64) -> (Vec3, Vec3) {
    let d_cam = normalize3([
        (u - camera.cx) / camera.fx,
        (v - camera.cy) / camera.fy,
        1.0,
    ]);
    let rt = mat3_transpose(&camera.rotation);
    let d = mat3_mul_vec(&rt, d_cam);
    let o = camera.center_world();
    (d, cross3(o, d))
}

/// Per-pixel Plücker coordinates as an `[h, w, 6]` tensor (`d` then `m`
/// channel-wise), evaluated at pixel centers.
pub fn plucker_image(camera: &CameraPose, h: usize, w: usize) -> Tensor {
    let mut data = Vec::with_capacity(h * w * 6);
    for v in 0..h {
        for u in 0..w {
            let (d, m) = plucker_ray(camera, u as f64 + 0.5, v as f64 + 0.5);
            data.extend_from_slice(&[
                d[0] as f32,
                d[1] as f32,
                d[2] as f32,
                m[0] as f32,
                m[1] as f32,
                m[2] as f32,
            ]);
        }
    }
    Tensor::from_vec(&[h, w, 6], data).expect("sized above")
}

// -- sinusoidal positional encoding ----------------------------------------

/// Frequency of band `b` out of `bands`: geometric from 1 to 10000.
fn pe_frequency(b: usize, bands: usize) -> f64 {
    if bands <= 1 {
        1.0
    } else {
        10000f64.powf(b as f64 / (bands - 1) as f64)
    }
}

/// Sinusoidal positional encoding of a K-coordinate vector into `dim`
/// channels: each coordinate gets `dim/(2K)` sine and `dim/(2K)` cosine
/// channels at geometrically spaced frequencies from 1 to 10000.
pub fn sinusoidal_pe(coords: &[f32], dim: usize) -> Result<Vec<f32>> {
    let k = coords.len();
    if k == 0 || dim % (2 * k) != 0 {
        return Err(Error::InvalidArg(format!(
            "sinusoidal_pe: dim {dim} not divisible by 2K (K = {k})"
        )));
    }
    let bands = dim / (2 * k);
    let mut out = vec![0.0f32; dim];
    for (ci, &cv) in coords.iter().enumerate() {
        let base = ci * 2 * bands;
        for b in 0..bands {
            let arg = pe_frequency(b, bands) * cv as f64;
            out[base + b] = arg.sin() as f32;
            out[base + bands + b] = arg.cos() as f32;
        }
    }
    Ok(out)
}

/// Batch form of [`sinusoidal_pe`]: `[n, K]` coordinates -> `[n, dim]`.
pub fn sinusoidal_pe_rows(coords: &Tensor, dim: usize) -> Result<Tensor> {
    if coords.rank() != 2 {
        return Err(Error::Shape(format!(
            "sinusoidal_pe_rows: coords rank {} != 2",
            coords.rank()
        )));
    }
    let n = coords.shape()[0];
    let k = coords.shape()[1];
    let mut data = Vec::with_capacity(n * dim);
    for row in coords.data().chunks_exact(k.max(1)) {
        data.extend_from_slice(&sinusoidal_pe(row, dim)?);
    }
    Tensor::from_vec(&[n, dim], data)
}

// -- camera trajectory text format -----------------------------------------

/// One camera per line: 9 rotation entries (row-major), 3 translation
/// entries, 4 intrinsics entries, whitespace-separated.
pub fn write_camera_lines(cameras: &[CameraPose]) -> String {
    let mut out = String::new();
    for c in cameras {
        let mut fields: Vec<String> = Vec::with_capacity(16);
        for row in &c.rotation {
            for &v in row {
                fields.push(format!("{v:.17e}"));
            }
        }
        for &v in &c.translation {
            fields.push(format!("{v:.17e}"));
        }
        for v in [c.fx, c.fy, c.cx, c.cy] {
            fields.push(format!("{v:.17e}"));
        }
        out.push_str(&fields.join(" "));
        out.push('\n');
    }
    out
}

/// Parse the text trajectory format. The depth range is not serialized; the
/// caller supplies the `near`/`far` it was generated with.
pub fn parse_camera_lines(text: &str, near: f64, far: f64) -> Result<Vec<CameraPose>> {
    let mut cameras = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|s| {
                s.parse::<f64>()
                    .map_err(|e| Error::Parse(format!("camera line {}: {e}", ln + 1)))
            })
            .collect::<Result<_>>()?;
        if vals.len() != 16 {
            return Err(Error::Parse(format!(
                "camera line {}: expected 16 numbers, got {}",
                ln + 1,
                vals.len()
            )));
        }
        let rotation = [
            [vals[0], vals[1], vals[2]],
            [vals[3], vals[4], vals[5]],
            [vals[6], vals[7], vals[8]],
        ];
        let translation = [vals[9], vals[10], vals[11]];
        cameras.push(CameraPose::new(
            rotation,
            translation,
            (vals[12], vals[13], vals[14], vals[15]),
            near,
            far,
        )?);
    }
    Ok(cameras)
}
