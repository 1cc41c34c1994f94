//! Cameras, rays, image buffers and the spherical-harmonic direction encoding.
//!
//! Conventions used throughout the crate:
//! - world space is the unit cube `[0,1]^3`; the scene lives inside it
//! - camera frame: +x right, +y down, +z forward (image rows grow downward)
//! - `Camera.rot` is the world-from-camera rotation, `Camera.origin` the
//!   camera centre in world coordinates
//! - pixel `(ix, iy)` plus jitter in `[0,1)^2` addresses the continuous image
//!   plane; jitter `(0.5, 0.5)` is the pixel centre

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

// ---------------------------------------------------------------------------
// Vec3 / Mat3

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

pub const fn vec3(x: f64, y: f64, z: f64) -> Vec3 {
    Vec3 { x, y, z }
}

impl Vec3 {
    pub const ZERO: Vec3 = vec3(0.0, 0.0, 0.0);

    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Vec3) -> Vec3 {
        vec3(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn normalized(self) -> Vec3 {
        let n = self.norm();
        self * (1.0 / n)
    }

    pub fn min(self, o: Vec3) -> Vec3 {
        vec3(self.x.min(o.x), self.y.min(o.y), self.z.min(o.z))
    }

    pub fn max(self, o: Vec3) -> Vec3 {
        vec3(self.x.max(o.x), self.y.max(o.y), self.z.max(o.z))
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn from_array(a: [f64; 3]) -> Vec3 {
        vec3(a[0], a[1], a[2])
    }
}

impl std::ops::Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        vec3(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl std::ops::Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        vec3(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl std::ops::Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, s: f64) -> Vec3 {
        vec3(self.x * s, self.y * s, self.z * s)
    }
}

impl std::ops::Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        vec3(-self.x, -self.y, -self.z)
    }
}

/// Row-major 3x3 matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Mat3 {
    pub m: [[f64; 3]; 3],
}

impl Mat3 {
    pub const IDENTITY: Mat3 = Mat3 {
        m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
    };

    /// Build from column vectors (the images of the basis vectors).
    pub fn from_cols(c0: Vec3, c1: Vec3, c2: Vec3) -> Mat3 {
        Mat3 {
            m: [
                [c0.x, c1.x, c2.x],
                [c0.y, c1.y, c2.y],
                [c0.z, c1.z, c2.z],
            ],
        }
    }

    pub fn col(&self, j: usize) -> Vec3 {
        vec3(self.m[0][j], self.m[1][j], self.m[2][j])
    }

    pub fn mul_vec(&self, v: Vec3) -> Vec3 {
        vec3(
            self.m[0][0] * v.x + self.m[0][1] * v.y + self.m[0][2] * v.z,
            self.m[1][0] * v.x + self.m[1][1] * v.y + self.m[1][2] * v.z,
            self.m[2][0] * v.x + self.m[2][1] * v.y + self.m[2][2] * v.z,
        )
    }

    pub fn transpose(&self) -> Mat3 {
        let m = &self.m;
        Mat3 {
            m: [
                [m[0][0], m[1][0], m[2][0]],
                [m[0][1], m[1][1], m[2][1]],
                [m[0][2], m[1][2], m[2][2]],
            ],
        }
    }

    pub fn det(&self) -> f64 {
        let m = &self.m;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    /// Max absolute entry of `R R^T - I`; zero for an orthonormal matrix.
    pub fn orthonormality_error(&self) -> f64 {
        let t = self.transpose();
        let mut err: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let mut s = 0.0;
                for k in 0..3 {
                    s += self.m[i][k] * t.m[k][j];
                }
                let target = if i == j { 1.0 } else { 0.0 };
                err = err.max((s - target).abs());
            }
        }
        err
    }
}

// ---------------------------------------------------------------------------
// Ray

/// A ray with the parametric range that overlaps the unit-cube scene bounds.
/// For rays that intersect the cube, `0 <= near < far`; rays that miss carry
/// the degenerate range `near == far == 0`.
#[derive(Debug, Clone, Copy)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
    pub near: f64,
    pub far: f64,
}

impl Ray {
    pub fn point_at(&self, t: f64) -> Vec3 {
        self.origin + self.direction * t
    }

    pub fn hits_scene(&self) -> bool {
        self.near < self.far
    }
}

/// Slab intersection of a ray with the unit cube, clipped to t >= 0.
/// Returns (near, far) or None when the cube is missed entirely.
pub fn unit_cube_range(origin: Vec3, direction: Vec3) -> Option<(f64, f64)> {
    let mut t0 = 0.0f64;
    let mut t1 = f64::INFINITY;
    let o = origin.to_array();
    let d = direction.to_array();
    for a in 0..3 {
        if d[a].abs() < 1e-15 {
            if o[a] < 0.0 || o[a] > 1.0 {
                return None;
            }
            continue;
        }
        let inv = 1.0 / d[a];
        let (mut ta, mut tb) = (-o[a] * inv, (1.0 - o[a]) * inv);
        if ta > tb {
            std::mem::swap(&mut ta, &mut tb);
        }
        t0 = t0.max(ta);
        t1 = t1.min(tb);
        if t0 >= t1 {
            return None;
        }
    }
    Some((t0, t1))
}

// ---------------------------------------------------------------------------
// Camera

/// Calibrated pinhole camera with a rigid world-from-camera pose.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// World-from-camera rotation; columns are the camera axes in world space.
    pub rot: Mat3,
    /// Camera centre in world coordinates.
    pub origin: Vec3,
    pub width: u32,
    pub height: u32,
}

impl Camera {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        rot: Mat3,
        origin: Vec3,
        width: u32,
        height: u32,
    ) -> Result<Camera> {
        if !(fx > 0.0 && fy > 0.0) || !fx.is_finite() || !fy.is_finite() {
            return Err(Error::data(format!("camera focal lengths must be positive, got {fx}, {fy}")));
        }
        if width == 0 || height == 0 {
            return Err(Error::data("camera image dimensions must be positive"));
        }
        if rot.orthonormality_error() > 1e-9 {
            return Err(Error::data("camera rotation is not orthonormal"));
        }
        if (rot.det() - 1.0).abs() > 1e-9 {
            return Err(Error::data("camera rotation must have determinant +1"));
        }
        Ok(Camera { fx, fy, cx, cy, rot, origin, width, height })
    }

    /// Camera at `eye` looking at `target`. `up_hint` picks the image-up
    /// direction; near-parallel hints fall back to another axis.
    pub fn look_at(
        eye: Vec3,
        target: Vec3,
        up_hint: Vec3,
        fx: f64,
        fy: f64,
        width: u32,
        height: u32,
    ) -> Result<Camera> {
        let forward = (target - eye).normalized();
        let mut up = up_hint.normalized();
        if forward.cross(up).norm() < 1e-3 {
            up = if forward.x.abs() < 0.9 { vec3(1.0, 0.0, 0.0) } else { vec3(0.0, 0.0, 1.0) };
        }
        let right = forward.cross(up).normalized();
        // down = forward x right keeps the frame right-handed (right x down = forward)
        let down = forward.cross(right);
        let rot = Mat3::from_cols(right, down, forward);
        Camera::new(
            fx,
            fy,
            width as f64 * 0.5,
            height as f64 * 0.5,
            rot,
            eye,
            width,
            height,
        )
    }

    pub fn forward(&self) -> Vec3 {
        self.rot.col(2)
    }

    /// Ray through pixel `(ix, iy)` at sub-pixel offset `jitter` in `[0,1)^2`.
    /// Direction is unit length; near/far cover the unit-cube overlap.
    pub fn pixel_ray(&self, ix: u32, iy: u32, jitter: (f64, f64)) -> Result<Ray> {
        if ix >= self.width || iy >= self.height {
            return Err(Error::data(format!(
                "pixel ({ix}, {iy}) outside image {}x{}",
                self.width, self.height
            )));
        }
        if !(0.0..1.0).contains(&jitter.0) || !(0.0..1.0).contains(&jitter.1) {
            return Err(Error::data("pixel jitter must lie in [0,1)"));
        }
        let u = ix as f64 + jitter.0;
        let v = iy as f64 + jitter.1;
        let dir_cam = vec3((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0);
        let direction = self.rot.mul_vec(dir_cam).normalized();
        let (near, far) = unit_cube_range(self.origin, direction).unwrap_or((0.0, 0.0));
        Ok(Ray { origin: self.origin, direction, near, far })
    }

    /// Project a world point to continuous pixel coordinates.
    /// None when the point lies at or behind the camera plane.
    pub fn project(&self, p: Vec3) -> Option<(f64, f64)> {
        let pc = self.rot.transpose().mul_vec(p - self.origin);
        if pc.z <= 1e-12 {
            return None;
        }
        Some((self.fx * pc.x / pc.z + self.cx, self.fy * pc.y / pc.z + self.cy))
    }
}

// ---------------------------------------------------------------------------
// ImageBuffer

/// Row-major float image, values in [0,1], 1 (mask), 3 (RGB) or 4 (RGBA)
/// channels.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    pub width: u32,
    pub height: u32,
    pub channels: u32,
    data: Vec<f32>,
}

impl ImageBuffer {
    pub fn new(width: u32, height: u32, channels: u32) -> Result<ImageBuffer> {
        if width == 0 || height == 0 {
            return Err(Error::data("image dimensions must be positive"));
        }
        if channels != 1 && channels != 3 && channels != 4 {
            return Err(Error::data(format!("images carry 1, 3 or 4 channels, got {channels}")));
        }
        let len = width as usize * height as usize * channels as usize;
        Ok(ImageBuffer { width, height, channels, data: vec![0.0; len] })
    }

    pub fn from_data(width: u32, height: u32, channels: u32, data: Vec<f32>) -> Result<ImageBuffer> {
        let mut img = ImageBuffer::new(width, height, channels)?;
        if data.len() != img.data.len() {
            return Err(Error::data(format!(
                "image data length {} does not match {}x{}x{}",
                data.len(),
                width,
                height,
                channels
            )));
        }
        if data.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
            return Err(Error::data("image values must be finite and in [0,1]"));
        }
        img.data = data;
        Ok(img)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, x: u32, y: u32) -> &[f32] {
        let c = self.channels as usize;
        let i = (y as usize * self.width as usize + x as usize) * c;
        &self.data[i..i + c]
    }

    pub fn set_pixel(&mut self, x: u32, y: u32, v: &[f32]) {
        debug_assert_eq!(v.len(), self.channels as usize);
        let c = self.channels as usize;
        let i = (y as usize * self.width as usize + x as usize) * c;
        for (k, &val) in v.iter().enumerate() {
            self.data[i + k] = val.clamp(0.0, 1.0);
        }
    }

    /// Mean value; handy for mask coverage checks.
    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }
}

// ---------------------------------------------------------------------------
// Spherical harmonics

const SH_C0: f64 = 0.282_094_791_773_878_14;
const SH_C1: f64 = 0.488_602_511_902_919_9;
const SH_C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];
const SH_C3: [f64; 7] = [
    -0.590_043_589_926_643_5,
    2.890_611_442_640_554,
    -0.457_045_799_464_465_8,
    0.373_176_332_590_115_4,
    -0.457_045_799_464_465_8,
    1.445_305_721_320_277,
    -0.590_043_589_926_643_5,
];

/// Real spherical-harmonic basis for bands l = 0..3 (16 values) evaluated at a
/// unit direction. Rejects non-unit input (tolerance 1e-6 on the norm).
pub fn sh_encode(v: Vec3) -> Result<[f64; 16]> {
    let n = v.norm();
    if (n - 1.0).abs() > 1e-6 {
        return Err(Error::data(format!("sh_encode expects a unit direction, |v| = {n}")));
    }
    let (x, y, z) = (v.x, v.y, v.z);
    let (xx, yy, zz) = (x * x, y * y, z * z);
    Ok([
        SH_C0,
        -SH_C1 * y,
        SH_C1 * z,
        -SH_C1 * x,
        SH_C2[0] * x * y,
        SH_C2[1] * y * z,
        SH_C2[2] * (3.0 * zz - 1.0),
        SH_C2[3] * x * z,
        SH_C2[4] * (xx - yy),
        SH_C3[0] * y * (3.0 * xx - yy),
        SH_C3[1] * x * y * z,
        SH_C3[2] * y * (4.0 * zz - xx - yy),
        SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy),
        SH_C3[4] * x * (4.0 * zz - xx - yy),
        SH_C3[5] * z * (xx - yy),
        SH_C3[6] * x * (xx - 3.0 * yy),
    ])
}

/// Quasi-uniform unit directions via the Fibonacci sphere. Deterministic.
pub fn fibonacci_sphere(n: usize) -> Vec<Vec3> {
    let golden = std::f64::consts::PI * (3.0 - 5.0f64.sqrt());
    (0..n)
        .map(|i| {
            let y = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
            let r = (1.0 - y * y).max(0.0).sqrt();
            let th = golden * i as f64;
            vec3(r * th.cos(), y, r * th.sin())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_camera(rng: &mut ChaCha8Rng) -> Camera {
        let eye = vec3(
            rng.gen_range(-2.0..3.0),
            rng.gen_range(-2.0..3.0),
            rng.gen_range(-2.0..3.0),
        );
        let target = vec3(
            rng.gen_range(0.2..0.8),
            rng.gen_range(0.2..0.8),
            rng.gen_range(0.2..0.8),
        );
        if (target - eye).norm() < 0.3 {
            return random_camera(rng);
        }
        Camera::look_at(
            eye,
            target,
            vec3(0.0, 1.0, 0.0),
            rng.gen_range(80.0..400.0),
            rng.gen_range(80.0..400.0),
            128,
            96,
        )
        .unwrap()
    }

    #[test]
    fn principal_ray_is_camera_forward() {
        // identity pose, principal point at the pixel centre
        let cam = Camera::new(100.0, 100.0, 1.0, 1.0, Mat3::IDENTITY, Vec3::ZERO, 2, 2).unwrap();
        let ray = cam.pixel_ray(0, 0, (0.5, 0.5)).unwrap();
        // (0 + 0.5 - 1.0)/100 = -0.005: not centred. Use pixel (1,1) jitter 0:
        let ray_c = cam.pixel_ray(1, 1, (0.0, 0.0)).unwrap();
        assert_relative_eq!(ray_c.direction.x, 0.0, epsilon = 1e-12);
        assert_relative_eq!(ray_c.direction.y, 0.0, epsilon = 1e-12);
        assert_relative_eq!(ray_c.direction.z, 1.0, epsilon = 1e-12);
        assert!(ray.direction.z > 0.99);
    }

    #[test]
    fn translating_camera_moves_origin_not_direction() {
        let a = Camera::new(100.0, 100.0, 32.0, 32.0, Mat3::IDENTITY, Vec3::ZERO, 64, 64).unwrap();
        let b = Camera::new(
            100.0,
            100.0,
            32.0,
            32.0,
            Mat3::IDENTITY,
            vec3(0.3, -0.2, 0.1),
            64,
            64,
        )
        .unwrap();
        let ra = a.pixel_ray(10, 20, (0.5, 0.5)).unwrap();
        let rb = b.pixel_ray(10, 20, (0.5, 0.5)).unwrap();
        assert_eq!(ra.direction.to_array(), rb.direction.to_array());
        assert_eq!(rb.origin.to_array(), [0.3, -0.2, 0.1]);
    }

    #[test]
    fn corner_pixels_match_pinhole_formula() {
        // 2x2 image, fx=fy=1, principal point at the image centre: each corner
        // pixel centre sits at (+-0.5, +-0.5) on the normalised image plane.
        let cam = Camera::new(1.0, 1.0, 1.0, 1.0, Mat3::IDENTITY, Vec3::ZERO, 2, 2).unwrap();
        for (ix, iy) in [(0u32, 0u32), (0, 1), (1, 0), (1, 1)] {
            let r = cam.pixel_ray(ix, iy, (0.5, 0.5)).unwrap();
            // independent pinhole oracle
            let u = ix as f64 + 0.5 - 1.0;
            let v = iy as f64 + 0.5 - 1.0;
            let len = (u * u + v * v + 1.0).sqrt();
            assert_relative_eq!(r.direction.x, u / len, epsilon = 1e-12);
            assert_relative_eq!(r.direction.y, v / len, epsilon = 1e-12);
            assert_relative_eq!(r.direction.z, 1.0 / len, epsilon = 1e-12);
        }
    }

    #[test]
    fn ray_directions_unit_norm_10k() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let cam = random_camera(&mut rng);
            for _ in 0..100 {
                let ix = rng.gen_range(0..cam.width);
                let iy = rng.gen_range(0..cam.height);
                let j = (rng.gen::<f64>(), rng.gen::<f64>());
                let ray = cam.pixel_ray(ix, iy, j).unwrap();
                assert!((ray.direction.norm() - 1.0).abs() < 1e-9);
                assert!(ray.near >= 0.0);
                if ray.hits_scene() {
                    assert!(ray.near < ray.far);
                }
            }
        }
    }

    #[test]
    fn project_round_trips_pixel_ray() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let cam = random_camera(&mut rng);
            let ix = rng.gen_range(0..cam.width);
            let iy = rng.gen_range(0..cam.height);
            let j = (rng.gen::<f64>(), rng.gen::<f64>());
            let ray = cam.pixel_ray(ix, iy, j).unwrap();
            let p = ray.point_at(rng.gen_range(0.5..3.0));
            let (px, py) = cam.project(p).unwrap();
            assert_relative_eq!(px, ix as f64 + j.0, epsilon = 1e-6);
            assert_relative_eq!(py, iy as f64 + j.1, epsilon = 1e-6);
        }
    }

    #[test]
    fn out_of_bounds_pixel_rejected() {
        let cam = Camera::new(50.0, 50.0, 16.0, 16.0, Mat3::IDENTITY, Vec3::ZERO, 32, 32).unwrap();
        assert!(cam.pixel_ray(32, 0, (0.5, 0.5)).is_err());
        assert!(cam.pixel_ray(0, 40, (0.5, 0.5)).is_err());
    }

    #[test]
    fn non_orthonormal_rotation_rejected() {
        let mut m = Mat3::IDENTITY;
        m.m[0][0] = 1.5;
        assert!(Camera::new(50.0, 50.0, 16.0, 16.0, m, Vec3::ZERO, 32, 32).is_err());
    }

    #[test]
    fn look_at_is_right_handed_and_points_at_target() {
        let cam = Camera::look_at(
            vec3(2.0, 1.3, -0.5),
            vec3(0.5, 0.5, 0.5),
            vec3(0.0, 1.0, 0.0),
            200.0,
            200.0,
            128,
            128,
        )
        .unwrap();
        assert!(cam.rot.orthonormality_error() < 1e-12);
        assert_relative_eq!(cam.rot.det(), 1.0, epsilon = 1e-12);
        let f = cam.forward();
        let to_target = (vec3(0.5, 0.5, 0.5) - cam.origin).normalized();
        assert!(f.dot(to_target) > 1.0 - 1e-12);
    }

    #[test]
    fn cube_range_misses_and_inside() {
        // origin inside the cube: near clipped to 0
        let (near, far) = unit_cube_range(vec3(0.5, 0.5, 0.5), vec3(0.0, 0.0, 1.0)).unwrap();
        assert_eq!(near, 0.0);
        assert_relative_eq!(far, 0.5, epsilon = 1e-12);
        // pointing away from the cube
        assert!(unit_cube_range(vec3(2.0, 0.5, 0.5), vec3(1.0, 0.0, 0.0)).is_none());
    }

    #[test]
    fn image_buffer_validates() {
        assert!(ImageBuffer::new(0, 4, 3).is_err());
        assert!(ImageBuffer::new(4, 4, 2).is_err());
        assert!(ImageBuffer::from_data(2, 1, 1, vec![0.0, 1.5]).is_err());
        assert!(ImageBuffer::from_data(2, 1, 1, vec![0.0, f32::NAN]).is_err());
        let img = ImageBuffer::from_data(2, 1, 3, vec![0.1; 6]).unwrap();
        assert_eq!(img.pixel(1, 0), &[0.1, 0.1, 0.1]);
    }

    #[test]
    fn sh_constant_band() {
        let b = sh_encode(vec3(0.0, 0.0, 1.0)).unwrap();
        assert_relative_eq!(b[0], 0.28209479, epsilon = 1e-8);
    }

    #[test]
    fn sh_z_axis_nonzero_pattern() {
        // along +z only the m = 0 terms survive
        let b = sh_encode(vec3(0.0, 0.0, 1.0)).unwrap();
        for (i, v) in b.iter().enumerate() {
            if [0usize, 2, 6, 12].contains(&i) {
                assert!(v.abs() > 0.2, "index {i} should be nonzero, got {v}");
            } else {
                assert!(v.abs() < 1e-12, "index {i} should vanish, got {v}");
            }
        }
    }

    #[test]
    fn sh_parity_over_1k_directions() {
        // band l flips sign with (-1)^l under v -> -v
        for v in fibonacci_sphere(1000) {
            let a = sh_encode(v).unwrap();
            let b = sh_encode(-v).unwrap();
            let band = |i: usize| match i {
                0 => 0,
                1..=3 => 1,
                4..=8 => 2,
                _ => 3,
            };
            for i in 0..16 {
                let sign = if band(i) % 2 == 0 { 1.0 } else { -1.0 };
                assert_relative_eq!(a[i], sign * b[i], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn sh_rejects_non_unit() {
        assert!(sh_encode(vec3(0.0, 0.0, 1.1)).is_err());
        assert!(sh_encode(Vec3::ZERO).is_err());
    }

    #[test]
    fn fibonacci_sphere_is_unit_and_spread() {
        let pts = fibonacci_sphere(64);
        for p in &pts {
            assert!((p.norm() - 1.0).abs() < 1e-12);
        }
        let mean = pts.iter().fold(Vec3::ZERO, |a, &b| a + b) * (1.0 / 64.0);
        assert!(mean.norm() < 0.05);
    }
}
