//! Analytic ground-truth scenes: two-object compositions of exact distance
//! primitives, sphere-traced into multi-view RGB images with per-object
//! masks. These stand in for captured data; every quantity the trainer
//! consumes (colours, masks, cameras, meshes) has a closed-form reference
//! here.

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{fibonacci_sphere, vec3, Camera, ImageBuffer, Ray, Vec3};

/// Scene content stays inside this box; the remaining shell of the unit cube
/// is guaranteed empty space.
pub const CONTENT_LO: f64 = 0.1;
pub const CONTENT_HI: f64 = 0.9;
/// Signed surface overlap between the two objects: negative leaves a gap,
/// zero is tangency, positive forces interpenetration for stress tests.
pub const CONTACT_DEPTH_RANGE: (f64, f64) = (-0.05, 0.02);

const TRACE_EPS: f64 = 1e-5;
/// Minimum march step. Rays skimming a surface (distance stuck near zero
/// without crossing) would otherwise stall; the floor pushes through, and a
/// sign change afterwards is recovered by bisection.
const TRACE_FLOOR: f64 = 2e-4;
const TRACE_MAX_STEPS: usize = 4096;

// ---------------------------------------------------------------------------
// Distance primitives
// ---------------------------------------------------------------------------

/// Exact signed distance shapes. Every variant is a true metric distance, so
/// sphere tracing may take full-length steps and gradients have unit norm
/// away from the (measure-zero) medial axes.
#[derive(Debug, Clone, PartialEq)]
pub enum Sdf {
    Sphere { centre: Vec3, radius: f64 },
    Cuboid { centre: Vec3, half: Vec3 },
    /// Ring around an axis parallel to z.
    Torus { centre: Vec3, major: f64, minor: f64 },
    Capsule { a: Vec3, b: Vec3, radius: f64 },
    Union(Box<Sdf>, Box<Sdf>),
}

impl Sdf {
    pub fn eval(&self, p: Vec3) -> f64 {
        match self {
            Sdf::Sphere { centre, radius } => (p - *centre).norm() - radius,
            Sdf::Cuboid { centre, half } => {
                let d = p - *centre;
                let q = vec3(d.x.abs() - half.x, d.y.abs() - half.y, d.z.abs() - half.z);
                let outside = q.max(vec3(0.0, 0.0, 0.0)).norm();
                outside + q.x.max(q.y).max(q.z).min(0.0)
            }
            Sdf::Torus { centre, major, minor } => {
                let d = p - *centre;
                let qx = (d.x * d.x + d.y * d.y).sqrt() - major;
                (qx * qx + d.z * d.z).sqrt() - minor
            }
            Sdf::Capsule { a, b, radius } => {
                let ab = *b - *a;
                let t = ((p - *a).dot(ab) / ab.dot(ab)).clamp(0.0, 1.0);
                (p - (*a + ab * t)).norm() - radius
            }
            Sdf::Union(l, r) => l.eval(p).min(r.eval(p)),
        }
    }

    /// Central-difference spatial gradient; unit length almost everywhere.
    pub fn gradient(&self, p: Vec3) -> Vec3 {
        const H: f64 = 1e-6;
        let dx = self.eval(p + vec3(H, 0.0, 0.0)) - self.eval(p - vec3(H, 0.0, 0.0));
        let dy = self.eval(p + vec3(0.0, H, 0.0)) - self.eval(p - vec3(0.0, H, 0.0));
        let dz = self.eval(p + vec3(0.0, 0.0, H)) - self.eval(p - vec3(0.0, 0.0, H));
        vec3(dx, dy, dz) * (0.5 / H)
    }

    /// Surface area. For unions this is the sum of the parts (sampling
    /// rejects swallowed pieces, so only the weights use it).
    pub fn area(&self) -> f64 {
        match self {
            Sdf::Sphere { radius, .. } => 4.0 * std::f64::consts::PI * radius * radius,
            Sdf::Cuboid { half, .. } => {
                8.0 * (half.x * half.y + half.y * half.z + half.z * half.x)
            }
            Sdf::Torus { major, minor, .. } => {
                4.0 * std::f64::consts::PI * std::f64::consts::PI * major * minor
            }
            Sdf::Capsule { a, b, radius } => {
                let side = 2.0 * std::f64::consts::PI * radius * (*b - *a).norm();
                side + 4.0 * std::f64::consts::PI * radius * radius
            }
            Sdf::Union(l, r) => l.area() + r.area(),
        }
    }

    /// Area-uniform surface point.
    pub fn sample_surface(&self, rng: &mut impl Rng) -> Vec3 {
        match self {
            Sdf::Sphere { centre, radius } => *centre + uniform_dir(rng) * *radius,
            Sdf::Cuboid { centre, half } => {
                let areas = [half.y * half.z, half.z * half.x, half.x * half.y];
                let total: f64 = areas.iter().sum();
                let mut pick = rng.gen::<f64>() * total;
                let mut axis = 2;
                for (i, a) in areas.iter().enumerate() {
                    if pick < *a {
                        axis = i;
                        break;
                    }
                    pick -= a;
                }
                let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
                let u = (rng.gen::<f64>() * 2.0 - 1.0) * half_axis(*half, (axis + 1) % 3);
                let v = (rng.gen::<f64>() * 2.0 - 1.0) * half_axis(*half, (axis + 2) % 3);
                let mut d = [0.0; 3];
                d[axis] = sign * half_axis(*half, axis);
                d[(axis + 1) % 3] = u;
                d[(axis + 2) % 3] = v;
                *centre + Vec3::from_array(d)
            }
            Sdf::Torus { centre, major, minor } => {
                let th = rng.gen::<f64>() * std::f64::consts::TAU;
                // tube angle weighted by the local circumference R + r cos
                let ph = loop {
                    let ph = rng.gen::<f64>() * std::f64::consts::TAU;
                    let w = (major + minor * ph.cos()) / (major + minor);
                    if rng.gen::<f64>() < w {
                        break ph;
                    }
                };
                let ring = major + minor * ph.cos();
                *centre + vec3(ring * th.cos(), ring * th.sin(), minor * ph.sin())
            }
            Sdf::Capsule { a, b, radius } => {
                let axis = *b - *a;
                let len = axis.norm();
                let u = axis * (1.0 / len);
                let side = std::f64::consts::TAU * radius * len;
                let caps = 4.0 * std::f64::consts::PI * radius * radius;
                if rng.gen::<f64>() * (side + caps) < side {
                    let th = rng.gen::<f64>() * std::f64::consts::TAU;
                    let h = rng.gen::<f64>() * len;
                    let (e1, e2) = orthonormal_pair(u);
                    *a + u * h + (e1 * th.cos() + e2 * th.sin()) * *radius
                } else {
                    let d = uniform_dir(rng);
                    let end = if d.dot(u) <= 0.0 { *a } else { *b };
                    end + d * *radius
                }
            }
            Sdf::Union(l, r) => {
                let (la, ra) = (l.area(), r.area());
                for _ in 0..1000 {
                    let (own, other) =
                        if rng.gen::<f64>() * (la + ra) < la { (l, r) } else { (r, l) };
                    let p = own.sample_surface(rng);
                    if other.eval(p) > 0.0 {
                        return p;
                    }
                }
                // only reachable when one part swallows the other entirely
                l.sample_surface(rng)
            }
        }
    }
}

fn half_axis(h: Vec3, axis: usize) -> f64 {
    h.to_array()[axis]
}

fn uniform_dir(rng: &mut impl Rng) -> Vec3 {
    let z = 1.0 - 2.0 * rng.gen::<f64>();
    let r = (1.0 - z * z).max(0.0).sqrt();
    let th = rng.gen::<f64>() * std::f64::consts::TAU;
    vec3(r * th.cos(), r * th.sin(), z)
}

fn orthonormal_pair(u: Vec3) -> (Vec3, Vec3) {
    let pick = if u.x.abs() < 0.9 { vec3(1.0, 0.0, 0.0) } else { vec3(0.0, 1.0, 0.0) };
    let e1 = u.cross(pick).normalized();
    let e2 = u.cross(e1);
    (e1, e2)
}

// ---------------------------------------------------------------------------
// Appearance
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub enum Albedo {
    Solid([f64; 3]),
    /// Two tones mixed by a sine along `dir`, giving the colour network a
    /// spatial pattern to learn without view dependence.
    Stripes { a: [f64; 3], b: [f64; 3], dir: Vec3, freq: f64 },
}

impl Albedo {
    pub fn at(&self, p: Vec3) -> [f64; 3] {
        match self {
            Albedo::Solid(c) => *c,
            Albedo::Stripes { a, b, dir, freq } => {
                let w = 0.5 + 0.5 * (std::f64::consts::TAU * freq * p.dot(*dir)).sin();
                [
                    a[0] * (1.0 - w) + b[0] * w,
                    a[1] * (1.0 - w) + b[1] * w,
                    a[2] * (1.0 - w) + b[2] * w,
                ]
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Scenes
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SceneId {
    TwoSpheresTouching,
    SphereOnBox,
    CapsuleGripTorus,
}

impl SceneId {
    pub fn all() -> [SceneId; 3] {
        [SceneId::TwoSpheresTouching, SceneId::SphereOnBox, SceneId::CapsuleGripTorus]
    }

    pub fn name(self) -> &'static str {
        match self {
            SceneId::TwoSpheresTouching => "two-spheres-touching",
            SceneId::SphereOnBox => "sphere-on-box",
            SceneId::CapsuleGripTorus => "capsule-grip-torus",
        }
    }

    pub fn parse(s: &str) -> Result<SceneId> {
        SceneId::all()
            .into_iter()
            .find(|id| id.name() == s)
            .ok_or_else(|| {
                Error::usage(format!(
                    "unknown scene '{s}'; expected one of {}",
                    SceneId::all().map(|i| i.name()).join(", ")
                ))
            })
    }
}

/// A two-object scene with exact geometry, Lambertian appearance and one
/// directional light. `contact_depth` is the signed surface overlap along
/// the scene's contact axis.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalyticScene {
    pub id: SceneId,
    pub contact_depth: f64,
    pub obj1: Sdf,
    pub obj2: Sdf,
    pub albedo1: Albedo,
    pub albedo2: Albedo,
    /// Unit vector pointing toward the light.
    pub light_dir: Vec3,
    pub diffuse: f64,
    pub ambient: f64,
}

impl AnalyticScene {
    pub fn object(&self, which: u8) -> &Sdf {
        if which == 1 {
            &self.obj1
        } else {
            &self.obj2
        }
    }

    pub fn scene_sdf(&self, p: Vec3) -> f64 {
        self.obj1.eval(p).min(self.obj2.eval(p))
    }

    pub fn shade(&self, object: u8, p: Vec3, normal: Vec3) -> [f64; 3] {
        let albedo = if object == 1 { self.albedo1.at(p) } else { self.albedo2.at(p) };
        let lambert = normal.dot(self.light_dir).max(0.0);
        let k = self.ambient + self.diffuse * lambert;
        albedo.map(|a| (a * k).clamp(0.0, 1.0))
    }
}

pub fn make_scene(id: SceneId, contact_depth: f64) -> Result<AnalyticScene> {
    let (lo, hi) = CONTACT_DEPTH_RANGE;
    if !(lo..=hi).contains(&contact_depth) || !contact_depth.is_finite() {
        return Err(Error::usage(format!(
            "contact depth {contact_depth} outside [{lo}, {hi}]"
        )));
    }
    let c = contact_depth;
    let light_dir = vec3(0.4, 0.7, 0.55).normalized();
    let (obj1, obj2, albedo1, albedo2) = match id {
        SceneId::TwoSpheresTouching => {
            // centres along x, spaced so the surface gap is exactly -c
            let (r1, r2) = (0.18, 0.14);
            let gap = r1 + r2 - c;
            (
                Sdf::Sphere { centre: vec3(0.5 - gap / 2.0, 0.5, 0.5), radius: r1 },
                Sdf::Sphere { centre: vec3(0.5 + gap / 2.0, 0.5, 0.5), radius: r2 },
                Albedo::Stripes {
                    a: [0.85, 0.35, 0.25],
                    b: [0.9, 0.8, 0.55],
                    dir: vec3(0.0, 0.0, 1.0),
                    freq: 3.0,
                },
                Albedo::Solid([0.2, 0.55, 0.7]),
            )
        }
        SceneId::SphereOnBox => {
            // sphere resting on the box top; contact along the vertical axis
            let half = vec3(0.22, 0.1, 0.22);
            let top = 0.3 + half.y;
            let r = 0.14;
            (
                Sdf::Sphere { centre: vec3(0.5, top + r - c, 0.5), radius: r },
                Sdf::Cuboid { centre: vec3(0.5, 0.3, 0.5), half },
                Albedo::Solid([0.85, 0.6, 0.25]),
                Albedo::Stripes {
                    a: [0.35, 0.4, 0.5],
                    b: [0.7, 0.72, 0.75],
                    dir: vec3(1.0, 0.0, 0.0),
                    freq: 2.5,
                },
            )
        }
        SceneId::CapsuleGripTorus => {
            // capsule resting against the ring's outer equator; from the +x
            // hemisphere it shadows a band of the ring, the small-object
            // occlusion this scene exists to exercise
            let (major, minor, a) = (0.12, 0.045, 0.05);
            let xc = 0.5 + major + minor + a - c;
            (
                Sdf::Capsule {
                    a: vec3(xc, 0.32, 0.5),
                    b: vec3(xc, 0.68, 0.5),
                    radius: a,
                },
                Sdf::Torus { centre: vec3(0.5, 0.5, 0.5), major, minor },
                Albedo::Solid([0.75, 0.3, 0.35]),
                Albedo::Stripes {
                    a: [0.25, 0.6, 0.4],
                    b: [0.85, 0.85, 0.5],
                    dir: vec3(0.0, 1.0, 0.0),
                    freq: 4.0,
                },
            )
        }
    };
    Ok(AnalyticScene {
        id,
        contact_depth: c,
        obj1,
        obj2,
        albedo1,
        albedo2,
        light_dir,
        diffuse: 0.75,
        ambient: 0.25,
    })
}

// ---------------------------------------------------------------------------
// Sphere tracing
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub t: f64,
    pub point: Vec3,
    /// 1 or 2; ties go to object 1, matching the field routing.
    pub object: u8,
    pub normal: Vec3,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Traced {
    Hit(Hit),
    Miss,
    /// Step budget exhausted without convergence (grazing rays).
    Failed,
}

pub fn trace(scene: &AnalyticScene, ray: &Ray) -> Traced {
    if !ray.hits_scene() {
        return Traced::Miss;
    }
    let mut t = ray.near;
    let mut prev = t;
    for _ in 0..TRACE_MAX_STEPS {
        let phi = scene.scene_sdf(ray.point_at(t));
        if phi < 0.0 {
            // the floor step carried us inside; bisect back to the crossing
            let (mut lo, mut hi) = (prev, t);
            while hi - lo > 1e-10 {
                let mid = 0.5 * (lo + hi);
                if scene.scene_sdf(ray.point_at(mid)) > 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            return hit_at(scene, ray, hi);
        }
        if phi < TRACE_EPS {
            return hit_at(scene, ray, t);
        }
        prev = t;
        t += phi.max(TRACE_FLOOR);
        if t > ray.far {
            return Traced::Miss;
        }
    }
    Traced::Failed
}

fn hit_at(scene: &AnalyticScene, ray: &Ray, t: f64) -> Traced {
    let p = ray.point_at(t);
    let object = if scene.obj1.eval(p) <= scene.obj2.eval(p) { 1 } else { 2 };
    let normal = scene.object(object).gradient(p).normalized();
    Traced::Hit(Hit { t, point: p, object, normal })
}

/// One traced view: shaded image plus the two first-hit masks.
#[derive(Debug, Clone, PartialEq)]
pub struct TracedView {
    pub image: ImageBuffer,
    pub mask1: ImageBuffer,
    pub mask2: ImageBuffer,
}

/// Sphere-traces every pixel of every camera. Masks record the first-hit
/// object only, so a pixel where one object occludes the other belongs to
/// the occluder alone. Non-converged pixels count as background and must
/// stay under 0.01% of all pixels.
pub fn render_ground_truth(scene: &AnalyticScene, cameras: &[Camera]) -> Result<Vec<TracedView>> {
    let mut views = Vec::with_capacity(cameras.len());
    let mut failed = 0usize;
    let mut total = 0usize;
    for cam in cameras {
        let (w, h) = (cam.width, cam.height);
        let shaded: Vec<([f64; 3], u8, bool)> = (0..(w * h) as usize)
            .into_par_iter()
            .map(|i| {
                let (ix, iy) = (i as u32 % w, i as u32 / w);
                let ray = cam.pixel_ray(ix, iy, (0.5, 0.5)).expect("pixel in range");
                match trace(scene, &ray) {
                    Traced::Hit(hit) => {
                        (scene.shade(hit.object, hit.point, hit.normal), hit.object, false)
                    }
                    Traced::Miss => ([0.0; 3], 0, false),
                    Traced::Failed => ([0.0; 3], 0, true),
                }
            })
            .collect();

        let mut image = ImageBuffer::new(w, h, 3)?;
        let mut mask1 = ImageBuffer::new(w, h, 1)?;
        let mut mask2 = ImageBuffer::new(w, h, 1)?;
        for (i, (rgb, object, fail)) in shaded.iter().enumerate() {
            let (ix, iy) = (i as u32 % w, i as u32 / w);
            image.set_pixel(ix, iy, &rgb.map(|v| v as f32));
            if *object == 1 {
                mask1.set_pixel(ix, iy, &[1.0]);
            } else if *object == 2 {
                mask2.set_pixel(ix, iy, &[1.0]);
            }
            failed += *fail as usize;
        }
        total += (w * h) as usize;
        views.push(TracedView { image, mask1, mask2 });
    }
    if (failed as f64) >= (total as f64) * 1e-4 {
        return Err(Error::numeric(format!(
            "sphere tracer failed on {failed} of {total} pixels"
        )));
    }
    Ok(views)
}

// ---------------------------------------------------------------------------
// Camera rigs
// ---------------------------------------------------------------------------

pub const DEFAULT_TRAIN_VIEWS: usize = 20;
pub const DEFAULT_TEST_VIEWS: usize = 4;
pub const DEFAULT_ORBIT: f64 = 1.7;
/// Focal length as a multiple of image width, so framing is resolution
/// independent.
pub const FOCAL_PER_PIXEL: f64 = 1.25;

/// `n` cameras on a Fibonacci sphere of radius `orbit` around the scene
/// centre, all looking inward.
pub fn orbit_cameras(n: usize, width: u32, height: u32, orbit: f64) -> Result<Vec<Camera>> {
    orbit_cameras_seeded(n, width, height, orbit, 0)
}

/// Same ring, swung about the vertical axis by a seed-derived azimuth so
/// different datasets see the contact region from different sides. Seed 0
/// leaves the ring where [`orbit_cameras`] puts it.
pub fn orbit_cameras_seeded(
    n: usize,
    width: u32,
    height: u32,
    orbit: f64,
    seed: u64,
) -> Result<Vec<Camera>> {
    let centre = vec3(0.5, 0.5, 0.5);
    let f = FOCAL_PER_PIXEL * width as f64;
    let theta = (seed as f64 * 0.618_033_988_749_894_9).fract() * std::f64::consts::TAU;
    let (s, c) = theta.sin_cos();
    fibonacci_sphere(n)
        .into_iter()
        .map(|d| {
            let d = vec3(d.x * c - d.y * s, d.x * s + d.y * c, d.z);
            Camera::look_at(centre + d * orbit, centre, vec3(0.0, 0.0, 1.0), f, f, width, height)
        })
        .collect()
}

/// The standard rig: 24 orbit cameras, every sixth (offset 3) held out,
/// giving 20 training and 4 evenly spread test views.
pub fn default_rig(width: u32, height: u32) -> Result<(Vec<Camera>, Vec<Camera>)> {
    let all = orbit_cameras(DEFAULT_TRAIN_VIEWS + DEFAULT_TEST_VIEWS, width, height, DEFAULT_ORBIT)?;
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (i, cam) in all.into_iter().enumerate() {
        if i % 6 == 3 {
            test.push(cam);
        } else {
            train.push(cam);
        }
    }
    Ok((train, test))
}

// ---------------------------------------------------------------------------
