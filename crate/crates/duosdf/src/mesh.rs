//! Triangle meshes from signed distance functions.
//!
//! Extraction samples the unit cube on a regular grid and walks each cell
//! split into six tetrahedra, which keeps the surface watertight without the
//! classic cube case tables: all tetrahedron faces match up across cell
//! boundaries and every crossing vertex is keyed by the grid edge it sits on,
//! so welding is exact by construction rather than by epsilon.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, BufWriter, Write as IoWrite};
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;

use crate::autodiff::linalg::Real;
use crate::autodiff::params::ParamSet;
use crate::error::{Error, Result};
use crate::fields::SceneFields;
use crate::geometry::{vec3, Vec3};
use crate::render::RenderMode;
use crate::synth::Sdf;

/// Grid resolution used for ground-truth meshes and final extraction.
pub const DEFAULT_MESH_RES: usize = 256;

/// Minimum resolution accepted by [`extract_mesh`]; coarser grids alias the
/// shapes the evaluation pipeline cares about.
pub const MIN_MESH_RES: usize = 64;

/// Indexed triangle soup. Triangles are counter-clockwise seen from outside
/// when produced by [`extract_isosurface`] (positive signed volume for a
/// closed surface around material with negative distance values).
#[derive(Debug, Clone, PartialEq)]
pub struct TriangleMesh {
    pub vertices: Vec<Vec3>,
    pub triangles: Vec<[u32; 3]>,
}

impl TriangleMesh {
    pub fn empty() -> TriangleMesh {
        TriangleMesh { vertices: Vec::new(), triangles: Vec::new() }
    }

    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    /// Index bounds and repeated-index triangles.
    pub fn validate(&self) -> Result<()> {
        let n = self.vertices.len() as u32;
        for (i, t) in self.triangles.iter().enumerate() {
            if t.iter().any(|&v| v >= n) {
                return Err(Error::data(format!("triangle {i} references a missing vertex")));
            }
            if t[0] == t[1] || t[1] == t[2] || t[0] == t[2] {
                return Err(Error::data(format!("triangle {i} repeats a vertex")));
            }
        }
        Ok(())
    }

    fn corners(&self, t: [u32; 3]) -> (Vec3, Vec3, Vec3) {
        (
            self.vertices[t[0] as usize],
            self.vertices[t[1] as usize],
            self.vertices[t[2] as usize],
        )
    }

    pub fn area(&self) -> f64 {
        self.triangles
            .iter()
            .map(|&t| {
                let (a, b, c) = self.corners(t);
                0.5 * (b - a).cross(c - a).norm()
            })
            .sum()
    }

    /// Divergence-theorem volume: positive when triangles wind outward around
    /// the enclosed region.
    pub fn signed_volume(&self) -> f64 {
        self.triangles
            .iter()
            .map(|&t| {
                let (a, b, c) = self.corners(t);
                a.dot(b.cross(c)) / 6.0
            })
            .sum()
    }

    pub fn aabb(&self) -> (Vec3, Vec3) {
        let mut lo = vec3(f64::INFINITY, f64::INFINITY, f64::INFINITY);
        let mut hi = -lo;
        for v in &self.vertices {
            lo = lo.min(*v);
            hi = hi.max(*v);
        }
        (lo, hi)
    }

    /// Number of directed edges that are not matched by exactly one edge in
    /// the opposite direction. Zero means closed and consistently oriented.
    pub fn edge_defects(&self) -> usize {
        let mut count: HashMap<(u32, u32), i64> = HashMap::new();
        for t in &self.triangles {
            for k in 0..3 {
                let (a, b) = (t[k], t[(k + 1) % 3]);
                *count.entry((a.min(b), a.max(b))).or_insert(0) += if a < b { 1 } else { -1 };
                // Track total degree in the high bits free of the winding sum.
            }
        }
        // An interior edge of an oriented closed surface appears once per
        // direction: winding sum 0. Re-count degrees for the "exactly two"
        // half of the condition.
        let mut degree: HashMap<(u32, u32), u32> = HashMap::new();
        for t in &self.triangles {
            for k in 0..3 {
                let (a, b) = (t[k], t[(k + 1) % 3]);
                *degree.entry((a.min(b), a.max(b))).or_insert(0) += 1;
            }
        }
        degree
            .iter()
            .filter(|(e, &d)| d != 2 || count[e] != 0)
            .count()
    }

    pub fn is_watertight(&self) -> bool {
        !self.is_empty() && self.edge_defects() == 0
    }

    /// Area-uniform surface points: triangle by cumulative area, location by
    /// the square-root barycentric map.
    pub fn sample_surface(&self, n: usize, rng: &mut impl Rng) -> Vec<Vec3> {
        if self.triangles.is_empty() || n == 0 {
            return Vec::new();
        }
        let mut cum = Vec::with_capacity(self.triangles.len());
        let mut total = 0.0;
        for &t in &self.triangles {
            let (a, b, c) = self.corners(t);
            total += 0.5 * (b - a).cross(c - a).norm();
            cum.push(total);
        }
        (0..n)
            .map(|_| {
                let u = rng.gen::<f64>() * total;
                let i = cum.partition_point(|&s| s < u).min(cum.len() - 1);
                let (a, b, c) = self.corners(self.triangles[i]);
                let su = rng.gen::<f64>().sqrt();
                let v = rng.gen::<f64>();
                a * (1.0 - su) + b * (su * (1.0 - v)) + c * (su * v)
            })
            .collect()
    }

    /// Connected components by shared vertices.
    pub fn component_count(&self) -> usize {
        self.component_labels().1
    }

    fn component_labels(&self) -> (Vec<u32>, usize) {
        let mut parent: Vec<u32> = (0..self.vertices.len() as u32).collect();
        fn find(parent: &mut [u32], mut v: u32) -> u32 {
            while parent[v as usize] != v {
                parent[v as usize] = parent[parent[v as usize] as usize];
                v = parent[v as usize];
            }
            v
        }
        for t in &self.triangles {
            let r0 = find(&mut parent, t[0]);
            let r1 = find(&mut parent, t[1]);
            parent[r1 as usize] = r0;
            let r2 = find(&mut parent, t[2]);
            let r0 = find(&mut parent, t[0]);
            parent[r2 as usize] = r0;
        }
        let mut roots = HashMap::new();
        let mut labels = vec![u32::MAX; self.vertices.len()];
        for t in &self.triangles {
            for &v in t {
                let r = find(&mut parent, v);
                let next = roots.len() as u32;
                let id = *roots.entry(r).or_insert(next);
                labels[v as usize] = id;
            }
        }
        (labels, roots.len())
    }

    /// Keep only the component with the largest surface area and drop the
    /// vertices that no longer appear.
    pub fn largest_component(&self) -> TriangleMesh {
        let (labels, n) = self.component_labels();
        if n <= 1 {
            return self.clone();
        }
        let mut areas = vec![0.0; n];
        for &t in &self.triangles {
            let (a, b, c) = self.corners(t);
            areas[labels[t[0] as usize] as usize] += 0.5 * (b - a).cross(c - a).norm();
        }
        let keep = areas
            .iter()
            .enumerate()
            .max_by(|x, y| x.1.total_cmp(y.1))
            .map(|(i, _)| i as u32)
            .unwrap();
        let mut remap = vec![u32::MAX; self.vertices.len()];
        let mut out = TriangleMesh::empty();
        for &t in &self.triangles {
            if labels[t[0] as usize] != keep {
                continue;
            }
            let mut nt = [0u32; 3];
            for (slot, &v) in nt.iter_mut().zip(&t) {
                if remap[v as usize] == u32::MAX {
                    remap[v as usize] = out.vertices.len() as u32;
                    out.vertices.push(self.vertices[v as usize]);
                }
                *slot = remap[v as usize];
            }
            out.triangles.push(nt);
        }
        out
    }
}

/// Zero-crossing surface of a scalar field over the unit cube, sampled on a
/// `res`^3 cell grid. `eval` receives batches of grid corners and returns one
/// value per point; negative means inside.
pub fn extract_isosurface<F>(eval: &F, res: usize) -> TriangleMesh
where
    F: Fn(&[Vec3]) -> Vec<f64>,
{
    assert!(res >= 2, "grid too coarse to carry a surface");
    let n = res + 1;
    let inv = 1.0 / res as f64;
    let pos = |g: u64| {
        let ix = (g % n as u64) as f64;
        let iy = ((g / n as u64) % n as u64) as f64;
        let iz = (g / (n as u64 * n as u64)) as f64;
        vec3(ix * inv, iy * inv, iz * inv)
    };

    // Corner values gathered in z bands sized to give the evaluator batches
    // worth parallelising internally.
    let mut values = Vec::with_capacity(n * n * n);
    let band = (262_144 / (n * n)).max(1);
    let mut iz = 0;
    while iz < n {
        let top = (iz + band).min(n);
        let mut pts = Vec::with_capacity((top - iz) * n * n);
        for z in iz..top {
            for y in 0..n {
                for x in 0..n {
                    pts.push(vec3(x as f64 * inv, y as f64 * inv, z as f64 * inv));
                }
            }
        }
        let vs = eval(&pts);
        assert_eq!(vs.len(), pts.len(), "evaluator dropped points");
        // An exact zero would place vertices on grid corners, where every
        // incident edge interpolates to the same point and the edge-keyed
        // welding breaks down. Nudge inside by enough that the offset
        // survives the interpolation arithmetic.
        values.extend(vs.iter().map(|&v| if v == 0.0 { -1e-12 } else { v }));
        iz = top;
    }

    // Kuhn split: six tetrahedra around the (0,0,0)-(1,1,1) diagonal. Face
    // diagonals agree between neighbouring cells, which is what makes the
    // output closed. Corner bit k encodes offset (k&1, k>>1&1, k>>2&1).
    const TETS: [[usize; 4]; 6] =
        [[0, 1, 3, 7], [0, 1, 5, 7], [0, 2, 3, 7], [0, 2, 6, 7], [0, 4, 5, 7], [0, 4, 6, 7]];

    let mut mesh = TriangleMesh::empty();
    let mut edge_cache: HashMap<(u64, u64), u32> = HashMap::new();
    let nn = (n * n) as u64;
    let value = |g: u64| values[g as usize];

    for cz in 0..res as u64 {
        for cy in 0..res as u64 {
            for cx in 0..res as u64 {
                let base = cx + cy * n as u64 + cz * nn;
                let mut gid = [0u64; 8];
                let mut v = [0.0f64; 8];
                let mut sign_mix = false;
                for k in 0..8 {
                    let g = base
                        + (k & 1) as u64
                        + ((k >> 1) & 1) as u64 * n as u64
                        + ((k >> 2) & 1) as u64 * nn;
                    gid[k] = g;
                    v[k] = value(g);
                    sign_mix |= (v[k] < 0.0) != (v[0] < 0.0);
                }
                if !sign_mix {
                    continue;
                }
                for tet in TETS {
                    emit_tet(&mut mesh, &mut edge_cache, &pos, &value, [
                        gid[tet[0]],
                        gid[tet[1]],
                        gid[tet[2]],
                        gid[tet[3]],
                    ]);
                }
            }
        }
    }
    mesh
}

/// One tetrahedron: zero, one, or two triangles depending on how many corners
/// sit inside. Triangles are flipped as needed so normals run inside to out.
fn emit_tet(
    mesh: &mut TriangleMesh,
    cache: &mut HashMap<(u64, u64), u32>,
    pos: &impl Fn(u64) -> Vec3,
    value: &impl Fn(u64) -> f64,
    g: [u64; 4],
) {
    let inside: Vec<usize> = (0..4).filter(|&k| value(g[k]) < 0.0).collect();
    if inside.is_empty() || inside.len() == 4 {
        return;
    }
    let outside: Vec<usize> = (0..4).filter(|&k| value(g[k]) >= 0.0).collect();

    let centroid = |set: &[usize]| {
        set.iter().fold(Vec3::ZERO, |s, &k| s + pos(g[k])) * (1.0 / set.len() as f64)
    };
    let out_dir = centroid(&outside) - centroid(&inside);

    let mut edge = |a: u64, b: u64| -> u32 {
        let key = (a.min(b), a.max(b));
        if let Some(&i) = cache.get(&key) {
            return i;
        }
        // Interpolate on the canonically ordered pair so the position is
        // bit-identical no matter which tetrahedron asks first.
        let (va, vb) = (value(key.0), value(key.1));
        let t = va / (va - vb);
        let p = pos(key.0) + (pos(key.1) - pos(key.0)) * t;
        let i = mesh.vertices.len() as u32;
        mesh.vertices.push(p);
        cache.insert(key, i);
        i
    };

    let push = |mesh_tris: &mut Vec<[u32; 3]>, verts: &[Vec3], mut t: [u32; 3]| {
        let (a, b, c) = (
            verts[t[0] as usize],
            verts[t[1] as usize],
            verts[t[2] as usize],
        );
        if (b - a).cross(c - a).dot(out_dir) < 0.0 {
            t.swap(1, 2);
        }
        mesh_tris.push(t);
    };

    match inside.len() {
        1 | 3 => {
            let apex = if inside.len() == 1 { inside[0] } else { outside[0] };
            let ring: Vec<usize> = (0..4).filter(|&k| k != apex).collect();
            let t = [
                edge(g[apex], g[ring[0]]),
                edge(g[apex], g[ring[1]]),
                edge(g[apex], g[ring[2]]),
            ];
            push(&mut mesh.triangles, &mesh.vertices, t);
        }
        2 => {
            let (i0, i1) = (inside[0], inside[1]);
            let (o0, o1) = (outside[0], outside[1]);
            // Quad corners in cyclic order: consecutive ones share a
            // tetrahedron vertex.
            let a = edge(g[i0], g[o0]);
            let b = edge(g[i0], g[o1]);
            let c = edge(g[i1], g[o1]);
            let d = edge(g[i1], g[o0]);
            push(&mut mesh.triangles, &mesh.vertices, [a, b, c]);
            push(&mut mesh.triangles, &mesh.vertices, [a, c, d]);
        }
        _ => unreachable!(),
    }
}

/// Surface of one learned distance field (or their minimum for the full
/// scene) at `res` cells across the unit cube.
pub fn extract_mesh<R: Real>(
    fields: &SceneFields,
    params: &ParamSet<R>,
    which: RenderMode,
    res: usize,
) -> Result<TriangleMesh> {
    if res < MIN_MESH_RES {
        return Err(Error::usage(format!(
            "mesh resolution {res} is below the minimum of {MIN_MESH_RES}"
        )));
    }
    // Corners on the domain walls are forced outside: learned fields are
    // unconstrained there, and an open rim would break every downstream
    // consumer that assumes closed surfaces (volumes, voxelisation).
    let on_wall = |v: f64| v < 1e-9 || v > 1.0 - 1e-9;
    let eval = |xs: &[Vec3]| -> Vec<f64> {
        let chunks: Vec<Vec<f64>> = xs
            .par_chunks(2048)
            .map(|chunk| {
                let (p1, p2) = fields.eval_sdf_values(params, chunk);
                let raw: Vec<f64> = match which {
                    RenderMode::Object1 => p1.iter().map(|v| v.promote()).collect(),
                    RenderMode::Object2 => p2.iter().map(|v| v.promote()).collect(),
                    RenderMode::Scene => p1
                        .iter()
                        .zip(&p2)
                        .map(|(a, b)| a.promote().min(b.promote()))
                        .collect(),
                };
                chunk
                    .iter()
                    .zip(raw)
                    .map(|(p, v)| {
                        if on_wall(p.x) || on_wall(p.y) || on_wall(p.z) {
                            v.max(1e-3)
                        } else {
                            v
                        }
                    })
                    .collect()
            })
            .collect();
        chunks.concat()
    };
    let mesh = extract_isosurface(&eval, res);
    if mesh.is_empty() {
        eprintln!("warning: zero level set is empty at resolution {res}");
    }
    Ok(mesh)
}

/// Ground-truth mesh of an analytic shape.
pub fn analytic_mesh(sdf: &Sdf, res: usize) -> TriangleMesh {
    let eval = |xs: &[Vec3]| xs.iter().map(|&p| sdf.eval(p)).collect::<Vec<f64>>();
    extract_isosurface(&eval, res)
}

/// Plain OBJ writer: `v` and `f` records only. Coordinates use the shortest
/// decimal form that round-trips, so write/read is lossless.
pub fn write_obj(mesh: &TriangleMesh, path: &Path) -> Result<()> {
    let wrap = |e| Error::io(path, e);
    let file = std::fs::File::create(path).map_err(wrap)?;
    let mut w = BufWriter::new(file);
    for v in &mesh.vertices {
        writeln!(w, "v {} {} {}", v.x, v.y, v.z).map_err(wrap)?;
    }
    for t in &mesh.triangles {
        writeln!(w, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1).map_err(wrap)?;
    }
    w.flush().map_err(wrap)?;
    Ok(())
}

/// Reads `v` and `f` records, ignores normals, texture coordinates, groups
/// and comments, and fan-triangulates faces with more than three corners.
pub fn read_obj(path: &Path) -> Result<TriangleMesh> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut mesh = TriangleMesh::empty();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let mut tok = line.split_whitespace();
        let bad = |what: &str| {
            Error::data(format!("{}:{}: {what}", path.display(), lineno + 1))
        };
        match tok.next() {
            Some("v") => {
                let mut coord = || -> Result<f64> {
                    tok.next()
                        .ok_or_else(|| bad("vertex with fewer than 3 coordinates"))?
                        .parse::<f64>()
                        .map_err(|_| bad("unparseable vertex coordinate"))
                };
                let (x, y, z) = (coord()?, coord()?, coord()?);
                mesh.vertices.push(vec3(x, y, z));
            }
            Some("f") => {
                let idx: Vec<u32> = tok
                    .map(|t| {
                        let first = t.split('/').next().unwrap_or("");
                        first
                            .parse::<i64>()
                            .ok()
                            .filter(|&i| i > 0 && i <= mesh.vertices.len() as i64)
                            .map(|i| (i - 1) as u32)
                            .ok_or_else(|| bad("face index out of range"))
                    })
                    .collect::<Result<_>>()?;
                if idx.len() < 3 {
                    return Err(bad("face with fewer than 3 corners"));
                }
                for k in 1..idx.len() - 1 {
                    mesh.triangles.push([idx[0], idx[k], idx[k + 1]]);
                }
            }
            _ => {}
        }
    }
    mesh.validate()?;
    Ok(mesh)
}
