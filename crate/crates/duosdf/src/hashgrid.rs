//! Multi-resolution hash encoding of unit-cube positions.
//!
//! Eighteen lattice levels with per-side resolutions growing geometrically
//! from 16 to 8192. A level stores two features per lattice vertex. Coarse
//! levels where the full lattice fits in the table budget are addressed
//! densely; finer levels hash vertex coordinates into 2^19 entries. Features
//! from the eight cell corners are blended trilinearly and all levels
//! concatenate to a 36-wide encoding. The whole map is linear in the stored
//! features, so its gradient with respect to them is exact, and it is
//! piecewise linear in position, so spatial derivative weights are constant
//! inside each finest-level cell.

use std::sync::Arc;

use rand::Rng;

use crate::autodiff::linalg::{Buf, Real};
use crate::autodiff::params::{LrGroup, ParamId, ParamSet};
use crate::autodiff::tape::{encode_forward, InterpPlan, Tape, Var};
use crate::geometry::Vec3;

pub const LEVELS: usize = 18;
pub const FEATURES: usize = 2;
pub const TABLE_SIZE: u32 = 1 << 19;
pub const BASE_RES: u32 = 16;
pub const MAX_RES: u32 = 8192;

const HASH_PRIMES: [u32; 3] = [1, 2_654_435_761, 805_459_861];

#[derive(Debug, Clone, Copy)]
pub struct LevelSpec {
    pub res: u32,
    /// First entry of this level inside the shared feature table.
    pub offset: u32,
    pub entries: u32,
    pub dense: bool,
}

#[derive(Debug, Clone)]
pub struct HashGrid {
    pub levels: Vec<LevelSpec>,
    pub total_entries: u32,
    pub table: ParamId,
}

/// Per-side resolution of level `l`.
pub fn level_res(l: usize) -> u32 {
    let ratio = (MAX_RES / BASE_RES) as f64;
    let t = l as f64 / (LEVELS - 1) as f64;
    // the epsilon absorbs powf rounding at the exact-integer endpoints
    (BASE_RES as f64 * ratio.powf(t) + 1e-6).floor() as u32
}

/// Row-major vertex index on a dense lattice with `res + 1` vertices a side.
pub fn dense_index(res: u32, x: u32, y: u32, z: u32) -> u32 {
    let side = res + 1;
    x + y * side + z * side * side
}

/// Coordinate hash for levels whose lattice exceeds the table budget.
pub fn hash_index(x: u32, y: u32, z: u32) -> u32 {
    let h = x
        .wrapping_mul(HASH_PRIMES[0])
        ^ y.wrapping_mul(HASH_PRIMES[1])
        ^ z.wrapping_mul(HASH_PRIMES[2]);
    h % TABLE_SIZE
}

impl HashGrid {
    /// Builds the level layout and registers the feature table (init
    /// uniform in [-1e-4, 1e-4]) as one sparse parameter block.
    pub fn new<R: Real>(params: &mut ParamSet<R>, rng: &mut impl Rng) -> HashGrid {
        let mut levels = Vec::with_capacity(LEVELS);
        let mut offset: u32 = 0;
        for l in 0..LEVELS {
            let res = level_res(l);
            let side = res as u64 + 1;
            let lattice = side * side * side;
            let dense = lattice <= TABLE_SIZE as u64;
            let entries = if dense { lattice as u32 } else { TABLE_SIZE };
            levels.push(LevelSpec { res, offset, entries, dense });
            offset += entries;
        }
        assert_eq!(levels[0].res, BASE_RES);
        assert_eq!(levels[LEVELS - 1].res, MAX_RES);
        let total_entries = offset;
        let n = total_entries as usize * FEATURES;
        let values: Vec<R> = (0..n).map(|_| R::of(rng.gen_range(-1e-4..1e-4))).collect();
        let table = params.add(
            "hash",
            vec![total_entries as usize, FEATURES],
            values,
            LrGroup::HashTable,
            true,
        );
        HashGrid { levels, total_entries, table }
    }

    pub const fn out_cols() -> usize {
        LEVELS * FEATURES
    }

    /// Gathers corner indices and blend weights for a batch of positions.
    /// With `with_jac` the plan also carries d(weight)/d(position) so the
    /// encoding output grows three jacobian column groups.
    pub fn plan<R: Real>(&self, xs: &[Vec3], with_jac: bool) -> InterpPlan<R> {
        let n = xs.len();
        let corners = 8;
        let mut idx = vec![0u32; n * LEVELS * corners];
        let mut w = vec![R::zero(); n * LEVELS * corners * 4];
        for (s, p) in xs.iter().enumerate() {
            let px = p.x.clamp(0.0, 1.0);
            let py = p.y.clamp(0.0, 1.0);
            let pz = p.z.clamp(0.0, 1.0);
            for (l, spec) in self.levels.iter().enumerate() {
                let res = spec.res as f64;
                let gx = px * res;
                let gy = py * res;
                let gz = pz * res;
                let cx = (gx.floor() as u32).min(spec.res - 1);
                let cy = (gy.floor() as u32).min(spec.res - 1);
                let cz = (gz.floor() as u32).min(spec.res - 1);
                let fx = gx - cx as f64;
                let fy = gy - cy as f64;
                let fz = gz - cz as f64;
                let base = (s * LEVELS + l) * corners;
                for c in 0..corners {
                    let (bx, by, bz) = ((c & 1) as u32, ((c >> 1) & 1) as u32, ((c >> 2) & 1) as u32);
                    let (vx, vy, vz) = (cx + bx, cy + by, cz + bz);
                    let entry = if spec.dense {
                        dense_index(spec.res, vx, vy, vz)
                    } else {
                        hash_index(vx, vy, vz)
                    };
                    idx[base + c] = spec.offset + entry;
                    let (wx, sx) = if bx == 1 { (fx, 1.0) } else { (1.0 - fx, -1.0) };
                    let (wy, sy) = if by == 1 { (fy, 1.0) } else { (1.0 - fy, -1.0) };
                    let (wz, sz) = if bz == 1 { (fz, 1.0) } else { (1.0 - fz, -1.0) };
                    let wb = (base + c) * 4;
                    w[wb] = R::of(wx * wy * wz);
                    if with_jac {
                        w[wb + 1] = R::of(sx * res * wy * wz);
                        w[wb + 2] = R::of(sy * res * wx * wz);
                        w[wb + 3] = R::of(sz * res * wx * wy);
                    }
                }
            }
        }
        InterpPlan { samples: n, groups: LEVELS, feat: FEATURES, corners, idx, w, with_jac }
    }

    /// Records the encoding on the tape. Output rows 0..n hold the feature
    /// values; with `with_jac` three more n-row blocks follow with d/dx,
    /// d/dy, d/dz so downstream matmuls treat them like extra samples.
    pub fn encode<R: Real>(
        &self,
        tape: &mut Tape<R>,
        params: &ParamSet<R>,
        xs: &[Vec3],
        with_jac: bool,
    ) -> Var {
        let plan = Arc::new(self.plan::<R>(xs, with_jac));
        tape.encode(params, self.table, plan)
    }

    /// Value-only encode whose gradient also flows to `pos`, a tape node
    /// holding `xs` as an [n, 3] buffer (for probing d(field)/d(position)).
    pub fn encode_tracked<R: Real>(
        &self,
        tape: &mut Tape<R>,
        params: &ParamSet<R>,
        xs: &[Vec3],
        pos: Var,
    ) -> Var {
        let mut plan = self.plan::<R>(xs, true);
        plan.with_jac = false; // derivative weights stay for the pull-back
        tape.encode_tracked(params, self.table, Arc::new(plan), pos)
    }

    /// Value-only evaluation for non-differentiated paths.
    pub fn encode_values<R: Real>(&self, params: &ParamSet<R>, xs: &[Vec3]) -> Buf<R> {
        let plan = self.plan::<R>(xs, false);
        encode_forward(params, self.table, &plan)
    }
}
