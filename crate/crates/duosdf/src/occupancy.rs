//! Coarse opacity cache for empty-space skipping during ray marching.
//!
//! Each cell keeps a running estimate of the largest step opacity seen at a
//! jittered sample inside it. Updates decay the old estimate by 0.95 and
//! max-merge a fresh proxy, so cells fade out over a few sweeps when the
//! surface moves away but turn on immediately when it arrives. The flag
//! array is always the estimate array thresholded at the skip cutoff.

use rand::Rng;

use crate::autodiff::linalg::Real;
use crate::autodiff::params::ParamSet;
use crate::fields::{interval_alpha, SceneFields};
use crate::geometry::{vec3, Vec3};

pub const DEFAULT_RES: usize = 128;
/// A cell is skippable when its opacity estimate falls below this.
pub const SKIP_THRESHOLD: f32 = 1e-4;
pub const DECAY: f32 = 0.95;
/// Virtual marching step used for the opacity proxy.
const PROXY_STEP: f64 = 1.0 / 256.0;

const EVAL_CHUNK: usize = 1 << 16;

pub struct OccupancyGrid {
    pub res: usize,
    /// Decayed max of observed step opacities, one per cell.
    pub estimates: Vec<f32>,
    /// `estimates[i] >= SKIP_THRESHOLD`, kept in lockstep.
    pub flags: Vec<bool>,
}

impl OccupancyGrid {
    /// Starts every cell exactly at the threshold: marching is conservative
    /// until the first sweep, and one update clears any truly empty cell.
    pub fn new(res: usize) -> OccupancyGrid {
        assert!(res > 0);
        let cells = res * res * res;
        OccupancyGrid {
            res,
            estimates: vec![SKIP_THRESHOLD; cells],
            flags: vec![true; cells],
        }
    }

    /// Fully transparent-to-nothing grid: never skips. Used to cross-check
    /// marching with skipping disabled.
    pub fn all_occupied(res: usize) -> OccupancyGrid {
        let cells = res * res * res;
        OccupancyGrid { res, estimates: vec![1.0; cells], flags: vec![true; cells] }
    }

    pub fn cells(&self) -> usize {
        self.res * self.res * self.res
    }

    pub fn cell_index(&self, ix: usize, iy: usize, iz: usize) -> usize {
        ix + iy * self.res + iz * self.res * self.res
    }

    pub fn occupied_at(&self, p: Vec3) -> bool {
        let r = self.res as f64;
        let ix = ((p.x * r) as isize).clamp(0, self.res as isize - 1) as usize;
        let iy = ((p.y * r) as isize).clamp(0, self.res as isize - 1) as usize;
        let iz = ((p.z * r) as isize).clamp(0, self.res as isize - 1) as usize;
        self.flags[self.cell_index(ix, iy, iz)]
    }

    pub fn occupied_fraction(&self) -> f64 {
        self.flags.iter().filter(|f| **f).count() as f64 / self.cells() as f64
    }

    /// Decay-then-max merge of one fresh proxy observation.
    pub fn merge_estimate(&mut self, cell: usize, proxy: f32) {
        let e = (self.estimates[cell] * DECAY).max(proxy);
        self.estimates[cell] = e;
        self.flags[cell] = e >= SKIP_THRESHOLD;
    }

    /// Re-estimates every cell.
    pub fn full_update<R: Real>(
        &mut self,
        fields: &SceneFields,
        params: &ParamSet<R>,
        rng: &mut impl Rng,
    ) {
        let all: Vec<usize> = (0..self.cells()).collect();
        self.update_cells(fields, params, &all, rng);
    }

    /// Re-estimates the cells of one interleaved partition (`cell % phases
    /// == phase`), so a rolling schedule touches every cell once per cycle.
    pub fn partial_update<R: Real>(
        &mut self,
        fields: &SceneFields,
        params: &ParamSet<R>,
        phase: usize,
        phases: usize,
        rng: &mut impl Rng,
    ) {
        assert!(phases > 0 && phase < phases);
        let picked: Vec<usize> = (0..self.cells()).skip(phase).step_by(phases).collect();
        self.update_cells(fields, params, &picked, rng);
    }

    fn update_cells<R: Real>(
        &mut self,
        fields: &SceneFields,
        params: &ParamSet<R>,
        cells: &[usize],
        rng: &mut impl Rng,
    ) {
        let beta = fields.beta(params).promote();
        let inv = 1.0 / self.res as f64;
        for chunk in cells.chunks(EVAL_CHUNK) {
            let xs: Vec<Vec3> = chunk
                .iter()
                .map(|&c| {
                    let ix = c % self.res;
                    let iy = (c / self.res) % self.res;
                    let iz = c / (self.res * self.res);
                    vec3(
                        (ix as f64 + rng.gen_range(0.0..1.0)) * inv,
                        (iy as f64 + rng.gen_range(0.0..1.0)) * inv,
                        (iz as f64 + rng.gen_range(0.0..1.0)) * inv,
                    )
                })
                .collect();
            let (p1, p2) = fields.eval_sdf_values(params, &xs);
            for (i, &c) in chunk.iter().enumerate() {
                let phi = p1[i].min(p2[i]).promote();
                // opacity of a virtual step arriving at this sample
                let proxy = interval_alpha(phi + PROXY_STEP, phi, beta);
                self.merge_estimate(c, proxy as f32);
            }
        }
    }
}
