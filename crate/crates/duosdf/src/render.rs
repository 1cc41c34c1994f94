//! Volume rendering of the two distance fields.
//!
//! Marching walks each ray in fixed strata of `MARCH_STEP`, keeps only
//! samples inside occupied cells, converts consecutive signed distances into
//! per-object opacities, composites them, and stops once the accumulated
//! transmittance is spent. Rendering then folds the retained samples into
//! three colours: each object on its own and the composite scene.
//!
//! Two evaluation paths share the marched structure. The value path fills
//! [`RaySampleBatch`] and feeds [`render`]/[`render_view`]; the tape path
//! ([`render_rays_on_tape`]) replays the recorded sample positions through
//! the autodiff graph so losses can differentiate colours and opacities
//! while the sample selection itself stays frozen.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::linalg::{Buf, Real};
use crate::autodiff::params::ParamSet;
use crate::autodiff::tape::{Segments, Tape, Var};
use crate::fields::{interval_alpha, interval_alpha_nodes, FieldSample, SceneFields};
use crate::geometry::{Camera, ImageBuffer, Ray, Vec3};
use crate::occupancy::OccupancyGrid;
use crate::{Error, Result};

/// Stratified marching step in scene units.
pub const MARCH_STEP: f64 = 1.0 / 256.0;
/// Retained samples per ray never exceed this.
pub const MAX_SAMPLES: usize = 1024;
/// Marching stops once the remaining transmittance drops below this.
pub const TERMINATION_TS: f64 = 1e-4;

/// Retained candidates gathered per ray between batched field evaluations.
/// Small enough that the samples wasted past a termination stay cheap, big
/// enough that evaluation batches amortise.
const ROUND: usize = 8;
/// Rays per image chunk; chunk boundaries are fixed so the output does not
/// depend on the thread count.
const RENDER_CHUNK: usize = 4096;

/// One retained sample. `t_s` is the transmittance ARRIVING at the sample
/// (1 for the first), so the Eq-style weights are `t_s * alpha`.
#[derive(Debug, Clone)]
pub struct RaySample {
    pub depth: f64,
    pub field: FieldSample,
    pub alpha1: f64,
    pub alpha2: f64,
    /// Exactly `composite_alpha(alpha1, alpha2)`.
    pub alpha_s: f64,
    pub t_s: f64,
}

impl RaySample {
    pub fn weight1(&self) -> f64 {
        self.t_s * self.alpha1
    }

    pub fn weight2(&self) -> f64 {
        self.t_s * self.alpha2
    }

    pub fn weight_s(&self) -> f64 {
        self.t_s * self.alpha_s
    }
}

/// Marched samples of one ray, in depth order.
#[derive(Debug, Clone)]
pub struct RaySampleBatch {
    pub ray: Ray,
    pub samples: Vec<RaySample>,
    /// Partner position of the final sample's opacity interval: the next
    /// candidate when marching terminated there, otherwise one step beyond
    /// the sample. Meaningless when `samples` is empty.
    pub tail: Vec3,
    /// Transmittance left after the last sample.
    pub final_ts: f64,
}

impl RaySampleBatch {
    fn empty(ray: Ray) -> RaySampleBatch {
        RaySampleBatch { ray, samples: Vec::new(), tail: ray.origin, final_ts: 1.0 }
    }
}

/// alpha_s = alpha1 + alpha2 - alpha1*alpha2, the union of two independent
/// occlusion events. Evaluated in the factored form alpha1 + alpha2*(1 -
/// alpha1), which keeps the identity and absorbing elements exact in floats.
pub fn composite_alpha(alpha1: f64, alpha2: f64) -> f64 {
    debug_assert!((0.0..=1.0).contains(&alpha1) && (0.0..=1.0).contains(&alpha2));
    alpha1 + alpha2 * (1.0 - alpha1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RenderMode {
    Scene,
    Object1,
    Object2,
}

/// Folded colours and opacities of one ray.
#[derive(Debug, Clone)]
pub struct RenderOutput {
    /// Composite scene colour, defined as `c1 + c2 - cross` so the
    /// three-term identity holds exactly; agrees with the direct
    /// transmittance-weighted sum to float dust.
    pub c_s: [f64; 3],
    pub c_1: [f64; 3],
    pub c_2: [f64; 3],
    pub o_s: f64,
    pub o_1: f64,
    pub o_2: f64,
    /// Opacity-weighted mean depth; 0 for rays that hit nothing.
    pub depth: f64,
}

// ---------------------------------------------------------------------------
// Marching

struct Pending {
    depth: f64,
    x: Vec3,
    phi1: f64,
    phi2: f64,
}

struct Cursor {
    k: u64,
    rng: ChaCha8Rng,
    ts: f64,
    pending: Option<Pending>,
    done: bool,
}

struct Round {
    ray: usize,
    /// Depths and positions of this round's retained candidates.
    cand: Vec<(f64, Vec3)>,
    /// Ray ends after these candidates (cube exit or sample cap); a tail
    /// position was appended after the candidates when one is needed.
    finish: bool,
    has_tail: bool,
}

/// Marches every ray against a batched signed-distance evaluator. Generic
/// over the field so analytic SDFs can drive it in tests; the trained model
/// goes through [`march_rays`].
fn march_core<F>(
    mut phi_pair: F,
    beta: f64,
    occupancy: &OccupancyGrid,
    rays: &[Ray],
    seeds: &[u64],
) -> Vec<RaySampleBatch>
where
    F: FnMut(&[Vec3]) -> (Vec<f64>, Vec<f64>),
{
    assert_eq!(rays.len(), seeds.len(), "one seed per ray");
    let mut batches: Vec<RaySampleBatch> =
        rays.iter().map(|r| RaySampleBatch::empty(*r)).collect();
    let mut cursors: Vec<Cursor> = rays
        .iter()
        .zip(seeds)
        .map(|(r, &s)| Cursor {
            k: 0,
            rng: ChaCha8Rng::seed_from_u64(s),
            ts: 1.0,
            pending: None,
            done: !r.hits_scene(),
        })
        .collect();

    loop {
        // gather candidate positions for one evaluation round
        let mut xs: Vec<Vec3> = Vec::new();
        let mut rounds: Vec<Round> = Vec::new();
        for (i, cur) in cursors.iter_mut().enumerate() {
            if cur.done {
                continue;
            }
            let ray = &rays[i];
            let mut cand = Vec::with_capacity(ROUND);
            let mut finish = false;
            let committed = batches[i].samples.len() + cur.pending.is_some() as usize;
            loop {
                if committed + cand.len() >= MAX_SAMPLES {
                    finish = true;
                    break;
                }
                let u: f64 = cur.rng.gen_range(0.0..1.0);
                let t = ray.near + (cur.k as f64 + u) * MARCH_STEP;
                cur.k += 1;
                if t >= ray.far {
                    finish = true;
                    break;
                }
                let x = ray.point_at(t);
                if occupancy.occupied_at(x) {
                    cand.push((t, x));
                    if cand.len() == ROUND {
                        break;
                    }
                }
            }
            let last_x = cand.last().map(|c| c.1).or_else(|| cur.pending.as_ref().map(|p| p.x));
            let has_tail = finish && last_x.is_some();
            xs.extend(cand.iter().map(|c| c.1));
            if has_tail {
                xs.push(last_x.unwrap() + ray.direction * MARCH_STEP);
            }
            if cand.is_empty() && !finish {
                unreachable!("a round either gathers candidates or finishes the ray");
            }
            rounds.push(Round { ray: i, cand, finish, has_tail });
        }
        if rounds.is_empty() {
            break;
        }

        let (p1, p2) = if xs.is_empty() { (Vec::new(), Vec::new()) } else { phi_pair(&xs) };
        debug_assert_eq!(p1.len(), xs.len());

        // fold evaluated distances back into per-ray state
        let mut off = 0usize;
        for r in &rounds {
            let cur = &mut cursors[r.ray];
            let batch = &mut batches[r.ray];
            let n = r.cand.len();
            let vals = &p1[off..off + n + r.has_tail as usize];
            let vals2 = &p2[off..off + n + r.has_tail as usize];
            off += n + r.has_tail as usize;

            let mut terminated = false;
            for (j, &(t, x)) in r.cand.iter().enumerate() {
                let (phi1, phi2) = (vals[j], vals2[j]);
                if let Some(p) = cur.pending.take() {
                    commit(batch, cur, beta, p, phi1, phi2);
                    if cur.ts < TERMINATION_TS {
                        // this candidate was the final opacity partner
                        batch.tail = x;
                        terminated = true;
                        break;
                    }
                }
                cur.pending = Some(Pending { depth: t, x, phi1, phi2 });
            }
            if terminated {
                cur.done = true;
                continue;
            }
            if r.finish {
                if let Some(p) = cur.pending.take() {
                    let tail_x = p.x + batch.ray.direction * MARCH_STEP;
                    let last = vals.len() - 1;
                    commit(batch, cur, beta, p, vals[last], vals2[last]);
                    batch.tail = tail_x;
                }
                cur.done = true;
            }
        }
    }

    for (b, c) in batches.iter_mut().zip(&cursors) {
        b.final_ts = c.ts;
    }
    batches
}

fn commit(
    batch: &mut RaySampleBatch,
    cur: &mut Cursor,
    beta: f64,
    p: Pending,
    next_phi1: f64,
    next_phi2: f64,
) {
    let alpha1 = interval_alpha(p.phi1, next_phi1, beta);
    let alpha2 = interval_alpha(p.phi2, next_phi2, beta);
    let alpha_s = composite_alpha(alpha1, alpha2);
    batch.samples.push(RaySample {
        depth: p.depth,
        field: FieldSample {
            x: p.x,
            phi1: p.phi1,
            phi2: p.phi2,
            phi_s: if p.phi1 <= p.phi2 { p.phi1 } else { p.phi2 },
            normal: crate::geometry::vec3(0.0, 0.0, 0.0),
            colour: [0.0; 3],
            g: [0.0; crate::fields::FEATURE_DIM],
        },
        alpha1,
        alpha2,
        alpha_s,
        t_s: cur.ts,
    });
    cur.ts *= 1.0 - alpha_s;
}

/// Marches a set of rays through the trained fields. Batches are unshaded
/// (geometry only); [`shade_batches`] fills colours and normals.
pub fn march_rays<R: Real>(
    fields: &SceneFields,
    params: &ParamSet<R>,
    occupancy: &OccupancyGrid,
    rays: &[Ray],
    seeds: &[u64],
) -> Vec<RaySampleBatch> {
    let beta = fields.beta(params).promote();
    march_core(
        |xs| {
            let (p1, p2) = fields.eval_sdf_values(params, xs);
            (
                p1.iter().map(|v| v.promote()).collect(),
                p2.iter().map(|v| v.promote()).collect(),
            )
        },
        beta,
        occupancy,
        rays,
        seeds,
    )
}

/// Marches one ray and shades it (novel-view appearance when `image` is
/// None). Stratification jitter is seeded from `rng`.
pub fn march_ray<R: Real>(
    fields: &SceneFields,
    params: &ParamSet<R>,
    occupancy: &OccupancyGrid,
    ray: Ray,
    rng: &mut impl Rng,
    image: Option<u32>,
) -> Result<RaySampleBatch> {
    let seed = rng.gen::<u64>();
    let mut batches = march_rays(fields, params, occupancy, &[ray], &[seed]);
    let ids = image.map(|i| vec![i]);
    shade_batches(fields, params, &mut batches, ids.as_deref())?;
    Ok(batches.pop().unwrap())
}

const SHADE_CHUNK: usize = 4096;

/// Evaluates colour, normal and trunk features at every retained sample.
/// `image_ids` holds one appearance id per batch; None renders all of them
/// with the zero code. Marched distances are kept as recorded.
pub fn shade_batches<R: Real>(
    fields: &SceneFields,
    params: &ParamSet<R>,
    batches: &mut [RaySampleBatch],
    image_ids: Option<&[u32]>,
) -> Result<()> {
    if let Some(ids) = image_ids {
        if ids.len() != batches.len() {
            return Err(Error::usage("one image id per marched ray expected"));
        }
    }
    let refs: Vec<(usize, usize)> = batches
        .iter()
        .enumerate()
        .flat_map(|(b, batch)| (0..batch.samples.len()).map(move |s| (b, s)))
        .collect();

    for chunk in refs.chunks(SHADE_CHUNK) {
        let xs: Vec<Vec3> = chunk.iter().map(|&(b, s)| batches[b].samples[s].field.x).collect();
        let views: Vec<Vec3> = chunk.iter().map(|&(b, _)| batches[b].ray.direction).collect();
        let ids: Option<Vec<u32>> =
            image_ids.map(|ids| chunk.iter().map(|&(b, _)| ids[b]).collect());

        let mut tape: Tape<R> = Tape::new();
        let geom = fields.eval_geometry(&mut tape, params, &xs);
        let colour = fields.eval_colour_tape(&mut tape, params, &xs, &views, ids.as_deref(), &geom)?;

        let n = chunk.len();
        let cv = tape.value(colour);
        let gv = tape.value(geom.grads);
        let gf = tape.value(geom.g);
        for (r, &(b, s)) in chunk.iter().enumerate() {
            let f = &mut batches[b].samples[s].field;
            f.colour = [
                cv.data[r * 3].promote(),
                cv.data[r * 3 + 1].promote(),
                cv.data[r * 3 + 2].promote(),
            ];
            f.normal = crate::geometry::vec3(
                gv.data[r].promote(),
                gv.data[n + r].promote(),
                gv.data[2 * n + r].promote(),
            );
            for (c, slot) in f.g.iter_mut().enumerate() {
                *slot = gf.data[r * crate::fields::FEATURE_DIM + c].promote();
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Folding samples into colours

/// Folds one marched, shaded ray. The composite colour is assembled from
/// the same per-sample products as the object colours and the cross term,
/// which makes `c_s == c_1 + c_2 - cross` an exact identity rather than an
/// approximate one; the direct transmittance-weighted sum agrees to float
/// dust.
pub fn render(batch: &RaySampleBatch) -> RenderOutput {
    let mut c1 = [0.0; 3];
    let mut c2 = [0.0; 3];
    let mut cross = [0.0; 3];
    let (mut o1, mut o2, mut os) = (0.0, 0.0, 0.0);
    let mut depth_acc = 0.0;
    for s in &batch.samples {
        let w1 = s.t_s * s.alpha1;
        let w2 = s.t_s * s.alpha2;
        let wx = s.t_s * (s.alpha1 * s.alpha2);
        let ws = s.t_s * s.alpha_s;
        for c in 0..3 {
            c1[c] += w1 * s.field.colour[c];
            c2[c] += w2 * s.field.colour[c];
            cross[c] += wx * s.field.colour[c];
        }
        o1 += w1;
        o2 += w2;
        os += ws;
        depth_acc += ws * s.depth;
    }
    let c_s = [c1[0] + c2[0] - cross[0], c1[1] + c2[1] - cross[1], c1[2] + c2[2] - cross[2]];
    debug_assert!(os <= 1.0 + 1e-6, "opacity sum exceeded 1: {os}");
    let o_s = os.min(1.0);
    let depth = if o_s > 1e-9 { depth_acc / o_s } else { 0.0 };
    RenderOutput { c_s, c_1: c1, c_2: c2, o_s, o_1: o1, o_2: o2, depth }
}

/// Renders a full camera view. Scene mode gives an RGB image; object modes
/// give RGBA with the object's accumulated opacity in the alpha channel.
/// Rays go through pixel centres; `image` picks the appearance code (None
/// for novel views). `seed` fixes the stratification jitter.
pub fn render_view<R: Real>(
    fields: &SceneFields,
    params: &ParamSet<R>,
    occupancy: &OccupancyGrid,
    cam: &Camera,
    mode: RenderMode,
    image: Option<u32>,
    seed: u64,
) -> Result<ImageBuffer> {
    if let Some(i) = image {
        if i as usize >= fields.n_images {
            return Err(Error::usage(format!(
                "image id {i} out of range (model trained on {} images)",
                fields.n_images
            )));
        }
    }
    let n_rays = cam.width as usize * cam.height as usize;
    let mut rays = Vec::with_capacity(n_rays);
    for iy in 0..cam.height {
        for ix in 0..cam.width {
            rays.push(cam.pixel_ray(ix, iy, (0.5, 0.5))?);
        }
    }

    let chunk_results: Vec<Result<Vec<RenderOutput>>> = rays
        .par_chunks(RENDER_CHUNK)
        .enumerate()
        .map(|(ci, chunk)| {
            let base = ci * RENDER_CHUNK;
            let seeds: Vec<u64> =
                (0..chunk.len()).map(|i| splitmix64(seed ^ (base + i) as u64)).collect();
            let mut batches = march_rays(fields, params, occupancy, chunk, &seeds);
            let ids: Option<Vec<u32>> = image.map(|i| vec![i; batches.len()]);
            shade_batches(fields, params, &mut batches, ids.as_deref())?;
            Ok(batches.iter().map(render).collect())
        })
        .collect();

    let channels = if mode == RenderMode::Scene { 3 } else { 4 };
    let mut img = ImageBuffer::new(cam.width, cam.height, channels)?;
    let mut i = 0usize;
    for outs in chunk_results {
        for out in outs? {
            let (ix, iy) = ((i % cam.width as usize) as u32, (i / cam.width as usize) as u32);
            match mode {
                RenderMode::Scene => {
                    img.set_pixel(ix, iy, &[out.c_s[0] as f32, out.c_s[1] as f32, out.c_s[2] as f32])
                }
                RenderMode::Object1 => img.set_pixel(
                    ix,
                    iy,
                    &[out.c_1[0] as f32, out.c_1[1] as f32, out.c_1[2] as f32, out.o_1 as f32],
                ),
                RenderMode::Object2 => img.set_pixel(
                    ix,
                    iy,
                    &[out.c_2[0] as f32, out.c_2[1] as f32, out.c_2[2] as f32, out.o_2 as f32],
                ),
            }
            i += 1;
        }
    }
    Ok(img)
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

// ---------------------------------------------------------------------------
// Tape path

/// Differentiable render of marched rays: colours per ray plus the raw
/// per-sample opacities the regularisers consume. Sample positions and
/// segment structure come frozen from the batches; every value is recomputed
/// on the tape.
pub struct TapeRender {
    /// Per-ray colours, [n_rays, 3].
    pub cs: Var,
    pub c1: Var,
    pub c2: Var,
    /// Per-sample opacities, [n_samples, 1], ordered ray-major.
    pub alpha1: Var,
    pub alpha2: Var,
    /// Signed distances at the same samples, [n_samples, 1].
    pub phi1: Var,
    pub phi2: Var,
    /// The sharpness node behind the opacities.
    pub beta: Var,
    /// Retained samples per ray.
    pub segs: Arc<Segments>,
    pub n_rays: usize,
    pub n_samples: usize,
}

pub fn render_rays_on_tape<R: Real>(
    tape: &mut Tape<R>,
    params: &ParamSet<R>,
    fields: &SceneFields,
    batches: &[RaySampleBatch],
    image_ids: Option<&[u32]>,
) -> Result<TapeRender> {
    if let Some(ids) = image_ids {
        if ids.len() != batches.len() {
            return Err(Error::usage("one image id per marched ray expected"));
        }
    }
    let n_rays = batches.len();
    let beta = fields.beta_node(tape, params);

    // rows: each non-empty ray contributes its samples then the tail partner
    let mut xs: Vec<Vec3> = Vec::new();
    let mut views: Vec<Vec3> = Vec::new();
    let mut row_ids: Vec<u32> = Vec::new();
    let mut ret_idx: Vec<u32> = Vec::new();
    let mut nxt_idx: Vec<u32> = Vec::new();
    let mut offsets: Vec<u32> = vec![0];
    for (b, batch) in batches.iter().enumerate() {
        let n = batch.samples.len();
        if n > 0 {
            let off = xs.len() as u32;
            xs.extend(batch.samples.iter().map(|s| s.field.x));
            xs.push(batch.tail);
            views.extend(std::iter::repeat_n(batch.ray.direction, n + 1));
            if let Some(ids) = image_ids {
                row_ids.extend(std::iter::repeat_n(ids[b], n + 1));
            }
            ret_idx.extend(off..off + n as u32);
            nxt_idx.extend(off + 1..off + n as u32 + 1);
        }
        offsets.push(ret_idx.len() as u32);
    }
    let n_samples = ret_idx.len();
    let segs = Arc::new(Segments::new(offsets));

    if n_samples == 0 {
        let zero3 = tape.constant(Buf::zeros(n_rays, 3));
        let empty = tape.constant(Buf::zeros(0, 1));
        return Ok(TapeRender {
            cs: zero3,
            c1: zero3,
            c2: zero3,
            alpha1: empty,
            alpha2: empty,
            phi1: empty,
            phi2: empty,
            beta,
            segs,
            n_rays,
            n_samples,
        });
    }

    let geom = fields.eval_geometry(tape, params, &xs);
    let colour_all =
        fields.eval_colour_tape(tape, params, &xs, &views, image_ids.map(|_| &row_ids[..]), &geom)?;

    let ret = Arc::new(ret_idx);
    let nxt = Arc::new(nxt_idx);
    let p1_i = tape.gather_rows(geom.phi1, ret.clone());
    let p1_n = tape.gather_rows(geom.phi1, nxt.clone());
    let p2_i = tape.gather_rows(geom.phi2, ret.clone());
    let p2_n = tape.gather_rows(geom.phi2, nxt);
    let alpha1 = interval_alpha_nodes(tape, p1_i, p1_n, beta);
    let alpha2 = interval_alpha_nodes(tape, p2_i, p2_n, beta);

    // transmittance via log space; 1 - alpha_s factors as (1-a1)(1-a2),
    // which stays away from zero thanks to the opacity clamp
    let na1 = tape.scale(alpha1, R::of(-1.0));
    let na2 = tape.scale(alpha2, R::of(-1.0));
    let om1 = tape.add_scalar(na1, R::one());
    let om2 = tape.add_scalar(na2, R::one());
    let prod = tape.mul(om1, om2);
    let logp = tape.ln(prod);
    let cum = tape.segment_excl_cumsum(logp, segs.clone());
    let ts = tape.exp(cum);

    let w1 = tape.mul(ts, alpha1);
    let w2 = tape.mul(ts, alpha2);
    let a12 = tape.mul(alpha1, alpha2);
    let wx = tape.mul(ts, a12);

    let colour = tape.gather_rows(colour_all, ret);
    let c1 = weighted_colour_sum(tape, w1, colour, &segs);
    let c2 = weighted_colour_sum(tape, w2, colour, &segs);
    let cross = weighted_colour_sum(tape, wx, colour, &segs);
    let c12 = tape.add(c1, c2);
    let cs = tape.sub(c12, cross);

    Ok(TapeRender { cs, c1, c2, alpha1, alpha2, phi1: p1_i, phi2: p2_i, beta, segs, n_rays, n_samples })
}

fn weighted_colour_sum<R: Real>(
    tape: &mut Tape<R>,
    w: Var,
    colour: Var,
    segs: &Arc<Segments>,
) -> Var {
    let w3 = tape.concat_cols(&[w, w, w]);
    let t = tape.mul(w3, colour);
    tape.segment_sum(t, segs.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{unit_cube_range, vec3};
    use approx::assert_abs_diff_eq;

    fn cube_ray(origin: Vec3, direction: Vec3) -> Ray {
        let d = direction.normalized();
        let (near, far) = unit_cube_range(origin, d).unwrap_or((0.0, 0.0));
        Ray { origin, direction: d, near, far }
    }

    fn fresh_fields<R: Real>(beta: f64) -> (ParamSet<R>, SceneFields) {
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let fields = SceneFields::new(&mut params, 2, &mut rng);
        params.block_mut(fields.log_beta).values[0] = R::of(beta.ln());
        (params, fields)
    }

    #[test]
    fn composite_alpha_identities_and_fuzz() {
        assert_eq!(composite_alpha(0.0, 0.37), 0.37);
        assert_eq!(composite_alpha(1.0, 0.9), 1.0);
        assert_eq!(composite_alpha(0.5, 0.5), 0.75);
        let mut state = 0x243f6a8885a308d3u64;
        for _ in 0..1_000_000 {
            state = splitmix64(state);
            let a1 = (state >> 11) as f64 / (1u64 << 53) as f64;
            state = splitmix64(state);
            let a2 = (state >> 11) as f64 / (1u64 << 53) as f64;
            let direct = composite_alpha(a1, a2);
            let via_product = 1.0 - (1.0 - a1) * (1.0 - a2);
            let via_sum = a1 + a2 - a1 * a2;
            assert!((direct - via_product).abs() <= 1e-14, "{a1} {a2}");
            assert!((direct - via_sum).abs() <= 1e-14, "{a1} {a2}");
        }
    }

    #[test]
    fn missing_the_cube_renders_background() {
        let (params, fields) = fresh_fields::<f32>(30.0);
        let occ = OccupancyGrid::all_occupied(8);
        let ray = cube_ray(vec3(3.0, 3.0, 3.0), vec3(1.0, 0.0, 0.0));
        assert!(!ray.hits_scene());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batch = march_ray(&fields, &params, &occ, ray, &mut rng, None).unwrap();
        assert!(batch.samples.is_empty());
        assert_eq!(batch.final_ts, 1.0);
        let out = render(&batch);
        assert_eq!(out.c_s, [0.0; 3]);
        assert_eq!(out.o_s, 0.0);
        assert_eq!(out.depth, 0.0);
    }

    #[test]
    fn far_field_gives_zero_opacity_everywhere() {
        let (mut params, fields) = fresh_fields::<f32>(30.0);
        for head in [&fields.head1, &fields.head2] {
            params.block_mut(head.b[2]).values[0] += 10.0;
        }
        let occ = OccupancyGrid::all_occupied(8);
        let ray = cube_ray(vec3(-0.5, 0.45, 0.55), vec3(1.0, 0.0, 0.0));
        let batches = march_rays(&fields, &params, &occ, &[ray], &[7]);
        let batch = &batches[0];
        assert!(batch.samples.len() > 200, "full-length march expected");
        for s in &batch.samples {
            assert_eq!(s.alpha1, 0.0);
            assert_eq!(s.alpha2, 0.0);
            assert_eq!(s.t_s, 1.0);
        }
        assert_eq!(batch.final_ts, 1.0);
    }

    #[test]
    fn analytic_sphere_saturates_a_centre_ray() {
        let centre = vec3(0.5, 0.5, 0.5);
        let sphere = move |xs: &[Vec3]| {
            let p1: Vec<f64> = xs.iter().map(|x| (*x - centre).norm() - 0.2).collect();
            let p2 = vec![1e9; xs.len()];
            (p1, p2)
        };
        let occ = OccupancyGrid::all_occupied(8);
        let ray = cube_ray(vec3(0.5, 0.5, -0.5), vec3(0.0, 0.0, 1.0));
        let batches = march_core(sphere, 1000.0, &occ, &[ray], &[3]);
        let b = &batches[0];
        assert!(!b.samples.is_empty());

        let mut prev_depth = f64::NEG_INFINITY;
        let mut prev_ts = 1.0;
        assert_eq!(b.samples[0].t_s, 1.0);
        let (mut o_s, mut o_2, mut depth) = (0.0, 0.0, 0.0);
        for s in &b.samples {
            assert!(s.depth > prev_depth, "depths must increase strictly");
            assert!(s.t_s <= prev_ts, "transmittance must not increase");
            assert!((0.0..=1.0).contains(&s.alpha1) && (0.0..=1.0).contains(&s.alpha_s));
            prev_depth = s.depth;
            prev_ts = s.t_s;
            o_s += s.weight_s();
            o_2 += s.weight2();
            depth += s.weight_s() * s.depth;
        }
        assert!(o_s > 0.99, "centre ray should saturate, got {o_s}");
        assert!(o_s <= 1.0 + 1e-6);
        assert_eq!(o_2, 0.0);
        // front face sits at z = 0.3, i.e. t = 0.8 from this origin
        assert_abs_diff_eq!(depth / o_s, 0.8, epsilon = 0.01);
    }

    #[test]
    fn front_slab_occludes_the_back_slab() {
        let slabs = |xs: &[Vec3]| {
            let p1: Vec<f64> = xs.iter().map(|x| (x.z - 0.3).abs() - 0.02).collect();
            let p2: Vec<f64> = xs.iter().map(|x| (x.z - 0.7).abs() - 0.02).collect();
            (p1, p2)
        };
        let occ = OccupancyGrid::all_occupied(8);
        let ray = cube_ray(vec3(0.4, 0.6, -0.5), vec3(0.0, 0.0, 1.0));
        let batches = march_core(slabs, 2000.0, &occ, &[ray], &[5]);
        let b = &batches[0];
        let o_1: f64 = b.samples.iter().map(|s| s.weight1()).sum();
        let o_2: f64 = b.samples.iter().map(|s| s.weight2()).sum();
        assert!(o_1 > 0.99, "front slab should absorb the ray, got {o_1}");
        assert!(o_2 < 1e-3, "occluded object must stay invisible, got {o_2}");
    }

    #[test]
    fn render_matches_a_term_by_term_expansion() {
        // handmade batch: the folding must agree with the naive reading of
        // the compositing equation
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let ray = cube_ray(vec3(0.5, 0.5, -0.5), vec3(0.0, 0.0, 1.0));
        let mut batch = RaySampleBatch::empty(ray);
        let mut ts = 1.0;
        for i in 0..8 {
            let alpha1: f64 = rng.gen_range(0.0..0.6);
            let alpha2: f64 = rng.gen_range(0.0..0.6);
            let alpha_s = composite_alpha(alpha1, alpha2);
            let depth = 0.6 + 0.05 * i as f64;
            let x = ray.point_at(depth);
            batch.samples.push(RaySample {
                depth,
                field: FieldSample {
                    x,
                    phi1: 0.0,
                    phi2: 0.0,
                    phi_s: 0.0,
                    normal: vec3(0.0, 0.0, 1.0),
                    colour: [rng.gen(), rng.gen(), rng.gen()],
                    g: [0.0; crate::fields::FEATURE_DIM],
                },
                alpha1,
                alpha2,
                alpha_s,
                t_s: ts,
            });
            ts *= 1.0 - alpha_s;
        }
        batch.final_ts = ts;

        let out = render(&batch);
        let mut naive1 = [0.0f64; 3];
        let mut naive2 = [0.0f64; 3];
        let mut naive_cross = [0.0f64; 3];
        let mut naive_s = [0.0f64; 3];
        for s in &batch.samples {
            for c in 0..3 {
                naive1[c] += s.t_s * s.alpha1 * s.field.colour[c];
                naive2[c] += s.t_s * s.alpha2 * s.field.colour[c];
                naive_cross[c] += s.t_s * s.alpha1 * s.alpha2 * s.field.colour[c];
                naive_s[c] += s.t_s * s.alpha_s * s.field.colour[c];
            }
        }
        for c in 0..3 {
            assert_abs_diff_eq!(out.c_1[c], naive1[c], epsilon = 1e-15);
            assert_abs_diff_eq!(out.c_2[c], naive2[c], epsilon = 1e-15);
            // exact identity by construction
            assert_eq!(out.c_s[c], naive1[c] + naive2[c] - naive_cross[c]);
            // and the direct compositing sum agrees to float dust
            assert_abs_diff_eq!(out.c_s[c], naive_s[c], epsilon = 1e-12);
            assert!(out.c_1[c] + out.c_2[c] >= out.c_s[c] - 1e-5);
        }
        assert!(out.o_s <= 1.0);
    }

    #[test]
    fn all_alpha2_zero_collapses_to_object_one() {
        let ray = cube_ray(vec3(0.5, 0.5, -0.5), vec3(0.0, 0.0, 1.0));
        let mut batch = RaySampleBatch::empty(ray);
        let mut ts = 1.0;
        for i in 0..5 {
            let alpha1 = 0.1 + 0.1 * i as f64;
            batch.samples.push(RaySample {
                depth: 0.6 + 0.05 * i as f64,
                field: FieldSample {
                    x: ray.point_at(0.6 + 0.05 * i as f64),
                    phi1: 0.0,
                    phi2: 1.0,
                    phi_s: 0.0,
                    normal: vec3(0.0, 0.0, 1.0),
                    colour: [0.2, 0.5, 0.8],
                    g: [0.0; crate::fields::FEATURE_DIM],
                },
                alpha1,
                alpha2: 0.0,
                alpha_s: composite_alpha(alpha1, 0.0),
                t_s: ts,
            });
            ts *= 1.0 - alpha1;
        }
        let out = render(&batch);
        assert_eq!(out.c_s, out.c_1, "no second object means the scene is object one");
        assert_eq!(out.c_2, [0.0; 3]);
        assert_eq!(out.o_2, 0.0);
    }

    #[test]
    fn skipping_empty_space_changes_nothing_visible() {
        let (params, fields) = fresh_fields::<f32>(100.0);
        let mut occ = OccupancyGrid::new(32);
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        occ.full_update(&fields, &params, &mut rng);
        assert!(occ.occupied_fraction() < 0.6, "skipping test needs clear cells");
        let dense = OccupancyGrid::all_occupied(32);

        let cam = Camera::look_at(
            vec3(0.5, -0.9, 0.6),
            vec3(0.5, 0.5, 0.5),
            vec3(0.0, 0.0, 1.0),
            40.0,
            40.0,
            32,
            24,
        )
        .unwrap();
        let pixels = [(16u32, 12u32), (10, 12), (22, 12), (16, 6), (16, 18), (4, 4)];
        let mut skipped_total = 0usize;
        let mut dense_total = 0usize;
        for (i, &(ix, iy)) in pixels.iter().enumerate() {
            let ray = cam.pixel_ray(ix, iy, (0.5, 0.5)).unwrap();
            let seeds = [1000 + i as u64];
            let mut fast = march_rays(&fields, &params, &occ, &[ray], &seeds);
            let mut slow = march_rays(&fields, &params, &dense, &[ray], &seeds);
            skipped_total += fast[0].samples.len();
            dense_total += slow[0].samples.len();
            shade_batches(&fields, &params, &mut fast, None).unwrap();
            shade_batches(&fields, &params, &mut slow, None).unwrap();
            let (a, b) = (render(&fast[0]), render(&slow[0]));
            for c in 0..3 {
                assert!(
                    (a.c_s[c] - b.c_s[c]).abs() <= 1e-3,
                    "pixel ({ix},{iy}) channel {c}: {} vs {}",
                    a.c_s[c],
                    b.c_s[c]
                );
            }
            assert!((a.o_s - b.o_s).abs() <= 1e-3);
        }
        assert!(
            skipped_total * 2 < dense_total,
            "occupancy should remove most samples: {skipped_total} vs {dense_total}"
        );
    }

    #[test]
    fn rendered_views_have_the_right_shape_and_are_deterministic() {
        let (params, fields) = fresh_fields::<f32>(100.0);
        let mut occ = OccupancyGrid::new(32);
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        occ.full_update(&fields, &params, &mut rng);
        let cam = Camera::look_at(
            vec3(0.5, -0.8, 0.5),
            vec3(0.5, 0.5, 0.5),
            vec3(0.0, 0.0, 1.0),
            10.0,
            10.0,
            8,
            6,
        )
        .unwrap();

        let scene = render_view(&fields, &params, &occ, &cam, RenderMode::Scene, Some(1), 9).unwrap();
        assert_eq!((scene.width, scene.height, scene.channels), (8, 6, 3));
        let again = render_view(&fields, &params, &occ, &cam, RenderMode::Scene, Some(1), 9).unwrap();
        assert_eq!(scene, again, "same seed must reproduce the image bit for bit");

        let obj1 = render_view(&fields, &params, &occ, &cam, RenderMode::Object1, None, 9).unwrap();
        assert_eq!(obj1.channels, 4);
        assert!(obj1.data().iter().all(|v| v.is_finite()));

        let bad = render_view(&fields, &params, &occ, &cam, RenderMode::Scene, Some(5), 9);
        assert!(matches!(bad, Err(Error::Usage(_))));
    }

    #[test]
    fn tape_render_reproduces_the_value_path_and_backpropagates() {
        let (mut params, fields) = fresh_fields::<f64>(100.0);
        let mut occ = OccupancyGrid::new(32);
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        occ.full_update(&fields, &params, &mut rng);
        let cam = Camera::look_at(
            vec3(0.5, -0.9, 0.55),
            vec3(0.5, 0.5, 0.5),
            vec3(0.0, 0.0, 1.0),
            14.0,
            14.0,
            12,
            8,
        )
        .unwrap();
        let rays = [
            cam.pixel_ray(6, 4, (0.5, 0.5)).unwrap(),
            cam.pixel_ray(3, 4, (0.5, 0.5)).unwrap(),
            cam.pixel_ray(9, 3, (0.5, 0.5)).unwrap(),
            cube_ray(vec3(3.0, 3.0, 3.0), vec3(1.0, 0.0, 0.0)), // miss
        ];
        let seeds = [100, 101, 102, 103];
        let ids = [0u32, 1, 0, 1];
        let mut batches = march_rays(&fields, &params, &occ, &rays, &seeds);
        assert!(batches[0].samples.len() > 4, "centre ray should hit");
        assert!(batches[3].samples.is_empty());
        shade_batches(&fields, &params, &mut batches, Some(&ids)).unwrap();

        let values: Vec<RenderOutput> = batches.iter().map(render).collect();

        let mut tape: Tape<f64> = Tape::new();
        let tr = render_rays_on_tape(&mut tape, &params, &fields, &batches, Some(&ids)).unwrap();
        assert_eq!(tr.n_rays, 4);
        let cs = tape.value(tr.cs).clone();
        let c1 = tape.value(tr.c1).clone();
        let c2 = tape.value(tr.c2).clone();
        for (r, v) in values.iter().enumerate() {
            for c in 0..3 {
                assert_abs_diff_eq!(cs.data[r * 3 + c], v.c_s[c], epsilon = 1e-9);
                assert_abs_diff_eq!(c1.data[r * 3 + c], v.c_1[c], epsilon = 1e-9);
                assert_abs_diff_eq!(c2.data[r * 3 + c], v.c_2[c], epsilon = 1e-9);
            }
        }
        // the missed ray renders background
        assert_eq!(cs.row(3), [0.0; 3]);

        // drive a scalar through backward; geometry, colour and sharpness
        // must all receive gradients
        let total = tape.sum_all(tr.cs);
        params.zero_grads();
        tape.backward(total, &mut params).unwrap();
        let gnorm: f64 = params.ids().map(|id| params.grad_norm_sq(id)).sum();
        assert!(gnorm.is_finite() && gnorm > 0.0);
        let beta_grad = params.block(fields.log_beta).grad[0];
        assert!(beta_grad.is_finite() && beta_grad != 0.0, "sharpness must train");
    }
}
