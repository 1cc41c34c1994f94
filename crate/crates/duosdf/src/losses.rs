//! Training objectives: the masked photometric term, the opacity-overlap
//! penalty that keeps the two fields from co-occupying space, its
//! signed-distance ablation variant, the eikonal regulariser, and the
//! weighted total.
//!
//! Every term exists twice: a plain value form over marched batches (used by
//! evaluation and the oracle tests) and a `_nodes` form that appends the same
//! computation to a tape for backpropagation. The two agree on identical
//! inputs because they share the opacity and compositing formulas.

use rand::Rng;

use crate::autodiff::linalg::{Buf, Real};
use crate::autodiff::params::ParamSet;
use crate::autodiff::tape::{Tape, Var};
use crate::error::{Error, Result};
use crate::fields::{gradient_norms, SceneFields};
use crate::geometry::{vec3, Vec3};
use crate::render::{render_rays_on_tape, RaySampleBatch, RenderOutput, TapeRender};

/// Half-width of the shell that counts as "near the surface" when drawing
/// eikonal sample points.
pub const NEAR_SURFACE_BAND: f64 = 0.05;

// ---------------------------------------------------------------------------
// Configuration and reporting
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    /// Weight of the opacity-overlap penalty in the total.
    pub lambda_alpha: f64,
    /// Weight of the eikonal term in the total.
    pub lambda_eik: f64,
    /// Temperature divisor inside the overlap exponential.
    pub lambda_t: f64,
    /// Smooth-L1 transition point for the colour term.
    pub delta: f64,
}

impl Default for LossWeights {
    fn default() -> LossWeights {
        LossWeights { lambda_alpha: 0.1, lambda_eik: 0.01, lambda_t: 100.0, delta: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_alpha, self.lambda_eik, self.lambda_t, self.delta];
        if all.iter().any(|v| !v.is_finite() || *v <= 0.0) {
            return Err(Error::usage("loss weights must all be positive"));
        }
        Ok(())
    }
}

/// Which penalty discourages the two objects from overlapping.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OverlapPenalty {
    /// Exponential of the opacity product. `differentiate_beta` keeps the
    /// temperature coefficient attached to the sharpness node; by default it
    /// is a detached value, since that path alone would push the sharpness
    /// back down. The opacities keep their sharpness dependence either way.
    Alpha { differentiate_beta: bool },
    /// Exponential of the hinge product max(-phi1,0)*max(-phi2,0). Ablation
    /// variant; penalises interpenetration of the distance fields directly.
    SdfHinge,
    /// Disabled. The overlap slot reports zero.
    Off,
}

impl Default for OverlapPenalty {
    fn default() -> OverlapPenalty {
        OverlapPenalty::Alpha { differentiate_beta: false }
    }
}

/// Scalar view of one training step's objective. `alpha_reg` holds whichever
/// overlap penalty was selected (zero when disabled).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub colour: f64,
    pub alpha_reg: f64,
    pub eikonal: f64,
    pub total: f64,
    /// Whole-parameter gradient norm of each term alone, when measured.
    /// Ordered colour, overlap, eikonal.
    pub grad_norms: Option<[f64; 3]>,
}

impl LossReport {
    /// Combines term values; `total` is exactly the weighted sum.
    pub fn new(colour: f64, alpha_reg: f64, eikonal: f64, w: &LossWeights) -> LossReport {
        let total = colour + w.lambda_alpha * alpha_reg + w.lambda_eik * eikonal;
        LossReport { colour, alpha_reg, eikonal, total, grad_norms: None }
    }

    pub fn is_finite(&self) -> bool {
        self.colour.is_finite()
            && self.alpha_reg.is_finite()
            && self.eikonal.is_finite()
            && self.total.is_finite()
    }
}

/// Per-ray supervision: the full colour and the two mask-multiplied colours.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RayTargets {
    pub scene: [f64; 3],
    pub obj1: [f64; 3],
    pub obj2: [f64; 3],
}

// ---------------------------------------------------------------------------
// Value forms
// ---------------------------------------------------------------------------

/// Smooth-L1: quadratic inside the transition, linear outside, continuous at
/// the joint.
pub fn smooth_l1(e: f64, delta: f64) -> f64 {
    let a = e.abs();
    if a < delta {
        0.5 * e * e / delta
    } else {
        a - 0.5 * delta
    }
}

/// Photometric loss over a batch: smooth-L1 between each rendered colour and
/// its target, over the pairs (object 1, masked), (object 2, masked),
/// (scene, full), summed per ray and averaged over rays.
pub fn colour_loss(outs: &[RenderOutput], targets: &[RayTargets], delta: f64) -> f64 {
    assert_eq!(outs.len(), targets.len(), "one target per rendered ray");
    if outs.is_empty() {
        return 0.0;
    }
    let mut acc = 0.0;
    for (o, t) in outs.iter().zip(targets) {
        for c in 0..3 {
            acc += smooth_l1(o.c_1[c] - t.obj1[c], delta);
            acc += smooth_l1(o.c_2[c] - t.obj2[c], delta);
            acc += smooth_l1(o.c_s[c] - t.scene[c], delta);
        }
    }
    acc / outs.len() as f64
}

/// Opacity-overlap penalty: mean over all marched samples of
/// exp((beta/lambda_t) * alpha1 * alpha2) - 1. Zero exactly when the two
/// opacities never coincide; grows without bound as they saturate together.
pub fn alpha_reg(batches: &[RaySampleBatch], beta: f64, lambda_t: f64) -> f64 {
    let mut acc = 0.0;
    let mut n = 0usize;
    for b in batches {
        for s in &b.samples {
            acc += ((beta / lambda_t) * s.alpha1 * s.alpha2).exp() - 1.0;
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        acc / n as f64
    }
}

/// Distance-level overlap penalty: mean over samples of
/// exp((beta/lambda_t) * max(-phi1,0) * max(-phi2,0)) - 1. Nonzero only
/// where both fields are negative, i.e. actual interpenetration.
pub fn sdf_reg_ablation(batches: &[RaySampleBatch], beta: f64, lambda_t: f64) -> f64 {
    let mut acc = 0.0;
    let mut n = 0usize;
    for b in batches {
        for s in &b.samples {
            let h = (-s.field.phi1).max(0.0) * (-s.field.phi2).max(0.0);
            acc += ((beta / lambda_t) * h).exp() - 1.0;
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        acc / n as f64
    }
}

/// Mean over points of the summed squared norm deviations of the three
/// gradients. Unit-gradient fields score zero.
pub fn eikonal_from_gradients(g1: &[Vec3], g2: &[Vec3], gs: &[Vec3]) -> f64 {
    assert!(g1.len() == g2.len() && g2.len() == gs.len());
    if g1.is_empty() {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..g1.len() {
        for g in [g1[i], g2[i], gs[i]] {
            let d = g.norm() - 1.0;
            acc += d * d;
        }
    }
    acc / g1.len() as f64
}

/// Eikonal loss of the fields at the given points.
pub fn eikonal_loss<R: Real>(fields: &SceneFields, params: &ParamSet<R>, xs: &[Vec3]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let mut tape = Tape::new();
    let node = eikonal_loss_nodes(&mut tape, params, fields, xs);
    tape.scalar_value(node).promote()
}

/// Draws `n` eikonal sample points: half uniform over the domain, half
/// rejection-sampled into the band |phi_s| < [`NEAR_SURFACE_BAND`]. When the
/// band is too thin to hit (degenerate fields), the remainder falls back to
/// uniform draws so the count is always `n`.
pub fn sample_eikonal_points<R: Real>(
    fields: &SceneFields,
    params: &ParamSet<R>,
    n: usize,
    rng: &mut impl Rng,
) -> Vec<Vec3> {
    let n_uniform = n / 2;
    let n_near = n - n_uniform;
    let mut pts: Vec<Vec3> = (0..n_uniform).map(|_| cube_point(rng)).collect();

    let mut near = Vec::with_capacity(n_near);
    for _ in 0..32 {
        if near.len() >= n_near {
            break;
        }
        let cand: Vec<Vec3> = (0..(4 * n_near.max(8))).map(|_| cube_point(rng)).collect();
        let (p1, p2) = fields.eval_sdf_values(params, &cand);
        for (i, c) in cand.iter().enumerate() {
            if near.len() >= n_near {
                break;
            }
            let phi_s = p1[i].promote().min(p2[i].promote());
            if phi_s.abs() < NEAR_SURFACE_BAND {
                near.push(*c);
            }
        }
    }
    while near.len() < n_near {
        near.push(cube_point(rng));
    }
    pts.extend(near);
    pts
}

fn cube_point(rng: &mut impl Rng) -> Vec3 {
    vec3(rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>())
}

// ---------------------------------------------------------------------------
// Tape forms
// ---------------------------------------------------------------------------

/// Photometric loss on the tape. The transition point is baked into the
/// recorded op at 1, so only the default is accepted here.
pub fn colour_loss_nodes<R: Real>(
    tape: &mut Tape<R>,
    tr: &TapeRender,
    targets: &[RayTargets],
    delta: f64,
) -> Var {
    assert_eq!(targets.len(), tr.n_rays, "one target per rendered ray");
    assert!((delta - 1.0).abs() < 1e-12, "recorded smooth-L1 transition is fixed at 1");
    if tr.n_rays == 0 {
        return tape.constant(Buf::zeros(1, 1));
    }
    let buf_of = |pick: fn(&RayTargets) -> [f64; 3]| Buf {
        rows: targets.len(),
        cols: 3,
        data: targets.iter().flat_map(|t| pick(t).map(R::of)).collect(),
    };
    let t1 = buf_of(|t| t.obj1);
    let t2 = buf_of(|t| t.obj2);
    let ts = buf_of(|t| t.scene);
    let t1 = tape.constant(t1);
    let t2 = tape.constant(t2);
    let ts = tape.constant(ts);
    let l1 = tape.smooth_l1(tr.c1, t1);
    let l2 = tape.smooth_l1(tr.c2, t2);
    let ls = tape.smooth_l1(tr.cs, ts);
    let l12 = tape.add(l1, l2);
    let l = tape.add(l12, ls);
    let s = tape.sum_all(l);
    tape.scale(s, R::of(1.0 / tr.n_rays as f64))
}

/// Opacity-overlap penalty on the tape. With `differentiate_beta` false the
/// temperature coefficient is a plain value, so the sharpness feels this
/// term only through the opacities.
pub fn alpha_reg_nodes<R: Real>(
    tape: &mut Tape<R>,
    tr: &TapeRender,
    lambda_t: f64,
    differentiate_beta: bool,
) -> Var {
    if tr.n_samples == 0 {
        return tape.constant(Buf::zeros(1, 1));
    }
    let a12 = tape.mul(tr.alpha1, tr.alpha2);
    overlap_exponential(tape, tr, a12, lambda_t, differentiate_beta)
}

/// Distance-hinge overlap penalty on the tape (ablation variant).
pub fn sdf_reg_nodes<R: Real>(
    tape: &mut Tape<R>,
    tr: &TapeRender,
    lambda_t: f64,
    differentiate_beta: bool,
) -> Var {
    if tr.n_samples == 0 {
        return tape.constant(Buf::zeros(1, 1));
    }
    let n1 = tape.scale(tr.phi1, R::of(-1.0));
    let n2 = tape.scale(tr.phi2, R::of(-1.0));
    let r1 = tape.relu(n1);
    let r2 = tape.relu(n2);
    let h = tape.mul(r1, r2);
    overlap_exponential(tape, tr, h, lambda_t, differentiate_beta)
}

/// mean(exp(beta/lambda_t * prod) - 1) over the sample rows.
fn overlap_exponential<R: Real>(
    tape: &mut Tape<R>,
    tr: &TapeRender,
    prod: Var,
    lambda_t: f64,
    differentiate_beta: bool,
) -> Var {
    let z = if differentiate_beta {
        let bt = tape.scale(tr.beta, R::of(1.0 / lambda_t));
        tape.mul_broadcast(prod, bt)
    } else {
        let beta = tape.scalar_value(tr.beta).promote();
        tape.scale(prod, R::of(beta / lambda_t))
    };
    let e = tape.exp(z);
    let em1 = tape.add_scalar(e, R::of(-1.0));
    let s = tape.sum_all(em1);
    tape.scale(s, R::of(1.0 / tr.n_samples as f64))
}

/// Eikonal loss on the tape: both heads and their minimum are evaluated with
/// spatial gradients at `xs`, and each gradient norm is pulled toward one.
pub fn eikonal_loss_nodes<R: Real>(
    tape: &mut Tape<R>,
    params: &ParamSet<R>,
    fields: &SceneFields,
    xs: &[Vec3],
) -> Var {
    if xs.is_empty() {
        return tape.constant(Buf::zeros(1, 1));
    }
    let n = xs.len();
    let geom = fields.eval_geometry(tape, params, xs);
    let mut acc: Option<Var> = None;
    for grad in [geom.grad1, geom.grad2, geom.grads] {
        let norms = gradient_norms(tape, grad, n);
        let d = tape.add_scalar(norms, R::of(-1.0));
        let sq = tape.square(d);
        acc = Some(match acc {
            Some(a) => tape.add(a, sq),
            None => sq,
        });
    }
    let s = tape.sum_all(acc.expect("three gradient terms"));
    tape.scale(s, R::of(1.0 / n as f64))
}

// ---------------------------------------------------------------------------
// Assembly
// ---------------------------------------------------------------------------

/// One step's immutable loss inputs: marched rays, their supervision, and
/// the eikonal point set.
pub struct LossInputs<'a> {
    pub batches: &'a [RaySampleBatch],
    pub image_ids: Option<&'a [u32]>,
    pub targets: &'a [RayTargets],
    pub eik_points: &'a [Vec3],
}

/// The term nodes of one assembled objective. A single backward pass from
/// `total` trains every parameter.
pub struct LossNodes {
    pub colour: Var,
    pub alpha_reg: Var,
    pub eikonal: Var,
    pub total: Var,
}

impl LossNodes {
    pub fn report<R: Real>(&self, tape: &Tape<R>, w: &LossWeights) -> LossReport {
        LossReport::new(
            tape.scalar_value(self.colour).promote(),
            tape.scalar_value(self.alpha_reg).promote(),
            tape.scalar_value(self.eikonal).promote(),
            w,
        )
    }
}

/// Renders the marched batches on the tape and assembles all loss terms.
pub fn build_losses<R: Real>(
    tape: &mut Tape<R>,
    params: &ParamSet<R>,
    fields: &SceneFields,
    inputs: &LossInputs,
    w: &LossWeights,
    penalty: OverlapPenalty,
) -> Result<LossNodes> {
    w.validate()?;
    let tr = render_rays_on_tape(tape, params, fields, inputs.batches, inputs.image_ids)?;
    let colour = colour_loss_nodes(tape, &tr, inputs.targets, w.delta);
    let alpha_reg = match penalty {
        OverlapPenalty::Alpha { differentiate_beta } => {
            alpha_reg_nodes(tape, &tr, w.lambda_t, differentiate_beta)
        }
        OverlapPenalty::SdfHinge => sdf_reg_nodes(tape, &tr, w.lambda_t, false),
        OverlapPenalty::Off => tape.constant(Buf::zeros(1, 1)),
    };
    let eikonal = eikonal_loss_nodes(tape, params, fields, inputs.eik_points);
    let sa = tape.scale(alpha_reg, R::of(w.lambda_alpha));
    let se = tape.scale(eikonal, R::of(w.lambda_eik));
    let t0 = tape.add(colour, sa);
    let total = tape.add(t0, se);
    Ok(LossNodes { colour, alpha_reg, eikonal, total })
}

/// Euclidean norm of the full parameter gradient.
pub fn global_grad_norm<R: Real>(params: &ParamSet<R>) -> f64 {
    params.ids().map(|id| params.grad_norm_sq(id)).sum::<f64>().sqrt()
}

/// Gradient norm of each term alone, ordered colour, overlap, eikonal. Runs
/// one backward pass per term on a fresh tape; meant for occasional
/// diagnostics, not the hot loop. Leaves the gradients zeroed.
pub fn per_term_grad_norms<R: Real>(
    params: &mut ParamSet<R>,
    fields: &SceneFields,
    inputs: &LossInputs,
    w: &LossWeights,
    penalty: OverlapPenalty,
) -> Result<[f64; 3]> {
    let mut out = [0.0; 3];
    for (k, slot) in out.iter_mut().enumerate() {
        params.zero_grads();
        let mut tape = Tape::new();
        let node = match k {
            0 | 1 => {
                let tr =
                    render_rays_on_tape(&mut tape, params, fields, inputs.batches, inputs.image_ids)?;
                if k == 0 {
                    colour_loss_nodes(&mut tape, &tr, inputs.targets, w.delta)
                } else {
                    match penalty {
                        OverlapPenalty::Alpha { differentiate_beta } => {
                            alpha_reg_nodes(&mut tape, &tr, w.lambda_t, differentiate_beta)
                        }
                        OverlapPenalty::SdfHinge => sdf_reg_nodes(&mut tape, &tr, w.lambda_t, false),
                        OverlapPenalty::Off => tape.constant(Buf::zeros(1, 1)),
                    }
                }
            }
            _ => eikonal_loss_nodes(&mut tape, params, fields, inputs.eik_points),
        };
        tape.backward(node, params)?;
        *slot = global_grad_norm(params);
    }
    params.zero_grads();
    Ok(out)
}

// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::fd::{pick_active, pick_uniform, probe_entries, FdProbe};
    use crate::autodiff::params::ParamId;
    use crate::fields::{FieldSample, INIT_CENTRES, INIT_SPHERE_RADIUS};
    use crate::geometry::{unit_cube_range, Ray};
    use crate::occupancy::OccupancyGrid;
    use crate::render::{march_rays, render, shade_batches, RaySample};
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fresh_fields(beta: f64) -> (ParamSet<f64>, SceneFields) {
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let fields = SceneFields::new(&mut params, 2, &mut rng);
        params.block_mut(fields.log_beta).values[0] = beta.ln();
        (params, fields)
    }

    fn bare_sample(alpha1: f64, alpha2: f64, phi1: f64, phi2: f64) -> RaySample {
        RaySample {
            depth: 0.5,
            field: FieldSample {
                x: vec3(0.5, 0.5, 0.5),
                phi1,
                phi2,
                phi_s: phi1.min(phi2),
                normal: vec3(0.0, 0.0, 1.0),
                colour: [0.0; 3],
                g: [0.0; 15],
            },
            alpha1,
            alpha2,
            alpha_s: alpha1 + alpha2 * (1.0 - alpha1),
            t_s: 1.0,
        }
    }

    fn bare_batch(samples: Vec<RaySample>) -> RaySampleBatch {
        let ray = Ray {
            origin: vec3(0.5, 0.5, -1.0),
            direction: vec3(0.0, 0.0, 1.0),
            near: 0.0,
            far: 1.0,
        };
        RaySampleBatch { ray, samples, tail: vec3(0.5, 0.5, 1.0), final_ts: 1.0 }
    }

    fn flat_output(c: f64) -> RenderOutput {
        RenderOutput {
            c_s: [c; 3],
            c_1: [c; 3],
            c_2: [c; 3],
            o_s: 1.0,
            o_1: 1.0,
            o_2: 1.0,
            depth: 0.5,
        }
    }

    fn flat_targets(c: f64) -> RayTargets {
        RayTargets { scene: [c; 3], obj1: [c; 3], obj2: [c; 3] }
    }

    /// Rays that enter the region where the two seed spheres interpenetrate,
    /// so opacity and hinge products are live from the first step.
    fn lens_rays() -> Vec<Ray> {
        [vec3(0.5, 0.0, 0.5), vec3(0.45, 0.0, 0.52), vec3(0.55, 0.0, 0.47)]
            .into_iter()
            .map(|o| {
                let d = vec3(0.0, 1.0, 0.0);
                let (near, far) = unit_cube_range(o, d).expect("ray crosses the cube");
                Ray { origin: o, direction: d, near, far }
            })
            .collect()
    }

    fn marched_setup(beta: f64) -> (ParamSet<f64>, SceneFields, Vec<RaySampleBatch>) {
        let (params, fields) = fresh_fields(beta);
        let occ = OccupancyGrid::all_occupied(16);
        let rays = lens_rays();
        let seeds: Vec<u64> = (0..rays.len() as u64).map(|i| 0x9e37 + i).collect();
        let batches = march_rays(&fields, &params, &occ, &rays, &seeds);
        assert!(batches.iter().any(|b| !b.samples.is_empty()));
        (params, fields, batches)
    }

    #[test]
    fn weights_default_and_validate() {
        let w = LossWeights::default();
        assert_eq!(w.lambda_alpha, 0.1);
        assert_eq!(w.lambda_eik, 0.01);
        assert_eq!(w.lambda_t, 100.0);
        assert_eq!(w.delta, 1.0);
        assert!(w.validate().is_ok());
        assert!(LossWeights { lambda_alpha: 0.0, ..w }.validate().is_err());
        assert!(LossWeights { lambda_eik: -1.0, ..w }.validate().is_err());
        assert!(LossWeights { lambda_t: f64::NAN, ..w }.validate().is_err());
    }

    #[test]
    fn colour_loss_hits_both_smooth_l1_branches() {
        // perfect prediction
        let outs = vec![flat_output(0.3)];
        let tgts = vec![flat_targets(0.3)];
        assert_eq!(colour_loss(&outs, &tgts, 1.0), 0.0);

        // error 0.5 in a single channel of a single pair: quadratic branch
        let mut outs = vec![flat_output(0.2)];
        let tgts = vec![flat_targets(0.2)];
        outs[0].c_1[0] += 0.5;
        assert_abs_diff_eq!(colour_loss(&outs, &tgts, 1.0), 0.125, epsilon = 1e-12);

        // error 2.0: linear branch
        let mut outs = vec![flat_output(0.0)];
        outs[0].c_s[1] = 2.0;
        let tgts = vec![flat_targets(0.0)];
        assert_abs_diff_eq!(colour_loss(&outs, &tgts, 1.0), 1.5, epsilon = 1e-12);

        // continuous at the transition point
        let lo = smooth_l1(1.0 - 1e-9, 1.0);
        let hi = smooth_l1(1.0 + 1e-9, 1.0);
        assert_abs_diff_eq!(lo, 0.5, epsilon = 1e-8);
        assert_abs_diff_eq!(hi, 0.5, epsilon = 1e-8);

        // averaged over rays: a second perfect ray halves the batch loss
        let outs = vec![flat_output(0.25), {
            let mut o = flat_output(0.25);
            o.c_2[2] += 0.5;
            o
        }];
        let tgts = vec![flat_targets(0.25); 2];
        assert_abs_diff_eq!(colour_loss(&outs, &tgts, 1.0), 0.0625, epsilon = 1e-12);
    }

    #[test]
    fn alpha_reg_oracle_disjointness_and_sharpness_growth() {
        // scalar oracle: exp(100/100 * 0.25) - 1
        let b = vec![bare_batch(vec![bare_sample(0.5, 0.5, -0.1, -0.1)])];
        assert_abs_diff_eq!(alpha_reg(&b, 100.0, 100.0), 0.2840254166877414, epsilon = 1e-12);

        // zero exactly when the opacity product vanishes at every sample
        let disjoint = vec![bare_batch(vec![
            bare_sample(0.9, 0.0, -0.1, 0.3),
            bare_sample(0.0, 0.7, 0.3, -0.1),
            bare_sample(0.0, 0.0, 0.3, 0.3),
        ])];
        assert_eq!(alpha_reg(&disjoint, 100.0, 100.0), 0.0);

        // any coinciding opacity makes it positive
        let touching = vec![bare_batch(vec![
            bare_sample(0.9, 0.0, -0.1, 0.3),
            bare_sample(1e-3, 1e-3, 0.01, 0.01),
        ])];
        assert!(alpha_reg(&touching, 100.0, 100.0) > 0.0);

        // sharper beta means a strictly harsher penalty
        let lo = alpha_reg(&b, 100.0, 100.0);
        let hi = alpha_reg(&b, 200.0, 100.0);
        assert!(hi > lo);

        // mean over samples: one live sample and one dead sample average
        let half = vec![bare_batch(vec![
            bare_sample(0.5, 0.5, -0.1, -0.1),
            bare_sample(0.0, 0.7, 0.3, -0.1),
        ])];
        assert_abs_diff_eq!(alpha_reg(&half, 100.0, 100.0), 0.5 * 0.2840254166877414, epsilon = 1e-12);

        // empty batches report zero
        assert_eq!(alpha_reg(&[bare_batch(vec![])], 100.0, 100.0), 0.0);
    }

    #[test]
    fn sdf_hinge_oracle_and_monotone_penetration() {
        // scalar oracle: exp(100/100 * 0.1 * 0.1) - 1
        let b = vec![bare_batch(vec![bare_sample(0.0, 0.0, -0.1, -0.1)])];
        assert_abs_diff_eq!(
            sdf_reg_ablation(&b, 100.0, 100.0),
            0.010050167084168058,
            epsilon = 1e-12
        );

        // one side positive kills the hinge
        let clear = vec![bare_batch(vec![
            bare_sample(0.0, 0.0, 0.1, -0.5),
            bare_sample(0.0, 0.0, -0.5, 0.1),
            bare_sample(0.0, 0.0, 0.2, 0.2),
        ])];
        assert_eq!(sdf_reg_ablation(&clear, 100.0, 100.0), 0.0);

        // deeper mutual penetration costs strictly more
        let shallow = vec![bare_batch(vec![bare_sample(0.0, 0.0, -0.1, -0.1)])];
        let deep = vec![bare_batch(vec![bare_sample(0.0, 0.0, -0.2, -0.2)])];
        assert!(
            sdf_reg_ablation(&deep, 100.0, 100.0) > sdf_reg_ablation(&shallow, 100.0, 100.0)
        );
    }

    #[test]
    fn eikonal_scores_plane_like_gradients() {
        let unit = vec![vec3(0.0, 0.0, 1.0); 4];
        let tilted: Vec<Vec3> =
            (0..4).map(|i| vec3(0.6, 0.8 * (i as f64 / 3.0).cos(), 0.8 * (i as f64 / 3.0).sin())).collect();
        for t in &tilted {
            assert_abs_diff_eq!(t.norm(), 1.0, epsilon = 1e-12);
        }
        // unit gradients everywhere: zero
        assert_abs_diff_eq!(eikonal_from_gradients(&unit, &tilted, &unit), 0.0, epsilon = 1e-12);

        // doubling one field's slope costs (2-1)^2 = 1 per point for that head
        let doubled: Vec<Vec3> = unit.iter().map(|g| *g * 2.0).collect();
        assert_abs_diff_eq!(eikonal_from_gradients(&doubled, &tilted, &unit), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(
            eikonal_from_gradients(&doubled, &doubled, &doubled),
            3.0,
            epsilon = 1e-12
        );

        // the seed geometry is nearly eikonal away from its centres
        let (params, fields) = fresh_fields(30.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xs = sample_eikonal_points(&fields, &params, 64, &mut rng);
        let e = eikonal_loss(&fields, &params, &xs);
        assert!(e < 0.25, "seed fields should start near unit slope, got {e}");
    }

    #[test]
    fn eikonal_point_sampler_fills_the_shell_half() {
        let (params, fields) = fresh_fields(30.0);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let xs = sample_eikonal_points(&fields, &params, 64, &mut rng);
        assert_eq!(xs.len(), 64);
        assert!(xs.iter().all(|p| {
            (0.0..1.0).contains(&p.x) && (0.0..1.0).contains(&p.y) && (0.0..1.0).contains(&p.z)
        }));

        let (p1, p2) = fields.eval_sdf_values(&params, &xs);
        let near = xs
            .iter()
            .enumerate()
            .filter(|(i, _)| p1[*i].min(p2[*i]).abs() < NEAR_SURFACE_BAND)
            .count();
        assert!(near >= 32, "at least the dedicated half lies in the band, got {near}");

        // deterministic under the seed
        let mut rng2 = ChaCha8Rng::seed_from_u64(7);
        let again = sample_eikonal_points(&fields, &params, 64, &mut rng2);
        assert_eq!(xs, again);
    }

    #[test]
    fn report_combines_terms_exactly() {
        let w = LossWeights::default();
        let r = LossReport::new(0.734, 0.291, 0.053, &w);
        assert!(
            (r.total - (r.colour + w.lambda_alpha * r.alpha_reg + w.lambda_eik * r.eikonal)).abs()
                < 1e-9
        );
        assert!(r.is_finite());
        assert!(!LossReport::new(f64::NAN, 0.0, 0.0, &w).is_finite());
    }

    #[test]
    fn tape_terms_match_the_value_path() {
        let (params, fields, mut batches) = marched_setup(100.0);
        let ids = vec![0u32, 1, 0];
        shade_batches(&fields, &params, &mut batches, Some(&ids)).unwrap();
        let outs: Vec<RenderOutput> = batches.iter().map(render).collect();
        let targets: Vec<RayTargets> = (0..outs.len())
            .map(|i| {
                let v = 0.2 + 0.2 * i as f64;
                RayTargets { scene: [v, 0.1, 0.7], obj1: [0.6, v, 0.2], obj2: [0.3, 0.9, v] }
            })
            .collect();

        let mut tape = Tape::new();
        let tr = render_rays_on_tape(&mut tape, &params, &fields, &batches, Some(&ids)).unwrap();
        let c_node = colour_loss_nodes(&mut tape, &tr, &targets, 1.0);
        let a_node = alpha_reg_nodes(&mut tape, &tr, 100.0, false);
        let s_node = sdf_reg_nodes(&mut tape, &tr, 100.0, false);

        let beta = fields.beta(&params);
        assert_abs_diff_eq!(
            tape.scalar_value(c_node),
            colour_loss(&outs, &targets, 1.0),
            epsilon = 1e-9
        );
        assert_abs_diff_eq!(
            tape.scalar_value(a_node),
            alpha_reg(&batches, beta, 100.0),
            epsilon = 1e-9
        );
        assert_abs_diff_eq!(
            tape.scalar_value(s_node),
            sdf_reg_ablation(&batches, beta, 100.0),
            epsilon = 1e-9
        );
    }

    #[test]
    fn assembled_total_decomposes_and_backpropagates() {
        let (mut params, fields, batches) = marched_setup(100.0);
        let targets = vec![flat_targets(0.4); batches.len()];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let eik = sample_eikonal_points(&fields, &params, 16, &mut rng);
        let w = LossWeights::default();

        let mut tape = Tape::new();
        let inputs =
            LossInputs { batches: &batches, image_ids: None, targets: &targets, eik_points: &eik };
        let nodes = build_losses(&mut tape, &params, &fields, &inputs, &w, OverlapPenalty::default())
            .unwrap();
        let report = nodes.report(&tape, &w);
        assert!(report.is_finite());
        assert!(report.colour > 0.0 && report.eikonal > 0.0);
        assert!(report.alpha_reg > 0.0, "lens rays see coinciding opacities at the seed");
        assert!(
            (report.total
                - (report.colour + w.lambda_alpha * report.alpha_reg + w.lambda_eik * report.eikonal))
                .abs()
                < 1e-9
        );
        // the tape's own total agrees with the recombination
        assert_abs_diff_eq!(tape.scalar_value(nodes.total), report.total, epsilon = 1e-9);

        params.zero_grads();
        tape.backward(nodes.total, &mut params).unwrap();
        let g = global_grad_norm(&params);
        assert!(g.is_finite() && g > 0.0);

        // disabled overlap slot reports zero and shrinks the total
        let mut tape2 = Tape::new();
        let nodes2 =
            build_losses(&mut tape2, &params, &fields, &inputs, &w, OverlapPenalty::Off).unwrap();
        let report2 = nodes2.report(&tape2, &w);
        assert_eq!(report2.alpha_reg, 0.0);
        assert!(report2.total < report.total);

        let norms = per_term_grad_norms(&mut params, &fields, &inputs, &w, OverlapPenalty::default())
            .unwrap();
        assert!(norms.iter().all(|n| n.is_finite() && *n > 0.0), "{norms:?}");
        // gradients are left zeroed for the caller
        assert_eq!(global_grad_norm(&params), 0.0);
    }

    fn assert_probes(probes: &[FdProbe], tol: f64, label: &str) {
        assert!(probes.len() >= 50, "{label}: need 50 probes, got {}", probes.len());
        for p in probes {
            assert!(p.rel_err < tol, "{label}: {p:?}");
        }
    }

    /// 50+ probe entries spread over every trainable block, restricted to
    /// entries the current backward pass actually touched.
    fn mixed_picks(
        params: &ParamSet<f64>,
        fields: &SceneFields,
        include_beta: bool,
        rng: &mut ChaCha8Rng,
    ) -> Vec<(ParamId, usize)> {
        let mut picks = Vec::new();
        picks.extend(pick_active(params, fields.grid.table, 12, 1e-12, rng));
        for mlp in [&fields.trunk, &fields.head1, &fields.head2, &fields.colour] {
            for (i, id) in mlp.w.iter().enumerate() {
                picks.extend(pick_active(params, *id, 3, 1e-12, rng));
                picks.extend(pick_active(params, mlp.b[i], 1, 1e-12, rng));
            }
        }
        picks.extend(pick_active(params, fields.latents, 4, 1e-12, rng));
        if include_beta {
            picks.push((fields.log_beta, 0));
        }
        picks
    }

    #[test]
    fn finite_differences_confirm_the_colour_gradient() {
        let (mut params, fields, batches) = marched_setup(100.0);
        let ids = vec![0u32, 1, 0];
        let targets: Vec<RayTargets> = (0..batches.len())
            .map(|i| flat_targets(0.15 + 0.3 * i as f64 / batches.len() as f64))
            .collect();

        let loss = |p: &ParamSet<f64>| -> f64 {
            let mut tape = Tape::new();
            let tr = render_rays_on_tape(&mut tape, p, &fields, &batches, Some(&ids)).unwrap();
            let node = colour_loss_nodes(&mut tape, &tr, &targets, 1.0);
            tape.scalar_value(node)
        };

        params.zero_grads();
        {
            let mut tape = Tape::new();
            let tr = render_rays_on_tape(&mut tape, &params, &fields, &batches, Some(&ids)).unwrap();
            let node = colour_loss_nodes(&mut tape, &tr, &targets, 1.0);
            tape.backward(node, &mut params).unwrap();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let picks = mixed_picks(&params, &fields, true, &mut rng);
        let probes = probe_entries(&mut params, &picks, 1e-5, loss);
        assert_probes(&probes, 1e-3, "colour");
    }

    #[test]
    fn finite_differences_confirm_the_overlap_gradients() {
        let (mut params, fields, batches) = marched_setup(100.0);

        // default form: the temperature coefficient is detached, so the
        // sharpness gradient arrives only through the opacities; the probe
        // set leaves log-beta out because finite differences see both paths
        let loss_a = |p: &ParamSet<f64>| -> f64 {
            let mut tape = Tape::new();
            let tr = render_rays_on_tape(&mut tape, p, &fields, &batches, None).unwrap();
            let node = alpha_reg_nodes(&mut tape, &tr, 100.0, false);
            tape.scalar_value(node)
        };
        params.zero_grads();
        {
            let mut tape = Tape::new();
            let tr = render_rays_on_tape(&mut tape, &params, &fields, &batches, None).unwrap();
            let node = alpha_reg_nodes(&mut tape, &tr, 100.0, false);
            tape.backward(node, &mut params).unwrap();
        }
        let beta_grad_detached = params.block(fields.log_beta).grad[0];
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let mut picks = Vec::new();
        picks.extend(pick_active(&params, fields.grid.table, 20, 1e-12, &mut rng));
        for mlp in [&fields.trunk, &fields.head1, &fields.head2] {
            for (i, id) in mlp.w.iter().enumerate() {
                picks.extend(pick_active(&params, *id, 4, 1e-12, &mut rng));
                picks.extend(pick_active(&params, mlp.b[i], 1, 1e-12, &mut rng));
            }
        }
        let probes = probe_entries(&mut params, &picks, 1e-5, loss_a);
        assert_probes(&probes, 1e-3, "alpha overlap");

        // switchable form: the coefficient path comes back, the sharpness
        // gradient changes, and finite differences confirm the full value
        let loss_b = |p: &ParamSet<f64>| -> f64 {
            let mut tape = Tape::new();
            let tr = render_rays_on_tape(&mut tape, p, &fields, &batches, None).unwrap();
            let node = alpha_reg_nodes(&mut tape, &tr, 100.0, true);
            tape.scalar_value(node)
        };
        params.zero_grads();
        {
            let mut tape = Tape::new();
            let tr = render_rays_on_tape(&mut tape, &params, &fields, &batches, None).unwrap();
            let node = alpha_reg_nodes(&mut tape, &tr, 100.0, true);
            tape.backward(node, &mut params).unwrap();
        }
        let beta_grad_full = params.block(fields.log_beta).grad[0];
        assert!(
            (beta_grad_full - beta_grad_detached).abs() > 1e-12,
            "coefficient path should change the sharpness gradient"
        );
        let beta_probe = probe_entries(&mut params, &[(fields.log_beta, 0)], 1e-5, loss_b);
        assert!(beta_probe[0].rel_err < 1e-3, "{:?}", beta_probe[0]);

        // hinge variant, probed where both fields are solidly negative
        let loss_h = |p: &ParamSet<f64>| -> f64 {
            let mut tape = Tape::new();
            let tr = render_rays_on_tape(&mut tape, p, &fields, &batches, None).unwrap();
            let node = sdf_reg_nodes(&mut tape, &tr, 100.0, false);
            tape.scalar_value(node)
        };
        params.zero_grads();
        {
            let mut tape = Tape::new();
            let tr = render_rays_on_tape(&mut tape, &params, &fields, &batches, None).unwrap();
            let node = sdf_reg_nodes(&mut tape, &tr, 100.0, false);
            tape.backward(node, &mut params).unwrap();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mut picks = Vec::new();
        picks.extend(pick_active(&params, fields.grid.table, 26, 1e-12, &mut rng));
        for mlp in [&fields.trunk, &fields.head1, &fields.head2] {
            for (i, id) in mlp.w.iter().enumerate() {
                picks.extend(pick_active(&params, *id, 7, 1e-12, &mut rng));
                picks.extend(pick_active(&params, mlp.b[i], 1, 1e-12, &mut rng));
            }
        }
        let probes = probe_entries(&mut params, &picks, 1e-5, loss_h);
        assert_probes(&probes, 1e-3, "sdf hinge");
    }

    #[test]
    fn finite_differences_confirm_the_eikonal_gradient() {
        let (mut params, fields) = fresh_fields(30.0);
        // fixed mixed point set: a surface shell ring plus interior points
        let mut xs = Vec::new();
        for i in 0..8 {
            let th = i as f64 / 8.0 * std::f64::consts::TAU;
            let c = INIT_CENTRES[i % 2];
            let r = INIT_SPHERE_RADIUS + 0.01 * (i as f64 - 4.0) / 4.0;
            xs.push(vec3(c.x + r * th.cos(), c.y + r * th.sin(), c.z + 0.02 * th.sin()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..8 {
            xs.push(cube_point(&mut rng));
        }

        let loss = |p: &ParamSet<f64>| -> f64 { eikonal_loss(&fields, p, &xs) };
        params.zero_grads();
        {
            let mut tape = Tape::new();
            let node = eikonal_loss_nodes(&mut tape, &params, &fields, &xs);
            tape.backward(node, &mut params).unwrap();
        }
        let mut picks = Vec::new();
        picks.extend(pick_active(&params, fields.grid.table, 20, 1e-10, &mut rng));
        for mlp in [&fields.trunk, &fields.head1, &fields.head2] {
            for (i, id) in mlp.w.iter().enumerate() {
                picks.extend(pick_active(&params, *id, 4, 1e-10, &mut rng));
                picks.extend(pick_uniform(&params, mlp.b[i], 1, &mut rng));
            }
        }
        let probes = probe_entries(&mut params, &picks, 1e-5, loss);
        assert_probes(&probes, 1e-3, "eikonal");
    }
}
