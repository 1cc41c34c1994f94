//! The scene model: one shared hash encoding feeding a feature trunk, two
//! signed-distance heads, and a colour head, plus a learnable sharpness
//! scalar and per-image appearance codes.
//!
//! Geometry evaluation comes in two flavours. The value path
//! ([`SceneFields::eval_sdf_values`]) is plain arithmetic for ray marching
//! and occupancy sweeps. The tape path ([`SceneFields::eval_geometry`])
//! additionally carries spatial jacobians as extra rows through the same
//! matmuls, so surface normals and eikonal norms are first-class tape values
//! and losses built on them differentiate exactly (softplus keeps every
//! activation derivative itself differentiable). Both paths share the same
//! kernels and produce bit-identical SDF values.

use std::sync::Arc;

use rand::Rng;

use crate::autodiff::linalg::{softplus, Buf, Real};
use crate::autodiff::mlp::{Activation, Mlp};
use crate::autodiff::params::{LrGroup, ParamId, ParamSet};
use crate::autodiff::tape::{Tape, Var};
use crate::error::{Error, Result};
use crate::geometry::{fibonacci_sphere, sh_encode, vec3, Vec3};
use crate::hashgrid::HashGrid;

pub const FEATURE_DIM: usize = 15;
pub const LATENT_DIM: usize = 8;
/// Position plus the hash encoding.
pub const ENCODING_DIM: usize = 3 + crate::hashgrid::LEVELS * crate::hashgrid::FEATURES;
pub const HEAD_IN_DIM: usize = ENCODING_DIM + FEATURE_DIM;
/// x + view SH + normal + scene sdf + trunk features + image latent.
pub const COLOUR_IN_DIM: usize = 3 + 16 + 3 + 1 + FEATURE_DIM + LATENT_DIM;
pub const BETA_INIT: f64 = 30.0;

/// Each head starts as the distance field of one of these spheres, so the
/// two objects separate from the first optimiser step.
pub const INIT_CENTRES: [Vec3; 2] = [vec3(0.4, 0.5, 0.5), vec3(0.6, 0.5, 0.5)];
pub const INIT_SPHERE_RADIUS: f64 = 0.25;

const GEOM_SCALE: f64 = 200.0;
const GEOM_BOUND: f64 = 10.0;
const HEAD_NOISE: f64 = 1e-3;

pub struct SceneFields {
    pub grid: HashGrid,
    pub trunk: Mlp,
    pub head1: Mlp,
    pub head2: Mlp,
    pub colour: Mlp,
    /// Sharpness is stored as its logarithm so it stays positive under any
    /// optimiser step.
    pub log_beta: ParamId,
    pub latents: ParamId,
    pub n_images: usize,
}

/// One fully evaluated point, values promoted to f64.
#[derive(Debug, Clone)]
pub struct FieldSample {
    pub x: Vec3,
    pub phi1: f64,
    pub phi2: f64,
    /// Exactly min(phi1, phi2).
    pub phi_s: f64,
    /// Raw (un-normalised) spatial gradient of phi_s.
    pub normal: Vec3,
    pub colour: [f64; 3],
    pub g: [f64; FEATURE_DIM],
}

/// Geometry of a sample batch on a tape. Gradient vars stack the three
/// derivative axes as row blocks: row `a * n + s` holds d/d(axis a) at
/// sample `s`.
pub struct GeomEval {
    pub n: usize,
    pub phi1: Var,
    pub phi2: Var,
    pub phis: Var,
    pub grad1: Var,
    pub grad2: Var,
    pub grads: Var,
    /// Trunk features for the value rows, [n, 15].
    pub g: Var,
}

impl SceneFields {
    pub fn new<R: Real>(params: &mut ParamSet<R>, n_images: usize, rng: &mut impl Rng) -> SceneFields {
        let grid = HashGrid::new(params, rng);
        let trunk = Mlp::new(
            params,
            "trunk",
            &[ENCODING_DIM, 64, 64, FEATURE_DIM],
            Activation::Softplus,
            Activation::None,
            rng,
        );
        let head1 = Mlp::new(
            params,
            "sdf1",
            &[HEAD_IN_DIM, 64, 64, 1],
            Activation::Softplus,
            Activation::None,
            rng,
        );
        geometric_head_init(params, &head1, INIT_CENTRES[0], rng);
        let head2 = Mlp::new(
            params,
            "sdf2",
            &[HEAD_IN_DIM, 64, 64, 1],
            Activation::Softplus,
            Activation::None,
            rng,
        );
        geometric_head_init(params, &head2, INIT_CENTRES[1], rng);
        let colour = Mlp::new(
            params,
            "colour",
            &[COLOUR_IN_DIM, 128, 128, 3],
            Activation::Softplus,
            Activation::Sigmoid,
            rng,
        );
        let log_beta = params.add("beta", vec![1], vec![R::of(BETA_INIT.ln())], LrGroup::Mlp, false);
        let latents = params.add(
            "latents",
            vec![n_images, LATENT_DIM],
            vec![R::zero(); n_images * LATENT_DIM],
            LrGroup::Mlp,
            false,
        );
        SceneFields { grid, trunk, head1, head2, colour, log_beta, latents, n_images }
    }

    pub fn beta<R: Real>(&self, params: &ParamSet<R>) -> R {
        params.values(self.log_beta)[0].exp()
    }

    /// Sharpness as a differentiable scalar node.
    pub fn beta_node<R: Real>(&self, tape: &mut Tape<R>, params: &ParamSet<R>) -> Var {
        let lb = tape.param(params, self.log_beta);
        tape.exp(lb)
    }

    /// Both head SDFs for a batch, value path (no tape).
    pub fn eval_sdf_values<R: Real>(&self, params: &ParamSet<R>, xs: &[Vec3]) -> (Vec<R>, Vec<R>) {
        let enc = self.grid.encode_values(params, xs);
        let e = hcat(&positions_buf::<R>(xs), &enc);
        let g = self.trunk.forward_values(params, &e).expect("trunk width");
        let h = hcat(&e, &g);
        let p1 = self.head1.forward_values(params, &h).expect("head width");
        let p2 = self.head2.forward_values(params, &h).expect("head width");
        (p1.data, p2.data)
    }

    /// Single-point SDFs. The scene value is the exact minimum; ties report
    /// the first head (the same routing the gradient uses).
    pub fn eval_sdfs<R: Real>(&self, params: &ParamSet<R>, x: Vec3) -> (R, R, R) {
        let (p1, p2) = self.eval_sdf_values(params, &[x]);
        let (phi1, phi2) = (p1[0], p2[0]);
        let phis = if phi1 <= phi2 { phi1 } else { phi2 };
        (phi1, phi2, phis)
    }

    /// Records SDFs and their spatial gradients for a batch on the tape.
    pub fn eval_geometry<R: Real>(
        &self,
        tape: &mut Tape<R>,
        params: &ParamSet<R>,
        xs: &[Vec3],
    ) -> GeomEval {
        let n = xs.len();
        assert!(n > 0, "empty geometry batch");
        let enc_full = self.grid.encode(tape, params, xs, true);
        let vidx: Arc<Vec<u32>> = Arc::new((0..n as u32).collect());
        let jidx: Arc<Vec<u32>> = Arc::new((n as u32..(4 * n) as u32).collect());
        let enc_v = tape.gather_rows(enc_full, vidx);
        let enc_j = tape.gather_rows(enc_full, jidx);

        let xv = tape.constant(positions_buf::<R>(xs));
        // d(x)/d(axis) rows: three identity blocks
        let mut ib = Buf::zeros(3 * n, 3);
        for a in 0..3 {
            for s in 0..n {
                ib.data[(a * n + s) * 3 + a] = R::one();
            }
        }
        let xj = tape.constant(ib);

        let e_v = tape.concat_cols(&[xv, enc_v]);
        let e_j = tape.concat_cols(&[xj, enc_j]);

        let rep: Arc<Vec<u32>> = Arc::new((0..3).flat_map(|_| 0..n as u32).collect());
        let (g_v, g_j) = forward_with_jac(tape, params, &self.trunk, e_v, e_j, &rep);
        let h_v = tape.concat_cols(&[e_v, g_v]);
        let h_j = tape.concat_cols(&[e_j, g_j]);
        let (phi1, grad1) = forward_with_jac(tape, params, &self.head1, h_v, h_j, &rep);
        let (phi2, grad2) = forward_with_jac(tape, params, &self.head2, h_v, h_j, &rep);
        let phis = tape.min2(phi1, phi2);

        // the scene gradient follows the same phi1 <= phi2 routing as min2
        let p1 = tape.value(phi1).data.clone();
        let p2 = tape.value(phi2).data.clone();
        let mut m1 = Buf::zeros(3 * n, 1);
        let mut m2 = Buf::zeros(3 * n, 1);
        for s in 0..n {
            let first = p1[s] <= p2[s];
            for a in 0..3 {
                if first {
                    m1.data[a * n + s] = R::one();
                } else {
                    m2.data[a * n + s] = R::one();
                }
            }
        }
        let (m1, m2) = (tape.constant(m1), tape.constant(m2));
        let s1 = tape.mul(grad1, m1);
        let s2 = tape.mul(grad2, m2);
        let grads = tape.add(s1, s2);

        GeomEval { n, phi1, phi2, phis, grad1, grad2, grads, g: g_v }
    }

    /// Colour for the batch behind `geom`. `views` are unit directions, one
    /// per sample; `image_ids` selects appearance codes (None renders novel
    /// views with the zero code).
    pub fn eval_colour_tape<R: Real>(
        &self,
        tape: &mut Tape<R>,
        params: &ParamSet<R>,
        xs: &[Vec3],
        views: &[Vec3],
        image_ids: Option<&[u32]>,
        geom: &GeomEval,
    ) -> Result<Var> {
        let n = geom.n;
        assert_eq!(xs.len(), n, "position count mismatch");
        assert_eq!(views.len(), n, "view count mismatch");

        let mut shb = Buf::zeros(n, 16);
        for (s, v) in views.iter().enumerate() {
            let sh = sh_encode(*v)?;
            for (c, val) in sh.iter().enumerate() {
                shb.data[s * 16 + c] = R::of(*val);
            }
        }
        let xc = tape.constant(positions_buf::<R>(xs));
        let shc = tape.constant(shb);

        let vecs = vectorize_gradient(tape, geom.grads, n);
        let sq = tape.square(vecs);
        let ss = tape.row_sum(sq);
        let len = tape.sqrt(ss);
        let len_eps = tape.add_scalar(len, R::of(1e-9));
        let len3 = tape.concat_cols(&[len_eps, len_eps, len_eps]);
        let unit = tape.div(vecs, len3);

        let lat = match image_ids {
            Some(ids) => {
                if ids.len() != n {
                    return Err(Error::usage("image id count mismatch"));
                }
                if let Some(&bad) = ids.iter().find(|&&i| i as usize >= self.n_images) {
                    return Err(Error::usage(format!(
                        "image id {bad} out of range (model trained on {} images)",
                        self.n_images
                    )));
                }
                tape.gather_param_rows(params, self.latents, Arc::new(ids.to_vec()))
            }
            None => tape.constant(Buf::zeros(n, LATENT_DIM)),
        };

        let input = tape.concat_cols(&[xc, shc, unit, geom.phis, geom.g, lat]);
        self.colour.forward(tape, params, input)
    }

    /// Full evaluation of one point (throwaway tape, values only).
    pub fn sample<R: Real>(
        &self,
        params: &ParamSet<R>,
        x: Vec3,
        view: Vec3,
        image: Option<u32>,
    ) -> Result<FieldSample> {
        let mut tape: Tape<R> = Tape::new();
        let geom = self.eval_geometry(&mut tape, params, &[x]);
        let ids = image.map(|i| vec![i]);
        let colour = self.eval_colour_tape(&mut tape, params, &[x], &[view], ids.as_deref(), &geom)?;
        let gv = tape.value(geom.grads);
        let cv = tape.value(colour);
        let gf = tape.value(geom.g);
        let mut g = [0.0; FEATURE_DIM];
        for (i, slot) in g.iter_mut().enumerate() {
            *slot = gf.data[i].promote();
        }
        Ok(FieldSample {
            x,
            phi1: tape.scalar_value(geom.phi1).promote(),
            phi2: tape.scalar_value(geom.phi2).promote(),
            phi_s: tape.scalar_value(geom.phis).promote(),
            normal: vec3(gv.data[0].promote(), gv.data[1].promote(), gv.data[2].promote()),
            colour: [cv.data[0].promote(), cv.data[1].promote(), cv.data[2].promote()],
            g,
        })
    }

    /// Colour of one point, convenience over [`SceneFields::sample`].
    pub fn eval_colour<R: Real>(
        &self,
        params: &ParamSet<R>,
        x: Vec3,
        view: Vec3,
        image: Option<u32>,
    ) -> Result<[f64; 3]> {
        Ok(self.sample::<R>(params, x, view, image)?.colour)
    }
}

/// Opacity of one marching step from the signed distances at its endpoints:
/// the relative drop of the logistic cdf sigma(beta * phi) across the step,
/// clamped to [0, 1 - 1e-6]. Steps that leave the surface (phi rising) get
/// exactly zero.
pub fn interval_alpha<R: Real>(phi_i: R, phi_next: R, beta: R) -> R {
    // 1 - sigma(b*phi_next)/sigma(b*phi_i), rewritten via log-sigmoid for
    // stability at large |beta * phi|
    let a = softplus(-(beta * phi_i));
    let b = softplus(-(beta * phi_next));
    let alpha = R::one() - (a - b).exp();
    alpha.max(R::zero()).min(R::of(1.0 - 1e-6))
}

/// Tape version of [`interval_alpha`] over [n, 1] columns, differentiable in
/// both distances and the sharpness node. Bit-identical to the scalar form.
pub fn interval_alpha_nodes<R: Real>(
    tape: &mut Tape<R>,
    phi_i: Var,
    phi_next: Var,
    beta: Var,
) -> Var {
    let bi = tape.mul_broadcast(phi_i, beta);
    let bn = tape.mul_broadcast(phi_next, beta);
    let nbi = tape.scale(bi, R::of(-1.0));
    let nbn = tape.scale(bn, R::of(-1.0));
    let a = tape.softplus(nbi);
    let b = tape.softplus(nbn);
    let d = tape.sub(a, b);
    let e = tape.exp(d);
    let neg = tape.scale(e, R::of(-1.0));
    let raw = tape.add_scalar(neg, R::one());
    let pos = tape.relu(raw);
    tape.clamp_max(pos, R::of(1.0 - 1e-6))
}

/// Reorders an axis-stacked gradient ([3n, 1], rows a*n+s) into per-sample
/// vectors [n, 3].
pub fn vectorize_gradient<R: Real>(tape: &mut Tape<R>, grad: Var, n: usize) -> Var {
    let mut idx = Vec::with_capacity(3 * n);
    for s in 0..n as u32 {
        idx.extend_from_slice(&[s, n as u32 + s, 2 * n as u32 + s]);
    }
    let interleaved = tape.gather_rows(grad, Arc::new(idx));
    tape.reshape(interleaved, n, 3)
}

/// Euclidean norms of an axis-stacked gradient, [n, 1].
pub fn gradient_norms<R: Real>(tape: &mut Tape<R>, grad: Var, n: usize) -> Var {
    let vecs = vectorize_gradient(tape, grad, n);
    let sq = tape.square(vecs);
    let ss = tape.row_sum(sq);
    tape.sqrt(ss)
}

/// Runs an MLP on value rows and their spatial-jacobian rows together.
/// Jacobian rows see the same weights without bias, and each hidden
/// activation contributes its derivative (taken at the value rows) as a
/// factor, which is the forward chain rule. Requires softplus hidden and
/// linear output.
fn forward_with_jac<R: Real>(
    tape: &mut Tape<R>,
    params: &ParamSet<R>,
    mlp: &Mlp,
    x_v: Var,
    x_j: Var,
    rep: &Arc<Vec<u32>>,
) -> (Var, Var) {
    assert!(matches!(mlp.hidden, Activation::Softplus), "jacobian path needs softplus hidden");
    assert!(matches!(mlp.output, Activation::None), "jacobian path needs a linear output");
    let mut h_v = x_v;
    let mut h_j = x_j;
    for i in 0..mlp.layers() {
        let z_v = tape.linear(params, h_v, mlp.w[i], Some(mlp.b[i]));
        let z_j = tape.linear(params, h_j, mlp.w[i], None);
        if i + 1 == mlp.layers() {
            h_v = z_v;
            h_j = z_j;
        } else {
            let s = tape.sigmoid(z_v);
            h_v = tape.softplus(z_v);
            let srep = tape.gather_rows(s, rep.clone());
            h_j = tape.mul(z_j, srep);
        }
    }
    (h_v, h_j)
}

/// Overwrites a freshly registered head so it starts as the signed distance
/// of a sphere. Layer 1 measures scale * u_i . (x - c) along 64 probe
/// directions; layer 2 averages the positive parts, which approximates
/// scale * |x - c| up to a calibration constant, and shifts by a bound large
/// enough that its softplus is effectively linear; layer 3 removes the
/// bound. Non-positional input columns get small noise so the symmetry
/// between neurons is broken without moving the start.
fn geometric_head_init<R: Real>(
    params: &mut ParamSet<R>,
    head: &Mlp,
    centre: Vec3,
    rng: &mut impl Rng,
) {
    assert_eq!(head.dims, vec![HEAD_IN_DIM, 64, 64, 1], "init is tied to the head shape");
    let dirs = fibonacci_sphere(64);
    let probe = fibonacci_sphere(256);
    let kappa = probe
        .iter()
        .map(|d| dirs.iter().map(|u| u.dot(*d).max(0.0)).sum::<f64>())
        .sum::<f64>()
        / probe.len() as f64;

    let in_dim = head.in_dim();
    {
        let blk = params.block_mut(head.w[0]);
        for (i, u) in dirs.iter().enumerate() {
            let row = &mut blk.values[i * in_dim..(i + 1) * in_dim];
            for v in row.iter_mut() {
                *v = R::of(rng.gen_range(-HEAD_NOISE..HEAD_NOISE));
            }
            row[0] = R::of(GEOM_SCALE * u.x);
            row[1] = R::of(GEOM_SCALE * u.y);
            row[2] = R::of(GEOM_SCALE * u.z);
        }
    }
    for (i, u) in dirs.iter().enumerate() {
        params.block_mut(head.b[0]).values[i] = R::of(-GEOM_SCALE * u.dot(centre));
    }
    let w1 = R::of(1.0 / (kappa * GEOM_SCALE));
    for v in params.block_mut(head.w[1]).values.iter_mut() {
        *v = w1;
    }
    let b1 = R::of(GEOM_BOUND - INIT_SPHERE_RADIUS);
    for v in params.block_mut(head.b[1]).values.iter_mut() {
        *v = b1;
    }
    let w2 = R::of(1.0 / 64.0);
    for v in params.block_mut(head.w[2]).values.iter_mut() {
        *v = w2;
    }
    params.block_mut(head.b[2]).values[0] = R::of(-GEOM_BOUND);
}

fn positions_buf<R: Real>(xs: &[Vec3]) -> Buf<R> {
    let mut b = Buf::zeros(xs.len(), 3);
    for (s, p) in xs.iter().enumerate() {
        b.data[s * 3] = R::of(p.x);
        b.data[s * 3 + 1] = R::of(p.y);
        b.data[s * 3 + 2] = R::of(p.z);
    }
    b
}

fn hcat<R: Real>(a: &Buf<R>, b: &Buf<R>) -> Buf<R> {
    assert_eq!(a.rows, b.rows, "hcat row mismatch");
    let cols = a.cols + b.cols;
    let mut out = Buf::zeros(a.rows, cols);
    for r in 0..a.rows {
        out.data[r * cols..r * cols + a.cols].copy_from_slice(a.row(r));
        out.data[r * cols + a.cols..(r + 1) * cols].copy_from_slice(b.row(r));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::fd::{pick_active, probe_entries, rel_err};
    use crate::hashgrid::{level_res, LEVELS};
    use proptest::{prop_assert, proptest};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fresh<R: Real>(n_images: usize, seed: u64) -> (ParamSet<R>, SceneFields) {
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fields = SceneFields::new(&mut params, n_images, &mut rng);
        (params, fields)
    }

    fn sphere_sdf(x: Vec3, c: Vec3) -> f64 {
        (x - c).norm() - INIT_SPHERE_RADIUS
    }

    #[test]
    fn initial_sdfs_match_the_seed_spheres() {
        let (params, fields) = fresh::<f64>(1, 42);
        let centre = vec3(0.5, 0.5, 0.5);
        let mut dirs = vec![
            vec3(1.0, 0.0, 0.0),
            vec3(0.0, 1.0, 0.0),
            vec3(0.0, 0.0, 1.0),
            vec3(1.0, 1.0, 0.0).normalized(),
            vec3(1.0, 0.0, 1.0).normalized(),
            vec3(0.0, 1.0, 1.0).normalized(),
            vec3(1.0, 1.0, 1.0).normalized(),
            vec3(-1.0, 1.0, -1.0).normalized(),
        ];
        let back: Vec<Vec3> = dirs.iter().map(|d| *d * -1.0).collect();
        dirs.extend(back);
        let mut checked = 0;
        for d in &dirs {
            for t in [0.05, 0.1, 0.15, 0.2, 0.3, 0.4, 0.45] {
                let x = centre + *d * t;
                let t1 = sphere_sdf(x, INIT_CENTRES[0]);
                let t2 = sphere_sdf(x, INIT_CENTRES[1]);
                let ts = t1.min(t2);
                let (p1, p2, ps) = fields.eval_sdfs(&params, x);
                for (est, truth) in [(p1, t1), (p2, t2), (ps, ts)] {
                    if truth.abs() < 0.05 {
                        continue;
                    }
                    checked += 1;
                    assert!(
                        (est - truth).abs() <= 0.10 * truth.abs(),
                        "x {x:?}: estimate {est:.4} vs sphere {truth:.4}"
                    );
                }
            }
        }
        assert!(checked > 200, "probe set too thin ({checked})");
    }

    #[test]
    fn scene_sdf_is_exact_minimum() {
        let (params, fields) = fresh::<f32>(1, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..64 {
            let x = vec3(rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0));
            let (p1, p2, ps) = fields.eval_sdfs(&params, x);
            assert!(ps <= p1 && ps <= p2);
            assert_eq!(ps, if p1 <= p2 { p1 } else { p2 });
        }
    }

    #[test]
    fn interval_alpha_oracles() {
        // logistic-cdf ratio at beta=100 over the step 0.01 -> -0.01
        let a: f64 = interval_alpha(0.01, -0.01, 100.0);
        assert!((a - 0.63212).abs() < 1e-5, "{a}");
        assert_eq!(interval_alpha::<f64>(0.3, 0.3, 50.0), 0.0);
        assert_eq!(interval_alpha::<f64>(-0.01, 0.01, 100.0), 0.0, "leaving the surface");
        // deep crossing saturates at the clamp
        assert_eq!(interval_alpha::<f64>(1.0, -1.0, 1e4), 1.0 - 1e-6);
    }

    proptest! {
        #[test]
        fn interval_alpha_bounded_and_monotone(
            phi in -0.5f64..0.5,
            d1 in 0.0f64..0.3,
            d2 in 0.0f64..0.3,
            beta in 1.0f64..200.0,
        ) {
            let (lo, hi) = if d1 <= d2 { (d1, d2) } else { (d2, d1) };
            let a_lo = interval_alpha(phi, phi - lo, beta);
            let a_hi = interval_alpha(phi, phi - hi, beta);
            prop_assert!((0.0..=1.0 - 1e-6).contains(&a_lo));
            prop_assert!((0.0..=1.0 - 1e-6).contains(&a_hi));
            prop_assert!(a_hi >= a_lo);
        }
    }

    #[test]
    fn alpha_nodes_match_scalar_and_train_beta() {
        let (mut params, fields) = fresh::<f64>(1, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 40;
        let pi: Vec<f64> = (0..n).map(|_| rng.gen_range(-0.2..0.2)).collect();
        let pn: Vec<f64> = (0..n).map(|_| rng.gen_range(-0.2..0.2)).collect();
        let beta = fields.beta(&params);
        let mut tape = Tape::new();
        let vi = tape.constant(Buf::from_vec(n, 1, pi.clone()));
        let vn = tape.constant(Buf::from_vec(n, 1, pn.clone()));
        let bv = fields.beta_node(&mut tape, &params);
        let alpha = interval_alpha_nodes(&mut tape, vi, vn, bv);
        for s in 0..n {
            assert_eq!(tape.value(alpha).data[s], interval_alpha(pi[s], pn[s], beta));
        }
        let out = tape.sum_all(alpha);
        tape.backward(out, &mut params).unwrap();
        assert!(params.block(fields.log_beta).grad[0].abs() > 0.0, "sharpness got no gradient");
    }

    #[test]
    fn hash_features_feed_both_heads() {
        let (mut params, fields) = fresh::<f64>(1, 9);
        let x = vec3(0.43, 0.57, 0.51);
        let (b1, b2, _) = fields.eval_sdfs(&params, x);
        let plan = fields.grid.plan::<f64>(&[x], false);
        let entry = plan.idx[0] as usize * crate::hashgrid::FEATURES;
        params.block_mut(fields.grid.table).values[entry] += 0.05;
        let (a1, a2, _) = fields.eval_sdfs(&params, x);
        assert_ne!(a1, b1, "head 1 blind to the shared feature");
        assert_ne!(a2, b2, "head 2 blind to the shared feature");
    }

    /// Points whose FD probes stay inside one cell at every level.
    fn safe_points(n: usize, h: f64, rng: &mut impl Rng) -> Vec<Vec3> {
        let mut out = Vec::new();
        'outer: while out.len() < n {
            let p = vec3(
                rng.gen_range(0.05..0.95),
                rng.gen_range(0.05..0.95),
                rng.gen_range(0.05..0.95),
            );
            for l in 0..LEVELS {
                let res = level_res(l) as f64;
                for v in [p.x, p.y, p.z] {
                    let f = (v * res).fract();
                    if f.min(1.0 - f) < 4.0 * h * res {
                        continue 'outer;
                    }
                }
            }
            out.push(p);
        }
        out
    }

    #[test]
    fn geometry_jacobians_match_finite_differences() {
        let (mut params, fields) = fresh::<f64>(1, 21);
        // make the encoding matter: features at trained-like magnitude
        {
            let mut rng = ChaCha8Rng::seed_from_u64(2);
            for v in params.block_mut(fields.grid.table).values.iter_mut() {
                *v = rng.gen_range(-0.05..0.05);
            }
        }
        let h = 1e-6;
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let xs = safe_points(4, h, &mut rng);
        let n = xs.len();
        let mut tape = Tape::new();
        let geom = fields.eval_geometry(&mut tape, &params, &xs);
        let j1 = tape.value(geom.grad1).data.clone();
        let js = tape.value(geom.grads).data.clone();

        for (s, p) in xs.iter().enumerate() {
            for axis in 0..3 {
                let step = match axis {
                    0 => vec3(h, 0.0, 0.0),
                    1 => vec3(0.0, h, 0.0),
                    _ => vec3(0.0, 0.0, h),
                };
                let (hi1, _, his) = fields.eval_sdfs(&params, *p + step);
                let (lo1, _, los) = fields.eval_sdfs(&params, *p + step * -1.0);
                let fd1 = (hi1 - lo1) / (2.0 * h);
                let fds = (his - los) / (2.0 * h);
                assert!(
                    rel_err(j1[axis * n + s], fd1) < 1e-3,
                    "head1 s{s} a{axis}: {} vs {fd1}",
                    j1[axis * n + s]
                );
                assert!(
                    rel_err(js[axis * n + s], fds) < 1e-3,
                    "scene s{s} a{axis}: {} vs {fds}",
                    js[axis * n + s]
                );
            }
        }
    }

    #[test]
    fn unit_gradient_penalty_double_backward_matches_fd() {
        let (mut params, fields) = fresh::<f64>(1, 77);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let xs = safe_points(4, 1e-5, &mut rng);

        let loss = |p: &ParamSet<f64>| -> f64 {
            let mut tape = Tape::new();
            let geom = fields.eval_geometry(&mut tape, p, &xs);
            let norms = gradient_norms(&mut tape, geom.grads, xs.len());
            let shifted = tape.add_scalar(norms, -1.0);
            let sq = tape.square(shifted);
            let out = tape.sum_all(sq);
            tape.scalar_value(out)
        };

        {
            let mut tape = Tape::new();
            let geom = fields.eval_geometry(&mut tape, &params, &xs);
            let norms = gradient_norms(&mut tape, geom.grads, xs.len());
            let shifted = tape.add_scalar(norms, -1.0);
            let sq = tape.square(shifted);
            let out = tape.sum_all(sq);
            tape.backward(out, &mut params).unwrap();
        }
        for name in ["trunk.w0", "sdf1.w0", "hash"] {
            let id = params.find(name).unwrap();
            let picks = pick_active(&params, id, 20, 1e-14, &mut rng);
            assert!(!picks.is_empty(), "{name} got no gradient");
            let probes = probe_entries(&mut params, &picks, 1e-5, loss);
            for pr in probes {
                assert!(pr.rel_err < 1e-2, "{name}: {pr:?}");
            }
        }
    }

    #[test]
    fn colour_is_deterministic_in_range_and_validates_ids() {
        let (params, fields) = fresh::<f64>(3, 15);
        let x = vec3(0.45, 0.52, 0.49);
        let v = vec3(0.3, -0.5, 0.4).normalized();
        let a = fields.sample(&params, x, v, Some(1)).unwrap();
        let b = fields.sample(&params, x, v, Some(1)).unwrap();
        assert_eq!(a.colour, b.colour);
        assert!(a.colour.iter().all(|c| *c > 0.0 && *c < 1.0));
        // zero latents at init: novel-view code equals any trained code
        let c = fields.sample(&params, x, v, None).unwrap();
        assert_eq!(a.colour, c.colour);
        assert!(fields.sample(&params, x, v, Some(3)).is_err());
        assert!(fields.sample(&params, x, vec3(0.0, 0.0, 2.0), None).is_err());
        assert_eq!(a.phi_s, a.phi1.min(a.phi2));
    }

    #[test]
    fn sharpness_starts_at_configured_value() {
        let (params, fields) = fresh::<f64>(1, 1);
        assert!((fields.beta(&params) - BETA_INIT).abs() < 1e-12);
        let mut tape = Tape::new();
        let b = fields.beta_node(&mut tape, &params);
        assert_eq!(tape.scalar_value(b), fields.beta(&params));
    }

    #[test]
    fn construction_is_deterministic() {
        let (pa, fa) = fresh::<f32>(2, 123);
        let (pb, _fb) = fresh::<f32>(2, 123);
        assert_eq!(pa.total_values(), pb.total_values());
        assert_eq!(
            crate::autodiff::checkpoint::arch_hash(&pa),
            crate::autodiff::checkpoint::arch_hash(&pb)
        );
        assert_eq!(pa.values(fa.grid.table), pb.values(fa.grid.table));
        assert_eq!(fa.grid.total_entries, 7_334_434);
        assert_eq!(pa.block(fa.latents).shape, vec![2, LATENT_DIM]);
    }
}
