//! Central-difference gradient probes.
//!
//! Used by the gradient-check tests: perturb one parameter entry at a time,
//! reevaluate the loss, and compare against the analytic gradient from one
//! backward pass. Forward evaluation must be a pure function of the
//! parameters (fixed inputs, fixed sample positions, fixed RNG draws).

use rand::seq::SliceRandom;
use rand::Rng;

use crate::autodiff::linalg::Real;
use crate::autodiff::params::{ParamId, ParamSet};

#[derive(Debug, Clone)]
pub struct FdProbe {
    pub block: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

/// Relative error with a floor so near-zero pairs compare absolutely.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Probes `picks` entries. `loss` must be pure; the analytic gradients are
/// read from the blocks' `grad` vectors, which the caller fills beforehand.
pub fn probe_entries<R: Real>(
    params: &mut ParamSet<R>,
    picks: &[(ParamId, usize)],
    eps: f64,
    mut loss: impl FnMut(&ParamSet<R>) -> f64,
) -> Vec<FdProbe> {
    let mut out = Vec::with_capacity(picks.len());
    for &(id, index) in picks {
        let analytic = params.block(id).grad[index].promote();
        let original = params.block(id).values[index];
        params.block_mut(id).values[index] = original + R::of(eps);
        let plus = loss(params);
        params.block_mut(id).values[index] = original - R::of(eps);
        let minus = loss(params);
        params.block_mut(id).values[index] = original;
        let numeric = (plus - minus) / (2.0 * eps);
        out.push(FdProbe {
            block: params.block(id).name.clone(),
            index,
            analytic,
            numeric,
            rel_err: rel_err(analytic, numeric),
        });
    }
    out
}

/// Uniformly samples `n` entry indices from a block.
pub fn pick_uniform<R: Real>(
    params: &ParamSet<R>,
    id: ParamId,
    n: usize,
    rng: &mut impl Rng,
) -> Vec<(ParamId, usize)> {
    let len = params.block(id).values.len();
    let mut all: Vec<usize> = (0..len).collect();
    all.shuffle(rng);
    all.truncate(n.min(len));
    all.into_iter().map(|i| (id, i)).collect()
}

/// Samples `n` entries whose analytic gradient magnitude exceeds `floor`.
/// For sparse tables most entries are untouched in any one pass; probing
/// those would compare 0 against 0 and prove nothing.
pub fn pick_active<R: Real>(
    params: &ParamSet<R>,
    id: ParamId,
    n: usize,
    floor: f64,
    rng: &mut impl Rng,
) -> Vec<(ParamId, usize)> {
    let blk = params.block(id);
    let mut active: Vec<usize> = blk
        .grad
        .iter()
        .enumerate()
        .filter(|(_, g)| g.promote().abs() > floor)
        .map(|(i, _)| i)
        .collect();
    active.shuffle(rng);
    active.truncate(n);
    active.into_iter().map(|i| (id, i)).collect()
}
