//! Trainable parameter storage and the Adam optimiser.
//!
//! Parameters live in named blocks. Gradients accumulate into the block's
//! `grad` buffer during tape backward passes; `Adam::step` consumes and zeroes
//! them. Blocks flagged `sparse` (the hash tables) use lazy moment updates:
//! entries whose gradient is exactly zero in a step are skipped entirely,
//! which keeps the per-step cost proportional to touched entries.

use crate::autodiff::linalg::Real;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

/// Learning-rate group; the trainer assigns a base rate per group.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LrGroup {
    HashTable,
    Mlp,
}

#[derive(Debug, Clone)]
pub struct ParamBlock<R> {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<R>,
    pub grad: Vec<R>,
    pub group: LrGroup,
    pub sparse: bool,
}

#[derive(Debug, Clone, Default)]
pub struct ParamSet<R> {
    blocks: Vec<ParamBlock<R>>,
}

impl<R: Real> ParamSet<R> {
    pub fn new() -> ParamSet<R> {
        ParamSet { blocks: Vec::new() }
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        values: Vec<R>,
        group: LrGroup,
        sparse: bool,
    ) -> ParamId {
        let name = name.into();
        assert_eq!(
            values.len(),
            shape.iter().product::<usize>(),
            "param {name}: value length does not match shape"
        );
        assert!(
            self.blocks.iter().all(|b| b.name != name),
            "duplicate param block name {name}"
        );
        let grad = vec![R::zero(); values.len()];
        self.blocks.push(ParamBlock { name, shape, values, grad, group, sparse });
        ParamId(self.blocks.len() - 1)
    }

    pub fn block(&self, id: ParamId) -> &ParamBlock<R> {
        &self.blocks[id.0]
    }

    pub fn block_mut(&mut self, id: ParamId) -> &mut ParamBlock<R> {
        &mut self.blocks[id.0]
    }

    pub fn values(&self, id: ParamId) -> &[R] {
        &self.blocks[id.0].values
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.blocks.iter().position(|b| b.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.blocks.len()).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn zero_grads(&mut self) {
        for b in &mut self.blocks {
            for g in &mut b.grad {
                *g = R::zero();
            }
        }
    }

    pub fn total_values(&self) -> usize {
        self.blocks.iter().map(|b| b.values.len()).sum()
    }

    /// Squared L2 norm of the gradient of one block (diagnostics).
    pub fn grad_norm_sq(&self, id: ParamId) -> f64 {
        self.blocks[id.0].grad.iter().map(|g| g.promote() * g.promote()).sum()
    }
}

/// Adam with bias correction. Moments are stored per block and serialised
/// with checkpoints so training resumes bit-exactly.
#[derive(Debug, Clone)]
pub struct Adam<R> {
    pub beta1: R,
    pub beta2: R,
    pub eps: R,
    pub t: u64,
    pub m: Vec<Vec<R>>,
    pub v: Vec<Vec<R>>,
}

impl<R: Real> Adam<R> {
    pub fn new(params: &ParamSet<R>) -> Adam<R> {
        Adam {
            beta1: R::of(0.9),
            beta2: R::of(0.99),
            eps: R::of(1e-15),
            t: 0,
            m: params.blocks.iter().map(|b| vec![R::zero(); b.values.len()]).collect(),
            v: params.blocks.iter().map(|b| vec![R::zero(); b.values.len()]).collect(),
        }
    }

    /// Reset moments and the step counter (used by warm starts).
    pub fn reset(&mut self) {
        self.t = 0;
        for m in &mut self.m {
            m.iter_mut().for_each(|x| *x = R::zero());
        }
        for v in &mut self.v {
            v.iter_mut().for_each(|x| *x = R::zero());
        }
    }

    /// One optimiser step over every block. `lr_of` maps a group to its
    /// current learning rate (schedule already applied). Gradients are zeroed.
    /// Blocks with any non-finite gradient entry are skipped with a warning;
    /// the number of skipped blocks is returned.
    pub fn step(&mut self, params: &mut ParamSet<R>, lr_of: impl Fn(LrGroup) -> R) -> Result<usize> {
        self.t += 1;
        let t = self.t as i32;
        let bc1 = R::one() - self.beta1.powi(t);
        let bc2 = R::one() - self.beta2.powi(t);
        let mut skipped = 0usize;
        for (i, b) in params.blocks.iter_mut().enumerate() {
            let lr = lr_of(b.group);
            if !lr.is_finite() || lr < R::zero() {
                return Err(Error::numeric(format!("bad learning rate {lr} for block {}", b.name)));
            }
            if b.grad.iter().any(|g| !g.is_finite()) {
                eprintln!(
                    "warning: non-finite gradient in block {}, skipping its update this step",
                    b.name
                );
                skipped += 1;
                b.grad.iter_mut().for_each(|g| *g = R::zero());
                continue;
            }
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
            let one = R::one();
            if b.sparse {
                // lazy: untouched entries keep stale moments, costing nothing
                for j in 0..b.values.len() {
                    let g = b.grad[j];
                    if g == R::zero() {
                        continue;
                    }
                    m[j] = b1 * m[j] + (one - b1) * g;
                    v[j] = b2 * v[j] + (one - b2) * g * g;
                    let mh = m[j] / bc1;
                    let vh = v[j] / bc2;
                    b.values[j] -= lr * mh / (vh.sqrt() + eps);
                    b.grad[j] = R::zero();
                }
            } else {
                for j in 0..b.values.len() {
                    let g = b.grad[j];
                    m[j] = b1 * m[j] + (one - b1) * g;
                    v[j] = b2 * v[j] + (one - b2) * g * g;
                    let mh = m[j] / bc1;
                    let vh = v[j] / bc2;
                    b.values[j] -= lr * mh / (vh.sqrt() + eps);
                    b.grad[j] = R::zero();
                }
            }
        }
        Ok(skipped)
    }
}

/// Cosine learning-rate decay to 10% of the base rate over `total` steps.
pub fn cosine_lr(base: f64, step: u64, total: u64) -> f64 {
    let t = (step as f64 / total.max(1) as f64).clamp(0.0, 1.0);
    let cos = 0.5 * (1.0 + (std::f64::consts::PI * t).cos());
    base * (0.1 + 0.9 * cos)
}
