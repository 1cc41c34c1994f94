//! Small dense multilayer perceptrons recorded on the tape.

use rand::Rng;

use crate::autodiff::linalg::{gemm_forward, sigmoid, softplus, Buf, Real};
use crate::autodiff::params::{LrGroup, ParamId, ParamSet};
use crate::autodiff::tape::{Tape, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Softplus,
    Relu,
    Sigmoid,
    None,
}

impl Activation {
    fn apply_tape<R: Real>(self, tape: &mut Tape<R>, x: Var) -> Var {
        match self {
            Activation::Softplus => tape.softplus(x),
            Activation::Relu => tape.relu(x),
            Activation::Sigmoid => tape.sigmoid(x),
            Activation::None => x,
        }
    }

    fn apply_values<R: Real>(self, buf: &mut Buf<R>) {
        match self {
            Activation::Softplus => {
                for v in buf.data.iter_mut() {
                    *v = softplus(*v);
                }
            }
            Activation::Relu => {
                for v in buf.data.iter_mut() {
                    *v = v.max(R::zero());
                }
            }
            Activation::Sigmoid => {
                for v in buf.data.iter_mut() {
                    *v = sigmoid(*v);
                }
            }
            Activation::None => {}
        }
    }
}

/// Fully-connected stack. `dims = [in, h1, .., out]`; the hidden activation
/// applies after every layer but the last, the output activation after the
/// last. Weights live in the parameter set as `{name}.w{i}` / `{name}.b{i}`.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub name: String,
    pub dims: Vec<usize>,
    pub hidden: Activation,
    pub output: Activation,
    pub w: Vec<ParamId>,
    pub b: Vec<ParamId>,
}

impl Mlp {
    /// Registers parameters with uniform Xavier weights and zero biases.
    pub fn new<R: Real>(
        params: &mut ParamSet<R>,
        name: &str,
        dims: &[usize],
        hidden: Activation,
        output: Activation,
        rng: &mut impl Rng,
    ) -> Mlp {
        assert!(dims.len() >= 2, "mlp needs at least one layer");
        let mut w = Vec::new();
        let mut b = Vec::new();
        for i in 0..dims.len() - 1 {
            let (fan_in, fan_out) = (dims[i], dims[i + 1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let wv: Vec<R> = (0..fan_in * fan_out)
                .map(|_| R::of(rng.gen_range(-bound..bound)))
                .collect();
            w.push(params.add(
                format!("{name}.w{i}"),
                vec![fan_out, fan_in],
                wv,
                LrGroup::Mlp,
                false,
            ));
            b.push(params.add(
                format!("{name}.b{i}"),
                vec![fan_out],
                vec![R::zero(); fan_out],
                LrGroup::Mlp,
                false,
            ));
        }
        Mlp { name: name.to_string(), dims: dims.to_vec(), hidden, output, w, b }
    }

    pub fn layers(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn in_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn out_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    /// Records the full stack on the tape.
    pub fn forward<R: Real>(
        &self,
        tape: &mut Tape<R>,
        params: &ParamSet<R>,
        x: Var,
    ) -> Result<Var> {
        let got = tape.value(x).cols;
        if got != self.in_dim() {
            return Err(Error::usage(format!(
                "mlp {} expects {} input columns, got {got}",
                self.name,
                self.in_dim()
            )));
        }
        let mut h = x;
        for i in 0..self.layers() {
            h = tape.linear(params, h, self.w[i], Some(self.b[i]));
            let act = if i + 1 == self.layers() { self.output } else { self.hidden };
            h = act.apply_tape(tape, h);
        }
        Ok(h)
    }

    /// Plain value evaluation, no tape. Used on hot non-differentiated paths.
    pub fn forward_values<R: Real>(&self, params: &ParamSet<R>, x: &Buf<R>) -> Result<Buf<R>> {
        if x.cols != self.in_dim() {
            return Err(Error::usage(format!(
                "mlp {} expects {} input columns, got {}",
                self.name,
                self.in_dim(),
                x.cols
            )));
        }
        let mut h = x.clone();
        for i in 0..self.layers() {
            let wb = params.block(self.w[i]);
            let out = wb.shape[0];
            let mut y = Buf::zeros(h.rows, out);
            gemm_forward(&h, &wb.values, out, &mut y, false);
            let bias = &params.block(self.b[i]).values;
            for r in 0..y.rows {
                for (v, &bb) in y.data[r * out..(r + 1) * out].iter_mut().zip(bias.iter()) {
                    *v += bb;
                }
            }
            let act = if i + 1 == self.layers() { self.output } else { self.hidden };
            act.apply_values(&mut y);
            h = y;
        }
        Ok(h)
    }
}
