//! The reverse-mode tape: operation records over flat buffers.
//!
//! Recording is define-by-run: each op computes its value eagerly and appends
//! a node (operation + parent indices). `backward` walks the nodes once in
//! reverse topological order (parents always precede children because the
//! tape is append-only), accumulating gradients into parent nodes and into
//! [`ParamSet`] blocks. A tape is single-threaded; parallelism lives inside
//! the heavy kernels, which are bit-deterministic for any thread count.

use std::sync::Arc;

use crate::autodiff::linalg::{
    colsum_into, gemm_dw, gemm_dx, gemm_forward, sigmoid, softplus, Buf, Real,
};
use crate::autodiff::params::{ParamId, ParamSet};
use crate::error::{Error, Result};
use crate::geometry::{vec3, Vec3};

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Ragged row grouping: rows `offsets[s]..offsets[s+1]` belong to segment `s`.
#[derive(Debug, Clone)]
pub struct Segments {
    pub offsets: Vec<u32>,
}

impl Segments {
    pub fn new(offsets: Vec<u32>) -> Segments {
        assert!(!offsets.is_empty() && offsets.windows(2).all(|w| w[0] <= w[1]));
        Segments { offsets }
    }

    pub fn count(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn total(&self) -> usize {
        *self.offsets.last().unwrap() as usize
    }

    pub fn range(&self, s: usize) -> std::ops::Range<usize> {
        self.offsets[s] as usize..self.offsets[s + 1] as usize
    }
}

/// Precomputed sparse interpolation: each output group gathers `corners`
/// table rows with a value weight and three spatial-derivative weights.
/// Built by the hash encoder at record time; the tape treats it as a fixed
/// linear map from the feature table.
#[derive(Debug)]
pub struct InterpPlan<R> {
    pub samples: usize,
    pub groups: usize,
    pub feat: usize,
    pub corners: usize,
    /// n * groups * corners table entry indices (absolute within the block).
    pub idx: Vec<u32>,
    /// n * groups * corners * 4 weights: (w, dw/dx, dw/dy, dw/dz).
    pub w: Vec<R>,
    /// Include the three jacobian column groups in the output.
    pub with_jac: bool,
}

impl<R: Real> InterpPlan<R> {
    pub fn out_cols(&self) -> usize {
        self.groups * self.feat
    }

    /// Output rows: the `samples` value rows, then with jacobians three more
    /// row blocks of `samples` each holding d/dx, d/dy, d/dz.
    pub fn out_rows(&self) -> usize {
        if self.with_jac {
            self.samples * 4
        } else {
            self.samples
        }
    }
}

#[derive(Debug, Clone)]
enum Op<R> {
    Const,
    /// Constant whose gradient is retained for the caller (spatial probes).
    Input,
    Param(ParamId),
    Linear { x: Var, w: ParamId, b: Option<ParamId> },
    LinearConst { x: Var, w: Arc<Vec<R>> },
    AddRowConst(Var),
    Softplus(Var),
    Sigmoid(Var),
    Exp(Var),
    Ln(Var),
    Sqrt(Var),
    Square(Var),
    Relu(Var),
    ClampMax { x: Var, hi: R },
    Scale { x: Var, k: R },
    AddScalar(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Min(Var, Var),
    MulBroadcast { x: Var, s: Var },
    Concat(Arc<Vec<Var>>),
    Reshape(Var),
    SliceCols { x: Var, start: usize, len: usize },
    RowSum(Var),
    SumAll(Var),
    GatherRows { x: Var, idx: Arc<Vec<u32>> },
    GatherParamRows { table: ParamId, idx: Arc<Vec<u32>>, cols: usize },
    SegmentSum { x: Var, segs: Arc<Segments> },
    SegmentBroadcast { x: Var, segs: Arc<Segments> },
    SegmentExclCumsum { x: Var, segs: Arc<Segments> },
    SmoothL1 { a: Var, b: Var },
    Encode { table: ParamId, plan: Arc<InterpPlan<R>>, pos: Option<Var> },
}

struct Node<R> {
    op: Op<R>,
    val: Buf<R>,
    grad: Option<Buf<R>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum TapeState {
    Recording,
    Consumed,
}

pub struct Tape<R> {
    nodes: Vec<Node<R>>,
    state: TapeState,
}

impl<R: Real> Default for Tape<R> {
    fn default() -> Self {
        Self::new()
    }
}

impl<R: Real> Tape<R> {
    pub fn new() -> Tape<R> {
        Tape { nodes: Vec::new(), state: TapeState::Recording }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Buf<R> {
        &self.nodes[v.0].val
    }

    pub fn scalar_value(&self, v: Var) -> R {
        let b = &self.nodes[v.0].val;
        assert_eq!(b.len(), 1, "expected scalar node");
        b.data[0]
    }

    /// Gradient accumulated at a node during backward (inputs keep theirs).
    pub fn grad_of(&self, v: Var) -> Option<&Buf<R>> {
        self.nodes[v.0].grad.as_ref()
    }

    fn push(&mut self, op: Op<R>, val: Buf<R>) -> Var {
        assert!(
            self.state == TapeState::Recording,
            "tape already consumed by backward; record a fresh forward pass"
        );
        self.nodes.push(Node { op, val, grad: None });
        Var(self.nodes.len() - 1)
    }

    // -- leaves ------------------------------------------------------------

    pub fn constant(&mut self, val: Buf<R>) -> Var {
        self.push(Op::Const, val)
    }

    pub fn input(&mut self, val: Buf<R>) -> Var {
        self.push(Op::Input, val)
    }

    /// Leaf copying a parameter block's current values (small blocks only;
    /// large tables go through `encode` / `gather_param_rows`).
    pub fn param(&mut self, params: &ParamSet<R>, id: ParamId) -> Var {
        let b = params.block(id);
        let val = Buf::from_vec(1, b.values.len(), b.values.clone());
        self.push(Op::Param(id), val)
    }

    // -- dense layers ------------------------------------------------------

    /// y = x . W^T + b with W shaped [out, in].
    pub fn linear(&mut self, params: &ParamSet<R>, x: Var, w: ParamId, b: Option<ParamId>) -> Var {
        let wb = params.block(w);
        assert_eq!(wb.shape.len(), 2, "linear weight must be 2-d");
        let (out, k_in) = (wb.shape[0], wb.shape[1]);
        let xv = self.value(x);
        assert_eq!(xv.cols, k_in, "linear input width mismatch");
        let mut y = Buf::zeros(xv.rows, out);
        gemm_forward(xv, &wb.values, out, &mut y, false);
        if let Some(bid) = b {
            let bias = &params.block(bid).values;
            assert_eq!(bias.len(), out);
            for r in 0..y.rows {
                let row = &mut y.data[r * out..(r + 1) * out];
                for (v, &bb) in row.iter_mut().zip(bias.iter()) {
                    *v += bb;
                }
            }
        }
        self.push(Op::Linear { x, w, b }, y)
    }

    /// y = x . W^T with a constant (non-trainable) W shaped [out, in].
    pub fn linear_const(&mut self, x: Var, w: Arc<Vec<R>>, out: usize) -> Var {
        let xv = self.value(x);
        assert_eq!(w.len() % out, 0);
        let k_in = w.len() / out;
        assert_eq!(xv.cols, k_in, "linear_const input width mismatch");
        let mut y = Buf::zeros(xv.rows, out);
        gemm_forward(xv, &w, out, &mut y, false);
        self.push(Op::LinearConst { x, w }, y)
    }

    pub fn add_row_const(&mut self, x: Var, row: &[R]) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.cols, row.len());
        let mut y = xv.clone();
        for r in 0..y.rows {
            for (v, &c) in y.data[r * y.cols..(r + 1) * y.cols].iter_mut().zip(row.iter()) {
                *v += c;
            }
        }
        self.push(Op::AddRowConst(x), y)
    }

    // -- elementwise -------------------------------------------------------

    fn unary(&mut self, x: Var, f: impl Fn(R) -> R, op: Op<R>) -> Var {
        let xv = self.value(x);
        let val = Buf {
            rows: xv.rows,
            cols: xv.cols,
            data: xv.data.iter().map(|&v| f(v)).collect(),
        };
        self.push(op, val)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, softplus, Op::Softplus(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.exp(), Op::Exp(x))
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.ln(), Op::Ln(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.sqrt(), Op::Sqrt(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(R::zero()), Op::Relu(x))
    }

    pub fn clamp_max(&mut self, x: Var, hi: R) -> Var {
        self.unary(x, |v| v.min(hi), Op::ClampMax { x, hi })
    }

    pub fn scale(&mut self, x: Var, k: R) -> Var {
        self.unary(x, |v| v * k, Op::Scale { x, k })
    }

    pub fn add_scalar(&mut self, x: Var, k: R) -> Var {
        self.unary(x, |v| v + k, Op::AddScalar(x))
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(R, R) -> R, op: Op<R>) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert!(av.same_shape(bv), "elementwise shape mismatch");
        let val = Buf {
            rows: av.rows,
            cols: av.cols,
            data: av.data.iter().zip(&bv.data).map(|(&x, &y)| f(x, y)).collect(),
        };
        self.push(op, val)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// Elementwise minimum; gradient routes to the first argument on ties.
    pub fn min2(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| if x <= y { x } else { y }, Op::Min(a, b))
    }

    /// Broadcast multiply by a 1x1 scalar node.
    pub fn mul_broadcast(&mut self, x: Var, s: Var) -> Var {
        assert_eq!(self.value(s).len(), 1, "broadcast scalar must be 1x1");
        let sv = self.value(s).data[0];
        let xv = self.value(x);
        let val = Buf {
            rows: xv.rows,
            cols: xv.cols,
            data: xv.data.iter().map(|&v| v * sv).collect(),
        };
        self.push(Op::MulBroadcast { x, s }, val)
    }

    /// Smooth-L1 with delta = 1: 0.5 e^2 inside, |e| - 0.5 outside.
    pub fn smooth_l1(&mut self, a: Var, b: Var) -> Var {
        let one = R::one();
        let half = R::of(0.5);
        self.binary(
            a,
            b,
            |x, y| {
                let e = x - y;
                if e.abs() < one {
                    half * e * e
                } else {
                    e.abs() - half
                }
            },
            Op::SmoothL1 { a, b },
        )
    }

    // -- structure ---------------------------------------------------------

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut val = Buf::zeros(rows, cols);
        let mut at = 0usize;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.rows, rows, "concat row mismatch");
            for r in 0..rows {
                val.data[r * cols + at..r * cols + at + pv.cols]
                    .copy_from_slice(pv.row(r));
            }
            at += pv.cols;
        }
        self.push(Op::Concat(Arc::new(parts.to_vec())), val)
    }

    /// Same data, new row/column split (row-major layout is unchanged).
    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.len(), rows * cols, "reshape must preserve length");
        let val = Buf { rows, cols, data: xv.data.clone() };
        self.push(Op::Reshape(x), val)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        assert!(start + len <= xv.cols, "slice out of range");
        let mut val = Buf::zeros(xv.rows, len);
        for r in 0..xv.rows {
            val.data[r * len..(r + 1) * len]
                .copy_from_slice(&xv.row(r)[start..start + len]);
        }
        self.push(Op::SliceCols { x, start, len }, val)
    }

    pub fn row_sum(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut val = Buf::zeros(xv.rows, 1);
        for r in 0..xv.rows {
            val.data[r] = xv.row(r).iter().copied().sum();
        }
        self.push(Op::RowSum(x), val)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: R = self.value(x).data.iter().copied().sum();
        self.push(Op::SumAll(x), Buf::scalar(s))
    }

    pub fn gather_rows(&mut self, x: Var, idx: Arc<Vec<u32>>) -> Var {
        let xv = self.value(x);
        let cols = xv.cols;
        let mut val = Buf::zeros(idx.len(), cols);
        for (r, &i) in idx.iter().enumerate() {
            val.data[r * cols..(r + 1) * cols].copy_from_slice(xv.row(i as usize));
        }
        self.push(Op::GatherRows { x, idx }, val)
    }

    /// Gather rows of a [n, cols]-shaped parameter block (per-image latents).
    pub fn gather_param_rows(
        &mut self,
        params: &ParamSet<R>,
        table: ParamId,
        idx: Arc<Vec<u32>>,
    ) -> Var {
        let b = params.block(table);
        assert_eq!(b.shape.len(), 2);
        let cols = b.shape[1];
        let mut val = Buf::zeros(idx.len(), cols);
        for (r, &i) in idx.iter().enumerate() {
            let i = i as usize;
            val.data[r * cols..(r + 1) * cols]
                .copy_from_slice(&b.values[i * cols..(i + 1) * cols]);
        }
        self.push(Op::GatherParamRows { table, idx, cols }, val)
    }

    pub fn segment_sum(&mut self, x: Var, segs: Arc<Segments>) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.rows, segs.total(), "segment row-count mismatch");
        let cols = xv.cols;
        let mut val = Buf::zeros(segs.count(), cols);
        for s in 0..segs.count() {
            for r in segs.range(s) {
                for c in 0..cols {
                    val.data[s * cols + c] += xv.data[r * cols + c];
                }
            }
        }
        self.push(Op::SegmentSum { x, segs }, val)
    }

    pub fn segment_broadcast(&mut self, x: Var, segs: Arc<Segments>) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.rows, segs.count(), "segment count mismatch");
        let cols = xv.cols;
        let mut val = Buf::zeros(segs.total(), cols);
        for s in 0..segs.count() {
            for r in segs.range(s) {
                val.data[r * cols..(r + 1) * cols].copy_from_slice(xv.row(s));
            }
        }
        self.push(Op::SegmentBroadcast { x, segs }, val)
    }

    /// Exclusive prefix sums within each segment (first element gets 0).
    pub fn segment_excl_cumsum(&mut self, x: Var, segs: Arc<Segments>) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.rows, segs.total());
        let cols = xv.cols;
        let mut val = Buf::zeros(xv.rows, cols);
        for s in 0..segs.count() {
            let mut acc = vec![R::zero(); cols];
            for r in segs.range(s) {
                val.data[r * cols..(r + 1) * cols].copy_from_slice(&acc);
                for (a, v) in acc.iter_mut().zip(xv.row(r)) {
                    *a += *v;
                }
            }
        }
        self.push(Op::SegmentExclCumsum { x, segs }, val)
    }

    /// Sparse multi-group interpolation from a feature table (hash encoding).
    /// Rows are the per-sample values; with jacobian weights three further
    /// row blocks of the same height follow, holding d/dx, d/dy and d/dz.
    pub fn encode(&mut self, params: &ParamSet<R>, table: ParamId, plan: Arc<InterpPlan<R>>) -> Var {
        let val = encode_forward(params, table, &plan);
        self.push(Op::Encode { table, plan, pos: None }, val)
    }

    /// Value-only encode that also routes gradients to `pos`, an [n, 3] node
    /// holding the same positions the plan was built from. Requires the
    /// plan's derivative weights; jacobian row blocks must be off (their own
    /// position dependence is not modelled).
    pub fn encode_tracked(
        &mut self,
        params: &ParamSet<R>,
        table: ParamId,
        plan: Arc<InterpPlan<R>>,
        pos: Var,
    ) -> Var {
        assert!(!plan.with_jac, "tracked encode is value-only");
        let pv = self.value(pos);
        assert!(
            pv.rows == plan.samples && pv.cols == 3,
            "position node must be [samples, 3]"
        );
        let val = encode_forward(params, table, &plan);
        self.push(Op::Encode { table, plan, pos: Some(pos) }, val)
    }

    // -- backward ----------------------------------------------------------

    /// Reverse pass from a scalar output, accumulating parameter gradients.
    /// Consumes the tape: a second call without re-recording is an error.
    pub fn backward(&mut self, output: Var, params: &mut ParamSet<R>) -> Result<()> {
        if self.state == TapeState::Consumed {
            return Err(Error::usage(
                "backward called twice on one tape; re-record the forward pass first",
            ));
        }
        if self.nodes.is_empty() {
            return Err(Error::usage("backward called before any forward computation"));
        }
        if self.value(output).len() != 1 {
            return Err(Error::usage("backward expects a scalar output node"));
        }
        self.state = TapeState::Consumed;
        self.nodes[output.0].grad = Some(Buf::scalar(R::one()));

        for i in (0..self.nodes.len()).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &mut rest[0];
            let Some(g) = node.grad.take() else {
                if !matches!(node.op, Op::Input) {
                    node.val = Buf::zeros(0, 0);
                }
                continue;
            };
            match &node.op {
                Op::Const | Op::Input => {
                    // inputs keep their gradient readable after backward
                    if matches!(node.op, Op::Input) {
                        node.grad = Some(g);
                    }
                    continue;
                }
                Op::Param(id) => {
                    let blk = params.block_mut(*id);
                    for (pg, &gv) in blk.grad.iter_mut().zip(&g.data) {
                        *pg += gv;
                    }
                }
                Op::Linear { x, w, b } => {
                    let k_in = params.block(*w).shape[1];
                    {
                        let wvals = &params.block(*w).values;
                        let gx = grad_slot(before, *x);
                        gemm_dx(&g, wvals, k_in, gx);
                    }
                    let xv = &before[x.0].val;
                    let wb = params.block_mut(*w);
                    gemm_dw(&g, xv, &mut wb.grad);
                    if let Some(bid) = b {
                        colsum_into(&g, &mut params.block_mut(*bid).grad);
                    }
                }
                Op::LinearConst { x, w } => {
                    let k_in = before[x.0].val.cols;
                    let gx = grad_slot(before, *x);
                    gemm_dx(&g, w, k_in, gx);
                }
                Op::AddRowConst(x) => {
                    acc_same(before, *x, &g);
                }
                Op::Softplus(x) => {
                    let xv = &before[x.0].val;
                    let d: Vec<R> = xv.data.iter().map(|&v| sigmoid(v)).collect();
                    acc_mul(before, *x, &g, &d);
                }
                Op::Sigmoid(x) => {
                    let y = &node.val;
                    let d: Vec<R> =
                        y.data.iter().map(|&s| s * (R::one() - s)).collect();
                    acc_mul(before, *x, &g, &d);
                }
                Op::Exp(x) => {
                    let d = node.val.data.clone();
                    acc_mul(before, *x, &g, &d);
                }
                Op::Ln(x) => {
                    let xv = &before[x.0].val;
                    let d: Vec<R> = xv.data.iter().map(|&v| R::one() / v).collect();
                    acc_mul(before, *x, &g, &d);
                }
                Op::Sqrt(x) => {
                    // subgradient 0 at exactly zero to avoid infinities
                    let d: Vec<R> = node
                        .val
                        .data
                        .iter()
                        .map(|&y| {
                            if y == R::zero() {
                                R::zero()
                            } else {
                                R::of(0.5) / y
                            }
                        })
                        .collect();
                    acc_mul(before, *x, &g, &d);
                }
                Op::Square(x) => {
                    let xv = &before[x.0].val;
                    let d: Vec<R> = xv.data.iter().map(|&v| v + v).collect();
                    acc_mul(before, *x, &g, &d);
                }
                Op::Relu(x) => {
                    let xv = &before[x.0].val;
                    let d: Vec<R> = xv
                        .data
                        .iter()
                        .map(|&v| if v > R::zero() { R::one() } else { R::zero() })
                        .collect();
                    acc_mul(before, *x, &g, &d);
                }
                Op::ClampMax { x, hi } => {
                    let xv = &before[x.0].val;
                    let d: Vec<R> = xv
                        .data
                        .iter()
                        .map(|&v| if v < *hi { R::one() } else { R::zero() })
                        .collect();
                    acc_mul(before, *x, &g, &d);
                }
                Op::Scale { x, k } => {
                    let k = *k;
                    let scaled: Vec<R> = g.data.iter().map(|&v| v * k).collect();
                    acc_raw(before, *x, &scaled);
                }
                Op::AddScalar(x) => {
                    acc_same(before, *x, &g);
                }
                Op::Add(a, b) => {
                    acc_same(before, *a, &g);
                    acc_same(before, *b, &g);
                }
                Op::Sub(a, b) => {
                    acc_same(before, *a, &g);
                    let neg: Vec<R> = g.data.iter().map(|&v| -v).collect();
                    acc_raw(before, *b, &neg);
                }
                Op::Mul(a, b) => {
                    let bd = before[b.0].val.data.clone();
                    acc_mul(before, *a, &g, &bd);
                    let ad = before[a.0].val.data.clone();
                    acc_mul(before, *b, &g, &ad);
                }
                Op::Div(a, b) => {
                    let bv = before[b.0].val.data.clone();
                    let inv: Vec<R> = bv.iter().map(|&v| R::one() / v).collect();
                    acc_mul(before, *a, &g, &inv);
                    let y = &node.val;
                    let db: Vec<R> = y
                        .data
                        .iter()
                        .zip(&bv)
                        .zip(&g.data)
                        .map(|((&yy, &bb), &gg)| -gg * yy / bb)
                        .collect();
                    acc_raw(before, *b, &db);
                }
                Op::Min(a, b) => {
                    let (av, bv) = (before[a.0].val.data.clone(), before[b.0].val.data.clone());
                    let da: Vec<R> = av
                        .iter()
                        .zip(&bv)
                        .zip(&g.data)
                        .map(|((&x, &y), &gg)| if x <= y { gg } else { R::zero() })
                        .collect();
                    acc_raw(before, *a, &da);
                    let db: Vec<R> = av
                        .iter()
                        .zip(&bv)
                        .zip(&g.data)
                        .map(|((&x, &y), &gg)| if x <= y { R::zero() } else { gg })
                        .collect();
                    acc_raw(before, *b, &db);
                }
                Op::MulBroadcast { x, s } => {
                    let sv = before[s.0].val.data[0];
                    let dx: Vec<R> = g.data.iter().map(|&v| v * sv).collect();
                    acc_raw(before, *x, &dx);
                    let xv = &before[x.0].val;
                    let ds: R = g.data.iter().zip(&xv.data).map(|(&gg, &xx)| gg * xx).sum();
                    acc_raw(before, *s, &[ds]);
                }
                Op::Concat(parts) => {
                    let mut at = 0usize;
                    let parts = parts.clone();
                    for &p in parts.iter() {
                        let pcols = before[p.0].val.cols;
                        let rows = g.rows;
                        let mut slice = vec![R::zero(); rows * pcols];
                        for r in 0..rows {
                            slice[r * pcols..(r + 1) * pcols]
                                .copy_from_slice(&g.row(r)[at..at + pcols]);
                        }
                        acc_raw(before, p, &slice);
                        at += pcols;
                    }
                }
                Op::Reshape(x) => {
                    acc_raw(before, *x, &g.data);
                }
                Op::SliceCols { x, start, len } => {
                    let xcols = before[x.0].val.cols;
                    let gx = grad_slot(before, *x);
                    for r in 0..g.rows {
                        for c in 0..*len {
                            gx.data[r * xcols + start + c] += g.data[r * len + c];
                        }
                    }
                }
                Op::RowSum(x) => {
                    let xcols = before[x.0].val.cols;
                    let gx = grad_slot(before, *x);
                    for r in 0..g.rows {
                        let gv = g.data[r];
                        for c in 0..xcols {
                            gx.data[r * xcols + c] += gv;
                        }
                    }
                }
                Op::SumAll(x) => {
                    let gv = g.data[0];
                    let gx = grad_slot(before, *x);
                    for v in gx.data.iter_mut() {
                        *v += gv;
                    }
                }
                Op::GatherRows { x, idx } => {
                    let cols = g.cols;
                    let idx = idx.clone();
                    let gx = grad_slot(before, *x);
                    for (r, &i) in idx.iter().enumerate() {
                        let i = i as usize;
                        for c in 0..cols {
                            gx.data[i * cols + c] += g.data[r * cols + c];
                        }
                    }
                }
                Op::GatherParamRows { table, idx, cols } => {
                    let blk = params.block_mut(*table);
                    for (r, &i) in idx.iter().enumerate() {
                        let i = i as usize;
                        for c in 0..*cols {
                            blk.grad[i * cols + c] += g.data[r * cols + c];
                        }
                    }
                }
                Op::SegmentSum { x, segs } => {
                    let cols = g.cols;
                    let segs = segs.clone();
                    let gx = grad_slot(before, *x);
                    for s in 0..segs.count() {
                        for r in segs.range(s) {
                            for c in 0..cols {
                                gx.data[r * cols + c] += g.data[s * cols + c];
                            }
                        }
                    }
                }
                Op::SegmentBroadcast { x, segs } => {
                    let cols = g.cols;
                    let segs = segs.clone();
                    let gx = grad_slot(before, *x);
                    for s in 0..segs.count() {
                        for r in segs.range(s) {
                            for c in 0..cols {
                                gx.data[s * cols + c] += g.data[r * cols + c];
                            }
                        }
                    }
                }
                Op::SegmentExclCumsum { x, segs } => {
                    // d x_j = sum of downstream grads within the segment
                    let cols = g.cols;
                    let segs = segs.clone();
                    let gx = grad_slot(before, *x);
                    for s in 0..segs.count() {
                        let mut acc = vec![R::zero(); cols];
                        for r in segs.range(s).rev() {
                            for (c, a) in acc.iter_mut().enumerate() {
                                gx.data[r * cols + c] += *a;
                                *a += g.data[r * cols + c];
                            }
                        }
                    }
                }
                Op::SmoothL1 { a, b } => {
                    let (av, bv) = (before[a.0].val.data.clone(), before[b.0].val.data.clone());
                    let one = R::one();
                    let d: Vec<R> = av
                        .iter()
                        .zip(&bv)
                        .map(|(&x, &y)| (x - y).max(-one).min(one))
                        .collect();
                    let da: Vec<R> = d.iter().zip(&g.data).map(|(&dd, &gg)| dd * gg).collect();
                    acc_raw(before, *a, &da);
                    let db: Vec<R> = da.iter().map(|&v| -v).collect();
                    acc_raw(before, *b, &db);
                }
                Op::Encode { table, plan, pos } => {
                    encode_backward(&g, params, *table, plan);
                    if let Some(p) = pos {
                        let pg = encode_pos_grad(&g, params, *table, plan);
                        acc_raw(before, *p, &pg);
                    }
                }
            }
            node.val = Buf::zeros(0, 0);
        }
        Ok(())
    }
}

fn grad_slot<R: Real>(before: &mut [Node<R>], v: Var) -> &mut Buf<R> {
    let node = &mut before[v.0];
    if node.grad.is_none() {
        node.grad = Some(Buf::zeros(node.val.rows, node.val.cols));
    }
    node.grad.as_mut().unwrap()
}

fn acc_same<R: Real>(before: &mut [Node<R>], v: Var, g: &Buf<R>) {
    let gx = grad_slot(before, v);
    for (d, &s) in gx.data.iter_mut().zip(&g.data) {
        *d += s;
    }
}

fn acc_raw<R: Real>(before: &mut [Node<R>], v: Var, data: &[R]) {
    let gx = grad_slot(before, v);
    for (d, &s) in gx.data.iter_mut().zip(data) {
        *d += s;
    }
}

fn acc_mul<R: Real>(before: &mut [Node<R>], v: Var, g: &Buf<R>, deriv: &[R]) {
    let gx = grad_slot(before, v);
    for ((d, &gg), &dd) in gx.data.iter_mut().zip(&g.data).zip(deriv) {
        *d += gg * dd;
    }
}

pub(crate) fn encode_forward<R: Real>(
    params: &ParamSet<R>,
    table: ParamId,
    plan: &InterpPlan<R>,
) -> Buf<R> {
    let t = &params.block(table).values;
    let f = plan.feat;
    let gf = plan.out_cols();
    let n = plan.samples;
    let mut out = Buf::zeros(plan.out_rows(), gf);
    let cpg = plan.corners;
    for s in 0..n {
        for gidx in 0..plan.groups {
            let base = (s * plan.groups + gidx) * cpg;
            for c in 0..cpg {
                let entry = plan.idx[base + c] as usize * f;
                let wbase = (base + c) * 4;
                let w0 = plan.w[wbase];
                if plan.with_jac {
                    let (wx, wy, wz) =
                        (plan.w[wbase + 1], plan.w[wbase + 2], plan.w[wbase + 3]);
                    for ff in 0..f {
                        let tv = t[entry + ff];
                        let col = gidx * f + ff;
                        out.data[s * gf + col] += w0 * tv;
                        out.data[(n + s) * gf + col] += wx * tv;
                        out.data[(2 * n + s) * gf + col] += wy * tv;
                        out.data[(3 * n + s) * gf + col] += wz * tv;
                    }
                } else {
                    for ff in 0..f {
                        out.data[s * gf + gidx * f + ff] += w0 * t[entry + ff];
                    }
                }
            }
        }
    }
    out
}

fn encode_backward<R: Real>(
    g: &Buf<R>,
    params: &mut ParamSet<R>,
    table: ParamId,
    plan: &InterpPlan<R>,
) {
    let blk = params.block_mut(table);
    let f = plan.feat;
    let gf = plan.out_cols();
    let n = plan.samples;
    let cpg = plan.corners;
    for s in 0..n {
        for gidx in 0..plan.groups {
            let base = (s * plan.groups + gidx) * cpg;
            for c in 0..cpg {
                let entry = plan.idx[base + c] as usize * f;
                let wbase = (base + c) * 4;
                let w0 = plan.w[wbase];
                if plan.with_jac {
                    let (wx, wy, wz) =
                        (plan.w[wbase + 1], plan.w[wbase + 2], plan.w[wbase + 3]);
                    for ff in 0..f {
                        let col = gidx * f + ff;
                        blk.grad[entry + ff] += w0 * g.data[s * gf + col]
                            + wx * g.data[(n + s) * gf + col]
                            + wy * g.data[(2 * n + s) * gf + col]
                            + wz * g.data[(3 * n + s) * gf + col];
                    }
                } else {
                    for ff in 0..f {
                        blk.grad[entry + ff] += w0 * g.data[s * gf + gidx * f + ff];
                    }
                }
            }
        }
    }
}

/// Pull-back onto sample positions for a tracked (value-only) encode, using
/// the plan's stored interpolation-weight derivatives.
fn encode_pos_grad<R: Real>(
    g: &Buf<R>,
    params: &ParamSet<R>,
    table: ParamId,
    plan: &InterpPlan<R>,
) -> Vec<R> {
    debug_assert!(!plan.with_jac);
    let t = &params.block(table).values;
    let f = plan.feat;
    let gf = plan.out_cols();
    let cpg = plan.corners;
    let mut pg = vec![R::zero(); plan.samples * 3];
    for s in 0..plan.samples {
        for gidx in 0..plan.groups {
            let base = (s * plan.groups + gidx) * cpg;
            for c in 0..cpg {
                let entry = plan.idx[base + c] as usize * f;
                let wbase = (base + c) * 4;
                for ff in 0..f {
                    let gt = g.data[s * gf + gidx * f + ff] * t[entry + ff];
                    pg[s * 3] += gt * plan.w[wbase + 1];
                    pg[s * 3 + 1] += gt * plan.w[wbase + 2];
                    pg[s * 3 + 2] += gt * plan.w[wbase + 3];
                }
            }
        }
    }
    pg
}

/// Gradient of a scalar field at `x` by reverse-mode pull-back.
///
/// The closure receives a fresh tape, the parameters and an input node
/// holding `x` as a 1x3 row; it must return a scalar node. Feature-table
/// encodings reach the input when recorded with `encode_tracked`. Parameter
/// gradients accumulated during the pull-back are cleared before returning,
/// so call this between optimiser steps rather than inside one.
pub fn spatial_gradient<R, F>(params: &mut ParamSet<R>, x: Vec3, field: F) -> Result<Vec3>
where
    R: Real,
    F: FnOnce(&mut Tape<R>, &ParamSet<R>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let input = tape.input(Buf::from_vec(1, 3, vec![R::of(x.x), R::of(x.y), R::of(x.z)]));
    let out = field(&mut tape, params, input)?;
    tape.backward(out, params)?;
    let g = tape
        .grad_of(input)
        .ok_or_else(|| Error::numeric("field output does not depend on the probe position"))?;
    let gv = vec3(g.data[0].promote(), g.data[1].promote(), g.data[2].promote());
    params.zero_grads();
    Ok(gv)
}
