//! Flat row-major buffers and the deterministic GEMM kernels behind them.
//!
//! Determinism contract: every kernel produces bit-identical results for any
//! thread count. Disjoint-output loops may run in parallel; reductions that
//! cross rows always use a fixed chunk structure reduced in chunk order.

use rayon::prelude::*;

/// Scalar abstraction so the whole stack runs at f32 (training) or f64 (tests).
pub trait Real:
    num_traits::Float
    + num_traits::NumAssign
    + std::iter::Sum
    + std::fmt::Debug
    + std::fmt::Display
    + Default
    + Send
    + Sync
    + 'static
{
    fn of(v: f64) -> Self;
    fn promote(self) -> f64;
    /// C(m x n) = alpha * A(m x k) * B(k x n) + beta * C with explicit strides.
    ///
    /// # Safety
    /// Pointers must cover the strided extents implied by (m, k, n).
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Real for f32 {
    fn of(v: f64) -> Self {
        v as f32
    }
    fn promote(self) -> f64 {
        self as f64
    }
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Real for f64 {
    fn of(v: f64) -> Self {
        v
    }
    fn promote(self) -> f64 {
        self
    }
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Dense row-major matrix; vectors are n x 1, scalars 1 x 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Buf<R> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<R>,
}

impl<R: Real> Buf<R> {
    pub fn zeros(rows: usize, cols: usize) -> Buf<R> {
        Buf { rows, cols, data: vec![R::zero(); rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<R>) -> Buf<R> {
        assert_eq!(data.len(), rows * cols, "buffer shape mismatch");
        Buf { rows, cols, data }
    }

    pub fn scalar(v: R) -> Buf<R> {
        Buf { rows: 1, cols: 1, data: vec![v] }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, r: usize) -> &[R] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn same_shape(&self, o: &Buf<R>) -> bool {
        self.rows == o.rows && self.cols == o.cols
    }
}

/// Fixed row-chunk size used by every cross-row reduction. Changing this
/// changes bit-level results, so it is a constant, never a tuning knob.
pub const ROW_CHUNK: usize = 8192;

/// y(n x out) += x(n x in) . w(out x in)^T   (w stored row-per-output-neuron)
pub fn gemm_forward<R: Real>(x: &Buf<R>, w: &[R], out: usize, y: &mut Buf<R>, accumulate: bool) {
    let (n, k) = (x.rows, x.cols);
    debug_assert_eq!(w.len(), out * k);
    debug_assert_eq!(y.rows, n);
    debug_assert_eq!(y.cols, out);
    let beta = if accumulate { R::one() } else { R::zero() };
    if n == 0 {
        return;
    }
    let chunks: Vec<(usize, usize)> = row_chunks(n);
    if chunks.len() == 1 || rayon::current_num_threads() == 1 {
        for &(s, e) in &chunks {
            unsafe {
                R::gemm(
                    e - s,
                    k,
                    out,
                    R::one(),
                    x.data.as_ptr().add(s * k),
                    k as isize,
                    1,
                    w.as_ptr(),
                    1,
                    k as isize,
                    beta,
                    y.data.as_mut_ptr().add(s * out),
                    out as isize,
                    1,
                );
            }
        }
    } else {
        // disjoint output rows: parallel chunks are bit-identical to serial
        let xp = x.data.as_ptr() as usize;
        let wp = w.as_ptr() as usize;
        let yp = y.data.as_mut_ptr() as usize;
        chunks.par_iter().for_each(|&(s, e)| unsafe {
            R::gemm(
                e - s,
                k,
                out,
                R::one(),
                (xp as *const R).add(s * k),
                k as isize,
                1,
                wp as *const R,
                1,
                k as isize,
                beta,
                (yp as *mut R).add(s * out),
                out as isize,
                1,
            );
        });
    }
}

/// dx(n x in) += dy(n x out) . w(out x in)
pub fn gemm_dx<R: Real>(dy: &Buf<R>, w: &[R], k_in: usize, dx: &mut Buf<R>) {
    let (n, out) = (dy.rows, dy.cols);
    debug_assert_eq!(w.len(), out * k_in);
    debug_assert_eq!(dx.rows, n);
    debug_assert_eq!(dx.cols, k_in);
    if n == 0 {
        return;
    }
    let chunks = row_chunks(n);
    if chunks.len() == 1 || rayon::current_num_threads() == 1 {
        for &(s, e) in &chunks {
            unsafe {
                R::gemm(
                    e - s,
                    out,
                    k_in,
                    R::one(),
                    dy.data.as_ptr().add(s * out),
                    out as isize,
                    1,
                    w.as_ptr(),
                    k_in as isize,
                    1,
                    R::one(),
                    dx.data.as_mut_ptr().add(s * k_in),
                    k_in as isize,
                    1,
                );
            }
        }
    } else {
        let dyp = dy.data.as_ptr() as usize;
        let wp = w.as_ptr() as usize;
        let dxp = dx.data.as_mut_ptr() as usize;
        chunks.par_iter().for_each(|&(s, e)| unsafe {
            R::gemm(
                e - s,
                out,
                k_in,
                R::one(),
                (dyp as *const R).add(s * out),
                out as isize,
                1,
                wp as *const R,
                k_in as isize,
                1,
                R::one(),
                (dxp as *mut R).add(s * k_in),
                k_in as isize,
                1,
            );
        });
    }
}

/// dw(out x in) += dy(n x out)^T . x(n x in), reduced over fixed row chunks
/// in chunk order so the result is thread-count independent.
pub fn gemm_dw<R: Real>(dy: &Buf<R>, x: &Buf<R>, dw: &mut [R]) {
    let (n, out) = (dy.rows, dy.cols);
    let k_in = x.cols;
    debug_assert_eq!(x.rows, n);
    debug_assert_eq!(dw.len(), out * k_in);
    if n == 0 {
        return;
    }
    let chunks = row_chunks(n);
    let partial = |s: usize, e: usize, acc: &mut [R]| unsafe {
        R::gemm(
            out,
            e - s,
            k_in,
            R::one(),
            dy.data.as_ptr().add(s * out),
            1,
            out as isize,
            x.data.as_ptr().add(s * k_in),
            k_in as isize,
            1,
            R::one(),
            acc.as_mut_ptr(),
            k_in as isize,
            1,
        );
    };
    if chunks.len() == 1 {
        partial(chunks[0].0, chunks[0].1, dw);
        return;
    }
    // per-chunk partials, summed in chunk order
    let partials: Vec<Vec<R>> = chunks
        .par_iter()
        .map(|&(s, e)| {
            let mut acc = vec![R::zero(); out * k_in];
            partial(s, e, &mut acc);
            acc
        })
        .collect();
    for acc in partials {
        for (d, p) in dw.iter_mut().zip(acc) {
            *d += p;
        }
    }
}

/// db(out) += column sums of dy, reduced in fixed chunk order.
pub fn colsum_into<R: Real>(dy: &Buf<R>, db: &mut [R]) {
    debug_assert_eq!(db.len(), dy.cols);
    let chunks = row_chunks(dy.rows);
    if chunks.len() == 1 {
        for r in 0..dy.rows {
            let row = dy.row(r);
            for (d, &v) in db.iter_mut().zip(row) {
                *d += v;
            }
        }
        return;
    }
    let partials: Vec<Vec<R>> = chunks
        .par_iter()
        .map(|&(s, e)| {
            let mut acc = vec![R::zero(); dy.cols];
            for r in s..e {
                let row = dy.row(r);
                for (d, &v) in acc.iter_mut().zip(row) {
                    *d += v;
                }
            }
            acc
        })
        .collect();
    for acc in partials {
        for (d, p) in db.iter_mut().zip(acc) {
            *d += p;
        }
    }
}

pub fn row_chunks(n: usize) -> Vec<(usize, usize)> {
    if n == 0 {
        return vec![(0, 0)];
    }
    let mut v = Vec::with_capacity(n / ROW_CHUNK + 1);
    let mut s = 0;
    while s < n {
        let e = (s + ROW_CHUNK).min(n);
        v.push((s, e));
        s = e;
    }
    v
}

/// Numerically stable softplus: max(x,0) + ln(1 + e^{-|x|}).
pub fn softplus<R: Real>(x: R) -> R {
    x.max(R::zero()) + x.abs().neg().exp().ln_1p()
}

/// Logistic sigmoid via softplus for symmetric over/underflow behaviour.
pub fn sigmoid<R: Real>(x: R) -> R {
    if x >= R::zero() {
        R::one() / (R::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (R::one() + e)
    }
}
