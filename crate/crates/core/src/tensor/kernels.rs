//! Dense kernels shared by the differentiable ops.

use rayon::prelude::*;

/// Rows per parallel work item. Fixed so that reductions are grouped the same
/// way regardless of thread count.
pub(crate) const ROW_CHUNK: usize = 64;

/// Row-major matrix operand, optionally transposed.
#[derive(Clone, Copy)]
pub(crate) struct Mat<'a> {
    pub data: &'a [f64],
    /// Stored shape is (rows, cols) before transposition.
    pub rows: usize,
    pub cols: usize,
    pub transposed: bool,
}

impl<'a> Mat<'a> {
    pub fn new(data: &'a [f64], rows: usize, cols: usize) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self {
            data,
            rows,
            cols,
            transposed: false,
        }
    }

    pub fn t(self) -> Self {
        Self {
            transposed: !self.transposed,
            ..self
        }
    }

    fn logical(&self) -> (usize, usize) {
        if self.transposed {
            (self.cols, self.rows)
        } else {
            (self.rows, self.cols)
        }
    }

    fn strides(&self) -> (isize, isize) {
        if self.transposed {
            (1, self.cols as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

/// out = a · b (+ out when `accumulate`). `out` is row-major (m, n).
pub(crate) fn gemm(a: Mat<'_>, b: Mat<'_>, out: &mut [f64], accumulate: bool) {
    let (m, k) = a.logical();
    let (k2, n) = b.logical();
    assert_eq!(k, k2, "gemm inner dimension mismatch");
    assert_eq!(out.len(), m * n, "gemm output size mismatch");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            out.fill(0.0);
        }
        return;
    }
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: shapes and strides were checked against the slice lengths
    // above; `out` does not alias the inputs.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// out[m, n] = x[m, k] · w[n, k]ᵀ, rows split across threads.
pub(crate) fn rows_times_wt(x: &[f64], m: usize, k: usize, w: &[f64], n: usize, out: &mut [f64]) {
    out.par_chunks_mut(ROW_CHUNK * n)
        .zip(x.par_chunks(ROW_CHUNK * k))
        .for_each(|(o, xc)| {
            let rows = xc.len() / k;
            gemm(Mat::new(xc, rows, k), Mat::new(w, n, k).t(), o, false);
        });
    debug_assert_eq!(x.len(), m * k);
}

/// out[m, k] = g[m, n] · w[n, k], rows split across threads.
pub(crate) fn rows_times_w(g: &[f64], m: usize, n: usize, w: &[f64], k: usize, out: &mut [f64]) {
    out.par_chunks_mut(ROW_CHUNK * k)
        .zip(g.par_chunks(ROW_CHUNK * n))
        .for_each(|(o, gc)| {
            let rows = gc.len() / n;
            gemm(Mat::new(gc, rows, n), Mat::new(w, n, k), o, false);
        });
    debug_assert_eq!(g.len(), m * n);
}

/// Σ over rows of gᵀ·x: returns (n, k) = g[m, n]ᵀ · x[m, k], reduced over
/// fixed row chunks in chunk order.
pub(crate) fn gt_times_x(g: &[f64], m: usize, n: usize, x: &[f64], k: usize) -> Vec<f64> {
    debug_assert_eq!(g.len(), m * n);
    debug_assert_eq!(x.len(), m * k);
    let partials: Vec<Vec<f64>> = g
        .par_chunks(ROW_CHUNK * n)
        .zip(x.par_chunks(ROW_CHUNK * k))
        .map(|(gc, xc)| {
            let rows = gc.len() / n;
            let mut p = vec![0.0; n * k];
            gemm(Mat::new(gc, rows, n).t(), Mat::new(xc, rows, k), &mut p, false);
            p
        })
        .collect();
    sum_in_order(partials, n * k)
}

/// Column sums of g[m, n] with the same fixed chunking.
pub(crate) fn column_sums(g: &[f64], n: usize) -> Vec<f64> {
    let partials: Vec<Vec<f64>> = g
        .par_chunks(ROW_CHUNK * n)
        .map(|gc| {
            let mut p = vec![0.0; n];
            for row in gc.chunks(n) {
                for (a, b) in p.iter_mut().zip(row) {
                    *a += b;
                }
            }
            p
        })
        .collect();
    sum_in_order(partials, n)
}

pub(crate) fn sum_in_order(partials: Vec<Vec<f64>>, len: usize) -> Vec<f64> {
    let mut total = vec![0.0; len];
    for p in partials {
        for (t, v) in total.iter_mut().zip(p) {
            *t += v;
        }
    }
    total
}
