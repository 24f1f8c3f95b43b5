//! Batched dense layers over row-major matrices.
//!
//! Work is split into fixed-size row chunks. Chunks may run on any number of
//! threads, and every reduction (weight and bias gradients) sums the
//! per-chunk partials in chunk order, so results do not depend on the
//! thread count.

use rayon::prelude::*;

use crate::real::Real;

/// Rows per work unit. Fixed so reductions are reproducible.
pub const CHUNK_ROWS: usize = 2048;

#[derive(Debug, Clone, PartialEq)]
pub struct Mat<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Real> Mat<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix data length");
        Self { rows, cols, data }
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// Output widths up to this size use dot-product kernels instead of GEMM.
const NARROW: usize = 4;

/// Columns of a row-major `k x n` weight, each as a contiguous vector.
fn columns<T: Real>(w: &[T], k: usize, n: usize) -> Vec<Vec<T>> {
    (0..n)
        .map(|j| (0..k).map(|i| w[i * n + j]).collect())
        .collect()
}

/// Dot product with a fixed lane split, so the order of additions depends
/// only on the length.
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    const LANES: usize = 8;
    let mut acc = [T::zero(); LANES];
    let split = a.len() / LANES * LANES;
    for (x, y) in a[..split]
        .chunks_exact(LANES)
        .zip(b[..split].chunks_exact(LANES))
    {
        for i in 0..LANES {
            acc[i] = acc[i] + x[i] * y[i];
        }
    }
    let mut tail = T::zero();
    for (x, y) in a[split..].iter().zip(&b[split..]) {
        tail = tail + *x * *y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

fn axpy<T: Real>(dst: &mut [T], src: &[T], s: T) {
    for (d, v) in dst.iter_mut().zip(src) {
        *d = *d + s * *v;
    }
}

/// `y += x w` for one chunk of rows, `w` row-major `k x n`.
///
/// # Safety
/// `xc` holds `m * k` values and `yc` holds `m * n` values.
unsafe fn gemm_acc<T: Real>(xc: &[T], w: &[T], yc: &mut [T], m: usize, k: usize, n: usize) {
    T::gemm(
        m,
        k,
        n,
        T::one(),
        xc.as_ptr(),
        k as isize,
        1,
        w.as_ptr(),
        n as isize,
        1,
        T::one(),
        yc.as_mut_ptr(),
        n as isize,
        1,
    );
}

/// `y = x w + b` with `w` stored row-major as `in x out`.
pub fn linear<T: Real>(x: &Mat<T>, w: &[T], b: &[T]) -> Mat<T> {
    let (k, n) = (x.cols, b.len());
    assert_eq!(w.len(), k * n, "weight shape");
    let mut y = Mat::zeros(x.rows, n);
    if n == 0 || x.rows == 0 {
        return y;
    }
    if n <= NARROW {
        let cols = columns(w, k, n);
        y.data
            .par_chunks_mut(n * CHUNK_ROWS)
            .zip(x.data.par_chunks(k.max(1) * CHUNK_ROWS))
            .for_each(|(yc, xc)| {
                for (r, yr) in yc.chunks_mut(n).enumerate() {
                    let xr = &xc[r * k..(r + 1) * k];
                    for j in 0..n {
                        yr[j] = b[j] + dot(xr, &cols[j]);
                    }
                }
            });
        return y;
    }
    y.data
        .par_chunks_mut(n * CHUNK_ROWS)
        .zip(x.data.par_chunks(k.max(1) * CHUNK_ROWS))
        .for_each(|(yc, xc)| {
            for row in yc.chunks_mut(n) {
                row.copy_from_slice(b);
            }
            if k > 0 {
                // SAFETY: chunk shapes follow from the asserts above.
                unsafe { gemm_acc(xc, w, yc, yc.len() / n, k, n) }
            }
        });
    y
}

/// `y += x w` in place.
pub fn linear_acc<T: Real>(y: &mut Mat<T>, x: &Mat<T>, w: &[T]) {
    let (k, n) = (x.cols, y.cols);
    assert_eq!(w.len(), k * n, "weight shape");
    assert_eq!(x.rows, y.rows);
    if k == 0 || n == 0 || x.rows == 0 {
        return;
    }
    y.data
        .par_chunks_mut(n * CHUNK_ROWS)
        .zip(x.data.par_chunks(k * CHUNK_ROWS))
        .for_each(|(yc, xc)| {
            // SAFETY: chunk shapes follow from the asserts above.
            unsafe { gemm_acc(xc, w, yc, yc.len() / n, k, n) }
        });
}

/// Gradients of `y = x w + b` given `dy`. Returns `(dw, db, dx)`; `dx` is only
/// computed when requested.
pub fn linear_backward<T: Real>(
    x: &Mat<T>,
    w: &[T],
    dy: &Mat<T>,
    want_dx: bool,
) -> (Vec<T>, Vec<T>, Option<Mat<T>>) {
    let mut dx = want_dx.then(|| Mat::zeros(x.rows, x.cols));
    let (dw, db) = linear_backward_into(x, w, dy, dx.as_mut());
    (dw, db, dx)
}

/// Like [`linear_backward`], writing `dx` into a caller-provided matrix of
/// the shape of `x`.
pub fn linear_backward_into<T: Real>(
    x: &Mat<T>,
    w: &[T],
    dy: &Mat<T>,
    dx: Option<&mut Mat<T>>,
) -> (Vec<T>, Vec<T>) {
    let (k, n) = (x.cols, dy.cols);
    assert_eq!(x.rows, dy.rows);
    assert_eq!(w.len(), k * n, "weight shape");
    let narrow = n <= NARROW;
    let partials: Vec<(Vec<T>, Vec<T>)> = x
        .data
        .par_chunks(k.max(1) * CHUNK_ROWS)
        .zip(dy.data.par_chunks(n.max(1) * CHUNK_ROWS))
        .map(|(xc, dyc)| {
            let m = dyc.len() / n.max(1);
            let mut dw = vec![T::zero(); k * n];
            let mut db = vec![T::zero(); n];
            for row in dyc.chunks(n.max(1)) {
                for (acc, v) in db.iter_mut().zip(row) {
                    *acc = *acc + *v;
                }
            }
            if k == 0 || n == 0 {
                return (dw, db);
            }
            if narrow {
                // column-major accumulation, transposed at the end
                let mut dwt = vec![T::zero(); k * n];
                for r in 0..m {
                    let xr = &xc[r * k..(r + 1) * k];
                    for j in 0..n {
                        axpy(&mut dwt[j * k..(j + 1) * k], xr, dyc[r * n + j]);
                    }
                }
                for j in 0..n {
                    for i in 0..k {
                        dw[i * n + j] = dwt[j * k + i];
                    }
                }
            } else {
                // dw = xc^T dyc
                // SAFETY: `xc` is `m x k`, `dyc` is `m x n`, `dw` is `k x n`.
                unsafe {
                    T::gemm(
                        k,
                        m,
                        n,
                        T::one(),
                        xc.as_ptr(),
                        1,
                        k as isize,
                        dyc.as_ptr(),
                        n as isize,
                        1,
                        T::zero(),
                        dw.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
            (dw, db)
        })
        .collect();
    let mut dw = vec![T::zero(); k * n];
    let mut db = vec![T::zero(); n];
    for (pw, pb) in &partials {
        axpy(&mut dw, pw, T::one());
        axpy(&mut db, pb, T::one());
    }
    if let Some(dx) = dx {
        assert_eq!((dx.rows, dx.cols), (x.rows, k), "dx shape");
        if k > 0 && n > 0 {
            let cols = narrow.then(|| columns(w, k, n));
            dx.data
                .par_chunks_mut(k * CHUNK_ROWS)
                .zip(dy.data.par_chunks(n * CHUNK_ROWS))
                .for_each(|(dxc, dyc)| {
                    let m = dyc.len() / n;
                    if let Some(cols) = &cols {
                        for (r, dxr) in dxc.chunks_mut(k).enumerate() {
                            dxr.iter_mut().for_each(|v| *v = T::zero());
                            for j in 0..n {
                                axpy(dxr, &cols[j], dyc[r * n + j]);
                            }
                        }
                        return;
                    }
                    // dx = dy w^T
                    // SAFETY: `dyc` is `m x n`, `w` read as `n x k`, `dxc` is `m x k`.
                    unsafe {
                        T::gemm(
                            m,
                            n,
                            k,
                            T::one(),
                            dyc.as_ptr(),
                            n as isize,
                            1,
                            w.as_ptr(),
                            1,
                            n as isize,
                            T::zero(),
                            dxc.as_mut_ptr(),
                            k as isize,
                            1,
                        );
                    }
                });
        } else {
            dx.data.iter_mut().for_each(|v| *v = T::zero());
        }
    }
    (dw, db)
}

pub fn relu_inplace<T: Real>(m: &mut Mat<T>) {
    // branch-free: activation signs are close to random
    m.data.par_chunks_mut(4096).for_each(|c| {
        for v in c {
            *v = v.max(T::zero());
        }
    });
}

/// Zeroes `grad` wherever the ReLU output `act` was not positive.
pub fn relu_backward_inplace<T: Real>(grad: &mut Mat<T>, act: &Mat<T>) {
    grad.data
        .par_chunks_mut(4096)
        .zip(act.data.par_chunks(4096))
        .for_each(|(g, a)| {
            for (gv, av) in g.iter_mut().zip(a) {
                let keep = *av > T::zero();
                *gv = if keep { *gv } else { T::zero() };
            }
        });
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_matches_naive() {
        let rows = CHUNK_ROWS + 37;
        let (k, n) = (5, 3);
        let x = Mat::from_vec(
            rows,
            k,
            (0..rows * k)
                .map(|i| ((i * 7 % 13) as f64) * 0.1 - 0.6)
                .collect(),
        );
        let w: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.37).sin()).collect();
        let b = vec![0.1, -0.2, 0.3];
        let y = linear(&x, &w, &b);
        for r in [0, 1, CHUNK_ROWS - 1, CHUNK_ROWS, rows - 1] {
            for j in 0..n {
                let expect: f64 = b[j] + (0..k).map(|i| x.row(r)[i] * w[i * n + j]).sum::<f64>();
                assert!((y.row(r)[j] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backward_matches_naive() {
        let rows = CHUNK_ROWS + 5;
        let (k, n) = (4, 2);
        let x = Mat::from_vec(
            rows,
            k,
            (0..rows * k)
                .map(|i| ((i % 11) as f64) * 0.2 - 1.0)
                .collect(),
        );
        let dy = Mat::from_vec(
            rows,
            n,
            (0..rows * n)
                .map(|i| ((i % 5) as f64) * 0.3 - 0.5)
                .collect(),
        );
        let w: Vec<f64> = (0..k * n).map(|i| i as f64 * 0.1 - 0.3).collect();
        let (dw, db, dx) = linear_backward(&x, &w, &dy, true);
        let dx = dx.unwrap();
        for i in 0..k {
            for j in 0..n {
                let e: f64 = (0..rows).map(|r| x.row(r)[i] * dy.row(r)[j]).sum();
                assert!((dw[i * n + j] - e).abs() < 1e-9);
            }
        }
        for j in 0..n {
            let e: f64 = (0..rows).map(|r| dy.row(r)[j]).sum();
            assert!((db[j] - e).abs() < 1e-9);
        }
        for r in [0, rows - 1] {
            for i in 0..k {
                let e: f64 = (0..n).map(|j| dy.row(r)[j] * w[i * n + j]).sum();
                assert!((dx.row(r)[i] - e).abs() < 1e-12);
            }
        }
    }
}
