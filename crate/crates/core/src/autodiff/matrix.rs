use rayon::prelude::*;

use super::Real;

/// Rows handled per parallel task. Fixed so that reductions have the same
/// association order regardless of how many threads the pool has.
const ROW_CHUNK: usize = 512;

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<Real>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, value: Real) -> Self {
        Self { rows, cols, data: vec![value; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<Real>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length does not match {rows}x{cols}");
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<Real>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self { rows: rows.len(), cols, data }
    }

    pub fn scalar(value: Real) -> Self {
        Self { rows: 1, cols: 1, data: vec![value] }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> Real {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: Real) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[Real] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [Real] {
        let c = self.cols;
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn map(&self, f: impl Fn(Real) -> Real + Sync) -> Self {
        Self { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn add_assign(&mut self, other: &Matrix) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// `self · rhs`.
    pub fn matmul(&self, rhs: &Matrix) -> Matrix {
        assert_eq!(self.cols, rhs.rows, "matmul shape mismatch");
        let (n, k, m) = (self.rows, self.cols, rhs.cols);
        let mut out = Matrix::zeros(n, m);
        if n == 0 || m == 0 {
            return out;
        }
        out.data.par_chunks_mut(ROW_CHUNK * m).enumerate().for_each(|(ci, chunk)| {
            let r0 = ci * ROW_CHUNK;
            let rows = chunk.len() / m;
            gemm(rows, k, m, &self.data[r0 * k..(r0 + rows) * k], k, 1, &rhs.data, m, 1, chunk, m);
        });
        out
    }

    /// `self · rhsᵀ`.
    pub fn matmul_transposed(&self, rhs: &Matrix) -> Matrix {
        assert_eq!(self.cols, rhs.cols, "matmul_transposed shape mismatch");
        let (n, k, m) = (self.rows, self.cols, rhs.rows);
        let mut out = Matrix::zeros(n, m);
        if n == 0 || m == 0 {
            return out;
        }
        out.data.par_chunks_mut(ROW_CHUNK * m).enumerate().for_each(|(ci, chunk)| {
            let r0 = ci * ROW_CHUNK;
            let rows = chunk.len() / m;
            gemm(rows, k, m, &self.data[r0 * k..(r0 + rows) * k], k, 1, &rhs.data, 1, k, chunk, m);
        });
        out
    }

    /// `selfᵀ · rhs`, reduced over rows in fixed-size chunks summed in order.
    pub fn transposed_matmul(&self, rhs: &Matrix) -> Matrix {
        assert_eq!(self.rows, rhs.rows, "transposed_matmul shape mismatch");
        let (n, k, m) = (self.rows, self.cols, rhs.cols);
        let partials: Vec<Vec<Real>> = (0..n.div_ceil(ROW_CHUNK))
            .into_par_iter()
            .map(|ci| {
                let r0 = ci * ROW_CHUNK;
                let rows = ROW_CHUNK.min(n - r0);
                let mut part = vec![0.0; k * m];
                gemm(
                    k,
                    rows,
                    m,
                    &self.data[r0 * k..(r0 + rows) * k],
                    1,
                    k,
                    &rhs.data[r0 * m..(r0 + rows) * m],
                    m,
                    1,
                    &mut part,
                    m,
                );
                part
            })
            .collect();
        let mut out = Matrix::zeros(k, m);
        for part in partials {
            for (o, p) in out.data.iter_mut().zip(part) {
                *o += p;
            }
        }
        out
    }
}

#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[Real],
    rsa: usize,
    csa: usize,
    b: &[Real],
    rsb: usize,
    csb: usize,
    c: &mut [Real],
    rsc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: callers pass slices that cover the strided extents described
    // by (m, k, n) and the row/column strides.
    unsafe {
        #[cfg(not(feature = "f32"))]
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            0.0,
            c.as_mut_ptr(),
            rsc as isize,
            1,
        );
        #[cfg(feature = "f32")]
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            0.0,
            c.as_mut_ptr(),
            rsc as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &Matrix, b: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(a.rows, b.cols);
        for i in 0..a.rows {
            for j in 0..b.cols {
                let mut s = 0.0;
                for t in 0..a.cols {
                    s += a.get(i, t) * b.get(t, j);
                }
                out.set(i, j, s);
            }
        }
        out
    }

    fn ramp(rows: usize, cols: usize, seed: Real) -> Matrix {
        let data = (0..rows * cols).map(|i| ((i as Real + seed) * 0.37).sin()).collect();
        Matrix::from_vec(rows, cols, data)
    }

    #[test]
    fn products_match_naive_loops() {
        let a = ramp(1100, 7, 0.3);
        let b = ramp(7, 5, 1.1);
        let want = naive(&a, &b);
        let got = a.matmul(&b);
        for (x, y) in got.data.iter().zip(&want.data) {
            assert!((x - y).abs() < 1e-10);
        }
        let bt = b.transpose();
        let got_t = a.matmul_transposed(&bt);
        for (x, y) in got_t.data.iter().zip(&want.data) {
            assert!((x - y).abs() < 1e-10);
        }
        let g = ramp(1100, 5, 2.0);
        let want_tm = naive(&a.transpose(), &g);
        let got_tm = a.transposed_matmul(&g);
        for (x, y) in got_tm.data.iter().zip(&want_tm.data) {
            assert!((x - y).abs() < 1e-8);
        }
    }
}
