//! Minimal CSR sparse matrix support.
//!
//! The solver only needs a handful of deterministic kernels: triplet
//! assembly, matrix-vector products, transposes and products for the
//! Galerkin coarse operators, and row sweeps for the smoothers. All loops
//! run in fixed index order so repeated runs are bitwise reproducible.

use crate::{Error, Result};

/// Compressed sparse row matrix with `f64` values.
#[derive(Debug, Clone)]
pub struct Csr {
    nrows: usize,
    ncols: usize,
    indptr: Vec<usize>,
    indices: Vec<u32>,
    values: Vec<f64>,
}

impl Csr {
    /// Build from unsorted triplets; duplicate entries are summed.
    pub fn from_triplets(
        nrows: usize,
        ncols: usize,
        triplets: &[(u32, u32, f64)],
    ) -> Result<Csr> {
        for &(r, c, _) in triplets {
            if r as usize >= nrows || c as usize >= ncols {
                return Err(Error::Config(format!(
                    "triplet ({r},{c}) outside {nrows}x{ncols} matrix"
                )));
            }
        }
        // Counting sort by row.
        let mut row_counts = vec![0usize; nrows + 1];
        for &(r, _, _) in triplets {
            row_counts[r as usize + 1] += 1;
        }
        for i in 0..nrows {
            row_counts[i + 1] += row_counts[i];
        }
        let mut order = vec![0usize; triplets.len()];
        let mut next = row_counts.clone();
        for (t, &(r, _, _)) in triplets.iter().enumerate() {
            order[next[r as usize]] = t;
            next[r as usize] += 1;
        }
        // Per row: sort by column, merge duplicates.
        let mut indptr = vec![0usize; nrows + 1];
        let mut indices = Vec::with_capacity(triplets.len());
        let mut values = Vec::with_capacity(triplets.len());
        let mut row_buf: Vec<(u32, f64)> = Vec::new();
        for row in 0..nrows {
            row_buf.clear();
            for &t in &order[row_counts[row]..row_counts[row + 1]] {
                let (_, c, v) = triplets[t];
                row_buf.push((c, v));
            }
            row_buf.sort_by_key(|&(c, _)| c);
            let mut i = 0;
            while i < row_buf.len() {
                let col = row_buf[i].0;
                let mut sum = 0.0;
                while i < row_buf.len() && row_buf[i].0 == col {
                    sum += row_buf[i].1;
                    i += 1;
                }
                indices.push(col);
                values.push(sum);
            }
            indptr[row + 1] = indices.len();
        }
        Ok(Csr { nrows, ncols, indptr, indices, values })
    }

    /// Matrix with a fixed sparsity pattern and zeroed values.
    pub fn from_pattern(nrows: usize, ncols: usize, indptr: Vec<usize>, indices: Vec<u32>) -> Csr {
        let nnz = indices.len();
        debug_assert_eq!(indptr.len(), nrows + 1);
        debug_assert_eq!(*indptr.last().unwrap(), nnz);
        Csr { nrows, ncols, indptr, indices, values: vec![0.0; nnz] }
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn indptr(&self) -> &[usize] {
        &self.indptr
    }

    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Columns and values of one row.
    pub fn row(&self, r: usize) -> (&[u32], &[f64]) {
        let span = self.indptr[r]..self.indptr[r + 1];
        (&self.indices[span.clone()], &self.values[span])
    }

    /// Index into `values` of entry (r, c), if present in the pattern.
    pub fn find(&self, r: usize, c: u32) -> Option<usize> {
        let span = self.indptr[r]..self.indptr[r + 1];
        self.indices[span.clone()]
            .binary_search(&c)
            .ok()
            .map(|k| span.start + k)
    }

    /// y = A x.
    pub fn mul_vec(&self, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.ncols);
        debug_assert_eq!(y.len(), self.nrows);
        for r in 0..self.nrows {
            let mut acc = 0.0;
            for k in self.indptr[r]..self.indptr[r + 1] {
                acc += self.values[k] * x[self.indices[k] as usize];
            }
            y[r] = acc;
        }
    }

    /// Main diagonal (zero where the pattern has no diagonal entry).
    pub fn diagonal(&self) -> Vec<f64> {
        let mut d = vec![0.0; self.nrows.min(self.ncols)];
        for (r, item) in d.iter_mut().enumerate() {
            if let Some(k) = self.find(r, r as u32) {
                *item = self.values[k];
            }
        }
        d
    }

    /// Transposed copy.
    pub fn transpose(&self) -> Csr {
        let mut col_counts = vec![0usize; self.ncols + 1];
        for &c in &self.indices {
            col_counts[c as usize + 1] += 1;
        }
        for i in 0..self.ncols {
            col_counts[i + 1] += col_counts[i];
        }
        let indptr = col_counts.clone();
        let mut indices = vec![0u32; self.nnz()];
        let mut values = vec![0.0; self.nnz()];
        let mut next = col_counts;
        for r in 0..self.nrows {
            for k in self.indptr[r]..self.indptr[r + 1] {
                let c = self.indices[k] as usize;
                indices[next[c]] = r as u32;
                values[next[c]] = self.values[k];
                next[c] += 1;
            }
        }
        Csr { nrows: self.ncols, ncols: self.nrows, indptr, indices, values }
    }

    /// C = A B using a dense accumulator per row; output columns sorted.
    pub fn mul_csr(&self, b: &Csr) -> Csr {
        assert_eq!(self.ncols, b.nrows);
        let n = b.ncols;
        let mut acc = vec![0.0f64; n];
        let mut mark = vec![u32::MAX; n];
        let mut cols: Vec<u32> = Vec::new();
        let mut indptr = Vec::with_capacity(self.nrows + 1);
        let mut indices: Vec<u32> = Vec::new();
        let mut values: Vec<f64> = Vec::new();
        indptr.push(0usize);
        for r in 0..self.nrows {
            cols.clear();
            for k in self.indptr[r]..self.indptr[r + 1] {
                let a_val = self.values[k];
                let mid = self.indices[k] as usize;
                for kb in b.indptr[mid]..b.indptr[mid + 1] {
                    let c = b.indices[kb] as usize;
                    if mark[c] != r as u32 {
                        mark[c] = r as u32;
                        acc[c] = 0.0;
                        cols.push(c as u32);
                    }
                    acc[c] += a_val * b.values[kb];
                }
            }
            cols.sort_unstable();
            for &c in &cols {
                indices.push(c);
                values.push(acc[c as usize]);
            }
            indptr.push(indices.len());
        }
        Csr { nrows: self.nrows, ncols: n, indptr, indices, values }
    }

    /// Force exact symmetry: A <- (A + A')/2. The pattern must already be
    /// structurally symmetric (true for Galerkin products of symmetric A).
    pub fn symmetrize(&mut self) {
        let at = self.transpose();
        debug_assert_eq!(at.indptr, self.indptr);
        debug_assert_eq!(at.indices, self.indices);
        for (v, tv) in self.values.iter_mut().zip(at.values.iter()) {
            *v = 0.5 * (*v + *tv);
        }
    }

    /// Dense copy (small matrices only: coarse-grid solves and tests).
    pub fn to_dense(&self) -> nalgebra::DMatrix<f64> {
        let mut m = nalgebra::DMatrix::zeros(self.nrows, self.ncols);
        for r in 0..self.nrows {
            for k in self.indptr[r]..self.indptr[r + 1] {
                m[(r, self.indices[k] as usize)] = self.values[k];
            }
        }
        m
    }

    /// One damped Jacobi sweep on A u = b: u <- u + w D^-1 (b - A u).
    pub fn jacobi_sweep(&self, b: &[f64], u: &mut [f64], inv_diag: &[f64], omega: f64) {
        let mut r = vec![0.0; self.nrows];
        self.mul_vec(u, &mut r);
        for i in 0..self.nrows {
            u[i] += omega * inv_diag[i] * (b[i] - r[i]);
        }
    }

    /// One symmetric Gauss-Seidel (SSOR, w = 1) sweep on A u = b:
    /// a forward substitution pass followed by a backward pass.
    pub fn ssor_sweep(&self, b: &[f64], u: &mut [f64], inv_diag: &[f64]) {
        for r in 0..self.nrows {
            u[r] = inv_diag[r] * self.gs_row_residual(r, b, u);
        }
        for r in (0..self.nrows).rev() {
            u[r] = inv_diag[r] * self.gs_row_residual(r, b, u);
        }
    }

    /// b[r] minus the off-diagonal part of row r applied to u.
    fn gs_row_residual(&self, r: usize, b: &[f64], u: &[f64]) -> f64 {
        let mut acc = b[r];
        for k in self.indptr[r]..self.indptr[r + 1] {
            let c = self.indices[k] as usize;
            if c != r {
                acc -= self.values[k] * u[c];
            }
        }
        acc
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_csr(rng: &mut ChaCha8Rng, nrows: usize, ncols: usize, nnz: usize) -> Csr {
        let trips: Vec<(u32, u32, f64)> = (0..nnz)
            .map(|_| {
                (
                    rng.random_range(0..nrows as u32),
                    rng.random_range(0..ncols as u32),
                    rng.random_range(-1.0..1.0),
                )
            })
            .collect();
        Csr::from_triplets(nrows, ncols, &trips).unwrap()
    }

    #[test]
    fn triplets_merge_duplicates_and_sort_columns() {
        let a = Csr::from_triplets(2, 3, &[(1, 2, 1.0), (1, 0, 2.0), (1, 2, 0.5), (0, 1, -1.0)])
            .unwrap();
        assert_eq!(a.indptr(), &[0, 1, 3]);
        assert_eq!(a.indices(), &[1, 0, 2]);
        assert_eq!(a.values(), &[-1.0, 2.0, 1.5]);
    }

    #[test]
    fn triplet_out_of_bounds_is_rejected() {
        assert!(Csr::from_triplets(2, 2, &[(2, 0, 1.0)]).is_err());
    }

    #[test]
    fn mul_vec_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random_csr(&mut rng, 17, 11, 60);
        let x: Vec<f64> = (0..11).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut y = vec![0.0; 17];
        a.mul_vec(&x, &mut y);
        let dense = a.to_dense() * nalgebra::DVector::from_column_slice(&x);
        for i in 0..17 {
            assert!((y[i] - dense[i]).abs() < 1e-14);
        }
    }

    #[test]
    fn transpose_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_csr(&mut rng, 13, 9, 40);
        let att = a.transpose().transpose();
        assert_eq!(a.indptr(), att.indptr());
        assert_eq!(a.indices(), att.indices());
        assert_eq!(a.values(), att.values());
        assert_eq!(a.transpose().to_dense(), a.to_dense().transpose());
    }

    #[test]
    fn matmul_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random_csr(&mut rng, 8, 12, 40);
        let b = random_csr(&mut rng, 12, 6, 30);
        let c = a.mul_csr(&b);
        let dense = a.to_dense() * b.to_dense();
        assert!((c.to_dense() - dense).norm() < 1e-13);
    }

    #[test]
    fn ssor_and_jacobi_converge_on_spd_system() {
        // Small diagonally dominant SPD matrix: sweeps must reduce the error.
        let n = 20;
        let mut trips = Vec::new();
        for i in 0..n as u32 {
            trips.push((i, i, 4.0));
            if i + 1 < n as u32 {
                trips.push((i, i + 1, -1.0));
                trips.push((i + 1, i, -1.0));
            }
        }
        let a = Csr::from_triplets(n, n, &trips).unwrap();
        let inv_diag: Vec<f64> = a.diagonal().iter().map(|d| 1.0 / d).collect();
        let b = vec![1.0; n];
        let resid = |u: &[f64]| {
            let mut r = vec![0.0; n];
            a.mul_vec(u, &mut r);
            r.iter().zip(&b).map(|(ri, bi)| (bi - ri).powi(2)).sum::<f64>().sqrt()
        };
        let mut u = vec![0.0; n];
        let r0 = resid(&u);
        for _ in 0..5 {
            a.ssor_sweep(&b, &mut u, &inv_diag);
        }
        assert!(resid(&u) < 0.1 * r0);
        let mut u = vec![0.0; n];
        for _ in 0..10 {
            a.jacobi_sweep(&b, &mut u, &inv_diag, 0.5);
        }
        assert!(resid(&u) < 0.5 * r0);
    }

    #[test]
    fn symmetrize_makes_galerkin_product_exactly_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let p = random_csr(&mut rng, 15, 6, 35);
        // A = R' R + I is SPD with symmetric pattern.
        let r = random_csr(&mut rng, 15, 15, 80);
        let mut a = r.transpose().mul_csr(&r);
        for i in 0..15 {
            if let Some(k) = a.find(i, i as u32) {
                a.values_mut()[k] += 1.0;
            }
        }
        let mut coarse = p.transpose().mul_csr(&a).mul_csr(&p);
        coarse.symmetrize();
        let d = coarse.to_dense();
        assert_eq!(d, d.transpose());
    }
}
