//! Sparse matrices and a sparse Cholesky factorization.
//!
//! `Csr` is a general compressed-sparse-row matrix; `SparseSym` wraps a
//! square `Csr` whose pattern and values are symmetric (both triangles
//! stored). `CholFactor` is an up-looking LL^T factorization driven by the
//! elimination tree, with a reverse Cuthill-McKee fill-reducing permutation.
//! Precision matrices here are sparse by construction (FEM meshes, AR(1)
//! time coupling), so no supernodal machinery is needed.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{CoreError, Result};

/// Compressed sparse row matrix. Column indices within each row are sorted
/// and unique.
#[derive(Debug, Clone)]
pub struct Csr {
    n_rows: usize,
    n_cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    vals: Vec<f64>,
}

impl Csr {
    pub fn from_triplets(
        n_rows: usize,
        n_cols: usize,
        entries: &[(usize, usize, f64)],
    ) -> Result<Self> {
        let mut trip: Vec<(usize, usize, f64)> = Vec::with_capacity(entries.len());
        for &(r, c, v) in entries {
            if r >= n_rows || c >= n_cols {
                return Err(CoreError::dimension(format!(
                    "triplet ({r},{c}) outside {n_rows}x{n_cols}"
                )));
            }
            if !v.is_finite() {
                return Err(CoreError::numerical(format!(
                    "non-finite entry at ({r},{c})"
                )));
            }
            trip.push((r, c, v));
        }
        trip.sort_unstable_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut row_ptr = vec![0usize; n_rows + 1];
        let mut col_idx = Vec::with_capacity(trip.len());
        let mut vals: Vec<f64> = Vec::with_capacity(trip.len());
        for (r, c, v) in trip {
            col_idx.push(c);
            vals.push(v);
            row_ptr[r + 1] = col_idx.len();
        }
        for r in 0..n_rows {
            if row_ptr[r + 1] < row_ptr[r] {
                row_ptr[r + 1] = row_ptr[r];
            }
        }
        let mut m = Csr {
            n_rows,
            n_cols,
            row_ptr,
            col_idx,
            vals,
        };
        m.merge_duplicates();
        Ok(m)
    }

    fn merge_duplicates(&mut self) {
        let mut new_col = Vec::with_capacity(self.col_idx.len());
        let mut new_val = Vec::with_capacity(self.vals.len());
        let mut new_ptr = vec![0usize; self.n_rows + 1];
        for r in 0..self.n_rows {
            let (lo, hi) = (self.row_ptr[r], self.row_ptr[r + 1]);
            let mut i = lo;
            while i < hi {
                let c = self.col_idx[i];
                let mut v = self.vals[i];
                let mut j = i + 1;
                while j < hi && self.col_idx[j] == c {
                    v += self.vals[j];
                    j += 1;
                }
                new_col.push(c);
                new_val.push(v);
                i = j;
            }
            new_ptr[r + 1] = new_col.len();
        }
        self.row_ptr = new_ptr;
        self.col_idx = new_col;
        self.vals = new_val;
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn nnz(&self) -> usize {
        self.col_idx.len()
    }

    pub fn row(&self, r: usize) -> (&[usize], &[f64]) {
        let (lo, hi) = (self.row_ptr[r], self.row_ptr[r + 1]);
        (&self.col_idx[lo..hi], &self.vals[lo..hi])
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let (cols, vals) = self.row(r);
        match cols.binary_search(&c) {
            Ok(k) => vals[k],
            Err(_) => 0.0,
        }
    }

    pub fn diag_matrix(d: &[f64]) -> Self {
        let n = d.len();
        Csr {
            n_rows: n,
            n_cols: n,
            row_ptr: (0..=n).collect(),
            col_idx: (0..n).collect(),
            vals: d.to_vec(),
        }
    }

    pub fn identity(n: usize) -> Self {
        Csr::diag_matrix(&vec![1.0; n])
    }

    pub fn diag(&self) -> Vec<f64> {
        (0..self.n_rows.min(self.n_cols))
            .map(|i| self.get(i, i))
            .collect()
    }

    pub fn scale(&mut self, alpha: f64) {
        for v in &mut self.vals {
            *v *= alpha;
        }
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.n_cols);
        let mut y = vec![0.0; self.n_rows];
        for r in 0..self.n_rows {
            let (cols, vals) = self.row(r);
            let mut acc = 0.0;
            for (c, v) in cols.iter().zip(vals) {
                acc += v * x[*c];
            }
            y[r] = acc;
        }
        y
    }

    pub fn tr_mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.n_rows);
        let mut y = vec![0.0; self.n_cols];
        for r in 0..self.n_rows {
            let (cols, vals) = self.row(r);
            for (c, v) in cols.iter().zip(vals) {
                y[*c] += v * x[r];
            }
        }
        y
    }

    pub fn transpose(&self) -> Csr {
        let mut cnt = vec![0usize; self.n_cols + 1];
        for &c in &self.col_idx {
            cnt[c + 1] += 1;
        }
        for i in 0..self.n_cols {
            cnt[i + 1] += cnt[i];
        }
        let row_ptr = cnt.clone();
        let mut col_idx = vec![0usize; self.nnz()];
        let mut vals = vec![0.0; self.nnz()];
        let mut next = row_ptr.clone();
        for r in 0..self.n_rows {
            let (cols, vs) = self.row(r);
            for (c, v) in cols.iter().zip(vs) {
                let p = next[*c];
                col_idx[p] = r;
                vals[p] = *v;
                next[*c] += 1;
            }
        }
        Csr {
            n_rows: self.n_cols,
            n_cols: self.n_rows,
            row_ptr,
            col_idx,
            vals,
        }
    }

    /// `alpha * self + beta * other`; patterns are merged.
    pub fn add_scaled(&self, alpha: f64, other: &Csr, beta: f64) -> Result<Csr> {
        if self.n_rows != other.n_rows || self.n_cols != other.n_cols {
            return Err(CoreError::dimension(format!(
                "add {}x{} with {}x{}",
                self.n_rows, self.n_cols, other.n_rows, other.n_cols
            )));
        }
        let mut row_ptr = vec![0usize; self.n_rows + 1];
        let mut col_idx = Vec::with_capacity(self.nnz() + other.nnz());
        let mut vals = Vec::with_capacity(self.nnz() + other.nnz());
        for r in 0..self.n_rows {
            let (ca, va) = self.row(r);
            let (cb, vb) = other.row(r);
            let (mut i, mut j) = (0, 0);
            while i < ca.len() || j < cb.len() {
                let (c, v) = if j >= cb.len() || (i < ca.len() && ca[i] < cb[j]) {
                    let out = (ca[i], alpha * va[i]);
                    i += 1;
                    out
                } else if i >= ca.len() || cb[j] < ca[i] {
                    let out = (cb[j], beta * vb[j]);
                    j += 1;
                    out
                } else {
                    let out = (ca[i], alpha * va[i] + beta * vb[j]);
                    i += 1;
                    j += 1;
                    out
                };
                col_idx.push(c);
                vals.push(v);
            }
            row_ptr[r + 1] = col_idx.len();
        }
        Ok(Csr {
            n_rows: self.n_rows,
            n_cols: self.n_cols,
            row_ptr,
            col_idx,
            vals,
        })
    }

    /// Sparse product `self * other` (Gustavson's algorithm, dense
    /// accumulator per row).
    pub fn matmul(&self, other: &Csr) -> Result<Csr> {
        if self.n_cols != other.n_rows {
            return Err(CoreError::dimension(format!(
                "matmul {}x{} with {}x{}",
                self.n_rows, self.n_cols, other.n_rows, other.n_cols
            )));
        }
        let mut acc = vec![0.0; other.n_cols];
        let mut touched: Vec<usize> = Vec::new();
        let mut row_ptr = vec![0usize; self.n_rows + 1];
        let mut col_idx = Vec::new();
        let mut vals = Vec::new();
        for r in 0..self.n_rows {
            touched.clear();
            let (ca, va) = self.row(r);
            for (k, a) in ca.iter().zip(va) {
                let (cb, vb) = other.row(*k);
                for (j, b) in cb.iter().zip(vb) {
                    if acc[*j] == 0.0 && !touched.contains(j) {
                        touched.push(*j);
                    }
                    acc[*j] += a * b;
                }
            }
            touched.sort_unstable();
            for &j in &touched {
                col_idx.push(j);
                vals.push(acc[j]);
                acc[j] = 0.0;
            }
            row_ptr[r + 1] = col_idx.len();
        }
        Ok(Csr {
            n_rows: self.n_rows,
            n_cols: other.n_cols,
            row_ptr,
            col_idx,
            vals,
        })
    }

    /// Kronecker product `self (x) other`.
    pub fn kron(&self, other: &Csr) -> Csr {
        let n_rows = self.n_rows * other.n_rows;
        let n_cols = self.n_cols * other.n_cols;
        let mut row_ptr = vec![0usize; n_rows + 1];
        let mut col_idx = Vec::with_capacity(self.nnz() * other.nnz());
        let mut vals = Vec::with_capacity(self.nnz() * other.nnz());
        for ra in 0..self.n_rows {
            let (ca, va) = self.row(ra);
            for rb in 0..other.n_rows {
                let (cb, vb) = other.row(rb);
                for (ja, a) in ca.iter().zip(va) {
                    for (jb, b) in cb.iter().zip(vb) {
                        col_idx.push(ja * other.n_cols + jb);
                        vals.push(a * b);
                    }
                }
                row_ptr[ra * other.n_rows + rb + 1] = col_idx.len();
            }
        }
        Csr {
            n_rows,
            n_cols,
            row_ptr,
            col_idx,
            vals,
        }
    }

    /// Gram matrix `self^T * self`, returned as a symmetric matrix.
    pub fn gram(&self) -> Result<SparseSym> {
        let at = self.transpose();
        let m = at.matmul(self)?;
        SparseSym::new(m)
    }

    pub fn to_dense(&self) -> nalgebra::DMatrix<f64> {
        let mut d = nalgebra::DMatrix::zeros(self.n_rows, self.n_cols);
        for r in 0..self.n_rows {
            let (cols, vals) = self.row(r);
            for (c, v) in cols.iter().zip(vals) {
                d[(r, *c)] = *v;
            }
        }
        d
    }

    pub fn from_dense(d: &nalgebra::DMatrix<f64>, drop_tol: f64) -> Csr {
        let mut trips = Vec::new();
        for r in 0..d.nrows() {
            for c in 0..d.ncols() {
                if d[(r, c)].abs() > drop_tol {
                    trips.push((r, c, d[(r, c)]));
                }
            }
        }
        Csr::from_triplets(d.nrows(), d.ncols(), &trips).expect("dense conversion")
    }
}

/// Square sparse matrix with symmetric pattern and values (both triangles
/// stored explicitly).
#[derive(Debug, Clone)]
pub struct SparseSym {
    csr: Csr,
}

impl SparseSym {
    pub fn new(csr: Csr) -> Result<Self> {
        if csr.n_rows != csr.n_cols {
            return Err(CoreError::dimension(format!(
                "symmetric matrix must be square, got {}x{}",
                csr.n_rows, csr.n_cols
            )));
        }
        Ok(SparseSym { csr })
    }

    pub fn from_triplets(n: usize, entries: &[(usize, usize, f64)]) -> Result<Self> {
        SparseSym::new(Csr::from_triplets(n, n, entries)?)
    }

    pub fn identity(n: usize) -> Self {
        SparseSym {
            csr: Csr::identity(n),
        }
    }

    pub fn diag_matrix(d: &[f64]) -> Self {
        SparseSym {
            csr: Csr::diag_matrix(d),
        }
    }

    pub fn n(&self) -> usize {
        self.csr.n_rows
    }

    pub fn nnz(&self) -> usize {
        self.csr.nnz()
    }

    pub fn csr(&self) -> &Csr {
        &self.csr
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.csr.get(r, c)
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        self.csr.mul_vec(x)
    }

    pub fn scale(&mut self, alpha: f64) {
        self.csr.scale(alpha)
    }

    pub fn add_scaled(&self, alpha: f64, other: &SparseSym, beta: f64) -> Result<SparseSym> {
        Ok(SparseSym {
            csr: self.csr.add_scaled(alpha, &other.csr, beta)?,
        })
    }

    pub fn kron(&self, other: &SparseSym) -> SparseSym {
        SparseSym {
            csr: self.csr.kron(&other.csr),
        }
    }

    pub fn to_dense(&self) -> nalgebra::DMatrix<f64> {
        self.csr.to_dense()
    }

    /// Quadratic form `x^T Q x`.
    pub fn quad_form(&self, x: &[f64]) -> f64 {
        self.mul_vec(x).iter().zip(x).map(|(a, b)| a * b).sum()
    }

    /// Largest |i - j| over stored entries; used to judge orderings.
    pub fn bandwidth(&self) -> usize {
        let mut b = 0usize;
        for r in 0..self.n() {
            let (cols, _) = self.csr.row(r);
            for &c in cols {
                b = b.max(r.abs_diff(c));
            }
        }
        b
    }

    /// Pattern-preserving permutation `B[i][j] = A[perm[i]][perm[j]]`.
    pub fn permute(&self, perm: &[usize]) -> SparseSym {
        let n = self.n();
        let mut inv = vec![0usize; n];
        for (new, &old) in perm.iter().enumerate() {
            inv[old] = new;
        }
        let mut trips = Vec::with_capacity(self.nnz());
        for r in 0..n {
            let (cols, vals) = self.csr.row(r);
            for (c, v) in cols.iter().zip(vals) {
                trips.push((inv[r], inv[*c], *v));
            }
        }
        SparseSym::from_triplets(n, &trips).expect("permutation preserves shape")
    }
}

/// Reverse Cuthill-McKee ordering: BFS from a pseudo-peripheral node with
/// neighbors visited in increasing degree order, result reversed. Returns
/// `perm` with `perm[new] = old`. Handles disconnected graphs.
pub fn rcm_order(q: &SparseSym) -> Vec<usize> {
    let n = q.n();
    let degree: Vec<usize> = (0..n).map(|r| q.csr.row(r).0.len()).collect();

    let bfs = |start: usize, visited: &mut [bool], order: &mut Vec<usize>| -> usize {
        // Returns the last node visited (a farthest node from start).
        let base = order.len();
        visited[start] = true;
        order.push(start);
        let mut head = base;
        while head < order.len() {
            let u = order[head];
            head += 1;
            let (cols, _) = q.csr.row(u);
            let mut nbrs: Vec<usize> = cols
                .iter()
                .copied()
                .filter(|&v| v != u && !visited[v])
                .collect();
            nbrs.sort_unstable_by_key(|&v| degree[v]);
            for v in nbrs {
                if !visited[v] {
                    visited[v] = true;
                    order.push(v);
                }
            }
        }
        *order.last().unwrap()
    };

    let mut order = Vec::with_capacity(n);
    let mut visited = vec![false; n];
    for s in 0..n {
        if visited[s] {
            continue;
        }
        // Pseudo-peripheral start: BFS to a farthest node, restart there.
        let mut probe_visited = visited.clone();
        let mut probe_order = Vec::new();
        let far = bfs(s, &mut probe_visited, &mut probe_order);
        bfs(far, &mut visited, &mut order);
    }
    order.reverse();
    order
}

/// Sparse Cholesky factor of a permuted SPD matrix: `P Q P^T = L L^T`.
/// `L` is stored column-compressed with the diagonal first in each column.
#[derive(Debug, Clone)]
pub struct CholFactor {
    n: usize,
    /// perm[new] = old.
    perm: Vec<usize>,
    col_ptr: Vec<usize>,
    row_idx: Vec<usize>,
    vals: Vec<f64>,
}

impl CholFactor {
    /// Factor with an RCM fill-reducing ordering.
    pub fn factor(q: &SparseSym) -> Result<CholFactor> {
        let perm = rcm_order(q);
        CholFactor::factor_with_perm(q, perm)
    }

    /// Factor in the natural ordering (useful when the caller knows better,
    /// e.g. to keep a dense intercept column last).
    pub fn factor_natural(q: &SparseSym) -> Result<CholFactor> {
        let perm: Vec<usize> = (0..q.n()).collect();
        CholFactor::factor_with_perm(q, perm)
    }

    pub fn factor_with_perm(q: &SparseSym, perm: Vec<usize>) -> Result<CholFactor> {
        let n = q.n();
        if perm.len() != n {
            return Err(CoreError::dimension(format!(
                "permutation length {} for {n}-dim matrix",
                perm.len()
            )));
        }
        let b = q.permute(&perm);

        // Elimination tree (Liu's algorithm with path compression).
        const NONE: usize = usize::MAX;
        let mut parent = vec![NONE; n];
        let mut ancestor = vec![NONE; n];
        for k in 0..n {
            let (cols, _) = b.csr.row(k);
            for &i0 in cols.iter().take_while(|&&c| c < k) {
                let mut i = i0;
                while ancestor[i] != NONE && ancestor[i] != k {
                    let next = ancestor[i];
                    ancestor[i] = k;
                    i = next;
                }
                if ancestor[i] == NONE {
                    ancestor[i] = k;
                    parent[i] = k;
                }
            }
        }

        // Row pattern of L via traversal up the elimination tree from each
        // below-diagonal entry of row k; s[top..n] holds the pattern in
        // topological order.
        let mut workmark = vec![NONE; n];
        let mut s = vec![0usize; n];
        let mut stack = vec![0usize; n];
        let ereach = |k: usize,
                          b: &SparseSym,
                          parent: &[usize],
                          workmark: &mut [usize],
                          s: &mut [usize],
                          stack: &mut [usize]|
         -> usize {
            let mut top = n;
            workmark[k] = k;
            let (cols, _) = b.csr.row(k);
            for &i0 in cols.iter().take_while(|&&c| c < k) {
                let mut i = i0;
                let mut len = 0;
                while workmark[i] != k {
                    stack[len] = i;
                    len += 1;
                    workmark[i] = k;
                    i = parent[i];
                }
                while len > 0 {
                    len -= 1;
                    top -= 1;
                    s[top] = stack[len];
                }
            }
            top
        };

        // Symbolic pass: column counts of L.
        let mut count = vec![1usize; n]; // diagonal
        for k in 0..n {
            let top = ereach(k, &b, &parent, &mut workmark, &mut s, &mut stack);
            for &j in &s[top..n] {
                count[j] += 1;
            }
        }
        let mut col_ptr = vec![0usize; n + 1];
        for j in 0..n {
            col_ptr[j + 1] = col_ptr[j] + count[j];
        }
        let nnz_l = col_ptr[n];
        let mut row_idx = vec![0usize; nnz_l];
        let mut vals = vec![0.0f64; nnz_l];
        let mut next = col_ptr[..n].to_vec();

        // Numeric pass (up-looking): row k of L solves
        // L[0..k,0..k] y = B[0..k,k], then L[k,k] = sqrt(B[k,k] - y^T y).
        workmark.iter_mut().for_each(|w| *w = NONE);
        let mut x = vec![0.0f64; n];
        for k in 0..n {
            let top = ereach(k, &b, &parent, &mut workmark, &mut s, &mut stack);
            let (cols, cvals) = b.csr.row(k);
            let mut d = 0.0;
            for (&c, &v) in cols.iter().zip(cvals) {
                if c < k {
                    x[c] = v;
                } else if c == k {
                    d = v;
                }
            }
            for &i in &s[top..n] {
                let lki = x[i] / vals[col_ptr[i]];
                x[i] = 0.0;
                for p in col_ptr[i] + 1..next[i] {
                    x[row_idx[p]] -= vals[p] * lki;
                }
                d -= lki * lki;
                row_idx[next[i]] = k;
                vals[next[i]] = lki;
                next[i] += 1;
            }
            if d <= 0.0 || !d.is_finite() {
                return Err(CoreError::numerical(format!(
                    "matrix not positive definite at pivot {k} (d = {d:.3e})"
                )));
            }
            row_idx[next[k]] = k;
            vals[next[k]] = d.sqrt();
            next[k] += 1;
        }

        Ok(CholFactor {
            n,
            perm,
            col_ptr,
            row_idx,
            vals,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn nnz_l(&self) -> usize {
        self.row_idx.len()
    }

    pub fn log_det(&self) -> f64 {
        (0..self.n)
            .map(|j| self.vals[self.col_ptr[j]].ln())
            .sum::<f64>()
            * 2.0
    }

    fn forward(&self, y: &mut [f64]) {
        // L y' = y in place (column-oriented lower solve).
        for j in 0..self.n {
            let yj = y[j] / self.vals[self.col_ptr[j]];
            y[j] = yj;
            for p in self.col_ptr[j] + 1..self.col_ptr[j + 1] {
                y[self.row_idx[p]] -= self.vals[p] * yj;
            }
        }
    }

    fn backward(&self, y: &mut [f64]) {
        // L^T y' = y in place.
        for j in (0..self.n).rev() {
            let mut acc = y[j];
            for p in self.col_ptr[j] + 1..self.col_ptr[j + 1] {
                acc -= self.vals[p] * y[self.row_idx[p]];
            }
            y[j] = acc / self.vals[self.col_ptr[j]];
        }
    }

    /// Solves `Q x = b`.
    pub fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        assert_eq!(rhs.len(), self.n);
        let mut y: Vec<f64> = self.perm.iter().map(|&old| rhs[old]).collect();
        self.forward(&mut y);
        self.backward(&mut y);
        let mut x = vec![0.0; self.n];
        for (new, &old) in self.perm.iter().enumerate() {
            x[old] = y[new];
        }
        x
    }

    /// One draw from N(0, Q^{-1}) via `L^T w = z`, `z ~ N(0, I)`.
    pub fn sample_zero_mean<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let mut w: Vec<f64> = (0..self.n).map(|_| rng.sample(StandardNormal)).collect();
        self.backward(&mut w);
        let mut x = vec![0.0; self.n];
        for (new, &old) in self.perm.iter().enumerate() {
            x[old] = w[new];
        }
        x
    }

    /// Mahalanobis-style quadratic form `b^T Q^{-1} b` without forming the
    /// solution: forward substitution, then squared norm.
    pub fn inv_quad_form(&self, rhs: &[f64]) -> f64 {
        let mut y: Vec<f64> = self.perm.iter().map(|&old| rhs[old]).collect();
        self.forward(&mut y);
        y.iter().map(|v| v * v).sum()
    }
}
