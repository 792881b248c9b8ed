//! Sparse symmetric matrices and an up-looking sparse Cholesky factorization
//! with selected inversion (Takahashi recursions).
//!
//! Matrices store their upper triangle in compressed-column form. The
//! factorization uses the natural ordering, so callers order unknowns so that
//! the fill stays small (temporally local latent states first, dense
//! fixed effects last).

use std::sync::Arc;

/// Symmetric matrix; only entries with `row <= col` are stored.
#[derive(Clone, Debug)]
pub struct SparseSym {
    n: usize,
    colptr: Arc<Vec<usize>>,
    rowidx: Arc<Vec<usize>>,
    values: Vec<f64>,
}

impl SparseSym {
    /// Zero matrix on the union of the given positions (either triangle).
    pub fn with_pattern(n: usize, entries: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let mut cols: Vec<Vec<usize>> = vec![Vec::new(); n];
        for (i, j) in entries {
            let (r, c) = if i <= j { (i, j) } else { (j, i) };
            assert!(c < n, "entry ({i}, {j}) outside {n}x{n}");
            cols[c].push(r);
        }
        let mut colptr = Vec::with_capacity(n + 1);
        let mut rowidx = Vec::new();
        colptr.push(0);
        for (c, rows) in cols.iter_mut().enumerate() {
            rows.push(c);
            rows.sort_unstable();
            rows.dedup();
            rowidx.extend_from_slice(rows);
            colptr.push(rowidx.len());
        }
        let nnz = rowidx.len();
        SparseSym {
            n,
            colptr: Arc::new(colptr),
            rowidx: Arc::new(rowidx),
            values: vec![0.0; nnz],
        }
    }

    pub fn from_dense(a: &nalgebra::DMatrix<f64>) -> Self {
        let n = a.nrows();
        let entries = (0..n).flat_map(|j| (0..=j).map(move |i| (i, j)));
        let mut m = Self::with_pattern(n, entries.filter(|&(i, j)| a[(i, j)] != 0.0 || i == j));
        for j in 0..n {
            for p in m.colptr[j]..m.colptr[j + 1] {
                let i = m.rowidx[p];
                m.values[p] = a[(i, j)];
            }
        }
        m
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Storage slot of entry `(i, j)` (either triangle), if it is in the pattern.
    pub fn slot(&self, i: usize, j: usize) -> Option<usize> {
        let (r, c) = if i <= j { (i, j) } else { (j, i) };
        let rows = &self.rowidx[self.colptr[c]..self.colptr[c + 1]];
        rows.binary_search(&r).ok().map(|k| self.colptr[c] + k)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn clear(&mut self) {
        self.values.iter_mut().for_each(|v| *v = 0.0);
    }

    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        let s = self
            .slot(i, j)
            .unwrap_or_else(|| panic!("({i}, {j}) not in pattern"));
        self.values[s] += v;
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.slot(i, j).map_or(0.0, |s| self.values[s])
    }

    /// y = A x using both triangles.
    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        for j in 0..self.n {
            for p in self.colptr[j]..self.colptr[j + 1] {
                let i = self.rowidx[p];
                let v = self.values[p];
                y[i] += v * x[j];
                if i != j {
                    y[j] += v * x[i];
                }
            }
        }
        y
    }

    /// x' A x
    pub fn quad_form(&self, x: &[f64]) -> f64 {
        let mut s = 0.0;
        for j in 0..self.n {
            for p in self.colptr[j]..self.colptr[j + 1] {
                let i = self.rowidx[p];
                let v = self.values[p] * x[i] * x[j];
                s += if i == j { v } else { 2.0 * v };
            }
        }
        s
    }

    pub fn to_dense(&self) -> nalgebra::DMatrix<f64> {
        let mut a = nalgebra::DMatrix::zeros(self.n, self.n);
        for j in 0..self.n {
            for p in self.colptr[j]..self.colptr[j + 1] {
                let i = self.rowidx[p];
                a[(i, j)] = self.values[p];
                a[(j, i)] = self.values[p];
            }
        }
        a
    }
}

/// Elimination tree and column layout of the Cholesky factor for one pattern.
#[derive(Clone, Debug)]
pub struct SymbolicCholesky {
    n: usize,
    parent: Vec<usize>,
    lp: Arc<Vec<usize>>,
}

const NONE: usize = usize::MAX;

/// Nonzero pattern of row `k` of L, written to `stack[top..]` in topological order.
fn ereach(
    a: &SparseSym,
    k: usize,
    parent: &[usize],
    stack: &mut [usize],
    mark: &mut [usize],
    stamp: usize,
) -> usize {
    let n = a.n;
    let mut top = n;
    mark[k] = stamp;
    for p in a.colptr[k]..a.colptr[k + 1] {
        let mut i = a.rowidx[p];
        if i > k {
            continue;
        }
        let mut len = 0;
        while mark[i] != stamp {
            stack[len] = i;
            len += 1;
            mark[i] = stamp;
            i = parent[i];
        }
        while len > 0 {
            len -= 1;
            top -= 1;
            stack[top] = stack[len];
        }
    }
    top
}

impl SymbolicCholesky {
    pub fn analyze(a: &SparseSym) -> Self {
        let n = a.n;
        // elimination tree with path compression through `ancestor`
        let mut parent = vec![NONE; n];
        let mut ancestor = vec![NONE; n];
        for k in 0..n {
            for p in a.colptr[k]..a.colptr[k + 1] {
                let mut i = a.rowidx[p];
                while i != NONE && i < k {
                    let next = ancestor[i];
                    ancestor[i] = k;
                    if next == NONE {
                        parent[i] = k;
                    }
                    i = next;
                }
            }
        }
        let mut counts = vec![1usize; n];
        let mut stack = vec![0; n];
        let mut mark = vec![0usize; n];
        for k in 0..n {
            let top = ereach(a, k, &parent, &mut stack, &mut mark, k + 1);
            for &i in &stack[top..n] {
                counts[i] += 1;
            }
        }
        let mut lp = Vec::with_capacity(n + 1);
        lp.push(0);
        let mut acc = 0;
        for c in counts {
            acc += c;
            lp.push(acc);
        }
        SymbolicCholesky {
            n,
            parent,
            lp: Arc::new(lp),
        }
    }

    pub fn factor_nnz(&self) -> usize {
        self.lp[self.n]
    }

    /// Numeric factorization A = L L'. On failure returns the column whose
    /// pivot was not positive.
    pub fn factor(&self, a: &SparseSym) -> Result<CholFactor, usize> {
        let n = self.n;
        assert_eq!(a.n, n, "pattern dimension changed");
        let nnz = self.factor_nnz();
        let mut li = vec![0usize; nnz];
        let mut lx = vec![0.0; nnz];
        let mut next: Vec<usize> = self.lp[..n].to_vec();
        let mut x = vec![0.0; n];
        let mut stack = vec![0; n];
        let mut mark = vec![0usize; n];
        for k in 0..n {
            let top = ereach(a, k, &self.parent, &mut stack, &mut mark, k + 1);
            x[k] = 0.0;
            for p in a.colptr[k]..a.colptr[k + 1] {
                let i = a.rowidx[p];
                if i <= k {
                    x[i] = a.values[p];
                }
            }
            let mut d = x[k];
            x[k] = 0.0;
            for &i in &stack[top..n] {
                let lki = x[i] / lx[self.lp[i]];
                x[i] = 0.0;
                for p in self.lp[i] + 1..next[i] {
                    x[li[p]] -= lx[p] * lki;
                }
                d -= lki * lki;
                let p = next[i];
                next[i] += 1;
                li[p] = k;
                lx[p] = lki;
            }
            if !(d > 0.0) || !d.is_finite() {
                return Err(k);
            }
            let p = next[k];
            next[k] += 1;
            li[p] = k;
            lx[p] = d.sqrt();
        }
        Ok(CholFactor {
            n,
            lp: Arc::clone(&self.lp),
            li,
            lx,
        })
    }
}

/// Lower-triangular Cholesky factor in compressed-column form; the diagonal
/// is the first entry of each column and row indices increase within a column.
#[derive(Clone, Debug)]
pub struct CholFactor {
    n: usize,
    lp: Arc<Vec<usize>>,
    li: Vec<usize>,
    lx: Vec<f64>,
}

impl CholFactor {
    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.lx.len()
    }

    pub fn log_det(&self) -> f64 {
        (0..self.n).map(|j| 2.0 * self.lx[self.lp[j]].ln()).sum()
    }

    /// In place: b <- L⁻¹ b
    pub fn solve_l(&self, b: &mut [f64]) {
        for j in 0..self.n {
            let start = self.lp[j];
            b[j] /= self.lx[start];
            let bj = b[j];
            for p in start + 1..self.lp[j + 1] {
                b[self.li[p]] -= self.lx[p] * bj;
            }
        }
    }

    /// In place: b <- L'⁻¹ b
    pub fn solve_lt(&self, b: &mut [f64]) {
        for j in (0..self.n).rev() {
            let start = self.lp[j];
            let mut s = b[j];
            for p in start + 1..self.lp[j + 1] {
                s -= self.lx[p] * b[self.li[p]];
            }
            b[j] = s / self.lx[start];
        }
    }

    /// In place: b <- A⁻¹ b
    pub fn solve(&self, b: &mut [f64]) {
        self.solve_l(b);
        self.solve_lt(b);
    }

    /// Entries of A⁻¹ on the pattern of L (Takahashi recursions).
    pub fn selected_inverse(&self) -> SelectedInverse {
        let n = self.n;
        let lp = &self.lp;
        let li = &self.li;
        let lx = &self.lx;
        let mut sx = vec![0.0; lx.len()];
        let mut pos = vec![NONE; n];
        let mut acc = vec![0.0; n];
        for j in (0..n).rev() {
            let start = lp[j];
            let end = lp[j + 1];
            let ljj = lx[start];
            for q in start + 1..end {
                pos[li[q]] = q;
                acc[li[q]] = 0.0;
            }
            for q in start + 1..end {
                let k = li[q];
                let lkj = lx[q];
                let kstart = lp[k];
                acc[k] += lkj * sx[kstart];
                for p in kstart + 1..lp[k + 1] {
                    let i = li[p];
                    let qi = pos[i];
                    if qi != NONE {
                        let sik = sx[p];
                        acc[i] += lkj * sik;
                        acc[k] += lx[qi] * sik;
                    }
                }
            }
            let mut diag_sum = 0.0;
            for q in start + 1..end {
                let i = li[q];
                sx[q] = -acc[i] / ljj;
                diag_sum += lx[q] * sx[q];
                pos[i] = NONE;
            }
            sx[start] = 1.0 / (ljj * ljj) - diag_sum / ljj;
        }
        SelectedInverse {
            lp: Arc::clone(&self.lp),
            li: self.li.clone(),
            sx,
        }
    }
}

/// Covariance entries on the factor's pattern.
#[derive(Clone, Debug)]
pub struct SelectedInverse {
    lp: Arc<Vec<usize>>,
    li: Vec<usize>,
    sx: Vec<f64>,
}

impl SelectedInverse {
    pub fn diag(&self) -> Vec<f64> {
        (0..self.lp.len() - 1).map(|j| self.sx[self.lp[j]]).collect()
    }

    /// Entry (i, j) if it lies on the factor pattern.
    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        let (r, c) = if i >= j { (i, j) } else { (j, i) };
        let rows = &self.li[self.lp[c]..self.lp[c + 1]];
        rows.binary_search(&r).ok().map(|k| self.sx[self.lp[c] + k])
    }
}
