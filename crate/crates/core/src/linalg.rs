//! Sparse symmetric positive definite systems: CSR storage with a fixed
//! pattern, envelope Cholesky under reverse Cuthill-McKee ordering for small
//! systems and IC(0)-preconditioned conjugate gradients for large ones.

use std::collections::VecDeque;

use crate::error::{Error, Result};

/// Square sparse matrix with a fixed, symmetric, sorted pattern that always
/// includes the diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    pub n: usize,
    pub row_ptr: Vec<usize>,
    pub col_idx: Vec<usize>,
    pub values: Vec<f64>,
}

impl CsrMatrix {
    /// Builds the pattern from undirected edges; all values start at zero.
    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Self {
        let mut adj: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
        for &(a, b) in edges {
            if a != b {
                adj[a].push(b);
                adj[b].push(a);
            }
        }
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut col_idx = Vec::new();
        row_ptr.push(0);
        for row in &mut adj {
            row.sort_unstable();
            row.dedup();
            col_idx.extend_from_slice(row);
            row_ptr.push(col_idx.len());
        }
        let nnz = col_idx.len();
        Self {
            n,
            row_ptr,
            col_idx,
            values: vec![0.0; nnz],
        }
    }

    /// Storage position of entry `(i, j)`; panics if it is not in the pattern.
    pub fn position(&self, i: usize, j: usize) -> usize {
        let row = &self.col_idx[self.row_ptr[i]..self.row_ptr[i + 1]];
        self.row_ptr[i] + row.binary_search(&j).expect("entry outside sparsity pattern")
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let row = &self.col_idx[self.row_ptr[i]..self.row_ptr[i + 1]];
        match row.binary_search(&j) {
            Ok(k) => self.values[self.row_ptr[i] + k],
            Err(_) => 0.0,
        }
    }

    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        for i in 0..self.n {
            let mut acc = 0.0;
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                acc += self.values[k] * x[self.col_idx[k]];
            }
            y[i] = acc;
        }
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut d = vec![vec![0.0; self.n]; self.n];
        for (i, row) in d.iter_mut().enumerate() {
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                row[self.col_idx[k]] += self.values[k];
            }
        }
        d
    }

    pub fn clear(&mut self) {
        self.values.iter_mut().for_each(|v| *v = 0.0);
    }

    fn neighbors(&self, i: usize) -> &[usize] {
        &self.col_idx[self.row_ptr[i]..self.row_ptr[i + 1]]
    }
}

/// Reverse Cuthill-McKee ordering; `perm[new] = old`.
pub fn rcm_ordering(a: &CsrMatrix) -> Vec<usize> {
    let n = a.n;
    let degree: Vec<usize> = (0..n).map(|i| a.neighbors(i).len()).collect();
    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(n);
    let bfs = |start: usize, visited: &mut Vec<bool>, order: &mut Vec<usize>| -> usize {
        let mut queue = VecDeque::new();
        queue.push_back(start);
        visited[start] = true;
        let mut last = start;
        while let Some(v) = queue.pop_front() {
            order.push(v);
            last = v;
            let mut nb: Vec<usize> = a
                .neighbors(v)
                .iter()
                .copied()
                .filter(|&w| !visited[w])
                .collect();
            nb.sort_by_key(|&w| (degree[w], w));
            for w in nb {
                visited[w] = true;
                queue.push_back(w);
            }
        }
        last
    };
    for seed in 0..n {
        if visited[seed] {
            continue;
        }
        // one pass to find a far node, then order from there
        let mut probe_visited = visited.clone();
        let mut probe = Vec::new();
        let far = bfs(seed, &mut probe_visited, &mut probe);
        bfs(far, &mut visited, &mut order);
    }
    order.reverse();
    order
}

/// Envelope (profile) Cholesky factor of `P A P^T`.
#[derive(Debug, Clone)]
struct EnvelopeCholesky {
    perm: Vec<usize>,
    inv: Vec<usize>,
    first: Vec<usize>,
    start: Vec<usize>,
    data: Vec<f64>,
}

impl EnvelopeCholesky {
    fn symbolic(a: &CsrMatrix) -> Self {
        let perm = rcm_ordering(a);
        let mut inv = vec![0; a.n];
        for (new, &old) in perm.iter().enumerate() {
            inv[old] = new;
        }
        let mut first = vec![0; a.n];
        for (new, &old) in perm.iter().enumerate() {
            first[new] = a
                .neighbors(old)
                .iter()
                .map(|&c| inv[c])
                .min()
                .unwrap()
                .min(new);
        }
        let mut start = Vec::with_capacity(a.n + 1);
        let mut total = 0;
        for i in 0..a.n {
            start.push(total);
            total += i - first[i] + 1;
        }
        start.push(total);
        Self {
            perm,
            inv,
            first,
            start,
            data: vec![0.0; total],
        }
    }

    fn factor(&mut self, a: &CsrMatrix) -> Result<()> {
        self.data.iter_mut().for_each(|v| *v = 0.0);
        for old in 0..a.n {
            let i = self.inv[old];
            for k in a.row_ptr[old]..a.row_ptr[old + 1] {
                let j = self.inv[a.col_idx[k]];
                if j <= i {
                    self.data[self.start[i] + j - self.first[i]] += a.values[k];
                }
            }
        }
        for i in 0..a.n {
            let fi = self.first[i];
            let si = self.start[i];
            for j in fi..i {
                let fj = self.first[j];
                let sj = self.start[j];
                let lo = fi.max(fj);
                let mut s = self.data[si + j - fi];
                let ri = &self.data[si + lo - fi..si + j - fi];
                let rj = &self.data[sj + lo - fj..sj + j - fj];
                s -= dot(ri, rj);
                let djj = self.data[sj + j - fj];
                self.data[si + j - fi] = s / djj;
            }
            let row = &self.data[si..si + i - fi];
            let d = self.data[si + i - fi] - dot(row, row);
            if !(d > 0.0) || !d.is_finite() {
                return Err(Error::LinearSolver(format!(
                    "non-positive pivot {d:e} at row {i} of {}",
                    a.n
                )));
            }
            self.data[si + i - fi] = d.sqrt();
        }
        Ok(())
    }

    fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = b.len();
        let mut y: Vec<f64> = self.perm.iter().map(|&old| b[old]).collect();
        for i in 0..n {
            let fi = self.first[i];
            let si = self.start[i];
            let s = y[i] - dot(&self.data[si..si + i - fi], &y[fi..i]);
            y[i] = s / self.data[si + i - fi];
        }
        for i in (0..n).rev() {
            let fi = self.first[i];
            let si = self.start[i];
            y[i] /= self.data[si + i - fi];
            let yi = y[i];
            for j in fi..i {
                y[j] -= self.data[si + j - fi] * yi;
            }
        }
        let mut x = vec![0.0; n];
        for (new, &old) in self.perm.iter().enumerate() {
            x[old] = y[new];
        }
        x
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    /// Systems below this size are factorized directly.
    pub direct_limit: usize,
    /// Relative residual target of the iterative solver.
    pub rel_tol: f64,
    pub max_iter: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            direct_limit: 10_000,
            rel_tol: 1e-12,
            max_iter: 20_000,
        }
    }
}

/// Solver bound to one sparsity pattern; the symbolic work is done once.
#[derive(Debug, Clone)]
pub struct SpdSolver {
    opts: SolverOptions,
    direct: Option<EnvelopeCholesky>,
    iterative: Option<(CsrMatrix, Option<Ic0>)>,
}

impl SpdSolver {
    pub fn new(pattern: &CsrMatrix, opts: SolverOptions) -> Self {
        let direct = (pattern.n < opts.direct_limit).then(|| EnvelopeCholesky::symbolic(pattern));
        Self {
            opts,
            direct,
            iterative: None,
        }
    }

    /// Factorizes (or preconditions) `a` for repeated solves.
    pub fn factor(&mut self, a: &CsrMatrix) -> Result<()> {
        match &mut self.direct {
            Some(ch) => ch.factor(a),
            None => {
                self.iterative = Some((a.clone(), ic0(a)));
                Ok(())
            }
        }
    }

    pub fn solve_factored(&self, b: &[f64]) -> Result<Vec<f64>> {
        let x = match (&self.direct, &self.iterative) {
            (Some(ch), _) => ch.solve(b),
            (None, Some((a, pre))) => pcg(a, pre.as_ref(), b, self.opts.rel_tol, self.opts.max_iter)?,
            (None, None) => return Err(Error::LinearSolver("solve before factor".into())),
        };
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::LinearSolver("non-finite solution".into()));
        }
        Ok(x)
    }

    pub fn solve(&mut self, a: &CsrMatrix, b: &[f64]) -> Result<Vec<f64>> {
        self.factor(a)?;
        self.solve_factored(b)
    }

    /// Solves a system whose only null space is the constant vector by
    /// fixing unknown `pin` to zero.
    pub fn solve_pinned(&mut self, a: &CsrMatrix, b: &[f64], pin: usize) -> Result<Vec<f64>> {
        let mut m = a.clone();
        for k in m.row_ptr[pin]..m.row_ptr[pin + 1] {
            let j = m.col_idx[k];
            if j == pin {
                m.values[k] = 1.0;
            } else {
                m.values[k] = 0.0;
                let kk = m.position(j, pin);
                m.values[kk] = 0.0;
            }
        }
        let mut rhs = b.to_vec();
        rhs[pin] = 0.0;
        self.solve(&m, &rhs)
    }
}

type Ic0 = (Vec<usize>, Vec<usize>, Vec<f64>);

/// Incomplete Cholesky with zero fill on the lower triangle of `a`.
fn ic0(a: &CsrMatrix) -> Option<Ic0> {
    let n = a.n;
    let mut row_ptr = vec![0];
    let mut cols = Vec::new();
    let mut vals = Vec::new();
    for i in 0..n {
        for k in a.row_ptr[i]..a.row_ptr[i + 1] {
            if a.col_idx[k] <= i {
                cols.push(a.col_idx[k]);
                vals.push(a.values[k]);
            }
        }
        row_ptr.push(cols.len());
    }
    let mut diag_pos = vec![0; n];
    for i in 0..n {
        diag_pos[i] = row_ptr[i + 1] - 1;
    }
    for i in 0..n {
        let (ri0, ri1) = (row_ptr[i], row_ptr[i + 1]);
        for p in ri0..ri1 - 1 {
            let j = cols[p];
            // L_ij = (A_ij - sum_k L_ik L_jk) / L_jj over shared k < j
            let (rj0, rj1) = (row_ptr[j], row_ptr[j + 1] - 1);
            let (mut a_, mut b_) = (ri0, rj0);
            let mut s = vals[p];
            while a_ < p && b_ < rj1 {
                match cols[a_].cmp(&cols[b_]) {
                    std::cmp::Ordering::Less => a_ += 1,
                    std::cmp::Ordering::Greater => b_ += 1,
                    std::cmp::Ordering::Equal => {
                        s -= vals[a_] * vals[b_];
                        a_ += 1;
                        b_ += 1;
                    }
                }
            }
            vals[p] = s / vals[diag_pos[j]];
        }
        let mut d = vals[ri1 - 1];
        for p in ri0..ri1 - 1 {
            d -= vals[p] * vals[p];
        }
        if !(d > 0.0) {
            return None;
        }
        vals[ri1 - 1] = d.sqrt();
    }
    Some((row_ptr, cols, vals))
}

fn pcg(a: &CsrMatrix, factor: Option<&Ic0>, b: &[f64], rel_tol: f64, max_iter: usize) -> Result<Vec<f64>> {
    let n = a.n;
    let bnorm = dot(b, b).sqrt();
    let mut x = vec![0.0; n];
    if bnorm == 0.0 {
        return Ok(x);
    }
    let diag: Vec<f64> = (0..n).map(|i| a.get(i, i)).collect();
    let precond = |r: &[f64], z: &mut [f64]| match factor {
        Some((rp, cols, vals)) => {
            for i in 0..n {
                let mut s = r[i];
                for p in rp[i]..rp[i + 1] - 1 {
                    s -= vals[p] * z[cols[p]];
                }
                z[i] = s / vals[rp[i + 1] - 1];
            }
            for i in (0..n).rev() {
                z[i] /= vals[rp[i + 1] - 1];
                let zi = z[i];
                for p in rp[i]..rp[i + 1] - 1 {
                    z[cols[p]] -= vals[p] * zi;
                }
            }
        }
        None => {
            for i in 0..n {
                z[i] = r[i] / diag[i];
            }
        }
    };
    let mut r = b.to_vec();
    let mut z = vec![0.0; n];
    precond(&r, &mut z);
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut ap = vec![0.0; n];
    for _ in 0..max_iter {
        a.matvec(&p, &mut ap);
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            return Err(Error::LinearSolver(format!("CG breakdown, p'Ap = {pap:e}")));
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        if dot(&r, &r).sqrt() <= rel_tol * bnorm {
            return Ok(x);
        }
        precond(&r, &mut z);
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    Err(Error::LinearSolver(format!(
        "CG did not reach relative residual {rel_tol:e} in {max_iter} iterations"
    )))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// 2-D five-point Laplacian plus a diagonal shift.
    fn laplacian(nx: usize, ny: usize, shift: f64) -> CsrMatrix {
        let mut edges = Vec::new();
        for j in 0..ny {
            for i in 0..nx {
                let c = j * nx + i;
                if i + 1 < nx {
                    edges.push((c, c + 1));
                }
                if j + 1 < ny {
                    edges.push((c, c + nx));
                }
            }
        }
        let mut a = CsrMatrix::from_edges(nx * ny, &edges);
        for &(p, q) in &edges {
            let w = 1.0 + ((p * 7 + q * 3) % 5) as f64;
            for (i, j, v) in [(p, p, w), (q, q, w), (p, q, -w), (q, p, -w)] {
                let k = a.position(i, j);
                a.values[k] += v;
            }
        }
        for i in 0..nx * ny {
            let k = a.position(i, i);
            a.values[k] += shift;
        }
        a
    }

    fn residual(a: &CsrMatrix, x: &[f64], b: &[f64]) -> f64 {
        let mut ax = vec![0.0; a.n];
        a.matvec(x, &mut ax);
        let r: f64 = ax.iter().zip(b).map(|(p, q)| (p - q).powi(2)).sum();
        r.sqrt() / dot(b, b).sqrt()
    }

    #[test]
    fn direct_and_iterative_agree() {
        let a = laplacian(13, 9, 0.01);
        let b: Vec<f64> = (0..a.n).map(|i| ((i * 37) % 11) as f64 - 5.0).collect();
        let mut d = SpdSolver::new(&a, SolverOptions::default());
        let xd = d.solve(&a, &b).unwrap();
        let mut it = SpdSolver::new(
            &a,
            SolverOptions {
                direct_limit: 0,
                ..Default::default()
            },
        );
        let xi = it.solve(&a, &b).unwrap();
        assert!(residual(&a, &xd, &b) < 1e-13);
        assert!(residual(&a, &xi, &b) < 1e-11);
        for (p, q) in xd.iter().zip(&xi) {
            assert!((p - q).abs() < 1e-8 * (1.0 + p.abs()));
        }
    }

    #[test]
    fn rcm_is_a_permutation() {
        let a = laplacian(7, 5, 1.0);
        let mut p = rcm_ordering(&a);
        p.sort_unstable();
        assert_eq!(p, (0..35).collect::<Vec<_>>());
    }

    #[test]
    fn pinned_singular_system() {
        let a = laplacian(6, 4, 0.0);
        let mut b: Vec<f64> = (0..a.n).map(|i| (i % 3) as f64).collect();
        let mean = b.iter().sum::<f64>() / b.len() as f64;
        b.iter_mut().for_each(|v| *v -= mean);
        let mut s = SpdSolver::new(&a, SolverOptions::default());
        let x = s.solve_pinned(&a, &b, 0).unwrap();
        assert_eq!(x[0], 0.0);
        assert!(residual(&a, &x, &b) < 1e-12);
    }

    #[test]
    fn indefinite_matrix_is_reported() {
        let mut a = laplacian(3, 3, 0.0);
        let k = a.position(4, 4);
        a.values[k] = -10.0;
        let mut s = SpdSolver::new(&a, SolverOptions::default());
        assert!(matches!(s.solve(&a, &[1.0; 9]), Err(Error::LinearSolver(_))));
    }
}
