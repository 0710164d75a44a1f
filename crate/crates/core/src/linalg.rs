//! Packed lower-triangular Cholesky factors with row append, forward
//! substitution and rank-one update/downdate on trailing blocks.

use crate::error::{Error, Result};

/// Lower-triangular matrix stored row by row; row `i` holds `i + 1` entries.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PackedLower {
    n: usize,
    data: Vec<f64>,
}

#[inline]
fn offset(i: usize) -> usize {
    i * (i + 1) / 2
}

impl PackedLower {
    pub fn with_capacity(n: usize) -> Self {
        Self {
            n: 0,
            data: Vec::with_capacity(offset(n)),
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[offset(i)..offset(i + 1)]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[offset(i)..offset(i + 1)]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        debug_assert!(j <= i);
        self.data[offset(i) + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(j <= i);
        self.data[offset(i) + j] = v;
    }

    #[inline]
    pub fn diag(&self, i: usize) -> f64 {
        self.data[offset(i) + i]
    }

    pub fn push_row(&mut self, row: &[f64]) {
        debug_assert_eq!(row.len(), self.n + 1);
        self.data.extend_from_slice(row);
        self.n += 1;
    }

    pub fn truncate(&mut self, n: usize) {
        self.n = self.n.min(n);
        self.data.truncate(offset(self.n));
    }

    /// Solves `L[0..k, 0..k] x = b[0..k]` in place.
    pub fn forward_solve_prefix(&self, b: &mut [f64], k: usize) {
        for i in 0..k {
            let row = self.row(i);
            let s = dot(&row[..i], &b[..i]);
            b[i] = (b[i] - s) / row[i];
        }
    }

    /// Solves `Lᵀ x = b` in place over the full factor.
    pub fn backward_solve(&self, b: &mut [f64]) {
        for i in (0..self.n).rev() {
            b[i] /= self.diag(i);
            let bi = b[i];
            let row = self.row(i);
            for k in 0..i {
                b[k] -= row[k] * bi;
            }
        }
    }

    /// Appends the Cholesky row for a new symmetric row/column `col` (length `n+1`,
    /// last entry the diagonal). `work` receives the new row.
    pub fn append(&mut self, col: &[f64], work: &mut Vec<f64>) -> Result<()> {
        let n = self.n;
        work.clear();
        work.extend_from_slice(col);
        self.forward_solve_prefix(work, n);
        let d = col[n] - dot(&work[..n], &work[..n]);
        if !(d > 0.0) || !d.is_finite() {
            return Err(Error::NotPositiveDefinite {
                context: "cholesky append",
                row: n,
                pivot: d,
            });
        }
        work[n] = d.sqrt();
        self.push_row(work);
        Ok(())
    }

    /// Factorizes a dense symmetric matrix given by `entry(i, j)` for `j <= i`.
    pub fn factorize(n: usize, mut entry: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let mut l = Self::with_capacity(n);
        let mut col = Vec::with_capacity(n);
        let mut work = Vec::with_capacity(n);
        for i in 0..n {
            col.clear();
            col.extend((0..=i).map(|j| entry(i, j)));
            l.append(&col, &mut work)?;
        }
        Ok(l)
    }

    /// `L Lᵀ = L Lᵀ + w wᵀ` restricted to rows/columns `start..n`; `w` is indexed
    /// from `start` and is consumed.
    pub fn rank_one_update(&mut self, start: usize, w: &mut [f64]) {
        let n = self.n;
        for j in start..n {
            let wj = w[j - start];
            if wj == 0.0 {
                continue;
            }
            let ljj = self.diag(j);
            let r = ljj.hypot(wj);
            let c = r / ljj;
            let s = wj / ljj;
            self.set(j, j, r);
            for i in j + 1..n {
                let lij = (self.get(i, j) + s * w[i - start]) / c;
                self.set(i, j, lij);
                w[i - start] = c * w[i - start] - s * lij;
            }
        }
    }

    /// `L Lᵀ = L Lᵀ − w wᵀ` restricted to rows/columns `start..n`. Fails if the
    /// result would not be positive definite; the factor is then left partially
    /// modified and must be rebuilt by the caller.
    pub fn rank_one_downdate(&mut self, start: usize, w: &mut [f64]) -> Result<()> {
        let n = self.n;
        for j in start..n {
            let wj = w[j - start];
            if wj == 0.0 {
                continue;
            }
            let ljj = self.diag(j);
            let r2 = (ljj - wj) * (ljj + wj);
            if !(r2 > 0.0) || !r2.is_finite() {
                return Err(Error::NotPositiveDefinite {
                    context: "cholesky downdate",
                    row: j,
                    pivot: r2,
                });
            }
            let r = r2.sqrt();
            let c = r / ljj;
            let s = wj / ljj;
            self.set(j, j, r);
            for i in j + 1..n {
                let lij = (self.get(i, j) - s * w[i - start]) / c;
                self.set(i, j, lij);
                w[i - start] = c * w[i - start] - s * lij;
            }
        }
        Ok(())
    }

    /// `rank_one_update(start, up)` followed by `rank_one_downdate(start, down)`
    /// in a single pass over the trailing block.
    pub fn update_downdate(
        &mut self,
        start: usize,
        up: &mut [f64],
        down: &mut [f64],
    ) -> Result<()> {
        let n = self.n;
        for j in start..n {
            let (wu, wd) = (up[j - start], down[j - start]);
            let ljj = self.diag(j);
            let (c1, s1, r1) = if wu == 0.0 {
                (1.0, 0.0, ljj)
            } else {
                let r = ljj.hypot(wu);
                (r / ljj, wu / ljj, r)
            };
            let r2 = (r1 - wd) * (r1 + wd);
            if !(r2 > 0.0) || !r2.is_finite() {
                return Err(Error::NotPositiveDefinite {
                    context: "cholesky downdate",
                    row: j,
                    pivot: r2,
                });
            }
            let r = r2.sqrt();
            let (c2, s2) = (r / r1, wd / r1);
            let (ic1, ic2) = (ljj / r1, r1 / r);
            self.set(j, j, r);
            let mut o = offset(j + 1) + j;
            let tail = j + 1 - start..;
            for (i, (u, d)) in (j + 1..n).zip(up[tail.clone()].iter_mut().zip(&mut down[tail])) {
                let l1 = (self.data[o] + s1 * *u) * ic1;
                *u = c1 * *u - s1 * l1;
                let l2 = (l1 - s2 * *d) * ic2;
                *d = c2 * *d - s2 * l2;
                self.data[o] = l2;
                o += i + 1;
            }
        }
        Ok(())
    }

    /// `Σ ln L_ii`.
    pub fn log_diag_sum(&self) -> f64 {
        (0..self.n).map(|i| self.diag(i).ln()).sum()
    }

    pub fn to_dense(&self) -> nalgebra::DMatrix<f64> {
        nalgebra::DMatrix::from_fn(
            self.n,
            self.n,
            |i, j| if j <= i { self.get(i, j) } else { 0.0 },
        )
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s0 = 0.0;
    let mut s1 = 0.0;
    let mut s2 = 0.0;
    let mut s3 = 0.0;
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let chunks = n / 4;
    for k in 0..chunks {
        let i = 4 * k;
        s0 += a[i] * b[i];
        s1 += a[i + 1] * b[i + 1];
        s2 += a[i + 2] * b[i + 2];
        s3 += a[i + 3] * b[i + 3];
    }
    for i in 4 * chunks..n {
        s0 += a[i] * b[i];
    }
    (s0 + s1) + (s2 + s3)
}

/// Small dense Cholesky factor used for `M × M` systems.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseChol {
    pub n: usize,
    /// Row-major lower factor.
    pub l: Vec<f64>,
}

impl DenseChol {
    pub fn factorize(n: usize, a: &[f64]) -> Result<Self> {
        let mut l = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                let s = a[i * n + j] - dot(&l[i * n..i * n + j], &l[j * n..j * n + j]);
                if i == j {
                    if !(s > 0.0) || !s.is_finite() {
                        return Err(Error::NotPositiveDefinite {
                            context: "dense cholesky",
                            row: i,
                            pivot: s,
                        });
                    }
                    l[i * n + i] = s.sqrt();
                } else {
                    l[i * n + j] = s / l[j * n + j];
                }
            }
        }
        Ok(Self { n, l })
    }

    pub fn identity(n: usize) -> Self {
        let mut l = vec![0.0; n * n];
        for i in 0..n {
            l[i * n + i] = 1.0;
        }
        Self { n, l }
    }

    /// `L x = b` in place.
    pub fn forward(&self, b: &mut [f64]) {
        let n = self.n;
        for i in 0..n {
            let s = dot(&self.l[i * n..i * n + i], &b[..i]);
            b[i] = (b[i] - s) / self.l[i * n + i];
        }
    }

    /// `Lᵀ x = b` in place.
    pub fn backward(&self, b: &mut [f64]) {
        let n = self.n;
        for i in (0..n).rev() {
            let mut s = b[i];
            for k in i + 1..n {
                s -= self.l[k * n + i] * b[k];
            }
            b[i] = s / self.l[i * n + i];
        }
    }

    pub fn log_det(&self) -> f64 {
        2.0 * (0..self.n)
            .map(|i| self.l[i * self.n + i].ln())
            .sum::<f64>()
    }

    /// `L Lᵀ += w wᵀ`; `w` is consumed.
    pub fn rank_one_update(&mut self, w: &mut [f64]) {
        let n = self.n;
        for j in 0..n {
            let wj = w[j];
            if wj == 0.0 {
                continue;
            }
            let ljj = self.l[j * n + j];
            let r = ljj.hypot(wj);
            let c = r / ljj;
            let s = wj / ljj;
            self.l[j * n + j] = r;
            for i in j + 1..n {
                let lij = (self.l[i * n + j] + s * w[i]) / c;
                self.l[i * n + j] = lij;
                w[i] = c * w[i] - s * lij;
            }
        }
    }
}
