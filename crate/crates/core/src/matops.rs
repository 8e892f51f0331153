//! Small dense matrix utilities: exponential, eigenvalue real parts and the
//! decay margin of the symmetric part.
//!
//! Everything here targets the n ≤ 64 regime of the zero-speed block, so the
//! algorithms are the textbook ones: scaling and squaring with a truncated
//! Taylor series, Householder reduction to Hessenberg form followed by the
//! Francis double-shift QR iteration, and cyclic Jacobi for symmetric input.

use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major square matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SquareMatrix {
    n: usize,
    data: Vec<f64>,
}

impl SquareMatrix {
    pub fn zeros(n: usize) -> Self {
        SquareMatrix {
            n,
            data: vec![0.0; n * n],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn diag(values: &[f64]) -> Self {
        let mut m = Self::zeros(values.len());
        for (i, &v) in values.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
    }

    /// Builds a matrix from rows; fails if the rows are ragged, empty or hold
    /// non-finite values.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if n == 0 {
            return Err(Error::config("matrix", "must have at least one row"));
        }
        let mut data = Vec::with_capacity(n * n);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != n {
                return Err(Error::config(
                    format!("row[{i}]"),
                    format!("has {} entries, expected {n}", row.len()),
                ));
            }
            data.extend_from_slice(row);
        }
        let m = SquareMatrix { n, data };
        if !m.is_finite() {
            return Err(Error::NonFinite);
        }
        Ok(m)
    }

    pub fn order(&self) -> usize {
        self.n
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        (0..self.n).map(|i| self.row(i).to_vec()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.n);
        for i in 0..self.n {
            for j in 0..self.n {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn scaled(&self, s: f64) -> Self {
        SquareMatrix {
            n: self.n,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn add(&self, other: &Self) -> Self {
        assert_eq!(self.n, other.n);
        SquareMatrix {
            n: self.n,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        }
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.add(&other.scaled(-1.0))
    }

    pub fn matmul(&self, other: &Self) -> Self {
        assert_eq!(self.n, other.n);
        let n = self.n;
        let mut out = Self::zeros(n);
        for i in 0..n {
            for k in 0..n {
                let a = self[(i, k)];
                if a == 0.0 {
                    continue;
                }
                for j in 0..n {
                    out.data[i * n + j] += a * other.data[k * n + j];
                }
            }
        }
        out
    }

    /// `self * x` for a column vector.
    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n)
            .map(|i| self.row(i).iter().zip(x).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// `x * self` for a row vector.
    pub fn vec_mul(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        for (k, &xk) in x.iter().enumerate() {
            for (o, a) in out.iter_mut().zip(self.row(k)) {
                *o += xk * a;
            }
        }
        out
    }

    /// Maximum absolute column sum.
    pub fn norm1(&self) -> f64 {
        (0..self.n)
            .map(|j| (0..self.n).map(|i| self[(i, j)].abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// `(a + aᵀ) / 2`
    pub fn symmetric_part(&self) -> Self {
        self.add(&self.transpose()).scaled(0.5)
    }
}

impl Index<(usize, usize)> for SquareMatrix {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.n + j]
    }
}

impl IndexMut<(usize, usize)> for SquareMatrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.n + j]
    }
}

/// `e^{a s}` by scaling and squaring.
pub fn expm(a: &SquareMatrix, s: f64) -> Result<SquareMatrix> {
    if !s.is_finite() || !a.is_finite() {
        return Err(Error::NonFinite);
    }
    let n = a.order();
    let b = a.scaled(s);
    let norm = b.norm1();
    // Bring the norm below 1/2 so the Taylor tail is tiny after ~20 terms.
    let squarings = if norm > 0.5 {
        (norm / 0.5).log2().ceil() as i32
    } else {
        0
    };
    let c = b.scaled(0.5f64.powi(squarings));

    let mut sum = SquareMatrix::identity(n);
    let mut term = SquareMatrix::identity(n);
    for k in 1..=30 {
        term = term.matmul(&c).scaled(1.0 / k as f64);
        sum = sum.add(&term);
        if term.max_abs() <= 1e-18 * sum.max_abs() {
            break;
        }
    }
    for _ in 0..squarings {
        sum = sum.matmul(&sum);
    }
    if !sum.is_finite() {
        return Err(Error::NonFinite);
    }
    Ok(sum)
}

/// Householder reduction to upper Hessenberg form (similarity transform).
fn hessenberg(a: &SquareMatrix) -> Vec<Vec<f64>> {
    let n = a.order();
    let mut h = a.rows();
    for k in 0..n.saturating_sub(2) {
        let norm = (k + 1..n).map(|i| h[i][k] * h[i][k]).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        let alpha = if h[k + 1][k] > 0.0 { -norm } else { norm };
        let mut v: Vec<f64> = (k + 1..n).map(|i| h[i][k]).collect();
        v[0] -= alpha;
        let vnorm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if vnorm == 0.0 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= vnorm);

        // H <- (I - 2vvᵀ) H
        for j in 0..n {
            let dot: f64 = v.iter().enumerate().map(|(r, vr)| vr * h[k + 1 + r][j]).sum();
            for (r, vr) in v.iter().enumerate() {
                h[k + 1 + r][j] -= 2.0 * vr * dot;
            }
        }
        // H <- H (I - 2vvᵀ)
        for row in h.iter_mut() {
            let dot: f64 = v.iter().enumerate().map(|(r, vr)| vr * row[k + 1 + r]).sum();
            for (r, vr) in v.iter().enumerate() {
                row[k + 1 + r] -= 2.0 * vr * dot;
            }
        }
        for row in h.iter_mut().skip(k + 2) {
            row[k] = 0.0;
        }
    }
    h
}

fn sign(a: f64, b: f64) -> f64 {
    if b >= 0.0 {
        a.abs()
    } else {
        -a.abs()
    }
}

/// All eigenvalues as `(re, im)` pairs, unordered.
pub fn eigenvalues(a: &SquareMatrix) -> Result<Vec<(f64, f64)>> {
    if !a.is_finite() {
        return Err(Error::NonFinite);
    }
    let n = a.order();
    let mut h = hessenberg(a);
    let mut wr = vec![0.0; n];
    let mut wi = vec![0.0; n];

    let mut anorm = 0.0;
    for (i, row) in h.iter().enumerate() {
        for v in row.iter().skip(i.saturating_sub(1)) {
            anorm += v.abs();
        }
    }

    let max_its = 30 * n.max(1);
    let mut t = 0.0;
    let mut nn = n as isize - 1;
    while nn >= 0 {
        let mut its = 0;
        loop {
            let nu = nn as usize;
            // Find a negligible subdiagonal element.
            let mut l = nu;
            while l >= 1 {
                let mut s = h[l - 1][l - 1].abs() + h[l][l].abs();
                if s == 0.0 {
                    s = anorm;
                }
                if h[l][l - 1].abs() + s == s {
                    h[l][l - 1] = 0.0;
                    break;
                }
                l -= 1;
            }
            let mut x = h[nu][nu];
            if l == nu {
                wr[nu] = x + t;
                wi[nu] = 0.0;
                nn -= 1;
                break;
            }
            let mut y = h[nu - 1][nu - 1];
            let mut w = h[nu][nu - 1] * h[nu - 1][nu];
            if l == nu - 1 {
                let p = 0.5 * (y - x);
                let q = p * p + w;
                let mut z = q.abs().sqrt();
                x += t;
                if q >= 0.0 {
                    z = p + sign(z, p);
                    wr[nu - 1] = x + z;
                    wr[nu] = if z != 0.0 { x - w / z } else { x + z };
                    wi[nu - 1] = 0.0;
                    wi[nu] = 0.0;
                } else {
                    wr[nu - 1] = x + p;
                    wr[nu] = x + p;
                    wi[nu - 1] = -z;
                    wi[nu] = z;
                }
                nn -= 2;
                break;
            }
            if its == max_its {
                return Err(Error::EigenNoConvergence { iterations: its });
            }
            if its == 10 || its == 20 {
                // Exceptional shift.
                t += x;
                for (i, row) in h.iter_mut().enumerate().take(nu + 1) {
                    row[i] -= x;
                }
                let s = h[nu][nu - 1].abs() + h[nu - 1][nu - 2].abs();
                x = 0.75 * s;
                y = x;
                w = -0.4375 * s * s;
            }
            its += 1;

            let (mut p, mut q, mut r);
            let mut m = nu - 2;
            loop {
                let z = h[m][m];
                let rr = x - z;
                let ss = y - z;
                p = (rr * ss - w) / h[m + 1][m] + h[m][m + 1];
                q = h[m + 1][m + 1] - z - rr - ss;
                r = h[m + 2][m + 1];
                let s = p.abs() + q.abs() + r.abs();
                p /= s;
                q /= s;
                r /= s;
                if m == l {
                    break;
                }
                let u = h[m][m - 1].abs() * (q.abs() + r.abs());
                let v = p.abs() * (h[m - 1][m - 1].abs() + z.abs() + h[m + 1][m + 1].abs());
                if u + v == v {
                    break;
                }
                m -= 1;
            }
            for i in m + 2..=nu {
                h[i][i - 2] = 0.0;
                if i != m + 2 {
                    h[i][i - 3] = 0.0;
                }
            }
            for k in m..nu {
                if k != m {
                    p = h[k][k - 1];
                    q = h[k + 1][k - 1];
                    r = if k != nu - 1 { h[k + 2][k - 1] } else { 0.0 };
                    x = p.abs() + q.abs() + r.abs();
                    if x != 0.0 {
                        p /= x;
                        q /= x;
                        r /= x;
                    }
                }
                let s = sign((p * p + q * q + r * r).sqrt(), p);
                if s == 0.0 {
                    continue;
                }
                if k == m {
                    if l != m {
                        h[k][k - 1] = -h[k][k - 1];
                    }
                } else {
                    h[k][k - 1] = -s * x;
                }
                p += s;
                x = p / s;
                y = q / s;
                let z = r / s;
                q /= p;
                r /= p;
                for j in k..=nu {
                    let mut pp = h[k][j] + q * h[k + 1][j];
                    if k != nu - 1 {
                        pp += r * h[k + 2][j];
                        h[k + 2][j] -= pp * z;
                    }
                    h[k + 1][j] -= pp * y;
                    h[k][j] -= pp * x;
                }
                let mmin = if nu < k + 3 { nu } else { k + 3 };
                for row in h.iter_mut().take(mmin + 1).skip(l) {
                    let mut pp = x * row[k] + y * row[k + 1];
                    if k != nu - 1 {
                        pp += z * row[k + 2];
                        row[k + 2] -= pp * r;
                    }
                    row[k + 1] -= pp * q;
                    row[k] -= pp;
                }
            }
        }
    }
    Ok(wr.into_iter().zip(wi).collect())
}

/// Real parts of the eigenvalues, ascending, repeats preserved.
pub fn eigen_real_parts(a: &SquareMatrix) -> Result<Vec<f64>> {
    let mut re: Vec<f64> = eigenvalues(a)?.into_iter().map(|(r, _)| r).collect();
    re.sort_by(f64::total_cmp);
    Ok(re)
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, ascending.
pub fn symmetric_eigenvalues(a: &SquareMatrix) -> Vec<f64> {
    let n = a.order();
    let mut m = a.rows();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i][j] * m[i][j])
            .sum();
        if off <= 1e-30 * (1.0 + a.frobenius().powi(2)) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if m[p][q] == 0.0 {
                    continue;
                }
                let theta = (m[q][q] - m[p][p]) / (2.0 * m[p][q]);
                let t = sign(1.0, theta) / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for row in m.iter_mut() {
                    let (mp, mq) = (row[p], row[q]);
                    row[p] = c * mp - s * mq;
                    row[q] = s * mp + c * mq;
                }
                for k in 0..n {
                    let (mp, mq) = (m[p][k], m[q][k]);
                    m[p][k] = c * mp - s * mq;
                    m[q][k] = s * mp + c * mq;
                }
            }
        }
    }
    let mut eig: Vec<f64> = (0..n).map(|i| m[i][i]).collect();
    eig.sort_by(f64::total_cmp);
    eig
}

/// ρ* = −λ_max((a+aᵀ)/2) when the symmetric part is negative definite.
///
/// This is the largest constant with `vᵀ a v ≤ −ρ*‖v‖²` for every `v`.
pub fn sym_decay_margin(a: &SquareMatrix) -> Option<f64> {
    let eig = symmetric_eigenvalues(&a.symmetric_part());
    let top = *eig.last()?;
    (top < 0.0).then_some(-top)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn example_psi() -> SquareMatrix {
        SquareMatrix::from_rows(&[vec![-1.5, 2.0], vec![-1.0, -2.0]]).unwrap()
    }

    fn close(a: &SquareMatrix, b: &SquareMatrix, tol: f64) -> bool {
        a.sub(b).max_abs() <= tol
    }

    #[test]
    fn expm_of_zero_is_identity() {
        for n in 1..5 {
            let e = expm(&SquareMatrix::zeros(n), 7.0).unwrap();
            assert_eq!(e, SquareMatrix::identity(n));
        }
    }

    #[test]
    fn expm_diagonal() {
        let e = expm(&SquareMatrix::diag(&[-1.0, -2.0]), 1.0).unwrap();
        assert!((e[(0, 0)] - 0.3678794).abs() < 1e-7);
        assert!((e[(1, 1)] - 0.1353353).abs() < 1e-7);
        assert_eq!(e[(0, 1)], 0.0);
    }

    #[test]
    fn expm_nilpotent() {
        let a = SquareMatrix::from_rows(&[vec![0.0, 1.0], vec![0.0, 0.0]]).unwrap();
        let e = expm(&a, 1.0).unwrap();
        let want = SquareMatrix::from_rows(&[vec![1.0, 1.0], vec![0.0, 1.0]]).unwrap();
        assert!(close(&e, &want, 1e-15));
    }

    #[test]
    fn expm_against_defining_series_for_large_argument() {
        // Rotation generator: e^{Js} = [[cos s, sin s], [-sin s, cos s]].
        let j = SquareMatrix::from_rows(&[vec![0.0, 1.0], vec![-1.0, 0.0]]).unwrap();
        let s = 40.0;
        let e = expm(&j, s).unwrap();
        let want =
            SquareMatrix::from_rows(&[vec![s.cos(), s.sin()], vec![-s.sin(), s.cos()]]).unwrap();
        assert!(close(&e, &want, 1e-10));
    }

    #[test]
    fn expm_rejects_non_finite() {
        assert!(matches!(
            expm(&SquareMatrix::identity(2), f64::NAN),
            Err(Error::NonFinite)
        ));
    }

    #[test]
    fn eigen_real_parts_examples() {
        let re = eigen_real_parts(&example_psi()).unwrap();
        // trace −3.5, det 5: complex pair with real part −1.75
        assert_eq!(re.len(), 2);
        for r in re {
            assert!((r + 1.75).abs() < 1e-8);
        }
        let re = eigen_real_parts(&SquareMatrix::diag(&[3.0, -1.0])).unwrap();
        assert!((re[0] + 1.0).abs() < 1e-12 && (re[1] - 3.0).abs() < 1e-12);
        let re = eigen_real_parts(&SquareMatrix::diag(&[0.5])).unwrap();
        assert_eq!(re, vec![0.5]);
    }

    #[test]
    fn eigen_repeated_and_larger() {
        let re = eigen_real_parts(&SquareMatrix::diag(&[2.0, 2.0, -3.0, 2.0])).unwrap();
        assert_eq!(re.len(), 4);
        assert!((re[0] + 3.0).abs() < 1e-10);
        for r in &re[1..] {
            assert!((r - 2.0).abs() < 1e-8);
        }
        // Companion matrix of (x-1)(x-2)(x-3)(x-4)(x-5).
        let c = [-120.0, 274.0, -225.0, 85.0, -15.0];
        let mut rows = vec![vec![0.0; 5]; 5];
        for i in 1..5 {
            rows[i][i - 1] = 1.0;
        }
        for (i, coef) in c.iter().enumerate() {
            rows[i][4] = -coef;
        }
        let re = eigen_real_parts(&SquareMatrix::from_rows(&rows).unwrap()).unwrap();
        for (k, r) in re.iter().enumerate() {
            assert!((r - (k as f64 + 1.0)).abs() < 1e-8, "{re:?}");
        }
    }

    #[test]
    fn decay_margin_examples() {
        // (Ψ+Ψᵀ)/2 = [[-1.5, 0.5], [0.5, -2]]: λ_max = (-3.5 + sqrt(0.25+1))/2
        let want = -(-3.5 + 1.25f64.sqrt()) / 2.0;
        let got = sym_decay_margin(&example_psi()).unwrap();
        assert!((got - want).abs() < 1e-12);
        assert!((got - 1.190983).abs() < 1e-5);
        let got = sym_decay_margin(&SquareMatrix::identity(3).scaled(-1.0)).unwrap();
        assert!((got - 1.0).abs() < 1e-14);
        let rot = SquareMatrix::from_rows(&[vec![0.0, 1.0], vec![-1.0, 0.0]]).unwrap();
        assert_eq!(sym_decay_margin(&rot), None);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn matrix(n: usize) -> impl Strategy<Value = SquareMatrix> {
            proptest::collection::vec(-2.0f64..2.0, n * n).prop_map(move |d| SquareMatrix {
                n,
                data: d,
            })
        }

        proptest! {
            #[test]
            fn expm_inverse(a in (1usize..5).prop_flat_map(matrix), s in -2.5f64..2.5) {
                // ‖a s‖ stays ≤ 10 with these ranges for n ≤ 2; scale down for larger n.
                let a = a.scaled(1.0 / a.order() as f64);
                let prod = expm(&a, s).unwrap().matmul(&expm(&a, -s).unwrap());
                prop_assert!(close(&prod, &SquareMatrix::identity(a.order()), 1e-8));
            }

            #[test]
            fn expm_semigroup(a in (1usize..5).prop_flat_map(matrix), s in -2.0f64..2.0, r in -2.0f64..2.0) {
                let a = a.scaled(1.0 / a.order() as f64);
                let lhs = expm(&a, s + r).unwrap();
                let rhs = expm(&a, s).unwrap().matmul(&expm(&a, r).unwrap());
                prop_assert!(close(&lhs, &rhs, 1e-8 * (1.0 + lhs.max_abs())));
            }

            #[test]
            fn hurwitz_exponential_decays(a in (1usize..5).prop_flat_map(matrix)) {
                // Shift the spectrum so the largest real part is -0.2.
                let top = eigen_real_parts(&a).unwrap().into_iter().fold(f64::MIN, f64::max);
                let a = a.sub(&SquareMatrix::identity(a.order()).scaled(top + 0.2));
                let norms: Vec<f64> = [10.0, 20.0, 40.0].iter().map(|s| expm(&a, *s).unwrap().max_abs()).collect();
                prop_assert!(norms[2] < 1e-1 && norms[2] <= norms[0], "{norms:?}");
            }

            #[test]
            fn trace_matches_eigen_sum(a in (1usize..7).prop_flat_map(matrix)) {
                let trace: f64 = (0..a.order()).map(|i| a[(i, i)]).sum();
                let sum: f64 = eigen_real_parts(&a).unwrap().iter().sum();
                prop_assert!((trace - sum).abs() < 1e-8);
            }

            #[test]
            fn decay_margin_bounds_quadratic_form(a in (1usize..5).prop_flat_map(matrix), v in proptest::collection::vec(-1.0f64..1.0, 4)) {
                if let Some(rho) = sym_decay_margin(&a) {
                    let v = &v[..a.order()];
                    let av = a.mul_vec(v);
                    let quad: f64 = v.iter().zip(&av).map(|(x, y)| x * y).sum();
                    let norm2: f64 = v.iter().map(|x| x * x).sum();
                    prop_assert!(quad <= -rho * norm2 + 1e-12);
                }
            }
        }
    }
}
