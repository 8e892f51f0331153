//! Direct backstepping kernels on the triangle T = {0 ≤ x ≤ ξ ≤ 1}.
//!
//! The kernels solve
//!
//! ```text
//! λ₁(∂x + ∂ξ) K₁   = -σ₂₁ K₂ - G Ω₁          K₁(x,1) = (λ₂ρ/λ₁) K₂(x,1)
//! (λ₁∂x - λ₂∂ξ) K₂ = -σ₁₂ K₁ - G Ω₂          K₂(x,x) = -σ₁₂/(λ₁+λ₂)
//! (λ₂∂x - λ₁∂ξ) Q₁ =  σ₂₁ Q₂ + R Ω₁          Q₁(x,x) =  σ₂₁/(λ₁+λ₂)
//! λ₂(∂x + ∂ξ) Q₂   =  σ₁₂ Q₁ + R Ω₂          Q₂(x,1) = (λ₁/(λ₂ρ)) Q₁(x,1)
//! ```
//!
//! with G and R given in closed form through the transition matrices
//! Φ_k(x,ξ) = e^{Ψ(ξ-x)/λ_k}:
//!
//! ```text
//! G(x,ξ) = -Θ₁Φ₁(x,ξ)/λ₁ + (1/λ₁) ∫ₓ^ξ (K₁(τ,ξ)Θ₁ + K₂(τ,ξ)Θ₂) Φ₁(x,τ) dτ
//! R(x,ξ) =  Θ₂Φ₂(ξ,x)/λ₂ - (1/λ₂) ∫ₓ^ξ (Q₁(τ,ξ)Θ₁ + Q₂(τ,ξ)Θ₂) Φ₂(τ,x) dτ
//! ```
//!
//! The discrete problem lives on the lattice (x_i, ξ_j) = (i/m, j/m), i ≤ j.

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::matops::{self, SquareMatrix};
use crate::model::ValidatedConfig;

/// Flat storage for node values on the triangle lattice, row by row in i.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Triangle {
    pub m: usize,
}

impl Triangle {
    pub fn len(&self) -> usize {
        (self.m + 1) * (self.m + 2) / 2
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    fn row_start(&self, i: usize) -> usize {
        i * (self.m + 1) - i * i.saturating_sub(1) / 2
    }

    /// Index of node (i, j), i ≤ j ≤ m.
    #[inline]
    pub fn idx(&self, i: usize, j: usize) -> usize {
        debug_assert!(i <= j && j <= self.m);
        self.row_start(i) + (j - i)
    }

    /// Nodes in lexicographic (i, j) order.
    pub fn nodes(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..=self.m).flat_map(move |i| (i..=self.m).map(move |j| (i, j)))
    }
}

/// Which transport speed a transition matrix is built with.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Speed {
    Rightward,
    Leftward,
}

/// Φ_k(x, ξ) = e^{Ψ(ξ−x)/λ_k}.
pub fn eval_transition(cfg: &ValidatedConfig, x: f64, xi: f64, which: Speed) -> Result<SquareMatrix> {
    let lambda = match which {
        Speed::Rightward => cfg.lambda1,
        Speed::Leftward => cfg.lambda2,
    };
    matops::expm(&cfg.psi, (xi - x) / lambda)
}

#[derive(Debug, Clone, Copy)]
pub struct KernelOptions {
    pub m: usize,
    pub tol: f64,
    pub max_iter: usize,
    pub exec: Exec,
}

impl KernelOptions {
    pub fn new(m: usize) -> Self {
        KernelOptions {
            m,
            tol: 1e-9,
            max_iter: 200,
            exec: Exec::default(),
        }
    }
}

/// Discrete direct kernels. `g` and `r` hold n components per node.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelSet {
    pub m: usize,
    pub n: usize,
    pub k1: Vec<f64>,
    pub k2: Vec<f64>,
    pub q1: Vec<f64>,
    pub q2: Vec<f64>,
    pub g: Vec<f64>,
    pub r: Vec<f64>,
    /// Sweeps used by the successive approximation.
    pub sweeps: usize,
    /// Maximum nodal change in the final sweep.
    pub last_change: f64,
}

impl KernelSet {
    pub fn zeros(m: usize, n: usize) -> Self {
        let len = Triangle { m }.len();
        KernelSet {
            m,
            n,
            k1: vec![0.0; len],
            k2: vec![0.0; len],
            q1: vec![0.0; len],
            q2: vec![0.0; len],
            g: vec![0.0; len * n],
            r: vec![0.0; len * n],
            sweeps: 0,
            last_change: 0.0,
        }
    }

    pub fn tri(&self) -> Triangle {
        Triangle { m: self.m }
    }

    pub fn h(&self) -> f64 {
        1.0 / self.m as f64
    }

    pub fn x(&self, i: usize) -> f64 {
        i as f64 / self.m as f64
    }

    pub fn k1(&self, i: usize, j: usize) -> f64 {
        self.k1[self.tri().idx(i, j)]
    }
    pub fn k2(&self, i: usize, j: usize) -> f64 {
        self.k2[self.tri().idx(i, j)]
    }
    pub fn q1(&self, i: usize, j: usize) -> f64 {
        self.q1[self.tri().idx(i, j)]
    }
    pub fn q2(&self, i: usize, j: usize) -> f64 {
        self.q2[self.tri().idx(i, j)]
    }
    pub fn g(&self, i: usize, j: usize) -> &[f64] {
        let k = self.tri().idx(i, j) * self.n;
        &self.g[k..k + self.n]
    }
    pub fn r(&self, i: usize, j: usize) -> &[f64] {
        let k = self.tri().idx(i, j) * self.n;
        &self.r[k..k + self.n]
    }

    pub fn is_finite(&self) -> bool {
        [&self.k1, &self.k2, &self.q1, &self.q2, &self.g, &self.r]
            .iter()
            .all(|f| f.iter().all(|v| v.is_finite()))
    }

    /// Linear interpolation onto another lattice resolution (bilinear in
    /// off-diagonal cells, barycentric in the cells cut by the diagonal).
    pub fn resample(&self, m: usize) -> KernelSet {
        if m == self.m {
            return self.clone();
        }
        let n = self.n;
        let src = self.tri();
        let dst = Triangle { m };
        let mut out = KernelSet::zeros(m, n);
        out.sweeps = self.sweeps;
        out.last_change = self.last_change;
        for (i, j) in dst.nodes() {
            let (x, xi) = (i as f64 / m as f64, j as f64 / m as f64);
            let stencil = interp_stencil(self.m, x, xi);
            let at = |f: &[f64]| stencil.iter().map(|&(a, b, w)| w * f[src.idx(a, b)]).sum::<f64>();
            let d = dst.idx(i, j);
            out.k1[d] = at(&self.k1);
            out.k2[d] = at(&self.k2);
            out.q1[d] = at(&self.q1);
            out.q2[d] = at(&self.q2);
            for c in 0..n {
                out.g[d * n + c] = stencil
                    .iter()
                    .map(|&(a, b, w)| w * self.g[src.idx(a, b) * n + c])
                    .sum();
                out.r[d * n + c] = stencil
                    .iter()
                    .map(|&(a, b, w)| w * self.r[src.idx(a, b) * n + c])
                    .sum();
            }
        }
        out
    }
}

/// Interpolation weights for the point (x, ξ), x ≤ ξ, on a lattice of size m.
pub(crate) fn interp_stencil(m: usize, x: f64, xi: f64) -> Vec<(usize, usize, f64)> {
    let mf = m as f64;
    let s = (x * mf).clamp(0.0, mf);
    let t = (xi * mf).clamp(s, mf);
    let i = (s.floor() as usize).min(m - 1);
    let j = (t.floor() as usize).min(m - 1).max(i);
    let fx = s - i as f64;
    let fxi = t - j as f64;
    if i < j {
        vec![
            (i, j, (1.0 - fx) * (1.0 - fxi)),
            (i + 1, j, fx * (1.0 - fxi)),
            (i, j + 1, (1.0 - fx) * fxi),
            (i + 1, j + 1, fx * fxi),
        ]
    } else {
        // Lower-right half of the diagonal cell: vertices (i,i), (i,i+1), (i+1,i+1).
        let fx = fx.min(fxi);
        vec![
            (i, i, 1.0 - fxi),
            (i, i + 1, fxi - fx),
            (i + 1, i + 1, fx),
        ]
    }
}

/// Constant data imposed on the diagonal and at ξ = 1.
struct BoundaryData {
    k2_diag: f64,
    q1_diag: f64,
    g_diag: Vec<f64>,
    r_diag: Vec<f64>,
    /// K₁(x,1) = k1_edge · K₂(x,1)
    k1_edge: f64,
    /// Q₂(x,1) = q2_edge · Q₁(x,1)
    q2_edge: f64,
}

impl BoundaryData {
    fn new(cfg: &ValidatedConfig) -> Self {
        let sum = cfg.lambda1 + cfg.lambda2;
        BoundaryData {
            k2_diag: -cfg.sigma12 / sum,
            q1_diag: cfg.sigma21 / sum,
            g_diag: cfg.theta1.iter().map(|t| -t / cfg.lambda1).collect(),
            r_diag: cfg.theta2.iter().map(|t| t / cfg.lambda2).collect(),
            k1_edge: cfg.lambda2 * cfg.rho / cfg.lambda1,
            q2_edge: cfg.lambda1 / (cfg.lambda2 * cfg.rho),
        }
    }
}

/// Transition matrices for every lattice offset d = 0..=m:
/// `phi1[d] = e^{Ψ d h/λ₁}` and `phi2[d] = e^{-Ψ d h/λ₂}`.
pub(crate) struct TransitionTable {
    pub phi1: Vec<SquareMatrix>,
    pub phi2: Vec<SquareMatrix>,
}

impl TransitionTable {
    pub fn new(cfg: &ValidatedConfig, m: usize) -> Result<Self> {
        let h = 1.0 / m as f64;
        let phi1 = (0..=m)
            .map(|d| matops::expm(&cfg.psi, d as f64 * h / cfg.lambda1))
            .collect::<Result<Vec<_>>>()?;
        let phi2 = (0..=m)
            .map(|d| matops::expm(&cfg.psi, -(d as f64) * h / cfg.lambda2))
            .collect::<Result<Vec<_>>>()?;
        Ok(TransitionTable { phi1, phi2 })
    }
}

/// (G, R) rows j = i..=m of lattice row i, from the closed-form expressions.
fn gr_row(
    ks: &KernelSet,
    cfg: &ValidatedConfig,
    table: &TransitionTable,
    i: usize,
) -> (Vec<f64>, Vec<f64>) {
    let n = ks.n;
    let m = ks.m;
    let h = ks.h();
    let (l1, l2) = (cfg.lambda1, cfg.lambda2);
    let mut g_out = Vec::with_capacity((m + 1 - i) * n);
    let mut r_out = Vec::with_capacity((m + 1 - i) * n);
    let mut fg = vec![0.0; n];
    let mut fr = vec![0.0; n];
    for j in i..=m {
        let mut g = table.phi1[j - i].vec_mul(&cfg.theta1);
        g.iter_mut().for_each(|v| *v *= -1.0 / l1);
        let mut r = table.phi2[j - i].vec_mul(&cfg.theta2);
        r.iter_mut().for_each(|v| *v *= 1.0 / l2);
        if j > i {
            let mut acc_g = vec![0.0; n];
            let mut acc_r = vec![0.0; n];
            for l in i..=j {
                let w = if l == i || l == j { 0.5 * h } else { h };
                let (a1, a2) = (ks.k1(l, j), ks.k2(l, j));
                let (b1, b2) = (ks.q1(l, j), ks.q2(l, j));
                for c in 0..n {
                    fg[c] = a1 * cfg.theta1[c] + a2 * cfg.theta2[c];
                    fr[c] = b1 * cfg.theta1[c] + b2 * cfg.theta2[c];
                }
                let p1 = &table.phi1[l - i];
                let p2 = &table.phi2[l - i];
                for c in 0..n {
                    let (mut sg, mut sr) = (0.0, 0.0);
                    for k in 0..n {
                        sg += fg[k] * p1[(k, c)];
                        sr += fr[k] * p2[(k, c)];
                    }
                    acc_g[c] += w * sg;
                    acc_r[c] += w * sr;
                }
            }
            for c in 0..n {
                g[c] += acc_g[c] / l1;
                r[c] -= acc_r[c] / l2;
            }
        }
        g_out.extend_from_slice(&g);
        r_out.extend_from_slice(&r);
    }
    (g_out, r_out)
}

/// Recomputes G and R from the current K, Q fields.
fn closed_form_gr(
    ks: &KernelSet,
    cfg: &ValidatedConfig,
    table: &TransitionTable,
    exec: Exec,
) -> (Vec<f64>, Vec<f64>) {
    let rows = exec.map(ks.m + 1, |i| gr_row(ks, cfg, table, i));
    let mut g = Vec::with_capacity(ks.g.len());
    let mut r = Vec::with_capacity(ks.r.len());
    for (gr, rr) in rows {
        g.extend(gr);
        r.extend(rr);
    }
    (g, r)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

/// Smallest accepted kernel lattice.
pub const MIN_KERNEL_GRID: usize = 16;

/// Solves the kernel equations by successive-approximation sweeps.
///
/// Each sweep marches K₂, Q₁ away from the diagonal with a monotone upwind
/// stencil, marches K₁, Q₂ back along ξ − x = const from the ξ = 1 edge, then
/// re-evaluates G, R in closed form. Diagonal and edge data are imposed
/// exactly.
pub fn solve_direct_kernels(cfg: &ValidatedConfig, opts: &KernelOptions) -> Result<KernelSet> {
    if cfg.rho == 0.0 {
        return Err(Error::config("rho", "must be nonzero for the ξ = 1 edge relation"));
    }
    if opts.m < MIN_KERNEL_GRID {
        return Err(Error::config("kernel-grid", format!("m_k = {} is below {MIN_KERNEL_GRID}", opts.m)));
    }
    if !(opts.tol > 0.0) {
        return Err(Error::config("tol", "must be positive"));
    }
    let m = opts.m;
    let n = cfg.n;
    let h = 1.0 / m as f64;
    let tri = Triangle { m };
    let bd = BoundaryData::new(cfg);
    let table = TransitionTable::new(cfg, m)?;
    let (l1, l2) = (cfg.lambda1, cfg.lambda2);
    let (s12, s21) = (cfg.sigma12, cfg.sigma21);

    let mut ks = KernelSet::zeros(m, n);
    ks.k2.fill(bd.k2_diag);
    ks.q1.fill(bd.q1_diag);
    ks.k1.fill(bd.k1_edge * bd.k2_diag);
    ks.q2.fill(bd.q2_edge * bd.q1_diag);
    for node in 0..tri.len() {
        ks.g[node * n..(node + 1) * n].copy_from_slice(&bd.g_diag);
        ks.r[node * n..(node + 1) * n].copy_from_slice(&bd.r_diag);
    }

    let mut last_change = f64::INFINITY;
    for sweep in 1..=opts.max_iter {
        let prev = ks.clone();

        // K₂ and Q₁: data on the diagonal, characteristics leave it towards
        // smaller x / larger ξ. Offsets d = j - i are processed in order.
        for i in 0..=m {
            ks.k2[tri.idx(i, i)] = bd.k2_diag;
            ks.q1[tri.idx(i, i)] = bd.q1_diag;
        }
        for d in 1..=m {
            for i in 0..=m - d {
                let j = i + d;
                let here = tri.idx(i, j);
                let right = tri.idx(i + 1, j);
                let below = tri.idx(i, j - 1);
                let src_k2 = -s12 * ks.k1[here] - dot(ks.g(i, j), &cfg.omega2);
                let src_q1 = s21 * ks.q2[here] + dot(ks.r(i, j), &cfg.omega1);
                ks.k2[here] = (l1 * ks.k2[right] + l2 * ks.k2[below] - h * src_k2) / (l1 + l2);
                ks.q1[here] = (l2 * ks.q1[right] + l1 * ks.q1[below] - h * src_q1) / (l1 + l2);
            }
        }

        // K₁ and Q₂: data at ξ = 1, march back along the diagonal direction.
        for i in 0..=m {
            let e = tri.idx(i, m);
            ks.k1[e] = bd.k1_edge * ks.k2[e];
            ks.q2[e] = bd.q2_edge * ks.q1[e];
        }
        for j in (0..m).rev() {
            for i in 0..=j {
                let here = tri.idx(i, j);
                let up = tri.idx(i + 1, j + 1);
                let src_k1 = -s21 * ks.k2[here] - dot(ks.g(i, j), &cfg.omega1);
                let src_q2 = s12 * ks.q1[here] + dot(ks.r(i, j), &cfg.omega2);
                ks.k1[here] = ks.k1[up] - h * src_k1 / l1;
                ks.q2[here] = ks.q2[up] - h * src_q2 / l2;
            }
        }

        let (g, r) = closed_form_gr(&ks, cfg, &table, opts.exec);
        ks.g = g;
        ks.r = r;
        for i in 0..=m {
            let d = tri.idx(i, i) * n;
            ks.g[d..d + n].copy_from_slice(&bd.g_diag);
            ks.r[d..d + n].copy_from_slice(&bd.r_diag);
        }

        last_change = [
            max_diff(&ks.k1, &prev.k1),
            max_diff(&ks.k2, &prev.k2),
            max_diff(&ks.q1, &prev.q1),
            max_diff(&ks.q2, &prev.q2),
            max_diff(&ks.g, &prev.g),
            max_diff(&ks.r, &prev.r),
        ]
        .into_iter()
        .fold(0.0, f64::max);
        if !last_change.is_finite() {
            break;
        }
        if last_change <= opts.tol {
            ks.sweeps = sweep;
            ks.last_change = last_change;
            return Ok(ks);
        }
    }
    Err(Error::KernelNoConvergence {
        iterations: opts.max_iter,
        last_change,
    })
}

/// Largest deviation from the imposed diagonal values (K₂, Q₁, G, R on ξ = x)
/// and edge relations (K₁ and Q₂ at ξ = 1).
pub fn boundary_defect(ks: &KernelSet, cfg: &ValidatedConfig) -> f64 {
    let bd = BoundaryData::new(cfg);
    let m = ks.m;
    let mut worst = 0.0f64;
    for i in 0..=m {
        worst = worst
            .max((ks.k2(i, i) - bd.k2_diag).abs())
            .max((ks.q1(i, i) - bd.q1_diag).abs())
            .max(max_diff(ks.g(i, i), &bd.g_diag))
            .max(max_diff(ks.r(i, i), &bd.r_diag))
            .max((ks.k1(i, m) - bd.k1_edge * ks.k2(i, m)).abs())
            .max((ks.q2(i, m) - bd.q2_edge * ks.q1(i, m)).abs());
    }
    worst
}

/// Max-norm residuals of the four transport equations (with G, R as given)
/// and of the closed-form expressions for G and R.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelResidual {
    pub k1: f64,
    pub k2: f64,
    pub q1: f64,
    pub q2: f64,
    pub g: f64,
    pub r: f64,
}

impl KernelResidual {
    /// Largest of the four transport-equation residuals.
    pub fn transport_max(&self) -> f64 {
        self.k1.max(self.k2).max(self.q1).max(self.q2)
    }

    pub fn entries(&self) -> [(&'static str, f64); 6] {
        [
            ("K1", self.k1),
            ("K2", self.k2),
            ("Q1", self.q1),
            ("Q2", self.q2),
            ("G", self.g),
            ("R", self.r),
        ]
    }
}

/// Evaluates the kernel equations on the lattice of `ks`.
///
/// Derivatives are centered where both neighbours exist and one-sided at the
/// lattice edges; residuals are taken at interior nodes 0 < x < ξ < 1.
pub fn kernel_residual(ks: &KernelSet, cfg: &ValidatedConfig) -> Result<KernelResidual> {
    kernel_residual_with(ks, cfg, Exec::default())
}

pub fn kernel_residual_with(ks: &KernelSet, cfg: &ValidatedConfig, exec: Exec) -> Result<KernelResidual> {
    let m = ks.m;
    let tri = ks.tri();
    let h = ks.h();
    let (l1, l2) = (cfg.lambda1, cfg.lambda2);
    let (s12, s21) = (cfg.sigma12, cfg.sigma21);

    let dx = |f: &[f64], i: usize, j: usize| -> f64 {
        if i >= 1 && i < j {
            (f[tri.idx(i + 1, j)] - f[tri.idx(i - 1, j)]) / (2.0 * h)
        } else if i < j {
            (f[tri.idx(i + 1, j)] - f[tri.idx(i, j)]) / h
        } else {
            (f[tri.idx(i, j)] - f[tri.idx(i - 1, j)]) / h
        }
    };
    let dxi = |f: &[f64], i: usize, j: usize| -> f64 {
        if j < m && j > i {
            (f[tri.idx(i, j + 1)] - f[tri.idx(i, j - 1)]) / (2.0 * h)
        } else if j < m {
            (f[tri.idx(i, j + 1)] - f[tri.idx(i, j)]) / h
        } else {
            (f[tri.idx(i, j)] - f[tri.idx(i, j - 1)]) / h
        }
    };

    let rows = exec.map(m.saturating_sub(1), |row| {
        let i = row + 1;
        let mut r = [0.0f64; 4];
        for j in i + 1..m {
            let here = tri.idx(i, j);
            let e1 = l1 * (dx(&ks.k1, i, j) + dxi(&ks.k1, i, j))
                + s21 * ks.k2[here]
                + dot(ks.g(i, j), &cfg.omega1);
            let e2 = l1 * dx(&ks.k2, i, j) - l2 * dxi(&ks.k2, i, j)
                + s12 * ks.k1[here]
                + dot(ks.g(i, j), &cfg.omega2);
            let e4 = l2 * dx(&ks.q1, i, j) - l1 * dxi(&ks.q1, i, j)
                - s21 * ks.q2[here]
                - dot(ks.r(i, j), &cfg.omega1);
            let e5 = l2 * (dx(&ks.q2, i, j) + dxi(&ks.q2, i, j))
                - s12 * ks.q1[here]
                - dot(ks.r(i, j), &cfg.omega2);
            for (acc, e) in r.iter_mut().zip([e1, e2, e4, e5]) {
                *acc = acc.max(e.abs());
            }
        }
        r
    });
    let mut res = [0.0f64; 4];
    for r in rows {
        for (a, b) in res.iter_mut().zip(r) {
            *a = a.max(b);
        }
    }

    let table = TransitionTable::new(cfg, m)?;
    let (g, r) = closed_form_gr(ks, cfg, &table, exec);
    Ok(KernelResidual {
        k1: res[0],
        k2: res[1],
        q1: res[2],
        q2: res[3],
        g: max_diff(&g, &ks.g),
        r: max_diff(&r, &ks.r),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{validate_config, PlantConfig};

    fn example() -> ValidatedConfig {
        validate_config(PlantConfig::two_state_example()).unwrap()
    }

    #[test]
    fn triangle_indexing_is_dense_and_ordered() {
        let t = Triangle { m: 7 };
        let idx: Vec<usize> = t.nodes().map(|(i, j)| t.idx(i, j)).collect();
        assert_eq!(idx, (0..t.len()).collect::<Vec<_>>());
    }

    #[test]
    fn zero_couplings_give_zero_kernels() {
        let mut cfg = PlantConfig::two_state_example();
        cfg.sigma12 = 0.0;
        cfg.sigma21 = 0.0;
        cfg.theta1 = vec![0.0; 2];
        cfg.theta2 = vec![0.0; 2];
        let cfg = validate_config(cfg).unwrap();
        let ks = solve_direct_kernels(&cfg, &KernelOptions::new(32)).unwrap();
        for f in [&ks.k1, &ks.k2, &ks.q1, &ks.q2, &ks.g, &ks.r] {
            assert!(f.iter().all(|&v| v == 0.0));
        }
        let res = kernel_residual(&ks, &cfg).unwrap();
        assert_eq!(res.transport_max(), 0.0);
        assert_eq!(res.g.max(res.r), 0.0);
    }

    #[test]
    fn example_diagonal_and_edge_data() {
        let cfg = example();
        let ks = solve_direct_kernels(&cfg, &KernelOptions::new(40)).unwrap();
        for i in 0..=ks.m {
            assert!((ks.k2(i, i) + 1.1627907).abs() < 1e-7);
            assert_eq!(ks.k2(i, i), -2.5 / 2.15);
            assert_eq!(ks.q1(i, i), -3.5 / 2.15);
            assert_eq!(ks.g(i, i), &[-0.2, -0.08]);
            assert_eq!(ks.r(i, i), &[0.25 / 0.9, -0.1 / 0.9]);
            let c = 0.9 * 0.5 / 1.25;
            assert!((ks.k1(i, ks.m) - c * ks.k2(i, ks.m)).abs() <= 1e-15);
            assert!((ks.q2(i, ks.m) - ks.q1(i, ks.m) / c).abs() <= 1e-12);
        }
        assert!(ks.is_finite());
        assert!(boundary_defect(&ks, &cfg) <= 1e-12);
    }

    #[test]
    fn transition_examples() {
        let cfg = example();
        let e = eval_transition(&cfg, 0.3, 0.3, Speed::Rightward).unwrap();
        assert_eq!(e, SquareMatrix::identity(2));
        let a = eval_transition(&cfg, 0.0, 0.4, Speed::Rightward).unwrap();
        let b = eval_transition(&cfg, 0.4, 1.0, Speed::Rightward).unwrap();
        let c = eval_transition(&cfg, 0.0, 1.0, Speed::Rightward).unwrap();
        assert!(a.matmul(&b).sub(&c).max_abs() < 1e-8);

        let mut scalar = PlantConfig::two_state_example();
        scalar.n = 1;
        scalar.lambda1 = 1.0;
        scalar.psi = SquareMatrix::diag(&[-1.0]);
        scalar.theta1 = vec![0.0];
        scalar.theta2 = vec![0.0];
        scalar.omega1 = vec![0.0];
        scalar.omega2 = vec![0.0];
        let scalar = validate_config(scalar).unwrap();
        let e = eval_transition(&scalar, 0.0, 1.0, Speed::Rightward).unwrap();
        assert!((e[(0, 0)] - 0.3678794).abs() < 1e-7);
    }

    #[test]
    fn perturbation_shows_in_residual() {
        let mut cfg = PlantConfig::two_state_example();
        cfg.sigma12 = 0.0;
        cfg.sigma21 = 0.0;
        cfg.theta1 = vec![0.0; 2];
        cfg.theta2 = vec![0.0; 2];
        let cfg = validate_config(cfg).unwrap();
        let m = 32;
        let mut ks = solve_direct_kernels(&cfg, &KernelOptions::new(m)).unwrap();
        let node = ks.tri().idx(10, 20);
        ks.k1[node] += 1.0;
        let res = kernel_residual(&ks, &cfg).unwrap();
        assert!(res.k1 >= cfg.lambda1 * m as f64 / 2.0 - 1e-9, "{res:?}");
        assert_eq!(res.k2, 0.0);

        let cfg = example();
        let mut ks = solve_direct_kernels(&cfg, &KernelOptions::new(m)).unwrap();
        let base = kernel_residual(&ks, &cfg).unwrap();
        let node = ks.tri().idx(10, 20);
        ks.k1[node] += 1.0;
        let res = kernel_residual(&ks, &cfg).unwrap();
        assert!(res.k1 >= cfg.lambda1 * m as f64 / 2.0 - base.k1, "{res:?}");
    }

    #[test]
    fn inert_zero_speed_channel() {
        // Θ = 0: (K1, K2, Q1, Q2) do not depend on Ω, Ψ or n.
        let mut cfg = PlantConfig::two_state_example();
        cfg.theta1 = vec![0.0; 2];
        cfg.theta2 = vec![0.0; 2];
        let a = solve_direct_kernels(&validate_config(cfg.clone()).unwrap(), &KernelOptions::new(48)).unwrap();
        cfg.n = 1;
        cfg.theta1 = vec![0.0];
        cfg.theta2 = vec![0.0];
        cfg.omega1 = vec![0.0];
        cfg.omega2 = vec![0.0];
        cfg.psi = SquareMatrix::identity(1).scaled(-1.0);
        let b = solve_direct_kernels(&validate_config(cfg).unwrap(), &KernelOptions::new(48)).unwrap();
        for (x, y) in [(&a.k1, &b.k1), (&a.k2, &b.k2), (&a.q1, &b.q1), (&a.q2, &b.q2)] {
            assert!(max_diff(x, y) <= 1e-8);
        }
        assert!(a.g.iter().chain(&a.r).all(|v| *v == 0.0));
    }

    #[test]
    fn sequential_and_parallel_agree_bitwise() {
        let cfg = example();
        let mut opts = KernelOptions::new(40);
        opts.exec = Exec::Sequential;
        let a = solve_direct_kernels(&cfg, &opts).unwrap();
        opts.exec = Exec::Parallel;
        let b = solve_direct_kernels(&cfg, &opts).unwrap();
        assert_eq!(a, b);
        assert_eq!(
            kernel_residual_with(&a, &cfg, Exec::Sequential).unwrap(),
            kernel_residual_with(&a, &cfg, Exec::Parallel).unwrap()
        );
    }

    #[test]
    fn resample_preserves_linear_fields() {
        let m = 20;
        let mut ks = KernelSet::zeros(m, 1);
        let tri = ks.tri();
        for (i, j) in tri.nodes() {
            let (x, xi) = (ks.x(i), ks.x(j));
            ks.k1[tri.idx(i, j)] = 2.0 * x - 3.0 * xi + 1.0;
        }
        let fine = ks.resample(37);
        for (i, j) in fine.tri().nodes() {
            let (x, xi) = (fine.x(i), fine.x(j));
            assert!((fine.k1(i, j) - (2.0 * x - 3.0 * xi + 1.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_small_lattice() {
        assert!(solve_direct_kernels(&example(), &KernelOptions::new(8)).is_err());
    }

    #[test]
    fn non_convergence_is_reported() {
        let mut opts = KernelOptions::new(32);
        opts.max_iter = 2;
        opts.tol = 1e-14;
        match solve_direct_kernels(&example(), &opts) {
            Err(Error::KernelNoConvergence { iterations, last_change }) => {
                assert_eq!(iterations, 2);
                assert!(last_change > 0.0);
            }
            other => panic!("{other:?}"),
        }
    }
}
