//! Volterra transformation, its discrete inverse, and the boundary control law.
//!
//! All integrals over [x_i, 1] use the composite trapezoid rule on the state
//! nodes, so the forward map is an upper-triangular matrix. The inverse
//! kernels are defined as the exact inverse of that matrix, which makes the
//! roundtrip an identity up to rounding.

use std::borrow::Cow;

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::kernels::{KernelSet, Triangle};
use crate::model::{StateSnapshot, ValidatedConfig};
use crate::simulator::Trajectory;

/// Trapezoid weight of node j in the integral over [x_i, 1] on m cells.
#[inline]
pub(crate) fn weight(m: usize, h: f64, i: usize, j: usize) -> f64 {
    if i == m {
        0.0
    } else if j == i || j == m {
        0.5 * h
    } else {
        h
    }
}

/// Composition factor w(i,l)·w(l,j)/w(i,j) turning a matrix product back
/// into a kernel on the lattice.
#[inline]
fn compose_factor(m: usize, h: f64, i: usize, l: usize, j: usize) -> f64 {
    let wij = weight(m, h, i, j);
    if wij == 0.0 {
        0.0
    } else {
        weight(m, h, i, l) * weight(m, h, l, j) / wij
    }
}

fn on_grid(ks: &KernelSet, m: usize) -> Cow<'_, KernelSet> {
    if ks.m == m {
        Cow::Borrowed(ks)
    } else {
        Cow::Owned(ks.resample(m))
    }
}

fn state_cells(state: &StateSnapshot, ks: &KernelSet, module: &'static str) -> Result<usize> {
    let nodes = state.nodes();
    if nodes < 2 || state.p.len() != nodes || state.v.iter().any(|r| r.len() != nodes) {
        return Err(Error::GridMismatch {
            module,
            detail: "state arrays have inconsistent lengths".into(),
        });
    }
    if state.n() != ks.n {
        return Err(Error::GridMismatch {
            module,
            detail: format!("state has {} zero-speed rows, kernels have {}", state.n(), ks.n),
        });
    }
    Ok(nodes - 1)
}

/// α = u − ∫ₓ¹(K₁u + K₂p + Gv)dξ and β = p − ∫ₓ¹(Q₁u + Q₂p + Rv)dξ.
///
/// Kernels are linearly interpolated when the lattice differs from the state grid.
pub fn forward_transform(state: &StateSnapshot, ks: &KernelSet) -> Result<(Vec<f64>, Vec<f64>)> {
    let m = state_cells(state, ks, "transforms")?;
    let ks = on_grid(ks, m);
    Ok(forward_on_grid(state, &ks))
}

fn forward_on_grid(state: &StateSnapshot, ks: &KernelSet) -> (Vec<f64>, Vec<f64>) {
    let m = ks.m;
    let n = ks.n;
    let h = ks.h();
    let mut alpha = state.u.clone();
    let mut beta = state.p.clone();
    for i in 0..m {
        let (mut a, mut b) = (0.0, 0.0);
        for j in i..=m {
            let w = weight(m, h, i, j);
            let (u, p) = (state.u[j], state.p[j]);
            let (g, r) = (ks.g(i, j), ks.r(i, j));
            let mut gv = 0.0;
            let mut rv = 0.0;
            for c in 0..n {
                gv += g[c] * state.v[c][j];
                rv += r[c] * state.v[c][j];
            }
            a += w * (ks.k1(i, j) * u + ks.k2(i, j) * p + gv);
            b += w * (ks.q1(i, j) * u + ks.q2(i, j) * p + rv);
        }
        alpha[i] -= a;
        beta[i] -= b;
    }
    (alpha, beta)
}

/// Discrete resolvent of the forward transformation plus the target-system
/// coupling kernels N₁ = Ω₁L₁ + Ω₂M₁, N₂ = Ω₁L₂ + Ω₂M₂, N₃ = Ω₁S + Ω₂E.
#[derive(Debug, Clone, PartialEq)]
pub struct InverseKernelSet {
    pub m: usize,
    pub n: usize,
    pub l1: Vec<f64>,
    pub l2: Vec<f64>,
    pub m1: Vec<f64>,
    pub m2: Vec<f64>,
    /// Row vectors, `n` entries per node.
    pub s: Vec<f64>,
    pub e: Vec<f64>,
    /// Column vectors, `n` entries per node.
    pub n1: Vec<f64>,
    pub n2: Vec<f64>,
    /// Row-major n×n blocks, `n*n` entries per node.
    pub n3: Vec<f64>,
    pub iterations: usize,
}

impl InverseKernelSet {
    pub fn zeros(m: usize, n: usize) -> Self {
        let len = Triangle { m }.len();
        InverseKernelSet {
            m,
            n,
            l1: vec![0.0; len],
            l2: vec![0.0; len],
            m1: vec![0.0; len],
            m2: vec![0.0; len],
            s: vec![0.0; len * n],
            e: vec![0.0; len * n],
            n1: vec![0.0; len * n],
            n2: vec![0.0; len * n],
            n3: vec![0.0; len * n * n],
            iterations: 0,
        }
    }

    pub fn tri(&self) -> Triangle {
        Triangle { m: self.m }
    }

    pub fn h(&self) -> f64 {
        1.0 / self.m as f64
    }

    pub fn is_finite(&self) -> bool {
        [&self.l1, &self.l2, &self.m1, &self.m2, &self.s, &self.e, &self.n1, &self.n2, &self.n3]
            .iter()
            .all(|f| f.iter().all(|v| v.is_finite()))
    }

    /// Sup-norms of N₁, N₂ (Euclidean per node) and N₃ (spectral bound via Frobenius per node).
    pub fn n_bars(&self) -> (f64, f64, f64) {
        let n = self.n;
        let sup = |f: &[f64], stride: usize| {
            f.chunks(stride)
                .map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt())
                .fold(0.0, f64::max)
        };
        (sup(&self.n1, n), sup(&self.n2, n), sup(&self.n3, n * n))
    }
}

type Block = [f64; 4];

fn kernel_block(ks: &KernelSet, i: usize, j: usize) -> Block {
    [ks.k1(i, j), ks.k2(i, j), ks.q1(i, j), ks.q2(i, j)]
}

#[inline]
fn block_mul(a: &Block, b: &Block) -> Block {
    [
        a[0] * b[0] + a[1] * b[2],
        a[0] * b[1] + a[1] * b[3],
        a[2] * b[0] + a[3] * b[2],
        a[2] * b[1] + a[3] * b[3],
    ]
}

/// Tolerance on the max change between Neumann iterates.
pub const RESOLVENT_TOL: f64 = 1e-12;

/// Inverse kernels from the Neumann series L = K + K⋆L on the kernel lattice.
pub fn invert_kernels(ks: &KernelSet, cfg: &ValidatedConfig) -> Result<InverseKernelSet> {
    invert_kernels_with(ks, cfg, Exec::default())
}

pub fn invert_kernels_with(ks: &KernelSet, cfg: &ValidatedConfig, exec: Exec) -> Result<InverseKernelSet> {
    let m = ks.m;
    let n = ks.n;
    if cfg.n != n {
        return Err(Error::GridMismatch {
            module: "transforms",
            detail: format!("kernels have n = {n}, config has n = {}", cfg.n),
        });
    }
    let tri = ks.tri();
    let h = ks.h();
    let k: Vec<Block> = tri.nodes().map(|(i, j)| kernel_block(ks, i, j)).collect();
    let mut l = k.clone();
    let max_iter = 10 * m;
    let mut iterations = 0;
    loop {
        iterations += 1;
        let rows = exec.map(m + 1, |i| {
            (i..=m)
                .map(|j| {
                    let mut acc = k[tri.idx(i, j)];
                    for q in i..=j {
                        let c = compose_factor(m, h, i, q, j);
                        if c == 0.0 {
                            continue;
                        }
                        let prod = block_mul(&k[tri.idx(i, q)], &l[tri.idx(q, j)]);
                        for (a, p) in acc.iter_mut().zip(prod) {
                            *a += c * p;
                        }
                    }
                    acc
                })
                .collect::<Vec<Block>>()
        });
        let next: Vec<Block> = rows.into_iter().flatten().collect();
        let change = next
            .iter()
            .zip(&l)
            .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max);
        l = next;
        if !change.is_finite() {
            return Err(Error::ResolventNoConvergence { iterations, last_change: change });
        }
        if change <= RESOLVENT_TOL {
            break;
        }
        if iterations >= max_iter {
            return Err(Error::ResolventNoConvergence { iterations, last_change: change });
        }
    }

    let mut out = InverseKernelSet::zeros(m, n);
    out.iterations = iterations;
    for (d, b) in l.iter().enumerate() {
        out.l1[d] = b[0];
        out.l2[d] = b[1];
        out.m1[d] = b[2];
        out.m2[d] = b[3];
    }

    // (S; E) = (G; R) + L⋆(G; R)
    let rows = exec.map(m + 1, |i| {
        let mut s_row = Vec::with_capacity((m + 1 - i) * n);
        let mut e_row = Vec::with_capacity((m + 1 - i) * n);
        for j in i..=m {
            let mut s: Vec<f64> = ks.g(i, j).to_vec();
            let mut e: Vec<f64> = ks.r(i, j).to_vec();
            for q in i..=j {
                let c = compose_factor(m, h, i, q, j);
                if c == 0.0 {
                    continue;
                }
                let b = &l[tri.idx(i, q)];
                let (g, r) = (ks.g(q, j), ks.r(q, j));
                for col in 0..n {
                    s[col] += c * (b[0] * g[col] + b[1] * r[col]);
                    e[col] += c * (b[2] * g[col] + b[3] * r[col]);
                }
            }
            s_row.extend_from_slice(&s);
            e_row.extend_from_slice(&e);
        }
        (s_row, e_row)
    });
    out.s.clear();
    out.e.clear();
    for (s, e) in rows {
        out.s.extend(s);
        out.e.extend(e);
    }

    let (o1, o2) = (&cfg.omega1, &cfg.omega2);
    for d in 0..tri.len() {
        for a in 0..n {
            out.n1[d * n + a] = o1[a] * out.l1[d] + o2[a] * out.m1[d];
            out.n2[d * n + a] = o1[a] * out.l2[d] + o2[a] * out.m2[d];
            for b in 0..n {
                out.n3[(d * n + a) * n + b] = o1[a] * out.s[d * n + b] + o2[a] * out.e[d * n + b];
            }
        }
    }
    Ok(out)
}

/// u = α + ∫ₓ¹(L₁α + L₂β + Sv)dξ and p = β + ∫ₓ¹(M₁α + M₂β + Ev)dξ.
pub fn inverse_transform(
    alpha: &[f64],
    beta: &[f64],
    v: &[Vec<f64>],
    iks: &InverseKernelSet,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let m = iks.m;
    let n = iks.n;
    if alpha.len() != m + 1 || beta.len() != m + 1 || v.len() != n || v.iter().any(|r| r.len() != m + 1) {
        return Err(Error::GridMismatch {
            module: "transforms",
            detail: format!("inverse kernels live on m = {m}, arrays have {} nodes", alpha.len()),
        });
    }
    let tri = iks.tri();
    let h = iks.h();
    let mut u = alpha.to_vec();
    let mut p = beta.to_vec();
    for i in 0..m {
        let (mut a, mut b) = (0.0, 0.0);
        for j in i..=m {
            let w = weight(m, h, i, j);
            let d = tri.idx(i, j);
            let mut sv = 0.0;
            let mut ev = 0.0;
            for c in 0..n {
                sv += iks.s[d * n + c] * v[c][j];
                ev += iks.e[d * n + c] * v[c][j];
            }
            a += w * (iks.l1[d] * alpha[j] + iks.l2[d] * beta[j] + sv);
            b += w * (iks.m1[d] * alpha[j] + iks.m2[d] * beta[j] + ev);
        }
        u[i] += a;
        p[i] += b;
    }
    Ok((u, p))
}

/// U = −q p(0) + ∫₀¹(K₁(0,ξ)u + K₂(0,ξ)p + G(0,ξ)v)dξ.
pub fn control_law(state: &StateSnapshot, ks: &KernelSet, cfg: &ValidatedConfig) -> Result<f64> {
    let m = state_cells(state, ks, "transforms")?;
    let ks = on_grid(ks, m);
    let (integral, _) = feedback_integral(state, &ks);
    Ok(-cfg.q * state.p[0] + integral)
}

/// Returns the full feedback integral and the weight multiplying u(0) in it.
pub(crate) fn feedback_integral(state: &StateSnapshot, ks: &KernelSet) -> (f64, f64) {
    let m = ks.m;
    let h = ks.h();
    let mut acc = 0.0;
    for j in 0..=m {
        let w = weight(m, h, 0, j);
        let g = ks.g(0, j);
        let gv: f64 = (0..ks.n).map(|c| g[c] * state.v[c][j]).sum();
        acc += w * (ks.k1(0, j) * state.u[j] + ks.k2(0, j) * state.p[j] + gv);
    }
    (acc, weight(m, h, 0, 0) * ks.k1(0, 0))
}

/// Residuals of the target system along a stored closed-loop trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TargetResidual {
    /// max over stored times t > 0 of |α(t,0)|; the initial snapshot is skipped
    /// because the initial data need not satisfy the boundary condition
    pub alpha_boundary: f64,
    pub alpha_transport_max: f64,
    pub alpha_transport_rms: f64,
    pub beta_transport_max: f64,
    pub beta_transport_rms: f64,
    pub v_max: f64,
    pub v_rms: f64,
    /// max over stored times of |β(t,1) − ρα(t,1)|
    pub beta_edge: f64,
}

/// Transformed fields (α, β) for every stored snapshot.
pub fn transform_trajectory(traj: &Trajectory, ks: &KernelSet) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
    let first = traj.snapshots.first().ok_or(Error::ShortTrajectory(0))?;
    let m = state_cells(first, ks, "transforms")?;
    let ks = on_grid(ks, m);
    Ok(Exec::default().map(traj.snapshots.len(), |k| forward_on_grid(&traj.snapshots[k], &ks)))
}

pub fn target_residual(
    traj: &Trajectory,
    ks: &KernelSet,
    iks: &InverseKernelSet,
    cfg: &ValidatedConfig,
) -> Result<TargetResidual> {
    let count = traj.snapshots.len();
    if count < 2 {
        return Err(Error::ShortTrajectory(count));
    }
    let fields = transform_trajectory(traj, ks)?;
    let m = fields[0].0.len() - 1;
    let iks: Cow<'_, InverseKernelSet> = if iks.m == m {
        Cow::Borrowed(iks)
    } else {
        return Err(Error::GridMismatch {
            module: "transforms",
            detail: format!("inverse kernels on m = {}, trajectory on m = {m}", iks.m),
        });
    };
    let n = cfg.n;
    let h = 1.0 / m as f64;
    let tri = iks.tri();
    let mut rep = TargetResidual::default();
    for (k, (a, b)) in fields.iter().enumerate() {
        if k > 0 {
            rep.alpha_boundary = rep.alpha_boundary.max(a[0].abs());
        }
        rep.beta_edge = rep.beta_edge.max((b[m] - cfg.rho * a[m]).abs());
    }
    let (mut sa, mut sb, mut sv) = (0.0, 0.0, 0.0);
    let (mut ca, mut cv) = (0usize, 0usize);
    for k in 0..count - 1 {
        let dt = traj.snapshots[k + 1].t - traj.snapshots[k].t;
        let (a0, b0) = &fields[k];
        let (a1, b1) = &fields[k + 1];
        let v0 = &traj.snapshots[k].v;
        let v1 = &traj.snapshots[k + 1].v;
        for j in 1..m {
            let ra = (a1[j] - a0[j]) / dt + cfg.lambda1 * (a0[j + 1] - a0[j - 1]) / (2.0 * h);
            let rb = (b1[j] - b0[j]) / dt - cfg.lambda2 * (b0[j + 1] - b0[j - 1]) / (2.0 * h);
            rep.alpha_transport_max = rep.alpha_transport_max.max(ra.abs());
            rep.beta_transport_max = rep.beta_transport_max.max(rb.abs());
            sa += ra * ra;
            sb += rb * rb;
            ca += 1;
        }
        for j in 0..=m {
            for r in 0..n {
                let mut rhs = cfg.omega1[r] * a0[j] + cfg.omega2[r] * b0[j];
                for c in 0..n {
                    rhs += cfg.psi[(r, c)] * v0[c][j];
                }
                for l in j..=m {
                    let w = weight(m, h, j, l);
                    if w == 0.0 {
                        continue;
                    }
                    let d = tri.idx(j, l);
                    let mut s = iks.n1[d * n + r] * a0[l] + iks.n2[d * n + r] * b0[l];
                    for c in 0..n {
                        s += iks.n3[(d * n + r) * n + c] * v0[c][l];
                    }
                    rhs += w * s;
                }
                let res = (v1[r][j] - v0[r][j]) / dt - rhs;
                rep.v_max = rep.v_max.max(res.abs());
                sv += res * res;
                cv += 1;
            }
        }
    }
    rep.alpha_transport_rms = (sa / ca.max(1) as f64).sqrt();
    rep.beta_transport_rms = (sb / ca.max(1) as f64).sqrt();
    rep.v_rms = (sv / cv.max(1) as f64).sqrt();
    Ok(rep)
}
