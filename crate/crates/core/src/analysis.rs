//! Lyapunov certificate for the closed loop and the obstruction machinery of
//! the simplified system: operator P, subspace S, functional R, the w
//! transform and the delay-ODE counterexample.

use crate::error::{Error, Result};
use crate::matops::sym_decay_margin;
use crate::model::{cumulative_trapezoid, trapezoid, Grid, ValidatedConfig};
use crate::simulator::SimplifiedConfig;
use crate::transforms::InverseKernelSet;

/// Constants of V = ∫(A/λ₁)e^{−μx}α² + (B/λ₂)e^{μx}β² dx + ½∫vᵀe^{−ϑx}v dx.
///
/// A grows like e^{2μ} and overflows for strongly coupled plants, so ln A is
/// kept alongside and [`lyapunov_log_value`] works in log space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LyapunovParams {
    pub a: f64,
    pub ln_a: f64,
    pub b: f64,
    pub mu: f64,
    pub vartheta: f64,
    pub rho_star: f64,
    /// Certified decay rate (underflows to 0 when A is astronomically large).
    pub k: f64,
    pub nbar1: f64,
    pub nbar2: f64,
    pub nbar3: f64,
}

/// ln(e^a + e^b) without overflow.
fn log_add(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    if lo == f64::NEG_INFINITY {
        return hi;
    }
    hi + (lo - hi).exp().ln_1p()
}

/// Returns `None` when the symmetric part of Ψ is not negative definite.
pub fn lyapunov_constants(cfg: &ValidatedConfig, iks: &InverseKernelSet) -> Option<LyapunovParams> {
    let rho_star = sym_decay_margin(&cfg.psi)?;
    let (nbar1, nbar2, nbar3) = iks.n_bars();
    let sq = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>();
    let mu = f64::max(
        2.0 * (sq(&cfg.omega1) + nbar1 * nbar1) / rho_star,
        2.0 * (sq(&cfg.omega2) + nbar2 * nbar2) / rho_star,
    ) + 1.0;
    let vartheta = 16.0 * nbar3 * nbar3 / (rho_star * rho_star);
    let b = 1.0;
    // A = ρ²e^{2μ} + 1
    let ln_a = log_add(2.0 * mu + 2.0 * cfg.rho.abs().ln(), 0.0);
    let a = ln_a.exp();
    let k = (cfg.lambda1.ln() - ln_a).exp().min(cfg.lambda2 / b).min(rho_star / 2.0);
    Some(LyapunovParams { a, ln_a, b, mu, vartheta, rho_star, k, nbar1, nbar2, nbar3 })
}

/// Trapezoid evaluation of the Lyapunov functional on equally spaced nodes.
/// Returns +∞ when A overflows; use [`lyapunov_log_value`] then.
pub fn lyapunov_value(alpha: &[f64], beta: &[f64], v: &[Vec<f64>], lp: &LyapunovParams, cfg: &ValidatedConfig) -> f64 {
    let m = alpha.len() - 1;
    let h = 1.0 / m as f64;
    let integrand: Vec<f64> = (0..=m)
        .map(|j| {
            let x = j as f64 * h;
            let vv: f64 = v.iter().map(|row| row[j] * row[j]).sum();
            (lp.ln_a - cfg.lambda1.ln() - lp.mu * x).exp() * alpha[j] * alpha[j]
                + lp.b / cfg.lambda2 * (lp.mu * x).exp() * beta[j] * beta[j]
                + 0.5 * (-lp.vartheta * x).exp() * vv
        })
        .collect();
    trapezoid(&integrand, h)
}

/// ln V, evaluated term by term in log space so that huge A does not overflow.
pub fn lyapunov_log_value(alpha: &[f64], beta: &[f64], v: &[Vec<f64>], lp: &LyapunovParams, cfg: &ValidatedConfig) -> f64 {
    let m = alpha.len() - 1;
    let h = 1.0 / m as f64;
    let mut acc = f64::NEG_INFINITY;
    for j in 0..=m {
        let x = j as f64 * h;
        let w = if j == 0 || j == m { 0.5 * h } else { h };
        let lw = w.ln();
        let vv: f64 = v.iter().map(|row| row[j] * row[j]).sum();
        let terms = [
            lw + lp.ln_a - cfg.lambda1.ln() - lp.mu * x + (alpha[j] * alpha[j]).ln(),
            lw + (lp.b / cfg.lambda2).ln() + lp.mu * x + (beta[j] * beta[j]).ln(),
            lw + 0.5f64.ln() - lp.vartheta * x + vv.ln(),
        ];
        for t in terms {
            acc = log_add(acc, t);
        }
    }
    acc
}

/// Least-squares slope of ln y against t over samples with y > 0.
pub fn log_slope(t: &[f64], y: &[f64]) -> Option<f64> {
    let (t, ly): (Vec<f64>, Vec<f64>) = t.iter().zip(y).filter(|(_, &y)| y > 0.0).map(|(&t, &y)| (t, y.ln())).unzip();
    linear_slope(&t, &ly)
}

/// Least-squares slope of y against t; `None` with fewer than two distinct t.
pub fn linear_slope(t: &[f64], y: &[f64]) -> Option<f64> {
    let count = t.len().min(y.len());
    if count < 2 {
        return None;
    }
    let n = count as f64;
    let mt = t[..count].iter().sum::<f64>() / n;
    let my = y[..count].iter().sum::<f64>() / n;
    let sxy: f64 = t.iter().zip(y).map(|(a, b)| (a - mt) * (b - my)).sum();
    let sxx: f64 = t[..count].iter().map(|a| (a - mt).powi(2)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

fn check_len(grid: &Grid, arrays: &[&[f64]]) -> Result<()> {
    if arrays.iter().any(|a| a.len() != grid.nodes()) {
        return Err(Error::GridMismatch {
            module: "analysis",
            detail: format!("arrays must have {} nodes", grid.nodes()),
        });
    }
    Ok(())
}

/// I_j = ∫₀^{x_j} e^{−ψ(x_j−s)/λ} u(s) ds by the trapezoid rule, computed recursively.
fn damped_integral(scfg: &SimplifiedConfig, u: &[f64], h: f64) -> Vec<f64> {
    let decay = (-scfg.psi * h / scfg.lambda).exp();
    let mut out = Vec::with_capacity(u.len());
    let mut acc = 0.0;
    for j in 0..u.len() {
        if j > 0 {
            acc = decay * acc + 0.5 * h * (decay * u[j - 1] + u[j]);
        }
        out.push(acc);
    }
    out
}

/// (P(u,v))(x) = v(x) − e^{−ψx/λ}v(0) + (ω/λ)∫₀ˣe^{−ψ(x−s)/λ}u(s)ds.
pub fn operator_p(scfg: &SimplifiedConfig, u: &[f64], v: &[f64], grid: &Grid) -> Result<Vec<f64>> {
    check_len(grid, &[u, v])?;
    let integral = damped_integral(scfg, u, grid.dx);
    Ok(grid
        .xs()
        .iter()
        .enumerate()
        .map(|(j, &x)| v[j] - (-scfg.psi * x / scfg.lambda).exp() * v[0] + scfg.omega / scfg.lambda * integral[j])
        .collect())
}

/// w(t,·) tracked along trajectories; pointwise identical to P(u,v).
pub fn w_transform(scfg: &SimplifiedConfig, u: &[f64], v: &[f64], grid: &Grid) -> Result<Vec<f64>> {
    operator_p(scfg, u, v, grid)
}

/// Default membership tolerance 1e−6·(1 + ‖v‖∞).
pub fn default_s_tolerance(v: &[f64]) -> f64 {
    1e-6 * (1.0 + v.iter().fold(0.0f64, |m, x| m.max(x.abs())))
}

/// Whether max|P(u,v)| ≤ tol, together with that maximum.
pub fn in_subspace_s(
    scfg: &SimplifiedConfig,
    u: &[f64],
    v: &[f64],
    grid: &Grid,
    tol: Option<f64>,
) -> Result<(bool, f64)> {
    let p = operator_p(scfg, u, v, grid)?;
    let max = p.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let tol = tol.unwrap_or_else(|| default_s_tolerance(v));
    Ok((max <= tol, max))
}

/// The v completing (u, v(0)) to a member of S:
/// v(x) = e^{−ψx/λ}v(0) − (ω/λ)∫₀ˣe^{−ψ(x−s)/λ}u(s)ds.
pub fn s_member(scfg: &SimplifiedConfig, u: &[f64], v_at_zero: f64, grid: &Grid) -> Result<Vec<f64>> {
    check_len(grid, &[u])?;
    let integral = damped_integral(scfg, u, grid.dx);
    Ok(grid
        .xs()
        .iter()
        .enumerate()
        .map(|(j, &x)| (-scfg.psi * x / scfg.lambda).exp() * v_at_zero - scfg.omega / scfg.lambda * integral[j])
        .collect())
}

/// R together with the internals φ, h and K it is built from.
#[derive(Debug, Clone, PartialEq)]
pub struct RFunctional {
    pub r: f64,
    pub phi: Vec<f64>,
    pub h: Vec<f64>,
    pub kconst: f64,
}

fn chi(scfg: &SimplifiedConfig, u: &[f64], v: &[f64], dx: f64) -> Vec<f64> {
    let iv = cumulative_trapezoid(v, dx);
    let iu = cumulative_trapezoid(u, dx);
    (0..u.len())
        .map(|j| scfg.psi * iv[j] + scfg.omega * iu[j] + scfg.lambda * v[j])
        .collect()
}

/// φ(x) = ψ∫₀ˣv₀ + ω∫₀ˣu₀ + λv₀(x), K = ∫φ, h = φ − K and
/// R = ∫h(x)[ψ∫₀ˣv + ω∫₀ˣu + λv(x)]dx.
pub fn functional_r(
    scfg: &SimplifiedConfig,
    u0: &[f64],
    v0: &[f64],
    u: &[f64],
    v: &[f64],
    grid: &Grid,
) -> Result<RFunctional> {
    check_len(grid, &[u0, v0, u, v])?;
    let phi = chi(scfg, u0, v0, grid.dx);
    let kconst = trapezoid(&phi, grid.dx);
    let h: Vec<f64> = phi.iter().map(|p| p - kconst).collect();
    let now = chi(scfg, u, v, grid.dx);
    let prod: Vec<f64> = h.iter().zip(&now).map(|(a, b)| a * b).collect();
    Ok(RFunctional { r: trapezoid(&prod, grid.dx), phi, h, kconst })
}

/// Lower bound on the total L² norm of any state with the given R:
/// |R| ≤ ‖h‖∞(|ψ| + |ω| + λ)·‖(u,v)‖₂.
pub fn norm_floor(scfg: &SimplifiedConfig, r: f64, h_sup: f64) -> f64 {
    let c = h_sup * (scfg.psi.abs() + scfg.omega.abs() + scfg.lambda);
    if c == 0.0 {
        0.0
    } else {
        r.abs() / c
    }
}

/// Time series of the delay-ODE pair behind the simplified system.
#[derive(Debug, Clone, PartialEq)]
pub struct OdeSeries {
    pub t: Vec<f64>,
    pub v1: Vec<f64>,
    pub v2: Vec<f64>,
    /// w(t_k) = v₁(t_k − d) − v₂(t_k) for t_k ≥ d, where d = x₁/λ; `None` before.
    pub w: Vec<Option<f64>>,
    /// Delay d actually used (rounded to a whole number of steps).
    pub delay: f64,
}

/// Integrates v̇₁ = ψv₁ + ωU(t), v̇₂ = ψv₂ + ωU(t − x₁/λ) from v₁(0) = v₀(0),
/// v₂(0) = v₀(x₁).
///
/// Uses the exponential trapezoid step v ← e^{ψΔt}v + (Δt/2)ω(e^{ψΔt}U_k + U_{k+1}),
/// which is second-order and makes w obey w_{k+1} = e^{ψΔt}w_k exactly.
pub fn ode_counterexample(
    scfg: &SimplifiedConfig,
    x1: f64,
    v0_at_0: f64,
    v0_at_x1: f64,
    input: &dyn Fn(f64) -> f64,
    t_final: f64,
    dt: f64,
) -> Result<OdeSeries> {
    let scfg = scfg.validate()?;
    if !(x1 > 0.0 && x1 <= 1.0) {
        return Err(Error::config("x1", "must lie in (0, 1]"));
    }
    if !(dt > 0.0) {
        return Err(Error::config("dt", "must be positive"));
    }
    let steps = (t_final / dt).round().max(0.0) as usize;
    let lag = ((x1 / scfg.lambda) / dt).round().max(1.0) as usize;
    let delay = lag as f64 * dt;
    let decay = (scfg.psi * dt).exp();
    let w_in = scfg.omega * 0.5 * dt;
    let mut t = Vec::with_capacity(steps + 1);
    let mut v1 = Vec::with_capacity(steps + 1);
    let mut v2 = Vec::with_capacity(steps + 1);
    let (mut a, mut b) = (v0_at_0, v0_at_x1);
    for k in 0..=steps {
        let tk = k as f64 * dt;
        t.push(tk);
        v1.push(a);
        v2.push(b);
        let tn = (k + 1) as f64 * dt;
        a = decay * a + w_in * (decay * input(tk) + input(tn));
        b = decay * b + w_in * (decay * input(tk - delay) + input(tn - delay));
    }
    let w = (0..=steps).map(|k| (k >= lag).then(|| v1[k - lag] - v2[k])).collect();
    Ok(OdeSeries { t, v1, v2, w, delay })
}

/// Input history on [−1/λ, 0) making w(x₁) = 0 for every x₁, given v₀ and v₀′:
/// U(−x/λ) = −(ψv₀(x) + λv₀′(x))/ω. Returns `None` when ω = 0.
pub fn compatible_history<'a>(
    scfg: &SimplifiedConfig,
    v0: &'a dyn Fn(f64) -> f64,
    dv0: &'a dyn Fn(f64) -> f64,
    future: &'a dyn Fn(f64) -> f64,
) -> Option<impl Fn(f64) -> f64 + 'a> {
    let s = *scfg;
    if s.omega == 0.0 {
        return None;
    }
    Some(move |t: f64| {
        if t <= 0.0 {
            let x = -s.lambda * t;
            -(s.psi * v0(x) + s.lambda * dv0(x)) / s.omega
        } else {
            future(t)
        }
    })
}

/// Result of the subspace feedback law.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeedbackValue {
    pub value: f64,
    /// Set when ω = 0: the law degenerates and U = 0 is returned.
    pub degenerate: bool,
}

/// U = −(k/ω)v(t,0). The closed loop on S reduces to ẏ = (ψ − k)y with
/// y = v(t,0), so decay needs k > ψ.
pub fn subspace_feedback(scfg: &SimplifiedConfig, k: f64, v_at_zero: f64) -> FeedbackValue {
    if scfg.omega == 0.0 {
        return FeedbackValue { value: 0.0, degenerate: true };
    }
    FeedbackValue { value: -(k / scfg.omega) * v_at_zero, degenerate: false }
}
