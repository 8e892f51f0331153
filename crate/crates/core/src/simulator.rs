//! Explicit upwind / forward-Euler simulation of the full plant and of the
//! scalar simplified system, plus the exact solution of the latter.

use crate::error::{Error, Result};
use crate::kernels::KernelSet;
use crate::model::{interp_nodes, Grid, StateSnapshot, ValidatedConfig};
use crate::transforms;

/// Magnitude beyond which a run is declared divergent.
pub const DIVERGENCE_BOUND: f64 = 1e12;

/// Boundary input at x = 0.
pub enum Controller<'a> {
    /// U ≡ 0.
    OpenLoop,
    /// U = −q p(t,0), so that u(t,0) = 0.
    ZeroBoundary,
    /// Backstepping feedback with the given kernels (resampled to the state grid).
    Backstepping(&'a KernelSet),
    /// Scripted input U(t).
    Signal(&'a dyn Fn(f64) -> f64),
}

/// Per-step diagnostics, recorded at every time level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub t: f64,
    pub input: f64,
    pub norm_u: f64,
    pub norm_p: f64,
    pub norm_v: f64,
    pub lyapunov: Option<f64>,
}

impl StepRecord {
    pub fn total_norm(&self) -> f64 {
        (self.norm_u.powi(2) + self.norm_p.powi(2) + self.norm_v.powi(2)).sqrt()
    }
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub grid: Grid,
    /// Time step actually used (≤ `grid.dt`, adjusted to land on `t_final`).
    pub dt: f64,
    pub snapshots: Vec<StateSnapshot>,
    pub records: Vec<StepRecord>,
}

/// Number of steps and the adjusted step landing exactly on `t_final`.
fn step_plan(t_final: f64, dt: f64) -> (usize, f64) {
    if t_final <= 0.0 {
        return (0, dt);
    }
    let steps = ((t_final / dt) - 1e-9).ceil().max(1.0) as usize;
    (steps, t_final / steps as f64)
}

fn check_cfl(grid: &Grid, speed: f64) -> Result<()> {
    let courant = grid.dt * speed / grid.dx;
    if !(courant <= 1.0 + 1e-12) {
        return Err(Error::Cfl { courant });
    }
    Ok(())
}

/// Simulates the plant from `ic` up to `t_final`, storing every `stride`-th
/// snapshot (the first and last are always stored).
pub fn simulate(
    cfg: &ValidatedConfig,
    grid: &Grid,
    ic: &StateSnapshot,
    t_final: f64,
    controller: &Controller<'_>,
    stride: usize,
) -> Result<Trajectory> {
    simulate_observed(cfg, grid, ic, t_final, controller, stride, None)
}

/// As [`simulate`], additionally evaluating `observer` (e.g. a Lyapunov
/// functional) on the state after every step.
pub fn simulate_observed(
    cfg: &ValidatedConfig,
    grid: &Grid,
    ic: &StateSnapshot,
    t_final: f64,
    controller: &Controller<'_>,
    stride: usize,
    observer: Option<&dyn Fn(&StateSnapshot) -> f64>,
) -> Result<Trajectory> {
    check_cfl(grid, cfg.max_speed())?;
    ic.check(grid, cfg.n)?;
    let stride = stride.max(1);
    let m = grid.m;
    let n = cfg.n;
    let (steps, dt) = step_plan(t_final, grid.dt);
    let resampled;
    let kernels = match controller {
        Controller::Backstepping(ks) => {
            if ks.n != n {
                return Err(Error::GridMismatch {
                    module: "simulator",
                    detail: format!("kernels have n = {}, plant has n = {n}", ks.n),
                });
            }
            resampled = ks.resample(m);
            Some(&resampled)
        }
        _ => None,
    };
    let input_of = |state: &StateSnapshot| -> f64 {
        match controller {
            Controller::OpenLoop => 0.0,
            Controller::ZeroBoundary => -cfg.q * state.p[0],
            Controller::Signal(f) => f(state.t),
            Controller::Backstepping(_) => {
                let ks = kernels.expect("kernels resampled above");
                let (integral, _) = transforms::feedback_integral(state, ks);
                -cfg.q * state.p[0] + integral
            }
        }
    };
    let record = |state: &StateSnapshot, input: f64| {
        let (norm_u, norm_p, norm_v) = state.norms(grid);
        StepRecord {
            t: state.t,
            input,
            norm_u,
            norm_p,
            norm_v,
            lyapunov: observer.map(|f| f(state)),
        }
    };

    let mut state = ic.clone();
    state.t = 0.0;
    let mut traj = Trajectory {
        grid: *grid,
        dt,
        snapshots: vec![state.clone()],
        records: vec![record(&state, input_of(&state))],
    };
    let c1 = cfg.lambda1 * dt / grid.dx;
    let c2 = cfg.lambda2 * dt / grid.dx;
    let mut next = state.clone();
    for step in 1..=steps {
        let (u, p, v) = (&state.u, &state.p, &state.v);
        for j in 0..=m {
            let mut su = cfg.sigma12 * p[j];
            let mut sp = cfg.sigma21 * u[j];
            for c in 0..n {
                su += cfg.theta1[c] * v[c][j];
                sp += cfg.theta2[c] * v[c][j];
            }
            if j > 0 {
                next.u[j] = u[j] - c1 * (u[j] - u[j - 1]) + dt * su;
            }
            if j < m {
                next.p[j] = p[j] + c2 * (p[j + 1] - p[j]) + dt * sp;
            }
            for r in 0..n {
                let mut sv = cfg.omega1[r] * u[j] + cfg.omega2[r] * p[j];
                for c in 0..n {
                    sv += cfg.psi[(r, c)] * v[c][j];
                }
                next.v[r][j] = v[r][j] + dt * sv;
            }
        }
        next.t = step as f64 * dt;
        next.p[m] = cfg.rho * next.u[m];
        let input = match (controller, kernels) {
            (Controller::Backstepping(_), Some(ks)) => {
                // U depends on u(0) through the quadrature weight at ξ = 0;
                // solve u(0) = U + q p(0) for u(0) exactly.
                next.u[0] = 0.0;
                let (rest, w0) = transforms::feedback_integral(&next, ks);
                next.u[0] = rest / (1.0 - w0);
                next.u[0] - cfg.q * next.p[0]
            }
            _ => {
                let input = input_of(&next);
                next.u[0] = input + cfg.q * next.p[0];
                input
            }
        };
        std::mem::swap(&mut state, &mut next);
        let max = state.max_abs();
        if !max.is_finite() || max > DIVERGENCE_BOUND {
            return Err(Error::Diverged { step, t: state.t });
        }
        traj.records.push(record(&state, input));
        if step % stride == 0 || step == steps {
            traj.snapshots.push(state.clone());
        }
    }
    Ok(traj)
}

/// (λ, ψ, ω) of the scalar system u_t + λu_x = 0, u(t,0) = U(t), v_t = ψv + ωu.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimplifiedConfig {
    pub lambda: f64,
    pub psi: f64,
    pub omega: f64,
}

impl SimplifiedConfig {
    pub fn validate(self) -> Result<Self> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::config("lambda", "must be positive"));
        }
        if !self.psi.is_finite() {
            return Err(Error::config("psi", "must be finite"));
        }
        if !self.omega.is_finite() {
            return Err(Error::config("omega", "must be finite"));
        }
        Ok(self)
    }
}

/// Boundary input of the simplified system.
pub enum SimplifiedInput<'a> {
    Signal(&'a dyn Fn(f64) -> f64),
    /// U = −(k/ω) v(t,0).
    SubspaceFeedback { k: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalarSnapshot {
    pub t: f64,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ScalarTrajectory {
    pub grid: Grid,
    pub snapshots: Vec<ScalarSnapshot>,
}

/// Finite-difference simulation of the simplified system.
pub fn simulate_simplified_fd(
    scfg: &SimplifiedConfig,
    grid: &Grid,
    u0: &[f64],
    v0: &[f64],
    input: &SimplifiedInput<'_>,
    t_final: f64,
    stride: usize,
) -> Result<ScalarTrajectory> {
    let scfg = scfg.validate()?;
    check_cfl(grid, scfg.lambda)?;
    let m = grid.m;
    if u0.len() != m + 1 || v0.len() != m + 1 {
        return Err(Error::GridMismatch {
            module: "simulator",
            detail: format!("initial data has {} / {} nodes, grid has {}", u0.len(), v0.len(), m + 1),
        });
    }
    let stride = stride.max(1);
    let (steps, dt) = step_plan(t_final, grid.dt);
    let c = scfg.lambda * dt / grid.dx;
    let mut cur = ScalarSnapshot { t: 0.0, u: u0.to_vec(), v: v0.to_vec() };
    let mut traj = ScalarTrajectory { grid: *grid, snapshots: vec![cur.clone()] };
    let mut next = cur.clone();
    for step in 1..=steps {
        for j in 0..=m {
            if j > 0 {
                next.u[j] = cur.u[j] - c * (cur.u[j] - cur.u[j - 1]);
            }
            next.v[j] = cur.v[j] + dt * (scfg.psi * cur.v[j] + scfg.omega * cur.u[j]);
        }
        next.t = step as f64 * dt;
        next.u[0] = match input {
            SimplifiedInput::Signal(f) => f(next.t),
            SimplifiedInput::SubspaceFeedback { k } => {
                crate::analysis::subspace_feedback(&scfg, *k, next.v[0]).value
            }
        };
        std::mem::swap(&mut cur, &mut next);
        let max = cur.u.iter().chain(&cur.v).fold(0.0f64, |a, x| a.max(x.abs()));
        if !max.is_finite() || max > DIVERGENCE_BOUND {
            return Err(Error::Diverged { step, t: cur.t });
        }
        if step % stride == 0 || step == steps {
            traj.snapshots.push(cur.clone());
        }
    }
    Ok(traj)
}

/// Trapezoid rule for ∫_a^b f with at most `max_step` spacing.
fn integrate_fn(f: impl Fn(f64) -> f64, a: f64, b: f64, max_step: f64) -> f64 {
    if b <= a {
        return 0.0;
    }
    let pieces = ((b - a) / max_step).ceil().max(1.0) as usize;
    let h = (b - a) / pieces as f64;
    let mut s = 0.5 * (f(a) + f(b));
    for k in 1..pieces {
        s += f(a + k as f64 * h);
    }
    s * h
}

/// Exact solution of the simplified system at the requested times:
/// u(t,x) = u₀(x − λt) for t ≤ x/λ, else U(t − x/λ), and
/// v(t,x) = e^{ψt}v₀(x) + ω∫₀ᵗ e^{ψ(t−s)}u(s,x)ds.
///
/// u₀ is evaluated off-grid by linear interpolation of its samples; the time
/// integral is split at s = x/λ and each piece uses the trapezoid rule with
/// step at most `grid.dt`.
pub fn simulate_simplified_exact(
    scfg: &SimplifiedConfig,
    u0: &[f64],
    v0: &[f64],
    input: &dyn Fn(f64) -> f64,
    times: &[f64],
    grid: &Grid,
) -> Result<ScalarTrajectory> {
    let scfg = scfg.validate()?;
    let m = grid.m;
    if u0.len() != m + 1 || v0.len() != m + 1 {
        return Err(Error::GridMismatch {
            module: "simulator",
            detail: format!("initial data has {} / {} nodes, grid has {}", u0.len(), v0.len(), m + 1),
        });
    }
    let lam = scfg.lambda;
    let u_at = |t: f64, x: f64| -> f64 {
        if t * lam <= x {
            interp_nodes(u0, x - lam * t)
        } else {
            input(t - x / lam)
        }
    };
    let snapshots = times
        .iter()
        .map(|&t| {
            let xs = grid.xs();
            let u = xs.iter().map(|&x| u_at(t, x)).collect();
            let v = xs
                .iter()
                .enumerate()
                .map(|(j, &x)| {
                    let split = (x / lam).min(t);
                    let kernel = |s: f64| (scfg.psi * (t - s)).exp() * u_at(s, x);
                    let integral = integrate_fn(kernel, 0.0, split, grid.dt)
                        + integrate_fn(kernel, split, t, grid.dt);
                    (scfg.psi * t).exp() * v0[j] + scfg.omega * integral
                })
                .collect();
            ScalarSnapshot { t, u, v }
        })
        .collect();
    Ok(ScalarTrajectory { grid: *grid, snapshots })
}
