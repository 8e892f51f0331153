//! Plant description, discretization grid and state samples.

use std::f64::consts::PI;
use std::ops::Deref;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{ConfigIssue, Error, Result};
use crate::matops::{self, SquareMatrix};

/// Coefficients of the (1+n+1) system
///
/// ```text
/// u_t = -λ₁ u_x + σ₁₂ p + Θ₁ v
/// v_t =  Ω₁ u + Ω₂ p + Ψ v
/// p_t =  λ₂ p_x + σ₂₁ u + Θ₂ v
/// u(t,0) = U(t) + q p(t,0),   p(t,1) = ρ u(t,1)
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct PlantConfig {
    pub n: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub sigma12: f64,
    pub sigma21: f64,
    /// Row vector coupling v into u.
    pub theta1: Vec<f64>,
    /// Row vector coupling v into p.
    pub theta2: Vec<f64>,
    /// Column vector coupling u into v.
    pub omega1: Vec<f64>,
    /// Column vector coupling p into v.
    pub omega2: Vec<f64>,
    pub psi: SquareMatrix,
    pub q: f64,
    pub rho: f64,
}

impl PlantConfig {
    /// The two-state example used throughout the tests and
    /// shipped as `configs/paper_iv.json`.
    pub fn two_state_example() -> Self {
        PlantConfig {
            n: 2,
            lambda1: 1.25,
            lambda2: 0.9,
            sigma12: 2.5,
            sigma21: -3.5,
            theta1: vec![0.25, 0.1],
            theta2: vec![0.25, -0.1],
            omega1: vec![0.3, -0.65],
            omega2: vec![0.8, 0.3],
            psi: SquareMatrix::from_rows(&[vec![-1.5, 2.0], vec![-1.0, -2.0]])
                .expect("static matrix"),
            q: -0.7,
            rho: 0.5,
        }
    }

    pub fn max_speed(&self) -> f64 {
        self.lambda1.max(self.lambda2)
    }
}

/// A configuration whose invariants hold, with spectral flags attached.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidatedConfig {
    cfg: PlantConfig,
    /// All eigenvalues of Ψ have negative real part.
    pub hurwitz: bool,
    /// Ψ + Ψᵀ is negative definite.
    pub sym_neg_definite: bool,
}

impl ValidatedConfig {
    pub fn config(&self) -> &PlantConfig {
        &self.cfg
    }

    pub fn into_inner(self) -> PlantConfig {
        self.cfg
    }
}

impl Deref for ValidatedConfig {
    type Target = PlantConfig;
    fn deref(&self) -> &PlantConfig {
        &self.cfg
    }
}

/// Checks every invariant of `cfg` and reports all violations at once.
///
/// Ψ being Hurwitz is reported as a flag rather than an error; callers decide
/// whether to enforce it.
pub fn validate_config(cfg: PlantConfig) -> Result<ValidatedConfig> {
    let mut issues = Vec::new();
    let mut push = |field: &str, message: String| {
        issues.push(ConfigIssue {
            field: field.to_string(),
            message,
        })
    };

    if cfg.n == 0 {
        push("n", "must be a positive integer".into());
    }
    for (name, v) in [("lambda1", cfg.lambda1), ("lambda2", cfg.lambda2)] {
        if !(v > 0.0 && v.is_finite()) {
            push(name, "must be positive".into());
        }
    }
    for (name, v) in [("q", cfg.q), ("rho", cfg.rho)] {
        if v == 0.0 || !v.is_finite() {
            push(name, "must be a nonzero finite reflection coefficient".into());
        }
    }
    for (name, v) in [("sigma12", cfg.sigma12), ("sigma21", cfg.sigma21)] {
        if !v.is_finite() {
            push(name, "must be finite".into());
        }
    }
    for (name, vec) in [
        ("theta1", &cfg.theta1),
        ("theta2", &cfg.theta2),
        ("omega1", &cfg.omega1),
        ("omega2", &cfg.omega2),
    ] {
        if vec.len() != cfg.n {
            push(name, format!("has {} entries, expected n = {}", vec.len(), cfg.n));
        } else if vec.iter().any(|x| !x.is_finite()) {
            push(name, "must be finite".into());
        }
    }
    if cfg.psi.order() != cfg.n {
        push(
            "psi",
            format!("is {0}x{0}, expected n = {1}", cfg.psi.order(), cfg.n),
        );
    } else if !cfg.psi.is_finite() {
        push("psi", "must be finite".into());
    }

    if !issues.is_empty() {
        return Err(Error::Config(issues));
    }

    let hurwitz = matops::eigen_real_parts(&cfg.psi)?
        .iter()
        .all(|&r| r < 0.0);
    let sym_neg_definite = matops::sym_decay_margin(&cfg.psi).is_some();
    Ok(ValidatedConfig {
        cfg,
        hurwitz,
        sym_neg_definite,
    })
}

/// Uniform collocated grid on [0,1] with nodes x_j = j/m.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid {
    pub m: usize,
    pub dx: f64,
    pub cfl: f64,
    pub dt: f64,
}

impl Grid {
    /// `dt = cfl · dx / max_speed`.
    pub fn new(m: usize, cfl: f64, max_speed: f64) -> Result<Self> {
        if m < 8 {
            return Err(Error::config("grid", format!("m = {m} is below the minimum of 8")));
        }
        if !(cfl > 0.0 && cfl <= 1.0) {
            return Err(Error::config("cfl", format!("{cfl} is outside (0, 1]")));
        }
        if !(max_speed > 0.0 && max_speed.is_finite()) {
            return Err(Error::config("speed", "must be positive"));
        }
        let dx = 1.0 / m as f64;
        Ok(Grid {
            m,
            dx,
            cfl,
            dt: cfl * dx / max_speed,
        })
    }

    pub fn for_plant(m: usize, cfl: f64, cfg: &PlantConfig) -> Result<Self> {
        Self::new(m, cfl, cfg.max_speed())
    }

    pub fn nodes(&self) -> usize {
        self.m + 1
    }

    pub fn x(&self, j: usize) -> f64 {
        j as f64 / self.m as f64
    }

    pub fn xs(&self) -> Vec<f64> {
        (0..=self.m).map(|j| self.x(j)).collect()
    }

    /// Composite trapezoid rule over [0,1].
    pub fn integrate(&self, f: &[f64]) -> f64 {
        trapezoid(f, self.dx)
    }

    /// √∫ f² dx
    pub fn l2_norm(&self, f: &[f64]) -> f64 {
        let sq: Vec<f64> = f.iter().map(|v| v * v).collect();
        self.integrate(&sq).sqrt()
    }
}

/// Composite trapezoid rule for equally spaced samples.
pub fn trapezoid(f: &[f64], h: f64) -> f64 {
    match f.len() {
        0 | 1 => 0.0,
        len => {
            let inner: f64 = f[1..len - 1].iter().sum();
            h * (0.5 * (f[0] + f[len - 1]) + inner)
        }
    }
}

/// F_j = ∫₀^{x_j} f by the trapezoid rule.
pub fn cumulative_trapezoid(f: &[f64], h: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(f.len());
    let mut acc = 0.0;
    for (j, v) in f.iter().enumerate() {
        if j > 0 {
            acc += 0.5 * h * (f[j - 1] + v);
        }
        out.push(acc);
    }
    out
}

/// Linear interpolation of node samples on [0,1]; clamps outside.
pub fn interp_nodes(f: &[f64], x: f64) -> f64 {
    let m = f.len() - 1;
    let s = (x * m as f64).clamp(0.0, m as f64);
    let i = (s.floor() as usize).min(m.saturating_sub(1));
    let frac = s - i as f64;
    if m == 0 {
        return f[0];
    }
    f[i] * (1.0 - frac) + f[i + 1] * frac
}

/// Grid samples of (u, p, v) at one time.
#[derive(Debug, Clone, PartialEq)]
pub struct StateSnapshot {
    pub t: f64,
    pub u: Vec<f64>,
    pub p: Vec<f64>,
    /// `v[k]` is the k-th zero-speed component sampled on the grid.
    pub v: Vec<Vec<f64>>,
}

impl StateSnapshot {
    pub fn zeros(grid: &Grid, n: usize) -> Self {
        let len = grid.nodes();
        StateSnapshot {
            t: 0.0,
            u: vec![0.0; len],
            p: vec![0.0; len],
            v: vec![vec![0.0; len]; n],
        }
    }

    pub fn nodes(&self) -> usize {
        self.u.len()
    }

    pub fn n(&self) -> usize {
        self.v.len()
    }

    /// Checks array lengths against the grid and finiteness.
    pub fn check(&self, grid: &Grid, n: usize) -> Result<()> {
        let len = grid.nodes();
        let bad_len = self.u.len() != len
            || self.p.len() != len
            || self.v.len() != n
            || self.v.iter().any(|r| r.len() != len);
        if bad_len {
            return Err(Error::GridMismatch {
                module: "model",
                detail: format!(
                    "state has {} nodes and {} zero-speed rows, grid expects {len} nodes and n = {n}",
                    self.u.len(),
                    self.v.len()
                ),
            });
        }
        if !self.is_finite() {
            return Err(Error::config("state", "contains non-finite values"));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.u.iter().chain(&self.p).chain(self.v.iter().flatten()).all(|x| x.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.u
            .iter()
            .chain(&self.p)
            .chain(self.v.iter().flatten())
            .fold(0.0, |m, x| m.max(x.abs()))
    }

    /// `a·self + other`, keeping `self.t`.
    pub fn axpy(&self, a: f64, other: &StateSnapshot) -> StateSnapshot {
        let comb = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(x, y)| a * x + y).collect();
        StateSnapshot {
            t: self.t,
            u: comb(&self.u, &other.u),
            p: comb(&self.p, &other.p),
            v: self.v.iter().zip(&other.v).map(|(x, y)| comb(x, y)).collect(),
        }
    }

    /// (‖u‖₂, ‖p‖₂, ‖v‖₂) with the v norm taken over all n components.
    pub fn norms(&self, grid: &Grid) -> (f64, f64, f64) {
        let nv = self
            .v
            .iter()
            .map(|r| grid.l2_norm(r).powi(2))
            .sum::<f64>()
            .sqrt();
        (grid.l2_norm(&self.u), grid.l2_norm(&self.p), nv)
    }

    pub fn total_norm(&self, grid: &Grid) -> f64 {
        let (a, b, c) = self.norms(grid);
        (a * a + b * b + c * c).sqrt()
    }
}

/// Initial-data presets.
#[derive(Debug, Clone, PartialEq)]
pub enum InitialCondition {
    Zero,
    Constant { u: f64, p: f64, v: f64 },
    /// u₀ = sin(2π k_u x), likewise for p₀ and every row of v₀.
    Sine { k_u: f64, k_p: f64, k_v: f64 },
    Samples {
        u: Vec<f64>,
        p: Vec<f64>,
        v: Vec<Vec<f64>>,
    },
}

impl std::str::FromStr for InitialCondition {
    type Err = Error;

    /// Parses `zero`, `constant:cu,cp,cv` and `sine:ku,kp,kv`. Sample files are
    /// loaded by the CLI.
    fn from_str(s: &str) -> Result<Self> {
        let (name, args) = s.split_once(':').unwrap_or((s, ""));
        let nums = || -> Result<[f64; 3]> {
            let parsed: std::result::Result<Vec<f64>, _> =
                args.split(',').map(|a| a.trim().parse::<f64>()).collect();
            match parsed {
                Ok(v) if v.len() == 3 => Ok([v[0], v[1], v[2]]),
                _ => Err(Error::config(
                    "ic",
                    format!("preset `{name}` needs three comma-separated numbers, got `{args}`"),
                )),
            }
        };
        match name {
            "zero" => Ok(InitialCondition::Zero),
            "constant" => {
                let [u, p, v] = nums()?;
                Ok(InitialCondition::Constant { u, p, v })
            }
            "sine" => {
                let [k_u, k_p, k_v] = nums()?;
                Ok(InitialCondition::Sine { k_u, k_p, k_v })
            }
            other => Err(Error::config("ic", format!("unknown preset `{other}`"))),
        }
    }
}

/// Samples the preset on `grid` at t = 0.
pub fn initial_condition(preset: &InitialCondition, grid: &Grid, n: usize) -> Result<StateSnapshot> {
    let len = grid.nodes();
    let xs = grid.xs();
    let sine = |k: f64| -> Vec<f64> { xs.iter().map(|x| (2.0 * PI * k * x).sin()).collect() };
    let state = match preset {
        InitialCondition::Zero => StateSnapshot::zeros(grid, n),
        InitialCondition::Constant { u, p, v } => StateSnapshot {
            t: 0.0,
            u: vec![*u; len],
            p: vec![*p; len],
            v: vec![vec![*v; len]; n],
        },
        InitialCondition::Sine { k_u, k_p, k_v } => StateSnapshot {
            t: 0.0,
            u: sine(*k_u),
            p: sine(*k_p),
            v: vec![sine(*k_v); n],
        },
        InitialCondition::Samples { u, p, v } => StateSnapshot {
            t: 0.0,
            u: u.clone(),
            p: p.clone(),
            v: v.clone(),
        },
    };
    if let InitialCondition::Samples { .. } = preset {
        state.check(grid, n).map_err(|_| {
            Error::config(
                "ic",
                format!(
                    "sample file has {} nodes / {} v rows, grid needs {len} nodes / n = {n}",
                    state.u.len(),
                    state.v.len()
                ),
            )
        })?;
    }
    Ok(state)
}

/// A random smooth state: a few low Fourier modes with seeded coefficients.
pub fn smooth_random_state(grid: &Grid, n: usize, seed: u64) -> StateSnapshot {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xs = grid.xs();
    let mut profile = || -> Vec<f64> {
        let coef: Vec<(f64, f64)> = (1..=4)
            .map(|_| (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect();
        xs.iter()
            .map(|x| {
                coef.iter()
                    .enumerate()
                    .map(|(k, (a, b))| {
                        let w = PI * (k + 1) as f64;
                        (a * (w * x).sin() + b * (w * x).cos()) / (k + 1) as f64
                    })
                    .sum()
            })
            .collect()
    };
    let u = profile();
    let p = profile();
    let v = (0..n).map(|_| profile()).collect();
    StateSnapshot { t: 0.0, u, p, v }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn example_config_is_valid_and_hurwitz() {
        let v = validate_config(PlantConfig::two_state_example()).unwrap();
        assert!(v.hurwitz);
        assert!(v.sym_neg_definite);
        assert_eq!(v.n, 2);
    }

    #[test]
    fn zero_speed_is_rejected_with_field_name() {
        let mut cfg = PlantConfig::two_state_example();
        cfg.lambda2 = 0.0;
        let err = validate_config(cfg).unwrap_err();
        assert!(err.to_string().contains("lambda2 must be positive"), "{err}");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn all_issues_are_reported() {
        let mut cfg = PlantConfig::two_state_example();
        cfg.q = 0.0;
        cfg.rho = 0.0;
        cfg.theta1.push(1.0);
        match validate_config(cfg) {
            Err(Error::Config(issues)) => {
                let fields: Vec<_> = issues.iter().map(|i| i.field.as_str()).collect();
                assert_eq!(fields, ["q", "rho", "theta1"]);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unstable_scalar_psi_is_valid_but_not_hurwitz() {
        let cfg = PlantConfig {
            n: 1,
            lambda1: 1.0,
            lambda2: 1.0,
            sigma12: 0.0,
            sigma21: 0.0,
            theta1: vec![0.0],
            theta2: vec![0.0],
            omega1: vec![1.0],
            omega2: vec![0.0],
            psi: SquareMatrix::diag(&[0.5]),
            q: 1.0,
            rho: 1.0,
        };
        let v = validate_config(cfg).unwrap();
        assert!(!v.hurwitz);
        assert!(!v.sym_neg_definite);
    }

    #[test]
    fn validation_is_idempotent() {
        let once = validate_config(PlantConfig::two_state_example()).unwrap();
        let twice = validate_config(once.config().clone()).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn hurwitz_flag_matches_eigen_real_parts() {
        for psi in [
            vec![vec![-1.0, 3.0], vec![0.0, 0.1]],
            vec![vec![-1.0, 3.0], vec![-3.0, -0.1]],
            vec![vec![0.0, 1.0], vec![-1.0, 0.0]],
        ] {
            let mut cfg = PlantConfig::two_state_example();
            cfg.psi = SquareMatrix::from_rows(&psi).unwrap();
            let re = matops::eigen_real_parts(&cfg.psi).unwrap();
            let v = validate_config(cfg).unwrap();
            assert_eq!(v.hurwitz, re.iter().all(|r| *r < 0.0));
        }
    }

    #[test]
    fn grid_invariants() {
        let g = Grid::new(200, 0.9, 1.25).unwrap();
        assert!((g.dt * 1.25 / g.dx - 0.9).abs() < 1e-12);
        assert!(Grid::new(4, 0.9, 1.0).is_err());
        assert!(Grid::new(16, 1.5, 1.0).is_err());
        assert!(Grid::new(16, 0.0, 1.0).is_err());
    }

    #[test]
    fn presets() {
        let g = Grid::new(8, 0.5, 1.0).unwrap();
        let z = initial_condition(&InitialCondition::Zero, &g, 2).unwrap();
        assert_eq!(z.max_abs(), 0.0);

        let c = initial_condition(&"constant:1,0,0".parse().unwrap(), &g, 1).unwrap();
        assert!(c.u.iter().all(|&x| x == 1.0));
        assert_eq!(c.p.iter().chain(&c.v[0]).fold(0.0f64, |m, x| m.max(x.abs())), 0.0);

        let g = Grid::new(200, 0.5, 1.0).unwrap();
        let s = initial_condition(&"sine:1,1,1".parse().unwrap(), &g, 2).unwrap();
        let (jmax, umax) = s
            .u
            .iter()
            .enumerate()
            .fold((0, 0.0f64), |acc, (j, &x)| if x.abs() > acc.1 { (j, x.abs()) } else { acc });
        assert!((umax - 1.0).abs() < 1e-12);
        assert!((g.x(jmax) - 0.25).abs() <= g.dx);
        assert_eq!(s.v.len(), 2);
    }

    #[test]
    fn preset_errors() {
        assert!("wobble".parse::<InitialCondition>().is_err());
        assert!("sine:1,2".parse::<InitialCondition>().is_err());
        let g = Grid::new(8, 0.5, 1.0).unwrap();
        let bad = InitialCondition::Samples {
            u: vec![0.0; 5],
            p: vec![0.0; 9],
            v: vec![vec![0.0; 9]],
        };
        let err = initial_condition(&bad, &g, 1).unwrap_err();
        assert!(err.to_string().contains("sample file"));
    }

    #[test]
    fn quadrature_helpers() {
        let h = 0.1;
        let f: Vec<f64> = (0..=10).map(|j| j as f64 * h).collect();
        assert!((trapezoid(&f, h) - 0.5).abs() < 1e-14);
        let c = cumulative_trapezoid(&f, h);
        assert!((c[10] - 0.5).abs() < 1e-14 && c[0] == 0.0);
        assert!((interp_nodes(&f, 0.35) - 0.35).abs() < 1e-14);
        assert_eq!(interp_nodes(&f, 2.0), 1.0);
    }
}
