//! SDE problem definitions: coefficient callbacks with explicit Jacobians,
//! jump specifications with scalar mark laws, the built-in benchmark
//! problems, and structural precondition checks (commutativity of the
//! diffusion/jump coefficients, Jacobian consistency).
//!
//! Coefficients write into caller-provided buffers so the stepping kernels
//! stay allocation-free. Layouts: the diffusion matrix is row-major `d x m`
//! (`sigma[i*m + j]`), its Jacobian is `d x m x d` (`jac[(i*m + j)*d + k]`
//! holding the derivative of entry `(i, j)` in direction `k`), and the jump
//! Jacobian is `d x d` (`jac[i*d + k]`).

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};

/// State-dependent coefficient: writes an output vector/matrix for the
/// given state. Must be pure.
pub type CoeffFn = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;

/// Mark-dependent jump coefficient: `(state, mark, out)`.
pub type JumpFn = Arc<dyn Fn(&[f64], f64, &mut [f64]) + Send + Sync>;

/// Scalar law of the jump marks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MarkDistribution {
    Normal { mean: f64, variance: f64 },
    Uniform { lo: f64, hi: f64 },
    Degenerate { value: f64 },
}

impl MarkDistribution {
    pub fn validate(&self) -> Result<()> {
        match *self {
            MarkDistribution::Normal { variance, .. } if !(variance > 0.0) => Err(Error::Config(
                format!("normal mark law requires variance > 0, got {variance}"),
            )),
            MarkDistribution::Uniform { lo, hi } if !(lo < hi) => Err(Error::Config(format!(
                "uniform mark law requires lo < hi, got [{lo}, {hi}]"
            ))),
            _ => Ok(()),
        }
    }

    pub fn mean(&self) -> f64 {
        match *self {
            MarkDistribution::Normal { mean, .. } => mean,
            MarkDistribution::Uniform { lo, hi } => 0.5 * (lo + hi),
            MarkDistribution::Degenerate { value } => value,
        }
    }
}

/// Jump part of an SDE problem: finite-activity Poisson jumps with scalar
/// marks, `gamma(x, z)` and its state Jacobian.
#[derive(Clone)]
pub struct JumpSpec {
    /// Total jump intensity `lambda = nu(Z)`.
    pub intensity: f64,
    pub mark_law: MarkDistribution,
    pub coefficient: JumpFn,
    pub coefficient_jacobian: JumpFn,
    /// Closed-form mark expectation `x -> E[gamma(x, Z)]`, required by
    /// drift compensation when the marks are not mean-zero. For a
    /// mark-independent coefficient this is just `x -> gamma(x)`.
    pub compensator: Option<CoeffFn>,
    /// Whether `integral of gamma(x, z) nu(dz)` vanishes identically.
    pub mark_mean_zero: bool,
    /// Whether `gamma` actually varies with the mark.
    pub mark_dependent: bool,
}

impl JumpSpec {
    fn validate(&self) -> Result<()> {
        if !(self.intensity >= 0.0) || !self.intensity.is_finite() {
            return Err(Error::Config(format!(
                "jump intensity must be a finite nonnegative real, got {}",
                self.intensity
            )));
        }
        self.mark_law.validate()
    }
}

/// A Lévy-driven SDE problem: drift, diffusion with Jacobian, optional
/// jumps, deterministic initial value and time horizon.
#[derive(Clone)]
pub struct SdeProblem {
    pub name: String,
    /// State dimension `d`.
    pub dim_state: usize,
    /// Brownian dimension `m`.
    pub dim_noise: usize,
    pub drift: CoeffFn,
    pub diffusion: CoeffFn,
    pub diffusion_jacobian: CoeffFn,
    pub jump: Option<JumpSpec>,
    pub initial_value: Vec<f64>,
    pub horizon: f64,
    /// Polynomial-Lipschitz exponent of the drift derivative; metadata only.
    pub growth_exponent: f64,
}

impl fmt::Debug for SdeProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SdeProblem")
            .field("name", &self.name)
            .field("dim_state", &self.dim_state)
            .field("dim_noise", &self.dim_noise)
            .field("has_jumps", &self.jump.is_some())
            .field("initial_value", &self.initial_value)
            .field("horizon", &self.horizon)
            .field("growth_exponent", &self.growth_exponent)
            .finish()
    }
}

impl SdeProblem {
    pub fn builder(name: impl Into<String>, dim_state: usize, dim_noise: usize) -> SdeProblemBuilder {
        SdeProblemBuilder {
            name: name.into(),
            dim_state,
            dim_noise,
            drift: None,
            diffusion: None,
            diffusion_jacobian: None,
            jump: None,
            initial_value: None,
            horizon: 1.0,
            growth_exponent: 0.0,
        }
    }

    /// The same problem started from a different (deterministic) point.
    pub fn with_initial_value(mut self, initial_value: Vec<f64>) -> Result<Self> {
        if initial_value.len() != self.dim_state {
            return Err(Error::Config(format!(
                "initial value has length {}, problem dimension is {}",
                initial_value.len(),
                self.dim_state
            )));
        }
        self.initial_value = initial_value;
        Ok(self)
    }

    pub fn has_jumps(&self) -> bool {
        self.jump.is_some()
    }

    /// Jump intensity, zero for continuous problems.
    pub fn intensity(&self) -> f64 {
        self.jump.as_ref().map_or(0.0, |j| j.intensity)
    }

    pub fn drift_into(&self, x: &[f64], out: &mut [f64]) {
        (self.drift)(x, out);
    }

    pub fn diffusion_into(&self, x: &[f64], out: &mut [f64]) {
        (self.diffusion)(x, out);
    }

    pub fn diffusion_jacobian_into(&self, x: &[f64], out: &mut [f64]) {
        (self.diffusion_jacobian)(x, out);
    }
}

pub struct SdeProblemBuilder {
    name: String,
    dim_state: usize,
    dim_noise: usize,
    drift: Option<CoeffFn>,
    diffusion: Option<CoeffFn>,
    diffusion_jacobian: Option<CoeffFn>,
    jump: Option<JumpSpec>,
    initial_value: Option<Vec<f64>>,
    horizon: f64,
    growth_exponent: f64,
}

impl SdeProblemBuilder {
    pub fn drift(mut self, f: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        self.drift = Some(Arc::new(f));
        self
    }

    pub fn diffusion(mut self, f: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        self.diffusion = Some(Arc::new(f));
        self
    }

    pub fn diffusion_jacobian(
        mut self,
        f: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        self.diffusion_jacobian = Some(Arc::new(f));
        self
    }

    pub fn jump(mut self, jump: JumpSpec) -> Self {
        self.jump = Some(jump);
        self
    }

    pub fn initial_value(mut self, xi: Vec<f64>) -> Self {
        self.initial_value = Some(xi);
        self
    }

    pub fn horizon(mut self, t: f64) -> Self {
        self.horizon = t;
        self
    }

    pub fn growth_exponent(mut self, chi: f64) -> Self {
        self.growth_exponent = chi;
        self
    }

    pub fn build(self) -> Result<SdeProblem> {
        if self.dim_state == 0 || self.dim_noise == 0 {
            return Err(Error::Config(
                "state and noise dimensions must be positive".into(),
            ));
        }
        if !(self.horizon > 0.0) || !self.horizon.is_finite() {
            return Err(Error::Config(format!(
                "horizon must be a positive finite real, got {}",
                self.horizon
            )));
        }
        if !(self.growth_exponent >= 0.0) {
            return Err(Error::Config(format!(
                "growth exponent must be nonnegative, got {}",
                self.growth_exponent
            )));
        }
        let drift = self
            .drift
            .ok_or_else(|| Error::Config("drift coefficient is required".into()))?;
        let diffusion = self
            .diffusion
            .ok_or_else(|| Error::Config("diffusion coefficient is required".into()))?;
        let diffusion_jacobian = self
            .diffusion_jacobian
            .ok_or_else(|| Error::Config("diffusion Jacobian is required".into()))?;
        let initial_value = self
            .initial_value
            .ok_or_else(|| Error::Config("initial value is required".into()))?;
        if initial_value.len() != self.dim_state {
            return Err(Error::Config(format!(
                "initial value has length {}, expected {}",
                initial_value.len(),
                self.dim_state
            )));
        }
        if !initial_value.iter().all(|v| v.is_finite()) {
            return Err(Error::Config("initial value must be finite".into()));
        }
        if let Some(ref jump) = self.jump {
            jump.validate()?;
        }
        Ok(SdeProblem {
            name: self.name,
            dim_state: self.dim_state,
            dim_noise: self.dim_noise,
            drift,
            diffusion,
            diffusion_jacobian,
            jump: self.jump,
            initial_value,
            horizon: self.horizon,
            growth_exponent: self.growth_exponent,
        })
    }
}

/// Names accepted by [`builtin_problem`].
pub const BUILTIN_NAMES: [&str; 5] = [
    "example1",
    "example2-normal-λ3",
    "example2-normal-λ5",
    "example2-uniform-λ3",
    "example2-uniform-λ5",
];

/// Returns one of the built-in benchmark problems.
///
/// `example1` is the continuous problem `dx = (x - x^5) dt + x dw` from
/// `x_0 = 1` on `[0, 1]`. The `example2-*` variants are the jump problem
/// `dx = -0.10 x^3 dt + x dw + x z dN` with intensity 3 or 5 and marks
/// either normal (mean 0, variance 0.125) or uniform on `[-1/4, 1/4]`.
/// ASCII spellings (`example2-normal-lambda3`, ...) are accepted as aliases.
pub fn builtin_problem(name: &str) -> Result<SdeProblem> {
    let canonical = name.replace("lambda", "λ");
    match canonical.as_str() {
        "example1" => example1(),
        "example2-normal-λ3" => example2(
            &canonical,
            MarkDistribution::Normal {
                mean: 0.0,
                variance: 0.125,
            },
            3.0,
        ),
        "example2-normal-λ5" => example2(
            &canonical,
            MarkDistribution::Normal {
                mean: 0.0,
                variance: 0.125,
            },
            5.0,
        ),
        "example2-uniform-λ3" => example2(
            &canonical,
            MarkDistribution::Uniform { lo: -0.25, hi: 0.25 },
            3.0,
        ),
        "example2-uniform-λ5" => example2(
            &canonical,
            MarkDistribution::Uniform { lo: -0.25, hi: 0.25 },
            5.0,
        ),
        _ => Err(Error::Config(format!(
            "unknown problem {name:?}; valid names: {}",
            BUILTIN_NAMES.join(", ")
        ))),
    }
}

fn example1() -> Result<SdeProblem> {
    SdeProblem::builder("example1", 1, 1)
        .drift(|x, out| out[0] = x[0] - x[0].powi(5))
        .diffusion(|x, out| out[0] = x[0])
        .diffusion_jacobian(|_, out| out[0] = 1.0)
        .initial_value(vec![1.0])
        .horizon(1.0)
        .growth_exponent(3.0)
        .build()
}

fn example2(name: &str, mark_law: MarkDistribution, intensity: f64) -> Result<SdeProblem> {
    SdeProblem::builder(name, 1, 1)
        .drift(|x, out| out[0] = -0.10 * x[0].powi(3))
        .diffusion(|x, out| out[0] = x[0])
        .diffusion_jacobian(|_, out| out[0] = 1.0)
        .jump(JumpSpec {
            intensity,
            mark_law,
            coefficient: Arc::new(|x, z, out| out[0] = x[0] * z),
            coefficient_jacobian: Arc::new(|_, z, out| out[0] = z),
            compensator: None,
            // Both mark laws have mean zero and gamma is linear in z.
            mark_mean_zero: true,
            mark_dependent: true,
        })
        .initial_value(vec![1.0])
        .horizon(1.0)
        .growth_exponent(1.0)
        .build()
}

/// Outcome of a commutativity check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CommutativityReport {
    pub max_violation: f64,
    pub ok: bool,
}

/// Checks the diffusion commutativity condition
/// `sum_u sigma^(u,j) d sigma^(i,k)/dx^u == sum_u sigma^(u,k) d sigma^(i,j)/dx^u`
/// for all `i, j, k` at every sample point.
pub fn check_diffusion_commutativity(
    problem: &SdeProblem,
    samples: &[Vec<f64>],
    tol: f64,
) -> Result<CommutativityReport> {
    if samples.is_empty() {
        return Err(Error::Domain(
            "commutativity check needs at least one sample point".into(),
        ));
    }
    let (d, m) = (problem.dim_state, problem.dim_noise);
    let mut sigma = vec![0.0; d * m];
    let mut jac = vec![0.0; d * m * d];
    let mut max_violation = 0.0f64;
    for x in samples {
        check_sample_dims(x, d)?;
        problem.diffusion_into(x, &mut sigma);
        problem.diffusion_jacobian_into(x, &mut jac);
        for i in 0..d {
            for j in 0..m {
                for k in 0..m {
                    let mut lhs = 0.0;
                    let mut rhs = 0.0;
                    for u in 0..d {
                        lhs += sigma[u * m + j] * jac[(i * m + k) * d + u];
                        rhs += sigma[u * m + k] * jac[(i * m + j) * d + u];
                    }
                    let violation = (lhs - rhs).abs();
                    if !violation.is_finite() {
                        return Err(Error::Domain(format!(
                            "diffusion commutativity evaluation not finite at {x:?}"
                        )));
                    }
                    max_violation = max_violation.max(violation);
                }
            }
        }
    }
    Ok(CommutativityReport {
        max_violation,
        ok: max_violation <= tol,
    })
}

/// Checks the jump commutativity condition
/// `sigma^(k,j)(x + gamma(x)) - sigma^(k,j)(x) == sum_u d gamma^k/dx^u sigma^(u,j)(x)`
/// for mark-independent jump coefficients.
pub fn check_jump_commutativity(
    problem: &SdeProblem,
    samples: &[Vec<f64>],
    tol: f64,
) -> Result<CommutativityReport> {
    if samples.is_empty() {
        return Err(Error::Domain(
            "commutativity check needs at least one sample point".into(),
        ));
    }
    let Some(jump) = problem.jump.as_ref() else {
        // No jumps: both sides vanish identically.
        return Ok(CommutativityReport {
            max_violation: 0.0,
            ok: true,
        });
    };
    if jump.mark_dependent {
        return Err(Error::Domain(
            "jump commutativity defined only for mark-independent γ".into(),
        ));
    }
    let (d, m) = (problem.dim_state, problem.dim_noise);
    let mut sigma = vec![0.0; d * m];
    let mut sigma_shift = vec![0.0; d * m];
    let mut gamma = vec![0.0; d];
    let mut gjac = vec![0.0; d * d];
    let mut shifted = vec![0.0; d];
    let mut max_violation = 0.0f64;
    for x in samples {
        check_sample_dims(x, d)?;
        problem.diffusion_into(x, &mut sigma);
        (jump.coefficient)(x, 0.0, &mut gamma);
        (jump.coefficient_jacobian)(x, 0.0, &mut gjac);
        for i in 0..d {
            shifted[i] = x[i] + gamma[i];
        }
        problem.diffusion_into(&shifted, &mut sigma_shift);
        for k in 0..d {
            for j in 0..m {
                let mut rhs = 0.0;
                for u in 0..d {
                    rhs += gjac[k * d + u] * sigma[u * m + j];
                }
                let violation = (sigma_shift[k * m + j] - sigma[k * m + j] - rhs).abs();
                if !violation.is_finite() {
                    return Err(Error::Domain(format!(
                        "jump commutativity evaluation not finite at {x:?}"
                    )));
                }
                max_violation = max_violation.max(violation);
            }
        }
    }
    Ok(CommutativityReport {
        max_violation,
        ok: max_violation <= tol,
    })
}

fn check_sample_dims(x: &[f64], d: usize) -> Result<()> {
    if x.len() != d {
        return Err(Error::Domain(format!(
            "sample point has dimension {}, expected {}",
            x.len(),
            d
        )));
    }
    if !x.iter().all(|v| v.is_finite()) {
        return Err(Error::Domain(format!("sample point not finite: {x:?}")));
    }
    Ok(())
}

/// 64 quasi-uniform points in `[-2, 2]^d` (Kronecker sequence based on the
/// generalized golden ratio), the default sample set for the structural
/// checks.
pub fn default_sample_points(dim: usize) -> Vec<Vec<f64>> {
    // phi_d is the unique positive root of x^(d+1) = x + 1 (Newton iteration).
    let mut phi = 1.5f64;
    let p = dim as f64 + 1.0;
    for _ in 0..64 {
        let f = phi.powf(p) - phi - 1.0;
        let fp = p * phi.powf(p - 1.0) - 1.0;
        phi -= f / fp;
    }
    let alphas: Vec<f64> = (1..=dim).map(|j| phi.powi(-(j as i32)).fract()).collect();
    (0..64)
        .map(|k| {
            alphas
                .iter()
                .map(|a| {
                    let u = (0.5 + (k as f64 + 1.0) * a).fract();
                    -2.0 + 4.0 * u
                })
                .collect()
        })
        .collect()
}

/// Outcome of the finite-difference Jacobian consistency check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JacobianReport {
    pub max_rel_error_diffusion: f64,
    /// NaN-free zero when the problem has no jumps.
    pub max_rel_error_jump: f64,
    pub ok: bool,
}

/// Compares the declared Jacobians against central finite differences of the
/// coefficients at the given points. The error is relative with an absolute
/// floor of 1 (`|fd - jac| <= rel_tol * max(1, |jac|)`).
pub fn check_jacobian_consistency(
    problem: &SdeProblem,
    points: &[Vec<f64>],
    step: f64,
    rel_tol: f64,
) -> Result<JacobianReport> {
    if points.is_empty() {
        return Err(Error::Domain("jacobian check needs sample points".into()));
    }
    let (d, m) = (problem.dim_state, problem.dim_noise);
    let mut jac = vec![0.0; d * m * d];
    let mut plus = vec![0.0; d * m];
    let mut minus = vec![0.0; d * m];
    let mut xp = vec![0.0; d];
    let mut max_rel_diffusion = 0.0f64;
    for x in points {
        check_sample_dims(x, d)?;
        problem.diffusion_jacobian_into(x, &mut jac);
        for k in 0..d {
            xp.copy_from_slice(x);
            xp[k] = x[k] + step;
            problem.diffusion_into(&xp, &mut plus);
            xp[k] = x[k] - step;
            problem.diffusion_into(&xp, &mut minus);
            for i in 0..d {
                for j in 0..m {
                    let fd = (plus[i * m + j] - minus[i * m + j]) / (2.0 * step);
                    let declared = jac[(i * m + j) * d + k];
                    let rel = (fd - declared).abs() / declared.abs().max(1.0);
                    max_rel_diffusion = max_rel_diffusion.max(rel);
                }
            }
        }
    }
    let mut max_rel_jump = 0.0f64;
    if let Some(jump) = problem.jump.as_ref() {
        let mut gjac = vec![0.0; d * d];
        let mut gplus = vec![0.0; d];
        let mut gminus = vec![0.0; d];
        // Probe a handful of marks; for mark-independent coefficients
        // anything works, for mark-dependent ones this covers the range
        // the built-in laws actually produce.
        let marks = [0.0, 0.1, -0.2, 0.25];
        for x in points {
            for &z in &marks {
                (jump.coefficient_jacobian)(x, z, &mut gjac);
                for k in 0..d {
                    xp.copy_from_slice(x);
                    xp[k] = x[k] + step;
                    (jump.coefficient)(&xp, z, &mut gplus);
                    xp[k] = x[k] - step;
                    (jump.coefficient)(&xp, z, &mut gminus);
                    for i in 0..d {
                        let fd = (gplus[i] - gminus[i]) / (2.0 * step);
                        let declared = gjac[i * d + k];
                        let rel = (fd - declared).abs() / declared.abs().max(1.0);
                        max_rel_jump = max_rel_jump.max(rel);
                    }
                }
            }
        }
    }
    let ok = max_rel_diffusion <= rel_tol && max_rel_jump <= rel_tol;
    Ok(JacobianReport {
        max_rel_error_diffusion: max_rel_diffusion,
        max_rel_error_jump: max_rel_jump,
        ok,
    })
}
