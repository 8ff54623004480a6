//! One-step kernels and the path driver.
//!
//! Five kernels share one continuous core (tamed drift + diffusion +
//! Milstein correction); the jump kinds add their jump terms only when the
//! cell actually contains jumps, so a jump scheme on a jump-free path
//! executes exactly the same float operations as the continuous scheme and
//! the reduction identities hold bitwise.
//!
//! Divergence (non-finite state or norm above [`DIVERGENCE_NORM_CAP`]) halts
//! the path and sets a flag instead of raising: for the untamed baseline,
//! blow-up is an expected measurement.

use crate::error::{Error, Result};
use crate::model::{default_sample_points, SdeProblem};
use crate::model::{check_diffusion_commutativity, check_jump_commutativity};
use crate::noise::{coarsen, CellView, NoiseRealization};
use crate::numeric::{euclidean_norm, norm_squared};
use crate::taming::{TamingParams, THETA_EULER, THETA_MILSTEIN};

/// States whose Euclidean norm exceeds this are treated as diverged.
pub const DIVERGENCE_NORM_CAP: f64 = 1e12;

/// Absolute tolerance for the sampling-based commutativity validation.
pub const COMMUTATIVITY_TOL: f64 = 1e-10;

/// Which stepping kernel to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SchemeKind {
    TamedEuler,
    TamedMilsteinContinuous,
    TamedMilsteinJump1d,
    TamedMilsteinJumpCommutative,
    UntamedMilstein,
}

impl SchemeKind {
    pub const ALL: [SchemeKind; 5] = [
        SchemeKind::TamedEuler,
        SchemeKind::TamedMilsteinContinuous,
        SchemeKind::TamedMilsteinJump1d,
        SchemeKind::TamedMilsteinJumpCommutative,
        SchemeKind::UntamedMilstein,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            SchemeKind::TamedEuler => "tamed-euler",
            SchemeKind::TamedMilsteinContinuous => "tamed-milstein-continuous",
            SchemeKind::TamedMilsteinJump1d => "tamed-milstein-jump-1d",
            SchemeKind::TamedMilsteinJumpCommutative => "tamed-milstein-jump-commutative",
            SchemeKind::UntamedMilstein => "untamed-milstein",
        }
    }

    /// Default taming exponent: 1/2 for the Euler kernel, 1 for the
    /// Milstein-order kernels (ignored by the untamed baseline).
    pub fn default_theta(&self) -> f64 {
        match self {
            SchemeKind::TamedEuler => THETA_EULER,
            _ => THETA_MILSTEIN,
        }
    }

    pub(crate) fn is_tamed(&self) -> bool {
        !matches!(self, SchemeKind::UntamedMilstein)
    }
}

impl std::fmt::Display for SchemeKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for SchemeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SchemeKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown scheme {s:?}; valid schemes: {}",
                    SchemeKind::ALL.map(|k| k.name()).join(", ")
                ))
            })
    }
}

/// A kernel bound to a dyadic level, with its taming exponent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SchemeSpec {
    pub kind: SchemeKind,
    /// Dyadic level: the grid has `2^level` cells of width `horizon * 2^-level`.
    pub level: u32,
    theta: f64,
}

impl SchemeSpec {
    pub fn new(kind: SchemeKind, level: u32) -> Result<Self> {
        SchemeSpec::with_theta(kind, level, kind.default_theta())
    }

    /// Overrides the taming exponent. Only the Euler kernel admits exponents
    /// other than its default (it stays an order-1/2 scheme either way);
    /// Milstein kernels carry exactly the multiple stochastic integrals for
    /// theta = 1.
    pub fn with_theta(kind: SchemeKind, level: u32, theta: f64) -> Result<Self> {
        if level == 0 || level > crate::noise::MAX_LEVEL {
            return Err(Error::Config(format!(
                "scheme level must be in 1..={}, got {level}",
                crate::noise::MAX_LEVEL
            )));
        }
        if !(theta >= 0.5) || !theta.is_finite() {
            return Err(Error::Config(format!(
                "taming exponent must be >= 1/2, got {theta}"
            )));
        }
        if kind != SchemeKind::TamedEuler && theta != kind.default_theta() {
            return Err(Error::Config(format!(
                "scheme {kind} uses theta = {}, got {theta}",
                kind.default_theta()
            )));
        }
        Ok(SchemeSpec { kind, level, theta })
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    /// Step size on `[0, horizon]`.
    pub fn step_size(&self, horizon: f64) -> f64 {
        horizon / (1u64 << self.level) as f64
    }

    /// Taming parameters for this level (`n = 2^level / horizon`).
    pub fn taming(&self, horizon: f64) -> Result<TamingParams> {
        TamingParams::for_dyadic_level(self.level, horizon, self.theta)
    }

    /// Cheap structural compatibility rules between kernel and problem
    /// (dimensions, jump flags, compensator availability). Called on every
    /// `simulate_path`.
    pub fn structural_check(&self, problem: &SdeProblem) -> Result<()> {
        let jumps_active = problem.intensity() > 0.0;
        match self.kind {
            SchemeKind::TamedEuler => {}
            SchemeKind::TamedMilsteinContinuous | SchemeKind::UntamedMilstein => {
                if jumps_active {
                    return Err(Error::UnsupportedScheme(format!(
                        "{} requires a jump-free problem, but {:?} has intensity {}",
                        self.kind,
                        problem.name,
                        problem.intensity()
                    )));
                }
            }
            SchemeKind::TamedMilsteinJump1d => {
                if problem.dim_state != 1 || problem.dim_noise != 1 {
                    return Err(Error::UnsupportedScheme(format!(
                        "{} handles d = m = 1 only, problem {:?} is {}x{}",
                        self.kind, problem.name, problem.dim_state, problem.dim_noise
                    )));
                }
            }
            SchemeKind::TamedMilsteinJumpCommutative => {
                if let Some(jump) = problem.jump.as_ref() {
                    if jumps_active && jump.mark_dependent {
                        return Err(Error::UnsupportedScheme(format!(
                            "{} requires a mark-independent jump coefficient",
                            self.kind
                        )));
                    }
                }
            }
        }
        if jumps_active && self.kind != SchemeKind::UntamedMilstein {
            let jump = problem.jump.as_ref().unwrap();
            if !jump.mark_mean_zero && jump.compensator.is_none() {
                return Err(Error::Config("compensator required".into()));
            }
        }
        Ok(())
    }

    /// Full validation: the structural rules plus the sampling-based
    /// commutativity preconditions. Run this once per (scheme, problem)
    /// pair before a simulation campaign.
    pub fn validate_for(&self, problem: &SdeProblem) -> Result<()> {
        self.structural_check(problem)?;
        let needs_diffusion_commutativity = problem.dim_noise > 1
            && matches!(
                self.kind,
                SchemeKind::TamedMilsteinContinuous
                    | SchemeKind::UntamedMilstein
                    | SchemeKind::TamedMilsteinJumpCommutative
            );
        let samples = default_sample_points(problem.dim_state);
        if needs_diffusion_commutativity {
            let report = check_diffusion_commutativity(problem, &samples, COMMUTATIVITY_TOL)?;
            if !report.ok {
                return Err(Error::UnsupportedScheme(format!(
                    "{} requires commutative diffusion; max violation {:.3e}",
                    self.kind, report.max_violation
                )));
            }
        }
        if self.kind == SchemeKind::TamedMilsteinJumpCommutative && problem.intensity() > 0.0 {
            let report = check_jump_commutativity(problem, &samples, COMMUTATIVITY_TOL)?;
            if !report.ok {
                return Err(Error::UnsupportedScheme(format!(
                    "{} requires jump commutativity; max violation {:.3e}",
                    self.kind, report.max_violation
                )));
            }
        }
        Ok(())
    }
}

/// Outcome of one simulated path.
#[derive(Debug, Clone, PartialEq)]
pub struct PathResult {
    /// State at the terminal grid point (or at the blow-up point when the
    /// divergence flag is set).
    pub terminal: Vec<f64>,
    /// Maximum Euclidean norm over the visited grid points.
    pub sup_norm: f64,
    /// Grid index of the first non-finite or capped state, if any.
    pub diverged: Option<usize>,
    /// States at every grid point (recorded variant only).
    pub trajectory: Option<Vec<Vec<f64>>>,
}

/// Reusable per-path evaluation buffers.
struct Scratch {
    b: Vec<f64>,
    sigma: Vec<f64>,
    jac: Vec<f64>,
    corr: Vec<f64>,
    acc: Vec<f64>,
    gamma: Vec<f64>,
    gamma2: Vec<f64>,
    shifted: Vec<f64>,
    sigma_shift: Vec<f64>,
    gjac: Vec<f64>,
    comp: Vec<f64>,
}

impl Scratch {
    fn new(d: usize, m: usize) -> Self {
        Scratch {
            b: vec![0.0; d],
            sigma: vec![0.0; d * m],
            jac: vec![0.0; d * m * d],
            corr: vec![0.0; d],
            acc: vec![0.0; d],
            gamma: vec![0.0; d],
            gamma2: vec![0.0; d],
            shifted: vec![0.0; d],
            sigma_shift: vec![0.0; d * m],
            gjac: vec![0.0; d * d],
            comp: vec![0.0; d],
        }
    }
}

/// Drift term plus diffusion term into `scr.acc`; the shared prefix of the
/// Euler and Milstein kernels. `factor` is the taming factor (1 for the
/// untamed baseline).
fn drift_diffusion_acc(
    problem: &SdeProblem,
    tamed: bool,
    params: TamingParams,
    h: f64,
    dw: &[f64],
    x: &[f64],
    scr: &mut Scratch,
) {
    let d = problem.dim_state;
    let m = problem.dim_noise;
    problem.drift_into(x, &mut scr.b);
    let factor = if tamed {
        params.factor_from_norm_squared(norm_squared(&scr.b))
    } else {
        1.0
    };
    for i in 0..d {
        scr.acc[i] = (scr.b[i] * factor) * h;
    }
    problem.diffusion_into(x, &mut scr.sigma);
    for i in 0..d {
        let mut t = 0.0;
        for j in 0..m {
            t += scr.sigma[i * m + j] * dw[j];
        }
        scr.acc[i] += t;
    }
}

/// Adds the Milstein iterated-integral correction
/// `1/2 sum_{j,k} (sum_u sigma^(u,j) d sigma^(i,k)/dx^u)(dw^j dw^k - h 1{j=k})`.
fn milstein_correction_acc(
    problem: &SdeProblem,
    h: f64,
    dw: &[f64],
    x: &[f64],
    scr: &mut Scratch,
) {
    let d = problem.dim_state;
    let m = problem.dim_noise;
    problem.diffusion_jacobian_into(x, &mut scr.jac);
    scr.corr.fill(0.0);
    for j in 0..m {
        for k in 0..m {
            let bracket = dw[j] * dw[k] - if j == k { h } else { 0.0 };
            for i in 0..d {
                let mut inner = 0.0;
                for u in 0..d {
                    inner += scr.sigma[u * m + j] * scr.jac[(i * m + k) * d + u];
                }
                scr.corr[i] += inner * bracket;
            }
        }
    }
    for i in 0..d {
        scr.acc[i] += 0.5 * scr.corr[i];
    }
}

/// Subtracts `lambda E[gamma(x, Z)] h` when the jump measure is not
/// mean-zero (the drift-replacement rule for non-compensated implementations).
fn compensation_acc(problem: &SdeProblem, h: f64, x: &[f64], scr: &mut Scratch) {
    let Some(jump) = problem.jump.as_ref() else {
        return;
    };
    if jump.intensity <= 0.0 || jump.mark_mean_zero {
        return;
    }
    let compensator = jump
        .compensator
        .as_ref()
        .expect("structural check guarantees a compensator");
    compensator(x, &mut scr.comp);
    for i in 0..problem.dim_state {
        scr.acc[i] -= (jump.intensity * scr.comp[i]) * h;
    }
}

fn step_into(
    problem: &SdeProblem,
    kind: SchemeKind,
    params: TamingParams,
    cell: &CellView<'_>,
    x: &[f64],
    scr: &mut Scratch,
    out: &mut [f64],
) {
    let d = problem.dim_state;
    let h = cell.h;
    let dw = cell.dw;
    match kind {
        SchemeKind::TamedEuler => {
            drift_diffusion_acc(problem, true, params, h, dw, x, scr);
            if !cell.jumps.is_empty() {
                let jump = problem.jump.as_ref().unwrap();
                for ev in cell.jumps {
                    (jump.coefficient)(x, ev.mark, &mut scr.gamma);
                    for i in 0..d {
                        scr.acc[i] += scr.gamma[i];
                    }
                }
            }
            compensation_acc(problem, h, x, scr);
        }
        SchemeKind::TamedMilsteinContinuous | SchemeKind::UntamedMilstein => {
            let tamed = kind.is_tamed();
            drift_diffusion_acc(problem, tamed, params, h, dw, x, scr);
            milstein_correction_acc(problem, h, dw, x, scr);
        }
        SchemeKind::TamedMilsteinJump1d => {
            drift_diffusion_acc(problem, true, params, h, dw, x, scr);
            milstein_correction_acc(problem, h, dw, x, scr);
            if !cell.jumps.is_empty() {
                let jump = problem.jump.as_ref().unwrap();
                let sigma_x = scr.sigma[0];
                let w_start = cell.w_start[0];
                let w_end = w_start + dw[0];
                let mut sum_gamma = 0.0;
                let mut sum_sigma_shift = 0.0;
                let mut sum_gamma_jac = 0.0;
                for ev in cell.jumps {
                    (jump.coefficient)(x, ev.mark, &mut scr.gamma);
                    sum_gamma += scr.gamma[0];
                    scr.shifted[0] = x[0] + scr.gamma[0];
                    problem.diffusion_into(&scr.shifted, &mut scr.sigma_shift);
                    sum_sigma_shift +=
                        (scr.sigma_shift[0] - sigma_x) * (w_end - ev.brownian_at_jump[0]);
                    (jump.coefficient_jacobian)(x, ev.mark, &mut scr.gjac);
                    sum_gamma_jac += scr.gjac[0] * (ev.brownian_at_jump[0] - w_start);
                }
                sum_gamma_jac *= sigma_x;
                // Double jump sum over strictly ordered pairs i < j: the
                // inner index runs over jumps before tau_j.
                let mut sum_double = 0.0;
                for (j_idx, ev_j) in cell.jumps.iter().enumerate() {
                    for ev_i in &cell.jumps[..j_idx] {
                        (jump.coefficient)(x, ev_i.mark, &mut scr.gamma);
                        scr.shifted[0] = x[0] + scr.gamma[0];
                        (jump.coefficient)(&scr.shifted, ev_j.mark, &mut scr.gamma2);
                        (jump.coefficient)(x, ev_j.mark, &mut scr.gamma);
                        sum_double += scr.gamma2[0] - scr.gamma[0];
                    }
                }
                scr.acc[0] += sum_gamma;
                scr.acc[0] += sum_sigma_shift;
                scr.acc[0] += sum_gamma_jac;
                scr.acc[0] += sum_double;
            }
            compensation_acc(problem, h, x, scr);
        }
        SchemeKind::TamedMilsteinJumpCommutative => {
            let m = problem.dim_noise;
            drift_diffusion_acc(problem, true, params, h, dw, x, scr);
            milstein_correction_acc(problem, h, dw, x, scr);
            if !cell.jumps.is_empty() {
                let jump = problem.jump.as_ref().unwrap();
                let dn = cell.jumps.len() as f64;
                (jump.coefficient)(x, 0.0, &mut scr.gamma);
                for i in 0..d {
                    scr.acc[i] += scr.gamma[i] * dn;
                }
                for i in 0..d {
                    scr.shifted[i] = x[i] + scr.gamma[i];
                }
                problem.diffusion_into(&scr.shifted, &mut scr.sigma_shift);
                for j in 0..m {
                    let coef = dn * dw[j];
                    for i in 0..d {
                        scr.acc[i] += (scr.sigma_shift[i * m + j] - scr.sigma[i * m + j]) * coef;
                    }
                }
                (jump.coefficient)(&scr.shifted, 0.0, &mut scr.gamma2);
                let pairs = 0.5 * (dn * dn - dn);
                for i in 0..d {
                    scr.acc[i] += (scr.gamma2[i] - scr.gamma[i]) * pairs;
                }
            }
            compensation_acc(problem, h, x, scr);
        }
    }
    for i in 0..d {
        out[i] = x[i] + scr.acc[i];
    }
}

fn step_public(
    problem: &SdeProblem,
    spec: &SchemeSpec,
    expected: SchemeKind,
    state: &[f64],
    cell: &CellView<'_>,
) -> Result<Vec<f64>> {
    if spec.kind != expected {
        return Err(Error::Domain(format!(
            "step function for {expected} called with a {} spec",
            spec.kind
        )));
    }
    spec.structural_check(problem)?;
    if state.len() != problem.dim_state {
        return Err(Error::Domain(format!(
            "state has dimension {}, problem is {}-dimensional",
            state.len(),
            problem.dim_state
        )));
    }
    let params = spec.taming(problem.horizon)?;
    let mut scr = Scratch::new(problem.dim_state, problem.dim_noise);
    let mut out = vec![0.0; problem.dim_state];
    step_into(problem, spec.kind, params, cell, state, &mut scr, &mut out);
    Ok(out)
}

/// One tamed Euler step over a cell:
/// `x + tamed(b) h + sigma dw + sum gamma(x, z_i) - compensation h`.
pub fn step_tamed_euler(
    problem: &SdeProblem,
    spec: &SchemeSpec,
    state: &[f64],
    cell: &CellView<'_>,
) -> Result<Vec<f64>> {
    step_public(problem, spec, SchemeKind::TamedEuler, state, cell)
}

/// One tamed Milstein step for a continuous problem (commutative diffusion
/// when `m > 1`).
pub fn step_tamed_milstein_continuous(
    problem: &SdeProblem,
    spec: &SchemeSpec,
    state: &[f64],
    cell: &CellView<'_>,
) -> Result<Vec<f64>> {
    step_public(
        problem,
        spec,
        SchemeKind::TamedMilsteinContinuous,
        state,
        cell,
    )
}

/// One tamed Milstein step for a one-dimensional jump problem, evaluating
/// the exact per-jump terms from the cell's ordered events.
pub fn step_tamed_milstein_jump_1d(
    problem: &SdeProblem,
    spec: &SchemeSpec,
    state: &[f64],
    cell: &CellView<'_>,
) -> Result<Vec<f64>> {
    step_public(problem, spec, SchemeKind::TamedMilsteinJump1d, state, cell)
}

/// One tamed Milstein step for a multi-dimensional mark-independent jump
/// problem under the diffusion and jump commutativity conditions.
pub fn step_tamed_milstein_jump_commutative(
    problem: &SdeProblem,
    spec: &SchemeSpec,
    state: &[f64],
    cell: &CellView<'_>,
) -> Result<Vec<f64>> {
    step_public(
        problem,
        spec,
        SchemeKind::TamedMilsteinJumpCommutative,
        state,
        cell,
    )
}

/// One untamed Milstein step (divergence baseline): the raw drift in place
/// of the tamed one.
pub fn step_untamed_milstein(
    problem: &SdeProblem,
    spec: &SchemeSpec,
    state: &[f64],
    cell: &CellView<'_>,
) -> Result<Vec<f64>> {
    step_public(problem, spec, SchemeKind::UntamedMilstein, state, cell)
}

/// Runs the scheme over the coarse view of the noise at `spec.level`,
/// starting from the problem's initial value.
pub fn simulate_path(
    problem: &SdeProblem,
    spec: &SchemeSpec,
    noise: &NoiseRealization,
) -> Result<PathResult> {
    simulate(problem, spec, noise, false)
}

/// Like [`simulate_path`] but records the state at every grid point.
pub fn simulate_path_recorded(
    problem: &SdeProblem,
    spec: &SchemeSpec,
    noise: &NoiseRealization,
) -> Result<PathResult> {
    simulate(problem, spec, noise, true)
}

fn simulate(
    problem: &SdeProblem,
    spec: &SchemeSpec,
    noise: &NoiseRealization,
    record: bool,
) -> Result<PathResult> {
    spec.structural_check(problem)?;
    if spec.level > noise.level_max {
        return Err(Error::Domain(format!(
            "scheme level {} exceeds noise level_max {}",
            spec.level, noise.level_max
        )));
    }
    if noise.dim_noise != problem.dim_noise {
        return Err(Error::Domain(format!(
            "noise has {} Brownian components, problem needs {}",
            noise.dim_noise, problem.dim_noise
        )));
    }
    if noise.horizon != problem.horizon {
        return Err(Error::Domain(format!(
            "noise horizon {} differs from problem horizon {}",
            noise.horizon, problem.horizon
        )));
    }
    let view = coarsen(noise, spec.level)?;
    let params = spec.taming(problem.horizon)?;
    let d = problem.dim_state;
    let mut scr = Scratch::new(d, problem.dim_noise);
    let mut x = problem.initial_value.clone();
    let mut next = vec![0.0; d];
    let mut sup_norm = euclidean_norm(&x);
    let mut diverged = None;
    let mut trajectory = record.then(|| {
        let mut t = Vec::with_capacity(view.cells() + 1);
        t.push(x.clone());
        t
    });
    for l in 0..view.cells() {
        let cell = view.cell(l);
        step_into(problem, spec.kind, params, &cell, &x, &mut scr, &mut next);
        std::mem::swap(&mut x, &mut next);
        if let Some(t) = trajectory.as_mut() {
            t.push(x.clone());
        }
        let norm = euclidean_norm(&x);
        if !norm.is_finite() || norm > DIVERGENCE_NORM_CAP {
            diverged = Some(l + 1);
            if norm.is_finite() {
                sup_norm = sup_norm.max(norm);
            }
            break;
        }
        sup_norm = sup_norm.max(norm);
    }
    Ok(PathResult {
        terminal: x,
        sup_norm,
        diverged,
        trajectory,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{builtin_problem, JumpSpec, MarkDistribution, SdeProblem};
    use crate::noise::{sample_noise, JumpEvent};
    use crate::rng::CounterRng;
    use std::sync::Arc;

    fn cell_no_jumps<'v>(h: f64, dw: &'v [f64], w_start: &'v [f64]) -> CellView<'v> {
        CellView {
            index: 0,
            t_start: 0.0,
            h,
            dw,
            w_start,
            jumps: &[],
        }
    }

    #[test]
    fn euler_step_hand_values() {
        let p = builtin_problem("example1").unwrap();
        let spec = SchemeSpec::new(SchemeKind::TamedEuler, 2).unwrap(); // h = 0.25
        // b(1) = 0: zero noise leaves the state unchanged.
        let out = step_tamed_euler(&p, &spec, &[1.0], &cell_no_jumps(0.25, &[0.0], &[0.0])).unwrap();
        assert_eq!(out, vec![1.0]);
        // dw = 0.5: 1 + 0 + 0.5.
        let out = step_tamed_euler(&p, &spec, &[1.0], &cell_no_jumps(0.25, &[0.5], &[0.0])).unwrap();
        assert_eq!(out, vec![1.5]);
    }

    #[test]
    fn milstein_continuous_hand_values() {
        let p = builtin_problem("example1").unwrap();
        let spec = SchemeSpec::new(SchemeKind::TamedMilsteinContinuous, 2).unwrap();
        // dw = 0.5: correction bracket vanishes (0.25 - 0.25).
        let out = step_tamed_milstein_continuous(
            &p,
            &spec,
            &[1.0],
            &cell_no_jumps(0.25, &[0.5], &[0.0]),
        )
        .unwrap();
        assert_eq!(out, vec![1.5]);
        // dw = 0: 1 + 0 + 0 + 0.5 * 1 * 1 * (0 - 0.25) = 0.875 exactly.
        let out = step_tamed_milstein_continuous(
            &p,
            &spec,
            &[1.0],
            &cell_no_jumps(0.25, &[0.0], &[0.0]),
        )
        .unwrap();
        assert_eq!(out, vec![0.875]);
    }

    #[test]
    fn jump_1d_hand_value() {
        // example2 coefficients, x = 1, h = 1/4 (level 2), dw = 0, one jump
        // with mark 0.1, w_tau - w_start = 0.2, w_end - w_tau = -0.2:
        //   drift   -0.1/1.0025 * 0.25 = -0.024937655860349127
        //   jump    +0.1
        //   corr    -0.125
        //   sigma shift (1.1 - 1)(-0.2) = -0.02
        //   gamma jac 1 * 0.1 * 0.2    = +0.02
        // total 0.9500623441396509.
        let p = builtin_problem("example2-uniform-λ3").unwrap();
        let spec = SchemeSpec::new(SchemeKind::TamedMilsteinJump1d, 2).unwrap();
        let jumps = [JumpEvent {
            time: 0.1,
            mark: 0.1,
            brownian_at_jump: vec![0.2],
        }];
        let cell = CellView {
            index: 0,
            t_start: 0.0,
            h: 0.25,
            dw: &[0.0],
            w_start: &[0.0],
            jumps: &jumps,
        };
        let out = step_tamed_milstein_jump_1d(&p, &spec, &[1.0], &cell).unwrap();
        assert!((out[0] - 0.9500623441396509).abs() < 1e-12, "got {}", out[0]);
    }

    #[test]
    fn jump_1d_double_sum_counts_ordered_pairs() {
        // Two jumps with equal marks c: the double sum contributes
        // gamma(x + x c, c) - gamma(x, c) = x c^2 for the (1, 2) pair only.
        let p = builtin_problem("example2-uniform-λ3").unwrap();
        let spec = SchemeSpec::new(SchemeKind::TamedMilsteinJump1d, 2).unwrap();
        let c = 0.125;
        let x = 1.0;
        let jumps = [
            JumpEvent {
                time: 0.05,
                mark: c,
                brownian_at_jump: vec![0.0],
            },
            JumpEvent {
                time: 0.15,
                mark: c,
                brownian_at_jump: vec![0.0],
            },
        ];
        let cell = CellView {
            index: 0,
            t_start: 0.0,
            h: 0.25,
            dw: &[0.0],
            w_start: &[0.0],
            jumps: &jumps,
        };
        let with_pairs = step_tamed_milstein_jump_1d(&p, &spec, &[x], &cell).unwrap()[0];
        // Hand total: drift + corr + 2 jumps + double sum (sigma-shift and
        // jacobian terms vanish because all bridge values equal the
        // boundaries here: w_tau - w_start = 0 and w_end - w_tau = 0).
        let drift = -0.1 / (1.0 + 0.25 * 0.01) * 0.25;
        let corr = 0.5 * (0.0 - 0.25);
        let expected = x + drift + corr + 2.0 * (x * c) + x * c * c;
        assert!((with_pairs - expected).abs() < 1e-12);
    }

    #[test]
    fn jump_commutative_hand_value() {
        // sigma(x) = x, gamma(x) = 0.5 x, zero drift, x = 1, h = 0.25,
        // dw = 0.1, two jumps in the cell:
        //   gamma dN            = 1.0
        //   correction 0.5(0.01 - 0.25) = -0.12
        //   (sigma(1.5) - sigma(1)) * 2 * 0.1 = 0.1
        //   0.5 (gamma(1.5) - gamma(1)) * (4 - 2) = 0.25
        let p = SdeProblem::builder("comm", 1, 1)
            .drift(|_, out| out.fill(0.0))
            .diffusion(|x, out| out[0] = x[0])
            .diffusion_jacobian(|_, out| out[0] = 1.0)
            .jump(JumpSpec {
                intensity: 1.0,
                mark_law: MarkDistribution::Degenerate { value: 0.0 },
                coefficient: Arc::new(|x, _, out| out[0] = 0.5 * x[0]),
                coefficient_jacobian: Arc::new(|_, _, out| out[0] = 0.5),
                compensator: Some(Arc::new(|x, out| out[0] = 0.5 * x[0])),
                mark_mean_zero: false,
                mark_dependent: false,
            })
            .initial_value(vec![1.0])
            .build()
            .unwrap();
        let spec = SchemeSpec::new(SchemeKind::TamedMilsteinJumpCommutative, 2).unwrap();
        let jumps = [
            JumpEvent {
                time: 0.05,
                mark: 0.0,
                brownian_at_jump: vec![0.0],
            },
            JumpEvent {
                time: 0.15,
                mark: 0.0,
                brownian_at_jump: vec![0.0],
            },
        ];
        let cell = CellView {
            index: 0,
            t_start: 0.0,
            h: 0.25,
            dw: &[0.1],
            w_start: &[0.0],
            jumps: &jumps,
        };
        let out = step_tamed_milstein_jump_commutative(&p, &spec, &[1.0], &cell).unwrap();
        // Compensation: -lambda * E[gamma] * h = -1 * 0.5 * 0.25.
        let expected = 1.0 + 1.0 - 0.12 + 0.1 + 0.25 - 0.125;
        assert!((out[0] - expected).abs() < 1e-12, "got {}", out[0]);
    }

    #[test]
    fn untamed_step_overshoots_on_large_states() {
        let p = builtin_problem("example1").unwrap();
        let spec = SchemeSpec::new(SchemeKind::UntamedMilstein, 1).unwrap(); // h = 0.5
        let out =
            step_untamed_milstein(&p, &spec, &[3.0], &cell_no_jumps(0.5, &[0.0], &[0.0])).unwrap();
        // (3 - 243) * 0.5 = -120 drift term, correction 0.5*3*1*(-0.5) = -0.75.
        assert!((out[0] - (3.0 - 120.0 - 0.75)).abs() < 1e-12);
        // Tamed at the same state stays bounded.
        let tamed_spec = SchemeSpec::new(SchemeKind::TamedMilsteinContinuous, 1).unwrap();
        let tamed =
            step_tamed_milstein_continuous(&p, &tamed_spec, &[3.0], &cell_no_jumps(0.5, &[0.0], &[0.0]))
                .unwrap();
        assert!(tamed[0].abs() < 4.0);
    }

    #[test]
    fn untamed_equals_tamed_where_drift_vanishes() {
        let p = builtin_problem("example1").unwrap();
        let untamed = SchemeSpec::new(SchemeKind::UntamedMilstein, 3).unwrap();
        let tamed = SchemeSpec::new(SchemeKind::TamedMilsteinContinuous, 3).unwrap();
        let cell_dw = [0.3];
        let a = step_untamed_milstein(&p, &untamed, &[1.0], &cell_no_jumps(0.125, &cell_dw, &[0.0]))
            .unwrap();
        let b = step_tamed_milstein_continuous(
            &p,
            &tamed,
            &[1.0],
            &cell_no_jumps(0.125, &cell_dw, &[0.0]),
        )
        .unwrap();
        assert_eq!(a, b); // b(1) = 0 and taming acts on 0
    }

    #[test]
    fn spec_construction_rules() {
        assert!(SchemeSpec::new(SchemeKind::TamedEuler, 4).is_ok());
        assert!(SchemeSpec::with_theta(SchemeKind::TamedEuler, 4, 1.0).is_ok());
        assert!(SchemeSpec::with_theta(SchemeKind::TamedMilsteinContinuous, 4, 0.5).is_err());
        assert!(SchemeSpec::new(SchemeKind::TamedEuler, 0).is_err());
        assert!(SchemeSpec::new(SchemeKind::TamedEuler, 31).is_err());
        assert_eq!(
            "tamed-milstein-jump-1d".parse::<SchemeKind>().unwrap(),
            SchemeKind::TamedMilsteinJump1d
        );
        assert!("midpoint".parse::<SchemeKind>().is_err());
    }

    #[test]
    fn structural_rules() {
        let jumpy = builtin_problem("example2-normal-λ3").unwrap();
        let cont = builtin_problem("example1").unwrap();
        let spec = SchemeSpec::new(SchemeKind::TamedMilsteinContinuous, 4).unwrap();
        assert!(matches!(
            spec.structural_check(&jumpy),
            Err(Error::UnsupportedScheme(_))
        ));
        assert!(spec.structural_check(&cont).is_ok());
        let spec = SchemeSpec::new(SchemeKind::TamedMilsteinJumpCommutative, 4).unwrap();
        assert!(matches!(
            spec.structural_check(&jumpy),
            Err(Error::UnsupportedScheme(_))
        )); // mark-dependent
        let spec = SchemeSpec::new(SchemeKind::TamedMilsteinJump1d, 4).unwrap();
        assert!(spec.structural_check(&jumpy).is_ok());
        // Non-mean-zero marks without a compensator are rejected.
        let mut no_comp = builtin_problem("example2-normal-λ3").unwrap();
        no_comp.jump.as_mut().unwrap().mark_mean_zero = false;
        assert!(matches!(
            spec.structural_check(&no_comp),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn simulate_zero_noise_zero_drift_keeps_initial_value() {
        let p = SdeProblem::builder("still", 1, 1)
            .drift(|_, out| out.fill(0.0))
            .diffusion(|_, out| out.fill(0.0))
            .diffusion_jacobian(|_, out| out.fill(0.0))
            .initial_value(vec![1.25])
            .build()
            .unwrap();
        let noise = NoiseRealization {
            level_max: 4,
            dim_noise: 1,
            horizon: 1.0,
            increments: vec![0.0; 16],
            jump_events: vec![],
            seed: 0,
        };
        let spec = SchemeSpec::new(SchemeKind::TamedMilsteinContinuous, 4).unwrap();
        let res = simulate_path(&p, &spec, &noise).unwrap();
        assert_eq!(res.terminal, vec![1.25]);
        assert_eq!(res.sup_norm, 1.25);
        assert!(res.diverged.is_none());
    }

    /// example2-like problem with configurable intensity, sharing coefficient
    /// closures between a jump and a jump-free clone.
    fn example2_with_intensity(intensity: f64) -> (SdeProblem, SdeProblem) {
        let with_jumps = SdeProblem::builder("ex2-custom", 1, 1)
            .drift(|x, out| out[0] = -0.10 * x[0].powi(3))
            .diffusion(|x, out| out[0] = x[0])
            .diffusion_jacobian(|_, out| out[0] = 1.0)
            .jump(JumpSpec {
                intensity,
                mark_law: MarkDistribution::Uniform { lo: -0.25, hi: 0.25 },
                coefficient: Arc::new(|x, z, out| out[0] = x[0] * z),
                coefficient_jacobian: Arc::new(|_, z, out| out[0] = z),
                compensator: None,
                mark_mean_zero: true,
                mark_dependent: true,
            })
            .initial_value(vec![1.0])
            .build()
            .unwrap();
        let mut continuous = with_jumps.clone();
        continuous.jump = None;
        (with_jumps, continuous)
    }

    #[test]
    fn jump_1d_reduces_to_continuous_without_jumps() {
        let (jumpy, cont) = example2_with_intensity(0.0);
        let noise = sample_noise(&jumpy, 8, 33).unwrap();
        assert!(noise.jump_events.is_empty());
        let s_jump = SchemeSpec::new(SchemeKind::TamedMilsteinJump1d, 6).unwrap();
        let s_cont = SchemeSpec::new(SchemeKind::TamedMilsteinContinuous, 6).unwrap();
        let a = simulate_path(&jumpy, &s_jump, &noise).unwrap();
        let b = simulate_path(&cont, &s_cont, &noise).unwrap();
        assert_eq!(a, b);
        // The continuous kernel also accepts the lambda = 0 problem directly.
        let c = simulate_path(&jumpy, &s_cont, &noise).unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn commutative_reduces_to_continuous_without_jumps() {
        let (jumpy, cont) = example2_with_intensity(0.0);
        let noise = sample_noise(&jumpy, 8, 90).unwrap();
        let s_comm = SchemeSpec::new(SchemeKind::TamedMilsteinJumpCommutative, 5).unwrap();
        let s_cont = SchemeSpec::new(SchemeKind::TamedMilsteinContinuous, 5).unwrap();
        let a = simulate_path(&jumpy, &s_comm, &noise).unwrap();
        let b = simulate_path(&cont, &s_cont, &noise).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn constant_sigma_milstein_reduces_to_euler_theta_one() {
        let p = SdeProblem::builder("const-sigma", 1, 1)
            .drift(|x, out| out[0] = x[0] - x[0].powi(3))
            .diffusion(|_, out| out[0] = 0.7)
            .diffusion_jacobian(|_, out| out[0] = 0.0)
            .initial_value(vec![0.5])
            .build()
            .unwrap();
        let noise = sample_noise(&p, 7, 11).unwrap();
        let milstein = SchemeSpec::new(SchemeKind::TamedMilsteinContinuous, 5).unwrap();
        let euler = SchemeSpec::with_theta(SchemeKind::TamedEuler, 5, 1.0).unwrap();
        let a = simulate_path(&p, &milstein, &noise).unwrap();
        let b = simulate_path(&p, &euler, &noise).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn grid_measurability_of_single_step() {
        // Changing the noise of other cells leaves a given cell's step
        // unchanged: steps consume only cell-local data.
        let p = builtin_problem("example1").unwrap();
        let spec = SchemeSpec::new(SchemeKind::TamedMilsteinContinuous, 3).unwrap();
        let dw = [0.21];
        let w0 = [0.4];
        let a = step_tamed_milstein_continuous(
            &p,
            &spec,
            &[1.3],
            &CellView {
                index: 5,
                t_start: 0.625,
                h: 0.125,
                dw: &dw,
                w_start: &w0,
                jumps: &[],
            },
        )
        .unwrap();
        let w1 = [-2.0]; // different accumulated boundary, same increment
        let b = step_tamed_milstein_continuous(
            &p,
            &spec,
            &[1.3],
            &CellView {
                index: 5,
                t_start: 0.625,
                h: 0.125,
                dw: &dw,
                w_start: &w1,
                jumps: &[],
            },
        )
        .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn taming_keeps_paths_finite_over_seed_sweep() {
        let base = builtin_problem("example1").unwrap();
        for xi in [1.0, 2.0, 3.0] {
            let p = base.clone().with_initial_value(vec![xi]).unwrap();
            for level in [4u32, 8, 12] {
                let spec = SchemeSpec::new(SchemeKind::TamedMilsteinContinuous, level).unwrap();
                for seed in 0..50 {
                    let noise = sample_noise(&p, level, crate::rng::derive_seed(7, seed)).unwrap();
                    let res = simulate_path(&p, &spec, &noise).unwrap();
                    assert!(res.diverged.is_none(), "xi={xi} level={level} seed={seed}");
                    assert!(res.sup_norm < 1e6);
                }
            }
        }
    }

    #[test]
    fn single_step_weak_consistency() {
        // Monte Carlo mean of one continuous Milstein step matches the tamed
        // drift term within 4 standard errors (the diffusion and correction
        // terms have zero mean).
        let p = builtin_problem("example1").unwrap();
        let spec = SchemeSpec::new(SchemeKind::TamedMilsteinContinuous, 4).unwrap();
        let h = 1.0 / 16.0;
        let x0 = 1.4;
        let params = spec.taming(1.0).unwrap();
        let mut b = [0.0];
        p.drift_into(&[x0], &mut b);
        let expected = b[0] * params.factor_from_norm_squared(b[0] * b[0]) * h;
        let mut rng = CounterRng::new(55, 0);
        let n = 1_000_000usize;
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for _ in 0..n {
            let dw = [h.sqrt() * rng.standard_normal()];
            let out = step_tamed_milstein_continuous(
                &p,
                &spec,
                &[x0],
                &cell_no_jumps(h, &dw, &[0.0]),
            )
            .unwrap();
            let delta = out[0] - x0;
            sum += delta;
            sum_sq += delta * delta;
        }
        let mean = sum / n as f64;
        let var = sum_sq / n as f64 - mean * mean;
        let se = (var / n as f64).sqrt();
        assert!(
            (mean - expected).abs() <= 4.0 * se,
            "mean {mean}, expected {expected}, se {se}"
        );
    }

    #[test]
    fn recorded_trajectory_has_all_grid_points() {
        let p = builtin_problem("example1").unwrap();
        let spec = SchemeSpec::new(SchemeKind::TamedMilsteinContinuous, 4).unwrap();
        let noise = sample_noise(&p, 4, 1).unwrap();
        let res = simulate_path_recorded(&p, &spec, &noise).unwrap();
        let traj = res.trajectory.unwrap();
        assert_eq!(traj.len(), 17);
        assert_eq!(traj.last().unwrap(), &res.terminal);
    }

    #[test]
    fn level_mismatch_is_a_domain_error() {
        let p = builtin_problem("example1").unwrap();
        let noise = sample_noise(&p, 4, 1).unwrap();
        let spec = SchemeSpec::new(SchemeKind::TamedMilsteinContinuous, 6).unwrap();
        assert!(matches!(
            simulate_path(&p, &spec, &noise),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn untamed_divergence_sets_flag_and_halts() {
        let p = builtin_problem("example1")
            .unwrap()
            .with_initial_value(vec![3.0])
            .unwrap();
        let spec = SchemeSpec::new(SchemeKind::UntamedMilstein, 4).unwrap();
        let noise = sample_noise(&p, 4, 2).unwrap();
        let res = simulate_path(&p, &spec, &noise).unwrap();
        assert!(res.diverged.is_some());
    }

    #[test]
    fn validate_for_rejects_noncommutative_multidim_diffusion() {
        let p = SdeProblem::builder("noncomm", 1, 2)
            .drift(|_, out| out.fill(0.0))
            .diffusion(|x, out| {
                out[0] = x[0];
                out[1] = x[0] * x[0];
            })
            .diffusion_jacobian(|x, out| {
                out[0] = 1.0;
                out[1] = 2.0 * x[0];
            })
            .initial_value(vec![1.0])
            .build()
            .unwrap();
        let spec = SchemeSpec::new(SchemeKind::TamedMilsteinContinuous, 4).unwrap();
        assert!(matches!(
            spec.validate_for(&p),
            Err(Error::UnsupportedScheme(_))
        ));
        // The Euler kernel does not need commutativity.
        let spec = SchemeSpec::new(SchemeKind::TamedEuler, 4).unwrap();
        assert!(spec.validate_for(&p).is_ok());
    }
}
