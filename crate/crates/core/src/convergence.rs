//! Strong-error Monte Carlo harness: coupled coarse/reference runs, `L^q`
//! error estimation with delta-method confidence half-widths, log-log rate
//! fits, and moment sweeps.
//!
//! Every path draws one noise realization at the reference level from a
//! seed derived as `(master_seed, path_index)`; all coarse levels and the
//! reference consume coarsenings of that same realization. Paths are
//! embarrassingly parallel; aggregation runs over the path-ordered results
//! with pairwise summation, so output is bitwise independent of the worker
//! count.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::SdeProblem;
use crate::noise::{sample_noise, MAX_LEVEL};
use crate::numeric::{ols_line_fit, pairwise_sum};
use crate::rng::derive_seed;
use crate::schemes::{simulate_path, SchemeKind, SchemeSpec};

/// Two-sided 95% normal quantile used for confidence half-widths.
const Z_95: f64 = 1.959963984540054;

/// Configuration of a strong-convergence run.
#[derive(Debug, Clone)]
pub struct ConvergenceConfig {
    /// Coarse dyadic levels, strictly ascending.
    pub levels: Vec<u32>,
    /// Reference level; must exceed the largest coarse level by at least 3
    /// so the reference error is negligible against the coarse error.
    pub reference_level: u32,
    /// Number of Monte Carlo paths.
    pub paths: usize,
    /// Norm exponents, each >= 1.
    pub q_list: Vec<f64>,
    pub master_seed: u64,
    pub scheme: SchemeKind,
    /// Kernel used for the reference solution; defaults to `scheme`.
    pub reference_scheme: Option<SchemeKind>,
}

impl ConvergenceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels.is_empty() {
            return Err(Error::Config("levels must be nonempty".into()));
        }
        if !self.levels.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Config("levels must be strictly ascending".into()));
        }
        for &l in &self.levels {
            if l == 0 || l > MAX_LEVEL {
                return Err(Error::Config(format!("level {l} outside 1..={MAX_LEVEL}")));
            }
        }
        let max_level = *self.levels.last().unwrap();
        if self.reference_level > MAX_LEVEL {
            return Err(Error::Config(format!(
                "reference level {} outside 1..={MAX_LEVEL}",
                self.reference_level
            )));
        }
        if self.reference_level < max_level + 3 {
            return Err(Error::Config(format!(
                "reference level {} must be at least max(levels) + 3 = {}",
                self.reference_level,
                max_level + 3
            )));
        }
        if self.paths == 0 {
            return Err(Error::Config("paths must be positive".into()));
        }
        if self.q_list.is_empty() {
            return Err(Error::Config("q_list must be nonempty".into()));
        }
        for &q in &self.q_list {
            if !(q >= 1.0) || !q.is_finite() {
                return Err(Error::Config(format!("q must be a finite real >= 1, got {q}")));
            }
        }
        Ok(())
    }
}

/// One `(level, q)` row of the error table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorRow {
    pub level: u32,
    pub q: f64,
    /// Empirical `L^q` error `((1/M) sum |e_i|^q)^(1/q)`.
    pub error: f64,
    /// 95% confidence half-width of the estimate (delta method through the
    /// `1/q` power).
    pub half_width: f64,
    /// Paths that entered the estimate.
    pub paths_used: usize,
    /// Paths excluded because the coarse or reference simulation diverged.
    pub diverged: usize,
}

/// Per-level, per-q strong-error estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorTable {
    rows: Vec<ErrorRow>,
}

impl ErrorTable {
    pub fn rows(&self) -> &[ErrorRow] {
        &self.rows
    }

    pub fn levels(&self) -> Vec<u32> {
        let mut levels: Vec<u32> = self.rows.iter().map(|r| r.level).collect();
        levels.dedup();
        levels
    }

    pub fn get(&self, level: u32, q: f64) -> Option<&ErrorRow> {
        self.rows.iter().find(|r| r.level == level && r.q == q)
    }
}

/// Fitted log2-error-versus-level line.
#[derive(Debug, Clone, PartialEq)]
pub struct RateFit {
    /// Empirical strong order.
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    /// Levels that entered the fit (zero-error levels are dropped).
    pub levels_used: Vec<u32>,
}

/// Empirical `L^q` norm of a sample of absolute errors.
pub fn lq_error(absolute_errors: &[f64], q: f64) -> Result<f64> {
    Ok(lq_error_with_half_width(absolute_errors, q)?.0)
}

/// `L^q` norm plus its 95% confidence half-width.
pub fn lq_error_with_half_width(absolute_errors: &[f64], q: f64) -> Result<(f64, f64)> {
    if absolute_errors.is_empty() {
        return Err(Error::Domain("empty error sample".into()));
    }
    if !(q >= 1.0) || !q.is_finite() {
        return Err(Error::Domain(format!("q must be a finite real >= 1, got {q}")));
    }
    if !absolute_errors.iter().all(|e| e.is_finite() && *e >= 0.0) {
        return Err(Error::Domain(
            "absolute errors must be finite and nonnegative".into(),
        ));
    }
    let n = absolute_errors.len();
    let powers: Vec<f64> = absolute_errors.iter().map(|&e| pow_q(e, q)).collect();
    let mean = pairwise_sum(&powers) / n as f64;
    if mean == 0.0 {
        return Ok((0.0, 0.0));
    }
    let error = root_q(mean, q);
    if n == 1 {
        return Ok((error, 0.0));
    }
    let centered: Vec<f64> = powers.iter().map(|&p| (p - mean) * (p - mean)).collect();
    let var = pairwise_sum(&centered) / (n as f64 - 1.0);
    let se_mean = (var / n as f64).sqrt();
    // g(m) = m^(1/q), g'(m) = (1/q) m^(1/q - 1).
    let half_width = Z_95 * se_mean * (1.0 / q) * root_q(mean, q) / mean;
    Ok((error, half_width))
}

fn pow_q(x: f64, q: f64) -> f64 {
    if q == 1.0 {
        x
    } else if q == 2.0 {
        x * x
    } else if q == q.round() && (1.0..=16.0).contains(&q) {
        x.powi(q as i32)
    } else {
        x.powf(q)
    }
}

fn root_q(x: f64, q: f64) -> f64 {
    if q == 1.0 {
        x
    } else if q == 2.0 {
        x.sqrt()
    } else {
        x.powf(1.0 / q)
    }
}

struct PathOutcome {
    /// Per-level absolute terminal error; `None` when the coarse or the
    /// reference path diverged.
    errors: Vec<Option<f64>>,
}

/// Runs the coupled strong-convergence experiment and aggregates the error
/// table. Deterministic in the config (bitwise, for any worker count).
pub fn run_strong_convergence(
    problem: &SdeProblem,
    config: &ConvergenceConfig,
) -> Result<ErrorTable> {
    config.validate()?;
    let ref_kind = config.reference_scheme.unwrap_or(config.scheme);
    let ref_spec = SchemeSpec::new(ref_kind, config.reference_level)?;
    ref_spec.validate_for(problem)?;
    let level_specs: Vec<SchemeSpec> = config
        .levels
        .iter()
        .map(|&l| SchemeSpec::new(config.scheme, l))
        .collect::<Result<_>>()?;
    for spec in &level_specs {
        spec.validate_for(problem)?;
    }

    let outcomes: Vec<Result<PathOutcome>> = (0..config.paths)
        .into_par_iter()
        .map(|path| {
            let seed = derive_seed(config.master_seed, path as u64);
            let noise = sample_noise(problem, config.reference_level, seed)?;
            let reference = simulate_path(problem, &ref_spec, &noise)?;
            let mut errors = Vec::with_capacity(level_specs.len());
            for spec in &level_specs {
                let coarse = simulate_path(problem, spec, &noise)?;
                if reference.diverged.is_some() || coarse.diverged.is_some() {
                    errors.push(None);
                } else {
                    let diff: Vec<f64> = reference
                        .terminal
                        .iter()
                        .zip(&coarse.terminal)
                        .map(|(a, b)| a - b)
                        .collect();
                    errors.push(Some(crate::numeric::euclidean_norm(&diff)));
                }
            }
            Ok(PathOutcome { errors })
        })
        .collect();
    let outcomes: Vec<PathOutcome> = outcomes.into_iter().collect::<Result<_>>()?;

    let mut rows = Vec::with_capacity(config.levels.len() * config.q_list.len());
    for (li, &level) in config.levels.iter().enumerate() {
        // Path order is fixed, so the aggregation below is scheduling-free.
        let errs: Vec<f64> = outcomes
            .iter()
            .filter_map(|o| o.errors[li])
            .collect();
        let diverged = config.paths - errs.len();
        if config.scheme.is_tamed() && diverged as f64 > 0.001 * config.paths as f64 {
            return Err(Error::ExcessiveDivergence(format!(
                "{} of {} paths diverged at level {level} under the tamed scheme {}",
                diverged, config.paths, config.scheme
            )));
        }
        if errs.is_empty() {
            return Err(Error::ExcessiveDivergence(format!(
                "all {} paths diverged at level {level}",
                config.paths
            )));
        }
        for &q in &config.q_list {
            let (error, half_width) = lq_error_with_half_width(&errs, q)?;
            rows.push(ErrorRow {
                level,
                q,
                error,
                half_width,
                paths_used: errs.len(),
                diverged,
            });
        }
    }
    Ok(ErrorTable { rows })
}

/// Ordinary least squares of `log2(error)` against `-level` for one `q`;
/// the slope is the empirical strong order. Levels with zero (or non-finite)
/// error are excluded with a warning.
pub fn fit_rate(table: &ErrorTable, q: f64) -> Result<RateFit> {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut levels_used = Vec::new();
    for row in table.rows().iter().filter(|r| r.q == q) {
        if row.error > 0.0 && row.error.is_finite() {
            xs.push(-(row.level as f64));
            ys.push(row.error.log2());
            levels_used.push(row.level);
        } else {
            log::warn!(
                "fit_rate: excluding level {} (error {} has no logarithm)",
                row.level,
                row.error
            );
        }
    }
    if xs.len() < 2 {
        return Err(Error::Domain(format!(
            "rate fit needs at least two usable levels for q = {q}, found {}",
            xs.len()
        )));
    }
    let fit = ols_line_fit(&xs, &ys);
    Ok(RateFit {
        slope: fit.slope,
        intercept: fit.intercept,
        r_squared: fit.r_squared,
        levels_used,
    })
}

/// One row of a moment sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MomentRow {
    pub level: u32,
    pub p: f64,
    /// Empirical `E[sup_t |x_t|^p]` over the grid suprema of the non-diverged
    /// paths.
    pub moment: f64,
    pub half_width: f64,
    pub paths_used: usize,
    pub diverged: usize,
}

/// Sweeps the `p`-th moment of the grid supremum of the scheme across
/// levels. Each level runs `paths` independent realizations sampled at that
/// level. Diverged paths are excluded from the estimate and tallied.
pub fn moment_sweep(
    problem: &SdeProblem,
    kind: SchemeKind,
    levels: &[u32],
    p: f64,
    paths: usize,
    seed: u64,
) -> Result<Vec<MomentRow>> {
    if !(p >= 2.0) || !p.is_finite() {
        return Err(Error::Config(format!("moment exponent must be >= 2, got {p}")));
    }
    if levels.is_empty() || paths == 0 {
        return Err(Error::Config("moment sweep needs levels and paths".into()));
    }
    let mut rows = Vec::with_capacity(levels.len());
    for &level in levels {
        let spec = SchemeSpec::new(kind, level)?;
        spec.validate_for(problem)?;
        let level_seed = derive_seed(seed, level as u64);
        let sups: Vec<Result<Option<f64>>> = (0..paths)
            .into_par_iter()
            .map(|path| {
                let noise = sample_noise(problem, level, derive_seed(level_seed, path as u64))?;
                let res = simulate_path(problem, &spec, &noise)?;
                Ok(res.diverged.is_none().then_some(res.sup_norm))
            })
            .collect();
        let sups: Vec<Option<f64>> = sups.into_iter().collect::<Result<_>>()?;
        let finite: Vec<f64> = sups.iter().flatten().map(|&s| pow_q(s, p)).collect();
        let diverged = paths - finite.len();
        if finite.is_empty() {
            rows.push(MomentRow {
                level,
                p,
                moment: f64::NAN,
                half_width: f64::NAN,
                paths_used: 0,
                diverged,
            });
            continue;
        }
        let n = finite.len() as f64;
        let mean = pairwise_sum(&finite) / n;
        let half_width = if finite.len() > 1 {
            let centered: Vec<f64> = finite.iter().map(|&v| (v - mean) * (v - mean)).collect();
            let var = pairwise_sum(&centered) / (n - 1.0);
            Z_95 * (var / n).sqrt()
        } else {
            0.0
        };
        rows.push(MomentRow {
            level,
            p,
            moment: mean,
            half_width,
            paths_used: finite.len(),
            diverged,
        });
    }
    Ok(rows)
}
