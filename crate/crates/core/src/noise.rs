//! Driving noise: one coupled realization of the Brownian path and the jump
//! process, sampled once at the finest dyadic level and coarsened exactly so
//! that every discretization level is driven by the same underlying path.
//!
//! Jump times are generated exactly from exponential inter-arrivals rather
//! than per-cell Poisson counts, so all levels see identical jumps. The
//! Brownian value at each jump time is obtained by bridge conditioning
//! inside the finest cell containing it; jumps sharing a cell are bridged
//! sequentially (each conditioned on the previous point and the cell end),
//! which reproduces the exact joint law.
//!
//! Coarse increments are defined as dyadic pairwise sums of the finest
//! increments. Summing a coarse level's increments in the same tree order
//! therefore reproduces the finest-level endpoint bitwise; see
//! [`CoarseView::endpoint`].

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::model::{MarkDistribution, SdeProblem};
use crate::numeric::norm_inv_cdf;
use crate::rng::CounterRng;

/// Stream ids keyed alongside the realization seed; one per purpose so the
/// number of draws consumed by one purpose never shifts another.
const STREAM_GAUSSIAN: u64 = 0;
const STREAM_EXPONENTIAL: u64 = 1;
const STREAM_MARK: u64 = 2;

/// Hard cap on the finest dyadic level (array-size guard).
pub const MAX_LEVEL: u32 = 30;

/// The left grid-point map `kappa(n, t) = floor(n t) / n` on `[0, horizon]`.
///
/// Grid points are fixed points, and the map is idempotent even when `n t`
/// is not exactly representable: the returned value is the largest float of
/// the form `k / n` that does not exceed `t`.
pub fn kappa(n: u64, t: f64, horizon: f64) -> Result<f64> {
    if n == 0 {
        return Err(Error::Domain("kappa requires n >= 1".into()));
    }
    if !t.is_finite() || t < 0.0 || t > horizon {
        return Err(Error::Domain(format!(
            "kappa requires t in [0, {horizon}], got {t}"
        )));
    }
    let nf = n as f64;
    let mut k = (nf * t).floor();
    // Guard against rounding in nf * t: pick the largest k with k/n <= t.
    while (k + 1.0) / nf <= t {
        k += 1.0;
    }
    while k > 0.0 && k / nf > t {
        k -= 1.0;
    }
    Ok(k / nf)
}

/// One jump of the driving Poisson random measure.
#[derive(Debug, Clone, PartialEq)]
pub struct JumpEvent {
    /// Jump time in `(0, horizon]`.
    pub time: f64,
    /// Scalar mark drawn from the problem's mark law.
    pub mark: f64,
    /// Brownian path value at the jump time (length `m`).
    pub brownian_at_jump: Vec<f64>,
}

/// One coupled realization of the driving noise at the finest level.
///
/// `increments` stores the finest-cell Brownian increments row-major:
/// component `j` of cell `k` at index `k * dim_noise + j`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseRealization {
    pub level_max: u32,
    pub dim_noise: usize,
    pub horizon: f64,
    pub increments: Vec<f64>,
    /// Jump events in strictly increasing time order.
    pub jump_events: Vec<JumpEvent>,
    /// Seed that produced this realization.
    pub seed: u64,
}

impl NoiseRealization {
    pub fn cells(&self) -> usize {
        1usize << self.level_max
    }

    /// Finest step size `horizon * 2^-level_max`.
    pub fn finest_step(&self) -> f64 {
        self.horizon / self.cells() as f64
    }

    /// Serializes the realization: a header of four little-endian `u64`s
    /// (level_max, dim_noise, jump count, seed) followed by little-endian
    /// `f64`s: the horizon, all increments in storage order, then per jump
    /// its time, mark and `dim_noise` Brownian values. Debugging aid only.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        for header in [
            self.level_max as u64,
            self.dim_noise as u64,
            self.jump_events.len() as u64,
            self.seed,
        ] {
            w.write_all(&header.to_le_bytes())?;
        }
        w.write_all(&self.horizon.to_le_bytes())?;
        for &x in &self.increments {
            w.write_all(&x.to_le_bytes())?;
        }
        for ev in &self.jump_events {
            w.write_all(&ev.time.to_le_bytes())?;
            w.write_all(&ev.mark.to_le_bytes())?;
            for &x in &ev.brownian_at_jump {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Reads a realization written by [`write_binary`](Self::write_binary).
    pub fn read_binary<R: Read>(mut r: R) -> Result<Self> {
        let mut u64buf = [0u8; 8];
        let mut read_u64 = |r: &mut R| -> Result<u64> {
            r.read_exact(&mut u64buf)?;
            Ok(u64::from_le_bytes(u64buf))
        };
        let level_max = read_u64(&mut r)? as u32;
        let dim_noise = read_u64(&mut r)? as usize;
        let n_jumps = read_u64(&mut r)? as usize;
        let seed = read_u64(&mut r)?;
        if level_max == 0 || level_max > MAX_LEVEL || dim_noise == 0 {
            return Err(Error::Config("corrupt noise dump header".into()));
        }
        let mut f64buf = [0u8; 8];
        let mut read_f64 = |r: &mut R| -> Result<f64> {
            r.read_exact(&mut f64buf)?;
            Ok(f64::from_le_bytes(f64buf))
        };
        let horizon = read_f64(&mut r)?;
        let cells = 1usize << level_max;
        let mut increments = Vec::with_capacity(cells * dim_noise);
        for _ in 0..cells * dim_noise {
            increments.push(read_f64(&mut r)?);
        }
        let mut jump_events = Vec::with_capacity(n_jumps);
        for _ in 0..n_jumps {
            let time = read_f64(&mut r)?;
            let mark = read_f64(&mut r)?;
            let mut brownian_at_jump = Vec::with_capacity(dim_noise);
            for _ in 0..dim_noise {
                brownian_at_jump.push(read_f64(&mut r)?);
            }
            jump_events.push(JumpEvent {
                time,
                mark,
                brownian_at_jump,
            });
        }
        Ok(NoiseRealization {
            level_max,
            dim_noise,
            horizon,
            increments,
            jump_events,
            seed,
        })
    }
}

/// Index of the finest-level cell containing time `t`, with `t == horizon`
/// clamped into the last cell. Coarse cells are derived from this index by
/// shifting, so all levels agree on which cell a jump belongs to.
fn finest_cell(t: f64, cells: usize, horizon: f64) -> usize {
    (((t / horizon) * cells as f64) as usize).min(cells - 1)
}

fn sample_mark(law: &MarkDistribution, rng: &mut CounterRng) -> f64 {
    match *law {
        MarkDistribution::Normal { mean, variance } => {
            mean + variance.sqrt() * norm_inv_cdf(rng.uniform_open01())
        }
        MarkDistribution::Uniform { lo, hi } => lo + (hi - lo) * rng.uniform_open01(),
        MarkDistribution::Degenerate { value } => value,
    }
}

/// Samples one coupled noise realization for the problem at the given finest
/// level. Fully deterministic in `(problem, level_max, seed)`.
pub fn sample_noise(problem: &SdeProblem, level_max: u32, seed: u64) -> Result<NoiseRealization> {
    if level_max == 0 || level_max > MAX_LEVEL {
        return Err(Error::Config(format!(
            "level_max must be in 1..={MAX_LEVEL}, got {level_max}"
        )));
    }
    let m = problem.dim_noise;
    let horizon = problem.horizon;
    let cells = 1usize << level_max;
    let h = horizon / cells as f64;

    // Jump skeleton first: exponential inter-arrivals, then i.i.d. marks.
    let mut times = Vec::new();
    if let Some(jump) = problem.jump.as_ref() {
        if jump.intensity > 0.0 {
            let mut rng_exp = CounterRng::new(seed, STREAM_EXPONENTIAL);
            let mut t = 0.0;
            loop {
                t += rng_exp.exponential(jump.intensity);
                if t > horizon {
                    break;
                }
                times.push(t);
            }
        }
    }
    let mut marks = Vec::with_capacity(times.len());
    if !times.is_empty() {
        let law = &problem.jump.as_ref().unwrap().mark_law;
        let mut rng_mark = CounterRng::new(seed, STREAM_MARK);
        for _ in 0..times.len() {
            marks.push(sample_mark(law, &mut rng_mark));
        }
    }

    // Brownian increments over the finest cells.
    let mut rng_gauss = CounterRng::new(seed, STREAM_GAUSSIAN);
    let sqrt_h = h.sqrt();
    let mut increments = Vec::with_capacity(cells * m);
    for _ in 0..cells * m {
        increments.push(sqrt_h * rng_gauss.standard_normal());
    }

    // Brownian values at jump times: walk the cells accumulating the path at
    // cell starts, then bridge inside each jump's cell. Any further Gaussian
    // draws continue the same stream after the increments.
    let mut jump_events = Vec::with_capacity(times.len());
    if !times.is_empty() {
        let mut w_start = vec![0.0; m];
        let mut next = 0;
        for cell in 0..cells {
            if next >= times.len() {
                break;
            }
            let cell_start = cell as f64 * h;
            let cell_end = (cell + 1) as f64 * h;
            let mut w_end = vec![0.0; m];
            for j in 0..m {
                w_end[j] = w_start[j] + increments[cell * m + j];
            }
            let mut anchor_t = cell_start;
            let mut anchor_w = w_start.clone();
            while next < times.len() && finest_cell(times[next], cells, horizon) == cell {
                let tau = times[next];
                // Bridge from (anchor_t, anchor_w) to (cell_end, w_end).
                let span = cell_end - anchor_t;
                let rho = (tau - anchor_t) / span;
                let var = (tau - anchor_t) * (cell_end - tau) / span;
                let sd = var.max(0.0).sqrt();
                let mut w_tau = vec![0.0; m];
                for j in 0..m {
                    let mean = anchor_w[j] + rho * (w_end[j] - anchor_w[j]);
                    w_tau[j] = mean + sd * rng_gauss.standard_normal();
                }
                jump_events.push(JumpEvent {
                    time: tau,
                    mark: marks[next],
                    brownian_at_jump: w_tau.clone(),
                });
                anchor_t = tau;
                anchor_w = w_tau;
                next += 1;
            }
            for j in 0..m {
                w_start[j] = w_end[j];
            }
        }
    }

    Ok(NoiseRealization {
        level_max,
        dim_noise: m,
        horizon,
        increments,
        jump_events,
        seed,
    })
}

/// The realization restricted to a coarser dyadic level: increments are
/// exact pairwise sums of the finest ones, jump events are binned per coarse
/// cell with their fine-level Brownian values preserved, and the Brownian
/// path value at each coarse cell start is precomputed by accumulation.
#[derive(Debug, Clone)]
pub struct CoarseView<'a> {
    pub level: u32,
    pub dim_noise: usize,
    pub horizon: f64,
    increments: Vec<f64>,
    /// Path values at the `cells + 1` coarse boundaries, row-major.
    w_bounds: Vec<f64>,
    /// CSR offsets into `events` per cell; empty when there are no jumps.
    jump_offsets: Vec<u32>,
    events: &'a [JumpEvent],
}

/// One coarse cell: everything a stepping kernel consumes.
#[derive(Debug, Clone, Copy)]
pub struct CellView<'v> {
    pub index: usize,
    /// Left endpoint of the cell.
    pub t_start: f64,
    /// Cell width.
    pub h: f64,
    /// Brownian increment over the cell (length `m`).
    pub dw: &'v [f64],
    /// Brownian path value at the cell start (length `m`).
    pub w_start: &'v [f64],
    /// Jump events inside the cell, in time order.
    pub jumps: &'v [JumpEvent],
}

impl<'a> CoarseView<'a> {
    pub fn cells(&self) -> usize {
        1usize << self.level
    }

    /// Step size `horizon * 2^-level`.
    pub fn step_size(&self) -> f64 {
        self.horizon / self.cells() as f64
    }

    pub fn increments(&self) -> &[f64] {
        &self.increments
    }

    pub fn cell(&self, index: usize) -> CellView<'_> {
        let m = self.dim_noise;
        let h = self.step_size();
        let jumps = if self.jump_offsets.is_empty() {
            &self.events[0..0]
        } else {
            let lo = self.jump_offsets[index] as usize;
            let hi = self.jump_offsets[index + 1] as usize;
            &self.events[lo..hi]
        };
        CellView {
            index,
            t_start: index as f64 * h,
            h,
            dw: &self.increments[index * m..(index + 1) * m],
            w_start: &self.w_bounds[index * m..(index + 1) * m],
            jumps,
        }
    }

    /// Brownian endpoint `w_horizon` obtained by reducing this level's
    /// increments in dyadic tree order. Bitwise identical across all levels
    /// of the same realization, since every coarse increment is itself a
    /// subtree sum of the finest increments.
    pub fn endpoint(&self) -> Vec<f64> {
        let mut cur = self.increments.clone();
        while cur.len() > self.dim_noise {
            cur = halve_once(&cur, self.dim_noise);
        }
        cur
    }
}

/// Pairwise-combines adjacent cells: one halving step of the dyadic tree.
fn halve_once(increments: &[f64], m: usize) -> Vec<f64> {
    let cells = increments.len() / m;
    debug_assert!(cells % 2 == 0);
    let mut out = Vec::with_capacity(increments.len() / 2);
    for k in 0..cells / 2 {
        for j in 0..m {
            out.push(increments[2 * k * m + j] + increments[(2 * k + 1) * m + j]);
        }
    }
    out
}

/// Restricts a realization to a coarser level.
pub fn coarsen<'a>(noise: &'a NoiseRealization, level: u32) -> Result<CoarseView<'a>> {
    if level == 0 || level > noise.level_max {
        return Err(Error::Domain(format!(
            "coarsen level must be in 1..={}, got {level}",
            noise.level_max
        )));
    }
    let m = noise.dim_noise;
    let mut increments = noise.increments.clone();
    for _ in level..noise.level_max {
        increments = halve_once(&increments, m);
    }
    let cells = 1usize << level;
    debug_assert_eq!(increments.len(), cells * m);

    let mut w_bounds = vec![0.0; (cells + 1) * m];
    for k in 0..cells {
        for j in 0..m {
            w_bounds[(k + 1) * m + j] = w_bounds[k * m + j] + increments[k * m + j];
        }
    }

    let jump_offsets = if noise.jump_events.is_empty() {
        Vec::new()
    } else {
        // Bin by the finest cell index shifted down, so a jump lands in the
        // coarse cell covering its finest cell at every level.
        let shift = noise.level_max - level;
        let fine_cells = noise.cells();
        let mut counts = vec![0u32; cells + 1];
        for ev in &noise.jump_events {
            let c = finest_cell(ev.time, fine_cells, noise.horizon) >> shift;
            counts[c + 1] += 1;
        }
        for i in 0..cells {
            counts[i + 1] += counts[i];
        }
        counts
    };

    Ok(CoarseView {
        level,
        dim_noise: m,
        horizon: noise.horizon,
        increments,
        w_bounds,
        jump_offsets,
        events: &noise.jump_events,
    })
}
