//! Independent reference computations of the observable Phi(u, x, t):
//!
//! * a direct solver of the stiff backward system
//!   d/dt Phi = (Q/eps + V) Phi, Phi(0) = phi, by Strang splitting with
//!   semi-Lagrangian transport and the exact coupling exponential, and
//! * a Monte Carlo simulator of the switched flow du/dt = v(u; x(t/eps)).
//!
//! Neither shares machinery with the expansion engine beyond the validated
//! generator; they arbitrate its sign conventions and measure remainders.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::function_space::{BoundaryMode, SpatialGrid, StateField};
use crate::interp::{self, Stencil4};
use crate::model::Model;
use crate::ode;

/// Fixed integration-step cap of the path simulator, independent of eps.
const MC_STEP_CAP: f64 = 1e-3;

/// Resolution knobs of the direct solver.
#[derive(Debug, Clone, Copy)]
pub struct DirectConfig {
    /// Spatial refinement factor relative to the model grid.
    pub refine: usize,
    /// Explicit step cap; `None` derives the step from the limits below.
    pub dt: Option<f64>,
    /// Step must also satisfy dt <= layer_frac * eps so the initial layer is
    /// resolved rather than merely damped.
    pub layer_frac: f64,
    /// CFL number: dt <= cfl * h / max|v| keeps interpolation local.
    pub cfl: f64,
}

impl Default for DirectConfig {
    fn default() -> Self {
        DirectConfig {
            refine: 1,
            dt: None,
            layer_frac: 0.25,
            cfl: 0.8,
        }
    }
}

impl DirectConfig {
    fn halved(&self, dt_used: f64) -> DirectConfig {
        DirectConfig {
            refine: self.refine * 2,
            dt: Some(0.5 * dt_used),
            layer_frac: self.layer_frac,
            cfl: self.cfl,
        }
    }
}

/// Snapshots of the direct solution at requested times, on a possibly
/// refined grid.
#[derive(Debug, Clone)]
pub struct DirectSolution {
    pub grid: SpatialGrid,
    pub refine: usize,
    pub times: Vec<f64>,
    pub snapshots: Vec<StateField>,
    pub dt_used: f64,
    pub steps: usize,
}

impl DirectSolution {
    pub fn at(&self, t: f64) -> Option<&StateField> {
        self.times
            .iter()
            .position(|&s| (s - t).abs() <= 1e-12 * (1.0 + t.abs()))
            .map(|i| &self.snapshots[i])
    }
}

fn refined_grid(grid: &SpatialGrid, refine: usize) -> SpatialGrid {
    let n_points = match grid.mode {
        BoundaryMode::Periodic => grid.n_points * refine,
        BoundaryMode::Padded => (grid.n_points - 1) * refine + 1,
    };
    SpatialGrid {
        u_min: grid.u_min,
        u_max: grid.u_max,
        n_points,
        mode: grid.mode,
    }
}

/// Transport of one state by one semi-Lagrangian step: precomputed feet of
/// the characteristics and their interpolation stencils.
struct TransportStep {
    stencils: Vec<Vec<Stencil4>>, // per state, per node
}

impl TransportStep {
    fn build(model: &Model, grid: &SpatialGrid, core: (f64, f64), h_step: f64) -> Result<Self> {
        let n = grid.n_points;
        let mut stencils = Vec::with_capacity(model.n_states());
        for x in 0..model.n_states() {
            let f = |u: f64| model.velocity.eval(x, u);
            let mut per_node = Vec::with_capacity(n);
            for i in 0..n {
                let node = grid.node(i);
                let foot = ode::flow_autonomous(&f, node, h_step, 1e-12);
                let st = match grid.mode {
                    BoundaryMode::Periodic => interp::periodic_stencil(grid.index_coord(foot), n),
                    BoundaryMode::Padded => {
                        let inside = (grid.u_min..=grid.u_max).contains(&foot);
                        if !inside && (core.0..=core.1).contains(&node) {
                            return Err(Error::DomainEscape {
                                position: foot,
                                lo: grid.u_min,
                                hi: grid.u_max,
                            });
                        }
                        interp::clamped_stencil(grid.index_coord(foot), n)
                    }
                };
                per_node.push(st);
            }
            stencils.push(per_node);
        }
        Ok(TransportStep { stencils })
    }

    fn apply(&self, field: &StateField) -> StateField {
        let n = field.grid.n_points;
        let states = field.n_states();
        let mut out = DMatrix::zeros(states, n);
        let mut row = vec![0.0; n];
        for x in 0..states {
            for (i, slot) in row.iter_mut().enumerate() {
                *slot = field.values[(x, i)];
            }
            for i in 0..n {
                out[(x, i)] = self.stencils[x][i].apply(&row);
            }
        }
        StateField::from_values(field.grid, out)
    }
}

/// Solve the backward system d/dt Phi = (Q/eps + V) Phi, Phi(0) = phi, and
/// record snapshots at the requested times (sorted, within [0, t_end]).
///
/// Each segment between snapshots runs Strang steps
/// T(dt/2) [C(dt) T(dt)]^(m-1) C(dt) T(dt/2) with transport T along the exact
/// characteristics of v(.; x) (cubic interpolation at the feet) and the exact
/// coupling C = e^{Q dt / eps}.
pub fn direct_solve(
    model: &Model,
    eps: f64,
    times: &[f64],
    cfg: DirectConfig,
) -> Result<DirectSolution> {
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(Error::ConfigValidation {
            field: "eps".to_string(),
            message: format!("must be positive and finite, got {eps}"),
        });
    }
    for &t in times {
        if !t.is_finite() || t < 0.0 {
            return Err(Error::ConfigValidation {
                field: "times".to_string(),
                message: format!("snapshot times must be finite and nonnegative, got {t}"),
            });
        }
    }
    let grid = refined_grid(&model.grid, cfg.refine.max(1));
    if grid.mode == BoundaryMode::Padded {
        // Over the full horizon, characteristics from the core sweep a band
        // of width t * max|v|; the padding must contain it or boundary
        // pollution reaches the core.
        let horizon = times.iter().copied().fold(0.0_f64, f64::max);
        let needed = horizon * model.max_speed;
        let pad = (model.core.0 - grid.u_min).min(grid.u_max - model.core.1);
        if needed > pad * (1.0 + 1e-9) {
            return Err(Error::DomainEscape {
                position: model.core.1 + needed,
                lo: grid.u_min,
                hi: grid.u_max,
            });
        }
    }
    let h = grid.spacing();
    let cfl_limit = cfg.cfl * h / model.max_speed.max(1e-300);
    if let Some(dt) = cfg.dt {
        if dt > cfl_limit {
            return Err(Error::CflViolation {
                dt,
                limit: cfl_limit,
            });
        }
    }
    let dt_target = cfg
        .dt
        .unwrap_or(f64::INFINITY)
        .min(cfl_limit)
        .min(cfg.layer_frac * eps);

    // Initial data: phi in every state.
    let n = grid.n_points;
    let mut values = DMatrix::zeros(model.n_states(), n);
    for i in 0..n {
        let v = model.phi_at(grid.node(i));
        for x in 0..model.n_states() {
            values[(x, i)] = v;
        }
    }
    let mut field = StateField::from_values(grid, values);

    let mut sorted = times.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut snapshots = Vec::with_capacity(sorted.len());
    let mut out_times = Vec::with_capacity(sorted.len());
    let mut t_cur = 0.0_f64;
    let mut dt_used = 0.0_f64;
    let mut total_steps = 0usize;

    for &t_req in &sorted {
        if t_req < -1e-15 {
            return Err(Error::NegativeTime(t_req));
        }
        let seg = t_req - t_cur;
        if seg > 1e-14 {
            let m = (seg / dt_target).ceil().max(1.0) as usize;
            let dt = seg / m as f64;
            dt_used = dt_used.max(dt);
            let coupling = model.chain.generator.transition(dt / eps)?;
            let transport_half = TransportStep::build(model, &grid, model.core, 0.5 * dt)?;
            let transport_full = TransportStep::build(model, &grid, model.core, dt)?;
            field = transport_half.apply(&field);
            for step in 0..m {
                field = field.apply_state_matrix(&coupling);
                if step + 1 < m {
                    field = transport_full.apply(&field);
                } else {
                    field = transport_half.apply(&field);
                }
            }
            total_steps += m;
            t_cur = t_req;
        }
        out_times.push(t_req);
        snapshots.push(field.clone());
    }

    Ok(DirectSolution {
        grid,
        refine: cfg.refine.max(1),
        times: out_times,
        snapshots,
        dt_used,
        steps: total_steps,
    })
}

/// Direct solve plus a self-convergence estimate: the same run with halved
/// step and doubled resolution, compared on the common nodes at the final
/// snapshot. The estimate is the measured sup-norm shift.
pub fn solve_with_certificate(
    model: &Model,
    eps: f64,
    times: &[f64],
    cfg: DirectConfig,
) -> Result<(DirectSolution, f64)> {
    let coarse = direct_solve(model, eps, times, cfg)?;
    let fine = direct_solve(model, eps, times, cfg.halved(coarse.dt_used))?;
    let mut worst = 0.0_f64;
    for (c, f) in coarse.snapshots.iter().zip(&fine.snapshots) {
        worst = worst.max(subsampled_sup_diff(c, f, 2));
    }
    Ok((coarse, worst))
}

/// Sup-norm difference between a field and a refinement of it, compared on
/// the coarse nodes.
pub fn subsampled_sup_diff(coarse: &StateField, fine: &StateField, factor: usize) -> f64 {
    let n = coarse.grid.n_points;
    let mut worst = 0.0_f64;
    for x in 0..coarse.n_states() {
        for i in 0..n {
            let d = coarse.values[(x, i)] - fine.values[(x, i * factor)];
            worst = worst.max(d.abs());
        }
    }
    worst
}

/// Monte Carlo estimate of Phi(u, x, t).
#[derive(Debug, Clone, PartialEq)]
pub struct McEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub n_paths: u64,
    pub seed: u64,
    pub t: f64,
    pub u: f64,
    pub state: usize,
}

/// Simulate one path of the switched flow: the chain jumps at rate
/// -q_xx / eps with transition probabilities q_xy / (-q_xx), and the position
/// integrates du/dt = v(u; x) with classical RK4 steps capped at 1e-3.
/// Returns the final position and the number of jumps.
pub fn simulate_path(
    model: &Model,
    eps: f64,
    t_end: f64,
    u0: f64,
    x0: usize,
    rng: &mut ChaCha12Rng,
) -> Result<(f64, u64)> {
    let q = model.chain.generator.matrix();
    let n = model.n_states();
    let mut u = u0;
    let mut x = x0;
    let mut remaining = t_end;
    let mut jumps = 0u64;
    let advance = |u: &mut f64, x: usize, span: f64| -> Result<()> {
        if span <= 0.0 {
            return Ok(());
        }
        let substeps = (span / MC_STEP_CAP).ceil().max(1.0) as usize;
        let h = span / substeps as f64;
        let f = |p: f64| model.velocity.eval(x, p);
        for _ in 0..substeps {
            *u = ode::rk4_step(&f, *u, h);
        }
        if model.grid.mode == BoundaryMode::Padded
            && !(model.grid.u_min..=model.grid.u_max).contains(u)
        {
            return Err(Error::DomainEscape {
                position: *u,
                lo: model.grid.u_min,
                hi: model.grid.u_max,
            });
        }
        Ok(())
    };
    loop {
        let exit_rate = -q[(x, x)] / eps;
        let draw: f64 = rng.random();
        let hold = -(1.0 - draw).ln() / exit_rate;
        if hold >= remaining {
            advance(&mut u, x, remaining)?;
            return Ok((u, jumps));
        }
        advance(&mut u, x, hold)?;
        remaining -= hold;
        // Jump to a new state with probabilities q_xy / (-q_xx).
        let total = -q[(x, x)];
        let mut draw: f64 = rng.random::<f64>() * total;
        let mut next = x;
        for y in 0..n {
            if y == x {
                continue;
            }
            let rate = q[(x, y)];
            next = y; // last candidate wins on rounding
            if draw < rate {
                break;
            }
            draw -= rate;
        }
        x = next;
        jumps += 1;
    }
}

/// Monte Carlo estimate using the worker count from `EVOMAX_THREADS`
/// (absent or unparsable means one worker).
pub fn mc_estimate(
    model: &Model,
    eps: f64,
    t: f64,
    u: f64,
    state: usize,
    n_paths: u64,
    seed: u64,
) -> Result<McEstimate> {
    let workers = std::env::var("EVOMAX_THREADS")
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .filter(|&w| w >= 1)
        .unwrap_or(1);
    mc_estimate_with_workers(model, eps, t, u, state, n_paths, seed, workers)
}

/// Monte Carlo estimate with an explicit worker count. Per-path randomness is
/// a dedicated stream of one keyed ChaCha12 generator, selected by the path
/// index, so the result is bit-identical for any worker count or execution
/// order.
#[allow(clippy::too_many_arguments)]
pub fn mc_estimate_with_workers(
    model: &Model,
    eps: f64,
    t: f64,
    u: f64,
    state: usize,
    n_paths: u64,
    seed: u64,
    workers: usize,
) -> Result<McEstimate> {
    if n_paths < 100 {
        return Err(Error::ConfigValidation {
            field: "mc.n_paths".to_string(),
            message: format!("need at least 100 paths, got {n_paths}"),
        });
    }
    if state >= model.n_states() {
        return Err(Error::ConfigValidation {
            field: "x".to_string(),
            message: format!(
                "state index {state} out of range for {} states",
                model.n_states()
            ),
        });
    }
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(Error::ConfigValidation {
            field: "eps".to_string(),
            message: format!("must be positive and finite, got {eps}"),
        });
    }
    if !t.is_finite() || t < 0.0 || !u.is_finite() {
        return Err(Error::ConfigValidation {
            field: "t/u".to_string(),
            message: format!("probe point must be finite with t >= 0, got t = {t}, u = {u}"),
        });
    }
    let n = n_paths as usize;
    let mut vals = vec![0.0_f64; n];
    let workers = workers.max(1).min(n);
    let chunk = n.div_ceil(workers);
    let mut failure: Option<Error> = None;
    std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for (w, slice) in vals.chunks_mut(chunk).enumerate() {
            let start = w * chunk;
            handles.push(scope.spawn(move || -> Result<()> {
                for (off, slot) in slice.iter_mut().enumerate() {
                    let idx = (start + off) as u64;
                    let mut rng = ChaCha12Rng::seed_from_u64(seed);
                    rng.set_stream(idx);
                    let (pos, _) = simulate_path(model, eps, t, u, state, &mut rng)?;
                    *slot = model.phi_at(pos);
                }
                Ok(())
            }));
        }
        for h in handles {
            if let Err(e) = h.join().expect("worker panicked") {
                failure.get_or_insert(e);
            }
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    // Sequential reduction in path order keeps the result independent of the
    // worker count.
    let mean = vals.iter().sum::<f64>() / n as f64;
    let ss: f64 = vals.iter().map(|v| (v - mean) * (v - mean)).sum();
    let stderr = (ss / (n as f64 - 1.0) / n as f64).sqrt();
    Ok(McEstimate {
        mean,
        stderr,
        n_paths,
        seed,
        t,
        u,
        state,
    })
}
