//! Runtime model assembled from a validated config: chain algebra, velocity
//! fields, test function, grids and default run parameters.

use crate::config::{BoundaryModeConfig, ModelConfig};
use crate::error::{Error, Result};
use crate::expr::{parse_expression, ExpressionAst};
use crate::function_space::{
    sample, AveragedVelocity, BoundaryMode, GridFunction, SpatialGrid, TimeGrid, VelocityField,
};
use crate::markov::{Chain, GeneratorMatrix};
use nalgebra::DMatrix;

#[derive(Debug, Clone)]
pub struct Model {
    pub chain: Chain,
    pub velocity: VelocityField,
    pub vhat: AveragedVelocity,
    pub phi: ExpressionAst,
    /// Computational grid; in padded mode this is the user's interval
    /// extended by the padding on both sides.
    pub grid: SpatialGrid,
    /// Interval on which results are meant to be read.
    pub core: (f64, f64),
    pub time: TimeGrid,
    pub n_tau: usize,
    pub tau_max_factor: f64,
    pub order: usize,
    pub epsilons: Vec<f64>,
    pub mc_paths: u64,
    pub mc_seed: u64,
    /// Largest |v| over the computational grid.
    pub max_speed: f64,
    pub phi_grid: GridFunction,
}

impl Model {
    pub fn from_config(cfg: &ModelConfig) -> Result<Model> {
        let n = cfg.states.len();
        let raw = DMatrix::from_fn(n, n, |i, j| cfg.q[i][j]);
        let generator = GeneratorMatrix::new(raw).map_err(|e| match e {
            Error::RowSumViolation { row, sum } => Error::ConfigValidation {
                field: format!("Q[{row}]"),
                message: format!("row sums to {sum:.3e}, expected 0"),
            },
            Error::NegativeRate { row, col, value } => Error::ConfigValidation {
                field: format!("Q[{row}][{col}]"),
                message: format!("negative off-diagonal rate {value}"),
            },
            Error::Reducible { state } => Error::ConfigValidation {
                field: "Q".to_string(),
                message: format!("reducible: state {state} does not communicate with state 0"),
            },
            other => other,
        })?;
        let chain = Chain::new(generator)?;

        let phi = parse_expression(&cfg.phi).map_err(|e| Error::ConfigValidation {
            field: "phi".to_string(),
            message: e.to_string(),
        })?;
        let mut vel_exprs = Vec::with_capacity(n);
        for (x, src) in cfg.velocity.iter().enumerate() {
            vel_exprs.push(parse_expression(src).map_err(|e| Error::ConfigValidation {
                field: format!("velocity[{x}]"),
                message: e.to_string(),
            })?);
        }

        let time = TimeGrid::new(cfg.time.t_end, cfg.time.n_steps)?;
        let core = (cfg.grid.u_min, cfg.grid.u_max);
        let grid = match cfg.grid.boundary_mode {
            BoundaryModeConfig::Periodic => SpatialGrid::new(
                cfg.grid.u_min,
                cfg.grid.u_max,
                cfg.grid.n_points,
                BoundaryMode::Periodic,
            )?,
            BoundaryModeConfig::Padded => padded_grid(cfg, &vel_exprs, time.t_end)?,
        };

        let velocity = VelocityField::new(vel_exprs, &grid);
        let vhat = AveragedVelocity::new(&velocity, &chain.pi);
        let phi_grid = sample(&phi, grid)?;
        velocity.sample_all(grid)?; // reject non-finite velocities up front
        let max_speed = velocity.max_speed(&grid);

        Ok(Model {
            chain,
            velocity,
            vhat,
            phi,
            grid,
            core,
            time,
            n_tau: cfg.layer.n_tau,
            tau_max_factor: cfg.layer.tau_max_factor,
            order: cfg.expansion.order,
            epsilons: cfg.sweep.epsilons.clone(),
            mc_paths: cfg.mc.n_paths,
            mc_seed: cfg.mc.seed,
            max_speed,
            phi_grid,
        })
    }

    pub fn n_states(&self) -> usize {
        self.chain.n()
    }

    /// Test function evaluated with periodic wrap in periodic mode.
    pub fn phi_at(&self, u: f64) -> f64 {
        self.phi.eval(self.grid.wrap(u))
    }

    /// Boundary-layer truncation time: tau_max_factor / spectral gap.
    pub fn tau_max(&self) -> f64 {
        self.tau_max_factor / self.chain.gap.gamma
    }
}

/// Extend the user interval by the padding, preserving the grid spacing.
/// With automatic padding the width is t_end * max|v|, iterated a few times
/// because extending the domain can raise max|v|.
fn padded_grid(cfg: &ModelConfig, vel_exprs: &[ExpressionAst], t_end: f64) -> Result<SpatialGrid> {
    let (u_min, u_max, n_points) = (cfg.grid.u_min, cfg.grid.u_max, cfg.grid.n_points);
    let h = (u_max - u_min) / (n_points - 1) as f64;
    let max_speed_on = |lo: f64, hi: f64| -> f64 {
        let m = 4 * n_points;
        let mut worst = 0.0_f64;
        for expr in vel_exprs {
            for i in 0..=m {
                let u = lo + (hi - lo) * i as f64 / m as f64;
                worst = worst.max(expr.eval(u).abs());
            }
        }
        worst
    };
    let pad = match cfg.grid.pad {
        Some(p) => p,
        None => {
            let mut pad = t_end * max_speed_on(u_min, u_max);
            for _ in 0..3 {
                pad = t_end * max_speed_on(u_min - pad, u_max + pad);
            }
            pad * 1.05
        }
    };
    let extra = (pad / h).ceil() as usize;
    SpatialGrid::new(
        u_min - extra as f64 * h,
        u_max + extra as f64 * h,
        n_points + 2 * extra,
        BoundaryMode::Padded,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn telegraph(n_points: usize) -> Model {
        let text = format!(
            r#"{{
            "states": ["right", "left"],
            "Q": [[-1.0, 1.0], [1.0, -1.0]],
            "velocity": ["1", "-1"],
            "phi": "sin(u)",
            "grid": {{"n_points": {n_points}}}
        }}"#
        );
        Model::from_config(&ModelConfig::from_json(&text).unwrap()).unwrap()
    }

    #[test]
    fn telegraph_model_basics() {
        let m = telegraph(256);
        assert_eq!(m.n_states(), 2);
        assert!((m.chain.gap.gamma - 2.0).abs() < 1e-12);
        assert!((m.tau_max() - 15.0).abs() < 1e-12);
        assert!((m.max_speed - 1.0).abs() < 1e-12);
        assert!(m.vhat.eval(1.0).abs() < 1e-14);
    }

    #[test]
    fn padded_model_extends_domain() {
        let text = r#"{
            "states": ["a", "b"],
            "Q": [[-1.0, 1.0], [1.0, -1.0]],
            "velocity": ["1", "-1"],
            "phi": "u^2",
            "grid": {"u_min": -2.0, "u_max": 2.0, "n_points": 101, "boundary_mode": "padded"},
            "time": {"t_end": 0.5, "n_steps": 100}
        }"#;
        let m = Model::from_config(&ModelConfig::from_json(text).unwrap()).unwrap();
        // Automatic pad: t_end * max|v| = 0.5, plus slack, snapped to grid.
        assert!(m.grid.u_min <= -2.5 && m.grid.u_min > -2.7);
        assert!(m.grid.u_max >= 2.5 && m.grid.u_max < 2.7);
        assert_eq!(m.core, (-2.0, 2.0));
        // Spacing preserved.
        assert!((m.grid.spacing() - 0.04).abs() < 1e-12);
    }
}
