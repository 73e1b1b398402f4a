//! Grids, scalar and state-indexed fields, discrete differentiation, the
//! convection operator, averaged velocity and characteristic flows.
//!
//! Fields are immutable value types; a `StateField` stores f(u, x) as an
//! n_states x n_points matrix so that state-space operators (Q, Pi, R0,
//! exp0) apply as small matrix products.

use nalgebra::{DMatrix, DVector, RowDVector};

use crate::error::{Error, Result};
use crate::expr::ExpressionAst;
use crate::interp;
use crate::markov::{ErgodicProjector, StationaryDistribution};
use crate::ode;

/// Boundary handling of the spatial grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundaryMode {
    /// The domain is a circle: node n would coincide with node 0.
    Periodic,
    /// The domain is an interval, assumed wide enough (padded) that
    /// characteristics of interest never reach its ends.
    Padded,
}

/// Uniform spatial grid on [u_min, u_max].
///
/// Periodic spacing is (u_max - u_min)/n_points with u_max excluded; padded
/// spacing is (u_max - u_min)/(n_points - 1) with both ends included.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpatialGrid {
    pub u_min: f64,
    pub u_max: f64,
    pub n_points: usize,
    pub mode: BoundaryMode,
}

impl SpatialGrid {
    pub fn new(u_min: f64, u_max: f64, n_points: usize, mode: BoundaryMode) -> Result<SpatialGrid> {
        if !(u_max > u_min) {
            return Err(Error::ConfigValidation {
                field: "grid".to_string(),
                message: format!("u_max ({u_max}) must exceed u_min ({u_min})"),
            });
        }
        if n_points < 16 {
            return Err(Error::ConfigValidation {
                field: "grid.n_points".to_string(),
                message: format!("need at least 16 points, got {n_points}"),
            });
        }
        Ok(SpatialGrid {
            u_min,
            u_max,
            n_points,
            mode,
        })
    }

    pub fn spacing(&self) -> f64 {
        match self.mode {
            BoundaryMode::Periodic => (self.u_max - self.u_min) / self.n_points as f64,
            BoundaryMode::Padded => (self.u_max - self.u_min) / (self.n_points - 1) as f64,
        }
    }

    pub fn period(&self) -> Option<f64> {
        match self.mode {
            BoundaryMode::Periodic => Some(self.u_max - self.u_min),
            BoundaryMode::Padded => None,
        }
    }

    pub fn node(&self, i: usize) -> f64 {
        self.u_min + self.spacing() * i as f64
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..self.n_points).map(|i| self.node(i)).collect()
    }

    /// Map a position into the fundamental domain (periodic mode only).
    pub fn wrap(&self, u: f64) -> f64 {
        match self.period() {
            Some(p) => u - p * ((u - self.u_min) / p).floor(),
            None => u,
        }
    }

    /// Position in index space, wrapped for periodic grids.
    pub fn index_coord(&self, u: f64) -> f64 {
        (u - self.u_min) / self.spacing()
    }
}

/// A scalar function sampled on a spatial grid.
#[derive(Debug, Clone)]
pub struct GridFunction {
    pub grid: SpatialGrid,
    pub values: DVector<f64>,
}

impl GridFunction {
    pub fn from_values(grid: SpatialGrid, values: DVector<f64>) -> GridFunction {
        assert_eq!(values.len(), grid.n_points);
        GridFunction { grid, values }
    }

    pub fn zeros(grid: SpatialGrid) -> GridFunction {
        GridFunction {
            grid,
            values: DVector::zeros(grid.n_points),
        }
    }

    /// 4th-order spatial derivative: central stencils with periodic wrap, or
    /// one-sided 4th-order stencils at the edges of a padded grid. Exact on
    /// polynomials of degree <= 4.
    pub fn derivative(&self) -> GridFunction {
        let d = derivative_rows(
            &DMatrix::from_rows(&[RowDVector::from_row_slice(self.values.as_slice())]),
            &self.grid,
        );
        GridFunction {
            grid: self.grid,
            values: DVector::from_row_slice(d.row(0).transpose().as_slice()),
        }
    }

    /// Cubic interpolation at an arbitrary position.
    pub fn interp(&self, u: f64) -> f64 {
        let s = self.grid.index_coord(u);
        let st = match self.grid.mode {
            BoundaryMode::Periodic => interp::periodic_stencil(s, self.grid.n_points),
            BoundaryMode::Padded => interp::clamped_stencil(s, self.grid.n_points),
        };
        st.apply(self.values.as_slice())
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.amax()
    }
}

/// Sample a scalar expression on a grid, rejecting non-finite values.
pub fn sample(expr: &ExpressionAst, grid: SpatialGrid) -> Result<GridFunction> {
    let mut values = DVector::zeros(grid.n_points);
    for i in 0..grid.n_points {
        let u = grid.node(i);
        let v = expr.eval(u);
        if !v.is_finite() {
            return Err(Error::NonFiniteValue {
                expr: expr.source().to_string(),
                u,
                value: v,
            });
        }
        values[i] = v;
    }
    Ok(GridFunction::from_values(grid, values))
}

/// A function f(u, x) of position and switching state, sampled on a grid.
/// Row x holds the samples of f(., x).
#[derive(Debug, Clone)]
pub struct StateField {
    pub grid: SpatialGrid,
    pub values: DMatrix<f64>,
}

impl StateField {
    pub fn from_values(grid: SpatialGrid, values: DMatrix<f64>) -> StateField {
        assert_eq!(values.ncols(), grid.n_points);
        StateField { grid, values }
    }

    pub fn zeros(grid: SpatialGrid, n_states: usize) -> StateField {
        StateField {
            grid,
            values: DMatrix::zeros(n_states, grid.n_points),
        }
    }

    /// Lift a scalar grid function to a field constant across states.
    pub fn from_scalar(f: &GridFunction, n_states: usize) -> StateField {
        let values = DMatrix::from_fn(n_states, f.grid.n_points, |_, j| f.values[j]);
        StateField {
            grid: f.grid,
            values,
        }
    }

    pub fn n_states(&self) -> usize {
        self.values.nrows()
    }

    /// Row-wise 4th-order spatial derivative.
    pub fn derivative_u(&self) -> StateField {
        StateField {
            grid: self.grid,
            values: derivative_rows(&self.values, &self.grid),
        }
    }

    /// Apply a state-space matrix pointwise in u: out(., x) = sum_y M[x, y] f(., y).
    pub fn apply_state_matrix(&self, m: &DMatrix<f64>) -> StateField {
        StateField {
            grid: self.grid,
            values: m * &self.values,
        }
    }

    /// Weighted state average: (pi' f)(u), a scalar grid function.
    pub fn pi_average(&self, pi: &StationaryDistribution) -> GridFunction {
        let row = pi.as_vector().transpose() * &self.values;
        GridFunction {
            grid: self.grid,
            values: row.transpose(),
        }
    }

    /// Largest across-state spread max_u (max_x f - min_x f); zero iff the
    /// field is constant across states, i.e. lies in the null space of Q.
    pub fn state_spread(&self) -> f64 {
        let mut worst = 0.0_f64;
        for j in 0..self.values.ncols() {
            let col = self.values.column(j);
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for &v in col.iter() {
                lo = lo.min(v);
                hi = hi.max(v);
            }
            worst = worst.max(hi - lo);
        }
        worst
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.amax()
    }

    pub fn scale(&self, factor: f64) -> StateField {
        StateField {
            grid: self.grid,
            values: &self.values * factor,
        }
    }

    pub fn add(&self, other: &StateField) -> StateField {
        StateField {
            grid: self.grid,
            values: &self.values + &other.values,
        }
    }

    pub fn sub(&self, other: &StateField) -> StateField {
        StateField {
            grid: self.grid,
            values: &self.values - &other.values,
        }
    }
}

/// Project a field onto the null space of Q: (Pi f)(u, x) = sum_y pi_y f(u, y)
/// for every x. The result is constant across states.
pub fn project(proj: &ErgodicProjector, f: &StateField) -> StateField {
    f.apply_state_matrix(proj.matrix())
}

fn derivative_rows(values: &DMatrix<f64>, grid: &SpatialGrid) -> DMatrix<f64> {
    let n = grid.n_points;
    let h = grid.spacing();
    let rows = values.nrows();
    let mut out = DMatrix::zeros(rows, n);
    match grid.mode {
        BoundaryMode::Periodic => {
            for r in 0..rows {
                for i in 0..n {
                    let im2 = (i + n - 2) % n;
                    let im1 = (i + n - 1) % n;
                    let ip1 = (i + 1) % n;
                    let ip2 = (i + 2) % n;
                    out[(r, i)] = (values[(r, im2)] - 8.0 * values[(r, im1)]
                        + 8.0 * values[(r, ip1)]
                        - values[(r, ip2)])
                        / (12.0 * h);
                }
            }
        }
        BoundaryMode::Padded => {
            for r in 0..rows {
                let v = |i: usize| values[(r, i)];
                // One-sided 4th-order stencils at both edges.
                out[(r, 0)] = (-25.0 * v(0) + 48.0 * v(1) - 36.0 * v(2) + 16.0 * v(3) - 3.0 * v(4))
                    / (12.0 * h);
                out[(r, 1)] =
                    (-3.0 * v(0) - 10.0 * v(1) + 18.0 * v(2) - 6.0 * v(3) + v(4)) / (12.0 * h);
                for i in 2..n - 2 {
                    out[(r, i)] =
                        (v(i - 2) - 8.0 * v(i - 1) + 8.0 * v(i + 1) - v(i + 2)) / (12.0 * h);
                }
                out[(r, n - 2)] = (3.0 * v(n - 1) + 10.0 * v(n - 2) - 18.0 * v(n - 3)
                    + 6.0 * v(n - 4)
                    - v(n - 5))
                    / (12.0 * h);
                out[(r, n - 1)] = (25.0 * v(n - 1) - 48.0 * v(n - 2) + 36.0 * v(n - 3)
                    - 16.0 * v(n - 4)
                    + 3.0 * v(n - 5))
                    / (12.0 * h);
            }
        }
    }
    out
}

/// Per-state velocity field v(u; x), expression-backed. In periodic mode
/// evaluation wraps u into the fundamental domain, so the dynamics live on
/// the circle consistently across the expansion and both oracles.
#[derive(Debug, Clone)]
pub struct VelocityField {
    exprs: Vec<ExpressionAst>,
    wrap: Option<(f64, f64)>,
}

impl VelocityField {
    pub fn new(exprs: Vec<ExpressionAst>, grid: &SpatialGrid) -> VelocityField {
        let wrap = grid.period().map(|p| (grid.u_min, p));
        VelocityField { exprs, wrap }
    }

    pub fn n_states(&self) -> usize {
        self.exprs.len()
    }

    fn wrap_coord(&self, u: f64) -> f64 {
        match self.wrap {
            Some((lo, p)) => u - p * ((u - lo) / p).floor(),
            None => u,
        }
    }

    pub fn eval(&self, state: usize, u: f64) -> f64 {
        self.exprs[state].eval(self.wrap_coord(u))
    }

    /// Sample v(.; x) for every state on a grid.
    pub fn sample_all(&self, grid: SpatialGrid) -> Result<StateField> {
        let mut values = DMatrix::zeros(self.exprs.len(), grid.n_points);
        for (x, expr) in self.exprs.iter().enumerate() {
            for i in 0..grid.n_points {
                let u = grid.node(i);
                let v = expr.eval(u);
                if !v.is_finite() {
                    return Err(Error::NonFiniteValue {
                        expr: expr.source().to_string(),
                        u,
                        value: v,
                    });
                }
                values[(x, i)] = v;
            }
        }
        Ok(StateField::from_values(grid, values))
    }

    /// Convection operator: (V f)(u, x) = v(u; x) d/du f(u, x), per state.
    pub fn apply(&self, f: &StateField) -> StateField {
        assert_eq!(self.exprs.len(), f.n_states());
        let df = f.derivative_u();
        let mut values = df.values;
        for x in 0..self.exprs.len() {
            for i in 0..f.grid.n_points {
                values[(x, i)] *= self.exprs[x].eval(f.grid.node(i));
            }
        }
        StateField {
            grid: f.grid,
            values,
        }
    }

    /// Largest |v| over the grid nodes, across states.
    pub fn max_speed(&self, grid: &SpatialGrid) -> f64 {
        let mut m = 0.0_f64;
        for expr in &self.exprs {
            for i in 0..grid.n_points {
                m = m.max(expr.eval(grid.node(i)).abs());
            }
        }
        m
    }
}

/// The pi-averaged velocity: vhat(u) = sum_x pi_x v(u; x). Drives the
/// leading-order transport.
#[derive(Debug, Clone)]
pub struct AveragedVelocity {
    exprs: Vec<ExpressionAst>,
    weights: Vec<f64>,
    wrap: Option<(f64, f64)>,
}

impl AveragedVelocity {
    pub fn new(v: &VelocityField, pi: &StationaryDistribution) -> AveragedVelocity {
        assert_eq!(v.n_states(), pi.n());
        AveragedVelocity {
            exprs: v.exprs.clone(),
            weights: pi.as_vector().iter().copied().collect(),
            wrap: v.wrap,
        }
    }

    pub fn eval(&self, u: f64) -> f64 {
        let u = match self.wrap {
            Some((lo, p)) => u - p * ((u - lo) / p).floor(),
            None => u,
        };
        self.exprs
            .iter()
            .zip(&self.weights)
            .map(|(e, w)| w * e.eval(u))
            .sum()
    }
}

/// Flow map of du/dt = vhat(u): position after time `t >= 0` starting from
/// `u`, integrated adaptively at local tolerance 1e-10. In padded mode a
/// trajectory leaving the grid is a `DomainEscape`.
pub fn flow_map(vhat: &AveragedVelocity, grid: &SpatialGrid, u: f64, t: f64) -> Result<f64> {
    if t < 0.0 {
        return Err(Error::NegativeTime(t));
    }
    let f = |x: f64| vhat.eval(x);
    let pos = ode::flow_autonomous(&f, u, t, 1e-10);
    if grid.mode == BoundaryMode::Padded && (pos < grid.u_min || pos > grid.u_max) {
        return Err(Error::DomainEscape {
            position: pos,
            lo: grid.u_min,
            hi: grid.u_max,
        });
    }
    Ok(pos)
}

/// Uniform time grid on [0, t_end] with n_steps intervals.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    pub t_end: f64,
    pub n_steps: usize,
}

impl TimeGrid {
    pub fn new(t_end: f64, n_steps: usize) -> Result<TimeGrid> {
        if !(t_end > 0.0) {
            return Err(Error::ConfigValidation {
                field: "time.t_end".to_string(),
                message: format!("must be positive, got {t_end}"),
            });
        }
        if n_steps < 8 {
            return Err(Error::ConfigValidation {
                field: "time.n_steps".to_string(),
                message: format!("need at least 8 steps, got {n_steps}"),
            });
        }
        Ok(TimeGrid { t_end, n_steps })
    }

    pub fn dt(&self) -> f64 {
        self.t_end / self.n_steps as f64
    }

    pub fn n_nodes(&self) -> usize {
        self.n_steps + 1
    }

    pub fn time(&self, j: usize) -> f64 {
        self.dt() * j as f64
    }
}

/// Differentiate a sequence of state fields in time, `order` times, with
/// 4th-order finite differences (one-sided at the ends).
pub fn time_derivative(series: &[StateField], dt: f64, order: usize) -> Result<Vec<StateField>> {
    assert!(order >= 1);
    if series.len() < order + 4 {
        return Err(Error::TooFewSamples {
            needed: order + 4,
            got: series.len(),
        });
    }
    let mut cur: Vec<StateField> = series.to_vec();
    for _ in 0..order {
        cur = differentiate_once(&cur, dt);
    }
    Ok(cur)
}

fn differentiate_once(series: &[StateField], dt: f64) -> Vec<StateField> {
    let n = series.len();
    let mut out = Vec::with_capacity(n);
    for j in 0..n {
        let mut values = series[j].values.clone();
        values.fill(0.0);
        // 4th-order stencils: central in the interior, one-sided at the ends.
        // Central where it fits, one-sided at the ends; a 5-sample series
        // hits both one-sided branches (the caller guarantees n >= 5).
        let combo: Vec<(usize, f64)> = if j >= 2 && j + 2 < n {
            vec![(j - 2, 1.0), (j - 1, -8.0), (j + 1, 8.0), (j + 2, -1.0)]
        } else if j < 2 {
            if j == 0 {
                vec![(0, -25.0), (1, 48.0), (2, -36.0), (3, 16.0), (4, -3.0)]
            } else {
                vec![(0, -3.0), (1, -10.0), (2, 18.0), (3, -6.0), (4, 1.0)]
            }
        } else if j == n - 1 {
            vec![
                (n - 1, 25.0),
                (n - 2, -48.0),
                (n - 3, 36.0),
                (n - 4, -16.0),
                (n - 5, 3.0),
            ]
        } else {
            vec![
                (n - 1, 3.0),
                (n - 2, 10.0),
                (n - 3, -18.0),
                (n - 4, 6.0),
                (n - 5, -1.0),
            ]
        };
        for (idx, w) in combo {
            values += &series[idx].values * w;
        }
        values /= 12.0 * dt;
        out.push(StateField {
            grid: series[j].grid,
            values,
        });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::parse_expression;
    use crate::markov::GeneratorMatrix;
    use std::f64::consts::PI;

    fn periodic_grid(n: usize) -> SpatialGrid {
        SpatialGrid::new(0.0, 2.0 * PI, n, BoundaryMode::Periodic).unwrap()
    }

    fn padded_grid() -> SpatialGrid {
        SpatialGrid::new(-1.0, 1.0, 64, BoundaryMode::Padded).unwrap()
    }

    fn two_state_chain(rows: &[[f64; 2]; 2]) -> crate::markov::Chain {
        let m = DMatrix::from_fn(2, 2, |i, j| rows[i][j]);
        crate::markov::Chain::new(GeneratorMatrix::new(m).unwrap()).unwrap()
    }

    #[test]
    fn sample_sine_and_constants() {
        let grid = periodic_grid(64);
        let f = sample(&parse_expression("sin(u)").unwrap(), grid).unwrap();
        for i in 0..64 {
            assert!((f.values[i] - grid.node(i).sin()).abs() < 1e-15);
        }
        let ones = sample(&parse_expression("1").unwrap(), grid).unwrap();
        assert!(ones.values.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn sample_rejects_non_finite() {
        let grid = SpatialGrid::new(-1.0, 1.0, 17, BoundaryMode::Padded).unwrap();
        // Node 8 sits exactly at u = 0.
        let err = sample(&parse_expression("1/u").unwrap(), grid).unwrap_err();
        assert!(matches!(err, Error::NonFiniteValue { .. }), "{err}");
    }

    #[test]
    fn derivative_exact_on_quadratic_padded() {
        let grid = padded_grid();
        let f = sample(&parse_expression("u^2").unwrap(), grid).unwrap();
        let d = f.derivative();
        for i in 0..grid.n_points {
            assert!((d.values[i] - 2.0 * grid.node(i)).abs() < 1e-12, "node {i}");
        }
    }

    #[test]
    fn derivative_sine_periodic_fourth_order() {
        // Leading truncation term is h^4 f^(5) / 30 ~ 1.94e-7 for h = 2pi/128.
        let grid = periodic_grid(128);
        let f = sample(&parse_expression("sin(u)").unwrap(), grid).unwrap();
        let d = f.derivative();
        let bound = grid.spacing().powi(4) / 30.0 * 1.05;
        for i in 0..grid.n_points {
            assert!((d.values[i] - grid.node(i).cos()).abs() < bound);
        }
    }

    #[test]
    fn derivative_of_constant_vanishes() {
        for grid in [periodic_grid(32), padded_grid()] {
            let f = sample(&parse_expression("3.5").unwrap(), grid).unwrap();
            assert!(f.derivative().sup_norm() < 1e-13);
        }
    }

    #[test]
    fn convection_two_state() {
        // v = (+1, -1), f = sin(u) in both states -> (cos u, -cos u).
        let grid = periodic_grid(128);
        let v = VelocityField::new(
            vec![
                parse_expression("1").unwrap(),
                parse_expression("-1").unwrap(),
            ],
            &grid,
        );
        let phi = sample(&parse_expression("sin(u)").unwrap(), grid).unwrap();
        let f = StateField::from_scalar(&phi, 2);
        let vf = v.apply(&f);
        let bound = grid.spacing().powi(4) / 30.0 * 1.05;
        for i in 0..grid.n_points {
            let c = grid.node(i).cos();
            assert!((vf.values[(0, i)] - c).abs() < bound);
            assert!((vf.values[(1, i)] + c).abs() < bound);
        }
        // f constant and v = 0 both give zero.
        let ones =
            StateField::from_scalar(&sample(&parse_expression("1").unwrap(), grid).unwrap(), 2);
        assert!(v.apply(&ones).sup_norm() < 1e-13);
        let v0 = VelocityField::new(
            vec![
                parse_expression("0").unwrap(),
                parse_expression("0").unwrap(),
            ],
            &grid,
        );
        assert!(v0.apply(&f).sup_norm() < 1e-13);
    }

    #[test]
    fn projection_examples() {
        let grid = periodic_grid(32);
        let sym = two_state_chain(&[[-1.0, 1.0], [1.0, -1.0]]);
        let g = sample(&parse_expression("cos(u)").unwrap(), grid).unwrap();
        // Antisymmetric pair cancels under the symmetric projector.
        let mut f = StateField::from_scalar(&g, 2);
        for i in 0..grid.n_points {
            f.values[(1, i)] = -f.values[(1, i)];
        }
        assert!(project(&sym.projector, &f).sup_norm() < 1e-14);
        // A field constant across states is fixed.
        let c = StateField::from_scalar(&g, 2);
        assert!(project(&sym.projector, &c).sub(&c).sup_norm() < 1e-14);
        // Weighted mean with pi = (0.6, 0.4): (1, 2) -> 1.4 in both states.
        let asym = two_state_chain(&[[-2.0, 2.0], [3.0, -3.0]]);
        let mut f12 = StateField::zeros(grid, 2);
        for i in 0..grid.n_points {
            f12.values[(0, i)] = 1.0;
            f12.values[(1, i)] = 2.0;
        }
        let p = project(&asym.projector, &f12);
        for i in 0..grid.n_points {
            assert!((p.values[(0, i)] - 1.4).abs() < 1e-14);
            assert!((p.values[(1, i)] - 1.4).abs() < 1e-14);
        }
    }

    #[test]
    fn averaged_velocity_cases() {
        let grid = periodic_grid(32);
        let v = VelocityField::new(
            vec![
                parse_expression("1").unwrap(),
                parse_expression("-1").unwrap(),
            ],
            &grid,
        );
        let sym = two_state_chain(&[[-1.0, 1.0], [1.0, -1.0]]);
        let vhat = AveragedVelocity::new(&v, &sym.pi);
        assert!(vhat.eval(1.0).abs() < 1e-14);
        let asym = two_state_chain(&[[-2.0, 2.0], [3.0, -3.0]]);
        let vhat = AveragedVelocity::new(&v, &asym.pi);
        assert!((vhat.eval(1.0) - 0.2).abs() < 1e-13);
        // v = (u, u): vhat(u) = u regardless of pi.
        let vu = VelocityField::new(
            vec![
                parse_expression("u").unwrap(),
                parse_expression("u").unwrap(),
            ],
            &grid,
        );
        let vhat = AveragedVelocity::new(&vu, &asym.pi);
        // wrap maps 1.0 to itself on [0, 2pi)
        assert!((vhat.eval(1.0) - 1.0).abs() < 1e-13);
    }

    #[test]
    fn flow_map_cases() {
        let grid = SpatialGrid::new(-10.0, 10.0, 64, BoundaryMode::Padded).unwrap();
        let sym = two_state_chain(&[[-1.0, 1.0], [1.0, -1.0]]);
        // vhat = 0: fixed point.
        let v0 = VelocityField::new(
            vec![
                parse_expression("1").unwrap(),
                parse_expression("-1").unwrap(),
            ],
            &grid,
        );
        let vhat0 = AveragedVelocity::new(&v0, &sym.pi);
        assert_eq!(flow_map(&vhat0, &grid, 0.7, 2.0).unwrap(), 0.7);
        // vhat = c: drift.
        let vc = VelocityField::new(
            vec![
                parse_expression("0.5").unwrap(),
                parse_expression("0.5").unwrap(),
            ],
            &grid,
        );
        let vhatc = AveragedVelocity::new(&vc, &sym.pi);
        assert!((flow_map(&vhatc, &grid, 1.0, 3.0).unwrap() - 2.5).abs() < 1e-10);
        // vhat(u) = u from u=1 over t=1: e.
        let vu = VelocityField::new(
            vec![
                parse_expression("u").unwrap(),
                parse_expression("u").unwrap(),
            ],
            &grid,
        );
        let vhatu = AveragedVelocity::new(&vu, &sym.pi);
        let p = flow_map(&vhatu, &grid, 1.0, 1.0).unwrap();
        assert!((p - std::f64::consts::E).abs() < 1e-8);
        // Escape out of a small padded domain.
        let small = SpatialGrid::new(-1.0, 1.0, 32, BoundaryMode::Padded).unwrap();
        assert!(matches!(
            flow_map(&vhatc, &small, 0.9, 10.0),
            Err(Error::DomainEscape { .. })
        ));
    }

    #[test]
    fn time_derivative_cases() {
        let grid = periodic_grid(16);
        let make = |f: &dyn Fn(f64) -> f64, n: usize, dt: f64| -> Vec<StateField> {
            (0..n)
                .map(|j| {
                    let mut sf = StateField::zeros(grid, 2);
                    sf.values.fill(f(dt * j as f64));
                    sf
                })
                .collect()
        };
        // f(t) = t^2 -> exactly 2t.
        let dt = 0.05;
        let series = make(&|t| t * t, 21, dt);
        let d = time_derivative(&series, dt, 1).unwrap();
        for (j, field) in d.iter().enumerate() {
            let expect = 2.0 * dt * j as f64;
            assert!((field.values[(0, 0)] - expect).abs() < 1e-10, "j={j}");
        }
        // f(t) = sin(t), dt = 1e-2 -> cos within 1e-8.
        let dt = 1e-2;
        let series = make(&|t| t.sin(), 64, dt);
        let d = time_derivative(&series, dt, 1).unwrap();
        for (j, field) in d.iter().enumerate() {
            assert!(
                (field.values[(1, 3)] - (dt * j as f64).cos()).abs() < 1e-8,
                "j={j}"
            );
        }
        // Constant series: all orders vanish.
        let series = make(&|_| 4.2, 12, 0.1);
        for m in 1..=2 {
            let d = time_derivative(&series, 0.1, m).unwrap();
            assert!(d.iter().all(|f| f.sup_norm() < 1e-10));
        }
        // Too few samples.
        let short = make(&|t| t, 4, 0.1);
        assert!(matches!(
            time_derivative(&short, 0.1, 1),
            Err(Error::TooFewSamples { .. })
        ));
    }

    #[test]
    fn time_derivative_minimal_length_series() {
        // Exactly m + 4 = 5 samples: every node uses a one-sided or central
        // stencil that is still exact for quadratics.
        let grid = periodic_grid(16);
        let dt = 0.1;
        let series: Vec<StateField> = (0..5)
            .map(|j| {
                let t = dt * j as f64;
                let mut sf = StateField::zeros(grid, 1);
                sf.values.fill(3.0 * t * t - 2.0 * t + 1.0);
                sf
            })
            .collect();
        let d = time_derivative(&series, dt, 1).unwrap();
        for (j, f) in d.iter().enumerate() {
            let t = dt * j as f64;
            assert!(
                (f.values[(0, 0)] - (6.0 * t - 2.0)).abs() < 1e-10,
                "j={j}: {} vs {}",
                f.values[(0, 0)],
                6.0 * t - 2.0
            );
        }
    }

    #[test]
    fn second_time_derivative_of_cubic() {
        let grid = periodic_grid(16);
        let dt = 0.02;
        let series: Vec<StateField> = (0..32)
            .map(|j| {
                let t = dt * j as f64;
                let mut sf = StateField::zeros(grid, 1);
                sf.values.fill(t * t * t - t);
                sf
            })
            .collect();
        let d2 = time_derivative(&series, dt, 2).unwrap();
        for (j, f) in d2.iter().enumerate() {
            let t = dt * j as f64;
            assert!((f.values[(0, 0)] - 6.0 * t).abs() < 1e-8, "j={j}");
        }
    }
}
