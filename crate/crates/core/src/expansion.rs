//! The expansion engine: leading-order averaged transport, the regular-term
//! recursion with scalar corrections solved along characteristics, and
//! boundary-layer terms on the fast time scale tau = t/eps.
//!
//! Construction, order by order (L = d/dt - V):
//!
//! * u0(u, t) = phi evaluated along the averaged flow; c0 := u0.
//! * u_k = R0 L u_{k-1} + c_k, with c_k constant across states.
//! * c_k solves (d/dt - vhat d/du) c_k = S_k with S_k = Pi V R0 L u_{k-1},
//!   the unique source for which Pi L u_k = 0 (the solvability condition
//!   that makes the next order well-posed). Initial values: c_1(0) = 0 and
//!   c_k(0) = Pi V int_0^inf w_{k-1}(s) ds for k >= 2.
//! * w_k solves dw/dtau = Q w + V w_{k-1} on the layer grid with
//!   w_k(0) = -R0 L u_{k-1}(0) - Pi int_0^inf V w_{k-1}(s) ds, equivalently
//!   the centered form exp0(Q tau) w_k(0) plus the exp0 convolution of the
//!   forcing minus the projected tail Pi int_tau^inf V w_{k-1}(s) ds; the
//!   recursion advances with the exact propagator e^{Q dtau} and
//!   per-interval Simpson quadrature (quintic midpoint interpolation), which
//!   is the same composite-Simpson convolution evaluated incrementally.
//!
//! The pairing of c_k(0) with the Pi-part of w_k(0) makes the initial
//! matching u_k(0) + w_k(0) = 0 hold by construction; the solvability
//! residual sup |Pi L u_k| is measured independently by finite differences
//! and reported per order.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::function_space::{
    time_derivative, BoundaryMode, GridFunction, SpatialGrid, StateField, TimeGrid,
};
use crate::interp;
use crate::model::Model;
use crate::ode;

/// Uniform grid on the fast time scale, truncated where the layer terms have
/// decayed below reporting precision.
#[derive(Debug, Clone, Copy)]
pub struct LayerGrid {
    pub tau_max: f64,
    pub n_tau: usize,
}

impl LayerGrid {
    pub fn dtau(&self) -> f64 {
        self.tau_max / self.n_tau as f64
    }

    pub fn tau(&self, m: usize) -> f64 {
        self.dtau() * m as f64
    }

    pub fn n_nodes(&self) -> usize {
        self.n_tau + 1
    }
}

/// A state field per node of the slow time grid.
#[derive(Debug, Clone)]
pub struct FieldSeries {
    pub time: TimeGrid,
    pub fields: Vec<StateField>,
}

impl FieldSeries {
    /// Cubic interpolation in time.
    pub fn at_time(&self, t: f64) -> StateField {
        let s = t / self.time.dt();
        let st = interp::clamped_stencil(s, self.fields.len());
        combine(&self.fields, &st)
    }
}

/// A scalar grid function per node of the slow time grid.
#[derive(Debug, Clone)]
pub struct ScalarSeries {
    pub time: TimeGrid,
    pub values: Vec<GridFunction>,
}

/// A state field per node of the layer grid.
#[derive(Debug, Clone)]
pub struct LayerSeries {
    pub layer: LayerGrid,
    pub fields: Vec<StateField>,
}

impl LayerSeries {
    /// Cubic interpolation in tau; identically zero beyond tau_max, where the
    /// stored values are below 1e-7 by construction.
    pub fn at_tau(&self, tau: f64) -> StateField {
        if tau >= self.layer.tau_max {
            let f0 = &self.fields[0];
            return StateField::zeros(f0.grid, f0.n_states());
        }
        let s = tau / self.layer.dtau();
        let st = interp::clamped_stencil(s, self.fields.len());
        combine(&self.fields, &st)
    }
}

fn combine(fields: &[StateField], st: &interp::Stencil4) -> StateField {
    let mut values = &fields[st.idx[0]].values * st.w[0];
    for k in 1..4 {
        values += &fields[st.idx[k]].values * st.w[k];
    }
    StateField {
        grid: fields[0].grid,
        values,
    }
}

/// Laplace-transform diagnostics of one singular term.
#[derive(Debug, Clone)]
pub struct LayerLaplace {
    /// wtilde(0) = int_0^inf w(s) ds.
    pub at_zero: StateField,
    /// d/dlambda wtilde at 0 = -int_0^inf s w(s) ds.
    pub deriv_at_zero: StateField,
    /// Sup-norm of the analytic tail beyond tau_max.
    pub tail_estimate: f64,
}

/// The computed expansion: terms, per-order diagnostics and the layer grid.
#[derive(Debug, Clone)]
pub struct ExpansionResult {
    pub order: usize,
    /// u_k for k = 0..=order.
    pub regular: Vec<FieldSeries>,
    /// c_k for k = 1..=order.
    pub corrections: Vec<ScalarSeries>,
    /// w_k for k = 1..=order.
    pub singular: Vec<LayerSeries>,
    pub layer: LayerGrid,
    /// sup_t |Pi L u_k| for k = 1..=order: residual of the c-equation chain,
    /// measured by finite differences on the stored series.
    pub solvability: Vec<f64>,
    /// sup |Q u_k - (I - Pi) L u_{k-1}| for k = 1..=order.
    pub range_residual: Vec<f64>,
    /// sup |u_k(0) + w_k(0)| for k = 1..=order.
    pub matching: Vec<f64>,
    /// sup |w_k(tau_max)| for k = 1..=order.
    pub layer_decay: Vec<f64>,
    /// Laplace diagnostics per k = 1..=order.
    pub laplace: Vec<LayerLaplace>,
}

impl ExpansionResult {
    /// Evaluate the truncation Phi_N = u0 + sum_{k<=N} eps^k (u_k + w_k(t/eps))
    /// on the whole grid; `include_layers = false` drops the w terms.
    pub fn evaluate(
        &self,
        order: usize,
        eps: f64,
        t: f64,
        include_layers: bool,
    ) -> Result<StateField> {
        if order > self.order {
            return Err(Error::OrderUnavailable {
                requested: order,
                computed: self.order,
            });
        }
        if !(eps > 0.0) || !eps.is_finite() {
            return Err(Error::GridMismatch(format!(
                "eps must be positive and finite, got {eps}"
            )));
        }
        let t_end = self.regular[0].time.t_end;
        if !(0.0..=t_end * (1.0 + 1e-12)).contains(&t) {
            return Err(Error::GridMismatch(format!(
                "t = {t} outside the computed window [0, {t_end}]"
            )));
        }
        let mut acc = self.regular[0].at_time(t);
        let mut scale = 1.0;
        for k in 1..=order {
            scale *= eps;
            acc = acc.add(&self.regular[k].at_time(t).scale(scale));
            if include_layers {
                acc = acc.add(&self.singular[k - 1].at_tau(t / eps).scale(scale));
            }
        }
        Ok(acc)
    }

    /// Quadrature Laplace transform of the k-th singular term,
    /// int_0^inf e^{-lambda s} w_k(s) ds, with analytic tail correction.
    pub fn laplace_singular(&self, k: usize, lambda: f64, gap: f64) -> Result<StateField> {
        if lambda <= 0.0 {
            return Err(Error::NonPositiveLambda(lambda));
        }
        if k == 0 || k > self.order {
            return Err(Error::OrderUnavailable {
                requested: k,
                computed: self.order,
            });
        }
        let w = &self.singular[k - 1];
        let mids = tau_midpoints(&w.fields);
        let dtau = w.layer.dtau();
        let mut acc = StateField::zeros(w.fields[0].grid, w.fields[0].n_states());
        for (l, mid) in mids.iter().enumerate() {
            let t0 = w.layer.tau(l);
            let tm = t0 + 0.5 * dtau;
            let t1 = w.layer.tau(l + 1);
            acc = acc.add(&w.fields[l].scale((-lambda * t0).exp() * dtau / 6.0));
            acc = acc.add(&mid.scale(4.0 * (-lambda * tm).exp() * dtau / 6.0));
            acc = acc.add(&w.fields[l + 1].scale((-lambda * t1).exp() * dtau / 6.0));
        }
        // Exponential tail beyond tau_max at rate gap + lambda.
        let tail =
            w.fields[w.layer.n_tau].scale((-lambda * w.layer.tau_max).exp() / (gap + lambda));
        Ok(acc.add(&tail))
    }
}

/// Hard tolerances enforced while building the expansion.
#[derive(Debug, Clone, Copy)]
pub struct BuildTolerances {
    /// |Pi w_1(0)| must stay below this.
    pub projection: f64,
    /// u_k(0) + w_k(0) must match within this.
    pub matching: f64,
    /// Estimated quadrature tail beyond tau_max must stay below this.
    pub tail: f64,
    /// Reported solvability residual must stay below this.
    pub solvability: f64,
}

impl Default for BuildTolerances {
    fn default() -> Self {
        BuildTolerances {
            projection: 1e-10,
            matching: 1e-8,
            tail: 1e-9,
            solvability: 1e-5,
        }
    }
}

/// Build the expansion to the model's configured order.
pub fn expand(model: &Model) -> Result<ExpansionResult> {
    expand_to(model, model.order, BuildTolerances::default())
}

/// Build the expansion to a given order.
pub fn expand_to(model: &Model, order: usize, tol: BuildTolerances) -> Result<ExpansionResult> {
    Builder::new(model, tol)?.run(order)
}

/// Layer forcing V w_{k-1}: node values and interval midpoints.
type Forcing = (Vec<StateField>, Vec<StateField>);

struct Builder<'a> {
    model: &'a Model,
    tol: BuildTolerances,
    grid: SpatialGrid,
    tgrid: TimeGrid,
    layer: LayerGrid,
    n_states: usize,
    /// vhat at the grid nodes.
    vhat_nodes: Vec<f64>,
    /// Exact one-step and half-step propagators e^{Q dtau}, e^{Q dtau/2}.
    p_step: DMatrix<f64>,
    p_half: DMatrix<f64>,
}

impl<'a> Builder<'a> {
    fn new(model: &'a Model, tol: BuildTolerances) -> Result<Builder<'a>> {
        let gap = model.chain.gap.gamma;
        let layer = LayerGrid {
            tau_max: model.tau_max(),
            n_tau: model.n_tau,
        };
        // The layer grid must reach far enough that the exp0 envelope is
        // below reporting precision.
        let envelope = (-gap * layer.tau_max).exp();
        if envelope > 1e-10 {
            return Err(Error::TailTruncationTooCoarse {
                estimate: envelope,
                limit: 1e-10,
            });
        }
        let dtau = layer.dtau();
        Ok(Builder {
            model,
            tol,
            grid: model.grid,
            tgrid: model.time,
            layer,
            n_states: model.n_states(),
            vhat_nodes: (0..model.grid.n_points)
                .map(|i| model.vhat.eval(model.grid.node(i)))
                .collect(),
            p_step: model.chain.generator.transition(dtau)?,
            p_half: model.chain.generator.transition(0.5 * dtau)?,
        })
    }

    fn run(&self, order: usize) -> Result<ExpansionResult> {
        let u0 = self.leading_term()?;
        let mut lu_prev = self.apply_l_leading(&u0);
        let mut regular = vec![u0];
        let mut corrections = Vec::new();
        let mut singular: Vec<LayerSeries> = Vec::new();
        let mut laplace = Vec::new();
        let mut matching = Vec::new();
        let mut layer_decay = Vec::new();
        let mut range_residual = Vec::new();

        for k in 1..=order {
            let r0lu: Vec<StateField> = lu_prev
                .iter()
                .map(|f| f.apply_state_matrix(self.model.chain.potential.matrix()))
                .collect();

            // Source of the c-equation: S_k = Pi V R0 L u_{k-1}.
            let source: Vec<GridFunction> = r0lu
                .iter()
                .map(|f| {
                    self.model
                        .velocity
                        .apply(f)
                        .pi_average(&self.model.chain.pi)
                })
                .collect();

            // Initial data: c_1(0) = 0; for k >= 2 the integral of V w_{k-1}
            // supplies both c_k(0) and the Pi-part of w_k(0), so the order-k
            // initial matching cancels by construction.
            let (c_k0, vw_data) = if k == 1 {
                (GridFunction::zeros(self.grid), None)
            } else {
                let w_prev = &singular[k - 2];
                let vw: Vec<StateField> = w_prev
                    .fields
                    .iter()
                    .map(|f| self.model.velocity.apply(f))
                    .collect();
                let vw_mid = tau_midpoints(&vw);
                let total = self.layer_integral(&vw, &vw_mid)?;
                let c_k0 = total.pi_average(&self.model.chain.pi);
                (c_k0, Some((vw, vw_mid)))
            };

            let c_series = self.solve_c(&source, &c_k0)?;

            // u_k = R0 L u_{k-1} + c_k.
            let u_k: Vec<StateField> = r0lu
                .iter()
                .zip(&c_series)
                .map(|(f, c)| f.add(&StateField::from_scalar(c, self.n_states)))
                .collect();

            // Range residual: Q u_k - (I - Pi) L u_{k-1}, exact up to rounding.
            range_residual.push(self.range_residual(&u_k, &lu_prev));

            // w_k(0): range part -R0 L u_{k-1}(0), Pi part -c_k(0).
            let w_k0_range = r0lu[0].scale(-1.0);
            if k == 1 {
                let proj_norm =
                    crate::function_space::project(&self.model.chain.projector, &w_k0_range)
                        .sup_norm();
                if proj_norm > self.tol.projection {
                    return Err(Error::ProjectionViolation { norm: proj_norm });
                }
            }
            let w_k0 = w_k0_range.sub(&StateField::from_scalar(&c_k0, self.n_states));

            let w_series = self.singular_term(w_k0, vw_data.as_ref())?;

            // Initial matching u_k(0) + w_k(0) = 0.
            let defect = u_k[0].add(&w_series.fields[0]).sup_norm();
            if defect > self.tol.matching {
                return Err(Error::ConsistencyViolation {
                    order: k,
                    defect,
                    tol: self.tol.matching,
                });
            }
            matching.push(defect);
            layer_decay.push(w_series.fields[self.layer.n_tau].sup_norm());
            laplace.push(self.laplace_diagnostics(&w_series)?);

            let u_k = FieldSeries {
                time: self.tgrid,
                fields: u_k,
            };
            lu_prev = self.apply_l(&u_k)?;
            regular.push(u_k);
            corrections.push(ScalarSeries {
                time: self.tgrid,
                values: c_series,
            });
            singular.push(w_series);
        }

        // Solvability residual per order, from the already-updated L u_k.
        let mut solvability = Vec::new();
        for (k, series) in regular.iter().enumerate().skip(1) {
            let lu_k = if k == order {
                lu_prev.clone()
            } else {
                self.apply_l(series)?
            };
            let mut worst = 0.0_f64;
            for f in &lu_k {
                worst = worst
                    .max(crate::function_space::project(&self.model.chain.projector, f).sup_norm());
            }
            if worst > self.tol.solvability {
                return Err(Error::SolvabilityViolation {
                    order: k,
                    residual: worst,
                    tol: self.tol.solvability,
                });
            }
            solvability.push(worst);
        }

        Ok(ExpansionResult {
            order,
            regular,
            corrections,
            singular,
            layer: self.layer,
            solvability,
            range_residual,
            matching,
            layer_decay,
            laplace,
        })
    }

    /// u0(u, t) = phi(flow of vhat from u over t), the characteristic
    /// solution of the averaged transport equation.
    fn leading_term(&self) -> Result<FieldSeries> {
        let n = self.grid.n_points;
        let dt = self.tgrid.dt();
        let mut pos: Vec<f64> = (0..n).map(|i| self.grid.node(i)).collect();
        let mut fields = Vec::with_capacity(self.tgrid.n_nodes());
        let f = |u: f64| self.model.vhat.eval(u);
        for j in 0..self.tgrid.n_nodes() {
            if j > 0 {
                for p in pos.iter_mut() {
                    *p = ode::flow_autonomous(&f, *p, dt, 1e-10);
                }
                self.check_escape(&pos)?;
            }
            let mut values = DMatrix::zeros(self.n_states, n);
            for i in 0..n {
                // Periodic positions wrap inside phi_at; padded pad-zone
                // nodes may have drifted out and are clamped (sacrificial).
                let p = match self.grid.mode {
                    BoundaryMode::Periodic => pos[i],
                    BoundaryMode::Padded => pos[i].clamp(self.grid.u_min, self.grid.u_max),
                };
                let v = self.model.phi_at(p);
                for x in 0..self.n_states {
                    values[(x, i)] = v;
                }
            }
            fields.push(StateField::from_values(self.grid, values));
        }
        Ok(FieldSeries {
            time: self.tgrid,
            fields,
        })
    }

    /// Characteristics starting in the core must stay inside the padded
    /// domain; pad-zone nodes are sacrificial and merely get clamped.
    fn check_escape(&self, pos: &[f64]) -> Result<()> {
        if self.grid.mode != BoundaryMode::Padded {
            return Ok(());
        }
        let (core_lo, core_hi) = self.model.core;
        for (i, &p) in pos.iter().enumerate() {
            let start = self.grid.node(i);
            if (core_lo..=core_hi).contains(&start)
                && !(self.grid.u_min..=self.grid.u_max).contains(&p)
            {
                return Err(Error::DomainEscape {
                    position: p,
                    lo: self.grid.u_min,
                    hi: self.grid.u_max,
                });
            }
        }
        Ok(())
    }

    /// L u0 = d/dt u0 - V u0 with the time derivative taken exactly as
    /// vhat d/du u0 from the averaged equation.
    fn apply_l_leading(&self, u0: &FieldSeries) -> Vec<StateField> {
        u0.fields
            .iter()
            .map(|f| {
                let du = f.derivative_u();
                let mut dt_part = du.clone();
                for x in 0..self.n_states {
                    for i in 0..self.grid.n_points {
                        dt_part.values[(x, i)] *= self.vhat_nodes[i];
                    }
                }
                dt_part.sub(&self.model.velocity.apply(f))
            })
            .collect()
    }

    /// L u = d/dt u - V u with a 4th-order finite-difference time derivative.
    fn apply_l(&self, u: &FieldSeries) -> Result<Vec<StateField>> {
        let ddt = time_derivative(&u.fields, self.tgrid.dt(), 1)?;
        Ok(ddt
            .iter()
            .zip(&u.fields)
            .map(|(d, f)| d.sub(&self.model.velocity.apply(f)))
            .collect())
    }

    fn range_residual(&self, u_k: &[StateField], lu_prev: &[StateField]) -> f64 {
        let q = self.model.chain.generator.matrix();
        let pi = self.model.chain.projector.matrix();
        let eye = DMatrix::<f64>::identity(self.n_states, self.n_states);
        let centered = &eye - pi;
        let mut worst = 0.0_f64;
        for (u, lu) in u_k.iter().zip(lu_prev) {
            let r = u
                .apply_state_matrix(q)
                .sub(&lu.apply_state_matrix(&centered));
            worst = worst.max(r.sup_norm());
        }
        worst
    }

    /// Solve (d/dt - vhat d/du) c = S along characteristics dU/dt = -vhat(U),
    /// dC/dt = S(U, t), then interpolate the moving samples back onto the
    /// fixed grid at every output time.
    fn solve_c(&self, source: &[GridFunction], c0: &GridFunction) -> Result<Vec<GridFunction>> {
        let n = self.grid.n_points;
        let dt = self.tgrid.dt();
        let f = |u: f64| -self.model.vhat.eval(u);
        let mut pos: Vec<f64> = (0..n).map(|i| self.grid.node(i)).collect();
        let mut c: Vec<f64> = (0..n).map(|i| c0.values[i]).collect();
        let mut out = Vec::with_capacity(self.tgrid.n_nodes());
        out.push(c0.clone());
        for j in 0..self.tgrid.n_steps {
            let t0 = self.tgrid.time(j);
            let mut next_pos = Vec::with_capacity(n);
            let mut next_c = Vec::with_capacity(n);
            for i in 0..n {
                let mid = ode::flow_autonomous(&f, pos[i], 0.5 * dt, 1e-10);
                let end = ode::flow_autonomous(&f, mid, 0.5 * dt, 1e-10);
                let s0 = self.source_at(source, pos[i], t0);
                let sm = self.source_at(source, mid, t0 + 0.5 * dt);
                let s1 = self.source_at(source, end, t0 + dt);
                let dc = dt / 6.0 * (s0 + 4.0 * sm + s1);
                if !dc.is_finite() {
                    return Err(Error::NonFiniteSource { u: pos[i], t: t0 });
                }
                next_pos.push(end);
                next_c.push(c[i] + dc);
            }
            self.check_escape(&next_pos)?;
            pos = next_pos;
            c = next_c;
            // Reconstruct on the fixed grid. When vhat = 0 the samples sit
            // exactly on the nodes and this is exact.
            let mut values = nalgebra::DVector::zeros(n);
            for i in 0..n {
                values[i] =
                    interp::nonuniform_interp(&pos, &c, self.grid.node(i), self.grid.period());
            }
            out.push(GridFunction::from_values(self.grid, values));
        }
        Ok(out)
    }

    /// S(u, t): cubic in space on the stored grid, cubic in time between the
    /// stored nodes.
    fn source_at(&self, source: &[GridFunction], u: f64, t: f64) -> f64 {
        let s = t / self.tgrid.dt();
        let st = interp::clamped_stencil(s, source.len());
        let mut acc = 0.0;
        for k in 0..4 {
            acc += st.w[k] * source[st.idx[k]].interp(u);
        }
        acc
    }

    /// Advance dw/dtau = Q w + g(tau), g = V w_{k-1}, with the exact coupling
    /// propagator and per-interval Simpson on the forcing:
    ///
    ///   w[m+1] = P w[m] + dtau/6 (P g[m] + 4 P_half g[m+1/2] + g[m+1]).
    fn singular_term(&self, w0: StateField, vw: Option<&Forcing>) -> Result<LayerSeries> {
        let dtau = self.layer.dtau();
        let mut fields = Vec::with_capacity(self.layer.n_nodes());
        fields.push(w0);
        for m in 0..self.layer.n_tau {
            let mut next = fields[m].apply_state_matrix(&self.p_step);
            if let Some((vw, vw_mid)) = vw {
                let forced = vw[m]
                    .apply_state_matrix(&self.p_step)
                    .add(&vw_mid[m].apply_state_matrix(&self.p_half).scale(4.0))
                    .add(&vw[m + 1]);
                next = next.add(&forced.scale(dtau / 6.0));
            }
            fields.push(next);
        }
        Ok(LayerSeries {
            layer: self.layer,
            fields,
        })
    }

    /// int_0^inf g(s) ds over the layer grid: per-interval Simpson plus an
    /// exponential tail at the spectral-gap rate.
    fn layer_integral(&self, g: &[StateField], g_mid: &[StateField]) -> Result<StateField> {
        let dtau = self.layer.dtau();
        let gap = self.model.chain.gap.gamma;
        let mut acc = StateField::zeros(self.grid, self.n_states);
        for (l, mid) in g_mid.iter().enumerate() {
            acc = acc.add(&g[l].scale(dtau / 6.0));
            acc = acc.add(&mid.scale(4.0 * dtau / 6.0));
            acc = acc.add(&g[l + 1].scale(dtau / 6.0));
        }
        let tail = g[self.layer.n_tau].scale(1.0 / gap);
        let estimate = tail.sup_norm();
        if estimate > self.tol.tail {
            return Err(Error::TailTruncationTooCoarse {
                estimate,
                limit: self.tol.tail,
            });
        }
        Ok(acc.add(&tail))
    }

    fn laplace_diagnostics(&self, w: &LayerSeries) -> Result<LayerLaplace> {
        let dtau = self.layer.dtau();
        let gap = self.model.chain.gap.gamma;
        let mids = tau_midpoints(&w.fields);
        let mut at_zero = StateField::zeros(self.grid, self.n_states);
        let mut deriv = StateField::zeros(self.grid, self.n_states);
        for (l, mid) in mids.iter().enumerate() {
            let t0 = self.layer.tau(l);
            let tm = t0 + 0.5 * dtau;
            let t1 = self.layer.tau(l + 1);
            at_zero = at_zero.add(&w.fields[l].scale(dtau / 6.0));
            at_zero = at_zero.add(&mid.scale(4.0 * dtau / 6.0));
            at_zero = at_zero.add(&w.fields[l + 1].scale(dtau / 6.0));
            deriv = deriv.add(&w.fields[l].scale(t0 * dtau / 6.0));
            deriv = deriv.add(&mid.scale(4.0 * tm * dtau / 6.0));
            deriv = deriv.add(&w.fields[l + 1].scale(t1 * dtau / 6.0));
        }
        let w_end = &w.fields[self.layer.n_tau];
        let tail_estimate = w_end.sup_norm() / gap;
        if tail_estimate > self.tol.tail {
            return Err(Error::TailTruncationTooCoarse {
                estimate: tail_estimate,
                limit: self.tol.tail,
            });
        }
        at_zero = at_zero.add(&w_end.scale(1.0 / gap));
        deriv = deriv.add(&w_end.scale((self.layer.tau_max + 1.0 / gap) / gap));
        Ok(LayerLaplace {
            at_zero,
            deriv_at_zero: deriv.scale(-1.0),
            tail_estimate,
        })
    }
}

/// Quintic midpoint interpolation of a field series along its sampling axis.
fn tau_midpoints(fields: &[StateField]) -> Vec<StateField> {
    let n = fields.len();
    debug_assert!(n >= 6);
    let mut out = Vec::with_capacity(n - 1);
    for j in 0..n - 1 {
        let base = (j as isize - 2).clamp(0, n as isize - 6) as usize;
        let x = j as f64 + 0.5;
        let xs = [
            base as f64,
            base as f64 + 1.0,
            base as f64 + 2.0,
            base as f64 + 3.0,
            base as f64 + 4.0,
            base as f64 + 5.0,
        ];
        let w = interp::lagrange_weights(&xs, x);
        let mut values = &fields[base].values * w[0];
        for k in 1..6 {
            values += &fields[base + k].values * w[k];
        }
        out.push(StateField {
            grid: fields[0].grid,
            values,
        });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::function_space::project;
    use crate::model::Model;

    fn model_from(text: &str) -> Model {
        Model::from_config(&ModelConfig::from_json(text).unwrap()).unwrap()
    }

    /// Symmetric two-state switch: Q = [[-1,1],[1,-1]], v = (+1,-1),
    /// phi = sin on [0, 2pi). All terms have closed forms; s_x below is +1
    /// for state 0 and -1 for state 1.
    fn telegraph(n_points: usize, n_steps: usize) -> Model {
        model_from(&format!(
            r#"{{
            "states": ["right", "left"],
            "Q": [[-1.0, 1.0], [1.0, -1.0]],
            "velocity": ["1", "-1"],
            "phi": "sin(u)",
            "grid": {{"n_points": {n_points}}},
            "time": {{"t_end": 0.5, "n_steps": {n_steps}}}
        }}"#
        ))
    }

    fn asymmetric() -> Model {
        model_from(
            r#"{
            "states": ["right", "left"],
            "Q": [[-2.0, 2.0], [3.0, -3.0]],
            "velocity": ["1", "-1"],
            "phi": "sin(u)",
            "grid": {"n_points": 256},
            "time": {"t_end": 0.5, "n_steps": 200}
        }"#,
        )
    }

    fn sup_err(field: &StateField, f: impl Fn(usize, f64) -> f64) -> f64 {
        let mut worst = 0.0_f64;
        for x in 0..field.n_states() {
            for i in 0..field.grid.n_points {
                let u = field.grid.node(i);
                worst = worst.max((field.values[(x, i)] - f(x, u)).abs());
            }
        }
        worst
    }

    fn sign(x: usize) -> f64 {
        if x == 0 {
            1.0
        } else {
            -1.0
        }
    }

    #[test]
    fn telegraph_closed_forms_through_order_three() {
        let model = telegraph(256, 200);
        let result = expand_to(&model, 3, BuildTolerances::default()).unwrap();
        let t_idx = 120; // t = 0.3
        let t = model.time.time(t_idx);

        // u0 = sin u for all t (vhat = 0).
        let e = sup_err(&result.regular[0].fields[t_idx], |_, u| u.sin());
        assert!(e < 1e-12, "u0 error {e}");

        // c1 = t phi''/2 = -t sin/2.
        let c1 = &result.corrections[0].values[t_idx];
        let mut worst = 0.0_f64;
        for i in 0..256 {
            let u = model.grid.node(i);
            worst = worst.max((c1.values[i] + 0.5 * t * u.sin()).abs());
        }
        assert!(worst < 1e-6, "c1 error {worst}");

        // u1 = t phi''/2 + s_x phi'/2.
        let e = sup_err(&result.regular[1].fields[t_idx], |x, u| {
            -0.5 * t * u.sin() + 0.5 * sign(x) * u.cos()
        });
        assert!(e < 1e-6, "u1 error {e}");

        // w1(tau) = -s_x e^{-2 tau} phi'/2.
        let m = 40;
        let tau = result.layer.tau(m);
        let e = sup_err(&result.singular[0].fields[m], |x, u| {
            -0.5 * sign(x) * (-2.0 * tau).exp() * u.cos()
        });
        assert!(e < 1e-8, "w1 error {e}");

        // c2 = sin/4 + t^2 sin/8 (phi'' = -sin, phi'''' = sin).
        let c2 = &result.corrections[1].values[t_idx];
        let mut worst = 0.0_f64;
        for i in 0..256 {
            let u = model.grid.node(i);
            worst = worst.max((c2.values[i] - (0.25 * u.sin() + t * t / 8.0 * u.sin())).abs());
        }
        assert!(worst < 1e-6, "c2 error {worst}");

        // u2 = c2 - s_x t cos/4.
        let e = sup_err(&result.regular[2].fields[t_idx], |x, u| {
            0.25 * u.sin() + t * t / 8.0 * u.sin() - 0.25 * sign(x) * t * u.cos()
        });
        assert!(e < 1e-6, "u2 error {e}");

        // w2(tau) = -e^{-2 tau} sin/4, constant across states.
        let e = sup_err(&result.singular[1].fields[m], |_, u| {
            -0.25 * (-2.0 * tau).exp() * u.sin()
        });
        assert!(e < 1e-7, "w2 error {e}");

        // c3 = -t sin/4 - t^3 sin/48.
        let c3 = &result.corrections[2].values[t_idx];
        let mut worst = 0.0_f64;
        for i in 0..256 {
            let u = model.grid.node(i);
            let expect = -(t / 4.0 + t * t * t / 48.0) * u.sin();
            worst = worst.max((c3.values[i] - expect).abs());
        }
        assert!(worst < 1e-5, "c3 error {worst}");

        // u3 = s_x cos (1/4 + t^2/16) + c3.
        let e = sup_err(&result.regular[3].fields[t_idx], |x, u| {
            sign(x) * u.cos() * (0.25 + t * t / 16.0) - (t / 4.0 + t * t * t / 48.0) * u.sin()
        });
        assert!(e < 1e-5, "u3 error {e}");

        // w3(tau) = -(1 + tau) e^{-2 tau} s_x cos/4.
        let e = sup_err(&result.singular[2].fields[m], |x, u| {
            -(1.0 + tau) * (-2.0 * tau).exp() * sign(x) * u.cos() / 4.0
        });
        assert!(e < 1e-7, "w3 error {e}");
    }

    #[test]
    fn telegraph_diagnostics_are_small() {
        let model = telegraph(256, 200);
        let result = expand_to(&model, 3, BuildTolerances::default()).unwrap();
        for k in 0..3 {
            assert!(
                result.matching[k] <= 1e-8,
                "matching[{k}] = {}",
                result.matching[k]
            );
            assert!(
                result.range_residual[k] <= 1e-8,
                "range[{k}] = {}",
                result.range_residual[k]
            );
            assert!(
                result.layer_decay[k] <= 1e-7,
                "decay[{k}] = {}",
                result.layer_decay[k]
            );
            assert!(
                result.solvability[k] <= 1e-5,
                "solv[{k}] = {}",
                result.solvability[k]
            );
        }
        // u0 stays in the null space of Q: no spread across states.
        for f in &result.regular[0].fields {
            assert!(f.state_spread() <= 1e-10);
        }
        // Pi w1(0) = 0.
        let pw = project(&model.chain.projector, &result.singular[0].fields[0]);
        assert!(pw.sup_norm() <= 1e-10);
    }

    #[test]
    fn leading_term_satisfies_averaged_equation() {
        // Drifting model: vhat = 0.2, so u0(u, t) = sin(u + 0.2 t).
        let model = asymmetric();
        let result = expand_to(&model, 0, BuildTolerances::default()).unwrap();
        let t_idx = 150;
        let t = model.time.time(t_idx);
        let e = sup_err(&result.regular[0].fields[t_idx], |_, u| (u + 0.2 * t).sin());
        assert!(e < 1e-9, "u0 drift error {e}");
        // Residual d/dt u0 - vhat d/du u0 by finite differences in t.
        let ddt = time_derivative(&result.regular[0].fields, model.time.dt(), 1).unwrap();
        let mut worst = 0.0_f64;
        for (j, d) in ddt.iter().enumerate() {
            let du = result.regular[0].fields[j].derivative_u();
            for i in 0..model.grid.n_points {
                let r = d.values[(0, i)] - 0.2 * du.values[(0, i)];
                worst = worst.max(r.abs());
            }
        }
        assert!(worst < 1e-6, "transport residual {worst}");
    }

    #[test]
    fn asymmetric_initial_matching_and_decay() {
        let model = asymmetric();
        let result = expand_to(&model, 3, BuildTolerances::default()).unwrap();
        for k in 0..3 {
            assert!(result.matching[k] <= 1e-8);
            assert!(result.layer_decay[k] <= 1e-7);
            assert!(
                result.solvability[k] <= 1e-5,
                "solv[{k}] = {}",
                result.solvability[k]
            );
        }
        // Pi-projected w1(0) vanishes even with asymmetric weights.
        let pw = project(&model.chain.projector, &result.singular[0].fields[0]);
        assert!(pw.sup_norm() <= 1e-10);
    }

    #[test]
    fn evaluate_at_zero_recovers_phi() {
        for model in [telegraph(256, 200), asymmetric()] {
            let result = expand_to(&model, 3, BuildTolerances::default()).unwrap();
            for order in 0..=3 {
                let phi = result.evaluate(order, 0.08, 0.0, true).unwrap();
                let e = sup_err(&phi, |_, u| u.sin());
                assert!(e <= 1e-7, "order {order}: {e}");
            }
        }
    }

    #[test]
    fn evaluate_telegraph_closed_form_sum() {
        let model = telegraph(256, 200);
        let result = expand_to(&model, 1, BuildTolerances::default()).unwrap();
        let eps = 0.1;
        let t = 0.5;
        let tau = t / eps;
        let phi = result.evaluate(1, eps, t, true).unwrap();
        let e = sup_err(&phi, |x, u| {
            u.sin()
                + eps
                    * (-0.5 * t * u.sin() + 0.5 * sign(x) * u.cos()
                        - 0.5 * sign(x) * (-2.0 * tau).exp() * u.cos())
        });
        assert!(e < 1e-6, "{e}");
    }

    #[test]
    fn evaluate_rejects_unavailable_order_and_bad_time() {
        let model = telegraph(64, 40);
        let result = expand_to(&model, 1, BuildTolerances::default()).unwrap();
        assert!(matches!(
            result.evaluate(2, 0.1, 0.1, true),
            Err(Error::OrderUnavailable { .. })
        ));
        assert!(matches!(
            result.evaluate(1, 0.1, 0.7, true),
            Err(Error::GridMismatch(_))
        ));
    }

    #[test]
    fn zero_velocity_model_is_static() {
        let model = model_from(
            r#"{
            "states": ["a", "b"],
            "Q": [[-1.0, 1.0], [1.0, -1.0]],
            "velocity": ["0", "0"],
            "phi": "sin(u)",
            "grid": {"n_points": 64},
            "time": {"t_end": 0.5, "n_steps": 50}
        }"#,
        );
        let result = expand_to(&model, 3, BuildTolerances::default()).unwrap();
        for k in 1..=3 {
            for f in &result.regular[k].fields {
                assert!(f.sup_norm() < 1e-12);
            }
            for f in &result.singular[k - 1].fields {
                assert!(f.sup_norm() < 1e-12);
            }
        }
    }

    #[test]
    fn layer_terms_stay_inside_gap_envelope() {
        // |w_k(tau)| <= C e^{-gamma tau / 2} with a moderate constant; for
        // the telegraph forms the sharpest C is about 1.4 |w_k(0)|.
        let model = telegraph(128, 100);
        let result = expand_to(&model, 3, BuildTolerances::default()).unwrap();
        let gamma = model.chain.gap.gamma;
        for (ki, w) in result.singular.iter().enumerate() {
            let scale = w.fields[0].sup_norm() + 1e-12;
            let mut envelope_c = 0.0_f64;
            for (m, f) in w.fields.iter().enumerate() {
                let tau = result.layer.tau(m);
                envelope_c = envelope_c.max(f.sup_norm() / (-gamma * tau / 2.0).exp());
            }
            assert!(
                envelope_c <= 5.0 * scale,
                "k={}: envelope constant {envelope_c} vs scale {scale}",
                ki + 1
            );
        }
    }

    #[test]
    fn too_short_layer_grid_is_rejected() {
        // tau_max_factor = 5 leaves the exp0 envelope at e^{-5}, far above
        // reporting precision.
        let model = model_from(
            r#"{
            "states": ["right", "left"],
            "Q": [[-1.0, 1.0], [1.0, -1.0]],
            "velocity": ["1", "-1"],
            "phi": "sin(u)",
            "grid": {"n_points": 64},
            "layer": {"n_tau": 64, "tau_max_factor": 5.0}
        }"#,
        );
        assert!(matches!(
            expand_to(&model, 1, BuildTolerances::default()),
            Err(Error::TailTruncationTooCoarse { .. })
        ));
    }

    #[test]
    fn laplace_first_layer_closed_forms() {
        let model = telegraph(128, 100);
        let result = expand_to(&model, 1, BuildTolerances::default()).unwrap();
        // wtilde1(0) = w1(0)/2 since int e^{-2s} ds = 1/2.
        let expect = result.singular[0].fields[0].scale(0.5);
        let diff = result.laplace[0].at_zero.sub(&expect).sup_norm();
        assert!(diff < 1e-8, "{diff}");
        // wtilde1(2) = w1(0)/4.
        let w2 = result
            .laplace_singular(1, 2.0, model.chain.gap.gamma)
            .unwrap();
        let diff = w2.sub(&result.singular[0].fields[0].scale(0.25)).sup_norm();
        assert!(diff < 1e-8, "{diff}");
        // Derivative at zero: -int s e^{-2s} ds w1(0) = -w1(0)/4.
        let expect = result.singular[0].fields[0].scale(-0.25);
        let diff = result.laplace[0].deriv_at_zero.sub(&expect).sup_norm();
        assert!(diff < 1e-8, "{diff}");
    }

    #[test]
    fn laplace_matches_resolvent_route() {
        // Quadrature of e^{-lambda s} w1(s) against laplace_exp0(lambda) w1(0).
        let model = telegraph(128, 100);
        let result = expand_to(&model, 1, BuildTolerances::default()).unwrap();
        for lambda in [0.5, 1.0, 2.0] {
            let quad = result
                .laplace_singular(1, lambda, model.chain.gap.gamma)
                .unwrap();
            let closed = result.singular[0].fields[0]
                .apply_state_matrix(&model.chain.laplace_exp0(lambda).unwrap());
            let rel = quad.sub(&closed).sup_norm() / closed.sup_norm();
            assert!(rel <= 1e-6, "lambda {lambda}: rel {rel}");
        }
    }

    #[test]
    fn refinement_stability() {
        // Halving dt, h and dtau moves every stored term by less than 1e-5.
        let coarse_model = telegraph(128, 100);
        let coarse = expand_to(&coarse_model, 2, BuildTolerances::default()).unwrap();
        let fine_model = model_from(
            r#"{
            "states": ["right", "left"],
            "Q": [[-1.0, 1.0], [1.0, -1.0]],
            "velocity": ["1", "-1"],
            "phi": "sin(u)",
            "grid": {"n_points": 256},
            "time": {"t_end": 0.5, "n_steps": 200},
            "layer": {"n_tau": 1200}
        }"#,
        );
        let fine = expand_to(&fine_model, 2, BuildTolerances::default()).unwrap();
        for k in 0..=2 {
            let c = &coarse.regular[k].fields[100];
            let f = &fine.regular[k].fields[200];
            let mut worst = 0.0_f64;
            for x in 0..2 {
                for i in 0..128 {
                    worst = worst.max((c.values[(x, i)] - f.values[(x, 2 * i)]).abs());
                }
            }
            assert!(worst < 1e-5, "order {k}: {worst}");
        }
    }
}
