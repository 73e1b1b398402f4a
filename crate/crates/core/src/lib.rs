//! Asymptotic expansions for transport equations driven by a fast Markov
//! switching process.
//!
//! The observable Phi(u, x, t) = E[phi(u(t)) | u(0)=u, state(0)=x] of a
//! randomly switched flow du/dt = v(u; x(t/eps)) solves a singularly
//! perturbed backward system. This crate computes its expansion
//!
//! ```text
//! Phi ~ u0(t) + sum_k eps^k [ uk(t) + wk(t/eps) ]
//! ```
//!
//! with slow regular terms `uk` and exponentially decaying boundary-layer
//! terms `wk`, and validates every object against two independent oracles:
//! a direct operator-splitting solver of the stiff backward system and a
//! Monte Carlo simulator of the switched flow.
//!
//! ```
//! use evomax::{config::ModelConfig, expansion, model::Model};
//!
//! let cfg = ModelConfig::from_json(
//!     r#"{
//!     "states": ["right", "left"],
//!     "Q": [[-1.0, 1.0], [1.0, -1.0]],
//!     "velocity": ["1", "-1"],
//!     "phi": "sin(u)",
//!     "grid": {"n_points": 64},
//!     "time": {"t_end": 0.5, "n_steps": 50},
//!     "layer": {"n_tau": 120}
//! }"#,
//! )
//! .unwrap();
//! let model = Model::from_config(&cfg).unwrap();
//! let result = expansion::expand(&model).unwrap();
//! let phi_2 = result.evaluate(2, 0.1, 0.5, true).unwrap();
//! assert_eq!(phi_2.n_states(), 2);
//! ```

// `!(x > 0.0)` guards are deliberate: unlike `x <= 0.0` they reject NaN too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod config;
pub mod error;
pub mod expansion;
pub mod expr;
pub mod function_space;
pub(crate) mod interp;
pub mod markov;
pub mod model;
pub(crate) mod ode;
pub mod oracle;
pub mod table;
pub mod validation;

pub use error::{Error, Result};
