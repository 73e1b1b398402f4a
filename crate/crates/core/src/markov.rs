//! Linear algebra of the switching chain: generator validation, stationary
//! distribution, ergodic projector, potential matrix, matrix exponentials and
//! the centered semigroup exp0.
//!
//! Conventions. For a conservative irreducible generator Q on n states:
//!
//! * pi solves pi Q = 0 with positive entries summing to one,
//! * Pi = 1 pi' (every row equals pi) projects onto the null space of Q,
//! * R0 = Pi - (Pi - Q)^-1 satisfies Q R0 = R0 Q = I - Pi and Pi R0 = R0 Pi = 0,
//!   equivalently R0 = -int_0^inf (e^{Qt} - Pi) dt,
//! * exp0(Q t) = e^{Qt} - Pi decays like e^{-gamma t} with gamma the spectral gap.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Support threshold: an off-diagonal rate above this counts as an edge for
/// the irreducibility check.
const EDGE_THRESHOLD: f64 = 1e-14;

/// Row sums larger than this reject the input matrix.
const ROW_SUM_TOLERANCE: f64 = 1e-9;

/// A validated conservative generator matrix of an irreducible chain.
///
/// After validation the diagonal is recomputed from the off-diagonal rates so
/// that every row sums to zero exactly (the input is only required to sum to
/// zero within 1e-9).
#[derive(Debug, Clone)]
pub struct GeneratorMatrix {
    q: DMatrix<f64>,
}

impl GeneratorMatrix {
    /// Validate a raw square matrix as a generator.
    pub fn new(raw: DMatrix<f64>) -> Result<Self> {
        let n = raw.nrows();
        if raw.ncols() != n || n < 2 {
            return Err(Error::ConfigValidation {
                field: "Q".to_string(),
                message: format!(
                    "expected a square matrix with n >= 2, got {}x{}",
                    n,
                    raw.ncols()
                ),
            });
        }
        for i in 0..n {
            let mut sum = 0.0;
            for j in 0..n {
                let v = raw[(i, j)];
                if !v.is_finite() {
                    return Err(Error::ConfigValidation {
                        field: format!("Q[{i}]"),
                        message: "non-finite entry".to_string(),
                    });
                }
                if i != j && v < 0.0 {
                    return Err(Error::NegativeRate {
                        row: i,
                        col: j,
                        value: v,
                    });
                }
                sum += v;
            }
            if sum.abs() > ROW_SUM_TOLERANCE {
                return Err(Error::RowSumViolation { row: i, sum });
            }
        }
        // Re-anchor the diagonal so rows sum to zero exactly.
        let mut q = raw;
        for i in 0..n {
            let off: f64 = (0..n).filter(|&j| j != i).map(|j| q[(i, j)]).sum();
            q[(i, i)] = -off;
        }
        check_irreducible(&q)?;
        Ok(GeneratorMatrix { q })
    }

    pub fn n(&self) -> usize {
        self.q.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.q
    }

    /// Stationary distribution: the unique positive solution of pi Q = 0,
    /// sum(pi) = 1.
    pub fn stationary(&self) -> Result<StationaryDistribution> {
        let n = self.n();
        // Solve Q' pi = 0 with the last equation replaced by sum(pi) = 1.
        let mut a = self.q.transpose();
        for j in 0..n {
            a[(n - 1, j)] = 1.0;
        }
        let mut b = DVector::zeros(n);
        b[n - 1] = 1.0;
        let pi = a.lu().solve(&b).ok_or(Error::SingularSystem {
            context: "stationary distribution",
        })?;
        if pi.iter().any(|&p| !(p > 0.0)) {
            return Err(Error::SingularSystem {
                context: "stationary distribution (nonpositive entry)",
            });
        }
        Ok(StationaryDistribution { pi })
    }

    /// Transition matrix P(t) = e^{Qt}.
    pub fn transition(&self, t: f64) -> Result<DMatrix<f64>> {
        if t < 0.0 {
            return Err(Error::NegativeTime(t));
        }
        Ok((&self.q * t).exp())
    }

    /// Spectral gap: smallest |Re lambda| over the nonzero eigenvalues of Q.
    pub fn spectral_gap(&self) -> SpectralGap {
        let scale = self.q.amax().max(1.0);
        let eig = self.q.complex_eigenvalues();
        let gamma = eig
            .iter()
            .filter(|l| l.norm() > 1e-9 * scale)
            .map(|l| l.re.abs())
            .fold(f64::INFINITY, f64::min);
        SpectralGap { gamma }
    }
}

fn check_irreducible(q: &DMatrix<f64>) -> Result<()> {
    let n = q.nrows();
    // Strong connectivity of the off-diagonal support: every state reachable
    // from state 0 and state 0 reachable from every state.
    let forward = reachable(q, false);
    let backward = reachable(q, true);
    for s in 0..n {
        if !forward[s] || !backward[s] {
            return Err(Error::Reducible { state: s });
        }
    }
    Ok(())
}

fn reachable(q: &DMatrix<f64>, transpose: bool) -> Vec<bool> {
    let n = q.nrows();
    let mut seen = vec![false; n];
    let mut stack = vec![0usize];
    seen[0] = true;
    while let Some(i) = stack.pop() {
        for j in 0..n {
            let rate = if transpose { q[(j, i)] } else { q[(i, j)] };
            if i != j && rate > EDGE_THRESHOLD && !seen[j] {
                seen[j] = true;
                stack.push(j);
            }
        }
    }
    seen
}

/// Stationary distribution of the switching chain.
#[derive(Debug, Clone)]
pub struct StationaryDistribution {
    pi: DVector<f64>,
}

impl StationaryDistribution {
    pub fn as_vector(&self) -> &DVector<f64> {
        &self.pi
    }

    pub fn weight(&self, state: usize) -> f64 {
        self.pi[state]
    }

    pub fn n(&self) -> usize {
        self.pi.len()
    }
}

/// Rank-one ergodic projector Pi = 1 pi'; every row equals pi.
#[derive(Debug, Clone)]
pub struct ErgodicProjector {
    m: DMatrix<f64>,
}

impl ErgodicProjector {
    pub fn new(pi: &StationaryDistribution) -> ErgodicProjector {
        let n = pi.n();
        let m = DMatrix::from_fn(n, n, |_, j| pi.weight(j));
        ErgodicProjector { m }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.m
    }
}

/// Potential matrix R0 = Pi - (Pi - Q)^-1, the negated deviation matrix.
#[derive(Debug, Clone)]
pub struct PotentialMatrix {
    r0: DMatrix<f64>,
}

impl PotentialMatrix {
    pub fn new(gen: &GeneratorMatrix, proj: &ErgodicProjector) -> Result<PotentialMatrix> {
        let a = proj.matrix() - gen.matrix();
        let inv = a.try_inverse().ok_or(Error::SingularSystem {
            context: "potential matrix",
        })?;
        Ok(PotentialMatrix {
            r0: proj.matrix() - inv,
        })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.r0
    }
}

/// Spectral gap of the generator; controls boundary-layer decay and the
/// truncation of the fast-time grid.
#[derive(Debug, Clone, Copy)]
pub struct SpectralGap {
    pub gamma: f64,
}

/// Generator together with its derived objects, computed once.
#[derive(Debug, Clone)]
pub struct Chain {
    pub generator: GeneratorMatrix,
    pub pi: StationaryDistribution,
    pub projector: ErgodicProjector,
    pub potential: PotentialMatrix,
    pub gap: SpectralGap,
}

impl Chain {
    pub fn new(generator: GeneratorMatrix) -> Result<Chain> {
        let pi = generator.stationary()?;
        let projector = ErgodicProjector::new(&pi);
        let potential = PotentialMatrix::new(&generator, &projector)?;
        let gap = generator.spectral_gap();
        Ok(Chain {
            generator,
            pi,
            projector,
            potential,
            gap,
        })
    }

    pub fn n(&self) -> usize {
        self.generator.n()
    }

    /// Centered semigroup exp0(Q tau) = e^{Q tau} - Pi.
    pub fn exp0(&self, tau: f64) -> Result<DMatrix<f64>> {
        Ok(self.generator.transition(tau)? - self.projector.matrix())
    }

    /// Laplace transform of the centered semigroup,
    /// int_0^inf e^{-lambda s} exp0(Qs) ds = (lambda I - Q)^-1 - Pi / lambda.
    ///
    /// The limit lambda -> 0+ is -R0.
    pub fn laplace_exp0(&self, lambda: f64) -> Result<DMatrix<f64>> {
        if lambda <= 0.0 {
            return Err(Error::NonPositiveLambda(lambda));
        }
        let n = self.n();
        let a = DMatrix::identity(n, n) * lambda - self.generator.matrix();
        let inv = a.try_inverse().ok_or(Error::SingularSystem {
            context: "resolvent",
        })?;
        Ok(inv - self.projector.matrix() / lambda)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn mat(rows: &[&[f64]]) -> DMatrix<f64> {
        let n = rows.len();
        DMatrix::from_fn(n, rows[0].len(), |i, j| rows[i][j])
    }

    fn symmetric_two_state() -> GeneratorMatrix {
        GeneratorMatrix::new(mat(&[&[-1.0, 1.0], &[1.0, -1.0]])).unwrap()
    }

    fn chain(gen: GeneratorMatrix) -> Chain {
        Chain::new(gen).unwrap()
    }

    #[test]
    fn validates_symmetric_two_state() {
        let g = symmetric_two_state();
        assert_eq!(g.n(), 2);
    }

    #[test]
    fn rejects_broken_row_sum() {
        let err = GeneratorMatrix::new(mat(&[&[-1.0, 0.5], &[1.0, -1.0]])).unwrap_err();
        assert!(
            matches!(err, Error::RowSumViolation { row: 0, .. }),
            "{err}"
        );
    }

    #[test]
    fn rejects_negative_rate() {
        let err = GeneratorMatrix::new(mat(&[&[1.0, -1.0], &[1.0, -1.0]])).unwrap_err();
        assert!(
            matches!(err, Error::NegativeRate { row: 0, col: 1, .. }),
            "{err}"
        );
    }

    #[test]
    fn accepts_cyclic_three_state() {
        let g = GeneratorMatrix::new(mat(&[
            &[-1.0, 1.0, 0.0],
            &[0.0, -1.0, 1.0],
            &[1.0, 0.0, -1.0],
        ]))
        .unwrap();
        assert_eq!(g.n(), 3);
    }

    #[test]
    fn rejects_reducible() {
        // State 2 is absorbing: nothing leaves it.
        let err = GeneratorMatrix::new(mat(&[
            &[-1.0, 1.0, 0.0],
            &[1.0, -2.0, 1.0],
            &[0.0, 0.0, 0.0],
        ]))
        .unwrap_err();
        assert!(matches!(err, Error::Reducible { .. }), "{err}");
    }

    #[test]
    fn rejects_one_state() {
        assert!(GeneratorMatrix::new(mat(&[&[0.0]])).is_err());
    }

    #[test]
    fn stationary_symmetric() {
        let pi = symmetric_two_state().stationary().unwrap();
        assert_abs_diff_eq!(pi.weight(0), 0.5, epsilon = 1e-14);
        assert_abs_diff_eq!(pi.weight(1), 0.5, epsilon = 1e-14);
    }

    #[test]
    fn stationary_asymmetric() {
        // pi solves pi Q = 0: pi = (b, a)/(a+b) for rates a=2, b=3.
        let g = GeneratorMatrix::new(mat(&[&[-2.0, 2.0], &[3.0, -3.0]])).unwrap();
        let pi = g.stationary().unwrap();
        assert_abs_diff_eq!(pi.weight(0), 0.6, epsilon = 1e-13);
        assert_abs_diff_eq!(pi.weight(1), 0.4, epsilon = 1e-13);
    }

    #[test]
    fn stationary_cyclic_uniform() {
        let g = GeneratorMatrix::new(mat(&[
            &[-1.0, 1.0, 0.0],
            &[0.0, -1.0, 1.0],
            &[1.0, 0.0, -1.0],
        ]))
        .unwrap();
        let pi = g.stationary().unwrap();
        for s in 0..3 {
            assert_abs_diff_eq!(pi.weight(s), 1.0 / 3.0, epsilon = 1e-13);
        }
        // pi Q = 0
        let residual = (pi.as_vector().transpose() * g.matrix()).amax();
        assert!(residual <= 1e-12);
    }

    #[test]
    fn projector_rows_equal_pi() {
        let g = GeneratorMatrix::new(mat(&[&[-2.0, 2.0], &[3.0, -3.0]])).unwrap();
        let pi = g.stationary().unwrap();
        let proj = ErgodicProjector::new(&pi);
        let expected = mat(&[&[0.6, 0.4], &[0.6, 0.4]]);
        assert!((proj.matrix() - expected).amax() < 1e-13);
        // Pi is stochastic: Pi 1 = 1.
        let ones = DVector::from_element(2, 1.0);
        assert!((proj.matrix() * &ones - ones).amax() < 1e-14);
        // Pi^2 = Pi
        assert!((proj.matrix() * proj.matrix() - proj.matrix()).amax() < 1e-14);
    }

    #[test]
    fn potential_symmetric_closed_form() {
        let c = chain(symmetric_two_state());
        let expected = mat(&[&[-0.25, 0.25], &[0.25, -0.25]]);
        assert!((c.potential.matrix() - expected).amax() < 1e-13);
    }

    #[test]
    fn potential_identities() {
        for rows in [
            vec![vec![-1.0, 1.0], vec![1.0, -1.0]],
            vec![vec![-2.0, 2.0], vec![3.0, -3.0]],
        ] {
            let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
            let c = chain(GeneratorMatrix::new(mat(&refs)).unwrap());
            let n = c.n();
            let eye = DMatrix::<f64>::identity(n, n);
            let q = c.generator.matrix();
            let r0 = c.potential.matrix();
            let pi = c.projector.matrix();
            assert!((q * r0 - (&eye - pi)).amax() < 1e-10);
            assert!((r0 * q - (&eye - pi)).amax() < 1e-10);
            assert!((pi * r0).amax() < 1e-10);
            assert!((r0 * pi).amax() < 1e-10);
        }
    }

    #[test]
    fn transition_two_state_closed_form() {
        // p11(t) = (1 + e^{-2t})/2 for the symmetric generator.
        let g = symmetric_two_state();
        let p = g.transition(0.5).unwrap();
        let expected = 0.5 + 0.5 * (-1.0f64).exp();
        assert_abs_diff_eq!(p[(0, 0)], expected, epsilon = 1e-12);
        assert_abs_diff_eq!(p[(0, 0)], 0.6839397, epsilon = 1e-7);
    }

    #[test]
    fn transition_identity_at_zero_and_rejects_negative() {
        let g = symmetric_two_state();
        assert!((g.transition(0.0).unwrap() - DMatrix::<f64>::identity(2, 2)).amax() < 1e-15);
        assert!(matches!(g.transition(-1.0), Err(Error::NegativeTime(_))));
    }

    #[test]
    fn transition_converges_to_projector() {
        let c = chain(GeneratorMatrix::new(mat(&[&[-2.0, 2.0], &[3.0, -3.0]])).unwrap());
        let t = 25.0 / c.gap.gamma;
        let p = c.generator.transition(t).unwrap();
        assert!((p - c.projector.matrix()).amax() <= 1e-8);
    }

    #[test]
    fn spectral_gap_two_state() {
        let g = symmetric_two_state();
        assert_abs_diff_eq!(g.spectral_gap().gamma, 2.0, epsilon = 1e-10);
        let g = GeneratorMatrix::new(mat(&[&[-2.0, 2.0], &[3.0, -3.0]])).unwrap();
        assert_abs_diff_eq!(g.spectral_gap().gamma, 5.0, epsilon = 1e-10);
    }

    #[test]
    fn exp0_two_state_closed_form() {
        let c = chain(symmetric_two_state());
        let eye = DMatrix::<f64>::identity(2, 2);
        let centered = &eye - c.projector.matrix();
        for tau in [0.0_f64, 0.3, 1.7] {
            let expected = &centered * (-2.0 * tau).exp();
            assert!((c.exp0(tau).unwrap() - expected).amax() < 1e-12);
        }
        // Decay at the truncation point of the fast-time grid.
        let tau_max = 30.0 / c.gap.gamma;
        assert!(c.exp0(tau_max).unwrap().amax() <= 1e-10);
    }

    #[test]
    fn laplace_exp0_closed_form_and_limit() {
        let c = chain(symmetric_two_state());
        let eye = DMatrix::<f64>::identity(2, 2);
        let centered = &eye - c.projector.matrix();
        // (I - Pi)/(lambda + 2) at lambda = 2.
        assert!((c.laplace_exp0(2.0).unwrap() - &centered / 4.0).amax() < 1e-12);
        // lambda -> 0+ approaches -R0 = [[0.25, -0.25], [-0.25, 0.25]]. The
        // resolvent is ill-conditioned near 0, so allow ~1e-4 of cancellation
        // noise on top of the O(lambda R0^2) truncation.
        let near_zero = c.laplace_exp0(1e-6).unwrap();
        assert!((near_zero + c.potential.matrix()).amax() < 1e-4);
        assert!(matches!(
            c.laplace_exp0(0.0),
            Err(Error::NonPositiveLambda(_))
        ));
    }

    #[test]
    fn laplace_exp0_matches_quadrature() {
        // Simpson quadrature of e^{-s} exp0(Qs) over [0, 30/gamma].
        let c = chain(GeneratorMatrix::new(mat(&[&[-2.0, 2.0], &[3.0, -3.0]])).unwrap());
        let lambda = 1.0;
        let t_max = 30.0 / c.gap.gamma;
        let n = 2000usize; // even
        let h = t_max / n as f64;
        let mut acc = DMatrix::<f64>::zeros(2, 2);
        for i in 0..=n {
            let s = i as f64 * h;
            let w = if i == 0 || i == n {
                1.0
            } else if i % 2 == 1 {
                4.0
            } else {
                2.0
            };
            acc += c.exp0(s).unwrap() * ((-lambda * s).exp() * w);
        }
        acc *= h / 3.0;
        let closed = c.laplace_exp0(lambda).unwrap();
        let rel = (&closed - &acc).amax() / closed.amax();
        assert!(rel <= 1e-8, "relative error {rel}");
    }

    #[test]
    fn potential_matches_exp0_quadrature() {
        // Trapezoid quadrature of -int_0^{30/gamma} exp0(Qt) dt vs R0.
        let c = chain(GeneratorMatrix::new(mat(&[&[-2.0, 2.0], &[3.0, -3.0]])).unwrap());
        let t_max = 30.0 / c.gap.gamma;
        let n = 20_000usize;
        let h = t_max / n as f64;
        let mut acc = DMatrix::<f64>::zeros(2, 2);
        for i in 0..=n {
            let w = if i == 0 || i == n { 0.5 } else { 1.0 };
            acc += c.exp0(i as f64 * h).unwrap() * w;
        }
        acc *= -h;
        assert!((acc - c.potential.matrix()).amax() <= 1e-6);
    }
}
