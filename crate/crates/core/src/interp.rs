//! Local Lagrange interpolation helpers.
//!
//! Uniform-grid cubic (4-point) interpolation is used for semi-Lagrangian
//! transport and for evaluating stored series between nodes; quintic (6-point)
//! midpoint interpolation feeds the Simpson quadratures on the fast-time grid,
//! where cubic midpoints would dominate the quadrature error.

/// Cubic Lagrange weights at fractional offset `a` in [0, 1] for the stencil
/// {-1, 0, 1, 2} around the base node.
#[inline]
pub fn cubic_weights(a: f64) -> [f64; 4] {
    [
        -a * (a - 1.0) * (a - 2.0) / 6.0,
        (a * a - 1.0) * (a - 2.0) / 2.0,
        -a * (a + 1.0) * (a - 2.0) / 2.0,
        a * (a * a - 1.0) / 6.0,
    ]
}

/// Interpolation stencil on a uniform grid: four node indices and weights.
#[derive(Debug, Clone, Copy)]
pub struct Stencil4 {
    pub idx: [usize; 4],
    pub w: [f64; 4],
}

impl Stencil4 {
    #[inline]
    pub fn apply(&self, values: &[f64]) -> f64 {
        self.w[0] * values[self.idx[0]]
            + self.w[1] * values[self.idx[1]]
            + self.w[2] * values[self.idx[2]]
            + self.w[3] * values[self.idx[3]]
    }
}

/// Cubic stencil for position `s` in index space on a periodic grid of `n`
/// nodes (node i at index i, period n).
pub fn periodic_stencil(s: f64, n: usize) -> Stencil4 {
    let nf = n as f64;
    let s = s - nf * (s / nf).floor();
    let base = s.floor() as isize;
    let a = s - base as f64;
    let w = cubic_weights(a);
    let wrap = |k: isize| -> usize {
        let m = (base + k).rem_euclid(n as isize);
        m as usize
    };
    Stencil4 {
        idx: [wrap(-1), wrap(0), wrap(1), wrap(2)],
        w,
    }
}

/// Cubic stencil for position `s` in index space on a bounded grid of `n`
/// nodes; the stencil is shifted one-sided near the edges and the query is
/// clamped to the grid.
pub fn clamped_stencil(s: f64, n: usize) -> Stencil4 {
    let s = s.clamp(0.0, (n - 1) as f64);
    let mut base = s.floor() as isize - 1;
    base = base.clamp(0, n as isize - 4);
    let xs = [
        base as f64,
        base as f64 + 1.0,
        base as f64 + 2.0,
        base as f64 + 3.0,
    ];
    let w = lagrange_weights(&xs, s);
    Stencil4 {
        idx: [
            base as usize,
            base as usize + 1,
            base as usize + 2,
            base as usize + 3,
        ],
        w: [w[0], w[1], w[2], w[3]],
    }
}

/// Generic Lagrange weights for nodes `xs` at query `x`.
pub fn lagrange_weights<const K: usize>(xs: &[f64; K], x: f64) -> [f64; K] {
    let mut w = [0.0; K];
    for i in 0..K {
        let mut p = 1.0;
        for j in 0..K {
            if i != j {
                p *= (x - xs[j]) / (xs[i] - xs[j]);
            }
        }
        w[i] = p;
    }
    w
}

/// Interpolate a scattered monotone sample set `(xs, ys)` at `x` with a local
/// 4-point Lagrange rule. `period` wraps both the query and the stencil for
/// periodic data (`ys` is then assumed periodic as well); without a period the
/// query is clamped to the sampled range.
pub fn nonuniform_interp(xs: &[f64], ys: &[f64], x: f64, period: Option<f64>) -> f64 {
    let n = xs.len();
    debug_assert!(n >= 4 && ys.len() == n);
    let (x, offset_ok) = match period {
        Some(p) => {
            let shifted = x - p * ((x - xs[0]) / p).floor();
            (shifted, true)
        }
        None => (x.clamp(xs[0], xs[n - 1]), false),
    };
    // Find the bracketing interval by binary search.
    let mut lo = 0usize;
    let mut hi = n - 1;
    if offset_ok {
        // x in [xs[0], xs[0] + p); the last interval wraps around.
        if x >= xs[n - 1] {
            lo = n - 1;
        } else {
            while hi - lo > 1 {
                let mid = (lo + hi) / 2;
                if xs[mid] <= x {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
        }
        let p = period.unwrap();
        let mut sx = [0.0; 4];
        let mut sy = [0.0; 4];
        for (k, off) in (-1i64..=2).enumerate() {
            let raw = lo as i64 + off;
            let idx = raw.rem_euclid(n as i64) as usize;
            let shift = ((raw - idx as i64) / n as i64) as f64 * p;
            sx[k] = xs[idx] + shift;
            sy[k] = ys[idx];
        }
        let w = lagrange_weights(&sx, x);
        (0..4).map(|k| w[k] * sy[k]).sum()
    } else {
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if xs[mid] <= x {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let base = (lo as isize - 1).clamp(0, n as isize - 4) as usize;
        let sx = [xs[base], xs[base + 1], xs[base + 2], xs[base + 3]];
        let w = lagrange_weights(&sx, x);
        (0..4).map(|k| w[k] * ys[base + k]).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cubic_reproduces_cubics() {
        let f = |x: f64| 1.0 + 2.0 * x - 0.5 * x * x + 0.25 * x * x * x;
        let values: Vec<f64> = (0..12).map(|i| f(i as f64)).collect();
        for s in [1.3, 4.75, 9.01] {
            let st = clamped_stencil(s, values.len());
            assert!((st.apply(&values) - f(s)).abs() < 1e-12);
        }
    }

    #[test]
    fn periodic_stencil_wraps() {
        let n = 8usize;
        let f = |i: f64| (2.0 * std::f64::consts::PI * i / n as f64).cos();
        let values: Vec<f64> = (0..n).map(|i| f(i as f64)).collect();
        let st = periodic_stencil(-0.5, n);
        let direct = f(-0.5);
        assert!((st.apply(&values) - direct).abs() < 2e-2); // cubic on coarse grid
        let st2 = periodic_stencil(n as f64 - 0.5, n);
        assert!((st.apply(&values) - st2.apply(&values)).abs() < 1e-15);
    }

    #[test]
    fn nonuniform_matches_smooth_function() {
        let xs: Vec<f64> = (0..20)
            .map(|i| 0.1 * i as f64 + 0.01 * (i as f64).sin())
            .collect();
        let ys: Vec<f64> = xs.iter().map(|&x| x.sin()).collect();
        for q in [0.15, 0.5, 1.23, 1.85] {
            let v = nonuniform_interp(&xs, &ys, q, None);
            assert!((v - q.sin()).abs() < 1e-5);
        }
    }
}
