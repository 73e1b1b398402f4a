//! Scalar ODE integrators: adaptive Dormand-Prince 5(4) for characteristic
//! flows and a classical fixed-step RK4 used by the path simulator.

/// Dormand-Prince 5(4) coefficients.
const A: [[f64; 6]; 6] = [
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [
        19372.0 / 6561.0,
        -25360.0 / 2187.0,
        64448.0 / 6561.0,
        -212.0 / 729.0,
        0.0,
        0.0,
    ],
    [
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
        0.0,
    ],
    [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
];
const B5: [f64; 7] = [
    35.0 / 384.0,
    0.0,
    500.0 / 1113.0,
    125.0 / 192.0,
    -2187.0 / 6784.0,
    11.0 / 84.0,
    0.0,
];
const B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

/// Integrate the autonomous scalar equation du/dt = f(u) from `u0` over a
/// time span `t >= 0` with adaptive Dormand-Prince 5(4) steps at local
/// tolerance `tol`.
pub fn flow_autonomous(f: &dyn Fn(f64) -> f64, u0: f64, t: f64, tol: f64) -> f64 {
    debug_assert!(t >= 0.0);
    if t == 0.0 {
        return u0;
    }
    let mut u = u0;
    let mut remaining = t;
    let mut h = t.min(0.1_f64.min(t));
    let mut k = [0.0_f64; 7];
    k[0] = f(u);
    let mut fsal_valid = true;
    while remaining > 0.0 {
        if h > remaining {
            h = remaining;
            fsal_valid = false; // step size changed discontinuously
        }
        if !fsal_valid {
            k[0] = f(u);
            fsal_valid = true;
        }
        for s in 1..=6 {
            let mut acc = 0.0;
            for (j, a) in A[s - 1].iter().enumerate().take(s) {
                acc += a * k[j];
            }
            k[s] = f(u + h * acc);
        }
        let mut u5 = u;
        let mut u4 = u;
        for j in 0..7 {
            u5 += h * B5[j] * k[j];
            u4 += h * B4[j] * k[j];
        }
        let scale = tol * (1.0 + u.abs());
        let err = (u5 - u4).abs() / scale;
        if err <= 1.0 {
            u = u5;
            remaining -= h;
            k[0] = k[6]; // FSAL
        } else {
            fsal_valid = false;
        }
        let factor = if err > 0.0 {
            (0.9 * err.powf(-0.2)).clamp(0.2, 5.0)
        } else {
            5.0
        };
        h *= factor;
        if h < 1e-14 * t {
            // Give up on shrinking further; take the step as-is.
            h = 1e-14 * t;
        }
    }
    u
}

/// One classical RK4 step for du/dt = f(u).
#[inline]
pub fn rk4_step(f: &impl Fn(f64) -> f64, u: f64, h: f64) -> f64 {
    let k1 = f(u);
    let k2 = f(u + 0.5 * h * k1);
    let k3 = f(u + 0.5 * h * k2);
    let k4 = f(u + h * k3);
    u + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
}
