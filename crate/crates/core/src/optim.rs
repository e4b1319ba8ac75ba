//! Small dense optimizers: BFGS with finite-difference gradients and an
//! augmented-Lagrangian wrapper for inequality constraints `c_i(x) ≥ 0`.

use alloc::vec::Vec;
use nalgebra::{DMatrix, DVector};
#[allow(unused_imports)]
use num_traits::Float;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BfgsOptions {
    pub max_iterations: usize,
    /// Stop when the infinity norm of the gradient falls below this.
    pub gradient_tolerance: f64,
    /// Relative change of the objective treated as stagnation.
    pub value_tolerance: f64,
    /// Central-difference step.
    pub fd_step: f64,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            gradient_tolerance: 1e-9,
            value_tolerance: 1e-14,
            fd_step: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Minimum {
    pub x: DVector<f64>,
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Central-difference gradient of `f` at `x`.
pub fn numerical_gradient<F: Fn(&DVector<f64>) -> f64>(f: &F, x: &DVector<f64>, h: f64) -> DVector<f64> {
    let mut g = DVector::zeros(x.len());
    let mut xp = x.clone();
    for k in 0..x.len() {
        let x0 = xp[k];
        xp[k] = x0 + h;
        let fp = f(&xp);
        xp[k] = x0 - h;
        let fm = f(&xp);
        xp[k] = x0;
        g[k] = (fp - fm) / (2.0 * h);
    }
    g
}

/// Unconstrained minimization with BFGS and Armijo backtracking.
pub fn bfgs<F: Fn(&DVector<f64>) -> f64>(f: F, x0: DVector<f64>, opts: &BfgsOptions) -> Minimum {
    let n = x0.len();
    let mut x = x0;
    let mut fx = f(&x);
    let mut g = numerical_gradient(&f, &x, opts.fd_step);
    let mut h = DMatrix::<f64>::identity(n, n);
    let mut stall = 0;
    for it in 0..opts.max_iterations {
        if !fx.is_finite() {
            break;
        }
        if g.amax() <= opts.gradient_tolerance {
            return Minimum { x, value: fx, iterations: it, converged: true };
        }
        let mut d = -(&h * &g);
        let mut slope = g.dot(&d);
        if slope >= 0.0 {
            h = DMatrix::identity(n, n);
            d = -g.clone();
            slope = -g.norm_squared();
        }
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let xt = &x + &d * t;
            let ft = f(&xt);
            if ft.is_finite() && ft <= fx + 1e-4 * t * slope {
                accepted = Some((xt, ft));
                break;
            }
            t *= 0.5;
        }
        let Some((xn, fn_)) = accepted else {
            return Minimum { x, value: fx, iterations: it, converged: true };
        };
        let gn = numerical_gradient(&f, &xn, opts.fd_step);
        let s = &xn - &x;
        let y = &gn - &g;
        let sy = s.dot(&y);
        if sy > 1e-16 * s.norm() * y.norm() && sy > 0.0 {
            let rho = 1.0 / sy;
            let hy = &h * &y;
            let yhy = y.dot(&hy);
            // H' = H − ρ(Hy sᵀ + s yᵀH) + (ρ² yᵀHy + ρ) s sᵀ
            h -= (&hy * s.transpose() + &s * hy.transpose()) * rho;
            h += (&s * s.transpose()) * (rho * rho * yhy + rho);
        }
        let change = fx - fn_;
        x = xn;
        g = gn;
        fx = fn_;
        if change <= opts.value_tolerance * fx.abs().max(1e-300) {
            stall += 1;
            if stall >= 3 {
                return Minimum { x, value: fx, iterations: it + 1, converged: true };
            }
        } else {
            stall = 0;
        }
    }
    Minimum { x, value: fx, iterations: opts.max_iterations, converged: false }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugLagOptions {
    pub outer_iterations: usize,
    pub initial_penalty: f64,
    pub penalty_growth: f64,
    pub max_penalty: f64,
    /// Largest acceptable violation `max(0, −c_i)`.
    pub feasibility_tolerance: f64,
    pub inner: BfgsOptions,
}

impl Default for AugLagOptions {
    fn default() -> Self {
        Self {
            outer_iterations: 30,
            initial_penalty: 10.0,
            penalty_growth: 10.0,
            max_penalty: 1e8,
            feasibility_tolerance: 1e-8,
            inner: BfgsOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConstrainedMinimum {
    pub x: DVector<f64>,
    pub value: f64,
    pub constraints: Vec<f64>,
    pub multipliers: Vec<f64>,
    pub outer_iterations: usize,
    pub max_violation: f64,
}

fn violation(c: &[f64]) -> f64 {
    c.iter().fold(0.0, |m: f64, &ci| m.max(-ci))
}

/// Minimizes `f` subject to `c(x)_i ≥ 0` using the Rockafellar augmented
/// Lagrangian `f + (1/2ρ) Σ (max(0, λ_i − ρ c_i)² − λ_i²)`.
pub fn augmented_lagrangian<F, C>(f: F, c: C, x0: DVector<f64>, opts: &AugLagOptions) -> ConstrainedMinimum
where
    F: Fn(&DVector<f64>) -> f64,
    C: Fn(&DVector<f64>) -> Vec<f64>,
{
    let m = c(&x0).len();
    let mut lambda = alloc::vec![0.0; m];
    let mut rho = opts.initial_penalty;
    let mut x = x0;
    let mut last_violation = violation(&c(&x));
    let mut outer = 0;
    while outer < opts.outer_iterations {
        outer += 1;
        let lag = |z: &DVector<f64>| {
            let cz = c(z);
            let mut pen = 0.0;
            for (ci, li) in cz.iter().zip(&lambda) {
                let t = (li - rho * ci).max(0.0);
                pen += t * t - li * li;
            }
            f(z) + pen / (2.0 * rho)
        };
        let inner = bfgs(lag, x.clone(), &opts.inner);
        x = inner.x;
        let cx = c(&x);
        for (li, ci) in lambda.iter_mut().zip(&cx) {
            *li = (*li - rho * ci).max(0.0);
        }
        let v = violation(&cx);
        let complementarity = cx.iter().zip(&lambda).fold(0.0, |a: f64, (ci, li)| a.max((ci * li).abs()));
        if v <= opts.feasibility_tolerance && complementarity <= opts.feasibility_tolerance {
            break;
        }
        if v > 0.25 * last_violation && v > opts.feasibility_tolerance {
            rho = (rho * opts.penalty_growth).min(opts.max_penalty);
        }
        last_violation = v;
    }
    let constraints = c(&x);
    ConstrainedMinimum {
        value: f(&x),
        max_violation: violation(&constraints),
        x,
        constraints,
        multipliers: lambda,
        outer_iterations: outer,
    }
}
