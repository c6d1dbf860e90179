//! Limited-memory BFGS ascent with a strong-Wolfe line search.

use std::collections::VecDeque;

#[derive(Debug, Clone, Copy)]
pub struct LbfgsOptions {
    pub memory: usize,
    pub max_iter: usize,
    /// Stop when `|∇f| ≤ grad_tol · (1 + |f|)`.
    pub grad_tol: f64,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        LbfgsOptions {
            memory: 10,
            max_iter: 10_000,
            grad_tol: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    Converged,
    MaxIterations,
    LineSearchFailed,
    NonFiniteStart,
}

#[derive(Debug, Clone)]
pub struct LbfgsOutcome {
    pub x: Vec<f64>,
    /// Objective value at `x` (the maximized quantity).
    pub value: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub termination: Termination,
}

impl LbfgsOutcome {
    pub fn converged(&self) -> bool {
        self.termination == Termination::Converged
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Negated objective so the internals minimize.
struct Neg<F> {
    f: F,
    evals: usize,
}

impl<F: FnMut(&[f64], &mut [f64]) -> f64> Neg<F> {
    fn eval(&mut self, x: &[f64], g: &mut [f64]) -> f64 {
        self.evals += 1;
        let v = -(self.f)(x, g);
        g.iter_mut().for_each(|gi| *gi = -*gi);
        if v.is_finite() && g.iter().all(|gi| gi.is_finite()) {
            v
        } else {
            f64::INFINITY
        }
    }
}

/// Maximizes `f`, which returns its value and writes the gradient.
pub fn maximize<F>(f: F, x0: &[f64], opts: &LbfgsOptions) -> LbfgsOutcome
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    let n = x0.len();
    let mut obj = Neg { f, evals: 0 };
    let mut x = x0.to_vec();
    let mut g = vec![0.0; n];
    let mut fx = obj.eval(&x, &mut g);
    let outcome = |x: Vec<f64>, fx: f64, g: &[f64], it: usize, t: Termination| LbfgsOutcome {
        x,
        value: -fx,
        grad_norm: norm(g),
        iterations: it,
        termination: t,
    };
    if !fx.is_finite() {
        return outcome(x, fx, &g, 0, Termination::NonFiniteStart);
    }

    let mut hist: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(opts.memory);
    let mut dir = vec![0.0; n];
    let mut x_new = vec![0.0; n];
    let mut g_new = vec![0.0; n];
    let mut alpha_buf = vec![0.0; opts.memory];

    for it in 0..opts.max_iter {
        if norm(&g) <= opts.grad_tol * (1.0 + fx.abs()) {
            return outcome(x, fx, &g, it, Termination::Converged);
        }

        // two-loop recursion
        dir.copy_from_slice(&g);
        for (m, (s, y, rho)) in hist.iter().enumerate().rev() {
            let a = rho * dot(s, &dir);
            alpha_buf[m] = a;
            dir.iter_mut().zip(y).for_each(|(d, yi)| *d -= a * yi);
        }
        let gamma = hist
            .back()
            .map(|(s, y, _)| dot(s, y) / dot(y, y))
            .unwrap_or_else(|| 1.0 / norm(&g).max(1.0));
        dir.iter_mut().for_each(|d| *d *= gamma);
        for (m, (s, y, rho)) in hist.iter().enumerate() {
            let b = rho * dot(y, &dir);
            let a = alpha_buf[m];
            dir.iter_mut().zip(s).for_each(|(d, si)| *d += (a - b) * si);
        }
        dir.iter_mut().for_each(|d| *d = -*d);

        let mut slope = dot(&g, &dir);
        if !(slope < 0.0) {
            // lost descent: restart from steepest descent
            hist.clear();
            dir.iter_mut().zip(&g).for_each(|(d, gi)| *d = -gi / norm(&g).max(1.0));
            slope = dot(&g, &dir);
        }

        match wolfe_search(&mut obj, &x, fx, &g, &dir, slope, &mut x_new, &mut g_new) {
            Some(f_new) => {
                let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
                let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
                let sy = dot(&s, &y);
                if sy > 1e-12 * norm(&s) * norm(&y) {
                    if hist.len() == opts.memory {
                        hist.pop_front();
                    }
                    hist.push_back((s, y, 1.0 / sy));
                }
                x.copy_from_slice(&x_new);
                g.copy_from_slice(&g_new);
                fx = f_new;
            }
            None => {
                if !hist.is_empty() {
                    hist.clear();
                    continue;
                }
                let t = if norm(&g) <= opts.grad_tol * (1.0 + fx.abs()) {
                    Termination::Converged
                } else {
                    Termination::LineSearchFailed
                };
                return outcome(x, fx, &g, it, t);
            }
        }
    }
    let t = if norm(&g) <= opts.grad_tol * (1.0 + fx.abs()) {
        Termination::Converged
    } else {
        Termination::MaxIterations
    };
    outcome(x, fx, &g, opts.max_iter, t)
}

const C1: f64 = 1e-4;
const C2: f64 = 0.9;

/// Strong-Wolfe line search (bracketing then zoom). Returns the new value.
#[allow(clippy::too_many_arguments)]
fn wolfe_search<F: FnMut(&[f64], &mut [f64]) -> f64>(
    obj: &mut Neg<F>,
    x: &[f64],
    f0: f64,
    g0: &[f64],
    dir: &[f64],
    slope0: f64,
    x_new: &mut [f64],
    g_new: &mut [f64],
) -> Option<f64> {
    let _ = g0;
    let mut eval = |alpha: f64, xn: &mut [f64], gn: &mut [f64]| -> (f64, f64) {
        xn.iter_mut()
            .zip(x.iter().zip(dir))
            .for_each(|(xi, (x0, d))| *xi = x0 + alpha * d);
        let f = obj.eval(xn, gn);
        (f, dot(gn, dir))
    };

    let mut a_prev = 0.0;
    let mut f_prev = f0;
    let mut d_prev = slope0;
    let mut a = 1.0;
    for i in 0..60 {
        let (fa, da) = eval(a, x_new, g_new);
        if !fa.is_finite() {
            // shrink until finite
            a = 0.5 * (a_prev + a);
            if a - a_prev < 1e-16 {
                return None;
            }
            continue;
        }
        if fa > f0 + C1 * a * slope0 || (i > 0 && fa >= f_prev) {
            return zoom(&mut eval, f0, slope0, (a_prev, f_prev, d_prev), (a, fa, da), x_new, g_new);
        }
        if da.abs() <= -C2 * slope0 {
            return Some(fa);
        }
        if da >= 0.0 {
            return zoom(&mut eval, f0, slope0, (a, fa, da), (a_prev, f_prev, d_prev), x_new, g_new);
        }
        a_prev = a;
        f_prev = fa;
        d_prev = da;
        a *= 2.0;
    }
    None
}

fn cubic_min(a: (f64, f64, f64), b: (f64, f64, f64)) -> Option<f64> {
    let (x0, f0, d0) = a;
    let (x1, f1, d1) = b;
    let d1_ = d0 + d1 - 3.0 * (f0 - f1) / (x0 - x1);
    let disc = d1_ * d1_ - d0 * d1;
    if disc < 0.0 {
        return None;
    }
    let d2 = (x1 - x0).signum() * disc.sqrt();
    let x = x1 - (x1 - x0) * (d1 + d2 - d1_) / (d1 - d0 + 2.0 * d2);
    x.is_finite().then_some(x)
}

fn zoom<E: FnMut(f64, &mut [f64], &mut [f64]) -> (f64, f64)>(
    eval: &mut E,
    f0: f64,
    slope0: f64,
    mut lo: (f64, f64, f64),
    mut hi: (f64, f64, f64),
    x_new: &mut [f64],
    g_new: &mut [f64],
) -> Option<f64> {
    for _ in 0..60 {
        let (left, right) = if lo.0 < hi.0 { (lo.0, hi.0) } else { (hi.0, lo.0) };
        let width = right - left;
        if width <= 1e-16 * right.abs().max(1.0) {
            break;
        }
        let mut a = cubic_min(lo, hi).unwrap_or(0.5 * (left + right));
        if !(a > left + 0.1 * width && a < right - 0.1 * width) {
            a = 0.5 * (left + right);
        }
        let (fa, da) = eval(a, x_new, g_new);
        if !fa.is_finite() || fa > f0 + C1 * a * slope0 || fa >= lo.1 {
            hi = (a, fa, da);
        } else {
            if da.abs() <= -C2 * slope0 {
                return Some(fa);
            }
            if da * (hi.0 - lo.0) >= 0.0 {
                hi = lo;
            }
            lo = (a, fa, da);
        }
    }
    // accept the best sufficient-decrease point found
    if lo.0 > 0.0 && lo.1 < f0 {
        let (fa, _) = eval(lo.0, x_new, g_new);
        return Some(fa);
    }
    None
}
