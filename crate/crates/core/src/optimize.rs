//! Limited-memory BFGS minimizer with a backtracking Armijo line search.
//!
//! Used by the sense classifier and the Hawkes likelihood fit. The objective
//! writes its gradient into the provided buffer and returns the value; a
//! non-finite value is treated as outside the domain and the step shrinks.

use std::collections::VecDeque;

/// Steps over which relative improvement is measured.
pub const STALL_WINDOW: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Lbfgs {
    /// Number of correction pairs kept.
    pub memory: usize,
    pub max_iter: usize,
    /// Stop when the Euclidean gradient norm falls to this value.
    pub grad_tol: f64,
    /// Stop when the objective improved by less than this fraction of its
    /// magnitude over the last `STALL_WINDOW` steps. Zero disables the test.
    pub rel_tol: f64,
    pub max_backtracks: usize,
}

impl Default for Lbfgs {
    fn default() -> Self {
        Lbfgs {
            memory: 10,
            max_iter: 1000,
            grad_tol: 1e-6,
            rel_tol: 0.0,
            max_backtracks: 60,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    /// The gradient norm reached `grad_tol`.
    pub converged: bool,
    /// Stopped because the objective stopped improving.
    pub stalled: bool,
    /// Objective value after each accepted step, starting with the initial point.
    pub trace: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

impl Lbfgs {
    pub fn minimize<F>(&self, mut objective: F, x0: Vec<f64>) -> Minimum
    where
        F: FnMut(&[f64], &mut [f64]) -> f64,
    {
        let n = x0.len();
        let mut x = x0;
        let mut g = vec![0.0; n];
        let mut f = objective(&x, &mut g);
        let mut trace = vec![f];
        let mut hist: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(self.memory);
        let mut iterations = 0;
        let mut converged = norm(&g) <= self.grad_tol;
        let mut stalled = false;

        let mut x_new = vec![0.0; n];
        let mut g_new = vec![0.0; n];
        while !converged && !stalled && iterations < self.max_iter && f.is_finite() {
            let mut dir = self.direction(&g, &hist);
            let mut slope = dot(&g, &dir);
            if !(slope < 0.0) {
                hist.clear();
                dir = g.iter().map(|v| -v).collect();
                slope = -dot(&g, &g);
            }
            let mut step = if hist.is_empty() {
                (1.0 / norm(&g)).min(1.0)
            } else {
                1.0
            };

            let mut accepted = None;
            for attempt in 0..2 {
                for _ in 0..self.max_backtracks {
                    for i in 0..n {
                        x_new[i] = x[i] + step * dir[i];
                    }
                    let f_try = objective(&x_new, &mut g_new);
                    if f_try.is_finite() && f_try <= f + 1e-4 * step * slope {
                        accepted = Some(f_try);
                        break;
                    }
                    step *= 0.5;
                }
                if accepted.is_some() || attempt == 1 || hist.is_empty() {
                    break;
                }
                // Quasi-Newton direction failed; retry once along steepest descent.
                hist.clear();
                dir = g.iter().map(|v| -v).collect();
                slope = -dot(&g, &g);
                step = (1.0 / norm(&g)).min(1.0);
            }
            let Some(f_next) = accepted else {
                break;
            };

            let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
            let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
            let sy = dot(&s, &y);
            if sy > 1e-12 * norm(&s) * norm(&y) && sy > 0.0 {
                if hist.len() == self.memory {
                    hist.pop_front();
                }
                hist.push_back((s, y, 1.0 / sy));
            }

            std::mem::swap(&mut x, &mut x_new);
            std::mem::swap(&mut g, &mut g_new);
            f = f_next;
            trace.push(f);
            iterations += 1;

            converged = norm(&g) <= self.grad_tol;
            if self.rel_tol > 0.0 && trace.len() > STALL_WINDOW {
                let old = trace[trace.len() - 1 - STALL_WINDOW];
                stalled = (old - f) / old.abs().max(1.0) < self.rel_tol;
            }
        }

        Minimum {
            grad_norm: norm(&g),
            x,
            value: f,
            iterations,
            converged,
            stalled,
            trace,
        }
    }

    /// Two-loop recursion for `-H g`.
    fn direction(&self, g: &[f64], hist: &VecDeque<(Vec<f64>, Vec<f64>, f64)>) -> Vec<f64> {
        let mut q: Vec<f64> = g.to_vec();
        let mut alphas = Vec::with_capacity(hist.len());
        for (s, y, rho) in hist.iter().rev() {
            let a = rho * dot(s, &q);
            for (qi, yi) in q.iter_mut().zip(y) {
                *qi -= a * yi;
            }
            alphas.push(a);
        }
        if let Some((s, y, _)) = hist.back() {
            let gamma = dot(s, y) / dot(y, y);
            for qi in &mut q {
                *qi *= gamma;
            }
        }
        for ((s, y, rho), a) in hist.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &q);
            for (qi, si) in q.iter_mut().zip(s) {
                *qi += (a - b) * si;
            }
        }
        q.iter_mut().for_each(|v| *v = -*v);
        q
    }
}
