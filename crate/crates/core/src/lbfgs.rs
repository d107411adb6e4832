//! Limited-memory BFGS with a strong-Wolfe line search.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LbfgsConfig {
    pub history: usize,
    pub max_iter: usize,
    /// Stop when the largest gradient component falls below this.
    pub grad_tol: f64,
    /// Stop when the largest accepted step component falls below this.
    pub step_tol: f64,
    /// Trial step length of every line search after the first.
    pub initial_step: f64,
    pub c1: f64,
    pub c2: f64,
    /// Objective evaluations allowed per line search.
    pub max_evals: usize,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        Self {
            history: 10,
            max_iter: 100,
            grad_tol: 1e-8,
            step_tol: 1e-10,
            initial_step: 1.0,
            c1: 1e-4,
            c2: 0.9,
            max_evals: 25,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    GradientTolerance,
    StepTolerance,
    MaxIterations,
    /// The line search found no acceptable point; the best point seen is returned.
    LineSearchFailed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IterationLog {
    pub iteration: usize,
    pub value: f64,
    pub grad_norm: f64,
    pub step: f64,
    pub evaluations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LbfgsReport {
    pub iterations: usize,
    pub evaluations: usize,
    pub initial_value: f64,
    pub final_value: f64,
    pub termination: Termination,
    /// Set when the run stopped on a failed line search and returned its best point.
    pub best_so_far: bool,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn finite(f: f64, g: &[f64]) -> bool {
    f.is_finite() && g.iter().all(|x| x.is_finite())
}

struct Point {
    alpha: f64,
    f: f64,
    d: f64,
    x: Vec<f64>,
    g: Vec<f64>,
}

/// Minimiser of the cubic through two points with known slopes, if it lies strictly inside.
fn cubic_min(a: &Point, b: &Point) -> Option<f64> {
    let d1 = a.d + b.d - 3.0 * (a.f - b.f) / (a.alpha - b.alpha);
    let disc = d1 * d1 - a.d * b.d;
    if disc < 0.0 || !disc.is_finite() {
        return None;
    }
    let d2 = disc.sqrt().copysign(b.alpha - a.alpha);
    let t = b.alpha - (b.alpha - a.alpha) * (b.d + d2 - d1) / (b.d - a.d + 2.0 * d2);
    t.is_finite().then_some(t)
}

enum Search {
    Found(Point),
    /// No Wolfe point; carries the lowest point below `f0`, if any.
    Failed(Option<Point>),
}

fn line_search<F>(f: &mut F, x: &[f64], p: &[f64], f0: f64, d0: f64, alpha0: f64, cfg: &LbfgsConfig, evals: &mut usize) -> Search
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let mut eval = |alpha: f64, evals: &mut usize| -> Point {
        let xa: Vec<f64> = x.iter().zip(p).map(|(xi, pi)| xi + alpha * pi).collect();
        let (fa, ga) = f(&xa);
        *evals += 1;
        let ok = finite(fa, &ga);
        Point {
            alpha,
            f: if ok { fa } else { f64::INFINITY },
            d: if ok { dot(&ga, p) } else { f64::NAN },
            x: xa,
            g: ga,
        }
    };
    let armijo = |pt: &Point| pt.f <= f0 + cfg.c1 * pt.alpha * d0;
    let curvature = |pt: &Point| pt.d.abs() <= -cfg.c2 * d0;
    let mut best: Option<Point> = None;
    let keep = |best: &mut Option<Point>, pt: &Point| {
        if pt.f < f0 && armijo(pt) && best.as_ref().is_none_or(|b| pt.f < b.f) {
            *best = Some(Point {
                alpha: pt.alpha,
                f: pt.f,
                d: pt.d,
                x: pt.x.clone(),
                g: pt.g.clone(),
            });
        }
    };

    let mut prev = Point {
        alpha: 0.0,
        f: f0,
        d: d0,
        x: x.to_vec(),
        g: Vec::new(),
    };
    let mut alpha = alpha0;
    let start = *evals;
    let (mut lo, mut hi);
    loop {
        let cur = eval(alpha, evals);
        keep(&mut best, &cur);
        if !cur.f.is_finite() || !armijo(&cur) || (prev.alpha > 0.0 && cur.f >= prev.f) {
            lo = prev;
            hi = cur;
            break;
        }
        if curvature(&cur) {
            return Search::Found(cur);
        }
        if cur.d >= 0.0 {
            lo = cur;
            hi = prev;
            break;
        }
        if *evals - start >= cfg.max_evals {
            return Search::Failed(best);
        }
        alpha = cur.alpha * 2.0;
        prev = cur;
    }

    // zoom: `lo` satisfies Armijo with the lowest value, `hi` brackets a minimiser
    while *evals - start < cfg.max_evals {
        let width = hi.alpha - lo.alpha;
        if width.abs() <= f64::EPSILON * lo.alpha.abs().max(1e-300) {
            break;
        }
        let safe = |t: f64| {
            let (a, b) = if lo.alpha < hi.alpha { (lo.alpha, hi.alpha) } else { (hi.alpha, lo.alpha) };
            let margin = 0.1 * (b - a);
            t > a + margin && t < b - margin
        };
        let trial = if hi.f.is_finite() {
            cubic_min(&lo, &hi).filter(|&t| safe(t))
        } else {
            None
        };
        let alpha = trial.unwrap_or(lo.alpha + 0.5 * width);
        let cur = eval(alpha, evals);
        keep(&mut best, &cur);
        if !cur.f.is_finite() || !armijo(&cur) || cur.f >= lo.f {
            hi = cur;
        } else {
            if curvature(&cur) {
                return Search::Found(cur);
            }
            if cur.d * (hi.alpha - lo.alpha) >= 0.0 {
                hi = lo;
            }
            lo = cur;
        }
    }
    Search::Failed(best)
}

/// Minimises `f` from `x0`. `f` returns the value and gradient.
///
/// `on_iter` is called after every accepted step.
pub fn lbfgs_minimize<F>(
    mut f: F,
    x0: &[f64],
    cfg: &LbfgsConfig,
    mut on_iter: impl FnMut(&IterationLog),
) -> (Vec<f64>, LbfgsReport)
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let mut x = x0.to_vec();
    let (mut fx, mut g) = f(&x);
    let mut evals = 1;
    let initial_value = fx;
    let mut report = LbfgsReport {
        iterations: 0,
        evaluations: 1,
        initial_value,
        final_value: fx,
        termination: Termination::MaxIterations,
        best_so_far: false,
    };
    if !finite(fx, &g) {
        report.termination = Termination::LineSearchFailed;
        report.best_so_far = true;
        return (x, report);
    }
    if x.is_empty() || inf_norm(&g) <= cfg.grad_tol {
        report.termination = Termination::GradientTolerance;
        return (x, report);
    }

    let mut mem: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(cfg.history);
    let mut iter = 0;
    while iter < cfg.max_iter {
        // two-loop recursion
        let mut q: Vec<f64> = g.clone();
        let mut alphas = Vec::with_capacity(mem.len());
        for (s, y, rho) in mem.iter().rev() {
            let a = rho * dot(s, &q);
            for (qi, yi) in q.iter_mut().zip(y) {
                *qi -= a * yi;
            }
            alphas.push(a);
        }
        if let Some((s, y, _)) = mem.back() {
            let gamma = dot(s, y) / dot(y, y);
            q.iter_mut().for_each(|v| *v *= gamma);
        }
        for ((s, y, rho), a) in mem.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &q);
            for (qi, si) in q.iter_mut().zip(s) {
                *qi += (a - b) * si;
            }
        }
        let mut p: Vec<f64> = q.iter().map(|v| -v).collect();
        let mut d0 = dot(&g, &p);
        if !(d0 < 0.0) {
            mem.clear();
            p = g.iter().map(|v| -v).collect();
            d0 = dot(&g, &p);
        }
        let alpha0 = if mem.is_empty() {
            cfg.initial_step * (1.0 / inf_norm(&g)).min(1.0)
        } else {
            cfg.initial_step
        };

        let pt = match line_search(&mut f, &x, &p, fx, d0, alpha0, cfg, &mut evals) {
            Search::Found(pt) => pt,
            Search::Failed(Some(pt)) => {
                report.best_so_far = true;
                pt
            }
            Search::Failed(None) => {
                if !mem.is_empty() {
                    // retry once along steepest descent before giving up
                    mem.clear();
                    continue;
                }
                report.termination = Termination::LineSearchFailed;
                report.best_so_far = true;
                break;
            }
        };
        iter += 1;
        let s: Vec<f64> = pt.x.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = pt.g.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-10 * dot(&y, &y).sqrt() * dot(&s, &s).sqrt() && sy > 0.0 {
            if mem.len() == cfg.history {
                mem.pop_front();
            }
            mem.push_back((s.clone(), y, 1.0 / sy));
        }
        let step = inf_norm(&s);
        x = pt.x;
        fx = pt.f;
        g = pt.g;
        let grad_norm = inf_norm(&g);
        on_iter(&IterationLog {
            iteration: iter,
            value: fx,
            grad_norm,
            step,
            evaluations: evals,
        });
        if grad_norm <= cfg.grad_tol {
            report.termination = Termination::GradientTolerance;
            break;
        }
        if step <= cfg.step_tol {
            report.termination = Termination::StepTolerance;
            break;
        }
        if report.best_so_far {
            report.termination = Termination::LineSearchFailed;
            break;
        }
    }
    report.iterations = iter;
    report.evaluations = evals;
    report.final_value = fx;
    (x, report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_dimensional_quadratic() {
        let (x, r) = lbfgs_minimize(|x| ((x[0] - 3.0).powi(2), vec![2.0 * (x[0] - 3.0)]), &[0.0], &LbfgsConfig::default(), |_| {});
        assert!((x[0] - 3.0).abs() < 1e-9, "{x:?} {r:?}");
    }

    #[test]
    fn infinite_region_is_backtracked() {
        // log barrier at x = 0 with minimum at 1
        let f = |x: &[f64]| {
            if x[0] <= 0.0 {
                (f64::INFINITY, vec![f64::NAN])
            } else {
                (x[0] - x[0].ln(), vec![1.0 - 1.0 / x[0]])
            }
        };
        let (x, r) = lbfgs_minimize(f, &[20.0], &LbfgsConfig::default(), |_| {});
        assert!((x[0] - 1.0).abs() < 1e-7, "{x:?} {r:?}");
    }
}
