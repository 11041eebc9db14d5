//! Limited-memory BFGS with a strong-Wolfe line search.

use std::collections::VecDeque;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct LbfgsConfig {
    pub memory: usize,
    pub max_iters: usize,
    /// Stop when `‖g‖∞` falls below this.
    pub grad_tol: f64,
    /// Stop when `|f_k − f_{k+1}| ≤ rel_tol · max(|f_k|, |f_{k+1}|, 1)`.
    pub rel_tol: f64,
    pub c1: f64,
    pub c2: f64,
    /// Objective evaluations allowed per line search.
    pub max_evals: usize,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        LbfgsConfig {
            memory: 10,
            max_iters: 100,
            grad_tol: 1e-8,
            rel_tol: 1e-12,
            c1: 1e-4,
            c2: 0.9,
            max_evals: 30,
        }
    }
}

impl LbfgsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.memory == 0 {
            return Err(Error::Param("L-BFGS memory must be positive".into()));
        }
        if !(self.c1 > 0.0 && self.c1 < self.c2 && self.c2 < 1.0) {
            return Err(Error::Param(format!(
                "line search needs 0 < c1 < c2 < 1, got c1={} c2={}",
                self.c1, self.c2
            )));
        }
        if !(self.grad_tol >= 0.0) || !(self.rel_tol >= 0.0) {
            return Err(Error::Param("tolerances must be non-negative".into()));
        }
        if self.max_evals == 0 {
            return Err(Error::Param("line search needs at least one evaluation".into()));
        }
        Ok(())
    }
}

/// State after iteration `iter`; `iter = 0` is the starting point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterRecord {
    pub iter: usize,
    pub value: f64,
    pub grad_norm: f64,
    pub step: f64,
    pub evals: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    GradientTolerance,
    RelativeTolerance,
    MaxIterations,
    LineSearchFailed,
}

#[derive(Debug, Clone)]
pub struct LbfgsResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub grad: Vec<f64>,
    pub trace: Vec<IterRecord>,
    pub termination: Termination,
}

impl LbfgsResult {
    pub fn iterations(&self) -> usize {
        self.trace.len() - 1
    }

    pub fn line_search_failed(&self) -> bool {
        self.termination == Termination::LineSearchFailed
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

struct Point {
    a: f64,
    f: f64,
    dphi: f64,
}

struct Accepted {
    x: Vec<f64>,
    f: f64,
    g: Vec<f64>,
    a: f64,
}

/// Minimizer of the cubic through two points with slopes, kept inside the
/// interior of the bracket; falls back to bisection.
fn cubic_step(lo: &Point, hi: &Point) -> f64 {
    let (a0, a1) = (lo.a, hi.a);
    let d1 = lo.dphi + hi.dphi - 3.0 * (lo.f - hi.f) / (a0 - a1);
    let disc = d1 * d1 - lo.dphi * hi.dphi;
    let mid = 0.5 * (a0 + a1);
    if !(disc >= 0.0) || !lo.f.is_finite() || !hi.f.is_finite() {
        return mid;
    }
    let d2 = (a1 - a0).signum() * disc.sqrt();
    let a = a1 - (a1 - a0) * (hi.dphi + d2 - d1) / (hi.dphi - lo.dphi + 2.0 * d2);
    let (l, h) = (a0.min(a1), a0.max(a1));
    let w = h - l;
    if a.is_finite() && a > l + 0.1 * w && a < h - 0.1 * w {
        a
    } else {
        mid
    }
}

struct LineSearch<'a, F> {
    f: &'a mut F,
    x: &'a [f64],
    dir: &'a [f64],
    f0: f64,
    dphi0: f64,
    c1: f64,
    c2: f64,
    budget: usize,
    evals: usize,
}

impl<F> LineSearch<'_, F>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    fn eval(&mut self, a: f64) -> Result<(Point, Vec<f64>, Vec<f64>)> {
        self.evals += 1;
        let x: Vec<f64> = self.x.iter().zip(self.dir).map(|(x, d)| x + a * d).collect();
        let (f, g) = (self.f)(&x)?;
        let (f, dphi) = if f.is_finite() && g.iter().all(|v| v.is_finite()) {
            (f, dot(&g, self.dir))
        } else {
            (f64::INFINITY, f64::NAN)
        };
        Ok((Point { a, f, dphi }, x, g))
    }

    fn armijo_fails(&self, p: &Point) -> bool {
        !(p.f <= self.f0 + self.c1 * p.a * self.dphi0)
    }

    fn curvature_ok(&self, p: &Point) -> bool {
        p.dphi.abs() <= -self.c2 * self.dphi0
    }

    fn run(&mut self, a_init: f64) -> Result<Option<Accepted>> {
        let mut prev = Point {
            a: 0.0,
            f: self.f0,
            dphi: self.dphi0,
        };
        let mut a = a_init;
        let mut first = true;
        while self.evals < self.budget {
            let (p, x, g) = self.eval(a)?;
            if self.armijo_fails(&p) || (!first && p.f >= prev.f) {
                return self.zoom(prev, p);
            }
            if self.curvature_ok(&p) {
                return Ok(Some(Accepted { x, f: p.f, g, a: p.a }));
            }
            if p.dphi >= 0.0 {
                return self.zoom(p, prev);
            }
            first = false;
            a = 2.0 * p.a;
            prev = p;
        }
        Ok(None)
    }

    fn zoom(&mut self, mut lo: Point, mut hi: Point) -> Result<Option<Accepted>> {
        while self.evals < self.budget {
            if (hi.a - lo.a).abs() <= 1e-16 * lo.a.abs().max(hi.a.abs()) {
                break;
            }
            let a = cubic_step(&lo, &hi);
            let (p, x, g) = self.eval(a)?;
            if self.armijo_fails(&p) || p.f >= lo.f {
                hi = p;
                continue;
            }
            if self.curvature_ok(&p) {
                return Ok(Some(Accepted { x, f: p.f, g, a: p.a }));
            }
            if p.dphi * (hi.a - lo.a) >= 0.0 {
                hi = lo;
            }
            lo = p;
        }
        Ok(None)
    }
}

/// Minimizes `objective` from `init`. The objective returns the value and
/// gradient; `on_iter` sees every trace record as it is produced.
///
/// A failed line search ends the run with the best point found so far and
/// [`Termination::LineSearchFailed`]; errors from the objective propagate.
pub fn lbfgs_minimize<F, C>(
    mut objective: F,
    init: &[f64],
    config: &LbfgsConfig,
    mut on_iter: C,
) -> Result<LbfgsResult>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
    C: FnMut(&IterRecord),
{
    config.validate()?;
    let mut x = init.to_vec();
    let (mut f, mut g) = objective(&x)?;
    if g.len() != x.len() {
        return Err(Error::Contract(format!(
            "objective returned {} gradient entries for {} parameters",
            g.len(),
            x.len()
        )));
    }
    if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("objective is not finite at the initial point".into()));
    }
    let first = IterRecord {
        iter: 0,
        value: f,
        grad_norm: inf_norm(&g),
        step: 0.0,
        evals: 1,
    };
    on_iter(&first);
    let mut trace = vec![first];
    let mut history: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(config.memory);

    let termination = loop {
        if inf_norm(&g) < config.grad_tol {
            break Termination::GradientTolerance;
        }
        if trace.len() > config.max_iters {
            break Termination::MaxIterations;
        }
        let mut accepted = None;
        let mut evals = 0;
        // retry once along steepest descent if the quasi-Newton direction fails
        for attempt in 0..2 {
            if attempt == 1 {
                if history.is_empty() {
                    break;
                }
                history.clear();
            }
            let dir = direction(&g, &history);
            let dphi0 = dot(&g, &dir);
            if !(dphi0 < 0.0) {
                continue;
            }
            let a_init = if history.is_empty() {
                (1.0 / dir.iter().map(|v| v * v).sum::<f64>().sqrt()).min(1.0)
            } else {
                1.0
            };
            let mut ls = LineSearch {
                f: &mut objective,
                x: &x,
                dir: &dir,
                f0: f,
                dphi0,
                c1: config.c1,
                c2: config.c2,
                budget: config.max_evals,
                evals: 0,
            };
            let found = ls.run(a_init)?;
            evals += ls.evals;
            if let Some(acc) = found {
                accepted = Some((acc, dir));
                break;
            }
        }
        let Some((acc, dir)) = accepted else {
            log::warn!("line search failed at iteration {}", trace.len());
            break Termination::LineSearchFailed;
        };
        let s: Vec<f64> = dir.iter().map(|d| acc.a * d).collect();
        let y: Vec<f64> = acc.g.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&y, &y).sqrt() * dot(&s, &s).sqrt() {
            if history.len() == config.memory {
                history.pop_front();
            }
            history.push_back((s, y, 1.0 / sy));
        }
        let f_old = f;
        x = acc.x;
        f = acc.f;
        g = acc.g;
        let rec = IterRecord {
            iter: trace.len(),
            value: f,
            grad_norm: inf_norm(&g),
            step: acc.a,
            evals,
        };
        on_iter(&rec);
        trace.push(rec);
        if (f_old - f).abs() <= config.rel_tol * f_old.abs().max(f.abs()).max(1.0) {
            break Termination::RelativeTolerance;
        }
    };
    Ok(LbfgsResult {
        x,
        value: f,
        grad: g,
        trace,
        termination,
    })
}

/// Two-loop recursion: `−H g` with `H₀ = (sᵀy / yᵀy) I`.
fn direction(g: &[f64], history: &VecDeque<(Vec<f64>, Vec<f64>, f64)>) -> Vec<f64> {
    let mut q: Vec<f64> = g.to_vec();
    let mut alphas = Vec::with_capacity(history.len());
    for (s, y, rho) in history.iter().rev() {
        let a = rho * dot(s, &q);
        q.iter_mut().zip(y).for_each(|(qi, yi)| *qi -= a * yi);
        alphas.push(a);
    }
    if let Some((s, y, _)) = history.back() {
        let gamma = dot(s, y) / dot(y, y);
        q.iter_mut().for_each(|v| *v *= gamma);
    }
    for ((s, y, rho), a) in history.iter().zip(alphas.iter().rev()) {
        let b = rho * dot(y, &q);
        q.iter_mut().zip(s).for_each(|(qi, si)| *qi += (a - b) * si);
    }
    q.iter_mut().for_each(|v| *v = -*v);
    q
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn rosenbrock(x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (a, b) = (x[0], x[1]);
        let f = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
        let g = vec![-2.0 * (1.0 - a) - 400.0 * a * (b - a * a), 200.0 * (b - a * a)];
        Ok((f, g))
    }

    #[test]
    fn rosenbrock_converges() {
        let cfg = LbfgsConfig {
            max_iters: 200,
            grad_tol: 1e-10,
            rel_tol: 0.0,
            ..Default::default()
        };
        let r = lbfgs_minimize(rosenbrock, &[-1.2, 1.0], &cfg, |_| {}).unwrap();
        assert!((r.x[0] - 1.0).abs() < 1e-6 && (r.x[1] - 1.0).abs() < 1e-6, "{:?} {:?}", r.x, r.termination);
    }

    #[test]
    fn quadratic_50d() {
        let mut rng = crate::image::rng_from_seed(3);
        let n = 50;
        let diag: Vec<f64> = (0..n).map(|_| rng.gen_range(1.0..20.0)).collect();
        let shift: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let obj = |x: &[f64]| {
            let mut f = 0.0;
            let mut g = vec![0.0; n];
            for i in 0..n {
                let r = x[i] - shift[i];
                f += 0.5 * diag[i] * r * r;
                g[i] = diag[i] * r;
            }
            Ok((f, g))
        };
        let cfg = LbfgsConfig {
            max_iters: 60,
            grad_tol: 1e-8,
            rel_tol: 0.0,
            ..Default::default()
        };
        let r = lbfgs_minimize(obj, &vec![0.0; n], &cfg, |_| {}).unwrap();
        assert_eq!(r.termination, Termination::GradientTolerance);
        assert!(inf_norm(&r.grad) < 1e-8);
        assert!(r.iterations() <= 60);
    }

    #[test]
    fn stationary_start_takes_no_iterations() {
        let r = lbfgs_minimize(|x: &[f64]| Ok((x[0] * x[0], vec![2.0 * x[0]])), &[0.0], &LbfgsConfig::default(), |_| {})
            .unwrap();
        assert_eq!(r.iterations(), 0);
        assert_eq!(r.termination, Termination::GradientTolerance);
    }

    #[test]
    fn trace_is_monotone() {
        let cfg = LbfgsConfig {
            max_iters: 40,
            ..Default::default()
        };
        let mut seen = 0;
        let r = lbfgs_minimize(rosenbrock, &[-1.2, 1.0], &cfg, |_| seen += 1).unwrap();
        assert_eq!(seen, r.trace.len());
        assert!(r.trace.windows(2).all(|w| w[1].value <= w[0].value));
    }

    #[test]
    fn broken_gradient_reports_failure_not_panic() {
        // gradient points uphill: no step can satisfy the Wolfe conditions
        let obj = |x: &[f64]| Ok((x[0] * x[0] + 1.0, vec![-2.0 * x[0] - 1.0]));
        let r = lbfgs_minimize(obj, &[1.0], &LbfgsConfig::default(), |_| {}).unwrap();
        assert!(r.line_search_failed());
        assert_eq!(r.x, vec![1.0]);
    }

    #[test]
    fn bad_constants_rejected() {
        let cfg = LbfgsConfig {
            c1: 0.95,
            ..Default::default()
        };
        assert!(lbfgs_minimize(rosenbrock, &[0.0, 0.0], &cfg, |_| {}).is_err());
    }
}
