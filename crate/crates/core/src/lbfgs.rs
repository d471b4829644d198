//! Limited-memory BFGS with a strong Wolfe line search.

use std::collections::VecDeque;

use ndarray::Array1;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LbfgsConfig {
    pub memory: usize,
    pub max_iterations: usize,
    /// Sufficient-decrease constant.
    pub c1: f64,
    /// Curvature constant.
    pub c2: f64,
    /// Stop once `max |∇f| <= tolerance`.
    pub tolerance: f64,
    pub max_line_search: usize,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        Self {
            memory: 10,
            max_iterations: 200,
            c1: 1e-4,
            c2: 0.9,
            tolerance: 1e-6,
            max_line_search: 40,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Minimum {
    pub x: Array1<f64>,
    pub value: f64,
    pub residual: f64,
    pub iterations: usize,
}

fn inf_norm(v: &Array1<f64>) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Minimizes `f` from `x0`. The closure returns `(f(x), ∇f(x))`.
pub fn minimize<F>(mut f: F, x0: Array1<f64>, config: &LbfgsConfig) -> Result<Minimum>
where
    F: FnMut(&Array1<f64>) -> Result<(f64, Array1<f64>)>,
{
    let mut x = x0;
    let (mut fx, mut gx) = f(&x)?;
    let mut history: VecDeque<(Array1<f64>, Array1<f64>, f64)> = VecDeque::with_capacity(config.memory);
    let mut residual = inf_norm(&gx);

    for iter in 0..config.max_iterations {
        if !fx.is_finite() || !residual.is_finite() {
            return Err(Error::NonConvergence { residual, iterations: iter });
        }
        if residual <= config.tolerance {
            return Ok(Minimum { x, value: fx, residual, iterations: iter });
        }

        let mut d = two_loop(&gx, &history);
        let mut slope = d.dot(&gx);
        if !(slope < 0.0) {
            history.clear();
            d = -&gx;
            slope = d.dot(&gx);
        }
        let initial = if history.is_empty() {
            (1.0 / inf_norm(&gx)).min(1.0)
        } else {
            1.0
        };

        let step = match line_search(&mut f, &x, fx, &d, slope, initial, config)? {
            Some(s) => s,
            None if !history.is_empty() => {
                history.clear();
                continue;
            }
            None => return Err(Error::NonConvergence { residual, iterations: iter }),
        };

        let s = &step.x - &x;
        let y = &step.grad - &gx;
        let sy = s.dot(&y);
        if sy > 1e-12 * s.dot(&s).sqrt() * y.dot(&y).sqrt() {
            if history.len() == config.memory {
                history.pop_front();
            }
            history.push_back((s, y, 1.0 / sy));
        }
        x = step.x;
        fx = step.value;
        gx = step.grad;
        residual = inf_norm(&gx);
    }
    if residual <= config.tolerance {
        return Ok(Minimum { x, value: fx, residual, iterations: config.max_iterations });
    }
    Err(Error::NonConvergence { residual, iterations: config.max_iterations })
}

fn two_loop(g: &Array1<f64>, history: &VecDeque<(Array1<f64>, Array1<f64>, f64)>) -> Array1<f64> {
    let mut q = g.clone();
    let mut alphas = Vec::with_capacity(history.len());
    for (s, y, rho) in history.iter().rev() {
        let a = rho * s.dot(&q);
        q.scaled_add(-a, y);
        alphas.push(a);
    }
    if let Some((s, y, _)) = history.back() {
        q *= s.dot(y) / y.dot(y);
    }
    for ((s, y, rho), a) in history.iter().zip(alphas.into_iter().rev()) {
        let b = rho * y.dot(&q);
        q.scaled_add(a - b, s);
    }
    -q
}

struct Point {
    t: f64,
    value: f64,
    slope: f64,
}

struct Step {
    x: Array1<f64>,
    value: f64,
    grad: Array1<f64>,
}

/// Strong Wolfe search along `d` (bracketing then zoom). `None` when no
/// acceptable step was found within the evaluation budget.
fn line_search<F>(
    f: &mut F,
    x: &Array1<f64>,
    f0: f64,
    d: &Array1<f64>,
    slope0: f64,
    initial: f64,
    config: &LbfgsConfig,
) -> Result<Option<Step>>
where
    F: FnMut(&Array1<f64>) -> Result<(f64, Array1<f64>)>,
{
    let mut probe = |t: f64| -> Result<(Point, Step)> {
        let xt = x + &(d * t);
        let (v, g) = f(&xt)?;
        let slope = g.dot(d);
        Ok((Point { t, value: v, slope }, Step { x: xt, value: v, grad: g }))
    };

    let mut prev = Point { t: 0.0, value: f0, slope: slope0 };
    let mut t = initial;
    let mut evals = 0;
    while evals < config.max_line_search {
        let (cur, step) = probe(t)?;
        evals += 1;
        if !cur.value.is_finite() {
            t = 0.5 * (prev.t + t);
            continue;
        }
        if approx_wolfe(&cur, f0, slope0, config) {
            return Ok(Some(step));
        }
        if cur.value > f0 + config.c1 * t * slope0 || (evals > 1 && cur.value >= prev.value) {
            return zoom(&mut probe, prev, cur, f0, slope0, config, config.max_line_search - evals);
        }
        if cur.slope.abs() <= -config.c2 * slope0 {
            return Ok(Some(step));
        }
        if cur.slope >= 0.0 {
            return zoom(&mut probe, cur, prev, f0, slope0, config, config.max_line_search - evals);
        }
        prev = cur;
        t *= 2.0;
    }
    Ok(None)
}

fn zoom<P>(
    probe: &mut P,
    mut lo: Point,
    mut hi: Point,
    f0: f64,
    slope0: f64,
    config: &LbfgsConfig,
    budget: usize,
) -> Result<Option<Step>>
where
    P: FnMut(f64) -> Result<(Point, Step)>,
{
    for _ in 0..budget {
        let t = interpolate(&lo, &hi);
        let (cur, step) = probe(t)?;
        if cur.value.is_finite() && approx_wolfe(&cur, f0, slope0, config) {
            return Ok(Some(step));
        }
        if !cur.value.is_finite() || cur.value > f0 + config.c1 * t * slope0 || cur.value >= lo.value {
            hi = cur;
        } else {
            if cur.slope.abs() <= -config.c2 * slope0 {
                return Ok(Some(step));
            }
            if cur.slope * (hi.t - lo.t) >= 0.0 {
                hi = lo;
            }
            lo = cur;
        }
        if (hi.t - lo.t).abs() < 1e-16 * lo.t.abs().max(1.0) {
            break;
        }
    }
    Ok(None)
}

/// Approximate Wolfe conditions (Hager and Zhang). Near the minimum the
/// sufficient-decrease test compares values that differ only by rounding;
/// the slope bounds still certify progress there.
fn approx_wolfe(cur: &Point, f0: f64, slope0: f64, config: &LbfgsConfig) -> bool {
    let noise = 1e-10 * (1.0 + f0.abs());
    cur.value <= f0 + noise
        && cur.slope >= config.c2 * slope0
        && cur.slope <= (2.0 * config.c1 - 1.0) * slope0
}

/// Cubic interpolation minimizer between two points, safeguarded to stay
/// inside the interior of the bracket.
fn interpolate(a: &Point, b: &Point) -> f64 {
    let (lo, hi) = if a.t < b.t { (a.t, b.t) } else { (b.t, a.t) };
    let width = hi - lo;
    let d1 = a.slope + b.slope - 3.0 * (a.value - b.value) / (a.t - b.t);
    let disc = d1 * d1 - a.slope * b.slope;
    let mut t = f64::NAN;
    if disc >= 0.0 && b.value.is_finite() {
        let d2 = (b.t - a.t).signum() * disc.sqrt();
        t = b.t - (b.t - a.t) * (b.slope + d2 - d1) / (b.slope - a.slope + 2.0 * d2);
    }
    if !t.is_finite() || t < lo + 0.1 * width || t > hi - 0.1 * width {
        t = 0.5 * (lo + hi);
    }
    t
}
