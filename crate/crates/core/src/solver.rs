//! Box-constrained augmented-Lagrangian solver with a projected BFGS inner
//! loop, sized for a few dozen decision variables.

use nalgebra::{DMatrix, DVector};

use crate::error::Result;

/// `min f(z)` s.t. `c_i(z) ≤ 0`, `lower ≤ z ≤ upper`.
pub trait ConstrainedProblem {
    fn lower(&self) -> &DVector<f64>;
    fn upper(&self) -> &DVector<f64>;
    fn num_constraints(&self) -> usize;

    /// Objective and constraint values.
    fn values(&self, z: &DVector<f64>) -> Result<(f64, Vec<f64>)>;

    /// `∇f(z) + Σ_i w_i ∇c_i(z)`.
    fn gradient(&self, z: &DVector<f64>, w: &[f64]) -> Result<DVector<f64>>;
}

#[derive(Debug, Clone)]
pub struct SolverOptions {
    pub gradient_tolerance: f64,
    pub max_inner_iterations: usize,
    pub max_outer_iterations: usize,
    pub initial_penalty: f64,
    pub max_penalty: f64,
    /// Constraint violation accepted as feasible.
    pub feasibility_tolerance: f64,
    pub complementarity_tolerance: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            gradient_tolerance: 1e-8,
            max_inner_iterations: 200,
            max_outer_iterations: 40,
            initial_penalty: 10.0,
            max_penalty: 1e8,
            feasibility_tolerance: 0.0,
            complementarity_tolerance: 1e-7,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    Optimal,
    FeasibleSuboptimal,
    Infeasible,
}

impl SolveStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            SolveStatus::Optimal => "optimal",
            SolveStatus::FeasibleSuboptimal => "feasible-suboptimal",
            SolveStatus::Infeasible => "infeasible",
        }
    }
}

#[derive(Debug, Clone)]
pub struct SolverResult {
    pub z: DVector<f64>,
    pub objective: f64,
    pub max_violation: f64,
    pub status: SolveStatus,
    /// Total inner iterations over all outer rounds.
    pub iterations: usize,
}

fn max_violation(c: &[f64]) -> f64 {
    c.iter().fold(0.0, |m, v| m.max(*v))
}

fn project(z: &DVector<f64>, lo: &DVector<f64>, hi: &DVector<f64>) -> DVector<f64> {
    DVector::from_fn(z.len(), |i, _| z[i].clamp(lo[i], hi[i]))
}

/// Smooth objective minimized by the inner loop.
trait Merit {
    fn value(&self, z: &DVector<f64>) -> Result<f64>;
    fn value_and_gradient(&self, z: &DVector<f64>) -> Result<(f64, DVector<f64>)>;
}

/// `f + Σ (max(0, λ + μc)² − λ²) / 2μ`.
struct Lagrangian<'a, P: ConstrainedProblem + ?Sized> {
    problem: &'a P,
    lambda: &'a [f64],
    mu: f64,
}

impl<P: ConstrainedProblem + ?Sized> Lagrangian<'_, P> {
    fn penalty(&self, f: f64, c: &[f64]) -> f64 {
        let mut v = f;
        for (ci, li) in c.iter().zip(self.lambda) {
            let t = (li + self.mu * ci).max(0.0);
            v += (t * t - li * li) / (2.0 * self.mu);
        }
        v
    }
}

impl<P: ConstrainedProblem + ?Sized> Merit for Lagrangian<'_, P> {
    fn value(&self, z: &DVector<f64>) -> Result<f64> {
        let (f, c) = self.problem.values(z)?;
        Ok(self.penalty(f, &c))
    }

    fn value_and_gradient(&self, z: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        let (f, c) = self.problem.values(z)?;
        let w: Vec<f64> = c
            .iter()
            .zip(self.lambda)
            .map(|(ci, li)| (li + self.mu * ci).max(0.0))
            .collect();
        Ok((self.penalty(f, &c), self.problem.gradient(z, &w)?))
    }
}

/// `½ Σ max(0, c_i)²`, used to recover a feasible point.
struct Restoration<'a, P: ConstrainedProblem + ?Sized> {
    problem: &'a P,
}

impl<P: ConstrainedProblem + ?Sized> Merit for Restoration<'_, P> {
    fn value(&self, z: &DVector<f64>) -> Result<f64> {
        let (_, c) = self.problem.values(z)?;
        Ok(0.5 * c.iter().map(|v| v.max(0.0).powi(2)).sum::<f64>())
    }

    fn value_and_gradient(&self, z: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        let (_, c) = self.problem.values(z)?;
        let w: Vec<f64> = c.iter().map(|v| v.max(0.0)).collect();
        // Strip the objective part: gradient(z, w) − gradient(z, 0).
        let g = self.problem.gradient(z, &w)? - self.problem.gradient(z, &vec![0.0; c.len()])?;
        Ok((0.5 * w.iter().map(|v| v * v).sum::<f64>(), g))
    }
}

struct InnerResult {
    z: DVector<f64>,
    iterations: usize,
    converged: bool,
}

fn projected_gradient_norm(
    z: &DVector<f64>,
    g: &DVector<f64>,
    lo: &DVector<f64>,
    hi: &DVector<f64>,
) -> f64 {
    (z - project(&(z - g), lo, hi)).amax()
}

/// Projected BFGS with Armijo backtracking along the projection arc.
fn projected_bfgs<M: Merit>(
    merit: &M,
    z0: &DVector<f64>,
    lo: &DVector<f64>,
    hi: &DVector<f64>,
    opts: &SolverOptions,
) -> Result<InnerResult> {
    let n = z0.len();
    let mut z = project(z0, lo, hi);
    let (mut v, mut g) = merit.value_and_gradient(&z)?;
    let mut h = DMatrix::<f64>::identity(n, n);
    let mut fresh = true;
    let mut iterations = 0;
    let mut converged = false;
    while iterations < opts.max_inner_iterations {
        if projected_gradient_norm(&z, &g, lo, hi) <= opts.gradient_tolerance {
            converged = true;
            break;
        }
        iterations += 1;
        let active: Vec<bool> = (0..n)
            .map(|i| {
                let eps = 1e-12 * (1.0 + z[i].abs());
                (z[i] <= lo[i] + eps && g[i] > 0.0) || (z[i] >= hi[i] - eps && g[i] < 0.0)
            })
            .collect();
        let g_free = DVector::from_fn(n, |i, _| if active[i] { 0.0 } else { g[i] });
        let mut d = -(&h * &g_free);
        for i in 0..n {
            if active[i] {
                d[i] = 0.0;
            }
        }
        if d.dot(&g_free) >= 0.0 {
            h = DMatrix::identity(n, n);
            fresh = true;
            d = -g_free.clone();
        }
        let mut accepted = None;
        let mut alpha = 1.0;
        for _ in 0..60 {
            let trial = project(&(&z + &d * alpha), lo, hi);
            let step = &trial - &z;
            let decrease = g.dot(&step);
            if step.amax() == 0.0 {
                break;
            }
            let tv = merit.value(&trial)?;
            if tv.is_finite() && tv <= v + 1e-4 * decrease.min(0.0) && decrease < 0.0 {
                accepted = Some(trial);
                break;
            }
            alpha *= 0.5;
        }
        let Some(trial) = accepted else {
            if fresh {
                break;
            }
            h = DMatrix::identity(n, n);
            fresh = true;
            continue;
        };
        let (tv, tg) = merit.value_and_gradient(&trial)?;
        let s = &trial - &z;
        let y = &tg - &g;
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() && sy > 0.0 {
            if fresh {
                h = DMatrix::identity(n, n) * (sy / y.dot(&y));
                fresh = false;
            }
            let rho = 1.0 / sy;
            let hy = &h * &y;
            let yhy = y.dot(&hy);
            // H⁺ = H − ρ(s·(Hy)ᵀ + (Hy)·sᵀ) + (ρ²·yᵀHy + ρ) s sᵀ
            h += -(&s * hy.transpose() + &hy * s.transpose()) * rho
                + (&s * s.transpose()) * (rho * rho * yhy + rho);
        }
        let progress = (v - tv).abs() <= 1e-16 * v.abs().max(1.0) && s.amax() <= 1e-15;
        z = trial;
        v = tv;
        g = tg;
        if progress {
            break;
        }
    }
    if !converged && projected_gradient_norm(&z, &g, lo, hi) <= opts.gradient_tolerance {
        converged = true;
    }
    Ok(InnerResult {
        z,
        iterations,
        converged,
    })
}

/// Solves the problem from `z0`. Every iterate that is feasible is a
/// candidate answer; the one with the lowest objective is returned, so the
/// result is never worse than a feasible starting point.
pub fn solve<P: ConstrainedProblem + ?Sized>(
    problem: &P,
    z0: &DVector<f64>,
    opts: &SolverOptions,
) -> Result<SolverResult> {
    let lo = problem.lower();
    let hi = problem.upper();
    let mut z = project(z0, lo, hi);
    let mut best: Option<(f64, DVector<f64>)> = None;
    let consider = |z: &DVector<f64>, f: f64, c: &[f64], best: &mut Option<(f64, DVector<f64>)>| {
        if max_violation(c) <= opts.feasibility_tolerance && best.as_ref().is_none_or(|(bf, _)| f < *bf) {
            *best = Some((f, z.clone()));
        }
    };
    let (f0, c0) = problem.values(&z)?;
    consider(&z, f0, &c0, &mut best);

    let m = problem.num_constraints();
    let mut lambda = vec![0.0; m];
    let mut mu = opts.initial_penalty;
    let mut iterations = 0;
    let mut optimal = false;
    let mut prev_violation = max_violation(&c0);
    let mut least_violation = (prev_violation, z.clone());

    let al_rounds = |z: &mut DVector<f64>,
                         lambda: &mut Vec<f64>,
                         mu: &mut f64,
                         best: &mut Option<(f64, DVector<f64>)>,
                         iterations: &mut usize,
                         prev_violation: &mut f64,
                         least_violation: &mut (f64, DVector<f64>)|
     -> Result<bool> {
        for _ in 0..opts.max_outer_iterations {
            let inner = {
                let merit = Lagrangian {
                    problem,
                    lambda: lambda.as_slice(),
                    mu: *mu,
                };
                projected_bfgs(&merit, z, lo, hi, opts)?
            };
            *iterations += inner.iterations;
            *z = inner.z;
            let (f, c) = problem.values(z)?;
            consider(z, f, &c, best);
            let viol = max_violation(&c);
            if viol < least_violation.0 {
                *least_violation = (viol, z.clone());
            }
            let complementarity = c
                .iter()
                .zip(lambda.iter())
                .map(|(ci, li)| ci.max(-li).abs())
                .fold(0.0, f64::max);
            for (li, ci) in lambda.iter_mut().zip(&c) {
                *li = (*li + *mu * ci).max(0.0);
            }
            if viol <= opts.feasibility_tolerance
                && inner.converged
                && complementarity <= opts.complementarity_tolerance
            {
                return Ok(true);
            }
            if viol > opts.feasibility_tolerance && (viol > 0.25 * *prev_violation || viol > 1e-3) {
                *mu = (*mu * 2.0).min(opts.max_penalty);
            }
            *prev_violation = viol;
        }
        Ok(false)
    };

    if al_rounds(
        &mut z,
        &mut lambda,
        &mut mu,
        &mut best,
        &mut iterations,
        &mut prev_violation,
        &mut least_violation,
    )? {
        optimal = true;
    }

    if best.is_none() {
        let restored = projected_bfgs(
            &Restoration { problem },
            &least_violation.1,
            lo,
            hi,
            &SolverOptions {
                max_inner_iterations: 2 * opts.max_inner_iterations,
                gradient_tolerance: 1e-14,
                ..opts.clone()
            },
        )?;
        iterations += restored.iterations;
        let (f, c) = problem.values(&restored.z)?;
        consider(&restored.z, f, &c, &mut best);
        if best.is_some() {
            z = restored.z;
            lambda = vec![0.0; m];
            mu = opts.initial_penalty;
            prev_violation = max_violation(&c);
            al_rounds(
                &mut z,
                &mut lambda,
                &mut mu,
                &mut best,
                &mut iterations,
                &mut prev_violation,
                &mut least_violation,
            )?;
        }
    }

    match best {
        Some((objective, zb)) => {
            let (_, c) = problem.values(&zb)?;
            let is_final = zb == z;
            Ok(SolverResult {
                max_violation: max_violation(&c),
                status: if optimal && is_final {
                    SolveStatus::Optimal
                } else {
                    SolveStatus::FeasibleSuboptimal
                },
                z: zb,
                objective,
                iterations,
            })
        }
        None => {
            let (f, c) = problem.values(&least_violation.1)?;
            Ok(SolverResult {
                z: least_violation.1,
                objective: f,
                max_violation: max_violation(&c),
                status: SolveStatus::Infeasible,
                iterations,
            })
        }
    }
}
