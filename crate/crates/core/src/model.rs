//! Agent dynamics, constraint boxes, Jacobian linearization and the offline
//! synthesis/verification of terminal ingredients `(P, K, r, f)`.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{
    ellipsoid_half_widths, is_pd, is_psd, max_eigenvalue, min_eigenvalue, quad_form,
    spectral_radius, BoxSet,
};
use crate::sampling::{rng_from_seed, uniform_in_ball, uniform_in_box, EllipsoidMap};
use crate::AgentId;

/// Nominal discrete-time dynamics `x⁺ = f(x, u)`.
pub trait Dynamics: Send + Sync + fmt::Debug {
    fn state_dim(&self) -> usize;
    fn input_dim(&self) -> usize;
    fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64>;

    /// `(∂f/∂x, ∂f/∂u)` at `(x, u)`. Defaults to central differences.
    fn jacobians(&self, x: &DVector<f64>, u: &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        central_difference_jacobians(self, x, u)
    }
}

/// Kinematic unicycle `(x, y, θ)` driven by `(v, ω)`, forward-Euler
/// discretized with sample period `T`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Unicycle {
    pub sample_period: f64,
}

impl Dynamics for Unicycle {
    fn state_dim(&self) -> usize {
        3
    }

    fn input_dim(&self) -> usize {
        2
    }

    fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let t = self.sample_period;
        let (s, c) = x[2].sin_cos();
        DVector::from_vec(vec![
            x[0] + t * u[0] * c,
            x[1] + t * u[0] * s,
            x[2] + t * u[1],
        ])
    }

    fn jacobians(&self, x: &DVector<f64>, u: &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        let t = self.sample_period;
        let (s, c) = x[2].sin_cos();
        let a = DMatrix::from_row_slice(
            3,
            3,
            &[1.0, 0.0, -t * u[0] * s, 0.0, 1.0, t * u[0] * c, 0.0, 0.0, 1.0],
        );
        let b = DMatrix::from_row_slice(3, 2, &[t * c, 0.0, t * s, 0.0, 0.0, t]);
        (a, b)
    }
}

/// `x⁺ = A x + B u`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearDynamics {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
}

impl LinearDynamics {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>) -> Result<Self> {
        if !a.is_square() || a.nrows() != b.nrows() {
            return Err(Error::Validation(format!(
                "linear model shapes A {}x{} and B {}x{} are inconsistent",
                a.nrows(),
                a.ncols(),
                b.nrows(),
                b.ncols()
            )));
        }
        Ok(Self { a, b })
    }
}

impl Dynamics for LinearDynamics {
    fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    fn input_dim(&self) -> usize {
        self.b.ncols()
    }

    fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        &self.a * x + &self.b * u
    }

    fn jacobians(&self, _x: &DVector<f64>, _u: &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        (self.a.clone(), self.b.clone())
    }
}

fn fd_step(z: f64) -> f64 {
    f64::EPSILON.cbrt() * z.abs().max(1.0)
}

/// Central-difference Jacobians with step `cbrt(ε)·max(1, |z|)` per coordinate.
pub fn central_difference_jacobians<D: Dynamics + ?Sized>(
    dynamics: &D,
    x: &DVector<f64>,
    u: &DVector<f64>,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = x.len();
    let m = u.len();
    let mut a = DMatrix::zeros(n, n);
    let mut b = DMatrix::zeros(n, m);
    for j in 0..n {
        let h = fd_step(x[j]);
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[j] += h;
        xm[j] -= h;
        let col = (dynamics.step(&xp, u) - dynamics.step(&xm, u)) / (xp[j] - xm[j]);
        a.set_column(j, &col);
    }
    for j in 0..m {
        let h = fd_step(u[j]);
        let mut up = u.clone();
        let mut um = u.clone();
        up[j] += h;
        um[j] -= h;
        let col = (dynamics.step(x, &up) - dynamics.step(x, &um)) / (up[j] - um[j]);
        b.set_column(j, &col);
    }
    (a, b)
}

/// One agent's plant description.
#[derive(Debug, Clone)]
pub struct AgentModel {
    pub id: AgentId,
    pub dynamics: Arc<dyn Dynamics>,
    pub state_box: BoxSet,
    pub input_box: BoxSet,
    /// Euclidean bound on the additive disturbance.
    pub eta: f64,
    /// Lipschitz constant of `g(x, u) = f(x, u) − x` in `x`.
    pub lipschitz_open: f64,
    /// Lipschitz constant of `g(x, Kx)`.
    pub lipschitz_closed: f64,
    pub sample_period: Option<f64>,
}

impl AgentModel {
    pub fn new(
        id: AgentId,
        dynamics: Arc<dyn Dynamics>,
        state_box: BoxSet,
        input_box: BoxSet,
        eta: f64,
        lipschitz_open: f64,
        lipschitz_closed: f64,
    ) -> Result<Self> {
        let n = dynamics.state_dim();
        let m = dynamics.input_dim();
        if state_box.dim() != n || input_box.dim() != m {
            return Err(Error::Validation(format!(
                "agent {id}: constraint boxes have dims ({}, {}), dynamics expects ({n}, {m})",
                state_box.dim(),
                input_box.dim()
            )));
        }
        if state_box.is_empty() || input_box.is_empty() {
            return Err(Error::Validation(format!("agent {id}: empty constraint box")));
        }
        if !(eta >= 0.0) || !(lipschitz_open > 0.0) || !(lipschitz_closed > 0.0) {
            return Err(Error::Validation(format!(
                "agent {id}: need eta ≥ 0 and positive Lipschitz constants"
            )));
        }
        let origin = dynamics.step(&DVector::zeros(n), &DVector::zeros(m));
        if origin.amax() > 1e-12 {
            return Err(Error::Validation(format!(
                "agent {id}: origin is not an equilibrium (f(0,0) = {origin:?})"
            )));
        }
        let zero_x = DVector::zeros(n);
        let zero_u = DVector::zeros(m);
        if !state_box.contains(&zero_x) || !input_box.contains(&zero_u) {
            return Err(Error::Validation(format!(
                "agent {id}: constraint boxes must contain the origin"
            )));
        }
        Ok(Self {
            id,
            dynamics,
            state_box,
            input_box,
            eta,
            lipschitz_open,
            lipschitz_closed,
            sample_period: None,
        })
    }

    pub fn with_sample_period(mut self, t: f64) -> Self {
        self.sample_period = Some(t);
        self
    }

    pub fn dim_x(&self) -> usize {
        self.dynamics.state_dim()
    }

    pub fn dim_u(&self) -> usize {
        self.dynamics.input_dim()
    }

    /// Nominal step with a finiteness check.
    pub fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        let next = self.dynamics.step(x, u);
        if next.iter().all(|v| v.is_finite()) {
            Ok(next)
        } else {
            Err(Error::ModelEvaluation(format!(
                "agent {}: f({x:?}, {u:?}) = {next:?}",
                self.id
            )))
        }
    }
}

/// Jacobian linearization `(A, B)` at the origin by central differences.
pub fn linearize(model: &AgentModel) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let x = DVector::zeros(model.dim_x());
    let u = DVector::zeros(model.dim_u());
    let (a, b) = central_difference_jacobians(model.dynamics.as_ref(), &x, &u);
    if a.iter().chain(b.iter()).all(|v| v.is_finite()) {
        Ok((a, b))
    } else {
        Err(Error::ModelEvaluation(format!(
            "agent {}: non-finite Jacobian at the origin",
            model.id
        )))
    }
}

/// Terminal weight, terminal feedback and the two terminal radii.
#[derive(Debug, Clone, PartialEq)]
pub struct TerminalIngredients {
    pub p: DMatrix<f64>,
    pub k: DMatrix<f64>,
    /// `Q + KᵀRK`.
    pub qbar: DMatrix<f64>,
    /// `λ_min(Q̄) / λ_max(P)`.
    pub rho: f64,
    /// Radius of the terminal region `𝒳^r = {‖x‖²_P ≤ r²}`.
    pub r: f64,
    /// Radius of the terminal set `𝒳^f = {‖x‖²_P ≤ f²}`.
    pub f: f64,
}

impl TerminalIngredients {
    pub fn new(
        p: DMatrix<f64>,
        k: DMatrix<f64>,
        q: &DMatrix<f64>,
        r_weight: &DMatrix<f64>,
        r: f64,
        f: f64,
    ) -> Result<Self> {
        if !is_psd(&p) {
            return Err(Error::Validation("terminal weight P is not PSD".into()));
        }
        if k.ncols() != p.nrows() || k.nrows() != r_weight.nrows() {
            return Err(Error::Validation(format!(
                "feedback gain K is {}x{}, expected {}x{}",
                k.nrows(),
                k.ncols(),
                r_weight.nrows(),
                p.nrows()
            )));
        }
        if !(0.0 < f && f < r) {
            return Err(Error::Validation(format!(
                "terminal radii must satisfy 0 < f < r (got f = {f}, r = {r})"
            )));
        }
        let qbar = q + k.transpose() * r_weight * &k;
        let rho = min_eigenvalue(&qbar) / max_eigenvalue(&p);
        if !(rho > 0.0 && rho <= 1.0) {
            return Err(Error::Domain(format!("rho = {rho} is outside (0, 1]")));
        }
        Ok(Self {
            p,
            k,
            qbar,
            rho,
            r,
            f,
        })
    }

    pub fn feedback(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.k * x
    }

    pub fn in_region(&self, x: &DVector<f64>) -> bool {
        quad_form(x, &self.p) <= self.r * self.r
    }

    pub fn in_terminal_set(&self, x: &DVector<f64>) -> bool {
        quad_form(x, &self.p) <= self.f * self.f
    }
}

#[derive(Debug, Clone)]
pub struct SynthesisOptions {
    /// Factor applied to `(Q, R)` in the Riccati iteration, leaving a
    /// `(factor − 1)·‖x‖²_Q̄` decrease margin for the nonlinearity.
    pub inflation: f64,
    pub max_iterations: usize,
    pub tolerance: f64,
    pub samples: usize,
    pub seed: u64,
    /// `f = f_ratio · r`.
    pub f_ratio: f64,
}

impl Default for SynthesisOptions {
    fn default() -> Self {
        Self {
            inflation: 1.01,
            max_iterations: 20_000,
            tolerance: 1e-12,
            samples: 10_000,
            seed: 0,
            f_ratio: 0.5,
        }
    }
}

/// Discrete-time Riccati value iteration; returns `(P, K)` with `u = Kx`.
pub fn riccati_iteration(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    max_iterations: usize,
    tolerance: f64,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let at = a.transpose();
    let bt = b.transpose();
    let gain = |p: &DMatrix<f64>| -> Result<DMatrix<f64>> {
        let s = r + &bt * p * b;
        let s_inv = s
            .try_inverse()
            .ok_or_else(|| Error::Synthesis("R + BᵀPB is singular".into()))?;
        Ok(-(s_inv * &bt * p * a))
    };
    let mut p = q.clone();
    for _ in 0..max_iterations {
        let k = gain(&p)?;
        let next = &at * &p * a + &at * &p * b * &k + q;
        let next = (&next + next.transpose()) * 0.5;
        if !next.iter().all(|v| v.is_finite()) || next.amax() > 1e12 {
            return Err(Error::Synthesis("Riccati iteration diverged".into()));
        }
        let delta = (&next - &p).amax();
        p = next;
        if delta <= tolerance * p.amax().max(1.0) {
            let k = gain(&p)?;
            return Ok((p, k));
        }
    }
    Err(Error::Synthesis(format!(
        "Riccati iteration did not converge in {max_iterations} iterations (pair not stabilizable?)"
    )))
}

/// Largest radius whose P-ellipsoid lies inside the state box and maps into
/// the input box under `u = Kx`.
fn box_limited_radius(model: &AgentModel, p: &DMatrix<f64>, k: &DMatrix<f64>) -> Result<f64> {
    let p_inv = p
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Synthesis("P is singular".into()))?;
    let unit = ellipsoid_half_widths(&p_inv, 1.0);
    let mut limit = f64::INFINITY;
    for (c, w) in unit.iter().enumerate() {
        let room = model.state_box.upper[c].min(-model.state_box.lower[c]);
        limit = limit.min(room / w);
    }
    let kpk = k * &p_inv * k.transpose();
    for c in 0..k.nrows() {
        let w = kpk[(c, c)].max(0.0).sqrt();
        if w > 0.0 {
            let room = model.input_box.upper[c].min(-model.input_box.lower[c]);
            limit = limit.min(room / w);
        }
    }
    Ok(limit)
}

/// Synthesizes `(P, K)` by Riccati iteration on the Jacobian linearization
/// and picks the largest terminal radius passing the sampled checks.
pub fn synthesize_terminal(
    model: &AgentModel,
    q: &DMatrix<f64>,
    r_weight: &DMatrix<f64>,
    opts: &SynthesisOptions,
) -> Result<TerminalIngredients> {
    if !is_psd(q) || !is_pd(r_weight) {
        return Err(Error::Synthesis("need Q ⪰ 0 and R ≻ 0".into()));
    }
    let (a, b) = linearize(model)?;
    let (p, k) = riccati_iteration(
        &a,
        &b,
        &(q * opts.inflation),
        &(r_weight * opts.inflation),
        opts.max_iterations,
        opts.tolerance,
    )?;
    let closed = &a + &b * &k;
    if spectral_radius(&closed) >= 1.0 {
        return Err(Error::Synthesis("A + BK is not Schur".into()));
    }
    let qbar = q + k.transpose() * r_weight * &k;
    let map = EllipsoidMap::new(&p).ok_or_else(|| Error::Synthesis("P is not PD".into()))?;
    let mut rng = rng_from_seed(opts.seed);
    let unit: Vec<DVector<f64>> = (0..opts.samples)
        .map(|_| map.map(&uniform_in_ball(&mut rng, model.dim_x(), 1.0)))
        .collect();
    let passes = |radius: f64| {
        unit.iter().all(|z| {
            let x = z * radius;
            let next = model.dynamics.step(&x, &(&k * &x));
            let v = quad_form(&x, &p);
            let v_next = quad_form(&next, &p);
            let slack = 1e-12 * v.max(f64::MIN_POSITIVE);
            v_next - v <= -quad_form(&x, &qbar) + slack && v_next <= radius * radius + slack
        })
    };
    let r_max = box_limited_radius(model, &p, &k)? * (1.0 - 1e-9);
    let r = if passes(r_max) {
        r_max
    } else {
        let (mut lo, mut hi) = (0.0, r_max);
        for _ in 0..80 {
            let mid = 0.5 * (lo + hi);
            if passes(mid) {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        lo
    };
    if !(r > 0.0) {
        return Err(Error::InfeasibleTerminal(format!(
            "agent {}: every positive radius fails the sampled decrease/invariance checks",
            model.id
        )));
    }
    TerminalIngredients::new(p, k, q, r_weight, r, opts.f_ratio * r)
}

/// Outcome of the sampled terminal-region checks.
#[derive(Debug, Clone, PartialEq)]
pub struct TerminalReport {
    pub samples: usize,
    /// `Kx ∉ 𝒰`.
    pub input_violations: usize,
    /// `‖f(x, Kx)‖²_P > r²`.
    pub invariance_violations: usize,
    /// `V(f(x, Kx)) − V(x) > −‖x‖²_Q̄`.
    pub decrease_violations: usize,
    /// Worst `(V(x⁺) − V(x) + ‖x‖²_Q̄) / ‖x‖²` over the samples.
    pub worst_decrease_residual: f64,
    pub spectral_radius: f64,
    pub region_in_state_box: bool,
}

impl TerminalReport {
    pub fn sampled_checks_pass(&self) -> bool {
        self.input_violations == 0 && self.invariance_violations == 0 && self.decrease_violations == 0
    }

    pub fn is_schur(&self) -> bool {
        self.spectral_radius < 1.0
    }

    pub fn all_pass(&self) -> bool {
        self.sampled_checks_pass() && self.is_schur() && self.region_in_state_box
    }
}

/// Checks the terminal ingredients on `samples` points drawn uniformly from
/// the P-ellipsoid of radius `r`.
pub fn verify_terminal(
    model: &AgentModel,
    terminal: &TerminalIngredients,
    samples: usize,
    seed: u64,
) -> Result<TerminalReport> {
    let map = EllipsoidMap::new(&terminal.p)
        .ok_or_else(|| Error::Validation("terminal weight P is not PD".into()))?;
    let (a, b) = linearize(model)?;
    let rho = spectral_radius(&(&a + &b * &terminal.k));
    let region_in_state_box = box_limited_radius_state(model, &terminal.p)? >= terminal.r;
    let mut rng = rng_from_seed(seed);
    let r2 = terminal.r * terminal.r;
    let mut report = TerminalReport {
        samples,
        input_violations: 0,
        invariance_violations: 0,
        decrease_violations: 0,
        worst_decrease_residual: f64::NEG_INFINITY,
        spectral_radius: rho,
        region_in_state_box,
    };
    for _ in 0..samples {
        let x = map.sample(&mut rng, terminal.r);
        let u = terminal.feedback(&x);
        let next = model.step(&x, &u)?;
        let v = quad_form(&x, &terminal.p);
        let v_next = quad_form(&next, &terminal.p);
        let slack = 1e-12 * v.max(f64::MIN_POSITIVE);
        if !model.input_box.contains(&u) {
            report.input_violations += 1;
        }
        if v_next > r2 + slack {
            report.invariance_violations += 1;
        }
        let residual = v_next - v + quad_form(&x, &terminal.qbar);
        if residual > slack {
            report.decrease_violations += 1;
        }
        let scale = x.norm_squared();
        if scale > 0.0 {
            report.worst_decrease_residual = report.worst_decrease_residual.max(residual / scale);
        }
    }
    Ok(report)
}

fn box_limited_radius_state(model: &AgentModel, p: &DMatrix<f64>) -> Result<f64> {
    let p_inv = p
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Validation("P is singular".into()))?;
    let unit = ellipsoid_half_widths(&p_inv, 1.0);
    Ok(unit
        .iter()
        .enumerate()
        .map(|(c, w)| model.state_box.upper[c].min(-model.state_box.lower[c]) / w)
        .fold(f64::INFINITY, f64::min))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LipschitzReport {
    pub l_est: f64,
    pub lr_est: Option<f64>,
    pub open_ok: bool,
    pub closed_ok: bool,
}

/// Empirical Lipschitz constants of `g(x, u) = f(x, u) − x` over the state
/// and input boxes, and of `g(x, Kx)` over the terminal region when
/// `terminal` is given. Half of the pairs are local perturbations, which
/// probe the supremum better than far-apart pairs.
pub fn verify_lipschitz(
    model: &AgentModel,
    terminal: Option<&TerminalIngredients>,
    samples: usize,
    seed: u64,
) -> Result<LipschitzReport> {
    let mut rng = rng_from_seed(seed);
    let g = |x: &DVector<f64>, u: &DVector<f64>| -> Result<DVector<f64>> { Ok(model.step(x, u)? - x) };
    let widths: Vec<f64> = model
        .state_box
        .lower
        .iter()
        .zip(&model.state_box.upper)
        .map(|(l, u)| u - l)
        .collect();
    let mut l_est: f64 = 0.0;
    for i in 0..samples {
        let x1 = uniform_in_box(&mut rng, &model.state_box);
        let x2 = if i % 2 == 0 {
            uniform_in_box(&mut rng, &model.state_box)
        } else {
            let d = uniform_in_ball(&mut rng, model.dim_x(), 1e-3);
            let moved = DVector::from_fn(x1.len(), |c, _| x1[c] + d[c] * widths[c]);
            model.state_box.clamp(&moved)
        };
        let u = uniform_in_box(&mut rng, &model.input_box);
        let dx = (&x1 - &x2).norm();
        if dx > 0.0 {
            l_est = l_est.max((g(&x1, &u)? - g(&x2, &u)?).norm() / dx);
        }
    }
    let lr_est = match terminal {
        Some(t) => {
            let map = EllipsoidMap::new(&t.p)
                .ok_or_else(|| Error::Validation("terminal weight P is not PD".into()))?;
            let mut est: f64 = 0.0;
            for i in 0..samples {
                let x1 = map.sample(&mut rng, t.r);
                let x2 = if i % 2 == 0 {
                    map.sample(&mut rng, t.r)
                } else {
                    &x1 + uniform_in_ball(&mut rng, model.dim_x(), 1e-4 * t.r)
                };
                let dx = (&x1 - &x2).norm();
                if dx > 0.0 {
                    let diff = g(&x1, &t.feedback(&x1))? - g(&x2, &t.feedback(&x2))?;
                    est = est.max(diff.norm() / dx);
                }
            }
            Some(est)
        }
        None => None,
    };
    Ok(LipschitzReport {
        l_est,
        lr_est,
        open_ok: l_est <= model.lipschitz_open + 1e-9,
        closed_ok: lr_est.is_none_or(|v| v <= model.lipschitz_closed + 1e-9),
    })
}
