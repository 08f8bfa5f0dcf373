//! Closed-form error bounds and trigger thresholds.
//!
//! `Γ` bounds the nominal-vs-true divergence after `l` open-loop steps, `Ξ`,
//! `Ψ`, `Ω` are the building blocks of the stability thresholds, `Φ` bounds
//! the terminal-state deviation of the shifted plan, and `Υ` / `Λ` are the
//! worst-case cost increments for single- and multi-step intervals.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{sqrt_max_eigenvalue, weighted_norm};
use crate::model::{AgentModel, TerminalIngredients};

/// Which weight a bound is measured in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Weight {
    P,
    Q,
    Qbar,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundContext {
    pub eta: f64,
    pub l: f64,
    pub lr: f64,
    pub sqrt_lambda_p: f64,
    pub sqrt_lambda_q: f64,
    pub sqrt_lambda_qbar: f64,
    /// Current prediction horizon.
    pub n: usize,
    pub f: f64,
    pub r: f64,
    pub rho: f64,
    pub sigma: f64,
}

impl BoundContext {
    pub fn new(
        model: &AgentModel,
        terminal: &TerminalIngredients,
        q: &DMatrix<f64>,
        sigma: f64,
        n: usize,
    ) -> Result<Self> {
        if !(sigma > 0.0 && sigma < 1.0) {
            return Err(Error::Domain(format!("sigma = {sigma} is outside (0, 1)")));
        }
        Ok(Self {
            eta: model.eta,
            l: model.lipschitz_open,
            lr: model.lipschitz_closed,
            sqrt_lambda_p: sqrt_max_eigenvalue(&terminal.p),
            sqrt_lambda_q: sqrt_max_eigenvalue(q),
            sqrt_lambda_qbar: sqrt_max_eigenvalue(&terminal.qbar),
            n,
            f: terminal.f,
            r: terminal.r,
            rho: terminal.rho,
            sigma,
        })
    }

    pub fn with_horizon(&self, n: usize) -> Self {
        Self { n, ..self.clone() }
    }

    pub fn sqrt_lambda(&self, w: Weight) -> f64 {
        match w {
            Weight::P => self.sqrt_lambda_p,
            Weight::Q => self.sqrt_lambda_q,
            Weight::Qbar => self.sqrt_lambda_qbar,
        }
    }

    fn check_h(&self, h: usize) -> Result<()> {
        if h > self.n {
            Err(Error::Domain(format!("H = {h} exceeds the horizon N = {}", self.n)))
        } else {
            Ok(())
        }
    }

    /// `Γ_w(l) = η λ̄(√w) / L · ((1+L)^l − 1)`.
    pub fn gamma(&self, w: Weight, l: usize) -> f64 {
        self.eta * self.sqrt_lambda(w) / self.l * (pow(1.0 + self.l, l) - 1.0)
    }

    /// `l η λ̄(√w) (1+L)^{l−1}`, an upper bound on `Γ_w(l)`.
    pub fn gamma_linear_bound(&self, w: Weight, l: usize) -> f64 {
        if l == 0 {
            return 0.0;
        }
        l as f64 * self.eta * self.sqrt_lambda(w) * pow(1.0 + self.l, l - 1)
    }

    /// `Ξ_w(l) = η λ̄(√w) (1+L)^l`.
    pub fn xi(&self, w: Weight, l: usize) -> f64 {
        self.eta * self.sqrt_lambda(w) * pow(1.0 + self.l, l)
    }

    /// `Ψ_w(H, l) = η λ̄(√w) (1+L)^{N−H} (1+L_r)^l`.
    pub fn psi(&self, w: Weight, h: usize, l: usize) -> Result<f64> {
        self.check_h(h)?;
        Ok(self.eta * self.sqrt_lambda(w) * pow(1.0 + self.l, self.n - h) * pow(1.0 + self.lr, l))
    }

    /// `Ω_w(H, l) = Γ_w(H−1) (1+L)^{N−H+1} (1+L_r)^l`.
    pub fn omega(&self, w: Weight, h: usize, l: usize) -> Result<f64> {
        self.check_h(h)?;
        if h == 0 {
            return Err(Error::Domain("Ω needs H ≥ 1".into()));
        }
        Ok(self.gamma(w, h - 1) * pow(1.0 + self.l, self.n - h + 1) * pow(1.0 + self.lr, l))
    }

    /// `Φ_P(H) = Γ_P(H) (1+L)^{N−H}`.
    pub fn phi(&self, h: usize) -> Result<f64> {
        self.check_h(h)?;
        Ok(self.gamma(Weight::P, h) * pow(1.0 + self.l, self.n - h))
    }

    /// `Θ_Q(l) = max(‖x*_l‖_Q − Γ_Q(l), 0)`.
    pub fn theta(&self, sol: &OptimalSolutionView, l: usize) -> f64 {
        (weighted_norm(&sol.x_opt[l], &sol.q) - self.gamma(Weight::Q, l)).max(0.0)
    }

    /// Worst-case cost increment over a single-step interval.
    pub fn upsilon(&self, sol: &OptimalSolutionView) -> f64 {
        let n = self.n;
        let mut total = 0.0;
        for l in 0..n {
            let xi = self.xi(Weight::Q, l);
            total += xi * xi + 2.0 * xi * weighted_norm(&sol.x_opt[l + 1], &sol.q);
        }
        let xi_p = self.xi(Weight::P, n.saturating_sub(1));
        total + xi_p * xi_p + 2.0 * xi_p * self.f
    }

    fn check_lambda(&self, sol: &OptimalSolutionView, h: usize) -> Result<()> {
        if h < 2 {
            return Err(Error::Domain(format!("Λ is defined for H ≥ 2 (got {h})")));
        }
        self.check_h(h)?;
        if sol.x_terminal_ext.len() < h {
            return Err(Error::Domain(format!(
                "terminal extension has {} states, Λ({h}) needs {h}",
                sol.x_terminal_ext.len()
            )));
        }
        Ok(())
    }

    pub fn lambda2(&self, sol: &OptimalSolutionView, h: usize) -> Result<f64> {
        self.check_lambda(sol, h)?;
        let g = self.gamma(Weight::P, h - 1);
        let mut total = 0.0;
        for l in 0..self.n - h {
            let xi = self.xi(Weight::Q, l);
            let inner = weighted_norm(&sol.x_opt[h + l], &sol.q) + g * pow(1.0 + self.l, l + 1);
            total += xi * xi + 2.0 * xi * inner;
        }
        Ok(total)
    }

    pub fn lambda3(&self, sol: &OptimalSolutionView, h: usize) -> Result<f64> {
        self.check_lambda(sol, h)?;
        let mut total = 0.0;
        for l in 0..h - 1 {
            let psi = self.psi(Weight::Qbar, h, l)?;
            let inner = weighted_norm(&sol.x_terminal_ext[l], &sol.qbar)
                + self.omega(Weight::Qbar, h, l)?;
            total += psi * psi + 2.0 * psi * inner;
        }
        Ok(total)
    }

    pub fn lambda4(&self, sol: &OptimalSolutionView, h: usize) -> Result<f64> {
        self.check_lambda(sol, h)?;
        let psi = self.psi(Weight::P, h, h - 1)?;
        let inner = weighted_norm(&sol.x_terminal_ext[h - 1], &sol.p)
            + self.omega(Weight::P, h - 1, h - 1)?;
        Ok(psi * psi + 2.0 * psi * inner)
    }

    /// Worst-case cost increment over an `H`-step interval, `H ≥ 2`.
    pub fn lambda_total(&self, sol: &OptimalSolutionView, h: usize) -> Result<f64> {
        Ok(self.lambda2(sol, h)? + self.lambda3(sol, h)? + self.lambda4(sol, h)?)
    }
}

fn pow(base: f64, exp: usize) -> f64 {
    base.powi(exp as i32)
}

/// The optimal plan at a trigger instant together with its closed-loop
/// continuation past the horizon and the weights used to measure it.
#[derive(Debug, Clone)]
pub struct OptimalSolutionView {
    /// `x*_0 .. x*_N`.
    pub x_opt: Vec<DVector<f64>>,
    /// `u*_0 .. u*_{N−1}`.
    pub u_opt: Vec<DVector<f64>>,
    /// `x^r_0 = x*_N`, `x^r_{l+1} = f(x^r_l, K x^r_l)`.
    pub x_terminal_ext: Vec<DVector<f64>>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub p: DMatrix<f64>,
    pub qbar: DMatrix<f64>,
}

impl OptimalSolutionView {
    /// Builds the view and rolls the terminal extension `ext_len` states
    /// forward under the terminal feedback.
    pub fn new(
        model: &AgentModel,
        terminal: &TerminalIngredients,
        q: &DMatrix<f64>,
        r: &DMatrix<f64>,
        x_opt: Vec<DVector<f64>>,
        u_opt: Vec<DVector<f64>>,
        ext_len: usize,
    ) -> Result<Self> {
        let x_terminal_ext = terminal_extension(model, terminal, x_opt.last().expect("x_opt"), ext_len)?;
        Ok(Self {
            x_opt,
            u_opt,
            x_terminal_ext,
            q: q.clone(),
            r: r.clone(),
            p: terminal.p.clone(),
            qbar: terminal.qbar.clone(),
        })
    }

    pub fn horizon(&self) -> usize {
        self.u_opt.len()
    }
}

/// `len` states of the nominal closed loop under `u = Kx`, starting at `x`.
pub fn terminal_extension(
    model: &AgentModel,
    terminal: &TerminalIngredients,
    x: &DVector<f64>,
    len: usize,
) -> Result<Vec<DVector<f64>>> {
    let mut out = Vec::with_capacity(len);
    let mut cur = x.clone();
    for i in 0..len {
        if i > 0 {
            cur = model.step(&cur, &terminal.feedback(&cur))?;
        }
        out.push(cur.clone());
    }
    Ok(out)
}
