//! Self-triggered interval generator and prediction-horizon shrinkage.

use serde::{Deserialize, Serialize};

use crate::bounds::{BoundContext, OptimalSolutionView};
use crate::error::Result;
use crate::linalg::quad_form;

/// Which parts of the scheme are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Solve every step, fixed horizon.
    Dmpc,
    /// Solve every step, shrinking horizon.
    HDmpc,
    /// Self-triggered, fixed horizon.
    StDmpc,
    /// Self-triggered, shrinking horizon.
    StHDmpc,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Dmpc, Variant::HDmpc, Variant::StDmpc, Variant::StHDmpc];

    pub fn self_triggered(self) -> bool {
        matches!(self, Variant::StDmpc | Variant::StHDmpc)
    }

    pub fn shrinks_horizon(self) -> bool {
        matches!(self, Variant::HDmpc | Variant::StHDmpc)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Dmpc => "dmpc",
            Variant::HDmpc => "h-dmpc",
            Variant::StDmpc => "st-dmpc",
            Variant::StHDmpc => "st-h-dmpc",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Variant::Dmpc => "DMPC",
            Variant::HDmpc => "H-DMPC",
            Variant::StDmpc => "ST-DMPC",
            Variant::StHDmpc => "ST-H-DMPC",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown variant `{s}` (expected dmpc, h-dmpc, st-dmpc or st-h-dmpc)"))
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Components {
    pub h_one: usize,
    pub h_f1: usize,
    pub h_f2: usize,
    pub h_s: usize,
}

impl Components {
    pub fn min(&self) -> usize {
        self.h_one.min(self.h_f1).min(self.h_f2).min(self.h_s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TriggerDecision {
    pub h: usize,
    pub components: Components,
    /// Horizon of the problem just solved.
    pub n: usize,
    pub n_next: usize,
    pub n_bar: usize,
    pub n_hat: usize,
    pub upsilon: f64,
    /// `Λ(H)` when `H ≥ 2`.
    pub lambda: Option<f64>,
    /// Right-hand side of the stability test at the chosen `H`.
    pub stability_rhs: f64,
}

impl TriggerDecision {
    /// Whether the chosen interval satisfies its cost-decrease test
    /// (`Λ(H)` for `H ≥ 2`, `Υ` for `H = 1`).
    pub fn stability_holds(&self) -> bool {
        match self.lambda {
            Some(l) => l <= self.stability_rhs,
            None => self.upsilon <= self.stability_rhs,
        }
    }
}

fn first_stage(sol: &OptimalSolutionView) -> f64 {
    quad_form(&sol.x_opt[0], &sol.q) + quad_form(&sol.u_opt[0], &sol.r)
}

/// 1 when the single-step cost increment bound exceeds the σ-scaled first
/// stage cost, else `N`.
pub fn h_one(ctx: &BoundContext, sol: &OptimalSolutionView) -> usize {
    if ctx.upsilon(sol) > ctx.sigma * first_stage(sol) {
        1
    } else {
        ctx.n
    }
}

/// Largest `H` with `Φ(H) ≤ r − f`, at least 1.
pub fn h_f1(ctx: &BoundContext) -> usize {
    (1..=ctx.n)
        .filter(|&h| ctx.phi(h).is_ok_and(|p| p <= ctx.r - ctx.f))
        .max()
        .unwrap_or(1)
}

/// Largest `H` with `√(1−ρ)^{H−N̄(H)} ≤ f / (f + Φ(H))`, at least 1.
pub fn h_f2(ctx: &BoundContext, sol: &OptimalSolutionView, shrink: bool) -> usize {
    let base = (1.0 - ctx.rho).max(0.0).sqrt();
    (1..=ctx.n)
        .filter(|&h| {
            let n_bar = if shrink { shrinkage(ctx, sol, h).0 } else { 0 };
            let phi = ctx.phi(h).expect("h ≤ N");
            base.powi((h - n_bar) as i32) <= ctx.f / (ctx.f + phi)
        })
        .max()
        .unwrap_or(1)
}

fn stability_rhs(ctx: &BoundContext, sol: &OptimalSolutionView, h: usize) -> f64 {
    let theta = ctx.theta(sol, h - 1);
    ctx.sigma * (theta * theta + quad_form(&sol.u_opt[h - 1], &sol.r))
}

/// Largest `H ∈ [2, N]` with `Λ(H) ≤ σ(Θ_Q(H−1)² + ‖u*_{H−1}‖²_R)`, else 1.
pub fn h_s(ctx: &BoundContext, sol: &OptimalSolutionView) -> Result<usize> {
    let mut best = 1;
    for h in 2..=ctx.n {
        if ctx.lambda_total(sol, h)? <= stability_rhs(ctx, sol, h) {
            best = h;
        }
    }
    Ok(best)
}

/// `(N̄, N̂)`: `N̂` is the first plan index inside the terminal set (`N` if
/// none before the end) and `N̄ = min(H − 1, N − N̂)`.
pub fn shrinkage(ctx: &BoundContext, sol: &OptimalSolutionView, h: usize) -> (usize, usize) {
    let n = ctx.n;
    let f2 = ctx.f * ctx.f;
    let n_hat = (0..n)
        .find(|&l| quad_form(&sol.x_opt[l], &sol.p) <= f2)
        .unwrap_or(n);
    (h.saturating_sub(1).min(n - n_hat), n_hat)
}

pub fn decide(ctx: &BoundContext, sol: &OptimalSolutionView, variant: Variant) -> Result<TriggerDecision> {
    let components = Components {
        h_one: h_one(ctx, sol),
        h_f1: h_f1(ctx),
        h_f2: h_f2(ctx, sol, variant.shrinks_horizon()),
        h_s: h_s(ctx, sol)?,
    };
    let h = if variant.self_triggered() {
        components.min()
    } else {
        1
    };
    let (shrink, n_hat) = shrinkage(ctx, sol, h);
    let n_bar = if variant.shrinks_horizon() { shrink } else { 0 };
    let n_next = if ctx.n - n_bar >= 1 {
        ctx.n - n_bar
    } else {
        log::warn!("horizon shrinkage would reach 0; clamping to 1");
        1
    };
    let (lambda, stability_rhs) = if h >= 2 {
        (Some(ctx.lambda_total(sol, h)?), stability_rhs(ctx, sol, h))
    } else {
        (None, ctx.sigma * first_stage(sol))
    };
    Ok(TriggerDecision {
        h,
        components,
        n: ctx.n,
        n_next,
        n_bar,
        n_hat,
        upsilon: ctx.upsilon(sol),
        lambda,
        stability_rhs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};

    fn ctx(n: usize) -> BoundContext {
        BoundContext {
            eta: 0.1,
            l: 0.5,
            lr: 0.8,
            sqrt_lambda_p: 1.0,
            sqrt_lambda_q: 1.0,
            sqrt_lambda_qbar: 1.0,
            n,
            f: 0.5,
            r: 1.5,
            rho: 0.3,
            sigma: 0.9,
        }
    }

    fn view(x: &[f64], u: &[f64]) -> OptimalSolutionView {
        let v = |s: &[f64]| s.iter().map(|a| DVector::from_element(1, *a)).collect::<Vec<_>>();
        let one = DMatrix::from_element(1, 1, 1.0);
        OptimalSolutionView {
            x_opt: v(x),
            u_opt: v(u),
            x_terminal_ext: v(&vec![x[x.len() - 1]; u.len()]),
            q: one.clone(),
            r: one.clone(),
            p: one.clone(),
            qbar: one,
        }
    }

    #[test]
    fn h_f1_scan() {
        // Φ(1) = 0.50625, Φ(2) = 0.84375, Φ(3) = 1.06875 against r − f = 1.
        assert_eq!(h_f1(&ctx(5)), 2);
        let free = BoundContext { eta: 0.0, ..ctx(5) };
        assert_eq!(h_f1(&free), 5);
        let tight = BoundContext { r: 0.9, ..ctx(5) };
        assert_eq!(h_f1(&tight), 1);
    }

    #[test]
    fn h_one_cases() {
        let free = BoundContext { eta: 0.0, ..ctx(3) };
        let sol = view(&[1.0, 0.5, 0.2, 0.0], &[0.1, 0.1, 0.1]);
        assert_eq!(h_one(&free, &sol), 3);
        let at_origin = view(&[0.0, 0.0, 0.0, 0.0], &[0.0, 0.0, 0.0]);
        assert_eq!(h_one(&ctx(3), &at_origin), 1);
    }

    #[test]
    fn h_f2_disturbance_free() {
        let c = BoundContext { eta: 0.0, rho: 1.0, ..ctx(4) };
        let sol = view(&[1.0, 0.8, 0.6, 0.4, 0.2], &[0.0; 4]);
        assert_eq!(h_f2(&c, &sol, true), 4);
    }

    #[test]
    fn h_s_cases() {
        let c = BoundContext { eta: 0.0, ..ctx(4) };
        let sol = view(&[1.0, 0.8, 0.6, 0.4, 0.2], &[0.1; 4]);
        assert_eq!(h_s(&c, &sol).unwrap(), 4);
        let idle = view(&[1.0, 0.0, 0.0, 0.0, 0.0], &[0.3, 0.0, 0.0, 0.0]);
        assert_eq!(h_s(&ctx(4), &idle).unwrap(), 1);
    }

    #[test]
    fn shrinkage_cases() {
        let c = BoundContext { f: 0.1, ..ctx(10) };
        let x: Vec<f64> = (0..=10).map(|l| if l < 6 { 1.0 } else { 0.05 }).collect();
        let sol = view(&x, &[0.0; 10]);
        assert_eq!(shrinkage(&c, &sol, 4), (3, 6));
        assert_eq!(shrinkage(&c, &sol, 1), (0, 6));
        let inside = view(&[0.0; 11], &[0.0; 10]);
        assert_eq!(shrinkage(&c, &inside, 4), (3, 0));
        let never = view(&[1.0; 11], &[0.0; 10]);
        assert_eq!(shrinkage(&c, &never, 4), (0, 10));
    }

    #[test]
    fn decide_takes_minimum() {
        let c = BoundContext { eta: 0.0, rho: 1.0, ..ctx(4) };
        let sol = view(&[1.0, 0.8, 0.6, 0.4, 0.2], &[0.1; 4]);
        let d = decide(&c, &sol, Variant::StHDmpc).unwrap();
        assert_eq!(d.components, Components { h_one: 4, h_f1: 4, h_f2: 4, h_s: 4 });
        assert_eq!(d.h, 4);
        let dm = decide(&c, &sol, Variant::Dmpc).unwrap();
        assert_eq!((dm.h, dm.n_next, dm.n_bar), (1, 4, 0));
    }

    #[test]
    fn variant_parsing_round_trips() {
        for v in Variant::ALL {
            assert_eq!(v.as_str().parse::<Variant>().unwrap(), v);
        }
        assert!("mpc".parse::<Variant>().is_err());
    }
}
