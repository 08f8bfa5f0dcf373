//! Brute-force re-evaluation of the bound and generator functions.
//!
//! Everything here is written from the closed-form definitions with plain
//! loops and its own eigenvalue routine; only the functions under test come
//! from the crate.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use stdmpc::bounds::{BoundContext, OptimalSolutionView};

pub const TOL: f64 = 1e-12;

pub fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= TOL * a.abs().max(b.abs()).max(1.0)
}

/// Largest eigenvalue of a symmetric PSD matrix by power iteration.
pub fn power_max_eig(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows();
    let mut v = DVector::from_fn(n, |i, _| 1.0 + 0.1 * i as f64);
    let mut lambda = 0.0;
    for _ in 0..5000 {
        let w = m * &v;
        let norm = w.norm();
        if norm == 0.0 {
            return 0.0;
        }
        let next = v.dot(&w) / v.dot(&v);
        v = w / norm;
        if (next - lambda).abs() <= 1e-15 * next.abs() {
            lambda = next;
            break;
        }
        lambda = next;
    }
    lambda
}

pub fn wnorm(x: &DVector<f64>, w: &DMatrix<f64>) -> f64 {
    let mut s = 0.0;
    for i in 0..x.len() {
        for j in 0..x.len() {
            s += x[i] * w[(i, j)] * x[j];
        }
    }
    s.max(0.0).sqrt()
}

pub struct Oracle<'a> {
    pub eta: f64,
    pub l: f64,
    pub lr: f64,
    pub n: usize,
    pub f: f64,
    pub r: f64,
    pub rho: f64,
    pub sigma: f64,
    pub lp: f64,
    pub lq: f64,
    pub lqbar: f64,
    pub sol: &'a OptimalSolutionView,
}

impl Oracle<'_> {
    pub fn gamma(&self, lam: f64, l: usize) -> f64 {
        let mut grow = 1.0;
        for _ in 0..l {
            grow *= 1.0 + self.l;
        }
        self.eta * lam / self.l * (grow - 1.0)
    }

    pub fn xi(&self, lam: f64, l: usize) -> f64 {
        self.eta * lam * (1.0 + self.l).powf(l as f64)
    }

    pub fn psi(&self, lam: f64, h: usize, l: usize) -> f64 {
        self.eta * lam * (1.0 + self.l).powf((self.n - h) as f64) * (1.0 + self.lr).powf(l as f64)
    }

    pub fn omega(&self, lam: f64, h: usize, l: usize) -> f64 {
        self.gamma(lam, h - 1) * (1.0 + self.l).powf((self.n - h + 1) as f64) * (1.0 + self.lr).powf(l as f64)
    }

    pub fn phi(&self, h: usize) -> f64 {
        self.gamma(self.lp, h) * (1.0 + self.l).powf((self.n - h) as f64)
    }

    pub fn upsilon(&self) -> f64 {
        let s = self.sol;
        let mut total = 0.0;
        for l in 0..self.n {
            let a = self.xi(self.lq, l);
            total += a * a + 2.0 * a * wnorm(&s.x_opt[1 + l], &s.q);
        }
        let b = self.xi(self.lp, self.n - 1);
        total + b * b + 2.0 * b * self.f
    }

    pub fn lambda(&self, h: usize) -> f64 {
        let s = self.sol;
        let mut l2 = 0.0;
        if self.n > h {
            for l in 0..=(self.n - h - 1) {
                let a = self.xi(self.lq, l);
                let inner = wnorm(&s.x_opt[h + l], &s.q) + self.gamma(self.lp, h - 1) * (1.0 + self.l).powf((l + 1) as f64);
                l2 += a * a + 2.0 * a * inner;
            }
        }
        let mut l3 = 0.0;
        for l in 0..=(h - 2) {
            let a = self.psi(self.lqbar, h, l);
            let inner = wnorm(&s.x_terminal_ext[l], &s.qbar) + self.omega(self.lqbar, h, l);
            l3 += a * a + 2.0 * a * inner;
        }
        let a = self.psi(self.lp, h, h - 1);
        let l4 = a * a + 2.0 * a * (wnorm(&s.x_terminal_ext[h - 1], &s.p) + self.omega(self.lp, h - 1, h - 1));
        l2 + l3 + l4
    }

    pub fn stage0(&self) -> f64 {
        let s = self.sol;
        wnorm(&s.x_opt[0], &s.q).powi(2) + wnorm(&s.u_opt[0], &s.r).powi(2)
    }

    pub fn h_one(&self) -> usize {
        if self.upsilon() > self.sigma * self.stage0() {
            1
        } else {
            self.n
        }
    }

    pub fn h_f1(&self) -> usize {
        let mut best = 1;
        for h in 1..=self.n {
            if self.phi(h) <= self.r - self.f {
                best = h;
            }
        }
        best
    }

    pub fn n_hat(&self) -> usize {
        for l in 0..self.n {
            if wnorm(&self.sol.x_opt[l], &self.sol.p).powi(2) <= self.f * self.f {
                return l;
            }
        }
        self.n
    }

    pub fn n_bar(&self, h: usize) -> usize {
        (h - 1).min(self.n - self.n_hat())
    }

    pub fn h_f2(&self, shrink: bool) -> usize {
        let mut best = 1;
        for h in 1..=self.n {
            let nb = if shrink { self.n_bar(h) } else { 0 };
            let lhs = (1.0 - self.rho).sqrt().powf((h - nb) as f64);
            if lhs <= self.f / (self.f + self.phi(h)) {
                best = h;
            }
        }
        best
    }

    pub fn h_s(&self) -> usize {
        let s = self.sol;
        let mut best = 1;
        for h in 2..=self.n {
            let theta = (wnorm(&s.x_opt[h - 1], &s.q) - self.gamma(self.lq, h - 1)).max(0.0);
            let rhs = self.sigma * (theta * theta + wnorm(&s.u_opt[h - 1], &s.r).powi(2));
            if self.lambda(h) <= rhs {
                best = h;
            }
        }
        best
    }
}

pub fn random_pd(rng: &mut ChaCha8Rng, n: usize, scales: std::ops::Range<f64>) -> DMatrix<f64> {
    let scale = rng.random_range(scales);
    let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    (&a * a.transpose()) * scale + DMatrix::identity(n, n) * (0.05 * scale)
}

pub fn random_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.random_range(-scale..scale))
}

pub struct Instance {
    pub ctx: BoundContext,
    pub sol: OptimalSolutionView,
}

pub fn instance(rng: &mut ChaCha8Rng) -> Instance {
    let nx = rng.random_range(1..=3);
    let nu = rng.random_range(1..=2);
    let n = rng.random_range(2..=6);
    let q = random_pd(rng, nx, 0.1..2.0);
    let r = random_pd(rng, nu, 0.1..2.0);
    let p = random_pd(rng, nx, 0.5..3.0);
    let k = DMatrix::from_fn(nu, nx, |_, _| rng.random_range(-1.0..1.0));
    let qbar = &q + k.transpose() * &r * &k;
    // Small states make the generators land anywhere in [1, N].
    let scale = 10f64.powf(rng.random_range(-3.0..0.0));
    let x_opt: Vec<_> = (0..=n).map(|_| random_vec(rng, nx, scale)).collect();
    let u_opt: Vec<_> = (0..n).map(|_| random_vec(rng, nu, scale)).collect();
    let mut x_ext = vec![x_opt[n].clone()];
    for _ in 1..n {
        x_ext.push(random_vec(rng, nx, scale));
    }
    let f = rng.random_range(0.01..0.2) * scale.max(0.05);
    let ctx = BoundContext {
        eta: 10f64.powf(rng.random_range(-6.0..-1.0)),
        l: rng.random_range(0.05..1.0),
        lr: rng.random_range(0.05..2.0),
        sqrt_lambda_p: power_max_eig(&p).sqrt(),
        sqrt_lambda_q: power_max_eig(&q).sqrt(),
        sqrt_lambda_qbar: power_max_eig(&qbar).sqrt(),
        n,
        f,
        r: f * rng.random_range(1.1..4.0),
        rho: rng.random_range(0.01..1.0),
        sigma: rng.random_range(0.05..0.95),
    };
    let sol = OptimalSolutionView {
        x_opt,
        u_opt,
        x_terminal_ext: x_ext,
        q,
        r,
        p,
        qbar,
    };
    Instance { ctx, sol }
}

pub fn oracle<'a>(inst: &'a Instance) -> Oracle<'a> {
    let c = &inst.ctx;
    Oracle {
        eta: c.eta,
        l: c.l,
        lr: c.lr,
        n: c.n,
        f: c.f,
        r: c.r,
        rho: c.rho,
        sigma: c.sigma,
        lp: power_max_eig(&inst.sol.p).sqrt(),
        lq: power_max_eig(&inst.sol.q).sqrt(),
        lqbar: power_max_eig(&inst.sol.qbar).sqrt(),
        sol: &inst.sol,
    }
}

