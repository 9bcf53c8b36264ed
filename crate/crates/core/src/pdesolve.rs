//! Reference solutions for the non-smooth PDE regression suite.

use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::rng::{stream, Stream};
use crate::targets::fbm_path;

/// P1 finite-element solution on a uniform mesh of `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FemSolution1D {
    pub nodes: Vec<f64>,
    pub u: Vec<f64>,
    /// Coefficient at element midpoints.
    pub coefficient: Vec<f64>,
}

impl FemSolution1D {
    /// P1 interpolation; `x` is clamped to `[0, 1]`.
    pub fn eval(&self, x: f64) -> f64 {
        let n = self.u.len() - 1;
        let s = x.clamp(0.0, 1.0) * n as f64;
        let e = (s.floor() as usize).min(n - 1);
        let f = s - e as f64;
        self.u[e] * (1.0 - f) + self.u[e + 1] * f
    }

    pub fn elements(&self) -> usize {
        self.coefficient.len()
    }
}

/// Interior stiffness matrix of `−(a u′)′` as (diagonal, off-diagonal).
pub fn stiffness(a_mid: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = a_mid.len();
    let h = 1.0 / n as f64;
    let diag = (1..n).map(|i| (a_mid[i - 1] + a_mid[i]) / h).collect();
    let off = (1..n - 1).map(|i| -a_mid[i] / h).collect();
    (diag, off)
}

/// `uᵀKu` for interior nodal values `u`.
pub fn energy(a_mid: &[f64], u: &[f64]) -> f64 {
    let (d, o) = stiffness(a_mid);
    let mut e: f64 = d.iter().zip(u).map(|(d, u)| d * u * u).sum();
    for i in 0..o.len() {
        e += 2.0 * o[i] * u[i] * u[i + 1];
    }
    e
}

/// Symmetric tridiagonal solve; `off[i]` couples rows `i` and `i + 1`.
fn thomas(diag: &[f64], off: &[f64], rhs: &[f64]) -> Result<Vec<f64>> {
    let n = diag.len();
    let mut c = vec![0.0; n];
    let mut d = vec![0.0; n];
    let mut denom = diag[0];
    for i in 0..n {
        if i > 0 {
            denom = diag[i] - off[i - 1] * c[i - 1];
        }
        if denom.abs() < f64::MIN_POSITIVE || !denom.is_finite() {
            return Err(invalid("singular stiffness matrix"));
        }
        if i + 1 < n {
            c[i] = off[i] / denom;
        }
        d[i] = (rhs[i] - if i > 0 { off[i - 1] * d[i - 1] } else { 0.0 }) / denom;
    }
    for i in (0..n.saturating_sub(1)).rev() {
        d[i] -= c[i] * d[i + 1];
    }
    Ok(d)
}

/// Solves `−(a u′)′ = 1`, `u(0) = u(1) = 0` with P1 elements, given the
/// coefficient at each element midpoint.
pub fn fem_solve_1d(a_mid: &[f64]) -> Result<FemSolution1D> {
    let n = a_mid.len();
    if n < 2 {
        return Err(invalid("need at least 2 elements"));
    }
    if a_mid.iter().any(|&a| !(a > 0.0 && a.is_finite())) {
        return Err(Error::Domain("diffusion coefficient must be positive".into()));
    }
    let h = 1.0 / n as f64;
    let (diag, off) = stiffness(a_mid);
    let interior = thomas(&diag, &off, &vec![h; n - 1])?;
    let mut u = Vec::with_capacity(n + 1);
    u.push(0.0);
    u.extend(interior);
    u.push(0.0);
    Ok(FemSolution1D {
        nodes: (0..=n).map(|i| i as f64 * h).collect(),
        u,
        coefficient: a_mid.to_vec(),
    })
}

/// Rough-coefficient diffusion with `a(x) = exp(B_H(x) / 2)`. The fBm
/// path is drawn on the smallest dyadic grid with at least two points per
/// element and interpolated linearly to element midpoints.
pub fn fem_diffusion_1d(h_c: f64, n_elems: usize, seed: u64) -> Result<FemSolution1D> {
    if n_elems < 2 {
        return Err(invalid("need at least 2 elements"));
    }
    let m = (2 * n_elems).next_power_of_two();
    let path = fbm_path(h_c, m + 1, seed)?;
    let a_mid: Vec<f64> = (0..n_elems)
        .map(|e| {
            let s = (e as f64 + 0.5) / n_elems as f64 * m as f64;
            let i = (s.floor() as usize).min(m - 1);
            let f = s - i as f64;
            (0.5 * (path[i] * (1.0 - f) + path[i + 1] * f)).exp()
        })
        .collect();
    fem_solve_1d(&a_mid)
}

/// Real Fourier amplitudes `(a_k, b_k)` for `k = 1..=M` evolved to time `t`:
/// each coefficient is an Ornstein–Uhlenbeck process with decay `ν(2πk)²`
/// and noise intensity `σ`, sampled exactly.
pub fn evolve_modes(initial: &[[f64; 2]], nu: f64, sigma: f64, t: f64, rng: &mut ChaCha8Rng) -> Vec<[f64; 2]> {
    initial
        .iter()
        .enumerate()
        .map(|(i, ab)| {
            let k = (i + 1) as f64;
            let rate = nu * (2.0 * PI * k).powi(2);
            let decay = (-rate * t).exp();
            let sd = sigma * ((1.0 - (-2.0 * rate * t).exp()) / (2.0 * rate)).sqrt();
            let mut draw = || if sigma == 0.0 { 0.0 } else { sd * rng.sample::<f64, _>(StandardNormal) };
            let a = ab[0] * decay + draw();
            let b = ab[1] * decay + draw();
            [a, b]
        })
        .collect()
}

/// Snapshot of `du = ν u_xx dt + σ dW` on the periodic unit interval.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectralHeatSnapshot {
    /// Complex amplitudes `c_k = (a_k − i b_k)/2`, `k = 1..=M`, as
    /// `[re, im]`; `c_{-k}` is the conjugate.
    pub modes: Vec<[f64; 2]>,
    pub nu: f64,
    pub sigma: f64,
    pub t_final: f64,
    pub x: Vec<f64>,
    pub u: Vec<f64>,
}

impl SpectralHeatSnapshot {
    /// Sum over `k = ±1..±M` of `c_k e^{2πikx}` as `(re, im)`.
    pub fn synthesize(&self, x: f64) -> (f64, f64) {
        let (mut re, mut im) = (0.0, 0.0);
        for (i, c) in self.modes.iter().enumerate() {
            let th = 2.0 * PI * (i + 1) as f64 * x;
            let (s, co) = th.sin_cos();
            for (cr, ci, sn) in [(c[0], c[1], s), (c[0], -c[1], -s)] {
                re += cr * co - ci * sn;
                im += cr * sn + ci * co;
            }
        }
        (re, im)
    }

    pub fn eval(&self, x: f64) -> f64 {
        self.synthesize(x).0
    }

    pub fn max_imag_residue(&self) -> f64 {
        self.x.iter().map(|&x| self.synthesize(x).1.abs()).fold(0.0, f64::max)
    }
}

/// Zero initial data evolved to `t_final`, sampled at `grid` equally
/// spaced points of `[0, 1)` (none when `grid = 0`). The mean mode
/// `k = 0` is held at zero.
pub fn stochastic_heat_snapshot(
    nu: f64,
    sigma: f64,
    m: usize,
    t_final: f64,
    seed: u64,
    grid: usize,
) -> Result<SpectralHeatSnapshot> {
    if m < 1 || !(nu > 0.0) || !(sigma >= 0.0) || !(t_final >= 0.0) {
        return Err(invalid("heat snapshot needs M ≥ 1, ν > 0, σ ≥ 0, t ≥ 0"));
    }
    let mut rng = stream(seed, Stream::Heat);
    let ab = evolve_modes(&vec![[0.0, 0.0]; m], nu, sigma, t_final, &mut rng);
    from_real_modes(&ab, nu, sigma, t_final, grid)
}

pub fn from_real_modes(ab: &[[f64; 2]], nu: f64, sigma: f64, t_final: f64, grid: usize) -> Result<SpectralHeatSnapshot> {
    let mut snap = SpectralHeatSnapshot {
        modes: ab.iter().map(|[a, b]| [0.5 * a, -0.5 * b]).collect(),
        nu,
        sigma,
        t_final,
        x: (0..grid).map(|i| i as f64 / grid as f64).collect(),
        u: Vec::new(),
    };
    snap.u = snap.x.iter().map(|&x| snap.eval(x)).collect();
    Ok(snap)
}

/// `r^{2/3} sin(2θ/3)` with `θ ∈ [0, 3π/2]` measured counter-clockwise
/// from the positive x-axis, on `[-1, 1]² \ ((0, 1] × [-1, 0))`.
pub fn corner_singularity(x: f64, y: f64) -> Result<f64> {
    if !(x.abs() <= 1.0 && y.abs() <= 1.0) || (x > 0.0 && y < 0.0) {
        return Err(Error::Domain(format!("({x}, {y}) outside the L-shaped domain")));
    }
    let r = x.hypot(y);
    if r == 0.0 {
        return Ok(0.0);
    }
    let mut th = y.atan2(x);
    if th < 0.0 {
        th += 2.0 * PI;
    }
    Ok(r.powf(2.0 / 3.0) * (2.0 * th / 3.0).sin())
}
