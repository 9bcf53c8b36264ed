//! The invariant suite behind `fikan verify`: parameter counts, basis
//! bounds, gradient oracles, reductions between architectures, dimension
//! oracles and finite-element sanity.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::basis::{box_dimension, fif_bases, hat_bases, required_depth, ContractionParams, UniformGrid, D_MAX};
use crate::bench::{Check, CheckStatus};
use crate::diffengine::{Tape, Tensor};
use crate::error::Result;
use crate::model::{Arch, Layer, Network, NetworkSpec};
use crate::pdesolve::fem_solve_1d;
use crate::regularize::r_fractal_var;
use crate::targets::{default_scales, estimate_box_dim, takagi, weierstrass};

/// Step for central differences.
pub const FD_STEP: f64 = 1e-5;
/// Floor for the relative-error denominator.
pub const REL_FLOOR: f64 = 1e-6;

fn check(name: &str, passed: bool, detail: String) -> Check {
    Check {
        name: name.to_string(),
        status: if passed { CheckStatus::Pass } else { CheckStatus::Fail },
        detail,
    }
}

fn failed(name: &str, e: crate::Error) -> Check {
    check(name, false, format!("error: {e}"))
}

pub fn reference_count(arch: Arch, grid: usize) -> Result<usize> {
    let mut spec = NetworkSpec::new(arch, &[1, 16, 1]);
    spec.grid_size = grid;
    Ok(Network::new(&spec, 0)?.count_params())
}

pub fn parameter_counts() -> Check {
    let want = [(Arch::Kan, 8, 416), (Arch::PureFikan, 8, 488), (Arch::HybridFikan, 8, 840), (Arch::Kan, 22, 864)];
    let got: Result<Vec<usize>> = want.iter().map(|&(a, g, _)| reference_count(a, g)).collect();
    match got {
        Ok(got) => {
            let ok = got.iter().zip(&want).all(|(g, w)| *g == w.2);
            check("parameter counts 416/488/840/864", ok, format!("{got:?}"))
        }
        Err(e) => failed("parameter counts 416/488/840/864", e),
    }
}

/// Worst Kronecker and partition-of-unity deviation relative to the
/// truncation bound `d^K / (1 − d)` with `K = required_depth(d, 1e-6)`.
/// Returns the largest `deviation − bound` seen (≤ 0 passes).
pub fn basis_bound_excess() -> Result<f64> {
    let mut worst = f64::NEG_INFINITY;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let xs: Vec<f64> = (0..256).map(|_| rng.random_range(0.0..1.0)).collect();
    for n in [2usize, 4, 8] {
        let grid = UniformGrid::new(0.0, 1.0, n)?;
        for mag in [0.0, 0.3, 0.6, 0.9] {
            let k = required_depth(mag, 1e-6)?;
            let bound = if mag == 0.0 { 0.0 } else { mag.powi(k as i32) / (1.0 - mag) };
            for pattern in [1.0, -1.0, 0.0] {
                let d: Vec<f64> = (0..n)
                    .map(|i| if pattern == 0.0 && i % 2 == 1 { -mag } else if pattern == 0.0 { mag } else { pattern * mag })
                    .collect();
                let c = ContractionParams::from_bounded(&Tensor::new(vec![1, n], d)?, D_MAX)?;
                let pts = grid.points();
                let at_grid = fif_bases(&Tensor::new(vec![pts.len(), 1], pts.clone())?, &c, &grid, k)?;
                for (i, _) in pts.iter().enumerate() {
                    for (j, v) in at_grid.row(i, 0).iter().enumerate() {
                        let dev = (v - if i == j { 1.0 } else { 0.0 }).abs();
                        worst = worst.max(dev - bound);
                    }
                }
                let inside = fif_bases(&Tensor::new(vec![xs.len(), 1], xs.clone())?, &c, &grid, k)?;
                for b in 0..xs.len() {
                    let s: f64 = inside.row(b, 0).iter().sum();
                    // One rounding per accumulated term is allowed on top
                    // of the bound.
                    let slack = 4.0 * f64::EPSILON * (2 * k + 2) as f64;
                    worst = worst.max((s - 1.0).abs() - bound - slack);
                }
            }
        }
    }
    Ok(worst)
}

pub fn basis_bounds() -> Check {
    match basis_bound_excess() {
        Ok(w) => check("Kronecker and partition-of-unity within truncation bound", w <= 0.0, format!("worst excess {w:.3e}")),
        Err(e) => failed("Kronecker and partition-of-unity within truncation bound", e),
    }
}

pub fn hat_degeneration() -> Check {
    let run = || -> Result<bool> {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut ok = true;
        for n in [2usize, 4, 8] {
            let grid = UniformGrid::new(-1.0, 1.0, n)?;
            let xs: Vec<f64> = (0..200).map(|_| rng.random_range(-1.0..1.0)).chain(grid.points()).collect();
            let m = fif_bases(&Tensor::new(vec![xs.len(), 1], xs.clone())?, &ContractionParams::zeros(1, n), &grid, 6)?;
            for (b, &x) in xs.iter().enumerate() {
                ok &= m.row(b, 0) == hat_bases(&[x], &grid).as_slice();
            }
        }
        Ok(ok)
    };
    match run() {
        Ok(ok) => check("d = 0 gives hat functions exactly", ok, String::new()),
        Err(e) => failed("d = 0 gives hat functions exactly", e),
    }
}

/// Gradient comparison for one parameter class.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientError {
    pub class: String,
    pub worst_rel: f64,
    pub compared: usize,
    /// Entries whose stencil straddled a basis breakpoint (the one-sided
    /// differences disagree); these are re-differenced at `FD_STEP / 100`.
    pub refined: usize,
}

/// Largest relative error between tape gradients and central differences,
/// per parameter class, for a randomized `[2, 4, 1]` network on 8 samples.
pub fn gradient_errors(arch: Arch, seed: u64) -> Result<Vec<GradientError>> {
    let mut spec = NetworkSpec::new(arch, &[2, 4, 1]);
    if arch.has_fractal() {
        spec.fractal_depth = 3;
    }
    let mut net = Network::new(&spec, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for p in net.params_mut() {
        for v in p.data_mut() {
            *v = rng.random_range(-0.4..0.4);
        }
    }
    let x = Tensor::new(vec![8, 2], (0..16).map(|_| rng.random_range(-0.9..0.9)).collect())?;
    let y = Tensor::new(vec![8, 1], (0..8).map(|_| rng.random_range(-1.0..1.0)).collect())?;
    let loss = |net: &Network| -> Result<f64> {
        let p = net.predict(&x)?;
        Ok(p.data().iter().zip(y.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / 8.0)
    };
    let tape = Tape::new();
    let pass = net.forward(&tape, &x, true, false)?;
    let l = pass.output.sub(&tape.constant(y.clone()))?.square()?.mean()?;
    let grads = tape.backward(&l)?;
    let analytic: Vec<Vec<f64>> = pass
        .params
        .iter()
        .map(|p| grads.get(p).map(|g| g.data().to_vec()).unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect();
    drop(pass);
    let base = loss(&net)?;
    let names = net.param_names();
    let mut out: Vec<GradientError> = Vec::new();
    for (k, name) in names.iter().enumerate() {
        let class = name.rsplit('.').next().unwrap_or(name).to_string();
        let idx = match out.iter().position(|e| e.class == class) {
            Some(i) => i,
            None => {
                out.push(GradientError { class, worst_rel: 0.0, compared: 0, refined: 0 });
                out.len() - 1
            }
        };
        for e in 0..analytic[k].len() {
            let mut at = |h: f64| -> Result<(f64, f64)> {
                let orig = net.params()[k].data()[e];
                net.params_mut()[k].data_mut()[e] = orig + h;
                let up = loss(&net)?;
                net.params_mut()[k].data_mut()[e] = orig - h;
                let down = loss(&net)?;
                net.params_mut()[k].data_mut()[e] = orig;
                Ok((up, down))
            };
            let (up, down) = at(FD_STEP)?;
            let right = (up - base) / FD_STEP;
            let left = (base - down) / FD_STEP;
            let entry = &mut out[idx];
            let mut fd = (up - down) / (2.0 * FD_STEP);
            if (right - left).abs() > 1e-4 * right.abs().max(left.abs()).max(1e-3) {
                let h = FD_STEP / 100.0;
                let (up, down) = at(h)?;
                fd = (up - down) / (2.0 * h);
                entry.refined += 1;
            }
            let g = analytic[k][e];
            let rel = (g - fd).abs() / g.abs().max(fd.abs()).max(REL_FLOOR);
            entry.worst_rel = entry.worst_rel.max(rel);
            entry.compared += 1;
        }
    }
    Ok(out)
}

pub fn gradient_oracle() -> Vec<Check> {
    Arch::ALL
        .iter()
        .map(|&arch| {
            let name = format!("{arch} gradients match central differences");
            let run = || -> Result<Vec<GradientError>> {
                let mut all = Vec::new();
                for seed in 1..=4 {
                    all.extend(gradient_errors(arch, seed)?);
                }
                Ok(all)
            };
            match run() {
                Ok(errs) => {
                    let compared: usize = errs.iter().map(|e| e.compared).sum();
                    let refined: usize = errs.iter().map(|e| e.refined).sum();
                    let worst = errs.iter().map(|e| e.worst_rel).fold(0.0, f64::max);
                    check(&name, worst < 1e-4, format!("max rel error {worst:.1e} over {compared} entries ({refined} refined at breakpoints)"))
                }
                Err(e) => failed(&name, e),
            }
        })
        .collect()
}

/// Tape gradient of the fractal regularizer with respect to bounded `d`.
pub fn regularizer_gradient(d: &[f64]) -> Result<Vec<f64>> {
    let tape = Tape::new();
    let dv = tape.param(&Tensor::new(vec![1, d.len()], d.to_vec())?);
    let r = r_fractal_var(std::slice::from_ref(&dv))?.expect("one contraction");
    Ok(tape.backward(&r)?.get(&dv).map(|g| g.data().to_vec()).unwrap_or_else(|| vec![0.0; d.len()]))
}

/// `∂R/∂d_i = 2·log_N(S)/ln N · sign(d_i)/S` for `S = Σ|d_i| > 1`, else 0.
pub fn regularizer_closed_form(d: &[f64]) -> Vec<f64> {
    let n = d.len() as f64;
    let s: f64 = d.iter().map(|v| v.abs()).sum();
    if s <= 1.0 {
        return vec![0.0; d.len()];
    }
    let delta = s.ln() / n.ln();
    d.iter().map(|v| 2.0 * delta / n.ln() * v.signum() / s).collect()
}

pub fn regularizer_check() -> Check {
    let run = || -> Result<(f64, bool)> {
        let mut worst = 0.0f64;
        for d in [vec![0.7, -0.5, 0.3, -0.9], vec![0.6; 4], vec![0.9, 0.8, -0.7], vec![-0.95, 0.2, 0.4, 0.6, -0.1, 0.3, 0.5, 0.2]] {
            let g = regularizer_gradient(&d)?;
            for (a, b) in g.iter().zip(regularizer_closed_form(&d)) {
                worst = worst.max((a - b).abs());
            }
        }
        let quiet = regularizer_gradient(&[0.2, -0.3, 0.1, 0.39])?;
        Ok((worst, quiet.iter().all(|&v| v == 0.0)))
    };
    match run() {
        Ok((w, zero)) => check(
            "regularizer gradient matches closed form",
            w <= 1e-8 && zero,
            format!("max abs error {w:.2e}, inactive region zero: {zero}"),
        ),
        Err(e) => failed("regularizer gradient matches closed form", e),
    }
}

/// Largest |Hybrid − KAN| output over `samples` inputs when the Hybrid
/// network shares the KAN weights and has zero fractal ordinates.
pub fn hybrid_kan_deviation(samples: usize, seed: u64) -> Result<f64> {
    let mut kan = Network::new(&NetworkSpec::new(Arch::Kan, &[2, 5, 1]), seed)?;
    let mut hyb = Network::new(&NetworkSpec::new(Arch::HybridFikan, &[2, 5, 1]), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in kan.params_mut() {
        for v in p.data_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
    }
    for (h, k) in hyb.layers.iter_mut().zip(&kan.layers) {
        if let (Layer::Edge(h), Layer::Edge(k)) = (h, k) {
            h.w_base = k.w_base.clone();
            h.w_scale = k.w_scale.clone();
            h.w_spline = k.w_spline.clone();
            if let Some(w) = &mut h.w_frac {
                *w = w.map(|_| 0.0);
            }
            if let Some(c) = &mut h.contraction {
                for v in c.raw.data_mut() {
                    *v = rng.random_range(-2.0..2.0);
                }
            }
        }
    }
    let x = Tensor::new(vec![samples, 2], (0..2 * samples).map(|_| rng.random_range(-1.0..1.0)).collect())?;
    let a = kan.predict(&x)?;
    let b = hyb.predict(&x)?;
    Ok(a.data().iter().zip(b.data()).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max))
}

pub fn hybrid_reduces_to_kan() -> Check {
    match hybrid_kan_deviation(1000, 17) {
        Ok(d) => check("Hybrid with zero fractal weights equals KAN", d == 0.0, format!("max deviation {d:e}")),
        Err(e) => failed("Hybrid with zero fractal weights equals KAN", e),
    }
}

/// Exact values of the fractal interpolant through `(i/N, y_i)` with
/// scalings `d` on the `N`-adic points of `levels` refinements of `[0, 1]`.
pub fn attractor_points(d: &[f64], y: &[f64], levels: usize) -> Vec<(f64, f64)> {
    let n = d.len();
    let mut pts: Vec<(f64, f64)> = (0..=n).map(|i| (i as f64 / n as f64, y[i])).collect();
    for _ in 0..levels {
        let mut next = Vec::with_capacity(pts.len() * n);
        for j in 0..n {
            for &(u, f) in &pts {
                let x = (j as f64 + u) / n as f64;
                let v = (1.0 - u) * y[j] + u * y[j + 1] + d[j] * (f - (1.0 - u) * y[0] - u * y[n]);
                next.push((x, v));
            }
        }
        next.sort_by(|a, b| a.0.total_cmp(&b.0));
        next.dedup_by(|a, b| a.0 == b.0);
        pts = next;
    }
    pts
}

/// The same interpolant at `x ∈ [0, 1]` by following the inverse maps
/// `levels` times and closing with the chord. Exact when `x` has at most
/// `levels` base-`N` digits and `N` is a power of two.
pub fn attractor_value(d: &[f64], y: &[f64], x: f64, levels: usize) -> f64 {
    let n = d.len();
    if levels == 0 {
        return y[0] + x * (y[n] - y[0]);
    }
    let j = ((x * n as f64).floor() as usize).min(n - 1);
    let u = x * n as f64 - j as f64;
    (1.0 - u) * y[j] + u * y[j + 1] + d[j] * (attractor_value(d, y, u, levels - 1) - (1.0 - u) * y[0] - u * y[n])
}

/// A `[1, 1]` Pure network whose single edge is `Σ_j y_j φ_j(·; d)` on
/// `[0, 1]` at depth `depth`.
pub fn pure_edge(d: &[f64], y: &[f64], depth: usize) -> Result<Network> {
    let n = d.len();
    let mut spec = NetworkSpec::new(Arch::PureFikan, &[1, 1]);
    spec.grid_size = n;
    spec.fractal_depth = depth;
    spec.domain = (0.0, 1.0);
    let mut net = Network::new(&spec, 0)?;
    let Layer::Edge(e) = &mut net.layers[0] else {
        unreachable!("Pure networks are edge layers")
    };
    e.w_base = e.w_base.map(|_| 0.0);
    e.w_scale = e.w_scale.map(|_| 1.0);
    e.w_frac = Some(Tensor::new(vec![1, 1, n + 1], y.to_vec())?);
    e.contraction = Some(ContractionParams::from_bounded(&Tensor::new(vec![1, n], d.to_vec())?, D_MAX)?);
    Ok(net)
}

/// Worst error of a depth-13 Pure edge on a synthetic fractal target, and
/// the truncation bound `d_max^K/(1 − d_max)·‖y‖₁`.
pub fn self_affine_error() -> Result<(f64, f64)> {
    let d = [0.9, -0.6, 0.45, 0.75];
    let y = [0.2, -0.7, 0.5, 0.1, -0.3];
    let k = 13;
    let net = pure_edge(&d, &y, k)?;
    let mut pts = attractor_points(&d, &y, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    pts.extend((0..2000).map(|_| {
        let x = (0..26).fold(0.0, |acc, _| (acc + rng.random_range(0..4) as f64) / 4.0);
        (x, attractor_value(&d, &y, x, 26))
    }));
    let x = Tensor::new(vec![pts.len(), 1], pts.iter().map(|p| p.0).collect())?;
    let pred = net.predict(&x)?;
    let err = pts.iter().zip(pred.data()).map(|(p, q)| (p.1 - q).abs()).fold(0.0, f64::max);
    let dm = d.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let bound = dm.powi(k as i32) / (1.0 - dm) * y.iter().map(|v| v.abs()).sum::<f64>();
    Ok((err, bound))
}

pub fn self_affine_representation() -> Check {
    match self_affine_error() {
        Ok((e, b)) => check("Pure edge reproduces a self-affine target", e <= b, format!("error {e:.3e}, bound {b:.3e}")),
        Err(e) => failed("Pure edge reproduces a self-affine target", e),
    }
}

pub fn box_dimension_oracles() -> Vec<Check> {
    let closed = || -> Result<(f64, f64)> {
        let a = box_dimension(&ContractionParams::zeros(1, 4))?[0];
        let b = box_dimension(&ContractionParams::uniform(1, 4, 0.5)?)?[0];
        Ok((a, b))
    };
    let mut out = vec![match closed() {
        Ok((a, b)) => check(
            "box dimension 1.0 at d = 0 and 1.5 at N = 4, d = 0.5",
            a == 1.0 && (b - 1.5).abs() < 1e-12,
            format!("{a}, {b}"),
        ),
        Err(e) => failed("box dimension closed forms", e),
    }];
    let n = 1usize << 16;
    let xs: Vec<f64> = (0..n).map(|i| i as f64 / (n - 1) as f64).collect();
    let scales = default_scales(n);
    let cases: [(&str, f64, f64, Box<dyn Fn(f64) -> f64>); 2] = [
        ("Takagi dimension 1.5 +/- 0.1", 1.5, 0.1, Box::new(|x| takagi(x, 0.5f64.sqrt(), 12))),
        ("Weierstrass dimension 1.64 +/- 0.12", 1.64, 0.12, Box::new(|x| weierstrass(x, 0.5, 7.0, 30))),
    ];
    for (name, want, tol, f) in cases {
        let ys: Vec<f64> = xs.iter().map(|&x| f(x)).collect();
        out.push(match estimate_box_dim(&xs, &ys, &scales) {
            Ok(v) => check(name, (v - want).abs() <= tol, format!("{v:.4}")),
            Err(e) => failed(name, e),
        });
    }
    out
}

/// `u(x) = log₂(1 + x) − x` solves `−((1 + x)u′)′ = 1` with zero ends.
fn smooth_exact(x: f64) -> f64 {
    (1.0 + x).ln() / std::f64::consts::LN_2 - x
}

/// L² error of the P1 solution for `a(x) = 1 + x` on `n` elements.
pub fn fem_l2_error(n: usize) -> Result<f64> {
    let h = 1.0 / n as f64;
    let a: Vec<f64> = (0..n).map(|e| 1.0 + (e as f64 + 0.5) * h).collect();
    let sol = fem_solve_1d(&a)?;
    let g = (0.6f64).sqrt();
    let nodes = [(-g, 5.0 / 9.0), (0.0, 8.0 / 9.0), (g, 5.0 / 9.0)];
    let mut acc = 0.0;
    for e in 0..n {
        let mid = (e as f64 + 0.5) * h;
        for (s, w) in nodes {
            let x = mid + 0.5 * h * s;
            acc += w * 0.5 * h * (sol.eval(x) - smooth_exact(x)).powi(2);
        }
    }
    Ok(acc.sqrt())
}

pub fn fem_checks() -> Vec<Check> {
    let nodal = || -> Result<f64> {
        let sol = fem_solve_1d(&[1.0; 64])?;
        Ok(sol.nodes.iter().zip(&sol.u).map(|(x, u)| (u - x * (1.0 - x) / 2.0).abs()).fold(0.0, f64::max))
    };
    let slope = || -> Result<f64> {
        let pts: Vec<(f64, f64)> = [16usize, 32, 64, 128, 256]
            .iter()
            .map(|&n| fem_l2_error(n).map(|e| ((1.0 / n as f64).ln(), e.ln())))
            .collect::<Result<_>>()?;
        let m = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / m;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / m;
        Ok(pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>() / pts.iter().map(|p| (p.0 - mx).powi(2)).sum::<f64>())
    };
    vec![
        match nodal() {
            Ok(e) => check("FEM with a = 1 is nodally exact", e < 1e-12, format!("max nodal error {e:.2e}")),
            Err(e) => failed("FEM with a = 1 is nodally exact", e),
        },
        match slope() {
            Ok(s) => check("FEM L2 convergence slope 2 +/- 0.2", (s - 2.0).abs() <= 0.2, format!("{s:.4}")),
            Err(e) => failed("FEM L2 convergence slope 2 +/- 0.2", e),
        },
    ]
}

/// Every check, in a fixed order.
pub fn run_all() -> Vec<Check> {
    let mut out = vec![parameter_counts(), basis_bounds(), hat_degeneration()];
    out.extend(gradient_oracle());
    out.push(regularizer_check());
    out.push(hybrid_reduces_to_kan());
    out.push(self_affine_representation());
    out.extend(box_dimension_oracles());
    out.extend(fem_checks());
    out
}
