//! Fractal interpolation bases, B-spline bases and the box-counting
//! dimension of the contraction vector.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::diffengine::{CustomOp, Tensor, Var};
use crate::error::{invalid, Error, Result};

pub const D_MAX: f64 = 0.99;

/// Unconstrained contraction parameters, one row of `N` values per input
/// feature. The bounded image is `d = d_max · tanh(raw)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContractionParams {
    pub raw: Tensor,
    pub d_max: f64,
}

impl ContractionParams {
    pub fn zeros(features: usize, intervals: usize) -> Self {
        Self {
            raw: Tensor::zeros(&[features, intervals]),
            d_max: D_MAX,
        }
    }

    /// Inverts the reparameterization. Every entry must satisfy `|d| < d_max`.
    pub fn from_bounded(d: &Tensor, d_max: f64) -> Result<Self> {
        if d.shape().len() != 2 {
            return Err(invalid("contraction tensor must be [features, intervals]"));
        }
        if !(d_max > 0.0 && d_max < 1.0) {
            return Err(invalid(format!("d_max must lie in (0, 1), got {d_max}")));
        }
        if let Some(v) = d.data().iter().find(|v| !(v.abs() < d_max)) {
            return Err(invalid(format!("contraction {v} outside (-{d_max}, {d_max})")));
        }
        Ok(Self {
            raw: d.map(|v| (v / d_max).atanh()),
            d_max,
        })
    }

    /// Uniform contraction `d` for every interval of every feature.
    pub fn uniform(features: usize, intervals: usize, d: f64) -> Result<Self> {
        Self::from_bounded(&Tensor::full(&[features, intervals], d), D_MAX)
    }

    pub fn features(&self) -> usize {
        self.raw.shape()[0]
    }

    pub fn intervals(&self) -> usize {
        self.raw.shape()[1]
    }

    pub fn bounded(&self) -> Tensor {
        let d_max = self.d_max;
        self.raw.map(|r| d_max * r.tanh())
    }
}

/// Bounded contractions on a tape, `d_max · tanh(raw)`.
pub fn bounded_var<'t>(raw: &Var<'t>, d_max: f64) -> Result<Var<'t>> {
    Ok(raw.tanh()?.scale(d_max)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UniformGrid {
    pub a: f64,
    pub b: f64,
    pub n: usize,
    pub clamp_eps: f64,
}

impl UniformGrid {
    pub fn new(a: f64, b: f64, n: usize) -> Result<Self> {
        if !(a < b) || !a.is_finite() || !b.is_finite() {
            return Err(invalid(format!("grid needs finite a < b, got [{a}, {b}]")));
        }
        if n == 0 {
            return Err(invalid("grid needs at least one interval"));
        }
        Ok(Self {
            a,
            b,
            n,
            clamp_eps: 0.0,
        })
    }

    pub fn with_clamp_eps(mut self, eps: f64) -> Result<Self> {
        if !(0.0..0.5).contains(&eps) {
            return Err(invalid(format!("clamp_eps must lie in [0, 0.5), got {eps}")));
        }
        self.clamp_eps = eps;
        Ok(self)
    }

    pub fn spacing(&self) -> f64 {
        (self.b - self.a) / self.n as f64
    }

    pub fn point(&self, i: usize) -> f64 {
        self.a + i as f64 * (self.b - self.a) / self.n as f64
    }

    pub fn points(&self) -> Vec<f64> {
        (0..=self.n).map(|i| self.point(i)).collect()
    }

    fn normalize(&self, x: f64) -> f64 {
        ((x - self.a) * (1.0 / (self.b - self.a))).clamp(self.clamp_eps, 1.0 - self.clamp_eps)
    }
}

/// Basis values laid out `[batch, features, N + 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FifBasisMatrix {
    pub values: Tensor,
}

/// Basis values laid out `[batch, features, G + k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct BsplineBasisMatrix {
    pub values: Tensor,
    pub order: usize,
    pub grid_size: usize,
}

fn row<'a>(values: &'a Tensor, b: usize, f: usize) -> &'a [f64] {
    let s = values.shape();
    let w = s[2];
    let start = (b * s[1] + f) * w;
    &values.data()[start..start + w]
}

impl FifBasisMatrix {
    pub fn row(&self, sample: usize, feature: usize) -> &[f64] {
        row(&self.values, sample, feature)
    }
}

impl BsplineBasisMatrix {
    pub fn row(&self, sample: usize, feature: usize) -> &[f64] {
        row(&self.values, sample, feature)
    }
}

fn interval(s: f64, n: usize) -> usize {
    (s.floor().max(0.0) as usize).min(n - 1)
}

fn check_batch(x: &Tensor, features: usize) -> Result<(usize, usize)> {
    if x.shape().len() != 2 || x.shape()[1] != features {
        return Err(invalid(format!(
            "expected input [batch, {features}], got {:?}",
            x.shape()
        )));
    }
    if !x.is_finite() {
        return Err(Error::NonFinite("basis input"));
    }
    Ok((x.shape()[0], features))
}

fn fif_cell(u0: f64, drow: &[f64], n: usize, depth: usize, phi: &mut [f64]) {
    let nf = n as f64;
    let mut u = u0;
    let mut r = 1.0;
    for _ in 0..depth {
        let s = u * nf;
        let j = interval(s, n);
        let t = s - j as f64;
        let omt = 1.0 - t;
        let rd = r * drow[j];
        phi[j] += r * omt;
        phi[j + 1] += r * t;
        phi[0] += -(rd * omt);
        phi[n] += -(rd * t);
        r = rd;
        u = t;
    }
    let s = u * nf;
    let j = interval(s, n);
    let t = s - j as f64;
    phi[j] += r * (1.0 - t);
    phi[j + 1] += r * t;
}

/// Truncated Read–Bajraktarević evaluation of the `N + 1` fractal
/// interpolation bases at depth `depth`.
pub fn fif_bases(
    x: &Tensor,
    d: &ContractionParams,
    grid: &UniformGrid,
    depth: usize,
) -> Result<FifBasisMatrix> {
    let n = grid.n;
    if d.intervals() != n {
        return Err(invalid(format!(
            "contraction has {} intervals, grid has {n}",
            d.intervals()
        )));
    }
    let (batch, feats) = check_batch(x, d.features())?;
    let dv = d.bounded();
    let mut out = vec![0.0; batch * feats * (n + 1)];
    for (c, phi) in out.chunks_exact_mut(n + 1).enumerate() {
        let f = c % feats;
        fif_cell(grid.normalize(x.data()[c]), &dv.data()[f * n..(f + 1) * n], n, depth, phi);
    }
    Ok(FifBasisMatrix {
        values: Tensor::new(vec![batch, feats, n + 1], out)?,
    })
}

#[derive(Debug)]
struct FifOp {
    grid: UniformGrid,
    depth: usize,
    feats: usize,
}

impl CustomOp for FifOp {
    fn backward(&self, inputs: &[&[f64]], _out: &[f64], g: &[f64], grads: &mut [Option<&mut [f64]>]) {
        let (xs, dv) = (inputs[0], inputs[1]);
        let n = self.grid.n;
        let nf = n as f64;
        let k = self.depth;
        let lo = self.grid.clamp_eps;
        let inv_len = 1.0 / (self.grid.b - self.grid.a);
        let mut js = vec![0usize; k + 1];
        let mut ts = vec![0.0; k + 1];
        let mut rs = vec![0.0; k + 1];
        let (gx, gd) = grads.split_at_mut(1);
        let (gx, gd) = (&mut gx[0], &mut gd[0]);
        for (c, gr) in g.chunks_exact(n + 1).enumerate() {
            let f = c % self.feats;
            let drow = &dv[f * n..(f + 1) * n];
            let raw = (xs[c] - self.grid.a) * inv_len;
            let mut u = raw.clamp(lo, 1.0 - lo);
            let mut r = 1.0;
            for i in 0..=k {
                let s = u * nf;
                let j = interval(s, n);
                let t = s - j as f64;
                js[i] = j;
                ts[i] = t;
                rs[i] = r;
                if i < k {
                    r *= drow[j];
                }
                u = t;
            }
            let (g0, gn) = (gr[0], gr[n]);
            // Reverse sweep: `big_r` is dL/dr_{i+1}, `tt` is dL/dt_{i+1}.
            let mut big_r = 0.0;
            let mut tt = 0.0;
            for i in (0..=k).rev() {
                let (j, t, r) = (js[i], ts[i], rs[i]);
                let a_i = (1.0 - t) * gr[j] + t * gr[j + 1];
                let mut p = r * (gr[j + 1] - gr[j]);
                if i < k {
                    p -= rs[i + 1] * (gn - g0);
                    if let Some(gd) = gd.as_deref_mut() {
                        gd[f * n + j] += big_r * r;
                    }
                    big_r = a_i + big_r * drow[j];
                } else {
                    big_r = a_i;
                }
                if i > 0 {
                    let tp = ts[i - 1];
                    big_r -= (1.0 - tp) * g0 + tp * gn;
                }
                tt = p + nf * tt;
            }
            if let Some(gx) = gx.as_deref_mut() {
                if raw > lo && raw < 1.0 - lo {
                    gx[c] += nf * tt * inv_len;
                }
            }
        }
    }
}

/// Tape version of [`fif_bases`]. `x` is `[batch, features]` and `d` the
/// bounded contractions `[features, N]`. Returns `[batch, features, N + 1]`,
/// bit for bit equal to [`fif_bases`].
pub fn fif_bases_var<'t>(
    x: &Var<'t>,
    d: &Var<'t>,
    grid: &UniformGrid,
    depth: usize,
) -> Result<Var<'t>> {
    let n = grid.n;
    if d.shape().len() != 2 || d.shape()[1] != n {
        return Err(invalid(format!("contraction shape {:?} vs N = {n}", d.shape())));
    }
    let feats = d.shape()[0];
    if x.shape().len() != 2 || x.shape()[1] != feats {
        return Err(invalid(format!("input shape {:?} vs {feats} features", x.shape())));
    }
    let batch = x.shape()[0];
    let (xs, dv) = (x.data(), d.data());
    let mut out = vec![0.0; batch * feats * (n + 1)];
    for (c, phi) in out.chunks_exact_mut(n + 1).enumerate() {
        let f = c % feats;
        fif_cell(grid.normalize(xs[c]), &dv[f * n..(f + 1) * n], n, depth, phi);
    }
    let op = FifOp { grid: grid.clone(), depth, feats };
    Ok(x.tape().custom(&[x, d], vec![batch, feats, n + 1], out, Rc::new(op))?)
}

/// Smallest `K` with `d^K / (1 - d) <= eps`.
pub fn required_depth(d_max_active: f64, eps: f64) -> Result<usize> {
    if !(d_max_active >= 0.0 && d_max_active < 1.0) {
        return Err(invalid(format!(
            "active contraction must lie in [0, 1), got {d_max_active}"
        )));
    }
    if !(eps > 0.0) {
        return Err(invalid(format!("eps must be positive, got {eps}")));
    }
    if d_max_active == 0.0 {
        return Ok(1);
    }
    let d = d_max_active;
    let bound = |k: usize| d.powi(k as i32) / (1.0 - d);
    let mut k = ((eps * (1.0 - d)).ln() / d.ln()).ceil().max(0.0) as usize;
    while bound(k) > eps {
        k += 1;
    }
    while k > 0 && bound(k - 1) <= eps {
        k -= 1;
    }
    Ok(k)
}

/// Extended uniform knot vector `a + h·(-k .. G + k)`, length `G + 2k + 1`.
pub fn bspline_knots(grid: &UniformGrid, order: usize) -> Vec<f64> {
    let h = grid.spacing();
    let k = order as isize;
    (-k..=grid.n as isize + k)
        .map(|i| grid.a + i as f64 * h)
        .collect()
}

fn check_order(order: usize) -> Result<()> {
    if order == 0 {
        return Err(invalid("spline order must be at least 1"));
    }
    Ok(())
}

/// Writes the `width` bases at `x` into `out` and, when given, their
/// derivatives into `deriv`.
fn bspline_cell(
    x: f64,
    grid: &UniformGrid,
    order: usize,
    scratch: &mut [Vec<f64>; 2],
    out: &mut [f64],
    deriv: Option<&mut [f64]>,
) {
    let g = grid.n;
    let m0 = g + 2 * order;
    let h = grid.spacing();
    let s = (x - (grid.a - order as f64 * h)) / h;
    let cell = s.floor();
    let [cur, next] = scratch;
    for (m, c) in cur.iter_mut().enumerate() {
        *c = if cell == m as f64 { 1.0 } else { 0.0 };
    }
    let mut deriv = deriv;
    for p in 1..=order {
        if p == order {
            if let Some(dv) = deriv.take() {
                for (m, v) in dv.iter_mut().enumerate() {
                    *v = (cur[m] - cur[m + 1]) / h;
                }
            }
        }
        let pf = p as f64;
        for m in 0..m0 - p {
            let mf = m as f64;
            next[m] = (s - mf) / pf * cur[m] + (mf + pf + 1.0 - s) / pf * cur[m + 1];
        }
        std::mem::swap(cur, next);
    }
    out.copy_from_slice(&cur[..out.len()]);
}

fn bspline_scratch(grid: &UniformGrid, order: usize) -> [Vec<f64>; 2] {
    let m0 = grid.n + 2 * order;
    [vec![0.0; m0], vec![0.0; m0]]
}

/// Cox–de Boor evaluation on the uniformly extended grid, giving `G + k`
/// bases per feature.
pub fn bspline_bases(x: &Tensor, grid: &UniformGrid, order: usize) -> Result<BsplineBasisMatrix> {
    check_order(order)?;
    if x.shape().len() != 2 {
        return Err(invalid(format!("expected [batch, features], got {:?}", x.shape())));
    }
    if !x.is_finite() {
        return Err(Error::NonFinite("basis input"));
    }
    let (batch, feats) = (x.shape()[0], x.shape()[1]);
    let width = grid.n + order;
    let mut scratch = bspline_scratch(grid, order);
    let mut out = vec![0.0; batch * feats * width];
    for (&xv, o) in x.data().iter().zip(out.chunks_exact_mut(width)) {
        bspline_cell(xv, grid, order, &mut scratch, o, None);
    }
    Ok(BsplineBasisMatrix {
        values: Tensor::new(vec![batch, feats, width], out)?,
        order,
        grid_size: grid.n,
    })
}

#[derive(Debug)]
struct BsplineOp {
    deriv: Vec<f64>,
    width: usize,
}

impl CustomOp for BsplineOp {
    fn backward(&self, _inputs: &[&[f64]], _out: &[f64], g: &[f64], grads: &mut [Option<&mut [f64]>]) {
        if let Some(gx) = grads[0].as_deref_mut() {
            for ((gx, gr), dr) in gx
                .iter_mut()
                .zip(g.chunks_exact(self.width))
                .zip(self.deriv.chunks_exact(self.width))
            {
                *gx += gr.iter().zip(dr).map(|(a, b)| a * b).sum::<f64>();
            }
        }
    }
}

/// Tape version of [`bspline_bases`]; `x` is `[batch, features]`.
pub fn bspline_bases_var<'t>(x: &Var<'t>, grid: &UniformGrid, order: usize) -> Result<Var<'t>> {
    check_order(order)?;
    if x.shape().len() != 2 {
        return Err(invalid(format!("expected [batch, features], got {:?}", x.shape())));
    }
    let (batch, feats) = (x.shape()[0], x.shape()[1]);
    let width = grid.n + order;
    let mut scratch = bspline_scratch(grid, order);
    let mut out = vec![0.0; batch * feats * width];
    let mut deriv = vec![0.0; batch * feats * width];
    for ((&xv, o), dv) in x
        .data()
        .iter()
        .zip(out.chunks_exact_mut(width))
        .zip(deriv.chunks_exact_mut(width))
    {
        bspline_cell(xv, grid, order, &mut scratch, o, Some(dv));
    }
    let op = BsplineOp { deriv, width };
    Ok(x.tape().custom(&[x], vec![batch, feats, width], out, Rc::new(op))?)
}

fn check_intervals(n: usize) -> Result<f64> {
    if n < 2 {
        return Err(invalid("box dimension needs N >= 2 (log N = 0)"));
    }
    Ok((n as f64).ln())
}

/// `1 + log⁺(Σ|d_i|) / log N` for each feature.
pub fn box_dimension(d: &ContractionParams) -> Result<Vec<f64>> {
    let n = d.intervals();
    let ln_n = check_intervals(n)?;
    let dv = d.bounded();
    Ok(dv
        .data()
        .chunks(n)
        .map(|row| {
            let s: f64 = row.iter().map(|v| v.abs()).sum();
            1.0 + s.max(1.0).ln() / ln_n
        })
        .collect())
}

/// Differentiable box dimension of bounded contractions `[features, N]`,
/// returning `[features]`. The gradient is zero wherever `Σ|d_i| <= 1`.
pub fn box_dimension_var<'t>(d: &Var<'t>) -> Result<Var<'t>> {
    if d.shape().len() != 2 {
        return Err(invalid(format!("expected [features, N], got {:?}", d.shape())));
    }
    let ln_n = check_intervals(d.shape()[1])?;
    let s = d.abs()?.sum_lastdim()?;
    Ok(s
        .clamp_detached(1.0, f64::INFINITY)?
        .log()?
        .scale(1.0 / ln_n)?
        .shift(1.0)?)
}

/// Piecewise-linear hat functions on `grid`, the `d = 0` limit of the
/// fractal bases. Returned row-major `[points, N + 1]`.
pub fn hat_bases(x: &[f64], grid: &UniformGrid) -> Vec<f64> {
    let n = grid.n;
    let mut out = vec![0.0; x.len() * (n + 1)];
    for (i, &xv) in x.iter().enumerate() {
        let s = grid.normalize(xv) * n as f64;
        let j = interval(s, n);
        let t = s - j as f64;
        out[i * (n + 1) + j] = 1.0 - t;
        out[i * (n + 1) + j + 1] += t;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffengine::Tape;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn column(xs: &[f64]) -> Tensor {
        Tensor::new(vec![xs.len(), 1], xs.to_vec()).unwrap()
    }

    fn eval1(xs: &[f64], d: f64, n: usize, depth: usize) -> FifBasisMatrix {
        let grid = UniformGrid::new(-1.0, 1.0, n).unwrap();
        let c = ContractionParams::uniform(1, n, d).unwrap();
        fif_bases(&column(xs), &c, &grid, depth).unwrap()
    }

    /// Independent recursive oracle: the RB fixed-point equation applied
    /// `depth` times to the hat interpolant, written from scratch.
    fn rb_oracle(u: f64, d: &[f64], y: &[f64], depth: usize) -> f64 {
        let n = d.len();
        let s = (u * n as f64).min(n as f64 - 1e-300);
        let i = (s.floor() as usize).min(n - 1);
        let t = s - i as f64;
        let lin = y[i] + (y[i + 1] - y[i]) * t;
        if depth == 0 {
            return lin;
        }
        let chord = y[0] + (y[n] - y[0]) * t;
        lin + d[i] * (rb_oracle(t, d, y, depth - 1) - chord)
    }

    #[test]
    fn degenerates_to_hats() {
        let m = eval1(&[0.25], 0.0, 4, 7);
        assert_eq!(m.row(0, 0), &[0.0, 0.0, 0.5, 0.5, 0.0]);
        let grid = UniformGrid::new(-1.0, 1.0, 5).unwrap();
        let xs: Vec<f64> = (0..101).map(|i| -1.0 + i as f64 * 0.02).collect();
        let hats = hat_bases(&xs, &grid);
        let fif = eval1(&xs, 0.0, 5, 9);
        assert_eq!(fif.values.data(), &hats[..]);
    }

    #[test]
    fn kronecker_at_mid_grid_point() {
        let x2 = UniformGrid::new(-1.0, 1.0, 4).unwrap().point(2);
        let m = eval1(&[x2], 0.5, 4, 13);
        let bound = 0.5f64.powi(13) / 0.5;
        for (k, v) in m.row(0, 0).iter().enumerate() {
            let e = if k == 2 { 1.0 } else { 0.0 };
            assert!((v - e).abs() <= bound);
        }
    }

    #[test]
    fn partition_of_unity_n5() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let xs: Vec<f64> = (0..200).map(|_| rng.random_range(-1.0..1.0)).collect();
        let m = eval1(&xs, 0.3, 5, 8);
        let bound = 0.3f64.powi(8) / 0.7;
        assert!(bound < 1e-4);
        for b in 0..xs.len() {
            let s: f64 = m.row(b, 0).iter().sum();
            assert!((s - 1.0).abs() <= bound.max(1e-12));
        }
    }

    #[test]
    fn kronecker_and_unity_over_grid_sweep() {
        for &n in &[2usize, 4, 8] {
            for &dabs in &[0.0, 0.3, 0.6, 0.9] {
                let k = required_depth(dabs, 1e-6).unwrap();
                let bound = if dabs == 0.0 {
                    0.0
                } else {
                    dabs.powi(k as i32) / (1.0 - dabs)
                };
                let grid = UniformGrid::new(-1.0, 1.0, n).unwrap();
                for sign in [1.0, -1.0] {
                    let m = eval1(&grid.points(), sign * dabs, n, k);
                    for j in 0..=n {
                        let row = m.row(j, 0);
                        for (c, v) in row.iter().enumerate() {
                            let e = if c == j { 1.0 } else { 0.0 };
                            assert!((v - e).abs() <= bound + 1e-12, "n={n} d={dabs} j={j}");
                        }
                        let s: f64 = row.iter().sum();
                        assert!((s - 1.0).abs() <= bound + 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn matches_recursive_oracle() {
        let n = 4;
        let d = [0.4, -0.7, 0.2, 0.55];
        let grid = UniformGrid::new(0.0, 1.0, n).unwrap();
        let c = ContractionParams::from_bounded(&Tensor::new(vec![1, n], d.to_vec()).unwrap(), D_MAX).unwrap();
        let xs: Vec<f64> = (0..=64).map(|i| i as f64 / 64.0).chain([0.123, 0.777]).collect();
        let m = fif_bases(&column(&xs), &c, &grid, 10).unwrap();
        let dv = c.bounded();
        for (b, &x) in xs.iter().enumerate() {
            for j in 0..=n {
                let y: Vec<f64> = (0..=n).map(|i| if i == j { 1.0 } else { 0.0 }).collect();
                let o = rb_oracle(x, dv.data(), &y, 10);
                assert!((m.row(b, 0)[j] - o).abs() < 1e-12, "x={x} j={j}");
            }
        }
    }

    #[test]
    fn tape_version_is_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 5;
        let xs: Vec<f64> = (0..24).map(|_| rng.random_range(-1.2..1.2)).collect();
        let x = Tensor::new(vec![12, 2], xs).unwrap();
        let d = Tensor::new(vec![2, n], (0..2 * n).map(|_| rng.random_range(-0.8..0.8)).collect()).unwrap();
        let c = ContractionParams::from_bounded(&d, D_MAX).unwrap();
        let grid = UniformGrid::new(-1.0, 1.0, n).unwrap();
        let plain = fif_bases(&x, &c, &grid, 6).unwrap();
        let tape = Tape::new();
        let xv = tape.constant(x.clone());
        let raw = tape.param(&c.raw);
        let dv = bounded_var(&raw, c.d_max).unwrap();
        let v = fif_bases_var(&xv, &dv, &grid, 6).unwrap();
        assert_eq!(v.to_tensor(), plain.values);
        let tape0 = Tape::new();
        let v0 = fif_bases_var(&tape0.constant(x.clone()), &tape0.constant(c.bounded()), &grid, 0).unwrap();
        assert_eq!(v0.to_tensor(), fif_bases(&x, &c, &grid, 0).unwrap().values);
    }

    #[test]
    fn fif_tape_gradient_matches_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 4;
        let depth = 5;
        let grid = UniformGrid::new(-1.0, 1.0, n).unwrap();
        let x = Tensor::new(vec![5, 2], (0..10).map(|_| rng.random_range(-0.97..0.97)).collect()).unwrap();
        let d = Tensor::new(vec![2, n], (0..2 * n).map(|_| rng.random_range(-0.7..0.7)).collect()).unwrap();
        let w = Tensor::new(vec![5, 2, n + 1], (0..10 * (n + 1)).map(|i| (i as f64 * 0.73).cos()).collect()).unwrap();
        let f = |x: &Tensor, d: &Tensor| -> f64 {
            let c = ContractionParams::from_bounded(d, D_MAX).unwrap();
            let m = fif_bases(x, &c, &grid, depth).unwrap();
            m.values.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
        };
        let tape = Tape::new();
        let xv = tape.param(&x);
        let dv = tape.param(&d);
        let loss = fif_bases_var(&xv, &dv, &grid, depth).unwrap().mul(&tape.constant(w.clone())).unwrap().sum().unwrap();
        let g = tape.backward(&loss).unwrap();
        let h = 1e-6;
        for i in 0..x.numel() {
            let (mut p, mut m) = (x.clone(), x.clone());
            p.data_mut()[i] += h;
            m.data_mut()[i] -= h;
            let fd = (f(&p, &d) - f(&m, &d)) / (2.0 * h);
            assert!((fd - g.get(&xv).unwrap().data()[i]).abs() < 1e-5, "x[{i}]");
        }
        for i in 0..d.numel() {
            let (mut p, mut m) = (d.clone(), d.clone());
            p.data_mut()[i] += h;
            m.data_mut()[i] -= h;
            let fd = (f(&x, &p) - f(&x, &m)) / (2.0 * h);
            assert!((fd - g.get(&dv).unwrap().data()[i]).abs() < 1e-6, "d[{i}]");
        }
    }

    fn sup_dev(xs: &[f64], n: usize, d1: &[f64], d2: &[f64], depth: usize) -> f64 {
        let grid = UniformGrid::new(0.0, 1.0, n).unwrap();
        let p1 = ContractionParams::from_bounded(&Tensor::new(vec![1, n], d1.to_vec()).unwrap(), D_MAX).unwrap();
        let p2 = ContractionParams::from_bounded(&Tensor::new(vec![1, n], d2.to_vec()).unwrap(), D_MAX).unwrap();
        let a = fif_bases(&column(xs), &p1, &grid, depth).unwrap();
        let b = fif_bases(&column(xs), &p2, &grid, depth).unwrap();
        a.values
            .data()
            .iter()
            .zip(b.values.data())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn lipschitz_in_contractions() {
        let xs: Vec<f64> = (0..513).map(|i| i as f64 / 512.0).collect();
        let n = 4;
        for &delta in &[0.3, 0.6, 0.9] {
            let base = vec![delta * 0.8; n];
            let dir = [1.0, -1.0, 0.5, -0.25];
            let k = required_depth(delta, 1e-9).unwrap();
            let pert = |s: f64| -> Vec<f64> {
                base.iter().zip(dir).map(|(b, u)| b + s * u).collect()
            };
            let e1 = sup_dev(&xs, n, &base, &pert(0.04), k);
            let e2 = sup_dev(&xs, n, &base, &pert(0.02), k);
            assert!(e1 > 0.0);
            assert!(e2 <= 0.5 * e1 * 1.2, "delta={delta} e1={e1} e2={e2}");
        }
    }

    #[test]
    fn truncation_contracts_geometrically() {
        let xs: Vec<f64> = (0..301).map(|i| i as f64 / 300.0 * 1.98 - 0.99).collect();
        for &d in &[0.3, 0.6, 0.9] {
            let n = 4;
            let gap = |k: usize| -> f64 {
                let a = eval1(&xs, d, n, k);
                let b = eval1(&xs, d, n, k + 8);
                a.values
                    .data()
                    .iter()
                    .zip(b.values.data())
                    .map(|(x, y)| (x - y).abs())
                    .fold(0.0, f64::max)
            };
            // sup over a finite sample: per-step ratios scatter around d
            let gaps: Vec<f64> = (1..8).map(gap).collect();
            for w in gaps.windows(2) {
                assert!(w[1] <= w[0] * d * 1.05, "d={d}");
            }
            let rate = (gaps[6] / gaps[0]).powf(1.0 / 6.0);
            assert!(rate <= d * 1.02, "d={d} rate={rate}");
        }
    }

    #[test]
    fn required_depth_values() {
        // The closed form gives 153 and 21; the values 13 and 6 quoted
        // alongside it do not satisfy d^K / (1 - d) <= 1e-6.
        assert_eq!(required_depth(0.9, 1e-6).unwrap(), 153);
        assert_eq!(required_depth(0.5, 1e-6).unwrap(), 21);
        assert_eq!(required_depth(0.5, 0.5).unwrap(), 2);
        assert!(required_depth(1.0, 1e-6).is_err());
        assert!(required_depth(1.5, 1e-6).is_err());
    }

    /// General-knot Cox–de Boor recursion with 0/0 := 0.
    fn cox_de_boor(knots: &[f64], i: usize, p: usize, x: f64) -> f64 {
        if p == 0 {
            return if knots[i] <= x && x < knots[i + 1] { 1.0 } else { 0.0 };
        }
        let mut v = 0.0;
        let l = knots[i + p] - knots[i];
        if l != 0.0 {
            v += (x - knots[i]) / l * cox_de_boor(knots, i, p - 1, x);
        }
        let r = knots[i + p + 1] - knots[i + 1];
        if r != 0.0 {
            v += (knots[i + p + 1] - x) / r * cox_de_boor(knots, i + 1, p - 1, x);
        }
        v
    }

    #[test]
    fn bspline_matches_reference() {
        let grid = UniformGrid::new(-1.0, 1.0, 8).unwrap();
        let knots: Vec<f64> = (-3..=11).map(|i| -1.0 + i as f64 * 0.25).collect();
        let m = bspline_bases(&column(&[0.1]), &grid, 3).unwrap();
        assert_eq!(m.row(0, 0).len(), 11);
        for (i, v) in m.row(0, 0).iter().enumerate() {
            assert!((v - cox_de_boor(&knots, i, 3, 0.1)).abs() < 1e-12);
        }
    }

    #[test]
    fn bspline_order1_and_unity() {
        let grid = UniformGrid::new(-1.0, 1.0, 8).unwrap();
        let m = bspline_bases(&column(&[grid.point(3)]), &grid, 1).unwrap();
        let row = m.row(0, 0);
        // x_3 sits at knot index 4: the hat peaking there is basis 3
        assert_eq!((row[3], row[4]), (1.0, 0.0));
        let m = bspline_bases(&column(&[-1.0, 1.0, 0.37]), &grid, 3).unwrap();
        for b in 0..3 {
            let s: f64 = m.row(b, 0).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(m.row(b, 0).iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn bspline_tape_matches_and_differentiates() {
        let grid = UniformGrid::new(-1.0, 1.0, 5).unwrap();
        let x = Tensor::new(vec![3, 2], vec![-0.93, 0.11, 0.42, -0.5, 0.77, 0.05]).unwrap();
        let plain = bspline_bases(&x, &grid, 3).unwrap();
        let tape = Tape::new();
        let xv = tape.param(&x);
        let v = bspline_bases_var(&xv, &grid, 3).unwrap();
        for (a, b) in v.data().iter().zip(plain.values.data()) {
            assert!((a - b).abs() < 1e-14);
        }
        let w = tape.constant(Tensor::new(v.shape().to_vec(), (0..v.numel()).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap());
        let loss = v.mul(&w).unwrap().sum().unwrap();
        let g = tape.backward(&loss).unwrap();
        let f = |xs: &Tensor| -> f64 {
            let m = bspline_bases(xs, &grid, 3).unwrap();
            m.values.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
        };
        let h = 1e-6;
        for i in 0..x.numel() {
            let mut p = x.clone();
            p.data_mut()[i] += h;
            let mut m = x.clone();
            m.data_mut()[i] -= h;
            let fd = (f(&p) - f(&m)) / (2.0 * h);
            assert!((fd - g.get(&xv).unwrap().data()[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn box_dimension_cases() {
        assert_eq!(box_dimension(&ContractionParams::zeros(2, 4)).unwrap(), vec![1.0, 1.0]);
        let d = box_dimension(&ContractionParams::uniform(1, 4, 0.5).unwrap()).unwrap();
        assert!((d[0] - 1.5).abs() < 1e-12);
        let d = box_dimension(&ContractionParams::uniform(1, 8, 0.125).unwrap()).unwrap();
        assert!((d[0] - 1.0).abs() < 1e-12);
        assert!(box_dimension(&ContractionParams::zeros(1, 1)).is_err());
    }

    #[test]
    fn box_dimension_gradient() {
        let raw = Tensor::new(vec![2, 4], vec![0.8, -0.6, 0.9, 0.7, 0.05, -0.1, 0.02, 0.1]).unwrap();
        let tape = Tape::new();
        let r = tape.param(&raw);
        let dim = box_dimension_var(&bounded_var(&r, D_MAX).unwrap()).unwrap();
        let loss = dim.sum().unwrap();
        let g = tape.backward(&loss).unwrap();
        let g = g.get(&r).unwrap();
        let f = |rw: &Tensor| -> f64 {
            box_dimension(&ContractionParams { raw: rw.clone(), d_max: D_MAX }).unwrap().iter().sum()
        };
        let h = 1e-6;
        for i in 0..4 {
            let mut p = raw.clone();
            p.data_mut()[i] += h;
            let mut m = raw.clone();
            m.data_mut()[i] -= h;
            let fd = (f(&p) - f(&m)) / (2.0 * h);
            assert!((fd - g.data()[i]).abs() < 1e-7);
        }
        assert!(g.data()[4..].iter().all(|&v| v == 0.0));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn prop_partition_of_unity(
            x in -1.0f64..1.0,
            ds in proptest::collection::vec(-0.9f64..0.9, 6),
            depth in 0usize..12,
        ) {
            let grid = UniformGrid::new(-1.0, 1.0, 6).unwrap();
            let c = ContractionParams::from_bounded(&Tensor::new(vec![1, 6], ds).unwrap(), D_MAX).unwrap();
            let m = fif_bases(&column(&[x]), &c, &grid, depth).unwrap();
            let s: f64 = m.row(0, 0).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }

        #[test]
        fn prop_bspline_unity_inside(x in -1.0f64..1.0, order in 1usize..5) {
            let grid = UniformGrid::new(-1.0, 1.0, 7).unwrap();
            let m = bspline_bases(&column(&[x]), &grid, order).unwrap();
            let s: f64 = m.row(0, 0).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
    }
}
