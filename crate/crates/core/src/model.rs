//! MLP, KAN, Pure FI-KAN and Hybrid FI-KAN networks over the tape.

use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::basis::{
    bounded_var, box_dimension, bspline_bases, bspline_bases_var, fif_bases_var,
    ContractionParams, UniformGrid, D_MAX,
};
use crate::diffengine::{Index, Tape, Tensor, Var};
use crate::error::{invalid, Result};
use crate::rng::{stream, Stream};

pub const ENERGY_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Arch {
    #[serde(rename = "mlp")]
    Mlp,
    #[serde(rename = "kan")]
    Kan,
    #[serde(rename = "pure")]
    PureFikan,
    #[serde(rename = "hybrid")]
    HybridFikan,
}

impl Arch {
    pub const ALL: [Arch; 4] = [Arch::Mlp, Arch::Kan, Arch::PureFikan, Arch::HybridFikan];

    pub fn name(self) -> &'static str {
        match self {
            Arch::Mlp => "mlp",
            Arch::Kan => "kan",
            Arch::PureFikan => "pure",
            Arch::HybridFikan => "hybrid",
        }
    }

    pub fn has_spline(self) -> bool {
        matches!(self, Arch::Kan | Arch::HybridFikan)
    }

    pub fn has_fractal(self) -> bool {
        matches!(self, Arch::PureFikan | Arch::HybridFikan)
    }

    /// Fractal recursion depth used by the core benchmark.
    pub fn default_depth(self) -> usize {
        match self {
            Arch::PureFikan => 8,
            Arch::HybridFikan => 6,
            _ => 0,
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Arch {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mlp" => Ok(Arch::Mlp),
            "kan" => Ok(Arch::Kan),
            "pure" | "pure-fikan" | "purefikan" => Ok(Arch::PureFikan),
            "hybrid" | "hybrid-fikan" | "hybridfikan" => Ok(Arch::HybridFikan),
            _ => Err(invalid(format!("unknown model '{s}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerConfig {
    pub n_in: usize,
    pub n_out: usize,
    pub grid_size: usize,
    pub spline_order: usize,
    pub fif_intervals: usize,
    pub fractal_depth: usize,
    pub domain: (f64, f64),
}

impl LayerConfig {
    pub fn spline_grid(&self) -> Result<UniformGrid> {
        UniformGrid::new(self.domain.0, self.domain.1, self.grid_size)
    }

    pub fn fif_grid(&self) -> Result<UniformGrid> {
        UniformGrid::new(self.domain.0, self.domain.1, self.fif_intervals)
    }
}

/// Parameters of one edge layer. `w_scale` multiplies the spline path
/// (KAN, Hybrid) or the fractal path (Pure).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeBank {
    pub config: LayerConfig,
    pub w_base: Tensor,
    pub w_scale: Tensor,
    pub w_spline: Option<Tensor>,
    pub w_frac: Option<Tensor>,
    pub contraction: Option<ContractionParams>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Layer {
    Dense(DenseLayer),
    Edge(EdgeBank),
}

/// Shape and hyperparameters of a network before initialization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub arch: Arch,
    pub widths: Vec<usize>,
    pub grid_size: usize,
    pub spline_order: usize,
    pub fractal_depth: usize,
    pub domain: (f64, f64),
}

impl NetworkSpec {
    /// `G = 8`, `k = 3`, per-architecture default depth, domain `[-1, 1]`.
    pub fn new(arch: Arch, widths: &[usize]) -> Self {
        Self {
            arch,
            widths: widths.to_vec(),
            grid_size: 8,
            spline_order: 3,
            fractal_depth: arch.default_depth(),
            domain: (-1.0, 1.0),
        }
    }

    /// MLP `[n_in, h × hidden_layers, n_out]` whose parameter count is the
    /// largest not exceeding `target_params`.
    pub fn matched_mlp(target_params: usize, hidden_layers: usize, n_in: usize, n_out: usize) -> Result<Self> {
        let h = match_mlp_width(target_params, hidden_layers, n_in, n_out)?;
        let mut widths = vec![n_in];
        widths.extend(std::iter::repeat(h).take(hidden_layers));
        widths.push(n_out);
        Ok(Self::new(Arch::Mlp, &widths))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub arch: Arch,
    pub layers: Vec<Layer>,
}

/// Tape handles produced by one forward pass.
pub struct ForwardPass<'t> {
    pub output: Var<'t>,
    /// One variable per tensor of [`Network::params`], same order.
    pub params: Vec<Var<'t>>,
    /// Bounded contractions `[n_in, N]` per fractal layer.
    pub contractions: Vec<Var<'t>>,
    /// Per-edge mean absolute activation `[n_out · n_in]` per edge layer,
    /// present only when requested.
    pub profiles: Vec<Var<'t>>,
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, bound: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
}

/// Minimum-norm least-squares map from values at the `G + 1` grid points
/// to `G + k` spline coefficients, `[G + k, G + 1]`.
fn curve_to_coeff(grid: &UniformGrid, order: usize) -> Result<DMatrix<f64>> {
    let pts = grid.points();
    let x = Tensor::new(vec![pts.len(), 1], pts.clone())?;
    let a = bspline_bases(&x, grid, order)?;
    let width = grid.n + order;
    let m = DMatrix::from_row_slice(pts.len(), width, a.values.data());
    m.pseudo_inverse(1e-12)
        .map_err(|e| invalid(format!("spline fit failed: {e}")))
}

impl Network {
    /// Deterministic initialization from `seed`.
    ///
    /// KAN and Hybrid draw base, spline and scale weights from the same
    /// stream, so a Hybrid network starts as the KAN of the same seed.
    pub fn new(spec: &NetworkSpec, seed: u64) -> Result<Self> {
        if spec.widths.len() < 2 || spec.widths.contains(&0) {
            return Err(invalid(format!("bad widths {:?}", spec.widths)));
        }
        let layers = if spec.arch == Arch::Mlp {
            let mut rng = stream(seed, Stream::MlpInit);
            spec.widths
                .windows(2)
                .map(|w| {
                    let bound = 1.0 / (w[0] as f64).sqrt();
                    Ok(Layer::Dense(DenseLayer {
                        weight: Tensor::new(vec![w[1], w[0]], uniform(&mut rng, w[0] * w[1], bound))?,
                        bias: Tensor::vector(uniform(&mut rng, w[1], bound)),
                    }))
                })
                .collect::<Result<Vec<_>>>()?
        } else {
            if spec.grid_size == 0 || spec.spline_order == 0 {
                return Err(invalid("grid size and spline order must be positive"));
            }
            let mut kan_rng = stream(seed, Stream::KanInit);
            let mut frac_rng = stream(seed, Stream::FractalInit);
            spec.widths
                .windows(2)
                .map(|w| Self::init_edge(spec, w[0], w[1], &mut kan_rng, &mut frac_rng).map(Layer::Edge))
                .collect::<Result<Vec<_>>>()?
        };
        Ok(Self {
            arch: spec.arch,
            layers,
        })
    }

    fn init_edge(
        spec: &NetworkSpec,
        n_in: usize,
        n_out: usize,
        kan_rng: &mut ChaCha8Rng,
        frac_rng: &mut ChaCha8Rng,
    ) -> Result<EdgeBank> {
        let g = spec.grid_size;
        let k = spec.spline_order;
        let config = LayerConfig {
            n_in,
            n_out,
            grid_size: g,
            spline_order: k,
            fif_intervals: g,
            fractal_depth: spec.fractal_depth,
            domain: spec.domain,
        };
        let bound = 1.0 / (n_in as f64).sqrt();
        let w_base = Tensor::new(vec![n_out, n_in], uniform(kan_rng, n_out * n_in, bound))?;
        // initial curve: small noise at the grid points, laid out [G + 1, in, out]
        let noise: Vec<f64> = (0..(g + 1) * n_in * n_out)
            .map(|_| (kan_rng.random::<f64>() - 0.5) * 0.1 / g as f64)
            .collect();
        let at = |m: usize, i: usize, j: usize| noise[(m * n_in + i) * n_out + j];
        let w_scale = Tensor::new(vec![n_out, n_in], uniform(kan_rng, n_out * n_in, bound))?;

        let w_spline = if spec.arch.has_spline() {
            let pinv = curve_to_coeff(&config.spline_grid()?, k)?;
            let mut coef = Vec::with_capacity(n_out * n_in * (g + k));
            for j in 0..n_out {
                for i in 0..n_in {
                    for c in 0..g + k {
                        coef.push((0..=g).map(|m| pinv[(c, m)] * at(m, i, j)).sum());
                    }
                }
            }
            Some(Tensor::new(vec![n_out, n_in, g + k], coef)?)
        } else {
            None
        };

        let (w_frac, contraction) = if spec.arch.has_fractal() {
            let n = config.fif_intervals;
            let w_frac = if spec.arch == Arch::PureFikan {
                // hats interpolate, so the ordinates are the curve values
                let mut v = Vec::with_capacity(n_out * n_in * (n + 1));
                for j in 0..n_out {
                    for i in 0..n_in {
                        v.extend((0..=n).map(|m| at(m, i, j)));
                    }
                }
                Tensor::new(vec![n_out, n_in, n + 1], v)?
            } else {
                Tensor::zeros(&[n_out, n_in, n + 1])
            };
            let normal = Normal::new(0.0, 0.01).expect("valid normal");
            let raw = (0..n_in * n).map(|_| normal.sample(frac_rng)).collect();
            let contraction = ContractionParams {
                raw: Tensor::new(vec![n_in, n], raw)?,
                d_max: D_MAX,
            };
            (Some(w_frac), Some(contraction))
        } else {
            (None, None)
        };

        Ok(EdgeBank {
            config,
            w_base,
            w_scale,
            w_spline,
            w_frac,
            contraction,
        })
    }

    pub fn n_in(&self) -> usize {
        match &self.layers[0] {
            Layer::Dense(d) => d.weight.shape()[1],
            Layer::Edge(e) => e.config.n_in,
        }
    }

    pub fn n_out(&self) -> usize {
        match self.layers.last().expect("non-empty") {
            Layer::Dense(d) => d.weight.shape()[0],
            Layer::Edge(e) => e.config.n_out,
        }
    }

    /// All trainable tensors in canonical order.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Dense(d) => {
                    out.push(&d.weight);
                    out.push(&d.bias);
                }
                Layer::Edge(e) => {
                    out.push(&e.w_base);
                    out.push(&e.w_scale);
                    out.extend(e.w_spline.as_ref());
                    out.extend(e.w_frac.as_ref());
                    out.extend(e.contraction.as_ref().map(|c| &c.raw));
                }
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            match layer {
                Layer::Dense(d) => {
                    out.push(&mut d.weight);
                    out.push(&mut d.bias);
                }
                Layer::Edge(e) => {
                    out.push(&mut e.w_base);
                    out.push(&mut e.w_scale);
                    out.extend(e.w_spline.as_mut());
                    out.extend(e.w_frac.as_mut());
                    out.extend(e.contraction.as_mut().map(|c| &mut c.raw));
                }
            }
        }
        out
    }

    /// `layers.<l>.<name>` for each tensor of [`Network::params`].
    pub fn param_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            let names: Vec<&str> = match layer {
                Layer::Dense(_) => vec!["weight", "bias"],
                Layer::Edge(e) => {
                    let mut v = vec!["w_base", "w_scale"];
                    if e.w_spline.is_some() {
                        v.push("w_spline");
                    }
                    if e.w_frac.is_some() {
                        v.push("w_frac");
                    }
                    if e.contraction.is_some() {
                        v.push("contraction");
                    }
                    v
                }
            };
            out.extend(names.into_iter().map(|n| format!("layers.{l}.{n}")));
        }
        out
    }

    pub fn count_params(&self) -> usize {
        self.params().iter().map(|t| t.numel()).sum()
    }

    /// Records the forward pass on `tape`. Parameters become tape params
    /// when `trainable`, constants otherwise.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        x: &Tensor,
        trainable: bool,
        capture_profiles: bool,
    ) -> Result<ForwardPass<'t>> {
        if x.shape().len() != 2 || x.shape()[1] != self.n_in() {
            return Err(invalid(format!(
                "expected input [batch, {}], got {:?}",
                self.n_in(),
                x.shape()
            )));
        }
        let leaf = |t: &Tensor| {
            if trainable {
                tape.param(t)
            } else {
                tape.constant(t.clone())
            }
        };
        let mut h = tape.constant(x.clone());
        let mut params = Vec::new();
        let mut contractions = Vec::new();
        let mut profiles = Vec::new();
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Dense(d) => {
                    let w = leaf(&d.weight);
                    let b = leaf(&d.bias);
                    let mut y = h.matmul(&w.transpose()?)?.add(&b)?;
                    if l != last {
                        y = y.silu()?;
                    }
                    params.push(w);
                    params.push(b);
                    h = y;
                }
                Layer::Edge(e) => {
                    let vars = EdgeVars {
                        w_base: leaf(&e.w_base),
                        w_scale: leaf(&e.w_scale),
                        w_spline: e.w_spline.as_ref().map(&leaf),
                        w_frac: e.w_frac.as_ref().map(&leaf),
                        raw: e.contraction.as_ref().map(|c| leaf(&c.raw)),
                    };
                    let out = edge_forward(self.arch, e, &vars, &h, capture_profiles)?;
                    params.push(vars.w_base);
                    params.push(vars.w_scale);
                    params.extend(vars.w_spline);
                    params.extend(vars.w_frac);
                    params.extend(vars.raw);
                    contractions.extend(out.d);
                    profiles.extend(out.profile);
                    h = out.y;
                }
            }
        }
        Ok(ForwardPass {
            output: h,
            params,
            contractions,
            profiles,
        })
    }

    /// Forward pass without gradients.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        Ok(self.forward(&tape, x, false, false)?.output.to_tensor())
    }

    pub fn edge_banks(&self) -> impl Iterator<Item = &EdgeBank> {
        self.layers.iter().filter_map(|l| match l {
            Layer::Edge(e) => Some(e),
            Layer::Dense(_) => None,
        })
    }

    /// Mean box dimension over input features, one value per fractal layer.
    pub fn layer_box_dimensions(&self) -> Result<Vec<f64>> {
        self.edge_banks()
            .filter_map(|e| e.contraction.as_ref())
            .map(|c| {
                let dims = box_dimension(c)?;
                Ok(dims.iter().sum::<f64>() / dims.len() as f64)
            })
            .collect()
    }

    /// Mean box dimension over every contraction vector in every layer.
    pub fn mean_box_dimension(&self) -> Result<Option<f64>> {
        let mut all = Vec::new();
        for c in self.edge_banks().filter_map(|e| e.contraction.as_ref()) {
            all.extend(box_dimension(c)?);
        }
        Ok((!all.is_empty()).then(|| all.iter().sum::<f64>() / all.len() as f64))
    }

    /// Network-wide `‖w_frac‖₁ / (‖w_spline‖₁ + ε)` for Hybrid networks.
    pub fn fractal_energy_ratio(&self) -> Option<f64> {
        if self.arch != Arch::HybridFikan {
            return None;
        }
        let (mut frac, mut spl) = (0.0, 0.0);
        for e in self.edge_banks() {
            frac += e.w_frac.as_ref().map_or(0.0, Tensor::l1_norm);
            spl += e.w_spline.as_ref().map_or(0.0, Tensor::l1_norm);
        }
        Some(frac / (spl + ENERGY_EPS))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let net: Network = serde_json::from_str(s)?;
        net.validate()?;
        Ok(net)
    }

    fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(invalid("network has no layers"));
        }
        let dims: Vec<(usize, usize)> = self
            .layers
            .iter()
            .map(|l| match l {
                Layer::Dense(d) => (d.weight.shape()[1], d.weight.shape()[0]),
                Layer::Edge(e) => (e.config.n_in, e.config.n_out),
            })
            .collect();
        if dims.windows(2).any(|w| w[0].1 != w[1].0) {
            return Err(invalid(format!("incompatible layer dims {dims:?}")));
        }
        Ok(())
    }
}

struct EdgeVars<'t> {
    w_base: Var<'t>,
    w_scale: Var<'t>,
    w_spline: Option<Var<'t>>,
    w_frac: Option<Var<'t>>,
    raw: Option<Var<'t>>,
}

struct EdgeOut<'t> {
    y: Var<'t>,
    d: Option<Var<'t>>,
    profile: Option<Var<'t>>,
}

fn zeros_index(m: usize) -> Rc<Index> {
    Rc::new(Index::vector(vec![0; m]))
}

/// `w ⊙ scale` broadcast over the basis axis, `[n_out, n_in, M]`.
fn effective_weights<'t>(w: &Var<'t>, scale: Option<&Var<'t>>) -> Result<Var<'t>> {
    match scale {
        None => Ok(w.clone()),
        Some(s) => {
            let (n_out, n_in, m) = (w.shape()[0], w.shape()[1], w.shape()[2]);
            let spread = s.reshape(&[n_out, n_in, 1])?.gather_lastdim(&zeros_index(m))?;
            Ok(w.mul(&spread)?)
        }
    }
}

/// `Σ_i Σ_m w_eff[j,i,m] · bases[b,i,m]` as one matmul, `[B, n_out]`.
fn basis_path<'t>(bases: &Var<'t>, w_eff: &Var<'t>) -> Result<Var<'t>> {
    let (n_out, n_in, m) = (w_eff.shape()[0], w_eff.shape()[1], w_eff.shape()[2]);
    let batch = bases.shape()[0];
    let wt = w_eff.reshape(&[n_out, n_in * m])?.transpose()?;
    Ok(bases.reshape(&[batch, n_in * m])?.matmul(&wt)?)
}

/// Per-edge path values `[B, n_out · n_in]`.
fn basis_path_per_edge<'t>(bases: &Var<'t>, w_eff: &Var<'t>) -> Result<Var<'t>> {
    let (n_out, n_in, m) = (w_eff.shape()[0], w_eff.shape()[1], w_eff.shape()[2]);
    let batch = bases.shape()[0];
    let idx: Vec<usize> = (0..n_out)
        .flat_map(|_| 0..n_in * m)
        .collect();
    let spread = bases
        .reshape(&[batch, n_in * m])?
        .gather_lastdim(&Rc::new(Index::vector(idx)))?;
    let prod = spread.mul(&w_eff.reshape(&[n_out * n_in * m])?)?;
    Ok(prod.reshape(&[batch, n_out * n_in, m])?.sum_lastdim()?)
}

fn edge_forward<'t>(
    arch: Arch,
    bank: &EdgeBank,
    vars: &EdgeVars<'t>,
    x: &Var<'t>,
    capture: bool,
) -> Result<EdgeOut<'t>> {
    let cfg = &bank.config;
    let batch = x.shape()[0];
    let (n_in, n_out) = (cfg.n_in, cfg.n_out);
    let act = x.silu()?;
    let mut y = act.matmul(&vars.w_base.transpose()?)?;
    let xc = x.clamp_detached(cfg.domain.0, cfg.domain.1)?;

    let mut per_edge = if capture {
        let idx: Vec<usize> = (0..n_out).flat_map(|_| 0..n_in).collect();
        let spread = act.gather_lastdim(&Rc::new(Index::vector(idx)))?;
        Some(spread.mul(&vars.w_base.reshape(&[n_out * n_in])?)?)
    } else {
        None
    };

    if let Some(wsp) = &vars.w_spline {
        let bases = bspline_bases_var(&xc, &cfg.spline_grid()?, cfg.spline_order)?;
        let w_eff = effective_weights(wsp, Some(&vars.w_scale))?;
        y = y.add(&basis_path(&bases, &w_eff)?)?;
        if let Some(pe) = &per_edge {
            per_edge = Some(pe.add(&basis_path_per_edge(&bases, &w_eff)?)?);
        }
    }

    let mut d_out = None;
    if let (Some(wf), Some(raw), Some(c)) = (&vars.w_frac, &vars.raw, &bank.contraction) {
        let d = bounded_var(raw, c.d_max)?;
        let bases = fif_bases_var(&xc, &d, &cfg.fif_grid()?, cfg.fractal_depth)?;
        let scale = (arch == Arch::PureFikan).then_some(&vars.w_scale);
        let w_eff = effective_weights(wf, scale)?;
        y = y.add(&basis_path(&bases, &w_eff)?)?;
        if let Some(pe) = &per_edge {
            per_edge = Some(pe.add(&basis_path_per_edge(&bases, &w_eff)?)?);
        }
        d_out = Some(d);
    }

    let profile = match per_edge {
        Some(pe) => Some(
            pe.abs()?
                .transpose()?
                .sum_lastdim()?
                .scale(1.0 / batch as f64)?,
        ),
        None => None,
    };
    Ok(EdgeOut {
        y,
        d: d_out,
        profile,
    })
}

/// `‖w_frac‖₁ / (‖w_spline‖₁ + ε)` for a Hybrid bank.
pub fn fractal_energy_ratio(bank: &EdgeBank) -> Result<f64> {
    match (&bank.w_frac, &bank.w_spline) {
        (Some(f), Some(s)) => Ok(f.l1_norm() / (s.l1_norm() + ENERGY_EPS)),
        _ => Err(invalid("fractal energy ratio needs a Hybrid bank")),
    }
}

/// Parameter count of a SiLU MLP with the given widths.
pub fn mlp_param_count(widths: &[usize]) -> usize {
    widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

/// Largest hidden width whose MLP parameter count does not exceed
/// `target_params`.
pub fn match_mlp_width(target_params: usize, hidden_layers: usize, n_in: usize, n_out: usize) -> Result<usize> {
    if hidden_layers == 0 {
        return Err(invalid("need at least one hidden layer"));
    }
    let count = |h: usize| {
        let mut widths = vec![n_in];
        widths.extend(std::iter::repeat(h).take(hidden_layers));
        widths.push(n_out);
        mlp_param_count(&widths)
    };
    if count(1) > target_params {
        return Err(invalid(format!("no width fits {target_params} parameters")));
    }
    let mut h = 1;
    while count(h + 1) <= target_params {
        h += 1;
    }
    Ok(h)
}
