//! Fractal-dimension, activation and entropy regularizers and the total
//! training loss.

use serde::{Deserialize, Serialize};

use crate::basis::{box_dimension, box_dimension_var};
use crate::diffengine::Var;
use crate::error::{invalid, Result};
use crate::model::{ForwardPass, Network};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegWeights {
    pub lambda_act: f64,
    pub lambda_ent: f64,
    pub lambda_frac: f64,
}

impl Default for RegWeights {
    fn default() -> Self {
        Self {
            lambda_act: 0.0,
            lambda_ent: 0.0,
            lambda_frac: 1e-3,
        }
    }
}

impl RegWeights {
    pub fn new(lambda_act: f64, lambda_ent: f64, lambda_frac: f64) -> Result<Self> {
        let w = Self {
            lambda_act,
            lambda_ent,
            lambda_frac,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn zero() -> Self {
        Self {
            lambda_act: 0.0,
            lambda_ent: 0.0,
            lambda_frac: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_act", self.lambda_act),
            ("lambda_ent", self.lambda_ent),
            ("lambda_frac", self.lambda_frac),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(invalid(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }

    fn needs_profiles(&self) -> bool {
        self.lambda_act > 0.0 || self.lambda_ent > 0.0
    }
}

/// `Σ_layers Σ_features (dim_B − 1)²` for the network's current parameters.
pub fn r_fractal(network: &Network) -> Result<f64> {
    let mut total = 0.0;
    for c in network.edge_banks().filter_map(|e| e.contraction.as_ref()) {
        total += box_dimension(c)?.iter().map(|d| (d - 1.0).powi(2)).sum::<f64>();
    }
    Ok(total)
}

/// Tape version of [`r_fractal`] over bounded contractions `[n_in, N]`.
/// `None` when the network has no fractal layers.
pub fn r_fractal_var<'t>(contractions: &[Var<'t>]) -> Result<Option<Var<'t>>> {
    let mut total: Option<Var<'t>> = None;
    for d in contractions {
        let term = box_dimension_var(d)?.shift(-1.0)?.square()?.sum()?;
        total = Some(match total {
            Some(t) => t.add(&term)?,
            None => term,
        });
    }
    Ok(total)
}

/// Activation magnitude (mean) and entropy of one per-edge L1 profile.
/// A profile with zero mass has entropy 0.
pub fn r_act_ent_profile(profile: &[f64]) -> (f64, f64) {
    if profile.is_empty() {
        return (0.0, 0.0);
    }
    let mass: f64 = profile.iter().sum();
    let act = mass / profile.len() as f64;
    if mass <= 0.0 {
        return (act, 0.0);
    }
    let ent = profile
        .iter()
        .map(|v| v / mass)
        .filter(|&p| p > 0.0)
        .map(|p| -p * p.ln())
        .sum();
    (act, ent)
}

/// Summed over layers: `(R_act, R_ent)` from the captured profiles.
pub fn r_act_ent_var<'t>(profiles: &[Var<'t>]) -> Result<Option<(Var<'t>, Var<'t>)>> {
    let mut out: Option<(Var<'t>, Var<'t>)> = None;
    for prof in profiles {
        let act = prof.mean()?;
        let mass = prof.sum()?;
        let ent = if mass.item() == Some(0.0) {
            prof.tape().scalar(0.0)
        } else {
            let p = prof.div(&mass)?;
            let logp = p.clamp_detached(f64::MIN_POSITIVE, f64::INFINITY)?.log()?;
            p.mul(&logp)?.sum()?.neg()?
        };
        out = Some(match out {
            Some((a, e)) => (a.add(&act)?, e.add(&ent)?),
            None => (act, ent),
        });
    }
    Ok(out)
}

/// `mse + λ_act R_act + λ_ent R_ent + λ_frac R_fractal`. Terms with zero
/// weight are skipped, so all-zero weights return `mse` itself.
pub fn total_loss<'t>(mse: &Var<'t>, pass: &ForwardPass<'t>, weights: &RegWeights) -> Result<Var<'t>> {
    let mut loss = mse.clone();
    if weights.lambda_frac > 0.0 {
        if let Some(r) = r_fractal_var(&pass.contractions)? {
            loss = loss.add(&r.scale(weights.lambda_frac)?)?;
        }
    }
    if weights.needs_profiles() {
        if pass.profiles.is_empty() && !pass.contractions.is_empty() {
            return Err(invalid("activation regularizers need captured profiles"));
        }
        if let Some((act, ent)) = r_act_ent_var(&pass.profiles)? {
            if weights.lambda_act > 0.0 {
                loss = loss.add(&act.scale(weights.lambda_act)?)?;
            }
            if weights.lambda_ent > 0.0 {
                loss = loss.add(&ent.scale(weights.lambda_ent)?)?;
            }
        }
    }
    Ok(loss)
}

/// Whether [`total_loss`] needs per-edge profiles from the forward pass.
pub fn needs_profiles(weights: &RegWeights) -> bool {
    weights.needs_profiles()
}
