//! Experiment presets: job lists, a parallel runner, seed aggregation,
//! per-preset checks and the result files.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::model::{match_mlp_width, mlp_param_count, Arch, Network, NetworkSpec};
use crate::targets::{generate, Family, TargetSpec};
use crate::train::{evaluate_mse, run, TrainConfig, DEFAULT_SEEDS};

pub const HOLDER_ALPHAS: [f64; 7] = [0.2, 0.4, 0.6, 0.8, 1.0, 1.5, 2.0];
pub const SCALING_GRIDS: [usize; 6] = [3, 5, 8, 12, 16, 20];
pub const NOISE_SNRS_DB: [f64; 6] = [100.0, 40.0, 30.0, 20.0, 10.0, 5.0];
pub const REG_LAMBDAS: [f64; 6] = [0.0, 1e-4, 1e-3, 1e-2, 1e-1, 1.0];
pub const DEPTHS: [usize; 7] = [1, 2, 4, 6, 8, 10, 12];
pub const DIFFUSION_HURST: [f64; 4] = [0.1, 0.3, 0.5, 0.7];
pub const HEAT_SIGMAS: [f64; 3] = [0.1, 0.5, 1.0];
pub const TERRAIN_ROUGHNESS: [f64; 4] = [0.2, 0.4, 0.6, 0.8];
pub const HIDDEN: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PresetName {
    #[serde(rename = "1d")]
    OneD,
    #[serde(rename = "holder-sweep")]
    HolderSweep,
    #[serde(rename = "param-matched")]
    ParamMatched,
    #[serde(rename = "scaling")]
    Scaling,
    #[serde(rename = "noise")]
    Noise,
    #[serde(rename = "continual")]
    Continual,
    #[serde(rename = "reg-sweep")]
    RegSweep,
    #[serde(rename = "depth")]
    Depth,
    #[serde(rename = "2d")]
    TwoD,
    #[serde(rename = "pde")]
    Pde,
    #[serde(rename = "diagnostic")]
    Diagnostic,
}

impl PresetName {
    pub const ALL: [PresetName; 11] = [
        PresetName::OneD,
        PresetName::HolderSweep,
        PresetName::ParamMatched,
        PresetName::Scaling,
        PresetName::Noise,
        PresetName::Continual,
        PresetName::RegSweep,
        PresetName::Depth,
        PresetName::TwoD,
        PresetName::Pde,
        PresetName::Diagnostic,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PresetName::OneD => "1d",
            PresetName::HolderSweep => "holder-sweep",
            PresetName::ParamMatched => "param-matched",
            PresetName::Scaling => "scaling",
            PresetName::Noise => "noise",
            PresetName::Continual => "continual",
            PresetName::RegSweep => "reg-sweep",
            PresetName::Depth => "depth",
            PresetName::TwoD => "2d",
            PresetName::Pde => "pde",
            PresetName::Diagnostic => "diagnostic",
        }
    }
}

impl fmt::Display for PresetName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PresetName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PresetName::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| invalid(format!("unknown preset '{s}'")))
    }
}

/// What a job trains on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Task {
    Single { family: Family, noise_snr_db: Option<f64> },
    /// Sequential training on each family in turn, scored on all of them.
    Continual { families: Vec<Family> },
}

impl Task {
    fn single(family: Family) -> Self {
        Task::Single { family, noise_snr_db: None }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            Task::Single { family, .. } => family.input_dim(),
            Task::Continual { families } => families.first().map_or(1, Family::input_dim),
        }
    }
}

/// One (model, target, setting) cell, run once per seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Job {
    pub target: String,
    pub setting: String,
    pub model: String,
    pub task: Task,
    pub net: NetworkSpec,
    pub train: TrainConfig,
}

/// Seeds, epoch override, worker count and optional row filters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PresetOptions {
    pub seeds: Vec<u64>,
    pub epochs: Option<usize>,
    pub jobs: Option<usize>,
    pub targets: Option<Vec<String>>,
    pub models: Option<Vec<String>>,
    pub settings: Option<Vec<String>>,
}

impl Default for PresetOptions {
    fn default() -> Self {
        Self {
            seeds: DEFAULT_SEEDS.to_vec(),
            epochs: None,
            jobs: None,
            targets: None,
            models: None,
            settings: None,
        }
    }
}

impl PresetOptions {
    fn keeps(&self, job: &Job) -> bool {
        let ok = |list: &Option<Vec<String>>, v: &str| list.as_ref().is_none_or(|l| l.iter().any(|x| x == v));
        ok(&self.targets, &job.target) && ok(&self.models, &job.model) && ok(&self.settings, &job.setting)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPreset {
    pub name: PresetName,
    pub seeds: Vec<u64>,
    pub jobs: Vec<Job>,
}

fn arch_spec(arch: Arch, n_in: usize) -> NetworkSpec {
    NetworkSpec::new(arch, &[n_in, HIDDEN, 1])
}

fn count(spec: &NetworkSpec) -> Result<usize> {
    Ok(Network::new(spec, 0)?.count_params())
}

/// Single-hidden-layer MLP whose parameter count is nearest to `spec`'s
/// (ties go to the smaller network).
pub fn mlp_like(spec: &NetworkSpec) -> Result<NetworkSpec> {
    let target = count(spec)?;
    let n_in = spec.widths[0];
    let h = match_mlp_width(target, 1, n_in, 1)?;
    let below = mlp_param_count(&[n_in, h, 1]);
    let above = mlp_param_count(&[n_in, h + 1, 1]);
    let h = if above - target < target - below { h + 1 } else { h };
    Ok(NetworkSpec::new(Arch::Mlp, &[n_in, h, 1]))
}

struct Builder {
    jobs: Vec<Job>,
    train: TrainConfig,
}

impl Builder {
    fn push(&mut self, target: &str, setting: &str, model: &str, task: Task, net: NetworkSpec) {
        self.jobs.push(Job {
            target: target.to_string(),
            setting: setting.to_string(),
            model: model.to_string(),
            task,
            net,
            train: self.train.clone(),
        });
    }

    /// Adds the standard models, by label, for one target. MLPs are matched
    /// to the Pure (`mlp-p`) or Hybrid (`mlp`) parameter count.
    fn standard(&mut self, family: &Family, setting: &str, models: &[&str], tweak: impl Fn(&mut NetworkSpec)) -> Result<()> {
        let n_in = family.input_dim();
        let target = family.to_string();
        for &m in models {
            let net = match m {
                "mlp" | "mlp-p" => {
                    let mut base = arch_spec(if m == "mlp" { Arch::HybridFikan } else { Arch::PureFikan }, n_in);
                    tweak(&mut base);
                    mlp_like(&base)?
                }
                other => {
                    let mut s = arch_spec(other.parse()?, n_in);
                    tweak(&mut s);
                    s
                }
            };
            self.push(&target, setting, m, Task::single(family.clone()), net);
        }
        Ok(())
    }
}

impl ExperimentPreset {
    pub fn build(name: PresetName, options: &PresetOptions) -> Result<Self> {
        if options.seeds.is_empty() {
            return Err(invalid("at least one seed is required"));
        }
        let mut train = TrainConfig::default();
        if let Some(e) = options.epochs {
            train.epochs = e;
        }
        train.seeds = options.seeds.clone();
        let mut b = Builder { jobs: Vec::new(), train };
        let same = |_: &mut NetworkSpec| {};
        match name {
            PresetName::OneD => {
                for f in one_d_targets() {
                    b.standard(&f, "", &["mlp-p", "mlp", "kan", "pure", "hybrid"], same)?;
                }
            }
            PresetName::HolderSweep => {
                for alpha in HOLDER_ALPHAS {
                    b.standard(&Family::HolderAbs { alpha }, "", &["mlp", "kan", "hybrid"], same)?;
                }
            }
            PresetName::ParamMatched => {
                for f in [Family::Polynomial, Family::ExpSin, Family::weierstrass_std(), Family::sawtooth()] {
                    let target = f.to_string();
                    let mut kan = arch_spec(Arch::Kan, 1);
                    kan.grid_size = 22;
                    b.push(&target, "", "kan-g22", Task::single(f.clone()), kan);
                    b.push(&target, "", "hybrid", Task::single(f.clone()), arch_spec(Arch::HybridFikan, 1));
                }
            }
            PresetName::Scaling => {
                for f in [Family::ExpSin, Family::weierstrass_std(), Family::sawtooth()] {
                    for g in SCALING_GRIDS {
                        b.standard(&f, &format!("G={g}"), &["mlp", "kan", "pure", "hybrid"], |s| s.grid_size = g)?;
                    }
                }
            }
            PresetName::Noise => {
                for f in [Family::weierstrass_std(), Family::sawtooth()] {
                    for snr in NOISE_SNRS_DB {
                        for m in ["kan", "pure", "hybrid"] {
                            let task = Task::Single { family: f.clone(), noise_snr_db: Some(snr) };
                            b.push(&f.to_string(), &format!("snr={snr}"), m, task, arch_spec(m.parse()?, 1));
                        }
                    }
                }
            }
            PresetName::Continual => {
                let families = continual_tasks();
                for m in ["mlp", "kan", "pure", "hybrid"] {
                    let net = if m == "mlp" {
                        mlp_like(&arch_spec(Arch::HybridFikan, 1))?
                    } else {
                        arch_spec(m.parse()?, 1)
                    };
                    b.push("continual", "", m, Task::Continual { families: families.clone() }, net);
                }
            }
            PresetName::RegSweep => {
                for f in [Family::Polynomial, Family::weierstrass_std()] {
                    for lambda in REG_LAMBDAS {
                        let mut job = Job {
                            target: f.to_string(),
                            setting: format!("lambda={lambda}"),
                            model: "pure".into(),
                            task: Task::single(f.clone()),
                            net: arch_spec(Arch::PureFikan, 1),
                            train: b.train.clone(),
                        };
                        job.train.reg.lambda_frac = lambda;
                        b.jobs.push(job);
                    }
                }
            }
            PresetName::Depth => {
                let f = Family::weierstrass_std();
                for k in DEPTHS {
                    let mut net = arch_spec(Arch::HybridFikan, 1);
                    net.fractal_depth = k;
                    b.push(&f.to_string(), &format!("K={k}"), "hybrid", Task::single(f.clone()), net);
                }
            }
            PresetName::TwoD => {
                for f in [Family::Ackley2d, Family::Weierstrass2d] {
                    b.standard(&f, "", &["mlp", "kan", "pure", "hybrid"], same)?;
                }
            }
            PresetName::Pde => {
                for f in pde_targets() {
                    b.standard(&f, "", &["mlp", "kan", "hybrid"], same)?;
                }
            }
            PresetName::Diagnostic => {
                for f in diagnostic_targets() {
                    b.standard(&f, "", &["pure", "hybrid"], same)?;
                }
            }
        }
        let jobs = b.jobs.into_iter().filter(|j| options.keeps(j)).collect();
        Ok(Self { name, seeds: options.seeds.clone(), jobs })
    }
}

pub fn one_d_targets() -> Vec<Family> {
    vec![
        Family::Polynomial,
        Family::ExpSin,
        Family::Chirp,
        Family::weierstrass_std(),
        Family::weierstrass_rough(),
        Family::sawtooth(),
        Family::Multiscale,
    ]
}

/// Four Gaussian bumps followed by the Takagi–Landsberg function.
pub fn continual_tasks() -> Vec<Family> {
    let mut v: Vec<Family> = [-0.6, -0.2, 0.2, 0.6]
        .into_iter()
        .map(|center| Family::GaussianPeak { center, width: 0.1 })
        .collect();
    v.push(Family::sawtooth());
    v
}

pub fn pde_targets() -> Vec<Family> {
    let mut v: Vec<Family> = DIFFUSION_HURST.iter().map(|&h_c| Family::RoughDiffusion { h_c }).collect();
    v.extend(HEAT_SIGMAS.iter().map(|&sigma| Family::StochasticHeat { sigma }));
    v.extend(TERRAIN_ROUGHNESS.iter().map(|&r| Family::Terrain { r }));
    v.push(Family::LshapeAnalytic);
    v
}

pub fn diagnostic_targets() -> Vec<Family> {
    vec![
        Family::HolderAbs { alpha: 2.0 },
        Family::HolderAbs { alpha: 1.0 },
        Family::HolderAbs { alpha: 0.6 },
        Family::HolderAbs { alpha: 0.3 },
        Family::weierstrass_std(),
    ]
}

/// One seed of one job.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub target: String,
    pub setting: String,
    pub model: String,
    pub seed: u64,
    pub result: crate::train::RunResult,
    /// Final test MSE on every task of a continual sequence.
    pub task_mse: Option<Vec<f64>>,
}

impl RunRecord {
    /// The MSE aggregated across seeds; diverged runs count as `+∞`.
    pub fn metric(&self) -> f64 {
        if self.result.diverged() {
            return f64::INFINITY;
        }
        match &self.task_mse {
            Some(t) => t.iter().sum::<f64>() / t.len() as f64,
            None => self.result.final_test_mse,
        }
    }
}

/// Runs `job` for `seed`, returning the record and the trained network.
pub fn run_job(job: &Job, seed: u64) -> Result<(RunRecord, Network)> {
    let mut net = Network::new(&job.net, seed)?;
    let (result, task_mse) = match &job.task {
        Task::Single { family, noise_snr_db } => {
            let spec = TargetSpec { family: family.clone(), noise_snr_db: *noise_snr_db, seed };
            let data = generate(&spec)?;
            (run(&mut net, &data.train, &data.test, &job.train, seed)?, None)
        }
        Task::Continual { families } => {
            let data = families
                .iter()
                .map(|f| generate(&TargetSpec::new(f.clone(), seed)))
                .collect::<Result<Vec<_>>>()?;
            let mut last = None;
            let mut wall = 0.0;
            for d in &data {
                let r = run(&mut net, &d.train, &d.test, &job.train, seed)?;
                wall += r.wall_time_s;
                let stop = r.diverged();
                last = Some(r);
                if stop {
                    break;
                }
            }
            let mut r = last.ok_or_else(|| invalid("continual job without tasks"))?;
            r.wall_time_s = wall;
            let mse = if r.diverged() {
                vec![f64::INFINITY; data.len()]
            } else {
                data.iter().map(|d| evaluate_mse(&net, &d.test)).collect::<Result<_>>()?
            };
            (r, Some(mse))
        }
    };
    let record = RunRecord {
        target: job.target.clone(),
        setting: job.setting.clone(),
        model: job.model.clone(),
        seed,
        result,
        task_mse,
    };
    Ok((record, net))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub target: String,
    pub setting: String,
    pub model: String,
    pub n_params: usize,
    pub n_seeds: usize,
    pub n_diverged: usize,
    pub mean_mse: f64,
    pub std_mse: f64,
    pub median_mse: f64,
    /// Median KAN MSE over median model MSE within the same target and
    /// setting.
    pub ratio_vs_kan: Option<f64>,
    pub mean_dim: Option<f64>,
    pub mean_energy_ratio: Option<f64>,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn mean_opt(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.collect::<Option<_>>()?;
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Groups records by (target, setting, model) in order of first
/// appearance.
pub fn aggregate(records: &[RunRecord]) -> Vec<AggregateRow> {
    let mut order: Vec<(String, String, String)> = Vec::new();
    let mut groups: HashMap<(String, String, String), Vec<&RunRecord>> = HashMap::new();
    for r in records {
        let key = (r.target.clone(), r.setting.clone(), r.model.clone());
        if !groups.contains_key(&key) {
            order.push(key.clone());
        }
        groups.entry(key).or_default().push(r);
    }
    let mut rows: Vec<AggregateRow> = order
        .iter()
        .map(|key| {
            let g = &groups[key];
            let m: Vec<f64> = g.iter().map(|r| r.metric()).collect();
            let (mean_mse, std_mse) = mean_std(&m);
            AggregateRow {
                target: key.0.clone(),
                setting: key.1.clone(),
                model: key.2.clone(),
                n_params: g[0].result.n_params,
                n_seeds: g.len(),
                n_diverged: g.iter().filter(|r| r.result.diverged()).count(),
                mean_mse,
                std_mse,
                median_mse: median(&m),
                ratio_vs_kan: None,
                mean_dim: mean_opt(g.iter().map(|r| r.result.final_dim)),
                mean_energy_ratio: mean_opt(g.iter().map(|r| r.result.final_energy_ratio)),
            }
        })
        .collect();
    let kan: HashMap<(String, String), f64> = rows
        .iter()
        .filter(|r| r.model.starts_with("kan"))
        .map(|r| ((r.target.clone(), r.setting.clone()), r.median_mse))
        .collect();
    for r in &mut rows {
        r.ratio_vs_kan = kan.get(&(r.target.clone(), r.setting.clone())).map(|k| k / r.median_mse);
    }
    rows
}

/// Rows as CSV text.
pub fn rows_csv(rows: &[AggregateRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    String::from_utf8(bytes).map_err(|e| invalid(e.to_string()))
}

/// Least-squares `γ` with `MSE ∝ p^{−γ}` over one model/target series.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingFit {
    pub target: String,
    pub model: String,
    pub gamma: f64,
    pub points: usize,
}

pub fn fit_exponent(params: &[f64], mse: &[f64]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = params
        .iter()
        .zip(mse)
        .filter(|(p, m)| **p > 0.0 && **m > 0.0 && m.is_finite())
        .map(|(p, m)| (p.ln(), m.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    Some(-sxy / sxx)
}

pub fn scaling_fits(rows: &[AggregateRow]) -> Vec<ScalingFit> {
    let mut order: Vec<(String, String)> = Vec::new();
    for r in rows {
        let key = (r.target.clone(), r.model.clone());
        if !order.contains(&key) {
            order.push(key);
        }
    }
    order
        .into_iter()
        .filter_map(|(target, model)| {
            let series: Vec<&AggregateRow> = rows.iter().filter(|r| r.target == target && r.model == model).collect();
            let p: Vec<f64> = series.iter().map(|r| r.n_params as f64).collect();
            let m: Vec<f64> = series.iter().map(|r| r.median_mse).collect();
            fit_exponent(&p, &m).map(|gamma| ScalingFit { target, model, gamma, points: series.len() })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckStatus {
    Pass,
    Fail,
    /// Rows needed by the check were filtered out.
    Skipped,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub status: CheckStatus,
    pub detail: String,
}

impl Check {
    fn new(name: &str, value: Option<(bool, String)>) -> Self {
        let (status, detail) = match value {
            Some((true, d)) => (CheckStatus::Pass, d),
            Some((false, d)) => (CheckStatus::Fail, d),
            None => (CheckStatus::Skipped, "missing rows".into()),
        };
        Check { name: name.to_string(), status, detail }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub target: String,
    pub setting: String,
    pub model: String,
    pub seed: u64,
    pub wall_time_s: f64,
}

pub struct PresetOutput {
    pub preset: ExperimentPreset,
    pub options: PresetOptions,
    pub records: Vec<RunRecord>,
    pub rows: Vec<AggregateRow>,
    pub checks: Vec<Check>,
    pub scaling: Vec<ScalingFit>,
    pub timings: Vec<Timing>,
}

impl PresetOutput {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.status != CheckStatus::Fail)
    }

    pub fn runs_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.records)?)
    }

    pub fn config_json(&self) -> Result<String> {
        let v = serde_json::json!({
            "preset": self.preset.name,
            "options": self.options,
            "jobs": self.preset.jobs,
        });
        Ok(serde_json::to_string_pretty(&v)?)
    }

    /// Writes `rows.csv`, `runs.json`, `config.json`, `checks.json` and
    /// `timings.json` (plus `exponents.csv` for scaling) into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("rows.csv"), rows_csv(&self.rows)?)?;
        fs::write(dir.join("runs.json"), self.runs_json()?)?;
        fs::write(dir.join("config.json"), self.config_json()?)?;
        fs::write(dir.join("checks.json"), serde_json::to_string_pretty(&self.checks)?)?;
        fs::write(dir.join("timings.json"), serde_json::to_string_pretty(&self.timings)?)?;
        if !self.scaling.is_empty() {
            let mut w = csv::Writer::from_path(dir.join("exponents.csv"))?;
            for s in &self.scaling {
                w.serialize(s)?;
            }
            w.flush()?;
        }
        Ok(())
    }
}

/// Reads a `runs.json` file written by [`PresetOutput::write`].
pub fn read_runs(path: &Path) -> Result<Vec<RunRecord>> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

/// Runs every (job, seed) pair on a pool of `options.jobs` workers (default:
/// available cores). Records come back in job-then-seed order regardless of
/// scheduling.
pub fn execute(preset: ExperimentPreset, options: &PresetOptions) -> Result<PresetOutput> {
    let pairs: Vec<(usize, usize)> = (0..preset.jobs.len())
        .flat_map(|j| (0..preset.seeds.len()).map(move |s| (j, s)))
        .collect();
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = options.jobs {
        if n == 0 {
            return Err(invalid("--jobs must be at least 1"));
        }
        builder = builder.num_threads(n);
    }
    let pool = builder.build().map_err(|e| invalid(e.to_string()))?;
    let mut done: Vec<((usize, usize), RunRecord)> = pool.install(|| {
        pairs
            .par_iter()
            .map(|&(j, s)| run_job(&preset.jobs[j], preset.seeds[s]).map(|(r, _)| ((j, s), r)))
            .collect::<Result<Vec<_>>>()
    })?;
    done.sort_by_key(|(k, _)| *k);
    let records: Vec<RunRecord> = done.into_iter().map(|(_, r)| r).collect();
    let rows = aggregate(&records);
    let scaling = if preset.name == PresetName::Scaling { scaling_fits(&rows) } else { Vec::new() };
    let timings: Vec<Timing> = records
        .iter()
        .map(|r| Timing {
            target: r.target.clone(),
            setting: r.setting.clone(),
            model: r.model.clone(),
            seed: r.seed,
            wall_time_s: r.result.wall_time_s,
        })
        .collect();
    let checks = checks(preset.name, &records, &rows, &scaling, &timings);
    Ok(PresetOutput { preset, options: options.clone(), records, rows, checks, scaling, timings })
}

/// Builds and runs a preset.
pub fn run_preset(name: PresetName, options: &PresetOptions) -> Result<PresetOutput> {
    execute(ExperimentPreset::build(name, options)?, options)
}

struct Lookup<'a> {
    rows: &'a [AggregateRow],
}

impl Lookup<'_> {
    fn row(&self, target: &str, setting: &str, model: &str) -> Option<&AggregateRow> {
        self.rows.iter().find(|r| r.target == target && r.setting == setting && r.model == model)
    }

    fn med(&self, target: &str, setting: &str, model: &str) -> Option<f64> {
        self.row(target, setting, model).map(|r| r.median_mse)
    }

    /// Median of `num` over median of `den`.
    fn ratio(&self, target: &str, setting: &str, num: &str, den: &str) -> Option<f64> {
        Some(self.med(target, setting, num)? / self.med(target, setting, den)?)
    }

    fn dim(&self, target: &str, setting: &str, model: &str) -> Option<f64> {
        self.row(target, setting, model)?.mean_dim
    }
}

fn at_least(r: Option<f64>, min: f64) -> Option<(bool, String)> {
    r.map(|v| (v >= min, format!("{v:.4} (need >= {min})")))
}

fn param_check(l: &Lookup, target: &str, model: &str, want: usize) -> Check {
    Check::new(
        &format!("{model} has {want} parameters"),
        l.row(target, "", model).map(|r| (r.n_params == want, r.n_params.to_string())),
    )
}

fn series<'a>(l: &'a Lookup, target: &'a str, model: &'a str) -> impl Iterator<Item = &'a AggregateRow> + 'a {
    l.rows.iter().filter(move |r| r.target == target && r.model == model)
}

fn checks(name: PresetName, records: &[RunRecord], rows: &[AggregateRow], scaling: &[ScalingFit], timings: &[Timing]) -> Vec<Check> {
    let l = Lookup { rows };
    let mut out = Vec::new();
    let sane = records
        .iter()
        .filter(|r| !r.result.diverged())
        .filter(|r| !(r.result.final_train_mse <= r.result.initial_train_mse))
        .count();
    out.push(Check::new(
        "final train MSE <= initial train MSE",
        Some((sane == 0, format!("{sane} runs got worse"))),
    ));
    let ws = Family::weierstrass_std().to_string();
    let saw = Family::sawtooth().to_string();
    match name {
        PresetName::OneD => {
            out.push(Check::new(
                "KAN on polynomial within [5e-4, 2e-2]",
                l.med("polynomial", "", "kan").map(|v| ((5e-4..=2e-2).contains(&v), format!("{v:.3e}"))),
            ));
            out.push(Check::new("Hybrid beats KAN on sawtooth by >= 2x", at_least(l.ratio(&saw, "", "kan", "hybrid"), 2.0)));
            out.push(Check::new("Pure loses to KAN on exp_sin by >= 10x", at_least(l.ratio("exp_sin", "", "pure", "kan"), 10.0)));
            for (m, n) in [("kan", 416), ("pure", 488), ("hybrid", 840), ("mlp-p", 487), ("mlp", 841)] {
                out.push(param_check(&l, "polynomial", m, n));
            }
        }
        PresetName::HolderSweep => {
            for alpha in HOLDER_ALPHAS {
                let t = Family::HolderAbs { alpha }.to_string();
                out.push(Check::new(
                    &format!("Hybrid <= KAN at alpha={alpha}"),
                    l.ratio(&t, "", "hybrid", "kan").map(|v| (v <= 1.0, format!("hybrid/kan {v:.4}"))),
                ));
            }
            let t = |a: f64| Family::HolderAbs { alpha: a }.to_string();
            out.push(Check::new("ratio >= 5 at alpha=1", at_least(l.ratio(&t(1.0), "", "kan", "hybrid"), 5.0)));
            out.push(Check::new("ratio >= 1 at alpha=0.2", at_least(l.ratio(&t(0.2), "", "kan", "hybrid"), 1.0)));
            out.push(Check::new(
                "ratio at alpha=1.5 > ratio at alpha=0.4",
                l.ratio(&t(1.5), "", "kan", "hybrid")
                    .zip(l.ratio(&t(0.4), "", "kan", "hybrid"))
                    .map(|(a, b)| (a > b, format!("{a:.3} vs {b:.3}"))),
            ));
        }
        PresetName::ParamMatched => {
            out.push(param_check(&l, "polynomial", "kan-g22", 864));
            out.push(param_check(&l, "polynomial", "hybrid", 840));
            out.push(Check::new("Hybrid beats KAN(G=22) on sawtooth by >= 1.5x", at_least(l.ratio(&saw, "", "kan-g22", "hybrid"), 1.5)));
        }
        PresetName::Scaling => {
            let gamma = |t: &str, m: &str| scaling.iter().find(|s| s.target == t && s.model == m).map(|s| s.gamma);
            out.push(Check::new(
                "MLP on sawtooth has gamma within 0 +/- 0.1",
                gamma(&saw, "mlp").map(|g| (g.abs() <= 0.1, format!("{g:.4}"))),
            ));
            out.push(Check::new("Hybrid on sawtooth has gamma > 0", gamma(&saw, "hybrid").map(|g| (g > 0.0, format!("{g:.4}")))));
            out.push(Check::new(
                "Pure on sawtooth worsens from G=8 to G=20",
                l.med(&saw, "G=20", "pure")
                    .zip(l.med(&saw, "G=8", "pure"))
                    .map(|(a, b)| (a > b, format!("{a:.3e} vs {b:.3e}"))),
            ));
        }
        PresetName::Noise => {
            out.push(Check::new("Hybrid/KAN ratio on sawtooth >= 2 at 5 dB", at_least(l.ratio(&saw, "snr=5", "kan", "hybrid"), 2.0)));
            for t in [&ws, &saw] {
                let kan: Vec<f64> = series(&l, t, "kan").map(|r| r.median_mse).collect();
                let spread = (kan.len() == NOISE_SNRS_DB.len()).then(|| {
                    let hi = kan.iter().cloned().fold(f64::MIN, f64::max);
                    let lo = kan.iter().cloned().fold(f64::MAX, f64::min);
                    hi / lo
                });
                out.push(Check::new(
                    &format!("KAN roughly flat across SNR on {t}"),
                    spread.map(|s| (s <= 1.5, format!("max/min {s:.3} (need <= 1.5)"))),
                ));
            }
            out.push(Check::new(
                "Hybrid on sawtooth degrades from 100 dB to 5 dB",
                l.med(&saw, "snr=5", "hybrid")
                    .zip(l.med(&saw, "snr=100", "hybrid"))
                    .map(|(a, b)| (a > b, format!("{a:.3e} vs {b:.3e}"))),
            ));
        }
        PresetName::Continual => {
            let meds: Vec<f64> = ["mlp", "kan", "pure", "hybrid"].iter().filter_map(|m| l.med("continual", "", m)).collect();
            let band = (meds.len() == 4).then(|| {
                meds.iter().cloned().fold(f64::MIN, f64::max) / meds.iter().cloned().fold(f64::MAX, f64::min)
            });
            out.push(Check::new(
                "all models within a common band",
                band.map(|b| (b <= 2.0, format!("max/min {b:.3} (need <= 2)"))),
            ));
            out.push(Check::new(
                "Pure <= KAN",
                l.ratio("continual", "", "pure", "kan").map(|v| (v <= 1.0, format!("pure/kan {v:.4}"))),
            ));
        }
        PresetName::RegSweep => {
            out.push(Check::new(
                "lambda=1 polynomial learned dim <= 1.01",
                l.dim("polynomial", "lambda=1", "pure").map(|d| (d <= 1.01, format!("{d:.4}"))),
            ));
            out.push(Check::new(
                "polynomial MSE improves >= 10x from lambda=0 to lambda=1",
                at_least(
                    l.med("polynomial", "lambda=0", "pure").zip(l.med("polynomial", "lambda=1", "pure")).map(|(a, b)| a / b),
                    10.0,
                ),
            ));
            for t in ["polynomial", ws.as_str()] {
                let dims: Option<Vec<f64>> = REG_LAMBDAS.iter().map(|lam| l.dim(t, &format!("lambda={lam}"), "pure")).collect();
                out.push(Check::new(
                    &format!("learned dim non-increasing in lambda on {t}"),
                    dims.map(|d| (d.windows(2).all(|w| w[1] <= w[0] + 5e-3), format!("{d:.4?}"))),
                ));
            }
        }
        PresetName::Depth => {
            let mse: Option<Vec<f64>> = DEPTHS.iter().map(|k| l.med(&ws, &format!("K={k}"), "hybrid")).collect();
            out.push(Check::new(
                "best depth lies in {1, 2, 4}",
                mse.as_ref().map(|m| {
                    let best = (0..m.len()).min_by(|&a, &b| m[a].total_cmp(&m[b])).unwrap_or(0);
                    (DEPTHS[best] <= 4, format!("argmin K={}", DEPTHS[best]))
                }),
            ));
            out.push(Check::new(
                "MSE(K=12) > MSE(K=2)",
                l.med(&ws, "K=12", "hybrid")
                    .zip(l.med(&ws, "K=2", "hybrid"))
                    .map(|(a, b)| (a > b, format!("{a:.3e} vs {b:.3e}"))),
            ));
            let time = |k: usize| {
                let t: Vec<f64> = timings.iter().filter(|t| t.setting == format!("K={k}")).map(|t| t.wall_time_s).collect();
                (!t.is_empty()).then(|| median(&t))
            };
            out.push(Check::new(
                "wall time grows from K=1 to K=12",
                time(12).zip(time(1)).map(|(a, b)| (a > b, format!("{a:.2}s vs {b:.2}s"))),
            ));
        }
        PresetName::TwoD => {
            let ack = Family::Ackley2d.to_string();
            let w2 = Family::Weierstrass2d.to_string();
            out.push(Check::new("Hybrid beats KAN on Ackley by >= 3x", at_least(l.ratio(&ack, "", "kan", "hybrid"), 3.0)));
            out.push(Check::new(
                "Pure beats KAN on 2D Weierstrass",
                l.ratio(&w2, "", "pure", "kan").map(|v| (v < 1.0, format!("pure/kan {v:.4}"))),
            ));
            for t in [&ack, &w2] {
                let worst = ["kan", "pure", "hybrid"]
                    .iter()
                    .map(|m| l.med(t, "", m))
                    .collect::<Option<Vec<f64>>>()
                    .zip(l.med(t, "", "mlp"))
                    .map(|(others, mlp)| (others.iter().all(|&o| mlp > o), format!("mlp {mlp:.3e}")));
                out.push(Check::new(&format!("MLP worst on {t}"), worst));
            }
        }
        PresetName::Pde => {
            for h_c in DIFFUSION_HURST {
                let t = Family::RoughDiffusion { h_c }.to_string();
                out.push(Check::new(&format!("Hybrid/KAN >= 10 on {t}"), at_least(l.ratio(&t, "", "kan", "hybrid"), 10.0)));
            }
            let heat: Option<Vec<f64>> = HEAT_SIGMAS
                .iter()
                .map(|&sigma| l.ratio(&Family::StochasticHeat { sigma }.to_string(), "", "kan", "hybrid"))
                .collect();
            out.push(Check::new(
                "heat ratio decreasing in sigma",
                heat.map(|r| (r.windows(2).all(|w| w[1] < w[0]), format!("{r:.3?}"))),
            ));
            let terrain: Option<Vec<f64>> = TERRAIN_ROUGHNESS
                .iter()
                .map(|&r| l.ratio(&Family::Terrain { r }.to_string(), "", "kan", "hybrid"))
                .collect();
            out.push(Check::new(
                "terrain ratio increasing in R",
                terrain.map(|r| (r.windows(2).all(|w| w[1] > w[0]), format!("{r:.3?}"))),
            ));
        }
        PresetName::Diagnostic => {
            let t = |a: f64| Family::HolderAbs { alpha: a }.to_string();
            out.push(Check::new(
                "Hybrid learned dim at alpha=2 <= 1.02",
                l.dim(&t(2.0), "", "hybrid").map(|d| (d <= 1.02, format!("{d:.4}"))),
            ));
            out.push(Check::new(
                "Hybrid dim(alpha=0.3) > dim(alpha=1)",
                l.dim(&t(0.3), "", "hybrid")
                    .zip(l.dim(&t(1.0), "", "hybrid"))
                    .map(|(a, b)| (a > b, format!("{a:.4} vs {b:.4}"))),
            ));
            let pure: Option<Vec<f64>> = diagnostic_targets().iter().map(|f| l.dim(&f.to_string(), "", "pure")).collect();
            out.push(Check::new(
                "Pure learned dims all > 1.1",
                pure.map(|d| (d.iter().all(|&v| v > 1.1), format!("{d:.4?}"))),
            ));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick(epochs: usize) -> PresetOptions {
        PresetOptions { seeds: vec![42], epochs: Some(epochs), jobs: Some(1), ..Default::default() }
    }

    #[test]
    fn preset_names_round_trip() {
        for p in PresetName::ALL {
            assert_eq!(p.name().parse::<PresetName>().unwrap(), p);
            assert_eq!(serde_json::to_string(&p).unwrap(), format!("\"{}\"", p.name()));
        }
        assert!("nope".parse::<PresetName>().is_err());
    }

    #[test]
    fn preset_shapes() {
        let o = PresetOptions::default();
        let n = |p| ExperimentPreset::build(p, &o).unwrap().jobs.len();
        assert_eq!(n(PresetName::OneD), 7 * 5);
        assert_eq!(n(PresetName::HolderSweep), 7 * 3);
        assert_eq!(n(PresetName::ParamMatched), 4 * 2);
        assert_eq!(n(PresetName::Scaling), 3 * 6 * 4);
        assert_eq!(n(PresetName::Noise), 2 * 6 * 3);
        assert_eq!(n(PresetName::Continual), 4);
        assert_eq!(n(PresetName::RegSweep), 2 * 6);
        assert_eq!(n(PresetName::Depth), 7);
        assert_eq!(n(PresetName::TwoD), 2 * 4);
        assert_eq!(n(PresetName::Pde), 12 * 3);
        assert_eq!(n(PresetName::Diagnostic), 5 * 2);
        assert_eq!(ExperimentPreset::build(PresetName::Depth, &o).unwrap().seeds, DEFAULT_SEEDS.to_vec());
    }

    #[test]
    fn matched_parameter_counts() {
        let p = ExperimentPreset::build(PresetName::OneD, &PresetOptions::default()).unwrap();
        let count_of = |m: &str| count(&p.jobs.iter().find(|j| j.model == m).unwrap().net).unwrap();
        assert_eq!(count_of("kan"), 416);
        assert_eq!(count_of("pure"), 488);
        assert_eq!(count_of("hybrid"), 840);
        assert_eq!(count_of("mlp-p"), 487);
        assert_eq!(count_of("mlp"), 841);
        let pm = ExperimentPreset::build(PresetName::ParamMatched, &PresetOptions::default()).unwrap();
        assert_eq!(count(&pm.jobs[0].net).unwrap(), 864);
    }

    #[test]
    fn filters_and_bad_options() {
        let o = PresetOptions {
            targets: Some(vec!["sawtooth".into()]),
            models: Some(vec!["kan".into(), "hybrid".into()]),
            ..Default::default()
        };
        let p = ExperimentPreset::build(PresetName::OneD, &o).unwrap();
        assert_eq!(p.jobs.len(), 2);
        let empty = PresetOptions { seeds: vec![], ..Default::default() };
        assert!(ExperimentPreset::build(PresetName::Depth, &empty).is_err());
        let zero = PresetOptions { jobs: Some(0), ..quick(1) };
        assert!(run_preset(PresetName::Depth, &zero).is_err());
    }

    #[test]
    fn median_and_moments() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert_eq!(median(&[1.0, f64::INFINITY, 2.0]), 2.0);
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!((m, s), (2.0, 1.0));
    }

    #[test]
    fn exponent_fit_recovers_power_law() {
        let p = [100.0, 200.0, 400.0, 800.0];
        let m: Vec<f64> = p.iter().map(|x: &f64| 3.0 * x.powf(-1.5)).collect();
        assert!((fit_exponent(&p, &m).unwrap() - 1.5).abs() < 1e-12);
        assert_eq!(fit_exponent(&[1.0], &[1.0]), None);
    }

    fn record(target: &str, model: &str, seed: u64, mse: f64, diverged: bool) -> RunRecord {
        let mut result = crate::train::RunResult {
            arch: Arch::Kan,
            seed,
            n_params: 10,
            initial_train_mse: 1.0,
            initial_test_mse: 1.0,
            train_mse: vec![],
            test_mse: vec![],
            final_train_mse: 0.5,
            final_test_mse: mse,
            lr: vec![],
            dim_trajectory: vec![],
            energy_trajectory: vec![],
            contraction_trajectory: None,
            final_dim: None,
            final_energy_ratio: None,
            diverged_at: None,
            config: TrainConfig::default(),
            wall_time_s: 0.0,
        };
        if diverged {
            result.diverged_at = Some(3);
        }
        RunRecord { target: target.into(), setting: String::new(), model: model.into(), seed, result, task_mse: None }
    }

    #[test]
    fn aggregation_uses_medians_and_counts_divergence() {
        let recs = vec![
            record("t", "kan", 1, 0.4, false),
            record("t", "kan", 2, 0.2, false),
            record("t", "kan", 3, 0.3, false),
            record("t", "hybrid", 1, 0.01, false),
            record("t", "hybrid", 2, 0.03, true),
            record("t", "hybrid", 3, 0.02, false),
        ];
        let rows = aggregate(&recs);
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].model, "kan");
        assert_eq!(rows[0].ratio_vs_kan, Some(1.0));
        assert_eq!(rows[1].n_diverged, 1);
        assert_eq!(rows[1].median_mse, 0.02);
        assert_eq!(rows[1].mean_mse, f64::INFINITY);
        assert!((rows[1].ratio_vs_kan.unwrap() - 15.0).abs() < 1e-12);
    }

    #[test]
    fn outputs_reaggregate_bit_exactly_and_are_deterministic() {
        let o = PresetOptions {
            seeds: vec![42, 7],
            epochs: Some(4),
            jobs: Some(2),
            settings: Some(vec!["K=1".into(), "K=2".into()]),
            ..Default::default()
        };
        let a = run_preset(PresetName::Depth, &o).unwrap();
        assert_eq!(a.records.len(), 4);
        assert_eq!(a.rows.len(), 2);
        assert!(a.records.iter().all(|r| r.result.test_mse.len() == 4));
        let dir = tempfile::tempdir().unwrap();
        a.write(dir.path()).unwrap();
        let back = read_runs(&dir.path().join("runs.json")).unwrap();
        assert_eq!(serde_json::to_string_pretty(&back).unwrap(), a.runs_json().unwrap());
        let csv = std::fs::read_to_string(dir.path().join("rows.csv")).unwrap();
        assert_eq!(rows_csv(&aggregate(&back)).unwrap(), csv);
        let b = run_preset(PresetName::Depth, &PresetOptions { jobs: Some(1), ..o }).unwrap();
        assert_eq!(a.runs_json().unwrap(), b.runs_json().unwrap());
        assert!(a.checks.iter().any(|c| c.status == CheckStatus::Skipped));
    }

    #[test]
    fn continual_scores_every_task() {
        let o = PresetOptions { models: Some(vec!["kan".into()]), ..quick(3) };
        let out = run_preset(PresetName::Continual, &o).unwrap();
        let r = &out.records[0];
        assert_eq!(r.task_mse.as_ref().unwrap().len(), 5);
        assert_eq!(out.rows[0].median_mse, r.metric());
    }
}
