use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use fikan::basis::{fif_bases, required_depth, ContractionParams, UniformGrid, D_MAX};
use fikan::bench::{self, Check, CheckStatus, Job, PresetName, PresetOptions, RunRecord, Task, HIDDEN};
use fikan::diffengine::Tensor;
use fikan::model::{Arch, NetworkSpec};
use fikan::targets::{generate, Family, TargetSpec};
use fikan::train::{TrainConfig, DEFAULT_SEEDS};
use fikan::verify;

use crate::config::Resolver;
use crate::{BasesArgs, CliError, FitArgs, GenArgs, PresetArgs};

fn results_root() -> PathBuf {
    std::env::var_os("FIKAN_RESULTS_DIR").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("results"))
}

fn timestamped(parts: &[&str]) -> PathBuf {
    let mut p = results_root();
    for part in parts {
        p.push(part);
    }
    p.push(chrono::Local::now().format("%Y%m%d-%H%M%S-%3f").to_string());
    p
}

fn write(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))
}

fn parse<T: FromStr<Err = fikan::Error>>(what: &str, s: &str) -> Result<T, CliError> {
    T::from_str(s).map_err(|e| CliError::Usage(format!("{what}: {e}")))
}

fn print_checks(checks: &[Check]) {
    let width = checks.iter().map(|c| c.name.len()).max().unwrap_or(0);
    for c in checks {
        let tag = match c.status {
            CheckStatus::Pass => "PASS",
            CheckStatus::Fail => "FAIL",
            CheckStatus::Skipped => "SKIP",
        };
        println!("{tag}  {:width$}  {}", c.name, c.detail);
    }
}

fn failures(checks: &[Check]) -> Option<String> {
    let failed: Vec<&str> = checks.iter().filter(|c| c.status == CheckStatus::Fail).map(|c| c.name.as_str()).collect();
    (!failed.is_empty()).then(|| failed.join("; "))
}

pub fn preset(a: PresetArgs) -> Result<(), CliError> {
    let mut r = Resolver::new(
        "preset",
        a.config.as_deref(),
        &["name", "seeds", "jobs", "epochs", "targets", "models", "settings", "out"],
    )?;
    let name: PresetName = r
        .opt("name", a.name)?
        .ok_or_else(|| CliError::Usage("missing preset name".into()))?;
    let options = PresetOptions {
        seeds: r.get("seeds", a.seeds, || DEFAULT_SEEDS.to_vec())?,
        jobs: r.opt("jobs", a.jobs)?,
        epochs: r.opt("epochs", a.epochs)?,
        targets: r.opt("targets", a.targets)?,
        models: r.opt("models", a.models)?,
        settings: r.opt("settings", a.settings)?,
    };
    let out = r.get("out", a.out, || timestamped(&[name.name()]))?;
    let output = bench::run_preset(name, &options)?;
    output.write(&out)?;
    write(&out.join("config.json"), &r.to_json())?;
    write(&out.join("jobs.json"), &(output.config_json()? + "\n"))?;
    print_checks(&output.checks);
    println!("wrote {}", out.display());
    match failures(&output.checks) {
        Some(f) => Err(CliError::Failed(f)),
        None => Ok(()),
    }
}

pub fn fit(a: FitArgs) -> Result<(), CliError> {
    let mut r = Resolver::new(
        "fit",
        a.config.as_deref(),
        &["model", "target", "grid", "depth", "hidden", "epochs", "seed", "lambda_frac", "lr", "noise_snr_db", "out"],
    )?;
    let model = r.get("model", a.model, || "hybrid".to_string())?;
    let arch: Arch = parse("--model", &model)?;
    let target = r.get("target", a.target, || "sawtooth".to_string())?;
    let family: Family = parse("--target", &target)?;
    let hidden = r.get("hidden", a.hidden, || HIDDEN)?;
    let grid = r.get("grid", a.grid, || 8)?;
    let n_in = family.input_dim();
    let fractal = if arch == Arch::Mlp { Arch::HybridFikan } else { arch };
    let mut net = NetworkSpec::new(fractal, &[n_in, hidden, 1]);
    net.grid_size = grid;
    let depth = r.get("depth", a.depth, || net.fractal_depth)?;
    net.fractal_depth = depth;
    if arch == Arch::Mlp {
        net = bench::mlp_like(&net)?;
        r.set("mlp_widths", &net.widths)?;
    }
    let defaults = TrainConfig::default();
    let mut train = TrainConfig {
        epochs: r.get("epochs", a.epochs, || defaults.epochs)?,
        lr0: r.get("lr", a.lr, || defaults.lr0)?,
        ..defaults
    };
    train.reg.lambda_frac = r.get("lambda_frac", a.lambda_frac, || train.reg.lambda_frac)?;
    let seed = r.get("seed", a.seed, || DEFAULT_SEEDS[0])?;
    let noise_snr_db = r.opt("noise_snr_db", a.noise_snr_db)?;
    let out = r.get("out", a.out, || timestamped(&["fit"]))?;
    let job = Job {
        target,
        setting: String::new(),
        model,
        task: Task::Single { family, noise_snr_db },
        net,
        train,
    };
    let (record, trained) = bench::run_job(&job, seed)?;
    create_dir(&out)?;
    let runs: Vec<&RunRecord> = vec![&record];
    write(&out.join("runs.json"), &(serde_json::to_string_pretty(&runs).map_err(|e| CliError::Internal(e.to_string()))? + "\n"))?;
    write(&out.join("model.json"), &trained.to_json()?)?;
    write(&out.join("config.json"), &r.to_json())?;
    let res = &record.result;
    println!(
        "{} on {}: {} params, initial test MSE {:.4e}, final test MSE {:.4e}{}",
        job.model,
        job.target,
        res.n_params,
        res.initial_test_mse,
        res.final_test_mse,
        if res.diverged() { " (diverged)" } else { "" }
    );
    println!("wrote {}", out.display());
    Ok(())
}

pub fn bases(a: BasesArgs) -> Result<(), CliError> {
    let mut r = Resolver::new("bases", a.config.as_deref(), &["d", "grid_n", "depth", "samples", "out"])?;
    let n = r.get("grid_n", a.grid_n, || 4)?;
    let d = r.get("d", a.d, || vec![0.0])?;
    let d = match d.len() {
        1 => vec![d[0]; n],
        l if l == n => d,
        l => return Err(CliError::Usage(format!("--d needs 1 or {n} values, got {l}"))),
    };
    let d_max = d.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let fallback = required_depth(d_max, 1e-6)?;
    let depth = r.get("depth", a.depth, || fallback)?;
    let samples = r.get("samples", a.samples, || 1001)?;
    if samples < 2 {
        return Err(CliError::Usage("--samples must be at least 2".into()));
    }
    let out = r.get("out", a.out, || timestamped(&["bases"]))?;
    let grid = UniformGrid::new(0.0, 1.0, n)?;
    let c = ContractionParams::from_bounded(&Tensor::new(vec![1, n], d)?, D_MAX)?;
    let xs: Vec<f64> = (0..samples).map(|i| i as f64 / (samples - 1) as f64).collect();
    let phi = fif_bases(&Tensor::new(vec![samples, 1], xs.clone())?, &c, &grid, depth)?;
    let mut csv = String::from("x");
    for j in 0..=n {
        let _ = write!(csv, ",phi_{j}");
    }
    csv.push_str(",row_sum\n");
    for (b, x) in xs.iter().enumerate() {
        let row = phi.row(b, 0);
        let _ = write!(csv, "{x}");
        for v in row {
            let _ = write!(csv, ",{v}");
        }
        let _ = writeln!(csv, ",{}", row.iter().sum::<f64>());
    }
    create_dir(&out)?;
    write(&out.join("bases.csv"), &csv)?;
    write(&out.join("config.json"), &r.to_json())?;
    println!("wrote {} ({samples} samples, N = {n}, depth {depth})", out.display());
    Ok(())
}

pub fn gen(a: GenArgs) -> Result<(), CliError> {
    let mut r = Resolver::new("gen", a.config.as_deref(), &["target", "seed", "noise_snr_db", "out"])?;
    let target = r
        .opt("target", a.target)?
        .ok_or_else(|| CliError::Usage("missing --target".into()))?;
    let family: Family = parse("--target", &target)?;
    let seed = r.get("seed", a.seed, || DEFAULT_SEEDS[0])?;
    let noise_snr_db = r.opt("noise_snr_db", a.noise_snr_db)?;
    let label = format!("{}_seed{seed}", target.replace([':', '/'], "-"));
    let out = r.get("out", a.out, || results_root().join("gen").join(label))?;
    let data = generate(&TargetSpec { family, noise_snr_db, seed })?;
    data.write_dir(&out)?;
    write(&out.join("config.json"), &r.to_json())?;
    println!("wrote {} ({} train, {} test rows)", out.display(), data.train.len(), data.test.len());
    Ok(())
}

pub fn verify() -> Result<(), CliError> {
    let checks = verify::run_all();
    print_checks(&checks);
    match failures(&checks) {
        Some(f) => Err(CliError::Failed(f)),
        None => Ok(()),
    }
}
