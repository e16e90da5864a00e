use std::fmt;
use std::path::{Path, PathBuf};

use countgpfa::evaluate::{align_latents, error_vs_neurons_for, rate_mse};
use countgpfa::inference::map_latents;
use countgpfa::io::{
    read_counts_csv, read_fit_hyperparameters, read_json, read_matrix_csv, write_counts_csv, write_curve_csv,
    write_hyperparameters, write_json, write_matrix_csv, write_metrics_csv, FitRecord, Manifest, TruthRecord,
};
use countgpfa::simulate::{simulate as run_simulation, SimSpec};
use countgpfa::{fit as run_fit, reconstruct_rates, FitConfig, GpPrior, ModelKind, ObservationModel};

use crate::{EvaluateArgs, ExportArgs, FitArgs, InferArgs, Preset, SimulateArgs};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numerical(_) => 4,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Numerical(m) => f.write_str(m),
        }
    }
}

impl From<countgpfa::Error> for CliError {
    fn from(e: countgpfa::Error) -> Self {
        if e.is_numerical() {
            CliError::Numerical(e.to_string())
        } else {
            CliError::Data(e.to_string())
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn out_dir(path: &Path) -> Result<&Path> {
    if path.is_dir() {
        Ok(path)
    } else {
        Err(CliError::Data(format!("output directory {} does not exist", path.display())))
    }
}

fn out_file(path: &Path) -> Result<&Path> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() && !p.is_dir() => {
            Err(CliError::Data(format!("output directory {} does not exist", p.display())))
        }
        _ => Ok(path),
    }
}

fn model_for(kind: ModelKind, alpha: Option<f64>, n: Option<u32>, data: &countgpfa::CountDataset) -> Result<ObservationModel> {
    if alpha.is_some() && kind != ModelKind::NegBinomial {
        return Err(CliError::Usage("--alpha applies to the negbinom model only".into()));
    }
    if n.is_some() && kind != ModelKind::Binomial {
        return Err(CliError::Usage("--n applies to the binomial model only".into()));
    }
    Ok(match (kind, alpha, n) {
        (ModelKind::NegBinomial, Some(a), _) => ObservationModel::negbinom(a)?,
        (ModelKind::Binomial, _, Some(n)) => ObservationModel::binomial_shared(n, data.n_neurons())?,
        _ => ObservationModel::for_data(kind, data),
    })
}

pub fn simulate(a: &SimulateArgs) -> Result<()> {
    let dir = out_dir(&a.out)?;
    let kind: ModelKind = a.model.into();
    let Preset::Paper = a.preset;
    let mut spec = SimSpec::paper_setup(kind, a.seed);
    if let Some(v) = a.neurons {
        spec.n_neurons = v;
    }
    if let Some(v) = a.bins {
        spec.n_bins = v;
    }
    if let Some(v) = a.trials {
        spec.n_trials = v;
    }
    match (kind, a.alpha, a.n) {
        (ModelKind::NegBinomial, Some(alpha), _) => spec.alpha = alpha,
        (ModelKind::Binomial, _, Some(n)) => spec.binomial_n = n,
        (_, None, None) => {}
        _ => return Err(CliError::Usage("--alpha is for negbinom and --n for binomial".into())),
    }
    spec.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let sim = run_simulation(&spec)?;
    write_counts_csv(dir.join("counts.csv"), &sim.data)?;
    write_json(dir.join("truth.json"), &TruthRecord::from(&sim))?;
    let manifest = Manifest {
        model: kind,
        seed: a.seed,
        n_neurons: spec.n_neurons,
        n_bins: spec.n_bins,
        n_trials: spec.n_trials,
        n_latents: spec.n_latents,
        counts: "counts.csv".into(),
        truth: "truth.json".into(),
    };
    write_json(dir.join("manifest.json"), &manifest)?;
    Ok(())
}

pub fn fit(a: &FitArgs) -> Result<()> {
    let dir = out_dir(&a.out)?;
    let data = read_counts_csv(&a.counts)?;
    if a.latents < 1 || a.latents >= data.n_neurons() {
        return Err(CliError::Usage(format!(
            "--latents must satisfy 1 <= P < N; got P = {} with N = {} neurons",
            a.latents,
            data.n_neurons()
        )));
    }
    let kind: ModelKind = a.model.into();
    if a.optimize_alpha && kind != ModelKind::NegBinomial {
        return Err(CliError::Usage("--optimize-alpha applies to the negbinom model only".into()));
    }
    let model = model_for(kind, a.alpha, a.n, &data)?;
    let cfg = FitConfig {
        max_iters: a.max_iters,
        tol: a.tol,
        restarts: a.restarts,
        seed: a.seed,
        optimize_alpha: a.optimize_alpha,
        ..Default::default()
    };
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let result = run_fit(&data, a.latents, &model, &cfg)?;
    let record = FitRecord::from(&result);
    write_json(dir.join("fit.json"), &record)?;
    write_hyperparameters(dir.join("hyperparameters.json"), &record.hyperparameters)?;
    println!(
        "final_evidence {} iterations {} converged {}",
        result.final_evidence, result.iterations, result.converged
    );
    Ok(())
}

pub fn infer(a: &InferArgs) -> Result<()> {
    let dir = out_dir(&a.out)?;
    let data = read_counts_csv(&a.counts)?;
    let h = read_fit_hyperparameters(&a.fit)?;
    let w = h.loadings()?;
    if w.n_neurons() != data.n_neurons() {
        return Err(CliError::Data(format!(
            "fit has {} neurons but {} has {}",
            w.n_neurons(),
            a.counts.display(),
            data.n_neurons()
        )));
    }
    let model = h.observation_model()?;
    let prior = GpPrior::new(h.length_scales.clone(), data.n_bins())?;
    let map = map_latents(&data, &w, &prior, &model)?;
    let x = map.latents_matrix();
    let rates = reconstruct_rates(&w, &x, &model)?;
    write_matrix_csv(dir.join("x_map.csv"), &x)?;
    write_matrix_csv(dir.join("rates.csv"), &rates)?;
    Ok(())
}

pub fn evaluate(a: &EvaluateArgs) -> Result<()> {
    let dir = out_dir(&a.out)?;
    let truth_path: &PathBuf = a
        .truth
        .as_ref()
        .ok_or_else(|| CliError::Usage("evaluation needs simulation ground truth: pass --truth truth.json".into()))?;
    if !truth_path.exists() {
        return Err(CliError::Data(format!(
            "evaluation needs simulation ground truth; {} not found",
            truth_path.display()
        )));
    }
    let truth: TruthRecord = read_json(truth_path)?;
    let x_true = truth.x_true.to_matrix()?;
    let x_hat = read_matrix_csv(&a.inferred)?;
    let alignment = align_latents(&x_hat, &x_true)?;
    let mut metrics = vec![("normalized_error", alignment.normalized_error)];
    if let Some(p) = &a.rates {
        let rates = read_matrix_csv(p)?;
        metrics.push(("rate_mse", rate_mse(&rates, &truth.true_rates()?)?));
    }
    write_metrics_csv(dir.join("metrics.csv"), &metrics)?;
    if !a.curve.is_empty() {
        let cfg = FitConfig {
            max_iters: a.max_iters,
            tol: a.tol,
            restarts: a.restarts,
            seed: truth.spec.seed,
            ..Default::default()
        };
        cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        let sim = run_simulation(&truth.spec)?;
        let points = error_vs_neurons_for(&sim, &a.curve, &cfg).map_err(|e| match e {
            countgpfa::Error::InvalidParameter(m) => CliError::Usage(m),
            e => e.into(),
        })?;
        write_curve_csv(dir.join("curve.csv"), truth.spec.model, truth.spec.seed, &points)?;
    }
    Ok(())
}

pub fn export_hyper(a: &ExportArgs) -> Result<()> {
    let h = read_fit_hyperparameters(&a.fit)?;
    write_hyperparameters(out_file(&a.out)?, &h)?;
    Ok(())
}
