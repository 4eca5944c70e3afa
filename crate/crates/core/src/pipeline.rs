//! End-to-end identification: trajectories in, explicit ODE model out.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ghb::{assemble_problem, normalize_and_merge, CandidateLibrary, LibrarySpec};
use crate::model::{assemble_ode, IdentifiedModel};
use crate::signal::{decompose_with, detect_harmonics, fundamental_frequency, DecomposeOptions, TimeSeries};
use crate::sparse::{identify, Diagnostic, IdentifiedCoefficients, RegressionConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub library: LibrarySpec,
    pub regression: RegressionConfig,
    pub decompose: DecomposeOptions,
    /// Harmonic orders to use for every channel; detected when absent.
    pub orders: Option<Vec<usize>>,
    pub harmonic_threshold: f64,
    pub grid_stride: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            library: LibrarySpec::default(),
            regression: RegressionConfig::default(),
            decompose: DecomposeOptions { min_cycles: 20.0, ..Default::default() },
            orders: None,
            harmonic_threshold: 1e-2,
            grid_stride: 5,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ChannelReport {
    pub channel: usize,
    /// Fundamental estimate of every training trajectory.
    pub omega_hat: Vec<f64>,
    /// Reference frequency of the (merged) regression.
    pub omega_bar: f64,
    pub orders: Vec<usize>,
    pub omega_sq: f64,
    pub support: Vec<String>,
    pub coefficients: Vec<(String, f64)>,
    pub contributions: Vec<(String, f64)>,
    pub residual: f64,
    pub lambda: f64,
    pub diagnostics: Vec<Diagnostic>,
    /// Forcing amplitude implied by the fit, for comparison with the known β.
    pub identified_forcing: f64,
    pub known_beta: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct IdentificationReport {
    pub channels: Vec<ChannelReport>,
    pub trajectories: usize,
}

/// One channel's regression result before it becomes an ODE row.
#[derive(Clone, Debug)]
pub struct ChannelFit {
    pub coefficients: IdentifiedCoefficients,
    pub omega_hat: Vec<f64>,
    pub omega_bar: f64,
    pub orders: Vec<usize>,
}

fn common_beta(data: &[TimeSeries]) -> Result<f64> {
    let betas: Vec<f64> = data
        .iter()
        .map(|ts| ts.forcing.as_ref().map(|f| f.beta).ok_or_else(|| Error::InvalidInput("trajectory lacks forcing metadata".into())))
        .collect::<Result<_>>()?;
    let b0 = betas[0];
    if betas.iter().any(|b| (b - b0).abs() > 1e-12 * b0.abs().max(1.0)) {
        return Err(Error::IncompatibleProblems("merged trajectories must share the forcing amplitude".into()));
    }
    Ok(b0)
}

/// Regression for one channel across all trajectories.
pub fn fit_channel(data: &[TimeSeries], channel: usize, cfg: &PipelineConfig) -> Result<ChannelFit> {
    let dims = data[0].dims();
    let lib = CandidateLibrary::build(&cfg.library, dims, channel)?;
    let mut omegas = Vec::new();
    for ts in data {
        let w = match cfg.decompose.omega_hat {
            Some(w) => w,
            None => {
                let floor = 2.0 * std::f64::consts::PI * cfg.decompose.min_cycles / ts.duration();
                fundamental_frequency(ts.channel(channel)?, ts.dt, floor)?
            }
        };
        omegas.push(w);
    }
    let orders = match &cfg.orders {
        Some(o) => o.clone(),
        None => {
            let mut all = Vec::new();
            for (ts, &w) in data.iter().zip(&omegas) {
                all.extend(detect_harmonics(ts, channel, w, cfg.harmonic_threshold)?);
            }
            all.sort_unstable();
            all.dedup();
            all
        }
    };
    let mut problems = Vec::new();
    for (ts, &w) in data.iter().zip(&omegas) {
        let opts = DecomposeOptions { omega_hat: Some(w), ..cfg.decompose };
        let d = decompose_with(ts, channel, &orders, &opts)?;
        problems.push(assemble_problem(ts, &d, &lib, cfg.grid_stride)?);
    }
    let problem = if problems.len() == 1 { problems.pop().unwrap() } else { normalize_and_merge(&problems)? };
    let coefficients = identify(&problem, &cfg.regression)?;
    Ok(ChannelFit { coefficients, omega_hat: omegas, omega_bar: problem.omega_hat, orders })
}

/// Identify every channel and assemble the model.
pub fn identify_model(data: &[TimeSeries], cfg: &PipelineConfig) -> Result<(IdentifiedModel, IdentificationReport)> {
    let first = data.first().ok_or_else(|| Error::InvalidInput("no training trajectories".into()))?;
    let dims = first.dims();
    for ts in data {
        ts.validate()?;
        if ts.dims() != dims {
            return Err(Error::DimensionMismatch("trajectories have different channel counts".into()));
        }
    }
    let beta = common_beta(data)?;
    let mut eqs = Vec::with_capacity(dims);
    let mut reports = Vec::with_capacity(dims);
    for ch in 0..dims {
        let fit = fit_channel(data, ch, cfg)?;
        let c = &fit.coefficients;
        let eq = assemble_ode(&c.terms, &c.values, fit.omega_bar, ch, beta)?;
        let names: Vec<String> = c.terms.iter().map(|t| t.to_string()).collect();
        let nz = |v: &[f64]| names.iter().cloned().zip(v.iter().copied()).filter(|(_, x)| *x != 0.0).collect::<Vec<_>>();
        reports.push(ChannelReport {
            channel: ch,
            omega_hat: fit.omega_hat.clone(),
            omega_bar: fit.omega_bar,
            orders: fit.orders.clone(),
            omega_sq: eq.omega_sq,
            support: c.support.iter().map(|&j| names[j].clone()).collect(),
            coefficients: nz(&c.values),
            contributions: c.support.iter().map(|&j| (names[j].clone(), c.contributions[j])).collect(),
            residual: c.residual,
            lambda: c.lambda,
            diagnostics: c.diagnostics.clone(),
            identified_forcing: beta * eq.forcing.cos.hypot(eq.forcing.sin),
            known_beta: beta,
        });
        eqs.push(eq);
    }
    let model = IdentifiedModel::from_channels(eqs)?;
    Ok((model, IdentificationReport { channels: reports, trajectories: data.len() }))
}
