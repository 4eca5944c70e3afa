//! Two-phase sparse regression: an L1-regularized fit over all stacked
//! harmonic equations selects a candidate support, then low-contribution
//! terms are pruned with unregularized refits.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ghb::{EvolutionaryRegressionProblem, Term};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruneStrategy {
    /// Remove the weakest sub-cutoff term only while the refit residual
    /// stays within tolerance; repeat until nothing can go.
    Guarded,
    /// Drop every sub-cutoff term, refit, and repeat to a fixed point.
    Iterated,
    /// A single cut followed by one refit.
    OneCut,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegressionConfig {
    /// Absolute penalty on the standardized system; `None` uses
    /// `lambda_factor · λ_max`.
    pub lambda: Option<f64>,
    pub lambda_factor: f64,
    /// Scan a 10-point log grid of λ and keep the sparsest acceptable fit.
    pub lambda_scan: bool,
    pub residual_tolerance: f64,
    pub contribution_cutoff: f64,
    pub max_iterations: usize,
    pub convergence_tol: f64,
    pub prune: PruneStrategy,
}

impl Default for RegressionConfig {
    fn default() -> Self {
        RegressionConfig {
            lambda: None,
            lambda_factor: 1e-5,
            lambda_scan: false,
            residual_tolerance: 1e-1,
            contribution_cutoff: 5e-2,
            max_iterations: 1_000_000,
            convergence_tol: 1e-8,
            prune: PruneStrategy::Guarded,
        }
    }
}

impl RegressionConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidInput(m));
        if let Some(l) = self.lambda {
            if !(l >= 0.0) {
                return bad(format!("lambda must be >= 0, got {l}"));
            }
        }
        if !(self.lambda_factor >= 0.0) {
            return bad(format!("lambda_factor must be >= 0, got {}", self.lambda_factor));
        }
        for (name, v) in [("residual_tolerance", self.residual_tolerance), ("contribution_cutoff", self.contribution_cutoff)] {
            if !(v > 0.0 && v < 1.0) {
                return bad(format!("{name} must lie in (0, 1), got {v}"));
            }
        }
        if self.max_iterations < 100 {
            return bad("max_iterations must be >= 100".into());
        }
        if !(self.convergence_tol > 0.0) {
            return bad("convergence_tol must be > 0".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Diagnostic {
    /// Only linear stiffness/damping and forcing survived: the training
    /// response was too weak to expose the nonlinearity.
    LimitedNonlinearity,
    /// The stacked matrix restricted to the support is rank deficient.
    RankDeficient,
    /// Velocities were differenced from displacements.
    VelocityEstimated,
}

#[derive(Clone, Debug, PartialEq)]
pub struct IdentifiedCoefficients {
    pub terms: Vec<Term>,
    pub values: Vec<f64>,
    pub support: Vec<usize>,
    pub contributions: Vec<f64>,
    pub residual: f64,
    /// Penalty actually used on the standardized system.
    pub lambda: f64,
    pub diagnostics: Vec<Diagnostic>,
    pub config: RegressionConfig,
}

#[derive(Serialize, Deserialize)]
struct CoefficientsJson {
    coefficients: BTreeMap<String, f64>,
    support: Vec<String>,
    contributions: BTreeMap<String, f64>,
    residual: f64,
    lambda: f64,
    diagnostics: Vec<Diagnostic>,
    standardization: String,
    config: RegressionConfig,
}

impl IdentifiedCoefficients {
    pub fn value_of(&self, term: &Term) -> Option<f64> {
        self.terms.iter().position(|t| t == term).map(|j| self.values[j])
    }

    pub fn support_terms(&self) -> Vec<Term> {
        self.support.iter().map(|&j| self.terms[j].clone()).collect()
    }

    pub fn to_json(&self) -> String {
        let names: Vec<String> = self.terms.iter().map(|t| t.to_string()).collect();
        let doc = CoefficientsJson {
            coefficients: names.iter().cloned().zip(self.values.iter().copied()).collect(),
            support: self.support.iter().map(|&j| names[j].clone()).collect(),
            contributions: names.iter().cloned().zip(self.contributions.iter().copied()).collect(),
            residual: self.residual,
            lambda: self.lambda,
            diagnostics: self.diagnostics.clone(),
            standardization: "columns scaled to unit RMS, not centered".into(),
            config: self.config,
        };
        serde_json::to_string_pretty(&doc).expect("coefficients serialize")
    }
}

fn rms(v: &[f64]) -> f64 {
    (v.iter().map(|a| a * a).sum::<f64>() / v.len().max(1) as f64).sqrt()
}

/// Stacked system with unit-RMS columns; zero columns keep scale 0.
/// `free` is the own-channel linear column, left out of the L1 penalty.
struct Standardized {
    z: DMatrix<f64>,
    y: DVector<f64>,
    scale: Vec<f64>,
    free: Option<usize>,
}

impl Standardized {
    fn new(p: &EvolutionaryRegressionProblem) -> Result<Self> {
        let (mut a, y) = p.stacked();
        if a.nrows() < a.ncols() {
            return Err(Error::DimensionMismatch(format!("{} stacked rows for {} library columns", a.nrows(), a.ncols())));
        }
        if a.iter().chain(&y).any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite entries in the regression problem".into()));
        }
        let mut scale = vec![0.0; a.ncols()];
        for (j, mut col) in a.column_iter_mut().enumerate() {
            let s = (col.norm_squared() / col.len().max(1) as f64).sqrt();
            if s > 0.0 {
                col /= s;
                scale[j] = s;
            }
        }
        let free = p.linear_index().filter(|&j| scale[j] > 0.0);
        Ok(Standardized { z: a, y: DVector::from_vec(y), scale, free })
    }

    fn unscale(&self, zeta: &[f64]) -> Vec<f64> {
        zeta.iter().zip(&self.scale).map(|(z, s)| if *s > 0.0 { z / s } else { 0.0 }).collect()
    }

    /// ‖Zᵀr‖∞ with r the response after fitting the unpenalized column.
    fn lambda_max(&self) -> f64 {
        let r = match self.free {
            Some(j) => {
                let c = self.z.column(j);
                &self.y - c * (c.dot(&self.y) / c.norm_squared())
            }
            None => self.y.clone(),
        };
        (self.z.transpose() * r).amax()
    }
}

fn soft(v: f64, t: f64) -> f64 {
    v.signum() * (v.abs() - t).max(0.0)
}

/// FISTA with gradient restarts on ½‖y − Zζ‖² + λ‖ζ‖₁ (the free column
/// unpenalized).
fn fista(s: &Standardized, lambda: f64, max_iterations: usize, tol: f64) -> Result<Vec<f64>> {
    let n = s.z.ncols();
    let g = s.z.transpose() * &s.z;
    let q = s.z.transpose() * &s.y;
    let l = g.clone().symmetric_eigenvalues().max();
    if !(l > 0.0) {
        return Ok(vec![0.0; n]);
    }
    let mut x = DVector::<f64>::zeros(n);
    let mut yk = x.clone();
    let mut t = 1.0f64;
    for _ in 0..max_iterations {
        let grad = &g * &yk - &q;
        let mut xn = &yk - grad / l;
        for (j, v) in xn.iter_mut().enumerate() {
            if Some(j) != s.free {
                *v = soft(*v, lambda / l);
            }
        }
        let step = &xn - &x;
        let change = step.norm() / xn.norm().max(f64::MIN_POSITIVE);
        // restart momentum when it points uphill
        if (&yk - &xn).dot(&step) > 0.0 {
            t = 1.0;
        }
        let tn = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        yk = &xn + step * ((t - 1.0) / tn);
        x = xn;
        t = tn;
        if change < tol || x.iter().all(|v| *v == 0.0) && change == 0.0 {
            return Ok(x.as_slice().to_vec());
        }
    }
    Err(Error::NotConverged { iterations: max_iterations })
}

/// Phase 1: L1-regularized joint least squares. `lambda` is the penalty on
/// the unit-RMS-column system; coefficients come back in original scale.
pub fn lasso_solve(p: &EvolutionaryRegressionProblem, lambda: f64, config: &RegressionConfig) -> Result<Vec<f64>> {
    let s = Standardized::new(p)?;
    let zeta = fista(&s, lambda, config.max_iterations, config.convergence_tol)?;
    Ok(s.unscale(&zeta))
}

/// Default penalty of a problem under `config`.
pub fn default_lambda(p: &EvolutionaryRegressionProblem, config: &RegressionConfig) -> Result<f64> {
    match config.lambda {
        Some(l) => Ok(l),
        None => Ok(config.lambda_factor * Standardized::new(p)?.lambda_max()),
    }
}

/// Normalized contribution of every term: trapezoid integral over the grid
/// of Σₘ (Θ⁽ᵐ⁾ⱼξⱼ)² / ((y⁽ᵐ⁾)² + δₘ²), δₘ = 10⁻³·RMS(y⁽ᵐ⁾), divided by the
/// largest score.
pub fn contributions(p: &EvolutionaryRegressionProblem, xi: &[f64]) -> Vec<f64> {
    let w = p.quadrature_weights();
    let mut c = vec![0.0; p.cols()];
    for (mat, y) in p.library.iter().zip(&p.targets) {
        let d = 1e-3 * rms(y);
        let d2 = d * d;
        for (j, cj) in c.iter_mut().enumerate() {
            if xi[j] == 0.0 {
                continue;
            }
            for (r, yr) in y.iter().enumerate() {
                let den = yr * yr + d2;
                if den > 0.0 {
                    *cj += w[r] * (mat[(r, j)] * xi[j]).powi(2) / den;
                }
            }
        }
    }
    let m = c.iter().copied().fold(0.0, f64::max);
    if m > 0.0 {
        c.iter_mut().for_each(|v| *v /= m);
    }
    c
}

/// Unregularized least squares on the support (columns scaled for
/// conditioning, then unscaled).
fn refit(s: &Standardized, support: &[usize]) -> Vec<f64> {
    let mut out = vec![0.0; s.z.ncols()];
    let live: Vec<usize> = support.iter().copied().filter(|&j| s.scale[j] > 0.0).collect();
    if live.is_empty() {
        return out;
    }
    let a = s.z.select_columns(&live);
    let svd = a.svd(true, true);
    let sol = svd.solve(&s.y, 1e-13 * svd.singular_values.max()).expect("both factors computed");
    for (k, &j) in live.iter().enumerate() {
        out[j] = sol[k] / s.scale[j];
    }
    out
}

fn rank_deficient(s: &Standardized, support: &[usize]) -> bool {
    if support.is_empty() {
        return false;
    }
    let a = s.z.select_columns(support);
    let sv = a.singular_values();
    let tol = sv.max() * 1e-12 * a.nrows().max(a.ncols()) as f64;
    sv.iter().filter(|&&v| v > tol).count() < support.len()
}

/// ‖Y − ΘΞ‖ / ‖Y‖ on the stacked system.
pub fn relative_residual(p: &EvolutionaryRegressionProblem, xi: &[f64]) -> f64 {
    let (a, y) = p.stacked();
    let y = DVector::from_vec(y);
    let r = &y - a * DVector::from_column_slice(xi);
    r.norm() / y.norm()
}

fn resid_std(s: &Standardized, xi: &[f64]) -> f64 {
    let zeta: Vec<f64> = xi.iter().zip(&s.scale).map(|(x, sc)| x * sc).collect();
    let r = &s.y - &s.z * DVector::from_vec(zeta);
    r.norm() / s.y.norm()
}

/// Phase 2: prune by contribution and refit. The own-channel linear x term
/// is never pruned since it carries the stiffness correction.
pub fn prune_and_refit(p: &EvolutionaryRegressionProblem, xi: &[f64], config: &RegressionConfig) -> Result<IdentifiedCoefficients> {
    config.validate()?;
    let s = Standardized::new(p)?;
    prune_std(p, &s, xi, config, f64::NAN)
}

fn prune_std(
    p: &EvolutionaryRegressionProblem,
    s: &Standardized,
    xi: &[f64],
    config: &RegressionConfig,
    lambda: f64,
) -> Result<IdentifiedCoefficients> {
    if s.y.norm() == 0.0 {
        return Err(Error::EmptySupport);
    }
    let protected = p.linear_index();
    let mut support: Vec<usize> = (0..xi.len()).filter(|&j| xi[j] != 0.0 && s.scale[j] > 0.0).collect();
    if support.is_empty() {
        return Err(Error::EmptySupport);
    }
    if let Some(j0) = protected {
        if !support.contains(&j0) && s.scale[j0] > 0.0 {
            support.push(j0);
            support.sort_unstable();
        }
    }
    let tol = config.residual_tolerance;
    let cut = config.contribution_cutoff;
    let mut coef = refit(s, &support);
    match config.prune {
        PruneStrategy::Guarded => loop {
            let c = contributions(p, &coef);
            let mut cands: Vec<usize> = support.iter().copied().filter(|&j| Some(j) != protected && c[j] < cut).collect();
            cands.sort_by(|a, b| c[*a].total_cmp(&c[*b]));
            let mut removed = false;
            for j in cands {
                let trial: Vec<usize> = support.iter().copied().filter(|&k| k != j).collect();
                let fit = refit(s, &trial);
                if resid_std(s, &fit) <= tol {
                    support = trial;
                    coef = fit;
                    removed = true;
                    break;
                }
            }
            if !removed {
                break;
            }
        },
        PruneStrategy::Iterated | PruneStrategy::OneCut => loop {
            let c = contributions(p, &coef);
            let keep: Vec<usize> = support.iter().copied().filter(|&j| Some(j) == protected || c[j] >= cut).collect();
            let stable = keep.len() == support.len();
            support = keep;
            coef = refit(s, &support);
            if stable || config.prune == PruneStrategy::OneCut {
                break;
            }
        },
    }
    support.retain(|&j| coef[j] != 0.0);
    if support.is_empty() {
        return Err(Error::EmptySupport);
    }
    let residual = resid_std(s, &coef);
    if residual > tol {
        return Err(Error::ResidualTooLarge { residual, tolerance: tol });
    }
    let mut diagnostics = Vec::new();
    let ch = p.channel;
    let only_linear = support.iter().all(|&j| match &p.terms[j] {
        Term::Monomial(m) => m.is_linear_x(ch) || m.is_linear_v(ch),
        _ => true,
    });
    if only_linear {
        diagnostics.push(Diagnostic::LimitedNonlinearity);
    }
    if rank_deficient(s, &support) {
        diagnostics.push(Diagnostic::RankDeficient);
    }
    if p.velocity_estimated {
        diagnostics.push(Diagnostic::VelocityEstimated);
    }
    Ok(IdentifiedCoefficients {
        terms: p.terms.clone(),
        contributions: contributions(p, &coef),
        values: coef,
        support,
        residual,
        lambda,
        diagnostics,
        config: *config,
    })
}

/// Both phases. With `lambda_scan` the penalty runs over 10 log-spaced
/// values from 10⁻⁷ to 10⁻¹ of λ_max; the sparsest accepted fit wins,
/// ties going to the smaller residual.
pub fn identify(p: &EvolutionaryRegressionProblem, config: &RegressionConfig) -> Result<IdentifiedCoefficients> {
    config.validate()?;
    let s = Standardized::new(p)?;
    if s.y.norm() == 0.0 {
        return Err(Error::EmptySupport);
    }
    let run = |lambda: f64| -> Result<IdentifiedCoefficients> {
        let zeta = fista(&s, lambda, config.max_iterations, config.convergence_tol)?;
        prune_std(p, &s, &s.unscale(&zeta), config, lambda)
    };
    if !config.lambda_scan {
        let lambda = config.lambda.unwrap_or(config.lambda_factor * s.lambda_max());
        return run(lambda);
    }
    let lmax = s.lambda_max();
    let mut best: Option<IdentifiedCoefficients> = None;
    let mut last_err = None;
    for k in 0..10 {
        let lambda = lmax * 10f64.powf(-7.0 + 6.0 * k as f64 / 9.0);
        match run(lambda) {
            Ok(fit) => {
                let better = match &best {
                    None => true,
                    Some(b) => fit.support.len() < b.support.len() || fit.support.len() == b.support.len() && fit.residual < b.residual,
                };
                if better {
                    best = Some(fit);
                }
            }
            Err(e) => last_err = Some(e),
        }
    }
    best.ok_or_else(|| last_err.unwrap_or(Error::EmptySupport))
}
