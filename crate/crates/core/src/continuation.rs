//! Frequency-response curves by harmonic balance: Galerkin residual of a
//! truncated Fourier ansatz, damped Newton correction, pseudo-arclength
//! continuation through folds, and Floquet stability of each orbit.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{IdentifiedModel, Rk4};

pub const DEFAULT_HARMONICS: usize = 5;
pub const DEFAULT_MAX_POINTS: usize = 2000;
pub const NEWTON_MAX_ITERATIONS: usize = 25;
pub const NEWTON_TOL: f64 = 1e-9;
/// Multipliers up to this magnitude count as stable.
pub const STABILITY_MARGIN: f64 = 1e-6;

/// Period-1 orbit x_i(t) = a₀ + Σₙ bₙcos(nΩt) + cₙsin(nΩt), stored per
/// channel as [a₀, b₁..b_H, c₁..c_H].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PeriodicOrbit {
    pub omega: f64,
    pub harmonics: usize,
    pub coeffs: Vec<Vec<f64>>,
}

impl PeriodicOrbit {
    pub fn zero(dims: usize, harmonics: usize, omega: f64) -> Self {
        PeriodicOrbit { omega, harmonics, coeffs: vec![vec![0.0; 2 * harmonics + 1]; dims] }
    }

    pub fn dims(&self) -> usize {
        self.coeffs.len()
    }

    pub fn a0(&self, ch: usize) -> f64 {
        self.coeffs[ch][0]
    }

    pub fn b(&self, ch: usize, n: usize) -> f64 {
        self.coeffs[ch][n]
    }

    pub fn c(&self, ch: usize, n: usize) -> f64 {
        self.coeffs[ch][self.harmonics + n]
    }

    fn flat(&self) -> Vec<f64> {
        self.coeffs.iter().flatten().copied().collect()
    }

    fn from_flat(u: &[f64], harmonics: usize, omega: f64) -> Self {
        PeriodicOrbit { omega, harmonics, coeffs: u.chunks(2 * harmonics + 1).map(|c| c.to_vec()).collect() }
    }

    /// Displacement, d/dθ and d²/dθ² of channel `ch` at phase θ = Ωt.
    pub fn eval_phase(&self, ch: usize, theta: f64) -> (f64, f64, f64) {
        let h = self.harmonics;
        let u = &self.coeffs[ch];
        let (mut x, mut dx, mut ddx) = (u[0], 0.0, 0.0);
        for n in 1..=h {
            let nf = n as f64;
            let (s, c) = (nf * theta).sin_cos();
            let (b, cc) = (u[n], u[h + n]);
            x += b * c + cc * s;
            dx += nf * (cc * c - b * s);
            ddx -= nf * nf * (b * c + cc * s);
        }
        (x, dx, ddx)
    }

    /// Displacement and velocity of every channel at time t.
    pub fn state(&self, t: f64, x: &mut [f64], v: &mut [f64]) {
        for ch in 0..self.dims() {
            let (p, d, _) = self.eval_phase(ch, self.omega * t);
            x[ch] = p;
            v[ch] = self.omega * d;
        }
    }

    /// Half the peak-to-peak excursion of channel `ch`; extrema located on a
    /// grid and polished by Newton on dx/dθ = 0.
    pub fn amplitude(&self, ch: usize) -> f64 {
        let m = 64 * self.harmonics.max(1);
        let samples: Vec<f64> = (0..m).map(|k| self.eval_phase(ch, 2.0 * PI * k as f64 / m as f64).0).collect();
        let polish = |k: usize| {
            let mut th = 2.0 * PI * k as f64 / m as f64;
            for _ in 0..8 {
                let (_, d, dd) = self.eval_phase(ch, th);
                if dd == 0.0 {
                    break;
                }
                let step = (d / dd).clamp(-PI / m as f64, PI / m as f64);
                th -= step;
                if step.abs() < 1e-15 {
                    break;
                }
            }
            self.eval_phase(ch, th).0
        };
        let imax = (0..m).max_by(|&a, &b| samples[a].total_cmp(&samples[b])).unwrap();
        let imin = (0..m).min_by(|&a, &b| samples[a].total_cmp(&samples[b])).unwrap();
        let hi = polish(imax).max(samples[imax]);
        let lo = polish(imin).min(samples[imin]);
        0.5 * (hi - lo)
    }

    /// Phase lag of the first harmonic against cos Ωt, atan2(c₁, b₁).
    pub fn phase(&self, ch: usize) -> f64 {
        if self.harmonics == 0 {
            return 0.0;
        }
        self.c(ch, 1).atan2(self.b(ch, 1))
    }
}

/// Collocation-based evaluation of the harmonic-balance residual.
struct Hb<'a> {
    model: &'a IdentifiedModel,
    h: usize,
    cos: Vec<Vec<f64>>,
    sin: Vec<Vec<f64>>,
    theta: Vec<f64>,
}

/// Collocation count for H harmonics: 4H + 1, raised to 2·deg·H + 1 so a
/// degree-deg polynomial of the ansatz does not alias into the kept harmonics.
pub fn collocation_points(harmonics: usize, degree: u32) -> usize {
    (4 * harmonics + 1).max(2 * degree as usize * harmonics + 1)
}

impl<'a> Hb<'a> {
    fn new(model: &'a IdentifiedModel, h: usize) -> Self {
        let n = collocation_points(h, model.max_degree());
        let theta: Vec<f64> = (0..n).map(|k| 2.0 * PI * k as f64 / n as f64).collect();
        let cos = (0..=h).map(|m| theta.iter().map(|t| (m as f64 * t).cos()).collect()).collect();
        let sin = (0..=h).map(|m| theta.iter().map(|t| (m as f64 * t).sin()).collect()).collect();
        Hb { model, h, cos, sin, theta }
    }

    fn len(&self) -> usize {
        self.model.dims * (2 * self.h + 1)
    }

    fn residual(&self, u: &[f64], omega: f64, beta: f64, out: &mut [f64]) {
        let k = self.model.dims;
        let h = self.h;
        let w = 2 * h + 1;
        let n = self.theta.len();
        out.iter_mut().for_each(|r| *r = 0.0);
        let (mut x, mut v, mut acc) = (vec![0.0; k], vec![0.0; k], vec![0.0; k]);
        let mut ddx = vec![0.0; k];
        for (q, &th) in self.theta.iter().enumerate() {
            for ch in 0..k {
                let c = &u[ch * w..(ch + 1) * w];
                let (mut p, mut d, mut dd) = (c[0], 0.0, 0.0);
                for m in 1..=h {
                    let mf = m as f64;
                    let (cs, sn) = (self.cos[m][q], self.sin[m][q]);
                    p += c[m] * cs + c[h + m] * sn;
                    d += mf * (c[h + m] * cs - c[m] * sn);
                    dd -= mf * mf * (c[m] * cs + c[h + m] * sn);
                }
                x[ch] = p;
                v[ch] = omega * d;
                ddx[ch] = omega * omega * dd;
            }
            self.model.acceleration(th / omega, &x, &v, beta, omega, &mut acc);
            for ch in 0..k {
                let r = ddx[ch] - acc[ch];
                let o = &mut out[ch * w..(ch + 1) * w];
                o[0] += r / n as f64;
                for m in 1..=h {
                    o[m] += 2.0 * r * self.cos[m][q] / n as f64;
                    o[h + m] += 2.0 * r * self.sin[m][q] / n as f64;
                }
            }
        }
    }
}

/// Galerkin residual of the HB equations for `orbit` at forcing multiplier β.
pub fn hb_residual(model: &IdentifiedModel, orbit: &PeriodicOrbit, beta: f64) -> Vec<f64> {
    let hb = Hb::new(model, orbit.harmonics);
    let mut out = vec![0.0; hb.len()];
    hb.residual(&orbit.flat(), orbit.omega, beta, &mut out);
    out
}

/// Continuation parameter ζ.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Parameter {
    Omega,
    Beta,
}

/// Problem G(u, ζ) = 0 with the other parameter held fixed.
struct System<'a> {
    hb: Hb<'a>,
    param: Parameter,
    /// The parameter that is not continued.
    fixed: f64,
}

impl System<'_> {
    fn g(&self, u: &[f64], zeta: f64, out: &mut [f64]) {
        match self.param {
            Parameter::Omega => self.hb.residual(u, zeta, self.fixed, out),
            Parameter::Beta => self.hb.residual(u, self.fixed, zeta, out),
        }
    }

    fn omega_of(&self, zeta: f64) -> f64 {
        match self.param {
            Parameter::Omega => zeta,
            Parameter::Beta => self.fixed,
        }
    }
}

/// Variable scaling used by the arclength metric.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scaling {
    pub state: f64,
    pub param: f64,
}

/// Side condition closing the Newton system.
#[derive(Clone, Copy, Debug)]
pub enum Constraint<'a> {
    FixedParameter,
    /// tᵀ(S(z) − S(z_prev)) = Δs with t the unit tangent in scaled variables.
    Arclength { prev: &'a [f64], tangent: &'a [f64], ds: f64, scaling: Scaling },
}

fn scaled(z: &[f64], s: Scaling) -> Vec<f64> {
    let n = z.len() - 1;
    z.iter().enumerate().map(|(i, v)| if i < n { v / s.state } else { v / s.param }).collect()
}

struct NewtonOutcome {
    z: Vec<f64>,
    iterations: usize,
}

/// Damped Newton on z = [u; ζ] (ζ frozen for the fixed-parameter case).
fn newton(sys: &System, z0: &[f64], constraint: Constraint, tol: f64) -> Result<NewtonOutcome> {
    let n = sys.hb.len();
    let free = match constraint {
        Constraint::FixedParameter => n,
        Constraint::Arclength { .. } => n + 1,
    };
    let eval = |z: &[f64], out: &mut Vec<f64>| {
        out.resize(free, 0.0);
        sys.g(&z[..n], z[n], &mut out[..n]);
        if let Constraint::Arclength { prev, tangent, ds, scaling } = constraint {
            let a = scaled(z, scaling);
            let b = scaled(prev, scaling);
            out[n] = tangent.iter().zip(a.iter().zip(&b)).map(|(t, (p, q))| t * (p - q)).sum::<f64>() - ds;
        }
    };
    let norm_g = |f: &[f64]| f[..n].iter().map(|v| v * v).sum::<f64>().sqrt();
    let total = |f: &[f64]| f.iter().map(|v| v * v).sum::<f64>().sqrt();
    let arc_ok = |f: &[f64]| free == n || f[n].abs() <= 1e-9;
    let mut z = z0.to_vec();
    let mut f = Vec::new();
    eval(&z, &mut f);
    let mut fp = vec![0.0; free];
    for it in 0..=NEWTON_MAX_ITERATIONS {
        if !f.iter().all(|v| v.is_finite()) {
            return Err(Error::NewtonDiverged { residual: f64::INFINITY });
        }
        if norm_g(&f) <= tol && arc_ok(&f) {
            return Ok(NewtonOutcome { z, iterations: it });
        }
        if it == NEWTON_MAX_ITERATIONS {
            break;
        }
        let mut jac = DMatrix::zeros(free, free);
        let mut zp = z.clone();
        for j in 0..free {
            let h = 1e-7 * (1.0 + z[j].abs());
            zp[j] = z[j] + h;
            eval(&zp, &mut fp);
            for i in 0..free {
                jac[(i, j)] = (fp[i] - f[i]) / h;
            }
            zp[j] = z[j];
        }
        let rhs = DVector::from_iterator(free, f.iter().map(|v| -v));
        let step = jac.lu().solve(&rhs).ok_or(Error::NewtonDiverged { residual: total(&f) })?;
        let f0 = total(&f);
        let mut alpha = 1.0;
        let mut accepted = false;
        for _ in 0..10 {
            let mut trial = z.clone();
            trial.iter_mut().zip(step.iter()).for_each(|(a, d)| *a += alpha * d);
            eval(&trial, &mut fp);
            let ft = total(&fp);
            if ft.is_finite() && ft < f0 {
                z = trial;
                std::mem::swap(&mut f, &mut fp);
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        if !accepted {
            // stagnation at round-off level counts as convergence
            if norm_g(&f) <= 1e3 * tol && arc_ok(&f) {
                return Ok(NewtonOutcome { z, iterations: it + 1 });
            }
            return Err(Error::NewtonDiverged { residual: f0 });
        }
    }
    Err(Error::NewtonDiverged { residual: total(&f) })
}

/// Residual tolerance for a problem whose forcing has size `force`.
fn tolerance(model: &IdentifiedModel, beta: f64) -> f64 {
    let f = model.forcing.iter().map(|c| c.cos.hypot(c.sin)).fold(0.0, f64::max);
    NEWTON_TOL * (beta.abs() * f).max(1.0)
}

/// Newton correction at fixed Ω (Constraint::FixedParameter) or along an
/// arclength step in Ω. `prev` and `tangent` of the arclength constraint
/// live in z = [u; Ω] and scaled coordinates respectively.
pub fn newton_correct(model: &IdentifiedModel, beta: f64, guess: &PeriodicOrbit, constraint: Constraint) -> Result<PeriodicOrbit> {
    let sys = System { hb: Hb::new(model, guess.harmonics), param: Parameter::Omega, fixed: beta };
    let mut z = guess.flat();
    z.push(guess.omega);
    let out = newton(&sys, &z, constraint, tolerance(model, beta))?;
    let n = out.z.len() - 1;
    Ok(PeriodicOrbit::from_flat(&out.z[..n], guess.harmonics, out.z[n]))
}

/// Floquet multipliers of an orbit from the monodromy matrix of the
/// variational equations, integrated by RK4 along the HB orbit.
pub fn floquet_multipliers(model: &IdentifiedModel, orbit: &PeriodicOrbit) -> Vec<nalgebra::Complex<f64>> {
    let k = model.dims;
    let period = 2.0 * PI / orbit.omega;
    let steps = 512usize.max((200.0 * model.omega_max() / orbit.omega).ceil() as usize).max(64 * orbit.harmonics);
    let h = period / steps as f64;
    let d = 2 * k;
    let mut y = vec![0.0; d * d];
    for i in 0..d {
        y[i * d + i] = 1.0;
    }
    let (mut x, mut v) = (vec![0.0; k], vec![0.0; k]);
    let mut jx = vec![vec![0.0; k]; k];
    let mut jv = vec![vec![0.0; k]; k];
    let mut rk = Rk4::new(d * d);
    // columns of Φ stored contiguously: y[col*d + row]
    let mut f = |t: f64, y: &[f64], dy: &mut [f64]| {
        orbit.state(t, &mut x, &mut v);
        model.acceleration_jacobian(&x, &v, &mut jx, &mut jv);
        for col in 0..d {
            let phi = &y[col * d..(col + 1) * d];
            let out = &mut dy[col * d..(col + 1) * d];
            for i in 0..k {
                out[i] = phi[k + i];
                let mut a = 0.0;
                for j in 0..k {
                    a += jx[i][j] * phi[j] + jv[i][j] * phi[k + j];
                }
                out[k + i] = a;
            }
        }
    };
    for s in 0..steps {
        rk.step(&mut f, s as f64 * h, &mut y, h);
    }
    let m = DMatrix::from_column_slice(d, d, &y);
    m.complex_eigenvalues().iter().copied().collect()
}

/// Stability flag and multipliers; stable when every |μ| < 1 + 1e−6.
pub fn stability(model: &IdentifiedModel, orbit: &PeriodicOrbit) -> (bool, Vec<nalgebra::Complex<f64>>) {
    let mu = floquet_multipliers(model, orbit);
    let stable = mu.iter().all(|m| m.norm() < 1.0 + STABILITY_MARGIN);
    (stable, mu)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrcPoint {
    /// Continued parameter value (Ω, or β for amplitude continuation).
    pub omega: f64,
    pub amplitude: f64,
    /// First-harmonic phase lag, unwrapped along the branch.
    pub phase: f64,
    pub stable: bool,
    pub max_multiplier: f64,
    /// Arclength step that produced the point (0 for the seed).
    pub ds: f64,
    pub orbit: PeriodicOrbit,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub accepted: usize,
    pub rejected: usize,
    pub newton_iterations: usize,
    pub ds_min: f64,
    pub ds_max: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrcPointSet {
    pub beta: f64,
    /// Fixed Ω of an amplitude (β) continuation.
    pub omega_fixed: Option<f64>,
    pub parameter: Parameter,
    pub channel: usize,
    pub harmonics: usize,
    pub points: Vec<FrcPoint>,
    pub scaling: Scaling,
    pub stats: StepStats,
    pub budget_exhausted: bool,
    /// Set when the step size fell below its floor before leaving the range.
    pub stalled: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TraceConfig {
    pub harmonics: usize,
    pub ds0: f64,
    pub max_points: usize,
    pub parameter: Parameter,
    /// Compute Floquet stability for every point.
    pub stability: bool,
}

impl Default for TraceConfig {
    fn default() -> Self {
        TraceConfig { harmonics: DEFAULT_HARMONICS, ds0: 0.02, max_points: DEFAULT_MAX_POINTS, parameter: Parameter::Omega, stability: true }
    }
}

impl FrcPointSet {
    pub fn omegas(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.omega).collect()
    }

    pub fn amplitudes(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.amplitude).collect()
    }

    /// Parameter value at the largest amplitude.
    pub fn peak(&self) -> Option<(f64, f64)> {
        self.points.iter().max_by(|a, b| a.amplitude.total_cmp(&b.amplitude)).map(|p| (p.omega, p.amplitude))
    }

    /// Indices i where the parameter direction reverses between i−1→i and i→i+1.
    pub fn folds(&self) -> Vec<usize> {
        let w = self.omegas();
        (1..w.len().saturating_sub(1)).filter(|&i| (w[i] - w[i - 1]) * (w[i + 1] - w[i]) < 0.0).collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let io = |e: std::io::Error| Error::Io { path: path.display().to_string(), source: e };
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Parse(e.to_string()))?;
        let head = match self.parameter {
            Parameter::Omega => "omega",
            Parameter::Beta => "beta",
        };
        w.write_record([head, "amplitude", "phase", "stable"]).map_err(|e| Error::Parse(e.to_string()))?;
        for p in &self.points {
            w.write_record([
                format!("{:.17e}", p.omega),
                format!("{:.17e}", p.amplitude),
                format!("{:.17e}", p.phase),
                (p.stable as u8).to_string(),
            ])
            .map_err(|e| Error::Parse(e.to_string()))?;
        }
        w.flush().map_err(io)?;
        let side = sidecar_path(path);
        let meta = serde_json::json!({
            "beta": self.beta,
            "omega_fixed": self.omega_fixed,
            "parameter": self.parameter,
            "channel": self.channel,
            "harmonics": self.harmonics,
            "points": self.points.len(),
            "folds": self.folds(),
            "scaling": self.scaling,
            "stats": self.stats,
            "budget_exhausted": self.budget_exhausted,
            "stalled": self.stalled,
            "amplitude": "half peak-to-peak of the periodic orbit",
            "phase": "atan2(c1, b1) of the first harmonic against cos(Omega t), unwrapped along the branch; positive = lag",
        });
        let mut f = std::fs::File::create(&side).map_err(|e| Error::Io { path: side.display().to_string(), source: e })?;
        writeln!(f, "{}", serde_json::to_string_pretty(&meta).expect("metadata serializes"))
            .map_err(|e| Error::Io { path: side.display().to_string(), source: e })?;
        Ok(())
    }
}

pub fn sidecar_path(csv: &Path) -> std::path::PathBuf {
    let mut p = csv.as_os_str().to_owned();
    p.push(".json");
    p.into()
}

/// Largest linear resonance peak of any channel: the amplitude scale of
/// the arclength metric.
fn amplitude_scale(model: &IdentifiedModel, beta: f64) -> f64 {
    let mut s: f64 = 0.0;
    for ch in 0..model.dims {
        let f = beta * model.forcing[ch].cos.hypot(model.forcing[ch].sin);
        if f == 0.0 {
            continue;
        }
        let w = (model.omega_sq[ch] + model.linear_stiffness_correction(ch)).max(f64::MIN_POSITIVE).sqrt();
        let c = model.linear_damping(ch);
        s = s.max(if c > 0.0 { f / (c * w) } else { 100.0 * f / (w * w) });
    }
    if s > 0.0 {
        s
    } else {
        1.0
    }
}

/// Trace the frequency-response curve of `channel` at fixed β over
/// Ω ∈ [lo, hi] with default settings.
pub fn trace_frc(model: &IdentifiedModel, beta: f64, range: (f64, f64), ds0: f64, channel: usize) -> Result<FrcPointSet> {
    trace_frc_with(model, beta, range, channel, &TraceConfig { ds0, ..Default::default() })
}

/// General tracer. With `Parameter::Omega` the fixed value is β; with
/// `Parameter::Beta` it is Ω and `range` bounds β.
pub fn trace_frc_with(model: &IdentifiedModel, fixed: f64, range: (f64, f64), channel: usize, cfg: &TraceConfig) -> Result<FrcPointSet> {
    model.validate()?;
    let (lo, hi) = range;
    if !(lo < hi && lo.is_finite() && hi.is_finite()) {
        return Err(Error::InvalidInput(format!("bad parameter range [{lo}, {hi}]")));
    }
    if cfg.parameter == Parameter::Omega && lo <= 0.0 {
        return Err(Error::InvalidInput("frequencies must be positive".into()));
    }
    if !(cfg.ds0 > 0.0) {
        return Err(Error::InvalidInput("ds0 must be > 0".into()));
    }
    if channel >= model.dims {
        return Err(Error::InvalidInput(format!("channel {channel} out of range")));
    }
    if cfg.harmonics == 0 {
        return Err(Error::InvalidInput("at least one harmonic is required".into()));
    }
    let h = cfg.harmonics;
    let sys = System { hb: Hb::new(model, h), param: cfg.parameter, fixed };
    let n = sys.hb.len();
    let beta_max = match cfg.parameter {
        Parameter::Omega => fixed,
        Parameter::Beta => hi.abs().max(lo.abs()),
    };
    let scaling = Scaling { state: amplitude_scale(model, beta_max), param: hi - lo };
    let tol = tolerance(model, beta_max);

    let z0 = seed(model, &sys, lo, h, tol)?;
    let mut tangent = initial_tangent(&sys, &z0, scaling)?;

    let mut out = FrcPointSet {
        beta: match cfg.parameter {
            Parameter::Omega => fixed,
            Parameter::Beta => f64::NAN,
        },
        omega_fixed: (cfg.parameter == Parameter::Beta).then_some(fixed),
        parameter: cfg.parameter,
        channel,
        harmonics: h,
        points: Vec::new(),
        scaling,
        stats: StepStats { ds_min: f64::INFINITY, ..Default::default() },
        budget_exhausted: false,
        stalled: false,
    };
    let record = |z: &[f64], ds: f64, out: &mut FrcPointSet| {
        let orbit = PeriodicOrbit::from_flat(&z[..n], h, sys.omega_of(z[n]));
        let mut phase = orbit.phase(channel);
        if let Some(prev) = out.points.last() {
            phase += 2.0 * PI * ((prev.phase - phase) / (2.0 * PI)).round();
        }
        // the variational equations do not depend on the forcing
        let (stable, mu) = if cfg.stability {
            stability(model, &orbit)
        } else {
            (true, Vec::new())
        };
        out.points.push(FrcPoint {
            omega: z[n],
            amplitude: orbit.amplitude(channel),
            phase,
            stable,
            max_multiplier: mu.iter().map(|m| m.norm()).fold(0.0, f64::max),
            ds,
            orbit,
        });
    };
    record(&z0, 0.0, &mut out);

    let (ds_min, ds_max) = (cfg.ds0 / 64.0, 8.0 * cfg.ds0);
    let mut ds = cfg.ds0;
    let mut z = z0;
    loop {
        if out.points.len() >= cfg.max_points {
            out.budget_exhausted = true;
            break;
        }
        let sz = scaled(&z, scaling);
        let pred_s: Vec<f64> = sz.iter().zip(&tangent).map(|(a, t)| a + ds * t).collect();
        let pred: Vec<f64> =
            pred_s.iter().enumerate().map(|(i, v)| if i < n { v * scaling.state } else { v * scaling.param }).collect();
        let step = newton(&sys, &pred, Constraint::Arclength { prev: &z, tangent: &tangent, ds, scaling }, tol);
        let accepted = match step {
            Ok(o) => {
                // reject corrections that wander far from the predictor
                let dist = scaled(&o.z, scaling).iter().zip(&sz).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                (dist <= 1.1 * ds).then_some(o)
            }
            Err(_) => None,
        };
        let Some(o) = accepted else {
            out.stats.rejected += 1;
            ds *= 0.5;
            if ds < ds_min {
                out.stalled = true;
                break;
            }
            continue;
        };
        out.stats.accepted += 1;
        out.stats.newton_iterations += o.iterations;
        out.stats.ds_min = out.stats.ds_min.min(ds);
        out.stats.ds_max = out.stats.ds_max.max(ds);
        let new_s = scaled(&o.z, scaling);
        let mut sec: Vec<f64> = new_s.iter().zip(&sz).map(|(a, b)| a - b).collect();
        let norm = sec.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            sec.iter_mut().for_each(|v| *v /= norm);
            if sec.iter().zip(&tangent).map(|(a, b)| a * b).sum::<f64>() < 0.0 {
                sec.iter_mut().for_each(|v| *v = -*v);
            }
            tangent = sec;
        }
        z = o.z;
        let p = z[n];
        if p > hi || p < lo {
            break;
        }
        record(&z, ds, &mut out);
        if o.iterations <= 3 {
            ds = (1.3 * ds).min(ds_max);
        }
    }
    if out.stats.ds_min.is_infinite() {
        out.stats.ds_min = 0.0;
    }
    Ok(out)
}

/// Fixed-parameter Newton at ζ = lo from the linearized closed form,
/// ramping the forcing in if the direct solve fails.
fn seed(model: &IdentifiedModel, sys: &System, lo: f64, h: usize, tol: f64) -> Result<Vec<f64>> {
    let n = sys.hb.len();
    let (beta, omega) = match sys.param {
        Parameter::Omega => (sys.fixed, lo),
        Parameter::Beta => (lo, sys.fixed),
    };
    let linear = |b: f64| {
        let mut o = PeriodicOrbit::zero(model.dims, h, omega);
        for ch in 0..model.dims {
            let (p, q) = model.linear_response(ch, b, omega);
            o.coeffs[ch][1] = p;
            o.coeffs[ch][h + 1] = q;
        }
        let mut z = o.flat();
        z.push(lo);
        z
    };
    let solve_at = |z: &[f64], b: f64| -> Result<Vec<f64>> {
        let s = match sys.param {
            Parameter::Omega => System { hb: Hb::new(model, h), param: Parameter::Omega, fixed: b },
            Parameter::Beta => System { hb: Hb::new(model, h), param: Parameter::Beta, fixed: omega },
        };
        let mut z = z.to_vec();
        if sys.param == Parameter::Beta {
            z[n] = b;
        }
        newton(&s, &z, Constraint::FixedParameter, tol).map(|o| o.z)
    };
    if let Ok(mut z) = solve_at(&linear(beta), beta) {
        z[n] = lo;
        return Ok(z);
    }
    let mut z = linear(beta / 16.0);
    for k in (0..=4).rev() {
        let b = beta / f64::powi(2.0, k);
        z = solve_at(&z, b).map_err(|e| Error::SeedFailed(format!("no periodic orbit at {lo}: {e}")))?;
    }
    z[n] = lo;
    Ok(z)
}

/// Unit tangent in scaled coordinates from G_u·du = −G_ζ, oriented towards
/// increasing ζ.
fn initial_tangent(sys: &System, z: &[f64], s: Scaling) -> Result<Vec<f64>> {
    let n = sys.hb.len();
    let mut f0 = vec![0.0; n];
    sys.g(&z[..n], z[n], &mut f0);
    let mut fp = vec![0.0; n];
    let mut ju = DMatrix::zeros(n, n);
    let mut zu = z[..n].to_vec();
    for j in 0..n {
        let h = 1e-7 * (1.0 + zu[j].abs());
        zu[j] += h;
        sys.g(&zu, z[n], &mut fp);
        for i in 0..n {
            ju[(i, j)] = (fp[i] - f0[i]) / h;
        }
        zu[j] = z[..n][j];
    }
    let hp = 1e-7 * (1.0 + z[n].abs());
    sys.g(&z[..n], z[n] + hp, &mut fp);
    let gz = DVector::from_iterator(n, fp.iter().zip(&f0).map(|(a, b)| -(a - b) / hp));
    let du = ju.lu().solve(&gz).ok_or_else(|| Error::SeedFailed("singular Jacobian at the seed".into()))?;
    let mut t: Vec<f64> = du.iter().map(|v| v / s.state).collect();
    t.push(1.0 / s.param);
    let norm = t.iter().map(|v| v * v).sum::<f64>().sqrt();
    Ok(t.into_iter().map(|v| v / norm).collect())
}
