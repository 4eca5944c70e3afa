//! Explicit oscillator models ẍᵢ + ωᵢ²xᵢ + εfᵢ(x, ẋ) = β(aᵢ cos Ωt + bᵢ sin Ωt),
//! their time integration, and the reference fixtures.

use std::f64::consts::PI;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ghb::Term;
use crate::signal::{ForcingConfig, TimeSeries};

/// Product Π x_j^{x[j]} · ẋ_j^{v[j]} over all channels.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Monomial {
    pub x: Vec<u32>,
    pub v: Vec<u32>,
}

impl Monomial {
    pub fn zero(dims: usize) -> Self {
        Monomial { x: vec![0; dims], v: vec![0; dims] }
    }

    pub fn x_pow(dims: usize, ch: usize, p: u32) -> Self {
        let mut m = Monomial::zero(dims);
        m.x[ch] = p;
        m
    }

    pub fn v_pow(dims: usize, ch: usize, p: u32) -> Self {
        let mut m = Monomial::zero(dims);
        m.v[ch] = p;
        m
    }

    pub fn dims(&self) -> usize {
        self.x.len()
    }

    pub fn degree(&self) -> u32 {
        self.x.iter().chain(&self.v).sum()
    }

    pub fn is_linear_x(&self, ch: usize) -> bool {
        self.degree() == 1 && self.x[ch] == 1
    }

    pub fn is_linear_v(&self, ch: usize) -> bool {
        self.degree() == 1 && self.v[ch] == 1
    }

    pub fn eval(&self, x: &[f64], v: &[f64]) -> f64 {
        let mut p = 1.0;
        for j in 0..self.x.len() {
            if self.x[j] > 0 {
                p *= x[j].powi(self.x[j] as i32);
            }
            if self.v[j] > 0 {
                p *= v[j].powi(self.v[j] as i32);
            }
        }
        p
    }

    /// Partial derivatives with respect to every x_j and ẋ_j, accumulated
    /// with weight `w` into `dx`, `dv`.
    pub fn add_gradient(&self, x: &[f64], v: &[f64], w: f64, dx: &mut [f64], dv: &mut [f64]) {
        let k = self.x.len();
        for j in 0..k {
            for (which, e) in [(0, self.x[j]), (1, self.v[j])] {
                if e == 0 {
                    continue;
                }
                let mut p = e as f64;
                for i in 0..k {
                    let (ex, ev) = (self.x[i], self.v[i]);
                    let ex = if which == 0 && i == j { ex - 1 } else { ex };
                    let ev = if which == 1 && i == j { ev - 1 } else { ev };
                    if ex > 0 {
                        p *= x[i].powi(ex as i32);
                    }
                    if ev > 0 {
                        p *= v[i].powi(ev as i32);
                    }
                }
                if which == 0 {
                    dx[j] += w * p;
                } else {
                    dv[j] += w * p;
                }
            }
        }
    }
}

impl fmt::Display for Monomial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts = Vec::new();
        for (j, &e) in self.x.iter().enumerate() {
            if e > 0 {
                parts.push(format!("x{}^{}", j + 1, e));
            }
        }
        for (j, &e) in self.v.iter().enumerate() {
            if e > 0 {
                parts.push(format!("v{}^{}", j + 1, e));
            }
        }
        if parts.is_empty() {
            write!(f, "1")
        } else {
            write!(f, "{}", parts.join("*"))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelTerm {
    pub exponents: Monomial,
    pub coef: f64,
}

/// Forcing of one channel per unit β: `cos·cos(Ωt) + sin·sin(Ωt)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
pub struct ForcingCoef {
    pub cos: f64,
    pub sin: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentifiedModel {
    pub dims: usize,
    pub omega_sq: Vec<f64>,
    pub terms: Vec<Vec<ModelTerm>>,
    pub forcing: Vec<ForcingCoef>,
}

/// One channel's equation as produced by `assemble_ode`.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelEquation {
    pub omega_sq: f64,
    pub terms: Vec<ModelTerm>,
    pub forcing: ForcingCoef,
}

impl IdentifiedModel {
    pub fn from_channels(eqs: Vec<ChannelEquation>) -> Result<Self> {
        let dims = eqs.len();
        let m = IdentifiedModel {
            dims,
            omega_sq: eqs.iter().map(|e| e.omega_sq).collect(),
            terms: eqs.iter().map(|e| e.terms.clone()).collect(),
            forcing: eqs.iter().map(|e| e.forcing).collect(),
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims == 0 || self.omega_sq.len() != self.dims || self.terms.len() != self.dims || self.forcing.len() != self.dims {
            return Err(Error::InvalidInput("model arrays do not match dims".into()));
        }
        for &w in &self.omega_sq {
            if !(w > 0.0 && w.is_finite()) {
                return Err(Error::NonPositiveStiffness(w));
            }
        }
        for t in self.terms.iter().flatten() {
            if t.exponents.x.len() != self.dims || t.exponents.v.len() != self.dims || !t.coef.is_finite() {
                return Err(Error::InvalidInput(format!("bad term {}", t.exponents)));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let m: IdentifiedModel = serde_json::from_str(s).map_err(|e| Error::Parse(e.to_string()))?;
        m.validate()?;
        Ok(m)
    }

    pub fn max_degree(&self) -> u32 {
        self.terms.iter().flatten().map(|t| t.exponents.degree()).max().unwrap_or(1).max(1)
    }

    pub fn omega_max(&self) -> f64 {
        self.omega_sq.iter().fold(0.0f64, |m, w| m.max(w.sqrt()))
    }

    /// Coefficient of the linear velocity term of channel `ch` (zero if absent).
    pub fn linear_damping(&self, ch: usize) -> f64 {
        self.terms[ch].iter().filter(|t| t.exponents.is_linear_v(ch)).map(|t| t.coef).sum()
    }

    /// Coefficient of the linear displacement term of channel `ch` in εf.
    pub fn linear_stiffness_correction(&self, ch: usize) -> f64 {
        self.terms[ch].iter().filter(|t| t.exponents.is_linear_x(ch)).map(|t| t.coef).sum()
    }

    /// εfᵢ(x, ẋ) for every channel.
    pub fn nonlinear_force(&self, x: &[f64], v: &[f64], out: &mut [f64]) {
        for (i, terms) in self.terms.iter().enumerate() {
            out[i] = terms.iter().map(|t| t.coef * t.exponents.eval(x, v)).sum();
        }
    }

    /// Accelerations ẍ at time t for forcing multiplier β and frequency Ω.
    pub fn acceleration(&self, t: f64, x: &[f64], v: &[f64], beta: f64, omega: f64, out: &mut [f64]) {
        self.nonlinear_force(x, v, out);
        let (c, s) = ((omega * t).cos(), (omega * t).sin());
        for i in 0..self.dims {
            let f = &self.forcing[i];
            out[i] = -self.omega_sq[i] * x[i] - out[i] + beta * (f.cos * c + f.sin * s);
        }
    }

    /// Jacobian of the accelerations: `jx[i][j] = ∂ẍᵢ/∂xⱼ`, `jv[i][j] = ∂ẍᵢ/∂ẋⱼ`.
    pub fn acceleration_jacobian(&self, x: &[f64], v: &[f64], jx: &mut [Vec<f64>], jv: &mut [Vec<f64>]) {
        for i in 0..self.dims {
            jx[i].iter_mut().for_each(|e| *e = 0.0);
            jv[i].iter_mut().for_each(|e| *e = 0.0);
            for t in &self.terms[i] {
                t.exponents.add_gradient(x, v, -t.coef, &mut jx[i], &mut jv[i]);
            }
            jx[i][i] -= self.omega_sq[i];
        }
    }

    /// First-order right-hand side on the state y = [x; ẋ].
    pub fn rhs(&self, t: f64, y: &[f64], beta: f64, omega: f64, dy: &mut [f64]) {
        let k = self.dims;
        let (x, v) = y.split_at(k);
        dy[..k].copy_from_slice(v);
        self.acceleration(t, x, v, beta, omega, &mut dy[k..]);
    }

    /// Linear steady-state response of channel `ch` ignoring all
    /// nonlinear and coupling terms: complex amplitude (cos, sin) parts.
    pub fn linear_response(&self, ch: usize, beta: f64, omega: f64) -> (f64, f64) {
        let k = self.omega_sq[ch] + self.linear_stiffness_correction(ch) - omega * omega;
        let c = self.linear_damping(ch) * omega;
        let f = &self.forcing[ch];
        // (k + i c)(p - i q) = β(fc - i fs) for x = p cos + q sin
        let (fr, fi) = (beta * f.cos, -beta * f.sin);
        let den = k * k + c * c;
        if den == 0.0 {
            return (0.0, 0.0);
        }
        let zr = (fr * k + fi * c) / den;
        let zi = (fi * k - fr * c) / den;
        (zr, -zi)
    }
}

/// Classical fourth-order Runge–Kutta step for y' = f(t, y), in place.
pub struct Rk4 {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    tmp: Vec<f64>,
}

impl Rk4 {
    pub fn new(n: usize) -> Self {
        Rk4 { k1: vec![0.0; n], k2: vec![0.0; n], k3: vec![0.0; n], k4: vec![0.0; n], tmp: vec![0.0; n] }
    }

    pub fn step(&mut self, f: &mut impl FnMut(f64, &[f64], &mut [f64]), t: f64, y: &mut [f64], h: f64) {
        let n = y.len();
        f(t, y, &mut self.k1);
        for i in 0..n {
            self.tmp[i] = y[i] + 0.5 * h * self.k1[i];
        }
        f(t + 0.5 * h, &self.tmp, &mut self.k2);
        for i in 0..n {
            self.tmp[i] = y[i] + 0.5 * h * self.k2[i];
        }
        f(t + 0.5 * h, &self.tmp, &mut self.k3);
        for i in 0..n {
            self.tmp[i] = y[i] + h * self.k3[i];
        }
        f(t + h, &self.tmp, &mut self.k4);
        for i in 0..n {
            y[i] += h / 6.0 * (self.k1[i] + 2.0 * self.k2[i] + 2.0 * self.k3[i] + self.k4[i]);
        }
    }
}

pub const BLOWUP: f64 = 1e12;

/// Fixed-step RK4 integration from t = 0. `x0` holds [x₁..x_k, ẋ₁..ẋ_k].
pub fn simulate(model: &IdentifiedModel, forcing: &ForcingConfig, x0: &[f64], duration: f64, dt: f64) -> Result<TimeSeries> {
    forcing.validate()?;
    let k = model.dims;
    if x0.len() != 2 * k {
        return Err(Error::DimensionMismatch(format!("initial state has {} entries, need {}", x0.len(), 2 * k)));
    }
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite initial state".into()));
    }
    if !(dt > 0.0 && duration > 0.0) {
        return Err(Error::InvalidInput(format!("need dt > 0 and duration > 0, got {dt}, {duration}")));
    }
    let limit = 2.0 * PI / model.omega_max() / 100.0;
    if dt > limit * (1.0 + 1e-12) {
        return Err(Error::InvalidInput(format!(
            "dt = {dt} exceeds {limit:.6} (100 samples per fastest linear period)"
        )));
    }
    let steps = (duration / dt).round() as usize;
    let mut xs = vec![Vec::with_capacity(steps + 1); k];
    let mut vs = vec![Vec::with_capacity(steps + 1); k];
    let mut y = x0.to_vec();
    let mut rk = Rk4::new(2 * k);
    let (beta, om) = (forcing.beta, forcing.omega_f);
    let mut f = |t: f64, y: &[f64], dy: &mut [f64]| model.rhs(t, y, beta, om, dy);
    for s in 0..=steps {
        for i in 0..k {
            xs[i].push(y[i]);
            vs[i].push(y[k + i]);
        }
        if s == steps {
            break;
        }
        let t = s as f64 * dt;
        rk.step(&mut f, t, &mut y, dt);
        if y.iter().any(|v| !(v.abs() <= BLOWUP)) {
            return Err(Error::BlowUp { t: t + dt });
        }
    }
    TimeSeries::new(0.0, dt, xs, Some(vs), Some(*forcing))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SteadyStateSummary {
    pub amplitude: f64,
    pub phase_lag: f64,
    pub converged: bool,
    pub periods: usize,
}

pub const STEADY_MAX_PERIODS: usize = 2000;

/// Integrate to a periodic steady state and summarize one channel.
/// Amplitude is half the peak-to-peak excursion over the final period; the
/// phase lag is atan2(c₁, b₁) of the first harmonic x ≈ b₁cos Ωt + c₁sin Ωt,
/// positive when the response lags the cosine forcing.
pub fn steady_state_response(
    model: &IdentifiedModel,
    beta: f64,
    omega: f64,
    channel: usize,
    x0: Option<&[f64]>,
) -> Result<SteadyStateSummary> {
    let k = model.dims;
    if channel >= k {
        return Err(Error::InvalidInput(format!("channel {channel} out of range")));
    }
    if !(0..k).any(|i| model.linear_damping(i) > 0.0) {
        return Err(Error::NotConverged { iterations: 0 });
    }
    let period = 2.0 * PI / omega;
    let per = 256usize.max((100.0 * model.omega_max() / omega).ceil() as usize);
    let h = period / per as f64;
    let mut y = match x0 {
        Some(s) if s.len() == 2 * k => s.to_vec(),
        Some(s) => return Err(Error::DimensionMismatch(format!("initial state has {} entries", s.len()))),
        None => vec![0.0; 2 * k],
    };
    // A period-to-period change δ with per-period transient decay ρ leaves
    // about δ/(1 − ρ) still to go, so the tolerance is tightened by 1 − ρ.
    let slowest = (0..k).map(|i| model.linear_damping(i)).filter(|&c| c > 0.0).fold(f64::INFINITY, f64::min);
    let tol = 1e-4 * (1.0 - (-0.5 * slowest * period).exp());
    let mut rk = Rk4::new(2 * k);
    let mut f = |t: f64, y: &[f64], dy: &mut [f64]| model.rhs(t, y, beta, omega, dy);
    let mut prev: Option<(f64, f64)> = None;
    let mut calm = 0;
    let mut last = (0.0, 0.0);
    for p in 0..STEADY_MAX_PERIODS {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        let (mut bc, mut bs) = (0.0, 0.0);
        for s in 0..per {
            // local time within the period is enough: the forcing is periodic
            let t = s as f64 * h;
            let xv = y[channel];
            lo = lo.min(xv);
            hi = hi.max(xv);
            // periodic trapezoid = rectangle rule over a full period
            bc += xv * (omega * t).cos();
            bs += xv * (omega * t).sin();
            rk.step(&mut f, t, &mut y, h);
            if y.iter().any(|v| !(v.abs() <= BLOWUP)) {
                return Err(Error::BlowUp { t: (p * per + s) as f64 * h });
            }
        }
        let amp = 0.5 * (hi - lo);
        let b1 = 2.0 * bc / per as f64;
        let c1 = 2.0 * bs / per as f64;
        let phase = c1.atan2(b1);
        last = (amp, phase);
        if let Some((pa, pp)) = prev {
            let da = (amp - pa).abs() / amp.max(f64::MIN_POSITIVE);
            let dp = ((phase - pp + PI).rem_euclid(2.0 * PI) - PI).abs();
            if da < tol && dp < tol {
                calm += 1;
                if calm >= 3 {
                    return Ok(SteadyStateSummary { amplitude: amp, phase_lag: phase, converged: true, periods: p + 1 });
                }
            } else {
                calm = 0;
            }
        }
        prev = Some((amp, phase));
    }
    Ok(SteadyStateSummary { amplitude: last.0, phase_lag: last.1, converged: false, periods: STEADY_MAX_PERIODS })
}

/// Turn the regression coefficients of one channel into its equation. The
/// regression target is f̂* = (ω² − ω̂²)x + εf − F, so the x coefficient is
/// the stiffness correction, the remaining monomials are εf, and the
/// forcing coefficients are −β_train times the per-unit-β forcing.
pub fn assemble_ode(terms: &[Term], values: &[f64], omega_hat: f64, channel: usize, beta_train: f64) -> Result<ChannelEquation> {
    if terms.len() != values.len() {
        return Err(Error::DimensionMismatch("coefficient count differs from library size".into()));
    }
    let mut xi_x = 0.0;
    let mut out = Vec::new();
    let mut forcing = ForcingCoef::default();
    for (t, &c) in terms.iter().zip(values) {
        if c == 0.0 {
            continue;
        }
        match t {
            Term::Monomial(m) if m.is_linear_x(channel) => xi_x += c,
            Term::Monomial(m) => out.push(ModelTerm { exponents: m.clone(), coef: c }),
            Term::ForcingCos | Term::ForcingSin => {
                if !(beta_train > 0.0) {
                    return Err(Error::InvalidInput("forcing identified but training beta is zero".into()));
                }
                if matches!(t, Term::ForcingCos) {
                    forcing.cos = -c / beta_train;
                } else {
                    forcing.sin = -c / beta_train;
                }
            }
        }
    }
    let omega_sq = omega_hat * omega_hat + xi_x;
    if !(omega_sq > 0.0) {
        return Err(Error::NonPositiveStiffness(omega_sq));
    }
    Ok(ChannelEquation { omega_sq, terms: out, forcing })
}

/// Named reference systems.
pub mod fixtures {
    use super::*;

    /// ẍ + ω²x + cẋ + α₁x² + α₂x³ = β cos Ωt.
    pub fn duffing(omega_sq: f64, c: f64, alpha1: f64, alpha2: f64) -> IdentifiedModel {
        let mut terms = Vec::new();
        if c != 0.0 {
            terms.push(ModelTerm { exponents: Monomial::v_pow(1, 0, 1), coef: c });
        }
        if alpha1 != 0.0 {
            terms.push(ModelTerm { exponents: Monomial::x_pow(1, 0, 2), coef: alpha1 });
        }
        if alpha2 != 0.0 {
            terms.push(ModelTerm { exponents: Monomial::x_pow(1, 0, 3), coef: alpha2 });
        }
        IdentifiedModel {
            dims: 1,
            omega_sq: vec![omega_sq],
            terms: vec![terms],
            forcing: vec![ForcingCoef { cos: 1.0, sin: 0.0 }],
        }
    }

    /// The single-degree-of-freedom benchmark: ω = 2, c = 1e−2,
    /// α₁ = 1e−2 (on x²), α₂ = 1e−4.
    pub fn table1() -> IdentifiedModel {
        duffing(4.0, 1e-2, 1e-2, 1e-4)
    }

    fn term(dims: usize, x: &[(usize, u32)], v: &[(usize, u32)], coef: f64) -> ModelTerm {
        let mut m = Monomial::zero(dims);
        for &(j, e) in x {
            m.x[j] = e;
        }
        for &(j, e) in v {
            m.v[j] = e;
        }
        ModelTerm { exponents: m, coef }
    }

    /// Three-mode reduced beam model.
    pub fn beam() -> IdentifiedModel {
        IdentifiedModel {
            dims: 3,
            omega_sq: vec![0.2998, 0.3006, 0.3006],
            terms: vec![
                vec![term(3, &[(0, 3)], &[], 2.730e-6), term(3, &[], &[(0, 1)], 1.100e-2)],
                vec![
                    term(3, &[(0, 1)], &[], -1.468e-6),
                    term(3, &[(0, 3)], &[], 5.453e-9),
                    term(3, &[], &[(0, 1)], 2.450e-5),
                ],
                vec![term(3, &[(0, 2)], &[], 2.402e-6), term(3, &[], &[(0, 2)], -1.574e-5)],
            ],
            forcing: vec![
                ForcingCoef { cos: 1.902, sin: 0.0 },
                ForcingCoef { cos: 4.202e-3, sin: 0.0 },
                ForcingCoef::default(),
            ],
        }
    }

    /// Three-mode reduced micromirror model.
    pub fn mirror() -> IdentifiedModel {
        IdentifiedModel {
            dims: 3,
            omega_sq: vec![3.383e-2, 3.374e-2, 3.374e-2],
            terms: vec![
                vec![term(3, &[(0, 3)], &[], -1.180e-11), term(3, &[], &[(0, 1)], 1.865e-4)],
                vec![term(3, &[(0, 2)], &[], -1.103e-7), term(3, &[], &[(0, 2)], 3.912e-5)],
                vec![term(3, &[(0, 2)], &[], -9.127e-7), term(3, &[], &[(0, 2)], 2.392e-5)],
            ],
            forcing: vec![ForcingCoef { cos: 1.076e-1, sin: 0.0 }, ForcingCoef::default(), ForcingCoef::default()],
        }
    }

    pub fn by_name(name: &str) -> Option<IdentifiedModel> {
        match name {
            "table1" => Some(table1()),
            "beam" => Some(beam()),
            "mirror" => Some(mirror()),
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;
    use proptest::prelude::*;

    fn linear(omega_sq: f64, c: f64) -> IdentifiedModel {
        duffing(omega_sq, c, 0.0, 0.0)
    }

    #[test]
    fn undamped_linear_matches_cosine() {
        let m = linear(4.0, 0.0);
        let dt = 2.0 * PI / 2000.0;
        let ts = simulate(&m, &ForcingConfig::cosine(0.0, 1.0).unwrap(), &[1.0, 0.0], 100.0 * PI, dt).unwrap();
        let err = ts.x[0].iter().enumerate().map(|(i, x)| (x - (2.0 * i as f64 * dt).cos()).abs()).fold(0.0, f64::max);
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn rk4_fourth_order() {
        let m = linear(4.0, 0.0);
        let f = ForcingConfig::cosine(0.0, 1.0).unwrap();
        let end = |dt: f64| {
            let ts = simulate(&m, &f, &[1.0, 0.0], 10.0, dt).unwrap();
            (ts.x[0].last().unwrap() - 20.0f64.cos()).abs()
        };
        let ratio = end(0.02) / end(0.01);
        assert!(ratio >= 14.0, "{ratio}");
    }

    #[test]
    fn benchmark_spectrum_has_secondary_peaks() {
        let ts = simulate(&table1(), &ForcingConfig::cosine(0.5, 1.999).unwrap(), &[0.0, 0.0], 1000.0, 0.01).unwrap();
        let w = crate::signal::estimate_fundamental(&ts, 0).unwrap();
        assert!((w - 1.999).abs() < 2.0 * PI / 1000.0, "{w}");
        let bands = crate::signal::band_magnitudes(&ts.x[0], ts.dt, w).unwrap();
        assert!(bands[0] > 1e-3 * bands[1] && bands[2] > 1e-3 * bands[1]);
        assert!(bands[0] > bands[3] && bands[2] > bands[3]);
    }

    #[test]
    fn conservative_energy_preserved() {
        let m = duffing(4.0, 0.0, 1e-2, 1e-4);
        let ts = simulate(&m, &ForcingConfig::cosine(0.0, 1.0).unwrap(), &[1.0, 0.0], 100.0 * PI, 0.005).unwrap();
        let h = |x: f64, v: f64| 0.5 * v * v + 2.0 * x * x + 1e-2 * x.powi(3) / 3.0 + 1e-4 * x.powi(4) / 4.0;
        let v = ts.v.as_ref().unwrap();
        let h0 = h(1.0, 0.0);
        for i in 0..ts.len() {
            assert!((h(ts.x[0][i], v[0][i]) / h0 - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn blow_up_detected() {
        let m = duffing(1.0, 0.0, 0.0, -1.0);
        let r = simulate(&m, &ForcingConfig::cosine(0.0, 1.0).unwrap(), &[10.0, 0.0], 100.0, 0.01);
        assert!(matches!(r, Err(Error::BlowUp { .. })));
    }

    #[test]
    fn dt_precondition() {
        let r = simulate(&table1(), &ForcingConfig::cosine(0.5, 2.0).unwrap(), &[0.0, 0.0], 10.0, 0.05);
        assert!(matches!(r, Err(Error::InvalidInput(_))));
    }

    #[test]
    fn steady_state_linear_lorentzian() {
        let (w2, c, beta) = (4.0, 0.05, 0.3);
        let m = linear(w2, c);
        for om in [1.5, 1.95, 2.0, 2.4] {
            let s = steady_state_response(&m, beta, om, 0, None).unwrap();
            assert!(s.converged);
            let amp = beta / ((w2 - om * om).powi(2) + (c * om).powi(2)).sqrt();
            let lag = (c * om).atan2(w2 - om * om);
            assert!((s.amplitude / amp - 1.0).abs() < 1e-3, "{om}: {} vs {amp}", s.amplitude);
            assert!((s.phase_lag - lag).abs() < 1e-3, "{om}: {} vs {lag}", s.phase_lag);
        }
    }

    #[test]
    fn steady_state_undamped_not_converged() {
        let r = steady_state_response(&linear(4.0, 0.0), 0.5, 1.9, 0, None);
        assert!(matches!(r, Err(Error::NotConverged { .. })));
    }

    #[test]
    fn linear_response_closed_form() {
        let m = linear(4.0, 0.1);
        let (p, q) = m.linear_response(0, 1.0, 1.8);
        let den = (4.0f64 - 3.24).powi(2) + 0.18f64.powi(2);
        assert!((p - (4.0 - 3.24) / den).abs() < 1e-12);
        assert!((q - 0.18 / den).abs() < 1e-12);
    }

    #[test]
    fn assemble_ode_cases() {
        let lib = vec![
            Term::Monomial(Monomial::x_pow(1, 0, 1)),
            Term::Monomial(Monomial::v_pow(1, 0, 1)),
            Term::ForcingCos,
        ];
        let e = assemble_ode(&lib, &[0.0, 0.01, -0.5], 1.999, 0, 0.5).unwrap();
        assert_eq!(e.omega_sq, 1.999 * 1.999);
        assert_eq!(e.forcing.cos, 1.0);
        assert_eq!(e.terms.len(), 1);
        let e = assemble_ode(&lib, &[4.0012 - 1.999f64.powi(2), 0.0, 0.0], 1.999, 0, 0.5).unwrap();
        assert!((e.omega_sq - 4.0012).abs() < 1e-12);
        let r = assemble_ode(&lib, &[-1.999f64.powi(2) - 1.0, 0.0, 0.0], 1.999, 0, 0.5);
        assert!(matches!(r, Err(Error::NonPositiveStiffness(_))));
    }

    #[test]
    fn fixtures_json_round_trip() {
        for m in [table1(), beam(), mirror()] {
            let s = m.to_json();
            let back = IdentifiedModel::from_json(&s).unwrap();
            assert_eq!(back, m);
            assert_eq!(back.to_json(), s);
        }
    }

    #[test]
    fn monomial_gradient_matches_differences() {
        let m = Monomial { x: vec![2, 1], v: vec![0, 3] };
        let (x, v) = ([0.7, -1.3], [0.4, 0.9]);
        let (mut dx, mut dv) = ([0.0; 2], [0.0; 2]);
        m.add_gradient(&x, &v, 1.0, &mut dx, &mut dv);
        let h = 1e-6;
        for j in 0..2 {
            let mut xp = x;
            xp[j] += h;
            let mut xm = x;
            xm[j] -= h;
            assert!(((m.eval(&xp, &v) - m.eval(&xm, &v)) / (2.0 * h) - dx[j]).abs() < 1e-6);
            let mut vp = v;
            vp[j] += h;
            let mut vm = v;
            vm[j] -= h;
            assert!(((m.eval(&x, &vp) - m.eval(&x, &vm)) / (2.0 * h) - dv[j]).abs() < 1e-6);
        }
        assert_eq!(m.to_string(), "x1^2*x2^1*v2^3");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn model_json_bit_identical(w in 1e-3f64..10.0, c in -1e-3f64..1e-1, a in -1e3f64..1e3, f in -2.0f64..2.0) {
            let mut m = duffing(w, c, a * 1e-7, a / 3.0);
            m.forcing[0].sin = f;
            let s = m.to_json();
            let back = IdentifiedModel::from_json(&s).unwrap();
            prop_assert_eq!(back.omega_sq[0].to_bits(), m.omega_sq[0].to_bits());
            for (p, q) in back.terms[0].iter().zip(&m.terms[0]) {
                prop_assert_eq!(p.coef.to_bits(), q.coef.to_bits());
            }
            prop_assert_eq!(back.to_json(), s);
        }
    }
}
