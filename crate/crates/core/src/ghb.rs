//! Generalized-harmonic-balance regression problems: candidate libraries,
//! one-period weighted averages, target rows and multi-dataset merging.

use std::fmt;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Monomial;
use crate::signal::{cumulative_trapezoid, half_window, HarmonicDecomposition, TimeSeries};

/// One candidate basis function.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Term {
    Monomial(Monomial),
    ForcingCos,
    ForcingSin,
}

impl Term {
    /// Value for state (x, ẋ) and forcing phase Ωt.
    pub fn eval(&self, x: &[f64], v: &[f64], phase: f64) -> f64 {
        match self {
            Term::Monomial(m) => m.eval(x, v),
            Term::ForcingCos => phase.cos(),
            Term::ForcingSin => phase.sin(),
        }
    }

    pub fn needs_velocity(&self) -> bool {
        matches!(self, Term::Monomial(m) if m.v.iter().any(|&e| e > 0))
    }

    /// Parse a descriptor produced by `Display` (`x1^3`, `x1^1*v2^2`, `cos`, `sin`).
    pub fn parse(s: &str, dims: usize) -> Result<Term> {
        match s {
            "cos" => return Ok(Term::ForcingCos),
            "sin" => return Ok(Term::ForcingSin),
            _ => {}
        }
        let mut m = Monomial::zero(dims);
        for factor in s.split('*') {
            let (var, exp) = factor.split_once('^').ok_or_else(|| Error::Parse(format!("bad term '{s}'")))?;
            let e: u32 = exp.parse().map_err(|_| Error::Parse(format!("bad exponent in '{s}'")))?;
            let (kind, ch) = var.split_at(1);
            let ch: usize = ch.parse().map_err(|_| Error::Parse(format!("bad channel in '{s}'")))?;
            if ch == 0 || ch > dims {
                return Err(Error::Parse(format!("channel out of range in '{s}'")));
            }
            match kind {
                "x" => m.x[ch - 1] += e,
                "v" => m.v[ch - 1] += e,
                _ => return Err(Error::Parse(format!("bad variable in '{s}'"))),
            }
        }
        Ok(Term::Monomial(m))
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Term::Monomial(m) => write!(f, "{m}"),
            Term::ForcingCos => write!(f, "cos"),
            Term::ForcingSin => write!(f, "sin"),
        }
    }
}

/// Library construction options (the JSON library specification).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LibrarySpec {
    pub max_degree: u32,
    pub cross_channel_degree: u32,
    pub include_forcing: bool,
    pub include_cross_xv: bool,
    /// Products of different channels' states (e.g. x₁x₂). Off by default:
    /// other channels contribute pure powers only.
    pub include_mixed_channels: bool,
}

impl Default for LibrarySpec {
    fn default() -> Self {
        LibrarySpec {
            max_degree: 5,
            cross_channel_degree: 3,
            include_forcing: true,
            include_cross_xv: false,
            include_mixed_channels: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CandidateLibrary {
    pub dims: usize,
    pub channel: usize,
    pub terms: Vec<Term>,
}

impl CandidateLibrary {
    pub fn new(dims: usize, channel: usize, terms: Vec<Term>) -> Result<Self> {
        if channel >= dims {
            return Err(Error::InvalidInput(format!("channel {channel} out of range for {dims} dims")));
        }
        for (i, t) in terms.iter().enumerate() {
            if terms[..i].contains(t) {
                return Err(Error::InvalidInput(format!("duplicate library term {t}")));
            }
            if let Term::Monomial(m) = t {
                if m.dims() != dims || m.degree() == 0 {
                    return Err(Error::InvalidInput(format!("bad library term {t}")));
                }
            }
        }
        let lib = CandidateLibrary { dims, channel, terms };
        lib.linear_index().ok_or(Error::MissingLinearTerm(channel))?;
        Ok(lib)
    }

    /// Ordered library: own-channel powers of x then ẋ, optional x·ẋ
    /// products, other channels' pure powers, optional mixed-channel
    /// products, then the forcing pair.
    pub fn build(spec: &LibrarySpec, dims: usize, channel: usize) -> Result<Self> {
        if spec.max_degree == 0 {
            return Err(Error::InvalidInput("max_degree must be >= 1".into()));
        }
        let d = spec.max_degree;
        let mut terms = Vec::new();
        for p in 1..=d {
            terms.push(Term::Monomial(Monomial::x_pow(dims, channel, p)));
        }
        for p in 1..=d {
            terms.push(Term::Monomial(Monomial::v_pow(dims, channel, p)));
        }
        if spec.include_cross_xv {
            for a in 1..d {
                for b in 1..=d - a {
                    let mut m = Monomial::x_pow(dims, channel, a);
                    m.v[channel] = b;
                    terms.push(Term::Monomial(m));
                }
            }
        }
        let cd = spec.cross_channel_degree.min(d);
        for j in (0..dims).filter(|&j| j != channel) {
            for p in 1..=cd {
                terms.push(Term::Monomial(Monomial::x_pow(dims, j, p)));
            }
            for p in 1..=cd {
                terms.push(Term::Monomial(Monomial::v_pow(dims, j, p)));
            }
        }
        if spec.include_mixed_channels && dims > 1 {
            let mut mixed: Vec<Monomial> = Vec::new();
            let mut exps = vec![0u32; 2 * dims];
            enumerate_monomials(&mut exps, 0, cd, &mut |e| {
                let m = Monomial { x: e[..dims].to_vec(), v: e[dims..].to_vec() };
                let chans = (0..dims).filter(|&j| m.x[j] + m.v[j] > 0).count();
                let has_x = m.x.iter().any(|&a| a > 0);
                let has_v = m.v.iter().any(|&a| a > 0);
                if m.degree() >= 2 && chans >= 2 && (spec.include_cross_xv || !(has_x && has_v)) {
                    mixed.push(m);
                }
            });
            mixed.sort_by(|a, b| a.degree().cmp(&b.degree()).then_with(|| b.x.cmp(&a.x)).then_with(|| b.v.cmp(&a.v)));
            terms.extend(mixed.into_iter().map(Term::Monomial));
        }
        if spec.include_forcing {
            terms.push(Term::ForcingCos);
            terms.push(Term::ForcingSin);
        }
        CandidateLibrary::new(dims, channel, terms)
    }

    pub fn linear_index(&self) -> Option<usize> {
        self.terms.iter().position(|t| matches!(t, Term::Monomial(m) if m.is_linear_x(self.channel)))
    }

    pub fn names(&self) -> Vec<String> {
        self.terms.iter().map(|t| t.to_string()).collect()
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }
}

fn enumerate_monomials(e: &mut Vec<u32>, pos: usize, budget: u32, f: &mut impl FnMut(&[u32])) {
    if pos == e.len() {
        f(e);
        return;
    }
    for p in 0..=budget {
        e[pos] = p;
        enumerate_monomials(e, pos + 1, budget - p, f);
    }
    e[pos] = 0;
}

/// Harmonic index m of one stacked equation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum HarmonicIndex {
    Zero,
    Cos(usize),
    Sin(usize),
}

impl HarmonicIndex {
    /// Rows in the fixed order 0, (1,cos), (1,sin), (2,cos), …
    pub fn set_for(orders: &[usize]) -> Vec<HarmonicIndex> {
        let mut o = orders.to_vec();
        o.sort_unstable();
        o.dedup();
        let mut out = Vec::new();
        for n in o {
            if n == 0 {
                out.push(HarmonicIndex::Zero);
            } else {
                out.push(HarmonicIndex::Cos(n));
                out.push(HarmonicIndex::Sin(n));
            }
        }
        out
    }

    pub fn weight(&self) -> Weight {
        match *self {
            HarmonicIndex::Zero => Weight::Unit,
            HarmonicIndex::Cos(n) => Weight::Cos(n),
            HarmonicIndex::Sin(n) => Weight::Sin(n),
        }
    }
}

impl fmt::Display for HarmonicIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            HarmonicIndex::Zero => write!(f, "0"),
            HarmonicIndex::Cos(n) => write!(f, "cos{n}"),
            HarmonicIndex::Sin(n) => write!(f, "sin{n}"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Weight {
    Unit,
    Cos(usize),
    Sin(usize),
}

/// One-period weighted average around each requested sample index:
/// trapezoid quadrature of samples·w(nω̂s) over [t − π/ω̂, t + π/ω̂] with
/// the window snapped to whole samples, times 1/period for the unit weight
/// and 2/period for cos/sin. The period is the snapped window length.
pub fn periodic_average(samples: &[f64], t0: f64, dt: f64, omega_hat: f64, weight: Weight, at: &[usize]) -> Result<Vec<f64>> {
    let h = half_window(omega_hat, dt);
    let n = samples.len();
    let (g, scale): (Vec<f64>, f64) = match weight {
        Weight::Unit => (samples.to_vec(), 1.0),
        Weight::Cos(k) | Weight::Sin(k) => {
            let w = k as f64 * omega_hat;
            let g = samples
                .iter()
                .enumerate()
                .map(|(i, s)| {
                    let ph = w * (t0 + i as f64 * dt);
                    s * if matches!(weight, Weight::Cos(_)) { ph.cos() } else { ph.sin() }
                })
                .collect();
            (g, 2.0)
        }
    };
    let cs = cumulative_trapezoid(&g);
    at.iter()
        .map(|&i| {
            if i < h || i + h >= n {
                return Err(Error::WindowOutOfRange { index: i });
            }
            Ok(scale * (cs[i + h] - cs[i - h]) / (2 * h) as f64)
        })
        .collect()
}

/// Regression grid: the decomposition's valid range less two samples per
/// end (room for centered differences), every `stride`-th sample.
pub fn default_grid(d: &HarmonicDecomposition, stride: usize) -> Vec<usize> {
    let r = &d.valid_range;
    if r.end < r.start + 4 {
        return Vec::new();
    }
    (r.start + 2..r.end - 2).step_by(stride.max(1)).collect()
}

/// GHB target rows at the grid indices, in `HarmonicIndex::set_for` order.
pub fn assemble_targets(d: &HarmonicDecomposition, grid: &[usize]) -> Result<Vec<(HarmonicIndex, Vec<f64>)>> {
    if grid.len() < 2 {
        return Err(Error::TooShort("regression grid has fewer than 2 points".into()));
    }
    for &i in grid {
        if i < d.valid_range.start + 1 || i + 1 >= d.valid_range.end {
            return Err(Error::TooShort(format!("grid index {i} leaves no room for differences")));
        }
    }
    let (w, dt) = (d.omega_hat, d.dt);
    let d1 = |s: &[f64], i: usize| (s[i + 1] - s[i - 1]) / (2.0 * dt);
    let d2 = |s: &[f64], i: usize| (s[i + 1] - 2.0 * s[i] + s[i - 1]) / (dt * dt);
    let mut out = Vec::new();
    for idx in HarmonicIndex::set_for(&d.orders) {
        let row: Vec<f64> = match idx {
            HarmonicIndex::Zero => {
                let a = &d.envelope(0).unwrap().amplitude;
                grid.iter().map(|&i| d2(a, i) + w * w * a[i]).collect()
            }
            HarmonicIndex::Cos(n) | HarmonicIndex::Sin(n) => {
                let e = d.envelope(n).unwrap();
                let (b, c) = (e.b.as_ref().unwrap(), e.c.as_ref().unwrap());
                let nf = n as f64;
                let k = (nf * nf - 1.0) * w * w;
                if matches!(idx, HarmonicIndex::Cos(_)) {
                    grid.iter().map(|&i| d2(b, i) + 2.0 * nf * w * d1(c, i) - k * b[i]).collect()
                } else {
                    grid.iter().map(|&i| d2(c, i) - 2.0 * nf * w * d1(b, i) - k * c[i]).collect()
                }
            }
        };
        out.push((idx, row));
    }
    Ok(out)
}

/// Library matrices −P_m[θ_j] at the grid indices, one per harmonic index.
/// The flag reports that velocities had to be differenced from x.
pub fn assemble_library(
    ts: &TimeSeries,
    lib: &CandidateLibrary,
    omega_hat: f64,
    index_set: &[HarmonicIndex],
    grid: &[usize],
) -> Result<(Vec<DMatrix<f64>>, bool)> {
    if lib.dims != ts.dims() {
        return Err(Error::DimensionMismatch(format!("library for {} channels, data has {}", lib.dims, ts.dims())));
    }
    let needs_v = lib.terms.iter().any(|t| t.needs_velocity());
    let needs_f = lib.terms.iter().any(|t| matches!(t, Term::ForcingCos | Term::ForcingSin));
    let omega_f = match (&ts.forcing, needs_f) {
        (Some(f), _) => f.omega_f,
        (None, false) => 0.0,
        (None, true) => return Err(Error::InvalidInput("forcing terms need forcing metadata".into())),
    };
    let k = ts.dims();
    let n = ts.len();
    let mut estimated = false;
    let vel: Vec<Vec<f64>> = if needs_v {
        (0..k)
            .map(|j| {
                let (v, e) = ts.velocity(j)?;
                estimated |= e;
                Ok(v)
            })
            .collect::<Result<_>>()?
    } else {
        vec![vec![0.0; n]; k]
    };
    let mut mats: Vec<DMatrix<f64>> = index_set.iter().map(|_| DMatrix::zeros(grid.len(), lib.len())).collect();
    let mut xs = vec![0.0; k];
    let mut vs = vec![0.0; k];
    let mut column = vec![0.0; n];
    for (j, term) in lib.terms.iter().enumerate() {
        for i in 0..n {
            for c in 0..k {
                xs[c] = ts.x[c][i];
                vs[c] = vel[c][i];
            }
            column[i] = term.eval(&xs, &vs, omega_f * ts.time(i));
        }
        for (m, idx) in index_set.iter().enumerate() {
            let avg = periodic_average(&column, ts.t0, ts.dt, omega_hat, idx.weight(), grid)?;
            for (r, a) in avg.into_iter().enumerate() {
                mats[m][(r, j)] = -a;
            }
        }
    }
    Ok((mats, estimated))
}

/// Stacked GHB regression problem for one channel.
#[derive(Clone, Debug)]
pub struct EvolutionaryRegressionProblem {
    pub omega_hat: f64,
    pub index_set: Vec<HarmonicIndex>,
    pub targets: Vec<Vec<f64>>,
    pub library: Vec<DMatrix<f64>>,
    /// Times of the grid rows (concatenated for merged problems).
    pub grid: Vec<f64>,
    /// Lengths of the contiguous grid segments (one per merged dataset).
    pub segments: Vec<usize>,
    pub channel: usize,
    pub terms: Vec<Term>,
    pub velocity_estimated: bool,
}

impl EvolutionaryRegressionProblem {
    pub fn rows(&self) -> usize {
        self.grid.len()
    }

    pub fn cols(&self) -> usize {
        self.terms.len()
    }

    pub fn linear_index(&self) -> Option<usize> {
        self.terms.iter().position(|t| matches!(t, Term::Monomial(m) if m.is_linear_x(self.channel)))
    }

    /// All harmonic rows stacked into one system (Θ, y).
    pub fn stacked(&self) -> (DMatrix<f64>, Vec<f64>) {
        let r = self.rows();
        let m = self.index_set.len();
        let mut a = DMatrix::zeros(r * m, self.cols());
        let mut y = Vec::with_capacity(r * m);
        for (k, (mat, t)) in self.library.iter().zip(&self.targets).enumerate() {
            a.rows_mut(k * r, r).copy_from(mat);
            y.extend_from_slice(t);
        }
        (a, y)
    }

    /// Trapezoid weights of the grid rows, restarting at every segment.
    pub fn quadrature_weights(&self) -> Vec<f64> {
        let mut w = Vec::with_capacity(self.rows());
        let mut start = 0;
        for &len in &self.segments {
            let g = &self.grid[start..start + len];
            for i in 0..len {
                let left = if i > 0 { g[i] - g[i - 1] } else { 0.0 };
                let right = if i + 1 < len { g[i + 1] - g[i] } else { 0.0 };
                w.push(0.5 * (left + right));
            }
            start += len;
        }
        w
    }
}

/// Decomposition + library → regression problem on the default grid.
pub fn assemble_problem(
    ts: &TimeSeries,
    d: &HarmonicDecomposition,
    lib: &CandidateLibrary,
    stride: usize,
) -> Result<EvolutionaryRegressionProblem> {
    let grid = default_grid(d, stride);
    let rows = assemble_targets(d, &grid)?;
    let index_set: Vec<HarmonicIndex> = rows.iter().map(|(i, _)| *i).collect();
    let (library, velocity_estimated) = assemble_library(ts, lib, d.omega_hat, &index_set, &grid)?;
    Ok(EvolutionaryRegressionProblem {
        omega_hat: d.omega_hat,
        index_set,
        targets: rows.into_iter().map(|(_, r)| r).collect(),
        library,
        grid: grid.iter().map(|&i| ts.time(i)).collect(),
        segments: vec![grid.len()],
        channel: lib.channel,
        terms: lib.terms.clone(),
        velocity_estimated,
    })
}

/// Re-express the targets against the reference frequency ω̄ so that the
/// x coefficient becomes ω² − ω̄² for every dataset. With Θ_x = −P[x], the
/// exact rewrite of ä + ω̂²a = … is y + (ω̂² − ω̄²)Θ_x.
pub fn frequency_normalize(p: &EvolutionaryRegressionProblem, omega_bar: f64) -> Result<EvolutionaryRegressionProblem> {
    if !(omega_bar > 0.0) {
        return Err(Error::InvalidInput(format!("omega_bar must be > 0, got {omega_bar}")));
    }
    let lin = p.linear_index().ok_or(Error::MissingLinearTerm(p.channel))?;
    let shift = p.omega_hat * p.omega_hat - omega_bar * omega_bar;
    let mut out = p.clone();
    for (t, mat) in out.targets.iter_mut().zip(&p.library) {
        for (r, y) in t.iter_mut().enumerate() {
            *y += shift * mat[(r, lin)];
        }
    }
    out.omega_hat = omega_bar;
    Ok(out)
}

/// Row-wise concatenation per harmonic index.
pub fn merge_problems(problems: &[EvolutionaryRegressionProblem]) -> Result<EvolutionaryRegressionProblem> {
    let first = problems.first().ok_or_else(|| Error::IncompatibleProblems("nothing to merge".into()))?;
    for p in &problems[1..] {
        if p.terms != first.terms {
            return Err(Error::IncompatibleProblems("libraries differ".into()));
        }
        if p.index_set != first.index_set {
            return Err(Error::IncompatibleProblems("harmonic index sets differ".into()));
        }
        if p.channel != first.channel {
            return Err(Error::IncompatibleProblems("channels differ".into()));
        }
        if (p.omega_hat - first.omega_hat).abs() > 1e-12 * first.omega_hat {
            return Err(Error::IncompatibleProblems(format!(
                "reference frequencies differ ({} vs {}); normalize first",
                p.omega_hat, first.omega_hat
            )));
        }
    }
    let rows: usize = problems.iter().map(|p| p.rows()).sum();
    let mut out = first.clone();
    out.segments = problems.iter().flat_map(|p| p.segments.iter().copied()).collect();
    out.grid = problems.iter().flat_map(|p| p.grid.iter().copied()).collect();
    out.velocity_estimated = problems.iter().any(|p| p.velocity_estimated);
    for m in 0..first.index_set.len() {
        out.targets[m] = problems.iter().flat_map(|p| p.targets[m].iter().copied()).collect();
        let mut mat = DMatrix::zeros(rows, first.cols());
        let mut r0 = 0;
        for p in problems {
            mat.rows_mut(r0, p.rows()).copy_from(&p.library[m]);
            r0 += p.rows();
        }
        out.library[m] = mat;
    }
    Ok(out)
}

/// Normalize every problem to the mean of their ω̂ and merge.
pub fn normalize_and_merge(problems: &[EvolutionaryRegressionProblem]) -> Result<EvolutionaryRegressionProblem> {
    if problems.is_empty() {
        return Err(Error::IncompatibleProblems("nothing to merge".into()));
    }
    let bar = problems.iter().map(|p| p.omega_hat).sum::<f64>() / problems.len() as f64;
    let normalized = problems.iter().map(|p| frequency_normalize(p, bar)).collect::<Result<Vec<_>>>()?;
    merge_problems(&normalized)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::{DecomposeOptions, ForcingConfig};
    use std::f64::consts::PI;

    fn grid_of(n: usize, h: usize) -> Vec<usize> {
        (h..n - h).collect()
    }

    #[test]
    fn average_orthogonality() {
        // π/(ω̂·dt) a whole number of samples
        let dt = PI / 2000.0;
        let n = 20000;
        let s: Vec<f64> = (0..n).map(|i| (2.0 * i as f64 * dt).cos()).collect();
        let g = grid_of(n, 1600);
        let c = periodic_average(&s, 0.0, dt, 2.0, Weight::Cos(1), &g).unwrap();
        let si = periodic_average(&s, 0.0, dt, 2.0, Weight::Sin(1), &g).unwrap();
        assert!(c.iter().all(|v| (v - 1.0).abs() < 1e-4));
        assert!(si.iter().all(|v| v.abs() < 1e-4));
        let u = periodic_average(&vec![3.0; n], 0.0, dt, 2.0, Weight::Unit, &g).unwrap();
        assert!(u.iter().all(|v| (v - 3.0).abs() < 1e-10));
    }

    #[test]
    fn average_window_out_of_range() {
        let s = vec![1.0; 1000];
        let r = periodic_average(&s, 0.0, 0.01, 2.0, Weight::Unit, &[10]);
        assert!(matches!(r, Err(Error::WindowOutOfRange { index: 10 })));
    }

    #[test]
    fn trapezoid_second_order() {
        // window snapped exactly: ω̂ chosen so that π/ω̂ is a whole number of
        // samples at both resolutions
        let w = 2.0;
        let f = |t: f64| (0.3 * t).exp() * (1.3 * t + 0.2).sin();
        let exact = |t: f64| {
            // ∫ e^{0.3s} sin(1.3s+0.2) cos(2s) ds over the window, by a fine Simpson rule
            let (a, b) = (t - PI / w, t + PI / w);
            let m = 20000;
            let hh = (b - a) / m as f64;
            let g = |s: f64| f(s) * (w * s).cos();
            let mut acc = g(a) + g(b);
            for i in 1..m {
                acc += g(a + i as f64 * hh) * if i % 2 == 1 { 4.0 } else { 2.0 };
            }
            acc * hh / 3.0 * w / PI
        };
        let err = |per_window: usize| {
            let dt = 2.0 * PI / w / per_window as f64;
            let n = 8 * per_window;
            let s: Vec<f64> = (0..n).map(|i| f(i as f64 * dt)).collect();
            let i = 4 * per_window;
            let v = periodic_average(&s, 0.0, dt, w, Weight::Cos(1), &[i]).unwrap()[0];
            (v - exact(i as f64 * dt)).abs()
        };
        let ratio = err(40) / err(80);
        assert!(ratio >= 3.5, "{ratio}");
    }

    #[test]
    fn library_default_single_channel() {
        let lib = CandidateLibrary::build(&LibrarySpec::default(), 1, 0).unwrap();
        let names = lib.names();
        assert_eq!(
            names,
            ["x1^1", "x1^2", "x1^3", "x1^4", "x1^5", "v1^1", "v1^2", "v1^3", "v1^4", "v1^5", "cos", "sin"]
        );
        assert_eq!(lib.linear_index(), Some(0));
        for n in &names {
            assert_eq!(&Term::parse(n, 1).unwrap().to_string(), n);
        }
    }

    #[test]
    fn library_cross_channel_and_flags() {
        let spec = LibrarySpec { include_cross_xv: true, include_mixed_channels: true, ..Default::default() };
        let lib = CandidateLibrary::build(&spec, 2, 1).unwrap();
        let names = lib.names();
        assert!(names.contains(&"x2^1*v2^1".to_string()));
        assert!(names.contains(&"x1^3".to_string()));
        assert!(!names.contains(&"x1^4".to_string()));
        assert!(names.contains(&"x1^1*x2^1".to_string()));
        assert!(names.contains(&"x1^1*v2^1".to_string()));
        let plain = CandidateLibrary::build(&LibrarySpec::default(), 2, 1).unwrap();
        assert!(!plain.names().iter().any(|n| n.contains('*')));
        assert_eq!(plain.linear_index(), Some(0));
        assert_eq!(plain.names()[0], "x2^1");
    }

    #[test]
    fn library_requires_linear_term() {
        let r = CandidateLibrary::new(1, 0, vec![Term::ForcingCos]);
        assert!(matches!(r, Err(Error::MissingLinearTerm(0))));
        let x = Term::Monomial(Monomial::x_pow(1, 0, 1));
        assert!(CandidateLibrary::new(1, 0, vec![x.clone(), x]).is_err());
    }

    fn sine_series(w: f64, n: usize, dt: f64) -> TimeSeries {
        let x: Vec<f64> = (0..n).map(|i| (w * i as f64 * dt).sin()).collect();
        let v: Vec<f64> = (0..n).map(|i| w * (w * i as f64 * dt).cos()).collect();
        TimeSeries::new(0.0, dt, vec![x], Some(vec![v]), Some(ForcingConfig::cosine(1.0, w).unwrap())).unwrap()
    }

    #[test]
    fn library_columns_orthogonality() {
        let ts = sine_series(2.0, 20000, 0.005);
        let lib = CandidateLibrary::new(1, 0, vec![Term::Monomial(Monomial::x_pow(1, 0, 1)), Term::ForcingCos]).unwrap();
        let idx = [HarmonicIndex::Cos(1), HarmonicIndex::Sin(1)];
        let grid: Vec<usize> = (2000..18000).step_by(37).collect();
        let (m, est) = assemble_library(&ts, &lib, 2.0, &idx, &grid).unwrap();
        assert!(!est);
        for r in 0..grid.len() {
            assert!((m[1][(r, 0)] + 1.0).abs() < 1e-3);
            assert!((m[0][(r, 1)] + 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn library_flags_differenced_velocity() {
        let mut ts = sine_series(2.0, 20000, 0.005);
        ts.v = None;
        let lib = CandidateLibrary::build(&LibrarySpec::default(), 1, 0).unwrap();
        let (_, est) = assemble_library(&ts, &lib, 2.0, &[HarmonicIndex::Cos(1)], &[5000]).unwrap();
        assert!(est);
    }

    #[test]
    fn targets_of_constant_envelopes() {
        let d = HarmonicDecomposition {
            omega_hat: 2.0,
            orders: vec![0, 1],
            envelopes: vec![
                crate::signal::HarmonicEnvelope { order: 0, amplitude: vec![0.7; 100], phase: vec![0.0; 100], b: None, c: None },
                crate::signal::HarmonicEnvelope {
                    order: 1,
                    amplitude: vec![1.0; 100],
                    phase: vec![0.0; 100],
                    b: Some(vec![0.3; 100]),
                    c: Some(vec![-0.2; 100]),
                },
            ],
            valid_range: 0..100,
            t0: 0.0,
            dt: 0.01,
            len: 100,
        };
        let grid = default_grid(&d, 1);
        let rows = assemble_targets(&d, &grid).unwrap();
        assert_eq!(rows.iter().map(|r| r.0).collect::<Vec<_>>(), HarmonicIndex::set_for(&[0, 1]));
        assert!(rows[0].1.iter().all(|v| (v - 4.0 * 0.7).abs() < 1e-9));
        assert!(rows[1].1.iter().chain(&rows[2].1).all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn normalize_identity_and_inverse() {
        let ts = crate::model::simulate(
            &crate::model::fixtures::table1(),
            &ForcingConfig::cosine(0.5, 1.999).unwrap(),
            &[0.0, 0.0],
            400.0,
            0.01,
        )
        .unwrap();
        let d = crate::signal::decompose_with(&ts, 0, &[0, 1], &DecomposeOptions::default()).unwrap();
        let lib = CandidateLibrary::build(&LibrarySpec::default(), 1, 0).unwrap();
        let p = assemble_problem(&ts, &d, &lib, 10).unwrap();
        let same = frequency_normalize(&p, p.omega_hat).unwrap();
        assert_eq!(same.targets, p.targets);
        let there = frequency_normalize(&p, 2.05).unwrap();
        let again = frequency_normalize(&there, 2.05).unwrap();
        assert_eq!(again.targets, there.targets);
        let back = frequency_normalize(&there, p.omega_hat).unwrap();
        for (a, b) in back.targets.iter().flatten().zip(p.targets.iter().flatten()) {
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    fn merge_checks_compatibility() {
        let ts = sine_series(2.0, 20000, 0.005);
        let d = crate::signal::decompose(&ts, 0, &[1]).unwrap();
        let lib = CandidateLibrary::build(&LibrarySpec::default(), 1, 0).unwrap();
        let p = assemble_problem(&ts, &d, &lib, 50).unwrap();
        let m = merge_problems(&[p.clone(), p.clone()]).unwrap();
        assert_eq!(m.rows(), 2 * p.rows());
        assert_eq!(m.segments, vec![p.rows(), p.rows()]);
        let small = CandidateLibrary::new(1, 0, vec![Term::Monomial(Monomial::x_pow(1, 0, 1)), Term::ForcingCos]).unwrap();
        let q = assemble_problem(&ts, &d, &small, 50).unwrap();
        assert!(matches!(merge_problems(&[p.clone(), q]), Err(Error::IncompatibleProblems(_))));
        let shifted = frequency_normalize(&p, 2.1).unwrap();
        assert!(matches!(merge_problems(&[p, shifted]), Err(Error::IncompatibleProblems(_))));
    }
}
