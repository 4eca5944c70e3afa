//! Harmonic decomposition of measured trajectories: fundamental estimation,
//! FIR band extraction, analytic signals and slow envelopes.

use std::f64::consts::PI;
use std::ops::Range;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MIN_SAMPLES: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ForcingShape {
    #[default]
    Cosine,
}

/// External excitation `beta * cos(omega_f * t)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForcingConfig {
    pub beta: f64,
    pub omega_f: f64,
    #[serde(default)]
    pub shape: ForcingShape,
}

impl ForcingConfig {
    pub fn cosine(beta: f64, omega_f: f64) -> Result<Self> {
        let f = ForcingConfig { beta, omega_f, shape: ForcingShape::Cosine };
        f.validate()?;
        Ok(f)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.omega_f > 0.0 && self.omega_f.is_finite()) {
            return Err(Error::InvalidInput(format!("omega_f must be > 0, got {}", self.omega_f)));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::InvalidInput(format!("beta must be >= 0, got {}", self.beta)));
        }
        Ok(())
    }
}

/// Uniformly sampled multi-channel trajectory. Channels are stored
/// column-wise: `x[channel][sample]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeSeries {
    pub t0: f64,
    pub dt: f64,
    pub x: Vec<Vec<f64>>,
    pub v: Option<Vec<Vec<f64>>>,
    pub forcing: Option<ForcingConfig>,
}

impl TimeSeries {
    pub fn new(
        t0: f64,
        dt: f64,
        x: Vec<Vec<f64>>,
        v: Option<Vec<Vec<f64>>>,
        forcing: Option<ForcingConfig>,
    ) -> Result<Self> {
        let ts = TimeSeries { t0, dt, x, v, forcing };
        ts.validate()?;
        Ok(ts)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) || !self.t0.is_finite() {
            return Err(Error::InvalidInput(format!("bad time axis t0={} dt={}", self.t0, self.dt)));
        }
        if self.x.is_empty() {
            return Err(Error::InvalidInput("time series has no channels".into()));
        }
        let n = self.x[0].len();
        if n < MIN_SAMPLES {
            return Err(Error::TooShort(format!("{n} samples, need at least {MIN_SAMPLES}")));
        }
        let all = self.x.iter().chain(self.v.iter().flatten());
        for ch in all {
            if ch.len() != n {
                return Err(Error::InvalidInput("channels have unequal lengths".into()));
            }
            if ch.iter().any(|s| !s.is_finite()) {
                return Err(Error::DegenerateInput("non-finite sample".into()));
            }
        }
        if let Some(v) = &self.v {
            if v.len() != self.x.len() {
                return Err(Error::InvalidInput("velocity channel count differs from displacement".into()));
            }
        }
        if let Some(f) = &self.forcing {
            f.validate()?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.x[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dims(&self) -> usize {
        self.x.len()
    }

    pub fn time(&self, i: usize) -> f64 {
        self.t0 + i as f64 * self.dt
    }

    pub fn duration(&self) -> f64 {
        (self.len() - 1) as f64 * self.dt
    }

    pub fn channel(&self, ch: usize) -> Result<&[f64]> {
        self.x
            .get(ch)
            .map(|c| c.as_slice())
            .ok_or_else(|| Error::InvalidInput(format!("channel {ch} does not exist ({} channels)", self.dims())))
    }

    /// Velocity of one channel: the supplied series when present, otherwise
    /// second-order differences of the displacement. The flag reports
    /// whether differencing was needed.
    pub fn velocity(&self, ch: usize) -> Result<(Vec<f64>, bool)> {
        if let Some(v) = &self.v {
            return Ok((v[ch].clone(), false));
        }
        Ok((gradient(self.channel(ch)?, self.dt), true))
    }
}

/// Second-order centered differences, one-sided second-order at the ends.
pub fn gradient(x: &[f64], dt: f64) -> Vec<f64> {
    let n = x.len();
    let mut g = vec![0.0; n];
    if n < 3 {
        return g;
    }
    for i in 1..n - 1 {
        g[i] = (x[i + 1] - x[i - 1]) / (2.0 * dt);
    }
    g[0] = (-3.0 * x[0] + 4.0 * x[1] - x[2]) / (2.0 * dt);
    g[n - 1] = (3.0 * x[n - 1] - 4.0 * x[n - 2] + x[n - 3]) / (2.0 * dt);
    g
}

fn check_finite(x: &[f64]) -> Result<()> {
    if x.len() < MIN_SAMPLES {
        return Err(Error::TooShort(format!("{} samples, need at least {MIN_SAMPLES}", x.len())));
    }
    if x.iter().any(|s| !s.is_finite()) {
        return Err(Error::DegenerateInput("non-finite sample".into()));
    }
    Ok(())
}

fn hann(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    (0..n).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / (n - 1) as f64).cos()).collect()
}

/// One-sided magnitude spectrum of a real series zero-padded to `nfft`.
fn magnitude_spectrum(x: &[f64], nfft: usize) -> Vec<f64> {
    let mut buf: Vec<Complex64> = x.iter().map(|&s| Complex64::new(s, 0.0)).collect();
    buf.resize(nfft, Complex64::new(0.0, 0.0));
    FftPlanner::new().plan_fft_forward(nfft).process(&mut buf);
    buf[..=nfft / 2].iter().map(|c| c.norm()).collect()
}

/// Zero-padding factor used for peak location.
const PAD: usize = 4;

/// Dominant angular frequency of a sampled series, ignoring anything below
/// `min_omega`.
pub fn fundamental_frequency(x: &[f64], dt: f64, min_omega: f64) -> Result<f64> {
    check_finite(x)?;
    let n = x.len();
    let mean = x.iter().sum::<f64>() / n as f64;
    let scale = x.iter().fold(0.0f64, |m, s| m.max(s.abs()));
    if x.iter().all(|s| (s - mean).abs() <= 1e-14 * scale.max(f64::MIN_POSITIVE)) {
        return Err(Error::DegenerateInput("constant series has no oscillation".into()));
    }
    let w = hann(n);
    let xs: Vec<f64> = x.iter().zip(&w).map(|(s, w)| (s - mean) * w).collect();
    let nfft = PAD * n;
    let mag = magnitude_spectrum(&xs, nfft);
    let bin = 2.0 * PI / (nfft as f64 * dt);

    let mut sorted: Vec<f64> = mag[1..].to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = sorted[sorted.len() / 2];
    let kmin = ((min_omega / bin).ceil() as usize).max(1);
    if kmin >= mag.len() - 1 {
        return Err(Error::InvalidInput(format!("frequency floor {min_omega} is above Nyquist")));
    }
    let (k, &peak) = mag[kmin..]
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .map(|(i, m)| (i + kmin, m))
        .unwrap();
    if peak < 10.0 * median {
        return Err(Error::SpectrumFlat { max: peak, median });
    }
    let mut pos = k as f64;
    if k >= 1 && k + 1 < mag.len() && mag[k - 1] > 0.0 && mag[k + 1] > 0.0 {
        let (a, b, c) = (mag[k - 1].ln(), peak.ln(), mag[k + 1].ln());
        let den = a - 2.0 * b + c;
        if den < 0.0 {
            pos += (0.5 * (a - c) / den).clamp(-0.5, 0.5);
        }
    }
    Ok(pos * bin)
}

/// Fundamental angular frequency ω̂ of one channel.
pub fn estimate_fundamental(ts: &TimeSeries, channel: usize) -> Result<f64> {
    fundamental_frequency(ts.channel(channel)?, ts.dt, 0.0)
}

/// Harmonic orders present in `x`: order n is kept when its band
/// magnitude exceeds `rel_threshold` times the order-1 band magnitude.
pub fn harmonic_orders(x: &[f64], dt: f64, omega_hat: f64, rel_threshold: f64) -> Result<Vec<usize>> {
    let mags = band_magnitudes(x, dt, omega_hat)?;
    let mut orders = Vec::new();
    for (n, m) in mags.iter().enumerate() {
        if n == 1 || *m > rel_threshold * mags[1] {
            orders.push(n);
        }
    }
    Ok(orders)
}

/// Spectral magnitude integrated over the bands nω̂ ± ω̂/8, n = 0..=5 (the
/// DC band is [0, ω̂/8)). A Hann window keeps leakage from the dominant
/// order out of the weak bands.
pub fn band_magnitudes(x: &[f64], dt: f64, omega_hat: f64) -> Result<Vec<f64>> {
    check_finite(x)?;
    let n = x.len();
    let w = hann(n);
    let xs: Vec<f64> = x.iter().zip(&w).map(|(s, w)| s * w).collect();
    let mag = magnitude_spectrum(&xs, n);
    let bin = 2.0 * PI / (n as f64 * dt);
    let half = omega_hat / 8.0;
    let mut out = vec![0.0; 6];
    for (k, m) in mag.iter().enumerate() {
        let f = k as f64 * bin;
        for (order, acc) in out.iter_mut().enumerate() {
            let c = order as f64 * omega_hat;
            let inside = if order == 0 { f < half } else { f >= c - half && f < c + half };
            if inside {
                *acc += m;
            }
        }
    }
    Ok(out)
}

pub fn detect_harmonics(ts: &TimeSeries, channel: usize, omega_hat: f64, rel_threshold: f64) -> Result<Vec<usize>> {
    if !(rel_threshold > 0.0 && rel_threshold < 1.0) {
        return Err(Error::InvalidInput(format!("rel_threshold must lie in (0,1), got {rel_threshold}")));
    }
    harmonic_orders(ts.channel(channel)?, ts.dt, omega_hat, rel_threshold)
}

/// Linear-phase FIR filter designed by the window method.
#[derive(Clone, Debug)]
pub struct FirFilter {
    pub taps: Vec<f64>,
    pub center: f64,
    pub width: f64,
    pub group_delay: usize,
    pub dt: f64,
}

impl FirFilter {
    /// |H(ω)| for angular frequency ω.
    pub fn gain(&self, omega: f64) -> f64 {
        let g = self.group_delay as f64;
        let mut acc = Complex64::new(0.0, 0.0);
        for (k, h) in self.taps.iter().enumerate() {
            let ph = -omega * self.dt * (k as f64 - g);
            acc += Complex64::new(ph.cos(), ph.sin()) * *h;
        }
        acc.norm()
    }

    /// Zero-phase application: convolve and undo the integer group delay.
    /// The output has the input's length; its first and last
    /// `group_delay` samples are contaminated by the zero padding.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let full = convolve(x, &self.taps);
        full[self.group_delay..self.group_delay + x.len()].to_vec()
    }
}

/// Linear convolution through the FFT.
pub fn convolve(a: &[f64], b: &[f64]) -> Vec<f64> {
    let n = a.len() + b.len() - 1;
    let nfft = n.next_power_of_two();
    let mut planner = FftPlanner::new();
    let fwd = planner.plan_fft_forward(nfft);
    let inv = planner.plan_fft_inverse(nfft);
    let pad = |s: &[f64]| {
        let mut v: Vec<Complex64> = s.iter().map(|&x| Complex64::new(x, 0.0)).collect();
        v.resize(nfft, Complex64::new(0.0, 0.0));
        v
    };
    let mut fa = pad(a);
    let mut fb = pad(b);
    fwd.process(&mut fa);
    fwd.process(&mut fb);
    for (x, y) in fa.iter_mut().zip(&fb) {
        *x *= *y;
    }
    inv.process(&mut fa);
    let s = 1.0 / nfft as f64;
    fa[..n].iter().map(|c| c.re * s).collect()
}

/// Hamming window method. The ideal response has cutoffs at
/// `center ± width`, the middle of the transition between the passband
/// edge (`center ± width/2`) and the stopband edge (`center ± 3·width/2`).
/// The requested length is `periods` fundamental periods, where the
/// fundamental is `4·width`; it is extended when that is too short for the
/// Hamming transition band to fit inside one `width`. Taps are scaled for
/// unit gain at `center`.
pub fn design_bandpass(center: f64, width: f64, dt: f64, periods: f64) -> Result<FirFilter> {
    let nyquist = PI / dt;
    if !(width > 0.0) || !(dt > 0.0) || !(center >= 0.0) {
        return Err(Error::InvalidInput(format!("bad filter spec center={center} width={width} dt={dt}")));
    }
    if periods < 4.0 {
        return Err(Error::InvalidInput(format!("filter must span at least 4 periods, got {periods}")));
    }
    if center + width / 2.0 >= nyquist {
        return Err(Error::BandOutOfRange { lo: center - width / 2.0, hi: center + width / 2.0, nyquist });
    }
    let fundamental = 4.0 * width;
    let requested = periods * 2.0 * PI / fundamental / dt;
    // Hamming: transition ≈ 6.6π/N rad/sample; 8π/N leaves margin.
    let minimum = 8.0 * PI / (width * dt);
    let mut len = requested.max(minimum).ceil() as usize;
    if len % 2 == 0 {
        len += 1;
    }
    let m = (len - 1) / 2;
    let lowpass = |wc: f64, k: f64| -> f64 {
        // ideal lowpass impulse response with cutoff wc (rad/s), sampled at dt
        let w = wc * dt;
        if k == 0.0 {
            w / PI
        } else {
            (w * k).sin() / (PI * k)
        }
    };
    let mut taps = Vec::with_capacity(len);
    for i in 0..len {
        let k = i as f64 - m as f64;
        let hamming = 0.54 - 0.46 * (2.0 * PI * i as f64 / (len - 1) as f64).cos();
        let ideal = if center == 0.0 {
            lowpass(width, k)
        } else {
            let hi = (center + width).min(nyquist);
            let lo = (center - width).max(0.0);
            lowpass(hi, k) - lowpass(lo, k)
        };
        taps.push(ideal * hamming);
    }
    let mut filt = FirFilter { taps, center, width, group_delay: m, dt };
    let g = filt.gain(center);
    for t in filt.taps.iter_mut() {
        *t /= g;
    }
    Ok(filt)
}

/// Default filter length in fundamental periods (extended automatically).
pub const DEFAULT_FILTER_PERIODS: f64 = 8.0;

/// A band-limited component with the index range free of edge effects.
#[derive(Clone, Debug)]
pub struct Component {
    pub series: Vec<f64>,
    pub valid: Range<usize>,
}

/// Isolate harmonic order `n` (order 0 by a lowpass) with bandwidth ω̂/4.
pub fn bandpass_component(x: &[f64], dt: f64, n: usize, omega_hat: f64, periods: f64) -> Result<Component> {
    check_finite(x)?;
    let width = omega_hat / 4.0;
    let filt = design_bandpass(n as f64 * omega_hat, width, dt, periods)?;
    let gd = filt.group_delay;
    let period = (2.0 * PI / omega_hat / dt).round() as usize;
    if x.len() < 2 * gd + 4 * period {
        return Err(Error::TooShort(format!(
            "{} samples leave fewer than 4 periods after trimming {} filter samples per end",
            x.len(),
            gd
        )));
    }
    Ok(Component { series: filt.apply(x), valid: gd..x.len() - gd })
}

pub fn bandpass_extract(ts: &TimeSeries, channel: usize, n: usize, omega_hat: f64) -> Result<Component> {
    bandpass_component(ts.channel(channel)?, ts.dt, n, omega_hat, DEFAULT_FILTER_PERIODS)
}

/// Analytic signal by the frequency-domain construction.
pub fn hilbert_analytic(x: &[f64]) -> Result<Vec<Complex64>> {
    check_finite(x)?;
    let n = x.len();
    let mut planner = FftPlanner::new();
    let mut buf: Vec<Complex64> = x.iter().map(|&s| Complex64::new(s, 0.0)).collect();
    planner.plan_fft_forward(n).process(&mut buf);
    // keep DC (and Nyquist for even n), double positive, zero negative
    let half = n.div_ceil(2);
    for (k, c) in buf.iter_mut().enumerate() {
        if k == 0 || (n % 2 == 0 && k == n / 2) {
            continue;
        }
        if k < half {
            *c *= 2.0;
        } else {
            *c = Complex64::new(0.0, 0.0);
        }
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    let s = 1.0 / n as f64;
    for c in buf.iter_mut() {
        *c *= s;
    }
    Ok(buf)
}

/// Half-width, in samples, of a one-period window at ω̂.
pub fn half_window(omega_hat: f64, dt: f64) -> usize {
    ((PI / omega_hat / dt).round() as usize).max(1)
}

/// Centered moving mean over `[i-h, i+h]` by the trapezoid rule,
/// normalized by the actual window length `2h·dt`. Entries closer than `h`
/// to either end are NaN.
pub fn moving_mean(x: &[f64], h: usize) -> Vec<f64> {
    let n = x.len();
    let mut out = vec![f64::NAN; n];
    if n < 2 * h + 1 {
        return out;
    }
    let cs = cumulative_trapezoid(x);
    for i in h..n - h {
        out[i] = (cs[i + h] - cs[i - h]) / (2 * h) as f64;
    }
    out
}

/// Running trapezoid integral in units of the sample spacing.
pub fn cumulative_trapezoid(x: &[f64]) -> Vec<f64> {
    let mut cs = Vec::with_capacity(x.len());
    let mut acc = 0.0;
    cs.push(0.0);
    for w in x.windows(2) {
        acc += 0.5 * (w[0] + w[1]);
        cs.push(acc);
    }
    cs
}

/// Phase unwrapping: remove 2π jumps between consecutive samples.
pub fn unwrap(phase: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(phase.len());
    let mut offset = 0.0;
    let mut prev = match phase.first() {
        Some(&p) => p,
        None => return out,
    };
    out.push(prev);
    for &p in &phase[1..] {
        let d = p - prev;
        if d > PI {
            offset -= 2.0 * PI * ((d + PI) / (2.0 * PI)).floor();
        } else if d < -PI {
            offset += 2.0 * PI * ((-d + PI) / (2.0 * PI)).floor();
        }
        prev = p;
        out.push(p + offset);
    }
    out
}

/// Slow envelope of one harmonic order. Order 0 keeps `a⁽⁰⁾` in
/// `amplitude` and has no `b`/`c`.
#[derive(Clone, Debug)]
pub struct HarmonicEnvelope {
    pub order: usize,
    pub amplitude: Vec<f64>,
    pub phase: Vec<f64>,
    pub b: Option<Vec<f64>>,
    pub c: Option<Vec<f64>>,
}

/// Envelope of a band-limited component (order n ≥ 1) plus the valid range
/// left after the one-period averaging. `t0` is the time of sample 0.
pub fn envelope_from_component(
    comp: &Component,
    n: usize,
    omega_hat: f64,
    dt: f64,
    t0: f64,
) -> Result<(HarmonicEnvelope, Range<usize>)> {
    if n == 0 {
        return Err(Error::InvalidInput("envelope extraction needs order n >= 1".into()));
    }
    let z = hilbert_analytic(&comp.series)?;
    let mag: Vec<f64> = z.iter().map(|c| c.norm()).collect();
    let arg = unwrap(&z.iter().map(|c| c.arg()).collect::<Vec<_>>());
    let h = half_window(omega_hat, dt);
    let amp = moving_mean(&mag, h);
    let ph = moving_mean(&arg, h);
    let lo = comp.valid.start + h;
    let hi = comp.valid.end.saturating_sub(h);
    let period = 2 * h;
    if hi <= lo || hi - lo < 4 * period {
        return Err(Error::TooShort("fewer than 4 periods remain after envelope averaging".into()));
    }
    let len = comp.series.len();
    let mut beta = vec![f64::NAN; len];
    let mut b = vec![f64::NAN; len];
    let mut c = vec![f64::NAN; len];
    let nw = n as f64 * omega_hat;
    for i in 0..len {
        if ph[i].is_nan() {
            continue;
        }
        let t = t0 + i as f64 * dt;
        beta[i] = ph[i] - nw * t + PI / 2.0;
        b[i] = amp[i] * beta[i].sin();
        c[i] = amp[i] * beta[i].cos();
    }
    Ok((HarmonicEnvelope { order: n, amplitude: amp, phase: beta, b: Some(b), c: Some(c) }, lo..hi))
}

/// Envelope of a component of `ts`-like data starting at t = 0.
pub fn extract_envelope(x_n: &Component, n: usize, omega_hat: f64, dt: f64) -> Result<HarmonicEnvelope> {
    envelope_from_component(x_n, n, omega_hat, dt, 0.0).map(|(e, _)| e)
}

#[derive(Clone, Debug)]
pub struct HarmonicDecomposition {
    pub omega_hat: f64,
    pub orders: Vec<usize>,
    pub envelopes: Vec<HarmonicEnvelope>,
    pub valid_range: Range<usize>,
    pub t0: f64,
    pub dt: f64,
    pub len: usize,
}

impl HarmonicDecomposition {
    pub fn envelope(&self, order: usize) -> Option<&HarmonicEnvelope> {
        self.envelopes.iter().find(|e| e.order == order)
    }

    pub fn time(&self, i: usize) -> f64 {
        self.t0 + i as f64 * self.dt
    }
}

/// Options of the decomposition used by the identification pipeline.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecomposeOptions {
    /// Filter length in fundamental periods.
    pub filter_periods: f64,
    /// Fundamental candidates must complete at least this many cycles in
    /// the record; slower spectral content is treated as drift.
    pub min_cycles: f64,
    /// Use this ω̂ instead of estimating it.
    pub omega_hat: Option<f64>,
}

impl Default for DecomposeOptions {
    fn default() -> Self {
        DecomposeOptions { filter_periods: DEFAULT_FILTER_PERIODS, min_cycles: 0.0, omega_hat: None }
    }
}

pub fn decompose(ts: &TimeSeries, channel: usize, orders: &[usize]) -> Result<HarmonicDecomposition> {
    decompose_with(ts, channel, orders, &DecomposeOptions::default())
}

pub fn decompose_with(
    ts: &TimeSeries,
    channel: usize,
    orders: &[usize],
    opts: &DecomposeOptions,
) -> Result<HarmonicDecomposition> {
    let x = ts.channel(channel)?;
    let omega_hat = match opts.omega_hat {
        Some(w) if w > 0.0 => w,
        Some(w) => return Err(Error::InvalidInput(format!("omega_hat must be > 0, got {w}"))),
        None => {
            let floor = 2.0 * PI * opts.min_cycles / ts.duration();
            fundamental_frequency(x, ts.dt, floor)?
        }
    };
    let mut ords = orders.to_vec();
    ords.sort_unstable();
    ords.dedup();
    if ords.is_empty() {
        return Err(Error::InvalidInput("no harmonic orders requested".into()));
    }
    let mut envelopes = Vec::with_capacity(ords.len());
    let mut valid = 0..ts.len();
    let period = 2 * half_window(omega_hat, ts.dt);
    for &n in &ords {
        let comp = bandpass_component(x, ts.dt, n, omega_hat, opts.filter_periods)?;
        let (env, range) = if n == 0 {
            // lowpassed series is a⁽⁰⁾; trim one period beyond the filter edge
            let r = comp.valid.start + period..comp.valid.end.saturating_sub(period);
            let mut a = comp.series.clone();
            for (i, s) in a.iter_mut().enumerate() {
                if !comp.valid.contains(&i) {
                    *s = f64::NAN;
                }
            }
            (HarmonicEnvelope { order: 0, amplitude: a, phase: vec![0.0; ts.len()], b: None, c: None }, r)
        } else {
            let (e, r) = envelope_from_component(&comp, n, omega_hat, ts.dt, ts.t0)?;
            // valid range also excludes a full period past the filter edge
            let r = r.start.max(comp.valid.start + period)..r.end.min(comp.valid.end.saturating_sub(period));
            (e, r)
        };
        valid = valid.start.max(range.start)..valid.end.min(range.end);
        envelopes.push(env);
    }
    if valid.end <= valid.start + 4 * period {
        return Err(Error::TooShort("fewer than 4 periods in the decomposition's valid range".into()));
    }
    Ok(HarmonicDecomposition {
        omega_hat,
        orders: ords,
        envelopes,
        valid_range: valid,
        t0: ts.t0,
        dt: ts.dt,
        len: ts.len(),
    })
}

/// x*(t) = a⁽⁰⁾ + Σ b⁽ⁿ⁾cos(nω̂t) + c⁽ⁿ⁾sin(nω̂t), envelopes interpolated
/// linearly between samples.
pub fn reconstruct(d: &HarmonicDecomposition, t_grid: &[f64]) -> Result<Vec<f64>> {
    let lo = d.time(d.valid_range.start);
    let hi = d.time(d.valid_range.end - 1);
    let mut out = Vec::with_capacity(t_grid.len());
    for &t in t_grid {
        if !(t >= lo - 1e-9 * d.dt && t <= hi + 1e-9 * d.dt) {
            return Err(Error::OutOfValidRange { t, lo, hi });
        }
        let s = ((t - d.t0) / d.dt).clamp(d.valid_range.start as f64, (d.valid_range.end - 1) as f64);
        let i = (s.floor() as usize).min(d.valid_range.end - 1);
        let j = (i + 1).min(d.valid_range.end - 1);
        let f = s - i as f64;
        let lerp = |v: &[f64]| v[i] + f * (v[j] - v[i]);
        let mut acc = 0.0;
        for e in &d.envelopes {
            if e.order == 0 {
                acc += lerp(&e.amplitude);
            } else {
                let w = e.order as f64 * d.omega_hat * t;
                acc += lerp(e.b.as_ref().unwrap()) * w.cos() + lerp(e.c.as_ref().unwrap()) * w.sin();
            }
        }
        out.push(acc);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tone(f: impl Fn(f64) -> f64, dt: f64, n: usize) -> Vec<f64> {
        (0..n).map(|i| f(i as f64 * dt)).collect()
    }

    fn series(x: Vec<f64>, dt: f64) -> TimeSeries {
        TimeSeries::new(0.0, dt, vec![x], None, None).unwrap()
    }

    #[test]
    fn fundamental_of_pure_tone() {
        let ts = series(tone(|t| (2.0 * t).sin(), 0.01, 8192), 0.01);
        let w = estimate_fundamental(&ts, 0).unwrap();
        assert!((w - 2.0).abs() < 1e-3, "{w}");
    }

    #[test]
    fn fundamental_off_bin_tones() {
        for w0 in [1.93, 1.977, 2.013, 2.071] {
            let x = tone(|t| (w0 * t + 0.4).sin(), 0.01, 8192);
            let w = fundamental_frequency(&x, 0.01, 0.0).unwrap();
            assert!((w - w0).abs() < 1e-3, "{w0} -> {w}");
        }
    }

    #[test]
    fn constant_is_degenerate() {
        let ts = series(vec![5.0; 1000], 0.01);
        assert!(matches!(estimate_fundamental(&ts, 0), Err(Error::DegenerateInput(_))));
    }

    #[test]
    fn flat_spectrum_rejected() {
        let mut state = 0x9e37_79b9_7f4a_7c15u64;
        let x: Vec<f64> = (0..4096)
            .map(|_| {
                state ^= state << 13;
                state ^= state >> 7;
                state ^= state << 17;
                (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
            })
            .collect();
        assert!(matches!(fundamental_frequency(&x, 0.01, 0.0), Err(Error::SpectrumFlat { .. })));
    }

    #[test]
    fn harmonics_of_pure_tone() {
        let ts = series(tone(|t| (2.0 * t).sin(), 0.01, 20000), 0.01);
        assert_eq!(detect_harmonics(&ts, 0, 2.0, 0.01).unwrap(), vec![1]);
    }

    #[test]
    fn harmonics_with_second_order() {
        let ts = series(tone(|t| (2.0 * t).sin() + 0.1 * (4.0 * t).cos() + 0.05, 0.01, 20000), 0.01);
        assert_eq!(detect_harmonics(&ts, 0, 2.0, 0.01).unwrap(), vec![0, 1, 2]);
    }

    #[test]
    fn bandpass_example_spec() {
        let f = design_bandpass(2.0, 0.5, 0.01, 8.0).unwrap();
        assert_eq!(f.taps.len() % 2, 1);
        assert_eq!(f.group_delay, (f.taps.len() - 1) / 2);
        let g = f.gain(2.0);
        assert!((0.95..=1.05).contains(&g), "{g}");
        assert!(f.gain(4.0) < 0.01);
    }

    #[test]
    fn bandpass_pass_and_stop_bands() {
        let f = design_bandpass(2.0, 0.5, 0.01, 8.0).unwrap();
        for k in 0..=20 {
            let w = 1.75 + 0.5 * k as f64 / 20.0;
            let g = f.gain(w);
            assert!((g - 1.0).abs() < 0.05, "passband {w}: {g}");
        }
        // stopband: beyond one width from either band edge
        for k in 0..400 {
            let w = k as f64 * 0.02;
            if (w - 2.0).abs() >= 0.25 + 0.5 {
                assert!(f.gain(w) < 0.01, "stopband {w}: {}", f.gain(w));
            }
        }
    }

    #[test]
    fn taps_symmetric() {
        let f = design_bandpass(3.0, 0.7, 0.02, 6.0).unwrap();
        let n = f.taps.len();
        for i in 0..n / 2 {
            assert!((f.taps[i] - f.taps[n - 1 - i]).abs() < 1e-15);
        }
    }

    #[test]
    fn lowpass_dc_gain() {
        let f = design_bandpass(0.0, 0.5, 0.01, 8.0).unwrap();
        let g = f.gain(0.0);
        assert!((0.95..=1.05).contains(&g));
        assert!(f.gain(2.0) < 0.01);
    }

    #[test]
    fn band_above_nyquist() {
        // Nyquist is π/dt ≈ 314.16 rad/s at dt = 0.01
        assert!(matches!(design_bandpass(320.0, 0.5, 0.01, 8.0), Err(Error::BandOutOfRange { .. })));
        assert!(matches!(design_bandpass(314.0, 0.5, 0.01, 8.0), Err(Error::BandOutOfRange { .. })));
    }

    #[test]
    fn extract_components() {
        let dt = 0.01;
        let x = tone(|t| (2.0 * t).sin() + 0.3 * (4.0 * t).sin(), dt, 30000);
        let c1 = bandpass_component(&x, dt, 1, 2.0, 8.0).unwrap();
        let c2 = bandpass_component(&x, dt, 2, 2.0, 8.0).unwrap();
        for i in c1.valid.clone() {
            let t = i as f64 * dt;
            assert!((c1.series[i] - (2.0 * t).sin()).abs() < 0.02);
            assert!((c2.series[i] - 0.3 * (4.0 * t).sin()).abs() < 0.02);
        }
        let pure = tone(|t| (2.0 * t).sin(), dt, 30000);
        let c = bandpass_component(&pure, dt, 2, 2.0, 8.0).unwrap();
        assert!(c.valid.clone().all(|i| c.series[i].abs() < 0.01));
    }

    #[test]
    fn extract_too_short() {
        let x = tone(|t| (2.0 * t).sin(), 0.01, 3000);
        assert!(matches!(bandpass_component(&x, 0.01, 1, 2.0, 8.0), Err(Error::TooShort(_))));
    }

    #[test]
    fn hilbert_cosine_and_sine() {
        let dt = 0.01;
        let n = 20000;
        let z = hilbert_analytic(&tone(|t| (2.0 * t).cos(), dt, n)).unwrap();
        for i in n / 10..9 * n / 10 {
            assert!((z[i].norm() - 1.0).abs() < 1e-2);
        }
        let z = hilbert_analytic(&tone(|t| (2.0 * t).sin(), dt, n)).unwrap();
        let ph = unwrap(&z.iter().map(|c| c.arg()).collect::<Vec<_>>());
        let slope = (ph[9 * n / 10] - ph[n / 10]) / ((8 * n / 10) as f64 * dt);
        assert!((slope - 2.0).abs() < 1e-3, "{slope}");
    }

    #[test]
    fn hilbert_periodic_tone_is_exact() {
        // integer number of cycles: the discrete construction is exact
        let n = 4096;
        let dt = 2.0 * PI * 64.0 / (2.0 * n as f64);
        let z = hilbert_analytic(&tone(|t| (2.0 * t).cos(), dt, n)).unwrap();
        for (i, c) in z.iter().enumerate() {
            let t = i as f64 * dt;
            assert!((c.im - (2.0 * t).sin()).abs() < 1e-9);
        }
    }

    #[test]
    fn hilbert_tracks_slow_ramp() {
        let dt = 0.01;
        let n = 40000;
        let a = |t: f64| 1.0 + 0.01 * t;
        let z = hilbert_analytic(&tone(|t| a(t) * (2.0 * t).cos(), dt, n)).unwrap();
        // the periodic FFT construction sees a jump where the ramp wraps;
        // its leakage decays toward the middle of the record
        for i in 9 * n / 20..11 * n / 20 {
            assert!((z[i].norm() - a(i as f64 * dt)).abs() < 1e-3);
        }
    }

    #[test]
    fn envelope_of_shifted_sine() {
        let dt = 0.01;
        let x = tone(|t| 0.7 * (2.0 * t + 0.3).sin(), dt, 30000);
        let comp = bandpass_component(&x, dt, 1, 2.0, 8.0).unwrap();
        let (e, r) = envelope_from_component(&comp, 1, 2.0, dt, 0.0).unwrap();
        let (b, c) = (e.b.as_ref().unwrap(), e.c.as_ref().unwrap());
        for i in r {
            assert!((e.amplitude[i] - 0.7).abs() < 5e-3);
            assert!((e.phase[i] - 0.3).abs() < 1e-2);
            assert!((b[i] - 0.7 * 0.3f64.sin()).abs() < 5e-3);
            assert!((c[i] - 0.7 * 0.3f64.cos()).abs() < 5e-3);
        }
    }

    #[test]
    fn envelope_of_cosine_maps_to_b() {
        // cos(2t) = sin(2t + π/2): β = π/2, so the cosine lands in b, which
        // is what x* = b cos + c sin requires
        let dt = 0.01;
        let x = tone(|t| 0.7 * (2.0 * t).cos(), dt, 30000);
        let comp = bandpass_component(&x, dt, 1, 2.0, 8.0).unwrap();
        let e = extract_envelope(&comp, 1, 2.0, dt).unwrap();
        let (b, c) = (e.b.as_ref().unwrap(), e.c.as_ref().unwrap());
        for i in 10000..20000 {
            assert!((b[i] - 0.7).abs() < 5e-3 && c[i].abs() < 5e-3);
        }
    }

    #[test]
    fn envelope_of_decaying_tone() {
        let dt = 0.01;
        let a = |t: f64| 0.5 * (-0.01 * t).exp();
        let x = tone(|t| a(t) * (2.0 * t).sin(), dt, 40000);
        let comp = bandpass_component(&x, dt, 1, 2.0, 8.0).unwrap();
        let (e, r) = envelope_from_component(&comp, 1, 2.0, dt, 0.0).unwrap();
        for i in r {
            let t = i as f64 * dt;
            assert!((e.amplitude[i] / a(t) - 1.0).abs() < 1e-2);
        }
    }

    #[test]
    fn decompose_pure_tone() {
        let ts = series(tone(|t| (2.0 * t).sin(), 0.01, 30000), 0.01);
        let d = decompose(&ts, 0, &[1]).unwrap();
        assert!(d.envelope(0).is_none());
        let e = d.envelope(1).unwrap();
        for i in d.valid_range.clone() {
            assert!((e.amplitude[i] - 1.0).abs() < 5e-3);
        }
        let gd = design_bandpass(2.0, 0.5, 0.01, 8.0).unwrap().group_delay;
        assert!(d.valid_range.start >= gd + 314);
    }

    #[test]
    fn decompose_absent_second_order() {
        let ts = series(tone(|t| (2.0 * t).sin() + 0.2, 0.01, 30000), 0.01);
        let d = decompose(&ts, 0, &[0, 1, 2]).unwrap();
        let a1 = &d.envelope(1).unwrap().amplitude;
        let a2 = &d.envelope(2).unwrap().amplitude;
        for i in d.valid_range.clone() {
            assert!(a2[i] < 0.01 * a1[i]);
        }
    }

    #[test]
    fn reconstruct_zero_and_unit() {
        let mut d = decompose(&series(tone(|t| (2.0 * t).sin(), 0.01, 30000), 0.01), 0, &[1]).unwrap();
        let grid: Vec<f64> = d.valid_range.clone().step_by(97).map(|i| d.time(i)).collect();
        {
            let e = &mut d.envelopes[0];
            e.b = Some(vec![0.0; d.len]);
            e.c = Some(vec![1.0; d.len]);
        }
        let x = reconstruct(&d, &grid).unwrap();
        for (t, v) in grid.iter().zip(&x) {
            assert!((v - (d.omega_hat * t).sin()).abs() < 1e-14);
        }
        d.envelopes[0].c = Some(vec![0.0; d.len]);
        assert!(reconstruct(&d, &grid).unwrap().iter().all(|v| *v == 0.0));
        assert!(matches!(reconstruct(&d, &[0.0]), Err(Error::OutOfValidRange { .. })));
    }

    #[test]
    fn moving_mean_constant_exact() {
        let m = moving_mean(&[3.0; 500], 57);
        for v in &m[57..500 - 57] {
            assert!((v - 3.0).abs() < 1e-12);
        }
        assert!(m[0].is_nan());
    }

    #[test]
    fn unwrap_linear_phase() {
        let raw: Vec<f64> = (0..1000).map(|i| {
            let p = 0.37 * i as f64;
            p - 2.0 * PI * ((p + PI) / (2.0 * PI)).floor()
        }).collect();
        let u = unwrap(&raw);
        for (i, p) in u.iter().enumerate() {
            assert!((p - 0.37 * i as f64).abs() < 1e-9);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn hilbert_real_part_is_input(seed in 0u64..1000, n in 64usize..600) {
            let x: Vec<f64> = (0..n).map(|i| ((i as f64 * 0.618 + seed as f64 * 0.1).sin() * 13.7).fract()).collect();
            let z = hilbert_analytic(&x).unwrap();
            for (c, v) in z.iter().zip(&x) {
                prop_assert!((c.re - v).abs() <= 1e-10 * v.abs().max(1.0));
            }
        }

        #[test]
        fn filter_is_linear(alpha in -3.0f64..3.0, p in 0.0f64..6.0) {
            let dt = 0.02;
            let x = tone(|t| (2.0 * t).sin() + 0.3 * (5.0 * t + p).cos(), dt, 4000);
            let y = tone(|t| (1.7 * t + p).cos() - 0.2, dt, 4000);
            let f = design_bandpass(2.0, 0.5, dt, 8.0).unwrap();
            let mix: Vec<f64> = x.iter().zip(&y).map(|(a, b)| alpha * a + b).collect();
            let (fx, fy, fm) = (f.apply(&x), f.apply(&y), f.apply(&mix));
            for i in 0..x.len() {
                prop_assert!((fm[i] - (alpha * fx[i] + fy[i])).abs() < 1e-10);
            }
        }

        #[test]
        fn envelope_consistency_and_carrier_removal(a in 0.2f64..3.0, phi in -3.0f64..3.0, n in 1usize..3) {
            let dt = 0.01;
            let w = 2.0;
            let x = tone(|t| a * (n as f64 * w * t + phi).sin(), dt, 20000);
            let comp = bandpass_component(&x, dt, n, w, 8.0).unwrap();
            let (e, r) = envelope_from_component(&comp, n, w, dt, 0.0).unwrap();
            let (b, c) = (e.b.unwrap(), e.c.unwrap());
            let wrap = |p: f64| p - 2.0 * PI * ((p - phi + PI) / (2.0 * PI)).floor();
            for i in r {
                let a2 = e.amplitude[i] * e.amplitude[i];
                prop_assert!((b[i] * b[i] + c[i] * c[i] - a2).abs() <= 1e-8 * a2);
                prop_assert!((wrap(e.phase[i]) - phi).abs() < 1e-2);
            }
        }
    }
}
