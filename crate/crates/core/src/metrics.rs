//! Mean Chamfer distance between frequency-response curves.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::continuation::FrcPointSet;
use crate::error::{Error, Result};

/// Planar point set.
#[derive(Clone, Debug, PartialEq)]
pub struct CurvePointSet {
    pub points: Vec<[f64; 2]>,
}

impl CurvePointSet {
    pub fn new(points: Vec<[f64; 2]>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptySet);
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite curve point".into()));
        }
        Ok(CurvePointSet { points })
    }
}

/// Directed Chamfer distance: mean over p ∈ c of the distance to the
/// nearest point of c_ref.
pub fn chamfer(c: &CurvePointSet, c_ref: &CurvePointSet) -> Result<f64> {
    if c.points.is_empty() || c_ref.points.is_empty() {
        return Err(Error::EmptySet);
    }
    let total: f64 = c
        .points
        .iter()
        .map(|p| {
            c_ref
                .points
                .iter()
                .map(|q| (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2))
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .sum();
    Ok(total / c.points.len() as f64)
}

/// Ω, amplitude and phase columns of a response curve.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FrcCurve {
    pub omega: Vec<f64>,
    pub amplitude: Vec<f64>,
    pub phase: Vec<f64>,
}

impl From<&FrcPointSet> for FrcCurve {
    fn from(f: &FrcPointSet) -> Self {
        FrcCurve {
            omega: f.points.iter().map(|p| p.omega).collect(),
            amplitude: f.points.iter().map(|p| p.amplitude).collect(),
            phase: f.points.iter().map(|p| p.phase).collect(),
        }
    }
}

impl FrcCurve {
    pub fn len(&self) -> usize {
        self.omega.len()
    }

    pub fn is_empty(&self) -> bool {
        self.omega.is_empty()
    }

    /// Read the `omega,amplitude,phase,stable` CSV written by the tracer
    /// (the first column may be named after the continued parameter).
    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(source) => Error::Io { path: path.display().to_string(), source },
            k => Error::Parse(format!("{}: {k:?}", path.display())),
        })?;
        let mut c = FrcCurve::default();
        for (i, rec) in r.records().enumerate() {
            let rec = rec.map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
            let num = |j: usize| -> Result<f64> {
                rec.get(j)
                    .ok_or_else(|| Error::Parse(format!("{}: row {} has too few columns", path.display(), i + 2)))?
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Parse(format!("{}: row {}: {e}", path.display(), i + 2)))
            };
            c.omega.push(num(0)?);
            c.amplitude.push(num(1)?);
            c.phase.push(num(2)?);
        }
        Ok(c)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct McdrcReport {
    pub mcdrc: f64,
    pub d_amp: f64,
    pub d_phase: f64,
}

fn range(v: &[f64], axis: &'static str) -> Result<(f64, f64)> {
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return Err(Error::DegenerateAxis(axis));
    }
    Ok((lo, hi - lo))
}

/// d_ch(Cᴬ → Cᴬ_ref) + d_ch(Cᴾ → Cᴾ_ref), every axis max-min scaled by
/// the reference curve's range.
pub fn mcdrc(frc: &FrcCurve, frc_ref: &FrcCurve) -> Result<McdrcReport> {
    if frc.is_empty() || frc_ref.is_empty() {
        return Err(Error::EmptySet);
    }
    let (w0, ws) = range(&frc_ref.omega, "omega")?;
    let (a0, as_) = range(&frc_ref.amplitude, "amplitude")?;
    let (p0, ps) = range(&frc_ref.phase, "phase")?;
    let set = |c: &FrcCurve, y: &[f64], y0: f64, ys: f64| {
        CurvePointSet::new(c.omega.iter().zip(y).map(|(w, v)| [(w - w0) / ws, (v - y0) / ys]).collect())
    };
    let d_amp = chamfer(&set(frc, &frc.amplitude, a0, as_)?, &set(frc_ref, &frc_ref.amplitude, a0, as_)?)?;
    let d_phase = chamfer(&set(frc, &frc.phase, p0, ps)?, &set(frc_ref, &frc_ref.phase, p0, ps)?)?;
    Ok(McdrcReport { mcdrc: d_amp + d_phase, d_amp, d_phase })
}
