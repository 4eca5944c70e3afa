//! Trajectory files: CSV `t,x1..xk[,v1..vk]` plus a forcing JSON sidecar.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::signal::{ForcingConfig, TimeSeries};

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::Io { path: path.display().to_string(), source: e }
}

/// `run/trajectory.csv` → `run/trajectory.forcing.json`.
pub fn forcing_path(csv: &Path) -> PathBuf {
    csv.with_extension("forcing.json")
}

/// Write the samples with 17 significant digits (exact f64 round trip).
pub fn write_trajectory(ts: &TimeSeries, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    let k = ts.dims();
    let mut head = vec!["t".to_string()];
    head.extend((1..=k).map(|j| format!("x{j}")));
    if ts.v.is_some() {
        head.extend((1..=k).map(|j| format!("v{j}")));
    }
    w.write_record(&head).map_err(|e| Error::Parse(e.to_string()))?;
    let mut row = Vec::with_capacity(head.len());
    for i in 0..ts.len() {
        row.clear();
        row.push(format!("{:.16e}", ts.time(i)));
        row.extend(ts.x.iter().map(|c| format!("{:.16e}", c[i])));
        if let Some(v) = &ts.v {
            row.extend(v.iter().map(|c| format!("{:.16e}", c[i])));
        }
        w.write_record(&row).map_err(|e| Error::Parse(e.to_string()))?;
    }
    w.flush().map_err(io_err(path))?;
    if let Some(f) = &ts.forcing {
        let side = forcing_path(path);
        std::fs::write(&side, serde_json::to_string_pretty(f).expect("forcing serializes") + "\n").map_err(io_err(&side))?;
    }
    Ok(())
}

/// Read a trajectory; forcing comes from `forcing` or, failing that, the
/// sidecar next to the CSV when present. The sample interval must be uniform.
pub fn read_trajectory(path: &Path, forcing: Option<ForcingConfig>) -> Result<TimeSeries> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    if text.trim().is_empty() {
        return Err(Error::InvalidInput(format!("{} is empty", path.display())));
    }
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let head: Vec<String> = r.headers().map_err(|e| Error::Parse(e.to_string()))?.iter().map(|s| s.trim().to_string()).collect();
    if head.first().map(String::as_str) != Some("t") {
        return Err(Error::Parse(format!("{}: first column must be 't'", path.display())));
    }
    let xs: Vec<usize> = (1..head.len()).filter(|&j| head[j].starts_with('x')).collect();
    let vs: Vec<usize> = (1..head.len()).filter(|&j| head[j].starts_with('v')).collect();
    if xs.is_empty() || (!vs.is_empty() && vs.len() != xs.len()) || xs.len() + vs.len() + 1 != head.len() {
        return Err(Error::Parse(format!("{}: header must be t,x1..xk[,v1..vk]", path.display())));
    }
    let mut t = Vec::new();
    let mut x = vec![Vec::new(); xs.len()];
    let mut v = vec![Vec::new(); vs.len()];
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        let num = |j: usize| -> Result<f64> {
            rec.get(j)
                .ok_or_else(|| Error::Parse(format!("{}: row {} is short", path.display(), i + 2)))?
                .trim()
                .parse()
                .map_err(|e| Error::Parse(format!("{}: row {}: {e}", path.display(), i + 2)))
        };
        t.push(num(0)?);
        for (c, &j) in xs.iter().enumerate() {
            x[c].push(num(j)?);
        }
        for (c, &j) in vs.iter().enumerate() {
            v[c].push(num(j)?);
        }
    }
    if t.len() < 2 {
        return Err(Error::TooShort(format!("{}: {} samples", path.display(), t.len())));
    }
    let dt = (t[t.len() - 1] - t[0]) / (t.len() - 1) as f64;
    for w in t.windows(2) {
        if ((w[1] - w[0]) - dt).abs() > 1e-6 * dt.abs() {
            return Err(Error::InvalidInput(format!("{}: non-uniform time axis", path.display())));
        }
    }
    let forcing = match forcing {
        Some(f) => Some(f),
        None => {
            let side = forcing_path(path);
            if side.exists() {
                let s = std::fs::read_to_string(&side).map_err(io_err(&side))?;
                Some(serde_json::from_str(&s).map_err(|e| Error::Parse(format!("{}: {e}", side.display())))?)
            } else {
                None
            }
        }
    };
    TimeSeries::new(t[0], dt, x, (!v.is_empty()).then_some(v), forcing)
}
