//! Proper orthogonal decomposition of snapshot matrices.
//!
//! Snapshots are stored with rows = time instants and columns = degrees of
//! freedom (X is p×k). With X = UΣVᵀ, the modes are the columns of V and
//! the modal coordinates are the columns of XV = UΣ; in the transposed
//! k×p layout the roles of U and V swap.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use crate::error::{Error, Result};
use crate::signal::TimeSeries;

#[derive(Clone, Debug, PartialEq)]
pub struct SnapshotMatrix {
    pub data: DMatrix<f64>,
    pub t0: f64,
    pub dt: f64,
}

impl SnapshotMatrix {
    pub fn new(data: DMatrix<f64>, t0: f64, dt: f64) -> Result<Self> {
        if data.nrows() < 2 || data.ncols() == 0 {
            return Err(Error::InvalidInput(format!("snapshot matrix is {}x{}; need p >= 2, k >= 1", data.nrows(), data.ncols())));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::DegenerateInput("non-finite snapshot entry".into()));
        }
        if !(dt > 0.0) {
            return Err(Error::InvalidInput(format!("dt must be > 0, got {dt}")));
        }
        Ok(SnapshotMatrix { data, t0, dt })
    }

    /// CSV with header `t,d1,...,dk`; dt is taken from the first two rows.
    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        let k = r.headers().map_err(|e| Error::Parse(e.to_string()))?.len().saturating_sub(1);
        let mut t = Vec::new();
        let mut vals = Vec::new();
        for (i, rec) in r.records().enumerate() {
            let rec = rec.map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
            if rec.len() != k + 1 {
                return Err(Error::Parse(format!("{}: row {} has {} columns, expected {}", path.display(), i + 2, rec.len(), k + 1)));
            }
            for (j, f) in rec.iter().enumerate() {
                let v: f64 = f.trim().parse().map_err(|e| Error::Parse(format!("{}: row {}: {e}", path.display(), i + 2)))?;
                if j == 0 {
                    t.push(v);
                } else {
                    vals.push(v);
                }
            }
        }
        if t.len() < 2 {
            return Err(Error::InvalidInput(format!("{}: fewer than 2 snapshots", path.display())));
        }
        SnapshotMatrix::new(DMatrix::from_row_slice(t.len(), k, &vals), t[0], t[1] - t[0])
    }

    /// Little-endian binary `[u64 p][u64 k][f64 × p·k row-major]`; the layout
    /// carries no time axis, so t0 and dt are supplied by the caller.
    pub fn read_binary(path: &Path, t0: f64, dt: f64) -> Result<Self> {
        let io = |e: std::io::Error| Error::Io { path: path.display().to_string(), source: e };
        let mut f = std::fs::File::open(path).map_err(io)?;
        let mut head = [0u8; 16];
        f.read_exact(&mut head).map_err(io)?;
        let p = u64::from_le_bytes(head[..8].try_into().unwrap()) as usize;
        let k = u64::from_le_bytes(head[8..].try_into().unwrap()) as usize;
        let mut bytes = Vec::new();
        f.read_to_end(&mut bytes).map_err(io)?;
        if bytes.len() != p.checked_mul(k).and_then(|n| n.checked_mul(8)).unwrap_or(usize::MAX) {
            return Err(Error::Parse(format!("{}: payload has {} bytes, header says {p}x{k}", path.display(), bytes.len())));
        }
        let vals: Vec<f64> = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        SnapshotMatrix::new(DMatrix::from_row_slice(p, k, &vals), t0, dt)
    }

    pub fn write_binary(&self, path: &Path) -> Result<()> {
        let io = |e: std::io::Error| Error::Io { path: path.display().to_string(), source: e };
        let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
        f.write_all(&(self.data.nrows() as u64).to_le_bytes()).map_err(io)?;
        f.write_all(&(self.data.ncols() as u64).to_le_bytes()).map_err(io)?;
        for i in 0..self.data.nrows() {
            for j in 0..self.data.ncols() {
                f.write_all(&self.data[(i, j)].to_le_bytes()).map_err(io)?;
            }
        }
        f.flush().map_err(io)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Parse(e.to_string()))?;
        let mut head = vec!["t".to_string()];
        head.extend((1..=self.data.ncols()).map(|j| format!("d{j}")));
        w.write_record(&head).map_err(|e| Error::Parse(e.to_string()))?;
        for i in 0..self.data.nrows() {
            let mut row = vec![format!("{:.17e}", self.t0 + i as f64 * self.dt)];
            row.extend(self.data.row(i).iter().map(|v| format!("{v:.17e}")));
            w.write_record(&row).map_err(|e| Error::Parse(e.to_string()))?;
        }
        w.flush().map_err(|e| Error::Io { path: path.display().to_string(), source: e })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PodBasis {
    /// k×k̂, orthonormal columns.
    pub modes: DMatrix<f64>,
    pub singular_values: Vec<f64>,
    pub k_hat: usize,
    /// All singular values of X, for truncation-error bookkeeping.
    pub spectrum: Vec<f64>,
}

impl PodBasis {
    /// Frobenius norm of the discarded part, √(Σ_{i>k̂} σᵢ²).
    pub fn truncation_error(&self) -> f64 {
        self.spectrum[self.k_hat..].iter().map(|s| s * s).sum::<f64>().sqrt()
    }
}

/// Thin SVD, keeping k̂ modes. Each mode's largest-magnitude entry is made
/// positive. The reduced coordinates XV = UΣ come back as a time series
/// with k̂ channels.
pub fn reduce(x: &SnapshotMatrix, k_hat: usize) -> Result<(PodBasis, TimeSeries)> {
    let (p, k) = x.data.shape();
    let max = p.min(k);
    if k_hat == 0 || k_hat > max {
        return Err(Error::RankTooLarge { k_hat, max });
    }
    let svd = x.data.clone().svd(false, true);
    let vt = svd.v_t.expect("right vectors requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let spectrum: Vec<f64> = order.iter().map(|&i| svd.singular_values[i]).collect();
    let mut modes = DMatrix::zeros(k, k_hat);
    for (c, &i) in order.iter().take(k_hat).enumerate() {
        let mut v = vt.row(i).transpose();
        let big = v.iter().copied().fold(0.0f64, |m, e| if e.abs() > m.abs() { e } else { m });
        if big < 0.0 {
            v.neg_mut();
        }
        modes.set_column(c, &v);
    }
    let reduced = &x.data * &modes;
    let channels: Vec<Vec<f64>> = reduced.column_iter().map(|c| c.iter().copied().collect()).collect();
    let ts = TimeSeries { t0: x.t0, dt: x.dt, x: channels, v: None, forcing: None };
    let basis = PodBasis { modes, singular_values: spectrum[..k_hat].to_vec(), k_hat, spectrum };
    Ok((basis, ts))
}

/// X̂ = reduced · modesᵀ.
pub fn lift(basis: &PodBasis, reduced: &TimeSeries) -> Result<SnapshotMatrix> {
    if reduced.dims() != basis.k_hat {
        return Err(Error::DimensionMismatch(format!("{} reduced channels for a rank-{} basis", reduced.dims(), basis.k_hat)));
    }
    let p = reduced.len();
    let r = DMatrix::from_fn(p, basis.k_hat, |i, j| reduced.x[j][i]);
    SnapshotMatrix::new(r * basis.modes.transpose(), reduced.t0, reduced.dt)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pseudo(p: usize, k: usize, seed: u64) -> DMatrix<f64> {
        let mut s = seed;
        DMatrix::from_fn(p, k, |_, _| {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            (s >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        })
    }

    #[test]
    fn exact_rank_two() {
        let a = pseudo(50, 2, 1);
        let b = pseudo(2, 7, 2);
        let x = SnapshotMatrix::new(&a * &b, 0.0, 0.1).unwrap();
        let (basis, red) = reduce(&x, 2).unwrap();
        let back = lift(&basis, &red).unwrap();
        assert!((back.data - &x.data).norm() < 1e-10);
        let g = basis.modes.transpose() * &basis.modes;
        assert!((g - DMatrix::identity(2, 2)).norm() < 1e-10);
    }

    #[test]
    fn eckart_young() {
        let x = SnapshotMatrix::new(pseudo(40, 9, 5), 0.0, 1.0).unwrap();
        for r in 1..=9 {
            let (basis, red) = reduce(&x, r).unwrap();
            let err = (lift(&basis, &red).unwrap().data - &x.data).norm();
            assert!((err - basis.truncation_error()).abs() < 1e-10, "{r}: {err}");
            assert!(basis.singular_values.windows(2).all(|w| w[0] >= w[1]));
        }
    }

    #[test]
    fn sign_convention_and_errors() {
        let x = SnapshotMatrix::new(pseudo(30, 5, 9), 0.0, 1.0).unwrap();
        let (basis, _) = reduce(&x, 3).unwrap();
        for c in basis.modes.column_iter() {
            let big = c.iter().copied().fold(0.0f64, |m, e| if e.abs() > m.abs() { e } else { m });
            assert!(big > 0.0);
        }
        assert!(matches!(reduce(&x, 6), Err(Error::RankTooLarge { k_hat: 6, max: 5 })));
        assert!(matches!(reduce(&x, 0), Err(Error::RankTooLarge { .. })));
        let zero = TimeSeries { t0: 0.0, dt: 1.0, x: vec![vec![0.0; 30]; 3], v: None, forcing: None };
        assert_eq!(lift(&basis, &zero).unwrap().data, DMatrix::zeros(30, 5));
        let two = TimeSeries { t0: 0.0, dt: 1.0, x: vec![vec![0.0; 30]; 2], v: None, forcing: None };
        assert!(matches!(lift(&basis, &two), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn file_roundtrips() {
        let x = SnapshotMatrix::new(pseudo(12, 4, 3), 0.5, 0.25).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let b = dir.path().join("x.bin");
        x.write_binary(&b).unwrap();
        assert_eq!(SnapshotMatrix::read_binary(&b, 0.5, 0.25).unwrap(), x);
        let c = dir.path().join("x.csv");
        x.write_csv(&c).unwrap();
        let y = SnapshotMatrix::read_csv(&c).unwrap();
        assert_eq!(y.data, x.data);
        assert!((y.dt - 0.25).abs() < 1e-15);
    }
}
