//! `anchorattn anchors-fit`: iterate the closed-form anchor update on a key
//! set and record the objective.
//!
//! Anchors are stored as a small binary file: the 4 bytes `ANCH`, then `m`
//! and `d` as little-endian u32, then `m*d` little-endian f64 in row-major
//! order. A CSV mirror (one anchor per line) is written next to it.

use std::io::Write;
use std::path::Path;

use rand::Rng;

use crate::anchor::{AnchorFit, AnchorParams};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub const ANCHOR_MAGIC: &[u8; 4] = b"ANCH";

/// Relative slack allowed when checking that the objective never rises.
pub const MONOTONE_SLACK: f64 = 1e-12;

/// `n` keys around `clusters` centers of equal norm `radius`, spread evenly
/// on a circle in the first two coordinates (`d >= 2`), with uniform noise
/// of half-width `spread`. Key `i` belongs to cluster `i % clusters`.
///
/// Equal norms matter: the affinity is an inner product, so a center with a
/// larger norm would pull keys of other clusters towards its anchor.
pub fn clustered_keys<R: Rng + ?Sized>(
    n: usize,
    d: usize,
    clusters: usize,
    radius: f64,
    spread: f64,
    rng: &mut R,
) -> Result<Matrix> {
    if d < 2 || n == 0 || clusters == 0 {
        return Err(Error::Argument(format!(
            "clustered keys need d >= 2, n >= 1 and clusters >= 1 (got d={d}, n={n}, clusters={clusters})"
        )));
    }
    let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let center = |c: usize, j: usize| {
        let t = phase + std::f64::consts::TAU * c as f64 / clusters as f64;
        match j {
            0 => radius * t.cos(),
            1 => radius * t.sin(),
            _ => 0.0,
        }
    };
    Ok(Matrix::from_fn(n, d, |i, j| {
        center(i % clusters, j) + rng.random_range(-spread..=spread)
    }))
}

/// Reads a key matrix from CSV: one key per line, comma-separated numbers.
/// A first line that does not parse as numbers is taken as a header.
pub fn read_keys_csv(path: &Path) -> Result<Matrix> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(&e))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (line, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| csv_error(&e))?;
        let parsed: std::result::Result<Vec<f64>, _> = rec.iter().map(str::parse::<f64>).collect();
        match parsed {
            Ok(row) => rows.push(row),
            Err(_) if line == 0 => continue,
            Err(e) => {
                let offset = rec.position().map_or(0, |p| p.byte());
                return Err(Error::parse(offset, format!("line {}: {e}", line + 1)));
            }
        }
    }
    if rows.is_empty() {
        return Err(Error::parse(0, "key file holds no rows"));
    }
    let width = rows[0].len();
    if let Some(bad) = rows.iter().position(|r| r.len() != width) {
        return Err(Error::parse(
            0,
            format!(
                "key row {} has {} values, expected {width}",
                bad + 1,
                rows[bad].len()
            ),
        ));
    }
    let keys = Matrix::from_rows(&rows)?;
    if !keys.is_finite() {
        return Err(Error::NumericInput("key file contains NaN or Inf".into()));
    }
    Ok(keys)
}

fn csv_error(e: &csv::Error) -> Error {
    match e.kind() {
        csv::ErrorKind::Io(io) => Error::Io(std::io::Error::new(io.kind(), io.to_string())),
        _ => Error::parse(e.position().map_or(0, |p| p.byte()), e.to_string()),
    }
}

pub fn encode_anchors(anchors: &Matrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 8 * anchors.data().len());
    out.extend_from_slice(ANCHOR_MAGIC);
    out.extend_from_slice(&(anchors.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(anchors.cols() as u32).to_le_bytes());
    for x in anchors.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

pub fn decode_anchors(bytes: &[u8]) -> Result<Matrix> {
    if bytes.len() < 12 {
        return Err(Error::parse(bytes.len() as u64, "truncated anchor header"));
    }
    if &bytes[..4] != ANCHOR_MAGIC {
        return Err(Error::parse(0, "bad anchor file magic"));
    }
    let word = |o: usize| {
        u32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]) as usize
    };
    let (m, d) = (word(4), word(8));
    let want = 12 + 8 * m * d;
    if bytes.len() != want {
        return Err(Error::parse(
            bytes.len().min(want) as u64,
            format!(
                "anchor payload is {} bytes, expected {}",
                bytes.len() - 12,
                want - 12
            ),
        ));
    }
    let data = bytes[12..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Matrix::new(m, d, data).map_err(|_| Error::parse(4, format!("anchor shape {m}x{d} is empty")))
}

/// How the first anchors are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FitInit {
    /// Gaussian with standard deviation `1/sqrt(d)`.
    Gaussian,
    /// Random key rows refined by five fixed-point steps.
    Keys,
    /// The first `m` key rows; with [`clustered_keys`] and `m` equal to the
    /// cluster count that is one anchor per cluster.
    First,
}

impl std::str::FromStr for FitInit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(FitInit::Gaussian),
            "keys" => Ok(FitInit::Keys),
            "first" => Ok(FitInit::First),
            _ => Err(Error::Argument(format!(
                "unknown init {s:?} (expected gaussian, keys or first)"
            ))),
        }
    }
}

pub fn initial_anchors<R: Rng + ?Sized>(
    keys: &Matrix,
    m: usize,
    init: FitInit,
    rng: &mut R,
) -> Result<AnchorParams> {
    if m == 0 {
        return Err(Error::Argument("anchor count must be >= 1".into()));
    }
    match init {
        FitInit::Gaussian => Ok(AnchorParams::gaussian(m, keys.cols(), rng)),
        FitInit::Keys => AnchorParams::from_keys(keys, m, 5, rng),
        FitInit::First => {
            let idx: Vec<usize> = (0..m).map(|i| i % keys.rows()).collect();
            AnchorParams::new(keys.select_rows(&idx))
        }
    }
}

/// Index of the first iteration whose objective exceeds its predecessor by
/// more than the relative slack.
pub fn first_increase(objective: &[f64]) -> Option<usize> {
    objective
        .windows(2)
        .position(|w| w[1] > w[0] + MONOTONE_SLACK * w[0].abs())
        .map(|i| i + 1)
}

/// Writes `anchors.bin`, `anchors.csv` and `objective.csv` into `dir`.
pub fn write_fit(dir: &Path, fit: &AnchorFit) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("anchors.bin"), encode_anchors(&fit.anchors.w_s))?;
    let mut csv = std::io::BufWriter::new(std::fs::File::create(dir.join("anchors.csv"))?);
    for j in 0..fit.anchors.count() {
        let row: Vec<String> = fit
            .anchors
            .w_s
            .row(j)
            .iter()
            .map(|x| format!("{x:?}"))
            .collect();
        writeln!(csv, "{}", row.join(","))?;
    }
    csv.flush()?;
    let mut obj = std::io::BufWriter::new(std::fs::File::create(dir.join("objective.csv"))?);
    writeln!(obj, "iteration,objective")?;
    for (t, v) in fit.objective.iter().enumerate() {
        writeln!(obj, "{t},{v:?}")?;
    }
    obj.flush()?;
    Ok(())
}

pub use crate::anchor::fit_anchors as fit;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::anchor::fit_anchors;
    use crate::seeded_rng;

    #[test]
    fn binary_round_trip() {
        let m = Matrix::random_normal(3, 2, 1.0, &mut seeded_rng(1));
        let bytes = encode_anchors(&m);
        assert_eq!(&bytes[..12], b"ANCH\x03\0\0\0\x02\0\0\0");
        assert_eq!(bytes.len(), 12 + 48);
        assert_eq!(decode_anchors(&bytes).unwrap(), m);
        assert!(matches!(
            decode_anchors(&bytes[..20]),
            Err(Error::Parse { .. })
        ));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            decode_anchors(&bad),
            Err(Error::Parse { offset: 0, .. })
        ));
    }

    #[test]
    fn csv_keys_with_and_without_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("k.csv");
        std::fs::write(&p, "x,y\n1,2\n3.5, -4\n").unwrap();
        assert_eq!(
            read_keys_csv(&p).unwrap(),
            Matrix::from_rows(&[[1.0, 2.0], [3.5, -4.0]]).unwrap()
        );
        std::fs::write(&p, "1,2\n3,4\n").unwrap();
        assert_eq!(read_keys_csv(&p).unwrap().rows(), 2);
        std::fs::write(&p, "1,2\n3,x\n").unwrap();
        assert!(matches!(read_keys_csv(&p), Err(Error::Parse { .. })));
        std::fs::write(&p, "1,2\n3\n").unwrap();
        assert!(matches!(read_keys_csv(&p), Err(Error::Parse { .. })));
        assert!(matches!(
            read_keys_csv(&dir.path().join("missing.csv")),
            Err(Error::Io(_))
        ));
    }

    #[test]
    fn zero_iterations_keep_the_initialization() {
        let keys = clustered_keys(30, 2, 3, 6.0, 0.5, &mut seeded_rng(2)).unwrap();
        let init = initial_anchors(&keys, 3, FitInit::First, &mut seeded_rng(0)).unwrap();
        let fit = fit_anchors(&keys, init.clone(), 0).unwrap();
        assert_eq!(fit.anchors, init);
        assert_eq!(fit.objective.len(), 1);
    }

    #[test]
    fn one_anchor_lands_on_the_key_mean() {
        let keys = clustered_keys(30, 3, 3, 6.0, 0.5, &mut seeded_rng(3)).unwrap();
        let init = initial_anchors(&keys, 1, FitInit::Gaussian, &mut seeded_rng(0)).unwrap();
        let fit = fit_anchors(&keys, init, 1).unwrap();
        assert!(fit.anchors.w_s.max_abs_diff(&keys.col_means()).unwrap() <= 1e-12);
    }

    #[test]
    fn separated_clusters_give_monotone_objective_and_cluster_means() {
        for seed in 0..20 {
            let keys = clustered_keys(90, 2, 3, 6.0, 0.5, &mut seeded_rng(seed)).unwrap();
            let init = initial_anchors(&keys, 3, FitInit::First, &mut seeded_rng(0)).unwrap();
            let fit = fit_anchors(&keys, init, 20).unwrap();
            assert_eq!(
                first_increase(&fit.objective),
                None,
                "seed {seed}: {:?}",
                fit.objective
            );
            // Nearly hard assignments: each anchor sits close to its cluster mean.
            for c in 0..3 {
                let members: Vec<usize> = (c..90).step_by(3).collect();
                let mean = keys.select_rows(&members).col_means();
                let gap = Matrix::new(1, 2, fit.anchors.w_s.row(c).to_vec())
                    .unwrap()
                    .max_abs_diff(&mean)
                    .unwrap();
                assert!(gap < 0.05, "seed {seed} cluster {c}: {gap}");
            }
        }
    }

    #[test]
    fn increase_detection() {
        assert_eq!(first_increase(&[3.0, 2.0, 2.0, 1.0]), None);
        assert_eq!(first_increase(&[3.0, 2.0, 2.5]), Some(2));
        assert_eq!(first_increase(&[1.0, 1.0 + 1e-15]), None);
    }

    #[test]
    fn write_fit_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let keys = clustered_keys(12, 2, 3, 6.0, 0.5, &mut seeded_rng(4)).unwrap();
        let fit = fit_anchors(
            &keys,
            initial_anchors(&keys, 3, FitInit::First, &mut seeded_rng(0)).unwrap(),
            2,
        )
        .unwrap();
        write_fit(dir.path(), &fit).unwrap();
        let bin = std::fs::read(dir.path().join("anchors.bin")).unwrap();
        assert_eq!(decode_anchors(&bin).unwrap(), fit.anchors.w_s);
        let obj = std::fs::read_to_string(dir.path().join("objective.csv")).unwrap();
        assert_eq!(obj.lines().count(), 4);
        assert_eq!(
            std::fs::read_to_string(dir.path().join("anchors.csv"))
                .unwrap()
                .lines()
                .count(),
            3
        );
    }
}
