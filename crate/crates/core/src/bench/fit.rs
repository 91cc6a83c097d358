use std::collections::BTreeMap;

use super::sweep::BenchRecord;
use crate::error::{Error, Result};

/// Minimum r^2 for a fit to count as conclusive.
pub const CONCLUSIVE_R2: f64 = 0.9;

/// Least-squares fit of `ln(wall_ns) = intercept + slope * ln(n)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalingFit {
    pub mechanism: String,
    pub m: usize,
    pub d: usize,
    pub heads: usize,
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub n_min: usize,
    pub n_max: usize,
    pub points: usize,
}

impl ScalingFit {
    pub fn conclusive(&self) -> bool {
        self.r_squared >= CONCLUSIVE_R2
    }
}

/// Ordinary least squares `y = a + b x`; returns `(b, a, r^2)`.
pub fn least_squares(xs: &[f64], ys: &[f64]) -> (f64, f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| {
            let r = y - (intercept + slope * x);
            r * r
        })
        .sum();
    let r2 = if syy > 0.0 { 1.0 - ss_res / syy } else { 1.0 };
    (slope, intercept, r2)
}

/// One fit per `(mechanism, m, d, heads)` group; each group needs at least
/// four distinct `n`.
pub fn fit_scaling(records: &[BenchRecord]) -> Result<Vec<ScalingFit>> {
    let mut groups: BTreeMap<(String, usize, usize, usize), Vec<&BenchRecord>> = BTreeMap::new();
    for r in records {
        groups
            .entry((r.mechanism.clone(), r.m, r.d, r.heads))
            .or_default()
            .push(r);
    }
    groups
        .into_iter()
        .map(|((mechanism, m, d, heads), recs)| {
            let mut ns: Vec<usize> = recs.iter().map(|r| r.n).collect();
            ns.sort_unstable();
            ns.dedup();
            if ns.len() < 4 {
                return Err(Error::Argument(format!(
                    "{mechanism} (m={m}, d={d}, heads={heads}) has {} distinct n values; a scaling fit needs 4",
                    ns.len()
                )));
            }
            let xs: Vec<f64> = recs.iter().map(|r| (r.n as f64).ln()).collect();
            let ys: Vec<f64> = recs.iter().map(|r| (r.wall_ns_median as f64).ln()).collect();
            let (slope, intercept, r_squared) = least_squares(&xs, &ys);
            Ok(ScalingFit {
                mechanism,
                m,
                d,
                heads,
                slope,
                intercept,
                r_squared,
                n_min: ns[0],
                n_max: *ns.last().unwrap(),
                points: recs.len(),
            })
        })
        .collect()
}
