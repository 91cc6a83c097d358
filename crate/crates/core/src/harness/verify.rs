//! Randomized property suite behind `anchorattn verify`.
//!
//! Each instance draws its own shape and data from a seed derived from the
//! run seed and the instance index, so any failure can be replayed alone.
//! Instances may run on several threads (`ANCHORATTN_THREADS`), but results
//! are reduced in index order and the report is identical for a given seed.

use std::fmt::Write as _;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;

use crate::anchor::{
    anchor_affinity, anchor_attention_explicit, anchor_attention_fast, anchor_similarity,
    build_transfer_matrix, token_similarity, AffinityState, AnchorParams,
};
use crate::error::{Error, Result};
use crate::linalg::{matmul, softmax_rows, Matrix};
use crate::seeded_rng;

/// Instances with at most this many tokens also get the eigenvalue and the
/// entrywise walk checks.
pub const SMALL_INSTANCE: usize = 64;
/// Instances with `n + m` at most this get the transfer-matrix checks.
pub const TRANSFER_CHECK_LIMIT: usize = 512;

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyConfig {
    pub seed: u64,
    pub instances: usize,
    pub max_tokens: usize,
    pub max_anchors: usize,
    pub max_dim: usize,
    pub threads: usize,
    /// Zero one column mass of the first instance before attending.
    pub poison_delta: bool,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig {
            seed: 0,
            instances: 200,
            max_tokens: 128,
            max_anchors: 32,
            max_dim: 32,
            threads: 1,
            poison_delta: false,
        }
    }
}

/// Worker count from `ANCHORATTN_THREADS`, else the available parallelism.
pub fn thread_count() -> Result<usize> {
    match std::env::var("ANCHORATTN_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(t) if t >= 1 => Ok(t),
            _ => Err(Error::Argument(format!(
                "ANCHORATTN_THREADS must be a positive integer, got {v:?}"
            ))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Property {
    FastMatchesExplicit,
    AffinityRowsSumToOne,
    MassTotalsTokens,
    TokenSimilarityRowStochastic,
    TokenSimilarityColumnStochastic,
    TokenSimilaritySymmetric,
    TokenSimilarityPsd,
    TwoStepWalk,
    OutputInConvexHull,
    TransferRowsSumToOne,
    TransferOffDiagonalZero,
    TransferTokenBlock,
    TransferAnchorBlock,
    MatmulAssociative,
    SoftmaxRowsSumToOne,
    SoftmaxShiftInvariant,
    Deterministic,
}

impl Property {
    pub const ALL: [Property; 17] = [
        Property::FastMatchesExplicit,
        Property::AffinityRowsSumToOne,
        Property::MassTotalsTokens,
        Property::TokenSimilarityRowStochastic,
        Property::TokenSimilarityColumnStochastic,
        Property::TokenSimilaritySymmetric,
        Property::TokenSimilarityPsd,
        Property::TwoStepWalk,
        Property::OutputInConvexHull,
        Property::TransferRowsSumToOne,
        Property::TransferOffDiagonalZero,
        Property::TransferTokenBlock,
        Property::TransferAnchorBlock,
        Property::MatmulAssociative,
        Property::SoftmaxRowsSumToOne,
        Property::SoftmaxShiftInvariant,
        Property::Deterministic,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Property::FastMatchesExplicit => "fast-matches-explicit",
            Property::AffinityRowsSumToOne => "affinity-rows-sum-to-one",
            Property::MassTotalsTokens => "mass-totals-tokens",
            Property::TokenSimilarityRowStochastic => "similarity-row-stochastic",
            Property::TokenSimilarityColumnStochastic => "similarity-column-stochastic",
            Property::TokenSimilaritySymmetric => "similarity-symmetric",
            Property::TokenSimilarityPsd => "similarity-psd",
            Property::TwoStepWalk => "two-step-walk",
            Property::OutputInConvexHull => "output-in-convex-hull",
            Property::TransferRowsSumToOne => "transfer-row-stochastic",
            Property::TransferOffDiagonalZero => "transfer-square-off-diagonal",
            Property::TransferTokenBlock => "transfer-square-token-block",
            Property::TransferAnchorBlock => "transfer-square-anchor-block",
            Property::MatmulAssociative => "matmul-associative",
            Property::SoftmaxRowsSumToOne => "softmax-rows-sum-to-one",
            Property::SoftmaxShiftInvariant => "softmax-shift-invariant",
            Property::Deterministic => "deterministic",
        }
    }

    /// Pass threshold on the measured error.
    pub fn tolerance(self) -> f64 {
        match self {
            Property::FastMatchesExplicit => 1e-11,
            Property::TokenSimilarityRowStochastic | Property::TokenSimilarityColumnStochastic => {
                1e-10
            }
            Property::TransferOffDiagonalZero => 1e-14,
            Property::SoftmaxShiftInvariant => 1e-14,
            Property::MatmulAssociative | Property::TokenSimilarityPsd => 1e-9,
            Property::Deterministic => 0.0,
            _ => 1e-12,
        }
    }

    /// What the error measures.
    pub fn measure(self) -> &'static str {
        match self {
            Property::FastMatchesExplicit => "||H_fast - H_explicit||_inf (max abs row sum)",
            Property::AffinityRowsSumToOne => "max |rowsum(A) - 1|",
            Property::MassTotalsTokens => "|sum(delta) - n| / n",
            Property::TokenSimilarityRowStochastic => "max |rowsum(S_t) - 1|",
            Property::TokenSimilarityColumnStochastic => "max |colsum(S_t) - 1|",
            Property::TokenSimilaritySymmetric => "max |S_t - S_t^T|",
            Property::TokenSimilarityPsd => "max(0, -min eigenvalue of S_t)",
            Property::TwoStepWalk => "max |S_t - sum_j P(i->j) P(j->k)|",
            Property::OutputInConvexHull => "max distance of H outside [min V, max V]",
            Property::TransferRowsSumToOne => "max |rowsum(F) - 1|",
            Property::TransferOffDiagonalZero => "max |off-diagonal blocks of F^2|",
            Property::TransferTokenBlock => "max |F^2 token block - S_t|",
            Property::TransferAnchorBlock => "max |F^2 anchor block - S_u|",
            Property::MatmulAssociative => "||(AB)C - A(BC)||_inf / (||A|| ||B|| ||C||)",
            Property::SoftmaxRowsSumToOne => {
                "max |rowsum(softmax) - 1|, or 1 if an entry leaves (0, 1]"
            }
            Property::SoftmaxShiftInvariant => "max |softmax(x + c) - softmax(x)|",
            Property::Deterministic => "1 if a repeat differs bitwise",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InstanceInfo {
    pub index: usize,
    pub seed: u64,
    pub n: usize,
    pub m: usize,
    pub d: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PropertyResult {
    pub property: Property,
    pub max_error: f64,
    pub checked: usize,
    pub worst: Option<InstanceInfo>,
}

impl PropertyResult {
    pub fn passed(&self) -> bool {
        self.max_error <= self.property.tolerance()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyReport {
    pub config: VerifyConfig,
    pub results: Vec<PropertyResult>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(PropertyResult::passed)
    }

    pub fn result(&self, p: Property) -> &PropertyResult {
        self.results
            .iter()
            .find(|r| r.property == p)
            .expect("every property is reported")
    }

    /// Plain-text report; the thread count is deliberately left out so output
    /// does not depend on the machine.
    pub fn render(&self) -> String {
        let c = &self.config;
        let mut out = format!(
            "verify seed={} instances={} n<={} m<={} d<={}\n",
            c.seed, c.instances, c.max_tokens, c.max_anchors, c.max_dim
        );
        for r in &self.results {
            let _ = writeln!(
                out,
                "{:<5} {:<30} max_error={:.3e} tol={:.0e} checked={}",
                if r.passed() { "PASS" } else { "FAIL" },
                r.property.name(),
                r.max_error,
                r.property.tolerance(),
                r.checked
            );
            if let (false, Some(w)) = (r.passed(), r.worst) {
                let _ = writeln!(
                    out,
                    "      worst instance #{} (seed {}, n={} m={} d={})",
                    w.index, w.seed, w.n, w.m, w.d
                );
            }
        }
        let failed = self.results.iter().filter(|r| !r.passed()).count();
        let _ = writeln!(
            out,
            "{} of {} properties passed",
            self.results.len() - failed,
            self.results.len()
        );
        out
    }
}

/// Seed of instance `index`; a splitmix64 step so nearby indices decorrelate.
pub fn instance_seed(seed: u64, index: usize) -> u64 {
    let mut z = seed.wrapping_add((index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Shape of instance `index`. The first four cover the edges: a single
/// token, a single anchor, `m = n` and `m > n`.
fn instance_shape<R: Rng>(cfg: &VerifyConfig, index: usize, rng: &mut R) -> (usize, usize, usize) {
    let n = rng.random_range(1..=cfg.max_tokens);
    let m = rng.random_range(1..=cfg.max_anchors);
    let d = rng.random_range(1..=cfg.max_dim);
    match index {
        0 => (1, m, d),
        1 => (n, 1, d),
        2 => (m, m, d),
        3 => (
            n.min(cfg.max_anchors.saturating_sub(1)).max(1),
            cfg.max_anchors,
            d,
        ),
        _ => (n, m, d),
    }
}

type Errors = Vec<(Property, f64)>;

fn max_abs_dev(xs: impl IntoIterator<Item = f64>, target: f64) -> f64 {
    xs.into_iter()
        .map(|x| (x - target).abs())
        .fold(0.0, f64::max)
}

/// Largest `-lambda_min` over the spectrum, or 0 if all eigenvalues are >= 0.
fn negative_eigen_mass(s: &Matrix) -> f64 {
    let dm = DMatrix::from_row_slice(s.rows(), s.cols(), s.data());
    let eig = SymmetricEigen::new(dm);
    eig.eigenvalues
        .iter()
        .fold(0.0, |acc, &l| f64::max(acc, -l))
}

fn check_instance(cfg: &VerifyConfig, info: InstanceInfo, rng: &mut crate::Rng) -> Result<Errors> {
    let InstanceInfo { n, m, d, .. } = info;
    // Varying the key scale sweeps affinities from nearly uniform to peaked.
    let key_scale = rng.random_range(0.25..4.0);
    let k = Matrix::random_normal(n, d, key_scale, rng);
    let v = Matrix::random_normal(n, d, 1.0, rng);
    let anchors = AnchorParams::gaussian(m, d, rng);
    let mut state = anchor_affinity(&anchors, &k)?;
    if cfg.poison_delta && info.index == 0 {
        let mut delta = state.delta().to_vec();
        delta[0] = 0.0;
        state = AffinityState::from_parts(state.affinity().clone(), delta)?;
    }
    let a = state.affinity();
    let delta = state.delta();
    let mut errs = Errors::new();

    let fast = anchor_attention_fast(&state, &v)?;
    let explicit = anchor_attention_explicit(&state, &v)?;
    errs.push((
        Property::FastMatchesExplicit,
        fast.sub(&explicit)?.norm_inf(),
    ));
    errs.push((
        Property::AffinityRowsSumToOne,
        max_abs_dev(a.row_sums(), 1.0),
    ));
    errs.push((
        Property::MassTotalsTokens,
        (delta.iter().sum::<f64>() - n as f64).abs() / n as f64,
    ));

    let s_t = token_similarity(&state)?;
    errs.push((
        Property::TokenSimilarityRowStochastic,
        max_abs_dev(s_t.row_sums(), 1.0),
    ));
    errs.push((
        Property::TokenSimilarityColumnStochastic,
        max_abs_dev(s_t.col_sums(), 1.0),
    ));
    errs.push((
        Property::TokenSimilaritySymmetric,
        s_t.max_abs_diff(&crate::transpose(&s_t))?,
    ));

    if n <= SMALL_INSTANCE {
        errs.push((Property::TokenSimilarityPsd, negative_eigen_mass(&s_t)));
        // Token i steps to anchor j with probability a_ij, anchor j steps to
        // token k with probability a_kj / delta_j.
        let mut worst = 0.0f64;
        for i in 0..n {
            for kk in 0..n {
                let mut p = 0.0;
                for j in 0..m {
                    p += a.get(i, j) * (a.get(kk, j) / delta[j]);
                }
                worst = worst.max((p - s_t.get(i, kk)).abs());
            }
        }
        errs.push((Property::TwoStepWalk, worst));
    }

    let mut outside = 0.0f64;
    for c in 0..d {
        let (lo, hi) = (0..n).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), i| {
            (lo.min(v.get(i, c)), hi.max(v.get(i, c)))
        });
        for i in 0..n {
            let h = fast.get(i, c);
            outside = outside.max(lo - h).max(h - hi);
        }
    }
    errs.push((Property::OutputInConvexHull, outside));

    if n + m <= TRANSFER_CHECK_LIMIT {
        let t = build_transfer_matrix(&state)?;
        errs.push((
            Property::TransferRowsSumToOne,
            max_abs_dev(t.f.row_sums(), 1.0),
        ));
        let sq = t.square()?;
        let off = sq
            .block(0, n, n, m)
            .max_abs()
            .max(sq.block(n, 0, m, n).max_abs());
        errs.push((Property::TransferOffDiagonalZero, off));
        errs.push((
            Property::TransferTokenBlock,
            sq.block(0, 0, n, n).max_abs_diff(&s_t)?,
        ));
        errs.push((
            Property::TransferAnchorBlock,
            sq.block(n, n, m, m)
                .max_abs_diff(&anchor_similarity(&state)?)?,
        ));
    }

    let x = Matrix::random_normal(n, d, 1.0, rng);
    let y = Matrix::random_normal(d, m, 1.0, rng);
    let z = Matrix::random_normal(m, d, 1.0, rng);
    let left = matmul(&matmul(&x, &y)?, &z)?;
    let right = matmul(&x, &matmul(&y, &z)?)?;
    let scale = x.norm_inf() * y.norm_inf() * z.norm_inf();
    errs.push((
        Property::MatmulAssociative,
        left.sub(&right)?.norm_inf() / scale.max(f64::MIN_POSITIVE),
    ));

    // Logits on a 2^-20 grid and a quarter-integer shift keep `x + c` exact,
    // so only the softmax itself is measured.
    let logits =
        Matrix::random_normal(n, m, key_scale, rng).map(|x| (x * 1048576.0).round() / 1048576.0);
    let scale = 1.0 / (d as f64).sqrt();
    let p = softmax_rows(&logits, scale)?;
    let in_range = p.data().iter().all(|&x| x > 0.0 && x <= 1.0);
    let row_dev = max_abs_dev(p.row_sums(), 1.0);
    errs.push((
        Property::SoftmaxRowsSumToOne,
        if in_range { row_dev } else { 1.0 },
    ));
    let shift = rng.random_range(-40..40) as f64 / 4.0;
    let shifted = softmax_rows(&logits.map(|x| x + shift), scale)?;
    errs.push((Property::SoftmaxShiftInvariant, shifted.max_abs_diff(&p)?));

    let again = anchor_attention_fast(&anchor_affinity(&anchors, &k)?, &v)?;
    let same = fast
        .data()
        .iter()
        .zip(again.data())
        .all(|(a, b)| a.to_bits() == b.to_bits());
    errs.push((Property::Deterministic, if same { 0.0 } else { 1.0 }));
    Ok(errs)
}

fn run_one(cfg: &VerifyConfig, index: usize) -> (InstanceInfo, Result<Errors>) {
    let seed = instance_seed(cfg.seed, index);
    let mut rng = seeded_rng(seed);
    let (n, m, d) = instance_shape(cfg, index, &mut rng);
    let info = InstanceInfo {
        index,
        seed,
        n,
        m,
        d,
    };
    (info, check_instance(cfg, info, &mut rng))
}

/// Runs the suite. An instance that cannot be evaluated at all (for example
/// a poisoned mass) aborts the run with an error naming it.
pub fn run_verify(cfg: &VerifyConfig) -> Result<VerifyReport> {
    if cfg.instances == 0 || cfg.max_tokens == 0 || cfg.max_anchors == 0 || cfg.max_dim == 0 {
        return Err(Error::Argument(
            "verify needs instances and shape bounds >= 1".into(),
        ));
    }
    let threads = cfg.threads.clamp(1, cfg.instances);
    let mut outcomes: Vec<Option<(InstanceInfo, Result<Errors>)>> =
        (0..cfg.instances).map(|_| None).collect();
    std::thread::scope(|s| {
        let workers: Vec<_> = (0..threads)
            .map(|t| {
                s.spawn(move || {
                    (t..cfg.instances)
                        .step_by(threads)
                        .map(|i| run_one(cfg, i))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for w in workers {
            for (info, res) in w.join().expect("verify worker panicked") {
                outcomes[info.index] = Some((info, res));
            }
        }
    });

    let mut results: Vec<PropertyResult> = Property::ALL
        .iter()
        .map(|&property| PropertyResult {
            property,
            max_error: 0.0,
            checked: 0,
            worst: None,
        })
        .collect();
    for (info, res) in outcomes.into_iter().flatten() {
        let errs = res.map_err(|e| {
            let msg = format!(
                "instance #{} (seed {}, n={} m={} d={}): {e}",
                info.index, info.seed, info.n, info.m, info.d
            );
            match e {
                Error::SingularMass { .. } | Error::NumericInput(_) => Error::NumericInput(msg),
                Error::Capacity(_) => Error::Capacity(msg),
                other => other,
            }
        })?;
        for (p, err) in errs {
            let r = &mut results[Property::ALL.iter().position(|&q| q == p).expect("listed")];
            r.checked += 1;
            if err > r.max_error || err.is_nan() || r.worst.is_none() {
                r.max_error = if err.is_nan() {
                    f64::INFINITY
                } else {
                    err.max(r.max_error)
                };
                r.worst = Some(info);
            }
        }
    }
    Ok(VerifyReport {
        config: cfg.clone(),
        results,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> VerifyConfig {
        VerifyConfig {
            instances: 24,
            max_tokens: 40,
            max_anchors: 12,
            max_dim: 6,
            ..Default::default()
        }
    }

    #[test]
    fn suite_passes_and_covers_every_property() {
        let report = run_verify(&small()).unwrap();
        assert!(report.passed(), "{}", report.render());
        for r in &report.results {
            assert!(r.checked > 0, "{} never checked", r.property.name());
        }
    }

    #[test]
    fn report_is_independent_of_thread_count() {
        let one = run_verify(&small()).unwrap().render();
        let three = run_verify(&VerifyConfig {
            threads: 3,
            ..small()
        })
        .unwrap()
        .render();
        assert_eq!(one, three);
        assert!(one.starts_with("verify seed=0 instances=24"));
    }

    #[test]
    fn poisoned_mass_is_an_error() {
        let err = run_verify(&VerifyConfig {
            poison_delta: true,
            ..small()
        })
        .unwrap_err();
        assert_eq!(err.exit_code(), 1);
        assert!(err.to_string().contains("instance #0"), "{err}");
    }

    #[test]
    fn edge_shapes_come_first() {
        let cfg = small();
        let shape = |i| instance_shape(&cfg, i, &mut seeded_rng(instance_seed(0, i)));
        assert_eq!(shape(0).0, 1);
        assert_eq!(shape(1).1, 1);
        assert_eq!(shape(2).0, shape(2).1);
        assert!(shape(3).1 > shape(3).0);
    }

    #[test]
    fn eigen_check_sees_negative_spectrum() {
        let m = Matrix::from_rows(&[[0.0, 1.0], [1.0, 0.0]]).unwrap();
        assert!((negative_eigen_mass(&m) - 1.0).abs() < 1e-12);
        assert_eq!(negative_eigen_mass(&Matrix::identity(3)), 0.0);
    }
}
