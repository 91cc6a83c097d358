//! Anchor attention.
//!
//! Tokens attend to `m` anchors instead of to each other. With `A` the
//! `n x m` token-to-anchor affinity (a row softmax of `K W_S^T / sqrt(d)`) and
//! `delta` its column sums, the token-token attention is the two-step walk
//! token -> anchor -> token through the bipartite graph:
//!
//! ```text
//! S_t = A diag(delta)^-1 A^T        (n x n, symmetric, row-stochastic, PSD)
//! H   = S_t V = A (diag(delta)^-1 (A^T V))
//! ```
//!
//! The right-hand bracketing costs `O(nmd)` and never forms an `n x n`
//! matrix; [`anchor_attention_explicit`] materializes `S_t` and exists as an
//! oracle for it.
//!
//! Each token's affinity normalizes over the `m` anchors only. The anchor
//! path reads keys and values; queries are not used.

use rand::seq::index::sample;
use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::{
    check_mass, concat_cols, matmul, matmul_transposed_a, matmul_transposed_b,
    scale_rows_by_inverse, softmax_rows, Matrix,
};
use crate::reference::{project_tokens, ProjectionWeights};

pub const DEFAULT_ANCHORS: usize = 30;

/// Largest `n + m` for which [`build_transfer_matrix`] will materialize `F`.
pub const TRANSFER_MATRIX_LIMIT: usize = 4096;

/// Row-sum tolerance enforced when `S_t` is materialized.
const ROW_STOCHASTIC_TOL: f64 = 1e-10;

/// The `m x d` anchor matrix `W_S`; row `j` is anchor `u_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorParams {
    pub w_s: Matrix,
}

impl AnchorParams {
    pub fn new(w_s: Matrix) -> Result<Self> {
        if !w_s.is_finite() {
            return Err(Error::NumericInput(
                "anchor matrix contains NaN or Inf".into(),
            ));
        }
        Ok(AnchorParams { w_s })
    }

    pub fn count(&self) -> usize {
        self.w_s.rows()
    }

    pub fn dim(&self) -> usize {
        self.w_s.cols()
    }

    /// Gaussian anchors with standard deviation `1/sqrt(d)`.
    pub fn gaussian<R: Rng + ?Sized>(m: usize, d: usize, rng: &mut R) -> Self {
        AnchorParams {
            w_s: Matrix::random_normal(m, d, 1.0 / (d as f64).sqrt(), rng),
        }
    }

    /// `m` distinct key rows chosen at random, refined by `iterations`
    /// fixed-point steps. Falls back to sampling with repetition when `m > n`.
    pub fn from_keys<R: Rng + ?Sized>(
        keys: &Matrix,
        m: usize,
        iterations: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let n = keys.rows();
        let picks: Vec<usize> = if m <= n {
            sample(rng, n, m).into_vec()
        } else {
            (0..m).map(|_| rng.random_range(0..n)).collect()
        };
        let mut anchors = AnchorParams::new(keys.select_rows(&picks))?;
        for _ in 0..iterations {
            let state = anchor_affinity(&anchors, keys)?;
            anchors = AnchorParams::new(anchor_fixed_point_step(&state, keys)?)?;
        }
        Ok(anchors)
    }
}

/// How anchors are initialized when a model is built.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum AnchorInit {
    #[default]
    Gaussian,
    /// Random key rows followed by this many fixed-point refinements.
    FromKeys {
        iterations: usize,
    },
}

/// Token-to-anchor affinity `A` (`n x m`) and its column masses `delta`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityState {
    a: Matrix,
    delta: Vec<f64>,
}

impl AffinityState {
    /// Assembles a state without checking the probabilistic invariants, so
    /// corrupted states can be fed to the guards.
    pub fn from_parts(a: Matrix, delta: Vec<f64>) -> Result<Self> {
        if delta.len() != a.cols() {
            return Err(Error::dimension(
                "affinity state",
                a.shape(),
                crate::Shape::new(1, delta.len()),
            ));
        }
        Ok(AffinityState { a, delta })
    }

    pub fn affinity(&self) -> &Matrix {
        &self.a
    }

    pub fn delta(&self) -> &[f64] {
        &self.delta
    }

    pub fn tokens(&self) -> usize {
        self.a.rows()
    }

    pub fn anchors(&self) -> usize {
        self.a.cols()
    }
}

/// `A = softmax_rows(K W_S^T, 1/sqrt(d))`, `delta = colsum(A)`.
///
/// Each row normalizes over the `m` anchors. A denominator summed over the
/// `n` tokens would not give a distribution over anchors.
pub fn anchor_affinity(anchors: &AnchorParams, keys: &Matrix) -> Result<AffinityState> {
    if anchors.dim() != keys.cols() {
        return Err(Error::dimension(
            "anchor_affinity",
            keys.shape(),
            anchors.w_s.shape(),
        ));
    }
    let logits = matmul_transposed_b(keys, &anchors.w_s)?;
    let a = softmax_rows(&logits, 1.0 / (keys.cols() as f64).sqrt())?;
    let delta = a.col_sums();
    Ok(AffinityState { a, delta })
}

fn check_values(state: &AffinityState, v: &Matrix, op: &'static str) -> Result<()> {
    if v.rows() != state.tokens() {
        return Err(Error::dimension(op, state.a.shape(), v.shape()));
    }
    check_mass(&state.delta)
}

/// Materializes `S_t = A diag(delta)^-1 A^T`.
pub fn token_similarity(state: &AffinityState) -> Result<Matrix> {
    check_mass(&state.delta)?;
    let scaled = scale_columns_by_inverse(&state.a, &state.delta);
    matmul_transposed_b(&scaled, &state.a)
}

/// Materializes `S_u = diag(delta)^-1 A^T A`.
pub fn anchor_similarity(state: &AffinityState) -> Result<Matrix> {
    scale_rows_by_inverse(&matmul_transposed_a(&state.a, &state.a)?, &state.delta)
}

fn scale_columns_by_inverse(m: &Matrix, mass: &[f64]) -> Matrix {
    let mut out = m.clone();
    for i in 0..out.rows() {
        for (x, w) in out.row_mut(i).iter_mut().zip(mass) {
            *x /= w;
        }
    }
    out
}

/// `S_t V` through an explicit `n x n` `S_t`. Quadratic; oracle use only.
pub fn anchor_attention_explicit(state: &AffinityState, v: &Matrix) -> Result<Matrix> {
    check_values(state, v, "anchor_attention_explicit")?;
    let s_t = token_similarity(state)?;
    let worst = s_t
        .row_sums()
        .into_iter()
        .map(|r| (r - 1.0).abs())
        .fold(0.0, f64::max);
    // written so that a NaN deviation fails
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    if !(worst <= ROW_STOCHASTIC_TOL) {
        return Err(Error::NumericInput(format!(
            "token similarity is not row-stochastic (max row-sum deviation {worst:e})"
        )));
    }
    matmul(&s_t, v)
}

/// `A (diag(delta)^-1 (A^T V))`: `O(nmd)` time, `O(nm + md)` extra memory.
pub fn anchor_attention_fast(state: &AffinityState, v: &Matrix) -> Result<Matrix> {
    check_values(state, v, "anchor_attention_fast")?;
    let m1 = matmul_transposed_a(&state.a, v)?;
    let m2 = scale_rows_by_inverse(&m1, &state.delta)?;
    matmul(&state.a, &m2)
}

/// Row-stochastic transition matrix of the token/anchor bipartite walk,
/// `F = [[0, A], [diag(delta)^-1 A^T, 0]]`, tokens first.
#[derive(Debug, Clone, PartialEq)]
pub struct TransferMatrix {
    pub f: Matrix,
    pub tokens: usize,
    pub anchors: usize,
}

impl TransferMatrix {
    /// `F^2`, which is block diagonal `[[S_t, 0], [0, S_u]]`.
    pub fn square(&self) -> Result<Matrix> {
        matmul(&self.f, &self.f)
    }
}

pub fn build_transfer_matrix(state: &AffinityState) -> Result<TransferMatrix> {
    let (n, m) = (state.tokens(), state.anchors());
    if n + m > TRANSFER_MATRIX_LIMIT {
        return Err(Error::Capacity(format!(
            "transfer matrix of order {} exceeds the limit {TRANSFER_MATRIX_LIMIT}",
            n + m
        )));
    }
    check_mass(&state.delta)?;
    let size = n + m;
    let mut f = Matrix::zeros(size, size);
    for i in 0..n {
        for j in 0..m {
            let a = state.a.get(i, j);
            f.set(i, n + j, a);
            f.set(n + j, i, a / state.delta[j]);
        }
    }
    Ok(TransferMatrix {
        f,
        tokens: n,
        anchors: m,
    })
}

/// One closed-form anchor update: each anchor moves to the affinity-weighted
/// mean of the keys, `u_j = sum_i a_ij k_i / delta_j`.
pub fn anchor_fixed_point_step(state: &AffinityState, keys: &Matrix) -> Result<Matrix> {
    check_values(state, keys, "anchor_fixed_point_step")?;
    scale_rows_by_inverse(&matmul_transposed_a(&state.a, keys)?, &state.delta)
}

/// Expected squared anchor-key distance, `sum_i sum_j a_ij |u_j - k_i|^2`.
pub fn surrogate_objective(
    state: &AffinityState,
    anchors: &AnchorParams,
    keys: &Matrix,
) -> Result<f64> {
    if keys.rows() != state.tokens()
        || anchors.count() != state.anchors()
        || anchors.dim() != keys.cols()
    {
        return Err(Error::dimension(
            "surrogate_objective",
            keys.shape(),
            anchors.w_s.shape(),
        ));
    }
    let mut total = 0.0;
    for i in 0..keys.rows() {
        let k = keys.row(i);
        for j in 0..anchors.count() {
            let dist: f64 = anchors
                .w_s
                .row(j)
                .iter()
                .zip(k)
                .map(|(u, x)| (u - x) * (u - x))
                .sum();
            total += state.a.get(i, j) * dist;
        }
    }
    Ok(total)
}

/// Result of iterating the fixed-point update.
#[derive(Debug, Clone)]
pub struct AnchorFit {
    pub anchors: AnchorParams,
    /// Objective of the initial anchors followed by one entry per iteration.
    pub objective: Vec<f64>,
}

pub fn fit_anchors(keys: &Matrix, init: AnchorParams, iterations: usize) -> Result<AnchorFit> {
    let mut anchors = init;
    let state = anchor_affinity(&anchors, keys)?;
    let mut objective = vec![surrogate_objective(&state, &anchors, keys)?];
    for _ in 0..iterations {
        let state = anchor_affinity(&anchors, keys)?;
        anchors = AnchorParams::new(anchor_fixed_point_step(&state, keys)?)?;
        let value = surrogate_objective(&anchor_affinity(&anchors, keys)?, &anchors, keys)?;
        if !value.is_finite() {
            return Err(Error::NumericInput(format!(
                "anchor objective became {value}"
            )));
        }
        objective.push(value);
    }
    Ok(AnchorFit { anchors, objective })
}

/// Projections and anchors of one head.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    /// `W_Q` is carried for parity with the reference attention and is not
    /// read by the anchor path.
    pub proj: ProjectionWeights,
    pub anchors: AnchorParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiHeadParams {
    pub heads: Vec<HeadParams>,
    /// `(l*d) x d` output projection.
    pub w_out: Matrix,
    /// When set, every head uses the anchors of head 0.
    pub share_anchors: bool,
}

impl MultiHeadParams {
    pub fn random<R: Rng + ?Sized>(
        input_dim: usize,
        head_dim: usize,
        heads: usize,
        anchors: usize,
        rng: &mut R,
    ) -> Self {
        let wstd = 1.0 / (input_dim as f64).sqrt();
        let heads = (0..heads)
            .map(|_| HeadParams {
                proj: ProjectionWeights {
                    w_q: Matrix::random_normal(input_dim, head_dim, wstd, rng),
                    w_k: Matrix::random_normal(input_dim, head_dim, wstd, rng),
                    w_v: Matrix::random_normal(input_dim, head_dim, wstd, rng),
                },
                anchors: AnchorParams::gaussian(anchors, head_dim, rng),
            })
            .collect::<Vec<_>>();
        let l = heads.len();
        MultiHeadParams {
            heads,
            w_out: Matrix::random_normal(
                l * head_dim,
                head_dim,
                1.0 / ((l * head_dim) as f64).sqrt(),
                rng,
            ),
            share_anchors: false,
        }
    }

    pub fn head_count(&self) -> usize {
        self.heads.len()
    }

    pub fn input_dim(&self) -> usize {
        self.heads[0].proj.input_dim()
    }

    pub fn head_dim(&self) -> usize {
        self.heads[0].proj.head_dim()
    }

    pub fn anchors_for(&self, head: usize) -> &AnchorParams {
        if self.share_anchors {
            &self.heads[0].anchors
        } else {
            &self.heads[head].anchors
        }
    }

    pub fn validate(&self) -> Result<()> {
        let first = self.heads.first().ok_or_else(|| {
            Error::Argument("multi-head attention needs at least one head".into())
        })?;
        for h in &self.heads {
            if h.proj.w_q.shape() != first.proj.w_q.shape()
                || h.proj.w_k.shape() != first.proj.w_q.shape()
                || h.proj.w_v.shape() != first.proj.w_q.shape()
            {
                return Err(Error::dimension(
                    "head projections",
                    first.proj.w_q.shape(),
                    h.proj.w_k.shape(),
                ));
            }
            if h.anchors.w_s.shape() != first.anchors.w_s.shape()
                || h.anchors.dim() != first.proj.head_dim()
            {
                return Err(Error::dimension(
                    "head anchors",
                    first.anchors.w_s.shape(),
                    h.anchors.w_s.shape(),
                ));
            }
        }
        let d = first.proj.head_dim();
        let expected = crate::Shape::new(self.heads.len() * d, d);
        if self.w_out.shape() != expected {
            return Err(Error::dimension(
                "output projection",
                expected,
                self.w_out.shape(),
            ));
        }
        Ok(())
    }
}

/// Output of a single head: project, anchor affinity, fast attention.
pub fn head_attention(
    x: &Matrix,
    proj: &ProjectionWeights,
    anchors: &AnchorParams,
) -> Result<Matrix> {
    let inp = project_tokens(x, proj)?;
    let state = anchor_affinity(anchors, &inp.k)?;
    anchor_attention_fast(&state, &inp.v)
}

/// `[H_1, ..., H_l] W_out`, heads concatenated in index order.
pub fn multi_head_attention(x: &Matrix, params: &MultiHeadParams) -> Result<Matrix> {
    params.validate()?;
    let outputs = params
        .heads
        .iter()
        .enumerate()
        .map(|(h, head)| head_attention(x, &head.proj, params.anchors_for(h)))
        .collect::<Result<Vec<_>>>()?;
    matmul(&concat_cols(&outputs)?, &params.w_out)
}

/// Note for callers when anchors no longer undercut the token count.
pub fn complexity_warning(tokens: usize, anchors: usize) -> Option<String> {
    (anchors >= tokens).then(|| {
        format!("m = {anchors} >= n = {tokens}: anchor attention is correct but no cheaper than full attention")
    })
}
