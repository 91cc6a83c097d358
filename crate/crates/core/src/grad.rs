//! Reverse-mode gradients of anchor attention, derived by hand.
//!
//! Forward (one head, `s = 1/sqrt(d)`):
//!
//! ```text
//! K = X W_K,  V = X W_V
//! A = softmax_rows(s K W_S^T),  delta_j = sum_i A_ij
//! M1 = A^T V,  M2 = diag(delta)^-1 M1,  H = A M2
//! ```
//!
//! Backward from `G = dL/dH`:
//!
//! ```text
//! dA  = G M2^T + V dM1^T + 1 ddelta^T
//! dM2 = A^T G,  dM1 = diag(delta)^-1 dM2,  ddelta_j = -<dM2_j, M2_j> / delta_j
//! dV  = A dM1
//! dZ  = s * A .* (dA - rowsum(dA .* A))
//! dK  = dZ W_S,  dW_S = dZ^T K
//! ```
//!
//! `delta` depends on `A`, so its term is kept. A second backward that
//! differentiates `H = S_t V` with an explicit `S_t` serves as a cross-check.

use crate::anchor::{
    anchor_affinity, token_similarity, AffinityState, AnchorParams, HeadParams, MultiHeadParams,
};
use crate::error::{Error, Result};
use crate::linalg::{
    concat_cols, matmul, matmul_transposed_a, matmul_transposed_b, scale_rows_by_inverse,
    split_cols, Matrix,
};
use crate::reference::{project_tokens, AttentionInputs};

/// Recommended finite-difference step band.
pub const FD_STEP_RANGE: (f64, f64) = (1e-7, 1e-3);

/// Floor on the relative-error denominator.
pub const FD_REL_FLOOR: f64 = 1e-8;

/// Cached forward pass of one anchor-attention head, from keys and values on.
#[derive(Debug, Clone)]
pub struct AnchorForward {
    pub anchors: AnchorParams,
    pub keys: Matrix,
    pub values: Matrix,
    pub state: AffinityState,
    pub m1: Matrix,
    pub m2: Matrix,
    pub output: Matrix,
}

pub fn anchor_forward(
    anchors: &AnchorParams,
    keys: &Matrix,
    values: &Matrix,
) -> Result<AnchorForward> {
    let state = anchor_affinity(anchors, keys)?;
    if values.rows() != keys.rows() {
        return Err(Error::dimension(
            "anchor_forward",
            keys.shape(),
            values.shape(),
        ));
    }
    let m1 = matmul_transposed_a(state.affinity(), values)?;
    let m2 = scale_rows_by_inverse(&m1, state.delta())?;
    let output = matmul(state.affinity(), &m2)?;
    Ok(AnchorForward {
        anchors: anchors.clone(),
        keys: keys.clone(),
        values: values.clone(),
        state,
        m1,
        m2,
        output,
    })
}

/// Gradients with respect to the anchors, keys and values of one head.
#[derive(Debug, Clone, PartialEq)]
pub struct GradBundle {
    pub d_ws: Matrix,
    pub d_k: Matrix,
    pub d_v: Matrix,
}

/// Vector-Jacobian product of a row softmax: `a .* (g - rowsum(g .* a))`.
/// The softmax scale is not applied.
pub fn softmax_rows_backward(a: &Matrix, upstream: &Matrix) -> Result<Matrix> {
    if a.shape() != upstream.shape() {
        return Err(Error::dimension(
            "softmax_rows_backward",
            a.shape(),
            upstream.shape(),
        ));
    }
    let mut out = Matrix::zeros(a.rows(), a.cols());
    for i in 0..a.rows() {
        let (ar, gr) = (a.row(i), upstream.row(i));
        let dot: f64 = ar.iter().zip(gr).map(|(x, g)| x * g).sum();
        for ((o, &x), &g) in out.row_mut(i).iter_mut().zip(ar).zip(gr) {
            *o = x * (g - dot);
        }
    }
    Ok(out)
}

fn check_upstream(fwd: &AnchorForward, upstream: &Matrix) -> Result<()> {
    if upstream.shape() != fwd.output.shape() {
        return Err(Error::dimension(
            "anchor attention backward",
            fwd.output.shape(),
            upstream.shape(),
        ));
    }
    Ok(())
}

/// Adds the mass gradient to every row: `dA_ij += ddelta_j`.
fn add_mass_gradient(d_a: &mut Matrix, d_delta: &[f64]) {
    for i in 0..d_a.rows() {
        for (x, g) in d_a.row_mut(i).iter_mut().zip(d_delta) {
            *x += g;
        }
    }
}

/// From `dL/dA` through the affinity softmax to the anchors and keys.
fn affinity_backward(fwd: &AnchorForward, d_a: &Matrix) -> Result<(Matrix, Matrix)> {
    let scale = 1.0 / (fwd.keys.cols() as f64).sqrt();
    let d_logits = softmax_rows_backward(fwd.state.affinity(), d_a)?.scale(scale);
    let d_k = matmul(&d_logits, &fwd.anchors.w_s)?;
    let d_ws = matmul_transposed_a(&d_logits, &fwd.keys)?;
    Ok((d_ws, d_k))
}

/// Backward through the reordered product `A (diag(delta)^-1 (A^T V))`.
pub fn backward_anchor_attention(fwd: &AnchorForward, upstream: &Matrix) -> Result<GradBundle> {
    check_upstream(fwd, upstream)?;
    let a = fwd.state.affinity();
    let delta = fwd.state.delta();

    let mut d_a = matmul_transposed_b(upstream, &fwd.m2)?;
    let d_m2 = matmul_transposed_a(a, upstream)?;
    let d_m1 = scale_rows_by_inverse(&d_m2, delta)?;
    let d_delta: Vec<f64> = (0..delta.len())
        .map(|j| {
            let dot: f64 = d_m2
                .row(j)
                .iter()
                .zip(fwd.m2.row(j))
                .map(|(g, x)| g * x)
                .sum();
            -dot / delta[j]
        })
        .collect();
    d_a = d_a.add(&matmul_transposed_b(&fwd.values, &d_m1)?)?;
    add_mass_gradient(&mut d_a, &d_delta);
    let d_v = matmul(a, &d_m1)?;

    let (d_ws, d_k) = affinity_backward(fwd, &d_a)?;
    Ok(GradBundle { d_ws, d_k, d_v })
}

/// Backward through `H = S_t V` with `S_t = A diag(delta)^-1 A^T`
/// materialized. Quadratic in `n`.
pub fn backward_anchor_attention_explicit(
    fwd: &AnchorForward,
    upstream: &Matrix,
) -> Result<GradBundle> {
    check_upstream(fwd, upstream)?;
    let a = fwd.state.affinity();
    let delta = fwd.state.delta();
    let s_t = token_similarity(&fwd.state)?;

    let d_s = matmul_transposed_b(upstream, &fwd.values)?;
    let d_v = matmul_transposed_a(&s_t, upstream)?;

    // S_ik = sum_j A_ij A_kj / delta_j
    let d_s_sym = d_s.add(&crate::transpose(&d_s))?;
    let mut d_a = matmul(&d_s_sym, a)?;
    for i in 0..d_a.rows() {
        for (x, w) in d_a.row_mut(i).iter_mut().zip(delta) {
            *x /= w;
        }
    }
    let quad = matmul_transposed_a(a, &matmul(&d_s, a)?)?;
    let d_delta: Vec<f64> = (0..delta.len())
        .map(|j| -quad.get(j, j) / (delta[j] * delta[j]))
        .collect();
    add_mass_gradient(&mut d_a, &d_delta);

    let (d_ws, d_k) = affinity_backward(fwd, &d_a)?;
    Ok(GradBundle { d_ws, d_k, d_v })
}

/// A collection of named parameter matrices with a fixed layout. Gradients
/// are carried in a value of the same type.
pub trait ParamSet {
    fn params(&self) -> Vec<(String, &Matrix)>;
    fn params_mut(&mut self) -> Vec<&mut Matrix>;
}

impl ParamSet for Matrix {
    fn params(&self) -> Vec<(String, &Matrix)> {
        vec![("p".to_string(), self)]
    }

    fn params_mut(&mut self) -> Vec<&mut Matrix> {
        vec![self]
    }
}

impl ParamSet for MultiHeadParams {
    fn params(&self) -> Vec<(String, &Matrix)> {
        let mut out = Vec::new();
        for (h, head) in self.heads.iter().enumerate() {
            out.push((format!("head{h}.W_Q"), &head.proj.w_q));
            out.push((format!("head{h}.W_K"), &head.proj.w_k));
            out.push((format!("head{h}.W_V"), &head.proj.w_v));
            out.push((format!("head{h}.W_S"), &head.anchors.w_s));
        }
        out.push(("W_out".to_string(), &self.w_out));
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = Vec::new();
        for head in self.heads.iter_mut() {
            out.push(&mut head.proj.w_q);
            out.push(&mut head.proj.w_k);
            out.push(&mut head.proj.w_v);
            out.push(&mut head.anchors.w_s);
        }
        out.push(&mut self.w_out);
        out
    }
}

/// `p <- p - lr * g` for every parameter.
pub fn sgd_step<P: ParamSet>(params: &mut P, grads: &P, lr: f64) -> Result<()> {
    if !(lr.is_finite() && lr >= 0.0) {
        return Err(Error::Argument(format!(
            "learning rate must be finite and >= 0, got {lr}"
        )));
    }
    let grads = grads.params();
    let mut params = params.params_mut();
    if grads.len() != params.len() {
        return Err(Error::Argument(
            "parameter and gradient layouts differ".into(),
        ));
    }
    for (p, (_, g)) in params.iter_mut().zip(grads) {
        p.axpy_sub(lr, g)?;
    }
    Ok(())
}

/// Forward cache of one head inside a multi-head block.
#[derive(Debug, Clone)]
pub struct HeadForward {
    pub inputs: AttentionInputs,
    pub anchor: AnchorForward,
}

#[derive(Debug, Clone)]
pub struct MultiHeadForward {
    pub heads: Vec<HeadForward>,
    pub concat: Matrix,
    pub output: Matrix,
}

pub fn multi_head_forward(x: &Matrix, params: &MultiHeadParams) -> Result<MultiHeadForward> {
    params.validate()?;
    let heads = params
        .heads
        .iter()
        .enumerate()
        .map(|(h, head)| {
            let inputs = project_tokens(x, &head.proj)?;
            let anchor = anchor_forward(params.anchors_for(h), &inputs.k, &inputs.v)?;
            Ok(HeadForward { inputs, anchor })
        })
        .collect::<Result<Vec<_>>>()?;
    let concat = concat_cols(
        &heads
            .iter()
            .map(|h| h.anchor.output.clone())
            .collect::<Vec<_>>(),
    )?;
    let output = matmul(&concat, &params.w_out)?;
    Ok(MultiHeadForward {
        heads,
        concat,
        output,
    })
}

/// Parameter gradients (in the layout of [`MultiHeadParams`]) and the
/// gradient with respect to the block input.
#[derive(Debug, Clone)]
pub struct MultiHeadGrads {
    pub params: MultiHeadParams,
    pub d_x: Matrix,
}

pub fn multi_head_backward(
    x: &Matrix,
    params: &MultiHeadParams,
    fwd: &MultiHeadForward,
    upstream: &Matrix,
) -> Result<MultiHeadGrads> {
    if upstream.shape() != fwd.output.shape() {
        return Err(Error::dimension(
            "multi_head_backward",
            fwd.output.shape(),
            upstream.shape(),
        ));
    }
    let d = params.head_dim();
    let d_w_out = matmul_transposed_a(&fwd.concat, upstream)?;
    let d_concat = matmul_transposed_b(upstream, &params.w_out)?;
    let per_head = split_cols(&d_concat, d)?;

    let mut d_x = Matrix::zeros(x.rows(), x.cols());
    let mut heads = Vec::with_capacity(params.heads.len());
    for ((head, cache), g) in params.heads.iter().zip(&fwd.heads).zip(&per_head) {
        let grads = backward_anchor_attention(&cache.anchor, g)?;
        d_x = d_x
            .add(&matmul_transposed_b(&grads.d_k, &head.proj.w_k)?)?
            .add(&matmul_transposed_b(&grads.d_v, &head.proj.w_v)?)?;
        heads.push(HeadParams {
            proj: crate::ProjectionWeights {
                w_q: Matrix::zeros(head.proj.w_q.rows(), head.proj.w_q.cols()),
                w_k: matmul_transposed_a(x, &grads.d_k)?,
                w_v: matmul_transposed_a(x, &grads.d_v)?,
            },
            anchors: AnchorParams { w_s: grads.d_ws },
        });
    }
    if params.share_anchors {
        let mut total = heads[0].anchors.w_s.clone();
        for h in heads.iter_mut().skip(1) {
            total = total.add(&h.anchors.w_s)?;
            h.anchors.w_s = Matrix::zeros(total.rows(), total.cols());
        }
        heads[0].anchors.w_s = total;
    }
    Ok(MultiHeadGrads {
        params: MultiHeadParams {
            heads,
            w_out: d_w_out,
            share_anchors: params.share_anchors,
        },
        d_x,
    })
}

/// Maximum relative error between analytic and central-difference gradients
/// for one named parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct FdCheckReport {
    pub param: String,
    pub max_rel_error: f64,
    /// Flat index of the entry with the largest error.
    pub worst_index: usize,
    pub count: usize,
    pub step: f64,
}

impl FdCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error <= tol
    }
}

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_REL_FLOOR)
}

/// Compares `analytic` against central differences `(L(p+h) - L(p-h)) / 2h`
/// on every entry of every parameter.
pub fn finite_difference_check<P, F>(
    params: &P,
    analytic: &P,
    loss: F,
    step: f64,
) -> Result<Vec<FdCheckReport>>
where
    P: ParamSet + Clone,
    F: Fn(&P) -> Result<f64>,
{
    if !(step >= FD_STEP_RANGE.0 && step <= FD_STEP_RANGE.1) {
        return Err(Error::Argument(format!(
            "finite-difference step {step:e} outside [{:e}, {:e}]",
            FD_STEP_RANGE.0, FD_STEP_RANGE.1
        )));
    }
    let names: Vec<String> = params.params().into_iter().map(|(n, _)| n).collect();
    let grads = analytic.params();
    if grads.len() != names.len() {
        return Err(Error::Argument(
            "parameter and gradient layouts differ".into(),
        ));
    }
    let mut probe = params.clone();
    let mut reports = Vec::with_capacity(names.len());
    for (p_idx, name) in names.iter().enumerate() {
        let grad = grads[p_idx].1;
        let len = probe.params_mut()[p_idx].data().len();
        if grad.data().len() != len {
            return Err(Error::dimension(
                "finite_difference_check",
                probe.params()[p_idx].1.shape(),
                grad.shape(),
            ));
        }
        let mut worst = (0.0, 0usize);
        for idx in 0..len {
            let original = probe.params_mut()[p_idx].data()[idx];
            let eval = |value: f64, probe: &mut P| -> Result<f64> {
                probe.params_mut()[p_idx].data_mut()[idx] = value;
                let l = loss(probe)?;
                if !l.is_finite() {
                    return Err(Error::NumericInput(format!(
                        "loss is {l} when perturbing {name}[{idx}]"
                    )));
                }
                Ok(l)
            };
            let plus = eval(original + step, &mut probe)?;
            let minus = eval(original - step, &mut probe)?;
            probe.params_mut()[p_idx].data_mut()[idx] = original;
            let numeric = (plus - minus) / (2.0 * step);
            let err = relative_error(grad.data()[idx], numeric);
            if err > worst.0 || err.is_nan() {
                worst = (err, idx);
            }
        }
        reports.push(FdCheckReport {
            param: name.clone(),
            max_rel_error: worst.0,
            worst_index: worst.1,
            count: len,
            step,
        });
    }
    Ok(reports)
}

/// Block input together with the block parameters, so finite differences
/// cover `X` as well.
#[derive(Debug, Clone)]
pub struct BlockProbe {
    pub x: Matrix,
    pub params: MultiHeadParams,
}

impl ParamSet for BlockProbe {
    fn params(&self) -> Vec<(String, &Matrix)> {
        let mut out = self.params.params();
        out.push(("X".to_string(), &self.x));
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = self.params.params_mut();
        out.push(&mut self.x);
        out
    }
}

/// Finite-difference check of a multi-head block under the loss
/// `L = sum(weights .* H)`.
pub fn check_multi_head_block(
    x: &Matrix,
    params: &MultiHeadParams,
    weights: &Matrix,
    step: f64,
) -> Result<Vec<FdCheckReport>> {
    let fwd = multi_head_forward(x, params)?;
    let grads = multi_head_backward(x, params, &fwd, weights)?;
    let probe = BlockProbe {
        x: x.clone(),
        params: params.clone(),
    };
    let analytic = BlockProbe {
        x: grads.d_x,
        params: grads.params,
    };
    finite_difference_check(
        &probe,
        &analytic,
        |p| {
            let h = crate::multi_head_attention(&p.x, &p.params)?;
            Ok(h.hadamard(weights)?.sum())
        },
        step,
    )
}
