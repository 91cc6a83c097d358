//! Exact quadratic softmax self-attention, the baseline anchor attention
//! approximates.
//!
//! The query/key index placement follows the standard reading
//! `H = softmax(Q K^T / sqrt(d)) V`: row `t` of `H` is a softmax-weighted
//! average of the rows of `V`, weighted by `q_t . k_i`.

use crate::error::{Error, Result};
use crate::linalg::{matmul, matmul_transposed_b, softmax_rows, Matrix};

/// Per-entry cost charged to a softmax: shift, exp, normalize.
pub const SOFTMAX_FLOPS_PER_ENTRY: u64 = 3;

/// Queries, keys and values for one head, each `n x d`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionInputs {
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
}

impl AttentionInputs {
    pub fn new(q: Matrix, k: Matrix, v: Matrix) -> Result<Self> {
        if q.shape() != k.shape() {
            return Err(Error::dimension(
                "attention inputs (Q vs K)",
                q.shape(),
                k.shape(),
            ));
        }
        if q.shape() != v.shape() {
            return Err(Error::dimension(
                "attention inputs (Q vs V)",
                q.shape(),
                v.shape(),
            ));
        }
        Ok(AttentionInputs { q, k, v })
    }

    pub fn tokens(&self) -> usize {
        self.q.rows()
    }

    pub fn dim(&self) -> usize {
        self.q.cols()
    }
}

/// `W_Q`, `W_K`, `W_V`, each `D x d`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionWeights {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
}

impl ProjectionWeights {
    pub fn new(w_q: Matrix, w_k: Matrix, w_v: Matrix) -> Result<Self> {
        if w_q.shape() != w_k.shape() {
            return Err(Error::dimension(
                "projection weights (W_Q vs W_K)",
                w_q.shape(),
                w_k.shape(),
            ));
        }
        if w_q.shape() != w_v.shape() {
            return Err(Error::dimension(
                "projection weights (W_Q vs W_V)",
                w_q.shape(),
                w_v.shape(),
            ));
        }
        Ok(ProjectionWeights { w_q, w_k, w_v })
    }

    pub fn input_dim(&self) -> usize {
        self.w_q.rows()
    }

    pub fn head_dim(&self) -> usize {
        self.w_q.cols()
    }
}

pub fn project_tokens(x: &Matrix, w: &ProjectionWeights) -> Result<AttentionInputs> {
    Ok(AttentionInputs {
        q: matmul(x, &w.w_q)?,
        k: matmul(x, &w.w_k)?,
        v: matmul(x, &w.w_v)?,
    })
}

/// Softmax attention weights `softmax(Q K^T / sqrt(d))`, `n x n`.
pub fn attention_weights(inp: &AttentionInputs) -> Result<Matrix> {
    let scale = 1.0 / (inp.dim() as f64).sqrt();
    softmax_rows(&matmul_transposed_b(&inp.q, &inp.k)?, scale)
}

pub fn vanilla_attention(inp: &AttentionInputs) -> Result<Matrix> {
    matmul(&attention_weights(inp)?, &inp.v)
}

/// Closed-form FLOP count of [`vanilla_attention`]: `2n^2d` for `QK^T`,
/// three per score for the softmax and `2n^2d` for the weighted sum.
pub fn vanilla_flops(n: u64, d: u64) -> u64 {
    let nn = n * n;
    2 * nn * d + SOFTMAX_FLOPS_PER_ENTRY * nn + 2 * nn * d
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeded_rng;

    fn random_inputs(n: usize, d: usize, seed: u64) -> AttentionInputs {
        let mut rng = seeded_rng(seed);
        AttentionInputs::new(
            Matrix::random_normal(n, d, 1.0, &mut rng),
            Matrix::random_normal(n, d, 1.0, &mut rng),
            Matrix::random_normal(n, d, 1.0, &mut rng),
        )
        .unwrap()
    }

    // Row-by-row weighted sum of values, coded without any matrix helper.
    fn per_row_oracle(inp: &AttentionInputs) -> Matrix {
        let (n, d) = (inp.tokens(), inp.dim());
        let s = (d as f64).sqrt();
        Matrix::from_fn(n, d, |t, c| {
            let logits: Vec<f64> = (0..n)
                .map(|i| {
                    (0..d)
                        .map(|k| inp.q.get(t, k) * inp.k.get(i, k))
                        .sum::<f64>()
                        / s
                })
                .collect();
            let mx = logits.iter().cloned().fold(f64::MIN, f64::max);
            let w: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
            let z: f64 = w.iter().sum();
            (0..n).map(|i| w[i] / z * inp.v.get(i, c)).sum()
        })
    }

    #[test]
    fn projection_identity_and_zero() {
        let x = Matrix::from_rows(&[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0], [7.0, 8.0, 10.0]]).unwrap();
        let i3 = Matrix::identity(3);
        let w = ProjectionWeights::new(i3.clone(), i3.clone(), i3).unwrap();
        let p = project_tokens(&x, &w).unwrap();
        assert_eq!((&p.q, &p.k, &p.v), (&x, &x, &x));
        let z = project_tokens(&Matrix::zeros(3, 3), &w).unwrap();
        assert_eq!(z.q.max_abs() + z.k.max_abs() + z.v.max_abs(), 0.0);
    }

    #[test]
    fn projection_equals_independent_matmuls() {
        let mut rng = seeded_rng(21);
        let x = Matrix::random_normal(4, 3, 1.0, &mut rng);
        let ws: Vec<Matrix> = (0..3)
            .map(|_| Matrix::random_normal(3, 2, 1.0, &mut rng))
            .collect();
        let w = ProjectionWeights::new(ws[0].clone(), ws[1].clone(), ws[2].clone()).unwrap();
        let p = project_tokens(&x, &w).unwrap();
        assert_eq!(p.q, matmul(&x, &ws[0]).unwrap());
        assert_eq!(p.k, matmul(&x, &ws[1]).unwrap());
        assert_eq!(p.v, matmul(&x, &ws[2]).unwrap());
        assert!(project_tokens(&Matrix::zeros(4, 2), &w).is_err());
    }

    #[test]
    fn single_token_attends_to_itself() {
        let inp = AttentionInputs::new(
            Matrix::from_rows(&[[0.3, -2.0]]).unwrap(),
            Matrix::from_rows(&[[1.5, 4.0]]).unwrap(),
            Matrix::from_rows(&[[5.0, 7.0]]).unwrap(),
        )
        .unwrap();
        assert_eq!(vanilla_attention(&inp).unwrap(), inp.v);
    }

    #[test]
    fn zero_queries_give_value_mean() {
        let mut inp = random_inputs(6, 3, 2);
        inp.q = Matrix::zeros(6, 3);
        let h = vanilla_attention(&inp).unwrap();
        let mean = inp.v.col_means();
        for i in 0..6 {
            for c in 0..3 {
                assert!((h.get(i, c) - mean.get(0, c)).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn matches_per_row_summation() {
        let inp = random_inputs(3, 2, 4);
        let diff = vanilla_attention(&inp)
            .unwrap()
            .max_abs_diff(&per_row_oracle(&inp))
            .unwrap();
        assert!(diff <= 1e-12, "{diff}");
        let inp = random_inputs(17, 5, 5);
        assert!(
            vanilla_attention(&inp)
                .unwrap()
                .max_abs_diff(&per_row_oracle(&inp))
                .unwrap()
                <= 1e-12
        );
    }

    #[test]
    fn mismatched_inputs_rejected() {
        assert!(AttentionInputs::new(
            Matrix::zeros(3, 2),
            Matrix::zeros(3, 2),
            Matrix::zeros(2, 2)
        )
        .is_err());
    }

    #[test]
    fn output_in_convex_hull_of_values() {
        for seed in 0..20 {
            let inp = random_inputs(1 + seed as usize % 13, 3, seed);
            let h = vanilla_attention(&inp).unwrap();
            for c in 0..3 {
                let col: Vec<f64> = (0..inp.tokens()).map(|i| inp.v.get(i, c)).collect();
                let lo = col.iter().cloned().fold(f64::MAX, f64::min);
                let hi = col.iter().cloned().fold(f64::MIN, f64::max);
                for i in 0..inp.tokens() {
                    assert!(h.get(i, c) >= lo - 1e-12 && h.get(i, c) <= hi + 1e-12);
                }
            }
        }
    }

    #[test]
    fn permutation_equivariance() {
        let inp = random_inputs(7, 3, 8);
        let h = vanilla_attention(&inp).unwrap();
        let perm = [3, 0, 6, 1, 5, 2, 4];
        let permuted_q = AttentionInputs {
            q: inp.q.permute_rows(&perm),
            ..inp.clone()
        };
        let hq = vanilla_attention(&permuted_q).unwrap();
        assert!(hq.max_abs_diff(&h.permute_rows(&perm)).unwrap() <= 1e-12);
        let permuted_kv = AttentionInputs {
            q: inp.q.clone(),
            k: inp.k.permute_rows(&perm),
            v: inp.v.permute_rows(&perm),
        };
        assert!(
            vanilla_attention(&permuted_kv)
                .unwrap()
                .max_abs_diff(&h)
                .unwrap()
                <= 1e-12
        );
    }

    #[test]
    fn one_dim_is_plain_softmax_average() {
        let q = Matrix::from_rows(&[[0.5], [-1.0]]).unwrap();
        let k = Matrix::from_rows(&[[2.0], [1.0]]).unwrap();
        let v = Matrix::from_rows(&[[10.0], [20.0]]).unwrap();
        let h = vanilla_attention(&AttentionInputs::new(q, k, v).unwrap()).unwrap();
        let avg = |qv: f64| {
            let (a, b) = ((qv * 2.0f64).exp(), (qv * 1.0f64).exp());
            (a * 10.0 + b * 20.0) / (a + b)
        };
        assert!((h.get(0, 0) - avg(0.5)).abs() < 1e-13);
        assert!((h.get(1, 0) - avg(-1.0)).abs() < 1e-13);
    }

    #[test]
    fn flop_closed_form() {
        assert_eq!(vanilla_flops(1, 1), 7);
        for n in [3u64, 10, 128] {
            assert_eq!(vanilla_flops(2 * n, 64), 4 * vanilla_flops(n, 64));
        }
    }
}
