//! Slice-based attention kernels generic over [`Scalar`], used for timing
//! (`f64`/`f32`) and for FLOP instrumentation ([`Counted`](super::Counted)).
//! They follow the same arithmetic as the `Matrix` implementations and are
//! checked against them in tests.

use super::flops::Scalar;

/// `out[i, j] = sum_c a[i, c] * b[j, c]`, accumulated from zero.
fn dot_rows<T: Scalar>(a: &[T], b: &[T], rows_a: usize, rows_b: usize, d: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(rows_a * rows_b);
    for i in 0..rows_a {
        let ai = &a[i * d..(i + 1) * d];
        for j in 0..rows_b {
            let bj = &b[j * d..(j + 1) * d];
            let mut acc = T::zero();
            for c in 0..d {
                acc = acc + ai[c] * bj[c];
            }
            out.push(acc);
        }
    }
    out
}

/// In-place stabilized row softmax of `scale * x`.
fn softmax_rows<T: Scalar>(x: &mut [T], cols: usize, scale: T) {
    for row in x.chunks_mut(cols) {
        let mut max = row[0];
        for &v in row.iter() {
            if v > max {
                max = v;
            }
        }
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).rescale(scale).exp();
            sum = sum.accumulate(*v);
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
}

/// `out = p * v` for `p: rows x inner`, `v: inner x d`, i-k-j order.
fn weighted_sum<T: Scalar>(p: &[T], v: &[T], rows: usize, inner: usize, d: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * d];
    for i in 0..rows {
        let out_row = &mut out[i * d..(i + 1) * d];
        for k in 0..inner {
            let w = p[i * inner + k];
            let vk = &v[k * d..(k + 1) * d];
            for c in 0..d {
                out_row[c] = out_row[c] + w * vk[c];
            }
        }
    }
    out
}

fn scale_for<T: Scalar>(d: usize) -> T {
    T::from_f64(1.0 / (d as f64).sqrt())
}

/// `softmax(Q K^T / sqrt(d)) V`; allocates one `n x n` score buffer.
pub fn vanilla<T: Scalar>(q: &[T], k: &[T], v: &[T], n: usize, d: usize) -> Vec<T> {
    let mut scores = dot_rows(q, k, n, n, d);
    softmax_rows(&mut scores, n, scale_for(d));
    weighted_sum(&scores, v, n, n, d)
}

/// Affinity `A` (`n x m`) and column masses.
fn affinity<T: Scalar>(k: &[T], ws: &[T], n: usize, m: usize, d: usize) -> (Vec<T>, Vec<T>) {
    let mut a = dot_rows(k, ws, n, m, d);
    softmax_rows(&mut a, m, scale_for(d));
    let mut delta = vec![T::zero(); m];
    for row in a.chunks(m) {
        for (s, &x) in delta.iter_mut().zip(row) {
            *s = s.accumulate(x);
        }
    }
    (a, delta)
}

/// `A (diag(delta)^-1 (A^T V))` with no `n x n` intermediate.
pub fn anchor_fast<T: Scalar>(k: &[T], v: &[T], ws: &[T], n: usize, m: usize, d: usize) -> Vec<T> {
    let (a, delta) = affinity(k, ws, n, m, d);
    let mut m1 = vec![T::zero(); m * d];
    for i in 0..n {
        let vi = &v[i * d..(i + 1) * d];
        for j in 0..m {
            let w = a[i * m + j];
            let row = &mut m1[j * d..(j + 1) * d];
            for c in 0..d {
                row[c] = row[c] + w * vi[c];
            }
        }
    }
    for (j, row) in m1.chunks_mut(d).enumerate() {
        for x in row.iter_mut() {
            *x = *x / delta[j];
        }
    }
    weighted_sum(&a, &m1, n, m, d)
}

/// `(A diag(delta)^-1 A^T) V` with `S_t` materialized.
pub fn anchor_explicit<T: Scalar>(
    k: &[T],
    v: &[T],
    ws: &[T],
    n: usize,
    m: usize,
    d: usize,
) -> Vec<T> {
    let (a, delta) = affinity(k, ws, n, m, d);
    let mut scaled = a.clone();
    for row in scaled.chunks_mut(m) {
        for (x, &w) in row.iter_mut().zip(&delta) {
            *x = *x / w;
        }
    }
    let s_t = dot_rows(&scaled, &a, n, n, m);
    weighted_sum(&s_t, v, n, n, d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::flops::{
        anchor_explicit_flops, anchor_flops, count_ops, vanilla_flops, Counted,
    };
    use crate::{anchor_affinity, seeded_rng, AnchorParams, AttentionInputs, Matrix};

    fn counted(x: &[f64]) -> Vec<Counted> {
        x.iter().map(|&v| Counted(v)).collect()
    }

    fn inputs(n: usize, m: usize, d: usize, seed: u64) -> (Matrix, Matrix, Matrix, Matrix) {
        let mut rng = seeded_rng(seed);
        (
            Matrix::random_normal(n, d, 1.0, &mut rng),
            Matrix::random_normal(n, d, 1.0, &mut rng),
            Matrix::random_normal(n, d, 1.0, &mut rng),
            Matrix::random_normal(m, d, 1.0, &mut rng),
        )
    }

    #[test]
    fn kernels_match_matrix_implementations() {
        for (n, m, d) in [(1, 1, 1), (9, 3, 4), (33, 40, 5)] {
            let (q, k, v, ws) = inputs(n, m, d, n as u64);
            let inp = AttentionInputs::new(q.clone(), k.clone(), v.clone()).unwrap();
            let h = vanilla(q.data(), k.data(), v.data(), n, d);
            let want = crate::vanilla_attention(&inp).unwrap();
            assert!(Matrix::new(n, d, h).unwrap().max_abs_diff(&want).unwrap() <= 1e-12);

            let state = anchor_affinity(&AnchorParams::new(ws.clone()).unwrap(), &k).unwrap();
            let fast = anchor_fast(k.data(), v.data(), ws.data(), n, m, d);
            let want = crate::anchor_attention_fast(&state, &v).unwrap();
            assert!(
                Matrix::new(n, d, fast)
                    .unwrap()
                    .max_abs_diff(&want)
                    .unwrap()
                    <= 1e-12
            );
            let explicit = anchor_explicit(k.data(), v.data(), ws.data(), n, m, d);
            assert!(
                Matrix::new(n, d, explicit)
                    .unwrap()
                    .max_abs_diff(&want)
                    .unwrap()
                    <= 1e-12
            );
        }
    }

    #[test]
    fn f32_kernels_track_f64() {
        let (n, m, d) = (50, 6, 8);
        let (_, k, v, ws) = inputs(n, m, d, 77);
        let to32 = |x: &Matrix| x.data().iter().map(|&v| v as f32).collect::<Vec<_>>();
        let h32 = anchor_fast(&to32(&k), &to32(&v), &to32(&ws), n, m, d);
        let h64 = anchor_fast(k.data(), v.data(), ws.data(), n, m, d);
        for (a, b) in h32.iter().zip(&h64) {
            assert!((*a as f64 - b).abs() < 1e-4);
        }
    }

    #[test]
    fn instrumented_counts_equal_closed_forms() {
        for (n, m, d) in [(1, 1, 1), (5, 2, 3), (128, 16, 32)] {
            let (q, k, v, ws) = inputs(n, m, d, 3);
            let (q, k, v, ws) = (
                counted(q.data()),
                counted(k.data()),
                counted(v.data()),
                counted(ws.data()),
            );
            let (_, t) = count_ops(|| anchor_fast(&k, &v, &ws, n, m, d));
            assert_eq!(
                t.flops,
                anchor_flops(n as u64, m as u64, d as u64),
                "fast {n} {m} {d}"
            );
            let (_, t) = count_ops(|| anchor_explicit(&k, &v, &ws, n, m, d));
            assert_eq!(t.flops, anchor_explicit_flops(n as u64, m as u64, d as u64));
            if n <= 5 {
                let (_, t) = count_ops(|| vanilla(&q, &k, &v, n, d));
                assert_eq!(t.flops, vanilla_flops(n as u64, d as u64));
            }
        }
        let (n, d) = (128, 64);
        let (q, k, v, _) = inputs(n, 1, d, 4);
        let (_, t) = count_ops(|| {
            vanilla(
                &counted(q.data()),
                &counted(k.data()),
                &counted(v.data()),
                n,
                d,
            )
        });
        assert_eq!(t.flops, vanilla_flops(128, 64));
    }
}
