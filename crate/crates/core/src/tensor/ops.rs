//! Value-level numerics shared by the differentiable graph and by code that
//! only needs forward values (targets, inference).

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Axis a normalization runs along.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    /// Each row is normalized (sum over columns).
    Rows,
    /// Each column is normalized (sum over rows).
    Cols,
}

/// Rows below this norm are rejected by [`l2_normalize_rows`].
pub const MIN_ROW_NORM: f64 = 1e-12;
/// Probabilities are clamped to this floor before taking the log.
pub const LOG_CLAMP: f64 = 1e-12;

/// Temperature-scaled, max-stabilized softmax along `axis`.
pub fn softmax(m: &Matrix, axis: Axis, tau: f64) -> Result<Matrix> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::Config(format!("softmax temperature must be positive, got {tau}")));
    }
    Ok(match axis {
        Axis::Rows => softmax_rows_unchecked(m, tau),
        Axis::Cols => softmax_rows_unchecked(&m.transpose(), tau).transpose(),
    })
}

pub(crate) fn softmax_rows_unchecked(m: &Matrix, tau: f64) -> Matrix {
    let mut out = m.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = ((*v - max) / tau).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}

/// Scales every row to unit Euclidean norm.
pub fn l2_normalize_rows(m: &Matrix) -> Result<Matrix> {
    let mut out = m.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm <= MIN_ROW_NORM {
            return Err(Error::DegenerateRow {
                op: "l2_normalize_rows",
                row: i,
            });
        }
        for v in row.iter_mut() {
            *v /= norm;
        }
    }
    Ok(out)
}

/// Mean over rows of `-Σ_j q_ij log p_ij`, with `p` clamped below at [`LOG_CLAMP`].
pub fn cross_entropy_rows(p: &Matrix, q: &Matrix) -> Result<f64> {
    if p.shape() != q.shape() {
        return Err(Error::shape("cross_entropy_rows", p.shape(), q.shape()));
    }
    let total: f64 = p
        .data()
        .iter()
        .zip(q.data())
        .filter(|(_, &t)| t != 0.0)
        .map(|(&pv, &t)| -t * pv.max(LOG_CLAMP).ln())
        .sum();
    Ok(total / p.rows() as f64)
}

/// Per-row standardization followed by an affine map. `gain` and `bias` are
/// 1×cols rows.
pub fn layer_norm_rows(m: &Matrix, gain: &Matrix, bias: &Matrix, eps: f64) -> Result<Matrix> {
    if gain.shape() != (1, m.cols()) {
        return Err(Error::shape("layer_norm_rows", m.shape(), gain.shape()));
    }
    if bias.shape() != (1, m.cols()) {
        return Err(Error::shape("layer_norm_rows", m.shape(), bias.shape()));
    }
    if !(eps > 0.0) {
        return Err(Error::Config(format!("layer norm epsilon must be positive, got {eps}")));
    }
    Ok(layer_norm_parts(m, gain, bias, eps).0)
}

/// Returns (output, standardized input, 1/std per row).
pub(crate) fn layer_norm_parts(
    m: &Matrix,
    gain: &Matrix,
    bias: &Matrix,
    eps: f64,
) -> (Matrix, Matrix, Vec<f64>) {
    let cols = m.cols() as f64;
    let mut xhat = m.clone();
    let mut inv_std = Vec::with_capacity(m.rows());
    for i in 0..m.rows() {
        let row = xhat.row_mut(i);
        let mean = row.iter().sum::<f64>() / cols;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols;
        let r = 1.0 / (var + eps).sqrt();
        for v in row.iter_mut() {
            *v = (*v - mean) * r;
        }
        inv_std.push(r);
    }
    let mut out = xhat.clone();
    for i in 0..out.rows() {
        for (j, v) in out.row_mut(i).iter_mut().enumerate() {
            *v = *v * gain.data()[j] + bias.data()[j];
        }
    }
    (out, xhat, inv_std)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn mat(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn softmax_constant_row_is_uniform() {
        let m = mat(&[&[3.0, 3.0, 3.0, 3.0]]);
        for tau in [0.05, 1.0, 7.0] {
            let s = softmax(&m, Axis::Rows, tau).unwrap();
            for &v in s.data() {
                assert!((v - 0.25).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn softmax_two_entry_closed_form() {
        let (a, c) = (0.3, 1.7);
        let s = softmax(&mat(&[&[a, a + c]]), Axis::Rows, 1.0).unwrap();
        let e = c.exp();
        assert!((s.get(0, 0) - 1.0 / (1.0 + e)).abs() < 1e-15);
        assert!((s.get(0, 1) - e / (1.0 + e)).abs() < 1e-15);
    }

    #[test]
    fn softmax_matches_direct_exponentials() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = Matrix::random_normal(4, 5, 0.1, &mut rng);
        let tau = 0.1;
        let got = softmax(&m, Axis::Rows, tau).unwrap();
        for i in 0..4 {
            let denom: f64 = m.row(i).iter().map(|v| (v / tau).exp()).sum();
            for j in 0..5 {
                let want = (m.get(i, j) / tau).exp() / denom;
                assert!((got.get(i, j) - want).abs() < 1e-14);
            }
        }
        let cols = softmax(&m, Axis::Cols, tau).unwrap();
        for j in 0..5 {
            let denom: f64 = (0..4).map(|i| (m.get(i, j) / tau).exp()).sum();
            for i in 0..4 {
                assert!((cols.get(i, j) - (m.get(i, j) / tau).exp() / denom).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn softmax_rejects_nonpositive_temperature() {
        let m = mat(&[&[1.0, 2.0]]);
        assert!(matches!(softmax(&m, Axis::Rows, 0.0), Err(Error::Config(_))));
        assert!(matches!(softmax(&m, Axis::Rows, -1.0), Err(Error::Config(_))));
    }

    #[test]
    fn l2_normalize_cases() {
        let unit = mat(&[&[0.0, 1.0, 0.0]]);
        assert_eq!(l2_normalize_rows(&unit).unwrap(), unit);
        let n = l2_normalize_rows(&mat(&[&[3.0, 4.0]])).unwrap();
        assert!((n.get(0, 0) - 0.6).abs() < 1e-15 && (n.get(0, 1) - 0.8).abs() < 1e-15);
        let err = l2_normalize_rows(&mat(&[&[1.0, 0.0], &[0.0, 0.0]])).unwrap_err();
        assert!(matches!(err, Error::DegenerateRow { row: 1, .. }));
    }

    #[test]
    fn cross_entropy_cases() {
        let i = Matrix::identity(3);
        assert_eq!(cross_entropy_rows(&i, &i).unwrap(), 0.0);
        let p = mat(&[&[0.5, 0.5]]);
        let q = mat(&[&[0.0, 1.0]]);
        assert!((cross_entropy_rows(&p, &q).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(cross_entropy_rows(&p, &i).is_err());
    }

    #[test]
    fn cross_entropy_matches_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = softmax(&Matrix::random_normal(5, 4, 1.0, &mut rng), Axis::Rows, 1.0).unwrap();
        let q = softmax(&Matrix::random_normal(5, 4, 1.0, &mut rng), Axis::Rows, 1.0).unwrap();
        let mut want = 0.0;
        for i in 0..5 {
            for j in 0..4 {
                want -= q.get(i, j) * p.get(i, j).ln();
            }
        }
        want /= 5.0;
        assert!((cross_entropy_rows(&p, &q).unwrap() - want).abs() < 1e-14);
    }

    #[test]
    fn layer_norm_cases() {
        let gain = mat(&[&[2.0, 3.0, 4.0]]);
        let bias = mat(&[&[0.1, 0.2, 0.3]]);
        let out = layer_norm_rows(&mat(&[&[5.0, 5.0, 5.0]]), &gain, &bias, 1e-5).unwrap();
        assert!(out.max_abs_diff(&bias) < 1e-12);

        let ones = mat(&[&[1.0, 1.0]]);
        let zeros = mat(&[&[0.0, 0.0]]);
        let out = layer_norm_rows(&mat(&[&[-1.0, 1.0]]), &ones, &zeros, 1e-5).unwrap();
        let r = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((out.get(0, 0) + r).abs() < 1e-15 && (out.get(0, 1) - r).abs() < 1e-15);

        assert!(layer_norm_rows(&mat(&[&[1.0, 2.0, 3.0]]), &ones, &zeros, 1e-5).is_err());
    }

    #[test]
    fn layer_norm_matches_two_pass_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = Matrix::random_normal(3, 6, 2.0, &mut rng);
        let gain = Matrix::random_normal(1, 6, 1.0, &mut rng);
        let bias = Matrix::random_normal(1, 6, 1.0, &mut rng);
        let got = layer_norm_rows(&m, &gain, &bias, 1e-5).unwrap();
        for i in 0..3 {
            let row = m.row(i);
            let mean = row.iter().sum::<f64>() / 6.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 6.0;
            for j in 0..6 {
                let want = (row[j] - mean) / (var + 1e-5).sqrt() * gain.get(0, j) + bias.get(0, j);
                assert!((got.get(i, j) - want).abs() < 1e-12);
            }
        }
    }

    fn small_matrix() -> impl Strategy<Value = Matrix> {
        (1usize..6, 1usize..6).prop_flat_map(|(r, c)| {
            prop::collection::vec(-5.0f64..5.0, r * c).prop_map(move |d| Matrix::new(r, c, d).unwrap())
        })
    }

    proptest! {
        #[test]
        fn softmax_slices_sum_to_one(m in small_matrix(), tau in 0.05f64..3.0, shift in -50.0f64..50.0) {
            let s = softmax(&m, Axis::Rows, tau).unwrap();
            for row in s.iter_rows() {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
            let shifted = softmax(&m.map(|v| v + shift), Axis::Rows, tau).unwrap();
            prop_assert!(shifted.max_abs_diff(&s) <= 1e-12);
            prop_assert_eq!(shifted.argmax_rows(), s.argmax_rows());
            let c = softmax(&m, Axis::Cols, tau).unwrap();
            for v in c.column_sums().data() {
                prop_assert!((v - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn normalized_rows_have_unit_norm(m in small_matrix()) {
            prop_assume!(m.iter_rows().all(|r| r.iter().map(|v| v * v).sum::<f64>() > 1e-6));
            let n = l2_normalize_rows(&m).unwrap();
            for row in n.iter_rows() {
                prop_assert!((row.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn cross_entropy_gibbs(a in small_matrix(), seed in 0u64..1000) {
            let p = softmax(&a, Axis::Rows, 1.0).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let q = softmax(&Matrix::random_normal(a.rows(), a.cols(), 2.0, &mut rng), Axis::Rows, 1.0).unwrap();
            let self_ce = cross_entropy_rows(&p, &p).unwrap();
            let other = cross_entropy_rows(&q, &p).unwrap();
            prop_assert!(self_ce <= other + 1e-12);
        }
    }
}
