//! Exact maximum-score one-to-one assignment.

use crate::tensor::Matrix;

/// Tolerance under which two assignment totals count as tied.
const TIE_TOL: f64 = 1e-9;

/// `rows[i] = Some(j)` when row `i` is matched to column `j`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Assignment {
    pub rows: Vec<Option<usize>>,
}

impl Assignment {
    /// `(row, column)` pairs in row order.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        self.rows
            .iter()
            .enumerate()
            .filter_map(|(i, c)| c.map(|c| (i, c)))
            .collect()
    }

    /// Column matched to row `i`, if any.
    pub fn column_of(&self, i: usize) -> Option<usize> {
        self.rows.get(i).copied().flatten()
    }
}

/// Summed score of the matched pairs.
pub fn assignment_score(score: &Matrix, a: &Assignment) -> f64 {
    a.pairs().into_iter().map(|(i, j)| score.get(i, j)).sum()
}

/// Minimum-cost perfect matching on a square cost table (Kuhn–Munkres with
/// potentials). Returns the column of each row and the total.
fn hungarian_min(cost: &[f64], n: usize) -> (Vec<usize>, f64) {
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut col_of = vec![0usize; n];
    for j in 1..=n {
        if p[j] > 0 {
            col_of[p[j] - 1] = j - 1;
        }
    }
    let total = (0..n).map(|i| cost[i * n + col_of[i]]).sum();
    (col_of, total)
}

/// Best total over the rows and columns not yet fixed.
fn best_rest(score: &[f64], n: usize, free_rows: &[usize], free_cols: &[usize]) -> f64 {
    let m = free_rows.len();
    if m == 0 {
        return 0.0;
    }
    let cost: Vec<f64> = free_rows
        .iter()
        .flat_map(|&i| free_cols.iter().map(move |&j| -score[i * n + j]))
        .collect();
    -hungarian_min(&cost, m).1
}

/// Matches each of the K rows to at most one of the C columns so that the
/// summed score is maximal. Among optimal matchings the lowest row takes the
/// lowest column it can, then the next row, and so on.
pub fn assign_classes(score: &Matrix) -> Assignment {
    let (k, c) = score.shape();
    let n = k.max(c);
    let mut padded = vec![0.0; n * n];
    for i in 0..k {
        padded[i * n..i * n + c].copy_from_slice(score.row(i));
    }
    let all: Vec<usize> = (0..n).collect();
    let optimum = best_rest(&padded, n, &all, &all);

    let mut free_cols = all.clone();
    let mut fixed_total = 0.0;
    let mut col_of = vec![0usize; n];
    for i in 0..n {
        let rest_rows: Vec<usize> = (i + 1..n).collect();
        let choice = free_cols
            .iter()
            .copied()
            .find(|&j| {
                let cols: Vec<usize> = free_cols.iter().copied().filter(|&x| x != j).collect();
                let total = fixed_total + padded[i * n + j] + best_rest(&padded, n, &rest_rows, &cols);
                total >= optimum - TIE_TOL
            })
            .unwrap_or(free_cols[0]);
        fixed_total += padded[i * n + choice];
        col_of[i] = choice;
        free_cols.retain(|&x| x != choice);
    }
    Assignment {
        rows: (0..k).map(|i| (col_of[i] < c).then_some(col_of[i])).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn permutations(n: usize) -> Vec<Vec<usize>> {
        if n == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in permutations(n - 1) {
            for pos in 0..=p.len() {
                let mut q = p.clone();
                q.insert(pos, n - 1);
                out.push(q);
            }
        }
        out
    }

    #[test]
    fn identity_scores() {
        let a = assign_classes(&Matrix::identity(4));
        assert_eq!(a.rows, vec![Some(0), Some(1), Some(2), Some(3)]);
    }

    #[test]
    fn permutation_scores() {
        let perm = [2usize, 0, 3, 1];
        let m = Matrix::from_fn(4, 4, |i, j| (perm[i] == j) as u8 as f64);
        let a = assign_classes(&m);
        assert_eq!(a.rows, perm.iter().map(|&j| Some(j)).collect::<Vec<_>>());
    }

    #[test]
    fn ties_prefer_low_columns_for_low_rows() {
        let a = assign_classes(&Matrix::filled(3, 3, 1.0));
        assert_eq!(a.rows, vec![Some(0), Some(1), Some(2)]);
        let b = assign_classes(&Matrix::zeros(2, 4));
        assert_eq!(b.rows, vec![Some(0), Some(1)]);
    }

    #[test]
    fn rectangular_inputs() {
        let tall = Matrix::from_rows(&[vec![0.1, 0.9], vec![0.8, 0.2], vec![0.95, 0.0]]).unwrap();
        let a = assign_classes(&tall);
        assert_eq!(a.rows, vec![Some(1), None, Some(0)]);
        let wide = tall.transpose();
        let b = assign_classes(&wide);
        assert_eq!(b.rows, vec![Some(2), Some(0)]);
        assert_eq!(a.pairs().len(), 2);
    }

    #[test]
    fn exhaustive_oracle_5x5() {
        let perms = permutations(5);
        assert_eq!(perms.len(), 120);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let m = Matrix::random_uniform(5, 5, 1.0, &mut rng);
            let best = perms
                .iter()
                .map(|p| (0..5).map(|i| m.get(i, p[i])).sum::<f64>())
                .fold(f64::NEG_INFINITY, f64::max);
            let got = assignment_score(&m, &assign_classes(&m));
            assert!((got - best).abs() < 1e-12, "{got} vs {best}");
        }
    }

    proptest! {
        #[test]
        fn beats_greedy(k in 1usize..6, c in 1usize..6, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = Matrix::random_uniform(k, c, 1.0, &mut rng);
            let a = assign_classes(&m);
            prop_assert_eq!(a.pairs().len(), k.min(c));
            let mut cols: Vec<usize> = a.pairs().iter().map(|p| p.1).collect();
            cols.sort();
            cols.dedup();
            prop_assert_eq!(cols.len(), k.min(c));
            let mut taken = vec![false; c];
            let mut greedy = 0.0;
            for i in 0..k {
                if let Some(j) = (0..c).filter(|&j| !taken[j]).max_by(|&x, &y| m.get(i, x).total_cmp(&m.get(i, y))) {
                    taken[j] = true;
                    greedy += m.get(i, j);
                }
            }
            prop_assert!(assignment_score(&m, &a) >= greedy - 1e-12);
        }
    }
}
