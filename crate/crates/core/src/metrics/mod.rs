//! Evaluation metrics and matching.

mod assignment;
mod kmeans;
mod report;

pub use assignment::{assign_classes, assignment_score, Assignment};
pub use kmeans::{distortion, kmeans, KMeans, KMEANS_MAX_ITERS, KMEANS_TOL};
pub use report::{EvalReport, ImageRow};

use crate::error::{Error, Result};

/// Per-cell class ids with an optional ignore mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub labels: Vec<u32>,
    pub ignore: Option<Vec<bool>>,
}

impl LabelMap {
    pub fn new(labels: Vec<u32>) -> Self {
        LabelMap { labels, ignore: None }
    }

    pub fn with_ignore(labels: Vec<u32>, ignore: Vec<bool>) -> Result<Self> {
        if ignore.len() != labels.len() {
            return Err(Error::shape("LabelMap", (labels.len(), 1), (ignore.len(), 1)));
        }
        Ok(LabelMap {
            labels,
            ignore: Some(ignore),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn is_ignored(&self, i: usize) -> bool {
        self.ignore.as_ref().is_some_and(|m| m[i])
    }

    /// Binary mask of cells carrying `class`, ignored cells excluded.
    pub fn mask_of(&self, class: u32) -> Vec<bool> {
        (0..self.len()).map(|i| !self.is_ignored(i) && self.labels[i] == class).collect()
    }
}

fn check_len(op: &'static str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::shape(op, (a, 1), (b, 1)));
    }
    Ok(())
}

fn overlap(pred: &[bool], gt: &[bool]) -> (usize, usize, usize) {
    let mut inter = 0;
    let mut p = 0;
    let mut g = 0;
    for (&a, &b) in pred.iter().zip(gt) {
        inter += (a && b) as usize;
        p += a as usize;
        g += b as usize;
    }
    (inter, p, g)
}

/// Intersection over union; 1 when both masks are empty.
pub fn miou(pred: &[bool], gt: &[bool]) -> Result<f64> {
    check_len("miou", pred.len(), gt.len())?;
    let (inter, p, g) = overlap(pred, gt);
    let union = p + g - inter;
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Dice coefficient; 1 when both masks are empty.
pub fn dice(pred: &[bool], gt: &[bool]) -> Result<f64> {
    check_len("dice", pred.len(), gt.len())?;
    let (inter, p, g) = overlap(pred, gt);
    Ok(if p + g == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (p + g) as f64
    })
}

fn choose2(n: usize) -> f64 {
    let n = n as f64;
    n * (n - 1.0) / 2.0
}

fn compact(labels: impl Iterator<Item = u32>) -> (Vec<usize>, usize) {
    let mut ids = std::collections::BTreeMap::new();
    let out = labels
        .map(|l| {
            let next = ids.len();
            *ids.entry(l).or_insert(next)
        })
        .collect();
    (out, ids.len())
}

/// Adjusted Rand index between `pred` and `gt` over the cells where `fg` is
/// set (and neither map marks the cell ignored).
pub fn ari_fg(pred: &LabelMap, gt: &LabelMap, fg: &[bool]) -> Result<f64> {
    check_len("ari_fg", pred.len(), gt.len())?;
    check_len("ari_fg", fg.len(), gt.len())?;
    let cells: Vec<usize> = (0..fg.len())
        .filter(|&i| fg[i] && !pred.is_ignored(i) && !gt.is_ignored(i))
        .collect();
    if cells.is_empty() {
        return Err(Error::UndefinedMetric("ARI-FG over an empty foreground"));
    }
    let (p, kp) = compact(cells.iter().map(|&i| pred.labels[i]));
    let (g, kg) = compact(cells.iter().map(|&i| gt.labels[i]));
    let mut table = vec![0usize; kp * kg];
    let mut rows = vec![0usize; kp];
    let mut cols = vec![0usize; kg];
    for (&a, &b) in p.iter().zip(&g) {
        table[a * kg + b] += 1;
        rows[a] += 1;
        cols[b] += 1;
    }
    let index: f64 = table.iter().map(|&n| choose2(n)).sum();
    let sum_rows: f64 = rows.iter().map(|&n| choose2(n)).sum();
    let sum_cols: f64 = cols.iter().map(|&n| choose2(n)).sum();
    let total = choose2(cells.len());
    let expected = if total > 0.0 { sum_rows * sum_cols / total } else { 0.0 };
    let max = 0.5 * (sum_rows + sum_cols);
    // The denominator vanishes only when both partitions are all-one-cluster
    // or all-singletons, in which case they coincide.
    if max - expected == 0.0 {
        return Ok(1.0);
    }
    Ok((index - expected) / (max - expected))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Pair-counting oracle: 2(ad − bc) / ((a+b)(b+d) + (a+c)(c+d)).
    fn ari_pairs(pred: &[u32], gt: &[u32]) -> f64 {
        let (mut a, mut b, mut c, mut d) = (0f64, 0f64, 0f64, 0f64);
        for i in 0..pred.len() {
            for j in i + 1..pred.len() {
                match (pred[i] == pred[j], gt[i] == gt[j]) {
                    (true, true) => a += 1.0,
                    (true, false) => b += 1.0,
                    (false, true) => c += 1.0,
                    (false, false) => d += 1.0,
                }
            }
        }
        let den = (a + b) * (b + d) + (a + c) * (c + d);
        if den == 0.0 {
            1.0
        } else {
            2.0 * (a * d - b * c) / den
        }
    }

    #[test]
    fn miou_examples() {
        let m = [true, true, false, false];
        assert_eq!(miou(&m, &m).unwrap(), 1.0);
        assert_eq!(miou(&[true, false], &[false, true]).unwrap(), 0.0);
        assert_eq!(miou(&[true, false, false, false], &[true, true, false, false]).unwrap(), 0.5);
        assert_eq!(miou(&[false; 3], &[false; 3]).unwrap(), 1.0);
        assert!(matches!(miou(&[true], &[true, false]), Err(Error::Shape { .. })));
    }

    #[test]
    fn dice_examples() {
        let m = [true, false, true];
        assert_eq!(dice(&m, &m).unwrap(), 1.0);
        assert_eq!(dice(&[true, false], &[false, true]).unwrap(), 0.0);
        assert_eq!(dice(&[false; 2], &[false; 2]).unwrap(), 1.0);
        assert!(dice(&[true], &[]).is_err());
    }

    #[test]
    fn ari_examples() {
        let gt = LabelMap::new(vec![0, 0, 1, 1, 2, 2, 5]);
        let fg = vec![true, true, true, true, true, true, false];
        assert_eq!(ari_fg(&gt, &gt, &fg).unwrap(), 1.0);
        let relabeled = LabelMap::new(vec![7, 7, 3, 3, 9, 9, 0]);
        assert_eq!(ari_fg(&relabeled, &gt, &fg).unwrap(), 1.0);
        let one = LabelMap::new(vec![4; 7]);
        assert_eq!(ari_fg(&one, &one, &fg).unwrap(), 1.0);
        assert!(matches!(ari_fg(&gt, &gt, &[false; 7]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn ari_respects_ignore_mask() {
        let gt = LabelMap::new(vec![0, 0, 1, 1]);
        let pred = LabelMap::with_ignore(vec![0, 0, 1, 0], vec![false, false, false, true]).unwrap();
        assert_eq!(ari_fg(&pred, &gt, &[true; 4]).unwrap(), 1.0);
    }

    #[test]
    fn ari_known_value() {
        // sklearn: adjusted_rand_score([0,0,1,1], [0,0,1,2]) = 0.5714285714285715
        let a = LabelMap::new(vec![0, 0, 1, 1]);
        let b = LabelMap::new(vec![0, 0, 1, 2]);
        let v = ari_fg(&b, &a, &[true; 4]).unwrap();
        assert!((v - 4.0 / 7.0).abs() < 1e-15);
    }

    fn labels(n: usize, k: u32) -> impl Strategy<Value = Vec<u32>> {
        prop::collection::vec(0..k, n)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn ari_matches_pair_oracle(p in labels(20, 4), g in labels(20, 4)) {
            let v = ari_fg(&LabelMap::new(p.clone()), &LabelMap::new(g.clone()), &[true; 20]).unwrap();
            prop_assert!((v - ari_pairs(&p, &g)).abs() < 1e-12);
            prop_assert!(v <= 1.0 + 1e-12);
        }

        #[test]
        fn ari_is_relabel_invariant(p in labels(15, 3), g in labels(15, 3), perm in Just([2u32, 0, 1]), off in 10u32..20) {
            let fg = [true; 15];
            let base = ari_fg(&LabelMap::new(p.clone()), &LabelMap::new(g.clone()), &fg).unwrap();
            let p2: Vec<u32> = p.iter().map(|&l| perm[l as usize]).collect();
            let g2: Vec<u32> = g.iter().map(|&l| l + off).collect();
            let moved = ari_fg(&LabelMap::new(p2), &LabelMap::new(g2), &fg).unwrap();
            prop_assert_eq!(base, moved);
        }

        #[test]
        fn dice_miou_identity(a in prop::collection::vec(any::<bool>(), 1..40), seed in any::<u64>()) {
            let b: Vec<bool> = a.iter().enumerate().map(|(i, &x)| x ^ (seed >> (i % 64) & 1 == 1)).collect();
            let m = miou(&a, &b).unwrap();
            let d = dice(&a, &b).unwrap();
            prop_assert!((d - 2.0 * m / (1.0 + m)).abs() < 1e-12);
            prop_assert!(0.0 <= m && m <= d + 1e-15 && d <= 1.0);
        }
    }
}
