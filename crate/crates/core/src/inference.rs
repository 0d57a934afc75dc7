//! Masks, foreground selection and semantic segmentation from a trained model.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::metrics::{self, assign_classes, kmeans, EvalReport, LabelMap};
use crate::model::Model;
use crate::slot_attention::{encode_values, SlotConfig, SlotInit};
use crate::tensor::ops::{self, Axis};
use crate::tensor::Matrix;
use crate::walks::{adjacency_values, WalkConfig};

/// Ground-truth id treated as background by the foreground tasks.
pub const BACKGROUND: u32 = 0;

#[derive(Clone, Debug)]
pub struct SlotMasks {
    /// N×K, row-stochastic feature→slot transition.
    pub soft: Matrix,
    /// Per-cell argmax slot, ties to the lowest index.
    pub hard: Vec<usize>,
    /// K×D_slot eval-mode slots.
    pub slots: Matrix,
    /// K×N slot→feature transition.
    pub binding: Matrix,
}

/// Encodes `x` from the slot mean and reads the masks off the walk space.
pub fn slot_masks(model: &Model, x: &Matrix, slot_cfg: &SlotConfig, walk_cfg: &WalkConfig) -> Result<SlotMasks> {
    if x.cols() != model.input_dim() {
        return Err(Error::Compatibility(format!(
            "features have width {}, model expects {}",
            x.cols(),
            model.input_dim()
        )));
    }
    let out = encode_values(&model.slot, slot_cfg, x, SlotInit::Eval)?;
    let xp = x.matmul(&model.proj.p_x)?;
    let sp = out.slots.matmul(&model.proj.p_s)?;
    let soft = adjacency_values(&xp, &sp, walk_cfg.tau)?;
    let sim = ops::l2_normalize_rows(&xp)?.matmul_t(&ops::l2_normalize_rows(&sp)?);
    let binding = ops::softmax(&sim, Axis::Cols, walk_cfg.tau)?.transpose();
    let hard = soft.argmax_rows();
    Ok(SlotMasks {
        soft,
        hard,
        slots: out.slots,
        binding,
    })
}

/// Slot whose cells overlap `gt` the most (ties to the lowest slot) and the
/// corresponding predicted mask.
pub fn foreground_select(hard: &[usize], num_slots: usize, gt: &[bool]) -> Result<(usize, Vec<bool>)> {
    if hard.len() != gt.len() {
        return Err(Error::shape("foreground_select", (hard.len(), 1), (gt.len(), 1)));
    }
    let mut inter = vec![0usize; num_slots.max(1)];
    for (&s, &g) in hard.iter().zip(gt) {
        if s >= inter.len() {
            return Err(Error::Config(format!("slot label {s} out of range for {num_slots} slots")));
        }
        inter[s] += g as usize;
    }
    let mut best = 0;
    for (s, &c) in inter.iter().enumerate() {
        if c > inter[best] {
            best = s;
        }
    }
    Ok((best, hard.iter().map(|&s| s == best).collect()))
}

/// One evaluation image.
#[derive(Clone, Debug)]
pub struct EvalImage {
    pub name: String,
    pub features: Matrix,
    pub labels: Vec<u32>,
}

fn check_labels(img: &EvalImage) -> Result<()> {
    if img.labels.len() != img.features.rows() {
        return Err(Error::shape("eval labels", img.features.shape(), (img.labels.len(), 1)));
    }
    Ok(())
}

fn sorted(images: &[EvalImage]) -> Vec<&EvalImage> {
    let mut v: Vec<&EvalImage> = images.iter().collect();
    v.sort_by(|a, b| a.name.cmp(&b.name));
    v
}

/// Foreground extraction: mIoU and Dice of the best-overlapping slot.
pub fn evaluate_foreground(model: &Model, images: &[EvalImage], slot_cfg: &SlotConfig, walk_cfg: &WalkConfig) -> Result<EvalReport> {
    let mut report = EvalReport::new("fg", &["miou", "dice", "slot"]);
    for img in sorted(images) {
        check_labels(img)?;
        let masks = slot_masks(model, &img.features, slot_cfg, walk_cfg)?;
        let gt: Vec<bool> = img.labels.iter().map(|&l| l != BACKGROUND).collect();
        let (slot, pred) = foreground_select(&masks.hard, model.num_slots(), &gt)?;
        report.push(
            img.name.clone(),
            vec![metrics::miou(&pred, &gt)?, metrics::dice(&pred, &gt)?, slot as f64],
        );
    }
    Ok(report)
}

/// Object discovery: ARI between slot labels and ground truth on foreground.
pub fn evaluate_discovery(model: &Model, images: &[EvalImage], slot_cfg: &SlotConfig, walk_cfg: &WalkConfig) -> Result<EvalReport> {
    let mut report = EvalReport::new("discovery", &["ari_fg"]);
    for img in sorted(images) {
        check_labels(img)?;
        let masks = slot_masks(model, &img.features, slot_cfg, walk_cfg)?;
        let fg: Vec<bool> = img.labels.iter().map(|&l| l != BACKGROUND).collect();
        let pred = LabelMap::new(masks.hard.iter().map(|&s| s as u32).collect());
        let gt = LabelMap::new(img.labels.clone());
        report.push(img.name.clone(), vec![metrics::ari_fg(&pred, &gt, &fg)?]);
    }
    Ok(report)
}

/// Semantic segmentation: slot-bound object features `M_{ŝ,x}·x` from every
/// image are pooled (in image-name order) and clustered into `num_classes`
/// groups; clusters are matched to classes by maximum pooled IoU and every
/// cell takes the class of its slot's cluster.
///
/// Columns: `iou_c` for each class, then `miou` (their mean). Notes give the
/// cluster-to-class matching and the dataset-pooled per-class IoU.
pub fn semantic_segment(
    model: &Model,
    images: &[EvalImage],
    slot_cfg: &SlotConfig,
    walk_cfg: &WalkConfig,
    num_classes: usize,
    seed: u64,
) -> Result<EvalReport> {
    let images = sorted(images);
    let k = model.num_slots();
    if num_classes == 0 || images.len() * k < num_classes {
        return Err(Error::Config(format!(
            "need at least {num_classes} pooled slot features, have {}",
            images.len() * k
        )));
    }
    let mut pooled = Vec::with_capacity(images.len() * k);
    let mut hards = Vec::with_capacity(images.len());
    for img in &images {
        check_labels(img)?;
        let masks = slot_masks(model, &img.features, slot_cfg, walk_cfg)?;
        let objects = masks.binding.matmul(&img.features)?;
        pooled.extend(objects.iter_rows().map(|r| r.to_vec()));
        hards.push(masks.hard);
    }
    let clusters = kmeans(&Matrix::from_rows(&pooled)?, num_classes, seed)?;
    let cluster_of = |i: usize, slot: usize| clusters.labels[i * k + slot];

    // Pooled intersection and size counts between clusters and classes.
    let c = num_classes;
    let mut inter = Matrix::zeros(c, c);
    let mut pred_size = vec![0.0; c];
    let mut gt_size = vec![0.0; c];
    for (i, img) in images.iter().enumerate() {
        for (cell, &slot) in hards[i].iter().enumerate() {
            let cl = cluster_of(i, slot);
            pred_size[cl] += 1.0;
            let gt = img.labels[cell] as usize;
            if gt < c {
                gt_size[gt] += 1.0;
                inter.set(cl, gt, inter.get(cl, gt) + 1.0);
            }
        }
    }
    let iou = Matrix::from_fn(c, c, |a, b| {
        let union = pred_size[a] + gt_size[b] - inter.get(a, b);
        if union == 0.0 {
            1.0
        } else {
            inter.get(a, b) / union
        }
    });
    let matching = assign_classes(&iou);
    let class_of: Vec<usize> = (0..c).map(|cl| matching.column_of(cl).expect("square matching is perfect")).collect();

    let names: Vec<String> = (0..c).map(|j| format!("iou_{j}")).collect();
    let mut columns: Vec<&str> = names.iter().map(String::as_str).collect();
    columns.push("miou");
    let mut report = EvalReport::new("semantic", &columns);
    let mut pooled_inter = vec![0.0; c];
    let mut pooled_union = vec![0.0; c];
    for (i, img) in images.iter().enumerate() {
        let pred: Vec<usize> = hards[i].iter().map(|&s| class_of[cluster_of(i, s)]).collect();
        let mut row = Vec::with_capacity(c + 1);
        for class in 0..c {
            let p: Vec<bool> = pred.iter().map(|&x| x == class).collect();
            let g: Vec<bool> = img.labels.iter().map(|&x| x as usize == class).collect();
            row.push(metrics::miou(&p, &g)?);
            let both = p.iter().zip(&g).filter(|(a, b)| **a && **b).count() as f64;
            pooled_inter[class] += both;
            pooled_union[class] += p.iter().zip(&g).filter(|(a, b)| **a || **b).count() as f64;
        }
        row.push(row.iter().sum::<f64>() / c as f64);
        report.push(img.name.clone(), row);
    }
    let pooled_iou: Vec<String> = (0..c)
        .map(|j| {
            let v = if pooled_union[j] == 0.0 { 1.0 } else { pooled_inter[j] / pooled_union[j] };
            format!("{v:.6}")
        })
        .collect();
    let assignment: Vec<String> = class_of.iter().enumerate().map(|(cl, cls)| format!("{cl}->{cls}")).collect();
    report.note("assignment", assignment.join(" "));
    report.note("pooled_iou", pooled_iou.join("\t"));
    Ok(report)
}

/// Writes hard labels as a binary greymap, label `l` mapped to
/// `l·⌊255/(K−1)⌋` (all zero when K = 1).
pub fn write_mask_pgm(labels: &[usize], num_slots: usize, height: usize, width: usize, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, mask_pgm_bytes(labels, num_slots, height, width)?).map_err(|e| Error::io(path, e))
}

pub fn mask_pgm_bytes(labels: &[usize], num_slots: usize, height: usize, width: usize) -> Result<Vec<u8>> {
    if height * width != labels.len() {
        return Err(Error::shape("write_mask_pgm", (height, width), (labels.len(), 1)));
    }
    let step = if num_slots > 1 { 255 / (num_slots - 1) } else { 0 };
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    for &l in labels {
        let v = l * step;
        if l >= 256 || v > 255 {
            return Err(Error::format("label", format!("label {l} does not fit an 8-bit mask")));
        }
        out.push(v as u8);
    }
    Ok(out)
}

/// Reads a P5 greymap written by [`write_mask_pgm`]: `(height, width, pixels)`.
pub fn read_mask_pgm(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<u8>)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut fields = Vec::with_capacity(4);
    let mut at = 0;
    while fields.len() < 4 {
        while at < bytes.len() && bytes[at].is_ascii_whitespace() {
            at += 1;
        }
        let start = at;
        while at < bytes.len() && !bytes[at].is_ascii_whitespace() {
            at += 1;
        }
        if start == at {
            return Err(Error::format("pgm header", "incomplete header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..at]).into_owned());
    }
    if fields[0] != "P5" {
        return Err(Error::format("magic", format!("expected P5, found {}", fields[0])));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| Error::format("pgm header", format!("bad number {s}")));
    let (w, h, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval != 255 {
        return Err(Error::format("maxval", format!("expected 255, found {maxval}")));
    }
    let payload = &bytes[(at + 1).min(bytes.len())..];
    if payload.len() != w * h {
        return Err(Error::Truncated {
            expected: at + 1 + w * h,
            found: bytes.len(),
        });
    }
    Ok((h, w, payload.to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small(k: usize) -> (Model, SlotConfig, WalkConfig) {
        let slot = SlotConfig {
            num_slots: k,
            slot_dim: 8,
            attn_dim: 8,
            iterations: 2,
            ..SlotConfig::default()
        };
        let walk = WalkConfig {
            walk_dim: 8,
            ..WalkConfig::default()
        };
        (Model::init(&slot, &walk, 5, 3).unwrap(), slot, walk)
    }

    fn features(n: usize, seed: u64) -> Matrix {
        Matrix::random_normal(n, 5, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn single_slot_masks() {
        let (m, s, w) = small(1);
        let out = slot_masks(&m, &features(9, 1), &s, &w).unwrap();
        assert!(out.hard.iter().all(|&h| h == 0));
        assert!(out.soft.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn soft_rows_are_stochastic_and_eval_is_pure() {
        let (m, s, w) = small(4);
        let x = features(20, 2);
        let a = slot_masks(&m, &x, &s, &w).unwrap();
        for r in a.soft.iter_rows() {
            assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let b = slot_masks(&m, &x, &s, &w).unwrap();
        assert_eq!(a.soft, b.soft);
        assert_eq!(a.hard, b.hard);
        assert_eq!(a.hard.len(), 20);
        assert!(a.hard.iter().all(|&h| h < 4));
    }

    #[test]
    fn width_mismatch_is_incompatible() {
        let (m, s, w) = small(2);
        assert!(matches!(slot_masks(&m, &Matrix::zeros(3, 4), &s, &w), Err(Error::Compatibility(_))));
    }

    #[test]
    fn foreground_examples() {
        let hard = [0, 1, 1, 2, 2, 0];
        let gt = [false, true, true, false, false, false];
        let (s, mask) = foreground_select(&hard, 3, &gt).unwrap();
        assert_eq!(s, 1);
        assert_eq!(metrics::miou(&mask, &gt).unwrap(), 1.0);
        let tie = [true, true, false, true, false, false];
        assert_eq!(foreground_select(&hard, 3, &tie).unwrap().0, 0);
    }

    proptest! {
        #[test]
        fn foreground_matches_scan(hard in prop::collection::vec(0usize..4, 1..30), seed in any::<u64>()) {
            let gt: Vec<bool> = (0..hard.len()).map(|i| (seed >> (i % 64)) & 1 == 1).collect();
            let (s, _) = foreground_select(&hard, 4, &gt).unwrap();
            let counts: Vec<usize> = (0..4).map(|k| hard.iter().zip(&gt).filter(|(h, g)| **h == k && **g).count()).collect();
            let best = *counts.iter().max().unwrap();
            prop_assert_eq!(s, counts.iter().position(|&c| c == best).unwrap());
        }
    }

    fn images(n: usize) -> Vec<EvalImage> {
        (0..n)
            .map(|i| EvalImage {
                name: format!("{i:04}"),
                features: features(16, 10 + i as u64),
                labels: (0..16).map(|c| (c % 3) as u32).collect(),
            })
            .collect()
    }

    #[test]
    fn semantic_single_class_is_coverage() {
        let (m, s, w) = small(2);
        let imgs = images(3);
        let r = semantic_segment(&m, &imgs, &s, &w, 1, 0).unwrap();
        let cover = 6.0 / 16.0;
        for row in &r.images {
            assert!((row.values[0] - cover).abs() < 1e-15);
        }
    }

    #[test]
    fn semantic_ignores_image_order() {
        let (m, s, w) = small(3);
        let imgs = images(5);
        let a = semantic_segment(&m, &imgs, &s, &w, 3, 0).unwrap();
        let mut rev = imgs.clone();
        rev.reverse();
        let b = semantic_segment(&m, &rev, &s, &w, 3, 0).unwrap();
        assert_eq!(a, b);
        assert!(semantic_segment(&m, &imgs[..1], &s, &w, 4, 0).is_err());
    }

    #[test]
    fn pgm_examples() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.pgm");
        write_mask_pgm(&[0; 6], 3, 2, 3, &p).unwrap();
        assert_eq!(read_mask_pgm(&p).unwrap(), (2, 3, vec![0; 6]));

        let checker: Vec<usize> = (0..16).map(|i| (i / 4 + i % 4) % 2).collect();
        write_mask_pgm(&checker, 2, 4, 4, &p).unwrap();
        let (_, _, px) = read_mask_pgm(&p).unwrap();
        assert_eq!(px, checker.iter().map(|&l| (l * 255) as u8).collect::<Vec<_>>());

        let labels = [0, 1, 2, 3, 1, 0];
        write_mask_pgm(&labels, 4, 3, 2, &p).unwrap();
        assert_eq!(read_mask_pgm(&p).unwrap().2, vec![0, 85, 170, 255, 85, 0]);

        assert!(matches!(mask_pgm_bytes(&[300], 1, 1, 1), Err(Error::Format { .. })));
        assert!(matches!(mask_pgm_bytes(&[5], 3, 1, 1), Err(Error::Format { .. })));
    }
}
