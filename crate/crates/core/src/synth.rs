//! Labeled synthetic part-feature grids.
//!
//! Every scene in a dataset shares one palette of class mean directions
//! (drawn from `mean_seed`), so class identity is consistent across scenes.
//! Per-scene layout and noise come from the scene seed. Class 0 is the
//! background for the random-rectangle layout.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::features::FeatureMap;
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layout {
    /// Background class 0 with one axis-aligned rectangle per other class.
    RandomRectangles,
    /// Nearest-site partition with one site per class.
    VoronoiCells,
}

impl std::str::FromStr for Layout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random-rectangles" | "rectangles" => Ok(Layout::RandomRectangles),
            "voronoi-cells" | "voronoi" => Ok(Layout::VoronoiCells),
            other => Err(Error::Config(format!("unknown layout {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub input_dim: usize,
    /// Per-coordinate standard deviation of the within-class noise.
    pub noise_std: f64,
    pub layout: Layout,
    /// Minimum pairwise angle between class mean directions, in degrees.
    pub mean_separation_deg: f64,
    pub mean_seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            height: 8,
            width: 8,
            classes: 3,
            input_dim: 32,
            noise_std: 0.1,
            layout: Layout::RandomRectangles,
            mean_separation_deg: 60.0,
            mean_seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.cells() < self.classes {
            return Err(Error::Config(format!(
                "grid {}x{} cannot hold {} classes",
                self.height, self.width, self.classes
            )));
        }
        if self.input_dim == 0 {
            return Err(Error::Config("feature width must be positive".into()));
        }
        if !(self.noise_std >= 0.0) || !self.noise_std.is_finite() {
            return Err(Error::Config(format!("noise_std must be non-negative, got {}", self.noise_std)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    pub height: usize,
    pub width: usize,
    pub features: Matrix,
    pub labels: Vec<u32>,
}

impl SyntheticScene {
    pub fn into_feature_map(self) -> FeatureMap {
        FeatureMap {
            values: self.features,
            labels: Some(self.labels),
        }
    }
}

const MAX_MEAN_DRAWS: usize = 10_000;
const MAX_LAYOUT_RETRIES: u64 = 100;

fn random_unit<R: Rng>(dim: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if n > 1e-9 {
            return v.into_iter().map(|a| a / n).collect();
        }
    }
}

/// Unit class means with pairwise cosine below `cos(mean_separation)`.
pub fn class_means(cfg: &SceneConfig) -> Result<Matrix> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.mean_seed);
    let max_cos = cfg.mean_separation_deg.to_radians().cos();
    let mut means: Vec<Vec<f64>> = Vec::with_capacity(cfg.classes);
    let mut draws = 0;
    while means.len() < cfg.classes {
        if draws == MAX_MEAN_DRAWS {
            return Err(Error::Config(format!(
                "could not place {} class means {}° apart in {} dimensions",
                cfg.classes, cfg.mean_separation_deg, cfg.input_dim
            )));
        }
        draws += 1;
        let cand = random_unit(cfg.input_dim, &mut rng);
        let ok = means.iter().all(|m| {
            let c: f64 = m.iter().zip(&cand).map(|(a, b)| a * b).sum();
            c < max_cos
        });
        if ok {
            means.push(cand);
        }
    }
    Matrix::from_rows(&means)
}

fn rectangles<R: Rng>(cfg: &SceneConfig, rng: &mut R) -> Vec<u32> {
    let (h, w) = (cfg.height, cfg.width);
    let mut labels = vec![0u32; h * w];
    for class in 1..cfg.classes {
        let rh = rng.random_range((h / 4).max(1)..=(h / 2).max(1));
        let rw = rng.random_range((w / 4).max(1)..=(w / 2).max(1));
        let top = rng.random_range(0..=h - rh);
        let left = rng.random_range(0..=w - rw);
        for r in top..top + rh {
            for c in left..left + rw {
                labels[r * w + c] = class as u32;
            }
        }
    }
    labels
}

fn voronoi<R: Rng>(cfg: &SceneConfig, rng: &mut R) -> Vec<u32> {
    let (h, w) = (cfg.height, cfg.width);
    let sites = rand::seq::index::sample(rng, h * w, cfg.classes).into_vec();
    (0..h * w)
        .map(|cell| {
            let (r, c) = ((cell / w) as i64, (cell % w) as i64);
            let mut best = (i64::MAX, 0u32);
            for (k, &s) in sites.iter().enumerate() {
                let (sr, sc) = ((s / w) as i64, (s % w) as i64);
                let d = (r - sr).pow(2) + (c - sc).pow(2);
                if d < best.0 {
                    best = (d, k as u32);
                }
            }
            best.1
        })
        .collect()
}

fn covers_all(labels: &[u32], classes: usize) -> bool {
    let mut seen = vec![false; classes];
    for &l in labels {
        seen[l as usize] = true;
    }
    seen.into_iter().all(|s| s)
}

/// Derives the seed for retry `attempt` of scene `seed`.
fn sub_seed(seed: u64, attempt: u64) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).rotate_left(17) ^ attempt.wrapping_mul(0xbf58_476d_1ce4_e5b9)
}

/// Generates one scene over a precomputed palette of class means.
pub fn generate_with_means(cfg: &SceneConfig, means: &Matrix, seed: u64) -> Result<SyntheticScene> {
    cfg.validate()?;
    if means.shape() != (cfg.classes, cfg.input_dim) {
        return Err(Error::shape("generate_scene", means.shape(), (cfg.classes, cfg.input_dim)));
    }
    let mut labels = None;
    for attempt in 0..MAX_LAYOUT_RETRIES {
        let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, attempt));
        let cand = match cfg.layout {
            Layout::RandomRectangles => rectangles(cfg, &mut rng),
            Layout::VoronoiCells => voronoi(cfg, &mut rng),
        };
        if covers_all(&cand, cfg.classes) {
            labels = Some((cand, rng));
            break;
        }
    }
    let (labels, mut rng) = labels.ok_or_else(|| {
        Error::Config(format!(
            "layout failed to cover all {} classes after {MAX_LAYOUT_RETRIES} retries",
            cfg.classes
        ))
    })?;
    let features = Matrix::from_fn(labels.len(), cfg.input_dim, |i, j| {
        let noise: f64 = rng.sample(StandardNormal);
        means.get(labels[i] as usize, j) + cfg.noise_std * noise
    });
    Ok(SyntheticScene {
        height: cfg.height,
        width: cfg.width,
        features,
        labels,
    })
}

/// Generates one scene; deterministic in `(cfg, seed)`.
pub fn generate_scene(cfg: &SceneConfig, seed: u64) -> Result<SyntheticScene> {
    let means = class_means(cfg)?;
    generate_with_means(cfg, &means, seed)
}

/// Seed of scene `index` in a dataset seeded with `seed`.
pub fn scene_seed(seed: u64, index: u64) -> u64 {
    sub_seed(seed ^ 0xd1b5_4a32_d192_ed03, index.wrapping_add(1) << 8)
}

/// `count` scenes sharing one palette.
pub fn generate_dataset(cfg: &SceneConfig, seed: u64, count: usize) -> Result<Vec<SyntheticScene>> {
    let means = class_means(cfg)?;
    (0..count as u64)
        .map(|i| generate_with_means(cfg, &means, scene_seed(seed, i)))
        .collect()
}
