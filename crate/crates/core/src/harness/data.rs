//! Procedural datasets: 16×16 outline glyphs and a labeled 2-D Gaussian mixture.

use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Rng};

pub const GLYPH_SIDE: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Shapes16,
    Gauss2d,
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shapes16" => Ok(DatasetKind::Shapes16),
            "gauss2d" => Ok(DatasetKind::Gauss2d),
            other => Err(Error::invalid(format!("unknown dataset kind '{other}'"))),
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DatasetKind::Shapes16 => "shapes16",
            DatasetKind::Gauss2d => "gauss2d",
        })
    }
}

impl DatasetKind {
    pub fn data_dim(self) -> usize {
        match self {
            DatasetKind::Shapes16 => GLYPH_SIDE * GLYPH_SIDE,
            DatasetKind::Gauss2d => 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub per_class: usize,
    pub identities: usize,
    pub identity_size: usize,
    pub identity_pool: usize,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec { per_class: 600, identities: 3, identity_size: 6, identity_pool: 400 }
    }
}

/// A novel concept absent from pretraining.
#[derive(Clone, Debug, PartialEq)]
pub struct IdentityConcept {
    pub name: String,
    /// The few-shot fine-tuning set.
    pub subset: Vec<Vec<f64>>,
    /// Further draws of the same concept, used only to fit the feature encoder.
    pub pool: Vec<Vec<f64>>,
    /// Base class closest to the concept (squared distance between means).
    pub nearest_class: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub kind: DatasetKind,
    pub seed: u64,
    pub class_names: Vec<String>,
    pub samples: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub identities: Vec<IdentityConcept>,
}

impl SyntheticDataset {
    /// Width of the sample vectors; the kind's width when there are none.
    pub fn data_dim(&self) -> usize {
        self.samples.first().map_or(self.kind.data_dim(), Vec::len)
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_samples(&self, class: usize) -> impl Iterator<Item = &Vec<f64>> {
        self.samples.iter().zip(&self.labels).filter(move |(_, &l)| l == class).map(|(s, _)| s)
    }

    pub fn class_mean(&self, class: usize) -> Vec<f64> {
        mean(self.class_samples(class))
    }

    /// Base samples plus every identity's subset and pool, labeled
    /// `n_classes + k` for identity `k`.
    pub fn encoder_training_set(&self, identities: usize) -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut xs = self.samples.clone();
        let mut ys = self.labels.clone();
        for (k, id) in self.identities.iter().take(identities).enumerate() {
            for s in id.subset.iter().chain(&id.pool) {
                xs.push(s.clone());
                ys.push(self.n_classes() + k);
            }
        }
        (xs, ys)
    }
}

fn mean<'a>(rows: impl Iterator<Item = &'a Vec<f64>>) -> Vec<f64> {
    let mut acc: Vec<f64> = Vec::new();
    let mut n = 0usize;
    for r in rows {
        if acc.is_empty() {
            acc = vec![0.0; r.len()];
        }
        acc.iter_mut().zip(r).for_each(|(a, v)| *a += v);
        n += 1;
    }
    acc.iter_mut().for_each(|a| *a /= n.max(1) as f64);
    acc
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

pub fn gen_dataset(kind: DatasetKind, seed: u64) -> SyntheticDataset {
    gen_dataset_with(kind, seed, &DatasetSpec::default())
}

pub fn gen_dataset_with(kind: DatasetKind, seed: u64, spec: &DatasetSpec) -> SyntheticDataset {
    let mut rng = rng::seeded(seed);
    let (class_names, identity_names): (Vec<&str>, Vec<&str>) = match kind {
        DatasetKind::Shapes16 => (GLYPHS_BASE.to_vec(), GLYPHS_IDENTITY.to_vec()),
        DatasetKind::Gauss2d => (vec!["east", "northwest", "southwest"], vec!["center", "north", "far_east", "south"]),
    };
    let n_ids = spec.identities.min(identity_names.len());
    let mut samples = Vec::new();
    let mut labels = Vec::new();
    for i in 0..spec.per_class {
        for c in 0..class_names.len() {
            samples.push(draw(kind, class_names[c], false, &mut rng));
            labels.push(c);
            let _ = i;
        }
    }
    let mut dataset = SyntheticDataset {
        kind,
        seed,
        class_names: class_names.iter().map(|s| s.to_string()).collect(),
        samples,
        labels,
        identities: Vec::new(),
    };
    let class_means: Vec<Vec<f64>> = (0..class_names.len()).map(|c| dataset.class_mean(c)).collect();
    for name in identity_names.iter().take(n_ids) {
        let subset: Vec<Vec<f64>> = (0..spec.identity_size).map(|_| draw(kind, name, true, &mut rng)).collect();
        let pool: Vec<Vec<f64>> = (0..spec.identity_pool).map(|_| draw(kind, name, true, &mut rng)).collect();
        let m = mean(subset.iter().chain(&pool));
        let nearest_class = (0..class_means.len())
            .min_by(|&a, &b| sq_dist(&m, &class_means[a]).total_cmp(&sq_dist(&m, &class_means[b])))
            .unwrap_or(0);
        dataset.identities.push(IdentityConcept { name: name.to_string(), subset, pool, nearest_class });
    }
    dataset
}

const GLYPHS_BASE: [&str; 3] = ["circle", "square", "triangle"];
const GLYPHS_IDENTITY: [&str; 4] = ["cross", "plus", "diamond", "hourglass"];

fn draw(kind: DatasetKind, name: &str, identity: bool, rng: &mut Rng) -> Vec<f64> {
    match kind {
        DatasetKind::Shapes16 => render_glyph(name, identity, rng),
        DatasetKind::Gauss2d => {
            let (mean, std) = gauss2d_component(name);
            vec![mean[0] + std * rng::normal(rng), mean[1] + std * rng::normal(rng)]
        }
    }
}

/// Mean and isotropic standard deviation of a named 2-D component.
pub fn gauss2d_component(name: &str) -> ([f64; 2], f64) {
    match name {
        "east" => ([2.0, 0.0], 0.3),
        "northwest" => ([-1.0, 1.732], 0.3),
        "southwest" => ([-1.0, -1.732], 0.3),
        "center" => ([0.0, 0.0], 0.15),
        "north" => ([0.0, 2.6], 0.15),
        "far_east" => ([3.2, 0.0], 0.15),
        _ => ([-2.6, 0.0], 0.15),
    }
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0);
    let (cx, cy) = (a.0 + t * dx, a.1 + t * dy);
    ((p.0 - cx).powi(2) + (p.1 - cy).powi(2)).sqrt()
}

fn polyline_distance(p: (f64, f64), pts: &[(f64, f64)], closed: bool) -> f64 {
    let n = pts.len();
    let segs = if closed { n } else { n - 1 };
    (0..segs).map(|i| segment_distance(p, pts[i], pts[(i + 1) % n])).fold(f64::INFINITY, f64::min)
}

/// Anti-aliased outline glyph in `[-1, 1]`, background −1. Base classes vary
/// in position and size; identity glyphs are a fixed character with only
/// sub-pixel jitter.
fn render_glyph(name: &str, identity: bool, rng: &mut Rng) -> Vec<f64> {
    let c = GLYPH_SIDE as f64 / 2.0;
    let (jitter, r) =
        if identity { (0.5, 5.0 + rng.random_range(-0.25..0.25)) } else { (0.75, rng.random_range(4.5..5.5)) };
    let cx = c + rng.random_range(-jitter..jitter);
    let cy = c + rng.random_range(-jitter..jitter);
    let half_width = 0.75;
    let dist = |p: (f64, f64)| -> f64 {
        let (dx, dy) = (p.0 - cx, p.1 - cy);
        match name {
            "circle" => ((dx * dx + dy * dy).sqrt() - r).abs(),
            "square" => (dx.abs().max(dy.abs()) - r * 0.85).abs(),
            "triangle" => {
                let pts = [(cx, cy - r), (cx + r * 0.95, cy + r * 0.7), (cx - r * 0.95, cy + r * 0.7)];
                polyline_distance(p, &pts, true)
            }
            "cross" => {
                let k = r * 0.8;
                segment_distance(p, (cx - k, cy - k), (cx + k, cy + k)).min(segment_distance(
                    p,
                    (cx - k, cy + k),
                    (cx + k, cy - k),
                ))
            }
            "plus" => {
                segment_distance(p, (cx - r, cy), (cx + r, cy)).min(segment_distance(p, (cx, cy - r), (cx, cy + r)))
            }
            "diamond" => ((dx.abs() + dy.abs()) - r).abs(),
            _ => {
                // hourglass: two horizontal bars joined by diagonals
                let k = r * 0.8;
                let pts = [(cx - k, cy - k), (cx + k, cy - k), (cx - k, cy + k), (cx + k, cy + k)];
                polyline_distance(p, &pts, true)
            }
        }
    };
    let mut img = Vec::with_capacity(GLYPH_SIDE * GLYPH_SIDE);
    for y in 0..GLYPH_SIDE {
        for x in 0..GLYPH_SIDE {
            let d = dist((x as f64 + 0.5, y as f64 + 0.5));
            let ink = (half_width + 0.5 - d).clamp(0.0, 1.0);
            img.push(2.0 * ink - 1.0);
        }
    }
    img
}
