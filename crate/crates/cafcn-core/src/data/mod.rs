//! Synthetic co-salient pair generation, dataset layout on disk, and
//! histogram-based grouping of related images.
//!
//! Each generated pair shares one "common" shape (same kind and color, random
//! position and scale per image) over a dark background, plus per-image
//! distractor shapes in other colors and optional Gaussian pixel noise. The
//! ground-truth masks cover exactly the common shape's pixels, never the
//! distractors, which is the property the network has to learn.

mod pnm;

pub use pnm::{
    load_gray, load_image, load_map, load_mask, load_rgb, save_gray, save_image, save_map,
    save_mask, save_rgb,
};

use crate::error::{Error, Result};
use crate::metrics::GroundTruthMask;
use crate::tensor::Tensor;
use rand::prelude::*;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use std::fs;
use std::path::Path;

const BACKGROUND: [f64; 3] = [0.1, 0.1, 0.1];
pub const MANIFEST_NAME: &str = "manifest.tsv";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Square,
    Disc,
    Triangle,
}

/// Recipe for one synthetic pair (and, with derived seeds, a whole dataset).
#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    pub image_size: usize,
    pub common_shape: ShapeKind,
    pub common_color: [f64; 3],
    pub distractor_count: usize,
    pub distractor_colors: Vec<[f64; 3]>,
    pub noise_std_dev: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            image_size: 32,
            common_shape: ShapeKind::Disc,
            common_color: [0.9, 0.25, 0.2],
            distractor_count: 2,
            distractor_colors: vec![
                [0.2, 0.45, 0.9],
                [0.25, 0.8, 0.3],
                [0.9, 0.85, 0.25],
                [0.7, 0.3, 0.85],
            ],
            noise_std_dev: 0.05,
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    fn validate(&self) -> Result<()> {
        if self.image_size < 8 {
            return Err(Error::Validation(format!(
                "image size {} too small to fit a shape",
                self.image_size
            )));
        }
        for c in self.common_color.iter().chain(self.distractor_colors.iter().flatten()) {
            if !(0.0..=1.0).contains(c) {
                return Err(Error::Validation("colors must lie in [0, 1]".into()));
            }
        }
        if self.distractor_count > 0 {
            let usable = self
                .distractor_colors
                .iter()
                .filter(|c| **c != self.common_color)
                .count();
            if usable == 0 {
                return Err(Error::Validation(
                    "need at least one distractor color different from the common color".into(),
                ));
            }
        }
        if self.noise_std_dev < 0.0 {
            return Err(Error::Validation("noise std dev must be >= 0".into()));
        }
        Ok(())
    }
}

/// One rendered shape instance.
#[derive(Debug, Clone)]
pub struct Placement {
    pub kind: ShapeKind,
    pub center: (f64, f64),
    pub half_extent: f64,
    pub color: [f64; 3],
    pub is_common: bool,
}

impl Placement {
    /// Boolean footprint of this shape on an `size x size` grid.
    pub fn footprint(&self, size: usize) -> Vec<bool> {
        rasterize(self.kind, self.center, self.half_extent, size)
    }
}

/// A generated training/evaluation pair with its metadata.
#[derive(Debug, Clone)]
pub struct PairSample {
    pub image1: Tensor,
    pub image2: Tensor,
    pub mask1: GroundTruthMask,
    pub mask2: GroundTruthMask,
    /// Shapes rendered into each image; empty for samples loaded from disk.
    pub placements1: Vec<Placement>,
    pub placements2: Vec<Placement>,
}

/// Point-in-shape test at pixel centers. Triangles use a half-open edge rule
/// so boundary pixels are claimed deterministically.
pub fn rasterize(kind: ShapeKind, center: (f64, f64), half_extent: f64, size: usize) -> Vec<bool> {
    let (cx, cy) = center;
    let r = half_extent;
    let mut out = vec![false; size * size];
    for py in 0..size {
        for px in 0..size {
            let x = px as f64 + 0.5;
            let y = py as f64 + 0.5;
            let inside = match kind {
                ShapeKind::Square => (x - cx).abs() <= r && (y - cy).abs() <= r,
                ShapeKind::Disc => (x - cx) * (x - cx) + (y - cy) * (y - cy) <= r * r,
                ShapeKind::Triangle => {
                    let a = (cx, cy - r);
                    let b = (cx - r, cy + r);
                    let c = (cx + r, cy + r);
                    point_in_triangle((x, y), a, c, b)
                }
            };
            if inside {
                out[py * size + px] = true;
            }
        }
    }
    out
}

fn edge(p: (f64, f64), v0: (f64, f64), v1: (f64, f64)) -> f64 {
    (v1.0 - v0.0) * (p.1 - v0.1) - (v1.1 - v0.1) * (p.0 - v0.0)
}

fn point_in_triangle(p: (f64, f64), a: (f64, f64), b: (f64, f64), c: (f64, f64)) -> bool {
    // Vertices wound so the interior is on the positive side of every edge;
    // zero-valued edges count only when top-left.
    for (v0, v1) in [(a, b), (b, c), (c, a)] {
        let e = edge(p, v0, v1);
        if e < 0.0 {
            return false;
        }
        if e == 0.0 {
            let (dx, dy) = (v1.0 - v0.0, v1.1 - v0.1);
            let top_left = dy < 0.0 || (dy == 0.0 && dx < 0.0);
            if !top_left {
                return false;
            }
        }
    }
    true
}

fn overlaps(a: &Placement, b: &Placement) -> bool {
    let dx = a.center.0 - b.center.0;
    let dy = a.center.1 - b.center.1;
    let reach = (a.half_extent + b.half_extent) * std::f64::consts::SQRT_2 + 1.0;
    dx * dx + dy * dy <= reach * reach
}

fn sample_placement(
    spec: &SyntheticSpec,
    kind: ShapeKind,
    color: [f64; 3],
    is_common: bool,
    rng: &mut ChaCha20Rng,
) -> Placement {
    let s = spec.image_size as f64;
    let r = rng.gen_range(s / 6.0..=s / 4.0);
    let cx = rng.gen_range(r..=s - r);
    let cy = rng.gen_range(r..=s - r);
    Placement { kind, center: (cx, cy), half_extent: r, color, is_common }
}

fn render_image(
    spec: &SyntheticSpec,
    rng: &mut ChaCha20Rng,
) -> Result<(Tensor, GroundTruthMask, Vec<Placement>)> {
    let size = spec.image_size;
    let common = sample_placement(spec, spec.common_shape, spec.common_color, true, rng);

    let kinds = [ShapeKind::Square, ShapeKind::Disc, ShapeKind::Triangle];
    let colors: Vec<[f64; 3]> = spec
        .distractor_colors
        .iter()
        .filter(|c| **c != spec.common_color)
        .copied()
        .collect();
    let mut distractors: Vec<Placement> = Vec::new();
    for _ in 0..spec.distractor_count {
        let kind = kinds[rng.gen_range(0..kinds.len())];
        let color = colors[rng.gen_range(0..colors.len())];
        let mut candidate = sample_placement(spec, kind, color, false, rng);
        for _ in 0..64 {
            let clear = !overlaps(&candidate, &common)
                && distractors.iter().all(|d| !overlaps(&candidate, d));
            if clear {
                break;
            }
            candidate = sample_placement(spec, kind, color, false, rng);
        }
        distractors.push(candidate);
    }

    let mut image = Tensor::zeros(&[size, size, 3]);
    for h in 0..size {
        for w in 0..size {
            for c in 0..3 {
                image.set3(h, w, c, BACKGROUND[c]);
            }
        }
    }
    // Distractors first; the common shape always paints on top so the mask
    // matches what is visible.
    for d in &distractors {
        paint(&mut image, d, size);
    }
    paint(&mut image, &common, size);

    let footprint = common.footprint(size);
    let mask_values: Vec<u8> = footprint.iter().map(|&b| u8::from(b)).collect();
    let mask = GroundTruthMask::new(size, size, mask_values)?;

    if spec.noise_std_dev > 0.0 {
        let normal = Normal::new(0.0, spec.noise_std_dev)
            .map_err(|e| Error::Validation(format!("bad noise sigma: {e}")))?;
        for v in image.values_mut() {
            *v = (*v + normal.sample(rng)).clamp(0.0, 1.0);
        }
    }

    let mut placements = vec![common];
    placements.extend(distractors);
    Ok((image, mask, placements))
}

fn paint(image: &mut Tensor, p: &Placement, size: usize) {
    for (idx, inside) in p.footprint(size).iter().enumerate() {
        if *inside {
            let (h, w) = (idx / size, idx % size);
            for c in 0..3 {
                image.set3(h, w, c, p.color[c]);
            }
        }
    }
}

/// Generates one co-salient pair: both images carry the common shape in the
/// shared color, plus independent distractors and noise. Deterministic for a
/// given seed.
pub fn generate_pair(spec: &SyntheticSpec) -> Result<PairSample> {
    spec.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);
    let (image1, mask1, placements1) = render_image(spec, &mut rng)?;
    let (image2, mask2, placements2) = render_image(spec, &mut rng)?;
    Ok(PairSample { image1, image2, mask1, mask2, placements1, placements2 })
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Seed for pair `index` of a dataset rooted at `base_seed`.
pub fn pair_seed(base_seed: u64, index: usize) -> u64 {
    splitmix64(base_seed ^ splitmix64(index as u64 + 1))
}

/// Generates `count` pairs under `root` as `pair_%05d/{img1,img2,gt1,gt2}`
/// plus a tab-separated manifest listing every quadruple. Returns the
/// in-memory samples in manifest order.
pub fn generate_dataset(spec: &SyntheticSpec, count: usize, root: &Path) -> Result<Vec<PairSample>> {
    fs::create_dir_all(root)?;
    let mut manifest = String::new();
    let mut samples = Vec::with_capacity(count);
    for i in 0..count {
        let mut pair_spec = spec.clone();
        pair_spec.seed = pair_seed(spec.seed, i);
        let sample = generate_pair(&pair_spec)?;
        let dir_name = format!("pair_{i:05}");
        let dir = root.join(&dir_name);
        fs::create_dir_all(&dir)?;
        save_image(&sample.image1, &dir.join("img1.ppm"))?;
        save_image(&sample.image2, &dir.join("img2.ppm"))?;
        save_mask(&sample.mask1, &dir.join("gt1.pgm"))?;
        save_mask(&sample.mask2, &dir.join("gt2.pgm"))?;
        manifest.push_str(&format!(
            "{dir_name}/img1.ppm\t{dir_name}/img2.ppm\t{dir_name}/gt1.pgm\t{dir_name}/gt2.pgm\n"
        ));
        samples.push(sample);
    }
    fs::write(root.join(MANIFEST_NAME), manifest)?;
    Ok(samples)
}

/// Loads a dataset back from its manifest. Placement metadata is not stored
/// on disk, so loaded samples carry empty placement lists.
pub fn load_dataset(root: &Path) -> Result<Vec<PairSample>> {
    let manifest_path = root.join(MANIFEST_NAME);
    let text = fs::read_to_string(&manifest_path)?;
    let mut samples = Vec::new();
    for (line_no, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split('\t').collect();
        if parts.len() != 4 {
            return Err(Error::Format {
                offset: line_no,
                message: format!("manifest line {line_no} must have 4 tab-separated paths"),
            });
        }
        samples.push(PairSample {
            image1: load_image(&root.join(parts[0]))?,
            image2: load_image(&root.join(parts[1]))?,
            mask1: load_mask(&root.join(parts[2]))?,
            mask2: load_mask(&root.join(parts[3]))?,
            placements1: Vec::new(),
            placements2: Vec::new(),
        });
    }
    Ok(samples)
}

/// 32-bin per-channel intensity histogram, normalized by pixel count.
pub fn intensity_histogram(image: &Tensor) -> Vec<f64> {
    let channels = *image.shape().last().unwrap();
    let pixels = image.len() / channels;
    let mut hist = vec![0.0; 32 * channels];
    for (idx, &v) in image.values().iter().enumerate() {
        let c = idx % channels;
        let bin = ((v * 32.0) as usize).min(31);
        hist[c * 32 + bin] += 1.0;
    }
    for h in hist.iter_mut() {
        *h /= pixels as f64;
    }
    hist
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Groups images by histogram similarity: greedy nearest-neighbor merging
/// until `group_count` groups remain. Every image lands in exactly one group.
pub fn group_by_histogram(images: &[Tensor], group_count: usize) -> Result<Vec<Vec<usize>>> {
    if group_count == 0 {
        return Err(Error::Usage("group count must be >= 1".into()));
    }
    if images.len() < group_count {
        return Err(Error::Usage(format!(
            "cannot split {} images into {group_count} groups",
            images.len()
        )));
    }
    let hists: Vec<Vec<f64>> = images.iter().map(intensity_histogram).collect();
    let n = images.len();
    let mut dist = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let d = euclidean(&hists[i], &hists[j]);
            dist[i][j] = d;
            dist[j][i] = d;
        }
    }
    let mut groups: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
    while groups.len() > group_count {
        // Closest pair of groups under single linkage; ties take the
        // smallest indices for determinism.
        let mut best = (0usize, 1usize);
        let mut best_d = f64::INFINITY;
        for a in 0..groups.len() {
            for b in a + 1..groups.len() {
                let mut d = f64::INFINITY;
                for &i in &groups[a] {
                    for &j in &groups[b] {
                        d = d.min(dist[i][j]);
                    }
                }
                if d < best_d {
                    best_d = d;
                    best = (a, b);
                }
            }
        }
        let merged = groups.remove(best.1);
        groups[best.0].extend(merged);
        groups[best.0].sort_unstable();
    }
    groups.sort_by_key(|g| g[0]);
    Ok(groups)
}
