//! Structure measure: a convex combination of region-aware and object-aware
//! structural similarity between a saliency map and a binary mask.
//!
//! The region term splits both images into four blocks about the foreground
//! centroid (1-based rounding) and scores each block with an SSIM-like
//! statistic weighted by block area. The object term compares foreground and
//! background separately through `2*mean / (mean^2 + 1 + std)`. Degenerate
//! masks fall back to `1 - mean(map)` (all background) or `mean(map)` (all
//! foreground). The final score is clamped to be non-negative.

use super::{check_same_size, GroundTruthMask, SaliencyMap};
use crate::error::Result;

const EPS: f64 = f64::EPSILON;

/// `S_alpha = alpha * S_region + (1 - alpha) * S_object`.
pub fn s_measure(s: &SaliencyMap, g: &GroundTruthMask, alpha: f64) -> Result<f64> {
    check_same_size(s, g)?;
    let total = g.values().len() as f64;
    let fg = g.foreground_count() as f64;
    let mean_map = s.values().iter().sum::<f64>() / total;
    if fg == 0.0 {
        return Ok(1.0 - mean_map);
    }
    if fg == total {
        return Ok(mean_map);
    }
    let sr = region_similarity(s, g);
    let so = object_similarity(s, g);
    Ok((alpha * sr + (1.0 - alpha) * so).max(0.0))
}

/// Region-aware and object-aware components, for callers that need them
/// separately. The caller must ensure a mixed mask.
#[cfg(test)]
pub(crate) fn components(s: &SaliencyMap, g: &GroundTruthMask) -> (f64, f64) {
    (region_similarity(s, g), object_similarity(s, g))
}

fn object_similarity(s: &SaliencyMap, g: &GroundTruthMask) -> f64 {
    let fg_vals: Vec<f64> = s
        .values()
        .iter()
        .zip(g.values())
        .filter(|(_, &t)| t == 1)
        .map(|(&v, _)| v)
        .collect();
    let bg_vals: Vec<f64> = s
        .values()
        .iter()
        .zip(g.values())
        .filter(|(_, &t)| t == 0)
        .map(|(&v, _)| 1.0 - v)
        .collect();
    let u = fg_vals.len() as f64 / s.values().len() as f64;
    u * object_score(&fg_vals) + (1.0 - u) * object_score(&bg_vals)
}

fn object_score(region: &[f64]) -> f64 {
    let n = region.len() as f64;
    let mean = region.iter().sum::<f64>() / n;
    let std = if region.len() > 1 {
        let var = region.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
        var.sqrt()
    } else {
        0.0
    };
    2.0 * mean / (mean * mean + 1.0 + std + EPS)
}

fn region_similarity(s: &SaliencyMap, g: &GroundTruthMask) -> f64 {
    let (h, w) = (g.height(), g.width());
    let (cx, cy) = centroid(g);
    let total = (h * w) as f64;
    // Four blocks about the centroid; weights are area fractions.
    let blocks = [
        (0, cy, 0, cx),
        (0, cy, cx, w),
        (cy, h, 0, cx),
        (cy, h, cx, w),
    ];
    let mut score = 0.0;
    for &(r0, r1, c0, c1) in &blocks {
        let area = (r1.saturating_sub(r0)) * (c1.saturating_sub(c0));
        if area == 0 {
            continue;
        }
        let weight = area as f64 / total;
        score += weight * block_ssim(s, g, r0, r1, c0, c1);
    }
    score
}

/// Foreground centroid with the reference's 1-based rounding; returns the
/// (column, row) split sizes of the top-left block.
fn centroid(g: &GroundTruthMask) -> (usize, usize) {
    let (h, w) = (g.height(), g.width());
    let total: f64 = g.foreground_count() as f64;
    let mut col_weighted = 0.0;
    let mut row_weighted = 0.0;
    for r in 0..h {
        for c in 0..w {
            if g.values()[r * w + c] == 1 {
                col_weighted += (c + 1) as f64;
                row_weighted += (r + 1) as f64;
            }
        }
    }
    let cx = (col_weighted / total).round() as usize;
    let cy = (row_weighted / total).round() as usize;
    (cx.min(w), cy.min(h))
}

fn block_ssim(s: &SaliencyMap, g: &GroundTruthMask, r0: usize, r1: usize, c0: usize, c1: usize) -> f64 {
    let w = g.width();
    let n = ((r1 - r0) * (c1 - c0)) as f64;
    let mut sum_p = 0.0;
    let mut sum_t = 0.0;
    for r in r0..r1 {
        for c in c0..c1 {
            sum_p += s.values()[r * w + c];
            sum_t += f64::from(g.values()[r * w + c]);
        }
    }
    let mean_p = sum_p / n;
    let mean_t = sum_t / n;
    let mut var_p = 0.0;
    let mut var_t = 0.0;
    let mut cov = 0.0;
    for r in r0..r1 {
        for c in c0..c1 {
            let dp = s.values()[r * w + c] - mean_p;
            let dt = f64::from(g.values()[r * w + c]) - mean_t;
            var_p += dp * dp;
            var_t += dt * dt;
            cov += dp * dt;
        }
    }
    var_p /= n - 1.0 + EPS;
    var_t /= n - 1.0 + EPS;
    cov /= n - 1.0 + EPS;
    let alpha = 4.0 * mean_p * mean_t * cov;
    let beta = (mean_p * mean_p + mean_t * mean_t) * (var_p + var_t);
    if alpha != 0.0 {
        alpha / (beta + EPS)
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}
