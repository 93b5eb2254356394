//! Threshold curves and their scalar reductions.
//!
//! Confusion counts come from an 8-bit level histogram with suffix sums, so
//! all 256 thresholds cost one pass over the pixels.

use super::{check_same_size, GroundTruthMask, SaliencyMap};
use crate::error::{Error, Result};

/// Integer confusion counts for every threshold `t in 0..=255`, where the
/// predicted foreground at `t` is the set of pixels with level `>= t`.
#[derive(Debug, Clone)]
pub struct ThresholdCounts {
    /// True positives per threshold.
    pub tp: [u64; 256],
    /// False positives per threshold.
    pub fp: [u64; 256],
    pub foreground: u64,
    pub background: u64,
}

impl ThresholdCounts {
    pub fn compute(s: &SaliencyMap, g: &GroundTruthMask) -> Result<Self> {
        check_same_size(s, g)?;
        let mut fg_hist = [0u64; 256];
        let mut bg_hist = [0u64; 256];
        for (idx, &t) in g.values().iter().enumerate() {
            let level = s.level(idx) as usize;
            if t == 1 {
                fg_hist[level] += 1;
            } else {
                bg_hist[level] += 1;
            }
        }
        let mut tp = [0u64; 256];
        let mut fp = [0u64; 256];
        let mut tp_acc = 0u64;
        let mut fp_acc = 0u64;
        for t in (0..256).rev() {
            tp_acc += fg_hist[t];
            fp_acc += bg_hist[t];
            tp[t] = tp_acc;
            fp[t] = fp_acc;
        }
        Ok(Self {
            tp,
            fp,
            foreground: tp[0],
            background: fp[0],
        })
    }

    /// Precision at threshold `t`; an empty prediction counts as precision 1.
    pub fn precision(&self, t: usize) -> f64 {
        let predicted = self.tp[t] + self.fp[t];
        if predicted == 0 {
            1.0
        } else {
            self.tp[t] as f64 / predicted as f64
        }
    }

    pub fn recall(&self, t: usize) -> f64 {
        self.tp[t] as f64 / self.foreground as f64
    }

    pub fn tpr(&self, t: usize) -> f64 {
        self.recall(t)
    }

    /// False-positive rate; defined as 0 when the mask has no background.
    pub fn fpr(&self, t: usize) -> f64 {
        if self.background == 0 {
            0.0
        } else {
            self.fp[t] as f64 / self.background as f64
        }
    }
}

fn counts_or_degenerate(s: &SaliencyMap, g: &GroundTruthMask) -> Result<ThresholdCounts> {
    let counts = ThresholdCounts::compute(s, g)?;
    if counts.foreground == 0 {
        return Err(Error::DegenerateMask);
    }
    Ok(counts)
}

/// 256 (precision, recall) pairs, one per threshold.
pub fn pr_curve(s: &SaliencyMap, g: &GroundTruthMask) -> Result<Vec<(f64, f64)>> {
    let counts = counts_or_degenerate(s, g)?;
    Ok((0..256).map(|t| (counts.precision(t), counts.recall(t))).collect())
}

/// 256 (fpr, tpr) pairs, one per threshold.
pub fn roc_curve(s: &SaliencyMap, g: &GroundTruthMask) -> Result<Vec<(f64, f64)>> {
    let counts = counts_or_degenerate(s, g)?;
    Ok((0..256).map(|t| (counts.fpr(t), counts.tpr(t))).collect())
}

/// F-measure of a single (precision, recall) operating point.
pub fn f_beta(precision: f64, recall: f64, beta_sq: f64) -> f64 {
    let denom = beta_sq * precision + recall;
    if denom == 0.0 {
        0.0
    } else {
        (1.0 + beta_sq) * precision * recall / denom
    }
}

/// Reported F-beta statistic: the maximum F-beta over all 256 thresholds.
pub fn f_beta_report(s: &SaliencyMap, g: &GroundTruthMask, beta_sq: f64) -> Result<f64> {
    let counts = counts_or_degenerate(s, g)?;
    Ok((0..256)
        .map(|t| f_beta(counts.precision(t), counts.recall(t), beta_sq))
        .fold(0.0, f64::max))
}

/// Adaptive-threshold F-beta variant: binarizes at twice the map mean.
pub fn f_beta_adaptive(s: &SaliencyMap, g: &GroundTruthMask, beta_sq: f64) -> Result<f64> {
    let counts = counts_or_degenerate(s, g)?;
    let mean = s.values().iter().sum::<f64>() / s.values().len() as f64;
    let t = ((2.0 * mean * 255.0).round() as usize).min(255);
    Ok(f_beta(counts.precision(t), counts.recall(t), beta_sq))
}

/// Trapezoidal area under a threshold-indexed ROC curve (index 0 is the
/// all-foreground end). The traversal is extended to (0,0) and (1,1).
pub fn auc(roc: &[(f64, f64)]) -> f64 {
    trapezoid_over_thresholds(roc, (0.0, 0.0), (1.0, 1.0))
}

/// Trapezoidal area under a threshold-indexed PR curve, read as precision
/// over recall. The zero-recall end is extended with precision 1.
pub fn ap(pr: &[(f64, f64)]) -> f64 {
    // Points arrive as (precision, recall); integrate precision over recall.
    let recall_major: Vec<(f64, f64)> = pr.iter().map(|&(p, r)| (r, p)).collect();
    trapezoid_over_thresholds(&recall_major, (0.0, 1.0), *recall_major.first().unwrap_or(&(1.0, 0.0)))
}

/// Walks the curve from the highest threshold (smallest abscissa) to the
/// lowest, summing trapezoids. Duplicate points contribute zero width.
fn trapezoid_over_thresholds(curve: &[(f64, f64)], start: (f64, f64), end: (f64, f64)) -> f64 {
    let mut area = 0.0;
    let mut prev = start;
    for &pt in curve.iter().rev().chain(std::iter::once(&end)) {
        area += (pt.0 - prev.0) * (pt.1 + prev.1) * 0.5;
        prev = pt;
    }
    area
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::mae;
    use rand::prelude::*;
    use rand_chacha::ChaCha20Rng;

    fn random_pair(seed: u64) -> (SaliencyMap, GroundTruthMask) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let values = (0..64).map(|_| rng.gen_range(0.0..=1.0)).collect();
        let mask: Vec<u8> = (0..64).map(|_| rng.gen_range(0..=1u8)).collect();
        (
            SaliencyMap::new(8, 8, values).unwrap(),
            GroundTruthMask::new(8, 8, mask).unwrap(),
        )
    }

    /// Rescans every pixel for one threshold; the slow reference the fast
    /// histogram path is checked against.
    fn confusion_by_rescan(s: &SaliencyMap, g: &GroundTruthMask, t: u8) -> (u64, u64, u64, u64) {
        let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
        for (idx, &truth) in g.values().iter().enumerate() {
            let fg = s.level(idx) >= t;
            match (fg, truth == 1) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => tn += 1,
            }
        }
        (tp, fp, fn_, tn)
    }

    #[test]
    fn perfect_binary_map() {
        let mask: Vec<u8> = (0..64).map(|i| u8::from(i % 3 == 0)).collect();
        let g = GroundTruthMask::new(8, 8, mask.clone()).unwrap();
        let s = SaliencyMap::new(8, 8, mask.iter().map(|&v| f64::from(v)).collect()).unwrap();
        let pr = pr_curve(&s, &g).unwrap();
        for t in 1..256 {
            assert_eq!(pr[t], (1.0, 1.0), "threshold {t}");
        }
        let roc = roc_curve(&s, &g).unwrap();
        assert!(roc.iter().any(|&(fpr, tpr)| fpr == 0.0 && tpr == 1.0));
        assert!((auc(&roc) - 1.0).abs() < 1e-12);
        assert!((ap(&pr) - 1.0).abs() < 1e-12);
        assert!((f_beta_report(&s, &g, 0.3).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn all_ones_prediction_on_half_foreground() {
        let mask: Vec<u8> = (0..64).map(|i| u8::from(i < 32)).collect();
        let g = GroundTruthMask::new(8, 8, mask).unwrap();
        let s = SaliencyMap::constant(8, 8, 1.0).unwrap();
        let pr = pr_curve(&s, &g).unwrap();
        for t in 0..256 {
            assert_eq!(pr[t], (0.5, 1.0));
        }
        // max F-beta of (P=0.5, R=1): 1.3*0.5/(0.15+1).
        let expected = 1.3 * 0.5 / 1.15;
        assert!((f_beta_report(&s, &g, 0.3).unwrap() - expected).abs() < 1e-12);
        assert!((expected - 0.5652173913043478).abs() < 1e-12);
    }

    #[test]
    fn constant_map_has_single_operating_point() {
        let mask: Vec<u8> = (0..64).map(|i| u8::from(i % 4 == 0)).collect();
        let g = GroundTruthMask::new(8, 8, mask).unwrap();
        let s = SaliencyMap::constant(8, 8, 0.5).unwrap();
        let roc = roc_curve(&s, &g).unwrap();
        let level = 128;
        for t in 0..256 {
            let expect = if t <= level { (1.0, 1.0) } else { (0.0, 0.0) };
            assert_eq!(roc[t], expect, "threshold {t}");
        }
    }

    #[test]
    fn curves_match_per_pixel_rescan_exactly() {
        for seed in 0..10 {
            let (s, g) = random_pair(seed);
            let counts = ThresholdCounts::compute(&s, &g).unwrap();
            for t in 0..256 {
                let (tp, fp, _, _) = confusion_by_rescan(&s, &g, t as u8);
                assert_eq!(counts.tp[t], tp, "tp at threshold {t}");
                assert_eq!(counts.fp[t], fp, "fp at threshold {t}");
            }
        }
    }

    #[test]
    fn f_beta_point_values() {
        assert_eq!(f_beta(1.0, 1.0, 0.3), 1.0);
        for x in [0.1, 0.4, 0.9] {
            assert!((f_beta(x, x, 0.3) - x).abs() < 1e-15);
        }
        assert!((f_beta(0.8, 0.4, 0.3) - 0.65).abs() < 1e-12);
        assert_eq!(f_beta(0.0, 0.0, 0.3), 0.0);
    }

    #[test]
    fn f_beta_never_exceeds_max_component() {
        for seed in 0..20u64 {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let p: f64 = rng.gen_range(0.0..=1.0);
            let r: f64 = rng.gen_range(0.0..=1.0);
            assert!(f_beta(p, r, 0.3) <= p.max(r) + 1e-12);
        }
    }

    #[test]
    fn f_beta_report_equals_max_over_curve() {
        let (s, g) = random_pair(777);
        let pr = pr_curve(&s, &g).unwrap();
        let max = pr.iter().map(|&(p, r)| f_beta(p, r, 0.3)).fold(0.0, f64::max);
        assert_eq!(f_beta_report(&s, &g, 0.3).unwrap(), max);
    }

    #[test]
    fn diagonal_roc_has_half_area() {
        let diag: Vec<(f64, f64)> = (0..=255)
            .rev()
            .map(|t| (t as f64 / 255.0, t as f64 / 255.0))
            .collect();
        assert!((auc(&diag) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn auc_is_stable_under_duplicated_points() {
        let (s, g) = random_pair(31);
        let roc = roc_curve(&s, &g).unwrap();
        let mut doubled = Vec::new();
        for &pt in &roc {
            doubled.push(pt);
            doubled.push(pt);
        }
        assert!((auc(&roc) - auc(&doubled)).abs() < 1e-12);
    }

    #[test]
    fn auc_matches_rank_statistic_oracle() {
        // With every 8-bit level used as a threshold, the trapezoidal AUC
        // equals the probability that a foreground pixel outranks a
        // background pixel (ties counted half).
        for seed in 100..110 {
            let (s, g) = random_pair(seed);
            let roc = roc_curve(&s, &g).unwrap();
            let mut concordant = 0.0;
            let mut total = 0.0;
            for (i, &ti) in g.values().iter().enumerate() {
                if ti != 1 {
                    continue;
                }
                for (j, &tj) in g.values().iter().enumerate() {
                    if tj != 0 {
                        continue;
                    }
                    total += 1.0;
                    let (a, b) = (s.level(i), s.level(j));
                    if a > b {
                        concordant += 1.0;
                    } else if a == b {
                        concordant += 0.5;
                    }
                }
            }
            assert!((auc(&roc) - concordant / total).abs() < 1e-9);
        }
    }

    #[test]
    fn areas_match_midpoint_integration_oracle() {
        // Midpoint sums over subdivided segments integrate a piecewise-linear
        // curve exactly, via a different arithmetic route than the trapezoid.
        fn midpoint_area(points: &[(f64, f64)]) -> f64 {
            let mut area = 0.0;
            for pair in points.windows(2) {
                let (x0, y0) = pair[0];
                let (x1, y1) = pair[1];
                let steps = 16;
                let h = (x1 - x0) / steps as f64;
                for k in 0..steps {
                    let xm = x0 + (k as f64 + 0.5) * h;
                    let frac = if x1 == x0 { 0.5 } else { (xm - x0) / (x1 - x0) };
                    area += h * (y0 + frac * (y1 - y0));
                }
            }
            area
        }
        for seed in 200..205 {
            let (s, g) = random_pair(seed);
            let roc = roc_curve(&s, &g).unwrap();
            let mut pts: Vec<(f64, f64)> = vec![(0.0, 0.0)];
            pts.extend(roc.iter().rev());
            pts.push((1.0, 1.0));
            assert!((auc(&roc) - midpoint_area(&pts)).abs() < 1e-9);

            let pr = pr_curve(&s, &g).unwrap();
            let mut pts: Vec<(f64, f64)> = vec![(0.0, 1.0)];
            pts.extend(pr.iter().rev().map(|&(p, r)| (r, p)));
            assert!((ap(&pr) - midpoint_area(&pts)).abs() < 1e-9);
        }
    }

    #[test]
    fn degenerate_mask_is_signalled() {
        let g = GroundTruthMask::new(4, 4, vec![0; 16]).unwrap();
        let s = SaliencyMap::constant(4, 4, 0.3).unwrap();
        assert!(matches!(pr_curve(&s, &g), Err(Error::DegenerateMask)));
        assert!(matches!(roc_curve(&s, &g), Err(Error::DegenerateMask)));
        // MAE stays defined.
        assert!((mae(&s, &g).unwrap() - 0.3).abs() < 1e-12);
    }

    #[test]
    fn recall_is_non_increasing_in_threshold() {
        let (s, g) = random_pair(55);
        let pr = pr_curve(&s, &g).unwrap();
        for t in 1..256 {
            assert!(pr[t].1 <= pr[t - 1].1 + 1e-15);
        }
    }
}
