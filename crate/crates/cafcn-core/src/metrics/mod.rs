//! Saliency evaluation: 256-threshold PR and ROC curves, F-beta, MAE, AUC,
//! AP, weighted F-beta and the S-measure, plus dataset-level aggregation.
//!
//! Maps are quantized to 8-bit levels with `round(v * 255)` before
//! thresholding, so file-loaded and in-memory maps evaluate identically. A
//! pixel is foreground at threshold `t` when its level is `>= t`. Precision
//! of an empty prediction is defined as 1 (no false positives). Images whose
//! ground truth has no foreground are excluded from recall-bearing aggregates
//! and counted in the report.

mod curves;
mod structure;
mod weighted;

pub use curves::{
    ap, auc, f_beta, f_beta_adaptive, f_beta_report, pr_curve, roc_curve, ThresholdCounts,
};
pub use structure::s_measure;
pub use weighted::f_beta_weighted;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::fmt::Write as _;

/// Default `beta^2` for the F-measure.
pub const DEFAULT_BETA_SQ: f64 = 0.3;
/// Default mixing weight of the S-measure.
pub const DEFAULT_S_ALPHA: f64 = 0.5;

/// Per-pixel saliency prediction with values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl SaliencyMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::Dimension(format!(
                "saliency map {height}x{width} needs {} values, got {}",
                height * width,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
            return Err(Error::Validation("saliency values must lie in [0, 1]".into()));
        }
        Ok(Self { height, width, values })
    }

    /// Builds a map from 8-bit levels, normalizing by 255.
    pub fn from_levels(height: usize, width: usize, levels: &[u8]) -> Result<Self> {
        let values = levels.iter().map(|&l| f64::from(l) / 255.0).collect();
        Self::new(height, width, values)
    }

    pub fn constant(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(height, width, vec![value; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// 8-bit level of one pixel under the quantization rule.
    #[inline]
    pub fn level(&self, idx: usize) -> u8 {
        (self.values[idx] * 255.0).round() as u8
    }

    pub fn levels(&self) -> Vec<u8> {
        (0..self.values.len()).map(|i| self.level(i)).collect()
    }

    /// Converts an `H x W x 1` (or `H x W`) tensor into a map, clamping tiny
    /// numeric excursions outside [0, 1].
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let s = t.shape();
        let (h, w) = match s.len() {
            2 => (s[0], s[1]),
            3 if s[2] == 1 => (s[0], s[1]),
            _ => {
                return Err(Error::Dimension(format!(
                    "expected H x W x 1 tensor, got {s:?}"
                )))
            }
        };
        let values = t.values().iter().map(|v| v.clamp(0.0, 1.0)).collect();
        Self::new(h, w, values)
    }
}

/// Binary reference mask.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthMask {
    height: usize,
    width: usize,
    values: Vec<u8>,
}

impl GroundTruthMask {
    pub fn new(height: usize, width: usize, values: Vec<u8>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::Dimension(format!(
                "mask {height}x{width} needs {} values, got {}",
                height * width,
                values.len()
            )));
        }
        if values.iter().any(|&v| v > 1) {
            return Err(Error::Validation("mask values must be 0 or 1".into()));
        }
        Ok(Self { height, width, values })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    pub fn foreground_count(&self) -> usize {
        self.values.iter().filter(|&&v| v == 1).count()
    }
}

pub(crate) fn check_same_size(s: &SaliencyMap, g: &GroundTruthMask) -> Result<()> {
    if s.height != g.height || s.width != g.width {
        return Err(Error::Dimension(format!(
            "map {}x{} vs mask {}x{}",
            s.height, s.width, g.height, g.width
        )));
    }
    Ok(())
}

/// Mean absolute difference between map and mask over all pixels.
pub fn mae(s: &SaliencyMap, g: &GroundTruthMask) -> Result<f64> {
    check_same_size(s, g)?;
    let sum: f64 = s
        .values
        .iter()
        .zip(&g.values)
        .map(|(&p, &t)| (p - f64::from(t)).abs())
        .sum();
    Ok(sum / s.values.len() as f64)
}

/// All scalar metrics plus the averaged 256-point curves for one run.
#[derive(Debug, Clone)]
pub struct MetricReport {
    pub f_beta: f64,
    pub mae: f64,
    pub auc: f64,
    pub ap: f64,
    pub f_beta_weighted: f64,
    pub s_measure: f64,
    /// Per-threshold (precision, recall), averaged over contributing images.
    pub pr_curve: Vec<(f64, f64)>,
    /// Per-threshold (fpr, tpr), averaged over contributing images.
    pub roc_curve: Vec<(f64, f64)>,
    pub images: usize,
    pub degenerate_skipped: usize,
}

impl MetricReport {
    /// Flat `key=value` rendering with a fixed key order, for diffable files.
    pub fn to_key_values(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "f_beta={:.6}", self.f_beta);
        let _ = writeln!(out, "mae={:.6}", self.mae);
        let _ = writeln!(out, "auc={:.6}", self.auc);
        let _ = writeln!(out, "ap={:.6}", self.ap);
        let _ = writeln!(out, "f_beta_w={:.6}", self.f_beta_weighted);
        let _ = writeln!(out, "s_measure={:.6}", self.s_measure);
        let _ = writeln!(out, "images={}", self.images);
        let _ = writeln!(out, "degenerate_skipped={}", self.degenerate_skipped);
        out
    }

    /// CSV of the averaged curves, one row per threshold.
    pub fn curves_csv(&self) -> String {
        let mut out = String::from("threshold,precision,recall,fpr,tpr\n");
        for t in 0..256 {
            let (p, r) = self.pr_curve[t];
            let (fpr, tpr) = self.roc_curve[t];
            let _ = writeln!(out, "{t},{p:.6},{r:.6},{fpr:.6},{tpr:.6}");
        }
        out
    }
}

/// Evaluates a dataset with the default `beta^2` and S-measure alpha.
pub fn evaluate_dataset(pairs: &[(SaliencyMap, GroundTruthMask)]) -> Result<MetricReport> {
    evaluate_dataset_with(pairs, DEFAULT_BETA_SQ, DEFAULT_S_ALPHA)
}

/// Evaluates a dataset: per-image metrics averaged arithmetically, curves
/// averaged pointwise per threshold index. Images whose mask has no
/// foreground contribute only to MAE and the S-measure and are counted in
/// the report.
pub fn evaluate_dataset_with(
    pairs: &[(SaliencyMap, GroundTruthMask)],
    beta_sq: f64,
    s_alpha: f64,
) -> Result<MetricReport> {
    if pairs.is_empty() {
        return Err(Error::Usage("cannot evaluate an empty dataset".into()));
    }
    let mut mae_sum = 0.0;
    let mut s_measure_sum = 0.0;
    let mut f_beta_sum = 0.0;
    let mut auc_sum = 0.0;
    let mut ap_sum = 0.0;
    let mut wfb_sum = 0.0;
    let mut pr_acc = vec![(0.0, 0.0); 256];
    let mut roc_acc = vec![(0.0, 0.0); 256];
    let mut contributing = 0usize;
    let mut skipped = 0usize;

    for (s, g) in pairs {
        check_same_size(s, g)?;
        mae_sum += mae(s, g)?;
        s_measure_sum += s_measure(s, g, s_alpha)?;
        match pr_curve(s, g) {
            Err(Error::DegenerateMask) => {
                skipped += 1;
                continue;
            }
            Err(e) => return Err(e),
            Ok(pr) => {
                let roc = roc_curve(s, g)?;
                f_beta_sum += f_beta_report(s, g, beta_sq)?;
                auc_sum += auc(&roc);
                ap_sum += ap(&pr);
                wfb_sum += f_beta_weighted(s, g)?;
                for t in 0..256 {
                    pr_acc[t].0 += pr[t].0;
                    pr_acc[t].1 += pr[t].1;
                    roc_acc[t].0 += roc[t].0;
                    roc_acc[t].1 += roc[t].1;
                }
                contributing += 1;
            }
        }
    }
    if contributing == 0 {
        return Err(Error::Usage(
            "every ground truth in the dataset is degenerate (no foreground)".into(),
        ));
    }
    let n = pairs.len() as f64;
    let m = contributing as f64;
    for t in 0..256 {
        pr_acc[t].0 /= m;
        pr_acc[t].1 /= m;
        roc_acc[t].0 /= m;
        roc_acc[t].1 /= m;
    }
    Ok(MetricReport {
        f_beta: f_beta_sum / m,
        mae: mae_sum / n,
        auc: auc_sum / m,
        ap: ap_sum / m,
        f_beta_weighted: wfb_sum / m,
        s_measure: s_measure_sum / n,
        pr_curve: pr_acc,
        roc_curve: roc_acc,
        images: pairs.len(),
        degenerate_skipped: skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn checker(h: usize, w: usize) -> GroundTruthMask {
        let values = (0..h * w).map(|i| (i % 2) as u8).collect();
        GroundTruthMask::new(h, w, values).unwrap()
    }

    fn map_of_mask(g: &GroundTruthMask) -> SaliencyMap {
        SaliencyMap::new(
            g.height(),
            g.width(),
            g.values().iter().map(|&v| f64::from(v)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn mae_cases() {
        let g = checker(4, 4);
        let s = map_of_mask(&g);
        assert_eq!(mae(&s, &g).unwrap(), 0.0);

        let ones = SaliencyMap::constant(2, 2, 1.0).unwrap();
        let zeros = GroundTruthMask::new(2, 2, vec![0; 4]).unwrap();
        assert_eq!(mae(&ones, &zeros).unwrap(), 1.0);

        let s = SaliencyMap::new(1, 2, vec![0.2, 0.4]).unwrap();
        let g = GroundTruthMask::new(1, 2, vec![0, 1]).unwrap();
        assert!((mae(&s, &g).unwrap() - 0.4).abs() < 1e-15);
    }

    #[test]
    fn mask_rejects_non_binary() {
        assert!(GroundTruthMask::new(1, 2, vec![0, 2]).is_err());
    }

    #[test]
    fn evaluate_single_image_dataset_equals_image_metrics() {
        let g = checker(8, 8);
        let s = map_of_mask(&g);
        let report = evaluate_dataset(&[(s.clone(), g.clone())]).unwrap();
        assert!((report.f_beta - 1.0).abs() < 1e-12);
        assert_eq!(report.mae, 0.0);
        assert!((report.auc - 1.0).abs() < 1e-12);
        assert!((report.ap - 1.0).abs() < 1e-12);
        assert!((report.s_measure - 1.0).abs() < 1e-6);
        assert_eq!(report.images, 1);
        assert_eq!(report.degenerate_skipped, 0);
    }

    #[test]
    fn evaluate_duplicated_image_is_idempotent() {
        let g = checker(8, 8);
        let mut values = vec![0.0; 64];
        for (i, v) in values.iter_mut().enumerate() {
            *v = ((i * 37) % 256) as f64 / 255.0;
        }
        let s = SaliencyMap::new(8, 8, values).unwrap();
        let one = evaluate_dataset(&[(s.clone(), g.clone())]).unwrap();
        let two = evaluate_dataset(&[(s.clone(), g.clone()), (s, g)]).unwrap();
        assert!((one.f_beta - two.f_beta).abs() < 1e-12);
        assert!((one.mae - two.mae).abs() < 1e-12);
        assert!((one.auc - two.auc).abs() < 1e-12);
        assert!((one.s_measure - two.s_measure).abs() < 1e-12);
    }

    #[test]
    fn evaluate_two_images_is_the_hand_mean() {
        let g1 = checker(8, 8);
        let s1 = map_of_mask(&g1);
        let mut v2 = vec![0.25; 64];
        v2[3] = 0.9;
        let s2 = SaliencyMap::new(8, 8, v2).unwrap();
        let g2 = GroundTruthMask::new(8, 8, (0..64).map(|i| u8::from(i < 16)).collect()).unwrap();
        let a = evaluate_dataset(&[(s1.clone(), g1.clone())]).unwrap();
        let b = evaluate_dataset(&[(s2.clone(), g2.clone())]).unwrap();
        let both = evaluate_dataset(&[(s1, g1), (s2, g2)]).unwrap();
        assert!((both.f_beta - (a.f_beta + b.f_beta) / 2.0).abs() < 1e-12);
        assert!((both.mae - (a.mae + b.mae) / 2.0).abs() < 1e-12);
        assert!((both.ap - (a.ap + b.ap) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_masks_are_counted_and_skipped() {
        let g_ok = checker(8, 8);
        let s = map_of_mask(&g_ok);
        let g_empty = GroundTruthMask::new(8, 8, vec![0; 64]).unwrap();
        let s_empty = SaliencyMap::constant(8, 8, 0.2).unwrap();
        let report =
            evaluate_dataset(&[(s, g_ok), (s_empty, g_empty)]).unwrap();
        assert_eq!(report.images, 2);
        assert_eq!(report.degenerate_skipped, 1);
        // MAE still averages over both images.
        assert!((report.mae - 0.1).abs() < 1e-12);
    }

    #[test]
    fn report_rendering_is_stable() {
        let g = checker(8, 8);
        let s = map_of_mask(&g);
        let report = evaluate_dataset(&[(s, g)]).unwrap();
        let text = report.to_key_values();
        let keys: Vec<&str> = text.lines().map(|l| l.split('=').next().unwrap()).collect();
        assert_eq!(
            keys,
            ["f_beta", "mae", "auc", "ap", "f_beta_w", "s_measure", "images", "degenerate_skipped"]
        );
        let csv = report.curves_csv();
        assert_eq!(csv.lines().count(), 257);
        assert!(csv.starts_with("threshold,precision,recall,fpr,tpr"));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn mae_is_complement_symmetric(values in proptest::collection::vec(0.0f64..=1.0, 16),
                                           mask in proptest::collection::vec(0u8..=1, 16)) {
                let s = SaliencyMap::new(4, 4, values.clone()).unwrap();
                let g = GroundTruthMask::new(4, 4, mask.clone()).unwrap();
                let s_inv = SaliencyMap::new(4, 4, values.iter().map(|v| 1.0 - v).collect()).unwrap();
                let g_inv = GroundTruthMask::new(4, 4, mask.iter().map(|v| 1 - v).collect()).unwrap();
                prop_assert!((mae(&s, &g).unwrap() - mae(&s_inv, &g_inv).unwrap()).abs() < 1e-12);
            }
        }
    }
}
