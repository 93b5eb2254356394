//! Built-in verification suites: gradient checks against central finite
//! differences, attention algebra invariants, the conv/deconv adjoint
//! identity, metric equivalence against brute-force counting oracles, and
//! the loss closed form.
//!
//! The oracles here recompute everything the slow way (per-pixel rescans,
//! rank statistics, midpoint integration) so they stay independent of the
//! production code paths they check.

use crate::coattention::{attend, coattention_backward, coattention_forward, CoAttentionParams};
use crate::error::Result;
use crate::gradcheck::{central_diff, max_rel_err, rel_err};
use crate::metrics::{
    ap, auc, f_beta, f_beta_report, mae, pr_curve, roc_curve, GroundTruthMask, SaliencyMap,
    ThresholdCounts,
};
use crate::network::{forward_backward_pair, NetworkConfig, NetworkParams};
use crate::tensor::{conv2d, conv2d_backward, deconv2d, deconv2d_backward, ConvKernel, Tensor};
use crate::training::{weighted_bce, LossConfig};
use rand::prelude::*;
use rand_chacha::ChaCha20Rng;

/// Outcome of one verification suite.
#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn pass(name: &'static str, detail: String) -> Self {
        Self { name, passed: true, detail }
    }

    fn fail(name: &'static str, detail: String) -> Self {
        Self { name, passed: false, detail }
    }

    fn from_bound(name: &'static str, worst: f64, bound: f64) -> Self {
        if worst < bound {
            Self::pass(name, format!("worst {worst:.3e} < {bound:.0e}"))
        } else {
            Self::fail(name, format!("worst {worst:.3e} >= {bound:.0e}"))
        }
    }
}

/// Knobs for the selftest run. `inject_gradient_fault` perturbs one analytic
/// gradient before comparison, to prove the harness can fail.
#[derive(Debug, Clone, Default)]
pub struct SelfTestOptions {
    pub inject_gradient_fault: bool,
}

/// Runs every suite and returns one result per check.
pub fn run(opts: &SelfTestOptions) -> Result<Vec<CheckResult>> {
    Ok(vec![
        primitive_gradients(opts)?,
        coattention_gradients()?,
        network_gradients()?,
        adjointness()?,
        attention_algebra()?,
        metric_oracles()?,
        loss_closed_form()?,
    ])
}

fn rng(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

fn random_tensor(shape: &[usize], rng: &mut ChaCha20Rng) -> Tensor {
    let len = shape.iter().product();
    Tensor::new(shape, (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Analytic gradients of conv2d, deconv2d and the activations against
/// central finite differences, tolerance 1e-6.
pub fn primitive_gradients(opts: &SelfTestOptions) -> Result<CheckResult> {
    let name = "primitive-gradients";
    let mut r = rng(0xA11CE);
    let mut worst = 0.0f64;

    for trial in 0..4 {
        let x = random_tensor(&[5, 4, 2], &mut r);
        let w = random_tensor(&[3, 2, 2, 3], &mut r);
        let bias: Vec<f64> = (0..3).map(|_| r.gen_range(-1.0..1.0)).collect();
        let k = ConvKernel::new(w, bias, 1 + trial % 2)?;
        let pad = trial % 2;
        let out = conv2d(&x, &k, pad)?;
        let g = random_tensor(out.shape(), &mut r);
        let mut grads = conv2d_backward(&x, &k, pad, &g)?;
        if opts.inject_gradient_fault {
            grads.input.values_mut()[0] += 1e-3;
        }
        let fd = central_diff(
            &|v| {
                let xt = Tensor::new(x.shape(), v.to_vec()).unwrap();
                conv2d(&xt, &k, pad).unwrap().dot(&g).unwrap()
            },
            x.values(),
            1e-5,
        );
        worst = worst.max(max_rel_err(grads.input.values(), &fd));
        let fd_w = central_diff(
            &|v| {
                let kt = ConvKernel::new(
                    Tensor::new(k.weights().shape(), v.to_vec()).unwrap(),
                    k.bias().to_vec(),
                    k.stride(),
                )
                .unwrap();
                conv2d(&x, &kt, pad).unwrap().dot(&g).unwrap()
            },
            k.weights().values(),
            1e-5,
        );
        worst = worst.max(max_rel_err(grads.weights.values(), &fd_w));
    }

    for _ in 0..4 {
        let x = random_tensor(&[3, 3, 2], &mut r);
        let w = random_tensor(&[3, 3, 3, 2], &mut r);
        let bias: Vec<f64> = (0..3).map(|_| r.gen_range(-1.0..1.0)).collect();
        let k = ConvKernel::new(w, bias, 2)?;
        let out = deconv2d(&x, &k, 1)?;
        let g = random_tensor(out.shape(), &mut r);
        let grads = deconv2d_backward(&x, &k, 1, &g)?;
        let fd = central_diff(
            &|v| {
                let xt = Tensor::new(x.shape(), v.to_vec()).unwrap();
                deconv2d(&xt, &k, 1).unwrap().dot(&g).unwrap()
            },
            x.values(),
            1e-5,
        );
        worst = worst.max(max_rel_err(grads.input.values(), &fd));
        let fd_w = central_diff(
            &|v| {
                let kt = ConvKernel::new(
                    Tensor::new(k.weights().shape(), v.to_vec()).unwrap(),
                    k.bias().to_vec(),
                    k.stride(),
                )
                .unwrap();
                deconv2d(&x, &kt, 1).unwrap().dot(&g).unwrap()
            },
            k.weights().values(),
            1e-5,
        );
        worst = worst.max(max_rel_err(grads.weights.values(), &fd_w));
    }

    Ok(CheckResult::from_bound(name, worst, 1e-6))
}

/// Co-attention module gradients at C=8, N=4 against finite differences,
/// tolerance 1e-5, for every parameter and input entry.
pub fn coattention_gradients() -> Result<CheckResult> {
    let name = "coattention-gradients";
    let mut r = rng(0xCA7);
    let c = 8;
    let params = CoAttentionParams::new(
        random_tensor(&[1, c], &mut r),
        random_tensor(&[1, c], &mut r),
        random_tensor(&[c, c], &mut r),
        random_tensor(&[c, c], &mut r),
        r.gen_range(-1.0..1.0),
        r.gen_range(-1.0..1.0),
    )?;
    let x = random_tensor(&[2, 2, c], &mut r);
    let y = random_tensor(&[2, 2, c], &mut r);
    let gx = random_tensor(&[2, 2, c], &mut r);
    let gy = random_tensor(&[2, 2, c], &mut r);
    let grads = coattention_backward(&x, &y, &params, &gx, &gy)?;

    let objective = |x_: &Tensor, y_: &Tensor, p_: &CoAttentionParams| -> f64 {
        let (xw, yw) = coattention_forward(x_, y_, p_).unwrap();
        xw.dot(&gx).unwrap() + yw.dot(&gy).unwrap()
    };
    let mut worst = 0.0f64;
    let fd = central_diff(
        &|v| objective(&Tensor::new(x.shape(), v.to_vec()).unwrap(), &y, &params),
        x.values(),
        1e-6,
    );
    worst = worst.max(max_rel_err(grads.input_x.values(), &fd));
    let fd = central_diff(
        &|v| objective(&x, &Tensor::new(y.shape(), v.to_vec()).unwrap(), &params),
        y.values(),
        1e-6,
    );
    worst = worst.max(max_rel_err(grads.input_y.values(), &fd));
    for slot in 0..4 {
        let base = match slot {
            0 => &params.wf,
            1 => &params.wg,
            2 => &params.wh1,
            _ => &params.wh2,
        };
        let analytic = match slot {
            0 => &grads.wf,
            1 => &grads.wg,
            2 => &grads.wh1,
            _ => &grads.wh2,
        };
        let fd = central_diff(
            &|v| {
                let mut p2 = params.clone();
                let t = Tensor::new(base.shape(), v.to_vec()).unwrap();
                match slot {
                    0 => p2.wf = t,
                    1 => p2.wg = t,
                    2 => p2.wh1 = t,
                    _ => p2.wh2 = t,
                }
                objective(&x, &y, &p2)
            },
            base.values(),
            1e-6,
        );
        worst = worst.max(max_rel_err(analytic.values(), &fd));
    }
    for slot in 0..2 {
        let fd = central_diff(
            &|v| {
                let mut p2 = params.clone();
                if slot == 0 {
                    p2.gamma1 = v[0];
                } else {
                    p2.gamma2 = v[0];
                }
                objective(&x, &y, &p2)
            },
            &[if slot == 0 { params.gamma1 } else { params.gamma2 }],
            1e-6,
        );
        let analytic = if slot == 0 { grads.gamma1 } else { grads.gamma2 };
        worst = worst.max(max_rel_err(&[analytic], &fd));
    }
    Ok(CheckResult::from_bound(name, worst, 1e-5))
}

/// Full-network gradients at the tiny configuration against finite
/// differences over every parameter coordinate, tolerance 1e-4.
pub fn network_gradients() -> Result<CheckResult> {
    let name = "network-gradients";
    let config = NetworkConfig::tiny();
    let mut params = NetworkParams::init(&config, 0x1000)?;
    params.attention.gamma.values_mut()[0] = 0.41;
    let mut r = rng(0x2000);
    let s = config.input_size;
    let image = |r: &mut ChaCha20Rng| {
        Tensor::new(
            &[s, s, 3],
            (0..s * s * 3).map(|_| r.gen_range(0.0..=1.0)).collect(),
        )
        .unwrap()
    };
    let mask = |r: &mut ChaCha20Rng| {
        GroundTruthMask::new(s, s, (0..s * s).map(|_| r.gen_range(0..=1u8)).collect()).unwrap()
    };
    let (i1, i2) = (image(&mut r), image(&mut r));
    let (g1, g2) = (mask(&mut r), mask(&mut r));
    let cfg = LossConfig::default();
    let (_, grads) = forward_backward_pair(&i1, &i2, &g1, &g2, &params, &cfg)?;
    let analytic = grads.flatten();
    let flat = params.flatten();
    let mut probe = params.clone();
    let mut worst = 0.0f64;
    let mut buffer = flat.clone();
    for i in 0..flat.len() {
        buffer[i] = flat[i] + 1e-6;
        probe.assign_from_flat(&buffer)?;
        let (lp, _) = forward_backward_pair(&i1, &i2, &g1, &g2, &probe, &cfg)?;
        buffer[i] = flat[i] - 1e-6;
        probe.assign_from_flat(&buffer)?;
        let (lm, _) = forward_backward_pair(&i1, &i2, &g1, &g2, &probe, &cfg)?;
        buffer[i] = flat[i];
        worst = worst.max(rel_err(analytic[i], (lp - lm) / 2e-6));
    }
    probe.assign_from_flat(&flat)?;
    Ok(CheckResult::from_bound(name, worst, 1e-4))
}

/// The conv/deconv adjoint identity on 50 random shape-compatible instances,
/// tolerance 1e-12.
pub fn adjointness() -> Result<CheckResult> {
    let name = "adjointness";
    let mut r = rng(0xADA);
    let mut worst = 0.0f64;
    let mut done = 0;
    while done < 50 {
        let in_c = r.gen_range(1..4);
        let out_c = r.gen_range(1..4);
        let stride = r.gen_range(1..3usize);
        let kh = r.gen_range(1..4usize);
        let pad = r.gen_range(0..kh);
        let conv_out = r.gen_range(1..6usize);
        let yh = match ((conv_out - 1) * stride + kh).checked_sub(2 * pad) {
            Some(v) if v >= 1 => v,
            _ => continue,
        };
        let w = random_tensor(&[kh, kh, in_c, out_c], &mut r);
        let y = random_tensor(&[yh, yh, in_c], &mut r);
        let k_conv = ConvKernel::new(w.clone(), vec![0.0; out_c], stride)?;
        let cy = conv2d(&y, &k_conv, pad)?;
        let x = random_tensor(cy.shape(), &mut r);
        let k_deconv = ConvKernel::new(w, vec![0.0; in_c], stride)?;
        let dx = deconv2d(&x, &k_deconv, pad)?;
        let lhs = dx.dot(&y)?;
        let rhs = x.dot(&cy)?;
        worst = worst.max((lhs - rhs).abs());
        done += 1;
    }
    Ok(CheckResult::from_bound(name, worst, 1e-12))
}

/// Attention normalization, the zero-gate bitwise identity, and bitwise
/// input-swap symmetry.
pub fn attention_algebra() -> Result<CheckResult> {
    let name = "attention-algebra";
    let mut r = rng(0xA1);
    let c = 8;
    for trial in 0..10 {
        let params = CoAttentionParams::new(
            random_tensor(&[1, c], &mut r),
            random_tensor(&[1, c], &mut r),
            random_tensor(&[c, c], &mut r),
            random_tensor(&[c, c], &mut r),
            r.gen_range(-1.0..1.0),
            r.gen_range(-1.0..1.0),
        )?;
        let x = random_tensor(&[2, 2, c], &mut r);
        let y = random_tensor(&[2, 2, c], &mut r);

        let att = attend(&x, &y, &params)?;
        if !att.alpha_x.is_normalized(1e-9) || !att.alpha_y.is_normalized(1e-9) {
            return Ok(CheckResult::fail(
                name,
                format!("attention slice not normalized at trial {trial}"),
            ));
        }

        let mut zero_gate = params.clone();
        zero_gate.gamma1 = 0.0;
        zero_gate.gamma2 = 0.0;
        let (xw, yw) = coattention_forward(&x, &y, &zero_gate)?;
        if xw != x || yw != y {
            return Ok(CheckResult::fail(
                name,
                format!("zero gate is not a bitwise identity at trial {trial}"),
            ));
        }

        let (xw, yw) = coattention_forward(&x, &y, &params)?;
        let (yw2, xw2) = coattention_forward(&y, &x, &params.swapped())?;
        if xw != xw2 || yw != yw2 {
            return Ok(CheckResult::fail(
                name,
                format!("input-swap symmetry broken at trial {trial}"),
            ));
        }
    }
    Ok(CheckResult::pass(name, "normalization, zero-gate identity, swap symmetry".into()))
}

/// PR/ROC equality against per-pixel rescans on 100 random 8x8 pairs,
/// hand-formula F-beta and MAE to 1e-12, AUC/AP against independent
/// integration oracles to 1e-9.
pub fn metric_oracles() -> Result<CheckResult> {
    let name = "metric-oracles";
    let mut r = rng(0x0AC1E);
    let mut worst_area = 0.0f64;
    for trial in 0..100 {
        let values: Vec<f64> = (0..64).map(|_| r.gen_range(0.0..=1.0)).collect();
        let mut mask: Vec<u8> = (0..64).map(|_| r.gen_range(0..=1u8)).collect();
        if mask.iter().all(|&v| v == 0) {
            mask[17] = 1;
        }
        let s = SaliencyMap::new(8, 8, values)?;
        let g = GroundTruthMask::new(8, 8, mask)?;

        let counts = ThresholdCounts::compute(&s, &g)?;
        let pr = pr_curve(&s, &g)?;
        let roc = roc_curve(&s, &g)?;
        for t in 0..256 {
            let (tp, fp, fng, tn) = rescan(&s, &g, t as u8);
            if counts.tp[t] != tp || counts.fp[t] != fp {
                return Ok(CheckResult::fail(
                    name,
                    format!("confusion counts diverge at trial {trial}, threshold {t}"),
                ));
            }
            let precision = if tp + fp == 0 { 1.0 } else { tp as f64 / (tp + fp) as f64 };
            let recall = tp as f64 / (tp + fng) as f64;
            if (pr[t].0 - precision).abs() > 1e-12 || (pr[t].1 - recall).abs() > 1e-12 {
                return Ok(CheckResult::fail(
                    name,
                    format!("PR diverges at trial {trial}, threshold {t}"),
                ));
            }
            let fpr = if fp + tn == 0 { 0.0 } else { fp as f64 / (fp + tn) as f64 };
            if (roc[t].0 - fpr).abs() > 1e-12 || (roc[t].1 - recall).abs() > 1e-12 {
                return Ok(CheckResult::fail(
                    name,
                    format!("ROC diverges at trial {trial}, threshold {t}"),
                ));
            }
        }

        // Hand-formula F-beta at the max and MAE.
        let f_max = pr
            .iter()
            .map(|&(p, rr)| {
                let d = 0.3 * p + rr;
                if d == 0.0 {
                    0.0
                } else {
                    1.3 * p * rr / d
                }
            })
            .fold(0.0, f64::max);
        if (f_beta_report(&s, &g, 0.3)? - f_max).abs() > 1e-12 {
            return Ok(CheckResult::fail(name, format!("F-beta diverges at trial {trial}")));
        }
        let mae_hand = s
            .values()
            .iter()
            .zip(g.values())
            .map(|(&p, &t)| (p - f64::from(t)).abs())
            .sum::<f64>()
            / 64.0;
        if (mae(&s, &g)? - mae_hand).abs() > 1e-12 {
            return Ok(CheckResult::fail(name, format!("MAE diverges at trial {trial}")));
        }

        worst_area = worst_area.max((auc(&roc) - auc_rank_oracle(&s, &g)).abs());
        worst_area = worst_area.max((auc(&roc) - midpoint_oracle_roc(&roc)).abs());
        worst_area = worst_area.max((ap(&pr) - midpoint_oracle_pr(&pr)).abs());
        if f_beta(1.0, 1.0, 0.3) != 1.0 {
            return Ok(CheckResult::fail(name, "F-beta identity broken".into()));
        }
    }
    Ok(CheckResult::from_bound(name, worst_area, 1e-9))
}

/// Loss closed form on the half-ones case and its gradient against finite
/// differences at 1e-7.
pub fn loss_closed_form() -> Result<CheckResult> {
    let name = "loss-closed-form";
    let cfg = LossConfig::default();
    let p = SaliencyMap::constant(4, 4, 0.5)?;
    let g = GroundTruthMask::new(4, 4, (0..16).map(|i| u8::from(i < 8)).collect())?;
    let (loss, _) = weighted_bce(&p, &g, &cfg)?;
    if (loss - 0.34657).abs() > 1e-5 {
        return Ok(CheckResult::fail(name, format!("half-ones loss {loss} != 0.34657")));
    }

    let mut r = rng(0x105);
    let values: Vec<f64> = (0..16).map(|_| r.gen_range(0.05..0.95)).collect();
    let pm = SaliencyMap::new(4, 4, values.clone())?;
    let gm = GroundTruthMask::new(4, 4, (0..16).map(|_| r.gen_range(0..=1u8)).collect())?;
    let (_, grad) = weighted_bce(&pm, &gm, &cfg)?;
    let fd = central_diff(
        &|v| {
            let m = SaliencyMap::new(4, 4, v.to_vec()).unwrap();
            weighted_bce(&m, &gm, &cfg).unwrap().0
        },
        &values,
        1e-7,
    );
    let worst = max_rel_err(grad.values(), &fd);
    Ok(CheckResult::from_bound(name, worst, 1e-7))
}

fn rescan(s: &SaliencyMap, g: &GroundTruthMask, t: u8) -> (u64, u64, u64, u64) {
    let (mut tp, mut fp, mut fng, mut tn) = (0, 0, 0, 0);
    for (idx, &truth) in g.values().iter().enumerate() {
        let fg = s.level(idx) >= t;
        match (fg, truth == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fng += 1,
            (false, false) => tn += 1,
        }
    }
    (tp, fp, fng, tn)
}

/// AUC as the rank statistic: P(level(fg) > level(bg)) with ties half-counted.
fn auc_rank_oracle(s: &SaliencyMap, g: &GroundTruthMask) -> f64 {
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
    if total == 0.0 {
        1.0
    } else {
        concordant / total
    }
}

fn midpoint_area(points: &[(f64, f64)]) -> f64 {
    let mut area = 0.0;
    for pair in points.windows(2) {
        let (x0, y0) = pair[0];
        let (x1, y1) = pair[1];
        let steps = 16;
        let h = (x1 - x0) / steps as f64;
        for k in 0..steps {
            let frac = (k as f64 + 0.5) / steps as f64;
            area += h * (y0 + frac * (y1 - y0));
        }
    }
    area
}

fn midpoint_oracle_roc(roc: &[(f64, f64)]) -> f64 {
    let mut pts: Vec<(f64, f64)> = vec![(0.0, 0.0)];
    pts.extend(roc.iter().rev());
    pts.push((1.0, 1.0));
    midpoint_area(&pts)
}

fn midpoint_oracle_pr(pr: &[(f64, f64)]) -> f64 {
    let mut pts: Vec<(f64, f64)> = vec![(0.0, 1.0)];
    pts.extend(pr.iter().rev().map(|&(p, r)| (r, p)));
    midpoint_area(&pts)
}
