//! Saliency evaluation: MAE, precision-recall curve, F-measure, S-measure
//! (structure) and E-measure (enhanced alignment).
//!
//! Every reduction over pixels goes through [`order_invariant_sum`], so the
//! metrics are bit-identical under any joint rearrangement of prediction and
//! ground truth (flips, rotations).

#[cfg_attr(feature = "std", allow(unused_imports))]
use num_traits::Float;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::scalar::{order_invariant_sum, Real};
use crate::shape_err;
use crate::tensor::Tensor;

pub const PR_POINTS: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FVariant {
    /// Maximum over the 256 thresholds.
    #[default]
    Max,
    /// Single threshold at `min(2 * mean(s), 1)`.
    Adaptive,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricConfig {
    pub beta2: f64,
    pub alpha: f64,
    /// Guard in the alignment denominator. Larger values bias `E(gt, gt)`
    /// below 1 on images with a small foreground.
    pub e_eps: f64,
    pub f_variant: FVariant,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            beta2: 0.3,
            alpha: 0.5,
            e_eps: f64::EPSILON,
            f_variant: FVariant::Max,
        }
    }
}

/// A prediction/ground-truth pair flattened to `f64`, with the ground truth
/// binarized (`>= 0.5`).
struct Pair {
    h: usize,
    w: usize,
    s: Vec<f64>,
    gt: Vec<bool>,
}

impl Pair {
    fn new<T: Real>(s: &Tensor<T>, gt: &Tensor<T>) -> Result<Self> {
        let (h, w) = map_dims(s)?;
        let (gh, gw) = map_dims(gt)?;
        if (h, w) != (gh, gw) {
            return Err(shape_err!("metrics", "prediction is {h}x{w}, ground truth is {gh}x{gw}"));
        }
        Ok(Self {
            h,
            w,
            s: s.data().iter().map(|v| v.as_f64()).collect(),
            gt: gt.data().iter().map(|v| v.as_f64() >= 0.5).collect(),
        })
    }

    fn n(&self) -> usize {
        self.s.len()
    }

    fn positives(&self) -> usize {
        self.gt.iter().filter(|&&g| g).count()
    }
}

fn map_dims<T: Real>(m: &Tensor<T>) -> Result<(usize, usize)> {
    match m.shape()[..] {
        [h, w] | [h, w, 1] => Ok((h, w)),
        _ => Err(shape_err!("metrics", "expected an H x W map, got {:?}", m.shape())),
    }
}

fn mean_of(mut v: Vec<f64>) -> f64 {
    let n = v.len() as f64;
    order_invariant_sum(&mut v) / n
}

pub fn mae<T: Real>(s: &Tensor<T>, gt: &Tensor<T>) -> Result<f64> {
    let p = Pair::new(s, gt)?;
    Ok(mean_of(
        p.s.iter()
            .zip(&p.gt)
            .map(|(&v, &g)| (v - if g { 1.0 } else { 0.0 }).abs())
            .collect(),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub tp: usize,
    pub fp: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrCurve {
    pub points: Vec<PrPoint>,
    pub positives: usize,
    pub pixels: usize,
}

pub fn threshold(k: usize) -> f64 {
    k as f64 / 255.0
}

/// Number of thresholds `k/255` with `k/255 <= v`, minus one (the highest
/// threshold index `v` passes), or `None` if `v` is below threshold 0.
fn highest_passed(v: f64) -> Option<usize> {
    if v.is_nan() || v < 0.0 {
        return None;
    }
    let mut k = ((v * 255.0).floor() as i64).clamp(0, 255) as usize;
    while k < 255 && v >= threshold(k + 1) {
        k += 1;
    }
    while k > 0 && v < threshold(k) {
        k -= 1;
    }
    Some(k)
}

pub fn precision_recall(tp: usize, fp: usize, positives: usize) -> (f64, f64) {
    let precision = if tp + fp == 0 { 1.0 } else { tp as f64 / (tp + fp) as f64 };
    let recall = tp as f64 / positives as f64;
    (precision, recall)
}

/// Precision and recall of `s >= k/255` for `k = 0..=255`. An empty
/// prediction has precision 1.
pub fn pr_curve<T: Real>(s: &Tensor<T>, gt: &Tensor<T>) -> Result<PrCurve> {
    let p = Pair::new(s, gt)?;
    pr_curve_of(&p)
}

fn pr_curve_of(p: &Pair) -> Result<PrCurve> {
    let positives = p.positives();
    if positives == 0 {
        return Err(Error::EmptyForeground);
    }
    let mut fg = [0usize; PR_POINTS];
    let mut bg = [0usize; PR_POINTS];
    for (&v, &g) in p.s.iter().zip(&p.gt) {
        if let Some(k) = highest_passed(v) {
            if g {
                fg[k] += 1;
            } else {
                bg[k] += 1;
            }
        }
    }
    let mut points = vec![
        PrPoint {
            threshold: 0.0,
            precision: 0.0,
            recall: 0.0,
            tp: 0,
            fp: 0,
        };
        PR_POINTS
    ];
    let (mut tp, mut fp) = (0, 0);
    for k in (0..PR_POINTS).rev() {
        tp += fg[k];
        fp += bg[k];
        let (precision, recall) = precision_recall(tp, fp, positives);
        points[k] = PrPoint {
            threshold: threshold(k),
            precision,
            recall,
            tp,
            fp,
        };
    }
    Ok(PrCurve {
        points,
        positives,
        pixels: p.n(),
    })
}

/// `(1 + b2) P R / (b2 P + R)`, 0 when `P = R = 0`.
pub fn f_beta(precision: f64, recall: f64, beta2: f64) -> f64 {
    let den = beta2 * precision + recall;
    if den == 0.0 {
        0.0
    } else {
        (1.0 + beta2) * precision * recall / den
    }
}

pub fn max_f_of_curve(curve: &PrCurve, beta2: f64) -> f64 {
    curve
        .points
        .iter()
        .map(|pt| f_beta(pt.precision, pt.recall, beta2))
        .fold(0.0, f64::max)
}

pub fn f_measure<T: Real>(s: &Tensor<T>, gt: &Tensor<T>, beta2: f64) -> Result<f64> {
    Ok(max_f_of_curve(&pr_curve(s, gt)?, beta2))
}

fn adaptive_threshold(s: &[f64]) -> f64 {
    (2.0 * mean_of(s.to_vec())).min(1.0)
}

/// Adaptive binarization. A zero score is never foreground, so an all-zero
/// map (threshold 0) stays empty.
fn adaptive_fg(v: f64, t: f64) -> bool {
    v >= t && v > 0.0
}

/// F-measure at the adaptive threshold `min(2 * mean(s), 1)`.
pub fn adaptive_f_measure<T: Real>(s: &Tensor<T>, gt: &Tensor<T>, beta2: f64) -> Result<f64> {
    let p = Pair::new(s, gt)?;
    let positives = p.positives();
    if positives == 0 {
        return Err(Error::EmptyForeground);
    }
    let t = adaptive_threshold(&p.s);
    let (mut tp, mut fp) = (0, 0);
    for (&v, &g) in p.s.iter().zip(&p.gt) {
        if adaptive_fg(v, t) {
            if g {
                tp += 1;
            } else {
                fp += 1;
            }
        }
    }
    let (pr, rc) = precision_recall(tp, fp, positives);
    Ok(f_beta(pr, rc, beta2))
}

/// Enhanced-alignment measure with the adaptive binarization threshold.
pub fn e_measure<T: Real>(s: &Tensor<T>, gt: &Tensor<T>, eps: f64) -> Result<f64> {
    let p = Pair::new(s, gt)?;
    Ok(e_measure_of(&p, eps))
}

fn e_measure_of(p: &Pair, eps: f64) -> f64 {
    let n = p.n();
    let t = adaptive_threshold(&p.s);
    // counts[gt][fm]
    let mut counts = [[0usize; 2]; 2];
    for (&v, &g) in p.s.iter().zip(&p.gt) {
        counts[g as usize][adaptive_fg(v, t) as usize] += 1;
    }
    let positives = counts[1][0] + counts[1][1];
    let predicted = counts[0][1] + counts[1][1];
    if positives == 0 {
        return (n - predicted) as f64 / n as f64;
    }
    if positives == n {
        return predicted as f64 / n as f64;
    }
    let mu_gt = positives as f64 / n as f64;
    let mu_fm = predicted as f64 / n as f64;
    let mut parts = Vec::with_capacity(4);
    for g in 0..2 {
        for f in 0..2 {
            let c = counts[g][f];
            if c == 0 {
                continue;
            }
            let a = g as f64 - mu_gt;
            let b = f as f64 - mu_fm;
            let align = 2.0 * a * b / (a * a + b * b + eps);
            let enhanced = (align + 1.0) * (align + 1.0) / 4.0;
            parts.push(enhanced * c as f64);
        }
    }
    order_invariant_sum(&mut parts) / n as f64
}

const S_EPS: f64 = f64::EPSILON;

fn mean_std(values: Vec<f64>) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = mean_of(values.clone());
    if n < 2 {
        return (mean, 0.0);
    }
    let mut sq: Vec<f64> = values.iter().map(|v| (v - mean) * (v - mean)).collect();
    (mean, (order_invariant_sum(&mut sq) / (n - 1) as f64).sqrt())
}

fn object_score(values: Vec<f64>) -> f64 {
    let (x, sigma) = mean_std(values);
    2.0 * x / (x * x + 1.0 + sigma + S_EPS)
}

fn s_object(p: &Pair) -> f64 {
    let fg: Vec<f64> = p.s.iter().zip(&p.gt).filter(|(_, &g)| g).map(|(&v, _)| v).collect();
    let bg: Vec<f64> = p.s.iter().zip(&p.gt).filter(|(_, &g)| !g).map(|(&v, _)| 1.0 - v).collect();
    let u = fg.len() as f64 / p.n() as f64;
    u * object_score(fg) + (1.0 - u) * object_score(bg)
}

/// Structural similarity of one region.
fn region_ssim(pred: &[f64], gt: &[f64]) -> f64 {
    let n = pred.len();
    if n == 0 {
        return 0.0;
    }
    let x = mean_of(pred.to_vec());
    let y = mean_of(gt.to_vec());
    let den = n as f64 - 1.0 + S_EPS;
    let mut sxx: Vec<f64> = pred.iter().map(|v| (v - x) * (v - x)).collect();
    let mut syy: Vec<f64> = gt.iter().map(|v| (v - y) * (v - y)).collect();
    let mut sxy: Vec<f64> = pred.iter().zip(gt).map(|(a, b)| (a - x) * (b - y)).collect();
    let sx2 = order_invariant_sum(&mut sxx) / den;
    let sy2 = order_invariant_sum(&mut syy) / den;
    let sxy = order_invariant_sum(&mut sxy) / den;
    let alpha = 4.0 * x * y * sxy;
    let beta = (x * x + y * y) * (sx2 + sy2);
    if alpha != 0.0 {
        alpha / (beta + S_EPS)
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Grid lines closest to the continuous centroid `sum / count + 0.5`
/// (pixel `i` spans `[i, i + 1)`). Both neighbours are returned on an exact tie.
fn split_candidates(sum: usize, count: usize) -> Vec<usize> {
    // t = (2 sum + count) / (2 count)
    let num = 2 * sum + count;
    let den = 2 * count;
    let q = num / den;
    let r = num % den;
    match (2 * r).cmp(&den) {
        core::cmp::Ordering::Less => vec![q],
        core::cmp::Ordering::Greater => vec![q + 1],
        core::cmp::Ordering::Equal => vec![q, q + 1],
    }
}

fn s_region_at(p: &Pair, cx: usize, cy: usize) -> f64 {
    let (h, w) = (p.h, p.w);
    let n = p.n() as f64;
    let mut terms = Vec::with_capacity(4);
    for (r0, r1) in [(0, cy), (cy, h)] {
        for (c0, c1) in [(0, cx), (cx, w)] {
            let area = (r1 - r0) * (c1 - c0);
            if area == 0 {
                continue;
            }
            let mut pred = Vec::with_capacity(area);
            let mut gt = Vec::with_capacity(area);
            for r in r0..r1 {
                for c in c0..c1 {
                    pred.push(p.s[r * w + c]);
                    gt.push(if p.gt[r * w + c] { 1.0 } else { 0.0 });
                }
            }
            terms.push(area as f64 / n * region_ssim(&pred, &gt));
        }
    }
    order_invariant_sum(&mut terms)
}

fn s_region(p: &Pair) -> f64 {
    let (h, w) = (p.h, p.w);
    let (mut sx, mut sy, mut count) = (0usize, 0usize, 0usize);
    for r in 0..h {
        for c in 0..w {
            if p.gt[r * w + c] {
                sx += c;
                sy += r;
                count += 1;
            }
        }
    }
    let (xs, ys) = if count == 0 {
        (split_candidates(w - 1, 2), split_candidates(h - 1, 2))
    } else {
        (split_candidates(sx, count), split_candidates(sy, count))
    };
    let mut scores = Vec::with_capacity(xs.len() * ys.len());
    for &cy in &ys {
        for &cx in &xs {
            scores.push(s_region_at(p, cx.min(w), cy.min(h)));
        }
    }
    let k = scores.len() as f64;
    order_invariant_sum(&mut scores) / k
}

/// Structure measure `alpha * S_object + (1 - alpha) * S_region`.
pub fn s_measure<T: Real>(s: &Tensor<T>, gt: &Tensor<T>, alpha: f64) -> Result<f64> {
    let p = Pair::new(s, gt)?;
    Ok(s_measure_of(&p, alpha))
}

fn s_measure_of(p: &Pair, alpha: f64) -> f64 {
    let positives = p.positives();
    if positives == 0 {
        return 1.0 - mean_of(p.s.clone());
    }
    if positives == p.n() {
        return mean_of(p.s.clone());
    }
    let q = alpha * s_object(p) + (1.0 - alpha) * s_region(p);
    q.max(0.0)
}

/// Metrics of one image. F-measure and the P-R curve are absent when the
/// ground truth has no foreground.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageMetrics {
    pub mae: f64,
    pub f_beta: Option<f64>,
    pub e_m: f64,
    pub s_m: f64,
    pub pr_curve: Option<PrCurve>,
}

pub fn evaluate<T: Real>(s: &Tensor<T>, gt: &Tensor<T>, cfg: &MetricConfig) -> Result<ImageMetrics> {
    let p = Pair::new(s, gt)?;
    let mae = mean_of(
        p.s.iter()
            .zip(&p.gt)
            .map(|(&v, &g)| (v - if g { 1.0 } else { 0.0 }).abs())
            .collect(),
    );
    let pr_curve = match pr_curve_of(&p) {
        Ok(c) => Some(c),
        Err(Error::EmptyForeground) => None,
        Err(e) => return Err(e),
    };
    let f_beta = match (&pr_curve, cfg.f_variant) {
        (None, _) => None,
        (Some(c), FVariant::Max) => Some(max_f_of_curve(c, cfg.beta2)),
        (Some(_), FVariant::Adaptive) => Some(adaptive_f_measure(s, gt, cfg.beta2)?),
    };
    Ok(ImageMetrics {
        mae,
        f_beta,
        e_m: e_measure_of(&p, cfg.e_eps),
        s_m: s_measure_of(&p, cfg.alpha),
        pr_curve,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub mae: f64,
    /// Mean of the per-image F-measures (images with foreground only).
    pub f_beta: f64,
    /// Max over thresholds of F computed from the mean P-R curve.
    pub f_beta_mean_curve: f64,
    pub e_m: f64,
    pub s_m: f64,
    /// Mean `(precision, recall)` per threshold over images with foreground.
    pub pr_curve: Vec<(f64, f64)>,
    pub per_image: Vec<ImageMetrics>,
    /// Indices of images excluded from F/P-R for lacking foreground.
    pub excluded: Vec<usize>,
}

/// Aggregate per-image metrics; every aggregate is an order-independent mean.
pub fn aggregate(per_image: Vec<ImageMetrics>, beta2: f64) -> MetricReport {
    let mean = |vals: Vec<f64>| if vals.is_empty() { 0.0 } else { mean_of(vals) };
    let excluded: Vec<usize> = per_image
        .iter()
        .enumerate()
        .filter(|(_, m)| m.f_beta.is_none())
        .map(|(i, _)| i)
        .collect();
    let curves: Vec<&PrCurve> = per_image.iter().filter_map(|m| m.pr_curve.as_ref()).collect();
    let pr_curve: Vec<(f64, f64)> = (0..PR_POINTS)
        .map(|k| {
            (
                mean(curves.iter().map(|c| c.points[k].precision).collect()),
                mean(curves.iter().map(|c| c.points[k].recall).collect()),
            )
        })
        .collect();
    let f_beta_mean_curve = if curves.is_empty() {
        0.0
    } else {
        pr_curve.iter().map(|&(p, r)| f_beta(p, r, beta2)).fold(0.0, f64::max)
    };
    MetricReport {
        mae: mean(per_image.iter().map(|m| m.mae).collect()),
        f_beta: mean(per_image.iter().filter_map(|m| m.f_beta).collect()),
        f_beta_mean_curve,
        e_m: mean(per_image.iter().map(|m| m.e_m).collect()),
        s_m: mean(per_image.iter().map(|m| m.s_m).collect()),
        pr_curve,
        per_image,
        excluded,
    }
}
