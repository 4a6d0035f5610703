use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rrnet_core::data::Dihedral;
use rrnet_core::metrics::{
    adaptive_f_measure, aggregate, e_measure, evaluate, f_beta, f_measure, mae, pr_curve, s_measure, threshold,
    MetricConfig, PR_POINTS,
};
use rrnet_core::{Error, Tensor};

fn rand_map(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Tensor<f64> {
    Tensor::from_fn(&[h, w], |_| rng.gen_range(0.0..1.0))
}

fn rand_gt(rng: &mut ChaCha8Rng, h: usize, w: usize, p: f64) -> Tensor<f64> {
    Tensor::from_fn(&[h, w], |_| if rng.gen_bool(p) { 1.0 } else { 0.0 })
}

/// Blob-like ground truth with at least one foreground pixel.
fn blob_gt(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Tensor<f64> {
    let (y0, x0) = (rng.gen_range(0..h), rng.gen_range(0..w));
    let (y1, x1) = (rng.gen_range(y0..h), rng.gen_range(x0..w));
    Tensor::from_fn(&[h, w], |i| {
        let (y, x) = (i / w, i % w);
        if (y0..=y1).contains(&y) && (x0..=x1).contains(&x) {
            1.0
        } else {
            0.0
        }
    })
}

fn confusion(s: &Tensor<f64>, gt: &Tensor<f64>, t: f64) -> (usize, usize, usize) {
    let (mut tp, mut fp, mut fnn) = (0, 0, 0);
    for (&v, &g) in s.data().iter().zip(gt.data()) {
        match (v >= t, g == 1.0) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fnn += 1,
            _ => {}
        }
    }
    (tp, fp, fnn)
}

fn e_oracle(s: &Tensor<f64>, gt: &Tensor<f64>, eps: f64) -> f64 {
    let n = s.len() as f64;
    let t = (2.0 * s.data().iter().sum::<f64>() / n).min(1.0);
    let fm: Vec<f64> = s.data().iter().map(|&v| if v >= t && v > 0.0 { 1.0 } else { 0.0 }).collect();
    let g = gt.data();
    let pos: f64 = g.iter().sum();
    if pos == 0.0 {
        return fm.iter().map(|v| 1.0 - v).sum::<f64>() / n;
    }
    if pos == n {
        return fm.iter().sum::<f64>() / n;
    }
    let mg = pos / n;
    let mf = fm.iter().sum::<f64>() / n;
    let mut acc = 0.0;
    for i in 0..g.len() {
        let (a, b) = (g[i] - mg, fm[i] - mf);
        let xi = 2.0 * a * b / (a * a + b * b + eps);
        acc += (xi + 1.0).powi(2) / 4.0;
    }
    acc / n
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 { v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (m, var.sqrt())
}

fn ssim(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let d = n - 1.0 + f64::EPSILON;
    let sxx = x.iter().map(|a| (a - mx).powi(2)).sum::<f64>() / d;
    let syy = y.iter().map(|b| (b - my).powi(2)).sum::<f64>() / d;
    let sxy = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / d;
    let alpha = 4.0 * mx * my * sxy;
    let beta = (mx * mx + my * my) * (sxx + syy);
    if alpha != 0.0 {
        alpha / (beta + f64::EPSILON)
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

fn nearest_lines(c: f64) -> Vec<usize> {
    let f = c.floor();
    if c - f == 0.5 {
        vec![f as usize, f as usize + 1]
    } else {
        vec![c.round() as usize]
    }
}

/// Structure measure written out directly from its definition.
fn s_oracle(s: &Tensor<f64>, gt: &Tensor<f64>) -> f64 {
    let (h, w) = (s.shape()[0], s.shape()[1]);
    let (sd, g) = (s.data(), gt.data());
    let n = sd.len() as f64;
    let pos: f64 = g.iter().sum();
    if pos == 0.0 {
        return 1.0 - sd.iter().sum::<f64>() / n;
    }
    if pos == n {
        return sd.iter().sum::<f64>() / n;
    }
    let obj = |v: &[f64]| {
        let (m, sd) = mean_std(v);
        2.0 * m / (m * m + 1.0 + sd + f64::EPSILON)
    };
    let fg: Vec<f64> = (0..sd.len()).filter(|&i| g[i] == 1.0).map(|i| sd[i]).collect();
    let bg: Vec<f64> = (0..sd.len()).filter(|&i| g[i] == 0.0).map(|i| 1.0 - sd[i]).collect();
    let u = pos / n;
    let s_obj = u * obj(&fg) + (1.0 - u) * obj(&bg);
    let (mut cx, mut cy) = (0.0, 0.0);
    for i in 0..sd.len() {
        if g[i] == 1.0 {
            cx += (i % w) as f64;
            cy += (i / w) as f64;
        }
    }
    let (xs, ys) = (nearest_lines(cx / pos + 0.5), nearest_lines(cy / pos + 0.5));
    let mut total = 0.0;
    for &sy in &ys {
        for &sx in &xs {
            let mut reg = 0.0;
            for (r0, r1) in [(0, sy), (sy, h)] {
                for (c0, c1) in [(0, sx), (sx, w)] {
                    if r1 <= r0 || c1 <= c0 {
                        continue;
                    }
                    let (mut p, mut q) = (vec![], vec![]);
                    for r in r0..r1 {
                        for c in c0..c1 {
                            p.push(sd[r * w + c]);
                            q.push(g[r * w + c]);
                        }
                    }
                    reg += p.len() as f64 / n * ssim(&p, &q);
                }
            }
            total += reg;
        }
    }
    let s_reg = total / (xs.len() * ys.len()) as f64;
    (0.5 * s_obj + 0.5 * s_reg).max(0.0)
}

#[test]
fn identity_and_inversion_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    for _ in 0..20 {
        let gt = blob_gt(&mut rng, 12, 9);
        let inv = gt.map(|v| 1.0 - v);
        assert_eq!(mae(&gt, &gt).unwrap(), 0.0);
        assert_eq!(mae(&inv, &gt).unwrap(), 1.0);
        assert!((f_measure(&gt, &gt, 0.3).unwrap() - 1.0).abs() < 1e-6);
        let eps = MetricConfig::default().e_eps;
        assert!((e_measure(&gt, &gt, eps).unwrap() - 1.0).abs() < 1e-6);
        assert!((s_measure(&gt, &gt, 0.5).unwrap() - 1.0).abs() < 1e-6);
        assert!((e_measure(&inv, &gt, eps).unwrap() - e_oracle(&inv, &gt, eps)).abs() < 1e-10);
    }
    let mut dot = Tensor::<f64>::zeros(&[224, 224]);
    dot.data_mut()[1000] = 1.0;
    let cfg = MetricConfig::default();
    assert!((e_measure(&dot, &dot, cfg.e_eps).unwrap() - 1.0).abs() < 1e-6);
    assert_eq!(f_measure(&dot, &dot, cfg.beta2).unwrap(), 1.0);
    let empty = Tensor::<f64>::zeros(&[4, 4]);
    assert_eq!(e_measure(&empty, &empty, 1e-8).unwrap(), 1.0);
    assert_eq!(s_measure(&empty, &empty, 0.5).unwrap(), 1.0);
    let full = Tensor::<f64>::full(&[4, 4], 1.0);
    assert_eq!(e_measure(&full, &full, 1e-8).unwrap(), 1.0);
    assert_eq!(s_measure(&full, &full, 0.5).unwrap(), 1.0);
}

#[test]
fn mae_matches_scalar_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(52);
    for _ in 0..50 {
        let s = rand_map(&mut rng, 8, 8);
        let gt = rand_gt(&mut rng, 8, 8, 0.4);
        let want: f64 = s.data().iter().zip(gt.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / 64.0;
        assert!((mae(&s, &gt).unwrap() - want).abs() < 1e-12);
    }
    assert!(mae(&Tensor::<f64>::zeros(&[2, 3]), &Tensor::zeros(&[3, 2])).is_err());
}

#[test]
fn pr_curve_matches_confusion_matrix() {
    let mut rng = ChaCha8Rng::seed_from_u64(53);
    for trial in 0..50 {
        let mut s = rand_map(&mut rng, 16, 16);
        if trial % 3 == 0 {
            // Values exactly on the threshold grid.
            s = s.map(|v| (v * 255.0).round() / 255.0);
        }
        let gt = blob_gt(&mut rng, 16, 16);
        let curve = pr_curve(&s, &gt).unwrap();
        assert_eq!(curve.points.len(), PR_POINTS);
        for (k, pt) in curve.points.iter().enumerate() {
            let t = k as f64 / 255.0;
            assert_eq!(pt.threshold, t);
            let (tp, fp, fnn) = confusion(&s, &gt, t);
            let precision = if tp + fp == 0 { 1.0 } else { tp as f64 / (tp + fp) as f64 };
            let recall = tp as f64 / (tp + fnn) as f64;
            assert_eq!((pt.tp, pt.fp), (tp, fp), "trial {trial} k {k}");
            assert_eq!((pt.precision, pt.recall), (precision, recall));
        }
        let best = (0..256)
            .map(|k| {
                let (tp, fp, fnn) = confusion(&s, &gt, k as f64 / 255.0);
                let p = if tp + fp == 0 { 1.0 } else { tp as f64 / (tp + fp) as f64 };
                let r = tp as f64 / (tp + fnn) as f64;
                if p + r == 0.0 { 0.0 } else { 1.3 * p * r / (0.3 * p + r) }
            })
            .fold(0.0, f64::max);
        assert!((f_measure(&s, &gt, 0.3).unwrap() - best).abs() < 1e-12);
    }
}

#[test]
fn pr_curve_special_points() {
    let mut rng = ChaCha8Rng::seed_from_u64(54);
    let gt = blob_gt(&mut rng, 10, 10);
    let c = pr_curve(&gt, &gt).unwrap();
    for pt in &c.points[1..] {
        assert_eq!((pt.precision, pt.recall), (1.0, 1.0));
    }
    let s = rand_map(&mut rng, 10, 10);
    let c = pr_curve(&s, &gt).unwrap();
    assert_eq!(c.points[0].recall, 1.0);
    assert_eq!(c.points[0].precision, c.positives as f64 / 100.0);
    assert!(matches!(pr_curve(&s, &Tensor::zeros(&[10, 10])), Err(Error::EmptyForeground)));
    assert_eq!(threshold(255), 1.0);
}

#[test]
fn f_measure_zero_when_no_true_positive() {
    let gt = Tensor::from_fn(&[4, 4], |i| if i < 4 { 1.0 } else { 0.0 });
    let s = gt.map(|v| 1.0 - v);
    let got = f_measure(&s, &gt, 0.3).unwrap();
    // Threshold 0 predicts everything, so only that point has TP > 0.
    let p0 = 4.0 / 16.0;
    assert!((got - 1.3 * p0 / (0.3 * p0 + 1.0)).abs() < 1e-12);
    let never = Tensor::from_fn(&[4, 4], |i| if i < 4 { -1.0 } else { 1.0 });
    assert_eq!(f_measure(&never, &gt, 0.3).unwrap(), 0.0);
    assert_eq!(f_beta(0.0, 0.0, 0.3), 0.0);
}

#[test]
fn e_measure_matches_scalar_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    for trial in 0..100 {
        let s = rand_map(&mut rng, 9, 11);
        let s = if trial % 10 == 3 { Tensor::zeros(&[9, 11]) } else { s };
        let gt = match trial % 4 {
            0 => rand_gt(&mut rng, 9, 11, 0.3),
            1 => blob_gt(&mut rng, 9, 11),
            2 => Tensor::zeros(&[9, 11]),
            _ => Tensor::full(&[9, 11], 1.0),
        };
        for eps in [f64::EPSILON, 1e-8] {
            assert!((e_measure(&s, &gt, eps).unwrap() - e_oracle(&s, &gt, eps)).abs() < 1e-10, "trial {trial}");
        }
    }
}

#[test]
fn s_measure_matches_direct_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(56);
    for trial in 0..100 {
        let (h, w) = (rng.gen_range(2..14), rng.gen_range(2..14));
        let gt = if trial % 2 == 0 { blob_gt(&mut rng, h, w) } else { rand_gt(&mut rng, h, w, 0.5) };
        let s = if trial % 5 == 0 { Tensor::full(&[h, w], 0.5) } else { rand_map(&mut rng, h, w) };
        let got = s_measure(&s, &gt, 0.5).unwrap();
        assert!((got - s_oracle(&s, &gt)).abs() < 1e-10, "trial {trial}: {got} vs {}", s_oracle(&s, &gt));
    }
}

#[test]
fn inverted_prediction_scores_below_identity() {
    let gt = Tensor::from_fn(&[8, 8], |i| {
        let (y, x) = (i / 8, i % 8);
        if (2..6).contains(&y) && (2..6).contains(&x) { 1.0 } else { 0.0 }
    });
    let soft = gt.map(|v| 0.2 + 0.6 * v);
    let flipped = soft.map(|v| 1.0 - v);
    let id = s_measure(&gt, &gt, 0.5).unwrap();
    assert!(s_measure(&soft, &gt, 0.5).unwrap() < id);
    assert!(s_measure(&flipped, &gt, 0.5).unwrap() < s_measure(&soft, &gt, 0.5).unwrap());
}

#[test]
fn hand_computed_four_by_four() {
    let gt: Tensor<f64> = Tensor::<f64>::from_rows(&[&[0., 0., 0., 0.], &[0., 1., 1., 0.], &[0., 1., 1., 0.], &[0., 0., 0., 0.]]).unwrap();
    let s = Tensor::<f64>::from_rows(&[&[0., 0., 0., 0.], &[0., 1., 1., 0.], &[0., 1., 0.5, 0.], &[0., 0., 0., 0.5]]).unwrap();
    assert_eq!(mae(&s, &gt).unwrap(), 1.0 / 16.0);
    let c = pr_curve(&s, &gt).unwrap();
    // Below 0.5 both half-valued pixels are positive: TP 4, FP 1.
    assert_eq!((c.points[128].tp, c.points[128].fp), (3, 0));
    assert_eq!((c.points[127].tp, c.points[127].fp), (4, 1));
    let f_lo = f_beta(0.8, 1.0, 0.3);
    let f_hi = f_beta(1.0, 0.75, 0.3);
    assert!((f_measure(&s, &gt, 0.3).unwrap() - f_lo.max(f_hi)).abs() < 1e-15);
    // Adaptive threshold 2 * 4/16 = 0.5 keeps the half-valued pixels.
    assert!((adaptive_f_measure(&s, &gt, 0.3).unwrap() - f_lo).abs() < 1e-15);
}

#[test]
fn aggregate_is_mean_and_excludes_background_images() {
    let mut rng = ChaCha8Rng::seed_from_u64(57);
    let cfg = MetricConfig::default();
    let mut rows = Vec::new();
    for i in 0..6 {
        let s = rand_map(&mut rng, 8, 8);
        let gt = if i == 2 { Tensor::zeros(&[8, 8]) } else { blob_gt(&mut rng, 8, 8) };
        rows.push(evaluate(&s, &gt, &cfg).unwrap());
    }
    let rep = aggregate(rows.clone(), 0.3);
    assert_eq!(rep.excluded, vec![2]);
    let mean = |f: &dyn Fn(&rrnet_core::metrics::ImageMetrics) -> Option<f64>| {
        let v: Vec<f64> = rows.iter().filter_map(f).collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    assert!((rep.mae - mean(&|m| Some(m.mae))).abs() < 1e-15);
    assert!((rep.f_beta - mean(&|m| m.f_beta)).abs() < 1e-15);
    assert!((rep.e_m - mean(&|m| Some(m.e_m))).abs() < 1e-15);
    assert!((rep.s_m - mean(&|m| Some(m.s_m))).abs() < 1e-15);
    assert_eq!(rep.pr_curve.len(), 256);
    let mut shuffled = rows.clone();
    shuffled.reverse();
    let rev = aggregate(shuffled, 0.3);
    assert_eq!((rev.mae, rev.f_beta, rev.e_m, rev.s_m), (rep.mae, rep.f_beta, rep.e_m, rep.s_m));
    assert_eq!(rev.pr_curve, rep.pr_curve);
}

#[test]
fn metrics_bounded_over_random_trials() {
    let mut rng = ChaCha8Rng::seed_from_u64(58);
    let cfg = MetricConfig::default();
    for trial in 0..1000 {
        let (h, w) = (rng.gen_range(1..10), rng.gen_range(1..10));
        let s = if trial % 7 == 0 { rand_gt(&mut rng, h, w, 0.5) } else { rand_map(&mut rng, h, w) };
        let frac = rng.gen_range(0.0..1.0);
        let gt = rand_gt(&mut rng, h, w, frac);
        let m = evaluate(&s, &gt, &cfg).unwrap();
        let unit = 0.0..=1.0;
        assert!(unit.contains(&m.mae) && unit.contains(&m.e_m) && unit.contains(&m.s_m), "{trial}: {m:?}");
        if let Some(f) = m.f_beta {
            assert!(unit.contains(&f));
        }
        if let Some(c) = &m.pr_curve {
            for pair in c.points.windows(2) {
                assert!(pair[1].tp <= pair[0].tp && pair[1].fp <= pair[0].fp);
                assert!(pair[1].recall <= pair[0].recall);
            }
            assert!(c.points.iter().all(|p| unit.contains(&p.precision) && unit.contains(&p.recall)));
        }
    }
}

fn fixed_threshold_f(s: &Tensor<f64>, gt: &Tensor<f64>, t: f64) -> f64 {
    let (tp, fp, fnn) = confusion(s, gt, t);
    let p = if tp + fp == 0 { 1.0 } else { tp as f64 / (tp + fp) as f64 };
    f_beta(p, tp as f64 / (tp + fnn) as f64, 0.3)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn mae_triangle_inequality(seed in any::<u64>(), h in 1usize..9, w in 1usize..9) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (a, b) = (rand_map(&mut rng, h, w), rand_map(&mut rng, h, w));
        let c = rand_gt(&mut rng, h, w, 0.5);
        // mae binarizes its second argument, so b and c play the ground-truth role.
        let bb = b.map(|v| if v >= 0.5 { 1.0 } else { 0.0 });
        prop_assert!(mae(&a, &c).unwrap() <= mae(&a, &bb).unwrap() + mae(&bb, &c).unwrap() + 1e-12);
    }

    #[test]
    fn max_f_dominates_every_threshold(seed in any::<u64>(), t in 0.0f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = rand_map(&mut rng, 8, 8);
        let gt = blob_gt(&mut rng, 8, 8);
        let k = (t * 255.0).round() / 255.0;
        prop_assert!(f_measure(&s, &gt, 0.3).unwrap() >= fixed_threshold_f(&s, &gt, k));
    }

    #[test]
    fn metrics_invariant_under_dihedral_group(seed in any::<u64>(), h in 2usize..12, w in 2usize..12, g in 0usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = rand_map(&mut rng, h, w);
        let gt = blob_gt(&mut rng, h, w);
        let d = Dihedral::ALL[g];
        let cfg = MetricConfig::default();
        let a = evaluate(&s, &gt, &cfg).unwrap();
        let b = evaluate(&d.apply(&s).unwrap(), &d.apply(&gt).unwrap(), &cfg).unwrap();
        prop_assert_eq!(a, b);
    }
}
