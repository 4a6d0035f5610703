//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. Pass criterion numbers to run a subset:
//! `cargo test --test acceptance -- 2 5`.

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rrnet::checkpoint::{decode, encode, load_checkpoint};
use rrnet::cli::{run_from, EXIT_OK, SYNTH_LR};
use rrnet::pnm;
use rrnet::selfcheck::{random_adjacency, symmetric_eigenvalues};
use rrnet_core::attention::{pma_eval, PmaBranch, PmaConfig, PmaParams};
use rrnet_core::check::{network_case, op_cases, tiny_network_config};
use rrnet_core::data::{synth_dataset, Dihedral, Sample};
use rrnet_core::graph::{
    adjacency_eval, permute_channels, permute_pixels, reason_eval, GraphFeatures, GraphMode, ReasoningConfig,
    ReasoningParams, DEFAULT_DEGREE_EPS,
};
use rrnet_core::metrics::{evaluate, pr_curve, threshold, MetricConfig};
use rrnet_core::network::{decode_fuse, forward, init_params, predict, Ablation};
use rrnet_core::ops::{balance_weights, balanced_bce, normalized_laplacian, PROB_CLAMP};
use rrnet_core::train::{train, TrainConfig};
use rrnet_core::{NetworkConfig, ParamSet, Tape, Tensor};

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn cli(args: &[&str]) -> Result<String, String> {
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let code = run_from(std::iter::once("rrnet").chain(args.iter().copied()), &mut out, &mut err);
    if code != EXIT_OK {
        return Err(format!("rrnet {} exited {code}: {}", args.join(" "), String::from_utf8_lossy(&err)));
    }
    Ok(String::from_utf8(out).unwrap())
}

// 1 ------------------------------------------------------------------------

const STEP: f64 = 1e-6;
const GRAD_TOL: f64 = 1e-4;

fn gradients() -> Outcome {
    let start = Instant::now();
    let mut worst = (0.0f64, String::new());
    let mut cases = 0;
    for seed in 0..3 {
        for case in op_cases(seed) {
            let e = case.run(STEP).map_err(|e| format!("{}: {e}", case.name))?.max_rel_error();
            cases += 1;
            if e > worst.0 {
                worst = (e, case.name.to_string());
            }
        }
    }
    ensure(worst.0 < GRAD_TOL, || format!("op `{}` rel {:.2e}", worst.1, worst.0))?;
    let r = network_case(tiny_network_config(), 0)
        .and_then(|c| c.run(STEP))
        .map_err(|e| e.to_string())?;
    let joint = r.joint_rel_error();
    ensure(joint < GRAD_TOL, || format!("network rel {joint:.2e}"))?;
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 300.0, || format!("took {secs:.0}s"))?;
    Ok(format!(
        "{cases} op checks, worst rel {:.1e} ({}); 32x32 network rel {joint:.1e}; {secs:.0}s",
        worst.0, worst.1
    ))
}

// 2 ------------------------------------------------------------------------

fn eye(n: usize) -> Tensor<f64> {
    Tensor::from_fn(&[n, n], |i| if i / n == i % n { 1.0 } else { 0.0 })
}

fn random_reasoning(rng: &mut ChaCha8Rng, a2: usize) -> ReasoningParams<f64> {
    ReasoningParams {
        proj_w: rand_t(rng, &[a2, a2]),
        proj_b: rand_t(rng, &[a2]),
        proj_j: None,
        lambda_w: rand_t(rng, &[a2, a2]),
        lambda_b: Tensor::from_fn(&[a2], |_| rng.gen_range(0.1..1.0)),
        theta: rand_t(rng, &[a2, a2]),
    }
}

fn shuffled(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    p
}

fn graph_algebra() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cfg = ReasoningConfig::default();
    for _ in 0..100 {
        let (h, w, c) = (rng.gen_range(1..6), rng.gen_range(1..6), rng.gen_range(1..7));
        let x = rand_t(&mut rng, &[h, w, c]);
        for (mode, a2) in [(GraphMode::Spatial, c), (GraphMode::Channel, h * w)] {
            let p = random_reasoning(&mut rng, a2);
            let a = adjacency_eval(&GraphFeatures::build(&x, mode).unwrap(), &p).unwrap();
            ensure(a == a.transpose2().unwrap(), || format!("{mode:?} adjacency not symmetric"))?;
        }
    }
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for _ in 0..100 {
        let n = rng.gen_range(2..16);
        let l = normalized_laplacian(&random_adjacency(&mut rng, n), DEFAULT_DEGREE_EPS).map_err(|e| e.to_string())?;
        for e in symmetric_eigenvalues(&l) {
            lo = lo.min(e);
            hi = hi.max(e);
        }
    }
    ensure(lo >= -1e-8 && hi <= 2.0 + 1e-8, || format!("eigenvalues in [{lo:e}, {hi}]"))?;
    for _ in 0..50 {
        let (h, w, c) = (rng.gen_range(1..5), rng.gen_range(1..5), rng.gen_range(1..7));
        let x = rand_t(&mut rng, &[h, w, c]);
        let p = random_reasoning(&mut rng, c);
        let perm = shuffled(&mut rng, h * w);
        let lhs = reason_eval(&permute_pixels(&x, &perm).unwrap(), GraphMode::Spatial, &p, &cfg).unwrap();
        let rhs = permute_pixels(&reason_eval(&x, GraphMode::Spatial, &p, &cfg).unwrap(), &perm).unwrap();
        ensure(lhs == rhs, || "spatial reasoning is not pixel-permutation equivariant".into())?;
        let p = random_reasoning(&mut rng, h * w);
        let perm = shuffled(&mut rng, c);
        let lhs = reason_eval(&permute_channels(&x, &perm).unwrap(), GraphMode::Channel, &p, &cfg).unwrap();
        let rhs = permute_channels(&reason_eval(&x, GraphMode::Channel, &p, &cfg).unwrap(), &perm).unwrap();
        ensure(lhs == rhs, || "channel reasoning is not channel-permutation equivariant".into())?;
    }
    let mut worst: f64 = 0.0;
    for c in 1..6 {
        let plain = ReasoningParams {
            proj_w: eye(c),
            proj_b: Tensor::zeros(&[c]),
            proj_j: None,
            lambda_w: Tensor::zeros(&[c, c]),
            lambda_b: Tensor::full(&[c], 1.0),
            theta: eye(c),
        };
        let x = Tensor::full(&[4, 5, c], rng.gen_range(0.1..2.0));
        let y = reason_eval(&x, GraphMode::Spatial, &plain, &cfg).unwrap();
        worst = y.data().iter().fold(worst, |m, v| m.max(v.abs()));
    }
    ensure(worst < 1e-12, || format!("constant input leaves {worst:e}"))?;
    Ok(format!("laplacian spectrum [{lo:.1e}, {hi:.6}]; constant residue {worst:.1e}"))
}

// 3 ------------------------------------------------------------------------

fn random_pma(rng: &mut ChaCha8Rng, c: usize) -> PmaParams<f64> {
    let mut p = PmaParams::xavier(c, 7, rng.gen());
    for conv in p.left.iter_mut().chain(&mut p.right).chain(&mut p.right_att).chain([&mut p.fuse]) {
        conv.b = rand_t(rng, conv.b.shape());
    }
    p
}

fn in_open_unit(t: &Tensor<f64>) -> bool {
    t.data().iter().all(|&v| v > 0.0 && v < 1.0)
}

fn attention_contracts() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let (h, w, c) = (rng.gen_range(1..10), rng.gen_range(1..10), rng.gen_range(1..6));
        let scale = rng.gen_range(0.1..20.0);
        let x = rand_t(&mut rng, &[h, w, c]).map(|v| v * scale);
        let p = random_pma(&mut rng, c);
        let (l, r, f) = pma_eval(&x, &p, &PmaConfig::default()).unwrap();
        ensure(in_open_unit(&l.unwrap()) && in_open_unit(&r.unwrap()) && in_open_unit(&f), || {
            "attention map outside (0, 1)".into()
        })?;
    }
    let cfg = tiny_network_config();
    let params = init_params::<f64>(&cfg, 3).unwrap();
    let mut t = Tape::new();
    let b = params.bind(&mut t, false);
    let x = t.constant(Tensor::from_fn(&[32, 32, 3], |_| rng.gen_range(0.0..1.0)));
    let fwd = forward(&mut t, &b, &cfg, x).unwrap();
    ensure(fwd.attention.len() == 2 && fwd.attention.iter().all(|&a| in_open_unit(t.value(a))), || {
        "network attention maps outside (0, 1)".into()
    })?;

    for _ in 0..20 {
        let (h, w) = (rng.gen_range(1..6), rng.gen_range(1..6));
        let (cd, ce, co) = (rng.gen_range(1..6), rng.gen_range(1..6), rng.gen_range(1..6));
        let fd = rand_t(&mut rng, &[h, w, cd]);
        let fe = rand_t(&mut rng, &[2 * h, 2 * w, ce]);
        let conv = rrnet_core::attention::ConvParams {
            w: rand_t(&mut rng, &[3, 3, cd + ce, co]),
            b: rand_t(&mut rng, &[co]),
        };
        let run = |att: Option<Tensor<f64>>| {
            let mut t = Tape::new();
            let (d, e) = (t.constant(fd.clone()), t.constant(fe.clone()));
            let a = att.map(|a| t.constant(a));
            let cv = conv.bind(&mut t, false);
            let y = decode_fuse(&mut t, d, e, a, &cv).unwrap();
            t.value(y).clone()
        };
        let zero = run(Some(Tensor::zeros(&[2 * h, 2 * w, 1])));
        let none = run(None);
        let same = zero.data().iter().zip(none.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        ensure(same, || "zero attention differs from the plain path".into())?;
    }

    let mut min_diff = f64::INFINITY;
    for _ in 0..10 {
        let x = rand_t(&mut rng, &[8, 8, 4]);
        let p = random_pma(&mut rng, 4);
        let (_, _, both) = pma_eval(&x, &p, &PmaConfig::default()).unwrap();
        for branch in [PmaBranch::LeftOnly, PmaBranch::RightOnly] {
            let (_, _, f) = pma_eval(&x, &p, &PmaConfig { branch, ..PmaConfig::default() }).unwrap();
            ensure(in_open_unit(&f), || format!("{branch:?} map outside (0, 1)"))?;
            min_diff = min_diff.min(f.max_abs_diff(&both));
        }
    }
    ensure(min_diff > 1e-6, || format!("branch map equals fused map (diff {min_diff:e})"))?;
    Ok(format!("zero injection bit-exact; smallest branch/fused difference {min_diff:.2e}"))
}

// 4 ------------------------------------------------------------------------

fn loss_oracle(s: &Tensor<f64>, l: &Tensor<f64>) -> f64 {
    let b = l.len() as f64;
    let bm = l.data().iter().filter(|&&v| v == 1.0).count() as f64;
    let (p, q) = if bm == 0.0 { (1.0, 1.0) } else { ((b - bm) / b, bm / b) };
    let mut acc = 0.0;
    for (&sv, &lv) in s.data().iter().zip(l.data()) {
        let sv = sv.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        acc += p * lv * sv.ln() + q * (1.0 - lv) * (1.0 - sv).ln();
    }
    -acc / b
}

fn plain_bce(s: &Tensor<f64>, l: &Tensor<f64>) -> f64 {
    let n = s.len() as f64;
    -s.data().iter().zip(l.data()).map(|(&s, &l)| l * s.ln() + (1.0 - l) * (1.0 - s).ln()).sum::<f64>() / n
}

fn loss_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..1000 {
        let (h, w) = (rng.gen_range(1..12), rng.gen_range(1..12));
        let frac = rng.gen_range(0.0..1.0);
        let l = Tensor::<f64>::from_fn(&[h, w], |_| if rng.gen_bool(frac) { 1.0 } else { 0.0 });
        let bw = balance_weights(&l).unwrap();
        ensure(bw.fallback || bw.p + bw.q == 1.0, || format!("p + q = {}", bw.p + bw.q))?;
    }
    let mut half_err: f64 = 0.0;
    for _ in 0..50 {
        let s = Tensor::from_fn(&[6, 6], |_| rng.gen_range(0.01..0.99));
        let l = Tensor::from_fn(&[6, 6], |i| if (i / 6 + i % 6) % 2 == 0 { 1.0 } else { 0.0 });
        let bw = balance_weights(&l).unwrap();
        ensure((bw.p, bw.q) == (0.5, 0.5), || "balanced label weights are not 0.5".into())?;
        let v = balanced_bce(&s, &l, bw).unwrap();
        half_err = half_err.max((v - 0.5 * plain_bce(&s, &l)).abs());
    }
    ensure(half_err < 1e-15, || format!("balanced loss off half BCE by {half_err:e}"))?;
    let l = Tensor::<f64>::zeros(&[8, 8]);
    let bw = balance_weights(&l).unwrap();
    let v = balanced_bce(&Tensor::from_fn(&[8, 8], |_| rng.gen_range(0.0..1.0)), &l, bw).unwrap();
    ensure(bw.fallback && v.is_finite() && v > 0.0, || format!("fallback gave {v}"))?;
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let s = Tensor::from_fn(&[8, 8], |_| rng.gen_range(0.0..1.0));
        let frac = rng.gen_range(0.0..1.0);
        let l = Tensor::from_fn(&[8, 8], |_| if rng.gen_bool(frac) { 1.0 } else { 0.0 });
        let got = balanced_bce(&s, &l, balance_weights(&l).unwrap()).unwrap();
        worst = worst.max((got - loss_oracle(&s, &l)).abs());
    }
    ensure(worst < 1e-12, || format!("oracle disagreement {worst:e}"))?;
    Ok(format!("oracle max diff {worst:.1e} on 100 8x8 pairs; half-BCE diff {half_err:.1e}"))
}

// 5 ------------------------------------------------------------------------

fn blob(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Tensor<f64> {
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

fn metric_suite() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cfg = MetricConfig::default();
    let mut gts = vec![Tensor::zeros(&[9, 7]), Tensor::full(&[9, 7], 1.0)];
    for _ in 0..30 {
        let (h, w) = (rng.gen_range(2..40), rng.gen_range(2..40));
        gts.push(blob(&mut rng, h, w));
    }
    let mut worst: f64 = 0.0;
    for gt in &gts {
        let m = evaluate(gt, gt, &cfg).map_err(|e| e.to_string())?;
        worst = worst.max(m.mae).max((m.e_m - 1.0).abs()).max((m.s_m - 1.0).abs());
        if let Some(f) = m.f_beta {
            worst = worst.max((f - 1.0).abs());
        }
        let inv = gt.map(|v| 1.0 - v);
        worst = worst.max((evaluate(&inv, gt, &cfg).unwrap().mae - 1.0).abs());
    }
    ensure(worst <= 1e-6, || format!("identity cases off by {worst:e}"))?;

    for _ in 0..50 {
        let s = Tensor::from_fn(&[16, 16], |_| {
            if rng.gen_bool(0.3) {
                threshold(rng.gen_range(0..256))
            } else {
                rng.gen_range(0.0..1.0)
            }
        });
        let gt = blob(&mut rng, 16, 16);
        let c = pr_curve(&s, &gt).map_err(|e| e.to_string())?;
        ensure(c.points.len() == 256, || "curve does not have 256 points".into())?;
        let positives = gt.data().iter().filter(|&&g| g == 1.0).count();
        for (k, pt) in c.points.iter().enumerate() {
            let t = k as f64 / 255.0;
            let (mut tp, mut fp) = (0, 0);
            for (&v, &g) in s.data().iter().zip(gt.data()) {
                if v >= t {
                    if g == 1.0 {
                        tp += 1;
                    } else {
                        fp += 1;
                    }
                }
            }
            let precision = if tp + fp == 0 { 1.0 } else { tp as f64 / (tp + fp) as f64 };
            let recall = tp as f64 / positives as f64;
            ensure((pt.tp, pt.fp, pt.precision, pt.recall) == (tp, fp, precision, recall), || {
                format!("threshold {k}: got {:?}, oracle ({tp}, {fp}, {precision}, {recall})", (pt.tp, pt.fp))
            })?;
        }
    }

    for _ in 0..30 {
        let n = rng.gen_range(2..24);
        let s = Tensor::from_fn(&[n, n], |_| rng.gen_range(0.0..1.0));
        let gt = blob(&mut rng, n, n);
        let base = evaluate(&s, &gt, &cfg).unwrap();
        for d in Dihedral::ALL {
            let m = evaluate(&d.apply(&s).unwrap(), &d.apply(&gt).unwrap(), &cfg).unwrap();
            ensure((m.mae, m.f_beta, m.e_m, m.s_m) == (base.mae, base.f_beta, base.e_m, base.s_m), || {
                format!("{d:?} changed the metrics")
            })?;
        }
    }
    Ok(format!("identity error {worst:.1e}; 50 P-R curves match the oracle; dihedral invariance exact"))
}

// 6 ------------------------------------------------------------------------

fn loss_of(line: &str) -> f64 {
    line.split('\t').nth(1).and_then(|v| v.parse().ok()).unwrap_or(f64::NAN)
}

fn mean_scores(params: &ParamSet<f32>, cfg: &NetworkConfig, samples: &[Sample]) -> (f64, f64) {
    let mc = MetricConfig::default();
    let (mut f, mut mae) = (0.0, 0.0);
    for s in samples {
        let p = predict(params, cfg, &s.image, false).unwrap();
        let m = evaluate(&p.map, &s.mask, &mc).unwrap();
        f += m.f_beta.unwrap_or(0.0);
        mae += m.mae;
    }
    let n = samples.len() as f64;
    (f / n, mae / n)
}

fn toy_overfit() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let ck = dir.path().join("toy.ckpt");
    let start = Instant::now();
    let log = cli(&["train", "--synthetic", "8", "--iters", "2000", "--seed", "7", "--out", ck.to_str().unwrap()])?;
    let secs = start.elapsed().as_secs_f64();
    let lines: Vec<&str> = log.lines().collect();
    let (first, last) = (loss_of(lines[0]), loss_of(lines[lines.len() - 1]));
    ensure(lines[lines.len() - 1].starts_with("2000\t"), || "no final log line at 2000".into())?;
    let (params, cfg) = load_checkpoint(&ck).map_err(|e| e.to_string())?;
    ensure(cfg.use_pma && cfg.use_srr && cfg.use_crr && cfg.input_size == (64, 64), || {
        "not the full model at 64x64".into()
    })?;
    let samples = synth_dataset(8, 7, 64).unwrap();
    let (f, mae) = mean_scores(&params, &cfg, &samples);

    // The same check through files: infer on a training image.
    let img = dir.path().join("train0.ppm");
    let out = dir.path().join("train0.pgm");
    pnm::write_image(&img, &samples[0].image).map_err(|e| e.to_string())?;
    cli(&["infer", ck.to_str().unwrap(), img.to_str().unwrap(), out.to_str().unwrap()])?;
    let map = pnm::read_map(&out).map_err(|e| e.to_string())?;
    let infer_mae = evaluate(&map, &samples[0].mask, &MetricConfig::default()).unwrap().mae;

    let summary = format!(
        "F {f:.4}, MAE {mae:.4}, infer MAE {infer_mae:.4}, loss {first:.4} -> {last:.4} ({:.1}%), {secs:.0}s",
        100.0 * last / first
    );
    ensure(f >= 0.95 && mae <= 0.05 && infer_mae <= 0.05, || summary.clone())?;
    ensure(last <= 0.1 * first, || summary.clone())?;
    ensure(secs < 1800.0, || summary.clone())?;
    Ok(summary)
}

// 7 ------------------------------------------------------------------------

const LADDER_ITERS: u64 = 300;
const LADDER_BATCH: usize = 4;
const LADDER_TRAIN: usize = 32;
const TIE: f64 = 0.005;

fn ablation_ladder() -> Outcome {
    let held_out = synth_dataset(16, 1000, 64).unwrap();
    let mut means = [0.0f64; 4];
    for seed in 0..3u64 {
        let samples = synth_dataset(LADDER_TRAIN, 100 + seed, 64).unwrap();
        for (i, a) in Ablation::LADDER.into_iter().enumerate() {
            let mut cfg = NetworkConfig { input_size: (64, 64), ..NetworkConfig::default() };
            a.apply(&mut cfg);
            let mut params = init_params::<f32>(&cfg, seed).map_err(|e| e.to_string())?;
            let tc = TrainConfig {
                iterations: LADDER_ITERS,
                batch_size: LADDER_BATCH,
                lr_initial: SYNTH_LR.0,
                lr_final: SYNTH_LR.1,
                seed,
                ..TrainConfig::default()
            };
            train(&mut params, &cfg, &samples, &tc, |_| {}).map_err(|e| e.to_string())?;
            means[i] += mean_scores(&params, &cfg, &held_out).0 / 3.0;
        }
    }
    let names: Vec<String> = Ablation::LADDER
        .iter()
        .zip(means)
        .map(|(a, m)| format!("{} {m:.4}", a.name()))
        .collect();
    let summary = names.join(" <= ");
    let drops: Vec<f64> = means.windows(2).map(|w| w[0] - w[1]).filter(|&d| d > 0.0).collect();
    ensure(drops.len() <= 1 && drops.iter().all(|&d| d <= TIE), || summary.clone())?;
    Ok(summary)
}

// 8 ------------------------------------------------------------------------

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = dir.path();
    let path = |n: &str| d.join(n).to_str().unwrap().to_string();
    for name in ["a.ckpt", "b.ckpt"] {
        cli(&["train", "--synthetic", "3", "--synth-size", "32", "--iters", "6", "--batch", "2", "--seed", "21", "--out", &path(name)])?;
    }
    let (a, b) = (fs::read(d.join("a.ckpt")).unwrap(), fs::read(d.join("b.ckpt")).unwrap());
    ensure(a == b, || "seeded runs wrote different checkpoints".into())?;

    let img = synth_dataset(1, 22, 48).unwrap().remove(0).image;
    pnm::write_image(&d.join("x.ppm"), &img).unwrap();
    for (ck, out) in [("a.ckpt", "1.pgm"), ("a.ckpt", "2.pgm"), ("b.ckpt", "3.pgm")] {
        cli(&["infer", &path(ck), &path("x.ppm"), &path(out)])?;
    }
    let maps: Vec<Vec<u8>> = ["1.pgm", "2.pgm", "3.pgm"].iter().map(|n| fs::read(d.join(n)).unwrap()).collect();
    ensure(maps.windows(2).all(|w| w[0] == w[1]), || "saliency maps differ between runs".into())?;

    let (params, cfg) = decode(&a).map_err(|e| e.to_string())?;
    ensure(encode(&params, &cfg) == a, || "re-encoding changed the checkpoint bytes".into())?;
    let (again, _) = decode(&encode(&params, &cfg)).unwrap();
    let bits = |p: &ParamSet<f32>| -> Vec<u32> { p.iter().flat_map(|(_, t)| t.data().iter().map(|v| v.to_bits())).collect() };
    ensure(bits(&again) == bits(&params), || "checkpoint round trip is not bit-exact".into())?;

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst: f32 = 0.0;
    for _ in 0..10 {
        let (h, w) = (rng.gen_range(1..40), rng.gen_range(1..40));
        let map = Tensor::new(vec![h, w], (0..h * w).map(|_| rng.gen_range(0.0..=1.0)).collect()).unwrap();
        pnm::write_map(&d.join("m.pgm"), &map).unwrap();
        let back = pnm::read_map(&d.join("m.pgm")).unwrap();
        let image = Tensor::new(vec![h, w, 3], (0..h * w * 3).map(|_| rng.gen_range(0.0..=1.0)).collect()).unwrap();
        pnm::write_image(&d.join("i.ppm"), &image).unwrap();
        let back_img = pnm::read_image(&d.join("i.ppm")).unwrap();
        for (x, y) in map.data().iter().zip(back.data()).chain(image.data().iter().zip(back_img.data())) {
            worst = worst.max((x - y).abs());
        }
    }
    ensure(worst <= 1.0 / 510.0 + 1e-7, || format!("PNM round trip error {worst}"))?;
    Ok(format!("checkpoints and maps byte-identical; PNM round trip error {worst:.2e} (bound {:.2e})", 1.0 / 510.0))
}

// --------------------------------------------------------------------------

fn main() {
    let criteria: [(u32, &str, fn() -> Outcome); 8] = [
        (1, "gradient suite", gradients),
        (2, "graph-reasoning algebra", graph_algebra),
        (3, "attention contracts", attention_contracts),
        (4, "loss identities", loss_identities),
        (5, "metric oracles", metric_suite),
        (6, "toy overfit", toy_overfit),
        (7, "ablation ordering", ablation_ladder),
        (8, "determinism and serialization", determinism),
    ];
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (n, name, run) in criteria {
        if !wanted.is_empty() && !wanted.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let took = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS {n} {name}: {detail} [{took:.1}s]"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {n} {name}: {detail} [{took:.1}s]");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
