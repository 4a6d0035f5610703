//! Central finite-difference gradient checking for functions built on the
//! tape.

use alloc::vec::Vec;

#[cfg_attr(feature = "std", allow(unused_imports))]
use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    /// Per input: `|analytic - numeric|_2 / max(|analytic|_2 + |numeric|_2, floor)`.
    pub rel_errors: Vec<f64>,
    pub analytic: Vec<Tensor<f64>>,
    pub numeric: Vec<Tensor<f64>>,
}

impl GradCheck {
    pub fn max_rel_error(&self) -> f64 {
        self.rel_errors.iter().copied().fold(0.0, f64::max)
    }

    /// Relative error of all inputs' gradients taken as one vector.
    pub fn joint_rel_error(&self) -> f64 {
        let flat = |ts: &[Tensor<f64>]| ts.iter().flat_map(|t| t.data().iter().copied()).collect::<Vec<_>>();
        rel_error(&flat(&self.analytic), &flat(&self.numeric))
    }
}

/// Norm floor below which gradients are compared absolutely.
pub const REL_FLOOR: f64 = 1e-7;

/// Compare tape gradients of `f` against central differences with step `h`.
///
/// Non-scalar outputs are contracted with a fixed random weighting so every
/// output component contributes to the checked scalar.
pub fn grad_check<F>(inputs: &[Tensor<f64>], h: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut weights: Option<Tensor<f64>> = None;
    let mut eval = |xs: &[Tensor<f64>], grads: bool| -> Result<(f64, Vec<Tensor<f64>>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone(), grads)).collect();
        let out = f(&mut tape, &vars)?;
        let loss = if tape.value(out).is_scalar() {
            out
        } else {
            let shape = tape.value(out).shape().to_vec();
            let w = weights
                .get_or_insert_with(|| {
                    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
                    Tensor::from_fn(&shape, |_| rng.gen_range(0.5..1.5))
                })
                .clone();
            let w = tape.constant(w);
            let weighted = tape.mul(out, w)?;
            tape.sum(weighted)
        };
        let value = tape.value(loss).item();
        if !grads {
            return Ok((value, Vec::new()));
        }
        let mut g = tape.backward(loss)?;
        let g = vars.iter().map(|&v| g.take(v)).collect::<Result<Vec<_>>>()?;
        Ok((value, g))
    };
    let (_, analytic) = eval(inputs, true)?;
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut numeric = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut n = Tensor::zeros(inputs[i].shape());
        for j in 0..inputs[i].len() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let (up, _) = eval(&work, false)?;
            work[i].data_mut()[j] = orig - h;
            let (down, _) = eval(&work, false)?;
            work[i].data_mut()[j] = orig;
            n.data_mut()[j] = (up - down) / (2.0 * h);
        }
        numeric.push(n);
    }
    let rel_errors = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| rel_error(a.data(), n.data()))
        .collect();
    Ok(GradCheck {
        rel_errors,
        analytic,
        numeric,
    })
}

pub fn rel_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut a.iter().zip(b).map(|(x, y)| x - y));
    let scale = norm(&mut a.iter().copied()) + norm(&mut b.iter().copied());
    diff / scale.max(REL_FLOOR)
}

type Build = alloc::boxed::Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

/// A named differentiable function with concrete inputs.
pub struct GradCase {
    pub name: alloc::string::String,
    pub inputs: Vec<Tensor<f64>>,
    pub build: Build,
}

impl GradCase {
    pub fn run(&self, h: f64) -> Result<GradCheck> {
        grad_check(&self.inputs, h, &self.build)
    }
}

impl core::fmt::Debug for GradCase {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.debug_struct("GradCase").field("name", &self.name).finish()
    }
}

/// Uniform values in `[-1, 1]` bounded away from zero by `0.05`, so ReLU
/// kinks sit far from every finite-difference probe.
pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(0.05..1.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn positive_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

fn case(name: impl Into<alloc::string::String>, inputs: Vec<Tensor<f64>>, build: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'static) -> GradCase {
    GradCase {
        name: name.into(),
        inputs,
        build: alloc::boxed::Box::new(build),
    }
}

/// Every differentiable tape op, and the composite modules built from them,
/// on small random inputs drawn from `seed`.
pub fn op_cases(seed: u64) -> Vec<GradCase> {
    use crate::attention::{pma, PmaConfig, PmaVars, ConvVars, PmaBranch, FeatureActivation};
    use crate::graph::{crr, non_local_block, srr, NonLocalVars, ReasoningConfig, ReasoningVars};
    use crate::network::decode_fuse;
    use alloc::format;
    use alloc::vec;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let mut cases = vec![
        case("add", vec![random_tensor(r, &[3, 4]), random_tensor(r, &[3, 4])], |t, v| t.add(v[0], v[1])),
        case("add_bias", vec![random_tensor(r, &[2, 3, 4]), random_tensor(r, &[4])], |t, v| t.add(v[0], v[1])),
        case("add_broadcast", vec![random_tensor(r, &[2, 3, 4]), random_tensor(r, &[2, 3, 1])], |t, v| t.add(v[0], v[1])),
        case("mul", vec![random_tensor(r, &[3, 4]), random_tensor(r, &[3, 4])], |t, v| t.mul(v[0], v[1])),
        case("mul_broadcast", vec![random_tensor(r, &[2, 3, 4]), random_tensor(r, &[2, 3, 1])], |t, v| t.mul(v[0], v[1])),
        case("affine", vec![random_tensor(r, &[3, 4])], |t, v| Ok(t.affine(v[0], 1.7, -0.3))),
        case("matmul", vec![random_tensor(r, &[3, 4]), random_tensor(r, &[4, 5])], |t, v| t.matmul(v[0], v[1])),
        case("transpose", vec![random_tensor(r, &[3, 4])], |t, v| t.transpose(v[0])),
        case("reshape", vec![random_tensor(r, &[2, 3, 4])], |t, v| t.reshape(v[0], &[6, 4])),
        case("concat", vec![random_tensor(r, &[2, 3, 2]), random_tensor(r, &[2, 3, 3])], |t, v| t.concat(&[v[0], v[1]])),
        case(
            "mean_of",
            vec![random_tensor(r, &[2, 3, 2]), random_tensor(r, &[2, 3, 2]), random_tensor(r, &[2, 3, 2])],
            |t, v| t.mean_of(v),
        ),
        case("relu", vec![random_tensor(r, &[3, 4])], |t, v| Ok(t.relu(v[0]))),
        case("sigmoid", vec![random_tensor(r, &[3, 4])], |t, v| Ok(t.sigmoid(v[0]))),
        case("channel_mean", vec![random_tensor(r, &[3, 3, 4])], |t, v| t.channel_mean(v[0])),
        case("channel_max", vec![random_tensor(r, &[3, 3, 4])], |t, v| t.channel_max(v[0])),
        case("row_mean", vec![random_tensor(r, &[5, 3])], |t, v| t.row_mean(v[0])),
        case("upsample2x", vec![random_tensor(r, &[2, 3, 2])], |t, v| t.upsample2x(v[0])),
        case("avg_pool2x2", vec![random_tensor(r, &[4, 6, 2])], |t, v| t.avg_pool2x2(v[0])),
        case("weighted_gram", vec![random_tensor(r, &[4, 3]), random_tensor(r, &[3])], |t, v| {
            t.weighted_gram(v[0], v[1])
        }),
        case("normalized_laplacian", vec![positive_tensor(r, &[4, 4], 0.1, 1.0)], |t, v| {
            let tr = t.transpose(v[0])?;
            let sym = t.add(v[0], tr)?;
            t.normalized_laplacian(sym, 1e-6)
        }),
        case("softmax_rows", vec![random_tensor(r, &[3, 4])], |t, v| t.softmax_rows(v[0])),
        case("permute_rows", vec![random_tensor(r, &[4, 3])], |t, v| t.permute_rows(v[0], vec![2, 0, 3, 1])),
        case("sum", vec![random_tensor(r, &[3, 4])], |t, v| Ok(t.sum(v[0]))),
        case("mean", vec![random_tensor(r, &[3, 4])], |t, v| Ok(t.mean(v[0]))),
    ];
    for k in [1, 3, 5, 7] {
        for stride in [1, 2] {
            cases.push(case(
                format!("conv2d_k{k}_s{stride}"),
                vec![random_tensor(r, &[6, 6, 2]), random_tensor(r, &[k, k, 2, 3]), random_tensor(r, &[3])],
                move |t, v| t.conv2d(v[0], v[1], v[2], stride),
            ));
        }
    }
    let label = Tensor::from_fn(&[4, 4], |i| if (i * 7 + 3) % 5 < 2 { 1.0 } else { 0.0 });
    cases.push(case(
        "balanced_bce",
        vec![positive_tensor(r, &[4, 4], 0.05, 0.95)],
        move |t, v| t.balanced_bce(v[0], &label),
    ));
    let empty = Tensor::zeros(&[4, 4]);
    cases.push(case(
        "balanced_bce_background_only",
        vec![positive_tensor(r, &[4, 4], 0.05, 0.95)],
        move |t, v| t.balanced_bce(v[0], &empty),
    ));

    let reasoning_inputs = |r: &mut ChaCha8Rng, x: &[usize], a2: usize| {
        // A positive lambda bias keeps several diagonal weights active; with
        // one active weight the Laplacian is scale invariant in lambda and its
        // true gradient is zero.
        vec![
            random_tensor(r, x),
            random_tensor(r, &[a2, a2]),
            random_tensor(r, &[a2]),
            random_tensor(r, &[a2, a2]),
            positive_tensor(r, &[a2], 0.5, 1.5),
            random_tensor(r, &[a2, a2]),
        ]
    };
    let reasoning_vars = |v: &[Var]| ReasoningVars {
        proj_w: v[1],
        proj_b: v[2],
        proj_j: None,
        lambda_w: v[3],
        lambda_b: v[4],
        theta: v[5],
    };
    cases.push(case("srr", reasoning_inputs(r, &[3, 3, 4], 4), move |t, v| {
        srr(t, v[0], &reasoning_vars(v), &ReasoningConfig::default())
    }));
    cases.push(case("crr", reasoning_inputs(r, &[3, 3, 4], 9), move |t, v| {
        crr(t, v[0], &reasoning_vars(v), &ReasoningConfig::default())
    }));
    cases.push(case(
        "non_local",
        vec![
            random_tensor(r, &[3, 3, 4]),
            random_tensor(r, &[4, 2]),
            random_tensor(r, &[4, 2]),
            random_tensor(r, &[4, 2]),
            random_tensor(r, &[2, 4]),
        ],
        |t, v| {
            let p = NonLocalVars {
                theta: v[1],
                phi: v[2],
                g: v[3],
                out: v[4],
            };
            Ok(non_local_block(t, v[0], &p)?.output)
        },
    ));

    let c = 3;
    let mut pma_inputs = vec![random_tensor(r, &[6, 6, c])];
    for (k, cin, cout) in [(3, 2, 1), (5, 2, 1), (7, 2, 1), (3, c, c), (5, c, c), (7, c, c), (7, 2, 1), (7, 2, 1), (7, 2, 1), (1, 2, 1)] {
        pma_inputs.push(random_tensor(r, &[k, k, cin, cout]));
        pma_inputs.push(random_tensor(r, &[cout]));
    }
    for branch in [PmaBranch::Both, PmaBranch::LeftOnly, PmaBranch::RightOnly] {
        let cfg = PmaConfig {
            branch,
            right_activation: FeatureActivation::Relu,
            att_kernel: 7,
        };
        cases.push(case(format!("pma_{branch:?}"), pma_inputs.clone(), move |t, v| {
            let conv = |i: usize| ConvVars {
                w: v[1 + 2 * i],
                b: v[2 + 2 * i],
            };
            let p = PmaVars {
                left: (0..3).map(conv).collect(),
                right: (3..6).map(conv).collect(),
                right_att: (6..9).map(conv).collect(),
                fuse: conv(9),
            };
            Ok(pma(t, v[0], &p, &cfg)?.fused)
        }));
    }

    cases.push(case(
        "decode_fuse",
        vec![
            random_tensor(r, &[2, 2, 3]),
            random_tensor(r, &[4, 4, 2]),
            positive_tensor(r, &[4, 4, 1], 0.05, 0.95),
            random_tensor(r, &[3, 3, 5, 3]),
            random_tensor(r, &[3]),
        ],
        |t, v| decode_fuse(t, v[0], v[1], Some(v[2]), &ConvVars { w: v[3], b: v[4] }),
    ));
    cases
}

/// The reduced network used for end-to-end checks.
pub fn tiny_network_config() -> crate::NetworkConfig {
    crate::NetworkConfig {
        stage_channels: [3, 4, 4, 4, 4],
        decoder_width: 4,
        input_size: (32, 32),
        ..crate::NetworkConfig::default()
    }
}

/// Whole network through the class-balanced loss, with every parameter as
/// an input. Biases are randomized so their gradients are exercised.
pub fn network_case(cfg: crate::NetworkConfig, seed: u64) -> Result<GradCase> {
    use crate::network::{forward, init_params};

    let mut params = init_params::<f64>(&cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb1a5);
    for t in params.tensors_mut() {
        if t.rank() == 1 {
            *t = Tensor::from_fn(t.shape(), |_| rng.gen_range(-0.1..0.1));
        }
    }
    let (h, w) = cfg.input_size;
    let image = Tensor::from_fn(&[h, w, 3], |_| rng.gen_range(0.0..1.0));
    let label = Tensor::from_fn(&[h, w], |i| {
        let (y, x) = (i / w, i % w);
        if y >= h / 4 && y < h / 2 + h / 8 && x >= w / 3 && x < (3 * w) / 4 {
            1.0
        } else {
            0.0
        }
    });
    let inputs = params.tensors().to_vec();
    Ok(case("network", inputs, move |t, v| {
        let b = params.with_vars(v.to_vec())?;
        let x = t.constant(image.clone());
        let f = forward(t, &b, &cfg, x)?;
        t.balanced_bce(f.saliency, &label)
    }))
}
