//! The full saliency network: five-stage backbone, relational-reasoning
//! encoder on stages 3-5, attention-modulated decoder and prediction head.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::attention::{self, ConvParams, ConvVars, FeatureActivation, PmaBranch, PmaConfig, PmaParams, PmaVars, SCALES};
use crate::error::{Error, Result};
use crate::graph::{self, GraphMode, NonLocalParams, NonLocalVars, ReasoningConfig, ReasoningParams, ReasoningVars};
use crate::params::{Bound, ParamSet};
use crate::scalar::Real;
use crate::shape_err;
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

pub const STAGES: usize = 5;
/// Stages followed by relational reasoning.
pub const REASONING_STAGES: [usize; 3] = [3, 4, 5];
/// Stages whose features drive attention in the decoder.
pub const ATTENTION_STAGES: [usize; 2] = [1, 2];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Upsampling {
    #[default]
    Nearest,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    pub stage_channels: [usize; STAGES],
    pub decoder_width: usize,
    pub input_size: (usize, usize),
    pub use_pma: bool,
    pub use_srr: bool,
    pub use_crr: bool,
    pub use_nonlocal: bool,
    pub pma_branch: PmaBranch,
    pub rr_residual: bool,
    pub shared_projection: bool,
    pub right_activation: FeatureActivation,
    pub att_kernel: usize,
    pub upsampling: Upsampling,
    pub degree_eps: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            stage_channels: [16, 32, 64, 64, 64],
            decoder_width: 16,
            input_size: (224, 224),
            use_pma: true,
            use_srr: true,
            use_crr: true,
            use_nonlocal: false,
            pma_branch: PmaBranch::Both,
            rr_residual: false,
            shared_projection: true,
            right_activation: FeatureActivation::Relu,
            att_kernel: 7,
            upsampling: Upsampling::Nearest,
            degree_eps: graph::DEFAULT_DEGREE_EPS,
        }
    }
}

/// Named ablation presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ablation {
    Baseline,
    Pma,
    PmaSrr,
    Full,
    NonLocal,
    PmaLeftOnly,
    PmaRightOnly,
}

impl Ablation {
    pub const LADDER: [Ablation; 4] = [Ablation::Baseline, Ablation::Pma, Ablation::PmaSrr, Ablation::Full];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Baseline => "baseline",
            Ablation::Pma => "pma",
            Ablation::PmaSrr => "pma+srr",
            Ablation::Full => "full",
            Ablation::NonLocal => "nonlocal",
            Ablation::PmaLeftOnly => "pma-left",
            Ablation::PmaRightOnly => "pma-right",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        [
            Ablation::Baseline,
            Ablation::Pma,
            Ablation::PmaSrr,
            Ablation::Full,
            Ablation::NonLocal,
            Ablation::PmaLeftOnly,
            Ablation::PmaRightOnly,
        ]
        .into_iter()
        .find(|a| a.name() == s)
        .ok_or_else(|| Error::InvalidConfig(format!("unknown ablation `{s}`")))
    }

    pub fn apply(self, cfg: &mut NetworkConfig) {
        let (pma, srr, crr, nl, branch) = match self {
            Ablation::Baseline => (false, false, false, false, PmaBranch::Both),
            Ablation::Pma => (true, false, false, false, PmaBranch::Both),
            Ablation::PmaSrr => (true, true, false, false, PmaBranch::Both),
            Ablation::Full => (true, true, true, false, PmaBranch::Both),
            Ablation::NonLocal => (true, false, false, true, PmaBranch::Both),
            Ablation::PmaLeftOnly => (true, true, true, false, PmaBranch::LeftOnly),
            Ablation::PmaRightOnly => (true, true, true, false, PmaBranch::RightOnly),
        };
        cfg.use_pma = pma;
        cfg.use_srr = srr;
        cfg.use_crr = crr;
        cfg.use_nonlocal = nl;
        cfg.pma_branch = branch;
    }
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::InvalidConfig(format!("{key}: expected a boolean, got `{v}`"))),
    }
}

fn parse_usize(key: &str, v: &str) -> Result<usize> {
    v.trim()
        .parse()
        .map_err(|_| Error::InvalidConfig(format!("{key}: expected a non-negative integer, got `{v}`")))
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.contains(&0) || self.decoder_width == 0 {
            return Err(Error::InvalidConfig("channel widths must be positive".into()));
        }
        let (h, w) = self.input_size;
        if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
            return Err(Error::InvalidSize(format!(
                "input size {h}x{w} must be positive and divisible by 32 (five stride-2 stages)"
            )));
        }
        if self.use_nonlocal && (self.use_srr || self.use_crr) {
            return Err(Error::InvalidConfig(
                "use_nonlocal replaces relational reasoning; disable use_srr/use_crr".into(),
            ));
        }
        if !matches!(self.att_kernel, 1 | 3 | 5 | 7) {
            return Err(Error::InvalidKernel(self.att_kernel));
        }
        if !(self.degree_eps > 0.0) {
            return Err(Error::InvalidConfig("degree_eps must be positive".into()));
        }
        Ok(())
    }

    /// Spatial size of stage `s` (1-based).
    pub fn stage_size(&self, s: usize) -> (usize, usize) {
        (self.input_size.0 >> s, self.input_size.1 >> s)
    }

    pub fn reasoning(&self) -> ReasoningConfig {
        ReasoningConfig {
            shared_projection: self.shared_projection,
            residual: self.rr_residual,
            degree_eps: self.degree_eps,
        }
    }

    pub fn pma(&self) -> PmaConfig {
        PmaConfig {
            branch: self.pma_branch,
            right_activation: self.right_activation,
            att_kernel: self.att_kernel,
        }
    }

    /// Flat `key=value` lines.
    pub fn to_kv(&self) -> String {
        let sc = self.stage_channels.map(|c| c.to_string()).join(",");
        let branch = match self.pma_branch {
            PmaBranch::Both => "both",
            PmaBranch::LeftOnly => "left",
            PmaBranch::RightOnly => "right",
        };
        let act = match self.right_activation {
            FeatureActivation::Relu => "relu",
            FeatureActivation::Sigmoid => "sigmoid",
        };
        format!(
            "stage_channels={sc}\n\
             decoder_width={}\n\
             input_height={}\n\
             input_width={}\n\
             use_pma={}\n\
             use_srr={}\n\
             use_crr={}\n\
             use_nonlocal={}\n\
             pma_branch={branch}\n\
             rr_residual={}\n\
             shared_projection={}\n\
             right_activation={act}\n\
             att_kernel={}\n\
             upsampling=nearest\n\
             degree_eps={:e}\n",
            self.decoder_width,
            self.input_size.0,
            self.input_size.1,
            self.use_pma,
            self.use_srr,
            self.use_crr,
            self.use_nonlocal,
            self.rr_residual,
            self.shared_projection,
            self.att_kernel,
            self.degree_eps,
        )
    }

    /// Apply one `key=value` setting. Returns `Ok(false)` for keys this
    /// config does not own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let v = value.trim();
        match key.trim() {
            "stage_channels" => {
                let parts: Vec<usize> = v
                    .split(',')
                    .map(|p| parse_usize(key, p))
                    .collect::<Result<_>>()?;
                self.stage_channels = parts
                    .try_into()
                    .map_err(|_| Error::InvalidConfig("stage_channels needs exactly 5 values".into()))?;
            }
            "decoder_width" => self.decoder_width = parse_usize(key, v)?,
            "input_height" => self.input_size.0 = parse_usize(key, v)?,
            "input_width" => self.input_size.1 = parse_usize(key, v)?,
            "input_size" => {
                let n = parse_usize(key, v)?;
                self.input_size = (n, n);
            }
            "use_pma" => self.use_pma = parse_bool(key, v)?,
            "use_srr" => self.use_srr = parse_bool(key, v)?,
            "use_crr" => self.use_crr = parse_bool(key, v)?,
            "use_nonlocal" => self.use_nonlocal = parse_bool(key, v)?,
            "rr_residual" => self.rr_residual = parse_bool(key, v)?,
            "shared_projection" => self.shared_projection = parse_bool(key, v)?,
            "pma_branch" => {
                self.pma_branch = match v {
                    "both" => PmaBranch::Both,
                    "left" => PmaBranch::LeftOnly,
                    "right" => PmaBranch::RightOnly,
                    _ => return Err(Error::InvalidConfig(format!("pma_branch: unknown value `{v}`"))),
                }
            }
            "right_activation" => {
                self.right_activation = match v {
                    "relu" => FeatureActivation::Relu,
                    "sigmoid" => FeatureActivation::Sigmoid,
                    _ => return Err(Error::InvalidConfig(format!("right_activation: unknown value `{v}`"))),
                }
            }
            "att_kernel" => self.att_kernel = parse_usize(key, v)?,
            "upsampling" => {
                if v != "nearest" {
                    return Err(Error::InvalidConfig(format!("upsampling: only `nearest` is available, got `{v}`")));
                }
                self.upsampling = Upsampling::Nearest;
            }
            "degree_eps" => {
                self.degree_eps = v
                    .parse()
                    .map_err(|_| Error::InvalidConfig(format!("degree_eps: bad number `{v}`")))?
            }
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::InvalidConfig(format!("line {}: expected key=value", lineno + 1)))?;
            if !cfg.set(k, v)? {
                return Err(Error::InvalidConfig(format!("line {}: unknown key `{}`", lineno + 1, k.trim())));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

struct Seeder {
    base: u64,
    n: u64,
}

impl Seeder {
    fn next(&mut self) -> u64 {
        self.n += 1;
        splitmix(self.base ^ splitmix(self.n))
    }
}

fn push_conv<T: Real>(set: &mut ParamSet<T>, prefix: &str, p: ConvParams<T>) -> Result<()> {
    set.insert(format!("{prefix}.w"), p.w)?;
    set.insert(format!("{prefix}.b"), p.b)
}

fn push_reasoning<T: Real>(set: &mut ParamSet<T>, prefix: &str, p: ReasoningParams<T>) -> Result<()> {
    set.insert(format!("{prefix}.proj_w"), p.proj_w)?;
    set.insert(format!("{prefix}.proj_b"), p.proj_b)?;
    if let Some((w, b)) = p.proj_j {
        set.insert(format!("{prefix}.proj_j_w"), w)?;
        set.insert(format!("{prefix}.proj_j_b"), b)?;
    }
    set.insert(format!("{prefix}.lambda_w"), p.lambda_w)?;
    set.insert(format!("{prefix}.lambda_b"), p.lambda_b)?;
    set.insert(format!("{prefix}.theta"), p.theta)
}

fn decoder_in_channels(cfg: &NetworkConfig, s: usize) -> usize {
    // Decoder step producing F_d^s consumes F_d^{s+1} and the stage-s encoder features.
    let deeper = if s == STAGES - 1 { cfg.stage_channels[STAGES - 1] } else { cfg.decoder_width };
    deeper + cfg.stage_channels[s - 1]
}

/// Xavier weights and zero biases for every module, whichever toggles are on,
/// so ablations share one parameter layout.
pub fn init_params<T: Real>(cfg: &NetworkConfig, seed: u64) -> Result<ParamSet<T>> {
    cfg.validate()?;
    let mut set = ParamSet::new();
    let mut seeds = Seeder { base: seed, n: 0 };
    let mut cin = 3;
    for s in 1..=STAGES {
        let c = cfg.stage_channels[s - 1];
        for j in 0..3 {
            let inp = if j == 0 { cin } else { c };
            push_conv(&mut set, &format!("stage{s}.conv{j}"), ConvParams::xavier(3, inp, c, seeds.next()))?;
        }
        cin = c;
    }
    for s in REASONING_STAGES {
        let c = cfg.stage_channels[s - 1];
        let (h, w) = cfg.stage_size(s);
        for (tag, mode) in [("srr", GraphMode::Spatial), ("crr", GraphMode::Channel)] {
            let a2 = graph::feature_dim(mode, h, w, c);
            push_reasoning(
                &mut set,
                &format!("rr{s}.{tag}"),
                ReasoningParams::xavier(a2, cfg.shared_projection, seeds.next()),
            )?;
        }
        let nl = NonLocalParams::xavier(c, seeds.next());
        set.insert(format!("nl{s}.theta"), nl.theta)?;
        set.insert(format!("nl{s}.phi"), nl.phi)?;
        set.insert(format!("nl{s}.g"), nl.g)?;
        set.insert(format!("nl{s}.out"), nl.out)?;
    }
    for s in ATTENTION_STAGES {
        let p = PmaParams::xavier(cfg.stage_channels[s - 1], cfg.att_kernel, seeds.next());
        for (i, conv) in p.left.into_iter().enumerate() {
            push_conv(&mut set, &format!("pma{s}.left{i}"), conv)?;
        }
        for (i, conv) in p.right.into_iter().enumerate() {
            push_conv(&mut set, &format!("pma{s}.right{i}"), conv)?;
        }
        for (i, conv) in p.right_att.into_iter().enumerate() {
            push_conv(&mut set, &format!("pma{s}.att{i}"), conv)?;
        }
        push_conv(&mut set, &format!("pma{s}.fuse"), p.fuse)?;
    }
    for s in (1..STAGES).rev() {
        push_conv(
            &mut set,
            &format!("dec{s}"),
            ConvParams::xavier(3, decoder_in_channels(cfg, s), cfg.decoder_width, seeds.next()),
        )?;
    }
    let dw = cfg.decoder_width;
    push_conv(&mut set, "head.conv0", ConvParams::xavier(3, dw, dw, seeds.next()))?;
    push_conv(&mut set, "head.conv1", ConvParams::xavier(3, dw, dw, seeds.next()))?;
    push_conv(&mut set, "head.out", ConvParams::xavier(1, dw, 1, seeds.next()))?;
    Ok(set)
}

fn conv_vars(b: &Bound<'_>, prefix: &str) -> Result<ConvVars> {
    Ok(ConvVars {
        w: b.get(&format!("{prefix}.w"))?,
        b: b.get(&format!("{prefix}.b"))?,
    })
}

fn reasoning_vars(b: &Bound<'_>, prefix: &str, shared: bool) -> Result<ReasoningVars> {
    Ok(ReasoningVars {
        proj_w: b.get(&format!("{prefix}.proj_w"))?,
        proj_b: b.get(&format!("{prefix}.proj_b"))?,
        proj_j: if shared {
            None
        } else {
            Some((b.get(&format!("{prefix}.proj_j_w"))?, b.get(&format!("{prefix}.proj_j_b"))?))
        },
        lambda_w: b.get(&format!("{prefix}.lambda_w"))?,
        lambda_b: b.get(&format!("{prefix}.lambda_b"))?,
        theta: b.get(&format!("{prefix}.theta"))?,
    })
}

fn nonlocal_vars(b: &Bound<'_>, s: usize) -> Result<NonLocalVars> {
    Ok(NonLocalVars {
        theta: b.get(&format!("nl{s}.theta"))?,
        phi: b.get(&format!("nl{s}.phi"))?,
        g: b.get(&format!("nl{s}.g"))?,
        out: b.get(&format!("nl{s}.out"))?,
    })
}

fn pma_vars(b: &Bound<'_>, s: usize) -> Result<PmaVars> {
    let convs = |tag: &str| -> Result<Vec<ConvVars>> {
        (0..SCALES.len()).map(|i| conv_vars(b, &format!("pma{s}.{tag}{i}"))).collect()
    };
    Ok(PmaVars {
        left: convs("left")?,
        right: convs("right")?,
        right_att: convs("att")?,
        fuse: conv_vars(b, &format!("pma{s}.fuse"))?,
    })
}

/// One backbone stage: stride-2 conv then two stride-1 convs, each with ReLU.
fn stage<T: Real>(tape: &mut Tape<T>, b: &Bound<'_>, s: usize, x: Var) -> Result<Var> {
    let mut y = x;
    for j in 0..3 {
        let conv = conv_vars(b, &format!("stage{s}.conv{j}"))?;
        let z = conv.apply(tape, y, if j == 0 { 2 } else { 1 })?;
        y = tape.relu(z);
    }
    Ok(y)
}

fn check_image<T: Real>(tape: &Tape<T>, image: Var) -> Result<()> {
    let (h, w, c) = tape.value(image).dims3("backbone")?;
    if c != 3 {
        return Err(shape_err!("backbone", "expected 3 input channels, got {c}"));
    }
    if h % 32 != 0 || w % 32 != 0 {
        return Err(Error::InvalidSize(format!(
            "image is {h}x{w}; height and width must be divisible by 32"
        )));
    }
    Ok(())
}

/// Plain backbone features `X^1..X^5` (no reasoning between stages).
pub fn backbone_forward<T: Real>(tape: &mut Tape<T>, b: &Bound<'_>, image: Var) -> Result<Vec<Var>> {
    check_image(tape, image)?;
    let mut feats = Vec::with_capacity(STAGES);
    let mut x = image;
    for s in 1..=STAGES {
        x = stage(tape, b, s, x)?;
        feats.push(x);
    }
    Ok(feats)
}

/// Encoder outputs. `backbone[s-1]` is `X^s`; `encoded[s-1]` is `X^s` for
/// the low-level stages and the reasoning output `F_rc^s` for stages 3-5.
#[derive(Debug, Clone)]
pub struct Encoded {
    pub backbone: Vec<Var>,
    pub encoded: Vec<Var>,
}

pub fn encode<T: Real>(tape: &mut Tape<T>, b: &Bound<'_>, cfg: &NetworkConfig, image: Var) -> Result<Encoded> {
    check_image(tape, image)?;
    let rcfg = cfg.reasoning();
    let mut backbone = Vec::with_capacity(STAGES);
    let mut encoded = Vec::with_capacity(STAGES);
    let mut x = image;
    for s in 1..=STAGES {
        let xs = stage(tape, b, s, x)?;
        backbone.push(xs);
        let mut y = xs;
        if REASONING_STAGES.contains(&s) {
            if cfg.use_nonlocal {
                y = graph::non_local_block(tape, y, &nonlocal_vars(b, s)?)?.output;
            } else {
                if cfg.use_srr {
                    y = graph::srr(tape, y, &reasoning_vars(b, &format!("rr{s}.srr"), cfg.shared_projection)?, &rcfg)?;
                }
                if cfg.use_crr {
                    y = graph::crr(tape, y, &reasoning_vars(b, &format!("rr{s}.crr"), cfg.shared_projection)?, &rcfg)?;
                }
            }
        }
        encoded.push(y);
        x = y;
    }
    Ok(Encoded { backbone, encoded })
}

/// Decoder fusion step: `relu(conv([up(f_d) * (a_f + 1), f_e]))`, or without
/// the attention factor when `a_f` is `None`.
pub fn decode_fuse<T: Real>(
    tape: &mut Tape<T>,
    f_d: Var,
    f_e: Var,
    a_f: Option<Var>,
    conv: &ConvVars,
) -> Result<Var> {
    let (hd, wd, _) = tape.value(f_d).dims3("decode_fuse")?;
    let (he, we, _) = tape.value(f_e).dims3("decode_fuse")?;
    if (he, we) != (2 * hd, 2 * wd) {
        return Err(shape_err!(
            "decode_fuse",
            "encoder features {he}x{we} are not twice the decoder features {hd}x{wd}"
        ));
    }
    let mut up = tape.upsample2x(f_d)?;
    if let Some(a) = a_f {
        let sa = tape.value(a).shape();
        if sa != [he, we, 1] {
            return Err(shape_err!("decode_fuse", "attention map {sa:?} does not match encoder features {he}x{we}"));
        }
        let gain = tape.affine(a, T::one(), T::one());
        up = tape.mul(up, gain)?;
    }
    let cat = tape.concat(&[up, f_e])?;
    let z = conv.apply(tape, cat, 1)?;
    Ok(tape.relu(z))
}

#[derive(Debug, Clone)]
pub struct Forward {
    pub encoded: Encoded,
    /// Attention maps `A_f^1`, `A_f^2` when PMA is on.
    pub attention: Vec<Var>,
    /// Saliency map, `H x W` at input resolution.
    pub saliency: Var,
}

pub fn forward<T: Real>(tape: &mut Tape<T>, b: &Bound<'_>, cfg: &NetworkConfig, image: Var) -> Result<Forward> {
    let enc = encode(tape, b, cfg, image)?;
    let pcfg = cfg.pma();
    let mut attention = Vec::new();
    let mut f_d = enc.encoded[STAGES - 1];
    for s in (2..=STAGES).rev() {
        let shallow = s - 1;
        let a_f = if cfg.use_pma && ATTENTION_STAGES.contains(&shallow) {
            let pv = pma_vars(b, shallow)?;
            let out = attention::pma(tape, enc.backbone[shallow - 1], &pv, &pcfg)?;
            attention.push(out.fused);
            Some(out.fused)
        } else {
            None
        };
        let conv = conv_vars(b, &format!("dec{shallow}"))?;
        f_d = decode_fuse(tape, f_d, enc.encoded[shallow - 1], a_f, &conv)?;
    }
    let mut y = f_d;
    for name in ["head.conv0", "head.conv1"] {
        let z = conv_vars(b, name)?.apply(tape, y, 1)?;
        y = tape.relu(z);
    }
    let z = conv_vars(b, "head.out")?.apply(tape, y, 1)?;
    let s = tape.sigmoid(z);
    let up = tape.upsample2x(s)?;
    let (h, w, _) = tape.value(up).dims3("head")?;
    let saliency = tape.reshape(up, &[h, w])?;
    Ok(Forward {
        encoded: enc,
        attention,
        saliency,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyPrediction<T> {
    pub map: Tensor<T>,
    /// `X^1..X^5` when captured.
    pub per_stage_features: Option<Vec<Tensor<T>>>,
}

/// Inference on one `H x W x 3` image.
pub fn predict<T: Real>(
    params: &ParamSet<T>,
    cfg: &NetworkConfig,
    image: &Tensor<T>,
    capture_features: bool,
) -> Result<SaliencyPrediction<T>> {
    let mut tape = Tape::new();
    let b = params.bind(&mut tape, false);
    let x = tape.constant(image.clone());
    let fwd = forward(&mut tape, &b, cfg, x)?;
    let map = tape.value(fwd.saliency).clone();
    if !map.all_finite() {
        return Err(Error::NonFinite { op: "predict" });
    }
    let per_stage_features = capture_features.then(|| {
        fwd.encoded
            .backbone
            .iter()
            .map(|&v| tape.value(v).clone())
            .collect()
    });
    Ok(SaliencyPrediction {
        map,
        per_stage_features,
    })
}

/// Forward, class-balanced loss and backward for one sample. Gradients are
/// returned in parameter order.
pub fn loss_and_grads<T: Real>(
    params: &ParamSet<T>,
    cfg: &NetworkConfig,
    image: &Tensor<T>,
    label: &Tensor<T>,
) -> Result<(T, Vec<Tensor<T>>)> {
    let mut tape = Tape::new();
    let b = params.bind(&mut tape, true);
    let x = tape.constant(image.clone());
    let fwd = forward(&mut tape, &b, cfg, x)?;
    let loss = tape.balanced_bce(fwd.saliency, label)?;
    let value = tape.value(loss).item();
    if !value.is_finite() {
        return Err(Error::NonFinite { op: "loss" });
    }
    let mut grads: Gradients<T> = tape.backward(loss)?;
    let g = b.vars().iter().map(|&v| grads.take(v)).collect::<Result<Vec<_>>>()?;
    Ok((value, g))
}

/// Loss only (no backward), e.g. for finite differences.
pub fn loss_value<T: Real>(params: &ParamSet<T>, cfg: &NetworkConfig, image: &Tensor<T>, label: &Tensor<T>) -> Result<T> {
    let mut tape = Tape::new();
    let b = params.bind(&mut tape, false);
    let x = tape.constant(image.clone());
    let fwd = forward(&mut tape, &b, cfg, x)?;
    let loss = tape.balanced_bce(fwd.saliency, label)?;
    Ok(tape.value(loss).item())
}
