//! Samples, the dihedral augmentation group, resizing and the synthetic
//! shapes dataset.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

#[cfg_attr(feature = "std", allow(unused_imports))]
use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::shape_err;
use crate::tensor::Tensor;

/// Gray level at or above which a mask byte counts as foreground.
pub const MASK_THRESHOLD: u8 = 128;

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// H x W x 3, values in [0, 1].
    pub image: Tensor<f32>,
    /// H x W, values in {0, 1}.
    pub mask: Tensor<f32>,
    pub id: String,
}

impl Sample {
    pub fn new(image: Tensor<f32>, mask: Tensor<f32>, id: impl Into<String>) -> Result<Self> {
        let (h, w, c) = image.dims3("sample")?;
        if c != 3 {
            return Err(shape_err!("sample", "image must have 3 channels, got {c}"));
        }
        let mask = mask.to_map()?;
        if mask.shape() != [h, w] {
            return Err(shape_err!("sample", "image is {h}x{w}, mask is {:?}", mask.shape()));
        }
        if let Some((i, v)) = image.data().iter().enumerate().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidTensor(format!("image value {v} at index {i} outside [0, 1]")));
        }
        if let Some((index, v)) = mask.data().iter().enumerate().find(|(_, &v)| v != 0.0 && v != 1.0) {
            return Err(Error::NonBinaryLabel {
                index,
                value: *v as f64,
            });
        }
        Ok(Self {
            image,
            mask,
            id: id.into(),
        })
    }

    pub fn size(&self) -> (usize, usize) {
        (self.mask.shape()[0], self.mask.shape()[1])
    }

    pub fn foreground(&self) -> usize {
        self.mask.data().iter().filter(|&&v| v == 1.0).count()
    }
}

/// Binarize 8-bit gray levels into a {0, 1} mask.
pub fn mask_from_bytes(h: usize, w: usize, bytes: &[u8]) -> Result<Tensor<f32>> {
    Tensor::new(
        vec![h, w],
        bytes.iter().map(|&b| if b >= MASK_THRESHOLD { 1.0 } else { 0.0 }).collect(),
    )
}

/// Elements of the symmetry group of the square. `FlipRotK` is a
/// horizontal flip applied after `RotK`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Dihedral {
    Identity,
    Rot90,
    Rot180,
    Rot270,
    Flip,
    FlipRot90,
    FlipRot180,
    FlipRot270,
}

impl Dihedral {
    pub const ALL: [Dihedral; 8] = [
        Dihedral::Identity,
        Dihedral::Rot90,
        Dihedral::Rot180,
        Dihedral::Rot270,
        Dihedral::Flip,
        Dihedral::FlipRot90,
        Dihedral::FlipRot180,
        Dihedral::FlipRot270,
    ];

    fn parts(self) -> (bool, usize) {
        match self {
            Dihedral::Identity => (false, 0),
            Dihedral::Rot90 => (false, 1),
            Dihedral::Rot180 => (false, 2),
            Dihedral::Rot270 => (false, 3),
            Dihedral::Flip => (true, 0),
            Dihedral::FlipRot90 => (true, 1),
            Dihedral::FlipRot180 => (true, 2),
            Dihedral::FlipRot270 => (true, 3),
        }
    }

    pub fn swaps_axes(self) -> bool {
        self.parts().1 % 2 == 1
    }

    /// Apply to an H x W or H x W x C tensor.
    pub fn apply<T: crate::Real>(self, t: &Tensor<T>) -> Result<Tensor<T>> {
        let (h, w, c) = match t.shape()[..] {
            [h, w] => (h, w, 1),
            [h, w, c] => (h, w, c),
            _ => return Err(shape_err!("dihedral", "expected rank 2 or 3, got {:?}", t.shape())),
        };
        let (flip, quarter) = self.parts();
        let (oh, ow) = if quarter % 2 == 1 { (w, h) } else { (h, w) };
        let src = t.data();
        let mut out = Vec::with_capacity(src.len());
        for i in 0..oh {
            for j in 0..ow {
                let j = if flip { ow - 1 - j } else { j };
                // Clockwise rotation by `quarter` quarter turns.
                let (y, x) = match quarter {
                    0 => (i, j),
                    1 => (h - 1 - j, i),
                    2 => (h - 1 - i, w - 1 - j),
                    _ => (j, w - 1 - i),
                };
                let base = (y * w + x) * c;
                out.extend_from_slice(&src[base..base + c]);
            }
        }
        let shape = if t.rank() == 2 { vec![oh, ow] } else { vec![oh, ow, c] };
        Tensor::new(shape, out)
    }

    pub fn apply_sample(self, s: &Sample) -> Result<Sample> {
        Ok(Sample {
            image: self.apply(&s.image)?,
            mask: self.apply(&s.mask)?,
            id: format!("{}#{:?}", s.id, self),
        })
    }
}

/// The sample followed by its seven non-identity dihedral variants.
pub fn augment7(s: &Sample) -> Result<Vec<Sample>> {
    let mut out = vec![s.clone()];
    for t in &Dihedral::ALL[1..] {
        out.push(t.apply_sample(s)?);
    }
    Ok(out)
}

fn check_target(th: usize, tw: usize) -> Result<()> {
    if th == 0 || tw == 0 {
        return Err(Error::InvalidSize(format!("resize target {th}x{tw} has a zero side")));
    }
    Ok(())
}

fn grid<T: crate::Real>(t: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match t.shape()[..] {
        [h, w] => Ok((h, w, 1)),
        [h, w, c] => Ok((h, w, c)),
        _ => Err(shape_err!("resize", "expected rank 2 or 3, got {:?}", t.shape())),
    }
}

fn out_shape(rank: usize, th: usize, tw: usize, c: usize) -> Vec<usize> {
    if rank == 2 {
        vec![th, tw]
    } else {
        vec![th, tw, c]
    }
}

/// Bilinear resampling with half-pixel centres and edge clamping.
pub fn resize_bilinear(t: &Tensor<f32>, th: usize, tw: usize) -> Result<Tensor<f32>> {
    check_target(th, tw)?;
    let (h, w, c) = grid(t)?;
    let taps = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f32)> {
        let scale = n_in as f64 / n_out as f64;
        (0..n_out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
                let lo = src.floor() as usize;
                let hi = (lo + 1).min(n_in - 1);
                (lo, hi, (src - lo as f64) as f32)
            })
            .collect()
    };
    let ys = taps(h, th);
    let xs = taps(w, tw);
    let d = t.data();
    let px = |y: usize, x: usize, k: usize| d[(y * w + x) * c + k];
    let mut out = Vec::with_capacity(th * tw * c);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            for k in 0..c {
                let top = px(y0, x0, k) + fx * (px(y0, x1, k) - px(y0, x0, k));
                let bottom = px(y1, x0, k) + fx * (px(y1, x1, k) - px(y1, x0, k));
                out.push(top + fy * (bottom - top));
            }
        }
    }
    Tensor::new(out_shape(t.rank(), th, tw, c), out)
}

pub fn resize_nearest<T: crate::Real>(t: &Tensor<T>, th: usize, tw: usize) -> Result<Tensor<T>> {
    check_target(th, tw)?;
    let (h, w, c) = grid(t)?;
    let pick = |n_in: usize, n_out: usize, o: usize| ((2 * o + 1) * n_in / (2 * n_out)).min(n_in - 1);
    let d = t.data();
    let mut out = Vec::with_capacity(th * tw * c);
    for i in 0..th {
        let y = pick(h, th, i);
        for j in 0..tw {
            let x = pick(w, tw, j);
            out.extend_from_slice(&d[(y * w + x) * c..(y * w + x + 1) * c]);
        }
    }
    Tensor::new(out_shape(t.rank(), th, tw, c), out)
}

pub fn resize(s: &Sample, th: usize, tw: usize) -> Result<Sample> {
    if s.size() == (th, tw) {
        check_target(th, tw)?;
        return Ok(s.clone());
    }
    Ok(Sample {
        image: resize_bilinear(&s.image, th, tw)?,
        mask: resize_nearest(&s.mask, th, tw)?,
        id: s.id.clone(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ShapeKind {
    Ellipse,
    Rectangle,
    Bar,
}

/// A filled primitive in pixel coordinates; pixel `(r, c)` is covered when
/// its centre `(c + 0.5, r + 0.5)` lies inside.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Primitive {
    pub kind: ShapeKind,
    pub cx: f64,
    pub cy: f64,
    /// Semi-axes for ellipses, half-extents for rectangles and bars.
    pub a: f64,
    pub b: f64,
    pub angle: f64,
}

impl Primitive {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.angle.sin_cos();
        let dx = x - self.cx;
        let dy = y - self.cy;
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        match self.kind {
            ShapeKind::Ellipse => (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0,
            ShapeKind::Rectangle | ShapeKind::Bar => u.abs() <= self.a && v.abs() <= self.b,
        }
    }

    pub fn area(&self) -> f64 {
        match self.kind {
            ShapeKind::Ellipse => PI * self.a * self.b,
            _ => 4.0 * self.a * self.b,
        }
    }

    pub fn perimeter(&self) -> f64 {
        match self.kind {
            // Ramanujan's approximation.
            ShapeKind::Ellipse => {
                let (a, b) = (self.a, self.b);
                PI * (3.0 * (a + b) - ((3.0 * a + b) * (a + 3.0 * b)).sqrt())
            }
            _ => 4.0 * (self.a + self.b),
        }
    }

    pub fn radius(&self) -> f64 {
        match self.kind {
            ShapeKind::Ellipse => self.a.max(self.b),
            _ => self.a.hypot(self.b),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSample {
    pub sample: Sample,
    pub shapes: Vec<Primitive>,
}

fn random_primitive(rng: &mut ChaCha8Rng, size: f64) -> Primitive {
    let kind = match rng.gen_range(0..3) {
        0 => ShapeKind::Ellipse,
        1 => ShapeKind::Rectangle,
        _ => ShapeKind::Bar,
    };
    let (a, b) = match kind {
        ShapeKind::Bar => (
            rng.gen_range(0.2..0.38) * size,
            rng.gen_range(0.03..0.06) * size + 0.5,
        ),
        _ => (rng.gen_range(0.08..0.24) * size, rng.gen_range(0.08..0.24) * size),
    };
    Primitive {
        kind,
        cx: 0.0,
        cy: 0.0,
        a,
        b,
        angle: rng.gen_range(0.0..PI),
    }
}

fn place_shapes(rng: &mut ChaCha8Rng, size: usize) -> Vec<Primitive> {
    let s = size as f64;
    let count = rng.gen_range(1..=3);
    let mut shapes: Vec<Primitive> = Vec::with_capacity(count);
    let mut attempts = 0;
    while shapes.len() < count && attempts < 64 {
        attempts += 1;
        let mut p = random_primitive(rng, s);
        let r = p.radius();
        if 2.0 * (r + 1.0) >= s {
            continue;
        }
        p.cx = rng.gen_range(r + 1.0..s - r - 1.0);
        p.cy = rng.gen_range(r + 1.0..s - r - 1.0);
        let clear = shapes
            .iter()
            .all(|q| (q.cx - p.cx).hypot(q.cy - p.cy) > q.radius() + r + 2.0);
        if clear {
            shapes.push(p);
        }
    }
    shapes
}

fn render(rng: &mut ChaCha8Rng, size: usize, shapes: &[Primitive]) -> (Vec<f32>, Vec<f32>) {
    let base: [f64; 3] = core::array::from_fn(|_| rng.gen_range(0.3..0.7));
    let fill: [f64; 3] = core::array::from_fn(|i| {
        let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        (base[i] + sign * rng.gen_range(0.18..0.3)).clamp(0.0, 1.0)
    });
    let amp = rng.gen_range(0.03..0.07);
    let fx = rng.gen_range(0.1..0.5);
    let fy = rng.gen_range(0.1..0.5);
    let phase = rng.gen_range(0.0..2.0 * PI);
    let mut image = Vec::with_capacity(size * size * 3);
    let mut mask = Vec::with_capacity(size * size);
    for r in 0..size {
        for c in 0..size {
            let (x, y) = (c as f64 + 0.5, r as f64 + 0.5);
            let inside = shapes.iter().any(|p| p.contains(x, y));
            let texture = amp * (fx * x + fy * y + phase).sin();
            for k in 0..3 {
                let noise = rng.gen_range(-0.03..0.03);
                let v = if inside { fill[k] + 0.5 * texture } else { base[k] + texture } + noise;
                image.push(v.clamp(0.0, 1.0) as f32);
            }
            mask.push(if inside { 1.0 } else { 0.0 });
        }
    }
    (image, mask)
}

/// Sample `index` of the synthetic set for `seed`. Independent of how many
/// other samples are generated.
pub fn synth_sample(seed: u64, index: usize, size: usize) -> Result<SynthSample> {
    if size < 8 {
        return Err(Error::InvalidSize(format!("synthetic samples need size >= 8, got {size}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    loop {
        let shapes = place_shapes(&mut rng, size);
        if shapes.is_empty() {
            continue;
        }
        let (image, mask) = render(&mut rng, size, &shapes);
        let fg = mask.iter().filter(|&&v| v == 1.0).count();
        if fg == 0 || 2 * fg > size * size {
            continue;
        }
        let sample = Sample::new(
            Tensor::new(vec![size, size, 3], image)?,
            Tensor::new(vec![size, size], mask)?,
            format!("synth_{seed}_{index:04}"),
        )?;
        return Ok(SynthSample { sample, shapes });
    }
}

pub fn synth_dataset(n: usize, seed: u64, size: usize) -> Result<Vec<Sample>> {
    if n == 0 {
        return Err(Error::InvalidSize("synthetic dataset needs n >= 1".into()));
    }
    (0..n).map(|i| synth_sample(seed, i, size).map(|s| s.sample)).collect()
}
