use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array2, Array3, ArrayView2, ArrayView3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{CoreError, Result};

/// Right-angle rotation plus flips, applied identically to image and label.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WeakTransform {
    /// Number of counter-clockwise quarter turns (0..4).
    pub quarter_turns: u8,
    pub flip_h: bool,
    pub flip_v: bool,
}

impl WeakTransform {
    pub const IDENTITY: Self = Self { quarter_turns: 0, flip_h: false, flip_v: false };

    /// Quarter turns are drawn from {0,1,2,3} for square planes and {0,2}
    /// otherwise, so the output keeps the input shape.
    pub fn sample<R: Rng + ?Sized>(rng: &mut R, height: usize, width: usize) -> Self {
        let k = rng.random_range(0..4u8);
        let quarter_turns = if height == width { k } else { (k / 2) * 2 };
        Self { quarter_turns, flip_h: rng.random_bool(0.5), flip_v: rng.random_bool(0.5) }
    }

    /// Source coordinate of output pixel `(r, c)` in an `h×w` plane.
    fn source(&self, r: usize, c: usize, h: usize, w: usize) -> (usize, usize) {
        // Undo the flips, then the rotation.
        let r = if self.flip_v { h - 1 - r } else { r };
        let c = if self.flip_h { w - 1 - c } else { c };
        match self.quarter_turns % 4 {
            0 => (r, c),
            1 => (c, w - 1 - r),
            2 => (h - 1 - r, w - 1 - c),
            _ => (h - 1 - c, r),
        }
    }

    pub fn apply_plane<T: Copy>(&self, x: ArrayView2<'_, T>) -> Array2<T> {
        let (h, w) = x.dim();
        assert!(self.quarter_turns % 2 == 0 || h == w, "odd quarter turns need a square plane");
        Array2::from_shape_fn((h, w), |(r, c)| {
            let (sr, sc) = self.source(r, c, h, w);
            x[[sr, sc]]
        })
    }

    pub fn apply<T: Copy>(&self, x: ArrayView3<'_, T>) -> Array3<T> {
        let mut out = x.to_owned();
        for (mut dst, src) in out.axis_iter_mut(Axis(0)).zip(x.axis_iter(Axis(0))) {
            dst.assign(&self.apply_plane(src));
        }
        out
    }
}

/// Geometry-preserving weak augmentation of an image and its optional label.
pub fn weak_augment<R: Rng + ?Sized>(
    x: ArrayView3<'_, f32>,
    y: Option<ArrayView2<'_, u8>>,
    rng: &mut R,
) -> Result<(Array3<f32>, Option<Array2<u8>>, WeakTransform)> {
    let (_, h, w) = x.dim();
    if let Some(y) = &y {
        if y.dim() != (h, w) {
            return Err(CoreError::Shape(format!("label {:?} does not match image {h}x{w}", y.dim())));
        }
    }
    let t = WeakTransform::sample(rng, h, w);
    Ok((t.apply(x), y.map(|y| t.apply_plane(y)), t))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrongOp {
    ColorJitter,
    Blur,
    Cutout,
}

impl fmt::Display for StrongOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StrongOp::ColorJitter => "colorjitter",
            StrongOp::Blur => "blur",
            StrongOp::Cutout => "cutout",
        })
    }
}

impl FromStr for StrongOp {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "colorjitter" | "color_jitter" | "jitter" => Ok(StrongOp::ColorJitter),
            "blur" => Ok(StrongOp::Blur),
            "cutout" => Ok(StrongOp::Cutout),
            other => Err(CoreError::Config(format!("unknown strong augmentation '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrongConfig {
    /// Enabled operations; always applied as jitter, then blur, then cutout.
    pub ops: Vec<StrongOp>,
    /// Cutout area as a fraction of the image, `[lo, hi]`.
    pub cutout_area: (f64, f64),
    /// Range of the brightness and contrast factors.
    pub jitter_range: (f64, f64),
    /// Range of the Gaussian blur standard deviation, in pixels.
    pub blur_sigma: (f64, f64),
    /// Value written into the cutout rectangle.
    pub fill: f32,
}

impl Default for StrongConfig {
    fn default() -> Self {
        Self {
            ops: vec![StrongOp::ColorJitter, StrongOp::Cutout],
            cutout_area: (0.1, 0.3),
            jitter_range: (0.6, 1.4),
            blur_sigma: (0.1, 2.0),
            fill: 0.5,
        }
    }
}

impl StrongConfig {
    pub fn validate(&self) -> Result<()> {
        let ordered = |(lo, hi): (f64, f64), name: &str, min: f64, max: f64| {
            if lo.is_finite() && hi.is_finite() && min <= lo && lo <= hi && hi <= max {
                Ok(())
            } else {
                Err(CoreError::Config(format!("{name} range ({lo}, {hi}) must satisfy {min} <= lo <= hi <= {max}")))
            }
        };
        ordered(self.cutout_area, "cutout_area", 0.0, 1.0)?;
        ordered(self.jitter_range, "jitter_range", 0.0, f64::MAX)?;
        ordered(self.blur_sigma, "blur_sigma", 1e-6, f64::MAX)?;
        Ok(())
    }

    fn has(&self, op: StrongOp) -> bool {
        self.ops.contains(&op)
    }
}

/// Axis-aligned rectangle `rows r0..r0+h`, `cols c0..c0+w`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub r0: usize,
    pub c0: usize,
    pub h: usize,
    pub w: usize,
}

/// Intensity-only strong augmentation; pixels never move.
pub fn strong_augment<R: Rng + ?Sized>(x_w: ArrayView3<'_, f32>, rng: &mut R, cfg: &StrongConfig) -> Array3<f32> {
    strong_augment_traced(x_w, rng, cfg).0
}

/// As [`strong_augment`], also returning the cutout rectangle if one was drawn.
pub fn strong_augment_traced<R: Rng + ?Sized>(
    x_w: ArrayView3<'_, f32>,
    rng: &mut R,
    cfg: &StrongConfig,
) -> (Array3<f32>, Option<Rect>) {
    let mut x = x_w.to_owned();
    if cfg.has(StrongOp::ColorJitter) {
        let (lo, hi) = cfg.jitter_range;
        let brightness = rng.random_range(lo..=hi) as f32;
        let contrast = rng.random_range(lo..=hi) as f32;
        color_jitter(&mut x, brightness, contrast);
    }
    if cfg.has(StrongOp::Blur) {
        let (lo, hi) = cfg.blur_sigma;
        let sigma = rng.random_range(lo..=hi);
        x = gaussian_blur(x.view(), sigma);
    }
    let mut rect = None;
    if cfg.has(StrongOp::Cutout) {
        let (_, h, w) = x.dim();
        let r = cutout_rect(rng, h, w, cfg.cutout_area);
        x.slice_mut(s![.., r.r0..r.r0 + r.h, r.c0..r.c0 + r.w]).fill(cfg.fill);
        rect = Some(r);
    }
    (x, rect)
}

/// Scales intensities by `brightness`, then stretches them about the image
/// mean by `contrast`; the result is clipped to `[0, 1]`.
pub fn color_jitter(x: &mut Array3<f32>, brightness: f32, contrast: f32) {
    x.mapv_inplace(|v| v * brightness);
    let mean = x.mean().unwrap_or(0.0);
    x.mapv_inplace(|v| ((v - mean) * contrast + mean).clamp(0.0, 1.0));
}

fn gaussian_kernel(sigma: f64) -> Vec<f32> {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let raw: Vec<f64> = (-radius..=radius).map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let sum: f64 = raw.iter().sum();
    raw.iter().map(|v| (v / sum) as f32).collect()
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - m }) as usize
}

/// Separable Gaussian blur with mirrored borders, per channel.
pub fn gaussian_blur(x: ArrayView3<'_, f32>, sigma: f64) -> Array3<f32> {
    let k = gaussian_kernel(sigma);
    let radius = (k.len() / 2) as isize;
    let (c, h, w) = x.dim();
    let mut tmp = Array3::<f32>::zeros((c, h, w));
    for ch in 0..c {
        for r in 0..h {
            for col in 0..w {
                let mut acc = 0.0;
                for (t, kv) in k.iter().enumerate() {
                    acc += kv * x[[ch, r, reflect(col as isize + t as isize - radius, w)]];
                }
                tmp[[ch, r, col]] = acc;
            }
        }
    }
    let mut out = Array3::<f32>::zeros((c, h, w));
    for ch in 0..c {
        for r in 0..h {
            for col in 0..w {
                let mut acc = 0.0;
                for (t, kv) in k.iter().enumerate() {
                    acc += kv * tmp[[ch, reflect(r as isize + t as isize - radius, h), col]];
                }
                out[[ch, r, col]] = acc;
            }
        }
    }
    out
}

/// Draws a rectangle whose area fraction lies within `area` (as closely as
/// integer sides allow) with aspect ratio between 1:2 and 2:1 where possible.
pub fn cutout_rect<R: Rng + ?Sized>(rng: &mut R, h: usize, w: usize, area: (f64, f64)) -> Rect {
    let total = (h * w) as f64;
    let frac = rng.random_range(area.0..=area.1);
    let aspect: f64 = rng.random_range(0.5..=2.0);
    let target = frac * total;
    let mut rh = ((target * aspect).sqrt().round() as usize).clamp(1, h);
    let mut rw = ((target / rh as f64).round() as usize).clamp(1, w);
    let lo = (area.0 * total).ceil() as usize;
    let hi = ((area.1 * total).floor() as usize).max(1);
    while rh * rw < lo && (rw < w || rh < h) {
        if rw < w && (rw <= rh || rh == h) {
            rw += 1;
        } else {
            rh += 1;
        }
    }
    while rh * rw > hi && (rw > 1 || rh > 1) {
        if rw > 1 && (rw >= rh || rh == 1) {
            rw -= 1;
        } else {
            rh -= 1;
        }
    }
    let r0 = rng.random_range(0..=h - rh);
    let c0 = rng.random_range(0..=w - rw);
    Rect { r0, c0, h: rh, w: rw }
}

/// Weak and strong views of one sample, sharing a single geometric transform.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedPair {
    pub x_w: Array3<f32>,
    pub x_s: Array3<f32>,
    pub y: Option<Array2<u8>>,
    pub transform: WeakTransform,
    /// Seed that regenerates this pair through [`augment_pair`].
    pub seed_record: u64,
}

/// Builds a weak/strong pair from one sample. Without input perturbation the
/// strong view is a copy of the weak view.
pub fn augment_pair(
    x: ArrayView3<'_, f32>,
    y: Option<ArrayView2<'_, u8>>,
    seed: u64,
    cfg: &StrongConfig,
    input_perturbation: bool,
) -> Result<AugmentedPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (x_w, y, transform) = weak_augment(x, y, &mut rng)?;
    let x_s = if input_perturbation { strong_augment(x_w.view(), &mut rng, cfg) } else { x_w.clone() };
    Ok(AugmentedPair { x_w, x_s, y, transform, seed_record: seed })
}
