//! Trigger construction: patch masks, the noise-type × strategy matrix,
//! budgeted adversarial patch optimization, and trigger-set manifests.
//!
//! A trigger image is always a masked blend `x̃ = (1 − m) ⊙ x + m ⊙ p` of the
//! basic image `x` and patch content `p`. Non-local noise uses a full mask.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::corpus::{BasicTriggerSet, Pair};
use crate::embedding::{cosine_distance, Embedding};
use crate::encoder::{image_gradient_or_fd, DualEncoder};
use crate::error::{Error, Result};
use crate::rng;
use crate::sample::{quantize, ImageSample, Mask, TextSample};

/// Tolerance for the blend identity.
pub const BLEND_TOL: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseType {
    Gaussian,
    Poisson,
    SaltPepper,
    Multiplicative,
    Adversarial,
}

impl NoiseType {
    pub const RANDOM: [NoiseType; 4] = [
        NoiseType::Gaussian,
        NoiseType::Poisson,
        NoiseType::SaltPepper,
        NoiseType::Multiplicative,
    ];

    pub fn name(self) -> &'static str {
        match self {
            NoiseType::Gaussian => "gaussian",
            NoiseType::Poisson => "poisson",
            NoiseType::SaltPepper => "salt_pepper",
            NoiseType::Multiplicative => "multiplicative",
            NoiseType::Adversarial => "adversarial",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Global,
    Local,
    Blended,
    SpatiallyVariant,
    ContentAware,
    Optimized,
}

impl Strategy {
    pub const RANDOM: [Strategy; 5] = [
        Strategy::Global,
        Strategy::Local,
        Strategy::Blended,
        Strategy::SpatiallyVariant,
        Strategy::ContentAware,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Global => "global",
            Strategy::Local => "local",
            Strategy::Blended => "blended",
            Strategy::SpatiallyVariant => "spatially_variant",
            Strategy::ContentAware => "content_aware",
            Strategy::Optimized => "optimized",
        }
    }
}

/// How a trigger image is perturbed.
///
/// `intensity` means: standard deviation (gaussian), `1/255` of the photon
/// count level (poisson), flip probability (salt-and-pepper), half-width of
/// the uniform gain (multiplicative), and the mixing weight α for the
/// blended strategy. It is unused for adversarial noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    pub noise_type: NoiseType,
    pub strategy: Strategy,
    pub intensity: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn adversarial(seed: u64) -> Self {
        Self {
            noise_type: NoiseType::Adversarial,
            strategy: Strategy::Optimized,
            intensity: 1.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let adv = self.noise_type == NoiseType::Adversarial;
        if adv != (self.strategy == Strategy::Optimized) {
            return Err(Error::InvalidConfig(format!(
                "noise type {} cannot use strategy {}; adversarial noise pairs only with optimized",
                self.noise_type.name(),
                self.strategy.name()
            )));
        }
        if !self.intensity.is_finite() || self.intensity < 0.0 {
            return Err(Error::InvalidConfig(format!("noise intensity {} must be >= 0", self.intensity)));
        }
        let probability_like = self.noise_type == NoiseType::SaltPepper || self.strategy == Strategy::Blended;
        if probability_like && self.intensity > 1.0 {
            return Err(Error::InvalidConfig(format!(
                "intensity {} must be <= 1 for {}/{}",
                self.intensity,
                self.noise_type.name(),
                self.strategy.name()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatchShape {
    Rectangle,
    Triangle,
    Circle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatchPosition {
    /// Top-left corner of the patch's bounding square.
    Fixed { row: usize, col: usize },
    /// A uniformly drawn top-left corner that keeps the patch inside.
    Random { seed: u64 },
}

/// Where the patch goes and what it looks like. The bounding square has side
/// `⌊min(H, W) · size_fraction⌋`; triangles fill its lower-left half and
/// circles are inscribed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchSpec {
    pub shape: PatchShape,
    pub position: PatchPosition,
    pub size_fraction: f64,
}

impl Default for PatchSpec {
    fn default() -> Self {
        Self {
            shape: PatchShape::Rectangle,
            position: PatchPosition::Fixed { row: 12, col: 12 },
            size_fraction: 0.25,
        }
    }
}

impl PatchSpec {
    pub fn side(&self, image_size: (usize, usize)) -> usize {
        (image_size.0.min(image_size.1) as f64 * self.size_fraction).floor() as usize
    }

    /// Top-left corner after resolving a random position.
    pub fn origin(&self, image_size: (usize, usize)) -> Result<(usize, usize)> {
        let side = self.side(image_size);
        let (h, w) = image_size;
        match self.position {
            PatchPosition::Fixed { row, col } => {
                if row + side > h || col + side > w {
                    return Err(Error::PatchOutOfBounds(format!(
                        "{side}x{side} patch at ({row}, {col}) leaves the {h}x{w} image"
                    )));
                }
                Ok((row, col))
            }
            PatchPosition::Random { seed } => {
                if side > h || side > w {
                    return Err(Error::PatchOutOfBounds(format!("{side}x{side} patch in a {h}x{w} image")));
                }
                let mut rng = rng::stream(seed, "patch/position", 0);
                Ok((rng.random_range(0..=h - side), rng.random_range(0..=w - side)))
            }
        }
    }
}

/// Rasterizes a patch into a binary mask.
pub fn make_mask(image_size: (usize, usize), patch: &PatchSpec) -> Result<Mask> {
    if !(patch.size_fraction > 0.0 && patch.size_fraction <= 0.5) {
        return Err(Error::PatchOutOfBounds(format!(
            "size_fraction {} outside (0, 0.5]",
            patch.size_fraction
        )));
    }
    let side = patch.side(image_size);
    if side == 0 {
        return Err(Error::PatchOutOfBounds(format!(
            "size_fraction {} covers no pixels of a {}x{} image",
            patch.size_fraction, image_size.0, image_size.1
        )));
    }
    let (row, col) = patch.origin(image_size)?;
    let mut mask = Mask::empty(image_size.0, image_size.1);
    let c = (side as f64 - 1.0) / 2.0;
    let r2 = (side as f64 / 2.0).powi(2);
    for a in 0..side {
        for b in 0..side {
            let on = match patch.shape {
                PatchShape::Rectangle => true,
                PatchShape::Triangle => b <= a,
                PatchShape::Circle => (a as f64 - c).powi(2) + (b as f64 - c).powi(2) <= r2,
            };
            if on {
                mask.set(row + a, col + b, true);
            }
        }
    }
    Ok(mask)
}

/// Per-pixel noise amplitude in `[0, 1]` for a strategy.
fn amplitude_map(image: &ImageSample, strategy: Strategy, region: Option<&Mask>) -> Result<Vec<f64>> {
    let (h, w) = image.size();
    Ok(match strategy {
        Strategy::Global | Strategy::Blended => vec![1.0; h * w],
        Strategy::Local => {
            let m = region.ok_or_else(|| Error::InvalidConfig("local noise needs a patch region".into()))?;
            if m.size() != image.size() {
                return Err(Error::ShapeMismatch {
                    left: image.size(),
                    right: m.size(),
                });
            }
            (0..h * w).map(|i| f64::from(u8::from(m.covers_value(3 * i)))).collect()
        }
        Strategy::SpatiallyVariant => (0..h * w).map(|i| (i % w) as f64 / (w - 1) as f64).collect(),
        Strategy::ContentAware => sobel_magnitude(image),
        Strategy::Optimized => {
            return Err(Error::InvalidConfig(
                "optimized noise is produced by optimize_adversarial_patch".into(),
            ))
        }
    })
}

/// Sobel gradient magnitude of luminance, scaled so the maximum is 1.
/// Borders replicate the edge pixel.
pub fn sobel_magnitude(image: &ImageSample) -> Vec<f64> {
    let (h, w) = image.size();
    let lum: Vec<f64> = (0..h * w)
        .map(|i| {
            let p = &image.pixels()[3 * i..3 * i + 3];
            0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]
        })
        .collect();
    let at = |r: isize, c: isize| {
        let r = r.clamp(0, h as isize - 1) as usize;
        let c = c.clamp(0, w as isize - 1) as usize;
        lum[r * w + c]
    };
    let mut mag = vec![0.0; h * w];
    for r in 0..h as isize {
        for c in 0..w as isize {
            let gx = (at(r - 1, c + 1) + 2.0 * at(r, c + 1) + at(r + 1, c + 1))
                - (at(r - 1, c - 1) + 2.0 * at(r, c - 1) + at(r + 1, c - 1));
            let gy = (at(r + 1, c - 1) + 2.0 * at(r + 1, c) + at(r + 1, c + 1))
                - (at(r - 1, c - 1) + 2.0 * at(r - 1, c) + at(r - 1, c + 1));
            mag[r as usize * w + c as usize] = (gx * gx + gy * gy).sqrt();
        }
    }
    let max = mag.iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        mag.iter_mut().for_each(|v| *v /= max);
    }
    mag
}

fn perturb(noise: NoiseType, x: f64, amp: f64, intensity: f64, rng: &mut impl Rng) -> f64 {
    // every branch draws the same number of variates whatever `amp` is, so the
    // stream stays aligned across strategies
    match noise {
        NoiseType::Gaussian => {
            let z: f64 = rng.sample(StandardNormal);
            x + intensity * amp * z
        }
        NoiseType::Poisson => {
            let level = 255.0 / intensity;
            let lambda = x * level;
            let count = if lambda > 0.0 && lambda.is_finite() {
                Poisson::new(lambda).expect("positive rate").sample(rng)
            } else {
                let _: f64 = rng.random();
                lambda
            };
            if intensity == 0.0 {
                x
            } else {
                x + amp * (count / level - x)
            }
        }
        NoiseType::SaltPepper => {
            let flip = rng.random::<f64>() < intensity * amp;
            let salt = rng.random::<bool>();
            if flip {
                f64::from(u8::from(salt))
            } else {
                x
            }
        }
        NoiseType::Multiplicative => {
            let u: f64 = rng.random_range(-1.0..=1.0);
            x * (1.0 + amp * intensity * u)
        }
        NoiseType::Adversarial => unreachable!("rejected by apply_noise"),
    }
}

/// Applies a non-adversarial noise spec. `region` is the patch mask and is
/// required by the local strategy only. Output is clipped to `[0, 1]` and
/// keeps the input's id. The random stream depends on `spec.seed` and the
/// image id.
pub fn apply_noise(image: &ImageSample, spec: &NoiseSpec, region: Option<&Mask>) -> Result<ImageSample> {
    spec.validate()?;
    if spec.noise_type == NoiseType::Adversarial {
        return Err(Error::InvalidConfig(
            "adversarial noise is produced by optimize_adversarial_patch, not apply_noise".into(),
        ));
    }
    let amp = amplitude_map(image, spec.strategy, region)?;
    let mut rng = rng::stream(spec.seed, &format!("noise/{}", image.id()), 0);
    let (h, w) = image.size();
    let blended = spec.strategy == Strategy::Blended;
    let strength = if blended { 1.0 } else { spec.intensity };
    let pixels = image
        .pixels()
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let noisy = perturb(spec.noise_type, x, amp[i / 3], strength, &mut rng).clamp(0.0, 1.0);
            if blended {
                spec.intensity * noisy + (1.0 - spec.intensity) * x
            } else {
                noisy
            }
        })
        .collect();
    ImageSample::clipped(h, w, pixels, image.id())
}

/// Minimum deviation a trigger must reach, either relative to the clean
/// pair's distance or as an absolute cosine distance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeviationTarget {
    AboveClean(f64),
    Absolute(f64),
}

impl DeviationTarget {
    pub fn resolve(&self, clean_distance: f64) -> f64 {
        match *self {
            DeviationTarget::AboveClean(margin) => clean_distance + margin,
            DeviationTarget::Absolute(delta) => delta,
        }
    }
}

/// Visual and semantic budgets for a trigger, plus optimizer settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdversarialBudget {
    /// ℓ2 bound on `x̃ − x` over all values on the `[0, 1]` scale.
    pub epsilon1: f64,
    pub deviation: DeviationTarget,
    pub max_steps: usize,
    pub step_size: f64,
}

impl Default for AdversarialBudget {
    fn default() -> Self {
        Self {
            epsilon1: 2.0,
            deviation: DeviationTarget::AboveClean(0.15),
            max_steps: 300,
            step_size: 0.02,
        }
    }
}

impl AdversarialBudget {
    /// Zero `epsilon1` and zero `max_steps` are accepted: both produce the
    /// identity trigger, which is then rejected.
    pub fn validate(&self) -> Result<()> {
        if !self.epsilon1.is_finite() || self.epsilon1 < 0.0 {
            return Err(Error::InvalidConfig(format!("epsilon1 {} must be >= 0", self.epsilon1)));
        }
        if !(self.step_size > 0.0) || !self.step_size.is_finite() {
            return Err(Error::InvalidConfig(format!("step_size {} must be > 0", self.step_size)));
        }
        match self.deviation {
            DeviationTarget::AboveClean(m) if !(m > 0.0 && m < 2.0) => Err(Error::InvalidConfig(format!(
                "deviation margin {m} must be in (0, 2)"
            ))),
            DeviationTarget::Absolute(d) if !(d > 0.0 && d < 2.0) => {
                Err(Error::InvalidConfig(format!("delta {d} must be in (0, 2)")))
            }
            _ => Ok(()),
        }
    }
}

/// Result of [`optimize_adversarial_patch`].
#[derive(Debug, Clone, PartialEq)]
pub struct PatchOutcome {
    /// Patch content under the mask, zero elsewhere.
    pub patch: ImageSample,
    pub adversarial: ImageSample,
    pub clean_deviation: f64,
    pub delta: f64,
    pub achieved_deviation: f64,
    pub achieved_l2: f64,
    pub accepted: bool,
    /// Deviation after every accepted optimizer step, starting with the
    /// clean value. Non-decreasing.
    pub trace: Vec<f64>,
}

fn check_mask(image: &ImageSample, mask: &Mask) -> Result<()> {
    if mask.size() != image.size() {
        return Err(Error::ShapeMismatch {
            left: image.size(),
            right: mask.size(),
        });
    }
    if mask.count() == 0 {
        return Err(Error::PatchOutOfBounds("mask is empty".into()));
    }
    Ok(())
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn distance_to(model: &(impl DualEncoder + ?Sized), image: &ImageSample, text: &Embedding) -> Result<f64> {
    cosine_distance(&model.encode_image(image)?, text)
}

fn masked_patch(x: &ImageSample, mask: &Mask, source: &ImageSample, suffix: &str) -> Result<ImageSample> {
    let pixels = source
        .pixels()
        .iter()
        .enumerate()
        .map(|(i, &v)| if mask.covers_value(i) { v } else { 0.0 })
        .collect();
    ImageSample::new(x.height(), x.width(), pixels, format!("{}{suffix}", x.id()))
}

/// Moves `x + delta` onto the 8-bit grid without leaving the segment between
/// `x` and `x + delta`, so the ℓ2 budget still holds. Only applies when `x`
/// is itself on the grid.
fn quantize_toward(x: &[f64], delta: &[f64], epsilon1: f64) -> Vec<f64> {
    if x.iter().any(|&v| quantize(v) != v) {
        return delta.to_vec();
    }
    let mut levels: Vec<i64> = x
        .iter()
        .zip(delta)
        .map(|(&xi, &di)| {
            let t = (xi + di) * 255.0;
            let k = if di >= 0.0 { (t + 1e-9).floor() } else { (t - 1e-9).ceil() };
            k as i64 - (xi * 255.0).round() as i64
        })
        .collect();
    let to_delta = |levels: &[i64]| -> Vec<f64> {
        x.iter()
            .zip(levels)
            .map(|(&xi, &k)| ((xi * 255.0).round() as i64 + k) as f64 / 255.0 - xi)
            .collect()
    };
    let mut out = to_delta(&levels);
    while l2(&out) > epsilon1 {
        // rounding can only ever push this over by a hair; shave the largest
        // coordinate one level at a time
        let (i, _) = levels.iter().enumerate().max_by_key(|(_, k)| k.abs()).expect("non-empty");
        levels[i] -= levels[i].signum();
        out = to_delta(&levels);
    }
    out
}

/// Projected normalized-gradient ascent on `d(E_t(y), E_v(x̃))` over the
/// masked pixels, within `‖x̃ − x‖₂ ≤ ε₁` and `[0, 1]`.
///
/// A step is kept only if it raises the deviation; otherwise the step size
/// halves. The final image is rounded toward `x` onto the 8-bit grid and
/// re-measured.
pub fn optimize_adversarial_patch<M: DualEncoder + ?Sized>(
    model: &M,
    x: &ImageSample,
    y: &TextSample,
    mask: &Mask,
    budget: &AdversarialBudget,
) -> Result<PatchOutcome> {
    budget.validate()?;
    check_mask(x, mask)?;
    let text = model.encode_text(y)?;
    let dir = text.values();
    let clean = distance_to(model, x, &text)?;
    let (h, w) = x.size();
    let base = x.pixels();
    let at = |delta: &[f64]| -> Result<ImageSample> {
        let pixels = base.iter().zip(delta).map(|(a, d)| a + d).collect();
        ImageSample::clipped(h, w, pixels, x.id())
    };

    let mut delta = vec![0.0; base.len()];
    let mut best = clean;
    let mut trace = vec![clean];
    let mut step = budget.step_size;
    let min_step = budget.step_size * 1e-3;
    let steps = if budget.epsilon1 > 0.0 { budget.max_steps } else { 0 };
    for _ in 0..steps {
        let current = at(&delta)?;
        let mut g = image_gradient_or_fd(model, &current, dir, Some(mask))?;
        for (i, gi) in g.iter_mut().enumerate() {
            if !mask.covers_value(i) {
                *gi = 0.0;
            }
        }
        let gn = l2(&g);
        if gn == 0.0 || !gn.is_finite() {
            break;
        }
        // distance is 1 − ⟨t, u⟩, so ascend along −g
        let mut cand: Vec<f64> = delta
            .iter()
            .zip(&g)
            .zip(base)
            .map(|((d, gi), xi)| (xi + d - step * gi / gn).clamp(0.0, 1.0) - xi)
            .collect();
        let n = l2(&cand);
        if n > budget.epsilon1 {
            let s = budget.epsilon1 / n;
            cand.iter_mut().for_each(|v| *v *= s);
        }
        debug_assert!(l2(&cand) <= budget.epsilon1 * (1.0 + 1e-12));
        let d = distance_to(model, &at(&cand)?, &text)?;
        if d > best {
            delta = cand;
            best = d;
            trace.push(d);
            step = (step * 2.0).min(budget.step_size);
        } else {
            step *= 0.5;
            if step < min_step {
                break;
            }
        }
    }

    let on_grid = base.iter().all(|&v| quantize(v) == v);
    let delta = quantize_toward(base, &delta, budget.epsilon1);
    let adv_pixels: Vec<f64> = base
        .iter()
        .zip(&delta)
        .enumerate()
        .map(|(i, (&xi, &d))| match (mask.covers_value(i), on_grid) {
            (false, _) => xi,
            (true, true) => quantize(xi + d),
            (true, false) => (xi + d).clamp(0.0, 1.0),
        })
        .collect();
    let adversarial = ImageSample::new(h, w, adv_pixels, format!("{}+adv", x.id()))?;
    let achieved_l2 = x.l2_distance(&adversarial)?;
    let achieved = distance_to(model, &adversarial, &text)?;
    let delta_target = budget.deviation.resolve(clean);
    Ok(PatchOutcome {
        patch: masked_patch(x, mask, &adversarial, "+patch")?,
        adversarial,
        clean_deviation: clean,
        delta: delta_target,
        achieved_deviation: achieved,
        achieved_l2,
        accepted: budget.epsilon1 > 0.0 && achieved_l2 <= budget.epsilon1 && achieved >= delta_target,
        trace,
    })
}

/// One trigger: a basic pair, its perturbed image, and how it was made.
#[derive(Debug, Clone, PartialEq)]
pub struct TriggerRecord {
    pub basic_image: ImageSample,
    pub text: TextSample,
    pub adversarial_image: ImageSample,
    /// Patch content under `mask`, zero elsewhere.
    pub patch: ImageSample,
    pub mask: Mask,
    pub noise: NoiseSpec,
    pub patch_spec: PatchSpec,
    pub budget: AdversarialBudget,
    pub delta: f64,
    pub clean_deviation: f64,
    pub achieved_l2: f64,
    pub achieved_deviation: f64,
    pub accepted: bool,
    pub model_id: String,
}

impl TriggerRecord {
    pub fn pair_id(&self) -> &str {
        self.basic_image.id()
    }

    /// Largest per-value gap between `x̃` and `(1 − m) ⊙ x + m ⊙ p`.
    pub fn blend_error(&self) -> Result<f64> {
        self.basic_image.check_same_shape(&self.adversarial_image)?;
        self.basic_image.check_same_shape(&self.patch)?;
        if self.mask.size() != self.basic_image.size() {
            return Err(Error::ShapeMismatch {
                left: self.basic_image.size(),
                right: self.mask.size(),
            });
        }
        let x = self.basic_image.pixels();
        let p = self.patch.pixels();
        Ok(self
            .adversarial_image
            .pixels()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let m = f64::from(u8::from(self.mask.covers_value(i)));
                (v - ((1.0 - m) * x[i] + m * p[i])).abs()
            })
            .fold(0.0, f64::max))
    }

    /// True when every value outside the mask is bit-identical to `x`.
    pub fn outside_mask_unchanged(&self) -> bool {
        let x = self.basic_image.pixels();
        self.adversarial_image
            .pixels()
            .iter()
            .enumerate()
            .all(|(i, v)| self.mask.covers_value(i) || v.to_bits() == x[i].to_bits())
    }
}

/// Builds a trigger for one pair under any noise spec, accepted or not.
pub fn make_record<M: DualEncoder + ?Sized>(
    model: &M,
    pair: &Pair,
    noise: &NoiseSpec,
    patch_spec: &PatchSpec,
    budget: &AdversarialBudget,
) -> Result<TriggerRecord> {
    noise.validate()?;
    budget.validate()?;
    let x = &pair.image;
    let patch_mask = make_mask(x.size(), patch_spec)?;
    let record = |mask: Mask, o: PatchOutcome| TriggerRecord {
        basic_image: x.clone(),
        text: pair.text.clone(),
        adversarial_image: o.adversarial,
        patch: o.patch,
        mask,
        noise: *noise,
        patch_spec: *patch_spec,
        budget: *budget,
        delta: o.delta,
        clean_deviation: o.clean_deviation,
        achieved_l2: o.achieved_l2,
        achieved_deviation: o.achieved_deviation,
        accepted: o.accepted,
        model_id: model.model_id().to_string(),
    };
    if noise.noise_type == NoiseType::Adversarial {
        let o = optimize_adversarial_patch(model, x, &pair.text, &patch_mask, budget)?;
        return Ok(record(patch_mask, o));
    }
    let noisy = apply_noise(x, noise, Some(&patch_mask))?;
    let mask = if noise.strategy == Strategy::Local {
        patch_mask
    } else {
        Mask::full(x.height(), x.width())
    };
    let (h, w) = x.size();
    let pixels = noisy
        .pixels()
        .iter()
        .enumerate()
        .map(|(i, &v)| if mask.covers_value(i) { quantize(v) } else { x.pixels()[i] })
        .collect();
    let adversarial = ImageSample::new(h, w, pixels, format!("{}+adv", x.id()))?;
    Ok(record(mask.clone(), finish_outcome(model, x, &pair.text, &mask, adversarial, budget)?))
}

/// Wraps an externally built trigger image (already a masked blend of `x`)
/// as an outcome, measuring its budgets against `model`.
pub(crate) fn finish_outcome<M: DualEncoder + ?Sized>(
    model: &M,
    x: &ImageSample,
    y: &TextSample,
    mask: &Mask,
    adversarial: ImageSample,
    budget: &AdversarialBudget,
) -> Result<PatchOutcome> {
    let text = model.encode_text(y)?;
    let clean = distance_to(model, x, &text)?;
    let achieved = distance_to(model, &adversarial, &text)?;
    let achieved_l2 = x.l2_distance(&adversarial)?;
    let delta = budget.deviation.resolve(clean);
    Ok(PatchOutcome {
        patch: masked_patch(x, mask, &adversarial, "+patch")?,
        adversarial,
        clean_deviation: clean,
        delta,
        achieved_deviation: achieved,
        achieved_l2,
        accepted: achieved_l2 <= budget.epsilon1 && achieved >= delta,
        trace: vec![clean, achieved],
    })
}

/// A basic pair that did not make it into the trigger set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rejection {
    pub pair_id: String,
    pub reason: String,
    pub achieved_deviation: f64,
    pub delta: f64,
    pub achieved_l2: f64,
}

/// The accepted triggers for one model, with the settings that made them.
#[derive(Debug, Clone, PartialEq)]
pub struct TriggerSet {
    pub model_id: String,
    pub source_dataset: String,
    pub sampling_seed: u64,
    pub noise: NoiseSpec,
    pub patch: PatchSpec,
    pub budget: AdversarialBudget,
    pub records: Vec<TriggerRecord>,
    pub rejected: Vec<Rejection>,
}

impl TriggerSet {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// The first `k` records, as a smaller set with the same settings.
    pub fn prefix(&self, k: usize) -> TriggerSet {
        TriggerSet {
            records: self.records.iter().take(k).cloned().collect(),
            ..self.clone()
        }
    }
}

fn rejection_reason(rec: &TriggerRecord) -> String {
    if rec.achieved_l2 > rec.budget.epsilon1 {
        format!("l2 {:.4} exceeds epsilon1 {:.4}", rec.achieved_l2, rec.budget.epsilon1)
    } else if rec.budget.epsilon1 == 0.0 {
        "zero epsilon1 budget".to_string()
    } else {
        format!(
            "deviation {:.4} below delta {:.4}",
            rec.achieved_deviation, rec.delta
        )
    }
}

/// Turns every basic pair into a trigger and keeps the accepted ones.
pub fn generate_trigger_set<M: DualEncoder + ?Sized>(
    model: &M,
    basics: &BasicTriggerSet,
    noise: &NoiseSpec,
    patch: &PatchSpec,
    budget: &AdversarialBudget,
) -> Result<TriggerSet> {
    if basics.pairs.is_empty() {
        return Err(Error::Empty("basic trigger set"));
    }
    let mut records = Vec::new();
    let mut rejected = Vec::new();
    for pair in &basics.pairs {
        let rec = make_record(model, pair, noise, patch, budget)?;
        if rec.accepted {
            records.push(rec);
        } else {
            rejected.push(Rejection {
                pair_id: rec.pair_id().to_string(),
                reason: rejection_reason(&rec),
                achieved_deviation: rec.achieved_deviation,
                delta: rec.delta,
                achieved_l2: rec.achieved_l2,
            });
        }
    }
    if records.is_empty() {
        return Err(Error::NoAcceptedTriggers {
            rejected: rejected.len(),
        });
    }
    Ok(TriggerSet {
        model_id: model.model_id().to_string(),
        source_dataset: basics.source_dataset.clone(),
        sampling_seed: basics.sampling_seed,
        noise: *noise,
        patch: *patch,
        budget: *budget,
        records,
        rejected,
    })
}

/// Re-checks a record against `model`: blend identity, outside-mask
/// immutability, the ℓ2 budget, and the deviation target, all recomputed.
pub fn validate_trigger<M: DualEncoder + ?Sized>(model: &M, rec: &TriggerRecord) -> Result<bool> {
    if rec.model_id != model.model_id() {
        return Err(Error::ModelMismatch {
            expected: rec.model_id.clone(),
            actual: model.model_id().to_string(),
        });
    }
    if rec.blend_error()? > BLEND_TOL || !rec.outside_mask_unchanged() {
        return Ok(false);
    }
    if rec.basic_image.l2_distance(&rec.adversarial_image)? > rec.budget.epsilon1 {
        return Ok(false);
    }
    let text = model.encode_text(&rec.text)?;
    let clean = distance_to(model, &rec.basic_image, &text)?;
    let delta = rec.budget.deviation.resolve(clean);
    Ok(distance_to(model, &rec.adversarial_image, &text)? >= delta)
}

#[derive(Debug, Serialize, Deserialize)]
struct RecordEntry {
    pair_id: String,
    text: TextSample,
    basic_image: String,
    adversarial_image: String,
    patch: String,
    mask: Vec<String>,
    noise: NoiseSpec,
    patch_spec: PatchSpec,
    budget: AdversarialBudget,
    delta: f64,
    clean_deviation: f64,
    achieved_l2: f64,
    achieved_deviation: f64,
    accepted: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    model_id: String,
    source_dataset: String,
    sampling_seed: u64,
    noise: NoiseSpec,
    patch: PatchSpec,
    budget: AdversarialBudget,
    records: Vec<RecordEntry>,
    rejected: Vec<Rejection>,
}

pub const TRIGGER_FORMAT: &str = "dualmark-trigger-set/1";
pub const TRIGGER_MANIFEST: &str = "manifest.json";

fn ppm_name(id: &str, kind: &str) -> String {
    format!("images/{}.{kind}.ppm", id.replace(['/', '\\'], "_"))
}

/// Writes `manifest.json` and the x, x̃ and patch images for each record.
pub fn save_trigger_set(set: &TriggerSet, dir: &Path) -> Result<()> {
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::write(&images, e))?;
    let mut records = Vec::with_capacity(set.records.len());
    for rec in &set.records {
        let id = rec.pair_id();
        let (basic, adv, patch) = (ppm_name(id, "x"), ppm_name(id, "adv"), ppm_name(id, "patch"));
        rec.basic_image.write_ppm(&dir.join(&basic))?;
        rec.adversarial_image.write_ppm(&dir.join(&adv))?;
        rec.patch.write_ppm(&dir.join(&patch))?;
        records.push(RecordEntry {
            pair_id: id.to_string(),
            text: rec.text.clone(),
            basic_image: basic,
            adversarial_image: adv,
            patch,
            mask: rec.mask.to_rows(),
            noise: rec.noise,
            patch_spec: rec.patch_spec,
            budget: rec.budget,
            delta: rec.delta,
            clean_deviation: rec.clean_deviation,
            achieved_l2: rec.achieved_l2,
            achieved_deviation: rec.achieved_deviation,
            accepted: rec.accepted,
        });
    }
    let manifest = Manifest {
        format: TRIGGER_FORMAT.into(),
        model_id: set.model_id.clone(),
        source_dataset: set.source_dataset.clone(),
        sampling_seed: set.sampling_seed,
        noise: set.noise,
        patch: set.patch,
        budget: set.budget,
        records,
        rejected: set.rejected.clone(),
    };
    let path = dir.join(TRIGGER_MANIFEST);
    crate::error::write_file(&path, serde_json::to_string_pretty(&manifest)? + "\n")
}

pub fn load_trigger_set(dir: &Path) -> Result<TriggerSet> {
    let path = dir.join(TRIGGER_MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
    if m.format != TRIGGER_FORMAT {
        return Err(Error::format(&path, format!("unsupported format `{}`", m.format)));
    }
    let mut records = Vec::with_capacity(m.records.len());
    for e in m.records {
        let basic_image = ImageSample::read_ppm(&dir.join(&e.basic_image), e.pair_id.clone())?;
        let adversarial_image = ImageSample::read_ppm(&dir.join(&e.adversarial_image), format!("{}+adv", e.pair_id))?;
        let patch = ImageSample::read_ppm(&dir.join(&e.patch), format!("{}+patch", e.pair_id))?;
        let mask = Mask::from_rows(&e.mask).map_err(|err| Error::format(&path, err.to_string()))?;
        records.push(TriggerRecord {
            basic_image,
            text: e.text,
            adversarial_image,
            patch,
            mask,
            noise: e.noise,
            patch_spec: e.patch_spec,
            budget: e.budget,
            delta: e.delta,
            clean_deviation: e.clean_deviation,
            achieved_l2: e.achieved_l2,
            achieved_deviation: e.achieved_deviation,
            accepted: e.accepted,
            model_id: m.model_id.clone(),
        });
    }
    Ok(TriggerSet {
        model_id: m.model_id,
        source_dataset: m.source_dataset,
        sampling_seed: m.sampling_seed,
        noise: m.noise,
        patch: m.patch,
        budget: m.budget,
        records,
        rejected: m.rejected,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic_corpus, sample_basic_triggers, SyntheticCorpusSpec, Vocabulary};
    use crate::encoder::{ToyDualEncoder, ToyEncoderConfig};
    use proptest::prelude::*;
    use super::Strategy;

    fn gray(h: usize, w: usize) -> ImageSample {
        ImageSample::filled(h, w, quantize(0.5), "g").unwrap()
    }

    fn noise(t: NoiseType, s: Strategy, i: f64) -> NoiseSpec {
        NoiseSpec {
            noise_type: t,
            strategy: s,
            intensity: i,
            seed: 3,
        }
    }

    fn fixed(shape: PatchShape, row: usize, col: usize, frac: f64) -> PatchSpec {
        PatchSpec {
            shape,
            position: PatchPosition::Fixed { row, col },
            size_fraction: frac,
        }
    }

    fn untrained() -> ToyDualEncoder {
        ToyDualEncoder::init(&ToyEncoderConfig::default(), (32, 32), Vocabulary::standard()).unwrap()
    }

    fn tiny_corpus() -> crate::corpus::Corpus {
        generate_synthetic_corpus(&SyntheticCorpusSpec {
            samples_per_class: 2,
            ..SyntheticCorpusSpec::default()
        })
        .unwrap()
    }

    #[test]
    fn rectangle_mask_top_left() {
        let m = make_mask((32, 32), &fixed(PatchShape::Rectangle, 0, 0, 0.25)).unwrap();
        assert_eq!(m.count(), 64);
        for r in 0..32 {
            for c in 0..32 {
                assert_eq!(m.get(r, c), r < 8 && c < 8);
            }
        }
    }

    #[test]
    fn degenerate_and_outside_patches_are_errors() {
        assert!(make_mask((32, 32), &fixed(PatchShape::Rectangle, 0, 0, 0.01)).is_err());
        assert!(make_mask((32, 32), &fixed(PatchShape::Rectangle, 30, 0, 0.25)).is_err());
        assert!(make_mask((32, 32), &fixed(PatchShape::Rectangle, 0, 0, 0.6)).is_err());
    }

    #[test]
    fn circle_area_is_close_to_pi_r_squared() {
        for frac in [0.25, 0.375, 0.5] {
            let spec = fixed(PatchShape::Circle, 0, 0, frac);
            let m = make_mask((32, 32), &spec).unwrap();
            let r = spec.side((32, 32)) as f64 / 2.0;
            let area = std::f64::consts::PI * r * r;
            assert!((m.count() as f64 - area).abs() <= 2.0 * std::f64::consts::PI * r, "{frac}");
        }
    }

    #[test]
    fn triangle_fills_half_the_square() {
        let m = make_mask((32, 32), &fixed(PatchShape::Triangle, 4, 4, 0.25)).unwrap();
        assert_eq!(m.count(), 8 * 9 / 2);
        assert!(m.get(11, 4) && !m.get(4, 11));
    }

    #[test]
    fn random_position_is_seeded_and_inside() {
        let spec = PatchSpec {
            position: PatchPosition::Random { seed: 5 },
            ..PatchSpec::default()
        };
        let a = make_mask((32, 32), &spec).unwrap();
        assert_eq!(a, make_mask((32, 32), &spec).unwrap());
        assert_eq!(a.count(), 64);
    }

    #[test]
    fn zero_intensity_is_identity() {
        let img = tiny_corpus().pairs[3].image.clone();
        for t in [NoiseType::Gaussian, NoiseType::Multiplicative, NoiseType::Poisson, NoiseType::SaltPepper] {
            for s in Strategy::RANDOM {
                let out = apply_noise(&img, &noise(t, s, 0.0), Some(&Mask::full(32, 32))).unwrap();
                assert_eq!(out, img, "{t:?}/{s:?}");
            }
        }
    }

    #[test]
    fn noise_is_deterministic() {
        let img = gray(32, 32);
        let spec = noise(NoiseType::Gaussian, Strategy::Global, 0.1);
        assert_eq!(apply_noise(&img, &spec, None).unwrap(), apply_noise(&img, &spec, None).unwrap());
        let other = NoiseSpec { seed: 4, ..spec };
        assert_ne!(apply_noise(&img, &spec, None).unwrap(), apply_noise(&img, &other, None).unwrap());
    }

    #[test]
    fn salt_pepper_rate_is_binomial() {
        let img = gray(32, 32);
        let p = 0.05;
        let out = apply_noise(&img, &noise(NoiseType::SaltPepper, Strategy::Global, p), None).unwrap();
        let n = img.pixels().len() as f64;
        let altered = img.pixels().iter().zip(out.pixels()).filter(|(a, b)| a != b).count() as f64;
        let bound = 3.0 * (p * (1.0 - p) / n).sqrt();
        assert!((altered / n - p).abs() <= bound, "{}", altered / n);
    }

    #[test]
    fn local_noise_stays_in_region() {
        let img = gray(32, 32);
        let mask = make_mask((32, 32), &PatchSpec::default()).unwrap();
        let out = apply_noise(&img, &noise(NoiseType::Gaussian, Strategy::Local, 0.2), Some(&mask)).unwrap();
        for i in 0..img.pixels().len() {
            if !mask.covers_value(i) {
                assert_eq!(out.pixels()[i], img.pixels()[i]);
            }
        }
        assert_ne!(out, img);
        assert!(apply_noise(&img, &noise(NoiseType::Gaussian, Strategy::Local, 0.2), None).is_err());
    }

    #[test]
    fn spatially_variant_leaves_the_left_column() {
        let img = gray(16, 16);
        let out = apply_noise(&img, &noise(NoiseType::Gaussian, Strategy::SpatiallyVariant, 0.2), None).unwrap();
        for r in 0..16 {
            for ch in 0..3 {
                assert_eq!(out.get(r, 0, ch), img.get(r, 0, ch));
            }
        }
        assert_ne!(out.get(3, 15, 0), img.get(3, 15, 0));
    }

    #[test]
    fn content_aware_leaves_flat_images_alone() {
        let img = gray(16, 16);
        let out = apply_noise(&img, &noise(NoiseType::Gaussian, Strategy::ContentAware, 0.3), None).unwrap();
        assert_eq!(out, img);
        let edgy = tiny_corpus().pairs[0].image.clone();
        let out = apply_noise(&edgy, &noise(NoiseType::Gaussian, Strategy::ContentAware, 0.3), None).unwrap();
        assert_ne!(out, edgy);
    }

    #[test]
    fn blended_interpolates() {
        let img = gray(16, 16);
        let full = apply_noise(&img, &noise(NoiseType::Gaussian, Strategy::Blended, 1.0), None).unwrap();
        let half = apply_noise(&img, &noise(NoiseType::Gaussian, Strategy::Blended, 0.5), None).unwrap();
        for i in 0..img.pixels().len() {
            let expect = 0.5 * full.pixels()[i] + 0.5 * img.pixels()[i];
            assert!((half.pixels()[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_noise_specs() {
        let img = gray(16, 16);
        assert!(apply_noise(&img, &NoiseSpec::adversarial(1), None).is_err());
        assert!(noise(NoiseType::Adversarial, Strategy::Global, 1.0).validate().is_err());
        assert!(noise(NoiseType::Gaussian, Strategy::Optimized, 1.0).validate().is_err());
        assert!(noise(NoiseType::SaltPepper, Strategy::Global, 1.5).validate().is_err());
        assert!(noise(NoiseType::Gaussian, Strategy::Global, -0.1).validate().is_err());
    }

    #[test]
    fn zero_steps_and_zero_budget_give_identity() {
        let corpus = tiny_corpus();
        let enc = untrained();
        let pair = &corpus.pairs[0];
        let mask = make_mask((32, 32), &PatchSpec::default()).unwrap();
        for budget in [
            AdversarialBudget {
                max_steps: 0,
                ..AdversarialBudget::default()
            },
            AdversarialBudget {
                epsilon1: 0.0,
                ..AdversarialBudget::default()
            },
        ] {
            let o = optimize_adversarial_patch(&enc, &pair.image, &pair.text, &mask, &budget).unwrap();
            assert_eq!(o.adversarial.pixels(), pair.image.pixels());
            assert_eq!(o.achieved_deviation, o.clean_deviation);
            assert!(!o.accepted);
            for i in 0..o.patch.pixels().len() {
                let expect = if mask.covers_value(i) { pair.image.pixels()[i] } else { 0.0 };
                assert_eq!(o.patch.pixels()[i], expect);
            }
        }
    }

    #[test]
    fn optimization_respects_budgets() {
        let corpus = tiny_corpus();
        let enc = untrained();
        let mask = make_mask((32, 32), &PatchSpec::default()).unwrap();
        let budget = AdversarialBudget {
            max_steps: 40,
            epsilon1: 0.5,
            ..AdversarialBudget::default()
        };
        for pair in corpus.pairs.iter().step_by(7) {
            let o = optimize_adversarial_patch(&enc, &pair.image, &pair.text, &mask, &budget).unwrap();
            assert!(o.achieved_l2 <= budget.epsilon1);
            assert!(o.trace.windows(2).all(|w| w[1] >= w[0]));
            assert!(o.trace.len() > 1, "no step improved the deviation");
            for i in 0..o.adversarial.pixels().len() {
                if !mask.covers_value(i) {
                    assert_eq!(o.adversarial.pixels()[i].to_bits(), pair.image.pixels()[i].to_bits());
                }
                let q = o.adversarial.pixels()[i];
                assert_eq!(quantize(q), q);
            }
        }
    }

    #[test]
    fn tampering_is_detected() {
        let corpus = tiny_corpus();
        let enc = untrained();
        let basics = sample_basic_triggers(&corpus, 2, 1).unwrap();
        let budget = AdversarialBudget {
            deviation: DeviationTarget::AboveClean(1e-3),
            max_steps: 30,
            ..AdversarialBudget::default()
        };
        let set = generate_trigger_set(&enc, &basics, &NoiseSpec::adversarial(1), &PatchSpec::default(), &budget).unwrap();
        let rec = &set.records[0];
        assert!(validate_trigger(&enc, rec).unwrap());

        let mut identity = rec.clone();
        identity.adversarial_image = rec.basic_image.clone();
        identity.patch = masked_patch(&rec.basic_image, &rec.mask, &rec.basic_image, "+patch").unwrap();
        assert!(!validate_trigger(&enc, &identity).unwrap());

        let mut tampered = rec.clone();
        tampered.mask = make_mask((32, 32), &fixed(PatchShape::Rectangle, 0, 0, 0.25)).unwrap();
        assert!(!validate_trigger(&enc, &tampered).unwrap());

        let other = ToyDualEncoder::init(
            &ToyEncoderConfig {
                seed: 99,
                ..ToyEncoderConfig::default()
            },
            (32, 32),
            Vocabulary::standard(),
        )
        .unwrap();
        assert!(matches!(validate_trigger(&other, rec), Err(Error::ModelMismatch { .. })));
    }

    #[test]
    fn zero_budget_rejects_everything() {
        let corpus = tiny_corpus();
        let basics = sample_basic_triggers(&corpus, 3, 1).unwrap();
        let budget = AdversarialBudget {
            epsilon1: 0.0,
            ..AdversarialBudget::default()
        };
        let err = generate_trigger_set(&untrained(), &basics, &NoiseSpec::adversarial(1), &PatchSpec::default(), &budget)
            .unwrap_err();
        assert!(matches!(err, Error::NoAcceptedTriggers { rejected: 3 }));
    }

    #[test]
    fn trigger_sets_persist_losslessly() {
        let corpus = tiny_corpus();
        let enc = untrained();
        let basics = sample_basic_triggers(&corpus, 3, 2).unwrap();
        let budget = AdversarialBudget {
            deviation: DeviationTarget::AboveClean(1e-3),
            max_steps: 20,
            ..AdversarialBudget::default()
        };
        let set = generate_trigger_set(&enc, &basics, &NoiseSpec::adversarial(1), &PatchSpec::default(), &budget).unwrap();
        let again = generate_trigger_set(&enc, &basics, &NoiseSpec::adversarial(1), &PatchSpec::default(), &budget).unwrap();
        assert_eq!(set, again);
        let dir = tempfile::tempdir().unwrap();
        save_trigger_set(&set, dir.path()).unwrap();
        let back = load_trigger_set(dir.path()).unwrap();
        assert_eq!(set, back);
        let first = fs::read(dir.path().join(TRIGGER_MANIFEST)).unwrap();
        save_trigger_set(&back, dir.path()).unwrap();
        assert_eq!(first, fs::read(dir.path().join(TRIGGER_MANIFEST)).unwrap());
    }

    #[test]
    fn noise_records_satisfy_the_blend_identity() {
        let corpus = tiny_corpus();
        let enc = untrained();
        let pair = &corpus.pairs[4];
        for t in NoiseType::RANDOM {
            for s in Strategy::RANDOM {
                let rec = make_record(&enc, pair, &noise(t, s, 0.2), &PatchSpec::default(), &AdversarialBudget::default())
                    .unwrap();
                assert!(rec.blend_error().unwrap() <= BLEND_TOL);
                assert!(rec.outside_mask_unchanged());
            }
        }
    }

    proptest! {
        #[test]
        fn quantization_stays_in_budget(
            levels in proptest::collection::vec(0u8..=255, 12),
            delta in proptest::collection::vec(-0.3f64..0.3, 12),
            eps in 0.01f64..1.0,
        ) {
            let x: Vec<f64> = levels.iter().map(|&l| l as f64 / 255.0).collect();
            let mut d: Vec<f64> = x.iter().zip(&delta).map(|(a, b)| (a + b).clamp(0.0, 1.0) - a).collect();
            let n = l2(&d);
            if n > eps {
                d.iter_mut().for_each(|v| *v *= eps / n);
            }
            let q = quantize_toward(&x, &d, eps);
            prop_assert!(l2(&q) <= eps);
            for i in 0..x.len() {
                let v = x[i] + q[i];
                prop_assert!((0.0..=1.0).contains(&v));
                prop_assert!((quantize(v) - v).abs() < 1e-12);
                prop_assert!(q[i].abs() <= d[i].abs() + 1e-12);
            }
        }
    }
}
