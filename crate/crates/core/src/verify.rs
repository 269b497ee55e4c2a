//! Two-phase ownership verification.
//!
//! Phase I asks the suspicious model where a trigger image lands; Phase II
//! asks again after routing both sides through the owner's transform module.
//! A trigger counts for the owner only when the first answer is wrong and the
//! second one right.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::Pair;
use crate::embedding::{cosine_distance, euclidean_distance, similarity_score, Embedding};
use crate::encoder::{nearest, DualEncoder};
use crate::error::{Error, Result};
use crate::sample::{ImageSample, TextSample};
use crate::transform::{apply_transform, apply_transform_all, Modality, TransformModule};
use crate::trigger::TriggerRecord;

/// How `res` is decided in each phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResMode {
    /// Top-1 retrieval over the gallery returns the ground-truth caption.
    #[default]
    Behavioral,
    /// Cosine distance to the ground truth is below `sigma` (Phase I) or
    /// `tau` (Phase II).
    Distance,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerificationThresholds {
    pub sigma: f64,
    pub tau: f64,
    #[serde(default)]
    pub mode: ResMode,
}

impl VerificationThresholds {
    pub fn new(sigma: f64, tau: f64, mode: ResMode) -> Result<Self> {
        let th = Self { sigma, tau, mode };
        th.validate()?;
        Ok(th)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) || !(self.sigma > self.tau) || !self.sigma.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "thresholds need sigma > tau > 0, got sigma {} and tau {}",
                self.sigma, self.tau
            )));
        }
        Ok(())
    }
}

impl Default for VerificationThresholds {
    /// Placeholder values for behavioral mode, where they are only recorded.
    /// Run [`calibrate_thresholds`] before using distance mode.
    fn default() -> Self {
        Self {
            sigma: 0.5,
            tau: 0.25,
            mode: ResMode::Behavioral,
        }
    }
}

/// Outcome of one phase on one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseResult {
    /// True when the behavior matches the clean baseline.
    pub res: bool,
    /// Cosine distance to the ground-truth caption.
    pub distance: f64,
    /// Euclidean distance to the ground-truth caption.
    pub euclidean: f64,
    /// Cosine similarity on the 0–100 scale.
    pub similarity: f64,
    pub retrieved_id: String,
}

/// Strict rule: anomaly in Phase I, corrected in Phase II.
pub fn verify_trigger(res1: &PhaseResult, res2: &PhaseResult) -> bool {
    !res1.res && res2.res
}

/// Plain `Res#1 ≠ Res#2`. Reported next to the strict bit; it also accepts
/// a (True, False) pair.
pub fn xor_bit(res1: &PhaseResult, res2: &PhaseResult) -> bool {
    res1.res != res2.res
}

/// Infringement verdict: the share of 1-bits reaches `aggregate_threshold`.
pub fn decide(bits: &[bool], aggregate_threshold: f64) -> Result<bool> {
    check_aggregate(aggregate_threshold)?;
    if bits.is_empty() {
        return Err(Error::Empty("verification bits"));
    }
    Ok(fraction(bits.iter().copied()) >= aggregate_threshold)
}

fn check_aggregate(t: f64) -> Result<()> {
    if !(t > 0.0 && t <= 1.0) {
        return Err(Error::InvalidConfig(format!("aggregate threshold {t} must be in (0, 1]")));
    }
    Ok(())
}

fn fraction(bits: impl Iterator<Item = bool>) -> f64 {
    let (mut n, mut ones) = (0usize, 0usize);
    for b in bits {
        n += 1;
        ones += usize::from(b);
    }
    if n == 0 {
        0.0
    } else {
        ones as f64 / n as f64
    }
}

/// A suspicious model, the owner's module, and a caption gallery, with the
/// gallery embedded once in both spaces.
pub struct Verifier<'a, S: DualEncoder + ?Sized> {
    suspect: &'a S,
    module: &'a TransformModule,
    gallery: Vec<TextSample>,
    plain: Vec<Embedding>,
    transformed: Vec<Embedding>,
    thresholds: VerificationThresholds,
}

impl<'a, S: DualEncoder + ?Sized> Verifier<'a, S> {
    /// When the suspect is not the module's source model, its embeddings are
    /// re-tagged into the source space before the module sees them; only the
    /// dimensions have to agree.
    pub fn new(
        suspect: &'a S,
        module: &'a TransformModule,
        gallery: &[TextSample],
        thresholds: VerificationThresholds,
    ) -> Result<Self> {
        thresholds.validate()?;
        if gallery.is_empty() {
            return Err(Error::EmptyGallery);
        }
        let plain = suspect.encode_texts(gallery)?;
        let retagged: Vec<Embedding> = plain
            .iter()
            .map(|e| e.clone().assume_space(module.source_model_id()))
            .collect();
        let transformed = apply_transform_all(module, &retagged, Modality::Text)?;
        Ok(Self {
            suspect,
            module,
            gallery: gallery.to_vec(),
            plain,
            transformed,
            thresholds,
        })
    }

    pub fn thresholds(&self) -> &VerificationThresholds {
        &self.thresholds
    }

    fn truth(&self, truth: &TextSample) -> Result<usize> {
        self.gallery
            .iter()
            .position(|t| t.id == truth.id)
            .ok_or_else(|| Error::MissingGroundTruth(truth.id.clone()))
    }

    fn judge(&self, query: &Embedding, bank: &[Embedding], truth: usize, bound: f64) -> Result<PhaseResult> {
        let i = nearest(query, bank)?;
        let distance = cosine_distance(query, &bank[truth])?;
        let retrieved_id = self.gallery[i].id.clone();
        let res = match self.thresholds.mode {
            ResMode::Behavioral => retrieved_id == self.gallery[truth].id,
            ResMode::Distance => distance < bound,
        };
        Ok(PhaseResult {
            res,
            distance,
            euclidean: euclidean_distance(query, &bank[truth])?,
            similarity: similarity_score(query, &bank[truth])?,
            retrieved_id,
        })
    }

    pub fn phase1(&self, image: &ImageSample, truth: &TextSample) -> Result<PhaseResult> {
        let t = self.truth(truth)?;
        let q = self.suspect.encode_image(image)?;
        self.judge(&q, &self.plain, t, self.thresholds.sigma)
    }

    pub fn phase2(&self, image: &ImageSample, truth: &TextSample) -> Result<PhaseResult> {
        let t = self.truth(truth)?;
        let q = self
            .suspect
            .encode_image(image)?
            .assume_space(self.module.source_model_id());
        let q = apply_transform(self.module, &q, Modality::Image)?;
        self.judge(&q, &self.transformed, t, self.thresholds.tau)
    }

    /// Both phases on one image.
    pub fn evaluate(&self, id: &str, image: &ImageSample, truth: &TextSample) -> Result<TriggerVerification> {
        let phase1 = self.phase1(image, truth)?;
        let phase2 = self.phase2(image, truth)?;
        Ok(TriggerVerification {
            id: id.to_string(),
            caption_id: truth.id.clone(),
            delta_cos: phase2.similarity - phase1.similarity,
            delta_euc: phase2.euclidean - phase1.euclidean,
            strict_bit: verify_trigger(&phase1, &phase2),
            xor_bit: xor_bit(&phase1, &phase2),
            phase1,
            phase2,
        })
    }

    /// Evaluates the trigger image of every record.
    pub fn verify_triggers(&self, records: &[TriggerRecord], aggregate_threshold: f64) -> Result<VerificationReport> {
        let rows = records
            .iter()
            .map(|r| self.evaluate(r.pair_id(), &r.adversarial_image, &r.text))
            .collect::<Result<Vec<_>>>()?;
        self.report(rows, aggregate_threshold)
    }

    /// Evaluates clean images; the benign-preservation baseline.
    pub fn verify_basics<'p>(
        &self,
        pairs: impl IntoIterator<Item = (&'p ImageSample, &'p TextSample)>,
        aggregate_threshold: f64,
    ) -> Result<VerificationReport> {
        let rows = pairs
            .into_iter()
            .map(|(x, y)| self.evaluate(x.id(), x, y))
            .collect::<Result<Vec<_>>>()?;
        self.report(rows, aggregate_threshold)
    }

    fn report(&self, rows: Vec<TriggerVerification>, aggregate_threshold: f64) -> Result<VerificationReport> {
        let bits: Vec<bool> = rows.iter().map(|r| r.strict_bit).collect();
        let verdict = decide(&bits, aggregate_threshold)?;
        Ok(VerificationReport {
            suspect_model_id: self.suspect.model_id().to_string(),
            module_id: self.module.module_id().to_string(),
            thresholds: self.thresholds,
            aggregate_threshold,
            aggregate: fraction(bits.into_iter()),
            xor_aggregate: fraction(rows.iter().map(|r| r.xor_bit)),
            verdict,
            rows,
        })
    }
}

/// Phase I for one trigger: the suspicious model's view of `x̃`.
pub fn phase1<S: DualEncoder + ?Sized>(
    suspect: &S,
    rec: &TriggerRecord,
    gallery: &[TextSample],
    th: &VerificationThresholds,
) -> Result<PhaseResult> {
    let q = suspect.encode_image(&rec.adversarial_image)?;
    if gallery.is_empty() {
        return Err(Error::EmptyGallery);
    }
    th.validate()?;
    let t = gallery
        .iter()
        .position(|t| t.id == rec.text.id)
        .ok_or_else(|| Error::MissingGroundTruth(rec.text.id.clone()))?;
    let bank = suspect.encode_texts(gallery)?;
    let i = nearest(&q, &bank)?;
    let distance = cosine_distance(&q, &bank[t])?;
    Ok(PhaseResult {
        res: match th.mode {
            ResMode::Behavioral => gallery[i].id == rec.text.id,
            ResMode::Distance => distance < th.sigma,
        },
        distance,
        euclidean: euclidean_distance(&q, &bank[t])?,
        similarity: similarity_score(&q, &bank[t])?,
        retrieved_id: gallery[i].id.clone(),
    })
}

/// Phase II for one trigger: the same question after the owner's module.
pub fn phase2<S: DualEncoder + ?Sized>(
    suspect: &S,
    module: &TransformModule,
    rec: &TriggerRecord,
    gallery: &[TextSample],
    th: &VerificationThresholds,
) -> Result<PhaseResult> {
    Verifier::new(suspect, module, gallery, *th)?.phase2(&rec.adversarial_image, &rec.text)
}

/// Both phases and the bits for one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriggerVerification {
    pub id: String,
    pub caption_id: String,
    pub phase1: PhaseResult,
    pub phase2: PhaseResult,
    /// Similarity change through the module, 0–100 scale.
    pub delta_cos: f64,
    pub delta_euc: f64,
    pub strict_bit: bool,
    pub xor_bit: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub suspect_model_id: String,
    pub module_id: String,
    pub thresholds: VerificationThresholds,
    pub aggregate_threshold: f64,
    /// Share of rows with strict bit 1.
    pub aggregate: f64,
    pub xor_aggregate: f64,
    pub verdict: bool,
    pub rows: Vec<TriggerVerification>,
}

/// Compact machine-readable record of a [`VerificationReport`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationSummary {
    pub suspect_model_id: String,
    pub module_id: String,
    pub mode: ResMode,
    pub sigma: f64,
    pub tau: f64,
    pub evaluated: usize,
    pub strict_ones: usize,
    pub xor_ones: usize,
    pub phase1_anomaly_rate: f64,
    pub phase2_correction_rate: f64,
    pub mean_delta_cos: f64,
    pub aggregate: f64,
    pub aggregate_threshold: f64,
    pub verdict: bool,
}

fn yes(b: bool) -> &'static str {
    if b {
        "True"
    } else {
        "False"
    }
}

impl VerificationReport {
    /// Share of rows where Phase I already disagrees with the baseline.
    pub fn anomaly_rate(&self) -> f64 {
        fraction(self.rows.iter().map(|r| !r.phase1.res))
    }

    /// Share of rows where Phase II matches the baseline.
    pub fn correction_rate(&self) -> f64 {
        fraction(self.rows.iter().map(|r| r.phase2.res))
    }

    pub fn mean_delta_cos(&self) -> f64 {
        if self.rows.is_empty() {
            return 0.0;
        }
        self.rows.iter().map(|r| r.delta_cos).sum::<f64>() / self.rows.len() as f64
    }

    pub fn summary(&self) -> VerificationSummary {
        VerificationSummary {
            suspect_model_id: self.suspect_model_id.clone(),
            module_id: self.module_id.clone(),
            mode: self.thresholds.mode,
            sigma: self.thresholds.sigma,
            tau: self.thresholds.tau,
            evaluated: self.rows.len(),
            strict_ones: self.rows.iter().filter(|r| r.strict_bit).count(),
            xor_ones: self.rows.iter().filter(|r| r.xor_bit).count(),
            phase1_anomaly_rate: self.anomaly_rate(),
            phase2_correction_rate: self.correction_rate(),
            mean_delta_cos: self.mean_delta_cos(),
            aggregate: self.aggregate,
            aggregate_threshold: self.aggregate_threshold,
            verdict: self.verdict,
        }
    }

    /// Fixed-width text table: per-row distances before and after the
    /// module, both results, the deltas, the strict bit and the XOR bit.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "suspect model : {}", self.suspect_model_id);
        let _ = writeln!(s, "module        : {}", self.module_id);
        let _ = writeln!(
            s,
            "mode          : {:?} (sigma {:.4}, tau {:.4})",
            self.thresholds.mode, self.thresholds.sigma, self.thresholds.tau
        );
        let _ = writeln!(
            s,
            "{:<10} {:<24} {:>8} {:>7} {:>6} {:>8} {:>7} {:>6} {:>8} {:>7} {:>4} {:>4}",
            "id", "caption", "D(cos)", "D(euc)", "Res#1", "D'(cos)", "D'(euc)", "Res#2", "dcos", "deuc", "Res.", "XOR"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<10} {:<24} {:>8.2} {:>7.3} {:>6} {:>8.2} {:>7.3} {:>6} {:>+8.2} {:>+7.3} {:>4} {:>4}",
                r.id,
                r.caption_id,
                r.phase1.similarity,
                r.phase1.euclidean,
                yes(r.phase1.res),
                r.phase2.similarity,
                r.phase2.euclidean,
                yes(r.phase2.res),
                r.delta_cos,
                r.delta_euc,
                u8::from(r.strict_bit),
                u8::from(r.xor_bit),
            );
        }
        let ones = self.rows.iter().filter(|r| r.strict_bit).count();
        let _ = writeln!(
            s,
            "aggregate     : {ones}/{} = {:.4} (threshold {:.4}; xor {:.4})",
            self.rows.len(),
            self.aggregate,
            self.aggregate_threshold,
            self.xor_aggregate
        );
        let _ = writeln!(s, "verdict       : {}", yes(self.verdict));
        s
    }
}

/// Linear-interpolation percentile, `p` in `[0, 100]`.
pub fn percentile(values: &[f64], p: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Empty("percentile input"));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = (p.clamp(0.0, 100.0) / 100.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Ok(v[lo] + (v[hi] - v[lo]) * (pos - lo as f64))
}

/// Minimum calibration inputs.
pub const MIN_CLEAN_PAIRS: usize = 10;
pub const MIN_TRIGGERS: usize = 4;

/// Derives σ and τ from the owner's own model and module.
///
/// σ sits halfway between the 95th percentile of clean-pair distances and
/// the 5th percentile of trigger distances; τ is the 95th percentile of
/// trigger distances after the module. Overlapping clean and trigger
/// distributions, or σ ≤ τ, are errors. The returned mode is behavioral.
pub fn calibrate_thresholds<O: DualEncoder + ?Sized>(
    owner: &O,
    module: &TransformModule,
    clean_pairs: &[Pair],
    triggers: &[TriggerRecord],
) -> Result<VerificationThresholds> {
    if clean_pairs.len() < MIN_CLEAN_PAIRS {
        return Err(Error::Calibration(format!(
            "need at least {MIN_CLEAN_PAIRS} clean pairs, got {}",
            clean_pairs.len()
        )));
    }
    if triggers.len() < MIN_TRIGGERS {
        return Err(Error::Calibration(format!(
            "need at least {MIN_TRIGGERS} triggers, got {}",
            triggers.len()
        )));
    }
    let distances = |images: Vec<&ImageSample>, texts: Vec<&TextSample>, through: bool| -> Result<Vec<f64>> {
        images
            .into_iter()
            .zip(texts)
            .map(|(x, y)| {
                let (mut u, mut v) = (owner.encode_image(x)?, owner.encode_text(y)?);
                if through {
                    u = apply_transform(module, &u, Modality::Image)?;
                    v = apply_transform(module, &v, Modality::Text)?;
                }
                cosine_distance(&u, &v)
            })
            .collect()
    };
    let clean = distances(
        clean_pairs.iter().map(|p| &p.image).collect(),
        clean_pairs.iter().map(|p| &p.text).collect(),
        false,
    )?;
    let trig_images: Vec<_> = triggers.iter().map(|r| &r.adversarial_image).collect();
    let trig_texts: Vec<_> = triggers.iter().map(|r| &r.text).collect();
    let trig = distances(trig_images.clone(), trig_texts.clone(), false)?;
    let corrected = distances(trig_images, trig_texts, true)?;

    let clean_hi = percentile(&clean, 95.0)?;
    let trig_lo = percentile(&trig, 5.0)?;
    if clean_hi >= trig_lo {
        return Err(Error::Calibration(format!(
            "clean and trigger distances overlap: clean p95 {clean_hi:.4} >= trigger p5 {trig_lo:.4}"
        )));
    }
    let sigma = 0.5 * (clean_hi + trig_lo);
    let tau = percentile(&corrected, 95.0)?;
    if !(sigma > tau) || !(tau > 0.0) {
        return Err(Error::Calibration(format!(
            "sigma {sigma:.4} does not exceed tau {tau:.4} (corrected trigger p95)"
        )));
    }
    Ok(VerificationThresholds {
        sigma,
        tau,
        mode: ResMode::Behavioral,
    })
}
