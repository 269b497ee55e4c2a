//! Stealth evaluation: how visible each kind of trigger is, and how far it
//! pushes the image away from its caption.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::Pair;
use crate::embedding::similarity_score;
use crate::encoder::DualEncoder;
use crate::error::{Error, Result};
use crate::metrics::{fidelity, FidelityReport};
use crate::trigger::{make_record, AdversarialBudget, NoiseSpec, NoiseType, PatchSpec, Strategy};

/// One (noise type, strategy) cell, averaged over the evaluated pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StealthRow {
    pub noise_type: NoiseType,
    pub strategy: Strategy,
    pub intensity: f64,
    pub pairs: usize,
    /// Share of triggers whose deviation reaches δ.
    pub accepted_rate: f64,
    pub rmse: f64,
    /// Mean over pairs; infinite when any trigger equals its basic image.
    /// Stored as the string `"inf"` in JSON.
    #[serde(with = "lossless_f64")]
    pub psnr: f64,
    pub ssim: f64,
    pub uqi: f64,
    /// Mean image-text cosine similarity of the triggers, 0–100 scale.
    pub similarity: f64,
    /// The same for the basic images.
    pub clean_similarity: f64,
}

mod lossless_f64 {
    use serde::{Deserialize, Deserializer, Serializer};

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_str(&v.to_string())
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) => t.parse().map_err(serde::de::Error::custom),
        }
    }
}

impl StealthRow {
    pub fn is_adversarial(&self) -> bool {
        self.noise_type == NoiseType::Adversarial
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StealthReport {
    pub model_id: String,
    pub rows: Vec<StealthRow>,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for x in v {
        s += x;
        n += 1;
    }
    s / n as f64
}

fn row<M: DualEncoder + ?Sized>(
    model: &M,
    pairs: &[Pair],
    noise: NoiseSpec,
    patch: &PatchSpec,
    budget: &AdversarialBudget,
) -> Result<StealthRow> {
    let mut fid: Vec<FidelityReport> = Vec::with_capacity(pairs.len());
    let mut sims = Vec::with_capacity(pairs.len());
    let mut clean = Vec::with_capacity(pairs.len());
    let mut accepted = 0usize;
    for p in pairs {
        let rec = make_record(model, p, &noise, patch, budget)?;
        fid.push(fidelity(&rec.basic_image, &rec.adversarial_image)?);
        let t = model.encode_text(&p.text)?;
        sims.push(similarity_score(&model.encode_image(&rec.adversarial_image)?, &t)?);
        clean.push(similarity_score(&model.encode_image(&p.image)?, &t)?);
        accepted += usize::from(rec.accepted);
    }
    Ok(StealthRow {
        noise_type: noise.noise_type,
        strategy: noise.strategy,
        intensity: noise.intensity,
        pairs: pairs.len(),
        accepted_rate: accepted as f64 / pairs.len() as f64,
        rmse: mean(fid.iter().map(|f| f.rmse)),
        psnr: mean(fid.iter().map(|f| f.psnr)),
        ssim: mean(fid.iter().map(|f| f.ssim)),
        uqi: mean(fid.iter().map(|f| f.uqi)),
        similarity: mean(sims.into_iter()),
        clean_similarity: mean(clean.into_iter()),
    })
}

/// Every random noise type under every random strategy at `intensity`,
/// then the optimized adversarial trigger. Local noise and the adversarial
/// patch use `patch`.
pub fn stealth_eval<M: DualEncoder + ?Sized>(
    model: &M,
    pairs: &[Pair],
    patch: &PatchSpec,
    budget: &AdversarialBudget,
    intensity: f64,
    seed: u64,
) -> Result<StealthReport> {
    if pairs.is_empty() {
        return Err(Error::Empty("stealth evaluation pairs"));
    }
    let mut rows = Vec::with_capacity(21);
    for noise_type in NoiseType::RANDOM {
        for strategy in Strategy::RANDOM {
            let spec = NoiseSpec {
                noise_type,
                strategy,
                intensity,
                seed,
            };
            rows.push(row(model, pairs, spec, patch, budget)?);
        }
    }
    rows.push(row(model, pairs, NoiseSpec::adversarial(seed), patch, budget)?);
    Ok(StealthReport {
        model_id: model.model_id().to_string(),
        rows,
    })
}

impl StealthReport {
    pub fn get(&self, noise_type: NoiseType, strategy: Strategy) -> Option<&StealthRow> {
        self.rows
            .iter()
            .find(|r| r.noise_type == noise_type && r.strategy == strategy)
    }

    pub fn adversarial(&self) -> Option<&StealthRow> {
        self.rows.iter().find(|r| r.is_adversarial())
    }

    /// Fixed-width text matrix, one line per row.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "model: {}", self.model_id);
        let _ = writeln!(
            s,
            "{:<15} {:<17} {:>9} {:>8} {:>8} {:>7} {:>7} {:>8} {:>8} {:>8}",
            "noise", "strategy", "intensity", "RMSE", "PSNR", "SSIM", "UQI", "D(cos)", "clean", "accepted"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<15} {:<17} {:>9.3} {:>8.3} {:>8.3} {:>7.4} {:>7.4} {:>8.2} {:>8.2} {:>8.3}",
                r.noise_type.name(),
                r.strategy.name(),
                r.intensity,
                r.rmse,
                r.psnr,
                r.ssim,
                r.uqi,
                r.similarity,
                r.clean_similarity,
                r.accepted_rate
            );
        }
        s
    }

    /// Comma-separated rows with a header line.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "noise_type",
            "strategy",
            "intensity",
            "pairs",
            "rmse",
            "psnr",
            "ssim",
            "uqi",
            "similarity",
            "clean_similarity",
            "accepted_rate",
        ])?;
        for r in &self.rows {
            w.write_record([
                r.noise_type.name().to_string(),
                r.strategy.name().to_string(),
                r.intensity.to_string(),
                r.pairs.to_string(),
                r.rmse.to_string(),
                r.psnr.to_string(),
                r.ssim.to_string(),
                r.uqi.to_string(),
                r.similarity.to_string(),
                r.clean_similarity.to_string(),
                r.accepted_rate.to_string(),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Csv(e.into_error().into()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic_corpus, SyntheticCorpusSpec, Vocabulary};
    use crate::encoder::{ToyDualEncoder, ToyEncoderConfig};

    fn report(intensity: f64) -> StealthReport {
        let corpus = generate_synthetic_corpus(&SyntheticCorpusSpec {
            samples_per_class: 1,
            ..SyntheticCorpusSpec::default()
        })
        .unwrap();
        let model = ToyDualEncoder::init(&ToyEncoderConfig::default(), (32, 32), Vocabulary::standard()).unwrap();
        let budget = AdversarialBudget {
            max_steps: 5,
            ..AdversarialBudget::default()
        };
        stealth_eval(&model, &corpus.pairs[..3], &PatchSpec::default(), &budget, intensity, 1).unwrap()
    }

    #[test]
    fn one_row_per_random_cell_plus_adversarial() {
        let r = report(0.1);
        assert_eq!(r.rows.len(), NoiseType::RANDOM.len() * Strategy::RANDOM.len() + 1);
        assert!(r.adversarial().is_some());
        assert!(r.rows.iter().all(|row| row.pairs == 3 && row.ssim <= 1.0));
        assert_eq!(r.to_csv().unwrap().lines().count(), r.rows.len() + 1);
    }

    #[test]
    fn zero_intensity_is_invisible_and_survives_json() {
        let r = report(0.0);
        let row = r.get(NoiseType::Gaussian, Strategy::Global).unwrap();
        assert_eq!(row.rmse, 0.0);
        assert_eq!(row.psnr, f64::INFINITY);
        let json = serde_json::to_string(&r).unwrap();
        assert!(json.contains("\"psnr\":\"inf\""));
        let back: StealthReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r);
    }
}
