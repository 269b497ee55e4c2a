//! Forgery simulation.
//!
//! Scenario 1: the adversary holds the owner's model and knows the trigger
//! recipe except for one setting (dataset, noise type, patch shape or patch
//! position) and tries to fabricate triggers that pass verification.
//! Scenario 2: the adversary holds real triggers but pairs them with the
//! wrong model or the wrong transform module.

use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{distinct_captions, generate_synthetic_corpus, sample_basic_triggers, Pair, SyntheticCorpusSpec};
use crate::encoder::DualEncoder;
use crate::error::{Error, Result};
use crate::rng;
use crate::sample::{quantize, ImageSample, Mask, TextSample};
use crate::transform::TransformModule;
use crate::trigger::{
    finish_outcome, make_mask, make_record, AdversarialBudget, NoiseSpec, NoiseType, PatchPosition, PatchShape,
    PatchSpec, Strategy, TriggerRecord, TriggerSet,
};
use crate::verify::{TriggerVerification, VerificationThresholds, Verifier};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "target")]
pub enum ScenarioKind {
    /// The owner's own triggers, model and module.
    Benchmark,
    WrongDataset,
    WrongNoise(NoiseType),
    WrongShape(PatchShape),
    WrongPosition,
    /// Owner's triggers on another model, owner's module.
    CrossModel(String),
    /// Owner's triggers and model, another model's module.
    CrossModule(String),
}

impl ScenarioKind {
    pub fn label(&self) -> String {
        match self {
            ScenarioKind::Benchmark => "benchmark".into(),
            ScenarioKind::WrongDataset => "wrong_dataset".into(),
            ScenarioKind::WrongNoise(t) => format!("wrong_noise({})", t.name()),
            ScenarioKind::WrongShape(s) => format!("wrong_shape({})", shape_name(*s)),
            ScenarioKind::WrongPosition => "wrong_position".into(),
            ScenarioKind::CrossModel(id) => format!("cross_model({id})"),
            ScenarioKind::CrossModule(id) => format!("cross_module({id})"),
        }
    }

    /// True for the kinds that fabricate new trigger images.
    pub fn forges(&self) -> bool {
        matches!(
            self,
            ScenarioKind::WrongDataset
                | ScenarioKind::WrongNoise(_)
                | ScenarioKind::WrongShape(_)
                | ScenarioKind::WrongPosition
        )
    }
}

fn shape_name(s: PatchShape) -> &'static str {
    match s {
        PatchShape::Rectangle => "rectangle",
        PatchShape::Triangle => "triangle",
        PatchShape::Circle => "circle",
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackScenario {
    pub kind: ScenarioKind,
    /// Triggers forged (Scenario 1) or replayed (Benchmark, Scenario 2).
    pub trials: usize,
    pub seed: u64,
}

impl AttackScenario {
    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::InvalidConfig(format!("{}: trials must be >= 1", self.kind.label())));
        }
        Ok(())
    }
}

/// The owner's trigger recipe as the adversary would try to copy it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationSettings {
    pub corpus: SyntheticCorpusSpec,
    pub noise: NoiseSpec,
    pub patch: PatchSpec,
    pub budget: AdversarialBudget,
    /// Intensity used for wrong-noise forgeries.
    pub forged_noise_intensity: f64,
}

impl GenerationSettings {
    pub fn new(corpus: SyntheticCorpusSpec, noise: NoiseSpec, patch: PatchSpec, budget: AdversarialBudget) -> Self {
        Self {
            corpus,
            noise,
            patch,
            budget,
            forged_noise_intensity: 0.1,
        }
    }
}

/// Settings families a forged set can differ in.
pub const FAMILIES: [&str; 4] = ["dataset", "noise", "patch_shape", "patch_position"];

/// Which setting families differ between two trigger sets. Seeds are not a
/// family: the adversary never knows the owner's.
pub fn changed_families(a: &TriggerSet, b: &TriggerSet) -> Vec<&'static str> {
    let noise = |n: &NoiseSpec| (n.noise_type, n.strategy, n.intensity.to_bits());
    let origin = |s: &TriggerSet| {
        let size = s.records.first().map(|r| r.basic_image.size()).unwrap_or((32, 32));
        s.patch.origin(size).ok()
    };
    let mut out = Vec::new();
    if a.source_dataset != b.source_dataset {
        out.push(FAMILIES[0]);
    }
    if noise(&a.noise) != noise(&b.noise) {
        out.push(FAMILIES[1]);
    }
    if a.patch.shape != b.patch.shape || a.patch.size_fraction != b.patch.size_fraction {
        out.push(FAMILIES[2]);
    }
    if origin(a) != origin(b) {
        out.push(FAMILIES[3]);
    }
    out
}

/// Random patch content `z ~ U(0, 1)` under `mask`, scaled back into the ℓ2
/// budget and put on the 8-bit grid. No optimization: the adversary cannot
/// reproduce the owner's patch without the missing setting.
fn latent_trigger(x: &ImageSample, mask: &Mask, epsilon1: f64, seed: u64) -> Result<ImageSample> {
    let mut r = rng::stream(seed, &format!("attack/latent/{}", x.id()), 0);
    let base = x.pixels();
    let mut delta: Vec<f64> = base
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let z: f64 = r.random();
            if mask.covers_value(i) {
                z - v
            } else {
                0.0
            }
        })
        .collect();
    let norm = delta.iter().map(|d| d * d).sum::<f64>().sqrt();
    if norm > epsilon1 {
        // leave room for the rounding below
        let s = 0.98 * epsilon1 / norm;
        delta.iter_mut().for_each(|d| *d *= s);
    }
    let (h, w) = x.size();
    let mut pixels: Vec<f64> = base
        .iter()
        .zip(&delta)
        .enumerate()
        .map(|(i, (&v, &d))| if mask.covers_value(i) { quantize(v + d) } else { v })
        .collect();
    let mut img = ImageSample::new(h, w, pixels.clone(), format!("{}+adv", x.id()))?;
    while x.l2_distance(&img)? > epsilon1 {
        // quantization overshoot; pull the largest change back a level
        let (i, _) = pixels
            .iter()
            .zip(base)
            .enumerate()
            .max_by(|a, b| (a.1 .0 - a.1 .1).abs().total_cmp(&(b.1 .0 - b.1 .1).abs()))
            .expect("non-empty image");
        pixels[i] = quantize(pixels[i] - (pixels[i] - base[i]).signum() / 255.0);
        img = ImageSample::new(h, w, pixels.clone(), format!("{}+adv", x.id()))?;
    }
    Ok(img)
}

fn latent_record<M: DualEncoder + ?Sized>(
    owner: &M,
    pair: &Pair,
    noise: &NoiseSpec,
    patch: &PatchSpec,
    budget: &AdversarialBudget,
    seed: u64,
) -> Result<TriggerRecord> {
    let x = &pair.image;
    let mask = make_mask(x.size(), patch)?;
    let adversarial = latent_trigger(x, &mask, budget.epsilon1, seed)?;
    let o = finish_outcome(owner, x, &pair.text, &mask, adversarial, budget)?;
    Ok(TriggerRecord {
        basic_image: x.clone(),
        text: pair.text.clone(),
        adversarial_image: o.adversarial,
        patch: o.patch,
        mask,
        noise: *noise,
        patch_spec: *patch,
        budget: *budget,
        delta: o.delta,
        clean_deviation: o.clean_deviation,
        achieved_l2: o.achieved_l2,
        achieved_deviation: o.achieved_deviation,
        accepted: o.accepted,
        model_id: owner.model_id().to_string(),
    })
}

/// A random origin different from the benchmark's.
fn moved_position(benchmark: &PatchSpec, image_size: (usize, usize), seed: u64) -> Result<PatchSpec> {
    let home = benchmark.origin(image_size)?;
    for i in 0..64 {
        let cand = PatchSpec {
            position: PatchPosition::Random {
                seed: rng::derive_seed(seed, "attack/position", i),
            },
            ..*benchmark
        };
        if cand.origin(image_size)? != home {
            return Ok(cand);
        }
    }
    Err(Error::NotAForgery("no patch position differs from the benchmark".into()))
}

/// Fabricates `scenario.trials` triggers that follow the benchmark recipe
/// except in the dimension the scenario names. Basic pairs are drawn with
/// the scenario's seed. Every forged record is kept, accepted or not.
///
/// Wrong-dataset forgeries run the full optimizer on the disjoint-vocabulary
/// corpus. Wrong-shape and wrong-position forgeries use unoptimized latent
/// patches. Wrong-noise forgeries apply the named noise locally inside the
/// benchmark patch.
pub fn forge_triggers<M: DualEncoder + ?Sized>(
    scenario: &AttackScenario,
    benchmark: &GenerationSettings,
    owner: &M,
) -> Result<TriggerSet> {
    scenario.validate()?;
    let not = |why: String| Err(Error::NotAForgery(format!("{}: {why}", scenario.kind.label())));
    let seed = scenario.seed;
    let adversary_noise = NoiseSpec {
        seed,
        ..benchmark.noise
    };
    let mut corpus_spec = benchmark.corpus.clone();
    let mut noise = adversary_noise;
    let mut patch = benchmark.patch;
    let mut latent = false;
    match &scenario.kind {
        ScenarioKind::Benchmark | ScenarioKind::CrossModel(_) | ScenarioKind::CrossModule(_) => {
            return not("replays the owner's triggers instead of forging".into());
        }
        ScenarioKind::WrongDataset => {
            corpus_spec = SyntheticCorpusSpec::disjoint_vocabulary(rng::derive_seed(seed, "attack/corpus", 0));
            corpus_spec.image_size = benchmark.corpus.image_size;
        }
        ScenarioKind::WrongNoise(t) => {
            if *t == benchmark.noise.noise_type || *t == NoiseType::Adversarial {
                return not(format!("noise type {} is the benchmark's", t.name()));
            }
            noise = NoiseSpec {
                noise_type: *t,
                strategy: Strategy::Local,
                intensity: benchmark.forged_noise_intensity,
                seed,
            };
        }
        ScenarioKind::WrongShape(s) => {
            if *s == benchmark.patch.shape {
                return not(format!("shape {} is the benchmark's", shape_name(*s)));
            }
            patch.shape = *s;
            latent = true;
        }
        ScenarioKind::WrongPosition => {
            patch = moved_position(&benchmark.patch, benchmark.corpus.image_size, seed)?;
            latent = true;
        }
    }
    let corpus = generate_synthetic_corpus(&corpus_spec)?;
    let basics = sample_basic_triggers(&corpus, scenario.trials.min(corpus.len()), seed)?;
    let records = basics
        .pairs
        .iter()
        .map(|pair| {
            if latent {
                latent_record(owner, pair, &noise, &patch, &benchmark.budget, seed)
            } else {
                make_record(owner, pair, &noise, &patch, &benchmark.budget)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TriggerSet {
        model_id: owner.model_id().to_string(),
        source_dataset: corpus_spec.name.clone(),
        sampling_seed: seed,
        noise,
        patch,
        budget: benchmark.budget,
        records,
        rejected: Vec::new(),
    })
}

/// Everything a scenario run may need. Foreign models and modules are looked
/// up by id.
pub struct AttackContext<'a> {
    pub benchmark: GenerationSettings,
    pub owner: &'a dyn DualEncoder,
    pub module: &'a TransformModule,
    pub owner_triggers: &'a TriggerSet,
    /// The owner's captions. Forged captions are added per scenario.
    pub gallery: Vec<TextSample>,
    pub thresholds: VerificationThresholds,
    pub aggregate_threshold: f64,
    pub foreign_models: Vec<&'a dyn DualEncoder>,
    pub foreign_modules: Vec<&'a TransformModule>,
}

/// One scenario's per-trigger rows and rates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub scenario: AttackScenario,
    pub label: String,
    pub suspect_model_id: String,
    pub module_id: String,
    pub source_dataset: String,
    pub rows: Vec<TriggerVerification>,
    /// Share of trials whose single-trigger verdict is True, i.e. strict bit 1.
    pub success_rate: f64,
    /// Verdict over all rows with the context's aggregate threshold.
    pub set_verdict: bool,
}

impl ScenarioReport {
    pub fn is_benchmark(&self) -> bool {
        self.scenario.kind == ScenarioKind::Benchmark
    }

    /// Share of rows with strict bit 0.
    pub fn zero_rate(&self) -> f64 {
        1.0 - self.success_rate
    }
}

/// Runs one scenario against the owner's verification setup.
pub fn run_scenario(scenario: &AttackScenario, ctx: &AttackContext<'_>) -> Result<ScenarioReport> {
    scenario.validate()?;
    let replay = || -> Result<Vec<TriggerRecord>> {
        if ctx.owner_triggers.is_empty() {
            return Err(Error::Empty("owner trigger set"));
        }
        Ok(ctx.owner_triggers.records.iter().take(scenario.trials).cloned().collect())
    };
    let (suspect, module, records, gallery, dataset): (&dyn DualEncoder, &TransformModule, _, _, _) =
        match &scenario.kind {
            ScenarioKind::Benchmark => (
                ctx.owner,
                ctx.module,
                replay()?,
                ctx.gallery.clone(),
                ctx.owner_triggers.source_dataset.clone(),
            ),
            ScenarioKind::CrossModel(id) => {
                let m = ctx
                    .foreign_models
                    .iter()
                    .find(|m| m.model_id() == id)
                    .ok_or_else(|| Error::UnknownId(id.clone()))?;
                (*m, ctx.module, replay()?, ctx.gallery.clone(), ctx.owner_triggers.source_dataset.clone())
            }
            ScenarioKind::CrossModule(id) => {
                let m = ctx
                    .foreign_modules
                    .iter()
                    .find(|m| m.module_id() == id)
                    .ok_or_else(|| Error::UnknownId(id.clone()))?;
                (ctx.owner, *m, replay()?, ctx.gallery.clone(), ctx.owner_triggers.source_dataset.clone())
            }
            _ => {
                let forged = forge_triggers(scenario, &ctx.benchmark, ctx.owner)?;
                let gallery = distinct_captions(ctx.gallery.iter().chain(forged.records.iter().map(|r| &r.text)));
                (ctx.owner, ctx.module, forged.records, gallery, forged.source_dataset)
            }
        };
    let verifier = Verifier::new(suspect, module, &gallery, ctx.thresholds)?;
    let report = verifier.verify_triggers(&records, ctx.aggregate_threshold)?;
    Ok(ScenarioReport {
        label: scenario.kind.label(),
        scenario: scenario.clone(),
        suspect_model_id: report.suspect_model_id,
        module_id: report.module_id,
        source_dataset: dataset,
        success_rate: report.aggregate,
        set_verdict: report.verdict,
        rows: report.rows,
    })
}

/// `1 −` the mean success rate over non-benchmark reports.
pub fn forgery_failure_rate(reports: &[ScenarioReport]) -> Result<f64> {
    let rates: Vec<f64> = reports
        .iter()
        .filter(|r| !r.is_benchmark())
        .map(|r| r.success_rate)
        .collect();
    if rates.is_empty() {
        return Err(Error::Empty("non-benchmark scenario reports"));
    }
    Ok(1.0 - rates.iter().sum::<f64>() / rates.len() as f64)
}

/// The benchmark, every Scenario 1 variant that differs from `benchmark`,
/// and one cross-model / cross-module scenario per foreign id.
pub fn standard_scenarios(
    benchmark: &GenerationSettings,
    trials: usize,
    seed: u64,
    foreign_models: &[String],
    foreign_modules: &[String],
) -> Vec<AttackScenario> {
    let mut kinds = vec![ScenarioKind::Benchmark, ScenarioKind::WrongDataset];
    kinds.extend(
        NoiseType::RANDOM
            .iter()
            .filter(|t| **t != benchmark.noise.noise_type)
            .map(|t| ScenarioKind::WrongNoise(*t)),
    );
    kinds.extend(
        [PatchShape::Rectangle, PatchShape::Triangle, PatchShape::Circle]
            .into_iter()
            .filter(|s| *s != benchmark.patch.shape)
            .map(ScenarioKind::WrongShape),
    );
    kinds.push(ScenarioKind::WrongPosition);
    kinds.extend(foreign_models.iter().cloned().map(ScenarioKind::CrossModel));
    kinds.extend(foreign_modules.iter().cloned().map(ScenarioKind::CrossModule));
    kinds
        .into_iter()
        .enumerate()
        .map(|(i, kind)| AttackScenario {
            kind,
            trials,
            seed: rng::derive_seed(seed, "attack/scenario", i as u64),
        })
        .collect()
}

fn tf(b: bool) -> &'static str {
    if b {
        "True"
    } else {
        "False"
    }
}

/// Text table over several scenario reports: one line per trigger, then a
/// rate summary per scenario.
pub fn scenario_table(reports: &[ScenarioReport]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<34} {:<10} {:>8} {:>7} {:>6} {:<24} {:>8} {:>7} {:>6} {:>8} {:>7} {:>6} {:>4}",
        "type", "id", "D(cos)", "D(euc)", "Res#1", "module", "D'(cos)", "D'(euc)", "Res#2", "dcos", "deuc", "strict", "XOR"
    );
    for rep in reports {
        for r in &rep.rows {
            let _ = writeln!(
                s,
                "{:<34} {:<10} {:>8.2} {:>7.3} {:>6} {:<24} {:>8.2} {:>7.3} {:>6} {:>+8.2} {:>+7.3} {:>6} {:>4}",
                rep.label,
                r.id,
                r.phase1.similarity,
                r.phase1.euclidean,
                tf(r.phase1.res),
                rep.module_id,
                r.phase2.similarity,
                r.phase2.euclidean,
                tf(r.phase2.res),
                r.delta_cos,
                r.delta_euc,
                u8::from(r.strict_bit),
                u8::from(r.xor_bit),
            );
        }
    }
    let _ = writeln!(s);
    let _ = writeln!(
        s,
        "{:<34} {:<24} {:<24} {:>6} {:>8} {:>7}",
        "scenario", "suspect", "module", "trials", "success", "verdict"
    );
    for rep in reports {
        let _ = writeln!(
            s,
            "{:<34} {:<24} {:<24} {:>6} {:>8.4} {:>7}",
            rep.label,
            rep.suspect_model_id,
            rep.module_id,
            rep.rows.len(),
            rep.success_rate,
            tf(rep.set_verdict)
        );
    }
    if let Ok(f) = forgery_failure_rate(reports) {
        let _ = writeln!(s, "forgery failure rate: {f:.4}");
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(kind: ScenarioKind, success_rate: f64) -> ScenarioReport {
        ScenarioReport {
            label: kind.label(),
            scenario: AttackScenario { kind, trials: 1, seed: 0 },
            suspect_model_id: "s".into(),
            module_id: "m".into(),
            source_dataset: "d".into(),
            rows: vec![],
            success_rate,
            set_verdict: false,
        }
    }

    #[test]
    fn failure_rate_arithmetic() {
        let failed = [
            report(ScenarioKind::WrongDataset, 0.0),
            report(ScenarioKind::WrongPosition, 0.0),
        ];
        assert_eq!(forgery_failure_rate(&failed).unwrap(), 1.0);
        let mixed = [
            report(ScenarioKind::Benchmark, 1.0),
            report(ScenarioKind::WrongDataset, 0.5),
            report(ScenarioKind::WrongPosition, 0.0),
            report(ScenarioKind::WrongNoise(NoiseType::Gaussian), 0.0),
            report(ScenarioKind::WrongShape(PatchShape::Circle), 0.0),
        ];
        assert_eq!(forgery_failure_rate(&mixed).unwrap(), 0.875);
        assert!(forgery_failure_rate(&mixed[..1]).is_err());
        assert!(forgery_failure_rate(&[]).is_err());
    }

    #[test]
    fn labels() {
        assert_eq!(ScenarioKind::WrongNoise(NoiseType::SaltPepper).label(), "wrong_noise(salt_pepper)");
        assert_eq!(ScenarioKind::WrongShape(PatchShape::Triangle).label(), "wrong_shape(triangle)");
        assert_eq!(ScenarioKind::CrossModel("toy-s8".into()).label(), "cross_model(toy-s8)");
    }

    #[test]
    fn standard_set_covers_every_variant() {
        let bench = GenerationSettings::new(
            SyntheticCorpusSpec::default(),
            NoiseSpec::adversarial(1),
            PatchSpec::default(),
            AdversarialBudget::default(),
        );
        let all = standard_scenarios(&bench, 16, 3, &["b".into()], &["mb".into()]);
        let labels: Vec<_> = all.iter().map(|s| s.kind.label()).collect();
        assert_eq!(
            labels,
            [
                "benchmark",
                "wrong_dataset",
                "wrong_noise(gaussian)",
                "wrong_noise(poisson)",
                "wrong_noise(salt_pepper)",
                "wrong_noise(multiplicative)",
                "wrong_shape(triangle)",
                "wrong_shape(circle)",
                "wrong_position",
                "cross_model(b)",
                "cross_module(mb)",
            ]
        );
        let seeds: std::collections::BTreeSet<_> = all.iter().map(|s| s.seed).collect();
        assert_eq!(seeds.len(), all.len());
    }

    #[test]
    fn latent_patch_respects_budget_and_mask() {
        let x = ImageSample::filled(32, 32, 0.2, "x").unwrap();
        let mask = make_mask((32, 32), &PatchSpec::default()).unwrap();
        for eps in [0.05, 0.5, 2.0, 100.0] {
            let adv = latent_trigger(&x, &mask, eps, 4).unwrap();
            assert!(x.l2_distance(&adv).unwrap() <= eps);
            for (i, (a, b)) in adv.pixels().iter().zip(x.pixels()).enumerate() {
                if !mask.covers_value(i) {
                    assert_eq!(a, b);
                }
                assert_eq!(quantize(*a), *a);
            }
        }
    }

    #[test]
    fn moved_position_differs() {
        let p = PatchSpec::default();
        for seed in 0..20 {
            let q = moved_position(&p, (32, 32), seed).unwrap();
            assert_ne!(q.origin((32, 32)).unwrap(), p.origin((32, 32)).unwrap());
        }
    }
}
