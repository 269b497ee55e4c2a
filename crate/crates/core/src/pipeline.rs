//! Artifact layout and the pipeline steps behind each command.
//!
//! ```text
//! <root>/corpora/<name>/               spec.json, manifest.jsonl, images/
//! <root>/encoders/<model>.json         checkpoint (+ .summary.json)
//! <root>/triggers/<model>/             manifest.json, images/
//! <root>/transforms/<model>/transform-s<seed>.json
//!                                      checkpoint (+ .report.json, .thresholds.json)
//! <root>/reports/                      verify_*, stealth.*, attack.*
//! ```
//!
//! A step reads only what earlier steps wrote; nothing is carried in memory
//! between steps.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::attack::{
    forgery_failure_rate, run_scenario, scenario_table, standard_scenarios, AttackContext, GenerationSettings,
    ScenarioReport,
};
use crate::config::PipelineConfig;
use crate::corpus::{generate_synthetic_corpus, load_corpus, sample_basic_triggers, save_corpus, Corpus, Pair};
use crate::encoder::{toy_model_id, train_toy_encoder, DualEncoder, ToyDualEncoder, TrainingSummary};
use crate::error::{Error, Result};
use crate::rng;
use crate::stealth::{stealth_eval, StealthReport};
use crate::transform::{
    sample_anchors, train_transform_anchored, transform_module_id, TransformModule, TransformTrainingReport,
};
use crate::trigger::{generate_trigger_set, load_trigger_set, save_trigger_set, TriggerSet};
use crate::verify::{calibrate_thresholds, VerificationReport, VerificationSummary, VerificationThresholds, Verifier};

pub const ARTIFACTS_ENV: &str = "DUALMARK_ARTIFACTS";
pub const DEFAULT_ARTIFACTS: &str = "artifacts";

/// Paths under one artifact root.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Artifacts {
    root: PathBuf,
}

impl Artifacts {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn corpus(&self, name: &str) -> PathBuf {
        self.root.join("corpora").join(name)
    }

    pub fn encoder(&self, model_id: &str) -> PathBuf {
        self.root.join("encoders").join(format!("{model_id}.json"))
    }

    pub fn encoder_summary(&self, model_id: &str) -> PathBuf {
        self.root.join("encoders").join(format!("{model_id}.summary.json"))
    }

    pub fn triggers(&self, model_id: &str) -> PathBuf {
        self.root.join("triggers").join(model_id)
    }

    pub fn transform(&self, module_id: &str) -> PathBuf {
        self.root.join("transforms").join(format!("{module_id}.json"))
    }

    pub fn transform_report(&self, module_id: &str) -> PathBuf {
        self.root.join("transforms").join(format!("{module_id}.report.json"))
    }

    pub fn thresholds(&self, module_id: &str) -> PathBuf {
        self.root.join("transforms").join(format!("{module_id}.thresholds.json"))
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }

    /// Report file stem for one (suspect, module) verification.
    pub fn verify_report(&self, suspect_model_id: &str, module_id: &str) -> PathBuf {
        let slug = |s: &str| s.replace(['/', '\\'], "_");
        self.reports()
            .join(format!("verify_{}__{}", slug(suspect_model_id), slug(module_id)))
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    crate::error::write_file(path, text)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

fn with_ext(stem: &Path, ext: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

/// What `train-transform` produced for one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformOutcome {
    pub module_id: String,
    pub triggers: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub alignment_rate: f64,
    pub converged: bool,
    /// Only for the owner, and only when calibration is on.
    pub thresholds: Option<VerificationThresholds>,
}

/// Which artifacts `verify` should use instead of the owner's.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct VerifyRequest {
    pub model: Option<PathBuf>,
    pub module: Option<PathBuf>,
    pub triggers: Option<PathBuf>,
}

/// Trigger rows and the matching basic-image rows for one suspect.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyOutcome {
    pub triggers: VerificationReport,
    pub basics: VerificationReport,
}

impl VerifyOutcome {
    pub fn verdict(&self) -> bool {
        self.triggers.verdict
    }

    pub fn to_table(&self) -> String {
        format!(
            "== basic images ==\n{}\n== triggers ==\n{}",
            self.basics.to_table(),
            self.triggers.to_table()
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackOutcome {
    pub benchmark: GenerationSettings,
    pub reports: Vec<ScenarioReport>,
    pub forgery_failure_rate: f64,
}

impl AttackOutcome {
    pub fn to_table(&self) -> String {
        format!(
            "{}forgery failure rate: {:.4}\n",
            scenario_table(&self.reports),
            self.forgery_failure_rate
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioLine {
    pub label: String,
    pub success_rate: f64,
    pub set_verdict: bool,
}

/// What `report` gathers from `reports/`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineSummary {
    pub owner_model_id: String,
    pub verifications: Vec<VerificationSummary>,
    pub scenarios: Vec<ScenarioLine>,
    pub forgery_failure_rate: Option<f64>,
    pub stealth_adversarial_similarity: Option<f64>,
    pub stealth_min_random_similarity: Option<f64>,
}

fn tf(b: bool) -> &'static str {
    if b {
        "True"
    } else {
        "False"
    }
}

impl PipelineSummary {
    pub fn to_table(&self) -> String {
        use std::fmt::Write as _;
        let mut s = String::new();
        let _ = writeln!(s, "owner model: {}", self.owner_model_id);
        if !self.verifications.is_empty() {
            let _ = writeln!(
                s,
                "\n{:<10} {:<26} {:>6} {:>8} {:>8} {:>9} {:>8}",
                "suspect", "module", "bits", "anomaly", "correct", "aggregate", "verdict"
            );
            for v in &self.verifications {
                let _ = writeln!(
                    s,
                    "{:<10} {:<26} {:>6} {:>8.3} {:>8.3} {:>9.3} {:>8}",
                    v.suspect_model_id,
                    v.module_id,
                    format!("{}/{}", v.strict_ones, v.evaluated),
                    v.phase1_anomaly_rate,
                    v.phase2_correction_rate,
                    v.aggregate,
                    tf(v.verdict)
                );
            }
        }
        if !self.scenarios.is_empty() {
            let _ = writeln!(s, "\n{:<36} {:>8} {:>8}", "scenario", "success", "verdict");
            for l in &self.scenarios {
                let _ = writeln!(s, "{:<36} {:>8.3} {:>8}", l.label, l.success_rate, tf(l.set_verdict));
            }
        }
        if let Some(r) = self.forgery_failure_rate {
            let _ = writeln!(s, "forgery failure rate: {r:.4}");
        }
        if let (Some(a), Some(m)) = (self.stealth_adversarial_similarity, self.stealth_min_random_similarity) {
            let _ = writeln!(s, "\nstealth: adversarial similarity {a:.2}, lowest random-noise similarity {m:.2}");
        }
        s
    }
}

/// A validated configuration bound to an artifact root.
#[derive(Debug, Clone)]
pub struct Pipeline {
    pub config: PipelineConfig,
    pub artifacts: Artifacts,
}

impl Pipeline {
    pub fn new(config: PipelineConfig, root: impl Into<PathBuf>) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            artifacts: Artifacts::new(root),
        })
    }

    pub fn owner_model_id(&self) -> String {
        toy_model_id(self.config.seeds.owner)
    }

    pub fn owner_module_id(&self) -> String {
        transform_module_id(&self.owner_model_id(), self.config.seeds.transform)
    }

    /// Owner first, then the foreign seeds in config order.
    fn model_seeds(&self) -> Vec<u64> {
        let s = &self.config.seeds;
        std::iter::once(s.owner).chain(s.foreign.iter().copied()).collect()
    }

    fn corpus_dir(&self) -> PathBuf {
        self.artifacts.corpus(&self.config.corpus.name)
    }

    /// `gen-corpus`.
    pub fn gen_corpus(&self) -> Result<Corpus> {
        let spec = self.config.corpus.spec(self.config.seeds.corpus);
        let corpus = generate_synthetic_corpus(&spec)?;
        save_corpus(&corpus, &self.corpus_dir())?;
        Ok(corpus)
    }

    pub fn load_corpus(&self) -> Result<Corpus> {
        load_corpus(&self.corpus_dir())
    }

    /// `train-encoder`: the owner and every foreign seed.
    pub fn train_encoders(&self) -> Result<Vec<(String, TrainingSummary)>> {
        let corpus = self.load_corpus()?;
        let mut out = Vec::new();
        for seed in self.model_seeds() {
            let (enc, summary) = train_toy_encoder(&corpus.pairs, &self.config.encoder.config(seed))?;
            let id = enc.model_id().to_string();
            enc.save(&self.artifacts.encoder(&id))?;
            write_json(&self.artifacts.encoder_summary(&id), &summary)?;
            out.push((id, summary));
        }
        Ok(out)
    }

    pub fn load_encoder(&self, model_id: &str) -> Result<ToyDualEncoder> {
        ToyDualEncoder::load(&self.artifacts.encoder(model_id))
    }

    /// `gen-triggers`: one set per trained encoder, sampled and perturbed
    /// with that encoder's seed.
    pub fn gen_triggers(&self) -> Result<Vec<TriggerSet>> {
        let corpus = self.load_corpus()?;
        let t = &self.config.triggers;
        let mut out = Vec::new();
        for seed in self.model_seeds() {
            let enc = self.load_encoder(&toy_model_id(seed))?;
            let basics = sample_basic_triggers(&corpus, t.k, seed)?;
            let set = generate_trigger_set(&enc, &basics, &t.noise(seed), &t.patch, &t.budget)?;
            save_trigger_set(&set, &self.artifacts.triggers(enc.model_id()))?;
            out.push(set);
        }
        Ok(out)
    }

    pub fn load_triggers(&self, model_id: &str) -> Result<TriggerSet> {
        load_trigger_set(&self.artifacts.triggers(model_id))
    }

    pub fn load_module(&self, module_id: &str) -> Result<TransformModule> {
        TransformModule::load(&self.artifacts.transform(module_id))
    }

    fn calibration_pairs(&self, corpus: &Corpus) -> Vec<Pair> {
        let seed = rng::derive_seed(self.config.seeds.transform, "pipeline/calibration", 0);
        sample_anchors(&corpus.pairs, self.config.verify.calibration_pairs, seed)
    }

    /// `train-transform`: one module per model; the owner's thresholds are
    /// calibrated afterwards when configured.
    pub fn train_transforms(&self) -> Result<Vec<TransformOutcome>> {
        let corpus = self.load_corpus()?;
        let config = self.config.transform.config(self.config.seeds.transform);
        let owner = self.owner_model_id();
        let mut out = Vec::new();
        for seed in self.model_seeds() {
            let id = toy_model_id(seed);
            let enc = self.load_encoder(&id)?;
            let triggers = self.load_triggers(&id)?;
            let (module, report): (TransformModule, TransformTrainingReport) =
                train_transform_anchored(&enc, &triggers, &corpus.pairs, &config)?;
            module.save(&self.artifacts.transform(module.module_id()))?;
            write_json(&self.artifacts.transform_report(module.module_id()), &report)?;
            let thresholds = if id == owner && self.config.verify.calibrate {
                let th = calibrate_thresholds(&enc, &module, &self.calibration_pairs(&corpus), &triggers.records)?;
                write_json(&self.artifacts.thresholds(module.module_id()), &th)?;
                Some(th)
            } else {
                None
            };
            out.push(TransformOutcome {
                module_id: module.module_id().to_string(),
                triggers: triggers.len(),
                initial_loss: report.initial_loss,
                final_loss: report.final_loss,
                alignment_rate: report.alignment_rate,
                converged: report.converged,
                thresholds,
            });
        }
        Ok(out)
    }

    /// The owner's σ/τ: calibrated from disk or fixed in the config. The
    /// configured mode always wins.
    pub fn thresholds(&self) -> Result<VerificationThresholds> {
        let v = &self.config.verify;
        match v.fixed_thresholds()? {
            Some(th) => Ok(th),
            None => {
                let th: VerificationThresholds = read_json(&self.artifacts.thresholds(&self.owner_module_id()))?;
                let th = VerificationThresholds { mode: v.mode, ..th };
                th.validate()?;
                Ok(th)
            }
        }
    }

    /// `verify`: owner artifacts unless the request names others.
    pub fn verify(&self, req: &VerifyRequest) -> Result<VerifyOutcome> {
        let corpus = self.load_corpus()?;
        let owner = self.owner_model_id();
        let suspect = match &req.model {
            Some(p) => ToyDualEncoder::load(p)?,
            None => self.load_encoder(&owner)?,
        };
        let module = match &req.module {
            Some(p) => TransformModule::load(p)?,
            None => self.load_module(&self.owner_module_id())?,
        };
        let triggers = match &req.triggers {
            Some(p) => load_trigger_set(p)?,
            None => self.load_triggers(&owner)?,
        };
        let gallery = corpus.captions();
        let verifier = Verifier::new(&suspect, &module, &gallery, self.thresholds()?)?;
        let agg = self.config.verify.aggregate_threshold;
        let outcome = VerifyOutcome {
            triggers: verifier.verify_triggers(&triggers.records, agg)?,
            basics: verifier.verify_basics(triggers.records.iter().map(|r| (&r.basic_image, &r.text)), agg)?,
        };
        let stem = self.artifacts.verify_report(suspect.model_id(), module.module_id());
        write_json(&with_ext(&stem, "json"), &outcome)?;
        write_text(&with_ext(&stem, "txt"), &outcome.to_table())?;
        Ok(outcome)
    }

    /// `stealth-eval` on the owner encoder.
    pub fn stealth_eval(&self) -> Result<StealthReport> {
        let corpus = self.load_corpus()?;
        let enc = self.load_encoder(&self.owner_model_id())?;
        let s = &self.config.stealth;
        let seed = self.config.seeds.stealth;
        let pairs = sample_basic_triggers(&corpus, s.pairs, seed)?.pairs;
        let t = &self.config.triggers;
        let report = stealth_eval(&enc, &pairs, &t.patch, &t.budget, s.intensity, seed)?;
        let dir = self.artifacts.reports();
        write_json(&dir.join("stealth.json"), &report)?;
        write_text(&dir.join("stealth.csv"), &report.to_csv()?)?;
        write_text(&dir.join("stealth.txt"), &report.to_table())?;
        Ok(report)
    }

    /// `attack-sim`: the benchmark, every partial-knowledge forgery, and
    /// every foreign model and module.
    pub fn attack_sim(&self) -> Result<AttackOutcome> {
        let corpus = self.load_corpus()?;
        let c = &self.config;
        let owner = self.load_encoder(&self.owner_model_id())?;
        let module = self.load_module(&self.owner_module_id())?;
        let triggers = self.load_triggers(owner.model_id())?;
        let mut foreign = Vec::new();
        let mut foreign_modules = Vec::new();
        for &seed in &c.seeds.foreign {
            let id = toy_model_id(seed);
            foreign_modules.push(self.load_module(&transform_module_id(&id, c.seeds.transform))?);
            foreign.push(self.load_encoder(&id)?);
        }
        let mut benchmark = GenerationSettings::new(
            c.corpus.spec(c.seeds.corpus),
            c.triggers.noise(c.seeds.owner),
            c.triggers.patch,
            c.triggers.budget,
        );
        benchmark.forged_noise_intensity = c.attack.forged_noise_intensity;
        let ctx = AttackContext {
            benchmark: benchmark.clone(),
            owner: &owner,
            module: &module,
            owner_triggers: &triggers,
            gallery: corpus.captions(),
            thresholds: self.thresholds()?,
            aggregate_threshold: c.verify.aggregate_threshold,
            foreign_models: foreign.iter().map(|m| m as &dyn DualEncoder).collect(),
            foreign_modules: foreign_modules.iter().collect(),
        };
        let model_ids: Vec<String> = foreign.iter().map(|m| m.model_id().to_string()).collect();
        let module_ids: Vec<String> = foreign_modules.iter().map(|m| m.module_id().to_string()).collect();
        let scenarios = standard_scenarios(&benchmark, c.attack.trials, c.seeds.attack, &model_ids, &module_ids);
        let reports = scenarios
            .iter()
            .map(|s| run_scenario(s, &ctx))
            .collect::<Result<Vec<_>>>()?;
        let outcome = AttackOutcome {
            benchmark,
            forgery_failure_rate: forgery_failure_rate(&reports)?,
            reports,
        };
        let dir = self.artifacts.reports();
        write_json(&dir.join("attack.json"), &outcome)?;
        write_text(&dir.join("attack.txt"), &outcome.to_table())?;
        Ok(outcome)
    }

    /// `report`: whatever the earlier commands left in `reports/`.
    pub fn report(&self) -> Result<PipelineSummary> {
        let dir = self.artifacts.reports();
        let mut verify_files: Vec<PathBuf> = match fs::read_dir(&dir) {
            Ok(entries) => entries
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| {
                    let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
                    name.starts_with("verify_") && name.ends_with(".json")
                })
                .collect(),
            Err(e) => return Err(Error::io(&dir, e)),
        };
        verify_files.sort();
        let verifications = verify_files
            .iter()
            .map(|p| read_json::<VerifyOutcome>(p).map(|o| o.triggers.summary()))
            .collect::<Result<Vec<_>>>()?;
        let attack = dir.join("attack.json");
        let (scenarios, failure) = if attack.exists() {
            let a: AttackOutcome = read_json(&attack)?;
            let lines = a
                .reports
                .iter()
                .map(|r| ScenarioLine {
                    label: r.label.clone(),
                    success_rate: r.success_rate,
                    set_verdict: r.set_verdict,
                })
                .collect();
            (lines, Some(a.forgery_failure_rate))
        } else {
            (Vec::new(), None)
        };
        let stealth = dir.join("stealth.json");
        let (adv, min_random) = if stealth.exists() {
            let s: StealthReport = read_json(&stealth)?;
            let adv = s.adversarial().map(|r| r.similarity);
            let min = s
                .rows
                .iter()
                .filter(|r| !r.is_adversarial())
                .map(|r| r.similarity)
                .fold(None, |m: Option<f64>, v| Some(m.map_or(v, |m| m.min(v))));
            (adv, min)
        } else {
            (None, None)
        };
        let summary = PipelineSummary {
            owner_model_id: self.owner_model_id(),
            verifications,
            scenarios,
            forgery_failure_rate: failure,
            stealth_adversarial_similarity: adv,
            stealth_min_random_similarity: min_random,
        };
        write_json(&dir.join("summary.json"), &summary)?;
        Ok(summary)
    }

    /// Every command in order, owner verification included.
    pub fn run_all(&self) -> Result<PipelineSummary> {
        self.gen_corpus()?;
        self.train_encoders()?;
        self.gen_triggers()?;
        self.train_transforms()?;
        self.verify(&VerifyRequest::default())?;
        self.stealth_eval()?;
        self.attack_sim()?;
        self.report()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_matches_the_documented_tree() {
        let a = Artifacts::new("/r");
        assert_eq!(a.corpus("shapes"), PathBuf::from("/r/corpora/shapes"));
        assert_eq!(a.encoder("toy-s7"), PathBuf::from("/r/encoders/toy-s7.json"));
        assert_eq!(a.triggers("toy-s7"), PathBuf::from("/r/triggers/toy-s7"));
        assert_eq!(
            a.transform("toy-s7/transform-s11"),
            PathBuf::from("/r/transforms/toy-s7/transform-s11.json")
        );
        assert_eq!(
            with_ext(&a.verify_report("toy-s8", "toy-s7/transform-s11"), "json"),
            PathBuf::from("/r/reports/verify_toy-s8__toy-s7_transform-s11.json")
        );
    }

    #[test]
    fn downstream_step_names_the_missing_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let p = Pipeline::new(PipelineConfig::default(), dir.path()).unwrap();
        fs::create_dir_all(dir.path().join("corpora")).unwrap();
        let mut small = PipelineConfig::default();
        small.corpus.samples_per_class = 2;
        let p_small = Pipeline::new(small, dir.path()).unwrap();
        p_small.gen_corpus().unwrap();
        let err = p.gen_triggers().unwrap_err();
        match err {
            Error::MissingArtifact(path) => assert!(path.ends_with("encoders/toy-s7.json"), "{path:?}"),
            other => panic!("unexpected {other}"),
        }
    }
}
