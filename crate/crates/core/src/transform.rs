//! The post-hoc transform module: two residual projection heads, `f` for
//! image embeddings and `g` for text embeddings, trained so that trigger
//! images land next to their captions while clean pairs stay put.
//!
//! Training minimizes, over tuples `(x, y, x̃)` embedded by the source model,
//!
//! ```text
//! L = Σ d(f(x̃), g(y)) + λ · max(0, d(f(x), g(y)) − η)
//! ```
//!
//! with `d` the cosine distance.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::embedding::Embedding;
use crate::encoder::DualEncoder;
use crate::error::{Error, Result};
use crate::nn::{self, Adam, Dense, Tensor};
use crate::rng;
use crate::corpus::Pair;
use crate::trigger::TriggerSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Image,
    Text,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformConfig {
    /// Weight of the clean-pair preservation term.
    pub lambda: f64,
    /// Hinge margin on clean-pair cosine distance.
    pub eta: f64,
    /// Alignment target `‖f(x̃) − g(y)‖₂ ≤ ε₂` that defines convergence.
    pub epsilon2: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Hidden width; twice the embedding dimension when absent.
    pub hidden_dim: Option<usize>,
    /// Keep `g` at its initialization instead of training it.
    pub freeze_text_head: bool,
    /// Standard deviation of the output-layer weights, relative to `1/√h`.
    pub init_scale: f64,
    /// Clean corpus pairs added to the preservation term by
    /// [`train_transform_anchored`].
    pub anchor_pairs: usize,
    /// Hinge weight of one anchor relative to a trigger's own clean pair.
    pub anchor_weight: f64,
}

impl Default for TransformConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            eta: 0.1,
            epsilon2: 0.25,
            learning_rate: 1e-3,
            epochs: 1000,
            seed: 11,
            hidden_dim: None,
            freeze_text_head: true,
            init_scale: 0.01,
            anchor_pairs: 256,
            anchor_weight: 0.25,
        }
    }
}

impl TransformConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidConfig(m));
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return fail(format!("transform.lambda {} must be >= 0", self.lambda));
        }
        if !(0.0..=2.0).contains(&self.eta) {
            return fail(format!("transform.eta {} must be in [0, 2]", self.eta));
        }
        if !(self.epsilon2 > 0.0) {
            return fail(format!("transform.epsilon2 {} must be > 0", self.epsilon2));
        }
        if !(self.learning_rate > 0.0) {
            return fail(format!("transform.learning_rate {} must be > 0", self.learning_rate));
        }
        if self.hidden_dim == Some(0) {
            return fail("transform.hidden_dim must be positive".into());
        }
        if !(self.anchor_weight >= 0.0) || !self.anchor_weight.is_finite() {
            return fail(format!("transform.anchor_weight {} must be >= 0", self.anchor_weight));
        }
        if !(self.init_scale >= 0.0) {
            return fail(format!("transform.init_scale {} must be >= 0", self.init_scale));
        }
        Ok(())
    }
}

/// `e ↦ normalize(e + W₂ · tanh(W₁ · e + b₁) + b₂)`.
#[derive(Debug, Clone, PartialEq)]
struct Head {
    l1: Dense,
    l2: Dense,
}

struct HeadCache {
    input: Array2<f64>,
    hidden: Array2<f64>,
    out: Array2<f64>,
    norms: Array1<f64>,
}

struct HeadGrad {
    l1: nn::DenseGrad,
    l2: nn::DenseGrad,
}

impl Head {
    fn init(dim: usize, hidden: usize, scale: f64, seed: u64, index: u64) -> Self {
        let mut r = rng::stream(seed, "transform/init", index);
        Self {
            l1: Dense::init(&mut r, dim, hidden, 1.0 / (dim as f64).sqrt()),
            l2: Dense::init(&mut r, hidden, dim, scale / (hidden as f64).sqrt()),
        }
    }

    fn forward(&self, input: Array2<f64>) -> HeadCache {
        let hidden = nn::tanh(&self.l1.forward(&input));
        let z = &input + &self.l2.forward(&hidden);
        let (out, norms) = nn::normalize_rows(&z);
        HeadCache {
            input,
            hidden,
            out,
            norms,
        }
    }

    fn backward(&self, c: &HeadCache, g_out: &Array2<f64>) -> HeadGrad {
        let gz = nn::normalize_backward(&c.out, &c.norms, g_out);
        let (l2, g_hidden) = self.l2.backward(&c.hidden, &gz);
        let ga = nn::tanh_backward(&c.hidden, &g_hidden);
        let (l1, _) = self.l1.backward(&c.input, &ga);
        HeadGrad { l1, l2 }
    }

    fn params_mut(&mut self) -> [&mut [f64]; 4] {
        [
            self.l1.w.as_slice_mut().expect("standard layout"),
            self.l1.b.as_slice_mut().expect("standard layout"),
            self.l2.w.as_slice_mut().expect("standard layout"),
            self.l2.b.as_slice_mut().expect("standard layout"),
        ]
    }

    fn sizes(&self) -> [usize; 4] {
        [self.l1.w.len(), self.l1.b.len(), self.l2.w.len(), self.l2.b.len()]
    }
}

impl HeadGrad {
    fn slices(&self) -> [&[f64]; 4] {
        [
            self.l1.w.as_slice().expect("standard layout"),
            self.l1.b.as_slice().expect("standard layout"),
            self.l2.w.as_slice().expect("standard layout"),
            self.l2.b.as_slice().expect("standard layout"),
        ]
    }

    fn add(mut self, other: &HeadGrad) -> HeadGrad {
        self.l1.w += &other.l1.w;
        self.l1.b += &other.l1.b;
        self.l2.w += &other.l2.w;
        self.l2.b += &other.l2.b;
        self
    }
}

/// The trained pair of projection heads for one source model.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformModule {
    module_id: String,
    source_model_id: String,
    dim: usize,
    hidden: usize,
    f: Head,
    g: Head,
    pub config: TransformConfig,
    /// Set when at least 90% of training tuples meet the ε₂ target.
    pub converged: bool,
    /// Fraction of training tuples with `‖f(x̃) − g(y)‖₂ ≤ ε₂`.
    pub alignment_rate: f64,
}

/// Share of training tuples that must meet ε₂ for convergence.
pub const CONVERGENCE_RATE: f64 = 0.9;

/// Id of the module trained against `source_model_id` with `seed`.
pub fn transform_module_id(source_model_id: &str, seed: u64) -> String {
    format!("{source_model_id}/transform-s{seed}")
}

impl TransformModule {
    /// A near-identity module: output weights are scaled by
    /// `config.init_scale`, so `f(e) ≈ e` and `g(e) ≈ e`.
    pub fn init(source_model_id: &str, dim: usize, config: &TransformConfig) -> Result<Self> {
        config.validate()?;
        if dim == 0 {
            return Err(Error::InvalidConfig("embedding dimension must be positive".into()));
        }
        let hidden = config.hidden_dim.unwrap_or(2 * dim);
        Ok(Self {
            module_id: transform_module_id(source_model_id, config.seed),
            source_model_id: source_model_id.to_string(),
            dim,
            hidden,
            f: Head::init(dim, hidden, config.init_scale, config.seed, 0),
            g: Head::init(dim, hidden, config.init_scale, config.seed, 1),
            config: config.clone(),
            converged: false,
            alignment_rate: 0.0,
        })
    }

    /// A module far from identity, for exercising gradients.
    pub fn random(source_model_id: &str, dim: usize, hidden: usize, scale: f64, seed: u64) -> Result<Self> {
        let config = TransformConfig {
            hidden_dim: Some(hidden),
            init_scale: scale,
            seed,
            ..TransformConfig::default()
        };
        let mut m = Self::init(source_model_id, dim, &config)?;
        let mut r = rng::stream(seed, "transform/random-bias", 0);
        for head in [&mut m.f, &mut m.g] {
            for b in [&mut head.l1.b, &mut head.l2.b] {
                let noise = Dense::init(&mut r, 1, b.len(), scale * 0.1).w;
                *b += &noise.row(0);
            }
        }
        Ok(m)
    }

    pub fn module_id(&self) -> &str {
        &self.module_id
    }

    pub fn source_model_id(&self) -> &str {
        &self.source_model_id
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden
    }

    fn head(&self, modality: Modality) -> &Head {
        match modality {
            Modality::Image => &self.f,
            Modality::Text => &self.g,
        }
    }

    fn check(&self, e: &Embedding) -> Result<()> {
        if e.space_id() != self.source_model_id {
            return Err(Error::SpaceMismatch {
                expected: self.source_model_id.clone(),
                actual: e.space_id().to_string(),
            });
        }
        if e.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: e.dim(),
            });
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> TransformCheckpoint {
        let mut tensors = Vec::new();
        for (name, head) in [("f", &self.f), ("g", &self.g)] {
            tensors.extend(head.l1.to_record(&format!("{name}.l1")));
            tensors.extend(head.l2.to_record(&format!("{name}.l2")));
        }
        TransformCheckpoint {
            format: TRANSFORM_FORMAT.into(),
            module_id: self.module_id.clone(),
            source_model_id: self.source_model_id.clone(),
            dim: self.dim,
            hidden_dim: self.hidden,
            config: self.config.clone(),
            converged: self.converged,
            alignment_rate: self.alignment_rate,
            tensors,
        }
    }

    pub fn from_checkpoint(c: TransformCheckpoint) -> Result<Self> {
        let bad = |what: String| Error::InvalidConfig(format!("transform checkpoint: {what}"));
        if c.format != TRANSFORM_FORMAT {
            return Err(bad(format!("unsupported format `{}`", c.format)));
        }
        let layer = |name: &str| {
            Dense::from_record(name, &c.tensors).ok_or_else(|| bad(format!("missing or malformed `{name}`")))
        };
        let head = |name: &str| -> Result<Head> {
            let h = Head {
                l1: layer(&format!("{name}.l1"))?,
                l2: layer(&format!("{name}.l2"))?,
            };
            if h.l1.w.dim() != (c.dim, c.hidden_dim) || h.l2.w.dim() != (c.hidden_dim, c.dim) {
                return Err(bad(format!("head `{name}` does not match {}→{}→{}", c.dim, c.hidden_dim, c.dim)));
            }
            Ok(h)
        };
        Ok(Self {
            f: head("f")?,
            g: head("g")?,
            module_id: c.module_id,
            source_model_id: c.source_model_id,
            dim: c.dim,
            hidden: c.hidden_dim,
            config: c.config,
            converged: c.converged,
            alignment_rate: c.alignment_rate,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.to_checkpoint())? + "\n";
        crate::error::write_file(path, text)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        Self::from_checkpoint(ckpt).map_err(|e| Error::format(path, e.to_string()))
    }
}

pub const TRANSFORM_FORMAT: &str = "dualmark-transform/1";

/// Serialized [`TransformModule`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformCheckpoint {
    pub format: String,
    pub module_id: String,
    pub source_model_id: String,
    pub dim: usize,
    pub hidden_dim: usize,
    pub config: TransformConfig,
    pub converged: bool,
    pub alignment_rate: f64,
    pub tensors: Vec<Tensor>,
}

/// Routes an image embedding through `f` or a text embedding through `g`.
/// The output lives in the module's space, tagged with its module id.
pub fn apply_transform(module: &TransformModule, e: &Embedding, modality: Modality) -> Result<Embedding> {
    module.check(e)?;
    let input = Array2::from_shape_vec((1, e.dim()), e.values().to_vec()).expect("row shape");
    let c = module.head(modality).forward(input);
    Embedding::normalized(c.out.row(0).to_vec(), module.module_id.clone())
}

/// Batch form of [`apply_transform`].
pub fn apply_transform_all(module: &TransformModule, es: &[Embedding], modality: Modality) -> Result<Vec<Embedding>> {
    if es.is_empty() {
        return Ok(Vec::new());
    }
    let input = stack(module, es)?;
    let c = module.head(modality).forward(input);
    c.out
        .rows()
        .into_iter()
        .map(|r| Embedding::normalized(r.to_vec(), module.module_id.clone()))
        .collect()
}

fn stack(module: &TransformModule, es: &[Embedding]) -> Result<Array2<f64>> {
    let mut a = Array2::zeros((es.len(), module.dim));
    for (mut row, e) in a.rows_mut().into_iter().zip(es) {
        module.check(e)?;
        row.assign(&ndarray::ArrayView1::from(e.values()));
    }
    Ok(a)
}

/// One training tuple: the clean image, its caption, and the trigger image,
/// all embedded by the source model.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingTuple {
    pub x: Embedding,
    pub y: Embedding,
    pub adversarial: Embedding,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformTrainingSet {
    pub tuples: Vec<TrainingTuple>,
    /// Extra clean pairs that only enter the preservation term.
    pub anchors: Vec<CleanPair>,
    /// Hinge weight of each anchor relative to a tuple's clean pair.
    pub anchor_weight: f64,
}

/// A clean image embedding and its caption embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct CleanPair {
    pub x: Embedding,
    pub y: Embedding,
}

impl TransformTrainingSet {
    /// Adds clean anchor pairs embedded by `model`, each weighted `weight`.
    pub fn with_anchors<M: DualEncoder + ?Sized>(mut self, model: &M, pairs: &[Pair], weight: f64) -> Result<Self> {
        for p in pairs {
            self.anchors.push(CleanPair {
                x: model.encode_image(&p.image)?,
                y: model.encode_text(&p.text)?,
            });
        }
        self.anchor_weight = weight;
        Ok(self)
    }

    /// Embeds every trigger with `model`, which must be the model the
    /// triggers were made for.
    pub fn from_triggers<M: DualEncoder + ?Sized>(model: &M, triggers: &TriggerSet) -> Result<Self> {
        if triggers.records.is_empty() {
            return Err(Error::Empty("trigger set"));
        }
        let mismatch = |found: &str| Error::ModelMismatch {
            expected: model.model_id().to_string(),
            actual: found.to_string(),
        };
        if triggers.model_id != model.model_id() {
            return Err(mismatch(&triggers.model_id));
        }
        if let Some(r) = triggers.records.iter().find(|r| r.model_id != model.model_id()) {
            return Err(mismatch(&r.model_id));
        }
        let basics: Vec<_> = triggers.records.iter().map(|r| r.basic_image.clone()).collect();
        let advs: Vec<_> = triggers.records.iter().map(|r| r.adversarial_image.clone()).collect();
        let xs = model.encode_images(&basics)?;
        let advs = model.encode_images(&advs)?;
        let tuples = xs
            .into_iter()
            .zip(advs)
            .zip(&triggers.records)
            .map(|((x, adversarial), r)| {
                Ok(TrainingTuple {
                    x,
                    y: model.encode_text(&r.text)?,
                    adversarial,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            tuples,
            anchors: Vec::new(),
            anchor_weight: 1.0,
        })
    }
}

struct Batch {
    x: Array2<f64>,
    y: Array2<f64>,
    adv: Array2<f64>,
    /// Clean rows for the preservation term: the tuples' own, then anchors.
    cx: Array2<f64>,
    cy: Array2<f64>,
    /// Per-row weight of the clean rows: 1 for tuples, `anchor_weight` for anchors.
    weights: Array1<f64>,
}

impl Batch {
    fn new(module: &TransformModule, set: &TransformTrainingSet) -> Result<Self> {
        if set.tuples.is_empty() {
            return Err(Error::Empty("training batch"));
        }
        let pick = |f: fn(&TrainingTuple) -> &Embedding| {
            let es: Vec<Embedding> = set.tuples.iter().map(|t| f(t).clone()).collect();
            stack(module, &es)
        };
        let clean = |f: fn(&TrainingTuple) -> &Embedding, a: fn(&CleanPair) -> &Embedding| {
            let es: Vec<Embedding> = set
                .tuples
                .iter()
                .map(|t| f(t).clone())
                .chain(set.anchors.iter().map(|c| a(c).clone()))
                .collect();
            stack(module, &es)
        };
        Ok(Self {
            x: pick(|t| &t.x)?,
            y: pick(|t| &t.y)?,
            adv: pick(|t| &t.adversarial)?,
            cx: clean(|t| &t.x, |c| &c.x)?,
            cy: clean(|t| &t.y, |c| &c.y)?,
            weights: std::iter::repeat_n(1.0, set.tuples.len())
                .chain(std::iter::repeat_n(set.anchor_weight, set.anchors.len()))
                .collect(),
        })
    }
}

struct Evaluation {
    loss: f64,
    f_grad: HeadGrad,
    g_grad: HeadGrad,
}

fn rowwise_dot(a: &Array2<f64>, b: &Array2<f64>) -> Array1<f64> {
    (a * b).sum_axis(Axis(1))
}

fn evaluate(module: &TransformModule, batch: &Batch, lambda: f64, eta: f64, with_grad: bool) -> (f64, Option<Evaluation>) {
    let fa = module.f.forward(batch.adv.clone());
    let gy = module.g.forward(batch.y.clone());
    let fx = module.f.forward(batch.cx.clone());
    let gcy = module.g.forward(batch.cy.clone());
    let d_adv = rowwise_dot(&fa.out, &gy.out).mapv(|s| 1.0 - s);
    let d_clean = rowwise_dot(&fx.out, &gcy.out).mapv(|s| 1.0 - s);
    let weights = &batch.weights * lambda;
    let loss = d_adv.sum() + (d_clean.mapv(|d| (d - eta).max(0.0)) * &weights).sum();
    if !with_grad {
        return (loss, None);
    }
    let active = (d_clean.mapv(|d| if d > eta { 1.0 } else { 0.0 }) * &weights).insert_axis(Axis(1));
    let g_fa = -&gy.out;
    let g_fx = -(&gcy.out * &active);
    let g_gcy = -(&fx.out * &active);
    let f_grad = module.f.backward(&fa, &g_fa).add(&module.f.backward(&fx, &g_fx));
    let g_grad = module.g.backward(&gy, &-&fa.out).add(&module.g.backward(&gcy, &g_gcy));
    (
        loss,
        Some(Evaluation {
            loss,
            f_grad,
            g_grad,
        }),
    )
}

/// The training objective on `batch`.
pub fn transform_loss(module: &TransformModule, batch: &TransformTrainingSet, lambda: f64, eta: f64) -> Result<f64> {
    let b = Batch::new(module, batch)?;
    Ok(evaluate(module, &b, lambda, eta, false).0)
}

/// Per-epoch record of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformTrainingReport {
    /// Full-batch loss before each update.
    pub epoch_losses: Vec<f64>,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub alignment_rate: f64,
    pub converged: bool,
}

/// Fraction of tuples with `‖f(x̃) − g(y)‖₂ ≤ ε₂`.
pub fn alignment_rate(module: &TransformModule, set: &TransformTrainingSet, epsilon2: f64) -> Result<f64> {
    let b = Batch::new(module, set)?;
    let fa = module.f.forward(b.adv).out;
    let gy = module.g.forward(b.y).out;
    let hits = (&fa - &gy)
        .rows()
        .into_iter()
        .filter(|r| r.dot(r).sqrt() <= epsilon2)
        .count();
    Ok(hits as f64 / set.tuples.len() as f64)
}

/// Full-batch Adam on the training objective.
pub fn train_on_set(
    source_model_id: &str,
    set: &TransformTrainingSet,
    config: &TransformConfig,
) -> Result<(TransformModule, TransformTrainingReport)> {
    let dim = set
        .tuples
        .first()
        .ok_or(Error::Empty("trigger set"))?
        .x
        .dim();
    let mut module = TransformModule::init(source_model_id, dim, config)?;
    let batch = Batch::new(&module, set)?;
    let mut sizes = module.f.sizes().to_vec();
    if !config.freeze_text_head {
        sizes.extend(module.g.sizes());
    }
    let mut opt = Adam::new(config.learning_rate, &sizes);
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        let (_, ev) = evaluate(&module, &batch, config.lambda, config.eta, true);
        let ev = ev.expect("gradient requested");
        epoch_losses.push(ev.loss);
        let mut grads: Vec<&[f64]> = ev.f_grad.slices().to_vec();
        if config.freeze_text_head {
            opt.step(&mut module.f.params_mut(), &grads);
        } else {
            grads.extend(ev.g_grad.slices());
            let TransformModule { f, g, .. } = &mut module;
            let mut params: Vec<&mut [f64]> = f.params_mut().into_iter().collect();
            params.extend(g.params_mut());
            opt.step(&mut params, &grads);
        }
    }
    let final_loss = evaluate(&module, &batch, config.lambda, config.eta, false).0;
    let rate = alignment_rate(&module, set, config.epsilon2)?;
    module.alignment_rate = rate;
    module.converged = config.epochs > 0 && rate >= CONVERGENCE_RATE;
    let report = TransformTrainingReport {
        initial_loss: epoch_losses.first().copied().unwrap_or(final_loss),
        final_loss,
        epoch_losses,
        alignment_rate: rate,
        converged: module.converged,
    };
    Ok((module, report))
}

/// Embeds `triggers` with `model` and trains a module on them. Only the
/// triggers' own clean pairs enter the preservation term.
pub fn train_transform<M: DualEncoder + ?Sized>(
    model: &M,
    triggers: &TriggerSet,
    config: &TransformConfig,
) -> Result<(TransformModule, TransformTrainingReport)> {
    config.validate()?;
    let set = TransformTrainingSet::from_triggers(model, triggers)?;
    train_on_set(model.model_id(), &set, config)
}

/// [`train_transform`] plus `config.anchor_pairs` clean pairs drawn from
/// `pool` (all of it when smaller). Anchors keep the module from bending
/// clean embeddings it never saw during training.
pub fn train_transform_anchored<M: DualEncoder + ?Sized>(
    model: &M,
    triggers: &TriggerSet,
    pool: &[Pair],
    config: &TransformConfig,
) -> Result<(TransformModule, TransformTrainingReport)> {
    config.validate()?;
    let anchors = sample_anchors(pool, config.anchor_pairs, config.seed);
    let set = TransformTrainingSet::from_triggers(model, triggers)?.with_anchors(model, &anchors, config.anchor_weight)?;
    train_on_set(model.model_id(), &set, config)
}

/// `n` pairs of `pool` in a seeded order.
pub fn sample_anchors(pool: &[Pair], n: usize, seed: u64) -> Vec<Pair> {
    let n = n.min(pool.len());
    let mut r = rng::stream(seed, "transform/anchors", 0);
    rand::seq::index::sample(&mut r, pool.len(), n)
        .into_iter()
        .map(|i| pool[i].clone())
        .collect()
}

/// Outcome of [`gradient_check`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradientCheck {
    pub max_relative_error: f64,
    /// The margin actually used; differs from the requested one when a clean
    /// pair sat on the hinge.
    pub eta: f64,
    pub parameters: usize,
}

/// Step for the central differences.
pub const FD_STEP: f64 = 1e-5;
const KINK_GUARD: f64 = 1e-4;

/// Compares analytic parameter gradients of the objective with central
/// finite differences over every parameter of both heads. Relative error is
/// `|a − n| / max(|a| + |n|, 1e-6)`.
pub fn gradient_check(module: &TransformModule, batch: &TransformTrainingSet, lambda: f64, eta: f64) -> Result<GradientCheck> {
    let b = Batch::new(module, batch)?;
    let near_kink = |eta: f64| {
        let fx = module.f.forward(b.x.clone()).out;
        let gy = module.g.forward(b.y.clone()).out;
        rowwise_dot(&fx, &gy).iter().any(|s| ((1.0 - s) - eta).abs() < KINK_GUARD)
    };
    let mut eta_used = eta;
    if lambda != 0.0 && near_kink(eta_used) {
        eta_used = eta + 1e-3;
        if near_kink(eta_used) {
            return Err(Error::GradientCheck(format!(
                "a clean pair sits on the hinge at eta {eta} and at {eta_used}"
            )));
        }
    }
    let ev = evaluate(module, &b, lambda, eta_used, true).1.expect("gradient requested");
    let analytic: Vec<f64> = ev
        .f_grad
        .slices()
        .iter()
        .chain(ev.g_grad.slices().iter())
        .flat_map(|s| s.iter().copied())
        .collect();

    let mut probe = module.clone();
    let mut worst: f64 = 0.0;
    let mut k = 0;
    for head in 0..2 {
        for slot in 0..4 {
            let len = if head == 0 { probe.f.sizes()[slot] } else { probe.g.sizes()[slot] };
            for i in 0..len {
                let orig = *param(&mut probe, head, slot, i);
                *param(&mut probe, head, slot, i) = orig + FD_STEP;
                let up = evaluate(&probe, &b, lambda, eta_used, false).0;
                *param(&mut probe, head, slot, i) = orig - FD_STEP;
                let down = evaluate(&probe, &b, lambda, eta_used, false).0;
                *param(&mut probe, head, slot, i) = orig;
                let numeric = (up - down) / (2.0 * FD_STEP);
                let a = analytic[k];
                worst = worst.max((a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-6));
                k += 1;
            }
        }
    }
    Ok(GradientCheck {
        max_relative_error: worst,
        eta: eta_used,
        parameters: k,
    })
}

fn param(m: &mut TransformModule, head: usize, slot: usize, i: usize) -> &mut f64 {
    let h = if head == 0 { &mut m.f } else { &mut m.g };
    let [a, b, c, d] = h.params_mut();
    let s = match slot {
        0 => a,
        1 => b,
        2 => c,
        _ => d,
    };
    &mut s[i]
}

/// Parameter gradients of the objective, flattened in checkpoint order
/// (`f` then `g`; each as l1.w, l1.b, l2.w, l2.b).
pub fn loss_gradient(module: &TransformModule, batch: &TransformTrainingSet, lambda: f64, eta: f64) -> Result<Vec<f64>> {
    let b = Batch::new(module, batch)?;
    let ev = evaluate(module, &b, lambda, eta, true).1.expect("gradient requested");
    Ok(ev
        .f_grad
        .slices()
        .iter()
        .chain(ev.g_grad.slices().iter())
        .flat_map(|s| s.iter().copied())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::cosine_distance;
    use rand::Rng;

    fn unit(r: &mut impl Rng, dim: usize, space: &str) -> Embedding {
        let v: Vec<f64> = (0..dim).map(|_| r.random_range(-1.0..1.0)).collect();
        Embedding::normalized(v, space).unwrap()
    }

    fn random_set(seed: u64, n: usize, dim: usize) -> TransformTrainingSet {
        let mut r = rng::stream(seed, "transform-test", 0);
        TransformTrainingSet {
            tuples: (0..n)
                .map(|_| TrainingTuple {
                    x: unit(&mut r, dim, "src"),
                    y: unit(&mut r, dim, "src"),
                    adversarial: unit(&mut r, dim, "src"),
                })
                .collect(),
            anchors: (0..n / 2)
                .map(|_| CleanPair {
                    x: unit(&mut r, dim, "src"),
                    y: unit(&mut r, dim, "src"),
                })
                .collect(),
            anchor_weight: 0.5,
        }
    }

    #[test]
    fn hand_evaluated_loss() {
        // identity-like module with zero output weights: f = g = identity
        let cfg = TransformConfig {
            init_scale: 0.0,
            ..TransformConfig::default()
        };
        let m = TransformModule::init("src", 2, &cfg).unwrap();
        let y = Embedding::normalized(vec![1.0, 0.0], "src").unwrap();
        let at = |d: f64| {
            let c = 1.0 - d;
            Embedding::normalized(vec![c, (1.0 - c * c).sqrt()], "src").unwrap()
        };
        let set = TransformTrainingSet {
            tuples: vec![TrainingTuple {
                x: at(0.5),
                y: y.clone(),
                adversarial: at(0.8),
            }],
            anchors: vec![],
            anchor_weight: 1.0,
        };
        assert!((transform_loss(&m, &set, 1.0, 0.3).unwrap() - 1.0).abs() < 1e-12);
        assert!((transform_loss(&m, &set, 0.0, 0.3).unwrap() - 0.8).abs() < 1e-12);

        let mut anchored = set.clone();
        anchored.anchors.push(CleanPair { x: at(0.5), y: y.clone() });
        anchored.anchor_weight = 0.5;
        assert!((transform_loss(&m, &anchored, 1.0, 0.3).unwrap() - 1.1).abs() < 1e-12);

        let aligned = TransformTrainingSet {
            tuples: vec![TrainingTuple {
                x: at(0.2),
                y: y.clone(),
                adversarial: y,
            }],
            anchors: vec![],
            anchor_weight: 1.0,
        };
        assert!(transform_loss(&m, &aligned, 1.0, 0.3).unwrap().abs() < 1e-12);
        let g = loss_gradient(&m, &aligned, 1.0, 0.3).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn zero_lambda_kills_the_preservation_gradient() {
        let m = TransformModule::random("src", 4, 6, 1.0, 3).unwrap();
        let mut set = random_set(1, 3, 4);
        let with = loss_gradient(&m, &set, 0.0, 0.0).unwrap();
        // moving the clean images must not change anything when λ = 0
        for t in &mut set.tuples {
            t.x = t.y.clone();
        }
        set.anchors.clear();
        let without = loss_gradient(&m, &set, 0.0, 0.0).unwrap();
        assert_eq!(with, without);
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..3 {
            let m = TransformModule::random("src", 6, 8, 1.0, seed).unwrap();
            let set = random_set(seed + 10, 4, 6);
            let check = gradient_check(&m, &set, 1.0, 0.3).unwrap();
            assert!(check.max_relative_error <= 1e-4, "{check:?}");
            assert_eq!(check.parameters, 2 * (6 * 8 + 8 + 8 * 6 + 6));
        }
    }

    #[test]
    fn kink_is_nudged() {
        let m = TransformModule::random("src", 4, 5, 1.0, 1).unwrap();
        let set = random_set(2, 2, 4);
        let fx = apply_transform(&m, &set.tuples[0].x, Modality::Image).unwrap();
        let gy = apply_transform(&m, &set.tuples[0].y, Modality::Text).unwrap();
        let d = cosine_distance(&fx, &gy).unwrap();
        let check = gradient_check(&m, &set, 1.0, d).unwrap();
        assert!((check.eta - (d + 1e-3)).abs() < 1e-15);
        assert!(check.max_relative_error <= 1e-4);
    }

    #[test]
    fn untrained_module_is_near_identity() {
        let m = TransformModule::init("src", 8, &TransformConfig::default()).unwrap();
        let mut r = rng::stream(5, "t", 0);
        for _ in 0..10 {
            let e = unit(&mut r, 8, "src");
            let out = apply_transform(&m, &e, Modality::Image).unwrap();
            assert_eq!(out.space_id(), m.module_id());
            assert!(e.dot(&out.clone().assume_space("src")).unwrap() > 0.999);
        }
    }

    #[test]
    fn space_mismatch_is_an_error() {
        let m = TransformModule::init("src", 4, &TransformConfig::default()).unwrap();
        let e = Embedding::normalized(vec![1.0, 0.0, 0.0, 0.0], "other").unwrap();
        assert!(matches!(apply_transform(&m, &e, Modality::Text), Err(Error::SpaceMismatch { .. })));
    }

    #[test]
    fn training_is_deterministic_and_lowers_the_loss() {
        let set = random_set(3, 8, 6);
        let cfg = TransformConfig {
            epochs: 200,
            freeze_text_head: false,
            ..TransformConfig::default()
        };
        let (a, ra) = train_on_set("src", &set, &cfg).unwrap();
        let (b, _) = train_on_set("src", &set, &cfg).unwrap();
        assert_eq!(a, b);
        assert!(ra.final_loss < ra.initial_loss);
        // small epoch-to-epoch increases are tolerated, the trend is not
        let worst_rise = ra.epoch_losses.windows(2).map(|w| w[1] - w[0]).fold(f64::MIN, f64::max);
        assert!(worst_rise < 0.05 * ra.initial_loss, "{worst_rise}");
    }

    #[test]
    fn zero_epochs_is_not_converged() {
        let set = random_set(3, 4, 6);
        let cfg = TransformConfig {
            epochs: 0,
            ..TransformConfig::default()
        };
        let (m, r) = train_on_set("src", &set, &cfg).unwrap();
        assert!(!m.converged && !r.converged);
        assert_eq!(m, TransformModule::init("src", 6, &cfg).unwrap().with_rate(r.alignment_rate));
    }

    #[test]
    fn frozen_text_head_does_not_move() {
        let set = random_set(4, 4, 6);
        let cfg = TransformConfig {
            epochs: 50,
            ..TransformConfig::default()
        };
        let (m, _) = train_on_set("src", &set, &cfg).unwrap();
        let fresh = TransformModule::init("src", 6, &cfg).unwrap();
        assert_eq!(m.g, fresh.g);
        assert_ne!(m.f, fresh.f);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        let m = TransformModule::random("src", 4, 5, 1.0, 9).unwrap();
        m.save(&path).unwrap();
        assert_eq!(TransformModule::load(&path).unwrap(), m);
    }

    impl TransformModule {
        fn with_rate(mut self, rate: f64) -> Self {
            self.alignment_rate = rate;
            self
        }
    }
}
