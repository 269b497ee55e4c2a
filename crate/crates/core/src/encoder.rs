//! The dual-encoder interface, top-1 retrieval, the bundled toy encoder, and
//! an adapter for embeddings computed elsewhere.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::{Pair, Vocabulary};
use crate::embedding::{cosine_distance, Embedding};
use crate::error::{Error, Result};
use crate::nn::{self, Adam, Dense, Tensor};
use crate::rng;
use crate::sample::{ImageSample, Mask, TextSample};

/// A model with a visual encoder and a text encoder into one joint space.
///
/// Implementations must be deterministic and emit unit vectors of length
/// [`DualEncoder::embed_dim`] tagged with [`DualEncoder::model_id`].
pub trait DualEncoder {
    fn model_id(&self) -> &str;

    fn embed_dim(&self) -> usize;

    fn encode_image(&self, image: &ImageSample) -> Result<Embedding>;

    fn encode_text(&self, text: &TextSample) -> Result<Embedding>;

    /// Gradient of `⟨direction, E_v(image)⟩` with respect to every pixel
    /// value, or `None` when the model cannot differentiate.
    fn image_gradient(&self, _image: &ImageSample, _direction: &[f64]) -> Option<Result<Vec<f64>>> {
        None
    }

    fn encode_images(&self, images: &[ImageSample]) -> Result<Vec<Embedding>> {
        images.iter().map(|i| self.encode_image(i)).collect()
    }

    fn encode_texts(&self, texts: &[TextSample]) -> Result<Vec<Embedding>> {
        texts.iter().map(|t| self.encode_text(t)).collect()
    }
}

impl<T: DualEncoder + ?Sized> DualEncoder for &T {
    fn model_id(&self) -> &str {
        (**self).model_id()
    }
    fn embed_dim(&self) -> usize {
        (**self).embed_dim()
    }
    fn encode_image(&self, image: &ImageSample) -> Result<Embedding> {
        (**self).encode_image(image)
    }
    fn encode_text(&self, text: &TextSample) -> Result<Embedding> {
        (**self).encode_text(text)
    }
    fn image_gradient(&self, image: &ImageSample, direction: &[f64]) -> Option<Result<Vec<f64>>> {
        (**self).image_gradient(image, direction)
    }
    fn encode_images(&self, images: &[ImageSample]) -> Result<Vec<Embedding>> {
        (**self).encode_images(images)
    }
}

/// Index of the candidate closest to `query` in cosine distance. Ties go to
/// the lowest index.
pub fn nearest(query: &Embedding, candidates: &[Embedding]) -> Result<usize> {
    if candidates.is_empty() {
        return Err(Error::EmptyGallery);
    }
    let mut best = (0, f64::INFINITY);
    for (i, c) in candidates.iter().enumerate() {
        let d = cosine_distance(query, c)?;
        if d < best.1 {
            best = (i, d);
        }
    }
    Ok(best.0)
}

/// The id of the gallery caption whose embedding is closest to the image's.
pub fn retrieve_top1<M: DualEncoder + ?Sized>(model: &M, image: &ImageSample, gallery: &[TextSample]) -> Result<String> {
    if gallery.is_empty() {
        return Err(Error::EmptyGallery);
    }
    let query = model.encode_image(image)?;
    let texts = model.encode_texts(gallery)?;
    Ok(gallery[nearest(&query, &texts)?].id.clone())
}

/// Central finite differences of `⟨direction, E_v(image)⟩`, restricted to the
/// values under `mask` (all values when `None`). Steps are one-sided at the
/// `[0, 1]` boundary. One pair of encoder calls per value, so this is slow.
pub fn finite_difference_gradient<M: DualEncoder + ?Sized>(
    model: &M,
    image: &ImageSample,
    direction: &[f64],
    mask: Option<&Mask>,
    step: f64,
) -> Result<Vec<f64>> {
    if direction.len() != model.embed_dim() {
        return Err(Error::DimensionMismatch {
            expected: model.embed_dim(),
            actual: direction.len(),
        });
    }
    let (h, w) = image.size();
    let score = |pixels: Vec<f64>| -> Result<f64> {
        let probe = ImageSample::new(h, w, pixels, image.id())?;
        Ok(nn_dot(model.encode_image(&probe)?.values(), direction))
    };
    let base = image.pixels();
    let mut grad = vec![0.0; base.len()];
    for i in 0..base.len() {
        if mask.is_some_and(|m| !m.covers_value(i)) {
            continue;
        }
        let hi = (base[i] + step).min(1.0);
        let lo = (base[i] - step).max(0.0);
        if hi <= lo {
            continue;
        }
        let mut plus = base.to_vec();
        plus[i] = hi;
        let mut minus = base.to_vec();
        minus[i] = lo;
        grad[i] = (score(plus)? - score(minus)?) / (hi - lo);
    }
    Ok(grad)
}

fn nn_dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// The analytic gradient when the model has one, else finite differences
/// over the masked values.
pub fn image_gradient_or_fd<M: DualEncoder + ?Sized>(
    model: &M,
    image: &ImageSample,
    direction: &[f64],
    mask: Option<&Mask>,
) -> Result<Vec<f64>> {
    match model.image_gradient(image, direction) {
        Some(g) => g,
        None => finite_difference_gradient(model, image, direction, mask, 1e-4),
    }
}

/// Training settings for [`ToyDualEncoder`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyEncoderConfig {
    pub embed_dim: usize,
    pub image_hidden: usize,
    pub text_hidden: usize,
    pub token_dim: usize,
    /// Scale of the first image-layer initialization, relative to `1/√n`.
    pub input_gain: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub temperature: f64,
    /// Fraction of pairs held out for the retrieval evaluation.
    pub holdout_fraction: f64,
    pub seed: u64,
}

impl Default for ToyEncoderConfig {
    fn default() -> Self {
        Self {
            embed_dim: 32,
            image_hidden: 64,
            text_hidden: 64,
            token_dim: 16,
            input_gain: 10.0,
            epochs: 40,
            batch_size: 64,
            learning_rate: 1e-3,
            temperature: 0.02,
            holdout_fraction: 0.2,
            seed: 7,
        }
    }
}

impl ToyEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("embed_dim", self.embed_dim),
            ("image_hidden", self.image_hidden),
            ("text_hidden", self.text_hidden),
            ("token_dim", self.token_dim),
            ("batch_size", self.batch_size),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidConfig(format!("encoder.{name} must be positive")));
        }
        if !(self.temperature > 0.0) || !(self.learning_rate > 0.0) || !(self.input_gain > 0.0) {
            return Err(Error::InvalidConfig(
                "encoder temperature, learning_rate and input_gain must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(Error::InvalidConfig("encoder.holdout_fraction must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// What [`train_toy_encoder`] measured along the way.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub train_size: usize,
    pub heldout_size: usize,
    /// Top-1 image→text accuracy on the held-out pairs against every
    /// distinct caption; `None` without a held-out split.
    pub heldout_top1: Option<f64>,
    pub epoch_losses: Vec<f64>,
    pub mean_matched_similarity: f64,
    pub mean_mismatched_similarity: f64,
}

/// A two-tower perceptron encoder sized for the synthetic corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyDualEncoder {
    model_id: String,
    config: ToyEncoderConfig,
    image_size: (usize, usize),
    vocab: Vocabulary,
    img1: Dense,
    img2: Dense,
    tokens: Array2<f64>,
    txt1: Dense,
    txt2: Dense,
}

struct ImageCache {
    h: Array2<f64>,
    u: Array2<f64>,
    norms: Array1<f64>,
}

struct TextCache {
    avg: Array2<f64>,
    h: Array2<f64>,
    u: Array2<f64>,
    norms: Array1<f64>,
}

/// Id of the toy encoder trained with `seed`.
pub fn toy_model_id(seed: u64) -> String {
    format!("toy-s{seed}")
}

impl ToyDualEncoder {
    /// A freshly initialized (untrained) encoder.
    pub fn init(config: &ToyEncoderConfig, image_size: (usize, usize), vocab: Vocabulary) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(config.seed, "encoder/init", 0);
        let n = image_size.0 * image_size.1 * 3;
        let c = config;
        let img1 = Dense::init(&mut rng, n, c.image_hidden, c.input_gain / (n as f64).sqrt());
        let img2 = Dense::init(&mut rng, c.image_hidden, c.embed_dim, 1.0 / (c.image_hidden as f64).sqrt());
        let tokens = Dense::init(&mut rng, vocab.len(), c.token_dim, 1.0).w;
        let txt1 = Dense::init(&mut rng, c.token_dim, c.text_hidden, 1.0 / (c.token_dim as f64).sqrt());
        let txt2 = Dense::init(&mut rng, c.text_hidden, c.embed_dim, 1.0 / (c.text_hidden as f64).sqrt());
        Ok(Self {
            model_id: toy_model_id(c.seed),
            config: config.clone(),
            image_size,
            vocab,
            img1,
            img2,
            tokens,
            txt1,
            txt2,
        })
    }

    pub fn config(&self) -> &ToyEncoderConfig {
        &self.config
    }

    pub fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn image_size(&self) -> (usize, usize) {
        self.image_size
    }

    fn check_image(&self, image: &ImageSample) -> Result<()> {
        if image.size() != self.image_size {
            return Err(Error::ShapeMismatch {
                left: self.image_size,
                right: image.size(),
            });
        }
        Ok(())
    }

    fn image_matrix(&self, images: &[&ImageSample]) -> Result<Array2<f64>> {
        let n = self.image_size.0 * self.image_size.1 * 3;
        let mut x = Array2::zeros((images.len(), n));
        for (mut row, img) in x.rows_mut().into_iter().zip(images) {
            self.check_image(img)?;
            row.assign(&ndarray::ArrayView1::from(img.pixels()));
        }
        Ok(x)
    }

    fn forward_images(&self, x: &Array2<f64>) -> ImageCache {
        let h = nn::tanh(&self.img1.forward(x));
        let (u, norms) = nn::normalize_rows(&self.img2.forward(&h));
        ImageCache { h, u, norms }
    }

    fn forward_texts(&self, texts: &[&TextSample]) -> Result<TextCache> {
        let mut avg = Array2::zeros((texts.len(), self.config.token_dim));
        for (mut row, t) in avg.rows_mut().into_iter().zip(texts) {
            t.check_vocab(self.vocab.len())?;
            for &tok in &t.tokens {
                row += &self.tokens.row(tok);
            }
            row /= t.tokens.len() as f64;
        }
        let h = nn::tanh(&self.txt1.forward(&avg));
        let (u, norms) = nn::normalize_rows(&self.txt2.forward(&h));
        Ok(TextCache { avg, h, u, norms })
    }

    fn wrap(&self, row: ndarray::ArrayView1<f64>) -> Result<Embedding> {
        Embedding::normalized(row.to_vec(), self.model_id.clone())
    }

    fn param_sizes(&self) -> Vec<usize> {
        self.param_slices().iter().map(|p| p.len()).collect()
    }

    fn param_slices(&self) -> Vec<&[f64]> {
        [
            &self.img1.w,
            &self.img2.w,
            &self.tokens,
            &self.txt1.w,
            &self.txt2.w,
        ]
        .iter()
        .map(|a| a.as_slice().expect("standard layout"))
        .chain(
            [&self.img1.b, &self.img2.b, &self.txt1.b, &self.txt2.b]
                .iter()
                .map(|b| b.as_slice().expect("standard layout")),
        )
        .collect()
    }

    /// One contrastive step on a batch. Returns the batch loss.
    fn train_step(&mut self, opt: &mut Adam, images: &[&ImageSample], texts: &[&TextSample]) -> Result<f64> {
        let b = images.len();
        let temp = self.config.temperature;
        let x = self.image_matrix(images)?;
        let ic = self.forward_images(&x);
        let tc = self.forward_texts(texts)?;

        let logits = ic.u.dot(&tc.u.t()) / temp;
        let same = Array2::from_shape_fn((b, b), |(i, j)| f64::from(texts[i].id == texts[j].id));
        let row_t = &same / &same.sum_axis(Axis(1)).insert_axis(Axis(1));
        let col_t = &same / &same.sum_axis(Axis(0)).insert_axis(Axis(0));
        let p_row = softmax(&logits, Axis(1));
        let p_col = softmax(&logits, Axis(0));
        let loss = -((&row_t * &p_row.mapv(|p| p.max(1e-300).ln())).sum()
            + (&col_t * &p_col.mapv(|p| p.max(1e-300).ln())).sum())
            / (2.0 * b as f64);

        let g_logits = ((&p_row - &row_t) + (&p_col - &col_t)) / (2.0 * b as f64 * temp);
        let g_ui = g_logits.dot(&tc.u);
        let g_ut = g_logits.t().dot(&ic.u);

        let gz = nn::normalize_backward(&ic.u, &ic.norms, &g_ui);
        let (g_img2, gh) = self.img2.backward(&ic.h, &gz);
        let ga = nn::tanh_backward(&ic.h, &gh);
        let (g_img1, _) = self.img1.backward(&x, &ga);

        let gz = nn::normalize_backward(&tc.u, &tc.norms, &g_ut);
        let (g_txt2, gh) = self.txt2.backward(&tc.h, &gz);
        let ga = nn::tanh_backward(&tc.h, &gh);
        let (g_txt1, g_avg) = self.txt1.backward(&tc.avg, &ga);
        let mut g_tokens = Array2::<f64>::zeros(self.tokens.raw_dim());
        for (row, t) in g_avg.rows().into_iter().zip(texts) {
            let share = 1.0 / t.tokens.len() as f64;
            for &tok in &t.tokens {
                g_tokens.row_mut(tok).scaled_add(share, &row);
            }
        }

        let grads: Vec<&[f64]> = [&g_img1.w, &g_img2.w, &g_tokens, &g_txt1.w, &g_txt2.w]
            .iter()
            .map(|a| a.as_slice().expect("standard layout"))
            .chain(
                [&g_img1.b, &g_img2.b, &g_txt1.b, &g_txt2.b]
                    .iter()
                    .map(|b| b.as_slice().expect("standard layout")),
            )
            .collect();
        let mut params: Vec<&mut [f64]> = vec![
            self.img1.w.as_slice_mut().expect("standard layout"),
            self.img2.w.as_slice_mut().expect("standard layout"),
            self.tokens.as_slice_mut().expect("standard layout"),
            self.txt1.w.as_slice_mut().expect("standard layout"),
            self.txt2.w.as_slice_mut().expect("standard layout"),
            self.img1.b.as_slice_mut().expect("standard layout"),
            self.img2.b.as_slice_mut().expect("standard layout"),
            self.txt1.b.as_slice_mut().expect("standard layout"),
            self.txt2.b.as_slice_mut().expect("standard layout"),
        ];
        opt.step(&mut params, &grads);
        Ok(loss)
    }

    pub fn to_checkpoint(&self) -> EncoderCheckpoint {
        let mut tensors = Vec::new();
        tensors.extend(self.img1.to_record("image.l1"));
        tensors.extend(self.img2.to_record("image.l2"));
        tensors.push(Tensor::from_array2("text.tokens", &self.tokens));
        tensors.extend(self.txt1.to_record("text.l1"));
        tensors.extend(self.txt2.to_record("text.l2"));
        EncoderCheckpoint {
            format: ENCODER_FORMAT.into(),
            model_id: self.model_id.clone(),
            seed: self.config.seed,
            config: self.config.clone(),
            image_size: self.image_size,
            vocabulary: self.vocab.clone(),
            tensors,
        }
    }

    pub fn from_checkpoint(ckpt: EncoderCheckpoint) -> Result<Self> {
        let bad = |what: &str| Error::InvalidConfig(format!("encoder checkpoint: {what}"));
        if ckpt.format != ENCODER_FORMAT {
            return Err(bad(&format!("unsupported format `{}`", ckpt.format)));
        }
        let t = &ckpt.tensors;
        let layer = |name: &str| Dense::from_record(name, t).ok_or_else(|| bad(&format!("missing or malformed `{name}`")));
        let tokens = nn::find(t, "text.tokens")
            .and_then(Tensor::to_array2)
            .ok_or_else(|| bad("missing `text.tokens`"))?;
        let enc = Self {
            model_id: ckpt.model_id,
            image_size: ckpt.image_size,
            img1: layer("image.l1")?,
            img2: layer("image.l2")?,
            txt1: layer("text.l1")?,
            txt2: layer("text.l2")?,
            tokens,
            vocab: ckpt.vocabulary,
            config: ckpt.config,
        };
        let c = &enc.config;
        let n = enc.image_size.0 * enc.image_size.1 * 3;
        let shapes_ok = enc.img1.w.dim() == (n, c.image_hidden)
            && enc.img2.w.dim() == (c.image_hidden, c.embed_dim)
            && enc.tokens.dim() == (enc.vocab.len(), c.token_dim)
            && enc.txt1.w.dim() == (c.token_dim, c.text_hidden)
            && enc.txt2.w.dim() == (c.text_hidden, c.embed_dim);
        if !shapes_ok {
            return Err(bad("layer shapes disagree with the stored config"));
        }
        Ok(enc)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(&self.to_checkpoint())?;
        crate::error::write_file(path, text)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        Self::from_checkpoint(ckpt).map_err(|e| Error::format(path, e.to_string()))
    }
}

fn softmax(a: &Array2<f64>, axis: Axis) -> Array2<f64> {
    let max = a.map_axis(axis, |v| v.fold(f64::NEG_INFINITY, |m, &x| m.max(x)));
    let e = a - &max.insert_axis(axis);
    let e = e.mapv(f64::exp);
    let sum = e.sum_axis(axis).insert_axis(axis);
    e / &sum
}

impl DualEncoder for ToyDualEncoder {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    fn encode_image(&self, image: &ImageSample) -> Result<Embedding> {
        let x = self.image_matrix(&[image])?;
        self.wrap(self.forward_images(&x).u.row(0))
    }

    fn encode_text(&self, text: &TextSample) -> Result<Embedding> {
        self.wrap(self.forward_texts(&[text])?.u.row(0))
    }

    fn encode_images(&self, images: &[ImageSample]) -> Result<Vec<Embedding>> {
        let refs: Vec<_> = images.iter().collect();
        let u = self.forward_images(&self.image_matrix(&refs)?).u;
        u.rows().into_iter().map(|r| self.wrap(r)).collect()
    }

    fn encode_texts(&self, texts: &[TextSample]) -> Result<Vec<Embedding>> {
        let refs: Vec<_> = texts.iter().collect();
        let u = self.forward_texts(&refs)?.u;
        u.rows().into_iter().map(|r| self.wrap(r)).collect()
    }

    fn image_gradient(&self, image: &ImageSample, direction: &[f64]) -> Option<Result<Vec<f64>>> {
        Some((|| {
            if direction.len() != self.config.embed_dim {
                return Err(Error::DimensionMismatch {
                    expected: self.config.embed_dim,
                    actual: direction.len(),
                });
            }
            let x = self.image_matrix(&[image])?;
            let c = self.forward_images(&x);
            let gu = Array2::from_shape_vec((1, direction.len()), direction.to_vec()).expect("shape");
            let gz = nn::normalize_backward(&c.u, &c.norms, &gu);
            let gh = nn::matmul(&gz, &self.img2.w.t());
            let ga = nn::tanh_backward(&c.h, &gh);
            Ok(nn::matmul(&ga, &self.img1.w.t()).into_raw_vec_and_offset().0)
        })())
    }
}

/// Trains a [`ToyDualEncoder`] with a symmetric contrastive loss. Pairs that
/// share a caption are treated as positives for each other.
pub fn train_toy_encoder(pairs: &[Pair], config: &ToyEncoderConfig) -> Result<(ToyDualEncoder, TrainingSummary)> {
    config.validate()?;
    let first = pairs
        .first()
        .ok_or_else(|| Error::DegenerateCorpus("no pairs to train on".into()))?;
    let classes: BTreeSet<_> = pairs.iter().map(|p| p.text.id.as_str()).collect();
    if classes.len() < 2 {
        return Err(Error::DegenerateCorpus(format!(
            "contrastive training needs at least 2 caption classes, found {}",
            classes.len()
        )));
    }
    let mut enc = ToyDualEncoder::init(config, first.image.size(), Vocabulary::standard())?;

    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(&mut rng::stream(config.seed, "encoder/split", 0));
    let held = (pairs.len() as f64 * config.holdout_fraction).round() as usize;
    let (heldout, train) = order.split_at(held);
    if train.len() < 2 {
        return Err(Error::DegenerateCorpus("fewer than 2 training pairs after the hold-out split".into()));
    }

    let mut opt = Adam::new(config.learning_rate, &enc.param_sizes());
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut idx = train.to_vec();
    for epoch in 0..config.epochs {
        idx.shuffle(&mut rng::stream(config.seed, "encoder/shuffle", epoch as u64));
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in idx.chunks(config.batch_size) {
            let images: Vec<_> = chunk.iter().map(|&i| &pairs[i].image).collect();
            let texts: Vec<_> = chunk.iter().map(|&i| &pairs[i].text).collect();
            total += enc.train_step(&mut opt, &images, &texts)?;
            batches += 1;
        }
        epoch_losses.push(total / batches as f64);
    }

    let gallery = crate::corpus::distinct_captions(pairs.iter().map(|p| &p.text));
    let summary_on: &[usize] = if heldout.is_empty() { train } else { heldout };
    let images: Vec<ImageSample> = summary_on.iter().map(|&i| pairs[i].image.clone()).collect();
    let image_emb = enc.encode_images(&images)?;
    let text_emb = enc.encode_texts(&gallery)?;
    let mut correct = 0;
    let (mut matched, mut mismatched, mut n_mis) = (0.0, 0.0, 0usize);
    for (&i, e) in summary_on.iter().zip(&image_emb) {
        let truth = &pairs[i].text.id;
        if gallery[nearest(e, &text_emb)?].id == *truth {
            correct += 1;
        }
        for (g, t) in gallery.iter().zip(&text_emb) {
            let s = e.dot(t)?;
            if g.id == *truth {
                matched += s;
            } else {
                mismatched += s;
                n_mis += 1;
            }
        }
    }
    let summary = TrainingSummary {
        train_size: train.len(),
        heldout_size: heldout.len(),
        heldout_top1: (!heldout.is_empty()).then(|| correct as f64 / heldout.len() as f64),
        epoch_losses,
        mean_matched_similarity: matched / summary_on.len() as f64,
        mean_mismatched_similarity: mismatched / n_mis.max(1) as f64,
    };
    Ok((enc, summary))
}

/// Top-1 image→text accuracy of `model` over `pairs`, with every distinct
/// caption of `pairs` as the gallery.
pub fn retrieval_accuracy<M: DualEncoder + ?Sized>(model: &M, pairs: &[Pair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Empty("pairs"));
    }
    let gallery = crate::corpus::distinct_captions(pairs.iter().map(|p| &p.text));
    let texts = model.encode_texts(&gallery)?;
    let mut correct = 0;
    for p in pairs {
        let e = model.encode_image(&p.image)?;
        if gallery[nearest(&e, &texts)?].id == p.text.id {
            correct += 1;
        }
    }
    Ok(correct as f64 / pairs.len() as f64)
}

pub const ENCODER_FORMAT: &str = "dualmark-toy-encoder/1";

/// Serialized form of a [`ToyDualEncoder`]: layer shapes and flat parameter
/// arrays, plus the vocabulary and training settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderCheckpoint {
    pub format: String,
    pub model_id: String,
    pub seed: u64,
    pub config: ToyEncoderConfig,
    pub image_size: (usize, usize),
    pub vocabulary: Vocabulary,
    pub tensors: Vec<Tensor>,
}

/// A [`DualEncoder`] backed by a file of precomputed embeddings.
///
/// One record per line: a key, a tab, then comma-separated floats. Keys are
/// `img:<image id>` or `txt:<text id>`; blank lines and lines starting with
/// `#` are skipped. Vectors are normalized on load and must all share one
/// dimension. Lookups for ids not in the file fail with
/// [`Error::UnknownId`].
#[derive(Debug, Clone)]
pub struct EmbeddingFileAdapter {
    model_id: String,
    dim: usize,
    images: HashMap<String, Embedding>,
    texts: HashMap<String, Embedding>,
}

impl EmbeddingFileAdapter {
    pub fn load(path: &Path, model_id: impl Into<String>) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, model_id).map_err(|e| match e {
            Error::InvalidConfig(reason) => Error::format(path, reason),
            other => other,
        })
    }

    pub fn parse(text: &str, model_id: impl Into<String>) -> Result<Self> {
        let model_id = model_id.into();
        let mut dim = None;
        let (mut images, mut texts) = (HashMap::new(), HashMap::new());
        for (n, line) in text.lines().enumerate() {
            let line = line.trim_end();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |why: String| Error::InvalidConfig(format!("line {}: {why}", n + 1));
            let (key, floats) = line.split_once('\t').ok_or_else(|| bad("missing tab separator".into()))?;
            let values = floats
                .split(',')
                .map(|f| f.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| bad(e.to_string()))?;
            if *dim.get_or_insert(values.len()) != values.len() {
                return Err(bad(format!("dimension {} differs from {}", values.len(), dim.unwrap())));
            }
            let e = Embedding::normalized(values, model_id.clone()).map_err(|e| bad(e.to_string()))?;
            let (table, id) = if let Some(id) = key.strip_prefix("img:") {
                (&mut images, id)
            } else if let Some(id) = key.strip_prefix("txt:") {
                (&mut texts, id)
            } else {
                return Err(bad(format!("key `{key}` needs an `img:` or `txt:` prefix")));
            };
            if table.insert(id.to_string(), e).is_some() {
                return Err(bad(format!("duplicate key `{key}`")));
            }
        }
        Ok(Self {
            model_id,
            dim: dim.ok_or(Error::Empty("embedding file"))?,
            images,
            texts,
        })
    }
}

impl DualEncoder for EmbeddingFileAdapter {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn embed_dim(&self) -> usize {
        self.dim
    }

    fn encode_image(&self, image: &ImageSample) -> Result<Embedding> {
        self.images
            .get(image.id())
            .cloned()
            .ok_or_else(|| Error::UnknownId(format!("img:{}", image.id())))
    }

    fn encode_text(&self, text: &TextSample) -> Result<Embedding> {
        self.texts
            .get(&text.id)
            .cloned()
            .ok_or_else(|| Error::UnknownId(format!("txt:{}", text.id)))
    }
}

/// Writes embeddings of `images` and `texts` under `model` in the format
/// [`EmbeddingFileAdapter`] reads.
pub fn export_embeddings<M: DualEncoder + ?Sized>(
    model: &M,
    images: &[ImageSample],
    texts: &[TextSample],
    path: &Path,
) -> Result<()> {
    let mut out = Vec::new();
    let mut line = |key: String, e: Embedding| {
        let floats: Vec<String> = e.values().iter().map(|v| v.to_string()).collect();
        writeln!(out, "{key}\t{}", floats.join(",")).expect("write to vec");
    };
    for img in images {
        line(format!("img:{}", img.id()), model.encode_image(img)?);
    }
    for t in distinct_ids(texts) {
        line(format!("txt:{}", t.id), model.encode_text(t)?);
    }
    crate::error::write_file(path, out)
}

fn distinct_ids(texts: &[TextSample]) -> Vec<&TextSample> {
    let mut seen = BTreeSet::new();
    texts.iter().filter(|t| seen.insert(t.id.as_str())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic_corpus, SyntheticCorpusSpec};
    use proptest::prelude::*;

    fn quick_config() -> ToyEncoderConfig {
        ToyEncoderConfig {
            epochs: 3,
            ..ToyEncoderConfig::default()
        }
    }

    fn small_corpus() -> crate::corpus::Corpus {
        generate_synthetic_corpus(&SyntheticCorpusSpec {
            samples_per_class: 4,
            ..SyntheticCorpusSpec::default()
        })
        .unwrap()
    }

    struct NoGradient<'a>(&'a ToyDualEncoder);

    impl DualEncoder for NoGradient<'_> {
        fn model_id(&self) -> &str {
            self.0.model_id()
        }
        fn embed_dim(&self) -> usize {
            self.0.embed_dim()
        }
        fn encode_image(&self, image: &ImageSample) -> Result<Embedding> {
            self.0.encode_image(image)
        }
        fn encode_text(&self, text: &TextSample) -> Result<Embedding> {
            self.0.encode_text(text)
        }
    }

    #[test]
    fn degenerate_corpora_are_rejected() {
        let corpus = small_corpus();
        assert!(matches!(
            train_toy_encoder(&[], &quick_config()),
            Err(Error::DegenerateCorpus(_))
        ));
        let one_class: Vec<_> = corpus.pairs.iter().take(4).cloned().collect();
        assert!(matches!(
            train_toy_encoder(&one_class, &quick_config()),
            Err(Error::DegenerateCorpus(_))
        ));
    }

    #[test]
    fn training_is_deterministic() {
        let corpus = small_corpus();
        let (a, sa) = train_toy_encoder(&corpus.pairs, &quick_config()).unwrap();
        let (b, sb) = train_toy_encoder(&corpus.pairs, &quick_config()).unwrap();
        assert_eq!(a, b);
        assert_eq!(sa, sb);
        let img = &corpus.pairs[0].image;
        assert_eq!(a.encode_image(img).unwrap(), a.encode_image(img).unwrap());
    }

    #[test]
    fn training_lowers_the_loss() {
        let corpus = small_corpus();
        let cfg = ToyEncoderConfig {
            epochs: 15,
            ..ToyEncoderConfig::default()
        };
        let (_, s) = train_toy_encoder(&corpus.pairs, &cfg).unwrap();
        assert!(s.epoch_losses.last().unwrap() < s.epoch_losses.first().unwrap());
        assert!(s.mean_matched_similarity > s.mean_mismatched_similarity);
    }

    #[test]
    fn embeddings_are_unit_and_tagged() {
        let corpus = small_corpus();
        let enc = ToyDualEncoder::init(&quick_config(), (32, 32), Vocabulary::standard()).unwrap();
        let e = enc.encode_image(&corpus.pairs[0].image).unwrap();
        assert_eq!(e.dim(), 32);
        assert_eq!(e.space_id(), enc.model_id());
        let batch = enc.encode_images(&[corpus.pairs[0].image.clone()]).unwrap();
        assert!((batch[0].dot(&e).unwrap() - 1.0).abs() < 1e-12);
        let t = enc.encode_text(&corpus.pairs[0].text).unwrap();
        assert!((crate::embedding::l2_norm(t.values()) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn wrong_image_size_is_rejected() {
        let enc = ToyDualEncoder::init(&quick_config(), (32, 32), Vocabulary::standard()).unwrap();
        let img = ImageSample::filled(16, 16, 0.5, "x").unwrap();
        assert!(matches!(enc.encode_image(&img), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        let corpus = small_corpus();
        let enc = ToyDualEncoder::init(&quick_config(), (32, 32), Vocabulary::standard()).unwrap();
        let img = &corpus.pairs[5].image;
        let dir = enc.encode_text(&corpus.pairs[5].text).unwrap();
        let analytic = enc.image_gradient(img, dir.values()).unwrap().unwrap();
        let mut mask = Mask::empty(32, 32);
        for (r, c) in [(16, 16), (3, 7), (20, 11)] {
            mask.set(r, c, true);
        }
        let fd = finite_difference_gradient(&NoGradient(&enc), img, dir.values(), Some(&mask), 1e-5).unwrap();
        for i in 0..fd.len() {
            if mask.covers_value(i) {
                let scale = analytic[i].abs().max(1e-3);
                assert!((fd[i] - analytic[i]).abs() / scale < 1e-4, "{i}: {} vs {}", fd[i], analytic[i]);
            } else {
                assert_eq!(fd[i], 0.0);
            }
        }
        assert!(NoGradient(&enc).image_gradient(img, dir.values()).is_none());
    }

    #[test]
    fn retrieval_basics() {
        let corpus = small_corpus();
        let enc = ToyDualEncoder::init(&quick_config(), (32, 32), Vocabulary::standard()).unwrap();
        let y = &corpus.pairs[0].text;
        let img = &corpus.pairs[10].image;
        assert_eq!(retrieve_top1(&enc, img, std::slice::from_ref(y)).unwrap(), y.id);
        assert!(matches!(retrieve_top1(&enc, img, &[]), Err(Error::EmptyGallery)));
    }

    #[test]
    fn ties_go_to_the_lowest_index() {
        let q = Embedding::normalized(vec![1.0, 0.0], "t").unwrap();
        let a = Embedding::normalized(vec![0.0, 1.0], "t").unwrap();
        let b = Embedding::normalized(vec![1.0, 1.0], "t").unwrap();
        assert_eq!(nearest(&q, &[a.clone(), b.clone(), b.clone()]).unwrap(), 1);
        assert_eq!(nearest(&q, &[a.clone(), a]).unwrap(), 0);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("enc.json");
        let corpus = small_corpus();
        let (enc, _) = train_toy_encoder(&corpus.pairs, &quick_config()).unwrap();
        enc.save(&path).unwrap();
        let back = ToyDualEncoder::load(&path).unwrap();
        assert_eq!(enc, back);
        assert!(matches!(
            ToyDualEncoder::load(&dir.path().join("missing.json")),
            Err(Error::MissingArtifact(_))
        ));
    }

    #[test]
    fn adapter_round_trip_and_unknown_ids() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.tsv");
        let corpus = small_corpus();
        let enc = ToyDualEncoder::init(&quick_config(), (32, 32), Vocabulary::standard()).unwrap();
        let images: Vec<_> = corpus.pairs.iter().take(3).map(|p| p.image.clone()).collect();
        let texts: Vec<_> = corpus.pairs.iter().map(|p| p.text.clone()).collect();
        export_embeddings(&enc, &images, &texts, &path).unwrap();
        let adapter = EmbeddingFileAdapter::load(&path, "ext").unwrap();
        assert_eq!(adapter.embed_dim(), 32);
        let a = adapter.encode_image(&images[0]).unwrap();
        let b = enc.encode_image(&images[0]).unwrap();
        assert!((a.dot(&b).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(a.space_id(), "ext");
        let unknown = corpus.pairs[20].image.clone();
        assert!(matches!(adapter.encode_image(&unknown), Err(Error::UnknownId(_))));
        assert_eq!(
            retrieve_top1(&adapter, &images[0], &texts[..1]).unwrap(),
            retrieve_top1(&enc, &images[0], &texts[..1]).unwrap()
        );
    }

    #[test]
    fn adapter_rejects_malformed_files() {
        assert!(EmbeddingFileAdapter::parse("img:a\t1,0\nimg:b\t1,0,0\n", "m").is_err());
        assert!(EmbeddingFileAdapter::parse("a\t1,0\n", "m").is_err());
        assert!(EmbeddingFileAdapter::parse("img:a 1,0\n", "m").is_err());
        assert!(EmbeddingFileAdapter::parse("img:a\t0,0\n", "m").is_err());
        assert!(EmbeddingFileAdapter::parse("# only a comment\n", "m").is_err());
        let ok = EmbeddingFileAdapter::parse("# c\nimg:a\t3,4\ntxt:t\t0,2\n", "m").unwrap();
        assert_eq!(ok.images["a"].values(), &[0.6, 0.8]);
    }

    fn unit(dim: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(-1.0f64..1.0, dim).prop_filter("non-zero", |v| crate::embedding::l2_norm(v) > 1e-3)
    }

    proptest! {
        #[test]
        fn retrieval_ignores_uniform_rescaling(
            q in unit(4),
            gallery in proptest::collection::vec(unit(4), 1..6),
            scale in 0.01f64..100.0,
        ) {
            let q = Embedding::normalized(q, "p").unwrap();
            let plain: Vec<_> = gallery.iter().map(|g| Embedding::normalized(g.clone(), "p").unwrap()).collect();
            let scaled: Vec<_> = gallery
                .iter()
                .map(|g| Embedding::normalized(g.iter().map(|v| v * scale).collect(), "p").unwrap())
                .collect();
            prop_assert_eq!(nearest(&q, &plain).unwrap(), nearest(&q, &scaled).unwrap());
        }
    }
}
