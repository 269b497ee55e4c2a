//! The synthetic shapes dataset, basic-trigger sampling, and the
//! trigger-space dimension count.
//!
//! Each image holds one colored shape on a dark noisy background; its caption
//! is the fixed template `"<color> <shape> <size>"`. Captions are shared by
//! every sample of a class, so a caption's [`TextSample::id`] is its slug
//! (`red-circle-small`) and pair ids (`p00042`) identify images.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use num_bigint::BigUint;
use rand::seq::index::sample as sample_indices;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::sample::{quantize, ImageSample, TextSample};

macro_rules! attribute_enum {
    ($name:ident { $($variant:ident => $word:literal),+ $(,)? }) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(rename_all = "snake_case")]
        pub enum $name { $($variant),+ }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn word(self) -> &'static str {
                match self { $($name::$variant => $word),+ }
            }

            pub fn from_word(word: &str) -> Option<Self> {
                match word { $($word => Some($name::$variant),)+ _ => None }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.word())
            }
        }
    };
}

attribute_enum!(Shape {
    Circle => "circle",
    Square => "square",
    Triangle => "triangle",
    Diamond => "diamond",
    Cross => "cross",
    Ring => "ring",
});

attribute_enum!(Color {
    Red => "red",
    Green => "green",
    Blue => "blue",
    Yellow => "yellow",
    Cyan => "cyan",
    Magenta => "magenta",
});

attribute_enum!(SizeClass {
    Small => "small",
    Large => "large",
});

impl Color {
    fn rgb(self) -> [f64; 3] {
        match self {
            Color::Red => [0.9, 0.15, 0.15],
            Color::Green => [0.15, 0.85, 0.2],
            Color::Blue => [0.2, 0.3, 0.95],
            Color::Yellow => [0.9, 0.9, 0.1],
            Color::Cyan => [0.1, 0.85, 0.9],
            Color::Magenta => [0.85, 0.2, 0.85],
        }
    }
}

/// The closed word list every caption is tokenized against. Colors, then
/// shapes, then sizes; token ids are positions in this list.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub words: Vec<String>,
}

impl Vocabulary {
    pub fn standard() -> Self {
        let words = Color::ALL
            .iter()
            .map(|c| c.word())
            .chain(Shape::ALL.iter().map(|s| s.word()))
            .chain(SizeClass::ALL.iter().map(|s| s.word()))
            .map(String::from)
            .collect();
        Self { words }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn token(&self, word: &str) -> Option<usize> {
        self.words.iter().position(|w| w == word)
    }

    pub fn tokenize(&self, raw: &str) -> Result<Vec<usize>> {
        raw.split_whitespace()
            .map(|w| {
                self.token(w)
                    .ok_or_else(|| Error::InvalidText(format!("word `{w}` not in vocabulary")))
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Attributes {
    pub shape: Shape,
    pub color: Color,
    pub size: SizeClass,
}

impl Attributes {
    pub fn caption(&self) -> String {
        format!("{} {} {}", self.color, self.shape, self.size)
    }

    pub fn caption_id(&self) -> String {
        format!("{}-{}-{}", self.color, self.shape, self.size)
    }

    pub fn text(&self, vocab: &Vocabulary) -> TextSample {
        let raw = self.caption();
        let tokens = vocab.tokenize(&raw).expect("attribute words are in the standard vocabulary");
        TextSample::new(tokens, raw, self.caption_id()).expect("non-empty caption")
    }
}

/// Generation settings for a synthetic corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticCorpusSpec {
    pub name: String,
    pub image_size: (usize, usize),
    pub shapes: Vec<Shape>,
    pub colors: Vec<Color>,
    pub sizes: Vec<SizeClass>,
    pub samples_per_class: usize,
    /// Maximum shape-center offset from the image center, in pixels.
    pub jitter: usize,
    /// Upper bound of the uniform background noise.
    pub background_noise: f64,
    pub seed: u64,
}

impl Default for SyntheticCorpusSpec {
    fn default() -> Self {
        Self {
            name: "shapes".into(),
            image_size: (32, 32),
            shapes: vec![Shape::Circle, Shape::Square, Shape::Triangle],
            colors: vec![Color::Red, Color::Green, Color::Blue],
            sizes: vec![SizeClass::Small, SizeClass::Large],
            samples_per_class: 30,
            jitter: 1,
            background_noise: 0.08,
            seed: 7,
        }
    }
}

impl SyntheticCorpusSpec {
    /// A corpus over the colors and shapes the default spec does not use.
    pub fn disjoint_vocabulary(seed: u64) -> Self {
        Self {
            name: "shapes-alt".into(),
            shapes: vec![Shape::Diamond, Shape::Cross, Shape::Ring],
            colors: vec![Color::Yellow, Color::Cyan, Color::Magenta],
            seed,
            ..Self::default()
        }
    }

    pub fn class_count(&self) -> usize {
        self.shapes.len() * self.colors.len() * self.sizes.len()
    }

    pub fn total_pairs(&self) -> usize {
        self.class_count() * self.samples_per_class
    }

    fn half_extent(&self, size: SizeClass) -> usize {
        let side = self.image_size.0.min(self.image_size.1) as f64;
        match size {
            SizeClass::Small => (side * 0.125).round() as usize,
            SizeClass::Large => (side * 0.22).round() as usize,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let distinct = |n: usize, m: usize| n >= 2 && n == m;
        if !distinct(self.shapes.len(), self.shapes.iter().collect::<BTreeSet<_>>().len())
            || !distinct(self.colors.len(), self.colors.iter().collect::<BTreeSet<_>>().len())
            || !distinct(self.sizes.len(), self.sizes.iter().collect::<BTreeSet<_>>().len())
        {
            return Err(Error::InvalidConfig(
                "each attribute axis needs at least 2 distinct values".into(),
            ));
        }
        if self.samples_per_class == 0 {
            return Err(Error::DegenerateCorpus("samples_per_class is 0".into()));
        }
        if !(0.0..1.0).contains(&self.background_noise) {
            return Err(Error::InvalidConfig("background_noise must be in [0, 1)".into()));
        }
        let (h, w) = self.image_size;
        let largest = self.sizes.iter().map(|&s| self.half_extent(s)).max().unwrap_or(0);
        let smallest = self.sizes.iter().map(|&s| self.half_extent(s)).min().unwrap_or(0);
        let needed = 2 * (largest + self.jitter) + 1;
        if h.min(w) < needed || smallest < 2 || h < crate::sample::MIN_SIDE || w < crate::sample::MIN_SIDE {
            return Err(Error::InvalidConfig(format!(
                "image {h}x{w} too small to render a shape of half-extent {largest} with jitter {}",
                self.jitter
            )));
        }
        Ok(())
    }

    fn classes(&self) -> Vec<Attributes> {
        let mut out = Vec::with_capacity(self.class_count());
        for &shape in &self.shapes {
            for &color in &self.colors {
                for &size in &self.sizes {
                    out.push(Attributes { shape, color, size });
                }
            }
        }
        out
    }
}

/// One in-distribution image-caption pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Pair {
    pub image: ImageSample,
    pub text: TextSample,
    pub attributes: Attributes,
}

impl Pair {
    pub fn id(&self) -> &str {
        self.image.id()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub spec: SyntheticCorpusSpec,
    pub pairs: Vec<Pair>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Distinct captions in first-appearance order: the retrieval gallery.
    pub fn captions(&self) -> Vec<TextSample> {
        distinct_captions(self.pairs.iter().map(|p| &p.text))
    }

    pub fn get(&self, id: &str) -> Option<&Pair> {
        self.pairs.iter().find(|p| p.id() == id)
    }
}

pub fn distinct_captions<'a>(texts: impl IntoIterator<Item = &'a TextSample>) -> Vec<TextSample> {
    let mut seen = BTreeSet::new();
    texts
        .into_iter()
        .filter(|t| seen.insert(t.id.clone()))
        .cloned()
        .collect()
}

fn shape_covers(shape: Shape, dy: i64, dx: i64, r: i64) -> bool {
    match shape {
        Shape::Circle => dy * dy + dx * dx <= r * r,
        Shape::Square => dy.abs() <= r && dx.abs() <= r,
        Shape::Triangle => (-r..=r).contains(&dy) && 2 * dx.abs() <= dy + r,
        Shape::Diamond => dy.abs() + dx.abs() <= r,
        Shape::Cross => {
            let arm = (r / 3).max(1);
            (dy.abs() <= r && dx.abs() <= arm) || (dx.abs() <= r && dy.abs() <= arm)
        }
        Shape::Ring => {
            let d2 = (dy * dy + dx * dx) as f64;
            d2 <= (r * r) as f64 && d2 >= (0.55 * r as f64).powi(2)
        }
    }
}

fn render(spec: &SyntheticCorpusSpec, attrs: Attributes, index: usize) -> Result<ImageSample> {
    let mut rng = rng::stream(spec.seed, "corpus/render", index as u64);
    let (h, w) = spec.image_size;
    let r = spec.half_extent(attrs.size) as i64;
    let j = spec.jitter as i64;
    let cy = (h / 2) as i64 + rng.random_range(-j..=j);
    let cx = (w / 2) as i64 + rng.random_range(-j..=j);

    let mut pixels: Vec<f64> = (0..h * w * 3)
        .map(|_| rng.random_range(0.0..=spec.background_noise))
        .collect();
    let base = attrs.color.rgb();
    let tint: [f64; 3] = std::array::from_fn(|c| (base[c] + rng.random_range(-0.05..=0.05)).clamp(0.0, 1.0));
    for row in 0..h {
        for col in 0..w {
            if shape_covers(attrs.shape, row as i64 - cy, col as i64 - cx, r) {
                let at = (row * w + col) * 3;
                pixels[at..at + 3].copy_from_slice(&tint);
            }
        }
    }
    pixels.iter_mut().for_each(|v| *v = quantize(*v));
    ImageSample::new(h, w, pixels, format!("p{index:05}"))
}

/// Renders every `(class, sample)` combination. Pure in `spec`.
pub fn generate_synthetic_corpus(spec: &SyntheticCorpusSpec) -> Result<Corpus> {
    spec.validate()?;
    let vocab = Vocabulary::standard();
    let mut pairs = Vec::with_capacity(spec.total_pairs());
    for attrs in spec.classes() {
        let text = attrs.text(&vocab);
        for _ in 0..spec.samples_per_class {
            let image = render(spec, attrs, pairs.len())?;
            pairs.push(Pair {
                image,
                text: text.clone(),
                attributes: attrs,
            });
        }
    }
    Ok(Corpus {
        spec: spec.clone(),
        pairs,
    })
}

/// A uniform draw of `k` pairs without replacement.
#[derive(Debug, Clone, PartialEq)]
pub struct BasicTriggerSet {
    pub pairs: Vec<Pair>,
    pub source_dataset: String,
    pub sampling_seed: u64,
    pub k: usize,
}

pub fn sample_basic_triggers(corpus: &Corpus, k: usize, seed: u64) -> Result<BasicTriggerSet> {
    if k == 0 {
        return Err(Error::InvalidConfig("k must be at least 1".into()));
    }
    if k > corpus.len() {
        return Err(Error::InvalidConfig(format!(
            "cannot sample {k} triggers from a corpus of {}",
            corpus.len()
        )));
    }
    let mut rng = rng::stream(seed, "basics", 0);
    let pairs = sample_indices(&mut rng, corpus.len(), k)
        .into_iter()
        .map(|i| corpus.pairs[i].clone())
        .collect();
    Ok(BasicTriggerSet {
        pairs,
        source_dataset: corpus.spec.name.clone(),
        sampling_seed: seed,
        k,
    })
}

/// `C(|D|, k) · Π (n_img⁽ⁱ⁾ · n_text⁽ⁱ⁾)`, exactly.
pub fn trigger_space_dimension(dataset_size: u64, k: u64, dims: &[(u64, u64)]) -> Result<BigUint> {
    if k > dataset_size {
        return Err(Error::InvalidConfig(format!(
            "k = {k} exceeds dataset size {dataset_size}"
        )));
    }
    if dims.len() as u64 != k {
        return Err(Error::InvalidConfig(format!(
            "expected {k} per-sample dimensions, got {}",
            dims.len()
        )));
    }
    if dims.iter().any(|&(a, b)| a == 0 || b == 0) {
        return Err(Error::InvalidConfig("feature dimensions must be positive".into()));
    }
    let product = dims
        .iter()
        .fold(BigUint::from(1u32), |acc, &(a, b)| acc * BigUint::from(a) * BigUint::from(b));
    Ok(binomial(dataset_size, k) * product)
}

fn binomial(n: u64, k: u64) -> BigUint {
    let k = k.min(n - k);
    // multiplicative formula; each partial product is itself a binomial, so
    // the division is exact
    (0..k).fold(BigUint::from(1u32), |acc, i| acc * BigUint::from(n - i) / BigUint::from(i + 1))
}

/// Per-sample `(n_img, n_text)` for a basic trigger set: pixel values and
/// caption tokens.
pub fn feature_dims(basics: &BasicTriggerSet) -> Vec<(u64, u64)> {
    basics
        .pairs
        .iter()
        .map(|p| (p.image.pixels().len() as u64, p.text.tokens.len() as u64))
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestRecord {
    id: String,
    caption: String,
    text_id: String,
    tokens: Vec<usize>,
    image: String,
    shape: Shape,
    color: Color,
    size: SizeClass,
}

pub const CORPUS_MANIFEST: &str = "manifest.jsonl";
pub const CORPUS_SPEC: &str = "spec.json";

/// Writes `spec.json`, `manifest.jsonl` (one JSON record per pair), and
/// `images/<id>.ppm`.
pub fn save_corpus(corpus: &Corpus, dir: &Path) -> Result<()> {
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::write(&images, e))?;
    let spec_path = dir.join(CORPUS_SPEC);
    fs::write(&spec_path, serde_json::to_string_pretty(&corpus.spec)? + "\n")
        .map_err(|e| Error::write(&spec_path, e))?;

    let manifest_path = dir.join(CORPUS_MANIFEST);
    let file = fs::File::create(&manifest_path).map_err(|e| Error::write(&manifest_path, e))?;
    let mut out = BufWriter::new(file);
    for pair in &corpus.pairs {
        let rel = format!("images/{}.ppm", pair.id());
        pair.image.write_ppm(&dir.join(&rel))?;
        let record = ManifestRecord {
            id: pair.id().to_string(),
            caption: pair.text.raw.clone(),
            text_id: pair.text.id.clone(),
            tokens: pair.text.tokens.clone(),
            image: rel,
            shape: pair.attributes.shape,
            color: pair.attributes.color,
            size: pair.attributes.size,
        };
        serde_json::to_writer(&mut out, &record)?;
        out.write_all(b"\n").map_err(|e| Error::write(&manifest_path, e))?;
    }
    out.flush().map_err(|e| Error::write(&manifest_path, e))
}

pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let spec_path = dir.join(CORPUS_SPEC);
    let spec_text = fs::read_to_string(&spec_path).map_err(|e| Error::io(&spec_path, e))?;
    let spec: SyntheticCorpusSpec =
        serde_json::from_str(&spec_text).map_err(|e| Error::format(&spec_path, e.to_string()))?;

    let manifest_path = dir.join(CORPUS_MANIFEST);
    let file = fs::File::open(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let mut pairs = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&manifest_path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(&line)
            .map_err(|e| Error::format(&manifest_path, format!("line {}: {e}", lineno + 1)))?;
        let image = ImageSample::read_ppm(&dir.join(&rec.image), rec.id.clone())?;
        let text = TextSample::new(rec.tokens, rec.caption, rec.text_id)?;
        pairs.push(Pair {
            image,
            text,
            attributes: Attributes {
                shape: rec.shape,
                color: rec.color,
                size: rec.size,
            },
        });
    }
    Ok(Corpus { spec, pairs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small_spec(per: usize) -> SyntheticCorpusSpec {
        SyntheticCorpusSpec {
            samples_per_class: per,
            ..SyntheticCorpusSpec::default()
        }
    }

    #[test]
    fn default_spec_has_540_pairs() {
        let corpus = generate_synthetic_corpus(&SyntheticCorpusSpec::default()).unwrap();
        assert_eq!(corpus.len(), 3 * 3 * 2 * 30);
        assert_eq!(corpus.captions().len(), 18);
        let ids: BTreeSet<_> = corpus.pairs.iter().map(|p| p.id().to_string()).collect();
        assert_eq!(ids.len(), 540);
    }

    #[test]
    fn zero_samples_per_class_is_an_error() {
        assert!(generate_synthetic_corpus(&small_spec(0)).is_err());
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_synthetic_corpus(&small_spec(2)).unwrap();
        let b = generate_synthetic_corpus(&small_spec(2)).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic_corpus(&SyntheticCorpusSpec { seed: 8, ..small_spec(2) }).unwrap();
        assert_ne!(a.pairs[0].image, c.pairs[0].image);
    }

    #[test]
    fn too_small_image_is_rejected() {
        let spec = SyntheticCorpusSpec {
            image_size: (10, 10),
            jitter: 3,
            ..small_spec(1)
        };
        assert!(matches!(generate_synthetic_corpus(&spec), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn single_value_axis_is_rejected() {
        let spec = SyntheticCorpusSpec {
            shapes: vec![Shape::Circle],
            ..small_spec(1)
        };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn captions_follow_the_template() {
        let corpus = generate_synthetic_corpus(&small_spec(1)).unwrap();
        let first = &corpus.pairs[0];
        assert_eq!(first.text.raw, "red circle small");
        assert_eq!(first.text.id, "red-circle-small");
        let vocab = Vocabulary::standard();
        assert_eq!(vocab.tokenize(&first.text.raw).unwrap(), first.text.tokens);
        first.text.check_vocab(vocab.len()).unwrap();
    }

    #[test]
    fn each_image_shows_its_color() {
        let corpus = generate_synthetic_corpus(&small_spec(1)).unwrap();
        for pair in &corpus.pairs {
            let rgb = pair.attributes.color.rgb();
            let bright = pair
                .image
                .pixels()
                .chunks(3)
                .filter(|px| px.iter().zip(rgb).all(|(v, c)| (v - c).abs() < 0.06))
                .count();
            assert!(bright >= 12, "{} has only {bright} shape pixels", pair.id());
        }
    }

    #[test]
    fn sampling_without_replacement() {
        let corpus = generate_synthetic_corpus(&SyntheticCorpusSpec::default()).unwrap();
        let a = sample_basic_triggers(&corpus, 16, 3).unwrap();
        let b = sample_basic_triggers(&corpus, 16, 3).unwrap();
        assert_eq!(a, b);
        let ids: BTreeSet<_> = a.pairs.iter().map(|p| p.id()).collect();
        assert_eq!(ids.len(), 16);

        let all = sample_basic_triggers(&corpus, corpus.len(), 1).unwrap();
        let ids: BTreeSet<_> = all.pairs.iter().map(|p| p.id()).collect();
        assert_eq!(ids.len(), corpus.len());
        assert_ne!(all.pairs[0].id(), corpus.pairs[0].id(), "full draw should be shuffled");

        assert!(sample_basic_triggers(&corpus, corpus.len() + 1, 1).is_err());
        assert!(sample_basic_triggers(&corpus, 0, 1).is_err());
    }

    #[test]
    fn trigger_space_examples() {
        let dims = [(4, 3), (4, 3)];
        assert_eq!(trigger_space_dimension(5, 2, &dims).unwrap(), BigUint::from(1440u32));
        assert_eq!(trigger_space_dimension(5, 0, &[]).unwrap(), BigUint::from(1u32));
        assert_eq!(
            trigger_space_dimension(3, 3, &[(1, 1); 3]).unwrap(),
            BigUint::from(1u32)
        );
        assert!(trigger_space_dimension(2, 3, &[(1, 1); 3]).is_err());
        assert!(trigger_space_dimension(4, 1, &[(0, 1)]).is_err());
    }

    #[test]
    fn trigger_space_does_not_overflow() {
        let dims = vec![(3072u64, 3u64); 16];
        let n = trigger_space_dimension(540, 16, &dims).unwrap();
        assert!(n.bits() > 128);
    }

    #[test]
    fn corpus_persists_losslessly() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = generate_synthetic_corpus(&small_spec(1)).unwrap();
        save_corpus(&corpus, dir.path()).unwrap();
        let back = load_corpus(dir.path()).unwrap();
        assert_eq!(corpus, back);
    }

    proptest! {
        #[test]
        fn binomial_matches_pascal(n in 0u64..40, k in 0u64..40) {
            prop_assume!(k <= n);
            let mut row = vec![BigUint::from(1u32)];
            for _ in 0..n {
                let mut next = vec![BigUint::from(1u32); row.len() + 1];
                for i in 1..row.len() {
                    next[i] = &row[i - 1] + &row[i];
                }
                row = next;
            }
            prop_assert_eq!(binomial(n, k), row[k as usize].clone());
        }
    }
}
