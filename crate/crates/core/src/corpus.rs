//! Paired image/recipe corpora: the JSONL data model with multilingual
//! variants, deterministic synthetic toy corpora, and stratified splitting.
//!
//! A corpus file holds one `PairedSample` per line. Images carry either a
//! precomputed feature vector or a path to a small PNG; a corpus uses exactly
//! one of the two modes throughout.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng::seeded_sub;
use crate::tensor::Tensor;
use crate::tokenizer::Vocabulary;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Language {
    #[serde(rename = "EN")]
    En,
    #[serde(rename = "DE")]
    De,
    #[serde(rename = "RU")]
    Ru,
    #[serde(rename = "FR")]
    Fr,
    #[serde(rename = "KO")]
    Ko,
}

pub const ALL_LANGUAGES: [Language; 5] =
    [Language::En, Language::De, Language::Ru, Language::Fr, Language::Ko];

impl Language {
    pub fn code(self) -> &'static str {
        match self {
            Language::En => "EN",
            Language::De => "DE",
            Language::Ru => "RU",
            Language::Fr => "FR",
            Language::Ko => "KO",
        }
    }

    pub fn parse(text: &str) -> Result<Language> {
        match text.to_ascii_uppercase().as_str() {
            "EN" => Ok(Language::En),
            "DE" => Ok(Language::De),
            "RU" => Ok(Language::Ru),
            "FR" => Ok(Language::Fr),
            "KO" => Ok(Language::Ko),
            other => Err(Error::config(format!("unknown language {other:?}"))),
        }
    }
}

impl fmt::Display for Language {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Original,
    BackTranslationDe,
    BackTranslationRu,
    Translation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecipeDocument {
    pub id: String,
    pub title: String,
    pub ingredients: Vec<String>,
    pub instructions: Vec<String>,
    pub language: Language,
    pub variant: Variant,
    pub class_label: u32,
    pub image_ids: Vec<String>,
}

impl RecipeDocument {
    pub fn is_empty(&self) -> bool {
        self.title.is_empty() && self.ingredients.is_empty() && self.instructions.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ImageData {
    Feature(Vec<f32>),
    /// `[3, h, w]` values in `[0, 1]`.
    Pixels(Tensor<f32>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub id: String,
    pub data: ImageData,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairedSample {
    pub id: String,
    pub class_label: u32,
    pub recipes: Vec<RecipeDocument>,
    pub images: Vec<ImageRecord>,
}

impl PairedSample {
    /// The EN original document (exactly one exists in a valid sample).
    pub fn original(&self) -> &RecipeDocument {
        self.recipes
            .iter()
            .find(|r| r.variant == Variant::Original)
            .expect("valid sample has an original document")
    }

    pub fn variant(&self, variant: Variant, language: Language) -> Option<&RecipeDocument> {
        self.recipes
            .iter()
            .find(|r| r.variant == variant && r.language == language)
    }

    /// Evaluation always uses the first listed image.
    pub fn first_image(&self) -> &ImageRecord {
        &self.images[0]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImageMode {
    Feature,
    Pixels,
}

/// The single image mode a corpus uses, with its dimension (feature length or
/// square pixel size).
pub fn corpus_image_mode(samples: &[PairedSample]) -> Result<(ImageMode, usize)> {
    let first = samples
        .iter()
        .flat_map(|s| s.images.iter())
        .next()
        .ok_or_else(|| Error::data("corpus has no images"))?;
    let (mode, dim) = match &first.data {
        ImageData::Feature(f) => (ImageMode::Feature, f.len()),
        ImageData::Pixels(p) => (ImageMode::Pixels, p.shape()[1]),
    };
    for sample in samples {
        for image in &sample.images {
            match (&image.data, mode) {
                (ImageData::Feature(f), ImageMode::Feature) if f.len() == dim => {}
                (ImageData::Pixels(p), ImageMode::Pixels)
                    if p.shape() == [3, dim, dim] => {}
                _ => {
                    return Err(Error::data(format!(
                        "image {} does not match the corpus image mode",
                        image.id
                    )))
                }
            }
        }
    }
    Ok((mode, dim))
}

// ----- JSONL wire format -----

#[derive(Serialize, Deserialize)]
struct SampleLine {
    id: String,
    class_label: u32,
    recipes: Vec<RecipeLine>,
    images: Vec<ImageLine>,
}

#[derive(Serialize, Deserialize)]
struct RecipeLine {
    language: Language,
    variant: Variant,
    title: String,
    ingredients: Vec<String>,
    instructions: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct ImageLine {
    id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    feature: Option<Vec<f32>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pixels_path: Option<String>,
}

fn validate_sample(sample: &PairedSample) -> Result<()> {
    if sample.id.is_empty() {
        return Err(Error::data("sample id must be non-empty"));
    }
    if sample.recipes.is_empty() {
        return Err(Error::data(format!("sample {}: no recipe documents", sample.id)));
    }
    if sample.images.is_empty() {
        return Err(Error::data(format!("sample {}: no images", sample.id)));
    }
    for doc in &sample.recipes {
        if doc.is_empty() {
            return Err(Error::data(format!(
                "sample {}: document with empty title, ingredients, and instructions",
                sample.id
            )));
        }
        let consistent = match doc.variant {
            Variant::Original
            | Variant::BackTranslationDe
            | Variant::BackTranslationRu => doc.language == Language::En,
            Variant::Translation => doc.language != Language::En,
        };
        if !consistent {
            return Err(Error::data(format!(
                "sample {}: variant/language inconsistency ({:?} in {})",
                sample.id, doc.variant, doc.language
            )));
        }
        if doc.class_label != sample.class_label {
            return Err(Error::data(format!(
                "sample {}: document class label differs from the sample's",
                sample.id
            )));
        }
    }
    let originals = sample
        .recipes
        .iter()
        .filter(|r| r.variant == Variant::Original)
        .count();
    if originals != 1 {
        return Err(Error::data(format!(
            "sample {}: expected exactly one original document, found {originals}",
            sample.id
        )));
    }
    Ok(())
}

/// Loads a JSONL corpus; pixel images are read from PNGs relative to the
/// corpus file. Samples come back ordered by id.
pub fn load_corpus(path: &Path) -> Result<Vec<PairedSample>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::data(format!("cannot read corpus {}: {e}", path.display())))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut samples = Vec::new();
    let mut seen_ids = HashSet::new();
    let mut mode: Option<ImageMode> = None;
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed: SampleLine = serde_json::from_str(line).map_err(|e| {
            Error::data(format!("corpus line {}: malformed JSON: {e}", lineno + 1))
        })?;
        if !seen_ids.insert(parsed.id.clone()) {
            return Err(Error::data(format!(
                "corpus line {}: duplicate sample id {}",
                lineno + 1,
                parsed.id
            )));
        }
        let image_ids: Vec<String> = parsed.images.iter().map(|i| i.id.clone()).collect();
        let mut images = Vec::new();
        for img in parsed.images {
            let data = match (img.feature, img.pixels_path) {
                (Some(feature), None) => ImageData::Feature(feature),
                (None, Some(rel)) => ImageData::Pixels(read_png(&base.join(&rel))?),
                _ => {
                    return Err(Error::data(format!(
                        "corpus line {}: image {} must have exactly one of feature/pixels_path",
                        lineno + 1,
                        img.id
                    )))
                }
            };
            let this_mode = match data {
                ImageData::Feature(_) => ImageMode::Feature,
                ImageData::Pixels(_) => ImageMode::Pixels,
            };
            match mode {
                None => mode = Some(this_mode),
                Some(m) if m == this_mode => {}
                Some(_) => {
                    return Err(Error::data(format!(
                        "corpus line {}: mixed feature/pixel image modes",
                        lineno + 1
                    )))
                }
            }
            images.push(ImageRecord { id: img.id, data });
        }
        let recipes = parsed
            .recipes
            .into_iter()
            .enumerate()
            .map(|(k, r)| RecipeDocument {
                id: format!("{}:{}", parsed.id, k),
                title: r.title,
                ingredients: r.ingredients,
                instructions: r.instructions,
                language: r.language,
                variant: r.variant,
                class_label: parsed.class_label,
                image_ids: image_ids.clone(),
            })
            .collect();
        let sample = PairedSample {
            id: parsed.id,
            class_label: parsed.class_label,
            recipes,
            images,
        };
        validate_sample(&sample)
            .map_err(|e| Error::data(format!("corpus line {}: {e}", lineno + 1)))?;
        samples.push(sample);
    }
    samples.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(samples)
}

/// Writes a JSONL corpus; pixel images go to `pixels/<image_id>.png` next to
/// the corpus file.
pub fn save_corpus(path: &Path, samples: &[PairedSample]) -> Result<()> {
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut out = String::new();
    for sample in samples {
        validate_sample(sample)?;
        let mut images = Vec::new();
        for img in &sample.images {
            match &img.data {
                ImageData::Feature(f) => images.push(ImageLine {
                    id: img.id.clone(),
                    feature: Some(f.clone()),
                    pixels_path: None,
                }),
                ImageData::Pixels(p) => {
                    let rel = format!("pixels/{}.png", img.id);
                    let file = base.join(&rel);
                    std::fs::create_dir_all(file.parent().unwrap())?;
                    write_png(&file, p)?;
                    images.push(ImageLine {
                        id: img.id.clone(),
                        feature: None,
                        pixels_path: Some(rel),
                    });
                }
            }
        }
        let line = SampleLine {
            id: sample.id.clone(),
            class_label: sample.class_label,
            recipes: sample
                .recipes
                .iter()
                .map(|r| RecipeLine {
                    language: r.language,
                    variant: r.variant,
                    title: r.title.clone(),
                    ingredients: r.ingredients.clone(),
                    instructions: r.instructions.clone(),
                })
                .collect(),
            images,
        };
        out.push_str(&serde_json::to_string(&line)?);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[cfg(feature = "png")]
fn read_png(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path)
        .map_err(|e| Error::data(format!("cannot read image {}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0f32; 3 * h * w];
    for (x, y, pixel) in img.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = pixel.0[c] as f32 / 255.0;
        }
    }
    Ok(Tensor::new(vec![3, h, w], data))
}

#[cfg(not(feature = "png"))]
fn read_png(path: &Path) -> Result<Tensor<f32>> {
    Err(Error::data(format!(
        "pixel corpora require the png feature (reading {})",
        path.display()
    )))
}

#[cfg(feature = "png")]
pub fn write_png(path: &Path, pixels: &Tensor<f32>) -> Result<()> {
    let shape = pixels.shape();
    assert_eq!(shape.len(), 3);
    assert_eq!(shape[0], 3);
    let (h, w) = (shape[1], shape[2]);
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = [0, 1, 2].map(|c| {
                (pixels.data()[(c * h + y) * w + x].clamp(0.0, 1.0) * 255.0).round() as u8
            });
            img.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    img.save(path)
        .map_err(|e| Error::data(format!("cannot write image {}: {e}", path.display())))?;
    Ok(())
}

#[cfg(not(feature = "png"))]
pub fn write_png(path: &Path, _pixels: &Tensor<f32>) -> Result<()> {
    Err(Error::data(format!(
        "pixel corpora require the png feature (writing {})",
        path.display()
    )))
}

// ----- recipe text assembly -----

/// Which recipe components take part in encoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComponentMask {
    pub title: bool,
    pub ingredients: bool,
    pub instructions: bool,
}

impl ComponentMask {
    pub const ALL: ComponentMask =
        ComponentMask { title: true, ingredients: true, instructions: true };

    pub fn is_empty(self) -> bool {
        !(self.title || self.ingredients || self.instructions)
    }

    /// Parses "title,ingredients,instructions" subsets.
    pub fn parse(text: &str) -> Result<ComponentMask> {
        let mut mask = ComponentMask { title: false, ingredients: false, instructions: false };
        for part in text.split(',') {
            match part.trim() {
                "title" => mask.title = true,
                "ingredients" => mask.ingredients = true,
                "instructions" => mask.instructions = true,
                "" => {}
                other => {
                    return Err(Error::config(format!("unknown recipe component {other:?}")))
                }
            }
        }
        if mask.is_empty() {
            return Err(Error::config("component mask must name at least one component"));
        }
        Ok(mask)
    }
}

impl fmt::Display for ComponentMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts = Vec::new();
        if self.title {
            parts.push("title");
        }
        if self.ingredients {
            parts.push("ingredients");
        }
        if self.instructions {
            parts.push("instructions");
        }
        f.write_str(&parts.join(","))
    }
}

/// Flattens the unmasked components, in order title → ingredients →
/// instructions, into one space-separated string.
pub fn compose_recipe_text(doc: &RecipeDocument, mask: ComponentMask) -> String {
    assert!(!mask.is_empty(), "component mask must be non-empty");
    let mut parts: Vec<&str> = Vec::new();
    if mask.title && !doc.title.is_empty() {
        parts.push(&doc.title);
    }
    if mask.ingredients {
        parts.extend(doc.ingredients.iter().map(String::as_str).filter(|l| !l.is_empty()));
    }
    if mask.instructions {
        parts.extend(doc.instructions.iter().map(String::as_str).filter(|l| !l.is_empty()));
    }
    parts.join(" ")
}

// ----- toy corpus generation -----

const TAG_COUNT: usize = 12;
const TAGS_PER_SAMPLE: usize = 3;
const NOISE_COUNT: usize = 5;
const COMMON_COUNT: usize = 2;

const INGREDIENT_WORDS: [&str; 32] = [
    "tomato", "basil", "salmon", "ginger", "beef", "lentil", "cocoa", "apricot", "chili",
    "fennel", "oat", "prawn", "date", "yam", "kale", "plum", "miso", "thyme", "squid", "barley",
    "fig", "leek", "trout", "cumin", "pork", "mint", "crab", "rye", "olive", "sage", "duck",
    "corn",
];
const TITLE_WORDS: [&str; 8] =
    ["stew", "salad", "roast", "soup", "tart", "curry", "bake", "broth"];
const TAG_WORDS: [&str; TAG_COUNT] = [
    "crisp", "smoky", "tangy", "sweet", "spicy", "mild", "salty", "rich", "fresh", "dry",
    "warm", "light",
];
const NOISE_WORDS: [&str; NOISE_COUNT] = ["bowl", "pan", "knife", "board", "jar"];
const COMMON_WORDS: [&str; COMMON_COUNT] = ["mix", "serve"];
const LANGUAGE_SUFFIX: [&str; 5] = ["", "heit", "ov", "eau", "ni"];

fn words_per_language(n_classes: usize) -> usize {
    2 * n_classes + n_classes.div_ceil(2) + TAG_COUNT + NOISE_COUNT + COMMON_COUNT
}

fn en_word(kind_offset: usize, index: usize) -> String {
    // Past the hand-written inventories, fall back to generated names.
    match kind_offset {
        0 => INGREDIENT_WORDS
            .get(index)
            .map(|w| w.to_string())
            .unwrap_or_else(|| format!("ing{index}")),
        1 => TITLE_WORDS
            .get(index)
            .map(|w| w.to_string())
            .unwrap_or_else(|| format!("dish{index}")),
        2 => TAG_WORDS[index].to_string(),
        3 => NOISE_WORDS[index].to_string(),
        _ => COMMON_WORDS[index].to_string(),
    }
}

/// Deterministic vocabulary sized for `n_classes`: five disjoint per-language
/// word sets, padded with filler tokens to a round length (200 for 8 classes).
pub fn toy_vocabulary(n_classes: usize) -> Vocabulary {
    let mut tokens = vec!["[PAD]".to_string(), "[UNK]".to_string(), "[CLS]".to_string()];
    for suffix in LANGUAGE_SUFFIX {
        let counts = [2 * n_classes, n_classes.div_ceil(2), TAG_COUNT, NOISE_COUNT, COMMON_COUNT];
        for (kind, &count) in counts.iter().enumerate() {
            for i in 0..count {
                tokens.push(format!("{}{}", en_word(kind, i), suffix));
            }
        }
    }
    let target = tokens.len().div_ceil(50) * 50;
    for i in 0..target - tokens.len() {
        tokens.push(format!("filler{i}"));
    }
    Vocabulary::from_tokens(tokens).expect("toy vocabulary is valid")
}

/// Word roles carved out of a vocabulary: per language, ingredient words (2
/// per class), title words (one per class pair), tag words, noise words, and
/// common words, all disjoint.
struct WordTable {
    languages: Vec<LanguageWords>,
}

struct LanguageWords {
    ingredients: Vec<String>,
    titles: Vec<String>,
    tags: Vec<String>,
    noise: Vec<String>,
    common: Vec<String>,
}

impl WordTable {
    fn allocate(vocab: &Vocabulary, n_classes: usize) -> Result<WordTable> {
        let words: Vec<String> = vocab.word_tokens().map(str::to_string).collect();
        let per_language = words_per_language(n_classes);
        if words.len() < 5 * per_language {
            return Err(Error::data(format!(
                "vocabulary too small to allocate disjoint per-class and per-language word \
                 sets: need {} word tokens, have {}",
                5 * per_language,
                words.len()
            )));
        }
        let mut languages = Vec::new();
        for l in 0..5 {
            let base = l * per_language;
            let mut cursor = base;
            let take = |n: usize, cursor: &mut usize| {
                let slice = words[*cursor..*cursor + n].to_vec();
                *cursor += n;
                slice
            };
            languages.push(LanguageWords {
                ingredients: take(2 * n_classes, &mut cursor),
                titles: take(n_classes.div_ceil(2), &mut cursor),
                tags: take(TAG_COUNT, &mut cursor),
                noise: take(NOISE_COUNT, &mut cursor),
                common: take(COMMON_COUNT, &mut cursor),
            });
        }
        Ok(WordTable { languages })
    }

    fn lang(&self, language: Language) -> &LanguageWords {
        let idx = ALL_LANGUAGES.iter().position(|&l| l == language).unwrap();
        &self.languages[idx]
    }
}

/// The k-th 3-element subset of `0..TAG_COUNT` in lexicographic order.
fn tag_triple(k: usize) -> [usize; TAGS_PER_SAMPLE] {
    let mut remaining = k;
    for a in 0..TAG_COUNT {
        for b in a + 1..TAG_COUNT {
            for c in b + 1..TAG_COUNT {
                if remaining == 0 {
                    return [a, b, c];
                }
                remaining -= 1;
            }
        }
    }
    panic!("tag triple index {k} out of range");
}

struct ToyPlan {
    class: u32,
    tags: [usize; TAGS_PER_SAMPLE],
}

fn toy_plans(seed: u64, n_samples: usize, n_classes: usize) -> Result<Vec<ToyPlan>> {
    if n_classes < 2 {
        return Err(Error::config("toy corpus needs at least 2 classes"));
    }
    if n_samples < 2 * n_classes {
        return Err(Error::config(
            "toy corpus needs at least 2 samples per class (n_samples >= 2 * n_classes)",
        ));
    }
    let per_class = n_samples.div_ceil(n_classes);
    let triples = TAG_COUNT * (TAG_COUNT - 1) * (TAG_COUNT - 2) / 6;
    if per_class > triples {
        return Err(Error::config(format!(
            "toy corpus supports at most {triples} samples per class"
        )));
    }
    // Distinct tag triples within each class give every sample a recoverable
    // identity among its class peers.
    let mut class_triples: Vec<Vec<usize>> = Vec::new();
    for c in 0..n_classes {
        let mut order: Vec<usize> = (0..triples).collect();
        order.shuffle(&mut seeded_sub(seed, "toy-tags", c as u64));
        class_triples.push(order);
    }
    let mut used = vec![0usize; n_classes];
    Ok((0..n_samples)
        .map(|i| {
            let class = i % n_classes;
            let k = class_triples[class][used[class]];
            used[class] += 1;
            ToyPlan { class: class as u32, tags: tag_triple(k) }
        })
        .collect())
}

fn toy_documents(
    plan: &ToyPlan,
    sample_idx: usize,
    table: &WordTable,
    seed: u64,
    image_ids: &[String],
    sample_id: &str,
) -> Vec<RecipeDocument> {
    let c = plan.class as usize;
    let mut rng = seeded_sub(seed, "toy-text", sample_idx as u64);
    let mut docs = Vec::new();

    // Word-index layout shared by all languages: the substitution tables map
    // position to position, so every language realizes the same pattern.
    let noise = |rng: &mut rand_chacha::ChaCha8Rng| rng.gen_range(0..NOISE_COUNT);
    let base_noise = [noise(&mut rng), noise(&mut rng), noise(&mut rng)];

    let lines = |w: &LanguageWords, noise_idx: [usize; 3]| -> (String, Vec<String>, Vec<String>) {
        let title = format!("{} {}", w.titles[c / 2], w.noise[noise_idx[0]]);
        let ingredients = vec![
            format!("{} {}", w.ingredients[2 * c], w.tags[plan.tags[0]]),
            format!("{} {}", w.ingredients[2 * c + 1], w.tags[plan.tags[1]]),
            format!("{} {}", w.tags[plan.tags[2]], w.common[0]),
        ];
        let instructions = vec![
            format!(
                "{} {} {} {}",
                w.common[1], w.ingredients[2 * c], w.tags[plan.tags[0]], w.noise[noise_idx[1]]
            ),
            format!("{} {} {}", w.common[0], w.ingredients[2 * c + 1], w.noise[noise_idx[2]]),
        ];
        (title, ingredients, instructions)
    };

    let push = |docs: &mut Vec<RecipeDocument>,
                    language: Language,
                    variant: Variant,
                    text: (String, Vec<String>, Vec<String>)| {
        docs.push(RecipeDocument {
            id: format!("{sample_id}:{}", docs.len()),
            title: text.0,
            ingredients: text.1,
            instructions: text.2,
            language,
            variant,
            class_label: plan.class,
            image_ids: image_ids.to_vec(),
        });
    };

    let en = table.lang(Language::En);
    push(&mut docs, Language::En, Variant::Original, lines(en, base_noise));

    // Back-translations: same class and tag words, re-drawn noise, shuffled
    // word order inside each line (a paraphrase stand-in).
    for variant in [Variant::BackTranslationDe, Variant::BackTranslationRu] {
        let alt_noise = [noise(&mut rng), noise(&mut rng), noise(&mut rng)];
        let (title, ingredients, instructions) = lines(en, alt_noise);
        let shuffle_line = |line: &str, rng: &mut rand_chacha::ChaCha8Rng| {
            let mut parts: Vec<&str> = line.split(' ').collect();
            parts.shuffle(rng);
            parts.join(" ")
        };
        let text = (
            shuffle_line(&title, &mut rng),
            ingredients.iter().map(|l| shuffle_line(l, &mut rng)).collect(),
            instructions.iter().map(|l| shuffle_line(l, &mut rng)).collect(),
        );
        push(&mut docs, Language::En, variant, text);
    }

    for language in [Language::De, Language::Ru, Language::Fr, Language::Ko] {
        push(
            &mut docs,
            language,
            Variant::Translation,
            lines(table.lang(language), base_noise),
        );
    }
    docs
}

const TOY_NOISE_RADIUS: f64 = 0.1;
const TOY_TAG_SCALE: f64 = 0.5;

fn toy_feature(
    plan: &ToyPlan,
    sample_idx: usize,
    seed: u64,
    feature_dim: usize,
    n_classes: usize,
) -> Vec<f32> {
    let mut rng = seeded_sub(seed, "toy-feature", sample_idx as u64);
    let mut feature = vec![0.0f32; feature_dim];
    // Orthonormal class centroid plus orthogonal tag directions: class and
    // sample identity live in disjoint coordinates.
    feature[plan.class as usize] = 1.0;
    let tag_dims = feature_dim - n_classes;
    let scale = TOY_TAG_SCALE / (TAGS_PER_SAMPLE as f64).sqrt();
    for &t in &plan.tags {
        feature[n_classes + t % tag_dims] += scale as f32;
    }
    // Noise inside a ball of radius TOY_NOISE_RADIUS.
    let direction: Vec<f64> = (0..feature_dim)
        .map(|_| rng.gen_range(-1.0f64..1.0))
        .collect();
    let norm = direction.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-9);
    let radius = TOY_NOISE_RADIUS * rng.gen_range(0.0f64..1.0);
    for (f, d) in feature.iter_mut().zip(&direction) {
        *f += (d / norm * radius) as f32;
    }
    feature
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let c = v * s;
    let hp = (h % 360.0) / 60.0;
    let x = c * (1.0 - ((hp % 2.0) - 1.0).abs());
    let (r, g, b) = match hp as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Class-colored image with bright blocks marking the sample's tags; the
/// bottom row stays pure class color. Values are quantized to 8 bits so PNG
/// round-trips are exact.
fn toy_pixels(plan: &ToyPlan, sample_idx: usize, seed: u64, size: usize, n_classes: usize) -> Tensor<f32> {
    let mut rng = seeded_sub(seed, "toy-pixels", sample_idx as u64);
    let color = hsv_to_rgb(plan.class as f64 / n_classes as f64 * 360.0, 0.8, 0.55);
    let mut data = vec![0.0f32; 3 * size * size];
    let cell = size / 4;
    for y in 0..size {
        for x in 0..size {
            let slot = if y < 3 * cell { Some((y / cell) * 4 + x / cell) } else { None };
            let lit = slot.is_some_and(|s| plan.tags.contains(&s));
            for c in 0..3 {
                let mut value = color[c];
                if lit {
                    value = value * 0.4 + 0.6;
                }
                value += rng.gen_range(-0.03f64..0.03);
                let q = (value.clamp(0.0, 1.0) * 255.0).round() / 255.0;
                data[(c * size + y) * size + x] = q as f32;
            }
        }
    }
    Tensor::new(vec![3, size, size], data)
}

fn build_toy_corpus(
    seed: u64,
    n_samples: usize,
    n_classes: usize,
    vocab: &Vocabulary,
    image: impl Fn(&ToyPlan, usize) -> ImageData,
) -> Result<Vec<PairedSample>> {
    let table = WordTable::allocate(vocab, n_classes)?;
    let plans = toy_plans(seed, n_samples, n_classes)?;
    let width = n_samples.to_string().len().max(4);
    Ok(plans
        .iter()
        .enumerate()
        .map(|(i, plan)| {
            let sample_id = format!("toy{i:0width$}");
            let image_id = format!("{sample_id}-img0");
            let image_ids = vec![image_id.clone()];
            PairedSample {
                id: sample_id.clone(),
                class_label: plan.class,
                recipes: toy_documents(plan, i, &table, seed, &image_ids, &sample_id),
                images: vec![ImageRecord { id: image_id, data: image(plan, i) }],
            }
        })
        .collect())
}

/// Deterministic synthetic corpus with precomputed image features: a
/// learnable cross-modal correspondence with class structure, per-sample tag
/// identity, five language variants, and two back-translated paraphrases.
pub fn generate_toy_corpus(
    seed: u64,
    n_samples: usize,
    n_classes: usize,
    vocab: &Vocabulary,
    feature_dim: usize,
) -> Result<Vec<PairedSample>> {
    if feature_dim < n_classes + TAG_COUNT {
        return Err(Error::config(format!(
            "feature_dim must be at least n_classes + {TAG_COUNT}"
        )));
    }
    build_toy_corpus(seed, n_samples, n_classes, vocab, |plan, i| {
        ImageData::Feature(toy_feature(plan, i, seed, feature_dim, n_classes))
    })
}

/// Pixel-mode variant of [`generate_toy_corpus`] for the synthesis path:
/// images are small class-colored PNG-ready arrays instead of feature
/// vectors.
pub fn generate_toy_corpus_pixels(
    seed: u64,
    n_samples: usize,
    n_classes: usize,
    vocab: &Vocabulary,
    size: usize,
) -> Result<Vec<PairedSample>> {
    if !size.is_multiple_of(4) || size < 8 {
        return Err(Error::config("pixel size must be a multiple of 4, at least 8"));
    }
    build_toy_corpus(seed, n_samples, n_classes, vocab, |plan, i| {
        ImageData::Pixels(toy_pixels(plan, i, seed, size, n_classes))
    })
}

// ----- splitting -----

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
}

impl SplitManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<SplitManifest> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::data(format!("cannot read manifest {}: {e}", path.display())))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn split(&self, name: &str) -> Result<&[String]> {
        match name {
            "train" => Ok(&self.train),
            "validation" => Ok(&self.validation),
            "test" => Ok(&self.test),
            other => Err(Error::config(format!("unknown split {other:?}"))),
        }
    }
}

/// Largest-remainder apportionment of `n` into three parts, adjusted so no
/// part is empty (feasible whenever n >= 3).
fn apportion(n: usize, fractions: (f64, f64, f64)) -> [usize; 3] {
    let f = [fractions.0, fractions.1, fractions.2];
    let mut counts = [0usize; 3];
    let mut remainders = [0.0f64; 3];
    for i in 0..3 {
        let target = n as f64 * f[i];
        counts[i] = target.floor() as usize;
        remainders[i] = target - target.floor();
    }
    let mut left = n - counts.iter().sum::<usize>();
    while left > 0 {
        let mut best = 0;
        for i in 1..3 {
            if remainders[i] > remainders[best] + 1e-12 {
                best = i;
            }
        }
        counts[best] += 1;
        remainders[best] = -1.0;
        left -= 1;
    }
    while let Some(empty) = counts.iter().position(|&c| c == 0) {
        let largest = (0..3).max_by_key(|&i| counts[i]).unwrap();
        if counts[largest] < 2 {
            break;
        }
        counts[largest] -= 1;
        counts[empty] += 1;
    }
    counts
}

/// Deterministic stratified-by-class split into train/validation/test.
pub fn split_corpus(
    samples: &[PairedSample],
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<SplitManifest> {
    let (a, b, c) = fractions;
    if a <= 0.0 || b <= 0.0 || c <= 0.0 {
        return Err(Error::config("split fractions must be positive"));
    }
    if (a + b + c - 1.0).abs() > 1e-9 {
        return Err(Error::config("split fractions must sum to 1"));
    }
    let mut classes: Vec<u32> = samples.iter().map(|s| s.class_label).collect();
    classes.sort_unstable();
    classes.dedup();
    let mut manifest =
        SplitManifest { train: Vec::new(), validation: Vec::new(), test: Vec::new() };
    for class in classes {
        let mut ids: Vec<&String> = samples
            .iter()
            .filter(|s| s.class_label == class)
            .map(|s| &s.id)
            .collect();
        if ids.len() < 3 {
            return Err(Error::data(format!(
                "class {class} has {} samples, fewer than the 3 splits",
                ids.len()
            )));
        }
        ids.shuffle(&mut seeded_sub(seed, "split", class as u64));
        let counts = apportion(ids.len(), fractions);
        let (train, rest) = ids.split_at(counts[0]);
        let (validation, test) = rest.split_at(counts[1]);
        manifest.train.extend(train.iter().map(|s| s.to_string()));
        manifest.validation.extend(validation.iter().map(|s| s.to_string()));
        manifest.test.extend(test.iter().map(|s| s.to_string()));
    }
    manifest.train.sort();
    manifest.validation.sort();
    manifest.test.sort();
    Ok(manifest)
}

/// Samples of one split, in manifest order.
pub fn select_split<'a>(
    samples: &'a [PairedSample],
    manifest: &SplitManifest,
    name: &str,
) -> Result<Vec<&'a PairedSample>> {
    let ids = manifest.split(name)?;
    let mut out = Vec::with_capacity(ids.len());
    for id in ids {
        let sample = samples
            .iter()
            .find(|s| &s.id == id)
            .ok_or_else(|| Error::data(format!("manifest id {id} not present in corpus")))?;
        out.push(sample);
    }
    Ok(out)
}
