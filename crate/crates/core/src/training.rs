//! Retrieval training: hinge loss over cosine similarities with online
//! hard-negative mining, language-variant sampling, pixel augmentation, and
//! the epoch loop with checkpoints and a JSONL metrics log.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::checkpoint;
use crate::config::{AugmentationConfig, RunConfig};
use crate::corpus::{
    compose_recipe_text, select_split, ComponentMask, ImageData, PairedSample, SplitManifest,
    Variant,
};
use crate::corpus::{Language, ALL_LANGUAGES};
use crate::encoders::{
    encode_image_forward, encode_recipe_forward, image_input_tensor, init_retrieval_params,
};
use crate::params::{Adam, ParamSet, TapeVars};
use crate::rng::seeded_sub;
use crate::tensor::{cosine_similarity, Real, Tensor};
use crate::tokenizer::{encode_recipe, Vocabulary};
use crate::{Error, Result};

/// Hinge on the cosine gap: `max(cos(a,n) - cos(a,p) + margin, 0)`.
pub fn triplet_loss<F: Real>(
    tape: &Tape<F>,
    anchor: Var,
    positive: Var,
    negative: Var,
    margin: F,
) -> Var {
    let cos_ap = tape.cosine(anchor, positive);
    let cos_an = tape.cosine(anchor, negative);
    tape.relu(tape.add_scalar(tape.sub(cos_an, cos_ap), margin))
}

/// Hard negatives mined inside a batch, both directions.
#[derive(Debug, Clone, PartialEq)]
pub struct MiningReport {
    /// For each text anchor `i`, the image index with the highest similarity
    /// among `j != i` (ties break to the lowest index).
    pub text_to_image: Vec<usize>,
    /// For each image anchor `i`, the text index chosen the same way.
    pub image_to_text: Vec<usize>,
    /// Candidate pairs examined: `2 * B * (B - 1)`.
    pub candidates: usize,
}

/// Scans the full in-batch similarity matrix on plain values and picks, for
/// every anchor, the most similar non-matching item of the other modality.
pub fn mine_hard_negatives<F: Real>(
    text: &[Vec<F>],
    image: &[Vec<F>],
) -> MiningReport {
    let b = text.len();
    assert_eq!(b, image.len(), "modalities must pair up");
    assert!(b >= 2, "mining needs at least two pairs");
    let mut sim = vec![F::zero(); b * b];
    for i in 0..b {
        for j in 0..b {
            sim[i * b + j] = cosine_similarity(&text[i], &image[j]);
        }
    }
    let argmax_excluding = |values: &dyn Fn(usize) -> F, skip: usize| -> usize {
        let mut best: Option<(usize, F)> = None;
        for j in (0..b).filter(|&j| j != skip) {
            let v = values(j);
            match best {
                Some((_, bv)) if v <= bv => {}
                _ => best = Some((j, v)),
            }
        }
        best.unwrap().0
    };
    let text_to_image = (0..b)
        .map(|i| argmax_excluding(&|j: usize| sim[i * b + j], i))
        .collect();
    let image_to_text = (0..b)
        .map(|i| argmax_excluding(&|j: usize| sim[j * b + i], i))
        .collect();
    MiningReport { text_to_image, image_to_text, candidates: 2 * b * (b - 1) }
}

/// Batch objective: the mean hinge over all `2B` anchors (every text against
/// its image and mined image negative, every image against its text and
/// mined text negative). Mining happens on plain values; gradients flow only
/// through each anchor, its positive, and its chosen negative.
pub fn batch_loss<F: Real>(
    tape: &Tape<F>,
    text: &[Var],
    image: &[Var],
    margin: F,
) -> (Var, MiningReport) {
    let b = text.len();
    assert_eq!(b, image.len(), "modalities must pair up");
    let text_values: Vec<Vec<F>> =
        text.iter().map(|&v| (*tape.value(v)).clone().into_data()).collect();
    let image_values: Vec<Vec<F>> =
        image.iter().map(|&v| (*tape.value(v)).clone().into_data()).collect();
    let report = mine_hard_negatives(&text_values, &image_values);
    let mut terms = Vec::with_capacity(2 * b);
    for i in 0..b {
        terms.push(triplet_loss(tape, text[i], image[i], image[report.text_to_image[i]], margin));
    }
    for i in 0..b {
        terms.push(triplet_loss(tape, image[i], text[i], text[report.image_to_text[i]], margin));
    }
    (tape.mean_of(&terms), report)
}

/// Two-stage variant sampling. Stage 2 draws the language uniformly from all
/// five; stage 1 spreads the EN pick uniformly over the original and the two
/// back-translated paraphrases. A missing variant falls back to the original
/// (logged at debug level).
pub fn select_language_variant<'a>(
    sample: &'a PairedSample,
    stage1: bool,
    stage2: bool,
    rng: &mut ChaCha8Rng,
) -> &'a crate::corpus::RecipeDocument {
    let language = if stage2 {
        ALL_LANGUAGES[rng.gen_range(0..ALL_LANGUAGES.len())]
    } else {
        Language::En
    };
    if language != Language::En {
        match sample.variant(Variant::Translation, language) {
            Some(doc) => return doc,
            None => {
                log::debug!("sample {}: no {} translation, using original", sample.id, language);
                return sample.original();
            }
        }
    }
    if stage1 {
        let pick = rng.gen_range(0..3);
        let wanted = [None, Some(Variant::BackTranslationDe), Some(Variant::BackTranslationRu)][pick];
        if let Some(variant) = wanted {
            match sample.variant(variant, Language::En) {
                Some(doc) => return doc,
                None => {
                    log::debug!(
                        "sample {}: no {variant:?} paraphrase, using original",
                        sample.id
                    );
                }
            }
        }
    }
    sample.original()
}

// ----- pixel augmentation -----

/// Bilinear resize of a `[3, h, w]` volume to `[3, out_h, out_w]`. The
/// identity size is an exact no-op.
pub fn resize_bilinear<F: Real>(pixels: &Tensor<F>, out_h: usize, out_w: usize) -> Tensor<F> {
    let shape = pixels.shape();
    assert_eq!(shape.len(), 3);
    let (c_n, h, w) = (shape[0], shape[1], shape[2]);
    let mut data = vec![F::zero(); c_n * out_h * out_w];
    let scale_y = h as f64 / out_h as f64;
    let scale_x = w as f64 / out_w as f64;
    for c in 0..c_n {
        for y in 0..out_h {
            for x in 0..out_w {
                let sy = ((y as f64 + 0.5) * scale_y - 0.5).clamp(0.0, h as f64 - 1.0);
                let sx = ((x as f64 + 0.5) * scale_x - 0.5).clamp(0.0, w as f64 - 1.0);
                data[(c * out_h + y) * out_w + x] = sample_bilinear(pixels, c, sy, sx);
            }
        }
    }
    Tensor::new(vec![c_n, out_h, out_w], data)
}

fn sample_bilinear<F: Real>(pixels: &Tensor<F>, c: usize, y: f64, x: f64) -> F {
    let shape = pixels.shape();
    let (h, w) = (shape[1], shape[2]);
    let y0 = y.floor().clamp(0.0, h as f64 - 1.0) as usize;
    let x0 = x.floor().clamp(0.0, w as f64 - 1.0) as usize;
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let fy = y - y0 as f64;
    let fx = x - x0 as f64;
    let at = |yy: usize, xx: usize| pixels.data()[(c * h + yy) * w + xx].to_f64();
    let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
    let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
    F::from_f64(top * (1.0 - fy) + bottom * fy)
}

/// Rotation about the center by `degrees`, bilinear sampling with edge
/// clamping. Zero degrees reproduces the input exactly.
pub fn rotate_bilinear<F: Real>(pixels: &Tensor<F>, degrees: f64) -> Tensor<F> {
    let shape = pixels.shape();
    assert_eq!(shape.len(), 3);
    let (c_n, h, w) = (shape[0], shape[1], shape[2]);
    let theta = degrees.to_radians();
    let (sin, cos) = theta.sin_cos();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let mut data = vec![F::zero(); c_n * h * w];
    for c in 0..c_n {
        for y in 0..h {
            for x in 0..w {
                let dy = y as f64 - cy;
                let dx = x as f64 - cx;
                let sy = (cos * dy + sin * dx + cy).clamp(0.0, h as f64 - 1.0);
                let sx = (-sin * dy + cos * dx + cx).clamp(0.0, w as f64 - 1.0);
                data[(c * h + y) * w + x] = sample_bilinear(pixels, c, sy, sx);
            }
        }
    }
    Tensor::new(vec![c_n, h, w], data)
}

/// Crop a `size`-square window with the given top-left corner.
pub fn crop<F: Real>(pixels: &Tensor<F>, y0: usize, x0: usize, size: usize) -> Tensor<F> {
    let shape = pixels.shape();
    let (c_n, h, w) = (shape[0], shape[1], shape[2]);
    assert!(y0 + size <= h && x0 + size <= w, "crop window out of bounds");
    let mut data = Vec::with_capacity(c_n * size * size);
    for c in 0..c_n {
        for y in 0..size {
            data.extend_from_slice(
                &pixels.data()[(c * h + y0 + y) * w + x0..(c * h + y0 + y) * w + x0 + size],
            );
        }
    }
    Tensor::new(vec![c_n, size, size], data)
}

/// Horizontal mirror.
pub fn hflip<F: Real>(pixels: &Tensor<F>) -> Tensor<F> {
    let shape = pixels.shape();
    let (c_n, h, w) = (shape[0], shape[1], shape[2]);
    let mut data = vec![F::zero(); c_n * h * w];
    for c in 0..c_n {
        for y in 0..h {
            for x in 0..w {
                data[(c * h + y) * w + x] = pixels.data()[(c * h + y) * w + (w - 1 - x)];
            }
        }
    }
    Tensor::new(vec![c_n, h, w], data)
}

/// Training-time pixel augmentation: resize, random rotation, random crop,
/// random horizontal flip, then clamp to `[0, 1]`. Output is
/// `crop_size`-square.
pub fn augment_pixels<F: Real>(
    pixels: &Tensor<F>,
    cfg: &AugmentationConfig,
    rng: &mut ChaCha8Rng,
) -> Tensor<F> {
    let resized = resize_bilinear(pixels, cfg.resize_size, cfg.resize_size);
    let degrees = rng.gen_range(-cfg.rotation_degrees..=cfg.rotation_degrees);
    let rotated = rotate_bilinear(&resized, degrees);
    let play = cfg.resize_size - cfg.crop_size;
    let (y0, x0) = if play == 0 {
        (0, 0)
    } else {
        (rng.gen_range(0..=play), rng.gen_range(0..=play))
    };
    let cropped = crop(&rotated, y0, x0, cfg.crop_size);
    let flipped = if rng.gen_range(0.0..1.0) < cfg.flip_probability {
        hflip(&cropped)
    } else {
        cropped
    };
    flipped.map(|v| {
        let x = v.to_f64().clamp(0.0, 1.0);
        F::from_f64(x)
    })
}

/// Piecewise-constant schedule: the initial rate up to the switch epoch, the
/// late rate from the switch epoch on (epochs count from 1).
pub fn learning_rate_for_epoch(epoch: usize, initial: f64, after: f64, switch_epoch: usize) -> f64 {
    if epoch < switch_epoch {
        initial
    } else {
        after
    }
}

// ----- metrics log -----

/// Append-only JSONL run log. The first record echoes the format version and
/// the resolved configuration; every later record is one epoch. No
/// timestamps, so identical runs produce identical bytes.
pub struct MetricsLog {
    file: std::io::BufWriter<std::fs::File>,
    path: PathBuf,
}

impl MetricsLog {
    pub fn create(path: &Path, config: &RunConfig) -> Result<MetricsLog> {
        let file = std::fs::File::create(path)?;
        let mut log = MetricsLog { file: std::io::BufWriter::new(file), path: path.to_path_buf() };
        log.append(&serde_json::json!({
            "format_version": checkpoint::FORMAT_VERSION,
            "config": config.to_json(),
        }))?;
        Ok(log)
    }

    pub fn append(&mut self, record: &serde_json::Value) -> Result<()> {
        serde_json::to_writer(&mut self.file, record)?;
        self.file.write_all(b"\n")?;
        self.file.flush()?;
        Ok(())
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

// ----- the epoch loop -----

pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub batches: usize,
    pub learning_rate: f64,
}

pub struct TrainSummary {
    pub epochs: usize,
    pub final_loss: f64,
    pub log_path: PathBuf,
    pub final_checkpoint: PathBuf,
}

pub struct Trainer<'a> {
    pub config: &'a RunConfig,
    pub vocab: &'a Vocabulary,
    pub params: ParamSet<f32>,
    adam: Adam<f32>,
    epoch: usize,
}

impl<'a> Trainer<'a> {
    /// Fresh trainer with seeded initial parameters. `pixel_size` enables the
    /// pixel frontend for pixel corpora.
    pub fn new(config: &'a RunConfig, vocab: &'a Vocabulary, pixel_size: Option<usize>) -> Self {
        let params =
            init_retrieval_params(&config.model, vocab.len(), pixel_size, config.seed);
        let t = &config.training;
        let adam = Adam::with_hyper(
            t.lr_initial as f32,
            t.adam_beta1 as f32,
            t.adam_beta2 as f32,
            t.adam_eps as f32,
        );
        Trainer { config, vocab, params, adam, epoch: 0 }
    }

    /// Resume from checkpointed parameters at a given epoch.
    pub fn resume(
        config: &'a RunConfig,
        vocab: &'a Vocabulary,
        params: ParamSet<f32>,
        epoch: usize,
    ) -> Self {
        let t = &config.training;
        let adam = Adam::with_hyper(
            t.lr_initial as f32,
            t.adam_beta1 as f32,
            t.adam_beta2 as f32,
            t.adam_eps as f32,
        );
        Trainer { config, vocab, params, adam, epoch }
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// One pass over the training split: shuffled batches, variant sampling,
    /// augmentation, mined-hinge loss, one optimizer step per batch.
    pub fn run_epoch(&mut self, train: &[&PairedSample]) -> Result<EpochStats> {
        self.epoch += 1;
        let epoch = self.epoch;
        let cfg = self.config;
        let lr = learning_rate_for_epoch(
            epoch,
            cfg.training.lr_initial,
            cfg.training.lr_after,
            cfg.training.lr_switch_epoch,
        );
        self.adam.lr = lr as f32;

        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut seeded_sub(cfg.seed, "train-shuffle", epoch as u64));
        let mut variant_rng = seeded_sub(cfg.seed, "train-variant", epoch as u64);
        let mut augment_rng = seeded_sub(cfg.seed, "train-augment", epoch as u64);

        let mut total = 0.0f64;
        let mut batches = 0usize;
        for (batch_idx, chunk) in order.chunks(cfg.training.batch_size).enumerate() {
            // A lone sample has no in-batch negative to mine.
            if chunk.len() < 2 {
                continue;
            }
            let tape: Tape<f32> = Tape::new();
            let vars = TapeVars::bind(&tape, &self.params);
            let mut text_embs = Vec::with_capacity(chunk.len());
            let mut image_embs = Vec::with_capacity(chunk.len());
            for &idx in chunk {
                let sample = train[idx];
                let doc = select_language_variant(
                    sample,
                    cfg.augmentation.language_stage1,
                    cfg.augmentation.language_stage2,
                    &mut variant_rng,
                );
                let text = compose_recipe_text(doc, ComponentMask::ALL);
                let seq = encode_recipe(&text, self.vocab, cfg.model.max_len);
                let encoded = encode_recipe_forward(&tape, &vars, &cfg.model, &seq);
                text_embs.push(encoded.embedding);

                let input = match &sample.images[0].data {
                    ImageData::Feature(_) => image_input_tensor(&sample.images[0].data),
                    ImageData::Pixels(p) => {
                        let augmented =
                            augment_pixels(&p.cast::<f32>(), &cfg.augmentation, &mut augment_rng);
                        resize_bilinear(&augmented, cfg.model.image_size, cfg.model.image_size)
                    }
                };
                let image =
                    encode_image_forward(&tape, &vars, &cfg.model, tape.constant(input), false);
                image_embs.push(image.embedding);
            }
            let (loss, _) =
                batch_loss(&tape, &text_embs, &image_embs, cfg.training.margin as f32);
            let loss_value = tape.scalar_value(loss) as f64;
            if !loss_value.is_finite() {
                return Err(Error::numerical(format!(
                    "non-finite loss in epoch {epoch}, batch {batch_idx}"
                )));
            }
            let grads = vars.grads_by_name(&tape.backward(loss));
            self.adam.step(&mut self.params, &grads);
            total += loss_value;
            batches += 1;
        }
        Ok(EpochStats {
            epoch,
            mean_loss: if batches > 0 { total / batches as f64 } else { 0.0 },
            batches,
            learning_rate: lr,
        })
    }
}

/// Unaugmented retrieval check on a held-out split: median rank and recall@1
/// for text-to-image over the full split.
pub fn quick_retrieval_check(
    params: &ParamSet<f32>,
    config: &RunConfig,
    vocab: &Vocabulary,
    samples: &[&PairedSample],
) -> (f64, f64) {
    let text_embs: Vec<Vec<f32>> = samples
        .iter()
        .map(|s| {
            let text = compose_recipe_text(s.original(), ComponentMask::ALL);
            let seq = encode_recipe(&text, vocab, config.model.max_len);
            crate::encoders::embed_recipe(params, &config.model, &seq).0
        })
        .collect();
    let image_embs: Vec<Vec<f32>> = samples
        .iter()
        .map(|s| eval_image_embedding(params, config, &s.images[0].data).0)
        .collect();
    let n = samples.len();
    let mut ranks = Vec::with_capacity(n);
    let mut hits = 0usize;
    for i in 0..n {
        let own = cosine_similarity(&text_embs[i], &image_embs[i]);
        let ahead = (0..n)
            .filter(|&j| j != i)
            .filter(|&j| cosine_similarity(&text_embs[i], &image_embs[j]) > own)
            .count();
        ranks.push((ahead + 1) as f64);
        if ahead == 0 {
            hits += 1;
        }
    }
    ranks.sort_by(f64::total_cmp);
    let median = if n % 2 == 1 {
        ranks[n / 2]
    } else {
        0.5 * (ranks[n / 2 - 1] + ranks[n / 2])
    };
    (median, hits as f64 / n as f64)
}

/// Deterministic evaluation-time image embedding: pixels resize straight to
/// the model input size (no augmentation). Returns (embedding, statistics
/// activation).
pub fn eval_image_embedding(
    params: &ParamSet<f32>,
    config: &RunConfig,
    data: &ImageData,
) -> (Vec<f32>, Vec<f32>) {
    match data {
        ImageData::Feature(_) => crate::encoders::embed_image(params, &config.model, data),
        ImageData::Pixels(p) => {
            let resized = resize_bilinear(&p.cast::<f32>(), config.model.image_size, config.model.image_size);
            crate::encoders::embed_image(params, &config.model, &ImageData::Pixels(resized))
        }
    }
}

fn checkpoint_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("checkpoint-{epoch}.bin"))
}

/// Full training run: initial checkpoint, one checkpoint and one log record
/// per epoch; per-epoch validation metrics ride along in the log.
pub fn train_retrieval(
    corpus: &[PairedSample],
    manifest: &SplitManifest,
    vocab: &Vocabulary,
    config: &RunConfig,
    out_dir: &Path,
) -> Result<TrainSummary> {
    std::fs::create_dir_all(out_dir)?;
    let train = select_split(corpus, manifest, "train")?;
    let validation = select_split(corpus, manifest, "validation")?;
    if train.len() < 2 {
        return Err(Error::data("training split needs at least 2 samples"));
    }
    let (mode, dim) = crate::corpus::corpus_image_mode(corpus)?;
    let pixel_size = match mode {
        crate::corpus::ImageMode::Pixels => Some(config.model.image_size),
        crate::corpus::ImageMode::Feature => {
            if dim != config.model.image_input_dim {
                return Err(Error::config(format!(
                    "corpus feature dimension {dim} does not match image_input_dim {}",
                    config.model.image_input_dim
                )));
            }
            None
        }
    };

    let mut trainer = Trainer::new(config, vocab, pixel_size);
    let mut log = MetricsLog::create(&out_dir.join("metrics.jsonl"), config)?;
    let config_json = config.to_json();
    checkpoint::save(&checkpoint_path(out_dir, 0), &config_json, &trainer.params)?;

    let mut final_loss = 0.0;
    for _ in 0..config.training.epochs {
        let stats = trainer.run_epoch(&train)?;
        let (val_medr, val_r1) = if validation.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            quick_retrieval_check(&trainer.params, config, vocab, &validation)
        };
        log.append(&serde_json::json!({
            "epoch": stats.epoch,
            "loss": stats.mean_loss,
            "batches": stats.batches,
            "learning_rate": stats.learning_rate,
            "validation_medr": if val_medr.is_nan() { serde_json::Value::Null } else { val_medr.into() },
            "validation_r1": if val_r1.is_nan() { serde_json::Value::Null } else { val_r1.into() },
        }))?;
        checkpoint::save(&checkpoint_path(out_dir, stats.epoch), &config_json, &trainer.params)?;
        final_loss = stats.mean_loss;
        log::info!(
            "epoch {} loss {:.4} val medR {:.1} val R@1 {:.3}",
            stats.epoch,
            stats.mean_loss,
            val_medr,
            val_r1
        );
    }
    Ok(TrainSummary {
        epochs: trainer.epoch,
        final_loss,
        log_path: log.path().to_path_buf(),
        final_checkpoint: checkpoint_path(out_dir, trainer.epoch),
    })
}
