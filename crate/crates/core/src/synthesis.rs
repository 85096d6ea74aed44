//! Conditional image synthesis on top of the frozen retrieval space:
//! a conditioning-augmentation subnetwork with a KL regularizer, a small
//! upsampling generator, a convolutional discriminator with real/fake and
//! class heads, and a supervision term pulling generated images toward
//! their recipe and image embeddings.

use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autograd::{Tape, Var};
use crate::checkpoint;
use crate::config::RunConfig;
use crate::corpus::{
    compose_recipe_text, corpus_image_mode, ComponentMask, ImageData, ImageMode, PairedSample,
    SplitManifest,
};
use crate::encoders::{encode_image_forward, has_pixel_frontend};
use crate::params::{glorot_init, uniform_init, Adam, ParamSet, TapeVars};
use crate::rng::seeded_sub;
use crate::tensor::{Real, Tensor};
use crate::tokenizer::{encode_recipe, Vocabulary};
use crate::training::{
    eval_image_embedding, learning_rate_for_epoch, resize_bilinear, MetricsLog,
};
use crate::{Error, Result};

/// Slope of the discriminator's leaky rectifier.
pub const DISC_LEAK: f64 = 0.2;
/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before logs.
pub const PROB_EPS: f64 = 1e-7;

/// Resolved dimensions of the synthesis pair.
#[derive(Debug, Clone)]
pub struct GanDims {
    /// Generator output resolution (square).
    pub image_size: usize,
    /// Spatial size before the two upsampling stages.
    pub base: usize,
    pub gen_channels: usize,
    pub disc_channels: usize,
    pub d_ca: usize,
    pub d_z: usize,
    pub d_share: usize,
    pub n_classes: usize,
    /// Flattened discriminator trunk width.
    pub flat: usize,
    /// Integer factor taking generator output to the image-encoder input.
    pub encoder_upsample: usize,
}

fn conv_out(size: usize) -> usize {
    // 4x4 kernel, stride 2, padding 1.
    (size + 2 - 4) / 2 + 1
}

impl GanDims {
    pub fn new(config: &RunConfig, n_classes: usize) -> Result<GanDims> {
        let syn = &config.synthesis;
        let s = syn.gen_image_size;
        if s < 8 || !s.is_multiple_of(4) {
            return Err(Error::config(format!(
                "generator image size {s} must be a multiple of 4 and at least 8"
            )));
        }
        if n_classes < 2 {
            return Err(Error::config("synthesis needs at least 2 classes"));
        }
        if !config.model.image_size.is_multiple_of(s) {
            return Err(Error::config(format!(
                "image encoder input {} is not a multiple of the generator output {s}",
                config.model.image_size
            )));
        }
        let trunk_spatial = conv_out(conv_out(conv_out(s)));
        Ok(GanDims {
            image_size: s,
            base: s / 4,
            gen_channels: syn.gen_channels,
            disc_channels: syn.disc_channels,
            d_ca: syn.d_ca,
            d_z: syn.d_z,
            d_share: config.model.d_share,
            n_classes,
            flat: 4 * syn.disc_channels * trunk_spatial * trunk_spatial,
            encoder_upsample: config.model.image_size / s,
        })
    }
}

/// Number of classes a parameter set's class head was built for.
pub fn gan_n_classes<F: Real>(params: &ParamSet<F>) -> Result<usize> {
    if !params.contains("disc.class.b") {
        return Err(Error::data("parameter set has no class head"));
    }
    Ok(params.get("disc.class.b").shape()[0])
}

fn conv_init<F: Real>(
    shape: [usize; 4],
    rng: &mut impl Rng,
) -> Tensor<F> {
    let fan_in = shape[1] * shape[2] * shape[3];
    let fan_out = shape[0] * shape[2] * shape[3];
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    uniform_init(shape.to_vec(), -limit, limit, rng)
}

/// Fresh synthesis parameters: conditioning-augmentation affine maps, the
/// generator, and the discriminator, under the `ca.`, `gen.`, and `disc.`
/// name prefixes.
pub fn init_gan_params<F: Real>(
    config: &RunConfig,
    n_classes: usize,
    seed: u64,
) -> Result<ParamSet<F>> {
    let dims = GanDims::new(config, n_classes)?;
    let mut params = ParamSet::new();
    let mut stream = 0u64;
    let mut next = |label: &'static str| {
        let _ = label;
        stream += 1;
        seeded_sub(seed, "gan-init", stream)
    };
    let zeros = |n: usize| Tensor::<F>::zeros(vec![n]);

    let rng = &mut next("ca");
    params.insert("ca.mu.w", glorot_init(dims.d_share, dims.d_ca, rng));
    params.insert("ca.mu.b", zeros(dims.d_ca));
    params.insert("ca.logvar.w", glorot_init(dims.d_share, dims.d_ca, rng));
    params.insert("ca.logvar.b", zeros(dims.d_ca));

    let gc = dims.gen_channels;
    let fc_out = gc * dims.base * dims.base;
    let rng = &mut next("gen");
    params.insert("gen.fc.w", glorot_init(dims.d_ca + dims.d_z, fc_out, rng));
    params.insert("gen.fc.b", zeros(fc_out));
    params.insert("gen.conv1.k", conv_init([gc, gc, 3, 3], rng));
    params.insert("gen.conv1.b", zeros(gc));
    params.insert("gen.conv2.k", conv_init([gc, gc, 3, 3], rng));
    params.insert("gen.conv2.b", zeros(gc));
    params.insert("gen.out.k", conv_init([3, gc, 3, 3], rng));
    params.insert("gen.out.b", zeros(3));

    let dc = dims.disc_channels;
    let rng = &mut next("disc");
    params.insert("disc.conv1.k", conv_init([dc, 3, 4, 4], rng));
    params.insert("disc.conv1.b", zeros(dc));
    params.insert("disc.conv2.k", conv_init([2 * dc, dc, 4, 4], rng));
    params.insert("disc.conv2.b", zeros(2 * dc));
    params.insert("disc.conv3.k", conv_init([4 * dc, 2 * dc, 4, 4], rng));
    params.insert("disc.conv3.b", zeros(4 * dc));
    params.insert("disc.real.w", glorot_init(dims.flat, 1, rng));
    params.insert("disc.real.b", zeros(1));
    params.insert("disc.class.w", glorot_init(dims.flat, n_classes, rng));
    params.insert("disc.class.b", zeros(n_classes));
    Ok(params)
}

fn linear<F: Real>(tape: &Tape<F>, x: Var, w: Var, b: Var) -> Var {
    tape.add_row(tape.matmul(x, w), b)
}

/// Conditioning code and the Gaussian it was drawn from.
pub struct CaOutput {
    pub t: Var,
    pub mu: Var,
    pub sigma: Var,
}

/// Reparameterized conditioning draw: `t = mu(v) + sigma(v) * noise` with
/// `sigma = exp(0.5 * logvar)`, so variance stays positive by construction.
pub fn ca_forward<F: Real>(
    tape: &Tape<F>,
    vars: &TapeVars,
    v: Var,
    noise: &Tensor<F>,
) -> CaOutput {
    let mu = linear(tape, v, vars.v("ca.mu.w"), vars.v("ca.mu.b"));
    let logvar = linear(tape, v, vars.v("ca.logvar.w"), vars.v("ca.logvar.b"));
    let sigma = tape.exp(tape.scale(logvar, F::from_f64(0.5)));
    let t = tape.add(mu, tape.mul(sigma, tape.constant(noise.clone())));
    CaOutput { t, mu, sigma }
}

/// Divergence of the diagonal Gaussian `N(mu, sigma^2)` from the standard
/// normal: `0.5 * sum(mu^2 + sigma^2 - log sigma^2 - 1)`.
pub fn kl_loss<F: Real>(tape: &Tape<F>, mu: Var, sigma: Var) -> Result<Var> {
    if tape.value(sigma).data().iter().any(|&s| s <= F::zero()) {
        return Err(Error::numerical("non-positive sigma in divergence term"));
    }
    let mu2 = tape.mul(mu, mu);
    let s2 = tape.mul(sigma, sigma);
    let inner = tape.add_scalar(
        tape.sub(tape.add(mu2, s2), tape.ln(s2)),
        F::from_f64(-1.0),
    );
    Ok(tape.scale(tape.sum(inner), F::from_f64(0.5)))
}

/// Decodes a conditioning code and noise vector to a `[3, s, s]` image in
/// (0, 1): affine to a coarse volume, two nearest-upsample + convolution
/// stages, squashed output convolution.
pub fn generator_forward<F: Real>(
    tape: &Tape<F>,
    vars: &TapeVars,
    dims: &GanDims,
    t: Var,
    z: &Tensor<F>,
) -> Var {
    let tz = tape.concat(t, tape.constant(z.clone()));
    let h = tape.relu(linear(tape, tz, vars.v("gen.fc.w"), vars.v("gen.fc.b")));
    let mut vol = tape.reshape(h, vec![dims.gen_channels, dims.base, dims.base]);
    for name in ["gen.conv1", "gen.conv2"] {
        let up = tape.upsample_nearest(vol, 2);
        vol = tape.relu(tape.conv2d(
            up,
            vars.v(&format!("{name}.k")),
            vars.v(&format!("{name}.b")),
            1,
            1,
        ));
    }
    tape.sigmoid(tape.conv2d(vol, vars.v("gen.out.k"), vars.v("gen.out.b"), 1, 1))
}

/// Discriminator heads: probability the input is real, and class logits.
pub struct DiscOutput {
    pub real_prob: Var,
    pub class_logits: Var,
}

pub fn discriminator_forward<F: Real>(
    tape: &Tape<F>,
    vars: &TapeVars,
    dims: &GanDims,
    image: Var,
) -> DiscOutput {
    let leak = F::from_f64(DISC_LEAK);
    let mut h = image;
    for name in ["disc.conv1", "disc.conv2", "disc.conv3"] {
        h = tape.leaky_relu(
            tape.conv2d(h, vars.v(&format!("{name}.k")), vars.v(&format!("{name}.b")), 2, 1),
            leak,
        );
    }
    let flat = tape.reshape(h, vec![1, dims.flat]);
    DiscOutput {
        real_prob: tape.sigmoid(linear(tape, flat, vars.v("disc.real.w"), vars.v("disc.real.b"))),
        class_logits: linear(tape, flat, vars.v("disc.class.w"), vars.v("disc.class.b")),
    }
}

fn clamp_prob<F: Real>(tape: &Tape<F>, p: Var) -> Var {
    tape.clamp(p, F::from_f64(PROB_EPS), F::from_f64(1.0 - PROB_EPS))
}

/// Discriminator objective on one (real, fake) pair: push the real
/// probability up on real input and down on fake input, and classify both
/// as the true class. The fake must enter as a constant (no generator
/// gradients).
pub fn discriminator_loss<F: Real>(
    tape: &Tape<F>,
    vars: &TapeVars,
    dims: &GanDims,
    real: Var,
    fake: Var,
    class_label: usize,
    lambda_c: f64,
) -> Result<Var> {
    if class_label >= dims.n_classes {
        return Err(Error::data(format!(
            "class label {class_label} out of {} classes",
            dims.n_classes
        )));
    }
    let d_real = discriminator_forward(tape, vars, dims, real);
    let d_fake = discriminator_forward(tape, vars, dims, fake);
    let p_real = clamp_prob(tape, d_real.real_prob);
    let p_fake = clamp_prob(tape, d_fake.real_prob);
    let adv = tape.scale(
        tape.sum(tape.add(tape.ln(p_real), tape.ln(tape.one_minus(p_fake)))),
        F::from_f64(-1.0),
    );
    let targets = [class_label];
    let ce = tape.add(
        tape.cross_entropy_logits(d_real.class_logits, &targets),
        tape.cross_entropy_logits(d_fake.class_logits, &targets),
    );
    Ok(tape.add(adv, tape.scale(ce, F::from_f64(lambda_c))))
}

/// The two cosine-distance pulls on a generated image's embedding:
/// `(1 - cos(f, v2)) + (1 - cos(f, v1))`.
pub fn supervision_terms<F: Real>(
    tape: &Tape<F>,
    generated_embedding: Var,
    v1: &[F],
    v2: &[F],
) -> Var {
    let v1c = tape.constant(Tensor::vector(v1.to_vec()));
    let v2c = tape.constant(Tensor::vector(v2.to_vec()));
    tape.add(
        tape.one_minus(tape.cosine(generated_embedding, v2c)),
        tape.one_minus(tape.cosine(generated_embedding, v1c)),
    )
}

/// Embeds a generated image with the frozen retrieval tower (upsampling to
/// its input size when needed) and applies [`supervision_terms`]. Gradients
/// flow into the image only; the tower's parameters are never updated.
pub fn retrieval_supervision_loss<F: Real>(
    tape: &Tape<F>,
    retrieval_vars: &TapeVars,
    config: &RunConfig,
    dims: &GanDims,
    fake: Var,
    v1: &[F],
    v2: &[F],
) -> Var {
    let input = if dims.encoder_upsample > 1 {
        tape.upsample_nearest(fake, dims.encoder_upsample)
    } else {
        fake
    };
    let enc = encode_image_forward(tape, retrieval_vars, &config.model, input, false);
    supervision_terms(tape, enc.embedding, v1, v2)
}

/// Per-term breakdown of one generator step.
pub struct GeneratorLossParts {
    pub total: Var,
    pub adversarial: Var,
    pub class_term: Var,
    pub kl: Var,
    pub supervision: Var,
    pub fake: Var,
}

/// Generator objective for one sample: adversarial term (saturating
/// `log(1 - D_r)` by default, `-log D_r` behind the config flag), class
/// cross-entropy, conditioning divergence, and retrieval supervision, each
/// under its configured weight.
#[allow(clippy::too_many_arguments)]
pub fn generator_loss<F: Real>(
    tape: &Tape<F>,
    gan_vars: &TapeVars,
    retrieval_vars: &TapeVars,
    config: &RunConfig,
    dims: &GanDims,
    v1: &[F],
    v2: &[F],
    noise: &Tensor<F>,
    z: &Tensor<F>,
    class_label: usize,
) -> Result<GeneratorLossParts> {
    let syn = &config.synthesis;
    if class_label >= dims.n_classes {
        return Err(Error::data(format!(
            "class label {class_label} out of {} classes",
            dims.n_classes
        )));
    }
    let v2_var = tape.constant(Tensor::matrix(1, dims.d_share, v2.to_vec()));
    let ca = ca_forward(tape, gan_vars, v2_var, noise);
    let fake = generator_forward(tape, gan_vars, dims, ca.t, z);
    let d = discriminator_forward(tape, gan_vars, dims, fake);
    let p = clamp_prob(tape, d.real_prob);
    let adversarial = if syn.non_saturating {
        tape.scale(tape.sum(tape.ln(p)), F::from_f64(-1.0))
    } else {
        tape.sum(tape.ln(tape.one_minus(p)))
    };
    let class_term = tape.cross_entropy_logits(d.class_logits, &[class_label]);
    let kl = kl_loss(tape, ca.mu, ca.sigma)?;
    let supervision =
        retrieval_supervision_loss(tape, retrieval_vars, config, dims, fake, v1, v2);
    let total = tape.add_n(&[
        adversarial,
        tape.scale(class_term, F::from_f64(syn.lambda_c)),
        tape.scale(kl, F::from_f64(syn.lambda_ca)),
        tape.scale(supervision, F::from_f64(syn.lambda_ret)),
    ]);
    Ok(GeneratorLossParts { total, adversarial, class_term, kl, supervision, fake })
}

fn standard_normal<F: Real>(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor<F> {
    let data = (0..rows * cols)
        .map(|_| F::from_f64(rng.sample(StandardNormal)))
        .collect();
    Tensor::matrix(rows, cols, data)
}

/// Value-only generation: draws conditioning noise and the latent vector
/// from `rng`, runs the conditioning subnetwork and generator, and returns
/// the `[3, s, s]` image.
pub fn generate_image(
    params: &ParamSet<f32>,
    config: &RunConfig,
    conditioning: &[f32],
    rng: &mut ChaCha8Rng,
) -> Result<Tensor<f32>> {
    let dims = GanDims::new(config, gan_n_classes(params)?)?;
    if conditioning.len() != dims.d_share {
        return Err(Error::data(format!(
            "conditioning vector has {} dims, model expects {}",
            conditioning.len(),
            dims.d_share
        )));
    }
    let tape = Tape::new();
    let vars = TapeVars::bind(&tape, params);
    let noise = standard_normal::<f32>(1, dims.d_ca, rng);
    let z = standard_normal::<f32>(1, dims.d_z, rng);
    let v = tape.constant(Tensor::matrix(1, dims.d_share, conditioning.to_vec()));
    let ca = ca_forward(&tape, &vars, v, &noise);
    let fake = generator_forward(&tape, &vars, &dims, ca.t, &z);
    Ok((*tape.value(fake)).clone())
}

// ----- training -----

#[derive(Debug)]
pub struct GanSummary {
    pub epochs: usize,
    pub final_d_loss: f64,
    pub final_g_loss: f64,
    pub final_supervision: f64,
    pub log_path: PathBuf,
    pub final_checkpoint: PathBuf,
}

fn gan_checkpoint_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("gan-checkpoint-{epoch}.bin"))
}

struct SamplePrep {
    v1: Vec<f32>,
    v2: Vec<f32>,
    real: Tensor<f32>,
    class_label: usize,
}

fn filter_prefixes<F: Real>(
    grads: IndexMap<String, Tensor<F>>,
    prefixes: &[&str],
) -> IndexMap<String, Tensor<F>> {
    grads
        .into_iter()
        .filter(|(name, _)| prefixes.iter().any(|p| name.starts_with(p)))
        .collect()
}

/// Adversarial training against a frozen retrieval model: per batch, one
/// discriminator update on (real, fake-as-constant) pairs, then one
/// generator update through the discriminator and the frozen image tower.
/// Writes an initial checkpoint, then one checkpoint and one log record per
/// epoch.
pub fn train_gan(
    corpus: &[PairedSample],
    manifest: &SplitManifest,
    vocab: &Vocabulary,
    retrieval: &ParamSet<f32>,
    config: &RunConfig,
    out_dir: &Path,
) -> Result<GanSummary> {
    std::fs::create_dir_all(out_dir)?;
    let (mode, _) = corpus_image_mode(corpus)?;
    if mode != ImageMode::Pixels {
        return Err(Error::data("synthesis training requires a pixel corpus"));
    }
    if !has_pixel_frontend(retrieval) {
        return Err(Error::config(
            "retrieval parameters lack the pixel frontend needed for synthesis supervision",
        ));
    }
    let n_classes = corpus.iter().map(|s| s.class_label as usize).max().unwrap_or(0) + 1;
    let dims = GanDims::new(config, n_classes)?;
    let train: Vec<&PairedSample> =
        crate::corpus::select_split(corpus, manifest, "train")?;
    if train.len() < 2 {
        return Err(Error::data("synthesis training needs at least 2 training samples"));
    }

    // Frozen per-sample context: both embeddings and the real image at
    // generator resolution.
    let prepared: Vec<SamplePrep> = train
        .iter()
        .map(|sample| {
            let text = compose_recipe_text(sample.original(), ComponentMask::ALL);
            let seq = encode_recipe(&text, vocab, config.model.max_len);
            let v2 = crate::encoders::embed_recipe(retrieval, &config.model, &seq).0;
            let (v1, _) = eval_image_embedding(retrieval, config, &sample.images[0].data);
            let real = match &sample.images[0].data {
                ImageData::Pixels(p) => {
                    resize_bilinear(&p.cast::<f32>(), dims.image_size, dims.image_size)
                }
                ImageData::Feature(_) => unreachable!("mode checked above"),
            };
            SamplePrep { v1, v2, real, class_label: sample.class_label as usize }
        })
        .collect();

    let seed = config.seed;
    let syn = &config.synthesis;
    let mut params: ParamSet<f32> = init_gan_params(config, n_classes, seed)?;
    let tc = &config.training;
    let hyper = |lr: f64| {
        Adam::with_hyper(
            lr as f32,
            tc.adam_beta1 as f32,
            tc.adam_beta2 as f32,
            tc.adam_eps as f32,
        )
    };
    let mut adam_d = hyper(syn.lr_initial);
    let mut adam_g = hyper(syn.lr_initial);

    let mut log = MetricsLog::create(&out_dir.join("gan-metrics.jsonl"), config)?;
    checkpoint::save(&gan_checkpoint_path(out_dir, 0), &config.to_json(), &params)?;

    let mut last = (0.0f64, 0.0f64, 0.0f64);
    for epoch in 1..=syn.epochs {
        let lr = learning_rate_for_epoch(epoch, syn.lr_initial, syn.lr_after, syn.lr_switch_epoch);
        adam_d.lr = lr as f32;
        adam_g.lr = lr as f32;

        let mut order: Vec<usize> = (0..prepared.len()).collect();
        order.shuffle(&mut seeded_sub(seed, "gan-shuffle", epoch as u64));
        let mut noise_rng = seeded_sub(seed, "gan-noise", epoch as u64);

        let mut sums = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
        let mut batches = 0usize;
        for (batch_index, chunk) in order.chunks(tc.batch_size).enumerate() {
            // One (conditioning noise, latent) draw per sample, shared by
            // both updates so the discriminator sees exactly the image the
            // generator is scored on.
            let draws: Vec<(Tensor<f32>, Tensor<f32>)> = chunk
                .iter()
                .map(|_| {
                    (
                        standard_normal(1, dims.d_ca, &mut noise_rng),
                        standard_normal(1, dims.d_z, &mut noise_rng),
                    )
                })
                .collect();

            // Fake images as plain values for the discriminator step.
            let fakes: Vec<Tensor<f32>> = chunk
                .iter()
                .zip(&draws)
                .map(|(&i, (noise, z))| {
                    let tape = Tape::new();
                    let vars = TapeVars::bind(&tape, &params);
                    let v2 = tape.constant(Tensor::matrix(
                        1,
                        dims.d_share,
                        prepared[i].v2.clone(),
                    ));
                    let ca = ca_forward(&tape, &vars, v2, noise);
                    let fake = generator_forward(&tape, &vars, &dims, ca.t, z);
                    (*tape.value(fake)).clone()
                })
                .collect();

            let d_loss_value = {
                let tape = Tape::new();
                let vars = TapeVars::bind(&tape, &params);
                let mut terms = Vec::with_capacity(chunk.len());
                for (&i, fake) in chunk.iter().zip(&fakes) {
                    let real = tape.constant(prepared[i].real.clone());
                    let fake = tape.constant(fake.clone());
                    terms.push(discriminator_loss(
                        &tape,
                        &vars,
                        &dims,
                        real,
                        fake,
                        prepared[i].class_label,
                        syn.lambda_c,
                    )?);
                }
                let loss = tape.mean_of(&terms);
                let value = tape.scalar_value(loss) as f64;
                if !value.is_finite() {
                    return Err(Error::numerical(format!(
                        "non-finite discriminator loss in epoch {epoch}, batch {batch_index}"
                    )));
                }
                let grads = tape.backward(loss);
                let named = filter_prefixes(vars.grads_by_name(&grads), &["disc."]);
                adam_d.step(&mut params, &named);
                value
            };

            let (g_loss_value, sup_value, kl_value) = {
                let tape = Tape::new();
                let vars = TapeVars::bind(&tape, &params);
                let frozen = TapeVars::bind(&tape, retrieval);
                let mut totals = Vec::with_capacity(chunk.len());
                let mut sup_sum = 0.0f64;
                let mut kl_sum = 0.0f64;
                for (&i, (noise, z)) in chunk.iter().zip(&draws) {
                    let parts = generator_loss(
                        &tape,
                        &vars,
                        &frozen,
                        config,
                        &dims,
                        &prepared[i].v1,
                        &prepared[i].v2,
                        noise,
                        z,
                        prepared[i].class_label,
                    )?;
                    sup_sum += tape.scalar_value(parts.supervision) as f64;
                    kl_sum += tape.scalar_value(parts.kl) as f64;
                    totals.push(parts.total);
                }
                let loss = tape.mean_of(&totals);
                let value = tape.scalar_value(loss) as f64;
                if !value.is_finite() {
                    return Err(Error::numerical(format!(
                        "non-finite generator loss in epoch {epoch}, batch {batch_index}"
                    )));
                }
                let grads = tape.backward(loss);
                let named = filter_prefixes(vars.grads_by_name(&grads), &["gen.", "ca."]);
                adam_g.step(&mut params, &named);
                (value, sup_sum / chunk.len() as f64, kl_sum / chunk.len() as f64)
            };

            sums.0 += d_loss_value;
            sums.1 += g_loss_value;
            sums.2 += sup_value;
            sums.3 += kl_value;
            batches += 1;
        }

        let n = batches as f64;
        let (d_mean, g_mean, sup_mean, kl_mean) =
            (sums.0 / n, sums.1 / n, sums.2 / n, sums.3 / n);
        log.append(&serde_json::json!({
            "epoch": epoch,
            "d_loss": d_mean,
            "g_loss": g_mean,
            "supervision": sup_mean,
            "kl": kl_mean,
            "learning_rate": lr,
            "batches": batches,
        }))?;
        checkpoint::save(&gan_checkpoint_path(out_dir, epoch), &config.to_json(), &params)?;
        log::info!(
            "gan epoch {epoch}: d {d_mean:.4} g {g_mean:.4} supervision {sup_mean:.4}"
        );
        last = (d_mean, g_mean, sup_mean);
    }

    Ok(GanSummary {
        epochs: syn.epochs,
        final_d_loss: last.0,
        final_g_loss: last.1,
        final_supervision: last.2,
        log_path: log.path().to_path_buf(),
        final_checkpoint: gan_checkpoint_path(out_dir, syn.epochs),
    })
}
