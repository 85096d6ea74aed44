//! Retrieval and synthesis evaluation: ranks over seeded candidate pools,
//! median-rank and recall metrics, component-ablation and per-language
//! breakdowns, distribution distance in the image head's feature space, and
//! embedding export.

use std::path::Path;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::RunConfig;
use crate::corpus::{
    compose_recipe_text, ComponentMask, ImageData, Language, PairedSample, Variant,
    ALL_LANGUAGES,
};
use crate::params::ParamSet;
use crate::rng::seeded_sub;
use crate::tensor::{cosine_similarity, Tensor};
use crate::tokenizer::{encode_recipe, Vocabulary};
use crate::training::eval_image_embedding;
use crate::{Error, Result};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Ordered map preserving input order; parallel when the `parallel` feature
/// is on.
fn map_ordered<T: Sync, U: Send>(items: &[T], f: impl Fn(&T) -> U + Sync + Send) -> Vec<U> {
    #[cfg(feature = "parallel")]
    {
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(f).collect()
    }
}

/// Rank of the true item: one plus the number of candidates with strictly
/// greater similarity. Ties do not push the true pair down.
pub fn rank_of_true_pair(similarities: &[f64], true_index: usize) -> usize {
    let own = similarities[true_index];
    1 + similarities
        .iter()
        .enumerate()
        .filter(|&(j, &s)| j != true_index && s > own)
        .count()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DirectionMetrics {
    pub med_r: f64,
    pub r_at_1: f64,
    pub r_at_5: f64,
    pub r_at_10: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SubsetMetrics {
    pub text_to_image: DirectionMetrics,
    pub image_to_text: DirectionMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RetrievalReport {
    pub pool_size: usize,
    pub n_subsets: usize,
    /// Subset-averaged metrics (the median rank is the mean of per-subset
    /// medians).
    pub text_to_image: DirectionMetrics,
    pub image_to_text: DirectionMetrics,
    pub per_subset: Vec<SubsetMetrics>,
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// medR and R@{1,5,10} of a list of 1-based ranks.
pub fn metrics_from_ranks(ranks: &[usize]) -> DirectionMetrics {
    let mut sorted: Vec<f64> = ranks.iter().map(|&r| r as f64).collect();
    sorted.sort_by(f64::total_cmp);
    let frac = |k: usize| ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64;
    DirectionMetrics {
        med_r: median(&sorted),
        r_at_1: frac(1),
        r_at_5: frac(5),
        r_at_10: frac(10),
    }
}

fn mean_metrics(subsets: &[SubsetMetrics], pick: impl Fn(&SubsetMetrics) -> &DirectionMetrics) -> DirectionMetrics {
    let n = subsets.len() as f64;
    let mut out = DirectionMetrics { med_r: 0.0, r_at_1: 0.0, r_at_5: 0.0, r_at_10: 0.0 };
    for s in subsets {
        let m = pick(s);
        out.med_r += m.med_r;
        out.r_at_1 += m.r_at_1;
        out.r_at_5 += m.r_at_5;
        out.r_at_10 += m.r_at_10;
    }
    out.med_r /= n;
    out.r_at_1 /= n;
    out.r_at_5 /= n;
    out.r_at_10 /= n;
    out
}

/// Metrics for one candidate pool, both directions.
fn subset_metrics(text: &[Vec<f32>], image: &[Vec<f32>], pool: &[usize]) -> SubsetMetrics {
    let b = pool.len();
    let mut sim = vec![0.0f64; b * b];
    for (r, &i) in pool.iter().enumerate() {
        for (c, &j) in pool.iter().enumerate() {
            sim[r * b + c] = cosine_similarity(&text[i], &image[j]) as f64;
        }
    }
    let t2i: Vec<usize> = (0..b)
        .map(|r| rank_of_true_pair(&sim[r * b..(r + 1) * b], r))
        .collect();
    let i2t: Vec<usize> = (0..b)
        .map(|c| {
            let column: Vec<f64> = (0..b).map(|r| sim[r * b + c]).collect();
            rank_of_true_pair(&column, c)
        })
        .collect();
    SubsetMetrics {
        text_to_image: metrics_from_ranks(&t2i),
        image_to_text: metrics_from_ranks(&i2t),
    }
}

/// The retrieval protocol: `n_subsets` seeded pools of `pool_size` pairs
/// drawn without replacement, ranks in both directions inside each pool,
/// metrics averaged across pools.
pub fn retrieval_report(
    text: &[Vec<f32>],
    image: &[Vec<f32>],
    pool_size: usize,
    n_subsets: usize,
    seed: u64,
) -> Result<RetrievalReport> {
    let n = text.len();
    if n != image.len() {
        return Err(Error::data("text/image embedding counts differ"));
    }
    if pool_size == 0 || n_subsets == 0 {
        return Err(Error::config("pool size and subset count must be positive"));
    }
    if pool_size > n {
        return Err(Error::config(format!(
            "pool size {pool_size} exceeds the {n} available pairs"
        )));
    }
    let pools: Vec<Vec<usize>> = (0..n_subsets)
        .map(|s| {
            let mut indices: Vec<usize> = (0..n).collect();
            indices.shuffle(&mut seeded_sub(seed, "eval-pool", s as u64));
            indices.truncate(pool_size);
            indices
        })
        .collect();
    let per_subset: Vec<SubsetMetrics> =
        map_ordered(&pools, |pool| subset_metrics(text, image, pool));
    Ok(RetrievalReport {
        pool_size,
        n_subsets,
        text_to_image: mean_metrics(&per_subset, |s| &s.text_to_image),
        image_to_text: mean_metrics(&per_subset, |s| &s.image_to_text),
        per_subset,
    })
}

// ----- embedding computation over samples -----

/// Embeddings of a sample list in evaluation conditions: deterministic, no
/// augmentation, first image per sample.
pub struct EvalEmbeddings {
    pub ids: Vec<String>,
    pub class: Vec<u32>,
    pub text: Vec<Vec<f32>>,
    pub image: Vec<Vec<f32>>,
    /// Image-head first-layer activations, the statistics feature space.
    pub image_fc1: Vec<Vec<f32>>,
}

/// Text side uses the given component mask and language (`None` or EN means
/// the original document). Samples without the requested translation are
/// skipped with a log line; both sides of a skipped pair are dropped.
pub fn eval_embeddings(
    params: &ParamSet<f32>,
    config: &RunConfig,
    vocab: &Vocabulary,
    samples: &[&PairedSample],
    mask: ComponentMask,
    language: Option<Language>,
) -> EvalEmbeddings {
    let retained: Vec<&PairedSample> = match language {
        None | Some(Language::En) => samples.to_vec(),
        Some(l) => {
            let kept: Vec<&PairedSample> = samples
                .iter()
                .copied()
                .filter(|s| s.variant(Variant::Translation, l).is_some())
                .collect();
            if kept.len() < samples.len() {
                log::debug!(
                    "skipping {} samples without a {l} translation",
                    samples.len() - kept.len()
                );
            }
            kept
        }
    };
    let rows = map_ordered(&retained, |sample| {
        let doc = match language {
            None | Some(Language::En) => sample.original(),
            Some(l) => sample.variant(Variant::Translation, l).expect("filtered above"),
        };
        let text = compose_recipe_text(doc, mask);
        let seq = encode_recipe(&text, vocab, config.model.max_len);
        let text_emb = crate::encoders::embed_recipe(params, &config.model, &seq).0;
        let (image_emb, fc1) = eval_image_embedding(params, config, &sample.images[0].data);
        (sample.id.clone(), sample.class_label, text_emb, image_emb, fc1)
    });
    let mut out = EvalEmbeddings {
        ids: Vec::new(),
        class: Vec::new(),
        text: Vec::new(),
        image: Vec::new(),
        image_fc1: Vec::new(),
    };
    for (id, class, text, image, fc1) in rows {
        out.ids.push(id);
        out.class.push(class);
        out.text.push(text);
        out.image.push(image);
        out.image_fc1.push(fc1);
    }
    out
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub mask: String,
    pub report: RetrievalReport,
}

/// Retrieval metrics with the text side restricted to component subsets; the
/// image side is fixed.
#[allow(clippy::too_many_arguments)]
pub fn ablation_eval(
    params: &ParamSet<f32>,
    config: &RunConfig,
    vocab: &Vocabulary,
    samples: &[&PairedSample],
    masks: &[ComponentMask],
    pool_size: usize,
    n_subsets: usize,
    seed: u64,
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(masks.len());
    for &mask in masks {
        if samples
            .iter()
            .all(|s| compose_recipe_text(s.original(), mask).is_empty())
        {
            log::warn!("mask {mask} selects no text anywhere; encoding aggregate token only");
        }
        let emb = eval_embeddings(params, config, vocab, samples, mask, None);
        rows.push(AblationRow {
            mask: mask.to_string(),
            report: retrieval_report(&emb.text, &emb.image, pool_size, n_subsets, seed)?,
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, Serialize)]
pub struct LanguageRow {
    pub language: String,
    pub report: RetrievalReport,
}

/// Retrieval metrics per query language (the original for EN, translated
/// documents otherwise). A language whose retained pairs cannot fill the
/// pool is skipped with a warning rather than failing the whole report.
pub fn multilingual_eval(
    params: &ParamSet<f32>,
    config: &RunConfig,
    vocab: &Vocabulary,
    samples: &[&PairedSample],
    pool_size: usize,
    n_subsets: usize,
    seed: u64,
) -> Result<Vec<LanguageRow>> {
    let mut rows = Vec::with_capacity(ALL_LANGUAGES.len());
    for language in ALL_LANGUAGES {
        let emb = eval_embeddings(
            params,
            config,
            vocab,
            samples,
            ComponentMask::ALL,
            Some(language),
        );
        if emb.ids.len() < pool_size {
            log::warn!(
                "language {language}: only {} of {} samples usable, skipping",
                emb.ids.len(),
                samples.len()
            );
            continue;
        }
        rows.push(LanguageRow {
            language: language.code().to_string(),
            report: retrieval_report(&emb.text, &emb.image, pool_size, n_subsets, seed)?,
        });
    }
    Ok(rows)
}

// ----- distribution distance -----

/// Mean and unbiased covariance of a feature set (`n >= 2`).
#[derive(Debug, Clone, PartialEq)]
pub struct DistributionStats {
    pub mean: Vec<f64>,
    /// Row-major `d x d`.
    pub covariance: Vec<f64>,
}

pub fn distribution_stats(features: &[Vec<f64>]) -> Result<DistributionStats> {
    let n = features.len();
    if n < 2 {
        return Err(Error::data("distribution statistics need at least 2 samples"));
    }
    let d = features[0].len();
    let mut mean = vec![0.0; d];
    for f in features {
        assert_eq!(f.len(), d, "feature dimensions must agree");
        for (m, x) in mean.iter_mut().zip(f) {
            *m += x / n as f64;
        }
    }
    let mut covariance = vec![0.0; d * d];
    for f in features {
        let centered: Vec<f64> = f.iter().zip(&mean).map(|(x, m)| x - m).collect();
        for i in 0..d {
            for j in 0..d {
                covariance[i * d + j] += centered[i] * centered[j] / (n as f64 - 1.0);
            }
        }
    }
    Ok(DistributionStats { mean, covariance })
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix. Returns
/// eigenvalues and row-major eigenvectors (row `k` of the second value is
/// the eigenvector for eigenvalue `k`).
pub fn symmetric_eigen(matrix: &[f64], d: usize) -> (Vec<f64>, Vec<f64>) {
    assert_eq!(matrix.len(), d * d);
    let mut a = matrix.to_vec();
    // Vectors accumulate as columns of q.
    let mut q = vec![0.0; d * d];
    for i in 0..d {
        q[i * d + i] = 1.0;
    }
    let scale: f64 = matrix
        .iter()
        .map(|x| x.abs())
        .fold(0.0, f64::max)
        .max(1e-300);
    for _sweep in 0..100 {
        let off: f64 = (0..d)
            .flat_map(|i| (0..d).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * d + j] * a[i * d + j])
            .sum();
        if off.sqrt() < 1e-14 * scale * d as f64 {
            break;
        }
        for p in 0..d {
            for r in p + 1..d {
                let apr = a[p * d + r];
                if apr.abs() < 1e-300 {
                    continue;
                }
                let app = a[p * d + p];
                let arr = a[r * d + r];
                let theta = 0.5 * (arr - app) / apr;
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..d {
                    let akp = a[k * d + p];
                    let akr = a[k * d + r];
                    a[k * d + p] = c * akp - s * akr;
                    a[k * d + r] = s * akp + c * akr;
                }
                for k in 0..d {
                    let apk = a[p * d + k];
                    let ark = a[r * d + k];
                    a[p * d + k] = c * apk - s * ark;
                    a[r * d + k] = s * apk + c * ark;
                }
                for k in 0..d {
                    let qkp = q[k * d + p];
                    let qkr = q[k * d + r];
                    q[k * d + p] = c * qkp - s * qkr;
                    q[k * d + r] = s * qkp + c * qkr;
                }
            }
        }
    }
    let values: Vec<f64> = (0..d).map(|i| a[i * d + i]).collect();
    // Transpose q so each returned row is an eigenvector.
    let mut vectors = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            vectors[i * d + j] = q[j * d + i];
        }
    }
    (values, vectors)
}

fn matmul_square(a: &[f64], b: &[f64], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; d * d];
    for i in 0..d {
        for k in 0..d {
            let v = a[i * d + k];
            if v != 0.0 {
                for j in 0..d {
                    out[i * d + j] += v * b[k * d + j];
                }
            }
        }
    }
    out
}

/// Symmetric PSD square root via eigendecomposition; eigenvalues slightly
/// below zero clamp to zero, anything further negative is a numerical error.
fn psd_sqrt(matrix: &[f64], d: usize) -> Result<Vec<f64>> {
    let (values, vectors) = symmetric_eigen(matrix, d);
    let mut roots = Vec::with_capacity(d);
    for &v in &values {
        if v < -1e-8 {
            return Err(Error::numerical(format!(
                "covariance square root saw eigenvalue {v}"
            )));
        }
        roots.push(v.max(0.0).sqrt());
    }
    // Q diag(sqrt) Q^T with rows of `vectors` as eigenvectors.
    let mut out = vec![0.0; d * d];
    for k in 0..d {
        let r = roots[k];
        if r == 0.0 {
            continue;
        }
        for i in 0..d {
            let vi = vectors[k * d + i];
            if vi == 0.0 {
                continue;
            }
            for j in 0..d {
                out[i * d + j] += r * vi * vectors[k * d + j];
            }
        }
    }
    Ok(out)
}

fn min_eigenvalue(matrix: &[f64], d: usize) -> f64 {
    symmetric_eigen(matrix, d).0.into_iter().fold(f64::INFINITY, f64::min)
}

/// Frechet distance between two Gaussians:
/// `|mu_a - mu_b|^2 + Tr(Sa + Sb - 2 (Sa Sb)^(1/2))`. Rank-deficient
/// covariances are regularized with `1e-6 I` on both sides.
pub fn fid_from_stats(a: &DistributionStats, b: &DistributionStats) -> Result<f64> {
    let d = a.mean.len();
    if b.mean.len() != d {
        return Err(Error::data("feature dimensions must agree"));
    }
    let mean_term: f64 = a
        .mean
        .iter()
        .zip(&b.mean)
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    let mut ca = a.covariance.clone();
    let mut cb = b.covariance.clone();
    if min_eigenvalue(&ca, d) < 1e-10 || min_eigenvalue(&cb, d) < 1e-10 {
        for i in 0..d {
            ca[i * d + i] += 1e-6;
            cb[i * d + i] += 1e-6;
        }
    }
    // Tr sqrt(Sa Sb) through the symmetric form sqrt(Sa) Sb sqrt(Sa).
    let ra = psd_sqrt(&ca, d)?;
    let inner = matmul_square(&matmul_square(&ra, &cb, d), &ra, d);
    // Symmetrize against accumulated round-off before the eigensolve.
    let mut sym = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            sym[i * d + j] = 0.5 * (inner[i * d + j] + inner[j * d + i]);
        }
    }
    let (values, _) = symmetric_eigen(&sym, d);
    let mut trace_sqrt = 0.0;
    for v in values {
        if v < -1e-8 {
            return Err(Error::numerical(format!(
                "cross-covariance saw eigenvalue {v}"
            )));
        }
        trace_sqrt += v.max(0.0).sqrt();
    }
    let trace_a: f64 = (0..d).map(|i| ca[i * d + i]).sum();
    let trace_b: f64 = (0..d).map(|i| cb[i * d + i]).sum();
    Ok(mean_term + trace_a + trace_b - 2.0 * trace_sqrt)
}

/// Distribution distance between two feature sets (each `n >= 2`).
pub fn fid(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    fid_from_stats(&distribution_stats(a)?, &distribution_stats(b)?)
}

// ----- synthesis evaluation -----

/// Which embedding conditions the generator during evaluation: the recipe
/// embedding (as trained) or the real image's embedding (a purity probe).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthesisSource {
    RecipeEmbedding,
    ImageEmbedding,
}

impl SynthesisSource {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "recipe" => Ok(SynthesisSource::RecipeEmbedding),
            "image" => Ok(SynthesisSource::ImageEmbedding),
            other => Err(Error::config(format!(
                "unknown synthesis source {other:?} (expected recipe or image)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SynthesisReport {
    pub n: usize,
    pub source: SynthesisSource,
    /// Standard pool/subset retrieval protocol with generated-image
    /// embeddings standing in for the real image side.
    pub retrieval: RetrievalReport,
    /// Distance between generated and real activation distributions in the
    /// image head's first-layer space.
    pub fid: f64,
    pub extractor: String,
}

/// Evaluates a conditional image generator: every test sample's source
/// embedding drives one generation with a per-sample seeded noise stream;
/// the generated images are embedded by the retrieval image tower, ranked
/// against the real recipe embeddings under the usual pool protocol, and
/// their activation statistics are compared with the real images'.
#[allow(clippy::too_many_arguments)]
pub fn synthesis_eval<G>(
    params: &ParamSet<f32>,
    config: &RunConfig,
    vocab: &Vocabulary,
    samples: &[&PairedSample],
    source: SynthesisSource,
    pool_size: usize,
    n_subsets: usize,
    seed: u64,
    mut generate: G,
) -> Result<SynthesisReport>
where
    G: FnMut(&[f32], &mut ChaCha8Rng) -> Result<Tensor<f32>>,
{
    if samples.len() < 2 {
        return Err(Error::data("synthesis evaluation needs at least 2 samples"));
    }
    let emb = eval_embeddings(params, config, vocab, samples, ComponentMask::ALL, None);
    let mut generated_emb = Vec::with_capacity(samples.len());
    let mut generated_fc1 = Vec::with_capacity(samples.len());
    for i in 0..samples.len() {
        let conditioning = match source {
            SynthesisSource::RecipeEmbedding => &emb.text[i],
            SynthesisSource::ImageEmbedding => &emb.image[i],
        };
        let mut z_rng = seeded_sub(seed, "synthesis-z", i as u64);
        let pixels = generate(conditioning, &mut z_rng)?;
        let (e, fc1) = eval_image_embedding(params, config, &ImageData::Pixels(pixels));
        generated_emb.push(e);
        generated_fc1.push(fc1);
    }
    let retrieval = retrieval_report(&emb.text, &generated_emb, pool_size, n_subsets, seed)?;
    let to_f64 = |rows: &[Vec<f32>]| -> Vec<Vec<f64>> {
        rows.iter().map(|r| r.iter().map(|&x| x as f64).collect()).collect()
    };
    let fid_value = fid(&to_f64(&generated_fc1), &to_f64(&emb.image_fc1))?;
    Ok(SynthesisReport {
        n: samples.len(),
        source,
        retrieval,
        fid: fid_value,
        extractor: crate::encoders::FID_EXTRACTOR_LABEL.to_string(),
    })
}

// ----- export -----

/// Embedding export: one row per modality per sample, three tab-separated
/// fields (`id`, `modality`, space-separated decimal components).
pub fn export_embeddings_tsv(path: &Path, emb: &EvalEmbeddings) -> Result<()> {
    let mut out = String::new();
    for (i, id) in emb.ids.iter().enumerate() {
        for (modality, vector) in [("text", &emb.text[i]), ("image", &emb.image[i])] {
            let joined: Vec<String> = vector.iter().map(|v| format!("{v}")).collect();
            out.push_str(&format!("{id}\t{modality}\t{}\n", joined.join(" ")));
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_toy_corpus, generate_toy_corpus_pixels, toy_vocabulary};
    use crate::encoders::init_retrieval_params;
    use rand::Rng;

    #[test]
    fn rank_counts_strictly_greater_only() {
        let sims = [0.9, 0.5, 0.9, 0.2];
        assert_eq!(rank_of_true_pair(&sims, 0), 1);
        assert_eq!(rank_of_true_pair(&sims, 2), 1);
        assert_eq!(rank_of_true_pair(&sims, 1), 3);
        assert_eq!(rank_of_true_pair(&sims, 3), 4);
    }

    #[test]
    fn rank_matches_sort_based_oracle() {
        let mut rng = crate::rng::seeded(17, "rank-oracle");
        for _ in 0..100 {
            let n = rng.gen_range(2..30);
            let sims: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let true_index = rng.gen_range(0..n);
            // Oracle: sort descending, scan for the first slot whose value
            // is not greater than the true similarity.
            let mut sorted = sims.clone();
            sorted.sort_by(|a, b| b.total_cmp(a));
            let oracle = sorted.iter().position(|&s| s <= sims[true_index]).unwrap() + 1;
            assert_eq!(rank_of_true_pair(&sims, true_index), oracle);
        }
    }

    fn identity_embeddings(n: usize, d: usize) -> (Vec<Vec<f32>>, Vec<Vec<f32>>) {
        let rows: Vec<Vec<f32>> = (0..n)
            .map(|i| (0..d).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        (rows.clone(), rows)
    }

    #[test]
    fn perfectly_aligned_embeddings_rank_first() {
        let (text, image) = identity_embeddings(12, 12);
        let report = retrieval_report(&text, &image, 12, 10, 3).unwrap();
        assert_eq!(report.text_to_image.med_r, 1.0);
        assert_eq!(report.text_to_image.r_at_1, 1.0);
        assert_eq!(report.image_to_text.med_r, 1.0);
        assert_eq!(report.per_subset.len(), 10);
    }

    #[test]
    fn full_pool_makes_every_subset_identical() {
        let mut rng = crate::rng::seeded(8, "full-pool");
        let n = 30;
        let text: Vec<Vec<f32>> = (0..n)
            .map(|_| (0..6).map(|_| rng.gen_range(-1.0f32..1.0)).collect())
            .collect();
        let image: Vec<Vec<f32>> = (0..n)
            .map(|_| (0..6).map(|_| rng.gen_range(-1.0f32..1.0)).collect())
            .collect();
        let report = retrieval_report(&text, &image, n, 10, 4).unwrap();
        for s in &report.per_subset {
            assert_eq!(s, &report.per_subset[0]);
        }
        let first = &report.per_subset[0].text_to_image;
        assert!((report.text_to_image.med_r - first.med_r).abs() < 1e-12);
        assert!((report.text_to_image.r_at_1 - first.r_at_1).abs() < 1e-12);
    }

    #[test]
    fn subset_sampling_is_seeded() {
        let mut rng = crate::rng::seeded(8, "seeded-pools");
        let n = 40;
        let text: Vec<Vec<f32>> = (0..n)
            .map(|_| (0..6).map(|_| rng.gen_range(-1.0f32..1.0)).collect())
            .collect();
        let image: Vec<Vec<f32>> = (0..n)
            .map(|_| (0..6).map(|_| rng.gen_range(-1.0f32..1.0)).collect())
            .collect();
        let a = retrieval_report(&text, &image, 10, 5, 4).unwrap();
        let b = retrieval_report(&text, &image, 10, 5, 4).unwrap();
        assert_eq!(a, b);
        let c = retrieval_report(&text, &image, 10, 5, 5).unwrap();
        assert_ne!(a.per_subset, c.per_subset);
    }

    #[test]
    fn oversized_pool_is_rejected() {
        let (text, image) = identity_embeddings(4, 4);
        assert!(retrieval_report(&text, &image, 5, 2, 1).is_err());
    }

    #[test]
    fn metrics_median_and_recall_hand_case() {
        // Ranks 1, 2, 7: median 2, R@1 = 1/3, R@5 = 2/3.
        let m = metrics_from_ranks(&[1, 2, 7]);
        assert_eq!(m.med_r, 2.0);
        assert!((m.r_at_1 - 1.0 / 3.0).abs() < 1e-12);
        assert!((m.r_at_5 - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(m.r_at_10, 1.0);
        // Even count: mean of the central pair.
        let m = metrics_from_ranks(&[1, 2, 4, 9]);
        assert_eq!(m.med_r, 3.0);
    }

    #[test]
    fn eigensolver_recovers_known_spectrum() {
        // [[2,1],[1,2]] has eigenvalues 3 and 1.
        let (mut values, vectors) = symmetric_eigen(&[2.0, 1.0, 1.0, 2.0], 2);
        values.sort_by(f64::total_cmp);
        assert!((values[0] - 1.0).abs() < 1e-10);
        assert!((values[1] - 3.0).abs() < 1e-10);
        // Eigenvector rows reconstruct the matrix.
        let (values, _) = symmetric_eigen(&[2.0, 1.0, 1.0, 2.0], 2);
        let mut rebuilt = [0.0; 4];
        for k in 0..2 {
            for i in 0..2 {
                for j in 0..2 {
                    rebuilt[i * 2 + j] += values[k] * vectors[k * 2 + i] * vectors[k * 2 + j];
                }
            }
        }
        for (a, b) in rebuilt.iter().zip(&[2.0, 1.0, 1.0, 2.0]) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn eigensolver_handles_larger_random_symmetric() {
        let mut rng = crate::rng::seeded(21, "eigen-random");
        let d = 8;
        let mut m = vec![0.0f64; d * d];
        for i in 0..d {
            for j in i..d {
                let v = rng.gen_range(-1.0..1.0);
                m[i * d + j] = v;
                m[j * d + i] = v;
            }
        }
        let (values, vectors) = symmetric_eigen(&m, d);
        let mut rebuilt = vec![0.0; d * d];
        for k in 0..d {
            for i in 0..d {
                for j in 0..d {
                    rebuilt[i * d + j] += values[k] * vectors[k * d + i] * vectors[k * d + j];
                }
            }
        }
        for (a, b) in rebuilt.iter().zip(&m) {
            assert!((a - b).abs() < 1e-8, "{a} vs {b}");
        }
    }

    #[test]
    fn fid_exact_stats_closed_forms() {
        let a = DistributionStats { mean: vec![0.0], covariance: vec![1.0] };
        let b = DistributionStats { mean: vec![0.0], covariance: vec![4.0] };
        // 1 + 4 - 2 * sqrt(4) = 1.
        assert!((fid_from_stats(&a, &b).unwrap() - 1.0).abs() < 1e-9);
        let c = DistributionStats { mean: vec![3.0], covariance: vec![1.0] };
        // Mean shift alone: 9.
        assert!((fid_from_stats(&a, &c).unwrap() - 9.0).abs() < 1e-9);
        assert!(fid_from_stats(&a, &a).unwrap().abs() < 1e-9);
    }

    #[test]
    fn fid_identical_sets_is_zero() {
        let mut rng = crate::rng::seeded(2, "fid-self");
        let set: Vec<Vec<f64>> = (0..20)
            .map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        assert!(fid(&set, &set).unwrap().abs() < 1e-8);
    }

    #[test]
    fn fid_is_symmetric_and_nonnegative() {
        let mut rng = crate::rng::seeded(3, "fid-sym");
        let draw = |rng: &mut ChaCha8Rng, shift: f64| -> Vec<Vec<f64>> {
            (0..25)
                .map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0) + shift).collect())
                .collect()
        };
        let a = draw(&mut rng, 0.0);
        let b = draw(&mut rng, 0.5);
        let ab = fid(&a, &b).unwrap();
        let ba = fid(&b, &a).unwrap();
        assert!(ab >= 0.0);
        assert!((ab - ba).abs() < 1e-8);
    }

    #[test]
    fn fid_constant_sets_measure_mean_distance() {
        let a = vec![vec![0.0, 0.0]; 5];
        let b = vec![vec![1.0, 0.0]; 5];
        // Zero covariance on both sides: regularization cancels in the
        // trace terms and the squared mean distance remains.
        let d = fid(&a, &b).unwrap();
        assert!((d - 1.0).abs() < 1e-6, "fid {d}");
    }

    #[test]
    fn fid_grows_with_mean_shift() {
        let mut rng = crate::rng::seeded(13, "fid-shift");
        let base: Vec<Vec<f64>> = (0..30)
            .map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let shifted = |delta: f64| -> Vec<Vec<f64>> {
            base.iter().map(|r| r.iter().map(|x| x + delta).collect()).collect()
        };
        let d1 = fid(&base, &shifted(0.5)).unwrap();
        let d2 = fid(&base, &shifted(1.0)).unwrap();
        let d3 = fid(&base, &shifted(2.0)).unwrap();
        assert!(d1 < d2 && d2 < d3, "{d1} {d2} {d3}");
    }

    #[test]
    fn fid_needs_two_samples() {
        assert!(distribution_stats(&[vec![1.0]]).is_err());
        assert!(fid(&[vec![1.0]], &[vec![1.0], vec![2.0]]).is_err());
    }

    #[test]
    fn covariance_is_unbiased() {
        // Two points at +/-1: unbiased variance 2.
        let stats = distribution_stats(&[vec![1.0], vec![-1.0]]).unwrap();
        assert_eq!(stats.mean, vec![0.0]);
        assert!((stats.covariance[0] - 2.0).abs() < 1e-12);
    }

    fn toy_setup() -> (RunConfig, Vocabulary, Vec<PairedSample>) {
        let vocab = toy_vocabulary(2);
        let corpus = generate_toy_corpus(6, 12, 2, &vocab, 64).unwrap();
        let mut config = RunConfig { seed: 6, ..RunConfig::default() };
        config.model.max_len = 32;
        config.model.image_input_dim = 64;
        (config, vocab, corpus)
    }

    #[test]
    fn eval_embeddings_cover_all_samples() {
        let (config, vocab, corpus) = toy_setup();
        let params = init_retrieval_params(&config.model, vocab.len(), None, 1);
        let refs: Vec<&PairedSample> = corpus.iter().collect();
        let emb = eval_embeddings(&params, &config, &vocab, &refs, ComponentMask::ALL, None);
        assert_eq!(emb.ids.len(), corpus.len());
        assert_eq!(emb.text[0].len(), config.model.d_share);
        assert_eq!(emb.image_fc1[0].len(), config.model.d_share);
        assert!(emb.text.iter().all(|t| t.iter().all(|x| x.is_finite())));
    }

    #[test]
    fn ablation_produces_row_per_mask() {
        let (config, vocab, corpus) = toy_setup();
        let params = init_retrieval_params(&config.model, vocab.len(), None, 1);
        let refs: Vec<&PairedSample> = corpus.iter().collect();
        let masks = [
            ComponentMask { title: true, ingredients: false, instructions: false },
            ComponentMask::ALL,
        ];
        let rows =
            ablation_eval(&params, &config, &vocab, &refs, &masks, 12, 2, 7).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].mask, "title");
        assert_eq!(rows[1].mask, "title,ingredients,instructions");
        for row in &rows {
            assert!(row.report.text_to_image.med_r >= 1.0);
        }
    }

    #[test]
    fn multilingual_covers_five_languages() {
        let (config, vocab, corpus) = toy_setup();
        let params = init_retrieval_params(&config.model, vocab.len(), None, 1);
        let refs: Vec<&PairedSample> = corpus.iter().collect();
        let rows = multilingual_eval(&params, &config, &vocab, &refs, 12, 2, 7).unwrap();
        let codes: Vec<&str> = rows.iter().map(|r| r.language.as_str()).collect();
        assert_eq!(codes, ["EN", "DE", "RU", "FR", "KO"]);
    }

    #[test]
    fn synthesis_oracle_generator_recovers_real_statistics() {
        let vocab = toy_vocabulary(2);
        let corpus = generate_toy_corpus_pixels(6, 8, 2, &vocab, 16).unwrap();
        let mut config = RunConfig::default();
        config.model.max_len = 32;
        config.model.image_size = 16;
        config.model.image_input_dim = 24;
        let params = init_retrieval_params(&config.model, vocab.len(), Some(16), 1);
        let refs: Vec<&PairedSample> = corpus.iter().collect();

        // Oracle: emit each sample's real pixels in turn.
        let real: Vec<Tensor<f32>> = corpus
            .iter()
            .map(|s| match &s.images[0].data {
                ImageData::Pixels(p) => p.clone(),
                _ => unreachable!(),
            })
            .collect();
        let mut k = 0usize;
        let oracle = |_: &[f32], _: &mut ChaCha8Rng| {
            k += 1;
            Ok(real[k - 1].clone())
        };
        let report = synthesis_eval(
            &params,
            &config,
            &vocab,
            &refs,
            SynthesisSource::RecipeEmbedding,
            8,
            3,
            5,
            oracle,
        )
        .unwrap();
        assert_eq!(report.n, 8);
        assert_eq!(report.extractor, "image_head_fc1");
        assert!(report.fid.abs() < 1e-6, "oracle fid {}", report.fid);

        // The oracle reproduces the real-image report exactly.
        let emb = eval_embeddings(&params, &config, &vocab, &refs, ComponentMask::ALL, None);
        let real_report = retrieval_report(&emb.text, &emb.image, 8, 3, 5).unwrap();
        assert_eq!(report.retrieval, real_report);

        // Unrelated noise scores worse on the distribution distance, and the
        // image-embedding source runs the same protocol.
        let noise = |_: &[f32], rng: &mut ChaCha8Rng| {
            let data: Vec<f32> = (0..3 * 16 * 16).map(|_| rng.gen_range(0.0f32..1.0)).collect();
            Ok(Tensor::new(vec![3, 16, 16], data))
        };
        let null_report = synthesis_eval(
            &params,
            &config,
            &vocab,
            &refs,
            SynthesisSource::ImageEmbedding,
            8,
            3,
            5,
            noise,
        )
        .unwrap();
        assert!(null_report.fid > report.fid);
        assert_eq!(null_report.source, SynthesisSource::ImageEmbedding);
        let json = serde_json::to_value(&null_report).unwrap();
        assert_eq!(json["source"], "image_embedding");
    }

    #[test]
    fn tsv_export_round_trips_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("embeddings.tsv");
        let emb = EvalEmbeddings {
            ids: vec!["a".into(), "b".into()],
            class: vec![0, 1],
            text: vec![vec![0.5, -1.25], vec![0.125, 2.0]],
            image: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            image_fc1: vec![vec![0.0; 2]; 2],
        };
        export_embeddings_tsv(&path, &emb).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[0], "a\ttext\t0.5 -1.25");
        assert_eq!(lines[1], "a\timage\t1 0");
        let fields: Vec<&str> = lines[3].split('\t').collect();
        assert_eq!(fields, ["b", "image", "0 1"]);
        let parsed: Vec<f32> = fields[2]
            .split(' ')
            .map(|v| v.parse().unwrap())
            .collect();
        assert_eq!(parsed, [0.0, 1.0]);
    }

    #[test]
    fn report_serializes_with_subset_detail() {
        let (text, image) = identity_embeddings(6, 6);
        let report = retrieval_report(&text, &image, 4, 3, 2).unwrap();
        let json = serde_json::to_value(&report).unwrap();
        assert_eq!(json["pool_size"], 4);
        assert_eq!(json["per_subset"].as_array().unwrap().len(), 3);
        assert!(json["text_to_image"]["med_r"].is_number());
    }
}
