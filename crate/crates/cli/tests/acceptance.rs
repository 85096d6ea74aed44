//! Acceptance gates for the whole pipeline. Each test is one gate and prints
//! its own pass/fail line through the harness.
//!
//! The fast gates check loss values against hand-computed fixtures, analytic
//! gradients against central finite differences, and mining/metric results
//! against independent brute-force oracles. The slow gates run the compiled
//! binary end to end on toy corpora and hold trained models to quality,
//! consistency, and determinism bars. Everything is seeded; the slow gates
//! run single-threaded via `--deterministic`.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};
use std::sync::OnceLock;
use std::time::Instant;

use crossmodal::autograd::Tape;
use crossmodal::config::RunConfig;
use crossmodal::corpus::toy_vocabulary;
use crossmodal::encoders::{
    attention_rollout, embed_recipe, encode_image_forward, encode_recipe_forward,
    init_retrieval_params,
};
use crossmodal::evaluation::{fid, metrics_from_ranks, rank_of_true_pair};
use crossmodal::params::{check_gradients, ParamSet, TapeVars};
use crossmodal::rng::seeded;
use crossmodal::synthesis::{
    ca_forward, discriminator_loss, generator_loss, init_gan_params, kl_loss, supervision_terms,
    GanDims,
};
use crossmodal::tensor::Tensor;
use crossmodal::tokenizer::{encode_recipe, TokenSequence};
use crossmodal::training::{batch_loss, mine_hard_negatives, triplet_loss};
use rand::Rng;
use tempfile::TempDir;

// ----- binary helpers -----

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_crossmodal"))
}

fn run_ok(args: &[&str]) -> Output {
    let out = bin().args(args).output().expect("binary runs");
    assert!(
        out.status.success(),
        "command {:?} failed:\n{}",
        args,
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn read_json(path: &Path) -> serde_json::Value {
    let bytes = fs::read(path).unwrap_or_else(|e| panic!("read {}: {e}", path.display()));
    serde_json::from_slice(&bytes).unwrap_or_else(|e| panic!("parse {}: {e}", path.display()))
}

fn read_bytes(path: &Path) -> Vec<u8> {
    fs::read(path).unwrap_or_else(|e| panic!("read {}: {e}", path.display()))
}

/// Epoch rows of a JSONL metrics log (the leading config-echo line dropped).
fn epoch_rows(path: &Path, key: &str) -> Vec<serde_json::Value> {
    let text = fs::read_to_string(path).unwrap_or_else(|e| panic!("read {}: {e}", path.display()));
    text.lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).expect("metrics line"))
        .filter(|v| v.get(key).is_some())
        .collect()
}

// ----- shared trained fixture for the learnability gates -----

/// 512 pairs, 8 classes, 64-dim feature images, vocabulary of 200 tokens;
/// 30 epochs single-threaded. The held-out test split holds 128 pairs.
const TOY_CONFIG: &str = "\
seed = 11

[model]
d_tok = 32
d_share = 32
layers = 2
heads = 2
max_len = 64
image_input_dim = 64

[training]
batch_size = 32
epochs = 30
lr_initial = 1e-3
lr_after = 1e-4
lr_switch_epoch = 25
";

struct TrainedToy {
    _dir: TempDir,
    corpus: String,
    checkpoint: String,
    metrics: std::path::PathBuf,
    train_seconds: f64,
}

static TOY: OnceLock<TrainedToy> = OnceLock::new();

fn trained_toy() -> &'static TrainedToy {
    TOY.get_or_init(|| {
        let dir = TempDir::new().unwrap();
        let corpus = dir.path().join("corpus").to_str().unwrap().to_string();
        run_ok(&[
            "gen-toy", "--out", &corpus, "--samples", "512", "--classes", "8",
            "--feature-dim", "64", "--seed", "11",
        ]);
        let config = dir.path().join("toy.toml");
        fs::write(&config, TOY_CONFIG).unwrap();
        let run_dir = dir.path().join("run").to_str().unwrap().to_string();
        let start = Instant::now();
        run_ok(&[
            "train-retrieval", "--config", config.to_str().unwrap(), "--corpus", &corpus,
            "--out", &run_dir, "--deterministic",
        ]);
        let train_seconds = start.elapsed().as_secs_f64();
        TrainedToy {
            checkpoint: format!("{run_dir}/checkpoint-30.bin"),
            metrics: Path::new(&run_dir).join("metrics.jsonl"),
            corpus,
            _dir: dir,
            train_seconds,
        }
    })
}

/// Runs `eval-retrieval` on the shared toy checkpoint with extra flags and
/// returns the report document.
fn eval_toy(extra: &[&str], out_name: &str) -> serde_json::Value {
    let toy = trained_toy();
    let out = toy._dir.path().join(out_name);
    let mut args = vec![
        "eval-retrieval", "--checkpoint", &toy.checkpoint, "--corpus", &toy.corpus,
        "--split", "test", "--pool", "full",
    ];
    args.extend_from_slice(extra);
    let out_str = out.to_str().unwrap().to_string();
    args.extend_from_slice(&["--out", &out_str]);
    run_ok(&args);
    read_json(&out)
}

fn direction(report: &serde_json::Value, dir: &str) -> (f64, f64) {
    let d = &report[dir];
    (d["med_r"].as_f64().unwrap(), d["r_at_1"].as_f64().unwrap())
}

// ----- gate 1: loss formulas match hand-computed fixtures -----

/// Small but complete configuration for the generator/discriminator fixtures.
fn gan_fixture_config() -> RunConfig {
    let mut config = RunConfig { seed: 11, ..RunConfig::default() };
    config.model.d_tok = 8;
    config.model.d_share = 6;
    config.model.layers = 1;
    config.model.heads = 2;
    config.model.max_len = 16;
    config.model.image_size = 8;
    config.model.image_input_dim = 12;
    config.synthesis.gen_image_size = 8;
    config.synthesis.gen_channels = 4;
    config.synthesis.disc_channels = 2;
    config.synthesis.d_ca = 3;
    config.synthesis.d_z = 2;
    config
}

fn zero_prefix<F: crossmodal::Real>(params: &mut ParamSet<F>, prefix: &str) {
    let names: Vec<String> = params.names().cloned().collect();
    for name in names {
        if name.starts_with(prefix) {
            for v in params.get_mut(&name).data_mut() {
                *v = F::zero();
            }
        }
    }
}

#[test]
fn criterion_01_loss_values_match_hand_computed_fixtures() {
    let tol = 1e-6;

    // Margin triplet on unit vectors with known cosines.
    let triplet = |p: [f64; 2], n: [f64; 2]| -> f64 {
        let tape = Tape::new();
        let a = tape.constant(Tensor::vector(vec![1.0, 0.0]));
        let p = tape.constant(Tensor::vector(p.to_vec()));
        let n = tape.constant(Tensor::vector(n.to_vec()));
        tape.scalar_value(triplet_loss(&tape, a, p, n, 0.3))
    };
    // cos(a,p)=1, cos(a,n)=0: margin satisfied.
    assert!(triplet([1.0, 0.0], [0.0, 1.0]).abs() <= tol);
    // cos(a,p)=cos(a,n): a tie costs exactly the margin.
    assert!((triplet([0.6, 0.8], [0.6, 0.8]) - 0.3).abs() <= tol);
    // cos(a,p)=0.2, cos(a,n)=0.6: 0.6 - 0.2 + 0.3.
    assert!((triplet([0.2, 0.96f64.sqrt()], [0.6, 0.8]) - 0.7).abs() <= tol);

    // Diagonal-Gaussian KL against the standard normal.
    let kl = |mu: Vec<f64>, sigma: Vec<f64>| -> f64 {
        let tape = Tape::new();
        let mu = tape.constant(Tensor::vector(mu));
        let sigma = tape.constant(Tensor::vector(sigma));
        tape.scalar_value(kl_loss(&tape, mu, sigma).unwrap())
    };
    assert!(kl(vec![0.0; 3], vec![1.0; 3]).abs() <= tol);
    assert!((kl(vec![1.0; 4], vec![1.0; 4]) - 2.0).abs() <= tol);
    let spread = kl(vec![0.0], vec![std::f64::consts::E.sqrt()]);
    assert!((spread - 0.5 * (std::f64::consts::E - 2.0)).abs() <= tol);
    assert!((spread - 0.3591).abs() <= 1e-4);

    // Two-target cosine-distance supervision.
    let supervision = |f: &[f64], v1: &[f64], v2: &[f64]| -> f64 {
        let tape = Tape::new();
        let fv = tape.constant(Tensor::vector(f.to_vec()));
        tape.scalar_value(supervision_terms(&tape, fv, v1, v2))
    };
    assert!(supervision(&[1.0, 0.0], &[1.0, 0.0], &[1.0, 0.0]).abs() <= tol);
    assert!((supervision(&[0.0, 1.0], &[1.0, 0.0], &[1.0, 0.0]) - 2.0).abs() <= tol);
    let v2 = [0.5, 0.75f64.sqrt()];
    assert!((supervision(&[1.0, 0.0], &[1.0, 0.0], &v2) - 0.5).abs() <= tol);

    // Discriminator on all-zero parameters: probability one half everywhere,
    // uniform class logits.
    let config = gan_fixture_config();
    let mut params: ParamSet<f64> = init_gan_params(&config, 4, 3).unwrap();
    zero_prefix(&mut params, "disc.");
    let dims = GanDims::new(&config, 4).unwrap();
    let s = dims.image_size;
    let disc = |params: &ParamSet<f64>, lambda_c: f64, real: f64, fake: f64| -> f64 {
        let tape = Tape::new();
        let vars = TapeVars::bind(&tape, params);
        let real = tape.constant(Tensor::full(vec![3, s, s], real));
        let fake = tape.constant(Tensor::full(vec![3, s, s], fake));
        tape.scalar_value(discriminator_loss(&tape, &vars, &dims, real, fake, 1, lambda_c).unwrap())
    };
    assert!((disc(&params, 0.0, 0.8, 0.2) - 2.0 * 2.0f64.ln()).abs() <= tol);
    assert!((disc(&params, 1.0, 0.8, 0.2) - (2.0 * 2.0f64.ln() + 2.0 * 4.0f64.ln())).abs() <= tol);

    // A hand-built brightness discriminator saturates both probabilities at
    // the clamp limits: the loss collapses to -2 log(1 - 1e-7).
    let config2 = gan_fixture_config();
    let mut perfect: ParamSet<f64> = init_gan_params(&config2, 2, 3).unwrap();
    zero_prefix(&mut perfect, "disc.");
    for name in ["disc.conv1.k", "disc.conv2.k", "disc.conv3.k", "disc.real.w"] {
        for v in perfect.get_mut(name).data_mut() {
            *v = 1.0;
        }
    }
    perfect.get_mut("disc.real.b").data_mut()[0] = -30.0;
    let dims2 = GanDims::new(&config2, 2).unwrap();
    let saturated = {
        let tape = Tape::new();
        let vars = TapeVars::bind(&tape, &perfect);
        let real = tape.constant(Tensor::full(vec![3, s, s], 1.0));
        let fake = tape.constant(Tensor::full(vec![3, s, s], 0.0));
        tape.scalar_value(discriminator_loss(&tape, &vars, &dims2, real, fake, 0, 0.0).unwrap())
    };
    assert!((saturated - (-2.0 * (1.0 - 1e-7f64).ln())).abs() <= tol);

    // Generator with every auxiliary weight off against the zeroed
    // discriminator: log(1/2) saturating, -log(1/2) non-saturating.
    let mut gconfig = gan_fixture_config();
    gconfig.synthesis.lambda_c = 0.0;
    gconfig.synthesis.lambda_ca = 0.0;
    gconfig.synthesis.lambda_ret = 0.0;
    let mut gparams: ParamSet<f64> = init_gan_params(&gconfig, 2, 3).unwrap();
    zero_prefix(&mut gparams, "disc.");
    let gdims = GanDims::new(&gconfig, 2).unwrap();
    let retrieval: ParamSet<f64> =
        init_retrieval_params(&gconfig.model, 50, Some(gdims.image_size), 1);
    let gen_total = |config: &RunConfig| -> f64 {
        let tape = Tape::new();
        let vars = TapeVars::bind(&tape, &gparams);
        let frozen = TapeVars::bind(&tape, &retrieval);
        let noise = Tensor::zeros(vec![1, gdims.d_ca]);
        let z = Tensor::zeros(vec![1, gdims.d_z]);
        let v = vec![0.2; gdims.d_share];
        let parts =
            generator_loss(&tape, &vars, &frozen, config, &gdims, &v, &v, &noise, &z, 0).unwrap();
        tape.scalar_value(parts.total)
    };
    assert!((gen_total(&gconfig) - 0.5f64.ln()).abs() <= tol);
    gconfig.synthesis.non_saturating = true;
    assert!((gen_total(&gconfig) + 0.5f64.ln()).abs() <= tol);
}

// ----- gate 2: analytic gradients match central finite differences -----

#[test]
fn criterion_02_analytic_gradients_match_finite_differences() {
    let start = Instant::now();

    // Mined batch objective through both encoder towers, 64-bit, B = 4.
    let mut config = RunConfig::default();
    config.model.d_tok = 16;
    config.model.d_share = 16;
    config.model.layers = 1;
    config.model.heads = 2;
    config.model.max_len = 16;
    config.model.image_input_dim = 10;
    let params: ParamSet<f64> = init_retrieval_params(&config.model, 30, None, 77);
    let seqs: Vec<TokenSequence> = [
        vec![2u32, 5, 9, 3],
        vec![2, 7, 7, 1, 14],
        vec![2, 22, 6],
        vec![2, 11, 29, 8, 4, 17],
    ]
    .into_iter()
    .map(|ids| TokenSequence { ids, word_spans: vec![], words: vec![] })
    .collect();
    let mut rng = seeded(202, "accept-grad-images");
    let images: Vec<Tensor<f64>> = (0..4)
        .map(|_| {
            Tensor::matrix(1, 10, (0..10).map(|_| rng.gen_range(-1.0..1.0)).collect())
        })
        .collect();
    let model = config.model.clone();
    let batch_value = |p: &ParamSet<f64>| -> f64 {
        let tape = Tape::new();
        let vars = TapeVars::bind(&tape, p);
        let text: Vec<_> = seqs
            .iter()
            .map(|s| encode_recipe_forward(&tape, &vars, &model, s).embedding)
            .collect();
        let image: Vec<_> = images
            .iter()
            .map(|t| encode_image_forward(&tape, &vars, &model, tape.constant(t.clone()), false).embedding)
            .collect();
        tape.scalar_value(batch_loss(&tape, &text, &image, 0.3).0)
    };
    let analytic = {
        let tape = Tape::new();
        let vars = TapeVars::bind(&tape, &params);
        let text: Vec<_> = seqs
            .iter()
            .map(|s| encode_recipe_forward(&tape, &vars, &model, s).embedding)
            .collect();
        let image: Vec<_> = images
            .iter()
            .map(|t| encode_image_forward(&tape, &vars, &model, tape.constant(t.clone()), false).embedding)
            .collect();
        let (loss, _) = batch_loss(&tape, &text, &image, 0.3);
        let grads = tape.backward(loss);
        vars.grads_by_name(&grads)
    };
    let report = check_gradients(&params, batch_value, &analytic, 1e-5, 4, 101);
    assert!(
        report.max_rel_error <= 1e-4,
        "batch objective: worst {} at {}",
        report.max_rel_error,
        report.worst_tensor
    );

    // KL through the conditioning-augmentation maps alone.
    let mut gconfig = gan_fixture_config();
    gconfig.model.d_tok = 16;
    gconfig.model.d_share = 16;
    gconfig.synthesis.d_ca = 6;
    gconfig.synthesis.d_z = 4;
    let full: ParamSet<f64> = init_gan_params(&gconfig, 2, 55).unwrap();
    let mut ca_only: ParamSet<f64> = ParamSet::new();
    for (name, tensor) in full.iter() {
        if name.starts_with("ca.") {
            ca_only.insert(name, tensor.clone());
        }
    }
    let dims = GanDims::new(&gconfig, 2).unwrap();
    let mut rng = seeded(303, "accept-grad-ca");
    let v_data: Vec<f64> = (0..dims.d_share).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let kl_value = |p: &ParamSet<f64>| -> f64 {
        let tape = Tape::new();
        let vars = TapeVars::bind(&tape, p);
        let v = tape.constant(Tensor::matrix(1, dims.d_share, v_data.clone()));
        let ca = ca_forward(&tape, &vars, v, &Tensor::zeros(vec![1, dims.d_ca]));
        tape.scalar_value(kl_loss(&tape, ca.mu, ca.sigma).unwrap())
    };
    let analytic = {
        let tape = Tape::new();
        let vars = TapeVars::bind(&tape, &ca_only);
        let v = tape.constant(Tensor::matrix(1, dims.d_share, v_data.clone()));
        let ca = ca_forward(&tape, &vars, v, &Tensor::zeros(vec![1, dims.d_ca]));
        let loss = kl_loss(&tape, ca.mu, ca.sigma).unwrap();
        let grads = tape.backward(loss);
        vars.grads_by_name(&grads)
    };
    let report = check_gradients(&ca_only, kl_value, &analytic, 1e-5, 6, 303);
    assert!(
        report.max_rel_error <= 1e-4,
        "KL: worst {} at {}",
        report.max_rel_error,
        report.worst_tensor
    );

    // Full generator objective including the frozen-tower supervision term.
    let mut gen_config = gan_fixture_config();
    gen_config.model.d_tok = 16;
    gen_config.model.d_share = 16;
    gen_config.synthesis.lambda_ret = 2.0;
    let gen_params: ParamSet<f64> = init_gan_params(&gen_config, 2, 13).unwrap();
    let gen_dims = GanDims::new(&gen_config, 2).unwrap();
    let retrieval: ParamSet<f64> =
        init_retrieval_params(&gen_config.model, 50, Some(gen_dims.image_size), 2);
    let mut rng = seeded(404, "accept-grad-gen");
    let vec_of = |rng: &mut crossmodal::rng::ChaCha8Rng, n: usize| -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    };
    let v1 = vec_of(&mut rng, gen_dims.d_share);
    let v2 = vec_of(&mut rng, gen_dims.d_share);
    let noise = Tensor::matrix(1, gen_dims.d_ca, vec_of(&mut rng, gen_dims.d_ca));
    let z = Tensor::matrix(1, gen_dims.d_z, vec_of(&mut rng, gen_dims.d_z));
    let gen_value = |p: &ParamSet<f64>| -> f64 {
        let tape = Tape::new();
        let vars = TapeVars::bind(&tape, p);
        let frozen = TapeVars::bind(&tape, &retrieval);
        let parts = generator_loss(
            &tape, &vars, &frozen, &gen_config, &gen_dims, &v1, &v2, &noise, &z, 1,
        )
        .unwrap();
        tape.scalar_value(parts.total)
    };
    let analytic = {
        let tape = Tape::new();
        let vars = TapeVars::bind(&tape, &gen_params);
        let frozen = TapeVars::bind(&tape, &retrieval);
        let parts = generator_loss(
            &tape, &vars, &frozen, &gen_config, &gen_dims, &v1, &v2, &noise, &z, 1,
        )
        .unwrap();
        let grads = tape.backward(parts.total);
        vars.grads_by_name(&grads)
    };
    let report = check_gradients(&gen_params, gen_value, &analytic, 1e-5, 6, 404);
    assert!(
        report.max_rel_error <= 1e-3,
        "generator: worst {} at {}",
        report.max_rel_error,
        report.worst_tensor
    );

    let elapsed = start.elapsed().as_secs_f64();
    assert!(elapsed < 120.0, "gradient suite took {elapsed:.1}s");
}

// ----- gate 3: mining equals a brute-force argmax oracle -----

#[test]
fn criterion_03_mining_matches_exhaustive_argmax_oracle() {
    fn cos(a: &[f32], b: &[f32]) -> f32 {
        let dot: f32 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|x| x * x).sum::<f32>().sqrt();
        let nb = b.iter().map(|y| y * y).sum::<f32>().sqrt();
        dot / (na * nb)
    }
    // Ascending scan keeping strict improvements only: ties stay at the
    // lowest index.
    fn hardest(anchor: &[f32], others: &[Vec<f32>], skip: usize) -> usize {
        let mut best = usize::MAX;
        let mut best_sim = f32::NEG_INFINITY;
        for (j, o) in others.iter().enumerate() {
            if j == skip {
                continue;
            }
            let s = cos(anchor, o);
            if s > best_sim {
                best_sim = s;
                best = j;
            }
        }
        best
    }

    let mut rng = seeded(301, "mining-oracle");
    for trial in 0..200 {
        let b = 2 + (trial % 15);
        let vec_of = |rng: &mut crossmodal::rng::ChaCha8Rng| -> Vec<f32> {
            (0..8).map(|_| rng.gen_range(-1.0f32..1.0)).collect()
        };
        let text: Vec<Vec<f32>> = (0..b).map(|_| vec_of(&mut rng)).collect();
        let image: Vec<Vec<f32>> = (0..b).map(|_| vec_of(&mut rng)).collect();
        let report = mine_hard_negatives(&text, &image);
        assert_eq!(report.candidates, 2 * b * (b - 1));
        for i in 0..b {
            assert_eq!(
                report.text_to_image[i],
                hardest(&text[i], &image, i),
                "text anchor {i} of batch {b} (trial {trial})"
            );
            assert_eq!(
                report.image_to_text[i],
                hardest(&image[i], &text, i),
                "image anchor {i} of batch {b} (trial {trial})"
            );
        }
    }
}

// ----- gate 4: rank metrics equal a sort-based oracle -----

#[test]
fn criterion_04_rank_metrics_match_sort_oracle() {
    let mut rng = seeded(401, "rank-oracle");
    for trial in 0..100 {
        let n = 50;
        let sim: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let transposed: Vec<Vec<f64>> =
            (0..n).map(|j| (0..n).map(|i| sim[i][j]).collect()).collect();

        for rows in [&sim, &transposed] {
            let lib_ranks: Vec<usize> =
                (0..n).map(|i| rank_of_true_pair(&rows[i], i)).collect();

            // Oracle rank: position of the true score in the descending sort.
            let oracle_ranks: Vec<usize> = (0..n)
                .map(|i| {
                    let mut sorted = rows[i].clone();
                    sorted.sort_by(|a, b| b.total_cmp(a));
                    sorted.partition_point(|&s| s > rows[i][i]) + 1
                })
                .collect();
            assert_eq!(lib_ranks, oracle_ranks, "trial {trial}");

            let lib = metrics_from_ranks(&lib_ranks);
            let mut sorted: Vec<f64> = oracle_ranks.iter().map(|&r| r as f64).collect();
            sorted.sort_by(f64::total_cmp);
            let med = (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0;
            let recall =
                |k: usize| oracle_ranks.iter().filter(|&&r| r <= k).count() as f64 / n as f64;
            assert_eq!(lib.med_r, med, "trial {trial}");
            assert_eq!(lib.r_at_1, recall(1), "trial {trial}");
            assert_eq!(lib.r_at_5, recall(5), "trial {trial}");
            assert_eq!(lib.r_at_10, recall(10), "trial {trial}");
            assert!(lib.r_at_1 <= lib.r_at_5 && lib.r_at_5 <= lib.r_at_10, "trial {trial}");
        }
    }
}

// ----- gate 5: distribution distance identity, symmetry, closed forms -----

#[test]
fn criterion_05_distribution_distance_identity_symmetry_and_closed_forms() {
    let mut rng = seeded(501, "fid-fixtures");
    let set = |rng: &mut crossmodal::rng::ChaCha8Rng| -> Vec<Vec<f64>> {
        (0..30).map(|_| (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
    };
    let a = set(&mut rng);
    let b = set(&mut rng);

    assert!(fid(&a, &a).unwrap().abs() <= 1e-8);
    let ab = fid(&a, &b).unwrap();
    let ba = fid(&b, &a).unwrap();
    assert!((ab - ba).abs() <= 1e-8);
    assert!(ab > 0.0);

    // One-dimensional pairs with exact sample moments. {-h, h} with
    // h = sqrt(1/2) has mean 0 and variance 1; scaling h or shifting the pair
    // moves one moment at a time.
    let h = 0.5f64.sqrt();
    let unit: Vec<Vec<f64>> = vec![vec![-h], vec![h]];
    let wide: Vec<Vec<f64>> = vec![vec![-2.0 * h], vec![2.0 * h]];
    let shifted: Vec<Vec<f64>> = vec![vec![3.0 - h], vec![3.0 + h]];
    // Equal means, variances 1 and 4: (1 + 4) - 2 sqrt(4) = 1.
    assert!((fid(&unit, &wide).unwrap() - 1.0).abs() <= 1e-6);
    // Equal variances, means 0 and 3: squared mean gap 9.
    assert!((fid(&unit, &shifted).unwrap() - 9.0).abs() <= 1e-6);
}

// ----- gate 6: desk-scale learnability -----

#[test]
fn criterion_06_toy_retrieval_reaches_quality_bar() {
    let toy = trained_toy();
    assert!(
        toy.train_seconds < 900.0,
        "training took {:.0}s, budget 900s",
        toy.train_seconds
    );

    let report = eval_toy(&[], "quality.json");
    for dir in ["text_to_image", "image_to_text"] {
        let (med_r, r_at_1) = direction(&report["retrieval"], dir);
        assert!(med_r <= 2.0, "{dir} median rank {med_r}");
        assert!(r_at_1 >= 0.8, "{dir} recall@1 {r_at_1}");
    }

    // The training log's own validation recall agrees that the space aligned.
    let rows = epoch_rows(&toy.metrics, "validation_r1");
    let last = rows.last().expect("validation rows");
    assert!(last["validation_r1"].as_f64().unwrap() >= 0.8);
}

// ----- gate 7: translated queries stay close to the original language -----

#[test]
fn criterion_07_translated_queries_stay_within_tolerance() {
    let report = eval_toy(&["--multilingual"], "multilingual.json");
    let rows = report["multilingual"].as_array().expect("per-language rows");
    assert!(rows.len() >= 2);

    let r1 = |row: &serde_json::Value, dir: &str| row["report"][dir]["r_at_1"].as_f64().unwrap();
    let en = rows
        .iter()
        .find(|r| r["language"] == "EN")
        .expect("original-language row");
    for row in rows {
        let language = row["language"].as_str().unwrap();
        for dir in ["text_to_image", "image_to_text"] {
            let gap = (r1(row, dir) - r1(en, dir)).abs();
            assert!(gap <= 0.1, "{language} {dir} recall@1 deviates by {gap:.3}");
        }
    }
}

// ----- gate 8: ingredient queries beat title queries -----

#[test]
fn criterion_08_ingredient_ablation_beats_title_ablation() {
    let ingredients = eval_toy(&["--ablate-mask", "ingredients"], "ablate-ingredients.json");
    let title = eval_toy(&["--ablate-mask", "title"], "ablate-title.json");
    for dir in ["text_to_image", "image_to_text"] {
        let (_, ing_r1) = direction(&ingredients["retrieval"], dir);
        let (_, title_r1) = direction(&title["retrieval"], dir);
        assert!(
            ing_r1 > title_r1,
            "{dir}: ingredients-only recall@1 {ing_r1} vs title-only {title_r1}"
        );
    }
}

// ----- gate 9: embedding supervision makes generated images retrievable -----

/// Pixel-image run: 128 pairs, 4 classes, 8x8 images; spatial augmentation is
/// disabled because the toy images encode identity in fixed cell positions.
const PIXEL_CONFIG: &str = "\
seed = 13

[model]
d_tok = 32
d_share = 32
layers = 2
heads = 2
max_len = 64
image_input_dim = 64
image_size = 8

[training]
batch_size = 16
epochs = 60
lr_initial = 1e-3
lr_after = 1e-4
lr_switch_epoch = 45

[augmentation]
resize_size = 8
crop_size = 8
rotation_degrees = 0.0
flip_probability = 0.0

[synthesis]
d_ca = 8
d_z = 8
gen_channels = 16
gen_image_size = 8
disc_channels = 4
epochs = 50
non_saturating = true
lr_initial = 1e-3
lr_after = 3e-4
lr_switch_epoch = 30
";

#[test]
fn criterion_09_supervised_generator_beats_unsupervised() {
    let dir = TempDir::new().unwrap();
    let corpus = dir.path().join("corpus").to_str().unwrap().to_string();
    run_ok(&[
        "gen-toy", "--out", &corpus, "--samples", "128", "--classes", "4", "--pixels",
        "--pixel-size", "8", "--seed", "13",
    ]);
    let config = dir.path().join("pixel.toml");
    fs::write(&config, PIXEL_CONFIG).unwrap();
    // Identically seeded variant with the supervision weight removed.
    let config_off = dir.path().join("pixel-unsupervised.toml");
    fs::write(&config_off, format!("{PIXEL_CONFIG}lambda_ret = 0.0\n")).unwrap();

    let run_dir = dir.path().join("run").to_str().unwrap().to_string();
    run_ok(&[
        "train-retrieval", "--config", config.to_str().unwrap(), "--corpus", &corpus,
        "--out", &run_dir, "--deterministic",
    ]);
    let retrieval_ckpt = format!("{run_dir}/checkpoint-60.bin");

    let mut med_r = Vec::new();
    for (name, config_path) in [("supervised", &config), ("unsupervised", &config_off)] {
        let gan_dir = dir.path().join(name).to_str().unwrap().to_string();
        let start = Instant::now();
        run_ok(&[
            "train-gan", "--config", config_path.to_str().unwrap(), "--corpus", &corpus,
            "--retrieval-checkpoint", &retrieval_ckpt, "--out", &gan_dir, "--deterministic",
        ]);
        let elapsed = start.elapsed().as_secs_f64();
        assert!(elapsed < 1200.0, "{name} run took {elapsed:.0}s, budget 1200s");

        let report_path = dir.path().join(format!("{name}.json"));
        run_ok(&[
            "eval-synthesis", "--gan-checkpoint", &format!("{gan_dir}/gan-checkpoint-50.bin"),
            "--retrieval-checkpoint", &retrieval_ckpt, "--corpus", &corpus,
            "--split", "test", "--pool", "full",
            "--out", report_path.to_str().unwrap(),
        ]);
        let report = read_json(&report_path);
        med_r.push((
            report["synthesis"]["retrieval"]["text_to_image"]["med_r"].as_f64().unwrap(),
            report["synthesis"]["retrieval"]["image_to_text"]["med_r"].as_f64().unwrap(),
        ));

        if name == "supervised" {
            // The supervision term itself must fall substantially while the
            // generator trains.
            let rows = epoch_rows(&Path::new(&gan_dir).join("gan-metrics.jsonl"), "supervision");
            let first = rows.first().unwrap()["supervision"].as_f64().unwrap();
            let last = rows.last().unwrap()["supervision"].as_f64().unwrap();
            assert!(
                last <= 0.5 * first,
                "supervision fell only from {first:.4} to {last:.4}"
            );
        }
    }

    let (sup, unsup) = (med_r[0], med_r[1]);
    assert!(
        sup.0 < unsup.0,
        "synthetic-image median rank: supervised {} vs unsupervised {}",
        sup.0,
        unsup.0
    );
    assert!(
        sup.1 < unsup.1,
        "synthetic-text median rank: supervised {} vs unsupervised {}",
        sup.1,
        unsup.1
    );
}

// ----- gate 10: equal seeds reproduce runs byte for byte -----

const DETERMINISM_RETRIEVAL_CONFIG: &str = "\
seed = 5

[model]
d_tok = 16
d_share = 16
layers = 1
heads = 2
max_len = 32
image_input_dim = 48

[training]
batch_size = 8
epochs = 3
lr_initial = 1e-3
";

const DETERMINISM_GAN_CONFIG: &str = "\
seed = 7

[model]
d_tok = 16
d_share = 16
layers = 1
heads = 2
max_len = 32
image_input_dim = 32
image_size = 8

[training]
batch_size = 8
epochs = 0
lr_initial = 1e-3

[augmentation]
resize_size = 8
crop_size = 8
rotation_degrees = 0.0
flip_probability = 0.0

[synthesis]
d_ca = 4
d_z = 4
gen_channels = 4
gen_image_size = 8
disc_channels = 2
epochs = 2
";

#[test]
fn criterion_10_equal_seeds_give_byte_identical_runs() {
    let dir = TempDir::new().unwrap();

    // Retrieval trainer on a feature corpus.
    let corpus = dir.path().join("corpus").to_str().unwrap().to_string();
    run_ok(&[
        "gen-toy", "--out", &corpus, "--samples", "16", "--classes", "2", "--feature-dim", "48",
        "--seed", "3",
    ]);
    let config = dir.path().join("retrieval.toml");
    fs::write(&config, DETERMINISM_RETRIEVAL_CONFIG).unwrap();
    let mut run_dirs = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name).to_str().unwrap().to_string();
        run_ok(&[
            "train-retrieval", "--config", config.to_str().unwrap(), "--corpus", &corpus,
            "--out", &out, "--deterministic",
        ]);
        run_dirs.push(out);
    }
    let mut files = vec!["metrics.jsonl".to_string()];
    files.extend((0..=3).map(|e| format!("checkpoint-{e}.bin")));
    for file in &files {
        assert_eq!(
            read_bytes(&Path::new(&run_dirs[0]).join(file)),
            read_bytes(&Path::new(&run_dirs[1]).join(file)),
            "retrieval runs differ in {file}"
        );
    }

    // GAN trainer on a pixel corpus, conditioned on one frozen checkpoint.
    let pixel_corpus = dir.path().join("pixel-corpus").to_str().unwrap().to_string();
    run_ok(&[
        "gen-toy", "--out", &pixel_corpus, "--samples", "16", "--classes", "2", "--pixels",
        "--pixel-size", "8", "--seed", "22",
    ]);
    let gan_config = dir.path().join("gan.toml");
    fs::write(&gan_config, DETERMINISM_GAN_CONFIG).unwrap();
    let base = dir.path().join("base").to_str().unwrap().to_string();
    run_ok(&[
        "train-retrieval", "--config", gan_config.to_str().unwrap(), "--corpus", &pixel_corpus,
        "--out", &base, "--deterministic",
    ]);
    let ckpt = format!("{base}/checkpoint-0.bin");
    let mut gan_dirs = Vec::new();
    for name in ["gan-a", "gan-b"] {
        let out = dir.path().join(name).to_str().unwrap().to_string();
        run_ok(&[
            "train-gan", "--config", gan_config.to_str().unwrap(), "--corpus", &pixel_corpus,
            "--retrieval-checkpoint", &ckpt, "--out", &out, "--deterministic",
        ]);
        gan_dirs.push(out);
    }
    let mut files = vec!["gan-metrics.jsonl".to_string()];
    files.extend((0..=2).map(|e| format!("gan-checkpoint-{e}.bin")));
    for file in &files {
        assert_eq!(
            read_bytes(&Path::new(&gan_dirs[0]).join(file)),
            read_bytes(&Path::new(&gan_dirs[1]).join(file)),
            "generator runs differ in {file}"
        );
    }
}

// ----- gate 11: rollout weights form a distribution over words -----

#[test]
fn criterion_11_attention_weights_form_a_distribution() {
    let vocab = toy_vocabulary(4);
    let words: Vec<&str> = vocab.word_tokens().collect();
    let mut model = RunConfig::default().model;
    model.d_tok = 16;
    model.d_share = 12;
    model.layers = 2;
    model.heads = 2;
    model.max_len = 64;
    let params: ParamSet<f32> = init_retrieval_params(&model, vocab.len(), None, 99);

    let mut rng = seeded(601, "rollout-texts");
    for _ in 0..100 {
        let n_words = rng.gen_range(3..=8);
        let text: Vec<&str> =
            (0..n_words).map(|_| words[rng.gen_range(0..words.len())]).collect();
        let seq = encode_recipe(&text.join(" "), &vocab, model.max_len);
        let (_, attention) = embed_recipe(&params, &model, &seq);
        let weights = attention_rollout(&attention, &seq);
        assert_eq!(weights.len(), seq.words.len());
        assert!(weights.iter().all(|&w| w >= 0.0));
        let total: f64 = weights.iter().sum();
        assert!((total - 1.0).abs() <= 1e-6, "weights sum to {total}");
    }

    // Identity attention leaves no mass off the aggregate position, so the
    // fallback spreads weight by span length: spans of 1 and 2 pieces give
    // exactly (1/3, 2/3).
    let seq = TokenSequence {
        ids: vec![0; 4],
        word_spans: vec![(0, 1), (1, 3)],
        words: vec!["a".into(), "b".into()],
    };
    let mut eye = Tensor::zeros(vec![1, 4, 4]);
    for i in 0..4 {
        eye.data_mut()[i * 4 + i] = 1.0f64;
    }
    let weights = attention_rollout(&[eye.clone(), eye], &seq);
    assert!((weights[0] - 1.0 / 3.0).abs() <= 1e-6);
    assert!((weights[1] - 2.0 / 3.0).abs() <= 1e-6);
}
