//! One binary driving the whole pipeline: toy corpus generation, the two
//! training stages, retrieval and synthesis evaluation, and tokenizer or
//! attention debug echoes. Logs go to stderr; data goes to files only.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crossmodal::checkpoint;
use crossmodal::config::RunConfig;
use crossmodal::corpus::{
    corpus_image_mode, generate_toy_corpus, generate_toy_corpus_pixels, load_corpus, save_corpus,
    select_split, split_corpus, toy_vocabulary, write_png, ComponentMask, ImageData, ImageMode,
    Language, PairedSample, SplitManifest,
};
use crossmodal::encoders::{attention_rollout, embed_recipe};
use crossmodal::evaluation::{
    eval_embeddings, export_embeddings_tsv, multilingual_eval, retrieval_report, synthesis_eval,
    SynthesisSource,
};
use crossmodal::rng::ChaCha8Rng;
use crossmodal::synthesis::{generate_image, train_gan};
use crossmodal::tensor::Tensor;
use crossmodal::tokenizer::{encode_recipe, load_vocab, save_vocab, Vocabulary};
use crossmodal::training::train_retrieval;
use crossmodal::{Error, Result};

#[derive(Parser)]
#[command(name = "crossmodal", version, about = "Cross-modal recipe/image pipeline")]
struct Cli {
    /// Override the seed from the config file (or the built-in default).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Single-threaded execution; outputs become byte-reproducible.
    #[arg(long, global = true)]
    deterministic: bool,

    /// Worker threads for parallel sections; 0 uses all cores.
    #[arg(long, global = true, default_value_t = 0)]
    workers: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic paired corpus with train/validation/test splits.
    GenToy(GenToyArgs),
    /// Train the two-tower retrieval model.
    TrainRetrieval(TrainRetrievalArgs),
    /// Evaluate retrieval on a split and write a JSON report.
    EvalRetrieval(EvalRetrievalArgs),
    /// Train the conditional image generator against a frozen retrieval model.
    TrainGan(TrainGanArgs),
    /// Evaluate generated images (embedding retrieval and FID) and write a JSON report.
    EvalSynthesis(EvalSynthesisArgs),
    /// Echo the piece and word-span breakdown of a text.
    Tokenize(TokenizeArgs),
    /// Print per-word attention rollout weights for a text.
    Attn(AttnArgs),
}

#[derive(Args)]
struct GenToyArgs {
    /// Output directory for corpus.jsonl, manifest.json, vocab.txt.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 512)]
    samples: usize,
    #[arg(long, default_value_t = 8)]
    classes: usize,
    /// Image feature length (feature mode).
    #[arg(long, default_value_t = 64)]
    feature_dim: usize,
    /// Emit square RGB pixel images instead of feature vectors.
    #[arg(long)]
    pixels: bool,
    /// Pixel image side length (pixel mode).
    #[arg(long, default_value_t = 32)]
    pixel_size: usize,
    /// Train,validation,test fractions; must sum to 1.
    #[arg(long, default_value = "0.7,0.05,0.25")]
    fractions: String,
}

#[derive(Args)]
struct TrainRetrievalArgs {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Corpus directory from gen-toy (or the same layout).
    #[arg(long)]
    corpus: PathBuf,
    /// Output directory for checkpoints and the metrics log.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalRetrievalArgs {
    /// Retrieval checkpoint; its embedded config drives the evaluation.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// Corpus split to evaluate.
    #[arg(long, default_value = "test")]
    split: String,
    /// Candidate pool size: 1k, 10k, full, or an integer.
    #[arg(long, default_value = "full")]
    pool: String,
    /// Evaluate translated recipes of one language instead of the originals.
    #[arg(long)]
    language: Option<String>,
    /// Encode only these recipe components (comma-separated subset of
    /// title,ingredients,instructions).
    #[arg(long)]
    ablate_mask: Option<String>,
    /// Add a per-language report section covering every corpus language.
    #[arg(long)]
    multilingual: bool,
    /// Report path.
    #[arg(long, default_value = "retrieval-report.json")]
    out: PathBuf,
    /// Also dump every text/image embedding as TSV.
    #[arg(long)]
    export_embeddings: Option<PathBuf>,
}

#[derive(Args)]
struct TrainGanArgs {
    /// Optional TOML override; its model section must match the checkpoint.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    corpus: PathBuf,
    /// Trained retrieval checkpoint providing the frozen embedding towers.
    #[arg(long)]
    retrieval_checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalSynthesisArgs {
    /// Generator checkpoint from train-gan (not needed with --oracle).
    #[arg(long)]
    gan_checkpoint: Option<PathBuf>,
    /// Retrieval checkpoint providing the embedding towers.
    #[arg(long)]
    retrieval_checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    /// Conditioning source: recipe or image.
    #[arg(long, default_value = "recipe")]
    source: String,
    /// Candidate pool size: 1k, 10k, full, or an integer.
    #[arg(long, default_value = "full")]
    pool: String,
    /// Replace the generator with one that returns each sample's real image.
    #[arg(long)]
    oracle: bool,
    /// Dump every generated image as PNG plus an index.jsonl into this directory.
    #[arg(long)]
    dump_images: Option<PathBuf>,
    /// Report path.
    #[arg(long, default_value = "synthesis-report.json")]
    out: PathBuf,
}

#[derive(Args)]
struct TokenizeArgs {
    /// Vocabulary file, one token per line.
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long)]
    text: String,
    /// Maximum sequence length including the leading [CLS].
    #[arg(long, default_value_t = 512)]
    max_len: usize,
}

#[derive(Args)]
struct AttnArgs {
    /// Retrieval checkpoint; its embedded config sets the sequence length.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long)]
    text: String,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let threads = if cli.deterministic { 1 } else { cli.workers };
    if threads > 0 {
        // Fails only if a global pool already exists, which cannot happen
        // this early in the process.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenToy(args) => gen_toy(args, cli.seed.unwrap_or(1)),
        Command::TrainRetrieval(args) => run_train_retrieval(args, cli.seed),
        Command::EvalRetrieval(args) => run_eval_retrieval(args, cli.seed),
        Command::TrainGan(args) => run_train_gan(args, cli.seed),
        Command::EvalSynthesis(args) => run_eval_synthesis(args, cli.seed),
        Command::Tokenize(args) => run_tokenize(args),
        Command::Attn(args) => run_attn(args),
    }
}

// ----- shared helpers -----

fn load_corpus_dir(dir: &Path) -> Result<(Vec<PairedSample>, SplitManifest, Vocabulary)> {
    let corpus = load_corpus(&dir.join("corpus.jsonl"))?;
    let manifest = SplitManifest::load(&dir.join("manifest.json"))?;
    let vocab = load_vocab(&dir.join("vocab.txt"))?;
    Ok((corpus, manifest, vocab))
}

fn parse_pool(text: &str, available: usize) -> Result<usize> {
    match text {
        "1k" => Ok(1000),
        "10k" => Ok(10000),
        "full" => Ok(available),
        t => t
            .parse::<usize>()
            .map_err(|_| Error::config(format!("pool must be 1k, 10k, full, or an integer, got {t:?}"))),
    }
}

fn parse_fractions(text: &str) -> Result<(f64, f64, f64)> {
    let parts: Vec<f64> = text
        .split(',')
        .map(|p| {
            p.trim()
                .parse::<f64>()
                .map_err(|_| Error::config(format!("bad split fraction {:?}", p.trim())))
        })
        .collect::<Result<_>>()?;
    match parts.as_slice() {
        [a, b, c] => Ok((*a, *b, *c)),
        _ => Err(Error::config("fractions must be three comma-separated numbers")),
    }
}

fn load_run_checkpoint(path: &Path, seed: Option<u64>) -> Result<(RunConfig, checkpoint::Checkpoint)> {
    let ckpt = checkpoint::load(path)?;
    let mut config = RunConfig::from_json(&ckpt.config)?;
    if let Some(s) = seed {
        config.seed = s;
    }
    Ok((config, ckpt))
}

fn write_report(path: &Path, doc: &serde_json::Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(doc)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

// ----- commands -----

fn gen_toy(args: &GenToyArgs, seed: u64) -> Result<()> {
    let vocab = toy_vocabulary(args.classes);
    let corpus = if args.pixels {
        generate_toy_corpus_pixels(seed, args.samples, args.classes, &vocab, args.pixel_size)?
    } else {
        generate_toy_corpus(seed, args.samples, args.classes, &vocab, args.feature_dim)?
    };
    let manifest = split_corpus(&corpus, parse_fractions(&args.fractions)?, seed)?;
    fs::create_dir_all(&args.out)?;
    save_corpus(&args.out.join("corpus.jsonl"), &corpus)?;
    manifest.save(&args.out.join("manifest.json"))?;
    save_vocab(&args.out.join("vocab.txt"), &vocab)?;
    log::info!(
        "wrote {} samples ({} train / {} validation / {} test), vocab {} to {}",
        corpus.len(),
        manifest.split("train")?.len(),
        manifest.split("validation")?.len(),
        manifest.split("test")?.len(),
        vocab.len(),
        args.out.display()
    );
    Ok(())
}

fn run_train_retrieval(args: &TrainRetrievalArgs, seed: Option<u64>) -> Result<()> {
    let mut config = match &args.config {
        Some(path) => RunConfig::from_toml_path(path)?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        config.seed = s;
    }
    config.validate()?;
    let (corpus, manifest, vocab) = load_corpus_dir(&args.corpus)?;
    let summary = train_retrieval(&corpus, &manifest, &vocab, &config, &args.out)?;
    log::info!(
        "retrieval training finished: {} epochs, final loss {:.6}, checkpoint {}",
        summary.epochs,
        summary.final_loss,
        summary.final_checkpoint.display()
    );
    Ok(())
}

fn run_eval_retrieval(args: &EvalRetrievalArgs, seed: Option<u64>) -> Result<()> {
    let (config, ckpt) = load_run_checkpoint(&args.checkpoint, seed)?;
    let (corpus, manifest, vocab) = load_corpus_dir(&args.corpus)?;
    let samples = select_split(&corpus, &manifest, &args.split)?;
    let pool_size = parse_pool(&args.pool, samples.len())?;
    let n_subsets = config.evaluation.n_subsets;
    let mask = match &args.ablate_mask {
        Some(text) => ComponentMask::parse(text)?,
        None => ComponentMask::ALL,
    };
    let language = args.language.as_deref().map(Language::parse).transpose()?;
    let emb = eval_embeddings(&ckpt.params, &config, &vocab, &samples, mask, language);
    let report = retrieval_report(&emb.text, &emb.image, pool_size, n_subsets, config.seed)?;
    let mut doc = json!({
        "format_version": checkpoint::FORMAT_VERSION,
        "config": config.to_json(),
        "split": args.split,
        "pool_size": pool_size,
        "n_subsets": n_subsets,
        "mask": mask.to_string(),
        "language": language.map(|l| l.code()),
        "retrieval": report,
    });
    if args.multilingual {
        let rows = multilingual_eval(
            &ckpt.params,
            &config,
            &vocab,
            &samples,
            pool_size,
            n_subsets,
            config.seed,
        )?;
        doc["multilingual"] = serde_json::to_value(rows)?;
    }
    if let Some(path) = &args.export_embeddings {
        export_embeddings_tsv(path, &emb)?;
    }
    write_report(&args.out, &doc)?;
    let t2i = &doc["retrieval"]["text_to_image"];
    let i2t = &doc["retrieval"]["image_to_text"];
    log::info!(
        "text-to-image medR {} R@1 {}; image-to-text medR {} R@1 {}; report {}",
        t2i["med_r"],
        t2i["r_at_1"],
        i2t["med_r"],
        i2t["r_at_1"],
        args.out.display()
    );
    Ok(())
}

fn run_train_gan(args: &TrainGanArgs, seed: Option<u64>) -> Result<()> {
    let (retrieval_config, ckpt) = load_run_checkpoint(&args.retrieval_checkpoint, None)?;
    let mut config = match &args.config {
        Some(path) => {
            let file = RunConfig::from_toml_path(path)?;
            if file.model != retrieval_config.model {
                return Err(Error::config(
                    "config model section must match the retrieval checkpoint",
                ));
            }
            file
        }
        None => retrieval_config,
    };
    if let Some(s) = seed {
        config.seed = s;
    }
    config.validate()?;
    let (corpus, manifest, vocab) = load_corpus_dir(&args.corpus)?;
    let summary = train_gan(&corpus, &manifest, &vocab, &ckpt.params, &config, &args.out)?;
    log::info!(
        "generator training finished: {} epochs, final D loss {:.6}, G loss {:.6}, checkpoint {}",
        summary.epochs,
        summary.final_d_loss,
        summary.final_g_loss,
        summary.final_checkpoint.display()
    );
    Ok(())
}

/// Produces the image for sample index `i` from its conditioning embedding.
type SampleGenerator<'a> = Box<dyn FnMut(&[f32], &mut ChaCha8Rng, usize) -> Result<Tensor<f32>> + 'a>;

fn run_eval_synthesis(args: &EvalSynthesisArgs, seed: Option<u64>) -> Result<()> {
    let (config, retrieval_ckpt) = load_run_checkpoint(&args.retrieval_checkpoint, seed)?;
    let (corpus, manifest, vocab) = load_corpus_dir(&args.corpus)?;
    let samples = select_split(&corpus, &manifest, &args.split)?;
    let pool_size = parse_pool(&args.pool, samples.len())?;
    let n_subsets = config.evaluation.n_subsets;
    let source = SynthesisSource::parse(&args.source)?;

    let gan = match (&args.gan_checkpoint, args.oracle) {
        (_, true) => None,
        (Some(path), false) => {
            let (gan_config, gan_ckpt) = load_run_checkpoint(path, seed)?;
            if gan_config.model != config.model {
                return Err(Error::config(
                    "generator and retrieval checkpoints disagree on the model section",
                ));
            }
            Some((gan_config, gan_ckpt))
        }
        (None, false) => {
            return Err(Error::config("eval-synthesis needs --gan-checkpoint or --oracle"))
        }
    };
    if args.oracle {
        let (mode, _) = corpus_image_mode(&corpus)?;
        if mode != ImageMode::Pixels {
            return Err(Error::data("the oracle generator needs a pixel corpus"));
        }
    }

    if let Some(dir) = &args.dump_images {
        fs::create_dir_all(dir)?;
    }
    let mut index = Vec::new();
    let mut next = 0usize;
    let mut inner: SampleGenerator = match &gan {
        None => Box::new(|_, _, i| match &samples[i].first_image().data {
            ImageData::Pixels(p) => Ok(p.clone()),
            ImageData::Feature(_) => unreachable!("pixel mode checked above"),
        }),
        Some((gan_config, gan_ckpt)) => Box::new(|conditioning, rng, _| {
            generate_image(&gan_ckpt.params, gan_config, conditioning, rng)
        }),
    };
    let report = synthesis_eval(
        &retrieval_ckpt.params,
        &config,
        &vocab,
        &samples,
        source,
        pool_size,
        n_subsets,
        config.seed,
        |conditioning, rng| {
            let i = next;
            next += 1;
            let pixels = inner(conditioning, rng, i)?;
            if let Some(dir) = &args.dump_images {
                let name = format!("{}_{i}.png", samples[i].id);
                write_png(&dir.join(&name), &pixels)?;
                index.push(json!({
                    "id": samples[i].id,
                    "z_seed": i,
                    "file": name,
                    "source": source,
                }));
            }
            Ok(pixels)
        },
    )?;
    if let Some(dir) = &args.dump_images {
        let mut lines = String::new();
        for entry in &index {
            lines.push_str(&serde_json::to_string(entry)?);
            lines.push('\n');
        }
        fs::write(dir.join("index.jsonl"), lines)?;
    }
    let doc = json!({
        "format_version": checkpoint::FORMAT_VERSION,
        "config": config.to_json(),
        "split": args.split,
        "oracle": args.oracle,
        "synthesis": report,
    });
    write_report(&args.out, &doc)?;
    log::info!(
        "synthetic-image medR {} R@1 {} FID {}; report {}",
        doc["synthesis"]["retrieval"]["text_to_image"]["med_r"],
        doc["synthesis"]["retrieval"]["text_to_image"]["r_at_1"],
        doc["synthesis"]["fid"],
        args.out.display()
    );
    Ok(())
}

fn run_tokenize(args: &TokenizeArgs) -> Result<()> {
    let vocab = load_vocab(&args.vocab)?;
    let seq = encode_recipe(&args.text, &vocab, args.max_len);
    let mut out = String::new();
    for &id in &seq.ids {
        out.push_str(vocab.token_of(id));
        out.push('\n');
    }
    for (word, (start, end)) in seq.words.iter().zip(&seq.word_spans) {
        out.push_str(&format!("# {word}\t{start}..{end}\n"));
    }
    print!("{out}");
    Ok(())
}

fn run_attn(args: &AttnArgs) -> Result<()> {
    let (config, ckpt) = load_run_checkpoint(&args.checkpoint, None)?;
    let vocab = load_vocab(&args.vocab)?;
    let seq = encode_recipe(&args.text, &vocab, config.model.max_len);
    let (_, attention) = embed_recipe(&ckpt.params, &config.model, &seq);
    let weights = attention_rollout(&attention, &seq);
    let mut out = String::new();
    for (word, weight) in seq.words.iter().zip(&weights) {
        out.push_str(&format!("{word}\t{weight:.6}\n"));
    }
    print!("{out}");
    Ok(())
}
