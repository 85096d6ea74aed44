//! The two embedding towers: a small transformer over recipe token sequences
//! and a projection head over image features (with an optional pixel
//! frontend), meeting in one shared projection layer.
//!
//! Both towers end in the same `shared.*` parameters, so gradients from
//! either modality move the same final layer. Forward passes run on a
//! [`Tape`]; plain-value helpers cover inference-only paths.

use crate::autograd::{Tape, Var};
use crate::config::ModelConfig;
use crate::corpus::ImageData;
use crate::params::{glorot_init, uniform_init, ParamSet, TapeVars};
use crate::rng::seeded_sub;
use crate::tensor::{Real, Tensor};
use crate::tokenizer::TokenSequence;

/// Name of the intermediate image activation used as the statistics feature
/// space for distribution comparisons.
pub const FID_EXTRACTOR_LABEL: &str = "image_head_fc1";

const LN_EPS: f64 = 1e-5;
const EMBEDDING_INIT_RANGE: f64 = 0.05;

/// Initializes every parameter of the retrieval model. Embedding tables are
/// uniform in [-0.05, 0.05], linear weights Glorot-uniform, biases zero,
/// layer-norm gains one. `pixel_size` adds a flatten-projective frontend for
/// pixel corpora.
pub fn init_retrieval_params<F: Real>(
    model: &ModelConfig,
    vocab_size: usize,
    pixel_size: Option<usize>,
    seed: u64,
) -> ParamSet<F> {
    assert!(model.d_tok.is_multiple_of(model.heads), "head count must divide d_tok");
    let mut params = ParamSet::new();
    let mut stream = 0u64;
    let rng = |label: &str, s: &mut u64| {
        *s += 1;
        seeded_sub(seed, label, *s - 1)
    };
    let e = EMBEDDING_INIT_RANGE;
    params.insert(
        "text.token_embedding",
        uniform_init(vec![vocab_size, model.d_tok], -e, e, &mut rng("init-emb", &mut stream)),
    );
    params.insert(
        "text.position_embedding",
        uniform_init(vec![model.max_len, model.d_tok], -e, e, &mut rng("init-emb", &mut stream)),
    );
    let d = model.d_tok;
    for l in 0..model.layers {
        let p = format!("text.layer{l}");
        for name in ["wq", "wk", "wv", "wo"] {
            params.insert(
                format!("{p}.attn.{name}"),
                glorot_init(d, d, &mut rng("init-attn", &mut stream)),
            );
            params.insert(format!("{p}.attn.b{}", &name[1..]), Tensor::zeros(vec![d]));
        }
        for ln in ["ln1", "ln2"] {
            params.insert(format!("{p}.{ln}.gamma"), Tensor::full(vec![d], F::one()));
            params.insert(format!("{p}.{ln}.beta"), Tensor::zeros(vec![d]));
        }
        params.insert(
            format!("{p}.ffn.w1"),
            glorot_init(d, 4 * d, &mut rng("init-ffn", &mut stream)),
        );
        params.insert(format!("{p}.ffn.b1"), Tensor::zeros(vec![4 * d]));
        params.insert(
            format!("{p}.ffn.w2"),
            glorot_init(4 * d, d, &mut rng("init-ffn", &mut stream)),
        );
        params.insert(format!("{p}.ffn.b2"), Tensor::zeros(vec![d]));
    }
    params.insert(
        "text.head.w",
        glorot_init(d, model.d_share, &mut rng("init-head", &mut stream)),
    );
    params.insert("text.head.b", Tensor::zeros(vec![model.d_share]));
    if let Some(size) = pixel_size {
        params.insert(
            "image.frontend.w",
            glorot_init(3 * size * size, model.image_input_dim, &mut rng("init-frontend", &mut stream)),
        );
        params.insert("image.frontend.b", Tensor::zeros(vec![model.image_input_dim]));
    }
    params.insert(
        "image.head.w",
        glorot_init(model.image_input_dim, model.d_share, &mut rng("init-head", &mut stream)),
    );
    params.insert("image.head.b", Tensor::zeros(vec![model.d_share]));
    params.insert(
        "shared.w",
        glorot_init(model.d_share, model.d_share, &mut rng("init-shared", &mut stream)),
    );
    params.insert("shared.b", Tensor::zeros(vec![model.d_share]));
    params
}

/// Whether a parameter set carries the pixel frontend.
pub fn has_pixel_frontend<F: Real>(params: &ParamSet<F>) -> bool {
    params.contains("image.frontend.w")
}

fn linear(tape: &Tape<impl Real>, x: Var, w: Var, b: Var) -> Var {
    tape.add_row(tape.matmul(x, w), b)
}

/// Final stage of both towers: the shared projection, then optional L2
/// normalization. Returns a 1-D embedding.
fn shared_tail<F: Real>(
    tape: &Tape<F>,
    vars: &TapeVars,
    model: &ModelConfig,
    hidden: Var,
) -> Var {
    let projected = linear(tape, hidden, vars.v("shared.w"), vars.v("shared.b"));
    let flat = tape.reshape(projected, vec![model.d_share]);
    if model.normalize_embeddings {
        let sq = tape.dot(flat, flat);
        let inv_norm = tape.exp(tape.scale(tape.ln(tape.add_scalar(sq, F::from_f64(1e-24))), F::from_f64(-0.5)));
        tape.scale_by(flat, inv_norm)
    } else {
        flat
    }
}

/// Output of the recipe tower: the shared-space embedding plus per-layer
/// attention maps (`[heads, T, T]`, plain values) for diagnostics.
pub struct TextEncoding<F: Real> {
    pub embedding: Var,
    pub attention: Vec<Tensor<F>>,
}

/// Runs the recipe tower over an encoded token sequence.
///
/// Token plus learned position embeddings feed `layers` post-norm transformer
/// blocks; the output state at the leading aggregate position goes through a
/// tanh head into the shared projection.
pub fn encode_recipe_forward<F: Real>(
    tape: &Tape<F>,
    vars: &TapeVars,
    model: &ModelConfig,
    seq: &TokenSequence,
) -> TextEncoding<F> {
    let t_len = seq.ids.len();
    assert!(t_len >= 1 && t_len <= model.max_len, "sequence length {t_len} out of range");
    let ids: Vec<usize> = seq.ids.iter().map(|&i| i as usize).collect();
    let positions: Vec<usize> = (0..t_len).collect();
    let tok = tape.gather_rows(vars.v("text.token_embedding"), &ids);
    let pos = tape.gather_rows(vars.v("text.position_embedding"), &positions);
    let mut state = tape.add(tok, pos);

    let d_head = model.d_tok / model.heads;
    let scale = F::from_f64(1.0 / (d_head as f64).sqrt());
    let eps = F::from_f64(LN_EPS);
    let mut attention = Vec::with_capacity(model.layers);

    for l in 0..model.layers {
        let p = format!("text.layer{l}");
        let q = linear(tape, state, vars.v(&format!("{p}.attn.wq")), vars.v(&format!("{p}.attn.bq")));
        let k = linear(tape, state, vars.v(&format!("{p}.attn.wk")), vars.v(&format!("{p}.attn.bk")));
        let v = linear(tape, state, vars.v(&format!("{p}.attn.wv")), vars.v(&format!("{p}.attn.bv")));

        let mut layer_attn = Vec::with_capacity(model.heads * t_len * t_len);
        let mut head_outputs: Option<Var> = None;
        for h in 0..model.heads {
            let (lo, hi) = (h * d_head, (h + 1) * d_head);
            let qh = tape.col_slice(q, lo, hi);
            let kh = tape.col_slice(k, lo, hi);
            let vh = tape.col_slice(v, lo, hi);
            let scores = tape.scale(tape.matmul(qh, tape.transpose(kh)), scale);
            let probs = tape.softmax_rows(scores);
            layer_attn.extend_from_slice(tape.value(probs).data());
            let out = tape.matmul(probs, vh);
            head_outputs = Some(match head_outputs {
                None => out,
                Some(acc) => tape.concat(acc, out),
            });
        }
        attention.push(Tensor::new(vec![model.heads, t_len, t_len], layer_attn));

        let attn_out = linear(
            tape,
            head_outputs.unwrap(),
            vars.v(&format!("{p}.attn.wo")),
            vars.v(&format!("{p}.attn.bo")),
        );
        let after_attn = tape.layer_norm(
            tape.add(state, attn_out),
            vars.v(&format!("{p}.ln1.gamma")),
            vars.v(&format!("{p}.ln1.beta")),
            eps,
        );
        let ffn = linear(
            tape,
            tape.gelu(linear(
                tape,
                after_attn,
                vars.v(&format!("{p}.ffn.w1")),
                vars.v(&format!("{p}.ffn.b1")),
            )),
            vars.v(&format!("{p}.ffn.w2")),
            vars.v(&format!("{p}.ffn.b2")),
        );
        state = tape.layer_norm(
            tape.add(after_attn, ffn),
            vars.v(&format!("{p}.ln2.gamma")),
            vars.v(&format!("{p}.ln2.beta")),
            eps,
        );
    }

    let cls = tape.reshape(tape.row(state, seq.cls_position()), vec![1, model.d_tok]);
    let hidden = tape.tanh(linear(tape, cls, vars.v("text.head.w"), vars.v("text.head.b")));
    let embedding = shared_tail(tape, vars, model, hidden);
    TextEncoding { embedding, attention }
}

/// Output of the image tower: the shared-space embedding and the first
/// head activation (the statistics feature space).
pub struct ImageEncoding {
    pub embedding: Var,
    pub fc1: Var,
}

/// Converts stored image data to the tower's input tensor: features become
/// `[1, n]` rows, pixels stay `[3, h, w]` for the frontend.
pub fn image_input_tensor<F: Real>(data: &ImageData) -> Tensor<F> {
    match data {
        ImageData::Feature(f) => Tensor::matrix(1, f.len(), f.iter().map(|&x| F::from_f64(x as f64)).collect()),
        ImageData::Pixels(p) => p.cast(),
    }
}

/// Runs the image tower. `input` is a `[1, image_input_dim]` feature row or a
/// `[3, h, w]` pixel volume (requires the frontend parameters). With `linear`
/// set, tanh stages are skipped, leaving an affine map for calibration
/// checks.
pub fn encode_image_forward<F: Real>(
    tape: &Tape<F>,
    vars: &TapeVars,
    model: &ModelConfig,
    input: Var,
    linear_mode: bool,
) -> ImageEncoding {
    let shape = tape.value(input).shape().to_vec();
    let feature = match shape.len() {
        2 => {
            assert_eq!(shape, [1, model.image_input_dim], "feature input shape mismatch");
            input
        }
        3 => {
            let flat = tape.reshape(input, vec![1, shape.iter().product()]);
            // Center [0, 1] pixel values to [-1, 1]: an all-positive input
            // otherwise gives every image a large shared embedding component
            // that starves cosine-based training of gradient.
            let centered = tape.scale(tape.add_scalar(flat, F::from_f64(-0.5)), F::from_f64(2.0));
            let pre = linear(tape, centered, vars.v("image.frontend.w"), vars.v("image.frontend.b"));
            if linear_mode {
                pre
            } else {
                tape.tanh(pre)
            }
        }
        _ => panic!("image input must be a feature row or a pixel volume"),
    };
    let pre_fc1 = linear(tape, feature, vars.v("image.head.w"), vars.v("image.head.b"));
    let fc1 = if linear_mode { pre_fc1 } else { tape.tanh(pre_fc1) };
    let embedding = shared_tail(tape, vars, model, fc1);
    ImageEncoding { embedding, fc1 }
}

/// Plain-value embedding of a token sequence (no gradients).
pub fn embed_recipe<F: Real>(
    params: &ParamSet<F>,
    model: &ModelConfig,
    seq: &TokenSequence,
) -> (Vec<F>, Vec<Tensor<F>>) {
    let tape = Tape::new();
    let vars = TapeVars::bind(&tape, params);
    let out = encode_recipe_forward(&tape, &vars, model, seq);
    ((*tape.value(out.embedding)).clone().into_data(), out.attention)
}

/// Plain-value embedding of an image record (no gradients). Also returns the
/// statistics-space activation.
pub fn embed_image<F: Real>(
    params: &ParamSet<F>,
    model: &ModelConfig,
    data: &ImageData,
) -> (Vec<F>, Vec<F>) {
    let tape = Tape::new();
    let vars = TapeVars::bind(&tape, params);
    let input = tape.constant(image_input_tensor(data));
    let out = encode_image_forward(&tape, &vars, model, input, false);
    (
        (*tape.value(out.embedding)).clone().into_data(),
        (*tape.value(out.fc1)).clone().into_data(),
    )
}

/// Attribution of the aggregate position back to input words.
///
/// Per layer: head-averaged attention, mixed half with the identity,
/// row-renormalized; the layer matrices multiply into a rollout, whose
/// aggregate-position row (aggregate column dropped) is renormalized and
/// summed over each word's piece span. Falls back to uniform weights when the
/// remaining mass vanishes. Weights are non-negative and sum to 1 (empty for
/// a bare sequence with no words).
pub fn attention_rollout<F: Real>(attention: &[Tensor<F>], seq: &TokenSequence) -> Vec<f64> {
    if seq.words.is_empty() {
        return Vec::new();
    }
    let t_len = seq.ids.len();
    // Rollout product, starting from the identity.
    let mut rollout = vec![0.0f64; t_len * t_len];
    for i in 0..t_len {
        rollout[i * t_len + i] = 1.0;
    }
    for layer in attention {
        let shape = layer.shape();
        assert_eq!(&shape[1..], [t_len, t_len], "attention map size mismatch");
        let heads = shape[0];
        // Head-average, mix with identity, renormalize rows.
        let mut mixed = vec![0.0f64; t_len * t_len];
        for h in 0..heads {
            for (k, m) in mixed.iter_mut().enumerate() {
                *m += layer.data()[h * t_len * t_len + k].to_f64() / heads as f64;
            }
        }
        for i in 0..t_len {
            let row = &mut mixed[i * t_len..(i + 1) * t_len];
            for (j, x) in row.iter_mut().enumerate() {
                *x = 0.5 * *x + if i == j { 0.5 } else { 0.0 };
            }
            let sum: f64 = row.iter().sum();
            for x in row.iter_mut() {
                *x /= sum;
            }
        }
        // rollout = mixed * rollout (later layers on the left).
        let mut next = vec![0.0f64; t_len * t_len];
        for i in 0..t_len {
            for k in 0..t_len {
                let m = mixed[i * t_len + k];
                if m != 0.0 {
                    for j in 0..t_len {
                        next[i * t_len + j] += m * rollout[k * t_len + j];
                    }
                }
            }
        }
        rollout = next;
    }
    let cls = seq.cls_position();
    let mut piece_weights: Vec<f64> = (0..t_len)
        .filter(|&j| j != cls)
        .map(|j| rollout[cls * t_len + j])
        .collect();
    let mass: f64 = piece_weights.iter().sum();
    if mass < 1e-12 {
        let uniform = 1.0 / piece_weights.len() as f64;
        piece_weights.iter_mut().for_each(|w| *w = uniform);
    } else {
        piece_weights.iter_mut().for_each(|w| *w /= mass);
    }
    seq.word_spans
        .iter()
        .map(|&(s, e)| piece_weights[s..e].iter().sum())
        .collect()
}
