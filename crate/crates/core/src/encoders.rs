//! Query, text, vision and fusion encoders.
//!
//! The query encoder and the video-text encoder are one module with one set of
//! weights (token-embedding average followed by a fully connected layer). The
//! vision encoder is a two-layer perceptron over precomputed frame features.
//! The fusion module is a single multi-head self-attention layer over the
//! two-token sequence `(text, vision)`, average-pooled. Every encoder output is
//! L2-normalized.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{self, Reader, Writer};
use crate::error::{MbvrError, Result};
use crate::numcore::{PairAttentionInputs, Tape, Tensor, Var};

pub type TokenId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub token_dim: usize,
    pub vision_input_dim: usize,
    pub vision_hidden: usize,
    pub embed_dim: usize,
    pub heads: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 1000,
            token_dim: 32,
            vision_input_dim: 32,
            vision_hidden: 64,
            embed_dim: 64,
            heads: 4,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.vocab_size,
            self.token_dim,
            self.vision_input_dim,
            self.vision_hidden,
            self.embed_dim,
            self.heads,
        ];
        if dims.contains(&0) {
            return Err(MbvrError::Config(format!(
                "model dimensions must be positive: {self:?}"
            )));
        }
        if !self.embed_dim.is_multiple_of(self.heads) {
            return Err(MbvrError::Config(format!(
                "heads ({}) must divide embed_dim ({})",
                self.heads, self.embed_dim
            )));
        }
        Ok(())
    }
}

/// Shared by the query encoder and the video-text encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEncoderParams {
    /// `[vocab_size, token_dim]`
    pub token_embeddings: Tensor,
    /// `[token_dim, embed_dim]`
    pub projection: Tensor,
    /// `[embed_dim]`
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VisionEncoderParams {
    /// `[vision_input_dim, vision_hidden]`
    pub hidden_w: Tensor,
    pub hidden_b: Tensor,
    /// `[vision_hidden, embed_dim]`
    pub out_w: Tensor,
    pub out_b: Tensor,
}

/// One self-attention layer over two tokens. Projections are `[d, d]` with
/// `[d]` biases; `heads` splits `d` into equal contiguous slices.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionParams {
    pub heads: usize,
    pub query_w: Tensor,
    pub query_b: Tensor,
    pub key_w: Tensor,
    pub key_b: Tensor,
    pub value_w: Tensor,
    pub value_b: Tensor,
    pub out_w: Tensor,
    pub out_b: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub text: TextEncoderParams,
    pub vision: VisionEncoderParams,
    pub fusion: FusionParams,
}

/// Which representation stands in for a video.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VideoRepr {
    /// `H(F_t(t), F_v(v))`
    Fused,
    TextOnly,
    VisionOnly,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

impl ModelParams {
    /// Uniform `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` initialization. Token
    /// embeddings are looked up by a one-hot input, so their fan-in is 1.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ModelConfig {
            vocab_size: v,
            token_dim: dt,
            vision_input_dim: di,
            vision_hidden: h,
            embed_dim: d,
            heads,
        } = config;
        let text = TextEncoderParams {
            token_embeddings: uniform(&mut rng, &[v, dt], 1),
            projection: uniform(&mut rng, &[dt, d], dt),
            bias: uniform(&mut rng, &[d], dt),
        };
        let vision = VisionEncoderParams {
            hidden_w: uniform(&mut rng, &[di, h], di),
            hidden_b: uniform(&mut rng, &[h], di),
            out_w: uniform(&mut rng, &[h, d], h),
            out_b: uniform(&mut rng, &[d], h),
        };
        let fusion = FusionParams {
            heads,
            query_w: uniform(&mut rng, &[d, d], d),
            query_b: uniform(&mut rng, &[d], d),
            key_w: uniform(&mut rng, &[d, d], d),
            key_b: uniform(&mut rng, &[d], d),
            value_w: uniform(&mut rng, &[d, d], d),
            value_b: uniform(&mut rng, &[d], d),
            out_w: uniform(&mut rng, &[d, d], d),
            out_b: uniform(&mut rng, &[d], d),
        };
        Ok(ModelParams {
            config,
            text,
            vision,
            fusion,
        })
    }

    /// All parameter tensors with stable names, in checkpoint order.
    pub fn named(&self) -> Vec<(&'static str, &Tensor)> {
        let (t, v, f) = (&self.text, &self.vision, &self.fusion);
        vec![
            ("text.token_embeddings", &t.token_embeddings),
            ("text.projection", &t.projection),
            ("text.bias", &t.bias),
            ("vision.hidden_w", &v.hidden_w),
            ("vision.hidden_b", &v.hidden_b),
            ("vision.out_w", &v.out_w),
            ("vision.out_b", &v.out_b),
            ("fusion.query_w", &f.query_w),
            ("fusion.query_b", &f.query_b),
            ("fusion.key_w", &f.key_w),
            ("fusion.key_b", &f.key_b),
            ("fusion.value_w", &f.value_w),
            ("fusion.value_b", &f.value_b),
            ("fusion.out_w", &f.out_w),
            ("fusion.out_b", &f.out_b),
        ]
    }

    pub fn named_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        let (t, v, f) = (&mut self.text, &mut self.vision, &mut self.fusion);
        vec![
            ("text.token_embeddings", &mut t.token_embeddings),
            ("text.projection", &mut t.projection),
            ("text.bias", &mut t.bias),
            ("vision.hidden_w", &mut v.hidden_w),
            ("vision.hidden_b", &mut v.hidden_b),
            ("vision.out_w", &mut v.out_w),
            ("vision.out_b", &mut v.out_b),
            ("fusion.query_w", &mut f.query_w),
            ("fusion.query_b", &mut f.query_b),
            ("fusion.key_w", &mut f.key_w),
            ("fusion.key_b", &mut f.key_b),
            ("fusion.value_w", &mut f.value_w),
            ("fusion.value_b", &mut f.value_b),
            ("fusion.out_w", &mut f.out_w),
            ("fusion.out_b", &mut f.out_b),
        ]
    }

    fn expected_shapes(c: &ModelConfig) -> Vec<Vec<usize>> {
        let d = c.embed_dim;
        vec![
            vec![c.vocab_size, c.token_dim],
            vec![c.token_dim, d],
            vec![d],
            vec![c.vision_input_dim, c.vision_hidden],
            vec![c.vision_hidden],
            vec![c.vision_hidden, d],
            vec![d],
            vec![d, d],
            vec![d],
            vec![d, d],
            vec![d],
            vec![d, d],
            vec![d],
            vec![d, d],
            vec![d],
        ]
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        if self.fusion.heads != self.config.heads {
            return Err(MbvrError::Config("fusion heads disagree with config".into()));
        }
        for ((name, t), shape) in self.named().into_iter().zip(Self::expected_shapes(&self.config)) {
            if t.shape() != shape.as_slice() {
                return Err(MbvrError::Shape(format!(
                    "{name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    /// Records every parameter on `tape`, differentiable iff `trainable`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> ModelVars {
        let mut put = |t: &Tensor| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        let (t, v, f) = (&self.text, &self.vision, &self.fusion);
        ModelVars {
            text: TextVars {
                token_embeddings: put(&t.token_embeddings),
                projection: put(&t.projection),
                bias: put(&t.bias),
                vocab_size: self.config.vocab_size,
            },
            vision: VisionVars {
                hidden_w: put(&v.hidden_w),
                hidden_b: put(&v.hidden_b),
                out_w: put(&v.out_w),
                out_b: put(&v.out_b),
                input_dim: self.config.vision_input_dim,
            },
            fusion: FusionVars {
                heads: f.heads,
                query_w: put(&f.query_w),
                query_b: put(&f.query_b),
                key_w: put(&f.key_w),
                key_b: put(&f.key_b),
                value_w: put(&f.value_w),
                value_b: put(&f.value_b),
                out_w: put(&f.out_w),
                out_b: put(&f.out_b),
            },
        }
    }

    /// Stable identifier derived from the checkpoint bytes.
    pub fn fingerprint(&self) -> String {
        codec::short_hash(&self.to_bytes())
    }
}

/// Token sequences flattened for the tape, with per-sequence offsets.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBatch {
    ids: Vec<usize>,
    offsets: Vec<usize>,
}

impl TokenBatch {
    pub fn new<'a, I>(sequences: I, vocab_size: usize) -> Result<Self>
    where
        I: IntoIterator<Item = &'a [TokenId]>,
    {
        let mut ids = Vec::new();
        let mut offsets = vec![0];
        for (i, seq) in sequences.into_iter().enumerate() {
            if seq.is_empty() {
                return Err(MbvrError::InvalidArgument(format!("token sequence {i} is empty")));
            }
            for &tok in seq {
                if tok as usize >= vocab_size {
                    return Err(MbvrError::InvalidArgument(format!(
                        "token id {tok} is outside the vocabulary of {vocab_size}"
                    )));
                }
                ids.push(tok as usize);
            }
            offsets.push(ids.len());
        }
        Ok(TokenBatch { ids, offsets })
    }

    pub fn len(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TextVars {
    pub token_embeddings: Var,
    pub projection: Var,
    pub bias: Var,
    vocab_size: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct VisionVars {
    pub hidden_w: Var,
    pub hidden_b: Var,
    pub out_w: Var,
    pub out_b: Var,
    input_dim: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct FusionVars {
    pub heads: usize,
    pub query_w: Var,
    pub query_b: Var,
    pub key_w: Var,
    pub key_b: Var,
    pub value_w: Var,
    pub value_b: Var,
    pub out_w: Var,
    pub out_b: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct ModelVars {
    pub text: TextVars,
    pub vision: VisionVars,
    pub fusion: FusionVars,
}

impl ModelVars {
    /// Leaf handles in the same order as [`ModelParams::named`].
    pub fn leaves(&self) -> Vec<Var> {
        let (t, v, f) = (&self.text, &self.vision, &self.fusion);
        vec![
            t.token_embeddings,
            t.projection,
            t.bias,
            v.hidden_w,
            v.hidden_b,
            v.out_w,
            v.out_b,
            f.query_w,
            f.query_b,
            f.key_w,
            f.key_b,
            f.value_w,
            f.value_b,
            f.out_w,
            f.out_b,
        ]
    }
}

impl TextVars {
    /// `l2_normalize(mean(token embeddings) · W + b)` for each sequence.
    pub fn encode(&self, tape: &mut Tape, tokens: &TokenBatch) -> Result<Var> {
        if tokens.ids.iter().any(|&t| t >= self.vocab_size) {
            return Err(MbvrError::InvalidArgument("token id outside the vocabulary".into()));
        }
        let rows = tape.gather_rows(self.token_embeddings, &tokens.ids);
        let pooled = tape.segment_mean(rows, &tokens.offsets);
        let projected = tape.matmul(pooled, self.projection);
        let biased = tape.add_row(projected, self.bias);
        tape.l2_normalize_rows(biased)
    }
}

impl VisionVars {
    /// `features` is `[n, vision_input_dim]`.
    pub fn encode(&self, tape: &mut Tape, features: Var) -> Result<Var> {
        let width = tape.value(features).cols();
        if width != self.input_dim {
            return Err(MbvrError::Shape(format!(
                "vision features have width {width}, expected {}",
                self.input_dim
            )));
        }
        let h = tape.matmul(features, self.hidden_w);
        let h = tape.add_row(h, self.hidden_b);
        let h = tape.relu(h);
        let out = tape.matmul(h, self.out_w);
        let out = tape.add_row(out, self.out_b);
        tape.l2_normalize_rows(out)
    }
}

/// Query/key/value projections of one modality token for a batch of rows.
#[derive(Debug, Clone, Copy)]
pub struct ProjectedTokens {
    pub query: Var,
    pub key: Var,
    pub value: Var,
}

impl ProjectedTokens {
    fn gather(&self, tape: &mut Tape, rows: &[usize]) -> ProjectedTokens {
        ProjectedTokens {
            query: tape.gather_rows(self.query, rows),
            key: tape.gather_rows(self.key, rows),
            value: tape.gather_rows(self.value, rows),
        }
    }
}

impl FusionVars {
    /// Projects `[n, d]` token embeddings once; the projections can then be
    /// recombined across rows without further matrix products.
    pub fn project(&self, tape: &mut Tape, tokens: Var) -> ProjectedTokens {
        let mut affine = |w, b| {
            let x = tape.matmul(tokens, w);
            tape.add_row(x, b)
        };
        ProjectedTokens {
            query: affine(self.query_w, self.query_b),
            key: affine(self.key_w, self.key_b),
            value: affine(self.value_w, self.value_b),
        }
    }

    fn attention_inputs(&self, text: &ProjectedTokens, vision: &ProjectedTokens) -> PairAttentionInputs {
        PairAttentionInputs {
            query_a: text.query,
            key_a: text.key,
            value_a: text.value,
            query_b: vision.query,
            key_b: vision.key,
            value_b: vision.value,
            heads: self.heads,
        }
    }

    /// Fuses row `text_rows[i]` of `text` with row `vision_rows[i]` of
    /// `vision` for every `i`; `None` pairs rows one-to-one.
    pub fn fuse_projected(
        &self,
        tape: &mut Tape,
        text: &ProjectedTokens,
        vision: &ProjectedTokens,
        rows: Option<(&[usize], &[usize])>,
    ) -> Result<Var> {
        let (text, vision) = match rows {
            Some((t_rows, v_rows)) => {
                if t_rows.len() != v_rows.len() {
                    return Err(MbvrError::Shape("fusion row selections differ in length".into()));
                }
                (text.gather(tape, t_rows), vision.gather(tape, v_rows))
            }
            None => {
                if tape.value(text.query).shape() != tape.value(vision.query).shape() {
                    return Err(MbvrError::Shape("text and vision token batches differ".into()));
                }
                (*text, *vision)
            }
        };
        let pooled = tape.pair_attention(self.attention_inputs(&text, &vision));
        let out = tape.matmul(pooled, self.out_w);
        let out = tape.add_row(out, self.out_b);
        tape.l2_normalize_rows(out)
    }

    pub fn fuse(&self, tape: &mut Tape, text: Var, vision: Var) -> Result<Var> {
        if tape.value(text).shape() != tape.value(vision).shape() {
            return Err(MbvrError::Shape(format!(
                "fusion inputs have shapes {:?} and {:?}",
                tape.value(text).shape(),
                tape.value(vision).shape()
            )));
        }
        let t = self.project(tape, text);
        let v = self.project(tape, vision);
        self.fuse_projected(tape, &t, &v, None)
    }

    /// Per-row, per-head attention weights `[[t→t, t→v], [v→t, v→v]]`.
    pub fn attention_weights(&self, tape: &mut Tape, text: Var, vision: Var) -> Vec<[[f64; 2]; 2]> {
        let t = self.project(tape, text);
        let v = self.project(tape, vision);
        tape.pair_attention_weights(&self.attention_inputs(&t, &v))
    }
}

fn single_row(t: Tensor) -> Tensor {
    Tensor::vector(t.into_data())
}

fn as_row(features: &[f64]) -> Tensor {
    Tensor::matrix(1, features.len(), features.to_vec()).expect("row shape")
}

/// Query embedding `F_q(q)`.
pub fn encode_query(tokens: &[TokenId], params: &TextEncoderParams) -> Result<Tensor> {
    let vocab = params.token_embeddings.rows();
    let batch = TokenBatch::new([tokens], vocab)?;
    let mut tape = Tape::new();
    let vars = TextVars {
        token_embeddings: tape.constant(params.token_embeddings.clone()),
        projection: tape.constant(params.projection.clone()),
        bias: tape.constant(params.bias.clone()),
        vocab_size: vocab,
    };
    let out = vars.encode(&mut tape, &batch)?;
    Ok(single_row(tape.value(out).clone()))
}

/// Video-text embedding `F_t(t)`: the query encoder applied to the video's text.
pub fn encode_text(tokens: &[TokenId], params: &TextEncoderParams) -> Result<Tensor> {
    encode_query(tokens, params)
}

/// Vision embedding `F_v(v)`.
pub fn encode_vision(features: &[f64], params: &VisionEncoderParams) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars = VisionVars {
        hidden_w: tape.constant(params.hidden_w.clone()),
        hidden_b: tape.constant(params.hidden_b.clone()),
        out_w: tape.constant(params.out_w.clone()),
        out_b: tape.constant(params.out_b.clone()),
        input_dim: params.hidden_w.rows(),
    };
    let x = tape.constant(as_row(features));
    let out = vars.encode(&mut tape, x)?;
    Ok(single_row(tape.value(out).clone()))
}

fn bind_fusion(tape: &mut Tape, params: &FusionParams) -> FusionVars {
    FusionVars {
        heads: params.heads,
        query_w: tape.constant(params.query_w.clone()),
        query_b: tape.constant(params.query_b.clone()),
        key_w: tape.constant(params.key_w.clone()),
        key_b: tape.constant(params.key_b.clone()),
        value_w: tape.constant(params.value_w.clone()),
        value_b: tape.constant(params.value_b.clone()),
        out_w: tape.constant(params.out_w.clone()),
        out_b: tape.constant(params.out_b.clone()),
    }
}

/// `H(text_emb, vision_emb)`.
pub fn fuse(text_emb: &[f64], vision_emb: &[f64], params: &FusionParams) -> Result<Tensor> {
    let d = params.out_w.cols();
    if text_emb.len() != d || vision_emb.len() != d {
        return Err(MbvrError::Shape(format!(
            "fusion expects two {d}-vectors, got {} and {}",
            text_emb.len(),
            vision_emb.len()
        )));
    }
    let mut tape = Tape::new();
    let vars = bind_fusion(&mut tape, params);
    let t = tape.constant(as_row(text_emb));
    let v = tape.constant(as_row(vision_emb));
    let out = vars.fuse(&mut tape, t, v)?;
    Ok(single_row(tape.value(out).clone()))
}

/// Attention weights of a single `(text, vision)` pair, one entry per head.
pub fn fusion_attention_weights(text_emb: &[f64], vision_emb: &[f64], params: &FusionParams) -> Vec<[[f64; 2]; 2]> {
    let mut tape = Tape::new();
    let vars = bind_fusion(&mut tape, params);
    let t = tape.constant(as_row(text_emb));
    let v = tape.constant(as_row(vision_emb));
    vars.attention_weights(&mut tape, t, v)
}

/// `F_m(m) = H(F_t(t), F_v(v))`.
pub fn encode_video(tokens: &[TokenId], features: &[f64], params: &ModelParams) -> Result<Tensor> {
    let t = encode_text(tokens, &params.text)?;
    let v = encode_vision(features, &params.vision)?;
    fuse(t.data(), v.data(), &params.fusion)
}

/// Per-video embeddings `[n, d]` for every part of the video encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoEmbeddings {
    pub text: Tensor,
    pub vision: Tensor,
    pub fused: Tensor,
}

impl VideoEmbeddings {
    pub fn select(&self, repr: VideoRepr) -> &Tensor {
        match repr {
            VideoRepr::Fused => &self.fused,
            VideoRepr::TextOnly => &self.text,
            VideoRepr::VisionOnly => &self.vision,
        }
    }
}

const ENCODE_CHUNK: usize = 512;

fn concat_rows(parts: Vec<Tensor>, cols: usize) -> Tensor {
    let rows: usize = parts.iter().map(|p| p.rows()).sum();
    let mut data = Vec::with_capacity(rows * cols);
    for p in parts {
        data.extend(p.into_data());
    }
    Tensor::matrix(rows, cols, data).expect("row concatenation")
}

/// Batched forward pass over many videos, without gradients.
pub fn encode_videos(params: &ModelParams, tokens: &[&[TokenId]], features: &[&[f64]]) -> Result<VideoEmbeddings> {
    if tokens.len() != features.len() {
        return Err(MbvrError::Shape("token and feature counts differ".into()));
    }
    let d = params.config.embed_dim;
    let (mut ts, mut vs, mut ms) = (Vec::new(), Vec::new(), Vec::new());
    for start in (0..tokens.len()).step_by(ENCODE_CHUNK) {
        let end = (start + ENCODE_CHUNK).min(tokens.len());
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape, false);
        let batch = TokenBatch::new(tokens[start..end].iter().copied(), params.config.vocab_size)?;
        let t = vars.text.encode(&mut tape, &batch)?;
        let feats = feature_matrix(&features[start..end], params.config.vision_input_dim)?;
        let x = tape.constant(feats);
        let v = vars.vision.encode(&mut tape, x)?;
        let m = vars.fusion.fuse(&mut tape, t, v)?;
        ts.push(tape.value(t).clone());
        vs.push(tape.value(v).clone());
        ms.push(tape.value(m).clone());
    }
    Ok(VideoEmbeddings {
        text: concat_rows(ts, d),
        vision: concat_rows(vs, d),
        fused: concat_rows(ms, d),
    })
}

/// Batched query embeddings `[n, d]`, without gradients.
pub fn encode_queries(params: &ModelParams, tokens: &[&[TokenId]]) -> Result<Tensor> {
    let d = params.config.embed_dim;
    let mut parts = Vec::new();
    for chunk in tokens.chunks(ENCODE_CHUNK) {
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape, false);
        let batch = TokenBatch::new(chunk.iter().copied(), params.config.vocab_size)?;
        let q = vars.text.encode(&mut tape, &batch)?;
        parts.push(tape.value(q).clone());
    }
    Ok(concat_rows(parts, d))
}

/// Stacks feature vectors into an `[n, width]` matrix.
pub fn feature_matrix(features: &[&[f64]], width: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(features.len() * width);
    for f in features {
        if f.len() != width {
            return Err(MbvrError::Shape(format!(
                "vision features have width {}, expected {width}",
                f.len()
            )));
        }
        data.extend_from_slice(f);
    }
    Tensor::matrix(features.len(), width, data)
}

const TENSOR_NAMES: [&str; 15] = [
    "text.token_embeddings",
    "text.projection",
    "text.bias",
    "vision.hidden_w",
    "vision.hidden_b",
    "vision.out_w",
    "vision.out_b",
    "fusion.query_w",
    "fusion.query_b",
    "fusion.key_w",
    "fusion.key_b",
    "fusion.value_w",
    "fusion.value_b",
    "fusion.out_w",
    "fusion.out_b",
];

const CHECKPOINT_MAGIC: &[u8; 8] = b"MBVRCKPT";
const CHECKPOINT_VERSION: u32 = 1;

/// Bytes taken by the fixed checkpoint header (magic, version, six config
/// fields, tensor count).
pub const CHECKPOINT_HEADER_LEN: usize = 8 + 4 + 6 * 4 + 4;

impl ModelParams {
    /// Checkpoint layout, all little-endian:
    ///
    /// ```text
    /// magic "MBVRCKPT" | version u32 | vocab u32 | token_dim u32 | vision_in u32
    /// | vision_hidden u32 | embed_dim u32 | heads u32 | count u32
    /// then per tensor: name (u32 len + utf8) | ndim u32 | dims u64* | f64 data
    /// ```
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION);
        let c = &self.config;
        for v in [
            c.vocab_size,
            c.token_dim,
            c.vision_input_dim,
            c.vision_hidden,
            c.embed_dim,
            c.heads,
        ] {
            w.u32(v as u32);
        }
        let named = self.named();
        w.u32(named.len() as u32);
        for (name, t) in named {
            w.str(name);
            w.u32(t.shape().len() as u32);
            for &s in t.shape() {
                w.u64(s as u64);
            }
            w.f64s(t.data());
        }
        w.into_inner()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.expect_magic(CHECKPOINT_MAGIC)?;
        r.expect_version(CHECKPOINT_VERSION)?;
        let config_at = r.offset();
        let mut dims = [0usize; 6];
        for d in dims.iter_mut() {
            *d = r.u32()? as usize;
        }
        let config = ModelConfig {
            vocab_size: dims[0],
            token_dim: dims[1],
            vision_input_dim: dims[2],
            vision_hidden: dims[3],
            embed_dim: dims[4],
            heads: dims[5],
        };
        config
            .validate()
            .map_err(|e| MbvrError::format(config_at, e.to_string()))?;
        let count_at = r.offset();
        let count = r.u32()? as usize;
        let expected = ModelParams::expected_shapes(&config);
        if count != expected.len() {
            return Err(MbvrError::format(
                count_at,
                format!("expected {} tensors, found {count}", expected.len()),
            ));
        }
        let mut tensors = Vec::with_capacity(count);
        for (name, shape) in TENSOR_NAMES.iter().zip(expected) {
            let name_at = r.offset();
            let got = r.str()?;
            if got != *name {
                return Err(MbvrError::format(
                    name_at,
                    format!("expected tensor {name}, found {got}"),
                ));
            }
            let shape_at = r.offset();
            let ndim = r.u32()? as usize;
            if ndim != shape.len() {
                return Err(MbvrError::format(
                    shape_at,
                    format!("{name} has rank {ndim}, expected {}", shape.len()),
                ));
            }
            let mut got_shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                got_shape.push(r.u64()? as usize);
            }
            if got_shape != shape {
                return Err(MbvrError::format(
                    shape_at,
                    format!("{name} has shape {got_shape:?}, expected {shape:?}"),
                ));
            }
            let data = r.f64s(shape.iter().product())?;
            tensors.push(Tensor::new(shape, data)?);
        }
        let mut it = tensors.into_iter();
        let mut next = || it.next().expect("tensor count checked");
        let params = ModelParams {
            config,
            text: TextEncoderParams {
                token_embeddings: next(),
                projection: next(),
                bias: next(),
            },
            vision: VisionEncoderParams {
                hidden_w: next(),
                hidden_b: next(),
                out_w: next(),
                out_b: next(),
            },
            fusion: FusionParams {
                heads: config.heads,
                query_w: next(),
                query_b: next(),
                key_w: next(),
                key_b: next(),
                value_w: next(),
                value_b: next(),
                out_w: next(),
                out_b: next(),
            },
        };
        r.finish()?;
        Ok(params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        ModelParams::from_bytes(&fs::read(path)?)
    }
}
