//! Contrastive objectives: bidirectional in-batch InfoNCE, the auxiliary
//! single-modality losses, modality-shuffled (MS) negatives, the
//! visual-relevance dynamic margin, and the `R_vt` modality-bias ratio.
//!
//! Every batch loss is the arithmetic mean over queries. Scalar helpers work on
//! plain values; the `*_var` functions record onto a [`Tape`] so they can be
//! differentiated.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{FusionVars, ProjectedTokens};
use crate::error::{MbvrError, Result};
use crate::numcore::kernels::{cross_entropy, sigmoid};
use crate::numcore::{cosine_similarity, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Softmax temperature.
    pub tau: f64,
    /// Weight of the query–vision auxiliary loss.
    pub alpha: f64,
    /// Weight of the query–text auxiliary loss.
    pub beta: f64,
    /// Weight of the MS-negative loss.
    pub gamma: f64,
    /// Margin scale.
    pub w: f64,
    /// Margin shift.
    pub b: f64,
    /// MS negatives generated per video.
    pub m: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            tau: 0.07,
            alpha: 0.1,
            beta: 0.1,
            gamma: 0.01,
            w: 0.3,
            b: -0.1,
            m: 32,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(MbvrError::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if self.m == 0 {
            return Err(MbvrError::Config("m must be at least 1".into()));
        }
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("w", self.w),
            ("b", self.b),
        ] {
            if !v.is_finite() {
                return Err(MbvrError::Config(format!("{name} must be finite")));
            }
        }
        Ok(())
    }
}

/// A value together with a flag saying it came from a degenerate input
/// (for example a batch with no negatives) and was set by convention.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Flagged<T> {
    pub value: T,
    pub degenerate: bool,
}

impl<T> Flagged<T> {
    fn ok(value: T) -> Self {
        Flagged {
            value,
            degenerate: false,
        }
    }
}

/// Query, text, vision and fused video embeddings of one batch, each `[n, d]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchEmbeddings {
    pub query: Tensor,
    pub text: Tensor,
    pub vision: Tensor,
    pub fused: Tensor,
}

/// Tape handles for the embeddings of one batch, each `[n, d]`.
#[derive(Debug, Clone, Copy)]
pub struct BatchVars {
    pub query: Var,
    pub text: Var,
    pub vision: Var,
    pub fused: Var,
    /// Optional `[n, n]` additive score mask for the in-batch terms; see
    /// [`false_negative_mask`].
    pub negative_mask: Option<Var>,
}

/// Score offset that removes an in-batch negative from the softmax.
pub const MASKED_SCORE: f64 = -1.0e3;

/// `[n, n]` mask with [`MASKED_SCORE`] at every off-diagonal `(i, j)` for
/// which `same(i, j)` holds and 0 elsewhere.
pub fn false_negative_mask(n: usize, same: impl Fn(usize, usize) -> bool) -> Tensor {
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if i != j && same(i, j) {
                data[i * n + j] = MASKED_SCORE;
            }
        }
    }
    Tensor::matrix(n, n, data).expect("square mask")
}

impl BatchEmbeddings {
    /// Records the embeddings as constants.
    pub fn record(&self, tape: &mut Tape) -> Result<BatchVars> {
        let shape = self.query.shape();
        for t in [&self.text, &self.vision, &self.fused] {
            if t.shape() != shape {
                return Err(MbvrError::Shape(format!(
                    "batch embedding blocks differ in shape: {:?} vs {:?}",
                    shape,
                    t.shape()
                )));
            }
        }
        Ok(BatchVars {
            query: tape.constant(self.query.clone()),
            text: tape.constant(self.text.clone()),
            vision: tape.constant(self.vision.clone()),
            fused: tape.constant(self.fused.clone()),
            negative_mask: None,
        })
    }
}

fn check_same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims2() != b.dims2() {
        return Err(MbvrError::Shape(format!(
            "embedding blocks have shapes {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// `[n, n]` matrix of query/video scores. Rows are assumed unit-norm, so the
/// dot product is the cosine.
pub fn similarity_matrix(q_emb: &Tensor, m_emb: &Tensor) -> Result<Tensor> {
    check_same_shape(q_emb, m_emb)?;
    let mut tape = Tape::new();
    let q = tape.constant(q_emb.clone());
    let m = tape.constant(m_emb.clone());
    let s = tape.matmul_tb(q, m);
    Ok(tape.value(s).clone())
}

/// Single-sample InfoNCE with the margin subtracted from the positive score.
///
/// An empty negative set yields `0` flagged as degenerate.
pub fn info_nce(pos: f64, negatives: &[f64], tau: f64, margin: f64) -> Result<Flagged<f64>> {
    if tau.is_nan() || tau <= 0.0 {
        return Err(MbvrError::InvalidArgument(format!("tau must be positive, got {tau}")));
    }
    if negatives.is_empty() {
        return Ok(Flagged {
            value: 0.0,
            degenerate: true,
        });
    }
    let mut logits = Vec::with_capacity(negatives.len() + 1);
    logits.push((pos - margin) / tau);
    logits.extend(negatives.iter().map(|s| s / tau));
    Ok(Flagged::ok(cross_entropy(&logits, 0)))
}

fn zero_loss(tape: &mut Tape) -> Var {
    tape.constant(Tensor::scalar(0.0))
}

/// Mean of row-direction plus mean of column-direction InfoNCE over an
/// `[n, n]` score matrix whose diagonal holds the positives. `margins`, if
/// given, is an `[n]` vector subtracted from the diagonal in both directions.
pub fn bidirectional_loss_var(tape: &mut Tape, sim: Var, tau: f64, margins: Option<Var>) -> Result<Flagged<Var>> {
    let (n, cols) = tape.value(sim).dims2();
    if n != cols {
        return Err(MbvrError::Shape(format!("score matrix is {n}x{cols}, expected square")));
    }
    if let Some(m) = margins {
        if tape.value(m).len() != n {
            return Err(MbvrError::Shape(format!(
                "margin vector has length {}, expected {n}",
                tape.value(m).len()
            )));
        }
    }
    if n < 2 {
        log::warn!("batch of {n} has no in-batch negatives; contrastive loss skipped");
        return Ok(Flagged {
            value: zero_loss(tape),
            degenerate: true,
        });
    }
    let shifted = match margins {
        Some(m) => tape.sub_diagonal(sim, m),
        None => sim,
    };
    let logits = tape.scale(shifted, 1.0 / tau);
    let targets: Vec<usize> = (0..n).collect();
    let rows = tape.cross_entropy_rows(logits, &targets);
    let query_to_video = tape.mean(rows);
    let logits_t = tape.transpose(logits);
    let cols = tape.cross_entropy_rows(logits_t, &targets);
    let video_to_query = tape.mean(cols);
    Ok(Flagged::ok(tape.add(query_to_video, video_to_query)))
}

pub fn bidirectional_loss(sim: &Tensor, tau: f64, margins: Option<&[f64]>) -> Result<Flagged<f64>> {
    let mut tape = Tape::new();
    let s = tape.constant(sim.clone());
    let m = margins.map(|m| tape.constant(Tensor::vector(m.to_vec())));
    let out = bidirectional_loss_var(&mut tape, s, tau, m)?;
    Ok(Flagged {
        value: tape.item(out.value)?,
        degenerate: out.degenerate,
    })
}

/// Components of a batch objective as recorded on the tape.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub total: Var,
    /// Query–fused bidirectional loss (margined when margins are supplied).
    pub bidirectional: Var,
    pub vision_aux: Var,
    pub text_aux: Var,
    /// Present only when MS negatives were supplied.
    pub ms: Option<Var>,
    pub degenerate: bool,
}

impl LossTerms {
    pub fn values(&self, tape: &Tape) -> Result<LossValues> {
        Ok(LossValues {
            total: tape.item(self.total)?,
            bidirectional: tape.item(self.bidirectional)?,
            vision_aux: tape.item(self.vision_aux)?,
            text_aux: tape.item(self.text_aux)?,
            ms: self.ms.map(|v| tape.item(v)).transpose()?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub total: f64,
    pub bidirectional: f64,
    pub vision_aux: f64,
    pub text_aux: f64,
    pub ms: Option<f64>,
}

/// `L_bi(q, m) + α·L_bi(q, v) + β·L_bi(q, t)`, all unmargined.
pub fn base_loss_var(tape: &mut Tape, batch: &BatchVars, cfg: &LossConfig) -> Result<LossTerms> {
    objective_var(tape, batch, None, cfg, None)
}

pub fn base_loss(batch: &BatchEmbeddings, cfg: &LossConfig) -> Result<Flagged<f64>> {
    let mut tape = Tape::new();
    let vars = batch.record(&mut tape)?;
    let terms = base_loss_var(&mut tape, &vars, cfg)?;
    Ok(Flagged {
        value: tape.item(terms.total)?,
        degenerate: terms.degenerate,
    })
}

/// `L_bi(q, m) + α·L_v + β·L_t`, plus `γ·L_ms` when `ms` is given. `margins`,
/// when given, apply to the query–fused and MS terms only.
pub fn objective_var(
    tape: &mut Tape,
    batch: &BatchVars,
    ms: Option<&MsNegativeSet>,
    cfg: &LossConfig,
    margins: Option<Var>,
) -> Result<LossTerms> {
    cfg.validate()?;
    let scores = |tape: &mut Tape, docs: Var| {
        let s = tape.matmul_tb(batch.query, docs);
        match batch.negative_mask {
            Some(mask) => tape.add(s, mask),
            None => s,
        }
    };
    let sim = scores(tape, batch.fused);
    let bi = bidirectional_loss_var(tape, sim, cfg.tau, margins)?;
    let sim_v = scores(tape, batch.vision);
    let lv = bidirectional_loss_var(tape, sim_v, cfg.tau, None)?;
    let sim_t = scores(tape, batch.text);
    let lt = bidirectional_loss_var(tape, sim_t, cfg.tau, None)?;

    let weighted_v = tape.scale(lv.value, cfg.alpha);
    let weighted_t = tape.scale(lt.value, cfg.beta);
    let partial = tape.add(bi.value, weighted_v);
    let mut total = tape.add(partial, weighted_t);

    let ms_term = match ms {
        Some(set) => {
            let pos = tape.row_dot(batch.query, batch.fused);
            let scores = ms_scores_var(tape, batch.query, set)?;
            let loss = ms_loss_var(tape, pos, scores, cfg.tau, margins)?;
            let weighted = tape.scale(loss, cfg.gamma);
            total = tape.add(total, weighted);
            Some(loss)
        }
        None => None,
    };
    Ok(LossTerms {
        total,
        bidirectional: bi.value,
        vision_aux: lv.value,
        text_aux: lt.value,
        ms: ms_term,
        degenerate: bi.degenerate,
    })
}

/// How the vision donor `l` is drawn for each `(k, repeat)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MsSampling {
    /// Independent uniform draw of `l ≠ k` for every `(k, repeat)`.
    #[default]
    Uniform,
    /// One random derangement of the batch per repeat, shared by all `k`.
    Derangement,
}

/// Vision-donor indices of an MS negative set. Row `k * m + r` pairs video
/// `k`'s text with video `sources[k * m + r]`'s vision.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MsIndices {
    n: usize,
    m: usize,
    sources: Vec<usize>,
}

impl MsIndices {
    pub fn sample<R: Rng + ?Sized>(n: usize, m: usize, mode: MsSampling, rng: &mut R) -> Result<Self> {
        if n < 2 {
            return Err(MbvrError::InvalidArgument(format!(
                "MS negatives need at least two videos, got {n}"
            )));
        }
        if m == 0 {
            return Err(MbvrError::InvalidArgument("m must be at least 1".into()));
        }
        let mut sources = vec![0; n * m];
        match mode {
            MsSampling::Uniform => {
                for k in 0..n {
                    for r in 0..m {
                        // Uniform over {0..n} \ {k}: draw from n-1 slots and skip k.
                        let l = rng.random_range(0..n - 1);
                        sources[k * m + r] = if l >= k { l + 1 } else { l };
                    }
                }
            }
            MsSampling::Derangement => {
                for r in 0..m {
                    let perm = random_derangement(n, rng);
                    for k in 0..n {
                        sources[k * m + r] = perm[k];
                    }
                }
            }
        }
        Ok(MsIndices { n, m, sources })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    /// Vision donor of the `r`-th negative of video `k`.
    pub fn source(&self, k: usize, r: usize) -> usize {
        self.sources[k * self.m + r]
    }

    /// Text constituent index of every negative row, `k` repeated `m` times.
    pub fn text_rows(&self) -> Vec<usize> {
        (0..self.n).flat_map(|k| std::iter::repeat_n(k, self.m)).collect()
    }

    pub fn vision_rows(&self) -> &[usize] {
        &self.sources
    }
}

/// Rejection-sampled uniform derangement.
fn random_derangement<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut perm: Vec<usize> = (0..n).collect();
    loop {
        perm.shuffle(rng);
        if perm.iter().enumerate().all(|(i, &p)| i != p) {
            return perm;
        }
    }
}

/// MS negatives recorded on a tape: `[n * m, d]` fused embeddings.
#[derive(Debug, Clone)]
pub struct MsNegativeSet {
    pub indices: MsIndices,
    pub embeddings: Var,
}

/// Fuses video `k`'s text with video `l`'s vision for every sampled pair,
/// through the live fusion parameters, so gradients reach the fusion module
/// and both single-modality encoders.
pub fn generate_ms_negatives_var(
    tape: &mut Tape,
    fusion: &FusionVars,
    text: &ProjectedTokens,
    vision: &ProjectedTokens,
    indices: MsIndices,
) -> Result<MsNegativeSet> {
    let text_rows = indices.text_rows();
    let embeddings = fusion.fuse_projected(tape, text, vision, Some((&text_rows, indices.vision_rows())))?;
    Ok(MsNegativeSet { indices, embeddings })
}

/// Value-level MS negative generation for `[n, d]` text and vision
/// embeddings. Returns `[n * m, d]` fused rows.
pub fn generate_ms_negatives<R: Rng + ?Sized>(
    text_emb: &Tensor,
    vision_emb: &Tensor,
    fusion: &crate::encoders::FusionParams,
    m: usize,
    mode: MsSampling,
    rng: &mut R,
) -> Result<(MsIndices, Tensor)> {
    check_same_shape(text_emb, vision_emb)?;
    let indices = MsIndices::sample(text_emb.rows(), m, mode, rng)?;
    let mut tape = Tape::new();
    let fusion_vars = bind_fusion_constants(&mut tape, fusion);
    let t = tape.constant(text_emb.clone());
    let v = tape.constant(vision_emb.clone());
    let tp = fusion_vars.project(&mut tape, t);
    let vp = fusion_vars.project(&mut tape, v);
    let set = generate_ms_negatives_var(&mut tape, &fusion_vars, &tp, &vp, indices)?;
    let emb = tape.value(set.embeddings).clone();
    Ok((set.indices, emb))
}

fn bind_fusion_constants(tape: &mut Tape, p: &crate::encoders::FusionParams) -> FusionVars {
    FusionVars {
        heads: p.heads,
        query_w: tape.constant(p.query_w.clone()),
        query_b: tape.constant(p.query_b.clone()),
        key_w: tape.constant(p.key_w.clone()),
        key_b: tape.constant(p.key_b.clone()),
        value_w: tape.constant(p.value_w.clone()),
        value_b: tape.constant(p.value_b.clone()),
        out_w: tape.constant(p.out_w.clone()),
        out_b: tape.constant(p.out_b.clone()),
    }
}

/// `[n, m]` scores of each query against its own video's MS negatives.
pub fn ms_scores_var(tape: &mut Tape, query: Var, set: &MsNegativeSet) -> Result<Var> {
    let (n, m) = (set.indices.n(), set.indices.m());
    if tape.value(query).rows() != n {
        return Err(MbvrError::Shape(format!(
            "{} queries for an MS set over {n} videos",
            tape.value(query).rows()
        )));
    }
    let expanded = tape.gather_rows(query, &set.indices.text_rows());
    let dots = tape.row_dot(expanded, set.embeddings);
    Ok(tape.reshape(dots, &[n, m]))
}

/// Mean over queries of InfoNCE of the positive score against that query's
/// `m` MS-negative scores. `pos` is `[n]`, `ms_scores` is `[n, m]`.
pub fn ms_loss_var(tape: &mut Tape, pos: Var, ms_scores: Var, tau: f64, margins: Option<Var>) -> Result<Var> {
    let (n, m) = tape.value(ms_scores).dims2();
    if m == 0 || tape.value(ms_scores).is_empty() {
        return Err(MbvrError::InvalidArgument("MS loss needs at least one negative".into()));
    }
    if tape.value(pos).len() != n {
        return Err(MbvrError::Shape("positive scores and MS scores disagree".into()));
    }
    let shifted = match margins {
        Some(mg) => {
            if tape.value(mg).len() != n {
                return Err(MbvrError::Shape("margin vector length differs".into()));
            }
            tape.sub(pos, mg)
        }
        None => pos,
    };
    let column = tape.reshape(shifted, &[n, 1]);
    let scores = tape.concat_cols(column, ms_scores);
    let logits = tape.scale(scores, 1.0 / tau);
    let ce = tape.cross_entropy_rows(logits, &vec![0; n]);
    Ok(tape.mean(ce))
}

pub fn ms_loss(pos: &[f64], ms_scores: &Tensor, tau: f64, margins: Option<&[f64]>) -> Result<f64> {
    let mut tape = Tape::new();
    let p = tape.constant(Tensor::vector(pos.to_vec()));
    if ms_scores.shape().len() != 2 {
        return Err(MbvrError::Shape("MS scores must be a matrix".into()));
    }
    let s = tape.constant(ms_scores.clone());
    let mg = margins.map(|m| tape.constant(Tensor::vector(m.to_vec())));
    let out = ms_loss_var(&mut tape, p, s, tau, mg)?;
    tape.item(out)
}

/// `w·σ(cos(v, q)) + b`.
pub fn dynamic_margin(q_emb: &[f64], v_emb: &[f64], w: f64, b: f64) -> Result<f64> {
    Ok(w * sigmoid(cosine_similarity(v_emb, q_emb)?) + b)
}

/// Per-pair margins for a batch, computed from current values and recorded
/// as a constant so no gradient flows through them.
pub fn batch_margins(tape: &mut Tape, query: Var, vision: Var, w: f64, b: f64) -> Result<Var> {
    let margins = margin_values(tape.value(query), tape.value(vision), w, b)?;
    Ok(tape.constant(Tensor::vector(margins)))
}

pub fn margin_values(query: &Tensor, vision: &Tensor, w: f64, b: f64) -> Result<Vec<f64>> {
    check_same_shape(query, vision)?;
    (0..query.rows())
        .map(|i| dynamic_margin(query.row(i), vision.row(i), w, b))
        .collect()
}

/// `L̃_bi + α·L_v + β·L_t + γ·L̃_ms`, with margins from [`batch_margins`].
/// Without an MS set the last term is omitted.
pub fn total_loss_var(
    tape: &mut Tape,
    batch: &BatchVars,
    ms: Option<&MsNegativeSet>,
    cfg: &LossConfig,
) -> Result<LossTerms> {
    let margins = batch_margins(tape, batch.query, batch.vision, cfg.w, cfg.b)?;
    objective_var(tape, batch, ms, cfg, Some(margins))
}

/// As [`total_loss_var`] with caller-supplied margins.
pub fn total_loss_with_margins(
    tape: &mut Tape,
    batch: &BatchVars,
    ms: Option<&MsNegativeSet>,
    cfg: &LossConfig,
    margins: &[f64],
) -> Result<LossTerms> {
    let m = tape.constant(Tensor::vector(margins.to_vec()));
    objective_var(tape, batch, ms, cfg, Some(m))
}

/// Value-level full objective. `ms_emb` holds `[n * m, d]` MS negatives laid
/// out as by [`generate_ms_negatives`].
pub fn total_loss(
    batch: &BatchEmbeddings,
    ms_emb: &Tensor,
    indices: &MsIndices,
    cfg: &LossConfig,
) -> Result<Flagged<f64>> {
    let mut tape = Tape::new();
    let vars = batch.record(&mut tape)?;
    let set = MsNegativeSet {
        indices: indices.clone(),
        embeddings: tape.constant(ms_emb.clone()),
    };
    let terms = total_loss_var(&mut tape, &vars, Some(&set), cfg)?;
    Ok(Flagged {
        value: tape.item(terms.total)?,
        degenerate: terms.degenerate,
    })
}

/// Smallest `|cos(t, m)|` for which the ratio is considered defined.
pub const RVT_MIN_DENOMINATOR: f64 = 1e-9;

/// `cos(v, m) / cos(t, m)`: how much the fused embedding leans on vision
/// relative to text.
pub fn r_vt(t_emb: &[f64], v_emb: &[f64], m_emb: &[f64]) -> Result<f64> {
    let denom = cosine_similarity(t_emb, m_emb)?;
    if denom.abs() < RVT_MIN_DENOMINATOR {
        return Err(MbvrError::Degenerate(format!(
            "undefined ratio: text/fused cosine {denom:e} is too close to zero"
        )));
    }
    Ok(cosine_similarity(v_emb, m_emb)? / denom)
}
