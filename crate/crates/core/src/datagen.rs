//! Synthetic multimodal corpus and search log with a tunable text shortcut.
//!
//! Every video has a text topic and a vision topic. Text tokens come from the
//! text topic's private vocabulary block; vision features are the vision
//! topic's prototype plus Gaussian noise. A query of topic `c` is text-relevant
//! to every video whose text topic is `c` and vision-relevant when the video's
//! vision topic is also `c`. Training positives are always text-relevant and
//! are vision-irrelevant with probability `p_bias`, so most of them can be
//! solved by text matching alone.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::codec::{self, Reader, Writer};
use crate::encoders::TokenId;
use crate::error::{MbvrError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSpec {
    pub num_topics: usize,
    pub corpus_size: usize,
    /// Training queries.
    pub num_queries: usize,
    /// Training positives per query.
    pub pairs_per_query: usize,
    /// Probability that a positive is text-relevant but vision-irrelevant.
    pub p_bias: f64,
    /// Per-coordinate standard deviation of vision feature noise.
    pub noise_sigma: f64,
    pub seed: u64,
    pub vocab_size: usize,
    pub vision_dim: usize,
    /// Inclusive token-count range of a query.
    pub query_len: [usize; 2],
    /// Inclusive token-count range of a video's text.
    pub text_len: [usize; 2],
    pub eval_queries: usize,
    /// Judged positives per evaluation query.
    pub eval_positives_per_query: usize,
    /// Judged label-0 negatives per judged positive.
    pub eval_negative_ratio: usize,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            num_topics: 20,
            corpus_size: 10_000,
            num_queries: 1_000,
            pairs_per_query: 50,
            p_bias: 0.8,
            noise_sigma: 0.1,
            seed: 0,
            vocab_size: 1000,
            vision_dim: 32,
            query_len: [2, 4],
            text_len: [4, 8],
            eval_queries: 200,
            eval_positives_per_query: 20,
            eval_negative_ratio: 5,
        }
    }
}

impl DatasetSpec {
    /// Short stable hash of the canonical TOML form.
    pub fn hash(&self) -> String {
        codec::short_hash(toml::to_string(self).expect("spec serializes").as_bytes())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(MbvrError::InvalidArgument(m));
        if self.num_topics == 0 {
            return bad("num_topics must be positive".into());
        }
        if self.corpus_size == 0 {
            return bad("corpus_size must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.p_bias) {
            return bad(format!("p_bias must lie in [0, 1], got {}", self.p_bias));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma must be nonnegative, got {}", self.noise_sigma));
        }
        if self.corpus_size < self.pairs_per_query {
            return bad("corpus_size must be at least pairs_per_query".into());
        }
        if self.vocab_size < self.num_topics {
            return bad("vocab_size must be at least num_topics".into());
        }
        if self.vision_dim == 0 {
            return bad("vision_dim must be positive".into());
        }
        for (name, [lo, hi]) in [("query_len", self.query_len), ("text_len", self.text_len)] {
            if lo == 0 || lo > hi {
                return bad(format!("{name} must be a nonempty range [lo, hi] with lo >= 1"));
            }
        }
        for (name, v) in [
            ("num_topics", self.num_topics),
            ("corpus_size", self.corpus_size),
            ("num_queries", self.num_queries),
            ("eval_queries", self.eval_queries),
            ("vocab_size", self.vocab_size),
        ] {
            if v > u32::MAX as usize {
                return bad(format!("{name} does not fit in 32 bits"));
            }
        }
        Ok(())
    }

    /// Tokens `[start, end)` reserved for `topic`.
    pub fn topic_block(&self, topic: usize) -> (usize, usize) {
        let width = self.vocab_size / self.num_topics;
        (topic * width, (topic + 1) * width)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticVideo {
    pub id: u32,
    pub text_tokens: Vec<TokenId>,
    pub vision_features: Vec<f64>,
    pub text_topic: u32,
    pub vision_topic: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Query {
    pub id: u32,
    pub tokens: Vec<TokenId>,
    pub topic: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct LabeledPair {
    pub query_id: u32,
    pub video_id: u32,
    pub text_relevant: bool,
    pub vision_relevant: bool,
}

impl LabeledPair {
    /// 2 when both modalities match, 1 for a text-only match, 0 otherwise.
    pub fn overall_label(&self) -> u8 {
        label_of(self.text_relevant, self.vision_relevant)
    }
}

pub fn label_of(text_relevant: bool, vision_relevant: bool) -> u8 {
    match (text_relevant, vision_relevant) {
        (true, true) => 2,
        (true, false) => 1,
        _ => 0,
    }
}

/// Ground-truth label of a video for a query of `query_topic`.
pub fn judge(query_topic: u32, video: &SyntheticVideo) -> u8 {
    label_of(video.text_topic == query_topic, video.vision_topic == query_topic)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub corpus: Vec<SyntheticVideo>,
    pub train_queries: Vec<Query>,
    pub train_pairs: Vec<LabeledPair>,
    pub eval_queries: Vec<Query>,
    pub eval_pairs: Vec<LabeledPair>,
}

// Independent ChaCha streams so each artifact depends only on the seed.
const STREAM_PROTOTYPES: u64 = 1;
const STREAM_CORPUS: u64 = 2;
const STREAM_TRAIN: u64 = 3;
const STREAM_EVAL: u64 = 4;

fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn sample_tokens(rng: &mut ChaCha8Rng, spec: &DatasetSpec, topic: usize, [lo, hi]: [usize; 2]) -> Vec<TokenId> {
    let (start, end) = spec.topic_block(topic);
    let len = rng.random_range(lo..=hi);
    (0..len).map(|_| rng.random_range(start..end) as TokenId).collect()
}

/// One Gaussian prototype per topic with entries `N(0, 1/vision_dim)`.
pub fn vision_prototypes(spec: &DatasetSpec) -> Vec<Vec<f64>> {
    let mut rng = stream(spec.seed, STREAM_PROTOTYPES);
    let normal = Normal::new(0.0, 1.0 / (spec.vision_dim as f64).sqrt()).expect("positive std");
    (0..spec.num_topics)
        .map(|_| (0..spec.vision_dim).map(|_| normal.sample(&mut rng)).collect())
        .collect()
}

fn other_topic(rng: &mut ChaCha8Rng, k: usize, topic: usize) -> usize {
    let t = rng.random_range(0..k - 1);
    if t >= topic {
        t + 1
    } else {
        t
    }
}

/// Text topics are uniform; with probability `p_bias` the vision topic is
/// drawn uniformly from the other topics, otherwise it equals the text topic.
pub fn generate_corpus(spec: &DatasetSpec) -> Result<Vec<SyntheticVideo>> {
    spec.validate()?;
    let prototypes = vision_prototypes(spec);
    let mut rng = stream(spec.seed, STREAM_CORPUS);
    let noise = Normal::new(0.0, spec.noise_sigma).expect("validated sigma");
    let k = spec.num_topics;
    let corpus = (0..spec.corpus_size)
        .map(|id| {
            let text_topic = rng.random_range(0..k);
            let misaligned = k > 1 && rng.random_bool(spec.p_bias);
            let vision_topic = if misaligned {
                other_topic(&mut rng, k, text_topic)
            } else {
                text_topic
            };
            let text_tokens = sample_tokens(&mut rng, spec, text_topic, spec.text_len);
            let vision_features = prototypes[vision_topic]
                .iter()
                .map(|p| p + noise.sample(&mut rng))
                .collect();
            SyntheticVideo {
                id: id as u32,
                text_tokens,
                vision_features,
                text_topic: text_topic as u32,
                vision_topic: vision_topic as u32,
            }
        })
        .collect();
    Ok(corpus)
}

/// Video ids grouped by text topic, split by whether the vision agrees.
struct TopicPools {
    aligned: Vec<Vec<u32>>,
    misaligned: Vec<Vec<u32>>,
}

impl TopicPools {
    fn new(corpus: &[SyntheticVideo], num_topics: usize) -> Result<Self> {
        let mut aligned = vec![Vec::new(); num_topics];
        let mut misaligned = vec![Vec::new(); num_topics];
        for v in corpus {
            let t = v.text_topic as usize;
            if t >= num_topics || v.vision_topic as usize >= num_topics {
                return Err(MbvrError::InvalidArgument(format!(
                    "video {} has a topic outside [0, {num_topics})",
                    v.id
                )));
            }
            if v.vision_topic == v.text_topic {
                aligned[t].push(v.id);
            } else {
                misaligned[t].push(v.id);
            }
        }
        Ok(TopicPools { aligned, misaligned })
    }

    fn supply(&self, topic: usize) -> usize {
        self.aligned[topic].len() + self.misaligned[topic].len()
    }
}

fn make_queries(rng: &mut ChaCha8Rng, spec: &DatasetSpec, count: usize) -> Vec<Query> {
    (0..count)
        .map(|id| {
            let topic = rng.random_range(0..spec.num_topics);
            Query {
                id: id as u32,
                tokens: sample_tokens(rng, spec, topic, spec.query_len),
                topic: topic as u32,
            }
        })
        .collect()
}

/// Training queries and their positives. Each positive is drawn without
/// replacement from the query topic's videos; a Bernoulli(`p_bias`) draw picks
/// the vision-irrelevant or the vision-relevant sub-pool, falling back to the
/// other sub-pool once the chosen one is used up for that query.
pub fn generate_training_pairs(
    corpus: &[SyntheticVideo],
    spec: &DatasetSpec,
) -> Result<(Vec<Query>, Vec<LabeledPair>)> {
    spec.validate()?;
    let pools = TopicPools::new(corpus, spec.num_topics)?;
    let mut rng = stream(spec.seed, STREAM_TRAIN);
    let queries = make_queries(&mut rng, spec, spec.num_queries);
    let mut pairs = Vec::with_capacity(spec.num_queries * spec.pairs_per_query);
    for q in &queries {
        let topic = q.topic as usize;
        if spec.pairs_per_query > pools.supply(topic) {
            return Err(MbvrError::InvalidArgument(format!(
                "topic {topic} has {} videos, fewer than pairs_per_query = {}",
                pools.supply(topic),
                spec.pairs_per_query
            )));
        }
        let mut aligned = pools.aligned[topic].clone();
        let mut misaligned = pools.misaligned[topic].clone();
        aligned.shuffle(&mut rng);
        misaligned.shuffle(&mut rng);
        for _ in 0..spec.pairs_per_query {
            // An exhausted sub-pool falls back to the other one; total supply
            // was checked above.
            let want_text_only = rng.random_bool(spec.p_bias);
            let text_only = if want_text_only {
                !misaligned.is_empty()
            } else {
                aligned.is_empty()
            };
            let pool = if text_only { &mut misaligned } else { &mut aligned };
            let video_id = pool.pop().expect("supply checked");
            pairs.push(LabeledPair {
                query_id: q.id,
                video_id,
                text_relevant: true,
                vision_relevant: !text_only,
            });
        }
    }
    Ok((queries, pairs))
}

/// Evaluation queries with judged pairs: positives drawn uniformly from the
/// query topic's videos (labels 1 and 2) plus label-0 videos from other text
/// topics at `eval_negative_ratio` per positive.
pub fn generate_eval_pairs(corpus: &[SyntheticVideo], spec: &DatasetSpec) -> Result<(Vec<Query>, Vec<LabeledPair>)> {
    spec.validate()?;
    let pools = TopicPools::new(corpus, spec.num_topics)?;
    let mut rng = stream(spec.seed, STREAM_EVAL);
    let queries = make_queries(&mut rng, spec, spec.eval_queries);
    let mut pairs = Vec::new();
    for q in &queries {
        let topic = q.topic as usize;
        let mut positives: Vec<u32> = pools.aligned[topic]
            .iter()
            .chain(&pools.misaligned[topic])
            .copied()
            .collect();
        let n_pos = spec.eval_positives_per_query.min(positives.len());
        let (chosen, _) = positives.partial_shuffle(&mut rng, n_pos);
        let mut chosen = chosen.to_vec();
        chosen.sort_unstable();
        let mut negatives: Vec<u32> = corpus
            .iter()
            .filter(|v| v.text_topic != q.topic && v.vision_topic != q.topic)
            .map(|v| v.id)
            .collect();
        let n_neg = (n_pos * spec.eval_negative_ratio).min(negatives.len());
        let (neg, _) = negatives.partial_shuffle(&mut rng, n_neg);
        let mut neg = neg.to_vec();
        neg.sort_unstable();
        for id in chosen.into_iter().chain(neg) {
            let v = &corpus[id as usize];
            pairs.push(LabeledPair {
                query_id: q.id,
                video_id: id,
                text_relevant: v.text_topic == q.topic,
                vision_relevant: v.vision_topic == q.topic,
            });
        }
    }
    Ok((queries, pairs))
}

pub fn generate(spec: &DatasetSpec) -> Result<Dataset> {
    let corpus = generate_corpus(spec)?;
    let (train_queries, train_pairs) = generate_training_pairs(&corpus, spec)?;
    let (eval_queries, eval_pairs) = generate_eval_pairs(&corpus, spec)?;
    Ok(Dataset {
        spec: spec.clone(),
        corpus,
        train_queries,
        train_pairs,
        eval_queries,
        eval_pairs,
    })
}

impl Dataset {
    /// Video lookup by id; ids are corpus positions.
    pub fn video(&self, id: u32) -> Option<&SyntheticVideo> {
        self.corpus.get(id as usize)
    }

    /// Complete corpus judgments for a query topic, keyed by video id.
    /// Label-0 videos are omitted.
    pub fn judgments(&self, query_topic: u32) -> std::collections::HashMap<u32, u8> {
        self.corpus
            .iter()
            .filter_map(|v| {
                let l = judge(query_topic, v);
                (l > 0).then_some((v.id, l))
            })
            .collect()
    }

    /// Sanity checks that references and ranges are consistent.
    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        for (i, v) in self.corpus.iter().enumerate() {
            if v.id as usize != i {
                return Err(MbvrError::InvalidArgument(format!(
                    "video at position {i} has id {}",
                    v.id
                )));
            }
        }
        for (queries, pairs) in [
            (&self.train_queries, &self.train_pairs),
            (&self.eval_queries, &self.eval_pairs),
        ] {
            for (i, q) in queries.iter().enumerate() {
                if q.id as usize != i {
                    return Err(MbvrError::InvalidArgument(format!(
                        "query at position {i} has id {}",
                        q.id
                    )));
                }
            }
            for p in pairs.iter() {
                if p.query_id as usize >= queries.len() || p.video_id as usize >= self.corpus.len() {
                    return Err(MbvrError::InvalidArgument(format!(
                        "pair ({}, {}) references a missing query or video",
                        p.query_id, p.video_id
                    )));
                }
            }
        }
        Ok(())
    }
}

const DATASET_MAGIC: &[u8; 8] = b"MBVRDATA";
const DATASET_VERSION: u32 = 1;

fn write_spec(w: &mut Writer, s: &DatasetSpec) {
    for v in [s.num_topics, s.corpus_size, s.num_queries, s.pairs_per_query] {
        w.u64(v as u64);
    }
    w.f64(s.p_bias);
    w.f64(s.noise_sigma);
    w.u64(s.seed);
    for v in [
        s.vocab_size,
        s.vision_dim,
        s.query_len[0],
        s.query_len[1],
        s.text_len[0],
        s.text_len[1],
        s.eval_queries,
        s.eval_positives_per_query,
        s.eval_negative_ratio,
    ] {
        w.u64(v as u64);
    }
}

fn read_spec(r: &mut Reader) -> Result<DatasetSpec> {
    let mut u = || r.u64().map(|v| v as usize);
    let (num_topics, corpus_size, num_queries, pairs_per_query) = (u()?, u()?, u()?, u()?);
    let p_bias = r.f64()?;
    let noise_sigma = r.f64()?;
    let seed = r.u64()?;
    let mut u = || r.u64().map(|v| v as usize);
    Ok(DatasetSpec {
        num_topics,
        corpus_size,
        num_queries,
        pairs_per_query,
        p_bias,
        noise_sigma,
        seed,
        vocab_size: u()?,
        vision_dim: u()?,
        query_len: [u()?, u()?],
        text_len: [u()?, u()?],
        eval_queries: u()?,
        eval_positives_per_query: u()?,
        eval_negative_ratio: u()?,
    })
}

fn write_tokens(w: &mut Writer, tokens: &[TokenId]) {
    w.u32(tokens.len() as u32);
    for &t in tokens {
        w.u32(t);
    }
}

fn read_tokens(r: &mut Reader, vocab: usize) -> Result<Vec<TokenId>> {
    let n = r.u32()? as usize;
    let mut out = Vec::with_capacity(n.min(1 << 16));
    for _ in 0..n {
        let at = r.offset();
        let t = r.u32()?;
        if t as usize >= vocab {
            return Err(MbvrError::format(
                at,
                format!("token {t} outside vocabulary of {vocab}"),
            ));
        }
        out.push(t);
    }
    Ok(out)
}

fn write_queries(w: &mut Writer, queries: &[Query]) {
    w.u64(queries.len() as u64);
    for q in queries {
        let mut rec = Writer::new();
        rec.u32(q.id);
        rec.u32(q.topic);
        write_tokens(&mut rec, &q.tokens);
        w.record(&rec.into_inner());
    }
}

fn read_queries(r: &mut Reader, spec: &DatasetSpec) -> Result<Vec<Query>> {
    let n = r.u64()? as usize;
    let mut out = Vec::with_capacity(n.min(1 << 20));
    for _ in 0..n {
        let mut rec = r.record()?;
        let id = rec.u32()?;
        let topic_at = rec.offset();
        let topic = rec.u32()?;
        if topic as usize >= spec.num_topics {
            return Err(MbvrError::format(topic_at, format!("query topic {topic} out of range")));
        }
        let tokens = read_tokens(&mut rec, spec.vocab_size)?;
        rec.finish()?;
        out.push(Query { id, tokens, topic });
    }
    Ok(out)
}

fn write_pairs(w: &mut Writer, pairs: &[LabeledPair]) {
    w.u64(pairs.len() as u64);
    for p in pairs {
        w.u32(p.query_id);
        w.u32(p.video_id);
        w.u8(u8::from(p.text_relevant) | (u8::from(p.vision_relevant) << 1));
    }
}

fn read_pairs(r: &mut Reader) -> Result<Vec<LabeledPair>> {
    let n = r.u64()? as usize;
    let mut out = Vec::with_capacity(n.min(1 << 20));
    for _ in 0..n {
        let query_id = r.u32()?;
        let video_id = r.u32()?;
        let at = r.offset();
        let flags = r.u8()?;
        if flags > 3 {
            return Err(MbvrError::format(at, format!("invalid relevance flags {flags}")));
        }
        out.push(LabeledPair {
            query_id,
            video_id,
            text_relevant: flags & 1 != 0,
            vision_relevant: flags & 2 != 0,
        });
    }
    Ok(out)
}

/// Length in bytes of the fixed dataset header: magic, version, the spec
/// echo (16 eight-byte fields) and an 8-byte header checksum.
pub const DATASET_HEADER_LEN: usize = 8 + 4 + 16 * 8 + 8;

impl Dataset {
    /// File layout, all little-endian:
    ///
    /// ```text
    /// magic "MBVRDATA" | version u32 | spec (16 x 8 bytes) | header checksum (8 bytes)
    /// corpus:  count u64, then per video a u32-length-prefixed record
    ///          id u32 | text_topic u32 | vision_topic u32 | ntok u32 | tokens u32*
    ///          | vision_dim f64 features
    /// train queries, eval queries: count u64, then records id u32 | topic u32 | ntok u32 | tokens
    /// train pairs, eval pairs: count u64, then query u32 | video u32 | flags u8
    ///          (bit 0 text-relevant, bit 1 vision-relevant)
    /// ```
    ///
    /// The header checksum is the first 8 bytes of SHA-256 over the bytes
    /// preceding it.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(DATASET_MAGIC);
        w.u32(DATASET_VERSION);
        write_spec(&mut w, &self.spec);
        let header = w.into_inner();
        let mut w = Writer::new();
        w.bytes(&header);
        w.bytes(&codec::checksum(&header));

        w.u64(self.corpus.len() as u64);
        for v in &self.corpus {
            let mut rec = Writer::new();
            rec.u32(v.id);
            rec.u32(v.text_topic);
            rec.u32(v.vision_topic);
            write_tokens(&mut rec, &v.text_tokens);
            rec.f64s(&v.vision_features);
            w.record(&rec.into_inner());
        }
        write_queries(&mut w, &self.train_queries);
        write_queries(&mut w, &self.eval_queries);
        write_pairs(&mut w, &self.train_pairs);
        write_pairs(&mut w, &self.eval_pairs);
        w.into_inner()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.expect_magic(DATASET_MAGIC)?;
        r.expect_version(DATASET_VERSION)?;
        let spec = read_spec(&mut r)?;
        let sum_at = r.offset();
        let stored = r.take(8)?;
        if stored != codec::checksum(&bytes[..sum_at as usize]) {
            return Err(MbvrError::format(sum_at, "header checksum mismatch"));
        }
        spec.validate().map_err(|e| MbvrError::format(12, e.to_string()))?;

        let n = r.u64()? as usize;
        let mut corpus = Vec::with_capacity(n.min(1 << 20));
        for _ in 0..n {
            let mut rec = r.record()?;
            let id = rec.u32()?;
            let topics_at = rec.offset();
            let text_topic = rec.u32()?;
            let vision_topic = rec.u32()?;
            if text_topic as usize >= spec.num_topics || vision_topic as usize >= spec.num_topics {
                return Err(MbvrError::format(topics_at, "video topic out of range"));
            }
            let text_tokens = read_tokens(&mut rec, spec.vocab_size)?;
            let vision_features = rec.f64s(spec.vision_dim)?;
            rec.finish()?;
            corpus.push(SyntheticVideo {
                id,
                text_tokens,
                vision_features,
                text_topic,
                vision_topic,
            });
        }
        let train_queries = read_queries(&mut r, &spec)?;
        let eval_queries = read_queries(&mut r, &spec)?;
        let train_pairs = read_pairs(&mut r)?;
        let eval_pairs = read_pairs(&mut r)?;
        r.finish()?;
        let ds = Dataset {
            spec,
            corpus,
            train_queries,
            train_pairs,
            eval_queries,
            eval_pairs,
        };
        ds.validate()?;
        Ok(ds)
    }
}

pub fn write_dataset(path: &Path, dataset: &Dataset) -> Result<()> {
    fs::write(path, dataset.to_bytes())?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    Dataset::from_bytes(&fs::read(path)?)
}
