//! Exact top-K cosine retrieval over an embedded corpus.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

use crate::codec::{self, Reader, Writer};
use crate::datagen::SyntheticVideo;
use crate::encoders::{encode_videos, ModelParams, TokenId, VideoRepr};
use crate::error::{MbvrError, Result};
use crate::losses::Flagged;
use crate::metrics::{self, mrr_at_k, pnr, precision_at_k, rank_order, MetricReport, PnrValue, RankedRun};
use crate::numcore::kernels::dot;
use crate::numcore::{l2_normalize, Tensor};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexMeta {
    /// Fingerprint of the checkpoint that produced the embeddings.
    pub checkpoint_id: String,
    /// Seconds since the Unix epoch.
    pub built_at: u64,
}

/// Immutable table of unit-norm embeddings keyed by video id.
#[derive(Debug, Clone, PartialEq)]
pub struct Index {
    ids: Vec<u32>,
    embeddings: Tensor,
    meta: IndexMeta,
}

impl Index {
    pub fn new(ids: Vec<u32>, embeddings: Tensor, meta: IndexMeta) -> Result<Self> {
        if embeddings.shape().len() != 2 || embeddings.rows() != ids.len() {
            return Err(MbvrError::Shape(format!(
                "{} ids for embeddings of shape {:?}",
                ids.len(),
                embeddings.shape()
            )));
        }
        let mut seen = HashSet::with_capacity(ids.len());
        if let Some(dup) = ids.iter().find(|id| !seen.insert(**id)) {
            return Err(MbvrError::InvalidArgument(format!("duplicate id {dup} in index")));
        }
        Ok(Index { ids, embeddings, meta })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols()
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn embeddings(&self) -> &Tensor {
        &self.embeddings
    }

    pub fn meta(&self) -> &IndexMeta {
        &self.meta
    }

    /// Embedding stored for `id`.
    pub fn embedding(&self, id: u32) -> Option<&[f64]> {
        self.ids.iter().position(|&x| x == id).map(|i| self.embeddings.row(i))
    }
}

/// Embeds every video with `repr` and stores the rows under the video ids.
pub fn build_index(corpus: &[SyntheticVideo], params: &ModelParams, repr: VideoRepr, built_at: u64) -> Result<Index> {
    if corpus.is_empty() {
        return Err(MbvrError::InvalidArgument("cannot index an empty corpus".into()));
    }
    let width = params.config.vision_input_dim;
    if let Some(v) = corpus.iter().find(|v| v.vision_features.len() != width) {
        return Err(MbvrError::Shape(format!(
            "video {} has {} vision features, checkpoint expects {width}",
            v.id,
            v.vision_features.len()
        )));
    }
    let tokens: Vec<&[TokenId]> = corpus.iter().map(|v| v.text_tokens.as_slice()).collect();
    let features: Vec<&[f64]> = corpus.iter().map(|v| v.vision_features.as_slice()).collect();
    let emb = encode_videos(params, &tokens, &features)?;
    let meta = IndexMeta {
        checkpoint_id: params.fingerprint(),
        built_at,
    };
    Index::new(corpus.iter().map(|v| v.id).collect(), emb.select(repr).clone(), meta)
}

/// The `k` best `(id, cosine)` results, by score descending then id
/// ascending. Asking for more than the index holds returns everything,
/// flagged.
pub fn top_k(index: &Index, query: &[f64], k: usize) -> Result<Flagged<Vec<(u32, f64)>>> {
    if k == 0 {
        return Err(MbvrError::InvalidArgument("K must be at least 1".into()));
    }
    if query.len() != index.dim() {
        return Err(MbvrError::Shape(format!(
            "query has dimension {}, index has {}",
            query.len(),
            index.dim()
        )));
    }
    let q = l2_normalize(query)?;
    let mut scored: Vec<(u32, f64)> = index
        .ids
        .iter()
        .enumerate()
        .map(|(i, &id)| (id, dot(&q, index.embeddings.row(i))))
        .collect();
    let truncated = k > scored.len();
    let keep = k.min(scored.len());
    if keep < scored.len() {
        scored.select_nth_unstable_by(keep - 1, rank_order);
        scored.truncate(keep);
    }
    scored.sort_by(rank_order);
    Ok(Flagged {
        value: scored,
        degenerate: truncated,
    })
}

/// Per-query retrieval runs and their metric report.
#[derive(Debug, Clone)]
pub struct RetrievalEval {
    pub report: MetricReport,
    pub runs: Vec<RankedRun>,
    /// PNR over the retrieved lists; `None` when undefined.
    pub pnr: Option<PnrValue>,
}

/// Retrieves `max(ks)` results for each query row of `queries` and reports
/// Precision@K and both MRR@K variants for every K, averaged over queries,
/// plus pooled PNR over the retrieved lists. A result is relevant when its
/// judged label is at least `relevant_min`; unjudged ids are label 0.
pub fn evaluate_run(
    index: &Index,
    queries: &Tensor,
    judgments: &[HashMap<u32, u8>],
    ks: &[usize],
    relevant_min: u8,
) -> Result<RetrievalEval> {
    if queries.rows() == 0 || queries.is_empty() {
        return Err(MbvrError::InvalidArgument("empty query set".into()));
    }
    if judgments.len() != queries.rows() {
        return Err(MbvrError::Shape(format!(
            "{} judgment sets for {} queries",
            judgments.len(),
            queries.rows()
        )));
    }
    let depth = *ks
        .iter()
        .max()
        .ok_or_else(|| MbvrError::InvalidArgument("no cutoffs requested".into()))?;
    let mut runs = Vec::with_capacity(queries.rows());
    for (i, judged) in judgments.iter().enumerate() {
        let results = top_k(index, queries.row(i), depth)?.value;
        runs.push(RankedRun::new(results, judged.clone())?.with_relevance_threshold(relevant_min));
    }
    let mut report = MetricReport::default();
    for &k in ks {
        report.push(
            "precision",
            "-",
            Some(k),
            metrics::mean_over(&runs, |r| precision_at_k(r, k))?,
        );
        report.push(
            "mrr",
            "unnormalized",
            Some(k),
            metrics::mean_over(&runs, |r| mrr_at_k(r, k, false))?,
        );
        report.push(
            "mrr",
            "normalized",
            Some(k),
            metrics::mean_over(&runs, |r| mrr_at_k(r, k, true))?,
        );
    }
    let pnr = pnr(&runs).ok();
    report.push("pnr", "retrieved", None, pnr.map_or(f64::NAN, |p| p.value));
    Ok(RetrievalEval { report, runs, pnr })
}

const INDEX_MAGIC: &[u8; 8] = b"MBVRINDX";
const INDEX_VERSION: u32 = 1;

impl Index {
    /// File layout, all little-endian:
    ///
    /// ```text
    /// magic "MBVRINDX" | version u32 | count u64 | dim u32 | built_at u64
    /// | checkpoint id (u32 len + utf8) | header checksum (8 bytes)
    /// | ids u32 * count | embeddings f64 * count * dim, row-major
    /// ```
    ///
    /// The checksum is the first 8 bytes of SHA-256 over the preceding bytes.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(INDEX_MAGIC);
        w.u32(INDEX_VERSION);
        w.u64(self.ids.len() as u64);
        w.u32(self.dim() as u32);
        w.u64(self.meta.built_at);
        w.str(&self.meta.checkpoint_id);
        let header = w.into_inner();
        let mut w = Writer::new();
        w.bytes(&header);
        w.bytes(&codec::checksum(&header));
        for &id in &self.ids {
            w.u32(id);
        }
        w.f64s(self.embeddings.data());
        w.into_inner()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.expect_magic(INDEX_MAGIC)?;
        r.expect_version(INDEX_VERSION)?;
        let count = r.u64()? as usize;
        let dim = r.u32()? as usize;
        let built_at = r.u64()?;
        let checkpoint_id = r.str()?;
        let sum_at = r.offset();
        if r.take(8)? != codec::checksum(&bytes[..sum_at as usize]) {
            return Err(MbvrError::format(sum_at, "header checksum mismatch"));
        }
        let body_at = r.offset();
        let needed = count
            .checked_mul(4 + 8 * dim)
            .ok_or_else(|| MbvrError::format(12, "index size overflows"))?;
        if (bytes.len() as u64 - body_at) < needed as u64 {
            return Err(MbvrError::format(
                body_at,
                format!("truncated: body needs {needed} bytes"),
            ));
        }
        let mut ids = Vec::with_capacity(count);
        for _ in 0..count {
            ids.push(r.u32()?);
        }
        let data = r.f64s(count * dim)?;
        r.finish()?;
        let embeddings = Tensor::new(vec![count, dim], data)?;
        Index::new(
            ids,
            embeddings,
            IndexMeta {
                checkpoint_id,
                built_at,
            },
        )
        .map_err(|e| MbvrError::format(body_at, e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Index::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate, DatasetSpec};
    use crate::encoders::{encode_video, ModelConfig};
    use crate::numcore::cosine_similarity;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn meta() -> IndexMeta {
        IndexMeta {
            checkpoint_id: "test".into(),
            built_at: 0,
        }
    }

    fn random_index(seed: u64, n: usize, d: usize, coarse: bool) -> Index {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = Vec::new();
        for _ in 0..n {
            let v: Vec<f64> = (0..d)
                .map(|_| {
                    if coarse {
                        rng.random_range(-2..=2) as f64
                    } else {
                        rng.random_range(-1.0..1.0)
                    }
                })
                .collect();
            let v = l2_normalize(&v).unwrap_or_else(|_| {
                let mut e = vec![0.0; d];
                e[0] = 1.0;
                e
            });
            data.extend(v);
        }
        // Shuffled, non-contiguous ids exercise the tie-break.
        let ids = (0..n as u32).map(|i| (i * 7919) % 100_003).collect();
        Index::new(ids, Tensor::matrix(n, d, data).unwrap(), meta()).unwrap()
    }

    fn small_model() -> (DatasetSpec, ModelParams) {
        let spec = DatasetSpec {
            num_topics: 4,
            corpus_size: 60,
            num_queries: 5,
            pairs_per_query: 3,
            eval_queries: 4,
            eval_positives_per_query: 3,
            vocab_size: 40,
            vision_dim: 6,
            ..DatasetSpec::default()
        };
        let config = ModelConfig {
            vocab_size: 40,
            token_dim: 4,
            vision_input_dim: 6,
            vision_hidden: 8,
            embed_dim: 8,
            heads: 2,
        };
        (spec, ModelParams::init(config, 1).unwrap())
    }

    #[test]
    fn build_index_examples() {
        let (spec, params) = small_model();
        let ds = generate(&spec).unwrap();
        assert!(build_index(&[], &params, VideoRepr::Fused, 0).is_err());
        let one = build_index(&ds.corpus[..1], &params, VideoRepr::Fused, 0).unwrap();
        let v = &ds.corpus[0];
        let direct = encode_video(&v.text_tokens, &v.vision_features, &params).unwrap();
        assert_eq!(one.embeddings().data(), direct.data());
        let a = build_index(&ds.corpus, &params, VideoRepr::Fused, 0).unwrap();
        let b = build_index(&ds.corpus, &params, VideoRepr::Fused, 0).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        let mut wrong = ds.corpus[0].clone();
        wrong.vision_features.push(0.0);
        assert!(matches!(
            build_index(&[wrong], &params, VideoRepr::Fused, 0),
            Err(MbvrError::Shape(_))
        ));
    }

    #[test]
    fn exact_match_comes_first() {
        let d = 5;
        let mut data = vec![0.0; 5 * d];
        for i in 0..5 {
            data[i * d + i] = 1.0;
        }
        let idx = Index::new(vec![10, 11, 12, 13, 14], Tensor::matrix(5, d, data).unwrap(), meta()).unwrap();
        let res = top_k(&idx, &[0.0, 0.0, 1.0, 0.0, 0.0], 3).unwrap();
        assert_eq!(res.value[0], (12, 1.0));
        // Remaining ties at 0 break by ascending id.
        assert_eq!(res.value[1].0, 10);
        assert_eq!(res.value[2].0, 11);
        let all = top_k(&idx, &[0.0, 0.0, 1.0, 0.0, 0.0], 5).unwrap();
        assert!(!all.degenerate && all.value.len() == 5);
        let over = top_k(&idx, &[0.0, 0.0, 1.0, 0.0, 0.0], 9).unwrap();
        assert!(over.degenerate && over.value.len() == 5);
        assert!(top_k(&idx, &[1.0; 4], 1).is_err());
        assert!(top_k(&idx, &[1.0; 5], 0).is_err());
    }

    #[test]
    fn top_k_matches_full_sort_oracle() {
        for (seed, coarse) in [(1, false), (2, true), (3, true)] {
            let idx = random_index(seed, 200, 3, coarse);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
            let q: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let qn = l2_normalize(&q).unwrap();
            let mut oracle: Vec<(u32, f64)> = (0..200)
                .map(|i| (idx.ids()[i], dot(&qn, idx.embeddings().row(i))))
                .collect();
            oracle.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            let got = top_k(&idx, &q, 10).unwrap().value;
            assert_eq!(got, oracle[..10].to_vec());
            for k in 1..200 {
                let a = top_k(&idx, &q, k).unwrap().value;
                let b = top_k(&idx, &q, k + 1).unwrap().value;
                assert_eq!(a[..], b[..k]);
            }
            for (id, score) in got {
                let c = cosine_similarity(&q, idx.embedding(id).unwrap()).unwrap();
                assert!((score - c).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn evaluate_run_examples() {
        let idx = random_index(4, 30, 4, false);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let queries = Tensor::matrix(3, 4, (0..12).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();

        let all: HashMap<u32, u8> = idx.ids().iter().map(|&id| (id, 2)).collect();
        let out = evaluate_run(&idx, &queries, &vec![all; 3], &[1, 5, 10], 2).unwrap();
        for k in [1, 5, 10] {
            assert_eq!(out.report.get("precision", "-", Some(k)), Some(1.0));
        }

        let empty = evaluate_run(&idx, &queries, &vec![HashMap::new(); 3], &[10], 1).unwrap();
        assert_eq!(empty.report.get("precision", "-", Some(10)), Some(0.0));
        assert_eq!(empty.report.get("mrr", "unnormalized", Some(10)), Some(0.0));
        assert_eq!(empty.report.get("mrr", "normalized", Some(10)), Some(0.0));
        assert!(empty.pnr.is_none());
        assert!(empty.report.get("pnr", "retrieved", None).unwrap().is_nan());

        // Composition: the report equals per-query metric calls assembled by hand.
        let judged: Vec<HashMap<u32, u8>> = (0..3)
            .map(|q| {
                idx.ids()
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| (i + q) % 3 == 0)
                    .map(|(i, &id)| (id, (i % 3) as u8))
                    .collect()
            })
            .collect();
        let out = evaluate_run(&idx, &queries, &judged, &[10], 1).unwrap();
        let mut p = 0.0;
        let mut m = 0.0;
        for (q, j) in judged.iter().enumerate() {
            let res = top_k(&idx, queries.row(q), 10).unwrap().value;
            let r = RankedRun::new(res, j.clone()).unwrap();
            p += precision_at_k(&r, 10).unwrap() / 3.0;
            m += mrr_at_k(&r, 10, false).unwrap() / 3.0;
        }
        assert!((out.report.get("precision", "-", Some(10)).unwrap() - p).abs() < 1e-15);
        assert!((out.report.get("mrr", "unnormalized", Some(10)).unwrap() - m).abs() < 1e-15);
        assert!(evaluate_run(&idx, &Tensor::matrix(0, 4, vec![]).unwrap(), &[], &[10], 1).is_err());
    }

    #[test]
    fn index_file_round_trips_and_rejects_corruption() {
        let idx = random_index(9, 50, 6, false);
        let bytes = idx.to_bytes();
        let back = Index::from_bytes(&bytes).unwrap();
        assert_eq!(back, idx);
        assert_eq!(back.to_bytes(), bytes);
        let header_len = 8 + 4 + 8 + 4 + 8 + 4 + "test".len() + 8;
        for pos in 0..header_len {
            let mut bad = bytes.clone();
            bad[pos] ^= 0x21;
            match Index::from_bytes(&bad) {
                Err(MbvrError::Format { offset, .. }) => assert!((offset as usize) < header_len + 1),
                other => panic!("byte {pos}: unexpected {other:?}"),
            }
        }
        assert!(matches!(
            Index::from_bytes(&bytes[..bytes.len() - 3]),
            Err(MbvrError::Format { .. })
        ));
    }
}
