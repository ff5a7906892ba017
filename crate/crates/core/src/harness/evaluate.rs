use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::datagen::{Dataset, LabeledPair};
use crate::encoders::{encode_queries, encode_videos, fuse, ModelParams, TokenId, VideoEmbeddings, VideoRepr};
use crate::error::{MbvrError, Result};
use crate::metrics::{overlap_stat, pnr, rvt_histogram, MetricReport, RankedRun, RvtSummary, DEFAULT_RVT_THRESHOLD};
use crate::numcore::kernels::dot;
use crate::retrieval::{build_index, evaluate_run, RetrievalEval};

/// Minimum label counted as relevant in retrieval evaluation: only videos
/// matching the query in both modalities.
pub const EVAL_RELEVANT_LABEL: u8 = 2;

fn check_dims(params: &ModelParams, dataset: &Dataset) -> Result<()> {
    if params.config.vision_input_dim != dataset.spec.vision_dim || params.config.vocab_size < dataset.spec.vocab_size {
        return Err(MbvrError::Shape(format!(
            "checkpoint (vocab {}, vision {}) is incompatible with dataset (vocab {}, vision {})",
            params.config.vocab_size, params.config.vision_input_dim, dataset.spec.vocab_size, dataset.spec.vision_dim
        )));
    }
    Ok(())
}

fn corpus_embeddings(params: &ModelParams, dataset: &Dataset) -> Result<VideoEmbeddings> {
    let tokens: Vec<&[TokenId]> = dataset.corpus.iter().map(|v| v.text_tokens.as_slice()).collect();
    let features: Vec<&[f64]> = dataset.corpus.iter().map(|v| v.vision_features.as_slice()).collect();
    encode_videos(params, &tokens, &features)
}

/// Retrieval over the full corpus for every evaluation query, plus PNR over
/// the judged evaluation pairs (`("pnr", "labeled_pairs")`, NaN when
/// undefined). Relevance for retrieval is [`EVAL_RELEVANT_LABEL`].
pub fn evaluate(params: &ModelParams, dataset: &Dataset, repr: VideoRepr, ks: &[usize]) -> Result<RetrievalEval> {
    check_dims(params, dataset)?;
    if dataset.eval_queries.is_empty() {
        return Err(MbvrError::InvalidArgument("dataset has no evaluation queries".into()));
    }
    let index = build_index(&dataset.corpus, params, repr, 0)?;
    let query_tokens: Vec<&[TokenId]> = dataset.eval_queries.iter().map(|q| q.tokens.as_slice()).collect();
    let queries = encode_queries(params, &query_tokens)?;
    let judgments: Vec<HashMap<u32, u8>> = dataset
        .eval_queries
        .iter()
        .map(|q| dataset.judgments(q.topic))
        .collect();
    let mut eval = evaluate_run(&index, &queries, &judgments, ks, EVAL_RELEVANT_LABEL)?;

    let mut by_query: HashMap<u32, Vec<&LabeledPair>> = HashMap::new();
    for p in &dataset.eval_pairs {
        by_query.entry(p.query_id).or_default().push(p);
    }
    let mut runs = Vec::with_capacity(dataset.eval_queries.len());
    for (row, q) in dataset.eval_queries.iter().enumerate() {
        let Some(pairs) = by_query.get(&q.id) else { continue };
        let qv = queries.row(row);
        let scored = pairs
            .iter()
            .map(|p| {
                let emb = index
                    .embedding(p.video_id)
                    .ok_or_else(|| MbvrError::InvalidArgument(format!("judged video {} not in corpus", p.video_id)))?;
                Ok((p.video_id, dot(qv, emb)))
            })
            .collect::<Result<Vec<_>>>()?;
        let labels = pairs.iter().map(|p| (p.video_id, p.overall_label())).collect();
        runs.push(RankedRun::from_unsorted(scored, labels)?);
    }
    let labeled = pnr(&runs).ok();
    eval.report
        .push("pnr", "labeled_pairs", None, labeled.map_or(f64::NAN, |p| p.value));
    Ok(eval)
}

/// Mean and standard deviation of Precision@`k` averaged over the
/// evaluation queries when each query's corpus ranking is a uniform random
/// permutation. Per query the number of relevant results in the top `k` is
/// hypergeometric.
pub fn random_precision_baseline(dataset: &Dataset, k: usize) -> Result<(f64, f64)> {
    let n = dataset.corpus.len();
    if k == 0 || k > n {
        return Err(MbvrError::InvalidArgument(format!("K = {k} outside 1..={n}")));
    }
    let q = dataset.eval_queries.len();
    if q == 0 {
        return Err(MbvrError::InvalidArgument("dataset has no evaluation queries".into()));
    }
    let (n, kf) = (n as f64, k as f64);
    let mut mean = 0.0;
    let mut var = 0.0;
    for query in &dataset.eval_queries {
        let relevant = dataset
            .judgments(query.topic)
            .values()
            .filter(|&&l| l >= EVAL_RELEVANT_LABEL)
            .count() as f64;
        let p = relevant / n;
        mean += p;
        let finite_population = if n > 1.0 { (n - kf) / (n - 1.0) } else { 0.0 };
        var += p * (1.0 - p) * finite_population / kf;
    }
    let qf = q as f64;
    Ok((mean / qf, var.sqrt() / qf))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnalyzeOptions {
    pub bin_width: f64,
    pub threshold: f64,
    /// MS negatives built for each positive pair.
    pub ms_per_positive: usize,
    pub seed: u64,
}

impl Default for AnalyzeOptions {
    fn default() -> Self {
        AnalyzeOptions {
            bin_width: 0.1,
            threshold: DEFAULT_RVT_THRESHOLD,
            ms_per_positive: 4,
            seed: 0,
        }
    }
}

/// Modality-balance diagnostics of a checkpoint on a corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct Diagnostics {
    pub rvt: RvtSummary,
    /// Query scores of judged label-2 evaluation pairs.
    pub positive_scores: Vec<f64>,
    /// Query scores of the same videos' text fused with vision from a video
    /// of another vision topic.
    pub ms_scores: Vec<f64>,
    pub overlap: f64,
}

/// Computes `R_vt` over the whole corpus and the score separation between
/// positives and their modality-shuffled counterparts.
pub fn analyze(params: &ModelParams, dataset: &Dataset, opts: &AnalyzeOptions) -> Result<Diagnostics> {
    check_dims(params, dataset)?;
    if opts.ms_per_positive == 0 {
        return Err(MbvrError::InvalidArgument("ms_per_positive must be at least 1".into()));
    }
    let emb = corpus_embeddings(params, dataset)?;
    let rvt = rvt_histogram(&emb.text, &emb.vision, &emb.fused, opts.bin_width, opts.threshold)?;

    let positives: Vec<&LabeledPair> = dataset.eval_pairs.iter().filter(|p| p.overall_label() == 2).collect();
    if positives.is_empty() {
        return Err(MbvrError::Degenerate("no label-2 evaluation pairs to analyze".into()));
    }
    let query_tokens: Vec<&[TokenId]> = dataset.eval_queries.iter().map(|q| q.tokens.as_slice()).collect();
    let queries = encode_queries(params, &query_tokens)?;
    let row_of: HashMap<u32, usize> = dataset
        .eval_queries
        .iter()
        .enumerate()
        .map(|(i, q)| (q.id, i))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut positive_scores = Vec::with_capacity(positives.len());
    let mut ms_scores = Vec::with_capacity(positives.len() * opts.ms_per_positive);
    for p in positives {
        let row = *row_of
            .get(&p.query_id)
            .ok_or_else(|| MbvrError::InvalidArgument(format!("pair refers to unknown query {}", p.query_id)))?;
        let topic = dataset.eval_queries[row].topic;
        let q = queries.row(row);
        let video = p.video_id as usize;
        positive_scores.push(dot(q, emb.fused.row(video)));
        let donors: Vec<usize> = (0..opts.ms_per_positive)
            .map(|_| draw_donor(&mut rng, dataset, topic))
            .collect::<Result<_>>()?;
        for donor in donors {
            let shuffled = fuse(emb.text.row(video), emb.vision.row(donor), &params.fusion)?;
            ms_scores.push(dot(q, shuffled.data()));
        }
    }
    let overlap = overlap_stat(&positive_scores, &ms_scores)?;
    Ok(Diagnostics {
        rvt,
        positive_scores,
        ms_scores,
        overlap,
    })
}

/// Uniformly drawn corpus position whose vision topic differs from `topic`.
fn draw_donor(rng: &mut ChaCha8Rng, dataset: &Dataset, topic: u32) -> Result<usize> {
    let n = dataset.corpus.len();
    for _ in 0..64 * n.max(1) {
        let i = rng.random_range(0..n);
        if dataset.corpus[i].vision_topic != topic {
            return Ok(i);
        }
    }
    Err(MbvrError::Degenerate(format!(
        "no video with a vision topic other than {topic}"
    )))
}

impl Diagnostics {
    /// Writes `rvt_histogram.tsv`, `scores.tsv` and `diagnostics.tsv` to `dir`,
    /// each starting with `stamp`.
    pub fn write(&self, dir: &Path, stamp: &str) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(
            dir.join("rvt_histogram.tsv"),
            format!("{stamp}\n{}", self.rvt.histogram.to_tsv()),
        )?;
        let mut scores = format!("{stamp}\nkind\tscore\n");
        for s in &self.positive_scores {
            writeln!(scores, "positive\t{s}").expect("string write");
        }
        for s in &self.ms_scores {
            writeln!(scores, "ms_negative\t{s}").expect("string write");
        }
        fs::write(dir.join("scores.tsv"), scores)?;
        fs::write(
            dir.join("diagnostics.tsv"),
            format!("{stamp}\n{}", self.summary().to_tsv()),
        )?;
        Ok(())
    }

    /// Scalar diagnostics in report form.
    pub fn summary(&self) -> MetricReport {
        let mut r = MetricReport::default();
        r.push("rvt", "below_threshold_fraction", None, self.rvt.below_fraction);
        r.push("rvt", "median", None, self.rvt.median);
        r.push("rvt", "undefined_count", None, self.rvt.undefined as f64);
        r.push("overlap_stat", "-", None, self.overlap);
        r
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate, DatasetSpec};
    use crate::encoders::ModelConfig;
    use crate::metrics::Histogram;
    use crate::numcore::Tensor;

    fn data() -> Dataset {
        generate(&DatasetSpec {
            num_topics: 5,
            corpus_size: 500,
            num_queries: 10,
            pairs_per_query: 5,
            vocab_size: 100,
            vision_dim: 8,
            eval_queries: 40,
            eval_positives_per_query: 10,
            ..DatasetSpec::default()
        })
        .unwrap()
    }

    fn config() -> ModelConfig {
        ModelConfig {
            vocab_size: 100,
            token_dim: 8,
            vision_input_dim: 8,
            vision_hidden: 16,
            embed_dim: 8,
            heads: 2,
        }
    }

    fn identity(d: usize) -> Tensor {
        let mut t = Tensor::zeros(&[d, d]);
        for i in 0..d {
            t.data_mut()[i * d + i] = 1.0;
        }
        t
    }

    fn zero_attention(p: &mut ModelParams) {
        let d = p.config.embed_dim;
        for t in [&mut p.fusion.query_w, &mut p.fusion.key_w] {
            *t = Tensor::zeros(&[d, d]);
        }
        for t in [
            &mut p.fusion.query_b,
            &mut p.fusion.key_b,
            &mut p.fusion.value_b,
            &mut p.fusion.out_b,
        ] {
            *t = Tensor::zeros(&[d]);
        }
        p.fusion.out_w = identity(d);
    }

    /// Text embeddings live in coordinates 1.., vision embeddings on axis 0,
    /// and the fusion value map drops axis 0, so the fused embedding is the
    /// text embedding whatever the vision input.
    fn vision_blind() -> ModelParams {
        let mut p = ModelParams::init(config(), 3).unwrap();
        let d = p.config.embed_dim;
        for r in 0..p.text.projection.rows() {
            p.text.projection.data_mut()[r * d] = 0.0;
        }
        p.text.bias.data_mut()[0] = 0.0;
        let hidden = p.vision.out_w.rows();
        p.vision.out_w = Tensor::zeros(&[hidden, d]);
        for r in 0..hidden {
            p.vision.out_w.data_mut()[r * d] = 1.0;
        }
        p.vision.out_b = Tensor::zeros(&[d]);
        p.vision.out_b.data_mut()[0] = 0.5;
        zero_attention(&mut p);
        let mut v = identity(d);
        v.data_mut()[0] = 0.0;
        p.fusion.value_w = v;
        p
    }

    #[test]
    fn vision_blind_checkpoint_is_fully_text_dominated() {
        let ds = data();
        let diag = analyze(&vision_blind(), &ds, &AnalyzeOptions::default()).unwrap();
        assert_eq!(diag.rvt.undefined, 0);
        assert_eq!(diag.rvt.below_fraction, 1.0);
        assert!((diag.overlap - 0.5).abs() < 0.02, "{}", diag.overlap);
        assert_eq!(diag.ms_scores.len(), 4 * diag.positive_scores.len());
    }

    #[test]
    fn averaging_fusion_puts_the_mass_at_one() {
        let ds = data();
        let mut p = ModelParams::init(config(), 4).unwrap();
        zero_attention(&mut p);
        p.fusion.value_w = identity(p.config.embed_dim);
        let diag = analyze(&p, &ds, &AnalyzeOptions::default()).unwrap();
        let h = &diag.rvt.histogram;
        // Rounding can put a value on either side of the edge at 1.0, so all
        // mass must sit in the bins that meet there.
        for (i, &c) in h.counts.iter().enumerate() {
            let touches_one = (h.bin_edges[i] - 1.0).abs() < 1e-9 || (h.bin_edges[i + 1] - 1.0).abs() < 1e-9;
            assert!(c == 0 || touches_one, "bin {i} holds {c}");
        }
        assert_eq!(h.counts.iter().sum::<u64>(), h.total);
        assert!(diag.rvt.values.iter().all(|x| (x - 1.0).abs() < 1e-9));
    }

    #[test]
    fn diagnostics_files_parse_back() {
        let ds = data();
        let p = ModelParams::init(config(), 5).unwrap();
        let diag = analyze(&p, &ds, &AnalyzeOptions::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        diag.write(dir.path(), "# config=test seed=5").unwrap();
        let h = Histogram::from_tsv(&fs::read_to_string(dir.path().join("rvt_histogram.tsv")).unwrap()).unwrap();
        assert_eq!(h, diag.rvt.histogram);
        assert_eq!(h.counts.iter().sum::<u64>(), diag.rvt.values.len() as u64);
        let summary = MetricReport::from_tsv(&fs::read_to_string(dir.path().join("diagnostics.tsv")).unwrap()).unwrap();
        assert_eq!(summary.get("overlap_stat", "-", None), Some(diag.overlap));
        let scores = fs::read_to_string(dir.path().join("scores.tsv")).unwrap();
        assert_eq!(
            scores.lines().count(),
            2 + diag.positive_scores.len() + diag.ms_scores.len()
        );
    }

    #[test]
    fn untrained_checkpoint_is_near_the_random_baseline() {
        let ds = generate(&DatasetSpec {
            num_topics: 10,
            corpus_size: 2000,
            num_queries: 10,
            pairs_per_query: 5,
            vocab_size: 200,
            vision_dim: 8,
            eval_queries: 200,
            ..DatasetSpec::default()
        })
        .unwrap();
        let cfg = ModelConfig {
            vocab_size: 200,
            ..config()
        };
        let p = ModelParams::init(cfg, 6).unwrap();
        let (mean, sd) = random_precision_baseline(&ds, 10).unwrap();
        let eval = evaluate(&p, &ds, VideoRepr::Fused, &[10]).unwrap();
        let got = eval.report.get("precision", "-", Some(10)).unwrap();
        assert!((got - mean).abs() <= 3.0 * sd, "P@10 {got} vs baseline {mean} ± {sd}");
    }

    #[test]
    fn evaluation_is_repeatable_and_has_exactly_the_requested_rows() {
        let ds = data();
        let p = ModelParams::init(config(), 7).unwrap();
        let a = evaluate(&p, &ds, VideoRepr::Fused, &[10]).unwrap();
        let b = evaluate(&p, &ds, VideoRepr::Fused, &[10]).unwrap();
        assert_eq!(a.report.to_tsv(), b.report.to_tsv());
        let keyed: Vec<_> = a
            .report
            .rows
            .iter()
            .map(|r| (r.metric.as_str(), r.variant.as_str(), r.k))
            .collect();
        assert_eq!(
            keyed,
            vec![
                ("precision", "-", Some(10)),
                ("mrr", "unnormalized", Some(10)),
                ("mrr", "normalized", Some(10)),
                ("pnr", "retrieved", None),
                ("pnr", "labeled_pairs", None),
            ]
        );
        assert!(a.report.get("pnr", "labeled_pairs", None).unwrap().is_finite());
    }

    #[test]
    fn baseline_matches_a_direct_computation() {
        let ds = data();
        let (mean, sd) = random_precision_baseline(&ds, 10).unwrap();
        let n = ds.corpus.len() as f64;
        let mut sum = 0.0;
        for q in &ds.eval_queries {
            let r = ds
                .corpus
                .iter()
                .filter(|v| v.text_topic == q.topic && v.vision_topic == q.topic)
                .count();
            sum += r as f64 / n;
        }
        assert!((mean - sum / ds.eval_queries.len() as f64).abs() < 1e-15);
        assert!(sd > 0.0);
        assert!(random_precision_baseline(&ds, 0).is_err());
    }

    #[test]
    fn incompatible_checkpoint_is_rejected() {
        let ds = data();
        let p = ModelParams::init(
            ModelConfig {
                vision_input_dim: 9,
                ..config()
            },
            0,
        )
        .unwrap();
        assert!(matches!(
            evaluate(&p, &ds, VideoRepr::Fused, &[10]),
            Err(MbvrError::Shape(_))
        ));
        assert!(matches!(
            analyze(&p, &ds, &AnalyzeOptions::default()),
            Err(MbvrError::Shape(_))
        ));
    }
}
