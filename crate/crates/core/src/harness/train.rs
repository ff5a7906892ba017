use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{Dataset, LabeledPair};
use crate::encoders::{feature_matrix, ModelParams, TokenBatch, TokenId};
use crate::error::{MbvrError, Result};
use crate::losses::{
    batch_margins, bidirectional_loss_var, false_negative_mask, generate_ms_negatives_var, objective_var, BatchVars,
    LossValues, MsIndices,
};
use crate::numcore::{Tape, Tensor};

use super::optim::Optimizer;
use super::{TrainConfig, Variant};

const STREAM_SHUFFLE: u64 = 1;
const STREAM_MS: u64 = 2;

/// Loss recorded for one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub steps: Vec<StepLoss>,
    /// Mean step loss per epoch.
    pub epoch_means: Vec<f64>,
    /// Checkpoint written at the end of each epoch, when an output directory
    /// was given.
    pub checkpoints: Vec<PathBuf>,
}

impl TrainOutcome {
    pub fn loss_curve_tsv(&self, stamp: &str) -> String {
        let mut out = format!("{stamp}\nepoch\tstep\tloss\n");
        for s in &self.steps {
            writeln!(out, "{}\t{}\t{}", s.epoch, s.step, s.loss).expect("string write");
        }
        out
    }
}

struct Streams {
    shuffle: ChaCha8Rng,
    ms: ChaCha8Rng,
}

impl Streams {
    fn new(seed: u64) -> Self {
        let stream = |s| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(s);
            r
        };
        Streams {
            shuffle: stream(STREAM_SHUFFLE),
            ms: stream(STREAM_MS),
        }
    }
}

/// Mini-batch training of `config.variant` on the dataset's training pairs.
///
/// Pairs are reshuffled every epoch from a seeded stream; a trailing batch
/// with fewer than two pairs is dropped. With `out_dir`, a checkpoint
/// `epoch_<e>.ckpt` is written after each epoch and the per-step loss curve
/// goes to `loss_curve.tsv`. A non-finite loss or gradient aborts the run
/// and describes the offending batch in `nan_dump.txt` (or inline when there
/// is no output directory).
pub fn train(config: &TrainConfig, dataset: &Dataset, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    config.validate()?;
    check_compatible(config, dataset)?;
    if dataset.train_pairs.len() < 2 {
        return Err(MbvrError::InvalidArgument("need at least two training pairs".into()));
    }
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
    }
    let mut params = ModelParams::init(config.model, config.seed)?;
    let mut optimizer = Optimizer::new(config.optimizer, config.learning_rate, &params);
    let mut rngs = Streams::new(config.seed);
    let mut order: Vec<usize> = (0..dataset.train_pairs.len()).collect();
    let mut steps = Vec::new();
    let mut epoch_means = Vec::with_capacity(config.epochs);
    let mut checkpoints = Vec::new();

    for epoch in 0..config.epochs {
        order.shuffle(&mut rngs.shuffle);
        let mut epoch_sum = 0.0;
        let mut epoch_steps = 0;
        for (step, chunk) in order.chunks(config.batch_size).enumerate() {
            if chunk.len() < 2 {
                log::debug!("dropping trailing batch of {} pair(s)", chunk.len());
                continue;
            }
            let pairs: Vec<&LabeledPair> = chunk.iter().map(|&i| &dataset.train_pairs[i]).collect();
            let (loss, values, grads) = batch_step(config, dataset, &params, &pairs, &mut rngs.ms)?;
            if !loss.is_finite() || grads.iter().any(|g| !g.all_finite()) {
                let dump = describe_batch(epoch, step, &pairs, loss, values.as_ref());
                let dump = match out_dir {
                    Some(dir) => {
                        let path = dir.join("nan_dump.txt");
                        fs::write(&path, &dump)?;
                        path.display().to_string()
                    }
                    None => dump,
                };
                log::error!("non-finite loss at epoch {epoch}, step {step}");
                return Err(MbvrError::NonFiniteLoss { epoch, step, dump });
            }
            optimizer.step(&mut params, &grads);
            steps.push(StepLoss { epoch, step, loss });
            epoch_sum += loss;
            epoch_steps += 1;
        }
        let mean = epoch_sum / epoch_steps as f64;
        log::info!("{} epoch {epoch}: mean loss {mean:.6}", config.variant);
        epoch_means.push(mean);
        if let Some(dir) = out_dir {
            let path = dir.join(format!("epoch_{epoch}.ckpt"));
            params.save(&path)?;
            checkpoints.push(path);
        }
    }
    let outcome = TrainOutcome {
        params,
        steps,
        epoch_means,
        checkpoints,
    };
    if let Some(dir) = out_dir {
        fs::write(dir.join("loss_curve.tsv"), outcome.loss_curve_tsv(&config.stamp()))?;
    }
    Ok(outcome)
}

fn check_compatible(config: &TrainConfig, dataset: &Dataset) -> Result<()> {
    let (m, s) = (&config.model, &dataset.spec);
    if m.vocab_size < s.vocab_size || m.vision_input_dim != s.vision_dim {
        return Err(MbvrError::Config(format!(
            "model (vocab {}, vision {}) does not fit dataset (vocab {}, vision {})",
            m.vocab_size, m.vision_input_dim, s.vocab_size, s.vision_dim
        )));
    }
    Ok(())
}

type StepResult = (f64, Option<LossValues>, Vec<Tensor>);

/// Forward and backward pass for one batch. Returns the loss, its components
/// (when the variant has them) and gradients in parameter order.
fn batch_step(
    config: &TrainConfig,
    dataset: &Dataset,
    params: &ModelParams,
    pairs: &[&LabeledPair],
    ms_rng: &mut ChaCha8Rng,
) -> Result<StepResult> {
    let vocab = params.config.vocab_size;
    let queries: Vec<_> = pairs
        .iter()
        .map(|p| &dataset.train_queries[p.query_id as usize])
        .collect();
    let videos: Vec<_> = pairs
        .iter()
        .map(|p| {
            dataset
                .video(p.video_id)
                .ok_or_else(|| MbvrError::InvalidArgument(format!("unknown video {}", p.video_id)))
        })
        .collect::<Result<_>>()?;
    let query_tokens = TokenBatch::new(queries.iter().map(|q| q.tokens.as_slice()), vocab)?;

    let mut tape = Tape::new();
    let vars = params.bind(&mut tape, true);
    let q = vars.text.encode(&mut tape, &query_tokens)?;
    let negative_mask = config.exclude_same_topic.then(|| {
        let mask = false_negative_mask(pairs.len(), |i, j| videos[j].text_topic == queries[i].topic);
        tape.constant(mask)
    });
    let encode_text = |tape: &mut Tape| {
        let tokens = TokenBatch::new(videos.iter().map(|v| v.text_tokens.as_slice() as &[TokenId]), vocab)?;
        vars.text.encode(tape, &tokens)
    };
    let encode_vision = |tape: &mut Tape| {
        let features: Vec<&[f64]> = videos.iter().map(|v| v.vision_features.as_slice()).collect();
        let x = tape.constant(feature_matrix(&features, params.config.vision_input_dim)?);
        vars.vision.encode(tape, x)
    };

    let (loss, values) = match config.variant {
        Variant::TextOnly | Variant::VisionOnly => {
            let docs = if config.variant == Variant::TextOnly {
                encode_text(&mut tape)?
            } else {
                encode_vision(&mut tape)?
            };
            let mut sim = tape.matmul_tb(q, docs);
            if let Some(mask) = negative_mask {
                sim = tape.add(sim, mask);
            }
            (
                bidirectional_loss_var(&mut tape, sim, config.loss.tau, None)?.value,
                None,
            )
        }
        variant => {
            let t = encode_text(&mut tape)?;
            let v = encode_vision(&mut tape)?;
            let tp = vars.fusion.project(&mut tape, t);
            let vp = vars.fusion.project(&mut tape, v);
            let m = vars.fusion.fuse_projected(&mut tape, &tp, &vp, None)?;
            let batch = BatchVars {
                query: q,
                text: t,
                vision: v,
                fused: m,
                negative_mask,
            };
            let ms = if variant.uses_ms() {
                let indices = MsIndices::sample(pairs.len(), config.loss.m, config.ms_sampling, ms_rng)?;
                Some(generate_ms_negatives_var(&mut tape, &vars.fusion, &tp, &vp, indices)?)
            } else {
                None
            };
            let margins = if variant.uses_margin() {
                Some(batch_margins(&mut tape, q, v, config.loss.w, config.loss.b)?)
            } else {
                None
            };
            let terms = objective_var(&mut tape, &batch, ms.as_ref(), &config.loss, margins)?;
            (terms.total, Some(terms.values(&tape)?))
        }
    };
    let value = tape.item(loss)?;
    let grads = tape.gradients(loss, &vars.leaves())?;
    Ok((value, values, grads))
}

fn describe_batch(epoch: usize, step: usize, pairs: &[&LabeledPair], loss: f64, values: Option<&LossValues>) -> String {
    let mut out = format!("epoch\t{epoch}\nstep\t{step}\nloss\t{loss}\n");
    if let Some(v) = values {
        writeln!(
            out,
            "bidirectional\t{}\nvision_aux\t{}\ntext_aux\t{}\nms\t{}",
            v.bidirectional,
            v.vision_aux,
            v.text_aux,
            v.ms.map_or_else(|| "-".to_string(), |x| x.to_string())
        )
        .expect("string write");
    }
    out.push_str("query_id\tvideo_id\ttext_relevant\tvision_relevant\n");
    for p in pairs {
        writeln!(
            out,
            "{}\t{}\t{}\t{}",
            p.query_id, p.video_id, p.text_relevant, p.vision_relevant
        )
        .expect("string write");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate, DatasetSpec};
    use crate::encoders::ModelConfig;
    use crate::harness::OptimizerKind;
    use crate::losses::LossConfig;

    pub(crate) fn sanity_data() -> Dataset {
        generate(&DatasetSpec {
            num_topics: 5,
            corpus_size: 400,
            num_queries: 100,
            pairs_per_query: 10,
            vocab_size: 100,
            vision_dim: 8,
            eval_queries: 20,
            eval_positives_per_query: 5,
            ..DatasetSpec::default()
        })
        .unwrap()
    }

    pub(crate) fn small_config(variant: Variant) -> TrainConfig {
        TrainConfig {
            variant,
            batch_size: 32,
            learning_rate: 1e-2,
            epochs: 2,
            loss: LossConfig {
                m: 4,
                ..LossConfig::default()
            },
            model: ModelConfig {
                vocab_size: 100,
                token_dim: 8,
                vision_input_dim: 8,
                vision_hidden: 16,
                embed_dim: 16,
                heads: 2,
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn base_loss_decreases_over_two_epochs() {
        let data = sanity_data();
        assert_eq!(data.train_pairs.len(), 1000);
        let out = train(&small_config(Variant::Base), &data, None).unwrap();
        assert_eq!(out.epoch_means.len(), 2);
        assert!(out.epoch_means[1] < out.epoch_means[0], "{:?}", out.epoch_means);
        // 1000 pairs in batches of 32: 31 full batches plus one of 8.
        assert_eq!(out.steps.len(), 64);
    }

    #[test]
    fn training_is_deterministic() {
        let data = sanity_data();
        for variant in [Variant::Mbvr, Variant::TextOnly] {
            let cfg = TrainConfig {
                epochs: 1,
                ..small_config(variant)
            };
            let a = train(&cfg, &data, None).unwrap();
            let b = train(&cfg, &data, None).unwrap();
            assert_eq!(a.params.to_bytes(), b.params.to_bytes());
            assert_eq!(a.steps, b.steps);
        }
    }

    #[test]
    fn single_modality_variants_leave_the_other_towers_untouched() {
        let data = sanity_data();
        let cfg = TrainConfig {
            epochs: 1,
            ..small_config(Variant::TextOnly)
        };
        let init = ModelParams::init(cfg.model, cfg.seed).unwrap();
        let out = train(&cfg, &data, None).unwrap();
        assert_eq!(out.params.vision, init.vision);
        assert_eq!(out.params.fusion, init.fusion);
        assert_ne!(out.params.text, init.text);

        let cfg = TrainConfig {
            variant: Variant::VisionOnly,
            ..cfg
        };
        let out = train(&cfg, &data, None).unwrap();
        assert_eq!(out.params.fusion, init.fusion);
        assert_ne!(out.params.vision, init.vision);
    }

    #[test]
    fn every_variant_trains_and_sgd_works() {
        let data = sanity_data();
        for variant in Variant::ALL {
            let cfg = TrainConfig {
                epochs: 1,
                ..small_config(variant)
            };
            let out = train(&cfg, &data, None).unwrap();
            assert!(out.steps.iter().all(|s| s.loss.is_finite()), "{variant}");
        }
        let cfg = TrainConfig {
            optimizer: OptimizerKind::Sgd,
            learning_rate: 0.5,
            exclude_same_topic: true,
            ..small_config(Variant::Base)
        };
        let out = train(&cfg, &data, None).unwrap();
        assert!(out.epoch_means[1] < out.epoch_means[0]);
    }

    #[test]
    fn checkpoints_and_loss_curve_are_written() {
        let data = sanity_data();
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_config(Variant::BaseDm);
        let out = train(&cfg, &data, Some(dir.path())).unwrap();
        assert_eq!(out.checkpoints.len(), 2);
        let last = ModelParams::load(&out.checkpoints[1]).unwrap();
        assert_eq!(last, out.params);
        let curve = fs::read_to_string(dir.path().join("loss_curve.tsv")).unwrap();
        assert!(curve.starts_with(&cfg.stamp()));
        assert_eq!(curve.lines().count(), 2 + out.steps.len());
    }

    #[test]
    fn diverging_loss_aborts_with_a_batch_dump() {
        let data = sanity_data();
        let mut cfg = small_config(Variant::Base);
        cfg.loss.alpha = 1e308;
        cfg.loss.beta = 1e308;
        let dir = tempfile::tempdir().unwrap();
        match train(&cfg, &data, Some(dir.path())) {
            Err(MbvrError::NonFiniteLoss {
                epoch: 0,
                step: 0,
                dump,
            }) => {
                let text = fs::read_to_string(&dump).unwrap();
                assert!(text.contains("query_id\tvideo_id"));
                assert_eq!(text.lines().filter(|l| l.split('\t').count() == 4).count(), 33);
            }
            other => panic!("expected a non-finite loss error, got {other:?}"),
        }
        assert!(matches!(train(&cfg, &data, None), Err(MbvrError::NonFiniteLoss { .. })));
    }

    #[test]
    fn incompatible_model_is_rejected() {
        let data = sanity_data();
        let mut cfg = small_config(Variant::Base);
        cfg.model.vision_input_dim = 9;
        assert!(matches!(train(&cfg, &data, None), Err(MbvrError::Config(_))));
    }
}
