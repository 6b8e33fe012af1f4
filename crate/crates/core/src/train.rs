//! Two-stage training and split evaluation.
//!
//! Stage 1 trains the view encoder as a per-view classifier (every view an
//! independent sample); stage 2 trains the whole aggregation network,
//! starting from the stage-1 encoder.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aggregator::{embed, ModelConfig, PremaParams};
use crate::dataset::{
    derive_seed, render_noisy, DatasetManifest, ManifestRecord, NoiseConfig, Split,
};
use crate::encoder::{CnnEncoderParams, EncoderVars};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::metrics::{accuracy, localization_mass, MetricsReport};
use crate::optim::{sgd_step, StepSchedule};
use crate::params::{prefixed, prefixed_mut, Parameterized};
use crate::rau::ConfidenceMap;
use crate::retrieval::{rank_all, Embedded};
use crate::tensor::Tensor;

/// How per-sample losses of a batch combine into the optimized objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossReduction {
    Mean,
    Sum,
}

impl std::str::FromStr for LossReduction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(LossReduction::Mean),
            "sum" => Ok(LossReduction::Sum),
            _ => Err(Error::Config(format!("unknown loss reduction `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stage1: StepSchedule,
    pub stage2: StepSchedule,
    pub batch1: usize,
    pub batch2: usize,
    pub seed: u64,
    pub reduction: LossReduction,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage1: StepSchedule {
                epochs: 20,
                initial_lr: 0.01,
                anneal_epoch: 10,
            },
            stage2: StepSchedule {
                epochs: 30,
                initial_lr: 0.001,
                anneal_epoch: 20,
            },
            batch1: 32,
            batch2: 4,
            seed: 0,
            reduction: LossReduction::Sum,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.stage1.validate()?;
        self.stage2.validate()?;
        if self.batch1 == 0 || self.batch2 == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        Ok(())
    }
}

/// One row of the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub stage: u8,
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
}

/// Views of one labelled shape.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledViews {
    pub shape_id: String,
    pub class_id: usize,
    pub views: Vec<Tensor>,
}

/// Loads the clean views of every record in `split`.
pub fn load_split(manifest: &DatasetManifest, split: Split) -> Result<Vec<LabeledViews>> {
    manifest
        .split(split)
        .into_iter()
        .map(|r| {
            Ok(LabeledViews {
                shape_id: r.shape_id.clone(),
                class_id: r.class_id,
                views: manifest.load_views(r)?.views,
            })
        })
        .collect()
}

/// Views of `record` under `noise` (clean records come from disk).
pub fn noisy_views(manifest: &DatasetManifest, record: &ManifestRecord, noise: &NoiseConfig) -> Result<Vec<Tensor>> {
    if noise.is_clean() {
        return Ok(manifest.load_views(record)?.views);
    }
    let spec = manifest.shape_spec(record)?;
    Ok(render_noisy(
        &spec,
        manifest.meta.views_per_shape,
        manifest.meta.image_size,
        noise,
        manifest.meta.class_count,
    )?
    .views)
}

/// Encoder plus the per-view linear head used only in stage 1.
#[derive(Clone, Debug, PartialEq)]
pub struct Stage1Model {
    pub encoder: CnnEncoderParams,
    pub head_w: Tensor,
    pub head_b: Tensor,
}

impl Stage1Model {
    pub fn init(encoder: CnnEncoderParams, classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "stage1-head"));
        let c_v = encoder.feature_dim();
        Stage1Model {
            encoder,
            head_w: Tensor::glorot(&[classes, c_v], c_v, classes, &mut rng),
            head_b: Tensor::zeros(&[classes]),
        }
    }

    fn bind(&self, g: &mut Graph) -> (EncoderVars, Var, Var, Vec<Var>) {
        let all = self.bind_all(g);
        let n = all.len();
        (self.encoder.vars_from(&all[..n - 2]), all[n - 2], all[n - 1], all)
    }

    /// Summed (or mean) cross-entropy over `(image, label)` samples.
    pub fn batch_loss(
        &self,
        g: &mut Graph,
        samples: &[(&Tensor, usize)],
        reduction: LossReduction,
    ) -> Result<(Var, Vec<Var>)> {
        let (enc, w, b, all) = self.bind(g);
        let mut terms = Vec::with_capacity(samples.len());
        for &(img, label) in samples {
            let x = g.constant(img.clone());
            let f = enc.encode(g, x)?;
            let z = g.matvec(w, f.v)?;
            let logits = g.add(z, b)?;
            terms.push(g.cross_entropy(logits, label)?);
        }
        let total = g.add_all(&terms)?;
        let loss = match reduction {
            LossReduction::Sum => total,
            LossReduction::Mean => g.scale(total, 1.0 / samples.len() as f64)?,
        };
        Ok((loss, all))
    }
}

impl Parameterized for Stage1Model {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = prefixed("encoder", self.encoder.named_params());
        out.push(("head.w".into(), &self.head_w));
        out.push(("head.b".into(), &self.head_b));
        out
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = prefixed_mut("encoder", self.encoder.named_params_mut());
        out.push(("head.w".into(), &mut self.head_w));
        out.push(("head.b".into(), &mut self.head_b));
        out
    }
}

fn sum_to_mean(loss: f64, n: usize, reduction: LossReduction) -> f64 {
    match reduction {
        LossReduction::Sum => loss,
        LossReduction::Mean => loss * n as f64,
    }
}

/// Runs one SGD step per batch: `loss_fn` builds the batch loss on a fresh graph.
#[allow(clippy::too_many_arguments)]
fn run_epochs<P, F>(
    stage: u8,
    model: &mut P,
    schedule: &StepSchedule,
    sample_count: usize,
    batch: usize,
    seed: u64,
    reduction: LossReduction,
    mut loss_fn: F,
) -> Result<Vec<EpochLog>>
where
    P: Parameterized,
    F: FnMut(&P, &mut Graph, &[usize]) -> Result<(Var, Vec<Var>)>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("stage{stage}-shuffle")));
    let mut order: Vec<usize> = (0..sample_count).collect();
    let mut log = Vec::with_capacity(schedule.epochs);
    model.enable_grads();
    model.zero_grads();
    for epoch in 1..=schedule.epochs {
        let lr = schedule.lr(epoch);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(batch) {
            let mut g = Graph::new();
            let (loss, vars) = loss_fn(model, &mut g, chunk)?;
            total += sum_to_mean(g.value(loss).data()[0], chunk.len(), reduction);
            let grads = g.backward(loss)?;
            model.accumulate(&vars, &grads)?;
            sgd_step(model.params_mut(), lr)?;
        }
        let mean_loss = total / sample_count as f64;
        log::info!("stage {stage} epoch {epoch}: lr {lr} mean loss {mean_loss:.5}");
        log.push(EpochLog {
            stage,
            epoch,
            lr,
            mean_loss,
        });
    }
    for p in model.params_mut() {
        p.set_requires_grad(false);
    }
    Ok(log)
}

/// Stage 1: per-view classification; returns the trained encoder.
pub fn train_stage1(
    cfg: &TrainConfig,
    data: &[LabeledViews],
    model: Stage1Model,
) -> Result<(CnnEncoderParams, Vec<EpochLog>)> {
    cfg.validate()?;
    let samples: Vec<(&Tensor, usize)> = data
        .iter()
        .flat_map(|s| s.views.iter().map(move |v| (v, s.class_id)))
        .collect();
    if samples.is_empty() {
        return Err(Error::Argument("stage 1: empty training split".into()));
    }
    let mut model = model;
    let log = run_epochs(
        1,
        &mut model,
        &cfg.stage1,
        samples.len(),
        cfg.batch1,
        cfg.seed,
        cfg.reduction,
        |m, g, idx| {
            let batch: Vec<(&Tensor, usize)> = idx.iter().map(|&i| samples[i]).collect();
            m.batch_loss(g, &batch, cfg.reduction)
        },
    )?;
    Ok((model.encoder, log))
}

/// Cross-entropy of a batch of view sequences through the full network.
pub fn stage2_batch_loss(
    params: &PremaParams,
    g: &mut Graph,
    batch: &[&LabeledViews],
    reduction: LossReduction,
) -> Result<(Var, Vec<Var>)> {
    let p = params.bind(g);
    let mut terms = Vec::with_capacity(batch.len());
    for s in batch {
        let imgs: Vec<Var> = s.views.iter().map(|v| g.constant(v.clone())).collect();
        let (_, logits, _) = p.forward(g, &imgs)?;
        terms.push(g.cross_entropy(logits, s.class_id)?);
    }
    let total = g.add_all(&terms)?;
    let loss = match reduction {
        LossReduction::Sum => total,
        LossReduction::Mean => g.scale(total, 1.0 / batch.len() as f64)?,
    };
    Ok((loss, p.all))
}

/// Stage 2: trains the full network end to end.
pub fn train_stage2(
    cfg: &TrainConfig,
    data: &[LabeledViews],
    params: PremaParams,
) -> Result<(PremaParams, Vec<EpochLog>)> {
    cfg.validate()?;
    params.validate()?;
    if data.is_empty() {
        return Err(Error::Argument("stage 2: empty training split".into()));
    }
    if let Some(s) = data.iter().find(|s| s.class_id >= params.classes()) {
        return Err(Error::Config(format!(
            "{} has class {} but the classifier has {} outputs",
            s.shape_id,
            s.class_id,
            params.classes()
        )));
    }
    let mut params = params;
    let log = run_epochs(
        2,
        &mut params,
        &cfg.stage2,
        data.len(),
        cfg.batch2,
        cfg.seed,
        cfg.reduction,
        |p, g, idx| {
            let batch: Vec<&LabeledViews> = idx.iter().map(|&i| &data[i]).collect();
            stage2_batch_loss(p, g, &batch, cfg.reduction)
        },
    )?;
    Ok((params, log))
}

/// Fresh stage-1 encoder for `model` under `seed`.
pub fn init_encoder(model: &ModelConfig, seed: u64) -> Result<CnnEncoderParams> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "encoder-init"));
    CnnEncoderParams::init(&model.encoder, &mut rng)
}

/// Aggregation network on top of a trained encoder, seeded.
pub fn init_prema(model: &ModelConfig, encoder: CnnEncoderParams, seed: u64) -> Result<PremaParams> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("prema-init/{}", model.variant)));
    PremaParams::init(model, encoder, &mut rng)
}

/// Both stages in sequence; returns the stage-1 encoder, the final model and the log.
pub fn train_two_stage(
    cfg: &TrainConfig,
    model: &ModelConfig,
    data: &[LabeledViews],
) -> Result<(CnnEncoderParams, PremaParams, Vec<EpochLog>)> {
    let stage1 = Stage1Model::init(init_encoder(model, cfg.seed)?, model.classes, cfg.seed);
    let (encoder, mut log) = train_stage1(cfg, data, stage1)?;
    let prema = init_prema(model, encoder.clone(), cfg.seed)?;
    let (trained, log2) = train_stage2(cfg, data, prema)?;
    log.extend(log2);
    Ok((encoder, trained, log))
}

/// Per-shape inference output on one split.
#[derive(Clone, Debug)]
pub struct SplitEmbedding {
    pub items: Vec<Embedded>,
    pub predictions: Vec<usize>,
    /// Per shape, per view; empty for variants without attention.
    pub confidences: Vec<Vec<ConfidenceMap>>,
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &x)| if x > bv { (i, x) } else { (bi, bv) })
        .0
}

pub fn embed_split(
    params: &PremaParams,
    manifest: &DatasetManifest,
    split: Split,
    noise: &NoiseConfig,
) -> Result<SplitEmbedding> {
    let mut out = SplitEmbedding {
        items: Vec::new(),
        predictions: Vec::new(),
        confidences: Vec::new(),
    };
    for r in manifest.split(split) {
        let views = noisy_views(manifest, r, noise)?;
        let e = embed(params, &r.shape_id, &views)?;
        out.predictions.push(argmax(e.logits.data()));
        out.confidences
            .push(e.traces.into_iter().filter_map(|t| t.conf).collect());
        out.items.push(Embedded {
            shape_id: r.shape_id.clone(),
            class_id: r.class_id,
            descriptor: e.descriptor.d,
        });
    }
    if out.items.is_empty() {
        return Err(Error::Argument(format!("split {split:?} is empty")));
    }
    Ok(out)
}

/// Retrieval metrics and accuracies of `params` on `split` under `noise`.
pub fn evaluate(
    params: &PremaParams,
    manifest: &DatasetManifest,
    split: Split,
    noise: &NoiseConfig,
    k: usize,
) -> Result<(MetricsReport, SplitEmbedding)> {
    let emb = embed_split(params, manifest, split, noise)?;
    let results = rank_all(&emb.items)?;
    let pairs: Vec<(usize, usize)> = emb
        .items
        .iter()
        .zip(&emb.predictions)
        .map(|(e, &p)| (e.class_id, p))
        .collect();
    let acc = accuracy(&pairs, manifest.meta.class_count)?;
    let report = MetricsReport::from_results(&results, k, acc)?;
    Ok((report, emb))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeLocalization {
    pub shape_id: String,
    pub views: usize,
    pub score: f64,
    pub baseline: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalizationReport {
    pub mean_score: f64,
    pub mean_baseline: f64,
    pub shapes: Vec<ShapeLocalization>,
}

impl LocalizationReport {
    /// Fraction of shapes whose score is at least `ratio` times their baseline.
    pub fn fraction_above(&self, ratio: f64) -> f64 {
        let ok = self.shapes.iter().filter(|s| s.score >= ratio * s.baseline).count();
        ok as f64 / self.shapes.len().max(1) as f64
    }
}

/// In-bbox confidence mass of the attention maps on clean views.
pub fn attention_localization(
    params: &PremaParams,
    manifest: &DatasetManifest,
    split: Split,
) -> Result<LocalizationReport> {
    if params.rau.is_none() {
        return Err(Error::Config(format!("{} has no attention unit", params.variant)));
    }
    let (_, h_m, w_m) = params.encoder.config.middle_dims();
    let emb = embed_split(params, manifest, split, &NoiseConfig::default())?;
    let mut shapes = Vec::new();
    for (r, confs) in manifest.split(split).into_iter().zip(&emb.confidences) {
        let (mut score, mut base, mut n) = (0.0, 0.0, 0usize);
        for (c, bbox) in confs.iter().zip(&r.bboxes) {
            let Some(bbox) = bbox else { continue };
            let (m, b) = localization_mass(c.conf.data(), (h_m, w_m), *bbox, manifest.meta.image_size)?;
            score += m;
            base += b;
            n += 1;
        }
        if n > 0 {
            shapes.push(ShapeLocalization {
                shape_id: r.shape_id.clone(),
                views: n,
                score: score / n as f64,
                baseline: base / n as f64,
            });
        }
    }
    let count = shapes.len().max(1) as f64;
    Ok(LocalizationReport {
        mean_score: shapes.iter().map(|s| s.score).sum::<f64>() / count,
        mean_baseline: shapes.iter().map(|s| s.baseline).sum::<f64>() / count,
        shapes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aggregator::AggregationVariant;
    use crate::encoder::EncoderConfig;

    fn tiny_model(variant: AggregationVariant, classes: usize) -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                image_size: 8,
                channels: vec![2, 3],
                kernel: 3,
                stride: 2,
                pad: 1,
                middle_tap: 0,
                feature_dim: 4,
            },
            d_h1: 3,
            d_k: 2,
            d_h2: 3,
            classes,
            variant,
        }
    }

    fn toy_data(n: usize, views: usize, seed: u64) -> Vec<LabeledViews> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let class = i % 2;
                LabeledViews {
                    shape_id: format!("s{i}"),
                    class_id: class,
                    views: (0..views)
                        .map(|_| {
                            let data = (0..64)
                                .map(|p| {
                                    let on = if class == 0 { p % 8 < 4 } else { p / 8 < 4 };
                                    if on { 0.8 + rng.gen_range(0.0..0.2) } else { 0.0 }
                                })
                                .collect();
                            Tensor::new(&[1, 8, 8], data).unwrap()
                        })
                        .collect(),
                }
            })
            .collect()
    }

    fn cfg(e1: usize, e2: usize) -> TrainConfig {
        TrainConfig {
            stage1: StepSchedule {
                epochs: e1,
                initial_lr: 0.01,
                anneal_epoch: 1,
            },
            stage2: StepSchedule {
                epochs: e2,
                initial_lr: 0.001,
                anneal_epoch: 1,
            },
            batch1: 1,
            batch2: 4,
            seed: 3,
            reduction: LossReduction::Sum,
        }
    }

    #[test]
    fn one_epoch_one_shape_is_twelve_steps() {
        let data = toy_data(1, 12, 0);
        let m = tiny_model(AggregationVariant::Prema, 2);
        let enc = init_encoder(&m, 0).unwrap();
        let mut steps = 0;
        let mut model = Stage1Model::init(enc, 2, 0);
        let schedule = StepSchedule {
            epochs: 1,
            initial_lr: 0.01,
            anneal_epoch: 1,
        };
        let samples: Vec<(&Tensor, usize)> = data[0].views.iter().map(|v| (v, 0)).collect();
        run_epochs(1, &mut model, &schedule, 12, 1, 0, LossReduction::Sum, |m, g, idx| {
            steps += 1;
            m.batch_loss(g, &[samples[idx[0]]], LossReduction::Sum)
        })
        .unwrap();
        assert_eq!(steps, 12);
    }

    #[test]
    fn initial_loss_near_ln_classes() {
        let mut m = tiny_model(AggregationVariant::Prema, 8);
        m.encoder.feature_dim = 4;
        let model = Stage1Model::init(init_encoder(&m, 1).unwrap(), 8, 1);
        let data = toy_data(4, 12, 1);
        let samples: Vec<(&Tensor, usize)> = data.iter().flat_map(|s| s.views.iter().map(|v| (v, s.class_id))).collect();
        let mut g = Graph::inference();
        let (loss, _) = model.batch_loss(&mut g, &samples, LossReduction::Mean).unwrap();
        let l = g.value(loss).data()[0];
        assert!((l - 8f64.ln()).abs() < 0.5, "{l}");
    }

    #[test]
    fn empty_split_rejected() {
        let m = tiny_model(AggregationVariant::Prema, 2);
        let model = Stage1Model::init(init_encoder(&m, 0).unwrap(), 2, 0);
        assert!(matches!(train_stage1(&cfg(2, 2), &[], model), Err(Error::Argument(_))));
    }

    #[test]
    fn zero_epoch_stage2_keeps_parameters() {
        let m = tiny_model(AggregationVariant::Prema, 2);
        let data = toy_data(4, 3, 2);
        let (enc, log1) = train_stage1(&cfg(2, 0), &data, Stage1Model::init(init_encoder(&m, 0).unwrap(), 2, 0)).unwrap();
        assert_eq!(log1.len(), 2);
        let init = init_prema(&m, enc.clone(), 0).unwrap();
        let (trained, log2) = train_stage2(&cfg(2, 0), &data, init.clone()).unwrap();
        assert!(log2.is_empty());
        for ((_, a), (_, b)) in trained.named_params().iter().zip(init.named_params()) {
            assert!(a.bit_eq(b));
        }
        assert_eq!(trained.encoder, enc);
    }

    #[test]
    fn stage2_rejects_class_mismatch() {
        let m = tiny_model(AggregationVariant::DoubleLstms, 2);
        let mut data = toy_data(2, 3, 4);
        data[0].class_id = 5;
        let p = init_prema(&m, init_encoder(&m, 0).unwrap(), 0).unwrap();
        assert!(matches!(train_stage2(&cfg(0, 2), &data, p), Err(Error::Config(_))));
    }

    #[test]
    fn training_is_deterministic() {
        let m = tiny_model(AggregationVariant::Prema, 2);
        let data = toy_data(4, 3, 5);
        let a = train_two_stage(&cfg(2, 2), &m, &data).unwrap();
        let b = train_two_stage(&cfg(2, 2), &m, &data).unwrap();
        assert_eq!(a.1, b.1);
        assert_eq!(a.2, b.2);
        assert_ne!(a.1.encoder, a.0, "stage 2 moves the encoder");
    }
}
