//! Mini-batch contrastive training of the multi-modal encoder and the loss
//! weights, evaluation, and ablation grids.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Split, Triplet};
use crate::embedding::{EmbeddingSequence, TokenSequence, VideoId};
use crate::encoders::{encode_text, joint_backward, joint_forward, EncoderParams, InputMask, JointInputs, ParamGrads};
use crate::error::{Error, Result};
use crate::loss::{loss_gradients, LossConfig, LossTerms, LossWeights};
use crate::retrieval::{build_index, recall_for_targets, subset_recall_for_targets, top_k, Index, MetricsReport};
use crate::targets::{build_target_databases, TargetDatabases, TargetKind};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Optimizer {
    Sgd,
    Momentum { beta: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub fn momentum() -> Self {
        Optimizer::Momentum { beta: 0.9 }
    }

    pub fn adam() -> Self {
        Optimizer::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl FromStr for Optimizer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(Optimizer::Sgd),
            "momentum" => Ok(Optimizer::momentum()),
            "adam" => Ok(Optimizer::adam()),
            _ => Err(Error::InvalidConfig(format!("unknown optimizer {s:?}"))),
        }
    }
}

impl fmt::Display for Optimizer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Optimizer::Sgd => "sgd",
            Optimizer::Momentum { .. } => "momentum",
            Optimizer::Adam { .. } => "adam",
        })
    }
}

/// When the multi-modal target table is recomputed from the current
/// encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetRefresh {
    /// Built once from the initial parameters.
    Snapshot,
    PerEpoch,
    /// The batch's targets are recomputed before every step.
    PerStep,
}

impl FromStr for TargetRefresh {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "snapshot" => Ok(TargetRefresh::Snapshot),
            "per-epoch" => Ok(TargetRefresh::PerEpoch),
            "per-step" => Ok(TargetRefresh::PerStep),
            _ => Err(Error::InvalidConfig(format!("unknown refresh policy {s:?}"))),
        }
    }
}

/// Learning-rate schedule over the whole run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    Constant,
    /// Half-cosine decay from the initial rate to zero.
    Cosine,
}

impl Schedule {
    /// Rate for 0-based `step` of `total`.
    pub fn rate(self, initial: f64, step: usize, total: usize) -> f64 {
        match self {
            Schedule::Constant => initial,
            Schedule::Cosine => {
                let t = step as f64 / total.max(1) as f64;
                initial * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

impl FromStr for Schedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(Schedule::Constant),
            "cosine" => Ok(Schedule::Cosine),
            _ => Err(Error::InvalidConfig(format!("unknown schedule {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub loss_terms: LossTerms,
    pub inputs: InputMask,
    pub loss: LossConfig,
    pub optimizer: Optimizer,
    pub schedule: Schedule,
    pub refresh: TargetRefresh,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 32,
            learning_rate: 1e-3,
            seed: 0,
            loss_terms: LossTerms::ALL,
            inputs: InputMask::ALL,
            loss: LossConfig::default(),
            optimizer: Optimizer::Sgd,
            schedule: Schedule::Constant,
            refresh: TargetRefresh::Snapshot,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig("learning rate must be finite and non-negative".into()));
        }
        if self.loss_terms.is_empty() {
            return Err(Error::NoLossTerms);
        }
        if self.inputs.is_empty() {
            return Err(Error::NoInputs);
        }
        self.loss.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub val_r1: Option<f64>,
    pub lambda: f64,
    pub mu: f64,
    pub delta: f64,
}

impl EpochRecord {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("history serializes")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub params: EncoderParams,
    /// Epoch 0 holds the loss and validation recall before any update.
    pub history: Vec<EpochRecord>,
}

/// Tokenized, frozen-encoded inputs of one triplet.
pub struct Prepared<'a> {
    pub query_id: VideoId,
    pub target_id: VideoId,
    visual: &'a EmbeddingSequence,
    description: TokenSequence,
    description_context: EmbeddingSequence,
    change: TokenSequence,
}

impl Prepared<'_> {
    fn inputs(&self) -> JointInputs<'_> {
        JointInputs {
            visual: self.visual,
            description: &self.description,
            description_context: &self.description_context,
            change: &self.change,
        }
    }
}

pub fn prepare<'a>(params: &EncoderParams, dataset: &'a Dataset, triplets: &[Triplet]) -> Result<Vec<Prepared<'a>>> {
    let tok = params.tokenizer();
    triplets
        .iter()
        .map(|t| {
            let description = tok.tokenize(&t.description)?;
            let description_context = encode_text(params, &description)?.sequence;
            Ok(Prepared {
                query_id: t.query_id,
                target_id: t.target_id,
                visual: dataset.provider.get(t.query_id)?,
                description,
                description_context,
                change: tok.tokenize(&t.change_text)?,
            })
        })
        .collect()
}

struct OptimizerState {
    kind: Optimizer,
    first: Vec<f64>,
    second: Vec<f64>,
    step: i32,
}

impl OptimizerState {
    fn new(kind: Optimizer, len: usize) -> Self {
        let (a, b) = match kind {
            Optimizer::Sgd => (0, 0),
            Optimizer::Momentum { .. } => (len, 0),
            Optimizer::Adam { .. } => (len, len),
        };
        OptimizerState { kind, first: vec![0.0; a], second: vec![0.0; b], step: 0 }
    }

    fn apply(&mut self, params: &mut EncoderParams, grads: &ParamGrads, lr: f64) {
        self.step += 1;
        let t = self.step;
        let (first, second) = (&mut self.first, &mut self.second);
        match self.kind {
            Optimizer::Sgd => params.update_with(grads, |_, p, g| *p -= lr * g),
            Optimizer::Momentum { beta } => params.update_with(grads, |i, p, g| {
                first[i] = beta * first[i] + g;
                *p -= lr * first[i];
            }),
            Optimizer::Adam { beta1, beta2, eps } => {
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                params.update_with(grads, |i, p, g| {
                    first[i] = beta1 * first[i] + (1.0 - beta1) * g;
                    second[i] = beta2 * second[i] + (1.0 - beta2) * g * g;
                    *p -= lr * (first[i] / c1) / ((second[i] / c2).sqrt() + eps);
                })
            }
        }
    }
}

/// Loss and gradients of one batch.
pub fn batch_gradients(
    params: &EncoderParams,
    batch: &[&Prepared<'_>],
    dbs: &TargetDatabases,
    config: &TrainConfig,
    with_grads: bool,
) -> Result<(f64, Option<ParamGrads>)> {
    let m = params.config.dim;
    let mut joint = Array2::zeros((batch.len(), m));
    let mut forwards = Vec::with_capacity(batch.len());
    for (row, p) in batch.iter().enumerate() {
        let fwd = joint_forward(params, &p.inputs(), config.inputs)?;
        joint.row_mut(row).assign(fwd.output().values());
        forwards.push(fwd);
    }
    let ids: Vec<VideoId> = batch.iter().map(|p| p.target_id).collect();
    let targets = [
        dbs.gather(TargetKind::Visual, &ids)?,
        dbs.gather(TargetKind::Multimodal, &ids)?,
        dbs.gather(TargetKind::Text, &ids)?,
    ];
    let lg = loss_gradients(
        &joint,
        [&targets[0], &targets[1], &targets[2]],
        &params.raw_loss_weights,
        config.loss_terms,
        &config.loss,
    )?;
    if !with_grads {
        return Ok((lg.loss.value, None));
    }
    let mut grads = ParamGrads::zeros_for(params);
    grads.raw_loss_weights = lg.raw_weights;
    for (row, (p, fwd)) in batch.iter().zip(&forwards).enumerate() {
        if fwd.is_trainable() {
            joint_backward(params, &p.inputs(), fwd, &lg.joint.row(row).to_owned(), &mut grads.fusion);
        }
    }
    Ok((lg.loss.value, Some(grads)))
}

/// Visual gallery over every video in the dataset.
pub fn visual_index(dataset: &Dataset) -> Result<Index> {
    build_index(
        dataset
            .provider
            .ids()
            .map(|id| Ok((id, dataset.provider.pooled(id)?)))
            .collect::<Result<Vec<_>>>()?,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct EvalOptions {
    /// Drop each query's own video from its ranking.
    pub exclude_query: bool,
}

/// Recall@K of `triplets` against the visual gallery, plus subset recall
/// at 1, 2, 3 when every triplet carries a subset.
pub fn evaluate_prepared(
    params: &EncoderParams,
    index: &Index,
    prepared: &[Prepared<'_>],
    subsets: Option<Vec<std::collections::BTreeSet<VideoId>>>,
    mode: InputMask,
    ks: &[usize],
    options: EvalOptions,
) -> Result<MetricsReport> {
    let depth = if subsets.is_some() {
        index.len()
    } else {
        ks.iter().copied().max().unwrap_or(1).min(index.len())
    };
    let mut results = Vec::with_capacity(prepared.len());
    for p in prepared {
        let fwd = joint_forward(params, &p.inputs(), mode)?;
        let exclude = options.exclude_query.then_some(p.query_id);
        results.push(top_k(index, p.query_id, &fwd.output(), depth, exclude)?);
    }
    let targets: Vec<VideoId> = prepared.iter().map(|p| p.target_id).collect();
    let mut report = recall_for_targets(&results, &targets, ks);
    if let Some(subs) = subsets {
        report.subset_recall = Some(subset_recall_for_targets(&results, &targets, &subs, &[1, 2, 3])?);
    }
    Ok(report)
}

pub fn evaluate(
    params: &EncoderParams,
    dataset: &Dataset,
    triplets: &[Triplet],
    mode: InputMask,
    ks: &[usize],
    options: EvalOptions,
) -> Result<MetricsReport> {
    let index = visual_index(dataset)?;
    let prepared = prepare(params, dataset, triplets)?;
    let subsets = triplets
        .iter()
        .map(|t| t.subset.as_ref().map(|s| s.iter().copied().collect()))
        .collect::<Option<Vec<_>>>();
    evaluate_prepared(params, &index, &prepared, subsets, mode, ks, options)
}

fn record(epoch: usize, mean_loss: f64, val_r1: Option<f64>, params: &EncoderParams) -> EpochRecord {
    let w = LossWeights::from_raw(&params.raw_loss_weights);
    EpochRecord { epoch, mean_loss, val_r1, lambda: w.lambda, mu: w.mu, delta: w.delta }
}

pub fn train(config: &TrainConfig, dataset: &Dataset, params_init: &EncoderParams) -> Result<TrainOutcome> {
    train_with(config, dataset, params_init, |_| {})
}

/// [`train`] that reports each epoch record as soon as it is available.
pub fn train_with(
    config: &TrainConfig,
    dataset: &Dataset,
    params_init: &EncoderParams,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    config.validate()?;
    let train_set = dataset.training_triplets();
    if train_set.is_empty() {
        return Err(Error::InvalidConfig("no usable training triplets".into()));
    }
    let mut params = params_init.clone();
    let mut dbs = build_target_databases(
        &dataset.provider,
        &dataset.descriptions,
        params_init,
        dataset.descriptions.keys().copied(),
    )?;
    let prepared = prepare(&params, dataset, &train_set)?;
    let val = prepare(&params, dataset, &dataset.split(Split::Val))?;
    let index = visual_index(dataset)?;
    let val_r1 = |p: &EncoderParams| -> Result<Option<f64>> {
        if val.is_empty() {
            return Ok(None);
        }
        let r = evaluate_prepared(p, &index, &val, None, config.inputs, &[1], EvalOptions::default())?;
        Ok(r.at(1))
    };

    let n = prepared.len() as f64;
    let mut initial = 0.0;
    for chunk in prepared.chunks(config.batch_size) {
        let batch: Vec<&Prepared<'_>> = chunk.iter().collect();
        initial += batch_gradients(&params, &batch, &dbs, config, false)?.0;
    }
    let mut history = vec![record(0, initial / n, val_r1(&params)?, &params)];
    on_epoch(&history[0]);

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = OptimizerState::new(config.optimizer, params.trainable_len());
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    let mut step = 0;
    let total_steps = config.epochs * prepared.len().div_ceil(config.batch_size);
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            step += 1;
            let batch: Vec<&Prepared<'_>> = chunk.iter().map(|&i| &prepared[i]).collect();
            if config.refresh == TargetRefresh::PerStep {
                let ids: Vec<VideoId> = batch.iter().map(|p| p.target_id).collect();
                dbs.refresh_multimodal_ids(&dataset.provider, &dataset.descriptions, &params, &ids)?;
            }
            let diverged = |params: &EncoderParams| Error::DivergedTraining {
                epoch,
                step,
                last_finite: Box::new(params.clone()),
            };
            let (loss, grads) = match batch_gradients(&params, &batch, &dbs, config, true) {
                Ok(r) => r,
                Err(Error::NonFiniteInput(_)) | Err(Error::DegenerateVector) => return Err(diverged(&params)),
                Err(e) => return Err(e),
            };
            if !loss.is_finite() {
                return Err(diverged(&params));
            }
            let before = params.clone();
            let lr = config.schedule.rate(config.learning_rate, step - 1, total_steps);
            opt.apply(&mut params, &grads.expect("gradients requested"), lr);
            if !params.all_finite() {
                return Err(diverged(&before));
            }
            total += loss;
        }
        if config.refresh == TargetRefresh::PerEpoch {
            dbs.refresh_multimodal(&dataset.provider, &dataset.descriptions, &params)?;
        }
        let rec = record(epoch, total / n, val_r1(&params)?, &params);
        on_epoch(&rec);
        history.push(rec);
    }
    Ok(TrainOutcome { params, history })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub label: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub report: Option<MetricsReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl AblationRow {
    fn from_result(label: String, r: Result<MetricsReport>) -> Self {
        match r {
            Ok(report) => AblationRow { label, report: Some(report), error: None },
            Err(e) => AblationRow { label, report: None, error: Some(e.to_string()) },
        }
    }
}

/// Re-evaluates one frozen checkpoint under each input mask.
pub fn ablate_inputs(
    params: &EncoderParams,
    dataset: &Dataset,
    masks: &[InputMask],
    ks: &[usize],
    options: EvalOptions,
) -> Result<Vec<AblationRow>> {
    if masks.is_empty() {
        return Err(Error::InvalidConfig("empty ablation grid".into()));
    }
    let test = dataset.split(Split::Test);
    let index = visual_index(dataset)?;
    let prepared = prepare(params, dataset, &test)?;
    Ok(masks
        .iter()
        .map(|&mask| {
            let r = evaluate_prepared(params, &index, &prepared, None, mask, ks, options);
            AblationRow::from_result(mask.to_string(), r)
        })
        .collect())
}

/// Trains one model per loss-term set and evaluates each on the test split.
/// A failing cell is reported and the grid continues.
pub fn ablate_losses(
    config: &TrainConfig,
    dataset: &Dataset,
    params_init: &EncoderParams,
    sets: &[LossTerms],
    ks: &[usize],
    options: EvalOptions,
) -> Result<Vec<AblationRow>> {
    if sets.is_empty() {
        return Err(Error::InvalidConfig("empty ablation grid".into()));
    }
    let test = dataset.split(Split::Test);
    Ok(sets
        .iter()
        .map(|&terms| {
            let cell = TrainConfig { loss_terms: terms, ..*config };
            let r = train(&cell, dataset, params_init)
                .and_then(|out| evaluate(&out.params, dataset, &test, cell.inputs, ks, options));
            AblationRow::from_result(terms.to_string(), r)
        })
        .collect())
}

/// Aligned text grid: one row per cell, one column per cutoff.
pub fn ablation_table(rows: &[AblationRow], ks: &[usize]) -> String {
    let width = rows.iter().map(|r| r.label.len()).max().unwrap_or(0).max(6);
    let mut out = format!("{:<width$}", "config");
    for k in ks {
        out.push_str(&format!("{:>8}", format!("R@{k}")));
    }
    out.push('\n');
    for r in rows {
        out.push_str(&format!("{:<width$}", r.label));
        match (&r.report, &r.error) {
            (Some(rep), _) => {
                for k in ks {
                    out.push_str(&format!("{:>8.2}", rep.at(*k).unwrap_or(f64::NAN)));
                }
            }
            (None, Some(e)) => out.push_str(&format!("  error: {e}")),
            _ => {}
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::EncoderConfig;
    use crate::synthetic::{generate_synthetic, SyntheticSpec};

    fn data(n: usize, seed: u64) -> Dataset {
        generate_synthetic(&SyntheticSpec { n, seed, ..SyntheticSpec::default() })
            .unwrap()
            .workdir()
            .dataset()
            .unwrap()
    }

    fn init() -> EncoderParams {
        EncoderParams::init(EncoderConfig::default(), 1).unwrap()
    }

    #[test]
    fn zero_learning_rate_keeps_params() {
        let ds = data(20, 1);
        let p = init();
        let cfg = TrainConfig { epochs: 2, batch_size: 4, learning_rate: 0.0, ..TrainConfig::default() };
        let out = train(&cfg, &ds, &p).unwrap();
        assert_eq!(out.params, p);
        assert_eq!(out.history.len(), 3);
    }

    #[test]
    fn one_epoch_lowers_loss() {
        let ds = data(64, 2);
        let cfg = TrainConfig { epochs: 1, ..TrainConfig::default() };
        let out = train(&cfg, &ds, &init()).unwrap();
        assert!(out.history[1].mean_loss < out.history[0].mean_loss, "{:?}", out.history);
    }

    #[test]
    fn training_is_deterministic_and_keeps_frozen_parts() {
        let ds = data(24, 3);
        let p = init();
        let cfg = TrainConfig { epochs: 2, batch_size: 5, ..TrainConfig::default() };
        let a = train(&cfg, &ds, &p).unwrap();
        let b = train(&cfg, &ds, &p).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.params.frozen_checksum(), p.frozen_checksum());
        assert_ne!(a.params.fusion, p.fusion);
        assert!(a.history.iter().all(|r| r.mean_loss.is_finite()));
    }

    #[test]
    fn small_step_does_not_raise_batch_loss() {
        let ds = data(16, 4);
        let p = init();
        let cfg = TrainConfig::default();
        let train_set = ds.training_triplets();
        let dbs = build_target_databases(&ds.provider, &ds.descriptions, &p, ds.descriptions.keys().copied()).unwrap();
        let prepared = prepare(&p, &ds, &train_set).unwrap();
        for size in [1, 4] {
            let batch: Vec<&Prepared<'_>> = prepared.iter().take(size).collect();
            let (before, grads) = batch_gradients(&p, &batch, &dbs, &cfg, true).unwrap();
            let mut q = p.clone();
            q.update_with(&grads.unwrap(), |_, w, g| *w -= 1e-6 * g);
            let (after, _) = batch_gradients(&q, &batch, &dbs, &cfg, false).unwrap();
            assert!(after <= before, "batch {size}: {after} > {before}");
        }
    }

    #[test]
    fn optimizers_all_reduce_loss() {
        let ds = data(32, 5);
        for (opt, lr) in [(Optimizer::momentum(), 1e-3), (Optimizer::adam(), 1e-3)] {
            let cfg = TrainConfig { epochs: 1, batch_size: 8, learning_rate: lr, optimizer: opt, ..TrainConfig::default() };
            let out = train(&cfg, &ds, &init()).unwrap();
            assert!(out.history[1].mean_loss < out.history[0].mean_loss, "{opt}");
        }
    }

    #[test]
    fn divergence_returns_last_finite_params() {
        let ds = data(16, 6);
        let cfg = TrainConfig { epochs: 3, batch_size: 4, learning_rate: 1e300, ..TrainConfig::default() };
        match train(&cfg, &ds, &init()) {
            Err(Error::DivergedTraining { last_finite, .. }) => assert!(last_finite.all_finite()),
            other => panic!("expected divergence, got {:?}", other.map(|o| o.history)),
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        let ds = data(8, 7);
        let p = init();
        for cfg in [
            TrainConfig { batch_size: 0, ..TrainConfig::default() },
            TrainConfig { learning_rate: -1.0, ..TrainConfig::default() },
            TrainConfig { loss_terms: LossTerms { visual: false, multimodal: false, text: false }, ..TrainConfig::default() },
            TrainConfig { inputs: InputMask { video: false, description: false, change: false }, ..TrainConfig::default() },
        ] {
            assert!(train(&cfg, &ds, &p).is_err());
        }
    }

    #[test]
    fn single_cell_grid_matches_direct_run() {
        let ds = data(20, 8);
        let p = init();
        let cfg = TrainConfig { epochs: 1, batch_size: 4, ..TrainConfig::default() };
        let ks = [1, 5, 10, 50];
        let rows = ablate_losses(&cfg, &ds, &p, &[LossTerms::ALL], &ks, EvalOptions::default()).unwrap();
        let out = train(&cfg, &ds, &p).unwrap();
        let direct = evaluate(&out.params, &ds, &ds.split(Split::Test), InputMask::ALL, &ks, EvalOptions::default()).unwrap();
        assert_eq!(rows[0].report.as_ref(), Some(&direct));

        let inputs = ablate_inputs(&out.params, &ds, &[InputMask::ALL], &ks, EvalOptions::default()).unwrap();
        assert_eq!(inputs[0].report.as_ref(), Some(&direct));
        assert!(ablate_inputs(&out.params, &ds, &[], &ks, EvalOptions::default()).is_err());
    }

    #[test]
    fn video_only_retrieves_the_query_itself() {
        let ds = data(20, 9);
        let test = ds.split(Split::Test);
        let p = init();
        let r = evaluate(&p, &ds, &test, InputMask::VIDEO, &[1], EvalOptions::default()).unwrap();
        assert_eq!(r.at(1), Some(0.0));
        let excluded = evaluate(&p, &ds, &test, InputMask::VIDEO, &[1], EvalOptions { exclude_query: true }).unwrap();
        assert!(excluded.at(1).unwrap() >= 0.0);
    }

    #[test]
    fn per_epoch_refresh_changes_multimodal_targets() {
        let ds = data(16, 10);
        let p = init();
        let cfg = TrainConfig { epochs: 2, batch_size: 4, refresh: TargetRefresh::PerEpoch, ..TrainConfig::default() };
        let snap = train(&TrainConfig { refresh: TargetRefresh::Snapshot, ..cfg }, &ds, &p).unwrap();
        let fresh = train(&cfg, &ds, &p).unwrap();
        // epoch 1 is identical; epoch 2 sees refreshed targets
        assert_eq!(snap.history[1], fresh.history[1]);
        assert_ne!(snap.history[2].mean_loss, fresh.history[2].mean_loss);
    }
}
