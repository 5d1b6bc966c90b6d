//! Training loops for the LLP, MIL and PU settings, validation, early
//! stopping and evaluation.
//!
//! LLP and MIL take one optimizer step per group of `bags_per_step` bags. PU
//! takes one step per (positive minibatch, unlabeled bag) pair; unlabeled
//! bags are re-formed every epoch by shuffling and cutting into groups of
//! `k_u`, dropping the short remainder.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::countdp::{interval_log_prob, log1mexp, InstanceScores};
use crate::datasets::{stratified_holdout, Bag, Dataset, PuDataset, WeakLabel};
use crate::error::{Error, Result};
use crate::losses::{
    llp_loss, loss_cap, mil_loss, positive_ce_loss, pu_expect_loss, pu_kl_loss, LossValue,
};
use crate::metrics::{auc, classification_metrics};
use crate::model::{Gradients, Mlp, MlpSpec, OptimConfig, OptimState, OptimizerKind};
use crate::par;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Setting {
    Llp,
    Mil,
    PuKl,
    PuExpect,
}

impl Setting {
    pub fn is_pu(self) -> bool {
        matches!(self, Setting::PuKl | Setting::PuExpect)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EarlyStop {
    None,
    ValLoss,
    PuPriorProximity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub setting: Setting,
    pub epochs: usize,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub l1: f64,
    /// Leading epochs that train normally but are never selected as best.
    pub warm_epochs: usize,
    pub validation_fraction: f64,
    pub early_stop: EarlyStop,
    pub hidden: Vec<usize>,
    /// Unlabeled bag size for PU training.
    pub k_u: usize,
    /// Labeled positives per PU step.
    pub pos_batch_size: usize,
    pub w_pos: f64,
    pub w_unl: f64,
    /// Weight on the loss of MIL bags labeled positive.
    pub mil_positive_weight: f64,
    pub bags_per_step: usize,
    /// Overrides the mixture proportion estimated from the PU split.
    pub beta: Option<f64>,
    pub seed: u64,
}

impl TrainConfig {
    /// Per-setting defaults taken from the reference hyperparameters, with
    /// epoch counts cut to desk scale.
    pub fn new(setting: Setting) -> Self {
        let base = TrainConfig {
            setting,
            epochs: 100,
            optimizer: OptimizerKind::Adam,
            learning_rate: 1e-5,
            weight_decay: 1e-3,
            l1: 1e-3,
            warm_epochs: 0,
            validation_fraction: 0.125,
            early_stop: EarlyStop::ValLoss,
            hidden: vec![2048, 64],
            k_u: 100,
            pos_batch_size: 32,
            w_pos: 1.0,
            w_unl: 1.0,
            mil_positive_weight: 1.0,
            bags_per_step: 1,
            beta: None,
            seed: 0,
        };
        match setting {
            Setting::Llp => base,
            Setting::Mil => TrainConfig {
                epochs: 200,
                learning_rate: 5e-4,
                weight_decay: 1e-4,
                l1: 0.0,
                validation_fraction: 0.0,
                early_stop: EarlyStop::None,
                hidden: vec![64],
                ..base
            },
            Setting::PuKl | Setting::PuExpect => TrainConfig {
                learning_rate: 1e-4,
                weight_decay: 5e-4,
                l1: 0.0,
                validation_fraction: 0.1,
                hidden: vec![300, 300],
                ..base
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::arg(msg));
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return bad("validation_fraction must lie in [0, 1)");
        }
        if self.k_u == 0 || self.pos_batch_size == 0 || self.bags_per_step == 0 {
            return bad("k_u, pos_batch_size and bags_per_step must be positive");
        }
        if !(self.learning_rate >= 0.0 && self.weight_decay >= 0.0 && self.l1 >= 0.0) {
            return bad("learning_rate, weight_decay and l1 must be non-negative");
        }
        if !(self.w_pos >= 0.0 && self.w_unl >= 0.0 && self.mil_positive_weight >= 0.0) {
            return bad("loss weights must be non-negative");
        }
        if self.hidden.contains(&0) {
            return bad("hidden widths must be positive");
        }
        if let Some(b) = self.beta {
            if !(b > 0.0 && b < 1.0) {
                return bad("beta must lie in (0, 1)");
            }
        }
        if self.early_stop != EarlyStop::None && self.validation_fraction == 0.0 {
            return bad("early stopping needs a validation_fraction above 0");
        }
        if self.early_stop == EarlyStop::PuPriorProximity && !self.setting.is_pu() {
            return bad("pu_prior_proximity early stopping applies to PU settings only");
        }
        Ok(())
    }

    pub fn optim_config(&self) -> OptimConfig {
        let base = match self.optimizer {
            OptimizerKind::Adam => OptimConfig::adam(self.learning_rate),
            OptimizerKind::Sgd => OptimConfig::sgd(self.learning_rate),
        };
        base.with_regularization(self.weight_decay, self.l1)
    }

    fn split_seed(&self) -> u64 {
        self.seed ^ 0x5851_f42d_4c95_7f2d
    }

    fn order_seed(&self) -> u64 {
        self.seed ^ 0x2545_f491_4f6c_dd1d
    }
}

/// Metrics at one level (instances or bags).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelMetrics {
    /// `None` when only one class is present.
    pub auc: Option<f64>,
    pub accuracy: f64,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
}

impl LevelMetrics {
    pub fn from_scores(probs: &[f64], labels: &[bool]) -> Result<Self> {
        let m = classification_metrics(probs, labels, 0.5)?;
        let auc = match auc(probs, labels) {
            Ok(v) => Some(v),
            Err(Error::UndefinedMetric(_)) => None,
            Err(e) => return Err(e),
        };
        Ok(LevelMetrics {
            auc,
            accuracy: m.accuracy,
            f1: m.f1,
            precision: m.precision,
            recall: m.recall,
        })
    }
}

/// Evaluation after one epoch; epoch 0 is the untrained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    /// Mean step loss over the epoch.
    pub train_loss: Option<f64>,
    pub validation_loss: Option<f64>,
    /// PU only: accuracy of `p >= 0.5` against the labeled/unlabeled flags.
    pub validation_provided_accuracy: Option<f64>,
    /// Against true labels of validation instances, when known.
    pub instance: Option<LevelMetrics>,
    /// MIL validation bags.
    pub bag: Option<LevelMetrics>,
    /// Steps whose loss hit the cap this epoch.
    pub capped_losses: usize,
}

impl MetricsRecord {
    fn empty(epoch: usize) -> Self {
        MetricsRecord {
            epoch,
            train_loss: None,
            validation_loss: None,
            validation_provided_accuracy: None,
            instance: None,
            bag: None,
            capped_losses: 0,
        }
    }
}

pub enum TrainData<'a> {
    Bags {
        data: &'a Dataset,
        bags: &'a [Bag],
    },
    Pu {
        data: &'a Dataset,
        split: &'a PuDataset,
    },
}

impl TrainData<'_> {
    fn dataset(&self) -> &Dataset {
        match self {
            TrainData::Bags { data, .. } | TrainData::Pu { data, .. } => data,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters from the selected epoch.
    pub model: Mlp,
    pub best_epoch: usize,
    pub history: Vec<MetricsRecord>,
    /// Mixture proportion used by PU runs.
    pub beta: Option<f64>,
}

/// Picks the best record under `rule`, returning its `epoch`.
///
/// `ValLoss` takes the lowest validation loss. `PuPriorProximity` takes the
/// smallest `|validation_provided_accuracy - expected|`, breaking exact ties
/// by lower validation loss. `None` takes the last record. Earlier records win
/// remaining ties.
pub fn early_stop_select(
    history: &[MetricsRecord],
    rule: EarlyStop,
    expected_accuracy: f64,
) -> Result<usize> {
    let last = history
        .last()
        .ok_or_else(|| Error::Empty("early stopping needs at least one record".into()))?;
    let val_loss = |r: &MetricsRecord| {
        r.validation_loss
            .ok_or_else(|| Error::arg(format!("epoch {} has no validation loss", r.epoch)))
    };
    match rule {
        EarlyStop::None => Ok(last.epoch),
        EarlyStop::ValLoss => {
            let mut best = (&history[0], val_loss(&history[0])?);
            for r in &history[1..] {
                let l = val_loss(r)?;
                if l < best.1 {
                    best = (r, l);
                }
            }
            Ok(best.0.epoch)
        }
        EarlyStop::PuPriorProximity => {
            let key = |r: &MetricsRecord| -> Result<(f64, f64)> {
                let acc = r.validation_provided_accuracy.ok_or_else(|| {
                    Error::arg(format!("epoch {} has no provided-label accuracy", r.epoch))
                })?;
                Ok(((acc - expected_accuracy).abs(), val_loss(r)?))
            };
            let mut best = (&history[0], key(&history[0])?);
            for r in &history[1..] {
                let k = key(r)?;
                if k.0 < best.1 .0 || (k.0 == best.1 .0 && k.1 < best.1 .1) {
                    best = (r, k);
                }
            }
            Ok(best.0.epoch)
        }
    }
}

/// Provided-label accuracy of a classifier that is perfect on true labels:
/// labeled positives and true negatives agree, unlabeled positives do not.
pub fn expected_provided_accuracy(alpha: f64, c: f64) -> f64 {
    1.0 - alpha * (1.0 - c)
}

/// `p(sum y_i >= 1)` for a bag.
pub fn mil_bag_probability(model: &Mlp, data: &Dataset, bag: &Bag) -> Result<f64> {
    let t = model.predict_log_probs(&data.gather(&bag.instance_indices), bag.len())?;
    let scores = InstanceScores::new(t)?;
    Ok(interval_log_prob(&scores, 1, scores.k())?.exp())
}

/// Bag label by the exact at-least-one probability, rounding 0.5 up.
pub fn predict_bag_mil(model: &Mlp, data: &Dataset, bag: &Bag) -> Result<bool> {
    Ok(mil_bag_probability(model, data, bag)? >= 0.5)
}

/// Instance metrics of `model` on the rows of a labeled dataset.
pub fn evaluate_instances(model: &Mlp, data: &Dataset) -> Result<LevelMetrics> {
    let labels = data
        .labels()
        .ok_or_else(|| Error::arg("evaluation needs true labels"))?;
    let probs: Vec<f64> = model
        .predict_log_probs(data.features(), data.len())?
        .into_iter()
        .map(f64::exp)
        .collect();
    LevelMetrics::from_scores(&probs, labels)
}

/// Bag metrics for MIL bags, scored by `p(sum >= 1)`.
pub fn evaluate_mil_bags(model: &Mlp, data: &Dataset, bags: &[Bag]) -> Result<LevelMetrics> {
    let mut labels = Vec::with_capacity(bags.len());
    for bag in bags {
        match bag.weak_label {
            WeakLabel::MaxLabel(l) => labels.push(l),
            _ => return Err(Error::arg(format!("bag {} is not a MIL bag", bag.id))),
        }
    }
    let probs = par::map_slice(bags, |b| mil_bag_probability(model, data, b))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    LevelMetrics::from_scores(&probs, &labels)
}

struct StepResult {
    loss: f64,
    capped: bool,
    grads: Gradients,
}

fn nan_loss(epoch: usize, bag: usize, detail: String) -> Error {
    Error::NonFiniteLoss { epoch, bag, detail }
}

fn bag_loss(config: &TrainConfig, bag: &Bag, scores: &InstanceScores) -> Result<LossValue> {
    match (&bag.weak_label, config.setting) {
        (WeakLabel::Proportion(p), Setting::Llp) => llp_loss(scores, *p),
        (WeakLabel::MaxLabel(l), Setting::Mil) => {
            let w = if *l { config.mil_positive_weight } else { 1.0 };
            Ok(mil_loss(scores, *l)?.scaled(w))
        }
        (label, setting) => Err(Error::arg(format!(
            "bag {} has label {label:?}, which {setting:?} training cannot use",
            bag.id
        ))),
    }
}

/// Loss and parameter gradients for one bag. The error for a NaN loss
/// carries the bag and its scores.
fn bag_step(
    config: &TrainConfig,
    model: &Mlp,
    data: &Dataset,
    bag: &Bag,
    epoch: usize,
) -> Result<StepResult> {
    let (t, cache) = model.forward_batch(&data.gather(&bag.instance_indices), bag.len())?;
    let scores = InstanceScores::new(t.clone())
        .map_err(|e| nan_loss(epoch, bag.id, format!("{e}; bag {bag:?}; log-probs {t:?}")))?;
    let lv = bag_loss(config, bag, &scores)?;
    if !lv.loss.is_finite() || lv.grad.as_slice().iter().any(|g| !g.is_finite()) {
        return Err(nan_loss(
            epoch,
            bag.id,
            format!("loss {}; bag {bag:?}; log-probs {t:?}", lv.loss),
        ));
    }
    let grads = model.backward(&cache, lv.grad.as_slice())?;
    Ok(StepResult {
        loss: lv.loss,
        capped: lv.capped,
        grads,
    })
}

/// Sums results in order, averages, and steps the optimizer.
fn apply_group(
    model: &mut Mlp,
    optim: &mut OptimState,
    results: Vec<StepResult>,
) -> Result<(f64, usize)> {
    let n = results.len();
    let mut iter = results.into_iter();
    let first = iter.next().expect("non-empty group");
    let mut grads = first.grads;
    let mut loss = first.loss;
    let mut capped = first.capped as usize;
    for r in iter {
        grads.add_assign(&r.grads);
        loss += r.loss;
        capped += r.capped as usize;
    }
    if n > 1 {
        grads.scale(1.0 / n as f64);
    }
    optim.step(model, &grads)?;
    Ok((loss, capped))
}

/// Bags are split into train and validation, stratified on the weak label.
fn split_bags<'b>(config: &TrainConfig, bags: &'b [Bag]) -> Result<(Vec<&'b Bag>, Vec<&'b Bag>)> {
    let strata: Vec<u64> = bags
        .iter()
        .map(|b| match b.weak_label {
            WeakLabel::Proportion(p) => (p * b.len() as f64).round() as u64,
            WeakLabel::MaxLabel(l) => l as u64,
            WeakLabel::PuSelection(_) => 0,
        })
        .collect();
    let (train, val) =
        stratified_holdout(&strata, config.validation_fraction, config.split_seed())?;
    Ok((
        train.into_iter().map(|i| &bags[i]).collect(),
        val.into_iter().map(|i| &bags[i]).collect(),
    ))
}

fn validate_bags(
    config: &TrainConfig,
    model: &Mlp,
    data: &Dataset,
    bags: &[&Bag],
    record: &mut MetricsRecord,
) -> Result<()> {
    if bags.is_empty() {
        return Ok(());
    }
    let losses = par::map_slice(bags, |b| -> Result<f64> {
        let t = model.predict_log_probs(&data.gather(&b.instance_indices), b.len())?;
        Ok(bag_loss(config, b, &InstanceScores::new(t)?)?.loss)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    record.validation_loss = Some(losses.iter().sum::<f64>() / losses.len() as f64);

    if data.labels().is_some() {
        let mut idx: Vec<usize> = bags
            .iter()
            .flat_map(|b| b.instance_indices.iter().copied())
            .collect();
        idx.sort_unstable();
        idx.dedup();
        record.instance = Some(evaluate_instances(model, &data.subset(&idx))?);
    }
    if config.setting == Setting::Mil {
        let owned: Vec<Bag> = bags.iter().map(|&b| b.clone()).collect();
        record.bag = Some(evaluate_mil_bags(model, data, &owned)?);
    }
    Ok(())
}

/// Trains a fresh model on `data` and returns the early-stopping selection.
pub fn train(config: &TrainConfig, data: TrainData<'_>) -> Result<TrainOutcome> {
    config.validate()?;
    let dataset = data.dataset();
    let spec = MlpSpec::new(dataset.dim(), &config.hidden);
    let model = Mlp::new(spec, config.seed)?;
    match data {
        TrainData::Bags { data, bags } => {
            if config.setting.is_pu() {
                return Err(Error::arg("PU settings need a PU split, not bags"));
            }
            train_bags(config, model, data, bags)
        }
        TrainData::Pu { data, split } => {
            if !config.setting.is_pu() {
                return Err(Error::arg(format!(
                    "{:?} training needs bags",
                    config.setting
                )));
            }
            train_pu(config, model, data, split)
        }
    }
}

/// Tracks the best epoch and its parameters as training proceeds.
struct Selection {
    rule: EarlyStop,
    warm_epochs: usize,
    expected_accuracy: f64,
    best_epoch: usize,
    best_model: Mlp,
}

impl Selection {
    fn new(config: &TrainConfig, model: &Mlp, expected_accuracy: f64) -> Self {
        Selection {
            rule: config.early_stop,
            warm_epochs: config.warm_epochs,
            expected_accuracy,
            best_epoch: 0,
            best_model: model.clone(),
        }
    }

    fn observe(&mut self, history: &[MetricsRecord], model: &Mlp) -> Result<()> {
        let eligible: Vec<MetricsRecord> = history
            .iter()
            .filter(|r| r.epoch > self.warm_epochs)
            .cloned()
            .collect();
        let current = history.last().map_or(0, |r| r.epoch);
        let best = if eligible.is_empty() {
            current
        } else {
            early_stop_select(&eligible, self.rule, self.expected_accuracy)?
        };
        if best == current {
            self.best_epoch = current;
            self.best_model = model.clone();
        }
        Ok(())
    }
}

fn train_bags(
    config: &TrainConfig,
    mut model: Mlp,
    data: &Dataset,
    bags: &[Bag],
) -> Result<TrainOutcome> {
    if bags.is_empty() {
        return Err(Error::Empty("no bags to train on".into()));
    }
    for bag in bags {
        bag.validate_for(data)?;
    }
    let (train_bags, val_bags) = split_bags(config, bags)?;
    if train_bags.is_empty() {
        return Err(Error::Empty(
            "validation split left no training bags".into(),
        ));
    }
    let mut optim = OptimState::new(config.optim_config(), &model)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.order_seed());

    let mut history = Vec::with_capacity(config.epochs + 1);
    let mut initial = MetricsRecord::empty(0);
    validate_bags(config, &model, data, &val_bags, &mut initial)?;
    history.push(initial);
    let mut selection = Selection::new(config, &model, 0.0);

    let mut order: Vec<usize> = (0..train_bags.len()).collect();
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut capped = 0;
        for group in order.chunks(config.bags_per_step) {
            let results = par::map_slice(group, |&j| {
                bag_step(config, &model, data, train_bags[j], epoch)
            })
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
            let (loss, c) = apply_group(&mut model, &mut optim, results)?;
            total += loss;
            capped += c;
        }
        if !model.is_finite() {
            return Err(nan_loss(
                epoch,
                usize::MAX,
                "parameters became non-finite".into(),
            ));
        }
        let mut record = MetricsRecord::empty(epoch);
        record.train_loss = Some(total / train_bags.len() as f64);
        record.capped_losses = capped;
        validate_bags(config, &model, data, &val_bags, &mut record)?;
        history.push(record);
        selection.observe(&history[1..], &model)?;
    }
    Ok(TrainOutcome {
        model: selection.best_model,
        best_epoch: selection.best_epoch,
        history,
        beta: None,
    })
}

/// PU loss of one unlabeled bag.
fn pu_bag_loss(config: &TrainConfig, scores: &InstanceScores, beta: f64) -> Result<LossValue> {
    match config.setting {
        Setting::PuKl => pu_kl_loss(scores, beta),
        _ => pu_expect_loss(scores, beta),
    }
}

struct PuValidation {
    positives: Vec<usize>,
    unlabeled: Vec<usize>,
}

fn validate_pu(
    config: &TrainConfig,
    model: &Mlp,
    data: &Dataset,
    val: &PuValidation,
    beta: f64,
    record: &mut MetricsRecord,
) -> Result<()> {
    let n = val.positives.len() + val.unlabeled.len();
    if n == 0 {
        return Ok(());
    }
    let t_pos = model.predict_log_probs(&data.gather(&val.positives), val.positives.len())?;
    let t_unl = model.predict_log_probs(&data.gather(&val.unlabeled), val.unlabeled.len())?;
    let mut loss = 0.0;
    if !t_pos.is_empty() {
        loss += config.w_pos * positive_ce_loss(&InstanceScores::new(t_pos.clone())?).loss;
    }
    if !t_unl.is_empty() {
        let bags: Vec<&[f64]> = t_unl.chunks(config.k_u).collect();
        // a short tail is folded into the previous bag
        let bags: Vec<Vec<f64>> = if bags.len() > 1 && bags[bags.len() - 1].len() < config.k_u {
            let mut v: Vec<Vec<f64>> = bags[..bags.len() - 1].iter().map(|b| b.to_vec()).collect();
            v.last_mut()
                .unwrap()
                .extend_from_slice(bags[bags.len() - 1]);
            v
        } else {
            bags.iter().map(|b| b.to_vec()).collect()
        };
        let mut sum = 0.0;
        for b in &bags {
            sum += pu_bag_loss(config, &InstanceScores::new(b.clone())?, beta)?.loss;
        }
        loss += config.w_unl * sum / bags.len() as f64;
    }
    record.validation_loss = Some(loss);

    let agree = t_pos.iter().filter(|t| t.exp() >= 0.5).count()
        + t_unl.iter().filter(|t| t.exp() < 0.5).count();
    record.validation_provided_accuracy = Some(agree as f64 / n as f64);

    if let Some(labels) = data.labels() {
        let idx: Vec<usize> = val
            .positives
            .iter()
            .chain(&val.unlabeled)
            .copied()
            .collect();
        let probs: Vec<f64> = t_pos.iter().chain(&t_unl).map(|t| t.exp()).collect();
        let y: Vec<bool> = idx.iter().map(|&i| labels[i]).collect();
        record.instance = Some(LevelMetrics::from_scores(&probs, &y)?);
    }
    Ok(())
}

fn train_pu(
    config: &TrainConfig,
    mut model: Mlp,
    data: &Dataset,
    split: &PuDataset,
) -> Result<TrainOutcome> {
    if split.positive_indices.is_empty() || split.unlabeled_indices.is_empty() {
        return Err(Error::Empty(
            "PU training needs labeled positives and unlabeled data".into(),
        ));
    }
    if let Some(&i) = split
        .positive_indices
        .iter()
        .chain(&split.unlabeled_indices)
        .find(|&&i| i >= data.len())
    {
        return Err(Error::arg(format!(
            "PU split references row {i} of {}",
            data.len()
        )));
    }
    let beta = match config.beta {
        Some(b) => b,
        None => split.mixture_estimate()?.beta,
    };
    if !(beta > 0.0 && beta < 1.0) {
        return Err(Error::arg(format!(
            "mixture proportion {beta} is outside (0, 1); set beta explicitly"
        )));
    }

    // Stratify on labeled vs unlabeled.
    let all: Vec<usize> = split
        .positive_indices
        .iter()
        .chain(&split.unlabeled_indices)
        .copied()
        .collect();
    let strata: Vec<bool> = (0..all.len())
        .map(|j| j < split.positive_indices.len())
        .collect();
    let (train_idx, val_idx) =
        stratified_holdout(&strata, config.validation_fraction, config.split_seed())?;
    let pick = |idx: &[usize], labeled: bool| -> Vec<usize> {
        idx.iter()
            .filter(|&&j| strata[j] == labeled)
            .map(|&j| all[j])
            .collect()
    };
    let mut train_pos = pick(&train_idx, true);
    let mut train_unl = pick(&train_idx, false);
    let val = PuValidation {
        positives: pick(&val_idx, true),
        unlabeled: pick(&val_idx, false),
    };
    if train_pos.is_empty() || train_unl.is_empty() {
        return Err(Error::Empty(
            "validation split left no positives or no unlabeled data".into(),
        ));
    }
    let k_u = config.k_u.min(train_unl.len());

    let mut optim = OptimState::new(config.optim_config(), &model)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.order_seed());
    let expected = expected_provided_accuracy(split.alpha, split.c);

    let mut history = Vec::with_capacity(config.epochs + 1);
    let mut initial = MetricsRecord::empty(0);
    validate_pu(config, &model, data, &val, beta, &mut initial)?;
    history.push(initial);
    let mut selection = Selection::new(config, &model, expected);

    for epoch in 1..=config.epochs {
        train_unl.shuffle(&mut rng);
        train_pos.shuffle(&mut rng);
        let steps = train_unl.len() / k_u;
        let mut total = 0.0;
        let mut capped = 0;
        for j in 0..steps {
            let ubag = &train_unl[j * k_u..(j + 1) * k_u];
            let start = (j * config.pos_batch_size) % train_pos.len();
            let pbatch: Vec<usize> = (0..config.pos_batch_size.min(train_pos.len()))
                .map(|o| train_pos[(start + o) % train_pos.len()])
                .collect();

            let (tp, cache_p) = model.forward_batch(&data.gather(&pbatch), pbatch.len())?;
            let pos = positive_ce_loss(&InstanceScores::new(tp)?).scaled(config.w_pos);
            let (tu, cache_u) = model.forward_batch(&data.gather(ubag), ubag.len())?;
            let unl_scores = InstanceScores::new(tu.clone())?;
            let unl = pu_bag_loss(config, &unl_scores, beta)?.scaled(config.w_unl);
            let loss = pos.loss + unl.loss;
            if !loss.is_finite() || unl.grad.as_slice().iter().any(|g| !g.is_finite()) {
                return Err(nan_loss(
                    epoch,
                    j,
                    format!("loss {loss}; unlabeled rows {ubag:?}; log-probs {tu:?}"),
                ));
            }
            let mut grads = model.backward(&cache_p, pos.grad.as_slice())?;
            grads.add_assign(&model.backward(&cache_u, unl.grad.as_slice())?);
            optim.step(&mut model, &grads)?;
            total += loss;
            capped += unl.capped as usize;
        }
        if !model.is_finite() {
            return Err(nan_loss(
                epoch,
                usize::MAX,
                "parameters became non-finite".into(),
            ));
        }
        let mut record = MetricsRecord::empty(epoch);
        record.train_loss = Some(total / steps as f64);
        record.capped_losses = capped;
        validate_pu(config, &model, data, &val, beta, &mut record)?;
        history.push(record);
        selection.observe(&history[1..], &model)?;
    }
    Ok(TrainOutcome {
        model: selection.best_model,
        best_epoch: selection.best_epoch,
        history,
        beta: Some(beta),
    })
}

/// Plain binary cross-entropy training on single instances, visiting them in
/// the same seeded order and with the same optimizer as [`train`] on
/// size-1 LLP bags. Returns the final model and per-epoch mean losses.
pub fn train_bce_reference(
    config: &TrainConfig,
    data: &Dataset,
    rows: &[(usize, bool)],
) -> Result<(Mlp, Vec<f64>)> {
    config.validate()?;
    if rows.is_empty() {
        return Err(Error::Empty("no instances to train on".into()));
    }
    let mut model = Mlp::new(MlpSpec::new(data.dim(), &config.hidden), config.seed)?;
    let mut optim = OptimState::new(config.optim_config(), &model)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.order_seed());
    let mut order: Vec<usize> = (0..rows.len()).collect();
    let mut losses = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &j in &order {
            let (i, y) = rows[j];
            let (t, cache) = model.forward(data.row(i))?;
            let tc = if t == 0.0 {
                f64::NEG_INFINITY
            } else {
                log1mexp(t)?
            };
            let (mut loss, mut d_t) = if y { (-t, -1.0) } else { (-tc, (t - tc).exp()) };
            if !loss.is_finite() {
                loss = loss_cap();
                d_t = 0.0;
            }
            let grads = model.backward(&cache, &[d_t])?;
            optim.step(&mut model, &grads)?;
            total += loss;
        }
        losses.push(total / rows.len() as f64);
    }
    Ok((model, losses))
}
