//! Training objective, optimizer, epoch loop and best-validation selection.

mod checkpoint;

pub use checkpoint::{load_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::TrialSet;
use crate::error::{Error, Result};
use crate::iue::{mcts_targets, CycleTrace, MctsConfig};
use crate::model::{Forward, Halting, Model};
use crate::numcore::{Graph, ParamStore, Tensor, Var};

/// Loss used to fit reliability scores to their search targets.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IueLossForm {
    Bce,
    Mse,
}

impl FromStr for IueLossForm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bce" => Ok(IueLossForm::Bce),
            "mse" => Ok(IueLossForm::Mse),
            other => Err(Error::Config(format!(
                "unknown IUE loss {other:?} (expected bce|mse)"
            ))),
        }
    }
}

impl fmt::Display for IueLossForm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            IueLossForm::Bce => "bce",
            IueLossForm::Mse => "mse",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_halt: f64,
    pub lambda_iue: f64,
    pub iue_enabled: bool,
    pub iue_form: IueLossForm,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_halt: 0.05,
            lambda_iue: 0.5,
            iue_enabled: true,
            iue_form: IueLossForm::Bce,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_halt >= 0.0 && self.lambda_iue >= 0.0) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }
}

/// `mean_b Σ_c α_c (c−1)/(L'−1)` for `alpha[B×L']`; zero when `L' = 1`.
pub fn halting_regularizer(g: &mut Graph, alpha: Var) -> Result<Var> {
    let shape = g.value(alpha).shape().to_vec();
    if shape.len() != 2 {
        return Err(Error::dim("halting_regularizer", &shape, &[2]));
    }
    let (b, l) = (shape[0], shape[1]);
    if l == 1 {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let weights: Vec<f64> = (0..l).map(|c| c as f64 / (l - 1) as f64).collect();
    let w = g.constant(Tensor::vector(&weights));
    let weighted = g.mul_row(alpha, w)?;
    let total = g.sum(weighted);
    Ok(g.scale(total, 1.0 / b as f64))
}

/// Fits the scores of cycles `1..L'` (pre-sigmoid, `[B]` each) to the
/// per-depth `targets[L']`, averaged over batch and supervised cycles. The
/// last cycle is not supervised, so a single cycle gives zero.
pub fn iue_supervision_loss(
    g: &mut Graph,
    scores: &[Var],
    targets: &Tensor,
    form: IueLossForm,
) -> Result<Var> {
    let l = scores.len();
    if targets.rank() != 1 || targets.numel() != l {
        return Err(Error::dim("iue_supervision_loss", &[l], targets.shape()));
    }
    if l <= 1 {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let supervised = &scores[..l - 1];
    let stacked = g.stack_cols(supervised)?;
    let b = g.value(stacked).shape()[0];
    let per_row = &targets.data()[..l - 1];
    let tiled: Vec<f64> = (0..b).flat_map(|_| per_row.iter().copied()).collect();
    let tiled = Tensor::new(&[b, l - 1], tiled)?;
    match form {
        IueLossForm::Bce => g.bce_with_logits(stacked, &tiled),
        IueLossForm::Mse => {
            let r = g.sigmoid(stacked);
            let t = g.constant(tiled);
            let diff = g.sub(r, t)?;
            let sq = g.square(diff);
            Ok(g.mean(sq))
        }
    }
}

/// Training objective of one forward pass.
///
/// With IUE off this is the cross-entropy of the last cycle's logits (or the
/// readout of a cycle-free model). With IUE on it is the cross-entropy of
/// the aggregated logits plus the weighted halting and supervision terms;
/// `targets` are the per-depth search targets and must be present exactly
/// when IUE is on.
pub fn total_loss(
    g: &mut Graph,
    fwd: &Forward,
    labels: &[usize],
    targets: Option<&Tensor>,
    lw: &LossWeights,
) -> Result<Var> {
    if !lw.iue_enabled {
        if targets.is_some() {
            return Err(Error::Contract("search targets given with IUE off".into()));
        }
        let logits = fwd.cycles.last().map(|c| c.logits).unwrap_or(fwd.logits);
        return g.cross_entropy(logits, labels);
    }
    let targets = targets.ok_or_else(|| Error::Contract("IUE on but no search targets".into()))?;
    let alpha = fwd.alpha.ok_or_else(|| {
        Error::Contract("IUE on but the model produced no aggregation weights".into())
    })?;
    let mut total = g.cross_entropy(fwd.logits, labels)?;
    if lw.lambda_halt != 0.0 {
        let r = halting_regularizer(g, alpha)?;
        let r = g.scale(r, lw.lambda_halt);
        total = g.add(total, r)?;
    }
    if lw.lambda_iue != 0.0 {
        let scores = if fwd.reward_scores.is_empty() {
            &fwd.scores
        } else {
            &fwd.reward_scores
        };
        let s = iue_supervision_loss(g, scores, targets, lw.iue_form)?;
        let s = g.scale(s, lw.lambda_iue);
        total = g.add(total, s)?;
    }
    Ok(total)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adaptive-moment optimizer with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub cfg: AdamConfig,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|p| vec![0.0; p.value.numel()]).collect();
        Self {
            cfg,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> i32 {
        self.step
    }

    /// Applies one update from the gradients accumulated in `store`.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(Error::Contract(format!(
                "optimizer tracks {} parameters, store has {}",
                self.m.len(),
                store.len()
            )));
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.step);
        let c2 = 1.0 - beta2.powi(self.step);
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            if m.len() != p.value.numel() {
                return Err(Error::dim("adam", &[m.len()], p.value.shape()));
            }
            let grad = p.grad.data();
            let value = p.value.data_mut();
            for i in 0..m.len() {
                let gi = grad[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                value[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub loss: LossWeights,
    /// Search settings; the seed is re-derived for every step.
    pub mcts: MctsConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 16,
            adam: AdamConfig::default(),
            loss: LossWeights::default(),
            mcts: MctsConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
    pub val_mean_cycles: f64,
}

#[derive(Clone, Debug)]
pub struct FitOutcome {
    pub best: Checkpoint,
    pub history: Vec<EpochRecord>,
}

/// Index of the highest accuracy, the earliest one on ties.
pub fn select_best(accuracies: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &a) in accuracies.iter().enumerate() {
        if best.is_none_or(|b| a > accuracies[b]) {
            best = Some(i);
        }
    }
    best
}

/// SplitMix64 finaliser, used to derive per-step seeds.
fn mix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

fn step_seed(seed: u64, epoch: usize, step: usize) -> u64 {
    mix(mix(mix(seed) ^ epoch as u64) ^ step as u64)
}

/// Trains `model` on `train` and keeps the parameters with the best
/// validation accuracy (reliability halting active, batch size 1).
///
/// Epochs count from 1. With `epochs == 0` the initial parameters are the
/// result. On return the model holds the selected parameters.
pub fn fit(
    model: &mut Model,
    data: &TrialSet,
    train: &[usize],
    val: &[usize],
    cfg: &TrainConfig,
) -> Result<FitOutcome> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::Data(format!(
            "training needs non-empty sets, got {} training and {} validation trials",
            train.len(),
            val.len()
        )));
    }
    let train_set: BTreeSet<usize> = train.iter().copied().collect();
    if let Some(&i) = val.iter().find(|i| train_set.contains(i)) {
        return Err(Error::Data(format!(
            "trial {i} is in both training and validation sets"
        )));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    cfg.loss.validate()?;
    if cfg.loss.iue_enabled && !model.config.variant.uses_iue() {
        return Err(Error::Config(format!(
            "IUE loss enabled for variant {}",
            model.config.variant
        )));
    }
    let halting = if cfg.loss.iue_enabled {
        Halting::Reliability
    } else {
        Halting::Off
    };

    let mut adam = Adam::new(cfg.adam, &model.store);
    let mut order = train.to_vec();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<Checkpoint> = None;

    if cfg.epochs == 0 {
        let eval = evaluate(model, data, val)?;
        best = Some(Checkpoint::from_model(model, 0, eval.accuracy));
    }
    for epoch in 1..=cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        order.sort_unstable();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let (x, labels) = data.batch(batch)?;
            let mut g = Graph::new();
            let xv = g.constant(x);
            let fwd = model.forward(&mut g, xv, halting)?;
            let targets = if cfg.loss.iue_enabled {
                let trace = CycleTrace::from_forward(&g, &fwd);
                let mcts = MctsConfig {
                    rng_seed: step_seed(cfg.seed, epoch, step),
                    ..cfg.mcts.clone()
                };
                Some(mcts_targets(
                    &trace,
                    &labels,
                    &mcts,
                    model.config.iue.tau_ens,
                )?)
            } else {
                None
            };
            let loss = total_loss(&mut g, &fwd, &labels, targets.as_ref(), &cfg.loss)?;
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Data(format!(
                    "loss became {value} at epoch {epoch}, step {step}"
                )));
            }
            model.store.zero_grad();
            g.backward(loss, &mut model.store)?;
            adam.step(&mut model.store)?;
            loss_sum += value;
            batches += 1;
        }
        let eval = evaluate(model, data, val)?;
        history.push(EpochRecord {
            epoch,
            train_loss: loss_sum / batches as f64,
            val_accuracy: eval.accuracy,
            val_mean_cycles: eval.mean_cycles,
        });
        if best.as_ref().is_none_or(|b| eval.accuracy > b.val_accuracy) {
            best = Some(Checkpoint::from_model(model, epoch, eval.accuracy));
        }
    }
    let best = best.expect("a checkpoint is always selected");
    model.store.restore(&best.tensors)?;
    Ok(FitOutcome { best, history })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub predictions: Vec<usize>,
    pub labels: Vec<usize>,
    pub accuracy: f64,
    /// Mean number of cycles actually run per trial.
    pub mean_cycles: f64,
}

/// Batch-size-1 inference with reliability halting active.
pub fn evaluate(model: &Model, data: &TrialSet, indices: &[usize]) -> Result<Evaluation> {
    if indices.is_empty() {
        return Err(Error::Data("nothing to evaluate".into()));
    }
    let mut predictions = Vec::with_capacity(indices.len());
    let mut labels = Vec::with_capacity(indices.len());
    let mut cycles = 0usize;
    for &i in indices {
        let (x, y) = data.batch(&[i])?;
        let (pred, c) = model.predict(&x, Halting::Reliability)?;
        predictions.push(pred[0]);
        labels.push(y[0]);
        cycles += c;
    }
    let correct = predictions
        .iter()
        .zip(&labels)
        .filter(|(p, l)| p == l)
        .count();
    Ok(Evaluation {
        accuracy: correct as f64 / indices.len() as f64,
        mean_cycles: cycles as f64 / indices.len() as f64,
        predictions,
        labels,
    })
}
