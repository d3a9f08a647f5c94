//! NCE training loop: Adam, per-epoch shuffling, early stopping on
//! validation loss, run-directory artifacts.

use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint::save_checkpoint;
use crate::corpus::{ContextResponsePair, Corpus, Utterance};
use crate::error::{Error, Result};
use crate::par;
use crate::rng::{self, stream};
use crate::sampling::{make_batch, Paraphraser, SamplingPolicy, TemplateGenerator, TrainingExample};
use crate::scorer::ScorerModel;

/// `-mean(ln s⁺) - mean(ln(1 - s⁻))`.
pub fn nce_loss(pos: &[f64], neg: &[f64]) -> Result<f64> {
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::Argument(
            "nce_loss needs at least one positive and one negative score".into(),
        ));
    }
    if let Some(s) = pos.iter().chain(neg).find(|s| !(**s > 0.0 && **s < 1.0)) {
        return Err(Error::Argument(format!("score {s} is outside (0, 1)")));
    }
    let p = pos.iter().map(|s| -s.ln()).sum::<f64>() / pos.len() as f64;
    let n = neg.iter().map(|s| -(-s).ln_1p()).sum::<f64>() / neg.len() as f64;
    Ok(p + n)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Hyperparams {
    pub learning_rate: f64,
    /// Pairs per optimizer step.
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub optimizer: Optimizer,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            learning_rate: 1e-4,
            batch_size: 32,
            max_epochs: 50,
            patience: 3,
            optimizer: Optimizer::Adam,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Argument(m.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return bad("batch_size and max_epochs must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("adam betas must lie in [0, 1)");
        }
        if self.eps <= 0.0 {
            return bad("adam eps must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(hp: &Hyperparams, n: usize) -> Self {
        Adam {
            lr: hp.learning_rate,
            beta1: hp.beta1,
            beta2: hp.beta2,
            eps: hp.eps,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Seconds; kept out of `history.json` so reruns are byte-identical.
    #[serde(skip)]
    pub wall_time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    /// Validation loss of the untrained model.
    pub initial_val_loss: f64,
    pub epochs: Vec<EpochRecord>,
    /// Index into `epochs` of the lowest validation loss.
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl TrainHistory {
    pub fn best_val_loss(&self) -> f64 {
        self.epochs[self.best_epoch].val_loss
    }

    pub fn final_val_loss(&self) -> f64 {
        self.epochs.last().map_or(self.initial_val_loss, |e| e.val_loss)
    }

    pub fn wall_times(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.wall_time).collect()
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best: ScorerModel,
    pub last: ScorerModel,
    pub history: TrainHistory,
}

type Prepared = (Vec<Utterance>, Vec<(Vec<String>, bool)>);

fn prepare(batch: Vec<TrainingExample>) -> Prepared {
    let context = batch.first().map(|e| e.context.to_vec()).unwrap_or_default();
    let examples = batch
        .into_iter()
        .map(|e| {
            let pos = e.is_positive();
            (e.response.tokens, pos)
        })
        .collect();
    (context, examples)
}

fn as_refs(examples: &[(Vec<String>, bool)]) -> Vec<(&[String], bool)> {
    examples.iter().map(|(t, p)| (t.as_slice(), *p)).collect()
}

/// Mean eval-mode loss over prepared batches.
pub fn mean_loss(model: &ScorerModel, batches: &[Prepared]) -> Result<f64> {
    let losses = par::try_map_indexed(batches, |_, (ctx, ex)| model.pair_loss(ctx, &as_refs(ex)))?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

fn batches_for(
    pairs: &[ContextResponsePair],
    corpus: &Corpus,
    policy: &SamplingPolicy,
    gen: &TemplateGenerator,
    para: &dyn Paraphraser,
    seed: impl Fn(usize) -> u64 + Sync,
) -> Result<Vec<Prepared>> {
    par::try_map_indexed(pairs, |i, p| {
        Ok(prepare(make_batch(p, policy, corpus, gen, para, seed(i))?))
    })
}

/// Gradient of one NCE step over `idx` pairs: per-pair gradients are computed
/// independently (in parallel when enabled) and summed in index order.
fn step_gradient(
    model: &ScorerModel,
    batches: &[(usize, Prepared)],
    dropout_base: u64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let per_pair = par::try_map_indexed(batches, |_, (i, (ctx, ex))| {
        let mut g = model.params.zeros_like();
        let seed = (model.config.dropout > 0.0).then(|| rng::derive(dropout_base, &[*i as u64]));
        let l = model.pair_loss_grad(ctx, &as_refs(ex), seed, &mut g)?;
        Ok::<_, Error>((l.loss, g))
    })?;
    let mut total = model.params.zeros_like();
    let mut losses = Vec::with_capacity(per_pair.len());
    let scale = 1.0 / per_pair.len() as f64;
    for (loss, g) in per_pair {
        losses.push(loss);
        for (t, v) in total.iter_mut().zip(&g) {
            *t += v * scale;
        }
    }
    Ok((total, losses))
}

/// One Adam step on a single pair's batch, for sanity checks.
pub fn single_step(
    model: &mut ScorerModel,
    context: &[Utterance],
    examples: &[(&[String], bool)],
    hp: &Hyperparams,
) -> Result<()> {
    let mut grad = model.params.zeros_like();
    model.pair_loss_grad(context, examples, None, &mut grad)?;
    let mut adam = Adam::new(hp, grad.len());
    adam.step(model.params.data_mut(), &grad);
    model.params.round_to_f32();
    Ok(())
}

/// Trains `model` with NCE; returns best-validation and last-epoch models.
///
/// Negatives for training pair `i` in epoch `e` are drawn from seed
/// `derive(policy.seed, [e, i])`; validation negatives are drawn once.
pub fn train_full(
    mut model: ScorerModel,
    train: &Corpus,
    val: &Corpus,
    hp: &Hyperparams,
    policy: &SamplingPolicy,
    para: &dyn Paraphraser,
) -> Result<TrainOutcome> {
    hp.validate()?;
    policy.validate()?;
    let train_pairs = train.pairs();
    let val_pairs = val.pairs();
    if train_pairs.is_empty() || val_pairs.is_empty() {
        return Err(Error::Argument(format!(
            "training needs pairs in both splits (train {}, val {})",
            train_pairs.len(),
            val_pairs.len()
        )));
    }
    let train_gen = TemplateGenerator::from_corpus(train)?;
    let val_gen = TemplateGenerator::from_corpus(val)?;
    let val_batches = batches_for(&val_pairs, val, policy, &val_gen, para, |i| {
        rng::derive(policy.seed, &[stream::VALIDATION, i as u64])
    })?;

    let initial_val_loss = mean_loss(&model, &val_batches)?;
    log::info!("initial validation loss {initial_val_loss:.6}");
    let mut adam = Adam::new(hp, model.params.len());
    let mut epochs: Vec<EpochRecord> = Vec::new();
    let mut best: Option<(usize, f64, ScorerModel)> = None;
    let mut since_best = 0;
    let mut stopped_early = false;

    for epoch in 0..hp.max_epochs {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..train_pairs.len()).collect();
        rng::shuffle(&mut rng::rng_for(hp.seed, &[stream::SHUFFLE, epoch as u64]), &mut order);
        let mut loss_sum = 0.0;
        for (b, chunk) in order.chunks(hp.batch_size).enumerate() {
            let batches = par::try_map_indexed(chunk, |_, &i| {
                let seed = rng::derive(policy.seed, &[stream::NEGATIVES, epoch as u64, i as u64]);
                let batch = make_batch(&train_pairs[i], policy, train, &train_gen, para, seed)?;
                Ok::<_, Error>((i, prepare(batch)))
            })?;
            let dropout_base = rng::derive(hp.seed, &[stream::DROPOUT, epoch as u64]);
            let (grad, losses) = step_gradient(&model, &batches, dropout_base)?;
            let batch_loss: f64 = losses.iter().sum();
            if !batch_loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                let first = chunk.first().map(|&i| &train_pairs[i]);
                log::error!(
                    "non-finite loss at epoch {epoch} batch {b} (first pair {:?} turn {:?})",
                    first.map(|p| &p.dialogue_id),
                    first.map(|p| p.turn_index)
                );
                return Err(Error::NonFiniteLoss { epoch, batch: b });
            }
            loss_sum += batch_loss;
            adam.step(model.params.data_mut(), &grad);
            model.params.round_to_f32();
        }
        let train_loss = loss_sum / train_pairs.len() as f64;
        let val_loss = mean_loss(&model, &val_batches)?;
        if !val_loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch,
                batch: usize::MAX,
            });
        }
        epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            wall_time: started.elapsed().as_secs_f64(),
        });
        log::info!("epoch {epoch}: train {train_loss:.6} val {val_loss:.6}");
        match &best {
            Some((_, b, _)) if val_loss >= *b => since_best += 1,
            _ => {
                best = Some((epoch, val_loss, model.clone()));
                since_best = 0;
            }
        }
        if since_best > hp.patience {
            stopped_early = true;
            break;
        }
    }
    let (best_epoch, _, best_model) = best.expect("at least one epoch runs");
    Ok(TrainOutcome {
        best: best_model,
        last: model,
        history: TrainHistory {
            initial_val_loss,
            epochs,
            best_epoch,
            stopped_early,
        },
    })
}

/// Trains and returns the best-validation model with its history.
pub fn train(
    model: ScorerModel,
    train: &Corpus,
    val: &Corpus,
    hp: &Hyperparams,
    policy: &SamplingPolicy,
    para: &dyn Paraphraser,
) -> Result<(ScorerModel, TrainHistory)> {
    let out = train_full(model, train, val, hp, policy, para)?;
    Ok((out.best, out.history))
}

pub const HISTORY_FILE: &str = "history.json";
pub const TIMING_FILE: &str = "timing.json";
pub const BEST_CHECKPOINT: &str = "ckpt-best";
pub const LAST_CHECKPOINT: &str = "ckpt-last";

/// Writes `ckpt-best`, `ckpt-last`, `history.json` and `timing.json`.
pub fn write_run(run_dir: impl AsRef<Path>, outcome: &TrainOutcome) -> Result<()> {
    let dir = run_dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    save_checkpoint(&outcome.best, dir.join(BEST_CHECKPOINT))?;
    save_checkpoint(&outcome.last, dir.join(LAST_CHECKPOINT))?;
    let history = serde_json::to_string_pretty(&outcome.history)? + "\n";
    let p = dir.join(HISTORY_FILE);
    fs::write(&p, history).map_err(|e| Error::io(&p, e))?;
    let timing = serde_json::to_string_pretty(&serde_json::json!({ "epoch_seconds": outcome.history.wall_times() }))?;
    let p = dir.join(TIMING_FILE);
    fs::write(&p, timing + "\n").map_err(|e| Error::io(&p, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nce_loss_hand_values() {
        assert!((nce_loss(&[0.5], &[0.5]).unwrap() - 1.3863).abs() < 1e-4);
        assert!((nce_loss(&[0.9, 0.9], &[0.1]).unwrap() - 0.2107).abs() < 1e-4);
        assert!(nce_loss(&[1.0 - 1e-12], &[1e-12]).unwrap() < 1e-9);
    }

    #[test]
    fn nce_loss_errors() {
        assert!(nce_loss(&[], &[0.5]).is_err());
        assert!(nce_loss(&[0.5], &[]).is_err());
        assert!(nce_loss(&[1.0], &[0.5]).is_err());
        assert!(nce_loss(&[0.5], &[0.0]).is_err());
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let hp = Hyperparams {
            learning_rate: 0.01,
            ..Default::default()
        };
        let mut adam = Adam::new(&hp, 2);
        let mut p = [1.0, -1.0];
        adam.step(&mut p, &[3.0, -0.5]);
        assert!((p[0] - 0.99).abs() < 1e-9);
        assert!((p[1] + 0.99).abs() < 1e-9);
    }

    #[test]
    fn hyperparam_validation() {
        assert!(Hyperparams::default().validate().is_ok());
        assert!(Hyperparams {
            learning_rate: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(Hyperparams {
            batch_size: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(Hyperparams {
            beta2: 1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }
}
