//! Loss, optimizer, learning-rate schedule, DropToken and the training loop.

use std::f64::consts::PI;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalkit::{evaluate, predict, GenerationConfig, Target};
use crate::numcore::{derive_seed, hash_str, BoundParams, ParamStore, Precision, Real, Tape, Tensor, Var};
use crate::pte::{init_params, record_forward, ForwardOptions, ForwardVars, Modality, PTEConfig, SequenceLayout};
use crate::tokens::ModelInput;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_epochs: usize,
    /// Probability of removing each object token from attention.
    pub droptoken_rate: f64,
    /// Element-wise dropout on the embedded input sequence.
    pub dropout_rate: f64,
    pub seed: u64,
    pub precision: Precision,
    /// Candidates drawn for the per-epoch validation ED.
    pub val_candidates: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 5e-4,
            weight_decay: 1e-4,
            momentum: 0.9,
            batch_size: 32,
            epochs: 30,
            warmup_epochs: 3,
            droptoken_rate: 0.5,
            dropout_rate: 0.1,
            seed: 0,
            precision: Precision::Fast,
            val_candidates: 5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.val_candidates == 0 {
            return Err(Error::Parameter("epochs, batch_size and val_candidates must be positive".into()));
        }
        if self.warmup_epochs >= self.epochs {
            return Err(Error::Parameter(format!(
                "warmup_epochs {} must be below epochs {}",
                self.warmup_epochs, self.epochs
            )));
        }
        for (name, r) in [("droptoken_rate", self.droptoken_rate), ("dropout_rate", self.dropout_rate)] {
            if !(0.0..1.0).contains(&r) {
                return Err(Error::Parameter(format!("{name} {r} outside [0, 1)")));
            }
        }
        if !(self.base_lr >= 0.0 && self.weight_decay >= 0.0 && (0.0..1.0).contains(&self.momentum)) {
            return Err(Error::Parameter("base_lr, weight_decay must be >= 0 and momentum in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Cross-entropy of one head pair, averaged over steps and the two heads.
fn head_pair_loss<T: Real>(
    tape: &mut Tape<T>,
    verb_logits: Var,
    noun_logits: Var,
    verbs: &[usize],
    nouns: &[usize],
) -> Result<Var> {
    let v = tape.cross_entropy(verb_logits, verbs)?;
    let n = tape.cross_entropy(noun_logits, nouns)?;
    let s = tape.add(v, n)?;
    Ok(tape.scale(s, T::lit(0.5)))
}

/// Training loss of one recorded forward pass. With several branches each
/// is supervised on its own logits and the branch losses are averaged.
pub fn record_loss<T: Real>(tape: &mut Tape<T>, fwd: &ForwardVars, input: &ModelInput) -> Result<Var> {
    if input.target_verbs.len() != input.target_nouns.len() {
        return Err(Error::Dimension("verb and noun targets differ in length".into()));
    }
    let mut total = None;
    for b in &fwd.branches {
        let l = head_pair_loss(tape, b.verb_logits, b.noun_logits, &input.target_verbs, &input.target_nouns)?;
        total = Some(match total {
            None => l,
            Some(acc) => tape.add(acc, l)?,
        });
    }
    let total = total.ok_or_else(|| Error::Parameter("model has no branches".into()))?;
    Ok(tape.scale(total, T::lit(1.0 / fwd.branches.len() as f64)))
}

/// Mean softmax cross-entropy over examples, steps and both heads.
/// Each batch entry is `(verb_logits [Z, V], noun_logits [Z, N], verbs, nouns)`.
pub fn lta_loss<T: Real>(batch: &[(&Tensor<T>, &Tensor<T>, &[usize], &[usize])]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Parameter("empty batch".into()));
    }
    let mut sum = 0.0;
    for (v, n, vt, nt) in batch {
        if vt.len() != v.rows() || nt.len() != n.rows() {
            return Err(Error::Dimension("targets must have one id per step".into()));
        }
        let mut tape = Tape::new();
        let (v, n) = (tape.constant((*v).clone()), tape.constant((*n).clone()));
        let l = head_pair_loss(&mut tape, v, n, vt, nt)?;
        sum += tape.value(l).data()[0].as_f64();
    }
    Ok(sum / batch.len() as f64)
}

/// Linear warmup to `base_lr`, then cosine decay towards zero.
pub fn lr_at(step: usize, total_steps: usize, warmup_steps: usize, base_lr: f64) -> Result<f64> {
    if warmup_steps >= total_steps {
        return Err(Error::Parameter(format!(
            "warmup {warmup_steps} steps must be below total {total_steps}"
        )));
    }
    if step >= total_steps {
        return Err(Error::Parameter(format!("step {step} beyond schedule of {total_steps}")));
    }
    if step < warmup_steps {
        return Ok(base_lr * (step + 1) as f64 / warmup_steps as f64);
    }
    let t = (step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
    Ok(base_lr * 0.5 * (1.0 + (PI * t).cos()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    pub velocity: ParamStore<T>,
    pub step: u64,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        OptimizerState {
            velocity: params.zeros_like(),
            step: 0,
        }
    }
}

/// One SGD step with Nesterov momentum and L2 weight decay:
/// `g = ∇ + wd·θ`, `v = μv + g`, `θ -= lr·(g + μv)`.
///
/// Non-finite gradients abort the step before anything is modified.
pub fn sgd_nesterov_step<T: Real>(
    params: &mut ParamStore<T>,
    grads: &ParamStore<T>,
    state: &mut OptimizerState<T>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if !grads.is_finite() {
        return Err(Error::Numeric("non-finite gradient".into()));
    }
    if params.len() != grads.len() {
        return Err(Error::Dimension("gradient store does not mirror parameters".into()));
    }
    for (name, theta) in params.iter() {
        if grads.get(name)?.shape() != theta.shape() || state.velocity.get(name)?.shape() != theta.shape() {
            return Err(Error::Dimension(format!("shape mismatch for `{name}`")));
        }
    }
    let (lr, mu, wd) = (T::lit(lr), T::lit(momentum), T::lit(weight_decay));
    for (name, theta) in params.iter_mut() {
        let g = grads.get(name)?;
        let v = state.velocity.get_mut(name)?;
        for ((t, gi), vi) in theta.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            let g = *gi + wd * *t;
            *vi = mu * *vi + g;
            *t -= lr * (g + mu * *vi);
        }
    }
    state.step += 1;
    Ok(())
}

/// Bernoulli(`rate`) draws for `n` object tokens; `true` means dropped.
pub fn object_drop_mask(n: usize, rate: f64, seed: u64) -> Result<Vec<bool>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Parameter(format!("droptoken rate {rate} outside [0, 1)")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n).map(|_| rate > 0.0 && rng.random_bool(rate)).collect())
}

/// Mask object tokens of `layout` independently with probability `rate`.
/// Clip and prediction tokens are never touched; outside training this is
/// the identity.
pub fn drop_token(layout: &SequenceLayout, rate: f64, seed: u64, training: bool) -> Result<SequenceLayout> {
    let n = layout.tokens.iter().filter(|t| t.modality == Modality::Object).count();
    let draws = object_drop_mask(n, rate, seed)?;
    let mut out = layout.clone();
    if !training {
        return Ok(out);
    }
    let mut draws = draws.into_iter();
    for (t, m) in out.tokens.iter().zip(out.mask.iter_mut()) {
        if t.modality == Modality::Object && draws.next().expect("one draw per object token") {
            *m = true;
        }
    }
    Ok(out)
}

/// Training-time stochasticity for one example in one epoch.
pub fn training_options(model: &PTEConfig, cfg: &TrainConfig, input: &ModelInput, epoch: usize) -> Result<ForwardOptions> {
    let seed = derive_seed(cfg.seed, &[3, epoch as u64, hash_str(&input.example_id)]);
    let uses_objects = model.branches().iter().any(|b| b.objects);
    let dropped_objects = if uses_objects && cfg.droptoken_rate > 0.0 {
        Some(object_drop_mask(input.slots.len(), cfg.droptoken_rate, derive_seed(seed, &[0]))?)
    } else {
        None
    };
    Ok(ForwardOptions {
        training: true,
        token_dropout: cfg.dropout_rate,
        dropped_objects,
        seed: derive_seed(seed, &[1]),
    })
}

/// Loss and parameter gradient of one example.
pub fn example_gradient<T: Real>(
    params: &ParamStore<T>,
    model: &PTEConfig,
    input: &ModelInput,
    opts: &ForwardOptions,
) -> Result<(f64, ParamStore<T>)> {
    let mut tape = Tape::new();
    let bound: BoundParams = tape.bind(params);
    let fwd = record_forward(&mut tape, &bound, model, input, opts)?;
    let loss = record_loss(&mut tape, &fwd, input)?;
    let value = tape.value(loss).data()[0].as_f64();
    if !value.is_finite() {
        return Err(Error::Numeric(format!("loss evaluated to {value}")));
    }
    let grads = bound.gradients(params, &tape.backward(loss)?)?;
    Ok((value, grads))
}

/// Mean loss and gradient over a batch. Examples run in parallel; the
/// reduction is sequential in batch order so results do not depend on
/// scheduling.
pub fn batch_gradient<T: Real>(
    params: &ParamStore<T>,
    model: &PTEConfig,
    batch: &[(&ModelInput, ForwardOptions)],
) -> Result<(f64, ParamStore<T>)> {
    let parts: Vec<(f64, ParamStore<T>)> = batch
        .par_iter()
        .map(|(input, opts)| example_gradient(params, model, input, opts))
        .collect::<Result<_>>()?;
    let scale = T::lit(1.0 / batch.len() as f64);
    let mut total = params.zeros_like();
    let mut loss = 0.0;
    for (l, g) in &parts {
        loss += l;
        total.add_scaled(g, scale)?;
    }
    Ok((loss / batch.len() as f64, total))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Learning rate of the epoch's first step.
    pub lr: f64,
    pub train_loss: f64,
    pub val_verb_ed: Option<f64>,
    pub val_noun_ed: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct FitResult<T> {
    /// Final parameters, or the last finite ones if training diverged.
    pub params: ParamStore<T>,
    pub log: Vec<EpochLog>,
    /// Epoch at which a non-finite loss or gradient stopped training.
    pub diverged_at: Option<usize>,
}

/// Validation ED@Z of verbs and nouns.
pub fn validation_ed<T: Real>(
    params: &ParamStore<T>,
    model: &PTEConfig,
    val: &[ModelInput],
    gen: &GenerationConfig,
) -> Result<(f64, f64)> {
    let preds = predict(params, model, val, gen)?;
    let targets: Vec<Target> = val.iter().map(Target::from_input).collect();
    let r = evaluate(&preds, &targets, model.verb_count, model.noun_count)?;
    Ok((r.verb_ed, r.noun_ed))
}

/// Train from a seeded initialisation.
pub fn fit<T: Real>(train: &[ModelInput], val: &[ModelInput], model: &PTEConfig, cfg: &TrainConfig) -> Result<FitResult<T>> {
    let params = init_params(model, derive_seed(cfg.seed, &[1]))?;
    fit_from(params, train, val, model, cfg)
}

/// Train starting from `params`.
pub fn fit_from<T: Real>(
    mut params: ParamStore<T>,
    train: &[ModelInput],
    val: &[ModelInput],
    model: &PTEConfig,
    cfg: &TrainConfig,
) -> Result<FitResult<T>> {
    model.validate()?;
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Parameter("empty training split".into()));
    }
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let total = steps_per_epoch * cfg.epochs;
    let warmup = steps_per_epoch * cfg.warmup_epochs;
    let gen = GenerationConfig {
        k: cfg.val_candidates,
        temperature: 1.0,
        seed: cfg.seed,
    };
    let mut state = OptimizerState::new(&params);
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[2, epoch as u64]));
        order.shuffle(&mut rng);
        let last_good = params.clone();
        let mut loss_sum = 0.0;
        let mut first_lr = None;
        let mut failed = None;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let lr = lr_at(epoch * steps_per_epoch + b, total, warmup, cfg.base_lr)?;
            first_lr.get_or_insert(lr);
            let batch = chunk
                .iter()
                .map(|&i| Ok((&train[i], training_options(model, cfg, &train[i], epoch)?)))
                .collect::<Result<Vec<_>>>()?;
            let step = batch_gradient(&params, model, &batch)
                .and_then(|(loss, grads)| {
                    sgd_nesterov_step(&mut params, &grads, &mut state, lr, cfg.momentum, cfg.weight_decay)?;
                    Ok(loss)
                });
            match step {
                Ok(loss) => loss_sum += loss * chunk.len() as f64,
                Err(Error::Numeric(msg)) => {
                    failed = Some(msg);
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        if let Some(msg) = failed.or_else(|| (!params.is_finite()).then(|| "non-finite parameters".into())) {
            warn!("epoch {epoch}: {msg}; keeping parameters from the previous epoch");
            return Ok(FitResult {
                params: last_good,
                log,
                diverged_at: Some(epoch),
            });
        }
        let (val_verb_ed, val_noun_ed) = if val.is_empty() {
            (None, None)
        } else {
            let (v, n) = validation_ed(&params, model, val, &gen)?;
            (Some(v), Some(n))
        };
        let entry = EpochLog {
            epoch,
            lr: first_lr.unwrap_or(0.0),
            train_loss: loss_sum / train.len() as f64,
            val_verb_ed,
            val_noun_ed,
        };
        info!(
            "epoch {} lr {:.3e} loss {:.5} val verb {:?} noun {:?}",
            entry.epoch, entry.lr, entry.train_loss, entry.val_verb_ed, entry.val_noun_ed
        );
        log.push(entry);
    }
    Ok(FitResult {
        params,
        log,
        diverged_at: None,
    })
}
