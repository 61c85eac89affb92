use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::lora::AdapterSet;
use crate::model::{Gradients, Optimiser, OptimiserConfig, ToyModel};
use crate::speakersim::Utterance;
use crate::tensor::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Base frozen; only adapter factors move.
    LoraOnly,
    /// Every weight and bias of a full-precision model moves.
    FullFinetune,
}

/// What `keep_best` minimises.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    DevLoss,
    /// Dev error rate; ties keep the earlier step.
    DevError,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub optimiser: OptimiserConfig,
    pub seed: u64,
    pub mode: TrainMode,
    /// Dev loss is measured every this many steps (and after the last step).
    pub eval_every: usize,
    /// Return the parameters of the best dev checkpoint seen (step 0
    /// included) instead of the final ones.
    pub keep_best: bool,
    /// What "best" means for `keep_best`.
    pub select_by: Selection,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            steps: 300,
            batch_size: 16,
            optimiser: OptimiserConfig::default(),
            seed: 0,
            mode: TrainMode::LoraOnly,
            eval_every: 50,
            keep_best: false,
            select_by: Selection::DevLoss,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) || self.batch_size == 0 || self.eval_every == 0 {
            return Err(invalid!("learning rate, batch size and eval interval must be positive"));
        }
        if let OptimiserConfig::Adam { beta1, beta2, eps } = self.optimiser {
            if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || eps <= 0.0 {
                return Err(invalid!("invalid Adam parameters"));
            }
        }
        Ok(())
    }
}

/// One line of a loss curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub train_loss: Option<f64>,
    pub dev_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    /// Mini-batch loss before each update.
    pub train_losses: Vec<f64>,
    /// `(step, dev loss)`; step 0 is the starting point.
    pub dev_curve: Vec<(usize, f64)>,
    /// Dev error rate in percent at the steps of `dev_curve`.
    pub dev_errors: Vec<f64>,
    /// Dev loss of the returned parameters.
    pub final_dev_loss: Option<f64>,
    /// Step whose parameters were returned.
    pub selected_step: usize,
}

impl TrainOutcome {
    pub fn initial_dev_loss(&self) -> Option<f64> {
        self.dev_curve.first().map(|&(_, l)| l)
    }

    pub fn records(&self) -> Vec<LossRecord> {
        let mut out: Vec<LossRecord> = self
            .train_losses
            .iter()
            .enumerate()
            .map(|(i, &l)| LossRecord {
                step: i + 1,
                train_loss: Some(l),
                dev_loss: None,
            })
            .collect();
        for &(step, dev) in &self.dev_curve {
            if step == 0 {
                out.insert(
                    0,
                    LossRecord {
                        step: 0,
                        train_loss: None,
                        dev_loss: Some(dev),
                    },
                );
            } else if let Some(r) = out.iter_mut().find(|r| r.step == step) {
                r.dev_loss = Some(dev);
            }
        }
        out
    }
}

struct BatchSampler {
    order: Vec<usize>,
    cursor: usize,
    rng: Rng,
}

impl BatchSampler {
    fn new(n: usize, seed: u64) -> Self {
        let mut rng = Rng::with_stream(seed, 0xBA7C);
        let mut order: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut order);
        Self { order, cursor: 0, rng }
    }

    fn next(&mut self, size: usize) -> Vec<usize> {
        let size = size.min(self.order.len());
        if self.cursor + size > self.order.len() {
            self.rng.shuffle(&mut self.order);
            self.cursor = 0;
        }
        let batch = self.order[self.cursor..self.cursor + size].to_vec();
        self.cursor += size;
        batch
    }
}

fn dev_metrics(model: &ToyModel, adapters: Option<&AdapterSet>, dev: &[Utterance]) -> Result<Option<(f64, f64)>> {
    if dev.is_empty() {
        return Ok(None);
    }
    let (mut loss, mut wrong) = (0.0, 0);
    for chunk in dev.chunks(256) {
        let refs: Vec<&Utterance> = chunk.iter().collect();
        let (l, w) = model.loss_and_errors(adapters, &refs)?;
        loss += l * chunk.len() as f64;
        wrong += w;
    }
    let n = dev.len() as f64;
    Ok(Some((loss / n, 100.0 * wrong as f64 / n)))
}

/// Shared loop: `step_fn` computes loss and applies one update for a batch,
/// `dev_fn` measures the current dev loss, `snapshot` / `restore` save and
/// reinstate the best parameters.
fn run_loop<S>(
    n_train: usize,
    cfg: &TrainConfig,
    mut step_fn: impl FnMut(&[&Utterance], &mut Optimiser) -> Result<f64>,
    mut dev_fn: impl FnMut() -> Result<Option<(f64, f64)>>,
    mut snapshot: impl FnMut() -> S,
    train: &[Utterance],
    restore: impl FnOnce(S),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.steps > 0 && n_train == 0 {
        return Err(invalid!("cannot train on an empty set"));
    }
    let mut optimiser = Optimiser::new(cfg.optimiser, cfg.lr);
    let mut sampler = BatchSampler::new(n_train, cfg.seed);
    let mut train_losses = Vec::with_capacity(cfg.steps);
    let mut dev_curve = Vec::new();
    let mut dev_errors = Vec::new();
    let mut best: Option<((f64, f64), usize, S)> = None;
    // Compared lexicographically; only a strict improvement replaces the best.
    let key = |loss: f64, err: f64| match cfg.select_by {
        Selection::DevLoss => (loss, 0.0),
        Selection::DevError => (err, 0.0),
    };

    let mut record_dev = |step: usize,
                          dev_curve: &mut Vec<(usize, f64)>,
                          dev_errors: &mut Vec<f64>,
                          best: &mut Option<((f64, f64), usize, S)>|
     -> Result<()> {
        if let Some((loss, err)) = dev_fn()? {
            dev_curve.push((step, loss));
            dev_errors.push(err);
            let k = key(loss, err);
            if cfg.keep_best && best.as_ref().is_none_or(|(b, _, _)| k < *b) {
                *best = Some((k, step, snapshot()));
            }
        }
        Ok(())
    };

    record_dev(0, &mut dev_curve, &mut dev_errors, &mut best)?;
    for step in 1..=cfg.steps {
        let idx = sampler.next(cfg.batch_size);
        let batch: Vec<&Utterance> = idx.iter().map(|&i| &train[i]).collect();
        train_losses.push(step_fn(&batch, &mut optimiser)?);
        if step % cfg.eval_every == 0 || step == cfg.steps {
            record_dev(step, &mut dev_curve, &mut dev_errors, &mut best)?;
        }
    }

    let (final_dev_loss, selected_step) = match best {
        Some((_, step, params)) => {
            restore(params);
            let i = dev_curve.iter().position(|&(s, _)| s == step).expect("selected step was recorded");
            (Some(dev_curve[i].1), step)
        }
        None => (dev_curve.last().map(|&(_, l)| l), cfg.steps),
    };
    Ok(TrainOutcome {
        train_losses,
        dev_curve,
        dev_errors,
        final_dev_loss,
        selected_step,
    })
}

/// Trains only the adapters; the model is borrowed immutably.
pub fn train_adapters(
    model: &ToyModel,
    adapters: &mut AdapterSet,
    train: &[Utterance],
    dev: &[Utterance],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    if adapters.is_empty() {
        return Err(invalid!("adapter-only training on a model without adapters"));
    }
    model.check_adapters(adapters)?;
    let cell = std::cell::RefCell::new(std::mem::replace(adapters, AdapterSet::new("")));
    let outcome = run_loop(
        train.len(),
        cfg,
        |batch, opt| {
            let mut set = cell.borrow_mut();
            let (loss, grads) = model.loss_and_grads(Some(&set), batch, false)?;
            let Gradients::Adapters(grads) = grads else {
                unreachable!("adapter-only backward")
            };
            let mut params: Vec<&mut [f32]> = Vec::new();
            let mut gs: Vec<&[f32]> = Vec::new();
            for (id, ad) in set.adapters.iter_mut() {
                let (ga, gb) = &grads[id];
                let (a, b) = ad.factors_mut();
                params.push(a.data_mut());
                gs.push(ga.data());
                params.push(b.data_mut());
                gs.push(gb.data());
            }
            opt.step(&mut params, &gs);
            Ok(loss)
        },
        || dev_metrics(model, Some(&cell.borrow()), dev),
        || cell.borrow().clone(),
        train,
        |best| *cell.borrow_mut() = best,
    )?;
    *adapters = cell.into_inner();
    Ok(outcome)
}

/// Full fine-tuning of every weight and bias of a full-precision model.
pub fn train_full(
    model: &mut ToyModel,
    train: &[Utterance],
    dev: &[Utterance],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    if model.is_quantised() {
        return Err(invalid!("full fine-tuning needs a full-precision model"));
    }
    let cell = std::cell::RefCell::new(model.clone());
    let outcome = run_loop(
        train.len(),
        cfg,
        |batch, opt| {
            let mut m = cell.borrow_mut();
            let (loss, grads) = m.loss_and_grads(None, batch, true)?;
            let Gradients::Full(grads) = grads else {
                unreachable!("full backward")
            };
            let mut params: Vec<&mut [f32]> = Vec::new();
            let mut gs: Vec<&[f32]> = Vec::new();
            for (i, layer) in m.layers_mut().iter_mut().enumerate() {
                let crate::model::LayerWeight::Dense(w) = &mut layer.weight else {
                    unreachable!("checked full precision")
                };
                params.push(w.data_mut());
                gs.push(grads.weights[i].data());
                if !layer.bias.is_empty() {
                    params.push(&mut layer.bias);
                    gs.push(&grads.biases[i]);
                }
            }
            opt.step(&mut params, &gs);
            Ok(loss)
        },
        || dev_metrics(&cell.borrow(), None, dev),
        || cell.borrow().clone(),
        train,
        |best| *cell.borrow_mut() = best,
    )?;
    *model = cell.into_inner();
    Ok(outcome)
}

/// Dispatches on `cfg.mode`. Adapter-only mode needs `adapters`.
pub fn train(
    model: &mut ToyModel,
    adapters: Option<&mut AdapterSet>,
    train_set: &[Utterance],
    dev: &[Utterance],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    match cfg.mode {
        TrainMode::LoraOnly => {
            let adapters = adapters
                .ok_or_else(|| invalid!("adapter-only training on a model without adapters"))?;
            train_adapters(model, adapters, train_set, dev, cfg)
        }
        TrainMode::FullFinetune => train_full(model, train_set, dev, cfg),
    }
}
