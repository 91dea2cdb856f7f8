//! Sequential training over a task order with per-phase freezing and an
//! evaluation sweep after every phase.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::adapters::Architecture;
use crate::autodiff::Tape;
use crate::config::{Method, ModelConfig, TrainConfig};
use crate::data::{Example, TaskSpec};
use crate::error::{Error, Result};
use crate::metrics::AccuracyMatrix;
use crate::model::{argmax, Mode, Model};
use crate::optim::Optimizer;
use crate::par::{self, Execution};
use crate::params::{Group, ParamId};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub fn architecture_for(method: Method) -> Architecture {
    match method {
        Method::MoeCl | Method::MoeClNoGan => Architecture::Mixture,
        Method::SequentialFt => Architecture::SharedOnly,
        Method::PerTaskFt => Architecture::SpecificOnly,
    }
}

/// Tensors a phase training `task` may update.
pub fn trainable_mask(model: &Model, task: usize, train_discriminator: bool) -> Vec<bool> {
    model
        .store
        .entries()
        .iter()
        .map(|e| match e.group {
            Group::Backbone => false,
            Group::Shared { .. } => true,
            Group::Specific { task: t, .. } | Group::Gate { task: t, .. } | Group::Head { task: t } => t == task,
            Group::Discriminator => train_discriminator,
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub phase: usize,
    pub task: usize,
    pub l_sft: f64,
    pub l_gan: f64,
    /// `l_sft - gan_weight * l_gan`.
    pub loss: f64,
    pub disc_acc: f64,
    pub gate_dev: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseLog {
    pub phase: usize,
    pub task: usize,
    pub steps: Vec<StepLog>,
}

/// Content hashes of every tensor before and after one phase.
#[derive(Clone, Debug, PartialEq)]
pub struct PhaseHashes {
    pub task: usize,
    pub trainable: Vec<bool>,
    pub before: Vec<[u8; 32]>,
    pub after: Vec<[u8; 32]>,
}

impl PhaseHashes {
    /// Names of frozen tensors whose content changed.
    pub fn frozen_violations<'a>(&self, model: &'a Model) -> Vec<&'a str> {
        (0..self.before.len())
            .filter(|&i| !self.trainable[i] && self.before[i] != self.after[i])
            .map(|i| model.store.entries()[i].name.as_str())
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: Model,
    pub optimizer: Optimizer,
    pub method: Method,
    pub phase: usize,
    pub step: usize,
    pub trained: Vec<usize>,
    pub phase_hashes: Vec<PhaseHashes>,
}

impl TrainState {
    pub fn new(model_cfg: &ModelConfig, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = Model::new(model_cfg, architecture_for(cfg.method))?;
        Ok(Self {
            model,
            optimizer: Optimizer::new(cfg.optimizer, cfg.learning_rate),
            method: cfg.method,
            phase: 0,
            step: 0,
            trained: Vec::new(),
            phase_hashes: Vec::new(),
        })
    }
}

/// Per-step statistics averaged over a batch.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BatchStats {
    pub l_sft: f64,
    pub l_gan: f64,
    pub disc_acc: f64,
    pub gate_dev: f64,
}

struct ExampleGrad {
    grads: BTreeMap<ParamId, Tensor>,
    l_sft: f64,
    l_gan: f64,
    disc_hits: usize,
    disc_total: usize,
    gate_dev: f64,
}

/// Batch-mean gradient of `L_SFT + L_GAN` with gradient reversal at
/// `gan_weight`; the discriminator term is left out when `gan_weight` is 0.
///
/// Examples are differentiated independently (in parallel when enabled) and
/// summed in batch order, so the result does not depend on scheduling.
pub fn batch_gradients(
    model: &Model,
    mask: &[bool],
    batch: &[&Example],
    task: usize,
    gan_weight: f64,
    exec: Execution,
) -> Result<(BTreeMap<ParamId, Tensor>, BatchStats)> {
    if batch.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    let per_example = par::map(exec, batch, |ex| -> Result<ExampleGrad> {
        let mut tape = Tape::with_trainable(&model.store, mask.to_vec());
        let out = model.forward_with_adapters(&mut tape, &ex.tokens, task, Mode::Train { grl_lambda: gan_weight })?;
        let sft = tape.cross_entropy(out.logits, &[ex.label])?;
        let l_sft = tape.value(sft).item()?;
        let mut loss = sft;
        let mut l_gan = 0.0;
        let mut disc_hits = 0;
        for &dl in &out.disc_logits {
            let ce = tape.cross_entropy(dl, &[task])?;
            l_gan += tape.value(ce).item()?;
            if argmax(tape.value(dl).data()) == task {
                disc_hits += 1;
            }
            if gan_weight > 0.0 {
                loss = tape.add(loss, ce)?;
            }
        }
        let grads = tape.backward(loss)?.into_params();
        Ok(ExampleGrad {
            grads,
            l_sft,
            l_gan,
            disc_hits,
            disc_total: out.disc_logits.len(),
            gate_dev: out.gate_deviation,
        })
    });

    let inv = 1.0 / batch.len() as f64;
    let mut sum: BTreeMap<ParamId, Tensor> = BTreeMap::new();
    let mut stats = BatchStats::default();
    let (mut hits, mut total) = (0usize, 0usize);
    for eg in per_example {
        let eg = eg?;
        for (id, g) in eg.grads {
            match sum.get_mut(&id) {
                Some(acc) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b),
                None => {
                    sum.insert(id, g);
                }
            }
        }
        stats.l_sft += eg.l_sft;
        stats.l_gan += eg.l_gan;
        stats.gate_dev = stats.gate_dev.max(eg.gate_dev);
        hits += eg.disc_hits;
        total += eg.disc_total;
    }
    for g in sum.values_mut() {
        g.data_mut().iter_mut().for_each(|v| *v *= inv);
    }
    stats.l_sft *= inv;
    stats.l_gan *= inv;
    stats.disc_acc = if total > 0 { hits as f64 / total as f64 } else { 0.0 };
    Ok((sum, stats))
}

/// Trains one task: `epochs` passes of shuffled single-task batches, one
/// optimizer step per batch. Tensors outside the phase's trainable set are
/// verified unchanged by content hash.
pub fn train_task(state: &mut TrainState, task: &TaskSpec, cfg: &TrainConfig) -> Result<PhaseLog> {
    if state.trained.contains(&task.id) {
        return Err(Error::Contract(format!("task {} already trained in this run", task.id)));
    }
    if task.id >= state.model.n_tasks() {
        return Err(Error::Task { task: task.id, n_tasks: state.model.n_tasks() });
    }
    if task.train.is_empty() {
        return Err(Error::Data(format!("task {} has an empty training split", task.name)));
    }
    let gan_weight = cfg.effective_gan_weight();
    let train_disc = gan_weight > 0.0 && state.model.adapters.discriminator.is_some();
    let mask = trainable_mask(&state.model, task.id, train_disc);
    let before = state.model.parameter_hashes();
    state.optimizer.lr = cfg.learning_rate;
    state.optimizer.kind = cfg.optimizer;

    let mut log = PhaseLog { phase: state.phase, task: task.id, steps: Vec::new() };
    for epoch in 0..cfg.epochs {
        let mut idx: Vec<usize> = (0..task.train.len()).collect();
        Rng::for_label(cfg.seed, &format!("shuffle/task{}/epoch{epoch}", task.id)).shuffle(&mut idx);
        for chunk in idx.chunks(cfg.batch_size) {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &task.train[i]).collect();
            let (grads, stats) = match batch_gradients(&state.model, &mask, &batch, task.id, gan_weight, cfg.execution) {
                Err(Error::Numeric(_)) => return Err(Error::Diverged { step: state.step, loss: f64::NAN }),
                other => other?,
            };
            let loss = crate::adapters::total_loss(stats.l_sft, stats.l_gan, gan_weight);
            if !loss.is_finite() {
                return Err(Error::Diverged { step: state.step, loss });
            }
            state.optimizer.step(&mut state.model.store, &grads);
            log.steps.push(StepLog {
                step: state.step,
                phase: state.phase,
                task: task.id,
                l_sft: stats.l_sft,
                l_gan: stats.l_gan,
                loss,
                disc_acc: stats.disc_acc,
                gate_dev: stats.gate_dev,
            });
            state.step += 1;
        }
    }

    let hashes = PhaseHashes {
        task: task.id,
        trainable: mask,
        before,
        after: state.model.parameter_hashes(),
    };
    let violations = hashes.frozen_violations(&state.model);
    if !violations.is_empty() {
        return Err(Error::Contract(format!("frozen tensors changed: {violations:?}")));
    }
    state.phase_hashes.push(hashes);
    state.trained.push(task.id);
    state.phase += 1;
    Ok(log)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalOutcome {
    pub accuracy: f64,
    pub gate_dev: f64,
}

pub fn evaluate_detailed(model: &Model, task: &TaskSpec, exec: Execution) -> Result<EvalOutcome> {
    if task.test.is_empty() {
        return Err(Error::Data(format!("task {} has an empty test split", task.name)));
    }
    let results = par::map(exec, &task.test, |ex| -> Result<(bool, f64)> {
        let inf = model.infer(&ex.tokens, task.id)?;
        Ok((argmax(&inf.logits) == ex.label, inf.gate_deviation))
    });
    let mut correct = 0usize;
    let mut gate_dev = 0.0f64;
    for r in results {
        let (ok, dev) = r?;
        correct += ok as usize;
        gate_dev = gate_dev.max(dev);
    }
    Ok(EvalOutcome {
        accuracy: correct as f64 / task.test.len() as f64,
        gate_dev,
    })
}

/// Test accuracy of `task`'s head; argmax ties go to the lowest class.
pub fn evaluate(model: &Model, task: &TaskSpec) -> Result<f64> {
    evaluate_detailed(model, task, Execution::default()).map(|o| o.accuracy)
}

#[derive(Clone, Debug)]
pub struct SequenceOutcome {
    pub matrix: AccuracyMatrix,
    pub logs: Vec<PhaseLog>,
    pub state: TrainState,
    /// Largest gate deviation seen by any post-phase evaluation.
    pub eval_gate_dev: f64,
}

/// Hook called after each phase with the state, that phase's log and its
/// accuracy row.
pub type PhaseHook<'a> = dyn FnMut(&TrainState, &PhaseLog, &[f64]) -> Result<()> + 'a;

pub fn train_sequence(tasks: &[TaskSpec], model_cfg: &ModelConfig, cfg: &TrainConfig) -> Result<SequenceOutcome> {
    train_sequence_with(tasks, model_cfg, cfg, &mut |_, _, _| Ok(()))
}

pub fn train_sequence_with(
    tasks: &[TaskSpec],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    on_phase: &mut PhaseHook<'_>,
) -> Result<SequenceOutcome> {
    if tasks.len() != model_cfg.n_tasks() {
        return Err(Error::Config(format!(
            "{} tasks supplied for a model configured with {}",
            tasks.len(),
            model_cfg.n_tasks()
        )));
    }
    for (i, t) in tasks.iter().enumerate() {
        if t.id != i || t.num_classes != model_cfg.task_classes[i] {
            return Err(Error::Config(format!("task {} does not match model configuration", t.name)));
        }
    }
    let order = cfg.resolved_order(tasks.len())?;
    let mut state = TrainState::new(model_cfg, cfg)?;
    let mut matrix = AccuracyMatrix::new(order.clone());
    let mut logs = Vec::with_capacity(order.len());
    let mut eval_gate_dev = 0.0f64;
    for &t in &order {
        let log = train_task(&mut state, &tasks[t], cfg)?;
        let mut row = Vec::with_capacity(tasks.len());
        for task in tasks {
            let o = evaluate_detailed(&state.model, task, cfg.execution)?;
            eval_gate_dev = eval_gate_dev.max(o.gate_dev);
            row.push(o.accuracy);
        }
        on_phase(&state, &log, &row)?;
        matrix.push_row(row)?;
        logs.push(log);
    }
    Ok(SequenceOutcome { matrix, logs, state, eval_gate_dev })
}

/// Runs one of the comparison methods over the task order in `cfg`.
pub fn run_baseline(method: Method, tasks: &[TaskSpec], model_cfg: &ModelConfig, cfg: &TrainConfig) -> Result<AccuracyMatrix> {
    if method == Method::MoeCl {
        return Err(Error::Config("moe-cl is not a baseline method".into()));
    }
    let cfg = TrainConfig { method, ..cfg.clone() };
    Ok(train_sequence(tasks, model_cfg, &cfg)?.matrix)
}
