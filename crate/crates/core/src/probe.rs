//! Post-hoc linear probe for task identity in shared representations.

use std::collections::BTreeMap;

use crate::autodiff::Tape;
use crate::config::OptimizerKind;
use crate::data::TaskSpec;
use crate::error::{Error, Result};
use crate::model::{argmax, Model};
use crate::optim::Optimizer;
use crate::par::{self, Execution};
use crate::params::{Group, ParamStore};
use crate::tensor::Tensor;

pub const PROBE_STEPS: usize = 300;
const PROBE_LR: f64 = 0.05;

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeReport {
    /// Held-out accuracy per discriminator site.
    pub per_site: Vec<f64>,
    pub mean: f64,
}

fn standardize(fit: &[Vec<f64>], other: &[Vec<f64>]) -> (Tensor, Tensor) {
    let d = fit[0].len();
    let n = fit.len() as f64;
    let mut mean = vec![0.0; d];
    for x in fit {
        mean.iter_mut().zip(x).for_each(|(m, v)| *m += v / n);
    }
    let mut sd = vec![0.0; d];
    for x in fit {
        sd.iter_mut().zip(x).zip(&mean).for_each(|((s, v), m)| *s += (v - m) * (v - m) / n);
    }
    let sd: Vec<f64> = sd.into_iter().map(|s| s.sqrt().max(1e-12)).collect();
    let mk = |xs: &[Vec<f64>]| {
        let data = xs
            .iter()
            .flat_map(|x| x.iter().zip(&mean).zip(&sd).map(|((v, m), s)| (v - m) / s))
            .collect();
        Tensor::new(vec![xs.len(), d], data).expect("rectangular features")
    };
    (mk(fit), mk(other))
}

/// Fits a softmax-regression probe (weight `classes x d` plus bias) on
/// standardized features with full-batch Adam, then returns its accuracy on
/// the evaluation set.
pub fn fit_linear_probe(
    fit_x: &[Vec<f64>],
    fit_y: &[usize],
    eval_x: &[Vec<f64>],
    eval_y: &[usize],
    classes: usize,
    steps: usize,
) -> Result<f64> {
    if fit_x.is_empty() || eval_x.is_empty() || fit_x.len() != fit_y.len() || eval_x.len() != eval_y.len() {
        return Err(Error::Data("probe needs non-empty, labelled fit and eval sets".into()));
    }
    let (fx, ex) = standardize(fit_x, eval_x);
    let d = fx.cols();
    let mut store = ParamStore::new();
    let w = store.insert("probe.weight", Group::Discriminator, Tensor::zeros(&[classes, d]));
    let b = store.insert("probe.bias", Group::Discriminator, Tensor::zeros(&[1, classes]));
    let mut opt = Optimizer::new(OptimizerKind::default(), PROBE_LR);
    for _ in 0..steps {
        let grads: BTreeMap<_, _> = {
            let mut tape = Tape::with_trainable(&store, vec![true, true]);
            let x = tape.constant(fx.clone());
            let (wv, bv) = (tape.param(w), tape.param(b));
            let logits = tape.matmul_t(x, wv)?;
            let logits = tape.add_row(logits, bv)?;
            let loss = tape.cross_entropy(logits, fit_y)?;
            tape.backward(loss)?.into_params()
        };
        opt.step(&mut store, &grads);
    }
    let logits = ex.matmul(&store.get(w).transpose())?;
    let bias = store.get(b).data();
    let correct = (0..logits.rows())
        .filter(|&r| {
            let row: Vec<f64> = logits.row_slice(r).iter().zip(bias).map(|(l, b)| l + b).collect();
            argmax(&row) == eval_y[r]
        })
        .count();
    Ok(correct as f64 / eval_y.len() as f64)
}

/// Pooled shared vectors indexed `[site][example]`.
pub type SiteFeatures = Vec<Vec<Vec<f64>>>;

/// Pooled shared representations of `split` for every task, one feature
/// list per discriminator site, with task ids as labels.
pub fn shared_features(
    model: &Model,
    tasks: &[TaskSpec],
    split: impl Fn(&TaskSpec) -> &[crate::data::Example],
    exec: Execution,
) -> Result<(SiteFeatures, Vec<usize>)> {
    let items: Vec<(usize, &[u32])> = tasks
        .iter()
        .flat_map(|t| split(t).iter().map(move |ex| (t.id, ex.tokens.as_slice())))
        .collect();
    let pooled = par::map(exec, &items, |(task, tokens)| model.infer(tokens, *task).map(|i| i.shared_pooled));
    let mut per_site: Vec<Vec<Vec<f64>>> = Vec::new();
    for p in pooled {
        let p = p?;
        if per_site.is_empty() {
            per_site = vec![Vec::new(); p.len()];
        }
        for (s, v) in p.into_iter().enumerate() {
            per_site[s].push(v);
        }
    }
    Ok((per_site, items.iter().map(|(t, _)| *t).collect()))
}

/// Task-identification accuracy of fresh linear probes on the shared
/// representations: fitted on validation splits, scored on test splits.
/// Never mutates the model.
pub fn probe_discriminator(model: &Model, tasks: &[TaskSpec], exec: Execution) -> Result<ProbeReport> {
    if tasks.len() < 2 {
        return Err(Error::Contract("probing needs at least 2 tasks".into()));
    }
    let (fit, fit_y) = shared_features(model, tasks, |t| &t.val, exec)?;
    let (eval, eval_y) = shared_features(model, tasks, |t| &t.test, exec)?;
    if fit.is_empty() {
        return Err(Error::Contract("model has no shared representations to probe".into()));
    }
    let per_site = fit
        .iter()
        .zip(&eval)
        .map(|(f, e)| fit_linear_probe(f, &fit_y, e, &eval_y, tasks.len(), PROBE_STEPS))
        .collect::<Result<Vec<_>>>()?;
    let mean = per_site.iter().sum::<f64>() / per_site.len() as f64;
    Ok(ProbeReport { per_site, mean })
}
