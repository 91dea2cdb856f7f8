//! Data preparation, single runs written to disk, and the multi-run
//! protocols: the method/order/seed grid and the paired GAN ablation.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{DataConfig, Method, ModelConfig, RunConfig, TrainConfig};
use crate::data::synth::gen_synthetic_tasks;
use crate::data::{encode_tasks, load_dataset_dir, TaskCorpus, TaskSpec, Vocab};
use crate::error::{Error, Result};
use crate::metrics::AccuracyMatrix;
use crate::par::{self, Execution};
use crate::probe::probe_discriminator;
use crate::report::RunSummary;
use crate::rundir::{summary_for, RunDir};
use crate::trainer::{train_sequence, train_sequence_with, PhaseLog, SequenceOutcome};

/// Tokenized tasks plus the vocabulary and a model configuration whose
/// vocabulary size and class counts match the data.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub tasks: Vec<TaskSpec>,
    pub vocab: Vocab,
    pub model: ModelConfig,
}

pub fn load_corpora(data: &DataConfig) -> Result<Vec<TaskCorpus>> {
    match (&data.dir, &data.synth) {
        (Some(dir), None) => load_dataset_dir(dir),
        (None, Some(synth)) => gen_synthetic_tasks(synth),
        (None, None) => gen_synthetic_tasks(&Default::default()),
        (Some(_), Some(_)) => Err(Error::Config("data.dir and data.synth are mutually exclusive".into())),
    }
}

/// Builds the vocabulary from training texts only.
pub fn prepare_corpora(corpora: &[TaskCorpus], data: &DataConfig, model: &ModelConfig) -> Result<Prepared> {
    let vocab = Vocab::build(corpora.iter().flat_map(|c| c.train.iter().map(|r| r.text.as_str())), data.vocab_cap);
    let model = ModelConfig {
        vocab_size: vocab.len(),
        task_classes: corpora.iter().map(|c| c.num_classes).collect(),
        ..model.clone()
    };
    model.validate()?;
    let tasks = encode_tasks(corpora, &vocab, model.max_seq_len);
    for t in &tasks {
        if t.train.is_empty() || t.test.is_empty() {
            return Err(Error::Data(format!("task {} has an empty split", t.name)));
        }
    }
    Ok(Prepared { tasks, vocab, model })
}

pub fn prepare(run: &RunConfig) -> Result<Prepared> {
    prepare_corpora(&load_corpora(&run.data)?, &run.data, &run.model)
}

/// Trains one run and writes its directory.
pub fn run_to_dir(run: &RunConfig, out: &Path) -> Result<(RunSummary, Vec<PhaseLog>)> {
    let prepared = prepare(run)?;
    let resolved = RunConfig {
        model: prepared.model.clone(),
        train: TrainConfig {
            order: Some(run.train.resolved_order(prepared.tasks.len())?),
            ..run.train.clone()
        },
        data: run.data.clone(),
    };
    let dir = RunDir::create(out)?;
    dir.write_config(&resolved)?;
    let outcome = train_sequence_with(&prepared.tasks, &resolved.model, &resolved.train, &mut |state, log, _| {
        dir.write_phase(state, log, &resolved, Some(&prepared.vocab))
    })?;
    let summary = summary_for(run.train.method.as_str(), &prepared.tasks, outcome.matrix);
    dir.write_summary(&summary)?;
    Ok((summary, outcome.logs))
}

/// Cyclic rotations of `0..n`, starting with the identity.
pub fn rotation_orders(n: usize) -> Vec<Vec<usize>> {
    (0..n).map(|s| (0..n).map(|i| (i + s) % n).collect()).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRun {
    pub method: Method,
    pub order: Vec<usize>,
    pub seed: u64,
    pub summary: RunSummary,
}

/// Trains every (method, order, seed) combination; `seed` sets both the
/// model initialization and the shuffling. Runs execute concurrently under
/// `exec`; results come back in grid order.
pub fn run_grid(
    tasks: &[TaskSpec],
    model: &ModelConfig,
    train: &TrainConfig,
    methods: &[Method],
    orders: &[Vec<usize>],
    seeds: &[u64],
    exec: Execution,
) -> Result<Vec<GridRun>> {
    let mut jobs = Vec::new();
    for &method in methods {
        for order in orders {
            for &seed in seeds {
                jobs.push((method, order.clone(), seed));
            }
        }
    }
    par::map(exec, &jobs, |(method, order, seed)| {
        let model = ModelConfig { seed: *seed, ..model.clone() };
        let train = TrainConfig {
            method: *method,
            order: Some(order.clone()),
            seed: *seed,
            ..train.clone()
        };
        let matrix: AccuracyMatrix = train_sequence(tasks, &model, &train)?.matrix;
        Ok(GridRun {
            method: *method,
            order: order.clone(),
            seed: *seed,
            summary: summary_for(method.as_str(), tasks, matrix),
        })
    })
    .into_iter()
    .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationPair {
    pub seed: u64,
    /// Mean probe accuracy with the discriminator disabled.
    pub probe_without: f64,
    /// Mean probe accuracy with the discriminator at `gan_weight`.
    pub probe_with: f64,
    pub acc_without: f64,
    pub acc_with: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub gan_weight: f64,
    pub pairs: Vec<AblationPair>,
    pub mean_probe_without: f64,
    pub mean_probe_with: f64,
    /// `mean_probe_without - mean_probe_with`; positive when adversarial
    /// training removed task information from the shared representations.
    pub gap: f64,
}

fn probe_run(tasks: &[TaskSpec], model: &ModelConfig, train: &TrainConfig) -> Result<(f64, f64)> {
    let SequenceOutcome { matrix, state, .. } = train_sequence(tasks, model, train)?;
    let probe = probe_discriminator(&state.model, tasks, train.execution)?;
    Ok((probe.mean, crate::metrics::avg_accuracy(&matrix)?))
}

/// Paired moe-cl runs per seed, identical except for the GAN weight (0 vs
/// `gan_weight`), each followed by a fresh probe of the shared
/// representations.
pub fn run_ablation(
    tasks: &[TaskSpec],
    model: &ModelConfig,
    train: &TrainConfig,
    gan_weight: f64,
    seeds: &[u64],
    exec: Execution,
) -> Result<AblationReport> {
    let jobs: Vec<(u64, f64)> = seeds.iter().flat_map(|&s| [(s, 0.0), (s, gan_weight)]).collect();
    let results = par::map(exec, &jobs, |&(seed, w)| {
        let model = ModelConfig { seed, ..model.clone() };
        let train = TrainConfig {
            method: Method::MoeCl,
            gan_weight: w,
            seed,
            ..train.clone()
        };
        probe_run(tasks, &model, &train)
    });
    let mut pairs = Vec::with_capacity(seeds.len());
    let mut it = results.into_iter();
    for &seed in seeds {
        let (probe_without, acc_without) = it.next().expect("paired result")?;
        let (probe_with, acc_with) = it.next().expect("paired result")?;
        pairs.push(AblationPair { seed, probe_without, probe_with, acc_without, acc_with });
    }
    let n = pairs.len().max(1) as f64;
    let mean_probe_without = pairs.iter().map(|p| p.probe_without).sum::<f64>() / n;
    let mean_probe_with = pairs.iter().map(|p| p.probe_with).sum::<f64>() / n;
    Ok(AblationReport {
        gan_weight,
        pairs,
        mean_probe_without,
        mean_probe_with,
        gap: mean_probe_without - mean_probe_with,
    })
}
