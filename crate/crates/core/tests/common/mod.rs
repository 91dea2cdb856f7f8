#![allow(dead_code)]

use moecl::data::synth::{gen_synthetic_tasks, SynthConfig};
use moecl::experiments::{prepare_corpora, Prepared};
use moecl::{DataConfig, ModelConfig, RunConfig, TrainConfig};

pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        hidden_size: 8,
        n_blocks: 2,
        n_heads: 2,
        ffn_inner: None,
        vocab_size: 20,
        max_seq_len: 8,
        task_classes: vec![2, 3, 2],
        lora_rank: 2,
        lora_alpha: 2.0,
        seed: 5,
    }
}

pub fn small_synth() -> SynthConfig {
    SynthConfig {
        n_tasks: 3,
        classes_per_task: 3,
        task_band: 10,
        shared_band: 6,
        signature_tokens: 1,
        signature_slots: 2,
        shared_slots: 1,
        sentence_len: 6,
        noise_ratio: 0.1,
        train_per_task: 24,
        val_per_task: 12,
        test_per_task: 18,
        seed: 3,
    }
}

/// Three small synthetic tasks with a matching tiny model configuration.
pub fn small_tasks() -> Prepared {
    let corpora = gen_synthetic_tasks(&small_synth()).unwrap();
    let model = ModelConfig {
        hidden_size: 8,
        n_heads: 2,
        max_seq_len: 8,
        lora_rank: 2,
        lora_alpha: 2.0,
        seed: 1,
        ..ModelConfig::default()
    };
    prepare_corpora(&corpora, &DataConfig::default(), &model).unwrap()
}

/// Run configuration over [`small_synth`] with a tiny model; trains in well
/// under a second.
pub fn small_run_config() -> RunConfig {
    RunConfig {
        model: ModelConfig {
            hidden_size: 8,
            n_heads: 2,
            max_seq_len: 8,
            lora_rank: 2,
            lora_alpha: 2.0,
            seed: 1,
            ..ModelConfig::default()
        },
        train: TrainConfig {
            learning_rate: 0.01,
            epochs: 1,
            batch_size: 8,
            ..TrainConfig::default()
        },
        data: DataConfig {
            synth: Some(small_synth()),
            ..DataConfig::default()
        },
    }
}

pub struct MetricCase {
    pub order: Vec<usize>,
    pub rows: Vec<Vec<f64>>,
    pub chance: Vec<f64>,
    pub acc: f64,
    pub bwt: f64,
    pub fwt: f64,
}

/// Small accuracy matrices with hand-computed Acc, BwT and FwT.
pub fn metric_cases() -> Vec<MetricCase> {
    vec![
        // worked 2x2
        MetricCase {
            order: vec![0, 1],
            rows: vec![vec![0.9, 0.4], vec![0.7, 0.8]],
            chance: vec![0.5, 0.5],
            acc: (0.7 + 0.8) / 2.0,
            bwt: 0.7 - 0.9,
            fwt: 0.4 - 0.5,
        },
        // identity order, no forgetting
        MetricCase {
            order: vec![0, 1, 2],
            rows: vec![vec![1.0, 0.5, 0.25], vec![1.0, 1.0, 0.5], vec![1.0, 1.0, 1.0]],
            chance: vec![0.25, 0.25, 0.5],
            acc: 1.0,
            bwt: 0.0,
            fwt: ((0.5 - 0.25) + 0.0) / 2.0,
        },
        // permuted order (2, 0, 1)
        MetricCase {
            order: vec![2, 0, 1],
            rows: vec![vec![0.25, 0.5, 0.75], vec![0.75, 0.5, 0.5], vec![0.5, 0.75, 0.25]],
            chance: vec![0.5, 0.25, 0.25],
            acc: 0.5,
            bwt: ((0.25 - 0.75) + (0.5 - 0.75)) / 2.0,
            fwt: ((0.25 - 0.5) + (0.5 - 0.25)) / 2.0,
        },
        // total forgetting
        MetricCase {
            order: vec![1, 0],
            rows: vec![vec![0.5, 1.0], vec![1.0, 0.0]],
            chance: vec![0.5, 0.5],
            acc: 0.5,
            bwt: -1.0,
            fwt: 0.0,
        },
        // four tasks, reverse order
        MetricCase {
            order: vec![3, 2, 1, 0],
            rows: vec![
                vec![0.25, 0.25, 0.25, 1.0],
                vec![0.25, 0.25, 1.0, 0.75],
                vec![0.5, 1.0, 0.75, 0.5],
                vec![1.0, 0.75, 0.5, 0.25],
            ],
            chance: vec![0.25, 0.25, 0.25, 0.25],
            acc: 0.625,
            bwt: -0.5,
            fwt: (0.0 + 0.0 + 0.25) / 3.0,
        },
    ]
}
