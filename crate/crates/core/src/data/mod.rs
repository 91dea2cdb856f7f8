//! Corpora, vocabulary, tokenization and the synthetic benchmark.

pub mod corpus;
pub mod synth;

use serde::{Deserialize, Serialize};

pub use corpus::{load_dataset_dir, load_jsonl, tokenize, write_dataset_dir, write_jsonl, CorpusRecord, TaskCorpus, Vocab};

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;

/// A tokenized example.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub tokens: Vec<u32>,
    pub label: usize,
}

/// One task of the continual sequence with its encoded splits.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskSpec {
    pub id: usize,
    pub name: String,
    pub num_classes: usize,
    pub train: Vec<Example>,
    pub val: Vec<Example>,
    pub test: Vec<Example>,
}

impl TaskSpec {
    /// Chance accuracy `1 / K`.
    pub fn chance(&self) -> f64 {
        1.0 / self.num_classes as f64
    }
}

/// Tokenizes every split of every task with a shared vocabulary.
pub fn encode_tasks(corpora: &[TaskCorpus], vocab: &Vocab, max_seq_len: usize) -> Vec<TaskSpec> {
    let enc = |records: &[CorpusRecord]| {
        records
            .iter()
            .map(|r| Example {
                tokens: tokenize(&r.text, vocab, max_seq_len),
                label: r.label,
            })
            .collect::<Vec<_>>()
    };
    corpora
        .iter()
        .enumerate()
        .map(|(id, c)| TaskSpec {
            id,
            name: c.name.clone(),
            num_classes: c.num_classes,
            train: enc(&c.train),
            val: enc(&c.val),
            test: enc(&c.test),
        })
        .collect()
}
