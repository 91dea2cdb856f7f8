//! SynthCL: a seeded multi-task text-classification benchmark.
//!
//! Every task owns a disjoint band of words. The first
//! `classes * signature_tokens` words of a band are class signatures, the rest
//! are noise. A separate shared band is split into one group per class index;
//! an example of class `c` draws its shared words from group `c` in every
//! task, which gives later tasks a cue that earlier tasks already exercised.

use serde::{Deserialize, Serialize};

use super::corpus::{CorpusRecord, TaskCorpus};
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_tasks: usize,
    pub classes_per_task: usize,
    /// Words owned by each task (signatures + noise).
    pub task_band: usize,
    /// Words shared by all tasks.
    pub shared_band: usize,
    /// Distinct signature words per class.
    pub signature_tokens: usize,
    /// Signature positions per example.
    pub signature_slots: usize,
    /// Shared-band positions per example.
    pub shared_slots: usize,
    pub sentence_len: usize,
    /// Probability that a signature or shared slot carries an uninformative word.
    pub noise_ratio: f64,
    pub train_per_task: usize,
    pub val_per_task: usize,
    pub test_per_task: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_tasks: 3,
            classes_per_task: 4,
            task_band: 24,
            shared_band: 16,
            signature_tokens: 2,
            signature_slots: 2,
            shared_slots: 3,
            sentence_len: 12,
            noise_ratio: 0.1,
            train_per_task: 240,
            val_per_task: 90,
            test_per_task: 120,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let k = self.classes_per_task;
        let bad = |m: String| Err(Error::Config(m));
        if self.n_tasks == 0 || k < 2 {
            return bad(format!("need n_tasks >= 1 and classes_per_task >= 2, got {} and {k}", self.n_tasks));
        }
        if self.signature_tokens == 0 || self.signature_slots == 0 {
            return bad("signature_tokens and signature_slots must be positive".into());
        }
        if self.task_band <= k * self.signature_tokens {
            return bad(format!(
                "task_band {} leaves no noise words after {} signature words",
                self.task_band,
                k * self.signature_tokens
            ));
        }
        if self.shared_slots > 0 && self.shared_band < k {
            return bad(format!("shared_band {} cannot hold {k} class groups", self.shared_band));
        }
        if self.sentence_len < self.signature_slots + self.shared_slots {
            return bad(format!(
                "sentence_len {} shorter than signature_slots + shared_slots",
                self.sentence_len
            ));
        }
        if !(0.0..1.0).contains(&self.noise_ratio) {
            return bad(format!("noise_ratio {} must lie in [0, 1)", self.noise_ratio));
        }
        if self.train_per_task == 0 || self.val_per_task == 0 || self.test_per_task == 0 {
            return bad("every split needs at least one example".into());
        }
        Ok(())
    }

    pub fn task_word(task: usize, i: usize) -> String {
        format!("t{task}w{i}")
    }

    pub fn shared_word(i: usize) -> String {
        format!("sw{i}")
    }

    /// Signature word `j` of class `c` in `task`.
    pub fn signature_word(&self, task: usize, class: usize, j: usize) -> String {
        Self::task_word(task, class * self.signature_tokens + j)
    }

    fn example(&self, rng: &mut Rng, task: usize, class: usize) -> String {
        let k = self.classes_per_task;
        let n_sig = k * self.signature_tokens;
        let noise_word = |rng: &mut Rng| Self::task_word(task, n_sig + rng.below(self.task_band - n_sig));
        let group = self.shared_band / k;

        let mut words = Vec::with_capacity(self.sentence_len);
        for _ in 0..self.signature_slots {
            if rng.uniform() < self.noise_ratio {
                words.push(noise_word(rng));
            } else {
                words.push(self.signature_word(task, class, rng.below(self.signature_tokens)));
            }
        }
        for _ in 0..self.shared_slots {
            if rng.uniform() < self.noise_ratio {
                words.push(Self::shared_word(rng.below(self.shared_band)));
            } else {
                words.push(Self::shared_word(class * group + rng.below(group)));
            }
        }
        while words.len() < self.sentence_len {
            words.push(noise_word(rng));
        }
        rng.shuffle(&mut words);
        words.join(" ")
    }

    fn split(&self, task: usize, split: &str, n: usize) -> Vec<CorpusRecord> {
        let mut rng = Rng::for_label(self.seed, &format!("synth/task{task}/{split}"));
        let mut labels: Vec<usize> = (0..n).map(|i| i % self.classes_per_task).collect();
        rng.shuffle(&mut labels);
        labels
            .into_iter()
            .map(|label| CorpusRecord {
                text: self.example(&mut rng, task, label),
                label,
            })
            .collect()
    }
}

/// Materializes every task's train/val/test splits; fully determined by
/// `cfg.seed`.
pub fn gen_synthetic_tasks(cfg: &SynthConfig) -> Result<Vec<TaskCorpus>> {
    cfg.validate()?;
    Ok((0..cfg.n_tasks)
        .map(|t| TaskCorpus {
            name: format!("synth{t}"),
            num_classes: cfg.classes_per_task,
            train: cfg.split(t, "train", cfg.train_per_task),
            val: cfg.split(t, "val", cfg.val_per_task),
            test: cfg.split(t, "test", cfg.test_per_task),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic() {
        let cfg = SynthConfig { seed: 7, ..SynthConfig::default() };
        assert_eq!(gen_synthetic_tasks(&cfg).unwrap(), gen_synthetic_tasks(&cfg).unwrap());
        let other = SynthConfig { seed: 8, ..SynthConfig::default() };
        assert_ne!(gen_synthetic_tasks(&cfg).unwrap(), gen_synthetic_tasks(&other).unwrap());
    }

    #[test]
    fn balanced_splits() {
        let cfg = SynthConfig { train_per_task: 101, ..SynthConfig::default() };
        for task in gen_synthetic_tasks(&cfg).unwrap() {
            for split in [&task.train, &task.val, &task.test] {
                let mut counts = vec![0usize; cfg.classes_per_task];
                split.iter().for_each(|r| counts[r.label] += 1);
                let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
                assert!(hi - lo <= 1, "{counts:?}");
            }
        }
    }

    #[test]
    fn inconsistent_bands_rejected() {
        let cfg = SynthConfig { task_band: 8, ..SynthConfig::default() };
        assert!(matches!(gen_synthetic_tasks(&cfg), Err(Error::Config(_))));
        let cfg = SynthConfig { shared_band: 2, ..SynthConfig::default() };
        assert!(matches!(gen_synthetic_tasks(&cfg), Err(Error::Config(_))));
        let cfg = SynthConfig { noise_ratio: 1.0, ..SynthConfig::default() };
        assert!(matches!(gen_synthetic_tasks(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn sentences_have_requested_length() {
        let cfg = SynthConfig::default();
        let tasks = gen_synthetic_tasks(&cfg).unwrap();
        assert!(tasks[0].train.iter().all(|r| r.text.split(' ').count() == cfg.sentence_len));
    }
}
