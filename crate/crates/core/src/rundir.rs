//! Self-describing run directories.
//!
//! ```text
//! <run>/config.toml                  resolved configuration
//! <run>/accuracy_matrix.txt          one header line, then one row per phase
//! <run>/logs/phase_<p>.jsonl         one step record per line
//! <run>/checkpoints/phase_<p>.ckpt   state after phase p
//! <run>/metrics.json                 Acc / BwT / FwT of this run
//! ```
//!
//! `accuracy_matrix.txt` alone is enough to rebuild a [`RunSummary`]:
//!
//! ```text
//! # order=2,0,1 method=moe-cl tasks=synth0:4,synth1:4,synth2:4
//! 0.25 0.25 0.9166666666666666
//! ```

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::checkpoint::save_checkpoint;
use crate::config::RunConfig;
use crate::data::{TaskSpec, Vocab};
use crate::error::{Error, Result};
use crate::metrics::AccuracyMatrix;
use crate::report::{OrderMetrics, RunSummary};
use crate::trainer::{PhaseLog, TrainState};

pub const MATRIX_FILE: &str = "accuracy_matrix.txt";
pub const CONFIG_FILE: &str = "config.toml";
pub const METRICS_FILE: &str = "metrics.json";

#[derive(Clone, Debug)]
pub struct RunDir {
    root: PathBuf,
}

fn write(path: &Path, contents: &[u8]) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn join<T: ToString>(items: impl IntoIterator<Item = T>, sep: &str) -> String {
    items.into_iter().map(|i| i.to_string()).collect::<Vec<_>>().join(sep)
}

impl RunDir {
    pub fn create(root: &Path) -> Result<Self> {
        for sub in ["logs", "checkpoints"] {
            let p = root.join(sub);
            fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        Ok(Self { root: root.to_path_buf() })
    }

    pub fn path(&self) -> &Path {
        &self.root
    }

    pub fn checkpoint_path(&self, phase: usize) -> PathBuf {
        self.root.join("checkpoints").join(format!("phase_{phase}.ckpt"))
    }

    pub fn log_path(&self, phase: usize) -> PathBuf {
        self.root.join("logs").join(format!("phase_{phase}.jsonl"))
    }

    pub fn write_config(&self, cfg: &RunConfig) -> Result<()> {
        write(&self.root.join(CONFIG_FILE), cfg.to_toml().as_bytes())
    }

    pub fn write_phase(&self, state: &TrainState, log: &PhaseLog, run: &RunConfig, vocab: Option<&Vocab>) -> Result<()> {
        let path = self.log_path(log.phase);
        let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        for s in &log.steps {
            let line = serde_json::to_string(s).expect("step log serializes");
            writeln!(f, "{line}").map_err(|e| Error::io(&path, e))?;
        }
        save_checkpoint(state, run, vocab, &self.checkpoint_path(log.phase))
    }

    pub fn write_summary(&self, summary: &RunSummary) -> Result<()> {
        write(&self.root.join(MATRIX_FILE), format_matrix(summary).as_bytes())?;
        let metrics = OrderMetrics::from_run(summary)?;
        let json = serde_json::to_string_pretty(&metrics).expect("metrics serialize");
        write(&self.root.join(METRICS_FILE), json.as_bytes())
    }
}

pub fn summary_for(method: &str, tasks: &[TaskSpec], matrix: AccuracyMatrix) -> RunSummary {
    RunSummary {
        method: method.to_string(),
        task_names: tasks.iter().map(|t| t.name.clone()).collect(),
        chance: tasks.iter().map(TaskSpec::chance).collect(),
        matrix,
    }
}

/// Values are written in shortest round-trip form, so parsing restores them
/// exactly.
pub fn format_matrix(s: &RunSummary) -> String {
    let classes = s.chance.iter().map(|c| (1.0 / c).round() as usize);
    let tasks = join(s.task_names.iter().zip(classes).map(|(n, k)| format!("{n}:{k}")), ",");
    let mut out = format!("# order={} method={} tasks={tasks}\n", join(&s.matrix.order, ","), s.method);
    for row in &s.matrix.rows {
        let _ = writeln!(out, "{}", join(row, " "));
    }
    out
}

pub fn parse_matrix(text: &str) -> Result<RunSummary> {
    let bad = |line: usize, msg: &str| Error::Parse { line, msg: msg.to_string() };
    let mut lines = text.lines();
    let header = lines.next().and_then(|h| h.strip_prefix("# ")).ok_or_else(|| bad(1, "missing header"))?;
    let (mut order, mut method, mut tasks) = (None, None, None);
    for field in header.split_whitespace() {
        match field.split_once('=') {
            Some(("order", v)) => order = Some(v),
            Some(("method", v)) => method = Some(v),
            Some(("tasks", v)) => tasks = Some(v),
            _ => return Err(bad(1, &format!("unknown header field {field}"))),
        }
    }
    let order = order
        .ok_or_else(|| bad(1, "header lacks order"))?
        .split(',')
        .map(|s| s.parse::<usize>().map_err(|e| bad(1, &e.to_string())))
        .collect::<Result<Vec<_>>>()?;
    let method = method.ok_or_else(|| bad(1, "header lacks method"))?.to_string();
    let mut task_names = Vec::new();
    let mut chance = Vec::new();
    for t in tasks.ok_or_else(|| bad(1, "header lacks tasks"))?.split(',') {
        let (name, k) = t.rsplit_once(':').ok_or_else(|| bad(1, "task entry is not name:classes"))?;
        let k: usize = k.parse().map_err(|_| bad(1, "task class count"))?;
        if k == 0 {
            return Err(bad(1, "task with zero classes"));
        }
        task_names.push(name.to_string());
        chance.push(1.0 / k as f64);
    }
    let mut matrix = AccuracyMatrix::new(order);
    for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let row = line
            .split_whitespace()
            .map(|v| v.parse::<f64>().map_err(|e| bad(i + 2, &e.to_string())))
            .collect::<Result<Vec<_>>>()?;
        matrix.push_row(row)?;
    }
    if task_names.len() != matrix.n_tasks() {
        return Err(bad(1, "task list and order disagree in length"));
    }
    Ok(RunSummary { method, task_names, chance, matrix })
}

/// Reads the run summary of a run directory.
pub fn read_run(dir: &Path) -> Result<RunSummary> {
    let path = dir.join(MATRIX_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    parse_matrix(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matrix_text_round_trips_exactly() {
        let s = RunSummary {
            method: "moe-cl".into(),
            task_names: vec!["a".into(), "b".into()],
            chance: vec![0.5, 0.25],
            matrix: AccuracyMatrix::from_rows(vec![1, 0], vec![vec![0.1, 2.0 / 3.0], vec![0.7, 0.8]]).unwrap(),
        };
        let text = format_matrix(&s);
        assert!(text.starts_with("# order=1,0 method=moe-cl tasks=a:2,b:4\n"));
        assert_eq!(parse_matrix(&text).unwrap(), s);
    }

    #[test]
    fn missing_header_is_a_parse_error() {
        assert!(matches!(parse_matrix("0.1 0.2\n"), Err(Error::Parse { line: 1, .. })));
    }
}
