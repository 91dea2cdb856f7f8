use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{PAD_ID, UNK_ID};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub text: String,
    pub label: usize,
}

/// Raw text splits of one task.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskCorpus {
    pub name: String,
    pub num_classes: usize,
    pub train: Vec<CorpusRecord>,
    pub val: Vec<CorpusRecord>,
    pub test: Vec<CorpusRecord>,
}

fn normalize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace().map(str::to_lowercase)
}

/// Reads one `{"text": ..., "label": ...}` object per line. Blank lines are
/// skipped; line numbers in errors are 1-based.
pub fn load_jsonl(path: &Path, num_classes: usize) -> Result<Vec<CorpusRecord>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: CorpusRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            msg: e.to_string(),
        })?;
        if rec.label >= num_classes {
            return Err(Error::Validation {
                line: line_no,
                msg: format!("label {} out of range for {num_classes} classes", rec.label),
            });
        }
        if normalize(&rec.text).next().is_none() {
            return Err(Error::Validation {
                line: line_no,
                msg: "text is empty after normalization".into(),
            });
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn write_jsonl(path: &Path, records: &[CorpusRecord]) -> Result<()> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r).expect("record serializes");
        buf.push(b'\n');
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl From<Vec<String>> for Vocab {
    fn from(tokens: Vec<String>) -> Self {
        Vocab::from_tokens(tokens)
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

impl Vocab {
    /// Most frequent tokens first, ties broken lexicographically, capped at
    /// `cap` entries including the two reserved ids.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, cap: Option<usize>) -> Self {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for t in texts {
            for tok in normalize(t) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mut tokens = vec!["<pad>".to_string(), "<unk>".to_string()];
        let room = cap.map_or(usize::MAX, |c| c.saturating_sub(2));
        tokens.extend(ranked.into_iter().take(room).map(|(t, _)| t));
        Self::from_tokens(tokens)
    }

    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .skip(2)
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() <= 2
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// Lowercases, splits on whitespace, maps through `vocab`, truncates to
/// `max_seq_len` and pads with [`PAD_ID`] up to it.
pub fn tokenize(text: &str, vocab: &Vocab, max_seq_len: usize) -> Vec<u32> {
    let mut ids: Vec<u32> = normalize(text).take(max_seq_len).map(|t| vocab.id(&t)).collect();
    ids.resize(max_seq_len, PAD_ID);
    ids
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    tasks: Vec<ManifestTask>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestTask {
    name: String,
    classes: usize,
    train: PathBuf,
    val: PathBuf,
    test: PathBuf,
}

pub const MANIFEST: &str = "tasks.json";

/// Writes `<dir>/<task>/{train,val,test}.jsonl` plus a `tasks.json` manifest.
pub fn write_dataset_dir(dir: &Path, tasks: &[TaskCorpus]) -> Result<()> {
    let mut manifest = Manifest { tasks: Vec::new() };
    for t in tasks {
        let sub = dir.join(&t.name);
        fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        for (split, recs) in [("train", &t.train), ("val", &t.val), ("test", &t.test)] {
            write_jsonl(&sub.join(format!("{split}.jsonl")), recs)?;
        }
        manifest.tasks.push(ManifestTask {
            name: t.name.clone(),
            classes: t.num_classes,
            train: PathBuf::from(&t.name).join("train.jsonl"),
            val: PathBuf::from(&t.name).join("val.jsonl"),
            test: PathBuf::from(&t.name).join("test.jsonl"),
        });
    }
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

pub fn load_dataset_dir(dir: &Path) -> Result<Vec<TaskCorpus>> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut out = Vec::with_capacity(manifest.tasks.len());
    for t in manifest.tasks {
        let load = |p: &Path| -> Result<Vec<CorpusRecord>> {
            let recs = load_jsonl(&dir.join(p), t.classes)?;
            if recs.is_empty() {
                return Err(Error::Data(format!("{} has no records", dir.join(p).display())));
            }
            Ok(recs)
        };
        out.push(TaskCorpus {
            train: load(&t.train)?,
            val: load(&t.val)?,
            test: load(&t.test)?,
            name: t.name,
            num_classes: t.classes,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write(lines: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(lines.as_bytes()).unwrap();
        f
    }

    #[test]
    fn single_record() {
        let f = write("{\"text\":\"good movie\",\"label\":1}\n");
        let recs = load_jsonl(f.path(), 2).unwrap();
        assert_eq!(recs, vec![CorpusRecord { text: "good movie".into(), label: 1 }]);
    }

    #[test]
    fn missing_label_names_line() {
        let f = write("{\"text\":\"good movie\"}\n");
        match load_jsonl(f.path(), 2) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn label_out_of_range() {
        let f = write("{\"text\":\"ok\",\"label\":0}\n{\"text\":\"bad\",\"label\":5}\n");
        match load_jsonl(f.path(), 2) {
            Err(Error::Validation { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn empty_text_rejected() {
        let f = write("{\"text\":\"   \",\"label\":0}\n");
        assert!(matches!(load_jsonl(f.path(), 2), Err(Error::Validation { .. })));
    }

    #[test]
    fn tokenize_examples() {
        let vocab = Vocab::from_tokens(vec!["<pad>".into(), "<unk>".into(), "good".into(), "movie".into()]);
        assert_eq!(tokenize("Good MOVIE", &vocab, 5), vec![2, 3, 0, 0, 0]);
        assert_eq!(tokenize("good plot", &vocab, 3), vec![2, UNK_ID, 0]);
        assert_eq!(tokenize("good movie good movie good", &vocab, 3), vec![2, 3, 2]);
    }

    #[test]
    fn vocab_is_deterministic_and_capped() {
        let texts = ["b a a", "c b a", "d"];
        let v1 = Vocab::build(texts, None);
        let v2 = Vocab::build(texts.iter().copied(), None);
        assert_eq!(v1, v2);
        assert_eq!(&v1.tokens()[2..], &["a", "b", "c", "d"]);
        let capped = Vocab::build(texts, Some(4));
        assert_eq!(capped.len(), 4);
        assert_eq!(capped.id("c"), UNK_ID);
    }
}
