//! Synthetic in-context recall tasks.
//!
//! Induction head: recall the token that followed the special marker
//! earlier in the sequence; the sequence ends with the marker. `seq_len`
//! counts tokens, the marker is the last vocabulary id, and exactly one
//! earlier marker occurs.
//!
//! Associative recall: alternating key-value pairs with a trailing query
//! key; the answer is that key's value. The vocabulary splits evenly into
//! keys and values. `seq_len` is the (even) length of the paired region,
//! so examples carry seq_len + 1 tokens.

use crate::error::{Error, Result};
use crate::rng::{Rng, Stream};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    InductionHead,
    AssociativeRecall,
}

impl std::str::FromStr for TaskKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "induction_head" => Ok(TaskKind::InductionHead),
            "associative_recall" => Ok(TaskKind::AssociativeRecall),
            other => Err(Error::Config(format!(
                "unknown task '{other}' (expected induction_head | associative_recall)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub seq_len: usize,
    pub vocab_size: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl TaskSpec {
    /// Published defaults: induction head 30/20, associative recall 20/10,
    /// 5000 train and 500 test examples.
    pub fn defaults(kind: TaskKind, seed: u64) -> Self {
        let (seq_len, vocab_size) = match kind {
            TaskKind::InductionHead => (30, 20),
            TaskKind::AssociativeRecall => (20, 10),
        };
        TaskSpec {
            kind,
            seq_len,
            vocab_size,
            n_train: 5000,
            n_test: 500,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            TaskKind::InductionHead => {
                if self.seq_len < 4 {
                    return Err(Error::Config(format!(
                        "induction head needs seq_len >= 4, got {}",
                        self.seq_len
                    )));
                }
                if self.vocab_size < 3 {
                    return Err(Error::Config("vocabulary too small for a marker".into()));
                }
            }
            TaskKind::AssociativeRecall => {
                if self.seq_len < 2 || self.seq_len % 2 != 0 {
                    return Err(Error::Config(format!(
                        "associative recall needs an even pair region plus one query; seq_len {} is odd or too short",
                        self.seq_len
                    )));
                }
                if self.vocab_size < 2 || self.vocab_size % 2 != 0 {
                    return Err(Error::Config(format!(
                        "vocabulary {} does not split evenly into keys and values",
                        self.vocab_size
                    )));
                }
            }
        }
        Ok(())
    }

    /// Tokens per example as generated.
    pub fn tokens_per_example(&self) -> usize {
        match self.kind {
            TaskKind::InductionHead => self.seq_len,
            TaskKind::AssociativeRecall => self.seq_len + 1,
        }
    }

    /// Chance-level accuracy computed from the label space: uniform over
    /// the vocabulary for induction head, uniform over values for
    /// associative recall.
    pub fn chance_level(&self) -> f64 {
        match self.kind {
            TaskKind::InductionHead => 1.0 / self.vocab_size as f64,
            TaskKind::AssociativeRecall => 2.0 / self.vocab_size as f64,
        }
    }

    /// The marker token (induction head).
    pub fn special_token(&self) -> usize {
        self.vocab_size - 1
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub tokens: Vec<usize>,
    pub target: usize,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub spec: TaskSpec,
    pub train: Vec<Example>,
    pub test: Vec<Example>,
}

fn gen_induction_example(spec: &TaskSpec, rng: &mut Rng) -> Example {
    let n = spec.seq_len;
    let special = spec.special_token();
    let regular = spec.vocab_size - 1;
    let mut tokens: Vec<usize> = (0..n).map(|_| rng.below(regular)).collect();
    // one earlier marker, uniform over [1, n-3]; its successor is the
    // answer; the sequence ends with the marker
    let p = 1 + rng.below(n - 3);
    tokens[p] = special;
    tokens[n - 1] = special;
    let target = tokens[p + 1];
    Example { tokens, target }
}

fn gen_assoc_example(spec: &TaskSpec, rng: &mut Rng) -> Example {
    let keys = spec.vocab_size / 2;
    // per-example random mapping f: key -> value
    let mapping: Vec<usize> = (0..keys).map(|_| keys + rng.below(keys)).collect();
    let pairs = spec.seq_len / 2;
    let mut tokens = Vec::with_capacity(spec.seq_len + 1);
    let mut seen = Vec::new();
    for _ in 0..pairs {
        let k = rng.below(keys);
        tokens.push(k);
        tokens.push(mapping[k]);
        if !seen.contains(&k) {
            seen.push(k);
        }
    }
    let query = seen[rng.below(seen.len())];
    tokens.push(query);
    Example {
        tokens,
        target: mapping[query],
    }
}

/// Generates train and test splits from independent positions of the
/// task's data stream; identical (spec, seed) gives identical ids.
pub fn generate(spec: &TaskSpec) -> Result<Dataset> {
    spec.validate()?;
    let root = Rng::new(spec.seed, Stream::Data);
    let mut train_rng = root.substream(0);
    let mut test_rng = root.substream(1);
    let gen = |rng: &mut Rng| match spec.kind {
        TaskKind::InductionHead => gen_induction_example(spec, rng),
        TaskKind::AssociativeRecall => gen_assoc_example(spec, rng),
    };
    Ok(Dataset {
        spec: *spec,
        train: (0..spec.n_train).map(|_| gen(&mut train_rng)).collect(),
        test: (0..spec.n_test).map(|_| gen(&mut test_rng)).collect(),
    })
}

/// Regenerates only a test split at a different sequence length (length
/// extrapolation); the underlying distribution is otherwise unchanged.
pub fn generate_test_at_length(spec: &TaskSpec, seq_len: usize) -> Result<Vec<Example>> {
    let mut longer = *spec;
    longer.seq_len = seq_len;
    longer.validate()?;
    let root = Rng::new(spec.seed, Stream::Data);
    let mut test_rng = root.substream(2);
    let gen = |rng: &mut Rng| match longer.kind {
        TaskKind::InductionHead => gen_induction_example(&longer, rng),
        TaskKind::AssociativeRecall => gen_assoc_example(&longer, rng),
    };
    Ok((0..spec.n_test).map(|_| gen(&mut test_rng)).collect())
}

/// The task rule as an executable checker; used to validate every
/// generated example and by tests as the labeling oracle.
pub fn satisfies_rule(spec: &TaskSpec, ex: &Example) -> bool {
    match spec.kind {
        TaskKind::InductionHead => {
            let n = spec.seq_len;
            let special = spec.special_token();
            if ex.tokens.len() != n || ex.tokens[n - 1] != special {
                return false;
            }
            let markers: Vec<usize> = (0..n - 1).filter(|&i| ex.tokens[i] == special).collect();
            if markers.len() != 1 {
                return false;
            }
            let p = markers[0];
            p + 1 < n - 1 && ex.tokens[p + 1] == ex.target && ex.target != special
        }
        TaskKind::AssociativeRecall => {
            let keys = spec.vocab_size / 2;
            if ex.tokens.len() != spec.seq_len + 1 {
                return false;
            }
            // odd positions (1-indexed) are keys, even are that key's value,
            // consistently
            let mut mapping = vec![None; keys];
            for pair in ex.tokens[..spec.seq_len].chunks(2) {
                let (k, v) = (pair[0], pair[1]);
                if k >= keys || v < keys || v >= spec.vocab_size {
                    return false;
                }
                match mapping[k] {
                    None => mapping[k] = Some(v),
                    Some(prev) if prev != v => return false,
                    _ => {}
                }
            }
            let query = ex.tokens[spec.seq_len];
            query < keys && mapping[query] == Some(ex.target)
        }
    }
}

// ---- JSON-lines persistence ---------------------------------------------

/// One example per line: {"tokens": [...], "target": t}.
pub fn save_jsonl(path: &Path, examples: &[Example]) -> Result<()> {
    let mut out = Vec::new();
    for ex in examples {
        serde_json::to_writer(&mut out, ex)?;
        out.push(b'\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn load_jsonl(path: &Path) -> Result<Vec<Example>> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

/// Writes train.jsonl, test.jsonl, and spec.json into a directory.
pub fn save_dataset(dir: &Path, data: &Dataset) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    save_jsonl(&dir.join("train.jsonl"), &data.train)?;
    save_jsonl(&dir.join("test.jsonl"), &data.test)?;
    let mut f = std::fs::File::create(dir.join("spec.json"))?;
    f.write_all(serde_json::to_string_pretty(&data.spec)?.as_bytes())?;
    f.write_all(b"\n")?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let spec: TaskSpec = serde_json::from_str(&std::fs::read_to_string(dir.join("spec.json"))?)?;
    Ok(Dataset {
        spec,
        train: load_jsonl(&dir.join("train.jsonl"))?,
        test: load_jsonl(&dir.join("test.jsonl"))?,
    })
}
