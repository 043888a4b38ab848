//! Synthetic parallel tasks and plain-text corpus loading.
//!
//! Synthetic tasks (copy, reverse, sort) stand in for real translation
//! corpora at desk scale. Splits are hash-partitioned on the source
//! sequence so no source ever appears in two splits.

use crate::error::{Error, Result};
use crate::rng::{derive_seed, splitmix64, streams, Rng};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fmt;
use std::path::Path;

/// Token-string <-> id map with the reserved ids 0..=3.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    token_to_id: HashMap<String, usize>,
    id_to_token: Vec<String>,
}

pub const PAD_ID: usize = 0;
pub const BOS_ID: usize = 1;
pub const EOS_ID: usize = 2;
pub const UNK_ID: usize = 3;
pub const RESERVED: usize = 4;

impl Vocabulary {
    pub fn new() -> Self {
        let mut v = Vocabulary {
            token_to_id: HashMap::new(),
            id_to_token: Vec::new(),
        };
        for tok in ["<pad>", "<bos>", "<eos>", "<unk>"] {
            v.push(tok.to_string());
        }
        v
    }

    fn push(&mut self, token: String) -> usize {
        let id = self.id_to_token.len();
        self.token_to_id.insert(token.clone(), id);
        self.id_to_token.push(token);
        id
    }

    /// Vocabulary for synthetic tasks: `n_content` tokens named t0, t1, ...
    pub fn synthetic(n_content: usize) -> Self {
        let mut v = Vocabulary::new();
        for k in 0..n_content {
            v.push(format!("t{k}"));
        }
        v
    }

    /// Build from token streams, keeping tokens seen at least `min_freq`
    /// times, in first-seen order.
    pub fn from_corpus<'a>(lines: impl Iterator<Item = &'a [String]>, min_freq: usize) -> Self {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        let mut order: Vec<&str> = Vec::new();
        for line in lines {
            for tok in line {
                let c = counts.entry(tok.as_str()).or_insert(0);
                if *c == 0 {
                    order.push(tok.as_str());
                }
                *c += 1;
            }
        }
        let mut v = Vocabulary::new();
        for tok in order {
            if counts[tok] >= min_freq && !v.token_to_id.contains_key(tok) {
                v.push(tok.to_string());
            }
        }
        v
    }

    pub fn id(&self, token: &str) -> usize {
        self.token_to_id.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.id_to_token[id]
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    /// True when no non-reserved tokens are present.
    pub fn is_empty(&self) -> bool {
        self.id_to_token.len() <= RESERVED
    }

    pub fn encode_line(&self, line: &str) -> Vec<usize> {
        line.split_whitespace().map(|t| self.id(t)).collect()
    }

    pub fn decode_ids(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// One token per line, line number = id.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for tok in &self.id_to_token {
            out.push_str(tok);
            out.push('\n');
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Data(format!("cannot read vocabulary {}: {}", path.display(), e))
        })?;
        let mut v = Vocabulary {
            token_to_id: HashMap::new(),
            id_to_token: Vec::new(),
        };
        for (i, line) in text.lines().enumerate() {
            if line.is_empty() {
                return Err(Error::Data(format!(
                    "empty vocabulary entry at line {} of {}",
                    i + 1,
                    path.display()
                )));
            }
            v.push(line.to_string());
        }
        let reserved = ["<pad>", "<bos>", "<eos>", "<unk>"];
        if v.id_to_token.len() < RESERVED
            || reserved.iter().zip(&v.id_to_token).any(|(a, b)| a != b)
        {
            return Err(Error::Data(format!(
                "vocabulary {} does not start with the reserved tokens {:?}",
                path.display(),
                reserved
            )));
        }
        Ok(v)
    }
}

impl Default for Vocabulary {
    fn default() -> Self {
        Vocabulary::new()
    }
}

/// Aligned source/target id sequences (content tokens only; BOS/EOS are
/// added by the batch builder) with their vocabularies. Joint vocabularies
/// store the same map on both sides.
#[derive(Debug, Clone)]
pub struct ParallelCorpus {
    pub pairs: Vec<(Vec<usize>, Vec<usize>)>,
    pub src_vocab: Vocabulary,
    pub tgt_vocab: Vocabulary,
}

impl ParallelCorpus {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Vocabulary size the model must cover (max of the two sides).
    pub fn model_vocab_size(&self) -> usize {
        self.src_vocab.len().max(self.tgt_vocab.len())
    }

    fn validate(&self) -> Result<()> {
        let bound = self.model_vocab_size();
        for (i, (s, t)) in self.pairs.iter().enumerate() {
            if s.is_empty() || t.is_empty() {
                return Err(Error::Data(format!("pair {} has an empty sequence", i)));
            }
            if s.iter().chain(t).any(|&id| id >= bound) {
                return Err(Error::Data(format!(
                    "pair {} has a token id out of range",
                    i
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Copy,
    Reverse,
    Sort,
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            TaskKind::Copy => "copy",
            TaskKind::Reverse => "reverse",
            TaskKind::Sort => "sort",
        };
        f.write_str(s)
    }
}

/// Train/dev/test corpora for one synthetic task.
pub struct TaskSplits {
    pub train: ParallelCorpus,
    pub dev: ParallelCorpus,
    pub test: ParallelCorpus,
}

fn hash_sequence(seq: &[usize]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &id in seq {
        h = splitmix64(&mut { h ^ id as u64 });
    }
    h
}

fn transform(kind: TaskKind, src: &[usize]) -> Vec<usize> {
    match kind {
        TaskKind::Copy => src.to_vec(),
        TaskKind::Reverse => src.iter().rev().copied().collect(),
        TaskKind::Sort => {
            let mut t = src.to_vec();
            t.sort_unstable();
            t
        }
    }
}

/// Generate disjoint train/dev/test splits of a synthetic task.
///
/// Sources are uniform random token sequences; the split of each source is
/// decided by a hash of the sequence (16/2/2 buckets of 20), so the same
/// source can never land in two splits. `vocab_size` counts content tokens;
/// reserved ids are added on top.
#[allow(clippy::too_many_arguments)]
pub fn generate_task(
    kind: TaskKind,
    vocab_size: usize,
    min_len: usize,
    max_len: usize,
    n_train: usize,
    n_dev: usize,
    n_test: usize,
    seed: u64,
) -> Result<TaskSplits> {
    if vocab_size < 5 {
        return Err(Error::Config(format!(
            "task vocab_size must be >= 5, got {}",
            vocab_size
        )));
    }
    if min_len < 1 || max_len < min_len {
        return Err(Error::Config(format!(
            "invalid length range [{}, {}]",
            min_len, max_len
        )));
    }
    // Disjointness is only workable when the sequence space dwarfs the
    // request; the bucket split also needs room to fill its quotas.
    let total = n_train + n_dev + n_test;
    let mut space = 0f64;
    for len in min_len..=max_len {
        space += (vocab_size as f64).powi(len as i32);
        if space > 1e15 {
            break;
        }
    }
    if space < 3.0 * total as f64 {
        return Err(Error::Config(format!(
            "sequence space ~{} too small for {} disjoint examples",
            space, total
        )));
    }

    let vocab = Vocabulary::synthetic(vocab_size);
    let mut rng = Rng::seed_from_u64(derive_seed(seed, streams::TASK, 0));
    let mut splits: [Vec<(Vec<usize>, Vec<usize>)>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    let want = [n_train, n_dev, n_test];
    let mut guard = 0usize;
    let guard_limit = 1000 * total.max(1);
    while splits.iter().zip(&want).any(|(s, &w)| s.len() < w) {
        guard += 1;
        if guard > guard_limit {
            return Err(Error::Config(
                "could not fill disjoint splits; sequence space too small".to_string(),
            ));
        }
        let len = min_len + rng.below((max_len - min_len + 1) as u64) as usize;
        let src: Vec<usize> = (0..len)
            .map(|_| RESERVED + rng.below(vocab_size as u64) as usize)
            .collect();
        let bucket = hash_sequence(&src) % 20;
        let split = if bucket < 16 {
            0
        } else if bucket < 18 {
            1
        } else {
            2
        };
        if splits[split].len() < want[split] {
            let tgt = transform(kind, &src);
            splits[split].push((src, tgt));
        }
    }
    let [train, dev, test] = splits;
    let mk = |pairs| ParallelCorpus {
        pairs,
        src_vocab: vocab.clone(),
        tgt_vocab: vocab.clone(),
    };
    let out = TaskSplits {
        train: mk(train),
        dev: mk(dev),
        test: mk(test),
    };
    out.train.validate()?;
    out.dev.validate()?;
    out.test.validate()?;
    Ok(out)
}

fn read_token_lines(path: &Path) -> Result<Vec<Vec<String>>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("cannot read {}: {}", path.display(), e)))?;
    Ok(text
        .lines()
        .map(|l| l.split_whitespace().map(str::to_string).collect())
        .collect())
}

/// Load an aligned pair of whitespace-tokenized text files.
///
/// With `vocabs` absent, vocabularies are built from these files (the
/// training split); pass the training vocabularies when loading dev/test so
/// unseen tokens map to UNK. `joint` builds one vocabulary over both sides.
pub fn load_corpus(
    src_path: &Path,
    tgt_path: &Path,
    joint: bool,
    min_freq: usize,
    vocabs: Option<(&Vocabulary, &Vocabulary)>,
) -> Result<ParallelCorpus> {
    let src_lines = read_token_lines(src_path)?;
    let tgt_lines = read_token_lines(tgt_path)?;
    if src_lines.len() != tgt_lines.len() {
        return Err(Error::Data(format!(
            "line-count mismatch: {} has {} lines, {} has {}",
            src_path.display(),
            src_lines.len(),
            tgt_path.display(),
            tgt_lines.len()
        )));
    }
    for (i, (s, t)) in src_lines.iter().zip(&tgt_lines).enumerate() {
        if s.is_empty() || t.is_empty() {
            return Err(Error::Data(format!("empty sequence at line {}", i + 1)));
        }
    }

    let (src_vocab, tgt_vocab) = match vocabs {
        Some((s, t)) => (s.clone(), t.clone()),
        None => {
            if joint {
                let joint_vocab = Vocabulary::from_corpus(
                    src_lines
                        .iter()
                        .chain(tgt_lines.iter())
                        .map(|v| v.as_slice()),
                    min_freq,
                );
                (joint_vocab.clone(), joint_vocab)
            } else {
                (
                    Vocabulary::from_corpus(src_lines.iter().map(|v| v.as_slice()), min_freq),
                    Vocabulary::from_corpus(tgt_lines.iter().map(|v| v.as_slice()), min_freq),
                )
            }
        }
    };

    let pairs = src_lines
        .iter()
        .zip(&tgt_lines)
        .map(|(s, t)| {
            (
                s.iter().map(|tok| src_vocab.id(tok)).collect(),
                t.iter().map(|tok| tgt_vocab.id(tok)).collect(),
            )
        })
        .collect();
    let corpus = ParallelCorpus {
        pairs,
        src_vocab,
        tgt_vocab,
    };
    corpus.validate()?;
    Ok(corpus)
}

/// Write a corpus side as one whitespace-joined sentence per line.
pub fn write_corpus_side(
    path: &Path,
    pairs: &[(Vec<usize>, Vec<usize>)],
    vocab: &Vocabulary,
    source_side: bool,
) -> Result<()> {
    let mut out = String::new();
    for (s, t) in pairs {
        let ids = if source_side { s } else { t };
        out.push_str(&vocab.decode_ids(ids));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}
