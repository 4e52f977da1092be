//! Synthetic tasks and character corpora.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};
use crate::numerics::SeededRng;

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const SEP: u32 = 2;
pub(crate) const FIRST_CONTENT: u32 = 3;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    #[default]
    Copy,
    Reverse,
    CharLm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub min_len: usize,
    pub max_len: usize,
    /// Total vocabulary including the three reserved ids.
    pub vocab: usize,
    /// UTF-8 text for `char_lm`.
    pub corpus: Option<PathBuf>,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self { kind: TaskKind::Copy, min_len: 64, max_len: 64, vocab: 32, corpus: None }
    }
}

/// One training instance: a source (empty for language modelling) and the
/// target the model must produce.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub src: Vec<u32>,
    pub tgt: Vec<u32>,
}

impl Example {
    /// Decoder-only layout `BOS src [SEP] tgt[..-1]` with per-position
    /// next-token targets (none inside the prompt).
    pub fn lm_io(&self) -> (Vec<u32>, Vec<Option<u32>>) {
        let prompt = self.lm_prompt();
        let mut tokens = prompt.clone();
        tokens.extend_from_slice(&self.tgt[..self.tgt.len().saturating_sub(1)]);
        let mut targets = vec![None; prompt.len() - 1];
        targets.extend(self.tgt.iter().map(|&t| Some(t)));
        (tokens, targets)
    }

    pub fn lm_prompt(&self) -> Vec<u32> {
        let mut p = vec![BOS];
        if !self.src.is_empty() {
            p.extend_from_slice(&self.src);
            p.push(SEP);
        }
        p
    }

    /// Encoder input, decoder input `BOS tgt[..-1]` and targets.
    pub fn seq2seq_io(&self) -> (Vec<u32>, Vec<u32>, Vec<Option<u32>>) {
        let mut tgt_in = vec![BOS];
        tgt_in.extend_from_slice(&self.tgt[..self.tgt.len().saturating_sub(1)]);
        (self.src.clone(), tgt_in, self.tgt.iter().map(|&t| Some(t)).collect())
    }
}

/// Character inventory of a corpus mapped onto content ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    chars: Vec<char>,
}

impl Vocabulary {
    pub fn from_text(text: &str) -> Self {
        let mut chars: Vec<char> = text.chars().collect();
        chars.sort_unstable();
        chars.dedup();
        Self { chars }
    }

    /// Ids needed, including reserved ones.
    pub fn size(&self) -> usize {
        self.chars.len() + FIRST_CONTENT as usize
    }

    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        text.chars()
            .map(|c| match self.chars.binary_search(&c) {
                Ok(i) => Ok(i as u32 + FIRST_CONTENT),
                Err(_) => domain(format!("character {c:?} not in vocabulary")),
            })
            .collect()
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .filter_map(|&i| i.checked_sub(FIRST_CONTENT).and_then(|j| self.chars.get(j as usize)))
            .collect()
    }
}

/// Draws examples for a task.
#[derive(Clone, Debug)]
pub struct TaskSampler {
    spec: TaskSpec,
    corpus: Vec<u32>,
    vocabulary: Option<Vocabulary>,
}

impl TaskSpec {
    pub fn sampler(&self) -> Result<TaskSampler> {
        if self.min_len == 0 || self.min_len > self.max_len {
            return domain("task lengths must satisfy 1 <= min_len <= max_len");
        }
        if self.vocab <= FIRST_CONTENT as usize {
            return domain("task vocabulary leaves no content ids");
        }
        let (corpus, vocabulary) = match self.kind {
            TaskKind::CharLm => {
                let Some(path) = &self.corpus else {
                    return domain("char_lm needs a corpus path");
                };
                let text = std::fs::read_to_string(path)?;
                let v = Vocabulary::from_text(&text);
                if v.size() > self.vocab {
                    return domain(format!("corpus needs {} ids, vocab is {}", v.size(), self.vocab));
                }
                let ids = v.encode(&text)?;
                if ids.len() < self.max_len {
                    return domain("corpus is shorter than one example");
                }
                (ids, Some(v))
            }
            _ => (Vec::new(), None),
        };
        Ok(TaskSampler { spec: self.clone(), corpus, vocabulary })
    }
}

impl TaskSampler {
    pub fn spec(&self) -> &TaskSpec {
        &self.spec
    }

    pub fn vocabulary(&self) -> Option<&Vocabulary> {
        self.vocabulary.as_ref()
    }

    pub fn sample(&self, rng: &mut SeededRng) -> Example {
        let s = &self.spec;
        let len = s.min_len + rng.below(s.max_len - s.min_len + 1);
        match s.kind {
            TaskKind::Copy | TaskKind::Reverse => {
                let content = s.vocab - FIRST_CONTENT as usize;
                let src: Vec<u32> = (0..len).map(|_| FIRST_CONTENT + rng.below(content) as u32).collect();
                let mut tgt = src.clone();
                if s.kind == TaskKind::Reverse {
                    tgt.reverse();
                }
                Example { src, tgt }
            }
            TaskKind::CharLm => {
                let start = rng.below(self.corpus.len() - len + 1);
                Example { src: Vec::new(), tgt: self.corpus[start..start + len].to_vec() }
            }
        }
    }

    pub fn sample_many(&self, rng: &mut SeededRng, count: usize) -> Vec<Example> {
        (0..count).map(|_| self.sample(rng)).collect()
    }
}
