use std::collections::HashMap;

use serde::{Deserialize, Serialize};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;

pub const PAD_TOKEN: &str = "<pad>";
pub const BOS_TOKEN: &str = "<bos>";
pub const EOS_TOKEN: &str = "<eos>";
pub const UNK_TOKEN: &str = "<unk>";

const RESERVED: [&str; 4] = [PAD_TOKEN, BOS_TOKEN, EOS_TOKEN, UNK_TOKEN];

/// Token/id bijection with reserved ids 0..4.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "VocabFile", into = "VocabFile")]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    tokens: Vec<String>,
}

impl From<VocabFile> for Vocabulary {
    fn from(f: VocabFile) -> Self {
        Self::from_tokens(f.tokens)
    }
}

impl From<Vocabulary> for VocabFile {
    fn from(v: Vocabulary) -> Self {
        VocabFile { tokens: v.tokens }
    }
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::from_tokens(Vec::new())
    }
}

impl Vocabulary {
    /// Reserved tokens followed by `tokens` (reserved names and repeats are skipped).
    fn from_tokens(tokens: Vec<String>) -> Self {
        let mut v = Vocabulary {
            tokens: Vec::new(),
            ids: HashMap::new(),
        };
        for t in RESERVED.iter().map(|s| s.to_string()).chain(tokens) {
            if !v.ids.contains_key(&t) {
                v.ids.insert(t.clone(), v.tokens.len());
                v.tokens.push(t);
            }
        }
        v
    }

    /// Ids ordered by descending frequency, then lexicographically.
    pub fn build<'a, I, S>(corpus: I) -> Self
    where
        I: IntoIterator<Item = &'a S>,
        S: AsRef<[String]> + 'a + ?Sized,
    {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for sentence in corpus {
            for tok in sentence.as_ref() {
                if !RESERVED.contains(&tok.as_str()) {
                    *counts.entry(tok.as_str()).or_default() += 1;
                }
            }
        }
        let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        Self::from_tokens(ranked.into_iter().map(|(t, _)| t.to_owned()).collect())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.ids.get(token).copied().unwrap_or(UNK)
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or(UNK_TOKEN, String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.token(i).to_owned()).collect()
    }

    /// `BOS report...` with the report's own end token kept (appended if absent).
    pub fn encode_report(&self, report: &[String]) -> Vec<usize> {
        let mut ids = Vec::with_capacity(report.len() + 2);
        ids.push(BOS);
        ids.extend(report.iter().map(|t| self.id(t)));
        if ids.last() != Some(&EOS) {
            ids.push(EOS);
        }
        ids
    }

    pub fn to_json(&self) -> serde_json::Result<String> {
        serde_json::to_string_pretty(self)
    }
}
