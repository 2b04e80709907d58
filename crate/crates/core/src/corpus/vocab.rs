use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use crate::decoder::{BOS, EOS, PAD, UNK};
use crate::error::{io_err, Result, TksgError};

const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Token ↔ id bijection with PAD=0, BOS=1, EOS=2, UNK=3.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    counts: Vec<usize>,
    ids: HashMap<String, usize>,
}

impl Vocabulary {
    /// Keeps tokens seen at least `min_count` times, most frequent first,
    /// ties lexicographic.
    pub fn build<'a, I, R>(reports: I, min_count: usize) -> Result<Self>
    where
        I: IntoIterator<Item = R>,
        R: IntoIterator<Item = &'a str>,
    {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for r in reports {
            for t in r {
                *counts.entry(t).or_default() += 1;
            }
        }
        if counts.is_empty() {
            return Err(TksgError::Empty("build_vocab"));
        }
        let mut ranked: Vec<(&str, usize)> = counts.into_iter().filter(|(_, c)| *c >= min_count.max(1)).collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        Self::from_entries(ranked.into_iter().map(|(t, c)| (t.to_string(), c)).collect())
    }

    fn from_entries(entries: Vec<(String, usize)>) -> Result<Self> {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let mut counts = vec![0; RESERVED.len()];
        for (t, c) in entries {
            tokens.push(t);
            counts.push(c);
        }
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i).is_some() {
                return Err(TksgError::Invalid(format!("duplicate vocabulary token {t:?}")));
            }
        }
        if tokens.len() < 5 {
            return Err(TksgError::Invalid("vocabulary needs at least one non-reserved token".into()));
        }
        Ok(Vocabulary { tokens, counts, ids })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> usize {
        self.ids.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or(RESERVED[UNK], String::as_str)
    }

    /// Token ids followed by EOS, truncated to `max_len` ids.
    pub fn encode<S: AsRef<str>>(&self, tokens: &[S], max_len: usize) -> Vec<usize> {
        let mut ids: Vec<usize> = tokens.iter().map(|t| self.id(t.as_ref())).collect();
        ids.push(EOS);
        ids.truncate(max_len);
        ids
    }

    /// Tokens for ids, stopping at EOS and skipping PAD/BOS.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .take_while(|&&i| i != EOS)
            .filter(|&&i| i != PAD && i != BOS)
            .map(|&i| self.token(i).to_string())
            .collect()
    }

    /// Order-sensitive fingerprint used to match checkpoints to vocabularies.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update([0]);
        }
        h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    /// `token<TAB>count` per non-reserved token.
    pub fn save(&self, path: &Path) -> Result<()> {
        let text: String = self.tokens[RESERVED.len()..]
            .iter()
            .zip(&self.counts[RESERVED.len()..])
            .map(|(t, c)| format!("{t}\t{c}\n"))
            .collect();
        fs::write(path, text).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let (t, c) = line.split_once('\t').ok_or_else(|| TksgError::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                reason: "expected token<TAB>count".into(),
            })?;
            let c = c.trim().parse().map_err(|_| TksgError::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                reason: "bad count".into(),
            })?;
            entries.push((t.to_string(), c));
        }
        Self::from_entries(entries)
    }
}
