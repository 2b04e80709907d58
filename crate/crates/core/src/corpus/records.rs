use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{io_err, Result, TksgError};
use crate::topic::{TopicLabels, N_TOPICS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = TksgError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(TksgError::Invalid(format!("unknown split {other:?}"))),
        }
    }
}

/// One image/report pair. `image_ref` is relative to the corpus file's
/// directory unless absolute.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub id: String,
    pub image_ref: String,
    pub report: String,
    pub topics: Vec<u8>,
    pub split: Split,
}

impl SampleRecord {
    pub fn topic_labels(&self) -> Result<TopicLabels> {
        TopicLabels::from_slice(&self.topics)
    }

    fn validate(&self) -> std::result::Result<(), String> {
        if self.id.is_empty() {
            return Err("field `id` is empty".into());
        }
        if self.topics.len() != N_TOPICS {
            return Err(format!(
                "field `topics` must have {N_TOPICS} entries, got {}",
                self.topics.len()
            ));
        }
        if self.topics.iter().any(|&t| t > 1) {
            return Err("field `topics` entries must be 0 or 1".into());
        }
        if self.report.trim().is_empty() {
            return Err("field `report` is empty".into());
        }
        Ok(())
    }
}

/// Reads and validates a JSON-lines corpus. Blank lines are skipped.
pub fn load_corpus(path: &Path) -> Result<Vec<SampleRecord>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |reason: String| TksgError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            reason,
        };
        let rec: SampleRecord = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        rec.validate().map_err(err)?;
        if !seen.insert(rec.id.clone()) {
            return Err(err(format!("duplicate id {:?}", rec.id)));
        }
        out.push(rec);
    }
    if out.is_empty() {
        return Err(TksgError::Empty("corpus file"));
    }
    Ok(out)
}

pub fn write_corpus(path: &Path, records: &[SampleRecord]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    for r in records {
        let line = serde_json::to_string(r)?;
        writeln!(f, "{line}").map_err(io_err(path))?;
    }
    Ok(())
}
