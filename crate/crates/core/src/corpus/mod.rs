//! Conversation records, JSONL ingestion, filtering and corpus statistics.

mod heatmap;
mod stats;
mod synthetic;

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::taxonomy::{CommMechanism, DialogAct, Emotion, FactorTriple};

pub use heatmap::render_heatmap_svg;
pub use stats::{
    conditional_distribution, factor_marginals, joint_distribution, DistributionTable, Marginals,
    TableKind,
};
pub use synthetic::{
    generate_synthetic_corpus, CmProfile, ContextScenario, DaGivenCm, EmGivenDa, SyntheticSpec,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Happy,
    Offmychest,
}

/// Labels carried over from a corpus before re-annotation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OriginalLabels {
    pub da: DialogAct,
    pub em: Emotion,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub speaker: u32,
    pub text: String,
    pub da: DialogAct,
    pub em: Emotion,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub original: Option<OriginalLabels>,
}

impl Utterance {
    pub fn new(speaker: u32, text: impl Into<String>, da: DialogAct, em: Emotion) -> Self {
        Utterance {
            speaker,
            text: text.into(),
            da,
            em,
            original: None,
        }
    }
}

/// A dialog whose final utterance is the response to model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conversation {
    pub id: String,
    pub domain: Domain,
    pub utterances: Vec<Utterance>,
    pub response_cm: CommMechanism,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub original_cm: Option<CommMechanism>,
}

impl Conversation {
    pub fn response(&self) -> &Utterance {
        self.utterances.last().expect("validated conversation")
    }

    pub fn context(&self) -> &[Utterance] {
        &self.utterances[..self.utterances.len() - 1]
    }

    /// Factors of the final response.
    pub fn response_triple(&self) -> FactorTriple {
        let r = self.response();
        FactorTriple {
            cm: self.response_cm,
            da: r.da,
            em: r.em,
        }
    }

    pub fn distinct_speakers(&self) -> usize {
        self.utterances
            .iter()
            .map(|u| u.speaker)
            .collect::<BTreeSet<_>>()
            .len()
    }

    /// Structural checks applied to every loaded record.
    pub fn validate(&self) -> Result<()> {
        if self.utterances.len() < 2 {
            return Err(Error::invalid(format!(
                "conversation `{}` needs a context and a response",
                self.id
            )));
        }
        if let Some(i) = self.utterances.iter().position(|u| u.text.trim().is_empty()) {
            return Err(Error::invalid(format!(
                "conversation `{}` utterance {i} has empty text",
                self.id
            )));
        }
        if self.utterances[0].speaker == self.response().speaker {
            return Err(Error::invalid(format!(
                "conversation `{}`: the response comes from the post author",
                self.id
            )));
        }
        Ok(())
    }
}

/// Reads one conversation per line. Blank lines are skipped.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<Conversation>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_corpus(&text)
}

pub fn parse_corpus(text: &str) -> Result<Vec<Conversation>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let conv: Conversation = serde_json::from_str(line).map_err(|e| Error::Corpus {
            line: i + 1,
            message: e.to_string(),
        })?;
        conv.validate().map_err(|e| Error::Corpus {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(conv);
    }
    Ok(out)
}

pub fn corpus_to_jsonl(corpus: &[Conversation]) -> String {
    let mut out = String::new();
    for conv in corpus {
        out.push_str(&serde_json::to_string(conv).expect("conversation serializes"));
        out.push('\n');
    }
    out
}

pub fn save_corpus(path: impl AsRef<Path>, corpus: &[Conversation]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, corpus_to_jsonl(corpus)).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterReport {
    pub kept: usize,
    pub multi_speaker: usize,
    pub no_cm: usize,
}

/// Drops conversations with more than two speakers, then those whose
/// response adopts no communication mechanism.
pub fn filter_conversations(corpus: &[Conversation]) -> (Vec<Conversation>, FilterReport) {
    let mut report = FilterReport::default();
    let mut kept = Vec::new();
    for conv in corpus {
        if conv.distinct_speakers() > 2 {
            report.multi_speaker += 1;
        } else if conv.response_cm.is_empty() {
            report.no_cm += 1;
        } else {
            kept.push(conv.clone());
        }
    }
    report.kept = kept.len();
    (kept, report)
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    pub fn conv(
        id: &str,
        speakers: &[u32],
        cm: (bool, bool, bool),
        da: &str,
        em: &str,
    ) -> Conversation {
        let n = speakers.len();
        let utterances = speakers
            .iter()
            .enumerate()
            .map(|(i, &s)| {
                let (da, em) = if i + 1 == n { (da, em) } else { ("others", "neutral") };
                Utterance::new(s, format!("utterance {i}"), da.parse().unwrap(), em.parse().unwrap())
            })
            .collect();
        Conversation {
            id: id.into(),
            domain: Domain::Happy,
            utterances,
            response_cm: CommMechanism::new(cm.0, cm.1, cm.2),
            original_cm: None,
        }
    }
}
