use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which factors a model uses and whether their heads are chained.
///
/// In a chained (`->`) model each head also consumes the embeddings of the
/// factors chosen upstream (CM before DA before EM); in a flat (`||`) model
/// every head sees the context summary only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Variant {
    pub cm: bool,
    pub da: bool,
    pub em: bool,
    pub hierarchical: bool,
}

impl Variant {
    /// The twelve ablation models, in table order.
    pub const GRID: [&'static str; 12] = [
        "vanilla",
        "+cm",
        "+da",
        "+em",
        "cm||da",
        "cm||em",
        "da||em",
        "cm||da||em",
        "cm->da",
        "cm->em",
        "da->em",
        "cm->da->em",
    ];

    pub fn full() -> Self {
        Variant {
            cm: true,
            da: true,
            em: true,
            hierarchical: true,
        }
    }

    pub fn flat_full() -> Self {
        Variant {
            hierarchical: false,
            ..Variant::full()
        }
    }

    pub fn vanilla() -> Self {
        Variant {
            cm: false,
            da: false,
            em: false,
            hierarchical: false,
        }
    }

    pub fn factor_count(&self) -> usize {
        self.cm as usize + self.da as usize + self.em as usize
    }

    pub fn has_factors(&self) -> bool {
        self.factor_count() > 0
    }

    /// True when the DA head consumes the chosen mechanisms.
    pub fn da_sees_cm(&self) -> bool {
        self.hierarchical && self.cm && self.da
    }

    pub fn em_sees_cm(&self) -> bool {
        self.hierarchical && self.cm && self.em
    }

    pub fn em_sees_da(&self) -> bool {
        self.hierarchical && self.da && self.em
    }

    pub fn all() -> impl Iterator<Item = Variant> {
        Self::GRID.iter().map(|s| s.parse().expect("grid names parse"))
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm: String = s
            .trim()
            .to_ascii_lowercase()
            .replace('→', "->")
            .chars()
            .filter(|c| !c.is_whitespace())
            .collect();
        let unknown = || {
            Error::invalid(format!(
                "unknown variant `{s}`; valid variants: {}",
                Variant::GRID.join(", ")
            ))
        };
        if norm == "vanilla" {
            return Ok(Variant::vanilla());
        }
        let (parts, hierarchical): (Vec<&str>, bool) = if let Some(single) = norm.strip_prefix('+') {
            (vec![single], false)
        } else if norm.contains("||") {
            (norm.split("||").collect(), false)
        } else if norm.contains("->") {
            (norm.split("->").collect(), true)
        } else {
            return Err(unknown());
        };
        let order = ["cm", "da", "em"];
        let mut last = None;
        let mut v = Variant::vanilla();
        for p in &parts {
            let pos = order.iter().position(|o| o == p).ok_or_else(unknown)?;
            // factors must appear once each, in CM, DA, EM order
            if last.is_some_and(|l| pos <= l) {
                return Err(unknown());
            }
            last = Some(pos);
            match pos {
                0 => v.cm = true,
                1 => v.da = true,
                _ => v.em = true,
            }
        }
        if parts.len() == 1 && !norm.starts_with('+') {
            return Err(unknown());
        }
        v.hierarchical = hierarchical && parts.len() > 1;
        Ok(v)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = [(self.cm, "cm"), (self.da, "da"), (self.em, "em")]
            .iter()
            .filter(|(on, _)| *on)
            .map(|(_, n)| *n)
            .collect();
        match names.len() {
            0 => f.write_str("vanilla"),
            1 => write!(f, "+{}", names[0]),
            _ => f.write_str(&names.join(if self.hierarchical { "->" } else { "||" })),
        }
    }
}

impl TryFrom<String> for Variant {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Variant> for String {
    fn from(v: Variant) -> String {
        v.to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_round_trips() {
        for name in Variant::GRID {
            let v: Variant = name.parse().unwrap();
            assert_eq!(v.to_string(), name);
        }
        assert_eq!(Variant::all().count(), 12);
    }

    #[test]
    fn arrow_spellings() {
        assert_eq!("CM→DA→EM".parse::<Variant>().unwrap(), Variant::full());
        assert_eq!("cm || da || em".parse::<Variant>().unwrap(), Variant::flat_full());
        let v: Variant = "da||em".parse().unwrap();
        assert!(!v.cm && v.da && v.em && !v.hierarchical);
    }

    #[test]
    fn rejects_unknown() {
        for bad in ["", "cm", "em->da", "cm->cm", "+xx", "cm|da", "da->em->cm"] {
            let err = bad.parse::<Variant>().unwrap_err().to_string();
            assert!(err.contains("cm->da->em"), "{bad}: {err}");
        }
    }
}
