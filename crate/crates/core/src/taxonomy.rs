//! Label sets for the three empathy factors.
//!
//! Communication mechanisms are three independent binary attributes,
//! dialog acts are eight frequent intents plus `others`, emotions are nine
//! coarse categories plus `neutral`. Index order is fixed and serialized by
//! [`taxonomy_table`] so corpora, checkpoints and classifiers agree.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const TAXONOMY_VERSION: u32 = 1;

pub const MECHANISM_NAMES: [&str; 3] = ["emotional_reaction", "interpretation", "exploration"];

pub const DIALOG_ACT_NAMES: [&str; 9] = [
    "questioning",
    "acknowledging",
    "agreeing",
    "consoling",
    "encouraging",
    "sympathizing",
    "suggesting",
    "wishing",
    "others",
];

pub const EMOTION_NAMES: [&str; 10] = [
    "admiration",
    "anger",
    "approval",
    "caring",
    "fear",
    "gratitude",
    "joy",
    "sadness",
    "surprise",
    "neutral",
];

/// Fine-grained emotion -> coarse emotion.
const EMOTION_MAPPING: [(&str, &str); 28] = [
    ("admiration", "admiration"),
    ("pride", "admiration"),
    ("anger", "anger"),
    ("annoyance", "anger"),
    ("disgust", "anger"),
    ("disapproval", "anger"),
    ("approval", "approval"),
    ("realization", "approval"),
    ("caring", "caring"),
    ("desire", "caring"),
    ("optimism", "caring"),
    ("fear", "fear"),
    ("nervousness", "fear"),
    ("gratitude", "gratitude"),
    ("relief", "gratitude"),
    ("joy", "joy"),
    ("amusement", "joy"),
    ("excitement", "joy"),
    ("love", "joy"),
    ("sadness", "sadness"),
    ("disappointment", "sadness"),
    ("embarrassment", "sadness"),
    ("grief", "sadness"),
    ("remorse", "sadness"),
    ("surprise", "surprise"),
    ("confusion", "surprise"),
    ("curiosity", "surprise"),
    ("neutral", "neutral"),
];

/// One of the three communication mechanisms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mechanism {
    Er,
    Ip,
    Ex,
}

impl Mechanism {
    pub const ALL: [Mechanism; 3] = [Mechanism::Er, Mechanism::Ip, Mechanism::Ex];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn short(self) -> &'static str {
        ["er", "ip", "ex"][self.index()]
    }

    pub fn name(self) -> &'static str {
        MECHANISM_NAMES[self.index()]
    }
}

/// Which mechanisms a response adopts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CommMechanism {
    pub er: bool,
    pub ip: bool,
    pub ex: bool,
}

impl CommMechanism {
    pub fn new(er: bool, ip: bool, ex: bool) -> Self {
        CommMechanism { er, ip, ex }
    }

    pub fn from_bits(bits: [bool; 3]) -> Self {
        CommMechanism::new(bits[0], bits[1], bits[2])
    }

    pub fn bits(self) -> [bool; 3] {
        [self.er, self.ip, self.ex]
    }

    pub fn get(self, m: Mechanism) -> bool {
        self.bits()[m.index()]
    }

    pub fn set(&mut self, m: Mechanism, value: bool) {
        match m {
            Mechanism::Er => self.er = value,
            Mechanism::Ip => self.ip = value,
            Mechanism::Ex => self.ex = value,
        }
    }

    /// True when no mechanism is adopted.
    pub fn is_empty(self) -> bool {
        !(self.er || self.ip || self.ex)
    }
}

impl fmt::Display for CommMechanism {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let on: Vec<&str> = Mechanism::ALL
            .iter()
            .filter(|m| self.get(**m))
            .map(|m| m.short())
            .collect();
        if on.is_empty() {
            f.write_str("none")
        } else {
            f.write_str(&on.join("+"))
        }
    }
}

macro_rules! label_newtype {
    ($name:ident, $names:ident, $axis:literal) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
        pub struct $name(u8);

        impl $name {
            pub const COUNT: usize = $names.len();

            pub fn new(index: usize) -> Result<Self> {
                if index < Self::COUNT {
                    Ok($name(index as u8))
                } else {
                    Err(Error::UnknownLabel {
                        axis: $axis.into(),
                        label: index.to_string(),
                    })
                }
            }

            pub fn index(self) -> usize {
                self.0 as usize
            }

            pub fn name(self) -> &'static str {
                $names[self.index()]
            }

            pub fn all() -> impl Iterator<Item = $name> {
                (0..Self::COUNT).map(|i| $name(i as u8))
            }
        }

        impl FromStr for $name {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                let lower = s.trim().to_ascii_lowercase();
                $names
                    .iter()
                    .position(|n| *n == lower)
                    .map(|i| $name(i as u8))
                    .ok_or_else(|| Error::UnknownLabel {
                        axis: $axis.into(),
                        label: s.to_string(),
                    })
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.name())
            }
        }

        impl Serialize for $name {
            fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
                s.serialize_str(self.name())
            }
        }

        impl<'de> Deserialize<'de> for $name {
            fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
                let s = String::deserialize(d)?;
                s.parse().map_err(serde::de::Error::custom)
            }
        }
    };
}

label_newtype!(DialogAct, DIALOG_ACT_NAMES, "dialog act");
label_newtype!(Emotion, EMOTION_NAMES, "emotion");

impl DialogAct {
    pub fn others() -> Self {
        DialogAct(8)
    }
}

impl Emotion {
    pub fn neutral() -> Self {
        Emotion(9)
    }
}

/// The control signal: mechanisms, dialog act and emotion of a response.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FactorTriple {
    pub cm: CommMechanism,
    pub da: DialogAct,
    pub em: Emotion,
}

impl fmt::Display for FactorTriple {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.cm, self.da, self.em)
    }
}

/// The three factor axes, with the mechanism axis as a whole.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FactorAxis {
    Cm,
    Da,
    Em,
}

impl FromStr for FactorAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "cm" => Ok(FactorAxis::Cm),
            "da" => Ok(FactorAxis::Da),
            "em" => Ok(FactorAxis::Em),
            other => Err(Error::invalid(format!(
                "unknown factor axis `{other}` (expected cm, da or em)"
            ))),
        }
    }
}

impl fmt::Display for FactorAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FactorAxis::Cm => "cm",
            FactorAxis::Da => "da",
            FactorAxis::Em => "em",
        })
    }
}

/// A single categorical label axis: one binary mechanism, DA or EM.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Axis {
    #[serde(rename = "cm-er")]
    Er,
    #[serde(rename = "cm-ip")]
    Ip,
    #[serde(rename = "cm-ex")]
    Ex,
    #[serde(rename = "da")]
    Da,
    #[serde(rename = "em")]
    Em,
}

impl Axis {
    pub const ALL: [Axis; 5] = [Axis::Er, Axis::Ip, Axis::Ex, Axis::Da, Axis::Em];

    pub fn mechanism(m: Mechanism) -> Self {
        match m {
            Mechanism::Er => Axis::Er,
            Mechanism::Ip => Axis::Ip,
            Mechanism::Ex => Axis::Ex,
        }
    }

    pub fn as_mechanism(self) -> Option<Mechanism> {
        match self {
            Axis::Er => Some(Mechanism::Er),
            Axis::Ip => Some(Mechanism::Ip),
            Axis::Ex => Some(Mechanism::Ex),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Axis::Er => "cm-er",
            Axis::Ip => "cm-ip",
            Axis::Ex => "cm-ex",
            Axis::Da => "da",
            Axis::Em => "em",
        }
    }

    pub fn label_count(self) -> usize {
        self.labels().len()
    }

    pub fn labels(self) -> Vec<&'static str> {
        match self {
            Axis::Er | Axis::Ip | Axis::Ex => vec!["no", "yes"],
            Axis::Da => DIALOG_ACT_NAMES.to_vec(),
            Axis::Em => EMOTION_NAMES.to_vec(),
        }
    }

    /// Label index of this axis in a factor triple.
    pub fn value_of(self, triple: &FactorTriple) -> usize {
        match self {
            Axis::Da => triple.da.index(),
            Axis::Em => triple.em.index(),
            m => triple.cm.get(m.as_mechanism().expect("mechanism axis")) as usize,
        }
    }
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        Axis::ALL
            .into_iter()
            .find(|a| a.name() == lower || a.as_mechanism().is_some_and(|m| m.short() == lower))
            .ok_or_else(|| {
                Error::invalid(format!(
                    "unknown label axis `{s}` (expected cm-er, cm-ip, cm-ex, da or em)"
                ))
            })
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Collapses one of the 27 fine emotions (or `neutral`) to its coarse label.
pub fn map_emotion(original: &str) -> Result<Emotion> {
    let lower = original.trim().to_ascii_lowercase();
    EMOTION_MAPPING
        .iter()
        .find(|(fine, _)| *fine == lower)
        .map(|(_, coarse)| coarse.parse().expect("mapping targets are canonical"))
        .ok_or_else(|| Error::UnknownLabel {
            axis: "fine emotion".into(),
            label: original.to_string(),
        })
}

/// All fine emotion labels recognized by [`map_emotion`].
pub fn fine_emotions() -> impl Iterator<Item = &'static str> {
    EMOTION_MAPPING.iter().map(|(fine, _)| *fine)
}

/// Binarizes a three-level mechanism annotation: `weak` and `strong` both
/// count as adopted.
pub fn cm_merge(level: &str) -> Result<bool> {
    match level.trim().to_ascii_lowercase().as_str() {
        "no" => Ok(false),
        "weak" | "strong" => Ok(true),
        _ => Err(Error::invalid(format!(
            "unknown mechanism level `{level}` (expected no, weak or strong)"
        ))),
    }
}

pub fn factor_names(axis: FactorAxis) -> &'static [&'static str] {
    match axis {
        FactorAxis::Cm => &MECHANISM_NAMES,
        FactorAxis::Da => &DIALOG_ACT_NAMES,
        FactorAxis::Em => &EMOTION_NAMES,
    }
}

/// Versioned label table, one `index<TAB>name` line per label.
pub fn taxonomy_table() -> String {
    let mut out = format!("#taxonomy\t{TAXONOMY_VERSION}\n");
    for axis in [FactorAxis::Cm, FactorAxis::Da, FactorAxis::Em] {
        out.push_str(&format!("#axis\t{axis}\n"));
        for (i, name) in factor_names(axis).iter().enumerate() {
            out.push_str(&format!("{i}\t{name}\n"));
        }
    }
    out
}

pub fn taxonomy_hash() -> String {
    hex_digest(taxonomy_table().as_bytes())
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Parses a table written by [`taxonomy_table`] and checks that it agrees
/// with the compiled-in label sets.
pub fn verify_taxonomy_table(text: &str) -> Result<()> {
    let mut lines = text.lines();
    match lines.next().and_then(|l| l.split_once('\t')) {
        Some(("#taxonomy", v)) if v == TAXONOMY_VERSION.to_string() => {}
        Some(("#taxonomy", v)) => {
            return Err(Error::Checkpoint(format!(
                "taxonomy version {v}, expected {TAXONOMY_VERSION}"
            )))
        }
        _ => return Err(Error::Checkpoint("missing taxonomy header".into())),
    }
    let mut current: Option<FactorAxis> = None;
    let mut seen: Vec<(FactorAxis, Vec<String>)> = Vec::new();
    for line in lines {
        let (key, value) = line
            .split_once('\t')
            .ok_or_else(|| Error::Checkpoint(format!("malformed taxonomy line `{line}`")))?;
        if key == "#axis" {
            let axis: FactorAxis = value.parse()?;
            current = Some(axis);
            seen.push((axis, Vec::new()));
            continue;
        }
        let idx: usize = key
            .parse()
            .map_err(|_| Error::Checkpoint(format!("bad label index `{key}`")))?;
        let (axis, labels) = seen
            .last_mut()
            .filter(|_| current.is_some())
            .ok_or_else(|| Error::Checkpoint("label before axis header".into()))?;
        if idx != labels.len() {
            return Err(Error::Checkpoint(format!("{axis} labels out of order at {idx}")));
        }
        labels.push(value.to_string());
    }
    for axis in [FactorAxis::Cm, FactorAxis::Da, FactorAxis::Em] {
        let found = seen
            .iter()
            .find(|(a, _)| *a == axis)
            .ok_or_else(|| Error::Checkpoint(format!("taxonomy lacks axis {axis}")))?;
        if found.1 != factor_names(axis) {
            return Err(Error::Checkpoint(format!(
                "{axis} labels differ from this build: {:?}",
                found.1
            )));
        }
    }
    Ok(())
}
