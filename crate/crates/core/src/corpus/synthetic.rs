//! Corpora drawn from planted factor hierarchies.
//!
//! A spec plants `P(CM | context)`, `P(DA | CM)` and `P(EM | DA, CM)` and
//! renders each response from a template chosen by its (DA, EM) pair, with
//! one cue phrase per adopted mechanism in front. Because the planted
//! tables are known exactly, statistics and trained models can be checked
//! against them.

use std::collections::{BTreeMap, HashMap};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::stats::DistributionTable;
use super::{Conversation, Domain, Utterance};
use crate::error::{Error, Result};
use crate::taxonomy::{Axis, CommMechanism, DialogAct, Emotion, FactorTriple, Mechanism};

const PROB_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CmProfile {
    pub er: bool,
    pub ip: bool,
    pub ex: bool,
    pub p: f64,
}

impl CmProfile {
    pub fn cm(&self) -> CommMechanism {
        CommMechanism::new(self.er, self.ip, self.ex)
    }
}

/// A kind of opening post; the context a response is conditioned on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextScenario {
    pub name: String,
    pub weight: f64,
    pub domain: Domain,
    pub post_da: DialogAct,
    pub post_em: Emotion,
    pub posts: Vec<String>,
    pub cm: Vec<CmProfile>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DaGivenCm {
    pub cm: CommMechanism,
    pub da: BTreeMap<DialogAct, f64>,
}

/// `P(EM | DA)`, optionally specialised to one mechanism configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmGivenDa {
    pub da: DialogAct,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cm: Option<CommMechanism>,
    pub em: BTreeMap<Emotion, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub version: u32,
    pub contexts: Vec<ContextScenario>,
    pub da_given_cm: Vec<DaGivenCm>,
    pub em_given_da: Vec<EmGivenDa>,
    /// Keyed by `"<da>|<em>"`.
    pub templates: BTreeMap<String, Vec<String>>,
    #[serde(default)]
    pub cm_phrases: BTreeMap<Mechanism, Vec<String>>,
}

/// Joint mass of one reachable (context, triple) combination.
#[derive(Debug, Clone, Copy)]
struct Cell {
    triple: FactorTriple,
    mass: f64,
}

fn template_key(da: DialogAct, em: Emotion) -> String {
    format!("{}|{}", da.name(), em.name())
}

fn check_distribution<K: std::fmt::Debug>(what: &str, probs: impl Iterator<Item = (K, f64)>) -> Result<()> {
    let mut total = 0.0;
    let mut any = false;
    for (k, p) in probs {
        if !(p.is_finite() && p >= 0.0) {
            return Err(Error::Spec(format!("{what}: probability of {k:?} is {p}")));
        }
        total += p;
        any = true;
    }
    if !any || (total - 1.0).abs() > PROB_TOLERANCE {
        return Err(Error::Spec(format!("{what}: probabilities sum to {total}, not 1")));
    }
    Ok(())
}

impl SyntheticSpec {
    /// The bundled spec used by the demos and tests.
    pub fn builtin() -> Self {
        serde_json::from_str(include_str!("../../data/planted.json")).expect("bundled spec parses")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: SyntheticSpec = serde_json::from_str(text).map_err(|e| Error::Spec(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    /// One context, one mechanism configuration, one dialog act and one
    /// emotion: every response carries `triple`.
    pub fn delta(triple: FactorTriple) -> Self {
        let mut em = BTreeMap::new();
        em.insert(triple.em, 1.0);
        let mut da = BTreeMap::new();
        da.insert(triple.da, 1.0);
        let mut templates = BTreeMap::new();
        templates.insert(
            template_key(triple.da, triple.em),
            vec![format!("this is a {} reply with {}", triple.da, triple.em)],
        );
        SyntheticSpec {
            version: 1,
            contexts: vec![ContextScenario {
                name: "only".into(),
                weight: 1.0,
                domain: Domain::Happy,
                post_da: DialogAct::others(),
                post_em: Emotion::neutral(),
                posts: vec!["something happened today".into()],
                cm: vec![CmProfile {
                    er: triple.cm.er,
                    ip: triple.cm.ip,
                    ex: triple.cm.ex,
                    p: 1.0,
                }],
            }],
            da_given_cm: vec![DaGivenCm { cm: triple.cm, da }],
            em_given_da: vec![EmGivenDa {
                da: triple.da,
                cm: None,
                em,
            }],
            templates,
            cm_phrases: BTreeMap::new(),
        }
    }

    fn da_table(&self, cm: CommMechanism) -> Option<&DaGivenCm> {
        self.da_given_cm.iter().find(|d| d.cm == cm)
    }

    fn em_table(&self, da: DialogAct, cm: CommMechanism) -> Option<&EmGivenDa> {
        self.em_given_da
            .iter()
            .find(|e| e.da == da && e.cm == Some(cm))
            .or_else(|| self.em_given_da.iter().find(|e| e.da == da && e.cm.is_none()))
    }

    /// Checks every distribution and that every reachable (DA, EM) pair has
    /// a template.
    pub fn validate(&self) -> Result<()> {
        if self.version != 1 {
            return Err(Error::Spec(format!("unsupported spec version {}", self.version)));
        }
        if self.contexts.is_empty() {
            return Err(Error::Spec("no contexts".into()));
        }
        check_distribution(
            "context weights",
            self.contexts.iter().map(|c| (c.name.clone(), c.weight)),
        )?;
        for ctx in &self.contexts {
            if ctx.posts.is_empty() || ctx.posts.iter().any(|p| p.trim().is_empty()) {
                return Err(Error::Spec(format!("context `{}` needs non-empty posts", ctx.name)));
            }
            check_distribution(
                &format!("P(CM | {})", ctx.name),
                ctx.cm.iter().map(|p| (p.cm(), p.p)),
            )?;
        }
        for d in &self.da_given_cm {
            check_distribution(&format!("P(DA | {})", d.cm), d.da.iter().map(|(k, v)| (*k, *v)))?;
        }
        for e in &self.em_given_da {
            check_distribution(&format!("P(EM | {})", e.da), e.em.iter().map(|(k, v)| (*k, *v)))?;
        }
        for (m, phrases) in &self.cm_phrases {
            if phrases.is_empty() || phrases.iter().any(|p| p.trim().is_empty()) {
                return Err(Error::Spec(format!("cue phrases for {} are empty", m.short())));
            }
        }
        for (key, list) in &self.templates {
            if list.is_empty() || list.iter().any(|t| t.trim().is_empty()) {
                return Err(Error::Spec(format!("templates for `{key}` are empty")));
            }
        }
        // Reachability walks the hierarchy and fails on the first hole.
        self.cells().map(|_| ())
    }

    fn cells(&self) -> Result<Vec<Cell>> {
        let mut out = Vec::new();
        for ctx in &self.contexts {
            for prof in &ctx.cm {
                let cm = prof.cm();
                let mass_cm = ctx.weight * prof.p;
                if mass_cm == 0.0 {
                    continue;
                }
                let da_table = self
                    .da_table(cm)
                    .ok_or_else(|| Error::Spec(format!("no P(DA | CM) entry for reachable CM {cm}")))?;
                for (&da, &pda) in &da_table.da {
                    if pda == 0.0 {
                        continue;
                    }
                    let em_table = self.em_table(da, cm).ok_or_else(|| {
                        Error::Spec(format!("no P(EM | DA) entry for reachable ({cm}, {da})"))
                    })?;
                    for (&em, &pem) in &em_table.em {
                        if pem == 0.0 {
                            continue;
                        }
                        if !self.templates.contains_key(&template_key(da, em)) {
                            return Err(Error::Spec(format!(
                                "template missing for reachable ({da}, {em})"
                            )));
                        }
                        out.push(Cell {
                            triple: FactorTriple { cm, da, em },
                            mass: mass_cm * pda * pem,
                        });
                    }
                }
            }
        }
        Ok(out)
    }

    /// Exact `P(y | x)` implied by the planted tables.
    pub fn planted_conditional(&self, x: Axis, y: Axis) -> Result<DistributionTable> {
        let mut table = DistributionTable::new_counts(x, y);
        for cell in self.cells()? {
            table.add(x.value_of(&cell.triple), y.value_of(&cell.triple), cell.mass);
        }
        Ok(table.into_conditional())
    }

    /// Exact factor triple distribution implied by the planted tables.
    pub fn planted_triples(&self) -> Result<HashMap<FactorTriple, f64>> {
        let mut out = HashMap::new();
        for cell in self.cells()? {
            *out.entry(cell.triple).or_insert(0.0) += cell.mass;
        }
        Ok(out)
    }

    /// Every text the generator can render for the response side, with its
    /// factors. Useful for checking classifiers on the template set.
    pub fn response_texts(&self) -> Vec<(String, FactorTriple)> {
        let mut out = Vec::new();
        let Ok(cells) = self.cells() else {
            return out;
        };
        let mut seen = std::collections::HashSet::new();
        for cell in cells {
            if !seen.insert(cell.triple) {
                continue;
            }
            let t = cell.triple;
            for template in &self.templates[&template_key(t.da, t.em)] {
                let mut parts: Vec<&str> = Vec::new();
                for m in Mechanism::ALL {
                    if t.cm.get(m) {
                        if let Some(p) = self.cm_phrases.get(&m).and_then(|p| p.first()) {
                            parts.push(p);
                        }
                    }
                }
                parts.push(template);
                out.push((parts.join(" "), t));
            }
        }
        out
    }
}

fn pick<'a, T>(items: &'a [T], weights: impl Iterator<Item = f64>, rng: &mut impl Rng) -> &'a T {
    let dist = WeightedIndex::new(weights).expect("validated weights");
    &items[dist.sample(rng)]
}

fn pick_map<K: Copy>(map: &BTreeMap<K, f64>, rng: &mut impl Rng) -> K {
    let keys: Vec<K> = map.keys().copied().collect();
    *pick(&keys, map.values().copied(), rng)
}

fn choose<'a>(list: &'a [String], rng: &mut impl Rng) -> &'a str {
    &list[rng.random_range(0..list.len())]
}

/// Draws `n` conversations; identical for identical `(spec, n, seed)`.
pub fn generate_synthetic_corpus(spec: &SyntheticSpec, n: usize, seed: u64) -> Result<Vec<Conversation>> {
    if n == 0 {
        return Err(Error::invalid("n must be >= 1"));
    }
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let ctx = pick(&spec.contexts, spec.contexts.iter().map(|c| c.weight), &mut rng);
        let post = choose(&ctx.posts, &mut rng);
        let cm = pick(&ctx.cm, ctx.cm.iter().map(|p| p.p), &mut rng).cm();
        let da = pick_map(&spec.da_table(cm).expect("validated").da, &mut rng);
        let em = pick_map(&spec.em_table(da, cm).expect("validated").em, &mut rng);
        let mut words: Vec<&str> = Vec::new();
        for m in Mechanism::ALL {
            if cm.get(m) {
                if let Some(phrases) = spec.cm_phrases.get(&m) {
                    words.push(choose(phrases, &mut rng));
                }
            }
        }
        words.push(choose(&spec.templates[&template_key(da, em)], &mut rng));
        out.push(Conversation {
            id: format!("syn-{seed}-{i:06}"),
            domain: ctx.domain,
            utterances: vec![
                Utterance::new(0, post, ctx.post_da, ctx.post_em),
                Utterance::new(1, words.join(" "), da, em),
            ],
            response_cm: cm,
            original_cm: None,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::conditional_distribution;

    #[test]
    fn builtin_spec_is_valid() {
        SyntheticSpec::builtin().validate().unwrap();
    }

    #[test]
    fn delta_spec_yields_the_triple() {
        let triple = FactorTriple {
            cm: CommMechanism::new(true, false, true),
            da: "consoling".parse().unwrap(),
            em: "caring".parse().unwrap(),
        };
        let corpus = generate_synthetic_corpus(&SyntheticSpec::delta(triple), 50, 3).unwrap();
        assert!(corpus.iter().all(|c| c.response_triple() == triple));
    }

    #[test]
    fn same_seed_same_corpus() {
        let spec = SyntheticSpec::builtin();
        let a = generate_synthetic_corpus(&spec, 300, 11).unwrap();
        let b = generate_synthetic_corpus(&spec, 300, 11).unwrap();
        let c = generate_synthetic_corpus(&spec, 300, 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(generate_synthetic_corpus(&spec, 0, 1).is_err());
    }

    #[test]
    fn missing_template_rejected_at_validation() {
        let mut spec = SyntheticSpec::builtin();
        spec.templates.remove("wishing|gratitude");
        let err = spec.validate().unwrap_err().to_string();
        assert!(err.contains("template missing"), "{err}");
        assert!(err.contains("wishing"), "{err}");
    }

    #[test]
    fn bad_probabilities_rejected() {
        let mut spec = SyntheticSpec::builtin();
        spec.contexts[0].cm[0].p = 0.7;
        assert!(spec.validate().is_err());
        let mut spec = SyntheticSpec::builtin();
        spec.da_given_cm.remove(0);
        assert!(spec.validate().is_err());
    }

    #[test]
    fn concentrates_on_planted_conditional() {
        // A single P(questioning | EX) = 0.95 row: binomial sd at n = 10000
        // is sqrt(.95 * .05 / 10000) ~ 0.0022, so +-0.02 is ~9 sd.
        let mut spec = SyntheticSpec::delta(FactorTriple {
            cm: CommMechanism::new(false, false, true),
            da: "questioning".parse().unwrap(),
            em: "surprise".parse().unwrap(),
        });
        let mut da = BTreeMap::new();
        da.insert("questioning".parse().unwrap(), 0.95);
        da.insert("encouraging".parse().unwrap(), 0.05);
        spec.da_given_cm[0].da = da;
        spec.em_given_da.push(EmGivenDa {
            da: "encouraging".parse().unwrap(),
            cm: None,
            em: BTreeMap::from([("caring".parse().unwrap(), 1.0)]),
        });
        spec.templates.insert("encouraging|caring".into(), vec!["keep going".into()]);
        let corpus = generate_synthetic_corpus(&spec, 10_000, 5).unwrap();
        let table = conditional_distribution(&corpus, Axis::Ex, Axis::Da).unwrap();
        let p = table.get("yes", "questioning").unwrap();
        assert!((0.93..=0.97).contains(&p), "{p}");
    }

    #[test]
    fn planted_tables_rows_normalized() {
        let spec = SyntheticSpec::builtin();
        let t = spec.planted_conditional(Axis::Ex, Axis::Da).unwrap();
        assert_eq!(t.row_argmax(t.row_index("yes").unwrap()), Some("questioning"));
        for (i, row) in t.rows.iter().enumerate() {
            if !t.is_row_empty(i) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
        let total: f64 = spec.planted_triples().unwrap().values().sum();
        assert!((total - 1.0).abs() < 1e-12);
    }
}
