//! Temperature, nucleus filtering and response generation.

use std::fmt;
use std::str::FromStr;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ComaeModel, EncodedUtterance, RESPONDER};
use crate::numerics::softmax;
use crate::taxonomy::{CommMechanism, DialogAct, Emotion, FactorTriple};
use crate::text::EOS_ID;

/// Divides every logit by `tau`.
pub fn apply_temperature(logits: &[f64], tau: f64) -> Result<Vec<f64>> {
    if !(tau.is_finite() && tau > 0.0) {
        return Err(Error::invalid(format!("temperature must be positive, got {tau}")));
    }
    Ok(logits.iter().map(|&l| l / tau).collect())
}

fn check_distribution(probs: &[f64]) -> Result<()> {
    if probs.is_empty() {
        return Err(Error::invalid("empty distribution"));
    }
    if let Some(&bad) = probs.iter().find(|p| !(p.is_finite() && **p >= 0.0)) {
        return Err(Error::invalid(format!("invalid probability {bad}")));
    }
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(Error::invalid(format!("probabilities sum to {total}, not 1")));
    }
    Ok(())
}

/// Keeps the most probable outcomes until their mass reaches `p` (the
/// outcome that crosses `p` is kept), zeroes the rest and renormalizes.
/// Equal probabilities are ranked by index.
pub fn top_p_filter(probs: &[f64], p: f64) -> Result<Vec<f64>> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::invalid(format!("top-p must be in (0, 1], got {p}")));
    }
    check_distribution(probs)?;
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]));
    let mut out = vec![0.0; probs.len()];
    let mut mass = 0.0;
    for &i in &order {
        out[i] = probs[i];
        mass += probs[i];
        if mass >= p {
            break;
        }
    }
    out.iter_mut().for_each(|v| *v /= mass);
    Ok(out)
}

/// Draws an index with probability proportional to `weights`.
pub fn sample_index(weights: &[f64], rng: &mut impl Rng) -> Result<usize> {
    let dist = WeightedIndex::new(weights)
        .map_err(|e| Error::invalid(format!("cannot sample from distribution: {e}")))?;
    Ok(dist.sample(rng))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    /// Condition on the annotated factors.
    GroundTruth,
    /// Sample the factors from the model's own heads.
    Predicted,
}

impl FromStr for DecodeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "ground_truth" => Ok(DecodeMode::GroundTruth),
            "predicted" => Ok(DecodeMode::Predicted),
            _ => Err(Error::invalid(format!(
                "unknown mode `{s}`; expected ground_truth or predicted"
            ))),
        }
    }
}

impl fmt::Display for DecodeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DecodeMode::GroundTruth => "ground_truth",
            DecodeMode::Predicted => "predicted",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    pub token_top_p: f64,
    pub temperature: f64,
    pub factor_top_p: f64,
    /// Applied to DA and EM distributions before their top-p filter.
    pub factor_temperature: f64,
    pub max_new_tokens: usize,
    pub seed: u64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            token_top_p: 0.9,
            temperature: 0.7,
            factor_top_p: 0.9,
            factor_temperature: 1.0,
            max_new_tokens: 64,
            seed: 0,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("token_top_p", self.token_top_p), ("factor_top_p", self.factor_top_p)] {
            if !(p > 0.0 && p <= 1.0) {
                return Err(Error::invalid(format!("{name} must be in (0, 1], got {p}")));
            }
        }
        for (name, t) in [
            ("temperature", self.temperature),
            ("factor_temperature", self.factor_temperature),
        ] {
            if !(t.is_finite() && t > 0.0) {
                return Err(Error::invalid(format!("{name} must be positive, got {t}")));
            }
        }
        Ok(())
    }
}

/// Factors a generation was conditioned on; unmodeled ones are `None`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ChosenFactors {
    pub cm: Option<CommMechanism>,
    pub da: Option<DialogAct>,
    pub em: Option<Emotion>,
}

impl ChosenFactors {
    pub fn triple(&self) -> Option<FactorTriple> {
        Some(FactorTriple {
            cm: self.cm?,
            da: self.da?,
            em: self.em?,
        })
    }
}

impl From<FactorTriple> for ChosenFactors {
    fn from(t: FactorTriple) -> Self {
        ChosenFactors {
            cm: Some(t.cm),
            da: Some(t.da),
            em: Some(t.em),
        }
    }
}

/// Head outputs seen while sampling factors, before filtering.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct StageDistributions {
    pub cm: Option<[[f64; 2]; 3]>,
    pub da: Option<Vec<f64>>,
    pub em: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub tokens: Vec<usize>,
    pub factors: ChosenFactors,
    /// Present in predicted mode.
    pub stages: Option<StageDistributions>,
    /// Filtered distribution each token was drawn from.
    pub token_distributions: Vec<Vec<f64>>,
}

fn sample_factor(probs: &[f64], cfg: &DecodeConfig, rng: &mut impl Rng) -> Result<usize> {
    let tempered = if cfg.factor_temperature == 1.0 {
        probs.to_vec()
    } else {
        let logits: Vec<f64> = probs.iter().map(|p| p.ln().max(-745.0)).collect();
        softmax(&apply_temperature(&logits, cfg.factor_temperature)?)?
    };
    sample_index(&top_p_filter(&tempered, cfg.factor_top_p)?, rng)
}

/// Samples the factor chain CM -> DA -> EM from the model's heads, each
/// stage conditioned on the choices upstream of it.
pub fn sample_factors(
    model: &ComaeModel,
    h_x: &[f64],
    cfg: &DecodeConfig,
    rng: &mut impl Rng,
) -> Result<(ChosenFactors, StageDistributions)> {
    let v = model.variant();
    let mut chosen = ChosenFactors::default();
    let mut stages = StageDistributions::default();
    let mut e_c = None;
    if v.cm {
        // one Bernoulli draw per mechanism, no nucleus filter
        let cm = model.predict_cm(h_x, |p| Ok(usize::from(rng.random::<f64>() < p[1])))?;
        stages.cm = Some(cm.probs);
        chosen.cm = Some(cm.chosen);
        e_c = Some(cm.e_c);
    }
    if v.da {
        let da = model.predict_da(h_x, e_c.as_deref(), |p| sample_factor(p, cfg, rng))?;
        stages.da = Some(da.probs);
        chosen.da = Some(da.chosen);
    }
    if v.em {
        let em = model.predict_em(h_x, e_c.as_deref(), chosen.da, |p| sample_factor(p, cfg, rng))?;
        stages.em = Some(em.probs);
        chosen.em = Some(em.chosen);
    }
    Ok((chosen, stages))
}

pub fn generate(
    model: &ComaeModel,
    context: &[EncodedUtterance],
    mode: DecodeMode,
    factors: Option<FactorTriple>,
    cfg: &DecodeConfig,
    rng: &mut impl Rng,
) -> Result<Generation> {
    cfg.validate()?;
    let v = model.variant();
    let (chosen, stages) = match mode {
        DecodeMode::GroundTruth => {
            let t = match (factors, v.has_factors()) {
                (Some(t), _) => Some(t),
                (None, false) => None,
                (None, true) => {
                    return Err(Error::invalid("ground_truth mode needs the factor triple"))
                }
            };
            (t.map(ChosenFactors::from).unwrap_or_default(), None)
        }
        DecodeMode::Predicted => {
            let h_x = model.encode_context(context)?.h_x;
            let (c, s) = sample_factors(model, &h_x, cfg, rng)?;
            (c, Some(s))
        }
    };
    let control = if v.has_factors() {
        // unmodeled slots are ignored by the fusion
        let t = FactorTriple {
            cm: chosen.cm.unwrap_or_default(),
            da: chosen.da.unwrap_or(DialogAct::others()),
            em: chosen.em.unwrap_or(Emotion::neutral()),
        };
        Some(model.fuse_factors(&t)?)
    } else {
        None
    };
    let mut tokens = Vec::new();
    let mut token_distributions = Vec::new();
    while tokens.len() < cfg.max_new_tokens {
        let logits = model.next_token_logits(context, &tokens, control.as_deref(), RESPONDER)?;
        let probs = softmax(&apply_temperature(&logits, cfg.temperature)?)?;
        let filtered = top_p_filter(&probs, cfg.token_top_p)?;
        let next = sample_index(&filtered, rng)?;
        token_distributions.push(filtered);
        if next == EOS_ID {
            break;
        }
        tokens.push(next);
    }
    Ok(Generation {
        tokens,
        factors: chosen,
        stages,
        token_distributions,
    })
}
