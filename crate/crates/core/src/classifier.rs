//! Small text classifiers used to annotate corpora and to check whether a
//! generated response realizes the factors it was conditioned on.
//!
//! The encoder embeds tokens (word + position), runs a causal block stack,
//! mean-pools the states and applies a linear head.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::corpus::{Conversation, OriginalLabels};
use crate::error::{Error, Result};
use crate::numerics::{argmax, softmax, Affine, Decoder, DecoderShape, Gradients, Graph, ParamId, ParamStore, Tensor, Var};
use crate::taxonomy::{Axis, CommMechanism, DialogAct, Emotion, Mechanism};
use crate::text::Vocab;
use crate::training::{load_tensors, Adam, Container};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_len: usize,
    pub init_std: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub clip_norm: f64,
    /// Share of the labeled texts held out for accuracy and macro-F1.
    pub holdout: f64,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            d_model: 32,
            n_layers: 2,
            n_heads: 4,
            max_len: 128,
            init_std: 0.02,
            learning_rate: 1e-3,
            epochs: 3,
            batch_size: 16,
            clip_norm: 1.0,
            holdout: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledText {
    pub text: String,
    pub label: usize,
}

/// Held-out quality of a trained classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierReport {
    pub axis: Axis,
    pub train_size: usize,
    pub holdout_size: usize,
    pub accuracy: f64,
    pub macro_f1: f64,
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    word: ParamId,
    position: ParamId,
    encoder: Decoder,
    head: Affine,
}

#[derive(Debug, Clone)]
pub struct TextClassifier {
    axis: Axis,
    config: ClassifierConfig,
    vocab: Vocab,
    params: ParamStore,
    layout: Layout,
}

pub const CLASSIFIER_KIND: &str = "comae-classifier";

impl TextClassifier {
    pub fn new(axis: Axis, config: ClassifierConfig, vocab: Vocab) -> Result<Self> {
        let shape = DecoderShape {
            d_model: config.d_model,
            n_layers: config.n_layers,
            n_heads: config.n_heads,
            max_len: config.max_len,
        };
        shape.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.d_model;
        let mut p = ParamStore::new();
        let word = p.add("word", Tensor::randn(vec![vocab.len(), d], config.init_std, &mut rng));
        let position = p.add("position", Tensor::randn(vec![config.max_len, d], config.init_std, &mut rng));
        let encoder = Decoder::init(&mut p, "encoder", shape, config.init_std, &mut rng)?;
        let head = Affine::init(&mut p, "head", d, axis.label_count(), config.init_std, &mut rng);
        Ok(TextClassifier {
            axis,
            config,
            vocab,
            params: p,
            layout: Layout {
                word,
                position,
                encoder,
                head,
            },
        })
    }

    pub fn axis(&self) -> Axis {
        self.axis
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// Token ids, keeping the last `max_len` tokens of long texts.
    fn tokens(&self, text: &str) -> Result<Vec<usize>> {
        let ids = self.vocab.encode(text);
        if ids.is_empty() {
            return Err(Error::invalid("cannot classify an empty text"));
        }
        let skip = ids.len().saturating_sub(self.config.max_len);
        Ok(ids[skip..].to_vec())
    }

    fn logits_g(&self, g: &mut Graph, tokens: &[usize]) -> Result<Var> {
        let w = g.param(self.layout.word);
        let w = g.gather(w, tokens)?;
        let p = g.param(self.layout.position);
        let positions: Vec<usize> = (0..tokens.len()).collect();
        let p = g.gather(p, &positions)?;
        let x = g.add(w, p)?;
        let h = self.layout.encoder.forward(g, x)?;
        let pooled = g.mean_rows(h);
        self.layout.head.apply(g, pooled)
    }

    /// Most probable label and the full distribution.
    pub fn classify(&self, text: &str) -> Result<(usize, Vec<f64>)> {
        let tokens = self.tokens(text)?;
        let mut g = Graph::new(&self.params);
        let logits = self.logits_g(&mut g, &tokens)?;
        let probs = softmax(g.value(logits))?;
        Ok((argmax(&probs), probs))
    }

    pub fn to_container(&self) -> Container {
        Container {
            header: json!({
                "kind": CLASSIFIER_KIND,
                "axis": self.axis,
                "config": self.config,
                "vocab": self.vocab,
            }),
            tensors: self
                .params
                .iter()
                .map(|(_, n, t)| (n.to_string(), t.clone()))
                .collect(),
        }
    }

    pub fn from_container(c: Container) -> Result<Self> {
        let h = &c.header;
        if h.get("kind").and_then(Value::as_str) != Some(CLASSIFIER_KIND) {
            return Err(Error::Checkpoint(format!(
                "expected a `{CLASSIFIER_KIND}` checkpoint"
            )));
        }
        let field = |k: &str| {
            h.get(k)
                .cloned()
                .ok_or_else(|| Error::Checkpoint(format!("header lacks `{k}`")))
        };
        let axis: Axis = serde_json::from_value(field("axis")?)?;
        let config: ClassifierConfig = serde_json::from_value(field("config")?)?;
        let vocab: Vocab = serde_json::from_value(field("vocab")?)?;
        let mut clf = TextClassifier::new(axis, config, vocab)?;
        load_tensors(&mut clf.params, c.tensors)?;
        Ok(clf)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(Container::load(path)?)
    }
}

/// Fraction of positions where `pred` equals `truth`.
pub fn accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    let hits = pred.iter().zip(truth).filter(|(p, t)| p == t).count();
    hits as f64 / truth.len() as f64
}

/// Unweighted mean of per-class F1 over the classes occurring in either
/// the predictions or the truth.
pub fn macro_f1(pred: &[usize], truth: &[usize], n_labels: usize) -> f64 {
    let mut tp = vec![0usize; n_labels];
    let mut fp = vec![0usize; n_labels];
    let mut fn_ = vec![0usize; n_labels];
    for (&p, &t) in pred.iter().zip(truth) {
        if p == t {
            tp[t] += 1;
        } else {
            fp[p] += 1;
            fn_[t] += 1;
        }
    }
    let scores: Vec<f64> = (0..n_labels)
        .filter(|&c| tp[c] + fp[c] + fn_[c] > 0)
        .map(|c| 2.0 * tp[c] as f64 / (2 * tp[c] + fp[c] + fn_[c]) as f64)
        .collect();
    if scores.is_empty() {
        0.0
    } else {
        scores.iter().sum::<f64>() / scores.len() as f64
    }
}

/// Training texts for one axis: DA and EM come from every utterance, the
/// mechanisms from final responses only.
pub fn labeled_texts(corpus: &[Conversation], axis: Axis) -> Vec<LabeledText> {
    let mut out = Vec::new();
    for c in corpus {
        match axis.as_mechanism() {
            Some(m) => out.push(LabeledText {
                text: c.response().text.clone(),
                label: usize::from(c.response_cm.get(m)),
            }),
            None => out.extend(c.utterances.iter().map(|u| LabeledText {
                text: u.text.clone(),
                label: if axis == Axis::Da { u.da.index() } else { u.em.index() },
            })),
        }
    }
    out
}

pub fn train_classifier(
    data: &[LabeledText],
    axis: Axis,
    cfg: &ClassifierConfig,
) -> Result<(TextClassifier, ClassifierReport)> {
    let n_labels = axis.label_count();
    if let Some(bad) = data.iter().find(|d| d.label >= n_labels) {
        return Err(Error::invalid(format!(
            "label {} out of range for axis {}",
            bad.label,
            axis.name()
        )));
    }
    let mut distinct: Vec<usize> = data.iter().map(|d| d.label).collect();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(Error::invalid(format!(
            "training data for {} has fewer than two labels",
            axis.name()
        )));
    }
    if !(0.0..1.0).contains(&cfg.holdout) || cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(Error::invalid("holdout must be in [0, 1); epochs and batch_size positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng);
    let n_hold = ((data.len() as f64 * cfg.holdout).round() as usize).min(data.len() - 1);
    let (hold_idx, train_idx) = order.split_at(n_hold);
    let vocab = Vocab::build(train_idx.iter().map(|&i| data[i].text.as_str()));
    let mut clf = TextClassifier::new(axis, cfg.clone(), vocab)?;
    let encoded: Vec<(Vec<usize>, usize)> = train_idx
        .iter()
        .map(|&i| Ok((clf.tokens(&data[i].text)?, data[i].label)))
        .collect::<Result<_>>()?;
    let mut adam = Adam::new(&clf.params, 0.9, 0.999, 1e-8);
    let mut batch_order: Vec<usize> = (0..encoded.len()).collect();
    let mut step = 0;
    for _ in 0..cfg.epochs {
        batch_order.shuffle(&mut rng);
        for chunk in batch_order.chunks(cfg.batch_size) {
            step += 1;
            let mut grads = Gradients::zeros_like(&clf.params);
            let loss = {
                let mut g = Graph::new(&clf.params);
                let mut losses = Vec::with_capacity(chunk.len());
                for &i in chunk {
                    let (tokens, label) = &encoded[i];
                    let logits = clf.logits_g(&mut g, tokens)?;
                    losses.push(g.cross_entropy(logits, &[*label])?);
                }
                let s = g.sum(&losses)?;
                let loss = g.scale(s, 1.0 / chunk.len() as f64);
                g.backward(loss, &mut grads)?;
                g.scalar(loss)
            };
            if !loss.is_finite() || !grads.all_finite() {
                return Err(Error::Diverged {
                    step,
                    detail: format!("classifier loss {loss}"),
                });
            }
            grads.clip_global_norm(cfg.clip_norm);
            adam.step(&mut clf.params, &grads, cfg.learning_rate);
        }
    }
    // with nothing held out, report on the training texts
    let eval_idx = if hold_idx.is_empty() { train_idx } else { hold_idx };
    let mut pred = Vec::with_capacity(eval_idx.len());
    let mut truth = Vec::with_capacity(eval_idx.len());
    for &i in eval_idx {
        pred.push(clf.classify(&data[i].text)?.0);
        truth.push(data[i].label);
    }
    let report = ClassifierReport {
        axis,
        train_size: train_idx.len(),
        holdout_size: hold_idx.len(),
        accuracy: accuracy(&pred, &truth),
        macro_f1: macro_f1(&pred, &truth, n_labels),
    };
    Ok((clf, report))
}

/// One classifier per axis; any may be absent.
#[derive(Debug, Clone, Default)]
pub struct ClassifierSet {
    pub er: Option<TextClassifier>,
    pub ip: Option<TextClassifier>,
    pub ex: Option<TextClassifier>,
    pub da: Option<TextClassifier>,
    pub em: Option<TextClassifier>,
}

impl ClassifierSet {
    pub fn get(&self, axis: Axis) -> Option<&TextClassifier> {
        match axis {
            Axis::Er => self.er.as_ref(),
            Axis::Ip => self.ip.as_ref(),
            Axis::Ex => self.ex.as_ref(),
            Axis::Da => self.da.as_ref(),
            Axis::Em => self.em.as_ref(),
        }
    }

    /// Places a classifier in the slot of its own axis.
    pub fn insert(&mut self, clf: TextClassifier) {
        let slot = match clf.axis() {
            Axis::Er => &mut self.er,
            Axis::Ip => &mut self.ip,
            Axis::Ex => &mut self.ex,
            Axis::Da => &mut self.da,
            Axis::Em => &mut self.em,
        };
        *slot = Some(clf);
    }

    pub fn require(&self, axis: Axis) -> Result<&TextClassifier> {
        self.get(axis)
            .ok_or_else(|| Error::invalid(format!("no classifier for axis {}", axis.name())))
    }

    pub fn identify_da(&self, text: &str) -> Result<DialogAct> {
        DialogAct::new(self.require(Axis::Da)?.classify(text)?.0)
    }

    pub fn identify_em(&self, text: &str) -> Result<Emotion> {
        Emotion::new(self.require(Axis::Em)?.classify(text)?.0)
    }

    pub fn identify_cm(&self, text: &str) -> Result<CommMechanism> {
        let mut cm = CommMechanism::default();
        for m in Mechanism::ALL {
            cm.set(m, self.require(Axis::mechanism(m))?.classify(text)?.0 == 1);
        }
        Ok(cm)
    }
}

/// Replaces every DA/EM label and every final CM triple by classifier
/// predictions. Labels present before the first annotation are kept in
/// the sidecar fields.
pub fn annotate_corpus(corpus: &[Conversation], classifiers: &ClassifierSet) -> Result<Vec<Conversation>> {
    for axis in Axis::ALL {
        classifiers.require(axis)?;
    }
    corpus
        .iter()
        .map(|c| {
            let mut c = c.clone();
            for u in &mut c.utterances {
                u.original.get_or_insert(OriginalLabels { da: u.da, em: u.em });
                u.da = classifiers.identify_da(&u.text)?;
                u.em = classifiers.identify_em(&u.text)?;
            }
            c.original_cm.get_or_insert(c.response_cm);
            c.response_cm = classifiers.identify_cm(&c.response().text)?;
            Ok(c)
        })
        .collect()
}
