//! Composite objective, optimizer schedule, training loop and checkpoints.

mod container;

pub use container::{Container, FORMAT_VERSION};

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::corpus::Conversation;
use crate::error::{Error, Result};
use crate::model::{ComaeModel, EncodedExample, ModelConfig, Variant};
use crate::numerics::{Gradients, Graph, ParamStore, Var};
use crate::text::Vocab;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub lambda: f64,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub clip_norm: f64,
    /// Defaults to `epochs * ceil(train / batch_size)`.
    pub total_steps: Option<usize>,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_len: usize,
    pub init_std: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            lambda: 1.0,
            learning_rate: 1e-4,
            warmup_steps: 4000,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            epochs: 5,
            batch_size: 16,
            seed: 0,
            clip_norm: 1.0,
            total_steps: None,
            d_model: 32,
            n_layers: 2,
            n_heads: 4,
            max_len: crate::numerics::DEFAULT_MAX_LEN,
            init_std: 0.02,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("learning_rate", self.learning_rate),
            ("clip_norm", self.clip_norm),
            ("adam_eps", self.adam_eps),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::invalid(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::invalid(format!("{name} must be in [0, 1), got {b}")));
            }
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("epochs and batch_size must be positive"));
        }
        if self.total_steps == Some(0) {
            return Err(Error::invalid("total_steps must be positive"));
        }
        Ok(())
    }

    pub fn model_config(&self, vocab_size: usize, variant: Variant) -> ModelConfig {
        ModelConfig {
            vocab_size,
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            max_len: self.max_len,
            variant,
            init_std: self.init_std,
        }
    }

    pub fn schedule(&self, train_size: usize) -> Schedule {
        let per_epoch = train_size.div_ceil(self.batch_size);
        Schedule {
            learning_rate: self.learning_rate,
            warmup_steps: self.warmup_steps,
            total_steps: self.total_steps.unwrap_or(self.epochs * per_epoch),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Schedule {
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

/// Linear ramp from 0 to the peak over the warmup, then linear decay to 0
/// at `total_steps`; 0 from there on.
pub fn lr_at_step(step: usize, s: &Schedule) -> f64 {
    if step >= s.total_steps {
        0.0
    } else if step < s.warmup_steps {
        s.learning_rate * (step as f64 / s.warmup_steps as f64)
    } else {
        s.learning_rate * ((s.total_steps - step) as f64 / (s.total_steps - s.warmup_steps) as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub nll: f64,
    pub l_c: f64,
    pub l_a: f64,
    pub l_e: f64,
}

pub(crate) struct LossVars {
    pub total: Var,
    pub nll: Var,
    pub l_c: Option<Var>,
    pub l_a: Option<Var>,
    pub l_e: Option<Var>,
}

impl LossVars {
    fn values(&self, g: &Graph) -> LossBreakdown {
        let get = |v: Option<Var>| v.map_or(0.0, |v| g.scalar(v));
        LossBreakdown {
            total: g.scalar(self.total),
            nll: g.scalar(self.nll),
            l_c: get(self.l_c),
            l_a: get(self.l_a),
            l_e: get(self.l_e),
        }
    }
}

fn batch_mean(g: &mut Graph, parts: &[Var], n: usize) -> Result<Option<Var>> {
    if parts.is_empty() {
        return Ok(None);
    }
    let s = g.sum(parts)?;
    Ok(Some(g.scale(s, 1.0 / n as f64)))
}

/// `L_NLL + lambda (L_C + L_A + L_E)`, each term averaged over the batch.
pub(crate) fn loss_graph(
    model: &ComaeModel,
    g: &mut Graph,
    batch: &[EncodedExample],
    lambda: f64,
) -> Result<LossVars> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let (mut nll, mut cm, mut da, mut em) = (vec![], vec![], vec![], vec![]);
    for ex in batch {
        let t = model.example_terms(g, ex)?;
        nll.push(t.nll);
        if let Some(rows) = t.cm {
            cm.push(g.sum(&rows)?);
        }
        da.extend(t.da);
        em.extend(t.em);
    }
    let n = batch.len();
    let nll = batch_mean(g, &nll, n)?.expect("non-empty batch");
    let l_c = batch_mean(g, &cm, n)?;
    let l_a = batch_mean(g, &da, n)?;
    let l_e = batch_mean(g, &em, n)?;
    let factors: Vec<Var> = [l_c, l_a, l_e].into_iter().flatten().collect();
    let total = if factors.is_empty() {
        nll
    } else {
        let f = g.sum(&factors)?;
        let f = g.scale(f, lambda);
        g.add(nll, f)?
    };
    Ok(LossVars {
        total,
        nll,
        l_c,
        l_a,
        l_e,
    })
}

pub fn compute_loss(model: &ComaeModel, batch: &[EncodedExample], lambda: f64) -> Result<LossBreakdown> {
    let mut g = Graph::new(model.params());
    let vars = loss_graph(model, &mut g, batch, lambda)?;
    Ok(vars.values(&g))
}

/// Loss and its gradient with respect to every parameter.
pub fn loss_and_gradients(
    model: &ComaeModel,
    batch: &[EncodedExample],
    lambda: f64,
) -> Result<(LossBreakdown, Gradients)> {
    let mut g = Graph::new(model.params());
    let vars = loss_graph(model, &mut g, batch, lambda)?;
    let mut grads = Gradients::zeros_like(model.params());
    g.backward(vars.total, &mut grads)?;
    Ok((vars.values(&g), grads))
}

/// Builds the loss on a graph over `g`'s parameter store, which need not
/// be the model's own; used by gradient checks over perturbed copies.
pub fn loss_on_graph(model: &ComaeModel, g: &mut Graph, batch: &[EncodedExample], lambda: f64) -> Result<Var> {
    Ok(loss_graph(model, g, batch, lambda)?.total)
}

/// Exponential of the mean per-token response NLL over all tokens of the
/// examples, with the annotated factors as conditions.
pub fn corpus_perplexity(model: &ComaeModel, examples: &[EncodedExample]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::invalid("perplexity of an empty corpus"));
    }
    let (mut nll, mut tokens) = (0.0, 0usize);
    for ex in examples {
        let (s, n) = model.response_nll(ex)?;
        nll += s;
        tokens += n;
    }
    Ok((nll / tokens as f64).exp())
}

#[derive(Debug, Clone)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &ParamStore, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = || params.iter().map(|(_, _, t)| vec![0.0; t.len()]).collect();
        Adam {
            beta1,
            beta2,
            eps,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (id, g) in grads.iter() {
            let k = id.index();
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            let w = params.get_mut(id).data_mut();
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                w[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepMetrics {
    pub step: usize,
    pub lr: f64,
    pub total: f64,
    pub nll: f64,
    pub l_c: f64,
    pub l_a: f64,
    pub l_e: f64,
}

pub fn metrics_csv(rows: &[StepMetrics]) -> String {
    let mut out = String::from(
        "# nll = mean over responses of per-response token-mean NLL; factor losses batch-averaged\n\
         step,lr,total,nll,l_c,l_a,l_e\n",
    );
    for r in rows {
        out.push_str(&format!(
            "{},{:e},{},{},{},{},{}\n",
            r.step, r.lr, r.total, r.nll, r.l_c, r.l_a, r.l_e
        ));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub step: usize,
    pub mean_loss: f64,
    pub val_ppl: f64,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: ComaeModel,
    pub step: usize,
    pub epoch: usize,
    pub val_ppl: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// The epoch-end state with the lowest validation perplexity.
    pub best: Checkpoint,
    pub epochs: Vec<EpochSummary>,
    pub log: Vec<StepMetrics>,
}

/// Vocabulary over every utterance of the training split.
pub fn build_vocab(train: &[Conversation]) -> Vocab {
    Vocab::build(train.iter().flat_map(|c| c.utterances.iter().map(|u| u.text.as_str())))
}

pub fn train(
    train: &[Conversation],
    valid: &[Conversation],
    variant: Variant,
    cfg: &TrainingConfig,
) -> Result<TrainOutcome> {
    train_with(train, valid, variant, cfg, |_| {})
}

/// [`train`] with a callback after each epoch.
pub fn train_with(
    train: &[Conversation],
    valid: &[Conversation],
    variant: Variant,
    cfg: &TrainingConfig,
    mut on_epoch: impl FnMut(&EpochSummary),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() || valid.is_empty() {
        return Err(Error::invalid("training and validation splits must be non-empty"));
    }
    let vocab = build_vocab(train);
    let mut model = ComaeModel::new(cfg.model_config(vocab.len(), variant), vocab, cfg.seed)?;
    let encode = |c: &[Conversation], m: &ComaeModel| {
        c.iter().map(|c| m.encode(c)).collect::<Result<Vec<_>>>()
    };
    let train_ex = encode(train, &model)?;
    let valid_ex = encode(valid, &model)?;
    let schedule = cfg.schedule(train_ex.len());
    let mut adam = Adam::new(model.params(), cfg.beta1, cfg.beta2, cfg.adam_eps);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0f_ba7c4);
    let mut order: Vec<usize> = (0..train_ex.len()).collect();
    let mut log = Vec::new();
    let mut epochs = Vec::new();
    let mut best: Option<Checkpoint> = None;
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            step += 1;
            let batch: Vec<EncodedExample> = chunk.iter().map(|&i| train_ex[i].clone()).collect();
            let (loss, mut grads) = loss_and_gradients(&model, &batch, cfg.lambda)?;
            if !loss.total.is_finite() {
                return Err(Error::Diverged {
                    step,
                    detail: format!("loss is {} (nll {})", loss.total, loss.nll),
                });
            }
            if !grads.all_finite() {
                return Err(Error::Diverged {
                    step,
                    detail: "non-finite gradient".into(),
                });
            }
            grads.clip_global_norm(cfg.clip_norm);
            let lr = lr_at_step(step, &schedule);
            adam.step(model.params_mut(), &grads, lr);
            loss_sum += loss.total;
            batches += 1;
            log.push(StepMetrics {
                step,
                lr,
                total: loss.total,
                nll: loss.nll,
                l_c: loss.l_c,
                l_a: loss.l_a,
                l_e: loss.l_e,
            });
        }
        let val_ppl = corpus_perplexity(&model, &valid_ex)?;
        if !val_ppl.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!("validation perplexity is {val_ppl}"),
            });
        }
        let summary = EpochSummary {
            epoch,
            step,
            mean_loss: loss_sum / batches as f64,
            val_ppl,
        };
        on_epoch(&summary);
        epochs.push(summary);
        if best.as_ref().is_none_or(|b| val_ppl < b.val_ppl) {
            best = Some(Checkpoint {
                model: model.clone(),
                step,
                epoch,
                val_ppl,
            });
        }
    }
    Ok(TrainOutcome {
        best: best.expect("at least one epoch"),
        epochs,
        log,
    })
}

pub const MODEL_KIND: &str = "comae-model";

impl Checkpoint {
    pub fn to_container(&self) -> Container {
        Container {
            header: json!({
                "kind": MODEL_KIND,
                "config": self.model.config(),
                "vocab": self.model.vocab(),
                "step": self.step,
                "epoch": self.epoch,
                "val_ppl": self.val_ppl,
            }),
            tensors: self
                .model
                .params()
                .iter()
                .map(|(_, name, t)| (name.to_string(), t.clone()))
                .collect(),
        }
    }

    pub fn from_container(c: Container) -> Result<Self> {
        let h = &c.header;
        if h.get("kind").and_then(Value::as_str) != Some(MODEL_KIND) {
            return Err(Error::Checkpoint(format!(
                "expected a `{MODEL_KIND}` checkpoint, found {}",
                h.get("kind").unwrap_or(&Value::Null)
            )));
        }
        let field = |k: &str| {
            h.get(k)
                .cloned()
                .ok_or_else(|| Error::Checkpoint(format!("header lacks `{k}`")))
        };
        let config: ModelConfig = serde_json::from_value(field("config")?)?;
        let vocab: Vocab = serde_json::from_value(field("vocab")?)?;
        let step: usize = serde_json::from_value(field("step")?)?;
        let epoch: usize = serde_json::from_value(field("epoch")?)?;
        let val_ppl: f64 = serde_json::from_value(field("val_ppl")?)?;
        let mut model = ComaeModel::new(config, vocab, 0)?;
        load_tensors(model.params_mut(), c.tensors)?;
        Ok(Checkpoint {
            model,
            step,
            epoch,
            val_ppl,
        })
    }
}

/// Replaces every parameter by the tensor of the same name; the name sets
/// must match exactly.
pub(crate) fn load_tensors(store: &mut ParamStore, tensors: Vec<(String, crate::numerics::Tensor)>) -> Result<()> {
    if tensors.len() != store.len() {
        return Err(Error::Checkpoint(format!(
            "{} tensors stored, model has {}",
            tensors.len(),
            store.len()
        )));
    }
    let mut seen = vec![false; store.len()];
    for (name, t) in tensors {
        let id = store
            .id_of(&name)
            .ok_or_else(|| Error::Checkpoint(format!("unexpected tensor `{name}`")))?;
        if std::mem::replace(&mut seen[id.index()], true) {
            return Err(Error::Checkpoint(format!("tensor `{name}` stored twice")));
        }
        store
            .set(id, t)
            .map_err(|e| Error::Checkpoint(format!("tensor `{name}`: {e}")))?;
    }
    Ok(())
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    ckpt.to_container().save(path)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    Checkpoint::from_container(Container::load(path)?)
}
