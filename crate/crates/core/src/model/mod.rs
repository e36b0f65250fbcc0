//! The factor-conditioned language model.
//!
//! Every context token is embedded as the sum of word, position, speaker,
//! DA and EM rows. Three binary CM heads, a DA head and an EM head read the
//! last context state `h_x`; in chained variants each head also reads the
//! embeddings of the factors chosen upstream. The chosen factors are summed
//! into one control vector that is added to every response-token input.
//! DA, EM and word logits reuse their embedding tables as output weights.

mod encode;
mod variant;

pub use encode::{encode_context, encode_conversation, EncodedExample, EncodedUtterance, RESPONDER};
pub use variant::Variant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{
    log_softmax, softmax, Affine, Decoder, DecoderShape, Graph, ParamId, ParamStore, Tensor, Var,
    DEFAULT_MAX_LEN,
};
use crate::taxonomy::{CommMechanism, DialogAct, Emotion, FactorTriple, Mechanism};
use crate::text::{Vocab, EOS_ID};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_len: usize,
    pub variant: Variant,
    pub init_std: f64,
}

impl ModelConfig {
    pub fn new(vocab_size: usize, variant: Variant) -> Self {
        ModelConfig {
            vocab_size,
            d_model: 32,
            n_layers: 2,
            n_heads: 4,
            max_len: DEFAULT_MAX_LEN,
            variant,
            init_std: 0.02,
        }
    }

    pub fn shape(&self) -> DecoderShape {
        DecoderShape {
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            max_len: self.max_len,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.shape().validate()?;
        if self.vocab_size < 2 {
            return Err(Error::invalid("vocabulary needs at least [EOS] and [UNK]"));
        }
        if !(self.init_std.is_finite() && self.init_std >= 0.0) {
            return Err(Error::invalid("init_std must be finite and non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    word: ParamId,
    position: ParamId,
    speaker: ParamId,
    da: Option<ParamId>,
    em: Option<ParamId>,
    cm: Option<[ParamId; 3]>,
    f_cm: Option<[Affine; 3]>,
    f_da: Option<Affine>,
    f_em: Option<Affine>,
    decoder: Decoder,
}

/// Hidden states of a context and the summary `h_x` (its last row).
#[derive(Debug, Clone, PartialEq)]
pub struct ContextEncoding {
    pub hidden: Tensor,
    pub h_x: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CmPrediction {
    /// `[P(no), P(yes)]` for ER, IP, EX.
    pub probs: [[f64; 2]; 3],
    pub chosen: CommMechanism,
    pub e_c: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FactorPrediction<T> {
    pub probs: Vec<f64>,
    pub chosen: T,
}

/// Per-stage distributions with upstream stages fixed to given values.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FactorDistributions {
    pub cm: Option<[[f64; 2]; 3]>,
    pub da: Option<Vec<f64>>,
    pub em: Option<Vec<f64>>,
}

/// The four terms of the factorized log-likelihood. Terms for factors the
/// variant does not model are zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct JointLogProb {
    pub cm: f64,
    pub da: f64,
    pub em: f64,
    pub response: f64,
}

impl JointLogProb {
    pub fn total(&self) -> f64 {
        self.cm + self.da + self.em + self.response
    }
}

/// Graph nodes of one teacher-forced example.
pub(crate) struct ExampleTerms {
    /// Mean token cross-entropy of the response, 1x1.
    pub nll: Var,
    pub tokens: usize,
    pub cm: Option<[Var; 3]>,
    pub da: Option<Var>,
    pub em: Option<Var>,
}

/// Selects the argmax outcome; a `pick` argument for the `predict_*` calls.
pub fn argmax_pick(probs: &[f64]) -> Result<usize> {
    Ok(crate::numerics::argmax(probs))
}

#[derive(Debug, Clone)]
pub struct ComaeModel {
    config: ModelConfig,
    vocab: Vocab,
    params: ParamStore,
    layout: Layout,
}

impl ComaeModel {
    pub fn new(config: ModelConfig, vocab: Vocab, seed: u64) -> Result<Self> {
        config.validate()?;
        if vocab.len() != config.vocab_size {
            return Err(Error::invalid(format!(
                "config vocab_size {} but vocabulary has {} entries",
                config.vocab_size,
                vocab.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let std = config.init_std;
        let v = config.variant;
        let mut p = ParamStore::new();
        let table = |p: &mut ParamStore, name: &str, rows: usize, rng: &mut ChaCha8Rng| {
            p.add(name, Tensor::randn(vec![rows, d], std, rng))
        };
        let word = table(&mut p, "word", config.vocab_size, &mut rng);
        let position = table(&mut p, "position", config.max_len, &mut rng);
        let speaker = table(&mut p, "speaker", 2, &mut rng);
        let da = v.da.then(|| table(&mut p, "da", DialogAct::COUNT, &mut rng));
        let em = v.em.then(|| table(&mut p, "em", Emotion::COUNT, &mut rng));
        let cm = v.cm.then(|| {
            Mechanism::ALL.map(|m| table(&mut p, &format!("cm.{}", m.short()), 2, &mut rng))
        });
        let f_cm = v.cm.then(|| {
            Mechanism::ALL
                .map(|m| Affine::init(&mut p, &format!("head.cm.{}", m.short()), d, d, std, &mut rng))
        });
        let f_da = v.da.then(|| {
            let width = d * (1 + v.da_sees_cm() as usize);
            Affine::init(&mut p, "head.da", width, d, std, &mut rng)
        });
        let f_em = v.em.then(|| {
            let width = d * (1 + v.em_sees_cm() as usize + v.em_sees_da() as usize);
            Affine::init(&mut p, "head.em", width, d, std, &mut rng)
        });
        let decoder = Decoder::init(&mut p, "decoder", config.shape(), std, &mut rng)?;
        Ok(ComaeModel {
            config,
            vocab,
            params: p,
            layout: Layout {
                word,
                position,
                speaker,
                da,
                em,
                cm,
                f_cm,
                f_da,
                f_em,
                decoder,
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// The word table, which is also the LM output projection.
    pub fn word_table(&self) -> ParamId {
        self.layout.word
    }

    pub fn lm_head(&self) -> ParamId {
        self.layout.word
    }

    pub fn da_table(&self) -> Option<ParamId> {
        self.layout.da
    }

    pub fn em_table(&self) -> Option<ParamId> {
        self.layout.em
    }

    pub fn cm_tables(&self) -> Option<[ParamId; 3]> {
        self.layout.cm
    }

    pub fn encode(&self, conv: &crate::corpus::Conversation) -> Result<EncodedExample> {
        encode_conversation(&self.vocab, conv)
    }

    fn d(&self) -> usize {
        self.config.d_model
    }

    // ---- graph builders ------------------------------------------------

    fn check_token(&self, t: usize) -> Result<()> {
        if t >= self.config.vocab_size {
            return Err(Error::invalid(format!(
                "token id {t} out of range for vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    /// Context token embeddings; utterances are joined by `[EOS]`, which
    /// carries the annotations of the utterance it ends.
    pub(crate) fn embed_context_g(&self, g: &mut Graph, ctx: &[EncodedUtterance]) -> Result<Var> {
        if ctx.is_empty() {
            return Err(Error::invalid("context has no utterances"));
        }
        let mut tokens = Vec::new();
        let mut speakers = Vec::new();
        let mut das = Vec::new();
        let mut ems = Vec::new();
        for (i, u) in ctx.iter().enumerate() {
            if u.tokens.is_empty() {
                return Err(Error::invalid(format!("context utterance {i} has no tokens")));
            }
            if u.speaker > 1 {
                return Err(Error::invalid(format!(
                    "speaker index {} out of range (0 or 1)",
                    u.speaker
                )));
            }
            let da = match (self.layout.da, u.da) {
                (Some(_), None) => {
                    return Err(Error::invalid(format!("context utterance {i} lacks a DA label")))
                }
                (_, da) => da.map_or(0, DialogAct::index),
            };
            let em = match (self.layout.em, u.em) {
                (Some(_), None) => {
                    return Err(Error::invalid(format!("context utterance {i} lacks an EM label")))
                }
                (_, em) => em.map_or(0, Emotion::index),
            };
            let sep = usize::from(i + 1 < ctx.len());
            for &t in u.tokens.iter().chain(std::iter::repeat_n(&EOS_ID, sep)) {
                self.check_token(t)?;
                tokens.push(t);
                speakers.push(u.speaker);
                das.push(da);
                ems.push(em);
            }
        }
        if tokens.len() > self.config.max_len {
            return Err(Error::invalid(format!(
                "context of {} tokens exceeds the maximum of {}",
                tokens.len(),
                self.config.max_len
            )));
        }
        let positions: Vec<usize> = (0..tokens.len()).collect();
        let mut parts = vec![
            self.lookup(g, self.layout.word, &tokens)?,
            self.lookup(g, self.layout.position, &positions)?,
            self.lookup(g, self.layout.speaker, &speakers)?,
        ];
        if let Some(t) = self.layout.da {
            parts.push(self.lookup(g, t, &das)?);
        }
        if let Some(t) = self.layout.em {
            parts.push(self.lookup(g, t, &ems)?);
        }
        g.sum(&parts)
    }

    fn lookup(&self, g: &mut Graph, table: ParamId, idx: &[usize]) -> Result<Var> {
        let t = g.param(table);
        g.gather(t, idx)
    }

    /// Response inputs `[EOS, y_1, ..]` embedded as word + position +
    /// speaker, plus the control vector on every row.
    fn embed_response_g(
        &self,
        g: &mut Graph,
        start: usize,
        inputs: &[usize],
        speaker: usize,
        control: Option<Var>,
    ) -> Result<Var> {
        if speaker > 1 {
            return Err(Error::invalid(format!(
                "speaker index {speaker} out of range (0 or 1)"
            )));
        }
        if start + inputs.len() > self.config.max_len {
            return Err(Error::invalid(format!(
                "sequence of {} tokens exceeds the maximum of {}",
                start + inputs.len(),
                self.config.max_len
            )));
        }
        for &t in inputs {
            self.check_token(t)?;
        }
        let positions: Vec<usize> = (start..start + inputs.len()).collect();
        let parts = [
            self.lookup(g, self.layout.word, inputs)?,
            self.lookup(g, self.layout.position, &positions)?,
            self.lookup(g, self.layout.speaker, &vec![speaker; inputs.len()])?,
        ];
        let x = g.sum(&parts)?;
        match control {
            Some(c) => g.add_row(x, c),
            None => Ok(x),
        }
    }

    /// Decoder states over context followed by response inputs; returns
    /// the states and the context length.
    pub(crate) fn hidden_g(
        &self,
        g: &mut Graph,
        ctx: &[EncodedUtterance],
        inputs: &[usize],
        speaker: usize,
        control: Option<Var>,
    ) -> Result<(Var, usize)> {
        let cx = self.embed_context_g(g, ctx)?;
        let ctx_len = g.shape(cx).0;
        let x = if inputs.is_empty() {
            cx
        } else {
            let rx = self.embed_response_g(g, ctx_len, inputs, speaker, control)?;
            g.concat_rows(&[cx, rx])?
        };
        Ok((self.layout.decoder.forward(g, x)?, ctx_len))
    }

    fn check_width(&self, g: &Graph, v: Var, what: &str) -> Result<()> {
        let shape = g.shape(v);
        if shape != (1, self.d()) {
            return Err(Error::shape(format!(
                "{what} must be 1x{}, got {}x{}",
                self.d(),
                shape.0,
                shape.1
            )));
        }
        Ok(())
    }

    /// Three 1x2 logit rows, one per mechanism.
    pub(crate) fn cm_logits_g(&self, g: &mut Graph, h_x: Var) -> Result<Option<[Var; 3]>> {
        let (Some(tables), Some(heads)) = (self.layout.cm, self.layout.f_cm) else {
            return Ok(None);
        };
        self.check_width(g, h_x, "h_x")?;
        let mut out = Vec::with_capacity(3);
        for (table, head) in tables.iter().zip(&heads) {
            let h = head.apply_tanh(g, h_x)?;
            let m = g.param(*table);
            out.push(g.matmul_bt(h, m)?);
        }
        Ok(Some([out[0], out[1], out[2]]))
    }

    /// `e_C`: the sum of each mechanism's table row for its chosen bit.
    pub(crate) fn cm_embed_g(&self, g: &mut Graph, cm: CommMechanism) -> Result<Option<Var>> {
        let Some(tables) = self.layout.cm else {
            return Ok(None);
        };
        let rows = tables
            .iter()
            .zip(cm.bits())
            .map(|(t, bit)| self.lookup(g, *t, &[usize::from(bit)]))
            .collect::<Result<Vec<_>>>()?;
        Ok(Some(g.sum(&rows)?))
    }

    pub(crate) fn da_row_g(&self, g: &mut Graph, da: DialogAct) -> Result<Option<Var>> {
        self.layout.da.map(|t| self.lookup(g, t, &[da.index()])).transpose()
    }

    pub(crate) fn em_row_g(&self, g: &mut Graph, em: Emotion) -> Result<Option<Var>> {
        self.layout.em.map(|t| self.lookup(g, t, &[em.index()])).transpose()
    }

    /// DA logits; `e_c` is read only by chained variants.
    pub(crate) fn da_logits_g(&self, g: &mut Graph, h_x: Var, e_c: Option<Var>) -> Result<Option<Var>> {
        let (Some(table), Some(head)) = (self.layout.da, self.layout.f_da) else {
            return Ok(None);
        };
        self.check_width(g, h_x, "h_x")?;
        let mut inputs = vec![h_x];
        if self.variant().da_sees_cm() {
            let e_c = e_c.ok_or_else(|| Error::invalid("chained DA head needs the chosen CM"))?;
            self.check_width(g, e_c, "e_C")?;
            inputs.push(e_c);
        }
        let x = g.concat_cols(&inputs)?;
        let h = head.apply_tanh(g, x)?;
        let m = g.param(table);
        Ok(Some(g.matmul_bt(h, m)?))
    }

    /// EM logits; `e_c` and `da_row` are read only by chained variants.
    pub(crate) fn em_logits_g(
        &self,
        g: &mut Graph,
        h_x: Var,
        e_c: Option<Var>,
        da_row: Option<Var>,
    ) -> Result<Option<Var>> {
        let (Some(table), Some(head)) = (self.layout.em, self.layout.f_em) else {
            return Ok(None);
        };
        self.check_width(g, h_x, "h_x")?;
        let v = self.variant();
        let mut inputs = vec![h_x];
        if v.em_sees_cm() {
            let e_c = e_c.ok_or_else(|| Error::invalid("chained EM head needs the chosen CM"))?;
            self.check_width(g, e_c, "e_C")?;
            inputs.push(e_c);
        }
        if v.em_sees_da() {
            let row = da_row.ok_or_else(|| Error::invalid("chained EM head needs the chosen DA"))?;
            self.check_width(g, row, "DA embedding")?;
            inputs.push(row);
        }
        let x = g.concat_cols(&inputs)?;
        let h = head.apply_tanh(g, x)?;
        let m = g.param(table);
        Ok(Some(g.matmul_bt(h, m)?))
    }

    /// `e_CoMAE` over the factors this variant models; `None` for vanilla.
    pub(crate) fn fused_g(&self, g: &mut Graph, triple: &FactorTriple) -> Result<Option<Var>> {
        let parts: Vec<Var> = [
            self.cm_embed_g(g, triple.cm)?,
            self.da_row_g(g, triple.da)?,
            self.em_row_g(g, triple.em)?,
        ]
        .into_iter()
        .flatten()
        .collect();
        if parts.is_empty() {
            return Ok(None);
        }
        Ok(Some(g.sum(&parts)?))
    }

    /// Teacher-forced loss terms of one example.
    pub(crate) fn example_terms(&self, g: &mut Graph, ex: &EncodedExample) -> Result<ExampleTerms> {
        let v = self.variant();
        let triple = match (v.has_factors(), ex.triple) {
            (true, None) => return Err(Error::invalid("example lacks factor annotations")),
            (_, t) => t,
        };
        let control = match &triple {
            Some(t) => self.fused_g(g, t)?,
            None => None,
        };
        let mut inputs = Vec::with_capacity(ex.response.len() + 1);
        inputs.push(EOS_ID);
        inputs.extend_from_slice(&ex.response);
        let mut targets = ex.response.clone();
        targets.push(EOS_ID);
        let (h, ctx_len) = self.hidden_g(g, &ex.context, &inputs, ex.response_speaker, control)?;
        let s = g.slice_rows(h, ctx_len, inputs.len())?;
        let w = g.param(self.layout.word);
        let logits = g.matmul_bt(s, w)?;
        let nll = g.cross_entropy(logits, &targets)?;
        let mut terms = ExampleTerms {
            nll,
            tokens: targets.len(),
            cm: None,
            da: None,
            em: None,
        };
        let Some(t) = triple else {
            return Ok(terms);
        };
        let h_x = g.slice_rows(h, ctx_len - 1, 1)?;
        let e_c = self.cm_embed_g(g, t.cm)?;
        if let Some(rows) = self.cm_logits_g(g, h_x)? {
            let bits = t.cm.bits();
            let mut ce = Vec::with_capacity(3);
            for (row, bit) in rows.into_iter().zip(bits) {
                ce.push(g.cross_entropy(row, &[usize::from(bit)])?);
            }
            terms.cm = Some([ce[0], ce[1], ce[2]]);
        }
        if let Some(logits) = self.da_logits_g(g, h_x, e_c)? {
            terms.da = Some(g.cross_entropy(logits, &[t.da.index()])?);
        }
        let da_row = self.da_row_g(g, t.da)?;
        if let Some(logits) = self.em_logits_g(g, h_x, e_c, da_row)? {
            terms.em = Some(g.cross_entropy(logits, &[t.em.index()])?);
        }
        Ok(terms)
    }

    // ---- value-level operations ---------------------------------------

    /// Token embeddings of a context (before the decoder).
    pub fn embed_context(&self, ctx: &[EncodedUtterance]) -> Result<Tensor> {
        let mut g = Graph::new(&self.params);
        let x = self.embed_context_g(&mut g, ctx)?;
        Ok(g.to_tensor(x))
    }

    pub fn encode_context(&self, ctx: &[EncodedUtterance]) -> Result<ContextEncoding> {
        let mut g = Graph::new(&self.params);
        let (h, len) = self.hidden_g(&mut g, ctx, &[], 0, None)?;
        let hidden = g.to_tensor(h);
        let h_x = hidden.row(len - 1).to_vec();
        Ok(ContextEncoding { hidden, h_x })
    }

    fn row_input(&self, g: &mut Graph, v: &[f64], what: &str) -> Result<Var> {
        if v.len() != self.d() {
            return Err(Error::shape(format!(
                "{what} must have width {}, got {}",
                self.d(),
                v.len()
            )));
        }
        g.input(1, v.len(), v.to_vec())
    }

    fn no_factor(&self, name: &str) -> Error {
        Error::invalid(format!(
            "variant {} has no {name} head",
            self.config.variant
        ))
    }

    /// Bernoulli distribution per mechanism, the chosen bits and `e_C`.
    pub fn predict_cm(
        &self,
        h_x: &[f64],
        mut pick: impl FnMut(&[f64]) -> Result<usize>,
    ) -> Result<CmPrediction> {
        let mut g = Graph::new(&self.params);
        let hx = self.row_input(&mut g, h_x, "h_x")?;
        let rows = self.cm_logits_g(&mut g, hx)?.ok_or_else(|| self.no_factor("CM"))?;
        let mut probs = [[0.0; 2]; 3];
        let mut chosen = CommMechanism::default();
        for (i, (row, m)) in rows.iter().zip(Mechanism::ALL).enumerate() {
            let p = softmax(g.value(*row))?;
            probs[i] = [p[0], p[1]];
            chosen.set(m, checked_pick(&mut pick, &p)? == 1);
        }
        let e_c = self.cm_embed_g(&mut g, chosen)?.expect("CM tables exist");
        let e_c = g.value(e_c).to_vec();
        Ok(CmPrediction { probs, chosen, e_c })
    }

    /// DA distribution. `e_c` is required by chained variants that model
    /// CM and ignored otherwise.
    pub fn predict_da(
        &self,
        h_x: &[f64],
        e_c: Option<&[f64]>,
        mut pick: impl FnMut(&[f64]) -> Result<usize>,
    ) -> Result<FactorPrediction<DialogAct>> {
        let mut g = Graph::new(&self.params);
        let hx = self.row_input(&mut g, h_x, "h_x")?;
        let ec = match e_c {
            Some(e) if self.variant().da_sees_cm() => Some(self.row_input(&mut g, e, "e_C")?),
            _ => None,
        };
        let logits = self.da_logits_g(&mut g, hx, ec)?.ok_or_else(|| self.no_factor("DA"))?;
        let probs = softmax(g.value(logits))?;
        let chosen = DialogAct::new(checked_pick(&mut pick, &probs)?)?;
        Ok(FactorPrediction { probs, chosen })
    }

    /// EM distribution. Upstream choices are read only by chained variants.
    pub fn predict_em(
        &self,
        h_x: &[f64],
        e_c: Option<&[f64]>,
        da: Option<DialogAct>,
        mut pick: impl FnMut(&[f64]) -> Result<usize>,
    ) -> Result<FactorPrediction<Emotion>> {
        let v = self.variant();
        let mut g = Graph::new(&self.params);
        let hx = self.row_input(&mut g, h_x, "h_x")?;
        let ec = match e_c {
            Some(e) if v.em_sees_cm() => Some(self.row_input(&mut g, e, "e_C")?),
            _ => None,
        };
        let da_row = match da {
            Some(a) if v.em_sees_da() => self.da_row_g(&mut g, a)?,
            _ => None,
        };
        let logits = self
            .em_logits_g(&mut g, hx, ec, da_row)?
            .ok_or_else(|| self.no_factor("EM"))?;
        let probs = softmax(g.value(logits))?;
        let chosen = Emotion::new(checked_pick(&mut pick, &probs)?)?;
        Ok(FactorPrediction { probs, chosen })
    }

    /// `e_C + M_A[da] + M_E[em]` over modeled factors; zeros for vanilla.
    pub fn fuse_factors(&self, triple: &FactorTriple) -> Result<Vec<f64>> {
        let mut g = Graph::new(&self.params);
        Ok(match self.fused_g(&mut g, triple)? {
            Some(v) => g.value(v).to_vec(),
            None => vec![0.0; self.d()],
        })
    }

    /// Stage distributions with every upstream stage fixed to `truth`.
    pub fn factor_distributions(&self, h_x: &[f64], truth: &FactorTriple) -> Result<FactorDistributions> {
        let mut g = Graph::new(&self.params);
        let hx = self.row_input(&mut g, h_x, "h_x")?;
        let e_c = self.cm_embed_g(&mut g, truth.cm)?;
        let cm = match self.cm_logits_g(&mut g, hx)? {
            Some(rows) => {
                let mut out = [[0.0; 2]; 3];
                for (o, r) in out.iter_mut().zip(rows) {
                    let p = softmax(g.value(r))?;
                    *o = [p[0], p[1]];
                }
                Some(out)
            }
            None => None,
        };
        let da = match self.da_logits_g(&mut g, hx, e_c)? {
            Some(l) => Some(softmax(g.value(l))?),
            None => None,
        };
        let da_row = self.da_row_g(&mut g, truth.da)?;
        let em = match self.em_logits_g(&mut g, hx, e_c, da_row)? {
            Some(l) => Some(softmax(g.value(l))?),
            None => None,
        };
        Ok(FactorDistributions { cm, da, em })
    }

    /// Distribution of the next response token after `[EOS] prefix`.
    pub fn next_token_distribution(
        &self,
        ctx: &[EncodedUtterance],
        prefix: &[usize],
        e_comae: Option<&[f64]>,
        speaker: usize,
    ) -> Result<Vec<f64>> {
        softmax(&self.next_token_logits(ctx, prefix, e_comae, speaker)?)
    }

    pub fn next_token_logits(
        &self,
        ctx: &[EncodedUtterance],
        prefix: &[usize],
        e_comae: Option<&[f64]>,
        speaker: usize,
    ) -> Result<Vec<f64>> {
        let mut g = Graph::new(&self.params);
        let control = e_comae
            .map(|e| self.row_input(&mut g, e, "e_CoMAE"))
            .transpose()?;
        let mut inputs = Vec::with_capacity(prefix.len() + 1);
        inputs.push(EOS_ID);
        inputs.extend_from_slice(prefix);
        let (h, _) = self.hidden_g(&mut g, ctx, &inputs, speaker, control)?;
        let rows = g.shape(h).0;
        let s = g.slice_rows(h, rows - 1, 1)?;
        let w = g.param(self.layout.word);
        let logits = g.matmul_bt(s, w)?;
        Ok(g.value(logits).to_vec())
    }

    /// `ln P(C|x) + ln P(A|x,C) + ln P(E|x,C,A) + ln P(y|x,C,A,E)` with
    /// every condition teacher-forced. The response term covers the
    /// closing `[EOS]`.
    pub fn joint_log_prob(&self, ex: &EncodedExample) -> Result<JointLogProb> {
        let mut g = Graph::new(&self.params);
        let t = self.example_terms(&mut g, ex)?;
        let neg = |g: &Graph, v: Option<Var>| v.map_or(0.0, |v| -g.scalar(v));
        Ok(JointLogProb {
            cm: t.cm.map_or(0.0, |r| r.iter().map(|&v| -g.scalar(v)).sum()),
            da: neg(&g, t.da),
            em: neg(&g, t.em),
            response: -g.scalar(t.nll) * t.tokens as f64,
        })
    }

    /// Summed response NLL (closing `[EOS]` included) and the token count,
    /// conditioned on the annotated factors.
    pub fn response_nll(&self, ex: &EncodedExample) -> Result<(f64, usize)> {
        let mut g = Graph::new(&self.params);
        let t = self.example_terms(&mut g, ex)?;
        Ok((g.scalar(t.nll) * t.tokens as f64, t.tokens))
    }

    /// Log-probabilities of the LM head applied to one hidden row.
    pub fn lm_log_probs(&self, state: &[f64]) -> Result<Vec<f64>> {
        let mut g = Graph::new(&self.params);
        let s = self.row_input(&mut g, state, "state")?;
        let w = g.param(self.layout.word);
        let logits = g.matmul_bt(s, w)?;
        log_softmax(g.value(logits))
    }
}

fn checked_pick(pick: &mut impl FnMut(&[f64]) -> Result<usize>, probs: &[f64]) -> Result<usize> {
    let i = pick(probs)?;
    if i >= probs.len() {
        return Err(Error::invalid(format!(
            "picked outcome {i} of a {}-way distribution",
            probs.len()
        )));
    }
    Ok(i)
}

#[cfg(test)]
mod tests;
