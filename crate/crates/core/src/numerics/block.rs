use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::tensor::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Default context window, the positional table height.
pub const DEFAULT_MAX_LEN: usize = 1024;

/// Shape of a causal decoder stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderShape {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_len: usize,
}

impl DecoderShape {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::invalid(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.max_len == 0 {
            return Err(Error::invalid("max_len must be positive"));
        }
        Ok(())
    }
}

/// Affine map followed by an optional activation, `x W + b`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Affine {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Affine {
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        std: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            Tensor::randn(vec![fan_in, fan_out], std, rng),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(vec![1, fan_out]));
        Affine { weight, bias }
    }

    pub fn apply(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        g.affine(x, w, b)
    }

    /// `tanh(x W + b)`, the non-linear layer used by the factor heads.
    pub fn apply_tanh(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let y = self.apply(g, x)?;
        Ok(g.tanh(y))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl Norm {
    pub fn init(store: &mut ParamStore, name: &str, width: usize) -> Self {
        Norm {
            gain: store.add(format!("{name}.gain"), Tensor::filled(vec![1, width], 1.0)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(vec![1, width])),
        }
    }

    pub fn apply(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        g.layer_norm(x, gain, bias)
    }
}

/// Parameters of one pre-norm decoder block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockParams {
    pub ln_attn: Norm,
    pub qkv: Affine,
    pub attn_out: Affine,
    pub ln_mlp: Norm,
    pub mlp_in: Affine,
    pub mlp_out: Affine,
}

impl BlockParams {
    pub fn init(store: &mut ParamStore, name: &str, d: usize, std: f64, rng: &mut impl Rng) -> Self {
        BlockParams {
            ln_attn: Norm::init(store, &format!("{name}.ln_attn"), d),
            qkv: Affine::init(store, &format!("{name}.qkv"), d, 3 * d, std, rng),
            attn_out: Affine::init(store, &format!("{name}.attn_out"), d, d, std, rng),
            ln_mlp: Norm::init(store, &format!("{name}.ln_mlp"), d),
            mlp_in: Affine::init(store, &format!("{name}.mlp_in"), d, 4 * d, std, rng),
            mlp_out: Affine::init(store, &format!("{name}.mlp_out"), 4 * d, d, std, rng),
        }
    }
}

/// One pre-norm residual block:
/// `h = x + Attn(LN(x))`, `out = h + MLP(LN(h))`.
pub fn causal_attention_block(
    g: &mut Graph,
    block: &BlockParams,
    x: Var,
    heads: usize,
) -> Result<Var> {
    let a = block.ln_attn.apply(g, x)?;
    let qkv = block.qkv.apply(g, a)?;
    let att = g.causal_attention(qkv, heads)?;
    let att = block.attn_out.apply(g, att)?;
    let h = g.add(x, att)?;
    let m = block.ln_mlp.apply(g, h)?;
    let m = block.mlp_in.apply(g, m)?;
    let m = g.gelu(m);
    let m = block.mlp_out.apply(g, m)?;
    g.add(h, m)
}

/// Stack of blocks with a final layer norm.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Decoder {
    pub shape: DecoderShape,
    pub blocks: Vec<BlockParams>,
    pub ln_final: Norm,
}

impl Decoder {
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        shape: DecoderShape,
        std: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        shape.validate()?;
        let blocks = (0..shape.n_layers)
            .map(|i| BlockParams::init(store, &format!("{name}.block{i}"), shape.d_model, std, rng))
            .collect();
        let ln_final = Norm::init(store, &format!("{name}.ln_final"), shape.d_model);
        Ok(Decoder {
            shape,
            blocks,
            ln_final,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (len, width) = g.shape(x);
        if len > self.shape.max_len {
            return Err(Error::invalid(format!(
                "sequence of {len} tokens exceeds the maximum of {}",
                self.shape.max_len
            )));
        }
        if width != self.shape.d_model {
            return Err(Error::shape(format!(
                "decoder width {} fed {width}-wide inputs",
                self.shape.d_model
            )));
        }
        let mut h = x;
        for block in &self.blocks {
            h = causal_attention_block(g, block, h, self.shape.n_heads)?;
        }
        self.ln_final.apply(g, h)
    }
}
