//! Trainable speech and text encoders feeding the cross-modal encoder.

use ctxasr_nn::{NodeId, ParamId, ParamStore, Real, Tensor};
use serde::{Deserialize, Serialize};

use crate::corpus::FrameSequence;
use crate::error::{Error, Result};
use crate::layers::{add_positions, EncoderBlock, Init, LayerNorm, Linear, Pass};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    /// Frame width for the speech encoder, vocabulary size for the text one.
    pub input_dim: usize,
    pub dropout: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            num_layers: 2,
            num_heads: 4,
            d_model: 64,
            d_ff: 256,
            input_dim: 16,
            dropout: 0.1,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self, what: &str) -> Result<()> {
        if self.num_heads == 0 || self.d_model == 0 || self.d_model % self.num_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "{what}: d_model {} must be a positive multiple of num_heads {}",
                self.d_model, self.num_heads
            )));
        }
        if self.d_ff == 0 || self.input_dim == 0 {
            return Err(Error::InvalidConfig(format!("{what}: d_ff and input_dim must be positive")));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidConfig(format!("{what}: dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Frames → input projection → positions → transformer stack → output
/// projection to the shared width.
#[derive(Clone, Debug)]
pub struct SpeechEncoder {
    pub config: EncoderConfig,
    input: Linear,
    blocks: Vec<EncoderBlock>,
    norm: LayerNorm,
    output: Linear,
}

impl SpeechEncoder {
    pub fn new<F: Real>(init: &mut Init<F>, name: &str, config: &EncoderConfig, out_dim: usize) -> Result<Self> {
        config.validate("speech encoder")?;
        let d = config.d_model;
        Ok(Self {
            config: config.clone(),
            input: Linear::new(init, &format!("{name}.input"), config.input_dim, d, true)?,
            blocks: (0..config.num_layers)
                .map(|i| EncoderBlock::new(init, &format!("{name}.block{i}"), d, config.num_heads, config.d_ff))
                .collect::<Result<_>>()?,
            norm: LayerNorm::new(init, &format!("{name}.norm"), d)?,
            output: Linear::new(init, &format!("{name}.proj"), d, out_dim, true)?,
        })
    }

    pub fn output_dim(&self) -> usize {
        self.output.dout
    }

    pub fn forward<F: Real>(&self, p: &mut Pass<F>, frames: NodeId) -> Result<NodeId> {
        let (n, dim) = (p.rows(frames)?, p.cols(frames)?);
        if n == 0 {
            return Err(Error::InvalidInput("speech encoder input is empty".into()));
        }
        if dim != self.config.input_dim {
            return Err(Error::InvalidInput(format!(
                "frames have width {dim}, encoder expects {}",
                self.config.input_dim
            )));
        }
        let mut x = self.input.forward(p, frames)?;
        x = add_positions(p, x)?;
        x = p.dropout(x)?;
        for b in &self.blocks {
            x = b.forward(p, x)?;
        }
        x = self.norm.forward(p, x)?;
        self.output.forward(p, x)
    }
}

/// Character embedding → positions → transformer stack.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub config: EncoderConfig,
    embedding: ParamId,
    blocks: Vec<EncoderBlock>,
    norm: LayerNorm,
}

impl TextEncoder {
    pub fn new<F: Real>(init: &mut Init<F>, name: &str, config: &EncoderConfig) -> Result<Self> {
        config.validate("text encoder")?;
        let d = config.d_model;
        Ok(Self {
            config: config.clone(),
            embedding: init.normal(&format!("{name}.embedding"), vec![config.input_dim, d], 1.0)?,
            blocks: (0..config.num_layers)
                .map(|i| EncoderBlock::new(init, &format!("{name}.block{i}"), d, config.num_heads, config.d_ff))
                .collect::<Result<_>>()?,
            norm: LayerNorm::new(init, &format!("{name}.norm"), d)?,
        })
    }

    pub fn output_dim(&self) -> usize {
        self.config.d_model
    }

    pub fn forward<F: Real>(&self, p: &mut Pass<F>, tokens: &[usize]) -> Result<NodeId> {
        if tokens.is_empty() {
            return Err(Error::InvalidInput("text encoder input is empty".into()));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.config.input_dim) {
            return Err(Error::UnknownChar(bad));
        }
        let table = p.param(self.embedding);
        let mut x = p.g.embedding(table, tokens)?;
        x = add_positions(p, x)?;
        x = p.dropout(x)?;
        for b in &self.blocks {
            x = b.forward(p, x)?;
        }
        self.norm.forward(p, x)
    }
}

/// Evaluates the speech encoder alone on one utterance.
pub fn speech_encode<F: Real>(enc: &SpeechEncoder, params: &ParamStore<F>, frames: &FrameSequence) -> Result<Tensor<F>> {
    let mut p = Pass::eval(params);
    let x = p.constant(frames.to_tensor());
    let out = enc.forward(&mut p, x)?;
    Ok(p.value(out)?.clone())
}

/// Evaluates the text encoder alone on one transcript.
pub fn text_encode<F: Real>(enc: &TextEncoder, params: &ParamStore<F>, tokens: &[usize]) -> Result<Tensor<F>> {
    let mut p = Pass::eval(params);
    let out = enc.forward(&mut p, tokens)?;
    Ok(p.value(out)?.clone())
}
