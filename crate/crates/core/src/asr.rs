//! Conformer encoder / contextual transformer decoder recognizer.
//!
//! The encoder subsamples frames four-fold with two stride-2 convolutions
//! and stacks Conformer blocks. Every decoder block attends causally to
//! its own prefix, then to the encoder output, then to the same context
//! matrix built from extracted utterance representations.

use std::fmt;
use std::str::FromStr;

use ctxasr_nn::{AttnMask, NodeId, ParamId, ParamStore, Real, SeedTree, Tensor};
use serde::{Deserialize, Serialize};

use crate::corpus::{Conversation, FrameSequence};
use crate::ctc::{min_frames, CtcLossOp};
use crate::error::{Error, Result};
use crate::extractor::{diverged, extract_context, Extractor};
use crate::layers::{
    add_positions, Activation, AttentionSpec, AttentionTrace, FeedForward, Init, LayerNorm, Linear,
    MultiHeadAttention, Pass,
};
use crate::train::{check_loss, epoch_batches, OptimConfig, Optimizer};
use crate::vocab::{self, BLANK, SOS_EOS};

/// Time reduction of the convolutional front end.
pub const SUBSAMPLE_FACTOR: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AsrConfig {
    /// Corpus characters; the decoder adds blank and start/end symbols.
    pub vocab_size: usize,
    pub feature_dim: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub encoder_blocks: usize,
    pub decoder_blocks: usize,
    pub conv_kernel: usize,
    pub subsample_channels: usize,
    /// Width of the context rows (the extractor's model width).
    pub context_dim: usize,
    pub dropout: f64,
    pub label_smoothing: f64,
}

impl Default for AsrConfig {
    fn default() -> Self {
        Self {
            vocab_size: 32,
            feature_dim: 16,
            d_model: 64,
            heads: 4,
            d_ff: 256,
            encoder_blocks: 4,
            decoder_blocks: 2,
            conv_kernel: 7,
            subsample_channels: 16,
            context_dim: 64,
            dropout: 0.1,
            label_smoothing: 0.1,
        }
    }
}

impl AsrConfig {
    pub fn output_size(&self) -> usize {
        self.vocab_size + vocab::ASR_SPECIALS
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.heads == 0 || self.d_model == 0 || self.d_model % self.heads != 0 {
            return bad(format!("asr d_model {} must be a positive multiple of heads {}", self.d_model, self.heads));
        }
        if self.vocab_size == 0 || self.feature_dim == 0 || self.d_ff == 0 || self.context_dim == 0 {
            return bad("asr vocab_size, feature_dim, d_ff and context_dim must be positive".into());
        }
        if self.encoder_blocks == 0 || self.decoder_blocks == 0 {
            return bad("asr needs at least one encoder and one decoder block".into());
        }
        if self.conv_kernel % 2 == 0 || self.subsample_channels == 0 {
            return bad(format!("conv_kernel must be odd, got {}", self.conv_kernel));
        }
        if !(0.0..1.0).contains(&self.dropout) || !(0.0..1.0).contains(&self.label_smoothing) {
            return bad("dropout and label_smoothing must lie in [0, 1)".into());
        }
        Ok(())
    }
}

fn halve(n: usize) -> usize {
    n.div_ceil(2)
}

/// Encoder length for `frames` input frames.
pub fn subsampled_len(frames: usize) -> usize {
    halve(halve(frames))
}

#[derive(Clone, Debug)]
struct Subsampler {
    conv1: (ParamId, ParamId),
    conv2: (ParamId, ParamId),
    proj: Linear,
}

impl Subsampler {
    fn new<F: Real>(init: &mut Init<F>, cfg: &AsrConfig) -> Result<Self> {
        let c = cfg.subsample_channels;
        let conv = |init: &mut Init<F>, name: &str, cin: usize| -> Result<(ParamId, ParamId)> {
            let a = (6.0 / ((cin + c) * 9) as f64).sqrt();
            Ok((
                init.uniform(&format!("{name}.w"), vec![c, cin, 3, 3], a)?,
                init.zeros(&format!("{name}.b"), vec![1, c])?,
            ))
        };
        let width = c * subsampled_len(cfg.feature_dim);
        Ok(Self {
            conv1: conv(init, "sub.conv1", 1)?,
            conv2: conv(init, "sub.conv2", c)?,
            proj: Linear::new(init, "sub.proj", width, cfg.d_model, true)?,
        })
    }

    fn forward<F: Real>(&self, p: &mut Pass<F>, frames: NodeId) -> Result<NodeId> {
        let (t, d) = (p.rows(frames)?, p.cols(frames)?);
        if t < SUBSAMPLE_FACTOR {
            return Err(Error::TooShort {
                len: t,
                factor: SUBSAMPLE_FACTOR,
            });
        }
        let x = p.g.reshape(frames, &[1, t, d])?;
        let (w, b) = (p.param(self.conv1.0), p.param(self.conv1.1));
        let x = p.g.conv2d(x, w, b, 2, 1)?;
        let x = p.g.relu(x)?;
        let (w, b) = (p.param(self.conv2.0), p.param(self.conv2.1));
        let x = p.g.conv2d(x, w, b, 2, 1)?;
        let x = p.g.relu(x)?;
        let x = p.g.channels_to_time(x)?;
        self.proj.forward(p, x)
    }
}

/// `s = z + MHSA(LN z)`, `c = s + Conv(LN s)`, `z' = LN(c + FFN(LN c))`.
#[derive(Clone, Debug)]
pub struct ConformerBlock {
    norm_attn: LayerNorm,
    attn: MultiHeadAttention,
    norm_conv: LayerNorm,
    pointwise_in: Linear,
    depthwise: ParamId,
    depthwise_bias: ParamId,
    pointwise_out: Linear,
    norm_ff: LayerNorm,
    ff: FeedForward,
    norm_out: LayerNorm,
}

impl ConformerBlock {
    pub fn new<F: Real>(init: &mut Init<F>, name: &str, cfg: &AsrConfig, zero_outputs: bool) -> Result<Self> {
        let d = cfg.d_model;
        let spec = AttentionSpec {
            d_model: d,
            d_kv: d,
            heads: cfg.heads,
            bias: true,
            zero_output: zero_outputs,
        };
        let k = cfg.conv_kernel;
        Ok(Self {
            norm_attn: LayerNorm::new(init, &format!("{name}.norm_attn"), d)?,
            attn: MultiHeadAttention::new(init, &format!("{name}.attn"), spec)?,
            norm_conv: LayerNorm::new(init, &format!("{name}.norm_conv"), d)?,
            pointwise_in: Linear::new(init, &format!("{name}.conv.pw_in"), d, d, true)?,
            depthwise: init.uniform(&format!("{name}.conv.dw"), vec![k, d], (3.0 / k as f64).sqrt())?,
            depthwise_bias: init.zeros(&format!("{name}.conv.dw_bias"), vec![1, d])?,
            pointwise_out: Linear::new(init, &format!("{name}.conv.pw_out"), d, d, true)?,
            norm_ff: LayerNorm::new(init, &format!("{name}.norm_ff"), d)?,
            ff: FeedForward::new(init, &format!("{name}.ff"), d, cfg.d_ff, Activation::Swish, zero_outputs)?,
            norm_out: LayerNorm::new(init, &format!("{name}.norm_out"), d)?,
        })
    }

    pub fn forward<F: Real>(&self, p: &mut Pass<F>, z: NodeId) -> Result<NodeId> {
        let h = self.norm_attn.forward(p, z)?;
        let a = self.attn.forward(p, h, h, AttnMask::None)?.output;
        let a = p.dropout(a)?;
        let s = p.g.add(z, a)?;

        let h = self.norm_conv.forward(p, s)?;
        let h = self.pointwise_in.forward(p, h)?;
        let k = p.param(self.depthwise);
        let h = p.g.depthwise_conv1d(h, k)?;
        let kb = p.param(self.depthwise_bias);
        let h = p.g.add_bias(h, kb)?;
        let h = p.g.swish(h)?;
        let h = self.pointwise_out.forward(p, h)?;
        let h = p.dropout(h)?;
        let c = p.g.add(s, h)?;

        let h = self.norm_ff.forward(p, c)?;
        let f = self.ff.forward(p, h)?;
        let f = p.dropout(f)?;
        let out = p.g.add(c, f)?;
        self.norm_out.forward(p, out)
    }
}

#[derive(Clone, Debug)]
struct DecoderBlock {
    norm_self: LayerNorm,
    self_attn: MultiHeadAttention,
    norm_src: LayerNorm,
    src_attn: MultiHeadAttention,
    norm_ctx: LayerNorm,
    ctx_attn: MultiHeadAttention,
    norm_ff: LayerNorm,
    ff: FeedForward,
}

impl DecoderBlock {
    fn new<F: Real>(init: &mut Init<F>, name: &str, cfg: &AsrConfig) -> Result<Self> {
        let d = cfg.d_model;
        let plain = AttentionSpec {
            d_model: d,
            d_kv: d,
            heads: cfg.heads,
            bias: true,
            zero_output: false,
        };
        // Without biases and with a zero output projection, an all-zero
        // context contributes exactly nothing and its projection weights
        // receive no gradient.
        let ctx = AttentionSpec {
            d_kv: cfg.context_dim,
            bias: false,
            zero_output: true,
            ..plain
        };
        Ok(Self {
            norm_self: LayerNorm::new(init, &format!("{name}.norm_self"), d)?,
            self_attn: MultiHeadAttention::new(init, &format!("{name}.self_attn"), plain)?,
            norm_src: LayerNorm::new(init, &format!("{name}.norm_src"), d)?,
            src_attn: MultiHeadAttention::new(init, &format!("{name}.src_attn"), plain)?,
            norm_ctx: LayerNorm::new(init, &format!("{name}.norm_ctx"), d)?,
            ctx_attn: MultiHeadAttention::new(init, &format!("{name}.ctx_attn"), ctx)?,
            norm_ff: LayerNorm::new(init, &format!("{name}.norm_ff"), d)?,
            ff: FeedForward::new(init, &format!("{name}.ff"), d, cfg.d_ff, Activation::Relu, false)?,
        })
    }

    fn forward<F: Real>(&self, p: &mut Pass<F>, t: NodeId, z: NodeId, ctx: NodeId) -> Result<(NodeId, AttentionTrace)> {
        let h = self.norm_self.forward(p, t)?;
        let a = self.self_attn.forward(p, h, h, AttnMask::Causal)?.output;
        let a = p.dropout(a)?;
        let o = p.g.add(t, a)?;

        let h = self.norm_src.forward(p, o)?;
        let a = self.src_attn.forward(p, h, z, AttnMask::None)?.output;
        let a = p.dropout(a)?;
        let r = p.g.add(o, a)?;

        let h = self.norm_ctx.forward(p, r)?;
        let trace = self.ctx_attn.forward(p, h, ctx, AttnMask::None)?;
        let a = p.dropout(trace.output)?;
        let t = p.g.add(r, a)?;

        let h = self.norm_ff.forward(p, t)?;
        let f = self.ff.forward(p, h)?;
        let f = p.dropout(f)?;
        Ok((p.g.add(t, f)?, trace))
    }
}

/// Decoder logits together with each block's context-attention trace.
#[derive(Clone, Debug)]
pub struct DecoderOutput {
    pub logits: NodeId,
    pub context_traces: Vec<AttentionTrace>,
}

/// Parameter layout of the recognizer. Values live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct AsrModel {
    pub config: AsrConfig,
    sub: Subsampler,
    encoder: Vec<ConformerBlock>,
    embedding: ParamId,
    decoder: Vec<DecoderBlock>,
    dec_norm: LayerNorm,
    output: Linear,
    ctc_head: Linear,
}

impl AsrModel {
    pub fn new<F: Real>(config: &AsrConfig, store: &mut ParamStore<F>, seeds: SeedTree) -> Result<Self> {
        config.validate()?;
        let mut init = Init::new(store, seeds);
        let d = config.d_model;
        Ok(Self {
            config: config.clone(),
            sub: Subsampler::new(&mut init, config)?,
            encoder: (0..config.encoder_blocks)
                .map(|i| ConformerBlock::new(&mut init, &format!("enc.block{i}"), config, false))
                .collect::<Result<_>>()?,
            embedding: init.normal("dec.embedding", vec![config.output_size(), d], 1.0)?,
            decoder: (0..config.decoder_blocks)
                .map(|i| DecoderBlock::new(&mut init, &format!("dec.block{i}"), config))
                .collect::<Result<_>>()?,
            dec_norm: LayerNorm::new(&mut init, "dec.norm", d)?,
            output: Linear::new(&mut init, "dec.out", d, config.output_size(), true)?,
            ctc_head: Linear::new(&mut init, "ctc.out", d, config.vocab_size + 1, true)?,
        })
    }

    pub fn init(config: &AsrConfig, seed: u64) -> Result<(Self, ParamStore<f32>)> {
        let mut store = ParamStore::new();
        let model = Self::new(config, &mut store, SeedTree::new(seed).named("asr-init"))?;
        Ok((model, store))
    }

    pub fn subsample<F: Real>(&self, p: &mut Pass<F>, frames: NodeId) -> Result<NodeId> {
        self.sub.forward(p, frames)
    }

    /// Subsampling followed by the Conformer stack.
    pub fn encode<F: Real>(&self, p: &mut Pass<F>, frames: &FrameSequence) -> Result<NodeId> {
        let x = p.constant(frames.to_tensor());
        let mut z = self.sub.forward(p, x)?;
        z = p.g.scale(z, (self.config.d_model as f64).sqrt())?;
        z = add_positions(p, z)?;
        z = p.dropout(z)?;
        for b in &self.encoder {
            z = b.forward(p, z)?;
        }
        Ok(z)
    }

    /// Logits for every position of `tokens` (which start with the start symbol).
    pub fn decode<F: Real>(&self, p: &mut Pass<F>, tokens: &[usize], z: NodeId, ctx: NodeId) -> Result<DecoderOutput> {
        if tokens.first() != Some(&SOS_EOS) {
            return Err(Error::InvalidInput("decoder input must begin with the start symbol".into()));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.config.output_size()) {
            return Err(Error::InvalidInput(format!("token {bad} is outside the decoder vocabulary")));
        }
        if p.cols(ctx)? != self.config.context_dim {
            return Err(Error::InvalidInput(format!(
                "context rows have width {}, expected {}",
                p.cols(ctx)?,
                self.config.context_dim
            )));
        }
        let table = p.param(self.embedding);
        let mut t = p.g.embedding(table, tokens)?;
        t = p.g.scale(t, (self.config.d_model as f64).sqrt())?;
        t = add_positions(p, t)?;
        t = p.dropout(t)?;
        let mut traces = Vec::with_capacity(self.decoder.len());
        for b in &self.decoder {
            let (next, trace) = b.forward(p, t, z, ctx)?;
            traces.push(trace);
            t = next;
        }
        let t = self.dec_norm.forward(p, t)?;
        Ok(DecoderOutput {
            logits: self.output.forward(p, t)?,
            context_traces: traces,
        })
    }
}

/// Which utterances feed the decoder's context attention.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextMode {
    None,
    Cur,
    ConOne,
    ConTwo,
    ConOneTwo,
}

impl ContextMode {
    pub const ALL: [ContextMode; 5] = [
        ContextMode::None,
        ContextMode::Cur,
        ContextMode::ConOne,
        ContextMode::ConTwo,
        ContextMode::ConOneTwo,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ContextMode::None => "none",
            ContextMode::Cur => "cur",
            ContextMode::ConOne => "con_one",
            ContextMode::ConTwo => "con_two",
            ContextMode::ConOneTwo => "con_one_two",
        }
    }

    /// History offsets spliced before the current utterance, oldest first.
    pub fn history(self) -> &'static [usize] {
        match self {
            ContextMode::None | ContextMode::Cur => &[],
            ContextMode::ConOne => &[1],
            ContextMode::ConTwo => &[2],
            ContextMode::ConOneTwo => &[2, 1],
        }
    }
}

impl fmt::Display for ContextMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ContextMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ContextMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown context mode '{s}'")))
    }
}

/// Splices the context rows for utterance `index` from per-utterance
/// representations of one conversation. Missing history becomes one zero row.
pub fn splice_context<F: Real>(reps: &[Tensor<F>], index: usize, mode: ContextMode, dim: usize) -> Result<Tensor<F>> {
    if index >= reps.len() {
        return Err(Error::InvalidInput(format!(
            "utterance {index} is out of range for a conversation of {}",
            reps.len()
        )));
    }
    if mode == ContextMode::None {
        return Ok(Tensor::zeros(vec![1, dim]));
    }
    let zero = Tensor::zeros(vec![1, dim]);
    let mut parts: Vec<&Tensor<F>> = mode
        .history()
        .iter()
        .map(|&back| index.checked_sub(back).map_or(&zero, |j| &reps[j]))
        .collect();
    parts.push(&reps[index]);
    let mut data = Vec::new();
    let mut rows = 0;
    for t in parts {
        if t.cols() != dim {
            return Err(Error::InvalidInput(format!("context row width {} != {dim}", t.cols())));
        }
        rows += t.rows();
        data.extend_from_slice(t.data());
    }
    Ok(Tensor::matrix(rows, dim, data)?)
}

/// Context matrix for utterance `index` of `conv`, extracting only the
/// utterances the mode needs.
pub fn build_context<F: Real>(
    conv: &Conversation,
    index: usize,
    mode: ContextMode,
    ext: &Extractor,
    params: &ParamStore<F>,
) -> Result<Tensor<F>> {
    let n = conv.utterances.len();
    if index >= n {
        return Err(Error::InvalidInput(format!("utterance {index} is out of range for {} utterances", n)));
    }
    let dim = ext.d_model();
    let mut reps = vec![Tensor::zeros(vec![1, dim]); n];
    if mode != ContextMode::None {
        let needed = mode.history().iter().filter_map(|&b| index.checked_sub(b)).chain([index]);
        for j in needed {
            reps[j] = extract_context(ext, params, &conv.utterances[j].frames)?;
        }
    }
    splice_context(&reps, index, mode, dim)
}

/// Extracted representations of every utterance of every conversation.
pub fn extract_all(ext: &Extractor, params: &ParamStore<f32>, corpus: &[Conversation]) -> Result<Vec<Vec<Tensor<f32>>>> {
    corpus
        .iter()
        .map(|c| c.utterances.iter().map(|u| extract_context(ext, params, &u.frames)).collect())
        .collect()
}

/// One training or scoring example for the recognizer.
#[derive(Clone, Copy, Debug)]
pub struct AsrExample<'a, F> {
    pub frames: &'a FrameSequence,
    pub chars: &'a [usize],
    pub context: &'a Tensor<F>,
}

/// Decoder input (start symbol then characters) and targets (characters
/// then end symbol).
pub fn teacher_forcing(chars: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let mut input = vec![SOS_EOS];
    input.extend(chars.iter().map(|&c| vocab::asr_token(c)));
    let mut target: Vec<usize> = chars.iter().map(|&c| vocab::asr_token(c)).collect();
    target.push(SOS_EOS);
    (input, target)
}

/// Token-weighted mean cross-entropy of next-character prediction over a batch.
pub fn asr_loss<F: Real>(model: &AsrModel, p: &mut Pass<F>, batch: &[AsrExample<F>], smoothing: f64) -> Result<NodeId> {
    hybrid_loss(model, p, batch, smoothing, 0.0)
}

/// `(1 - w) * asr_loss + w * CTC`, where the CTC term runs on the encoder
/// output, is divided by the transcript length and averaged over the
/// utterances whose alignment is feasible. `w = 0` builds no CTC nodes.
pub fn hybrid_loss<F: Real>(
    model: &AsrModel,
    p: &mut Pass<F>,
    batch: &[AsrExample<F>],
    smoothing: f64,
    ctc_weight: f64,
) -> Result<NodeId> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("empty recognizer batch".into()));
    }
    if !(0.0..1.0).contains(&ctc_weight) {
        return Err(Error::InvalidConfig(format!("ctc_weight {ctc_weight} outside [0, 1)")));
    }
    let total_tokens: usize = batch.iter().map(|e| e.chars.len() + 1).sum();
    let mut ce_terms = Vec::with_capacity(batch.len());
    let mut ctc_terms = Vec::new();
    for ex in batch {
        if ex.chars.is_empty() {
            return Err(Error::InvalidInput("empty transcript".into()));
        }
        if let Some(&bad) = ex.chars.iter().find(|&&c| c >= model.config.vocab_size) {
            return Err(Error::UnknownChar(bad));
        }
        let z = model.encode(p, ex.frames)?;
        let ctx = p.constant(ex.context.clone());
        let (input, target) = teacher_forcing(ex.chars);
        let out = model.decode(p, &input, z, ctx)?;
        let ce = p.g.cross_entropy(out.logits, &target, smoothing)?;
        ce_terms.push(p.g.scale(ce, target.len() as f64 / total_tokens as f64)?);
        if ctc_weight > 0.0 {
            let labels: Vec<usize> = ex.chars.iter().map(|&c| vocab::ctc_label(c)).collect();
            if p.rows(z)? >= min_frames(&labels) {
                let logits = model.ctc_head.forward(p, z)?;
                let lp = p.g.log_softmax(logits)?;
                let n = labels.len() as f64;
                let ctc = p.g.custom(Box::new(CtcLossOp { target: labels }), &[lp])?;
                ctc_terms.push(p.g.scale(ctc, 1.0 / n)?);
            }
        }
    }
    let ce = sum_nodes(p, &ce_terms)?;
    if ctc_terms.is_empty() {
        return Ok(ce);
    }
    let k = ctc_terms.len() as f64;
    let ctc = sum_nodes(p, &ctc_terms)?;
    let ce = p.g.scale(ce, 1.0 - ctc_weight)?;
    let ctc = p.g.scale(ctc, ctc_weight / k)?;
    Ok(p.g.add(ce, ctc)?)
}

fn sum_nodes<F: Real>(p: &mut Pass<F>, terms: &[NodeId]) -> Result<NodeId> {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = p.g.add(acc, t)?;
    }
    Ok(acc)
}

/// Token-weighted mean loss over a data set in evaluation mode.
pub fn mean_loss(model: &AsrModel, params: &ParamStore<f32>, data: &[AsrExample<f32>], smoothing: f64) -> Result<f64> {
    let mut sum = 0.0;
    let mut tokens = 0usize;
    for ex in data {
        let mut p = Pass::eval(params);
        let loss = asr_loss(model, &mut p, std::slice::from_ref(ex), smoothing)?;
        let n = ex.chars.len() + 1;
        sum += p.g.scalar(loss)?.f64() * n as f64;
        tokens += n;
    }
    Ok(if tokens == 0 { f64::NAN } else { sum / tokens as f64 })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub chars: Vec<usize>,
    /// Sum of the log-probabilities of every emitted token, end symbol included.
    pub log_prob: f64,
    /// `log_prob` divided by the number of emitted tokens.
    pub score: f64,
    pub finished: bool,
}

/// Log-probabilities of the next token after `tokens`.
pub fn next_token_log_probs<F: Real>(
    model: &AsrModel,
    params: &ParamStore<F>,
    z: &Tensor<F>,
    context: &Tensor<F>,
    tokens: &[usize],
) -> Result<Vec<f64>> {
    let mut p = Pass::eval(params);
    let zn = p.constant(z.clone());
    let cn = p.constant(context.clone());
    let out = model.decode(&mut p, tokens, zn, cn)?;
    let last = p.g.slice_rows(out.logits, tokens.len() - 1, 1)?;
    let lp = p.g.log_softmax(last)?;
    Ok(p.value(lp)?.to_f64_vec())
}

pub fn encode_frames<F: Real>(model: &AsrModel, params: &ParamStore<F>, frames: &FrameSequence) -> Result<Tensor<F>> {
    let mut p = Pass::eval(params);
    let z = model.encode(&mut p, frames)?;
    Ok(p.value(z)?.clone())
}

/// Length-normalized beam search. The blank symbol is never emitted.
pub fn beam_decode<F: Real>(
    model: &AsrModel,
    params: &ParamStore<F>,
    z: &Tensor<F>,
    context: &Tensor<F>,
    beam_size: usize,
    max_len: usize,
) -> Result<Hypothesis> {
    if beam_size == 0 {
        return Err(Error::InvalidInput("beam_size must be at least 1".into()));
    }
    struct Live {
        tokens: Vec<usize>,
        log_prob: f64,
    }
    let finish = |tokens: &[usize], log_prob: f64, finished: bool| {
        let emitted = tokens.len() - 1 + usize::from(finished);
        Hypothesis {
            chars: tokens[1..].iter().filter_map(|&t| vocab::asr_char(t)).collect(),
            log_prob,
            score: if emitted == 0 { 0.0 } else { log_prob / emitted as f64 },
            finished,
        }
    };
    let mut live = vec![Live {
        tokens: vec![SOS_EOS],
        log_prob: 0.0,
    }];
    let mut done: Vec<Hypothesis> = Vec::new();
    for _ in 0..max_len {
        let mut cands: Vec<(f64, usize, usize)> = Vec::new();
        for (h, hyp) in live.iter().enumerate() {
            let lp = next_token_log_probs(model, params, z, context, &hyp.tokens)?;
            for (tok, &l) in lp.iter().enumerate() {
                if tok != BLANK {
                    cands.push((hyp.log_prob + l, h, tok));
                }
            }
        }
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut next = Vec::new();
        for &(score, h, tok) in cands.iter().take(beam_size) {
            let mut tokens = live[h].tokens.clone();
            if tok == SOS_EOS {
                done.push(finish(&tokens, score, true));
            } else {
                tokens.push(tok);
                next.push(Live { tokens, log_prob: score });
            }
        }
        live = next;
        if live.is_empty() || done.len() >= beam_size {
            break;
        }
    }
    if done.is_empty() {
        done.extend(live.iter().map(|l| finish(&l.tokens, l.log_prob, false)));
    }
    let mut best = 0;
    for (i, h) in done.iter().enumerate() {
        if h.score > done[best].score {
            best = i;
        }
    }
    Ok(done.swap_remove(best))
}

/// Levenshtein distance with unit substitution, insertion and deletion costs.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn cer<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::InvalidInput("reference is empty".into()));
    }
    Ok(edit_distance(reference, hypothesis) as f64 / reference.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AsrTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Weight of the auxiliary encoder CTC term during optimization only;
    /// logged losses are always the pure cross-entropy.
    pub ctc_weight: f64,
    pub optim: OptimConfig,
}

impl Default for AsrTrainConfig {
    fn default() -> Self {
        Self {
            // Dev loss flattens near 15 epochs on the default corpus; past that
            // the decoder memorizes training transcripts, ambiguous members
            // included.
            epochs: 15,
            batch_size: 8,
            ctc_weight: 0.3,
            optim: OptimConfig {
                peak_lr: 2e-3,
                warmup_steps: 300,
                ..OptimConfig::default()
            },
        }
    }
}

impl AsrTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("asr batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.ctc_weight) {
            return Err(Error::InvalidConfig(format!("ctc_weight {} outside [0, 1)", self.ctc_weight)));
        }
        self.optim.validate("asr training")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AsrEpoch {
    pub epoch: usize,
    /// Mean training loss of the epoch; `NaN` for the pre-training entry.
    pub train_loss: f64,
    /// Dev loss in evaluation mode after the epoch.
    pub dev_loss: f64,
}

/// Trains the recognizer on precomputed contexts. Entry 0 of the returned
/// log holds the dev loss of the initial parameters.
pub fn train_asr(
    model: &AsrModel,
    params: &mut ParamStore<f32>,
    train: &[AsrExample<f32>],
    dev: &[AsrExample<f32>],
    cfg: &AsrTrainConfig,
    seeds: SeedTree,
    mut on_epoch: impl FnMut(&AsrEpoch),
) -> Result<Vec<AsrEpoch>> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::InvalidInput("no training utterances".into()));
    }
    let smoothing = model.config.label_smoothing;
    let mut opt = Optimizer::new(&cfg.optim);
    let dev_loss = |params: &ParamStore<f32>| -> Result<f64> {
        if dev.is_empty() {
            Ok(f64::NAN)
        } else {
            mean_loss(model, params, dev, smoothing)
        }
    };
    let start = AsrEpoch {
        epoch: 0,
        train_loss: f64::NAN,
        dev_loss: dev_loss(params)?,
    };
    on_epoch(&start);
    let mut log = vec![start];
    for epoch in 1..=cfg.epochs {
        let mut sum = 0.0;
        let mut tokens = 0usize;
        for idx in epoch_batches(train.len(), cfg.batch_size, seeds, epoch) {
            let batch: Vec<AsrExample<f32>> = idx.iter().map(|&i| train[i]).collect();
            let step = opt.steps() + 1;
            let grads = {
                let mut p = Pass::train(params, seeds.named("step").child(step), model.config.dropout);
                let loss = hybrid_loss(model, &mut p, &batch, smoothing, cfg.ctc_weight)
                    .map_err(|e| diverged(e, epoch, step))?;
                let value = p.g.scalar(loss)?.f64();
                check_loss(value, epoch, step, "recognizer loss")?;
                let n: usize = batch.iter().map(|e| e.chars.len() + 1).sum();
                sum += value * n as f64;
                tokens += n;
                p.g.backward(loss)?
            };
            opt.step(params, grads, epoch)?;
        }
        let entry = AsrEpoch {
            epoch,
            train_loss: sum / tokens.max(1) as f64,
            dev_loss: dev_loss(params)?,
        };
        on_epoch(&entry);
        log.push(entry);
    }
    Ok(log)
}
