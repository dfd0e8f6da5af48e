//! Contextual representation extractor.
//!
//! Speech and text embeddings are spliced along time and run through a
//! cross-modal transformer encoder. Three objectives train it: masked
//! character prediction, a contrastive masked-audio objective against an
//! in-batch negative, and CTC decoding of the speech-aligned outputs under
//! modality-level masking. After training, [`extract_context`] encodes
//! speech alone by splicing in a single zero text row.

use std::io::Write;

use ctxasr_nn::{NodeId, ParamId, ParamStore, Real, SeedTree, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::FrameSequence;
use crate::ctc::{min_frames, CtcLossOp};
use crate::encoders::{EncoderConfig, SpeechEncoder, TextEncoder};
use crate::error::{Error, Result};
use crate::layers::{add_positions, EncoderBlock, Init, LayerNorm, Linear, Pass};
use crate::train::{check_loss, epoch_batches, OptimConfig, Optimizer};
use crate::vocab;

/// Attempts at drawing a token mask before giving up.
pub const MASK_RETRIES: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractorConfig {
    pub speech: EncoderConfig,
    pub text: EncoderConfig,
    pub cme_blocks: usize,
    pub cme_heads: usize,
    pub cme_d_ff: usize,
    pub dropout: f64,
    pub token_mask_rate: f64,
    pub modal_mask_prob: f64,
    /// Weight of the modal-masked CTC term.
    pub alpha: f64,
    /// Weight of the masked-character term; the contrastive term gets the rest.
    pub beta: f64,
    /// Kernel bandwidth per model dimension; the kernel divides the L1
    /// distance by `mam_bandwidth * d_model`.
    pub mam_bandwidth: f64,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self {
            speech: EncoderConfig::default(),
            text: EncoderConfig {
                input_dim: 32,
                ..EncoderConfig::default()
            },
            cme_blocks: 3,
            cme_heads: 4,
            cme_d_ff: 256,
            dropout: 0.1,
            token_mask_rate: 0.3,
            modal_mask_prob: 0.3,
            alpha: 0.4,
            beta: 0.3,
            mam_bandwidth: 1.0,
        }
    }
}

impl ExtractorConfig {
    pub fn d_model(&self) -> usize {
        self.text.d_model
    }

    pub fn vocab_size(&self) -> usize {
        self.text.input_dim
    }

    pub fn bandwidth(&self) -> f64 {
        self.mam_bandwidth * self.d_model() as f64
    }

    pub fn validate(&self) -> Result<()> {
        self.speech.validate("extractor speech encoder")?;
        self.text.validate("extractor text encoder")?;
        let d = self.d_model();
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.cme_blocks == 0 || self.cme_heads == 0 || d % self.cme_heads != 0 || self.cme_d_ff == 0 {
            return bad(format!(
                "cross-modal encoder needs blocks, heads dividing {d}, and a positive d_ff"
            ));
        }
        for (name, v) in [
            ("token_mask_rate", self.token_mask_rate),
            ("modal_mask_prob", self.modal_mask_prob),
            ("alpha", self.alpha),
            ("beta", self.beta),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} = {v} is outside [0, 1]"));
            }
        }
        if self.alpha + self.beta > 1.0 {
            return bad(format!("alpha + beta = {} exceeds 1", self.alpha + self.beta));
        }
        if !(self.mam_bandwidth > 0.0 && self.mam_bandwidth.is_finite()) {
            return bad(format!("mam_bandwidth must be positive, got {}", self.mam_bandwidth));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModalMask {
    None,
    Speech,
    Text,
}

/// Masking decisions for one example.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskPlan {
    pub speech: Vec<usize>,
    pub text: Vec<usize>,
    pub modal: ModalMask,
}

impl MaskPlan {
    pub fn text_only(positions: Vec<usize>) -> Self {
        Self {
            speech: Vec::new(),
            text: positions,
            modal: ModalMask::None,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct CrossModalOutput {
    pub h: NodeId,
    /// Rows `0..boundary` are speech-aligned, the rest text-aligned.
    pub boundary: usize,
    pub len: usize,
}

/// Parameter layout of the extractor. Values live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Extractor {
    pub config: ExtractorConfig,
    pub speech: SpeechEncoder,
    pub text: TextEncoder,
    segment: ParamId,
    speech_mask: ParamId,
    text_mask: ParamId,
    blocks: Vec<EncoderBlock>,
    norm: LayerNorm,
    mlm_head: Linear,
    ctc_head: Linear,
}

/// Parameter-name prefixes of the two modal encoders, excluding the speech
/// output projection which always stays trainable.
pub const MODAL_ENCODER_PREFIXES: [&str; 2] = ["speech.", "text."];
const ALWAYS_TRAINABLE: &str = "speech.proj";

impl Extractor {
    pub fn new<F: Real>(config: &ExtractorConfig, store: &mut ParamStore<F>, seeds: SeedTree) -> Result<Self> {
        config.validate()?;
        let d = config.d_model();
        let mut init = Init::new(store, seeds);
        let speech_cfg = EncoderConfig {
            dropout: config.dropout,
            ..config.speech.clone()
        };
        let text_cfg = EncoderConfig {
            dropout: config.dropout,
            ..config.text.clone()
        };
        Ok(Self {
            config: config.clone(),
            speech: SpeechEncoder::new(&mut init, "speech", &speech_cfg, d)?,
            text: TextEncoder::new(&mut init, "text", &text_cfg)?,
            segment: init.normal("cme.segment", vec![2, d], 0.1)?,
            speech_mask: init.normal("mask.speech", vec![1, d], 0.1)?,
            text_mask: init.normal("mask.text", vec![1, d], 0.1)?,
            blocks: (0..config.cme_blocks)
                .map(|i| EncoderBlock::new(&mut init, &format!("cme.block{i}"), d, config.cme_heads, config.cme_d_ff))
                .collect::<Result<_>>()?,
            norm: LayerNorm::new(&mut init, "cme.norm", d)?,
            mlm_head: Linear::new(&mut init, "head.mlm", d, config.vocab_size(), true)?,
            ctc_head: Linear::new(&mut init, "head.ctc", d, config.vocab_size() + 1, true)?,
        })
    }

    /// Builds the layout together with freshly initialized 32-bit parameters.
    pub fn init(config: &ExtractorConfig, seed: u64) -> Result<(Self, ParamStore<f32>)> {
        let mut store = ParamStore::new();
        let ext = Self::new(config, &mut store, SeedTree::new(seed).named("extractor-init"))?;
        Ok((ext, store))
    }

    pub fn d_model(&self) -> usize {
        self.config.d_model()
    }

    pub fn mlm_head(&self) -> &Linear {
        &self.mlm_head
    }

    pub fn ctc_head(&self) -> &Linear {
        &self.ctc_head
    }

    /// Freezes or unfreezes the modal encoders.
    pub fn set_modal_encoders_frozen<F: Real>(&self, store: &mut ParamStore<F>, frozen: bool) {
        for prefix in MODAL_ENCODER_PREFIXES {
            store.set_frozen_prefix(prefix, frozen);
        }
        store.set_frozen_prefix(ALWAYS_TRAINABLE, false);
    }

    pub fn encode_speech<F: Real>(&self, p: &mut Pass<F>, frames: &FrameSequence) -> Result<NodeId> {
        let x = p.constant(frames.to_tensor());
        self.speech.forward(p, x)
    }

    pub fn encode_text<F: Real>(&self, p: &mut Pass<F>, chars: &[usize]) -> Result<NodeId> {
        self.text.forward(p, chars)
    }

    pub fn mask_vector<F: Real>(&self, p: &mut Pass<F>, modality: ModalMask) -> Option<NodeId> {
        match modality {
            ModalMask::Speech => Some(p.param(self.speech_mask)),
            ModalMask::Text => Some(p.param(self.text_mask)),
            ModalMask::None => None,
        }
    }

    /// Splices `a` and `t`, adds segment and position embeddings and runs
    /// the cross-modal blocks.
    pub fn cme_forward<F: Real>(&self, p: &mut Pass<F>, a: NodeId, t: NodeId) -> Result<CrossModalOutput> {
        let d = self.d_model();
        let (na, nt) = (p.rows(a)?, p.rows(t)?);
        if p.cols(a)? != d || p.cols(t)? != d {
            return Err(Error::InvalidInput(format!(
                "cannot splice widths {} and {} into a {d}-wide encoder",
                p.cols(a)?,
                p.cols(t)?
            )));
        }
        let x = p.g.concat_rows(&[a, t])?;
        let seg_ids: Vec<usize> = (0..na + nt).map(|i| usize::from(i >= na)).collect();
        let table = p.param(self.segment);
        let seg = p.g.embedding(table, &seg_ids)?;
        let mut x = p.g.add(x, seg)?;
        x = add_positions(p, x)?;
        for b in &self.blocks {
            x = b.forward(p, x)?;
        }
        let h = self.norm.forward(p, x)?;
        Ok(CrossModalOutput {
            h,
            boundary: na,
            len: na + nt,
        })
    }

    /// CTC log-probabilities for the speech-aligned rows of `out`.
    pub fn ctc_log_probs<F: Real>(&self, p: &mut Pass<F>, out: &CrossModalOutput) -> Result<NodeId> {
        let speech = p.g.slice_rows(out.h, 0, out.boundary)?;
        let logits = self.ctc_head.forward(p, speech)?;
        Ok(p.g.log_softmax(logits)?)
    }
}

/// Picks positions to mask, each with probability `rate`, redrawing while
/// every position is masked.
pub fn sample_token_mask<R: Rng + ?Sized>(len: usize, rate: f64, rng: &mut R) -> Result<Vec<usize>> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::InvalidInput(format!("mask rate {rate} is outside [0, 1]")));
    }
    if len == 0 || rate == 0.0 {
        return Ok(Vec::new());
    }
    for _ in 0..MASK_RETRIES {
        let picked: Vec<usize> = (0..len).filter(|_| rng.gen_bool(rate)).collect();
        if picked.len() < len {
            return Ok(picked);
        }
    }
    Err(Error::MaskSaturated(MASK_RETRIES))
}

/// Replaces a random subset of rows of `seq` by `mask_vector`.
pub fn apply_token_mask<F: Real, R: Rng + ?Sized>(
    p: &mut Pass<F>,
    seq: NodeId,
    rate: f64,
    mask_vector: NodeId,
    rng: &mut R,
) -> Result<(NodeId, Vec<usize>)> {
    let positions = sample_token_mask(p.rows(seq)?, rate, rng)?;
    if positions.is_empty() {
        return Ok((seq, positions));
    }
    let masked = p.g.replace_rows(seq, mask_vector, &positions)?;
    Ok((masked, positions))
}

/// With probability `prob`, picks one modality by a fair coin.
pub fn sample_modal_mask<R: Rng + ?Sized>(prob: f64, rng: &mut R) -> Result<ModalMask> {
    if !(0.0..=1.0).contains(&prob) {
        return Err(Error::InvalidInput(format!("modal mask probability {prob} is outside [0, 1]")));
    }
    if !rng.gen_bool(prob) {
        return Ok(ModalMask::None);
    }
    Ok(if rng.gen_bool(0.5) {
        ModalMask::Speech
    } else {
        ModalMask::Text
    })
}

/// Replaces every row of the selected modality by its mask vector.
pub fn apply_modal_mask<F: Real, R: Rng + ?Sized>(
    ext: &Extractor,
    p: &mut Pass<F>,
    a: NodeId,
    t: NodeId,
    prob: f64,
    rng: &mut R,
) -> Result<(NodeId, NodeId, ModalMask)> {
    let selector = sample_modal_mask(prob, rng)?;
    let (a, t) = mask_modality(ext, p, a, t, selector)?;
    Ok((a, t, selector))
}

pub fn mask_modality<F: Real>(
    ext: &Extractor,
    p: &mut Pass<F>,
    a: NodeId,
    t: NodeId,
    selector: ModalMask,
) -> Result<(NodeId, NodeId)> {
    let fill = |p: &mut Pass<F>, seq: NodeId, which: ModalMask| -> Result<NodeId> {
        let n = p.rows(seq)?;
        let v = ext.mask_vector(p, which).expect("a modality was selected");
        let all: Vec<usize> = (0..n).collect();
        Ok(p.g.replace_rows(seq, v, &all)?)
    };
    Ok(match selector {
        ModalMask::None => (a, t),
        ModalMask::Speech => (fill(p, a, ModalMask::Speech)?, t),
        ModalMask::Text => (a, fill(p, t, ModalMask::Text)?),
    })
}

/// Mean negative log-likelihood of the true characters at the masked text
/// positions, predicted from the spliced sequence.
pub fn mlm_loss<F: Real>(
    ext: &Extractor,
    p: &mut Pass<F>,
    a: NodeId,
    t_remain: NodeId,
    plan: &MaskPlan,
    targets: &[usize],
) -> Result<NodeId> {
    if plan.text.is_empty() {
        return Err(Error::InvalidInput("masked-character loss needs a masked text position".into()));
    }
    let out = ext.cme_forward(p, a, t_remain)?;
    let rows: Vec<usize> = plan.text.iter().map(|&i| out.boundary + i).collect();
    let labels = plan
        .text
        .iter()
        .map(|&i| targets.get(i).copied().ok_or_else(|| Error::InvalidInput(format!("no target for position {i}"))))
        .collect::<Result<Vec<_>>>()?;
    let picked = p.g.gather_rows(out.h, &rows)?;
    let logits = ext.mlm_head().forward(p, picked)?;
    Ok(p.g.cross_entropy(logits, &labels, 0.0)?)
}

/// Contrastive loss between time-pooled representations under the
/// Laplacian kernel `exp(-|x - y|_1 / bandwidth)`.
pub fn mam_loss<F: Real>(
    p: &mut Pass<F>,
    h: NodeId,
    h_remain: NodeId,
    h_other: NodeId,
    bandwidth: f64,
) -> Result<NodeId> {
    if !(bandwidth > 0.0 && bandwidth.is_finite()) {
        return Err(Error::InvalidInput(format!("bandwidth must be positive, got {bandwidth}")));
    }
    if p.value(h)?.shape() != p.value(h_remain)?.shape() {
        return Err(Error::InvalidInput(format!(
            "masked representation has shape {:?}, clean one {:?}",
            p.value(h)?.shape(),
            p.value(h_remain)?.shape()
        )));
    }
    let hm = p.g.mean_rows(h)?;
    let rm = p.g.mean_rows(h_remain)?;
    let om = p.g.mean_rows(h_other)?;
    let logit = |p: &mut Pass<F>, other: NodeId| -> Result<NodeId> {
        let diff = p.g.sub(hm, other)?;
        let l1 = p.g.abs(diff)?;
        let dist = p.g.sum(l1)?;
        Ok(p.g.scale(dist, -1.0 / bandwidth)?)
    };
    let pos = logit(p, rm)?;
    let neg = logit(p, om)?;
    let logits = p.g.concat_cols(&[pos, neg])?;
    Ok(p.g.cross_entropy(logits, &[0], 0.0)?)
}

/// CTC loss of the speech-aligned outputs against the transcript.
pub fn modal_ctc_loss<F: Real>(
    ext: &Extractor,
    p: &mut Pass<F>,
    a: NodeId,
    t: NodeId,
    transcript: &[usize],
) -> Result<NodeId> {
    let out = ext.cme_forward(p, a, t)?;
    ctc_on_output(ext, p, &out, transcript)
}

fn ctc_on_output<F: Real>(
    ext: &Extractor,
    p: &mut Pass<F>,
    out: &CrossModalOutput,
    transcript: &[usize],
) -> Result<NodeId> {
    if transcript.is_empty() {
        return Err(Error::InvalidInput("CTC transcript is empty".into()));
    }
    let labels: Vec<usize> = transcript.iter().map(|&c| vocab::ctc_label(c)).collect();
    let needed = min_frames(&labels);
    if out.boundary < needed {
        return Err(Error::InfeasibleAlignment {
            frames: out.boundary,
            needed,
        });
    }
    let lp = ext.ctc_log_probs(p, out)?;
    Ok(p.g.custom(Box::new(CtcLossOp { target: labels }), &[lp])?)
}

/// One utterance as seen by the pretraining objectives.
#[derive(Clone, Copy, Debug)]
pub struct PretrainExample<'a> {
    pub frames: &'a FrameSequence,
    pub chars: &'a [usize],
}

/// Batch means of each pretraining term; `NaN` for a term that was not
/// computable on this batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PretrainBreakdown {
    pub ctc: f64,
    pub mlm: f64,
    pub mam: f64,
    pub total: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct PretrainNodes {
    pub total: NodeId,
    pub ctc: Option<NodeId>,
    pub mlm: Option<NodeId>,
    pub mam: Option<NodeId>,
}

/// Weighted pretraining objective over a batch.
///
/// Each term draws its own masks from its own stream: the masked-character
/// term masks text tokens, the contrastive term masks speech tokens and
/// takes a random other batch member as the negative, and the CTC term
/// applies only modality-level masking. Terms with zero weight are
/// evaluated for the breakdown but do not feed the total.
pub fn pretrain_loss<F: Real>(
    ext: &Extractor,
    p: &mut Pass<F>,
    batch: &[PretrainExample],
    alpha: f64,
    beta: f64,
    seeds: SeedTree,
) -> Result<(PretrainNodes, PretrainBreakdown)> {
    if !(alpha >= 0.0 && beta >= 0.0 && alpha + beta <= 1.0) {
        return Err(Error::InvalidInput(format!(
            "loss weights alpha={alpha}, beta={beta} must be non-negative with sum at most 1"
        )));
    }
    if batch.is_empty() {
        return Err(Error::InvalidInput("empty pretraining batch".into()));
    }
    let gamma = 1.0 - alpha - beta;
    let cfg = &ext.config;

    let mut a = Vec::with_capacity(batch.len());
    let mut t = Vec::with_capacity(batch.len());
    for ex in batch {
        a.push(ext.encode_speech(p, ex.frames)?);
        t.push(ext.encode_text(p, ex.chars)?);
    }
    let mut clean: Vec<Option<CrossModalOutput>> = vec![None; batch.len()];
    let mut clean_h = |p: &mut Pass<F>, i: usize| -> Result<CrossModalOutput> {
        if let Some(out) = clean[i] {
            return Ok(out);
        }
        let out = ext.cme_forward(p, a[i], t[i])?;
        clean[i] = Some(out);
        Ok(out)
    };

    let mut ctc_terms = Vec::new();
    for (i, ex) in batch.iter().enumerate() {
        let mut rng = seeds.named("ctc").child(i as u64).rng();
        let selector = sample_modal_mask(cfg.modal_mask_prob, &mut rng)?;
        let out = match selector {
            ModalMask::None => clean_h(p, i)?,
            _ => {
                let (am, tm) = mask_modality(ext, p, a[i], t[i], selector)?;
                ext.cme_forward(p, am, tm)?
            }
        };
        ctc_terms.push(ctc_on_output(ext, p, &out, ex.chars)?);
    }

    let mut mlm_terms = Vec::new();
    for (i, ex) in batch.iter().enumerate() {
        if ex.chars.len() < 2 {
            continue;
        }
        let mut rng = seeds.named("mlm").child(i as u64).rng();
        let mut positions = sample_token_mask(ex.chars.len(), cfg.token_mask_rate, &mut rng)?;
        if positions.is_empty() {
            positions.push(rng.gen_range(0..ex.chars.len()));
        }
        let mv = ext.mask_vector(p, ModalMask::Text).expect("text mask");
        let t_remain = p.g.replace_rows(t[i], mv, &positions)?;
        mlm_terms.push(mlm_loss(ext, p, a[i], t_remain, &MaskPlan::text_only(positions), ex.chars)?);
    }

    let mut mam_terms = Vec::new();
    if batch.len() >= 2 {
        for i in 0..batch.len() {
            let mut rng = seeds.named("mam").child(i as u64).rng();
            let mv = ext.mask_vector(p, ModalMask::Speech).expect("speech mask");
            let (a_remain, _) = apply_token_mask(p, a[i], cfg.token_mask_rate, mv, &mut rng)?;
            let mut j = rng.gen_range(0..batch.len() - 1);
            if j >= i {
                j += 1;
            }
            let h = clean_h(p, i)?.h;
            let h_other = clean_h(p, j)?.h;
            let h_remain = ext.cme_forward(p, a_remain, t[i])?.h;
            mam_terms.push(mam_loss(p, h, h_remain, h_other, cfg.bandwidth())?);
        }
    } else if gamma > 0.0 {
        return Err(Error::InvalidInput(
            "the contrastive term needs at least two examples per batch".into(),
        ));
    }

    let mean = |p: &mut Pass<F>, terms: &[NodeId]| -> Result<Option<NodeId>> {
        if terms.is_empty() {
            return Ok(None);
        }
        let col = p.g.concat_rows(terms)?;
        Ok(Some(p.g.mean(col)?))
    };
    let ctc = mean(p, &ctc_terms)?;
    let mlm = mean(p, &mlm_terms)?;
    let mam = mean(p, &mam_terms)?;

    let mut total: Option<NodeId> = None;
    for (w, term, what) in [(alpha, ctc, "CTC"), (beta, mlm, "masked-character"), (gamma, mam, "contrastive")] {
        if w == 0.0 {
            continue;
        }
        let term = term.ok_or_else(|| Error::InvalidInput(format!("no example in the batch supports the {what} term")))?;
        let scaled = p.g.scale(term, w)?;
        total = Some(match total {
            None => scaled,
            Some(acc) => p.g.add(acc, scaled)?,
        });
    }
    let total = total.expect("weights sum to one");
    let read = |p: &Pass<F>, n: Option<NodeId>| -> Result<f64> {
        n.map_or(Ok(f64::NAN), |n| Ok(p.g.scalar(n)?.f64()))
    };
    let breakdown = PretrainBreakdown {
        ctc: read(p, ctc)?,
        mlm: read(p, mlm)?,
        mam: read(p, mam)?,
        total: p.g.scalar(total)?.f64(),
    };
    Ok((PretrainNodes { total, ctc, mlm, mam }, breakdown))
}

/// Speech-only representation of an utterance: the speech-aligned rows of
/// the cross-modal encoder run against a single zero text row.
pub fn extract_context<F: Real>(ext: &Extractor, params: &ParamStore<F>, frames: &FrameSequence) -> Result<Tensor<F>> {
    let mut p = Pass::eval(params);
    let a = ext.encode_speech(&mut p, frames)?;
    let dummy = p.constant(Tensor::zeros(vec![1, ext.d_model()]));
    let out = ext.cme_forward(&mut p, a, dummy)?;
    let speech = p.g.slice_rows(out.h, 0, out.boundary)?;
    Ok(p.value(speech)?.clone())
}

/// CTC log-probabilities of extracted context rows, for probing what the
/// extractor has learned.
pub fn context_ctc_log_probs<F: Real>(ext: &Extractor, params: &ParamStore<F>, context: &Tensor<F>) -> Result<Tensor<F>> {
    let mut p = Pass::eval(params);
    let h = p.constant(context.clone());
    let logits = ext.ctc_head().forward(&mut p, h)?;
    let lp = p.g.log_softmax(logits)?;
    Ok(p.value(lp)?.clone())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractorTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optim: OptimConfig,
    /// Freeze the modal encoders once `modal_warmup_epochs` have elapsed.
    pub freeze_modal_encoders: bool,
    pub modal_warmup_epochs: usize,
}

impl Default for ExtractorTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 16,
            optim: OptimConfig::default(),
            freeze_modal_encoders: true,
            modal_warmup_epochs: 2,
        }
    }
}

impl ExtractorTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::InvalidConfig(
                "extractor batch_size must be at least 2 for in-batch negatives".into(),
            ));
        }
        self.optim.validate("extractor training")
    }
}

/// Mean per-term losses over one epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtractorEpoch {
    pub epoch: usize,
    pub ctc: f64,
    pub mlm: f64,
    pub mam: f64,
    pub total: f64,
}

pub fn write_extractor_log<W: Write>(mut w: W, log: &[ExtractorEpoch]) -> Result<()> {
    writeln!(w, "epoch,ctc,mlm,mam,total")?;
    for e in log {
        writeln!(w, "{},{:.6},{:.6},{:.6},{:.6}", e.epoch, e.ctc, e.mlm, e.mam, e.total)?;
    }
    Ok(())
}

pub(crate) fn diverged(e: Error, epoch: usize, step: u64) -> Error {
    match e {
        Error::Nn(ctxasr_nn::NnError::NonFinite { node, op }) => Error::Diverged {
            epoch,
            step,
            detail: format!("non-finite value at node {node} ({op})"),
        },
        other => other,
    }
}

/// Minimizes the pretraining objective over utterance/transcript pairs.
pub fn train_extractor(
    ext: &Extractor,
    params: &mut ParamStore<f32>,
    data: &[PretrainExample],
    cfg: &ExtractorTrainConfig,
    seeds: SeedTree,
    mut on_epoch: impl FnMut(&ExtractorEpoch),
) -> Result<Vec<ExtractorEpoch>> {
    cfg.validate()?;
    if data.len() < 2 {
        return Err(Error::InvalidInput("extractor training needs at least two utterances".into()));
    }
    let mut opt = Optimizer::new(&cfg.optim);
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let frozen = cfg.freeze_modal_encoders && epoch > cfg.modal_warmup_epochs;
        ext.set_modal_encoders_frozen(params, frozen);
        let mut sums = [0.0f64; 4];
        let mut counts = [0usize; 4];
        for idx in epoch_batches(data.len(), cfg.batch_size, seeds, epoch) {
            let batch: Vec<PretrainExample> = idx.iter().map(|&i| data[i]).collect();
            let step_seeds = seeds.named("step").child(opt.steps());
            let step = opt.steps() + 1;
            let grads = {
                let mut p = Pass::train(params, step_seeds, ext.config.dropout);
                let (nodes, br) = pretrain_loss(ext, &mut p, &batch, ext.config.alpha, ext.config.beta, step_seeds)
                    .map_err(|e| diverged(e, epoch, step))?;
                check_loss(br.total, epoch, step, "pretraining loss")?;
                for (k, v) in [br.ctc, br.mlm, br.mam, br.total].into_iter().enumerate() {
                    if v.is_finite() {
                        sums[k] += v * batch.len() as f64;
                        counts[k] += batch.len();
                    }
                }
                p.g.backward(nodes.total)?
            };
            opt.step(params, grads, epoch)?;
        }
        let avg = |k: usize| if counts[k] > 0 { sums[k] / counts[k] as f64 } else { f64::NAN };
        let entry = ExtractorEpoch {
            epoch,
            ctc: avg(0),
            mlm: avg(1),
            mam: avg(2),
            total: avg(3),
        };
        on_epoch(&entry);
        log.push(entry);
    }
    Ok(log)
}
