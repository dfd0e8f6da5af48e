//! End-to-end stages: synthesis, extractor pretraining, recognizer
//! training, and evaluation across context modes.

use std::io::Write;
use std::path::Path;

use ctxasr_nn::{ParamStore, SeedTree, Tensor};
use serde::{Deserialize, Serialize};

use crate::asr::{
    beam_decode, edit_distance, encode_frames, extract_all, splice_context, train_asr, AsrConfig, AsrEpoch,
    AsrExample, AsrModel, AsrTrainConfig, ContextMode,
};
use crate::checkpoint::{self, restore_into, Checkpoint};
use crate::corpus::{generate_corpus, split_corpus, Conversation, CorpusSpec, Split, SplitRatios};
use crate::error::{Error, Result};
use crate::extractor::{train_extractor, Extractor, ExtractorConfig, ExtractorEpoch, ExtractorTrainConfig, PretrainExample};
use crate::vocab;

pub const EXTRACTOR_KIND: &str = "extractor";
pub const ASR_KIND: &str = "asr";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    pub beam_size: usize,
    pub max_len: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            beam_size: 4,
            max_len: 32,
        }
    }
}

/// Every tunable of the system. Unknown keys are rejected when parsing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    /// Seed for model initialization, training order, masking and dropout.
    pub seed: u64,
    pub corpus: CorpusSpec,
    pub split: SplitRatios,
    pub extractor: ExtractorConfig,
    pub extractor_training: ExtractorTrainConfig,
    pub asr: AsrConfig,
    /// Training from scratch of the baseline recognizer.
    pub baseline_training: AsrTrainConfig,
    /// Continued training from a baseline checkpoint, used both for the
    /// contextual models and for the matched-length baseline continuation.
    pub finetune_training: AsrTrainConfig,
    pub decode: DecodeConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 0,
            corpus: CorpusSpec::default(),
            split: SplitRatios::default(),
            extractor: ExtractorConfig::default(),
            extractor_training: ExtractorTrainConfig::default(),
            asr: AsrConfig::default(),
            baseline_training: AsrTrainConfig::default(),
            finetune_training: AsrTrainConfig::default(),
            decode: DecodeConfig::default(),
        }
    }
}

impl Config {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Config = serde_json::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    /// Replaces the master seed and the corpus seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.corpus.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.split.validate()?;
        self.extractor.validate()?;
        self.extractor_training.validate()?;
        self.asr.validate()?;
        self.baseline_training.validate()?;
        self.finetune_training.validate()?;
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.extractor.speech.input_dim != self.corpus.feature_dim || self.asr.feature_dim != self.corpus.feature_dim {
            return bad(format!(
                "frame width {} must match extractor.speech.input_dim ({}) and asr.feature_dim ({})",
                self.corpus.feature_dim, self.extractor.speech.input_dim, self.asr.feature_dim
            ));
        }
        if self.extractor.vocab_size() != self.corpus.vocab_size || self.asr.vocab_size != self.corpus.vocab_size {
            return bad(format!(
                "vocabulary {} must match extractor.text.input_dim ({}) and asr.vocab_size ({})",
                self.corpus.vocab_size,
                self.extractor.vocab_size(),
                self.asr.vocab_size
            ));
        }
        if self.asr.context_dim != self.extractor.d_model() {
            return bad(format!(
                "asr.context_dim {} must equal the extractor width {}",
                self.asr.context_dim,
                self.extractor.d_model()
            ));
        }
        if self.decode.beam_size == 0 || self.decode.max_len == 0 {
            return bad("decode.beam_size and decode.max_len must be positive".into());
        }
        Ok(())
    }
}

pub fn synthesize(cfg: &Config) -> Result<Split> {
    let corpus = generate_corpus(&cfg.corpus)?;
    split_corpus(&corpus, cfg.split, cfg.seed)
}

pub fn pretrain_examples(convs: &[Conversation]) -> Vec<PretrainExample<'_>> {
    convs
        .iter()
        .flat_map(|c| c.utterances.iter())
        .map(|u| PretrainExample {
            frames: &u.frames,
            chars: &u.chars,
        })
        .collect()
}

pub struct TrainedExtractor {
    pub model: Extractor,
    pub params: ParamStore<f32>,
}

impl TrainedExtractor {
    pub fn save(&self, path: &Path) -> Result<()> {
        let config = serde_json::to_value(&self.model.config)?;
        Ok(checkpoint::save_checkpoint(path, &self.params, EXTRACTOR_KIND, config)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = checkpoint::load_checkpoint(path)?;
        Self::from_checkpoint(&ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(EXTRACTOR_KIND)?;
        let config: ExtractorConfig =
            serde_json::from_value(ck.manifest.config.clone()).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        let (model, mut params) = Extractor::init(&config, 0)?;
        restore_into(&mut params, &ck.params)?;
        for e in ck.params.entries() {
            let id = params.id(&e.name).expect("restored names match");
            params.set_frozen(id, e.frozen);
        }
        Ok(Self { model, params })
    }

    /// Context rows of every utterance of every conversation.
    pub fn extract_all(&self, convs: &[Conversation]) -> Result<ContextBank> {
        Ok(ContextBank(extract_all(&self.model, &self.params, convs)?))
    }
}

pub fn pretrain(
    cfg: &Config,
    train: &[Conversation],
    on_epoch: impl FnMut(&ExtractorEpoch),
) -> Result<(TrainedExtractor, Vec<ExtractorEpoch>)> {
    let (model, mut params) = Extractor::init(&cfg.extractor, cfg.seed)?;
    let data = pretrain_examples(train);
    let log = train_extractor(
        &model,
        &mut params,
        &data,
        &cfg.extractor_training,
        SeedTree::new(cfg.seed).named("pretrain"),
        on_epoch,
    )?;
    Ok((TrainedExtractor { model, params }, log))
}

/// Extracted representations, indexed by conversation then utterance.
#[derive(Clone, Debug)]
pub struct ContextBank(pub Vec<Vec<Tensor<f32>>>);

/// Spliced context matrices for every utterance, in corpus order.
pub fn contexts_for(
    convs: &[Conversation],
    mode: ContextMode,
    bank: Option<&ContextBank>,
    dim: usize,
) -> Result<Vec<Tensor<f32>>> {
    let mut out = Vec::new();
    for (ci, conv) in convs.iter().enumerate() {
        for i in 0..conv.utterances.len() {
            let ctx = match (mode, bank) {
                (ContextMode::None, _) => Tensor::zeros(vec![1, dim]),
                (_, Some(bank)) => {
                    let reps = bank.0.get(ci).ok_or_else(|| {
                        Error::InvalidInput(format!("no extracted contexts for conversation {}", conv.id))
                    })?;
                    splice_context(reps, i, mode, dim)?
                }
                (_, None) => {
                    return Err(Error::InvalidInput(format!(
                        "context mode {mode} needs an extractor"
                    )))
                }
            };
            out.push(ctx);
        }
    }
    Ok(out)
}

pub fn asr_examples<'a>(convs: &'a [Conversation], contexts: &'a [Tensor<f32>]) -> Vec<AsrExample<'a, f32>> {
    convs
        .iter()
        .flat_map(|c| c.utterances.iter())
        .zip(contexts)
        .map(|(u, ctx)| AsrExample {
            frames: &u.frames,
            chars: &u.chars,
            context: ctx,
        })
        .collect()
}

pub struct TrainedAsr {
    pub model: AsrModel,
    pub params: ParamStore<f32>,
    pub mode: ContextMode,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AsrSnapshot {
    asr: AsrConfig,
    context_mode: ContextMode,
}

impl TrainedAsr {
    pub fn save(&self, path: &Path) -> Result<()> {
        let config = serde_json::to_value(AsrSnapshot {
            asr: self.model.config.clone(),
            context_mode: self.mode,
        })?;
        Ok(checkpoint::save_checkpoint(path, &self.params, ASR_KIND, config)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = checkpoint::load_checkpoint(path)?;
        Self::from_checkpoint(&ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(ASR_KIND)?;
        let snap: AsrSnapshot =
            serde_json::from_value(ck.manifest.config.clone()).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        let (model, mut params) = AsrModel::init(&snap.asr, 0)?;
        restore_into(&mut params, &ck.params)?;
        Ok(Self {
            model,
            params,
            mode: snap.context_mode,
        })
    }
}

/// Trains a recognizer with the given context mode, from scratch or from
/// `init` (a baseline or any parameter-compatible checkpoint).
pub fn train_recognizer(
    cfg: &Config,
    split: &Split,
    mode: ContextMode,
    bank: Option<(&ContextBank, &ContextBank)>,
    init: Option<&ParamStore<f32>>,
    training: &AsrTrainConfig,
    on_epoch: impl FnMut(&AsrEpoch),
) -> Result<(TrainedAsr, Vec<AsrEpoch>)> {
    let (model, mut params) = AsrModel::init(&cfg.asr, cfg.seed)?;
    if let Some(src) = init {
        restore_into(&mut params, src)?;
    }
    let dim = cfg.asr.context_dim;
    let train_ctx = contexts_for(&split.train, mode, bank.map(|b| b.0), dim)?;
    let dev_ctx = contexts_for(&split.dev, mode, bank.map(|b| b.1), dim)?;
    let train = asr_examples(&split.train, &train_ctx);
    let dev = asr_examples(&split.dev, &dev_ctx);
    let seeds = SeedTree::new(cfg.seed).named("asr").named(mode.name()).child(u64::from(init.is_some()));
    let log = train_asr(&model, &mut params, &train, &dev, training, seeds, on_epoch)?;
    Ok((TrainedAsr { model, params, mode }, log))
}

pub fn write_asr_log<W: Write>(mut w: W, log: &[AsrEpoch]) -> Result<()> {
    writeln!(w, "epoch,train_loss,dev_loss")?;
    for e in log {
        writeln!(w, "{},{:.6},{:.6}", e.epoch, e.train_loss, e.dev_loss)?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeRecord {
    pub conversation_id: String,
    pub utterance_index: usize,
    pub reference: String,
    pub hypothesis: String,
    pub cer: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub mode: ContextMode,
    /// Corpus-level CER: total edits over total reference characters.
    pub cer: f64,
    pub edits: usize,
    pub reference_chars: usize,
    /// `(baseline - cer) / baseline` against the `none` row, when present.
    pub relative_reduction: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub split: String,
    pub conversations: usize,
    pub utterances: usize,
    pub rows: Vec<ReportRow>,
    pub metadata: serde_json::Value,
}

pub fn relative_reduction(baseline: f64, system: f64) -> f64 {
    (baseline - system) / baseline
}

/// Corpus-level CER from per-utterance edit counts and reference lengths.
pub fn corpus_cer(pairs: &[(usize, usize)]) -> f64 {
    let edits: usize = pairs.iter().map(|p| p.0).sum();
    let chars: usize = pairs.iter().map(|p| p.1).sum();
    edits as f64 / chars as f64
}

impl Report {
    pub fn row(&self, mode: ContextMode) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.mode == mode)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn to_table(&self) -> String {
        let mut out = format!(
            "split: {}  conversations: {}  utterances: {}\n",
            self.split, self.conversations, self.utterances
        );
        out.push_str(&format!(
            "{:<12} {:>8} {:>8} {:>10} {:>12}\n",
            "mode", "CER(%)", "edits", "ref_chars", "rel_red(%)"
        ));
        for r in &self.rows {
            let rel = r
                .relative_reduction
                .map_or_else(|| "-".to_string(), |v| format!("{:.1}", 100.0 * v));
            out.push_str(&format!(
                "{:<12} {:>8.2} {:>8} {:>10} {:>12}\n",
                r.mode.name(),
                100.0 * r.cer,
                r.edits,
                r.reference_chars,
                rel
            ));
        }
        out
    }
}

/// Decodes every utterance of `convs` with each model, building contexts
/// from the same conversation in true utterance order.
pub fn evaluate(
    convs: &[Conversation],
    split_name: &str,
    models: &[&TrainedAsr],
    extractor: Option<&TrainedExtractor>,
    decode: &DecodeConfig,
    metadata: serde_json::Value,
) -> Result<(Report, Vec<Vec<DecodeRecord>>)> {
    if models.is_empty() {
        return Err(Error::InvalidInput("no models to evaluate".into()));
    }
    let needs_context = models.iter().any(|m| m.mode != ContextMode::None);
    let bank = match (needs_context, extractor) {
        (true, Some(ext)) => Some(ext.extract_all(convs)?),
        (true, None) => {
            return Err(Error::InvalidInput("context modes other than none need an extractor".into()))
        }
        (false, _) => None,
    };
    let mut rows = Vec::new();
    let mut records = Vec::new();
    for m in models {
        let contexts = contexts_for(convs, m.mode, bank.as_ref(), m.model.config.context_dim)?;
        let mut recs = Vec::new();
        let mut pairs = Vec::new();
        let utts = convs.iter().flat_map(|c| c.utterances.iter().enumerate().map(move |(i, u)| (c, i, u)));
        for ((conv, i, u), ctx) in utts.zip(&contexts) {
            let z = encode_frames(&m.model, &m.params, &u.frames)?;
            let hyp = beam_decode(&m.model, &m.params, &z, ctx, decode.beam_size, decode.max_len)?;
            let edits = edit_distance(&u.chars, &hyp.chars);
            pairs.push((edits, u.chars.len()));
            recs.push(DecodeRecord {
                conversation_id: conv.id.clone(),
                utterance_index: i,
                reference: vocab::render(&u.chars),
                hypothesis: vocab::render(&hyp.chars),
                cer: edits as f64 / u.chars.len() as f64,
            });
        }
        rows.push(ReportRow {
            mode: m.mode,
            cer: corpus_cer(&pairs),
            edits: pairs.iter().map(|p| p.0).sum(),
            reference_chars: pairs.iter().map(|p| p.1).sum(),
            relative_reduction: None,
        });
        records.push(recs);
    }
    if let Some(base) = rows.iter().find(|r| r.mode == ContextMode::None).map(|r| r.cer) {
        for r in &mut rows {
            if base > 0.0 {
                r.relative_reduction = Some(relative_reduction(base, r.cer));
            }
        }
    }
    let report = Report {
        split: split_name.into(),
        conversations: convs.len(),
        utterances: convs.iter().map(|c| c.utterances.len()).sum(),
        rows,
        metadata,
    };
    Ok((report, records))
}

pub fn write_decode_jsonl<W: Write>(mut w: W, records: &[DecodeRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_reduction_matches_hand_arithmetic() {
        let r = relative_reduction(18.6, 15.5);
        assert!((r - 3.1 / 18.6).abs() < 1e-12);
        assert_eq!(format!("{:.1}", 100.0 * r), "16.7");
    }

    #[test]
    fn corpus_cer_pools_edits() {
        // One error in a 1-char utterance and none in a 9-char one:
        // pooled 1/10, whereas the per-utterance mean would be 1/2.
        assert!((corpus_cer(&[(1, 1), (0, 9)]) - 0.1).abs() < 1e-15);
    }

    #[test]
    fn unknown_config_keys_are_rejected() {
        assert!(Config::from_json(r#"{"seed": 1, "bogus": 2}"#).is_err());
        assert!(Config::from_json(r#"{"asr": {"d_model": 64, "nope": 1}}"#).is_err());
        assert!(Config::from_json("{}").is_ok());
    }

    #[test]
    fn mismatched_widths_are_rejected() {
        let mut cfg = Config::default();
        cfg.asr.context_dim = 32;
        assert!(matches!(cfg.validate(), Err(Error::InvalidConfig(_))));
    }
}
