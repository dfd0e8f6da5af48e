//! Synthetic conversational corpora with context-dependent ambiguity.
//!
//! Character ids are laid out as follows, with `K` topics and `P` pairs:
//!
//! * `0..K` are topic markers, each with its own frame template;
//! * `K..K+2P` are ambiguous pairs: `K+2p` and `K+2p+1` share one template;
//! * the remaining ids are regular characters with unique templates.
//!
//! Every utterance contains exactly one marker, announcing the topic of the
//! *next* utterance. The first utterance has no ambiguous characters; in
//! every later utterance the member of each ambiguous pair is fixed by the
//! topic announced one utterance earlier. A recognizer that hears only the
//! current utterance therefore has to guess, while one that also hears the
//! previous utterance has all it needs.

use std::io::{BufRead, Write};
use std::path::Path;

use ctxasr_nn::{Real, SeedTree, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSpec {
    pub vocab_size: usize,
    pub num_topics: usize,
    pub ambiguous_pairs: usize,
    pub frames_per_char: usize,
    pub feature_dim: usize,
    pub noise_sigma: f64,
    pub utterances_per_conversation: usize,
    pub min_chars: usize,
    pub max_chars: usize,
    /// Probability that a non-marker position of an utterance after the
    /// first holds an ambiguous character.
    pub ambiguous_rate: f64,
    pub num_conversations: usize,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            vocab_size: 32,
            num_topics: 4,
            ambiguous_pairs: 4,
            frames_per_char: 4,
            feature_dim: 16,
            noise_sigma: 0.05,
            utterances_per_conversation: 6,
            min_chars: 4,
            max_chars: 10,
            ambiguous_rate: 0.28,
            num_conversations: 300,
            seed: 0,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.num_topics < 2 {
            return bad(format!("num_topics must be at least 2, got {}", self.num_topics));
        }
        if self.num_topics + 2 * self.ambiguous_pairs >= self.vocab_size {
            return bad(format!(
                "{} markers and {} ambiguous pairs leave no regular characters in a vocabulary of {}",
                self.num_topics, self.ambiguous_pairs, self.vocab_size
            ));
        }
        if self.frames_per_char == 0 || self.feature_dim == 0 {
            return bad("frames_per_char and feature_dim must be positive".into());
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma must be finite and >= 0, got {}", self.noise_sigma));
        }
        if self.utterances_per_conversation == 0 || self.num_conversations == 0 {
            return bad("conversations and utterances must be non-empty".into());
        }
        if self.min_chars == 0 || self.min_chars > self.max_chars {
            return bad(format!(
                "character range {}..={} is invalid",
                self.min_chars, self.max_chars
            ));
        }
        if !(0.0..=1.0).contains(&self.ambiguous_rate) {
            return bad(format!("ambiguous_rate {} is outside [0, 1]", self.ambiguous_rate));
        }
        Ok(())
    }

    pub fn marker(&self, topic: usize) -> usize {
        topic
    }

    pub fn is_marker(&self, c: usize) -> bool {
        c < self.num_topics
    }

    /// The two members of ambiguous pair `p`.
    pub fn pair_members(&self, p: usize) -> (usize, usize) {
        let a = self.num_topics + 2 * p;
        (a, a + 1)
    }

    /// Pair index of an ambiguous character.
    pub fn pair_of(&self, c: usize) -> Option<usize> {
        let lo = self.num_topics;
        let hi = lo + 2 * self.ambiguous_pairs;
        (lo..hi).contains(&c).then(|| (c - lo) / 2)
    }

    pub fn regular_chars(&self) -> std::ops::Range<usize> {
        self.num_topics + 2 * self.ambiguous_pairs..self.vocab_size
    }

    /// Bits of the topic id consulted by the pairs; pair `p` reads bit `p % n`.
    fn topic_bits(&self) -> usize {
        let mut n = 0;
        while (1usize << (n + 1)) <= self.num_topics {
            n += 1;
        }
        n.max(1)
    }

    /// Which member of pair `p` is spoken under `topic`.
    pub fn pair_member_for(&self, p: usize, topic: usize) -> usize {
        let bit = (topic >> (p % self.topic_bits())) & 1;
        self.pair_members(p).0 + bit
    }

    /// Template slot of every character; pair members share a slot.
    pub fn template_slot(&self, c: usize) -> usize {
        match self.pair_of(c) {
            Some(p) => self.num_topics + p,
            None if c < self.num_topics => c,
            None => c - self.ambiguous_pairs,
        }
    }

    pub fn num_template_slots(&self) -> usize {
        self.vocab_size - self.ambiguous_pairs
    }
}

/// Per-utterance acoustic features, `rows × dim`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "Vec<Vec<f32>>", try_from = "Vec<Vec<f32>>")]
pub struct FrameSequence {
    rows: usize,
    dim: usize,
    data: Vec<f32>,
}

impl FrameSequence {
    pub fn new(rows: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if rows == 0 || dim == 0 {
            return Err(Error::InvalidInput("frame sequences must be non-empty".into()));
        }
        if data.len() != rows * dim {
            return Err(Error::InvalidInput(format!(
                "{rows}x{dim} frames need {} values, got {}",
                rows * dim,
                data.len()
            )));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidInput("frames contain non-finite values".into()));
        }
        Ok(Self { rows, dim, data })
    }

    pub fn len(&self) -> usize {
        self.rows
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, t: usize) -> &[f32] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn to_tensor<F: Real>(&self) -> Tensor<F> {
        Tensor::new(
            vec![self.rows, self.dim],
            self.data.iter().map(|&x| F::of(x as f64)).collect(),
        )
        .expect("frame shape is consistent")
    }
}

impl From<FrameSequence> for Vec<Vec<f32>> {
    fn from(f: FrameSequence) -> Self {
        f.data.chunks(f.dim).map(<[f32]>::to_vec).collect()
    }
}

impl TryFrom<Vec<Vec<f32>>> for FrameSequence {
    type Error = Error;

    fn try_from(rows: Vec<Vec<f32>>) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::InvalidInput("ragged frame rows".into()));
        }
        let n = rows.len();
        FrameSequence::new(n, dim, rows.into_iter().flatten().collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Utterance {
    pub chars: Vec<usize>,
    pub frames: FrameSequence,
    /// Topic governing this utterance's ambiguous characters; `None` for the
    /// opening utterance.
    #[serde(default)]
    pub topic: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Conversation {
    pub id: String,
    /// Topic announced by the opening utterance.
    pub topic: usize,
    pub utterances: Vec<Utterance>,
}

/// Fixed random unit-norm template per template slot, indexed by character.
#[derive(Clone, Debug, PartialEq)]
pub struct Templates {
    by_char: Vec<Vec<f64>>,
}

impl Templates {
    pub fn generate(spec: &CorpusSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = SeedTree::new(spec.seed).named("templates").rng();
        let slots: Vec<Vec<f64>> = (0..spec.num_template_slots())
            .map(|_| {
                let v: Vec<f64> = (0..spec.feature_dim)
                    .map(|_| StandardNormal.sample(&mut rng))
                    .collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                v.into_iter().map(|x| x / norm).collect()
            })
            .collect();
        let by_char = (0..spec.vocab_size)
            .map(|c| slots[spec.template_slot(c)].clone())
            .collect();
        Ok(Self { by_char })
    }

    pub fn from_vectors(by_char: Vec<Vec<f64>>) -> Self {
        Self { by_char }
    }

    pub fn get(&self, c: usize) -> Option<&[f64]> {
        self.by_char.get(c).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.by_char.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_char.is_empty()
    }
}

/// Renders characters into frames: row `t` is the template of character
/// `t / frames_per_char` plus Gaussian noise.
pub fn render_frames<R: Rng + ?Sized>(
    chars: &[usize],
    templates: &Templates,
    noise_sigma: f64,
    frames_per_char: usize,
    rng: &mut R,
) -> Result<FrameSequence> {
    if chars.is_empty() {
        return Err(Error::InvalidInput("cannot render an empty utterance".into()));
    }
    if frames_per_char == 0 {
        return Err(Error::InvalidInput("frames_per_char must be positive".into()));
    }
    let noise = Normal::new(0.0, noise_sigma)
        .map_err(|e| Error::InvalidInput(format!("noise_sigma {noise_sigma}: {e}")))?;
    let dim = templates.get(chars[0]).ok_or(Error::UnknownChar(chars[0]))?.len();
    let mut data = Vec::with_capacity(chars.len() * frames_per_char * dim);
    for &c in chars {
        let tpl = templates.get(c).ok_or(Error::UnknownChar(c))?;
        for _ in 0..frames_per_char {
            data.extend(tpl.iter().map(|&x| (x + noise.sample(rng)) as f32));
        }
    }
    FrameSequence::new(chars.len() * frames_per_char, dim, data)
}

/// Uniform draw from `0..n` without `skip`, unless that would leave nothing.
fn draw_excluding<R: Rng + ?Sized>(rng: &mut R, n: usize, skip: Option<usize>) -> usize {
    match skip {
        Some(s) if n > 1 => {
            let i = rng.gen_range(0..n - 1);
            if i >= s {
                i + 1
            } else {
                i
            }
        }
        _ => rng.gen_range(0..n),
    }
}

pub fn generate_corpus(spec: &CorpusSpec) -> Result<Vec<Conversation>> {
    let templates = Templates::generate(spec)?;
    let root = SeedTree::new(spec.seed);
    (0..spec.num_conversations)
        .map(|i| generate_conversation(spec, &templates, &root, i))
        .collect()
}

fn generate_conversation(
    spec: &CorpusSpec,
    templates: &Templates,
    root: &SeedTree,
    index: usize,
) -> Result<Conversation> {
    let mut rng = root.named("conversation").child(index as u64).rng();
    let mut noise_rng = root.named("noise").child(index as u64).rng();
    let u = spec.utterances_per_conversation;
    // topics[i] is announced in utterance i and governs utterance i + 1.
    let topics: Vec<usize> = (0..u).map(|_| rng.gen_range(0..spec.num_topics)).collect();
    let regular = spec.regular_chars();
    let mut utterances = Vec::with_capacity(u);
    for i in 0..u {
        let len = rng.gen_range(spec.min_chars..=spec.max_chars);
        let governing = (i > 0).then(|| topics[i - 1]);
        let marker_at = rng.gen_range(0..len);
        let mut chars = Vec::with_capacity(len);
        for pos in 0..len {
            if pos == marker_at {
                chars.push(spec.marker(topics[i]));
                continue;
            }
            let ambiguous = governing.is_some()
                && spec.ambiguous_pairs > 0
                && rng.gen_bool(spec.ambiguous_rate);
            // No character follows itself: a doubled character is a run of
            // identical frames whose length the recognizer would have to count.
            let prev = chars.last().copied();
            if ambiguous {
                let p = draw_excluding(&mut rng, spec.ambiguous_pairs, prev.and_then(|c| spec.pair_of(c)));
                chars.push(spec.pair_member_for(p, governing.unwrap()));
            } else {
                let skip = prev.filter(|c| regular.contains(c)).map(|c| c - regular.start);
                chars.push(regular.start + draw_excluding(&mut rng, regular.len(), skip));
            }
        }
        let frames = render_frames(
            &chars,
            templates,
            spec.noise_sigma,
            spec.frames_per_char,
            &mut noise_rng,
        )?;
        utterances.push(Utterance {
            chars,
            frames,
            topic: governing,
        });
    }
    Ok(Conversation {
        id: format!("conv-{index:05}"),
        topic: topics[0],
        utterances,
    })
}

/// Expected corpus-level CER of the best recognizer that sees only the
/// current utterance.
///
/// That recognizer can at best pick the member of each pair that is more
/// common across topics, so it errs on `min(m, 1 - m)` of that pair's
/// occurrences, where `m` is the fraction of topics selecting the second
/// member. With a balanced topic code this is one half.
pub fn ambiguity_floor(spec: &CorpusSpec) -> f64 {
    if spec.ambiguous_pairs == 0 || spec.utterances_per_conversation < 2 {
        return 0.0;
    }
    let mean_len = (spec.min_chars + spec.max_chars) as f64 / 2.0;
    let u = spec.utterances_per_conversation as f64;
    let ambiguous = (u - 1.0) * (mean_len - 1.0) * spec.ambiguous_rate;
    let fraction = ambiguous / (u * mean_len);
    let k = spec.num_topics as f64;
    let err: f64 = (0..spec.ambiguous_pairs)
        .map(|p| {
            let second = (0..spec.num_topics)
                .filter(|&t| spec.pair_member_for(p, t) != spec.pair_members(p).0)
                .count() as f64;
            let m = second / k;
            m.min(1.0 - m)
        })
        .sum::<f64>()
        / spec.ambiguous_pairs as f64;
    fraction * err
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitRatios {
    pub train: f64,
    pub dev: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.8,
            dev: 0.1,
            test: 0.1,
        }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<()> {
        let all = [self.train, self.dev, self.test];
        if all.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
            return Err(Error::InvalidConfig(format!("split ratios must be >= 0: {all:?}")));
        }
        let sum: f64 = all.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig(format!("split ratios sum to {sum}, not 1")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Split {
    pub train: Vec<Conversation>,
    pub dev: Vec<Conversation>,
    pub test: Vec<Conversation>,
}

/// Splits by conversation after a seeded shuffle; each part keeps the
/// original corpus order.
pub fn split_corpus(corpus: &[Conversation], ratios: SplitRatios, seed: u64) -> Result<Split> {
    ratios.validate()?;
    let n = corpus.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut SeedTree::new(seed).named("split").rng());
    let n_train = ((ratios.train * n as f64).round() as usize).min(n);
    let n_dev = ((ratios.dev * n as f64).round() as usize).min(n - n_train);
    let mut parts = [
        order[..n_train].to_vec(),
        order[n_train..n_train + n_dev].to_vec(),
        order[n_train + n_dev..].to_vec(),
    ];
    let [train, dev, test] = parts.each_mut().map(|idx| {
        idx.sort_unstable();
        idx.iter().map(|&i| corpus[i].clone()).collect::<Vec<_>>()
    });
    Ok(Split { train, dev, test })
}

pub fn write_jsonl<W: Write>(mut w: W, corpus: &[Conversation]) -> Result<()> {
    for c in corpus {
        serde_json::to_writer(&mut w, c)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl<R: BufRead>(r: R) -> Result<Vec<Conversation>> {
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let conv: Conversation = serde_json::from_str(&line).map_err(|e| {
            Error::InvalidInput(format!("corpus line {}: {e}", n + 1))
        })?;
        if conv.utterances.is_empty() {
            return Err(Error::InvalidInput(format!(
                "conversation {} has no utterances",
                conv.id
            )));
        }
        for u in &conv.utterances {
            if u.chars.is_empty() {
                return Err(Error::InvalidInput(format!(
                    "conversation {} has an empty transcript",
                    conv.id
                )));
            }
        }
        out.push(conv);
    }
    Ok(out)
}

pub fn save_corpus(path: &Path, corpus: &[Conversation]) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_jsonl(std::io::BufWriter::new(file), corpus)
}

pub fn load_corpus(path: &Path) -> Result<Vec<Conversation>> {
    let file = std::fs::File::open(path)?;
    read_jsonl(std::io::BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn symbol_layout_partitions_vocabulary() {
        let spec = CorpusSpec::default();
        let mut slots = std::collections::BTreeMap::new();
        for c in 0..spec.vocab_size {
            slots.entry(spec.template_slot(c)).or_insert_with(Vec::new).push(c);
        }
        assert_eq!(slots.len(), spec.num_template_slots());
        let shared: Vec<_> = slots.values().filter(|v| v.len() == 2).collect();
        assert_eq!(shared.len(), spec.ambiguous_pairs);
        for v in shared {
            assert_eq!(spec.pair_of(v[0]), spec.pair_of(v[1]));
        }
    }

    #[test]
    fn default_topic_code_is_balanced() {
        let spec = CorpusSpec::default();
        for p in 0..spec.ambiguous_pairs {
            let second = (0..spec.num_topics)
                .filter(|&t| spec.pair_member_for(p, t) == spec.pair_members(p).1)
                .count();
            assert_eq!(second * 2, spec.num_topics);
        }
    }

    #[test]
    fn validation_rejects_crowded_vocabulary() {
        let spec = CorpusSpec {
            vocab_size: 8,
            num_topics: 4,
            ambiguous_pairs: 2,
            ..CorpusSpec::default()
        };
        assert!(matches!(spec.validate(), Err(Error::InvalidSpec(_))));
    }
}
