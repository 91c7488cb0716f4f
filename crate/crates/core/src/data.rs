//! Byte-level corpora, batching, dense pretraining and perplexity.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{DispError, Result};
use crate::model::{lm_loss, model_forward, BlockGates, DenseModel, ModelSpec};
use crate::optim::{clip_global_norm, AdamW, AdamWConfig};
use crate::rng::{stream_rng, Stream};
use crate::tensor::{Graph, Real, Tensor};

/// Beginning-of-stream token; byte values occupy ids 0..=255.
pub const BOS: usize = 256;
pub const VOCAB_SIZE: usize = 257;

pub fn tokenize(bytes: &[u8]) -> Vec<usize> {
    std::iter::once(BOS).chain(bytes.iter().map(|&b| b as usize)).collect()
}

pub fn detokenize(tokens: &[usize]) -> Vec<u8> {
    tokens.iter().filter(|&&t| t < 256).map(|&t| t as u8).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Valid,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" | "validation" => Ok(Split::Valid),
            other => Err(DispError::Usage(format!("unknown split `{other}`"))),
        }
    }
}

/// Tokenized text with a contiguous train/valid split (valid is the tail).
#[derive(Clone, Debug)]
pub struct Corpus {
    tokens: Vec<usize>,
    split_at: usize,
}

impl Corpus {
    pub const DEFAULT_VALID_FRACTION: f64 = 0.1;

    pub fn from_bytes(bytes: &[u8], valid_fraction: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&valid_fraction) {
            return Err(DispError::Config(format!(
                "valid fraction must be in [0, 1), got {valid_fraction}"
            )));
        }
        let tokens = tokenize(bytes);
        let valid = (tokens.len() as f64 * valid_fraction).round() as usize;
        let split_at = tokens.len() - valid;
        Ok(Corpus { tokens, split_at })
    }

    pub fn load(path: &Path, valid_fraction: f64) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes, valid_fraction)
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn split(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.tokens[..self.split_at],
            Split::Valid => &self.tokens[self.split_at..],
        }
    }

    pub fn train(&self) -> &[usize] {
        self.split(Split::Train)
    }

    pub fn valid(&self) -> &[usize] {
        self.split(Split::Valid)
    }
}

/// Inputs and next-token targets for `batch` rows of `seq` tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    pub batch: usize,
    pub seq: usize,
}

/// Deterministic stream of training windows.
///
/// Windows of `seq_len + 1` tokens start every `seq_len` tokens. Each epoch
/// visits every window once in an order shuffled by `(seed, epoch)`, and the
/// stream wraps around indefinitely.
#[derive(Clone, Debug)]
pub struct BatchSource<'a> {
    tokens: &'a [usize],
    seq_len: usize,
    batch_size: usize,
    seed: u64,
    order: Vec<usize>,
    cursor: usize,
    epoch: u64,
}

impl<'a> BatchSource<'a> {
    pub fn new(tokens: &'a [usize], seq_len: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if seq_len == 0 || batch_size == 0 {
            return Err(DispError::Config("seq_len and batch_size must be positive".into()));
        }
        if tokens.len() < seq_len + 1 {
            return Err(DispError::Usage(format!(
                "corpus split has {} tokens, need at least {}",
                tokens.len(),
                seq_len + 1
            )));
        }
        let mut src = BatchSource {
            tokens,
            seq_len,
            batch_size,
            seed,
            order: Vec::new(),
            cursor: 0,
            epoch: 0,
        };
        src.reshuffle();
        Ok(src)
    }

    pub fn window_count(&self) -> usize {
        (self.tokens.len() - 1) / self.seq_len
    }

    fn reshuffle(&mut self) {
        self.order = (0..self.window_count()).collect();
        let mut rng = stream_rng(self.seed, Stream::DataOrder, self.epoch);
        self.order.shuffle(&mut rng);
        self.cursor = 0;
    }

    pub fn next_window(&mut self) -> &'a [usize] {
        if self.cursor == self.order.len() {
            self.epoch += 1;
            self.reshuffle();
        }
        let start = self.order[self.cursor] * self.seq_len;
        self.cursor += 1;
        &self.tokens[start..start + self.seq_len + 1]
    }

    pub fn next_batch(&mut self) -> Batch {
        let mut inputs = Vec::with_capacity(self.batch_size * self.seq_len);
        let mut targets = Vec::with_capacity(self.batch_size * self.seq_len);
        for _ in 0..self.batch_size {
            let w = self.next_window();
            inputs.extend_from_slice(&w[..self.seq_len]);
            targets.extend_from_slice(&w[1..]);
        }
        Batch {
            inputs,
            targets,
            batch: self.batch_size,
            seq: self.seq_len,
        }
    }
}

/// Anything that maps token rows to next-token logits `[batch, seq, V]`.
pub trait LanguageModel<T: Real> {
    fn spec(&self) -> &ModelSpec;
    fn logits(&self, tokens: &[usize], batch: usize) -> Result<Tensor<T>>;
}

impl<T: Real> LanguageModel<T> for DenseModel<T> {
    fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    fn logits(&self, tokens: &[usize], batch: usize) -> Result<Tensor<T>> {
        DenseModel::logits(self, tokens, batch, None)
    }
}

/// The dense model evaluated through fixed gates (masked search form).
pub struct Masked<'a, T> {
    pub model: &'a DenseModel<T>,
    pub gates: &'a [BlockGates],
}

impl<T: Real> LanguageModel<T> for Masked<'_, T> {
    fn spec(&self) -> &ModelSpec {
        &self.model.spec
    }

    fn logits(&self, tokens: &[usize], batch: usize) -> Result<Tensor<T>> {
        self.model.logits(tokens, batch, Some(self.gates))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PplReport {
    pub ppl: f64,
    pub mean_nll: f64,
    pub tokens: usize,
    pub seq_len: usize,
}

/// Non-overlapping windows of at most `seq_len` predicted tokens covering
/// every target position of `tokens` exactly once, as `(start, len)`.
pub fn eval_windows(n_tokens: usize, seq_len: usize) -> Vec<(usize, usize)> {
    let targets = n_tokens.saturating_sub(1);
    (0..targets)
        .step_by(seq_len.max(1))
        .map(|s| (s, seq_len.min(targets - s)))
        .collect()
}

/// `exp(mean token cross-entropy)` over non-overlapping windows.
///
/// `max_tokens` truncates the split before windowing.
pub fn perplexity<T: Real, M: LanguageModel<T> + ?Sized>(
    model: &M,
    tokens: &[usize],
    seq_len: usize,
    batch_size: usize,
    max_tokens: Option<usize>,
) -> Result<PplReport> {
    let tokens = match max_tokens {
        Some(m) => &tokens[..tokens.len().min(m)],
        None => tokens,
    };
    if tokens.len() < 2 {
        return Err(DispError::Usage("cannot evaluate perplexity on an empty split".into()));
    }
    let seq_len = seq_len.min(model.spec().max_seq_len).max(1);
    let windows = eval_windows(tokens.len(), seq_len);
    let (full, partial): (Vec<_>, Vec<_>) = windows.iter().partition(|w| w.1 == seq_len);
    let mut nll = 0.0;
    let mut count = 0usize;
    let mut run = |group: &[&(usize, usize)]| -> Result<()> {
        let len = group[0].1;
        let inputs: Vec<usize> = group.iter().flat_map(|&&(s, l)| tokens[s..s + l].iter().copied()).collect();
        let targets: Vec<usize> = group
            .iter()
            .flat_map(|&&(s, l)| tokens[s + 1..s + l + 1].iter().copied())
            .collect();
        let logits = model.logits(&inputs, group.len())?;
        nll += sum_nll(&logits, &targets);
        count += group.len() * len;
        Ok(())
    };
    for chunk in full.chunks(batch_size.max(1)) {
        run(chunk)?;
    }
    for w in &partial {
        run(&[*w])?;
    }
    let mean_nll = nll / count as f64;
    Ok(PplReport {
        ppl: mean_nll.exp(),
        mean_nll,
        tokens: count,
        seq_len,
    })
}

fn sum_nll<T: Real>(logits: &Tensor<T>, targets: &[usize]) -> f64 {
    let v = logits.last_dim();
    logits
        .data()
        .chunks(v)
        .zip(targets)
        .map(|(row, &t)| {
            let row: Vec<f64> = row.iter().map(|x| x.to_f64().unwrap()).collect();
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|x| (x - mx).exp()).sum::<f64>().ln() + mx;
            lse - row[t]
        })
        .sum()
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seq_len: usize,
    pub seed: u64,
    pub clip: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 1500,
            lr: 3e-3,
            weight_decay: 0.0,
            batch_size: 2,
            seq_len: 64,
            seed: 0,
            clip: 1.0,
        }
    }
}

/// Trains every weight of a freshly initialized model on `tokens`.
///
/// `on_step` receives `(step, loss)` after each update.
pub fn pretrain_dense<T: Real>(
    spec: &ModelSpec,
    tokens: &[usize],
    cfg: &PretrainConfig,
    mut on_step: impl FnMut(usize, f64),
) -> Result<DenseModel<T>> {
    let mut model = DenseModel::<T>::init(spec, cfg.seed)?;
    let mut source = BatchSource::new(tokens, cfg.seq_len.min(spec.max_seq_len), cfg.batch_size, cfg.seed)?;
    let sizes: Vec<usize> = model.named_tensors().iter().map(|(_, t)| t.len()).collect();
    let mut opt = AdamW::new(
        AdamWConfig {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            ..AdamWConfig::default()
        },
        &sizes,
    )?;
    for step in 0..cfg.steps {
        let batch = source.next_batch();
        let g = Graph::new();
        let bound = model.bind(&g, true);
        let logits = model_forward(&g, spec, &bound, &batch.inputs, batch.batch, None)?;
        let loss = lm_loss(&g, logits, &batch.targets)?;
        let value = g.item(loss).to_f64().unwrap_or(f64::NAN);
        if !value.is_finite() {
            return Err(DispError::Diverged {
                iteration: step,
                detail: format!("pretraining loss {value}"),
            });
        }
        g.backward(loss)?;
        let mut grads: Vec<Option<Tensor<T>>> = bound.vars().into_iter().map(|v| g.grad(v)).collect();
        clip_global_norm(&mut grads, cfg.clip);
        let mut params: Vec<&mut Tensor<T>> = model.named_tensors_mut().into_iter().map(|(_, t)| t).collect();
        opt.step(&mut params, &grads)?;
        on_step(step, value);
    }
    Ok(model)
}

/// Deterministic English-like text for experiments without a downloaded corpus.
pub fn synthetic_corpus(bytes: usize, seed: u64) -> String {
    const NAMES: &[&str] = &[
        "Alice", "Bruno", "Clara", "Dmitri", "Elena", "Farid", "Grace", "Hiro", "Ines", "Jonas",
        "Kira", "Luca", "Maya", "Nadia", "Omar", "Priya",
    ];
    const DETS: &[&str] = &["the", "a", "every", "some", "this", "that", "one", "her", "his", "our"];
    const ADJS: &[&str] = &[
        "small", "quiet", "red", "old", "bright", "heavy", "narrow", "warm", "distant", "broken",
        "green", "curious", "gentle", "empty", "sharp", "golden", "silent", "tired", "young", "wide",
    ];
    const NOUNS: &[&str] = &[
        "river", "garden", "window", "letter", "station", "forest", "engine", "bridge", "market",
        "teacher", "lamp", "mountain", "city", "door", "ship", "field", "book", "machine", "voice",
        "storm", "table", "village", "road", "bird", "clock", "painting", "harbor", "tower",
        "kitchen", "stone", "song", "cloud",
    ];
    const VERBS: &[&str] = &[
        "found", "carried", "watched", "painted", "followed", "repaired", "opened", "described",
        "remembered", "crossed", "visited", "measured", "built", "moved", "lifted", "heard",
        "closed", "cleaned", "sold", "noticed",
    ];
    const PREPS: &[&str] = &["near", "behind", "under", "across", "beside", "inside", "toward", "above"];
    const ADVS: &[&str] = &["slowly", "again", "today", "carefully", "at night", "once more", "quickly", "in silence"];

    let mut rng = stream_rng(seed, Stream::DataOrder, u64::MAX >> 16);
    let mut out = String::with_capacity(bytes + 128);
    let pick = |rng: &mut rand_chacha::ChaCha8Rng, xs: &[&'static str]| -> &'static str {
        // mild Zipf skew: favour early entries
        let u: f64 = rng.gen();
        xs[((u * u) * xs.len() as f64) as usize % xs.len()]
    };
    let mut sentences_in_par = 0;
    while out.len() < bytes {
        let mut words: Vec<String> = Vec::new();
        let noun_phrase = |rng: &mut rand_chacha::ChaCha8Rng, words: &mut Vec<String>| {
            words.push(pick(rng, DETS).to_string());
            if rng.gen_bool(0.5) {
                words.push(pick(rng, ADJS).to_string());
            }
            words.push(pick(rng, NOUNS).to_string());
        };
        if rng.gen_bool(0.4) {
            words.push(pick(&mut rng, NAMES).to_string());
        } else {
            noun_phrase(&mut rng, &mut words);
        }
        words.push(pick(&mut rng, VERBS).to_string());
        noun_phrase(&mut rng, &mut words);
        if rng.gen_bool(0.5) {
            words.push(pick(&mut rng, PREPS).to_string());
            noun_phrase(&mut rng, &mut words);
        }
        if rng.gen_bool(0.3) {
            words.push(pick(&mut rng, ADVS).to_string());
        }
        let mut sentence = words.join(" ");
        if let Some(first) = sentence.get(0..1) {
            let upper = first.to_uppercase();
            sentence.replace_range(0..1, &upper);
        }
        out.push_str(&sentence);
        out.push('.');
        sentences_in_par += 1;
        if sentences_in_par >= 3 && rng.gen_bool(0.25) {
            out.push_str("\n\n");
            sentences_in_par = 0;
        } else {
            out.push(' ');
        }
    }
    out.truncate(bytes);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn micro_spec() -> ModelSpec {
        ModelSpec {
            d: 16,
            n_layers: 1,
            n_heads: 2,
            d_mid: 32,
            max_seq_len: 16,
            ..ModelSpec::tiny()
        }
    }

    proptest! {
        #[test]
        fn tokenize_roundtrip(bytes in proptest::collection::vec(any::<u8>(), 0..200)) {
            let t = tokenize(&bytes);
            prop_assert_eq!(t[0], BOS);
            prop_assert_eq!(detokenize(&t), bytes);
        }

        #[test]
        fn eval_windows_cover_each_target_once(n in 2usize..300, seq in 1usize..40) {
            let mut seen = vec![0u8; n - 1];
            for (s, l) in eval_windows(n, seq) {
                prop_assert!(l >= 1 && l <= seq);
                for p in s..s + l {
                    seen[p] += 1;
                }
            }
            prop_assert!(seen.iter().all(|&c| c == 1));
        }
    }

    #[test]
    fn corpus_split_and_determinism() {
        let text = synthetic_corpus(1000, 3);
        assert_eq!(text.len(), 1000);
        assert_eq!(text, synthetic_corpus(1000, 3));
        let c = Corpus::from_bytes(text.as_bytes(), 0.1).unwrap();
        assert_eq!(c.train().len() + c.valid().len(), 1001);
        assert_eq!(c.valid().len(), 100);
        assert!(Corpus::from_bytes(b"x", 1.5).is_err());
    }

    #[test]
    fn batch_source_windows_and_epochs() {
        let tokens: Vec<usize> = (0..101).collect();
        let mut src = BatchSource::new(&tokens, 10, 2, 9).unwrap();
        assert_eq!(src.window_count(), 10);
        let mut starts = Vec::new();
        for _ in 0..5 {
            let b = src.next_batch();
            assert_eq!(b.inputs.len(), 20);
            for r in 0..2 {
                let row = &b.inputs[r * 10..(r + 1) * 10];
                assert_eq!(&b.targets[r * 10..(r + 1) * 10], &tokens[row[0] + 1..row[0] + 11]);
                starts.push(row[0]);
            }
        }
        starts.sort();
        assert_eq!(starts, (0..10).map(|i| i * 10).collect::<Vec<_>>());
        let mut again = BatchSource::new(&tokens, 10, 2, 9).unwrap();
        let mut first = BatchSource::new(&tokens, 10, 2, 9).unwrap();
        for _ in 0..12 {
            assert_eq!(again.next_batch(), first.next_batch());
        }
        assert!(BatchSource::new(&tokens[..5], 10, 1, 0).is_err());
    }

    #[test]
    fn untrained_model_perplexity_near_vocab_size() {
        let spec = micro_spec();
        let model = DenseModel::<f64>::init(&spec, 1).unwrap();
        let text = synthetic_corpus(600, 1);
        let tokens = tokenize(text.as_bytes());
        let r = perplexity(&model, &tokens, 16, 4, None).unwrap();
        assert_eq!(r.tokens, tokens.len() - 1);
        assert!((r.ppl / 257.0 - 1.0).abs() < 0.02, "ppl {}", r.ppl);
    }

    #[test]
    fn perplexity_invariant_to_batch_size() {
        let spec = micro_spec();
        let model = DenseModel::<f64>::init(&spec, 2).unwrap();
        let tokens = tokenize(synthetic_corpus(300, 2).as_bytes());
        let a = perplexity(&model, &tokens, 16, 1, None).unwrap();
        let b = perplexity(&model, &tokens, 16, 7, None).unwrap();
        assert_eq!(a.tokens, b.tokens);
        assert!((a.ppl - b.ppl).abs() <= 1e-12 * a.ppl);
    }

    #[test]
    fn perplexity_rejects_empty_split() {
        let model = DenseModel::<f64>::init(&micro_spec(), 0).unwrap();
        assert!(matches!(perplexity(&model, &[BOS], 8, 1, None), Err(DispError::Usage(_))));
    }

    #[test]
    fn memorizes_repeated_single_byte() {
        let spec = micro_spec();
        let tokens = tokenize(&[b'a'; 400]);
        let cfg = PretrainConfig {
            steps: 60,
            lr: 1e-2,
            batch_size: 2,
            seq_len: 16,
            ..PretrainConfig::default()
        };
        let model = pretrain_dense::<f64>(&spec, &tokens, &cfg, |_, _| {}).unwrap();
        let r = perplexity(&model, &tokens[1..], 16, 4, None).unwrap();
        assert!(r.ppl < 1.05, "ppl {}", r.ppl);
    }

    #[test]
    fn pretraining_is_deterministic_and_learns() {
        let spec = micro_spec();
        let tokens = tokenize(synthetic_corpus(4000, 5).as_bytes());
        let cfg = PretrainConfig {
            steps: 40,
            seq_len: 16,
            ..PretrainConfig::default()
        };
        let mut l1 = Vec::new();
        let a = pretrain_dense::<f64>(&spec, &tokens, &cfg, |_, l| l1.push(l)).unwrap();
        let mut l2 = Vec::new();
        let b = pretrain_dense::<f64>(&spec, &tokens, &cfg, |_, l| l2.push(l)).unwrap();
        assert_eq!(l1, l2);
        assert_eq!(a, b);
        assert!(l1.last().unwrap() < &(l1[0] * 0.8), "{l1:?}");
    }
}
