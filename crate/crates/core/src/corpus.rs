//! Corpus ingestion: vocabulary, token sequences, length statistics and
//! minibatch selection.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::ops::Deref;
use std::path::Path;

use rand::Rng;

use crate::error::{Result, TrfError};

/// Reserved out-of-vocabulary token, always id 0.
pub const UNK: &str = "<unk>";

/// Bijection between tokens and ids. Id 0 is always [`UNK`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    id_to_token: Vec<String>,
    token_to_id: HashMap<String, u32>,
}

impl Vocab {
    /// Builds a vocabulary from token strings; the first must be [`UNK`].
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.first().map(String::as_str) != Some(UNK) {
            return Err(TrfError::Ingestion(format!("first vocabulary entry must be {UNK}")));
        }
        if tokens.len() < 2 {
            return Err(TrfError::Ingestion("vocabulary needs at least one word besides <unk>".into()));
        }
        let mut token_to_id = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(TrfError::Ingestion(format!("invalid vocabulary token {t:?}")));
            }
            if token_to_id.insert(t.clone(), i as u32).is_some() {
                return Err(TrfError::Ingestion(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Self { id_to_token: tokens, token_to_id })
    }

    /// Synthetic vocabulary `<unk>, w1, .., w{size-1}` for fixtures.
    pub fn synthetic(size: usize) -> Result<Self> {
        let mut tokens = vec![UNK.to_string()];
        tokens.extend((1..size).map(|i| format!("w{i}")));
        Self::from_tokens(tokens)
    }

    pub fn size(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn unk_id(&self) -> u32 {
        0
    }

    pub fn id(&self, token: &str) -> u32 {
        self.token_to_id.get(token).copied().unwrap_or(0)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    pub fn decode(&self, seq: &[u32]) -> String {
        seq.iter()
            .map(|&i| self.token(i).unwrap_or(UNK))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        for t in &self.id_to_token {
            writeln!(w, "{t}")?;
        }
        Ok(())
    }

    pub fn read<R: BufRead>(r: R) -> Result<Self> {
        let mut tokens = Vec::new();
        for line in r.lines() {
            let line = line?;
            let t = line.trim();
            if !t.is_empty() {
                tokens.push(t.to_string());
            }
        }
        Self::from_tokens(tokens)
    }
}

/// Ranks tokens by frequency (ties lexicographic) and keeps the top
/// `max_size - 1` next to `<unk>`.
pub fn build_vocab<I, S>(lines: I, max_size: usize) -> Result<Vocab>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    if max_size < 2 {
        return Err(TrfError::Ingestion(format!("max vocabulary size {max_size} < 2")));
    }
    let mut counts: HashMap<String, u64> = HashMap::new();
    for line in lines {
        for tok in line.as_ref().split_whitespace() {
            if tok != UNK {
                *counts.entry(tok.to_string()).or_default() += 1;
            }
        }
    }
    if counts.is_empty() {
        return Err(TrfError::Ingestion("corpus contains no tokens".into()));
    }
    let mut ranked: Vec<(String, u64)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let mut tokens = vec![UNK.to_string()];
    tokens.extend(ranked.into_iter().take(max_size - 1).map(|(t, _)| t));
    Vocab::from_tokens(tokens)
}

/// A sentence as vocabulary ids, without boundary tokens.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenSeq(Vec<u32>);

impl TokenSeq {
    pub fn new(ids: Vec<u32>) -> Self {
        Self(ids)
    }

    pub fn ids(&self) -> &[u32] {
        &self.0
    }

    pub fn into_ids(self) -> Vec<u32> {
        self.0
    }
}

impl Deref for TokenSeq {
    type Target = [u32];

    fn deref(&self) -> &[u32] {
        &self.0
    }
}

impl From<Vec<u32>> for TokenSeq {
    fn from(ids: Vec<u32>) -> Self {
        Self(ids)
    }
}

/// Whitespace-tokenises `text`; unknown words map to `<unk>`.
pub fn encode(text: &str, vocab: &Vocab, max_len: usize) -> Result<TokenSeq> {
    let ids: Vec<u32> = text.split_whitespace().map(|t| vocab.id(t)).collect();
    if ids.is_empty() {
        return Err(TrfError::Encode("empty sentence".into()));
    }
    if ids.len() > max_len {
        return Err(TrfError::Encode(format!(
            "sentence has {} tokens, maximum is {max_len}",
            ids.len()
        )));
    }
    Ok(TokenSeq(ids))
}

/// Probability vector over lengths `1..=m`, stored at index `l - 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct LengthDist {
    probs: Vec<f64>,
}

impl LengthDist {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(TrfError::Domain("length distribution over zero lengths".into()));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(TrfError::Domain("length probabilities must be finite and nonnegative".into()));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(TrfError::Domain(format!("length probabilities sum to {sum}")));
        }
        Ok(Self { probs })
    }

    /// Normalises nonnegative weights into a distribution.
    pub fn from_weights(weights: &[f64]) -> Result<Self> {
        let sum: f64 = weights.iter().sum();
        if !(sum > 0.0) || !sum.is_finite() {
            return Err(TrfError::Domain("length weights must have a positive finite sum".into()));
        }
        let mut probs: Vec<f64> = weights.iter().map(|w| w / sum).collect();
        // absorb rounding so the 1e-12 invariant holds exactly
        let resid = 1.0 - probs.iter().sum::<f64>();
        if let Some(p) = probs.iter_mut().filter(|p| **p > 0.0).max_by(|a, b| a.total_cmp(b)) {
            *p += resid;
        }
        Self::new(probs)
    }

    pub fn uniform(m: usize) -> Result<Self> {
        Self::from_weights(&vec![1.0; m])
    }

    pub fn max_len(&self) -> usize {
        self.probs.len()
    }

    /// Probability of length `l` (1-based); 0 outside `1..=m`.
    pub fn prob(&self, l: usize) -> f64 {
        if l == 0 {
            return 0.0;
        }
        self.probs.get(l - 1).copied().unwrap_or(0.0)
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// Flattened copy: `p_l ∝ max(p_l, floor * max_j p_j)`. Every length gets
    /// positive mass.
    pub fn flattened(&self, floor: f64) -> Result<Self> {
        let top = self.probs.iter().cloned().fold(0.0, f64::max);
        let w: Vec<f64> = self.probs.iter().map(|&p| p.max(floor * top)).collect();
        Self::from_weights(&w)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (i, p) in self.probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return i + 1;
            }
        }
        // u landed in the rounding gap; return the last supported length
        self.probs.iter().rposition(|&p| p > 0.0).unwrap_or(0) + 1
    }
}

/// Immutable training or evaluation corpus, bucketed by length.
#[derive(Debug, Clone)]
pub struct CorpusStore {
    sentences: Vec<TokenSeq>,
    buckets: Vec<Vec<usize>>,
    max_len: usize,
}

impl CorpusStore {
    pub fn new(sentences: Vec<TokenSeq>, max_len: usize) -> Result<Self> {
        if max_len == 0 {
            return Err(TrfError::Ingestion("max length must be positive".into()));
        }
        let mut buckets = vec![Vec::new(); max_len];
        for (i, s) in sentences.iter().enumerate() {
            if s.is_empty() || s.len() > max_len {
                return Err(TrfError::Length { len: s.len(), max: max_len });
            }
            buckets[s.len() - 1].push(i);
        }
        Ok(Self { sentences, buckets, max_len })
    }

    /// Encodes text lines, skipping blank lines and truncating sentences
    /// longer than `max_len`.
    pub fn from_lines<I, S>(lines: I, vocab: &Vocab, max_len: usize) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut sentences = Vec::new();
        let mut truncated = 0usize;
        for line in lines {
            let mut ids: Vec<u32> = line.as_ref().split_whitespace().map(|t| vocab.id(t)).collect();
            if ids.is_empty() {
                continue;
            }
            if ids.len() > max_len {
                ids.truncate(max_len);
                truncated += 1;
            }
            sentences.push(TokenSeq(ids));
        }
        if truncated > 0 {
            log::warn!("truncated {truncated} sentences longer than {max_len} tokens");
        }
        Self::new(sentences, max_len)
    }

    pub fn read_file(path: &Path, vocab: &Vocab, max_len: usize) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_lines(text.lines(), vocab, max_len)
    }

    /// Encodes every nonblank line without truncation; the store's maximum
    /// length is that of the longest sentence. For evaluation corpora.
    pub fn from_lines_full<I, S>(lines: I, vocab: &Vocab) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let sentences: Vec<TokenSeq> = lines
            .into_iter()
            .map(|l| TokenSeq(l.as_ref().split_whitespace().map(|t| vocab.id(t)).collect()))
            .filter(|s| !s.is_empty())
            .collect();
        let longest = sentences.iter().map(|s| s.len()).max().unwrap_or(1);
        Self::new(sentences, longest)
    }

    pub fn read_file_full(path: &Path, vocab: &Vocab) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_lines_full(text.lines(), vocab)
    }

    pub fn sentences(&self) -> &[TokenSeq] {
        &self.sentences
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    /// Indices of sentences of length `l` (the bucket D_l).
    pub fn bucket(&self, l: usize) -> &[usize] {
        if l == 0 || l > self.max_len {
            return &[];
        }
        &self.buckets[l - 1]
    }

    pub fn token_count(&self) -> usize {
        self.sentences.iter().map(|s| s.len()).sum()
    }
}

/// Empirical length distribution `|D_l| / |D|`.
pub fn length_histogram(store: &CorpusStore) -> Result<LengthDist> {
    if store.is_empty() {
        return Err(TrfError::Ingestion("length histogram of an empty corpus".into()));
    }
    let counts: Vec<f64> = (1..=store.max_len()).map(|l| store.bucket(l).len() as f64).collect();
    LengthDist::from_weights(&counts)
}

/// Draws `k` sentences uniformly with replacement.
pub fn sample_minibatch<'a, R: Rng + ?Sized>(
    store: &'a CorpusStore,
    k: usize,
    rng: &mut R,
) -> Result<Vec<&'a TokenSeq>> {
    if k == 0 {
        return Err(TrfError::Domain("minibatch size must be at least 1".into()));
    }
    if store.is_empty() {
        return Err(TrfError::Ingestion("minibatch from an empty corpus".into()));
    }
    Ok((0..k).map(|_| &store.sentences[rng.random_range(0..store.len())]).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn vocab_ranks_by_frequency_then_lexically() {
        let v = build_vocab(["a b", "a c"], 3).unwrap();
        assert_eq!(v.tokens(), &["<unk>", "a", "b"]);
        assert_eq!(v.id("c"), v.unk_id());
    }

    #[test]
    fn vocab_single_token() {
        let v = build_vocab(["a"], 10).unwrap();
        assert_eq!(v.size(), 2);
    }

    #[test]
    fn vocab_empty_stream_fails() {
        assert!(build_vocab(Vec::<String>::new(), 10).is_err());
        assert!(build_vocab(["   ", ""], 10).is_err());
        assert!(build_vocab(["a"], 1).is_err());
    }

    #[test]
    fn vocab_file_round_trip() {
        let v = build_vocab(["x y y z"], 10).unwrap();
        let mut buf = Vec::new();
        v.write(&mut buf).unwrap();
        assert_eq!(Vocab::read(&buf[..]).unwrap(), v);
    }

    #[test]
    fn encode_examples() {
        let v = Vocab::from_tokens(vec!["<unk>".into(), "a".into(), "b".into()]).unwrap();
        assert_eq!(encode("a b", &v, 5).unwrap().ids(), &[1, 2]);
        assert_eq!(encode("a z", &v, 5).unwrap().ids(), &[1, 0]);
        assert!(encode("", &v, 5).is_err());
        assert!(encode("a a a", &v, 2).is_err());
    }

    #[test]
    fn histogram_examples() {
        let s = |ids: &[u32]| TokenSeq::new(ids.to_vec());
        let store = CorpusStore::new(vec![s(&[1]), s(&[1]), s(&[1, 1])], 2).unwrap();
        let h = length_histogram(&store).unwrap();
        assert!((h.prob(1) - 2.0 / 3.0).abs() < 1e-15);
        assert!((h.prob(2) - 1.0 / 3.0).abs() < 1e-15);

        let store = CorpusStore::new(vec![s(&[1, 1, 1, 1]); 3], 4).unwrap();
        assert_eq!(length_histogram(&store).unwrap().probs(), &[0.0, 0.0, 0.0, 1.0]);

        let empty = CorpusStore::new(vec![], 4).unwrap();
        assert!(length_histogram(&empty).is_err());
    }

    #[test]
    fn ingestion_truncates_long_sentences() {
        let v = Vocab::synthetic(3).unwrap();
        let store = CorpusStore::from_lines(["w1 w2 w1 w2", "", "w1"], &v, 2).unwrap();
        assert_eq!(store.len(), 2);
        assert_eq!(store.sentences()[0].len(), 2);
    }

    #[test]
    fn minibatch_size_and_determinism() {
        let v = Vocab::synthetic(5).unwrap();
        let lines: Vec<String> = (1..5).map(|i| format!("w{i}")).collect();
        let store = CorpusStore::from_lines(&lines, &v, 3).unwrap();
        let mut r1 = ChaCha8Rng::seed_from_u64(7);
        let mut r2 = ChaCha8Rng::seed_from_u64(7);
        let a = sample_minibatch(&store, 1000, &mut r1).unwrap();
        let b = sample_minibatch(&store, 1000, &mut r2).unwrap();
        assert_eq!(a.len(), 1000);
        assert_eq!(a, b);

        let one = CorpusStore::from_lines(["w1 w2"], &v, 3).unwrap();
        let got = sample_minibatch(&one, 1, &mut r1).unwrap();
        assert_eq!(got[0].ids(), &[1, 2]);
        assert!(sample_minibatch(&one, 0, &mut r1).is_err());
    }

    #[test]
    fn minibatch_is_uniform_chi_square() {
        let v = Vocab::synthetic(11).unwrap();
        let lines: Vec<String> = (1..11).map(|i| format!("w{i}")).collect();
        let store = CorpusStore::from_lines(&lines, &v, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let draws = 100_000;
        let batch = sample_minibatch(&store, draws, &mut rng).unwrap();
        let mut counts = [0f64; 10];
        for s in batch {
            counts[s[0] as usize - 1] += 1.0;
        }
        let expected = draws as f64 / 10.0;
        let chi2: f64 = counts.iter().map(|c| (c - expected).powi(2) / expected).sum();
        // chi-square 9 dof, p = 0.01 critical value
        assert!(chi2 < 21.666, "chi2 = {chi2}");
    }

    #[test]
    fn flattened_gives_every_length_mass() {
        let d = LengthDist::new(vec![0.0, 0.25, 0.75]).unwrap();
        let f = d.flattened(0.1).unwrap();
        assert!(f.probs().iter().all(|&p| p > 0.0));
        assert!((f.probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((f.prob(1) / f.prob(3) - 0.1).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn histogram_is_a_distribution(lens in proptest::collection::vec(1usize..=6, 1..60)) {
            let store = CorpusStore::new(
                lens.iter().map(|&l| TokenSeq::new(vec![1; l])).collect(), 6).unwrap();
            let h = length_histogram(&store).unwrap();
            prop_assert!(h.probs().iter().all(|&p| p >= 0.0));
            prop_assert!((h.probs().iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }

        #[test]
        fn encode_decode_round_trips(words in proptest::collection::vec(1usize..8, 1..10)) {
            let v = Vocab::synthetic(8).unwrap();
            let text = words.iter().map(|i| format!("w{i}")).collect::<Vec<_>>().join(" ");
            let seq = encode(&text, &v, 10).unwrap();
            prop_assert_eq!(v.decode(&seq), text);
        }
    }
}
