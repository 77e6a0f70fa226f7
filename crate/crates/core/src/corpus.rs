//! Synthetic character-level corpora with constructed sample characteristics.
//!
//! Every sample is a short "sentence" of pseudo-words built from
//! consonant-vowel syllables. Three independent knobs are set per sample:
//!
//! * frequency tier: high-frequency samples are repeated `high_replication`
//!   times in the training stream, low-frequency ones appear once;
//! * complexity tier: high-complexity samples have more words and a
//!   subordinate clause, so they are at least twice as long;
//! * rare-token flag: at least `rare_per_sample` reserved rare characters are
//!   injected into the sample's words.
//!
//! Each sample starts with a letter pair no other sample starts with, so from
//! its third character on a sample is fully determined by its prefix.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub type TokenId = u32;

/// End-of-sequence token.
pub const EOS: TokenId = 0;
/// Begin-of-sequence token, the implicit prefix of every sequence.
pub const BOS: TokenId = 1;
const FIRST_CHAR_ID: TokenId = 2;

pub const CORPUS_SCHEMA_VERSION: u32 = 1;

const CONSONANTS: &[char] = &[
    'b', 'c', 'd', 'f', 'g', 'h', 'j', 'k', 'l', 'm', 'n', 'p', 'r', 's', 't', 'v', 'w', 'z',
];
const VOWELS: &[char] = &['a', 'e', 'i', 'o', 'u'];
const DEFAULT_RARE: &[char] = &['#', '$', '%', '&', '@', '~'];

/// Character ↔ id table. Ids 0 and 1 are EOS and BOS.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    chars: Vec<char>,
    rare: Vec<char>,
}

impl Vocab {
    pub fn new(common: impl IntoIterator<Item = char>, rare: impl IntoIterator<Item = char>) -> Result<Self> {
        let common: Vec<char> = common.into_iter().collect();
        let rare: Vec<char> = rare.into_iter().collect();
        let mut chars = common;
        chars.extend(rare.iter().copied());
        let mut seen = HashSet::new();
        if let Some(c) = chars.iter().find(|c| !seen.insert(**c)) {
            return Err(Error::invalid(format!("duplicate vocabulary character {c:?}")));
        }
        Ok(Vocab { chars, rare })
    }

    /// Lowercase letters, space, period, comma and the default rare set.
    pub fn standard() -> Self {
        let common = ('a'..='z').chain([' ', '.', ',']);
        Vocab::new(common, DEFAULT_RARE.iter().copied()).expect("standard vocabulary is valid")
    }

    /// Number of ids, including EOS and BOS.
    pub fn size(&self) -> usize {
        self.chars.len() + FIRST_CHAR_ID as usize
    }

    pub fn rare_chars(&self) -> &[char] {
        &self.rare
    }

    pub fn id_of(&self, c: char) -> Option<TokenId> {
        self.chars
            .iter()
            .position(|&x| x == c)
            .map(|i| i as TokenId + FIRST_CHAR_ID)
    }

    pub fn char_of(&self, id: TokenId) -> Option<char> {
        id.checked_sub(FIRST_CHAR_ID)
            .and_then(|i| self.chars.get(i as usize).copied())
    }

    pub fn is_rare(&self, id: TokenId) -> bool {
        self.char_of(id).is_some_and(|c| self.rare.contains(&c))
    }

    /// One id per character; no BOS/EOS framing is added.
    pub fn tokenize(&self, text: &str) -> Result<Vec<TokenId>> {
        let mut bad = BTreeSet::new();
        let ids: Vec<TokenId> = text
            .chars()
            .filter_map(|c| {
                let id = self.id_of(c);
                if id.is_none() {
                    bad.insert(c);
                }
                id
            })
            .collect();
        if !bad.is_empty() {
            return Err(Error::invalid(format!("characters outside the vocabulary: {bad:?}")));
        }
        Ok(ids)
    }

    /// Inverse of [`Vocab::tokenize`]. BOS is skipped and decoding stops at EOS.
    pub fn detokenize(&self, tokens: &[TokenId]) -> Result<String> {
        let mut s = String::with_capacity(tokens.len());
        for &t in tokens {
            match t {
                EOS => break,
                BOS => continue,
                _ => s.push(
                    self.char_of(t)
                        .ok_or_else(|| Error::invalid(format!("token id {t} outside the vocabulary")))?,
                ),
            }
        }
        Ok(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tier {
    Low,
    High,
}

impl std::fmt::Display for Tier {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Tier::Low => "low",
            Tier::High => "high",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Labels {
    pub frequency_tier: Tier,
    pub complexity_tier: Tier,
    pub rare_token: bool,
    pub replication_count: usize,
    /// Attached after training: mean token probability above or below the
    /// corpus average.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_probability_tier: Option<Tier>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub sample_id: String,
    pub text: String,
    pub tokens: Vec<TokenId>,
    pub labels: Labels,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

impl AsRef<[TokenId]> for TokenSequence {
    fn as_ref(&self) -> &[TokenId] {
        &self.tokens
    }
}

/// Knobs of the synthetic generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusSpec {
    /// Samples in each of the 8 (frequency × complexity × rare) cells.
    pub per_cell: usize,
    /// Training-stream copies of a high-frequency sample.
    pub high_replication: usize,
    /// Word count range for low-complexity samples (inclusive).
    pub low_words: (usize, usize),
    /// Word count range for high-complexity samples (inclusive); one comma
    /// clause is added.
    pub high_words: (usize, usize),
    /// Syllables per word (inclusive range).
    pub syllables: (usize, usize),
    pub rare_per_sample: usize,
    pub forget_fraction: f64,
    /// Extra never-trained samples (same grammar, mixed tiers).
    pub heldout: usize,
    /// Rare characters to inject; must be rare characters of the vocabulary.
    pub rare_chars: Vec<char>,
    pub max_len: usize,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            per_cell: 25,
            high_replication: 10,
            low_words: (3, 3),
            high_words: (7, 7),
            syllables: (2, 2),
            rare_per_sample: 3,
            forget_fraction: 0.1,
            heldout: 20,
            rare_chars: DEFAULT_RARE.to_vec(),
            max_len: 63,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self, vocab: &Vocab) -> Result<()> {
        if self.per_cell == 0 {
            return Err(Error::invalid("per_cell must be at least 1"));
        }
        if self.high_replication < 2 {
            return Err(Error::invalid("high_replication must be at least 2"));
        }
        if self.low_words.0 == 0 || self.low_words.0 > self.low_words.1 || self.high_words.0 > self.high_words.1 {
            return Err(Error::invalid("word ranges must be non-empty"));
        }
        if self.syllables.0 == 0 || self.syllables.0 > self.syllables.1 {
            return Err(Error::invalid("syllable range must be non-empty"));
        }
        if self.rare_chars.is_empty() && self.rare_per_sample > 0 {
            return Err(Error::invalid("rare-token tier needs at least one rare character"));
        }
        for c in &self.rare_chars {
            if !vocab.rare_chars().contains(c) {
                return Err(Error::invalid(format!("rare character {c:?} is not a rare vocabulary entry")));
            }
        }
        let unique_openers = 26 * 26;
        if 8 * self.per_cell + self.heldout > unique_openers {
            return Err(Error::invalid(format!(
                "at most {unique_openers} samples fit the opener space"
            )));
        }
        if !(self.forget_fraction > 0.0 && self.forget_fraction < 1.0) {
            return Err(Error::invalid("forget_fraction must lie in (0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub forget: Vec<TokenSequence>,
    pub retain: Vec<TokenSequence>,
    /// Never trained on; the non-member reference set.
    pub heldout: Vec<TokenSequence>,
    pub vocab: Vocab,
    pub spec: CorpusSpec,
    pub seed: u64,
}

impl Corpus {
    /// Forget and retain samples, in that order.
    pub fn training_samples(&self) -> impl Iterator<Item = &TokenSequence> {
        self.forget.iter().chain(&self.retain)
    }

    /// Training sequences, each repeated by its replication count.
    pub fn training_stream(&self) -> Vec<&[TokenId]> {
        self.training_samples()
            .flat_map(|s| std::iter::repeat(s.tokens.as_slice()).take(s.labels.replication_count))
            .collect()
    }

    pub fn all_samples(&self) -> impl Iterator<Item = &TokenSequence> {
        self.training_samples().chain(&self.heldout)
    }

    pub fn find(&self, sample_id: &str) -> Option<&TokenSequence> {
        self.all_samples().find(|s| s.sample_id == sample_id)
    }

    pub fn max_len(&self) -> usize {
        self.all_samples().map(|s| s.len()).max().unwrap_or(0)
    }
}

struct Generator<'a> {
    spec: &'a CorpusSpec,
    vocab: &'a Vocab,
    rng: rng::StreamRng,
    openers: Vec<String>,
}

impl Generator<'_> {
    fn syllable(&mut self) -> String {
        let c = *CONSONANTS.choose(&mut self.rng).unwrap();
        let v = *VOWELS.choose(&mut self.rng).unwrap();
        format!("{c}{v}")
    }

    fn word(&mut self) -> String {
        let n = self.rng.gen_range(self.spec.syllables.0..=self.spec.syllables.1);
        (0..n).map(|_| self.syllable()).collect()
    }

    fn sentence(&mut self, complexity: Tier, rare: bool) -> String {
        let (lo, hi) = match complexity {
            Tier::Low => self.spec.low_words,
            Tier::High => self.spec.high_words,
        };
        let n = self.rng.gen_range(lo..=hi);
        let opener = self.openers.pop().expect("opener space checked in validate");
        let mut words: Vec<String> = Vec::with_capacity(n + 2);
        words.push(format!("{opener}{}", self.word()));
        for _ in 1..n {
            words.push(self.word());
        }
        if rare {
            self.inject_rare(&mut words);
        }
        let mut text = String::new();
        for (i, w) in words.iter().enumerate() {
            if i > 0 {
                text.push(' ');
            }
            text.push_str(w);
            if complexity == Tier::High && i == n / 2 - 1 {
                text.push(',');
            }
        }
        text.push('.');
        text
    }

    /// Replace letters after the opener syllable with rare characters.
    fn inject_rare(&mut self, words: &mut [String]) {
        let mut slots: Vec<(usize, usize)> = Vec::new();
        for (wi, w) in words.iter().enumerate() {
            let skip = if wi == 0 { 2 } else { 0 };
            for ci in skip..w.chars().count() {
                slots.push((wi, ci));
            }
        }
        slots.shuffle(&mut self.rng);
        for &(wi, ci) in slots.iter().take(self.spec.rare_per_sample) {
            let r = *self.spec.rare_chars.choose(&mut self.rng).unwrap();
            let mut chars: Vec<char> = words[wi].chars().collect();
            chars[ci] = r;
            words[wi] = chars.into_iter().collect();
        }
    }

    fn sample(&mut self, id: usize, frequency: Tier, complexity: Tier, rare: bool) -> Result<TokenSequence> {
        let mut text = self.sentence(complexity, rare);
        if text.chars().count() > self.spec.max_len {
            text = text.chars().take(self.spec.max_len - 1).collect::<String>() + ".";
        }
        let tokens = self.vocab.tokenize(&text)?;
        Ok(TokenSequence {
            sample_id: format!("s{id:04}"),
            text,
            tokens,
            labels: Labels {
                frequency_tier: frequency,
                complexity_tier: complexity,
                rare_token: rare,
                replication_count: match frequency {
                    Tier::Low => 1,
                    Tier::High => self.spec.high_replication,
                },
                initial_probability_tier: None,
            },
        })
    }
}

/// Generate a corpus with the standard vocabulary.
pub fn generate_corpus(spec: &CorpusSpec, seed: u64) -> Result<Corpus> {
    generate_corpus_with(spec, Vocab::standard(), seed)
}

pub fn generate_corpus_with(spec: &CorpusSpec, vocab: Vocab, seed: u64) -> Result<Corpus> {
    spec.validate(&vocab)?;
    let mut openers: Vec<String> = ('a'..='z')
        .flat_map(|a| ('a'..='z').map(move |b| format!("{a}{b}")))
        .collect();
    let mut r = rng::stream(rng::derive_seed(seed, &[0xc0]));
    openers.shuffle(&mut r);
    let mut gen = Generator {
        spec,
        vocab: &vocab,
        rng: r,
        openers,
    };
    let mut samples = Vec::with_capacity(8 * spec.per_cell);
    let mut id = 0;
    for frequency in [Tier::Low, Tier::High] {
        for complexity in [Tier::Low, Tier::High] {
            for rare in [false, true] {
                for _ in 0..spec.per_cell {
                    samples.push(gen.sample(id, frequency, complexity, rare)?);
                    id += 1;
                }
            }
        }
    }
    let mut heldout = Vec::with_capacity(spec.heldout);
    for i in 0..spec.heldout {
        let complexity = if i % 2 == 0 { Tier::Low } else { Tier::High };
        let rare = i % 4 >= 2;
        let mut s = gen.sample(id, Tier::Low, complexity, rare)?;
        s.labels.replication_count = 0;
        heldout.push(s);
        id += 1;
    }
    let (forget, retain) = split_forget_retain(samples, spec.forget_fraction, rng::derive_seed(seed, &[0x5b]))?;
    Ok(Corpus {
        forget,
        retain,
        heldout,
        vocab,
        spec: spec.clone(),
        seed,
    })
}

/// Seeded split into ⌈fraction·N⌉ forget samples and the rest; each side keeps
/// the input order.
pub fn split_forget_retain(
    samples: Vec<TokenSequence>,
    forget_fraction: f64,
    seed: u64,
) -> Result<(Vec<TokenSequence>, Vec<TokenSequence>)> {
    if !(forget_fraction > 0.0 && forget_fraction < 1.0) {
        return Err(Error::invalid(format!("forget fraction {forget_fraction} outside (0, 1)")));
    }
    let n = samples.len();
    let n_forget = ((forget_fraction * n as f64) - 1e-9).ceil() as usize;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::stream(seed));
    let chosen: HashSet<usize> = idx.into_iter().take(n_forget).collect();
    let (mut forget, mut retain) = (Vec::with_capacity(n_forget), Vec::with_capacity(n - n_forget));
    for (i, s) in samples.into_iter().enumerate() {
        if chosen.contains(&i) {
            forget.push(s);
        } else {
            retain.push(s);
        }
    }
    Ok((forget, retain))
}

#[derive(Serialize, Deserialize)]
struct CorpusHeader {
    schema_version: u32,
    vocab: Vocab,
    spec: CorpusSpec,
    seed: u64,
}

#[derive(Serialize, Deserialize)]
struct CorpusLine {
    split: Split,
    #[serde(flatten)]
    sample: TokenSequence,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Split {
    Forget,
    Retain,
    Heldout,
}

/// JSON lines: a header record followed by one record per sample.
pub fn save_corpus(corpus: &Corpus, path: impl AsRef<Path>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    let header = CorpusHeader {
        schema_version: CORPUS_SCHEMA_VERSION,
        vocab: corpus.vocab.clone(),
        spec: corpus.spec.clone(),
        seed: corpus.seed,
    };
    serde_json::to_writer(&mut f, &header)?;
    f.write_all(b"\n")?;
    for (split, set) in [
        (Split::Forget, &corpus.forget),
        (Split::Retain, &corpus.retain),
        (Split::Heldout, &corpus.heldout),
    ] {
        for s in set {
            serde_json::to_writer(
                &mut f,
                &CorpusLine {
                    split,
                    sample: s.clone(),
                },
            )?;
            f.write_all(b"\n")?;
        }
    }
    f.flush()?;
    Ok(())
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus> {
    let r = BufReader::new(std::fs::File::open(path)?);
    let mut lines = r.lines().enumerate();
    let (_, first) = lines.next().ok_or_else(|| Error::Load("empty corpus file".into()))?;
    let header: CorpusHeader =
        serde_json::from_str(&first?).map_err(|e| Error::Load(format!("line 1: bad corpus header: {e}")))?;
    if header.schema_version != CORPUS_SCHEMA_VERSION {
        return Err(Error::Load(format!(
            "corpus schema version {} (expected {CORPUS_SCHEMA_VERSION})",
            header.schema_version
        )));
    }
    let mut corpus = Corpus {
        forget: vec![],
        retain: vec![],
        heldout: vec![],
        vocab: header.vocab,
        spec: header.spec,
        seed: header.seed,
    };
    let mut ids = HashSet::new();
    for (i, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: CorpusLine =
            serde_json::from_str(&line).map_err(|e| Error::Load(format!("line {}: {e}", i + 1)))?;
        if rec.sample.tokens.iter().any(|&t| t as usize >= corpus.vocab.size()) {
            return Err(Error::Load(format!("line {}: token id outside the vocabulary", i + 1)));
        }
        if !ids.insert(rec.sample.sample_id.clone()) {
            return Err(Error::Load(format!("line {}: duplicate sample id {}", i + 1, rec.sample.sample_id)));
        }
        match rec.split {
            Split::Forget => corpus.forget.push(rec.sample),
            Split::Retain => corpus.retain.push(rec.sample),
            Split::Heldout => corpus.heldout.push(rec.sample),
        }
    }
    Ok(corpus)
}

/// A forget prompt paired with the refusal the model should produce instead.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RejectionFixture {
    pub prompt: String,
    pub target: String,
}

/// Tokenized (prompt, target) pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RejectionPair {
    pub sample_id: String,
    pub prompt: Vec<TokenId>,
    pub target: Vec<TokenId>,
}

pub const DEFAULT_REFUSALS: &[&str] = &["no idea.", "not known.", "i do not know."];

/// Prompt = first `prompt_len` characters of each forget sample; refusal
/// targets are assigned round-robin.
pub fn default_rejection_fixtures(corpus: &Corpus, prompt_len: usize) -> Vec<RejectionFixture> {
    corpus
        .forget
        .iter()
        .enumerate()
        .map(|(i, s)| RejectionFixture {
            prompt: s.text.chars().take(prompt_len).collect(),
            target: DEFAULT_REFUSALS[i % DEFAULT_REFUSALS.len()].to_string(),
        })
        .collect()
}

pub fn save_rejection_fixtures(fixtures: &[RejectionFixture], path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(fixtures)?)?;
    Ok(())
}

pub fn load_rejection_fixtures(path: impl AsRef<Path>) -> Result<Vec<RejectionFixture>> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Load(format!("bad rejection fixtures: {e}")))
}

/// Match fixtures to forget samples by prompt prefix and tokenize them.
pub fn rejection_pairs(corpus: &Corpus, fixtures: &[RejectionFixture]) -> Result<Vec<RejectionPair>> {
    let by_prompt: HashMap<&str, &RejectionFixture> = fixtures.iter().map(|f| (f.prompt.as_str(), f)).collect();
    corpus
        .forget
        .iter()
        .map(|s| {
            let fx = by_prompt
                .iter()
                .find(|(p, _)| s.text.starts_with(**p))
                .map(|(_, f)| *f)
                .ok_or_else(|| Error::invalid(format!("no rejection target for forget sample {}", s.sample_id)))?;
            Ok(RejectionPair {
                sample_id: s.sample_id.clone(),
                prompt: corpus.vocab.tokenize(&fx.prompt)?,
                target: corpus.vocab.tokenize(&fx.target)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> CorpusSpec {
        CorpusSpec {
            per_cell: 5,
            heldout: 4,
            ..CorpusSpec::default()
        }
    }

    #[test]
    fn tokenize_round_trip() {
        let v = Vocab::standard();
        let s = "bako de, mi#u.";
        let t = v.tokenize(s).unwrap();
        assert_eq!(t.len(), s.chars().count());
        assert_eq!(v.detokenize(&t).unwrap(), s);
        assert!(v.tokenize("").unwrap().is_empty());
        assert!(t.iter().all(|&id| id >= 2));
    }

    #[test]
    fn tokenize_lists_bad_characters() {
        match Vocab::standard().tokenize("abQc!") {
            Err(Error::InvalidArgument(m)) => assert!(m.contains('Q') && m.contains('!'), "{m}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn detokenize_handles_framing() {
        let v = Vocab::standard();
        let mut t = vec![BOS];
        t.extend(v.tokenize("ab").unwrap());
        t.push(EOS);
        t.extend(v.tokenize("zz").unwrap());
        assert_eq!(v.detokenize(&t).unwrap(), "ab");
    }

    #[test]
    fn replication_in_training_stream() {
        let c = generate_corpus(&small_spec(), 1).unwrap();
        let stream = c.training_stream();
        for s in c.training_samples() {
            let count = stream.iter().filter(|x| **x == s.tokens.as_slice()).count();
            let expected = if s.labels.frequency_tier == Tier::High { c.spec.high_replication } else { 1 };
            assert_eq!(count, expected, "{}", s.text);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_corpus(&small_spec(), 7).unwrap();
        let b = generate_corpus(&small_spec(), 7).unwrap();
        assert_eq!(a, b);
        let c = generate_corpus(&small_spec(), 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn complexity_tiers_differ_in_length() {
        let c = generate_corpus(&CorpusSpec::default(), 3).unwrap();
        let mean = |t: Tier| {
            let v: Vec<usize> = c
                .all_samples()
                .filter(|s| s.labels.complexity_tier == t)
                .map(|s| s.len())
                .collect();
            v.iter().sum::<usize>() as f64 / v.len() as f64
        };
        assert!(mean(Tier::High) >= 2.0 * mean(Tier::Low), "{} vs {}", mean(Tier::High), mean(Tier::Low));
    }

    #[test]
    fn rare_tier_has_three_rare_tokens() {
        let c = generate_corpus(&small_spec(), 5).unwrap();
        for s in c.training_samples() {
            let n = s.tokens.iter().filter(|&&t| c.vocab.is_rare(t)).count();
            if s.labels.rare_token {
                assert!(n >= 3, "{}", s.text);
            } else {
                assert_eq!(n, 0);
            }
        }
    }

    #[test]
    fn openers_are_unique() {
        let c = generate_corpus(&CorpusSpec::default(), 11).unwrap();
        let mut seen = HashSet::new();
        for s in c.all_samples() {
            assert!(seen.insert(s.tokens[..2].to_vec()), "{}", s.text);
        }
    }

    #[test]
    fn inconsistent_spec_is_rejected() {
        let spec = CorpusSpec {
            rare_chars: vec!['a'],
            ..small_spec()
        };
        assert!(matches!(generate_corpus(&spec, 1), Err(Error::InvalidArgument(_))));
        let spec = CorpusSpec {
            per_cell: 0,
            ..small_spec()
        };
        assert!(generate_corpus(&spec, 1).is_err());
    }

    #[test]
    fn split_sizes_and_disjointness() {
        let c = generate_corpus(&CorpusSpec { per_cell: 25, heldout: 0, ..CorpusSpec::default() }, 2).unwrap();
        let all: Vec<TokenSequence> = c.training_samples().cloned().collect();
        assert_eq!(all.len(), 200);
        let (f, r) = split_forget_retain(all.clone(), 0.1, 9).unwrap();
        assert_eq!((f.len(), r.len()), (20, 180));
        let fid: HashSet<_> = f.iter().map(|s| &s.sample_id).collect();
        assert!(r.iter().all(|s| !fid.contains(&s.sample_id)));
        let mut union: Vec<_> = f.iter().chain(&r).map(|s| s.sample_id.clone()).collect();
        union.sort();
        let mut ids: Vec<_> = all.iter().map(|s| s.sample_id.clone()).collect();
        ids.sort();
        assert_eq!(union, ids);
        let (f2, _) = split_forget_retain(all.clone(), 0.1, 9).unwrap();
        assert_eq!(f, f2);
        assert!(split_forget_retain(all.clone(), 1.0, 9).is_err());
        assert!(split_forget_retain(all, 0.0, 9).is_err());
    }

    #[test]
    fn corpus_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.jsonl");
        let mut c = generate_corpus(&small_spec(), 4).unwrap();
        c.retain[0].labels.initial_probability_tier = Some(Tier::High);
        save_corpus(&c, &p).unwrap();
        assert_eq!(load_corpus(&p).unwrap(), c);
    }

    #[test]
    fn corrupt_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.jsonl");
        save_corpus(&generate_corpus(&small_spec(), 4).unwrap(), &p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        lines[3] = "{not json".into();
        std::fs::write(&p, lines.join("\n")).unwrap();
        match load_corpus(&p) {
            Err(Error::Load(m)) => assert!(m.starts_with("line 4"), "{m}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn schema_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.jsonl");
        save_corpus(&generate_corpus(&small_spec(), 4).unwrap(), &p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap().replacen("\"schema_version\":1", "\"schema_version\":2", 1);
        std::fs::write(&p, text).unwrap();
        assert!(matches!(load_corpus(&p), Err(Error::Load(m)) if m.contains("schema")));
    }

    #[test]
    fn rejection_fixtures_are_loaded_verbatim() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("fx.json");
        let c = generate_corpus(&small_spec(), 4).unwrap();
        let fx = default_rejection_fixtures(&c, 4);
        save_rejection_fixtures(&fx, &p).unwrap();
        let loaded = load_rejection_fixtures(&p).unwrap();
        assert_eq!(loaded, fx);
        let pairs = rejection_pairs(&c, &loaded).unwrap();
        assert_eq!(pairs.len(), c.forget.len());
        assert_eq!(c.vocab.detokenize(&pairs[0].target).unwrap(), fx[0].target);
    }
}
