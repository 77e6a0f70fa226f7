//! Memorization, extraction and membership metrics.
//!
//! All metrics are pure functions of (model, data). Per-sample work is spread
//! with [`crate::exec`] and averaged in sample order.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::corpus::{TokenId, TokenSequence, BOS, EOS};
use crate::error::{Error, Result};
use crate::exec::{self, ExecMode};
use crate::lm::infer::Decoder;
use crate::lm::{argmax, infer, token_log_probs, LanguageModel};

/// Fraction of positions t = 1..T−1 where the argmax prediction after x_≤t
/// equals x_{t+1}.
pub fn memorization_accuracy(model: &LanguageModel, x: &[TokenId]) -> Result<f64> {
    let hits = argmax_hits(model, x)?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64)
}

fn argmax_hits(model: &LanguageModel, x: &[TokenId]) -> Result<Vec<bool>> {
    if x.len() < 2 {
        return Err(Error::invalid("memorization accuracy needs at least 2 tokens"));
    }
    token_log_probs(model, x)?;
    let rows = infer::prefix_logits(model, x);
    Ok(rows
        .iter()
        .zip(&x[1..])
        .map(|(logits, &next)| argmax(logits) as TokenId == next)
        .collect())
}

fn ngrams(x: &[TokenId], n: usize) -> impl Iterator<Item = &[TokenId]> {
    x.windows(n)
}

/// Fraction of the n-grams of `a` (as a list) that occur among the n-grams of `b`.
pub fn ngram_overlap(a: &[TokenId], b: &[TokenId], n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::invalid("n-gram size must be at least 1"));
    }
    if a.len() < n {
        return Err(Error::invalid(format!("sequence of length {} has no {n}-grams", a.len())));
    }
    let set: HashSet<&[TokenId]> = ngrams(b, n).collect();
    let total = a.len() - n + 1;
    let hits = ngrams(a, n).filter(|g| set.contains(g)).count();
    Ok(hits as f64 / total as f64)
}

/// Greedy continuation from the decoder's current state, at most `max_new`
/// tokens, without the terminating EOS.
fn continue_greedy(mut dec: Decoder<'_, f64>, mut logits: Vec<f64>, max_new: usize, context: usize) -> Vec<TokenId> {
    let mut out = Vec::with_capacity(max_new);
    while out.len() < max_new {
        let next = argmax(&logits) as TokenId;
        if next == EOS {
            break;
        }
        out.push(next);
        if out.len() == max_new || dec.position() >= context {
            break;
        }
        logits = dec.push(next);
    }
    out
}

/// Mean over t = 1..T−n of OVERLAP_n(greedy continuation of x_<t, x_≥t). The
/// continuation from x_<t has at most |x_≥t| tokens; a continuation shorter
/// than n scores 0.
pub fn extraction_likelihood(model: &LanguageModel, x: &[TokenId], n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::invalid("n-gram size must be at least 1"));
    }
    if x.len() <= n {
        return Err(Error::invalid(format!(
            "extraction likelihood needs more than {n} tokens, got {}",
            x.len()
        )));
    }
    token_log_probs(model, x)?;
    let context = model.config().context_length;
    let mut dec = Decoder::new(model, model.params().values());
    let mut logits = dec.push(BOS);
    let steps = x.len() - n;
    let mut sum = 0.0;
    for t in 0..steps {
        // the decoder has consumed BOS and x[..t]
        let suffix = &x[t..];
        let gen = continue_greedy(dec.clone(), logits.clone(), suffix.len(), context);
        if gen.len() >= n {
            sum += ngram_overlap(&gen, suffix, n)?;
        }
        logits = dec.push(x[t]);
    }
    Ok(sum / steps as f64)
}

fn lcs_len(a: &[TokenId], b: &[TokenId]) -> usize {
    let mut row = vec![0usize; b.len() + 1];
    for &x in a {
        let mut diag = 0;
        for (j, &y) in b.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = if x == y { diag + 1 } else { up.max(row[j]) };
            diag = up;
        }
    }
    row[b.len()]
}

/// LCS(reference, hypothesis) / |reference|.
pub fn rouge_l_recall(reference: &[TokenId], hypothesis: &[TokenId]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::invalid("Rouge-L recall needs a non-empty reference"));
    }
    Ok(lcs_len(reference, hypothesis) as f64 / reference.len() as f64)
}

/// Greedy continuation of `prompt`, at most `max_new` tokens, EOS excluded.
pub fn generate(model: &LanguageModel, prompt: &[TokenId], max_new: usize) -> Result<Vec<TokenId>> {
    if prompt.len() >= model.config().context_length {
        return Err(Error::invalid("prompt fills the context window"));
    }
    if let Some(&bad) = prompt.iter().find(|&&t| t as usize >= model.config().vocab_size) {
        return Err(Error::invalid(format!("token id {bad} outside the vocabulary")));
    }
    let mut dec = Decoder::new(model, model.params().values());
    let mut logits = dec.push(BOS);
    for &t in prompt {
        logits = dec.push(t);
    }
    Ok(continue_greedy(dec, logits, max_new, model.config().context_length))
}

/// A prompt and the answer an un-unlearned model would give.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QaPair {
    pub prompt: Vec<TokenId>,
    pub answer: Vec<TokenId>,
}

impl QaPair {
    /// Split a sample after its first `prompt_len` tokens.
    pub fn from_sample(x: &[TokenId], prompt_len: usize) -> Result<Self> {
        if prompt_len == 0 || prompt_len >= x.len() {
            return Err(Error::invalid(format!(
                "prompt length {prompt_len} for a sequence of length {}",
                x.len()
            )));
        }
        Ok(QaPair {
            prompt: x[..prompt_len].to_vec(),
            answer: x[prompt_len..].to_vec(),
        })
    }
}

/// 1 − fraction of prompts whose greedy continuation equals the answer exactly.
pub fn unlearning_accuracy(model: &LanguageModel, pairs: &[QaPair], mode: ExecMode) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::invalid("unlearning accuracy needs at least one pair"));
    }
    let hits = exec::try_map_indexed(mode, pairs.len(), |i| {
        let p = &pairs[i];
        generate(model, &p.prompt, p.answer.len()).map(|g| g == p.answer)
    })?;
    let fa = hits.iter().filter(|&&h| h).count() as f64 / pairs.len() as f64;
    Ok(1.0 - fa)
}

/// Mean of the lowest ⌈k·n⌉ scored log-probabilities.
pub fn min_k_score(log_probs: &[f64], k_fraction: f64) -> Result<f64> {
    if !(k_fraction > 0.0 && k_fraction <= 1.0) {
        return Err(Error::invalid(format!("k fraction {k_fraction} outside (0, 1]")));
    }
    if log_probs.is_empty() {
        return Err(Error::invalid("no scored positions"));
    }
    let mut v = log_probs.to_vec();
    v.sort_by(f64::total_cmp);
    let k = ((k_fraction * v.len() as f64).ceil() as usize).clamp(1, v.len());
    Ok(v[..k].iter().sum::<f64>() / k as f64)
}

/// Probability that a random `above` score exceeds a random `below` score,
/// counting ties as one half.
pub fn auc(above: &[f64], below: &[f64]) -> Result<f64> {
    if above.is_empty() || below.is_empty() {
        return Err(Error::invalid("AUC needs both classes"));
    }
    let mut all: Vec<(f64, bool)> = above
        .iter()
        .map(|&s| (s, true))
        .chain(below.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    // midranks, 1-based
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * all[i..=j].iter().filter(|e| e.1).count() as f64;
        i = j + 1;
    }
    let (na, nb) = (above.len() as f64, below.len() as f64);
    Ok((rank_sum - na * (na + 1.0) / 2.0) / (na * nb))
}

/// Min-k% Prob membership inference: AUC of non-members scoring above members.
/// 0.5 means members are indistinguishable from non-members; values near 0
/// mean members are confidently detected.
pub fn min_k_prob_mia(
    model: &LanguageModel,
    members: &[&[TokenId]],
    nonmembers: &[&[TokenId]],
    k_fraction: f64,
    mode: ExecMode,
) -> Result<f64> {
    if members.is_empty() || nonmembers.is_empty() {
        return Err(Error::invalid("membership inference needs members and non-members"));
    }
    let score = |xs: &[&[TokenId]]| {
        exec::try_map_indexed(mode, xs.len(), |i| min_k_score(&token_log_probs(model, xs[i])?.per_token, k_fraction))
    };
    auc(&score(nonmembers)?, &score(members)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricsConfig {
    /// n-gram size of EL.
    pub n_gram: usize,
    /// Tokens of each sample used as the prompt for Rouge-L and UA.
    pub prompt_len: usize,
    pub k_fraction: f64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig {
            n_gram: 1,
            prompt_len: 2,
            k_fraction: 0.2,
        }
    }
}

/// Per-sample scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub sample_id: String,
    pub ma: f64,
    pub el: f64,
    pub rouge_l_recall: f64,
    pub exact_match: bool,
}

pub fn sample_metrics(model: &LanguageModel, x: &TokenSequence, cfg: &MetricsConfig) -> Result<SampleMetrics> {
    let run = || -> Result<SampleMetrics> {
        let qa = QaPair::from_sample(&x.tokens, cfg.prompt_len)?;
        let gen = generate(model, &qa.prompt, qa.answer.len())?;
        Ok(SampleMetrics {
            sample_id: x.sample_id.clone(),
            ma: memorization_accuracy(model, &x.tokens)?,
            el: extraction_likelihood(model, &x.tokens, cfg.n_gram)?,
            rouge_l_recall: rouge_l_recall(&qa.answer, &gen)?,
            exact_match: gen == qa.answer,
        })
    };
    run().map_err(|e| e.for_sample(&x.sample_id))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub count: usize,
    pub ma: f64,
    pub el: f64,
    pub rouge_l_recall: f64,
    /// 1 − exact-match rate of prompt continuations.
    pub ua: f64,
}

impl SplitMetrics {
    pub fn from_samples(samples: &[SampleMetrics]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::invalid("empty split"));
        }
        let n = samples.len() as f64;
        let mean = |f: &dyn Fn(&SampleMetrics) -> f64| samples.iter().map(f).sum::<f64>() / n;
        Ok(SplitMetrics {
            count: samples.len(),
            ma: mean(&|s| s.ma),
            el: mean(&|s| s.el),
            rouge_l_recall: mean(&|s| s.rouge_l_recall),
            ua: 1.0 - mean(&|s| if s.exact_match { 1.0 } else { 0.0 }),
        })
    }
}

pub fn split_metrics(
    model: &LanguageModel,
    samples: &[TokenSequence],
    cfg: &MetricsConfig,
    mode: ExecMode,
) -> Result<(SplitMetrics, Vec<SampleMetrics>)> {
    let per = exec::try_map_indexed(mode, samples.len(), |i| sample_metrics(model, &samples[i], cfg))?;
    Ok((SplitMetrics::from_samples(&per)?, per))
}

/// Scores for the forget, retain and held-out splits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub forget: Option<SplitMetrics>,
    pub retain: Option<SplitMetrics>,
    pub heldout: Option<SplitMetrics>,
    /// Min-k% Prob AUC, forget set as members against held-out non-members.
    pub mia_auc: Option<f64>,
}

impl MetricsReport {
    /// Unlearning-completeness components: UA, MIA AUC and 1 − Rouge-L recall
    /// on the forget split, plus their unweighted mean.
    pub fn completeness(&self) -> Option<(f64, f64, f64, f64)> {
        let f = self.forget.as_ref()?;
        let mia = self.mia_auc?;
        let rr = 1.0 - f.rouge_l_recall;
        Some((f.ua, mia, rr, (f.ua + mia + rr) / 3.0))
    }

    /// (split, metric, value) rows for CSV output.
    pub fn rows(&self) -> Vec<(String, String, f64)> {
        let mut out = Vec::new();
        for (name, split) in [("forget", &self.forget), ("retain", &self.retain), ("heldout", &self.heldout)] {
            if let Some(s) = split {
                for (metric, v) in [
                    ("count", s.count as f64),
                    ("ma", s.ma),
                    ("el", s.el),
                    ("rouge_l_recall", s.rouge_l_recall),
                    ("ua", s.ua),
                ] {
                    out.push((name.to_string(), metric.to_string(), v));
                }
            }
        }
        if let Some(m) = self.mia_auc {
            out.push(("forget".into(), "mia_auc".into(), m));
        }
        if let Some((_, _, rr, avg)) = self.completeness() {
            out.push(("forget".into(), "rr".into(), rr));
            out.push(("forget".into(), "uc_mean".into(), avg));
        }
        out
    }
}

/// Retain and held-out utility.
pub fn utility_report(
    model: &LanguageModel,
    retain: &[TokenSequence],
    heldout: &[TokenSequence],
    cfg: &MetricsConfig,
    mode: ExecMode,
) -> Result<MetricsReport> {
    Ok(MetricsReport {
        forget: None,
        retain: Some(split_metrics(model, retain, cfg, mode)?.0),
        heldout: Some(split_metrics(model, heldout, cfg, mode)?.0),
        mia_auc: None,
    })
}

/// Full report over all three splits, with forget-vs-held-out membership inference.
pub fn full_report(
    model: &LanguageModel,
    forget: &[TokenSequence],
    retain: &[TokenSequence],
    heldout: &[TokenSequence],
    cfg: &MetricsConfig,
    mode: ExecMode,
) -> Result<MetricsReport> {
    let mut report = utility_report(model, retain, heldout, cfg, mode)?;
    report.forget = Some(split_metrics(model, forget, cfg, mode)?.0);
    let members: Vec<&[TokenId]> = forget.iter().map(|s| s.tokens.as_slice()).collect();
    let non: Vec<&[TokenId]> = heldout.iter().map(|s| s.tokens.as_slice()).collect();
    report.mia_auc = Some(min_k_prob_mia(model, &members, &non, cfg.k_fraction, mode)?);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::LmConfig;

    fn cfg(v: usize) -> LmConfig {
        LmConfig {
            vocab_size: v,
            context_length: 16,
            embed_dim: 8,
            num_layers: 1,
            num_heads: 2,
            seed: 1,
        }
    }

    /// Model whose logits are a fixed bias toward one token at every position.
    fn constant_model(v: usize, favourite: TokenId) -> LanguageModel {
        let mut m = LanguageModel::zeros(cfg(v)).unwrap();
        let layout = m.params().layout().clone();
        let tok = layout.segment("tok_emb").unwrap().offset;
        let gain = layout.segment("lnf.gain").unwrap().offset;
        let bias = layout.segment("lnf.bias").unwrap().offset;
        let d = 8;
        let mut values = m.params().values().to_vec();
        values[gain..gain + d].fill(1.0);
        values[bias] = 1.0;
        values[tok + favourite as usize * d] = 5.0;
        m.set_params(values).unwrap();
        m
    }

    #[test]
    fn overlap_examples() {
        let (a, b) = ([2, 3, 2, 3], [2, 3]);
        assert!((ngram_overlap(&a, &b, 2).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(ngram_overlap(&a, &a, 2).unwrap(), 1.0);
        assert_eq!(ngram_overlap(&a, &[7, 8, 9], 1).unwrap(), 0.0);
        assert!(ngram_overlap(&[2], &b, 2).is_err());
    }

    #[test]
    fn rouge_examples() {
        let r = [2, 3, 4, 5, 6];
        assert!((rouge_l_recall(&r, &[2, 4, 6]).unwrap() - 0.6).abs() < 1e-15);
        assert_eq!(rouge_l_recall(&r, &r).unwrap(), 1.0);
        assert_eq!(rouge_l_recall(&r, &[9, 9]).unwrap(), 0.0);
        assert!(rouge_l_recall(&[], &r).is_err());
    }

    #[test]
    fn auc_degenerate_cases() {
        assert_eq!(auc(&[1.0, 1.0], &[1.0, 1.0, 1.0]).unwrap(), 0.5);
        assert_eq!(auc(&[3.0, 4.0], &[1.0, 2.0]).unwrap(), 1.0);
        assert_eq!(auc(&[1.0, 2.0], &[3.0, 4.0]).unwrap(), 0.0);
        assert!(auc(&[], &[1.0]).is_err());
    }

    #[test]
    fn min_k_score_takes_lowest() {
        let lp = [-0.1, -3.0, -0.2, -1.0, -0.5];
        assert_eq!(min_k_score(&lp, 0.2).unwrap(), -3.0);
        assert_eq!(min_k_score(&lp, 0.4).unwrap(), -2.0);
        assert!((min_k_score(&lp, 1.0).unwrap() + 0.96).abs() < 1e-12);
        assert!(min_k_score(&lp, 0.0).is_err());
    }

    #[test]
    fn constant_model_memorizes_runs_of_its_token() {
        let m = constant_model(10, 4);
        let run = [4, 4, 4, 4, 4, 4];
        assert_eq!(memorization_accuracy(&m, &run).unwrap(), 1.0);
        assert_eq!(extraction_likelihood(&m, &run, 1).unwrap(), 1.0);
        assert_eq!(memorization_accuracy(&m, &[4, 5, 6]).unwrap(), 0.0);
        assert_eq!(memorization_accuracy(&m, &[7, 4]).unwrap(), 1.0);
    }

    #[test]
    fn eos_model_extracts_nothing() {
        let m = constant_model(10, EOS);
        assert_eq!(extraction_likelihood(&m, &[3, 4, 5, 6], 1).unwrap(), 0.0);
        assert!(generate(&m, &[3], 5).unwrap().is_empty());
    }

    #[test]
    fn el_rejects_short_sequences() {
        let m = constant_model(10, 4);
        assert!(extraction_likelihood(&m, &[4, 4], 2).is_err());
    }

    #[test]
    fn ua_counts_exact_matches() {
        let m = constant_model(10, 4);
        let pairs = vec![
            QaPair { prompt: vec![2], answer: vec![4, 4] },
            QaPair { prompt: vec![3], answer: vec![4] },
            QaPair { prompt: vec![5], answer: vec![4, 4, 4] },
            QaPair { prompt: vec![6], answer: vec![4, 5] },
        ];
        assert_eq!(unlearning_accuracy(&m, &pairs, ExecMode::Sequential).unwrap(), 0.25);
        assert_eq!(unlearning_accuracy(&m, &pairs[..1], ExecMode::Sequential).unwrap(), 0.0);
        assert_eq!(unlearning_accuracy(&m, &pairs[3..], ExecMode::Sequential).unwrap(), 1.0);
    }

    #[test]
    fn report_round_trips() {
        let r = MetricsReport {
            forget: Some(SplitMetrics { count: 2, ma: 0.5, el: 0.25, rouge_l_recall: 0.125, ua: 1.0 }),
            retain: None,
            heldout: None,
            mia_auc: Some(0.75),
        };
        let s = serde_json::to_string(&r).unwrap();
        assert_eq!(serde_json::from_str::<MetricsReport>(&s).unwrap(), r);
        assert_eq!(r.completeness().unwrap().3, (1.0 + 0.75 + 0.875) / 3.0);
    }
}
