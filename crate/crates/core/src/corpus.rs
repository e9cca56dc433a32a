//! Transfer corpora, smoothed language sampling and MLM masking.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::vocab::{TeacherId, Vocabulary};

#[derive(Debug, Clone)]
pub struct LanguageCorpus {
    pub language: String,
    pub lines: Vec<String>,
    /// Whitespace-separated words across all lines, counted before any subword split.
    pub token_count: u64,
}

impl LanguageCorpus {
    pub fn from_lines(language: impl Into<String>, lines: Vec<String>) -> Self {
        let token_count = lines.iter().map(|l| l.split_whitespace().count() as u64).sum();
        Self {
            language: language.into(),
            lines,
            token_count,
        }
    }

    /// One example per line; blank lines are skipped.
    pub fn load(language: impl Into<String>, path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let lines = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(str::to_string)
            .collect();
        Ok(Self::from_lines(language, lines))
    }
}

/// One tokenized, masked copy of a raw example under one teacher's vocabulary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedExample {
    pub language: String,
    pub teacher_id: TeacherId,
    /// Token ids after corruption: masked positions hold `[MASK]`, a random token,
    /// or the original token.
    pub input_ids: Vec<u32>,
    /// Strictly increasing.
    pub masked_positions: Vec<usize>,
    /// Original ids at `masked_positions`.
    pub gold_ids: Vec<u32>,
}

impl MaskedExample {
    pub fn n_masked(&self) -> usize {
        self.masked_positions.len()
    }

    pub fn validate(&self, mask_id: u32) -> Result<()> {
        if self.masked_positions.is_empty() {
            return Err(Error::invalid("example has no masked positions"));
        }
        if self.gold_ids.len() != self.masked_positions.len() {
            return Err(Error::invalid("gold ids and masked positions differ in length"));
        }
        if !self.masked_positions.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::invalid("masked positions not strictly increasing"));
        }
        if self.masked_positions.last().is_some_and(|&p| p >= self.input_ids.len()) {
            return Err(Error::invalid("masked position beyond input length"));
        }
        if self.gold_ids.contains(&mask_id) {
            return Err(Error::invalid("gold id is the [MASK] token"));
        }
        Ok(())
    }

    /// Write gold ids back over the masked positions.
    pub fn restore(&self) -> Vec<u32> {
        let mut ids = self.input_ids.clone();
        for (&p, &g) in self.masked_positions.iter().zip(&self.gold_ids) {
            ids[p] = g;
        }
        ids
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingConfig {
    pub alpha: f64,
    pub seed: u64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self { alpha: 0.7, seed: 0 }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::invalid(format!("alpha must be in (0, 1], got {}", self.alpha)));
        }
        Ok(())
    }
}

/// Exponentially smoothed language probabilities `q_k ∝ p_k^alpha`, where `p_k`
/// is language k's share of all tokens.
pub fn compute_sampling_weights(corpora: &[LanguageCorpus], cfg: &SamplingConfig) -> Result<Vec<f64>> {
    let counts: Vec<u64> = corpora.iter().map(|c| c.token_count).collect();
    smoothed_weights(&counts, cfg.alpha)
}

pub fn smoothed_weights(token_counts: &[u64], alpha: f64) -> Result<Vec<f64>> {
    SamplingConfig { alpha, seed: 0 }.validate()?;
    if token_counts.is_empty() {
        return Err(Error::invalid("no corpora to sample from"));
    }
    let total: u64 = token_counts.iter().sum();
    if total == 0 {
        return Err(Error::invalid("corpora contain zero tokens"));
    }
    let scaled: Vec<f64> = token_counts
        .iter()
        .map(|&c| (c as f64 / total as f64).powf(alpha))
        .collect();
    let z: f64 = scaled.iter().sum();
    Ok(scaled.into_iter().map(|s| s / z).collect())
}

/// Categorical sampler over language indices.
#[derive(Debug, Clone)]
pub struct LanguageSampler {
    cumulative: Vec<f64>,
}

impl LanguageSampler {
    pub fn new(weights: &[f64]) -> Result<Self> {
        if weights.is_empty() || weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::invalid("sampling weights must be finite and nonnegative"));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("sampling weights sum to {sum}, not 1")));
        }
        let mut acc = 0.0;
        let cumulative = weights
            .iter()
            .map(|w| {
                acc += w;
                acc
            })
            .collect();
        Ok(Self { cumulative })
    }

    pub fn len(&self) -> usize {
        self.cumulative.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cumulative.is_empty()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.gen();
        let mut prev = 0.0;
        let mut last_positive = 0;
        for (i, &c) in self.cumulative.iter().enumerate() {
            if c > prev {
                if u < c {
                    return i;
                }
                last_positive = i;
            }
            prev = c;
        }
        // u landed in the rounding gap above the final cumulative sum
        last_positive
    }

    /// The `draw_index`-th draw of the stream keyed by `seed`, independent of any
    /// other draws.
    pub fn sample_at(&self, seed: u64, draw_index: u64) -> usize {
        self.sample(&mut rng::stream(seed, &[draw_index]))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskingConfig {
    pub rate: f64,
    pub mask_prob: f64,
    pub random_prob: f64,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        Self {
            rate: 0.15,
            mask_prob: 0.8,
            random_prob: 0.1,
        }
    }
}

impl MaskingConfig {
    pub fn validate(&self) -> Result<()> {
        let probs_ok = [self.mask_prob, self.random_prob]
            .iter()
            .all(|p| (0.0..=1.0).contains(p))
            && self.mask_prob + self.random_prob <= 1.0;
        if !(self.rate > 0.0 && self.rate < 1.0) || !probs_ok {
            return Err(Error::invalid(
                "masking rate must be in (0, 1) and corruption probabilities must form a distribution",
            ));
        }
        Ok(())
    }
}

pub fn masked_count(len: usize, rate: f64) -> usize {
    ((rate * len as f64).floor() as usize).clamp(1, len)
}

/// Select `max(1, floor(rate * len))` positions by seeded shuffle and corrupt them
/// 80/10/10 into `[MASK]` / a random non-special token / the original token.
pub fn mask_example<R: Rng + ?Sized>(
    ids: &[u32],
    vocab: &Vocabulary,
    cfg: &MaskingConfig,
    rng: &mut R,
    language: &str,
    teacher_id: TeacherId,
) -> Result<MaskedExample> {
    if ids.is_empty() {
        return Err(Error::invalid("cannot mask an empty sequence"));
    }
    cfg.validate()?;
    let special = vocab.special();
    if ids.contains(&special.mask) {
        return Err(Error::invalid("input already contains [MASK]"));
    }
    if let Some(&bad) = ids.iter().find(|&&i| i as usize >= vocab.len()) {
        return Err(Error::IdOutOfRange {
            id: bad,
            size: vocab.len(),
        });
    }

    let n = masked_count(ids.len(), cfg.rate);
    let mut order: Vec<usize> = (0..ids.len()).collect();
    let (chosen, _) = order.partial_shuffle(rng, n);
    let mut positions = chosen.to_vec();
    positions.sort_unstable();

    let mut specials = [special.pad, special.unk, special.cls, special.sep, special.mask];
    specials.sort_unstable();
    let n_regular = vocab.len() - specials.len();

    let mut input_ids = ids.to_vec();
    let mut gold_ids = Vec::with_capacity(n);
    for &p in &positions {
        gold_ids.push(ids[p]);
        let r: f64 = rng.gen();
        if r < cfg.mask_prob {
            input_ids[p] = special.mask;
        } else if r < cfg.mask_prob + cfg.random_prob && n_regular > 0 {
            input_ids[p] = nth_regular_id(rng.gen_range(0..n_regular as u32), &specials);
        }
    }
    Ok(MaskedExample {
        language: language.to_string(),
        teacher_id,
        input_ids,
        masked_positions: positions,
        gold_ids,
    })
}

/// Map a rank among non-special ids to the id itself, skipping the sorted specials.
fn nth_regular_id(mut rank: u32, sorted_specials: &[u32]) -> u32 {
    for &s in sorted_specials {
        if rank >= s {
            rank += 1;
        }
    }
    rank
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::SPECIAL_TOKENS;
    use proptest::prelude::*;
    use rand::Rng;

    fn vocab(n: usize) -> Vocabulary {
        let words: Vec<String> = (0..n).map(|i| format!("w{i}")).collect();
        Vocabulary::from_tokens(SPECIAL_TOKENS.iter().map(|s| s.to_string()).chain(words), "##").unwrap()
    }

    #[test]
    fn smoothing_matches_hand_values() {
        let w = smoothed_weights(&[80, 20], 0.7).unwrap();
        // 0.8^0.7 = 0.855546, 0.2^0.7 = 0.324131
        assert!((w[0] - 0.7252).abs() < 1e-3 && (w[1] - 0.2748).abs() < 1e-3);
        let exact = smoothed_weights(&[3, 5, 2], 1.0).unwrap();
        assert_eq!(exact, vec![0.3, 0.5, 0.2]);
        assert_eq!(smoothed_weights(&[42], 0.3).unwrap(), vec![1.0]);
    }

    #[test]
    fn smoothing_errors() {
        assert!(smoothed_weights(&[], 0.7).is_err());
        assert!(smoothed_weights(&[0, 0], 0.7).is_err());
        assert!(smoothed_weights(&[1, 2], 0.0).is_err());
        assert!(smoothed_weights(&[1, 2], 1.5).is_err());
    }

    #[test]
    fn token_count_is_whitespace_words() {
        let c = LanguageCorpus::from_lines("en", vec!["a b  c".into(), " d ".into()]);
        assert_eq!(c.token_count, 4);
        let w = compute_sampling_weights(&[c], &SamplingConfig::default()).unwrap();
        assert_eq!(w, vec![1.0]);
    }

    #[test]
    fn sampler_degenerate_and_balanced() {
        let one = LanguageSampler::new(&[1.0]).unwrap();
        assert!((0..100).all(|i| one.sample_at(3, i) == 0));
        let skewed = LanguageSampler::new(&[1.0, 0.0]).unwrap();
        assert!((0..1000).all(|i| skewed.sample_at(3, i) == 0));
        let zero_first = LanguageSampler::new(&[0.0, 1.0]).unwrap();
        assert!((0..1000).all(|i| zero_first.sample_at(3, i) == 1));

        let half = LanguageSampler::new(&[0.5, 0.5]).unwrap();
        let ones = (0..10_000).filter(|&i| half.sample_at(11, i) == 1).count();
        assert!((ones as f64 / 10_000.0 - 0.5).abs() < 0.02);
        assert_eq!(half.sample_at(11, 77), half.sample_at(11, 77));
    }

    #[test]
    fn sampler_rejects_bad_weights() {
        assert!(LanguageSampler::new(&[]).is_err());
        assert!(LanguageSampler::new(&[0.5, 0.6]).is_err());
        assert!(LanguageSampler::new(&[1.5, -0.5]).is_err());
    }

    #[test]
    fn mask_counts() {
        let v = vocab(200);
        let cfg = MaskingConfig::default();
        let mut r = rng::stream(1, &[]);
        let ids: Vec<u32> = (5..15).collect();
        assert_eq!(
            mask_example(&ids, &v, &cfg, &mut r, "en", TeacherId(0))
                .unwrap()
                .n_masked(),
            1
        );
        let ids: Vec<u32> = (5..105).collect();
        assert_eq!(
            mask_example(&ids, &v, &cfg, &mut r, "en", TeacherId(0))
                .unwrap()
                .n_masked(),
            15
        );
        assert_eq!(
            mask_example(&[7], &v, &cfg, &mut r, "en", TeacherId(0))
                .unwrap()
                .n_masked(),
            1
        );
    }

    #[test]
    fn mask_is_seed_deterministic() {
        let v = vocab(50);
        let ids: Vec<u32> = (5..45).collect();
        let cfg = MaskingConfig::default();
        let a = mask_example(&ids, &v, &cfg, &mut rng::stream(9, &[1]), "en", TeacherId(2)).unwrap();
        let b = mask_example(&ids, &v, &cfg, &mut rng::stream(9, &[1]), "en", TeacherId(2)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn mask_errors() {
        let v = vocab(10);
        let cfg = MaskingConfig::default();
        let mut r = rng::stream(0, &[]);
        assert!(mask_example(&[], &v, &cfg, &mut r, "en", TeacherId(0)).is_err());
        let m = v.special().mask;
        assert!(mask_example(&[5, m], &v, &cfg, &mut r, "en", TeacherId(0)).is_err());
        let bad = MaskingConfig { rate: 1.0, ..cfg };
        assert!(mask_example(&[5, 6], &v, &bad, &mut r, "en", TeacherId(0)).is_err());
    }

    #[test]
    fn corruption_mix_is_roughly_80_10_10() {
        let v = vocab(1000);
        let cfg = MaskingConfig::default();
        let ids: Vec<u32> = (5..105).collect();
        let (mut masked, mut kept, mut random) = (0, 0, 0);
        for i in 0..400 {
            let ex = mask_example(&ids, &v, &cfg, &mut rng::stream(5, &[i]), "en", TeacherId(0)).unwrap();
            for (&p, &g) in ex.masked_positions.iter().zip(&ex.gold_ids) {
                let now = ex.input_ids[p];
                if now == v.special().mask {
                    masked += 1;
                } else if now == g {
                    kept += 1;
                } else {
                    assert!(!v.is_special(now));
                    random += 1;
                }
            }
        }
        let total = (masked + kept + random) as f64;
        assert!((masked as f64 / total - 0.8).abs() < 0.02);
        // a random draw can coincide with the original token
        assert!((kept as f64 / total - 0.1).abs() < 0.02);
        assert!((random as f64 / total - 0.1).abs() < 0.02);
    }

    #[test]
    fn nth_regular_skips_specials() {
        assert_eq!(nth_regular_id(0, &[0, 1, 2, 3, 4]), 5);
        assert_eq!(nth_regular_id(0, &[1, 3, 5, 7, 9]), 0);
        assert_eq!(nth_regular_id(1, &[1, 3, 5, 7, 9]), 2);
        assert_eq!(nth_regular_id(4, &[1, 3, 5, 7, 9]), 8);
        assert_eq!(nth_regular_id(5, &[1, 3, 5, 7, 9]), 10);
    }

    proptest! {
        #[test]
        fn masking_invariants(len in 1usize..80, seed in any::<u64>(), rate in 0.01f64..0.99) {
            let v = vocab(40);
            let mut r = rng::stream(seed, &[]);
            let ids: Vec<u32> = (0..len).map(|_| r.gen_range(5..v.len() as u32)).collect();
            let cfg = MaskingConfig { rate, ..Default::default() };
            let ex = mask_example(&ids, &v, &cfg, &mut r, "xx", TeacherId(0)).unwrap();
            prop_assert!(ex.validate(v.special().mask).is_ok());
            prop_assert_eq!(ex.n_masked(), masked_count(len, rate));
            prop_assert_eq!(ex.restore(), ids.clone());
            for (i, (&a, &b)) in ex.input_ids.iter().zip(&ids).enumerate() {
                if !ex.masked_positions.contains(&i) { prop_assert_eq!(a, b); }
            }
        }

        #[test]
        fn smoothing_upsamples_tail(counts in prop::collection::vec(1u64..10_000, 2..6), alpha in 0.05f64..0.99) {
            let q = smoothed_weights(&counts, alpha).unwrap();
            prop_assert!((q.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for a in 0..counts.len() {
                for b in 0..counts.len() {
                    if counts[a] > counts[b] {
                        let p_ratio = counts[a] as f64 / counts[b] as f64;
                        prop_assert!(q[a] / q[b] < p_ratio);
                    }
                }
            }
        }
    }
}
