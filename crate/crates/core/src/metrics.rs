//! Corpus BLEU and token error rate over whitespace-tokenised text.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

pub const MAX_ORDER: usize = 4;

/// Clipped n-gram statistics summed over a corpus.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct BleuStats {
    pub matches: [usize; MAX_ORDER],
    pub totals: [usize; MAX_ORDER],
    pub hyp_len: usize,
    pub ref_len: usize,
}

fn ngram_counts<S: AsRef<str>>(tokens: &[S], n: usize) -> BTreeMap<Vec<&str>, usize> {
    let mut counts = BTreeMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w.iter().map(AsRef::as_ref).collect()).or_insert(0) += 1;
        }
    }
    counts
}

fn check_lengths(h: usize, r: usize) -> Result<()> {
    if h != r {
        return Err(Error::LengthMismatch(format!("{h} hypotheses for {r} references")));
    }
    Ok(())
}

pub fn bleu_stats<S: AsRef<str>, T: AsRef<str>>(hyps: &[Vec<S>], refs: &[Vec<T>]) -> Result<BleuStats> {
    check_lengths(hyps.len(), refs.len())?;
    let mut st = BleuStats::default();
    for (h, r) in hyps.iter().zip(refs) {
        st.hyp_len += h.len();
        st.ref_len += r.len();
        for n in 1..=MAX_ORDER {
            let hc = ngram_counts(h, n);
            let rc = ngram_counts(r, n);
            st.totals[n - 1] += h.len().saturating_sub(n - 1);
            st.matches[n - 1] += hc.iter().map(|(g, &c)| c.min(rc.get(g).copied().unwrap_or(0))).sum::<usize>();
        }
    }
    Ok(st)
}

impl BleuStats {
    /// BLEU in `[0, 100]` with exponential smoothing of zero-match orders.
    ///
    /// Orders with no hypothesis n-grams at all (every hypothesis shorter than
    /// `n`) are left out of the geometric mean.
    pub fn score(&self) -> f64 {
        if self.hyp_len == 0 {
            return 0.0;
        }
        let mut smooth = 1.0;
        let mut log_sum = 0.0;
        let mut order = 0;
        for n in 0..MAX_ORDER {
            if self.totals[n] == 0 {
                break;
            }
            order = n + 1;
            let p = if self.matches[n] == 0 {
                smooth *= 2.0;
                1.0 / (smooth * self.totals[n] as f64)
            } else {
                self.matches[n] as f64 / self.totals[n] as f64
            };
            log_sum += libm::log(p);
        }
        let bp = if self.hyp_len >= self.ref_len { 1.0 } else { libm::exp(1.0 - self.ref_len as f64 / self.hyp_len as f64) };
        (100.0 * bp * libm::exp(log_sum / order as f64)).clamp(0.0, 100.0)
    }
}

pub fn corpus_bleu<S: AsRef<str>, T: AsRef<str>>(hyps: &[Vec<S>], refs: &[Vec<T>]) -> Result<f64> {
    Ok(bleu_stats(hyps, refs)?.score())
}

/// Token-level Levenshtein distance with a two-row table.
pub fn edit_distance<S: AsRef<str>, T: AsRef<str>>(a: &[S], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x.as_ref() != y.as_ref());
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        core::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Summed edit distance over summed reference length.
pub fn token_error_rate<S: AsRef<str>, T: AsRef<str>>(hyps: &[Vec<S>], refs: &[Vec<T>]) -> Result<f64> {
    check_lengths(hyps.len(), refs.len())?;
    let total: usize = refs.iter().map(Vec::len).sum();
    if total == 0 {
        return Err(Error::Empty("references contain no tokens".into()));
    }
    let edits: usize = hyps.iter().zip(refs).map(|(h, r)| edit_distance(h, r)).sum();
    Ok(edits as f64 / total as f64)
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Scores {
    pub bleu: f64,
    pub token_error: f64,
    pub exact_match: f64,
    pub utterances: usize,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EvalReport {
    pub overall: Scores,
    pub per_language: BTreeMap<String, Scores>,
}

fn scores(hyps: &[Vec<String>], refs: &[Vec<String>]) -> Result<Scores> {
    let exact = hyps.iter().zip(refs).filter(|(h, r)| h == r).count();
    Ok(Scores {
        bleu: corpus_bleu(hyps, refs)?,
        token_error: token_error_rate(hyps, refs)?,
        exact_match: if refs.is_empty() { 0.0 } else { exact as f64 / refs.len() as f64 },
        utterances: refs.len(),
    })
}

/// Hypotheses and references of one language.
type Pairs = (Vec<Vec<String>>, Vec<Vec<String>>);

/// Overall and per-language scores; `langs[i]` labels pair `i`.
pub fn evaluate(hyps: &[Vec<String>], refs: &[Vec<String>], langs: &[String]) -> Result<EvalReport> {
    check_lengths(hyps.len(), refs.len())?;
    check_lengths(langs.len(), refs.len())?;
    let mut groups: BTreeMap<String, Pairs> = BTreeMap::new();
    for ((h, r), l) in hyps.iter().zip(refs).zip(langs) {
        let e = groups.entry(l.clone()).or_default();
        e.0.push(h.clone());
        e.1.push(r.clone());
    }
    let per_language = groups.into_iter().map(|(l, (h, r))| Ok((l, scores(&h, &r)?))).collect::<Result<_>>()?;
    Ok(EvalReport { overall: scores(hyps, refs)?, per_language })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;
    use alloc::string::ToString;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(ToString::to_string).collect()
    }

    #[test]
    fn identical_corpus_scores_100() {
        let refs = vec![toks("a b c d e"), toks("x y z w")];
        assert!((corpus_bleu(&refs, &refs).unwrap() - 100.0).abs() < 1e-9);
    }

    #[test]
    fn empty_hypotheses_score_0() {
        let refs = vec![toks("a b c d e")];
        let hyps: Vec<Vec<String>> = vec![Vec::new()];
        assert_eq!(corpus_bleu(&hyps, &refs).unwrap(), 0.0);
    }

    #[test]
    fn short_hypothesis_matches_hand_count() {
        // precisions 3/3, 2/2, 1/1; no 4-grams; BP = e^(1 - 4/3)
        let want = 100.0 * libm::exp(1.0 - 4.0 / 3.0);
        let got = corpus_bleu(&[toks("the cat sat")], &[toks("the cat sat down")]).unwrap();
        assert!((got - want).abs() < 0.01, "{got} vs {want}");
    }

    #[test]
    fn zero_match_orders_are_smoothed() {
        // unigrams 2/4, bigrams 0/3 → 1/(2·3), trigrams 0/2 → 1/(4·2), 4-grams 0/1 → 1/(8·1)
        let got = corpus_bleu(&[toks("a x b y")], &[toks("a q b r")]).unwrap();
        let want = 100.0 * libm::exp((libm::log(0.5) + libm::log(1.0 / 6.0) + libm::log(1.0 / 8.0) + libm::log(1.0 / 8.0)) / 4.0);
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");
    }

    #[test]
    fn mismatched_lengths_are_errors() {
        let a = vec![toks("a")];
        let b: Vec<Vec<String>> = Vec::new();
        assert!(matches!(corpus_bleu(&a, &b), Err(Error::LengthMismatch(_))));
        assert!(matches!(token_error_rate(&a, &b), Err(Error::LengthMismatch(_))));
    }

    #[test]
    fn token_error_examples() {
        let r = toks("a b c d e f g h i j");
        assert_eq!(token_error_rate(core::slice::from_ref(&r), core::slice::from_ref(&r)).unwrap(), 0.0);
        let h = toks("a b c d e f g h i k");
        assert!((token_error_rate(&[h], &[r]).unwrap() - 0.1).abs() < 1e-15);
    }

    fn naive_distance(a: &[String], b: &[String]) -> usize {
        let mut d = vec![vec![0usize; b.len() + 1]; a.len() + 1];
        for (i, row) in d.iter_mut().enumerate() {
            row[0] = i;
        }
        for j in 0..=b.len() {
            d[0][j] = j;
        }
        for i in 1..=a.len() {
            for j in 1..=b.len() {
                let c = usize::from(a[i - 1] != b[j - 1]);
                d[i][j] = (d[i - 1][j] + 1).min(d[i][j - 1] + 1).min(d[i - 1][j - 1] + c);
            }
        }
        d[a.len()][b.len()]
    }

    fn random_tokens(rng: &mut SeededRng) -> Vec<String> {
        (0..rng.below(9)).map(|_| ["a", "b", "c", "d"][rng.below(4)].to_string()).collect()
    }

    #[test]
    fn edit_distance_matches_full_table() {
        let mut rng = SeededRng::new(31);
        for _ in 0..100 {
            let a = random_tokens(&mut rng);
            let b = random_tokens(&mut rng);
            assert_eq!(edit_distance(&a, &b), naive_distance(&a, &b));
        }
    }

    #[test]
    fn edit_distance_is_a_metric_on_samples() {
        let mut rng = SeededRng::new(32);
        for _ in 0..100 {
            let (a, b, c) = (random_tokens(&mut rng), random_tokens(&mut rng), random_tokens(&mut rng));
            assert_eq!(edit_distance(&a, &a), 0);
            assert_eq!(edit_distance(&a, &b), edit_distance(&b, &a));
            assert!(edit_distance(&a, &c) <= edit_distance(&a, &b) + edit_distance(&b, &c));
        }
    }

    #[test]
    fn report_breaks_down_by_language() {
        let refs = vec![toks("a b c d"), toks("e f g h"), toks("a b c d")];
        let hyps = vec![toks("a b c d"), toks("e f g x"), toks("a b c d")];
        let langs = vec!["fr".to_string(), "de".to_string(), "fr".to_string()];
        let rep = evaluate(&hyps, &refs, &langs).unwrap();
        assert_eq!(rep.per_language.keys().collect::<Vec<_>>(), ["de", "fr"]);
        assert_eq!(rep.per_language["fr"].exact_match, 1.0);
        assert!((rep.overall.token_error - 1.0 / 12.0).abs() < 1e-15);
        assert!((rep.overall.exact_match - 2.0 / 3.0).abs() < 1e-15);
    }
}
