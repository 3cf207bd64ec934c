use std::collections::HashMap;

use crate::corpus::Sentence;
use crate::error::{Error, Result};

pub const MAX_ORDER: usize = 4;

/// Corpus-level statistics behind a BLEU score.
#[derive(Clone, Debug, PartialEq)]
pub struct BleuStats {
    pub matches: [u64; MAX_ORDER],
    pub totals: [u64; MAX_ORDER],
    pub hyp_len: u64,
    pub ref_len: u64,
}

impl BleuStats {
    /// Modified precision of order `n` (1-based), with add-one smoothing for
    /// `n >= 2` when `smooth` is set.
    pub fn precision(&self, n: usize, smooth: bool) -> f64 {
        let (m, t) = (self.matches[n - 1] as f64, self.totals[n - 1] as f64);
        if smooth && n >= 2 {
            (m + 1.0) / (t + 1.0)
        } else if t == 0.0 {
            0.0
        } else {
            m / t
        }
    }

    pub fn brevity_penalty(&self) -> f64 {
        if self.hyp_len == 0 {
            0.0
        } else if self.hyp_len > self.ref_len {
            1.0
        } else {
            (1.0 - self.ref_len as f64 / self.hyp_len as f64).exp()
        }
    }

    pub fn score(&self, smooth: bool) -> f64 {
        let mut log_sum = 0.0;
        for n in 1..=MAX_ORDER {
            let p = self.precision(n, smooth);
            if p == 0.0 {
                return 0.0;
            }
            log_sum += p.ln();
        }
        100.0 * self.brevity_penalty() * (log_sum / MAX_ORDER as f64).exp()
    }
}

fn ngram_counts(s: &[String], n: usize) -> HashMap<&[String], u64> {
    let mut m = HashMap::new();
    if s.len() >= n {
        for w in s.windows(n) {
            *m.entry(w).or_default() += 1;
        }
    }
    m
}

pub fn bleu_stats(hypotheses: &[Sentence], references: &[Sentence]) -> Result<BleuStats> {
    if hypotheses.is_empty() {
        return Err(Error::Evaluation("BLEU over an empty hypothesis set".into()));
    }
    if hypotheses.len() != references.len() {
        return Err(Error::Evaluation(format!(
            "{} hypotheses but {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    let mut st = BleuStats {
        matches: [0; MAX_ORDER],
        totals: [0; MAX_ORDER],
        hyp_len: 0,
        ref_len: 0,
    };
    for (h, r) in hypotheses.iter().zip(references) {
        st.hyp_len += h.len() as u64;
        st.ref_len += r.len() as u64;
        for n in 1..=MAX_ORDER {
            let rc = ngram_counts(r, n);
            for (g, c) in ngram_counts(h, n) {
                st.matches[n - 1] += c.min(rc.get(g).copied().unwrap_or(0));
                st.totals[n - 1] += c;
            }
        }
    }
    Ok(st)
}

/// Corpus BLEU-4 in `[0, 100]`.
pub fn evaluate_bleu(hypotheses: &[Sentence], references: &[Sentence], smooth: bool) -> Result<f64> {
    Ok(bleu_stats(hypotheses, references)?.score(smooth))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn s(t: &str) -> Sentence {
        t.split_whitespace().map(str::to_string).collect()
    }

    #[test]
    fn identical_corpus_scores_100() {
        let r = vec![s("the cat sat on the mat"), s("a b c d e")];
        for smooth in [true, false] {
            assert!((evaluate_bleu(&r, &r, smooth).unwrap() - 100.0).abs() < 1e-9);
        }
    }

    #[test]
    fn disjoint_corpus_scores_zero() {
        let h = vec![s("x y z w")];
        let r = vec![s("a b c d")];
        let b = evaluate_bleu(&h, &r, true).unwrap();
        assert_eq!(b, 0.0);
        assert_eq!(evaluate_bleu(&[s("")], &r, true).unwrap(), 0.0);
    }

    #[test]
    fn hand_computed_fixture() {
        // sentence 1: hyp "the the cat sat", ref "the cat sat on the mat"
        //   1-grams: the x2 (ref has 2) cat sat -> 4/4
        //   2-grams: "the the" 0, "the cat" 1, "cat sat" 1 -> 2/3
        //   3-grams: "the the cat" 0, "the cat sat" 1 -> 1/2
        //   4-grams: "the the cat sat" 0 -> 0/1
        // sentence 2: hyp "a b c", ref "a b d"
        //   1-grams 2/3, 2-grams 1/2, 3-grams 0/1, 4-grams 0/0
        let h = vec![s("the the cat sat"), s("a b c")];
        let r = vec![s("the cat sat on the mat"), s("a b d")];
        let st = bleu_stats(&h, &r).unwrap();
        assert_eq!(st.matches, [6, 3, 1, 0]);
        assert_eq!(st.totals, [7, 5, 3, 1]);
        assert_eq!((st.hyp_len, st.ref_len), (7, 9));
        let bp = (1.0f64 - 9.0 / 7.0).exp();
        let smoothed = (6.0f64 / 7.0) * (4.0 / 6.0) * (2.0 / 4.0) * (1.0 / 2.0);
        let expect = 100.0 * bp * smoothed.powf(0.25);
        assert!((st.score(true) - expect).abs() < 1e-9);
        assert_eq!(st.score(false), 0.0);
    }

    #[test]
    fn long_hypothesis_has_no_penalty() {
        let h = vec![s("a b c d e f")];
        let r = vec![s("a b c d e")];
        let st = bleu_stats(&h, &r).unwrap();
        assert_eq!(st.brevity_penalty(), 1.0);
    }

    #[test]
    fn errors_on_bad_input() {
        assert_eq!(evaluate_bleu(&[], &[], true).unwrap_err().category(), "evaluation");
        assert!(evaluate_bleu(&[s("a")], &[], true).is_err());
    }

    fn sentences() -> impl Strategy<Value = Vec<(Sentence, Sentence)>> {
        let word = prop::sample::select(vec!["a", "b", "c", "d", "e"]).prop_map(str::to_string);
        let sent = prop::collection::vec(word, 0..8);
        prop::collection::vec((sent.clone(), sent), 1..6)
    }

    proptest! {
        #[test]
        fn bleu_is_order_invariant_and_bounded(pairs in sentences(), rot in 0usize..6) {
            let (h, r): (Vec<_>, Vec<_>) = pairs.iter().cloned().unzip();
            let b = evaluate_bleu(&h, &r, true).unwrap();
            prop_assert!(b.is_finite() && (0.0..=100.0 + 1e-9).contains(&b));
            let k = rot % pairs.len();
            let mut rotated = pairs.clone();
            rotated.rotate_left(k);
            let (h2, r2): (Vec<_>, Vec<_>) = rotated.into_iter().unzip();
            prop_assert!((evaluate_bleu(&h2, &r2, true).unwrap() - b).abs() < 1e-9);
        }
    }
}
