//! Corpus-level BLEU.
//!
//! Geometric mean of modified n-gram precisions for n = 1..max_n times the
//! brevity penalty min(1, e^(1 - ref_len/hyp_len)), scaled to [0, 100].
//! Single reference, no smoothing: any zero precision zeroes the score.

use crate::error::{Error, Result};
use std::collections::HashMap;
use std::hash::Hash;

fn ngram_counts<T: Eq + Hash + Clone>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts: HashMap<&[T], usize> = HashMap::new();
    if tokens.len() >= n {
        for window in tokens.windows(n) {
            *counts.entry(window).or_insert(0) += 1;
        }
    }
    counts
}

/// BLEU over aligned hypothesis/reference token sequences.
pub fn corpus_bleu<T: Eq + Hash + Clone>(
    hypotheses: &[Vec<T>],
    references: &[Vec<T>],
    max_n: usize,
) -> Result<f64> {
    if hypotheses.is_empty() {
        return Err(Error::Contract(
            "corpus_bleu requires at least one hypothesis".to_string(),
        ));
    }
    if hypotheses.len() != references.len() {
        return Err(Error::Contract(format!(
            "corpus_bleu: {} hypotheses vs {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    if max_n == 0 {
        return Err(Error::Contract(
            "corpus_bleu requires max_n >= 1".to_string(),
        ));
    }

    let mut matched = vec![0usize; max_n];
    let mut total = vec![0usize; max_n];
    let mut hyp_len = 0usize;
    let mut ref_len = 0usize;
    for (hyp, reference) in hypotheses.iter().zip(references) {
        hyp_len += hyp.len();
        ref_len += reference.len();
        for n in 1..=max_n {
            let ref_counts = ngram_counts(reference, n);
            for (gram, count) in ngram_counts(hyp, n) {
                total[n - 1] += count;
                matched[n - 1] += count.min(ref_counts.get(gram).copied().unwrap_or(0));
            }
        }
    }

    if hyp_len == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for n in 0..max_n {
        if matched[n] == 0 || total[n] == 0 {
            return Ok(0.0);
        }
        log_sum += (matched[n] as f64 / total[n] as f64).ln();
    }
    let bp = (1.0 - ref_len as f64 / hyp_len as f64).exp().min(1.0);
    Ok(100.0 * bp * (log_sum / max_n as f64).exp())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    #[test]
    fn perfect_match_scores_100() {
        let h = vec![toks("a b c d e")];
        assert!((corpus_bleu(&h, &h, 4).unwrap() - 100.0).abs() < 1e-9);
    }

    #[test]
    fn disjoint_tokens_score_zero() {
        let h = vec![toks("a b c d")];
        let r = vec![toks("e f g h")];
        assert_eq!(corpus_bleu(&h, &r, 4).unwrap(), 0.0);
    }

    #[test]
    fn hand_computed_example() {
        // p1 = 4/5, p2 = 3/4, p3 = 2/3, p4 = 1/2, BP = 1
        let h = vec![toks("a b c d e")];
        let r = vec![toks("a b c d f")];
        let bleu = corpus_bleu(&h, &r, 4).unwrap();
        let expect = 100.0 * (0.8f64 * 0.75 * (2.0 / 3.0) * 0.5).powf(0.25);
        assert!((bleu - expect).abs() < 1e-9);
        assert!((bleu - 66.87).abs() < 0.01, "got {}", bleu);
    }

    #[test]
    fn empty_hypothesis_scores_zero() {
        let h = vec![vec![]];
        let r = vec![toks("a b c")];
        assert_eq!(corpus_bleu(&h, &r, 4).unwrap(), 0.0);
    }

    #[test]
    fn brevity_penalty_applies() {
        // hypothesis is a strict prefix: precisions are 1, BP = e^(1-8/4)
        let h = vec![toks("a b c d")];
        let r = vec![toks("a b c d e f g h")];
        let bleu = corpus_bleu(&h, &r, 4).unwrap();
        let expect = 100.0 * (1.0f64 - 2.0).exp();
        assert!((bleu - expect).abs() < 1e-9);
    }

    #[test]
    fn permutation_invariant_over_sentence_pairs() {
        let h = vec![toks("a b c d e"), toks("x y z w q"), toks("m n o p")];
        let r = vec![toks("a b c d f"), toks("x y z w v"), toks("m n p o")];
        let base = corpus_bleu(&h, &r, 4).unwrap();
        let perm = [2usize, 0, 1];
        let hp: Vec<_> = perm.iter().map(|&i| h[i].clone()).collect();
        let rp: Vec<_> = perm.iter().map(|&i| r[i].clone()).collect();
        assert_eq!(base, corpus_bleu(&hp, &rp, 4).unwrap());
    }

    #[test]
    fn identity_corpus_scores_100_when_long_enough() {
        let h = vec![toks("a b c d"), toks("q w e r t y")];
        assert!((corpus_bleu(&h, &h, 4).unwrap() - 100.0).abs() < 1e-9);
    }

    #[test]
    fn contract_errors() {
        let h: Vec<Vec<String>> = vec![];
        assert!(corpus_bleu(&h, &h, 4).is_err());
        let h = vec![toks("a")];
        let r = vec![toks("a"), toks("b")];
        assert!(corpus_bleu(&h, &r, 4).is_err());
    }

    #[test]
    fn works_on_integer_tokens() {
        let h = vec![vec![5usize, 7, 6, 9]];
        let r = vec![vec![5usize, 7, 6, 9]];
        assert!((corpus_bleu(&h, &r, 4).unwrap() - 100.0).abs() < 1e-9);
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        fn corpus(max_sents: usize) -> impl Strategy<Value = Vec<Vec<u8>>> {
            prop::collection::vec(prop::collection::vec(0u8..6, 1..12), 1..max_sents)
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn self_bleu_is_100_for_long_sentences(
                c in prop::collection::vec(prop::collection::vec(0u8..6, 4..12), 1..8)
            ) {
                let bleu = corpus_bleu(&c, &c, 4).unwrap();
                prop_assert!((bleu - 100.0).abs() < 1e-9);
            }

            #[test]
            fn permutation_invariance(
                (h, r, seed) in (corpus(8), corpus(8), any::<u64>())
            ) {
                let n = h.len().min(r.len());
                let h = &h[..n];
                let r = &r[..n];
                let base = corpus_bleu(h, r, 4).unwrap();
                let mut idx: Vec<usize> = (0..n).collect();
                // cheap deterministic shuffle
                let mut s = seed | 1;
                for i in (1..n).rev() {
                    s = s.wrapping_mul(6364136223846793005).wrapping_add(1);
                    idx.swap(i, (s >> 33) as usize % (i + 1));
                }
                let hp: Vec<_> = idx.iter().map(|&i| h[i].clone()).collect();
                let rp: Vec<_> = idx.iter().map(|&i| r[i].clone()).collect();
                prop_assert_eq!(base, corpus_bleu(&hp, &rp, 4).unwrap());
            }

            #[test]
            fn bleu_is_bounded(
                (h, r) in (corpus(6), corpus(6))
            ) {
                let n = h.len().min(r.len());
                let bleu = corpus_bleu(&h[..n], &r[..n], 4).unwrap();
                prop_assert!((0.0..=100.0 + 1e-9).contains(&bleu));
            }
        }
    }
}
