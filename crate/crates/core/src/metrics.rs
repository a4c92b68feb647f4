//! Translation quality metrics over token-id sequences: token accuracy,
//! exact match, corpus BLEU with brevity penalty, a character-level
//! n-gram F-score computed on rendered token strings, and the off-target
//! rate (fraction of hypotheses whose dominant token language is not the
//! requested one).

use std::collections::HashMap;

use crate::corpus::Vocabulary;
use crate::error::{Error, Result};

/// Fraction of positions where hypothesis and reference agree, comparing
/// up to the shorter length and counting overhang as wrong.
pub fn token_accuracy(pairs: &[(Vec<usize>, Vec<usize>)]) -> f64 {
    let mut correct = 0usize;
    let mut total = 0usize;
    for (hyp, re) in pairs {
        total += hyp.len().max(re.len());
        correct += hyp.iter().zip(re).filter(|(h, r)| h == r).count();
    }
    if total == 0 {
        0.0
    } else {
        correct as f64 / total as f64
    }
}

/// Fraction of hypotheses identical to their reference.
pub fn exact_match(pairs: &[(Vec<usize>, Vec<usize>)]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    pairs.iter().filter(|(h, r)| h == r).count() as f64 / pairs.len() as f64
}

fn ngram_counts(seq: &[usize], n: usize) -> HashMap<&[usize], usize> {
    let mut counts = HashMap::new();
    if seq.len() >= n {
        for w in seq.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus BLEU-4: geometric mean of clipped 1..4-gram precisions times a
/// brevity penalty, with add-nothing smoothing (zero precision gives a
/// zero score).
pub fn bleu(pairs: &[(Vec<usize>, Vec<usize>)]) -> f64 {
    let mut matched = [0usize; 4];
    let mut proposed = [0usize; 4];
    let mut hyp_len = 0usize;
    let mut ref_len = 0usize;
    for (hyp, re) in pairs {
        hyp_len += hyp.len();
        ref_len += re.len();
        for n in 1..=4 {
            let h = ngram_counts(hyp, n);
            let r = ngram_counts(re, n);
            for (gram, &count) in &h {
                proposed[n - 1] += count;
                matched[n - 1] += count.min(r.get(gram).copied().unwrap_or(0));
            }
        }
    }
    let mut log_prec = 0.0f64;
    for n in 0..4 {
        if proposed[n] == 0 || matched[n] == 0 {
            return 0.0;
        }
        log_prec += (matched[n] as f64 / proposed[n] as f64).ln() / 4.0;
    }
    let bp = if hyp_len >= ref_len || hyp_len == 0 {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    bp * log_prec.exp()
}

fn char_ngrams(s: &[char], n: usize) -> HashMap<&[char], usize> {
    let mut counts = HashMap::new();
    if s.len() >= n {
        for w in s.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Character n-gram F-score (β = 2, orders 1..6) over the rendered token
/// strings joined with spaces.
pub fn char_f(pairs: &[(Vec<usize>, Vec<usize>)], vocab: &Vocabulary) -> f64 {
    const ORDERS: usize = 6;
    const BETA2: f64 = 4.0;
    let render = |seq: &[usize]| -> Vec<char> {
        seq.iter()
            .map(|&t| vocab.token_str(t))
            .collect::<Vec<_>>()
            .join(" ")
            .chars()
            .collect()
    };
    let mut f_sum = 0.0f64;
    let mut f_cnt = 0usize;
    for (hyp, re) in pairs {
        let h_chars = render(hyp);
        let r_chars = render(re);
        let mut prec_sum = 0.0;
        let mut rec_sum = 0.0;
        let mut orders_used = 0usize;
        for n in 1..=ORDERS {
            let h = char_ngrams(&h_chars, n);
            let r = char_ngrams(&r_chars, n);
            let h_total: usize = h.values().sum();
            let r_total: usize = r.values().sum();
            if h_total == 0 && r_total == 0 {
                continue;
            }
            let mut overlap = 0usize;
            for (gram, &count) in &h {
                overlap += count.min(r.get(gram).copied().unwrap_or(0));
            }
            prec_sum += if h_total == 0 {
                0.0
            } else {
                overlap as f64 / h_total as f64
            };
            rec_sum += if r_total == 0 {
                0.0
            } else {
                overlap as f64 / r_total as f64
            };
            orders_used += 1;
        }
        if orders_used == 0 {
            continue;
        }
        let p = prec_sum / orders_used as f64;
        let r = rec_sum / orders_used as f64;
        let f = if p + r == 0.0 {
            0.0
        } else {
            (1.0 + BETA2) * p * r / (BETA2 * p + r)
        };
        f_sum += f;
        f_cnt += 1;
    }
    if f_cnt == 0 {
        0.0
    } else {
        f_sum / f_cnt as f64
    }
}

/// Majority-vote language of a hypothesis from its content tokens, or
/// `None` when it contains none.
pub fn detect_language(tokens: &[usize], vocab: &Vocabulary) -> Option<usize> {
    let mut votes = vec![0usize; vocab.num_languages()];
    let mut any = false;
    for &t in tokens {
        if let Some(lang) = vocab.language_of(t) {
            votes[lang] += 1;
            any = true;
        }
    }
    if !any {
        return None;
    }
    let best = votes.iter().enumerate().max_by_key(|(_, &v)| v).unwrap().0;
    Some(best)
}

/// Fraction of hypotheses whose detected language differs from the one
/// requested (hypotheses with no content tokens count as off-target).
pub fn off_target_rate(
    hyps: &[Vec<usize>],
    requested: &[usize],
    vocab: &Vocabulary,
) -> Result<f64> {
    if hyps.len() != requested.len() {
        return Err(Error::Shape(format!(
            "off_target: {} hypotheses vs {} requested languages",
            hyps.len(),
            requested.len()
        )));
    }
    if hyps.is_empty() {
        return Err(Error::Domain("off_target: empty evaluation set".into()));
    }
    let off = hyps
        .iter()
        .zip(requested)
        .filter(|(h, &want)| detect_language(h, vocab) != Some(want))
        .count();
    Ok(off as f64 / hyps.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::CorpusConfig;

    fn vocab() -> Vocabulary {
        Vocabulary::build(&CorpusConfig::default_toy(1)).unwrap()
    }

    #[test]
    fn perfect_hypotheses_score_one() {
        let pairs = vec![
            (vec![5, 6, 7, 8, 9], vec![5, 6, 7, 8, 9]),
            (vec![9, 8, 7, 6], vec![9, 8, 7, 6]),
        ];
        assert_eq!(token_accuracy(&pairs), 1.0);
        assert_eq!(exact_match(&pairs), 1.0);
        assert!((bleu(&pairs) - 1.0).abs() < 1e-12);
        let v = vocab();
        assert!((char_f(&pairs, &v) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn disjoint_hypotheses_score_zero() {
        let pairs = vec![(vec![5, 6, 7, 8], vec![10, 11, 12, 13])];
        assert_eq!(token_accuracy(&pairs), 0.0);
        assert_eq!(exact_match(&pairs), 0.0);
        assert_eq!(bleu(&pairs), 0.0);
    }

    #[test]
    fn bleu_matches_hand_computation() {
        // hyp [a b c d], ref [a b x d]: p1=3/4, p2=1/3, p3=0 -> BLEU 0
        let pairs = vec![(vec![1, 2, 3, 4], vec![1, 2, 9, 4])];
        assert_eq!(bleu(&pairs), 0.0);
        // hyp [a b c d e], ref [a b c d f]: independently counted
        // precisions p1=4/5 p2=3/4 p3=2/3 p4=1/2, equal lengths so BP=1
        let pairs = vec![(vec![1, 2, 3, 4, 5], vec![1, 2, 3, 4, 9])];
        let expect = (0.8f64 * 0.75 * (2.0 / 3.0) * 0.5).powf(0.25);
        assert!((bleu(&pairs) - expect).abs() < 1e-12);
    }

    #[test]
    fn brevity_penalty_punishes_short_output() {
        // identical prefix, hypothesis half as long as the reference
        let long_ref: Vec<usize> = (0..8).collect();
        let pairs = vec![(long_ref[..4].to_vec(), long_ref.clone())];
        let full = vec![(long_ref.clone(), long_ref.clone())];
        assert!(bleu(&pairs) < bleu(&full));
        let expect_bp = (1.0f64 - 8.0 / 4.0).exp();
        assert!((bleu(&pairs) - expect_bp).abs() < 1e-12);
    }

    #[test]
    fn clipping_caps_repeated_ngrams() {
        // hyp repeats one reference unigram five times: clipped p1 = 1/5
        let pairs = vec![(vec![7, 7, 7, 7, 7], vec![7, 8, 9, 10, 11])];
        // higher orders have no overlap -> BLEU 0, so check via accuracy
        assert_eq!(bleu(&pairs), 0.0);
        let h = ngram_counts(&pairs[0].0, 1);
        let r = ngram_counts(&pairs[0].1, 1);
        let clipped: usize = h
            .iter()
            .map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0)))
            .sum();
        assert_eq!(clipped, 1);
    }

    #[test]
    fn off_target_detects_wrong_alphabet() {
        let v = vocab();
        let lang = |k: usize| vec![v.content_base[k], v.content_base[k] + 1];
        let hyps = vec![lang(1), lang(2), lang(1)];
        let requested = vec![1, 1, 1];
        let rate = off_target_rate(&hyps, &requested, &v).unwrap();
        assert!((rate - 1.0 / 3.0).abs() < 1e-12);
        // content-free output counts as off-target
        let rate = off_target_rate(&[vec![v.eos_id]], &[0], &v).unwrap();
        assert_eq!(rate, 1.0);
    }

    #[test]
    fn char_f_rewards_partial_overlap() {
        let v = vocab();
        let a = v.content_base[0];
        let perfect = vec![(vec![a, a + 1], vec![a, a + 1])];
        let partial = vec![(vec![a, a + 2], vec![a, a + 1])];
        let none = vec![(vec![a + 3], vec![a + 1])];
        let p = char_f(&perfect, &v);
        let q = char_f(&partial, &v);
        let z = char_f(&none, &v);
        assert!(p > q && q > z);
        assert!((p - 1.0).abs() < 1e-12);
    }
}
