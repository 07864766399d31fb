use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::numkernel::Matrix;
use crate::solvers::linear_sum_assignment;

/// Added in place of a zero clipped n-gram count so BLEU stays finite.
pub const BLEU_EPSILON: f64 = 1e-9;
const BLEU_ORDER: usize = 4;

fn check(recovered: &[Vec<usize>], truth: &[Vec<usize>]) -> Result<()> {
    ensure!(!truth.is_empty(), InvalidArgument, "no ground-truth sequences");
    ensure!(
        recovered.len() == truth.len(),
        Shape,
        "{} recovered sequences for {} true ones",
        recovered.len(),
        truth.len()
    );
    let s = truth[0].len();
    ensure!(
        truth.iter().chain(recovered).all(|q| q.len() == s),
        Shape,
        "sequences differ in length"
    );
    Ok(())
}

fn positional_matches(a: &[usize], b: &[usize]) -> usize {
    a.iter().zip(b).filter(|(x, y)| x == y).count()
}

/// Ground-truth index for every recovered sequence: the assignment
/// maximising the total number of positions whose token matches.
pub fn resort(recovered: &[Vec<usize>], truth: &[Vec<usize>]) -> Result<Vec<usize>> {
    check(recovered, truth)?;
    let n = truth.len();
    let cost = Matrix::from_fn(n, n, |i, j| -(positional_matches(&recovered[i], &truth[j]) as f64));
    let a = linear_sum_assignment(&cost)?;
    Ok(a.row_to_col.iter().map(|c| c.expect("square assignment")).collect())
}

/// Per-sequence fraction of exact token-and-position matches after
/// resorting, in recovered order, and the resort itself.
pub fn per_sequence_accuracy(recovered: &[Vec<usize>], truth: &[Vec<usize>]) -> Result<(Vec<f64>, Vec<usize>)> {
    let order = resort(recovered, truth)?;
    let s = truth[0].len().max(1) as f64;
    let acc = recovered
        .iter()
        .zip(&order)
        .map(|(r, &t)| positional_matches(r, &truth[t]) as f64 / s)
        .collect();
    Ok((acc, order))
}

/// Fraction of all positions recovered with the right token after optimal
/// sequence resorting. Also returns the resort.
pub fn total_accuracy(recovered: &[Vec<usize>], truth: &[Vec<usize>]) -> Result<(f64, Vec<usize>)> {
    let (acc, order) = per_sequence_accuracy(recovered, truth)?;
    Ok((acc.iter().sum::<f64>() / acc.len() as f64, order))
}

fn counts<'a>(seqs: impl IntoIterator<Item = &'a Vec<usize>>) -> HashMap<usize, usize> {
    let mut m = HashMap::new();
    for &t in seqs.into_iter().flatten() {
        *m.entry(t).or_insert(0) += 1;
    }
    m
}

/// Size of the multiset intersection of all tokens over the total count.
pub fn token_accuracy(recovered: &[Vec<usize>], truth: &[Vec<usize>]) -> Result<f64> {
    check(recovered, truth)?;
    let (r, t) = (counts(recovered), counts(truth));
    let hit: usize = t.iter().map(|(k, &c)| c.min(r.get(k).copied().unwrap_or(0))).sum();
    let total: usize = truth.iter().map(Vec::len).sum();
    Ok(if total == 0 { 1.0 } else { hit as f64 / total as f64 })
}

/// Accuracy of the most leaked sequence: the best positional match between
/// any recovered and any true sequence. Unlike the maximum over one optimal
/// resort, this does not depend on how ties in the resort are broken.
pub fn most_vulnerable_accuracy(recovered: &[Vec<usize>], truth: &[Vec<usize>]) -> Result<f64> {
    check(recovered, truth)?;
    let s = truth[0].len().max(1) as f64;
    let best = recovered
        .iter()
        .flat_map(|r| truth.iter().map(move |t| positional_matches(r, t)))
        .max()
        .unwrap_or(0);
    Ok(best as f64 / s)
}

fn ngrams(s: &[usize], n: usize) -> HashMap<&[usize], usize> {
    let mut m = HashMap::new();
    if s.len() >= n {
        for w in s.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus BLEU-4 with brevity penalty. Every recovered sequence is scored
/// against all true sequences as references: n-gram counts are clipped by
/// their largest count in any reference and the brevity penalty uses the
/// closest reference length. Zero clipped counts become [`BLEU_EPSILON`].
pub fn bleu(recovered: &[Vec<usize>], truth: &[Vec<usize>]) -> Result<f64> {
    ensure!(
        !recovered.is_empty() && !truth.is_empty(),
        InvalidArgument,
        "BLEU needs non-empty inputs"
    );
    let mut clipped = [0usize; BLEU_ORDER];
    let mut totals = [0usize; BLEU_ORDER];
    let (mut cand_len, mut ref_len) = (0usize, 0usize);
    for c in recovered {
        cand_len += c.len();
        ref_len += truth
            .iter()
            .map(Vec::len)
            .min_by_key(|&l| (l.abs_diff(c.len()), l))
            .expect("non-empty");
        for n in 1..=BLEU_ORDER {
            let mut max_ref: HashMap<&[usize], usize> = HashMap::new();
            for r in truth {
                for (g, k) in ngrams(r, n) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(k);
                }
            }
            for (g, k) in ngrams(c, n) {
                clipped[n - 1] += k.min(max_ref.get(g).copied().unwrap_or(0));
                totals[n - 1] += k;
            }
        }
    }
    if cand_len == 0 {
        return Ok(0.0);
    }
    let mut log_p = 0.0;
    for n in 0..BLEU_ORDER {
        let num = if clipped[n] == 0 {
            BLEU_EPSILON
        } else {
            clipped[n] as f64
        };
        let den = totals[n].max(1) as f64;
        log_p += (num / den).ln() / BLEU_ORDER as f64;
    }
    let bp = if cand_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    };
    Ok(bp * log_p.exp())
}

fn lcs(a: &[usize], b: &[usize]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L F1 from the longest common subsequence of each recovered
/// sequence and its resorted true partner, averaged over sequences.
pub fn rouge_l(recovered: &[Vec<usize>], truth: &[Vec<usize>]) -> Result<f64> {
    let order = resort(recovered, truth)?;
    let mut sum = 0.0;
    for (r, &t) in recovered.iter().zip(&order) {
        let l = lcs(r, &truth[t]) as f64;
        if l > 0.0 {
            let (p, q) = (l / r.len() as f64, l / truth[t].len() as f64);
            sum += 2.0 * p * q / (p + q);
        }
    }
    Ok(sum / recovered.len() as f64)
}

/// Every score of one reconstruction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub total_accuracy: f64,
    pub token_accuracy: f64,
    pub bleu: f64,
    pub rouge_l: f64,
    pub most_vulnerable_accuracy: f64,
    pub per_sequence: Vec<f64>,
    /// Ground-truth index of each recovered sequence.
    pub order: Vec<usize>,
}

pub fn score(recovered: &[Vec<usize>], truth: &[Vec<usize>]) -> Result<Scores> {
    let (per_sequence, order) = per_sequence_accuracy(recovered, truth)?;
    Ok(Scores {
        total_accuracy: per_sequence.iter().sum::<f64>() / per_sequence.len() as f64,
        token_accuracy: token_accuracy(recovered, truth)?,
        bleu: bleu(recovered, truth)?,
        rouge_l: rouge_l(recovered, truth)?,
        most_vulnerable_accuracy: most_vulnerable_accuracy(recovered, truth)?,
        per_sequence,
        order,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn v(s: &[&[usize]]) -> Vec<Vec<usize>> {
        s.iter().map(|x| x.to_vec()).collect()
    }

    #[test]
    fn identical_scores_one() {
        let t = v(&[&[1, 2, 3, 4, 5], &[6, 7, 8, 9, 10]]);
        let s = score(&t, &t).unwrap();
        assert_eq!(s.total_accuracy, 1.0);
        assert_eq!(s.token_accuracy, 1.0);
        assert!((s.bleu - 1.0).abs() < 1e-12);
        assert_eq!(s.rouge_l, 1.0);
        assert_eq!(s.most_vulnerable_accuracy, 1.0);
    }

    #[test]
    fn disjoint_scores_zero() {
        let t = v(&[&[1, 2, 3, 4, 5]]);
        let r = v(&[&[6, 7, 8, 9, 10]]);
        let s = score(&r, &t).unwrap();
        assert_eq!(s.total_accuracy, 0.0);
        assert_eq!(s.token_accuracy, 0.0);
        assert!(s.bleu < 1e-8);
        assert_eq!(s.rouge_l, 0.0);
    }

    #[test]
    fn one_wrong_token() {
        let t: Vec<usize> = (0..32).collect();
        let mut r = t.clone();
        r[7] = 99;
        let (a, _) = total_accuracy(&[r], &[t]).unwrap();
        assert_eq!(a, 31.0 / 32.0);
    }

    #[test]
    fn permuted_sequences_resort_to_one() {
        let t = v(&[&[1, 2, 3], &[4, 5, 6], &[7, 8, 9]]);
        let r = v(&[&[7, 8, 9], &[1, 2, 3], &[4, 5, 6]]);
        let (a, order) = total_accuracy(&r, &t).unwrap();
        assert_eq!(a, 1.0);
        assert_eq!(order, vec![2, 0, 1]);
    }

    #[test]
    fn token_accuracy_hand_count() {
        let (a, b) = (3, 4);
        assert_eq!(token_accuracy(&v(&[&[a, b, b]]), &v(&[&[a, a, b]])).unwrap(), 2.0 / 3.0);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let t = v(&[&[1, 2, 3]]);
        assert!(total_accuracy(&v(&[&[1, 2]]), &t).is_err());
        assert!(token_accuracy(&v(&[&[1, 2, 3], &[1, 2, 3]]), &t).is_err());
        assert!(bleu(&[], &t).is_err());
    }

    #[test]
    fn hand_bleu_and_lcs() {
        // candidate "a b c d", reference "a b x d"
        let (a, b, c, d, x) = (1, 2, 3, 4, 5);
        let cand = v(&[&[a, b, c, d]]);
        let refs = v(&[&[a, b, x, d]]);
        // unigrams a b d match (3/4); bigram "a b" (1/3); no trigram or 4-gram
        let p: [f64; 4] = [3.0 / 4.0, 1.0 / 3.0, 1e-9 / 2.0, 1e-9 / 1.0];
        let expect = (p[0].ln() + p[1].ln() + p[2].ln() + p[3].ln()) / 4.0;
        assert!((bleu(&cand, &refs).unwrap() - expect.exp()).abs() < 1e-9);
        // LCS "a b d": precision = recall = 3/4
        assert!((rouge_l(&cand, &refs).unwrap() - 0.75).abs() < 1e-9);
    }

    #[test]
    fn bleu_brevity_penalty_uses_closest_reference() {
        let cand = v(&[&[1, 2, 3, 4]]);
        let refs = vec![vec![1, 2, 3, 4, 5, 6], vec![1, 2, 3, 4, 7, 8, 9, 10]];
        // equal lengths are required by the other metrics, not by BLEU
        let got = bleu(&cand, &refs).unwrap();
        assert!((got - (1.0f64 - 6.0 / 4.0).exp()).abs() < 1e-12);
    }

    #[test]
    fn lcs_straight_line() {
        assert_eq!(lcs(&[1, 2, 3, 4, 5], &[2, 9, 4, 5, 1]), 3);
        assert_eq!(lcs(&[], &[1]), 0);
        assert_eq!(lcs(&[1, 1, 1], &[1, 1]), 2);
    }

    fn batch(n: usize, s: usize, vocab: usize) -> impl Strategy<Value = (Vec<Vec<usize>>, Vec<Vec<usize>>)> {
        (
            prop::collection::vec(prop::collection::vec(0..vocab, s), n),
            prop::collection::vec(prop::collection::vec(0..vocab, s), n),
        )
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn total_never_exceeds_token_accuracy((r, t) in (1usize..5, 1usize..8).prop_flat_map(|(n, s)| batch(n, s, 6))) {
            let (a, _) = total_accuracy(&r, &t).unwrap();
            prop_assert!(a <= token_accuracy(&r, &t).unwrap() + 1e-12);
            let s = score(&r, &t).unwrap();
            for x in [s.total_accuracy, s.token_accuracy, s.bleu, s.rouge_l, s.most_vulnerable_accuracy] {
                prop_assert!((0.0..=1.0 + 1e-12).contains(&x));
            }
            prop_assert!(s.most_vulnerable_accuracy >= s.total_accuracy - 1e-12);
        }

        #[test]
        fn metrics_ignore_sequence_order((r, t) in (2usize..5, 4usize..8).prop_flat_map(|(n, s)| batch(n, s, 5)), k in 1usize..4) {
            let base = score(&r, &t).unwrap();
            let mut r2 = r.clone();
            r2.rotate_left(k % r.len());
            let mut t2 = t.clone();
            t2.reverse();
            let s = score(&r2, &t2).unwrap();
            prop_assert!((s.total_accuracy - base.total_accuracy).abs() < 1e-12);
            prop_assert!((s.token_accuracy - base.token_accuracy).abs() < 1e-12);
            prop_assert!((s.bleu - base.bleu).abs() < 1e-12 * base.bleu.max(1e-300));
            prop_assert!((s.most_vulnerable_accuracy - base.most_vulnerable_accuracy).abs() < 1e-12);
        }

        #[test]
        fn lcs_is_symmetric_and_bounded(a in prop::collection::vec(0usize..4, 0..10), b in prop::collection::vec(0usize..4, 0..10)) {
            let l = lcs(&a, &b);
            prop_assert_eq!(l, lcs(&b, &a));
            prop_assert!(l <= a.len().min(b.len()));
        }
    }
}
