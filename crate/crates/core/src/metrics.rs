//! Word error rate and corpus BLEU.

use std::collections::HashMap;

use crate::error::{Error, Result};

/// Edit operation counts of a minimum-cost word alignment.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EditAlignment {
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
    pub matches: usize,
}

impl EditAlignment {
    pub fn errors(&self) -> usize {
        self.substitutions + self.insertions + self.deletions
    }
}

/// Levenshtein distance over words divided by the reference length.
///
/// Among minimum-cost alignments the backtrace prefers matches and
/// substitutions, then deletions, then insertions.
pub fn wer<S: AsRef<str>>(reference: &[S], hypothesis: &[S]) -> Result<(f64, EditAlignment)> {
    if reference.is_empty() {
        return Err(Error::invalid("WER needs a nonempty reference"));
    }
    let (n, m) = (reference.len(), hypothesis.len());
    let w = m + 1;
    let mut cost = vec![0usize; (n + 1) * w];
    for i in 0..=n {
        cost[i * w] = i;
    }
    for j in 0..=m {
        cost[j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let same = reference[i - 1].as_ref() == hypothesis[j - 1].as_ref();
            let diag = cost[(i - 1) * w + j - 1] + usize::from(!same);
            let del = cost[(i - 1) * w + j] + 1;
            let ins = cost[i * w + j - 1] + 1;
            cost[i * w + j] = diag.min(del).min(ins);
        }
    }

    let mut align = EditAlignment::default();
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = cost[i * w + j];
        if i > 0 && j > 0 {
            let same = reference[i - 1].as_ref() == hypothesis[j - 1].as_ref();
            if here == cost[(i - 1) * w + j - 1] + usize::from(!same) {
                if same {
                    align.matches += 1;
                } else {
                    align.substitutions += 1;
                }
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && here == cost[(i - 1) * w + j] + 1 {
            align.deletions += 1;
            i -= 1;
        } else {
            align.insertions += 1;
            j -= 1;
        }
    }
    Ok((cost[n * w + m] as f64 / n as f64, align))
}

/// WER of two whitespace-separated strings.
pub fn wer_str(reference: &str, hypothesis: &str) -> Result<f64> {
    let r: Vec<&str> = reference.split_whitespace().collect();
    let h: Vec<&str> = hypothesis.split_whitespace().collect();
    wer(&r, &h).map(|(rate, _)| rate)
}

/// Corpus WER: total edits over total reference words.
pub fn corpus_wer(references: &[String], hypotheses: &[String]) -> Result<f64> {
    if references.len() != hypotheses.len() {
        return Err(Error::invalid(format!(
            "{} references but {} hypotheses",
            references.len(),
            hypotheses.len()
        )));
    }
    let mut errors = 0usize;
    let mut words = 0usize;
    for (r, h) in references.iter().zip(hypotheses) {
        let r: Vec<&str> = r.split_whitespace().collect();
        let h: Vec<&str> = h.split_whitespace().collect();
        let (_, a) = wer(&r, &h)?;
        errors += a.errors();
        words += r.len();
    }
    if words == 0 {
        return Err(Error::invalid("WER of an empty corpus"));
    }
    Ok(errors as f64 / words as f64)
}

/// `(id, wer)` for every `(id, reference, hypothesis)` entry, in input order.
pub fn per_sentence_wer_report<I, R, H>(corpus: &[(I, R, H)]) -> Result<Vec<(I, f64)>>
where
    I: Clone,
    R: AsRef<str>,
    H: AsRef<str>,
{
    corpus
        .iter()
        .map(|(id, r, h)| Ok((id.clone(), wer_str(r.as_ref(), h.as_ref())?)))
        .collect()
}

/// Sufficient statistics for corpus BLEU; add them across sentences.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BleuStats {
    pub matches: [usize; 4],
    pub totals: [usize; 4],
    pub hyp_len: usize,
    pub ref_len: usize,
}

impl std::ops::AddAssign for BleuStats {
    fn add_assign(&mut self, o: Self) {
        for n in 0..4 {
            self.matches[n] += o.matches[n];
            self.totals[n] += o.totals[n];
        }
        self.hyp_len += o.hyp_len;
        self.ref_len += o.ref_len;
    }
}

fn ngram_counts<'w, 'a>(words: &'w [&'a str], n: usize) -> HashMap<&'w [&'a str], usize> {
    let mut counts = HashMap::new();
    for g in words.windows(n) {
        *counts.entry(g).or_insert(0) += 1;
    }
    counts
}

impl BleuStats {
    pub fn sentence(reference: &str, hypothesis: &str) -> Self {
        let r: Vec<&str> = reference.split_whitespace().collect();
        let h: Vec<&str> = hypothesis.split_whitespace().collect();
        let mut s = BleuStats {
            hyp_len: h.len(),
            ref_len: r.len(),
            ..Default::default()
        };
        for n in 1..=4 {
            let rc = ngram_counts(&r, n);
            let hc = ngram_counts(&h, n);
            s.totals[n - 1] = h.len().saturating_sub(n - 1);
            s.matches[n - 1] = hc
                .iter()
                .map(|(g, &c)| c.min(rc.get(g).copied().unwrap_or(0)))
                .sum();
        }
        s
    }

    /// BLEU in percent; 0 when any n-gram precision is 0 (no smoothing).
    pub fn score(&self) -> f64 {
        if self.matches.contains(&0) || self.hyp_len == 0 {
            return 0.0;
        }
        let log_prec: f64 = (0..4)
            .map(|n| (self.matches[n] as f64 / self.totals[n] as f64).ln())
            .sum::<f64>()
            / 4.0;
        let bp = if self.hyp_len < self.ref_len {
            (1.0 - self.ref_len as f64 / self.hyp_len as f64).exp()
        } else {
            1.0
        };
        100.0 * bp * log_prec.exp()
    }
}

/// Corpus BLEU (percent) over whitespace-split detokenized text.
pub fn corpus_bleu<R: AsRef<str>, H: AsRef<str>>(references: &[R], hypotheses: &[H]) -> Result<f64> {
    Ok(corpus_bleu_stats(references, hypotheses)?.score())
}

pub fn corpus_bleu_stats<R: AsRef<str>, H: AsRef<str>>(references: &[R], hypotheses: &[H]) -> Result<BleuStats> {
    if references.len() != hypotheses.len() {
        return Err(Error::invalid(format!(
            "{} references but {} hypotheses",
            references.len(),
            hypotheses.len()
        )));
    }
    if references.is_empty() {
        return Err(Error::invalid("BLEU of an empty corpus"));
    }
    let mut total = BleuStats::default();
    for (r, h) in references.iter().zip(hypotheses) {
        total += BleuStats::sentence(r.as_ref(), h.as_ref());
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn words(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn wer_examples() {
        assert_eq!(wer(&words("a b c"), &words("a b c")).unwrap().0, 0.0);
        let (rate, a) = wer(&words("a b c d"), &words("a x c")).unwrap();
        assert_eq!(rate, 0.5);
        assert_eq!(a.errors(), 2);
        let (rate, a) = wer(&words("a"), &words("a b c")).unwrap();
        assert_eq!(rate, 2.0);
        assert_eq!(a.insertions, 2);
        assert!(wer::<&str>(&[], &["a"]).is_err());
    }

    #[test]
    fn alignment_counts_are_consistent() {
        let r = words("the cat sat on the mat");
        let h = words("a cat sat the the mat mat");
        let (_, a) = wer(&r, &h).unwrap();
        assert_eq!(a.substitutions + a.deletions + a.matches, r.len());
        assert_eq!(a.substitutions + a.insertions + a.matches, h.len());
    }

    #[test]
    fn bleu_identity_and_disjoint() {
        let refs = ["a b c d e", "f g h i"];
        assert!((corpus_bleu(&refs, &refs).unwrap() - 100.0).abs() < 1e-9);
        assert_eq!(corpus_bleu(&["a b c d"], &["w x y z"]).unwrap(), 0.0);
        assert!(corpus_bleu(&["a"], &["a", "b"]).is_err());
        assert!(corpus_bleu::<&str, &str>(&[], &[]).is_err());
    }

    #[test]
    fn bleu_hand_counted_sentence() {
        // hyp "the cat on the mat" vs ref "the cat sat on the mat":
        // 1-grams 5/5, 2-grams 3/4 (the cat, on the, the mat),
        // 3-grams 1/3 (on the mat), 4-grams 0/2 → BLEU 0.
        let s = BleuStats::sentence("the cat sat on the mat", "the cat on the mat");
        assert_eq!(s.matches, [5, 3, 1, 0]);
        assert_eq!(s.totals, [5, 4, 3, 2]);
        assert_eq!(s.score(), 0.0);
        // with a second sentence supplying the missing 4-gram the corpus
        // score follows the summed statistics
        let mut t = s;
        t += BleuStats::sentence("w x y z", "w x y z");
        let expected = 100.0
            * (1.0f64 - 10.0 / 9.0).exp()
            * ((9.0f64 / 9.0) * (6.0 / 7.0) * (3.0 / 5.0) * (1.0 / 3.0)).powf(0.25);
        assert!((t.score() - expected).abs() < 1e-9);
    }

    #[test]
    fn report_preserves_order() {
        let corpus = [("u1", "a b", "a b"), ("u0", "a b", "a c")];
        let rep = per_sentence_wer_report(&corpus).unwrap();
        assert_eq!(rep, vec![("u1", 0.0), ("u0", 0.5)]);
    }
}
