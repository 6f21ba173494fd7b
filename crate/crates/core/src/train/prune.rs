//! Removal of training utterances whose transcripts disagree with a
//! recognizer.

use crate::error::{Error, Result};
use crate::metrics::wer_str;
use crate::tensor::Tensor;

/// Anything that turns features into a word string.
pub trait Recognizer {
    fn recognize(&self, features: &Tensor<f32>) -> Result<String>;
}

pub struct PruneItem<'a> {
    pub id: &'a str,
    pub features: &'a Tensor<f32>,
    pub transcript: &'a str,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PruneReport {
    /// Indices of kept items, in input order.
    pub kept: Vec<usize>,
    /// `(id, WER)` of dropped items.
    pub dropped: Vec<(String, f64)>,
    /// WER of every item, in input order.
    pub wers: Vec<f64>,
}

/// Keeps the items whose sentence WER against the recognizer output is at
/// most `threshold`; strictly higher ones are dropped.
pub fn prune_corpus<R: Recognizer + ?Sized>(rec: &R, corpus: &[PruneItem], threshold: f64) -> Result<PruneReport> {
    if corpus.is_empty() {
        return Err(Error::invalid("empty corpus"));
    }
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::invalid(format!("threshold {threshold} outside [0, 1]")));
    }
    let mut report = PruneReport {
        kept: Vec::new(),
        dropped: Vec::new(),
        wers: Vec::with_capacity(corpus.len()),
    };
    for (i, item) in corpus.iter().enumerate() {
        let hyp = rec.recognize(item.features)?;
        let wer = wer_str(item.transcript, &hyp)?;
        report.wers.push(wer);
        if wer > threshold {
            report.dropped.push((item.id.to_string(), wer));
        } else {
            report.kept.push(i);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Fixed(&'static str);

    impl Recognizer for Fixed {
        fn recognize(&self, _: &Tensor<f32>) -> Result<String> {
            Ok(self.0.to_string())
        }
    }

    #[test]
    fn threshold_is_strict() {
        let f = Tensor::zeros(&[1, 1]);
        let item = |id, transcript| PruneItem {
            id,
            features: &f,
            transcript,
        };
        let rec = Fixed("a b c d e");
        // 3 of 5 words wrong -> 0.6; 2 of 4 -> 0.5; exact -> 0
        let corpus = [item("x", "a b x y z"), item("y", "a b c d"), item("z", "a b c d e")];
        let r = prune_corpus(&rec, &corpus, 0.5).unwrap();
        assert_eq!(r.kept, vec![1, 2]);
        assert_eq!(r.dropped, vec![("x".to_string(), 0.6)]);
        assert_eq!(prune_corpus(&rec, &corpus, 1.0).unwrap().kept.len(), 3);
        assert!(prune_corpus(&rec, &[], 0.5).is_err());
    }
}
