//! Seeded synthetic speech-translation data.
//!
//! Source words are drawn from a small invented vocabulary and each has a
//! fixed prototype feature vector; an utterance is `r` noisy copies of the
//! prototype per token, sentence-final punctuation included. The target is
//! the word-by-word image of the source under a fixed bijection, reversed
//! when the sentence is a question, so the `?`/`.` distinction carries
//! information a punctuation-free pipeline cannot recover.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::text::strip_punctuation;

const SRC_ONSETS: &[char] = &['b', 'd', 'f', 'g', 'k', 'l', 'm', 'n', 'p', 'r', 's', 't'];
const SRC_VOWELS: &[char] = &['a', 'e', 'i', 'o', 'u'];
const TGT_ONSETS: &[&str] = &["sch", "z", "w", "h", "ch", "v", "j", "st"];
const TGT_VOWELS: &[&str] = &["a", "ei", "o", "au", "ie", "u"];

/// Stream ids keep the generator's independent random draws apart.
const STREAM_TABLES: u64 = 0;
const STREAM_SENTENCE: u64 = 1 << 40;
const STREAM_FEATURES: u64 = 2 << 40;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub vocab_size: usize,
    pub frames_per_token: usize,
    pub feature_dim: usize,
    pub noise: f64,
    /// Extra frames per token drawn uniformly from `0..=jitter`.
    pub jitter: usize,
    /// Reverse the target of questions.
    pub punctuation_rule: bool,
    pub min_len: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            vocab_size: 40,
            frames_per_token: 4,
            feature_dim: 16,
            noise: 0.0,
            jitter: 0,
            punctuation_rule: true,
            min_len: 3,
            max_len: 6,
            seed: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Triplet {
    pub id: String,
    pub features: Tensor<f32>,
    /// Punctuated source transcript.
    pub source: String,
    /// Punctuated target translation.
    pub target: String,
}

impl Triplet {
    pub fn normalized_source(&self) -> String {
        strip_punctuation(&self.source)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TextPair {
    pub id: String,
    pub source: String,
    pub target: String,
}

/// A spec with its derived lexicon and prototypes.
#[derive(Clone, Debug)]
pub struct SyntheticTask {
    spec: SyntheticSpec,
    source_words: Vec<String>,
    target_words: Vec<String>,
    /// `target_words[bijection[i]]` translates `source_words[i]`.
    bijection: Vec<usize>,
    /// One row per source word, then `.` and `?`.
    prototypes: Vec<Vec<f32>>,
}

fn distinct_words(rng: &mut ChaCha8Rng, n: usize, make: impl Fn(&mut ChaCha8Rng) -> String) -> Result<Vec<String>> {
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(n);
    let mut attempts = 0;
    while out.len() < n {
        attempts += 1;
        if attempts > 1000 * n + 1000 {
            return Err(Error::invalid(format!("cannot invent {n} distinct words")));
        }
        let w = make(rng);
        if seen.insert(w.clone()) {
            out.push(w);
        }
    }
    Ok(out)
}

impl SyntheticTask {
    pub fn new(spec: SyntheticSpec) -> Result<Self> {
        if spec.vocab_size < 2 || spec.frames_per_token == 0 || spec.feature_dim == 0 {
            return Err(Error::invalid("vocab ≥ 2, frames per token ≥ 1, feature dim ≥ 1"));
        }
        if !(spec.noise >= 0.0) {
            return Err(Error::invalid("noise must be nonnegative"));
        }
        if spec.min_len == 0 || spec.min_len > spec.max_len {
            return Err(Error::invalid("need 1 ≤ min_len ≤ max_len"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(STREAM_TABLES);
        let source_words = distinct_words(&mut rng, spec.vocab_size, |r| {
            let syll = r.random_range(2..=3);
            (0..syll)
                .map(|_| {
                    let c = SRC_ONSETS[r.random_range(0..SRC_ONSETS.len())];
                    let v = SRC_VOWELS[r.random_range(0..SRC_VOWELS.len())];
                    format!("{c}{v}")
                })
                .collect()
        })?;
        let target_words = distinct_words(&mut rng, spec.vocab_size, |r| {
            let syll = r.random_range(1..=2);
            let mut w: String = (0..syll)
                .map(|_| {
                    let c = TGT_ONSETS[r.random_range(0..TGT_ONSETS.len())];
                    let v = TGT_VOWELS[r.random_range(0..TGT_VOWELS.len())];
                    format!("{c}{v}")
                })
                .collect();
            w.push(['n', 't', 'r', 'l'][r.random_range(0..4)]);
            w
        })?;
        let mut bijection: Vec<usize> = (0..spec.vocab_size).collect();
        bijection.shuffle(&mut rng);
        let normal = Normal::new(0.0f32, 1.0).expect("unit normal");
        let prototypes = (0..spec.vocab_size + 2)
            .map(|_| (0..spec.feature_dim).map(|_| normal.sample(&mut rng)).collect())
            .collect();
        Ok(SyntheticTask {
            spec,
            source_words,
            target_words,
            bijection,
            prototypes,
        })
    }

    pub fn spec(&self) -> &SyntheticSpec {
        &self.spec
    }

    pub fn source_words(&self) -> &[String] {
        &self.source_words
    }

    pub fn target_words(&self) -> &[String] {
        &self.target_words
    }

    /// Word indices and question flag of sentence number `index`.
    fn sentence(&self, index: u64, len: Option<usize>) -> (Vec<usize>, bool) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.spec.seed);
        rng.set_stream(STREAM_SENTENCE + index);
        let len = len.unwrap_or_else(|| rng.random_range(self.spec.min_len..=self.spec.max_len));
        let words = (0..len).map(|_| rng.random_range(0..self.spec.vocab_size)).collect();
        (words, rng.random_bool(0.5))
    }

    fn source_text(&self, words: &[usize], question: bool) -> String {
        let mut s: Vec<&str> = words.iter().map(|&w| self.source_words[w].as_str()).collect();
        s.push(if question { "?" } else { "." });
        s.join(" ")
    }

    fn target_text(&self, words: &[usize], question: bool) -> String {
        let mut t: Vec<&str> = words
            .iter()
            .map(|&w| self.target_words[self.bijection[w]].as_str())
            .collect();
        if question && self.spec.punctuation_rule {
            t.reverse();
        }
        t.push(if question { "?" } else { "." });
        t.join(" ")
    }

    /// Source-word indices of a punctuated or normalized transcript;
    /// `None` for anything outside the lexicon.
    fn parse_source(&self, text: &str) -> Option<(Vec<usize>, Option<bool>)> {
        let mut words = Vec::new();
        let mut question = None;
        for w in text.split_whitespace() {
            match w {
                "?" => question = Some(true),
                "." => question = Some(false),
                _ => words.push(self.source_words.iter().position(|s| s == w)?),
            }
        }
        Some((words, question))
    }

    /// Exact translation of a punctuated source sentence.
    pub fn oracle_translate(&self, source: &str) -> Option<String> {
        let (words, q) = self.parse_source(source)?;
        Some(self.target_text(&words, q?))
    }

    /// Best guess from a punctuation-free source: statement order with a
    /// final `.`, which is right for every statement and wrong in order and
    /// punctuation for every question.
    pub fn norm_oracle_translate(&self, normalized_source: &str) -> Option<String> {
        let (words, _) = self.parse_source(normalized_source)?;
        Some(self.target_text(&words, false))
    }

    fn features(&self, index: u64, words: &[usize], question: bool) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.spec.seed);
        rng.set_stream(STREAM_FEATURES + index);
        let f = self.spec.feature_dim;
        let punct = self.spec.vocab_size + usize::from(question);
        let mut data = Vec::new();
        let mut rows = 0;
        let noise = (self.spec.noise > 0.0).then(|| Normal::new(0.0f64, self.spec.noise).expect("valid sigma"));
        for &tok in words.iter().chain(std::iter::once(&punct)) {
            let frames = self.spec.frames_per_token
                + if self.spec.jitter > 0 {
                    rng.random_range(0..=self.spec.jitter)
                } else {
                    0
                };
            for _ in 0..frames {
                for &p in &self.prototypes[tok] {
                    let n = noise.as_ref().map_or(0.0, |d| d.sample(&mut rng) as f32);
                    data.push(p + n);
                }
                rows += 1;
            }
        }
        Tensor::new(&[rows, f], data).expect("row-major features")
    }

    /// Triplet number `index`; with `len = None` the length is drawn from
    /// `min_len..=max_len`.
    pub fn triplet(&self, index: u64, len: Option<usize>) -> Result<Triplet> {
        if let Some(l) = len {
            if l == 0 || l > self.spec.max_len {
                return Err(Error::TooLong {
                    len: l,
                    max: self.spec.max_len,
                });
            }
        }
        let (words, q) = self.sentence(index, len);
        Ok(Triplet {
            id: format!("utt{index:06}"),
            features: self.features(index, &words, q),
            source: self.source_text(&words, q),
            target: self.target_text(&words, q),
        })
    }

    /// Features for an arbitrary punctuated source transcript, drawn with
    /// the noise stream of `index`.
    pub fn features_for(&self, source: &str, index: u64) -> Option<Tensor<f32>> {
        let (words, q) = self.parse_source(source)?;
        Some(self.features(index, &words, q?))
    }

    /// Number of distinct sentences the spec can produce.
    pub fn inventory_size(&self) -> f64 {
        (self.spec.min_len..=self.spec.max_len)
            .map(|l| 2.0 * (self.spec.vocab_size as f64).powi(l as i32))
            .sum()
    }

    /// Disjoint splits; see [`CorpusSizes`].
    pub fn corpora(&self, sizes: &CorpusSizes) -> Result<Corpora> {
        let total = sizes.asr + sizes.mt + sizes.st + sizes.text + sizes.test;
        if total == 0 {
            return Err(Error::invalid("all corpus sizes are zero"));
        }
        // rejection sampling stays cheap while the inventory is mostly unused
        if (total as f64) > 0.5 * self.inventory_size() {
            return Err(Error::invalid(format!(
                "{total} distinct sentences requested from an inventory of {}",
                self.inventory_size()
            )));
        }
        if !(0.0..=1.0).contains(&sizes.corruption) {
            return Err(Error::invalid("corruption rate must lie in [0, 1]"));
        }
        let mut seen = HashSet::new();
        let mut next = 0u64;
        let mut draw = |n: usize, prefix: &str| -> Result<Vec<Triplet>> {
            let mut out = Vec::with_capacity(n);
            while out.len() < n {
                let mut t = self.triplet(next, None)?;
                next += 1;
                if seen.insert(t.source.clone()) {
                    t.id = format!("{prefix}{:06}", out.len());
                    out.push(t);
                }
            }
            Ok(out)
        };
        // test first, so growing a training split never changes the test set
        let test = draw(sizes.test, "test")?;
        let asr = draw(sizes.asr, "asr")?;
        let mt = draw(sizes.mt, "mt")?;
        let mut st = draw(sizes.st, "st")?;
        let text = draw(sizes.text, "text")?;

        let n_bad = (sizes.corruption * st.len() as f64).round() as usize;
        let mut corrupted = Vec::new();
        if n_bad > 0 {
            if st.len() < 2 {
                return Err(Error::invalid("corruption needs at least two ST triplets"));
            }
            let mut order: Vec<usize> = (0..st.len()).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(self.spec.seed ^ 0x5eed);
            order.shuffle(&mut rng);
            corrupted = order[..n_bad].to_vec();
            corrupted.sort_unstable();
            let originals: Vec<String> = st.iter().map(|t| t.source.clone()).collect();
            for &i in &corrupted {
                st[i].source = originals[(i + 1) % st.len()].clone();
            }
        }
        let pairs = |v: Vec<Triplet>| -> Vec<TextPair> {
            v.into_iter()
                .map(|t| TextPair {
                    id: t.id,
                    source: t.source,
                    target: t.target,
                })
                .collect()
        };
        Ok(Corpora {
            asr,
            mt: pairs(mt),
            st,
            text: pairs(text),
            test,
            corrupted,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CorpusSizes {
    pub asr: usize,
    pub mt: usize,
    pub st: usize,
    pub text: usize,
    pub test: usize,
    /// Fraction of ST transcripts replaced by the next ST sentence's transcript.
    pub corruption: f64,
}

#[derive(Clone, Debug)]
pub struct Corpora {
    pub asr: Vec<Triplet>,
    pub mt: Vec<TextPair>,
    pub st: Vec<Triplet>,
    pub text: Vec<TextPair>,
    pub test: Vec<Triplet>,
    /// Indices into `st` whose transcripts were shifted.
    pub corrupted: Vec<usize>,
}

fn write_lines<'a>(path: &Path, lines: impl Iterator<Item = &'a str>) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for l in lines {
        writeln!(f, "{l}")?;
    }
    f.flush()?;
    Ok(())
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    Ok(fs::read_to_string(path)?.lines().map(str::to_string).collect())
}

pub fn write_features(path: &Path, t: &Tensor<f32>) -> Result<()> {
    let (rows, cols) = (t.rows(), t.cols());
    let mut bytes = Vec::with_capacity(8 + 4 * t.numel());
    bytes.extend_from_slice(&(rows as u32).to_le_bytes());
    bytes.extend_from_slice(&(cols as u32).to_le_bytes());
    for v in t.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_features(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path)?;
    let bad = |d: String| Error::format("feature file", format!("{}: {d}", path.display()));
    if bytes.len() < 8 {
        return Err(bad("shorter than its header".into()));
    }
    let rows = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    if bytes.len() != 8 + 4 * rows * cols {
        return Err(bad(format!("{rows}x{cols} header but {} payload bytes", bytes.len() - 8)));
    }
    let data = bytes[8..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(&[rows, cols], data)
}

/// Writes `ids.txt`, `src.txt`, `tgt.txt` and `feats/<id>.f32` under `dir`.
pub fn write_triplets(dir: &Path, corpus: &[Triplet]) -> Result<()> {
    fs::create_dir_all(dir.join("feats"))?;
    for t in corpus {
        write_features(&dir.join("feats").join(format!("{}.f32", t.id)), &t.features)?;
    }
    write_lines(&dir.join("ids.txt"), corpus.iter().map(|t| t.id.as_str()))?;
    write_lines(&dir.join("src.txt"), corpus.iter().map(|t| t.source.as_str()))?;
    write_lines(&dir.join("tgt.txt"), corpus.iter().map(|t| t.target.as_str()))?;
    Ok(())
}

pub fn write_text_pairs(dir: &Path, corpus: &[TextPair]) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_lines(&dir.join("ids.txt"), corpus.iter().map(|t| t.id.as_str()))?;
    write_lines(&dir.join("src.txt"), corpus.iter().map(|t| t.source.as_str()))?;
    write_lines(&dir.join("tgt.txt"), corpus.iter().map(|t| t.target.as_str()))?;
    Ok(())
}

pub fn read_text_pairs(dir: &Path) -> Result<Vec<TextPair>> {
    let ids = read_lines(&dir.join("ids.txt"))?;
    let src = read_lines(&dir.join("src.txt"))?;
    let tgt = read_lines(&dir.join("tgt.txt"))?;
    if src.len() != ids.len() || tgt.len() != ids.len() {
        return Err(Error::format(
            "corpus",
            format!("{}: ids/src/tgt line counts differ", dir.display()),
        ));
    }
    Ok(ids
        .into_iter()
        .zip(src)
        .zip(tgt)
        .map(|((id, source), target)| TextPair { id, source, target })
        .collect())
}

pub fn read_triplets(dir: &Path) -> Result<Vec<Triplet>> {
    read_text_pairs(dir)?
        .into_iter()
        .map(|p| {
            let features = read_features(&dir.join("feats").join(format!("{}.f32", p.id)))?;
            Ok(Triplet {
                id: p.id,
                features,
                source: p.source,
                target: p.target,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn task() -> SyntheticTask {
        SyntheticTask::new(SyntheticSpec::default()).unwrap()
    }

    #[test]
    fn lexicon_is_a_bijection() {
        let t = task();
        let mut b = t.bijection.clone();
        b.sort_unstable();
        assert_eq!(b, (0..40).collect::<Vec<_>>());
        let src: HashSet<_> = t.source_words.iter().collect();
        assert_eq!(src.len(), 40);
    }

    #[test]
    fn question_targets_are_reversed() {
        let t = task();
        let a = &t.source_words[0];
        let b = &t.source_words[1];
        let ta = &t.target_words[t.bijection[0]];
        let tb = &t.target_words[t.bijection[1]];
        assert_eq!(t.oracle_translate(&format!("{a} {b} ?")).unwrap(), format!("{tb} {ta} ?"));
        assert_eq!(t.oracle_translate(&format!("{a} {b} .")).unwrap(), format!("{ta} {tb} ."));
        assert_eq!(t.oracle_translate(&format!("{a} {b}")), None);
    }

    #[test]
    fn shapes_and_determinism() {
        let t = task();
        let x = t.triplet(7, Some(3)).unwrap();
        assert_eq!(x.features.shape(), &[4 * 4, 16]);
        assert_eq!(t.triplet(7, Some(3)).unwrap(), x);
        assert_eq!(t.oracle_translate(&x.source).unwrap(), x.target);
        assert!(t.triplet(0, Some(7)).is_err());
    }

    #[test]
    fn noiseless_features_depend_only_on_the_source() {
        let t = task();
        let x = t.triplet(3, None).unwrap();
        assert_eq!(t.features_for(&x.source, 99).unwrap(), x.features);
    }

    #[test]
    fn splits_are_disjoint_and_sized() {
        let t = task();
        let sizes = CorpusSizes {
            asr: 30,
            mt: 40,
            st: 20,
            text: 25,
            test: 15,
            corruption: 0.3,
        };
        let c = t.corpora(&sizes).unwrap();
        assert_eq!((c.asr.len(), c.mt.len(), c.st.len(), c.text.len(), c.test.len()), (30, 40, 20, 25, 15));
        assert_eq!(c.corrupted.len(), 6);
        let test: HashSet<_> = c.test.iter().map(|t| t.source.clone()).collect();
        for s in c.asr.iter().map(|t| &t.source).chain(c.mt.iter().map(|p| &p.source)).chain(c.text.iter().map(|p| &p.source)) {
            assert!(!test.contains(s));
        }
        for (i, x) in c.st.iter().enumerate() {
            let aligned = t.oracle_translate(&x.source).as_deref() == Some(x.target.as_str());
            assert_eq!(aligned, !c.corrupted.contains(&i));
        }
    }

    #[test]
    fn corpus_files_round_trip() {
        let t = task();
        let c = t
            .corpora(&CorpusSizes {
                asr: 3,
                mt: 2,
                st: 0,
                text: 0,
                test: 0,
                corruption: 0.0,
            })
            .unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_triplets(dir.path(), &c.asr).unwrap();
        assert_eq!(read_triplets(dir.path()).unwrap(), c.asr);
        let d2 = dir.path().join("mt");
        write_text_pairs(&d2, &c.mt).unwrap();
        assert_eq!(read_text_pairs(&d2).unwrap(), c.mt);
    }
}
