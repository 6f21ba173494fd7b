//! Text normalization and byte-pair-encoding tokenization.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;

const SPECIALS: [&str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];
const END_OF_WORD: &str = "</w>";

/// Characters removed by [`strip_punctuation`].
pub const PUNCTUATION: [char; 11] = ['.', ',', '?', '!', ';', ':', '"', '\'', '(', ')', '-'];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NormalizationRules {
    pub umlaut_map: Vec<(char, String)>,
    pub ascii_only: bool,
    pub lowercase: bool,
    pub strip_punct: bool,
    /// Words longer than this many characters are dropped (off by default).
    pub max_word_len: Option<usize>,
}

impl Default for NormalizationRules {
    fn default() -> Self {
        let map = [
            ('ä', "<ae>"),
            ('ö', "<oe>"),
            ('ü', "<ue>"),
            ('Ä', "<Ae>"),
            ('Ö', "<Oe>"),
            ('Ü', "<Ue>"),
            ('ß', "<ss>"),
        ];
        NormalizationRules {
            umlaut_map: map.iter().map(|&(c, s)| (c, s.to_string())).collect(),
            ascii_only: true,
            lowercase: false,
            strip_punct: false,
            max_word_len: None,
        }
    }
}

impl NormalizationRules {
    /// Rules producing the normalized (lowercase, punctuation-free) variant.
    pub fn normalized() -> Self {
        NormalizationRules {
            lowercase: true,
            strip_punct: true,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (c, s) in &self.umlaut_map {
            if self.ascii_only && !s.is_ascii() {
                return Err(Error::Config(format!("replacement for {c:?} is not ASCII")));
            }
            if s.chars().any(|c| c.is_whitespace()) {
                return Err(Error::Config(format!("replacement for {c:?} contains whitespace")));
            }
            if self.strip_punct && s.chars().any(|c| PUNCTUATION.contains(&c)) {
                return Err(Error::Config(format!("replacement for {c:?} contains punctuation")));
            }
        }
        Ok(())
    }
}

fn collapse_whitespace(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Applies the umlaut map, then non-ASCII removal, then lowercasing and
/// punctuation stripping, then the word-length filter; whitespace is collapsed.
pub fn normalize_text(s: &str, rules: &NormalizationRules) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match rules.umlaut_map.iter().find(|(k, _)| *k == c) {
            Some((_, rep)) => out.push_str(rep),
            None => out.push(c),
        }
    }
    if rules.ascii_only {
        out.retain(|c| c.is_ascii());
    }
    if rules.lowercase {
        out = out.to_lowercase();
    }
    if rules.strip_punct {
        out = strip_punctuation(&out);
    }
    match rules.max_word_len {
        Some(max) => out
            .split_whitespace()
            .filter(|w| w.chars().count() <= max)
            .collect::<Vec<_>>()
            .join(" "),
        None => collapse_whitespace(&out),
    }
}

/// Removes [`PUNCTUATION`] characters and lowercases.
pub fn strip_punctuation(s: &str) -> String {
    let kept: String = s.chars().filter(|c| !PUNCTUATION.contains(c)).collect();
    collapse_whitespace(&kept.to_lowercase())
}

/// Drops repeated lines, keeping first occurrences in order.
pub fn dedup_corpus<S: AsRef<str>>(lines: &[S]) -> Vec<String> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for l in lines {
        let l = l.as_ref();
        if seen.insert(l) {
            out.push(l.to_string());
        }
    }
    out
}

/// Initial symbols of a word: one per character, the last carrying the
/// end-of-word marker.
fn word_symbols(word: &str) -> Vec<String> {
    let chars: Vec<char> = word.chars().collect();
    chars
        .iter()
        .enumerate()
        .map(|(i, c)| {
            if i + 1 == chars.len() {
                format!("{c}{END_OF_WORD}")
            } else {
                c.to_string()
            }
        })
        .collect()
}

fn apply_merge(symbols: &mut Vec<String>, left: &str, right: &str) {
    let mut i = 0;
    while i + 1 < symbols.len() {
        if symbols[i] == left && symbols[i + 1] == right {
            let merged = format!("{left}{right}");
            symbols[i] = merged;
            symbols.remove(i + 1);
        }
        i += 1;
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BpeModel {
    merges: Vec<(String, String)>,
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
    ranks: HashMap<(String, String), usize>,
}

impl BpeModel {
    fn from_parts(merges: Vec<(String, String)>, tokens: Vec<String>) -> Result<Self> {
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i).is_some() {
                return Err(Error::format("BPE model", format!("duplicate token {t:?}")));
            }
        }
        for (i, s) in SPECIALS.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(s) {
                return Err(Error::format("BPE model", format!("token {i} must be {s}")));
            }
        }
        for (l, r) in &merges {
            if !ids.contains_key(&format!("{l}{r}")) {
                return Err(Error::format("BPE model", format!("merge output {l}{r} not in vocabulary")));
            }
        }
        let ranks = merges.iter().cloned().enumerate().map(|(i, m)| (m, i)).collect();
        Ok(BpeModel {
            merges,
            tokens,
            ids,
            ranks,
        })
    }

    /// Trains `merges` merge operations on the whitespace-split words of
    /// `corpus`. Ties between equally frequent pairs go to the
    /// lexicographically smallest pair; training stops early when no
    /// adjacent pair is left.
    pub fn train<S: AsRef<str>>(corpus: &[S], merges: usize) -> Result<Self> {
        let mut freq: BTreeMap<&str, usize> = BTreeMap::new();
        for line in corpus {
            for w in line.as_ref().split_whitespace() {
                *freq.entry(w).or_insert(0) += 1;
            }
        }
        if freq.is_empty() {
            return Err(Error::invalid("cannot train BPE on an empty corpus"));
        }
        let mut words: Vec<(Vec<String>, usize)> = freq.iter().map(|(w, &n)| (word_symbols(w), n)).collect();

        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        let alphabet: std::collections::BTreeSet<&String> = words.iter().flat_map(|(s, _)| s.iter()).collect();
        tokens.extend(alphabet.into_iter().cloned());
        let mut known: HashSet<String> = tokens.iter().cloned().collect();

        let mut learned = Vec::with_capacity(merges);
        for _ in 0..merges {
            let mut pairs: BTreeMap<(&str, &str), usize> = BTreeMap::new();
            for (syms, n) in &words {
                for p in syms.windows(2) {
                    *pairs.entry((p[0].as_str(), p[1].as_str())).or_insert(0) += n;
                }
            }
            // BTreeMap iterates in lexicographic order, so keeping only strict
            // improvements picks the smallest pair among the most frequent.
            let mut best: Option<((&str, &str), usize)> = None;
            for (&p, &c) in &pairs {
                if best.is_none_or(|(_, bc)| c > bc) {
                    best = Some((p, c));
                }
            }
            let Some(((l, r), _)) = best else { break };
            let (l, r) = (l.to_string(), r.to_string());
            for (syms, _) in &mut words {
                apply_merge(syms, &l, &r);
            }
            let merged = format!("{l}{r}");
            if known.insert(merged.clone()) {
                tokens.push(merged);
            }
            learned.push((l, r));
        }
        Self::from_parts(learned, tokens)
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.ids.get(token).copied()
    }

    /// Symbol strings of one word after applying merges in training order.
    fn segment(&self, word: &str) -> Vec<String> {
        let mut syms = word_symbols(word);
        loop {
            let best = syms
                .windows(2)
                .filter_map(|p| self.ranks.get(&(p[0].clone(), p[1].clone())).copied())
                .min();
            let Some(rank) = best else { break };
            let (l, r) = &self.merges[rank];
            apply_merge(&mut syms, l, r);
        }
        syms
    }

    /// Token ids for `s`; characters outside the training alphabet become
    /// `<unk>`. Never emits pad, bos or eos.
    pub fn encode(&self, s: &str) -> Vec<usize> {
        let mut out = Vec::new();
        for w in s.split_whitespace() {
            for sym in self.segment(w) {
                out.push(self.ids.get(&sym).copied().unwrap_or(UNK));
            }
        }
        out
    }

    /// Joins tokens, turning end-of-word markers into spaces. Pad, bos and
    /// eos are skipped; `<unk>` is shown literally.
    pub fn decode(&self, ids: &[usize]) -> String {
        let mut s = String::new();
        for &id in ids {
            if id == PAD || id == BOS || id == EOS {
                continue;
            }
            match self.tokens.get(id) {
                Some(t) => s.push_str(t),
                None => s.push_str(SPECIALS[UNK]),
            }
        }
        s.replace(END_OF_WORD, " ").trim_end().to_string()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("BPE v1\n");
        let _ = writeln!(s, "{}", self.merges.len());
        for (l, r) in &self.merges {
            let _ = writeln!(s, "{l} {r}");
        }
        s.push_str("VOCAB\n");
        for (i, t) in self.tokens.iter().enumerate() {
            let _ = writeln!(s, "{t}\t{i}");
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |d: String| Error::format("BPE model", d);
        let mut lines = text.lines();
        if lines.next() != Some("BPE v1") {
            return Err(bad("missing \"BPE v1\" header".into()));
        }
        let count: usize = lines
            .next()
            .and_then(|l| l.trim().parse().ok())
            .ok_or_else(|| bad("missing merge count".into()))?;
        let mut merges = Vec::with_capacity(count);
        for i in 0..count {
            let line = lines.next().ok_or_else(|| bad(format!("merge {i} missing")))?;
            let (l, r) = line
                .split_once(' ')
                .ok_or_else(|| bad(format!("merge line {line:?}")))?;
            merges.push((l.to_string(), r.to_string()));
        }
        if lines.next() != Some("VOCAB") {
            return Err(bad("missing VOCAB section".into()));
        }
        let mut tokens = Vec::new();
        for line in lines {
            let (t, id) = line
                .rsplit_once('\t')
                .ok_or_else(|| bad(format!("vocab line {line:?}")))?;
            let id: usize = id.parse().map_err(|_| bad(format!("vocab id {id:?}")))?;
            if id != tokens.len() {
                return Err(bad(format!("vocab ids must be dense, got {id} at {}", tokens.len())));
            }
            tokens.push(t.to_string());
        }
        Self::from_parts(merges, tokens)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn umlauts_and_ascii() {
        let rules = NormalizationRules::default();
        assert_eq!(normalize_text("schön", &rules), "sch<oe>n");
        assert_eq!(normalize_text("naïve☺", &rules), "nave");
        let s = "Grüße,  aus  Köln! ☺";
        let once = normalize_text(s, &rules);
        assert_eq!(normalize_text(&once, &rules), once);
        let norm = NormalizationRules::normalized();
        let once = normalize_text(s, &norm);
        assert_eq!(once, "gr<ue><ss>e aus k<oe>ln");
        assert_eq!(normalize_text(&once, &norm), once);
    }

    #[test]
    fn punctuation_stripping() {
        assert_eq!(strip_punctuation("Hello, world!"), "hello world");
        assert_eq!(strip_punctuation("Go?"), "go");
        assert_eq!(strip_punctuation("already plain"), "already plain");
    }

    #[test]
    fn long_word_filter() {
        let rules = NormalizationRules {
            max_word_len: Some(4),
            ..Default::default()
        };
        assert_eq!(normalize_text("ok aaaaaaa fine", &rules), "ok fine");
    }

    #[test]
    fn dedup_keeps_first() {
        assert_eq!(dedup_corpus(&["a", "b", "a"]), vec!["a", "b"]);
        assert_eq!(dedup_corpus(&["x", "y"]), vec!["x", "y"]);
        assert!(dedup_corpus::<&str>(&[]).is_empty());
    }

    #[test]
    fn hand_counted_merges() {
        let m = BpeModel::train(&["ab ab ab"], 1).unwrap();
        assert_eq!(m.merges(), &[("a".to_string(), "b</w>".to_string())]);
        let m = BpeModel::train(&["aa bb aa"], 1).unwrap();
        assert_eq!(m.merges(), &[("a".to_string(), "a</w>".to_string())]);
    }

    #[test]
    fn zero_merges_is_character_level() {
        let m = BpeModel::train(&["ab ba"], 0).unwrap();
        assert!(m.merges().is_empty());
        let toks: Vec<&str> = (4..m.vocab_size()).map(|i| m.token(i).unwrap()).collect();
        assert_eq!(toks, vec!["a", "a</w>", "b", "b</w>"]);
    }

    #[test]
    fn merged_encoding_and_unknowns() {
        // "abab" twice: (a,b), (b,a) and (a,b</w>) all occur twice; (a,b)
        // sorts first. Next round (ab,a) and (a,b</w>) tie, (a,b</w>) wins.
        let m = BpeModel::train(&["abab abab"], 2).unwrap();
        let pair = |l: &str, r: &str| (l.to_string(), r.to_string());
        assert_eq!(m.merges(), &[pair("a", "b"), pair("a", "b</w>")]);
        let ids = m.encode("abab");
        let toks: Vec<&str> = ids.iter().map(|&i| m.token(i).unwrap()).collect();
        assert_eq!(toks, vec!["ab", "ab</w>"]);
        assert_eq!(m.decode(&ids), "abab");

        let ids = m.encode("ax");
        assert_eq!(ids, vec![m.id("a").unwrap(), UNK]);
        assert_eq!(m.decode(&ids), "a<unk>");
    }

    #[test]
    fn file_round_trip() {
        let m = BpeModel::train(&["the cat sat", "on the mat"], 10).unwrap();
        let back = BpeModel::from_text(&m.to_text()).unwrap();
        assert_eq!(back, m);
        assert!(BpeModel::from_text("BPE v2\n0\nVOCAB\n").is_err());
    }

    #[test]
    fn empty_corpus_is_error() {
        assert!(BpeModel::train::<&str>(&[], 3).is_err());
        assert!(BpeModel::train(&["   "], 3).is_err());
    }
}
