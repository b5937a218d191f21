//! Pooled multilingual wordpiece inventory.
//!
//! Pieces use a `▁` prefix to mark the start of a whitespace-delimited word.
//! Text from logographic languages is split into single characters before
//! matching and never carries the marker, so decoding it inserts no spaces.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use crate::error::{Error, Result};

pub const BLANK: usize = 0;
pub const SOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const NUM_RESERVED: usize = 4;
pub const RESERVED: [&str; NUM_RESERVED] = ["<blank>", "<s>", "</s>", "<unk>"];
pub const WORD_MARKER: char = '▁';
pub const DEFAULT_COUNT_THRESHOLD: usize = 20;

/// Lowercase and collapse runs of whitespace to single spaces. Logographic
/// text drops whitespace altogether.
pub fn normalize(text: &str, logographic: bool) -> String {
    let lower = text.to_lowercase();
    if logographic {
        lower.chars().filter(|c| !c.is_whitespace()).collect()
    } else {
        lower.split_whitespace().collect::<Vec<_>>().join(" ")
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WordpieceVocab {
    pieces: Vec<String>,
    index: HashMap<String, usize>,
    max_piece_chars: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segmentation {
    pub ids: Vec<usize>,
    /// Characters that had no piece and were mapped to `<unk>`.
    pub unk_count: usize,
}

impl WordpieceVocab {
    /// Build from non-reserved pieces; reserved symbols are prepended.
    pub fn from_pieces<S: AsRef<str>>(pieces: &[S]) -> Result<Self> {
        let all: Vec<String> = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(pieces.iter().map(|p| p.as_ref().to_string()))
            .collect();
        Self::from_all(all)
    }

    fn from_all(pieces: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(pieces.len());
        for (i, p) in pieces.iter().enumerate() {
            if p.is_empty() || p.contains(['\n', '\r']) {
                return Err(Error::format("vocab", format!("bad piece at line {}", i + 1)));
            }
            if i < NUM_RESERVED && p != RESERVED[i] {
                return Err(Error::format("vocab", format!("line {} must be {}", i + 1, RESERVED[i])));
            }
            if index.insert(p.clone(), i).is_some() {
                return Err(Error::format("vocab", format!("duplicate piece {p:?}")));
            }
        }
        let max_piece_chars = pieces[NUM_RESERVED..]
            .iter()
            .map(|p| p.chars().count())
            .max()
            .unwrap_or(1);
        Ok(Self {
            pieces,
            index,
            max_piece_chars,
        })
    }

    pub fn len(&self) -> usize {
        self.pieces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pieces.is_empty()
    }

    pub fn piece(&self, id: usize) -> Option<&str> {
        self.pieces.get(id).map(String::as_str)
    }

    pub fn id(&self, piece: &str) -> Option<usize> {
        self.index.get(piece).copied()
    }

    pub fn pieces(&self) -> &[String] {
        &self.pieces
    }

    /// Segment normalized `text` by greedy longest match, left to right.
    pub fn segment(&self, text: &str, logographic: bool) -> Segmentation {
        let text = normalize(text, logographic);
        let mut ids = Vec::new();
        let mut unk_count = 0;
        if logographic {
            for c in text.chars() {
                match self.id(&c.to_string()) {
                    Some(i) if i >= NUM_RESERVED => ids.push(i),
                    _ => {
                        ids.push(UNK);
                        unk_count += 1;
                    }
                }
            }
            return Segmentation { ids, unk_count };
        }
        for word in text.split(' ').filter(|w| !w.is_empty()) {
            let chars: Vec<char> = std::iter::once(WORD_MARKER).chain(word.chars()).collect();
            let mut i = 0;
            while i < chars.len() {
                let mut found = None;
                let longest = self.max_piece_chars.min(chars.len() - i);
                for len in (1..=longest).rev() {
                    let cand: String = chars[i..i + len].iter().collect();
                    if let Some(id) = self.id(&cand).filter(|&id| id >= NUM_RESERVED) {
                        found = Some((id, len));
                        break;
                    }
                }
                match found {
                    Some((id, len)) => {
                        ids.push(id);
                        i += len;
                    }
                    None => {
                        ids.push(UNK);
                        unk_count += 1;
                        // a lone marker never stands alone; swallow the char after it
                        i += if chars[i] == WORD_MARKER { 2 } else { 1 };
                    }
                }
            }
        }
        Segmentation { ids, unk_count }
    }

    /// Concatenate pieces, turning word markers into spaces. A terminal
    /// `</s>` is stripped; any other reserved id is an error.
    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        let ids = match ids.last() {
            Some(&EOS) => &ids[..ids.len() - 1],
            _ => ids,
        };
        let mut out = String::new();
        for &id in ids {
            if id < NUM_RESERVED {
                return Err(Error::invalid(format!(
                    "reserved id {id} inside a token sequence"
                )));
            }
            let p = self
                .piece(id)
                .ok_or_else(|| Error::invalid(format!("token id {id} out of vocabulary")))?;
            out.push_str(p);
        }
        let spaced = out.replace(WORD_MARKER, " ");
        Ok(spaced.trim_start_matches(' ').to_string())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = self.pieces.join("\n");
        s.push('\n');
        std::fs::write(path, s)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let pieces: Vec<String> = text.lines().map(str::to_string).collect();
        if pieces.len() < NUM_RESERVED {
            return Err(Error::format("vocab", "fewer lines than reserved symbols"));
        }
        Self::from_all(pieces)
    }
}

/// One transcript fed to the learner.
#[derive(Clone, Copy, Debug)]
pub struct TrainText<'a> {
    pub text: &'a str,
    pub logographic: bool,
}

type Pair = (String, String);

/// Learn a vocabulary of at most `target_size` entries by frequency-greedy
/// pair merging. Words seen fewer than `count_threshold` times contribute
/// only their characters. Ties go to the lexicographically smallest pair.
pub fn train_wordpieces(
    corpus: &[TrainText<'_>],
    target_size: usize,
    count_threshold: usize,
) -> Result<WordpieceVocab> {
    if corpus.is_empty() {
        return Err(Error::invalid("empty training corpus"));
    }
    let (base, words) = collect_words(corpus);
    if target_size < NUM_RESERVED + base.len() {
        return Err(Error::invalid(format!(
            "target size {target_size} cannot cover {} reserved symbols and {} characters",
            NUM_RESERVED,
            base.len()
        )));
    }

    let mut pieces: Vec<String> = base;
    let mut known: HashSet<String> = pieces.iter().cloned().collect();
    let mut seqs: Vec<(Vec<String>, usize)> = words
        .into_iter()
        .filter(|(_, c)| *c >= count_threshold)
        .map(|(w, c)| (word_symbols(&w), c))
        .collect();

    let mut counts: HashMap<Pair, usize> = HashMap::new();
    let mut where_: HashMap<Pair, HashSet<usize>> = HashMap::new();
    for (wi, (syms, c)) in seqs.iter().enumerate() {
        for p in syms.windows(2) {
            let key = (p[0].clone(), p[1].clone());
            *counts.entry(key.clone()).or_default() += c;
            where_.entry(key).or_default().insert(wi);
        }
    }

    while NUM_RESERVED + pieces.len() < target_size {
        let Some(best) = best_pair(&counts) else { break };
        let merged = format!("{}{}", best.0, best.1);
        let mut affected: Vec<usize> = where_.remove(&best).unwrap_or_default().into_iter().collect();
        affected.sort_unstable();
        for wi in affected {
            let (syms, c) = &mut seqs[wi];
            for p in syms.windows(2) {
                let key = (p[0].clone(), p[1].clone());
                if let Some(n) = counts.get_mut(&key) {
                    *n -= *c;
                    if *n == 0 {
                        counts.remove(&key);
                    }
                }
            }
            *syms = merge_symbols(syms, &best, &merged);
            for p in syms.windows(2) {
                let key = (p[0].clone(), p[1].clone());
                *counts.entry(key.clone()).or_default() += *c;
                where_.entry(key).or_default().insert(wi);
            }
        }
        counts.remove(&best);
        if known.insert(merged.clone()) {
            pieces.push(merged);
        }
    }
    WordpieceVocab::from_pieces(&pieces)
}

/// Sorted base alphabet plus word counts in first-seen order.
fn collect_words(corpus: &[TrainText<'_>]) -> (Vec<String>, Vec<(String, usize)>) {
    let mut chars: Vec<char> = Vec::new();
    let mut seen_chars = HashSet::new();
    let mut order: Vec<String> = Vec::new();
    let mut counts: HashMap<String, usize> = HashMap::new();
    for t in corpus {
        let norm = normalize(t.text, t.logographic);
        for c in norm.chars().filter(|c| *c != ' ') {
            if seen_chars.insert(c) {
                chars.push(c);
            }
        }
        if t.logographic {
            continue;
        }
        for w in norm.split(' ').filter(|w| !w.is_empty()) {
            let n = counts.entry(w.to_string()).or_insert_with(|| {
                order.push(w.to_string());
                0
            });
            *n += 1;
        }
    }
    chars.sort_unstable();
    let mut base = Vec::with_capacity(chars.len() * 2);
    for c in chars {
        base.push(format!("{WORD_MARKER}{c}"));
        base.push(c.to_string());
    }
    let words = order
        .into_iter()
        .map(|w| {
            let c = counts[&w];
            (w, c)
        })
        .collect();
    (base, words)
}

fn word_symbols(word: &str) -> Vec<String> {
    word.chars()
        .enumerate()
        .map(|(i, c)| {
            if i == 0 {
                format!("{WORD_MARKER}{c}")
            } else {
                c.to_string()
            }
        })
        .collect()
}

fn merge_symbols(syms: &[String], pair: &Pair, merged: &str) -> Vec<String> {
    let mut out = Vec::with_capacity(syms.len());
    let mut i = 0;
    while i < syms.len() {
        if i + 1 < syms.len() && syms[i] == pair.0 && syms[i + 1] == pair.1 {
            out.push(merged.to_string());
            i += 2;
        } else {
            out.push(syms[i].clone());
            i += 1;
        }
    }
    out
}

fn best_pair(counts: &HashMap<Pair, usize>) -> Option<Pair> {
    counts
        .iter()
        .filter(|(_, &c)| c > 0)
        .max_by(|(a, ca), (b, cb)| ca.cmp(cb).then_with(|| b.cmp(a)))
        .map(|(p, _)| p.clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn texts(list: &[(&'static str, usize)]) -> Vec<TrainText<'static>> {
        list.iter()
            .flat_map(|&(t, n)| {
                std::iter::repeat_n(
                    TrainText {
                        text: t,
                        logographic: false,
                    },
                    n,
                )
            })
            .collect()
    }

    #[test]
    fn threshold_gates_whole_word_pieces() {
        let corpus = texts(&[("aa", 25), ("bb", 19)]);
        let v = train_wordpieces(&corpus, 100, 20).unwrap();
        assert!(v.id("▁aa").is_some());
        assert!(v.id("▁bb").is_none());
        assert!(v.id("▁b").is_some() && v.id("b").is_some());
    }

    #[test]
    fn single_repeated_word() {
        let corpus = texts(&[("ab", 30)]);
        let v = train_wordpieces(&corpus, 100, 20).unwrap();
        let expected = ["<blank>", "<s>", "</s>", "<unk>", "▁a", "a", "▁b", "b", "▁ab"];
        assert_eq!(v.pieces(), expected);
    }

    #[test]
    fn target_too_small() {
        let corpus = texts(&[("abc", 30)]);
        assert!(train_wordpieces(&corpus, 9, 20).is_err());
        assert!(train_wordpieces(&corpus, 10, 20).is_ok());
        assert!(train_wordpieces(&[], 10, 20).is_err());
    }

    #[test]
    fn longest_match_trace() {
        let v = WordpieceVocab::from_pieces(&["▁a", "b", "▁ab", "▁abab", "a", "ab"]).unwrap();
        let s = v.segment("abab", false);
        assert_eq!(s.ids, vec![v.id("▁abab").unwrap()]);
        let s = v.segment("ababab", false);
        assert_eq!(s.ids, vec![v.id("▁abab").unwrap(), v.id("ab").unwrap()]);
    }

    #[test]
    fn logographic_text_is_split_to_characters() {
        let v = WordpieceVocab::from_pieces(&["x", "y", "xy", "▁x", "▁y"]).unwrap();
        let s = v.segment("XY", true);
        assert_eq!(s.ids, vec![v.id("x").unwrap(), v.id("y").unwrap()]);
        assert_eq!(v.decode(&s.ids).unwrap(), "xy");
    }

    #[test]
    fn unknown_characters_become_unk() {
        let v = WordpieceVocab::from_pieces(&["▁a", "a"]).unwrap();
        let s = v.segment("aza q", false);
        assert_eq!(s.unk_count, 2);
        assert!(s.ids.contains(&UNK));
    }

    #[test]
    fn decode_rules() {
        let v = WordpieceVocab::from_pieces(&["▁ab", "c", "▁d"]).unwrap();
        assert_eq!(v.decode(&[]).unwrap(), "");
        assert_eq!(v.decode(&[4, 5, 6]).unwrap(), "abc d");
        assert_eq!(v.decode(&[4, 5, 6, EOS]).unwrap(), "abc d");
        assert!(v.decode(&[4, EOS, 5]).is_err());
        assert!(v.decode(&[4, BLANK]).is_err());
        assert!(v.decode(&[99]).is_err());
    }

    #[test]
    fn normalization() {
        assert_eq!(normalize("  Hello \t World ", false), "hello world");
        assert_eq!(normalize("文 字", true), "文字");
    }

    #[test]
    fn vocab_file_roundtrip() {
        let corpus = texts(&[("hello world", 25), ("help", 21)]);
        let v = train_wordpieces(&corpus, 40, 20).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vocab.txt");
        v.save(&p).unwrap();
        assert_eq!(WordpieceVocab::load(&p).unwrap(), v);
        std::fs::write(&p, "<blank>\n<s>\n").unwrap();
        assert!(WordpieceVocab::load(&p).is_err());
    }
}
