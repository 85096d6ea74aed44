//! Greedy longest-match WordPiece tokenization.
//!
//! Text is NFC-normalized, split on whitespace, and leading/trailing ASCII
//! punctuation is split off as separate words. Each word is then segmented
//! greedily: the longest matching vocabulary entry wins at every position,
//! word-initial form first, continuation form (`##` prefix) afterwards. A
//! word with any unmatchable remainder becomes a single `[UNK]`.

use std::collections::HashMap;
use std::path::Path;

use unicode_normalization::UnicodeNormalization;

use crate::{Error, Result};

pub const CLS_TOKEN: &str = "[CLS]";
pub const UNK_TOKEN: &str = "[UNK]";
pub const PAD_TOKEN: &str = "[PAD]";
pub const CONTINUATION_PREFIX: &str = "##";
pub const DEFAULT_MAX_LEN: usize = 512;

/// Immutable token table; ids are dense zero-based line indices.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    tokens: Vec<String>,
    token_to_id: HashMap<String, u32>,
    cls_id: u32,
    unk_id: u32,
    pad_id: u32,
}

impl Vocabulary {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut token_to_id = HashMap::with_capacity(tokens.len());
        for (id, token) in tokens.iter().enumerate() {
            if token.is_empty() {
                return Err(Error::data(format!("empty vocabulary token at line {id}")));
            }
            if token_to_id.insert(token.clone(), id as u32).is_some() {
                return Err(Error::data(format!("duplicate vocabulary token {token:?}")));
            }
        }
        let special = |name: &str| {
            token_to_id
                .get(name)
                .copied()
                .ok_or_else(|| Error::data(format!("vocabulary is missing {name}")))
        };
        Ok(Vocabulary {
            cls_id: special(CLS_TOKEN)?,
            unk_id: special(UNK_TOKEN)?,
            pad_id: special(PAD_TOKEN)?,
            tokens,
            token_to_id,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id_of(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    pub fn token_of(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn cls_id(&self) -> u32 {
        self.cls_id
    }

    pub fn unk_id(&self) -> u32 {
        self.unk_id
    }

    pub fn pad_id(&self) -> u32 {
        self.pad_id
    }

    /// Word-initial, non-special tokens (the usable whole words).
    pub fn word_tokens(&self) -> impl Iterator<Item = &str> {
        self.tokens.iter().map(String::as_str).filter(|t| {
            !t.starts_with(CONTINUATION_PREFIX) && !matches!(*t, CLS_TOKEN | UNK_TOKEN | PAD_TOKEN)
        })
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// Reads a vocabulary file: one token per line, id = line index.
pub fn load_vocab(path: &Path) -> Result<Vocabulary> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::data(format!("cannot read vocabulary {}: {e}", path.display())))?;
    Vocabulary::from_tokens(text.lines().map(str::to_string).collect())
}

pub fn save_vocab(path: &Path, vocab: &Vocabulary) -> Result<()> {
    let mut out = String::new();
    for token in vocab.tokens() {
        out.push_str(token);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// One source word and the piece ids it segmented into.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WordTokens {
    pub word: String,
    pub ids: Vec<u32>,
}

/// A `[CLS]`-prefixed, length-limited piece sequence.
///
/// `word_spans[k] = (s, e)` means word `k` produced the pieces at
/// `ids[1 + s .. 1 + e]` (piece coordinates exclude the CLS slot).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub word_spans: Vec<(usize, usize)>,
    pub words: Vec<String>,
}

impl TokenSequence {
    pub fn cls_position(&self) -> usize {
        0
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Piece count excluding the CLS slot.
    pub fn piece_len(&self) -> usize {
        self.ids.len() - 1
    }
}

/// NFC normalization, whitespace split, then leading/trailing ASCII
/// punctuation split off as separate words.
pub fn pre_tokenize(text: &str) -> Vec<String> {
    let normalized: String = text.nfc().collect();
    let mut words = Vec::new();
    for raw in normalized.split_whitespace() {
        let chars: Vec<char> = raw.chars().collect();
        let mut start = 0;
        let mut end = chars.len();
        let mut leading = Vec::new();
        while start < end && chars[start].is_ascii_punctuation() {
            leading.push(chars[start].to_string());
            start += 1;
        }
        let mut trailing = Vec::new();
        while end > start && chars[end - 1].is_ascii_punctuation() {
            trailing.push(chars[end - 1].to_string());
            end -= 1;
        }
        words.extend(leading);
        if start < end {
            words.push(chars[start..end].iter().collect());
        }
        words.extend(trailing.into_iter().rev());
    }
    words
}

fn segment_word(word: &str, vocab: &Vocabulary) -> Vec<u32> {
    let chars: Vec<char> = word.chars().collect();
    let mut pieces = Vec::new();
    let mut pos = 0;
    while pos < chars.len() {
        let mut matched = None;
        for end in (pos + 1..=chars.len()).rev() {
            let core: String = chars[pos..end].iter().collect();
            let candidate =
                if pos == 0 { core } else { format!("{CONTINUATION_PREFIX}{core}") };
            if let Some(id) = vocab.id_of(&candidate) {
                matched = Some((id, end));
                break;
            }
        }
        match matched {
            Some((id, end)) => {
                pieces.push(id);
                pos = end;
            }
            None => return vec![vocab.unk_id()],
        }
    }
    pieces
}

/// Greedy longest-match segmentation of every word; no CLS, no truncation.
pub fn tokenize(text: &str, vocab: &Vocabulary) -> Vec<WordTokens> {
    pre_tokenize(text)
        .into_iter()
        .map(|word| {
            let ids = segment_word(&word, vocab);
            WordTokens { word, ids }
        })
        .collect()
}

/// Full encoding: tokenize, prepend `[CLS]`, and truncate to `max_len` total
/// ids. A word whose pieces would cross the limit is dropped entirely.
pub fn encode_recipe(text: &str, vocab: &Vocabulary, max_len: usize) -> TokenSequence {
    assert!(max_len >= 1, "max_len must fit at least the CLS id");
    let mut ids = vec![vocab.cls_id()];
    let mut word_spans = Vec::new();
    let mut words = Vec::new();
    let mut piece_cursor = 0;
    for wt in tokenize(text, vocab) {
        if ids.len() + wt.ids.len() > max_len {
            break;
        }
        let span = (piece_cursor, piece_cursor + wt.ids.len());
        piece_cursor = span.1;
        ids.extend_from_slice(&wt.ids);
        word_spans.push(span);
        words.push(wt.word);
    }
    TokenSequence { ids, word_spans, words }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab(tokens: &[&str]) -> Vocabulary {
        let mut all = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string(), CLS_TOKEN.to_string()];
        all.extend(tokens.iter().map(|t| t.to_string()));
        Vocabulary::from_tokens(all).unwrap()
    }

    #[test]
    fn minimal_vocab_loads() {
        let v = vocab(&["a", "##b"]);
        assert_eq!(v.len(), 5);
        assert_eq!(v.cls_id(), 2);
        assert_eq!(v.unk_id(), 1);
        assert_eq!(v.pad_id(), 0);
    }

    #[test]
    fn duplicate_token_rejected() {
        let tokens = ["[PAD]", "[UNK]", "[CLS]", "a", "a"];
        let err = Vocabulary::from_tokens(tokens.iter().map(|t| t.to_string()).collect());
        assert!(err.is_err());
    }

    #[test]
    fn missing_special_rejected() {
        let tokens = ["[PAD]", "[UNK]", "a"];
        let err =
            Vocabulary::from_tokens(tokens.iter().map(|t| t.to_string()).collect()).unwrap_err();
        assert!(err.to_string().contains("[CLS]"));
    }

    #[test]
    fn vocab_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let v = vocab(&["salt", "##y"]);
        save_vocab(&path, &v).unwrap();
        let loaded = load_vocab(&path).unwrap();
        assert_eq!(loaded.tokens(), v.tokens());
    }

    #[test]
    fn empty_text_tokenizes_to_nothing() {
        let v = vocab(&["a"]);
        assert!(tokenize("", &v).is_empty());
        let seq = encode_recipe("", &v, 512);
        assert_eq!(seq.ids, vec![v.cls_id()]);
        assert!(seq.word_spans.is_empty());
    }

    #[test]
    fn greedy_longest_match_segments_unaffable() {
        let v = vocab(&["un", "##aff", "##able", "##a", "##ff"]);
        let out = tokenize("unaffable", &v);
        assert_eq!(out.len(), 1);
        let ids: Vec<&str> = out[0].ids.iter().map(|&i| v.token_of(i)).collect();
        assert_eq!(ids, vec!["un", "##aff", "##able"]);
        let seq = encode_recipe("unaffable", &v, 512);
        assert_eq!(seq.word_spans, vec![(0, 3)]);
    }

    #[test]
    fn unmatchable_word_is_single_unk() {
        let v = vocab(&["un", "##aff"]);
        let out = tokenize("unaffable", &v);
        assert_eq!(out[0].ids, vec![v.unk_id()]);
        let out = tokenize("zzz", &v);
        assert_eq!(out[0].ids, vec![v.unk_id()]);
        let seq = encode_recipe("zzz", &v, 512);
        assert_eq!(seq.word_spans, vec![(0, 1)]);
    }

    #[test]
    fn punctuation_splits_off_as_words() {
        let v = vocab(&["hello", "(", ")", ","]);
        let words = pre_tokenize("(hello),");
        assert_eq!(words, vec!["(", "hello", ")", ","]);
        let out = tokenize("(hello),", &v);
        assert_eq!(out.len(), 4);
        assert!(out.iter().all(|w| w.ids.len() == 1));
    }

    #[test]
    fn interior_punctuation_stays_in_word() {
        assert_eq!(pre_tokenize("it's fine"), vec!["it's", "fine"]);
    }

    #[test]
    fn case_is_preserved() {
        let v = vocab(&["Pasta", "pasta"]);
        let upper = tokenize("Pasta", &v);
        let lower = tokenize("pasta", &v);
        assert_ne!(upper[0].ids, lower[0].ids);
    }

    #[test]
    fn truncation_fits_511_pieces_exactly() {
        let v = vocab(&["a"]);
        let text = vec!["a"; 511].join(" ");
        let seq = encode_recipe(&text, &v, 512);
        assert_eq!(seq.ids.len(), 512);
        assert_eq!(seq.word_spans.len(), 511);
    }

    #[test]
    fn truncation_drops_partial_words_whole() {
        let v = vocab(&["ab", "##cd"]);
        // Each word is 2 pieces; 600 pieces of input must truncate to a
        // whole-word boundary within the 512 budget.
        let text = vec!["abcd"; 300].join(" ");
        let seq = encode_recipe(&text, &v, 512);
        assert!(seq.ids.len() <= 512);
        // 1 + 2k <= 512 → k = 255 words, 511 pieces.
        assert_eq!(seq.ids.len(), 511);
        assert_eq!(seq.word_spans.len(), 255);
        let last = *seq.word_spans.last().unwrap();
        assert_eq!(last.1 - last.0, 2);
        assert_eq!(last.1 + 1, seq.ids.len());
    }

    #[test]
    fn spans_cover_all_pieces_contiguously() {
        let v = vocab(&["un", "##aff", "##able", "salt", "boil"]);
        let seq = encode_recipe("salt unaffable boil zzz", &v, 512);
        let mut cursor = 0;
        for &(s, e) in &seq.word_spans {
            assert_eq!(s, cursor);
            assert!(e > s);
            cursor = e;
        }
        assert_eq!(cursor, seq.piece_len());
    }

    #[test]
    fn span_pieces_reconstruct_in_vocab_words() {
        let v = vocab(&["un", "##aff", "##able", "salt"]);
        let seq = encode_recipe("salt unaffable", &v, 512);
        for (k, &(s, e)) in seq.word_spans.iter().enumerate() {
            let mut rebuilt = String::new();
            for id in &seq.ids[1 + s..1 + e] {
                rebuilt.push_str(v.token_of(*id).trim_start_matches(CONTINUATION_PREFIX));
            }
            assert_eq!(rebuilt, seq.words[k]);
        }
    }

    #[test]
    fn truncation_monotonicity() {
        let v = vocab(&["un", "##aff", "##able", "salt", "boil"]);
        let text = "salt unaffable boil salt unaffable boil";
        let long = encode_recipe(text, &v, 64);
        for m in 1..=64 {
            let short = encode_recipe(text, &v, m);
            assert!(short.ids.len() <= m.max(1));
            assert_eq!(short.ids[..], long.ids[..short.ids.len()]);
        }
    }

    #[test]
    fn determinism() {
        let v = vocab(&["un", "##aff", "##able", "salt", "boil"]);
        let a = encode_recipe("salt unaffable boil", &v, 512);
        let b = encode_recipe("salt unaffable boil", &v, 512);
        assert_eq!(a, b);
    }

    #[test]
    fn greedy_property_no_longer_match_exists() {
        // Brute-force check: at each emitted piece's start, no longer
        // vocabulary entry matches.
        let v = vocab(&["ab", "abc", "##c", "##cd", "##d", "x"]);
        for word in ["abcd", "abccd", "abcx", "ababc"] {
            let out = tokenize(word, &v);
            if out[0].ids == vec![v.unk_id()] {
                continue;
            }
            let chars: Vec<char> = word.chars().collect();
            let mut pos = 0;
            for &id in &out[0].ids {
                let piece = v.token_of(id);
                let core = piece.trim_start_matches(CONTINUATION_PREFIX);
                let core_len = core.chars().count();
                for longer in core_len + 1..=chars.len() - pos {
                    let cand: String = chars[pos..pos + longer].iter().collect();
                    let cand = if pos == 0 {
                        cand
                    } else {
                        format!("{CONTINUATION_PREFIX}{cand}")
                    };
                    assert!(
                        v.id_of(&cand).is_none(),
                        "{piece} emitted but longer {cand} exists"
                    );
                }
                pos += core_len;
            }
        }
    }
}
