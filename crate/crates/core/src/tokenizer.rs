//! Greedy longest-match subword tokenizer with frequency-merge training.
//!
//! Text is first cut into chunks: a maximal run of word characters
//! (alphanumerics and `_`), or a single other character. A single space
//! directly in front of a chunk is fused onto its first symbol, so `" a"`
//! is one base symbol. Any other whitespace becomes a one-symbol chunk of
//! its own. Merges never cross chunk boundaries.
//!
//! The literal strings `[PAD]`, `[CLS]`, `[MASK]`, `[SEP]` and `[UNK]` are
//! recognised anywhere in the input and map straight to their reserved ids;
//! one space immediately before such a literal is absorbed.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const PAD_ID: TokenId = 0;
pub const CLS_ID: TokenId = 1;
pub const MASK_ID: TokenId = 2;
pub const SEP_ID: TokenId = 3;
pub const UNK_ID: TokenId = 4;

pub const PAD: &str = "[PAD]";
pub const CLS: &str = "[CLS]";
pub const MASK: &str = "[MASK]";
pub const SEP: &str = "[SEP]";
pub const UNK: &str = "[UNK]";

/// Reserved tokens in id order.
pub const SPECIALS: [&str; 5] = [PAD, CLS, MASK, SEP, UNK];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    token_to_id: HashMap<String, TokenId>,
    id_to_token: Vec<String>,
    max_token_chars: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Segment {
    Special(TokenId),
    Chunk(Vec<String>),
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_'
}

fn split_specials(text: &str) -> Vec<(Option<TokenId>, &str)> {
    let mut out = Vec::new();
    let mut rest = text;
    while !rest.is_empty() {
        let hit = SPECIALS
            .iter()
            .enumerate()
            .filter_map(|(id, lit)| rest.find(lit).map(|pos| (pos, id, lit.len())))
            .min();
        match hit {
            Some((pos, id, len)) => {
                let mut before = &rest[..pos];
                if let Some(stripped) = before.strip_suffix(' ') {
                    before = stripped;
                }
                if !before.is_empty() {
                    out.push((None, before));
                }
                out.push((Some(id as TokenId), ""));
                rest = &rest[pos + len..];
            }
            None => {
                out.push((None, rest));
                break;
            }
        }
    }
    out
}

fn chunk_plain(text: &str, out: &mut Vec<Segment>) {
    let chars: Vec<char> = text.chars().collect();
    let mut i = 0;
    while i < chars.len() {
        let mut lead = false;
        if chars[i] == ' ' && i + 1 < chars.len() && !chars[i + 1].is_whitespace() {
            lead = true;
            i += 1;
        } else if chars[i].is_whitespace() {
            out.push(Segment::Chunk(vec![chars[i].to_string()]));
            i += 1;
            continue;
        }
        let start = i;
        if is_word_char(chars[i]) {
            while i < chars.len() && is_word_char(chars[i]) {
                i += 1;
            }
        } else {
            i += 1;
        }
        let mut symbols: Vec<String> = chars[start..i].iter().map(|c| c.to_string()).collect();
        if lead {
            symbols[0].insert(0, ' ');
        }
        out.push(Segment::Chunk(symbols));
    }
}

fn segment(text: &str) -> Vec<Segment> {
    let mut out = Vec::new();
    for (special, span) in split_specials(text) {
        match special {
            Some(id) => out.push(Segment::Special(id)),
            None => chunk_plain(span, &mut out),
        }
    }
    out
}

impl Vocabulary {
    /// Full token list, specials first, as written by [`Vocabulary::save`].
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < SPECIALS.len() {
            return Err(Error::InvalidVocab(format!(
                "expected at least {} entries, found {}",
                SPECIALS.len(),
                tokens.len()
            )));
        }
        for (i, lit) in SPECIALS.iter().enumerate() {
            if tokens[i] != *lit {
                return Err(Error::InvalidVocab(format!(
                    "line {} must be {lit}, found {:?}",
                    i + 1,
                    tokens[i]
                )));
            }
        }
        let mut token_to_id = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if token_to_id.insert(t.clone(), i as TokenId).is_some() {
                return Err(Error::InvalidVocab(format!(
                    "duplicate token {t:?} on line {}",
                    i + 1
                )));
            }
        }
        let max_token_chars = tokens[SPECIALS.len()..]
            .iter()
            .map(|t| t.chars().count())
            .max()
            .unwrap_or(0);
        Ok(Self {
            token_to_id,
            id_to_token: tokens,
            max_token_chars,
        })
    }

    /// A vocabulary holding the specials followed by `tokens` in order.
    pub fn with_tokens<S: AsRef<str>>(tokens: &[S]) -> Result<Self> {
        let mut all: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        all.extend(tokens.iter().map(|t| t.as_ref().to_string()));
        Self::from_tokens(all)
    }

    pub fn size(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    pub fn is_special(id: TokenId) -> bool {
        (id as usize) < SPECIALS.len()
    }

    /// Greedy longest-match segmentation. Never fails; unmatched base
    /// symbols become [`UNK_ID`].
    pub fn tokenize(&self, text: &str) -> Vec<TokenId> {
        let mut ids = Vec::new();
        for seg in segment(text) {
            match seg {
                Segment::Special(id) => ids.push(id),
                Segment::Chunk(symbols) => self.match_chunk(&symbols, &mut ids),
            }
        }
        ids
    }

    fn match_chunk(&self, symbols: &[String], ids: &mut Vec<TokenId>) {
        let mut p = 0;
        while p < symbols.len() {
            let longest = (symbols.len() - p).min(self.max_token_chars.max(1));
            let mut matched = None;
            for q in (p + 1..=p + longest).rev() {
                let candidate: String = symbols[p..q].concat();
                if let Some(&id) = self.token_to_id.get(&candidate) {
                    if !Self::is_special(id) {
                        matched = Some((id, q));
                        break;
                    }
                }
            }
            match matched {
                Some((id, q)) => {
                    ids.push(id);
                    p = q;
                }
                None => {
                    ids.push(UNK_ID);
                    p += 1;
                }
            }
        }
    }

    /// `[CLS] tokens [SEP]`.
    pub fn encode_sequence(&self, text: &str) -> Vec<TokenId> {
        let mut ids = Vec::with_capacity(text.len() / 2 + 2);
        ids.push(CLS_ID);
        ids.extend(self.tokenize(text));
        ids.push(SEP_ID);
        ids
    }

    /// Concatenates token strings, skipping `[PAD]` and `[UNK]`.
    pub fn decode(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .filter(|&&id| id != PAD_ID && id != UNK_ID)
            .filter_map(|&id| self.token(id))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for t in &self.id_to_token {
            out.push_str(&escape(t));
            out.push('\n');
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let body = text.strip_suffix('\n').unwrap_or(&text);
        let tokens = body
            .split('\n')
            .enumerate()
            .map(|(i, line)| {
                unescape(line).ok_or_else(|| Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: "bad escape sequence".into(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_tokens(tokens)
    }
}

fn escape(t: &str) -> String {
    let mut s = String::with_capacity(t.len());
    for c in t.chars() {
        match c {
            '\\' => s.push_str("\\\\"),
            '\n' => s.push_str("\\n"),
            '\r' => s.push_str("\\r"),
            '\t' => s.push_str("\\t"),
            c => s.push(c),
        }
    }
    s
}

fn unescape(line: &str) -> Option<String> {
    let mut s = String::with_capacity(line.len());
    let mut it = line.chars();
    while let Some(c) = it.next() {
        if c == '\\' {
            match it.next()? {
                '\\' => s.push('\\'),
                'n' => s.push('\n'),
                'r' => s.push('\r'),
                't' => s.push('\t'),
                _ => return None,
            }
        } else {
            s.push(c);
        }
    }
    Some(s)
}

/// Learns a vocabulary by repeatedly merging the most frequent adjacent
/// symbol pair (ties: lexicographically smallest pair) until `target_size`
/// entries exist or no pair occurs at least twice.
pub fn train_vocab<S: AsRef<str>>(corpus: &[S], target_size: usize) -> Result<Vocabulary> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut word_counts: HashMap<Vec<String>, usize> = HashMap::new();
    for text in corpus {
        for seg in segment(text.as_ref()) {
            if let Segment::Chunk(symbols) = seg {
                *word_counts.entry(symbols).or_default() += 1;
            }
        }
    }
    let mut alphabet: Vec<String> = word_counts.keys().flatten().cloned().collect();
    alphabet.sort();
    alphabet.dedup();

    let minimum = SPECIALS.len() + alphabet.len();
    if target_size < minimum {
        return Err(Error::VocabTooSmall {
            requested: target_size,
            minimum,
        });
    }

    let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
    tokens.extend(alphabet);
    let mut known: std::collections::HashSet<String> = tokens.iter().cloned().collect();

    let mut words: Vec<(Vec<String>, usize)> = word_counts.into_iter().collect();
    words.sort();

    while tokens.len() < target_size {
        let mut pair_counts: HashMap<(&str, &str), usize> = HashMap::new();
        for (symbols, count) in &words {
            for w in symbols.windows(2) {
                *pair_counts.entry((&w[0], &w[1])).or_default() += count;
            }
        }
        let best = pair_counts
            .into_iter()
            .max_by(|(pa, ca), (pb, cb)| ca.cmp(cb).then_with(|| pb.cmp(pa)));
        let Some(((left, right), count)) = best else {
            break;
        };
        if count < 2 {
            break;
        }
        let (left, right) = (left.to_string(), right.to_string());
        let merged = format!("{left}{right}");
        for (symbols, _) in &mut words {
            merge_pair(symbols, &left, &right, &merged);
        }
        if known.insert(merged.clone()) {
            tokens.push(merged);
        }
    }
    Vocabulary::from_tokens(tokens)
}

fn merge_pair(symbols: &mut Vec<String>, left: &str, right: &str, merged: &str) {
    if symbols.len() < 2 {
        return;
    }
    let mut out = Vec::with_capacity(symbols.len());
    let mut i = 0;
    while i < symbols.len() {
        if i + 1 < symbols.len() && symbols[i] == left && symbols[i + 1] == right {
            out.push(merged.to_string());
            i += 2;
        } else {
            out.push(std::mem::take(&mut symbols[i]));
            i += 1;
        }
    }
    *symbols = out;
}

/// Pads with [`PAD_ID`] or truncates at the end to exactly `n` ids.
/// Returns the sequence and the number of original ids kept.
pub fn pad_or_truncate(ids: &[TokenId], n: usize) -> Result<(Vec<TokenId>, usize)> {
    if n < 1 {
        return Err(Error::Config("sequence length must be at least 1".into()));
    }
    let valid = ids.len().min(n);
    let mut out = ids[..valid].to_vec();
    out.resize(n, PAD_ID);
    Ok((out, valid))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spec_count() -> usize {
        SPECIALS.len()
    }

    #[test]
    fn abab_learns_ab() {
        let v = train_vocab(&["abab"], spec_count() + 3).unwrap();
        assert_eq!(v.size(), spec_count() + 3);
        for t in ["a", "b", "ab"] {
            assert!(v.id(t).is_some(), "missing {t}");
        }
    }

    #[test]
    fn single_symbol_corpus() {
        let v = train_vocab(&["x"], spec_count() + 1).unwrap();
        assert_eq!(&v.tokens()[spec_count()..], &["x".to_string()]);
    }

    #[test]
    fn int_is_merged() {
        let v = train_vocab(&["int a;", "int b;"], spec_count() + 8).unwrap();
        assert!(v.id("int").is_some());
        // hand trace: base {" a"," b",";","i","n","t"}, merges "in" then "int"
        assert_eq!(
            &v.tokens()[spec_count()..],
            &[" a", " b", ";", "i", "n", "t", "in", "int"]
        );
    }

    #[test]
    fn empty_corpus_is_rejected() {
        let empty: [&str; 0] = [];
        assert!(matches!(train_vocab(&empty, 100), Err(Error::EmptyCorpus)));
    }

    #[test]
    fn too_small_target_reports_minimum() {
        let err = train_vocab(&["abc"], 6).unwrap_err();
        match err {
            Error::VocabTooSmall { requested, minimum } => {
                assert_eq!(requested, 6);
                assert_eq!(minimum, spec_count() + 3);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn merging_stops_when_no_pair_repeats() {
        let v = train_vocab(&["abc"], 1000).unwrap();
        assert_eq!(v.size(), spec_count() + 3);
    }

    #[test]
    fn tokenize_basics() {
        let v = Vocabulary::with_tokens(&["x"]).unwrap();
        assert!(v.tokenize("").is_empty());
        assert_eq!(v.tokenize("x"), vec![v.id("x").unwrap()]);
        assert_eq!(v.tokenize("y"), vec![UNK_ID]);
    }

    #[test]
    fn tokenize_fixture() {
        let v = train_vocab(&["int a;", "int b;"], spec_count() + 8).unwrap();
        let ids = v.tokenize("int a;");
        let toks: Vec<&str> = ids.iter().map(|&i| v.token(i).unwrap()).collect();
        assert_eq!(toks, vec!["int", " a", ";"]);
    }

    #[test]
    fn specials_are_recognised_and_absorb_one_space() {
        let v = Vocabulary::with_tokens(&["It", " was", " ."]).unwrap();
        let ids = v.tokenize("It was [MASK] .");
        assert_eq!(
            ids,
            vec![
                v.id("It").unwrap(),
                v.id(" was").unwrap(),
                MASK_ID,
                v.id(" .").unwrap()
            ]
        );
    }

    #[test]
    fn pad_and_truncate() {
        assert_eq!(pad_or_truncate(&[5, 6], 4).unwrap(), (vec![5, 6, 0, 0], 2));
        assert_eq!(pad_or_truncate(&[5, 6, 7], 3).unwrap(), (vec![5, 6, 7], 3));
        assert_eq!(pad_or_truncate(&[5, 6, 7, 8], 2).unwrap(), (vec![5, 6], 2));
        assert!(pad_or_truncate(&[1], 0).is_err());
    }

    #[test]
    fn vocab_file_round_trip() {
        let v = train_vocab(&["a\tb\nc  d\\e", "a\tb"], 40).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        v.save(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("[PAD]\n[CLS]\n[MASK]\n[SEP]\n[UNK]\n"));
        assert_eq!(Vocabulary::load(&path).unwrap(), v);
    }

    #[test]
    fn vocab_file_rejects_wrong_specials() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        std::fs::write(&path, "[CLS]\n[PAD]\n[MASK]\n[SEP]\n[UNK]\n").unwrap();
        assert!(Vocabulary::load(&path).is_err());
    }

    proptest! {
        #[test]
        fn single_symbol_round_trip(text in "[ab ;\n]{0,40}") {
            // every base symbol of the alphabet is known
            let v = Vocabulary::with_tokens(&["a", "b", " a", " b", " ;", ";", " ", "\n"]).unwrap();
            let ids = v.tokenize(&text);
            prop_assert!(!ids.contains(&UNK_ID));
            prop_assert_eq!(v.decode(&ids), text.clone());
            prop_assert_eq!(v.tokenize(&text), ids);
        }

        #[test]
        fn trained_vocab_round_trips_its_corpus(words in proptest::collection::vec("[a-d]{1,5}", 1..8)) {
            let text = words.join(" ");
            let v = train_vocab(&[text.as_str()], 60).unwrap();
            prop_assert_eq!(v.decode(&v.tokenize(&text)), text);
        }

        #[test]
        fn pad_invariants(ids in proptest::collection::vec(5u32..50, 0..20), n in 1usize..25) {
            let (out, valid) = pad_or_truncate(&ids, n).unwrap();
            prop_assert_eq!(out.len(), n);
            prop_assert_eq!(valid, ids.len().min(n));
            prop_assert!(out[valid..].iter().all(|&x| x == PAD_ID));
        }
    }
}
