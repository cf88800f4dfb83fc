//! Deterministic byte-pair-encoding tokenizer for item metadata.
//!
//! Text is lowercased and split into words at whitespace; every punctuation
//! character becomes a word of its own. Training repeatedly merges the most
//! frequent adjacent symbol pair (ties broken lexicographically), then fills
//! whatever budget is left with single characters by frequency.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, Write};

use crate::error::{bail, Error, Result};

pub const Q_VIEW: u32 = 0;
pub const Q_BUY: u32 = 1;
pub const TARGET: u32 = 2;
pub const PAD: u32 = 3;
pub const UNK: u32 = 4;

/// Reserved tokens, in id order.
pub const SPECIAL_TOKENS: [&str; 5] = ["[Q_V]", "[Q_B]", "[TGT]", "[PAD]", "[UNK]"];

/// Default encoded length for item metadata.
pub const DEFAULT_MAX_LEN: usize = 64;

/// Pairs seen fewer times than this are never merged.
const MIN_MERGE_FREQ: u64 = 2;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
    merges: Vec<(String, String)>,
    ranks: HashMap<(String, String), usize>,
}

/// Lowercases and splits text into words: runs of alphanumerics, or single
/// punctuation characters.
pub fn pre_segment(text: &str) -> Vec<String> {
    let mut words = Vec::new();
    let mut cur = String::new();
    for ch in text.chars().flat_map(char::to_lowercase) {
        if ch.is_alphanumeric() {
            cur.push(ch);
            continue;
        }
        if !cur.is_empty() {
            words.push(std::mem::take(&mut cur));
        }
        if !ch.is_whitespace() {
            words.push(ch.to_string());
        }
    }
    if !cur.is_empty() {
        words.push(cur);
    }
    words
}

fn chars_of(word: &str) -> Vec<String> {
    word.chars().map(String::from).collect()
}

/// Replaces every non-overlapping `(a, b)` in `symbols`, scanning left to right.
fn apply_merge(symbols: &mut Vec<String>, a: &str, b: &str) {
    if symbols.len() < 2 {
        return;
    }
    let mut out = Vec::with_capacity(symbols.len());
    let mut i = 0;
    while i < symbols.len() {
        if i + 1 < symbols.len() && symbols[i] == a && symbols[i + 1] == b {
            out.push(format!("{a}{b}"));
            i += 2;
        } else {
            out.push(std::mem::take(&mut symbols[i]));
            i += 1;
        }
    }
    *symbols = out;
}

impl Vocabulary {
    /// Learns a vocabulary of at most `size` tokens (reserved tokens included).
    pub fn train<S: AsRef<str>>(corpus: &[S], size: usize) -> Result<Self> {
        if corpus.is_empty() {
            bail!(Input, "cannot train a vocabulary on an empty corpus");
        }
        if size <= SPECIAL_TOKENS.len() {
            bail!(Input, "vocabulary size {size} leaves no room beyond reserved tokens");
        }
        let mut word_freq: BTreeMap<String, u64> = BTreeMap::new();
        for text in corpus {
            for w in pre_segment(text.as_ref()) {
                *word_freq.entry(w).or_default() += 1;
            }
        }
        let mut words: Vec<(Vec<String>, u64)> =
            word_freq.iter().map(|(w, &f)| (chars_of(w), f)).collect();

        let budget = size - SPECIAL_TOKENS.len();
        let mut merges: Vec<(String, String)> = Vec::new();
        while merges.len() < budget {
            let mut counts: HashMap<(&str, &str), u64> = HashMap::new();
            for (syms, f) in &words {
                for pair in syms.windows(2) {
                    *counts.entry((&pair[0], &pair[1])).or_default() += f;
                }
            }
            let best = counts
                .into_iter()
                .filter(|&(_, c)| c >= MIN_MERGE_FREQ)
                .max_by(|(pa, ca), (pb, cb)| ca.cmp(cb).then_with(|| pb.cmp(pa)));
            let Some(((a, b), _)) = best else { break };
            let (a, b) = (a.to_string(), b.to_string());
            for (syms, _) in &mut words {
                apply_merge(syms, &a, &b);
            }
            merges.push((a, b));
        }

        let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        tokens.extend(merges.iter().map(|(a, b)| format!("{a}{b}")));
        let mut char_freq: BTreeMap<String, u64> = BTreeMap::new();
        for (w, f) in &word_freq {
            for c in chars_of(w) {
                *char_freq.entry(c).or_default() += f;
            }
        }
        let mut chars: Vec<(String, u64)> = char_freq.into_iter().collect();
        chars.sort_by(|(ca, fa), (cb, fb)| fb.cmp(fa).then_with(|| ca.cmp(cb)));
        let room = size - tokens.len();
        tokens.extend(chars.into_iter().take(room).map(|(c, _)| c));
        Vocabulary::from_parts(tokens, merges)
    }

    fn from_parts(tokens: Vec<String>, merges: Vec<(String, String)>) -> Result<Self> {
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i as u32).is_some() {
                bail!(Format, "duplicate token {t:?}");
            }
        }
        let ranks = merges
            .iter()
            .enumerate()
            .map(|(i, m)| (m.clone(), i))
            .collect();
        Ok(Vocabulary {
            tokens,
            ids,
            merges,
            ranks,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    fn segment_word(&self, word: &str) -> Vec<String> {
        let mut syms = chars_of(word);
        loop {
            let best = syms
                .windows(2)
                .filter_map(|p| self.ranks.get(&(p[0].clone(), p[1].clone())))
                .min()
                .copied();
            let Some(rank) = best else { break };
            let (a, b) = &self.merges[rank];
            apply_merge(&mut syms, a, b);
        }
        syms
    }

    /// Token ids for `text`, truncated to `max_len`.
    pub fn encode(&self, text: &str, max_len: usize) -> Vec<u32> {
        let mut out = Vec::new();
        'words: for word in pre_segment(text) {
            for sym in self.segment_word(&word) {
                if out.len() >= max_len {
                    break 'words;
                }
                out.push(self.id(&sym).unwrap_or(UNK));
            }
        }
        out
    }

    /// Joins the tokens for `ids` with single spaces.
    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or(SPECIAL_TOKENS[UNK as usize]))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// One token per line; the line number is the id.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        for t in &self.tokens {
            writeln!(w, "{t}")?;
        }
        Ok(())
    }

    /// Reads a vocabulary file. Merges are recovered from the multi-character
    /// tokens in id order: each must split into exactly two known pieces under
    /// the merges before it.
    pub fn read_from<R: BufRead>(r: R) -> Result<Self> {
        let tokens: Vec<String> = r.lines().collect::<std::io::Result<_>>()?;
        if tokens.len() < SPECIAL_TOKENS.len()
            || tokens.iter().zip(SPECIAL_TOKENS).any(|(t, s)| t != s)
        {
            return Err(Error::Format(
                "vocabulary must start with the reserved tokens".into(),
            ));
        }
        let mut partial = Vocabulary::from_parts(tokens.clone(), Vec::new())?;
        for t in &tokens[SPECIAL_TOKENS.len()..] {
            if t.chars().count() < 2 {
                continue;
            }
            let pieces = partial.segment_word(t);
            let [a, b] = <[String; 2]>::try_from(pieces).map_err(|p| {
                Error::Format(format!("token {t:?} does not split into a merge: {p:?}"))
            })?;
            partial.ranks.insert((a.clone(), b.clone()), partial.merges.len());
            partial.merges.push((a, b));
        }
        Ok(partial)
    }
}
