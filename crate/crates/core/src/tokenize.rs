//! Whitespace/frequency tokenizer.
//!
//! Converts an ad's text feature (titles and descriptions of its top three
//! items) into a fixed-length sequence of vocabulary indices. Index 0 is
//! reserved for padding and index 1 for out-of-vocabulary tokens.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::ingest::Ad;

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

/// Default fixed sequence length.
pub const DEFAULT_SEQ_LEN: usize = 64;

/// Immutable token-to-id table with reserved pad/unk entries.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    id_to_token: Vec<String>,
    token_to_id: HashMap<String, u32>,
}

impl Vocabulary {
    fn from_tokens(tokens: Vec<String>) -> Self {
        let mut id_to_token = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
        id_to_token.extend(tokens);
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocabulary { id_to_token, token_to_id }
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        false // pad/unk are always present
    }

    /// Id for a normalized token, falling back to the unk id.
    pub fn id_of(&self, token: &str) -> u32 {
        self.token_to_id.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token_of(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    /// Stable content hash (FNV-1a over `token\tid` entries). Stored in
    /// embedding checkpoints so a model cannot be applied to the wrong table.
    pub fn content_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for (id, token) in self.id_to_token.iter().enumerate() {
            for b in token.as_bytes() {
                h ^= u64::from(*b);
                h = h.wrapping_mul(0x100000001b3);
            }
            h ^= id as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        h
    }

    /// Writes the table as one `token<TAB>id` line per entry.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for (id, token) in self.id_to_token.iter().enumerate() {
            out.push_str(token);
            out.push('\t');
            out.push_str(&id.to_string());
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Parses the `token<TAB>id` format. Ids must form the contiguous range
    /// `0..n` with the pad/unk entries in their reserved slots.
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut entries: Vec<(String, u32)> = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line_no = lineno as u64 + 1;
            if line.is_empty() {
                continue;
            }
            let (token, id_str) = line.split_once('\t').ok_or_else(|| Error::BadFormat {
                path: origin.to_string(),
                line: line_no,
                msg: "expected `token<TAB>id`".into(),
            })?;
            let id: u32 = id_str.trim().parse().map_err(|_| Error::MalformedField {
                path: origin.to_string(),
                line: line_no,
                field: "id".into(),
                msg: format!("`{id_str}` is not an unsigned integer"),
            })?;
            entries.push((token.to_string(), id));
        }
        if entries.len() < 2 {
            return Err(Error::BadFormat {
                path: origin.to_string(),
                line: 0,
                msg: "vocabulary must contain at least the pad and unk entries".into(),
            });
        }
        entries.sort_by_key(|(_, id)| *id);
        let mut id_to_token = Vec::with_capacity(entries.len());
        for (expect, (token, id)) in entries.into_iter().enumerate() {
            if id as usize != expect {
                return Err(Error::BadFormat {
                    path: origin.to_string(),
                    line: 0,
                    msg: format!("ids are not the contiguous range 0..n (missing or duplicate id {expect})"),
                });
            }
            id_to_token.push(token);
        }
        if id_to_token[PAD_ID as usize] != PAD_TOKEN || id_to_token[UNK_ID as usize] != UNK_TOKEN {
            return Err(Error::BadFormat {
                path: origin.to_string(),
                line: 0,
                msg: format!("ids 0/1 must be `{PAD_TOKEN}`/`{UNK_TOKEN}`"),
            });
        }
        let token_to_id: HashMap<String, u32> = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        if token_to_id.len() != id_to_token.len() {
            return Err(Error::BadFormat {
                path: origin.to_string(),
                line: 0,
                msg: "duplicate token".into(),
            });
        }
        Ok(Vocabulary { id_to_token, token_to_id })
    }
}

/// Fixed-length token-id sequence; padding appears only as a trailing suffix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    ids: Vec<u32>,
}

impl TokenSequence {
    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Number of leading non-pad positions.
    pub fn content_len(&self) -> usize {
        self.ids.iter().take_while(|&&id| id != PAD_ID).count()
    }
}

/// Lowercases, strips punctuation, and splits on whitespace.
pub fn normalize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

/// Builds a frequency-ranked vocabulary over the corpus.
///
/// The top `max_size - 2` tokens are kept (two slots are reserved for
/// pad/unk); frequency ties break lexicographically.
pub fn build_vocab(corpus: &[String], max_size: usize) -> Vocabulary {
    let mut counts: HashMap<String, u64> = HashMap::new();
    for text in corpus {
        for token in normalize(text) {
            *counts.entry(token).or_insert(0) += 1;
        }
    }
    let mut ranked: Vec<(String, u64)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let keep = max_size.saturating_sub(2);
    ranked.truncate(keep);
    Vocabulary::from_tokens(ranked.into_iter().map(|(t, _)| t).collect())
}

/// Text feature of an ad: title and description of up to three items in
/// ascending revenue rank.
pub fn ad_text(ad: &Ad) -> String {
    let mut items: Vec<_> = ad.items.iter().collect();
    items.sort_by_key(|it| it.revenue_rank);
    let mut parts = Vec::new();
    for item in items.into_iter().take(3) {
        parts.push(item.title.as_str());
        if !item.description.is_empty() {
            parts.push(item.description.as_str());
        }
    }
    parts.join(" ")
}

/// Tokenizes an ad's text feature into exactly `seq_len` ids.
pub fn tokenize_ad(ad: &Ad, vocab: &Vocabulary, seq_len: usize) -> TokenSequence {
    let mut ids: Vec<u32> = normalize(&ad_text(ad))
        .iter()
        .map(|t| vocab.id_of(t))
        .take(seq_len)
        .collect();
    ids.resize(seq_len, PAD_ID);
    TokenSequence { ids }
}

/// Tokenizes raw text with the same normalization as [`tokenize_ad`].
pub fn tokenize_text(text: &str, vocab: &Vocabulary, seq_len: usize) -> TokenSequence {
    let mut ids: Vec<u32> = normalize(text)
        .iter()
        .map(|t| vocab.id_of(t))
        .take(seq_len)
        .collect();
    ids.resize(seq_len, PAD_ID);
    TokenSequence { ids }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::Item;
    use crate::rpc_model::Feedback;

    fn ad_with_items(items: Vec<Item>) -> Ad {
        Ad {
            ad_id: "a".into(),
            items,
            product_type: None,
            total_clicks: 0,
            feedback: Feedback::empty(0),
        }
    }

    #[test]
    fn vocab_ranks_by_frequency() {
        let vocab = build_vocab(&["a a b".into()], 4);
        assert_eq!(vocab.len(), 4);
        assert_eq!(vocab.id_of("a"), 2);
        assert_eq!(vocab.id_of("b"), 3);
        assert_eq!(vocab.id_of("zzz"), UNK_ID);
    }

    #[test]
    fn vocab_ties_break_lexicographically() {
        let vocab = build_vocab(&["b a".into()], 4);
        assert_eq!(vocab.id_of("a"), 2);
        assert_eq!(vocab.id_of("b"), 3);
    }

    #[test]
    fn degenerate_capacity_maps_everything_to_unk() {
        let vocab = build_vocab(&["a b c".into()], 2);
        assert_eq!(vocab.len(), 2);
        assert_eq!(vocab.id_of("a"), UNK_ID);
    }

    #[test]
    fn tokenize_uses_top_three_items_by_rank() {
        let ad = ad_with_items(vec![
            Item { title: "five".into(), description: String::new(), revenue_rank: 5 },
            Item { title: "one".into(), description: String::new(), revenue_rank: 1 },
            Item { title: "four".into(), description: String::new(), revenue_rank: 4 },
            Item { title: "two".into(), description: String::new(), revenue_rank: 2 },
            Item { title: "three".into(), description: String::new(), revenue_rank: 3 },
        ]);
        assert_eq!(ad_text(&ad), "one two three");
    }

    #[test]
    fn tokenize_pads_and_truncates() {
        let vocab = build_vocab(&["x y".into()], 8);
        let short = ad_with_items(vec![Item {
            title: "x".into(),
            description: String::new(),
            revenue_rank: 1,
        }]);
        let seq = tokenize_ad(&short, &vocab, 4);
        assert_eq!(seq.ids(), &[vocab.id_of("x"), PAD_ID, PAD_ID, PAD_ID]);
        assert_eq!(seq.content_len(), 1);

        let long = ad_with_items(vec![Item {
            title: "x y x y x y".into(),
            description: String::new(),
            revenue_rank: 1,
        }]);
        let seq = tokenize_ad(&long, &vocab, 4);
        assert_eq!(seq.len(), 4);
        assert_eq!(seq.content_len(), 4);
    }

    #[test]
    fn save_load_round_trip() {
        let vocab = build_vocab(&["alpha beta beta".into()], 6);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.tsv");
        vocab.save(&path).unwrap();
        let back = Vocabulary::load(&path).unwrap();
        assert_eq!(vocab, back);
        assert_eq!(vocab.content_hash(), back.content_hash());
    }

    #[test]
    fn parse_rejects_gap_in_ids() {
        let err = Vocabulary::parse("<pad>\t0\n<unk>\t1\nfoo\t3\n", "mem").unwrap_err();
        assert!(matches!(err, Error::BadFormat { .. }));
    }
}
