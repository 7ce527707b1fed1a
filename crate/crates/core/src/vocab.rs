//! Deterministic word-level tokenizer, closed vocabulary, and span-annotated sequences.
//!
//! The tokenizer is rule-based rather than learned: whitespace splitting,
//! standalone punctuation, possessive `'s` peeled off, and a deterministic
//! sub-split that breaks long name components in two. The sub-split guarantees
//! that long single-word entities fragment into multiple tokens, which is the
//! hazard entity-level masking exists to handle. The second half of a split
//! word carries a `##` continuation prefix so detokenization is exact.

use std::collections::BTreeSet;
use std::collections::HashMap;
use std::path::Path;

use crate::corpus::DatasetSplit;
use crate::util::sha256_hex;
use crate::{Error, Result};

/// Words at or above this many characters are split in two.
pub const SUBSPLIT_LEN: usize = 10;

pub const PAD_TOKEN: &str = "<pad>";
pub const MASK_TOKEN: &str = "<mask>";
pub const BOS_TOKEN: &str = "<bos>";
pub const EOS_TOKEN: &str = "<eos>";

/// Punctuation that forms standalone tokens.
const PUNCT: [char; 3] = ['.', '?', ','];

/// Token ids plus span annotations; the unit of corruption and training.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnnotatedSequence {
    pub ids: Vec<u32>,
    /// Inclusive (start, end) token spans covering entity mentions.
    pub entity_spans: Vec<(usize, usize)>,
    /// Inclusive (start, end) token spans covering relation descriptors.
    pub relation_spans: Vec<(usize, usize)>,
    /// Number of leading tokens that form the prompt region (0 for declaratives).
    pub prompt_len: usize,
}

impl AnnotatedSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Check the structural invariants: spans in range, no partial overlap,
    /// prompt_len within bounds.
    pub fn validate(&self) -> Result<()> {
        let n = self.ids.len();
        if self.prompt_len > n {
            return Err(Error::Corpus(format!(
                "prompt_len {} exceeds sequence length {n}",
                self.prompt_len
            )));
        }
        for &(i, j) in self.entity_spans.iter().chain(&self.relation_spans) {
            if i > j || j >= n {
                return Err(Error::Corpus(format!(
                    "span ({i}, {j}) out of range for length {n}"
                )));
            }
        }
        for (a, &(i1, j1)) in self.entity_spans.iter().enumerate() {
            for &(i2, j2) in &self.entity_spans[a + 1..] {
                let disjoint = j1 < i2 || j2 < i1;
                if !disjoint {
                    return Err(Error::Corpus(format!(
                        "entity spans ({i1}, {j1}) and ({i2}, {j2}) overlap"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// One surface token with its byte range in the source text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawToken {
    pub text: String,
    /// Byte offset range [start, end) in the source string.
    pub start: usize,
    pub end: usize,
}

/// Split text into surface tokens. Infallible; vocabulary lookup happens later.
pub fn split_text(text: &str) -> Vec<RawToken> {
    let mut out = Vec::new();
    let bytes = text.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i].is_ascii_whitespace() {
            i += 1;
            continue;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        split_word(text, start, i, &mut out);
    }
    out
}

/// Split a whitespace-delimited word into its token pieces.
fn split_word(text: &str, start: usize, end: usize, out: &mut Vec<RawToken>) {
    let word = &text[start..end];

    // Peel trailing punctuation (possibly several, e.g. "whom?.").
    let mut core_end = end;
    let mut punct = Vec::new();
    loop {
        let core = &text[start..core_end];
        if let Some(c) = core.chars().last() {
            if PUNCT.contains(&c) {
                punct.push(RawToken {
                    text: c.to_string(),
                    start: core_end - c.len_utf8(),
                    end: core_end,
                });
                core_end -= c.len_utf8();
                continue;
            }
        }
        break;
    }

    // Peel possessive marker.
    let mut possessive = None;
    let core = &text[start..core_end];
    if core.len() > 2 && core.ends_with("'s") {
        possessive = Some(RawToken {
            text: "'s".to_string(),
            start: core_end - 2,
            end: core_end,
        });
        core_end -= 2;
    }

    let core = &text[start..core_end];
    if !core.is_empty() {
        let n_chars = core.chars().count();
        if n_chars >= SUBSPLIT_LEN {
            // Deterministic two-way split at the character midpoint.
            let head_chars = (n_chars + 1) / 2;
            let split_byte = core
                .char_indices()
                .nth(head_chars)
                .map(|(b, _)| b)
                .unwrap_or(core.len());
            out.push(RawToken {
                text: core[..split_byte].to_string(),
                start,
                end: start + split_byte,
            });
            out.push(RawToken {
                text: format!("##{}", &core[split_byte..]),
                start: start + split_byte,
                end: core_end,
            });
        } else {
            out.push(RawToken {
                text: core.to_string(),
                start,
                end: core_end,
            });
        }
    } else if possessive.is_none() && punct.is_empty() {
        // Pure-punctuation words were consumed above; a fully empty core with
        // nothing peeled can only come from a stray apostrophe-like word.
        out.push(RawToken {
            text: word.to_string(),
            start,
            end,
        });
    }

    if let Some(p) = possessive {
        out.push(p);
    }
    out.extend(punct.into_iter().rev());
}

/// Split into whitespace words with punctuation and possessives removed.
/// Used by the error taxonomy, which reasons about whole name components.
pub fn split_surface_words(text: &str) -> Vec<String> {
    let mut words = Vec::new();
    for w in text.split_ascii_whitespace() {
        let mut core = w;
        while let Some(c) = core.chars().last() {
            if PUNCT.contains(&c) {
                core = &core[..core.len() - c.len_utf8()];
            } else {
                break;
            }
        }
        if core.len() > 2 && core.ends_with("'s") {
            core = &core[..core.len() - 2];
        }
        if !core.is_empty() {
            words.push(core.to_string());
        }
    }
    words
}

/// Closed token vocabulary with the special-token registry.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    id_of: HashMap<String, u32>,
    token_of: Vec<String>,
    pub pad: u32,
    pub mask: u32,
    pub bos: u32,
    pub eos: u32,
}

impl Vocabulary {
    /// Build a closed vocabulary over raw texts: specials first, then all
    /// observed tokens in lexicographic order.
    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>) -> Vocabulary {
        let mut seen = BTreeSet::new();
        for text in texts {
            for tok in split_text(text) {
                seen.insert(tok.text);
            }
        }
        let mut token_of: Vec<String> = vec![
            PAD_TOKEN.to_string(),
            MASK_TOKEN.to_string(),
            BOS_TOKEN.to_string(),
            EOS_TOKEN.to_string(),
        ];
        token_of.extend(seen);
        let id_of = token_of
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocabulary {
            id_of,
            token_of,
            pad: 0,
            mask: 1,
            bos: 2,
            eos: 3,
        }
    }

    pub fn size(&self) -> usize {
        self.token_of.len()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.id_of.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.token_of.get(id as usize).map(|s| s.as_str())
    }

    pub fn is_special(&self, id: u32) -> bool {
        id == self.pad || id == self.mask || id == self.bos || id == self.eos
    }

    /// True if every token of `text` is in the vocabulary.
    pub fn covers(&self, text: &str) -> bool {
        split_text(text).iter().all(|t| self.id_of.contains_key(&t.text))
    }

    /// Case-insensitive membership test.
    pub fn contains_ignore_case(&self, token: &str) -> bool {
        self.token_of.iter().any(|t| t.eq_ignore_ascii_case(token))
    }

    /// The vocabulary file: one token per line, line number = id.
    pub fn file_bytes(&self) -> Vec<u8> {
        let mut out = String::new();
        for tok in &self.token_of {
            out.push_str(tok);
            out.push('\n');
        }
        out.into_bytes()
    }

    /// SHA-256 of the vocabulary file bytes; recorded in manifests and
    /// checkpoints so mismatched vocab/model pairs are refused.
    pub fn content_hash(&self) -> String {
        sha256_hex(&self.file_bytes())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.file_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Vocabulary> {
        let text = std::fs::read_to_string(path)?;
        let token_of: Vec<String> = text.lines().map(|l| l.to_string()).collect();
        if token_of.len() < 4
            || token_of[0] != PAD_TOKEN
            || token_of[1] != MASK_TOKEN
            || token_of[2] != BOS_TOKEN
            || token_of[3] != EOS_TOKEN
        {
            return Err(Error::Corpus(format!(
                "vocabulary file {} lacks the special-token header",
                path.display()
            )));
        }
        let id_of = token_of
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Ok(Vocabulary {
            id_of,
            token_of,
            pad: 0,
            mask: 1,
            bos: 2,
            eos: 3,
        })
    }
}

/// Build the vocabulary over every record text in the given splits.
pub fn build_vocab(splits: &[&DatasetSplit]) -> Vocabulary {
    Vocabulary::from_texts(
        splits
            .iter()
            .flat_map(|s| s.records.iter())
            .map(|r| r.text.as_str()),
    )
}

/// Tokenize text against a closed vocabulary, converting byte-offset character
/// spans to inclusive token spans.
///
/// `entity_char_spans` and `relation_char_spans` are [start, end) byte ranges;
/// each must align exactly with token boundaries.
pub fn tokenize(
    text: &str,
    vocab: &Vocabulary,
    entity_char_spans: &[(usize, usize)],
    relation_char_spans: &[(usize, usize)],
    prompt_len_tokens: usize,
) -> Result<AnnotatedSequence> {
    let raw = split_text(text);
    let mut ids = Vec::with_capacity(raw.len());
    for tok in &raw {
        match vocab.id(&tok.text) {
            Some(id) if !vocab.is_special(id) => ids.push(id),
            Some(_) => return Err(Error::SpecialToken(tok.text.clone())),
            None => return Err(Error::UnknownToken(tok.text.clone())),
        }
    }
    let entity_spans = align_spans(text, &raw, entity_char_spans)?;
    let relation_spans = align_spans(text, &raw, relation_char_spans)?;
    let seq = AnnotatedSequence {
        ids,
        entity_spans,
        relation_spans,
        prompt_len: prompt_len_tokens,
    };
    seq.validate()?;
    Ok(seq)
}

/// Convert [start, end) byte spans to inclusive token spans using the
/// tokenizer rules alone (no vocabulary needed).
pub fn char_spans_to_token_spans(
    text: &str,
    char_spans: &[(usize, usize)],
) -> Result<Vec<(usize, usize)>> {
    align_spans(text, &split_text(text), char_spans)
}

fn align_spans(
    text: &str,
    raw: &[RawToken],
    char_spans: &[(usize, usize)],
) -> Result<Vec<(usize, usize)>> {
    let mut out = Vec::with_capacity(char_spans.len());
    for &(cs, ce) in char_spans {
        let first = raw.iter().position(|t| t.start == cs);
        let last = raw.iter().position(|t| t.end == ce);
        match (first, last) {
            (Some(i), Some(j)) if i <= j => out.push((i, j)),
            _ => {
                return Err(Error::SpanAlignment {
                    start: cs,
                    end: ce,
                    text: text.to_string(),
                })
            }
        }
    }
    Ok(out)
}

/// Reconstruct text from token ids. MASK and PAD are refused; other specials
/// render as their literal forms.
pub fn detokenize(ids: &[u32], vocab: &Vocabulary) -> Result<String> {
    let mut out = String::new();
    for &id in ids {
        if id == vocab.mask {
            return Err(Error::SpecialToken(MASK_TOKEN.to_string()));
        }
        if id == vocab.pad {
            return Err(Error::SpecialToken(PAD_TOKEN.to_string()));
        }
        let tok = vocab
            .token(id)
            .ok_or_else(|| Error::UnknownToken(format!("id {id}")))?;
        if let Some(rest) = tok.strip_prefix("##") {
            out.push_str(rest);
        } else if tok == "'s" || PUNCT.iter().any(|&p| tok == p.to_string()) {
            out.push_str(tok);
        } else {
            if !out.is_empty() {
                out.push(' ');
            }
            out.push_str(tok);
        }
    }
    Ok(out)
}

/// Detokenize a token-index slice of a sequence (inclusive span).
pub fn detokenize_span(seq: &AnnotatedSequence, span: (usize, usize), vocab: &Vocabulary) -> Result<String> {
    detokenize(&seq.ids[span.0..=span.1], vocab)
}
