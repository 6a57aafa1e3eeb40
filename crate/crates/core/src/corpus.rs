//! Tokenization and tri-gram counting.
//!
//! Text is turned into [`TokenId`] sequences by one of three tokenizers
//! (whitespace words, raw bytes, or ids produced by an external tokenizer),
//! and sequences are streamed into a [`TrigramCounts`] accumulator. Each
//! document is counted on its own; no window spans two documents.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

/// Index into a [`Vocabulary`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenId(pub u32);

impl TokenId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for TokenId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl From<u32> for TokenId {
    fn from(v: u32) -> Self {
        TokenId(v)
    }
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("malformed input: {0}")]
    Malformed(String),
    #[error("vocabulary kind {found:?} cannot be used with the {mode} tokenizer")]
    VocabularyMismatch { mode: TokenizerMode, found: VocabKind },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TokenizerMode {
    WhitespaceWord,
    ByteLevel,
    ExternalPretokenized,
}

impl fmt::Display for TokenizerMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TokenizerMode::WhitespaceWord => "whitespace-word",
            TokenizerMode::ByteLevel => "byte-level",
            TokenizerMode::ExternalPretokenized => "external-pretokenized",
        })
    }
}

impl FromStr for TokenizerMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "whitespace" | "whitespace-word" | "word" => Ok(TokenizerMode::WhitespaceWord),
            "byte" | "byte-level" | "bytes" => Ok(TokenizerMode::ByteLevel),
            "pretokenized" | "external-pretokenized" | "ids" => {
                Ok(TokenizerMode::ExternalPretokenized)
            }
            other => Err(format!("unknown tokenizer mode `{other}`")),
        }
    }
}

/// What the surfaces of a vocabulary mean.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VocabKind {
    Words,
    Bytes,
    /// Ids from an external tokenizer; surfaces are the decimal ids.
    Opaque,
}

/// Bijective map between surfaces and token ids.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    kind: VocabKind,
    surfaces: Vec<String>,
    mutable: bool,
    unknown: Option<TokenId>,
    #[serde(skip)]
    by_surface: HashMap<String, TokenId>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocabulary {
    /// Id reserved for "start of sequence". Never produced by tokenization.
    pub const SENTINEL: TokenId = TokenId(u32::MAX);
    pub const UNKNOWN_SURFACE: &'static str = "<unk>";

    /// Empty, growable word vocabulary.
    pub fn new() -> Self {
        Vocabulary {
            kind: VocabKind::Words,
            surfaces: Vec::new(),
            mutable: true,
            unknown: None,
            by_surface: HashMap::new(),
        }
    }

    /// Fixed 256-entry vocabulary where id = byte value.
    pub fn byte_level() -> Self {
        let surfaces: Vec<String> = (0u16..256).map(|b| byte_surface(b as u8)).collect();
        let mut v = Vocabulary {
            kind: VocabKind::Bytes,
            surfaces,
            mutable: false,
            unknown: None,
            by_surface: HashMap::new(),
        };
        v.reindex();
        v
    }

    /// Fixed vocabulary of `size` opaque ids.
    pub fn opaque(size: u32) -> Self {
        let mut v = Vocabulary {
            kind: VocabKind::Opaque,
            surfaces: (0..size).map(|i| i.to_string()).collect(),
            mutable: false,
            unknown: None,
            by_surface: HashMap::new(),
        };
        v.reindex();
        v
    }

    /// Builds a word vocabulary from surfaces in id order.
    pub fn from_surfaces<I, S>(surfaces: I) -> Result<Self, CorpusError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut v = Vocabulary::new();
        for s in surfaces {
            let s = s.into();
            if v.by_surface.contains_key(&s) {
                return Err(CorpusError::Malformed(format!("duplicate surface `{s}`")));
            }
            v.push(s);
        }
        Ok(v)
    }

    /// Rebuilds the surface index; needed after deserialization.
    pub fn reindex(&mut self) {
        self.by_surface = self
            .surfaces
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), TokenId(i as u32)))
            .collect();
        if self.unknown.is_none() && self.kind == VocabKind::Words && !self.mutable {
            self.unknown = self.by_surface.get(Self::UNKNOWN_SURFACE).copied();
        }
    }

    /// Stops growth. Word vocabularies gain an `<unk>` entry for unseen surfaces.
    pub fn freeze(&mut self) {
        if self.kind == VocabKind::Words {
            let unk = self.id_or_insert(Self::UNKNOWN_SURFACE);
            self.unknown = Some(unk);
        }
        self.mutable = false;
    }

    pub fn kind(&self) -> VocabKind {
        self.kind
    }

    pub fn is_mutable(&self) -> bool {
        self.mutable
    }

    pub fn len(&self) -> usize {
        self.surfaces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.surfaces.is_empty()
    }

    pub fn unknown(&self) -> Option<TokenId> {
        self.unknown
    }

    pub fn id(&self, surface: &str) -> Option<TokenId> {
        self.by_surface.get(surface).copied()
    }

    pub fn surface(&self, id: TokenId) -> Option<&str> {
        self.surfaces.get(id.index()).map(String::as_str)
    }

    pub fn surfaces(&self) -> &[String] {
        &self.surfaces
    }

    fn push(&mut self, surface: String) -> TokenId {
        let id = TokenId(self.surfaces.len() as u32);
        self.by_surface.insert(surface.clone(), id);
        self.surfaces.push(surface);
        id
    }

    fn id_or_insert(&mut self, surface: &str) -> TokenId {
        match self.by_surface.get(surface) {
            Some(&id) => id,
            None => self.push(surface.to_owned()),
        }
    }

    fn lookup_word(&mut self, surface: &str) -> TokenId {
        if self.mutable {
            return self.id_or_insert(surface);
        }
        match self.by_surface.get(surface) {
            Some(&id) => id,
            None => self.unknown.expect("frozen word vocabulary always has <unk>"),
        }
    }
}

fn byte_surface(b: u8) -> String {
    if b.is_ascii_graphic() {
        (b as char).to_string()
    } else {
        format!("<0x{b:02X}>")
    }
}

/// NFC-normalizes and collapses whitespace runs to single spaces.
pub fn normalize(text: &str) -> String {
    let nfc: String = text.nfc().collect();
    nfc.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Converts text to token ids.
///
/// Word mode grows a mutable vocabulary with unseen surfaces and maps them
/// to `<unk>` when frozen. Byte mode needs a byte-level vocabulary (an empty
/// mutable vocabulary is promoted to one). Pretokenized mode parses decimal
/// ids separated by whitespace and rejects any id outside the vocabulary.
pub fn tokenize(
    text: &str,
    vocab: &mut Vocabulary,
    mode: TokenizerMode,
) -> Result<Vec<TokenId>, CorpusError> {
    match mode {
        TokenizerMode::WhitespaceWord => {
            if vocab.kind != VocabKind::Words {
                return Err(CorpusError::VocabularyMismatch { mode, found: vocab.kind });
            }
            let norm = normalize(text);
            Ok(norm.split(' ').filter(|w| !w.is_empty()).map(|w| vocab.lookup_word(w)).collect())
        }
        TokenizerMode::ByteLevel => {
            if vocab.kind != VocabKind::Bytes {
                if vocab.is_empty() && vocab.mutable {
                    *vocab = Vocabulary::byte_level();
                } else {
                    return Err(CorpusError::VocabularyMismatch { mode, found: vocab.kind });
                }
            }
            Ok(text.as_bytes().iter().map(|&b| TokenId(b as u32)).collect())
        }
        TokenizerMode::ExternalPretokenized => text
            .split_whitespace()
            .map(|field| {
                let id: u32 = field
                    .parse()
                    .map_err(|_| CorpusError::Malformed(format!("`{field}` is not a token id")))?;
                check_id(TokenId(id), vocab.len())
            })
            .collect(),
    }
}

fn check_id(id: TokenId, vocab_len: usize) -> Result<TokenId, CorpusError> {
    if id.index() >= vocab_len {
        Err(CorpusError::Malformed(format!(
            "token id {id} is outside a vocabulary of {vocab_len}"
        )))
    } else {
        Ok(id)
    }
}

/// Inverse of [`tokenize`] on normalized input.
pub fn detokenize(ids: &[TokenId], vocab: &Vocabulary) -> String {
    match vocab.kind {
        VocabKind::Bytes => {
            let bytes: Vec<u8> = ids.iter().map(|t| t.0 as u8).collect();
            String::from_utf8_lossy(&bytes).into_owned()
        }
        VocabKind::Words | VocabKind::Opaque => ids
            .iter()
            .map(|&t| vocab.surface(t).map(str::to_owned).unwrap_or_else(|| format!("<{t}>")))
            .collect::<Vec<_>>()
            .join(" "),
    }
}

/// Parses pretokenized documents: per document a little-endian `u32` record
/// count followed by that many little-endian `u32` ids.
pub fn read_pretokenized(bytes: &[u8], vocab_len: Option<usize>) -> Result<Vec<Vec<TokenId>>, CorpusError> {
    let mut docs = Vec::new();
    let mut pos = 0usize;
    let word = |pos: usize| -> Result<u32, CorpusError> {
        bytes
            .get(pos..pos + 4)
            .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .ok_or_else(|| CorpusError::Malformed(format!("truncated record at byte {pos}")))
    };
    while pos < bytes.len() {
        let count = word(pos)? as usize;
        pos += 4;
        let mut doc = Vec::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            let id = TokenId(word(pos)?);
            pos += 4;
            doc.push(match vocab_len {
                Some(n) => check_id(id, n)?,
                None => id,
            });
        }
        docs.push(doc);
    }
    Ok(docs)
}

pub fn write_pretokenized(docs: &[Vec<TokenId>]) -> Vec<u8> {
    let mut out = Vec::new();
    for doc in docs {
        out.extend_from_slice(&(doc.len() as u32).to_le_bytes());
        for t in doc {
            out.extend_from_slice(&t.0.to_le_bytes());
        }
    }
    out
}

/// Context pair `(w[i-2], w[i-1])`.
pub type Bigram = (TokenId, TokenId);

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub documents: u64,
    pub tokens: u64,
    pub distinct_trigrams: u64,
    pub distinct_contexts: u64,
}

/// Exact, unpruned tri-gram and context counts.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TrigramCounts {
    trigrams: HashMap<Bigram, HashMap<TokenId, u64>>,
    contexts: HashMap<Bigram, u64>,
    documents: u64,
    tokens: u64,
    max_token: Option<TokenId>,
}

impl TrigramCounts {
    pub fn new() -> Self {
        Self::default()
    }

    /// Counts every sliding window of one sequence. Sequences shorter than
    /// three tokens contribute nothing.
    pub fn count_trigrams(&mut self, tokens: &[TokenId]) {
        for w in tokens.windows(3) {
            *self.trigrams.entry((w[0], w[1])).or_default().entry(w[2]).or_insert(0) += 1;
            *self.contexts.entry((w[0], w[1])).or_insert(0) += 1;
        }
        if let Some(&m) = tokens.iter().max() {
            self.max_token = self.max_token.max(Some(m));
        }
    }

    /// Counts one document and records it in the corpus statistics.
    pub fn add_document(&mut self, tokens: &[TokenId]) {
        self.documents += 1;
        self.tokens += tokens.len() as u64;
        self.count_trigrams(tokens);
    }

    /// Counts documents on the rayon pool, one private accumulator per
    /// worker, merged by summation.
    pub fn from_documents<D: AsRef<[TokenId]> + Sync>(docs: &[D]) -> Self {
        docs.par_iter()
            .fold(TrigramCounts::new, |mut acc, d| {
                acc.add_document(d.as_ref());
                acc
            })
            .reduce(TrigramCounts::new, |mut a, b| {
                a.merge(b);
                a
            })
    }

    pub fn merge(&mut self, other: TrigramCounts) {
        for (ctx, conts) in other.trigrams {
            let mine = self.trigrams.entry(ctx).or_default();
            for (tok, c) in conts {
                *mine.entry(tok).or_insert(0) += c;
            }
        }
        for (ctx, c) in other.contexts {
            *self.contexts.entry(ctx).or_insert(0) += c;
        }
        self.documents += other.documents;
        self.tokens += other.tokens;
        self.max_token = self.max_token.max(other.max_token);
    }

    /// Adds `count` occurrences of one tri-gram directly.
    pub fn insert(&mut self, ctx: Bigram, next: TokenId, count: u64) {
        if count == 0 {
            return;
        }
        *self.trigrams.entry(ctx).or_default().entry(next).or_insert(0) += count;
        *self.contexts.entry(ctx).or_insert(0) += count;
        self.max_token = self.max_token.max(Some(ctx.0.max(ctx.1).max(next)));
    }

    pub fn trigram(&self, a: TokenId, b: TokenId, c: TokenId) -> u64 {
        self.trigrams.get(&(a, b)).and_then(|m| m.get(&c)).copied().unwrap_or(0)
    }

    pub fn context(&self, a: TokenId, b: TokenId) -> u64 {
        self.contexts.get(&(a, b)).copied().unwrap_or(0)
    }

    pub fn continuations(&self, ctx: Bigram) -> Option<&HashMap<TokenId, u64>> {
        self.trigrams.get(&ctx)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Bigram, &HashMap<TokenId, u64>)> {
        self.trigrams.iter()
    }

    pub fn is_empty(&self) -> bool {
        self.trigrams.is_empty()
    }

    /// One past the largest token id seen, or 0.
    pub fn vocab_bound(&self) -> u32 {
        self.max_token.map_or(0, |t| t.0 + 1)
    }

    pub fn stats(&self) -> CorpusStats {
        CorpusStats {
            documents: self.documents,
            tokens: self.tokens,
            distinct_trigrams: self.trigrams.values().map(|m| m.len() as u64).sum(),
            distinct_contexts: self.contexts.len() as u64,
        }
    }
}
