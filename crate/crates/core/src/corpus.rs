//! Byte-level corpus ingestion, document splitting, chunking, the
//! within-document permutation transform, and i.i.d. subsampling.
//!
//! On disk a corpus is a directory holding `manifest.json`, `tokens.bin`
//! (one unsigned byte per token) and `offsets.bin` (`m + 1` little-endian
//! `u64` document offsets into `tokens.bin`).

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, IoContext, Result};
use crate::rng;

pub const BYTE_VOCAB: usize = 256;
const MANIFEST_VERSION: u32 = 1;

/// How raw bytes are cut into documents.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SplitPolicy {
    /// Runs of two or more newlines delimit documents. Documents longer than
    /// `max_len` (when set) are cut into `max_len`-token pieces.
    BlankLine { max_len: Option<usize> },
    /// Consecutive records of exactly `length` tokens; the last may be shorter.
    FixedLength { length: usize },
    /// Produced by [`chunk_sequences`]: equal chunks of the concatenated corpus.
    Chunks { length: usize },
}

impl Default for SplitPolicy {
    fn default() -> Self {
        SplitPolicy::FixedLength { length: 64 }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct IngestOptions {
    pub split: SplitPolicy,
    /// Any document longer than this is rejected.
    pub hard_cap: Option<usize>,
}

/// Whether the i.i.d. sampling unit is a document or a fixed-length chunk.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SampleMode {
    #[default]
    Document,
    Sequence,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleSpec {
    pub n: usize,
    pub seed: u64,
    #[serde(default)]
    pub mode: SampleMode,
    /// Tokens per chunk in sequence mode.
    #[serde(default)]
    pub sequence_length: Option<usize>,
}

impl Default for SampleSpec {
    fn default() -> Self {
        SampleSpec { n: 10_000, seed: 0, mode: SampleMode::Document, sequence_length: None }
    }
}

/// An immutable, tokenized document collection.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenizedCorpus {
    tokens: Vec<u8>,
    offsets: Vec<u64>,
    vocab_size: usize,
    split: SplitPolicy,
    source_digest: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub format_version: u32,
    pub vocab_size: usize,
    pub documents: usize,
    pub total_tokens: usize,
    pub split: SplitPolicy,
    pub source_digest: String,
    pub token_digest: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn tokenize(bytes: &[u8]) -> Vec<u8> {
    bytes.to_vec()
}

pub fn detokenize(tokens: &[u8]) -> Vec<u8> {
    tokens.to_vec()
}

fn blank_line_spans(raw: &[u8]) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    let mut start = 0;
    let mut i = 0;
    while i < raw.len() {
        if raw[i] == b'\n' {
            let mut j = i;
            while j < raw.len() && raw[j] == b'\n' {
                j += 1;
            }
            if j - i >= 2 {
                spans.push((start, i));
                start = j;
            }
            i = j;
        } else {
            i += 1;
        }
    }
    spans.push((start, raw.len()));
    spans
}

/// Tokenize raw bytes and split them into documents.
pub fn ingest(raw: &[u8], opts: &IngestOptions) -> Result<TokenizedCorpus> {
    if raw.is_empty() {
        return Err(Error::EmptyInput("raw corpus bytes"));
    }
    let tokens = tokenize(raw);
    let mut spans: Vec<(usize, usize)> = Vec::new();
    match &opts.split {
        SplitPolicy::BlankLine { max_len } => {
            for (s, e) in blank_line_spans(raw) {
                match max_len {
                    Some(cap) if *cap > 0 => {
                        let mut p = s;
                        while p < e {
                            let q = (p + cap).min(e);
                            spans.push((p, q));
                            p = q;
                        }
                    }
                    _ => spans.push((s, e)),
                }
            }
        }
        SplitPolicy::FixedLength { length } | SplitPolicy::Chunks { length } => {
            if *length == 0 {
                return Err(Error::Config("record length must be positive".into()));
            }
            let mut p = 0;
            while p < tokens.len() {
                let q = (p + length).min(tokens.len());
                spans.push((p, q));
                p = q;
            }
        }
    }
    spans.retain(|(s, e)| e > s);
    if spans.is_empty() {
        return Err(Error::EmptyInput("no non-empty documents"));
    }
    if let Some(cap) = opts.hard_cap {
        if let Some((index, (s, e))) = spans.iter().enumerate().find(|(_, (s, e))| e - s > cap) {
            return Err(Error::DocumentTooLong { index, len: e - s, cap });
        }
    }
    let mut flat = Vec::with_capacity(tokens.len());
    let mut offsets = Vec::with_capacity(spans.len() + 1);
    offsets.push(0u64);
    for (s, e) in spans {
        flat.extend_from_slice(&tokens[s..e]);
        offsets.push(flat.len() as u64);
    }
    Ok(TokenizedCorpus {
        tokens: flat,
        offsets,
        vocab_size: BYTE_VOCAB,
        split: opts.split.clone(),
        source_digest: sha256_hex(raw),
    })
}

/// Collect the files under `paths` (directories walked recursively, sorted)
/// and return their concatenated bytes.
pub fn read_sources(paths: &[PathBuf]) -> Result<Vec<u8>> {
    fn walk(p: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
        if p.is_dir() {
            let mut entries: Vec<PathBuf> =
                fs::read_dir(p).at(p)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>().at(p)?;
            entries.sort();
            for e in entries {
                walk(&e, out)?;
            }
        } else {
            out.push(p.to_path_buf());
        }
        Ok(())
    }
    let mut files = Vec::new();
    for p in paths {
        walk(p, &mut files)?;
    }
    let mut raw = Vec::new();
    for f in files {
        raw.extend(fs::read(&f).at(&f)?);
    }
    Ok(raw)
}

impl TokenizedCorpus {
    pub fn from_documents(docs: &[Vec<u8>], split: SplitPolicy) -> Result<Self> {
        let mut tokens = Vec::new();
        let mut offsets = vec![0u64];
        for d in docs.iter().filter(|d| !d.is_empty()) {
            tokens.extend_from_slice(d);
            offsets.push(tokens.len() as u64);
        }
        if offsets.len() == 1 {
            return Err(Error::EmptyInput("no non-empty documents"));
        }
        let source_digest = sha256_hex(&tokens);
        Ok(TokenizedCorpus { tokens, offsets, vocab_size: BYTE_VOCAB, split, source_digest })
    }

    /// Number of documents `m`.
    pub fn len(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn total_tokens(&self) -> usize {
        self.tokens.len()
    }

    pub fn split(&self) -> &SplitPolicy {
        &self.split
    }

    pub fn source_digest(&self) -> &str {
        &self.source_digest
    }

    pub fn document(&self, i: usize) -> &[u8] {
        &self.tokens[self.offsets[i] as usize..self.offsets[i + 1] as usize]
    }

    pub fn documents(&self) -> impl ExactSizeIterator<Item = &[u8]> + '_ {
        (0..self.len()).map(move |i| self.document(i))
    }

    pub fn token_digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(&self.tokens);
        for o in &self.offsets {
            h.update(o.to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn manifest(&self) -> CorpusManifest {
        CorpusManifest {
            format_version: MANIFEST_VERSION,
            vocab_size: self.vocab_size,
            documents: self.len(),
            total_tokens: self.total_tokens(),
            split: self.split.clone(),
            source_digest: self.source_digest.clone(),
            token_digest: self.token_digest(),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).at(dir)?;
        let manifest = serde_json::to_string_pretty(&self.manifest())?;
        fs::write(dir.join("manifest.json"), manifest).at(dir.join("manifest.json"))?;
        fs::write(dir.join("tokens.bin"), &self.tokens).at(dir.join("tokens.bin"))?;
        let offsets: Vec<u8> = self.offsets.iter().flat_map(|o| o.to_le_bytes()).collect();
        fs::write(dir.join("offsets.bin"), offsets).at(dir.join("offsets.bin"))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join("manifest.json");
        let manifest: CorpusManifest = serde_json::from_slice(&fs::read(&mpath).at(&mpath)?)?;
        let tokens = fs::read(dir.join("tokens.bin")).at(dir.join("tokens.bin"))?;
        let raw_offsets = fs::read(dir.join("offsets.bin")).at(dir.join("offsets.bin"))?;
        if raw_offsets.len() % 8 != 0 {
            return Err(Error::Corrupt { what: "offsets.bin", detail: "length not a multiple of 8".into() });
        }
        let offsets: Vec<u64> =
            raw_offsets.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().unwrap())).collect();
        let monotone = offsets.windows(2).all(|w| w[0] < w[1]);
        if offsets.first() != Some(&0) || offsets.last() != Some(&(tokens.len() as u64)) || !monotone {
            return Err(Error::Corrupt { what: "offsets.bin", detail: "offsets do not index tokens.bin".into() });
        }
        let corpus = TokenizedCorpus {
            tokens,
            offsets,
            vocab_size: manifest.vocab_size,
            split: manifest.split.clone(),
            source_digest: manifest.source_digest.clone(),
        };
        if corpus.len() != manifest.documents || corpus.token_digest() != manifest.token_digest {
            return Err(Error::Corrupt { what: "corpus", detail: "manifest does not match token data".into() });
        }
        Ok(corpus)
    }
}

/// Concatenate all documents and re-split into non-overlapping chunks of
/// exactly `sequence_length` tokens, dropping the remainder.
pub fn chunk_sequences(corpus: &TokenizedCorpus, sequence_length: usize) -> Result<TokenizedCorpus> {
    if sequence_length == 0 {
        return Err(Error::Config("sequence length must be at least 1".into()));
    }
    let chunks = corpus.total_tokens() / sequence_length;
    if chunks == 0 {
        return Err(Error::CorpusTooShort { available: corpus.total_tokens(), chunk: sequence_length });
    }
    let used = chunks * sequence_length;
    Ok(TokenizedCorpus {
        tokens: corpus.tokens[..used].to_vec(),
        offsets: (0..=chunks).map(|c| (c * sequence_length) as u64).collect(),
        vocab_size: corpus.vocab_size,
        split: SplitPolicy::Chunks { length: sequence_length },
        source_digest: corpus.source_digest.clone(),
    })
}

/// Shuffle the tokens of every document independently. Document `i` is
/// permuted with a generator derived from `(seed, i)`.
pub fn permute_within(corpus: &TokenizedCorpus, seed: u64) -> TokenizedCorpus {
    let mut out = corpus.clone();
    for i in 0..out.len() {
        let (s, e) = (out.offsets[i] as usize, out.offsets[i + 1] as usize);
        let mut rng = rng::indexed_stream(seed, "permute", i as u64);
        out.tokens[s..e].shuffle(&mut rng);
    }
    out
}

/// Draw `spec.n` document indices i.i.d. uniform over `[0, m)`, with replacement.
pub fn draw_subsample(m: usize, spec: &SampleSpec) -> Result<Vec<usize>> {
    if m == 0 {
        return Err(Error::EmptyInput("cannot subsample an empty corpus"));
    }
    let mut rng = rng::stream(spec.seed, "subsample");
    Ok((0..spec.n).map(|_| rng.random_range(0..m)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn blank() -> IngestOptions {
        IngestOptions { split: SplitPolicy::BlankLine { max_len: None }, hard_cap: None }
    }

    #[test]
    fn blank_line_split() {
        let c = ingest(b"ab\n\ncd", &blank()).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c.document(0), &[97, 98]);
        assert_eq!(c.document(1), &[99, 100]);
    }

    #[test]
    fn blank_line_drops_empty_documents_and_keeps_single_newlines() {
        let c = ingest(b"\n\n\na\nb\n\n\n\nc\n\n", &blank()).unwrap();
        let docs: Vec<&[u8]> = c.documents().collect();
        assert_eq!(docs, vec![&b"a\nb"[..], &b"c"[..]]);
    }

    #[test]
    fn blank_line_max_len_fallback() {
        let opts = IngestOptions { split: SplitPolicy::BlankLine { max_len: Some(3) }, hard_cap: None };
        let c = ingest(b"abcdefg\n\nhi", &opts).unwrap();
        let docs: Vec<&[u8]> = c.documents().collect();
        assert_eq!(docs, vec![&b"abc"[..], &b"def"[..], &b"g"[..], &b"hi"[..]]);
    }

    #[test]
    fn fixed_length_records() {
        let raw: Vec<u8> = (0..200u32).map(|i| (i % 251) as u8).collect();
        let c = ingest(&raw, &IngestOptions::default()).unwrap();
        assert_eq!(c.len(), 4);
        for i in 0..3 {
            assert_eq!(c.document(i).len(), 64);
        }
        assert_eq!(c.document(3).len(), 200 - 192);
    }

    #[test]
    fn empty_input_rejected() {
        assert!(matches!(ingest(b"", &IngestOptions::default()), Err(Error::EmptyInput(_))));
        assert!(matches!(ingest(b"\n\n\n", &blank()), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn hard_cap_names_document() {
        let opts = IngestOptions { split: SplitPolicy::BlankLine { max_len: None }, hard_cap: Some(3) };
        match ingest(b"ab\n\nabcdef\n\nx", &opts) {
            Err(Error::DocumentTooLong { index, len, cap }) => assert_eq!((index, len, cap), (1, 6, 3)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn chunking_floor_division() {
        let c = ingest(&[1u8; 10], &IngestOptions::default()).unwrap();
        let ch = chunk_sequences(&c, 4).unwrap();
        assert_eq!(ch.len(), 2);
        assert_eq!(ch.total_tokens(), 8);
        let unit = chunk_sequences(&c, 1).unwrap();
        assert_eq!(unit.len(), 10);
        assert!(matches!(chunk_sequences(&c, 11), Err(Error::CorpusTooShort { .. })));
    }

    #[test]
    fn chunking_spans_document_boundaries() {
        let c = ingest(b"abc\n\ndefg", &blank()).unwrap();
        let ch = chunk_sequences(&c, 3).unwrap();
        let docs: Vec<&[u8]> = ch.documents().collect();
        assert_eq!(docs, vec![&b"abc"[..], &b"def"[..]]);
    }

    #[test]
    fn permutation_singleton_and_determinism() {
        let c = ingest(b"a\n\nbcdefgh", &blank()).unwrap();
        let p1 = permute_within(&c, 9);
        let p2 = permute_within(&c, 9);
        assert_eq!(p1.document(0), b"a");
        assert_eq!(p1.token_digest(), p2.token_digest());
    }

    #[test]
    fn subsample_edges() {
        let spec = SampleSpec { n: 1, seed: 3, ..Default::default() };
        let idx = draw_subsample(17, &spec).unwrap();
        assert_eq!(idx.len(), 1);
        assert!(idx[0] < 17);
        let spec = SampleSpec { n: 50, seed: 3, ..Default::default() };
        assert!(draw_subsample(1, &spec).unwrap().iter().all(|&i| i == 0));
        assert!(draw_subsample(0, &spec).is_err());
    }

    #[test]
    fn subsample_frequencies_uniform_within_four_sigma() {
        let m = 20;
        let n = 200_000;
        let spec = SampleSpec { n, seed: 11, ..Default::default() };
        let mut counts = vec![0usize; m];
        for i in draw_subsample(m, &spec).unwrap() {
            counts[i] += 1;
        }
        let p = 1.0 / m as f64;
        let mean = n as f64 * p;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - mean).abs() <= 4.0 * sigma, "count {c} vs mean {mean}");
        }
    }

    #[test]
    fn save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let c = ingest(b"hello\n\nworld\n\n!", &blank()).unwrap();
        c.save(dir.path()).unwrap();
        let back = TokenizedCorpus::load(dir.path()).unwrap();
        assert_eq!(back, c);
        let offsets = fs::read(dir.path().join("offsets.bin")).unwrap();
        assert_eq!(offsets.len(), 8 * (c.len() + 1));
        assert_eq!(&offsets[8..16], &5u64.to_le_bytes());
    }

    proptest! {
        #[test]
        fn tokenization_roundtrips(bytes in proptest::collection::vec(any::<u8>(), 0..512)) {
            prop_assert_eq!(detokenize(&tokenize(&bytes)), bytes);
        }

        #[test]
        fn permutation_preserves_histograms(bytes in proptest::collection::vec(any::<u8>(), 1..400), seed in any::<u64>()) {
            let c = ingest(&bytes, &IngestOptions { split: SplitPolicy::FixedLength { length: 37 }, hard_cap: None }).unwrap();
            let p = permute_within(&c, seed);
            prop_assert_eq!(p.len(), c.len());
            for i in 0..c.len() {
                let mut a = c.document(i).to_vec();
                let mut b = p.document(i).to_vec();
                a.sort_unstable();
                b.sort_unstable();
                prop_assert_eq!(a, b);
            }
        }

        #[test]
        fn fixed_split_is_deterministic_and_covers_input(bytes in proptest::collection::vec(any::<u8>(), 1..600), len in 1usize..80) {
            let opts = IngestOptions { split: SplitPolicy::FixedLength { length: len }, hard_cap: None };
            let a = ingest(&bytes, &opts).unwrap();
            let b = ingest(&bytes, &opts).unwrap();
            prop_assert_eq!(&a, &b);
            prop_assert_eq!(a.total_tokens(), bytes.len());
            for i in 0..a.len().saturating_sub(1) {
                prop_assert_eq!(a.document(i).len(), len);
            }
        }
    }
}
