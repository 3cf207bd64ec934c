//! Tokenized corpora, vocabularies and frequency bookkeeping.
//!
//! Text formats are whitespace tokenized, one sentence per line. Tagged files
//! hold one `token<TAB>tag` pair per line with a blank line after each
//! sentence.

mod synthetic;

pub use synthetic::{
    gen_synthetic_language, CaseSpec, NumberSpec, SplitName, StemPool, SyntheticData, SyntheticLanguage,
    SyntheticLanguageSpec, SyntheticSplit, TargetKind, TenseSpec, SOURCE_LANG,
};

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Sentence = Vec<String>;

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const BOS: u32 = 2;
pub const EOS: u32 = 3;
pub const SPECIALS: [&str; 4] = ["<pad>", "<unk>", "<s>", "</s>"];

pub const DEFAULT_MIN_FREQUENCY: u64 = 2;
pub const DEFAULT_MAX_LEN: usize = 50;

/// Word vocabulary. Ids `0..4` are the specials in [`SPECIALS`] order; content
/// tokens follow by descending frequency, ties broken lexicographically.
/// `counts` keeps the full pre-threshold training counts, so tokens that map
/// to `<unk>` are still distinguishable from tokens never seen at all.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "VocabRepr", into = "VocabRepr")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    counts: BTreeMap<String, u64>,
    min_frequency: u64,
    max_size: Option<usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabRepr {
    tokens: Vec<String>,
    counts: BTreeMap<String, u64>,
    min_frequency: u64,
    max_size: Option<usize>,
}

impl From<VocabRepr> for Vocab {
    fn from(r: VocabRepr) -> Self {
        let index = r.tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        Vocab {
            tokens: r.tokens,
            index,
            counts: r.counts,
            min_frequency: r.min_frequency,
            max_size: r.max_size,
        }
    }
}

impl From<Vocab> for VocabRepr {
    fn from(v: Vocab) -> Self {
        VocabRepr {
            tokens: v.tokens,
            counts: v.counts,
            min_frequency: v.min_frequency,
            max_size: v.max_size,
        }
    }
}

impl Vocab {
    /// `max_size` bounds the number of content (non-special) tokens.
    pub fn build<'a, I>(sentences: I, min_frequency: u64, max_size: Option<usize>) -> Result<Self>
    where
        I: IntoIterator<Item = &'a Sentence>,
    {
        let mut counts: BTreeMap<String, u64> = BTreeMap::new();
        let mut n = 0usize;
        for s in sentences {
            n += 1;
            for t in s {
                *counts.entry(t.clone()).or_default() += 1;
            }
        }
        if n == 0 || counts.is_empty() {
            return Err(Error::Ingestion("cannot build a vocabulary from an empty corpus".into()));
        }
        let mut ranked: Vec<(&String, u64)> = counts
            .iter()
            .filter(|(t, &c)| c >= min_frequency && !SPECIALS.contains(&t.as_str()))
            .map(|(t, &c)| (t, c))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        if let Some(m) = max_size {
            ranked.truncate(m);
        }
        let tokens: Vec<String> = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(ranked.into_iter().map(|(t, _)| t.clone()))
            .collect();
        Ok(VocabRepr {
            tokens,
            counts,
            min_frequency,
            max_size,
        }
        .into())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn min_frequency(&self) -> u64 {
        self.min_frequency
    }

    /// Id of `token`, or [`UNK`].
    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Training count before thresholding; 0 for tokens never observed.
    pub fn frequency(&self, token: &str) -> u64 {
        self.counts.get(token).copied().unwrap_or(0)
    }

    /// Observed in training at all (regardless of the threshold).
    pub fn seen(&self, token: &str) -> bool {
        self.counts.contains_key(token)
    }

    pub fn counts(&self) -> &BTreeMap<String, u64> {
        &self.counts
    }

    pub fn encode(&self, sentence: &[String]) -> Vec<u32> {
        sentence.iter().map(|t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[u32]) -> Vec<String> {
        ids.iter().map(|&i| self.token(i).to_string()).collect()
    }
}

/// Character vocabulary for the convolutional word encoder. Ids `0..4` are
/// pad, unknown, sentence start and sentence end; the last two also stand in
/// for the `<s>`/`</s>` word tokens.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "CharVocabRepr", into = "CharVocabRepr")]
pub struct CharVocab {
    chars: Vec<char>,
    index: HashMap<char, u32>,
}

#[derive(Serialize, Deserialize)]
struct CharVocabRepr {
    chars: Vec<char>,
}

impl From<CharVocabRepr> for CharVocab {
    fn from(r: CharVocabRepr) -> Self {
        let index = r.chars.iter().enumerate().map(|(i, &c)| (c, i as u32 + 4)).collect();
        CharVocab { chars: r.chars, index }
    }
}

impl From<CharVocab> for CharVocabRepr {
    fn from(v: CharVocab) -> Self {
        CharVocabRepr { chars: v.chars }
    }
}

impl CharVocab {
    pub fn build<'a, I>(sentences: I) -> Self
    where
        I: IntoIterator<Item = &'a Sentence>,
    {
        let mut set = BTreeSet::new();
        for s in sentences {
            for t in s {
                set.extend(t.chars());
            }
        }
        CharVocabRepr {
            chars: set.into_iter().collect(),
        }
        .into()
    }

    pub fn len(&self) -> usize {
        self.chars.len() + 4
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Character ids of `word` with `width - 1` pad characters on each side,
    /// so every word admits at least one window of `width`.
    pub fn encode_word(&self, word: &str, width: usize) -> Vec<u32> {
        let pad = width.saturating_sub(1);
        let mut out = vec![PAD; pad];
        match word {
            "<s>" => out.push(BOS),
            "</s>" => out.push(EOS),
            "<unk>" => out.push(UNK),
            "<pad>" => out.push(PAD),
            _ => out.extend(word.chars().map(|c| self.index.get(&c).copied().unwrap_or(UNK))),
        }
        out.extend(std::iter::repeat_n(PAD, pad));
        out
    }
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct ParallelCorpus {
    pub pairs: Vec<(Sentence, Sentence)>,
    pub source_lang: String,
    pub target_lang: String,
}

impl ParallelCorpus {
    pub fn new(pairs: Vec<(Sentence, Sentence)>, source_lang: &str, target_lang: &str) -> Self {
        ParallelCorpus {
            pairs,
            source_lang: source_lang.to_string(),
            target_lang: target_lang.to_string(),
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn sources(&self) -> impl Iterator<Item = &Sentence> {
        self.pairs.iter().map(|p| &p.0)
    }

    pub fn targets(&self) -> impl Iterator<Item = &Sentence> {
        self.pairs.iter().map(|p| &p.1)
    }

    /// Copy with every target replaced by its source.
    pub fn as_autoencoder(&self) -> Self {
        ParallelCorpus {
            pairs: self.pairs.iter().map(|(s, _)| (s.clone(), s.clone())).collect(),
            source_lang: self.source_lang.clone(),
            target_lang: self.source_lang.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Annotation {
    #[default]
    Gold,
    Predicted,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaggedSentence {
    pub tokens: Sentence,
    pub tags: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct TaggedCorpus {
    pub sentences: Vec<TaggedSentence>,
    pub tagset: BTreeSet<String>,
    pub annotation: Annotation,
}

impl TaggedCorpus {
    pub fn new(sentences: Vec<TaggedSentence>, annotation: Annotation) -> Result<Self> {
        let mut tagset = BTreeSet::new();
        for (i, s) in sentences.iter().enumerate() {
            if s.tokens.len() != s.tags.len() {
                return Err(Error::Alignment(format!(
                    "sentence {i} has {} tokens but {} tags",
                    s.tokens.len(),
                    s.tags.len()
                )));
            }
            tagset.extend(s.tags.iter().cloned());
        }
        Ok(TaggedCorpus {
            sentences,
            tagset,
            annotation,
        })
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn num_tokens(&self) -> usize {
        self.sentences.iter().map(|s| s.tokens.len()).sum()
    }

    /// Same tokens with every tag rewritten by `f` (e.g. morphological tag to
    /// its part of speech).
    pub fn map_tags(&self, f: impl Fn(&str) -> String) -> Self {
        let sentences: Vec<TaggedSentence> = self
            .sentences
            .iter()
            .map(|s| TaggedSentence {
                tokens: s.tokens.clone(),
                tags: s.tags.iter().map(|t| f(t)).collect(),
            })
            .collect();
        TaggedCorpus::new(sentences, self.annotation).expect("lengths unchanged")
    }
}

/// Part of speech of a morphological tag: the part before the first `.`.
pub fn pos_of(tag: &str) -> String {
    tag.split('.').next().unwrap_or(tag).to_string()
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut lines = Vec::new();
    for (i, raw) in bytes.split(|&b| b == b'\n').enumerate() {
        let raw = raw.strip_suffix(b"\r").unwrap_or(raw);
        let line = std::str::from_utf8(raw).map_err(|_| Error::Encoding {
            path: path.display().to_string(),
            line: i + 1,
        })?;
        lines.push(line.to_string());
    }
    // a trailing newline yields one empty final element
    if bytes.ends_with(b"\n") || bytes.is_empty() {
        lines.pop();
    }
    Ok(lines)
}

fn tokenize(line: &str) -> Sentence {
    line.split_whitespace().map(str::to_string).collect()
}

/// One whitespace-tokenized sentence per line.
pub fn load_sentences(path: &Path) -> Result<Vec<Sentence>> {
    Ok(read_lines(path)?.iter().map(|l| tokenize(l)).collect())
}

/// Result of [`load_parallel`]: the kept pairs and how many were dropped.
#[derive(Clone, Debug, PartialEq)]
pub struct LoadedParallel {
    pub corpus: ParallelCorpus,
    pub dropped_long: usize,
    pub dropped_empty: usize,
}

/// Reads two aligned files. Pairs where either side exceeds `max_len`
/// tokens, or either side is empty, are dropped.
pub fn load_parallel(source: &Path, target: &Path, max_len: usize) -> Result<LoadedParallel> {
    let src = read_lines(source)?;
    let tgt = read_lines(target)?;
    if src.len() != tgt.len() {
        return Err(Error::Alignment(format!(
            "{} has {} lines but {} has {}",
            source.display(),
            src.len(),
            target.display(),
            tgt.len()
        )));
    }
    let mut pairs = Vec::with_capacity(src.len());
    let (mut long, mut empty) = (0, 0);
    for (s, t) in src.iter().zip(&tgt) {
        let (s, t) = (tokenize(s), tokenize(t));
        if s.is_empty() || t.is_empty() {
            empty += 1;
        } else if s.len() > max_len || t.len() > max_len {
            long += 1;
        } else {
            pairs.push((s, t));
        }
    }
    if long > 0 || empty > 0 {
        log::info!("load_parallel: dropped {long} pairs longer than {max_len} tokens and {empty} empty pairs");
    }
    let lang = |p: &Path| p.extension().and_then(|e| e.to_str()).unwrap_or("").to_string();
    Ok(LoadedParallel {
        corpus: ParallelCorpus::new(pairs, &lang(source), &lang(target)),
        dropped_long: long,
        dropped_empty: empty,
    })
}

pub fn write_sentences<'a>(path: &Path, sentences: impl IntoIterator<Item = &'a Sentence>) -> Result<()> {
    let mut out = String::new();
    for s in sentences {
        out.push_str(&s.join(" "));
        out.push('\n');
    }
    write_file(path, out.as_bytes())
}

pub fn write_parallel(corpus: &ParallelCorpus, source: &Path, target: &Path) -> Result<()> {
    write_sentences(source, corpus.sources())?;
    write_sentences(target, corpus.targets())
}

pub fn load_tagged(path: &Path) -> Result<TaggedCorpus> {
    let lines = read_lines(path)?;
    let mut sentences = Vec::new();
    let mut cur = TaggedSentence {
        tokens: Vec::new(),
        tags: Vec::new(),
    };
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            if !cur.tokens.is_empty() {
                sentences.push(std::mem::replace(
                    &mut cur,
                    TaggedSentence {
                        tokens: Vec::new(),
                        tags: Vec::new(),
                    },
                ));
            }
            continue;
        }
        let Some((tok, tag)) = line.split_once('\t') else {
            return Err(Error::Parse {
                path: path.display().to_string(),
                line: i + 1,
                msg: "expected token<TAB>tag".into(),
            });
        };
        let (tok, tag) = (tok.trim(), tag.trim());
        if tok.is_empty() || tag.is_empty() {
            return Err(Error::Parse {
                path: path.display().to_string(),
                line: i + 1,
                msg: "empty token or tag".into(),
            });
        }
        cur.tokens.push(tok.to_string());
        cur.tags.push(tag.to_string());
    }
    if !cur.tokens.is_empty() {
        sentences.push(cur);
    }
    TaggedCorpus::new(sentences, Annotation::Gold)
}

pub fn write_tagged(corpus: &TaggedCorpus, path: &Path) -> Result<()> {
    let mut out = String::new();
    for s in &corpus.sentences {
        for (tok, tag) in s.tokens.iter().zip(&s.tags) {
            out.push_str(tok);
            out.push('\t');
            out.push_str(tag);
            out.push('\n');
        }
        out.push('\n');
    }
    write_file(path, out.as_bytes())
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

/// Output of [`intersect_corpora`]. `warning` is set when nothing survives.
#[derive(Clone, Debug, PartialEq)]
pub struct Intersection {
    pub corpora: Vec<ParallelCorpus>,
    pub warning: Option<String>,
}

/// Restricts every corpus to the source sentences present in all of them.
///
/// A source sentence occurring `k_i` times in corpus `i` is kept
/// `min_i k_i` times everywhere. Outputs follow the first corpus' order; the
/// others are aligned to it, taking their own earliest unused pair for each
/// source, so every output has the same source-side sentence sequence.
pub fn intersect_corpora(corpora: &[ParallelCorpus]) -> Result<Intersection> {
    if corpora.len() < 2 {
        return Err(Error::Data("intersection needs at least two corpora".into()));
    }
    let lang = &corpora[0].source_lang;
    if corpora.iter().any(|c| &c.source_lang != lang) {
        return Err(Error::Data("corpora do not share a source language".into()));
    }
    let mut positions: Vec<HashMap<&Sentence, Vec<usize>>> = Vec::with_capacity(corpora.len());
    for c in corpora {
        let mut m: HashMap<&Sentence, Vec<usize>> = HashMap::new();
        for (i, (s, _)) in c.pairs.iter().enumerate() {
            m.entry(s).or_default().push(i);
        }
        positions.push(m);
    }
    let mut used: Vec<HashMap<&Sentence, usize>> = vec![HashMap::new(); corpora.len()];
    let mut picks: Vec<Vec<usize>> = vec![Vec::new(); corpora.len()];
    for (s, _) in &corpora[0].pairs {
        let taken = used[0].get(s).copied().unwrap_or(0);
        let avail = positions.iter().all(|m| m.get(s).is_some_and(|v| v.len() > taken));
        if !avail {
            continue;
        }
        for (k, m) in positions.iter().enumerate() {
            picks[k].push(m[s][taken]);
            *used[k].entry(s).or_default() += 1;
        }
    }
    let out: Vec<ParallelCorpus> = corpora
        .iter()
        .zip(&picks)
        .map(|(c, p)| ParallelCorpus {
            pairs: p.iter().map(|&i| c.pairs[i].clone()).collect(),
            source_lang: c.source_lang.clone(),
            target_lang: c.target_lang.clone(),
        })
        .collect();
    let warning = out[0].is_empty().then(|| {
        let sizes: Vec<usize> = corpora.iter().map(ParallelCorpus::len).collect();
        format!("empty intersection of corpora with sizes {sizes:?}")
    });
    if let Some(w) = &warning {
        log::warn!("{w}");
    }
    Ok(Intersection { corpora: out, warning })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenFrequency {
    pub frequency: u64,
    pub seen: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrequencyStats {
    /// One entry per token, sentence by sentence.
    pub tokens: Vec<Vec<TokenFrequency>>,
    /// Tag occurrence counts in the tagged corpus.
    pub tag_frequency: BTreeMap<String, u64>,
}

/// Training frequency and seen flag of every token of `tagged` with respect
/// to the MT training vocabulary `vocab`, plus tag counts of `tagged`.
pub fn token_frequency_stats(vocab: &Vocab, tagged: &TaggedCorpus) -> FrequencyStats {
    let tokens = tagged
        .sentences
        .iter()
        .map(|s| {
            s.tokens
                .iter()
                .map(|t| TokenFrequency {
                    frequency: vocab.frequency(t),
                    seen: vocab.seen(t),
                })
                .collect()
        })
        .collect();
    let mut tag_frequency = BTreeMap::new();
    for s in &tagged.sentences {
        for t in &s.tags {
            *tag_frequency.entry(t.clone()).or_default() += 1;
        }
    }
    FrequencyStats { tokens, tag_frequency }
}
