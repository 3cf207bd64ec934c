//! Synthetic agglutinative source language with two renderings on the target
//! side: an analytic one (inflection spelled out as separate function words,
//! loose word order, random determiners) and a fusional one (one fused suffix
//! per feature bundle, fixed verb-final order).
//!
//! Source nouns are `stem + number + case`, adjectives agree with their noun
//! through their own `number + case` suffixes, verbs are `stem + tense +
//! number` agreeing with the subject. Noun phrases are scrambled; case
//! suffixes carry the grammatical roles. The tag of every source form is a
//! function of its suffix alone (see [`SyntheticLanguage::analyze`]).

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{write_file, write_sentences, write_tagged, Annotation, ParallelCorpus, Sentence, TaggedCorpus, TaggedSentence};
use crate::error::{Error, Result};
use crate::rng::{stream, StreamRng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NumberSpec {
    pub name: String,
    pub noun: String,
    pub adj: String,
    pub verb: String,
}

/// The first case marks subjects, the second direct objects; later cases are
/// obliques rendered with their preposition in the analytic target.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseSpec {
    pub name: String,
    pub noun: String,
    pub adj: String,
    #[serde(default)]
    pub preposition: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TenseSpec {
    pub name: String,
    pub verb: String,
    #[serde(default)]
    pub auxiliary: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetKind {
    Analytic,
    Fusional,
    /// Target equals source.
    #[serde(rename = "self")]
    Autoencoder,
}

impl TargetKind {
    pub fn name(self) -> &'static str {
        match self {
            TargetKind::Analytic => "analytic",
            TargetKind::Fusional => "fusional",
            TargetKind::Autoencoder => "self",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitName {
    Train,
    Dev,
    ProbeTrain,
    ProbeDev,
    Test,
}

impl SplitName {
    pub const ALL: [SplitName; 5] = [
        SplitName::Train,
        SplitName::Dev,
        SplitName::ProbeTrain,
        SplitName::ProbeDev,
        SplitName::Test,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Dev => "dev",
            SplitName::ProbeTrain => "probe-train",
            SplitName::ProbeDev => "probe-dev",
            SplitName::Test => "test",
        }
    }

    /// Which reserved stem pool the split may draw from.
    fn reserved_pool(self) -> Option<StemPool> {
        match self {
            SplitName::Train | SplitName::Dev => None,
            SplitName::ProbeTrain | SplitName::ProbeDev => Some(StemPool::ProbeReserved),
            SplitName::Test => Some(StemPool::TestReserved),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StemPool {
    Train,
    ProbeReserved,
    TestReserved,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticLanguageSpec {
    pub seed: u64,
    pub noun_stems: usize,
    pub adj_stems: usize,
    pub verb_stems: usize,
    pub zipf_exponent: f64,
    pub numbers: Vec<NumberSpec>,
    pub cases: Vec<CaseSpec>,
    pub tenses: Vec<TenseSpec>,
    pub determiner: String,
    pub conjunction: String,
    pub negation: String,
    /// Fraction of each stem class withheld from MT training for probe splits.
    pub probe_reserved_fraction: f64,
    /// Fraction withheld for the test split only.
    pub test_reserved_fraction: f64,
    /// Probability that a held-out split draws a stem from its reserved pool.
    pub reserved_rate: f64,
    /// Generation fails if fewer test tokens than this are unseen in training.
    pub min_unseen_rate: f64,
    pub p_object: f64,
    pub p_oblique: f64,
    pub p_adjective: f64,
    pub p_determiner: f64,
    pub p_negation: f64,
    pub p_second_clause: f64,
    /// Probability that a clause's noun phrases leave canonical case order.
    pub p_scramble: f64,
    /// Target used by [`gen_synthetic_language`].
    pub target: TargetKind,
    pub train_sentences: usize,
    pub dev_sentences: usize,
    pub probe_train_sentences: usize,
    pub probe_dev_sentences: usize,
    pub test_sentences: usize,
}

fn ns(name: &str, noun: &str, adj: &str, verb: &str) -> NumberSpec {
    NumberSpec {
        name: name.into(),
        noun: noun.into(),
        adj: adj.into(),
        verb: verb.into(),
    }
}

fn cs(name: &str, noun: &str, adj: &str, prep: Option<&str>) -> CaseSpec {
    CaseSpec {
        name: name.into(),
        noun: noun.into(),
        adj: adj.into(),
        preposition: prep.map(Into::into),
    }
}

fn ts(name: &str, verb: &str, aux: Option<&str>) -> TenseSpec {
    TenseSpec {
        name: name.into(),
        verb: verb.into(),
        auxiliary: aux.map(Into::into),
    }
}

impl Default for SyntheticLanguageSpec {
    fn default() -> Self {
        SyntheticLanguageSpec {
            seed: 1,
            noun_stems: 300,
            adj_stems: 100,
            verb_stems: 100,
            zipf_exponent: 1.0,
            numbers: vec![ns("SG", "o", "e", "um"), ns("PL", "ler", "lik", "iz")],
            cases: vec![
                cs("NOM", "m", "s", None),
                cs("ACC", "ni", "su", None),
                cs("DAT", "ga", "gi", Some("to")),
                cs("LOC", "da", "ti", Some("in")),
            ],
            tenses: vec![
                ts("PAST", "di", Some("did")),
                ts("PRES", "yor", None),
                ts("FUT", "ecek", Some("will")),
            ],
            determiner: "bu".into(),
            conjunction: "va".into(),
            negation: "emas".into(),
            probe_reserved_fraction: 0.15,
            test_reserved_fraction: 0.15,
            reserved_rate: 0.5,
            min_unseen_rate: 0.3,
            p_object: 0.7,
            p_oblique: 0.35,
            p_adjective: 0.35,
            p_determiner: 0.2,
            p_negation: 0.15,
            p_second_clause: 0.3,
            p_scramble: 0.25,
            target: TargetKind::Analytic,
            train_sentences: 4000,
            dev_sentences: 200,
            probe_train_sentences: 1000,
            probe_dev_sentences: 200,
            test_sentences: 500,
        }
    }
}

impl SyntheticLanguageSpec {
    pub fn split_size(&self, split: SplitName) -> usize {
        match split {
            SplitName::Train => self.train_sentences,
            SplitName::Dev => self.dev_sentences,
            SplitName::ProbeTrain => self.probe_train_sentences,
            SplitName::ProbeDev => self.probe_dev_sentences,
            SplitName::Test => self.test_sentences,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Spec(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("spec serializes")
    }
}

/// Rank-frequency sampler with `P(rank r) ∝ 1 / (r + 1)^s`.
#[derive(Clone, Debug)]
pub struct ZipfSampler {
    cumulative: Vec<f64>,
}

impl ZipfSampler {
    pub fn new(n: usize, exponent: f64) -> Self {
        let mut acc = 0.0;
        let cumulative = (0..n)
            .map(|r| {
                acc += 1.0 / ((r + 1) as f64).powf(exponent);
                acc
            })
            .collect();
        ZipfSampler { cumulative }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let total = *self.cumulative.last().expect("non-empty");
        let u = rng.gen::<f64>() * total;
        self.cumulative.partition_point(|&c| c <= u).min(self.cumulative.len() - 1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
enum Class {
    Noun,
    Adj,
    Verb,
}

#[derive(Clone, Debug)]
struct Lexeme {
    stem: String,
    lemma: String,
}

#[derive(Clone, Debug)]
struct ClassLexicon {
    entries: Vec<Lexeme>,
    pools: [Vec<usize>; 3],
    zipf: [ZipfSampler; 3],
}

impl ClassLexicon {
    fn draw(&self, pool: StemPool, rng: &mut StreamRng) -> usize {
        let i = pool as usize;
        self.pools[i][self.zipf[i].sample(rng)]
    }
}

#[derive(Clone, Debug)]
struct Np {
    case: usize,
    number: usize,
    det: bool,
    adj: Option<usize>,
    noun: usize,
}

#[derive(Clone, Debug)]
struct Clause {
    /// Role order: subject, optional object, obliques by case index.
    nps: Vec<Np>,
    scramble: Vec<usize>,
    neg: bool,
    verb: usize,
    tense: usize,
}

#[derive(Default)]
struct Rendered {
    tokens: Sentence,
    tags: Vec<String>,
}

impl Rendered {
    fn push(&mut self, tok: impl Into<String>, tag: impl Into<String>) {
        self.tokens.push(tok.into());
        self.tags.push(tag.into());
    }
}

/// One generated split: aligned source sentences with gold morphological
/// tags, and both target renderings with their tags.
#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct SyntheticSplit {
    pub source: Vec<Sentence>,
    pub source_tags: Vec<Vec<String>>,
    pub analytic: Vec<Sentence>,
    pub analytic_tags: Vec<Vec<String>>,
    pub fusional: Vec<Sentence>,
    pub fusional_tags: Vec<Vec<String>>,
}

fn tagged(tokens: &[Sentence], tags: &[Vec<String>]) -> TaggedCorpus {
    let sentences = tokens
        .iter()
        .zip(tags)
        .map(|(t, g)| TaggedSentence {
            tokens: t.clone(),
            tags: g.clone(),
        })
        .collect();
    TaggedCorpus::new(sentences, Annotation::Gold).expect("generator keeps tags aligned")
}

impl SyntheticSplit {
    pub fn len(&self) -> usize {
        self.source.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source.is_empty()
    }

    pub fn target(&self, kind: TargetKind) -> (&[Sentence], &[Vec<String>]) {
        match kind {
            TargetKind::Analytic => (&self.analytic, &self.analytic_tags),
            TargetKind::Fusional => (&self.fusional, &self.fusional_tags),
            TargetKind::Autoencoder => (&self.source, &self.source_tags),
        }
    }

    pub fn parallel(&self, kind: TargetKind) -> ParallelCorpus {
        let (tgt, _) = self.target(kind);
        ParallelCorpus::new(
            self.source.iter().cloned().zip(tgt.iter().cloned()).collect(),
            SOURCE_LANG,
            kind.name(),
        )
    }

    pub fn source_tagged(&self) -> TaggedCorpus {
        tagged(&self.source, &self.source_tags)
    }

    pub fn target_tagged(&self, kind: TargetKind) -> TaggedCorpus {
        let (t, g) = self.target(kind);
        tagged(t, g)
    }
}

/// Language code of generated source text.
pub const SOURCE_LANG: &str = "syn";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticData {
    pub spec: SyntheticLanguageSpec,
    pub splits: BTreeMap<SplitName, SyntheticSplit>,
    /// Fraction of test source tokens absent from the training source side.
    pub test_unseen_rate: f64,
}

impl SyntheticData {
    pub fn split(&self, name: SplitName) -> &SyntheticSplit {
        &self.splits[&name]
    }

    /// Writes every split in the file-corpus layout read by studies, with
    /// `syn` as the source language, plus `spec.toml`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        write_file(&dir.join("spec.toml"), self.spec.to_toml().as_bytes())?;
        for (name, split) in &self.splits {
            let n = name.name();
            write_tagged(&split.source_tagged(), &dir.join(format!("{n}.{SOURCE_LANG}.tag")))?;
            for kind in [TargetKind::Analytic, TargetKind::Fusional] {
                let k = kind.name();
                let pair = format!("{n}.{SOURCE_LANG}-{k}");
                write_sentences(&dir.join(format!("{pair}.{SOURCE_LANG}")), &split.source)?;
                write_sentences(&dir.join(format!("{pair}.{k}")), split.target(kind).0)?;
                write_tagged(&split.target_tagged(kind), &dir.join(format!("{pair}.{k}.tag")))?;
            }
        }
        Ok(())
    }
}

/// Lexicon and grammar instantiated from a spec.
#[derive(Clone, Debug)]
pub struct SyntheticLanguage {
    spec: SyntheticLanguageSpec,
    nouns: ClassLexicon,
    adjs: ClassLexicon,
    verbs: ClassLexicon,
    /// (suffix, tag), longest first.
    suffix_tags: Vec<(String, String)>,
    fused_noun: Vec<Vec<String>>,
    fused_adj: Vec<Vec<String>>,
    fused_verb: Vec<Vec<String>>,
}

const SRC_CONS: &[u8] = b"bdgklmnprstvz";
const SRC_VOW: &[u8] = b"aeiou";
const TGT_CONS: &[u8] = b"bcfhjkmpqrtwx";
const TGT_VOW: &[u8] = b"aiouy";

fn syllables(rng: &mut StreamRng, cons: &[u8], vow: &[u8], min: usize, max: usize) -> String {
    let n = rng.gen_range(min..=max);
    let mut s = String::new();
    for _ in 0..n {
        s.push(*cons.choose(rng).expect("non-empty") as char);
        s.push(*vow.choose(rng).expect("non-empty") as char);
    }
    s
}

const ANALYTIC_WORDS: [&str; 7] = ["the", "a", "this", "very", "not", "and", "pl"];

fn suffix_free(items: &[(String, String)]) -> Option<(String, String)> {
    for (i, (a, ta)) in items.iter().enumerate() {
        for (b, tb) in &items[i + 1..] {
            if ta != tb && (a.ends_with(b.as_str()) || b.ends_with(a.as_str())) {
                return Some((a.clone(), b.clone()));
            }
        }
    }
    None
}

impl SyntheticLanguage {
    pub fn new(spec: &SyntheticLanguageSpec) -> Result<Self> {
        validate(spec)?;
        let mut suffix_tags = Vec::new();
        for (ni, n) in spec.numbers.iter().enumerate() {
            for c in &spec.cases {
                suffix_tags.push((format!("{}{}", n.noun, c.noun), format!("N.{}.{}", n.name, c.name)));
                suffix_tags.push((format!("{}{}", n.adj, c.adj), format!("ADJ.{}.{}", n.name, c.name)));
            }
            for t in &spec.tenses {
                suffix_tags.push((format!("{}{}", t.verb, n.verb), format!("V.{}.{}", t.name, spec.numbers[ni].name)));
            }
        }
        if let Some((a, b)) = suffix_free(&suffix_tags) {
            return Err(Error::Spec(format!(
                "paradigm inconsistency: suffix {a:?} and {b:?} cannot be told apart"
            )));
        }
        suffix_tags.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then_with(|| a.0.cmp(&b.0)));

        let mut rng = stream(spec.seed, "synthetic/lexicon");
        let mut lang = SyntheticLanguage {
            spec: spec.clone(),
            nouns: empty_lexicon(),
            adjs: empty_lexicon(),
            verbs: empty_lexicon(),
            suffix_tags,
            fused_noun: Vec::new(),
            fused_adj: Vec::new(),
            fused_verb: Vec::new(),
        };
        lang.build_fused(&mut rng)?;

        let mut stems = HashSet::new();
        let mut forms: HashSet<String> = [&spec.determiner, &spec.conjunction, &spec.negation]
            .into_iter()
            .cloned()
            .collect();
        let mut lemmas: HashSet<String> = ANALYTIC_WORDS.iter().map(|s| s.to_string()).collect();
        lemmas.extend(spec.cases.iter().filter_map(|c| c.preposition.clone()));
        lemmas.extend(spec.tenses.iter().filter_map(|t| t.auxiliary.clone()));
        lemmas.extend(spec.numbers.iter().skip(1).map(|n| n.name.to_lowercase()));
        lemmas.extend(["ce", "ne", "i"].map(String::from));
        for (class, count) in [
            (Class::Noun, spec.noun_stems),
            (Class::Adj, spec.adj_stems),
            (Class::Verb, spec.verb_stems),
        ] {
            let mut entries = Vec::with_capacity(count);
            let mut attempts = 0;
            while entries.len() < count {
                attempts += 1;
                if attempts > count * 1000 {
                    return Err(Error::Spec(format!("could not draw {count} distinct {class:?} stems")));
                }
                let stem = syllables(&mut rng, SRC_CONS, SRC_VOW, 1, 3);
                if stems.contains(&stem) {
                    continue;
                }
                let fs = lang.source_forms(class, &stem);
                if fs.iter().any(|(f, tag)| forms.contains(f) || lang.analyze(f).as_deref() != Some(tag)) {
                    continue;
                }
                let lemma = loop {
                    let l = syllables(&mut rng, TGT_CONS, TGT_VOW, 2, 3);
                    if !lemmas.contains(&l) {
                        break l;
                    }
                };
                lemmas.insert(lemma.clone());
                stems.insert(stem.clone());
                forms.extend(fs.into_iter().map(|(f, _)| f));
                entries.push(Lexeme { stem, lemma });
            }
            let lex = make_pools(entries, spec, &mut rng)?;
            match class {
                Class::Noun => lang.nouns = lex,
                Class::Adj => lang.adjs = lex,
                Class::Verb => lang.verbs = lex,
            }
        }
        Ok(lang)
    }

    fn build_fused(&mut self, rng: &mut StreamRng) -> Result<()> {
        let spec = &self.spec;
        let (nn, nc, nt) = (spec.numbers.len(), spec.cases.len(), spec.tenses.len());
        for _ in 0..1000 {
            let mut draw = |rows: usize, cols: usize| -> Vec<Vec<String>> {
                (0..rows)
                    .map(|_| (0..cols).map(|_| syllables(rng, TGT_CONS, TGT_VOW, 1, 2)).collect())
                    .collect()
            };
            let noun = draw(nn, nc);
            let adj = draw(nn, nc);
            let verb = draw(nt, nn);
            let mut all: Vec<(String, String)> = Vec::new();
            for (r, row) in noun.iter().enumerate() {
                for (c, s) in row.iter().enumerate() {
                    all.push((s.clone(), format!("N{r}{c}")));
                }
            }
            for (r, row) in adj.iter().enumerate() {
                for (c, s) in row.iter().enumerate() {
                    all.push((s.clone(), format!("A{r}{c}")));
                }
            }
            for (r, row) in verb.iter().enumerate() {
                for (c, s) in row.iter().enumerate() {
                    all.push((s.clone(), format!("V{r}{c}")));
                }
            }
            let distinct: HashSet<&String> = all.iter().map(|p| &p.0).collect();
            if distinct.len() == all.len() && suffix_free(&all).is_none() {
                self.fused_noun = noun;
                self.fused_adj = adj;
                self.fused_verb = verb;
                return Ok(());
            }
        }
        Err(Error::Spec("could not draw a consistent fusional paradigm".into()))
    }

    pub fn spec(&self) -> &SyntheticLanguageSpec {
        &self.spec
    }

    fn source_forms(&self, class: Class, stem: &str) -> Vec<(String, String)> {
        let s = &self.spec;
        let mut out = Vec::new();
        for n in &s.numbers {
            match class {
                Class::Noun => {
                    for c in &s.cases {
                        out.push((format!("{stem}{}{}", n.noun, c.noun), format!("N.{}.{}", n.name, c.name)));
                    }
                }
                Class::Adj => {
                    for c in &s.cases {
                        out.push((format!("{stem}{}{}", n.adj, c.adj), format!("ADJ.{}.{}", n.name, c.name)));
                    }
                }
                Class::Verb => {
                    for t in &s.tenses {
                        out.push((format!("{stem}{}{}", t.verb, n.verb), format!("V.{}.{}", t.name, n.name)));
                    }
                }
            }
        }
        out
    }

    /// Tag of a source surface form, read off its suffix. `None` for strings
    /// the grammar cannot produce.
    pub fn analyze(&self, form: &str) -> Option<String> {
        let s = &self.spec;
        if form == s.determiner {
            return Some("DET".into());
        }
        if form == s.conjunction {
            return Some("CONJ".into());
        }
        if form == s.negation {
            return Some("NEG".into());
        }
        self.suffix_tags
            .iter()
            .find(|(suf, _)| form.len() > suf.len() && form.ends_with(suf.as_str()))
            .map(|(_, tag)| tag.clone())
    }

    /// Every source form the lexicon can produce, with its tag.
    pub fn all_source_forms(&self) -> Vec<(String, String)> {
        let mut out = vec![
            (self.spec.determiner.clone(), "DET".to_string()),
            (self.spec.conjunction.clone(), "CONJ".to_string()),
            (self.spec.negation.clone(), "NEG".to_string()),
        ];
        for (class, lex) in [(Class::Noun, &self.nouns), (Class::Adj, &self.adjs), (Class::Verb, &self.verbs)] {
            for e in &lex.entries {
                out.extend(self.source_forms(class, &e.stem));
            }
        }
        out
    }

    fn draw(&self, lex: &ClassLexicon, split: SplitName, rng: &mut StreamRng) -> usize {
        match split.reserved_pool() {
            Some(pool) if rng.gen_bool(self.spec.reserved_rate) => lex.draw(pool, rng),
            _ => lex.draw(StemPool::Train, rng),
        }
    }

    fn np(&self, case: usize, split: SplitName, rng: &mut StreamRng) -> Np {
        let s = &self.spec;
        let number = rng.gen_range(0..s.numbers.len());
        let det = rng.gen_bool(s.p_determiner);
        let adj = rng.gen_bool(s.p_adjective).then(|| self.draw(&self.adjs, split, rng));
        let noun = self.draw(&self.nouns, split, rng);
        Np {
            case,
            number,
            det,
            adj,
            noun,
        }
    }

    fn clause(&self, split: SplitName, rng: &mut StreamRng) -> Clause {
        let s = &self.spec;
        let mut nps = vec![self.np(0, split, rng)];
        if s.cases.len() > 1 && rng.gen_bool(s.p_object) {
            nps.push(self.np(1, split, rng));
        }
        for c in 2..s.cases.len() {
            if rng.gen_bool(s.p_oblique) {
                nps.push(self.np(c, split, rng));
            }
        }
        let mut scramble: Vec<usize> = (0..nps.len()).collect();
        if rng.gen_bool(s.p_scramble) {
            scramble.shuffle(rng);
        }
        Clause {
            nps,
            scramble,
            neg: rng.gen_bool(s.p_negation),
            verb: self.draw(&self.verbs, split, rng),
            tense: rng.gen_range(0..s.tenses.len()),
        }
    }

    fn render_source(&self, clauses: &[Clause], out: &mut Rendered) {
        let s = &self.spec;
        for (k, cl) in clauses.iter().enumerate() {
            if k > 0 {
                out.push(s.conjunction.clone(), "CONJ");
            }
            for &i in &cl.scramble {
                let np = &cl.nps[i];
                let (n, c) = (&s.numbers[np.number], &s.cases[np.case]);
                if np.det {
                    out.push(s.determiner.clone(), "DET");
                }
                if let Some(a) = np.adj {
                    out.push(
                        format!("{}{}{}", self.adjs.entries[a].stem, n.adj, c.adj),
                        format!("ADJ.{}.{}", n.name, c.name),
                    );
                }
                out.push(
                    format!("{}{}{}", self.nouns.entries[np.noun].stem, n.noun, c.noun),
                    format!("N.{}.{}", n.name, c.name),
                );
            }
            if cl.neg {
                out.push(s.negation.clone(), "NEG");
            }
            let subj = &s.numbers[cl.nps[0].number];
            let t = &s.tenses[cl.tense];
            out.push(
                format!("{}{}{}", self.verbs.entries[cl.verb].stem, t.verb, subj.verb),
                format!("V.{}.{}", t.name, subj.name),
            );
        }
    }

    fn render_analytic_np(&self, np: &Np, rng: &mut StreamRng, out: &mut Rendered) {
        let s = &self.spec;
        if let Some(p) = &s.cases[np.case].preposition {
            out.push(p.clone(), "PREP");
        }
        if np.det {
            out.push("this", "DET");
        } else {
            match rng.gen_range(0..3) {
                0 => out.push("the", "DET"),
                1 => out.push("a", "DET"),
                _ => {}
            }
        }
        let adj_first = rng.gen_bool(0.5);
        let push_adj = |out: &mut Rendered, rng: &mut StreamRng| {
            if let Some(a) = np.adj {
                if rng.gen_bool(0.3) {
                    out.push("very", "ADV");
                }
                out.push(self.adjs.entries[a].lemma.clone(), "ADJ");
            }
        };
        if adj_first {
            push_adj(out, rng);
        }
        out.push(self.nouns.entries[np.noun].lemma.clone(), "N");
        if np.number > 0 {
            out.push(s.numbers[np.number].name.to_lowercase(), "NUM");
        }
        if !adj_first {
            push_adj(out, rng);
        }
    }

    fn render_analytic(&self, clauses: &[Clause], rng: &mut StreamRng, out: &mut Rendered) {
        for (k, cl) in clauses.iter().enumerate() {
            if k > 0 {
                out.push("and", "CONJ");
            }
            self.render_analytic_np(&cl.nps[0], rng, out);
            if let Some(aux) = &self.spec.tenses[cl.tense].auxiliary {
                out.push(aux.clone(), "AUX");
            }
            if cl.neg {
                out.push("not", "NEG");
            }
            out.push(self.verbs.entries[cl.verb].lemma.clone(), "V");
            let mut rest: Vec<&Np> = cl.nps[1..].iter().collect();
            let objects = rest.iter().take_while(|np| np.case == 1).count();
            rest[objects..].shuffle(rng);
            for np in rest {
                self.render_analytic_np(np, rng, out);
            }
        }
    }

    fn render_fusional(&self, clauses: &[Clause], out: &mut Rendered) {
        let s = &self.spec;
        for (k, cl) in clauses.iter().enumerate() {
            if k > 0 {
                out.push("i", "CONJ");
            }
            for np in &cl.nps {
                let (n, c) = (&s.numbers[np.number], &s.cases[np.case]);
                if np.det {
                    out.push("ce", "DET");
                }
                if let Some(a) = np.adj {
                    out.push(
                        format!("{}{}", self.adjs.entries[a].lemma, self.fused_adj[np.number][np.case]),
                        format!("ADJ.{}.{}", n.name, c.name),
                    );
                }
                out.push(
                    format!("{}{}", self.nouns.entries[np.noun].lemma, self.fused_noun[np.number][np.case]),
                    format!("N.{}.{}", n.name, c.name),
                );
            }
            if cl.neg {
                out.push("ne", "NEG");
            }
            let subj = cl.nps[0].number;
            let t = &s.tenses[cl.tense];
            out.push(
                format!("{}{}", self.verbs.entries[cl.verb].lemma, self.fused_verb[cl.tense][subj]),
                format!("V.{}.{}", t.name, s.numbers[subj].name),
            );
        }
    }

    /// `n` sentences for `split`, drawn from the split's own seed stream.
    pub fn generate(&self, split: SplitName, n: usize) -> SyntheticSplit {
        let mut rng = stream(self.spec.seed, &format!("synthetic/{}", split.name()));
        let mut out = SyntheticSplit::default();
        for _ in 0..n {
            let mut clauses = vec![self.clause(split, &mut rng)];
            if rng.gen_bool(self.spec.p_second_clause) {
                clauses.push(self.clause(split, &mut rng));
            }
            let (mut src, mut ana, mut fus) = (Rendered::default(), Rendered::default(), Rendered::default());
            self.render_source(&clauses, &mut src);
            self.render_analytic(&clauses, &mut rng, &mut ana);
            self.render_fusional(&clauses, &mut fus);
            out.source.push(src.tokens);
            out.source_tags.push(src.tags);
            out.analytic.push(ana.tokens);
            out.analytic_tags.push(ana.tags);
            out.fusional.push(fus.tokens);
            out.fusional_tags.push(fus.tags);
        }
        out
    }

    /// All five splits at the spec's sizes.
    pub fn generate_all(&self) -> Result<SyntheticData> {
        let splits: BTreeMap<SplitName, SyntheticSplit> = SplitName::ALL
            .iter()
            .map(|&s| (s, self.generate(s, self.spec.split_size(s))))
            .collect();
        let train: HashSet<&String> = splits[&SplitName::Train].source.iter().flatten().collect();
        let test = &splits[&SplitName::Test].source;
        let total: usize = test.iter().map(Vec::len).sum();
        let unseen = test.iter().flatten().filter(|t| !train.contains(t)).count();
        let rate = if total == 0 { 0.0 } else { unseen as f64 / total as f64 };
        if total > 0 && rate < self.spec.min_unseen_rate {
            return Err(Error::Spec(format!(
                "test unseen-word rate {rate:.3} below required {}",
                self.spec.min_unseen_rate
            )));
        }
        Ok(SyntheticData {
            spec: self.spec.clone(),
            splits,
            test_unseen_rate: rate,
        })
    }
}

fn empty_lexicon() -> ClassLexicon {
    ClassLexicon {
        entries: Vec::new(),
        pools: [Vec::new(), Vec::new(), Vec::new()],
        zipf: [ZipfSampler::new(1, 1.0), ZipfSampler::new(1, 1.0), ZipfSampler::new(1, 1.0)],
    }
}

fn make_pools(entries: Vec<Lexeme>, spec: &SyntheticLanguageSpec, rng: &mut StreamRng) -> Result<ClassLexicon> {
    let n = entries.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let probe = ((n as f64) * spec.probe_reserved_fraction).round() as usize;
    let test = ((n as f64) * spec.test_reserved_fraction).round() as usize;
    if probe + test >= n || (spec.reserved_rate > 0.0 && (probe == 0 || test == 0)) {
        return Err(Error::Spec(format!(
            "stem inventory of {n} cannot be split into train/probe/test pools"
        )));
    }
    let train_pool = order[..n - probe - test].to_vec();
    let probe_pool = order[n - probe - test..n - test].to_vec();
    let test_pool = order[n - test..].to_vec();
    let zipf = [
        ZipfSampler::new(train_pool.len(), spec.zipf_exponent),
        ZipfSampler::new(probe_pool.len().max(1), spec.zipf_exponent),
        ZipfSampler::new(test_pool.len().max(1), spec.zipf_exponent),
    ];
    Ok(ClassLexicon {
        entries,
        pools: [train_pool, probe_pool, test_pool],
        zipf,
    })
}

fn validate(spec: &SyntheticLanguageSpec) -> Result<()> {
    let err = |m: String| Err(Error::Spec(m));
    if spec.numbers.is_empty() || spec.cases.is_empty() || spec.tenses.is_empty() {
        return err("paradigm needs at least one number, case and tense".into());
    }
    if spec.noun_stems < 3 || spec.adj_stems < 3 || spec.verb_stems < 3 {
        return err("each stem class needs at least 3 stems".into());
    }
    let mut names = HashSet::new();
    for n in &spec.numbers {
        if n.noun.is_empty() || n.adj.is_empty() || n.verb.is_empty() {
            return err(format!("empty suffix for number {}", n.name));
        }
        if !names.insert(("num", n.name.clone())) {
            return err(format!("duplicate number {}", n.name));
        }
    }
    for c in &spec.cases {
        if c.noun.is_empty() || c.adj.is_empty() {
            return err(format!("empty suffix for case {}", c.name));
        }
        if !names.insert(("case", c.name.clone())) {
            return err(format!("duplicate case {}", c.name));
        }
    }
    for t in &spec.tenses {
        if t.verb.is_empty() {
            return err(format!("empty suffix for tense {}", t.name));
        }
        if !names.insert(("tense", t.name.clone())) {
            return err(format!("duplicate tense {}", t.name));
        }
    }
    let probs = [
        spec.p_object,
        spec.p_oblique,
        spec.p_adjective,
        spec.p_determiner,
        spec.p_negation,
        spec.p_second_clause,
        spec.p_scramble,
        spec.reserved_rate,
        spec.min_unseen_rate,
    ];
    if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return err("probabilities must lie in [0, 1]".into());
    }
    if spec.zipf_exponent.is_nan() || spec.zipf_exponent < 0.0 {
        return err("zipf exponent must be non-negative".into());
    }
    let words = [&spec.determiner, &spec.conjunction, &spec.negation];
    if words.iter().any(|w| w.is_empty() || w.contains(char::is_whitespace)) {
        return err("function words must be non-empty single tokens".into());
    }
    Ok(())
}

/// Generates `n_sentences` training sentences and returns the parallel corpus
/// for `spec.target` with source- and target-side gold tags.
pub fn gen_synthetic_language(
    spec: &SyntheticLanguageSpec,
    n_sentences: usize,
) -> Result<(ParallelCorpus, TaggedCorpus, TaggedCorpus)> {
    let lang = SyntheticLanguage::new(spec)?;
    let split = lang.generate(SplitName::Train, n_sentences);
    Ok((split.parallel(spec.target), split.source_tagged(), split.target_tagged(spec.target)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tags_recoverable_from_suffix() {
        let mut spec = SyntheticLanguageSpec::default();
        spec.cases.truncate(2);
        spec.numbers.truncate(2);
        let lang = SyntheticLanguage::new(&spec).unwrap();
        for (form, tag) in lang.all_source_forms() {
            assert_eq!(lang.analyze(&form).as_deref(), Some(tag.as_str()), "{form}");
        }
        let s = lang.generate(SplitName::Train, 200);
        for (toks, tags) in s.source.iter().zip(&s.source_tags) {
            for (t, g) in toks.iter().zip(tags) {
                assert_eq!(lang.analyze(t).as_deref(), Some(g.as_str()));
            }
        }
    }

    #[test]
    fn deterministic_under_seed() {
        let spec = SyntheticLanguageSpec::default();
        let a = gen_synthetic_language(&spec, 50).unwrap();
        let b = gen_synthetic_language(&spec, 50).unwrap();
        assert_eq!(a, b);
        let other = SyntheticLanguageSpec {
            seed: 2,
            ..spec
        };
        assert_ne!(a.0, gen_synthetic_language(&other, 50).unwrap().0);
    }

    #[test]
    fn inconsistent_paradigm_is_rejected() {
        let mut spec = SyntheticLanguageSpec::default();
        // noun SG+NOM = "om", adjective SG+NOM = "e"+"om" ends with it
        spec.numbers[0].adj = "e".into();
        spec.cases[0].adj = "om".into();
        assert!(matches!(SyntheticLanguage::new(&spec), Err(Error::Spec(_))));
        let mut spec = SyntheticLanguageSpec::default();
        spec.cases[1].noun = String::new();
        assert!(matches!(SyntheticLanguage::new(&spec), Err(Error::Spec(_))));
    }

    #[test]
    fn held_out_test_has_unseen_words() {
        let spec = SyntheticLanguageSpec {
            train_sentences: 600,
            dev_sentences: 20,
            probe_train_sentences: 20,
            probe_dev_sentences: 20,
            test_sentences: 200,
            ..Default::default()
        };
        let data = SyntheticLanguage::new(&spec).unwrap().generate_all().unwrap();
        assert!(data.test_unseen_rate >= spec.min_unseen_rate, "{}", data.test_unseen_rate);
    }

    #[test]
    fn zipf_sampler_ranks() {
        let z = ZipfSampler::new(3, 1.0);
        let mut rng = stream(0, "z");
        let mut c = [0usize; 3];
        for _ in 0..30_000 {
            c[z.sample(&mut rng)] += 1;
        }
        // weights 1, 1/2, 1/3
        let total = 1.0 + 0.5 + 1.0 / 3.0;
        assert!((c[0] as f64 / 30_000.0 - 1.0 / total).abs() < 0.02);
        assert!((c[2] as f64 / 30_000.0 - (1.0 / 3.0) / total).abs() < 0.02);
    }

    #[test]
    fn targets_are_aligned_with_tags() {
        let lang = SyntheticLanguage::new(&SyntheticLanguageSpec::default()).unwrap();
        let s = lang.generate(SplitName::Dev, 100);
        for k in [TargetKind::Analytic, TargetKind::Fusional, TargetKind::Autoencoder] {
            let (t, g) = s.target(k);
            assert_eq!(t.len(), 100);
            assert!(t.iter().zip(g).all(|(a, b)| a.len() == b.len() && !a.is_empty()));
        }
    }
}
