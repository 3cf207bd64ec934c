//! Corpora behind a study.
//!
//! File corpora follow a naming convention inside one directory, with `src`
//! the source language and `tgt` a target language:
//!
//! ```text
//! {train,dev,test}.src-tgt.src       parallel text, one sentence per line
//! {train,dev,test}.src-tgt.tgt
//! {probe-train,probe-dev,test}.src.tag          source-side tagged data
//! {probe-train,probe-dev,test}.src-tgt.tgt.tag  target-side tagged data,
//! {probe-train,probe-dev,test}.src-tgt.src      with aligned sources
//! ```
//!
//! The target-side files are only needed for decoder probing.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{
    load_parallel, load_sentences, load_tagged, ParallelCorpus, Sentence, SplitName, SyntheticLanguage,
    SyntheticLanguageSpec, TaggedCorpus, TargetKind, SOURCE_LANG,
};
use crate::error::{Error, Result};

/// Target name of the autoencoder control.
pub const SELF_TARGET: &str = "self";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum CorpusRef {
    Synthetic {
        #[serde(default)]
        language: SyntheticLanguageSpec,
    },
    Files {
        dir: PathBuf,
        source: String,
        #[serde(default = "default_max_len")]
        max_len: usize,
    },
}

fn default_max_len() -> usize {
    50
}

impl Default for CorpusRef {
    fn default() -> Self {
        CorpusRef::Synthetic {
            language: SyntheticLanguageSpec::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum ProbeSplit {
    Train,
    Dev,
    Test,
}

impl ProbeSplit {
    pub const ALL: [ProbeSplit; 3] = [ProbeSplit::Train, ProbeSplit::Dev, ProbeSplit::Test];

    pub fn name(self) -> &'static str {
        match self {
            ProbeSplit::Train => "probe-train",
            ProbeSplit::Dev => "probe-dev",
            ProbeSplit::Test => "test",
        }
    }
}

/// Tagged target sentences with the sources they translate.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderProbe {
    pub sources: Vec<Sentence>,
    pub tagged: TaggedCorpus,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TargetData {
    pub train: ParallelCorpus,
    pub dev: ParallelCorpus,
    pub test: ParallelCorpus,
    /// Indexed by [`ProbeSplit`]; `None` when no target tags are available.
    pub decoder_probe: Option<[DecoderProbe; 3]>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StudyData {
    pub source_lang: String,
    /// Source-side tagged data, indexed by [`ProbeSplit`].
    pub source_probe: [TaggedCorpus; 3],
    pub targets: BTreeMap<String, TargetData>,
}

impl StudyData {
    pub fn target(&self, name: &str) -> Result<&TargetData> {
        self.targets
            .get(name)
            .ok_or_else(|| Error::Manifest(format!("corpus has no target {name:?}")))
    }
}

/// Loads the named targets (never [`SELF_TARGET`]).
pub fn load_study_data(corpus: &CorpusRef, targets: &[String]) -> Result<StudyData> {
    match corpus {
        CorpusRef::Synthetic { language } => synthetic(language, targets),
        CorpusRef::Files { dir, source, max_len } => files(dir, source, *max_len, targets),
    }
}

fn synthetic(spec: &SyntheticLanguageSpec, targets: &[String]) -> Result<StudyData> {
    let data = SyntheticLanguage::new(spec)?.generate_all()?;
    let splits = [SplitName::ProbeTrain, SplitName::ProbeDev, SplitName::Test];
    let mut out = BTreeMap::new();
    for t in targets {
        let kind = match t.as_str() {
            "analytic" => TargetKind::Analytic,
            "fusional" => TargetKind::Fusional,
            _ => return Err(Error::Manifest(format!("synthetic corpora have no target {t:?}"))),
        };
        out.insert(
            t.clone(),
            TargetData {
                train: data.split(SplitName::Train).parallel(kind),
                dev: data.split(SplitName::Dev).parallel(kind),
                test: data.split(SplitName::Test).parallel(kind),
                decoder_probe: Some(splits.map(|s| DecoderProbe {
                    sources: data.split(s).source.clone(),
                    tagged: data.split(s).target_tagged(kind),
                })),
            },
        );
    }
    Ok(StudyData {
        source_lang: SOURCE_LANG.into(),
        source_probe: splits.map(|s| data.split(s).source_tagged()),
        targets: out,
    })
}

fn files(dir: &Path, src: &str, max_len: usize, targets: &[String]) -> Result<StudyData> {
    let tagged = |split: ProbeSplit| load_tagged(&dir.join(format!("{}.{src}.tag", split.name())));
    let source_probe = [tagged(ProbeSplit::Train)?, tagged(ProbeSplit::Dev)?, tagged(ProbeSplit::Test)?];
    let mut out = BTreeMap::new();
    for tgt in targets {
        let pair = format!("{src}-{tgt}");
        let parallel = |split: &str| -> Result<ParallelCorpus> {
            let loaded = load_parallel(
                &dir.join(format!("{split}.{pair}.{src}")),
                &dir.join(format!("{split}.{pair}.{tgt}")),
                max_len,
            )?;
            let mut c = loaded.corpus;
            c.source_lang = src.to_string();
            c.target_lang = tgt.clone();
            Ok(c)
        };
        let decoder = |split: ProbeSplit| -> Result<Option<DecoderProbe>> {
            let tag_path = dir.join(format!("{}.{pair}.{tgt}.tag", split.name()));
            if !tag_path.exists() {
                return Ok(None);
            }
            let tagged = load_tagged(&tag_path)?;
            let src_path = dir.join(format!("{}.{pair}.{src}", split.name()));
            let sources = load_sentences(&src_path)?;
            Ok(Some(DecoderProbe { sources, tagged }))
        };
        let probes = [decoder(ProbeSplit::Train)?, decoder(ProbeSplit::Dev)?, decoder(ProbeSplit::Test)?];
        let decoder_probe = match probes {
            [Some(a), Some(b), Some(c)] => Some([a, b, c]),
            _ => None,
        };
        out.insert(
            tgt.clone(),
            TargetData {
                train: parallel("train")?,
                dev: parallel("dev")?,
                test: parallel("test")?,
                decoder_probe,
            },
        );
    }
    Ok(StudyData {
        source_lang: src.to_string(),
        source_probe,
        targets: out,
    })
}
