//! Declarative studies: a manifest names a corpus, model variants, what to
//! extract and which tags to probe, and [`run_study`] carries out
//! train, extract, probe and report for every variant and seed.

mod cache;
mod data;
mod run;

pub use cache::{sha256_hex, ArtifactCache, CACHE_TAG};
pub use data::{load_study_data, CorpusRef, DecoderProbe, ProbeSplit, StudyData, TargetData, SELF_TARGET};
pub use run::{run_study, ModelSummary, RunCounters, StudyOptions, StudyResult};

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::analysis::{FrequencyBins, Variant};
use crate::corpus::pos_of;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Preset, ReprKind, Side};
use crate::probing::{ExtractionSpec, LayerRef, ProbeConfig};
use crate::training::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Pos,
    Morph,
    NextWordPos,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Pos => "pos",
            Task::Morph => "morph",
            Task::NextWordPos => "next-word-pos",
        }
    }

    /// Maps a full morphological tag to this task's label.
    pub fn label(self, tag: &str) -> String {
        match self {
            Task::Morph => tag.to_string(),
            Task::Pos | Task::NextWordPos => pos_of(tag),
        }
    }

    pub fn next_word(self) -> bool {
        self == Task::NextWordPos
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pos" => Ok(Task::Pos),
            "morph" => Ok(Task::Morph),
            "next-word-pos" => Ok(Task::NextWordPos),
            _ => Err(Error::Config(format!("unknown probe task {s:?}"))),
        }
    }
}

fn yes() -> bool {
    true
}

fn encoder() -> Side {
    Side::Encoder
}

fn top() -> LayerRef {
    LayerRef::Top
}

fn word() -> ReprKind {
    ReprKind::Word
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariantSpec {
    pub name: String,
    #[serde(default = "word")]
    pub repr: ReprKind,
    #[serde(default = "yes")]
    pub attention: bool,
    /// Defaults to the manifest's target.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<String>,
    #[serde(default = "encoder")]
    pub side: Side,
    #[serde(default = "top")]
    pub layer: LayerRef,
    /// Defaults to the manifest's task.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<Task>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<String>,
    /// Overrides of preset model fields, e.g. `{ n_layers = 3 }`.
    #[serde(default, skip_serializing_if = "toml::Table::is_empty")]
    pub model: toml::Table,
}

fn desk() -> Preset {
    Preset::Desk
}

fn default_seeds() -> Vec<u64> {
    vec![1, 2, 3]
}

fn analytic() -> String {
    "analytic".into()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentManifest {
    pub study: String,
    #[serde(default)]
    pub description: String,
    #[serde(default = "desk")]
    pub preset: Preset,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    pub task: Task,
    #[serde(default = "analytic")]
    pub target: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline: Option<String>,
    /// Train every target on the intersection of the training corpora.
    #[serde(default)]
    pub intersect: bool,
    /// Frequency bin ladder, e.g. `"0,1-5,>5"`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bins: Option<String>,
    #[serde(default)]
    pub include_unseen_tags: bool,
    #[serde(default)]
    pub corpus: CorpusRef,
    /// Overrides of the preset training recipe.
    #[serde(default)]
    pub train: toml::Table,
    #[serde(default)]
    pub probe: ProbeConfig,
    pub variants: Vec<VariantSpec>,
}

const BUILTINS: [&str; 6] = [
    include_str!("../../data/studies/word-vs-char.toml"),
    include_str!("../../data/studies/layers.toml"),
    include_str!("../../data/studies/target-language.toml"),
    include_str!("../../data/studies/attention.toml"),
    include_str!("../../data/studies/char-decoder.toml"),
    include_str!("../../data/studies/next-word.toml"),
];

pub fn builtin_manifests() -> Vec<ExperimentManifest> {
    BUILTINS
        .iter()
        .map(|t| ExperimentManifest::from_toml(t).expect("built-in manifests are valid"))
        .collect()
}

pub fn builtin_manifest(study: &str) -> Option<ExperimentManifest> {
    builtin_manifests().into_iter().find(|m| m.study == study)
}

/// Resolves a study name to a built-in manifest, or else reads a manifest
/// file.
pub fn find_manifest(name_or_path: &str) -> Result<ExperimentManifest> {
    match builtin_manifest(name_or_path) {
        Some(m) => Ok(m),
        None if Path::new(name_or_path).is_file() => ExperimentManifest::load(Path::new(name_or_path)),
        None => Err(Error::Manifest(format!(
            "{name_or_path:?} is neither a built-in study nor a manifest file"
        ))),
    }
}

/// Applies `overrides` on top of the serialized `base`, merging nested
/// tables. Unknown keys are rejected by the target type.
pub fn merge_overrides<T: Serialize + DeserializeOwned>(base: &T, overrides: &toml::Table) -> Result<T> {
    fn merge(a: &mut serde_json::Value, b: serde_json::Value) {
        match (a, b) {
            (serde_json::Value::Object(a), serde_json::Value::Object(b)) => {
                for (k, v) in b {
                    match a.get_mut(&k) {
                        Some(slot) => merge(slot, v),
                        None => {
                            a.insert(k, v);
                        }
                    }
                }
            }
            (slot, v) => *slot = v,
        }
    }
    let mut value = serde_json::to_value(base).expect("plain data");
    merge(&mut value, serde_json::to_value(overrides).expect("plain data"));
    serde_json::from_value(value).map_err(|e| Error::Config(format!("override: {e}")))
}

/// A variant with everything except the seed filled in.
#[derive(Clone, Debug, PartialEq)]
pub struct ResolvedVariant {
    pub row: Variant,
    pub task: Task,
    pub target: String,
    pub extraction: ExtractionSpec,
    /// Model configuration with seed 0; the run seed is set per run.
    pub model: ModelConfig,
}

impl ResolvedVariant {
    pub fn autoencoder(&self) -> bool {
        self.target == SELF_TARGET
    }
}

impl ExperimentManifest {
    pub fn from_toml(text: &str) -> Result<Self> {
        let m: ExperimentManifest = toml::from_str(text).map_err(|e| Error::Manifest(e.to_string()))?;
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Manifest(m) => Error::Manifest(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Manifest(format!("study {:?}: {m}", self.study)));
        if self.study.trim().is_empty() {
            return bad("empty study id".into());
        }
        if self.seeds.is_empty() {
            return bad("no seeds".into());
        }
        if self.seeds.iter().collect::<BTreeSet<_>>().len() != self.seeds.len() {
            return bad("repeated seed".into());
        }
        if self.variants.is_empty() {
            return bad("no variants".into());
        }
        let mut names = BTreeSet::new();
        for v in &self.variants {
            if v.name.is_empty() || v.name.contains(|c: char| c.is_whitespace() || c == '/' || c == ',') {
                return bad(format!("variant name {:?} must be a non-empty word", v.name));
            }
            if !names.insert(v.name.as_str()) {
                return bad(format!("duplicate variant {}", v.name));
            }
            for k in ["repr_kind", "attention", "seed"] {
                if v.model.contains_key(k) {
                    return bad(format!("variant {} sets {k} through model overrides", v.name));
                }
            }
        }
        if let Some(b) = &self.baseline {
            if !names.contains(b.as_str()) {
                return bad(format!("baseline {b} is not a variant"));
            }
        }
        let targets: BTreeSet<&str> = self.variants.iter().map(|v| self.target_of(v)).collect();
        if targets.len() > 1 && !self.intersect {
            return bad("variants with different targets must set intersect = true".into());
        }
        for k in ["seed", "autoencoder"] {
            if self.train.contains_key(k) {
                return bad(format!("train overrides may not set {k}"));
            }
        }
        if let Some(b) = &self.bins {
            b.parse::<FrequencyBins>()?;
        }
        self.train_config(0, false)?;
        self.resolve()?;
        Ok(())
    }

    fn target_of<'a>(&'a self, v: &'a VariantSpec) -> &'a str {
        v.target.as_deref().unwrap_or(&self.target)
    }

    pub fn frequency_bins(&self) -> Result<FrequencyBins> {
        self.bins.as_deref().map_or(Ok(FrequencyBins::default()), str::parse)
    }

    pub fn train_config(&self, seed: u64, autoencoder: bool) -> Result<TrainConfig> {
        let mut tc = merge_overrides(&TrainConfig::preset(self.preset), &self.train)?;
        tc.seed = seed;
        tc.autoencoder = autoencoder;
        tc.validate()?;
        Ok(tc)
    }

    pub fn probe_config(&self, seed: u64) -> ProbeConfig {
        ProbeConfig {
            seed,
            ..self.probe.clone()
        }
    }

    pub fn resolve(&self) -> Result<Vec<ResolvedVariant>> {
        self.variants
            .iter()
            .map(|v| {
                let mut mc = ModelConfig::preset(self.preset, v.repr);
                mc.attention = v.attention;
                let mut mc = merge_overrides(&mc, &v.model)?;
                mc.seed = 0;
                mc.validate()?;
                let task = v.task.unwrap_or(self.task);
                let target = self.target_of(v).to_string();
                let extraction = ExtractionSpec {
                    side: v.side,
                    layer: v.layer,
                    checkpoint: None,
                    next_word: task.next_word(),
                };
                extraction
                    .check(mc.n_layers)
                    .map_err(|e| Error::Manifest(format!("variant {}: {e}", v.name)))?;
                Ok(ResolvedVariant {
                    row: Variant {
                        name: v.name.clone(),
                        repr: v.repr,
                        side: v.side,
                        layer: v.layer,
                        attention: v.attention,
                        target: target.clone(),
                        task: task.name().into(),
                        reference: v.reference.clone(),
                    },
                    task,
                    target,
                    extraction,
                    model: mc,
                })
            })
            .collect()
    }
}

#[cfg(test)]
mod tests;
