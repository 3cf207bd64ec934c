use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReprKind {
    Word,
    #[serde(alias = "char")]
    CharCnn,
}

impl ReprKind {
    pub fn name(self) -> &'static str {
        match self {
            ReprKind::Word => "word",
            ReprKind::CharCnn => "char",
        }
    }
}

impl std::str::FromStr for ReprKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "word" => Ok(ReprKind::Word),
            "char" | "char-cnn" => Ok(ReprKind::CharCnn),
            _ => Err(Error::Config(format!("unknown representation {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Paper,
    Desk,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Preset::Paper),
            "desk" => Ok(Preset::Desk),
            _ => Err(Error::Config(format!("unknown preset {s:?}"))),
        }
    }
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::Paper => "paper",
            Preset::Desk => "desk",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CharConfig {
    pub d_char: usize,
    pub n_feature_maps: usize,
    pub kernel_width: usize,
    pub n_highway_layers: usize,
}

/// Architecture of a [`super::Seq2Seq`]. The representation kind applies to
/// the encoder input and to the decoder input; the output softmax is always
/// over target words.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub repr_kind: ReprKind,
    pub d_embed: usize,
    pub d_hidden: usize,
    pub n_layers: usize,
    pub attention: bool,
    pub char: Option<CharConfig>,
    pub dropout: f64,
    pub init_scale: f64,
    pub seed: u64,
}

impl ModelConfig {
    pub fn preset(preset: Preset, repr_kind: ReprKind) -> Self {
        let (d, char) = match preset {
            Preset::Paper => (
                500,
                CharConfig {
                    d_char: 25,
                    n_feature_maps: 1000,
                    kernel_width: 6,
                    n_highway_layers: 1,
                },
            ),
            Preset::Desk => (
                64,
                CharConfig {
                    d_char: 25,
                    n_feature_maps: 64,
                    kernel_width: 3,
                    n_highway_layers: 1,
                },
            ),
        };
        ModelConfig {
            repr_kind,
            d_embed: d,
            d_hidden: d,
            n_layers: 2,
            attention: true,
            char: (repr_kind == ReprKind::CharCnn).then_some(char),
            dropout: 0.3,
            init_scale: 0.1,
            seed: 1,
        }
    }

    /// Width of the representation fed to the first LSTM layer.
    pub fn input_dim(&self) -> usize {
        match (&self.repr_kind, &self.char) {
            (ReprKind::CharCnn, Some(c)) => c.n_feature_maps,
            _ => self.d_embed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_embed == 0 || self.d_hidden == 0 || self.n_layers == 0 {
            return Err(Error::Config("dimensions and layer count must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.init_scale.is_nan() || self.init_scale <= 0.0 {
            return Err(Error::Config("init scale must be positive".into()));
        }
        match (self.repr_kind, &self.char) {
            (ReprKind::CharCnn, Some(c)) => {
                if c.d_char == 0 || c.n_feature_maps == 0 || c.kernel_width == 0 {
                    return Err(Error::Config("character dimensions must be positive".into()));
                }
                Ok(())
            }
            (ReprKind::CharCnn, None) => Err(Error::Config("char-cnn model without char settings".into())),
            (ReprKind::Word, Some(_)) => Err(Error::Config("word model must not carry char settings".into())),
            (ReprKind::Word, None) => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for p in [Preset::Paper, Preset::Desk] {
            for r in [ReprKind::Word, ReprKind::CharCnn] {
                ModelConfig::preset(p, r).validate().unwrap();
            }
        }
        let paper = ModelConfig::preset(Preset::Paper, ReprKind::CharCnn);
        assert_eq!(paper.d_hidden, 500);
        assert_eq!(paper.input_dim(), 1000);
        assert_eq!(paper.char.as_ref().unwrap().kernel_width, 6);
    }

    #[test]
    fn char_fields_iff_char_model() {
        let mut c = ModelConfig::preset(Preset::Desk, ReprKind::Word);
        c.char = ModelConfig::preset(Preset::Desk, ReprKind::CharCnn).char;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::preset(Preset::Desk, ReprKind::CharCnn);
        c.char = None;
        assert!(c.validate().is_err());
    }
}
