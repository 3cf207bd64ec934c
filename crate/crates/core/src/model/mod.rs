//! LSTM encoder-decoder with optional global attention. Inputs are word
//! embeddings or character-CNN word vectors; outputs are always words.

mod config;
mod forward;

pub use config::{CharConfig, ModelConfig, Preset, ReprKind};
pub(crate) use forward::buckets;
pub use forward::{
    Attended, Batch, BatchStats, DecoderOut, DecoderState, DecoderStates, EncoderOut, EncoderStates, Graph, Side,
    StepOut, Translation,
};

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{CharVocab, Vocab};
use crate::error::{Error, Result};
use crate::rng::stream;
use crate::tensor::{read_container, write_container, ParamStore, Real, Tensor};

pub const CHECKPOINT_KIND: &str = "nmt-model";

/// Model parameters together with everything needed to interpret them.
#[derive(Clone, Debug)]
pub struct Seq2Seq<T> {
    pub config: ModelConfig,
    pub src_vocab: Vocab,
    pub tgt_vocab: Vocab,
    pub src_chars: Option<CharVocab>,
    pub tgt_chars: Option<CharVocab>,
    pub params: ParamStore<T>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    config: ModelConfig,
    src_vocab: Vocab,
    tgt_vocab: Vocab,
    src_chars: Option<CharVocab>,
    tgt_chars: Option<CharVocab>,
}

impl<T: Real> Seq2Seq<T> {
    /// Freshly initialized model: weights uniform in `±init_scale`, biases
    /// zero except the LSTM forget-gate block, which starts at 1.
    pub fn new(config: ModelConfig, src_vocab: Vocab, tgt_vocab: Vocab, src_chars: Option<CharVocab>, tgt_chars: Option<CharVocab>) -> Result<Self> {
        config.validate()?;
        let is_char = config.repr_kind == ReprKind::CharCnn;
        if is_char != (src_chars.is_some() && tgt_chars.is_some()) {
            return Err(Error::Config("character vocabularies required exactly for char-cnn models".into()));
        }
        let mut rng = stream(config.seed, "model/init");
        let mut p = ParamStore::new();
        let s = config.init_scale;
        let h = config.d_hidden;
        for (side, vocab, chars) in [("enc", &src_vocab, &src_chars), ("dec", &tgt_vocab, &tgt_chars)] {
            match (&config.char, chars) {
                (Some(c), Some(cv)) => {
                    let f = c.n_feature_maps;
                    p.add_uniform(&format!("{side}.char.embed"), &[cv.len(), c.d_char], s, &mut rng)?;
                    p.add_uniform(&format!("{side}.char.kernel"), &[c.kernel_width * c.d_char, f], s, &mut rng)?;
                    p.add(&format!("{side}.char.bias"), Tensor::zeros(&[f]))?;
                    for k in 0..c.n_highway_layers {
                        p.add_uniform(&format!("{side}.char.hw{k}.w_t"), &[f, f], s, &mut rng)?;
                        p.add(&format!("{side}.char.hw{k}.b_t"), Tensor::zeros(&[f]))?;
                        p.add_uniform(&format!("{side}.char.hw{k}.w_g"), &[f, f], s, &mut rng)?;
                        p.add(&format!("{side}.char.hw{k}.b_g"), Tensor::zeros(&[f]))?;
                    }
                }
                _ => {
                    p.add_uniform(&format!("{side}.embed"), &[vocab.len(), config.d_embed], s, &mut rng)?;
                }
            }
            for l in 0..config.n_layers {
                let d_in = if l == 0 { config.input_dim() } else { h };
                p.add_uniform(&format!("{side}.lstm{l}.w_x"), &[d_in, 4 * h], s, &mut rng)?;
                p.add_uniform(&format!("{side}.lstm{l}.w_h"), &[h, 4 * h], s, &mut rng)?;
                let mut b = Tensor::zeros(&[4 * h]);
                b.data_mut()[h..2 * h].iter_mut().for_each(|v| *v = T::one());
                p.add(&format!("{side}.lstm{l}.b"), b)?;
            }
        }
        if config.attention {
            p.add_uniform("attn.w_a", &[h, h], s, &mut rng)?;
            p.add_uniform("attn.w_c", &[2 * h, h], s, &mut rng)?;
        }
        p.add_uniform("out.w", &[h, tgt_vocab.len()], s, &mut rng)?;
        p.add("out.b", Tensor::zeros(&[tgt_vocab.len()]))?;
        Ok(Seq2Seq {
            config,
            src_vocab,
            tgt_vocab,
            src_chars,
            tgt_chars,
            params: p,
        })
    }

    pub fn cast<U: Real>(&self) -> Seq2Seq<U> {
        Seq2Seq {
            config: self.config.clone(),
            src_vocab: self.src_vocab.clone(),
            tgt_vocab: self.tgt_vocab.clone(),
            src_chars: self.src_chars.clone(),
            tgt_chars: self.tgt_chars.clone(),
            params: self.params.cast(),
        }
    }

    /// Self-describing checkpoint bytes (config, vocabularies, f32 payload).
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = CheckpointMeta {
            config: self.config.clone(),
            src_vocab: self.src_vocab.clone(),
            tgt_vocab: self.tgt_vocab.clone(),
            src_chars: self.src_chars.clone(),
            tgt_chars: self.tgt_chars.clone(),
        };
        let meta = serde_json::to_value(&meta).map_err(|e| Error::State(e.to_string()))?;
        let tensors: Vec<(String, Tensor<f32>)> = self.params.iter().map(|(n, t)| (n.to_string(), t.cast())).collect();
        let refs: Vec<(&str, &Tensor<f32>)> = tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let mut buf = Vec::new();
        write_container(&mut buf, CHECKPOINT_KIND, meta, &refs)?;
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, tensors) = read_container(&mut &bytes[..])?;
        if header.kind != CHECKPOINT_KIND {
            return Err(Error::State(format!("expected a {CHECKPOINT_KIND} checkpoint, found {}", header.kind)));
        }
        let meta: CheckpointMeta =
            serde_json::from_value(header.meta).map_err(|e| Error::State(format!("checkpoint metadata: {e}")))?;
        let mut model = Seq2Seq::<T>::new(meta.config, meta.src_vocab, meta.tgt_vocab, meta.src_chars, meta.tgt_chars)?;
        if tensors.len() != model.params.len() {
            return Err(Error::State(format!(
                "checkpoint has {} tensors, model expects {}",
                tensors.len(),
                model.params.len()
            )));
        }
        for (name, t) in tensors {
            let id = model.params.require(&name)?;
            if model.params.get(id).shape() != t.shape() {
                return Err(Error::State(format!("shape mismatch for {name}")));
            }
            *model.params.get_mut(id) = t.cast();
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::corpus::write_file(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests;
