//! Frozen-model feature extraction and the feed-forward tagging probe.

mod features;

pub use features::{meta_path, FeatureHeader, FeatureRow, FeatureSet, FEATURE_FORMAT, FEATURE_VERSION};

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::{token_frequency_stats, Sentence, TaggedCorpus};
use crate::error::{Error, Result};
use crate::model::{Seq2Seq, Side};
use crate::rng::{derive_seed, stream, StreamRng};
use crate::tensor::{read_container, write_container, OptimizerKind, OptimizerState, ParamStore, Real, Tape, Tensor, Var};

pub const PROBE_KIND: &str = "probe";

/// Which representation to read. Encoder layer 0 is the input
/// representation; decoder layers start at 1.
/// Serialized as its display form (`top`, `pre-softmax` or the index);
/// bare integers are also accepted.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LayerRef {
    Top,
    Index(usize),
    PreSoftmax,
}

impl fmt::Display for LayerRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerRef::Top => f.write_str("top"),
            LayerRef::Index(i) => write!(f, "{i}"),
            LayerRef::PreSoftmax => f.write_str("pre-softmax"),
        }
    }
}

impl FromStr for LayerRef {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "top" => Ok(LayerRef::Top),
            "pre-softmax" => Ok(LayerRef::PreSoftmax),
            _ => s
                .parse()
                .map(LayerRef::Index)
                .map_err(|_| Error::Spec(format!("unknown layer {s:?}"))),
        }
    }
}

impl Serialize for LayerRef {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for LayerRef {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Index(usize),
            Name(String),
        }
        match Raw::deserialize(d)? {
            Raw::Index(i) => Ok(LayerRef::Index(i)),
            Raw::Name(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ExtractionSpec {
    pub side: Side,
    pub layer: LayerRef,
    #[serde(default)]
    pub checkpoint: Option<String>,
    /// Labels were moved to the previous token.
    #[serde(default)]
    pub next_word: bool,
}

impl ExtractionSpec {
    pub fn encoder(layer: LayerRef) -> Self {
        ExtractionSpec {
            side: Side::Encoder,
            layer,
            checkpoint: None,
            next_word: false,
        }
    }

    pub fn decoder(layer: LayerRef) -> Self {
        ExtractionSpec {
            side: Side::Decoder,
            ..Self::encoder(layer)
        }
    }
}

enum Resolved {
    Encoder(usize),
    DecoderRaw(usize),
    DecoderPre,
}

impl ExtractionSpec {
    /// Fails if this spec names a layer an `n_layers` model does not have.
    pub fn check(&self, n_layers: usize) -> Result<()> {
        resolve(self, n_layers).map(|_| ())
    }
}

fn resolve(spec: &ExtractionSpec, n_layers: usize) -> Result<Resolved> {
    let out = |l: usize| Error::Spec(format!("layer {l} out of range for a {n_layers}-layer {}", spec.side.name()));
    match (spec.side, spec.layer) {
        (Side::Encoder, LayerRef::Top) => Ok(Resolved::Encoder(n_layers)),
        (Side::Encoder, LayerRef::Index(l)) if l <= n_layers => Ok(Resolved::Encoder(l)),
        (Side::Encoder, LayerRef::Index(l)) => Err(out(l)),
        (Side::Encoder, LayerRef::PreSoftmax) => Err(Error::Spec("the encoder has no pre-softmax layer".into())),
        (Side::Decoder, LayerRef::PreSoftmax) => Ok(Resolved::DecoderPre),
        (Side::Decoder, LayerRef::Top) => Ok(Resolved::DecoderRaw(n_layers)),
        (Side::Decoder, LayerRef::Index(l)) if (1..=n_layers).contains(&l) => Ok(Resolved::DecoderRaw(l)),
        (Side::Decoder, LayerRef::Index(l)) => Err(out(l)),
    }
}

/// One feature row per token of `tagged`. Decoder extraction teacher-forces
/// the tagged target sentences against `sources`.
pub fn extract_features<T: Real>(
    model: &Seq2Seq<T>,
    spec: &ExtractionSpec,
    tagged: &TaggedCorpus,
    sources: Option<&[Sentence]>,
) -> Result<FeatureSet> {
    let which = resolve(spec, model.config.n_layers)?;
    let before = model.params.checksum();
    let keep: Vec<usize> = (0..tagged.len()).filter(|&i| !tagged.sentences[i].tokens.is_empty()).collect();
    let (vocab, vectors): (_, Vec<Tensor<T>>) = match which {
        Resolved::Encoder(l) => {
            let sents: Vec<Sentence> = keep.iter().map(|&i| tagged.sentences[i].tokens.clone()).collect();
            let states = model.encode_states(&sents)?;
            (&model.src_vocab, states.into_iter().map(|mut s| s.layers.swap_remove(l)).collect())
        }
        Resolved::DecoderRaw(_) | Resolved::DecoderPre => {
            let sources = sources.ok_or_else(|| Error::Spec("decoder extraction needs the source sentences".into()))?;
            if sources.len() != tagged.len() {
                return Err(Error::Alignment(format!(
                    "{} source sentences for {} tagged target sentences",
                    sources.len(),
                    tagged.len()
                )));
            }
            if let Some(&i) = keep.iter().find(|&&i| sources[i].is_empty()) {
                return Err(Error::Alignment(format!("sentence {i} has an empty source")));
            }
            let pairs: Vec<(Sentence, Sentence)> =
                keep.iter().map(|&i| (sources[i].clone(), tagged.sentences[i].tokens.clone())).collect();
            let states = model.decode_states(&pairs)?;
            let pick = |mut s: crate::model::DecoderStates<T>| match which {
                Resolved::DecoderRaw(l) => s.raw.swap_remove(l - 1),
                _ => s.pre_softmax,
            };
            (&model.tgt_vocab, states.into_iter().map(pick).collect())
        }
    };
    let freq = token_frequency_stats(vocab, tagged);
    let tagset: Vec<String> = tagged.tagset.iter().cloned().collect();
    let dim = vectors.first().map_or(0, |v| v.cols());
    let mut rows = Vec::new();
    let mut data = Vec::new();
    for (&i, v) in keep.iter().zip(&vectors) {
        let s = &tagged.sentences[i];
        if v.rows() != s.tokens.len() {
            return Err(Error::Alignment(format!(
                "sentence {i}: {} vectors for {} tokens",
                v.rows(),
                s.tokens.len()
            )));
        }
        for (p, (tok, tag)) in s.tokens.iter().zip(&s.tags).enumerate() {
            let label = tagset.binary_search(tag).expect("tagset built from the corpus") as u32;
            rows.push(FeatureRow {
                label,
                token: tok.clone(),
                sentence: i,
                position: p,
                frequency: freq.tokens[i][p].frequency,
                seen: freq.tokens[i][p].seen,
            });
            data.extend(v.row(p).iter().map(|x| x.as_f64() as f32));
        }
    }
    if model.params.checksum() != before {
        return Err(Error::Integrity("model parameters changed during extraction".into()));
    }
    FeatureSet::new(spec.clone(), tagset, dim, rows, data)
}

/// Relabels each token with the tag of the following token and drops the
/// last token of every sentence.
pub fn shift_labels_next_word(fs: &FeatureSet) -> FeatureSet {
    let mut keep = Vec::new();
    let mut labels = Vec::new();
    for i in 0..fs.len().saturating_sub(1) {
        let (a, b) = (&fs.rows[i], &fs.rows[i + 1]);
        if a.sentence == b.sentence && b.position == a.position + 1 {
            keep.push(i);
            labels.push(b.label);
        }
    }
    let mut out = fs.select(&keep);
    for (r, l) in out.rows.iter_mut().zip(labels) {
        r.label = l;
    }
    out.spec.next_word = true;
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub dropout: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            dropout: 0.5,
            learning_rate: 1e-3,
            batch_size: 16,
            patience: 5,
            max_epochs: 100,
            seed: 1,
        }
    }
}

/// One-hidden-layer ReLU classifier whose hidden width equals its input
/// width.
#[derive(Clone, Debug)]
pub struct Probe {
    pub tagset: Vec<String>,
    pub dim: usize,
    pub hidden: usize,
    pub params: ParamStore<f32>,
}

#[derive(Serialize, Deserialize)]
struct ProbeMeta {
    tagset: Vec<String>,
    dim: usize,
    hidden: usize,
}

impl Probe {
    pub fn new(tagset: Vec<String>, dim: usize, seed: u64) -> Result<Self> {
        if dim == 0 || tagset.is_empty() {
            return Err(Error::Spec("probe needs a positive dimension and at least one tag".into()));
        }
        let hidden = dim;
        let k = tagset.len();
        let mut rng = stream(seed, "probe/init");
        let mut p = ParamStore::new();
        p.add_uniform("w1", &[dim, hidden], (6.0 / (dim + hidden) as f64).sqrt(), &mut rng)?;
        p.add("b1", Tensor::zeros(&[hidden]))?;
        p.add_uniform("w2", &[hidden, k], (6.0 / (hidden + k) as f64).sqrt(), &mut rng)?;
        p.add("b2", Tensor::zeros(&[k]))?;
        Ok(Probe {
            tagset,
            dim,
            hidden,
            params: p,
        })
    }

    /// Logits and the parameter variables, in store order.
    fn forward(&self, tape: &mut Tape<f32>, x: Tensor<f32>, dropout: Option<(f64, &mut StreamRng)>) -> Result<(Var, Vec<Var>)> {
        let ids: Vec<_> = self.params.ids().collect();
        let w: Vec<_> = ids.iter().map(|&id| tape.param(self.params.get(id).clone())).collect();
        let x = tape.constant(x);
        let h = tape.matmul(x, w[0])?;
        let h = tape.add_bias(h, w[1])?;
        let mut h = tape.relu(h);
        if let Some((rate, rng)) = dropout {
            h = tape.dropout(h, rate, rng);
        }
        let o = tape.matmul(h, w[2])?;
        let o = tape.add_bias(o, w[3])?;
        Ok((o, w))
    }

    fn inputs(&self, fs: &FeatureSet, idx: &[usize]) -> Result<Tensor<f32>> {
        if fs.dim != self.dim {
            return Err(Error::Spec(format!("features have dimension {}, probe expects {}", fs.dim, self.dim)));
        }
        let mut data = Vec::with_capacity(idx.len() * self.dim);
        for &i in idx {
            data.extend_from_slice(fs.vector(i));
        }
        Ok(Tensor::new(vec![idx.len(), self.dim], data)?)
    }

    /// Tag logits for every row of `fs`.
    pub fn logits(&self, fs: &FeatureSet) -> Result<Tensor<f32>> {
        let idx: Vec<usize> = (0..fs.len()).collect();
        let x = self.inputs(fs, &idx)?;
        if idx.is_empty() {
            return Ok(Tensor::new(vec![0, self.tagset.len()], vec![])?);
        }
        let mut tape = Tape::new();
        let (o, _) = self.forward(&mut tape, x, None)?;
        Ok(tape.value(o).clone())
    }

    /// Label of every row of `fs` in this probe's tagset, `None` for tags
    /// never seen in probe training.
    pub fn gold(&self, fs: &FeatureSet) -> Vec<Option<u32>> {
        let map: Vec<Option<u32>> = fs
            .tagset
            .iter()
            .map(|t| self.tagset.binary_search(t).ok().map(|i| i as u32))
            .collect();
        fs.rows.iter().map(|r| map[r.label as usize]).collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_value(ProbeMeta {
            tagset: self.tagset.clone(),
            dim: self.dim,
            hidden: self.hidden,
        })
        .expect("plain data");
        let tensors: Vec<(&str, &Tensor<f32>)> = self.params.iter().collect();
        let mut buf = Vec::new();
        write_container(&mut buf, PROBE_KIND, meta, &tensors)?;
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, tensors) = read_container(&mut &bytes[..])?;
        if header.kind != PROBE_KIND {
            return Err(Error::State(format!("expected a {PROBE_KIND} checkpoint, found {}", header.kind)));
        }
        let meta: ProbeMeta = serde_json::from_value(header.meta).map_err(|e| Error::State(format!("probe metadata: {e}")))?;
        if meta.hidden != meta.dim {
            return Err(Error::State("probe hidden size must equal its input dimension".into()));
        }
        let mut probe = Probe::new(meta.tagset, meta.dim, 0)?;
        if tensors.len() != probe.params.len() {
            return Err(Error::State("probe checkpoint has the wrong number of tensors".into()));
        }
        for (name, t) in tensors {
            let id = probe.params.require(&name)?;
            if probe.params.get(id).shape() != t.shape() {
                return Err(Error::State(format!("shape mismatch for {name}")));
            }
            *probe.params.get_mut(id) = t;
        }
        Ok(probe)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::corpus::write_file(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Row-wise argmax; ties go to the lowest tag id.
pub fn argmax_rows(logits: &Tensor<f32>) -> Vec<u32> {
    (0..logits.rows())
        .map(|r| {
            let row = logits.row(r);
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best as u32
        })
        .collect()
}

pub fn predict_tags(probe: &Probe, fs: &FeatureSet) -> Result<Vec<u32>> {
    Ok(argmax_rows(&probe.logits(fs)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_loss: f64,
    pub dev_accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ProbeCurve {
    pub epochs: Vec<ProbeEpoch>,
    pub best_epoch: usize,
    /// Dev rows whose tag never occurs in the probe training set; left out
    /// of dev loss and accuracy.
    pub dev_unseen_tag_rows: usize,
}

fn dev_metrics(probe: &Probe, dev: &FeatureSet, gold: &[Option<u32>]) -> Result<(f64, f64)> {
    let idx: Vec<usize> = (0..dev.len()).filter(|&i| gold[i].is_some()).collect();
    let x = probe.inputs(dev, &idx)?;
    let mut tape = Tape::new();
    let (o, _) = probe.forward(&mut tape, x, None)?;
    let targets: Vec<usize> = idx.iter().map(|&i| gold[i].expect("filtered") as usize).collect();
    let loss = tape.softmax_cross_entropy(o, &targets, None)?;
    let pred = argmax_rows(tape.value(o));
    let correct = pred.iter().zip(&targets).filter(|(p, t)| **p as usize == **t).count();
    Ok((tape.value(loss).data()[0] as f64, correct as f64 / idx.len() as f64))
}

/// Trains a probe on `train` with early stopping on `dev` loss; returns the
/// best-dev parameters.
pub fn train_probe(train: &FeatureSet, dev: &FeatureSet, cfg: &ProbeConfig) -> Result<(Probe, ProbeCurve)> {
    if train.is_empty() {
        return Err(Error::Data("empty probe training set".into()));
    }
    if cfg.batch_size == 0 || cfg.max_epochs == 0 {
        return Err(Error::Config("probe batch size and epochs must be positive".into()));
    }
    if dev.dim != train.dim {
        return Err(Error::Spec(format!("train dimension {} but dev dimension {}", train.dim, dev.dim)));
    }
    let mut used: Vec<String> = train.rows.iter().map(|r| train.tagset[r.label as usize].clone()).collect();
    used.sort();
    used.dedup();
    let mut probe = Probe::new(used, train.dim, cfg.seed)?;
    assert_eq!(probe.hidden, train.dim, "probe hidden size must equal the feature dimension");
    let train_gold: Vec<u32> = probe.gold(train).into_iter().map(|g| g.expect("tagset from train")).collect();
    let dev_gold = probe.gold(dev);
    let dev_usable = dev_gold.iter().filter(|g| g.is_some()).count();
    if dev_usable == 0 {
        return Err(Error::Data("no dev rows with tags seen in probe training".into()));
    }
    let mut curve = ProbeCurve {
        dev_unseen_tag_rows: dev.len() - dev_usable,
        ..ProbeCurve::default()
    };
    if curve.dev_unseen_tag_rows > 0 {
        log::warn!("{} dev rows carry tags unseen in probe training", curve.dev_unseen_tag_rows);
    }
    let mut opt = OptimizerState::new(OptimizerKind::adam(), cfg.learning_rate)?;
    let mut shuffle = stream(cfg.seed, "probe/shuffle");
    let mut drop_rng = stream(derive_seed(cfg.seed, "probe"), "dropout");
    let mut best: Option<(f64, ParamStore<f32>)> = None;
    let mut since_best = 0;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut shuffle);
        let mut total = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            let x = probe.inputs(train, idx)?;
            let mut tape = Tape::new();
            let (o, vars) = probe.forward(&mut tape, x, Some((cfg.dropout, &mut drop_rng)))?;
            let targets: Vec<usize> = idx.iter().map(|&i| train_gold[i] as usize).collect();
            let loss = tape.softmax_cross_entropy(o, &targets, None)?;
            let lv = tape.value(loss).data()[0] as f64;
            if !lv.is_finite() {
                return Err(Error::Training {
                    epoch,
                    msg: "non-finite probe loss".into(),
                });
            }
            total += lv * idx.len() as f64;
            tape.backward(loss)?;
            let grads: Vec<Option<Vec<f32>>> = vars.iter().map(|&v| tape.take_grad(v)).collect();
            opt.step(&mut probe.params, &grads)?;
        }
        let (dev_loss, dev_accuracy) = dev_metrics(&probe, dev, &dev_gold)?;
        curve.epochs.push(ProbeEpoch {
            epoch,
            train_loss: total / train.len() as f64,
            dev_loss,
            dev_accuracy,
        });
        if best.as_ref().is_none_or(|(l, _)| dev_loss < *l) {
            best = Some((dev_loss, probe.params.clone()));
            curve.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    probe.params = best.expect("at least one epoch").1;
    Ok((probe, curve))
}
