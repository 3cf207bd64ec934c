use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::{ReprKind, Seq2Seq};
use crate::corpus::{Sentence, BOS, EOS, PAD, UNK};
use crate::error::{Error, Result};
use crate::rng::StreamRng;
use crate::tensor::layers::{highway, lstm_from_gates};
use crate::tensor::{Binding, Real, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Encoder,
    Decoder,
}

impl Side {
    pub fn name(self) -> &'static str {
        match self {
            Side::Encoder => "encoder",
            Side::Decoder => "decoder",
        }
    }

    fn prefix(self) -> &'static str {
        match self {
            Side::Encoder => "enc",
            Side::Decoder => "dec",
        }
    }
}

/// Encoder activations for a batch of equal-length sentences, time-major:
/// row `t * B + b` of a stacked matrix is position `t` of sentence `b`.
#[derive(Clone, Debug)]
pub struct EncoderOut {
    pub batch: usize,
    pub steps: usize,
    /// Input representation, `steps * B x input_dim`.
    pub embedded: Var,
    /// `layers[l][t]` is the `B x d_hidden` output of LSTM layer `l + 1`.
    pub layers: Vec<Vec<Var>>,
    pub finals: Vec<(Var, Var)>,
}

#[derive(Clone, Debug)]
pub struct Attended {
    pub context: Var,
    pub weights: Var,
    /// `tanh(W_c [context; query])`.
    pub hidden: Var,
}

#[derive(Clone, Debug)]
pub struct DecoderOut {
    pub batch: usize,
    pub steps: usize,
    /// Per-layer stacked LSTM outputs, each `steps * B x d_hidden`.
    pub raw: Vec<Var>,
    /// Vector fed to the output layer, `steps * B x d_hidden`.
    pub pre_softmax: Var,
    pub logits: Var,
    pub attention: Option<Var>,
}

/// Per-layer `(h, c)` of the decoder between steps.
#[derive(Clone, Debug, Default)]
pub struct DecoderState {
    pub layers: Vec<(Var, Var)>,
}

#[derive(Clone, Debug)]
pub struct StepOut {
    pub logits: Var,
    pub pre_softmax: Var,
    pub raw: Vec<Var>,
    pub attention: Option<Var>,
}

/// One forward computation of a model on its own tape.
pub struct Graph<'m, T: Real> {
    model: &'m Seq2Seq<T>,
    pub tape: Tape<T>,
    bind: Binding,
    dropout_rng: Option<StreamRng>,
}

impl<'m, T: Real> Graph<'m, T> {
    /// `dropout_rng = Some(..)` selects training mode (dropout active).
    pub fn new(model: &'m Seq2Seq<T>, trainable: bool, dropout_rng: Option<StreamRng>) -> Self {
        Graph {
            model,
            tape: Tape::new(),
            bind: Binding::new(&model.params, trainable),
            dropout_rng,
        }
    }

    fn p(&mut self, name: &str) -> Result<Var> {
        let id = self.model.params.require(name)?;
        Ok(self.bind.var(&mut self.tape, &self.model.params, id))
    }

    fn zeros(&mut self, rows: usize, cols: usize) -> Var {
        self.tape.constant(Tensor::zeros(&[rows, cols]))
    }

    /// Gradients of every parameter after `self.tape.backward(..)`.
    pub fn grads(&mut self) -> Vec<Option<Vec<T>>> {
        self.bind.collect_grads(&mut self.tape)
    }

    /// One row per token: an embedding lookup, or a character CNN followed by
    /// max-over-time pooling, `tanh` and highway layers.
    pub fn embed(&mut self, side: Side, tokens: &[&str]) -> Result<Var> {
        let m = self.model;
        let pre = side.prefix();
        match m.config.repr_kind {
            ReprKind::Word => {
                let vocab = if side == Side::Encoder { &m.src_vocab } else { &m.tgt_vocab };
                let ids: Vec<usize> = tokens.iter().map(|t| vocab.id(t) as usize).collect();
                let table = self.p(&format!("{pre}.embed"))?;
                Ok(self.tape.gather_rows(table, &ids)?)
            }
            ReprKind::CharCnn => {
                let cfg = m.config.char.as_ref().expect("validated");
                let chars = if side == Side::Encoder { &m.src_chars } else { &m.tgt_chars };
                let chars = chars.as_ref().expect("validated");
                // each distinct word is convolved once
                let mut uniq: Vec<&str> = Vec::new();
                let mut slot: HashMap<&str, usize> = HashMap::new();
                let index: Vec<usize> = tokens
                    .iter()
                    .map(|&t| {
                        *slot.entry(t).or_insert_with(|| {
                            uniq.push(t);
                            uniq.len() - 1
                        })
                    })
                    .collect();
                let mut ids = Vec::new();
                let mut segments = Vec::with_capacity(uniq.len());
                for w in &uniq {
                    let c = chars.encode_word(w, cfg.kernel_width);
                    segments.push((ids.len(), c.len()));
                    ids.extend(c.into_iter().map(|x| x as usize));
                }
                let table = self.p(&format!("{pre}.char.embed"))?;
                let e = self.tape.gather_rows(table, &ids)?;
                let kernel = self.p(&format!("{pre}.char.kernel"))?;
                let bias = self.p(&format!("{pre}.char.bias"))?;
                let pooled = self.tape.conv_maxpool(e, kernel, bias, cfg.kernel_width, &segments)?;
                let mut y = self.tape.tanh(pooled);
                for k in 0..cfg.n_highway_layers {
                    let wt = self.p(&format!("{pre}.char.hw{k}.w_t"))?;
                    let bt = self.p(&format!("{pre}.char.hw{k}.b_t"))?;
                    let wg = self.p(&format!("{pre}.char.hw{k}.w_g"))?;
                    let bg = self.p(&format!("{pre}.char.hw{k}.b_g"))?;
                    y = highway(&mut self.tape, y, wt, bt, wg, bg)?;
                }
                if uniq.len() == tokens.len() && index.iter().enumerate().all(|(i, &j)| i == j) {
                    Ok(y)
                } else {
                    Ok(self.tape.gather_rows(y, &index)?)
                }
            }
        }
    }

    /// Stacked LSTM over `steps` time-major blocks of `batch` rows.
    fn lstm_stack(
        &mut self,
        side: Side,
        input: Var,
        steps: usize,
        batch: usize,
        init: Option<&[(Var, Var)]>,
    ) -> Result<(Vec<Vec<Var>>, Vec<(Var, Var)>)> {
        let cfg = &self.model.config;
        let (n_layers, h, rate) = (cfg.n_layers, cfg.d_hidden, cfg.dropout);
        let pre = side.prefix();
        let mut x = input;
        let mut layers = Vec::with_capacity(n_layers);
        let mut finals = Vec::with_capacity(n_layers);
        for l in 0..n_layers {
            let wx = self.p(&format!("{pre}.lstm{l}.w_x"))?;
            let wh = self.p(&format!("{pre}.lstm{l}.w_h"))?;
            let b = self.p(&format!("{pre}.lstm{l}.b"))?;
            let xw = self.tape.matmul(x, wx)?;
            let xw = self.tape.add_bias(xw, b)?;
            let (mut hs, mut cs) = match init {
                Some(s) => s[l],
                None => (self.zeros(batch, h), self.zeros(batch, h)),
            };
            let mut outs = Vec::with_capacity(steps);
            for t in 0..steps {
                let xt = if steps == 1 { xw } else { self.tape.slice_rows(xw, t * batch, batch)? };
                let hw = self.tape.matmul(hs, wh)?;
                let g = self.tape.add(xt, hw)?;
                (hs, cs) = lstm_from_gates(&mut self.tape, g, cs)?;
                outs.push(hs);
            }
            finals.push((hs, cs));
            if l + 1 < n_layers {
                let stacked = if steps == 1 { outs[0] } else { self.tape.concat_rows(&outs)? };
                x = match self.dropout_rng.as_mut() {
                    Some(rng) => self.tape.dropout(stacked, rate, rng),
                    None => stacked,
                };
            }
            layers.push(outs);
        }
        Ok((layers, finals))
    }

    /// Encodes equal-length sentences.
    pub fn encode(&mut self, src: &[&Sentence]) -> Result<EncoderOut> {
        let batch = src.len();
        let steps = src.first().map_or(0, |s| s.len());
        if batch == 0 || steps == 0 {
            return Err(Error::Tensor(crate::tensor::TensorError::Precondition {
                op: "encode",
                msg: "empty sentence or batch".into(),
            }));
        }
        if src.iter().any(|s| s.len() != steps) {
            return Err(Error::Data("encoder batch must hold sentences of equal length".into()));
        }
        let tokens: Vec<&str> = (0..steps)
            .flat_map(|t| src.iter().map(move |s| s[t].as_str()))
            .collect();
        let embedded = self.embed(Side::Encoder, &tokens)?;
        let (layers, finals) = self.lstm_stack(Side::Encoder, embedded, steps, batch, None)?;
        Ok(EncoderOut {
            batch,
            steps,
            embedded,
            layers,
            finals,
        })
    }

    /// Encoder top-layer outputs as a `B x N x d` key/value tensor.
    pub fn memory(&mut self, enc: &EncoderOut) -> Result<Var> {
        Ok(self.tape.stack_steps(enc.layers.last().expect("at least one layer"))?)
    }

    /// Global attention with the "general" score `q W_a k`.
    pub fn attend(&mut self, query: Var, memory: Var) -> Result<Attended> {
        if !self.model.config.attention {
            return Err(Error::Config("attention is disabled for this model".into()));
        }
        let wa = self.p("attn.w_a")?;
        let wc = self.p("attn.w_c")?;
        let q = self.tape.matmul(query, wa)?;
        let scores = self.tape.attn_scores(q, memory)?;
        let weights = self.tape.softmax_rows(scores);
        let context = self.tape.attn_context(weights, memory)?;
        let cat = self.tape.concat_cols(&[context, query])?;
        let pre = self.tape.matmul(cat, wc)?;
        let hidden = self.tape.tanh(pre);
        Ok(Attended {
            context,
            weights,
            hidden,
        })
    }

    fn output(&mut self, top: Var, memory: Option<Var>) -> Result<(Var, Var, Option<Var>)> {
        let (pre, weights) = match memory {
            Some(mem) if self.model.config.attention => {
                let a = self.attend(top, mem)?;
                (a.hidden, Some(a.weights))
            }
            _ => (top, None),
        };
        let w = self.p("out.w")?;
        let b = self.p("out.b")?;
        let logits = self.tape.matmul(pre, w)?;
        let logits = self.tape.add_bias(logits, b)?;
        Ok((pre, logits, weights))
    }

    /// Decoder state handed over from the encoder's final states.
    pub fn init_decoder(&self, enc: &EncoderOut) -> DecoderState {
        DecoderState {
            layers: enc.finals.clone(),
        }
    }

    /// Teacher-forced decoding of `inputs` (equal length, `<pad>` filled),
    /// all steps batched.
    pub fn decode_teacher(&mut self, enc: &EncoderOut, inputs: &[Vec<&str>]) -> Result<DecoderOut> {
        let batch = inputs.len();
        let steps = inputs.first().map_or(0, Vec::len);
        if batch != enc.batch || steps == 0 || inputs.iter().any(|s| s.len() != steps) {
            return Err(Error::Data("decoder inputs must be a full rectangular batch".into()));
        }
        let tokens: Vec<&str> = (0..steps).flat_map(|t| inputs.iter().map(move |s| s[t])).collect();
        let y = self.embed(Side::Decoder, &tokens)?;
        let (layers, _) = self.lstm_stack(Side::Decoder, y, steps, batch, Some(&enc.finals))?;
        let mut raw = Vec::with_capacity(layers.len());
        for outs in &layers {
            raw.push(if steps == 1 { outs[0] } else { self.tape.concat_rows(outs)? });
        }
        let memory = if self.model.config.attention { Some(self.memory(enc)?) } else { None };
        let top = *raw.last().expect("at least one layer");
        let (pre_softmax, logits, attention) = self.output(top, memory)?;
        Ok(DecoderOut {
            batch,
            steps,
            raw,
            pre_softmax,
            logits,
            attention,
        })
    }

    /// One decoder step for a batch of previous tokens.
    pub fn decode_step(&mut self, prev: &[&str], state: &DecoderState, memory: Option<Var>) -> Result<(StepOut, DecoderState)> {
        let cfg = &self.model.config;
        let n_layers = cfg.n_layers;
        if state.layers.len() != n_layers {
            return Err(Error::State(format!(
                "decoder state has {} layers, model has {n_layers}",
                state.layers.len()
            )));
        }
        if cfg.attention && memory.is_none() {
            return Err(Error::State("attention model stepped without encoder memory".into()));
        }
        let mut x = self.embed(Side::Decoder, prev)?;
        let mut next = DecoderState::default();
        let mut raw = Vec::with_capacity(n_layers);
        for l in 0..n_layers {
            let wx = self.p(&format!("dec.lstm{l}.w_x"))?;
            let wh = self.p(&format!("dec.lstm{l}.w_h"))?;
            let b = self.p(&format!("dec.lstm{l}.b"))?;
            let (h, c) = state.layers[l];
            let xw = self.tape.matmul(x, wx)?;
            let xw = self.tape.add_bias(xw, b)?;
            let hw = self.tape.matmul(h, wh)?;
            let g = self.tape.add(xw, hw)?;
            let (h2, c2) = lstm_from_gates(&mut self.tape, g, c)?;
            next.layers.push((h2, c2));
            raw.push(h2);
            x = h2;
            if l + 1 < n_layers {
                let rate = self.model.config.dropout;
                if let Some(rng) = self.dropout_rng.as_mut() {
                    x = self.tape.dropout(h2, rate, rng);
                }
            }
        }
        let (pre_softmax, logits, attention) = self.output(x, memory)?;
        Ok((
            StepOut {
                logits,
                pre_softmax,
                raw,
                attention,
            },
            next,
        ))
    }
}

/// Parallel sentences with equal-length sources.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub src: Vec<Sentence>,
    pub tgt: Vec<Sentence>,
}

impl Batch {
    /// Decoder inputs `<s> t_1 .. t_T` and outputs `t_1 .. t_T </s>`, padded.
    fn teacher_io(&self) -> (Vec<Vec<&str>>, Vec<Sentence>) {
        let steps = self.tgt.iter().map(Vec::len).max().unwrap_or(0) + 1;
        let mut inputs = Vec::with_capacity(self.tgt.len());
        let mut outputs = Vec::with_capacity(self.tgt.len());
        for t in &self.tgt {
            let mut i: Vec<&str> = Vec::with_capacity(steps);
            i.push("<s>");
            i.extend(t.iter().map(String::as_str));
            i.resize(steps, "<pad>");
            let mut o: Sentence = t.clone();
            o.push("</s>".into());
            o.resize(steps, "<pad>".into());
            inputs.push(i);
            outputs.push(o);
        }
        (inputs, outputs)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BatchStats {
    /// Mean negative log-likelihood per target token.
    pub loss: f64,
    pub tokens: usize,
    pub correct: usize,
}

/// Greedy argmax over a logit row, never choosing `<pad>` or `<s>`; ties go
/// to the lowest id.
pub(crate) fn argmax_output<T: Real>(row: &[T]) -> u32 {
    let mut best = EOS as usize;
    for (i, &v) in row.iter().enumerate() {
        if i == PAD as usize || i == BOS as usize {
            continue;
        }
        if v > row[best] || (v == row[best] && i < best) {
            best = i;
        }
    }
    best as u32
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Translation {
    pub tokens: Sentence,
    pub unk_count: usize,
}

/// Per-position representations of one source sentence. `layers[0]` is the
/// input representation, `layers[l]` the output of LSTM layer `l`.
#[derive(Clone, Debug)]
pub struct EncoderStates<T> {
    pub layers: Vec<Tensor<T>>,
    pub final_h: Vec<Vec<T>>,
    pub final_c: Vec<Vec<T>>,
}

/// Per-target-token decoder representations; row `i` comes from the step
/// that consumes target token `i` (and predicts token `i + 1`).
#[derive(Clone, Debug)]
pub struct DecoderStates<T> {
    pub pre_softmax: Tensor<T>,
    pub raw: Vec<Tensor<T>>,
}

/// Indices grouped by key, preserving order inside each group, then chunked.
pub(crate) fn buckets(keys: impl Iterator<Item = usize>, max_batch: usize) -> Vec<Vec<usize>> {
    let mut by: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, k) in keys.enumerate() {
        by.entry(k).or_default().push(i);
    }
    by.into_values()
        .flat_map(|v| v.chunks(max_batch).map(<[usize]>::to_vec).collect::<Vec<_>>())
        .collect()
}

fn rows_of<T: Real>(t: &Tensor<T>, rows: impl Iterator<Item = usize>) -> Tensor<T> {
    let cols = t.cols();
    let mut data = Vec::new();
    let mut n = 0;
    for r in rows {
        data.extend_from_slice(t.row(r));
        n += 1;
    }
    Tensor::new(vec![n, cols], data).expect("at least one row")
}

const EVAL_BATCH: usize = 64;

impl<T: Real> Seq2Seq<T> {
    /// Builds the teacher-forced loss of `batch` with parameters bound as
    /// trainable. Dropout is active when `dropout_rng` is given.
    pub fn batch_graph(&self, batch: &Batch, dropout_rng: Option<StreamRng>) -> Result<(Graph<'_, T>, Var, BatchStats)> {
        let mut g = Graph::new(self, true, dropout_rng);
        let srcs: Vec<&Sentence> = batch.src.iter().collect();
        let enc = g.encode(&srcs)?;
        let (inputs, outputs) = batch.teacher_io();
        let dec = g.decode_teacher(&enc, &inputs)?;
        let (steps, b) = (dec.steps, dec.batch);
        let mut targets = Vec::with_capacity(steps * b);
        let mut weights = Vec::with_capacity(steps * b);
        for t in 0..steps {
            for o in &outputs {
                let id = self.tgt_vocab.id(&o[t]);
                targets.push(id as usize);
                weights.push(if id == PAD { T::zero() } else { T::one() });
            }
        }
        let loss = g.tape.softmax_cross_entropy(dec.logits, &targets, Some(&weights))?;
        let lv = g.tape.value(dec.logits);
        let mut stats = BatchStats {
            loss: g.tape.value(loss).data()[0].as_f64(),
            tokens: 0,
            correct: 0,
        };
        for (r, (&tgt, &w)) in targets.iter().zip(&weights).enumerate() {
            if w != T::zero() {
                stats.tokens += 1;
                if argmax_output(lv.row(r)) as usize == tgt {
                    stats.correct += 1;
                }
            }
        }
        Ok((g, loss, stats))
    }

    /// Token-weighted loss and accuracy over `pairs` in evaluation mode.
    pub fn evaluate_loss(&self, pairs: &[(Sentence, Sentence)]) -> Result<BatchStats> {
        let mut total = BatchStats::default();
        let mut nll = 0.0;
        for idx in buckets(pairs.iter().map(|p| p.0.len()), EVAL_BATCH) {
            let batch = Batch {
                src: idx.iter().map(|&i| pairs[i].0.clone()).collect(),
                tgt: idx.iter().map(|&i| pairs[i].1.clone()).collect(),
            };
            let (_, _, s) = self.batch_graph(&batch, None)?;
            nll += s.loss * s.tokens as f64;
            total.tokens += s.tokens;
            total.correct += s.correct;
        }
        total.loss = if total.tokens > 0 { nll / total.tokens as f64 } else { 0.0 };
        Ok(total)
    }

    pub fn encode_states(&self, sentences: &[Sentence]) -> Result<Vec<EncoderStates<T>>> {
        let mut out: Vec<Option<EncoderStates<T>>> = vec![None; sentences.len()];
        for idx in buckets(sentences.iter().map(Vec::len), EVAL_BATCH) {
            let mut g = Graph::new(self, false, None);
            let srcs: Vec<&Sentence> = idx.iter().map(|&i| &sentences[i]).collect();
            let enc = g.encode(&srcs)?;
            let b = idx.len();
            let emb = g.tape.value(enc.embedded).clone();
            let stacked: Vec<Tensor<T>> = enc
                .layers
                .iter()
                .map(|outs| {
                    let parts: Vec<&Tensor<T>> = outs.iter().map(|&v| g.tape.value(v)).collect();
                    let cols = parts[0].cols();
                    let data = parts.iter().flat_map(|p| p.data().iter().copied()).collect();
                    Tensor::new(vec![parts.len() * b, cols], data).expect("consistent")
                })
                .collect();
            for (k, &i) in idx.iter().enumerate() {
                let n = sentences[i].len();
                let mut layers = vec![rows_of(&emb, (0..n).map(|t| t * b + k))];
                layers.extend(stacked.iter().map(|s| rows_of(s, (0..n).map(|t| t * b + k))));
                let final_h = enc.finals.iter().map(|(h, _)| g.tape.value(*h).row(k).to_vec()).collect();
                let final_c = enc.finals.iter().map(|(_, c)| g.tape.value(*c).row(k).to_vec()).collect();
                out[i] = Some(EncoderStates {
                    layers,
                    final_h,
                    final_c,
                });
            }
        }
        Ok(out.into_iter().map(|s| s.expect("every sentence bucketed")).collect())
    }

    /// Teacher-forced decoder representations for gold target sentences.
    pub fn decode_states(&self, pairs: &[(Sentence, Sentence)]) -> Result<Vec<DecoderStates<T>>> {
        let mut out: Vec<Option<DecoderStates<T>>> = vec![None; pairs.len()];
        for idx in buckets(pairs.iter().map(|p| p.0.len()), EVAL_BATCH) {
            let mut g = Graph::new(self, false, None);
            let srcs: Vec<&Sentence> = idx.iter().map(|&i| &pairs[i].0).collect();
            let enc = g.encode(&srcs)?;
            let batch = Batch {
                src: Vec::new(),
                tgt: idx.iter().map(|&i| pairs[i].1.clone()).collect(),
            };
            let (inputs, _) = batch.teacher_io();
            let dec = g.decode_teacher(&enc, &inputs)?;
            let b = idx.len();
            let pre = g.tape.value(dec.pre_softmax);
            for (k, &i) in idx.iter().enumerate() {
                let n = pairs[i].1.len();
                if n == 0 {
                    return Err(Error::Data(format!("empty target sentence at index {i}")));
                }
                // step s consumes input s; target token i is input i + 1
                let rows = || (1..=n).map(|s| s * b + k);
                out[i] = Some(DecoderStates {
                    pre_softmax: rows_of(pre, rows()),
                    raw: dec.raw.iter().map(|&r| rows_of(g.tape.value(r), rows())).collect(),
                });
            }
        }
        Ok(out.into_iter().map(|s| s.expect("every pair bucketed")).collect())
    }

    pub fn translate_greedy(&self, src: &Sentence, max_len: usize) -> Result<Translation> {
        Ok(self.translate_all(std::slice::from_ref(src), max_len)?.remove(0))
    }

    /// Greedy decoding from `<s>` until `</s>` or `max_len` tokens.
    pub fn translate_all(&self, sources: &[Sentence], max_len: usize) -> Result<Vec<Translation>> {
        let mut out: Vec<Option<Translation>> = vec![None; sources.len()];
        for idx in buckets(sources.iter().map(Vec::len), EVAL_BATCH) {
            let mut g = Graph::new(self, false, None);
            let srcs: Vec<&Sentence> = idx.iter().map(|&i| &sources[i]).collect();
            let enc = g.encode(&srcs)?;
            let memory = if self.config.attention { Some(g.memory(&enc)?) } else { None };
            let mut state = g.init_decoder(&enc);
            let b = idx.len();
            let mut prev: Vec<String> = vec!["<s>".into(); b];
            let mut hyp: Vec<Sentence> = vec![Vec::new(); b];
            let mut done = vec![false; b];
            for _ in 0..max_len {
                if done.iter().all(|&d| d) {
                    break;
                }
                let prev_ref: Vec<&str> = prev.iter().map(String::as_str).collect();
                let (step, next) = g.decode_step(&prev_ref, &state, memory)?;
                state = next;
                let logits = g.tape.value(step.logits);
                for k in 0..b {
                    if done[k] {
                        continue;
                    }
                    let id = argmax_output(logits.row(k));
                    if id == EOS {
                        done[k] = true;
                        continue;
                    }
                    let tok = self.tgt_vocab.token(id).to_string();
                    prev[k] = tok.clone();
                    hyp[k].push(tok);
                }
            }
            for (k, &i) in idx.iter().enumerate() {
                let tokens = std::mem::take(&mut hyp[k]);
                let unk = self.tgt_vocab.token(UNK);
                let unk_count = tokens.iter().filter(|t| t.as_str() == unk).count();
                out[i] = Some(Translation { tokens, unk_count });
            }
        }
        Ok(out.into_iter().map(|t| t.expect("every source bucketed")).collect())
    }
}
