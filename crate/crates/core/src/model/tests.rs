use super::*;
use crate::corpus::{Sentence, UNK};
use crate::tensor::layers::lstm_step;
use crate::tensor::Tape;

fn s(text: &str) -> Sentence {
    text.split_whitespace().map(str::to_string).collect()
}

fn corpus() -> Vec<(Sentence, Sentence)> {
    vec![
        (s("kitobm olmadi"), s("book took")),
        (s("kitobler olmadi bu"), s("this book pl took")),
        (s("qalam yozdi"), s("pen wrote")),
        (s("qalamler yozdi va qalam"), s("pens wrote and pen")),
    ]
}

fn small_config(repr: ReprKind, attention: bool) -> ModelConfig {
    let mut c = ModelConfig::preset(Preset::Desk, repr);
    c.d_embed = 6;
    c.d_hidden = 5;
    c.attention = attention;
    c.init_scale = 0.5;
    if let Some(ch) = c.char.as_mut() {
        ch.d_char = 4;
        ch.n_feature_maps = 6;
    }
    c
}

fn model<T: Real>(repr: ReprKind, attention: bool) -> Seq2Seq<T> {
    let pairs = corpus();
    let src = Vocab::build(pairs.iter().map(|p| &p.0), 1, None).unwrap();
    let tgt = Vocab::build(pairs.iter().map(|p| &p.1), 1, None).unwrap();
    let (sc, tc) = match repr {
        ReprKind::Word => (None, None),
        ReprKind::CharCnn => (
            Some(CharVocab::build(pairs.iter().map(|p| &p.0))),
            Some(CharVocab::build(pairs.iter().map(|p| &p.1))),
        ),
    };
    Seq2Seq::new(small_config(repr, attention), src, tgt, sc, tc).unwrap()
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

#[test]
fn word_embedding_is_a_table_lookup() {
    let m = model::<f64>(ReprKind::Word, true);
    let mut g = Graph::new(&m, false, None);
    let e = g.embed(Side::Encoder, &["qalam", "never-seen", "qalam"]).unwrap();
    let table = m.params.get(m.params.require("enc.embed").unwrap());
    let v = g.tape.value(e);
    assert_eq!(v.row(0), table.row(m.src_vocab.id("qalam") as usize));
    assert_eq!(v.row(1), table.row(UNK as usize));
    assert_eq!(v.row(0), v.row(2));
}

#[test]
fn char_embedding_matches_single_word_oracle() {
    let m = model::<f64>(ReprKind::CharCnn, true);
    let words = ["kitobm", "qalam", "kitobm", "unseenword"];
    let mut g = Graph::new(&m, false, None);
    let e = g.embed(Side::Encoder, &words).unwrap();
    let batch = g.tape.value(e).clone();
    for (i, w) in words.iter().enumerate() {
        let mut g1 = Graph::new(&m, false, None);
        let e1 = g1.embed(Side::Encoder, &[w]).unwrap();
        assert_eq!(g1.tape.value(e1).row(0), batch.row(i), "{w}");
    }
    assert_ne!(batch.row(0), batch.row(1));
    // an out-of-vocabulary word still gets a distinct vector
    assert_ne!(batch.row(3), batch.row(0));
    assert_eq!(batch.cols(), 6);
}

#[test]
fn length_one_sentence_encodes() {
    let m = model::<f64>(ReprKind::Word, true);
    let st = m.encode_states(&[s("qalam")]).unwrap();
    assert_eq!(st[0].layers.len(), 3);
    for l in &st[0].layers {
        assert_eq!(l.rows(), 1);
    }
    let t = m.translate_greedy(&s("qalam"), 4).unwrap();
    assert!(t.tokens.len() <= 4);
}

#[test]
fn zero_parameters_give_zero_states() {
    let mut m = model::<f64>(ReprKind::Word, true);
    m.params.zero_all();
    let st = m.encode_states(&[s("kitobm olmadi")]).unwrap();
    for l in &st[0].layers {
        assert!(l.data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn first_layer_matches_manual_lstm_replay() {
    let m = model::<f64>(ReprKind::Word, true);
    let sent = s("kitobler olmadi bu");
    let st = m.encode_states(std::slice::from_ref(&sent)).unwrap();
    let p = |n: &str| m.params.get(m.params.require(n).unwrap()).clone();
    let table = p("enc.embed");
    let mut tape = Tape::<f64>::new();
    let (wx, wh, b) = (tape.constant(p("enc.lstm0.w_x")), tape.constant(p("enc.lstm0.w_h")), tape.constant(p("enc.lstm0.b")));
    let mut h = tape.constant(Tensor::zeros(&[1, 5]));
    let mut c = tape.constant(Tensor::zeros(&[1, 5]));
    for (t, w) in sent.iter().enumerate() {
        let row = table.row(m.src_vocab.id(w) as usize).to_vec();
        let x = tape.constant(Tensor::new(vec![1, 6], row).unwrap());
        (h, c) = lstm_step(&mut tape, x, h, c, wx, wh, b).unwrap();
        assert!(close(tape.value(h).data(), st[0].layers[1].row(t), 1e-12));
    }
    assert!(close(tape.value(h).data(), &st[0].final_h[0], 1e-12));
    assert!(close(tape.value(c).data(), &st[0].final_c[0], 1e-12));
}

#[test]
fn attention_weights_are_a_distribution_over_source() {
    let m = model::<f64>(ReprKind::Word, true);
    let srcs = corpus();
    let b3 = s("qalam yozdi va");
    let mut g = Graph::new(&m, false, None);
    let enc = g.encode(&[&srcs[1].0, &b3]).unwrap();
    let mem = g.memory(&enc).unwrap();
    let q = g.tape.constant(Tensor::from_f64(&[2, 5], &[0.3, -0.2, 0.1, 0.5, -0.4, 0.0, 0.2, 0.9, -0.1, 0.3]).unwrap());
    let att = g.attend(q, mem).unwrap();
    let w = g.tape.value(att.weights).clone();
    let ctx = g.tape.value(att.context).clone();
    let top = enc.layers.last().unwrap();
    for r in 0..2 {
        let sum: f64 = w.row(r).iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        let mut direct = vec![0.0; 5];
        for (t, &v) in top.iter().enumerate() {
            for (d, x) in direct.iter_mut().enumerate() {
                *x += w.get(r, t) * g.tape.value(v).get(r, d);
            }
        }
        assert!(close(ctx.row(r), &direct, 1e-12));
    }
}

#[test]
fn single_source_position_gets_all_attention() {
    let m = model::<f64>(ReprKind::Word, true);
    let src = s("qalam");
    let mut g = Graph::new(&m, false, None);
    let enc = g.encode(&[&src]).unwrap();
    let mem = g.memory(&enc).unwrap();
    let q = g.tape.constant(Tensor::from_f64(&[1, 5], &[1.0, 2.0, -3.0, 0.5, 0.0]).unwrap());
    let att = g.attend(q, mem).unwrap();
    assert!((g.tape.value(att.weights).data()[0] - 1.0).abs() < 1e-12);
    let h = g.tape.value(enc.layers.last().unwrap()[0]).data().to_vec();
    assert!(close(g.tape.value(att.context).data(), &h, 1e-12));
}

#[test]
fn saturated_scores_select_one_position() {
    let mut m = model::<f64>(ReprKind::Word, true);
    // scale W_a so the scores become very peaked
    let id = m.params.require("attn.w_a").unwrap();
    m.params.get_mut(id).data_mut().iter_mut().for_each(|v| *v *= 1e6);
    let src = s("kitobler olmadi bu");
    let mut g = Graph::new(&m, false, None);
    let enc = g.encode(&[&src]).unwrap();
    let mem = g.memory(&enc).unwrap();
    let q = g.tape.constant(Tensor::from_f64(&[1, 5], &[1.0, -1.0, 1.0, -1.0, 1.0]).unwrap());
    let att = g.attend(q, mem).unwrap();
    let w = g.tape.value(att.weights).data().to_vec();
    let best = (0..3).max_by(|&a, &b| w[a].total_cmp(&w[b])).unwrap();
    assert!(w[best] > 1.0 - 1e-6, "{w:?}");
    let h = g.tape.value(enc.layers.last().unwrap()[best]).data().to_vec();
    assert!(close(g.tape.value(att.context).data(), &h, 1e-6));
}

#[test]
fn attention_disabled_is_a_config_error() {
    let m = model::<f64>(ReprKind::Word, false);
    assert!(!m.params.iter().any(|(n, _)| n.starts_with("attn.")));
    let mut g = Graph::new(&m, false, None);
    let q = g.tape.constant(Tensor::zeros(&[1, 5]));
    let mem = g.tape.constant(Tensor::zeros(&[1, 5]));
    let mem = g.tape.stack_steps(&[mem]).unwrap();
    assert_eq!(g.attend(q, mem).unwrap_err().category(), "config");
}

/// Replaces every non-final encoder output by zeros, keeping final states.
fn blank_non_final(g: &mut Graph<'_, f64>, enc: &EncoderOut) -> EncoderOut {
    let mut e = enc.clone();
    for l in e.layers.iter_mut() {
        let n = l.len();
        for v in &mut l[..n - 1] {
            *v = g.tape.constant(Tensor::zeros(&[1, 5]));
        }
    }
    e
}

#[test]
fn without_attention_only_final_states_matter() {
    let inputs = vec![vec!["<s>", "book", "took"]];
    let src = s("kitobler olmadi bu");
    for attention in [false, true] {
        let m = model::<f64>(ReprKind::Word, attention);
        let mut g = Graph::new(&m, false, None);
        let enc = g.encode(&[&src]).unwrap();
        let a = g.decode_teacher(&enc, &inputs).unwrap();
        let blanked = blank_non_final(&mut g, &enc);
        let b = g.decode_teacher(&blanked, &inputs).unwrap();
        let same = g.tape.value(a.logits).data() == g.tape.value(b.logits).data();
        assert_eq!(same, !attention, "attention={attention}");
    }
}

#[test]
fn stepwise_decoding_equals_teacher_forcing() {
    for attention in [true, false] {
        let m = model::<f64>(ReprKind::Word, attention);
        let src = [s("kitobm olmadi"), s("qalam yozdi")];
        let tgt = [vec!["<s>", "book", "took"], vec!["<s>", "pen", "<pad>"]];
        let mut g = Graph::new(&m, false, None);
        let enc = g.encode(&[&src[0], &src[1]]).unwrap();
        let dec = g.decode_teacher(&enc, &tgt).unwrap();
        let batch_logits = g.tape.value(dec.logits).clone();
        let memory = if attention { Some(g.memory(&enc).unwrap()) } else { None };
        let mut state = g.init_decoder(&enc);
        for t in 0..3 {
            let prev: Vec<&str> = tgt.iter().map(|s| s[t]).collect();
            let (out, next) = g.decode_step(&prev, &state, memory).unwrap();
            state = next;
            let lv = g.tape.value(out.logits);
            for b in 0..2 {
                assert!(close(lv.row(b), batch_logits.row(t * 2 + b), 1e-12));
            }
        }
    }
}

#[test]
fn decode_step_rejects_bad_state() {
    let m = model::<f64>(ReprKind::Word, false);
    let mut g = Graph::new(&m, false, None);
    let err = g.decode_step(&["<s>"], &DecoderState::default(), None).unwrap_err();
    assert_eq!(err.category(), "state");
}

#[test]
fn char_model_predicts_target_words() {
    let m = model::<f64>(ReprKind::CharCnn, true);
    let mut g = Graph::new(&m, false, None);
    let src = s("kitobm olmadi");
    let enc = g.encode(&[&src]).unwrap();
    let dec = g.decode_teacher(&enc, &[vec!["<s>", "book"]]).unwrap();
    assert_eq!(g.tape.value(dec.logits).shape(), &[2, m.tgt_vocab.len()]);
}

#[test]
fn decoder_states_follow_consumed_tokens() {
    let m = model::<f64>(ReprKind::Word, true);
    let pairs = vec![(s("kitobm olmadi"), s("book took")), (s("qalam yozdi"), s("pen"))];
    let st = m.decode_states(&pairs).unwrap();
    assert_eq!(st[0].pre_softmax.rows(), 2);
    assert_eq!(st[1].pre_softmax.rows(), 1);
    assert_eq!(st[0].raw.len(), 2);
    // row 0 is the step that reads "book", i.e. the second decoder step
    let mut g = Graph::new(&m, false, None);
    let enc = g.encode(&[&pairs[0].0]).unwrap();
    let mem = g.memory(&enc).unwrap();
    let s0 = g.init_decoder(&enc);
    let (_, s1) = g.decode_step(&["<s>"], &s0, Some(mem)).unwrap();
    let (o, _) = g.decode_step(&["book"], &s1, Some(mem)).unwrap();
    assert!(close(g.tape.value(o.pre_softmax).data(), st[0].pre_softmax.row(0), 1e-12));
}

#[test]
fn batch_loss_counts_real_tokens() {
    let m = model::<f64>(ReprKind::Word, true);
    let batch = Batch {
        src: vec![s("kitobm olmadi"), s("qalam yozdi")],
        tgt: vec![s("book took"), s("pen")],
    };
    let (_, _, stats) = m.batch_graph(&batch, None).unwrap();
    // three words plus two end markers
    assert_eq!(stats.tokens, 5);
    assert!(stats.loss > 0.0 && stats.loss.is_finite());
    let uniform = (m.tgt_vocab.len() as f64).ln();
    assert!((stats.loss - uniform).abs() < 1.0);
}

#[test]
fn checkpoint_round_trip_preserves_parameters() {
    for repr in [ReprKind::Word, ReprKind::CharCnn] {
        let m = model::<f32>(repr, true);
        let bytes = m.to_bytes().unwrap();
        let back = Seq2Seq::<f32>::from_bytes(&bytes).unwrap();
        assert_eq!(back.params.checksum(), m.params.checksum());
        assert_eq!(back.config, m.config);
        assert_eq!(back.src_vocab.tokens(), m.src_vocab.tokens());
        let src = s("kitobm olmadi");
        assert_eq!(back.translate_greedy(&src, 5).unwrap(), m.translate_greedy(&src, 5).unwrap());
    }
}

#[test]
fn checkpoint_rejects_wrong_kind() {
    let mut buf = Vec::new();
    crate::tensor::write_container(&mut buf, "probe", serde_json::json!({}), &[]).unwrap();
    assert!(Seq2Seq::<f32>::from_bytes(&buf).is_err());
}

#[test]
fn translation_respects_length_bound_and_counts_unknowns() {
    let mut m = model::<f64>(ReprKind::Word, true);
    // force the output layer to always prefer <unk>
    let id = m.params.require("out.b").unwrap();
    m.params.get_mut(id).data_mut()[UNK as usize] = 1e3;
    let outs = m.translate_all(&[s("kitobm olmadi"), s("qalam"), s("qalam yozdi")], 3).unwrap();
    for t in &outs {
        assert_eq!(t.tokens.len(), 3);
        assert_eq!(t.unk_count, 3);
    }
    let id = m.params.require("out.b").unwrap();
    m.params.get_mut(id).data_mut()[crate::corpus::EOS as usize] = 1e4;
    let t = m.translate_greedy(&s("qalam"), 3).unwrap();
    assert!(t.tokens.is_empty());
    assert_eq!(t.unk_count, 0);
}

#[test]
fn argmax_skips_padding_and_start() {
    assert_eq!(forward::argmax_output(&[9.0f64, 0.0, 9.0, 1.0, 1.0]), 3);
    assert_eq!(forward::argmax_output(&[0.0f64, 2.0, 0.0, 1.0, 2.0]), 1);
}

#[test]
fn full_model_gradient_matches_finite_differences() {
    for (repr, attention) in [(ReprKind::Word, true), (ReprKind::Word, false), (ReprKind::CharCnn, true)] {
        let mut m = model::<f64>(repr, attention);
        m.config.dropout = 0.0;
        let batch = Batch {
            src: vec![s("kitobm olmadi bu"), s("qalamler yozdi va")],
            tgt: vec![s("book took"), s("pens wrote and pen")],
        };
        let (mut g, loss, _) = m.batch_graph(&batch, None).unwrap();
        g.tape.backward(loss).unwrap();
        let grads = g.grads();
        drop(g);
        let eps = 1e-6;
        for id in m.params.ids().collect::<Vec<_>>() {
            let name = m.params.name(id).to_string();
            let analytic = grads[id.index()].clone().unwrap_or_else(|| panic!("no grad for {name}"));
            let n = m.params.get(id).len();
            for k in [0, n / 2, n - 1] {
                let orig = m.params.get(id).data()[k];
                m.params.get_mut(id).data_mut()[k] = orig + eps;
                let up = m.batch_graph(&batch, None).unwrap().2.loss;
                m.params.get_mut(id).data_mut()[k] = orig - eps;
                let down = m.batch_graph(&batch, None).unwrap().2.loss;
                m.params.get_mut(id).data_mut()[k] = orig;
                let numeric = (up - down) / (2.0 * eps);
                let a = analytic[k];
                let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
                assert!(err < 1e-4 || (a - numeric).abs() < 1e-9, "{repr:?} {name}[{k}]: analytic {a} numeric {numeric}");
            }
        }
    }
}
