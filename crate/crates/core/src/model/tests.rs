use super::*;
use crate::taxonomy::{DialogAct, Emotion};

fn vocab() -> Vocab {
    Vocab::build(["the cat sat on a mat", "my dog ran away", "so sorry to hear"])
}

fn model(variant: &str, d: usize, std: f64) -> ComaeModel {
    let v = vocab();
    let mut cfg = ModelConfig::new(v.len(), variant.parse().unwrap());
    cfg.d_model = d;
    cfg.n_layers = 1;
    cfg.n_heads = 2.min(d);
    cfg.max_len = 32;
    cfg.init_std = std;
    ComaeModel::new(cfg, v, 7).unwrap()
}

fn utt(tokens: &[usize], speaker: usize, da: &str, em: &str) -> EncodedUtterance {
    EncodedUtterance {
        tokens: tokens.to_vec(),
        speaker,
        da: Some(da.parse().unwrap()),
        em: Some(em.parse().unwrap()),
    }
}

fn triple(cm: (bool, bool, bool), da: &str, em: &str) -> FactorTriple {
    FactorTriple {
        cm: CommMechanism::new(cm.0, cm.1, cm.2),
        da: da.parse().unwrap(),
        em: em.parse().unwrap(),
    }
}

fn fill(m: &mut ComaeModel, id: ParamId, f: impl Fn(usize, usize) -> f64) {
    let t = m.params().get(id);
    let (r, c) = (t.rows(), t.cols());
    let data = (0..r * c).map(|k| f(k / c, k % c)).collect();
    m.params_mut().set(id, Tensor::new(vec![r, c], data).unwrap()).unwrap();
}

fn ctx() -> Vec<EncodedUtterance> {
    vec![utt(&[2, 3, 4], 0, "others", "sadness"), utt(&[5, 6], 1, "questioning", "fear")]
}

#[test]
fn context_length_counts_one_separator() {
    let m = model("cm->da->em", 4, 0.1);
    let e = m.embed_context(&ctx()).unwrap();
    assert_eq!(e.shape(), &[6, 4]);
}

#[test]
fn zero_tables_embed_to_zero() {
    let mut m = model("cm->da->em", 4, 0.1);
    let ids = [
        m.word_table(),
        m.layout.position,
        m.layout.speaker,
        m.da_table().unwrap(),
        m.em_table().unwrap(),
    ];
    for id in ids {
        fill(&mut m, id, |_, _| 0.0);
    }
    let e = m.embed_context(&ctx()).unwrap();
    assert!(e.data().iter().all(|&v| v == 0.0));
}

#[test]
fn embedding_is_five_term_sum() {
    // Each table writes a distinct power of ten into column 0, so every
    // token's value spells out its (word, pos, speaker, da, em) indices.
    let mut m = model("cm->da->em", 4, 0.1);
    let scales = [1.0, 100.0, 1e4, 1e5, 1e7];
    let ids = [
        m.word_table(),
        m.layout.position,
        m.layout.speaker,
        m.da_table().unwrap(),
        m.em_table().unwrap(),
    ];
    for (id, s) in ids.into_iter().zip(scales) {
        fill(&mut m, id, move |r, c| if c == 0 { s * r as f64 } else { 0.0 });
    }
    let e = m.embed_context(&ctx()).unwrap();
    let others = DialogAct::others().index() as f64;
    let q = "questioning".parse::<DialogAct>().unwrap().index() as f64;
    let sad = "sadness".parse::<Emotion>().unwrap().index() as f64;
    let fear = "fear".parse::<Emotion>().unwrap().index() as f64;
    // tokens 2,3,4 then the separator (speaker 0, first utterance labels)
    let rows = [
        (2.0, 0.0, 0.0, others, sad),
        (3.0, 1.0, 0.0, others, sad),
        (4.0, 2.0, 0.0, others, sad),
        (0.0, 3.0, 0.0, others, sad),
        (5.0, 4.0, 1.0, q, fear),
        (6.0, 5.0, 1.0, q, fear),
    ];
    for (i, (w, p, k, a, em)) in rows.iter().enumerate() {
        let want = w + 100.0 * p + 1e4 * k + 1e5 * a + 1e7 * em;
        assert_eq!(e.row(i)[0], want, "row {i}");
        assert_eq!(&e.row(i)[1..], &[0.0, 0.0, 0.0]);
    }
}

#[test]
fn context_errors() {
    let m = model("cm->da->em", 4, 0.1);
    let long = vec![utt(&[2; 40], 0, "others", "joy")];
    assert!(m.embed_context(&long).unwrap_err().to_string().contains("exceeds"));
    let mut missing = ctx();
    missing[0].da = None;
    assert!(m.embed_context(&missing).unwrap_err().to_string().contains("DA"));
    // vanilla has no DA table and does not need the label
    assert!(model("vanilla", 4, 0.1).embed_context(&missing).is_ok());
    let mut bad = ctx();
    bad[1].speaker = 2;
    assert!(m.embed_context(&bad).is_err());
    let mut oov = ctx();
    oov[0].tokens[0] = 999;
    assert!(m.embed_context(&oov).is_err());
}

#[test]
fn h_x_is_last_hidden_row() {
    let m = model("cm->da->em", 4, 0.3);
    let enc = m.encode_context(&ctx()).unwrap();
    assert_eq!(enc.hidden.rows(), 6);
    assert_eq!(enc.h_x.as_slice(), enc.hidden.row(5));
}

#[test]
fn zero_cm_heads_are_fair_coins() {
    let mut m = model("cm->da->em", 4, 0.3);
    for id in m.cm_tables().unwrap() {
        fill(&mut m, id, |_, _| 0.0);
    }
    let h = vec![0.3, -0.2, 0.9, 0.1];
    let p = m.predict_cm(&h, argmax_pick).unwrap();
    for row in p.probs {
        assert_eq!(row, [0.5, 0.5]);
    }
    assert_eq!(p.e_c, vec![0.0; 4]);
}

#[test]
fn e_c_is_table_row_sum() {
    let m = model("cm->da->em", 4, 0.3);
    let h = vec![0.3, -0.2, 0.9, 0.1];
    let mut calls = 0;
    // choose yes, no, yes
    let p = m
        .predict_cm(&h, |_| {
            calls += 1;
            Ok(calls % 2)
        })
        .unwrap();
    assert_eq!(p.chosen, CommMechanism::new(true, false, true));
    let t = m.cm_tables().unwrap();
    let s = m.params();
    for c in 0..4 {
        let want = s.get(t[0]).row(1)[c] + s.get(t[1]).row(0)[c] + s.get(t[2]).row(1)[c];
        assert!((p.e_c[c] - want).abs() < 1e-15);
    }
}

#[test]
fn cm_head_matches_hand_evaluation() {
    let mut m = model("+cm", 2, 0.3);
    let head = m.layout.f_cm.unwrap()[0];
    let w = [[0.5, -1.0], [2.0, 0.25]];
    fill(&mut m, head.weight, |r, c| w[r][c]);
    let b = [0.1, -0.2];
    fill(&mut m, head.bias, |_, c| b[c]);
    let table = [[0.2, -0.4], [1.0, 0.3]];
    let er = m.cm_tables().unwrap()[0];
    fill(&mut m, er, |r, c| table[r][c]);
    let p = m.predict_cm(&[0.3, -0.7], argmax_pick).unwrap();
    // frozen from an independent 30-digit evaluation
    assert!((p.probs[0][0] - 0.743_832_575_107_901_95).abs() < 1e-12);
    assert!((p.probs[0][1] - 0.256_167_424_892_098_05).abs() < 1e-12);
    assert!(!p.chosen.er);
}

#[test]
fn factor_distributions_are_normalized() {
    let m = model("cm->da->em", 4, 0.3);
    let h = vec![0.3, -0.2, 0.9, 0.1];
    let c = m.predict_cm(&h, argmax_pick).unwrap();
    let a = m.predict_da(&h, Some(&c.e_c), argmax_pick).unwrap();
    let e = m.predict_em(&h, Some(&c.e_c), Some(a.chosen), argmax_pick).unwrap();
    assert_eq!(a.probs.len(), 9);
    assert_eq!(e.probs.len(), 10);
    assert!((a.probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    assert!((e.probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    for row in c.probs {
        assert!((row[0] + row[1] - 1.0).abs() < 1e-9);
    }
}

#[test]
fn chained_heads_require_upstream_choices() {
    let m = model("cm->da->em", 4, 0.3);
    let h = vec![0.1; 4];
    assert!(m.predict_da(&h, None, argmax_pick).is_err());
    assert!(m.predict_da(&h, Some(&[0.0; 3]), argmax_pick).is_err());
    assert!(m.predict_em(&h, Some(&[0.0; 4]), None, argmax_pick).is_err());
    assert!(m.predict_da(&[0.0; 3], Some(&[0.0; 4]), argmax_pick).is_err());
    assert!(model("vanilla", 4, 0.3).predict_da(&h, None, argmax_pick).is_err());
}

#[test]
fn hierarchy_is_live_and_flat_is_invariant() {
    let h = vec![0.3, -0.2, 0.9, 0.1];
    let e1 = vec![0.5, 0.1, -0.3, 0.2];
    let e2 = vec![-0.4, 0.3, 0.0, 0.7];
    let (a1, a2) = (DialogAct::new(0).unwrap(), DialogAct::new(4).unwrap());

    let chained = model("cm->da->em", 4, 0.3);
    let d1 = chained.predict_da(&h, Some(&e1), argmax_pick).unwrap().probs;
    let d2 = chained.predict_da(&h, Some(&e2), argmax_pick).unwrap().probs;
    let diff: f64 = d1.iter().zip(&d2).map(|(x, y)| (x - y).abs()).sum();
    assert!(diff > 1e-6);
    let m1 = chained.predict_em(&h, Some(&e1), Some(a1), argmax_pick).unwrap().probs;
    let m2 = chained.predict_em(&h, Some(&e1), Some(a2), argmax_pick).unwrap().probs;
    let diff: f64 = m1.iter().zip(&m2).map(|(x, y)| (x - y).abs()).sum();
    assert!(diff > 1e-6);

    let flat = model("cm||da||em", 4, 0.3);
    let d1 = flat.predict_da(&h, Some(&e1), argmax_pick).unwrap().probs;
    let d2 = flat.predict_da(&h, Some(&e2), argmax_pick).unwrap().probs;
    assert_eq!(d1, d2);
    let m1 = flat.predict_em(&h, Some(&e1), Some(a1), argmax_pick).unwrap().probs;
    let m2 = flat.predict_em(&h, Some(&e2), Some(a2), argmax_pick).unwrap().probs;
    assert_eq!(m1, m2);
}

#[test]
fn head_input_widths_follow_variant() {
    let width = |m: &ComaeModel, a: Option<Affine>| m.params().get(a.unwrap().weight).rows();
    let m = model("cm->da->em", 4, 0.1);
    assert_eq!(width(&m, m.layout.f_da), 8);
    assert_eq!(width(&m, m.layout.f_em), 12);
    let m = model("da->em", 4, 0.1);
    assert_eq!(width(&m, m.layout.f_da), 4);
    assert_eq!(width(&m, m.layout.f_em), 8);
    let m = model("cm||da||em", 4, 0.1);
    assert_eq!(width(&m, m.layout.f_em), 4);
    let m = model("vanilla", 4, 0.1);
    assert!(m.params().iter().all(|(_, n, _)| n.starts_with("decoder")
        || ["word", "position", "speaker"].contains(&n)));
}

#[test]
fn fused_embedding_is_additive() {
    let m = model("cm->da->em", 4, 0.3);
    let t = triple((true, true, false), "consoling", "caring");
    let f = m.fuse_factors(&t).unwrap();
    let s = m.params();
    let cm = m.cm_tables().unwrap();
    let da_t = s.get(m.da_table().unwrap());
    let em_t = s.get(m.em_table().unwrap());
    for c in 0..4 {
        let want = s.get(cm[0]).row(1)[c]
            + s.get(cm[1]).row(1)[c]
            + s.get(cm[2]).row(0)[c]
            + da_t.row(t.da.index())[c]
            + em_t.row(t.em.index())[c];
        assert!((f[c] - want).abs() < 1e-15);
    }
    let mut t2 = t;
    t2.da = "wishing".parse().unwrap();
    let f2 = m.fuse_factors(&t2).unwrap();
    for c in 0..4 {
        let delta = da_t.row(t2.da.index())[c] - da_t.row(t.da.index())[c];
        assert!((f2[c] - f[c] - delta).abs() < 1e-15);
    }
    assert_eq!(model("vanilla", 4, 0.3).fuse_factors(&t).unwrap(), vec![0.0; 4]);
}

#[test]
fn lm_head_is_the_word_table() {
    let mut m = model("cm->da->em", 4, 0.3);
    assert_eq!(m.lm_head(), m.word_table());
    assert!(m.params().iter().all(|(_, n, _)| !n.contains("lm")));
    let before = m.next_token_distribution(&ctx(), &[2], None, 1).unwrap();
    assert!((before.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    // raising one word row raises that word's logit through the shared table
    let id = m.word_table();
    let bump = m.params().get(id).clone();
    let mut data = bump.data().to_vec();
    data[9 * 4..10 * 4].iter_mut().for_each(|v| *v += 5.0);
    m.params_mut().set(id, Tensor::new(bump.shape().to_vec(), data).unwrap()).unwrap();
    let after = m.next_token_distribution(&ctx(), &[2], None, 1).unwrap();
    assert_ne!(before, after);
}

#[test]
fn da_row_drives_context_and_logits() {
    let mut m = model("cm->da->em", 4, 0.3);
    let h = vec![0.3, -0.2, 0.9, 0.1];
    let e_c = vec![0.1; 4];
    let enc0 = m.embed_context(&ctx()).unwrap();
    let log0 = m.predict_da(&h, Some(&e_c), argmax_pick).unwrap().probs;
    let q = "questioning".parse::<DialogAct>().unwrap().index();
    let id = m.da_table().unwrap();
    let t = m.params().get(id).clone();
    let mut data = t.data().to_vec();
    data[q * 4] += 0.5;
    m.params_mut().set(id, Tensor::new(t.shape().to_vec(), data).unwrap()).unwrap();
    assert_ne!(m.embed_context(&ctx()).unwrap(), enc0);
    assert_ne!(m.predict_da(&h, Some(&e_c), argmax_pick).unwrap().probs, log0);
}

#[test]
fn zero_control_matches_unconditioned_path() {
    let m = model("cm->da->em", 4, 0.3);
    let a = m.next_token_distribution(&ctx(), &[3, 4], None, 1).unwrap();
    let b = m.next_token_distribution(&ctx(), &[3, 4], Some(&[0.0; 4]), 1).unwrap();
    assert_eq!(a, b);
    assert!(m.next_token_distribution(&ctx(), &[3; 40], None, 1).is_err());
}

fn example(t: FactorTriple) -> EncodedExample {
    EncodedExample {
        context: ctx(),
        response: vec![7, 8, 9],
        response_speaker: 1,
        triple: Some(t),
    }
}

#[test]
fn uniform_model_closed_form() {
    let mut m = model("cm->da->em", 4, 0.3);
    let mut zero = vec![m.word_table(), m.da_table().unwrap(), m.em_table().unwrap()];
    zero.extend(m.cm_tables().unwrap());
    for id in zero {
        fill(&mut m, id, |_, _| 0.0);
    }
    let ex = example(triple((false, true, false), "consoling", "caring"));
    let j = m.joint_log_prob(&ex).unwrap();
    let v = m.vocab().len() as f64;
    let l = ex.response.len() as f64 + 1.0;
    assert!((j.cm + 2.0794415416798357).abs() < 1e-12);
    assert!((j.da + 2.1972245773362196).abs() < 1e-12);
    assert!((j.em + 2.302585092994046).abs() < 1e-12);
    assert!((j.response + l * v.ln()).abs() < 1e-12);
}

#[test]
fn joint_equals_stepwise_components() {
    let m = model("cm->da->em", 4, 0.3);
    let t = triple((true, false, true), "questioning", "surprise");
    let ex = example(t);
    let j = m.joint_log_prob(&ex).unwrap();
    let h = m.encode_context(&ex.context).unwrap().h_x;
    let c = m.predict_cm(&h, argmax_pick).unwrap();
    let cm: f64 = c
        .probs
        .iter()
        .zip(t.cm.bits())
        .map(|(p, b)| p[usize::from(b)].ln())
        .sum();
    let mut g = Graph::new(m.params());
    let ec = m.cm_embed_g(&mut g, t.cm).unwrap().unwrap();
    let ec = g.value(ec).to_vec();
    let da = m.predict_da(&h, Some(&ec), argmax_pick).unwrap().probs[t.da.index()].ln();
    let em = m.predict_em(&h, Some(&ec), Some(t.da), argmax_pick).unwrap().probs[t.em.index()].ln();
    let fused = m.fuse_factors(&t).unwrap();
    let mut resp = 0.0;
    let mut targets = ex.response.clone();
    targets.push(EOS_ID);
    for (i, &y) in targets.iter().enumerate() {
        let p = m
            .next_token_distribution(&ex.context, &ex.response[..i], Some(&fused), 1)
            .unwrap();
        resp += p[y].ln();
    }
    assert!((j.cm - cm).abs() < 1e-9);
    assert!((j.da - da).abs() < 1e-9);
    assert!((j.em - em).abs() < 1e-9);
    assert!((j.response - resp).abs() < 1e-9);
    assert!((j.total() - (cm + da + em + resp)).abs() < 1e-9);
}

#[test]
fn factor_stages_marginalize_to_one() {
    let m = model("cm->da->em", 4, 0.3);
    let h = m.encode_context(&ctx()).unwrap().h_x;
    let mut total = 0.0;
    for bits in 0..8u8 {
        let cm = CommMechanism::new(bits & 1 != 0, bits & 2 != 0, bits & 4 != 0);
        for a in DialogAct::all() {
            let t = FactorTriple { cm, da: a, em: Emotion::neutral() };
            let d = m.factor_distributions(&h, &t).unwrap();
            let p_cm: f64 = d.cm.unwrap().iter().zip(cm.bits()).map(|(p, b)| p[usize::from(b)]).product();
            let p_da = d.da.unwrap()[a.index()];
            let p_em: f64 = d.em.unwrap().iter().sum();
            total += p_cm * p_da * p_em;
        }
    }
    assert!((total - 1.0).abs() < 1e-9);
}

#[test]
fn vanilla_has_only_a_response_term() {
    let m = model("vanilla", 4, 0.3);
    let mut ex = example(triple((true, false, false), "consoling", "caring"));
    ex.triple = None;
    let j = m.joint_log_prob(&ex).unwrap();
    assert_eq!((j.cm, j.da, j.em), (0.0, 0.0, 0.0));
    assert!(j.response < 0.0);
    assert!(model("+da", 4, 0.3).joint_log_prob(&ex).is_err());
}
