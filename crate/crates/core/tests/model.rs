use qknorm_core::attention::AttentionKind;
use qknorm_core::model::{with_eos, ForwardOptions, ModelConfig, SeqBatch, Side, Transformer};
use qknorm_core::norm::{layer_norm, LAYER_NORM_EPS};
use qknorm_core::vocab::BOS;
use qknorm_core::{Tape, Tensor};

fn cfg(kind: AttentionKind) -> ModelConfig {
    ModelConfig {
        d_model: 16,
        num_heads: 4,
        num_layers: 2,
        d_ff: 32,
        dropout: 0.0,
        attention_mode: kind,
        g_init: Some(4.0),
        src_vocab_size: 12,
        tgt_vocab_size: 12,
        max_seq_len: 32,
        ..ModelConfig::default()
    }
}

fn decoder_out(model: &Transformer, src: &[usize], tgt: &[usize], opts: ForwardOptions) -> Vec<f64> {
    let src = SeqBatch::new(&[with_eos(src)]).unwrap();
    let tgt = SeqBatch::new(&[tgt.to_vec()]).unwrap();
    let mut s = model.session(opts, 0);
    let mem = s.encode(&src).unwrap();
    let h = s.decode(&tgt, mem, &src).unwrap();
    s.tape.data(h).to_vec()
}

#[test]
fn decoder_is_causal() {
    for kind in [AttentionKind::ScaledDotProduct, AttentionKind::QkNorm] {
        let model = Transformer::new(cfg(kind), 2).unwrap();
        let src = [4, 5, 6, 7];
        let a = [BOS, 4, 5, 6, 7, 8, 9, 10];
        let mut b = a;
        b[5] = 11;
        let (ya, yb) = (
            decoder_out(&model, &src, &a, ForwardOptions::default()),
            decoder_out(&model, &src, &b, ForwardOptions::default()),
        );
        let d = 16;
        assert_eq!(ya[..5 * d], yb[..5 * d], "{kind}");
        assert_ne!(ya[5 * d..6 * d], yb[5 * d..6 * d]);
    }
}

fn final_norm_of(model: &Transformer, prefix: &str, x: &Tensor) -> Vec<f64> {
    let mut t = Tape::new();
    let xv = t.constant(x.clone());
    let g = t.constant(model.params().by_name(&format!("{prefix}.gain")).unwrap().clone());
    let b = t.constant(model.params().by_name(&format!("{prefix}.bias")).unwrap().clone());
    let y = layer_norm(&mut t, xv, g, b, LAYER_NORM_EPS).unwrap();
    t.data(y).to_vec()
}

#[test]
fn zero_sublayers_leave_final_norm_of_embedding() {
    let model = Transformer::new(cfg(AttentionKind::QkNorm), 3).unwrap();
    let tgt = [BOS, 4, 7, 7, 2];
    let tb = SeqBatch::new(&[tgt.to_vec()]).unwrap();
    let mut s = model.session(ForwardOptions::default(), 0);
    let emb = s.embed(Side::Target, &tb, true).unwrap();
    let emb = s.tape.value(emb).clone();
    let opts = ForwardOptions {
        zero_sublayers: true,
        ..ForwardOptions::default()
    };
    let got = decoder_out(&model, &[4, 5], &tgt, opts);
    let want = final_norm_of(&model, "decoder.final_norm", &emb);
    let diff = got.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(diff < 1e-12, "{diff}");
}

#[test]
fn zero_layers_is_identity_stack() {
    let model = Transformer::new(ModelConfig { num_layers: 0, ..cfg(AttentionKind::QkNorm) }, 3).unwrap();
    assert!(model.g_values().is_empty());
    let tgt = [BOS, 9, 4];
    let tb = SeqBatch::new(&[tgt.to_vec()]).unwrap();
    let mut s = model.session(ForwardOptions::default(), 0);
    let emb = s.embed(Side::Target, &tb, true).unwrap();
    let emb = s.tape.value(emb).clone();
    let got = decoder_out(&model, &[4], &tgt, ForwardOptions::default());
    assert_eq!(got, final_norm_of(&model, "decoder.final_norm", &emb));
}

#[test]
fn embed_shape() {
    let model = Transformer::new(
        ModelConfig {
            d_model: 64,
            ..cfg(AttentionKind::QkNorm)
        },
        1,
    )
    .unwrap();
    let b = SeqBatch::new(&[(0..10).map(|i| 3 + i % 9).collect()]).unwrap();
    let mut s = model.session(ForwardOptions::default(), 0);
    let x = s.embed(Side::Source, &b, true).unwrap();
    assert_eq!(s.tape.shape(x), &[1, 10, 64]);
}

#[test]
fn base_scale_forward_backward_has_finite_gradients() {
    for kind in [AttentionKind::ScaledDotProduct, AttentionKind::QkNorm] {
        let cfg = ModelConfig {
            attention_mode: kind,
            g_init: Some(12.3),
            src_vocab_size: 16,
            tgt_vocab_size: 16,
            ..ModelConfig::base_scale()
        };
        let model = Transformer::new(cfg, 5).unwrap();
        let opts = ForwardOptions {
            train: true,
            track_grads: true,
            ..ForwardOptions::default()
        };
        let mut s = model.session(opts, 1);
        let loss = s.loss(&[vec![4, 5, 6], vec![7]], &[vec![8, 9], vec![10, 11, 12]], 0.1).unwrap();
        assert!(s.tape.value(loss).item().unwrap().is_finite());
        s.tape.backward(loss).unwrap();
        for (name, g) in model.params().names().iter().zip(s.param_grads()) {
            let g = g.unwrap_or_else(|| panic!("{name} has no gradient"));
            assert!(g.iter().all(|x| x.is_finite()), "{kind}: {name}");
        }
    }
}

#[test]
fn padding_does_not_change_token_losses() {
    let model = Transformer::new(cfg(AttentionKind::QkNorm), 7).unwrap();
    let loss = |src: &[Vec<usize>], tgt: &[Vec<usize>]| {
        let mut s = model.session(ForwardOptions::default(), 0);
        let l = s.loss(src, tgt, 0.0).unwrap();
        s.tape.value(l).item().unwrap()
    };
    let (sa, ta) = (vec![4, 5], vec![6]);
    let (sb, tb) = (vec![4, 5, 6, 7, 8, 9], vec![9, 8, 7, 6, 5]);
    let la = loss(std::slice::from_ref(&sa), std::slice::from_ref(&ta));
    let lb = loss(std::slice::from_ref(&sb), std::slice::from_ref(&tb));
    let both = loss(&[sa, sb], &[ta.clone(), tb.clone()]);
    let (na, nb) = ((ta.len() + 1) as f64, (tb.len() + 1) as f64);
    let expected = (la * na + lb * nb) / (na + nb);
    assert!((both - expected).abs() < 1e-10, "{both} vs {expected}");
}
