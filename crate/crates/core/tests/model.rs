use diffcore::{Graph, ParamStore, Tensor, Var};
use textformer::model::{
    agg_directional, assemble_instances, assemble_sequence_with, build_cross_attention_mask, pos2d,
    semantic_features, MaskPolicy, ModelConfig, TextFormer, TokenSequence,
};
use textformer::synth::{generate_sample, GenConfig, GrayImage};
use textformer::{Charset, Error};

fn small() -> ModelConfig {
    ModelConfig {
        dim: 16,
        heads: 2,
        ffn_dim: 16,
        backbone_channels: vec![4, 4, 8, 8, 8],
        encoder_layers: 1,
        decoder_layers: 2,
        recognizer_layers: 1,
        num_queries: 3,
        char_queries: 4,
        cls_hidden: 8,
        seg_hidden: 4,
        ..ModelConfig::default()
    }
}

fn image(seed: u64) -> GrayImage {
    generate_sample(&GenConfig::default(), seed).unwrap().image
}

fn constant(g: &mut Graph<f64>, shape: &[usize], f: impl Fn(usize) -> f64) -> Var {
    g.constant(Tensor::from_fn(shape.to_vec(), f).unwrap())
}

fn zero_params(store: &mut ParamStore<f64>, prefix: &str) {
    let names: Vec<String> = store
        .iter()
        .map(|p| p.name.clone())
        .filter(|n| n.starts_with(prefix))
        .collect();
    assert!(!names.is_empty());
    for n in names {
        let shape = store.get(store.id(&n).unwrap()).tensor.shape().to_vec();
        store.set(&n, Tensor::zeros(shape).unwrap()).unwrap();
    }
}

#[test]
fn pyramid_shapes() {
    let (m, store) = TextFormer::new::<f64>(small(), 1).unwrap();
    let mut g = Graph::new();
    let p = store.bind(&mut g, false);
    let x = m.image_input(&mut g, &image(0)).unwrap();
    let pyr = m.backbone.extract_pyramid(&mut g, &p, x).unwrap();
    assert_eq!(g.shape(pyr.p2), &[1, 16, 16, 16]);
    assert_eq!(g.shape(pyr.p3), &[1, 8, 8, 16]);
    assert_eq!(g.shape(pyr.p4), &[1, 4, 4, 16]);
    assert_eq!(g.shape(pyr.p5), &[1, 2, 2, 16]);

    let cfg = ModelConfig {
        height: 32,
        width: 32,
        ..small()
    };
    let (m, store) = TextFormer::new::<f64>(cfg, 1).unwrap();
    let mut g = Graph::new();
    let p = store.bind(&mut g, false);
    let x = constant(&mut g, &[1, 32, 32, 1], |_| 0.0);
    let pyr = m.backbone.extract_pyramid(&mut g, &p, x).unwrap();
    assert_eq!(g.shape(pyr.p5), &[1, 1, 1, 16]);
    // Zero input and zero biases give an all-zero pyramid.
    for v in [pyr.p2, pyr.p3, pyr.p4, pyr.p5] {
        assert!(g.value(v).data().iter().all(|&x| x == 0.0));
    }
}

#[test]
fn bad_image_sizes_are_rejected() {
    let (m, store) = TextFormer::new::<f64>(small(), 1).unwrap();
    let mut g = Graph::new();
    let p = store.bind(&mut g, false);
    let x = constant(&mut g, &[1, 48, 64, 1], |_| 0.0);
    assert!(matches!(
        m.backbone.extract_pyramid(&mut g, &p, x),
        Err(Error::ImageSize {
            height: 48,
            width: 64
        })
    ));
    assert!(TextFormer::new::<f64>(
        ModelConfig {
            width: 40,
            ..small()
        },
        0
    )
    .is_err());
}

#[test]
fn pos2d_properties() {
    let t = pos2d(5, 7, 16).unwrap();
    assert!(t.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    assert_eq!(t, pos2d(5, 7, 16).unwrap());
    let t = pos2d(2, 2, 4).unwrap();
    let rows: Vec<&[f64]> = t.data().chunks(4).collect();
    for i in 0..4 {
        for j in i + 1..4 {
            let dist: f64 = rows[i]
                .iter()
                .zip(rows[j])
                .map(|(a, b)| (a - b).abs())
                .sum();
            assert!(dist > 1e-6, "positions {i} and {j} coincide");
        }
    }
    assert!(pos2d(2, 2, 6).is_err());
}

#[test]
fn encoder_token_layout() {
    let (m, store) = TextFormer::new::<f64>(small(), 2).unwrap();
    let mut g = Graph::new();
    let p = store.bind(&mut g, false);
    let x = m.image_input(&mut g, &image(1)).unwrap();
    let pyr = m.backbone.extract_pyramid(&mut g, &p, x).unwrap();
    let seq = m.encoder.encode(&mut g, &p, &pyr).unwrap();
    assert_eq!(g.shape(seq.tokens), &[84, 16]);
    assert_eq!(seq.level_offsets, [0, 4, 20]);
    assert_eq!(seq.level_sizes, [(2, 2), (4, 4), (8, 8)]);
}

#[test]
fn encoder_is_permutation_equivariant() {
    let (m, store) = TextFormer::new::<f64>(small(), 3).unwrap();
    let mut g = Graph::new();
    let p = store.bind(&mut g, false);
    let tokens = Tensor::from_fn([10, 16], |i| ((i * 37 % 11) as f64 * 0.3).sin()).unwrap();
    let perm = [3, 1, 2, 0, 9, 5, 6, 7, 8, 4];
    let mut permuted = Vec::new();
    for &r in &perm {
        permuted.extend_from_slice(&tokens.data()[r * 16..(r + 1) * 16]);
    }
    let a = g.constant(tokens.clone());
    let a = m.encoder.refine(&mut g, &p, a).unwrap();
    let b = g.constant(Tensor::new([10, 16], permuted).unwrap());
    let b = m.encoder.refine(&mut g, &p, b).unwrap();
    let (a, b) = (g.value(a).clone(), g.value(b).clone());
    for (i, &r) in perm.iter().enumerate() {
        for c in 0..16 {
            assert!((b.at(&[i, c]) - a.at(&[r, c])).abs() < 1e-5);
        }
    }
}

#[test]
fn every_parameter_receives_gradient() {
    let (m, store) = TextFormer::new::<f64>(small(), 4).unwrap();
    let mut g = Graph::new();
    let p = store.bind(&mut g, true);
    let out = m
        .forward_with(&mut g, &p, &image(2), &MaskPolicy::Unmasked)
        .unwrap();
    let mut loss = g.mean_all(out.mask_logits).unwrap();
    for v in [out.class_logits, out.rec_logits] {
        let sq = g.mul(v, v).unwrap();
        let s = g.mean_all(sq).unwrap();
        loss = g.add(loss, s).unwrap();
    }
    g.backward_scalar(loss).unwrap();
    for (param, grad) in store.iter().zip(store.grads(&g, &p)) {
        assert!(
            grad.data().iter().any(|&v| v != 0.0),
            "no gradient for {}",
            param.name
        );
    }
}

#[test]
fn decoder_masks() {
    let (m, store) = TextFormer::new::<f64>(small(), 5).unwrap();
    let img = image(3);
    let run = |policy: &MaskPolicy| {
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let out = m.forward_with(&mut g, &p, &img, policy).unwrap();
        assert_eq!(g.shape(out.text_embeddings), &[3, 16]);
        g.value(out.text_embeddings).clone()
    };
    let open = run(&MaskPolicy::Unmasked);
    assert_eq!(run(&MaskPolicy::Fixed(vec![true; 3 * 16 * 16])), open);
    // Empty regions fall back to full attention.
    assert_eq!(run(&MaskPolicy::Fixed(vec![false; 3 * 16 * 16])), open);
    let predicted = run(&MaskPolicy::Predicted);
    assert!(predicted.is_finite());
}

fn layout() -> TokenSequence {
    TokenSequence {
        tokens: Graph::<f64>::new().constant(Tensor::scalar(0.0)),
        level_offsets: [0, 4, 20],
        level_sizes: [(2, 2), (4, 4), (8, 8)],
    }
}

#[test]
fn cross_attention_mask_construction() {
    let mut fg = vec![false; 2 * 256];
    fg[5 * 16 + 6] = true; // query 0, pixel (5, 6)
    let blocked = build_cross_attention_mask(&fg, 2, 16, 16, &layout()).unwrap();
    let row0 = &blocked[..84];
    let open: Vec<usize> = (0..84).filter(|&i| !row0[i]).collect();
    // P5 cell (0,0), P4 cell (1,1), P3 cell (2,3).
    assert_eq!(open, vec![0, 4 + 5, 20 + 2 * 8 + 3]);
    assert!(blocked[84..].iter().all(|&b| !b));
}

#[test]
fn pixel_embedding_identity_and_gradient() {
    let (m, mut store) = TextFormer::new::<f64>(small(), 6).unwrap();
    store
        .set(
            "decoder.pixel.weight",
            Tensor::from_fn([16, 16], |i| f64::from(i / 16 == i % 16)).unwrap(),
        )
        .unwrap();
    let mut g = Graph::new();
    let p = store.bind(&mut g, true);
    let p2 = g.leaf(Tensor::from_fn([1, 16, 16, 16], |i| (i as f64 * 0.01).cos()).unwrap());
    let px = m.decoder.pixel_embed(&mut g, &p, p2).unwrap();
    assert_eq!(g.shape(px), &[16, 16, 16]);
    assert_eq!(g.value(px).data(), g.value(p2).data());
    let text = constant(&mut g, &[3, 16], |i| (i as f64).sin());
    let s = semantic_features(&mut g, text, px).unwrap();
    let logits = m.heads.segment(&mut g, &p, s).unwrap();
    let loss = g.mean_all(logits).unwrap();
    g.backward_scalar(loss).unwrap();
    assert!(g.grad(p2).unwrap().data().iter().any(|&v| v != 0.0));
}

#[test]
fn semantic_feature_examples() {
    let mut g = Graph::<f64>::new();
    let pixel = constant(&mut g, &[1, 1, 2], |i| [3.0, 5.0][i]);
    let text = constant(&mut g, &[3, 2], |i| [2.0, 0.0, 1.0, 1.0, 0.0, 0.0][i]);
    let s = semantic_features(&mut g, text, pixel).unwrap();
    assert_eq!(g.value(s).shape(), &[3, 1, 1, 2]);
    assert_eq!(g.value(s).data(), &[6.0, 0.0, 3.0, 5.0, 0.0, 0.0]);
}

#[test]
fn semantic_features_are_bilinear_and_equivariant() {
    let mut g = Graph::<f64>::new();
    let pixel = constant(&mut g, &[4, 4, 8], |i| (i as f64 * 0.7).sin());
    let text = constant(&mut g, &[3, 8], |i| (i as f64 * 0.3).cos());
    let base = semantic_features(&mut g, text, pixel).unwrap();
    let base = g.value(base).clone();
    let scaled = constant(&mut g, &[3, 8], |i| {
        (i as f64 * 0.3).cos() * if i / 8 == 1 { 2.5 } else { 1.0 }
    });
    let s = semantic_features(&mut g, scaled, pixel).unwrap();
    let s = g.value(s).clone();
    let per = 4 * 4 * 8;
    for i in 0..3 * per {
        let factor = if i / per == 1 { 2.5 } else { 1.0 };
        assert!((s.data()[i] - base.data()[i] * factor).abs() < 1e-12);
    }
    let swapped = constant(&mut g, &[3, 8], |i| {
        ((([2, 1, 0][i / 8] * 8 + i % 8) as f64) * 0.3).cos()
    });
    let s = semantic_features(&mut g, swapped, pixel).unwrap();
    let s = g.value(s).clone();
    assert_eq!(&s.data()[..per], &base.data()[2 * per..]);
}

#[test]
fn classify_and_segment_contracts() {
    let (m, mut store) = TextFormer::new::<f64>(small(), 7).unwrap();
    let mut g = Graph::new();
    let p = store.bind(&mut g, false);
    let s = constant(&mut g, &[3, 16, 16, 16], |i| {
        ((i * 7 % 13) as f64 * 0.2).sin()
    });
    let probs = m.heads.classify(&mut g, &p, s).unwrap();
    for row in g.value(probs).data().chunks(3) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(row.iter().all(|&v| v > 0.0 && v < 1.0));
    }
    let zero = constant(&mut g, &[3, 16, 16, 16], |_| 0.0);
    let probs = m.heads.classify(&mut g, &p, zero).unwrap();
    assert!(g
        .value(probs)
        .data()
        .iter()
        .all(|&v| (v - 1.0 / 3.0).abs() < 1e-12));

    let logits = m.heads.segment(&mut g, &p, s).unwrap();
    assert_eq!(g.shape(logits), &[3, 16, 16]);
    let before = g.value(logits).clone();
    let bumped = constant(&mut g, &[3, 16, 16, 16], |i| {
        ((i * 7 % 13) as f64 * 0.2).sin() + if i >= 2 * 4096 { 1.0 } else { 0.0 }
    });
    let after = m.heads.segment(&mut g, &p, bumped).unwrap();
    let after = g.value(after).clone();
    assert_eq!(&before.data()[..2 * 256], &after.data()[..2 * 256]);
    assert_ne!(&before.data()[2 * 256..], &after.data()[2 * 256..]);

    zero_params(&mut store, "seg.");
    let mut g = Graph::new();
    let p = store.bind(&mut g, false);
    let s = constant(&mut g, &[3, 16, 16, 16], |i| (i as f64).sin());
    let logits = m.heads.segment(&mut g, &p, s).unwrap();
    assert!(g.value(logits).data().iter().all(|&v| v == 0.0));
}

#[test]
fn agg_attention_contracts() {
    let (m, mut store) = TextFormer::new::<f64>(small(), 8).unwrap();
    let mut g = Graph::new();
    let p = store.bind(&mut g, false);
    let s = constant(&mut g, &[1, 4, 4, 16], |i| (i as f64 * 0.9).sin() * 3.0);
    let a = m.heads.agg_attention(&mut g, &p, s).unwrap();
    assert!(g.value(a).data().iter().all(|&v| v > 0.0 && v < 1.0));
    zero_params(&mut store, "agg.attention");
    let mut g = Graph::new();
    let p = store.bind(&mut g, false);
    let s = constant(&mut g, &[1, 4, 4, 16], |i| i as f64);
    let a = m.heads.agg_attention(&mut g, &p, s).unwrap();
    assert!(g.value(a).data().iter().all(|&v| v == 0.5));
}

#[test]
fn agg_directional_examples() {
    let mut g = Graph::<f64>::new();
    // One query, 2×1 map, one channel: column [1, 3] weighted [0.25, 0.75].
    let s = constant(&mut g, &[1, 2, 1, 1], |i| [1.0, 3.0][i]);
    let mm = constant(&mut g, &[1, 2, 1, 1], |i| [0.25, 0.75][i]);
    let (fh, fv) = agg_directional(&mut g, s, mm).unwrap();
    assert!((g.value(fh).data()[0] - 2.5 / (1.0 + 1e-6)).abs() < 1e-12);
    assert_eq!(g.shape(fh), &[1, 1, 1]);
    assert_eq!(g.shape(fv), &[1, 2, 1]);

    // One-hot attention at (y 1, x 2, channel 1) selects that feature.
    let s = constant(&mut g, &[1, 3, 4, 2], |i| i as f64 + 1.0);
    let mm = constant(&mut g, &[1, 3, 4, 2], |i| {
        if i == (4 + 2) * 2 + 1 {
            1.0
        } else {
            0.0
        }
    });
    let (fh, _) = agg_directional(&mut g, s, mm).unwrap();
    let want = ((4 + 2) * 2 + 1) as f64 + 1.0;
    assert!((g.value(fh).at(&[0, 2, 1]) - want / (1.0 + 1e-6)).abs() < 1e-12);
}

#[test]
fn assemble_sequence_examples() {
    let mut g = Graph::<f64>::new();
    let fh = constant(&mut g, &[1, 3, 2], |i| i as f64);
    let fv = constant(&mut g, &[1, 2, 2], |i| 10.0 + i as f64);
    let zh = constant(&mut g, &[3, 2], |_| 0.0);
    let zv = constant(&mut g, &[2, 2], |_| 0.0);
    let zd = constant(&mut g, &[2, 2], |_| 0.0);
    let seq = assemble_sequence_with(&mut g, fh, fv, zh, zv, zd).unwrap();
    assert_eq!(
        g.value(seq).data(),
        &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 10.0, 11.0, 12.0, 13.0]
    );

    let d = constant(&mut g, &[2, 2], |i| [0.5, -1.0, 2.0, 4.0][i]);
    let swapped = constant(&mut g, &[2, 2], |i| [2.0, 4.0, 0.5, -1.0][i]);
    let a = assemble_sequence_with(&mut g, fh, fv, zh, zv, d).unwrap();
    let b = assemble_sequence_with(&mut g, fh, fv, zh, zv, swapped).unwrap();
    let (a, b) = (g.value(a).clone(), g.value(b).clone());
    for pos in 0..3 {
        for c in 0..2 {
            let delta = [1.5, 5.0][c];
            assert!((b.at(&[0, pos, c]) - a.at(&[0, pos, c]) - delta).abs() < 1e-12);
        }
    }
}

#[test]
fn recognizer_shape_and_query_permutation() {
    let (m, mut store) = TextFormer::new::<f64>(small(), 9).unwrap();
    let mut g = Graph::new();
    let p = store.bind(&mut g, false);
    let seq = constant(&mut g, &[2, 12, 16], |i| (i as f64 * 0.17).sin());
    let out = m.heads.recognize(&mut g, &p, seq).unwrap();
    assert_eq!(g.shape(out), &[2, 4, 12]);
    let base = g.value(out).clone();

    let q = store.get(m.heads.char_queries).tensor.clone();
    let perm = [2, 0, 3, 1];
    let mut data = Vec::new();
    for &r in &perm {
        data.extend_from_slice(&q.data()[r * 16..(r + 1) * 16]);
    }
    store
        .set(
            "recognizer.char_queries",
            Tensor::new([4, 16], data).unwrap(),
        )
        .unwrap();
    let mut g = Graph::new();
    let p = store.bind(&mut g, false);
    let seq = constant(&mut g, &[2, 12, 16], |i| (i as f64 * 0.17).sin());
    let out = m.heads.recognize(&mut g, &p, seq).unwrap();
    let permuted = g.value(out).clone();
    for b in 0..2 {
        for (k, &r) in perm.iter().enumerate() {
            for c in 0..12 {
                assert!((permuted.at(&[b, k, c]) - base.at(&[b, r, c])).abs() < 1e-10);
            }
        }
    }
}

#[test]
fn recognition_gradient_reaches_semantic_features() {
    let (m, store) = TextFormer::new::<f64>(small(), 10).unwrap();
    let mut g = Graph::new();
    let p = store.bind(&mut g, false);
    let s = g.leaf(Tensor::from_fn([2, 16, 16, 16], |i| (i as f64 * 0.05).sin()).unwrap());
    let logits = m.heads.read(&mut g, &p, s).unwrap();
    let lsm = g.log_softmax(logits, 2).unwrap();
    let loss = g.mean_all(lsm).unwrap();
    g.backward_scalar(loss).unwrap();
    assert!(g.grad(s).unwrap().data().iter().any(|&v| v.abs() > 0.0));
}

fn probs(rows: &[[f64; 3]]) -> Tensor<f64> {
    Tensor::new([rows.len(), 3], rows.iter().flatten().copied().collect()).unwrap()
}

/// Logits spelling `text` then `[PAD]`s.
fn spelling(charset: &Charset, texts: &[&str], k: usize) -> Tensor<f64> {
    let c = charset.num_classes();
    let mut data = vec![0.0; texts.len() * k * c];
    for (q, t) in texts.iter().enumerate() {
        for (pos, idx) in charset.encode_padded(t, k).unwrap().into_iter().enumerate() {
            data[(q * k + pos) * c + idx] = 10.0;
        }
    }
    Tensor::new([texts.len(), k, c], data).unwrap()
}

#[test]
fn assemble_instances_examples() {
    let cs = Charset::desk();
    // One confident query with a clean blob spelling "AB".
    let mask = Tensor::from_fn([1, 4, 4], |i| if i == 5 || i == 6 { 8.0 } else { -8.0 }).unwrap();
    let out = assemble_instances(
        &probs(&[[0.9, 0.05, 0.05]]),
        &mask,
        &spelling(&cs, &["AB"], 4),
        &cs,
        0.5,
        4,
    )
    .unwrap();
    assert_eq!(out.len(), 1);
    assert_eq!(out[0].transcription, "AB");
    assert_eq!(out[0].mask.area(), 32);
    assert_eq!(out[0].score, 0.9);

    // Two queries claiming the same pixel: the more confident mask wins.
    let mask = Tensor::from_fn([2, 1, 1], |i| {
        [0.8f64, 0.6][i].ln() - (1.0 - [0.8f64, 0.6][i]).ln()
    })
    .unwrap();
    let p = probs(&[[0.9, 0.05, 0.05], [0.9, 0.05, 0.05]]);
    let out = assemble_instances(&p, &mask, &spelling(&cs, &["A", "B"], 4), &cs, 0.5, 1).unwrap();
    assert_eq!(out.len(), 1);
    assert_eq!(out[0].transcription, "A");

    // Nothing above threshold.
    let p = probs(&[[0.2, 0.4, 0.4], [0.1, 0.1, 0.8]]);
    assert!(
        assemble_instances(&p, &mask, &spelling(&cs, &["A", "B"], 4), &cs, 0.5, 1)
            .unwrap()
            .is_empty()
    );
}

#[test]
fn untrained_inference_is_disjoint_and_deterministic() {
    let (m, store) = TextFormer::new::<f32>(
        ModelConfig {
            score_thresh: 0.0,
            ..ModelConfig::default()
        },
        11,
    )
    .unwrap();
    for seed in 0..3 {
        let img = image(seed);
        let a = m.infer(&store, &img).unwrap();
        let b = m.infer(&store, &img).unwrap();
        assert_eq!(a, b);
        for (i, x) in a.iter().enumerate() {
            assert_eq!((x.mask.height(), x.mask.width()), (64, 64));
            for y in &a[i + 1..] {
                assert!(x.mask.is_disjoint(&y.mask));
            }
        }
    }
}
