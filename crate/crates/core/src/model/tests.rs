use super::*;
use crate::data::{DomainId, DomainSpec, Intent};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn manifest() -> DatasetManifest {
    DatasetManifest::new(vec![
        DomainSpec { name: "video".into(), vocab_size: 12, categorical_cardinalities: vec![3] },
        DomainSpec { name: "lens".into(), vocab_size: 9, categorical_cardinalities: vec![4] },
    ])
    .unwrap()
}

fn small(variant: Variant) -> ModelConfig {
    ModelConfig {
        variant,
        latent_dim: 8,
        layers: 2,
        heads: 2,
        id_embedding_dim: 4,
        categorical_dim: 2,
        domain_dim: 2,
        feature_hidden: 8,
        positional_capacity: 10,
        target_hidden: 8,
        score_hidden: 4,
        init_seed: 3,
        ..Default::default()
    }
}

fn ev(domain: u16, item: u32, ts: i64) -> Event {
    Event {
        domain: DomainId(domain),
        item_id: item,
        timestamp: ts,
        intent: Intent::High,
        categorical: vec![item % 3],
        property: 0.25 * item as f64,
    }
}

fn random_context(rng: &mut ChaCha8Rng, len: usize) -> Vec<Event> {
    (0..len)
        .map(|t| {
            let d = rng.random_range(0..2u16);
            ev(d, rng.random_range(0..9), t as i64)
        })
        .collect()
}

fn tokens_of(ctx: &[Event], pad: usize) -> Vec<Token> {
    let mut r: Vec<Token> = ctx.iter().cloned().map(Token::Event).collect();
    r.extend(std::iter::repeat_n(Token::Pad, pad));
    r
}

fn token_outputs(model: &Model, rows: &[Vec<Token>]) -> Tensor {
    let mut tape = Tape::new();
    let out = model.encode_tokens(&mut tape, &model.store, rows).unwrap();
    tape.value(out).clone()
}

#[test]
fn feature_width_and_output_shape() {
    let m = manifest();
    let cfg = ModelConfig { id_embedding_dim: 16, categorical_dim: 8, domain_dim: 8, latent_dim: 32, ..Default::default() };
    // two id slots, two categorical slots, domain embedding, property column
    assert_eq!(cfg.feature_width(&m), 16 + 16 + 8 + 8 + 8 + 1);
    let model = Model::new(cfg, m).unwrap();
    let e = ev(0, 5, 0);
    let mut tape = Tape::new();
    let h = model.featurize(&mut tape, &model.store, &[Some(&e)], Some(&[0]), false).unwrap();
    assert_eq!(tape.shape(h), &[1, 32]);
}

#[test]
fn domain_changes_the_latent() {
    let model = Model::new(small(Variant::Base), manifest()).unwrap();
    let a = ev(0, 2, 0);
    let b = Event { domain: DomainId(1), ..a.clone() };
    let mut tape = Tape::new();
    let h = model.featurize(&mut tape, &model.store, &[Some(&a), Some(&b)], Some(&[0, 0]), false).unwrap();
    assert_ne!(tape.value(h).row(0), tape.value(h).row(1));
}

#[test]
fn pad_token_has_a_fixed_latent() {
    let model = Model::new(small(Variant::Base), manifest()).unwrap();
    let e = ev(1, 3, 0);
    let mut tape = Tape::new();
    let h = model.featurize(&mut tape, &model.store, &[None, Some(&e), None], None, false).unwrap();
    assert_eq!(tape.value(h).row(0), tape.value(h).row(2));
    assert_ne!(tape.value(h).row(0), tape.value(h).row(1));
}

#[test]
fn out_of_vocabulary_is_an_error() {
    let model = Model::new(small(Variant::Base), manifest()).unwrap();
    let e = ev(1, 9, 0);
    let mut tape = Tape::new();
    let err = model.featurize(&mut tape, &model.store, &[Some(&e)], None, false).unwrap_err();
    assert!(matches!(err, UumError::Data(_)), "{err}");
}

#[test]
fn position_beyond_capacity_is_an_error() {
    let model = Model::new(small(Variant::Base), manifest()).unwrap();
    let ctx: Vec<Event> = (0..11).map(|t| ev(0, 1, t)).collect();
    assert!(matches!(model.user_embedding(&ctx), Err(UumError::Config(_))));
}

#[test]
fn every_variant_preserves_shape_and_ignores_padding() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for variant in Variant::ALL {
        let model = Model::new(small(variant), manifest()).unwrap();
        let ctx = random_context(&mut rng, 5);
        let plain = token_outputs(&model, &[tokens_of(&ctx, 0)]);
        assert_eq!(plain.shape(), &[5, 8]);
        let padded = token_outputs(&model, &[tokens_of(&ctx, 3)]);
        assert_eq!(plain.data(), &padded.data()[..40], "{variant:?}");

        let h = model.user_embedding(&ctx).unwrap();
        let rows = vec![tokens_of(&ctx, 4)];
        let mut tape = Tape::new();
        let hp = model.user_tokens(&mut tape, &model.store, &rows).unwrap();
        for (a, b) in h.iter().zip(tape.value(hp).data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}

#[test]
fn batch_rows_match_single_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for variant in Variant::ALL {
        let model = Model::new(small(variant), manifest()).unwrap();
        let contexts: Vec<Vec<Event>> = (1..5).map(|n| random_context(&mut rng, n)).collect();
        let refs: Vec<&[Event]> = contexts.iter().map(Vec::as_slice).collect();
        let batched = model.user_embeddings(&refs).unwrap();
        for (i, c) in contexts.iter().enumerate() {
            assert_eq!(batched.row(i), model.user_embedding(c).unwrap().as_slice(), "{variant:?} row {i}");
        }
    }
}

#[test]
fn single_event_context() {
    for variant in Variant::ALL {
        let model = Model::new(small(variant), manifest()).unwrap();
        let ctx = [ev(0, 4, 0)];
        let a = model.user_embedding(&ctx).unwrap();
        let b = model.user_embedding(&ctx).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|v| v.is_finite()));
    }
}

#[test]
fn empty_context_is_an_error() {
    let model = Model::new(small(Variant::Base), manifest()).unwrap();
    let rows = vec![vec![Token::Pad, Token::Pad]];
    let mut tape = Tape::new();
    assert!(model.encode_tokens(&mut tape, &model.store, &rows).is_err());
}

#[test]
fn single_domain_context_through_every_variant() {
    for variant in Variant::ALL {
        let model = Model::new(small(variant), manifest()).unwrap();
        let ctx: Vec<Event> = (0..4).map(|t| ev(1, t as u32, t)).collect();
        assert!(model.user_embedding(&ctx).unwrap().iter().all(|v| v.is_finite()));
    }
}

fn perturb_domain(ctx: &[Event], domain: u16, rng: &mut ChaCha8Rng) -> Vec<Event> {
    ctx.iter()
        .map(|e| {
            if e.domain.0 == domain {
                let item = rng.random_range(0..9);
                Event { item_id: item, categorical: vec![rng.random_range(0..3)], property: rng.random_range(-3.0..3.0), ..e.clone() }
            } else {
                e.clone()
            }
        })
        .collect()
}

fn domain_rows(out: &Tensor, ctx: &[Event], domain: u16) -> Vec<f64> {
    ctx.iter()
        .enumerate()
        .filter(|(_, e)| e.domain.0 == domain)
        .flat_map(|(j, _)| out.row(j).to_vec())
        .collect()
}

#[test]
fn ib_isolation_without_exchange() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let model = Model::new(ModelConfig { ib_exchange: false, ..small(Variant::IbToken) }, manifest()).unwrap();
    let ctx: Vec<Event> = (0..6).map(|t| ev((t % 2) as u16, t as u32, t)).collect();
    let base = token_outputs(&model, &[tokens_of(&ctx, 0)]);
    for _ in 0..10 {
        let other = perturb_domain(&ctx, 1, &mut rng);
        let out = token_outputs(&model, &[tokens_of(&other, 0)]);
        assert_eq!(domain_rows(&base, &ctx, 0), domain_rows(&out, &ctx, 0));
    }
}

#[test]
fn ib_exchange_is_the_only_cross_domain_path() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let ctx: Vec<Event> = (0..6).map(|t| ev((t % 2) as u16, t as u32, t)).collect();
    let other = perturb_domain(&ctx, 1, &mut rng);

    let open = Model::new(small(Variant::IbToken), manifest()).unwrap();
    let a = token_outputs(&open, &[tokens_of(&ctx, 0)]);
    let b = token_outputs(&open, &[tokens_of(&other, 0)]);
    assert_ne!(domain_rows(&a, &ctx, 0), domain_rows(&b, &ctx, 0));

    let blocked = Model::new(ModelConfig { ib_block_readout: true, ..small(Variant::IbToken) }, manifest()).unwrap();
    let a = token_outputs(&blocked, &[tokens_of(&ctx, 0)]);
    let b = token_outputs(&blocked, &[tokens_of(&other, 0)]);
    assert_eq!(domain_rows(&a, &ctx, 0), domain_rows(&b, &ctx, 0));
}

#[test]
fn private_stage_isolates_domains() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let cfg = ModelConfig { layers: 2, private_layers: 1, shared_layers: 1, ..small(Variant::DomainSpecificEncoder) };
    let model = Model::new(cfg, manifest()).unwrap();
    let ctx: Vec<Event> = (0..6).map(|t| ev((t % 2) as u16, t as u32, t)).collect();
    let other = perturb_domain(&ctx, 1, &mut rng);
    let private_only = |c: &[Event]| {
        let rows = vec![tokens_of(c, 0)];
        let grid = encoder::TokenGrid::new(&rows).unwrap();
        let mut tape = Tape::new();
        let positions: Vec<usize> = (0..c.len()).collect();
        let h = model.featurize(&mut tape, &model.store, &grid.flat, Some(&positions), false).unwrap();
        let out = encoder::private_outputs(&model, &mut tape, &model.store, &grid, h).unwrap();
        tape.value(out).clone()
    };
    let a = private_only(&ctx);
    let b = private_only(&other);
    assert_eq!(domain_rows(&a, &ctx, 0), domain_rows(&b, &ctx, 0));
    assert_ne!(domain_rows(&a, &ctx, 1), domain_rows(&b, &ctx, 1));
    let full_a = token_outputs(&model, &[tokens_of(&ctx, 0)]);
    let full_b = token_outputs(&model, &[tokens_of(&other, 0)]);
    assert_ne!(domain_rows(&full_a, &ctx, 0), domain_rows(&full_b, &ctx, 0));
}

#[test]
fn pooling_is_a_convex_combination() {
    let model = Model::new(small(Variant::Base), manifest()).unwrap();
    let v: Vec<f64> = (0..8).map(|i| i as f64 - 3.5).collect();
    let mut tape = Tape::new();
    let tokens = tape.leaf(Tensor::matrix(4, 8, v.iter().cycle().take(32).copied().collect()).unwrap());
    let h = model.pool(&mut tape, &model.store, tokens, &[vec![true, true, true, false]]).unwrap();
    for (a, b) in tape.value(h).data().iter().zip(&v) {
        assert!((a - b).abs() < 1e-12);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let data: Vec<f64> = (0..24).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut tape = Tape::new();
    let tokens = tape.leaf(Tensor::matrix(3, 8, data.clone()).unwrap());
    let h = model.pool(&mut tape, &model.store, tokens, &[vec![true, false, false]]).unwrap();
    assert_eq!(tape.value(h).data(), &data[..8]);
}

#[test]
fn pooling_weights_form_a_distribution() {
    let model = Model::new(small(Variant::Base), manifest()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let data: Vec<f64> = (0..40).map(|_| rng.random_range(-2.0..2.0)).collect();
    let real = vec![true, true, false, true, false];
    let mut tape = Tape::new();
    let tokens = tape.leaf(Tensor::matrix(5, 8, data).unwrap());
    let w = tape.param(&model.store, model.params.pool_w);
    let s = tape.matmul(tokens, w);
    let s = tape.reshape(s, &[1, 5]);
    let mask = Rc::new(AttentionMask::from_fn(1, 5, |_, j| real[j]));
    let p = tape.softmax_rows(s, Some(&mask)).unwrap();
    let p = tape.value(p).data();
    assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert!(p.iter().all(|&x| x >= 0.0));
    assert_eq!(p[2], 0.0);
    assert_eq!(p[4], 0.0);
}

#[test]
fn cross_layer_closed_forms() {
    let mut tape = Tape::new();
    let c0 = tape.leaf(Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap());
    // W c0 + b = [1, 1]
    let w = tape.leaf(Tensor::matrix(2, 2, vec![0.0, 0.0, 0.5, 0.5]).unwrap());
    let b = tape.leaf(Tensor::vector(vec![0.0, 0.0]));
    let c1 = cross_layer(&mut tape, c0, c0, w, b);
    assert_eq!(tape.value(c1).data(), &[2.0, 4.0]);

    let zw = tape.leaf(Tensor::zeros(&[2, 2]));
    let zb = tape.leaf(Tensor::zeros(&[2]));
    let c = cross_layer(&mut tape, c0, c0, zw, zb);
    let c = cross_layer(&mut tape, c0, c, zw, zb);
    assert_eq!(tape.value(c).data(), &[1.0, 2.0]);
}

#[test]
fn target_ignores_property_and_has_width_f() {
    let model = Model::new(small(Variant::Base), manifest()).unwrap();
    let a = ev(0, 3, 0);
    let b = Event { property: 99.0, timestamp: 50, ..a.clone() };
    let t = model.target_representations(&[a, b]).unwrap();
    assert_eq!(t.shape(), &[2, 8]);
    assert_eq!(t.row(0), t.row(1));
}

#[test]
fn merge_and_score_closed_forms() {
    let cfg = ModelConfig { latent_dim: 2, heads: 1, ..small(Variant::Base) };
    let mut model = Model::new(cfg, manifest()).unwrap();
    let out = model.merge_and_score(&[1.0, 2.0], &[3.0, 4.0]).unwrap();
    assert_eq!(out.merged, vec![4.0, 6.0]);
    assert_eq!(out.domain_logits.len(), 2);

    let p = model.params.clone();
    for id in [p.score_w1, p.score_w2, p.domain_w, p.domain_b, p.property_w, p.property_b] {
        let shape = model.store.get(id).shape().to_vec();
        model.store.set(id, Tensor::zeros(&shape)).unwrap();
    }
    let out = model.merge_and_score(&[1.0, 2.0], &[3.0, 4.0]).unwrap();
    assert_eq!(out.score, 0.0);
    assert_eq!(out.domain_logits, vec![0.0, 0.0]);
    assert_eq!(out.property, 0.0);
}

#[test]
fn candidate_scores_follow_candidate_order() {
    let model = Model::new(small(Variant::Base), manifest()).unwrap();
    let events: Vec<Event> = (0..5).map(|i| ev((i % 2) as u16, i as u32, 0)).collect();
    let t = model.target_representations(&events).unwrap();
    let h = model.user_embedding(&events[..3]).unwrap();
    let scores = model.score_candidates(&h, &t).unwrap();
    let order = [3usize, 0, 4, 1, 2];
    let shuffled: Vec<f64> = order.iter().flat_map(|&i| t.row(i).to_vec()).collect();
    let shuffled = Tensor::matrix(5, 8, shuffled).unwrap();
    let s2 = model.score_candidates(&h, &shuffled).unwrap();
    for (k, &i) in order.iter().enumerate() {
        assert_eq!(s2[k], scores[i]);
    }
    for (i, s) in scores.iter().enumerate() {
        let m = model.merge_and_score(&h, t.row(i)).unwrap();
        assert!((m.score - s).abs() < 1e-12);
    }
}

#[test]
fn checkpoint_roundtrip_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    for variant in Variant::ALL {
        let model = Model::new(small(variant), manifest()).unwrap();
        let path = dir.path().join(format!("{}.ckpt", variant.as_str()));
        save_checkpoint(&model, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.store, model.store);
        assert_eq!(loaded.config, model.config);
        assert_eq!(encode_checkpoint(&loaded), std::fs::read(&path).unwrap());
        let again = load_checkpoint_as(&path, &model.config, &model.manifest).unwrap();
        assert_eq!(again.store, model.store);
    }
}

#[test]
fn checkpoint_errors() {
    let dir = tempfile::tempdir().unwrap();
    let model = Model::new(small(Variant::Base), manifest()).unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&model, &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();

    let mut corrupt = bytes.clone();
    corrupt[0] = b'X';
    std::fs::write(&path, &corrupt).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(UumError::CheckpointVersion { .. })));

    let mut future = bytes.clone();
    future[8..12].copy_from_slice(&2u32.to_le_bytes());
    std::fs::write(&path, &future).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(UumError::CheckpointVersion { .. })));

    std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(UumError::Checkpoint(_))));

    std::fs::write(&path, &bytes).unwrap();
    let wider = ModelConfig { latent_dim: 12, ..model.config.clone() };
    match load_checkpoint_as(&path, &wider, &model.manifest) {
        Err(UumError::CheckpointShape { name, .. }) => assert!(!name.is_empty()),
        other => panic!("expected a shape error, got {other:?}"),
    }
    let causal = ModelConfig { causal: true, ..model.config.clone() };
    assert!(matches!(load_checkpoint_as(&path, &causal, &model.manifest), Err(UumError::Config(_))));
}

#[test]
fn checkpoint_id_is_content_hash() {
    let dir = tempfile::tempdir().unwrap();
    let model = Model::new(small(Variant::Base), manifest()).unwrap();
    let a = dir.path().join("a.ckpt");
    let b = dir.path().join("b.ckpt");
    save_checkpoint(&model, &a).unwrap();
    save_checkpoint(&model, &b).unwrap();
    let id = checkpoint_id(&a).unwrap();
    assert_eq!(id.len(), 64);
    assert_eq!(id, checkpoint_id(&b).unwrap());
}

#[test]
fn variant_names_round_trip() {
    for v in Variant::ALL {
        assert_eq!(v.as_str().parse::<Variant>().unwrap(), v);
    }
    assert!("transformer".parse::<Variant>().is_err());
}
