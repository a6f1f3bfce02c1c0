use owdf::dataset::NormStats;
use owdf::diff::{finite_diff_check, uniform, Array, Graph, ParamStore};
use owdf::sim::{simulate_trace, PacketRecord, SimConfig};
use owdf::tokenizer::{window_features, PacketFeatures, Tokenizer, TokenizerConfig};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn cfg(s: usize) -> TokenizerConfig {
    TokenizerConfig {
        token_dim: s,
        dropout: 0.0,
        ..TokenizerConfig::default()
    }
}

fn tokenizer(s: usize, seed: u64) -> (ParamStore, Tokenizer) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tok = Tokenizer::new(&mut store, cfg(s), &mut rng).unwrap();
    // biases start at zero; randomise them so no coordinate is special
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        if store.name(id).ends_with(".b") {
            let (r, c) = store.value(id).shape();
            *store.value_mut(id) = uniform(&mut rng, r, c, 0.2);
        }
    }
    (store, tok)
}

fn records(n: usize) -> Vec<PacketRecord> {
    simulate_trace(&SimConfig::reduced(n)).unwrap()
}

fn norm() -> NormStats {
    let mut n = NormStats::identity();
    n.delay.mean = 10.0;
    n.delay.std = 3.0;
    n.size.mean = 200.0;
    n.size.std = 50.0;
    n.inter_arrival.mean = 50.0;
    n.inter_arrival.std = 10.0;
    n
}

fn embed(store: &ParamStore, tok: &Tokenizer, f: &[PacketFeatures]) -> Array {
    let mut g = Graph::inference(store);
    let u = tok.embed(&mut g, f).unwrap();
    g.value(u).clone()
}

#[test]
fn zero_parameters_give_zero_tokens() {
    let (mut store, tok) = tokenizer(8, 0);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        store.value_mut(id).fill(0.0);
    }
    let f = window_features(&records(5), &norm(), tok.config()).unwrap();
    assert!(embed(&store, &tok, &f).data().iter().all(|&v| v == 0.0));
}

#[test]
fn window_shape_is_h_by_s() {
    let (store, tok) = tokenizer(16, 1);
    let recs = records(10);
    let mut g = Graph::inference(&store);
    let u = tok.embed_window(&mut g, &recs, &norm(), 10).unwrap();
    assert_eq!(g.value(u).shape(), (10, 16));
    assert!(tok.embed_window(&mut g, &recs, &norm(), 9).is_err());
}

#[test]
fn single_record_window_matches_packet_embedding() {
    let (store, tok) = tokenizer(8, 2);
    let recs = records(1);
    let mut g = Graph::inference(&store);
    let u = tok.embed_window(&mut g, &recs, &norm(), 1).unwrap();
    let pending = PacketFeatures::pending(&recs[0], &norm(), tok.config()).unwrap();
    let p = tok.embed_packet(&mut g, &pending).unwrap();
    assert_eq!(g.value(u), g.value(p));
}

#[test]
fn missing_mcs_equals_padding_row() {
    let (store, tok) = tokenizer(8, 3);
    let mut rec = records(1).remove(0);
    rec.mcs = None;
    let from_record = PacketFeatures::observed(&rec, &norm(), tok.config()).unwrap();
    assert_eq!(from_record.mcs_id, 0);
    let mut by_hand = from_record.clone();
    by_hand.mcs_id = 0;
    assert_eq!(embed(&store, &tok, &[from_record]), embed(&store, &tok, &[by_hand]));
}

#[test]
fn out_of_range_slot_is_named() {
    let (_, tok) = tokenizer(8, 4);
    let mut rec = records(1).remove(0);
    rec.slot = Some(10);
    let err = PacketFeatures::observed(&rec, &norm(), tok.config()).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("slot") && msg.contains("10"), "{msg}");
}

/// A continuous feature `x` enters as `x·w + b`, so its input derivative is
/// `Σ_j ∂f/∂b_j · w_j`: reverse-mode bias gradients give the analytic value to
/// compare against central differences in `x`.
#[test]
fn continuous_input_jacobian() {
    let (store, tok) = tokenizer(6, 5);
    let rec = records(1).remove(0);
    let base = PacketFeatures::observed(&rec, &norm(), tok.config()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let weights = uniform(&mut rng, 1, 6, 1.0);
    let f = |feats: &PacketFeatures, g: &mut Graph| {
        let u = tok.embed_packet(g, feats).unwrap();
        let w = g.constant(weights.clone());
        let p = g.mul(u, w).unwrap();
        g.sum(p)
    };
    type Field = fn(&mut PacketFeatures) -> &mut f64;
    let fields: [(&str, Field); 3] = [
        ("tok.delay", |p| p.delay_std.as_mut().unwrap()),
        ("tok.size", |p| &mut p.size_std),
        ("tok.inter_arrival", |p| &mut p.inter_arrival_std),
    ];
    for (name, field) in fields {
        let mut g = Graph::inference(&store);
        let loss = f(&base, &mut g);
        let grads = g.backward(loss).unwrap();
        let gb = grads.get(&store, store.id(&format!("{name}.b")).unwrap());
        let w = store.value(store.id(&format!("{name}.w")).unwrap());
        let analytic: f64 = (0..6).map(|j| gb.get(0, j) * w.get(0, j)).sum();
        let eps = 1e-5;
        let value_at = |delta: f64| {
            let mut feats = base.clone();
            *field(&mut feats) += delta;
            let mut g = Graph::inference(&store);
            let l = f(&feats, &mut g);
            g.value(l).item()
        };
        let numeric = (value_at(eps) - value_at(-eps)) / (2.0 * eps);
        let err = (analytic - numeric).abs() / numeric.abs().max(1e-6);
        assert!(err < 1e-4, "{name}: analytic {analytic}, numeric {numeric}");
    }
}

#[test]
fn parameter_gradients_pass_fd() {
    let (store, tok) = tokenizer(4, 6);
    let recs = records(4);
    let feats = window_features(&recs, &norm(), tok.config()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let weights = uniform(&mut rng, 4, 4, 1.0);
    let report = finite_diff_check(
        &store,
        |g| {
            let u = tok.embed(g, &feats)?;
            let t = g.tanh(u);
            let w = g.constant(weights.clone());
            let p = g.mul(t, w)?;
            Ok(g.sum(p))
        },
        1e-4,
        usize::MAX,
        0,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn permuting_records_permutes_rows(seed in 0u64..500, h in 2usize..8) {
        let (store, tok) = tokenizer(8, seed);
        let recs = records(h);
        let feats: Vec<PacketFeatures> = recs
            .iter()
            .map(|r| PacketFeatures::observed(r, &norm(), tok.config()).unwrap())
            .collect();
        let reversed: Vec<PacketFeatures> = feats.iter().rev().cloned().collect();
        let a = embed(&store, &tok, &feats);
        let b = embed(&store, &tok, &reversed);
        for i in 0..h {
            prop_assert_eq!(a.row(i), b.row(h - 1 - i));
        }
    }

    #[test]
    fn inference_is_repeatable(seed in 0u64..500, h in 1usize..12) {
        let (store, tok) = tokenizer(8, seed);
        let f = window_features(&records(h), &norm(), tok.config()).unwrap();
        prop_assert_eq!(embed(&store, &tok, &f), embed(&store, &tok, &f));
    }
}
