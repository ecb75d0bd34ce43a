use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::decoder::argmax;
use super::*;
use crate::error::Error;
use crate::params::{ParamGroup, ParameterStore};
use crate::tensor::{Graph, Tensor};

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(7)
}

#[test]
fn patchify_orders_grid_then_pixels() {
    let img = Tensor::new(vec![4, 4, 1], (0..16).map(f64::from).collect()).unwrap();
    let p = patchify(&img, 2).unwrap();
    assert_eq!(p.dims(), &[4, 4]);
    assert_eq!(p.row(0), &[0.0, 1.0, 4.0, 5.0]);
    assert_eq!(p.row(1), &[2.0, 3.0, 6.0, 7.0]);
    assert_eq!(p.row(3), &[10.0, 11.0, 14.0, 15.0]);
    assert!(patchify(&img, 3).is_err());
}

#[test]
fn patch_embed_token_count_and_zero_image() {
    let mut store = ParameterStore::new();
    let enc = VisualEncoder::new(&mut store, 8, 4, 1, 6, 1, 2, 2, &mut rng()).unwrap();
    assert_eq!(enc.tokens(), 4);
    let mut g = Graph::with_store(&store);
    let x = enc.patch_embed(&mut g, &Tensor::zeros(&[8, 8, 1])).unwrap();
    assert_eq!(g.dims(x), &[4, 6]);
    assert_eq!(g.value(x).data(), store.value(enc.pos).data());
    let f = enc.encode(&mut g, &Tensor::zeros(&[8, 8, 1])).unwrap();
    assert_eq!(g.dims(f), &[4, 6]);
    assert!(enc.patch_embed(&mut g, &Tensor::zeros(&[8, 8, 3])).is_err());
}

#[test]
fn patch_embed_matches_hand_projection() {
    let mut store = ParameterStore::new();
    let enc = VisualEncoder::new(&mut store, 2, 2, 1, 2, 0, 1, 1, &mut rng()).unwrap();
    store
        .set_value(
            enc.embed.weight,
            Tensor::matrix(2, 4, vec![1.0, 0.0, 0.0, 0.0, 0.5, 0.5, 0.5, 0.5]).unwrap(),
        )
        .unwrap();
    store
        .set_value(enc.pos, Tensor::matrix(1, 2, vec![0.1, -0.1]).unwrap())
        .unwrap();
    let img = Tensor::new(vec![2, 2, 1], vec![0.2, 0.4, 0.6, 0.8]).unwrap();
    let mut g = Graph::with_store(&store);
    let x = enc.patch_embed(&mut g, &img).unwrap();
    let got = g.value(x);
    assert!((got.at(0, 0) - 0.3).abs() < 1e-15);
    assert!((got.at(0, 1) - 0.9).abs() < 1e-15);
}

fn identity_attention(
    store: &mut ParameterStore,
    width: usize,
    mode: AttentionMode,
) -> AttentionBlock {
    let a = AttentionBlock::new(
        store,
        "att",
        width,
        width,
        width,
        1,
        mode,
        ParamGroup::EncoderBase,
        &mut rng(),
    )
    .unwrap();
    for m in [&a.q, &a.k, &a.v, &a.o] {
        store.set_value(m.weight, Tensor::identity(width)).unwrap();
    }
    a
}

#[test]
fn cross_attention_hand_oracle() {
    let mut store = ParameterStore::new();
    let att = identity_attention(&mut store, 2, AttentionMode::Cross);
    let q = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 2.0]).unwrap();
    let kv = Tensor::matrix(3, 2, vec![1.0, 1.0, -1.0, 0.5, 0.0, -2.0]).unwrap();
    let mut g = Graph::with_store(&store);
    let qv = g.constant(q.clone());
    let kvv = g.constant(kv.clone());
    let (out, w) = att.forward_with_weights(&mut g, qv, kvv).unwrap();
    let s = 1.0 / 2f64.sqrt();
    for i in 0..2 {
        let scores: Vec<f64> = (0..3)
            .map(|j| (q.at(i, 0) * kv.at(j, 0) + q.at(i, 1) * kv.at(j, 1)) * s)
            .collect();
        let z: f64 = scores.iter().map(|x| x.exp()).sum();
        let p: Vec<f64> = scores.iter().map(|x| x.exp() / z).collect();
        for c in 0..2 {
            let want: f64 = (0..3).map(|j| p[j] * kv.at(j, c)).sum();
            assert!((g.value(out).at(i, c) - want).abs() < 1e-12);
        }
        let row_sum: f64 = g.value(w[0]).row(i).iter().sum();
        assert!((row_sum - 1.0).abs() < 1e-12);
    }
}

#[test]
fn single_key_attention_returns_projected_value() {
    let mut store = ParameterStore::new();
    let att = AttentionBlock::new(
        &mut store,
        "att",
        4,
        3,
        4,
        2,
        AttentionMode::Cross,
        ParamGroup::EncoderBase,
        &mut rng(),
    )
    .unwrap();
    let mut r = rng();
    let q = normal_tensor(&mut r, &[5, 4], 1.0);
    let kv = normal_tensor(&mut r, &[1, 3], 1.0);
    let mut g = Graph::with_store(&store);
    let qv = g.constant(q);
    let kvv = g.constant(kv.clone());
    let out = att.forward(&mut g, qv, kvv).unwrap();
    let v = att.v.apply(&store, &kv).unwrap();
    let want = att.o.apply(&store, &v).unwrap();
    for i in 0..5 {
        for c in 0..4 {
            assert!((g.value(out).at(i, c) - want.at(0, c)).abs() < 1e-12);
        }
    }
}

#[test]
fn cross_attention_is_invariant_to_key_order() {
    let mut store = ParameterStore::new();
    let att = AttentionBlock::new(
        &mut store,
        "att",
        4,
        4,
        4,
        2,
        AttentionMode::Cross,
        ParamGroup::EncoderBase,
        &mut rng(),
    )
    .unwrap();
    let mut r = rng();
    let q = normal_tensor(&mut r, &[3, 4], 1.0);
    let kv = normal_tensor(&mut r, &[4, 4], 1.0);
    let perm = [2usize, 0, 3, 1];
    let kv_p = Tensor::matrix(
        4,
        4,
        perm.iter().flat_map(|&i| kv.row(i).to_vec()).collect(),
    )
    .unwrap();
    let run = |kv: &Tensor| {
        let mut g = Graph::with_store(&store);
        let qv = g.constant(q.clone());
        let kvv = g.constant(kv.clone());
        let o = att.forward(&mut g, qv, kvv).unwrap();
        g.value(o).clone()
    };
    assert!(run(&kv).max_abs_diff(&run(&kv_p)) < 1e-12);
}

#[test]
fn causal_attention_ignores_the_future() {
    let mut store = ParameterStore::new();
    let att = AttentionBlock::new(
        &mut store,
        "att",
        4,
        4,
        4,
        2,
        AttentionMode::CausalSelf,
        ParamGroup::DecoderBase,
        &mut rng(),
    )
    .unwrap();
    let mut r = rng();
    let x = normal_tensor(&mut r, &[5, 4], 1.0);
    let mut y = x.clone();
    for v in &mut y.data_mut()[3 * 4..] {
        *v += 3.0;
    }
    let run = |x: &Tensor| {
        let mut g = Graph::with_store(&store);
        let xv = g.constant(x.clone());
        let (o, w) = att.forward_with_weights(&mut g, xv, xv).unwrap();
        (g.value(o).clone(), g.value(w[0]).clone())
    };
    let (a, wa) = run(&x);
    let (b, _) = run(&y);
    assert_eq!(&a.data()[..12], &b.data()[..12]);
    for i in 0..5 {
        for j in i + 1..5 {
            assert_eq!(wa.at(i, j), 0.0);
        }
    }
}

#[test]
fn self_attention_rejects_distinct_inputs() {
    let mut store = ParameterStore::new();
    let att = identity_attention(&mut store, 2, AttentionMode::SelfAttn);
    let mut g = Graph::with_store(&store);
    let a = g.constant(Tensor::zeros(&[2, 2]));
    let b = g.constant(Tensor::zeros(&[2, 2]));
    assert!(att.forward(&mut g, a, b).is_err());
    let mut s2 = ParameterStore::new();
    assert!(AttentionBlock::new(
        &mut s2,
        "x",
        4,
        4,
        6,
        4,
        AttentionMode::SelfAttn,
        ParamGroup::EncoderBase,
        &mut rng()
    )
    .is_err());
}

fn tiny_decoder(store: &mut ParameterStore) -> LanguageDecoder {
    LanguageDecoder::new(store, 7, 8, 6, 1, 2, 2, &mut rng()).unwrap()
}

#[test]
fn decode_alignment_and_prefix_causality() {
    let mut store = ParameterStore::new();
    let dec = tiny_decoder(&mut store);
    let prefix = normal_tensor(&mut rng(), &[2, 8], 1.0);
    let mut g = Graph::with_store(&store);
    let p = g.constant(prefix.clone());
    let full = dec.decode(&mut g, p, &[3, 1, 4]).unwrap();
    assert_eq!(g.dims(full), &[5, 7]);
    let empty = dec.decode(&mut g, p, &[]).unwrap();
    assert_eq!(g.dims(empty), &[2, 7]);
    for i in 0..2 {
        for c in 0..7 {
            assert!((g.value(full).at(i, c) - g.value(empty).at(i, c)).abs() < 1e-12);
        }
    }
    // row k-1+j sees target[..j] only: truncating the target leaves it alone
    let short = dec.decode(&mut g, p, &[3]).unwrap();
    for c in 0..7 {
        assert!((g.value(full).at(2, c) - g.value(short).at(2, c)).abs() < 1e-12);
    }
}

#[test]
fn decode_matches_manual_composition() {
    let mut store = ParameterStore::new();
    let dec = tiny_decoder(&mut store);
    let prefix = normal_tensor(&mut rng(), &[1, 8], 1.0);
    let mut g = Graph::with_store(&store);
    let p = g.constant(prefix.clone());
    let logits = dec.decode(&mut g, p, &[5]).unwrap();

    let mut h = g.constant(prefix);
    let e = dec.embed_tokens(&mut g, &[5]).unwrap();
    h = g.concat_rows(&[h, e]).unwrap();
    let manual = dec.forward_embeddings(&mut g, h).unwrap();
    assert_eq!(g.value(logits).data(), g.value(manual).data());
    let emb = store.value(dec.tok_embed).row(5).to_vec();
    assert_eq!(g.value(e).row(0), &emb[..]);
}

#[test]
fn decode_context_overflow() {
    let mut store = ParameterStore::new();
    let dec = tiny_decoder(&mut store);
    let mut g = Graph::with_store(&store);
    let p = g.constant(Tensor::zeros(&[4, 8]));
    assert!(matches!(
        dec.decode(&mut g, p, &[1, 2, 3]),
        Err(Error::Length { len: 7, max: 6 })
    ));
}

#[test]
fn greedy_stops_on_forced_stop_and_is_deterministic() {
    let mut store = ParameterStore::new();
    let dec = tiny_decoder(&mut store);
    let prefix = normal_tensor(&mut rng(), &[2, 8], 1.0);
    let a = dec.greedy_generate(&store, &prefix, 3, 0).unwrap();
    let b = dec.greedy_generate(&store, &prefix, 3, 0).unwrap();
    assert_eq!(a, b);
    assert!(!a.is_empty() && a.len() <= 3);

    let mut bias = vec![0.0; 7];
    bias[0] = 1e3;
    store
        .set_value(dec.head.bias.unwrap(), Tensor::new(vec![7], bias).unwrap())
        .unwrap();
    assert_eq!(dec.greedy_generate(&store, &prefix, 5, 0).unwrap(), vec![0]);
}

#[test]
fn argmax_prefers_lowest_index() {
    assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
    assert_eq!(argmax(&[0.0]), 0);
}
