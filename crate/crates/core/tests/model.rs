mod common;

use std::sync::Arc;

use hicqa::autodiff::{Matrix, Mode, Tape};
use hicqa::graph::{build_graph, HeteroGraph, NodeType};
use hicqa::model::{
    gatv2_conv, hetero_layer, model_forward, project_inputs, sage_conv, GatHead, GraphTensors, HyperParams, Linear,
    Model, ModelParams, RelationIndex, SageParams,
};
use hicqa::rng::RngKey;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{dense_forward, max_scaled_diff, random_corpus, randomize};

fn m(rows: usize, cols: usize, v: &[f64]) -> Matrix<f64> {
    Matrix::from_vec(rows, cols, v.to_vec()).unwrap()
}

fn rel(src: &[usize], dst: &[usize], attr: Option<&[f64]>, n_src: usize, n_dst: usize) -> RelationIndex<f64> {
    RelationIndex { src: Arc::from(src), dst: Arc::from(dst), attr: attr.map(|a| m(a.len(), 1, a)), n_src, n_dst }
}

fn graph(sizes: &[usize], f: usize, seed: u64) -> HeteroGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    build_graph(&random_corpus(&mut rng, sizes, f), 0.5).unwrap()
}

fn small_hyper(d: usize, layers: usize, heads: usize) -> HyperParams {
    HyperParams { d, layers, heads, ..HyperParams::default() }
}

#[test]
fn sage_single_neighbor_passes_message_through() {
    let mut tape = Tape::new();
    let h_src = tape.constant(m(1, 2, &[0.3, 1.5]));
    let h_dst = tape.constant(m(1, 2, &[-4.0, 2.0]));
    let p = SageParams {
        w_self: Linear { weight: tape.constant(Matrix::zeros(2, 2)), bias: None },
        w_neigh: tape.constant(Matrix::identity(2)),
    };
    let out = sage_conv(&mut tape, h_src, h_dst, &rel(&[0], &[0], None, 1, 1), &p).unwrap();
    assert_eq!(tape.value(out).data(), &[0.3, 1.5]);
}

#[test]
fn sage_without_neighbors_is_relu_of_self() {
    let mut tape = Tape::new();
    let h_src = tape.constant(m(1, 2, &[9.0, 9.0]));
    let h_dst = tape.constant(m(1, 2, &[-1.0, 0.5]));
    let p = SageParams {
        w_self: Linear { weight: tape.constant(Matrix::identity(2)), bias: None },
        w_neigh: tape.constant(Matrix::identity(2)),
    };
    let out = sage_conv(&mut tape, h_src, h_dst, &rel(&[], &[], None, 1, 1), &p).unwrap();
    assert_eq!(tape.value(out).data(), &[0.0, 0.5]);
}

#[test]
fn sage_two_neighbors_take_the_mean() {
    let mut tape = Tape::new();
    let h_src = tape.constant(m(2, 2, &[1.0, -3.0, 2.0, 1.0]));
    let h_dst = tape.constant(m(1, 2, &[5.0, 5.0]));
    let p = SageParams {
        w_self: Linear { weight: tape.constant(Matrix::zeros(2, 2)), bias: None },
        w_neigh: tape.constant(Matrix::identity(2)),
    };
    let out = sage_conv(&mut tape, h_src, h_dst, &rel(&[0, 1], &[0, 0], None, 2, 1), &p).unwrap();
    assert_eq!(tape.value(out).data(), &[1.5, 0.0]);
}

fn random_heads(tape: &mut Tape<f64>, rng: &mut ChaCha8Rng, d: usize, n: usize) -> Vec<GatHead<hicqa::autodiff::Var>> {
    let mut r = |rows: usize, cols: usize| Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0));
    (0..n)
        .map(|_| {
            let (w, b, att, we) = (r(d, d), r(1, d), r(3 * d, 1), r(1, d));
            GatHead {
                w: Linear { weight: tape.constant(w), bias: Some(tape.constant(b)) },
                att: tape.constant(att),
                w_edge: tape.constant(we),
            }
        })
        .collect()
}

#[test]
fn gat_singleton_and_symmetric_attention() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut tape = Tape::new();
    let heads = random_heads(&mut tape, &mut rng, 3, 2);
    let h_src = tape.constant(m(3, 3, &[0.2, -1.0, 0.5, 0.7, 0.7, 0.1, 0.7, 0.7, 0.1]));
    let h_dst = tape.constant(m(2, 3, &[1.0, 0.0, -1.0, 0.3, 0.3, 0.3]));
    // dst 0 has one edge; dst 1 has two edges from identical sources with equal attributes.
    let r = rel(&[0, 1, 2], &[0, 1, 1], Some(&[0.9, 0.4, 0.4]), 3, 2);
    let (_, att) = gatv2_conv(&mut tape, h_src, h_dst, &r, &heads, 0.2).unwrap();
    for a in att {
        let w = tape.value(a).data();
        assert_eq!(w[0], 1.0);
        assert!((w[1] - 0.5).abs() < 1e-15 && (w[2] - 0.5).abs() < 1e-15);
    }
}

#[test]
fn gat_attention_reacts_to_edge_attributes() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut tape = Tape::new();
    let heads = random_heads(&mut tape, &mut rng, 4, 4);
    let h_src = tape.constant(Matrix::from_fn(3, 4, |_, _| rng.random_range(-1.0..1.0)));
    let h_dst = tape.constant(Matrix::from_fn(1, 4, |_, _| rng.random_range(-1.0..1.0)));
    let attention = |tape: &mut Tape<f64>, attr: &[f64]| {
        let r = rel(&[0, 1, 2], &[0, 0, 0], Some(attr), 3, 1);
        let (_, att) = gatv2_conv(tape, h_src, h_dst, &r, &heads, 0.2).unwrap();
        att.iter().map(|&a| tape.value(a).data().to_vec()).collect::<Vec<_>>()
    };
    let before = attention(&mut tape, &[0.2, 0.5, 0.8]);
    let after = attention(&mut tape, &[0.9, 0.5, 0.8]);
    for (b, a) in before.iter().zip(&after) {
        assert_ne!(b, a);
    }

    let zero_edge: Vec<_> = heads
        .iter()
        .map(|h| {
            let mut h = h.clone();
            h.w_edge = tape.constant(Matrix::zeros(1, 4));
            h
        })
        .collect();
    let r1 = rel(&[0, 1, 2], &[0, 0, 0], Some(&[0.2, 0.5, 0.8]), 3, 1);
    let r2 = rel(&[0, 1, 2], &[0, 0, 0], Some(&[0.9, 0.5, 0.8]), 3, 1);
    let (_, a1) = gatv2_conv(&mut tape, h_src, h_dst, &r1, &zero_edge, 0.2).unwrap();
    let (_, a2) = gatv2_conv(&mut tape, h_src, h_dst, &r2, &zero_edge, 0.2).unwrap();
    for (x, y) in a1.iter().zip(&a2) {
        assert_eq!(tape.value(*x).data(), tape.value(*y).data());
    }
}

#[test]
fn projection_identity_and_zero() {
    let g = graph(&[2, 1], 3, 1);
    let gt = GraphTensors::<f64>::from_graph(&g);
    let hyper = small_hyper(4, 1, 1);
    let mut p = ModelParams::<Matrix<f64>>::zeros(3, &hyper);
    let mut tape = Tape::new();
    let feats: Vec<_> = gt.features.iter().map(|x| tape.constant(x.clone())).collect();
    let vars = p.register(&mut tape, false);
    for h in project_inputs(&mut tape, &feats, &vars).unwrap() {
        assert!(tape.value(h).data().iter().all(|&v| v == 0.0));
    }
    // d = f + 1 with identity projections reproduces the Image / QA features.
    p.proj[NodeType::Image.index()].weight = Matrix::identity(4);
    p.proj[NodeType::Qa.index()].weight = Matrix::identity(4);
    let vars = p.register(&mut tape, false);
    let h = project_inputs(&mut tape, &feats, &vars).unwrap();
    assert_eq!(tape.value(h[NodeType::Image.index()]), &gt.features[NodeType::Image.index()]);
    assert_eq!(tape.value(h[NodeType::Qa.index()]), &gt.features[NodeType::Qa.index()]);
}

#[test]
fn layer_with_silent_relations_is_layer_norm_of_input() {
    let g = graph(&[3], 4, 2);
    let gt = GraphTensors::<f64>::from_graph(&g);
    let hyper = small_hyper(4, 1, 2);
    let mut p = ModelParams::<Matrix<f64>>::zeros(4, &hyper);
    for norm in &mut p.layers[0].norm {
        norm.gamma = Matrix::filled(1, 4, 1.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut tape = Tape::new();
    let h: Vec<_> = NodeType::ALL
        .iter()
        .map(|&t| tape.constant(Matrix::from_fn(gt.n(t), 4, |_, _| rng.random_range(-2.0..2.0))))
        .collect();
    let vars = p.register(&mut tape, false);
    let out = hetero_layer(&mut tape, &h, &gt, &vars.layers[0], 0, &hyper, Mode::Eval, RngKey::new(0), &mut Vec::new())
        .unwrap();
    for (i, &o) in out.iter().enumerate() {
        let x = tape.value(h[i]);
        for r in 0..x.rows() {
            let row = x.row(r);
            let mean = row.iter().sum::<f64>() / 4.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            for (j, &v) in row.iter().enumerate() {
                let want = (v - mean) / (var + hyper.ln_eps).sqrt();
                assert!((tape.value(o).get(r, j) - want).abs() < 1e-12);
            }
        }
    }

    let zero: Vec<_> = NodeType::ALL.iter().map(|&t| tape.constant(Matrix::zeros(gt.n(t), 4))).collect();
    let out =
        hetero_layer(&mut tape, &zero, &gt, &vars.layers[0], 0, &hyper, Mode::Eval, RngKey::new(0), &mut Vec::new())
            .unwrap();
    for o in out {
        assert!(tape.value(o).data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn output_shapes_and_eval_repeatability() {
    let g = graph(&[3], 5, 4);
    let model = Model::<f64>::init(5, small_hyper(8, 2, 4), 1).unwrap();
    let a = model_forward(&g, &model).unwrap();
    let b = model_forward(&g, &model).unwrap();
    assert_eq!(a.z_keep.shape(), (3, 2));
    assert_eq!(a.z_cap.shape(), (3, 3));
    assert_eq!(a, b);
}

#[test]
fn training_mode_dropout_is_keyed() {
    let g = graph(&[3, 2], 5, 4);
    let gt = GraphTensors::<f64>::from_graph(&g);
    let hyper = HyperParams { dropout: 0.5, ..small_hyper(8, 2, 2) };
    let model = Model::<f64>::init(5, hyper, 1).unwrap();
    let a = model.forward(&gt, Mode::Train, RngKey::new(5)).unwrap();
    let b = model.forward(&gt, Mode::Train, RngKey::new(5)).unwrap();
    let c = model.forward(&gt, Mode::Train, RngKey::new(6)).unwrap();
    let e = model.forward(&gt, Mode::Eval, RngKey::new(5)).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.z_keep, c.z_keep);
    assert_ne!(a.z_keep, e.z_keep);
}

#[test]
fn sample_permutation_permutes_logits() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let corpus = random_corpus(&mut rng, &[2, 3, 1], 6);
    let mut reversed = corpus.clone();
    reversed.samples.reverse();
    let model = Model::<f64>::init(6, small_hyper(8, 2, 4), 3).unwrap();
    let a = model_forward(&build_graph(&corpus, 0.5).unwrap(), &model).unwrap();
    let gr = build_graph(&reversed, 0.5).unwrap();
    let b = model_forward(&gr, &model).unwrap();
    let g = build_graph(&corpus, 0.5).unwrap();
    for (i, id) in g.qa_ids().iter().enumerate() {
        let j = gr.qa_ids().iter().position(|x| x == id).unwrap();
        for c in 0..2 {
            assert!((a.z_keep.get(i, c) - b.z_keep.get(j, c)).abs() < 1e-12);
        }
        for c in 0..3 {
            assert!((a.z_cap.get(i, c) - b.z_cap.get(j, c)).abs() < 1e-12);
        }
    }
}

#[test]
fn distant_nodes_do_not_affect_logits() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let corpus = random_corpus(&mut rng, &[3, 2], 5);
    let model = Model::<f64>::init(5, small_hyper(8, 2, 4), 3).unwrap();
    let base = model_forward(&build_graph(&corpus, 0.5).unwrap(), &model).unwrap();
    let mut changed = corpus.clone();
    changed.samples[1].image_embedding = common::unit(&mut rng, 5);
    changed.samples[1].qas[0].qa_embedding = common::unit(&mut rng, 5);
    let out = model_forward(&build_graph(&changed, 0.5).unwrap(), &model).unwrap();
    for r in 0..3 {
        assert_eq!(base.z_keep.row(r), out.z_keep.row(r));
        assert_eq!(base.z_cap.row(r), out.z_cap.row(r));
    }
    assert_ne!(base.z_keep.row(3), out.z_keep.row(3));
}

#[test]
fn mismatched_feature_width_rejected() {
    let g = graph(&[2], 5, 1);
    let model = Model::<f64>::init(6, small_hyper(8, 1, 2), 0).unwrap();
    assert!(model_forward(&g, &model).is_err());
    assert!(Model::<f64>::init(6, small_hyper(6, 1, 4), 0).is_err());
}

#[test]
fn parameter_count_is_a_function_of_shape() {
    let count = |f, d, l, h| Model::<f32>::init(f, small_hyper(d, l, h), 0).unwrap().parameter_count();
    assert_eq!(count(8, 16, 2, 4), count(8, 16, 2, 4));
    assert!(count(8, 16, 2, 4) > count(8, 16, 1, 4));
    let model = Model::<f32>::init(8, small_hyper(16, 2, 4), 7).unwrap();
    let n: usize = model.params.leaves().iter().map(|m| m.len()).sum();
    assert_eq!(n, model.parameter_count());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn matches_dense_reference(
        seed in 0u64..1_000_000,
        sizes in prop::collection::vec(1usize..4, 1..3),
        f in 2usize..6,
        layers in 1usize..3,
        heads in prop::sample::select(vec![1usize, 2, 4]),
        bias in any::<bool>(),
    ) {
        let d = 4;
        let g = graph(&sizes, f, seed);
        let hyper = HyperParams { bias, ..small_hyper(d, layers, heads) };
        let mut model = Model::<f64>::init(f, hyper.clone(), seed).unwrap();
        randomize(&mut model.params, &mut ChaCha8Rng::seed_from_u64(seed ^ 0xabc), 0.8);
        let out = model_forward(&g, &model).unwrap();
        let want = dense_forward(&g, &model.params, &hyper);
        prop_assert!(max_scaled_diff(&out.z_keep, &want.z_keep) < 1e-9);
        prop_assert!(max_scaled_diff(&out.z_cap, &want.z_cap) < 1e-9);
        for t in NodeType::ALL {
            prop_assert!(max_scaled_diff(&out.hidden[t.index()], &want.hidden[t.index()]) < 1e-9);
        }

        // Single precision agrees with the double-precision reference to 1e-4.
        let single: Model<f32> = Model { f, hyper: hyper.clone(), params: model.params.map(|_, m| m.cast()) };
        let out32 = model_forward(&g, &single).unwrap();
        prop_assert!(max_scaled_diff(&out32.z_keep.cast(), &want.z_keep) < 1e-4);
        prop_assert!(max_scaled_diff(&out32.z_cap.cast(), &want.z_cap) < 1e-4);
    }

    #[test]
    fn attention_matches_dense_and_normalizes(seed in 0u64..1_000_000, sizes in prop::collection::vec(1usize..5, 1..4)) {
        let g = graph(&sizes, 4, seed);
        let hyper = small_hyper(8, 2, 4);
        let mut model = Model::<f64>::init(4, hyper.clone(), seed).unwrap();
        randomize(&mut model.params, &mut ChaCha8Rng::seed_from_u64(seed), 0.7);
        let out = model_forward(&g, &model).unwrap();
        let want = dense_forward(&g, &model.params, &hyper);
        prop_assert_eq!(out.attention.len(), want.attention.len());
        for ((l, r, h, w), (wl, wr, wh, dense)) in out.attention.iter().zip(&want.attention) {
            prop_assert_eq!((l, r, h), (wl, wr, wh));
            let edges = &g.relation(*r).edges;
            let mut sums = vec![0.0; g.nodes(r.dst_type()).len()];
            for (i, &(s, d)) in edges.iter().enumerate() {
                prop_assert!((w[i] - dense[d][s]).abs() < 1e-9);
                sums[d] += w[i];
            }
            for (d, s) in sums.iter().enumerate() {
                let has_in = edges.iter().any(|e| e.1 == d);
                prop_assert!(!has_in || (s - 1.0).abs() < 1e-12);
            }
        }
    }
}
