mod common;

use hicqa::autodiff::{grad_check, Matrix, Tape};
use hicqa::checkpoint::Checkpoint;
use hicqa::corpus::Capacity;
use hicqa::filter::metrics::auroc;
use hicqa::graph::{build_graph, HeteroGraph, WeakLabels};
use hicqa::model::{model_forward, HyperParams, Model, ModelParams};
use hicqa::train::{
    clip_gradients, keep_probabilities, multitask_loss, train, train_from, OptimizerKind, TrainConfig, TrainError,
};
use hicqa::Precision;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_hyper() -> HyperParams {
    HyperParams { d: 16, layers: 2, heads: 2, precision: Precision::Double, ..Default::default() }
}

fn small_graph(seed: u64) -> HeteroGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    build_graph(&common::random_corpus(&mut rng, &[3, 2, 4, 3], 8), 0.5).unwrap()
}

fn config(epochs: usize) -> TrainConfig {
    TrainConfig { epochs, learning_rate: 5e-3, eval_every: 5, ..Default::default() }
}

#[test]
fn zero_epochs_return_the_initialization() {
    let g = small_graph(0);
    let out = train::<f64>(&g, &small_hyper(), &config(0)).unwrap();
    assert!(out.report.epochs.is_empty());
    assert_eq!(out.best_epoch, None);
    let init = Model::<f64>::init(g.f(), HyperParams { alpha: g.alpha(), ..small_hyper() }, 0).unwrap();
    let want = Checkpoint::from_model(&init, &g.content_hash(), 0, 0);
    assert_eq!(out.final_checkpoint.tensors, want.tensors);
    assert_eq!(out.final_checkpoint.graph_hash, g.content_hash());
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let g = small_graph(1);
    let init = Model::<f64>::init(g.f(), small_hyper(), 3).unwrap();
    for optimizer in [OptimizerKind::AdamW, OptimizerKind::Sgd] {
        let cfg = TrainConfig { learning_rate: 0.0, optimizer, ..config(5) };
        let out = train_from(&g, init.clone(), &cfg).unwrap();
        assert_eq!(out.model.params, init.params);
        assert_eq!(out.report.epochs.len(), 5);
    }
}

#[test]
fn same_seed_same_run() {
    let g = small_graph(2);
    let a = train::<f64>(&g, &small_hyper(), &config(15)).unwrap();
    let b = train::<f64>(&g, &small_hyper(), &config(15)).unwrap();
    assert_eq!(a.report.total_losses(), b.report.total_losses());
    assert_eq!(a.final_checkpoint.to_bytes(), b.final_checkpoint.to_bytes());
    let c = train::<f64>(&g, &small_hyper(), &TrainConfig { seed: 1, ..config(15) }).unwrap();
    assert_ne!(a.report.total_losses(), c.report.total_losses());
}

#[test]
fn loss_decreases_and_report_is_complete() {
    let g = small_graph(3);
    let out = train::<f64>(&g, &small_hyper(), &config(40)).unwrap();
    let losses = out.report.total_losses();
    assert_eq!(losses.len(), 40);
    assert!(losses[39] < losses[0], "{losses:?}");
    let evaluated: Vec<usize> =
        out.report.epochs.iter().filter(|r| r.cap_accuracy.is_some()).map(|r| r.epoch).collect();
    assert_eq!(evaluated, vec![0, 5, 10, 15, 20, 25, 30, 35, 39]);
    for r in &out.report.epochs {
        assert!(r.grad_norm.is_finite() && r.clip_scale > 0.0 && r.clip_scale <= 1.0);
        assert!(r.cap_loss.is_some());
    }
    let best = out.best_epoch.unwrap();
    assert!(losses.iter().all(|&l| l >= losses[best]));
    let mut buf = Vec::new();
    out.report.write_jsonl(&mut buf).unwrap();
    assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 40);
}

#[test]
fn keep_only_objective_ignores_capacity() {
    let g = small_graph(4);
    let out = train::<f64>(&g, &small_hyper(), &TrainConfig { lambda: 1.0, ..config(6) }).unwrap();
    for r in &out.report.epochs {
        assert_eq!(r.cap_loss, None);
        assert_eq!(r.cap_accuracy, None);
        assert_eq!(r.total_loss, r.keep_loss);
    }
}

#[test]
fn separable_graph_is_learned() {
    let (corpus, clean) = common::separable_corpus(50, 4, 16, 5);
    let g = build_graph(&corpus, 0.5).unwrap();
    assert_eq!(g.n_qa(), 200);
    let cfg = TrainConfig { epochs: 200, learning_rate: 3e-3, eval_every: 20, ..Default::default() };
    let out = train::<f64>(&g, &small_hyper(), &cfg).unwrap();
    let final_auroc = out.report.epochs.last().unwrap().keep_auroc.unwrap();
    assert!(final_auroc >= 0.95, "keep AUROC vs weak labels {final_auroc}");
    let keep = keep_probabilities(&model_forward(&g, &out.model).unwrap().z_keep);
    let vs_oracle = auroc(&keep, &clean).unwrap();
    assert!(vs_oracle >= 0.95, "keep AUROC vs planted labels {vs_oracle}");
}

#[test]
fn huge_learning_rate_diverges_with_a_finite_checkpoint() {
    let g = small_graph(6);
    let cfg = TrainConfig { learning_rate: 1e300, weight_decay: 0.0, clip_norm: 1e300, ..config(20) };
    match train::<f64>(&g, &small_hyper(), &cfg) {
        Err(TrainError::Diverged { epoch, last_finite, report, .. }) => {
            assert_eq!(report.epochs.len(), epoch);
            let m: Model<f64> = last_finite.to_model().unwrap();
            assert!(m.params.is_finite());
        }
        other => panic!("expected divergence, got {:?}", other.map(|o| o.report.epochs.len())),
    }
}

#[test]
fn invalid_configs_are_rejected() {
    let g = small_graph(7);
    for cfg in [
        TrainConfig { learning_rate: -1.0, ..config(1) },
        TrainConfig { clip_norm: 0.0, ..config(1) },
        TrainConfig { lambda: 1.5, ..config(1) },
        TrainConfig { eval_every: 0, ..config(1) },
    ] {
        assert!(matches!(train::<f64>(&g, &small_hyper(), &cfg), Err(TrainError::Config(_))));
    }
}

#[test]
fn multitask_loss_matches_finite_differences() {
    let labels = WeakLabels {
        keep_soft: vec![0.9, 0.2, 0.55, 0.0],
        capacity: vec![Capacity::EU, Capacity::EP, Capacity::EP, Capacity::HG],
        clip_consistency: vec![0.5; 4],
        nli_entailment: vec![0.5; 4],
    };
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut zk = Matrix::<f64>::zeros(4, 2);
    let mut zc = Matrix::<f64>::zeros(4, 3);
    for m in [&mut zk, &mut zc] {
        for x in m.data_mut() {
            *x = rand::Rng::random_range(&mut rng, -2.0..2.0);
        }
    }
    for lambda in [0.0, 0.3, 1.0] {
        let report = grad_check(
            |t: &mut Tape<f64>, v| {
                Ok(multitask_loss(t, v[0], v[1], &labels, lambda, [0.5, 2.0, 1.0])
                    .map_err(|_| hicqa::autodiff::TensorError::NonFinite("loss"))?
                    .total)
            },
            &[zk.clone(), zc.clone()],
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "lambda {lambda}: {}", report.max_rel_err);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn clipping_caps_the_norm_and_keeps_direction(seed in any::<u64>(), scale in 1e-3f64..1e3, max_norm in 1e-2f64..10.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = ModelParams::<Matrix<f64>>::zeros(4, &HyperParams { d: 4, heads: 2, ..small_hyper() });
        common::randomize(&mut g, &mut rng, scale);
        let before: Vec<f64> = g.leaves().iter().flat_map(|m| m.data().to_vec()).collect();
        let norm = before.iter().map(|x| x * x).sum::<f64>().sqrt();
        let (s, pre) = clip_gradients(&mut g, max_norm);
        let after: Vec<f64> = g.leaves().iter().flat_map(|m| m.data().to_vec()).collect();
        let new_norm = after.iter().map(|x| x * x).sum::<f64>().sqrt();
        prop_assert!((pre - norm).abs() <= 1e-9 * norm);
        prop_assert!(new_norm <= norm * (1.0 + 1e-12));
        prop_assert!(new_norm <= max_norm * (1.0 + 1e-9) || (s == 1.0 && norm <= max_norm));
        prop_assert!(s > 0.0 && s <= 1.0);
        for (a, b) in before.iter().zip(&after) {
            prop_assert!((a * s - b).abs() <= 1e-12 * a.abs().max(1.0));
        }
    }
}
