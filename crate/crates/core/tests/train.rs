//! Training-loop behaviour: optimisation progress, reproducibility,
//! checkpoint round trips and the evaluation metric.

use gncde_autodiff::{AdamConfig, TensorFile};
use gncde_core::advection::SimulationConfig;
use gncde_core::dataset::Dataset;
use gncde_core::grid::{format_table, run_grid, Execution, ModelSize, Variant, STANDARD_VARIANTS};
use gncde_core::model::{Gncde, InnerMechanism, ModelConfig, OuterMechanism};
use gncde_core::topology::{GraphSpec, VertexAdjacency};
use gncde_core::train::{
    evaluate, mae, read_metrics, split_indices, train, write_metrics, MetricRecord, TrainConfig, Trainer,
};

fn tiny_model(adj: &VertexAdjacency, inner: InnerMechanism, outer: OuterMechanism) -> ModelConfig {
    let mut cfg = ModelConfig::for_graph(adj, inner, outer);
    cfg.d_h = 4;
    cfg.d_z = 4;
    cfg.hidden_width = 6;
    cfg.n_layers = 2;
    cfg.agc_embed_dim = 3;
    cfg.substeps = 1;
    cfg
}

fn dataset(n: usize, seed: u64) -> Dataset {
    let sim = SimulationConfig {
        seed,
        ..SimulationConfig::default()
    };
    Dataset::generate(&GraphSpec::from_adjacency(&VertexAdjacency::four_node()), &sim, n).unwrap()
}

fn train_cfg(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 8,
        seed: 3,
        ..TrainConfig::default()
    }
}

fn same_log(a: &[MetricRecord], b: &[MetricRecord]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.same_values(y))
}

#[test]
fn zero_epochs_leave_parameters_untouched() {
    let adj = VertexAdjacency::four_node();
    let data = dataset(20, 0);
    let cfg = tiny_model(&adj, InnerMechanism::Agc, OuterMechanism::Informed);
    let out = train(cfg, None, &data, train_cfg(0)).unwrap();
    let init = Gncde::new(out.model.clone()).unwrap().init_params(3);
    assert!(out.final_params.bitwise_eq(&init));
    assert!(out.best_params.bitwise_eq(&init));
    assert_eq!(out.epochs_run, 0);
    // only the untrained validation entry is logged
    assert_eq!(out.log.len(), 1);
    assert_eq!((out.log[0].epoch, out.log[0].split.as_str()), (0, "val"));
}

#[test]
fn a_single_sample_can_be_memorised() {
    let adj = VertexAdjacency::four_node();
    let mut data = dataset(1, 1);
    data.samples.truncate(1);
    let cfg = TrainConfig {
        epochs: 200,
        batch_size: 1,
        adam: AdamConfig {
            lr: 1e-2,
            ..AdamConfig::default()
        },
        ..TrainConfig::default()
    };
    let out = train(
        tiny_model(&adj, InnerMechanism::Identity, OuterMechanism::Identity),
        None,
        &data,
        cfg,
    )
    .unwrap();
    let train_log: Vec<f64> = out.log.iter().filter(|r| r.split == "train").map(|r| r.mae).collect();
    let (first, last) = (train_log[0], *train_log.last().unwrap());
    assert!(last <= 0.5 * first, "train MAE went from {first} to {last}");
}

#[test]
fn identical_seeds_reproduce_runs_bitwise() {
    let adj = VertexAdjacency::four_node();
    let data = dataset(30, 2);
    let cfg = tiny_model(&adj, InnerMechanism::Agc, OuterMechanism::Informed);
    let a = train(cfg.clone(), None, &data, train_cfg(3)).unwrap();
    let b = train(cfg.clone(), None, &data, train_cfg(3)).unwrap();
    assert!(same_log(&a.log, &b.log));
    assert!(a.final_params.bitwise_eq(&b.final_params));
    assert_eq!(a.test_mae.to_bits(), b.test_mae.to_bits());
    let other = train(
        cfg,
        None,
        &data,
        TrainConfig {
            seed: 4,
            ..train_cfg(3)
        },
    )
    .unwrap();
    assert!(!other.final_params.bitwise_eq(&a.final_params));
}

#[test]
fn resuming_from_disk_matches_an_uninterrupted_run() {
    let adj = VertexAdjacency::four_node();
    let data = dataset(30, 3);
    let cfg = tiny_model(&adj, InnerMechanism::Informed, OuterMechanism::Informed);
    let straight = train(cfg.clone(), None, &data, train_cfg(4)).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.ckpt");
    let mut first = Trainer::new(cfg, None, &data, train_cfg(2)).unwrap();
    first.run(|_| Ok(())).unwrap();
    first.save_checkpoint(&path).unwrap();
    drop(first);

    let mut resumed = Trainer::from_checkpoint(TensorFile::load(&path).unwrap(), &data).unwrap();
    assert!(resumed.is_finished());
    resumed.set_epochs(4);
    resumed.run(|_| Ok(())).unwrap();
    let out = resumed.finish().unwrap();
    assert!(out.final_params.bitwise_eq(&straight.final_params));
    assert!(out.best_params.bitwise_eq(&straight.best_params));
    assert!(same_log(&out.log, &straight.log));
    assert_eq!(out.test_mae.to_bits(), straight.test_mae.to_bits());
}

#[test]
fn checkpoint_round_trip_preserves_evaluation_bitwise() {
    let adj = VertexAdjacency::four_node();
    let data = dataset(25, 4);
    let mut trainer = Trainer::new(
        tiny_model(&adj, InnerMechanism::Agc, OuterMechanism::Identity),
        None,
        &data,
        train_cfg(1),
    )
    .unwrap();
    trainer.run(|_| Ok(())).unwrap();
    let mut bytes = Vec::new();
    trainer.checkpoint().unwrap().write_to(&mut bytes).unwrap();
    let restored = Trainer::from_checkpoint(TensorFile::read_from(bytes.as_slice()).unwrap(), &data).unwrap();
    assert!(restored.state().params.bitwise_eq(&trainer.state().params));

    let test: Vec<_> = trainer.split().test.iter().map(|&i| &data.samples[i]).collect();
    let before = evaluate(trainer.model(), &trainer.state().params, &test, 4).unwrap();
    let after = evaluate(restored.model(), &restored.state().params, &test, 4).unwrap();
    assert_eq!(before.to_bits(), after.to_bits());
}

#[test]
fn checkpoint_for_another_architecture_is_rejected_by_shape() {
    let adj = VertexAdjacency::four_node();
    let data = dataset(10, 5);
    let trainer = Trainer::new(
        tiny_model(&adj, InnerMechanism::Identity, OuterMechanism::Identity),
        None,
        &data,
        train_cfg(0),
    )
    .unwrap();
    let mut file = trainer.checkpoint().unwrap();
    file.meta["model"]["d_h"] = serde_json::json!(5);
    let err = Trainer::from_checkpoint(file, &data)
        .err()
        .expect("shape mismatch must fail")
        .to_string();
    assert!(err.contains("init_h.w") && err.contains("shape"), "{err}");
}

#[test]
fn metrics_survive_checkpoint_and_ndjson() {
    let adj = VertexAdjacency::four_node();
    let data = dataset(20, 6);
    let mut trainer = Trainer::new(
        tiny_model(&adj, InnerMechanism::Identity, OuterMechanism::Informed),
        None,
        &data,
        train_cfg(2),
    )
    .unwrap();
    trainer.run(|_| Ok(())).unwrap();
    let restored = Trainer::from_checkpoint(trainer.checkpoint().unwrap(), &data).unwrap();
    let mut text = Vec::new();
    write_metrics(&restored.state().log, &mut text).unwrap();
    let replayed = read_metrics(std::str::from_utf8(&text).unwrap()).unwrap();
    assert!(same_log(&replayed, &trainer.state().log));
    assert_eq!(replayed.len(), 1 + 2 * 2);
}

#[test]
fn evaluation_is_the_mean_of_per_window_errors() {
    let adj = VertexAdjacency::four_node();
    let data = dataset(12, 7);
    let model = Gncde::new(tiny_model(&adj, InnerMechanism::Agc, OuterMechanism::Informed)).unwrap();
    let params = model.init_params(8);
    let samples: Vec<_> = data.samples.iter().collect();
    let batched = evaluate(&model, &params, &samples, 5).unwrap();
    let looped: f64 = samples
        .iter()
        .map(|s| {
            let pred = model.predict(&params, &s.input).unwrap();
            pred.data()
                .iter()
                .zip(&s.target)
                .map(|(p, t)| (p - t).abs())
                .sum::<f64>()
                / s.target.len() as f64
        })
        .sum::<f64>()
        / samples.len() as f64;
    assert!((batched - looped).abs() < 1e-12 * looped.max(1.0));
}

#[test]
fn constant_prediction_has_the_analytic_error() {
    let adj = VertexAdjacency::four_node();
    let data = dataset(10, 8);
    let model = Gncde::new(tiny_model(&adj, InnerMechanism::Identity, OuterMechanism::Identity)).unwrap();
    let mut params = model.init_params(9);
    let level = 2.5;
    params.get_mut("readout.w").unwrap().data_mut().fill(0.0);
    params
        .get_mut("readout.b")
        .unwrap()
        .data_mut()
        .fill(level * model.config().obs_scale);
    let samples: Vec<_> = data.samples.iter().collect();
    let want = samples
        .iter()
        .map(|s| s.target.iter().map(|t| (t - level).abs()).sum::<f64>() / s.target.len() as f64)
        .sum::<f64>()
        / samples.len() as f64;
    let got = evaluate(&model, &params, &samples, 4).unwrap();
    assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    assert_eq!(mae(&[1.0, -1.0], &[0.0, 0.0]).unwrap(), 1.0);
}

#[test]
fn first_epoch_loss_matches_evaluation_at_a_tiny_learning_rate() {
    let adj = VertexAdjacency::four_node();
    let data = dataset(16, 9);
    let cfg = TrainConfig {
        epochs: 1,
        batch_size: 4,
        adam: AdamConfig {
            lr: 1e-12,
            ..AdamConfig::default()
        },
        split: [1.0, 0.0, 0.0],
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(
        tiny_model(&adj, InnerMechanism::Identity, OuterMechanism::Informed),
        None,
        &data,
        cfg,
    )
    .unwrap();
    let initial = trainer.state().params.clone();
    let (train_mae, val) = trainer.run_epoch().unwrap();
    assert!(val.is_none());
    let all: Vec<_> = data.samples.iter().collect();
    let direct = evaluate(trainer.model(), &initial, &all, 16).unwrap();
    assert!((train_mae - direct).abs() < 1e-8 * direct, "{train_mae} vs {direct}");
}

#[test]
fn split_covers_every_window_once() {
    let s = split_indices(37, [0.8, 0.1, 0.1], 11);
    let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
    all.sort_unstable();
    assert_eq!(all, (0..37).collect::<Vec<_>>());
}

#[test]
fn untrained_grid_reports_initial_test_error() {
    let adj = VertexAdjacency::four_node();
    let graph = GraphSpec::from_adjacency(&adj);
    let data = dataset(20, 10);
    let size = ModelSize {
        d_h: 4,
        d_z: 4,
        hidden_width: 6,
        n_layers: 2,
        agc_embed_dim: 3,
        substeps: 1,
        ..ModelSize::default()
    };
    let cfg = train_cfg(0);
    let results = run_grid(
        &graph,
        &data,
        &size,
        &cfg,
        &STANDARD_VARIANTS,
        Execution::Sequential,
        |_| Ok(()),
    )
    .unwrap();
    assert_eq!(results.len(), 5);
    for r in &results {
        let variant: Variant = r.variant();
        let direct = train(size.model_config(&graph, variant).unwrap(), None, &data, cfg.clone()).unwrap();
        assert_eq!(r.mae.to_bits(), direct.test_mae.to_bits(), "{variant}");
        assert_eq!(r.epochs_to_threshold, 0);
    }
    let count = |i, o| results.iter().find(|r| r.inner == i && r.outer == o).unwrap().n_params;
    use InnerMechanism as I;
    use OuterMechanism as O;
    assert_eq!(count(I::Identity, O::Identity), count(I::Identity, O::Informed));
    assert_eq!(count(I::Identity, O::Identity), count(I::Informed, O::Identity));
    assert_eq!(count(I::Agc, O::Identity), count(I::Agc, O::Informed));
    assert!(count(I::Agc, O::Identity) > count(I::Identity, O::Identity));
    let table = format_table(&results);
    // header, rule, three inner rows, footer
    assert_eq!(table.lines().count(), 6, "{table}");
}

#[test]
fn evaluating_an_empty_split_is_an_error() {
    let adj = VertexAdjacency::four_node();
    let model = Gncde::new(tiny_model(&adj, InnerMechanism::Identity, OuterMechanism::Identity)).unwrap();
    let params = model.init_params(0);
    let err = evaluate(&model, &params, &[], 4).unwrap_err();
    assert!(err.to_string().contains("empty"), "{err}");
}

#[test]
fn a_tiny_full_batch_step_lowers_the_training_loss() {
    // the first Adam step moves every parameter by about lr against its
    // gradient sign, so a correct gradient must reduce the loss to first order
    let adj = VertexAdjacency::four_node();
    let data = dataset(30, 2);
    for (inner, outer) in [
        (InnerMechanism::Identity, OuterMechanism::Identity),
        (InnerMechanism::Agc, OuterMechanism::Informed),
    ] {
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 64,
            adam: AdamConfig {
                lr: 1e-6,
                ..AdamConfig::default()
            },
            clip_norm: None,
            ..train_cfg(1)
        };
        let mut trainer = Trainer::new(tiny_model(&adj, inner, outer), None, &data, cfg).unwrap();
        let samples: Vec<_> = trainer.split().train.iter().map(|&i| &data.samples[i]).collect();
        let before = evaluate(trainer.model(), &trainer.state().params, &samples, 64).unwrap();
        trainer.run_epoch().unwrap();
        let after = evaluate(trainer.model(), &trainer.state().params, &samples, 64).unwrap();
        assert!(
            after < before,
            "{inner:?}/{outer:?}: loss went from {before} to {after}"
        );
    }
}
