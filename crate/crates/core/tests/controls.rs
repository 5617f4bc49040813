//! Negative control: a model trained on permuted labels has nothing to learn.

use dupn::data::{generate, Preparer, TaskCounts, WorldConfig};
use dupn::experiments::{desk_model, desk_train};
use dupn::heads::TaskKind;
use dupn::model::{Dupn, Example};
use dupn::numeric::RngState;
use dupn::trainer::{Session, TrainConfig};
use rand::seq::SliceRandom;

#[test]
fn permuted_ctr_labels_give_chance_auc() {
    let world = WorldConfig {
        eval_ratio: 0.4,
        ..WorldConfig::default()
    };
    let g = generate(&world, TaskCounts { ctr: 50_000, ..Default::default() }, 12);
    let mc = desk_model();
    let (_, model) = Dupn::init(&mc, 0).unwrap();
    let mut train = g.train.records.clone();
    let mut labels: Vec<f64> = train.iter().map(|r| r.label).collect();
    labels.shuffle(&mut RngState::new(13));
    for (r, l) in train.iter_mut().zip(labels) {
        r.label = l;
    }
    let mut p = Preparer::new(&model);
    let train: Vec<Example> = p.prepare_all(&train).unwrap();
    let eval: Vec<Example> = p.prepare_all(&g.eval.records).unwrap();
    assert!(eval.len() >= 20_000);

    let cfg = TrainConfig {
        tasks: vec![TaskKind::Ctr],
        weights: vec![1.0],
        ..desk_train(14)
    };
    let mut s = Session::new(&mc, cfg).unwrap();
    let report = s.fit(&train, Some(&eval)).unwrap();
    let auc = report.final_metric(TaskKind::Ctr).unwrap();
    assert!((auc - 0.5).abs() <= 0.02, "AUC on permuted labels {auc}");
}
