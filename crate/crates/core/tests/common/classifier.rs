use std::time::Instant;

use cardioloop::classifier::{
    build_images, default_classes, evaluate, stratified_split, train, MetricsReport, Model, TrainConfig,
    WindowSelection,
};
use cardioloop::signal_sim::{simulate_dataset, Channel, SimConfig};
use cardioloop::spectro::SpectroConfig;

pub struct Trained {
    pub model: Model,
    pub report: MetricsReport,
    pub train_images: usize,
    pub test_images: usize,
    pub seconds: f64,
}

/// Simulator defaults for `channel`, record-level split, every window of
/// each record, default training settings.
pub fn train_pipeline(channel: Channel, n_classes: usize, seed: u64) -> Trained {
    let started = Instant::now();
    let sim = SimConfig { channel, seed, ..SimConfig::default() };
    let classes = default_classes(n_classes).unwrap();
    let records: Vec<_> =
        simulate_dataset(&sim).unwrap().records.into_iter().filter(|r| classes.contains(&r.class)).collect();
    let tc = TrainConfig { seed, ..TrainConfig::default() };
    let (train_recs, _, test_recs) = stratified_split(records, |r| r.class, tc.split, seed).unwrap();
    // no record may contribute windows to both sides
    assert!(train_recs.iter().all(|a| test_recs.iter().all(|b| a.seed != b.seed)));
    let sc = SpectroConfig::default();
    let images = |rs: Vec<cardioloop::signal_sim::SimRecord>| {
        build_images(&rs.into_iter().map(|r| r.waveform).collect::<Vec<_>>(), &sc, WindowSelection::All).unwrap()
    };
    let train_set = images(train_recs);
    let test_set = images(test_recs);
    let init = Model::init(classes, sc.height, seed).unwrap();
    let (model, _) = train(&init, &train_set, &tc).unwrap();
    let report = evaluate(&model, &test_set).unwrap();
    Trained {
        model,
        report,
        train_images: train_set.len(),
        test_images: test_set.len(),
        seconds: started.elapsed().as_secs_f64(),
    }
}
