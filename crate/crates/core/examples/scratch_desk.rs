use mtclar_core::sampler::{generate_pair_indices, neighborhood_filter, WheelConfig};
use mtclar_core::synth::{pattern_dataset, PatternConfig};
use mtclar_core::train::{pair_accuracy, train_mtclar, Tasks, TrainConfig};
use std::time::Instant;

fn main() {
    let wheel = WheelConfig::default();
    let ds = pattern_dataset(&PatternConfig { per_class: 100, ..Default::default() }, &wheel).unwrap();
    let ds = neighborhood_filter(&ds, &wheel).unwrap();
    let test = pattern_dataset(&PatternConfig { per_class: 25, seed: 99, ..Default::default() }, &wheel).unwrap();
    let probe = generate_pair_indices(&test, 1000, 0.5, 7).unwrap();
    for tasks in [Tasks::Multi, Tasks::SimilarityOnly] {
        let t = Instant::now();
        let mut cfg = TrainConfig::desk();
        cfg.tasks = tasks;
        let out = train_mtclar(&cfg, &ds, None).unwrap();
        let acc = pair_accuracy(&out.model, &test, &probe, &cfg.augmentation).unwrap();
        for h in &out.history { println!("{:?}", h); }
        println!("{:?} acc {acc} best {} time {:?}", tasks, out.best_epoch, t.elapsed());
    }
}
