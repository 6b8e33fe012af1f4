use prema::aggregator::{AggregationVariant, ModelConfig};
use prema::dataset::{generate_dataset, GenerateOptions, Split};
use prema::train::{load_split, train_two_stage, EpochLog, TrainConfig};

fn non_increasing(log: &[EpochLog], stage: u8) -> bool {
    let losses: Vec<f64> = log.iter().filter(|e| e.stage == stage).map(|e| e.mean_loss).collect();
    losses.windows(2).all(|w| w[1] <= w[0])
}

#[test]
fn stage_two_loss_is_non_increasing_on_a_two_class_toy_set() {
    let model = ModelConfig {
        variant: AggregationVariant::Prema,
        classes: 2,
        ..ModelConfig::default()
    };
    let mut held = Vec::new();
    for seed in 0..5 {
        let dir = tempfile::tempdir().unwrap();
        let opts = GenerateOptions {
            global_seed: seed,
            class_count: 2,
            shapes_per_class: 4,
            ..GenerateOptions::default()
        };
        let manifest = generate_dataset(&opts, dir.path()).unwrap();
        let data = load_split(&manifest, Split::Train).unwrap();
        let cfg = TrainConfig {
            seed,
            ..TrainConfig::default()
        };
        let (_, _, log) = train_two_stage(&cfg, &model, &data).unwrap();
        if non_increasing(&log, 2) {
            held.push(seed);
        }
    }
    assert!(held.len() >= 4, "non-increasing only for seeds {held:?}");
}
