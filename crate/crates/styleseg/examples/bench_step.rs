use std::time::Instant;
use styleseg::conditioning::ConditioningMode;
use styleseg::data::{generate_cohort, CohortSpec, StyleTransform};
use styleseg::model::{Model, ModelConfig};
use styleseg::train::{train, TrainConfig};

fn main() {
    let spec = CohortSpec::new("a", 16, StyleTransform::Identity, 3);
    let samples = generate_cohort(&spec).unwrap();
    let refs: Vec<_> = samples.iter().collect();
    let mut model = Model::build(
        ModelConfig::new(ConditioningMode::PerSource, 5),
        &["a".to_string()],
    )
    .unwrap();
    let mut cfg = TrainConfig::new(3, 9);
    cfg.batch_size = 8;
    let t = Instant::now();
    train(&mut model, &refs, &refs[..4], &cfg).unwrap();
    let dt = t.elapsed().as_secs_f64();
    println!(
        "3 epochs x 16 samples (64x64, default widths): {:.2}s total, {:.1} ms/image-pass",
        dt,
        dt * 1000.0 / (3.0 * 16.0)
    );
}
