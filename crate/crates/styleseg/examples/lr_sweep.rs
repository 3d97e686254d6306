use styleseg::conditioning::ConditioningMode;
use styleseg::data::{generate_cohort, CohortSpec, StyleTransform};
use styleseg::metrics::Mask;
use styleseg::model::{Model, ModelConfig};
use styleseg::train::{predict_scores, train, TrainConfig};

fn main() {
    let size: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(32);
    let spec = CohortSpec {
        lesion_count: (2, 6),
        lesion_radius: (1.5, 5.0),
        height: size,
        width: size,
        ..CohortSpec::new("a", 40, StyleTransform::Identity, 3)
    };
    let samples = generate_cohort(&spec).unwrap();
    let train_refs: Vec<_> = samples[..24].iter().collect();
    let val_refs: Vec<_> = samples[24..32].iter().collect();

    for lr in [2e-4, 5e-4, 1e-3, 2e-3, 5e-3] {
        let mut model = Model::build(
            ModelConfig::new(ConditioningMode::PerSource, 5),
            &["a".to_string()],
        )
        .unwrap();
        let mut cfg = TrainConfig::new(60, 9);
        cfg.lr = lr;
        cfg.milestones = vec![30, 45];
        let t = std::time::Instant::now();
        let hist = train(&mut model, &train_refs, &val_refs, &cfg).unwrap();
        // final val dice at 0.5 + train dice
        let mut dice_of = |refs: &[&styleseg::data::Sample]| {
            let scores = predict_scores(&model, refs, None, 8).unwrap();
            let (mut inter, mut total) = (0usize, 0usize);
            for (s, sc) in refs.iter().zip(&scores) {
                let pred = Mask::threshold(sc, size, size, 0.5);
                for (p, g) in pred.bits().iter().zip(s.label.bits()) {
                    inter += (*p && *g) as usize;
                    total += *p as usize + *g as usize;
                }
            }
            2.0 * inter as f64 / total as f64
        };
        println!(
            "lr={lr:.0e}: best_epoch={:?} train_dice={:.4} val_dice={:.4} loss_last={:.4} ({:.0}s)",
            hist.best_epoch,
            dice_of(&train_refs),
            dice_of(&val_refs),
            hist.epochs.last().unwrap().train_loss,
            t.elapsed().as_secs_f64()
        );
    }
}
