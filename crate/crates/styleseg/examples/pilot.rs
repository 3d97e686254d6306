use std::time::Instant;
use styleseg::recipes::{run_recipe, RecipeParams};

fn main() {
    let name = std::env::args().nth(1).unwrap_or_else(|| "trial-cond".into());
    let seed: u64 = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(7);
    let params = RecipeParams { seed, ..Default::default() };
    let out = std::env::temp_dir().join(format!("styleseg_pilot_{name}_{seed}"));
    let t = Instant::now();
    let output = run_recipe(&name, &params, &out).unwrap();
    println!("recipe {name} seed {seed} took {:.1}s", t.elapsed().as_secs_f64());
    for r in &output.rows {
        println!(
            "{:28} cond={:8} cohort={:10} dice={:.4} pr_auc={} det={:.4} small={:.4} thr={:.2}",
            r.model,
            r.conditioned_on,
            r.cohort,
            r.report.dice,
            r.report.pr_auc.map(|v| format!("{v:.4}")).unwrap_or_default(),
            r.report.detection_f1,
            r.report.small_lesion_f1,
            r.report.threshold_used,
        );
    }
    if let Some(p) = &output.partition {
        println!("partition: {:?}", p.groups);
    }
    if let Some(rep) = &output.report {
        for (pi, (i, j)) in rep.pairs().into_iter().enumerate() {
            let s = &rep.summary[pi];
            println!(
                "pair {}-{}: scale={:?} shift={:?}",
                rep.sources[i], rep.sources[j], s.scale, s.shift
            );
        }
    }
}
