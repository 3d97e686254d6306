//! Canned end-to-end experiments: dataset generation, training, matrix
//! evaluation, analysis, and result files for each study the crate
//! reproduces at desk scale.
//!
//! Every recipe is a pure function of its [`RecipeParams`]: rerunning with
//! the same parameters reproduces `results.csv` byte for byte. Independent
//! trainings inside one recipe may run on worker threads (capped by
//! `STYLESEG_THREADS`); results are assembled in a fixed order, so the
//! thread count never changes any output byte.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{self, discover_groups, AnalysisError, GroupPartition, SimilarityReport};
use crate::conditioning::ConditioningMode;
use crate::data::{self, generate_cohort, CohortSpec, DataError, Sample, StyleTransform};
use crate::metrics::MetricReport;
use crate::model::{Model, ModelConfig, ModelError};
use crate::train::{
    self, eval::score_cohort, finetune, select_threshold, predict_scores, FinetuneConfig, History,
    TrainConfig, TrainError,
};

#[derive(Debug, Error)]
pub enum RecipeError {
    #[error("unknown recipe '{0}' (expected one of: trial-cond, group-cond, msl, finetune10, gad-film, analyze)")]
    UnknownRecipe(String),
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
}

pub type Result<T> = std::result::Result<T, RecipeError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RecipeError + '_ {
    move |source| RecipeError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Desk-scale knobs shared by every canned recipe. Defaults fit each
/// recipe into its runtime budget on one core.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecipeParams {
    #[serde(default = "d_seed")]
    pub seed: u64,
    #[serde(default = "d_samples")]
    pub samples_per_cohort: usize,
    #[serde(default = "d_image")]
    pub image_size: usize,
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_lr")]
    pub lr: f64,
    #[serde(default = "d_wd")]
    pub weight_decay: f64,
    #[serde(default = "d_gamma")]
    pub scheduler_gamma: f64,
    /// Epochs for the few-shot fine-tuning stage.
    #[serde(default = "d_ft_epochs")]
    pub finetune_epochs: usize,
}

fn d_seed() -> u64 {
    7
}
fn d_samples() -> usize {
    40
}
fn d_image() -> usize {
    64
}
fn d_epochs() -> usize {
    60
}
fn d_batch() -> usize {
    8
}
fn d_lr() -> f64 {
    3e-3
}
fn d_wd() -> f64 {
    1e-5
}
fn d_gamma() -> f64 {
    0.5
}
fn d_ft_epochs() -> usize {
    40
}

impl Default for RecipeParams {
    fn default() -> Self {
        toml::from_str("").expect("defaults parse")
    }
}

impl RecipeParams {
    fn train_config(&self, seed_salt: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            weight_decay: self.weight_decay,
            milestones: vec![self.epochs / 2, (self.epochs * 3) / 4],
            scheduler_gamma: self.scheduler_gamma,
            augment: Default::default(),
            seed: self.seed ^ seed_salt,
            trainable: crate::conditioning::TrainableMask::Full,
        }
    }
}

/// One row of `results.csv`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResultRow {
    pub model: String,
    pub conditioned_on: String,
    pub cohort: String,
    pub report: MetricReport,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RecipeOutput {
    pub recipe: String,
    pub rows: Vec<ResultRow>,
    /// Extra artifacts some recipes produce (analysis report, partition).
    #[serde(skip)]
    pub report: Option<SimilarityReport>,
    #[serde(skip)]
    pub partition: Option<GroupPartition>,
}

impl RecipeOutput {
    pub fn row(&self, model: &str, conditioned_on: &str, cohort: &str) -> Option<&MetricReport> {
        self.rows
            .iter()
            .find(|r| r.model == model && r.conditioned_on == conditioned_on && r.cohort == cohort)
            .map(|r| &r.report)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "model,conditioned_on,cohort,threshold,dice,pr_auc,detection_f1,small_lesion_f1\n",
        );
        for r in &self.rows {
            let auc = r.report.pr_auc.map(|v| v.to_string()).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.model,
                r.conditioned_on,
                r.cohort,
                r.report.threshold_used,
                r.report.dice,
                auc,
                r.report.detection_f1,
                r.report.small_lesion_f1
            ));
        }
        out
    }
}

/// Run worker closures with at most `STYLESEG_THREADS` threads (default:
/// available parallelism), returning results in submission order.
pub fn parallel_map<T, F>(jobs: Vec<F>) -> Vec<T>
where
    T: Send,
    F: FnOnce() -> T + Send,
{
    let cap = std::env::var("STYLESEG_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| {
            std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1)
        });
    let workers = cap.min(jobs.len()).max(1);
    if workers == 1 {
        return jobs.into_iter().map(|f| f()).collect();
    }
    let mut slots: Vec<Option<T>> = jobs.iter().map(|_| None).collect();
    let queue: Vec<std::sync::Mutex<Option<F>>> =
        jobs.into_iter().map(|f| std::sync::Mutex::new(Some(f))).collect();
    let next = std::sync::atomic::AtomicUsize::new(0);
    let slot_refs: Vec<std::sync::Mutex<&mut Option<T>>> =
        slots.iter_mut().map(std::sync::Mutex::new).collect();
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                if i >= queue.len() {
                    break;
                }
                let job = queue[i].lock().unwrap().take().unwrap();
                let result = job();
                **slot_refs[i].lock().unwrap() = Some(result);
            });
        }
    });
    drop(slot_refs);
    slots.into_iter().map(|s| s.unwrap()).collect()
}

/// A generated cohort plus its split.
pub struct CohortData {
    pub spec: CohortSpec,
    pub samples: Vec<Sample>,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl CohortData {
    pub fn prepare(spec: CohortSpec, split_seed: u64) -> Result<Self> {
        let samples = generate_cohort(&spec)?;
        let split = data::split(&samples, (0.6, 0.2, 0.2), split_seed)?;
        Ok(CohortData {
            spec,
            samples,
            train: split.train,
            val: split.val,
            test: split.test,
        })
    }

    pub fn refs(&self, indices: &[usize]) -> Vec<&Sample> {
        indices.iter().map(|&i| &self.samples[i]).collect()
    }
}

fn pooled<'a>(cohorts: &'a [&CohortData], pick: impl Fn(&'a CohortData) -> &'a [usize]) -> Vec<&'a Sample> {
    let mut out = Vec::new();
    for c in cohorts {
        out.extend(pick(c).iter().map(|&i| &c.samples[i]));
    }
    out
}

fn train_model(
    mode: ConditioningMode,
    cohorts: &[&CohortData],
    params: &RecipeParams,
    seed_salt: u64,
) -> Result<(Model, History)> {
    let sources: Vec<String> = cohorts.iter().map(|c| c.spec.source.clone()).collect();
    let config = ModelConfig::new(mode, params.seed ^ seed_salt);
    let mut model = Model::build(config, &sources)?;
    let train_set = pooled(cohorts, |c| &c.train);
    let val_set = pooled(cohorts, |c| &c.val);
    let history = train::train(&mut model, &train_set, &val_set, &params.train_config(seed_salt))?;
    Ok((model, history))
}

/// Evaluate one model on one cohort under an optional conditioning style,
/// with the threshold chosen on that cohort's validation split under the
/// same style.
fn eval_cell(
    model: &Model,
    cohort: &CohortData,
    style: Option<&str>,
    batch: usize,
) -> Result<MetricReport> {
    let val = cohort.refs(&cohort.val);
    let scores = predict_scores(model, &val, style, batch)?;
    let mut pool_scores = Vec::new();
    let mut pool_labels = Vec::new();
    for (s, sc) in val.iter().zip(&scores) {
        pool_scores.extend_from_slice(sc);
        pool_labels.extend(s.label.bits().iter().copied());
    }
    let threshold = select_threshold(&pool_scores, &pool_labels);
    Ok(score_cohort(
        model,
        &cohort.refs(&cohort.test),
        style,
        threshold.value,
        batch,
    )?)
}

fn write_outputs(
    out_dir: &Path,
    recipe: &str,
    params: &RecipeParams,
    output: &RecipeOutput,
    histories: &[(String, &History)],
) -> Result<()> {
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let csv_path = out_dir.join("results.csv");
    fs::write(&csv_path, output.to_csv()).map_err(io_err(&csv_path))?;
    let json_path = out_dir.join("results.json");
    let json = serde_json::to_string_pretty(&output).expect("rows serialize");
    fs::write(&json_path, json + "\n").map_err(io_err(&json_path))?;
    for (name, history) in histories {
        let path = out_dir.join(format!("history_{name}.csv"));
        fs::write(&path, history.to_csv()).map_err(io_err(&path))?;
    }
    let manifest = RunManifest {
        schema_version: 1,
        recipe: recipe.to_string(),
        params: params.clone(),
    };
    let path = out_dir.join("run_manifest.toml");
    fs::write(&path, toml::to_string_pretty(&manifest).expect("manifest serializes"))
        .map_err(io_err(&path))?;
    Ok(())
}

/// Echo of everything needed to reproduce a run.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub schema_version: u32,
    pub recipe: String,
    pub params: RecipeParams,
}

// ---------------------------------------------------------------------
// trial-cond: two cohorts sharing base truths, styled identity vs
// boundary-grow; single-trial baselines, naive pooling, per-source
// conditioning with the full style-by-cohort matrix.
// ---------------------------------------------------------------------

/// Cohort pair with identical images/base truths and different styles.
fn shared_truth_pair(params: &RecipeParams) -> (CohortSpec, CohortSpec) {
    let base = CohortSpec {
        height: params.image_size,
        width: params.image_size,
        lesion_count: (2, 6),
        lesion_radius: (1.5, 5.0),
        ..CohortSpec::new("orig", params.samples_per_cohort, StyleTransform::Identity, params.seed ^ 0xA11CE)
    };
    let grown = CohortSpec {
        source: "grown".into(),
        style: StyleTransform::BoundaryGrow { radius: 1 },
        ..base.clone()
    };
    (base, grown)
}

pub fn run_trial_cond(params: &RecipeParams, out_dir: &Path) -> Result<RecipeOutput> {
    let (spec_a, spec_b) = shared_truth_pair(params);
    let a = CohortData::prepare(spec_a, params.seed ^ 1)?;
    let b = CohortData::prepare(spec_b, params.seed ^ 2)?;

    let jobs: Vec<Box<dyn FnOnce() -> Result<(Model, History)> + Send>> = vec![
        Box::new(|| train_model(ConditioningMode::Naive, &[&a], params, 0x51)),
        Box::new(|| train_model(ConditioningMode::Naive, &[&b], params, 0x52)),
        Box::new(|| train_model(ConditioningMode::Naive, &[&a, &b], params, 0x53)),
        Box::new(|| train_model(ConditioningMode::PerSource, &[&a, &b], params, 0x54)),
    ];
    let mut results = parallel_map(jobs).into_iter().collect::<Result<Vec<_>>>()?;
    let (cond_model, cond_hist) = results.pop().unwrap();
    let (naive_model, naive_hist) = results.pop().unwrap();
    let (single_b, single_b_hist) = results.pop().unwrap();
    let (single_a, single_a_hist) = results.pop().unwrap();

    let mut output = RecipeOutput {
        recipe: "trial-cond".into(),
        ..Default::default()
    };
    let batch = params.batch_size;
    for cohort in [&a, &b] {
        let name = &cohort.spec.source;
        output.rows.push(ResultRow {
            model: "single-trial-orig".into(),
            conditioned_on: "-".into(),
            cohort: name.clone(),
            report: eval_cell(&single_a, cohort, Some("orig"), batch)?,
        });
        output.rows.push(ResultRow {
            model: "single-trial-grown".into(),
            conditioned_on: "-".into(),
            cohort: name.clone(),
            report: eval_cell(&single_b, cohort, Some("grown"), batch)?,
        });
        output.rows.push(ResultRow {
            model: "naive-pooled".into(),
            conditioned_on: "-".into(),
            cohort: name.clone(),
            report: eval_cell(&naive_model, cohort, Some(name), batch)?,
        });
        for style in ["orig", "grown"] {
            output.rows.push(ResultRow {
                model: "conditioned".into(),
                conditioned_on: style.into(),
                cohort: name.clone(),
                report: eval_cell(&cond_model, cohort, Some(style), batch)?,
            });
        }
    }

    cond_model.save_checkpoint(&out_dir.join("checkpoint_conditioned"))?;
    if let Some(bank) = cond_model.export_bank() {
        analysis::save_bank(&out_dir.join("bank_conditioned"), &bank)?;
    }
    write_outputs(
        out_dir,
        "trial-cond",
        params,
        &output,
        &[
            ("single_trial_orig".into(), &single_a_hist),
            ("single_trial_grown".into(), &single_b_hist),
            ("naive_pooled".into(), &naive_hist),
            ("conditioned".into(), &cond_hist),
        ],
    )?;
    Ok(output)
}

// ---------------------------------------------------------------------
// analyze: four cohorts, two planted style subgroups; per-source training
// followed by the similarity analysis and group discovery.
// ---------------------------------------------------------------------

fn planted_group_specs(params: &RecipeParams) -> Vec<CohortSpec> {
    let style_of = |i: usize| {
        if i < 2 {
            StyleTransform::Identity
        } else {
            StyleTransform::BoundaryGrow { radius: 1 }
        }
    };
    (0..4)
        .map(|i| CohortSpec {
            height: params.image_size,
            width: params.image_size,
            lesion_count: (2, 6),
            lesion_radius: (1.5, 5.0),
            ..CohortSpec::new(
                ["an1", "an2", "an3", "an4"][i],
                params.samples_per_cohort,
                style_of(i),
                params.seed ^ (0xD0 + i as u64),
            )
        })
        .collect()
}

pub struct AnalyzeArtifacts {
    pub output: RecipeOutput,
    pub model: Model,
    pub cohorts: Vec<CohortData>,
    pub history: History,
}

pub fn run_analyze_internal(params: &RecipeParams, out_dir: &Path) -> Result<AnalyzeArtifacts> {
    let specs = planted_group_specs(params);
    let mut cohorts = Vec::new();
    for (i, spec) in specs.into_iter().enumerate() {
        cohorts.push(CohortData::prepare(spec, params.seed ^ (0xE0 + i as u64))?);
    }
    let refs: Vec<&CohortData> = cohorts.iter().collect();
    let (model, history) = train_model(ConditioningMode::PerSource, &refs, params, 0x61)?;

    let bank = model.export_bank().expect("per-source model has a bank");
    let (report, norms) = analysis::build_report(&bank)?;
    let partition = discover_groups(&report, 0.5)?;
    analysis::save_bank(&out_dir.join("bank"), &bank)?;
    analysis::export(&report, &norms, Some(&partition), &out_dir.join("analysis"))?;
    model.save_checkpoint(&out_dir.join("checkpoint"))?;

    // results.csv: one row per source pair with summary similarities
    let mut output = RecipeOutput {
        recipe: "analyze".into(),
        ..Default::default()
    };
    let mut csv = String::from("source_a,source_b,scale_sim,shift_sim,distance\n");
    for (p, (i, j)) in report.pairs().into_iter().enumerate() {
        let s = &report.summary[p];
        let defined: Vec<f64> = [s.scale, s.shift].iter().flatten().copied().collect();
        let dist = if defined.is_empty() {
            String::new()
        } else {
            (1.0 - defined.iter().sum::<f64>() / defined.len() as f64).to_string()
        };
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            report.sources[i],
            report.sources[j],
            s.scale.map(|v| v.to_string()).unwrap_or_default(),
            s.shift.map(|v| v.to_string()).unwrap_or_default(),
            dist
        ));
    }
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let path = out_dir.join("results.csv");
    fs::write(&path, csv).map_err(io_err(&path))?;
    let manifest = RunManifest {
        schema_version: 1,
        recipe: "analyze".into(),
        params: params.clone(),
    };
    let path = out_dir.join("run_manifest.toml");
    fs::write(&path, toml::to_string_pretty(&manifest).expect("manifest serializes"))
        .map_err(io_err(&path))?;
    let path = out_dir.join("history_conditioned.csv");
    fs::write(&path, history.to_csv()).map_err(io_err(&path))?;

    output.report = Some(report);
    output.partition = Some(partition);
    Ok(AnalyzeArtifacts {
        output,
        model,
        cohorts,
        history,
    })
}

pub fn run_analyze(params: &RecipeParams, out_dir: &Path) -> Result<RecipeOutput> {
    Ok(run_analyze_internal(params, out_dir)?.output)
}

// ---------------------------------------------------------------------
// group-cond: reuse the discovered partition to train group-pooled and
// group-conditioned models.
// ---------------------------------------------------------------------

pub fn run_group_cond(params: &RecipeParams, out_dir: &Path) -> Result<RecipeOutput> {
    let analyzed = run_analyze_internal(params, &out_dir.join("discovery"))?;
    let partition = analyzed.output.partition.clone().expect("analyze sets partition");
    let cohorts = analyzed.cohorts;
    let refs: Vec<&CohortData> = cohorts.iter().collect();

    // one pooled model per discovered group, one naive over everything,
    // one group-conditioned model over the partition
    let mut jobs: Vec<Box<dyn FnOnce() -> Result<(Model, History)> + Send>> = Vec::new();
    for (gi, group) in partition.groups.iter().enumerate() {
        let members: Vec<&CohortData> = refs
            .iter()
            .copied()
            .filter(|c| group.contains(&c.spec.source))
            .collect();
        jobs.push(Box::new(move || {
            train_model(ConditioningMode::Naive, &members, params, 0x70 + gi as u64)
        }));
    }
    {
        let all = refs.clone();
        jobs.push(Box::new(move || {
            train_model(ConditioningMode::Naive, &all, params, 0x7E)
        }));
    }
    {
        let all = refs.clone();
        let groups = partition.groups.clone();
        jobs.push(Box::new(move || {
            train_model(ConditioningMode::Grouped { groups }, &all, params, 0x7F)
        }));
    }
    let mut trained = parallel_map(jobs).into_iter().collect::<Result<Vec<_>>>()?;
    let (grouped_model, grouped_hist) = trained.pop().unwrap();
    let (naive_model, naive_hist) = trained.pop().unwrap();
    let group_pooled = trained; // one per group, in partition order

    let mut output = RecipeOutput {
        recipe: "group-cond".into(),
        ..Default::default()
    };
    let batch = params.batch_size;
    let group_name = |g: &[String]| g.join("+");
    for cohort in &cohorts {
        let name = &cohort.spec.source;
        for (gi, group) in partition.groups.iter().enumerate() {
            output.rows.push(ResultRow {
                model: format!("group-pooled-{}", group_name(group)),
                conditioned_on: "-".into(),
                cohort: name.clone(),
                report: eval_cell(&group_pooled[gi].0, cohort, Some(&group[0]), batch)?,
            });
        }
        output.rows.push(ResultRow {
            model: "naive-pooled".into(),
            conditioned_on: "-".into(),
            cohort: name.clone(),
            report: eval_cell(&naive_model, cohort, Some(name), batch)?,
        });
        output.rows.push(ResultRow {
            model: "trial-conditioned".into(),
            conditioned_on: name.clone(),
            cohort: name.clone(),
            report: eval_cell(&analyzed.model, cohort, Some(name), batch)?,
        });
        output.rows.push(ResultRow {
            model: "group-conditioned".into(),
            conditioned_on: name.clone(),
            cohort: name.clone(),
            report: eval_cell(&grouped_model, cohort, Some(name), batch)?,
        });
    }
    output.partition = Some(partition);
    output.report = analyzed.output.report.clone();

    let mut histories: Vec<(String, &History)> = vec![
        ("naive_pooled".into(), &naive_hist),
        ("group_conditioned".into(), &grouped_hist),
        ("trial_conditioned".into(), &analyzed.history),
    ];
    for (gi, (_, h)) in group_pooled.iter().enumerate() {
        histories.push((format!("group_pooled_{gi}"), h));
    }
    grouped_model.save_checkpoint(&out_dir.join("checkpoint_group_conditioned"))?;
    write_outputs(out_dir, "group-cond", params, &output, &histories)?;
    Ok(output)
}

// ---------------------------------------------------------------------
// msl: one cohort labeled faithfully, a disjoint cohort with small
// lesions erased; the five-row table on the faithful test set.
// ---------------------------------------------------------------------

pub fn run_msl(params: &RecipeParams, out_dir: &Path) -> Result<RecipeOutput> {
    // more, smaller lesions so the small-lesion metric has support
    let base = CohortSpec {
        height: params.image_size,
        width: params.image_size,
        lesion_count: (3, 8),
        lesion_radius: (1.0, 4.0),
        ..CohortSpec::new("morig", params.samples_per_cohort, StyleTransform::Identity, params.seed ^ 0xB0)
    };
    let msl_spec = CohortSpec {
        source: "mmsl".into(),
        style: StyleTransform::RemoveSmall { max_size: 10 },
        seed: params.seed ^ 0xB1,
        ..base.clone()
    };
    let orig = CohortData::prepare(base, params.seed ^ 3)?;
    let msl = CohortData::prepare(msl_spec, params.seed ^ 4)?;

    let jobs: Vec<Box<dyn FnOnce() -> Result<(Model, History)> + Send>> = vec![
        Box::new(|| train_model(ConditioningMode::Naive, &[&orig], params, 0x81)),
        Box::new(|| train_model(ConditioningMode::Naive, &[&msl], params, 0x82)),
        Box::new(|| train_model(ConditioningMode::Naive, &[&orig, &msl], params, 0x83)),
        Box::new(|| train_model(ConditioningMode::PerSource, &[&orig, &msl], params, 0x84)),
    ];
    let mut trained = parallel_map(jobs).into_iter().collect::<Result<Vec<_>>>()?;
    let (cond, cond_hist) = trained.pop().unwrap();
    let (naive, naive_hist) = trained.pop().unwrap();
    let (single_msl, single_msl_hist) = trained.pop().unwrap();
    let (single_orig, single_orig_hist) = trained.pop().unwrap();

    // the five-row layout, all on the faithful (morig) test set
    let batch = params.batch_size;
    let output = RecipeOutput {
        recipe: "msl".into(),
        rows: vec![
            ResultRow {
                model: "single-trial-orig".into(),
                conditioned_on: "-".into(),
                cohort: "morig".into(),
                report: eval_cell(&single_orig, &orig, Some("morig"), batch)?,
            },
            ResultRow {
                model: "single-trial-msl".into(),
                conditioned_on: "-".into(),
                cohort: "morig".into(),
                report: eval_cell(&single_msl, &orig, Some("mmsl"), batch)?,
            },
            ResultRow {
                model: "naive-pooled".into(),
                conditioned_on: "-".into(),
                cohort: "morig".into(),
                report: eval_cell(&naive, &orig, Some("morig"), batch)?,
            },
            ResultRow {
                model: "conditioned".into(),
                conditioned_on: "morig".into(),
                cohort: "morig".into(),
                report: eval_cell(&cond, &orig, Some("morig"), batch)?,
            },
            ResultRow {
                model: "conditioned".into(),
                conditioned_on: "mmsl".into(),
                cohort: "morig".into(),
                report: eval_cell(&cond, &orig, Some("mmsl"), batch)?,
            },
        ],
        ..Default::default()
    };

    cond.save_checkpoint(&out_dir.join("checkpoint_conditioned"))?;
    write_outputs(
        out_dir,
        "msl",
        params,
        &output,
        &[
            ("single_trial_orig".into(), &single_orig_hist),
            ("single_trial_msl".into(), &single_msl_hist),
            ("naive_pooled".into(), &naive_hist),
            ("conditioned".into(), &cond_hist),
        ],
    )?;
    Ok(output)
}

// ---------------------------------------------------------------------
// finetune10: adapt trained models to a new annotation style with ten
// labeled samples, affine parameters only.
// ---------------------------------------------------------------------

pub const FINETUNE_SAMPLES: usize = 10;

pub struct FinetuneArtifacts {
    pub output: RecipeOutput,
    pub base_checkpoint: PathBuf,
    pub finetuned_checkpoint: PathBuf,
}

pub fn run_finetune10_internal(params: &RecipeParams, out_dir: &Path) -> Result<FinetuneArtifacts> {
    let mk = |source: &str, style: StyleTransform, salt: u64| CohortSpec {
        height: params.image_size,
        width: params.image_size,
        lesion_count: (2, 6),
        lesion_radius: (1.5, 5.0),
        ..CohortSpec::new(source, params.samples_per_cohort, style, params.seed ^ salt)
    };
    let a = CohortData::prepare(mk("fa", StyleTransform::Identity, 0xC0), params.seed ^ 5)?;
    let b = CohortData::prepare(
        mk("fb", StyleTransform::BoundaryGrow { radius: 1 }, 0xC1),
        params.seed ^ 6,
    )?;
    // the held-out cohort: a style neither base source carries
    let mut new_spec = mk("fnew", StyleTransform::BoundaryGrow { radius: 2 }, 0xC2);
    new_spec.n_samples = FINETUNE_SAMPLES + 2 * (params.samples_per_cohort / 4).max(4);
    let new_samples = generate_cohort(&new_spec)?;
    // few-shot split: 10 train, half of the rest val, the rest test
    let mut order: Vec<usize> = (0..new_samples.len()).collect();
    crate::rng::Rng::new(params.seed ^ 0xC3).split("fewshot").shuffle(&mut order);
    let ft_train: Vec<usize> = order[..FINETUNE_SAMPLES].to_vec();
    let rest = &order[FINETUNE_SAMPLES..];
    let ft_val: Vec<usize> = rest[..rest.len() / 2].to_vec();
    let ft_test: Vec<usize> = rest[rest.len() / 2..].to_vec();
    let new_cohort = CohortData {
        spec: new_spec,
        samples: new_samples,
        train: ft_train,
        val: ft_val,
        test: ft_test,
    };

    let jobs: Vec<Box<dyn FnOnce() -> Result<(Model, History)> + Send>> = vec![
        Box::new(|| train_model(ConditioningMode::Naive, &[&a, &b], params, 0x91)),
        Box::new(|| train_model(ConditioningMode::PerSource, &[&a, &b], params, 0x92)),
    ];
    let mut trained = parallel_map(jobs).into_iter().collect::<Result<Vec<_>>>()?;
    let (cond_base, cond_hist) = trained.pop().unwrap();
    let (naive_base, naive_hist) = trained.pop().unwrap();

    let base_checkpoint = out_dir.join("checkpoint_base_conditioned");
    cond_base.save_checkpoint(&base_checkpoint)?;
    naive_base.save_checkpoint(&out_dir.join("checkpoint_base_naive"))?;

    let ft_config = |salt: u64| FinetuneConfig {
        source: "fnew".into(),
        init_from: None,
        train: TrainConfig {
            epochs: params.finetune_epochs,
            milestones: vec![params.finetune_epochs / 2, (params.finetune_epochs * 3) / 4],
            batch_size: params.batch_size.min(FINETUNE_SAMPLES),
            ..params.train_config(salt)
        },
    };
    let ft_train_refs = new_cohort.refs(&new_cohort.train);
    let ft_val_refs = new_cohort.refs(&new_cohort.val);

    let mut naive_ft = Model::load_checkpoint(&out_dir.join("checkpoint_base_naive"))?;
    let naive_ft_hist = finetune(&mut naive_ft, &ft_train_refs, &ft_val_refs, &ft_config(0x93))?;
    let mut cond_ft = Model::load_checkpoint(&base_checkpoint)?;
    let cond_ft_hist = finetune(&mut cond_ft, &ft_train_refs, &ft_val_refs, &ft_config(0x94))?;

    let finetuned_checkpoint = out_dir.join("checkpoint_finetuned");
    cond_ft.save_checkpoint(&finetuned_checkpoint)?;

    let batch = params.batch_size;
    let output = RecipeOutput {
        recipe: "finetune10".into(),
        rows: vec![
            ResultRow {
                model: "naive-pooled".into(),
                conditioned_on: "-".into(),
                cohort: "fnew".into(),
                report: eval_cell(&naive_base, &new_cohort, Some("fa"), batch)?,
            },
            ResultRow {
                model: "naive-finetuned".into(),
                conditioned_on: "fnew".into(),
                cohort: "fnew".into(),
                report: eval_cell(&naive_ft, &new_cohort, Some("fnew"), batch)?,
            },
            ResultRow {
                model: "conditioned".into(),
                conditioned_on: "fa".into(),
                cohort: "fnew".into(),
                report: eval_cell(&cond_base, &new_cohort, Some("fa"), batch)?,
            },
            ResultRow {
                model: "conditioned".into(),
                conditioned_on: "fb".into(),
                cohort: "fnew".into(),
                report: eval_cell(&cond_base, &new_cohort, Some("fb"), batch)?,
            },
            ResultRow {
                model: "conditioned-finetuned".into(),
                conditioned_on: "fnew".into(),
                cohort: "fnew".into(),
                report: eval_cell(&cond_ft, &new_cohort, Some("fnew"), batch)?,
            },
        ],
        ..Default::default()
    };

    write_outputs(
        out_dir,
        "finetune10",
        params,
        &output,
        &[
            ("base_naive".into(), &naive_hist),
            ("base_conditioned".into(), &cond_hist),
            ("naive_finetuned".into(), &naive_ft_hist),
            ("conditioned_finetuned".into(), &cond_ft_hist),
        ],
    )?;
    Ok(FinetuneArtifacts {
        output,
        base_checkpoint,
        finetuned_checkpoint,
    })
}

pub fn run_finetune10(params: &RecipeParams, out_dir: &Path) -> Result<RecipeOutput> {
    Ok(run_finetune10_internal(params, out_dir)?.output)
}

// ---------------------------------------------------------------------
// gad-film: a marker in the image flips the annotation style; image
// conditioning vs naive pooling, stratified by marker presence.
// ---------------------------------------------------------------------

pub fn run_gad_film(params: &RecipeParams, out_dir: &Path) -> Result<RecipeOutput> {
    let spec = CohortSpec {
        height: params.image_size,
        width: params.image_size,
        lesion_count: (2, 6),
        lesion_radius: (1.5, 5.0),
        marker_prob: 0.4,
        ..CohortSpec::new(
            "gad",
            2 * params.samples_per_cohort,
            StyleTransform::DilateIfMarker { radius: 2 },
            params.seed ^ 0xF0,
        )
    };
    let cohort = CohortData::prepare(spec, params.seed ^ 8)?;

    let jobs: Vec<Box<dyn FnOnce() -> Result<(Model, History)> + Send>> = vec![
        Box::new(|| train_model(ConditioningMode::Naive, &[&cohort], params, 0xA1)),
        Box::new(|| train_model(ConditioningMode::Image, &[&cohort], params, 0xA2)),
    ];
    let mut trained = parallel_map(jobs).into_iter().collect::<Result<Vec<_>>>()?;
    let (film, film_hist) = trained.pop().unwrap();
    let (naive, naive_hist) = trained.pop().unwrap();

    // stratify val and test by marker presence
    let subset = |indices: &[usize], marker: bool| -> Vec<usize> {
        indices
            .iter()
            .copied()
            .filter(|&i| cohort.samples[i].has_marker == marker)
            .collect()
    };
    let strata = [
        ("gad-marker", true),
        ("gad-clean", false),
    ];

    let mut output = RecipeOutput {
        recipe: "gad-film".into(),
        ..Default::default()
    };
    let batch = params.batch_size;
    for (model_name, model) in [("naive-pooled", &naive), ("image-conditioned", &film)] {
        let style = if model.film().is_some() { None } else { Some("gad") };
        for (stratum_name, marker) in strata {
            let stratum = CohortData {
                spec: cohort.spec.clone(),
                samples: cohort.samples.clone(),
                train: vec![],
                val: subset(&cohort.val, marker),
                test: subset(&cohort.test, marker),
            };
            output.rows.push(ResultRow {
                model: model_name.into(),
                conditioned_on: if style.is_some() { "gad".into() } else { "image".into() },
                cohort: stratum_name.into(),
                report: eval_cell(model, &stratum, style, batch)?,
            });
        }
    }

    film.save_checkpoint(&out_dir.join("checkpoint_image_conditioned"))?;
    write_outputs(
        out_dir,
        "gad-film",
        params,
        &output,
        &[
            ("naive_pooled".into(), &naive_hist),
            ("image_conditioned".into(), &film_hist),
        ],
    )?;
    Ok(output)
}

/// Dispatch by recipe name (the `recipe` CLI subcommand surface).
pub fn run_recipe(name: &str, params: &RecipeParams, out_dir: &Path) -> Result<RecipeOutput> {
    match name {
        "trial-cond" => run_trial_cond(params, out_dir),
        "group-cond" => run_group_cond(params, out_dir),
        "msl" => run_msl(params, out_dir),
        "finetune10" => run_finetune10(params, out_dir),
        "gad-film" => run_gad_film(params, out_dir),
        "analyze" => run_analyze(params, out_dir),
        other => Err(RecipeError::UnknownRecipe(other.to_string())),
    }
}

/// Every recipe name `run_recipe` accepts.
pub const RECIPE_NAMES: [&str; 6] = [
    "trial-cond",
    "group-cond",
    "msl",
    "finetune10",
    "gad-film",
    "analyze",
];
