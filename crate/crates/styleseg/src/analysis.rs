//! Subgroup discovery from learned normalization parameters: per-layer
//! cosine similarities between sources (scale vectors with the origin
//! moved to their initialization point, shift vectors raw), Euclidean-norm
//! tables, agglomerative grouping, and file export.
//!
//! Scale similarity compares `gamma - 1` because a scale of 1 means "no
//! effect": the subtraction puts the analysis origin at the initialization
//! point, so direction measures what training actually changed. A vector
//! still at its initialization has no direction; its similarities are
//! Undefined rather than zero, which would read as spurious dissimilarity.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{read_container, write_container, CheckpointError};
use crate::conditioning::{ConditionBank, LayerBank, SourceMap};
use crate::Tensor;

/// Shifted vectors below this norm have no direction: their cosine is
/// Undefined.
pub const NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("vector length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("{0}")]
    Contract(String),
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Container(#[from] CheckpointError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> AnalysisError + '_ {
    move |source| AnalysisError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    let (na, nb) = (na.sqrt(), nb.sqrt());
    if na < NORM_FLOOR || nb < NORM_FLOOR {
        return None;
    }
    Some((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Cosine similarity of scale vectors about the initialization origin:
/// `cos(gamma_a - 1, gamma_b - 1)`. `None` when either shifted vector has
/// norm below [`NORM_FLOOR`].
pub fn scale_cosine(gamma_a: &[f64], gamma_b: &[f64]) -> Result<Option<f64>, AnalysisError> {
    if gamma_a.len() != gamma_b.len() {
        return Err(AnalysisError::LengthMismatch(gamma_a.len(), gamma_b.len()));
    }
    let a: Vec<f64> = gamma_a.iter().map(|v| v - 1.0).collect();
    let b: Vec<f64> = gamma_b.iter().map(|v| v - 1.0).collect();
    Ok(cosine(&a, &b))
}

/// Cosine similarity of raw shift vectors.
pub fn shift_cosine(beta_a: &[f64], beta_b: &[f64]) -> Result<Option<f64>, AnalysisError> {
    if beta_a.len() != beta_b.len() {
        return Err(AnalysisError::LengthMismatch(beta_a.len(), beta_b.len()));
    }
    Ok(cosine(beta_a, beta_b))
}

/// Similarities of one layer over all unordered source pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSimilarity {
    /// Indexed by [`SimilarityReport::pair_index`].
    pub scale: Vec<Option<f64>>,
    pub shift: Vec<Option<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairSummary {
    pub scale: Option<f64>,
    pub shift: Option<f64>,
}

/// Per-layer pairwise cosine similarities plus their per-pair means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityReport {
    /// Sorted source names; pair indices refer to this order.
    pub sources: Vec<String>,
    pub layers: Vec<LayerSimilarity>,
    /// Mean over layers of the defined entries, per pair (scale and shift
    /// averaged separately).
    pub summary: Vec<PairSummary>,
}

impl SimilarityReport {
    pub fn pair_count(&self) -> usize {
        self.sources.len() * (self.sources.len() - 1) / 2
    }

    /// Index of the unordered pair (i, j), i != j, in pair-major order.
    pub fn pair_index(&self, i: usize, j: usize) -> usize {
        let (lo, hi) = if i < j { (i, j) } else { (j, i) };
        // pairs (0,1), (0,2), ..., (0,n-1), (1,2), ...
        let n = self.sources.len();
        lo * n - lo * (lo + 1) / 2 + (hi - lo - 1)
    }

    /// Symmetric accessor with unit diagonal (where defined).
    pub fn scale_sim(&self, layer: usize, a: usize, b: usize) -> Option<f64> {
        if a == b {
            // diagonal: defined iff the vector has direction, and then 1
            return self.layers[layer].scale[self.pair_index(a, (a + 1) % self.sources.len())]
                .map(|_| 1.0);
        }
        self.layers[layer].scale[self.pair_index(a, b)]
    }

    pub fn pairs(&self) -> Vec<(usize, usize)> {
        let n = self.sources.len();
        let mut out = Vec::with_capacity(n * (n - 1) / 2);
        for i in 0..n {
            for j in i + 1..n {
                out.push((i, j));
            }
        }
        out
    }
}

/// Per-layer, per-source Euclidean norms: `|gamma - 1|`, `|beta|`, and the
/// raw `|gamma|` as an auxiliary column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormTable {
    pub sources: Vec<String>,
    /// `rows[layer][source_index] = (scale_shifted, shift, scale_raw)`.
    pub rows: Vec<Vec<(f64, f64, f64)>>,
}

/// Disjoint source groups covering every source, with the merge trace
/// that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupPartition {
    pub groups: Vec<Vec<String>>,
    pub linkage: Vec<MergeStep>,
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeStep {
    pub left: Vec<String>,
    pub right: Vec<String>,
    pub distance: f64,
}

/// Compute the full report and norm table from an exported bank.
///
/// A bank with a single parameter set yields a report with an empty pair
/// set rather than an error.
pub fn build_report(bank: &ConditionBank) -> Result<(SimilarityReport, NormTable), AnalysisError> {
    bank.validate()
        .map_err(|e| AnalysisError::Contract(e.to_string()))?;
    // analysis runs over parameter sets; name each set by the sources that
    // share it (sorted, joined) so grouped banks stay readable
    let mut set_names: BTreeMap<usize, Vec<String>> = BTreeMap::new();
    for (source, &set) in bank.source_map.mapping() {
        set_names.entry(set).or_default().push(source.clone());
    }
    let sources: Vec<String> = set_names
        .values()
        .map(|names| names.join("+"))
        .collect();
    let set_order: Vec<usize> = set_names.keys().copied().collect();

    let n = sources.len();
    let mut layers = Vec::with_capacity(bank.layers.len());
    let mut norm_rows = Vec::with_capacity(bank.layers.len());
    for layer in &bank.layers {
        let mut scale = Vec::new();
        let mut shift = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                let (si, sj) = (set_order[i], set_order[j]);
                scale.push(scale_cosine(&layer.gamma[si], &layer.gamma[sj])?);
                shift.push(shift_cosine(&layer.beta[si], &layer.beta[sj])?);
            }
        }
        layers.push(LayerSimilarity { scale, shift });
        norm_rows.push(
            set_order
                .iter()
                .map(|&s| {
                    let shifted: f64 = layer.gamma[s].iter().map(|v| (v - 1.0) * (v - 1.0)).sum();
                    let raw: f64 = layer.gamma[s].iter().map(|v| v * v).sum();
                    let beta: f64 = layer.beta[s].iter().map(|v| v * v).sum();
                    (shifted.sqrt(), beta.sqrt(), raw.sqrt())
                })
                .collect(),
        );
    }

    let pair_count = n * (n - 1) / 2;
    let mut summary = Vec::with_capacity(pair_count);
    for p in 0..pair_count {
        let mean_of = |pick: &dyn Fn(&LayerSimilarity) -> Option<f64>| {
            let defined: Vec<f64> = layers.iter().filter_map(pick).collect();
            if defined.is_empty() {
                None
            } else {
                Some(defined.iter().sum::<f64>() / defined.len() as f64)
            }
        };
        summary.push(PairSummary {
            scale: mean_of(&|l: &LayerSimilarity| l.scale[p]),
            shift: mean_of(&|l: &LayerSimilarity| l.shift[p]),
        });
    }

    Ok((
        SimilarityReport {
            sources: sources.clone(),
            layers,
            summary,
        },
        NormTable {
            sources,
            rows: norm_rows,
        },
    ))
}

/// Average-linkage agglomerative clustering on `d = 1 - mean(scale_sim,
/// shift_sim)`, cutting when the smallest cluster distance exceeds
/// `1 - threshold`. Ties break toward the lexicographically smallest
/// member pair, so the partition is deterministic.
pub fn discover_groups(
    report: &SimilarityReport,
    threshold: f64,
) -> Result<GroupPartition, AnalysisError> {
    let n = report.sources.len();
    if n < 2 {
        return Err(AnalysisError::Contract(
            "need at least 2 sources to group".into(),
        ));
    }
    if report.summary.iter().all(|s| s.scale.is_none() && s.shift.is_none()) {
        return Err(AnalysisError::Contract(
            "every summary similarity is undefined; train the bank before grouping".into(),
        ));
    }
    // pairwise distances between single sources
    let mut dist = vec![f64::INFINITY; report.summary.len()];
    for (p, s) in report.summary.iter().enumerate() {
        let defined: Vec<f64> = [s.scale, s.shift].iter().flatten().copied().collect();
        if !defined.is_empty() {
            dist[p] = 1.0 - defined.iter().sum::<f64>() / defined.len() as f64;
        }
    }

    let mut clusters: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
    let mut linkage = Vec::new();
    let cut = 1.0 - threshold;
    loop {
        // smallest average-linkage distance among current clusters
        let mut best: Option<(f64, usize, usize)> = None;
        for a in 0..clusters.len() {
            for b in a + 1..clusters.len() {
                let mut sum = 0.0;
                let mut count = 0usize;
                for &i in &clusters[a] {
                    for &j in &clusters[b] {
                        sum += dist[report.pair_index(i, j)];
                        count += 1;
                    }
                }
                let d = sum / count as f64;
                let candidate_key = (
                    clusters[a].iter().min().copied(),
                    clusters[b].iter().min().copied(),
                );
                let better = match best {
                    None => true,
                    Some((bd, ba, bb)) => {
                        d < bd
                            || (d == bd && {
                                let best_key = (
                                    clusters[ba].iter().min().copied(),
                                    clusters[bb].iter().min().copied(),
                                );
                                candidate_key < best_key
                            })
                    }
                };
                if better {
                    best = Some((d, a, b));
                }
            }
        }
        match best {
            Some((d, a, b)) if d <= cut => {
                let right = clusters.remove(b);
                let left = clusters.remove(a);
                linkage.push(MergeStep {
                    left: left.iter().map(|&i| report.sources[i].clone()).collect(),
                    right: right.iter().map(|&i| report.sources[i].clone()).collect(),
                    distance: d,
                });
                let mut merged = left;
                merged.extend(right);
                merged.sort_unstable();
                clusters.push(merged);
            }
            _ => break,
        }
    }

    let mut groups: Vec<Vec<String>> = clusters
        .into_iter()
        .map(|c| {
            let mut names: Vec<String> = c.iter().map(|&i| report.sources[i].clone()).collect();
            names.sort();
            names
        })
        .collect();
    groups.sort();
    Ok(GroupPartition {
        groups,
        linkage,
        threshold,
    })
}

/// Write similarity.csv, norms.csv, groups.json, one scatter SVG per
/// layer, and the pairwise similarity strip chart. Deterministic output:
/// re-export produces byte-identical files.
pub fn export(
    report: &SimilarityReport,
    norms: &NormTable,
    partition: Option<&GroupPartition>,
    out_dir: &Path,
) -> Result<(), AnalysisError> {
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;

    let mut sim_csv = String::from("layer,source_a,source_b,scale_sim,shift_sim\n");
    for (l, layer) in report.layers.iter().enumerate() {
        for (p, (i, j)) in report.pairs().into_iter().enumerate() {
            let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
            sim_csv.push_str(&format!(
                "{},{},{},{},{}\n",
                l + 1,
                report.sources[i],
                report.sources[j],
                fmt(layer.scale[p]),
                fmt(layer.shift[p]),
            ));
        }
    }
    let path = out_dir.join("similarity.csv");
    fs::write(&path, sim_csv).map_err(io_err(&path))?;

    let mut norm_csv = String::from("layer,source,scale_shifted_norm,shift_norm,scale_raw_norm\n");
    for (l, row) in norms.rows.iter().enumerate() {
        for (s, &(shifted, beta, raw)) in row.iter().enumerate() {
            norm_csv.push_str(&format!(
                "{},{},{},{},{}\n",
                l + 1,
                norms.sources[s],
                shifted,
                beta,
                raw
            ));
        }
    }
    let path = out_dir.join("norms.csv");
    fs::write(&path, norm_csv).map_err(io_err(&path))?;

    if let Some(partition) = partition {
        let path = out_dir.join("groups.json");
        let json = serde_json::to_string_pretty(partition)
            .map_err(|e| AnalysisError::Contract(format!("groups serialization: {e}")))?;
        fs::write(&path, json + "\n").map_err(io_err(&path))?;
    }

    for (l, row) in norms.rows.iter().enumerate() {
        let path = out_dir.join(format!("norms_layer_{:02}.svg", l + 1));
        fs::write(&path, norm_scatter_svg(&norms.sources, row, l + 1)).map_err(io_err(&path))?;
    }
    let path = out_dir.join("similarity_strip.svg");
    fs::write(&path, strip_chart_svg(report)).map_err(io_err(&path))?;
    Ok(())
}

/// Rebuild per-pair summary means from an exported similarity.csv.
pub fn summary_from_csv(csv: &str) -> Result<BTreeMap<(String, String), PairSummary>, AnalysisError> {
    let mut acc: BTreeMap<(String, String), (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for (ln, line) in csv.lines().enumerate().skip(1) {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(AnalysisError::Contract(format!(
                "similarity.csv line {}: expected 5 fields",
                ln + 1
            )));
        }
        let key = (fields[1].to_string(), fields[2].to_string());
        let entry = acc.entry(key).or_default();
        if !fields[3].is_empty() {
            entry.0.push(fields[3].parse().map_err(|_| {
                AnalysisError::Contract(format!("bad scale_sim on line {}", ln + 1))
            })?);
        }
        if !fields[4].is_empty() {
            entry.1.push(fields[4].parse().map_err(|_| {
                AnalysisError::Contract(format!("bad shift_sim on line {}", ln + 1))
            })?);
        }
    }
    Ok(acc
        .into_iter()
        .map(|(k, (scales, shifts))| {
            let mean = |v: &[f64]| {
                if v.is_empty() {
                    None
                } else {
                    Some(v.iter().sum::<f64>() / v.len() as f64)
                }
            };
            (
                k,
                PairSummary {
                    scale: mean(&scales),
                    shift: mean(&shifts),
                },
            )
        })
        .collect())
}

fn svg_header(width: usize, height: usize) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" viewBox=\"0 0 {width} {height}\">\n\
         <rect width=\"{width}\" height=\"{height}\" fill=\"white\"/>\n"
    )
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f",
];

/// One layer's `|gamma-1|` vs `|beta|` scatter, one labelled point per
/// source.
fn norm_scatter_svg(sources: &[String], row: &[(f64, f64, f64)], layer: usize) -> String {
    let (w, h, margin) = (420.0, 340.0, 50.0);
    let max_x = row.iter().map(|r| r.0).fold(0.0f64, f64::max).max(1e-9) * 1.15;
    let max_y = row.iter().map(|r| r.1).fold(0.0f64, f64::max).max(1e-9) * 1.15;
    let px = |v: f64| margin + v / max_x * (w - 2.0 * margin);
    let py = |v: f64| h - margin - v / max_y * (h - 2.0 * margin);
    let mut svg = svg_header(w as usize, h as usize);
    svg.push_str(&format!(
        "<text x=\"{:.1}\" y=\"22\" font-size=\"14\" text-anchor=\"middle\">layer {layer}: |scale-1| vs |shift|</text>\n",
        w / 2.0
    ));
    svg.push_str(&format!(
        "<line x1=\"{m:.1}\" y1=\"{b:.1}\" x2=\"{r:.1}\" y2=\"{b:.1}\" stroke=\"black\"/>\n\
         <line x1=\"{m:.1}\" y1=\"{t:.1}\" x2=\"{m:.1}\" y2=\"{b:.1}\" stroke=\"black\"/>\n",
        m = margin,
        b = h - margin,
        r = w - margin,
        t = margin
    ));
    svg.push_str(&format!(
        "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"11\" text-anchor=\"middle\">|scale - 1|</text>\n",
        w / 2.0,
        h - 12.0
    ));
    svg.push_str(&format!(
        "<text x=\"14\" y=\"{:.1}\" font-size=\"11\" text-anchor=\"middle\" transform=\"rotate(-90 14 {:.1})\">|shift|</text>\n",
        h / 2.0,
        h / 2.0
    ));
    for (i, (source, &(sx, sy, _))) in sources.iter().zip(row).enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        svg.push_str(&format!(
            "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"5\" fill=\"{color}\"/>\n\
             <text x=\"{:.2}\" y=\"{:.2}\" font-size=\"11\" fill=\"{color}\">{source}</text>\n",
            px(sx),
            py(sy),
            px(sx) + 7.0,
            py(sy) - 5.0
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

/// Per-pair similarity strip chart: one row per source pair, scale and
/// shift series across layers.
fn strip_chart_svg(report: &SimilarityReport) -> String {
    let pairs = report.pairs();
    let layers = report.layers.len().max(1);
    let (row_h, w, margin) = (80.0, 560.0, 60.0);
    let h = margin * 2.0 + row_h * pairs.len().max(1) as f64;
    let mut svg = svg_header(w as usize, h as usize);
    svg.push_str(&format!(
        "<text x=\"{:.1}\" y=\"22\" font-size=\"14\" text-anchor=\"middle\">pairwise cosine similarity per layer (dot: scale, square: shift)</text>\n",
        w / 2.0
    ));
    let px = |l: usize| margin + l as f64 / (layers - 1).max(1) as f64 * (w - 2.0 * margin);
    for (row, &(i, j)) in pairs.iter().enumerate() {
        let base = margin + row as f64 * row_h;
        let py = |v: f64| base + row_h / 2.0 - v * (row_h / 2.0 - 8.0);
        svg.push_str(&format!(
            "<line x1=\"{:.1}\" y1=\"{:.2}\" x2=\"{:.1}\" y2=\"{:.2}\" stroke=\"#cccccc\"/>\n",
            margin,
            py(0.0),
            w - margin,
            py(0.0)
        ));
        svg.push_str(&format!(
            "<text x=\"6\" y=\"{:.2}\" font-size=\"10\">{} / {}</text>\n",
            base + 12.0,
            report.sources[i],
            report.sources[j]
        ));
        let p = report.pair_index(i, j);
        for (l, layer) in report.layers.iter().enumerate() {
            if let Some(v) = layer.scale[p] {
                svg.push_str(&format!(
                    "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"#1f77b4\"/>\n",
                    px(l),
                    py(v)
                ));
            }
            if let Some(v) = layer.shift[p] {
                svg.push_str(&format!(
                    "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"5\" height=\"5\" fill=\"#d62728\"/>\n",
                    px(l) - 2.5,
                    py(v) - 2.5
                ));
            }
        }
    }
    svg.push_str("</svg>\n");
    svg
}

/// Write a bank into the shared parameter-container format.
pub fn save_bank(dir: &Path, bank: &ConditionBank) -> Result<(), AnalysisError> {
    bank.validate()
        .map_err(|e| AnalysisError::Contract(e.to_string()))?;
    let mut meta = BTreeMap::new();
    meta.insert("kind".to_string(), "condition-bank".to_string());
    meta.insert(
        "source_map".to_string(),
        serde_json::to_string(&bank.source_map).expect("map serializes"),
    );
    meta.insert(
        "widths".to_string(),
        serde_json::to_string(&bank.layer_widths()).expect("widths serialize"),
    );
    let sets = bank.parameter_sets();
    let mut tensors = Vec::new();
    for (l, layer) in bank.layers.iter().enumerate() {
        let c = layer.gamma.first().map_or(0, |g| g.len());
        let mut gamma = Tensor::zeros(&[sets, c]);
        let mut beta = Tensor::zeros(&[sets, c]);
        for s in 0..sets {
            gamma.data_mut()[s * c..(s + 1) * c].copy_from_slice(&layer.gamma[s]);
            beta.data_mut()[s * c..(s + 1) * c].copy_from_slice(&layer.beta[s]);
        }
        tensors.push((format!("scin.{l:02}.gamma"), gamma));
        tensors.push((format!("scin.{l:02}.beta"), beta));
    }
    let refs: Vec<(String, &Tensor)> = tensors.iter().map(|(n, t)| (n.clone(), t)).collect();
    write_container(dir, &meta, &refs)?;
    Ok(())
}

/// Read a bank back from the container format (also the ingestion surface
/// for externally trained banks).
pub fn load_bank(dir: &Path) -> Result<ConditionBank, AnalysisError> {
    let (meta, tensors) = read_container(dir)?;
    let map_json = meta.get("source_map").ok_or_else(|| {
        AnalysisError::Contract(format!("{}: bank missing source_map", dir.display()))
    })?;
    let source_map: SourceMap = serde_json::from_str(map_json)
        .map_err(|e| AnalysisError::Contract(format!("bad bank source map: {e}")))?;
    let mut gammas: BTreeMap<usize, Tensor> = BTreeMap::new();
    let mut betas: BTreeMap<usize, Tensor> = BTreeMap::new();
    for (name, tensor) in tensors {
        let parts: Vec<&str> = name.split('.').collect();
        if parts.len() != 3 || parts[0] != "scin" {
            return Err(AnalysisError::Contract(format!(
                "unexpected tensor '{name}' in bank container"
            )));
        }
        let layer: usize = parts[1]
            .parse()
            .map_err(|_| AnalysisError::Contract(format!("bad layer in '{name}'")))?;
        match parts[2] {
            "gamma" => gammas.insert(layer, tensor),
            "beta" => betas.insert(layer, tensor),
            other => {
                return Err(AnalysisError::Contract(format!(
                    "unexpected component '{other}' in bank container"
                )))
            }
        };
    }
    if gammas.len() != betas.len() || gammas.is_empty() {
        return Err(AnalysisError::Contract(
            "bank container must hold gamma and beta for every layer".into(),
        ));
    }
    let mut layers = Vec::new();
    for (layer, gamma) in &gammas {
        let beta = betas.get(layer).ok_or_else(|| {
            AnalysisError::Contract(format!("bank missing beta for layer {layer}"))
        })?;
        let (sets, c) = (gamma.shape()[0], gamma.shape()[1]);
        layers.push(LayerBank {
            gamma: (0..sets)
                .map(|s| gamma.data()[s * c..(s + 1) * c].to_vec())
                .collect(),
            beta: (0..sets)
                .map(|s| beta.data()[s * c..(s + 1) * c].to_vec())
                .collect(),
        });
    }
    let bank = ConditionBank { layers, source_map };
    bank.validate()
        .map_err(|e| AnalysisError::Contract(e.to_string()))?;
    Ok(bank)
}
