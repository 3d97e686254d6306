//! The conditional-normalization segmentation network: 7 blocks (3 encoder,
//! 1 center, 3 decoder), each block two (conv -> SCIN -> LeakyReLU) units
//! plus dropout, skip connections by channel concatenation, and a 1x1
//! logit head.
//!
//! Downsampling is the first conv of each non-initial encoder/center block
//! at stride 2; upsampling is a stride-2 transposed convolution feeding
//! each decoder block. With 14 SCIN layers (7 blocks x 2 units) the
//! conditioning surface matches the per-layer analysis downstream.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{read_container, write_container, CheckpointError};
use crate::conditioning::{
    ConditionBank, ConditioningError, ConditioningMode, FilmGenerator, SourceMap, NORM_EPS,
    SCIN_LAYERS,
};
use crate::rng::Rng;
use crate::tensor::tape::{ParamId, ParamStore, Tape, Var};
use crate::tensor::{Padding, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error(transparent)]
    Conditioning(#[from] ConditioningError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
    #[serde(default = "default_widths")]
    pub widths: [usize; 7],
    #[serde(default = "default_dropout")]
    pub dropout_p: f64,
    #[serde(default = "default_slope")]
    pub leaky_slope: f64,
    pub conditioning: ConditioningMode,
    pub seed: u64,
}

fn default_in_channels() -> usize {
    2
}
fn default_widths() -> [usize; 7] {
    [8, 16, 32, 64, 32, 16, 8]
}
fn default_dropout() -> f64 {
    0.1
}
fn default_slope() -> f64 {
    0.01
}

impl ModelConfig {
    pub fn new(conditioning: ConditioningMode, seed: u64) -> Self {
        ModelConfig {
            in_channels: default_in_channels(),
            widths: default_widths(),
            dropout_p: default_dropout(),
            leaky_slope: default_slope(),
            conditioning,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        for i in 0..7 {
            if self.widths[i] != self.widths[6 - i] {
                return Err(ModelError::Config(format!(
                    "widths must be symmetric about the center block, got {:?}",
                    self.widths
                )));
            }
        }
        if self.widths.iter().any(|&w| w == 0) {
            return Err(ModelError::Config("zero block width".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(ModelError::Config(format!(
                "dropout_p must be in [0,1), got {}",
                self.dropout_p
            )));
        }
        if !(0.0..1.0).contains(&self.leaky_slope) || self.leaky_slope == 0.0 {
            return Err(ModelError::Config(format!(
                "leaky_slope must be in (0,1), got {}",
                self.leaky_slope
            )));
        }
        if self.in_channels == 0 {
            return Err(ModelError::Config("in_channels must be >= 1".into()));
        }
        Ok(())
    }
}

/// How a forward pass picks scale/shift parameters for each batch item.
#[derive(Debug, Clone)]
pub enum Conditioning<'a> {
    /// Per-item source ids (training on mixed batches).
    Sources(&'a [String]),
    /// One style for the whole batch (evaluation under a chosen style).
    Style(&'a str),
    /// Generate from the image; only valid in image mode.
    FromImage,
}

struct ConvUnit {
    weight: ParamId,
    bias: ParamId,
    stride: usize,
}

struct Block {
    units: [ConvUnit; 2],
}

struct Upsample {
    weight: ParamId,
    bias: ParamId,
}

/// Captured (pre-normalization input, post-SCIN output) pair per layer.
pub type ScinTrace = Vec<(Tensor, Tensor)>;

pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub source_map: SourceMap,
    blocks: Vec<Block>,
    upsamples: Vec<Upsample>, // for decoder blocks 4, 5, 6
    head: (ParamId, ParamId),
    scin: Vec<(ParamId, ParamId)>, // (gamma, beta) per layer, empty in image mode
    film: Option<FilmGenerator>,
    layer_widths: Vec<usize>,
}

impl Model {
    /// Deterministically build a model. The backbone draws from the "init"
    /// stream in a fixed order, so two builds from one seed are bitwise
    /// identical, and the backbone does not depend on the conditioning
    /// mode (an image-conditioned model and a naive model built from the
    /// same seed share backbone weights exactly).
    pub fn build(config: ModelConfig, sources: &[String]) -> Result<Self> {
        config.validate()?;
        let source_map = SourceMap::build(&config.conditioning, sources)?;
        let mut store = ParamStore::new();
        let mut init_rng = Rng::new(config.seed).split("init");

        let widths = config.widths;
        let mut layer_widths = Vec::with_capacity(SCIN_LAYERS);
        let mut blocks = Vec::with_capacity(7);
        let mut upsamples = Vec::new();

        let register_conv = |store: &mut ParamStore,
                                 rng: &mut Rng,
                                 name: &str,
                                 c_in: usize,
                                 c_out: usize|
         -> (ParamId, ParamId) {
            let std = (2.0 / (c_in as f64 * 9.0)).sqrt();
            let w = store.register(
                &format!("{name}.weight"),
                Tensor::from_fn(&[c_out, c_in, 3, 3], |_| rng.normal_scaled(0.0, std)),
            );
            let b = store.register(&format!("{name}.bias"), Tensor::zeros(&[c_out]));
            (w, b)
        };

        for (b, &width) in widths.iter().enumerate() {
            let is_decoder = b >= 4;
            if is_decoder {
                // stride-2 transposed conv from the previous block's width
                let c_in = widths[b - 1];
                let std = (2.0 / (c_in as f64 * 9.0)).sqrt();
                let w = store.register(
                    &format!("up{b}.weight"),
                    Tensor::from_fn(&[c_in, width, 3, 3], |_| {
                        init_rng.normal_scaled(0.0, std)
                    }),
                );
                let bias = store.register(&format!("up{b}.bias"), Tensor::zeros(&[width]));
                upsamples.push(Upsample { weight: w, bias });
            }
            let unit0_in = match b {
                0 => config.in_channels,
                1 | 2 | 3 => widths[b - 1],
                // decoder unit 0 sees upsampled features concatenated with
                // the mirror encoder skip
                _ => width + widths[6 - b],
            };
            let unit0 = {
                let (w, bias) =
                    register_conv(&mut store, &mut init_rng, &format!("block{b}.conv0"), unit0_in, width);
                ConvUnit {
                    weight: w,
                    bias,
                    stride: if (1..=3).contains(&b) { 2 } else { 1 },
                }
            };
            let unit1 = {
                let (w, bias) =
                    register_conv(&mut store, &mut init_rng, &format!("block{b}.conv1"), width, width);
                ConvUnit {
                    weight: w,
                    bias,
                    stride: 1,
                }
            };
            blocks.push(Block {
                units: [unit0, unit1],
            });
            layer_widths.push(width);
            layer_widths.push(width);
        }

        let head_w = store.register(
            "head.weight",
            Tensor::from_fn(&[1, widths[6]], |_| {
                init_rng.normal_scaled(0.0, (2.0 / widths[6] as f64).sqrt())
            }),
        );
        let head_b = store.register("head.bias", Tensor::zeros(&[1]));

        // conditioning parameters, after the backbone
        let mut scin = Vec::new();
        let mut film = None;
        if matches!(config.conditioning, ConditioningMode::Image) {
            let mut film_rng = Rng::new(config.seed).split("film");
            film = Some(FilmGenerator::register(
                &mut store,
                config.in_channels,
                &layer_widths,
                &mut film_rng,
            ));
        } else {
            let sets = source_map.parameter_sets();
            for (l, &c) in layer_widths.iter().enumerate() {
                let g = store.register(&format!("scin.{l:02}.gamma"), Tensor::ones(&[sets, c]));
                let b = store.register(&format!("scin.{l:02}.beta"), Tensor::zeros(&[sets, c]));
                scin.push((g, b));
            }
        }

        Ok(Model {
            config,
            store,
            source_map,
            blocks,
            upsamples,
            head: (head_w, head_b),
            scin,
            film,
            layer_widths,
        })
    }

    pub fn layer_widths(&self) -> &[usize] {
        &self.layer_widths
    }

    pub fn scin_layer_count(&self) -> usize {
        SCIN_LAYERS
    }

    pub fn film(&self) -> Option<&FilmGenerator> {
        self.film.as_ref()
    }

    /// Resolve a conditioning request to one parameter-set index per item.
    fn resolve_sets(&self, cond: &Conditioning, batch: usize) -> Result<Option<Vec<usize>>> {
        match (&self.config.conditioning, cond) {
            (ConditioningMode::Image, Conditioning::FromImage) => Ok(None),
            (ConditioningMode::Image, _) => Err(ModelError::Config(
                "image-conditioned model takes Conditioning::FromImage".into(),
            )),
            (_, Conditioning::FromImage) => Err(ModelError::Config(
                "FromImage conditioning requires an image-conditioned model".into(),
            )),
            (_, Conditioning::Sources(ids)) => {
                if ids.len() != batch {
                    return Err(ModelError::Config(format!(
                        "{} source ids for a batch of {batch}",
                        ids.len()
                    )));
                }
                Ok(Some(
                    ids.iter()
                        .map(|s| self.source_map.resolve(s))
                        .collect::<std::result::Result<_, _>>()?,
                ))
            }
            (_, Conditioning::Style(style)) => {
                let set = self.source_map.resolve(style)?;
                Ok(Some(vec![set; batch]))
            }
        }
    }

    /// Training-mode forward: dropout active, drawn from `dropout_rng`.
    pub fn forward_train(
        &self,
        tape: &mut Tape,
        images: Var,
        cond: &Conditioning,
        dropout_rng: &mut Rng,
    ) -> Result<Var> {
        self.forward_impl(tape, images, cond, Some(dropout_rng), None, false)
    }

    /// Eval-mode forward: a pure function of (parameters, input,
    /// conditioning).
    pub fn forward_eval(&self, tape: &mut Tape, images: Var, cond: &Conditioning) -> Result<Var> {
        self.forward_impl(tape, images, cond, None, None, false)
    }

    /// Diagnostic forward with every skip connection zeroed; a wiring
    /// guard (the output must differ from the ordinary forward).
    pub fn forward_eval_skip_ablated(
        &self,
        tape: &mut Tape,
        images: Var,
        cond: &Conditioning,
    ) -> Result<Var> {
        self.forward_impl(tape, images, cond, None, None, true)
    }

    /// Eval-mode forward that also captures every SCIN layer's
    /// (pre-normalization input, post-affine output).
    pub fn forward_traced(
        &self,
        tape: &mut Tape,
        images: Var,
        cond: &Conditioning,
    ) -> Result<(Var, ScinTrace)> {
        let mut trace = ScinTrace::new();
        let out = self.forward_impl(tape, images, cond, None, Some(&mut trace), false)?;
        Ok((out, trace))
    }

    fn forward_impl(
        &self,
        tape: &mut Tape,
        images: Var,
        cond: &Conditioning,
        mut dropout_rng: Option<&mut Rng>,
        mut trace: Option<&mut ScinTrace>,
        zero_skips: bool,
    ) -> Result<Var> {
        let shape = tape.value(images).shape().to_vec();
        if shape.len() != 4 || shape[1] != self.config.in_channels {
            return Err(ModelError::Config(format!(
                "expected [N,{},H,W] input, got {shape:?}",
                self.config.in_channels
            )));
        }
        let (batch, h, w) = (shape[0], shape[2], shape[3]);
        if h % 8 != 0 || w % 8 != 0 {
            return Err(ModelError::Config(format!(
                "spatial extent {h}x{w} must be divisible by 8 (three stride-2 stages); pad the input"
            )));
        }
        let sets = self.resolve_sets(cond, batch)?;

        // image-conditioned gamma/beta, one pair per SCIN layer
        let film_params = match (&self.film, sets.is_none()) {
            (Some(film), true) => Some(film.condition(
                tape,
                &self.store,
                images,
                self.config.leaky_slope,
            )?),
            _ => None,
        };

        let mut scin_layer = 0usize;
        let mut apply_scin = |tape: &mut Tape,
                              x: Var,
                              trace: &mut Option<&mut ScinTrace>|
         -> Result<Var> {
            let l = scin_layer;
            scin_layer += 1;
            let pre = trace.as_ref().map(|_| tape.value(x).clone());
            let u = tape.instance_norm(x, NORM_EPS)?;
            let (gamma, beta) = if let Some(params) = &film_params {
                params[l]
            } else {
                let (g_id, b_id) = self.scin[l];
                let table_g = tape.param(&self.store, g_id);
                let table_b = tape.param(&self.store, b_id);
                let idx = sets.as_ref().expect("bank modes carry set indices");
                (tape.gather_rows(table_g, idx)?, tape.gather_rows(table_b, idx)?)
            };
            let out = tape.scale_shift(u, gamma, beta)?;
            if let Some(t) = trace.as_mut() {
                t.push((pre.unwrap(), tape.value(out).clone()));
            }
            Ok(out)
        };

        let mut run_block = |tape: &mut Tape,
                             b: usize,
                             input: Var,
                             dropout_rng: &mut Option<&mut Rng>,
                             trace: &mut Option<&mut ScinTrace>|
         -> Result<Var> {
            let mut x = input;
            for unit in &self.blocks[b].units {
                let w = tape.param(&self.store, unit.weight);
                let bias = tape.param(&self.store, unit.bias);
                x = tape.conv2d(x, w, bias, unit.stride, Padding::Same)?;
                x = apply_scin(tape, x, trace)?;
                x = tape.leaky_relu(x, self.config.leaky_slope)?;
            }
            if let Some(rng) = dropout_rng.as_mut() {
                if self.config.dropout_p > 0.0 {
                    x = tape.dropout(x, self.config.dropout_p, rng)?;
                }
            }
            Ok(x)
        };

        let e0 = run_block(tape, 0, images, &mut dropout_rng, &mut trace)?;
        let e1 = run_block(tape, 1, e0, &mut dropout_rng, &mut trace)?;
        let e2 = run_block(tape, 2, e1, &mut dropout_rng, &mut trace)?;
        let center = run_block(tape, 3, e2, &mut dropout_rng, &mut trace)?;

        let mut x = center;
        for (d, skip) in [(4usize, e2), (5, e1), (6, e0)] {
            let up = &self.upsamples[d - 4];
            let w = tape.param(&self.store, up.weight);
            let bias = tape.param(&self.store, up.bias);
            let upsampled = tape.conv_transpose2x(x, w, bias)?;
            let skip = if zero_skips {
                tape.constant(Tensor::zeros(tape.value(skip).shape()))
            } else {
                skip
            };
            let merged = tape.concat_channels(upsampled, skip)?;
            x = run_block(tape, d, merged, &mut dropout_rng, &mut trace)?;
        }

        let (hw, hb) = self.head;
        let wv = tape.param(&self.store, hw);
        let bv = tape.param(&self.store, hb);
        let logits = tape.conv1x1(x, wv, bv)?;
        debug_assert_eq!(tape.value(logits).shape(), &[batch, 1, h, w]);
        Ok(logits)
    }

    /// Export the condition bank (bank modes only).
    pub fn export_bank(&self) -> Option<ConditionBank> {
        if self.scin.is_empty() {
            return None;
        }
        let sets = self.source_map.parameter_sets();
        let layers = self
            .scin
            .iter()
            .map(|&(g_id, b_id)| {
                let g = self.store.value(g_id);
                let b = self.store.value(b_id);
                let c = g.shape()[1];
                crate::conditioning::LayerBank {
                    gamma: (0..sets)
                        .map(|s| g.data()[s * c..(s + 1) * c].to_vec())
                        .collect(),
                    beta: (0..sets)
                        .map(|s| b.data()[s * c..(s + 1) * c].to_vec())
                        .collect(),
                }
            })
            .collect();
        Some(ConditionBank {
            layers,
            source_map: self.source_map.clone(),
        })
    }

    /// Overwrite the SCIN parameters from a bank (widths must match).
    pub fn import_bank(&mut self, bank: &ConditionBank) -> Result<()> {
        if bank.layer_widths() != self.layer_widths {
            return Err(ModelError::Config(format!(
                "bank widths {:?} do not match model {:?}",
                bank.layer_widths(),
                self.layer_widths
            )));
        }
        bank.validate()?;
        let sets = bank.parameter_sets();
        for (l, &(g_id, b_id)) in self.scin.iter().enumerate() {
            let c = self.layer_widths[l];
            let mut g = Tensor::zeros(&[sets, c]);
            let mut b = Tensor::zeros(&[sets, c]);
            for s in 0..sets {
                g.data_mut()[s * c..(s + 1) * c].copy_from_slice(&bank.layers[l].gamma[s]);
                b.data_mut()[s * c..(s + 1) * c].copy_from_slice(&bank.layers[l].beta[s]);
            }
            self.store.set_value(g_id, g);
            self.store.set_value(b_id, b);
        }
        self.source_map = bank.source_map.clone();
        Ok(())
    }

    /// Grow every SCIN table by one parameter set for a new source.
    /// The new row starts at (1, 0) or copies an existing source's row.
    pub fn add_source_set(&mut self, source: &str, copy_from: Option<&str>) -> Result<usize> {
        if self.scin.is_empty() {
            return Err(ModelError::Config(
                "image-conditioned models have no per-source bank to extend".into(),
            ));
        }
        let copy_set = copy_from
            .map(|s| self.source_map.resolve(s))
            .transpose()?;
        let new_set = self.source_map.add_source(source);
        for (l, &(g_id, b_id)) in self.scin.iter().enumerate() {
            let c = self.layer_widths[l];
            for (id, fill) in [(g_id, 1.0), (b_id, 0.0)] {
                let old = self.store.value(id).clone();
                let mut next = Tensor::zeros(&[new_set + 1, c]);
                next.data_mut()[..old.len()].copy_from_slice(old.data());
                let row = match copy_set {
                    Some(src) => old.data()[src * c..(src + 1) * c].to_vec(),
                    None => vec![fill; c],
                };
                next.data_mut()[new_set * c..(new_set + 1) * c].copy_from_slice(&row);
                self.store.set_value(id, next);
            }
        }
        Ok(new_set)
    }

    /// Write a checkpoint: the full parameter store plus enough metadata
    /// to rebuild the model.
    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        let mut meta = BTreeMap::new();
        meta.insert("kind".to_string(), "checkpoint".to_string());
        meta.insert(
            "config".to_string(),
            serde_json::to_string(&self.config).expect("config serializes"),
        );
        meta.insert(
            "sources".to_string(),
            serde_json::to_string(&self.source_map).expect("map serializes"),
        );
        let tensors: Vec<(String, &Tensor)> = self
            .store
            .iter()
            .map(|(_, p)| (p.name.clone(), &p.value))
            .collect();
        write_container(dir, &meta, &tensors)?;
        Ok(())
    }

    /// Rebuild a model from a checkpoint directory.
    pub fn load_checkpoint(dir: &Path) -> Result<Self> {
        let (meta, tensors) = read_container(dir)?;
        let config_json = meta.get("config").ok_or_else(|| {
            ModelError::Config(format!("{}: checkpoint missing config", dir.display()))
        })?;
        let config: ModelConfig = serde_json::from_str(config_json)
            .map_err(|e| ModelError::Config(format!("bad checkpoint config: {e}")))?;
        let map_json = meta.get("sources").ok_or_else(|| {
            ModelError::Config(format!("{}: checkpoint missing sources", dir.display()))
        })?;
        let source_map: SourceMap = serde_json::from_str(map_json)
            .map_err(|e| ModelError::Config(format!("bad checkpoint source map: {e}")))?;

        // grouped configs validate that every source sits in a group, but a
        // fine-tuned checkpoint may carry sources added after training; build
        // from the group members and restore the saved mapping afterward
        let build_sources: Vec<String> = match &config.conditioning {
            ConditioningMode::Grouped { groups } => groups.iter().flatten().cloned().collect(),
            _ => source_map.sources().cloned().collect(),
        };
        let mut model = Model::build(config, &build_sources)?;
        // a fine-tuned checkpoint may carry extra parameter sets
        model.source_map = source_map;
        let mut by_name: BTreeMap<String, Tensor> = tensors.into_iter().collect();
        for (_, p) in model.store.iter() {
            if !by_name.contains_key(&p.name) {
                return Err(ModelError::Config(format!(
                    "checkpoint missing parameter {}",
                    p.name
                )));
            }
        }
        let ids: Vec<ParamId> = model.store.ids().collect();
        for id in ids {
            let name = model.store.get(id).name.clone();
            let value = by_name.remove(&name).unwrap();
            model.store.set_value(id, value);
        }
        if !by_name.is_empty() {
            let extra: Vec<&String> = by_name.keys().collect();
            return Err(ModelError::Config(format!(
                "checkpoint carries unknown parameters {extra:?}"
            )));
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conditioning::{trainable_params, TrainableMask};
    use crate::tensor::gradcheck::check_against_finite_differences;

    fn srcs(ids: &[&str]) -> Vec<String> {
        ids.iter().map(|s| s.to_string()).collect()
    }

    fn small_config(conditioning: ConditioningMode) -> ModelConfig {
        ModelConfig {
            widths: [2, 3, 4, 5, 4, 3, 2],
            ..ModelConfig::new(conditioning, 42)
        }
    }

    /// Independent architecture walk: recompute the parameter count from
    /// the block table alone (3x3 convs with bias, 3x3 transposed convs
    /// with bias, the 1x1 head, and per-set SCIN vectors).
    fn expected_scalar_count(in_channels: usize, widths: &[usize; 7], sets: usize) -> usize {
        let conv = |cin: usize, cout: usize| 9 * cin * cout + cout;
        let mut total = 0;
        for b in 0..7 {
            let w = widths[b];
            let cin0 = match b {
                0 => in_channels,
                1 | 2 | 3 => widths[b - 1],
                _ => w + widths[6 - b],
            };
            if b >= 4 {
                total += conv(widths[b - 1], w); // transposed conv, also 3x3+bias
            }
            total += conv(cin0, w) + conv(w, w);
        }
        total += widths[6] + 1; // 1x1 head
        let scin_per_set: usize = widths.iter().map(|&w| 2 * (2 * w)).sum();
        total + sets * scin_per_set
    }

    #[test]
    fn default_model_has_fourteen_scin_layers_matching_conv_widths() {
        let model = Model::build(
            ModelConfig::new(ConditioningMode::PerSource, 1),
            &srcs(&["A", "B", "C"]),
        )
        .unwrap();
        assert_eq!(model.scin_layer_count(), 14);
        let expect: Vec<usize> = [8, 16, 32, 64, 32, 16, 8]
            .iter()
            .flat_map(|&w| [w, w])
            .collect();
        assert_eq!(model.layer_widths(), expect.as_slice());
        for (l, &(g, _)) in model.scin.iter().enumerate() {
            assert_eq!(model.store.value(g).shape(), &[3, expect[l]]);
        }
    }

    #[test]
    fn parameter_count_matches_architecture_walk() {
        let model = Model::build(
            ModelConfig::new(ConditioningMode::PerSource, 7),
            &srcs(&["A", "B", "C"]),
        )
        .unwrap();
        assert_eq!(
            model.store.scalar_count(),
            expected_scalar_count(2, &[8, 16, 32, 64, 32, 16, 8], 3)
        );
        let tiny = Model::build(small_config(ConditioningMode::Naive), &srcs(&["A"])).unwrap();
        assert_eq!(
            tiny.store.scalar_count(),
            expected_scalar_count(2, &[2, 3, 4, 5, 4, 3, 2], 1)
        );
    }

    #[test]
    fn norm_affine_mask_counts_two_per_channel_per_set() {
        let model = Model::build(
            ModelConfig::new(ConditioningMode::PerSource, 7),
            &srcs(&["A", "B", "C"]),
        )
        .unwrap();
        let affine = trainable_params(TrainableMask::NormAffineOnly, &model.store);
        let scalars: usize = affine
            .iter()
            .map(|&id| model.store.value(id).len())
            .sum();
        let widths_sum: usize = model.layer_widths().iter().sum();
        assert_eq!(scalars, 3 * 2 * widths_sum);
    }

    #[test]
    fn same_seed_builds_are_bitwise_identical() {
        let a = Model::build(small_config(ConditioningMode::PerSource), &srcs(&["A", "B"]))
            .unwrap();
        let b = Model::build(small_config(ConditioningMode::PerSource), &srcs(&["A", "B"]))
            .unwrap();
        for ((_, pa), (_, pb)) in a.store.iter().zip(b.store.iter()) {
            assert_eq!(pa.name, pb.name);
            assert_eq!(pa.value.data(), pb.value.data());
        }
    }

    #[test]
    fn asymmetric_widths_are_rejected() {
        let config = ModelConfig {
            widths: [8, 16, 32, 64, 32, 16, 4],
            ..ModelConfig::new(ConditioningMode::Naive, 1)
        };
        assert!(matches!(
            Model::build(config, &srcs(&["A"])),
            Err(ModelError::Config(_))
        ));
    }

    #[test]
    fn forward_shape_contract_and_divisibility() {
        let model =
            Model::build(small_config(ConditioningMode::PerSource), &srcs(&["A", "B"])).unwrap();
        let mut tape = Tape::new();
        let mut rng = Rng::new(3);
        let x = tape.constant(Tensor::from_fn(&[2, 2, 32, 32], |_| rng.normal()));
        let out = model
            .forward_eval(&mut tape, x, &Conditioning::Sources(&srcs(&["A", "B"])))
            .unwrap();
        assert_eq!(tape.value(out).shape(), &[2, 1, 32, 32]);

        let mut tape = Tape::new();
        let bad = tape.constant(Tensor::zeros(&[1, 2, 20, 20]));
        let err = model
            .forward_eval(&mut tape, bad, &Conditioning::Style("A"))
            .unwrap_err();
        assert!(err.to_string().contains("pad"), "{err}");
    }

    #[test]
    fn eval_forward_is_deterministic_and_per_item_isolated() {
        let mut model =
            Model::build(small_config(ConditioningMode::PerSource), &srcs(&["A", "B"])).unwrap();
        let mut rng = Rng::new(9);
        let images = Tensor::from_fn(&[2, 2, 16, 16], |_| rng.normal());

        let run = |ids: &[&str]| {
            let mut tape = Tape::new();
            let x = tape.constant(images.clone());
            let out = model
                .forward_eval(&mut tape, x, &Conditioning::Sources(&srcs(ids)))
                .unwrap();
            tape.value(out).data().to_vec()
        };
        let base = run(&["A", "B"]);
        assert_eq!(base, run(&["A", "B"]), "eval forward must be pure");

        // an initialization bank makes every source equivalent; move B off
        // the identity so the conditioning choice is observable
        let (g0, _) = model.scin[0];
        let set_b = model.source_map.resolve("B").unwrap();
        let c = model.store.value(g0).shape()[1];
        model.store.value_mut(g0).data_mut()[set_b * c] = 1.7;
        let run = |ids: &[&str]| {
            let mut tape = Tape::new();
            let x = tape.constant(images.clone());
            let out = model
                .forward_eval(&mut tape, x, &Conditioning::Sources(&srcs(ids)))
                .unwrap();
            tape.value(out).data().to_vec()
        };
        let base = run(&["A", "B"]);

        // flipping item 1's source changes item 1 only, bit for bit
        let flipped = run(&["A", "A"]);
        let half = base.len() / 2;
        assert_eq!(&base[..half], &flipped[..half]);
        assert_ne!(&base[half..], &flipped[half..]);
    }

    #[test]
    fn scin_trace_at_init_equals_plain_instance_norm() {
        let model =
            Model::build(small_config(ConditioningMode::PerSource), &srcs(&["A", "B"])).unwrap();
        let mut rng = Rng::new(13);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[2, 2, 16, 16], |_| rng.normal()));
        let (_, trace) = model
            .forward_traced(&mut tape, x, &Conditioning::Sources(&srcs(&["A", "B"])))
            .unwrap();
        assert_eq!(trace.len(), 14);
        for (pre, post) in &trace {
            let (mu, sigma) = crate::instance_stats(pre, NORM_EPS).unwrap();
            let shape = pre.shape();
            let hw = shape[2] * shape[3];
            for i in 0..shape[0] * shape[1] {
                for j in 0..hw {
                    let plain = (pre.data()[i * hw + j] - mu.data()[i]) / sigma.data()[i];
                    assert!((post.data()[i * hw + j] - plain).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn film_model_at_init_matches_naive_model_with_same_backbone() {
        let film = Model::build(small_config(ConditioningMode::Image), &srcs(&["A"])).unwrap();
        let naive = Model::build(small_config(ConditioningMode::Naive), &srcs(&["A"])).unwrap();
        let mut rng = Rng::new(31);
        let images = Tensor::from_fn(&[1, 2, 16, 16], |_| rng.normal());

        let mut t1 = Tape::new();
        let x1 = t1.constant(images.clone());
        let o1 = film.forward_eval(&mut t1, x1, &Conditioning::FromImage).unwrap();
        let mut t2 = Tape::new();
        let x2 = t2.constant(images);
        let o2 = naive.forward_eval(&mut t2, x2, &Conditioning::Style("A")).unwrap();
        assert_eq!(t1.value(o1).data(), t2.value(o2).data());
    }

    #[test]
    fn zeroing_skips_changes_the_output() {
        let model = Model::build(small_config(ConditioningMode::Naive), &srcs(&["A"])).unwrap();
        let mut rng = Rng::new(5);
        let images = Tensor::from_fn(&[1, 2, 16, 16], |_| rng.normal());
        let mut tape = Tape::new();
        let x = tape.constant(images.clone());
        let normal = model
            .forward_eval(&mut tape, x, &Conditioning::Style("A"))
            .unwrap();
        let mut tape2 = Tape::new();
        let x2 = tape2.constant(images);
        let ablated = model
            .forward_eval_skip_ablated(&mut tape2, x2, &Conditioning::Style("A"))
            .unwrap();
        assert_ne!(tape.value(normal).data(), tape2.value(ablated).data());
    }

    #[test]
    fn gradients_stay_inside_the_batch_source_set() {
        let mut model =
            Model::build(small_config(ConditioningMode::PerSource), &srcs(&["A", "B"])).unwrap();
        let mut rng = Rng::new(17);
        let images = Tensor::from_fn(&[2, 2, 16, 16], |_| rng.normal());
        let targets = Tensor::from_fn(&[2, 1, 16, 16], |i| (i % 5 == 0) as u8 as f64);
        let mut tape = Tape::new();
        let x = tape.constant(images);
        let logits = model
            .forward_train(
                &mut tape,
                x,
                &Conditioning::Sources(&srcs(&["A", "A"])),
                &mut Rng::new(1).split("dropout"),
            )
            .unwrap();
        let loss = tape.bce_with_logits(logits, targets).unwrap();
        tape.backward(loss, &mut model.store).unwrap();

        let set_a = model.source_map.resolve("A").unwrap();
        let set_b = model.source_map.resolve("B").unwrap();
        let mut saw_nonzero_a = false;
        for &(g_id, b_id) in &model.scin {
            for id in [g_id, b_id] {
                let grad = model.store.grad(id);
                let c = grad.shape()[1];
                let row_a = &grad.data()[set_a * c..(set_a + 1) * c];
                let row_b = &grad.data()[set_b * c..(set_b + 1) * c];
                saw_nonzero_a |= row_a.iter().any(|&v| v != 0.0);
                assert!(row_b.iter().all(|&v| v == 0.0), "gradient leaked into B");
            }
        }
        assert!(saw_nonzero_a, "batch from A must move A's parameters");
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let model =
            Model::build(small_config(ConditioningMode::PerSource), &srcs(&["A", "B"])).unwrap();
        let dir = tempfile::tempdir().unwrap();
        model.save_checkpoint(dir.path()).unwrap();
        let loaded = Model::load_checkpoint(dir.path()).unwrap();
        assert_eq!(loaded.config, model.config);
        for ((_, a), (_, b)) in model.store.iter().zip(loaded.store.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value.data(), b.value.data());
        }
    }

    #[test]
    fn added_source_set_copies_or_initializes() {
        let mut model =
            Model::build(small_config(ConditioningMode::PerSource), &srcs(&["A", "B"])).unwrap();
        // perturb A so copying is observable
        let (g0, _) = model.scin[0];
        model.store.value_mut(g0).data_mut()[0] = 3.5;
        let set_a = model.source_map.resolve("A").unwrap();
        let new_set = model.add_source_set("C", Some("A")).unwrap();
        let g = model.store.value(g0);
        let c = g.shape()[1];
        assert_eq!(g.shape()[0], 3);
        assert_eq!(
            &g.data()[new_set * c..(new_set + 1) * c],
            &g.data()[set_a * c..(set_a + 1) * c]
        );

        let mut fresh =
            Model::build(small_config(ConditioningMode::PerSource), &srcs(&["A", "B"])).unwrap();
        let set = fresh.add_source_set("C", None).unwrap();
        let (g0, b0) = fresh.scin[0];
        let c = fresh.store.value(g0).shape()[1];
        assert!(fresh.store.value(g0).data()[set * c..(set + 1) * c]
            .iter()
            .all(|&v| v == 1.0));
        assert!(fresh.store.value(b0).data()[set * c..(set + 1) * c]
            .iter()
            .all(|&v| v == 0.0));
    }

    // End-to-end gradient check on a small input; the full acceptance
    // criterion runs the same check on both conditioning modes.
    #[test]
    fn tiny_network_passes_finite_difference_check() {
        let mut model =
            Model::build(small_config(ConditioningMode::PerSource), &srcs(&["A", "B"])).unwrap();
        // move the bank off its identity so gamma gradients are generic
        for &(g_id, b_id) in &model.scin {
            let mut r = Rng::new(23);
            for v in model.store.value_mut(g_id).data_mut() {
                *v += r.normal_scaled(0.0, 0.05);
            }
            for v in model.store.value_mut(b_id).data_mut() {
                *v += r.normal_scaled(0.0, 0.05);
            }
        }
        let mut rng = Rng::new(19);
        let images = Tensor::from_fn(&[2, 2, 16, 16], |_| rng.normal());
        let targets = Tensor::from_fn(&[2, 1, 16, 16], |i| (i % 3 == 0) as u8 as f64);
        let ids = srcs(&["A", "B"]);

        let loss_of = |store_model: &Model, images: &Tensor| -> f64 {
            let mut tape = Tape::new();
            let x = tape.constant(images.clone());
            let logits = store_model
                .forward_eval(&mut tape, x, &Conditioning::Sources(&ids))
                .unwrap();
            let loss = tape.bce_with_logits(logits, targets.clone()).unwrap();
            tape.value(loss).item()
        };

        // analytic gradients
        {
            let mut tape = Tape::new();
            let x = tape.constant(images.clone());
            let logits = model
                .forward_eval(&mut tape, x, &Conditioning::Sources(&ids))
                .unwrap();
            let loss = tape.bce_with_logits(logits, targets.clone()).unwrap();
            tape.backward(loss, &mut model.store).unwrap();
        }
        // move the store out to drive the finite differences through the
        // same model
        let mut store = std::mem::take(&mut model.store);
        let report = check_against_finite_differences(&mut store, 1e-5, |s| {
            model.store = s.clone();
            let l = loss_of(&model, &images);
            Ok(l)
        })
        .unwrap();
        assert!(
            report.passes(1e-4),
            "max rel err {} at {}[{}] over {} scalars",
            report.max_rel_err,
            report.worst_param,
            report.worst_index,
            report.checked
        );
    }
}
