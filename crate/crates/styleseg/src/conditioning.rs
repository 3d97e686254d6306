//! Source-conditioned instance normalization: per-source affine banks
//! applied after instance normalization, grouped parameter sharing, and
//! the FiLM-style image-conditioning generator.
//!
//! The layer computes `gamma_s * (z - mu(z)) / sigma(z) + beta_s`, where
//! the scale/shift pair is looked up per item through a source map (or, in
//! image mode, generated from the image by a small encoder). Scales are
//! stored raw; the minus-one origin shift belongs to the analysis side.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::Rng;
use crate::tensor::tape::{ParamId, ParamStore, Tape, Var};
use crate::tensor::{instance_stats, Padding, Tensor};

/// Number of SCIN layers in the network: 7 blocks times 2 conv units.
pub const SCIN_LAYERS: usize = 14;

/// Normalization epsilon, inside the square root.
pub const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum ConditioningError {
    #[error("unknown source '{0}'")]
    UnknownSource(String),
    #[error("grouped partition invalid: {0}")]
    BadPartition(String),
    #[error("{0}")]
    Contract(String),
    #[error(transparent)]
    Tensor(#[from] crate::TensorError),
}

/// How the scale/shift pair for an item is chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum ConditioningMode {
    /// One shared parameter set for every source.
    Naive,
    /// One parameter set per source.
    PerSource,
    /// Sources inside one group share a parameter set.
    Grouped { groups: Vec<Vec<String>> },
    /// Parameters generated from the image by the FiLM encoder; the bank
    /// is bypassed entirely.
    Image,
}

/// Source id -> parameter-set index, plus the set count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceMap {
    map: BTreeMap<String, usize>,
    sets: usize,
}

impl SourceMap {
    /// Build from the conditioning mode and the known source list.
    pub fn build(mode: &ConditioningMode, sources: &[String]) -> Result<Self, ConditioningError> {
        let mut sorted: Vec<&String> = sources.iter().collect();
        sorted.sort();
        sorted.dedup();
        match mode {
            ConditioningMode::Naive => Ok(SourceMap {
                map: sorted.iter().map(|s| (s.to_string(), 0)).collect(),
                sets: 1,
            }),
            ConditioningMode::PerSource => Ok(SourceMap {
                map: sorted
                    .iter()
                    .enumerate()
                    .map(|(i, s)| (s.to_string(), i))
                    .collect(),
                sets: sorted.len(),
            }),
            ConditioningMode::Grouped { groups } => {
                let mut map = BTreeMap::new();
                for (gi, group) in groups.iter().enumerate() {
                    for s in group {
                        if map.insert(s.clone(), gi).is_some() {
                            return Err(ConditioningError::BadPartition(format!(
                                "source '{s}' appears in more than one group"
                            )));
                        }
                    }
                }
                for s in &sorted {
                    if !map.contains_key(*s) {
                        return Err(ConditioningError::BadPartition(format!(
                            "source '{s}' not covered by any group"
                        )));
                    }
                }
                if map.len() != sorted.len() {
                    return Err(ConditioningError::BadPartition(
                        "groups mention sources absent from the dataset".into(),
                    ));
                }
                Ok(SourceMap {
                    map,
                    sets: groups.len(),
                })
            }
            ConditioningMode::Image => Ok(SourceMap {
                map: sorted.iter().map(|s| (s.to_string(), 0)).collect(),
                sets: 0,
            }),
        }
    }

    pub fn resolve(&self, source: &str) -> Result<usize, ConditioningError> {
        self.map
            .get(source)
            .copied()
            .ok_or_else(|| ConditioningError::UnknownSource(source.to_string()))
    }

    pub fn parameter_sets(&self) -> usize {
        self.sets
    }

    pub fn sources(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn mapping(&self) -> &BTreeMap<String, usize> {
        &self.map
    }

    /// Register an additional source with a fresh parameter-set index
    /// (used by fine-tuning).
    pub fn add_source(&mut self, source: &str) -> usize {
        let idx = self.sets;
        self.map.insert(source.to_string(), idx);
        self.sets += 1;
        idx
    }
}

/// Resolve one source id under a conditioning mode (bank modes only).
pub fn resolve_parameter_set(
    source: &str,
    mode: &ConditioningMode,
    map: &SourceMap,
) -> Result<usize, ConditioningError> {
    if matches!(mode, ConditioningMode::Image) {
        return Err(ConditioningError::Contract(
            "resolve_parameter_set is undefined in image mode".into(),
        ));
    }
    map.resolve(source)
}

/// Exported view of every SCIN layer's affine parameters.
///
/// `layers[l].gamma[set]` is the per-channel scale vector of parameter set
/// `set` at layer `l`; same for beta. This is the exchange surface between
/// training, checkpoints, and the similarity analysis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionBank {
    pub layers: Vec<LayerBank>,
    pub source_map: SourceMap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerBank {
    pub gamma: Vec<Vec<f64>>,
    pub beta: Vec<Vec<f64>>,
}

impl ConditionBank {
    /// Fresh bank: every scale at 1, every shift at 0.
    pub fn initialized(widths: &[usize], source_map: SourceMap) -> Self {
        let sets = source_map.parameter_sets();
        ConditionBank {
            layers: widths
                .iter()
                .map(|&c| LayerBank {
                    gamma: vec![vec![1.0; c]; sets],
                    beta: vec![vec![0.0; c]; sets],
                })
                .collect(),
            source_map,
        }
    }

    pub fn layer_widths(&self) -> Vec<usize> {
        self.layers
            .iter()
            .map(|l| l.gamma.first().map_or(0, |g| g.len()))
            .collect()
    }

    pub fn parameter_sets(&self) -> usize {
        self.source_map.parameter_sets()
    }

    pub fn validate(&self) -> Result<(), ConditioningError> {
        let sets = self.parameter_sets();
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.gamma.len() != sets || layer.beta.len() != sets {
                return Err(ConditioningError::Contract(format!(
                    "layer {i}: expected {sets} parameter sets, found {}/{}",
                    layer.gamma.len(),
                    layer.beta.len()
                )));
            }
            for (g, b) in layer.gamma.iter().zip(&layer.beta) {
                if g.len() != b.len() {
                    return Err(ConditioningError::Contract(format!(
                        "layer {i}: gamma/beta width mismatch {} vs {}",
                        g.len(),
                        b.len()
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Reference SCIN forward on plain tensors (no tape): normalize each
/// (n, c) plane, then scale/shift with the parameter set the item's
/// source resolves to.
pub fn scin_forward(
    z: &Tensor,
    source_ids: &[String],
    bank: &ConditionBank,
    layer_index: usize,
) -> Result<Tensor, ConditioningError> {
    if layer_index >= bank.layers.len() {
        return Err(ConditioningError::Contract(format!(
            "layer index {layer_index} out of range ({} layers)",
            bank.layers.len()
        )));
    }
    let shape = z.shape().to_vec();
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    if source_ids.len() != n {
        return Err(ConditioningError::Contract(format!(
            "{} source ids for a batch of {n}",
            source_ids.len()
        )));
    }
    let layer = &bank.layers[layer_index];
    if layer.gamma.first().is_some_and(|g| g.len() != c) {
        return Err(ConditioningError::Contract(format!(
            "layer {layer_index} holds {}-channel vectors, input has {c}",
            layer.gamma[0].len()
        )));
    }
    let (mu, sigma) = instance_stats(z, NORM_EPS)?;
    let mut out = Tensor::zeros(&shape);
    let hw = h * w;
    for (i, source) in source_ids.iter().enumerate() {
        let set = bank.source_map.resolve(source)?;
        for ch in 0..c {
            let m = mu.data()[i * c + ch];
            let s = sigma.data()[i * c + ch];
            let g = layer.gamma[set][ch];
            let b = layer.beta[set][ch];
            let src = &z.data()[(i * c + ch) * hw..(i * c + ch + 1) * hw];
            let dst = &mut out.data_mut()[(i * c + ch) * hw..(i * c + ch + 1) * hw];
            for (d, &v) in dst.iter_mut().zip(src) {
                *d = g * (v - m) / s + b;
            }
        }
    }
    Ok(out)
}

/// The FiLM image-conditioning generator: a small stride-2 conv encoder
/// pooled to a latent vector, plus one affine head per SCIN layer that
/// emits that layer's per-channel (gamma, beta).
///
/// Heads start as an exact identity (zero weights, bias `[1...,0...]`), so
/// an image-conditioned model begins as a plain instance-norm model.
#[derive(Debug, Clone)]
pub struct FilmGenerator {
    pub encoder: Vec<(ParamId, ParamId)>, // (weight, bias) per stride-2 conv
    pub heads: Vec<(ParamId, ParamId)>,   // (weight, bias) per SCIN layer
    pub latent: usize,
}

/// Encoder widths of the FiLM conv stack.
pub const FILM_ENCODER_WIDTHS: [usize; 3] = [8, 16, 32];
/// Latent vector length after global average pooling.
pub const FILM_LATENT: usize = 32;

impl FilmGenerator {
    /// Register every generator parameter in the store.
    pub fn register(
        store: &mut ParamStore,
        in_channels: usize,
        layer_widths: &[usize],
        rng: &mut Rng,
    ) -> Self {
        let mut encoder = Vec::new();
        let mut prev = in_channels;
        for (i, &width) in FILM_ENCODER_WIDTHS.iter().enumerate() {
            let fan_in = (prev * 9) as f64;
            let std = (2.0 / fan_in).sqrt();
            let w = store.register(
                &format!("film.encoder.conv{i}.weight"),
                Tensor::from_fn(&[width, prev, 3, 3], |_| rng.normal_scaled(0.0, std)),
            );
            let b = store.register(
                &format!("film.encoder.conv{i}.bias"),
                Tensor::zeros(&[width]),
            );
            encoder.push((w, b));
            prev = width;
        }
        let mut heads = Vec::new();
        for (l, &c) in layer_widths.iter().enumerate() {
            let w = store.register(
                &format!("film.head.{l:02}.weight"),
                Tensor::zeros(&[FILM_LATENT, 2 * c]),
            );
            let b = store.register(
                &format!("film.head.{l:02}.bias"),
                Tensor::from_fn(&[2 * c], |i| if i < c { 1.0 } else { 0.0 }),
            );
            heads.push((w, b));
        }
        FilmGenerator {
            encoder,
            heads,
            latent: FILM_LATENT,
        }
    }

    /// Run the generator: per-item, per-layer (gamma, beta) pairs, with
    /// gradients flowing into the encoder and heads.
    pub fn condition(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        image: Var,
        slope: f64,
    ) -> Result<Vec<(Var, Var)>, ConditioningError> {
        let mut x = image;
        for &(w, b) in &self.encoder {
            let wv = tape.param(store, w);
            let bv = tape.param(store, b);
            x = tape.conv2d(x, wv, bv, 2, Padding::Same)?;
            x = tape.leaky_relu(x, slope)?;
        }
        let latent = tape.global_avg_pool(x)?;
        let mut out = Vec::with_capacity(self.heads.len());
        for &(w, b) in &self.heads {
            let wv = tape.param(store, w);
            let bv = tape.param(store, b);
            let gb = tape.linear(latent, wv, bv)?;
            let c = tape.value(gb).shape()[1] / 2;
            let gamma = tape.slice_cols(gb, 0, c)?;
            let beta = tape.slice_cols(gb, c, c)?;
            out.push((gamma, beta));
        }
        Ok(out)
    }
}

/// Which parameters an optimizer may touch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainableMask {
    Full,
    /// Only the normalization affine parameters: the condition bank, or
    /// the FiLM heads in image mode.
    NormAffineOnly,
}

/// Resolve a mask to concrete parameter ids.
pub fn trainable_params(mask: TrainableMask, store: &ParamStore) -> Vec<ParamId> {
    match mask {
        TrainableMask::Full => store.ids().collect(),
        TrainableMask::NormAffineOnly => store
            .iter()
            .filter(|(_, p)| p.name.starts_with("scin.") || p.name.starts_with("film.head."))
            .map(|(id, _)| id)
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sources(ids: &[&str]) -> Vec<String> {
        ids.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn per_source_map_is_bijective() {
        let map = SourceMap::build(&ConditioningMode::PerSource, &sources(&["C", "A", "B"]))
            .unwrap();
        let mut seen: Vec<usize> = ["A", "B", "C"].iter().map(|s| map.resolve(s).unwrap()).collect();
        seen.sort_unstable();
        assert_eq!(seen, vec![0, 1, 2]);
        assert_eq!(map.parameter_sets(), 3);
    }

    #[test]
    fn naive_map_sends_everything_to_zero() {
        let map = SourceMap::build(&ConditioningMode::Naive, &sources(&["A", "B"])).unwrap();
        assert_eq!(map.resolve("A").unwrap(), 0);
        assert_eq!(map.resolve("B").unwrap(), 0);
        assert_eq!(map.parameter_sets(), 1);
    }

    #[test]
    fn grouped_map_resolves_to_group_index() {
        let mode = ConditioningMode::Grouped {
            groups: vec![sources(&["A", "B"]), sources(&["C"])],
        };
        let map = SourceMap::build(&mode, &sources(&["A", "B", "C"])).unwrap();
        assert_eq!(map.resolve("B").unwrap(), map.resolve("A").unwrap());
        assert_eq!(map.resolve("C").unwrap(), 1);
        // partition must cover every source exactly once
        let bad = ConditioningMode::Grouped {
            groups: vec![sources(&["A"])],
        };
        assert!(SourceMap::build(&bad, &sources(&["A", "B"])).is_err());
        let dup = ConditioningMode::Grouped {
            groups: vec![sources(&["A", "B"]), sources(&["B"])],
        };
        assert!(SourceMap::build(&dup, &sources(&["A", "B"])).is_err());
    }

    #[test]
    fn unknown_source_is_reported_by_name() {
        let map = SourceMap::build(&ConditioningMode::PerSource, &sources(&["A"])).unwrap();
        match map.resolve("Z") {
            Err(ConditioningError::UnknownSource(s)) => assert_eq!(s, "Z"),
            other => panic!("expected UnknownSource, got {other:?}"),
        }
    }

    fn test_bank(widths: &[usize], srcs: &[&str]) -> ConditionBank {
        let map = SourceMap::build(&ConditioningMode::PerSource, &sources(srcs)).unwrap();
        ConditionBank::initialized(widths, map)
    }

    #[test]
    fn initialized_bank_equals_plain_instance_norm() {
        let mut rng = Rng::new(4);
        let bank = test_bank(&[3], &["A", "B"]);
        let z = Tensor::from_fn(&[2, 3, 4, 4], |_| rng.normal_scaled(1.0, 2.0));
        let out = scin_forward(&z, &sources(&["A", "B"]), &bank, 0).unwrap();
        let (mu, sigma) = instance_stats(&z, NORM_EPS).unwrap();
        for i in 0..2 * 3 {
            for j in 0..16 {
                let plain = (z.data()[i * 16 + j] - mu.data()[i]) / sigma.data()[i];
                assert!((out.data()[i * 16 + j] - plain).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn zero_scale_pins_output_at_beta() {
        let mut bank = test_bank(&[1], &["A"]);
        bank.layers[0].gamma[0][0] = 0.0;
        bank.layers[0].beta[0][0] = 7.0;
        let z = Tensor::from_fn(&[1, 1, 2, 2], |i| i as f64);
        let out = scin_forward(&z, &sources(&["A"]), &bank, 0).unwrap();
        assert!(out.data().iter().all(|&v| (v - 7.0).abs() < 1e-12));
    }

    #[test]
    fn scin_equation_hand_case() {
        // channel {2,4}, gamma 2, beta 1 -> {1 - 2/sqrt(1+eps), 1 + 2/sqrt(1+eps)}
        let mut bank = test_bank(&[1], &["A"]);
        bank.layers[0].gamma[0][0] = 2.0;
        bank.layers[0].beta[0][0] = 1.0;
        let z = Tensor::new(vec![1, 1, 1, 2], vec![2.0, 4.0]).unwrap();
        let out = scin_forward(&z, &sources(&["A"]), &bank, 0).unwrap();
        let unit = 2.0 / (1.0 + NORM_EPS).sqrt();
        assert!((out.data()[0] - (1.0 - unit)).abs() < 1e-12);
        assert!((out.data()[1] - (1.0 + unit)).abs() < 1e-12);
        // ~ {-0.99999, 2.99999}
        assert!((out.data()[0] + 0.99999).abs() < 1e-4);
        assert!((out.data()[1] - 2.99999).abs() < 1e-4);
    }

    #[test]
    fn mixed_batch_items_use_their_own_sets() {
        let mut bank = test_bank(&[1], &["A", "B"]);
        let set_b = bank.source_map.resolve("B").unwrap();
        bank.layers[0].beta[set_b][0] = 5.0;
        let z = Tensor::from_fn(&[2, 1, 1, 2], |i| (i % 2) as f64);
        let out = scin_forward(&z, &sources(&["A", "B"]), &bank, 0).unwrap();
        let mean_item0: f64 = out.data()[..2].iter().sum::<f64>() / 2.0;
        let mean_item1: f64 = out.data()[2..].iter().sum::<f64>() / 2.0;
        assert!(mean_item0.abs() < 1e-12);
        assert!((mean_item1 - 5.0).abs() < 1e-12);
    }

    #[test]
    fn scin_is_affine_in_gamma_for_fixed_normalized_input() {
        // SCIN(u; a*gamma, beta) == a*SCIN(u; gamma, 0) + beta
        let mut rng = Rng::new(8);
        let z = Tensor::from_fn(&[1, 2, 3, 3], |_| rng.normal());
        let mk = |g: f64, b: f64| {
            let mut bank = test_bank(&[2], &["A"]);
            for ch in 0..2 {
                bank.layers[0].gamma[0][ch] = g;
                bank.layers[0].beta[0][ch] = b;
            }
            scin_forward(&z, &sources(&["A"]), &bank, 0).unwrap()
        };
        let a = 2.5;
        let lhs = mk(a * 1.7, 0.3);
        let rhs = mk(1.7, 0.0);
        for (l, r) in lhs.data().iter().zip(rhs.data()) {
            assert!((l - (a * r + 0.3)).abs() < 1e-12);
        }
    }

    #[test]
    fn film_initialization_is_exact_identity() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(11);
        let film = FilmGenerator::register(&mut store, 2, &[4, 8], &mut rng);
        let mut tape = Tape::new();
        let image = tape.constant(Tensor::from_fn(&[3, 2, 16, 16], |i| (i as f64).cos()));
        let pairs = film.condition(&mut tape, &store, image, 0.01).unwrap();
        assert_eq!(pairs.len(), 2);
        for (i, &(g, b)) in pairs.iter().enumerate() {
            let c = [4, 8][i];
            assert_eq!(tape.value(g).shape(), &[3, c]);
            assert!(tape.value(g).data().iter().all(|&v| v == 1.0));
            assert!(tape.value(b).data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn perturbed_head_shifts_gamma_by_delta_times_latent() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(11);
        let film = FilmGenerator::register(&mut store, 1, &[3], &mut rng);

        // latent for this image
        let latent_of = |store: &ParamStore| {
            let mut tape = Tape::new();
            let image = tape.constant(Tensor::from_fn(&[1, 1, 8, 8], |i| (i as f64 * 0.1).sin()));
            let mut x = image;
            for &(w, b) in &film.encoder {
                let wv = tape.param(store, w);
                let bv = tape.param(store, b);
                x = tape.conv2d(x, wv, bv, 2, Padding::Same).unwrap();
                x = tape.leaky_relu(x, 0.01).unwrap();
            }
            let l = tape.global_avg_pool(x).unwrap();
            tape.value(l).data().to_vec()
        };
        let latent = latent_of(&store);

        let (head_w, _) = film.heads[0];
        let delta = 1e-2;
        let k = 5; // latent row feeding gamma column 1
        store.value_mut(head_w).data_mut()[k * 6 + 1] += delta;

        let mut tape = Tape::new();
        let image = tape.constant(Tensor::from_fn(&[1, 1, 8, 8], |i| (i as f64 * 0.1).sin()));
        let pairs = film.condition(&mut tape, &store, image, 0.01).unwrap();
        let gamma = tape.value(pairs[0].0).data();
        assert!((gamma[0] - 1.0).abs() < 1e-12);
        assert!((gamma[1] - (1.0 + delta * latent[k])).abs() < 1e-12);
    }

    #[test]
    fn zero_image_with_zero_bias_encoder_yields_head_bias() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(3);
        let film = FilmGenerator::register(&mut store, 1, &[2], &mut rng);
        // encoder biases are zero at init, so a zero image gives a zero
        // latent and the heads emit exactly their bias pattern
        let mut tape = Tape::new();
        let image = tape.constant(Tensor::zeros(&[1, 1, 8, 8]));
        let pairs = film.condition(&mut tape, &store, image, 0.01).unwrap();
        assert_eq!(tape.value(pairs[0].0).data(), &[1.0, 1.0]);
        assert_eq!(tape.value(pairs[0].1).data(), &[0.0, 0.0]);
    }

    #[test]
    fn trainable_mask_selects_affine_parameters() {
        let mut store = ParamStore::new();
        store.register("block0.conv0.weight", Tensor::zeros(&[2, 1, 3, 3]));
        store.register("scin.00.gamma", Tensor::ones(&[2, 4]));
        store.register("scin.00.beta", Tensor::zeros(&[2, 4]));
        store.register("film.head.00.weight", Tensor::zeros(&[4, 8]));
        store.register("film.encoder.conv0.weight", Tensor::zeros(&[8, 1, 3, 3]));
        let affine = trainable_params(TrainableMask::NormAffineOnly, &store);
        let names: Vec<&str> = affine
            .iter()
            .map(|&id| store.get(id).name.as_str())
            .collect();
        assert_eq!(
            names,
            vec!["scin.00.gamma", "scin.00.beta", "film.head.00.weight"]
        );
        assert_eq!(trainable_params(TrainableMask::Full, &store).len(), 5);
    }
}
