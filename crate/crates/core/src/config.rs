//! Flat `key = value` run configuration.
//!
//! Every key has a default; [`RunConfig::parse`] starts from the defaults and
//! rejects unknown keys. Lines starting with `#` are comments.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::str::FromStr;

use crate::episodes::BenchmarkConfig;
use crate::model::ModelConfig;
use crate::rng::fnv1a;
use crate::trainer::TrainConfig;
use crate::{Error, Result};

/// `(key, description)` for every recognised key, in file order.
pub const KEYS: &[(&str, &str)] = &[
    ("seed", "master seed for initialisation, sampling and support selection"),
    ("model.channels", "comma-separated channel count of each backbone stage"),
    ("model.kernel_size", "odd kernel size of every convolution"),
    ("model.head_hidden", "hidden channels of the density head"),
    ("mldl.prototypes", "number of density prototypes fitted by EM"),
    ("mldl.concentration", "fixed vMF concentration r"),
    ("mldl.max_iter", "EM iteration cap"),
    ("mldl.tol", "EM stop threshold on mean 1 - cos prototype movement"),
    ("mldl.weighted", "weight EM samples by their column norm"),
    ("guidance.dilation_rate", "dilation of the third local-guidance convolution"),
    ("guidance.attention_dim", "attention dimension d_a; 0 uses the feature dimension"),
    ("guidance.use_ldg", "enable local density guidance"),
    ("guidance.use_gdg", "enable global density guidance"),
    ("guidance.tile_q", "attend with one query per cell instead of a single token"),
    ("guidance.shared_branch_convs", "share one conv stack across prototype branches"),
    ("train.learning_rate", "base Adam learning rate"),
    ("train.batch_size", "episodes per optimisation step"),
    ("train.iterations", "optimisation steps"),
    ("train.poly_power", "exponent of the polynomial learning-rate decay"),
    ("train.crop_size", "square training crop side in pixels"),
    ("train.grad_clip", "global gradient-norm ceiling; 0 disables"),
    ("train.beta1", "Adam first-moment decay"),
    ("train.beta2", "Adam second-moment decay"),
    ("train.adam_eps", "Adam denominator epsilon"),
    ("train.mirror_p", "probability of a horizontal mirror"),
    ("train.blur_p", "probability of a Gaussian blur"),
    ("train.density_sigma", "ground-truth kernel sigma in pixels"),
    ("train.checkpoint_every", "snapshot interval in iterations; 0 keeps only the final checkpoint"),
    ("bench.train_scenes", "synthetic training scenes"),
    ("bench.train_images", "images per training scene"),
    ("bench.test_scenes", "synthetic test scenes"),
    ("bench.test_images", "images per test scene"),
    ("bench.image_size", "side of the square synthetic images"),
    ("bench.intensity_high", "heads per pixel in the dense band"),
    ("bench.intensity_mid", "heads per pixel in the medium band"),
    ("bench.intensity_low", "heads per pixel in the sparse band"),
    ("bench.stamp_sigma", "rendered head blob sigma in pixels"),
    ("ablation.seeds", "seeds per ablation variant"),
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub bench: BenchmarkConfig,
    pub ablation_seeds: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            bench: BenchmarkConfig::default(),
            ablation_seeds: 5,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::InvalidValue {
        key: key.to_string(),
        value: value.to_string(),
    })
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::InvalidValue {
            key: key.to_string(),
            value: value.to_string(),
        }),
    }
}

impl RunConfig {
    pub fn get(&self, key: &str) -> Result<String> {
        let m = &self.model;
        let t = &self.train;
        let b = &self.bench;
        Ok(match key {
            "seed" => self.seed.to_string(),
            "model.channels" => m
                .backbone
                .channels_per_stage
                .iter()
                .map(|c| c.to_string())
                .collect::<Vec<_>>()
                .join(","),
            "model.kernel_size" => m.backbone.kernel_size.to_string(),
            "model.head_hidden" => m.head_hidden.to_string(),
            "mldl.prototypes" => m.num_prototypes.to_string(),
            "mldl.concentration" => m.concentration.to_string(),
            "mldl.max_iter" => m.em_max_iter.to_string(),
            "mldl.tol" => m.em_tol.to_string(),
            "mldl.weighted" => m.weighted_em.to_string(),
            "guidance.dilation_rate" => m.dilation_rate.to_string(),
            "guidance.attention_dim" => m.attention_dim.to_string(),
            "guidance.use_ldg" => m.use_ldg.to_string(),
            "guidance.use_gdg" => m.use_gdg.to_string(),
            "guidance.tile_q" => m.tile_q.to_string(),
            "guidance.shared_branch_convs" => m.shared_branch_convs.to_string(),
            "train.learning_rate" => t.learning_rate.to_string(),
            "train.batch_size" => t.batch_size.to_string(),
            "train.iterations" => t.iterations.to_string(),
            "train.poly_power" => t.poly_power.to_string(),
            "train.crop_size" => t.crop_size.to_string(),
            "train.grad_clip" => t.grad_clip.to_string(),
            "train.beta1" => t.beta1.to_string(),
            "train.beta2" => t.beta2.to_string(),
            "train.adam_eps" => t.adam_eps.to_string(),
            "train.mirror_p" => t.mirror_p.to_string(),
            "train.blur_p" => t.blur_p.to_string(),
            "train.density_sigma" => t.density_sigma.to_string(),
            "train.checkpoint_every" => t.checkpoint_every.to_string(),
            "bench.train_scenes" => b.train_scenes.to_string(),
            "bench.train_images" => b.train_images.to_string(),
            "bench.test_scenes" => b.test_scenes.to_string(),
            "bench.test_images" => b.test_images.to_string(),
            "bench.image_size" => b.image_size.to_string(),
            "bench.intensity_high" => b.intensities[0].to_string(),
            "bench.intensity_mid" => b.intensities[1].to_string(),
            "bench.intensity_low" => b.intensities[2].to_string(),
            "bench.stamp_sigma" => b.stamp_sigma.to_string(),
            "ablation.seeds" => self.ablation_seeds.to_string(),
            _ => return Err(Error::UnknownKey(key.to_string())),
        })
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let m = &mut self.model;
        let t = &mut self.train;
        let b = &mut self.bench;
        match key {
            "seed" => self.seed = parse(key, v)?,
            "model.channels" => {
                m.backbone.channels_per_stage = v
                    .split(',')
                    .map(|c| parse(key, c.trim()))
                    .collect::<Result<Vec<usize>>>()?
            }
            "model.kernel_size" => m.backbone.kernel_size = parse(key, v)?,
            "model.head_hidden" => m.head_hidden = parse(key, v)?,
            "mldl.prototypes" => m.num_prototypes = parse(key, v)?,
            "mldl.concentration" => m.concentration = parse(key, v)?,
            "mldl.max_iter" => m.em_max_iter = parse(key, v)?,
            "mldl.tol" => m.em_tol = parse(key, v)?,
            "mldl.weighted" => m.weighted_em = parse_bool(key, v)?,
            "guidance.dilation_rate" => m.dilation_rate = parse(key, v)?,
            "guidance.attention_dim" => m.attention_dim = parse(key, v)?,
            "guidance.use_ldg" => m.use_ldg = parse_bool(key, v)?,
            "guidance.use_gdg" => m.use_gdg = parse_bool(key, v)?,
            "guidance.tile_q" => m.tile_q = parse_bool(key, v)?,
            "guidance.shared_branch_convs" => m.shared_branch_convs = parse_bool(key, v)?,
            "train.learning_rate" => t.learning_rate = parse(key, v)?,
            "train.batch_size" => t.batch_size = parse(key, v)?,
            "train.iterations" => t.iterations = parse(key, v)?,
            "train.poly_power" => t.poly_power = parse(key, v)?,
            "train.crop_size" => t.crop_size = parse(key, v)?,
            "train.grad_clip" => t.grad_clip = parse(key, v)?,
            "train.beta1" => t.beta1 = parse(key, v)?,
            "train.beta2" => t.beta2 = parse(key, v)?,
            "train.adam_eps" => t.adam_eps = parse(key, v)?,
            "train.mirror_p" => t.mirror_p = parse(key, v)?,
            "train.blur_p" => t.blur_p = parse(key, v)?,
            "train.density_sigma" => t.density_sigma = parse(key, v)?,
            "train.checkpoint_every" => t.checkpoint_every = parse(key, v)?,
            "bench.train_scenes" => b.train_scenes = parse(key, v)?,
            "bench.train_images" => b.train_images = parse(key, v)?,
            "bench.test_scenes" => b.test_scenes = parse(key, v)?,
            "bench.test_images" => b.test_images = parse(key, v)?,
            "bench.image_size" => b.image_size = parse(key, v)?,
            "bench.intensity_high" => b.intensities[0] = parse(key, v)?,
            "bench.intensity_mid" => b.intensities[1] = parse(key, v)?,
            "bench.intensity_low" => b.intensities[2] = parse(key, v)?,
            "bench.stamp_sigma" => b.stamp_sigma = parse(key, v)?,
            "ablation.seeds" => self.ablation_seeds = parse(key, v)?,
            _ => return Err(Error::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    pub fn entries(&self) -> Vec<(&'static str, String)> {
        KEYS.iter()
            .map(|(k, _)| (*k, self.get(k).expect("every listed key is readable")))
            .collect()
    }

    /// Defaults overridden by the `key = value` lines of `text`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Data(format!("line {}: expected `key = value`, got `{line}`", lineno + 1)))?;
            cfg.set(k.trim(), v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        }
        out
    }

    /// Keys whose values differ.
    pub fn diff(&self, other: &RunConfig) -> Vec<&'static str> {
        self.entries()
            .into_iter()
            .zip(other.entries())
            .filter(|(a, b)| a.1 != b.1)
            .map(|(a, _)| a.0)
            .collect()
    }

    /// FNV-1a of the canonical text form.
    pub fn fingerprint(&self) -> u64 {
        fnv1a(self.to_text().as_bytes())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        let b = &self.bench;
        let f = self.model.backbone.downsample_factor();
        if b.image_size == 0 || b.image_size % f != 0 || self.train.crop_size % f != 0 {
            return Err(Error::InvalidHyperparameter(format!(
                "image_size and crop_size must be multiples of the downsample factor {f}"
            )));
        }
        if self.train.crop_size > b.image_size {
            return Err(Error::CropTooLarge {
                crop: (self.train.crop_size, self.train.crop_size),
                image: (b.image_size, b.image_size),
            });
        }
        Ok(())
    }
}
