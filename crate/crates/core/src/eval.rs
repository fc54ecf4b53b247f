//! Count metrics, per-scene evaluation and the ablation harness.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::Rng;

use crate::config::RunConfig;
use crate::density::{encode_density, DensityMap, RoiMask};
use crate::episodes::{synthetic_benchmark, Scene, SceneImage};
use crate::math;
use crate::model::Model;
use crate::rng;
use crate::trainer::{adapt_and_predict, train_base};
use crate::{Error, Result};

fn check_lengths(preds: &[f64], gts: &[f64]) -> Result<()> {
    if preds.len() != gts.len() {
        return Err(Error::LengthMismatch {
            left: preds.len(),
            right: gts.len(),
        });
    }
    if preds.is_empty() {
        return Err(Error::EmptyInput);
    }
    Ok(())
}

/// Mean absolute count error.
pub fn mae(preds: &[f64], gts: &[f64]) -> Result<f64> {
    check_lengths(preds, gts)?;
    Ok(preds.iter().zip(gts).map(|(p, g)| math::abs(p - g)).sum::<f64>() / preds.len() as f64)
}

/// Root mean squared count error (reported under the name MSE).
pub fn mse(preds: &[f64], gts: &[f64]) -> Result<f64> {
    check_lengths(preds, gts)?;
    let ms = preds.iter().zip(gts).map(|(p, g)| (p - g) * (p - g)).sum::<f64>() / preds.len() as f64;
    Ok(math::sqrt(ms))
}

/// Anything that can count the queries of a scene given one annotated support.
pub trait Predictor {
    fn predict_counts(
        &self,
        support: &SceneImage,
        support_gt: &DensityMap,
        queries: &[&SceneImage],
        roi: Option<&RoiMask>,
    ) -> Result<Vec<f64>>;
}

impl Predictor for Model {
    fn predict_counts(
        &self,
        support: &SceneImage,
        support_gt: &DensityMap,
        queries: &[&SceneImage],
        roi: Option<&RoiMask>,
    ) -> Result<Vec<f64>> {
        let images: Vec<_> = queries.iter().map(|q| &q.image).collect();
        let a = adapt_and_predict(self, &support.name, &support.image, support_gt, &images, roi)?;
        Ok(a.predictions.into_iter().map(|(_, c)| c).collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QueryRecord {
    pub scene_id: String,
    pub image: String,
    pub predicted: f64,
    pub actual: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneReport {
    pub scene_id: String,
    pub support: String,
    pub mae: f64,
    pub mse: f64,
    pub n_queries: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub seed: u64,
    pub per_scene: Vec<SceneReport>,
    /// Pooled over every query.
    pub mae: f64,
    pub mse: f64,
    /// Mean of the per-scene values.
    pub scene_mean_mae: f64,
    pub scene_mean_mse: f64,
    pub queries: Vec<QueryRecord>,
}

impl EvalReport {
    /// Pooled `(mae, mse)` recomputed from the query log.
    pub fn recompute(&self) -> Result<(f64, f64)> {
        let p: Vec<f64> = self.queries.iter().map(|q| q.predicted).collect();
        let g: Vec<f64> = self.queries.iter().map(|q| q.actual).collect();
        Ok((mae(&p, &g)?, mse(&p, &g)?))
    }
}

/// Ground-truth count of a query, restricted to the ROI when one is given.
fn true_count(img: &SceneImage, roi: Option<&RoiMask>) -> f64 {
    match roi {
        Some(r) => img.annotation.points().iter().filter(|&&(x, y)| r.contains(x, y)).count() as f64,
        None => img.annotation.count() as f64,
    }
}

/// Index of the fixed support image used for `scene` under `seed`.
pub fn support_index(scene: &Scene, seed: u64) -> usize {
    rng::derived(seed, &scene.scene_id).random_range(0..scene.images.len())
}

/// One seeded support per scene; every other image is a query.
pub fn evaluate(predictor: &impl Predictor, scenes: &[Scene], seed: u64, sigma: f64) -> Result<EvalReport> {
    if scenes.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut per_scene = Vec::new();
    let mut queries = Vec::new();
    for scene in scenes {
        if scene.images.len() < 2 {
            return Err(Error::SceneTooSmall {
                scene_id: scene.scene_id.clone(),
                images: scene.images.len(),
            });
        }
        let s = support_index(scene, seed);
        let support = &scene.images[s];
        let gt = encode_density(&support.annotation, sigma, (support.image.height(), support.image.width()))?;
        let qs: Vec<&SceneImage> = scene.images.iter().enumerate().filter(|(i, _)| *i != s).map(|(_, q)| q).collect();
        let preds = predictor.predict_counts(support, &gt, &qs, scene.roi.as_ref())?;
        let gts: Vec<f64> = qs.iter().map(|q| true_count(q, scene.roi.as_ref())).collect();
        per_scene.push(SceneReport {
            scene_id: scene.scene_id.clone(),
            support: support.name.clone(),
            mae: mae(&preds, &gts)?,
            mse: mse(&preds, &gts)?,
            n_queries: qs.len(),
        });
        for ((q, p), g) in qs.iter().zip(&preds).zip(&gts) {
            queries.push(QueryRecord {
                scene_id: scene.scene_id.clone(),
                image: q.name.clone(),
                predicted: *p,
                actual: *g,
            });
        }
    }
    let n = per_scene.len() as f64;
    let mut report = EvalReport {
        seed,
        scene_mean_mae: per_scene.iter().map(|s| s.mae).sum::<f64>() / n,
        scene_mean_mse: per_scene.iter().map(|s| s.mse).sum::<f64>() / n,
        per_scene,
        mae: 0.0,
        mse: 0.0,
        queries,
    };
    let (m, r) = report.recompute()?;
    report.mae = m;
    report.mse = r;
    Ok(report)
}

/// Which experiment family to run.
#[derive(Clone, Debug, PartialEq)]
pub enum Suite {
    /// Sweep of the prototype count.
    Prototypes(Vec<usize>),
    /// Sweep of the third guidance conv's dilation.
    Dilation(Vec<usize>),
    /// Full model, without global guidance, without local guidance.
    Components,
}

impl Suite {
    pub fn parse(name: &str) -> Result<Suite> {
        match name {
            "prototypes" | "k" => Ok(Suite::Prototypes((1..=5).collect())),
            "dilation" | "dr" => Ok(Suite::Dilation((1..=3).collect())),
            "components" | "guidance" => Ok(Suite::Components),
            other => Err(Error::InvalidValue {
                key: "suite".to_string(),
                value: other.to_string(),
            }),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Suite::Prototypes(_) => "prototypes",
            Suite::Dilation(_) => "dilation",
            Suite::Components => "components",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Variant {
    pub name: String,
    pub config: RunConfig,
    /// Keys that differ from the base configuration.
    pub changed: Vec<&'static str>,
}

/// Expand a suite into configurations, checking that each one differs from
/// `base` only in the keys the suite is about.
pub fn variants(suite: &Suite, base: &RunConfig) -> Result<Vec<Variant>> {
    let mut out = Vec::new();
    let mut push = |name: String, allowed: &[&str], edit: &dyn Fn(&mut RunConfig) -> Result<()>| -> Result<()> {
        let mut cfg = base.clone();
        edit(&mut cfg)?;
        cfg.validate()?;
        let changed = cfg.diff(base);
        if let Some(k) = changed.iter().find(|k| !allowed.contains(k)) {
            return Err(Error::Data(format!("variant `{name}` unexpectedly changes `{k}`")));
        }
        out.push(Variant {
            name,
            config: cfg,
            changed,
        });
        Ok(())
    };
    match suite {
        Suite::Prototypes(ks) => {
            for &k in ks {
                push(format!("K={k}"), &["mldl.prototypes"], &|c| c.set("mldl.prototypes", &k.to_string()))?;
            }
        }
        Suite::Dilation(ds) => {
            for &d in ds {
                push(format!("DR={d}"), &["guidance.dilation_rate"], &|c| {
                    c.set("guidance.dilation_rate", &d.to_string())
                })?;
            }
        }
        Suite::Components => {
            let keys = ["guidance.use_ldg", "guidance.use_gdg"];
            push("full".to_string(), &keys, &|c| {
                c.set("guidance.use_ldg", "true")?;
                c.set("guidance.use_gdg", "true")
            })?;
            push("w/o GDG".to_string(), &keys, &|c| {
                c.set("guidance.use_ldg", "true")?;
                c.set("guidance.use_gdg", "false")
            })?;
            push("w/o LDG".to_string(), &keys, &|c| {
                c.set("guidance.use_ldg", "false")?;
                c.set("guidance.use_gdg", "true")
            })?;
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeedRun {
    pub seed: u64,
    pub mae: f64,
    pub mse: f64,
    pub untrained_mae: f64,
    pub skipped: usize,
    pub final_loss: f64,
}

/// Train on the synthetic benchmark generated from `seed`, then evaluate the
/// trained and the untrained model on its test scenes.
pub fn run_seed(cfg: &RunConfig, seed: u64) -> Result<(SeedRun, Model, EvalReport)> {
    let bench = synthetic_benchmark(&cfg.bench, seed)?;
    let sigma = cfg.train.density_sigma;
    let untrained = Model::new(cfg.model.clone(), seed)?;
    let before = evaluate(&untrained, &bench.test, seed, sigma)?;
    let outcome = train_base(&bench.train, &cfg.model, &cfg.train, seed)?;
    let report = evaluate(&outcome.model, &bench.test, seed, sigma)?;
    let tail: Vec<f64> = outcome
        .trace
        .iter()
        .rev()
        .take(100)
        .map(|r| r.loss)
        .filter(|l| l.is_finite())
        .collect();
    let final_loss = if tail.is_empty() {
        f64::NAN
    } else {
        tail.iter().sum::<f64>() / tail.len() as f64
    };
    let run = SeedRun {
        seed,
        mae: report.mae,
        mse: report.mse,
        untrained_mae: before.mae,
        skipped: outcome.skipped,
        final_loss,
    };
    Ok((run, outcome.model, report))
}

#[derive(Clone, Debug, PartialEq)]
pub struct VariantResult {
    pub name: String,
    pub changed: Vec<(String, String)>,
    pub runs: Vec<SeedRun>,
    pub median_mae: f64,
    pub median_mse: f64,
    pub median_untrained_mae: f64,
}

/// Seeds `base_seed, base_seed + 1, ...` used by the harness.
pub fn seed_schedule(cfg: &RunConfig) -> Vec<u64> {
    (0..cfg.ablation_seeds as u64).map(|i| cfg.seed + i).collect()
}

pub fn run_variant(variant: &Variant, seeds: &[u64], progress: &mut dyn FnMut(&str)) -> Result<VariantResult> {
    let mut runs = Vec::new();
    for &seed in seeds {
        let (run, _, _) = run_seed(&variant.config, seed)?;
        progress(&format!(
            "{}: seed {} MAE {:.3} MSE {:.3} (untrained {:.3})",
            variant.name, seed, run.mae, run.mse, run.untrained_mae
        ));
        runs.push(run);
    }
    Ok(summarize(variant, runs))
}

pub fn summarize(variant: &Variant, runs: Vec<SeedRun>) -> VariantResult {
    let med = |f: fn(&SeedRun) -> f64| math::median(&runs.iter().map(f).collect::<Vec<_>>());
    VariantResult {
        name: variant.name.clone(),
        changed: variant
            .changed
            .iter()
            .map(|k| (k.to_string(), variant.config.get(k).unwrap_or_default()))
            .collect(),
        median_mae: med(|r| r.mae),
        median_mse: med(|r| r.mse),
        median_untrained_mae: med(|r| r.untrained_mae),
        runs,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationTable {
    pub suite: String,
    pub seeds: Vec<u64>,
    pub variants: Vec<VariantResult>,
}

pub fn run_ablation(suite: &Suite, base: &RunConfig, progress: &mut dyn FnMut(&str)) -> Result<AblationTable> {
    let seeds = seed_schedule(base);
    let mut results = Vec::new();
    for v in variants(suite, base)? {
        results.push(run_variant(&v, &seeds, progress)?);
    }
    Ok(AblationTable {
        suite: suite.name().to_string(),
        seeds,
        variants: results,
    })
}
