//! Base-model training and test-time adaptation.
//!
//! Training runs the whole one-shot pipeline per episode; the EM fit inside
//! it produces constants, so gradients reach the backbone, guidance and head
//! only. Adaptation fits prototypes once on the support of an unseen scene
//! and decodes every query with the parameters frozen.

use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;

use crate::density::{apply_mask, downsample_preserving_count, encode_density, integrate_count, DensityMap, RoiMask};
use crate::episodes::{augment, sample_episode, AugmentConfig, Image, Scene};
use crate::guidance::{decode_query, encode_support};
use crate::math;
use crate::mldl::{EmFit, PrototypeSet};
use crate::model::{Model, ModelConfig, ParamStore};
use crate::rng::{self, SeededRng};
use crate::tensor::{Tape, Tensor, Var};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub poly_power: f64,
    pub crop_size: usize,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub grad_clip: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub mirror_p: f64,
    pub blur_p: f64,
    /// Ground-truth kernel width in image pixels.
    pub density_sigma: f64,
    /// Snapshot interval in iterations; 0 means only the final model.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 4,
            iterations: 2000,
            poly_power: 0.9,
            crop_size: 32,
            grad_clip: 5.0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            mirror_p: 0.5,
            blur_p: 0.3,
            density_sigma: 4.0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidHyperparameter(m.into()));
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if self.batch_size < 1 {
            return bad("batch_size must be >= 1");
        }
        if self.crop_size < 1 {
            return bad("crop_size must be >= 1");
        }
        if !(0.0..=1.0).contains(&self.mirror_p) || !(0.0..=1.0).contains(&self.blur_p) {
            return bad("augmentation probabilities must lie in [0, 1]");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must lie in [0, 1)");
        }
        if !(self.density_sigma > 0.0) {
            return Err(Error::NonPositiveSigma(self.density_sigma));
        }
        Ok(())
    }

    pub fn augmentation(&self) -> AugmentConfig {
        AugmentConfig {
            mirror_p: self.mirror_p,
            blur_p: self.blur_p,
            blur_sigma: (0.5, 1.5),
            crop: Some(self.crop_size),
        }
    }
}

/// `0.5 · Σ (pred − gt)²`.
pub fn euclidean_loss(pred: &DensityMap, gt: &DensityMap) -> Result<f64> {
    if pred.grid().shape() != gt.grid().shape() {
        return Err(Error::ShapeMismatch {
            op: "euclidean_loss",
            lhs: pred.grid().shape().to_vec(),
            rhs: gt.grid().shape().to_vec(),
        });
    }
    Ok(0.5
        * pred
            .values()
            .iter()
            .zip(gt.values())
            .map(|(p, g)| (p - g) * (p - g))
            .sum::<f64>())
}

/// Tape version of [`euclidean_loss`] against a constant target.
pub fn euclidean_loss_on_tape(tape: &mut Tape, pred: Var, gt: &Tensor) -> Result<Var> {
    if tape.shape(pred) != gt.shape() {
        return Err(Error::ShapeMismatch {
            op: "euclidean_loss",
            lhs: tape.shape(pred).to_vec(),
            rhs: gt.shape().to_vec(),
        });
    }
    let target = tape.constant(gt.clone());
    let diff = tape.sub(pred, target)?;
    let sq = tape.mul(diff, diff)?;
    let total = tape.sum(sq)?;
    tape.scale(total, 0.5)
}

/// `base_lr · (1 − step/total)^power`.
pub fn poly_lr(step: usize, total: usize, base_lr: f64, power: f64) -> f64 {
    if total == 0 {
        return base_lr;
    }
    let frac = 1.0 - (step.min(total) as f64 / total as f64);
    base_lr * math::powf(frac, power)
}

/// Adam moments, one pair per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        OptimizerState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// Scale `grads` in place so their joint L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = math::sqrt(grads.iter().flat_map(|g| g.data()).map(|v| v * v).sum());
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for g in grads {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

pub fn adam_step(
    params: &mut ParamStore,
    grads: &[Tensor],
    state: &mut OptimizerState,
    lr: f64,
    config: &TrainConfig,
) {
    state.step += 1;
    let t = state.step as f64;
    let (b1, b2) = (config.beta1, config.beta2);
    let c1 = 1.0 - math::powf(b1, t);
    let c2 = 1.0 - math::powf(b2, t);
    for (i, id) in params.ids().collect::<Vec<_>>().into_iter().enumerate() {
        let p = params.get_mut(id).data_mut();
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        for (((p, m), v), g) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(grads[i].data()) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let mhat = *m / c1;
            let vhat = *v / c2;
            *p -= lr * mhat / (math::sqrt(vhat) + config.adam_eps);
        }
    }
}

/// One row of the loss trace.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceRow {
    pub iter: usize,
    /// Mean per-episode loss over the episodes that were not skipped; NaN
    /// when the whole batch was skipped.
    pub loss: f64,
    pub lr: f64,
    /// Episodes skipped in this iteration for a degenerate support.
    pub skipped: usize,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub trace: Vec<TraceRow>,
    pub skipped: usize,
}

/// Stateful training loop; [`train_base`] drives it to completion.
pub struct Trainer {
    model: Model,
    config: TrainConfig,
    state: OptimizerState,
    rng: SeededRng,
    trace: Vec<TraceRow>,
    iteration: usize,
}

impl Trainer {
    pub fn new(model: Model, config: TrainConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let state = OptimizerState::new(model.params());
        Ok(Trainer {
            model,
            config,
            state,
            rng: rng::derived(seed, "train"),
            trace: Vec::new(),
            iteration: 0,
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn trace(&self) -> &[TraceRow] {
        &self.trace
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    /// Sample a batch of episodes, accumulate gradients and take one Adam
    /// step at the scheduled learning rate.
    pub fn step(&mut self, scenes: &[Scene]) -> Result<TraceRow> {
        if scenes.is_empty() {
            return Err(Error::EmptyInput);
        }
        let lr = poly_lr(self.iteration, self.config.iterations, self.config.learning_rate, self.config.poly_power);
        let mut grads: Vec<Tensor> = self.model.params().iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        let mut total = 0.0;
        let mut trained = 0;
        let mut skipped = 0;
        for _ in 0..self.config.batch_size {
            let scene = &scenes[self.rng.random_range(0..scenes.len())];
            match self.episode_gradients(scene)? {
                Some((loss, g)) => {
                    total += loss;
                    trained += 1;
                    for (acc, gi) in grads.iter_mut().zip(&g) {
                        acc.data_mut().iter_mut().zip(gi.data()).for_each(|(a, b)| *a += b);
                    }
                }
                None => skipped += 1,
            }
        }
        let loss = if trained > 0 {
            let inv = 1.0 / trained as f64;
            for g in &mut grads {
                g.data_mut().iter_mut().for_each(|v| *v *= inv);
            }
            clip_global_norm(&mut grads, self.config.grad_clip);
            adam_step(self.model.params_mut(), &grads, &mut self.state, lr, &self.config);
            total * inv
        } else {
            f64::NAN
        };
        let row = TraceRow {
            iter: self.iteration,
            loss,
            lr,
            skipped,
        };
        self.trace.push(row);
        self.iteration += 1;
        Ok(row)
    }

    /// Loss and parameter gradients for one random (support, query) pair,
    /// or `None` when the augmented support has no crowd.
    fn episode_gradients(&mut self, scene: &Scene) -> Result<Option<(f64, Vec<Tensor>)>> {
        let rng = &mut self.rng;
        let episode = sample_episode(scene, rng)?;
        let q = episode.queries[rng.random_range(0..episode.queries.len())];
        let support = episode.support(scene);
        let query = &scene.images[q];
        let aug = self.config.augmentation();
        let (s_img, s_ann) = augment(&support.image, &support.annotation, rng, &aug)?;
        let (q_img, q_ann) = augment(&query.image, &query.annotation, rng, &aug)?;
        let sigma = self.config.density_sigma;
        let s_gt = encode_density(&s_ann, sigma, (s_img.height(), s_img.width()))?;
        let q_gt = encode_density(&q_ann, sigma, (q_img.height(), q_img.width()))?;
        let factor = self.model.backbone().downsample_factor();
        let q_gt = downsample_preserving_count(&q_gt, factor)?;

        let mut tape = Tape::new();
        let bound = self.model.params().bind(&mut tape, true);
        let enc = match encode_support(&self.model, &mut tape, &bound, s_img.tensor(), &s_gt, None) {
            Ok(e) => e,
            Err(Error::AllSamplesDegenerate) => return Ok(None),
            Err(e) => return Err(e),
        };
        let pred = decode_query(&self.model, &mut tape, &bound, &enc, q_img.tensor())?;
        let loss = euclidean_loss_on_tape(&mut tape, pred, q_gt.grid())?;
        tape.backward(loss)?;
        let value = tape.value(loss).data()[0];
        Ok(Some((value, self.model.params().gradients(&tape, &bound))))
    }

    pub fn finish(self) -> TrainOutcome {
        let skipped = self.trace.iter().map(|r| r.skipped).sum();
        TrainOutcome {
            model: self.model,
            trace: self.trace,
            skipped,
        }
    }
}

/// Train a freshly initialised model for `config.iterations` steps.
pub fn train_base(scenes: &[Scene], model: &ModelConfig, config: &TrainConfig, seed: u64) -> Result<TrainOutcome> {
    train_base_with(scenes, model, config, seed, |_, _| Ok(()))
}

/// [`train_base`] with a callback receiving every intermediate snapshot
/// (`config.checkpoint_every`) as `(completed_iterations, model)`.
pub fn train_base_with(
    scenes: &[Scene],
    model: &ModelConfig,
    config: &TrainConfig,
    seed: u64,
    mut on_checkpoint: impl FnMut(usize, &Model) -> Result<()>,
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(Model::new(model.clone(), seed)?, config.clone(), seed)?;
    for i in 0..config.iterations {
        trainer.step(scenes)?;
        let done = i + 1;
        if config.checkpoint_every > 0 && done % config.checkpoint_every == 0 && done < config.iterations {
            on_checkpoint(done, trainer.model())?;
        }
    }
    Ok(trainer.finish())
}

/// Result of adapting to one support image.
#[derive(Clone, Debug)]
pub struct Adaptation {
    pub prototypes: PrototypeSet,
    pub fit: EmFit,
    /// Feature-resolution density and its integral, per query.
    pub predictions: Vec<(DensityMap, f64)>,
}

/// Fit the prototypes on the annotated support and decode every query with
/// the model's parameters frozen. With `roi`, predicted maps are weighted by
/// the mask's per-cell coverage and the support density is masked first.
pub fn adapt_and_predict(
    model: &Model,
    support_name: &str,
    support: &Image,
    gt_support: &DensityMap,
    queries: &[&Image],
    roi: Option<&RoiMask>,
) -> Result<Adaptation> {
    let factor = model.backbone().downsample_factor();
    let (gt, coverage) = match roi {
        Some(r) => (apply_mask(gt_support, r)?, Some(r.coverage(factor)?)),
        None => (gt_support.clone(), None),
    };
    let mut tape = Tape::new();
    let bound = model.params().bind(&mut tape, false);
    let enc = encode_support(model, &mut tape, &bound, support.tensor(), &gt, None).map_err(|e| match e {
        Error::AllSamplesDegenerate => Error::DegenerateSupport {
            image: String::from(support_name),
        },
        other => other,
    })?;
    let fit = enc.fit.clone().expect("encode_support fits prototypes when none are given");
    let mut predictions = Vec::with_capacity(queries.len());
    for q in queries {
        let y = decode_query(model, &mut tape, &bound, &enc, q.tensor())?;
        let mut grid = tape.value(y).clone();
        if let Some(c) = &coverage {
            if c.shape() != grid.shape() {
                return Err(Error::ShapeMismatch {
                    op: "roi coverage",
                    lhs: c.shape().to_vec(),
                    rhs: grid.shape().to_vec(),
                });
            }
            grid.data_mut().iter_mut().zip(c.data()).for_each(|(v, m)| *v *= m);
        }
        let dm = DensityMap::new(grid, None)?;
        let count = integrate_count(&dm);
        predictions.push((dm, count));
    }
    Ok(Adaptation {
        prototypes: enc.prototypes,
        fit,
        predictions,
    })
}
