//! Multiple local density learner.
//!
//! Support feature columns weighted by ground-truth density are projected onto
//! the unit sphere and clustered into `V` prototype directions by EM under a
//! von Mises-Fisher mixture with a shared, fixed concentration `r` and uniform
//! mixing weights. Because the normalizer `β_c(r)` is shared by every
//! component it cancels in the posterior, which reduces to a softmax of
//! `r·μᵀs` over components; the Bessel function is never evaluated. The M-step
//! takes the responsibility-weighted mean direction and projects it back to
//! the sphere.
//!
//! Prototypes are initialised deterministically from the samples sitting at
//! the density quantiles (highest, ..., lowest mass), so component `0` starts
//! in the densest region and the last in the sparsest.

use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use crate::backbone::FeatureMap;
use crate::density::{downsample_preserving_count, DensityMap};
use crate::math;
use crate::tensor::{Tape, Tensor};
use crate::{Error, Result};

/// Cells whose downsampled ground-truth density is below this carry no crowd
/// evidence and are left out of EM.
pub const MIN_SAMPLE_DENSITY: f64 = 1e-12;
/// Columns with a smaller L2 norm cannot be put on the sphere.
pub const MIN_SAMPLE_NORM: f64 = 1e-8;
/// A component whose total responsibility drops below this is reseeded.
pub const MIN_COMPONENT_MASS: f64 = 1e-8;

/// Support features multiplied cell-wise by the count-preserving downsampled
/// ground-truth density, `[C×h×w]`, together with that density plane.
#[derive(Clone, Debug, PartialEq)]
pub struct SupportDensityFeature {
    data: Tensor,
    density: Vec<f64>,
}

impl SupportDensityFeature {
    /// `data` is `[C×h×w]`; `density` holds the `h·w` per-cell density used
    /// for sample exclusion and prototype initialisation.
    pub fn new(data: Tensor, density: Vec<f64>) -> Result<Self> {
        if data.rank() != 3 || data.shape()[1] * data.shape()[2] != density.len() {
            return Err(Error::ShapeMismatch {
                op: "support density feature",
                lhs: data.shape().to_vec(),
                rhs: vec![density.len()],
            });
        }
        Ok(SupportDensityFeature { data, density })
    }

    pub fn data(&self) -> &Tensor {
        &self.data
    }

    pub fn density(&self) -> &[f64] {
        &self.density
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn cells(&self) -> usize {
        self.density.len()
    }

    /// Same feature scaled by `factor`, density untouched.
    pub fn scaled(&self, factor: f64) -> Self {
        SupportDensityFeature {
            data: self.data.map(|v| v * factor),
            density: self.density.clone(),
        }
    }
}

/// Downsample `gt` (image resolution) by `factor` and multiply it into every
/// channel of the support features.
pub fn build_support_density_feature(
    support: &FeatureMap,
    gt: &DensityMap,
    factor: usize,
) -> Result<SupportDensityFeature> {
    let down = downsample_preserving_count(gt, factor)?;
    let feat = support.data();
    let (c, h, w) = (feat.shape()[0], feat.shape()[1], feat.shape()[2]);
    if down.height() != h || down.width() != w {
        return Err(Error::ShapeMismatch {
            op: "build_support_density_feature",
            lhs: feat.shape().to_vec(),
            rhs: down.grid().shape().to_vec(),
        });
    }
    let density = down.values().to_vec();
    let n = h * w;
    let mut data = feat.data().to_vec();
    for ch in 0..c {
        for (v, d) in data[ch * n..(ch + 1) * n].iter_mut().zip(&density) {
            *v *= d;
        }
    }
    SupportDensityFeature::new(Tensor::new(vec![c, h, w], data)?, density)
}

/// Unit-norm EM samples, one row per retained cell.
#[derive(Clone, Debug, PartialEq)]
pub struct Samples {
    rows: Tensor,
    weights: Tensor,
    density: Vec<f64>,
    cells: Vec<usize>,
    excluded: Vec<usize>,
}

impl Samples {
    /// Normalise arbitrary `[I×C]` rows. Row norms become the weights and the
    /// density ordering used for initialisation.
    pub fn from_rows(rows: &Tensor) -> Result<Self> {
        if rows.rank() != 2 {
            return Err(Error::ShapeMismatch {
                op: "samples",
                lhs: rows.shape().to_vec(),
                rhs: vec![0, 0],
            });
        }
        let (n, c) = (rows.shape()[0], rows.shape()[1]);
        let norms: Vec<f64> = rows
            .data()
            .chunks_exact(c)
            .map(|r| math::sqrt(r.iter().map(|v| v * v).sum()))
            .collect();
        Self::collect(c, n, |i, ch| rows.data()[i * c + ch], &norms, &norms)
    }

    fn collect(
        c: usize,
        n: usize,
        value: impl Fn(usize, usize) -> f64,
        norms: &[f64],
        density: &[f64],
    ) -> Result<Self> {
        let mut rows = Vec::new();
        let mut weights = Vec::new();
        let mut dens = Vec::new();
        let mut cells = Vec::new();
        let mut excluded = Vec::new();
        for i in 0..n {
            if density[i] < MIN_SAMPLE_DENSITY || norms[i] < MIN_SAMPLE_NORM {
                excluded.push(i);
                continue;
            }
            rows.extend((0..c).map(|ch| value(i, ch) / norms[i]));
            weights.push(norms[i]);
            dens.push(density[i]);
            cells.push(i);
        }
        if cells.is_empty() {
            return Err(Error::AllSamplesDegenerate);
        }
        Ok(Samples {
            rows: Tensor::new(vec![cells.len(), c], rows)?,
            weights: Tensor::new(vec![cells.len()], weights)?,
            density: dens,
            cells,
            excluded,
        })
    }

    /// `[I×C]`, unit rows.
    pub fn rows(&self) -> &Tensor {
        &self.rows
    }

    /// Original column norms, `[I]`.
    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn density(&self) -> &[f64] {
        &self.density
    }

    /// Source cell index of every retained sample.
    pub fn cells(&self) -> &[usize] {
        &self.cells
    }

    /// Cells left out for zero density or a near-zero column.
    pub fn excluded(&self) -> &[usize] {
        &self.excluded
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.rows.shape()[1]
    }

    fn row(&self, i: usize) -> &[f64] {
        let c = self.dim();
        &self.rows.data()[i * c..(i + 1) * c]
    }
}

/// Put every density-bearing spatial column of `sdf` on the unit sphere.
pub fn prepare_samples(sdf: &SupportDensityFeature) -> Result<Samples> {
    let (c, n) = (sdf.channels(), sdf.cells());
    let d = sdf.data.data();
    let mut norms = vec![0.0; n];
    for ch in 0..c {
        for (q, v) in norms.iter_mut().zip(&d[ch * n..(ch + 1) * n]) {
            *q += v * v;
        }
    }
    for q in &mut norms {
        *q = math::sqrt(*q);
    }
    Samples::collect(c, n, |i, ch| d[ch * n + i], &norms, &sdf.density)
}

/// Posterior component memberships, `[I×V]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Responsibilities {
    e: Tensor,
}

impl Responsibilities {
    pub fn tensor(&self) -> &Tensor {
        &self.e
    }

    pub fn components(&self) -> usize {
        self.e.shape()[1]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let v = self.components();
        &self.e.data()[i * v..(i + 1) * v]
    }
}

/// Unit-norm prototype directions `[V×C]` and the concentration they were fitted with.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeSet {
    mu: Tensor,
    concentration: f64,
}

impl PrototypeSet {
    pub fn new(mu: Tensor, concentration: f64) -> Result<Self> {
        if mu.rank() != 2 || mu.shape()[0] == 0 {
            return Err(Error::ShapeMismatch {
                op: "prototype set",
                lhs: mu.shape().to_vec(),
                rhs: vec![0, 0],
            });
        }
        if !(concentration > 0.0) {
            return Err(Error::InvalidHyperparameter(alloc::format!(
                "concentration must be positive, got {concentration}"
            )));
        }
        Ok(PrototypeSet { mu, concentration })
    }

    pub fn mu(&self) -> &Tensor {
        &self.mu
    }

    pub fn concentration(&self) -> f64 {
        self.concentration
    }

    pub fn len(&self) -> usize {
        self.mu.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.mu.shape()[1]
    }

    pub fn direction(&self, v: usize) -> &[f64] {
        let c = self.dim();
        &self.mu.data()[v * c..(v + 1) * c]
    }
}

/// E-step: `E[i,v] = softmax_v(r · μ_vᵀ s_i)`.
pub fn em_step_e(samples: &Samples, mu: &Tensor, concentration: f64) -> Result<Responsibilities> {
    let c = samples.dim();
    if mu.rank() != 2 || mu.shape()[1] != c {
        return Err(Error::ShapeMismatch {
            op: "em_step_e",
            lhs: samples.rows.shape().to_vec(),
            rhs: mu.shape().to_vec(),
        });
    }
    let v = mu.shape()[0];
    let mut e = Vec::with_capacity(samples.len() * v);
    let mut logits = vec![0.0; v];
    for i in 0..samples.len() {
        let s = samples.row(i);
        for (l, m) in logits.iter_mut().zip(mu.data().chunks_exact(c)) {
            *l = concentration * dot(m, s);
        }
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = logits.iter().map(|l| math::exp(l - max)).sum();
        e.extend(logits.iter().map(|l| math::exp(l - max) / total));
    }
    Ok(Responsibilities {
        e: Tensor::new(vec![samples.len(), v], e)?,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct MStep {
    pub mu: Tensor,
    /// Components that lost all responsibility mass and were restarted.
    pub reseeded: usize,
}

/// M-step: responsibility-weighted mean direction per component, projected
/// back onto the sphere. With `weighted`, each sample also carries its
/// original column norm.
pub fn em_step_m(samples: &Samples, resp: &Responsibilities, weighted: bool) -> MStep {
    let c = samples.dim();
    let v = resp.components();
    let mut sums = vec![0.0; v * c];
    let mut mass = vec![0.0; v];
    for i in 0..samples.len() {
        let w = if weighted {
            samples.weights.data()[i]
        } else {
            1.0
        };
        let s = samples.row(i);
        for (k, &e) in resp.row(i).iter().enumerate() {
            let ew = e * w;
            mass[k] += ew;
            for (acc, x) in sums[k * c..(k + 1) * c].iter_mut().zip(s) {
                *acc += ew * x;
            }
        }
    }
    let mut live = vec![false; v];
    for k in 0..v {
        let row = &mut sums[k * c..(k + 1) * c];
        let norm = math::sqrt(row.iter().map(|x| x * x).sum());
        if mass[k] >= MIN_COMPONENT_MASS && norm >= MIN_SAMPLE_NORM * mass[k].max(1.0) {
            row.iter_mut().for_each(|x| *x /= norm);
            live[k] = true;
        }
    }
    let mut reseeded = 0;
    for k in 0..v {
        if live[k] {
            continue;
        }
        // Restart from the sample worst explained by the components placed so far.
        let mut best = 0;
        let mut best_score = f64::INFINITY;
        for i in 0..samples.len() {
            let s = samples.row(i);
            let score = (0..v)
                .filter(|u| live[*u])
                .map(|u| dot(&sums[u * c..(u + 1) * c], s))
                .fold(f64::NEG_INFINITY, f64::max);
            if score < best_score {
                best_score = score;
                best = i;
            }
        }
        sums[k * c..(k + 1) * c].copy_from_slice(samples.row(best));
        live[k] = true;
        reseeded += 1;
    }
    MStep {
        mu: Tensor::new(vec![v, c], sums).expect("shape fixed above"),
        reseeded,
    }
}

/// `Σ_i w_i · log Σ_v exp(r · μ_vᵀ s_i)`, the mixture log-likelihood up to an
/// additive constant.
pub fn surrogate_objective(samples: &Samples, mu: &Tensor, concentration: f64, weighted: bool) -> f64 {
    let c = samples.dim();
    let mut total = 0.0;
    for i in 0..samples.len() {
        let s = samples.row(i);
        let logits: Vec<f64> = mu
            .data()
            .chunks_exact(c)
            .map(|m| concentration * dot(m, s))
            .collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + math::ln(logits.iter().map(|l| math::exp(l - max)).sum());
        let w = if weighted {
            samples.weights.data()[i]
        } else {
            1.0
        };
        total += w * lse;
    }
    total
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EmConfig {
    pub num_prototypes: usize,
    pub concentration: f64,
    pub max_iter: usize,
    /// Stop once the mean `1 - cos` movement of the prototypes falls below this.
    pub tol: f64,
    pub weighted: bool,
}

impl Default for EmConfig {
    fn default() -> Self {
        EmConfig {
            num_prototypes: 3,
            concentration: 10.0,
            max_iter: 50,
            tol: 1e-6,
            weighted: false,
        }
    }
}

impl EmConfig {
    fn validate(&self) -> Result<()> {
        if self.num_prototypes < 1 {
            return Err(Error::InvalidHyperparameter("need at least one prototype".into()));
        }
        if self.max_iter < 1 {
            return Err(Error::InvalidHyperparameter("max_iter must be >= 1".into()));
        }
        if !(self.concentration > 0.0 && self.concentration.is_finite()) {
            return Err(Error::InvalidHyperparameter(alloc::format!(
                "concentration must be positive, got {}",
                self.concentration
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct EmFit {
    pub prototypes: PrototypeSet,
    pub responsibilities: Responsibilities,
    pub samples: Samples,
    /// Completed E/M rounds.
    pub iterations: usize,
    pub converged: bool,
    /// Objective at the initialisation followed by one entry per round.
    pub objective_trace: Vec<f64>,
    pub reseeds: usize,
}

/// Fit prototypes to a support density feature.
pub fn fit_prototypes(sdf: &SupportDensityFeature, config: &EmConfig) -> Result<EmFit> {
    config.validate()?;
    let samples = prepare_samples(sdf)?;
    fit_samples(samples, config)
}

/// Fit prototypes to already-prepared samples.
pub fn fit_samples(samples: Samples, config: &EmConfig) -> Result<EmFit> {
    config.validate()?;
    let r = config.concentration;
    let mut mu = initial_prototypes(&samples, config.num_prototypes);
    let mut trace = vec![surrogate_objective(&samples, &mu, r, config.weighted)];
    let mut iterations = 0;
    let mut converged = false;
    let mut reseeds = 0;
    let mut resp = em_step_e(&samples, &mu, r)?;
    while iterations < config.max_iter {
        let step = em_step_m(&samples, &resp, config.weighted);
        reseeds += step.reseeded;
        let movement = mean_movement(&mu, &step.mu);
        mu = step.mu;
        iterations += 1;
        trace.push(surrogate_objective(&samples, &mu, r, config.weighted));
        resp = em_step_e(&samples, &mu, r)?;
        if movement < config.tol {
            converged = true;
            break;
        }
    }
    Ok(EmFit {
        prototypes: PrototypeSet::new(mu, r)?,
        responsibilities: resp,
        samples,
        iterations,
        converged,
        objective_trace: trace,
        reseeds,
    })
}

/// Rows at the density quantiles: densest first, sparsest last. Ties in
/// density are broken by comparing the sample vectors, so the choice does
/// not depend on cell order.
pub fn initial_prototypes(samples: &Samples, count: usize) -> Tensor {
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.sort_by(|&a, &b| {
        samples.density[b]
            .total_cmp(&samples.density[a])
            .then_with(|| lexicographic(samples.row(a), samples.row(b)))
    });
    let last = samples.len() - 1;
    let mut mu = Vec::with_capacity(count * samples.dim());
    for j in 0..count {
        let pos = if count == 1 {
            0
        } else {
            // round(j · last / (count - 1)) in integer arithmetic
            (2 * j * last + (count - 1)) / (2 * (count - 1))
        };
        mu.extend_from_slice(samples.row(order[pos]));
    }
    Tensor::new(vec![count, samples.dim()], mu).expect("rows have sample dim")
}

fn lexicographic(a: &[f64], b: &[f64]) -> Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| *o != Ordering::Equal)
        .unwrap_or(Ordering::Equal)
}

fn mean_movement(old: &Tensor, new: &Tensor) -> f64 {
    let c = old.shape()[1];
    let v = old.shape()[0];
    old.data()
        .chunks_exact(c)
        .zip(new.data().chunks_exact(c))
        .map(|(a, b)| 1.0 - dot(a, b))
        .sum::<f64>()
        / v as f64
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Per-prototype cosine similarity planes against the query features, `[V×h×w]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalDensitySimilarityMatrix {
    delta: Tensor,
}

impl LocalDensitySimilarityMatrix {
    pub fn new(delta: Tensor) -> Result<Self> {
        if delta.rank() != 3 {
            return Err(Error::ShapeMismatch {
                op: "similarity matrix",
                lhs: delta.shape().to_vec(),
                rhs: vec![0, 0, 0],
            });
        }
        Ok(LocalDensitySimilarityMatrix { delta })
    }

    pub fn delta(&self) -> &Tensor {
        &self.delta
    }

    pub fn plane(&self, v: usize) -> &[f64] {
        let n = self.delta.shape()[1] * self.delta.shape()[2];
        &self.delta.data()[v * n..(v + 1) * n]
    }
}

pub fn encode_similarity(
    prototypes: &PrototypeSet,
    query: &FeatureMap,
) -> Result<LocalDensitySimilarityMatrix> {
    let mut tape = Tape::new();
    let q = tape.constant(query.data().clone());
    let planes = (0..prototypes.len())
        .map(|v| tape.cosine(q, prototypes.direction(v)))
        .collect::<Result<Vec<_>>>()?;
    let all = tape.concat(&planes)?;
    LocalDensitySimilarityMatrix::new(tape.value(all).clone())
}

/// Responsibility-weighted mean density of the samples owned by each
/// prototype: `Σ_i E[i,v] d_i / Σ_i E[i,v]`.
pub fn prototype_density_levels(fit: &EmFit) -> Vec<f64> {
    let v = fit.prototypes.len();
    let mut num = vec![0.0; v];
    let mut den = vec![0.0; v];
    for i in 0..fit.samples.len() {
        let d = fit.samples.density[i];
        for (k, &e) in fit.responsibilities.row(i).iter().enumerate() {
            num[k] += e * d;
            den[k] += e;
        }
    }
    num.iter().zip(&den).map(|(n, d)| n / d).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::Branch;
    use crate::rng::seeded;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn unit(v: &[f64]) -> Vec<f64> {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter().map(|x| x / n).collect()
    }

    fn random_unit(rng: &mut impl Rng, c: usize) -> Vec<f64> {
        let v: Vec<f64> = (0..c).map(|_| StandardNormal.sample(rng)).collect();
        unit(&v)
    }

    fn feature_map(t: Tensor) -> FeatureMap {
        FeatureMap::new(t, Branch::Query, 1).unwrap()
    }

    #[test]
    fn prepare_normalises_columns() {
        let sdf = SupportDensityFeature::new(
            Tensor::new(vec![2, 1, 2], vec![3.0, 0.0, 4.0, 0.0]).unwrap(),
            vec![1.0, 1.0],
        )
        .unwrap();
        let s = prepare_samples(&sdf).unwrap();
        assert_eq!(s.len(), 1);
        assert!((s.rows().data()[0] - 0.6).abs() < 1e-15);
        assert!((s.rows().data()[1] - 0.8).abs() < 1e-15);
        assert_eq!(s.weights().data(), &[5.0]);
        assert_eq!(s.excluded(), &[1]);
    }

    #[test]
    fn prepare_rejects_all_zero() {
        let sdf = SupportDensityFeature::new(Tensor::zeros(&[4, 3, 3]), vec![0.0; 9]).unwrap();
        assert_eq!(prepare_samples(&sdf).unwrap_err(), Error::AllSamplesDegenerate);
    }

    #[test]
    fn zero_density_cells_are_excluded_even_with_features() {
        let sdf = SupportDensityFeature::new(Tensor::ones(&[2, 1, 3]), vec![0.5, 0.0, 1e-13]).unwrap();
        let s = prepare_samples(&sdf).unwrap();
        assert_eq!(s.cells(), &[0]);
        assert_eq!(s.excluded(), &[1, 2]);
    }

    #[test]
    fn build_sdf_cases() {
        let mut rng = seeded(5);
        let feat = Tensor::uniform(&[3, 2, 2], -1.0, 1.0, &mut rng);
        let fm = FeatureMap::new(feat.clone(), Branch::Support, 2).unwrap();
        let zero = DensityMap::zeros(4, 4);
        let sdf = build_support_density_feature(&fm, &zero, 2).unwrap();
        assert!(sdf.data().data().iter().all(|v| *v == 0.0));

        let uniform = DensityMap::new(Tensor::full(&[1, 4, 4], 0.5), None).unwrap();
        let sdf = build_support_density_feature(&fm, &uniform, 2).unwrap();
        // each 2×2 block sums to 2.0
        for (a, b) in sdf.data().data().iter().zip(feat.data()) {
            assert!((a - 2.0 * b).abs() < 1e-15);
        }

        // loop oracle on a random map
        let gt = DensityMap::new(Tensor::uniform(&[1, 4, 4], 0.0, 1.0, &mut rng), None).unwrap();
        let sdf = build_support_density_feature(&fm, &gt, 2).unwrap();
        for c in 0..3 {
            for y in 0..2 {
                for x in 0..2 {
                    let mut d = 0.0;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            d += gt.grid().at(&[0, 2 * y + dy, 2 * x + dx]);
                        }
                    }
                    let expect = feat.at(&[c, y, x]) * d;
                    assert!((sdf.data().at(&[c, y, x]) - expect).abs() < 1e-12);
                }
            }
        }
        assert!(build_support_density_feature(&fm, &gt, 1).is_err());
    }

    #[test]
    fn e_step_cases() {
        let mut rng = seeded(1);
        let rows = Tensor::uniform(&[5, 4], -1.0, 1.0, &mut rng);
        let samples = Samples::from_rows(&rows).unwrap();
        let one = Tensor::new(vec![1, 4], unit(&[1.0, 2.0, 0.0, -1.0])).unwrap();
        let r1 = em_step_e(&samples, &one, 10.0).unwrap();
        assert!(r1.tensor().data().iter().all(|v| *v == 1.0));

        // direct exponent-ratio oracle
        let mu: Vec<f64> = (0..3).flat_map(|_| random_unit(&mut rng, 4)).collect();
        let mu = Tensor::new(vec![3, 4], mu).unwrap();
        let resp = em_step_e(&samples, &mu, 7.5).unwrap();
        for i in 0..5 {
            let s = &samples.rows().data()[i * 4..(i + 1) * 4];
            let ex: Vec<f64> = (0..3)
                .map(|v| (7.5 * dot(&mu.data()[v * 4..(v + 1) * 4], s)).exp())
                .collect();
            let z: f64 = ex.iter().sum();
            for v in 0..3 {
                assert!((resp.row(i)[v] - ex[v] / z).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn e_step_symmetric_sample_is_uniform() {
        // s = e_3 is orthogonal to all three prototypes in the e_0..e_2 plane.
        let samples = Samples::from_rows(&Tensor::new(vec![1, 4], vec![0.0, 0.0, 0.0, 1.0]).unwrap()).unwrap();
        let mut mu = vec![0.0; 12];
        mu[0] = 1.0;
        mu[5] = 1.0;
        mu[10] = 1.0;
        let resp = em_step_e(&samples, &Tensor::new(vec![3, 4], mu).unwrap(), 10.0).unwrap();
        for v in resp.row(0) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn m_step_collapse_and_mean_direction() {
        let u = unit(&[1.0, -2.0, 0.5]);
        let rows = Tensor::new(vec![4, 3], u.iter().cycle().take(12).copied().collect()).unwrap();
        let samples = Samples::from_rows(&rows).unwrap();
        let mu = initial_prototypes(&samples, 3);
        let resp = em_step_e(&samples, &mu, 10.0).unwrap();
        let step = em_step_m(&samples, &resp, false);
        for row in step.mu.data().chunks_exact(3) {
            for (a, b) in row.iter().zip(&u) {
                assert!((a - b).abs() < 1e-12);
            }
        }

        // V = 1: closed-form mean direction of the unit rows
        let mut rng = seeded(9);
        let rows = Tensor::uniform(&[20, 5], -1.0, 1.0, &mut rng);
        let samples = Samples::from_rows(&rows).unwrap();
        let mut mean = vec![0.0; 5];
        for i in 0..20 {
            for c in 0..5 {
                mean[c] += samples.rows().data()[i * 5 + c];
            }
        }
        let mean = unit(&mean);
        let resp = em_step_e(&samples, &initial_prototypes(&samples, 1), 10.0).unwrap();
        let step = em_step_m(&samples, &resp, false);
        for (a, b) in step.mu.data().iter().zip(&mean) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn m_step_reseeds_empty_component() {
        // Both samples near e_0; the second prototype points away and gets no mass.
        let rows = Tensor::new(vec![3, 2], vec![1.0, 0.0, 0.99, 0.14, 0.0, 1.0]).unwrap();
        let samples = Samples::from_rows(&rows).unwrap();
        let resp = Responsibilities {
            e: Tensor::new(vec![3, 2], vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0]).unwrap(),
        };
        let step = em_step_m(&samples, &resp, false);
        assert_eq!(step.reseeded, 1);
        // worst-explained sample is e_1
        assert_eq!(&step.mu.data()[2..], &[0.0, 1.0]);
    }

    fn clustered_sdf(rng: &mut impl Rng, generators: &[Vec<f64>], per: usize, noise_deg: f64) -> SupportDensityFeature {
        let c = generators[0].len();
        let n = generators.len() * per;
        let mut data = vec![0.0; c * n];
        let mut density = vec![0.0; n];
        for (k, g) in generators.iter().enumerate() {
            for j in 0..per {
                let i = k * per + j;
                // tangent direction orthogonal to g
                let mut t: Vec<f64> = (0..c).map(|_| StandardNormal.sample(rng)).collect();
                let d = dot(&t, g);
                t.iter_mut().zip(g).for_each(|(a, b)| *a -= d * b);
                let t = unit(&t);
                let z: f64 = StandardNormal.sample(rng);
                let theta = (z * noise_deg).to_radians();
                let scale = rng.random_range(0.5..2.0);
                for ch in 0..c {
                    data[ch * n + i] = scale * (theta.cos() * g[ch] + theta.sin() * t[ch]);
                }
                density[i] = (generators.len() - k) as f64 + rng.random_range(0.0..0.5);
            }
        }
        SupportDensityFeature::new(Tensor::new(vec![c, 1, n], data).unwrap(), density).unwrap()
    }

    #[test]
    fn recovers_three_clusters() {
        let mut rng = seeded(42);
        let gens: Vec<Vec<f64>> = (0..3).map(|_| random_unit(&mut rng, 8)).collect();
        let sdf = clustered_sdf(&mut rng, &gens, 40, 10.0);
        let fit = fit_prototypes(&sdf, &EmConfig::default()).unwrap();
        assert!(fit.iterations <= 50);
        for g in &gens {
            let best = (0..3)
                .map(|v| dot(fit.prototypes.direction(v), g))
                .fold(f64::NEG_INFINITY, f64::max);
            assert!(best > 0.99, "best cosine {best}");
        }
    }

    #[test]
    fn single_prototype_converges_in_two_rounds() {
        let mut rng = seeded(8);
        let sdf = SupportDensityFeature::new(Tensor::uniform(&[6, 4, 4], 0.0, 1.0, &mut rng), vec![1.0; 16]).unwrap();
        let cfg = EmConfig {
            num_prototypes: 1,
            ..EmConfig::default()
        };
        let fit = fit_prototypes(&sdf, &cfg).unwrap();
        assert!(fit.converged);
        assert!(fit.iterations <= 2);
    }

    #[test]
    fn objective_is_monotone_over_seeds() {
        for seed in 0..100 {
            let mut rng = seeded(seed);
            let c = rng.random_range(2..10);
            let (h, w) = (rng.random_range(2..7), rng.random_range(2..7));
            let data = Tensor::uniform(&[c, h, w], -1.0, 1.0, &mut rng);
            let density: Vec<f64> = (0..h * w).map(|_| rng.random_range(0.0..1.0)).collect();
            let sdf = SupportDensityFeature::new(data, density).unwrap();
            for weighted in [false, true] {
                let cfg = EmConfig {
                    num_prototypes: rng.random_range(1..5),
                    concentration: rng.random_range(1.0..20.0),
                    weighted,
                    ..EmConfig::default()
                };
                let fit = fit_prototypes(&sdf, &cfg).unwrap();
                if fit.reseeds > 0 {
                    continue;
                }
                for pair in fit.objective_trace.windows(2) {
                    assert!(pair[1] >= pair[0] - 1e-9, "seed {seed}: {pair:?}");
                }
            }
        }
    }

    #[test]
    fn permutation_of_cells_does_not_change_prototypes() {
        let mut rng = seeded(21);
        let (c, n) = (6, 30);
        let data = Tensor::uniform(&[c, 1, n], 0.0, 1.0, &mut rng);
        let density: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let sdf = SupportDensityFeature::new(data.clone(), density.clone()).unwrap();
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let mut pdata = vec![0.0; c * n];
        for ch in 0..c {
            for (dst, &src) in perm.iter().enumerate() {
                pdata[ch * n + dst] = data.data()[ch * n + src];
            }
        }
        let pdens: Vec<f64> = perm.iter().map(|&s| density[s]).collect();
        let psdf = SupportDensityFeature::new(Tensor::new(vec![c, 1, n], pdata).unwrap(), pdens).unwrap();
        let a = fit_prototypes(&sdf, &EmConfig::default()).unwrap();
        let b = fit_prototypes(&psdf, &EmConfig::default()).unwrap();
        for (x, y) in a.prototypes.mu().data().iter().zip(b.prototypes.mu().data()) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn similarity_cases() {
        let p = PrototypeSet::new(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(), 10.0).unwrap();
        // cells: [1,0] (equal to p0), [0,3] (orthogonal to p0), [0,0] (zero norm)
        let q = Tensor::new(vec![2, 1, 3], vec![1.0, 0.0, 0.0, 0.0, 3.0, 0.0]).unwrap();
        let s = encode_similarity(&p, &feature_map(q)).unwrap();
        assert_eq!(s.plane(0), &[1.0, 0.0, 0.0]);
        assert_eq!(s.plane(1), &[0.0, 1.0, 0.0]);

        let bad = feature_map(Tensor::zeros(&[3, 1, 1]));
        assert!(matches!(encode_similarity(&p, &bad), Err(Error::ShapeMismatch { .. })));

        // per-cell dot/norm oracle
        let mut rng = seeded(4);
        let mu: Vec<f64> = (0..3).flat_map(|_| random_unit(&mut rng, 5)).collect();
        let p = PrototypeSet::new(Tensor::new(vec![3, 5], mu).unwrap(), 10.0).unwrap();
        let q = Tensor::uniform(&[5, 3, 4], -1.0, 1.0, &mut rng);
        let s = encode_similarity(&p, &feature_map(q.clone())).unwrap();
        for v in 0..3 {
            for y in 0..3 {
                for x in 0..4 {
                    let col: Vec<f64> = (0..5).map(|c| q.at(&[c, y, x])).collect();
                    let n = col.iter().map(|a| a * a).sum::<f64>().sqrt();
                    let expect = dot(p.direction(v), &col) / n;
                    assert!((s.delta().at(&[v, y, x]) - expect).abs() < 1e-12);
                }
            }
        }
    }

    proptest! {
        #[test]
        fn responsibilities_normalised_and_prototypes_unit(seed in any::<u64>()) {
            let mut rng = seeded(seed);
            let c = rng.random_range(2..12);
            let n = rng.random_range(3..40);
            let rows = Tensor::uniform(&[n, c], -1.0, 1.0, &mut rng);
            let samples = Samples::from_rows(&rows).unwrap();
            let v = rng.random_range(1..6);
            let fit = fit_samples(samples, &EmConfig { num_prototypes: v, ..EmConfig::default() }).unwrap();
            for i in 0..fit.samples.len() {
                let s: f64 = fit.responsibilities.row(i).iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-9);
            }
            for k in 0..v {
                let norm = dot(fit.prototypes.direction(k), fit.prototypes.direction(k)).sqrt();
                prop_assert!((norm - 1.0).abs() < 1e-9);
            }
        }

        #[test]
        fn fitting_is_scale_invariant(seed in any::<u64>(), scale in 0.01f64..100.0) {
            let mut rng = seeded(seed);
            let data = Tensor::uniform(&[5, 3, 3], 0.0, 1.0, &mut rng);
            let density: Vec<f64> = (0..9).map(|_| rng.random_range(0.01..1.0)).collect();
            let sdf = SupportDensityFeature::new(data, density).unwrap();
            let a = fit_prototypes(&sdf, &EmConfig::default()).unwrap();
            let b = fit_prototypes(&sdf.scaled(scale), &EmConfig::default()).unwrap();
            for (x, y) in a.prototypes.mu().data().iter().zip(b.prototypes.mu().data()) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }
    }
}
