//! Scenes, one-shot episodes, augmentation and the synthetic scene generator.
//!
//! A scene is a fixed camera viewpoint; every image in it shares the layout of
//! crowded and sparse regions while the individual head positions vary.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};

use crate::density::{PointAnnotation, RoiMask};
use crate::math;
use crate::rng;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// `[C×H×W]` pixel intensities, nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    data: Tensor,
}

impl Image {
    pub fn new(data: Tensor) -> Result<Self> {
        if data.rank() != 3 || data.shape()[0] == 0 {
            return Err(Error::ShapeMismatch {
                op: "image",
                lhs: data.shape().to_vec(),
                rhs: vec![3, 0, 0],
            });
        }
        data.ensure_finite("image")?;
        Ok(Image { data })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor {
        self.data
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }
}

/// An image with its head annotation. `name` identifies it in errors and
/// manifests (typically the image path).
#[derive(Clone, Debug, PartialEq)]
pub struct SceneImage {
    pub name: String,
    pub image: Image,
    pub annotation: PointAnnotation,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub scene_id: String,
    pub images: Vec<SceneImage>,
    pub roi: Option<RoiMask>,
}

impl Scene {
    pub fn total_count(&self) -> usize {
        self.images.iter().map(|i| i.annotation.count()).sum()
    }
}

/// One support image and the remaining images of the scene as queries,
/// referenced by index into [`Scene::images`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Episode {
    pub scene_id: String,
    pub support: usize,
    pub queries: Vec<usize>,
}

impl Episode {
    pub fn support<'a>(&self, scene: &'a Scene) -> &'a SceneImage {
        &scene.images[self.support]
    }

    pub fn queries<'a>(&'a self, scene: &'a Scene) -> impl Iterator<Item = &'a SceneImage> + 'a {
        self.queries.iter().map(move |&i| &scene.images[i])
    }
}

/// Uniformly random support; all other images become queries.
pub fn sample_episode<R: Rng + ?Sized>(scene: &Scene, rng: &mut R) -> Result<Episode> {
    let n = scene.images.len();
    if n < 2 {
        return Err(Error::SceneTooSmall {
            scene_id: scene.scene_id.clone(),
            images: n,
        });
    }
    let support = rng.random_range(0..n);
    Ok(Episode {
        scene_id: scene.scene_id.clone(),
        support,
        queries: (0..n).filter(|&i| i != support).collect(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentConfig {
    pub mirror_p: f64,
    pub blur_p: f64,
    pub blur_sigma: (f64, f64),
    /// Square crop side; `None` keeps the full image.
    pub crop: Option<usize>,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            mirror_p: 0.5,
            blur_p: 0.3,
            blur_sigma: (0.5, 1.5),
            crop: Some(32),
        }
    }
}

/// Random mirror, blur and crop, applied in that order.
pub fn augment<R: Rng + ?Sized>(
    image: &Image,
    ann: &PointAnnotation,
    rng: &mut R,
    config: &AugmentConfig,
) -> Result<(Image, PointAnnotation)> {
    let (h, w) = (image.height(), image.width());
    if let Some(c) = config.crop {
        if c > h || c > w || c == 0 {
            return Err(Error::CropTooLarge {
                crop: (c, c),
                image: (h, w),
            });
        }
    }
    let mut img = image.clone();
    let mut ann = ann.clone();
    if rng.random_bool(config.mirror_p) {
        img = mirror_image(&img);
        ann = mirror_points(&ann);
    }
    if rng.random_bool(config.blur_p) {
        let (lo, hi) = config.blur_sigma;
        let sigma = if hi > lo { rng.random_range(lo..hi) } else { lo };
        img = gaussian_blur(&img, sigma)?;
    }
    if let Some(c) = config.crop {
        let oy = rng.random_range(0..=h - c);
        let ox = rng.random_range(0..=w - c);
        img = crop_image(&img, oy, ox, c, c);
        ann = crop_points(&ann, oy, ox, c, c);
    }
    Ok((img, ann))
}

pub fn mirror_image(image: &Image) -> Image {
    let (c, h, w) = (image.channels(), image.height(), image.width());
    let src = image.data.data();
    let data = Tensor::from_fn(&[c, h, w], |i| {
        let x = i % w;
        src[i - x + (w - 1 - x)]
    });
    Image { data }
}

/// `x ↦ W − x`. The reflection of `x = 0` lands exactly on the excluded
/// right edge and is pulled back by one ulp-scale step.
pub fn mirror_points(ann: &PointAnnotation) -> PointAnnotation {
    let (h, w) = ann.image_size();
    let wf = w as f64;
    let pts = ann
        .points()
        .iter()
        .map(|&(x, y)| {
            let m = wf - x;
            (if m >= wf { wf * (1.0 - f64::EPSILON) } else { m }, y)
        })
        .collect();
    PointAnnotation::new(pts, h, w).expect("reflection stays inside the image")
}

pub fn crop_image(image: &Image, oy: usize, ox: usize, ch: usize, cw: usize) -> Image {
    let (c, h, w) = (image.channels(), image.height(), image.width());
    let src = image.data.data();
    let data = Tensor::from_fn(&[c, ch, cw], |i| {
        let (k, y, x) = (i / (ch * cw), (i / cw) % ch, i % cw);
        src[(k * h + y + oy) * w + x + ox]
    });
    Image { data }
}

/// Keep the points whose pixel falls inside the window; shift them into
/// window coordinates.
pub fn crop_points(ann: &PointAnnotation, oy: usize, ox: usize, ch: usize, cw: usize) -> PointAnnotation {
    let (oyf, oxf) = (oy as f64, ox as f64);
    let pts = ann
        .points()
        .iter()
        .filter(|&&(x, y)| x >= oxf && y >= oyf && x < oxf + cw as f64 && y < oyf + ch as f64)
        .map(|&(x, y)| (x - oxf, y - oyf))
        .collect();
    PointAnnotation::new(pts, ch, cw).expect("filtered to window")
}

/// Separable Gaussian blur with clamped borders.
pub fn gaussian_blur(image: &Image, sigma: f64) -> Result<Image> {
    if !(sigma > 0.0) {
        return Err(Error::NonPositiveSigma(sigma));
    }
    let radius = math::ceil(3.0 * sigma) as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|d| math::exp(-((d * d) as f64) / (2.0 * sigma * sigma)))
        .collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    let (c, h, w) = (image.channels(), image.height(), image.width());
    let src = image.data.data();
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; src.len()];
    for k in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (j, kv) in kernel.iter().enumerate() {
                    let xx = clamp(x as isize + j as isize - radius, w);
                    acc += kv * src[(k * h + y) * w + xx];
                }
                tmp[(k * h + y) * w + x] = acc;
            }
        }
    }
    let mut out = vec![0.0; src.len()];
    for k in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (j, kv) in kernel.iter().enumerate() {
                    let yy = clamp(y as isize + j as isize - radius, h);
                    acc += kv * tmp[(k * h + yy) * w + x];
                }
                out[(k * h + y) * w + x] = acc;
            }
        }
    }
    Image::new(Tensor::new(vec![c, h, w], out)?)
}

/// Axis-aligned region `[x0, x1) × [y0, y1)` with an expected number of
/// heads per pixel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DensityRegion {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
    pub intensity: f64,
    /// Standard deviation (pixels) of the offset added to each sampled head.
    pub jitter: f64,
}

impl DensityRegion {
    pub fn area(&self) -> usize {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }
}

/// Colours of the rendered scene. Distractors are unannotated blobs with a
/// different colour.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Appearance {
    pub head_color: [f64; 3],
    pub background: [f64; 3],
    /// Amplitude of the value-noise texture around `background`.
    pub texture_contrast: f64,
    pub distractor_color: [f64; 3],
    /// Expected distractor blobs per pixel.
    pub distractor_rate: f64,
    /// Standard deviation of per-pixel sensor noise.
    pub pixel_noise: f64,
}

impl Default for Appearance {
    fn default() -> Self {
        Appearance {
            head_color: [0.9, 0.85, 0.8],
            background: [0.3, 0.35, 0.3],
            texture_contrast: 0.15,
            distractor_color: [0.2, 0.4, 0.9],
            distractor_rate: 0.0,
            pixel_noise: 0.02,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSceneSpec {
    pub scene_id: String,
    pub layout: Vec<DensityRegion>,
    pub height: usize,
    pub width: usize,
    pub texture_seed: u64,
    /// Gaussian σ (pixels) of a rendered head.
    pub stamp_sigma: f64,
    pub appearance: Appearance,
}

impl SyntheticSceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::InvalidHyperparameter("image size must be positive".into()));
        }
        if !(self.stamp_sigma > 0.0) {
            return Err(Error::NonPositiveSigma(self.stamp_sigma));
        }
        for r in &self.layout {
            if r.x0 >= r.x1 || r.y0 >= r.y1 || r.x1 > self.width || r.y1 > self.height {
                return Err(Error::InvalidHyperparameter(format!(
                    "region [{}, {}) × [{}, {}) is empty or outside the {}×{} image",
                    r.x0, r.x1, r.y0, r.y1, self.width, self.height
                )));
            }
            if !(r.intensity >= 0.0 && r.intensity.is_finite()) || !(r.jitter >= 0.0) {
                return Err(Error::InvalidHyperparameter(
                    "region intensity and jitter must be non-negative".into(),
                ));
            }
        }
        Ok(())
    }

    /// Expected head count per image.
    pub fn expected_count(&self) -> f64 {
        self.layout.iter().map(|r| r.intensity * r.area() as f64).sum()
    }
}

/// Render `n_images` images of one scene. The background texture depends
/// only on `spec.texture_seed`; head positions, distractors and noise are
/// drawn from `rng`.
pub fn generate_synthetic_scene<R: Rng + ?Sized>(
    spec: &SyntheticSceneSpec,
    n_images: usize,
    rng: &mut R,
) -> Result<Scene> {
    spec.validate()?;
    if n_images < 2 {
        return Err(Error::SceneTooSmall {
            scene_id: spec.scene_id.clone(),
            images: n_images,
        });
    }
    let background = render_background(spec);
    let mut images = Vec::with_capacity(n_images);
    for idx in 0..n_images {
        let points = sample_heads(spec, rng)?;
        let distractors = sample_uniform(
            spec.appearance.distractor_rate * (spec.height * spec.width) as f64,
            spec.height,
            spec.width,
            rng,
        )?;
        let image = render_image(spec, &background, &points, &distractors, rng)?;
        images.push(SceneImage {
            name: format!("{}/{:03}", spec.scene_id, idx),
            image,
            annotation: PointAnnotation::new(points, spec.height, spec.width)?,
        });
    }
    Ok(Scene {
        scene_id: spec.scene_id.clone(),
        images,
        roi: None,
    })
}

fn poisson<R: Rng + ?Sized>(mean: f64, rng: &mut R) -> Result<usize> {
    if mean <= 0.0 {
        return Ok(0);
    }
    let p = Poisson::new(mean).map_err(|e| Error::InvalidHyperparameter(e.to_string()))?;
    Ok(p.sample(rng) as usize)
}

fn sample_heads<R: Rng + ?Sized>(spec: &SyntheticSceneSpec, rng: &mut R) -> Result<Vec<(f64, f64)>> {
    let (wf, hf) = (spec.width as f64, spec.height as f64);
    let inside = |v: f64, n: f64| v.clamp(0.0, n * (1.0 - f64::EPSILON));
    let mut pts = Vec::new();
    for r in &spec.layout {
        let n = poisson(r.intensity * r.area() as f64, rng)?;
        let jitter = Normal::new(0.0, r.jitter.max(0.0)).map_err(|e| Error::InvalidHyperparameter(e.to_string()))?;
        for _ in 0..n {
            let x = rng.random_range(r.x0 as f64..r.x1 as f64) + jitter.sample(rng);
            let y = rng.random_range(r.y0 as f64..r.y1 as f64) + jitter.sample(rng);
            pts.push((inside(x, wf), inside(y, hf)));
        }
    }
    Ok(pts)
}

fn sample_uniform<R: Rng + ?Sized>(mean: f64, h: usize, w: usize, rng: &mut R) -> Result<Vec<(f64, f64)>> {
    let n = poisson(mean, rng)?;
    Ok((0..n)
        .map(|_| (rng.random_range(0.0..w as f64), rng.random_range(0.0..h as f64)))
        .collect())
}

/// Low-frequency value noise: random lattice values every `CELL` pixels,
/// bilinearly interpolated, one lattice per channel.
fn render_background(spec: &SyntheticSceneSpec) -> Vec<f64> {
    const CELL: usize = 16;
    let (h, w) = (spec.height, spec.width);
    let (gh, gw) = (h / CELL + 2, w / CELL + 2);
    let mut r = rng::derived(spec.texture_seed, "background");
    let mut out = vec![0.0; 3 * h * w];
    for c in 0..3 {
        let lattice: Vec<f64> = (0..gh * gw).map(|_| r.random_range(-1.0..1.0)).collect();
        for y in 0..h {
            let fy = y as f64 / CELL as f64;
            let (iy, ty) = (fy as usize, fy - math::floor(fy));
            for x in 0..w {
                let fx = x as f64 / CELL as f64;
                let (ix, tx) = (fx as usize, fx - math::floor(fx));
                let at = |yy: usize, xx: usize| lattice[yy * gw + xx];
                let top = at(iy, ix) * (1.0 - tx) + at(iy, ix + 1) * tx;
                let bottom = at(iy + 1, ix) * (1.0 - tx) + at(iy + 1, ix + 1) * tx;
                let v = top * (1.0 - ty) + bottom * ty;
                out[(c * h + y) * w + x] = spec.appearance.background[c] + spec.appearance.texture_contrast * v;
            }
        }
    }
    out
}

fn stamp(coverage: &mut [f64], h: usize, w: usize, sigma: f64, (px, py): (f64, f64)) {
    let reach = math::ceil(3.0 * sigma) as isize;
    let (cx, cy) = (math::floor(px) as isize, math::floor(py) as isize);
    for y in (cy - reach).max(0)..=(cy + reach).min(h as isize - 1) {
        for x in (cx - reach).max(0)..=(cx + reach).min(w as isize - 1) {
            let dx = x as f64 + 0.5 - px;
            let dy = y as f64 + 0.5 - py;
            let g = math::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma));
            let cell = &mut coverage[y as usize * w + x as usize];
            // Overlapping blobs saturate instead of adding past full cover.
            *cell = 1.0 - (1.0 - *cell) * (1.0 - g);
        }
    }
}

fn render_image<R: Rng + ?Sized>(
    spec: &SyntheticSceneSpec,
    background: &[f64],
    heads: &[(f64, f64)],
    distractors: &[(f64, f64)],
    rng: &mut R,
) -> Result<Image> {
    let (h, w) = (spec.height, spec.width);
    let mut head_cover = vec![0.0; h * w];
    let mut other_cover = vec![0.0; h * w];
    for &p in heads {
        stamp(&mut head_cover, h, w, spec.stamp_sigma, p);
    }
    for &p in distractors {
        stamp(&mut other_cover, h, w, spec.stamp_sigma, p);
    }
    let gain = rng.random_range(0.9..1.1);
    let noise = Normal::new(0.0, spec.appearance.pixel_noise.max(0.0))
        .map_err(|e| Error::InvalidHyperparameter(e.to_string()))?;
    let a = &spec.appearance;
    let mut data = vec![0.0; 3 * h * w];
    for c in 0..3 {
        for i in 0..h * w {
            let bg = background[c * h * w + i];
            let v = bg + other_cover[i] * (a.distractor_color[c] - bg);
            let v = v + head_cover[i] * (a.head_color[c] - v);
            data[c * h * w + i] = (gain * v + noise.sample(rng)).clamp(0.0, 1.0);
        }
    }
    Image::new(Tensor::new(vec![3, h, w], data)?)
}

/// Sizes of the synthetic benchmark.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BenchmarkConfig {
    pub train_scenes: usize,
    pub train_images: usize,
    pub test_scenes: usize,
    pub test_images: usize,
    pub image_size: usize,
    /// Heads per pixel in the high, medium and low bands.
    pub intensities: [f64; 3],
    pub stamp_sigma: f64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            train_scenes: 8,
            train_images: 12,
            test_scenes: 3,
            test_images: 8,
            image_size: 64,
            intensities: [0.02, 0.008, 0.002],
            stamp_sigma: 1.2,
        }
    }
}

/// Scene-disjoint train and test splits.
#[derive(Clone, Debug, PartialEq)]
pub struct Benchmark {
    pub train: Vec<Scene>,
    pub test: Vec<Scene>,
}

/// A heterogeneous scene: three horizontal bands of random height whose
/// high/medium/low intensities are assigned in random order, with a random
/// head colour, background and distractor colour.
pub fn heterogeneous_scene_spec<R: Rng + ?Sized>(
    scene_id: &str,
    config: &BenchmarkConfig,
    rng: &mut R,
) -> SyntheticSceneSpec {
    let s = config.image_size;
    let cut1 = rng.random_range(s / 5..2 * s / 5);
    let cut2 = rng.random_range(3 * s / 5..4 * s / 5);
    let mut levels = config.intensities;
    levels.shuffle(rng);
    let bands = [(0, cut1), (cut1, cut2), (cut2, s)];
    let layout = bands
        .iter()
        .zip(levels)
        .map(|(&(y0, y1), intensity)| DensityRegion {
            x0: 0,
            y0,
            x1: s,
            y1,
            intensity,
            jitter: 0.5,
        })
        .collect();
    let mut color = || [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)];
    let background = color();
    let mut head_color = color();
    while dist(&head_color, &background) < 0.6 {
        head_color = color();
    }
    let mut distractor_color = color();
    while dist(&distractor_color, &head_color) < 0.5 || dist(&distractor_color, &background) < 0.4 {
        distractor_color = color();
    }
    let appearance = Appearance {
        head_color,
        background,
        texture_contrast: rng.random_range(0.05..0.2),
        distractor_color,
        distractor_rate: rng.random_range(0.002..0.006),
        pixel_noise: 0.02,
    };
    SyntheticSceneSpec {
        scene_id: scene_id.to_string(),
        layout,
        height: s,
        width: s,
        texture_seed: rng.random(),
        stamp_sigma: config.stamp_sigma,
        appearance,
    }
}

fn dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    math::sqrt(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum())
}

/// Training scenes `train-00..`, test scenes `test-00..`, all from `seed`.
pub fn synthetic_benchmark(config: &BenchmarkConfig, seed: u64) -> Result<Benchmark> {
    let make = |prefix: &str, scenes: usize, images: usize| -> Result<Vec<Scene>> {
        (0..scenes)
            .map(|i| {
                let id = format!("{prefix}-{i:02}");
                let mut r = rng::derived(seed, &id);
                let spec = heterogeneous_scene_spec(&id, config, &mut r);
                generate_synthetic_scene(&spec, images, &mut r)
            })
            .collect()
    };
    Ok(Benchmark {
        train: make("train", config.train_scenes, config.train_images)?,
        test: make("test", config.test_scenes, config.test_images)?,
    })
}
