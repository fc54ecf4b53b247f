//! Point annotations, ground-truth density maps and region-of-interest masks.
//!
//! Every annotated head contributes one unit of mass: its Gaussian kernel is
//! evaluated at pixel centres, truncated at radius `4σ` and divided by its own
//! discrete sum, so the map integrates to the head count exactly (up to
//! rounding) no matter how close a head sits to the border.

use alloc::vec;
use alloc::vec::Vec;

use crate::math;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Kernel support in units of σ.
pub const TRUNCATION_RADIUS: f64 = 4.0;

/// Head positions in pixel coordinates. A point `(x, y)` lies in pixel
/// `(floor(x), floor(y))`; pixel centres sit at half-integers.
#[derive(Clone, Debug, PartialEq)]
pub struct PointAnnotation {
    points: Vec<(f64, f64)>,
    height: usize,
    width: usize,
}

impl PointAnnotation {
    pub fn new(points: Vec<(f64, f64)>, height: usize, width: usize) -> Result<Self> {
        for &(x, y) in &points {
            let inside = x.is_finite()
                && y.is_finite()
                && x >= 0.0
                && y >= 0.0
                && x < width as f64
                && y < height as f64;
            if !inside {
                return Err(Error::PointOutOfBounds {
                    x,
                    y,
                    height,
                    width,
                });
            }
        }
        Ok(PointAnnotation {
            points,
            height,
            width,
        })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        PointAnnotation {
            points: Vec::new(),
            height,
            width,
        }
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }

    pub fn count(&self) -> usize {
        self.points.len()
    }

    pub fn image_size(&self) -> (usize, usize) {
        (self.height, self.width)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DensityMap {
    grid: Tensor,
    sigma: Option<f64>,
}

impl DensityMap {
    /// Wraps a `[1×H×W]` nonnegative grid. `sigma` is the kernel width for
    /// encoded ground truth and `None` for predictions.
    pub fn new(grid: Tensor, sigma: Option<f64>) -> Result<Self> {
        if grid.rank() != 3 || grid.shape()[0] != 1 {
            return Err(Error::ShapeMismatch {
                op: "density map",
                lhs: grid.shape().to_vec(),
                rhs: vec![1, 0, 0],
            });
        }
        grid.ensure_finite("density map")?;
        if grid.data().iter().any(|v| *v < 0.0) {
            return Err(Error::Data("density map has negative cells".into()));
        }
        Ok(DensityMap { grid, sigma })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        DensityMap {
            grid: Tensor::zeros(&[1, height, width]),
            sigma: None,
        }
    }

    pub fn grid(&self) -> &Tensor {
        &self.grid
    }

    pub fn into_grid(self) -> Tensor {
        self.grid
    }

    pub fn sigma(&self) -> Option<f64> {
        self.sigma
    }

    pub fn height(&self) -> usize {
        self.grid.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.grid.shape()[2]
    }

    pub fn values(&self) -> &[f64] {
        self.grid.data()
    }
}

/// A binary `[1×H×W]` mask; 1 marks the region of interest.
#[derive(Clone, Debug, PartialEq)]
pub struct RoiMask {
    mask: Tensor,
}

impl RoiMask {
    pub fn new(mask: Tensor) -> Result<Self> {
        if mask.rank() != 3 || mask.shape()[0] != 1 {
            return Err(Error::ShapeMismatch {
                op: "roi mask",
                lhs: mask.shape().to_vec(),
                rhs: vec![1, 0, 0],
            });
        }
        if mask.data().iter().any(|v| *v != 0.0 && *v != 1.0) {
            return Err(Error::Data("roi mask values must be exactly 0 or 1".into()));
        }
        Ok(RoiMask { mask })
    }

    /// Nonzero bytes are inside.
    pub fn from_bytes(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        let data = bytes.iter().map(|b| if *b != 0 { 1.0 } else { 0.0 }).collect();
        RoiMask::new(Tensor::new(vec![1, height, width], data)?)
    }

    pub fn full(height: usize, width: usize) -> Self {
        RoiMask {
            mask: Tensor::ones(&[1, height, width]),
        }
    }

    pub fn mask(&self) -> &Tensor {
        &self.mask
    }

    pub fn height(&self) -> usize {
        self.mask.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.mask.shape()[2]
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (xi, yi) = (math::floor(x) as usize, math::floor(y) as usize);
        xi < self.width() && yi < self.height() && self.mask.data()[yi * self.width() + xi] != 0.0
    }

    /// Fraction of each `factor×factor` block inside the region, `[1×h×w]`.
    pub fn coverage(&self, factor: usize) -> Result<Tensor> {
        let pooled = sum_pool(&self.mask, factor)?;
        let area = (factor * factor) as f64;
        Ok(pooled.map(|v| v / area))
    }
}

/// Ground-truth density for `ann` rendered on an `out_size = (H, W)` grid.
/// Coordinates are rescaled when `out_size` differs from the annotated image size.
pub fn encode_density(
    ann: &PointAnnotation,
    sigma: f64,
    out_size: (usize, usize),
) -> Result<DensityMap> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::NonPositiveSigma(sigma));
    }
    let (h, w) = out_size;
    let (ih, iw) = ann.image_size();
    let (sy, sx) = (h as f64 / ih as f64, w as f64 / iw as f64);
    let mut grid = vec![0.0; h * w];
    let radius = TRUNCATION_RADIUS * sigma;
    let reach = math::ceil(radius) as isize + 1;
    let inv_two_var = 1.0 / (2.0 * sigma * sigma);
    let mut gx = Vec::new();
    let mut gy = Vec::new();
    let mut patch = Vec::new();
    for &(px, py) in ann.points() {
        let (cx, cy) = (px * sx, py * sy);
        let (ix, iy) = (math::floor(cx) as isize, math::floor(cy) as isize);
        let x0 = (ix - reach).max(0) as usize;
        let x1 = ((ix + reach) as usize).min(w - 1);
        let y0 = (iy - reach).max(0) as usize;
        let y1 = ((iy + reach) as usize).min(h - 1);
        gx.clear();
        gx.extend((x0..=x1).map(|x| {
            let d = x as f64 + 0.5 - cx;
            (d, math::exp(-d * d * inv_two_var))
        }));
        gy.clear();
        gy.extend((y0..=y1).map(|y| {
            let d = y as f64 + 0.5 - cy;
            (d, math::exp(-d * d * inv_two_var))
        }));
        patch.clear();
        let mut total = 0.0;
        for &(dy, vy) in &gy {
            for &(dx, vx) in &gx {
                let v = if dx * dx + dy * dy <= radius * radius {
                    vx * vy
                } else {
                    0.0
                };
                total += v;
                patch.push(v);
            }
        }
        let pw = gx.len();
        if total > 0.0 {
            for (r, y) in (y0..=y1).enumerate() {
                let row = &mut grid[y * w + x0..y * w + x1 + 1];
                for (cell, v) in row.iter_mut().zip(&patch[r * pw..(r + 1) * pw]) {
                    *cell += v / total;
                }
            }
        } else {
            // Kernel narrower than a pixel: the whole unit lands in the host pixel.
            let x = (ix.max(0) as usize).min(w - 1);
            let y = (iy.max(0) as usize).min(h - 1);
            grid[y * w + x] += 1.0;
        }
    }
    DensityMap::new(Tensor::new(vec![1, h, w], grid)?, Some(sigma))
}

pub fn apply_mask(dm: &DensityMap, roi: &RoiMask) -> Result<DensityMap> {
    if dm.grid.shape() != roi.mask.shape() {
        return Err(Error::ShapeMismatch {
            op: "apply_mask",
            lhs: dm.grid.shape().to_vec(),
            rhs: roi.mask.shape().to_vec(),
        });
    }
    let data = dm
        .values()
        .iter()
        .zip(roi.mask.data())
        .map(|(d, m)| d * m)
        .collect();
    Ok(DensityMap {
        grid: Tensor::new(dm.grid.shape().to_vec(), data)?,
        sigma: dm.sigma,
    })
}

/// Non-overlapping `factor×factor` sum pooling; the integral is unchanged.
pub fn downsample_preserving_count(dm: &DensityMap, factor: usize) -> Result<DensityMap> {
    Ok(DensityMap {
        grid: sum_pool(&dm.grid, factor)?,
        sigma: dm.sigma,
    })
}

pub fn integrate_count(dm: &DensityMap) -> f64 {
    dm.grid.sum()
}

fn sum_pool(grid: &Tensor, factor: usize) -> Result<Tensor> {
    let (c, h, w) = (grid.shape()[0], grid.shape()[1], grid.shape()[2]);
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::IndivisibleShape {
            height: h,
            width: w,
            factor,
        });
    }
    let (oh, ow) = (h / factor, w / factor);
    let mut out = vec![0.0; c * oh * ow];
    let d = grid.data();
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                out[(ch * oh + y / factor) * ow + x / factor] += d[(ch * h + y) * w + x];
            }
        }
    }
    Tensor::new(vec![c, oh, ow], out)
}
