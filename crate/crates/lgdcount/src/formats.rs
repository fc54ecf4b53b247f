//! Annotation records, images, ROI masks and raw density grids.

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageFormat, Luma, Rgb, RgbImage};
use lgd_core::density::{DensityMap, PointAnnotation, RoiMask};
use lgd_core::episodes::Image;
use lgd_core::tensor::Tensor;

use crate::{Error, Result};

const DMAP_MAGIC: &[u8; 4] = b"DMAP";

/// One annotation record: the image it belongs to and its head points.
#[derive(Clone, Debug, PartialEq)]
pub struct AnnotationRecord {
    pub image: PathBuf,
    pub points: Vec<(f64, f64)>,
}

/// First non-empty line is the image path, then one `x y` pair per line.
pub fn parse_annotation(text: &str, path: &Path) -> Result<AnnotationRecord> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, first) = lines.next().ok_or_else(|| Error::format(path, "empty annotation record"))?;
    let mut points = Vec::new();
    for (n, line) in lines {
        let mut it = line.split_whitespace();
        let mut coord = || -> Option<f64> { it.next()?.parse().ok() };
        let (x, y) = match (coord(), coord()) {
            (Some(x), Some(y)) => (x, y),
            _ => return Err(Error::format(path, format!("line {}: expected `x y`", n + 1))),
        };
        if it.next().is_some() {
            return Err(Error::format(path, format!("line {}: trailing fields", n + 1)));
        }
        points.push((x, y));
    }
    Ok(AnnotationRecord {
        image: PathBuf::from(first.trim()),
        points,
    })
}

pub fn read_annotation(path: &Path) -> Result<AnnotationRecord> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_annotation(&text, path)
}

pub fn format_annotation(image: &Path, points: &[(f64, f64)]) -> String {
    let mut s = format!("{}\n", image.display());
    for (x, y) in points {
        s.push_str(&format!("{x} {y}\n"));
    }
    s
}

pub fn write_annotation(path: &Path, image: &Path, points: &[(f64, f64)]) -> Result<()> {
    fs::write(path, format_annotation(image, points)).map_err(|e| Error::io(path, e))
}

/// Bind a record's points to an image of known size.
pub fn annotation_for(record: &AnnotationRecord, height: usize, width: usize, path: &Path) -> Result<PointAnnotation> {
    PointAnnotation::new(record.points.clone(), height, width).map_err(|e| Error::format(path, e.to_string()))
}

/// Load any PNG or PNM image as RGB in [0, 1].
pub fn read_image(path: &Path) -> Result<Image> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = p[c] as f64 / 255.0;
        }
    }
    Ok(Image::new(Tensor::new(vec![3, h, w], data)?)?)
}

/// Write an RGB image; the format follows the extension (PNG or PPM).
pub fn write_image(path: &Path, image: &Image) -> Result<()> {
    let (h, w) = (image.height(), image.width());
    let d = image.tensor().data();
    let plane = |c: usize, y: usize, x: usize| {
        let v = d[(c.min(image.channels() - 1) * h + y) * w + x];
        (v.clamp(0.0, 1.0) * 255.0).round() as u8
    };
    let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        Rgb([plane(0, y, x), plane(1, y, x), plane(2, y, x)])
    });
    let format = ImageFormat::from_path(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    img.save_with_format(path, format).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Binary PGM mask; nonzero pixels are inside.
pub fn read_roi(path: &Path) -> Result<RoiMask> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_luma8();
    Ok(RoiMask::from_bytes(img.height() as usize, img.width() as usize, img.as_raw())?)
}

pub fn write_roi(path: &Path, roi: &RoiMask) -> Result<()> {
    let (h, w) = (roi.height(), roi.width());
    let m = roi.mask().data();
    let img = GrayImage::from_fn(w as u32, h as u32, |x, y| {
        Luma([if m[y as usize * w + x as usize] > 0.0 { 255 } else { 0 }])
    });
    img.save_with_format(path, ImageFormat::Pnm).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Raw grid: `DMAP`, u32 height, u32 width, u32 reserved, then f64 cells,
/// all little-endian.
pub fn encode_dmap(grid: &Tensor) -> Vec<u8> {
    let s = grid.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let mut out = Vec::with_capacity(16 + 8 * grid.len());
    out.extend_from_slice(DMAP_MAGIC);
    out.extend_from_slice(&(h as u32).to_le_bytes());
    out.extend_from_slice(&(w as u32).to_le_bytes());
    out.extend_from_slice(&0u32.to_le_bytes());
    for v in grid.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_dmap(bytes: &[u8], path: &Path) -> Result<Tensor> {
    if bytes.len() < 16 || &bytes[..4] != DMAP_MAGIC {
        return Err(Error::format(path, "not a DMAP file"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes")) as usize;
    let (h, w) = (word(4), word(8));
    let payload = &bytes[16..];
    if payload.len() != 8 * h * w {
        return Err(Error::format(path, format!("expected {} cells, found {} bytes", h * w, payload.len())));
    }
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok(Tensor::new(vec![1, h, w], data)?)
}

pub fn write_dmap(path: &Path, grid: &Tensor) -> Result<()> {
    fs::write(path, encode_dmap(grid)).map_err(|e| Error::io(path, e))
}

pub fn read_dmap(path: &Path) -> Result<DensityMap> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let grid = decode_dmap(&bytes, path)?;
    DensityMap::new(grid, None).map_err(|e| Error::format(path, e.to_string()))
}

/// 8-bit grayscale preview scaled so the largest cell is white.
pub fn density_preview(grid: &Tensor) -> GrayImage {
    let s = grid.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let d = grid.data();
    let max = d.iter().cloned().fold(0.0, f64::max);
    GrayImage::from_fn(w as u32, h as u32, |x, y| {
        let v = d[y as usize * w + x as usize];
        Luma([if max > 0.0 { (v.max(0.0) / max * 255.0).round() as u8 } else { 0 }])
    })
}

pub fn write_preview(path: &Path, grid: &Tensor) -> Result<()> {
    density_preview(grid)
        .save_with_format(path, ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}
