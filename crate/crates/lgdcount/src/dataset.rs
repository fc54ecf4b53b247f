//! Scene manifests: `scene_id<TAB>image<TAB>annotation[<TAB>roi]` per line.
//!
//! Relative paths resolve against the manifest's directory.

use std::fs;
use std::path::{Path, PathBuf};

use lgd_core::episodes::{Benchmark, Scene, SceneImage};

use crate::formats::{annotation_for, read_annotation, read_image, read_roi, write_annotation, write_image, write_roi};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub scene_id: String,
    pub image: PathBuf,
    pub annotation: PathBuf,
    pub roi: Option<PathBuf>,
}

pub fn parse_manifest(text: &str, path: &Path) -> Result<Vec<ManifestEntry>> {
    let base = path.parent().unwrap_or(Path::new(""));
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if !(3..=4).contains(&f.len()) || f.iter().any(|s| s.is_empty()) {
            return Err(Error::format(
                path,
                format!("line {}: expected scene_id, image, annotation and optional roi separated by tabs", n + 1),
            ));
        }
        out.push(ManifestEntry {
            scene_id: f[0].to_string(),
            image: base.join(f[1]),
            annotation: base.join(f[2]),
            roi: f.get(3).map(|r| base.join(r)),
        });
    }
    if out.is_empty() {
        return Err(Error::format(path, "manifest lists no images"));
    }
    Ok(out)
}

/// Load every image, annotation and mask named by a manifest, grouping
/// images into scenes in order of first appearance.
pub fn load_scenes(manifest: &Path) -> Result<Vec<Scene>> {
    let text = fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
    let entries = parse_manifest(&text, manifest)?;
    let mut scenes: Vec<(Scene, Option<PathBuf>)> = Vec::new();
    for e in entries {
        let image = read_image(&e.image)?;
        let record = read_annotation(&e.annotation)?;
        let annotation = annotation_for(&record, image.height(), image.width(), &e.annotation)?;
        let name = e
            .image
            .file_stem()
            .map(|s| format!("{}/{}", e.scene_id, s.to_string_lossy()))
            .unwrap_or_else(|| e.scene_id.clone());
        let idx = match scenes.iter().position(|(s, _)| s.scene_id == e.scene_id) {
            Some(i) => {
                if scenes[i].1 != e.roi {
                    return Err(Error::format(manifest, format!("scene `{}` lists more than one roi", e.scene_id)));
                }
                i
            }
            None => {
                let roi = e.roi.as_deref().map(read_roi).transpose()?;
                scenes.push((
                    Scene {
                        scene_id: e.scene_id.clone(),
                        images: Vec::new(),
                        roi,
                    },
                    e.roi.clone(),
                ));
                scenes.len() - 1
            }
        };
        let scene = &mut scenes[idx].0;
        if let Some(r) = &scene.roi {
            if (r.height(), r.width()) != (image.height(), image.width()) {
                return Err(Error::format(&e.image, "image size differs from the scene's roi"));
            }
        }
        scene.images.push(SceneImage {
            name,
            image,
            annotation,
        });
    }
    Ok(scenes.into_iter().map(|(s, _)| s).collect())
}

/// Write scenes as PNG images plus annotation records and a manifest at
/// `dir/<split>.tsv`.
pub fn materialize(scenes: &[Scene], dir: &Path, split: &str) -> Result<PathBuf> {
    let mut manifest = String::new();
    for scene in scenes {
        let rel = Path::new(split).join(&scene.scene_id);
        let sdir = dir.join(&rel);
        fs::create_dir_all(&sdir).map_err(|e| Error::io(&sdir, e))?;
        let roi = match &scene.roi {
            Some(r) => {
                let p = rel.join("roi.pgm");
                write_roi(&dir.join(&p), r)?;
                format!("\t{}", p.display())
            }
            None => String::new(),
        };
        for (i, img) in scene.images.iter().enumerate() {
            let ip = rel.join(format!("{i:03}.png"));
            let ap = rel.join(format!("{i:03}.txt"));
            write_image(&dir.join(&ip), &img.image)?;
            let image_name = ip.file_name().map(PathBuf::from).unwrap_or_default();
            write_annotation(&dir.join(&ap), &image_name, img.annotation.points())?;
            manifest.push_str(&format!("{}\t{}\t{}{}\n", scene.scene_id, ip.display(), ap.display(), roi));
        }
    }
    let path = dir.join(format!("{split}.tsv"));
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

pub fn materialize_benchmark(bench: &Benchmark, dir: &Path) -> Result<(PathBuf, PathBuf)> {
    Ok((materialize(&bench.train, dir, "train")?, materialize(&bench.test, dir, "test")?))
}
