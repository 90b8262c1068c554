//! Scene records, patch extraction, loading, and the synthetic generator.
//!
//! Directory layout:
//!
//! ```text
//! scenes/NNNN.png    RGB scene
//! semantic/NNNN.png  8-label grayscale map
//! depth/NNNN.png     8-bit depth (optional)
//! raw/NNNN.png       raw 150-class labels (optional)
//! poses/NNNN.json    [[ [x, y, visible] × 16 ], ...] in scene pixels
//! masks/NNNN.png     feasible person centers (synthetic only)
//! manifest.jsonl     one record per line
//! ```

mod labels;
mod synth;

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use labels::{quantize_labels, validate_palette, Category, LabelMapping, LabelMode, SegmentationMap, RAW_CLASSES};
pub use synth::{synth_generate, Archetype};

use crate::backbone::resize_to_input;
use crate::error::{Error, Result};
use crate::pose::{normalize_pose, Pose, NUM_KEYPOINTS};
use crate::raster::Raster;
use crate::templates::{assign_label, TemplateBank};
use crate::transform::{invert_transform, SceneDims, TransformParams};

pub const MANIFEST: &str = "manifest.jsonl";

/// One manifest line. Paths are relative to the dataset root.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub scene: String,
    pub semantic: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw: Option<String>,
    pub poses: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<String>,
    pub width: usize,
    pub height: usize,
}

/// Derived training targets of one pose, all in the 256-frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseTargets {
    pub class: usize,
    pub params: TransformParams,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneRecord {
    pub root: PathBuf,
    pub entry: ManifestEntry,
    /// Ground-truth poses in scene pixels.
    pub poses: Vec<Pose>,
    pub targets: Vec<PoseTargets>,
}

impl SceneRecord {
    pub fn id(&self) -> &str {
        &self.entry.id
    }

    pub fn dims(&self) -> SceneDims {
        SceneDims::new(self.entry.width as f64, self.entry.height as f64)
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn scene(&self) -> Result<Raster> {
        Raster::load(&self.path(&self.entry.scene))
    }

    pub fn semantic(&self) -> Result<Raster> {
        Raster::load(&self.path(&self.entry.semantic))
    }

    pub fn depth(&self) -> Result<Raster> {
        let rel = self.entry.depth.as_deref().ok_or_else(|| Error::NotFound(format!("depth map for scene {}", self.id())))?;
        Raster::load(&self.path(rel))
    }

    /// Semantic map at a given label granularity. Modes other than 8 need the
    /// raw label map.
    pub fn semantic_mode(&self, mode: LabelMode, mapping: &LabelMapping) -> Result<Raster> {
        if mode == LabelMode::Eight {
            return self.semantic();
        }
        let rel = self.entry.raw.as_deref().ok_or_else(|| {
            Error::NotFound(format!("raw label map for scene {} (needed for {mode}-label mode)", self.id()))
        })?;
        let raw = Raster::load(&self.path(rel))?;
        Ok(quantize_labels(&raw, mode, mapping)?.0.map)
    }

    pub fn mask(&self) -> Result<Raster> {
        let rel = self.entry.mask.as_deref().ok_or_else(|| Error::NotFound(format!("feasibility mask for scene {}", self.id())))?;
        Raster::load(&self.path(rel))
    }

    /// Targets against `bank`; with `fixed_template` every pose uses class 0.
    pub fn derive_targets(&mut self, bank: &TemplateBank, fixed_template: bool) -> Result<()> {
        self.targets = self
            .poses
            .iter()
            .map(|p| derive_pose_targets(p, self.dims(), bank, fixed_template))
            .collect::<Result<_>>()?;
        Ok(())
    }
}

pub fn derive_pose_targets(p: &Pose, dims: SceneDims, bank: &TemplateBank, fixed_template: bool) -> Result<PoseTargets> {
    let (norm, _) = normalize_pose(&dims.to_frame(p))?;
    let class = if fixed_template { 0 } else { assign_label(&norm, bank)?.0 };
    let params = invert_transform(p, &bank.templates[class], dims)?;
    Ok(PoseTargets { class, params })
}

/// Square patch of side `side` (scene pixels) centered at `center`,
/// zero-filled outside the scene and resized to 256×256.
pub fn extract_patch(img: &Raster, center: [f64; 2], side: usize) -> Result<Raster> {
    if side == 0 {
        return Err(Error::Input("patch side must be positive".into()));
    }
    let c = img.channels();
    let x0 = (center[0] - side as f64 / 2.0).round();
    let y0 = (center[1] - side as f64 / 2.0).round();
    let mut out = Raster::filled(side, side, c, 0.0);
    let (w, h) = (img.width() as f64, img.height() as f64);
    for py in 0..side {
        let sy = y0 + py as f64;
        if !(0.0..h).contains(&sy) {
            continue;
        }
        for px in 0..side {
            let sx = x0 + px as f64;
            if !(0.0..w).contains(&sx) {
                continue;
            }
            for ch in 0..c {
                out.set(px, py, ch, img.get(sx as usize, sy as usize, ch));
            }
        }
    }
    resize_to_input(&out)
}

/// Patch sides `(A, B)` for a scene of height `h`.
pub fn patch_sides(h: usize) -> (usize, usize) {
    (h, (h / 2).max(1))
}

fn read_poses(path: &Path) -> Result<Vec<Pose>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let raw: Vec<Vec<Vec<f64>>> = serde_json::from_str(&text)?;
    raw.iter()
        .enumerate()
        .map(|(n, person)| {
            if person.len() != NUM_KEYPOINTS {
                return Err(Error::Format(format!(
                    "{}: person {n} has {} keypoints, expected {NUM_KEYPOINTS}",
                    path.display(),
                    person.len()
                )));
            }
            let mut pose = Pose::new([[0.0; 2]; NUM_KEYPOINTS]);
            for (i, kp) in person.iter().enumerate() {
                let [x, y, v] = kp[..] else {
                    return Err(Error::Format(format!("{}: keypoint must be [x, y, visible]", path.display())));
                };
                pose.keypoints[i] = [x, y];
                pose.visible[i] = v != 0.0;
            }
            Ok(pose)
        })
        .collect()
}

pub fn write_poses(path: &Path, poses: &[Pose]) -> Result<()> {
    let raw: Vec<Vec<[f64; 3]>> = poses
        .iter()
        .map(|p| (0..NUM_KEYPOINTS).map(|i| [p.keypoints[i][0], p.keypoints[i][1], p.visible[i] as u8 as f64]).collect())
        .collect();
    std::fs::write(path, serde_json::to_string(&raw)?).map_err(|e| Error::io(path, e))
}

pub fn write_manifest(root: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let path = root.join(MANIFEST);
    let mut f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    for e in entries {
        writeln!(f, "{}", serde_json::to_string(e)?).map_err(|err| Error::io(&path, err))?;
    }
    Ok(())
}

/// Read and validate a dataset directory. Targets are left empty; call
/// [`SceneRecord::derive_targets`] once a template bank exists.
pub fn load_dataset(root: &Path) -> Result<Vec<SceneRecord>> {
    let manifest = root.join(MANIFEST);
    if !manifest.exists() {
        return Err(Error::NotFound(manifest.display().to_string()));
    }
    let text = std::fs::read_to_string(&manifest).map_err(|e| Error::io(&manifest, e))?;
    let mut seen = HashMap::new();
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let entry: ManifestEntry = serde_json::from_str(line)
            .map_err(|e| Error::Format(format!("{} line {}: {e}", manifest.display(), n + 1)))?;
        if seen.insert(entry.id.clone(), n).is_some() {
            return Err(Error::Format(format!("duplicate scene id '{}'", entry.id)));
        }
        let files = [Some(&entry.scene), Some(&entry.semantic), entry.depth.as_ref(), entry.raw.as_ref(), Some(&entry.poses), entry.mask.as_ref()];
        for rel in files.into_iter().flatten() {
            let p = root.join(rel);
            if !p.exists() {
                return Err(Error::NotFound(p.display().to_string()));
            }
        }
        let record = SceneRecord { root: root.to_path_buf(), poses: read_poses(&root.join(&entry.poses))?, entry, targets: Vec::new() };
        let sem = record.semantic()?;
        validate_palette(&sem, LabelMode::Eight)
            .map_err(|e| Error::Format(format!("{}: {e}", record.entry.semantic)))?;
        if sem.width() != record.entry.width || sem.height() != record.entry.height {
            return Err(Error::Format(format!(
                "{}: {}x{} map for a {}x{} scene",
                record.entry.semantic,
                sem.width(),
                sem.height(),
                record.entry.width,
                record.entry.height
            )));
        }
        for p in &record.poses {
            normalize_pose(p)?;
        }
        out.push(record);
    }
    Ok(out)
}

/// Poses from every record, normalized in the 256-frame.
pub fn normalized_poses(records: &[SceneRecord]) -> Result<Vec<crate::pose::NormalizedPose>> {
    let mut out = Vec::new();
    for r in records {
        for p in &r.poses {
            out.push(normalize_pose(&r.dims().to_frame(p))?.0);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patch_geometry() {
        let img = Raster::new(256, 256, 1, (0..256 * 256).map(|i| (i % 200) as f32 + 1.0).collect()).unwrap();
        assert_eq!(extract_patch(&img, [128.0, 128.0], 256).unwrap(), img);
        let corner = Raster::filled(256, 256, 1, 9.0);
        let p = extract_patch(&corner, [0.0, 0.0], 256).unwrap();
        let zeros = p.data().iter().filter(|&&v| v == 0.0).count();
        assert_eq!(zeros, 3 * 256 * 256 / 4);
        let far = extract_patch(&corner, [-5000.0, 1e6], 128).unwrap();
        assert!(far.data().iter().all(|&v| v == 0.0));
    }
}
