//! Procedural indoor scenes with context-dependent poses.
//!
//! A wall fills the top of the image down to a horizon row and floor fills
//! the rest. Up to two furniture items stand on the floor. People stand on
//! open floor, sit on chairs, lie on beds, or reach toward tables; their size
//! follows a simple perspective rule tied to the row of their feet. Scene
//! pixels never contain people.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::labels::Category;
use super::{write_manifest, write_poses, ManifestEntry};
use crate::error::{Error, Result};
use crate::pose::{NormalizedPose, Pose, NUM_KEYPOINTS};
use crate::raster::Raster;

const SIZE: usize = 256;
const MASK_DILATION: i64 = 8;
const POSE_JITTER: f64 = 0.015;
const SCALE_JITTER: (f64, f64) = (0.9, 1.1);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Archetype {
    Standing,
    Sitting,
    Lying,
    Reaching,
}

impl Archetype {
    /// Canonical skeleton in MPII order, roughly inside the unit box.
    pub fn skeleton(self) -> [[f64; 2]; NUM_KEYPOINTS] {
        match self {
            Archetype::Standing => [
                [0.35, 1.0], [0.37, 0.75], [0.38, 0.5], [0.62, 0.5], [0.63, 0.75], [0.65, 1.0],
                [0.5, 0.5], [0.5, 0.2], [0.5, 0.13], [0.5, 0.0],
                [0.0, 0.5], [0.12, 0.35], [0.25, 0.2], [0.75, 0.2], [0.88, 0.35], [1.0, 0.5],
            ],
            Archetype::Sitting => [
                [0.25, 1.0], [0.28, 0.75], [0.35, 0.62], [0.65, 0.62], [0.72, 0.75], [0.75, 1.0],
                [0.5, 0.62], [0.5, 0.25], [0.5, 0.17], [0.5, 0.0],
                [0.25, 0.6], [0.0, 0.45], [0.2, 0.26], [0.8, 0.26], [1.0, 0.45], [0.75, 0.6],
            ],
            Archetype::Lying => [
                [1.0, 0.8], [0.75, 0.8], [0.5, 0.75], [0.5, 0.35], [0.75, 0.4], [1.0, 0.45],
                [0.5, 0.55], [0.18, 0.5], [0.12, 0.45], [0.0, 0.4],
                [0.5, 0.95], [0.35, 1.0], [0.2, 0.85], [0.2, 0.2], [0.35, 0.0], [0.5, 0.1],
            ],
            Archetype::Reaching => [
                [0.02, 1.0], [0.05, 0.75], [0.06, 0.5], [0.27, 0.5], [0.28, 0.75], [0.3, 1.0],
                [0.16, 0.5], [0.16, 0.2], [0.16, 0.13], [0.16, 0.0],
                [0.82, 0.35], [0.45, 0.28], [0.0, 0.2], [0.33, 0.2], [0.63, 0.25], [1.0, 0.33],
            ],
        }
    }

    fn for_furniture(kind: Category) -> Archetype {
        match kind {
            Category::Chair => Archetype::Sitting,
            Category::Bed => Archetype::Lying,
            _ => Archetype::Reaching,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Furniture {
    kind: Category,
    raw: u8,
    color: [f64; 3],
    x0: f64,
    x1: f64,
    top: f64,
    /// Row where the item touches the floor.
    base: f64,
}

impl Furniture {
    fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    fn height(&self) -> f64 {
        self.base - self.top
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.top && y < self.base
    }

    fn overlaps(&self, b: [f64; 4]) -> bool {
        b[0] < self.x1 && b[2] > self.x0 && b[1] < self.base && b[3] > self.top
    }
}

struct Scene {
    horizon: f64,
    wall: [f64; 3],
    floor: [f64; 3],
    furniture: Vec<Furniture>,
}

impl Scene {
    fn person_height(&self, foot: f64) -> f64 {
        (1.2 * (foot - self.horizon)).max(30.0)
    }

    fn standing_foot_range(&self) -> (f64, f64) {
        (self.horizon + 40.0, 250.0)
    }

    /// Person box `(cx, cy, w, h)` for a furniture-bound archetype, or `None`
    /// when it does not fit the scene.
    fn bound_box(&self, f: &Furniture, s: f64) -> Option<[f64; 4]> {
        let hb = self.person_height(f.base);
        let b = match Archetype::for_furniture(f.kind) {
            Archetype::Sitting => {
                let h = 0.75 * hb * s;
                [(f.x0 + f.x1) / 2.0, f.base - h / 2.0, 0.5 * h, h]
            }
            Archetype::Lying => {
                let w = 0.85 * f.width() * s;
                [(f.x0 + f.x1) / 2.0, f.top + 0.3 * f.height(), w, 0.3 * w]
            }
            _ => {
                let h = hb * s;
                let w = 0.6 * h;
                let right = f.x0 + 0.15 * f.width();
                [right - w / 2.0, f.base - h / 2.0, w, h]
            }
        };
        let fits = b[0] - b[2] / 2.0 >= 1.0 && b[0] + b[2] / 2.0 <= SIZE as f64 - 1.0 && b[1] - b[3] / 2.0 >= 1.0;
        fits.then_some(b)
    }
}

fn jittered_color(rng: &mut impl Rng, base: [f64; 3], spread: f64) -> [f64; 3] {
    base.map(|c| (c + rng.random_range(-spread..=spread)).clamp(0.0, 255.0))
}

fn make_scene(rng: &mut impl Rng) -> Scene {
    let horizon = rng.random_range(70.0..120.0);
    let g = rng.random_range(150.0..220.0);
    let wall = jittered_color(rng, [g, g - 5.0, g - 15.0], 12.0);
    let floor = jittered_color(rng, [120.0, 95.0, 75.0], 25.0);
    let mut scene = Scene { horizon, wall, floor, furniture: Vec::new() };
    let count = match rng.random_range(0..10) {
        0 | 1 => 0,
        2..=5 => 1,
        _ => 2,
    };
    let mut kinds = vec![Category::Bed, Category::Chair, Category::Table];
    for _ in 0..count {
        let kind = kinds.remove(rng.random_range(0..kinds.len()));
        for _attempt in 0..20 {
            let base = rng.random_range(horizon + 50.0..245.0);
            let hb = scene.person_height(base);
            let (w, h, raw, color) = match kind {
                Category::Bed => (1.1 * hb, 0.35 * hb, 7, jittered_color(rng, [60.0, 90.0, 170.0], 20.0)),
                Category::Chair => {
                    let raw = [19, 30, 31][rng.random_range(0..3)];
                    (0.35 * hb, 0.55 * hb, raw, jittered_color(rng, [170.0, 60.0, 40.0], 20.0))
                }
                _ => {
                    let raw = [15, 33][rng.random_range(0..2)];
                    (0.7 * hb, 0.45 * hb, raw, jittered_color(rng, [110.0, 75.0, 35.0], 15.0))
                }
            };
            if w > SIZE as f64 - 10.0 {
                continue;
            }
            let x0 = rng.random_range(5.0..SIZE as f64 - 5.0 - w);
            let f = Furniture { kind, raw, color, x0, x1: x0 + w, top: base - h, base };
            if scene.furniture.iter().all(|o| !o.overlaps([f.x0 - 4.0, f.top, f.x1 + 4.0, f.base])) {
                scene.furniture.push(f);
                break;
            }
        }
    }
    scene.furniture.sort_by(|a, b| a.base.total_cmp(&b.base));
    scene
}

fn place(skeleton: &[[f64; 2]; NUM_KEYPOINTS], bx: [f64; 4], rng: &mut impl Rng) -> Pose {
    let noise = Normal::new(0.0, POSE_JITTER).expect("valid std");
    let mut kp = *skeleton;
    for p in kp.iter_mut() {
        p[0] += noise.sample(rng);
        p[1] += noise.sample(rng);
    }
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in &kp {
        for a in 0..2 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let [cx, cy, w, h] = bx;
    let unit = NormalizedPose(kp.map(|p| [(p[0] - lo[0]) / (hi[0] - lo[0]), (p[1] - lo[1]) / (hi[1] - lo[1])]));
    Pose::new(unit.0.map(|p| [cx - w / 2.0 + p[0] * w, cy - h / 2.0 + p[1] * h]))
}

fn standing_box(scene: &Scene, rng: &mut impl Rng) -> [f64; 4] {
    let (lo, hi) = scene.standing_foot_range();
    let mut last = [0.0; 4];
    for _ in 0..30 {
        let foot = rng.random_range(lo..hi);
        let h = scene.person_height(foot) * rng.random_range(SCALE_JITTER.0..SCALE_JITTER.1);
        let w = 0.35 * h;
        let cx = rng.random_range(w / 2.0 + 2.0..SIZE as f64 - 2.0 - w / 2.0);
        last = [cx, foot - h / 2.0, w, h];
        let bbox = [cx - w / 2.0, foot - h, cx + w / 2.0, foot];
        if scene.furniture.iter().all(|f| !f.overlaps(bbox)) {
            break;
        }
    }
    last
}

fn make_people(scene: &Scene, rng: &mut impl Rng) -> Vec<(Archetype, Pose)> {
    let n = rng.random_range(1..=2);
    let mut free: Vec<usize> = (0..scene.furniture.len()).filter(|&i| scene.bound_box(&scene.furniture[i], 1.0).is_some()).collect();
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let s = rng.random_range(SCALE_JITTER.0..SCALE_JITTER.1);
        let bound = if !free.is_empty() && rng.random_bool(0.7) {
            let f = scene.furniture[free.remove(rng.random_range(0..free.len()))];
            scene.bound_box(&f, s).map(|b| (Archetype::for_furniture(f.kind), b))
        } else {
            None
        };
        let (arch, bx) = bound.unwrap_or_else(|| (Archetype::Standing, standing_box(scene, rng)));
        out.push((arch, place(&arch.skeleton(), bx, rng)));
    }
    out
}

struct Layers {
    image: Raster,
    semantic: Raster,
    depth: Raster,
    raw: Raster,
}

fn render(scene: &Scene, rng: &mut impl Rng) -> Layers {
    let mut image = Raster::filled(SIZE, SIZE, 3, 0.0);
    let mut semantic = Raster::filled(SIZE, SIZE, 1, 0.0);
    let mut depth = Raster::filled(SIZE, SIZE, 1, 0.0);
    let mut raw = Raster::filled(SIZE, SIZE, 1, 0.0);
    let floor_depth = |y: f64| 40.0 + 200.0 * ((y - scene.horizon) / (SIZE as f64 - scene.horizon)).clamp(0.0, 1.0);
    for y in 0..SIZE {
        for x in 0..SIZE {
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            let (color, cat, d, r) = match scene.furniture.iter().rev().find(|f| f.contains(fx, fy)) {
                Some(f) => (f.color, f.kind, floor_depth(f.base), f.raw),
                None if fy < scene.horizon => {
                    let shade = 1.0 - 0.15 * (fy / scene.horizon);
                    (scene.wall.map(|c| c * shade), Category::Wall, 30.0, 0)
                }
                None => (scene.floor, Category::Floor, floor_depth(fy), 3),
            };
            for (c, v) in color.iter().enumerate() {
                let n: f64 = rng.random_range(-6.0..=6.0);
                image.set(x, y, c, (v + n).round().clamp(0.0, 255.0) as f32);
            }
            semantic.set(x, y, 0, cat.value() as f32);
            depth.set(x, y, 0, d.round() as f32);
            raw.set(x, y, 0, r as f32);
        }
    }
    Layers { image, semantic, depth, raw }
}

/// Every center the generator could have produced for this scene, dilated.
fn feasibility_mask(scene: &Scene) -> Raster {
    let mut hit = vec![false; SIZE * SIZE];
    let mut mark = |x0: f64, y0: f64, x1: f64, y1: f64| {
        let lo = |v: f64| (v.floor() as i64 - MASK_DILATION).clamp(0, SIZE as i64 - 1) as usize;
        let hi = |v: f64| (v.ceil() as i64 + MASK_DILATION).clamp(0, SIZE as i64 - 1) as usize;
        for y in lo(y0)..=hi(y1) {
            for x in lo(x0)..=hi(x1) {
                hit[y * SIZE + x] = true;
            }
        }
    };
    let (lo, hi) = scene.standing_foot_range();
    let mut foot = lo;
    while foot <= hi {
        let (smin, smax) = SCALE_JITTER;
        let hmin = scene.person_height(foot) * smin;
        let hmax = scene.person_height(foot) * smax;
        let half_w = 0.35 * hmin / 2.0;
        mark(half_w + 2.0, foot - hmax / 2.0, SIZE as f64 - 2.0 - half_w, foot - hmin / 2.0);
        foot += 0.5;
    }
    for f in &scene.furniture {
        for s in [SCALE_JITTER.0, SCALE_JITTER.1] {
            if let Some(b) = scene.bound_box(f, s) {
                mark(b[0] - 3.0, b[1] - 3.0, b[0] + 3.0, b[1] + 3.0);
            }
        }
        if let (Some(a), Some(b)) = (scene.bound_box(f, SCALE_JITTER.0), scene.bound_box(f, SCALE_JITTER.1)) {
            mark(a[0].min(b[0]), a[1].min(b[1]), a[0].max(b[0]), a[1].max(b[1]));
        }
    }
    Raster::new(SIZE, SIZE, 1, hit.into_iter().map(|h| if h { 255.0 } else { 0.0 }).collect()).expect("sized mask")
}

/// Write `n_scenes` procedural scenes into `out`.
pub fn synth_generate(out: &Path, seed: u64, n_scenes: usize) -> Result<Vec<ManifestEntry>> {
    if n_scenes == 0 {
        return Err(Error::Input("n_scenes must be at least 1".into()));
    }
    for dir in ["scenes", "semantic", "depth", "raw", "poses", "masks"] {
        let p = out.join(dir);
        std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::with_capacity(n_scenes);
    for i in 0..n_scenes {
        let id = format!("{i:04}");
        let scene = make_scene(&mut rng);
        let people = make_people(&scene, &mut rng);
        let layers = render(&scene, &mut rng);
        let entry = ManifestEntry {
            scene: format!("scenes/{id}.png"),
            semantic: format!("semantic/{id}.png"),
            depth: Some(format!("depth/{id}.png")),
            raw: Some(format!("raw/{id}.png")),
            poses: format!("poses/{id}.json"),
            mask: Some(format!("masks/{id}.png")),
            width: SIZE,
            height: SIZE,
            id,
        };
        layers.image.save(&out.join(&entry.scene))?;
        layers.semantic.save(&out.join(&entry.semantic))?;
        layers.depth.save(&out.join(entry.depth.as_ref().expect("set above")))?;
        layers.raw.save(&out.join(entry.raw.as_ref().expect("set above")))?;
        feasibility_mask(&scene).save(&out.join(entry.mask.as_ref().expect("set above")))?;
        let poses: Vec<Pose> = people.into_iter().map(|(_, p)| p).collect();
        write_poses(&out.join(&entry.poses), &poses)?;
        entries.push(entry);
    }
    write_manifest(out, &entries)?;
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn skeletons_span_unit_box() {
        for a in [Archetype::Standing, Archetype::Sitting, Archetype::Lying, Archetype::Reaching] {
            let s = a.skeleton();
            for axis in 0..2 {
                let lo = s.iter().map(|p| p[axis]).fold(f64::INFINITY, f64::min);
                let hi = s.iter().map(|p| p[axis]).fold(f64::NEG_INFINITY, f64::max);
                assert_eq!((lo, hi), (0.0, 1.0), "{a:?} axis {axis}");
            }
        }
    }

    #[test]
    fn centers_fall_inside_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..40 {
            let scene = make_scene(&mut rng);
            let mask = feasibility_mask(&scene);
            for (_, p) in make_people(&scene, &mut rng) {
                let b = p.bbox();
                let (cx, cy) = ((b[0] + b[2]) / 2.0, (b[1] + b[3]) / 2.0);
                assert!(mask.get(cx as usize, cy as usize, 0) > 0.0, "center ({cx}, {cy}) outside mask");
            }
        }
    }
}
