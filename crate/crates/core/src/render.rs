//! Skeleton overlays.

use crate::pose::{Pose, LIMBS};
use crate::raster::Raster;

/// Distinct colors cycled per person.
pub const PERSON_COLORS: [[f32; 3]; 6] = [
    [230.0, 25.0, 75.0],
    [60.0, 180.0, 75.0],
    [0.0, 130.0, 200.0],
    [245.0, 130.0, 48.0],
    [145.0, 30.0, 180.0],
    [70.0, 240.0, 240.0],
];

const LINE_RADIUS: f64 = 1.0;
const JOINT_RADIUS: f64 = 3.0;

fn paint(img: &mut Raster, x: i64, y: i64, color: [f32; 3]) {
    if x < 0 || y < 0 || x as usize >= img.width() || y as usize >= img.height() {
        return;
    }
    for (c, &v) in color.iter().enumerate() {
        img.set(x as usize, y as usize, c, v);
    }
}

fn disc(img: &mut Raster, cx: f64, cy: f64, r: f64, color: [f32; 3]) {
    let ri = r.ceil() as i64;
    let (x0, y0) = (cx.round() as i64, cy.round() as i64);
    for dy in -ri..=ri {
        for dx in -ri..=ri {
            if ((dx * dx + dy * dy) as f64) <= r * r {
                paint(img, x0 + dx, y0 + dy, color);
            }
        }
    }
}

/// Thick segment drawn as a run of small discs.
fn segment(img: &mut Raster, a: [f64; 2], b: [f64; 2], color: [f32; 3]) {
    let len = ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt();
    // avoid pathological loops for far off-canvas points
    let steps = (len.ceil() as usize).clamp(1, 4 * (img.width() + img.height()));
    for i in 0..=steps {
        let t = i as f64 / steps as f64;
        disc(img, a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1]), LINE_RADIUS, color);
    }
}

/// Draw every pose over an RGB copy of `scene`. Invisible keypoints and limbs
/// touching them are skipped; non-finite coordinates are ignored.
pub fn overlay(scene: &Raster, poses: &[Pose]) -> Raster {
    let mut img = scene.to_rgb();
    for (p, pose) in poses.iter().enumerate() {
        let color = PERSON_COLORS[p % PERSON_COLORS.len()];
        let ok = |i: usize| pose.visible[i] && pose.keypoints[i].iter().all(|v| v.is_finite());
        for &(a, b) in LIMBS.iter() {
            if ok(a) && ok(b) {
                segment(&mut img, pose.keypoints[a], pose.keypoints[b], color);
            }
        }
        for (i, k) in pose.keypoints.iter().enumerate() {
            if ok(i) {
                disc(&mut img, k[0], k[1], JOINT_RADIUS, color);
            }
        }
    }
    img
}
