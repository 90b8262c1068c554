//! Template-to-scene composition and its inverse.
//!
//! Forward map per keypoint:
//! `x̄ = (w/w0)·[(x·Δx + dx) + (x0 − Δx/2)]`, likewise for `y` with `h/h0`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pose::{normalize_pose, NormalizedPose, Pose, NUM_KEYPOINTS};

pub const FRAME: f64 = 256.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneDims {
    pub width: f64,
    pub height: f64,
}

impl SceneDims {
    pub const FRAME: SceneDims = SceneDims { width: FRAME, height: FRAME };

    pub fn new(width: f64, height: f64) -> Self {
        SceneDims { width, height }
    }

    /// Scene pixels → 256-frame.
    pub fn to_frame(&self, p: &Pose) -> Pose {
        p.scaled(FRAME / self.width, FRAME / self.height)
    }

    /// 256-frame → scene pixels.
    pub fn from_frame(&self, p: &Pose) -> Pose {
        p.scaled(self.width / FRAME, self.height / FRAME)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformParams {
    /// `(x0, y0)` in the 256-frame.
    pub center: [f64; 2],
    /// `(Δx, Δy)` in the 256-frame.
    pub scale: [f64; 2],
    /// `(dx_i, dy_i)` in the 256-frame.
    pub deform: [[f64; 2]; NUM_KEYPOINTS],
    pub scene: SceneDims,
}

impl TransformParams {
    pub fn rigid(center: [f64; 2], scale: [f64; 2], scene: SceneDims) -> Self {
        TransformParams { center, scale, deform: [[0.0; 2]; NUM_KEYPOINTS], scene }
    }
}

pub fn apply_transform(template: &NormalizedPose, p: &TransformParams) -> Result<Pose> {
    let [sx, sy] = p.scale;
    if !(sx > 0.0 && sy > 0.0) {
        return Err(Error::Input(format!("scale must be positive, got ({sx}, {sy})")));
    }
    let (rx, ry) = (p.scene.width / FRAME, p.scene.height / FRAME);
    let [x0, y0] = p.center;
    let mut kp = [[0.0; 2]; NUM_KEYPOINTS];
    for i in 0..NUM_KEYPOINTS {
        let [x, y] = template.0[i];
        let [dx, dy] = p.deform[i];
        kp[i] = [rx * ((x * sx + dx) + (x0 - sx / 2.0)), ry * ((y * sy + dy) + (y0 - sy / 2.0))];
    }
    Ok(Pose::new(kp))
}

/// Recover `(o, s, d)` for a scene-frame pose: `(o, s)` come from its bounding
/// box in the 256-frame and `d` is the residual against `template`.
pub fn invert_transform(gt: &Pose, template: &NormalizedPose, scene: SceneDims) -> Result<TransformParams> {
    let framed = scene.to_frame(gt);
    let (_, frame) = normalize_pose(&framed)?;
    let [x0, y0] = frame.center;
    let [sx, sy] = frame.scale;
    let mut deform = [[0.0; 2]; NUM_KEYPOINTS];
    for i in 0..NUM_KEYPOINTS {
        let [x, y] = template.0[i];
        let [gx, gy] = framed.keypoints[i];
        deform[i] = [gx - (x0 - sx / 2.0) - x * sx, gy - (y0 - sy / 2.0) - y * sy];
    }
    Ok(TransformParams { center: frame.center, scale: frame.scale, deform, scene })
}
