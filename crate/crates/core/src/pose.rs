//! 16-keypoint poses in MPII order and their unit-box normalization.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NUM_KEYPOINTS: usize = 16;
pub const POSE_DIM: usize = 2 * NUM_KEYPOINTS;

pub const R_ANKLE: usize = 0;
pub const R_KNEE: usize = 1;
pub const R_HIP: usize = 2;
pub const L_HIP: usize = 3;
pub const L_KNEE: usize = 4;
pub const L_ANKLE: usize = 5;
pub const PELVIS: usize = 6;
pub const THORAX: usize = 7;
pub const UPPER_NECK: usize = 8;
pub const HEAD_TOP: usize = 9;
pub const R_WRIST: usize = 10;
pub const R_ELBOW: usize = 11;
pub const R_SHOULDER: usize = 12;
pub const L_SHOULDER: usize = 13;
pub const L_ELBOW: usize = 14;
pub const L_WRIST: usize = 15;

pub const KEYPOINT_NAMES: [&str; NUM_KEYPOINTS] = [
    "r-ankle", "r-knee", "r-hip", "l-hip", "l-knee", "l-ankle", "pelvis", "thorax",
    "upper-neck", "head-top", "r-wrist", "r-elbow", "r-shoulder", "l-shoulder", "l-elbow", "l-wrist",
];

/// MPII skeleton connectivity.
pub const LIMBS: [(usize, usize); 15] = [
    (R_ANKLE, R_KNEE),
    (R_KNEE, R_HIP),
    (R_HIP, PELVIS),
    (L_HIP, PELVIS),
    (L_KNEE, L_HIP),
    (L_ANKLE, L_KNEE),
    (PELVIS, THORAX),
    (THORAX, UPPER_NECK),
    (UPPER_NECK, HEAD_TOP),
    (R_WRIST, R_ELBOW),
    (R_ELBOW, R_SHOULDER),
    (R_SHOULDER, THORAX),
    (L_SHOULDER, THORAX),
    (L_ELBOW, L_SHOULDER),
    (L_WRIST, L_ELBOW),
];

const DEGENERATE_SPAN: f64 = 1e-6;

/// Keypoints in pixels of some frame (scene or 256-frame).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub keypoints: [[f64; 2]; NUM_KEYPOINTS],
    pub visible: [bool; NUM_KEYPOINTS],
}

impl Pose {
    pub fn new(keypoints: [[f64; 2]; NUM_KEYPOINTS]) -> Self {
        Pose { keypoints, visible: [true; NUM_KEYPOINTS] }
    }

    pub fn from_flat(v: &[f64]) -> Result<Self> {
        if v.len() != POSE_DIM {
            return Err(Error::Format(format!("pose needs {POSE_DIM} coordinates, got {}", v.len())));
        }
        let mut kp = [[0.0; 2]; NUM_KEYPOINTS];
        for (i, p) in kp.iter_mut().enumerate() {
            *p = [v[2 * i], v[2 * i + 1]];
        }
        Ok(Pose::new(kp))
    }

    pub fn flat(&self) -> [f64; POSE_DIM] {
        flatten(&self.keypoints)
    }

    /// Per-axis rescale, e.g. scene pixels → 256-frame.
    pub fn scaled(&self, sx: f64, sy: f64) -> Pose {
        let mut out = self.clone();
        for p in out.keypoints.iter_mut() {
            p[0] *= sx;
            p[1] *= sy;
        }
        out
    }

    /// `(min_x, min_y, max_x, max_y)` over all keypoints.
    pub fn bbox(&self) -> [f64; 4] {
        bbox(&self.keypoints)
    }

    /// Invisible keypoints replaced by the center of the visible bounding box.
    /// With no visible keypoint the pose is returned unchanged.
    pub fn imputed(&self) -> Pose {
        let vis: Vec<[f64; 2]> = (0..NUM_KEYPOINTS).filter(|&i| self.visible[i]).map(|i| self.keypoints[i]).collect();
        if vis.is_empty() || vis.len() == NUM_KEYPOINTS {
            return self.clone();
        }
        let b = bbox(&vis);
        let c = [(b[0] + b[2]) / 2.0, (b[1] + b[3]) / 2.0];
        let mut out = self.clone();
        for i in 0..NUM_KEYPOINTS {
            if !self.visible[i] {
                out.keypoints[i] = c;
            }
        }
        out
    }
}

pub(crate) fn flatten(kp: &[[f64; 2]; NUM_KEYPOINTS]) -> [f64; POSE_DIM] {
    let mut out = [0.0; POSE_DIM];
    for (i, p) in kp.iter().enumerate() {
        out[2 * i] = p[0];
        out[2 * i + 1] = p[1];
    }
    out
}

fn bbox(kp: &[[f64; 2]]) -> [f64; 4] {
    kp.iter().fold([f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY], |b, p| {
        [b[0].min(p[0]), b[1].min(p[1]), b[2].max(p[0]), b[3].max(p[1])]
    })
}

/// A pose whose bounding box is the unit square.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NormalizedPose(pub [[f64; 2]; NUM_KEYPOINTS]);

impl NormalizedPose {
    pub fn flat(&self) -> [f64; POSE_DIM] {
        flatten(&self.0)
    }

    pub fn distance(&self, other: &NormalizedPose) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

/// Bounding-box center `o` and extent `s`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoxFrame {
    pub center: [f64; 2],
    pub scale: [f64; 2],
}

/// Map a pose onto its unit bounding box. Invisible keypoints are imputed at
/// the visible bounding-box center first; a degenerate axis maps to 0.5.
pub fn normalize_pose(p: &Pose) -> Result<(NormalizedPose, BoxFrame)> {
    let p = p.imputed();
    let [x0, y0, x1, y1] = p.bbox();
    if !(x0.is_finite() && y0.is_finite() && x1.is_finite() && y1.is_finite()) {
        return Err(Error::Input("pose has non-finite keypoints".into()));
    }
    let (sx, sy) = (x1 - x0, y1 - y0);
    if sx < DEGENERATE_SPAN && sy < DEGENERATE_SPAN {
        return Err(Error::DegeneratePose);
    }
    let axis = |v: f64, lo: f64, span: f64| if span < DEGENERATE_SPAN { 0.5 } else { (v - lo) / span };
    let mut kp = [[0.0; 2]; NUM_KEYPOINTS];
    for (out, k) in kp.iter_mut().zip(&p.keypoints) {
        *out = [axis(k[0], x0, sx), axis(k[1], y0, sy)];
    }
    let frame = BoxFrame {
        center: [(x0 + x1) / 2.0, (y0 + y1) / 2.0],
        scale: [sx.max(DEGENERATE_SPAN), sy.max(DEGENERATE_SPAN)],
    };
    Ok((NormalizedPose(kp), frame))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_point(a: [f64; 2], b: [f64; 2]) -> Pose {
        let mut kp = [a; NUM_KEYPOINTS];
        kp[5] = b;
        Pose::new(kp)
    }

    #[test]
    fn two_point_pose() {
        let (n, f) = normalize_pose(&two_point([10.0, 10.0], [30.0, 50.0])).unwrap();
        assert_eq!(f.center, [20.0, 30.0]);
        assert_eq!(f.scale, [20.0, 40.0]);
        assert_eq!(n.0[0], [0.0, 0.0]);
        assert_eq!(n.0[5], [1.0, 1.0]);
    }

    #[test]
    fn full_frame() {
        let (_, f) = normalize_pose(&two_point([0.0, 0.0], [256.0, 256.0])).unwrap();
        assert_eq!(f.center, [128.0, 128.0]);
        assert_eq!(f.scale, [256.0, 256.0]);
    }

    #[test]
    fn degenerate_cases() {
        assert!(matches!(normalize_pose(&Pose::new([[3.0, 4.0]; 16])), Err(Error::DegeneratePose)));
        let (n, f) = normalize_pose(&two_point([5.0, 10.0], [5.0, 30.0])).unwrap();
        assert!(n.0.iter().all(|p| p[0] == 0.5));
        assert_eq!(f.scale[0], 1e-6);
    }

    #[test]
    fn invisible_points_are_imputed() {
        let mut p = two_point([0.0, 0.0], [10.0, 20.0]);
        p.keypoints[3] = [500.0, 500.0];
        p.visible[3] = false;
        let (n, f) = normalize_pose(&p).unwrap();
        assert_eq!(f.scale, [10.0, 20.0]);
        assert_eq!(n.0[3], [0.5, 0.5]);
    }
}
