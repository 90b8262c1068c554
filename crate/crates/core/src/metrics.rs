//! Pose-pair metrics, all computed in the 256-frame.

use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::pose::{Pose, HEAD_TOP, L_SHOULDER, NUM_KEYPOINTS, R_HIP, UPPER_NECK};

pub const DEFAULT_ALPHA: f64 = 0.2;
pub const DEFAULT_BETA: f64 = 0.5;
pub const COLUMNS: [&str; 7] = ["PCK", "PCKh", "AKD", "MAE", "MSE", "SIM", "IOU"];

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

fn check_fraction(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v <= 1.0 {
        Ok(())
    } else {
        Err(Error::Input(format!("{name} must lie in (0, 1], got {v}")))
    }
}

fn fraction_within(pred: &Pose, gt: &Pose, threshold: f64) -> f64 {
    let hits = (0..NUM_KEYPOINTS).filter(|&i| dist(pred.keypoints[i], gt.keypoints[i]) <= threshold).count();
    hits as f64 / NUM_KEYPOINTS as f64
}

/// Fraction of keypoints within `α·‖l-shoulder − r-hip‖` of the ground truth.
pub fn pck(pred: &Pose, gt: &Pose, alpha: f64) -> Result<f64> {
    check_fraction("alpha", alpha)?;
    let torso = dist(gt.keypoints[L_SHOULDER], gt.keypoints[R_HIP]);
    if torso == 0.0 {
        return Err(Error::MetricUndefined("zero torso width".into()));
    }
    Ok(fraction_within(pred, gt, alpha * torso))
}

/// Fraction of keypoints within `β·‖head-top − upper-neck‖` of the ground truth.
pub fn pckh(pred: &Pose, gt: &Pose, beta: f64) -> Result<f64> {
    check_fraction("beta", beta)?;
    let head = dist(gt.keypoints[HEAD_TOP], gt.keypoints[UPPER_NECK]);
    if head == 0.0 {
        return Err(Error::MetricUndefined("zero head size".into()));
    }
    Ok(fraction_within(pred, gt, beta * head))
}

pub fn akd(pred: &Pose, gt: &Pose) -> f64 {
    (0..NUM_KEYPOINTS).map(|i| dist(pred.keypoints[i], gt.keypoints[i])).sum::<f64>() / NUM_KEYPOINTS as f64
}

fn coordinate_mean(pred: &Pose, gt: &Pose, f: impl Fn(f64) -> f64) -> f64 {
    let total: f64 = pred.flat().iter().zip(gt.flat().iter()).map(|(a, b)| f(a - b)).sum();
    total / (2 * NUM_KEYPOINTS) as f64
}

pub fn mae(pred: &Pose, gt: &Pose) -> f64 {
    coordinate_mean(pred, gt, f64::abs)
}

pub fn mse(pred: &Pose, gt: &Pose) -> f64 {
    coordinate_mean(pred, gt, |d| d * d)
}

/// Mean cosine similarity between keypoint position vectors about the origin.
pub fn cos_sim(pred: &Pose, gt: &Pose) -> f64 {
    let total: f64 = (0..NUM_KEYPOINTS)
        .map(|i| {
            let [a, b] = [pred.keypoints[i], gt.keypoints[i]];
            let (na, nb) = (a[0].hypot(a[1]), b[0].hypot(b[1]));
            match (na == 0.0, nb == 0.0) {
                (true, true) => 1.0,
                (true, false) | (false, true) => 0.0,
                _ => ((a[0] * b[0] + a[1] * b[1]) / (na * nb)).clamp(-1.0, 1.0),
            }
        })
        .sum();
    total / NUM_KEYPOINTS as f64
}

/// Intersection over union of the keypoint bounding boxes.
pub fn iou(pred: &Pose, gt: &Pose) -> Result<f64> {
    let (a, b) = (pred.bbox(), gt.bbox());
    let area = |r: [f64; 4]| (r[2] - r[0]) * (r[3] - r[1]);
    if area(a) <= 0.0 || area(b) <= 0.0 {
        return Err(Error::MetricUndefined("zero-area bounding box".into()));
    }
    let w = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let h = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = w * h;
    Ok(inter / (area(a) + area(b) - inter))
}

/// Metric values for one pose pair; `None` marks an undefined metric.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricRow {
    pub pck: Option<f64>,
    pub pckh: Option<f64>,
    pub akd: f64,
    pub mae: f64,
    pub mse: f64,
    pub sim: f64,
    pub iou: Option<f64>,
}

impl MetricRow {
    pub fn compute(pred: &Pose, gt: &Pose, alpha: f64, beta: f64) -> Result<Self> {
        let defined = |r: Result<f64>| match r {
            Ok(v) => Ok(Some(v)),
            Err(Error::MetricUndefined(_)) => Ok(None),
            Err(e) => Err(e),
        };
        Ok(MetricRow {
            pck: defined(pck(pred, gt, alpha))?,
            pckh: defined(pckh(pred, gt, beta))?,
            akd: akd(pred, gt),
            mae: mae(pred, gt),
            mse: mse(pred, gt),
            sim: cos_sim(pred, gt),
            iou: defined(iou(pred, gt))?,
        })
    }

    fn values(&self) -> [Option<f64>; 7] {
        [self.pck, self.pckh, Some(self.akd), Some(self.mae), Some(self.mse), Some(self.sim), self.iou]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub alpha: f64,
    pub beta: f64,
    pub frame: &'static str,
    pub rows: Vec<MetricRow>,
    /// Column means over defined samples, in [`COLUMNS`] order.
    pub means: [f64; 7],
    /// Undefined-sample counts per column.
    pub undefined: [usize; 7],
}

impl EvalReport {
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a Pose, &'a Pose)>, alpha: f64, beta: f64) -> Result<Self> {
        check_fraction("alpha", alpha)?;
        check_fraction("beta", beta)?;
        let rows = pairs.into_iter().map(|(p, g)| MetricRow::compute(p, g, alpha, beta)).collect::<Result<Vec<_>>>()?;
        Ok(Self::from_rows(rows, alpha, beta))
    }

    pub fn from_rows(rows: Vec<MetricRow>, alpha: f64, beta: f64) -> Self {
        let mut sums = [0.0; 7];
        let mut counts = [0usize; 7];
        let mut undefined = [0usize; 7];
        for r in &rows {
            for (c, v) in r.values().into_iter().enumerate() {
                match v {
                    Some(v) => {
                        sums[c] += v;
                        counts[c] += 1;
                    }
                    None => undefined[c] += 1,
                }
            }
        }
        let means = std::array::from_fn(|c| if counts[c] > 0 { sums[c] / counts[c] as f64 } else { f64::NAN });
        EvalReport { alpha, beta, frame: "256x256", rows, means, undefined }
    }

    pub fn mean(&self, column: &str) -> Option<f64> {
        COLUMNS.iter().position(|&c| c.eq_ignore_ascii_case(column)).map(|i| self.means[i])
    }

    pub fn csv_header() -> String {
        format!("label,{}", COLUMNS.join(","))
    }

    pub fn csv_row(&self, label: &str) -> String {
        let mut s = label.to_string();
        for v in self.means {
            let _ = write!(s, ",{v:.6}");
        }
        s
    }

    pub fn to_csv(&self, label: &str) -> String {
        format!("{}\n{}\n", Self::csv_header(), self.csv_row(label))
    }
}

/// Aligned text table with one row per labelled report.
pub fn text_table(rows: &[(String, &EvalReport)]) -> String {
    let label_w = rows.iter().map(|(l, _)| l.len()).max().unwrap_or(0).max(5);
    let mut s = format!("{:<label_w$}", "model");
    for c in COLUMNS {
        let _ = write!(s, " {c:>8}");
    }
    s.push('\n');
    for (label, r) in rows {
        let _ = write!(s, "{label:<label_w$}");
        for v in r.means {
            let _ = write!(s, " {v:>8.4}");
        }
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square(x0: f64, y0: f64, side: f64) -> Pose {
        let mut kp = [[x0, y0]; NUM_KEYPOINTS];
        kp[1] = [x0 + side, y0 + side];
        Pose::new(kp)
    }

    #[test]
    fn strip_overlap() {
        let v = iou(&square(0.0, 0.0, 1.0), &square(0.5, 0.0, 1.0)).unwrap();
        assert_eq!(v, 0.5 / 1.5);
        assert_eq!(iou(&square(0.0, 0.0, 1.0), &square(3.0, 3.0, 1.0)).unwrap(), 0.0);
        assert!(matches!(iou(&Pose::new([[1.0, 1.0]; 16]), &square(0.0, 0.0, 1.0)), Err(Error::MetricUndefined(_))));
    }

    #[test]
    fn cosine_cases() {
        let mut a = Pose::new([[0.0, 0.0]; 16]);
        let mut b = a.clone();
        assert_eq!(cos_sim(&a, &b), 1.0);
        a.keypoints[0] = [1.0, 0.0];
        b.keypoints[0] = [0.0, 1.0];
        assert_eq!(cos_sim(&a, &b), 15.0 / 16.0);
        b.keypoints[0] = [0.0, 0.0];
        assert_eq!(cos_sim(&a, &b), 15.0 / 16.0);
    }

    #[test]
    fn report_excludes_undefined() {
        let g = Pose::new([[5.0, 5.0]; 16]);
        let r = EvalReport::from_pairs([(&g, &g)], 0.2, 0.5).unwrap();
        assert_eq!(r.undefined[0], 1);
        assert!(r.means[0].is_nan());
        assert_eq!(r.mean("akd"), Some(0.0));
        assert!(EvalReport::from_pairs([(&g, &g)], 0.0, 0.5).is_err());
    }
}
