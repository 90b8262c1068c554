//! K-medoids template extraction and nearest-template labelling.
//!
//! Clustering follows the simple-and-fast K-medoids scheme of Park and Jun:
//! initial medoids are the points with the smallest normalized distance sums,
//! then assignment and per-cluster medoid updates alternate until stable.
//! A single-swap refinement follows: the alternating phase cannot move a
//! medoid when its cluster cost is tied, so it stalls well short of the
//! optimum on small sets.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pose::NormalizedPose;

pub const MAX_ITERATIONS: usize = 100;
pub const KEYPOINT_ORDER_NOTE: &str = "MPII: 0 r-ankle, 1 r-knee, 2 r-hip, 3 l-hip, 4 l-knee, 5 l-ankle, 6 pelvis, \
7 thorax, 8 upper-neck, 9 head-top, 10 r-wrist, 11 r-elbow, 12 r-shoulder, 13 l-shoulder, 14 l-elbow, 15 l-wrist";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemplateBank {
    pub m: usize,
    pub keypoint_order: String,
    /// Indices into the pose list the bank was built from.
    pub medoids: Vec<usize>,
    pub templates: Vec<NormalizedPose>,
}

/// Cost history of one clustering run.
#[derive(Clone, Debug, PartialEq)]
pub struct KMedoidsTrace {
    pub init_cost: f64,
    /// Cost after each assign/update round, then after each accepted swap.
    pub costs: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub swaps: usize,
}

impl KMedoidsTrace {
    pub fn final_cost(&self) -> f64 {
        self.costs.last().copied().unwrap_or(self.init_cost)
    }
}

pub fn distance_matrix(poses: &[NormalizedPose]) -> Vec<Vec<f64>> {
    let n = poses.len();
    let mut d = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let v = poses[i].distance(&poses[j]);
            d[i][j] = v;
            d[j][i] = v;
        }
    }
    d
}

/// Sum over points of the distance to the nearest medoid (ties → lowest slot).
pub fn clustering_cost(d: &[Vec<f64>], medoids: &[usize]) -> f64 {
    assign(d, medoids).iter().enumerate().map(|(i, &c)| d[i][medoids[c]]).sum()
}

fn assign(d: &[Vec<f64>], medoids: &[usize]) -> Vec<usize> {
    (0..d.len())
        .map(|i| {
            let mut best = 0;
            for c in 1..medoids.len() {
                if d[i][medoids[c]] < d[i][medoids[best]] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

pub fn kmedoids(poses: &[NormalizedPose], m: usize) -> Result<TemplateBank> {
    kmedoids_traced(poses, m).map(|(bank, _)| bank)
}

pub fn kmedoids_traced(poses: &[NormalizedPose], m: usize) -> Result<(TemplateBank, KMedoidsTrace)> {
    let n = poses.len();
    if m == 0 {
        return Err(Error::Input("template count m must be positive".into()));
    }
    if m > n {
        return Err(Error::Input(format!("cannot pick {m} templates from {n} poses")));
    }
    let d = distance_matrix(poses);
    let row_sums: Vec<f64> = d.iter().map(|r| r.iter().sum()).collect();
    let v: Vec<f64> = (0..n)
        .map(|j| (0..n).map(|i| if row_sums[i] > 0.0 { d[i][j] / row_sums[i] } else { 0.0 }).sum())
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]).then(a.cmp(&b)));

    // Skip exact duplicates of chosen medoids so every cluster is non-empty.
    let mut medoids = Vec::with_capacity(m);
    for &j in &order {
        if medoids.len() == m {
            break;
        }
        if medoids.iter().all(|&k: &usize| d[j][k] > 0.0) {
            medoids.push(j);
        }
    }
    if medoids.len() < m {
        return Err(Error::Input(format!("only {} distinct poses, cannot pick {m} templates", medoids.len())));
    }

    let init_cost = clustering_cost(&d, &medoids);
    let mut costs = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    while iterations < MAX_ITERATIONS {
        iterations += 1;
        let labels = assign(&d, &medoids);
        let mut next = medoids.clone();
        for (c, slot) in next.iter_mut().enumerate() {
            let members: Vec<usize> = (0..n).filter(|&i| labels[i] == c).collect();
            let mut best = *slot;
            let mut best_cost: f64 = members.iter().map(|&i| d[best][i]).sum();
            for &cand in &members {
                let cost: f64 = members.iter().map(|&i| d[cand][i]).sum();
                if cost < best_cost || (cost == best_cost && cand < best) {
                    best = cand;
                    best_cost = cost;
                }
            }
            *slot = best;
        }
        costs.push(clustering_cost(&d, &next));
        if next == medoids {
            converged = true;
            break;
        }
        medoids = next;
    }
    let swaps = refine_by_swaps(&d, &mut medoids, &mut costs);

    medoids.sort_unstable();
    let bank = TemplateBank {
        m,
        keypoint_order: KEYPOINT_ORDER_NOTE.to_string(),
        templates: medoids.iter().map(|&i| poses[i].clone()).collect(),
        medoids,
    };
    Ok((bank, KMedoidsTrace { init_cost, costs, iterations, converged, swaps }))
}

/// Best-improvement medoid/non-medoid swaps until none lowers the cost by
/// more than a relative 1e-12, at most `MAX_ITERATIONS` swaps. Ties go to the
/// lowest (slot, candidate). Returns the number of swaps taken.
fn refine_by_swaps(d: &[Vec<f64>], medoids: &mut [usize], costs: &mut Vec<f64>) -> usize {
    let (n, m) = (d.len(), medoids.len());
    let mut cost = clustering_cost(d, medoids);
    let mut swaps = 0;
    while swaps < MAX_ITERATIONS {
        // nearest and second-nearest medoid distance per point
        let mut near = vec![(0usize, f64::INFINITY, f64::INFINITY); n];
        for (i, e) in near.iter_mut().enumerate() {
            for (slot, &k) in medoids.iter().enumerate() {
                let v = d[i][k];
                if v < e.1 {
                    *e = (slot, v, e.1);
                } else if v < e.2 {
                    e.2 = v;
                }
            }
        }
        let mut best: Option<(usize, usize, f64)> = None;
        for slot in 0..m {
            for cand in 0..n {
                // a candidate equal to a kept medoid would leave a cluster empty
                if medoids.iter().enumerate().any(|(s, &k)| d[cand][k] == 0.0 && (s != slot || k == cand)) {
                    continue;
                }
                let trial: f64 = near
                    .iter()
                    .enumerate()
                    .map(|(i, &(ns, d1, d2))| if ns == slot { d2.min(d[i][cand]) } else { d1.min(d[i][cand]) })
                    .sum();
                let bar = best.map_or(cost, |b| b.2);
                if trial < bar - 1e-12 * cost.abs() {
                    best = Some((slot, cand, trial));
                }
            }
        }
        let Some((slot, cand, _)) = best else { break };
        medoids[slot] = cand;
        cost = clustering_cost(d, medoids);
        costs.push(cost);
        swaps += 1;
    }
    swaps
}

/// Nearest template (ties → lowest index) and its one-hot encoding.
pub fn assign_label(p: &NormalizedPose, bank: &TemplateBank) -> Result<(usize, Vec<f64>)> {
    if bank.templates.is_empty() {
        return Err(Error::Input("template bank is empty".into()));
    }
    let mut best = 0;
    let mut best_d = p.distance(&bank.templates[0]);
    for (i, t) in bank.templates.iter().enumerate().skip(1) {
        let dist = p.distance(t);
        if dist < best_d {
            best = i;
            best_d = dist;
        }
    }
    Ok((best, one_hot(best, bank.templates.len())))
}

pub fn one_hot(class: usize, m: usize) -> Vec<f64> {
    let mut y = vec![0.0; m];
    y[class] = 1.0;
    y
}

impl TemplateBank {
    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let bank: TemplateBank = serde_json::from_str(&text)?;
        if bank.m != bank.templates.len() || bank.medoids.len() != bank.m {
            return Err(Error::Format(format!(
                "template bank declares m={} but holds {} templates and {} medoid indices",
                bank.m,
                bank.templates.len(),
                bank.medoids.len()
            )));
        }
        Ok(bank)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn point(x: f64) -> NormalizedPose {
        NormalizedPose([[x, 0.0]; 16])
    }

    #[test]
    fn m_equals_n() {
        let poses: Vec<_> = (0..5).map(|i| point(i as f64 * 0.1)).collect();
        let bank = kmedoids(&poses, 5).unwrap();
        assert_eq!(bank.medoids, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn bad_m() {
        let poses = vec![point(0.0), point(1.0)];
        assert!(matches!(kmedoids(&poses, 0), Err(Error::Input(_))));
        assert!(matches!(kmedoids(&poses, 3), Err(Error::Input(_))));
    }

    #[test]
    fn tie_goes_to_lowest_class() {
        let bank = TemplateBank {
            m: 4,
            keypoint_order: String::new(),
            medoids: vec![0, 1, 2, 3],
            templates: vec![point(0.0), point(0.4), point(0.9), point(0.6)],
        };
        let (c, y) = assign_label(&point(0.5), &bank).unwrap();
        assert_eq!(c, 1);
        assert_eq!(y, vec![0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn bank_file_roundtrip() {
        let poses: Vec<_> = (0..6).map(|i| point(i as f64 * 0.2)).collect();
        let bank = kmedoids(&poses, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bank.json");
        bank.save(&p).unwrap();
        assert_eq!(TemplateBank::load(&p).unwrap(), bank);
    }
}
