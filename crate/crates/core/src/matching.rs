//! Bipartite matching between ground-truth pairs and query predictions.

use std::cmp::Ordering;
use std::ops::{Add, Sub};

use thiserror::Error;

use crate::data::Scene;
use crate::geometry::{giou_loss, BBox};

#[derive(Debug, Error, PartialEq)]
pub enum MatchError {
    #[error("{rows} ground-truth pairs exceed {cols} queries")]
    TooManyTargets { rows: usize, cols: usize },
    #[error("non-finite matching cost at ({0}, {1})")]
    NonFinite(usize, usize),
}

/// One ground-truth interaction pair in loss-ready form.
#[derive(Debug, Clone, PartialEq)]
pub struct GtPair {
    pub human: BBox,
    pub object: BBox,
    pub class: usize,
    pub verbs: Vec<usize>,
    /// Pose supervision for the person, `K` points.
    pub keypoints: Vec<[f64; 2]>,
}

pub fn scene_targets(scene: &Scene) -> Vec<GtPair> {
    scene
        .pairs
        .iter()
        .map(|p| {
            let person = &scene.persons[p.person];
            let object = &scene.objects[p.object];
            GtPair {
                human: person.bbox,
                object: object.bbox,
                class: object.class,
                verbs: p.verbs.clone(),
                keypoints: person.pseudo_keypoints.points.clone(),
            }
        })
        .collect()
}

/// Plain-value view of the per-query predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictions {
    pub human: Vec<BBox>,
    pub object: Vec<BBox>,
    /// Softmax over object classes plus background.
    pub class_probs: Vec<Vec<f64>>,
    /// Element-wise sigmoid verb scores.
    pub verb_probs: Vec<Vec<f64>>,
}

impl Predictions {
    pub fn len(&self) -> usize {
        self.human.len()
    }

    pub fn is_empty(&self) -> bool {
        self.human.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostWeights {
    pub boxes: f64,
    pub giou: f64,
    pub class: f64,
    pub verb: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
}

const LOG_EPS: f64 = 1e-8;

/// `cost[g][q]` for every ground-truth pair `g` and query `q`.
pub fn matching_cost(pred: &Predictions, gt: &[GtPair], w: &CostWeights) -> Vec<Vec<f64>> {
    gt.iter()
        .map(|g| {
            (0..pred.len())
                .map(|q| {
                    let (h, o) = (pred.human[q].clamped(), pred.object[q].clamped());
                    let l1: f64 = h.to_array().iter().zip(g.human.to_array()).map(|(a, b)| (a - b).abs()).sum::<f64>()
                        + o.to_array().iter().zip(g.object.to_array()).map(|(a, b)| (a - b).abs()).sum::<f64>();
                    let gl = giou_loss(&h, &g.human) + giou_loss(&o, &g.object);
                    let cls = -pred.class_probs[q][g.class];
                    let verb = verb_cost(&pred.verb_probs[q], &g.verbs, w.focal_alpha, w.focal_gamma);
                    w.boxes * l1 + w.giou * gl + w.class * cls + w.verb * verb
                })
                .collect()
        })
        .collect()
}

/// Mean over positive verbs of the focal positive cost minus the focal negative cost.
fn verb_cost(probs: &[f64], verbs: &[usize], alpha: f64, gamma: f64) -> f64 {
    if verbs.is_empty() {
        return 0.0;
    }
    let total: f64 = verbs
        .iter()
        .map(|&v| {
            let p = probs[v];
            let pos = alpha * (1.0 - p).powf(gamma) * -(p + LOG_EPS).ln();
            let neg = (1.0 - alpha) * p.powf(gamma) * -(1.0 - p + LOG_EPS).ln();
            pos - neg
        })
        .sum();
    total / verbs.len() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// `assignment[g]` is the query matched to ground-truth pair `g`.
    pub assignment: Vec<usize>,
    pub costs: Vec<f64>,
}

impl MatchResult {
    /// Sum of matched entries in ground-truth order.
    pub fn total(&self) -> f64 {
        self.costs.iter().sum()
    }

    /// `(query, gt)` pairs sorted by query index.
    pub fn by_query(&self) -> Vec<(usize, usize)> {
        let mut v: Vec<(usize, usize)> = self.assignment.iter().enumerate().map(|(g, &q)| (q, g)).collect();
        v.sort_unstable();
        v
    }
}

/// Real cost with an integer tie-break key compared lexicographically.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Key(f64, i64);

impl Add for Key {
    type Output = Key;
    fn add(self, o: Key) -> Key {
        Key(self.0 + o.0, self.1 + o.1)
    }
}

impl Sub for Key {
    type Output = Key;
    fn sub(self, o: Key) -> Key {
        Key(self.0 - o.0, self.1 - o.1)
    }
}

impl PartialOrd for Key {
    fn partial_cmp(&self, o: &Key) -> Option<Ordering> {
        match self.0.partial_cmp(&o.0)? {
            Ordering::Equal => Some(self.1.cmp(&o.1)),
            ord => Some(ord),
        }
    }
}

const INF: Key = Key(f64::INFINITY, 0);

/// Minimum-cost injective assignment of rows to columns (shortest augmenting
/// paths, `O(rows² · cols)`).
///
/// Among equal-cost optima the lowest set of column indices wins, assigned
/// to rows in increasing order.
pub fn hungarian(cost: &[Vec<f64>]) -> Result<MatchResult, MatchError> {
    let n = cost.len();
    if n == 0 {
        return Ok(MatchResult { assignment: vec![], costs: vec![] });
    }
    let m = cost[0].len();
    if n > m {
        return Err(MatchError::TooManyTargets { rows: n, cols: m });
    }
    for (i, row) in cost.iter().enumerate() {
        if let Some(j) = row.iter().position(|c| !c.is_finite()) {
            return Err(MatchError::NonFinite(i, j));
        }
    }
    // secondary key: prefer small columns, then increasing order
    let big = (n * n * m + 1) as i64;
    let key = |i: usize, j: usize| Key(cost[i][j], j as i64 * big - (i * j) as i64);

    // 1-based potentials with a virtual column 0
    let mut u = vec![Key(0.0, 0); n + 1];
    let mut v = vec![Key(0.0, 0); m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![INF; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = INF;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = key(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] = u[owner[j]] + delta;
                    v[j] = v[j] - delta;
                } else {
                    minv[j] = minv[j] - delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=m {
        if owner[j] > 0 {
            assignment[owner[j] - 1] = j - 1;
        }
    }
    let costs = assignment.iter().enumerate().map(|(i, &j)| cost[i][j]).collect();
    Ok(MatchResult { assignment, costs })
}
