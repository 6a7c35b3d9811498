use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::Class;
use crate::error::{Error, Result};
use crate::geo::Point2;

/// Matching thresholds in meters.
pub const DEFAULT_THRESHOLDS_M: [f64; 3] = [0.5, 1.0, 1.5];

/// Spacing used to sample polylines when averaging distances.
const SAMPLE_STEP_M: f64 = 0.05;

/// A map element as an ordered point list in meters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub class: Class,
    pub points: Vec<Point2>,
    /// Confidence; ignored for ground truth.
    pub score: f64,
}

impl Instance {
    pub fn new(class: Class, points: Vec<Point2>, score: f64) -> Self {
        Self { class, points, score }
    }
}

fn seg_dist(p: Point2, a: Point2, b: Point2) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0)
    };
    let (qx, qy) = (a[0] + t * dx - p[0], a[1] + t * dy - p[1]);
    (qx * qx + qy * qy).sqrt()
}

/// Distance from `p` to the nearest point of `line`.
pub fn point_to_polyline(p: Point2, line: &[Point2]) -> f64 {
    match line {
        [] => f64::INFINITY,
        [a] => seg_dist(p, *a, *a),
        _ => line
            .windows(2)
            .map(|s| seg_dist(p, s[0], s[1]))
            .fold(f64::INFINITY, f64::min),
    }
}

fn densify(line: &[Point2]) -> Vec<Point2> {
    let mut out = vec![line[0]];
    for s in line.windows(2) {
        let len = ((s[1][0] - s[0][0]).powi(2) + (s[1][1] - s[0][1]).powi(2)).sqrt();
        let n = (len / SAMPLE_STEP_M).ceil().max(1.0) as usize;
        for i in 1..=n {
            let t = i as f64 / n as f64;
            out.push([s[0][0] + t * (s[1][0] - s[0][0]), s[0][1] + t * (s[1][1] - s[0][1])]);
        }
    }
    out
}

fn directed(a: &[Point2], b: &[Point2]) -> f64 {
    let pts = densify(a);
    pts.iter().map(|&p| point_to_polyline(p, b)).sum::<f64>() / pts.len() as f64
}

/// Symmetric Chamfer distance: the mean of both directed mean distances,
/// with each polyline sampled densely along its length.
pub fn chamfer_distance(a: &[Point2], b: &[Point2]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Format("chamfer distance of an empty polyline".into()));
    }
    Ok(0.5 * (directed(a, b) + directed(b, a)))
}

/// Average precision per class and threshold, and their mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApReport {
    /// Class name → AP at each threshold.
    pub per_class: BTreeMap<String, Vec<f64>>,
    pub thresholds: Vec<f64>,
    pub map: f64,
}

/// All-point interpolated AP of a score-ranked list of hit flags.
fn average_precision(hits: &[bool], n_gt: usize) -> f64 {
    let mut tp = 0usize;
    let mut points = Vec::with_capacity(hits.len());
    for (i, &h) in hits.iter().enumerate() {
        if h {
            tp += 1;
        }
        points.push((tp as f64 / n_gt as f64, tp as f64 / (i + 1) as f64));
    }
    // precision envelope, integrated over recall steps
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for i in 0..points.len() {
        let (r, _) = points[i];
        if r > prev_recall {
            let p_max = points[i..].iter().map(|x| x.1).fold(0.0, f64::max);
            ap += (r - prev_recall) * p_max;
            prev_recall = r;
        }
    }
    ap
}

/// Chamfer-distance AP. A prediction matches a same-class ground-truth
/// element when their symmetric Chamfer distance is within the threshold;
/// pairs are assigned one-to-one greedily in order of ascending distance.
/// Classes without ground truth are skipped.
pub fn chamfer_ap(pred: &[Instance], gt: &[Instance], thresholds: &[f64]) -> Result<ApReport> {
    if thresholds.is_empty() {
        return Err(Error::Config("chamfer AP needs at least one threshold".into()));
    }
    if let Some(bad) = pred.iter().chain(gt).find(|i| i.points.is_empty()) {
        return Err(Error::Format(format!("{} instance without points", bad.class.name())));
    }
    let mut per_class = BTreeMap::new();
    for class in Class::FOREGROUND {
        let g: Vec<&Instance> = gt.iter().filter(|i| i.class == class).collect();
        if g.is_empty() {
            continue;
        }
        let mut p: Vec<&Instance> = pred.iter().filter(|i| i.class == class).collect();
        p.sort_by(|a, b| b.score.total_cmp(&a.score));
        let dist: Vec<Vec<f64>> = p
            .iter()
            .map(|pi| g.iter().map(|gi| chamfer_distance(&pi.points, &gi.points)).collect())
            .collect::<Result<_>>()?;
        let mut aps = Vec::with_capacity(thresholds.len());
        for &tau in thresholds {
            let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
            for (i, row) in dist.iter().enumerate() {
                for (j, &d) in row.iter().enumerate() {
                    if d <= tau {
                        pairs.push((d, i, j));
                    }
                }
            }
            pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
            let mut hit = vec![false; p.len()];
            let mut taken = vec![false; g.len()];
            for (_, i, j) in pairs {
                if !hit[i] && !taken[j] {
                    hit[i] = true;
                    taken[j] = true;
                }
            }
            aps.push(average_precision(&hit, g.len()));
        }
        per_class.insert(class.name().to_string(), aps);
    }
    let map = if per_class.is_empty() {
        if pred.is_empty() {
            1.0
        } else {
            0.0
        }
    } else {
        let all: Vec<f64> = per_class.values().flatten().copied().collect();
        all.iter().sum::<f64>() / all.len() as f64
    };
    Ok(ApReport {
        per_class,
        thresholds: thresholds.to_vec(),
        map,
    })
}
