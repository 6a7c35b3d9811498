//! Segmentation IoU / mIoU and Chamfer-distance average precision.

mod chamfer;
mod instances;

pub use chamfer::{chamfer_ap, chamfer_distance, point_to_polyline, ApReport, Instance, DEFAULT_THRESHOLDS_M};
pub use instances::{extract_instances, thin};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Result};

/// Map classes of the segmentation task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[repr(u8)]
pub enum Class {
    Background = 0,
    Divider = 1,
    Crossing = 2,
    Boundary = 3,
}

impl Class {
    pub const COUNT: usize = 4;
    pub const ALL: [Class; 4] = [Class::Background, Class::Divider, Class::Crossing, Class::Boundary];
    /// Classes averaged into mIoU.
    pub const FOREGROUND: [Class; 3] = [Class::Divider, Class::Crossing, Class::Boundary];

    pub fn name(self) -> &'static str {
        match self {
            Class::Background => "Background",
            Class::Divider => "Divider",
            Class::Crossing => "Crossing",
            Class::Boundary => "Boundary",
        }
    }

    pub fn from_index(i: u8) -> Option<Class> {
        Class::ALL.get(i as usize).copied()
    }
}

/// `|pred=k ∧ gt=k| / |pred=k ∨ gt=k|`; 1 when both are empty.
pub fn iou(pred: &[u8], gt: &[u8], k: u8) -> Result<f64> {
    let mut acc = IoUAccumulator::new(k as usize + 1);
    acc.add(pred, gt)?;
    Ok(acc.class_iou(k as usize))
}

/// Intersection and union counts pooled over many rasters.
#[derive(Debug, Clone, PartialEq)]
pub struct IoUAccumulator {
    inter: Vec<u64>,
    union: Vec<u64>,
}

impl IoUAccumulator {
    pub fn new(classes: usize) -> Self {
        Self {
            inter: vec![0; classes],
            union: vec![0; classes],
        }
    }

    pub fn add(&mut self, pred: &[u8], gt: &[u8]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(dim_err!(
                "prediction has {} cells, ground truth {}",
                pred.len(),
                gt.len()
            ));
        }
        for (&p, &g) in pred.iter().zip(gt) {
            let (p, g) = (p as usize, g as usize);
            if p == g {
                if p < self.inter.len() {
                    self.inter[p] += 1;
                    self.union[p] += 1;
                }
            } else {
                if p < self.union.len() {
                    self.union[p] += 1;
                }
                if g < self.union.len() {
                    self.union[g] += 1;
                }
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &IoUAccumulator) {
        for k in 0..self.inter.len().min(other.inter.len()) {
            self.inter[k] += other.inter[k];
            self.union[k] += other.union[k];
        }
    }

    pub fn class_iou(&self, k: usize) -> f64 {
        match self.union[k] {
            0 => 1.0,
            u => self.inter[k] as f64 / u as f64,
        }
    }

    pub fn report(&self) -> IoUReport {
        let per_class: BTreeMap<String, f64> = Class::FOREGROUND
            .iter()
            .map(|&c| (c.name().to_string(), self.class_iou(c as usize)))
            .collect();
        let miou = per_class.values().sum::<f64>() / per_class.len() as f64;
        IoUReport { per_class, miou }
    }
}

/// Per-class IoU and their mean over the foreground classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IoUReport {
    pub per_class: BTreeMap<String, f64>,
    pub miou: f64,
}

impl IoUReport {
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a [u8], &'a [u8])>) -> Result<Self> {
        let mut acc = IoUAccumulator::new(Class::COUNT);
        for (p, g) in pairs {
            acc.add(p, g)?;
        }
        Ok(acc.report())
    }

    /// `{"Divider": .., "Crossing": .., "Boundary": .., "All": ..}`.
    pub fn table_row(&self) -> serde_json::Value {
        let mut row = serde_json::Map::new();
        for c in Class::FOREGROUND {
            row.insert(c.name().into(), self.per_class[c.name()].into());
        }
        row.insert("All".into(), self.miou.into());
        serde_json::Value::Object(row)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square(h: usize, w: usize, r0: usize, c0: usize, side_r: usize, side_c: usize, k: u8) -> Vec<u8> {
        let mut v = vec![0u8; h * w];
        for r in r0..r0 + side_r {
            for c in c0..c0 + side_c {
                v[r * w + c] = k;
            }
        }
        v
    }

    #[test]
    fn iou_fixtures() {
        let a = square(20, 30, 2, 2, 10, 10, 1);
        assert_eq!(iou(&a, &a, 1).unwrap(), 1.0);
        let b = square(20, 30, 2, 15, 10, 10, 1);
        assert_eq!(iou(&a, &b, 1).unwrap(), 0.0);
        let c = square(20, 30, 2, 7, 10, 10, 1);
        assert!((iou(&a, &c, 1).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(iou(&a, &a, 2).unwrap(), 1.0);
        assert!(iou(&a, &a[1..], 1).is_err());
    }

    #[test]
    fn miou_excludes_background() {
        let gt = vec![0, 1, 2, 3];
        let pred = vec![1, 1, 2, 3];
        let r = IoUReport::from_pairs([(&pred[..], &gt[..])]).unwrap();
        assert!((r.per_class["Divider"] - 0.5).abs() < 1e-12);
        assert!((r.miou - (0.5 + 1.0 + 1.0) / 3.0).abs() < 1e-12);
        assert_eq!(r.table_row()["All"], serde_json::json!(r.miou));
    }
}
