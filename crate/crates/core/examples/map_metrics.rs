//! Scores a corrupted prediction against ground truth with per-class IoU and
//! with Chamfer-distance AP over vectorised map instances.

use satfuse::metrics::{chamfer_ap, extract_instances, IoUReport, DEFAULT_THRESHOLDS_M};
use satfuse::synth::{generate_scene, SceneSpec};

fn main() -> satfuse::Result<()> {
    let spec = SceneSpec::default();
    let s = generate_scene(&spec, 0)?;
    let (h, w) = (s.height(), s.width());
    let cell = spec.cell_m(s.meta.range);

    // shift the ground truth one column right and erase a block of cells
    let mut pred = vec![0u8; h * w];
    for r in 0..h {
        for c in 1..w {
            pred[r * w + c] = s.gt[r * w + c - 1];
        }
    }
    for r in 0..h / 2 {
        for c in 0..w / 4 {
            pred[r * w + c] = 0;
        }
    }

    let perfect = IoUReport::from_pairs([(&s.gt[..], &s.gt[..])])?;
    let noisy = IoUReport::from_pairs([(&pred[..], &s.gt[..])])?;
    println!("IoU perfect {:?}", perfect.table_row());
    println!("IoU shifted {:?}", noisy.table_row());

    let gt_inst = extract_instances(&s.gt, h, w, cell, None, 3)?;
    let pred_inst = extract_instances(&pred, h, w, cell, None, 3)?;
    println!(
        "{} ground-truth and {} predicted instances",
        gt_inst.len(),
        pred_inst.len()
    );
    let ap = chamfer_ap(&pred_inst, &gt_inst, &DEFAULT_THRESHOLDS_M)?;
    for (class, v) in &ap.per_class {
        println!(
            "  {class:9} AP @ {:?} m = {:?}",
            ap.thresholds,
            v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>()
        );
    }
    println!("mAP {:.3}", ap.map);
    Ok(())
}
