//! Builds the attention mask of the feature-level fusion (segmentation gate
//! plus distance gate) and runs the cascaded cross-attention blocks on one
//! synthetic scene.

use satfuse::fusion::feature::{compose_mask, distance_mask, AttentionMask};
use satfuse::fusion::{FusionConfig, FusionModel};
use satfuse::synth::{generate_scene, SceneSpec};
use satfuse::tensor::{Graph, Tensor};

fn main() -> satfuse::Result<()> {
    let full = FusionConfig::full_scale();
    let m_dis = distance_mask::<f64>(&full.patch_config(), full.d_meters);
    let dis = AttentionMask { values: m_dis.clone() };
    let counts: Vec<usize> = (0..full.tokens()).map(|t| dis.unmasked_in_row(t)).collect();
    println!(
        "full size: {} tokens, pitch {:?} m, D = {} m -> {}..={} visible keys per query",
        full.tokens(),
        full.patch_config().pitch_m(),
        full.d_meters,
        counts.iter().min().unwrap(),
        counts.iter().max().unwrap()
    );

    // a segmentation gate that blocks every other token column
    let m_seg = Tensor::from_fn(&[full.tokens()], |j| if j % 2 == 0 { 0.0 } else { f64::NEG_INFINITY });
    let mask = compose_mask(&m_seg, &m_dis)?;
    println!(
        "with the gate: hard mask {}, {} fully blocked key columns, query 0 sees {} keys",
        mask.is_hard(),
        mask.fully_masked_columns().len(),
        mask.unmasked_in_row(0)
    );

    let cfg = FusionConfig::desk_scale();
    let model = FusionModel::<f32>::new(cfg.clone(), 0)?;
    let scene = generate_scene(&SceneSpec::default(), 0)?;
    let mut g = Graph::<f32>::inference();
    let out = model.forward(&mut g, &scene.input())?;
    let feat = out.feature.as_ref().expect("masked attention is enabled");
    let mask = AttentionMask {
        values: g.value(feat.mask).clone(),
    };
    println!(
        "desk scale: {} tokens of width {}, {} blocks, {} satellite tokens blocked by relevance",
        cfg.tokens(),
        cfg.c_h,
        feat.blocks.len(),
        mask.fully_masked_columns().len()
    );
    for (i, b) in feat.blocks.iter().enumerate() {
        let a = g.value(b.weights[0]);
        let n = a.shape()[1];
        let sums: Vec<f32> = a.data().chunks(n).map(|r| r.iter().sum()).collect();
        let peak = a.data().iter().copied().fold(0.0f32, f32::max);
        println!(
            "  block {i}: row sums in [{:.4}, {:.4}], largest weight {peak:.3}",
            sums.iter().copied().fold(f32::INFINITY, f32::min),
            sums.iter().copied().fold(0.0, f32::max)
        );
    }
    println!("refined BEV features {:?}", g.shape(out.f_ref));
    Ok(())
}
