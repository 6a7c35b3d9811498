//! Renders side-by-side panels (BEV feature magnitude, satellite tile,
//! prediction, ground truth) for a few scenes with an untrained model.

use satfuse::cli::render_panels;
use satfuse::fusion::{FusionConfig, FusionModel};
use satfuse::synth::{generate_scenes, SceneSpec};

fn main() -> satfuse::Result<()> {
    let model = FusionModel::<f32>::new(FusionConfig::desk_scale(), 0)?;
    let out = std::env::temp_dir().join("satfuse-render");
    std::fs::create_dir_all(&out)?;
    for s in generate_scenes(&SceneSpec::default(), 0..3)? {
        let pred = model.classify(&s.input())?;
        let img = render_panels(&s, &pred, 8);
        let path = out.join(format!("scene{:03}_{}.png", s.meta.index, s.meta.range.label()));
        img.save(&path)?;
        println!("{} ({}x{})", path.display(), img.width(), img.height());
    }
    Ok(())
}
