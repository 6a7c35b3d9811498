//! Procedural road scenes: ground-truth map rasters, onboard BEV features that
//! decay with range and vanish behind occluders, and an overhead satellite
//! render with registration error, tree cover and coverage gaps.

mod io;
mod scene;

pub use io::{read_sample, read_split, write_sample, write_split, SplitManifest};
pub use scene::{
    generate_scene, generate_scenes, sample_seed, BevRange, Layout, ScenarioTag, SceneMeta, SceneSample, SceneSpec,
};
