use std::path::Path;

use image::{Rgba, RgbaImage};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::scene::{generate_scene, SceneMeta, SceneSample, SceneSpec};
use crate::error::{Error, Result};
use crate::geo::io::{read_gray, write_gray};
use crate::tensor::tsr;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitEntry {
    pub id: String,
    pub index: usize,
    pub seed: u64,
}

/// `manifest.json` of a generated split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub spec: SceneSpec,
    pub samples: Vec<SplitEntry>,
}

/// Writes `{id}.bev.tsr`, `{id}.sat.tsr`, `{id}.sat.png` (alpha = coverage),
/// `{id}.gt.png` and `{id}.json`.
pub fn write_sample(dir: impl AsRef<Path>, id: &str, s: &SceneSample) -> Result<()> {
    let dir = dir.as_ref();
    let (h, w) = (s.height(), s.width());
    tsr::write(dir.join(format!("{id}.bev.tsr")), &s.f_bev)?;
    tsr::write(dir.join(format!("{id}.sat.tsr")), &s.sat)?;
    let plane = h * w;
    let d = s.sat.data();
    let img = RgbaImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        let q = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgba([
            q(d[i]),
            q(d[plane + i]),
            q(d[2 * plane + i]),
            if s.sat_valid[i] { 255 } else { 0 },
        ])
    });
    img.save(dir.join(format!("{id}.sat.png")))?;
    write_gray(dir.join(format!("{id}.gt.png")), h, w, &s.gt)?;
    std::fs::write(dir.join(format!("{id}.json")), serde_json::to_vec(&s.meta)?)?;
    Ok(())
}

pub fn read_sample(dir: impl AsRef<Path>, id: &str) -> Result<SceneSample> {
    let dir = dir.as_ref();
    let f_bev = tsr::read(dir.join(format!("{id}.bev.tsr")))?;
    let sat = tsr::read(dir.join(format!("{id}.sat.tsr")))?;
    let (gh, gw, gt) = read_gray(dir.join(format!("{id}.gt.png")))?;
    let meta: SceneMeta = serde_json::from_slice(&std::fs::read(dir.join(format!("{id}.json")))?)
        .map_err(|e| Error::Format(format!("malformed sample meta {id}: {e}")))?;
    let alpha = image::open(dir.join(format!("{id}.sat.png")))?.to_rgba8();
    let sat_valid: Vec<bool> = alpha.pixels().map(|p| p[3] > 127).collect();
    let fs = f_bev.shape().to_vec();
    if fs.len() != 3 || [fs[0], fs[1]] != [gh, gw] || sat.shape() != [3, gh, gw] || sat_valid.len() != gh * gw {
        return Err(Error::Format(format!(
            "sample {id}: features {:?}, satellite {:?} and gt {gh}x{gw} disagree",
            fs,
            sat.shape()
        )));
    }
    Ok(SceneSample {
        f_bev,
        sat,
        sat_valid,
        gt,
        meta,
    })
}

/// Generates `n` samples of `spec` (indices `0..n`) into `out_dir`.
pub fn write_split(spec: &SceneSpec, n: usize, out_dir: impl AsRef<Path>) -> Result<SplitManifest> {
    if n == 0 {
        return Err(Error::Config("a split needs at least one sample".into()));
    }
    spec.validate()?;
    let dir = out_dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let entries = (0..n)
        .into_par_iter()
        .map(|i| {
            let s = generate_scene(spec, i)?;
            let id = format!("s{i:05}");
            write_sample(dir, &id, &s)?;
            Ok(SplitEntry {
                id,
                index: i,
                seed: s.meta.seed,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = SplitManifest {
        spec: spec.clone(),
        samples: entries,
    };
    std::fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn read_split(dir: impl AsRef<Path>) -> Result<(SplitManifest, Vec<SceneSample>)> {
    let dir = dir.as_ref();
    let manifest: SplitManifest = serde_json::from_slice(&std::fs::read(dir.join("manifest.json"))?)
        .map_err(|e| Error::Format(format!("malformed split manifest: {e}")))?;
    let samples = manifest
        .samples
        .par_iter()
        .map(|e| read_sample(dir, &e.id))
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, samples))
}
