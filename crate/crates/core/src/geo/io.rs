//! Tile dataset persistence: RGBA PNG (alpha = validity) plus JSON sidecar,
//! and district rasters with their georeferencing sidecar.

use std::path::{Path, PathBuf};

use image::{GrayImage, Luma, Rgb, RgbImage, Rgba, RgbaImage};
use serde::{Deserialize, Serialize};

use super::tile::{SatTile, TILE_EXTENT_M};
use super::transform::{GeoTransform, Pose};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TileSidecar {
    pub id: String,
    pub pose: Pose,
    /// (lateral, longitudinal) meters.
    pub extent_m: [f64; 2],
    /// (rows, cols).
    pub resolution: [usize; 2],
    pub transform_id: String,
    pub valid_count: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TileManifest {
    pub transform_id: String,
    pub transform: GeoTransform,
    pub samples: Vec<String>,
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// `[3×H×W]` in `[0,1]` to an 8-bit RGB image.
pub fn tensor_to_rgb(t: &Tensor<f32>) -> Result<RgbImage> {
    t.expect_rank(3, "rgb image")?;
    let (h, w) = (t.shape()[1], t.shape()[2]);
    if t.shape()[0] != 3 {
        return Err(Error::Format(format!("expected 3 channels, got {:?}", t.shape())));
    }
    let plane = h * w;
    let d = t.data();
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        Rgb([to_u8(d[i]), to_u8(d[plane + i]), to_u8(d[2 * plane + i])])
    }))
}

pub fn rgb_to_tensor(img: &RgbImage) -> Tensor<f32> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let plane = h * w;
    let mut data = vec![0.0f32; 3 * plane];
    for (x, y, p) in img.enumerate_pixels() {
        let i = y as usize * w + x as usize;
        for k in 0..3 {
            data[k * plane + i] = p[k] as f32 / 255.0;
        }
    }
    Tensor::new(&[3, h, w], data).expect("image has positive size")
}

pub fn write_tile(path_stem: impl AsRef<Path>, id: &str, tile: &SatTile) -> Result<()> {
    let stem = path_stem.as_ref();
    let (h, w) = tile.resolution();
    let plane = h * w;
    let d = tile.pixels.data();
    let img = RgbaImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        Rgba([
            to_u8(d[i]),
            to_u8(d[plane + i]),
            to_u8(d[2 * plane + i]),
            if tile.valid[i] { 255 } else { 0 },
        ])
    });
    img.save(stem.with_extension("png"))?;
    let sidecar = TileSidecar {
        id: id.to_string(),
        pose: tile.pose,
        extent_m: [TILE_EXTENT_M.0, TILE_EXTENT_M.1],
        resolution: [h, w],
        transform_id: tile.transform_id.clone(),
        valid_count: tile.valid_count(),
    };
    std::fs::write(stem.with_extension("json"), serde_json::to_vec_pretty(&sidecar)?)?;
    Ok(())
}

pub fn read_tile(path_stem: impl AsRef<Path>) -> Result<(TileSidecar, SatTile)> {
    let stem = path_stem.as_ref();
    let sidecar: TileSidecar = serde_json::from_slice(&std::fs::read(stem.with_extension("json"))?)
        .map_err(|e| Error::Format(format!("malformed tile sidecar {}: {e}", stem.display())))?;
    if sidecar.extent_m != [TILE_EXTENT_M.0, TILE_EXTENT_M.1] {
        return Err(Error::Format(format!(
            "tile extent {:?} m, expected {:?}",
            sidecar.extent_m, TILE_EXTENT_M
        )));
    }
    let img = image::open(stem.with_extension("png"))?.to_rgba8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    if [h, w] != sidecar.resolution {
        return Err(Error::Format(format!(
            "image is {h}x{w} but sidecar says {:?}",
            sidecar.resolution
        )));
    }
    let plane = h * w;
    let mut data = vec![0.0f32; 3 * plane];
    let mut valid = vec![false; plane];
    for (x, y, p) in img.enumerate_pixels() {
        let i = y as usize * w + x as usize;
        for k in 0..3 {
            data[k * plane + i] = p[k] as f32 / 255.0;
        }
        valid[i] = p[3] > 127;
    }
    let tile = SatTile {
        pixels: Tensor::new(&[3, h, w], data)?,
        pose: sidecar.pose,
        valid,
        transform_id: sidecar.transform_id.clone(),
    };
    if tile.valid_count() != sidecar.valid_count {
        return Err(Error::Format(format!(
            "sidecar valid_count {} disagrees with image mask {}",
            sidecar.valid_count,
            tile.valid_count()
        )));
    }
    Ok((sidecar, tile))
}

/// Writes `manifest.json` plus `{id}.png` / `{id}.json` for every tile, in
/// order.
pub fn write_tile_dataset(
    dir: impl AsRef<Path>,
    transform_id: &str,
    transform: &GeoTransform,
    tiles: &[(String, SatTile)],
) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    for (id, tile) in tiles {
        write_tile(dir.join(id), id, tile)?;
    }
    let manifest = TileManifest {
        transform_id: transform_id.to_string(),
        transform: *transform,
        samples: tiles.iter().map(|(id, _)| id.clone()).collect(),
    };
    std::fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

pub fn read_tile_dataset(dir: impl AsRef<Path>) -> Result<(TileManifest, Vec<SatTile>)> {
    let dir = dir.as_ref();
    let manifest: TileManifest = serde_json::from_slice(&std::fs::read(dir.join("manifest.json"))?)
        .map_err(|e| Error::Format(format!("malformed tile manifest: {e}")))?;
    let tiles = manifest
        .samples
        .iter()
        .map(|id| {
            let (side, tile) = read_tile(dir.join(id))?;
            if &side.id != id {
                return Err(Error::Format(format!("sidecar id {} under manifest id {id}", side.id)));
            }
            Ok(tile)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, tiles))
}

/// Georeferencing sidecar of a district raster: `pixel = R(rotation)·(world −
/// origin) / meters_per_pixel`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DistrictSidecar {
    pub meters_per_pixel: f64,
    pub origin: [f64; 2],
    #[serde(default)]
    pub rotation: f64,
}

impl DistrictSidecar {
    pub fn transform(&self) -> Result<GeoTransform> {
        let base = GeoTransform::similarity(self.meters_per_pixel, self.rotation, [0.0, 0.0])?;
        let shifted = base.apply(self.origin);
        GeoTransform::affine(base.linear, [-shifted[0], -shifted[1]])
    }
}

pub struct DistrictRaster {
    pub pixels: Tensor<f32>,
    pub sidecar: DistrictSidecar,
}

pub fn sidecar_path(png: &Path) -> PathBuf {
    png.with_extension("json")
}

pub fn read_district(png: impl AsRef<Path>) -> Result<DistrictRaster> {
    let png = png.as_ref();
    let sidecar: DistrictSidecar = serde_json::from_slice(&std::fs::read(sidecar_path(png))?)
        .map_err(|e| Error::Format(format!("malformed district sidecar: {e}")))?;
    let pixels = rgb_to_tensor(&image::open(png)?.to_rgb8());
    Ok(DistrictRaster { pixels, sidecar })
}

pub fn write_district(png: impl AsRef<Path>, raster: &DistrictRaster) -> Result<()> {
    let png = png.as_ref();
    tensor_to_rgb(&raster.pixels)?.save(png)?;
    std::fs::write(sidecar_path(png), serde_json::to_vec_pretty(&raster.sidecar)?)?;
    Ok(())
}

/// Single-channel 8-bit raster (class indices or masks).
pub fn write_gray(path: impl AsRef<Path>, h: usize, w: usize, values: &[u8]) -> Result<()> {
    let img = GrayImage::from_fn(w as u32, h as u32, |x, y| Luma([values[y as usize * w + x as usize]]));
    img.save(path)?;
    Ok(())
}

pub fn read_gray(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<u8>)> {
    let img = image::open(path)?.to_luma8();
    Ok((img.height() as usize, img.width() as usize, img.into_raw()))
}
