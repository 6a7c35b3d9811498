use super::transform::{GeoTransform, Point2, Pose};
use crate::error::{dim_err, Result};
use crate::tensor::ops::bilinear_taps;
use crate::tensor::Tensor;

/// Tile footprint in meters: (lateral, longitudinal).
pub const TILE_EXTENT_M: (f64, f64) = (30.0, 60.0);

/// Default resized tile shape fed to the satellite branch.
pub const FUSION_INPUT_RES: (usize, usize) = (100, 200);

/// An oriented satellite crop centred on a vehicle pose.
///
/// Rows advance along [`Pose::lateral`], columns along [`Pose::heading`]; the
/// footprint is always [`TILE_EXTENT_M`].
#[derive(Debug, Clone, PartialEq)]
pub struct SatTile {
    /// `[3×H×W]`, values in `[0, 1]`.
    pub pixels: Tensor<f32>,
    pub pose: Pose,
    /// Per-pixel flag: the sample point fell inside the source raster.
    pub valid: Vec<bool>,
    pub transform_id: String,
}

impl SatTile {
    pub fn resolution(&self) -> (usize, usize) {
        (self.pixels.shape()[1], self.pixels.shape()[2])
    }

    pub fn extent(&self) -> (f64, f64) {
        TILE_EXTENT_M
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}

/// World position of the centre of tile pixel `(row, col)`.
pub fn tile_pixel_world(pose: &Pose, res: (usize, usize), row: usize, col: usize) -> Point2 {
    let (lat_m, lon_m) = TILE_EXTENT_M;
    let u = (col as f64 + 0.5) * lon_m / res.1 as f64 - lon_m / 2.0;
    let v = (row as f64 + 0.5) * lat_m / res.0 as f64 - lat_m / 2.0;
    let h = pose.heading();
    let l = pose.lateral();
    [pose.x + u * h[0] + v * l[0], pose.y + u * h[1] + v * l[1]]
}

/// Raster index-space coordinates `(row, col)` of a world point; pixel
/// centres sit at half-integer continuous coordinates.
pub fn world_to_raster_index(transform: &GeoTransform, world: Point2) -> (f64, f64) {
    let p = transform.apply(world);
    (p[1] - 0.5, p[0] - 0.5)
}

/// Whether index-space position `(r, c)` lies inside the pixel-centre hull of
/// an `h×w` raster, i.e. all interpolation neighbours exist.
pub fn in_raster(r: f64, c: f64, h: usize, w: usize) -> bool {
    r >= 0.0 && c >= 0.0 && r <= (h - 1) as f64 && c <= (w - 1) as f64
}

/// Samples an oriented `(30 m, 60 m)` rectangle around `pose` from a district
/// raster `[3×H_r×W_r]` by bilinear interpolation. Samples outside the raster
/// are zero and marked invalid.
pub fn extract_tile(
    raster: &Tensor<f32>,
    transform: &GeoTransform,
    pose: Pose,
    out_res: (usize, usize),
) -> Result<SatTile> {
    raster.expect_rank(3, "district raster")?;
    if out_res.0 == 0 || out_res.1 == 0 {
        return Err(dim_err!("tile resolution must be positive, got {out_res:?}"));
    }
    let (ch, hr, wr) = (raster.shape()[0], raster.shape()[1], raster.shape()[2]);
    let (ht, wt) = out_res;
    let plane = ht * wt;
    let mut pixels = vec![0.0f32; ch * plane];
    let mut valid = vec![false; plane];
    let rd = raster.data();
    for row in 0..ht {
        for col in 0..wt {
            let (r, c) = world_to_raster_index(transform, tile_pixel_world(&pose, out_res, row, col));
            if !in_raster(r, c, hr, wr) {
                continue;
            }
            let i = row * wt + col;
            valid[i] = true;
            for tap in bilinear_taps(r, c, hr, wr) {
                let src = tap.row * wr + tap.col;
                for k in 0..ch {
                    pixels[k * plane + i] += (tap.weight * rd[k * hr * wr + src] as f64) as f32;
                }
            }
        }
    }
    Ok(SatTile {
        pixels: Tensor::new(&[ch, ht, wt], pixels)?,
        pose,
        valid,
        transform_id: String::new(),
    })
}

/// Bilinear resize of a `[C×H×W]` image with half-pixel centres and edge
/// clamping.
pub fn resize_bilinear(image: &Tensor<f32>, out: (usize, usize)) -> Result<Tensor<f32>> {
    image.expect_rank(3, "resize input")?;
    if out.0 == 0 || out.1 == 0 {
        return Err(dim_err!("resize target must be positive, got {out:?}"));
    }
    let (ch, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    if (h, w) == out {
        return Ok(image.clone());
    }
    let axis = |len_in: usize, len_out: usize| -> Vec<(usize, usize, f32)> {
        let ratio = len_in as f64 / len_out as f64;
        (0..len_out)
            .map(|i| {
                let src = ((i as f64 + 0.5) * ratio - 0.5).clamp(0.0, (len_in - 1) as f64);
                let i0 = src.floor() as usize;
                let i1 = (i0 + 1).min(len_in - 1);
                (i0, i1, (src - i0 as f64) as f32)
            })
            .collect()
    };
    let rows = axis(h, out.0);
    let cols = axis(w, out.1);
    let d = image.data();
    let mut data = Vec::with_capacity(ch * out.0 * out.1);
    for k in 0..ch {
        let base = k * h * w;
        for &(r0, r1, fr) in &rows {
            for &(c0, c1, fc) in &cols {
                let top = d[base + r0 * w + c0] * (1.0 - fc) + d[base + r0 * w + c1] * fc;
                let bot = d[base + r1 * w + c0] * (1.0 - fc) + d[base + r1 * w + c1] * fc;
                data.push((top * (1.0 - fr) + bot * fr).clamp(0.0, 1.0));
            }
        }
    }
    Tensor::new(&[ch, out.0, out.1], data)
}

/// Resizes a tile's pixels to the satellite-branch input shape.
pub fn resize_tile(tile: &SatTile, out: (usize, usize)) -> Result<Tensor<f32>> {
    resize_bilinear(&tile.pixels, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axis_aligned_pose_is_exact_crop() {
        let raster = Tensor::from_fn(&[3, 50, 90], |i| ((i * 37) % 101) as f32 / 100.0);
        let t = GeoTransform::identity();
        let tile = extract_tile(&raster, &t, Pose::new(40.0, 25.0, 0.0), (30, 60)).unwrap();
        assert_eq!(tile.valid_count(), 30 * 60);
        for k in 0..3 {
            for r in 0..30 {
                for c in 0..60 {
                    assert_eq!(tile.pixels.at(&[k, r, c]), raster.at(&[k, r + 10, c + 10]));
                }
            }
        }
    }

    #[test]
    fn constant_raster_gives_constant_tile() {
        let raster = Tensor::full(&[3, 200, 200], 0.25f32);
        let t = GeoTransform::similarity(0.5, 0.3, [10.0, 20.0]).unwrap();
        let tile = extract_tile(&raster, &t, Pose::new(60.0, 40.0, 2.2), (20, 40)).unwrap();
        assert_eq!(tile.valid_count(), 800);
        for v in tile.pixels.data() {
            assert!((v - 0.25).abs() < 1e-6);
        }
    }

    #[test]
    fn off_raster_samples_are_zero_and_invalid() {
        let raster = Tensor::full(&[3, 20, 20], 1.0f32);
        let tile = extract_tile(&raster, &GeoTransform::identity(), Pose::new(0.0, 0.0, 0.0), (30, 60)).unwrap();
        assert!(tile.valid_count() > 0 && tile.valid_count() < 1800);
        for (i, &ok) in tile.valid.iter().enumerate() {
            if !ok {
                assert_eq!(tile.pixels.data()[i], 0.0);
            }
        }
        assert!(extract_tile(&raster, &GeoTransform::identity(), Pose::new(0.0, 0.0, 0.0), (0, 4)).is_err());
    }

    #[test]
    fn resize_checkerboard_weights() {
        let img = Tensor::new(&[1, 2, 2], vec![1.0f32, 0.0, 0.0, 1.0]).unwrap();
        let out = resize_bilinear(&img, (4, 4)).unwrap();
        // per-axis source weights for 2 → 4 with half-pixel centres:
        // [1,0], [0.75,0.25], [0.25,0.75], [0,1]
        let wts = [[1.0f32, 0.0], [0.75, 0.25], [0.25, 0.75], [0.0, 1.0]];
        for r in 0..4 {
            for c in 0..4 {
                let expect = wts[r][0] * wts[c][0] + wts[r][1] * wts[c][1];
                assert!((out.at(&[0, r, c]) - expect).abs() < 1e-7, "({r},{c})");
            }
        }
    }

    #[test]
    fn resize_same_size_and_constant() {
        let img = Tensor::from_fn(&[3, 5, 7], |i| (i % 11) as f32 / 10.0);
        assert_eq!(resize_bilinear(&img, (5, 7)).unwrap(), img);
        let c = Tensor::full(&[3, 9, 13], 0.4f32);
        for v in resize_bilinear(&c, (4, 5)).unwrap().data() {
            assert!((v - 0.4).abs() < 1e-6);
        }
    }
}
