//! Cuts oriented 30 m × 60 m satellite tiles out of a georeferenced district
//! raster at a few vehicle poses and writes them as a tile dataset.

use satfuse::geo::io::{read_tile_dataset, write_tile_dataset, DistrictSidecar};
use satfuse::geo::{extract_tile, resize_tile, Pose, SatTile};
use satfuse::tensor::Tensor;

fn main() -> satfuse::Result<()> {
    // a 400 m × 400 m district at 0.5 m/pixel: grey asphalt grid on green
    let (h, w) = (800, 800);
    let raster = Tensor::from_fn(&[3, h, w], |i| {
        let (k, p) = (i / (h * w), i % (h * w));
        let (y, x) = (p / w, p % w);
        let road = y % 160 < 24 || x % 200 < 24;
        let marking = (y % 160 == 12 && x % 12 < 6) || (x % 200 == 12 && y % 12 < 6);
        match (marking, road, k) {
            (true, _, _) => 0.95,
            (false, true, _) => 0.35,
            (false, false, 1) => 0.45,
            _ => 0.2,
        }
    });
    let sidecar = DistrictSidecar {
        meters_per_pixel: 0.5,
        origin: [-200.0, -200.0],
        rotation: 0.0,
    };
    let transform = sidecar.transform()?;

    let poses = [
        Pose::new(-190.0, -194.0, 0.0),
        Pose::new(-94.0, -100.0, std::f64::consts::FRAC_PI_2),
        Pose::new(10.0, 50.0, 0.6),
        Pose::new(195.0, 195.0, 0.0),
    ];
    let mut tiles: Vec<(String, SatTile)> = Vec::new();
    for (i, pose) in poses.iter().enumerate() {
        let mut tile = extract_tile(&raster, &transform, *pose, (60, 120))?;
        tile.transform_id = "grid-district".into();
        let small = resize_tile(&tile, (20, 40))?;
        println!(
            "pose {i}: yaw {:+.2}  valid {:>5}/{}  mean red {:.3}  resized {:?}",
            pose.yaw,
            tile.valid_count(),
            tile.valid.len(),
            tile.pixels.data()[..60 * 120].iter().sum::<f32>() / (60.0 * 120.0),
            small.shape()
        );
        tiles.push((format!("tile{i:02}"), tile));
    }

    let dir = tempfile::tempdir()?;
    write_tile_dataset(dir.path(), "grid-district", &transform, &tiles)?;
    let (manifest, back) = read_tile_dataset(dir.path())?;
    println!("wrote and re-read {} tiles ({:?})", back.len(), manifest.samples);
    Ok(())
}
