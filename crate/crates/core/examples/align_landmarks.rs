//! Fits the world→raster similarity from five surveyed landmarks and checks
//! the residual against the known transform.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use satfuse::geo::{solve_landmark_transform, solve_landmark_transform_with, GeoTransform, Point2, TransformModel};

fn main() -> satfuse::Result<()> {
    let truth = GeoTransform::similarity(0.3, 0.25, [1200.0, 800.0])?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let world: Vec<Point2> = (0..5)
        .map(|_| [rng.gen_range(-200.0..200.0), rng.gen_range(-200.0..200.0)])
        .collect();
    // 1.5 m of per-axis survey noise, in pixels
    let noise = Normal::new(0.0, 1.5 / 0.3).unwrap();
    let pixel: Vec<Point2> = world
        .iter()
        .map(|&w| {
            let p = truth.apply(w);
            [p[0] + rng.sample(noise), p[1] + rng.sample(noise)]
        })
        .collect();

    let fit = solve_landmark_transform(&world, &pixel)?;
    let t = fit.transform;
    println!("similarity fit");
    println!("  meters/pixel {:.4} (true 0.3000)", t.meters_per_pixel());
    println!("  rotation     {:.4} rad (true 0.2500)", t.rotation());
    println!(
        "  translation  [{:.1}, {:.1}] px",
        t.translation()[0],
        t.translation()[1]
    );
    println!(
        "  rms residual {:.2} px = {:.2} m",
        fit.rms_residual_px, fit.rms_residual_m
    );

    let affine = solve_landmark_transform_with(&world, &pixel, TransformModel::Affine)?;
    println!("affine fit rms residual {:.2} m", affine.rms_residual_m);

    let probe = [37.0, -12.5];
    let back = t.invert(t.apply(probe));
    println!("round trip of {probe:?}: {back:?}");
    Ok(())
}
