//! Coarse world↔raster alignment from landmarks, oriented tile extraction at
//! vehicle poses, and the on-disk tile dataset.

pub mod io;
mod tile;
mod transform;

pub use tile::{
    extract_tile, in_raster, resize_bilinear, resize_tile, tile_pixel_world, world_to_raster_index, SatTile,
    FUSION_INPUT_RES, TILE_EXTENT_M,
};
pub use transform::{
    normalize_angle, solve_landmark_transform, solve_landmark_transform_with, GeoTransform, LandmarkFit, Point2, Pose,
    TransformModel,
};
