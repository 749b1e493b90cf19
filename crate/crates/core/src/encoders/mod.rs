//! Camera lift-splat, LiDAR voxelization, the point encoder and 2D pooling.

mod camera;
mod lift;
mod points;

pub use camera::{CameraModel, DepthBins, FeatureMap};
pub use lift::{image_tensor, lift_splat, normalize_density, splat, LiftTable, NO_VOXEL};
pub use points::{pool2d, voxelize_points, PointEncoder, POINT_STATS};
