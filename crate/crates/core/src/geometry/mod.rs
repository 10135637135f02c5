//! Boxes, point clouds and the exact geometric routines around them.

mod box3d;
mod chamfer;
mod cloud;
mod iou;

pub use box3d::{box_corners, center_distance, normalize_heading, Box3D};
pub use chamfer::chamfer_distance;
pub(crate) use chamfer::nearest;
pub use cloud::{align_template_to_box, enlarge_and_crop, farthest_point_sample, knn, points_in_box, PointCloud};
pub use iou::{bev_iou, clip_convex, polygon_area, rotated_iou_3d};
