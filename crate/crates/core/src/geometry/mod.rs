//! Polygon and mask geometry: IoU kernels, NMS, rotated rectangles, polygon fitting.

mod contour;
mod mask;
mod nms;
mod polygon;
mod rect;

pub use contour::{
    fit_polygon, largest_component, rasterize_polygon, simplify_closed, trace_boundary,
    DEFAULT_EPSILON, DEFAULT_MAX_VERTICES,
};
pub use mask::{mask_iou, BitMask};
pub use nms::{box_iou, box_nms, greedy_nms, score_order, BBox};
pub use polygon::{
    bounds, clip_convex, contains_point, intersection_area, is_simple, orient, polygon_iou,
    signed_area, Point, Polygon,
};
pub use rect::{convex_hull, min_area_rect, min_area_rect_mask, RotatedRect};
