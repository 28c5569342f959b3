//! Frozen toy detector: sensor encoders, fuser, centre-heatmap head, decoder
//! and the mAP proxy.

pub mod inputs;
pub mod metric;
pub mod model;
pub mod targets;

pub use inputs::{camera_input, lidar_input, lidar_statistics, SplatMap};
pub use metric::{average_precision, map_proxy};
pub use model::{detect_head, encode, encode_camera, encode_lidar, fuse, init_host, HeadOutput, HostFeatures};
pub use targets::{decode_detections, render_targets, Detection, DetectionTargets};
