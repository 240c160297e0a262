//! Pillar-based collaborative 3D detector.

pub mod anchors;
pub mod checkpoint;
pub mod decode;
pub mod grid;
pub mod loss;
pub mod model;
pub mod network;
pub mod pillar;
pub mod positional;
pub mod targets;

pub use anchors::{decode_box, encode_box, generate_anchors, AnchorConfig, BOX_CODE};
pub use decode::{confidence_map, decode_boxes, nms, DecodeConfig};
pub use grid::GridConfig;
pub use loss::{detection_loss, DetectionLoss, LossConfig};
pub use model::{BevFeatureMap, CollaborativeDetector, DetectorConfig, HeadOutput};
pub use network::{DetectionHead, Fusion, FusionKind, HeadVars, PillarEncoder, ReduceMixFusion, CLS_PRIOR_BIAS};
pub use positional::{append_positional, append_positional_encoding, positional_encoding, EncodedFeatureMap, PositionalMode};
pub use targets::{assign_targets, AnchorTargets, MatchingConfig};
