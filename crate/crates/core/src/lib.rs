//! Box-supervised instance segmentation toolkit.
//!
//! The crate turns bounding-box annotations into pseudo-masks with GrabCut,
//! splits them into valid and invalid groups by box IoU, routes instances to
//! a small-object or large-object branch by area, and scores predictions with
//! region AP and average best overlap. An Enhanced-FPN feature graph is
//! provided at the shape and forward-pass level.
//!
//! Module map:
//!
//! * [`types`]: images, boxes, masks, trimaps and the geometric helpers on them.
//! * [`gmm`]: Gaussian mixture color models for the GrabCut data term.
//! * [`maxflow`]: exact s-t min cut on pixel graphs.
//! * [`grabcut`]: the iterative box-seeded segmentation loop.
//! * [`pipeline`]: validity partition, size classes, statistics, ellipse
//!   fallback and branch fusion.
//! * [`efpn`]: the Enhanced-FPN graph, shape inference and forward pass.
//! * [`eval`]: mask AP at IoU 0.5/0.75 and ABO.
//! * [`dataio`]: manifests, mask PNGs, sidecars and overlays.
//! * [`synth`]: seeded synthetic scenes used by tests and demos.

pub mod dataio;
pub mod efpn;
pub mod eval;
pub mod gmm;
pub mod grabcut;
pub mod maxflow;
pub mod pipeline;
pub mod synth;
pub mod types;

pub use grabcut::{GrabCutConfig, GrabCutResult};
pub use types::{BBox, Image, MaskInstance, Trimap, TrimapLabel};
