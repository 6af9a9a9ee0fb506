//! lvx-core — a desk-scale grid/centroid object detector toolkit.
//!
//! The pipeline stages are:
//!
//! 1. **dataio** – PPM image I/O, dataset manifests, and a synthetic terrain
//!    generator with a controllable object/background contrast knob.
//! 2. **tensor** – NHWC tensors and direct-loop conv kernels (f32 and int8).
//! 3. **model** – the truncated-MobileNetV2-style backbone plus 1×1 head that
//!    classifies every 8×8 pixel cell, and the LVTX1 container format.
//! 4. **train** – per-cell weighted cross-entropy, hand-rolled backprop for
//!    the fixed topology, and Adam.
//! 5. **quant** – post-training int8 quantization from calibration ranges.
//! 6. **decode** – heatmap thresholding and adjacent-cell centroid merging.
//! 7. **eval** – macro precision/recall/F1 and accuracy over matched
//!    detections.
//! 8. **profile** – activation-arena planning (peak RAM), MAC counting, and
//!    latency benchmarking with an MCU projection.
//! 9. **sim** – corridor exploration with the "look close" emphasis function.

pub mod dataio;
pub mod decode;
pub mod error;
pub mod eval;
pub mod model;
pub mod profile;
pub mod quant;
pub mod sim;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{QuantParams, QuantTensor, Tensor};
