//! The detector network: a truncated-MobileNetV2-style backbone (stride 8)
//! with a 1×1 classification head over 8×8-pixel grid cells, plus the LVTX1
//! serialized container format.
//!
//! The topology is fixed: a 3×3 stride-2 stem, then three inverted-residual
//! blocks (expansion 6, strides 2/2/1, the last with a skip connection), then
//! the head. Widths scale with the width multiplier. Batch norm does not
//! appear as a layer; weights are stored in folded conv+bias form.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{
    build_relu6_lut, centered_lut16, conv2d, conv2d_int8_prepared, depthwise_conv2d,
    depthwise_conv2d_int8_prepared, pack_conv_weights, relu6, relu6_int8_lut, residual_add,
    residual_add_int8, softmax_per_cell, PackedConvWeights, Padding, QuantParams, QuantTensor, Tensor,
};

/// Fixed cell edge in pixels: every 8×8 patch of the input is one
/// classification task.
pub const CELL_SIZE: usize = 8;

/// Base channel widths before the multiplier: stem and the three block
/// outputs. The third block keeps its input width so the skip add is legal.
const BASE_WIDTHS: [usize; 3] = [32, 48, 64];
const EXPANSION: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_size: usize,
    pub num_classes: usize,
    pub width_multiplier: f32,
    pub cell_size: usize,
}

impl ModelConfig {
    pub fn new(input_size: usize, num_classes: usize) -> Result<Self> {
        let cfg = ModelConfig {
            input_size,
            num_classes,
            width_multiplier: 0.35,
            cell_size: CELL_SIZE,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if ![32, 64, 96].contains(&self.input_size) {
            return Err(Error::Config(format!(
                "input_size must be one of 32, 64, 96; got {}",
                self.input_size
            )));
        }
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be at least 1".into()));
        }
        if self.cell_size != CELL_SIZE {
            return Err(Error::Config(format!(
                "cell_size is fixed at {CELL_SIZE}, got {}",
                self.cell_size
            )));
        }
        if !(self.width_multiplier > 0.0) {
            return Err(Error::Config("width_multiplier must be positive".into()));
        }
        Ok(())
    }

    /// Cells per side: 32→4, 64→8, 96→12.
    pub fn grid_size(&self) -> usize {
        self.input_size / self.cell_size
    }

    /// Head output channels: background (channel 0) plus the classes.
    pub fn head_channels(&self) -> usize {
        self.num_classes + 1
    }
}

/// Width after the multiplier: nearest multiple of 4, at least 4.
fn scaled_width(base: usize, alpha: f32) -> usize {
    let c = ((base as f32 * alpha / 4.0).round() as usize).max(1) * 4;
    c.max(4)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvShape {
    pub kh: usize,
    pub kw: usize,
    pub cin: usize,
    pub cout: usize,
    pub stride: usize,
    pub padding: Padding,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerKind {
    /// Full convolution (the stem).
    Conv(ConvShape),
    /// Per-channel 3×3 convolution.
    Depthwise(ConvShape),
    /// 1×1 expansion/projection convolution.
    Pointwise(ConvShape),
    /// Final 1×1 convolution emitting per-cell class logits.
    Head(ConvShape),
    Relu6,
    /// Adds the output of layer `skip_from` to the running activation.
    ResidualAdd { skip_from: usize },
}

impl LayerKind {
    pub fn conv_shape(&self) -> Option<&ConvShape> {
        match self {
            LayerKind::Conv(s)
            | LayerKind::Depthwise(s)
            | LayerKind::Pointwise(s)
            | LayerKind::Head(s) => Some(s),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Conv(_) => "conv",
            LayerKind::Depthwise(_) => "depthwise",
            LayerKind::Pointwise(_) => "pointwise",
            LayerKind::Head(_) => "head",
            LayerKind::Relu6 => "relu6",
            LayerKind::ResidualAdd { .. } => "residual_add",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerWeights {
    F32 { kernel: Tensor, bias: Vec<f32> },
    Int8 { kernel: QuantTensor, bias: Vec<i32> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub kind: LayerKind,
    pub weights: Option<LayerWeights>,
    /// Quantization parameters of this layer's output tensor (int8 models).
    pub out_quant: Option<QuantParams>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelFormat {
    F32,
    Int8,
}

impl ModelFormat {
    pub fn tag(&self) -> &'static str {
        match self {
            ModelFormat::F32 => "f32",
            ModelFormat::Int8 => "int8",
        }
    }
}

/// Per-cell class probability map, the model's native output.
#[derive(Debug, Clone, PartialEq)]
pub struct GridHeatmap {
    pub grid_h: usize,
    pub grid_w: usize,
    /// Shape `(1, grid_h, grid_w, num_classes + 1)`; channel 0 is background.
    pub probs: Tensor,
}

#[derive(Debug, Clone)]
pub struct FomoModel {
    pub config: ModelConfig,
    pub class_names: Vec<String>,
    pub format: ModelFormat,
    /// Quantization parameters of the input tensor (int8 models).
    pub input_quant: Option<QuantParams>,
    pub layers: Vec<Layer>,
    /// Lazily prepared int8 execution state (packed weights, lookup tables).
    /// Layers must not be mutated once inference has run.
    pub(crate) plan: std::sync::OnceLock<Int8Plan>,
}

impl PartialEq for FomoModel {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.class_names == other.class_names
            && self.format == other.format
            && self.input_quant == other.input_quant
            && self.layers == other.layers
    }
}

/// Prepared per-layer execution state for int8 inference. A relu6 whose only
/// consumer is the next conv/depthwise layer is fused into that consumer's
/// input mapping; results are bit-identical to running it standalone.
#[derive(Debug, Clone, PartialEq)]
enum PlannedLayer {
    Conv {
        packed: PackedConvWeights,
        weight_scale: f32,
        stride: usize,
        padding: Padding,
        semantic_in: QuantParams,
        input_lut16: Option<Vec<i16>>,
    },
    Depthwise {
        w16: Vec<i16>,
        kh: usize,
        kw: usize,
        weight_scale: f32,
        stride: usize,
        padding: Padding,
        semantic_in: QuantParams,
    },
    Relu6 {
        lut: Box<[i8; 256]>,
        fused: bool,
    },
    Residual {
        skip_from: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Int8Plan {
    layers: Vec<PlannedLayer>,
}

/// Build the layer sequence of one inverted-residual block.
fn push_block(layers: &mut Vec<LayerKind>, cin: usize, cout: usize, stride: usize) {
    let expanded = cin * EXPANSION;
    layers.push(LayerKind::Pointwise(ConvShape {
        kh: 1,
        kw: 1,
        cin,
        cout: expanded,
        stride: 1,
        padding: Padding::Same,
    }));
    layers.push(LayerKind::Relu6);
    layers.push(LayerKind::Depthwise(ConvShape {
        kh: 3,
        kw: 3,
        cin: expanded,
        cout: expanded,
        stride,
        padding: Padding::Same,
    }));
    layers.push(LayerKind::Relu6);
    layers.push(LayerKind::Pointwise(ConvShape {
        kh: 1,
        kw: 1,
        cin: expanded,
        cout,
        stride: 1,
        padding: Padding::Same,
    }));
}

fn topology(config: &ModelConfig) -> Vec<LayerKind> {
    let alpha = config.width_multiplier;
    let c0 = scaled_width(BASE_WIDTHS[0], alpha);
    let c1 = scaled_width(BASE_WIDTHS[1], alpha);
    let c2 = scaled_width(BASE_WIDTHS[2], alpha);

    let mut kinds = Vec::new();
    kinds.push(LayerKind::Conv(ConvShape {
        kh: 3,
        kw: 3,
        cin: 3,
        cout: c0,
        stride: 2,
        padding: Padding::Same,
    }));
    kinds.push(LayerKind::Relu6);
    push_block(&mut kinds, c0, c1, 2);
    push_block(&mut kinds, c1, c2, 2);
    let skip_from = kinds.len() - 1; // block 2's projection output
    push_block(&mut kinds, c2, c2, 1);
    kinds.push(LayerKind::ResidualAdd { skip_from });
    kinds.push(LayerKind::Head(ConvShape {
        kh: 1,
        kw: 1,
        cin: c2,
        cout: config.head_channels(),
        stride: 1,
        padding: Padding::Same,
    }));
    kinds
}

/// Deterministic Kaiming-uniform kernel initialization from the seed. Biases
/// start at zero except the head, which is biased toward background so a
/// fresh model emits no detections.
pub fn build_fomo(config: &ModelConfig, seed: u64) -> Result<FomoModel> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::new();
    for kind in topology(config) {
        let weights = match &kind {
            LayerKind::Conv(s) | LayerKind::Pointwise(s) | LayerKind::Head(s) => {
                let fan_in = (s.kh * s.kw * s.cin) as f32;
                let bound = (6.0 / fan_in).sqrt();
                let kernel = random_kernel(&mut rng, [s.kh, s.kw, s.cin, s.cout], bound);
                let bias = if matches!(kind, LayerKind::Head(_)) {
                    let mut b = vec![-2.0; s.cout];
                    b[0] = 2.0;
                    b
                } else {
                    vec![0.0; s.cout]
                };
                Some(LayerWeights::F32 { kernel, bias })
            }
            LayerKind::Depthwise(s) => {
                let fan_in = (s.kh * s.kw) as f32;
                let bound = (6.0 / fan_in).sqrt();
                let kernel = random_kernel(&mut rng, [s.kh, s.kw, s.cin, 1], bound);
                Some(LayerWeights::F32 {
                    kernel,
                    bias: vec![0.0; s.cin],
                })
            }
            LayerKind::Relu6 | LayerKind::ResidualAdd { .. } => None,
        };
        layers.push(Layer {
            kind,
            weights,
            out_quant: None,
        });
    }
    let model = FomoModel {
        config: *config,
        class_names: (1..=config.num_classes).map(|i| format!("class{i}")).collect(),
        format: ModelFormat::F32,
        input_quant: None,
        layers,
        plan: std::sync::OnceLock::new(),
    };
    model.validate()?;
    Ok(model)
}

fn random_kernel(rng: &mut ChaCha8Rng, shape: [usize; 4], bound: f32) -> Tensor {
    let data = (0..shape.iter().product::<usize>())
        .map(|_| rng.gen_range(-bound..bound))
        .collect();
    Tensor::from_vec(shape, data).expect("kernel shape/data length agree")
}

impl FomoModel {
    /// Chain compatibility, total downsampling of 8, and head width.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let mut channels = 3usize;
        let mut size = self.config.input_size;
        let mut out_dims: Vec<(usize, usize)> = Vec::new(); // (size, channels) per layer
        for (i, layer) in self.layers.iter().enumerate() {
            match &layer.kind {
                LayerKind::Conv(s) | LayerKind::Pointwise(s) | LayerKind::Head(s) => {
                    if s.cin != channels {
                        return Err(Error::Config(format!(
                            "layer {i} ({}) expects {} input channels, chain carries {channels}",
                            layer.kind.name(),
                            s.cin
                        )));
                    }
                    channels = s.cout;
                    size = size.div_ceil(s.stride);
                }
                LayerKind::Depthwise(s) => {
                    if s.cin != channels {
                        return Err(Error::Config(format!(
                            "layer {i} (depthwise) expects {} channels, chain carries {channels}",
                            s.cin
                        )));
                    }
                    size = size.div_ceil(s.stride);
                }
                LayerKind::Relu6 => {}
                LayerKind::ResidualAdd { skip_from } => {
                    let Some(&(ss, sc)) = out_dims.get(*skip_from) else {
                        return Err(Error::Config(format!(
                            "layer {i} skip_from {skip_from} out of range"
                        )));
                    };
                    if ss != size || sc != channels {
                        return Err(Error::Config(format!(
                            "layer {i} residual shapes differ: skip {ss}x{ss}x{sc} vs {size}x{size}x{channels}"
                        )));
                    }
                }
            }
            out_dims.push((size, channels));
        }
        if size != self.config.grid_size() {
            return Err(Error::Config(format!(
                "composed strides give {size} cells per side, expected {}",
                self.config.grid_size()
            )));
        }
        if channels != self.config.head_channels() {
            return Err(Error::Config(format!(
                "head emits {channels} channels, expected {}",
                self.config.head_channels()
            )));
        }
        Ok(())
    }

    /// Total real-valued parameters (kernel elements plus biases).
    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .filter_map(|l| l.weights.as_ref())
            .map(|w| match w {
                LayerWeights::F32 { kernel, bias } => kernel.len() + bias.len(),
                LayerWeights::Int8 { kernel, bias } => kernel.len() + bias.len(),
            })
            .sum()
    }

    fn check_input(&self, image: &Tensor) -> Result<()> {
        let s = self.config.input_size;
        if image.shape() != [1, s, s, 3] {
            return Err(Error::shape(
                "forward",
                format!("(1, {s}, {s}, 3)"),
                format!("{:?}", image.shape()),
            ));
        }
        Ok(())
    }

    /// Output tensors of every layer for a f32 model; index `i` holds the
    /// output of layer `i`. Training and calibration both consume this.
    pub fn forward_f32_activations(&self, image: &Tensor) -> Result<Vec<Tensor>> {
        if self.format != ModelFormat::F32 {
            return Err(Error::Config("f32 forward invoked on an int8 model".into()));
        }
        self.check_input(image)?;
        let mut acts: Vec<Tensor> = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let input = if i == 0 { image } else { &acts[i - 1] };
            let out = match (&layer.kind, &layer.weights) {
                (LayerKind::Conv(s), Some(LayerWeights::F32 { kernel, bias }))
                | (LayerKind::Pointwise(s), Some(LayerWeights::F32 { kernel, bias }))
                | (LayerKind::Head(s), Some(LayerWeights::F32 { kernel, bias })) => {
                    conv2d(input, kernel, bias, s.stride, s.padding)?
                }
                (LayerKind::Depthwise(s), Some(LayerWeights::F32 { kernel, bias })) => {
                    depthwise_conv2d(input, kernel, bias, s.stride, s.padding)?
                }
                (LayerKind::Relu6, None) => relu6(input),
                (LayerKind::ResidualAdd { skip_from }, None) => residual_add(input, &acts[*skip_from])?,
                _ => {
                    return Err(Error::Internal(format!(
                        "layer {i} ({}) has inconsistent weights for a f32 model",
                        layer.kind.name()
                    )))
                }
            };
            acts.push(out);
        }
        Ok(acts)
    }

    /// Prepare the int8 execution state: packed/centered weights, activation
    /// lookup tables, and activation fusion where a relu6 feeds only the next
    /// convolution.
    fn build_plan(&self) -> Result<Int8Plan> {
        let skip_sources: Vec<usize> = self
            .layers
            .iter()
            .filter_map(|l| match l.kind {
                LayerKind::ResidualAdd { skip_from } => Some(skip_from),
                _ => None,
            })
            .collect();
        let mut planned: Vec<PlannedLayer> = Vec::with_capacity(self.layers.len());
        let mut prev_params = self
            .input_quant
            .ok_or_else(|| Error::Config("int8 model lacks input quantization parameters".into()))?;
        for (i, layer) in self.layers.iter().enumerate() {
            let out_q = layer
                .out_quant
                .ok_or_else(|| Error::Config(format!("layer {i} lacks output quantization parameters")))?;
            // when the previous layer is a fused relu6, the logical input is
            // its output, realized through a lookup table on the raw codes
            let fused_prev: Option<Vec<i16>> = match planned.last() {
                Some(PlannedLayer::Relu6 { lut, fused: true }) => {
                    Some(centered_lut16(lut, prev_params.zero_point))
                }
                _ => None,
            };
            let planned_layer = match (&layer.kind, &layer.weights) {
                (LayerKind::Conv(s), Some(LayerWeights::Int8 { kernel, .. }))
                | (LayerKind::Pointwise(s), Some(LayerWeights::Int8 { kernel, .. }))
                | (LayerKind::Head(s), Some(LayerWeights::Int8 { kernel, .. })) => PlannedLayer::Conv {
                    packed: pack_conv_weights(kernel),
                    weight_scale: kernel.params.scale,
                    stride: s.stride,
                    padding: s.padding,
                    semantic_in: prev_params,
                    input_lut16: fused_prev,
                },
                (LayerKind::Depthwise(s), Some(LayerWeights::Int8 { kernel, .. })) => {
                    debug_assert!(fused_prev.is_none());
                    let wz = kernel.params.zero_point;
                    PlannedLayer::Depthwise {
                        w16: kernel.data().iter().map(|&q| (q as i32 - wz) as i16).collect(),
                        kh: s.kh,
                        kw: s.kw,
                        weight_scale: kernel.params.scale,
                        stride: s.stride,
                        padding: s.padding,
                        semantic_in: prev_params,
                    }
                }
                (LayerKind::Relu6, None) => {
                    // depthwise reads each element per tap, so mapping there
                    // would repeat the table lookup; fuse into full convs only
                    let consumed_by_conv_only = !skip_sources.contains(&i)
                        && matches!(
                            self.layers.get(i + 1).map(|l| &l.kind),
                            Some(LayerKind::Conv(_) | LayerKind::Pointwise(_) | LayerKind::Head(_))
                        );
                    PlannedLayer::Relu6 {
                        lut: Box::new(build_relu6_lut(prev_params, out_q)),
                        fused: consumed_by_conv_only,
                    }
                }
                (LayerKind::ResidualAdd { skip_from }, None) => {
                    PlannedLayer::Residual { skip_from: *skip_from }
                }
                _ => {
                    return Err(Error::Internal(format!(
                        "layer {i} ({}) has inconsistent weights for an int8 model",
                        layer.kind.name()
                    )))
                }
            };
            planned.push(planned_layer);
            prev_params = out_q;
        }
        Ok(Int8Plan { layers: planned })
    }

    /// Dequantized head logits of an int8 model.
    fn forward_int8_logits(&self, image: &Tensor) -> Result<Tensor> {
        self.check_input(image)?;
        let in_q = self
            .input_quant
            .ok_or_else(|| Error::Config("int8 model lacks input quantization parameters".into()))?;
        if self.plan.get().is_none() {
            let plan = self.build_plan()?;
            let _ = self.plan.set(plan);
        }
        let plan = self.plan.get().expect("plan initialized above");

        let qdata: Vec<i8> = image.data().iter().map(|&v| in_q.quantize(v)).collect();
        let input = QuantTensor::from_vec(image.shape(), qdata, in_q)?;
        let mut acts: Vec<QuantTensor> = Vec::with_capacity(self.layers.len());
        for (i, (layer, planned)) in self.layers.iter().zip(&plan.layers).enumerate() {
            let out_q = layer
                .out_quant
                .ok_or_else(|| Error::Config(format!("layer {i} lacks output quantization parameters")))?;
            // raw codes feeding this layer; a fused relu6 is skipped over and
            // realized through the consumer's lookup table
            let raw_input = |steps: usize| -> &QuantTensor {
                if i >= steps {
                    &acts[i - steps]
                } else {
                    &input
                }
            };
            let out = match (planned, &layer.weights) {
                (
                    PlannedLayer::Conv {
                        packed,
                        weight_scale,
                        stride,
                        padding,
                        semantic_in,
                        input_lut16,
                    },
                    Some(LayerWeights::Int8 { bias, .. }),
                ) => conv2d_int8_prepared(
                    raw_input(if input_lut16.is_some() { 2 } else { 1 }),
                    *semantic_in,
                    input_lut16.as_deref(),
                    packed,
                    bias,
                    out_q,
                    *weight_scale,
                    *stride,
                    *padding,
                )?,
                (
                    PlannedLayer::Depthwise {
                        w16,
                        kh,
                        kw,
                        weight_scale,
                        stride,
                        padding,
                        semantic_in,
                    },
                    Some(LayerWeights::Int8 { bias, .. }),
                ) => depthwise_conv2d_int8_prepared(
                    raw_input(1),
                    *semantic_in,
                    w16,
                    *kh,
                    *kw,
                    bias,
                    out_q,
                    *weight_scale,
                    *stride,
                    *padding,
                )?,
                (PlannedLayer::Relu6 { lut, fused }, None) => {
                    if *fused {
                        // placeholder; the consumer reads the raw codes itself
                        QuantTensor::from_vec([0, 0, 0, 0], Vec::new(), out_q)?
                    } else {
                        relu6_int8_lut(raw_input(1), lut, out_q)
                    }
                }
                (PlannedLayer::Residual { skip_from }, None) => {
                    residual_add_int8(raw_input(1), &acts[*skip_from], out_q)?
                }
                _ => {
                    return Err(Error::Internal(format!(
                        "layer {i} plan does not match its weights"
                    )))
                }
            };
            acts.push(out);
        }
        Ok(acts.last().expect("model has layers").dequantize())
    }
}

/// Run the model on a `(1, s, s, 3)` image with pixels in `[0, 1]` and return
/// the per-cell probability map.
pub fn forward(model: &FomoModel, image: &Tensor) -> Result<GridHeatmap> {
    let logits = match model.format {
        ModelFormat::F32 => model
            .forward_f32_activations(image)?
            .pop()
            .expect("model has layers"),
        ModelFormat::Int8 => model.forward_int8_logits(image)?,
    };
    let probs = softmax_per_cell(&logits)?;
    Ok(GridHeatmap {
        grid_h: probs.h(),
        grid_w: probs.w(),
        probs,
    })
}

// --- LVTX1 container ---------------------------------------------------------
//
// Layout: 5-byte magic "LVTX1", little-endian u32 header length, UTF-8 JSON
// header, weight blobs at header-declared offsets, trailing CRC-32 of every
// preceding byte.

const MAGIC: &[u8; 5] = b"LVTX1";

pub(crate) fn crc32(data: &[u8]) -> u32 {
    let mut crc = 0xFFFF_FFFFu32;
    for &b in data {
        crc ^= b as u32;
        for _ in 0..8 {
            let mask = (crc & 1).wrapping_neg();
            crc = (crc >> 1) ^ (0xEDB8_8320 & mask);
        }
    }
    !crc
}

#[derive(Serialize, Deserialize)]
struct BlobRef {
    offset: u64,
    len: u64,
}

#[derive(Serialize, Deserialize)]
struct LayerDoc {
    kind: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    shape: Option<ConvShape>,
    #[serde(skip_serializing_if = "Option::is_none")]
    skip_from: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    weights: Option<BlobRef>,
    #[serde(skip_serializing_if = "Option::is_none")]
    bias: Option<BlobRef>,
    #[serde(skip_serializing_if = "Option::is_none")]
    weight_quant: Option<QuantParams>,
    #[serde(skip_serializing_if = "Option::is_none")]
    out_quant: Option<QuantParams>,
}

#[derive(Serialize, Deserialize)]
struct HeaderDoc {
    dtype: String,
    config: ModelConfig,
    class_names: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    input_quant: Option<QuantParams>,
    layers: Vec<LayerDoc>,
}

fn push_blob(blobs: &mut Vec<u8>, bytes: &[u8]) -> BlobRef {
    let offset = blobs.len() as u64;
    blobs.extend_from_slice(bytes);
    BlobRef {
        offset,
        len: bytes.len() as u64,
    }
}

/// Serialize a model into the LVTX1 byte layout.
pub fn encode_model(model: &FomoModel) -> Vec<u8> {
    let mut blobs = Vec::new();
    let mut layer_docs = Vec::with_capacity(model.layers.len());
    for layer in &model.layers {
        let (weights, bias, weight_quant) = match &layer.weights {
            Some(LayerWeights::F32 { kernel, bias }) => {
                let kb: Vec<u8> = kernel.data().iter().flat_map(|v| v.to_le_bytes()).collect();
                let bb: Vec<u8> = bias.iter().flat_map(|v| v.to_le_bytes()).collect();
                (Some(push_blob(&mut blobs, &kb)), Some(push_blob(&mut blobs, &bb)), None)
            }
            Some(LayerWeights::Int8 { kernel, bias }) => {
                let kb: Vec<u8> = kernel.data().iter().map(|&q| q as u8).collect();
                let bb: Vec<u8> = bias.iter().flat_map(|v| v.to_le_bytes()).collect();
                (
                    Some(push_blob(&mut blobs, &kb)),
                    Some(push_blob(&mut blobs, &bb)),
                    Some(kernel.params),
                )
            }
            None => (None, None, None),
        };
        layer_docs.push(LayerDoc {
            kind: layer.kind.name().to_string(),
            shape: layer.kind.conv_shape().copied(),
            skip_from: match layer.kind {
                LayerKind::ResidualAdd { skip_from } => Some(skip_from),
                _ => None,
            },
            weights,
            bias,
            weight_quant,
            out_quant: layer.out_quant,
        });
    }
    let header = HeaderDoc {
        dtype: model.format.tag().to_string(),
        config: model.config,
        class_names: model.class_names.clone(),
        input_quant: model.input_quant,
        layers: layer_docs,
    };
    let header_json = serde_json::to_vec(&header).expect("header serializes");

    let mut bytes = Vec::with_capacity(5 + 4 + header_json.len() + blobs.len() + 4);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&header_json);
    bytes.extend_from_slice(&blobs);
    let crc = crc32(&bytes);
    bytes.extend_from_slice(&crc.to_le_bytes());
    bytes
}

pub fn save_model(model: &FomoModel, path: impl AsRef<std::path::Path>) -> Result<()> {
    std::fs::write(path, encode_model(model))?;
    Ok(())
}

fn take_blob<'a>(blobs: &'a [u8], r: &BlobRef, what: &str) -> Result<&'a [u8]> {
    let start = r.offset as usize;
    let end = start + r.len as usize;
    blobs
        .get(start..end)
        .ok_or_else(|| Error::Truncated(format!("{what} blob [{start}, {end}) exceeds blob section")))
}

fn f32_blob(bytes: &[u8], what: &str) -> Result<Vec<f32>> {
    if bytes.len() % 4 != 0 {
        return Err(Error::Header(format!("{what} blob length not a multiple of 4")));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

fn i32_blob(bytes: &[u8], what: &str) -> Result<Vec<i32>> {
    if bytes.len() % 4 != 0 {
        return Err(Error::Header(format!("{what} blob length not a multiple of 4")));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| i32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

/// Decode a model from LVTX1 bytes, verifying magic and checksum before
/// touching the payload.
pub fn decode_model(bytes: &[u8]) -> Result<FomoModel> {
    if bytes.len() < MAGIC.len() {
        return Err(Error::BadMagic);
    }
    if &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::BadMagic);
    }
    if bytes.len() < MAGIC.len() + 4 + 4 {
        return Err(Error::Truncated("file shorter than fixed framing".into()));
    }
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4 bytes"));
    let computed = crc32(&bytes[..bytes.len() - 4]);
    if stored != computed {
        return Err(Error::ChecksumMismatch { stored, computed });
    }
    let hlen = u32::from_le_bytes(bytes[5..9].try_into().expect("4 bytes")) as usize;
    let header_end = 9 + hlen;
    if header_end > bytes.len() - 4 {
        return Err(Error::Truncated(format!(
            "declared header length {hlen} exceeds file size"
        )));
    }
    let header: HeaderDoc = serde_json::from_slice(&bytes[9..header_end])
        .map_err(|e| Error::Header(e.to_string()))?;
    let blobs = &bytes[header_end..bytes.len() - 4];

    let format = match header.dtype.as_str() {
        "f32" => ModelFormat::F32,
        "int8" => ModelFormat::Int8,
        other => return Err(Error::Header(format!("unknown dtype {other:?}"))),
    };

    let mut layers = Vec::with_capacity(header.layers.len());
    for (i, doc) in header.layers.iter().enumerate() {
        let kind = match (doc.kind.as_str(), doc.shape, doc.skip_from) {
            ("conv", Some(s), _) => LayerKind::Conv(s),
            ("depthwise", Some(s), _) => LayerKind::Depthwise(s),
            ("pointwise", Some(s), _) => LayerKind::Pointwise(s),
            ("head", Some(s), _) => LayerKind::Head(s),
            ("relu6", None, _) => LayerKind::Relu6,
            ("residual_add", None, Some(skip_from)) => LayerKind::ResidualAdd { skip_from },
            (k, _, _) => return Err(Error::Header(format!("layer {i}: malformed kind {k:?}"))),
        };
        let weights = match (&doc.weights, &doc.bias) {
            (Some(wref), Some(bref)) => {
                let s = kind
                    .conv_shape()
                    .ok_or_else(|| Error::Header(format!("layer {i}: weights on a weightless kind")))?;
                let kshape = match kind {
                    LayerKind::Depthwise(_) => [s.kh, s.kw, s.cin, 1],
                    _ => [s.kh, s.kw, s.cin, s.cout],
                };
                let wb = take_blob(blobs, wref, "weight")?;
                let bb = take_blob(blobs, bref, "bias")?;
                match format {
                    ModelFormat::F32 => Some(LayerWeights::F32 {
                        kernel: Tensor::from_vec(kshape, f32_blob(wb, "weight")?)?,
                        bias: f32_blob(bb, "bias")?,
                    }),
                    ModelFormat::Int8 => {
                        let params = doc
                            .weight_quant
                            .ok_or_else(|| Error::Header(format!("layer {i}: int8 weights lack quant params")))?;
                        let data: Vec<i8> = wb.iter().map(|&b| b as i8).collect();
                        Some(LayerWeights::Int8 {
                            kernel: QuantTensor::from_vec(kshape, data, params)?,
                            bias: i32_blob(bb, "bias")?,
                        })
                    }
                }
            }
            (None, None) => None,
            _ => return Err(Error::Header(format!("layer {i}: weights and bias must pair"))),
        };
        layers.push(Layer {
            kind,
            weights,
            out_quant: doc.out_quant,
        });
    }

    let model = FomoModel {
        config: header.config,
        class_names: header.class_names,
        format,
        input_quant: header.input_quant,
        layers,
        plan: std::sync::OnceLock::new(),
    };
    model.validate()?;
    Ok(model)
}

pub fn load_model(path: impl AsRef<std::path::Path>) -> Result<FomoModel> {
    let bytes = std::fs::read(path)?;
    decode_model(&bytes)
}
