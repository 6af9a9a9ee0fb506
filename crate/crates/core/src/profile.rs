//! Resource accounting: static activation-arena planning (peak RAM), MAC
//! counts, and wall-clock latency benchmarking with a microcontroller
//! projection.
//!
//! The arena planner is a ping-pong scheme over the topologically ordered
//! chain: activation buffers alternate between two regions, with a third
//! region reserved for the residual skip source while it is pending. Peak RAM
//! counts activation buffers only; weights are reported separately.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{forward, FomoModel, LayerKind, LayerWeights, ModelFormat};
use crate::tensor::Tensor;

/// Default MCU throughput assumption: a 240 MHz single-issue integer core
/// retiring one multiply-accumulate every ~50 cycles of overheadful loop.
pub const DEFAULT_THROUGHPUT_MACS_PER_S: f64 = 5.0e6;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerMemory {
    pub index: usize,
    pub kind: &'static str,
    pub input_bytes: usize,
    pub output_bytes: usize,
    /// Bytes simultaneously live while this layer executes, pending skip
    /// buffers included.
    pub live_bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArenaBuffer {
    /// Producing layer; `None` for the network input.
    pub produced_by: Option<usize>,
    pub region: usize,
    pub offset: usize,
    pub size_bytes: usize,
    /// First layer step at which this buffer is live (its producer).
    pub live_from: usize,
    /// Last layer step that reads it.
    pub live_until: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MemoryPlan {
    pub layers: Vec<LayerMemory>,
    pub peak_bytes: usize,
    pub weight_bytes: usize,
    pub arena: Vec<ArenaBuffer>,
    pub arena_total_bytes: usize,
}

fn element_bytes(format: ModelFormat) -> usize {
    match format {
        ModelFormat::F32 => 4,
        ModelFormat::Int8 => 1,
    }
}

/// Plan the activation arena of one inference. Deterministic and independent
/// of weight values.
pub fn plan_memory(model: &FomoModel) -> MemoryPlan {
    let ebytes = element_bytes(model.format);
    let n_layers = model.layers.len();

    // skip intervals: output of layer s is still needed at residual layer r
    let skip_until: Vec<Option<usize>> = {
        let mut v = vec![None; n_layers];
        for (r, layer) in model.layers.iter().enumerate() {
            if let LayerKind::ResidualAdd { skip_from } = layer.kind {
                v[skip_from] = Some(r);
            }
        }
        v
    };

    let mut buffers: Vec<ArenaBuffer> = vec![ArenaBuffer {
        produced_by: None,
        region: 0,
        offset: 0,
        size_bytes: model.config.input_size * model.config.input_size * 3 * ebytes,
        live_from: 0,
        live_until: 0,
    }];
    // buffer index holding the output of each layer
    let mut output_buffer = vec![0usize; n_layers];
    let mut cur = 0usize;
    let mut size = model.config.input_size;

    for (i, layer) in model.layers.iter().enumerate() {
        buffers[cur].live_until = i;
        match &layer.kind {
            LayerKind::Conv(s) | LayerKind::Pointwise(s) | LayerKind::Head(s) | LayerKind::Depthwise(s) => {
                let out_c = match layer.kind {
                    LayerKind::Depthwise(ref d) => d.cin,
                    _ => s.cout,
                };
                size = size.div_ceil(s.stride);
                // pick a region free of the current input and any pending skip
                let mut banned = vec![buffers[cur].region];
                for (src, until) in skip_until.iter().enumerate() {
                    if let Some(r) = until {
                        if src < i && i <= *r {
                            banned.push(buffers[output_buffer[src]].region);
                        }
                    }
                }
                let region = (0..3).find(|r| !banned.contains(r)).expect("three regions suffice");
                buffers.push(ArenaBuffer {
                    produced_by: Some(i),
                    region,
                    offset: 0,
                    size_bytes: size * size * out_c * ebytes,
                    live_from: i,
                    live_until: i,
                });
                cur = buffers.len() - 1;
            }
            LayerKind::Relu6 => {
                // in place: the current buffer lives on
            }
            LayerKind::ResidualAdd { skip_from } => {
                // in place into the current buffer; the skip source is read here
                let skip_buf = output_buffer[*skip_from];
                buffers[skip_buf].live_until = i;
            }
        }
        output_buffer[i] = cur;
    }

    // region extents and offsets
    let mut region_size = [0usize; 3];
    for b in &buffers {
        region_size[b.region] = region_size[b.region].max(b.size_bytes);
    }
    let region_offset = [0, region_size[0], region_size[0] + region_size[1]];
    for b in &mut buffers {
        b.offset = region_offset[b.region];
    }
    let arena_total_bytes = region_size.iter().sum();

    // per-layer records and the peak
    let mut layers = Vec::with_capacity(n_layers);
    let mut peak = 0usize;
    for (i, layer) in model.layers.iter().enumerate() {
        let live_bytes: usize = buffers
            .iter()
            .filter(|b| b.live_from <= i && i <= b.live_until)
            .map(|b| b.size_bytes)
            .sum();
        peak = peak.max(live_bytes);
        let input_buf = if i == 0 { 0 } else { output_buffer[i - 1] };
        layers.push(LayerMemory {
            index: i,
            kind: layer.kind.name(),
            input_bytes: buffers[input_buf].size_bytes,
            output_bytes: buffers[output_buffer[i]].size_bytes,
            live_bytes,
        });
    }

    let weight_bytes = model
        .layers
        .iter()
        .filter_map(|l| l.weights.as_ref())
        .map(|w| match w {
            LayerWeights::F32 { kernel, bias } => kernel.len() * 4 + bias.len() * 4,
            LayerWeights::Int8 { kernel, bias } => kernel.len() + bias.len() * 4,
        })
        .sum();

    MemoryPlan {
        layers,
        peak_bytes: peak,
        weight_bytes,
        arena: buffers,
        arena_total_bytes,
    }
}

/// Multiply-accumulate count of one forward pass: `kh*kw*cin*cout*hout*wout`
/// per convolution, `kh*kw*c*hout*wout` per depthwise convolution.
pub fn count_macs(model: &FomoModel) -> u64 {
    let mut size = model.config.input_size as u64;
    let mut macs = 0u64;
    for layer in &model.layers {
        match &layer.kind {
            LayerKind::Conv(s) | LayerKind::Pointwise(s) | LayerKind::Head(s) => {
                size = size.div_ceil(s.stride as u64);
                macs += (s.kh * s.kw * s.cin * s.cout) as u64 * size * size;
            }
            LayerKind::Depthwise(s) => {
                size = size.div_ceil(s.stride as u64);
                macs += (s.kh * s.kw * s.cin) as u64 * size * size;
            }
            LayerKind::Relu6 | LayerKind::ResidualAdd { .. } => {}
        }
    }
    macs
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatencyReport {
    pub repeats: usize,
    pub samples_ms: Vec<f64>,
    pub mean_ms: f64,
    pub median_ms: f64,
    pub p95_ms: f64,
    pub mac_count: u64,
    pub throughput_macs_per_s: f64,
    pub mcu_projection_ms: f64,
}

/// Wall-clock latency over `repeats` forward passes (three warm-up runs
/// excluded) plus the MAC-based MCU projection
/// `mac_count / throughput * 1000`.
pub fn bench_latency(
    model: &FomoModel,
    image: &Tensor,
    repeats: usize,
    throughput_macs_per_s: f64,
) -> Result<LatencyReport> {
    if repeats < 10 {
        return Err(Error::Config(format!("repeats must be at least 10, got {repeats}")));
    }
    if !(throughput_macs_per_s > 0.0) {
        return Err(Error::Config("throughput must be positive".into()));
    }
    for _ in 0..3 {
        let _ = forward(model, image)?;
    }
    let mut samples_ms = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let t0 = Instant::now();
        let out = forward(model, image)?;
        let dt = t0.elapsed();
        std::hint::black_box(&out);
        samples_ms.push(dt.as_secs_f64() * 1e3);
    }
    let mut sorted = samples_ms.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite timings"));
    let median_ms = sorted[sorted.len() / 2];
    let p95_ms = sorted[((sorted.len() as f64 * 0.95).ceil() as usize - 1).min(sorted.len() - 1)];
    let mean_ms = sorted.iter().sum::<f64>() / sorted.len() as f64;
    let mac_count = count_macs(model);
    Ok(LatencyReport {
        repeats,
        samples_ms,
        mean_ms,
        median_ms,
        p95_ms,
        mac_count,
        throughput_macs_per_s,
        mcu_projection_ms: mac_count as f64 / throughput_macs_per_s * 1e3,
    })
}

/// Deterministic noise image for benchmarking and smoke runs.
pub fn probe_image(size: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..size * size * 3).map(|_| rng.gen_range(0.0f32..1.0)).collect();
    Tensor::from_vec([1, size, size, 3], data).expect("shape/data agree")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_fomo, ConvShape, Layer, ModelConfig};
    use crate::quant::{calibrate, quantize_model};
    use crate::tensor::Padding;

    /// Single-conv model, handcrafted: 32x32x3 -> 16x16x8.
    fn one_conv_model(format: ModelFormat) -> FomoModel {
        FomoModel {
            config: ModelConfig::new(32, 1).unwrap(),
            class_names: vec!["roi".into()],
            format,
            input_quant: None,
            layers: vec![Layer {
                kind: LayerKind::Conv(ConvShape {
                    kh: 3,
                    kw: 3,
                    cin: 3,
                    cout: 8,
                    stride: 2,
                    padding: Padding::Same,
                }),
                weights: None,
                out_quant: None,
            }],
            plan: std::sync::OnceLock::new(),
        }
    }

    #[test]
    fn single_int8_conv_live_bytes() {
        let plan = plan_memory(&one_conv_model(ModelFormat::Int8));
        assert_eq!(plan.layers[0].input_bytes, 32 * 32 * 3);
        assert_eq!(plan.layers[0].output_bytes, 16 * 16 * 8);
        assert_eq!(plan.layers[0].live_bytes, 3072 + 2048);
        assert_eq!(plan.peak_bytes, 5120);
    }

    #[test]
    fn f32_live_bytes_are_four_times_int8() {
        let int8 = plan_memory(&one_conv_model(ModelFormat::Int8));
        let f32p = plan_memory(&one_conv_model(ModelFormat::F32));
        assert_eq!(f32p.peak_bytes, 4 * int8.peak_bytes);
    }

    fn quantized(model: &FomoModel) -> FomoModel {
        let img = probe_image(model.config.input_size, 7);
        let stats = calibrate(model, &[img]).unwrap();
        quantize_model(model, &stats).unwrap()
    }

    #[test]
    fn peak_ram_grows_with_input_size_and_shrinks_with_int8() {
        let mut peaks = Vec::new();
        for size in [32, 64, 96] {
            let cfg = ModelConfig::new(size, 1).unwrap();
            let f32_model = build_fomo(&cfg, 1).unwrap();
            let int8_model = quantized(&f32_model);
            let pf = plan_memory(&f32_model).peak_bytes;
            let pq = plan_memory(&int8_model).peak_bytes;
            assert!(pq < pf, "int8 peak {pq} not below f32 peak {pf} at {size}");
            peaks.push(pq);
        }
        assert!(peaks[0] < peaks[1] && peaks[1] < peaks[2], "{peaks:?}");
    }

    #[test]
    fn plan_ignores_weight_values() {
        let cfg = ModelConfig::new(64, 1).unwrap();
        let a = plan_memory(&build_fomo(&cfg, 1).unwrap());
        let b = plan_memory(&build_fomo(&cfg, 999).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn residual_keeps_skip_buffer_live() {
        let cfg = ModelConfig::new(32, 1).unwrap();
        let model = build_fomo(&cfg, 1).unwrap();
        let plan = plan_memory(&model);
        let (skip_from, residual_at) = model
            .layers
            .iter()
            .enumerate()
            .find_map(|(i, l)| match l.kind {
                LayerKind::ResidualAdd { skip_from } => Some((skip_from, i)),
                _ => None,
            })
            .expect("topology has one residual");
        let skip_buf = plan
            .arena
            .iter()
            .find(|b| b.produced_by == Some(skip_from))
            .expect("skip source buffer exists");
        assert_eq!(skip_buf.live_until, residual_at);
        // while pending, the skip contributes to live bytes
        let mid = skip_from + 2;
        assert!(plan.layers[mid].live_bytes >= plan.layers[mid].input_bytes + skip_buf.size_bytes);
    }

    #[test]
    fn simultaneously_live_buffers_never_overlap() {
        for size in [32, 64, 96] {
            let cfg = ModelConfig::new(size, 2).unwrap();
            let model = build_fomo(&cfg, 3).unwrap();
            for m in [&model, &quantized(&model)] {
                let plan = plan_memory(m);
                for (i, a) in plan.arena.iter().enumerate() {
                    for b in plan.arena.iter().skip(i + 1) {
                        let co_live = a.live_from <= b.live_until && b.live_from <= a.live_until;
                        if co_live {
                            let disjoint =
                                a.offset + a.size_bytes <= b.offset || b.offset + b.size_bytes <= a.offset;
                            assert!(disjoint, "overlapping live buffers: {a:?} vs {b:?}");
                        }
                    }
                }
                assert!(plan.peak_bytes <= plan.arena_total_bytes);
            }
        }
    }

    #[test]
    fn mac_formula_fixtures() {
        let plan_model = one_conv_model(ModelFormat::F32);
        // 3x3 conv, cin 3, cout 8, out 16x16
        assert_eq!(count_macs(&plan_model), 3 * 3 * 3 * 8 * 16 * 16);

        // head-only model: 1x1 conv over the final grid
        let head_only = FomoModel {
            layers: vec![Layer {
                kind: LayerKind::Head(ConvShape {
                    kh: 1,
                    kw: 1,
                    cin: 24,
                    cout: 5,
                    stride: 1,
                    padding: Padding::Same,
                }),
                weights: None,
                out_quant: None,
            }],
            ..one_conv_model(ModelFormat::F32)
        };
        assert_eq!(count_macs(&head_only), 24 * 5 * 32 * 32);
    }

    #[test]
    fn macs_scale_with_spatial_area() {
        let m32 = build_fomo(&ModelConfig::new(32, 1).unwrap(), 1).unwrap();
        let m96 = build_fomo(&ModelConfig::new(96, 1).unwrap(), 1).unwrap();
        assert_eq!(count_macs(&m96), 9 * count_macs(&m32));
    }

    #[test]
    fn bench_report_structure() {
        let cfg = ModelConfig::new(32, 1).unwrap();
        let model = quantized(&build_fomo(&cfg, 1).unwrap());
        let img = probe_image(32, 5);
        let report = bench_latency(&model, &img, 10, DEFAULT_THROUGHPUT_MACS_PER_S).unwrap();
        assert_eq!(report.samples_ms.len(), 10);
        assert!(report.median_ms <= report.p95_ms);
        assert!(report.mean_ms > 0.0);
        assert_eq!(report.mac_count, count_macs(&model));
        let expect_ms = report.mac_count as f64 / DEFAULT_THROUGHPUT_MACS_PER_S * 1e3;
        assert!((report.mcu_projection_ms - expect_ms).abs() < 1e-9);
    }

    #[test]
    fn too_few_repeats_are_rejected() {
        let cfg = ModelConfig::new(32, 1).unwrap();
        let model = build_fomo(&cfg, 1).unwrap();
        let img = probe_image(32, 5);
        assert!(bench_latency(&model, &img, 9, 5e6).is_err());
    }

    #[test]
    fn default_mcu_projection_lands_in_table_regime() {
        // int8 32x32 and 64x64 projections should sit in the hundreds of
        // milliseconds at the default throughput constant
        let m32 = build_fomo(&ModelConfig::new(32, 1).unwrap(), 1).unwrap();
        let m64 = build_fomo(&ModelConfig::new(64, 1).unwrap(), 1).unwrap();
        let p32 = count_macs(&m32) as f64 / DEFAULT_THROUGHPUT_MACS_PER_S * 1e3;
        let p64 = count_macs(&m64) as f64 / DEFAULT_THROUGHPUT_MACS_PER_S * 1e3;
        assert!((100.0..600.0).contains(&p32), "32x32 projection {p32} ms");
        assert!((100.0..700.0).contains(&p64), "64x64 projection {p64} ms");
    }
}
