//! Post-training int8 quantization: weights symmetric per-tensor, activations
//! asymmetric from calibration ranges, biases stored as 32-bit integers at
//! scale `input_scale * weight_scale`.

pub use crate::tensor::QuantParams;

use crate::error::{Error, Result};
use crate::model::{FomoModel, Layer, LayerWeights, ModelFormat};
use crate::tensor::{QuantTensor, Tensor};

/// Observed value range of one activation tensor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MinMax {
    pub min: f32,
    pub max: f32,
}

impl MinMax {
    fn empty() -> Self {
        MinMax {
            min: f32::INFINITY,
            max: f32::NEG_INFINITY,
        }
    }

    fn observe(&mut self, t: &Tensor) {
        for &v in t.data() {
            self.min = self.min.min(v);
            self.max = self.max.max(v);
        }
    }

    fn union(&self, other: &MinMax) -> MinMax {
        MinMax {
            min: self.min.min(other.min),
            max: self.max.max(other.max),
        }
    }
}

/// Running min/max of the model input and of every layer output over a
/// calibration set.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationStats {
    pub input: MinMax,
    pub per_layer: Vec<MinMax>,
    pub sample_count: usize,
}

impl CalibrationStats {
    /// Element-wise range union of two stats records.
    pub fn merge(&self, other: &CalibrationStats) -> Result<CalibrationStats> {
        if self.per_layer.len() != other.per_layer.len() {
            return Err(Error::Config(
                "cannot merge calibration stats from different topologies".into(),
            ));
        }
        Ok(CalibrationStats {
            input: self.input.union(&other.input),
            per_layer: self
                .per_layer
                .iter()
                .zip(&other.per_layer)
                .map(|(a, b)| a.union(b))
                .collect(),
            sample_count: self.sample_count + other.sample_count,
        })
    }
}

/// Record the activation ranges of a f32 model over a calibration set.
pub fn calibrate(model: &FomoModel, images: &[Tensor]) -> Result<CalibrationStats> {
    if model.format != ModelFormat::F32 {
        return Err(Error::Config("calibration requires a f32 model".into()));
    }
    if images.is_empty() {
        return Err(Error::Config("calibration set is empty".into()));
    }
    let mut input = MinMax::empty();
    let mut per_layer = vec![MinMax::empty(); model.layers.len()];
    for image in images {
        input.observe(image);
        let acts = model.forward_f32_activations(image)?;
        for (slot, act) in per_layer.iter_mut().zip(&acts) {
            slot.observe(act);
        }
    }
    Ok(CalibrationStats {
        input,
        per_layer,
        sample_count: images.len(),
    })
}

/// Symmetric quantization (weights): `zero_point = 0`,
/// `scale = max|v| / 127`. An all-zero tensor degenerates to scale 1.0 with
/// every element at the zero point.
pub fn quantize_symmetric(values: &Tensor) -> QuantTensor {
    let amax = values.data().iter().fold(0.0f32, |m, v| m.max(v.abs()));
    let params = if amax == 0.0 {
        QuantParams { scale: 1.0, zero_point: 0 }
    } else {
        QuantParams {
            scale: amax / 127.0,
            zero_point: 0,
        }
    };
    let data = values.data().iter().map(|&v| params.quantize(v)).collect();
    QuantTensor::from_vec(values.shape(), data, params).expect("shape preserved")
}

/// Asymmetric quantization (activations): `scale = (max - min) / 255` with
/// the zero point placed so `min` maps near -128.
pub fn asymmetric_params(range: MinMax) -> QuantParams {
    let (min, max) = (range.min.min(0.0), range.max.max(range.min));
    let span = max - min;
    if !(span > 0.0) || !span.is_finite() {
        return QuantParams {
            scale: 1.0,
            zero_point: (-min.round() as i32).clamp(-128, 127),
        };
    }
    let scale = span / 255.0;
    let zero_point = (-128.0 - min / scale).round().clamp(-128.0, 127.0) as i32;
    QuantParams { scale, zero_point }
}

/// Quantize a real-valued tensor; symmetric for weights, asymmetric for
/// activation-like data. Every in-range element round-trips within
/// `scale / 2`.
pub fn quantize_tensor(values: &Tensor, symmetric: bool) -> Result<QuantTensor> {
    if !values.all_finite() {
        return Err(Error::Config("cannot quantize non-finite values".into()));
    }
    if symmetric {
        return Ok(quantize_symmetric(values));
    }
    let mut range = MinMax::empty();
    range.observe(values);
    let all_zero = values.data().iter().all(|&v| v == 0.0);
    let params = if all_zero {
        QuantParams { scale: 1.0, zero_point: 0 }
    } else {
        asymmetric_params(range)
    };
    let data = values.data().iter().map(|&v| params.quantize(v)).collect();
    QuantTensor::from_vec(values.shape(), data, params)
}

/// Convert a trained f32 model into int8 using calibration ranges. Weights
/// are per-tensor symmetric; every activation tensor gets asymmetric
/// parameters derived from its observed range, which also clips inference to
/// the calibration range.
pub fn quantize_model(model: &FomoModel, stats: &CalibrationStats) -> Result<FomoModel> {
    if model.format != ModelFormat::F32 {
        return Err(Error::Config("model is already quantized".into()));
    }
    if stats.per_layer.len() != model.layers.len() {
        return Err(Error::MissingCalibration(format!(
            "stats cover {} layers, model has {}",
            stats.per_layer.len(),
            model.layers.len()
        )));
    }
    for (i, r) in stats.per_layer.iter().enumerate() {
        if r.min > r.max {
            return Err(Error::MissingCalibration(format!(
                "layer {i} ({}) output",
                model.layers[i].kind.name()
            )));
        }
    }
    if stats.input.min > stats.input.max {
        return Err(Error::MissingCalibration("model input".into()));
    }

    let input_quant = asymmetric_params(stats.input);
    let mut layers = Vec::with_capacity(model.layers.len());
    let mut prev_params = input_quant;
    for (i, layer) in model.layers.iter().enumerate() {
        let out_quant = asymmetric_params(stats.per_layer[i]);
        let weights = match &layer.weights {
            Some(LayerWeights::F32 { kernel, bias }) => {
                let qkernel = quantize_symmetric(kernel);
                let bias_scale = prev_params.scale as f64 * qkernel.params.scale as f64;
                let qbias = bias
                    .iter()
                    .map(|&b| (b as f64 / bias_scale).round() as i32)
                    .collect();
                Some(LayerWeights::Int8 {
                    kernel: qkernel,
                    bias: qbias,
                })
            }
            Some(LayerWeights::Int8 { .. }) => {
                return Err(Error::Config("model is already quantized".into()))
            }
            None => None,
        };
        layers.push(Layer {
            kind: layer.kind.clone(),
            weights,
            out_quant: Some(out_quant),
        });
        prev_params = out_quant;
    }
    Ok(FomoModel {
        config: model.config,
        class_names: model.class_names.clone(),
        format: ModelFormat::Int8,
        input_quant: Some(input_quant),
        layers,
        plan: std::sync::OnceLock::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_fomo, decode_model, encode_model, forward, ModelConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn test_model() -> FomoModel {
        build_fomo(&ModelConfig::new(32, 1).unwrap(), 3).unwrap()
    }

    fn random_images(n: usize, size: usize, seed: u64) -> Vec<Tensor> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let data = (0..size * size * 3).map(|_| rng.gen_range(0.0f32..1.0)).collect();
                Tensor::from_vec([1, size, size, 3], data).unwrap()
            })
            .collect()
    }

    #[test]
    fn calibration_on_zero_image_brackets_zero() {
        let model = test_model();
        let images = vec![Tensor::zeros(1, 32, 32, 3)];
        let stats = calibrate(&model, &images).unwrap();
        assert_eq!(stats.sample_count, 1);
        for r in &stats.per_layer {
            assert!(r.min <= 0.0 + 1e-6, "range {r:?} excludes zero");
            assert!(r.max >= -1e-6);
        }
    }

    #[test]
    fn merged_stats_equal_elementwise_range_union() {
        let model = test_model();
        let a = calibrate(&model, &random_images(3, 32, 1)).unwrap();
        let b = calibrate(&model, &random_images(3, 32, 2)).unwrap();
        let merged = a.merge(&b).unwrap();
        assert_eq!(merged.sample_count, 6);
        for ((ra, rb), rm) in a.per_layer.iter().zip(&b.per_layer).zip(&merged.per_layer) {
            assert_eq!(rm.min, ra.min.min(rb.min));
            assert_eq!(rm.max, ra.max.max(rb.max));
        }
    }

    #[test]
    fn calibration_is_order_independent() {
        let model = test_model();
        let mut images = random_images(5, 32, 7);
        let a = calibrate(&model, &images).unwrap();
        images.reverse();
        let b = calibrate(&model, &images).unwrap();
        assert_eq!(a.input, b.input);
        assert_eq!(a.per_layer, b.per_layer);
    }

    #[test]
    fn empty_calibration_set_is_rejected() {
        let model = test_model();
        assert!(matches!(calibrate(&model, &[]), Err(Error::Config(_))));
    }

    #[test]
    fn all_zero_tensor_quantizes_to_degenerate_params() {
        let t = Tensor::zeros(1, 2, 2, 2);
        for symmetric in [true, false] {
            let q = quantize_tensor(&t, symmetric).unwrap();
            assert_eq!(q.params.scale, 1.0);
            assert!(q.data().iter().all(|&v| v as i32 == q.params.zero_point));
        }
    }

    #[test]
    fn symmetric_endpoints_map_to_full_range() {
        let t = Tensor::from_vec([1, 1, 1, 4], vec![-1.0, -0.5, 0.5, 1.0]).unwrap();
        let q = quantize_tensor(&t, true).unwrap();
        assert!((q.params.scale - 1.0 / 127.0).abs() < 1e-9);
        assert_eq!(q.params.zero_point, 0);
        assert_eq!(q.data()[3], 127);
        assert_eq!(q.data()[0], -127);
    }

    #[test]
    fn round_trip_error_bounded_by_half_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for symmetric in [true, false] {
            let data: Vec<f32> = (0..1000).map(|_| rng.gen_range(-3.0f32..5.0)).collect();
            let t = Tensor::from_vec([1, 10, 10, 10], data.clone()).unwrap();
            let q = quantize_tensor(&t, symmetric).unwrap();
            let back = q.dequantize();
            for (orig, rec) in data.iter().zip(back.data()) {
                assert!(
                    (orig - rec).abs() <= q.params.scale / 2.0 + 1e-7,
                    "symmetric={symmetric}: {orig} -> {rec} (scale {})",
                    q.params.scale
                );
            }
        }
    }

    #[test]
    fn quantization_preserves_shapes() {
        let model = test_model();
        let stats = calibrate(&model, &random_images(4, 32, 9)).unwrap();
        let qmodel = quantize_model(&model, &stats).unwrap();
        assert_eq!(qmodel.layers.len(), model.layers.len());
        for (f, q) in model.layers.iter().zip(&qmodel.layers) {
            match (&f.weights, &q.weights) {
                (Some(LayerWeights::F32 { kernel: fk, bias: fb }), Some(LayerWeights::Int8 { kernel: qk, bias: qb })) => {
                    assert_eq!(fk.shape(), qk.shape());
                    assert_eq!(fb.len(), qb.len());
                }
                (None, None) => {}
                other => panic!("weight layout changed: {other:?}"),
            }
            assert!(q.out_quant.is_some());
        }
    }

    #[test]
    fn missing_stats_name_the_offending_tensor() {
        let model = test_model();
        let mut stats = calibrate(&model, &random_images(2, 32, 10)).unwrap();
        stats.per_layer.truncate(stats.per_layer.len() - 1);
        let err = quantize_model(&model, &stats).unwrap_err();
        assert!(matches!(err, Error::MissingCalibration(_)));
    }

    #[test]
    fn quantized_container_round_trips_bit_exactly() {
        let model = test_model();
        let stats = calibrate(&model, &random_images(4, 32, 11)).unwrap();
        let qmodel = quantize_model(&model, &stats).unwrap();
        let back = decode_model(&encode_model(&qmodel)).unwrap();
        assert_eq!(qmodel, back);
        let img = &random_images(1, 32, 12)[0];
        assert_eq!(
            forward(&qmodel, img).unwrap().probs.data(),
            forward(&back, img).unwrap().probs.data()
        );
    }

    #[test]
    fn int8_weight_blob_is_about_a_quarter_of_f32() {
        let model = test_model();
        let stats = calibrate(&model, &random_images(2, 32, 13)).unwrap();
        let qmodel = quantize_model(&model, &stats).unwrap();
        let f32_weight_bytes: usize = model
            .layers
            .iter()
            .filter_map(|l| l.weights.as_ref())
            .map(|w| match w {
                LayerWeights::F32 { kernel, .. } => kernel.len() * 4,
                _ => 0,
            })
            .sum();
        let int8_weight_bytes: usize = qmodel
            .layers
            .iter()
            .filter_map(|l| l.weights.as_ref())
            .map(|w| match w {
                LayerWeights::Int8 { kernel, .. } => kernel.len(),
                _ => 0,
            })
            .sum();
        assert_eq!(int8_weight_bytes * 4, f32_weight_bytes);
        // whole-container ratio includes header overhead; stay under half
        let f32_bytes = encode_model(&model).len();
        let int8_bytes = encode_model(&qmodel).len();
        assert!(int8_bytes * 2 < f32_bytes, "{int8_bytes} vs {f32_bytes}");
    }

    #[test]
    fn single_calibrated_layer_tracks_float_within_two_scales() {
        // conv, depthwise, and pointwise all requantize the same way; check
        // the mean dequantized error of each against the float path
        use crate::tensor::{conv2d, conv2d_int8, depthwise_conv2d, depthwise_conv2d_int8, Padding};
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for kind in ["conv", "depthwise", "pointwise"] {
            let (kh, kw, cin, cout) = match kind {
                "conv" => (3, 3, 3, 8),
                "depthwise" => (3, 3, 6, 1),
                _ => (1, 1, 6, 8),
            };
            let in_data: Vec<f32> = (0..12 * 12 * cin).map(|_| rng.gen_range(0.0f32..1.0)).collect();
            let input = Tensor::from_vec([1, 12, 12, cin], in_data).unwrap();
            let wdata: Vec<f32> = (0..kh * kw * cin * cout.max(1))
                .map(|_| rng.gen_range(-0.5f32..0.5))
                .collect();
            let kernel = Tensor::from_vec([kh, kw, cin, cout], wdata).unwrap();
            let n_out = if kind == "depthwise" { cin } else { cout };
            let bias: Vec<f32> = (0..n_out).map(|_| rng.gen_range(-0.2f32..0.2)).collect();

            let float_out = if kind == "depthwise" {
                depthwise_conv2d(&input, &kernel, &bias, 1, Padding::Same).unwrap()
            } else {
                conv2d(&input, &kernel, &bias, 1, Padding::Same).unwrap()
            };

            let qin = quantize_tensor(&input, false).unwrap();
            let qw = quantize_symmetric(&kernel);
            let bias_scale = qin.params.scale as f64 * qw.params.scale as f64;
            let qbias: Vec<i32> = bias.iter().map(|&b| (b as f64 / bias_scale).round() as i32).collect();
            let mut range = MinMax::empty();
            range.observe(&float_out);
            let out_params = asymmetric_params(range);

            let qout = if kind == "depthwise" {
                depthwise_conv2d_int8(&qin, &qw, &qbias, out_params, 1, Padding::Same).unwrap()
            } else {
                conv2d_int8(&qin, &qw, &qbias, out_params, 1, Padding::Same).unwrap()
            };
            let deq = qout.dequantize();
            let mean_err: f64 = deq
                .data()
                .iter()
                .zip(float_out.data())
                .map(|(a, b)| (a - b).abs() as f64)
                .sum::<f64>()
                / deq.len() as f64;
            assert!(
                mean_err <= 2.0 * out_params.scale as f64,
                "{kind}: mean error {mean_err} vs scale {}",
                out_params.scale
            );
        }
    }
}
