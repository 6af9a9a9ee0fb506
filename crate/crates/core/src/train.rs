//! Supervised training: centroid rasterization to per-cell targets, weighted
//! per-cell cross-entropy, analytical backpropagation for the fixed detector
//! topology, and Adam.
//!
//! Backgrounds dominate the grid, so background cells are down-weighted in
//! the loss (default 0.1). Training is single-threaded with a fixed shuffle
//! and reduction order so a seed reproduces runs bit-for-bit.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataio::{GtObject, LoadedDataset, Sample};
use crate::error::{Error, Result};
use crate::eval::evaluate_samples;
use crate::model::{FomoModel, LayerKind, LayerWeights, ModelFormat};
use crate::tensor::{Padding, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f32,
    pub batch_size: usize,
    pub epochs: usize,
    /// Loss weight of background cells, in (0, 1].
    pub background_weight: f32,
    pub seed: u64,
    /// Fraction of the dataset held out for validation-F1 model selection.
    pub val_fraction: f64,
    /// Decode threshold used when computing validation F1.
    pub tau: f32,
    pub tolerance_cells: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            batch_size: 32,
            epochs: 300,
            background_weight: 0.1,
            seed: 42,
            val_fraction: 0.2,
            tau: 0.5,
            tolerance_cells: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.background_weight > 0.0 && self.background_weight <= 1.0) {
            return Err(Error::Config(format!(
                "background_weight must lie in (0, 1], got {}",
                self.background_weight
            )));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config("val_fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

const ADAM_BETA1: f32 = 0.9;
const ADAM_BETA2: f32 = 0.999;
const ADAM_EPS: f32 = 1e-8;

/// Per-cell integer class labels, 0 = background, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TargetGrid {
    pub grid: usize,
    pub cells: Vec<u16>,
}

impl TargetGrid {
    pub fn background(grid: usize) -> Self {
        TargetGrid {
            grid,
            cells: vec![0; grid * grid],
        }
    }

    pub fn at(&self, row: usize, col: usize) -> u16 {
        self.cells[row * self.grid + col]
    }
}

/// Label the cell containing each centroid with that object's class. A
/// centroid exactly on a cell boundary belongs to the higher-index cell
/// (floor of coordinate / cell_size); the image-edge boundary clamps inward.
/// Multiple centroids in one cell collapse to a single label (first one wins).
pub fn rasterize_targets(objects: &[GtObject], input_size: usize, cell_size: usize) -> Result<TargetGrid> {
    let grid = input_size / cell_size;
    let mut target = TargetGrid::background(grid);
    for (i, obj) in objects.iter().enumerate() {
        let in_bounds =
            obj.cx >= 0.0 && obj.cy >= 0.0 && obj.cx < input_size as f64 && obj.cy < input_size as f64;
        if !in_bounds {
            return Err(Error::Config(format!(
                "object {i}: centroid ({}, {}) outside [0, {input_size})",
                obj.cx, obj.cy
            )));
        }
        let col = ((obj.cx / cell_size as f64).floor() as usize).min(grid - 1);
        let row = ((obj.cy / cell_size as f64).floor() as usize).min(grid - 1);
        let slot = &mut target.cells[row * grid + col];
        if *slot == 0 {
            *slot = obj.class_id as u16;
        }
    }
    Ok(target)
}

/// Mean over cells of weighted cross-entropy between the per-cell softmax of
/// `logits` and the target labels. Background cells carry
/// `background_weight`, object cells 1.0.
pub fn per_cell_loss(logits: &Tensor, target: &TargetGrid, background_weight: f32) -> Result<f64> {
    Ok(loss_and_dlogits(logits, target, background_weight)?.0)
}

/// Loss plus its gradient with respect to the logits.
pub(crate) fn loss_and_dlogits(
    logits: &Tensor,
    target: &TargetGrid,
    background_weight: f32,
) -> Result<(f64, Tensor)> {
    let [n, gh, gw, k] = logits.shape();
    if n != 1 || gh != target.grid || gw != target.grid {
        return Err(Error::shape(
            "per_cell_loss",
            format!("(1, {0}, {0}, k)", target.grid),
            format!("{:?}", logits.shape()),
        ));
    }
    let n_cells = (gh * gw) as f64;
    let mut loss = 0.0f64;
    let mut dlogits = Tensor::zeros(1, gh, gw, k);
    for row in 0..gh {
        for col in 0..gw {
            let t = target.at(row, col) as usize;
            if t >= k {
                return Err(Error::Config(format!(
                    "target label {t} exceeds logit channels {k}"
                )));
            }
            let w = if t == 0 { background_weight as f64 } else { 1.0 };
            let base = logits.idx(0, row, col, 0);
            let cell = &logits.data()[base..base + k];
            let max = cell.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
            let mut sum_exp = 0.0f64;
            for &v in cell {
                sum_exp += ((v as f64) - max).exp();
            }
            let log_z = max + sum_exp.ln();
            loss += w * (log_z - cell[t] as f64);
            let scale = w / n_cells;
            for j in 0..k {
                let p = ((cell[j] as f64) - log_z).exp();
                let indicator = if j == t { 1.0 } else { 0.0 };
                *dlogits.at_mut(0, row, col, j) = (scale * (p - indicator)) as f32;
            }
        }
    }
    Ok((loss / n_cells, dlogits))
}

/// Gradients of one parameterized layer, flattened in kernel order.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub kernel: Vec<f32>,
    pub bias: Vec<f32>,
}

/// Per-layer gradient set aligned with `FomoModel::layers`; `None` for
/// weightless layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub layers: Vec<Option<LayerGrad>>,
}

impl Grads {
    fn zeros_like(model: &FomoModel) -> Self {
        let layers = model
            .layers
            .iter()
            .map(|l| {
                l.weights.as_ref().map(|w| match w {
                    LayerWeights::F32 { kernel, bias } => LayerGrad {
                        kernel: vec![0.0; kernel.len()],
                        bias: vec![0.0; bias.len()],
                    },
                    LayerWeights::Int8 { .. } => unreachable!("training operates on f32 models"),
                })
            })
            .collect();
        Grads { layers }
    }

    fn scale(&mut self, factor: f32) {
        for g in self.layers.iter_mut().flatten() {
            for v in &mut g.kernel {
                *v *= factor;
            }
            for v in &mut g.bias {
                *v *= factor;
            }
        }
    }

    fn accumulate(&mut self, other: &Grads) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            if let (Some(a), Some(b)) = (a, b) {
                for (x, y) in a.kernel.iter_mut().zip(&b.kernel) {
                    *x += y;
                }
                for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                    *x += y;
                }
            }
        }
    }
}

struct ConvGeom {
    stride: usize,
    pad_y: usize,
    pad_x: usize,
}

fn conv_geometry(in_h: usize, in_w: usize, kh: usize, kw: usize, stride: usize, padding: Padding, out_h: usize, out_w: usize) -> ConvGeom {
    let (pad_y, pad_x) = match padding {
        Padding::Same => (
            (((out_h - 1) * stride + kh).saturating_sub(in_h)) / 2,
            (((out_w - 1) * stride + kw).saturating_sub(in_w)) / 2,
        ),
        Padding::Valid => (0, 0),
    };
    ConvGeom { stride, pad_y, pad_x }
}

/// Backward pass of `conv2d`: gradients for input, kernel, and bias.
fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    stride: usize,
    padding: Padding,
    dout: &Tensor,
) -> (Tensor, Vec<f32>, Vec<f32>) {
    let [kh, kw, cin, cout] = kernel.shape();
    let geom = conv_geometry(input.h(), input.w(), kh, kw, stride, padding, dout.h(), dout.w());
    let mut din = Tensor::zeros(input.n(), input.h(), input.w(), cin);
    let mut dkernel = vec![0.0f32; kernel.len()];
    let mut dbias = vec![0.0f32; cout];
    let kdata = kernel.data();
    for n in 0..dout.n() {
        for oy in 0..dout.h() {
            for ox in 0..dout.w() {
                let dbase = dout.idx(n, oy, ox, 0);
                let drow = &dout.data()[dbase..dbase + cout];
                for (b, &d) in dbias.iter_mut().zip(drow) {
                    *b += d;
                }
                for ky in 0..kh {
                    let iy = (oy * geom.stride + ky) as isize - geom.pad_y as isize;
                    if iy < 0 || iy as usize >= input.h() {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = (ox * geom.stride + kx) as isize - geom.pad_x as isize;
                        if ix < 0 || ix as usize >= input.w() {
                            continue;
                        }
                        let in_base = input.idx(n, iy as usize, ix as usize, 0);
                        let din_base = in_base;
                        let w_base = (ky * kw + kx) * cin * cout;
                        for ci in 0..cin {
                            let v = input.data()[in_base + ci];
                            let wrow = &kdata[w_base + ci * cout..w_base + (ci + 1) * cout];
                            let dwrow = &mut dkernel[w_base + ci * cout..w_base + (ci + 1) * cout];
                            let mut acc = 0.0f32;
                            for ((dw, &w), &d) in dwrow.iter_mut().zip(wrow).zip(drow) {
                                *dw += v * d;
                                acc += w * d;
                            }
                            din.data_mut()[din_base + ci] += acc;
                        }
                    }
                }
            }
        }
    }
    (din, dkernel, dbias)
}

/// Backward pass of `depthwise_conv2d`.
fn depthwise_backward(
    input: &Tensor,
    kernel: &Tensor,
    stride: usize,
    padding: Padding,
    dout: &Tensor,
) -> (Tensor, Vec<f32>, Vec<f32>) {
    let [kh, kw, c, _] = kernel.shape();
    let geom = conv_geometry(input.h(), input.w(), kh, kw, stride, padding, dout.h(), dout.w());
    let mut din = Tensor::zeros(input.n(), input.h(), input.w(), c);
    let mut dkernel = vec![0.0f32; kernel.len()];
    let mut dbias = vec![0.0f32; c];
    let kdata = kernel.data();
    for n in 0..dout.n() {
        for oy in 0..dout.h() {
            for ox in 0..dout.w() {
                let dbase = dout.idx(n, oy, ox, 0);
                let drow = &dout.data()[dbase..dbase + c];
                for (b, &d) in dbias.iter_mut().zip(drow) {
                    *b += d;
                }
                for ky in 0..kh {
                    let iy = (oy * geom.stride + ky) as isize - geom.pad_y as isize;
                    if iy < 0 || iy as usize >= input.h() {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = (ox * geom.stride + kx) as isize - geom.pad_x as isize;
                        if ix < 0 || ix as usize >= input.w() {
                            continue;
                        }
                        let in_base = input.idx(n, iy as usize, ix as usize, 0);
                        let w_base = (ky * kw + kx) * c;
                        let wrow = &kdata[w_base..w_base + c];
                        let dwrow = &mut dkernel[w_base..w_base + c];
                        for ci in 0..c {
                            let v = input.data()[in_base + ci];
                            let d = drow[ci];
                            dwrow[ci] += v * d;
                            din.data_mut()[in_base + ci] += wrow[ci] * d;
                        }
                    }
                }
            }
        }
    }
    (din, dkernel, dbias)
}

/// Backward through the full model for one image; returns (loss, grads).
fn backward_one(
    model: &FomoModel,
    image: &Tensor,
    target: &TargetGrid,
    background_weight: f32,
) -> Result<(f64, Grads)> {
    let acts = model.forward_f32_activations(image)?;
    let logits = acts.last().expect("model has layers");
    let (loss, dlogits) = loss_and_dlogits(logits, target, background_weight)?;

    let mut grads = Grads::zeros_like(model);
    // d_acts[i] is the loss gradient wrt the output of layer i
    let mut d_acts: Vec<Option<Tensor>> = vec![None; model.layers.len()];
    *d_acts.last_mut().expect("nonempty") = Some(dlogits);

    for i in (0..model.layers.len()).rev() {
        let dout = match d_acts[i].take() {
            Some(d) => d,
            None => continue, // dead branch (never happens on the chain)
        };
        let layer = &model.layers[i];
        let input: &Tensor = if i == 0 { image } else { &acts[i - 1] };
        match (&layer.kind, &layer.weights) {
            (LayerKind::Conv(s), Some(LayerWeights::F32 { kernel, .. }))
            | (LayerKind::Pointwise(s), Some(LayerWeights::F32 { kernel, .. }))
            | (LayerKind::Head(s), Some(LayerWeights::F32 { kernel, .. })) => {
                let (din, dk, db) = conv2d_backward(input, kernel, s.stride, s.padding, &dout);
                let slot = grads.layers[i].as_mut().expect("parameterized layer");
                for (a, b) in slot.kernel.iter_mut().zip(&dk) {
                    *a += b;
                }
                for (a, b) in slot.bias.iter_mut().zip(&db) {
                    *a += b;
                }
                if i > 0 {
                    add_into(&mut d_acts[i - 1], din);
                }
            }
            (LayerKind::Depthwise(s), Some(LayerWeights::F32 { kernel, .. })) => {
                let (din, dk, db) = depthwise_backward(input, kernel, s.stride, s.padding, &dout);
                let slot = grads.layers[i].as_mut().expect("parameterized layer");
                for (a, b) in slot.kernel.iter_mut().zip(&dk) {
                    *a += b;
                }
                for (a, b) in slot.bias.iter_mut().zip(&db) {
                    *a += b;
                }
                if i > 0 {
                    add_into(&mut d_acts[i - 1], din);
                }
            }
            (LayerKind::Relu6, None) => {
                let mut din = dout;
                for (d, &x) in din.data_mut().iter_mut().zip(input.data()) {
                    if x <= 0.0 || x >= 6.0 {
                        *d = 0.0;
                    }
                }
                if i > 0 {
                    add_into(&mut d_acts[i - 1], din);
                }
            }
            (LayerKind::ResidualAdd { skip_from }, None) => {
                // gradient flows unchanged to both the chain and the skip
                add_into(&mut d_acts[*skip_from], dout.clone());
                if i > 0 {
                    add_into(&mut d_acts[i - 1], dout);
                }
            }
            _ => {
                return Err(Error::Internal(format!(
                    "layer {i} has inconsistent weights during backward"
                )))
            }
        }
    }
    Ok((loss, grads))
}

fn add_into(slot: &mut Option<Tensor>, delta: Tensor) {
    match slot {
        None => *slot = Some(delta),
        Some(t) => {
            for (a, b) in t.data_mut().iter_mut().zip(delta.data()) {
                *a += b;
            }
        }
    }
}

/// Mean loss and mean analytical gradients over a batch.
pub fn gradients(
    model: &FomoModel,
    batch: &[(&Tensor, &TargetGrid)],
    background_weight: f32,
) -> Result<(f64, Grads)> {
    if batch.is_empty() {
        return Err(Error::Config("gradient batch is empty".into()));
    }
    if model.format != ModelFormat::F32 {
        return Err(Error::Config("training requires a f32 model".into()));
    }
    let mut total = Grads::zeros_like(model);
    let mut loss_sum = 0.0f64;
    for (image, target) in batch {
        let (loss, grads) = backward_one(model, image, target, background_weight)?;
        loss_sum += loss;
        total.accumulate(&grads);
    }
    let inv = 1.0 / batch.len() as f32;
    total.scale(inv);
    Ok((loss_sum / batch.len() as f64, total))
}

struct Adam {
    m: Vec<Option<LayerGrad>>,
    v: Vec<Option<LayerGrad>>,
    t: u64,
}

impl Adam {
    fn new(model: &FomoModel) -> Self {
        let zeros = Grads::zeros_like(model);
        Adam {
            m: zeros.layers.clone(),
            v: zeros.layers,
            t: 0,
        }
    }

    fn step(&mut self, model: &mut FomoModel, grads: &Grads, lr: f32) {
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        for (i, layer) in model.layers.iter_mut().enumerate() {
            let (Some(g), Some(m), Some(v)) = (&grads.layers[i], &mut self.m[i], &mut self.v[i]) else {
                continue;
            };
            let Some(LayerWeights::F32 { kernel, bias }) = &mut layer.weights else {
                continue;
            };
            update_params(kernel.data_mut(), &g.kernel, &mut m.kernel, &mut v.kernel, lr, bc1, bc2);
            update_params(bias, &g.bias, &mut m.bias, &mut v.bias, lr, bc1, bc2);
        }
    }
}

fn update_params(params: &mut [f32], grads: &[f32], m: &mut [f32], v: &mut [f32], lr: f32, bc1: f32, bc2: f32) {
    for i in 0..params.len() {
        m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * grads[i];
        v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * grads[i] * grads[i];
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_f1: f64,
}

/// Train a f32 model on the dataset and return the snapshot with the best
/// validation macro F1 along with the per-epoch history. Deterministic for a
/// fixed seed: shuffle order, batch composition, and reduction order are all
/// fixed.
pub fn train(
    model: FomoModel,
    dataset: &LoadedDataset,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<(FomoModel, Vec<EpochStats>)> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Config("cannot train on an empty dataset".into()));
    }
    if dataset.input_size != model.config.input_size {
        return Err(Error::Config(format!(
            "dataset images are {} but the model expects {}",
            dataset.input_size, model.config.input_size
        )));
    }
    if dataset.num_classes() != model.config.num_classes {
        return Err(Error::Config(format!(
            "dataset has {} classes but the model was built for {}",
            dataset.num_classes(),
            model.config.num_classes
        )));
    }
    let mut model = model;
    model.class_names = dataset.classes.clone();
    let n = dataset.samples.len();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    // fixed validation split
    let mut indices: Vec<usize> = (0..n).collect();
    indices.shuffle(&mut rng);
    let val_n = if n >= 2 {
        ((n as f64 * config.val_fraction).round() as usize).clamp(1, n - 1)
    } else {
        0
    };
    let (val_idx, train_idx) = indices.split_at(val_n);
    let val_samples: Vec<Sample> = val_idx.iter().map(|&i| dataset.samples[i].clone()).collect();
    let train_pool: Vec<usize> = train_idx.to_vec();
    // with a single sample, validate on the training image itself
    let val_view: &[Sample] = if val_samples.is_empty() {
        &dataset.samples
    } else {
        &val_samples
    };

    let targets: Vec<TargetGrid> = dataset
        .samples
        .iter()
        .map(|s| rasterize_targets(&s.objects, dataset.input_size, model.config.cell_size))
        .collect::<Result<_>>()?;

    let mut adam = Adam::new(&model);
    let mut history = Vec::with_capacity(config.epochs);
    let mut best_f1 = f64::NEG_INFINITY;
    let mut best_model = model.clone();

    let mut order = train_pool.clone();
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0f64;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<(&Tensor, &TargetGrid)> = chunk
                .iter()
                .map(|&i| (&dataset.samples[i].image, &targets[i]))
                .collect();
            let (loss, grads) = gradients(&model, &batch, config.background_weight)?;
            adam.step(&mut model, &grads, config.learning_rate);
            loss_sum += loss;
            batches += 1;
        }
        let train_loss = loss_sum / batches.max(1) as f64;
        let val_report = evaluate_samples(
            &model,
            val_view,
            &dataset.classes,
            config.tau,
            config.tolerance_cells,
        )?;
        let stats = EpochStats {
            epoch,
            train_loss,
            val_f1: val_report.macro_f1,
        };
        if stats.val_f1 > best_f1 {
            best_f1 = stats.val_f1;
            best_model = model.clone();
        }
        on_epoch(&stats);
        history.push(stats);
    }
    Ok((best_model, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_fomo, ModelConfig};
    use rand::Rng;

    fn obj(class_id: usize, cx: f64, cy: f64) -> GtObject {
        GtObject { class_id, cx, cy }
    }

    #[test]
    fn rasterize_places_centroid_in_containing_cell() {
        let grid = rasterize_targets(&[obj(1, 12.0, 20.0)], 32, 8).unwrap();
        assert_eq!(grid.at(2, 1), 1);
        let labeled: usize = grid.cells.iter().filter(|&&c| c != 0).count();
        assert_eq!(labeled, 1);
    }

    #[test]
    fn rasterize_collapses_same_cell_duplicates() {
        let grid = rasterize_targets(&[obj(1, 10.0, 18.0), obj(1, 12.0, 20.0)], 32, 8).unwrap();
        let labeled: usize = grid.cells.iter().filter(|&&c| c != 0).count();
        assert_eq!(labeled, 1);
        assert_eq!(grid.at(2, 1), 1);
    }

    #[test]
    fn rasterize_no_objects_gives_all_background() {
        let grid = rasterize_targets(&[], 64, 8).unwrap();
        assert!(grid.cells.iter().all(|&c| c == 0));
    }

    #[test]
    fn rasterize_boundary_belongs_to_higher_cell() {
        let grid = rasterize_targets(&[obj(1, 8.0, 0.0)], 32, 8).unwrap();
        assert_eq!(grid.at(0, 1), 1);
    }

    #[test]
    fn rasterize_rejects_out_of_bounds_with_index() {
        let err = rasterize_targets(&[obj(1, 1.0, 1.0), obj(1, 32.0, 5.0)], 32, 8).unwrap_err();
        assert!(err.to_string().contains("object 1"), "{err}");
    }

    #[test]
    fn uniform_logits_over_background_grid_cost_ln2() {
        let logits = Tensor::zeros(1, 4, 4, 2);
        let target = TargetGrid::background(4);
        let loss = per_cell_loss(&logits, &target, 1.0).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-6);
    }

    #[test]
    fn confident_correct_logits_cost_almost_nothing() {
        let mut logits = Tensor::zeros(1, 4, 4, 2);
        let mut target = TargetGrid::background(4);
        target.cells[5] = 1;
        for row in 0..4 {
            for col in 0..4 {
                let t = target.at(row, col) as usize;
                *logits.at_mut(0, row, col, t) = 20.0;
            }
        }
        let loss = per_cell_loss(&logits, &target, 0.1).unwrap();
        assert!(loss < 1e-3, "loss {loss}");
    }

    #[test]
    fn loss_matches_scalar_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let k = rng.gen_range(2..=4);
            let g = 4usize;
            let data: Vec<f32> = (0..g * g * k).map(|_| rng.gen_range(-4.0f32..4.0)).collect();
            let logits = Tensor::from_vec([1, g, g, k], data).unwrap();
            let cells: Vec<u16> = (0..g * g).map(|_| rng.gen_range(0..k) as u16).collect();
            let target = TargetGrid { grid: g, cells };
            let bw = rng.gen_range(0.05f32..1.0);
            let got = per_cell_loss(&logits, &target, bw).unwrap();

            // independent scalar recomputation
            let mut want = 0.0f64;
            for row in 0..g {
                for col in 0..g {
                    let t = target.at(row, col) as usize;
                    let cell: Vec<f64> = (0..k).map(|j| logits.at(0, row, col, j) as f64).collect();
                    let z: f64 = cell.iter().map(|v| v.exp()).sum();
                    let p = cell[t].exp() / z;
                    let w = if t == 0 { bw as f64 } else { 1.0 };
                    want += w * -(p.ln());
                }
            }
            want /= (g * g) as f64;
            assert!((got - want).abs() < 1e-6, "{got} vs {want}");
        }
    }

    #[test]
    fn zero_weight_head_bias_gradient_matches_closed_form() {
        let cfg = ModelConfig::new(32, 1).unwrap();
        let mut model = build_fomo(&cfg, 17).unwrap();
        let head = model.layers.last_mut().unwrap();
        if let Some(LayerWeights::F32 { kernel, bias }) = &mut head.weights {
            kernel.data_mut().fill(0.0);
            bias.fill(0.0);
        }
        let image = Tensor::filled([1, 32, 32, 3], 0.5);
        let mut target = TargetGrid::background(4);
        target.cells[0] = 1;
        target.cells[15] = 1;
        let (_, grads) = gradients(&model, &[(&image, &target)], 0.5).unwrap();
        let head_grad = grads.layers.last().unwrap().as_ref().unwrap();
        // uniform probabilities p = 1/2; dbias_j = sum_cells w_c (p - [j==t]) / 16
        let k = 2.0f64;
        let n_cells = 16.0f64;
        let mut expect = [0.0f64; 2];
        for cell in 0..16 {
            let t = target.cells[cell] as usize;
            let w = if t == 0 { 0.5 } else { 1.0 };
            for (j, e) in expect.iter_mut().enumerate() {
                let ind = if j == t { 1.0 } else { 0.0 };
                *e += w * (1.0 / k - ind) / n_cells;
            }
        }
        for j in 0..2 {
            let got = head_grad.bias[j] as f64;
            assert!(
                (got - expect[j]).abs() < 1e-6,
                "bias[{j}]: {got} vs {}",
                expect[j]
            );
        }
    }

    #[test]
    fn duplicating_a_batch_element_preserves_mean_gradient() {
        let cfg = ModelConfig::new(32, 1).unwrap();
        let model = build_fomo(&cfg, 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data: Vec<f32> = (0..32 * 32 * 3).map(|_| rng.gen_range(0.0f32..1.0)).collect();
        let a = Tensor::from_vec([1, 32, 32, 3], data).unwrap();
        let b = Tensor::filled([1, 32, 32, 3], 0.25);
        let mut ta = TargetGrid::background(4);
        ta.cells[3] = 1;
        let tb = TargetGrid::background(4);
        let (_, g1) = gradients(&model, &[(&a, &ta), (&b, &tb)], 0.1).unwrap();
        let (_, g2) = gradients(&model, &[(&a, &ta), (&b, &tb), (&a, &ta), (&b, &tb)], 0.1).unwrap();
        for (l1, l2) in g1.layers.iter().zip(&g2.layers) {
            if let (Some(l1), Some(l2)) = (l1, l2) {
                for (x, y) in l1.kernel.iter().zip(&l2.kernel) {
                    assert!((x - y).abs() < 1e-6);
                }
                for (x, y) in l1.bias.iter().zip(&l2.bias) {
                    assert!((x - y).abs() < 1e-6);
                }
            }
        }
    }

    fn tiny_dataset(dir: &std::path::Path, n: usize, seed: u64) -> LoadedDataset {
        crate::dataio::gen_synthetic(
            &crate::dataio::SynthConfig {
                image_size: 32,
                n_images: n,
                objects_per_image: (1, 2),
                radius_range: (3.0, 6.0),
                background: crate::dataio::BackgroundStyle::Noise,
                contrast: 0.9,
                seed,
            },
            dir,
        )
        .unwrap();
        LoadedDataset::load(dir, 32).unwrap()
    }

    #[test]
    fn two_epoch_smoke_run_reduces_loss() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny_dataset(dir.path(), 10, 5);
        let cfg = ModelConfig::new(32, 1).unwrap();
        let model = build_fomo(&cfg, 1).unwrap();
        let tc = TrainConfig {
            epochs: 2,
            batch_size: 2,
            learning_rate: 2e-3,
            ..TrainConfig::default()
        };
        let (_, history) = train(model, &ds, &tc, |_| {}).unwrap();
        assert_eq!(history.len(), 2);
        assert!(
            history[1].train_loss < history[0].train_loss,
            "loss went {} -> {}",
            history[0].train_loss,
            history[1].train_loss
        );
    }

    #[test]
    fn same_seed_reproduces_identical_history() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny_dataset(dir.path(), 8, 6);
        let cfg = ModelConfig::new(32, 1).unwrap();
        let tc = TrainConfig {
            epochs: 3,
            batch_size: 4,
            learning_rate: 1e-3,
            ..TrainConfig::default()
        };
        let (m1, h1) = train(build_fomo(&cfg, 2).unwrap(), &ds, &tc, |_| {}).unwrap();
        let (m2, h2) = train(build_fomo(&cfg, 2).unwrap(), &ds, &tc, |_| {}).unwrap();
        assert_eq!(h1, h2);
        assert_eq!(m1, m2);
    }

    #[test]
    fn empty_dataset_is_a_configuration_error() {
        let ds = LoadedDataset {
            classes: vec!["roi".into()],
            input_size: 32,
            samples: vec![],
        };
        let cfg = ModelConfig::new(32, 1).unwrap();
        let model = build_fomo(&cfg, 1).unwrap();
        assert!(matches!(
            train(model, &ds, &TrainConfig::default(), |_| {}),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn loss_is_nonnegative_and_zero_only_at_point_mass() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let data: Vec<f32> = (0..16 * 2).map(|_| rng.gen_range(-3.0f32..3.0)).collect();
            let logits = Tensor::from_vec([1, 4, 4, 2], data).unwrap();
            let target = TargetGrid::background(4);
            assert!(per_cell_loss(&logits, &target, 0.5).unwrap() > 0.0);
        }
    }
}
