//! Heatmap decoding: per-cell thresholding followed by 8-connected merging of
//! same-class cells into centroid detections.

use crate::error::{Error, Result};
use crate::model::{forward, FomoModel, GridHeatmap};
use crate::tensor::Tensor;

/// One cell whose non-background argmax cleared the threshold.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PositiveCell {
    pub row: usize,
    pub col: usize,
    pub class_id: usize,
    pub prob: f32,
}

/// One decoded centroid after cell merging. Coordinates are pixels in the
/// model input frame; `confidence` is the maximum cell probability within the
/// merged cluster.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub class_id: usize,
    pub confidence: f32,
    pub cx: f64,
    pub cy: f64,
    pub cell_count: usize,
}

/// Keep a cell iff its argmax class is foreground with probability at least
/// `tau`. An exact probability tie between background and a foreground class
/// resolves to background.
pub fn threshold_cells(heatmap: &GridHeatmap, tau: f32) -> Result<Vec<PositiveCell>> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::Config(format!("tau must lie in (0, 1), got {tau}")));
    }
    let probs = &heatmap.probs;
    let k = probs.c();
    let mut out = Vec::new();
    for row in 0..heatmap.grid_h {
        for col in 0..heatmap.grid_w {
            let mut best = 0usize;
            let mut best_p = probs.at(0, row, col, 0);
            for class in 1..k {
                let p = probs.at(0, row, col, class);
                if p > best_p {
                    best = class;
                    best_p = p;
                }
            }
            if best != 0 && best_p >= tau {
                out.push(PositiveCell {
                    row,
                    col,
                    class_id: best,
                    prob: best_p,
                });
            }
        }
    }
    Ok(out)
}

/// Merge same-class cells connected under 8-connectivity into detections.
/// The centroid is the probability-weighted mean of member cell centers;
/// results sort by descending confidence, ties by the cluster's topmost then
/// leftmost cell.
pub fn merge_and_centroid(cells: &[PositiveCell], cell_size: usize, image_size: usize) -> Vec<Detection> {
    let grid = image_size / cell_size;
    let mut occupancy: Vec<Option<usize>> = vec![None; grid * grid];
    for (i, c) in cells.iter().enumerate() {
        debug_assert!(c.row < grid && c.col < grid);
        occupancy[c.row * grid + c.col] = Some(i);
    }

    let mut visited = vec![false; cells.len()];
    let mut detections: Vec<(Detection, (usize, usize))> = Vec::new();
    for start in 0..cells.len() {
        if visited[start] {
            continue;
        }
        // flood-fill one same-class 8-connected cluster
        let mut members = vec![start];
        visited[start] = true;
        let mut queue = vec![start];
        while let Some(i) = queue.pop() {
            let cur = cells[i];
            for dr in -1i64..=1 {
                for dc in -1i64..=1 {
                    if dr == 0 && dc == 0 {
                        continue;
                    }
                    let r = cur.row as i64 + dr;
                    let c = cur.col as i64 + dc;
                    if r < 0 || c < 0 || r >= grid as i64 || c >= grid as i64 {
                        continue;
                    }
                    if let Some(j) = occupancy[r as usize * grid + c as usize] {
                        if !visited[j] && cells[j].class_id == cur.class_id {
                            visited[j] = true;
                            members.push(j);
                            queue.push(j);
                        }
                    }
                }
            }
        }
        // enumeration-order independence: fix member order before reducing
        members.sort_by_key(|&i| (cells[i].row, cells[i].col));
        let mut wsum = 0.0f64;
        let mut cx = 0.0f64;
        let mut cy = 0.0f64;
        let mut confidence = 0.0f32;
        for &i in &members {
            let cell = cells[i];
            let w = cell.prob as f64;
            let half = cell_size as f64 / 2.0;
            cx += w * (cell.col as f64 * cell_size as f64 + half);
            cy += w * (cell.row as f64 * cell_size as f64 + half);
            wsum += w;
            confidence = confidence.max(cell.prob);
        }
        let anchor = (cells[members[0]].row, cells[members[0]].col);
        detections.push((
            Detection {
                class_id: cells[start].class_id,
                confidence,
                cx: cx / wsum,
                cy: cy / wsum,
                cell_count: members.len(),
            },
            anchor,
        ));
    }
    detections.sort_by(|(a, aa), (b, ba)| {
        b.confidence
            .partial_cmp(&a.confidence)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(aa.cmp(ba))
    });
    detections.into_iter().map(|(d, _)| d).collect()
}

/// Full decode: forward pass, thresholding, merging.
pub fn detect(model: &FomoModel, image: &Tensor, tau: f32) -> Result<Vec<Detection>> {
    let heatmap = forward(model, image)?;
    let cells = threshold_cells(&heatmap, tau)?;
    Ok(merge_and_centroid(
        &cells,
        model.config.cell_size,
        model.config.input_size,
    ))
}

/// Line-delimited record: image id, class, confidence, x, y, cell count.
pub fn detection_line(image_id: &str, class_name: &str, d: &Detection) -> String {
    format!(
        "{image_id} {class_name} {:.4} {:.2} {:.2} {}",
        d.confidence, d.cx, d.cy, d.cell_count
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::GridHeatmap;

    fn heatmap_from_fg(grid: usize, fg: &[((usize, usize), f32)]) -> GridHeatmap {
        // two channels: background = 1 - p, foreground class 1 = p
        let mut probs = Tensor::zeros(1, grid, grid, 2);
        for row in 0..grid {
            for col in 0..grid {
                *probs.at_mut(0, row, col, 0) = 1.0;
            }
        }
        for &((row, col), p) in fg {
            *probs.at_mut(0, row, col, 0) = 1.0 - p;
            *probs.at_mut(0, row, col, 1) = p;
        }
        GridHeatmap {
            grid_h: grid,
            grid_w: grid,
            probs,
        }
    }

    #[test]
    fn exact_tie_resolves_to_background() {
        let hm = heatmap_from_fg(2, &[((0, 0), 0.5), ((1, 1), 0.5)]);
        let cells = threshold_cells(&hm, 0.5).unwrap();
        assert!(cells.is_empty());
    }

    #[test]
    fn single_confident_cell_is_kept() {
        let hm = heatmap_from_fg(4, &[((2, 1), 0.9)]);
        let cells = threshold_cells(&hm, 0.5).unwrap();
        assert_eq!(cells.len(), 1);
        assert_eq!((cells[0].row, cells[0].col, cells[0].class_id), (2, 1, 1));
    }

    #[test]
    fn threshold_above_max_prob_yields_empty_set() {
        let hm = heatmap_from_fg(4, &[((2, 1), 0.9)]);
        assert!(threshold_cells(&hm, 0.95).unwrap().is_empty());
    }

    #[test]
    fn tau_outside_unit_interval_is_rejected() {
        let hm = heatmap_from_fg(2, &[]);
        assert!(threshold_cells(&hm, 0.0).is_err());
        assert!(threshold_cells(&hm, 1.0).is_err());
    }

    #[test]
    fn single_cell_centroid_is_cell_center() {
        let cells = [PositiveCell {
            row: 2,
            col: 1,
            class_id: 1,
            prob: 0.8,
        }];
        let dets = merge_and_centroid(&cells, 8, 32);
        assert_eq!(dets.len(), 1);
        assert_eq!((dets[0].cx, dets[0].cy), (12.0, 20.0));
        assert_eq!(dets[0].cell_count, 1);
        assert_eq!(dets[0].confidence, 0.8);
    }

    #[test]
    fn adjacent_equal_cells_merge_to_shared_edge_midpoint() {
        let cells = [
            PositiveCell { row: 1, col: 1, class_id: 1, prob: 0.7 },
            PositiveCell { row: 1, col: 2, class_id: 1, prob: 0.7 },
        ];
        let dets = merge_and_centroid(&cells, 8, 64);
        assert_eq!(dets.len(), 1);
        assert_eq!(dets[0].cell_count, 2);
        assert!((dets[0].cx - 16.0).abs() < 1e-9);
        assert!((dets[0].cy - 12.0).abs() < 1e-9);
    }

    #[test]
    fn diagonal_cells_merge_under_eight_connectivity() {
        let cells = [
            PositiveCell { row: 0, col: 0, class_id: 1, prob: 0.6 },
            PositiveCell { row: 1, col: 1, class_id: 1, prob: 0.9 },
        ];
        let dets = merge_and_centroid(&cells, 8, 32);
        assert_eq!(dets.len(), 1);
        assert_eq!(dets[0].confidence, 0.9);
    }

    #[test]
    fn opposite_corners_stay_separate() {
        let cells = [
            PositiveCell { row: 0, col: 0, class_id: 1, prob: 0.6 },
            PositiveCell { row: 3, col: 3, class_id: 1, prob: 0.9 },
        ];
        let dets = merge_and_centroid(&cells, 8, 32);
        assert_eq!(dets.len(), 2);
        // sorted by descending confidence
        assert!(dets[0].confidence >= dets[1].confidence);
    }

    #[test]
    fn different_classes_never_merge() {
        let cells = [
            PositiveCell { row: 1, col: 1, class_id: 1, prob: 0.8 },
            PositiveCell { row: 1, col: 2, class_id: 2, prob: 0.8 },
        ];
        let dets = merge_and_centroid(&cells, 8, 64);
        assert_eq!(dets.len(), 2);
    }

    #[test]
    fn merging_is_order_invariant_and_idempotent() {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut cells = vec![
            PositiveCell { row: 0, col: 0, class_id: 1, prob: 0.5 },
            PositiveCell { row: 0, col: 1, class_id: 1, prob: 0.65 },
            PositiveCell { row: 1, col: 1, class_id: 1, prob: 0.7 },
            PositiveCell { row: 3, col: 3, class_id: 1, prob: 0.95 },
            PositiveCell { row: 3, col: 0, class_id: 2, prob: 0.6 },
        ];
        let baseline = merge_and_centroid(&cells, 8, 64);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..10 {
            cells.shuffle(&mut rng);
            assert_eq!(merge_and_centroid(&cells, 8, 64), baseline);
        }
        // idempotence: each cluster's members re-merge to the same detection
        for det in &baseline {
            let members: Vec<PositiveCell> = cells
                .iter()
                .copied()
                .filter(|c| {
                    c.class_id == det.class_id
                        && (c.row as f64 * 8.0 - det.cy).abs() < 24.0
                        && (c.col as f64 * 8.0 - det.cx).abs() < 24.0
                })
                .collect();
            if members.len() == det.cell_count {
                let again = merge_and_centroid(&members, 8, 64);
                assert_eq!(again.len(), 1);
                assert_eq!(&again[0], det);
            }
        }
    }

    #[test]
    fn detection_count_bounded_by_positive_cells() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        for _ in 0..50 {
            let grid = 8usize;
            let mut probs = Tensor::zeros(1, grid, grid, 3);
            for v in probs.data_mut().iter_mut() {
                *v = rng.gen_range(0.0f32..1.0);
            }
            let probs = crate::tensor::softmax_per_cell(&probs).unwrap();
            let hm = GridHeatmap { grid_h: grid, grid_w: grid, probs };
            let cells = threshold_cells(&hm, 0.4).unwrap();
            let dets = merge_and_centroid(&cells, 8, 64);
            assert!(dets.len() <= cells.len());
            assert!(cells.len() <= grid * grid);
            for d in &dets {
                assert!(d.cx >= 0.0 && d.cx < 64.0);
                assert!(d.cy >= 0.0 && d.cy < 64.0);
                assert!(d.confidence > 0.0 && d.confidence <= 1.0);
            }
        }
    }

    #[test]
    fn fresh_model_on_blank_image_detects_nothing() {
        let cfg = crate::model::ModelConfig::new(32, 1).unwrap();
        let model = crate::model::build_fomo(&cfg, 2).unwrap();
        let image = Tensor::filled([1, 32, 32, 3], 0.5);
        let dets = detect(&model, &image, 0.5).unwrap();
        assert!(dets.is_empty());
    }

    #[test]
    fn detection_line_format() {
        let d = Detection {
            class_id: 1,
            confidence: 0.87314,
            cx: 12.0,
            cy: 20.0,
            cell_count: 2,
        };
        assert_eq!(detection_line("img_000.ppm", "roi", &d), "img_000.ppm roi 0.8731 12.00 20.00 2");
    }
}
