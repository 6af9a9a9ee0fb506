//! Corridor exploration: a robot sweeps a camera along an unrolled tunnel
//! wall, runs the detector each frame, and the "look close" emphasis function
//! slows down and zooms toward detected regions of interest.
//!
//! Approach is modeled as zoom: the camera window shrinks toward the
//! detection centroid, which is the optical effect that matters (more pixels
//! on target). `roi_frames` counts frames where a region of interest covers
//! at least a quarter of the window, the proxy for reconstruction density.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataio::{contrast_color_pair, draw_ellipse, fill_background, BackgroundStyle, Ellipse};
use crate::decode::{detect, Detection};
use crate::error::{Error, Result};
use crate::model::FomoModel;
use crate::tensor::Tensor;

/// Window coverage fraction above which a frame counts as "on" a region of
/// interest.
pub const ROI_COVERAGE_THRESHOLD: f64 = 0.25;

#[derive(Debug, Clone, PartialEq)]
pub struct RoiRecord {
    pub class_id: usize,
    /// Centroid in strip coordinates (x along the corridor).
    pub cx: f64,
    pub cy: f64,
    pub radius: f64,
}

/// The unrolled tunnel wall and the regions of interest painted onto it.
#[derive(Debug, Clone)]
pub struct Corridor {
    /// Strip image `(1, height, length, 3)`.
    pub strip: Tensor,
    pub rois: Vec<RoiRecord>,
    pub class_names: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorridorConfig {
    pub length: usize,
    pub height: usize,
    pub n_rois: usize,
    /// Normalized color distance between RoIs and the wall.
    pub contrast: f64,
    pub roi_radius: (f64, f64),
    pub seed: u64,
}

impl Default for CorridorConfig {
    fn default() -> Self {
        CorridorConfig {
            length: 2000,
            height: 96,
            n_rois: 3,
            contrast: 0.9,
            roi_radius: (12.0, 14.0),
            seed: 42,
        }
    }
}

impl Corridor {
    /// Deterministic corridor: noisy wall texture with `n_rois` discs spread
    /// along the strip, fully inside it.
    pub fn generate(config: &CorridorConfig) -> Result<Corridor> {
        if config.height < 16 || config.length < 4 * config.height {
            return Err(Error::Config(
                "corridor must be at least 16 px tall and 4 heights long".into(),
            ));
        }
        let (rlo, rhi) = config.roi_radius;
        if rlo < 2.0 || rhi < rlo || 2.0 * rhi + 4.0 >= config.height as f64 {
            return Err(Error::Config(format!(
                "roi radius range {:?} does not fit a strip of height {}",
                config.roi_radius, config.height
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (bg, roi_color) = contrast_color_pair(&mut rng, config.contrast);
        let mut strip = Tensor::zeros(1, config.height, config.length, 3);
        fill_background(&mut strip, bg, BackgroundStyle::Noise, &mut rng);

        let mut rois = Vec::with_capacity(config.n_rois);
        if config.n_rois > 0 {
            // one RoI per equal strip segment, clear of the ends
            let seg = (config.length as f64 - 2.0 * config.height as f64) / config.n_rois as f64;
            for i in 0..config.n_rois {
                let radius = rng.gen_range(rlo..=rhi);
                let x0 = config.height as f64 + seg * i as f64 + radius + 2.0;
                let x1 = config.height as f64 + seg * (i as f64 + 1.0) - radius - 2.0;
                if x1 <= x0 {
                    return Err(Error::Config("corridor too short for the RoI count".into()));
                }
                let cx = rng.gen_range(x0..x1);
                let cy = rng.gen_range(config.height as f64 / 3.0..config.height as f64 * 2.0 / 3.0);
                draw_ellipse(
                    &mut strip,
                    &Ellipse { cx, cy, rx: radius, ry: radius },
                    roi_color,
                    BackgroundStyle::Noise,
                    &mut rng,
                );
                rois.push(RoiRecord {
                    class_id: 1,
                    cx,
                    cy,
                    radius,
                });
            }
        }
        Ok(Corridor {
            strip,
            rois,
            class_names: vec!["roi".to_string()],
        })
    }

    pub fn height(&self) -> usize {
        self.strip.h()
    }

    pub fn length(&self) -> usize {
        self.strip.w()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Mode {
    Cruise,
    Emphasis {
        remaining: u32,
        zoom_start: f64,
        target_x: f64,
        target_y: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RobotState {
    /// Camera center along the strip, pixels.
    pub position: f64,
    pub center_y: f64,
    /// 1 = full-height view; larger values shrink the window.
    pub zoom: f64,
    /// Effective speed, px/frame.
    pub speed: f64,
    pub cruise_speed: f64,
    pub mode: Mode,
    /// Frames left before a new emphasis may trigger.
    pub cooldown: u32,
}

impl RobotState {
    pub fn start(corridor_h: f64, cruise_speed: f64) -> Self {
        RobotState {
            position: 0.0,
            center_y: corridor_h / 2.0,
            zoom: 1.0,
            speed: cruise_speed,
            cruise_speed,
            mode: Mode::Cruise,
            cooldown: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EfParams {
    pub tau: f32,
    pub approach_zoom: f64,
    pub dwell_frames: u32,
    pub slow_factor: f64,
    pub cruise_speed: f64,
}

impl Default for EfParams {
    fn default() -> Self {
        EfParams {
            tau: 0.5,
            approach_zoom: 2.5,
            dwell_frames: 12,
            slow_factor: 0.3,
            cruise_speed: 6.0,
        }
    }
}

/// The square camera window in strip coordinates, clamped inside the strip.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ViewWindow {
    pub left: f64,
    pub top: f64,
    pub side: f64,
}

pub fn view_window(corridor: &Corridor, state: &RobotState) -> ViewWindow {
    let h = corridor.height() as f64;
    let len = corridor.length() as f64;
    let side = h / state.zoom.clamp(1.0, 4.0);
    let cx = state.position.clamp(side / 2.0, len - side / 2.0);
    let cy = state.center_y.clamp(side / 2.0, h - side / 2.0);
    ViewWindow {
        left: cx - side / 2.0,
        top: cy - side / 2.0,
        side,
    }
}

/// Crop the camera window and resample it to the model input size.
pub fn render_frame(corridor: &Corridor, state: &RobotState, model_input: usize) -> Tensor {
    let view = view_window(corridor, state);
    crate::dataio::crop_resize(
        &corridor.strip,
        view.top,
        view.left,
        view.side,
        view.side,
        model_input,
        model_input,
    )
}

/// Anything that turns a rendered frame into detections. The window geometry
/// is provided so reference detectors can project ground truth; model-backed
/// detectors ignore it.
pub trait FrameDetector {
    fn detect_frame(&self, frame: &Tensor, view: &ViewWindow) -> Result<Vec<Detection>>;
    fn model_input(&self) -> usize;
}

pub struct ModelDetector<'a> {
    pub model: &'a FomoModel,
    pub tau: f32,
}

impl FrameDetector for ModelDetector<'_> {
    fn detect_frame(&self, frame: &Tensor, _view: &ViewWindow) -> Result<Vec<Detection>> {
        detect(self.model, frame, self.tau)
    }

    fn model_input(&self) -> usize {
        self.model.config.input_size
    }
}

/// Reference detector that reads the corridor geometry instead of pixels:
/// reports every RoI whose centroid falls inside the window with confidence
/// 1.0. Used to validate the emphasis loop independently of any model.
pub struct OracleDetector<'a> {
    pub corridor: &'a Corridor,
    pub input_size: usize,
}

impl FrameDetector for OracleDetector<'_> {
    fn detect_frame(&self, _frame: &Tensor, view: &ViewWindow) -> Result<Vec<Detection>> {
        let scale = self.input_size as f64 / view.side;
        let mut dets: Vec<Detection> = self
            .corridor
            .rois
            .iter()
            .filter(|r| {
                r.cx >= view.left
                    && r.cx < view.left + view.side
                    && r.cy >= view.top
                    && r.cy < view.top + view.side
            })
            .map(|r| Detection {
                class_id: r.class_id,
                confidence: 1.0,
                cx: (r.cx - view.left) * scale,
                cy: (r.cy - view.top) * scale,
                cell_count: 1,
            })
            .collect();
        dets.sort_by(|a, b| a.cx.partial_cmp(&b.cx).unwrap_or(std::cmp::Ordering::Equal));
        Ok(dets)
    }

    fn model_input(&self) -> usize {
        self.input_size
    }
}

/// One cruise step: advance, ease the window back to mid-height, tick the
/// trigger cooldown.
fn cruise_step(state: &RobotState, corridor_h: f64, dwell: f64) -> RobotState {
    let mut next = *state;
    next.position += state.speed;
    next.center_y += (corridor_h / 2.0 - state.center_y) / dwell;
    next.cooldown = state.cooldown.saturating_sub(1);
    next
}

fn emphasis_step(state: &RobotState, params: &EfParams) -> RobotState {
    let Mode::Emphasis {
        remaining,
        zoom_start,
        target_x,
        target_y,
    } = state.mode
    else {
        return *state;
    };
    let mut next = *state;
    let dwell = params.dwell_frames as f64;
    next.speed = params.slow_factor * params.cruise_speed;
    next.position += next.speed + (target_x - state.position) / dwell;
    next.center_y += (target_y - state.center_y) / dwell;
    let done = params.dwell_frames - remaining + 1;
    next.zoom = (zoom_start + (params.approach_zoom - zoom_start) * done as f64 / dwell).clamp(1.0, 4.0);
    if remaining <= 1 {
        next.mode = Mode::Cruise;
        next.zoom = 1.0;
        next.speed = params.cruise_speed;
        next.cooldown = params.dwell_frames;
    } else {
        next.mode = Mode::Emphasis {
            remaining: remaining - 1,
            zoom_start,
            target_x,
            target_y,
        };
    }
    next
}

/// The "look close" emphasis function: a confident detection flips the robot
/// into emphasis mode — speed multiplied by `slow_factor`, zoom ramping
/// linearly toward `approach_zoom` over `dwell_frames`, window recentering
/// toward the detection — after which it returns to cruise. `frame_size` is
/// the pixel size of the frame the detections were decoded from.
pub fn ef_look_close(
    detections: &[Detection],
    state: &RobotState,
    view: &ViewWindow,
    params: &EfParams,
    corridor_h: f64,
    frame_size: usize,
) -> RobotState {
    if let Mode::Emphasis { .. } = state.mode {
        return emphasis_step(state, params);
    }
    let trigger = detections
        .iter()
        .filter(|d| d.confidence >= params.tau)
        .max_by(|a, b| a.confidence.partial_cmp(&b.confidence).unwrap_or(std::cmp::Ordering::Equal));
    match trigger {
        Some(d) if state.cooldown == 0 => {
            let scale = view.side / frame_size as f64;
            let target_x = view.left + d.cx * scale;
            let target_y = view.top + d.cy * scale;
            let mut next = *state;
            next.mode = Mode::Emphasis {
                remaining: params.dwell_frames,
                zoom_start: state.zoom,
                target_x,
                target_y,
            };
            emphasis_step(&next, params)
        }
        _ => cruise_step(state, corridor_h, params.dwell_frames as f64),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameLog {
    pub frame: u32,
    pub position: f64,
    pub zoom: f64,
    pub center_y: f64,
    pub emphasis: bool,
    pub detections: usize,
    pub best_confidence: f32,
    pub roi_coverage: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimReport {
    pub total_frames: u32,
    pub emphasis_frames: u32,
    /// Frames where some RoI covers at least a quarter of the window.
    pub roi_frames: u32,
    pub per_roi_dwell: Vec<u32>,
    pub trajectory: Vec<FrameLog>,
}

impl SimReport {
    /// Structured text document, one key per line.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("total_frames {}\n", self.total_frames));
        s.push_str(&format!("emphasis_frames {}\n", self.emphasis_frames));
        s.push_str(&format!("roi_frames {}\n", self.roi_frames));
        for (i, d) in self.per_roi_dwell.iter().enumerate() {
            s.push_str(&format!("roi {i} dwell {d}\n"));
        }
        s
    }

    /// Per-frame CSV trajectory for plotting.
    pub fn trajectory_csv(&self) -> String {
        let mut s = String::from("frame,position,zoom,center_y,emphasis,detections,best_confidence,roi_coverage\n");
        for f in &self.trajectory {
            s.push_str(&format!(
                "{},{:.3},{:.4},{:.3},{},{},{:.4},{:.4}\n",
                f.frame,
                f.position,
                f.zoom,
                f.center_y,
                f.emphasis as u8,
                f.detections,
                f.best_confidence,
                f.roi_coverage
            ));
        }
        s
    }
}

/// Fraction of the window covered by one RoI disc, on a fixed 160x160
/// midpoint sample grid (deterministic; accurate to well under a percent at
/// corridor scales).
pub fn roi_coverage(roi: &RoiRecord, view: &ViewWindow) -> f64 {
    const GRID: usize = 160;
    let mut inside = 0usize;
    let step = view.side / GRID as f64;
    for iy in 0..GRID {
        let y = view.top + (iy as f64 + 0.5) * step;
        let dy = y - roi.cy;
        for ix in 0..GRID {
            let x = view.left + (ix as f64 + 0.5) * step;
            let dx = x - roi.cx;
            if dx * dx + dy * dy <= roi.radius * roi.radius {
                inside += 1;
            }
        }
    }
    inside as f64 / (GRID * GRID) as f64
}

/// Run one episode until the camera reaches the strip end. Per frame:
/// render, detect, and (with the emphasis function enabled) apply
/// `ef_look_close`; otherwise cruise straight through.
pub fn run_episode(
    corridor: &Corridor,
    detector: &dyn FrameDetector,
    ef_enabled: bool,
    params: &EfParams,
) -> Result<SimReport> {
    let h = corridor.height() as f64;
    let len = corridor.length() as f64;
    let model_input = detector.model_input();
    let mut state = RobotState::start(h, params.cruise_speed);
    let mut report = SimReport {
        total_frames: 0,
        emphasis_frames: 0,
        roi_frames: 0,
        per_roi_dwell: vec![0; corridor.rois.len()],
        trajectory: Vec::new(),
    };
    let mut active_roi: Option<usize> = None;
    let max_frames = ((len / params.cruise_speed) * 40.0) as u32 + 1000;

    while state.position < len - h / 2.0 {
        if report.total_frames >= max_frames {
            return Err(Error::Internal(format!(
                "episode exceeded {max_frames} frames without reaching the strip end"
            )));
        }
        let view = view_window(corridor, &state);
        let frame = render_frame(corridor, &state, model_input);
        let detections = detector.detect_frame(&frame, &view)?;

        let coverage = corridor
            .rois
            .iter()
            .map(|r| roi_coverage(r, &view))
            .fold(0.0f64, f64::max);
        if coverage >= ROI_COVERAGE_THRESHOLD {
            report.roi_frames += 1;
        }

        let next = if ef_enabled {
            ef_look_close(&detections, &state, &view, params, h, model_input)
        } else {
            cruise_step(&state, h, params.dwell_frames as f64)
        };
        let triggered = matches!(state.mode, Mode::Cruise) && matches!(next.mode, Mode::Emphasis { .. });
        if triggered {
            if let Mode::Emphasis { target_x, .. } = next.mode {
                active_roi = corridor
                    .rois
                    .iter()
                    .enumerate()
                    .min_by(|(_, a), (_, b)| {
                        let da = (a.cx - target_x).abs();
                        let db = (b.cx - target_x).abs();
                        da.partial_cmp(&db).unwrap_or(std::cmp::Ordering::Equal)
                    })
                    .map(|(i, _)| i);
            }
        }
        // the frame counts as emphasis if the robot acted in emphasis mode,
        // the trigger frame included
        let acted_emphasis = triggered || matches!(state.mode, Mode::Emphasis { .. });
        if acted_emphasis {
            report.emphasis_frames += 1;
            if let Some(i) = active_roi {
                report.per_roi_dwell[i] += 1;
            }
        }
        report.trajectory.push(FrameLog {
            frame: report.total_frames,
            position: state.position,
            zoom: state.zoom,
            center_y: state.center_y,
            emphasis: acted_emphasis,
            detections: detections.len(),
            best_confidence: detections
                .iter()
                .map(|d| d.confidence)
                .fold(0.0f32, f32::max),
            roi_coverage: coverage,
        });
        report.total_frames += 1;
        if matches!(next.mode, Mode::Cruise) {
            active_roi = None;
        }
        state = next;
    }
    Ok(report)
}

/// Episode wrapper that checks the model's classes against the corridor's.
pub fn run_model_episode(
    corridor: &Corridor,
    model: &FomoModel,
    tau: f32,
    ef_enabled: bool,
    params: &EfParams,
) -> Result<SimReport> {
    if model.class_names != corridor.class_names {
        return Err(Error::Config(format!(
            "model classes {:?} do not match corridor classes {:?}",
            model.class_names, corridor.class_names
        )));
    }
    let detector = ModelDetector { model, tau };
    run_episode(corridor, &detector, ef_enabled, params)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_corridor(n_rois: usize, seed: u64) -> Corridor {
        Corridor::generate(&CorridorConfig {
            length: 1200,
            height: 96,
            n_rois,
            contrast: 0.9,
            roi_radius: (11.0, 12.0),
            seed,
        })
        .unwrap()
    }

    struct SilentDetector(usize);
    impl FrameDetector for SilentDetector {
        fn detect_frame(&self, _f: &Tensor, _v: &ViewWindow) -> Result<Vec<Detection>> {
            Ok(vec![])
        }
        fn model_input(&self) -> usize {
            self.0
        }
    }

    #[test]
    fn corridor_generation_is_deterministic_and_in_bounds() {
        let a = test_corridor(3, 7);
        let b = test_corridor(3, 7);
        assert_eq!(a.strip.data(), b.strip.data());
        assert_eq!(a.rois, b.rois);
        for r in &a.rois {
            assert!(r.cx - r.radius >= 0.0 && r.cx + r.radius <= a.length() as f64);
            assert!(r.cy - r.radius >= 0.0 && r.cy + r.radius <= a.height() as f64);
        }
    }

    #[test]
    fn zoom_one_window_spans_full_height() {
        let c = test_corridor(0, 1);
        let state = RobotState::start(96.0, 6.0);
        let view = view_window(&c, &state);
        assert_eq!(view.side, 96.0);
        assert_eq!(view.top, 0.0);
    }

    #[test]
    fn rendering_is_pure() {
        let c = test_corridor(2, 3);
        let mut state = RobotState::start(96.0, 6.0);
        state.position = 300.0;
        state.zoom = 1.7;
        let a = render_frame(&c, &state, 64);
        let b = render_frame(&c, &state, 64);
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn window_is_clamped_at_strip_ends() {
        let c = test_corridor(0, 1);
        let mut state = RobotState::start(96.0, 6.0);
        state.position = -50.0;
        let view = view_window(&c, &state);
        assert_eq!(view.left, 0.0);
        state.position = 1e9;
        let view = view_window(&c, &state);
        assert_eq!(view.left + view.side, c.length() as f64);
    }

    #[test]
    fn zoomed_window_quadruples_roi_coverage() {
        let c = test_corridor(0, 1);
        let roi = RoiRecord {
            class_id: 1,
            cx: 600.0,
            cy: 48.0,
            radius: 12.0,
        };
        let mut state = RobotState::start(96.0, 6.0);
        state.position = 600.0;
        let cov1 = roi_coverage(&roi, &view_window(&c, &state));
        state.zoom = 2.0;
        let cov2 = roi_coverage(&roi, &view_window(&c, &state));
        assert!(
            (cov2 / cov1 - 4.0).abs() < 0.1,
            "coverage ratio {} at zoom 2",
            cov2 / cov1
        );
    }

    #[test]
    fn cruise_without_detections_only_advances() {
        let params = EfParams::default();
        let c = test_corridor(0, 1);
        let mut state = RobotState::start(96.0, 6.0);
        state.position = 500.0;
        let view = view_window(&c, &state);
        let next = ef_look_close(&[], &state, &view, &params, 96.0, 64);
        assert_eq!(next.position, 506.0);
        assert_eq!(next.zoom, state.zoom);
        assert_eq!(next.speed, state.speed);
        assert_eq!(next.mode, Mode::Cruise);
    }

    #[test]
    fn detection_slows_to_slow_factor_times_cruise() {
        let params = EfParams::default();
        let c = test_corridor(0, 1);
        let mut state = RobotState::start(96.0, 6.0);
        state.position = 500.0;
        let view = view_window(&c, &state);
        let det = Detection {
            class_id: 1,
            confidence: 0.9,
            cx: 32.0,
            cy: 32.0,
            cell_count: 1,
        };
        let next = ef_look_close(&[det], &state, &view, &params, 96.0, 64);
        assert!((next.speed - 0.3 * 6.0).abs() < 1e-12);
        assert!(matches!(next.mode, Mode::Emphasis { .. }));
        assert!(next.zoom > 1.0);
    }

    #[test]
    fn left_edge_detection_recenters_leftward() {
        let params = EfParams::default();
        let c = test_corridor(0, 1);
        let mut state = RobotState::start(96.0, 6.0);
        state.position = 500.0;
        let view = view_window(&c, &state);
        let det = Detection {
            class_id: 1,
            confidence: 0.9,
            cx: 0.5,
            cy: 32.0,
            cell_count: 1,
        };
        let next = ef_look_close(&[det], &state, &view, &params, 96.0, 64);
        assert!(
            next.position < state.position,
            "window center moved right: {} -> {}",
            state.position,
            next.position
        );
    }

    #[test]
    fn below_threshold_detection_does_not_trigger() {
        let params = EfParams::default();
        let c = test_corridor(0, 1);
        let mut state = RobotState::start(96.0, 6.0);
        state.position = 500.0;
        let view = view_window(&c, &state);
        let det = Detection {
            class_id: 1,
            confidence: 0.3,
            cx: 32.0,
            cy: 32.0,
            cell_count: 1,
        };
        let next = ef_look_close(&[det], &state, &view, &params, 96.0, 64);
        assert_eq!(next.mode, Mode::Cruise);
    }

    #[test]
    fn zero_roi_corridor_gives_identical_on_off_runs() {
        let c = test_corridor(0, 5);
        let det = SilentDetector(64);
        let params = EfParams::default();
        let on = run_episode(&c, &det, true, &params).unwrap();
        let off = run_episode(&c, &det, false, &params).unwrap();
        assert_eq!(on, off);
        assert_eq!(on.emphasis_frames, 0);
    }

    #[test]
    fn ef_off_never_emphasizes() {
        let c = test_corridor(3, 6);
        let oracle = OracleDetector {
            corridor: &c,
            input_size: 64,
        };
        let report = run_episode(&c, &oracle, false, &EfParams::default()).unwrap();
        assert_eq!(report.emphasis_frames, 0);
        assert!(report.trajectory.iter().all(|f| !f.emphasis));
    }

    #[test]
    fn oracle_detector_dwells_on_every_roi() {
        let c = test_corridor(3, 8);
        let oracle = OracleDetector {
            corridor: &c,
            input_size: 64,
        };
        let params = EfParams::default();
        let report = run_episode(&c, &oracle, true, &params).unwrap();
        assert_eq!(report.per_roi_dwell.len(), 3);
        for (i, &dwell) in report.per_roi_dwell.iter().enumerate() {
            assert!(
                dwell >= params.dwell_frames,
                "roi {i} dwelled only {dwell} frames"
            );
        }
        assert!(report.emphasis_frames >= 3 * params.dwell_frames);
        // slowing down never shortens the episode
        let off = run_episode(&c, &oracle, false, &params).unwrap();
        assert!(report.total_frames >= off.total_frames);
        assert!(report.roi_frames > off.roi_frames);
    }

    #[test]
    fn episodes_are_deterministic() {
        let c = test_corridor(3, 9);
        let oracle = OracleDetector {
            corridor: &c,
            input_size: 64,
        };
        let a = run_episode(&c, &oracle, true, &EfParams::default()).unwrap();
        let b = run_episode(&c, &oracle, true, &EfParams::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn class_mismatch_is_rejected() {
        let c = test_corridor(1, 2);
        let cfg = crate::model::ModelConfig::new(64, 2).unwrap();
        let model = crate::model::build_fomo(&cfg, 1).unwrap();
        assert!(matches!(
            run_model_episode(&c, &model, 0.5, true, &EfParams::default()),
            Err(Error::Config(_))
        ));
    }
}
