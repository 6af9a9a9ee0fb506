// scratch: training feasibility probe (deleted before release)
use lvx_core::dataio::{gen_synthetic, BackgroundStyle, LoadedDataset, SynthConfig};
use lvx_core::eval::evaluate;
use lvx_core::model::{build_fomo, ModelConfig};
use lvx_core::train::{train, TrainConfig};

thread_local! {
    static RLO: std::cell::Cell<f64> = const { std::cell::Cell::new(3.0) };
    static OBJMAX: std::cell::Cell<usize> = const { std::cell::Cell::new(3) };
}

fn gen(dir: &std::path::Path, n: usize, contrast: f64, seed: u64) -> LoadedDataset {
    gen_synthetic(
        &SynthConfig {
            image_size: 64,
            n_images: n,
            objects_per_image: (1, OBJMAX.with(|c| c.get())),
            radius_range: (RLO.with(|c| c.get()), 9.0),
            background: BackgroundStyle::Noise,
            contrast,
            seed,
        },
        dir,
    )
    .unwrap();
    LoadedDataset::load(dir, 64).unwrap()
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let contrast: f64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(0.9);
    let batch: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(16);
    let epochs: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(50);
    let lr: f32 = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(1e-4);
    let rlo: f64 = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(3.0);
    RLO.with(|c| c.set(rlo));
    let bw: f32 = args.get(6).map(|s| s.parse().unwrap()).unwrap_or(0.1);
    let objmax: usize = args.get(7).map(|s| s.parse().unwrap()).unwrap_or(3);
    OBJMAX.with(|c| c.set(objmax));

    let tmp = tempfile::tempdir().unwrap();
    let train_dir = tmp.path().join("train");
    let test_dir = tmp.path().join("test");
    let t0 = std::time::Instant::now();
    let train_ds = gen(&train_dir, 120, contrast, 42);
    let test_ds = gen(&test_dir, 30, contrast, 43);
    println!("datasets generated in {:.1}s", t0.elapsed().as_secs_f64());

    let cfg = ModelConfig::new(64, 1).unwrap();
    let model = build_fomo(&cfg, 42).unwrap();
    let tc = TrainConfig {
        learning_rate: lr,
        batch_size: batch,
        epochs,
        seed: 42,
        background_weight: bw,
        ..TrainConfig::default()
    };
    let t0 = std::time::Instant::now();
    let (best, history) = train(model, &train_ds, &tc, |s| {
        if s.epoch % 5 == 0 || s.epoch <= 3 {
            println!(
                "epoch {:3} loss {:.5} val_f1 {:.4} [{:.1}s]",
                s.epoch,
                s.train_loss,
                s.val_f1,
                t0.elapsed().as_secs_f64()
            );
        }
    })
    .unwrap();
    println!("trained in {:.1}s", t0.elapsed().as_secs_f64());
    let report = evaluate(&best, &test_ds, 0.5, 1.0).unwrap();
    println!(
        "contrast {contrast} batch {batch} epochs {epochs} lr {lr} bw {bw} rlo {rlo} objmax {objmax}: test F1 {:.4} P {:.4} R {:.4} acc {:.4}",
        report.macro_f1, report.macro_precision, report.macro_recall, report.accuracy
    );
    let best_val = history.iter().map(|h| h.val_f1).fold(0.0f64, f64::max);
    println!("best val f1 {best_val:.4}");

    // miss diagnostics
    use lvx_core::decode::detect;
    use lvx_core::model::forward;
    let mut missed = 0;
    let mut fps = 0;
    for s in &test_ds.samples {
        let dets = detect(&best, &s.image, 0.5).unwrap();
        let hm = forward(&best, &s.image).unwrap();
        for o in &s.objects {
            let hit = dets.iter().any(|d| {
                d.class_id == o.class_id
                    && ((d.cx - o.cx).powi(2) + (d.cy - o.cy).powi(2)).sqrt() <= 8.0
            });
            if !hit {
                missed += 1;
                // max foreground prob over the 2x2 cell patch around the centroid
                let row = (o.cy / 8.0).floor() as usize;
                let col = (o.cx / 8.0).floor() as usize;
                let mut pmax = 0.0f32;
                for dr in -1i64..=1 {
                    for dc in -1i64..=1 {
                        let r = (row as i64 + dr).clamp(0, 7) as usize;
                        let c = (col as i64 + dc).clamp(0, 7) as usize;
                        pmax = pmax.max(hm.probs.at(0, r, c, 1));
                    }
                }
                let near = dets.iter().map(|d| ((d.cx - o.cx).powi(2) + (d.cy - o.cy).powi(2)).sqrt())
                    .fold(f64::INFINITY, f64::min);
                println!("MISS {} obj ({:.1},{:.1}) local_pmax {:.3} nearest_det {:.1}px", s.id, o.cx, o.cy, pmax, near);
            }
        }
        for d in &dets {
            let hit = s.objects.iter().any(|o| {
                d.class_id == o.class_id
                    && ((d.cx - o.cx).powi(2) + (d.cy - o.cy).powi(2)).sqrt() <= 8.0
            });
            if !hit { fps += 1; println!("FP   {} at ({:.1},{:.1}) conf {:.3} cells {}", s.id, d.cx, d.cy, d.confidence, d.cell_count); }
        }
    }
    println!("missed {missed} fps {fps}");

    // quantization parity
    use lvx_core::quant::{calibrate, quantize_model};
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
    let mut idx: Vec<usize> = (0..train_ds.samples.len()).collect();
    idx.shuffle(&mut rng);
    let calib: Vec<lvx_core::tensor::Tensor> = idx[..32.min(idx.len())]
        .iter()
        .map(|&i| train_ds.samples[i].image.clone())
        .collect();
    let stats = calibrate(&best, &calib).unwrap();
    let qmodel = quantize_model(&best, &stats).unwrap();
    let qreport = evaluate(&qmodel, &test_ds, 0.5, 1.0).unwrap();
    println!(
        "int8 test F1 {:.4} (delta {:.4})",
        qreport.macro_f1,
        (qreport.macro_f1 - report.macro_f1).abs()
    );
    // per-cell argmax agreement on calibration images
    let mut agree = 0usize;
    let mut cells = 0usize;
    for img in &calib {
        let hf = forward(&best, img).unwrap();
        let hq = forward(&qmodel, img).unwrap();
        for r in 0..hf.grid_h {
            for c in 0..hf.grid_w {
                let am = |h: &lvx_core::model::GridHeatmap| {
                    (0..h.probs.shape()[3])
                        .max_by(|&a, &b| h.probs.at(0, r, c, a).partial_cmp(&h.probs.at(0, r, c, b)).unwrap())
                        .unwrap()
                };
                if am(&hf) == am(&hq) {
                    agree += 1;
                }
                cells += 1;
            }
        }
    }
    println!("argmax agreement {:.4}", agree as f64 / cells as f64);

    // corridor simulation
    use lvx_core::sim::{run_model_episode, Corridor, CorridorConfig, EfParams};
    let corridor = Corridor::generate(&CorridorConfig {
        roi_radius: (12.0, 14.0),
        ..CorridorConfig::default()
    })
    .unwrap();
    let t0 = std::time::Instant::now();
    let on = run_model_episode(&corridor, &best, 0.5, true, &EfParams::default()).unwrap();
    let off = run_model_episode(&corridor, &best, 0.5, false, &EfParams::default()).unwrap();
    println!(
        "sim f32: EF-on roi_frames {} emphasis {} total {} | EF-off roi_frames {} total {} [{:.1}s]",
        on.roi_frames, on.emphasis_frames, on.total_frames, off.roi_frames, off.total_frames,
        t0.elapsed().as_secs_f64()
    );
    println!("per-roi dwell {:?}", on.per_roi_dwell);
}
