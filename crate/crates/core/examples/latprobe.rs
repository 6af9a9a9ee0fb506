// scratch: host latency ordering probe (deleted before release)
use lvx_core::model::{build_fomo, ModelConfig};
use lvx_core::profile::{bench_latency, count_macs, plan_memory, probe_image, DEFAULT_THROUGHPUT_MACS_PER_S};
use lvx_core::quant::{calibrate, quantize_model};

fn main() {
    for size in [32usize, 64, 96] {
        let cfg = ModelConfig::new(size, 1).unwrap();
        let f32_model = build_fomo(&cfg, 42).unwrap();
        let imgs: Vec<_> = (0..4).map(|i| probe_image(size, i)).collect();
        let stats = calibrate(&f32_model, &imgs).unwrap();
        let int8_model = quantize_model(&f32_model, &stats).unwrap();
        let img = probe_image(size, 9);
        let rf = bench_latency(&f32_model, &img, 200, DEFAULT_THROUGHPUT_MACS_PER_S).unwrap();
        let rq = bench_latency(&int8_model, &img, 200, DEFAULT_THROUGHPUT_MACS_PER_S).unwrap();
        println!(
            "{size:>2}: f32 median {:.3} ms | int8 median {:.3} ms | macs {} | proj {:.0} ms | PRO f32 {} int8 {}",
            rf.median_ms,
            rq.median_ms,
            count_macs(&f32_model),
            rq.mcu_projection_ms,
            plan_memory(&f32_model).peak_bytes,
            plan_memory(&int8_model).peak_bytes,
        );
    }
}
