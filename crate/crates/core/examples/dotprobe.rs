// scratch: which i16 dot shape vectorizes (deleted before release)
use std::time::Instant;

#[inline(never)]
fn dot_zip(a: &[i16], b: &[i16]) -> i32 {
    a.iter().zip(b).map(|(&x, &y)| x as i32 * y as i32).sum()
}

#[inline(never)]
fn dot_index(a: &[i16], b: &[i16]) -> i32 {
    let n = a.len().min(b.len());
    let mut acc = 0i32;
    for i in 0..n {
        acc += a[i] as i32 * b[i] as i32;
    }
    acc
}

#[inline(never)]
fn dot_chunks(a: &[i16], b: &[i16]) -> i32 {
    let mut acc = [0i32; 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (xa, xb) in ca.by_ref().zip(cb.by_ref()) {
        for k in 0..8 {
            acc[k] += xa[k] as i32 * xb[k] as i32;
        }
    }
    let mut tail = 0i32;
    for (&x, &y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += x as i32 * y as i32;
    }
    acc.iter().sum::<i32>() + tail
}

#[inline(never)]
fn broadcast_axpy(v: i16, w: &[i16], acc: &mut [i32]) {
    let v = v as i32;
    for (a, &x) in acc.iter_mut().zip(w) {
        *a += v * x as i32;
    }
}

fn bench(name: &str, f: impl Fn() -> i64, macs: u64) {
    // warmup
    for _ in 0..3 {
        std::hint::black_box(f());
    }
    let t0 = Instant::now();
    let mut sink = 0i64;
    const REPS: usize = 2000;
    for _ in 0..REPS {
        sink ^= f();
    }
    let dt = t0.elapsed().as_secs_f64();
    std::hint::black_box(sink);
    println!(
        "{name:<16} {:.2} GMAC/s",
        macs as f64 * REPS as f64 / dt / 1e9
    );
}

fn main() {
    let n = 96usize;
    let rows = 1024usize;
    let a: Vec<i16> = (0..n * rows).map(|i| (i % 251) as i16 - 125).collect();
    let b: Vec<i16> = (0..n * rows).map(|i| (i % 127) as i16 - 63).collect();
    let macs = (n * rows) as u64;

    bench("zip", || {
        let mut s = 0i64;
        for r in 0..rows {
            s += dot_zip(&a[r * n..(r + 1) * n], &b[r * n..(r + 1) * n]) as i64;
        }
        s
    }, macs);
    bench("index", || {
        let mut s = 0i64;
        for r in 0..rows {
            s += dot_index(&a[r * n..(r + 1) * n], &b[r * n..(r + 1) * n]) as i64;
        }
        s
    }, macs);
    bench("chunks8", || {
        let mut s = 0i64;
        for r in 0..rows {
            s += dot_chunks(&a[r * n..(r + 1) * n], &b[r * n..(r + 1) * n]) as i64;
        }
        s
    }, macs);
    bench("broadcast", || {
        let mut acc = vec![0i32; n];
        for r in 0..rows {
            broadcast_axpy(a[r * n], &b[r * n..(r + 1) * n], &mut acc);
        }
        acc.iter().map(|&v| v as i64).sum()
    }, macs);

    // f32 comparison
    let fa: Vec<f32> = a.iter().map(|&v| v as f32).collect();
    let fb: Vec<f32> = b.iter().map(|&v| v as f32).collect();
    bench("f32-broadcast", || {
        let mut acc = vec![0.0f32; n];
        for r in 0..rows {
            let v = fa[r * n];
            for (x, &w) in acc.iter_mut().zip(&fb[r * n..(r + 1) * n]) {
                *x += v * w;
            }
        }
        acc.iter().map(|&v| v as i64).sum()
    }, macs);
}
