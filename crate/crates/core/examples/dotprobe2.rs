// scratch: short-dot and register-blocked variants (deleted before release)
use std::time::Instant;

#[inline(never)]
fn dot1(a: &[i16], b: &[i16]) -> i32 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = 0i32;
    for i in 0..n {
        acc += a[i] as i32 * b[i] as i32;
    }
    acc
}

#[inline(never)]
fn dot4(a: &[i16], b0: &[i16], b1: &[i16], b2: &[i16], b3: &[i16]) -> [i32; 4] {
    let n = a.len();
    let (b0, b1, b2, b3) = (&b0[..n], &b1[..n], &b2[..n], &b3[..n]);
    let mut s = [0i32; 4];
    for i in 0..n {
        let v = a[i] as i32;
        s[0] += v * b0[i] as i32;
        s[1] += v * b1[i] as i32;
        s[2] += v * b2[i] as i32;
        s[3] += v * b3[i] as i32;
    }
    s
}

fn bench(name: &str, f: impl Fn() -> i64, macs: u64, reps: usize) {
    for _ in 0..3 {
        std::hint::black_box(f());
    }
    let t0 = Instant::now();
    let mut sink = 0i64;
    for _ in 0..reps {
        sink ^= f();
    }
    let dt = t0.elapsed().as_secs_f64();
    std::hint::black_box(sink);
    println!("{name:<24} {:6.2} GMAC/s", macs as f64 * reps as f64 / dt / 1e9);
}

fn main() {
    for &n in &[12usize, 16, 24, 72, 96, 144] {
        let rows = 4096usize / n.min(64);
        let a: Vec<i16> = (0..n * rows).map(|i| (i % 251) as i16 - 125).collect();
        let b: Vec<i16> = (0..n * rows * 4).map(|i| (i % 127) as i16 - 63).collect();
        let macs = (n * rows) as u64;
        bench(&format!("dot1 n={n}"), || {
            let mut s = 0i64;
            for r in 0..rows {
                s += dot1(&a[r * n..(r + 1) * n], &b[r * n..(r + 1) * n]) as i64;
            }
            s
        }, macs, 3000);
        bench(&format!("dot4 n={n}"), || {
            let mut s = 0i64;
            for r in 0..rows {
                let a_row = &a[r * n..(r + 1) * n];
                let base = r * n * 4;
                let q = dot4(
                    a_row,
                    &b[base..base + n],
                    &b[base + n..base + 2 * n],
                    &b[base + 2 * n..base + 3 * n],
                    &b[base + 3 * n..base + 4 * n],
                );
                s += (q[0] + q[1] + q[2] + q[3]) as i64;
            }
            s
        }, macs * 4, 1500);
    }
}
