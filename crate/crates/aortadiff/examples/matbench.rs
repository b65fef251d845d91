//! Rough single-core GEMM throughput probe for conv-shaped problems.
use ndarray::{linalg::general_mat_mul, Array2};
use std::time::Instant;

fn bench(m: usize, k: usize, n: usize, reps: usize) {
    let a = Array2::<f32>::from_elem((m, k), 1.001);
    let b = Array2::<f32>::from_elem((k, n), 0.999);
    let mut c = Array2::<f32>::zeros((m, n));
    general_mat_mul(1.0, &a, &b, 0.0, &mut c);
    let t = Instant::now();
    for _ in 0..reps {
        general_mat_mul(1.0, &a, &b, 0.0, &mut c);
    }
    let dt = t.elapsed().as_secs_f64();
    let gflops = 2.0 * (m * k * n * reps) as f64 / dt / 1e9;
    println!(
        "{m}x{k}x{n}: {gflops:.2} GFLOP/s ({:.3} ms/op)",
        dt * 1000.0 / reps as f64
    );
}

fn main() {
    bench(32, 18, 4096, 50); // stem 2->32 @64x64
    bench(32, 288, 4096, 50); // 32->32 @64x64
    bench(64, 576, 1024, 50); // 64->64 @32x32
    bench(128, 1152, 256, 50); // 128->128 @16x16
    bench(16, 144, 4096, 50); // 16->16 @64x64
    bench(12, 108, 4096, 100); // 12->12 @64x64
    bench(8, 72, 4096, 100); // 8->8 @64x64
    bench(512, 512, 512, 20);
}
