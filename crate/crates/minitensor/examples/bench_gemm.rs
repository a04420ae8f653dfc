use minitensor::{matmul, Tensor};
use std::time::Instant;

fn main() {
    // f32 path, shaped like a training step's big projections
    let rows = 256 * 21;
    let a = Tensor::<f32>::parameter(&[rows, 64], vec![0.5; rows * 64]);
    let w = Tensor::<f32>::parameter(&[64, 256], vec![0.01; 64 * 256]);
    let start = Instant::now();
    let iters = 50;
    for _ in 0..iters {
        let c = matmul(&a, &w).unwrap();
        std::hint::black_box(c.to_vec().len());
    }
    let dt = start.elapsed().as_secs_f64();
    let flops = 2.0 * rows as f64 * 64.0 * 256.0 * iters as f64;
    println!("f32 gemm: {:.1} GFlop/s", flops / dt / 1e9);

    let a = Tensor::<f64>::parameter(&[rows, 64], vec![0.5; rows * 64]);
    let w = Tensor::<f64>::parameter(&[64, 256], vec![0.01; 64 * 256]);
    let start = Instant::now();
    for _ in 0..iters {
        let c = matmul(&a, &w).unwrap();
        std::hint::black_box(c.to_vec().len());
    }
    let dt = start.elapsed().as_secs_f64();
    println!("f64 gemm: {:.1} GFlop/s", flops / dt / 1e9);
}
