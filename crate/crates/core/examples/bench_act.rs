use cato_core::tape::Tape;
use cato_core::tensor::Tensor;
use std::time::Instant;

fn main() {
    let n = 1_000_000;
    let xs: Vec<f64> = (0..n).map(|i| 0.001 * (i % 4000) as f64 - 2.0).collect();
    // taped gelu throughput
    for _ in 0..3 {
        let mut tape = Tape::new();
        tape.check_finite = false;
        let x = tape.leaf(Tensor::from_vec(xs.clone())).unwrap();
        let t0 = Instant::now();
        let _ = tape.gelu(x).unwrap();
        println!("taped gelu: {:.1} ns/eval", t0.elapsed().as_nanos() as f64 / n as f64);
    }
    for _ in 0..3 {
        let t0 = Instant::now();
        let mut acc = 0.0;
        for &x in &xs { acc += cato_core::fastmath::fast_tanh(x); }
        println!("fast_tanh: {:.1} ns/eval ({acc:.1})", t0.elapsed().as_nanos() as f64 / n as f64);
    }
    for _ in 0..3 {
        let t0 = Instant::now();
        let mut acc = 0.0;
        for &x in &xs { acc += cato_core::fastmath::fast_exp(x); }
        println!("fast_exp: {:.1} ns/eval ({acc:.1})", t0.elapsed().as_nanos() as f64 / n as f64);
    }
}
