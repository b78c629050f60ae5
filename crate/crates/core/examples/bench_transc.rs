use std::time::Instant;

fn main() {
    let xs: Vec<f64> = (0..1_000_000).map(|i| 0.001 * (i % 4000) as f64 - 2.0).collect();
    let mut acc = 0.0f64;

    let t0 = Instant::now();
    for &x in &xs { acc += x.exp(); }
    println!("exp:  {:.1} ns/eval (acc {acc:.1})", t0.elapsed().as_nanos() as f64 / 1e6);

    let t0 = Instant::now();
    for &x in &xs { acc += x.tanh(); }
    println!("tanh: {:.1} ns/eval (acc {acc:.1})", t0.elapsed().as_nanos() as f64 / 1e6);

    let t0 = Instant::now();
    for &x in &xs { acc += x.sin(); }
    println!("sin:  {:.1} ns/eval (acc {acc:.1})", t0.elapsed().as_nanos() as f64 / 1e6);
}
