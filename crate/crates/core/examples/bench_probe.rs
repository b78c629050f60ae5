// quick throughput probe
use cato_core::data::load_dataset;
use cato_core::loss::{total_loss_tape, LossWeights};
use cato_core::mesh::mesh_gradient;
use cato_core::model::{CatoConfig, ModelState};
use cato_core::tape::Tape;
use cato_core::tensor::{matmul_acc, Tensor};
use std::time::Instant;

fn main() {
    // raw matmul throughput: 1024x32 @ 32x32
    let a = vec![1.0f64; 1024 * 32];
    let b = vec![1.0f64; 32 * 32];
    let mut c = vec![0.0f64; 1024 * 32];
    let t0 = Instant::now();
    for _ in 0..1000 {
        c.iter_mut().for_each(|v| *v = 0.0);
        matmul_acc(&a, &b, &mut c, 1024, 32, 32);
    }
    let dt = t0.elapsed().as_secs_f64();
    let gf = 1000.0 * 2.0 * 1024.0 * 32.0 * 32.0 / dt / 1e9;
    println!("matmul_acc 1024x32x32: {gf:.2} Gflop/s");

    let data = load_dataset::<f64>(std::path::Path::new("/tmp/darcy32")).unwrap();
    let cfg = CatoConfig { feat_dim: 1, ..CatoConfig::desk() };
    let model = ModelState::<f64>::new(cfg, 0).unwrap();
    let coords = {
        let d: Vec<f64> = data.mesh.coords.data.iter().map(|v| 2.0 * v - 1.0).collect();
        Tensor::new(vec![1024, 2], d).unwrap()
    };
    let feats = data.stats.normalize(&data.train[0].feats);
    let target = &data.train[0].target;
    let tgrad = mesh_gradient(target, &data.mesh).unwrap();
    let coeffs = data.mesh.grad_coeffs();
    let w = LossWeights::darcy();

    // forward only
    let t0 = Instant::now();
    let reps = 20;
    for _ in 0..reps {
        let mut tape = Tape::new();
        tape.check_finite = false;
        let binding = model.params.bind(&mut tape).unwrap();
        let cv = tape.constant(coords.clone()).unwrap();
        let fv = tape.constant(feats.clone()).unwrap();
        let _ = model.forward(&mut tape, &binding, cv, Some(fv), (32, 32), None).unwrap();
    }
    println!("forward only: {:.1} ms", t0.elapsed().as_secs_f64() * 1000.0 / reps as f64);

    // forward + loss + backward
    let t0 = Instant::now();
    for _ in 0..reps {
        let mut tape = Tape::new();
        tape.check_finite = false;
        tape.enable_profile();
        let binding = model.params.bind(&mut tape).unwrap();
        let cv = tape.constant(coords.clone()).unwrap();
        let fv = tape.constant(feats.clone()).unwrap();
        let out = model.forward(&mut tape, &binding, cv, Some(fv), (32, 32), None).unwrap();
        let sl = total_loss_tape(&mut tape, out.u_hat, out.q_hat, target, &tgrad, &coeffs, &w).unwrap();
        let total = sl.total;
        let prof = std::mem::take(&mut tape.profile);
        let mut tape = tape;
        tape.profile = prof;
        let grads = tape.backward(total).unwrap();
        let _ = grads;
        let _ = binding;
    }
    println!("forward+loss+backward: {:.1} ms", t0.elapsed().as_secs_f64() * 1000.0 / reps as f64);

    // profiled single run
    {
        let mut tape = Tape::new();
        tape.check_finite = false;
        tape.enable_profile();
        let binding = model.params.bind(&mut tape).unwrap();
        let cv = tape.constant(coords.clone()).unwrap();
        let fv = tape.constant(feats.clone()).unwrap();
        let out = model.forward(&mut tape, &binding, cv, Some(fv), (32, 32), None).unwrap();
        let sl = total_loss_tape(&mut tape, out.u_hat, out.q_hat, target, &tgrad, &coeffs, &w).unwrap();
        // move profile out before backward consumes tape
        let reps2 = 5;
        let mut agg: std::collections::HashMap<&'static str, (u64, f64)> = Default::default();
        for _ in 0..reps2 {
            let mut tape = Tape::new();
            tape.check_finite = false;
            tape.enable_profile();
            let binding = model.params.bind(&mut tape).unwrap();
            let cv = tape.constant(coords.clone()).unwrap();
            let fv = tape.constant(feats.clone()).unwrap();
            let out = model.forward(&mut tape, &binding, cv, Some(fv), (32, 32), None).unwrap();
            let sl2 = total_loss_tape(&mut tape, out.u_hat, out.q_hat, target, &tgrad, &coeffs, &w).unwrap();
            let prof_fw = tape.profile.take().unwrap();
            for (k, n, ms) in prof_fw.dump() { let e = agg.entry(k).or_default(); e.0 += n; e.1 += ms; }
            tape.enable_profile();
            let grads = tape.backward(sl2.total);
            // profile moved into tape; we can't get it back after consume — restructure: backward consumes tape...
            let _ = grads;
        }
        let mut rows: Vec<_> = agg.into_iter().collect();
        rows.sort_by(|a, b| b.1.1.partial_cmp(&a.1.1).unwrap());
        println!("--- forward per-op (x{reps2}) ---");
        for (k, (n, ms)) in rows.iter().take(20) {
            println!("{k:18} n={n:5} {:.2} ms", ms);
        }
        let _ = sl;
        let _ = out;
    }
}
