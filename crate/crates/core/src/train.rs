//! Training loop, evaluation, and metrics emission shared by the CLI and
//! the acceptance experiments.
//!
//! Batch samples are independent; gradients are computed per sample (on a
//! worker pool when available) and reduced in sample order, so a fixed seed
//! and configuration reproduce the loss trajectory bit for bit regardless
//! of thread count.

use crate::data::{Dataset, FeatStats, Sample};
use crate::error::{Error, Result};
use crate::loss::{total_loss_tape, LossReport, LossWeights};
use crate::mesh::{mesh_gradient, GradCoeffs, GradField, Mesh};
use crate::model::ModelState;
use crate::optim::{OneCycle, OptimizerState};
use crate::rng::rng_substream;
use crate::scalar::Scalar;
use crate::tape::{FlopClass, FlopCounter, Tape};
use crate::tensor::Tensor;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::time::Instant;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub max_lr: f64,
    pub warmup_frac: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Evaluate on the test split every this many epochs (0: only at end).
    pub eval_every: usize,
    /// Write a checkpoint every this many epochs (0: only at end).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch: 4,
            max_lr: 5e-4,
            warmup_frac: 0.3,
            weight_decay: 1e-4,
            seed: 0,
            eval_every: 10,
            checkpoint_every: 0,
        }
    }
}

/// Evaluation summary over a sample set.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub mean_rel_l2: f64,
    pub per_sample: Vec<f64>,
    pub wall_secs: f64,
    pub param_count: usize,
    /// Analytic multiply-add count of one forward pass.
    pub flop_estimate: u64,
}

#[derive(Clone, Debug, Serialize)]
struct StepLine<'a> {
    kind: &'static str,
    step: usize,
    epoch: usize,
    lr: f64,
    #[serde(flatten)]
    loss: &'a LossReport,
}

#[derive(Clone, Debug, Serialize)]
struct EvalLine {
    kind: &'static str,
    epoch: usize,
    test_rel_l2: f64,
}

/// JSON-lines metrics writer; `null()` drops everything.
pub struct MetricsSink {
    out: Option<std::io::BufWriter<std::fs::File>>,
}

impl MetricsSink {
    pub fn to_file(path: &Path) -> Result<Self> {
        Ok(MetricsSink { out: Some(std::io::BufWriter::new(std::fs::File::create(path)?)) })
    }

    pub fn null() -> Self {
        MetricsSink { out: None }
    }

    fn log<T: Serialize>(&mut self, line: &T) -> Result<()> {
        if let Some(w) = self.out.as_mut() {
            use std::io::Write;
            serde_json::to_writer(&mut *w, line)?;
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        if let Some(w) = self.out.as_mut() {
            use std::io::Write;
            w.flush()?;
        }
        Ok(())
    }
}

/// Everything precomputed once per dataset before stepping.
struct Prepared<F: Scalar> {
    coords_norm: Tensor<F>,
    coeffs: GradCoeffs<F>,
    train_feats: Vec<Tensor<F>>,
    train_grads: Vec<GradField<F>>,
}

fn normalize_coords<F: Scalar>(mesh: &Mesh<F>) -> Tensor<F> {
    // Map the physical box onto [-1, 1]^2 for the chart and lift inputs.
    let xs: Vec<f64> = mesh.coords.data.iter().step_by(2).map(|v| v.to_f64_c()).collect();
    let ys: Vec<f64> = mesh.coords.data.iter().skip(1).step_by(2).map(|v| v.to_f64_c()).collect();
    let (x0, x1) = xs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |a, &v| (a.0.min(v), a.1.max(v)));
    let (y0, y1) = ys.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |a, &v| (a.0.min(v), a.1.max(v)));
    let sx = if x1 > x0 { 2.0 / (x1 - x0) } else { 1.0 };
    let sy = if y1 > y0 { 2.0 / (y1 - y0) } else { 1.0 };
    let data = mesh
        .coords
        .data
        .chunks(2)
        .flat_map(|p| {
            [
                F::c((p[0].to_f64_c() - x0) * sx - 1.0),
                F::c((p[1].to_f64_c() - y0) * sy - 1.0),
            ]
        })
        .collect();
    Tensor { shape: mesh.coords.shape.clone(), data, grad: None }
}

fn prepare<F: Scalar>(data: &Dataset<F>) -> Result<Prepared<F>> {
    let coords_norm = normalize_coords(&data.mesh);
    let coeffs = data.mesh.grad_coeffs();
    let train_feats: Vec<Tensor<F>> =
        data.train.iter().map(|s| data.stats.normalize(&s.feats)).collect();
    let train_grads: Vec<GradField<F>> = data
        .train
        .iter()
        .map(|s| mesh_gradient(&s.target, &data.mesh))
        .collect::<Result<_>>()?;
    Ok(Prepared { coords_norm, coeffs, train_feats, train_grads })
}

/// Loss + gradients of one sample (the binding maps parameters to the
/// gradient table).
#[allow(clippy::type_complexity)]
fn sample_pass<F: Scalar>(
    model: &ModelState<F>,
    prep: &Prepared<F>,
    sample: &Sample<F>,
    feats: &Tensor<F>,
    tgrad: &GradField<F>,
    grid: (usize, usize),
    w: &LossWeights,
) -> Result<(LossReport, crate::params::Binding, crate::tape::Gradients<F>)> {
    let mut tape = Tape::new();
    tape.check_finite = false;
    let binding = model.params.bind(&mut tape)?;
    let cv = tape.constant(prep.coords_norm.clone())?;
    let fv = tape.constant(feats.clone())?;
    let out = model.forward(&mut tape, &binding, cv, Some(fv), grid, None)?;
    let sl = total_loss_tape(&mut tape, out.u_hat, out.q_hat, &sample.target, tgrad, &prep.coeffs, w)?;
    let report = LossReport {
        total: tape.value(sl.total).item().to_f64_c(),
        val: tape.value(sl.val).item().to_f64_c(),
        grad: tape.value(sl.grad).item().to_f64_c(),
        flux: tape.value(sl.flux).item().to_f64_c(),
        cons: tape.value(sl.cons).item().to_f64_c(),
        valid_nodes: sl.valid_nodes,
    };
    if !report.total.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss: {report:?}")));
    }
    let total = sl.total;
    let grads = tape.backward(total)?;
    Ok((report, binding, grads))
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainStats {
    pub steps: usize,
    pub epochs: usize,
    pub wall_secs: f64,
    pub final_train_loss: f64,
    pub final_test_rel_l2: f64,
}

/// Train `model` in place. Checkpoints (when requested) and the final model
/// go to `ckpt_dir`.
pub fn train_model<F: Scalar>(
    model: &mut ModelState<F>,
    data: &Dataset<F>,
    w: &LossWeights,
    tc: &TrainConfig,
    metrics: &mut MetricsSink,
    ckpt_dir: Option<&Path>,
) -> Result<TrainStats> {
    w.validate()?;
    if data.train.is_empty() {
        return Err(Error::Dataset("empty training split".into()));
    }
    if data.feat_dim != model.cfg.feat_dim {
        return Err(Error::Config(format!(
            "dataset has {} feature channels, model expects {}",
            data.feat_dim, model.cfg.feat_dim
        )));
    }
    let start = Instant::now();
    let grid = (data.mesh.h, data.mesh.w);
    let prep = prepare(data)?;
    let batch = tc.batch.max(1);
    let steps_per_epoch = data.train.len().div_ceil(batch);
    let schedule = OneCycle {
        max_lr: tc.max_lr,
        total_steps: (tc.epochs * steps_per_epoch).max(1),
        warmup_frac: tc.warmup_frac,
    };
    let mut opt = OptimizerState::new(model.params.all(), schedule, tc.weight_decay);
    let mut step = 0usize;
    let mut last_loss = f64::NAN;

    for epoch in 0..tc.epochs {
        let order = {
            let mut rng = rng_substream(tc.seed, "shuffle", epoch as u64);
            crate::rng::shuffled_indices(&mut rng, data.train.len())
        };
        for chunk in order.chunks(batch) {
            type PassOut<F> =
                (LossReport, crate::params::Binding, crate::tape::Gradients<F>);
            let results: Vec<Result<PassOut<F>>> = chunk
                .par_iter()
                .map(|&i| {
                    sample_pass(
                        model,
                        &prep,
                        &data.train[i],
                        &prep.train_feats[i],
                        &prep.train_grads[i],
                        grid,
                        w,
                    )
                })
                .collect();
            model.params.zero_grads();
            for p in model.params.all_mut() {
                p.tensor.alloc_grad();
            }
            let scale = F::c(1.0 / chunk.len() as f64);
            let mut mean = LossReport::default();
            for r in results {
                let (report, binding, grads) = r.map_err(|e| match e {
                    Error::Numeric(msg) => Error::Numeric(format!("step {step}: {msg}")),
                    other => other,
                })?;
                mean.total += report.total / chunk.len() as f64;
                mean.val += report.val / chunk.len() as f64;
                mean.grad += report.grad / chunk.len() as f64;
                mean.flux += report.flux / chunk.len() as f64;
                mean.cons += report.cons / chunk.len() as f64;
                mean.valid_nodes = report.valid_nodes;
                model.params.accumulate_grads(&binding, &grads, scale);
            }
            let lr = opt.current_lr();
            opt.adamw_step(model.params.all_mut())?;
            metrics.log(&StepLine { kind: "step", step, epoch, lr, loss: &mean })?;
            last_loss = mean.total;
            step += 1;
        }

        let do_eval = tc.eval_every > 0 && (epoch + 1) % tc.eval_every == 0;
        if do_eval {
            let er = evaluate(model, &data.mesh, &data.test, &data.stats)?;
            metrics.log(&EvalLine { kind: "eval", epoch, test_rel_l2: er.mean_rel_l2 })?;
        }
        if let Some(dir) = ckpt_dir {
            if tc.checkpoint_every > 0 && (epoch + 1) % tc.checkpoint_every == 0 {
                model.save(&dir.join(format!("ckpt_epoch_{:04}.cato1", epoch + 1)))?;
            }
        }
    }

    if let Some(dir) = ckpt_dir {
        model.save(&dir.join("model.cato1"))?;
    }
    let er = evaluate(model, &data.mesh, &data.test, &data.stats)?;
    metrics.log(&EvalLine { kind: "eval", epoch: tc.epochs, test_rel_l2: er.mean_rel_l2 })?;
    metrics.flush()?;
    Ok(TrainStats {
        steps: step,
        epochs: tc.epochs,
        wall_secs: start.elapsed().as_secs_f64(),
        final_train_loss: last_loss,
        final_test_rel_l2: er.mean_rel_l2,
    })
}

/// Mean relative L2 error over a sample set (the evaluation metric), plus
/// parameter and flop counts.
pub fn evaluate<F: Scalar>(
    model: &ModelState<F>,
    mesh: &Mesh<F>,
    samples: &[Sample<F>],
    stats: &FeatStats,
) -> Result<EvalReport> {
    let start = Instant::now();
    let coords_norm = normalize_coords(mesh);
    let grid = (mesh.h, mesh.w);
    let per_sample: Vec<f64> = samples
        .par_iter()
        .map(|s| -> Result<f64> {
            let feats = stats.normalize(&s.feats);
            let (u_hat, _, _) = model.predict(&coords_norm, Some(&feats), grid)?;
            Ok(crate::loss::rel_l2(&u_hat.data, &s.target.data).to_f64_c())
        })
        .collect::<Result<_>>()?;
    let mean = per_sample.iter().sum::<f64>() / per_sample.len().max(1) as f64;
    Ok(EvalReport {
        mean_rel_l2: mean,
        per_sample,
        wall_secs: start.elapsed().as_secs_f64(),
        param_count: model.param_count(),
        flop_estimate: forward_flops(model, mesh)?.total(),
    })
}

/// Mean gradient-matching MSE of the scalar prediction over a sample set.
pub fn eval_grad_mse<F: Scalar>(
    model: &ModelState<F>,
    mesh: &Mesh<F>,
    samples: &[Sample<F>],
    stats: &FeatStats,
) -> Result<f64> {
    let coords_norm = normalize_coords(mesh);
    let grid = (mesh.h, mesh.w);
    let mut acc = 0.0;
    for s in samples {
        let feats = stats.normalize(&s.feats);
        let (u_hat, _, _) = model.predict(&coords_norm, Some(&feats), grid)?;
        let ugrid = Tensor::new(vec![mesh.h, mesh.w], u_hat.data)?;
        acc += crate::loss::loss_grad(&ugrid, &s.target, mesh)?.to_f64_c();
    }
    Ok(acc / samples.len().max(1) as f64)
}

/// Analytic per-forward flop counts by category (one dry run, no backward).
pub fn forward_flops<F: Scalar>(model: &ModelState<F>, mesh: &Mesh<F>) -> Result<FlopCounter> {
    let coords_norm = normalize_coords(mesh);
    let n = mesh.nodes();
    let feats = Tensor::zeros(vec![n, model.cfg.feat_dim]);
    let mut tape = Tape::new();
    let binding = model.params.bind(&mut tape)?;
    let cv = tape.constant(coords_norm)?;
    let fv = if model.cfg.feat_dim > 0 { Some(tape.constant(feats)?) } else { None };
    model.forward(&mut tape, &binding, cv, fv, (mesh.h, mesh.w), None)?;
    Ok(tape.flops().clone())
}

/// Attention-category flops of one forward pass; the quantity whose growth
/// across grid sizes separates axial from dense attention.
pub fn attention_flops<F: Scalar>(model: &ModelState<F>, mesh: &Mesh<F>) -> Result<u64> {
    Ok(forward_flops(model, mesh)?.class(FlopClass::Attention))
}
