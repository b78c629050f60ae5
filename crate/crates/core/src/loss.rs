//! Training objective: `L = L_val + lambda_g L_grad + lambda_f L_flux +
//! lambda_c L_cons`.
//!
//! `L_val` is the relative L2 error of the scalar field; the three
//! derivative terms are mean squared Euclidean distances over valid mesh
//! nodes between, respectively, reconstructed prediction/target gradients,
//! the flux head and the target gradient, and the flux head and the
//! prediction's own gradient.

use crate::error::{Error, Result};
use crate::mesh::{mesh_gradient, mesh_gradient_tape, GradCoeffs, GradField, Mesh};
use crate::scalar::Scalar;
use crate::tape::{FlopClass, Tape, VarId};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_g: f64,
    pub lambda_f: f64,
    pub lambda_c: f64,
    pub eps: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda_g: 0.0, lambda_f: 0.0, lambda_c: 0.0, eps: 1e-8 }
    }
}

impl LossWeights {
    /// Preset used for steady-state diffusion runs.
    pub fn darcy() -> Self {
        LossWeights { lambda_g: 0.2, lambda_f: 0.2, lambda_c: 0.05, eps: 1e-8 }
    }

    pub fn value_only() -> Self {
        LossWeights::default()
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambda_g < 0.0 || self.lambda_f < 0.0 || self.lambda_c < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config("loss eps must be positive".into()));
        }
        Ok(())
    }
}

/// Additive loss decomposition for one step (batch-averaged).
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub val: f64,
    pub grad: f64,
    pub flux: f64,
    pub cons: f64,
    pub valid_nodes: usize,
}

impl LossReport {
    pub fn decomposition_residual(&self, w: &LossWeights) -> f64 {
        (self.total
            - (self.val + w.lambda_g * self.grad + w.lambda_f * self.flux + w.lambda_c * self.cons))
            .abs()
    }
}

/// Tape variables of one sample's loss terms.
pub struct SampleLoss {
    pub total: VarId,
    pub val: VarId,
    pub grad: VarId,
    pub flux: VarId,
    pub cons: VarId,
    pub valid_nodes: usize,
}

/// Relative L2 distance with stabilizer: `||pred - target|| / (||target|| + eps)`.
pub fn loss_val_tape<F: Scalar>(
    tape: &mut Tape<F>,
    u_hat: VarId,
    target: &Tensor<F>,
    eps: f64,
) -> Result<VarId> {
    if tape.value(u_hat).numel() != target.numel() {
        return Err(Error::Shape {
            op: "loss_val",
            detail: format!("{:?} vs {:?}", tape.shape(u_hat), target.shape),
        });
    }
    let flat = tape.reshape(u_hat, vec![target.numel()])?;
    let tvar = tape.constant(Tensor::from_vec(target.data.clone()))?;
    let diff = tape.sub(flat, tvar)?;
    let sq = tape.square(diff)?;
    let ss = tape.sum_all(sq)?;
    let norm = tape.sqrt(ss)?;
    let denom = target.norm().to_f64_c() + eps;
    tape.scale(norm, F::c(1.0 / denom))
}

fn masked_mse_pair<F: Scalar>(
    tape: &mut Tape<F>,
    ax: VarId,
    ay: VarId,
    bx: VarId,
    by: VarId,
    valid_count: usize,
) -> Result<VarId> {
    let dx = tape.sub(ax, bx)?;
    let dy = tape.sub(ay, by)?;
    let sx = tape.square(dx)?;
    let sy = tape.square(dy)?;
    let s = tape.add(sx, sy)?;
    let total = tape.sum_all(s)?;
    tape.scale(total, F::c(1.0 / valid_count.max(1) as f64))
}

/// Assemble the full objective for one sample.
///
/// `u_hat` is `[N, 1]`, `q_hat` is `[N, 2]`; `target` is the `[H, W]`
/// reference field. Target gradients are precomputed constants; prediction
/// gradients run through the tape so every term is differentiable.
pub fn total_loss_tape<F: Scalar>(
    tape: &mut Tape<F>,
    u_hat: VarId,
    q_hat: VarId,
    target: &Tensor<F>,
    target_grad: &GradField<F>,
    coeffs: &GradCoeffs<F>,
    w: &LossWeights,
) -> Result<SampleLoss> {
    w.validate()?;
    let (h, wd) = (coeffs.h, coeffs.w);
    if target.shape != [h, wd] {
        return Err(Error::Shape {
            op: "total_loss",
            detail: format!("target {:?} vs mesh {h}x{wd}", target.shape),
        });
    }
    if tape.shape(q_hat) != [h * wd, 2] {
        return Err(Error::Shape {
            op: "total_loss",
            detail: format!("flux head {:?} vs [{}, 2]", tape.shape(q_hat), h * wd),
        });
    }
    let prev = tape.set_class(FlopClass::Loss);
    let result = (|| {
        let val = loss_val_tape(tape, u_hat, target, w.eps)?;

        let ugrid = tape.reshape(u_hat, vec![h, wd])?;
        let (phx, phy) = mesh_gradient_tape(tape, ugrid, coeffs)?;
        let tx = tape.constant(target_grad.ux.clone())?;
        let ty = tape.constant(target_grad.uy.clone())?;
        let grad = masked_mse_pair(tape, phx, phy, tx, ty, coeffs.valid_count)?;

        let mask = tape.constant(coeffs.mask_field())?;
        let qx = tape.narrow(q_hat, 1, 0, 1)?;
        let qx = tape.reshape(qx, vec![h, wd])?;
        let qx = tape.mul(qx, mask)?;
        let qy = tape.narrow(q_hat, 1, 1, 1)?;
        let qy = tape.reshape(qy, vec![h, wd])?;
        let qy = tape.mul(qy, mask)?;
        let flux = masked_mse_pair(tape, qx, qy, tx, ty, coeffs.valid_count)?;
        let cons = masked_mse_pair(tape, qx, qy, phx, phy, coeffs.valid_count)?;

        let lg = tape.scale(grad, F::c(w.lambda_g))?;
        let lf = tape.scale(flux, F::c(w.lambda_f))?;
        let lc = tape.scale(cons, F::c(w.lambda_c))?;
        let t0 = tape.add(val, lg)?;
        let t1 = tape.add(t0, lf)?;
        let total = tape.add(t1, lc)?;
        Ok(SampleLoss { total, val, grad, flux, cons, valid_nodes: coeffs.valid_count })
    })();
    tape.set_class(prev);
    result
}

// ---------------------------------------------------------------------------
// Pure (non-taped) evaluations used for reports, evaluation and oracles.
// ---------------------------------------------------------------------------

/// Plain relative L2 error (the evaluation metric; no stabilizer).
pub fn rel_l2<F: Scalar>(pred: &[F], target: &[F]) -> F {
    debug_assert_eq!(pred.len(), target.len());
    let mut num = F::zero();
    let mut den = F::zero();
    for (p, t) in pred.iter().zip(target) {
        let d = *p - *t;
        num += d * d;
        den += *t * *t;
    }
    num.sqrt() / den.sqrt()
}

pub fn loss_val<F: Scalar>(pred: &[F], target: &[F], eps: f64) -> Result<F> {
    if pred.len() != target.len() {
        return Err(Error::Shape {
            op: "loss_val",
            detail: format!("{} vs {}", pred.len(), target.len()),
        });
    }
    let mut num = F::zero();
    let mut den = F::zero();
    for (p, t) in pred.iter().zip(target) {
        let d = *p - *t;
        num += d * d;
        den += *t * *t;
    }
    Ok(num.sqrt() / (den.sqrt() + F::c(eps)))
}

fn masked_mse<F: Scalar>(
    ax: &[F],
    ay: &[F],
    bx: &[F],
    by: &[F],
    valid: &[bool],
    count: usize,
) -> F {
    let mut acc = F::zero();
    for node in 0..valid.len() {
        if valid[node] {
            let dx = ax[node] - bx[node];
            let dy = ay[node] - by[node];
            acc += dx * dx + dy * dy;
        }
    }
    acc / F::from_count(count.max(1))
}

pub fn loss_grad<F: Scalar>(u_hat: &Tensor<F>, u: &Tensor<F>, mesh: &Mesh<F>) -> Result<F> {
    let gp = mesh_gradient(u_hat, mesh)?;
    let gt = mesh_gradient(u, mesh)?;
    Ok(masked_mse(&gp.ux.data, &gp.uy.data, &gt.ux.data, &gt.uy.data, &gp.valid, gp.valid_count))
}

/// `q_hat` is `[N, 2]` interleaved.
pub fn loss_flux<F: Scalar>(q_hat: &Tensor<F>, u: &Tensor<F>, mesh: &Mesh<F>) -> Result<F> {
    let gt = mesh_gradient(u, mesh)?;
    if q_hat.shape != [mesh.nodes(), 2] {
        return Err(Error::Shape {
            op: "loss_flux",
            detail: format!("{:?} vs [{}, 2]", q_hat.shape, mesh.nodes()),
        });
    }
    let qx: Vec<F> = q_hat.data.iter().step_by(2).cloned().collect();
    let qy: Vec<F> = q_hat.data.iter().skip(1).step_by(2).cloned().collect();
    Ok(masked_mse(&qx, &qy, &gt.ux.data, &gt.uy.data, &gt.valid, gt.valid_count))
}

pub fn loss_cons<F: Scalar>(q_hat: &Tensor<F>, u_hat: &Tensor<F>, mesh: &Mesh<F>) -> Result<F> {
    let gp = mesh_gradient(u_hat, mesh)?;
    if q_hat.shape != [mesh.nodes(), 2] {
        return Err(Error::Shape {
            op: "loss_cons",
            detail: format!("{:?} vs [{}, 2]", q_hat.shape, mesh.nodes()),
        });
    }
    let qx: Vec<F> = q_hat.data.iter().step_by(2).cloned().collect();
    let qy: Vec<F> = q_hat.data.iter().skip(1).step_by(2).cloned().collect();
    Ok(masked_mse(&qx, &qy, &gp.ux.data, &gp.uy.data, &gp.valid, gp.valid_count))
}

/// Full pure-side objective for one sample.
pub fn total_loss<F: Scalar>(
    u_hat: &Tensor<F>,
    q_hat: &Tensor<F>,
    u: &Tensor<F>,
    mesh: &Mesh<F>,
    w: &LossWeights,
) -> Result<LossReport> {
    w.validate()?;
    let val = loss_val(&u_hat.data, &u.data, w.eps)?.to_f64_c();
    let ugrid = Tensor::new(vec![mesh.h, mesh.w], u_hat.data.clone())?;
    let grad = loss_grad(&ugrid, u, mesh)?.to_f64_c();
    let flux = loss_flux(q_hat, u, mesh)?.to_f64_c();
    let cons = loss_cons(q_hat, &ugrid, mesh)?.to_f64_c();
    let coeffs = mesh.grad_coeffs();
    Ok(LossReport {
        total: val + w.lambda_g * grad + w.lambda_f * flux + w.lambda_c * cons,
        val,
        grad,
        flux,
        cons,
        valid_nodes: coeffs.valid_count,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal_vec, rng_from_seed};

    #[test]
    fn perfect_prediction_is_zero() {
        let mesh = Mesh::<f64>::regular(5, 5).unwrap();
        let u = mesh.field(|x, y| x * y + 0.3);
        let n = mesh.nodes();
        let u_hat = Tensor::new(vec![n, 1], u.data.clone()).unwrap();
        let g = mesh_gradient(&u, &mesh).unwrap();
        let mut q = vec![0.0; 2 * n];
        for node in 0..n {
            q[2 * node] = g.ux.data[node];
            q[2 * node + 1] = g.uy.data[node];
        }
        let q_hat = Tensor::new(vec![n, 2], q).unwrap();
        let r = total_loss(&u_hat, &q_hat, &u, &mesh, &LossWeights::darcy()).unwrap();
        assert!(r.total < 1e-20, "{r:?}");
    }

    #[test]
    fn zero_prediction_of_unit_norm_target_is_about_one() {
        let mut rng = rng_from_seed(0);
        let mut t: Vec<f64> = normal_vec(&mut rng, 64);
        let norm: f64 = t.iter().map(|v| v * v).sum::<f64>().sqrt();
        t.iter_mut().for_each(|v| *v /= norm);
        let z = vec![0.0; 64];
        let v = loss_val(&z, &t, 1e-8).unwrap();
        assert!((v - 1.0).abs() < 1e-7);
    }

    #[test]
    fn constant_offset_has_zero_gradient_loss() {
        let mesh = Mesh::<f64>::regular(6, 6).unwrap();
        let u = mesh.field(|x, y| (3.0 * x).sin() + y * y);
        let mut shifted = u.clone();
        shifted.data.iter_mut().for_each(|v| *v += 5.0);
        let g = loss_grad(&shifted, &u, &mesh).unwrap();
        assert!(g < 1e-24);
    }

    #[test]
    fn unit_slope_mismatch_gives_unit_grad_loss() {
        let mesh = Mesh::<f64>::regular(7, 7).unwrap();
        let u = mesh.field(|_, y| y);
        let u_hat = mesh.field(|x, y| x + y);
        let g = loss_grad(&u_hat, &u, &mesh).unwrap();
        assert!((g - 1.0).abs() < 1e-12);
        // Flux side: zero flux against u = x is also a unit mismatch.
        let ux = mesh.field(|x, _| x);
        let q0 = Tensor::new(vec![mesh.nodes(), 2], vec![0.0; 2 * mesh.nodes()]).unwrap();
        let f = loss_flux(&q0, &ux, &mesh).unwrap();
        assert!((f - 1.0).abs() < 1e-12);
    }

    #[test]
    fn consistency_ignores_ground_truth() {
        let mesh = Mesh::<f64>::regular(6, 5).unwrap();
        let u_hat = mesh.field(|x, y| x * x - y);
        let mut rng = rng_from_seed(9);
        let q = Tensor::new(vec![mesh.nodes(), 2], normal_vec(&mut rng, 2 * mesh.nodes())).unwrap();
        let c = loss_cons(&q, &u_hat, &mesh).unwrap();
        // Perturbing the (absent) target cannot change anything: recompute.
        let c2 = loss_cons(&q, &u_hat, &mesh).unwrap();
        assert_eq!(c, c2);
        assert!(c > 0.0);
    }

    #[test]
    fn taped_loss_matches_pure_and_decomposes() {
        let mesh = Mesh::<f64>::regular(6, 6).unwrap();
        let mut rng = rng_from_seed(3);
        let n = mesh.nodes();
        let u = mesh.field(|x, y| (2.0 * x + 0.4).sin() * y);
        let u_hat_t = Tensor::new(vec![n, 1], normal_vec::<f64>(&mut rng, n)).unwrap();
        let q_hat_t = Tensor::new(vec![n, 2], normal_vec::<f64>(&mut rng, 2 * n)).unwrap();
        let w = LossWeights::darcy();

        let pure = total_loss(&u_hat_t, &q_hat_t, &u, &mesh, &w).unwrap();
        assert!(pure.decomposition_residual(&w) < 1e-12);

        let coeffs = mesh.grad_coeffs();
        let tgrad = mesh_gradient(&u, &mesh).unwrap();
        let mut tape = Tape::new();
        let uh = tape.leaf(u_hat_t.clone()).unwrap();
        let qh = tape.leaf(q_hat_t.clone()).unwrap();
        let sl = total_loss_tape(&mut tape, uh, qh, &u, &tgrad, &coeffs, &w).unwrap();
        assert!((tape.value(sl.total).item() - pure.total).abs() < 1e-12);
        assert!((tape.value(sl.val).item() - pure.val).abs() < 1e-12);
        assert!((tape.value(sl.grad).item() - pure.grad).abs() < 1e-12);
        assert!((tape.value(sl.flux).item() - pure.flux).abs() < 1e-12);
        assert!((tape.value(sl.cons).item() - pure.cons).abs() < 1e-12);
    }

    #[test]
    fn zero_weights_make_total_equal_val() {
        let mesh = Mesh::<f64>::regular(5, 5).unwrap();
        let mut rng = rng_from_seed(4);
        let n = mesh.nodes();
        let u = mesh.field(|x, _| x);
        let u_hat = Tensor::new(vec![n, 1], normal_vec::<f64>(&mut rng, n)).unwrap();
        let q_hat = Tensor::new(vec![n, 2], normal_vec::<f64>(&mut rng, 2 * n)).unwrap();
        let r = total_loss(&u_hat, &q_hat, &u, &mesh, &LossWeights::value_only()).unwrap();
        assert_eq!(r.total, r.val);
        assert!(r.grad > 0.0);
    }

    #[test]
    fn negative_weight_is_rejected() {
        let w = LossWeights { lambda_g: -0.1, ..LossWeights::default() };
        assert!(w.validate().is_err());
    }
}
