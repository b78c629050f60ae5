//! Learned geometry chart: a small MLP mapping physical coordinates to
//! latent chart coordinates `zeta = (xi, eta)` in `[-1, 1]^2`,
//! `tanh(V2 SiLU(V1 x + c1) + c2)`. The chart is trained end to end; its
//! outputs drive the rotary positions of axial attention.

use crate::error::{Error, Result};
use crate::params::{Binding, ParamId, ParamSet};
use crate::rng::{normal_vec, CatoRng};
use crate::scalar::Scalar;
use crate::tape::{FlopClass, Tape, VarId};
use crate::tensor::Tensor;
use rand::Rng;

/// Per-node chart coordinates on an `H x W` grid (point clouds use `h = 1`).
#[derive(Clone, Debug)]
pub struct ChartCoords<F: Scalar> {
    pub h: usize,
    pub w: usize,
    /// Interleaved `(xi, eta)` pairs, row-major over nodes: shape `[N, 2]`.
    pub zeta: Tensor<F>,
}

impl<F: Scalar> ChartCoords<F> {
    pub fn new(h: usize, w: usize, zeta: Tensor<F>) -> Result<Self> {
        if zeta.shape != [h * w, 2] {
            return Err(Error::Shape {
                op: "ChartCoords::new",
                detail: format!("expected [{}, 2], got {:?}", h * w, zeta.shape),
            });
        }
        Ok(ChartCoords { h, w, zeta })
    }

    pub fn nodes(&self) -> usize {
        self.h * self.w
    }

    pub fn get(&self, node: usize) -> (F, F) {
        (self.zeta.data[2 * node], self.zeta.data[2 * node + 1])
    }

    pub fn xi(&self) -> Vec<F> {
        self.zeta.data.iter().step_by(2).cloned().collect()
    }

    pub fn eta(&self) -> Vec<F> {
        self.zeta.data.iter().skip(1).step_by(2).cloned().collect()
    }

    pub fn in_unit_box(&self) -> bool {
        self.zeta.data.iter().all(|v| v.abs() <= F::one())
    }

    /// Largest node-wise Euclidean deviation from another chart.
    pub fn max_deviation(&self, other: &ChartCoords<F>) -> F {
        self.zeta
            .data
            .chunks(2)
            .zip(other.zeta.data.chunks(2))
            .map(|(a, b)| {
                let dx = a[0] - b[0];
                let dy = a[1] - b[1];
                (dx * dx + dy * dy).sqrt()
            })
            .fold(F::zero(), F::max)
    }
}

/// The chart network parameters (2 -> hidden -> 2).
#[derive(Clone, Debug)]
pub struct ChartNet {
    pub v1: ParamId,
    pub c1: ParamId,
    pub v2: ParamId,
    pub c2: ParamId,
    pub hidden: usize,
}

impl ChartNet {
    /// Scaled-Gaussian init (std `1/sqrt(fan_in)`) keeps the initial chart
    /// away from tanh saturation.
    pub fn new<F: Scalar>(
        ps: &mut ParamSet<F>,
        prefix: &str,
        hidden: usize,
        rng: &mut CatoRng,
    ) -> Result<Self> {
        if hidden == 0 {
            return Err(Error::Config("chart hidden width must be positive".into()));
        }
        let s1 = 1.0 / (2.0f64).sqrt();
        let s2 = 1.0 / (hidden as f64).sqrt();
        let v1 = {
            let mut d = normal_vec::<F>(rng, 2 * hidden);
            d.iter_mut().for_each(|v| *v = *v * F::c(s1));
            ps.add(format!("{prefix}.v1"), Tensor::new(vec![2, hidden], d)?)?
        };
        let c1 = ps.add(format!("{prefix}.c1"), Tensor::zeros(vec![hidden]))?;
        let v2 = {
            let mut d = normal_vec::<F>(rng, hidden * 2);
            d.iter_mut().for_each(|v| *v = *v * F::c(s2));
            ps.add(format!("{prefix}.v2"), Tensor::new(vec![hidden, 2], d)?)?
        };
        let c2 = ps.add(format!("{prefix}.c2"), Tensor::zeros(vec![2]))?;
        Ok(ChartNet { v1, c1, v2, c2, hidden })
    }

    /// Taped forward: `coords` is an `[N, 2]` variable; returns `[N, 2]`.
    pub fn forward_tape<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        binding: &Binding,
        coords: VarId,
    ) -> Result<VarId> {
        if tape.shape(coords).len() != 2 || tape.shape(coords)[1] != 2 {
            return Err(Error::Shape {
                op: "chart_forward",
                detail: format!("coordinates must be [N, 2], got {:?}", tape.shape(coords)),
            });
        }
        let prev = tape.set_class(FlopClass::Chart);
        let a = tape.matmul(coords, binding.var(self.v1))?;
        let a = tape.add_bias(a, binding.var(self.c1))?;
        let a = tape.silu(a)?;
        let b = tape.matmul(a, binding.var(self.v2))?;
        let b = tape.add_bias(b, binding.var(self.c2))?;
        let z = tape.tanh(b)?;
        tape.set_class(prev);
        Ok(z)
    }

    /// Pure forward over mesh coordinates stored as `[N, 2]`.
    pub fn forward_pure<F: Scalar>(&self, ps: &ParamSet<F>, coords: &Tensor<F>) -> Result<Tensor<F>> {
        if coords.rank() != 2 || coords.shape[1] != 2 {
            return Err(Error::Shape {
                op: "chart_forward",
                detail: format!("coordinates must be [N, 2], got {:?}", coords.shape),
            });
        }
        let n = coords.shape[0];
        let v1 = &ps.get(self.v1).tensor;
        let c1 = &ps.get(self.c1).tensor;
        let v2 = &ps.get(self.v2).tensor;
        let c2 = &ps.get(self.c2).tensor;
        let mut out = Vec::with_capacity(n * 2);
        let mut hid = vec![F::zero(); self.hidden];
        for node in 0..n {
            let x = coords.data[2 * node];
            let y = coords.data[2 * node + 1];
            for (j, h) in hid.iter_mut().enumerate() {
                let pre = x * v1.data[j] + y * v1.data[self.hidden + j] + c1.data[j];
                let sig = F::one() / (F::one() + (-pre).exp());
                *h = pre * sig;
            }
            for o in 0..2 {
                let mut acc = c2.data[o];
                for (j, h) in hid.iter().enumerate() {
                    acc += *h * v2.data[j * 2 + o];
                }
                out.push(acc.tanh());
            }
        }
        Tensor::new(vec![n, 2], out)
    }
}

/// Evaluate the chart on a grid of node coordinates (`[N, 2]`, row-major over
/// an `h x w` grid) and package the result.
pub fn chart_forward<F: Scalar>(
    net: &ChartNet,
    ps: &ParamSet<F>,
    coords: &Tensor<F>,
    h: usize,
    w: usize,
) -> Result<ChartCoords<F>> {
    let zeta = net.forward_pure(ps, coords)?;
    ChartCoords::new(h, w, zeta)
}

fn clamp_unit<F: Scalar>(v: F) -> F {
    v.max(-F::one()).min(F::one())
}

/// Per-node random perturbation of Euclidean norm at most `delta`, clamped
/// back into `[-1, 1]^2`.
pub fn chart_perturb<F: Scalar>(
    z: &ChartCoords<F>,
    delta: f64,
    rng: &mut CatoRng,
) -> Result<ChartCoords<F>> {
    if delta < 0.0 {
        return Err(Error::Config(format!("perturbation radius must be >= 0, got {delta}")));
    }
    let mut out = z.zeta.data.clone();
    for pair in out.chunks_mut(2) {
        let angle = rng.gen_range(0.0..std::f64::consts::TAU);
        let radius = delta * rng.gen_range(0.0f64..=1.0).sqrt();
        pair[0] = clamp_unit(pair[0] + F::c(radius * angle.cos()));
        pair[1] = clamp_unit(pair[1] + F::c(radius * angle.sin()));
    }
    ChartCoords::new(z.h, z.w, Tensor::new(vec![z.nodes(), 2], out)?)
}

/// Perturb along a fixed per-node unit direction field with magnitude
/// exactly `delta` (before clamping); used for monotonicity sweeps.
pub fn chart_perturb_along<F: Scalar>(
    z: &ChartCoords<F>,
    directions: &[(F, F)],
    delta: f64,
) -> Result<ChartCoords<F>> {
    if delta < 0.0 {
        return Err(Error::Config(format!("perturbation radius must be >= 0, got {delta}")));
    }
    if directions.len() != z.nodes() {
        return Err(Error::Shape {
            op: "chart_perturb_along",
            detail: "one direction per node required".into(),
        });
    }
    let d = F::c(delta);
    let mut out = z.zeta.data.clone();
    for (pair, dir) in out.chunks_mut(2).zip(directions) {
        pair[0] = clamp_unit(pair[0] + d * dir.0);
        pair[1] = clamp_unit(pair[1] + d * dir.1);
    }
    ChartCoords::new(z.h, z.w, Tensor::new(vec![z.nodes(), 2], out)?)
}

/// Smooth random perturbation: a low-order trigonometric vector field of the
/// chart coordinates, scaled so the largest node-wise norm is exactly `delta`
/// (0 stays 0). Smoothness matters when a perturbed chart must remain a
/// fittable function of the mesh coordinates.
pub fn chart_perturb_smooth<F: Scalar>(
    z: &ChartCoords<F>,
    delta: f64,
    rng: &mut CatoRng,
) -> Result<ChartCoords<F>> {
    if delta < 0.0 {
        return Err(Error::Config(format!("perturbation radius must be >= 0, got {delta}")));
    }
    let n = z.nodes();
    // v(zeta) = sum of a few random plane waves in zeta.
    let modes = 3;
    let coef: Vec<f64> = (0..modes * 6).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut field = vec![(0.0f64, 0.0f64); n];
    let mut max_norm = 0.0f64;
    for (node, f) in field.iter_mut().enumerate() {
        let (xi, eta) = z.get(node);
        let (xi, eta) = (xi.to_f64_c(), eta.to_f64_c());
        let mut vx = 0.0;
        let mut vy = 0.0;
        for m in 0..modes {
            let c = &coef[m * 6..(m + 1) * 6];
            let phase = c[0] * xi + c[1] * eta + c[2];
            vx += c[3] * phase.sin();
            vy += c[4] * (phase + c[5]).cos();
        }
        *f = (vx, vy);
        max_norm = max_norm.max((vx * vx + vy * vy).sqrt());
    }
    let scale = if max_norm > 0.0 { delta / max_norm } else { 0.0 };
    let mut out = z.zeta.data.clone();
    for (pair, f) in out.chunks_mut(2).zip(&field) {
        pair[0] = clamp_unit(pair[0] + F::c(f.0 * scale));
        pair[1] = clamp_unit(pair[1] + F::c(f.1 * scale));
    }
    ChartCoords::new(z.h, z.w, Tensor::new(vec![n, 2], out)?)
}

/// Write a `x,y,xi,eta` CSV for chart visualization.
pub fn dump_chart_csv<F: Scalar>(
    path: &std::path::Path,
    coords: &Tensor<F>,
    z: &ChartCoords<F>,
) -> Result<()> {
    use std::io::Write;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "x,y,xi,eta")?;
    for node in 0..z.nodes() {
        let (xi, eta) = z.get(node);
        writeln!(
            f,
            "{},{},{},{}",
            coords.data[2 * node].to_f64_c(),
            coords.data[2 * node + 1].to_f64_c(),
            xi.to_f64_c(),
            eta.to_f64_c()
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    fn zero_chart(hidden: usize) -> (ParamSet<f64>, ChartNet) {
        let mut ps = ParamSet::new();
        let mut rng = rng_from_seed(0);
        let net = ChartNet::new(&mut ps, "chart", hidden, &mut rng).unwrap();
        for p in ps.all_mut() {
            p.tensor.data.iter_mut().for_each(|v| *v = 0.0);
        }
        (ps, net)
    }

    fn grid_coords(h: usize, w: usize) -> Tensor<f64> {
        let mut data = Vec::with_capacity(h * w * 2);
        for i in 0..h {
            for j in 0..w {
                data.push(j as f64 / (w - 1).max(1) as f64);
                data.push(i as f64 / (h - 1).max(1) as f64);
            }
        }
        Tensor::new(vec![h * w, 2], data).unwrap()
    }

    #[test]
    fn zero_weights_give_zero_chart() {
        let (ps, net) = zero_chart(8);
        let z = chart_forward(&net, &ps, &grid_coords(3, 4), 3, 4).unwrap();
        assert!(z.zeta.data.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn outputs_stay_in_unit_box() {
        let mut ps = ParamSet::new();
        let mut rng = rng_from_seed(3);
        let net = ChartNet::new(&mut ps, "chart", 16, &mut rng).unwrap();
        // Exaggerate the weights; tanh must still bound the output.
        for p in ps.all_mut() {
            p.tensor.data.iter_mut().for_each(|v| *v *= 50.0);
        }
        let z = chart_forward(&net, &ps, &grid_coords(5, 5), 5, 5).unwrap();
        assert!(z.in_unit_box());
    }

    #[test]
    fn hand_evaluated_point_matches() {
        // v1 column-selects (identity-like), v2 is a scaled identity, biases
        // zero: zeta = tanh(0.7 * silu(x)).
        let (mut ps, net) = zero_chart(2);
        {
            let t = &mut ps.get_mut(net.v1).tensor;
            t.data[0] = 1.0; // x -> hidden 0
            t.data[3] = 1.0; // y -> hidden 1
        }
        {
            let t = &mut ps.get_mut(net.v2).tensor;
            t.data[0] = 0.7;
            t.data[3] = 0.7;
        }
        let coords = Tensor::new(vec![1, 2], vec![0.5, -0.5]).unwrap();
        let z = chart_forward(&net, &ps, &coords, 1, 1).unwrap();
        let silu = |x: f64| x / (1.0 + (-x).exp());
        assert!((z.zeta.data[0] - (0.7 * silu(0.5)).tanh()).abs() < 1e-14);
        assert!((z.zeta.data[1] - (0.7 * silu(-0.5)).tanh()).abs() < 1e-14);
    }

    #[test]
    fn taped_and_pure_forward_agree() {
        let mut ps = ParamSet::new();
        let mut rng = rng_from_seed(11);
        let net = ChartNet::new(&mut ps, "chart", 8, &mut rng).unwrap();
        let coords = grid_coords(4, 3);
        let pure = net.forward_pure(&ps, &coords).unwrap();
        let mut tape = Tape::new();
        let binding = ps.bind(&mut tape).unwrap();
        let cv = tape.constant(coords).unwrap();
        let z = net.forward_tape(&mut tape, &binding, cv).unwrap();
        for (a, b) in tape.value(z).data.iter().zip(&pure.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn perturbation_respects_radius_and_box() {
        let mut ps = ParamSet::new();
        let mut rng = rng_from_seed(5);
        let net = ChartNet::new(&mut ps, "chart", 8, &mut rng).unwrap();
        let z = chart_forward(&net, &ps, &grid_coords(6, 6), 6, 6).unwrap();
        let z0 = chart_perturb(&z, 0.0, &mut rng).unwrap();
        assert_eq!(z0.zeta.data, z.zeta.data);
        let zp = chart_perturb(&z, 0.1, &mut rng).unwrap();
        assert!(zp.max_deviation(&z) <= 0.1 + 1e-12);
        assert!(zp.in_unit_box());
        assert!(chart_perturb(&z, -0.5, &mut rng).is_err());
    }

    #[test]
    fn smooth_perturbation_hits_requested_radius() {
        let mut ps = ParamSet::new();
        let mut rng = rng_from_seed(7);
        let net = ChartNet::new(&mut ps, "chart", 8, &mut rng).unwrap();
        let z = chart_forward(&net, &ps, &grid_coords(6, 6), 6, 6).unwrap();
        let zp = chart_perturb_smooth(&z, 0.05, &mut rng).unwrap();
        let dev = zp.max_deviation(&z);
        assert!(dev <= 0.05 + 1e-12);
        assert!(dev > 0.04, "smooth field should be scaled to the radius, got {dev}");
    }
}
