//! Mesh-consistent discrete gradients.
//!
//! Centered differences in index space are mapped to physical derivatives by
//! solving, per interior node, the 2x2 system
//!
//! ```text
//! [ di_u ]   [ a  b ] [ u_x ]
//! [ dj_u ] = [ c  d ] [ u_y ],   (a, b) = di_x, (c, d) = dj_x,
//! ```
//!
//! giving `u_x = (di_u * d - dj_u * b) / (ad - bc)` and
//! `u_y = (-di_u * c + dj_u * a) / (ad - bc)`. Nodes where `|ad - bc|` falls
//! below a scale-relative threshold are masked out; boundary nodes have no
//! centered difference and are always masked.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{Tape, VarId};
use crate::tensor::Tensor;

/// Relative singularity threshold: `|det| <= 1e-12 * scale^2` masks a node.
pub const DET_EPS_REL: f64 = 1e-12;

/// Structured mesh of physical node coordinates.
#[derive(Clone, Debug)]
pub struct Mesh<F: Scalar> {
    pub h: usize,
    pub w: usize,
    /// `[N, 2]` row-major over the grid: node `(i, j)` at `i * w + j`.
    pub coords: Tensor<F>,
}

impl<F: Scalar> Mesh<F> {
    pub fn new(h: usize, w: usize, coords: Tensor<F>) -> Result<Self> {
        if coords.shape != [h * w, 2] {
            return Err(Error::Shape {
                op: "Mesh::new",
                detail: format!("coords {:?} vs grid {h}x{w}", coords.shape),
            });
        }
        coords.ensure_finite("mesh coordinates")?;
        Ok(Mesh { h, w, coords })
    }

    /// Regular unit-square grid: `x = j/(w-1)`, `y = i/(h-1)`.
    pub fn regular(h: usize, w: usize) -> Result<Self> {
        if h < 2 || w < 2 {
            return Err(Error::Config(format!("grid must be at least 2x2, got {h}x{w}")));
        }
        let mut data = Vec::with_capacity(h * w * 2);
        for i in 0..h {
            for j in 0..w {
                data.push(F::from_count(j) / F::from_count(w - 1));
                data.push(F::from_count(i) / F::from_count(h - 1));
            }
        }
        Ok(Mesh { h, w, coords: Tensor::new(vec![h * w, 2], data)? })
    }

    /// Regular grid rotated by `angle` about the square's center.
    pub fn rotated(h: usize, w: usize, angle: f64) -> Result<Self> {
        let base = Self::regular(h, w)?;
        let (s, c) = (F::c(angle.sin()), F::c(angle.cos()));
        let half = F::c(0.5);
        let mut data = base.coords.data;
        for pair in data.chunks_mut(2) {
            let x = pair[0] - half;
            let y = pair[1] - half;
            pair[0] = c * x - s * y + half;
            pair[1] = s * x + c * y + half;
        }
        Ok(Mesh { h, w, coords: Tensor::new(vec![h * w, 2], data)? })
    }

    pub fn nodes(&self) -> usize {
        self.h * self.w
    }

    pub fn coord(&self, i: usize, j: usize) -> (F, F) {
        let n = i * self.w + j;
        (self.coords.data[2 * n], self.coords.data[2 * n + 1])
    }

    /// Evaluate `f(x, y)` at every node into an `[H, W]` field.
    pub fn field(&self, f: impl Fn(F, F) -> F) -> Tensor<F> {
        let data = self.coords.data.chunks(2).map(|p| f(p[0], p[1])).collect();
        Tensor { shape: vec![self.h, self.w], data, grad: None }
    }

    /// Precompute the per-node linear map from index differences to physical
    /// derivatives, with the singularity/boundary mask folded in (masked
    /// nodes get all-zero coefficients).
    pub fn grad_coeffs(&self) -> GradCoeffs<F> {
        let (h, w) = (self.h, self.w);
        let n = h * w;
        let mut c = GradCoeffs {
            h,
            w,
            b_xx: vec![F::zero(); n],
            b_xy: vec![F::zero(); n],
            b_yx: vec![F::zero(); n],
            b_yy: vec![F::zero(); n],
            valid: vec![false; n],
            valid_count: 0,
            masked_interior: 0,
        };
        if h < 3 || w < 3 {
            return c;
        }
        let eps_rel = F::c(DET_EPS_REL);
        for i in 1..h - 1 {
            for j in 1..w - 1 {
                let node = i * w + j;
                let (xn, yn) = self.coord(i + 1, j);
                let (xs, ys) = self.coord(i - 1, j);
                let (xe, ye) = self.coord(i, j + 1);
                let (xw, yw) = self.coord(i, j - 1);
                let a = xn - xs;
                let b = yn - ys;
                let cc = xe - xw;
                let d = ye - yw;
                let det = a * d - b * cc;
                let scale = a.abs().max(b.abs()).max(cc.abs()).max(d.abs());
                if det.abs() <= eps_rel * scale * scale || scale == F::zero() {
                    c.masked_interior += 1;
                    continue;
                }
                c.valid[node] = true;
                c.valid_count += 1;
                c.b_xx[node] = d / det;
                c.b_xy[node] = -b / det;
                c.b_yx[node] = -cc / det;
                c.b_yy[node] = a / det;
            }
        }
        c
    }
}

/// Coefficients of `u_x = b_xx * di_u + b_xy * dj_u`,
/// `u_y = b_yx * di_u + b_yy * dj_u`, zeroed at masked nodes.
#[derive(Clone, Debug)]
pub struct GradCoeffs<F: Scalar> {
    pub h: usize,
    pub w: usize,
    pub b_xx: Vec<F>,
    pub b_xy: Vec<F>,
    pub b_yx: Vec<F>,
    pub b_yy: Vec<F>,
    pub valid: Vec<bool>,
    pub valid_count: usize,
    /// Interior nodes masked for near-singular local directions.
    pub masked_interior: usize,
}

impl<F: Scalar> GradCoeffs<F> {
    pub fn mask_field(&self) -> Tensor<F> {
        let data = self.valid.iter().map(|&v| if v { F::one() } else { F::zero() }).collect();
        Tensor { shape: vec![self.h, self.w], data, grad: None }
    }
}

/// Physical gradient field with its validity mask.
#[derive(Clone, Debug)]
pub struct GradField<F: Scalar> {
    pub ux: Tensor<F>,
    pub uy: Tensor<F>,
    pub valid: Vec<bool>,
    pub valid_count: usize,
}

/// Interior centered differences of an `[H, W]` field; boundary entries are
/// zero (and masked by every consumer).
pub fn centered_diffs<F: Scalar>(field: &Tensor<F>) -> Result<(Tensor<F>, Tensor<F>)> {
    if field.rank() != 2 {
        return Err(Error::Shape {
            op: "centered_diffs",
            detail: format!("expected [h, w], got {:?}", field.shape),
        });
    }
    let (h, w) = (field.shape[0], field.shape[1]);
    if h < 3 || w < 3 {
        return Err(Error::Config(format!("grid too small for centered differences: {h}x{w}")));
    }
    let mut di = vec![F::zero(); h * w];
    let mut dj = vec![F::zero(); h * w];
    for i in 1..h - 1 {
        for j in 1..w - 1 {
            di[i * w + j] = field.data[(i + 1) * w + j] - field.data[(i - 1) * w + j];
            dj[i * w + j] = field.data[i * w + j + 1] - field.data[i * w + j - 1];
        }
    }
    Ok((
        Tensor { shape: vec![h, w], data: di, grad: None },
        Tensor { shape: vec![h, w], data: dj, grad: None },
    ))
}

/// Mesh-consistent gradient of a scalar field (pure evaluation).
pub fn mesh_gradient<F: Scalar>(u: &Tensor<F>, mesh: &Mesh<F>) -> Result<GradField<F>> {
    if u.shape != [mesh.h, mesh.w] {
        return Err(Error::Shape {
            op: "mesh_gradient",
            detail: format!("field {:?} vs mesh {}x{}", u.shape, mesh.h, mesh.w),
        });
    }
    if mesh.h < 3 || mesh.w < 3 {
        return Err(Error::Config(format!(
            "grid too small for interior gradients: {}x{}",
            mesh.h, mesh.w
        )));
    }
    let coeffs = mesh.grad_coeffs();
    let (di, dj) = centered_diffs(u)?;
    let n = mesh.nodes();
    let mut ux = vec![F::zero(); n];
    let mut uy = vec![F::zero(); n];
    for node in 0..n {
        if coeffs.valid[node] {
            ux[node] = coeffs.b_xx[node] * di.data[node] + coeffs.b_xy[node] * dj.data[node];
            uy[node] = coeffs.b_yx[node] * di.data[node] + coeffs.b_yy[node] * dj.data[node];
        }
    }
    Ok(GradField {
        ux: Tensor { shape: vec![mesh.h, mesh.w], data: ux, grad: None },
        uy: Tensor { shape: vec![mesh.h, mesh.w], data: uy, grad: None },
        valid: coeffs.valid.clone(),
        valid_count: coeffs.valid_count,
    })
}

/// Taped mesh gradient of an `[H, W]` variable. Masked nodes have all-zero
/// coefficients, so their value and gradient contributions vanish.
pub fn mesh_gradient_tape<F: Scalar>(
    tape: &mut Tape<F>,
    u: VarId,
    coeffs: &GradCoeffs<F>,
) -> Result<(VarId, VarId)> {
    let (h, w) = (coeffs.h, coeffs.w);
    if tape.shape(u) != [h, w] {
        return Err(Error::Shape {
            op: "mesh_gradient_tape",
            detail: format!("field {:?} vs coeffs {}x{}", tape.shape(u), h, w),
        });
    }
    let up = tape.shift2d(u, 1, 0)?;
    let un = tape.shift2d(u, -1, 0)?;
    let di = tape.sub(up, un)?;
    let jp = tape.shift2d(u, 0, 1)?;
    let jn = tape.shift2d(u, 0, -1)?;
    let dj = tape.sub(jp, jn)?;
    let mk = |tape: &mut Tape<F>, v: &[F]| -> Result<VarId> {
        tape.constant(Tensor { shape: vec![h, w], data: v.to_vec(), grad: None })
    };
    let bxx = mk(tape, &coeffs.b_xx)?;
    let bxy = mk(tape, &coeffs.b_xy)?;
    let byx = mk(tape, &coeffs.b_yx)?;
    let byy = mk(tape, &coeffs.b_yy)?;
    let ux_a = tape.mul(di, bxx)?;
    let ux_b = tape.mul(dj, bxy)?;
    let ux = tape.add(ux_a, ux_b)?;
    let uy_a = tape.mul(di, byx)?;
    let uy_b = tape.mul(dj, byy)?;
    let uy = tape.add(uy_a, uy_b)?;
    Ok((ux, uy))
}
