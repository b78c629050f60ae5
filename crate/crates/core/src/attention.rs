//! Charted axial self-attention: multi-head attention run independently
//! along mesh rows (rotary positions `xi`) and columns (positions `eta`),
//! with the two branch outputs summed. Query/key/value projections are
//! shared between branches; each branch has its own output projection.

use crate::error::{Error, Result};
use crate::params::{Binding, ParamId, ParamSet};
use crate::rng::{normal_vec, CatoRng};
use crate::rope::RopeConfig;
use crate::scalar::Scalar;
use crate::tape::{FlopClass, Tape, VarId};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Axis {
    Row,
    Col,
}

#[derive(Clone, Debug)]
pub struct AxialAttentionLayer {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o_row: ParamId,
    pub w_o_col: ParamId,
    pub heads: usize,
    pub head_dim: usize,
    pub rope: RopeConfig,
}

impl AxialAttentionLayer {
    pub fn new<F: Scalar>(
        ps: &mut ParamSet<F>,
        prefix: &str,
        embed_dim: usize,
        heads: usize,
        rope_theta: f64,
        rope_scale: f64,
        rng: &mut CatoRng,
    ) -> Result<Self> {
        if heads == 0 || embed_dim % heads != 0 {
            return Err(Error::Config(format!(
                "embed dim {embed_dim} must be divisible by heads {heads}"
            )));
        }
        let head_dim = embed_dim / heads;
        let rope = RopeConfig::new(head_dim, rope_theta, rope_scale)?;
        let std = 1.0 / (embed_dim as f64).sqrt();
        let square = |name: &str, ps: &mut ParamSet<F>, rng: &mut CatoRng| -> Result<ParamId> {
            let mut d = normal_vec::<F>(rng, embed_dim * embed_dim);
            d.iter_mut().for_each(|v| *v = *v * F::c(std));
            ps.add(format!("{prefix}.{name}"), Tensor::new(vec![embed_dim, embed_dim], d)?)
        };
        Ok(AxialAttentionLayer {
            w_q: square("w_q", ps, rng)?,
            w_k: square("w_k", ps, rng)?,
            w_v: square("w_v", ps, rng)?,
            w_o_row: square("w_o_row", ps, rng)?,
            w_o_col: square("w_o_col", ps, rng)?,
            heads,
            head_dim,
            rope,
        })
    }

    fn project<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        binding: &Binding,
        h2d: VarId,
    ) -> Result<(VarId, VarId, VarId)> {
        let prev = tape.set_class(FlopClass::AttentionProj);
        let q = tape.matmul(h2d, binding.var(self.w_q))?;
        let k = tape.matmul(h2d, binding.var(self.w_k))?;
        let v = tape.matmul(h2d, binding.var(self.w_v))?;
        tape.set_class(prev);
        Ok((q, k, v))
    }

    /// One attention branch over rows or columns of an `h x w` grid.
    ///
    /// `pos` is the `[N, 1]` rotary position column (`xi` for rows, `eta`
    /// for columns); `q`, `k`, `v` are the shared `[N, C]` projections.
    fn branch<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        binding: &Binding,
        q: VarId,
        k: VarId,
        v: VarId,
        pos: VarId,
        grid: (usize, usize),
        axis: Axis,
    ) -> Result<VarId> {
        let (h, w) = grid;
        let n = h * w;
        let dh = self.head_dim;
        if tape.shape(q) != [n, self.heads * dh] {
            return Err(Error::Shape {
                op: "axial_attention",
                detail: format!("projection shape {:?} vs grid {}x{}", tape.shape(q), h, w),
            });
        }
        if tape.shape(pos) != [n, 1] {
            return Err(Error::Shape {
                op: "axial_attention",
                detail: format!("positions must be [{n}, 1], got {:?}", tape.shape(pos)),
            });
        }
        // One set of pair angles per node, tiled across heads so the whole
        // width rotates in a single op.
        let tiled: Vec<F> = {
            let base = self.rope.scaled_frequencies::<F>();
            let mut t = Vec::with_capacity(self.heads * base.len());
            for _ in 0..self.heads {
                t.extend_from_slice(&base);
            }
            t
        };
        let omega = tape.constant(Tensor::new(vec![1, self.heads * dh / 2], tiled)?)?;
        let angles = tape.matmul(pos, omega)?;
        let cos_a = tape.cos(angles)?;
        let sin_a = tape.sin(angles)?;
        let inv_sqrt = F::c(1.0 / (dh as f64).sqrt());

        let qr = tape.rope_rotate(q, cos_a, sin_a)?;
        let qr = tape.scale(qr, inv_sqrt)?;
        let kr = tape.rope_rotate(k, cos_a, sin_a)?;

        // Batch layout [batch, seq, dh]: rows batch over (row, head),
        // columns over (col, head).
        let m = self.heads;
        let to_seq = |tape: &mut Tape<F>, x: VarId| -> Result<VarId> {
            let x4 = tape.reshape(x, vec![h, w, m, dh])?;
            let perm: &[usize] = match axis {
                Axis::Row => &[0, 2, 1, 3],
                Axis::Col => &[1, 2, 0, 3],
            };
            let xp = tape.permute(x4, perm)?;
            let (bsz, len) = match axis {
                Axis::Row => (h * m, w),
                Axis::Col => (w * m, h),
            };
            tape.reshape(xp, vec![bsz, len, dh])
        };
        let qs = to_seq(tape, qr)?;
        let ks = to_seq(tape, kr)?;
        let vs = to_seq(tape, v)?;
        let scores = tape.bmm_nt(qs, ks)?;
        let att = tape.softmax_last(scores)?;
        let out = tape.bmm(att, vs)?;
        // Back to [n, c].
        let merged = {
            let (d0, d1, back_perm): (usize, usize, &[usize]) = match axis {
                Axis::Row => (h, w, &[0, 2, 1, 3]),
                Axis::Col => (w, h, &[2, 0, 1, 3]),
            };
            let o4 = tape.reshape(out, vec![d0, m, d1, dh])?;
            let op = tape.permute(o4, back_perm)?;
            tape.reshape(op, vec![n, m * dh])?
        };
        let w_o = match axis {
            Axis::Row => self.w_o_row,
            Axis::Col => self.w_o_col,
        };
        let prev = tape.set_class(FlopClass::AttentionProj);
        let out = tape.matmul(merged, binding.var(w_o));
        tape.set_class(prev);
        out
    }

    /// Attention over each mesh row with rotary positions `xi`.
    pub fn row_attention<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        binding: &Binding,
        h2d: VarId,
        xi: VarId,
        grid: (usize, usize),
    ) -> Result<VarId> {
        let prev = tape.set_class(FlopClass::Attention);
        let (q, k, v) = self.project(tape, binding, h2d)?;
        let out = self.branch(tape, binding, q, k, v, xi, grid, Axis::Row);
        tape.set_class(prev);
        out
    }

    /// Attention over each mesh column with rotary positions `eta`.
    pub fn col_attention<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        binding: &Binding,
        h2d: VarId,
        eta: VarId,
        grid: (usize, usize),
    ) -> Result<VarId> {
        let prev = tape.set_class(FlopClass::Attention);
        let (q, k, v) = self.project(tape, binding, h2d)?;
        let out = self.branch(tape, binding, q, k, v, eta, grid, Axis::Col);
        tape.set_class(prev);
        out
    }

    /// Full axial operator: row branch plus column branch, sharing one set
    /// of query/key/value projections.
    pub fn forward<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        binding: &Binding,
        h2d: VarId,
        zeta: VarId,
        grid: (usize, usize),
    ) -> Result<VarId> {
        let prev = tape.set_class(FlopClass::Attention);
        let result = (|| {
            let (q, k, v) = self.project(tape, binding, h2d)?;
            let xi = tape.narrow(zeta, 1, 0, 1)?;
            let eta = tape.narrow(zeta, 1, 1, 1)?;
            let row = self.branch(tape, binding, q, k, v, xi, grid, Axis::Row)?;
            let col = self.branch(tape, binding, q, k, v, eta, grid, Axis::Col)?;
            tape.add(row, col)
        })();
        tape.set_class(prev);
        result
    }
}
